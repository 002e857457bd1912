//! Golden model, micro-op compiler and cycle-accurate simulator for a
//! streaming time-frequency transformer speech-enhancement accelerator.

pub mod numerics;
pub mod model;
pub mod isa;
pub mod sim;
