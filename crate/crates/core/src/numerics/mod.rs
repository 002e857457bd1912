//! Bit-exact arithmetic for the accelerator's small number formats.

mod acc;
mod format;
mod lut;
mod round;

pub use acc::{mul_codes, qmul, tree_sum, ExtAcc, ExtendedProduct};
pub use format::{decode, encode, pow2, FixedFormat, FloatFormat, Format, Parts, QVal};
pub use lut::{lut_activation, ActKind, ActLut, LUT_HI, LUT_LO, LUT_SEGMENTS};
pub use round::Rounded;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum NumericsError {
    #[error("invalid number format descriptor `{0}`")]
    BadFormat(String),
}
