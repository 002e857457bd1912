//! Piecewise-linear sigmoid/tanh lookup tables.
//!
//! 256 equal segments over [-8, 8] (257 breakpoints, step 1/16). Inputs
//! outside the domain clamp to the end breakpoints. Interpolation is done
//! in f64 and the result is re-encoded once in the operand format.

use std::sync::LazyLock;

use serde::{Deserialize, Serialize};

use super::format::{Format, QVal};

pub const LUT_SEGMENTS: usize = 256;
pub const LUT_LO: f64 = -8.0;
pub const LUT_HI: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActKind {
    Sigmoid,
    Tanh,
}

impl ActKind {
    /// Exact activation, used by the full-precision model.
    pub fn exact(&self, x: f64) -> f64 {
        match self {
            ActKind::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            ActKind::Tanh => x.tanh(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ActLut {
    kind: ActKind,
    table: [f64; LUT_SEGMENTS + 1],
}

static SIGMOID: LazyLock<ActLut> = LazyLock::new(|| ActLut::new(ActKind::Sigmoid));
static TANH: LazyLock<ActLut> = LazyLock::new(|| ActLut::new(ActKind::Tanh));

impl ActLut {
    pub fn new(kind: ActKind) -> Self {
        let step = (LUT_HI - LUT_LO) / LUT_SEGMENTS as f64;
        let mut table = [0.0; LUT_SEGMENTS + 1];
        for (i, t) in table.iter_mut().enumerate() {
            *t = kind.exact(LUT_LO + i as f64 * step);
        }
        Self { kind, table }
    }

    pub fn get(kind: ActKind) -> &'static ActLut {
        match kind {
            ActKind::Sigmoid => &SIGMOID,
            ActKind::Tanh => &TANH,
        }
    }

    pub fn kind(&self) -> ActKind {
        self.kind
    }

    pub fn eval(&self, x: f64) -> f64 {
        if x <= LUT_LO {
            return self.table[0];
        }
        if x >= LUT_HI {
            return self.table[LUT_SEGMENTS];
        }
        let pos = (x - LUT_LO) * (LUT_SEGMENTS as f64 / (LUT_HI - LUT_LO));
        let i = (pos.floor() as usize).min(LUT_SEGMENTS - 1);
        let t = pos - i as f64;
        let (a, b) = (self.table[i], self.table[i + 1]);
        a + (b - a) * t
    }

    /// Activation on a code: interpolate, then round once into the same format.
    pub fn apply(&self, fmt: Format, bits: u16) -> u16 {
        fmt.encode(self.eval(fmt.decode(bits)))
    }
}

pub fn lut_activation(kind: ActKind, x: QVal) -> QVal {
    QVal::new(ActLut::get(kind).apply(x.fmt, x.bits), x.fmt)
}
