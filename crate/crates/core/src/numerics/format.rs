//! Small floating-point and fixed-point formats used by the PE datapath.
//!
//! Every format is at most 16 bits wide, so codes are carried in a `u16`.
//! Float formats have one sign bit, an IEEE-style biased exponent with
//! subnormals, and no NaN/Inf: the all-ones exponent is an ordinary binade.
//! Fixed formats are two's complement with `frac_bits` fractional bits.
//! All conversions round to nearest, ties to even, and saturate.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::round::{round_magnitude, Rounded};
use super::NumericsError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FloatFormat {
    exp_bits: u8,
    man_bits: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FixedFormat {
    int_bits: u8,
    frac_bits: u8,
}

/// A numeric format a tensor or datapath can be quantized to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Format {
    Float(FloatFormat),
    Fixed(FixedFormat),
}

impl FloatFormat {
    pub fn new(exp_bits: u8, man_bits: u8) -> Result<Self, NumericsError> {
        if !(2..=8).contains(&exp_bits) || man_bits == 0 || 1 + exp_bits as u32 + man_bits as u32 > 16 {
            return Err(NumericsError::BadFormat(format!("fp:1:{exp_bits}:{man_bits}")));
        }
        Ok(Self { exp_bits, man_bits })
    }

    pub fn exp_bits(&self) -> u32 {
        self.exp_bits as u32
    }

    pub fn man_bits(&self) -> u32 {
        self.man_bits as u32
    }

    pub fn bias(&self) -> i32 {
        (1 << (self.exp_bits - 1)) - 1
    }

    /// Exponent of the smallest normal binade.
    pub fn emin(&self) -> i32 {
        1 - self.bias()
    }

    /// Exponent of the largest binade (all-ones exponent field).
    pub fn emax(&self) -> i32 {
        ((1 << self.exp_bits) - 1) - self.bias()
    }

    pub fn width(&self) -> u32 {
        1 + self.exp_bits() + self.man_bits()
    }

    fn max_exp_field(&self) -> u32 {
        (1 << self.exp_bits) - 1
    }
}

impl FixedFormat {
    pub fn new(int_bits: u8, frac_bits: u8) -> Result<Self, NumericsError> {
        if 1 + int_bits as u32 + frac_bits as u32 > 16 || int_bits as u32 + frac_bits as u32 == 0 {
            return Err(NumericsError::BadFormat(format!("fxp:1:{int_bits}:{frac_bits}")));
        }
        Ok(Self { int_bits, frac_bits })
    }

    pub fn int_bits(&self) -> u32 {
        self.int_bits as u32
    }

    pub fn frac_bits(&self) -> u32 {
        self.frac_bits as u32
    }

    pub fn width(&self) -> u32 {
        1 + self.int_bits() + self.frac_bits()
    }

    /// Largest positive integer code magnitude.
    fn max_units(&self) -> u64 {
        (1u64 << (self.int_bits + self.frac_bits)) - 1
    }
}

/// Decomposition of a code as `(-1)^neg * sig * 2^lsb_exp`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Parts {
    pub neg: bool,
    pub sig: u32,
    pub lsb_exp: i32,
}

impl Format {
    pub const FP16: Format = Format::Float(FloatFormat { exp_bits: 8, man_bits: 7 });
    pub const FP10: Format = Format::Float(FloatFormat { exp_bits: 5, man_bits: 4 });
    pub const FP9: Format = Format::Float(FloatFormat { exp_bits: 4, man_bits: 4 });
    pub const FP8: Format = Format::Float(FloatFormat { exp_bits: 4, man_bits: 3 });
    pub const FXP16: Format = Format::Fixed(FixedFormat { int_bits: 8, frac_bits: 7 });
    pub const FXP10: Format = Format::Fixed(FixedFormat { int_bits: 5, frac_bits: 4 });
    pub const FXP9: Format = Format::Fixed(FixedFormat { int_bits: 4, frac_bits: 4 });
    pub const FXP8: Format = Format::Fixed(FixedFormat { int_bits: 4, frac_bits: 3 });

    pub fn width(&self) -> u32 {
        match self {
            Format::Float(f) => f.width(),
            Format::Fixed(f) => f.width(),
        }
    }

    pub fn code_count(&self) -> u32 {
        1 << self.width()
    }

    fn mask(&self) -> u16 {
        ((1u32 << self.width()) - 1) as u16
    }

    /// Code of the largest finite positive value.
    pub fn max_code(&self) -> u16 {
        match self {
            Format::Float(f) => ((1u32 << (f.exp_bits() + f.man_bits())) - 1) as u16,
            Format::Fixed(f) => f.max_units() as u16,
        }
    }

    pub fn max_finite(&self) -> f64 {
        self.decode(self.max_code())
    }

    pub fn is_float(&self) -> bool {
        matches!(self, Format::Float(_))
    }

    /// Exact value of a code.
    pub fn decode(&self, bits: u16) -> f64 {
        let p = self.parts(bits);
        let v = p.sig as f64 * pow2(p.lsb_exp);
        if p.neg {
            -v
        } else {
            v
        }
    }

    /// True when the code represents zero (either sign).
    pub fn is_zero(&self, bits: u16) -> bool {
        match self {
            Format::Float(f) => bits & (((1u32 << (f.exp_bits() + f.man_bits())) - 1) as u16) == 0,
            Format::Fixed(_) => bits & self.mask() == 0,
        }
    }

    pub fn is_negative(&self, bits: u16) -> bool {
        bits >> (self.width() - 1) & 1 == 1 && !self.is_zero(bits)
    }

    /// Canonical positive zero.
    pub fn zero(&self) -> u16 {
        0
    }

    pub fn parts(&self, bits: u16) -> Parts {
        match self {
            Format::Float(f) => {
                let man = f.man_bits();
                let neg = (bits >> (f.width() - 1)) & 1 == 1;
                let ef = ((bits >> man) as u32) & f.max_exp_field();
                let mf = (bits as u32) & ((1 << man) - 1);
                if ef == 0 {
                    Parts { neg, sig: mf, lsb_exp: f.emin() - man as i32 }
                } else {
                    Parts { neg, sig: (1 << man) | mf, lsb_exp: ef as i32 - f.bias() - man as i32 }
                }
            }
            Format::Fixed(f) => {
                let w = f.width();
                let raw = (bits & self.mask()) as i32;
                let val = if raw >> (w - 1) & 1 == 1 { raw - (1 << w) } else { raw };
                Parts { neg: val < 0, sig: val.unsigned_abs(), lsb_exp: -(f.frac_bits() as i32) }
            }
        }
    }

    /// Round a finite real to the nearest code (ties to even), saturating.
    pub fn encode(&self, x: f64) -> u16 {
        self.encode_checked(x).bits
    }

    pub fn encode_checked(&self, x: f64) -> Rounded {
        if x.is_nan() {
            return Rounded { bits: 0, saturated: false };
        }
        if x.is_infinite() {
            return Rounded { bits: self.saturated_code(x < 0.0), saturated: true };
        }
        let (neg, mant, exp) = decompose_f64(x);
        round_magnitude(*self, neg, &[mant], exp)
    }

    /// Largest-magnitude code with the given sign.
    pub fn saturated_code(&self, neg: bool) -> u16 {
        match self {
            Format::Float(f) => {
                let m = self.max_code();
                if neg {
                    m | (1 << (f.width() - 1))
                } else {
                    m
                }
            }
            Format::Fixed(f) => {
                if neg {
                    // most negative representable magnitude is max_units + 1
                    ((1u32 << f.width()) - (f.max_units() as u32 + 1)) as u16
                } else {
                    f.max_units() as u16
                }
            }
        }
    }

    /// Negate a code exactly (saturating for the most negative fixed value).
    pub fn negate(&self, bits: u16) -> u16 {
        match self {
            Format::Float(f) => bits ^ (1 << (f.width() - 1)),
            Format::Fixed(_) => {
                let p = self.parts(bits);
                let v = if p.neg { p.sig as f64 } else { -(p.sig as f64) } * pow2(p.lsb_exp);
                self.encode(v)
            }
        }
    }

    /// ReLU on a code: non-positive values map to +0.
    pub fn relu(&self, bits: u16) -> u16 {
        if self.is_negative(bits) || self.is_zero(bits) {
            0
        } else {
            bits
        }
    }
}

impl FromStr for Format {
    type Err = NumericsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim().to_ascii_lowercase();
        match t.as_str() {
            "fp16" => return Ok(Format::FP16),
            "fp10" => return Ok(Format::FP10),
            "fp9" => return Ok(Format::FP9),
            "fp8" => return Ok(Format::FP8),
            "fxp16" => return Ok(Format::FXP16),
            "fxp10" => return Ok(Format::FXP10),
            "fxp9" => return Ok(Format::FXP9),
            "fxp8" => return Ok(Format::FXP8),
            _ => {}
        }
        let bad = || NumericsError::BadFormat(s.to_string());
        let parts: Vec<&str> = t.split(':').collect();
        if parts.len() != 4 || parts[1] != "1" {
            return Err(bad());
        }
        let a: u8 = parts[2].parse().map_err(|_| bad())?;
        let b: u8 = parts[3].parse().map_err(|_| bad())?;
        match parts[0] {
            "fp" => Ok(Format::Float(FloatFormat::new(a, b)?)),
            "fxp" => Ok(Format::Fixed(FixedFormat::new(a, b)?)),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Format::Float(x) => write!(f, "fp:1:{}:{}", x.exp_bits, x.man_bits),
            Format::Fixed(x) => write!(f, "fxp:1:{}:{}", x.int_bits, x.frac_bits),
        }
    }
}

/// A code together with its format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct QVal {
    pub bits: u16,
    pub fmt: Format,
}

impl QVal {
    pub fn new(bits: u16, fmt: Format) -> Self {
        Self { bits, fmt }
    }

    pub fn value(&self) -> f64 {
        self.fmt.decode(self.bits)
    }

    pub fn is_zero(&self) -> bool {
        self.fmt.is_zero(self.bits)
    }
}

/// Nearest code to `x` in `fmt`.
pub fn encode(x: f64, fmt: Format) -> QVal {
    QVal::new(fmt.encode(x), fmt)
}

/// Exact value of `q`.
pub fn decode(q: QVal) -> f64 {
    q.value()
}

/// Exact power of two for exponents inside the f64 range used here.
pub fn pow2(e: i32) -> f64 {
    if (-1022..=1023).contains(&e) {
        f64::from_bits(((e + 1023) as u64) << 52)
    } else {
        2f64.powi(e)
    }
}

/// Split a finite f64 into `(neg, integer significand, exponent)`.
fn decompose_f64(x: f64) -> (bool, u64, i32) {
    let b = x.to_bits();
    let neg = b >> 63 == 1;
    let ef = ((b >> 52) & 0x7ff) as i32;
    let frac = b & ((1u64 << 52) - 1);
    if ef == 0 {
        (neg, frac, -1074)
    } else {
        (neg, frac | (1u64 << 52), ef - 1075)
    }
}
