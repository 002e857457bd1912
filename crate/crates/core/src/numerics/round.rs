//! The single rounding routine shared by `encode` and accumulator finalize.
//!
//! Input is an exact magnitude `mag * 2^lsb_exp` held as little-endian
//! 64-bit limbs. Output is the nearest code, ties to even, saturating.

use super::format::Format;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rounded {
    pub bits: u16,
    pub saturated: bool,
}

fn highest_bit(mag: &[u64]) -> Option<i64> {
    mag.iter()
        .enumerate()
        .rev()
        .find(|(_, &l)| l != 0)
        .map(|(i, &l)| i as i64 * 64 + 63 - l.leading_zeros() as i64)
}

fn bit(mag: &[u64], i: i64) -> bool {
    if i < 0 {
        return false;
    }
    let (limb, off) = ((i / 64) as usize, i % 64);
    limb < mag.len() && (mag[limb] >> off) & 1 == 1
}

fn any_below(mag: &[u64], i: i64) -> bool {
    // any set bit strictly below position i
    if i <= 0 {
        return false;
    }
    let (limb, off) = ((i / 64) as usize, i % 64);
    let limb = limb.min(mag.len());
    if mag[..limb].iter().any(|&l| l != 0) {
        return true;
    }
    limb < mag.len() && off > 0 && mag[limb] & ((1u64 << off) - 1) != 0
}

/// Bits `[shift, shift + 64)` of `mag`.
fn extract(mag: &[u64], shift: i64) -> u64 {
    let (limb, off) = ((shift / 64) as usize, (shift % 64) as u32);
    let lo = mag.get(limb).copied().unwrap_or(0);
    let hi = mag.get(limb + 1).copied().unwrap_or(0);
    if off == 0 {
        lo
    } else {
        (lo >> off) | (hi << (64 - off))
    }
}

/// `round_half_even(mag / 2^shift)`; caller guarantees the result fits in 63 bits.
fn shift_round(mag: &[u64], shift: i64) -> u64 {
    if shift <= 0 {
        return extract(mag, 0) << (-shift);
    }
    let q = extract(mag, shift);
    let half = bit(mag, shift - 1);
    if half && (any_below(mag, shift - 1) || q & 1 == 1) {
        q + 1
    } else {
        q
    }
}

pub fn round_magnitude(fmt: Format, neg: bool, mag: &[u64], lsb_exp: i32) -> Rounded {
    let Some(top) = highest_bit(mag) else {
        return Rounded { bits: signed_zero(fmt, neg), saturated: false };
    };
    let e = top + lsb_exp as i64;
    match fmt {
        Format::Float(f) => {
            let man = f.man_bits() as i64;
            if e > f.emax() as i64 {
                return Rounded { bits: fmt.saturated_code(neg), saturated: true };
            }
            let mut q = e.max(f.emin() as i64) - man;
            let mut r = shift_round(mag, q - lsb_exp as i64);
            if r == 0 {
                return Rounded { bits: signed_zero(fmt, neg), saturated: false };
            }
            if r >= 1 << (man + 1) {
                r >>= 1;
                q += 1;
            }
            let sign = if neg { 1u32 << (f.width() - 1) } else { 0 };
            if r < 1 << man {
                return Rounded { bits: (sign | r as u32) as u16, saturated: false };
            }
            let ef = q + man + f.bias() as i64;
            if ef > ((1i64 << f.exp_bits()) - 1) {
                return Rounded { bits: fmt.saturated_code(neg), saturated: true };
            }
            let bits = sign | (ef as u32) << man | (r as u32 & ((1 << man) - 1));
            Rounded { bits: bits as u16, saturated: false }
        }
        Format::Fixed(f) => {
            let frac = f.frac_bits() as i64;
            let w = f.width();
            let max_units = (1u64 << (w - 1)) - 1;
            let limit = if neg { max_units + 1 } else { max_units };
            // value >= 2^(int_bits + 1) saturates regardless of rounding
            if e > f.int_bits() as i64 + 1 {
                return Rounded { bits: fmt.saturated_code(neg), saturated: true };
            }
            let r = shift_round(mag, -frac - lsb_exp as i64);
            if r > limit {
                return Rounded { bits: fmt.saturated_code(neg), saturated: true };
            }
            let bits = if neg { ((1u64 << w) - r) & ((1u64 << w) - 1) } else { r };
            Rounded { bits: bits as u16, saturated: false }
        }
    }
}

fn signed_zero(fmt: Format, neg: bool) -> u16 {
    match fmt {
        Format::Float(f) if neg => 1 << (f.width() - 1),
        _ => 0,
    }
}
