//! Exact products and the extended-precision accumulator.
//!
//! Products of two codes are exact (double-width significand, summed
//! exponents). The accumulator keeps separate positive and negative
//! magnitudes as wide fixed-point integers, so every sum is exact and
//! order-independent. Rounding happens once, in `finalize`.

use super::format::{Format, QVal};
use super::round::{round_magnitude, Rounded};

const LIMBS: usize = 10;
/// Weight of bit 0 of the accumulator: 2^ACC_LSB.
const ACC_LSB: i32 = -320;

/// An exact product `(-1)^neg * sig * 2^lsb_exp`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ExtendedProduct {
    pub neg: bool,
    pub sig: u64,
    pub lsb_exp: i32,
}

impl ExtendedProduct {
    pub const ZERO: ExtendedProduct = ExtendedProduct { neg: false, sig: 0, lsb_exp: 0 };

    /// A zero product contributes nothing; the PE cell may be gated.
    pub fn is_skippable(&self) -> bool {
        self.sig == 0
    }

    pub fn value(&self) -> f64 {
        let v = self.sig as f64 * super::format::pow2(self.lsb_exp);
        if self.neg {
            -v
        } else {
            v
        }
    }
}

/// Exact product of two codes in the same format.
pub fn qmul(a: QVal, b: QVal) -> ExtendedProduct {
    debug_assert_eq!(a.fmt, b.fmt);
    mul_codes(a.fmt, a.bits, b.bits)
}

#[inline]
pub fn mul_codes(fmt: Format, a: u16, b: u16) -> ExtendedProduct {
    let pa = fmt.parts(a);
    let pb = fmt.parts(b);
    let sig = pa.sig as u64 * pb.sig as u64;
    if sig == 0 {
        return ExtendedProduct::ZERO;
    }
    ExtendedProduct { neg: pa.neg != pb.neg, sig, lsb_exp: pa.lsb_exp + pb.lsb_exp }
}

/// Exact extended-precision accumulator.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ExtAcc {
    pos: [u64; LIMBS],
    neg: [u64; LIMBS],
}

fn add_at(limbs: &mut [u64; LIMBS], sig: u64, lsb_exp: i32) {
    let shift = lsb_exp - ACC_LSB;
    debug_assert!(shift >= 0, "product below accumulator range");
    let (idx, off) = ((shift / 64) as usize, (shift % 64) as u32);
    let v = (sig as u128) << off;
    let mut carry;
    let (s, c) = limbs[idx].overflowing_add(v as u64);
    limbs[idx] = s;
    carry = c as u64;
    let mut i = idx + 1;
    let mut hi = (v >> 64) as u64;
    while (hi != 0 || carry != 0) && i < LIMBS {
        let (s1, c1) = limbs[i].overflowing_add(hi);
        let (s2, c2) = s1.overflowing_add(carry);
        limbs[i] = s2;
        carry = (c1 || c2) as u64;
        hi = 0;
        i += 1;
    }
}

fn add_limbs(dst: &mut [u64; LIMBS], src: &[u64; LIMBS]) {
    let mut carry = false;
    for i in 0..LIMBS {
        let (s1, c1) = dst[i].overflowing_add(src[i]);
        let (s2, c2) = s1.overflowing_add(carry as u64);
        dst[i] = s2;
        carry = c1 || c2;
    }
}

fn sub_limbs(a: &[u64; LIMBS], b: &[u64; LIMBS]) -> [u64; LIMBS] {
    let mut out = [0u64; LIMBS];
    let mut borrow = false;
    for i in 0..LIMBS {
        let (d1, b1) = a[i].overflowing_sub(b[i]);
        let (d2, b2) = d1.overflowing_sub(borrow as u64);
        out[i] = d2;
        borrow = b1 || b2;
    }
    out
}

fn cmp_limbs(a: &[u64; LIMBS], b: &[u64; LIMBS]) -> std::cmp::Ordering {
    for i in (0..LIMBS).rev() {
        match a[i].cmp(&b[i]) {
            std::cmp::Ordering::Equal => continue,
            o => return o,
        }
    }
    std::cmp::Ordering::Equal
}

impl ExtAcc {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add_product(&mut self, p: ExtendedProduct) {
        if p.sig == 0 {
            return;
        }
        if p.neg {
            add_at(&mut self.neg, p.sig, p.lsb_exp);
        } else {
            add_at(&mut self.pos, p.sig, p.lsb_exp);
        }
    }

    /// Add a code exactly (used for biases and accumulate-mode addends).
    #[inline]
    pub fn add_code(&mut self, fmt: Format, bits: u16) {
        let p = fmt.parts(bits);
        self.add_product(ExtendedProduct { neg: p.neg, sig: p.sig as u64, lsb_exp: p.lsb_exp });
    }

    pub fn sub_code(&mut self, fmt: Format, bits: u16) {
        let p = fmt.parts(bits);
        self.add_product(ExtendedProduct { neg: !p.neg, sig: p.sig as u64, lsb_exp: p.lsb_exp });
    }

    pub fn merge(&mut self, other: &ExtAcc) {
        add_limbs(&mut self.pos, &other.pos);
        add_limbs(&mut self.neg, &other.neg);
    }

    pub fn is_zero(&self) -> bool {
        self.pos == self.neg
    }

    /// Signed magnitude of the exact sum.
    fn magnitude(&self) -> (bool, [u64; LIMBS]) {
        match cmp_limbs(&self.pos, &self.neg) {
            std::cmp::Ordering::Less => (true, sub_limbs(&self.neg, &self.pos)),
            _ => (false, sub_limbs(&self.pos, &self.neg)),
        }
    }

    /// Round the exact sum to `fmt` once.
    pub fn finalize(&self, fmt: Format) -> Rounded {
        let (neg, mag) = self.magnitude();
        round_magnitude(fmt, neg, &mag, ACC_LSB)
    }

    /// Round `sum * scale` to `fmt` once; the multiply by the scale code is exact.
    pub fn finalize_scaled(&self, fmt: Format, scale: u16) -> Rounded {
        let (neg, mag) = self.magnitude();
        let sp = fmt.parts(scale);
        let mut wide = [0u64; LIMBS + 1];
        let mut carry = 0u128;
        for i in 0..LIMBS {
            let t = mag[i] as u128 * sp.sig as u128 + carry;
            wide[i] = t as u64;
            carry = t >> 64;
        }
        wide[LIMBS] = carry as u64;
        round_magnitude(fmt, neg != sp.neg, &wide, ACC_LSB + sp.lsb_exp)
    }

    /// Approximate value, for diagnostics only.
    pub fn approx(&self) -> f64 {
        let (neg, mag) = self.magnitude();
        let mut v = 0.0;
        for (i, &l) in mag.iter().enumerate() {
            v += l as f64 * super::format::pow2(ACC_LSB + 64 * i as i32);
        }
        if neg {
            -v
        } else {
            v
        }
    }
}

/// One PE block cycle: the 8 lane products summed exactly onto the carry-in.
pub fn tree_sum(products: &[ExtendedProduct; 8], carry_in: &ExtAcc) -> ExtAcc {
    let mut acc = carry_in.clone();
    for p in products {
        acc.add_product(*p);
    }
    acc
}
