//! Arithmetic backends for the network kernels.
//!
//! The network is written once against [`Arith`]. [`F64Arith`] is the
//! full-precision reference; [`QuantArith`] reproduces the accelerator
//! datapath exactly: exact products, exact accumulation, one rounding per
//! output element, LUT activations.

use std::cell::Cell;
use std::fmt::Debug;

use crate::numerics::{mul_codes, ActKind, ActLut, ExtAcc, Format};

/// Epsilon added to the variance before the reciprocal square root in LN.
pub const LN_EPS: f64 = 1e-5;

pub trait Arith {
    type V: Copy + PartialEq + Debug + Send + Sync + 'static;
    type Acc: Clone;

    fn zero(&self) -> Self::V;
    fn is_zero(&self, v: Self::V) -> bool;
    fn from_f64(&self, x: f64) -> Self::V;
    fn to_f64(&self, v: Self::V) -> f64;

    fn acc(&self) -> Self::Acc;
    fn mac(&self, acc: &mut Self::Acc, a: Self::V, b: Self::V);
    fn add(&self, acc: &mut Self::Acc, v: Self::V);
    fn sub(&self, acc: &mut Self::Acc, v: Self::V);
    /// Round the accumulated value once.
    fn finish(&self, acc: &Self::Acc) -> Self::V;
    /// Round `acc * scale` once.
    fn finish_scaled(&self, acc: &Self::Acc, scale: Self::V) -> Self::V;

    fn relu(&self, v: Self::V) -> Self::V;
    fn act(&self, kind: ActKind, v: Self::V) -> Self::V;
    /// `1 / sqrt(var + LN_EPS)`.
    fn rsqrt_eps(&self, var: Self::V) -> Self::V;
}

/// Full-precision reference arithmetic with exact activations.
#[derive(Debug, Clone, Copy, Default)]
pub struct F64Arith;

impl Arith for F64Arith {
    type V = f64;
    type Acc = f64;

    fn zero(&self) -> f64 {
        0.0
    }
    fn is_zero(&self, v: f64) -> bool {
        v == 0.0
    }
    fn from_f64(&self, x: f64) -> f64 {
        x
    }
    fn to_f64(&self, v: f64) -> f64 {
        v
    }
    fn acc(&self) -> f64 {
        0.0
    }
    #[inline]
    fn mac(&self, acc: &mut f64, a: f64, b: f64) {
        *acc += a * b;
    }
    fn add(&self, acc: &mut f64, v: f64) {
        *acc += v;
    }
    fn sub(&self, acc: &mut f64, v: f64) {
        *acc -= v;
    }
    fn finish(&self, acc: &f64) -> f64 {
        *acc
    }
    fn finish_scaled(&self, acc: &f64, scale: f64) -> f64 {
        acc * scale
    }
    fn relu(&self, v: f64) -> f64 {
        if v > 0.0 {
            v
        } else {
            0.0
        }
    }
    fn act(&self, kind: ActKind, v: f64) -> f64 {
        kind.exact(v)
    }
    fn rsqrt_eps(&self, var: f64) -> f64 {
        1.0 / (var + LN_EPS).sqrt()
    }
}

/// Bit-exact model of the accelerator datapath in one format.
#[derive(Debug)]
pub struct QuantArith {
    fmt: Format,
    saturations: Cell<u64>,
}

impl QuantArith {
    pub fn new(fmt: Format) -> Self {
        Self { fmt, saturations: Cell::new(0) }
    }

    pub fn format(&self) -> Format {
        self.fmt
    }

    /// Number of finalize roundings that saturated.
    pub fn saturations(&self) -> u64 {
        self.saturations.get()
    }
}

/// Reciprocal square root unit used by LN: evaluated in f64, rounded once.
pub fn rsqrt_code(fmt: Format, var: u16) -> u16 {
    let v = fmt.decode(var).max(0.0);
    fmt.encode(1.0 / (v + LN_EPS).sqrt())
}

impl Arith for QuantArith {
    type V = u16;
    type Acc = ExtAcc;

    fn zero(&self) -> u16 {
        0
    }
    #[inline]
    fn is_zero(&self, v: u16) -> bool {
        self.fmt.is_zero(v)
    }
    fn from_f64(&self, x: f64) -> u16 {
        self.fmt.encode(x)
    }
    fn to_f64(&self, v: u16) -> f64 {
        self.fmt.decode(v)
    }
    fn acc(&self) -> ExtAcc {
        ExtAcc::new()
    }
    #[inline]
    fn mac(&self, acc: &mut ExtAcc, a: u16, b: u16) {
        acc.add_product(mul_codes(self.fmt, a, b));
    }
    #[inline]
    fn add(&self, acc: &mut ExtAcc, v: u16) {
        acc.add_code(self.fmt, v);
    }
    fn sub(&self, acc: &mut ExtAcc, v: u16) {
        acc.sub_code(self.fmt, v);
    }
    fn finish(&self, acc: &ExtAcc) -> u16 {
        let r = acc.finalize(self.fmt);
        if r.saturated {
            self.saturations.set(self.saturations.get() + 1);
        }
        r.bits
    }
    fn finish_scaled(&self, acc: &ExtAcc, scale: u16) -> u16 {
        let r = acc.finalize_scaled(self.fmt, scale);
        if r.saturated {
            self.saturations.set(self.saturations.get() + 1);
        }
        r.bits
    }
    fn relu(&self, v: u16) -> u16 {
        self.fmt.relu(v)
    }
    fn act(&self, kind: ActKind, v: u16) -> u16 {
        ActLut::get(kind).apply(self.fmt, v)
    }
    fn rsqrt_eps(&self, var: u16) -> u16 {
        rsqrt_code(self.fmt, var)
    }
}

/// Dense `[channels, len]` feature map, row-major by channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<V> {
    pub channels: usize,
    pub len: usize,
    pub data: Vec<V>,
}

impl<V: Copy> Tensor<V> {
    pub fn filled(channels: usize, len: usize, v: V) -> Self {
        Self { channels, len, data: vec![v; channels * len] }
    }

    pub fn from_vec(channels: usize, len: usize, data: Vec<V>) -> Self {
        assert_eq!(data.len(), channels * len, "tensor data length");
        Self { channels, len, data }
    }

    #[inline]
    pub fn at(&self, c: usize, p: usize) -> V {
        self.data[c * self.len + p]
    }

    #[inline]
    pub fn set(&mut self, c: usize, p: usize, v: V) {
        self.data[c * self.len + p] = v;
    }

    pub fn row(&self, c: usize) -> &[V] {
        &self.data[c * self.len..(c + 1) * self.len]
    }

    /// Channels `lo..hi` as a new tensor.
    pub fn rows(&self, lo: usize, hi: usize) -> Tensor<V> {
        Tensor::from_vec(hi - lo, self.len, self.data[lo * self.len..hi * self.len].to_vec())
    }

    pub fn set_rows(&mut self, lo: usize, src: &Tensor<V>) {
        assert_eq!(src.len, self.len);
        self.data[lo * self.len..(lo + src.channels) * self.len].copy_from_slice(&src.data);
    }

    pub fn map<U: Copy>(&self, f: impl Fn(V) -> U) -> Tensor<U> {
        Tensor { channels: self.channels, len: self.len, data: self.data.iter().map(|&v| f(v)).collect() }
    }
}
