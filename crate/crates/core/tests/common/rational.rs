//! Exact rational oracles for the number formats.

use num_rational::BigRational;
use num_traits::Signed;
use tftnn_core::numerics::Format;

pub fn rat(x: f64) -> BigRational {
    BigRational::from_float(x).unwrap()
}

/// All codes sorted by value, keeping one code per value (positive zero).
pub fn value_table(fmt: Format) -> Vec<(f64, u16)> {
    let mut v: Vec<(f64, u16)> = (0..fmt.code_count())
        .map(|c| c as u16)
        .filter(|&c| !(fmt.is_zero(c) && c != 0))
        .map(|c| (fmt.decode(c), c))
        .collect();
    v.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    v
}

/// Nearest code by exhaustive comparison; ties go to the even code.
pub fn nearest_code(table: &[(f64, u16)], fmt: Format, x: &BigRational) -> u16 {
    let approx = num_traits::ToPrimitive::to_f64(x).unwrap();
    let idx = table.partition_point(|e| e.0 < approx);
    let lo = idx.saturating_sub(2);
    let hi = (idx + 2).min(table.len());
    let mut best: Option<(BigRational, u16)> = None;
    for &(v, c) in &table[lo..hi] {
        let d = (rat(v) - x).abs();
        best = match best {
            None => Some((d, c)),
            Some((bd, bc)) => {
                if d < bd || (d == bd && c & 1 == 0 && bc & 1 == 1) {
                    Some((d, c))
                } else {
                    Some((bd, bc))
                }
            }
        };
    }
    let code = best.expect("non-empty table").1;
    if fmt.is_zero(code) && x.is_negative() && fmt.is_float() {
        fmt.negate(0)
    } else {
        code
    }
}
