//! Format laws checked against independent oracles: exhaustive code
//! tables, nearest-neighbour search and exact rational arithmetic.

mod common;

use common::rational::{nearest_code, rat, value_table};
use num_rational::BigRational;
use num_traits::Zero;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tftnn_core::numerics::{qmul, tree_sum, ExtAcc, ExtendedProduct, Format, QVal};

const ALL_FORMATS: [Format; 8] = [
    Format::FP16,
    Format::FP10,
    Format::FP9,
    Format::FP8,
    Format::FXP16,
    Format::FXP10,
    Format::FXP9,
    Format::FXP8,
];

#[test]
fn every_fp10_code_round_trips() {
    let f = Format::FP10;
    for c in 0..1024u16 {
        assert_eq!(f.encode(f.decode(c)), c, "code {c:#012b}");
    }
}

#[test]
fn every_code_round_trips_in_all_table_formats() {
    for f in ALL_FORMATS {
        for c in (0..f.code_count()).map(|c| c as u16) {
            let back = f.encode(f.decode(c));
            assert_eq!(f.decode(back), f.decode(c), "{f} code {c}");
            if !f.is_zero(c) {
                assert_eq!(back, c, "{f} code {c}");
            }
        }
    }
}

#[test]
fn encode_matches_nearest_neighbour_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for f in ALL_FORMATS {
        let table = value_table(f);
        let span = f.max_finite() * 1.5;
        for i in 0..4000 {
            let x = match i % 3 {
                0 => rng.gen_range(-span..span),
                1 => rng.gen_range(-4.0..4.0),
                _ => rng.gen_range(-1e-3..1e-3),
            };
            let want = nearest_code(&table, f, &rat(x));
            assert_eq!(f.encode(x), want, "{f} x={x}");
        }
        // exact midpoints exercise ties-to-even
        for w in table.windows(2) {
            let mid = (w[0].0 + w[1].0) / 2.0;
            let want = nearest_code(&table, f, &rat(mid));
            assert_eq!(f.decode(f.encode(mid)), f.decode(want), "{f} tie {mid}");
        }
    }
}

#[test]
fn spec_encode_examples() {
    let f = Format::FP10;
    let table = value_table(f);
    assert_eq!(f.decode(f.encode(0.3)), f.decode(nearest_code(&table, f, &rat(0.3))));
    assert_eq!(f.decode(f.encode(0.3)), 0.296875);
    assert_eq!(f.encode(1e9), table.last().unwrap().1);
}

#[test]
fn relative_error_bound_over_normal_range() {
    let f = Format::FP10;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let min_normal = 2f64.powi(-14);
    for _ in 0..10_000 {
        let mag = 10f64.powf(rng.gen_range(min_normal.log10()..f.max_finite().log10()));
        let x = if rng.gen::<bool>() { mag } else { -mag };
        let y = f.decode(f.encode(x));
        assert!(((y - x) / x).abs() <= 2f64.powi(-5), "x={x} y={y}");
    }
}

proptest! {
    #[test]
    fn quantization_is_monotone(a in -2e5f64..2e5, b in -2e5f64..2e5, fi in 0usize..8) {
        let f = ALL_FORMATS[fi];
        let (x, y) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(f.decode(f.encode(x)) <= f.decode(f.encode(y)));
    }

    #[test]
    fn small_magnitudes_are_monotone(a in -1e-2f64..1e-2, b in -1e-2f64..1e-2) {
        let f = Format::FP10;
        let (x, y) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(f.decode(f.encode(x)) <= f.decode(f.encode(y)));
    }

    #[test]
    fn encode_is_always_finite(x in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO) {
        for f in ALL_FORMATS {
            let v = f.decode(f.encode(x));
            prop_assert!(v.is_finite());
            prop_assert!(v.abs() <= f.max_finite());
        }
    }

    #[test]
    fn tree_sum_is_permutation_invariant(codes in proptest::collection::vec((0u16..1024, 0u16..1024), 8), rot in 0usize..8) {
        let f = Format::FP10;
        let lanes: Vec<ExtendedProduct> = codes.iter()
            .map(|&(a, b)| qmul(QVal::new(a, f), QVal::new(b, f)))
            .collect();
        let mut a = [ExtendedProduct::ZERO; 8];
        let mut b = [ExtendedProduct::ZERO; 8];
        for i in 0..8 {
            a[i] = lanes[i];
            b[i] = lanes[(i + rot) % 8];
        }
        b.reverse();
        prop_assert_eq!(tree_sum(&a, &ExtAcc::new()), tree_sum(&b, &ExtAcc::new()));
    }
}

#[test]
fn tree_sum_matches_rational_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for f in [Format::FP10, Format::FP16, Format::FP8, Format::FXP10] {
        let table = value_table(f);
        for _ in 0..10_000 {
            let mut lanes = [ExtendedProduct::ZERO; 8];
            let mut exact = BigRational::zero();
            let carry_code = rng.gen_range(0..f.code_count()) as u16;
            let mut carry = ExtAcc::new();
            carry.add_code(f, carry_code);
            exact += rat(f.decode(carry_code));
            for lane in lanes.iter_mut() {
                if rng.gen_bool(0.2) {
                    continue;
                }
                let a = rng.gen_range(0..f.code_count()) as u16;
                let b = rng.gen_range(0..f.code_count()) as u16;
                *lane = qmul(QVal::new(a, f), QVal::new(b, f));
                exact += rat(f.decode(a)) * rat(f.decode(b));
            }
            let got = tree_sum(&lanes, &carry).finalize(f).bits;
            let want = nearest_code(&table, f, &exact);
            assert_eq!(f.decode(got), f.decode(want), "{f} exact={exact}");
            if !exact.is_zero() && !f.is_zero(want) {
                assert_eq!(got, want);
            }
        }
    }
}
