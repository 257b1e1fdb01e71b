use proptest::prelude::*;

use sdeflow_core::bel::{bel_gradient, BelOptions};
use sdeflow_core::coeffs::{holder_seminorm, offset_pairs, PAIR_SCALES};
use sdeflow_core::mollify::mollify;
use sdeflow_core::paths::{BrownianDriver, TimeGrid};
use sdeflow_core::seed::derive_seed;
use sdeflow_core::{DiffusionSpec, DriftField, Observable, ZvonkinTransform};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn coarse_increments_sum_fine_ones(seed in any::<u64>(), path in 0u64..1000, factor in 1usize..6) {
        let coarse = TimeGrid::new(0.0, 1.0, 8).unwrap();
        let fine = coarse.refined(factor);
        let driver = BrownianDriver::new(seed, path, 2, fine);
        let dc = driver.increments(&coarse).unwrap();
        let df = driver.increments(&fine).unwrap();
        for j in 0..coarse.steps {
            for k in 0..2 {
                let sum: f64 = (0..factor).map(|m| df[(j * factor + m) * 2 + k]).sum();
                prop_assert!((dc[j * 2 + k] - sum).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn mollification_is_linear(a in -2.0f64..2.0, c in -2.0f64..2.0, x in -5.0f64..5.0, n in 1usize..20) {
        let b1 = DriftField::holder(1, 0.5, 1.0);
        let b2 = DriftField::linear(1, vec![-1.0]);
        let sum = DriftField::combine(a, &b1, c, &b2);
        let lhs = mollify(&sum, n, 16).unwrap().eval(&[x])[0];
        let rhs = a * mollify(&b1, n, 16).unwrap().eval(&[x])[0]
            + c * mollify(&b2, n, 16).unwrap().eval(&[x])[0];
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
    }

    #[test]
    fn holder_example_respects_its_seminorm(theta in 0.1f64..0.9, scale in 0.1f64..3.0) {
        let b = DriftField::holder(1, theta, scale);
        let probes: Vec<Vec<f64>> = (0..16).map(|i| vec![-4.0 + 0.5 * i as f64]).collect();
        let est = holder_seminorm(&b, &offset_pairs(&probes, &PAIR_SCALES)).unwrap();
        // ||x|^θ − |y|^θ| ≤ |x − y|^θ
        prop_assert!(est <= scale * (1.0 + 1e-12));
    }

    #[test]
    fn inverse_undoes_forward(x in -20.0f64..20.0, c in -0.9f64..0.9) {
        let t = ZvonkinTransform::from_fn(
            1,
            1.0,
            c.abs(),
            move |x, out| out[0] = c * x[0].sin(),
            move |x, out| out[0] = c * x[0].cos(),
        )
        .unwrap();
        let back = t.invert(&t.forward(&[x]).unwrap()).unwrap();
        prop_assert!((back[0] - x).abs() <= 1e-10 * (1.0 + x.abs()));
    }

    #[test]
    fn labelled_seeds_are_stable_and_distinct(master in any::<u64>()) {
        prop_assert_eq!(derive_seed(master, "a/b"), derive_seed(master, "a/b"));
        prop_assert_ne!(derive_seed(master, "a/b"), derive_seed(master, "a/c"));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn bel_scales_with_direction(k in -3i32..4, seed in any::<u64>()) {
        let b = DriftField::linear(1, vec![-1.0]);
        let s = DiffusionSpec::identity(1);
        let g = TimeGrid::new(0.0, 0.5, 50).unwrap();
        let f = Observable::sq();
        let run = |h: f64| {
            bel_gradient(&f, &b, &s, 0.5, &[0.3], &[h], 64, &g, seed, BelOptions::default())
                .unwrap()
                .value
        };
        // scaling by a power of two is exact in floating point
        let m = 2f64.powi(k);
        prop_assert_eq!(run(m), m * run(1.0));
    }
}
