use ndarray::{Array1, Array4};
use proptest::prelude::*;

use mar3d_model::losses::{
    adversarial_from_probs, cycle_loss, feature_distance, intensity_loss, LossReport, LossWeights, Variant,
};

fn arb_batch() -> impl Strategy<Value = Array4<f64>> {
    (1usize..3, 1usize..4, 2usize..5, 2usize..5).prop_flat_map(|(b, n, h, w)| {
        prop::collection::vec(-1.0f64..1.0, b * n * h * w)
            .prop_map(move |v| Array4::from_shape_vec((b, n, h, w), v).unwrap())
    })
}

fn arb_weights() -> impl Strategy<Value = LossWeights> {
    (0.0f64..30.0, 0.0f64..30.0, 0.0f64..30.0, 0.0f64..30.0).prop_map(|(c, i, f, d)| LossWeights {
        lambda_cyc: c,
        lambda_int: i,
        lambda_fea: f,
        lambda_id: d,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn proposed_without_regularizers_totals_like_cgan(
        w in arb_weights(),
        terms in prop::array::uniform6(-3.0f64..3.0),
    ) {
        let [a, b, c, i, f, d] = terms;
        let mut plain = w.clone();
        plain.lambda_int = 0.0;
        plain.lambda_fea = 0.0;
        let p = LossReport::combine(Variant::Proposed, &plain, a, b, c.abs(), i.abs(), f.abs(), d.abs());
        let g = LossReport::combine(Variant::Cgan, &w, a, b, c.abs(), i.abs(), f.abs(), d.abs());
        prop_assert!((p.total - g.total).abs() <= 1e-12);
        prop_assert_eq!(g.int + g.fea + g.id, 0.0);
    }

    #[test]
    fn adversarial_value_is_non_positive_and_order_free(
        real in prop::collection::vec(0.01f64..0.99, 1..8),
        fake in prop::collection::vec(0.01f64..0.99, 1..8),
    ) {
        let v = adversarial_from_probs(&Array1::from(real.clone()), &Array1::from(fake.clone())).unwrap();
        prop_assert!(v <= 0.0);
        let mut r2 = real;
        r2.reverse();
        let v2 = adversarial_from_probs(&Array1::from(r2), &Array1::from(fake)).unwrap();
        prop_assert!((v - v2).abs() < 1e-12);
    }

    #[test]
    fn shifting_generators_pay_their_shift(x in arb_batch(), c in -0.5f64..0.5) {
        let y = x.mapv(|v| -v);
        let up = move |b: &Array4<f64>| b.mapv(|v| v + c);
        let down = move |b: &Array4<f64>| b.mapv(|v| v - c);
        let int = intensity_loss(&up, &up, &x, &y).unwrap();
        prop_assert!((int - 2.0 * c.abs()).abs() < 1e-9);
        // Opposite shifts cancel around the cycle.
        prop_assert!(cycle_loss(&up, &down, &x, &y).unwrap() < 1e-9);
        let twice = cycle_loss(&up, &up, &x, &y).unwrap();
        prop_assert!((twice - 4.0 * c.abs()).abs() < 1e-9);
    }

    #[test]
    fn feature_distance_is_a_symmetric_penalty(a in arb_batch(), seed in 0.0f64..6.0) {
        let b = a.mapv(|v| (3.0 * v + seed).sin());
        prop_assert_eq!(feature_distance(&a, &a), 0.0);
        let ab = feature_distance(&a, &b);
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - feature_distance(&b, &a)).abs() < 1e-12);
    }
}
