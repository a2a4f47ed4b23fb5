use ndarray::Array3;
use proptest::prelude::*;

use mar3d_core::metrics::{improvement_rate, median, rmse_arrays, ssim_arrays, SsimParams};
use mar3d_core::translate::{
    translate_volume, window_schedule, Direction, IdentityTranslator, TranslateConfig, UpdateMode,
};
use mar3d_core::volumes::{denormalize, normalize_hu, read_volume, write_volume, DomainTag, ValueSpace, Volume};

fn hu_volume(depth: usize, size: usize, values: &[f32]) -> Volume {
    let data = Array3::from_shape_fn((depth, size, size), |(z, i, j)| {
        values[(z * 31 + i * 7 + j) % values.len()]
    });
    Volume::new(data, [0.5, 0.5, 1.0], ValueSpace::Hu, "prop", DomainTag::YClean).unwrap()
}

fn arb_hu() -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-1024.0f32..4000.0, 1..40)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn rmse_is_a_metric(a in arb_hu(), b in arb_hu(), c in arb_hu()) {
        let (x, y, z) = (hu_volume(2, 6, &a), hu_volume(2, 6, &b), hu_volume(2, 6, &c));
        let d = |p: &Volume, q: &Volume| rmse_arrays(p.data().view(), q.data().view(), None).unwrap();
        prop_assert_eq!(d(&x, &x), 0.0);
        prop_assert!((d(&x, &y) - d(&y, &x)).abs() < 1e-9);
        prop_assert!(d(&x, &z) <= d(&x, &y) + d(&y, &z) + 1e-6);
    }

    #[test]
    fn normalization_round_trips_inside_the_window(values in arb_hu()) {
        let vol = hu_volume(2, 5, &values);
        let back = denormalize(&normalize_hu(&vol).unwrap()).unwrap();
        for (a, b) in vol.data().iter().zip(back.data().iter()) {
            let expected = a.clamp(-1000.0, 1000.0);
            prop_assert!((expected - b).abs() <= 1e-3, "{} -> {}", a, b);
        }
    }

    #[test]
    fn serialized_volumes_are_bit_exact(values in arb_hu(), depth in 1usize..4) {
        let vol = hu_volume(depth, 4, &values);
        let mut buf = Vec::new();
        write_volume(&vol, &mut buf).unwrap();
        let back = read_volume(&mut buf.as_slice()).unwrap();
        prop_assert_eq!(back, vol);
    }

    #[test]
    fn schedule_commits_every_slice_once(total in 1usize..20, n in 1usize..8, up in any::<bool>()) {
        let dir = if up { Direction::BottomUp } else { Direction::TopDown };
        let steps = window_schedule(total, n, dir);
        if total < n {
            prop_assert!(steps.is_empty());
        } else {
            prop_assert_eq!(steps.len(), total - n + 1);
            let mut seen = vec![0usize; total];
            for s in &steps {
                prop_assert!(s.start + n <= total);
                prop_assert!(s.commit.start >= s.start && s.commit.end <= s.start + n);
                for z in s.commit.clone() {
                    seen[z] += 1;
                }
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
        }
    }

    #[test]
    fn identity_translation_is_exact(values in prop::collection::vec(-1.0f32..1.0, 1..30), depth in 5usize..9, n in prop::sample::select(vec![1usize, 3, 5]), seq in any::<bool>(), up in any::<bool>()) {
        let data = Array3::from_shape_fn((depth, 5, 4), |(z, i, j)| values[(z * 13 + i * 4 + j) % values.len()]);
        let vol = Volume::new(data, [1.0; 3], ValueSpace::Normalized, "x", DomainTag::XArtifact).unwrap();
        let cfg = TranslateConfig {
            n_slices: n,
            mode: if seq { UpdateMode::Sequential } else { UpdateMode::Single },
            direction: if up { Direction::BottomUp } else { Direction::TopDown },
        };
        let mut g = IdentityTranslator::new(n);
        let out = translate_volume(&mut g, &vol, &cfg).unwrap();
        prop_assert_eq!(out.data(), vol.data());
        prop_assert_eq!(g.calls, depth - n + 1);
    }

    #[test]
    fn ssim_is_symmetric_and_bounded(a in arb_hu(), b in arb_hu()) {
        let (x, y) = (hu_volume(1, 12, &a), hu_volume(1, 12, &b));
        let p = SsimParams::default();
        let s_xy = ssim_arrays(x.data().view(), y.data().view(), &p, None).unwrap();
        let s_yx = ssim_arrays(y.data().view(), x.data().view(), &p, None).unwrap();
        prop_assert!((s_xy - s_yx).abs() < 1e-12);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&s_xy));
        let s_xx = ssim_arrays(x.data().view(), x.data().view(), &p, None).unwrap();
        prop_assert!((s_xx - 1.0).abs() < 1e-9);
    }

    #[test]
    fn improvement_rate_sign_follows_ssim(orig in 0.05f64..1.0, delta in -0.04f64..0.04) {
        let r = improvement_rate(orig + delta, orig).unwrap();
        prop_assert_eq!(r > 0.0, delta > 0.0);
        prop_assert!((r - 100.0 * delta / orig).abs() < 1e-9);
    }

    #[test]
    fn median_lies_between_extremes(v in prop::collection::vec(-1e3f64..1e3, 1..25)) {
        let m = median(&v).unwrap();
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo <= m && m <= hi);
        let below = v.iter().filter(|&&x| x < m).count();
        let above = v.iter().filter(|&&x| x > m).count();
        prop_assert!(below <= v.len() / 2 && above <= v.len() / 2);
    }
}

#[test]
fn median_of_nothing_is_none() {
    assert_eq!(median(&[]), None);
}
