use proptest::prelude::*;

use tolopt::decoder::DecoderParams;
use tolopt::evaluate::{thresholds, yield_threshold, MetricSample};
use tolopt::lens::fixtures;
use tolopt::psf::{psf_similarity, splat, Psf};
use tolopt::raytrace::{
    launch_rays, media_indices, pupil_grid, trace_launch, trace_moved_lens, trace_nominal, FieldPoint, ImageHit,
    LensView,
};
use tolopt::rng::stream;
use tolopt::tolerance::{draw, realize_transforms, sample_pattern, TolerancePattern, ToleranceRange};

fn psf(k: usize, pixels: Vec<f64>) -> Psf<f64> {
    Psf {
        k,
        pitch_um: 2.0,
        field: FieldPoint::on_y(0.0),
        wavelength_nm: 587.56,
        pixels,
        empty: false,
    }
}

fn sample(trial: u64, psnr: f64, ssim: f64) -> MetricSample {
    MetricSample {
        trial,
        psnr,
        ssim,
        mean_spot: 10.0,
        mean_psf_similarity: 0.5,
        failed: false,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn draws_stay_within_range(seed in any::<u64>(), max in 0.0f64..1.0) {
        let mut rng = stream(seed, "prop", 0);
        for _ in 0..200 {
            let v = draw(&mut rng, max);
            prop_assert!(v.abs() <= max);
        }
    }

    #[test]
    fn similarity_is_symmetric_and_bounded(
        a in prop::collection::vec(0.0f64..1.0, 49),
        b in prop::collection::vec(0.0f64..1.0, 49),
    ) {
        prop_assume!(a.iter().any(|v| *v > 0.0) && b.iter().any(|v| *v > 0.0));
        let (pa, pb) = (psf(7, a), psf(7, b));
        let s1 = psf_similarity(&pa, &pb).unwrap();
        let s2 = psf_similarity(&pb, &pa).unwrap();
        prop_assert!((0.0..=1.0).contains(&s1));
        prop_assert!((s1 - s2).abs() < 1e-12);
    }

    #[test]
    fn integer_shift_keeps_similarity_one(
        pts in prop::collection::vec((-8.0f64..8.0, -8.0f64..8.0), 1..40),
        sx in -3i32..=3,
        sy in -3i32..=3,
    ) {
        // hits in µm around the centre, kernel 41 at 2 µm so nothing leaves the window
        let pitch = 2.0;
        let hit = |x: f64, y: f64| ImageHit { x: x * 1e-3, y: y * 1e-3, alive: true, death: None };
        let hits: Vec<_> = pts.iter().map(|&(x, y)| hit(x, y)).collect();
        let shifted: Vec<_> = pts
            .iter()
            .map(|&(x, y)| hit(x + sx as f64 * pitch, y + sy as f64 * pitch))
            .collect();
        let (a, _) = splat(&hits, &(0.0, 0.0), 41, pitch);
        let (b, _) = splat(&shifted, &(0.0, 0.0), 41, pitch);
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let s = psf_similarity(&psf(41, a), &psf(41, b)).unwrap();
        prop_assert!((s - 1.0).abs() < 1e-9, "similarity {s}");
    }

    #[test]
    fn thresholds_are_ordered_order_statistics(values in prop::collection::vec(-10.0f64..60.0, 1..120)) {
        let samples: Vec<_> = values.iter().enumerate().map(|(i, v)| sample(i as u64, *v, v / 60.0)).collect();
        let t = thresholds(&samples);
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        for w in t.windows(2) {
            prop_assert!(w[0].confidence_pct > w[1].confidence_pct);
            prop_assert!(w[0].psnr <= w[1].psnr);
        }
        for y in &t {
            prop_assert_eq!(y.psnr, yield_threshold(&sorted, y.confidence_pct));
            let reach = values.iter().filter(|v| **v >= y.psnr).count();
            prop_assert!(reach * 100 >= values.len() * y.confidence_pct as usize);
        }
    }

    #[test]
    fn decoder_json_round_trips(grid in 1usize..3, k in 0usize..3, seed in any::<u64>()) {
        let k = 2 * k + 1;
        let mut d = DecoderParams::identity(grid, k);
        let mut rng = stream(seed, "prop-decoder", 0);
        let vals: Vec<f64> = (0..d.parameter_count()).map(|_| draw(&mut rng, 3.0)).collect();
        d.unflatten(&vals).unwrap();
        let back = DecoderParams::from_json_str(&d.to_json_string(), std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back, d);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn moving_the_ray_equals_moving_the_lens(seed in any::<u64>(), field in 0.0f64..6.0, which in 0usize..3) {
        let lens = [fixtures::lens1(), fixtures::lens2(), fixtures::cooke()][which].clone();
        let pattern = sample_pattern(&mut stream(seed, "prop-pattern", 0), &ToleranceRange::default(), &lens);
        let transforms = realize_transforms(&pattern, &lens).unwrap();
        let view = LensView::<f64>::plain(&lens);
        let wl = lens.reference_wavelength();
        let idx = media_indices(&lens, wl).unwrap();
        let field = field.min(lens.max_field());
        let launch = launch_rays(&lens, &view, FieldPoint::on_y(field), &pupil_grid(6)).unwrap();
        let hits = trace_launch(&launch, &view, &transforms, &idx, wl);
        for (k, h) in hits.iter().enumerate() {
            let m = trace_moved_lens(launch.ray(k, wl), &view, &transforms, &idx);
            prop_assert_eq!(h.alive, m.alive);
            if h.alive {
                prop_assert!((h.x - m.x).abs() < 1e-10 && (h.y - m.y).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn zero_pattern_traces_like_the_design() {
    for lens in [fixtures::lens1(), fixtures::lens2(), fixtures::cooke()] {
        let view = LensView::<f64>::plain(&lens);
        let transforms = realize_transforms(&TolerancePattern::zero(&lens), &lens).unwrap();
        for &wl in &lens.wavelengths {
            let idx = media_indices(&lens, wl).unwrap();
            let launch = launch_rays(&lens, &view, FieldPoint::on_y(lens.max_field()), &pupil_grid(8)).unwrap();
            let hits = trace_launch(&launch, &view, &transforms, &idx, wl);
            for (k, h) in hits.iter().enumerate() {
                let n = trace_nominal(launch.ray(k, wl), &view, &idx);
                assert_eq!(h.alive, n.alive);
                if h.alive {
                    assert_eq!((h.x, h.y), (n.x, n.y), "{} ray {k}", lens.name);
                }
            }
        }
    }
}
