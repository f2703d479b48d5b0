mod support;

use proptest::prelude::*;
use r2h_core::data::{
    augment_seeded, flip_horizontal, flip_vertical, gen_synthetic, project_rgb, rot90, Crf, Dataset,
    SpatialTransform, BANDS,
};
use r2h_core::io::{decode, encode, read_tensor, write_tensor, Dtype};
use r2h_core::{Error, FormatError, Metrics};
use r2h_tensor::Tensor;
use support::{rng, uniform};

#[test]
fn flat_and_one_hot_projections() {
    let crf = Crf::synthetic();
    let flat = Tensor::full(&[BANDS, 2, 2], 0.37);
    for v in project_rgb(&flat, &crf).unwrap().data() {
        assert!((v - 0.37).abs() < 1e-15);
    }
    for k in [0, 7, 30] {
        let hot = Tensor::from_fn(&[BANDS, 1, 1], |b| if b == k { 1.0 } else { 0.0 });
        let rgb = project_rgb(&hot, &crf).unwrap();
        for c in 0..3 {
            assert_eq!(rgb.data()[c], crf.weight(c, k));
        }
    }
    assert!(project_rgb(&Tensor::zeros(&[30, 2, 2]), &crf).is_err());
}

#[test]
fn projection_matches_per_pixel_loop() {
    let crf = Crf::synthetic();
    let hsi = uniform(&[BANDS, 3, 5], 0.0, 1.0, &mut rng(0));
    let rgb = project_rgb(&hsi, &crf).unwrap();
    for c in 0..3 {
        for p in 0..15 {
            let mut acc = 0.0;
            for b in 0..BANDS {
                acc += crf.weight(c, b) * hsi.data()[b * 15 + p];
            }
            assert!((rgb.data()[c * 15 + p] - acc).abs() < 1e-12);
        }
    }
}

#[test]
fn synthetic_set_is_seeded_bounded_and_smooth() {
    let crf = Crf::synthetic();
    let a = gen_synthetic(12, 16, 16, 3, &crf).unwrap();
    let b = gen_synthetic(12, 16, 16, 3, &crf).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, gen_synthetic(12, 16, 16, 4, &crf).unwrap());

    let mut corr_sum = 0.0;
    let mut pairs = 0;
    for s in &a {
        assert!(s.hsi.data().iter().all(|v| (0.05 - 1e-12..=0.95 + 1e-12).contains(v)));
        assert!(s.rgb.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let hw = 256;
        for band in 0..BANDS - 1 {
            let x = &s.hsi.data()[band * hw..(band + 1) * hw];
            let y = &s.hsi.data()[(band + 1) * hw..(band + 2) * hw];
            let (mx, my) = (x.iter().sum::<f64>() / hw as f64, y.iter().sum::<f64>() / hw as f64);
            let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
            let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
            let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
            if vx > 1e-12 && vy > 1e-12 {
                corr_sum += cov / (vx * vy).sqrt();
                pairs += 1;
            }
        }
    }
    let mean_corr = corr_sum / pairs as f64;
    assert!(mean_corr > 0.9, "adjacent-band correlation {mean_corr}");
}

#[test]
fn dataset_round_trips_through_directory_layout() {
    let data = Dataset::synthetic(3, 2, 8, 8, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    data.save(dir.path()).unwrap();
    assert!(dir.path().join("train/s00000.hsi.r2ht").exists());
    assert!(dir.path().join("val/s00003.rgb.r2ht").exists());
    assert_eq!(read_tensor(dir.path().join("crf.r2ht")).unwrap().shape(), &[3, 31]);
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back.crf, data.crf);
    assert_eq!(back.train.len(), 3);
    assert_eq!(back.val.len(), 2);
    for (a, b) in back.train.iter().zip(&data.train) {
        assert_eq!(a.id, b.id);
        // stored as f32
        assert!(a.hsi.max_abs_diff(&b.hsi) < 1e-7);
    }
}

#[test]
fn two_by_three_file_size_and_error_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.r2ht");
    let t = Tensor::new(&[2, 3], vec![0.5, -1.0, 2.0, 3.25, 0.0, 7.0]).unwrap();
    write_tensor(&path, &t, Dtype::F32).unwrap();
    assert_eq!(std::fs::metadata(&path).unwrap().len(), 4 + 1 + 1 + 1 + 2 * 4 + 6 * 4);
    assert_eq!(read_tensor(&path).unwrap(), t);

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[1] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(
        read_tensor(&path),
        Err(Error::Format {
            source: FormatError::BadMagic(_),
            ..
        })
    ));
    assert!(matches!(read_tensor(dir.path().join("missing")), Err(Error::Io { .. })));
}

#[test]
fn dihedral_identities() {
    let t = uniform(&[3, 5, 5], 0.0, 1.0, &mut rng(2));
    let mut r = t.clone();
    for _ in 0..4 {
        r = rot90(&r).unwrap();
    }
    assert_eq!(r, t);
    assert_eq!(flip_horizontal(&flip_horizontal(&t).unwrap()).unwrap(), t);
    assert_eq!(flip_vertical(&flip_vertical(&t).unwrap()).unwrap(), t);
}

#[test]
fn augmentation_commutes_with_projection_and_preserves_metrics() {
    let crf = Crf::synthetic();
    let samples = gen_synthetic(4, 12, 12, 5, &crf).unwrap();
    for (i, s) in samples.iter().enumerate() {
        let before = s.clone();
        let aug = augment_seeded(s, 8, i as u64).unwrap();
        assert_eq!(s, &before);
        assert_eq!(aug.hsi.shape(), &[BANDS, 8, 8]);
        let projected = project_rgb(&aug.hsi, &crf).unwrap();
        assert!(projected.max_abs_diff(&aug.rgb) < 1e-12);

        let mut r = rng(i as u64);
        let tf = SpatialTransform::random(12, 12, 12, &mut r).unwrap();
        let pred = s.hsi.map(|v| (v * 1.1).min(1.0));
        let m0 = Metrics::compute(&pred, &s.hsi).unwrap();
        let m1 = Metrics::compute(&tf.apply(&pred).unwrap(), &tf.apply(&s.hsi).unwrap()).unwrap();
        assert!((m0.mrae - m1.mrae).abs() < 1e-12);
        assert!((m0.rmse - m1.rmse).abs() < 1e-12);
        assert!((m0.psnr - m1.psnr).abs() < 1e-9);
        assert!((m0.sam - m1.sam).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn container_round_trip(dims in prop::collection::vec(1usize..5, 1..=4), seed in 0u64..1000, wide in any::<bool>()) {
        let t = uniform(&dims, -1e3, 1e3, &mut rng(seed));
        let dtype = if wide { Dtype::F64 } else { Dtype::F32 };
        let (back, d) = decode(&encode(&t, dtype)).unwrap();
        prop_assert_eq!(d, dtype);
        if wide {
            prop_assert_eq!(back, t);
        } else {
            prop_assert_eq!(back, t.map(|v| v as f32 as f64));
        }
    }

    #[test]
    fn truncation_is_always_detected(len in 3usize..20, cut in 1usize..40) {
        let bytes = encode(&Tensor::zeros(&[len]), Dtype::F32);
        let cut = cut.min(bytes.len() - 1);
        let truncated = &bytes[..bytes.len() - cut];
        let is_truncated = matches!(decode(truncated), Err(FormatError::Truncated { .. }));
        prop_assert!(is_truncated);
    }

    #[test]
    fn projection_is_linear(seed in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let crf = Crf::synthetic();
        let mut r = rng(seed);
        let (x, y) = (uniform(&[BANDS, 2, 3], 0.0, 1.0, &mut r), uniform(&[BANDS, 2, 3], 0.0, 1.0, &mut r));
        let mix = x.zip_map(&y, |u, v| a * u + b * v).unwrap();
        let lhs = project_rgb(&mix, &crf).unwrap();
        let (px, py) = (project_rgb(&x, &crf).unwrap(), project_rgb(&y, &crf).unwrap());
        let rhs = px.zip_map(&py, |u, v| a * u + b * v).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn augmentation_keeps_modalities_aligned(seed in 0u64..1000) {
        let crf = Crf::synthetic();
        let s = &gen_synthetic(1, 8, 8, seed, &crf).unwrap()[0];
        let aug = augment_seeded(s, 4, seed).unwrap();
        prop_assert!(project_rgb(&aug.hsi, &crf).unwrap().max_abs_diff(&aug.rgb) < 1e-12);
    }
}
