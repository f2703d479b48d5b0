mod support;

use proptest::prelude::*;
use r2h_core::checkpoint;
use r2h_core::denoiser::{predict, time_embedding, RGB_CHANNELS};
use r2h_core::gradcheck::randomize_params;
use r2h_core::gsrm::Gsrm;
use r2h_core::hata::{attention_core_op_count, Hata};
use r2h_core::nn::{LayerKind, Module};
use r2h_core::{Denoiser, DenoiserConfig, DenoiserModel};
use r2h_tensor::{Tape, Tensor};
use support::{hata_oracle, rng, uniform};

fn zero_params(m: &mut impl Module) {
    for p in m.params_mut() {
        p.tensor = Tensor::zeros(p.tensor.shape());
    }
}

#[test]
fn gsrm_zero_in_zero_out_and_shape() {
    let mut g = Gsrm::new("g", 4, &mut rng(0));
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::zeros(&[4, 3, 5]));
    let out = g.forward(&mut tape, z, z).unwrap();
    assert_eq!(tape.value(out).shape(), &[4, 3, 5]);
    assert_eq!(tape.value(out).max_abs(), 0.0);
    assert_eq!(g.num_params(), (8 * 8 + 8) + (8 * 9 + 8) + (8 * 4 + 4));

    zero_params(&mut g);
    let a = tape.constant(Tensor::zeros(&[4, 3, 5]));
    let b = tape.constant(Tensor::zeros(&[4, 3, 4]));
    assert!(g.forward(&mut tape, a, b).is_err());
}

#[test]
fn gsrm_hand_evaluated_selection_chain() {
    // conv_in passes the normalized RGB channels to the first C outputs,
    // dw is zero with a unit bias, conv_out reads the first C mids.
    let c = 2;
    let mut g = Gsrm::new("g", c, &mut rng(1));
    zero_params(&mut g);
    let mid = 2 * c;
    for i in 0..c {
        g.conv_in.weight.tensor.data_mut()[i * 2 * c + i] = 1.0;
        g.conv_out.weight.tensor.data_mut()[i * mid + i] = 1.0;
    }
    g.dw.bias.tensor = Tensor::ones(&[mid]);
    let mut tape = Tape::new();
    let rgb = tape.constant(Tensor::new(&[2, 1, 1], vec![3.0, 4.0]).unwrap());
    let noise = tape.constant(Tensor::new(&[2, 1, 1], vec![1.0, 0.0]).unwrap());
    let out = g.forward(&mut tape, rgb, noise).unwrap();
    let gelu1 = 0.5 * (1.0 + libm::erf(1.0 / std::f64::consts::SQRT_2));
    for v in tape.value(out).data() {
        assert!((v - gelu1).abs() < 1e-15, "{v}");
    }
}

#[test]
fn gsrm_normalization_bound_and_scale_robustness() {
    let g = Gsrm::new("g", 5, &mut rng(2));
    let f = uniform(&[5, 4, 4], -3.0, 3.0, &mut rng(3));
    let mut tape = Tape::new();
    let v = tape.constant(f.clone());
    let n = g.normalize(&mut tape, v).unwrap();
    let nv = tape.value(n).clone();
    for p in 0..16 {
        let norm: f64 = (0..5).map(|c| nv.data()[c * 16 + p].powi(2)).sum::<f64>().sqrt();
        assert!(norm <= 1.0 + 1e-9);
    }
    for k in [0.5, 2.0, 10.0] {
        let s = tape.constant(f.map(|x| x * k));
        let ns = g.normalize(&mut tape, s).unwrap();
        assert!(tape.value(ns).max_abs_diff(&nv) < 10.0 * g.eps);
    }
}

#[test]
fn hata_matches_loop_oracle_on_random_inputs() {
    let mut r = rng(4);
    for trial in 0..20 {
        let mut block = Hata::new("h", 4, &mut r);
        randomize_params(&mut block, 0.2, trial);
        let x = uniform(&[4, 5, 5], -1.0, 1.0, &mut r);
        let (attn, want) = hata_oracle(&block, &x);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let parts = block.forward_parts(&mut tape, xv).unwrap();
        assert!(tape.value(parts.output).max_abs_diff(&want) < 1e-10);
        let a = tape.value(parts.attention);
        assert_eq!(a.shape(), &[4, 4]);
        for i in 0..4 {
            for j in 0..4 {
                assert!((a.data()[i * 4 + j] - attn[i][j]).abs() < 1e-10);
            }
            let row: f64 = a.data()[i * 4..(i + 1) * 4].iter().sum();
            assert!((row - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn hata_hand_example_with_identity_projections() {
    let mut block = Hata::new("h", 2, &mut rng(5));
    zero_params(&mut block);
    for i in 0..2 {
        for chunk in 0..3 {
            block.qkv.weight.tensor.data_mut()[(chunk * 2 + i) * 2 + i] = 1.0;
        }
        block.out_proj.weight.tensor.data_mut()[i * 2 + i] = 1.0;
    }
    let (a, b) = (0.3, 0.9);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(&[2, 1, 1], vec![a, b]).unwrap());
    let parts = block.forward_parts(&mut tape, x).unwrap();
    for v in tape.value(parts.attention).data() {
        assert!((v - 0.5).abs() < 1e-12);
    }
    // zero LPE weights: output = attn ⊙ σ(0) + 0
    for v in tape.value(parts.output).data() {
        assert!((v - 0.5 * (a + b) / 2.0).abs() < 1e-12);
    }
}

#[test]
fn hata_attention_is_channel_sized_and_scale_invariant() {
    let mut block = Hata::new("h", 3, &mut rng(6));
    let x = uniform(&[3, 6, 4], -1.0, 1.0, &mut rng(7));
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let base = block.forward_parts(&mut tape, xv).unwrap();
    assert_eq!(tape.shape(base.attention), &[3, 3]);
    let a0 = tape.value(base.attention).clone();
    for k in [0.5, 3.0] {
        let xs = tape.constant(x.map(|v| v * k));
        let p = block.forward_parts(&mut tape, xs).unwrap();
        assert!(tape.value(p.attention).max_abs_diff(&a0) < 1e-9);
    }
    block.log_alpha.tensor = Tensor::scalar(0.7);
    assert!((block.alpha() - 0.7f64.exp()).abs() < 1e-15);
}

#[test]
fn hata_attention_core_cost_is_linear_in_pixels() {
    let block = Hata::new("h", 31, &mut rng(8));
    let count = |h: usize, w: usize| {
        let mut tape = Tape::new();
        let x = tape.constant(uniform(&[31, h, w], -1.0, 1.0, &mut rng(9)));
        block.forward(&mut tape, x).unwrap();
        attention_core_op_count(&tape) as f64
    };
    let ratio = count(32, 32) / count(16, 16);
    assert!((ratio / 4.0 - 1.0).abs() < 0.01, "ratio {ratio}");
}

fn small_config() -> DenoiserConfig {
    DenoiserConfig {
        base_channels: 8,
        bands: 31,
        time_embed_dim: 16,
        ..DenoiserConfig::default()
    }
}

#[test]
fn base_estimate_single_pixel_by_hand() {
    let model = DenoiserModel::new(small_config(), 0).unwrap();
    let rgb = Tensor::new(&[3, 1, 1], vec![0.2, -0.4, 0.9]).unwrap();
    let mut tape = Tape::new();
    let v = tape.constant(rgb.clone());
    let out = model.base_estimate(&mut tape, v).unwrap();
    let w = &model.phi.weight.tensor;
    for b in 0..31 {
        // only the centre tap sees the single pixel
        let want: f64 = (0..3).map(|c| w.data()[((b * 3 + c) * 3 + 1) * 3 + 1] * rgb.data()[c]).sum::<f64>()
            + model.phi.bias.tensor.data()[b];
        assert!((tape.value(out).data()[b] - want).abs() < 1e-15);
    }
    let z = tape.constant(Tensor::zeros(&[3, 4, 4]));
    let out = model.base_estimate(&mut tape, z).unwrap();
    assert_eq!(tape.value(out).max_abs(), 0.0);
}

#[test]
fn fresh_model_is_the_base_estimate_for_every_step() {
    let model = DenoiserModel::new(DenoiserConfig::default(), 11).unwrap();
    let rgb = uniform(&[3, 8, 12], 0.0, 1.0, &mut rng(10));
    let x_t = uniform(&[31, 8, 12], -2.0, 2.0, &mut rng(11));
    let mut tape = Tape::new();
    let r = tape.constant(rgb.clone());
    let base = model.base_estimate(&mut tape, r).unwrap();
    for t in 1..=5 {
        let out = predict(&model, &x_t, &rgb, t).unwrap();
        assert_eq!(out.shape(), &[31, 8, 12]);
        assert_eq!(&out, tape.value(base));
    }
}

#[test]
fn randomized_model_depends_on_the_step() {
    let mut model = DenoiserModel::new(small_config(), 12).unwrap();
    randomize_params(&mut model, 0.1, 1);
    let rgb = uniform(&[3, 8, 8], 0.0, 1.0, &mut rng(12));
    let x_t = uniform(&[31, 8, 8], -1.0, 1.0, &mut rng(13));
    let a = predict(&model, &x_t, &rgb, 1).unwrap();
    let b = predict(&model, &x_t, &rgb, 5).unwrap();
    assert!(a.max_abs_diff(&b) > 0.0);
}

#[test]
fn scales_halve_and_restore() {
    let model = DenoiserModel::new(small_config(), 0).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[8, 12, 16]));
    let down0 = model.downs[0].forward(&mut tape, x).unwrap();
    assert_eq!(tape.shape(down0), &[8, 6, 8]);
    let down1 = model.downs[1].forward(&mut tape, down0).unwrap();
    assert_eq!(tape.shape(down1), &[8, 3, 4]);
    let up = tape.upsample2x(down1).unwrap();
    assert_eq!(tape.shape(up), &[8, 6, 8]);
    let out = predict(&model, &Tensor::zeros(&[31, 12, 16]), &Tensor::zeros(&[RGB_CHANNELS, 12, 16]), 2).unwrap();
    assert_eq!(out.shape(), &[31, 12, 16]);
    assert!(predict(&model, &Tensor::zeros(&[31, 10, 16]), &Tensor::zeros(&[3, 10, 16]), 2).is_err());
    assert!(predict(&model, &Tensor::zeros(&[30, 12, 16]), &Tensor::zeros(&[3, 12, 16]), 2).is_err());
}

#[test]
fn norm_free_audit_and_budget() {
    for (gsrm, hata) in [(true, true), (false, false)] {
        let cfg = DenoiserConfig {
            use_gsrm: gsrm,
            use_hata: hata,
            ..DenoiserConfig::default()
        };
        let model = DenoiserModel::new(cfg, 0).unwrap();
        let kinds = model.layer_kinds();
        assert_eq!(kinds.iter().filter(|k| **k == LayerKind::Normalization).count(), 1);
        assert_eq!(kinds.contains(&LayerKind::Attention), hata);
        assert!(model.count_params() < 1_000_000);
    }
    let model = DenoiserModel::new(DenoiserConfig::default(), 0).unwrap();
    let n = model.count_params();
    assert!((300_000..=900_000).contains(&n), "{n}");
    assert_eq!(model.count_flops(64, 64, 5), 5 * model.count_flops(64, 64, 1));
}

#[test]
fn flops_match_recorded_tape_macs() {
    let model = DenoiserModel::new(DenoiserConfig::default(), 0).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[31, 16, 16]));
    let r = tape.constant(Tensor::zeros(&[3, 16, 16]));
    model.forward(&mut tape, x, r, 3).unwrap();
    assert_eq!(model.count_flops(16, 16, 1), 2 * tape.macs());
}

#[test]
fn time_embedding_examples() {
    let e = time_embedding(0, 8);
    assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    for t in [1usize, 4, 17] {
        assert_eq!(time_embedding(t, 64)[0], (t as f64).sin());
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut model = DenoiserModel::new(
        DenoiserConfig {
            use_gsrm: false,
            ..small_config()
        },
        5,
    )
    .unwrap();
    randomize_params(&mut model, 0.3, 9);
    let dir = tempfile::tempdir().unwrap();
    checkpoint::save(dir.path(), &model).unwrap();
    let back = checkpoint::load(dir.path()).unwrap();
    assert_eq!(back.config(), model.config());
    assert_eq!(back.param_values(), model.param_values());

    std::fs::remove_file(dir.path().join("phi.weight.r2ht")).unwrap();
    assert!(checkpoint::load(dir.path()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gsrm_output_shape_follows_input(c in 1usize..5, h in 1usize..6, w in 1usize..6, seed in 0u64..100) {
        let g = Gsrm::new("g", c, &mut rng(seed));
        let mut tape = Tape::new();
        let a = tape.constant(uniform(&[c, h, w], -1.0, 1.0, &mut rng(seed + 1)));
        let b = tape.constant(uniform(&[c, h, w], -1.0, 1.0, &mut rng(seed + 2)));
        let out = g.forward(&mut tape, a, b).unwrap();
        prop_assert_eq!(tape.shape(out), &[c, h, w]);
    }

    #[test]
    fn hata_rows_sum_to_one(c in 1usize..6, h in 1usize..6, w in 1usize..6, seed in 0u64..100) {
        let block = Hata::new("h", c, &mut rng(seed));
        let mut tape = Tape::new();
        let x = tape.constant(uniform(&[c, h, w], -5.0, 5.0, &mut rng(seed + 7)));
        let parts = block.forward_parts(&mut tape, x).unwrap();
        let a = tape.value(parts.attention);
        for i in 0..c {
            let s: f64 = a.data()[i * c..(i + 1) * c].iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
        prop_assert_eq!(tape.shape(parts.output), &[c, h, w]);
    }
}
