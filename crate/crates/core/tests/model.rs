mod common;

use panoformer::checks::{check_model, randomize_attention, GRADCHECK_TOLERANCE};
use panoformer::model::{ModelConfig, OutputActivation, PanoFormer};
use panoformer::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn micro_parameter_count_by_hand() {
    // One PST block with c channels and m heads:
    //   q, v, merge        3 (c^2 + c)
    //   attn, flow         27 m (c + 1)
    //   head_out           c^2 / m
    //   leff (ratio 2)     (2c^2 + 2c) + 20c + (2c^2 + c)
    //   norms              4c
    // = 7c^2 + c^2/m + 30c + 27m(c + 1)
    // enc0 (8, 1) 995, enc1 (16, 2) 3318, bottleneck (32, 16) 22448,
    // dec0 (16, 4) 4172, dec1 (8, 2) 1206; two blocks each: 64278.
    // stem_in 224, enc0 pos 1024 + down 2064, enc1 pos 512 + down 8224,
    // dec0 up 2064 + fuse 528 + pos 512, dec1 up 520 + fuse 136 + pos 1024,
    // stem_out 73: 16905.
    let model = PanoFormer::build(ModelConfig::micro(), 0).unwrap();
    assert_eq!(model.param_count(), 64278 + 16905);
}

#[test]
fn stage_extents_halve() {
    let cfg = ModelConfig::default();
    let model = PanoFormer::build(cfg.clone(), 0).unwrap();
    let expect = [(32, 64, 16), (16, 32, 32), (8, 16, 64), (4, 8, 128), (2, 4, 256)];
    for (level, (h, w, c)) in expect.into_iter().enumerate() {
        assert_eq!(cfg.extent_at(level), (h, w));
        assert_eq!(cfg.channels_at(level), c);
        let g = model.grid(level);
        assert_eq!((g.height, g.width), (h, w));
    }
    assert_eq!(model.blocks().count(), 2 * (2 * 4 + 1));
}

#[test]
fn invalid_configs_are_rejected() {
    let odd = ModelConfig::micro().scaled(18, 8, 8, 2);
    assert!(PanoFormer::build(odd, 0).is_err());
    let heads = ModelConfig {
        encoder_heads: vec![3, 2],
        ..ModelConfig::micro()
    };
    assert!(PanoFormer::build(heads, 0).is_err());
    let model = PanoFormer::build(ModelConfig::micro(), 0).unwrap();
    assert!(model.forward(&Tensor::zeros(&[3, 8, 8])).is_err());
}

#[test]
fn output_is_finite_and_positive_with_softplus() {
    let cfg = ModelConfig {
        output_activation: OutputActivation::Softplus,
        ..ModelConfig::micro()
    };
    let model = PanoFormer::build(cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::new(&[3, 8, 16], common::random_vec(384, 0.0, 1.0, &mut rng)).unwrap();
    let d = model.forward(&x).unwrap();
    assert!(d.values.iter().all(|v| v.is_finite() && *v > 0.0));
}

#[test]
fn seam_shift_equivariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = ModelConfig::micro();
    let (w, h) = (cfg.input_width, cfg.input_height);
    for seed in 0..3 {
        let mut model = PanoFormer::build(cfg.clone(), seed).unwrap();
        let blocks: Vec<_> = model.blocks().cloned().collect();
        randomize_attention(&mut model.params, &blocks, &mut rng);
        let x = common::random_vec(3 * h * w, 0.0, 1.0, &mut rng);
        let base = model.forward(&Tensor::new(&[3, h, w], x.clone()).unwrap()).unwrap();
        for k in [4, 8, 12] {
            let rolled = Tensor::new(&[3, h, w], common::roll_columns(&x, h, w, k)).unwrap();
            let out = model.forward(&rolled).unwrap();
            let expect = common::roll_columns(&base.values, h, w, k);
            let scale = expect.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            for (a, b) in out.values.iter().zip(&expect) {
                assert!((a - b).abs() <= 1e-9 * scale);
            }
        }
    }
}

#[test]
fn nonzero_positional_embedding_breaks_seam_symmetry() {
    let cfg = ModelConfig::micro();
    let (w, h) = (cfg.input_width, cfg.input_height);
    let mut model = PanoFormer::build(cfg, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for v in &mut model.params.by_name_mut("enc0.pos").unwrap().tensor.data {
        *v = rng.gen_range(-1.0..1.0);
    }
    let x = common::random_vec(3 * h * w, 0.0, 1.0, &mut rng);
    let base = model.forward(&Tensor::new(&[3, h, w], x.clone()).unwrap()).unwrap();
    let out = model
        .forward(&Tensor::new(&[3, h, w], common::roll_columns(&x, h, w, 4)).unwrap())
        .unwrap();
    let expect = common::roll_columns(&base.values, h, w, 4);
    assert!(out.values.iter().zip(&expect).any(|(a, b)| (a - b).abs() > 1e-6));
}

#[test]
fn linear_head_is_affine_in_last_layer() {
    // with zeroed output convolution the prediction is the bias everywhere
    let mut model = PanoFormer::build(ModelConfig::micro(), 1).unwrap();
    model.params.by_name_mut("stem_out.weight").unwrap().tensor.data.fill(0.0);
    model.params.by_name_mut("stem_out.bias").unwrap().tensor.data[0] = 2.5;
    let d = model.forward(&Tensor::filled(&[3, 8, 16], 0.3)).unwrap();
    assert!(d.values.iter().all(|v| *v == 2.5));
}

#[test]
fn build_is_deterministic_per_seed() {
    let a = PanoFormer::build(ModelConfig::micro(), 9).unwrap();
    let b = PanoFormer::build(ModelConfig::micro(), 9).unwrap();
    let c = PanoFormer::build(ModelConfig::micro(), 10).unwrap();
    assert_eq!(a.params, b.params);
    assert_ne!(a.params, c.params);
}

#[test]
fn model_gradient_check() {
    let r = check_model(2, 4).unwrap();
    assert!(r.report.max_rel_error < GRADCHECK_TOLERANCE, "{:?}", r.report);
}
