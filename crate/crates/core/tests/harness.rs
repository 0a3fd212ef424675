mod common;

use std::io::Cursor;

use panoformer::checkpoint::{read_checkpoint, write_checkpoint};
use panoformer::geometry::{build_default_grid, erp_to_sphere};
use panoformer::io::{
    read_grid_dump, read_pfm, read_ppm, write_grid_dump, write_pfm, write_ppm, RgbImage,
};
use panoformer::metrics::lrce;
use panoformer::model::{ModelConfig, PanoFormer};
use panoformer::scene::SceneSpec;
use panoformer::train::{train_toy, TrainConfig};
use panoformer::DepthMap;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn rendered_depth_matches_ray_marching() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (w, h) = (128, 64);
    for seed in 0..4 {
        let scene = SceneSpec::random(seed);
        let (_, depth) = scene.render(w, h).unwrap();
        for _ in 0..100 {
            let (c, r) = (rng.gen_range(0..w), rng.gen_range(0..h));
            let dir = erp_to_sphere(c as f64, r as f64, w, h).unwrap().to_unit_vector();
            assert!((depth.at(r, c) - common::ray_march(&scene, dir)).abs() < 2e-3);
        }
    }
}

#[test]
fn rendered_panorama_is_continuous_across_the_seam() {
    let (w, h) = (256, 128);
    let (rgb, depth) = SceneSpec::random(3).render(w, h).unwrap();
    assert_eq!(lrce(&depth, &depth).unwrap(), 0.0);
    assert!(rgb.data.iter().all(|v| (0.0..=1.0).contains(v)));
    // neighbours across the seam differ no more than neighbours elsewhere
    let jump = |a: usize, b: usize| (0..h).map(|r| (depth.at(r, a) - depth.at(r, b)).abs()).sum::<f64>();
    let seam = jump(w - 1, 0);
    let worst_inner = (0..w - 1).map(|c| jump(c, c + 1)).fold(0.0f64, f64::max);
    assert!(seam <= worst_inner + 1e-9, "{seam} vs {worst_inner}");
}

#[test]
fn random_scenes_are_valid_and_seeded() {
    for seed in 0..20 {
        let s = SceneSpec::random(seed);
        s.validate().unwrap();
        assert!((1..=3).contains(&s.boxes.len()));
        assert_eq!(s, SceneSpec::random(seed));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn pfm_round_trip(w in 1usize..12, h in 1usize..12, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals: Vec<f64> = (0..w * h)
            .map(|_| if rng.gen_bool(0.1) { f64::NAN } else { rng.gen_range(0.1f32..20.0) as f64 })
            .collect();
        let d = DepthMap::new(w, h, vals).unwrap();
        let mut buf = Vec::new();
        write_pfm(&mut buf, &d).unwrap();
        let header = format!("Pf\n{w} {h}\n-1.0\n");
        prop_assert!(buf.starts_with(header.as_bytes()));
        let back = read_pfm(&mut Cursor::new(buf)).unwrap();
        prop_assert_eq!(&back.valid_mask, &d.valid_mask);
        for i in 0..w * h {
            if d.valid_mask[i] {
                prop_assert_eq!(back.values[i], d.values[i]);
            }
        }
    }

    #[test]
    fn ppm_round_trip(w in 1usize..10, h in 1usize..10, bytes in prop::collection::vec(any::<u8>(), 300)) {
        let mut img = RgbImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let i = 3 * (y * w + x);
                img.put(x, y, [bytes[i], bytes[i + 1], bytes[i + 2]]);
            }
        }
        let mut buf = Vec::new();
        write_ppm(&mut buf, &img).unwrap();
        prop_assert_eq!(read_ppm(&mut Cursor::new(buf)).unwrap(), img);
    }
}

#[test]
fn ppm_with_wide_samples_is_unsupported() {
    let mut data = b"P6\n1 1\n65535\n".to_vec();
    data.extend([0u8; 6]);
    let err = read_ppm(&mut Cursor::new(data)).unwrap_err();
    assert_eq!(err.kind(), "unsupported");
}

#[test]
fn grid_dump_round_trip() {
    let grid = build_default_grid(12, 6).unwrap();
    let mut buf = Vec::new();
    write_grid_dump(&mut buf, &grid).unwrap();
    assert_eq!(&buf[..4], b"STLM");
    assert_eq!(buf.len(), 16 + 12 * 6 * 9 * 2 * 8);
    let (w, h, pos) = read_grid_dump(&mut Cursor::new(buf)).unwrap();
    assert_eq!((w, h), (12, 6));
    assert_eq!(pos, grid.positions);
}

#[test]
fn trained_checkpoint_round_trips_bit_exactly() {
    let cfg = TrainConfig {
        model: ModelConfig::micro(),
        steps: 4,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    let out = train_toy(&cfg, |_, _| {}).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &out.model).unwrap();
    let back: PanoFormer = read_checkpoint(&mut Cursor::new(&buf)).unwrap();
    assert_eq!(back.config, out.model.config);
    assert_eq!(back.params, out.model.params);
    let mut again = Vec::new();
    write_checkpoint(&mut again, &back).unwrap();
    assert_eq!(buf, again);
}
