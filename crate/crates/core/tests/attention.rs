mod common;

use panoformer::attention::{PsaParams, PstBlockParams};
use panoformer::checks::{check_leff, check_psa, check_pst, GRADCHECK_TOLERANCE};
use panoformer::geometry::build_default_grid;
use panoformer::tensor::{ParamStore, Tape};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_psa(c: usize, heads: usize, scale: f64, rng: &mut ChaCha8Rng) -> (ParamStore, PsaParams) {
    let mut store = ParamStore::new();
    let psa = PsaParams::init(&mut store, "psa", c, heads, rng).unwrap();
    for id in psa.ids() {
        for v in &mut store.get_mut(id).tensor.data {
            *v = rng.gen_range(-scale..scale);
        }
    }
    (store, psa)
}

fn run_psa(store: &ParamStore, psa: &PsaParams, f: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let grid = build_default_grid(w, h).unwrap();
    let tape = Tape::new();
    let p = store.bind(&tape);
    let x = tape.constant(&[c, h, w], f.to_vec()).unwrap();
    tape.value(psa.forward(&tape, x, &grid, &p).unwrap()).to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn psa_matches_naive_loops(
        seed in any::<u64>(),
        c_pick in 0usize..2,
        heads_pick in 0usize..3,
        h in 3usize..9,
        scale in 0.1f64..3.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = [4, 8][c_pick];
        let heads = [1, 2, 4][heads_pick];
        let w = 2 * h;
        let (store, psa) = random_psa(c, heads, scale, &mut rng);
        let f = common::random_vec(c * h * w, -1.0, 1.0, &mut rng);
        let fast = run_psa(&store, &psa, &f, c, h, w);
        let grid = build_default_grid(w, h).unwrap();
        let slow = common::naive_psa(&f, c, &grid, &store, "psa", heads);
        for (a, b) in fast.iter().zip(&slow) {
            prop_assert!((a - b).abs() < 1e-10, "{} vs {}", a, b);
        }
    }

    #[test]
    fn attention_weights_sum_to_one(seed in any::<u64>(), heads_pick in 0usize..3) {
        // constant values, identity head and merge maps: any convex
        // combination returns the value bias unchanged
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, heads, h, w) = (4, [1, 2, 4][heads_pick], 4, 8);
        let (mut store, psa) = random_psa(c, heads, 2.0, &mut rng);
        store.get_mut(psa.v_weight).tensor.data.fill(0.0);
        let d = c / heads;
        let eye = |n: usize, blocks: usize| {
            let mut m = vec![0.0; blocks * n * n];
            for b in 0..blocks {
                for i in 0..n {
                    m[b * n * n + i * n + i] = 1.0;
                }
            }
            m
        };
        store.get_mut(psa.head_out).tensor.data = eye(d, heads);
        store.get_mut(psa.merge_weight).tensor.data = eye(c, 1);
        store.get_mut(psa.merge_bias).tensor.data.fill(0.0);
        let bias = store.get(psa.v_bias).tensor.data.clone();
        let f = common::random_vec(c * h * w, -1.0, 1.0, &mut rng);
        let out = run_psa(&store, &psa, &f, c, h, w);
        for (ch, plane) in out.chunks(h * w).enumerate() {
            for v in plane {
                prop_assert!((v - bias[ch]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn psa_commutes_with_column_rolls(seed in any::<u64>(), k in 0usize..16) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, heads, h, w) = (4, 2, 8, 16);
        let (store, psa) = random_psa(c, heads, 1.0, &mut rng);
        let f = common::random_vec(c * h * w, -1.0, 1.0, &mut rng);
        let base = run_psa(&store, &psa, &f, c, h, w);
        let rolled = run_psa(&store, &psa, &common::roll_columns(&f, h, w, k), c, h, w);
        let expect = common::roll_columns(&base, h, w, k);
        for (a, b) in rolled.iter().zip(&expect) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn flow_projection_receives_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (c, h, w) = (4, 4, 8);
    let mut store = ParamStore::new();
    let block = PstBlockParams::init(&mut store, "blk", c, 2, 2, &mut rng).unwrap();
    // fresh blocks start with zero attention and flow projections
    for id in [block.psa.attn_weight, block.psa.flow_weight, block.psa.flow_bias] {
        assert!(store.get(id).tensor.data.iter().all(|v| *v == 0.0));
    }
    let grid = build_default_grid(w, h).unwrap();
    let tape = Tape::new();
    let p = store.bind(&tape);
    let x = tape
        .constant(&[c, h, w], common::random_vec(c * h * w, -1.0, 1.0, &mut rng))
        .unwrap();
    let y = block.forward(&tape, x, &grid, &p).unwrap();
    let sq = tape.square(y);
    let loss = tape.sum(sq);
    tape.backward(loss).unwrap();
    for id in [block.psa.flow_weight, block.psa.flow_bias, block.psa.attn_weight] {
        let g = tape.grad(p.get(id)).unwrap();
        assert!(g.iter().any(|v| *v != 0.0), "{}", store.get(id).name);
    }
}

#[test]
fn block_gradients_match_finite_differences() {
    for report in [check_leff(1).unwrap(), check_psa(1).unwrap(), check_pst(1).unwrap()] {
        assert!(report.report.max_rel_error < GRADCHECK_TOLERANCE, "{}: {:?}", report.name, report.report);
    }
}
