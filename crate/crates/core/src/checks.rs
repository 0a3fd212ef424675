//! Finite-difference gradient checks for the kernels, the attention layers
//! and the full network, shared by the test suite and the CLI.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{LeffParams, PstBlockParams};
use crate::error::{Error, Result};
use crate::geometry::{build_default_grid, SamplingGrid};
use crate::loss::{berhu_on, final_loss_on, BERHU_DELTA};
use crate::model::{ModelConfig, PanoFormer};
use crate::scene::SceneSpec;
use crate::tensor::{
    gradcheck, Bindings, GradcheckOptions, GradcheckReport, PadMode, ParamStore, Tape, Tensor, Var,
};
use crate::DepthMap;

/// Largest relative error accepted by every check.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckModule {
    Kernels,
    Leff,
    Psa,
    Pst,
    Model,
}

impl CheckModule {
    pub const ALL: [CheckModule; 5] = [
        CheckModule::Kernels,
        CheckModule::Leff,
        CheckModule::Psa,
        CheckModule::Pst,
        CheckModule::Model,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckModule::Kernels => "kernels",
            CheckModule::Leff => "leff",
            CheckModule::Psa => "psa",
            CheckModule::Pst => "pst",
            CheckModule::Model => "model",
        }
    }
}

impl FromStr for CheckModule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown check module {s:?}")))
    }
}

impl fmt::Display for CheckModule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedReport {
    pub name: String,
    pub report: GradcheckReport,
}

impl NamedReport {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < GRADCHECK_TOLERANCE
    }
}

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("consistent shape")
}

/// `Σ w_i · y_i` with fixed pseudo-random weights, a generic scalar probe of
/// a tensor-valued function.
pub fn random_readout(tape: &Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = random(&shape, -1.0, 1.0, &mut rng);
    let wv = tape.constant(&shape, w.data)?;
    let prod = tape.mul(y, wv)?;
    Ok(tape.sum(prod))
}

/// Replaces the zero-initialized attention and flow projections of
/// `blocks` with small random values. This moves every sampling position off
/// the pixel lattice, where bilinear interpolation has kinks.
pub fn randomize_attention<'a>(
    store: &mut ParamStore,
    blocks: impl IntoIterator<Item = &'a PstBlockParams>,
    rng: &mut impl Rng,
) {
    for b in blocks {
        let p = &b.psa;
        for (id, scale) in [
            (p.attn_weight, 0.5),
            (p.attn_bias, 0.5),
            (p.flow_weight, 0.15),
            (p.flow_bias, 0.6),
        ] {
            for v in &mut store.get_mut(id).tensor.data {
                *v = rng.gen_range(-scale..scale);
            }
        }
    }
}

fn params_as_inputs(store: &ParamStore) -> Vec<Tensor> {
    store.iter().map(|p| p.tensor.clone()).collect()
}

fn bindings(vars: &[Var], count: usize) -> Bindings {
    Bindings(vars[..count].to_vec())
}

fn options(seed: u64, max_entries: Option<usize>) -> GradcheckOptions {
    GradcheckOptions {
        seed,
        max_entries_per_input: max_entries,
        ..GradcheckOptions::default()
    }
}

fn named(name: &str, r: Result<GradcheckReport>) -> Result<NamedReport> {
    Ok(NamedReport {
        name: name.to_string(),
        report: r?,
    })
}

/// Every tensor kernel on small random inputs.
pub fn check_kernels(seed: u64) -> Result<Vec<NamedReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = options(seed, None);
    let mut out = Vec::new();
    let r = &mut rng;

    out.push(named(
        "linear",
        gradcheck(
            |t, v| {
                let y = t.linear(v[0], v[1], Some(v[2]))?;
                random_readout(t, y, 1)
            },
            &[random(&[5, 4], -1.0, 1.0, r), random(&[4, 3], -1.0, 1.0, r), random(&[3], -1.0, 1.0, r)],
            &opts,
        ),
    )?);
    out.push(named(
        "grouped_linear",
        gradcheck(
            |t, v| {
                let y = t.grouped_linear(v[0], v[1])?;
                random_readout(t, y, 2)
            },
            &[random(&[5, 6], -1.0, 1.0, r), random(&[2, 3, 3], -1.0, 1.0, r)],
            &opts,
        ),
    )?);
    out.push(named(
        "layer_norm",
        gradcheck(
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2])?;
                random_readout(t, y, 3)
            },
            &[random(&[5, 6], -2.0, 2.0, r), random(&[6], 0.5, 1.5, r), random(&[6], -1.0, 1.0, r)],
            &opts,
        ),
    )?);
    out.push(named(
        "softmax_last",
        gradcheck(
            |t, v| {
                let y = t.softmax_last(v[0])?;
                random_readout(t, y, 4)
            },
            &[random(&[4, 9], -3.0, 3.0, r)],
            &opts,
        ),
    )?);
    out.push(named(
        "gelu_softplus",
        gradcheck(
            |t, v| {
                let a = random_readout(t, t.gelu(v[0]), 5)?;
                let b = random_readout(t, t.softplus(v[0]), 6)?;
                t.weighted_sum(&[(a, 1.0), (b, 1.0)])
            },
            &[random(&[20], -4.0, 4.0, r)],
            &opts,
        ),
    )?);
    out.push(named(
        "elementwise",
        gradcheck(
            |t, v| {
                let m = t.mul(v[0], v[1])?;
                let s = t.square(v[0]);
                let a = t.add(m, s)?;
                let tr = t.transpose(a)?;
                let c = t.concat(&[tr, t.scale(tr, -0.5)])?;
                let tok = t.to_tokens(t.reshape(c, &[2, 4, 3])?)?;
                let back = t.from_tokens(tok, 4, 3)?;
                let r1 = random_readout(t, back, 7)?;
                let mean = t.mean(v[1]);
                t.weighted_sum(&[(r1, 1.0), (mean, 2.0)])
            },
            &[random(&[3, 4], -1.0, 1.0, r), random(&[3, 4], -1.0, 1.0, r)],
            &opts,
        ),
    )?);
    out.push(named(
        "conv2d_3x3",
        gradcheck(
            |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 1, PadMode::CircularHZeroV)?;
                random_readout(t, y, 8)
            },
            &[random(&[2, 4, 6], -1.0, 1.0, r), random(&[3, 2, 3, 3], -1.0, 1.0, r), random(&[3], -1.0, 1.0, r)],
            &opts,
        ),
    )?);
    out.push(named(
        "conv2d_4x4_stride2",
        gradcheck(
            |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), 2, PadMode::CircularHZeroV)?;
                random_readout(t, y, 9)
            },
            &[random(&[2, 4, 8], -1.0, 1.0, r), random(&[4, 2, 4, 4], -1.0, 1.0, r), random(&[4], -1.0, 1.0, r)],
            &opts,
        ),
    )?);
    out.push(named(
        "conv2d_zero_pad",
        gradcheck(
            |t, v| {
                let y = t.conv2d(v[0], v[1], None, 1, PadMode::Zero)?;
                random_readout(t, y, 10)
            },
            &[random(&[2, 3, 5], -1.0, 1.0, r), random(&[2, 2, 3, 3], -1.0, 1.0, r)],
            &opts,
        ),
    )?);
    out.push(named(
        "conv_transpose2x2",
        gradcheck(
            |t, v| {
                let y = t.conv_transpose2x2(v[0], v[1], Some(v[2]))?;
                random_readout(t, y, 11)
            },
            &[random(&[4, 2, 4], -1.0, 1.0, r), random(&[4, 2, 2, 2], -1.0, 1.0, r), random(&[2], -1.0, 1.0, r)],
            &opts,
        ),
    )?);
    out.push(named(
        "depthwise_conv3x3",
        gradcheck(
            |t, v| {
                let y = t.depthwise_conv3x3(v[0], v[1], Some(v[2]))?;
                random_readout(t, y, 12)
            },
            &[random(&[3, 4, 6], -1.0, 1.0, r), random(&[3, 3, 3], -1.0, 1.0, r), random(&[3], -1.0, 1.0, r)],
            &opts,
        ),
    )?);
    out.push(named(
        "bilinear_sample",
        gradcheck(
            |t, v| {
                let y = t.bilinear_sample(v[0], v[1])?;
                random_readout(t, y, 13)
            },
            &[random(&[2, 4, 6], -1.0, 1.0, r), {
                let mut p = random(&[12, 2], -1.0, 7.0, r);
                for xy in p.data.chunks_mut(2) {
                    xy[1] = xy[1] * 0.6 - 0.9;
                }
                p
            }],
            &opts,
        ),
    )?);
    let grid = build_default_grid(8, 4)?;
    out.push(named(
        "sample_tokens",
        gradcheck(
            |t, v| {
                let y = t.sample_tokens(v[0], &grid, Some(v[1]), 2)?;
                random_readout(t, y, 14)
            },
            &[random(&[4, 4, 8], -1.0, 1.0, r), random(&[32, 36], -0.45, 0.45, r)],
            &opts,
        ),
    )?);
    out.push(named(
        "attend_tokens",
        gradcheck(
            |t, v| {
                let y = t.attend_tokens(v[0], v[1], 2)?;
                random_readout(t, y, 15)
            },
            &[random(&[4, 5, 9], -1.0, 1.0, r), random(&[5, 18], 0.0, 1.0, r)],
            &opts,
        ),
    )?);
    let target = random(&[30], 1.0, 3.0, r).data;
    let mask: Vec<bool> = (0..30).map(|i| i % 7 != 3).collect();
    out.push(named(
        "berhu",
        gradcheck(
            |t, v| berhu_on(t, &target, v[0], &mask, BERHU_DELTA),
            &[{
                let mut p = random(&[30], -0.6, 0.6, r);
                p.data.iter_mut().zip(&target).for_each(|(x, g)| *x += g);
                p
            }],
            &opts,
        ),
    )?);
    let depth = DepthMap::new(8, 6, random(&[48], 1.0, 3.0, r).data)?;
    out.push(named(
        "final_loss",
        gradcheck(
            |t, v| final_loss_on(t, &depth, v[0]),
            &[{
                let mut p = random(&[1, 6, 8], -0.5, 0.5, r);
                p.data.iter_mut().zip(&depth.values).for_each(|(x, g)| *x += g);
                p
            }],
            &opts,
        ),
    )?);
    Ok(out)
}

fn feature(c: usize, h: usize, w: usize, rng: &mut impl Rng) -> Tensor {
    random(&[c, h, w], -1.0, 1.0, rng)
}

/// LeFF on a random `4 × 4 × 8` input.
pub fn check_leff(seed: u64) -> Result<NamedReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let leff = LeffParams::init(&mut store, "leff", 4, 2, &mut rng)?;
    for id in [leff.expand_bias, leff.dw_bias, leff.project_bias] {
        for v in &mut store.get_mut(id).tensor.data {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
    let n = store.len();
    let mut inputs = params_as_inputs(&store);
    inputs.push(feature(4, 4, 8, &mut rng));
    named(
        "leff",
        gradcheck(
            |t, v| {
                let y = leff.forward(t, v[n], &bindings(v, n))?;
                random_readout(t, y, seed)
            },
            &inputs,
            &options(seed, None),
        ),
    )
}

fn psa_setup(seed: u64) -> Result<(ParamStore, PstBlockParams, SamplingGrid, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let block = PstBlockParams::init(&mut store, "block", 8, 2, 2, &mut rng)?;
    randomize_attention(&mut store, [&block], &mut rng);
    let grid = build_default_grid(16, 8)?;
    let f = feature(8, 8, 16, &mut rng);
    Ok((store, block, grid, f))
}

/// PSA alone at `C = 8, H = 8, W = 16` with two heads.
pub fn check_psa(seed: u64) -> Result<NamedReport> {
    let (store, block, grid, f) = psa_setup(seed)?;
    let n = store.len();
    let mut inputs = params_as_inputs(&store);
    inputs.push(f);
    named(
        "psa",
        gradcheck(
            |t, v| {
                let y = block.psa.forward(t, v[n], &grid, &bindings(v, n))?;
                random_readout(t, y, seed)
            },
            &inputs,
            &options(seed, None),
        ),
    )
}

/// A full PST block at `C = 8, H = 8, W = 16` with two heads.
pub fn check_pst(seed: u64) -> Result<NamedReport> {
    let (store, block, grid, f) = psa_setup(seed)?;
    let n = store.len();
    let mut inputs = params_as_inputs(&store);
    inputs.push(f);
    named(
        "pst",
        gradcheck(
            |t, v| {
                let y = block.forward(t, v[n], &grid, &bindings(v, n))?;
                random_readout(t, y, seed)
            },
            &inputs,
            &options(seed, None),
        ),
    )
}

/// The micro network with the training loss against a rendered scene.
/// Checks a random subset of `entries` values per parameter tensor.
pub fn check_model(seed: u64, entries: usize) -> Result<NamedReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = PanoFormer::build(ModelConfig::micro(), seed)?;
    let blocks: Vec<PstBlockParams> = model.blocks().cloned().collect();
    randomize_attention(&mut model.params, &blocks, &mut rng);
    let (w, h) = (model.config.input_width, model.config.input_height);
    let (rgb, depth) = SceneSpec::random(seed).render(w, h)?;
    let n = model.params.len();
    let inputs = params_as_inputs(&model.params);
    let x = rgb;
    named(
        "model",
        gradcheck(
            |t, v| {
                let input = t.constant(&x.shape, x.data.clone())?;
                let y = model.forward_on(t, &bindings(v, n), input)?;
                final_loss_on(t, &depth, y)
            },
            &inputs,
            &options(seed, Some(entries)),
        ),
    )
}

/// Runs one check family.
pub fn run(module: CheckModule, seed: u64) -> Result<Vec<NamedReport>> {
    Ok(match module {
        CheckModule::Kernels => check_kernels(seed)?,
        CheckModule::Leff => vec![check_leff(seed)?],
        CheckModule::Psa => vec![check_psa(seed)?],
        CheckModule::Pst => vec![check_pst(seed)?],
        CheckModule::Model => vec![check_model(seed, 6)?],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn module_names_parse() {
        for m in CheckModule::ALL {
            assert_eq!(m.name().parse::<CheckModule>().unwrap(), m);
        }
        assert!("bogus".parse::<CheckModule>().is_err());
    }

    #[test]
    fn kernels_pass() {
        for r in check_kernels(1).unwrap() {
            assert!(r.passed(), "{}: {:?}", r.name, r.report);
        }
    }
}
