//! The U-shaped PanoFormer network: input stem, encoder stages with
//! stride-2 downsampling, a bottleneck, decoder stages with transposed-conv
//! upsampling and concatenated skips, and an output stem.

use std::f64::consts::FRAC_PI_4;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{PstBlockParams, TokenFlowField};
use crate::depth::DepthMap;
use crate::error::{shape_err, Error, Result};
use crate::geometry::{build_stlm_grid, pixel_pitch, SamplingGrid};
use crate::tensor::{Bindings, PadMode, ParamId, ParamStore, Tape, Tensor, Var};

const PAD: PadMode = PadMode::CircularHZeroV;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    #[default]
    Linear,
    Softplus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_width: usize,
    pub input_height: usize,
    pub base_channels: usize,
    /// Number of encoder (and decoder) stages; each encoder stage halves the
    /// spatial extent once.
    pub num_stages: usize,
    pub encoder_heads: Vec<usize>,
    pub bottleneck_heads: usize,
    pub decoder_heads: Vec<usize>,
    pub blocks_per_stage: usize,
    pub leff_ratio: usize,
    pub output_activation: OutputActivation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_width: 64,
            input_height: 32,
            base_channels: 16,
            num_stages: 4,
            encoder_heads: vec![1, 2, 4, 8],
            bottleneck_heads: 16,
            decoder_heads: vec![16, 8, 4, 2],
            blocks_per_stage: 2,
            leff_ratio: 2,
            output_activation: OutputActivation::Linear,
        }
    }
}

impl ModelConfig {
    /// The 16×8, 8-channel, two-stage configuration used for exhaustive
    /// gradient and symmetry checks.
    pub fn micro() -> Self {
        Self::default().scaled(16, 8, 8, 2)
    }

    /// Same head schedule truncated to `num_stages` (encoder heads from the
    /// shallow end, decoder heads from the shallow end as well).
    pub fn scaled(self, width: usize, height: usize, channels: usize, num_stages: usize) -> Self {
        let enc: Vec<usize> = [1, 2, 4, 8, 16, 32].iter().copied().take(num_stages).collect();
        let dec_full = [16, 8, 4, 2];
        let dec = if num_stages <= dec_full.len() {
            dec_full[dec_full.len() - num_stages..].to_vec()
        } else {
            enc.iter().rev().map(|h| h * 2).collect()
        };
        Self {
            input_width: width,
            input_height: height,
            base_channels: channels,
            num_stages,
            encoder_heads: enc,
            decoder_heads: dec,
            ..self
        }
    }

    /// Channel count at encoder level `s` (`s == num_stages` is the bottleneck).
    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// `(height, width)` at level `s`.
    pub fn extent_at(&self, level: usize) -> (usize, usize) {
        (self.input_height >> level, self.input_width >> level)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let (w, h, s) = (self.input_width, self.input_height, self.num_stages);
        if w == 0 || h == 0 || w != 2 * h {
            return bad(format!("input must be 2:1, got {w}x{h}"));
        }
        if s == 0 || s > 8 {
            return bad(format!("num_stages {s} outside 1..=8"));
        }
        let unit = 1usize << s;
        if w % unit != 0 || h % unit != 0 {
            return bad(format!("{w}x{h} not divisible by 2^{s}"));
        }
        if self.base_channels == 0 || self.blocks_per_stage == 0 || self.leff_ratio == 0 {
            return bad("base_channels, blocks_per_stage and leff_ratio must be >= 1".into());
        }
        if self.encoder_heads.len() != s || self.decoder_heads.len() != s {
            return bad(format!(
                "need {s} encoder and decoder head counts, got {} and {}",
                self.encoder_heads.len(),
                self.decoder_heads.len()
            ));
        }
        let mut checks: Vec<(String, usize, usize)> = Vec::new();
        for (i, &m) in self.encoder_heads.iter().enumerate() {
            checks.push((format!("encoder stage {i}"), self.channels_at(i), m));
        }
        checks.push(("bottleneck".into(), self.channels_at(s), self.bottleneck_heads));
        for (i, &m) in self.decoder_heads.iter().enumerate() {
            checks.push((format!("decoder stage {i}"), self.channels_at(s - 1 - i), m));
        }
        for (what, c, m) in checks {
            if m == 0 || c % m != 0 {
                return bad(format!("{what}: {m} heads do not divide {c} channels"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct EncoderStage {
    pos: ParamId,
    blocks: Vec<PstBlockParams>,
    down_weight: ParamId,
    down_bias: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct DecoderStage {
    up_weight: ParamId,
    up_bias: ParamId,
    fuse_weight: ParamId,
    fuse_bias: ParamId,
    pos: ParamId,
    blocks: Vec<PstBlockParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanoFormer {
    pub config: ModelConfig,
    pub params: ParamStore,
    stem_in: (ParamId, ParamId),
    encoder: Vec<EncoderStage>,
    bottleneck: Vec<PstBlockParams>,
    decoder: Vec<DecoderStage>,
    stem_out: (ParamId, ParamId),
    /// One grid per level, `0..=num_stages`.
    grids: Vec<SamplingGrid>,
}

fn conv_params(
    store: &mut ParamStore,
    prefix: &str,
    shape: [usize; 4],
    out_channels: usize,
    fan_in: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(ParamId, ParamId)> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w = store.add(format!("{prefix}.weight"), Tensor::uniform(&shape, bound, rng))?;
    let b = store.add(format!("{prefix}.bias"), Tensor::zeros(&[out_channels]))?;
    Ok((w, b))
}

fn blocks(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &ModelConfig,
    channels: usize,
    heads: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PstBlockParams>> {
    (0..cfg.blocks_per_stage)
        .map(|b| {
            PstBlockParams::init(
                store,
                &format!("{prefix}.block{b}"),
                channels,
                heads,
                cfg.leff_ratio,
                rng,
            )
        })
        .collect()
}

/// Grid for one stage: one-pixel pitch, capped at pi/4 so the coarsest
/// levels of small inputs still get a proper tangent patch.
pub fn stage_grid(width: usize, height: usize) -> Result<SamplingGrid> {
    let (dt, dp) = pixel_pitch(width, height);
    build_stlm_grid(width, height, dt.min(FRAC_PI_4), dp.min(FRAC_PI_4))
}

impl PanoFormer {
    /// Deterministically initializes a model from `seed`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = &config;
        let s_count = cfg.num_stages;
        let c0 = cfg.base_channels;

        let stem_in = conv_params(&mut store, "stem_in", [c0, 3, 3, 3], c0, 27, &mut rng)?;
        let mut encoder = Vec::with_capacity(s_count);
        for s in 0..s_count {
            let c = cfg.channels_at(s);
            let (h, w) = cfg.extent_at(s);
            let prefix = format!("enc{s}");
            let pos = store.add(format!("{prefix}.pos"), Tensor::zeros(&[c, h, w]))?;
            let blk = blocks(&mut store, &prefix, cfg, c, cfg.encoder_heads[s], &mut rng)?;
            let (dw, db) = conv_params(
                &mut store,
                &format!("{prefix}.down"),
                [2 * c, c, 4, 4],
                2 * c,
                16 * c,
                &mut rng,
            )?;
            encoder.push(EncoderStage {
                pos,
                blocks: blk,
                down_weight: dw,
                down_bias: db,
            });
        }
        let bottleneck = blocks(
            &mut store,
            "bottleneck",
            cfg,
            cfg.channels_at(s_count),
            cfg.bottleneck_heads,
            &mut rng,
        )?;
        let mut decoder = Vec::with_capacity(s_count);
        for (i, &heads) in cfg.decoder_heads.iter().enumerate() {
            let level = s_count - 1 - i;
            let c = cfg.channels_at(level);
            let (h, w) = cfg.extent_at(level);
            let prefix = format!("dec{i}");
            let (uw, ub) = conv_params(&mut store, &format!("{prefix}.up"), [2 * c, c, 2, 2], c, 2 * c, &mut rng)?;
            let (fw, fb) = conv_params(&mut store, &format!("{prefix}.fuse"), [c, 2 * c, 1, 1], c, 2 * c, &mut rng)?;
            let pos = store.add(format!("{prefix}.pos"), Tensor::zeros(&[c, h, w]))?;
            let blk = blocks(&mut store, &prefix, cfg, c, heads, &mut rng)?;
            decoder.push(DecoderStage {
                up_weight: uw,
                up_bias: ub,
                fuse_weight: fw,
                fuse_bias: fb,
                pos,
                blocks: blk,
            });
        }
        let stem_out = conv_params(&mut store, "stem_out", [1, c0, 3, 3], 1, 9 * c0, &mut rng)?;

        let grids = (0..=s_count)
            .map(|l| {
                let (h, w) = cfg.extent_at(l);
                stage_grid(w, h)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            params: store,
            stem_in,
            encoder,
            bottleneck,
            decoder,
            stem_out,
            grids,
        })
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Grid used at level `l` (`num_stages` is the bottleneck).
    pub fn grid(&self, level: usize) -> &SamplingGrid {
        &self.grids[level]
    }

    /// Every PST block in forward order.
    pub fn blocks(&self) -> impl Iterator<Item = &PstBlockParams> {
        self.encoder
            .iter()
            .flat_map(|s| s.blocks.iter())
            .chain(self.bottleneck.iter())
            .chain(self.decoder.iter().flat_map(|s| s.blocks.iter()))
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        if shape != [3, c.input_height, c.input_width] {
            return Err(shape_err(
                "PanoFormer::forward",
                format!("input {shape:?}, expected [3, {}, {}]", c.input_height, c.input_width),
            ));
        }
        Ok(())
    }

    fn stem(&self, tape: &Tape, p: &Bindings, rgb: Var) -> Result<Var> {
        self.check_input(&tape.shape(rgb))?;
        tape.conv2d(rgb, p.get(self.stem_in.0), Some(p.get(self.stem_in.1)), 1, PAD)
    }

    /// Records the forward pass of `rgb: [3, H, W]` on `tape` with parameters
    /// `p` (from [`ParamStore::bind`] or any equally ordered variables).
    /// Returns the `[1, H, W]` depth prediction.
    pub fn forward_on(&self, tape: &Tape, p: &Bindings, rgb: Var) -> Result<Var> {
        let mut x = self.stem(tape, p, rgb)?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        for (s, stage) in self.encoder.iter().enumerate() {
            x = tape.add(x, p.get(stage.pos))?;
            for b in &stage.blocks {
                x = b.forward(tape, x, &self.grids[s], p)?;
            }
            skips.push(x);
            x = tape.conv2d(x, p.get(stage.down_weight), Some(p.get(stage.down_bias)), 2, PAD)?;
        }
        let deepest = self.config.num_stages;
        for b in &self.bottleneck {
            x = b.forward(tape, x, &self.grids[deepest], p)?;
        }
        for (i, stage) in self.decoder.iter().enumerate() {
            let level = deepest - 1 - i;
            x = tape.conv_transpose2x2(x, p.get(stage.up_weight), Some(p.get(stage.up_bias)))?;
            x = tape.concat(&[x, skips[level]])?;
            x = tape.conv2d(x, p.get(stage.fuse_weight), Some(p.get(stage.fuse_bias)), 1, PAD)?;
            x = tape.add(x, p.get(stage.pos))?;
            for b in &stage.blocks {
                x = b.forward(tape, x, &self.grids[level], p)?;
            }
        }
        let out = tape.conv2d(x, p.get(self.stem_out.0), Some(p.get(self.stem_out.1)), 1, PAD)?;
        Ok(match self.config.output_activation {
            OutputActivation::Linear => out,
            OutputActivation::Softplus => tape.softplus(out),
        })
    }

    /// Depth prediction for `rgb: [3, H, W]`.
    pub fn forward(&self, rgb: &Tensor) -> Result<DepthMap> {
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let x = tape.constant(&rgb.shape, rgb.data.clone())?;
        let out = self.forward_on(&tape, &p, x)?;
        DepthMap::new(
            self.config.input_width,
            self.config.input_height,
            tape.value(out).to_vec(),
        )
    }

    /// Token flows of the first PST block for `rgb`.
    pub fn first_block_flows(&self, rgb: &Tensor) -> Result<TokenFlowField> {
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let x = tape.constant(&rgb.shape, rgb.data.clone())?;
        let mut f = self.stem(&tape, &p, x)?;
        let stage = &self.encoder[0];
        f = tape.add(f, p.get(stage.pos))?;
        stage.blocks[0].token_flows(&tape, f, &self.grids[0], &p)
    }

    /// Replaces parameter values by name. Every parameter must be supplied
    /// exactly once with a matching shape.
    pub fn load_params(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        if named.len() != self.params.len() {
            return Err(Error::Format {
                format: "PNFM",
                detail: format!(
                    "{} parameter records, model has {}",
                    named.len(),
                    self.params.len()
                ),
            });
        }
        for (name, t) in named {
            let p = self.params.by_name_mut(&name).ok_or_else(|| Error::Format {
                format: "PNFM",
                detail: format!("unknown parameter {name}"),
            })?;
            if p.tensor.shape != t.shape {
                return Err(Error::Format {
                    format: "PNFM",
                    detail: format!("{name}: shape {:?} vs {:?}", t.shape, p.tensor.shape),
                });
            }
            p.tensor.data = t.data;
        }
        Ok(())
    }
}
