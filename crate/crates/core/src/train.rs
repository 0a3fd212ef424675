//! Deterministic training on rendered synthetic scenes.

use std::io::Write;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::depth::DepthMap;
use crate::error::{Error, Result};
use crate::loss::final_loss_on;
use crate::model::{ModelConfig, PanoFormer};
use crate::optim::Adam;
use crate::scene::SceneSpec;
use crate::tensor::{Tape, Tensor};

fn default_lr() -> f64 {
    1e-4
}

fn default_steps() -> usize {
    2000
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "one")]
    pub batch_size: usize,
    /// Seeds parameter initialization.
    #[serde(default)]
    pub seed: u64,
    /// Training scenes; when empty a single random scene from `scene_seed`
    /// is used.
    #[serde(default)]
    pub scenes: Vec<SceneSpec>,
    #[serde(default)]
    pub scene_seed: u64,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub trace: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            learning_rate: default_lr(),
            steps: default_steps(),
            batch_size: 1,
            seed: 0,
            scenes: Vec::new(),
            scene_seed: 0,
            checkpoint: None,
            trace: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("steps and batch_size must be >= 1".into()));
        }
        for s in &self.scenes {
            s.validate()?;
        }
        Ok(())
    }

    /// The configured scenes, or the single random default.
    pub fn scene_list(&self) -> Vec<SceneSpec> {
        if self.scenes.is_empty() {
            vec![SceneSpec::random(self.scene_seed)]
        } else {
            self.scenes.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: PanoFormer,
    /// Loss before the update of each step.
    pub trace: Vec<TraceRow>,
}

/// Rendered training pair.
#[derive(Debug, Clone)]
pub struct Sample {
    pub rgb: Tensor,
    pub depth: DepthMap,
}

pub fn render_samples(scenes: &[SceneSpec], width: usize, height: usize) -> Result<Vec<Sample>> {
    scenes
        .iter()
        .map(|s| {
            let (rgb, depth) = s.render(width, height)?;
            Ok(Sample { rgb, depth })
        })
        .collect()
}

/// Mean training loss of `model` over `samples`, without gradients.
pub fn evaluate_loss(model: &PanoFormer, samples: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let tape = Tape::new();
        let p = model.params.bind(&tape);
        let x = tape.constant(&s.rgb.shape, s.rgb.data.clone())?;
        let y = model.forward_on(&tape, &p, x)?;
        total += tape.scalar(final_loss_on(&tape, &s.depth, y)?);
    }
    Ok(total / samples.len() as f64)
}

/// Runs the configured number of Adam steps. `on_step` sees every
/// `(step, loss)` pair as it is produced.
pub fn train_toy(cfg: &TrainConfig, mut on_step: impl FnMut(usize, f64)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let scenes = cfg.scene_list();
    let samples = render_samples(&scenes, cfg.model.input_width, cfg.model.input_height)?;
    let mut model = PanoFormer::build(cfg.model.clone(), cfg.seed)?;
    let mut opt = Adam::new(cfg.learning_rate);
    let mut trace = Vec::with_capacity(cfg.steps);
    let weight = 1.0 / cfg.batch_size as f64;
    for step in 0..cfg.steps {
        let tape = Tape::new();
        let p = model.params.bind(&tape);
        let mut terms = Vec::with_capacity(cfg.batch_size);
        for b in 0..cfg.batch_size {
            let s = &samples[(step * cfg.batch_size + b) % samples.len()];
            let x = tape.constant(&s.rgb.shape, s.rgb.data.clone())?;
            let y = model.forward_on(&tape, &p, x)?;
            terms.push((final_loss_on(&tape, &s.depth, y)?, weight));
        }
        let loss = tape.weighted_sum(&terms)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                param_norm: model.params.norm(),
            });
        }
        trace.push(TraceRow { step, loss: value });
        on_step(step, value);
        tape.backward(loss)?;
        model.params.zero_grads();
        model.params.collect_grads(&tape, &p);
        opt.apply(&mut model.params);
    }
    model.params.zero_grads();
    Ok(TrainOutcome { model, trace })
}

/// Writes the loss trace as CSV with a `step,loss` header.
pub fn write_trace_csv(w: impl Write, trace: &[TraceRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["step", "loss"])?;
    for row in trace {
        out.write_record([row.step.to_string(), format!("{:e}", row.loss)])?;
    }
    out.flush()?;
    Ok(())
}
