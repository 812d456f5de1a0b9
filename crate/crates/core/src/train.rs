//! Two-stage imitation training: randomly rotated and rescaled problems,
//! then fine-tuning with corner-pinned problems mixed in.

use std::f64::consts::TAU;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{warmup_schedule, AdamW, Graph};
use crate::checkpoint::{save_checkpoint, EmbeddingSource};
use crate::dataset::{Generator, Sample};
use crate::error::{Error, Result};
use crate::eval::mean_huber;
use crate::geom::{Similarity, Trajectory, WorldConfig};
use crate::language::Direction;
use crate::model::{ModelConfig, ModelInput, ModelKind, Reshaper};
use crate::seeded_rng;

const MAX_AUGMENT_DRAWS: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage_a_epochs: usize,
    pub stage_b_epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate of the transformer.
    pub base_lr: f64,
    /// Peak learning rate of the FCN baseline.
    pub fcn_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    /// Half-open range of stage-A rotations, radians.
    pub rotation: [f64; 2],
    pub scale: [f64; 2],
    /// Corner-pinned problems generated for stage B.
    pub stage_b_samples: usize,
    pub stage_b_seed: u64,
    pub seed: u64,
    pub model: ModelConfig,
    pub embeddings: EmbeddingSource,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            stage_a_epochs: 40,
            stage_b_epochs: 10,
            batch_size: 64,
            base_lr: 1e-4,
            fcn_lr: 1e-3,
            warmup_epochs: 15,
            weight_decay: 0.01,
            rotation: [0.0, TAU],
            scale: [0.7, 1.3],
            stage_b_samples: 400,
            stage_b_seed: 1_000_000,
            seed: 0,
            model: ModelConfig::desk(),
            embeddings: EmbeddingSource::default(),
        }
    }

    pub fn paper() -> Self {
        TrainConfig {
            stage_a_epochs: 450,
            stage_b_epochs: 50,
            stage_b_samples: 2000,
            model: ModelConfig::paper(),
            ..TrainConfig::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(TrainConfig::desk()),
            "paper" => Ok(TrainConfig::paper()),
            other => Err(Error::Argument(format!("unknown training preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        if self.stage_a_epochs + self.stage_b_epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be positive".into());
        }
        if !(self.base_lr > 0.0 && self.fcn_lr > 0.0 && self.weight_decay >= 0.0) {
            return bad("learning rates must be positive and weight decay non-negative".into());
        }
        let [r0, r1] = self.rotation;
        if !(0.0 <= r0 && r0 <= r1 && r1 <= TAU) {
            return bad(format!("rotation range {:?} must lie within [0, 2π]", self.rotation));
        }
        let [s0, s1] = self.scale;
        if !(0.0 < s0 && s0 <= s1 && s1.is_finite()) {
            return bad(format!("scale range {:?} must be positive and ordered", self.scale));
        }
        self.model.validate()
    }

    pub fn lr_for(&self, kind: ModelKind) -> f64 {
        match kind {
            ModelKind::Transformer => self.base_lr,
            ModelKind::Fcn => self.fcn_lr,
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.stage_a_epochs + self.stage_b_epochs
    }
}

fn draw(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// A randomly rotated and rescaled copy of `sample`. Only distance commands
/// are rotated: the others name world-frame directions. Draws that leave the
/// workspace are redrawn; if none fits, the sample is returned unchanged.
pub fn augment(sample: &Sample, cfg: &TrainConfig, rng: &mut impl Rng) -> Sample {
    let rotate = matches!(sample.command_ast.direction, Direction::Closer | Direction::Further);
    for _ in 0..MAX_AUGMENT_DRAWS {
        let sim = Similarity {
            rotation: if rotate { draw(rng, cfg.rotation) } else { 0.0 },
            scale: draw(rng, cfg.scale),
        };
        let moved = (
            sim.apply_world(&sample.world),
            sim.apply_traj(&sample.xi_o),
            sim.apply_traj(&sample.xi_mod),
        );
        if let (Ok(world), Ok(xi_o), Ok(xi_mod)) = moved {
            return Sample {
                world,
                xi_o,
                xi_mod,
                ..sample.clone()
            };
        }
    }
    sample.clone()
}

/// Corner-pinned problems for stage B.
pub fn stage_b_samples(generator: &Generator, cfg: &TrainConfig) -> Result<Vec<Sample>> {
    if cfg.stage_b_epochs == 0 || cfg.stage_b_samples == 0 {
        return Ok(Vec::new());
    }
    generator.generate_many(cfg.stage_b_samples, cfg.stage_b_seed, &WorldConfig::corner_pinned())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    A,
    B,
}

/// One line of the metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub stage: Stage,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub history: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub steps: u64,
}

/// Where training writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct TrainOutput {
    pub metrics: Option<PathBuf>,
    /// Rewritten whenever validation loss improves.
    pub checkpoint: Option<PathBuf>,
}

pub struct TrainData<'a> {
    pub train: &'a [Sample],
    pub val: &'a [Sample],
    pub stage_b: &'a [Sample],
}

fn inputs(samples: &[Sample]) -> Vec<ModelInput<'_>> {
    samples
        .iter()
        .map(|s| ModelInput {
            world: &s.world,
            xi_o: &s.xi_o,
            command: &s.command_text,
        })
        .collect()
}

/// Mean Huber loss of the model's predictions (autoregressive for the
/// transformer) against the labels.
pub fn prediction_loss(model: &dyn Reshaper, samples: &[Sample]) -> Result<f64> {
    let preds = model.predict(&inputs(samples))?;
    let targets: Vec<_> = samples.iter().map(|s| &s.xi_mod).collect();
    Ok(mean_huber(&preds, &targets))
}

struct MetricsLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsLog {
    fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(MetricsLog {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    fn append(&mut self, m: &EpochMetrics) -> Result<()> {
        let line = serde_json::to_string(m).map_err(|e| Error::Argument(e.to_string()))?;
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

/// Trains `model` in place and leaves it holding the best-validation weights.
///
/// A non-finite batch loss aborts training: the model is reset to the best
/// weights so far (or the weights before the failing step if no epoch
/// finished), the checkpoint is written, and [`Error::Training`] is returned.
pub fn train(model: &mut dyn Reshaper, data: &TrainData<'_>, cfg: &TrainConfig, out: &TrainOutput) -> Result<TrainReport> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Argument("training and validation sets must be non-empty".into()));
    }
    let mut metrics = out.metrics.as_deref().map(MetricsLog::create).transpose()?;
    let base_lr = cfg.lr_for(model.kind());
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut best: Option<(usize, f64, _)> = None;
    let mut history = Vec::new();

    for epoch in 0..cfg.total_epochs() {
        let stage = if epoch < cfg.stage_a_epochs { Stage::A } else { Stage::B };
        let lr = warmup_schedule(epoch, base_lr, cfg.warmup_epochs);
        let mut rng = seeded_rng(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut pool: Vec<Sample> = match stage {
            Stage::A => data.train.iter().map(|s| augment(s, cfg, &mut rng)).collect(),
            Stage::B => data.train.iter().chain(data.stage_b).cloned().collect(),
        };
        pool.shuffle(&mut rng);

        let mut total = 0.0;
        for (b, batch) in pool.chunks(cfg.batch_size).enumerate() {
            let targets: Vec<_> = batch.iter().map(|s| &s.xi_mod).collect();
            let mut g = Graph::new();
            let dropout_seed = rng.random::<u64>();
            let loss = model.batch_loss(&mut g, &inputs(batch), &targets, Some(dropout_seed))?;
            let value = g.value(loss).data()[0] as f64;
            if !value.is_finite() {
                let diag = format!("non-finite loss {value} at epoch {epoch}, batch {b}");
                if let Some((_, _, params)) = &best {
                    *model.params_mut() = Clone::clone(params);
                }
                if let Some(path) = &out.checkpoint {
                    save_checkpoint(path, model, &cfg.embeddings)?;
                }
                log::error!("{diag}");
                return Err(Error::Training(diag));
            }
            total += value * batch.len() as f64;
            let grads = g.backward(loss, model.params())?;
            opt.step(model.params_mut(), &grads, lr)?;
        }
        let train_loss = total / pool.len() as f64;
        let val_loss = prediction_loss(model, data.val)?;
        let m = EpochMetrics {
            epoch,
            stage,
            lr,
            train_loss,
            val_loss,
        };
        log::info!("epoch {epoch} ({stage:?}) lr {lr:.2e} train {train_loss:.6} val {val_loss:.6}");
        if log::log_enabled!(log::Level::Debug) {
            let targets: Vec<Trajectory> = data.val.iter().map(|s| s.xi_mod.clone()).collect();
            if let Some(tf) = model.teacher_forced(&inputs(data.val), &targets)? {
                let refs: Vec<_> = targets.iter().collect();
                log::debug!("epoch {epoch} teacher-forced val {:.6}", mean_huber(&tf, &refs));
            }
        }
        if let Some(log) = metrics.as_mut() {
            log.append(&m)?;
        }
        history.push(m);
        if val_loss.is_finite() && best.as_ref().is_none_or(|(_, b, _)| val_loss < *b) {
            best = Some((epoch, val_loss, model.params().clone()));
            if let Some(path) = &out.checkpoint {
                save_checkpoint(path, model, &cfg.embeddings)?;
            }
        }
    }
    let (best_epoch, best_val_loss, params) =
        best.ok_or_else(|| Error::Training("validation loss never finite".into()))?;
    *model.params_mut() = params;
    Ok(TrainReport {
        history,
        best_epoch,
        best_val_loss,
        steps: opt.steps(),
    })
}
