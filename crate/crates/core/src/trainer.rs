//! Two-stage training: stage 1 fits everything except temporal layers on
//! single frames; stage 2 inserts identity-initialized temporal layers and
//! fits only those on clips.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::backprop::GradStore;
use candle_core::{DType, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{build_training_sample, AugmentPolicy, SampleConfig};
use crate::diffusion::{loss_stage1, loss_stage2, make_schedule, TrainBatch};
use crate::error::{Error, Result};
use crate::evalcli::{evaluate_self_attribute, MetricReport, ProtocolConfig};
use crate::nnmodel::{load_checkpoint, save_checkpoint, Model, ModelConfig, ParamStore, Trainable};
use crate::pipeline::Weights;
use crate::synthworld::{list_videos, load_video, VideoRecord};

/// Flat key-value training configuration (TOML).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: u8,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub dataset_root: PathBuf,
    /// Where checkpoints are written.
    pub checkpoint: PathBuf,
    /// Stage-1 weights to start stage 2 from.
    pub init_checkpoint: Option<PathBuf>,
    pub clip_len: usize,
    /// Steps between validation-loss evaluations; 0 disables.
    pub validate_every: usize,
    /// Steps between checkpoint writes; 0 writes only at the end.
    pub checkpoint_every: usize,
    pub log_csv: Option<PathBuf>,
    pub mask_expansion: bool,
    pub augment: bool,
    /// Cosine decay from `learning_rate` to zero at the last step.
    pub cosine_decay: bool,
    /// Global gradient-norm limit; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::stage1()
    }
}

impl TrainConfig {
    pub fn stage1() -> Self {
        Self {
            stage: 1,
            steps: 2000,
            batch_size: 4,
            learning_rate: 1e-3,
            seed: 0,
            dataset_root: PathBuf::from("data"),
            checkpoint: PathBuf::from("stage1.safetensors"),
            init_checkpoint: None,
            clip_len: 1,
            validate_every: 0,
            checkpoint_every: 0,
            log_csv: None,
            mask_expansion: true,
            augment: true,
            cosine_decay: true,
            grad_clip: 1.0,
        }
    }

    pub fn stage2(init: impl Into<PathBuf>) -> Self {
        Self {
            stage: 2,
            steps: 500,
            batch_size: 1,
            checkpoint: PathBuf::from("stage2.safetensors"),
            init_checkpoint: Some(init.into()),
            clip_len: 8,
            ..Self::stage1()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !matches!(self.stage, 1 | 2) {
            return bad("stage must be 1 or 2");
        }
        if self.steps == 0 || self.batch_size == 0 || self.clip_len == 0 {
            return bad("steps, batch_size and clip_len must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.grad_clip >= 0.0) {
            return bad("grad_clip must be non-negative");
        }
        if self.stage == 2 && self.init_checkpoint.is_none() {
            return bad("stage 2 requires init_checkpoint");
        }
        if self.stage == 2 && self.clip_len < 2 {
            return bad("stage 2 requires clip_len >= 2");
        }
        Ok(())
    }

    fn sample_config(&self) -> SampleConfig {
        SampleConfig {
            mask_expansion: self.mask_expansion,
            augment: if self.augment { AugmentPolicy::default() } else { AugmentPolicy::disabled() },
            ..SampleConfig::default()
        }
    }
}

/// Result of a training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub store: ParamStore,
    pub config: ModelConfig,
    pub losses: Vec<f32>,
    /// `(step, loss)` validation points.
    pub validation: Vec<(usize, f32)>,
    pub step: usize,
}

/// Mean of a trailing window at every position.
pub fn smoothed(losses: &[f32], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..losses.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            losses[lo..=i].iter().map(|&v| v as f64).sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

pub fn load_dataset(root: &Path) -> Result<Vec<VideoRecord>> {
    let dirs = list_videos(root)?;
    if dirs.is_empty() {
        return Err(Error::Dataset(format!("no videos under {}", root.display())));
    }
    dirs.iter().map(|d| load_video(d)).collect()
}

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(step as u64))
}

fn draw_batch(videos: &[VideoRecord], cfg: &TrainConfig, rng: &mut ChaCha8Rng, patch: usize) -> Result<TrainBatch> {
    let sc = cfg.sample_config();
    let samples = (0..cfg.batch_size)
        .map(|_| {
            let v = &videos[rng.random_range(0..videos.len())];
            build_training_sample(v, rng.random(), cfg.clip_len, &sc)
        })
        .collect::<Result<Vec<_>>>()?;
    TrainBatch::from_samples(&samples, patch, DType::F32)
}

/// Trains on in-memory videos. `resume` continues a checkpoint of the same
/// stage; otherwise stage 2 starts from `cfg.init_checkpoint`.
pub fn train_videos(
    videos: &[VideoRecord],
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if videos.is_empty() {
        return Err(Error::Dataset("empty dataset".into()));
    }
    let (mut store, model_cfg, mut losses, start) = match (resume, cfg.stage, &cfg.init_checkpoint) {
        (Some(path), _, _) => {
            let ck = load_checkpoint(path, DType::F32)?;
            if ck.stage != cfg.stage {
                return Err(Error::Checkpoint(format!("resuming stage {} from a stage-{} checkpoint", cfg.stage, ck.stage)));
            }
            (ck.store, ck.config, ck.losses, ck.step)
        }
        (None, 2, Some(init)) => {
            let ck = load_checkpoint(init, DType::F32)?;
            if ck.stage != 1 {
                return Err(Error::Checkpoint(format!("stage 2 needs a stage-1 checkpoint, got stage {}", ck.stage)));
            }
            (ck.store, ck.config, Vec::new(), 0)
        }
        _ => (ParamStore::new(DType::F32, cfg.seed), model_cfg.clone(), Vec::new(), 0),
    };
    store.set_trainable(if cfg.stage == 1 { Trainable::NonTemporal } else { Trainable::Temporal });
    let model = Model::new(&mut store, &model_cfg, cfg.stage == 2)?;
    store.check_finite()?;
    let sched = make_schedule(model_cfg.timesteps)?;
    let params = ParamsAdamW { lr: cfg.learning_rate, weight_decay: 0.0, ..Default::default() };
    let trainable = store.trainable_vars();
    let mut opt = AdamW::new(trainable.clone(), params)?;

    let mut csv = match &cfg.log_csv {
        Some(p) => {
            if let Some(d) = p.parent() {
                std::fs::create_dir_all(d)?;
            }
            let fresh = start == 0 || !p.exists();
            let mut f = std::fs::OpenOptions::new().create(true).append(!fresh).write(true).truncate(fresh).open(p)?;
            if fresh {
                writeln!(f, "step,loss,wall_time")?;
            }
            Some(f)
        }
        None => None,
    };
    let val_batches = if cfg.validate_every > 0 {
        (0..4).map(|i| draw_batch(videos, cfg, &mut step_rng(cfg.seed ^ 0x7661_6c, i), model_cfg.patch)).collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let mut validation = Vec::new();
    let began = Instant::now();
    let end = start + cfg.steps;
    for step in start..end {
        let mut rng = step_rng(cfg.seed, step);
        let batch = draw_batch(videos, cfg, &mut rng, model_cfg.patch)?;
        let loss = match cfg.stage {
            1 => loss_stage1(&model, &batch, &sched, &mut rng),
            _ => loss_stage2(&model, &batch, &sched, &mut rng),
        }
        .map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("step {step}: {m}")),
            other => other,
        })?;
        let mut grads = loss.backward()?;
        if cfg.grad_clip > 0.0 {
            clip_grad_norm(&mut grads, &trainable, cfg.grad_clip)?;
        }
        if cfg.cosine_decay {
            opt.set_learning_rate(cosine_lr(cfg.learning_rate, step, end));
        }
        opt.step(&grads)?;
        let value = loss.to_scalar::<f32>()?;
        losses.push(value);
        if let Some(f) = csv.as_mut() {
            writeln!(f, "{},{value},{:.3}", step + 1, began.elapsed().as_secs_f64())?;
        }
        if (step + 1) % 100 == 0 {
            log::info!("stage {} step {} loss {:.4}", cfg.stage, step + 1, smoothed(&losses, 100).last().unwrap());
        }
        if cfg.validate_every > 0 && (step + 1) % cfg.validate_every == 0 {
            let mut total = 0.0;
            for (i, b) in val_batches.iter().enumerate() {
                let mut r = step_rng(cfg.seed ^ 0x6e6f_6973, i);
                let l = match cfg.stage {
                    1 => loss_stage1(&model, b, &sched, &mut r)?,
                    _ => loss_stage2(&model, b, &sched, &mut r)?,
                };
                total += l.to_scalar::<f32>()?;
            }
            validation.push((step + 1, total / val_batches.len() as f32));
        }
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < end {
            save_checkpoint(&cfg.checkpoint, &model_cfg, &store, step + 1, cfg.stage, &losses)?;
        }
    }
    save_checkpoint(&cfg.checkpoint, &model_cfg, &store, end, cfg.stage, &losses)?;
    drop(model);
    Ok(TrainOutcome { store, config: model_cfg, losses, validation, step: end })
}

fn cosine_lr(base: f64, step: usize, end: usize) -> f64 {
    0.5 * base * (1.0 + (std::f64::consts::PI * step as f64 / end as f64).cos())
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
fn clip_grad_norm(grads: &mut GradStore, vars: &[Var], max_norm: f64) -> Result<f64> {
    let mut sq = 0.0f64;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for v in vars {
            if let Some(g) = grads.remove(v.as_tensor()) {
                grads.insert(v.as_tensor(), g.affine(k, 0.0)?);
            }
        }
    }
    Ok(norm)
}

/// Loads the dataset from disk and trains.
pub fn train_stage(cfg: &TrainConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let videos = load_dataset(&cfg.dataset_root)?;
    train_videos(&videos, cfg, &ModelConfig::default(), resume)
}

/// Self-attribute evaluation of a checkpoint on held-out videos.
pub fn validate(checkpoint: &Path, videos: &[(String, VideoRecord)], protocol: &ProtocolConfig) -> Result<MetricReport> {
    let weights = Weights::load(checkpoint)?;
    let sched = make_schedule(weights.model.config.timesteps)?;
    evaluate_self_attribute(videos, &weights, &sched, protocol)
}
