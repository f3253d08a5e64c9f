//! Noise schedule, forward noising, the two training objectives and the
//! deterministic reverse sampler.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::conditioning::TrainingSample;
use crate::error::{Error, Result};
use crate::nnmodel::{frames_to_latents, masked_latent_tensor, to_model_space, AttrGroup, Model};

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

/// Linear betas from 1e-4 to 0.02.
pub fn make_schedule(timesteps: usize) -> Result<DiffusionSchedule> {
    if timesteps < 2 {
        return Err(Error::InvalidArgument(format!("schedule needs at least 2 steps, got {timesteps}")));
    }
    let (lo, hi) = (1e-4, 0.02);
    let betas: Vec<f64> = (0..timesteps).map(|i| lo + (hi - lo) * i as f64 / (timesteps - 1) as f64).collect();
    let mut acc = 1.0;
    let alpha_bars = betas
        .iter()
        .map(|b| {
            acc *= 1.0 - b;
            acc
        })
        .collect();
    Ok(DiffusionSchedule { betas, alpha_bars })
}

impl DiffusionSchedule {
    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t >= self.timesteps() {
            return Err(Error::InvalidArgument(format!("timestep {t} outside [0, {})", self.timesteps())));
        }
        Ok(())
    }

    /// Ascending timesteps `round((i+1)·T/steps) − 1`, ending at `T − 1`.
    pub fn sub_schedule(&self, steps: usize) -> Result<Vec<usize>> {
        let t = self.timesteps();
        if steps < 1 || steps > t {
            return Err(Error::InvalidArgument(format!("sampler steps must lie in [1, {t}], got {steps}")));
        }
        Ok((0..steps).map(|i| (((i + 1) as f64 * t as f64 / steps as f64).round() as usize).max(1) - 1).collect())
    }
}

/// Per-row coefficient tensor `(B, 1, 1, 1)`.
fn row_coeffs(values: &[f64], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(values.to_vec(), (values.len(), 1, 1, 1), &Device::Cpu)?.to_dtype(dtype)?)
}

/// `z_t = √ᾱ_t · z0 + √(1−ᾱ_t) · eps`, one timestep per batch row.
pub fn q_sample(z0: &Tensor, t: &[usize], eps: &Tensor, sched: &DiffusionSchedule) -> Result<Tensor> {
    if z0.dims() != eps.dims() {
        return Err(Error::Shape(format!("noise {:?} vs latent {:?}", eps.dims(), z0.dims())));
    }
    if t.len() != z0.dim(0)? {
        return Err(Error::Shape(format!("{} timesteps for batch {}", t.len(), z0.dim(0)?)));
    }
    for &ti in t {
        sched.check(ti)?;
    }
    let a: Vec<f64> = t.iter().map(|&ti| sched.alpha_bars[ti].sqrt()).collect();
    let s: Vec<f64> = t.iter().map(|&ti| (1.0 - sched.alpha_bars[ti]).sqrt()).collect();
    let dt = z0.dtype();
    Ok((z0.broadcast_mul(&row_coeffs(&a, dt)?)? + eps.broadcast_mul(&row_coeffs(&s, dt)?)?)?)
}

/// Standard normal tensor drawn from `rng`.
pub fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], dtype: DType) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Mean squared error between `eps` and the prediction at `z_t`.
pub fn denoising_loss<P>(predict: P, z0: &Tensor, t: &[usize], eps: &Tensor, sched: &DiffusionSchedule) -> Result<Tensor>
where
    P: FnOnce(&Tensor, &Tensor) -> Result<Tensor>,
{
    let z_t = q_sample(z0, t, eps, sched)?;
    let tt = Tensor::from_vec(t.iter().map(|&x| x as f64).collect::<Vec<_>>(), t.len(), &Device::Cpu)?.to_dtype(z0.dtype())?;
    let pred = predict(&z_t, &tt)?;
    let loss = (pred - eps)?.sqr()?.mean_all()?;
    let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss {value} at timesteps {t:?}")));
    }
    Ok(loss)
}

/// Model-ready tensors for a batch of self-reconstruction samples.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    /// `(b, c+1, s, s)` masked attribute latent.
    pub attr: Tensor,
    /// `(b, c+1, s, s)` masked portrait latent.
    pub port: Tensor,
    /// `(b·F, c, s, s)` patchified keypoints in `[0,1]`.
    pub kpt: Tensor,
    /// `(b·F, c, s, s)` model-space target latents.
    pub z0: Tensor,
    pub frames: usize,
}

impl TrainBatch {
    pub fn from_samples(samples: &[TrainingSample], patch: usize, dtype: DType) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let frames = first.targets.len();
        if samples.iter().any(|s| s.targets.len() != frames || s.keypoints.len() != frames) {
            return Err(Error::Shape("samples disagree on clip length".into()));
        }
        let attr_imgs: Vec<_> = samples.iter().map(|s| &s.bundle.attrs[0].0).collect();
        let attr_masks: Vec<_> = samples.iter().map(|s| &s.bundle.attrs[0].1).collect();
        let port_imgs: Vec<_> = samples.iter().map(|s| &s.bundle.port_image).collect();
        let port_masks: Vec<_> = samples.iter().map(|s| &s.bundle.port_mask).collect();
        let kpts: Vec<_> = samples.iter().flat_map(|s| s.keypoints.iter()).collect();
        let targets: Vec<_> = samples.iter().flat_map(|s| s.targets.iter()).collect();
        Ok(Self {
            attr: masked_latent_tensor(&attr_imgs, &attr_masks, patch, dtype)?,
            port: masked_latent_tensor(&port_imgs, &port_masks, patch, dtype)?,
            kpt: frames_to_latents(&kpts, patch, dtype)?,
            z0: to_model_space(&frames_to_latents(&targets, patch, dtype)?)?,
            frames,
        })
    }

    pub fn clips(&self) -> Result<usize> {
        Ok(self.attr.dim(0)?)
    }
}

fn model_loss(model: &Model, batch: &TrainBatch, t: &[usize], eps: &Tensor, sched: &DiffusionSchedule, temporal: bool) -> Result<Tensor> {
    let refs = model.encode_references(&[AttrGroup::single(batch.attr.clone())], &batch.port)?.repeat_frames(batch.frames)?;
    let pose = model.pose_features(&batch.kpt)?;
    denoising_loss(|z_t, tt| model.dnet.forward(z_t, tt, &refs, &pose, batch.frames, temporal), &batch.z0, t, eps, sched)
}

/// Per-frame objective without temporal layers; one timestep per row.
pub fn loss_stage1(model: &Model, batch: &TrainBatch, sched: &DiffusionSchedule, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let rows = batch.z0.dim(0)?;
    let t: Vec<usize> = (0..rows).map(|_| rng.random_range(0..sched.timesteps())).collect();
    let eps = gaussian(rng, batch.z0.dims(), batch.z0.dtype())?;
    model_loss(model, batch, &t, &eps, sched, false)
}

/// Clip objective through the temporal layers; one timestep shared by all
/// frames of a clip. Freezing is the parameter store's job.
pub fn loss_stage2(model: &Model, batch: &TrainBatch, sched: &DiffusionSchedule, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if batch.frames < 2 {
        return Err(Error::InvalidArgument(format!("stage 2 needs clips of at least 2 frames, got {}", batch.frames)));
    }
    let clips = batch.clips()?;
    let t: Vec<usize> = (0..clips)
        .flat_map(|_| {
            let ti = rng.random_range(0..sched.timesteps());
            std::iter::repeat_n(ti, batch.frames)
        })
        .collect();
    let eps = gaussian(rng, batch.z0.dims(), batch.z0.dtype())?;
    model_loss(model, batch, &t, &eps, sched, true)
}

/// Deterministic accelerated reverse process from `z_start` (noise at `T−1`) over `steps`
/// uniformly spaced timesteps. Predicted clean latents are clamped to
/// `[-1, 1]` when `clip` is set. Returns the final clean estimate.
pub fn sample_reverse<P>(mut predict: P, z_start: &Tensor, sched: &DiffusionSchedule, steps: usize, clip: bool) -> Result<Tensor>
where
    P: FnMut(&Tensor, &Tensor) -> Result<Tensor>,
{
    let ts = sched.sub_schedule(steps)?;
    let rows = z_start.dim(0)?;
    let dtype = z_start.dtype();
    let mut z = z_start.clone();
    for i in (0..ts.len()).rev() {
        let t = ts[i];
        let ab = sched.alpha_bars[t];
        let ab_prev = if i == 0 { 1.0 } else { sched.alpha_bars[ts[i - 1]] };
        let tt = Tensor::full(t as f64, rows, &Device::Cpu)?.to_dtype(dtype)?;
        let eps = predict(&z, &tt)?;
        let mut x0 = ((&z - eps.affine((1.0 - ab).sqrt(), 0.0)?)? / ab.sqrt())?;
        if clip {
            x0 = x0.clamp(-1.0, 1.0)?;
        }
        z = if i == 0 { x0 } else { (x0.affine(ab_prev.sqrt(), 0.0)? + eps.affine((1.0 - ab_prev).sqrt(), 0.0)?)? };
    }
    Ok(z)
}
