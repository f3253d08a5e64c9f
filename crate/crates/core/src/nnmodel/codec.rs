//! Exact latent codec: each `p×p` RGB patch becomes `3p²` channels at one
//! latent cell, channel index `ch·p² + dy·p + dx`.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::raster::{Frame, Mask};

fn patchify(frame: &Frame, patch: usize) -> Result<Vec<f32>> {
    let n = frame.size();
    if patch == 0 || n % patch != 0 {
        return Err(Error::Shape(format!("frame side {n} not divisible by patch {patch}")));
    }
    let s = n / patch;
    let pp = patch * patch;
    let mut out = vec![0.0f32; 3 * pp * s * s];
    for y in 0..n {
        for x in 0..n {
            let px = frame.get(x, y);
            let (cy, dy, cx, dx) = (y / patch, y % patch, x / patch, x % patch);
            for (ch, &v) in px.iter().enumerate() {
                let c = ch * pp + dy * patch + dx;
                out[(c * s + cy) * s + cx] = v;
            }
        }
    }
    Ok(out)
}

fn unpatchify(data: &[f32], channels: usize, s: usize) -> Result<Frame> {
    let pp = channels / 3;
    let patch = (pp as f64).sqrt().round() as usize;
    if channels != 3 * patch * patch || data.len() != channels * s * s {
        return Err(Error::Shape(format!("latent with {channels} channels is not a patchified RGB image")));
    }
    let n = s * patch;
    let mut frame = Frame::black(n);
    for y in 0..n {
        for x in 0..n {
            let (cy, dy, cx, dx) = (y / patch, y % patch, x / patch, x % patch);
            let mut px = [0.0f32; 3];
            for (ch, v) in px.iter_mut().enumerate() {
                let c = ch * pp + dy * patch + dx;
                *v = data[(c * s + cy) * s + cx];
            }
            frame.set(x, y, px);
        }
    }
    Ok(frame)
}

/// `(3p², n/p, n/p)` float32 latent of a frame.
pub fn encode_latent(frame: &Frame, patch: usize) -> Result<Tensor> {
    let s = frame.size() / patch.max(1);
    let data = patchify(frame, patch)?;
    Ok(Tensor::from_vec(data, (3 * patch * patch, s, s), &Device::Cpu)?)
}

pub fn decode_latent(latent: &Tensor) -> Result<Frame> {
    let (c, h, w) = latent.dims3()?;
    if h != w {
        return Err(Error::Shape(format!("latent is {h}×{w}")));
    }
    let data = latent.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    unpatchify(&data, c, h)
}

/// `(B, 3p², s, s)` batch of latents.
pub fn frames_to_latents(frames: &[&Frame], patch: usize, dtype: DType) -> Result<Tensor> {
    let ts = frames.iter().map(|f| encode_latent(f, patch)).collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&ts, 0)?.to_dtype(dtype)?)
}

pub fn latents_to_frames(latents: &Tensor) -> Result<Vec<Frame>> {
    let b = latents.dim(0)?;
    (0..b).map(|i| decode_latent(&latents.get(i)?)).collect()
}

/// Maps `[0,1]` pixel latents to the network's `[-1,1]` range.
pub fn to_model_space(latent: &Tensor) -> Result<Tensor> {
    Ok(latent.affine(2.0, -1.0)?)
}

pub fn from_model_space(latent: &Tensor) -> Result<Tensor> {
    Ok(latent.affine(0.5, 0.5)?)
}

/// Mask average-pooled over `p×p` patches, shape `(1, n/p, n/p)`.
pub fn pool_mask(mask: &Mask, patch: usize) -> Result<Tensor> {
    let n = mask.size();
    if patch == 0 || n % patch != 0 {
        return Err(Error::Shape(format!("mask side {n} not divisible by patch {patch}")));
    }
    let s = n / patch;
    let mut out = vec![0.0f32; s * s];
    for y in 0..n {
        for x in 0..n {
            if mask.get(x, y) {
                out[(y / patch) * s + x / patch] += 1.0;
            }
        }
    }
    let area = (patch * patch) as f32;
    out.iter_mut().for_each(|v| *v /= area);
    Ok(Tensor::from_vec(out, (1, s, s), &Device::Cpu)?)
}

/// Appends the pooled mask as an extra channel to a `(c, s, s)` latent.
pub fn make_masked_latent(latent: &Tensor, mask: &Mask) -> Result<Tensor> {
    let (_, h, w) = latent.dims3()?;
    if mask.size() % h != 0 || mask.size() / h * w != mask.size() {
        return Err(Error::Shape(format!("mask side {} does not match latent {h}×{w}", mask.size())));
    }
    let pooled = pool_mask(mask, mask.size() / h)?.to_dtype(latent.dtype())?;
    Ok(Tensor::cat(&[latent, &pooled], 0)?)
}

/// `(B, 3p²+1, s, s)`: model-space latents of masked images plus pooled masks.
pub fn masked_latent_tensor(images: &[&Frame], masks: &[&Mask], patch: usize, dtype: DType) -> Result<Tensor> {
    if images.len() != masks.len() {
        return Err(Error::Shape(format!("{} images vs {} masks", images.len(), masks.len())));
    }
    let ts = images
        .iter()
        .zip(masks)
        .map(|(img, m)| make_masked_latent(&to_model_space(&encode_latent(img, patch)?)?, m))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&ts, 0)?.to_dtype(dtype)?)
}
