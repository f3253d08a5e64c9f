//! Building blocks. Feature maps are `(B, C, H, W)`; token sequences are
//! `(B, N, C)`.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use super::params::{Init, ParamStore};
use crate::error::{Error, Result};

/// How attribute tokens enter the spatial-attention softmax.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttrFusion {
    /// Attribute logits are offset by `-ln N`, so N copies of one attribute
    /// weigh exactly as much as a single copy.
    #[default]
    Normalized,
    /// Plain softmax over the concatenated keys.
    Literal,
}

fn uniform_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        Self::with_init(store, name, fan_in, fan_out, Init::Uniform(uniform_bound(fan_in)))
    }

    /// All-zero weights and bias.
    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        Self::with_init(store, name, fan_in, fan_out, Init::Zeros)
    }

    fn with_init(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, init: Init) -> Result<Self> {
        Ok(Self {
            weight: store.tensor(&format!("{name}.weight"), &[fan_out, fan_in], init)?,
            bias: store.tensor(&format!("{name}.bias"), &[fan_out], Init::Zeros)?,
        })
    }

    /// Applies to the last dimension of any-rank input.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let (fan_out, fan_in) = self.weight.dims2()?;
        let rows = x.elem_count() / fan_in;
        let y = x.reshape((rows, fan_in))?.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?;
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = fan_out;
        Ok(y.reshape(out_dims)?)
    }
}

/// Stride-1 "same" convolution with odd square kernels, lowered to one matmul.
#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    kernel: usize,
}

impl Conv2d {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, kernel: usize) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        Ok(Self {
            weight: store.tensor(
                &format!("{name}.weight"),
                &[c_out, c_in, kernel, kernel],
                Init::Uniform(uniform_bound(fan_in)),
            )?,
            bias: store.tensor(&format!("{name}.bias"), &[c_out], Init::Zeros)?,
            kernel,
        })
    }

    /// All-zero weights and bias.
    pub fn zeros(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, kernel: usize) -> Result<Self> {
        Ok(Self {
            weight: store.tensor(&format!("{name}.weight"), &[c_out, c_in, kernel, kernel], Init::Zeros)?,
            bias: store.tensor(&format!("{name}.bias"), &[c_out], Init::Zeros)?,
            kernel,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (c_out, c_in, k, _) = self.weight.dims4()?;
        if c != c_in {
            return Err(Error::Shape(format!("conv expects {c_in} channels, got {c}")));
        }
        let cols = if k == 1 {
            x.transpose(0, 1)?.contiguous()?.reshape((c, b * h * w))?
        } else {
            im2col(x, k)?
        };
        let y = self.weight.reshape((c_out, c_in * k * k))?.matmul(&cols)?;
        let y = y.broadcast_add(&self.bias.reshape((c_out, 1))?)?;
        Ok(y.reshape((c_out, b, h, w))?.transpose(0, 1)?.contiguous()?)
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }
}

/// `(C·k², B·H·W)` patch matrix with zero padding, row index `c·k² + ky·k + kx`.
fn im2col(x: &Tensor, k: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let r = k / 2;
    let xp = x.pad_with_zeros(2, r, r)?.pad_with_zeros(3, r, r)?;
    let mut taps = Vec::with_capacity(k * k);
    for ky in 0..k {
        for kx in 0..k {
            taps.push(xp.narrow(2, ky, h)?.narrow(3, kx, w)?);
        }
    }
    let stacked = Tensor::stack(&taps, 2)?; // (b, c, k², h, w)
    Ok(stacked.permute((1, 2, 0, 3, 4))?.contiguous()?.reshape((c * k * k, b * h * w))?)
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    gamma: Tensor,
    beta: Tensor,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Result<Self> {
        if channels % groups != 0 {
            return Err(Error::Shape(format!("{channels} channels not divisible by {groups} groups")));
        }
        Ok(Self {
            gamma: store.tensor(&format!("{name}.weight"), &[channels], Init::Ones)?,
            beta: store.tensor(&format!("{name}.bias"), &[channels], Init::Zeros)?,
            groups,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let g = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let mean = g.mean_keepdim(2)?;
        let centered = g.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(2)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?.reshape((b, c, h, w))?;
        Ok(normed
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

/// Pre-activation residual block with optional timestep injection.
#[derive(Clone, Debug)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Option<Linear>,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        groups: usize,
        temb_dim: Option<usize>,
    ) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), c_in, groups)?,
            conv1: Conv2d::new(store, &format!("{name}.conv1"), c_in, c_out, 3)?,
            temb: temb_dim.map(|d| Linear::new(store, &format!("{name}.temb"), d, c_out)).transpose()?,
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), c_out, groups)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), c_out, c_out, 3)?,
            skip: (c_in != c_out).then(|| Conv2d::new(store, &format!("{name}.skip"), c_in, c_out, 1)).transpose()?,
        })
    }

    pub fn forward(&self, x: &Tensor, temb: Option<&Tensor>) -> Result<Tensor> {
        let mut h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        if let (Some(proj), Some(e)) = (&self.temb, temb) {
            let (b, c, _, _) = h.dims4()?;
            h = h.broadcast_add(&proj.forward(&e.silu()?)?.reshape((b, c, 1, 1))?)?;
        }
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

pub fn from_tokens(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, _, c) = t.dims3()?;
    Ok(t.transpose(1, 2)?.contiguous()?.reshape((b, c, h, w))?)
}

fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, n, c) = x.dims3()?;
    Ok(x.reshape((b, n, heads, c / heads))?.transpose(1, 2)?.contiguous()?.reshape((b * heads, n, c / heads))?)
}

fn merge_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (bh, n, d) = x.dims3()?;
    Ok(x.reshape((bh / heads, heads, n, d))?.transpose(1, 2)?.contiguous()?.reshape((bh / heads, n, heads * d))?)
}

/// Multi-head scaled dot-product attention. `key_bias` (length M) is added to
/// every query's logits. Returns the attended values `(B, N, C)` and the
/// probabilities `(B·heads, N, M)`.
pub fn attend(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, key_bias: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
    let (_, _, c) = q.dims3()?;
    if heads == 0 || c % heads != 0 {
        return Err(Error::Shape(format!("{c} channels cannot split into {heads} heads")));
    }
    let scale = 1.0 / ((c / heads) as f64).sqrt();
    let (q, k, v) = (split_heads(q, heads)?, split_heads(k, heads)?, split_heads(v, heads)?);
    let mut logits = q.matmul(&k.t()?.contiguous()?)?.affine(scale, 0.0)?;
    if let Some(bias) = key_bias {
        let m = bias.dim(0)?;
        logits = logits.broadcast_add(&bias.reshape((1, 1, m))?)?;
    }
    let probs = candle_nn::ops::softmax(&logits, D::Minus1)?;
    let out = merge_heads(&probs.matmul(&v)?, heads)?;
    Ok((out, probs))
}

/// Query/key/value/output projections of one attention layer.
#[derive(Clone, Debug)]
pub struct AttnWeights {
    pub to_q: Linear,
    pub to_k: Linear,
    pub to_v: Linear,
    pub to_out: Linear,
    pub heads: usize,
}

impl AttnWeights {
    /// `ctx_dim` is the width of the key/value source.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        ctx_dim: usize,
        head_dim: usize,
        zero_out: bool,
    ) -> Result<Self> {
        let to_out = if zero_out {
            Linear::zeros(store, &format!("{name}.to_out"), dim, dim)?
        } else {
            Linear::new(store, &format!("{name}.to_out"), dim, dim)?
        };
        Ok(Self {
            to_q: Linear::new(store, &format!("{name}.to_q"), dim, dim)?,
            to_k: Linear::new(store, &format!("{name}.to_k"), ctx_dim, dim)?,
            to_v: Linear::new(store, &format!("{name}.to_v"), ctx_dim, dim)?,
            to_out,
            heads: (dim / head_dim).max(1),
        })
    }

    /// Starts keys as a copy of queries, so q·k favours similar tokens at init.
    /// Leaves loaded weights alone.
    fn tie_keys(self, store: &ParamStore, name: &str, fresh: bool) -> Result<Self> {
        if !fresh {
            return Ok(self);
        }
        let q = store.get(&format!("{name}.to_q.weight")).expect("query weight").as_tensor().copy()?;
        store.get(&format!("{name}.to_k.weight")).expect("key weight").set(&q)?;
        Ok(self)
    }
}

fn check_level(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{what}: {:?} vs target {:?}", b.dims(), a.dims())));
    }
    Ok(())
}

/// Width-concatenated spatial attention, before the output projection:
/// queries from `f_t`, keys and values from `[f_t, f_port, f_attr¹…f_attrᴺ]`.
pub fn spatial_attention(
    f_t: &Tensor,
    f_port: &Tensor,
    f_attrs: &[Tensor],
    w: &AttnWeights,
    fusion: AttrFusion,
) -> Result<Tensor> {
    Ok(spatial_attention_with_probs(f_t, f_port, f_attrs, w, fusion)?.0)
}

pub fn spatial_attention_with_probs(
    f_t: &Tensor,
    f_port: &Tensor,
    f_attrs: &[Tensor],
    w: &AttnWeights,
    fusion: AttrFusion,
) -> Result<(Tensor, Tensor)> {
    if f_attrs.is_empty() {
        return Err(Error::InvalidArgument("spatial attention needs at least one attribute map".into()));
    }
    check_level(f_t, f_port, "portrait features")?;
    for a in f_attrs {
        check_level(f_t, a, "attribute features")?;
    }
    let (_, _, h, wd) = f_t.dims4()?;
    let n = h * wd;
    let q_tok = to_tokens(f_t)?;
    let mut refs = vec![q_tok.clone(), to_tokens(f_port)?];
    for a in f_attrs {
        refs.push(to_tokens(a)?);
    }
    let ctx = Tensor::cat(&refs, 1)?;
    let bias = match fusion {
        AttrFusion::Literal => None,
        AttrFusion::Normalized if f_attrs.len() == 1 => None,
        AttrFusion::Normalized => {
            let offset = -(f_attrs.len() as f64).ln();
            let mut b = vec![0.0f64; 2 * n];
            b.extend(std::iter::repeat_n(offset, f_attrs.len() * n));
            Some(Tensor::new(b, f_t.device())?.to_dtype(f_t.dtype())?)
        }
    };
    let (out, probs) =
        attend(&w.to_q.forward(&q_tok)?, &w.to_k.forward(&ctx)?, &w.to_v.forward(&ctx)?, w.heads, bias.as_ref())?;
    Ok((from_tokens(&out, h, wd)?, probs))
}

/// Attention from every spatial position of `f` to the single embedding
/// token `phi` `(B, d_emb)`, including the output projection.
pub fn cross_attention(f: &Tensor, phi: &Tensor, w: &AttnWeights) -> Result<Tensor> {
    let (b, _, h, wd) = f.dims4()?;
    let (pb, d) = phi.dims2()?;
    if pb != b {
        return Err(Error::Shape(format!("embedding batch {pb} vs feature batch {b}")));
    }
    let ctx = phi.reshape((b, 1, d))?;
    let q = w.to_q.forward(&to_tokens(f)?)?;
    let (out, _) = attend(&q, &w.to_k.forward(&ctx)?, &w.to_v.forward(&ctx)?, w.heads, None)?;
    from_tokens(&w.to_out.forward(&out)?, h, wd)
}

/// Self-attention across the frame axis at each spatial position, with a
/// residual connection. `x` is `(B·F, C, H, W)` with frames contiguous per clip.
pub fn temporal_attention(x: &Tensor, frames: usize, layer: &TemporalAttention) -> Result<Tensor> {
    let (bf, c, h, w) = x.dims4()?;
    if frames == 0 || bf % frames != 0 {
        return Err(Error::Shape(format!("batch {bf} is not a multiple of {frames} frames")));
    }
    let b = bf / frames;
    let n = layer.norm.forward(x)?;
    let tok = n.reshape((b, frames, c, h * w))?.permute((0, 3, 1, 2))?.contiguous()?.reshape((b * h * w, frames, c))?;
    let wts = &layer.attn;
    let (out, _) = attend(&wts.to_q.forward(&tok)?, &wts.to_k.forward(&tok)?, &wts.to_v.forward(&tok)?, wts.heads, None)?;
    let out = wts.to_out.forward(&out)?;
    let out = out.reshape((b, h * w, frames, c))?.permute((0, 2, 3, 1))?.contiguous()?.reshape((bf, c, h, w))?;
    Ok((x + out)?)
}

/// Normalized self-attention with residual, used inside the reference nets.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    norm: GroupNorm,
    attn: AttnWeights,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, groups: usize, head_dim: usize) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(store, &format!("{name}.norm"), dim, groups)?,
            attn: AttnWeights::new(store, name, dim, dim, head_dim, false)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let tok = to_tokens(&self.norm.forward(x)?)?;
        let a = &self.attn;
        let (out, _) = attend(&a.to_q.forward(&tok)?, &a.to_k.forward(&tok)?, &a.to_v.forward(&tok)?, a.heads, None)?;
        Ok((x + from_tokens(&a.to_out.forward(&out)?, h, w)?)?)
    }
}

/// Attribute reference maps at one level, grouped for blending: the attended
/// output is `Σ_g weight_g · SA(f_t, port_g, maps_g)`.
#[derive(Clone, Debug)]
pub struct AttrLevel {
    pub groups: Vec<FusionGroup>,
}

/// One blending term. `port` overrides the shared portrait map.
#[derive(Clone, Debug)]
pub struct FusionGroup {
    pub weight: f64,
    pub port: Option<Tensor>,
    pub maps: Vec<Tensor>,
}

/// Fixed 2D sine/cosine code `(1, c, h, w)`, shared by the target and every
/// reference map so attention can match locations. Channels past the last
/// multiple of four stay zero.
const PE_GAIN: f64 = 2.0;

pub fn positional_encoding(c: usize, h: usize, w: usize, dtype: DType) -> Result<Tensor> {
    let d = c / 4;
    let mut data = vec![0.0f64; c * h * w];
    for i in 0..d {
        let omega = std::f64::consts::PI * 16f64.powf(-(i as f64) / d.max(1) as f64);
        for y in 0..h {
            for x in 0..w {
                let at = |ch: usize| ch * h * w + y * w + x;
                data[at(4 * i)] = PE_GAIN * (x as f64 * omega).sin();
                data[at(4 * i + 1)] = PE_GAIN * (x as f64 * omega).cos();
                data[at(4 * i + 2)] = PE_GAIN * (y as f64 * omega).sin();
                data[at(4 * i + 3)] = PE_GAIN * (y as f64 * omega).cos();
            }
        }
    }
    Ok(Tensor::from_vec(data, (1, c, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Spatial-attention fusion site inside the denoising net.
#[derive(Clone, Debug)]
pub struct SpatialFusion {
    norm: GroupNorm,
    attn: AttnWeights,
    fusion: AttrFusion,
}

impl SpatialFusion {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        groups: usize,
        head_dim: usize,
        fusion: AttrFusion,
    ) -> Result<Self> {
        let fresh = store.get(&format!("{name}.to_k.weight")).is_none();
        Ok(Self {
            norm: GroupNorm::new(store, &format!("{name}.norm"), dim, groups)?,
            attn: AttnWeights::new(store, name, dim, dim, head_dim, false)?.tie_keys(store, name, fresh)?,
            fusion,
        })
    }

    pub fn weights(&self) -> &AttnWeights {
        &self.attn
    }

    pub fn forward(&self, h: &Tensor, port: &Tensor, attrs: &AttrLevel) -> Result<Tensor> {
        let (_, c, hh, ww) = h.dims4()?;
        let pe = positional_encoding(c, hh, ww, h.dtype())?;
        let norm = |x: &Tensor| -> Result<Tensor> { Ok(self.norm.forward(x)?.broadcast_add(&pe)?) };
        let nh = norm(h)?;
        let mut shared: Option<Tensor> = None;
        let mut blended: Option<Tensor> = None;
        for g in &attrs.groups {
            let np = match &g.port {
                Some(p) => norm(p)?,
                None => match &shared {
                    Some(np) => np.clone(),
                    None => shared.insert(norm(port)?).clone(),
                },
            };
            let na = g.maps.iter().map(|m| norm(m)).collect::<Result<Vec<_>>>()?;
            let sa = spatial_attention(&nh, &np, &na, &self.attn, self.fusion)?;
            let term = if attrs.groups.len() == 1 { sa } else { sa.affine(g.weight, 0.0)? };
            blended = Some(match blended {
                None => term,
                Some(acc) => (acc + term)?,
            });
        }
        let sa = blended.ok_or_else(|| Error::InvalidArgument("no attribute references".into()))?;
        let out = from_tokens(&self.attn.to_out.forward(&to_tokens(&sa)?)?, hh, ww)?;
        Ok((h + out)?)
    }
}

/// Normalized cross-attention to a semantic embedding, with residual.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    norm: GroupNorm,
    attn: AttnWeights,
}

impl CrossAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        d_emb: usize,
        groups: usize,
        head_dim: usize,
    ) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(store, &format!("{name}.norm"), dim, groups)?,
            attn: AttnWeights::new(store, name, dim, d_emb, head_dim, false)?,
        })
    }

    pub fn weights(&self) -> &AttnWeights {
        &self.attn
    }

    pub fn forward(&self, h: &Tensor, phi: &Tensor) -> Result<Tensor> {
        Ok((h + cross_attention(&self.norm.forward(h)?, phi, &self.attn)?)?)
    }
}

/// Frame-axis attention whose zero-initialized output projection makes it
/// the identity when freshly created.
#[derive(Clone, Debug)]
pub struct TemporalAttention {
    pub norm: GroupNorm,
    pub attn: AttnWeights,
}

impl TemporalAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, groups: usize, head_dim: usize) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(store, &format!("{name}.norm"), dim, groups)?,
            attn: AttnWeights::new(store, name, dim, dim, head_dim, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor, frames: usize) -> Result<Tensor> {
        temporal_attention(x, frames, self)
    }
}

/// Sinusoidal embedding `[sin(t·ωᵢ), cos(t·ωᵢ)]`, `ωᵢ = 10000^(-i/half)`.
pub fn timestep_embedding(t: &Tensor, dim: usize) -> Result<Tensor> {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half).map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp()).collect();
    let freqs = Tensor::new(freqs, t.device())?.to_dtype(t.dtype())?.reshape((1, half))?;
    let args = t.reshape((t.dim(0)?, 1))?.broadcast_mul(&freqs)?;
    Ok(Tensor::cat(&[args.sin()?, args.cos()?], 1)?)
}

/// Global mean over spatial dims: `(B, C, H, W) -> (B, C)`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.mean(2)?)
}

/// 2×2 mean pooling.
pub fn downsample(x: &Tensor) -> Result<Tensor> {
    Ok(x.avg_pool2d(2)?)
}

/// Nearest-neighbor 2× upsampling via broadcasting.
pub fn upsample(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h, 1, w, 1))?.broadcast_as((b, c, h, 2, w, 2))?.contiguous()?.reshape((b, c, 2 * h, 2 * w))?)
}

/// Repeats every batch element `n` times consecutively.
pub fn repeat_interleave(x: &Tensor, n: usize) -> Result<Tensor> {
    if n == 1 {
        return Ok(x.clone());
    }
    let dims = x.dims().to_vec();
    let mut expanded = vec![dims[0], 1];
    expanded.extend_from_slice(&dims[1..]);
    let mut target = expanded.clone();
    target[1] = n;
    let mut out = dims.clone();
    out[0] *= n;
    Ok(x.reshape(expanded)?.broadcast_as(target)?.contiguous()?.reshape(out)?)
}

pub fn scalar_tensor(v: f64, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::new(v, &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};
    use rand::{Rng, SeedableRng};

    fn randn(shape: &[usize], seed: u64, dtype: DType) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    /// Direct nested-loop convolution.
    fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
        let (bn, c, h, wd) = x.dims4().unwrap();
        let (co, _, k, _) = w.dims4().unwrap();
        let xv = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let wv = w.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let bv = b.to_vec1::<f64>().unwrap();
        let r = (k / 2) as i64;
        let mut out = vec![0.0; bn * co * h * wd];
        for n in 0..bn {
            for o in 0..co {
                for y in 0..h {
                    for x_ in 0..wd {
                        let mut s = bv[o];
                        for i in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let (sy, sx) = (y as i64 + ky as i64 - r, x_ as i64 + kx as i64 - r);
                                    if sy < 0 || sx < 0 || sy >= h as i64 || sx >= wd as i64 {
                                        continue;
                                    }
                                    s += wv[((o * c + i) * k + ky) * k + kx]
                                        * xv[((n * c + i) * h + sy as usize) * wd + sx as usize];
                                }
                            }
                        }
                        out[((n * co + o) * h + y) * wd + x_] = s;
                    }
                }
            }
        }
        Tensor::from_vec(out, (bn, co, h, wd), &Device::Cpu).unwrap()
    }

    #[test]
    fn conv_matches_direct_loops() {
        for k in [1, 3] {
            let mut store = ParamStore::new(DType::F64, 1);
            let conv = Conv2d::new(&mut store, "c", 3, 5, k).unwrap();
            store.get("c.bias").unwrap().set(&randn(&[5], 9, DType::F64)).unwrap();
            let x = randn(&[2, 3, 6, 5], 2, DType::F64);
            let y = conv.forward(&x).unwrap();
            let oracle = conv_oracle(&x, store.get("c.weight").unwrap().as_tensor(), store.get("c.bias").unwrap().as_tensor());
            assert!(max_abs_diff(&y, &oracle) < 1e-12, "kernel {k}");
        }
    }

    #[test]
    fn conv_of_zero_with_zero_bias_is_zero() {
        let mut store = ParamStore::new(DType::F32, 1);
        let conv = Conv2d::new(&mut store, "c", 4, 4, 3).unwrap();
        let y = conv.forward(&Tensor::zeros((1, 4, 8, 8), DType::F32, &Device::Cpu).unwrap()).unwrap();
        assert_eq!(y.abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn group_norm_standardizes_groups() {
        let mut store = ParamStore::new(DType::F64, 1);
        let gn = GroupNorm::new(&mut store, "n", 8, 4).unwrap();
        let y = gn.forward(&randn(&[2, 8, 4, 4], 3, DType::F64).affine(3.0, 1.0).unwrap()).unwrap();
        let g = y.reshape((2, 4, 32)).unwrap();
        let mean = g.mean(2).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        let var = g.sqr().unwrap().mean(2).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(mean < 1e-12);
        assert!(var.iter().all(|v| (v - 1.0).abs() < 1e-3));
    }

    fn identity_weights(store: &mut ParamStore, dim: usize) -> AttnWeights {
        let w = AttnWeights::new(store, "a", dim, dim, dim, false).unwrap();
        let eye = Tensor::eye(dim, DType::F64, &Device::Cpu).unwrap();
        for p in ["to_q", "to_k", "to_v", "to_out"] {
            store.get(&format!("a.{p}.weight")).unwrap().set(&eye).unwrap();
        }
        w
    }

    fn scalar_map(v: f64) -> Tensor {
        Tensor::new(&[v], &Device::Cpu).unwrap().reshape((1, 1, 1, 1)).unwrap()
    }

    #[test]
    fn scalar_softmax_oracle() {
        let mut store = ParamStore::new(DType::F64, 0);
        let w = identity_weights(&mut store, 1);
        let (t, p, a) = (1.0, 2.0, 4.0);
        let out = spatial_attention(&scalar_map(t), &scalar_map(p), &[scalar_map(a)], &w, AttrFusion::Normalized).unwrap();
        let out = out.flatten_all().unwrap().to_vec1::<f64>().unwrap()[0];
        let logits = [t * t, t * p, t * a];
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let oracle: f64 = logits.iter().zip([t, p, a]).map(|(l, v)| l.exp() / z * v).sum();
        assert!((out - oracle).abs() < 1e-12, "{out} vs {oracle}");
    }

    fn level(seed: u64, dtype: DType) -> Tensor {
        randn(&[2, 8, 4, 4], seed, dtype)
    }

    #[test]
    fn duplicated_attributes_leave_output_unchanged() {
        let mut store = ParamStore::new(DType::F64, 5);
        let w = AttnWeights::new(&mut store, "a", 8, 8, 4, false).unwrap();
        let (t, p, a) = (level(1, DType::F64), level(2, DType::F64), level(3, DType::F64));
        let one = spatial_attention(&t, &p, &[a.clone()], &w, AttrFusion::Normalized).unwrap();
        for n in [2, 3] {
            let many = spatial_attention(&t, &p, &vec![a.clone(); n], &w, AttrFusion::Normalized).unwrap();
            assert!(max_abs_diff(&one, &many) < 1e-12);
        }
        // Without the count offset the duplicated keys gain weight.
        let literal = spatial_attention(&t, &p, &[a.clone(), a], &w, AttrFusion::Literal).unwrap();
        assert!(max_abs_diff(&one, &literal) > 1e-4);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut store = ParamStore::new(DType::F32, 5);
        let w = AttnWeights::new(&mut store, "a", 8, 8, 4, false).unwrap();
        let ls: Vec<Tensor> = (0..5).map(|s| level(s, DType::F32)).collect();
        let (_, probs) = spatial_attention_with_probs(&ls[0], &ls[1], &ls[2..], &w, AttrFusion::Normalized).unwrap();
        let sums = probs.sum(D::Minus1).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-6));
    }

    #[test]
    fn spatial_attention_rejects_bad_inputs() {
        let mut store = ParamStore::new(DType::F32, 5);
        let w = AttnWeights::new(&mut store, "a", 8, 8, 4, false).unwrap();
        let t = level(0, DType::F32);
        assert!(spatial_attention(&t, &t, &[], &w, AttrFusion::Normalized).is_err());
        let small = randn(&[2, 8, 2, 2], 0, DType::F32);
        assert!(spatial_attention(&t, &small, &[t.clone()], &w, AttrFusion::Normalized).is_err());
    }

    #[test]
    fn cross_attention_ignores_query_values() {
        let mut store = ParamStore::new(DType::F64, 5);
        let w = AttnWeights::new(&mut store, "c", 8, 6, 4, false).unwrap();
        let phi = randn(&[2, 6], 4, DType::F64);
        let a = cross_attention(&level(1, DType::F64), &phi, &w).unwrap();
        let b = cross_attention(&level(2, DType::F64), &phi, &w).unwrap();
        assert!(max_abs_diff(&a, &b) < 1e-12);
        // Closed form: W_O (W_V φ + b_V) + b_O at every position.
        let g = |n: &str| store.get(&format!("c.{n}")).unwrap().as_tensor().clone();
        let v = phi.matmul(&g("to_v.weight").t().unwrap()).unwrap().broadcast_add(&g("to_v.bias")).unwrap();
        let o = v.matmul(&g("to_out.weight").t().unwrap()).unwrap().broadcast_add(&g("to_out.bias")).unwrap();
        let expected = o.reshape((2, 8, 1, 1)).unwrap().broadcast_as((2, 8, 4, 4)).unwrap();
        assert!(max_abs_diff(&a, &expected) < 1e-12);
    }

    #[test]
    fn fresh_temporal_attention_is_identity() {
        let mut store = ParamStore::new(DType::F32, 5);
        let layer = TemporalAttention::new(&mut store, "t.temporal", 8, 4, 4).unwrap();
        for frames in [1, 3] {
            let x = randn(&[2 * frames, 8, 4, 4], 7, DType::F32);
            let y = layer.forward(&x, frames).unwrap();
            assert_eq!(y.flatten_all().unwrap().to_vec1::<f32>().unwrap(), x.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        }
    }

    #[test]
    fn temporal_attention_is_permutation_equivariant() {
        let mut store = ParamStore::new(DType::F64, 5);
        let layer = TemporalAttention::new(&mut store, "t.temporal", 8, 4, 4).unwrap();
        store.get("t.temporal.to_out.weight").unwrap().set(&randn(&[8, 8], 3, DType::F64)).unwrap();
        let x = randn(&[4, 8, 3, 3], 8, DType::F64);
        let perm = [2u32, 0, 3, 1];
        let idx = Tensor::new(&perm, &Device::Cpu).unwrap();
        let y = layer.forward(&x, 4).unwrap();
        let yp = layer.forward(&x.index_select(&idx, 0).unwrap(), 4).unwrap();
        assert!(max_abs_diff(&y.index_select(&idx, 0).unwrap(), &yp) < 1e-12);
    }

    #[test]
    fn upsample_and_repeat_shapes() {
        let x = randn(&[2, 3, 2, 2], 1, DType::F32);
        let u = upsample(&x).unwrap();
        assert_eq!(u.dims(), &[2, 3, 4, 4]);
        assert_eq!(downsample(&u).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap(), x.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        let r = repeat_interleave(&x, 3).unwrap();
        assert_eq!(r.dims(), &[6, 3, 2, 2]);
        assert_eq!(r.get(4).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap(), x.get(1).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap());
    }

    #[test]
    fn linear_gradients_flow_to_vars() {
        let mut store = ParamStore::new(DType::F32, 0);
        let lin = Linear::new(&mut store, "l", 3, 2).unwrap();
        let x = Var::from_tensor(&randn(&[4, 3], 0, DType::F32)).unwrap();
        let grads = lin.forward(x.as_tensor()).unwrap().sum_all().unwrap().backward().unwrap();
        assert!(grads.get(store.get("l.weight").unwrap().as_tensor()).is_some());
        assert!(grads.get(x.as_tensor()).is_some());
    }
}
