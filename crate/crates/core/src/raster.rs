//! Fixed-size RGB frames and binary masks, plus PNG IO.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Side length of every frame in the synthetic world. All model shapes derive
/// from this constant.
pub const RESOLUTION: usize = 64;

pub type Rgb = [f32; 3];

/// H×W×3 image with values in [0,1], row-major HWC layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawFrame")]
pub struct Frame {
    size: usize,
    data: Vec<f32>,
}

/// Keypoint renders share the frame layout: colored dots on a black background.
pub type KeypointImage = Frame;

impl Frame {
    pub fn filled(size: usize, color: Rgb) -> Self {
        let mut data = Vec::with_capacity(size * size * 3);
        for _ in 0..size * size {
            data.extend_from_slice(&color);
        }
        Self { size, data }
    }

    pub fn black(size: usize) -> Self {
        Self { size, data: vec![0.0; size * size * 3] }
    }

    pub fn from_data(size: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != size * size * 3 {
            return Err(Error::Shape(format!(
                "frame of side {size} needs {} values, got {}",
                size * size * 3,
                data.len()
            )));
        }
        Ok(Self { size, data })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Rgb {
        let i = (y * self.size + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: Rgb) {
        let i = (y * self.size + x) * 3;
        self.data[i..i + 3].copy_from_slice(&c);
    }

    pub fn pixels(&self) -> impl Iterator<Item = Rgb> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    pub fn clamped(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    pub fn ensure_same_shape(&self, other: &Frame) -> Result<()> {
        if self.size != other.size {
            return Err(Error::Shape(format!("frame sizes {} and {} differ", self.size, other.size)));
        }
        Ok(())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        let img = image::RgbImage::from_raw(self.size as u32, self.size as u32, bytes)
            .ok_or_else(|| Error::Shape("frame buffer does not match its size".into()))?;
        img.save(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
            .to_rgb8();
        if img.width() != img.height() {
            return Err(Error::Shape(format!("{} is not square", path.display())));
        }
        let size = img.width() as usize;
        let data = img.into_raw().into_iter().map(from_u8).collect();
        Ok(Self { size, data })
    }
}

#[derive(Deserialize)]
struct RawFrame {
    size: usize,
    data: Vec<f32>,
}

impl TryFrom<RawFrame> for Frame {
    type Error = Error;

    fn try_from(r: RawFrame) -> Result<Self> {
        Frame::from_data(r.size, r.data)
    }
}

#[derive(Deserialize)]
struct RawMask {
    size: usize,
    data: Vec<u8>,
}

impl TryFrom<RawMask> for Mask {
    type Error = Error;

    fn try_from(r: RawMask) -> Result<Self> {
        if r.data.len() != r.size * r.size || r.data.iter().any(|&v| v > 1) {
            return Err(Error::Shape(format!("invalid mask of side {}", r.size)));
        }
        Ok(Mask { size: r.size, data: r.data })
    }
}

/// H×W binary mask with values in {0,1}.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawMask")]
pub struct Mask {
    size: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn zeros(size: usize) -> Self {
        Self { size, data: vec![0; size * size] }
    }

    pub fn ones(size: usize) -> Self {
        Self { size, data: vec![1; size * size] }
    }

    pub fn from_fn(size: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                data.push(f(x, y) as u8);
            }
        }
        Self { size, data }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.size + x] != 0
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.data[y * self.size + x] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    fn ensure_same_shape(&self, other: &Mask) -> Result<()> {
        if self.size != other.size {
            return Err(Error::Shape(format!("mask sizes {} and {} differ", self.size, other.size)));
        }
        Ok(())
    }

    pub fn union(&self, other: &Mask) -> Result<Mask> {
        self.ensure_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a | b).collect();
        Ok(Mask { size: self.size, data })
    }

    pub fn intersection(&self, other: &Mask) -> Result<Mask> {
        self.ensure_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a & b).collect();
        Ok(Mask { size: self.size, data })
    }

    pub fn difference(&self, other: &Mask) -> Result<Mask> {
        self.ensure_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a & (1 - b)).collect();
        Ok(Mask { size: self.size, data })
    }

    pub fn is_superset_of(&self, other: &Mask) -> bool {
        self.size == other.size && self.data.iter().zip(&other.data).all(|(a, b)| a >= b)
    }

    /// Mean pixel position (x, y) of the on-pixels, using pixel centers.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for y in 0..self.size {
            for x in 0..self.size {
                if self.get(x, y) {
                    sx += x as f64 + 0.5;
                    sy += y as f64 + 0.5;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
        let img = image::GrayImage::from_raw(self.size as u32, self.size as u32, bytes)
            .ok_or_else(|| Error::Shape("mask buffer does not match its size".into()))?;
        img.save(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
            .to_luma8();
        let size = img.width() as usize;
        let data = img.into_raw().into_iter().map(|v| (v >= 128) as u8).collect();
        Ok(Self { size, data })
    }
}

#[inline]
pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[inline]
pub fn from_u8(v: u8) -> f32 {
    v as f32 / 255.0
}

/// L∞ distance between two colors.
pub fn color_linf(a: Rgb, b: Rgb) -> f32 {
    (0..3).map(|i| (a[i] - b[i]).abs()).fold(0.0, f32::max)
}

pub fn color_l2(a: Rgb, b: Rgb) -> f32 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f32>().sqrt()
}
