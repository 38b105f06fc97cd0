//! Binary masks, grayscale images, dataset manifests and segmentation metrics.

mod files;
mod manifest;
mod metrics;

pub use files::{load_image, load_mask, save_image, save_mask};
pub use manifest::{read_manifest, write_manifest, DatasetManifest, ManifestRecord, Provenance, Split};
pub use metrics::{
    accuracy, confusion, dice, evaluate_pairs, iou, miou, miou_from_counts, ConfusionCounts, ImageMetrics, MetricReport,
};

use crate::ndarr::Tensor;
use crate::{Error, Result};

/// `H×W` grid of {0, 1}; 1 is foreground.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("mask dimensions {height}x{width} must be positive")));
        }
        if bits.len() != height * width {
            return Err(Error::Shape(format!(
                "mask {height}x{width} needs {} cells, got {}",
                height * width,
                bits.len()
            )));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::Data("mask cells must be 0 or 1".into()));
        }
        Ok(Self { height, width, bits })
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![0; height * width])
    }

    pub fn ones(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![1; height * width])
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Result<Self> {
        let mut bits = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                bits.push(u8::from(f(r, c)));
            }
        }
        Self::new(height, width, bits)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|&b| b == 0)
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col] == 1
    }

    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.bits[row * self.width + col] = u8::from(on);
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.count_ones() as f64 / self.len() as f64
    }

    pub fn complement(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().map(|&b| 1 - b).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        let mut bits = vec![0; self.bits.len()];
        for r in 0..self.height {
            for c in 0..self.width {
                bits[c * self.height + r] = self.bits[r * self.width + c];
            }
        }
        Self {
            height: self.width,
            width: self.height,
            bits,
        }
    }

    /// `[1, 1, H, W]` tensor of 0.0 / 1.0.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(
            &[1, 1, self.height, self.width],
            self.bits.iter().map(|&b| b as f32).collect(),
        )
        .expect("mask dimensions are positive")
    }
}

/// Image with values in `[0, 1]`, stored channel-planar (`C×H×W`).
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f32>,
}

impl GrayImage {
    /// Values are clamped into `[0, 1]`; non-finite values are rejected.
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("image dimensions {height}x{width} must be positive")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Shape(format!("images have 1 or 3 channels, got {channels}")));
        }
        if values.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "image {channels}x{height}x{width} needs {} values, got {}",
                height * width * channels,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("image values must be finite".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            values: values.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f32 {
        self.values[(channel * self.height + row) * self.width + col]
    }

    /// `[1, C, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(&[1, self.channels, self.height, self.width], self.values.clone())
            .expect("image dimensions are positive")
    }
}

/// Stack images into one `[N, C, H, W]` batch.
pub fn stack_images(images: &[&GrayImage]) -> Result<Tensor<f32>> {
    let first = images.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let mut data = Vec::with_capacity(images.len() * first.values.len());
    for img in images {
        if (img.height, img.width, img.channels) != (first.height, first.width, first.channels) {
            return Err(Error::Shape("images in a batch must share a shape".into()));
        }
        data.extend_from_slice(&img.values);
    }
    Ok(Tensor::new(&[images.len(), first.channels, first.height, first.width], data)?)
}

/// Stack masks into one `[N, 1, H, W]` batch of 0.0 / 1.0.
pub fn stack_masks(masks: &[&Mask]) -> Result<Tensor<f32>> {
    let first = masks.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let mut data = Vec::with_capacity(masks.len() * first.len());
    for m in masks {
        if m.shape() != first.shape() {
            return Err(Error::Shape("masks in a batch must share a shape".into()));
        }
        data.extend(m.bits.iter().map(|&b| b as f32));
    }
    Ok(Tensor::new(&[masks.len(), 1, first.height, first.width], data)?)
}
