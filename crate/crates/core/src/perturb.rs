//! Test-time perturbations and the inverse alignment of predictions.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::maskio::{GrayImage, Mask};
use crate::{Error, Result};

pub const DEFAULT_NOISE_SIGMA: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PerturbKind {
    GaussNoise { sigma: f64 },
    Hflip,
    /// Counter-clockwise rotation by `k` quarter turns.
    Rot90 { k: u8 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbSpec {
    #[serde(flatten)]
    pub kind: PerturbKind,
    pub seed: u64,
}

impl PerturbSpec {
    pub fn new(kind: PerturbKind, seed: u64) -> Result<Self> {
        let s = Self { kind, seed };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            PerturbKind::GaussNoise { sigma } if !(sigma > 0.0 && sigma.is_finite()) => {
                Err(Error::Config(format!("noise sigma must be positive, got {sigma}")))
            }
            PerturbKind::Rot90 { k } if !(1..=3).contains(&k) => {
                Err(Error::Config(format!("rotation k must be 1, 2 or 3, got {k}")))
            }
            _ => Ok(()),
        }
    }

    /// Output `(h, w)` for an input of `(h, w)`.
    pub fn output_shape(&self, h: usize, w: usize) -> (usize, usize) {
        match self.kind {
            PerturbKind::Rot90 { k } if k % 2 == 1 => (w, h),
            _ => (h, w),
        }
    }
}

/// Rotate a row-major `h×w` plane counter-clockwise by `k` quarter turns.
fn rot90_plane<T: Copy>(src: &[T], h: usize, w: usize, k: u8) -> (Vec<T>, usize, usize) {
    let mut cur = src.to_vec();
    let (mut ch, mut cw) = (h, w);
    for _ in 0..k % 4 {
        // out(i, j) = in(j, W-1-i); the output is W×H.
        let mut out = Vec::with_capacity(cur.len());
        for i in 0..cw {
            for j in 0..ch {
                out.push(cur[j * cw + (cw - 1 - i)]);
            }
        }
        cur = out;
        std::mem::swap(&mut ch, &mut cw);
    }
    (cur, ch, cw)
}

fn hflip_plane<T: Copy>(src: &[T], w: usize) -> Vec<T> {
    src.chunks_exact(w).flat_map(|row| row.iter().rev().copied()).collect()
}

fn spatial<T: Copy>(src: &[T], h: usize, w: usize, kind: PerturbKind) -> (Vec<T>, usize, usize) {
    match kind {
        PerturbKind::GaussNoise { .. } => (src.to_vec(), h, w),
        PerturbKind::Hflip => (hflip_plane(src, w), h, w),
        PerturbKind::Rot90 { k } => rot90_plane(src, h, w, k),
    }
}

fn inverse(kind: PerturbKind) -> PerturbKind {
    match kind {
        PerturbKind::Rot90 { k } => PerturbKind::Rot90 { k: 4 - k },
        other => other,
    }
}

pub fn apply_image(img: &GrayImage, spec: &PerturbSpec) -> Result<GrayImage> {
    spec.validate()?;
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let plane = h * w;
    let mut values = Vec::with_capacity(plane * c);
    let (mut oh, mut ow) = (h, w);
    for ch in 0..c {
        let (v, a, b) = spatial(&img.values()[ch * plane..(ch + 1) * plane], h, w, spec.kind);
        values.extend(v);
        (oh, ow) = (a, b);
    }
    if let PerturbKind::GaussNoise { sigma } = spec.kind {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
        for v in &mut values {
            *v = (*v as f64 + normal.sample(&mut rng)).clamp(0.0, 1.0) as f32;
        }
    }
    GrayImage::new(oh, ow, c, values)
}

/// The spatial part of `spec` applied to a mask; noise leaves masks unchanged.
pub fn apply_mask(mask: &Mask, spec: &PerturbSpec) -> Result<Mask> {
    spec.validate()?;
    let (bits, h, w) = spatial(mask.bits(), mask.height(), mask.width(), spec.kind);
    Mask::new(h, w, bits)
}

/// Map a prediction made on the perturbed input back to the original frame.
/// `original` is the `(h, w)` of the unperturbed image.
pub fn align_prediction(pred: &Mask, spec: &PerturbSpec, original: (usize, usize)) -> Result<Mask> {
    spec.validate()?;
    let expected = spec.output_shape(original.0, original.1);
    if pred.shape() != expected {
        return Err(Error::Shape(format!(
            "prediction {:?} does not match perturbed shape {:?}",
            pred.shape(),
            expected
        )));
    }
    let (bits, h, w) = spatial(pred.bits(), pred.height(), pred.width(), inverse(spec.kind));
    Mask::new(h, w, bits)
}

/// One spec of each kind, in the order noise, flip, rotation.
pub fn make_ensemble_specs(seed: u64) -> [PerturbSpec; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(1..=3u8);
    let noise_seed = rng.next_u64();
    let flip_seed = rng.next_u64();
    let rot_seed = rng.next_u64();
    [
        PerturbSpec {
            kind: PerturbKind::GaussNoise {
                sigma: DEFAULT_NOISE_SIGMA,
            },
            seed: noise_seed,
        },
        PerturbSpec {
            kind: PerturbKind::Hflip,
            seed: flip_seed,
        },
        PerturbSpec {
            kind: PerturbKind::Rot90 { k },
            seed: rot_seed,
        },
    ]
}
