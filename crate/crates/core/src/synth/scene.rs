use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::maskio::{GrayImage, Mask};
use crate::model::check_input_size;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub size: usize,
    /// Inclusive range of blob counts.
    pub blobs: [usize; 2],
    pub ribbons: [usize; 2],
    pub blob_radius: [f64; 2],
    /// Half-width range of ribbons.
    pub ribbon_width: [f64; 2],
    /// Accepted foreground fraction. Shape sets are redrawn (up to a fixed
    /// number of attempts) until the fraction falls inside.
    pub area_budget: [f64; 2],
    /// Standard deviation of the unit-mean gamma multiplier; 0 disables it.
    pub speckle: f64,
    /// Targets have intensity `(1 - contrast)` times the background.
    pub contrast: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            size: 64,
            blobs: [1, 3],
            ribbons: [0, 2],
            blob_radius: [4.0, 11.0],
            ribbon_width: [1.5, 3.5],
            area_budget: [0.04, 0.35],
            speckle: 0.35,
            contrast: 0.55,
            seed: 0,
        }
    }
}

const AREA_ATTEMPTS: usize = 32;

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        check_input_size(self.size, self.size)?;
        let range = |name: &str, r: [f64; 2]| {
            if r[0] >= 0.0 && r[0] <= r[1] && r[1].is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("scene.{name} must be an ordered non-negative range, got {r:?}")))
            }
        };
        range("blob_radius", self.blob_radius)?;
        range("ribbon_width", self.ribbon_width)?;
        range("area_budget", self.area_budget)?;
        if self.blobs[0] > self.blobs[1] || self.ribbons[0] > self.ribbons[1] {
            return Err(Error::Config("scene count ranges must be ordered".into()));
        }
        if !(self.speckle >= 0.0 && self.speckle.is_finite()) {
            return Err(Error::Config(format!("scene.speckle must be non-negative, got {}", self.speckle)));
        }
        if !(self.contrast > 0.0 && self.contrast <= 1.0) {
            return Err(Error::Config(format!("scene.contrast must lie in (0, 1], got {}", self.contrast)));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

/// Ellipse with a low-order radial ripple.
fn draw_blob(mask: &mut Mask, rng: &mut ChaCha8Rng, radius: [f64; 2]) {
    let n = mask.height() as f64;
    let (cy, cx) = (rng.random_range(0.0..n), rng.random_range(0.0..n));
    let (a, b) = (uniform(rng, radius), uniform(rng, radius));
    let theta = rng.random_range(0.0..PI);
    let k = rng.random_range(2..=4) as f64;
    let amp = rng.random_range(0.0..0.2);
    let phase = rng.random_range(0.0..2.0 * PI);
    let (s, c) = theta.sin_cos();
    for r in 0..mask.height() {
        for col in 0..mask.width() {
            let (dy, dx) = (r as f64 + 0.5 - cy, col as f64 + 0.5 - cx);
            let u = (c * dx + s * dy) / a.max(0.5);
            let v = (-s * dx + c * dy) / b.max(0.5);
            let phi = v.atan2(u);
            if (u * u + v * v).sqrt() < 1.0 + amp * (k * phi + phase).sin() {
                mask.set(r, col, true);
            }
        }
    }
}

/// Thick sinusoidal curve across the scene.
fn draw_ribbon(mask: &mut Mask, rng: &mut ChaCha8Rng, width: [f64; 2]) {
    let n = mask.height() as f64;
    let (y0, x0) = (rng.random_range(0.0..n), rng.random_range(0.0..n));
    let theta = rng.random_range(0.0..2.0 * PI);
    let len = rng.random_range(0.5 * n..1.2 * n);
    let amp = rng.random_range(0.0..0.15 * n);
    let freq = rng.random_range(0.5..1.5);
    let half = uniform(rng, width);
    let (s, c) = theta.sin_cos();
    let pts: Vec<(f64, f64)> = (0..=96)
        .map(|i| {
            let t = i as f64 / 96.0;
            let along = t * len;
            let across = amp * (2.0 * PI * freq * t).sin();
            (y0 + s * along + c * across, x0 + c * along - s * across)
        })
        .collect();
    for r in 0..mask.height() {
        for col in 0..mask.width() {
            let (py, px) = (r as f64 + 0.5, col as f64 + 0.5);
            let near = pts.windows(2).any(|w| seg_dist(py, px, w[0], w[1]) < half);
            if near {
                mask.set(r, col, true);
            }
        }
    }
}

fn seg_dist(py: f64, px: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dy, dx) = (b.0 - a.0, b.1 - a.1);
    let l2 = dy * dy + dx * dx;
    let t = if l2 == 0.0 {
        0.0
    } else {
        (((py - a.0) * dy + (px - a.1) * dx) / l2).clamp(0.0, 1.0)
    };
    let (qy, qx) = (a.0 + t * dy, a.1 + t * dx);
    ((py - qy).powi(2) + (px - qx).powi(2)).sqrt()
}

fn draw_shapes(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Mask> {
    let mut mask = Mask::zeros(spec.size, spec.size)?;
    for _ in 0..rng.random_range(spec.blobs[0]..=spec.blobs[1]) {
        draw_blob(&mut mask, rng, spec.blob_radius);
    }
    for _ in 0..rng.random_range(spec.ribbons[0]..=spec.ribbons[1]) {
        draw_ribbon(&mut mask, rng, spec.ribbon_width);
    }
    Ok(mask)
}

/// Dark targets on a brighter constant background, times gamma speckle. The
/// mask is the exact target support.
pub fn gen_scene(spec: &SceneSpec) -> Result<(GrayImage, Mask)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut mask = draw_shapes(spec, &mut rng)?;
    for _ in 1..AREA_ATTEMPTS {
        let f = mask.foreground_fraction();
        if f >= spec.area_budget[0] && f <= spec.area_budget[1] {
            break;
        }
        mask = draw_shapes(spec, &mut rng)?;
    }
    let background = rng.random_range(0.55..0.75);
    let target = background * (1.0 - spec.contrast);
    let speckle = if spec.speckle > 0.0 {
        let shape = 1.0 / (spec.speckle * spec.speckle);
        Some(Gamma::new(shape, 1.0 / shape).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };
    let values = mask
        .bits()
        .iter()
        .map(|&b| {
            let base = if b == 1 { target } else { background };
            let m = speckle.as_ref().map_or(1.0, |g| g.sample(&mut rng));
            (base * m).clamp(0.0, 1.0) as f32
        })
        .collect();
    let img = GrayImage::new(spec.size, spec.size, 1, values)?;
    Ok((img, mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_speckle_is_piecewise_constant() {
        for seed in 0..10 {
            let spec = SceneSpec {
                speckle: 0.0,
                seed,
                ..SceneSpec::default()
            };
            let (img, mask) = gen_scene(&spec).unwrap();
            let mut fg = None;
            let mut bg = None;
            for (&v, &b) in img.values().iter().zip(mask.bits()) {
                let slot = if b == 1 { &mut fg } else { &mut bg };
                assert_eq!(*slot.get_or_insert(v), v);
            }
            if let (Some(f), Some(b)) = (fg, bg) {
                assert!(f < b);
            }
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let spec = SceneSpec {
            seed: 42,
            ..SceneSpec::default()
        };
        assert_eq!(gen_scene(&spec).unwrap(), gen_scene(&spec).unwrap());
        let other = SceneSpec { seed: 43, ..spec.clone() };
        assert_ne!(gen_scene(&spec).unwrap(), gen_scene(&other).unwrap());
    }

    #[test]
    fn foreground_fraction_respects_budget() {
        let mut inside = 0;
        for seed in 0..50 {
            let spec = SceneSpec {
                seed,
                ..SceneSpec::default()
            };
            let (_, mask) = gen_scene(&spec).unwrap();
            let f = mask.foreground_fraction();
            if (0.04..=0.35).contains(&f) {
                inside += 1;
            }
            assert!(f <= 0.6, "seed {seed}: {f}");
        }
        assert!(inside >= 48, "{inside}/50 inside the budget");
    }

    #[test]
    fn speckle_is_unit_mean() {
        let spec = SceneSpec {
            size: 256,
            blobs: [0, 0],
            ribbons: [0, 0],
            area_budget: [0.0, 1.0],
            seed: 3,
            ..SceneSpec::default()
        };
        let (img, mask) = gen_scene(&spec).unwrap();
        assert_eq!(mask.count_ones(), 0);
        let flat = gen_scene(&SceneSpec { speckle: 0.0, ..spec }).unwrap().0;
        let mean: f64 = img.values().iter().map(|&v| v as f64).sum::<f64>() / img.values().len() as f64;
        let bg = flat.values()[0] as f64;
        assert!((mean / bg - 1.0).abs() < 0.02, "{mean} vs {bg}");
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(gen_scene(&SceneSpec { size: 40, ..SceneSpec::default() }).is_err());
        assert!(gen_scene(&SceneSpec { contrast: 0.0, ..SceneSpec::default() }).is_err());
        assert!(gen_scene(&SceneSpec { blobs: [3, 1], ..SceneSpec::default() }).is_err());
    }
}
