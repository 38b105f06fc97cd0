use image::{GrayImage as LumaImage, Luma};
use imageproc::contours::{find_contours, BorderType};
use imageproc::distance_transform::Norm;
use imageproc::drawing::draw_polygon_mut;
use imageproc::geometry::approximate_polygon_dp;
use imageproc::morphology::{dilate, erode};
use imageproc::point::Point;
use imageproc::region_labelling::{connected_components, Connectivity};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::maskio::Mask;
use crate::{Error, Result};

/// Annotation defects applied to a clean mask, in this order: component
/// omission, polygonal outlines, dilation or erosion, spurious blobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionSpec {
    /// Douglas–Peucker tolerance in pixels; 0 keeps outlines.
    pub polygon_tolerance: f64,
    /// Inclusive range of the morphological radius; dilation or erosion is
    /// picked with equal odds.
    pub morph_radius: [u8; 2],
    /// Chance of each of up to two spurious blobs.
    pub false_positive_rate: f64,
    /// Chance that a connected component is dropped.
    pub omission_rate: f64,
    pub seed: u64,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        Self {
            polygon_tolerance: 2.5,
            morph_radius: [1, 2],
            false_positive_rate: 0.3,
            omission_rate: 0.1,
            seed: 0,
        }
    }
}

impl CorruptionSpec {
    pub fn identity() -> Self {
        Self {
            polygon_tolerance: 0.0,
            morph_radius: [0, 0],
            false_positive_rate: 0.0,
            omission_rate: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("false_positive_rate", self.false_positive_rate),
            ("omission_rate", self.omission_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("corruption.{name} must lie in [0, 1], got {r}")));
            }
        }
        if !(self.polygon_tolerance >= 0.0 && self.polygon_tolerance.is_finite()) {
            return Err(Error::Config(format!(
                "corruption.polygon_tolerance must be non-negative, got {}",
                self.polygon_tolerance
            )));
        }
        if self.morph_radius[0] > self.morph_radius[1] {
            return Err(Error::Config("corruption.morph_radius must be ordered".into()));
        }
        Ok(())
    }
}

fn to_luma(m: &Mask) -> LumaImage {
    LumaImage::from_fn(m.width() as u32, m.height() as u32, |x, y| {
        Luma([if m.get(y as usize, x as usize) { 255 } else { 0 }])
    })
}

fn from_luma(img: &LumaImage) -> Result<Mask> {
    Mask::from_fn(img.height() as usize, img.width() as usize, |r, c| {
        img.get_pixel(c as u32, r as usize as u32)[0] >= 128
    })
}

fn omit_components(img: &mut LumaImage, rate: f64, rng: &mut ChaCha8Rng) {
    let labels = connected_components(img, Connectivity::Eight, Luma([0u8]));
    let n = labels.pixels().map(|p| p[0]).max().unwrap_or(0);
    let drop: Vec<bool> = (0..=n).map(|l| l > 0 && rng.random_bool(rate)).collect();
    for (p, l) in img.pixels_mut().zip(labels.pixels()) {
        if drop[l[0] as usize] {
            p[0] = 0;
        }
    }
}

fn polygonize(img: &LumaImage, tol: f64) -> LumaImage {
    let mut out = LumaImage::new(img.width(), img.height());
    let contours = find_contours::<i32>(img);
    let mut holes = Vec::new();
    for c in &contours {
        let mut poly = approximate_polygon_dp(&c.points, tol, true);
        if poly.len() > 1 && poly.first() == poly.last() {
            poly.pop();
        }
        let color = if c.border_type == BorderType::Outer { 255 } else { 0 };
        if color == 0 {
            holes.push(poly);
            continue;
        }
        fill(&mut out, &poly, color);
    }
    for poly in holes {
        fill(&mut out, &poly, 0);
    }
    out
}

fn fill(img: &mut LumaImage, poly: &[Point<i32>], color: u8) {
    if poly.len() >= 3 {
        draw_polygon_mut(img, poly, Luma([color]));
    } else {
        for p in poly {
            img.put_pixel(p.x as u32, p.y as u32, Luma([color]));
        }
    }
}

fn add_false_positives(img: &mut LumaImage, rate: f64, rng: &mut ChaCha8Rng) {
    let (w, h) = (img.width() as f64, img.height() as f64);
    for _ in 0..2 {
        if !rng.random_bool(rate) {
            continue;
        }
        let (cy, cx) = (rng.random_range(0.0..h), rng.random_range(0.0..w));
        let (a, b) = (rng.random_range(2.0..6.0), rng.random_range(2.0..6.0));
        for y in 0..img.height() {
            for x in 0..img.width() {
                let (dy, dx) = ((y as f64 + 0.5 - cy) / a, (x as f64 + 0.5 - cx) / b);
                if dy * dy + dx * dx < 1.0 {
                    img.put_pixel(x, y, Luma([255]));
                }
            }
        }
    }
}

/// Seeded coarse version of `gt`.
pub fn corrupt_label(gt: &Mask, spec: &CorruptionSpec) -> Result<Mask> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut img = to_luma(gt);
    if spec.omission_rate > 0.0 {
        omit_components(&mut img, spec.omission_rate, &mut rng);
    }
    if spec.polygon_tolerance > 0.0 {
        img = polygonize(&img, spec.polygon_tolerance);
    }
    let radius = rng.random_range(spec.morph_radius[0]..=spec.morph_radius[1]);
    if radius > 0 {
        img = if rng.random_bool(0.5) {
            dilate(&img, Norm::LInf, radius)
        } else {
            erode(&img, Norm::LInf, radius)
        };
    }
    if spec.false_positive_rate > 0.0 {
        add_false_positives(&mut img, spec.false_positive_rate, &mut rng);
    }
    from_luma(&img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maskio::miou;
    use crate::synth::{gen_scene, SceneSpec};

    fn scene(seed: u64) -> Mask {
        gen_scene(&SceneSpec {
            seed,
            ..SceneSpec::default()
        })
        .unwrap()
        .1
    }

    #[test]
    fn identity_spec_is_identity() {
        for seed in 0..10 {
            let gt = scene(seed);
            let spec = CorruptionSpec {
                seed,
                ..CorruptionSpec::identity()
            };
            assert_eq!(corrupt_label(&gt, &spec).unwrap(), gt);
        }
    }

    #[test]
    fn full_omission_empties_the_mask() {
        let spec = CorruptionSpec {
            omission_rate: 1.0,
            ..CorruptionSpec::identity()
        };
        for seed in 0..5 {
            assert_eq!(corrupt_label(&scene(seed), &spec).unwrap().count_ones(), 0);
        }
    }

    #[test]
    fn default_spec_degrades_every_scene() {
        for seed in 0..10 {
            let gt = scene(seed);
            let spec = CorruptionSpec {
                seed,
                ..CorruptionSpec::default()
            };
            let coarse = corrupt_label(&gt, &spec).unwrap();
            assert!(miou(&coarse, &gt).unwrap() < 1.0, "seed {seed}");
            assert_eq!(coarse, corrupt_label(&gt, &spec).unwrap());
        }
    }

    #[test]
    fn polygons_stay_close_to_the_outline() {
        let gt = Mask::from_fn(32, 32, |r, c| {
            let (dy, dx) = (r as f64 - 15.5, c as f64 - 15.5);
            dy * dy + dx * dx < 100.0
        })
        .unwrap();
        let spec = CorruptionSpec {
            polygon_tolerance: 1.5,
            ..CorruptionSpec::identity()
        };
        let poly = corrupt_label(&gt, &spec).unwrap();
        let m = miou(&poly, &gt).unwrap();
        assert!(m > 0.85 && m < 1.0, "{m}");
    }

    #[test]
    fn dilation_and_erosion_change_area() {
        let gt = Mask::from_fn(32, 32, |r, c| (8..24).contains(&r) && (8..24).contains(&c)).unwrap();
        let mut grew = false;
        let mut shrank = false;
        for seed in 0..20 {
            let spec = CorruptionSpec {
                morph_radius: [1, 1],
                seed,
                ..CorruptionSpec::identity()
            };
            let n = corrupt_label(&gt, &spec).unwrap().count_ones();
            grew |= n == 18 * 18;
            shrank |= n == 14 * 14;
            assert!(n == 18 * 18 || n == 14 * 14, "{n}");
        }
        assert!(grew && shrank);
    }

    #[test]
    fn invalid_rates_are_rejected() {
        let spec = CorruptionSpec {
            omission_rate: 1.5,
            ..CorruptionSpec::default()
        };
        assert!(corrupt_label(&Mask::zeros(4, 4).unwrap(), &spec).is_err());
    }
}
