use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::corrupt::{corrupt_label, CorruptionSpec};
use super::scene::{gen_scene, SceneSpec};
use crate::maskio::{save_image, save_mask, write_manifest, DatasetManifest, ManifestRecord, Provenance, Split};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub n: usize,
    /// The trailing `round(n · test_fraction)` scenes form the test split.
    pub test_fraction: f64,
    pub seed: u64,
    pub scene: SceneSpec,
    pub corruption: CorruptionSpec,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n: 50,
            test_fraction: 0.2,
            seed: 42,
            scene: SceneSpec::default(),
            corruption: CorruptionSpec::default(),
        }
    }
}

/// Manifests of a generated dataset. Paths are relative to its directory.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub dir: PathBuf,
    /// Coarse labels, provenance `coarse`.
    pub coarse: DatasetManifest,
    /// Exact labels, provenance `manual`; the hidden oracle.
    pub gt: DatasetManifest,
}

pub const COARSE_MANIFEST: &str = "manifest.jsonl";
pub const GT_MANIFEST: &str = "gt.jsonl";

fn mix(seed: u64, salt: u64, i: usize) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (i as u64).wrapping_mul(0xd1b5_4a32_d192_ed03);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Write `n` image / exact label / coarse label triples and both manifests
/// into `out`.
pub fn gen_dataset(spec: &DatasetSpec, out: &Path) -> Result<SynthDataset> {
    if spec.n == 0 {
        return Err(Error::Config("dataset.n must be positive".into()));
    }
    if !(0.0..1.0).contains(&spec.test_fraction) {
        return Err(Error::Config(format!(
            "dataset.test_fraction must lie in [0, 1), got {}",
            spec.test_fraction
        )));
    }
    spec.scene.validate()?;
    spec.corruption.validate()?;
    let n_test = (spec.n as f64 * spec.test_fraction).round() as usize;
    let n_train = spec.n - n_test;
    let width = spec.n.saturating_sub(1).to_string().len().max(3);

    let rows = (0..spec.n)
        .into_par_iter()
        .map(|i| {
            let scene = SceneSpec {
                seed: mix(spec.seed, 1, i),
                ..spec.scene.clone()
            };
            let (img, gt) = gen_scene(&scene)?;
            let corruption = CorruptionSpec {
                seed: mix(spec.seed, 2, i),
                ..spec.corruption.clone()
            };
            let coarse = corrupt_label(&gt, &corruption)?;
            let name = format!("scene_{i:0width$}.png");
            let (ip, gp, cp) = (
                Path::new("images").join(&name),
                Path::new("gt").join(&name),
                Path::new("coarse").join(&name),
            );
            save_image(&img, out.join(&ip))?;
            save_mask(&gt, out.join(&gp))?;
            save_mask(&coarse, out.join(&cp))?;
            let split = if i < n_train { Split::Train } else { Split::Test };
            Ok((
                ManifestRecord::new(ip.clone(), Some(cp), split, Provenance::Coarse),
                ManifestRecord::new(ip, Some(gp), split, Provenance::Manual),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let (coarse, gt): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    let coarse = DatasetManifest::new(coarse)?;
    let gt = DatasetManifest::new(gt)?;
    write_manifest(&coarse, out.join(COARSE_MANIFEST))?;
    write_manifest(&gt, out.join(GT_MANIFEST))?;
    Ok(SynthDataset {
        dir: out.to_path_buf(),
        coarse,
        gt,
    })
}

/// Few-shot variant of `gt`: the first `ceil(fraction · n_train)` training
/// records keep their labels, the other training records lose them. Test
/// records are unchanged.
pub fn annotate_manifest(gt: &DatasetManifest, fraction: f64) -> Result<DatasetManifest> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("labeled fraction must lie in [0, 1], got {fraction}")));
    }
    let n_train = gt.records.iter().filter(|r| r.split == Split::Train).count();
    let keep = (fraction * n_train as f64).ceil() as usize;
    let mut seen = 0;
    let records = gt
        .records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            if r.split == Split::Train {
                if seen >= keep {
                    r.label_path = None;
                }
                seen += 1;
            }
            r
        })
        .collect();
    DatasetManifest::new(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maskio::{load_mask, read_manifest};

    fn small(n: usize) -> DatasetSpec {
        DatasetSpec {
            n,
            seed: 7,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn writes_every_file_and_both_manifests() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gen_dataset(&small(10), dir.path()).unwrap();
        assert_eq!(ds.coarse.len(), 10);
        assert_eq!(read_manifest(dir.path().join(COARSE_MANIFEST)).unwrap(), ds.coarse);
        assert_eq!(read_manifest(dir.path().join(GT_MANIFEST)).unwrap(), ds.gt);
        assert_eq!(ds.coarse.records.iter().filter(|r| r.split == Split::Test).count(), 2);
        let mut differing = 0;
        for (c, g) in ds.coarse.records.iter().zip(&ds.gt.records) {
            assert_eq!(c.image_path, g.image_path);
            assert!(dir.path().join(&c.image_path).exists());
            let cm = load_mask(dir.path().join(c.label_path.as_ref().unwrap())).unwrap();
            let gm = load_mask(dir.path().join(g.label_path.as_ref().unwrap())).unwrap();
            differing += cm.bits().iter().zip(gm.bits()).filter(|(a, b)| a != b).count();
        }
        assert!(differing > 0);
    }

    #[test]
    fn deterministic_under_seed() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        gen_dataset(&small(6), a.path()).unwrap();
        gen_dataset(&small(6), b.path()).unwrap();
        for sub in ["images", "gt", "coarse"] {
            for i in 0..6 {
                let name = format!("{sub}/scene_{i:03}.png");
                assert_eq!(
                    std::fs::read(a.path().join(&name)).unwrap(),
                    std::fs::read(b.path().join(&name)).unwrap(),
                    "{name}"
                );
            }
        }
        assert_eq!(
            std::fs::read(a.path().join(COARSE_MANIFEST)).unwrap(),
            std::fs::read(b.path().join(COARSE_MANIFEST)).unwrap()
        );
    }

    #[test]
    fn annotate_keeps_the_leading_fraction() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gen_dataset(&small(10), dir.path()).unwrap();
        let m = annotate_manifest(&ds.gt, 0.3).unwrap();
        let labeled: Vec<bool> = m
            .records
            .iter()
            .filter(|r| r.split == Split::Train)
            .map(|r| r.label_path.is_some())
            .collect();
        assert_eq!(labeled, [true, true, true, false, false, false, false, false]);
        assert!(m.records.iter().filter(|r| r.split == Split::Test).all(|r| r.label_path.is_some()));
    }
}
