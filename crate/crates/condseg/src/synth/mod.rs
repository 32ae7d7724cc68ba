//! Synthetic datasets: sample model, on-disk format, and the four
//! experiment generators.
//!
//! A dataset is a manifest (`manifest.toml`: generator identity, schema,
//! per-split/subset counts, sample index) plus one binary tensor
//! container per image and mask under `samples/`. Regenerating from the
//! same `(name, version, seed)` triple is bit-identical, and loading
//! validates that the manifest counts match the files present.

pub mod generators;
pub mod polygon;
pub mod scene;

pub use generators::{
    gen_annotation_styles, gen_continuous, gen_domains, gen_multitask, gen_uniform_blobs,
    MultitaskCounts, SplitCounts,
};
pub use polygon::{douglas_peucker, polygonize_mask, Point};
pub use scene::{SceneSpec, SceneStyle};

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::metadata::{MetadataRecord, MetadataSchema};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidConfig(format!(
                "unknown split {other:?} (expected train|val|test)"
            ))),
        }
    }
}

/// One image/target/metadata triple.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub split: Split,
    /// Grouping tag for per-subset metrics (style, task, ...).
    pub subset: String,
    pub record: MetadataRecord,
    /// Member of the designated multilabel subset (paired samples that
    /// share an image under different task labels).
    pub multilabel: bool,
    /// Shared across samples rendered from the same underlying image.
    pub image_key: u64,
    /// `[1, H, W]` intensities in [0, 1].
    pub image: Tensor<f32>,
    /// `[K, H, W]` binary target.
    pub mask: Tensor<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorInfo {
    pub name: String,
    pub version: u32,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub generator: GeneratorInfo,
    pub schema: MetadataSchema,
    pub mask_channels: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    /// Subset tags in first-appearance order.
    pub fn subsets(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for s in &self.samples {
            if !seen.contains(&s.subset) {
                seen.push(s.subset.clone());
            }
        }
        seen
    }

    pub fn counts(&self) -> BTreeMap<(Split, String), usize> {
        let mut counts = BTreeMap::new();
        for s in &self.samples {
            *counts.entry((s.split, s.subset.clone())).or_insert(0) += 1;
        }
        counts
    }

    /// Internal consistency: binary masks, declared channel count, never
    /// an all-positive mask.
    pub fn validate(&self) -> Result<()> {
        for s in &self.samples {
            if !s.mask.is_binary() {
                return Err(Error::Dataset(format!("sample {} mask not binary", s.id)));
            }
            if s.mask.shape()[0] != self.mask_channels {
                return Err(Error::Dataset(format!(
                    "sample {} has {} mask channels, manifest says {}",
                    s.id,
                    s.mask.shape()[0],
                    self.mask_channels
                )));
            }
            if s.mask.count_nonzero() == s.mask.numel() {
                return Err(Error::Dataset(format!("sample {} mask all-positive", s.id)));
            }
            self.schema.encode::<f32>(&s.record)?;
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let samples_dir = dir.join("samples");
        std::fs::create_dir_all(&samples_dir).map_err(|e| Error::io(&samples_dir, e))?;
        let mut index = Vec::with_capacity(self.samples.len());
        for s in &self.samples {
            let image_rel = format!("samples/{}.img.cseg", s.id);
            let mask_rel = format!("samples/{}.mask.cseg", s.id);
            container::write_f32_file(&dir.join(&image_rel), &s.image)?;
            container::write_mask_file(&dir.join(&mask_rel), &s.mask)?;
            index.push(SampleEntry {
                id: s.id.clone(),
                split: s.split,
                subset: s.subset.clone(),
                record: s.record.clone(),
                multilabel: s.multilabel,
                image_key: s.image_key,
                image: image_rel,
                mask: mask_rel,
            });
        }
        let manifest = ManifestFile {
            generator: self.generator.clone(),
            mask_channels: self.mask_channels,
            counts: self
                .counts()
                .into_iter()
                .map(|((split, subset), n)| CountEntry { split, subset, n })
                .collect(),
            schema: self.schema.clone(),
            samples: index,
        };
        let text = toml::to_string(&manifest)
            .map_err(|e| Error::Dataset(format!("manifest serialization failed: {e}")))?;
        let path = dir.join("manifest.toml");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let path = dir.join("manifest.toml");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: ManifestFile = toml::from_str(&text).map_err(|e| Error::CorruptFile {
            path: path.clone(),
            detail: e.to_string(),
        })?;
        let mut samples = Vec::with_capacity(manifest.samples.len());
        for entry in manifest.samples {
            let image = container::read_f32_file(&dir.join(&entry.image))?;
            let mask = container::read_f32_file(&dir.join(&entry.mask))?;
            samples.push(Sample {
                id: entry.id,
                split: entry.split,
                subset: entry.subset,
                record: entry.record,
                multilabel: entry.multilabel,
                image_key: entry.image_key,
                image,
                mask,
            });
        }
        let dataset = Dataset {
            generator: manifest.generator,
            schema: manifest.schema,
            mask_channels: manifest.mask_channels,
            samples,
        };
        // Manifest counts must match the loaded files.
        let declared: BTreeMap<(Split, String), usize> = manifest
            .counts
            .into_iter()
            .map(|c| ((c.split, c.subset), c.n))
            .collect();
        if declared != dataset.counts() {
            return Err(Error::Dataset(format!(
                "manifest counts do not match sample files in {}",
                dir.display()
            )));
        }
        dataset.validate()?;
        Ok(dataset)
    }

    /// Write PGM previews (image plus each mask channel) for inspection.
    pub fn export_pgm(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for s in &self.samples {
            container::write_pgm(&dir.join(format!("{}.pgm", s.id)), &s.image)?;
            for k in 0..s.mask.shape()[0] {
                container::write_pgm(
                    &dir.join(format!("{}.mask{k}.pgm", s.id)),
                    &s.mask.index_axis0(k),
                )?;
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    generator: GeneratorInfo,
    mask_channels: usize,
    counts: Vec<CountEntry>,
    schema: MetadataSchema,
    samples: Vec<SampleEntry>,
}

#[derive(Serialize, Deserialize)]
struct CountEntry {
    split: Split,
    subset: String,
    n: usize,
}

#[derive(Serialize, Deserialize)]
struct SampleEntry {
    id: String,
    split: Split,
    subset: String,
    record: MetadataRecord,
    #[serde(default)]
    multilabel: bool,
    image_key: u64,
    image: String,
    mask: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn save_load_roundtrip_preserves_everything() {
        let ds = gen_domains(3, SplitCounts::new(4, 2, 2), 24, 7).unwrap();
        let dir = tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.generator, ds.generator);
        assert_eq!(back.schema, ds.schema);
        assert_eq!(back.samples.len(), ds.samples.len());
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.image, b.image);
            assert_eq!(a.mask, b.mask);
            assert_eq!(a.record, b.record);
        }
    }

    #[test]
    fn load_rejects_count_mismatch() {
        let ds = gen_domains(2, SplitCounts::new(2, 1, 1), 24, 3).unwrap();
        let dir = tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        // Tamper with one count.
        let manifest = dir.path().join("manifest.toml");
        let text = std::fs::read_to_string(&manifest).unwrap();
        let tampered = text.replacen("n = 2", "n = 3", 1);
        std::fs::write(&manifest, tampered).unwrap();
        assert!(Dataset::load(dir.path()).is_err());
    }

    #[test]
    fn pgm_export_writes_previews() {
        let ds = gen_domains(2, SplitCounts::new(1, 1, 1), 24, 3).unwrap();
        let dir = tempdir().unwrap();
        ds.export_pgm(dir.path()).unwrap();
        let first = &ds.samples[0];
        assert!(dir.path().join(format!("{}.pgm", first.id)).exists());
        assert!(dir.path().join(format!("{}.mask0.pgm", first.id)).exists());
    }
}
