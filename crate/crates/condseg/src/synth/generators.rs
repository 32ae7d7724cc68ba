//! The four dataset generators.
//!
//! Per-sample randomness comes from a counter-based splitting rule: a
//! ChaCha stream seeded with the dataset seed, with the stream id set to
//! the running scene counter. Output is therefore identical regardless
//! of generation order or thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::scene::{self, SceneSpec, SceneStyle};
use super::{polygon, Dataset, GeneratorInfo, Sample, Split};
use crate::error::{Error, Result};
use crate::metadata::{FieldSpec, MetadataRecord, MetadataSchema};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn new(train: usize, val: usize, test: usize) -> Self {
        SplitCounts { train, val, test }
    }

    fn iter(self) -> impl Iterator<Item = (Split, usize)> {
        [
            (Split::Train, self.train),
            (Split::Val, self.val),
            (Split::Test, self.test),
        ]
        .into_iter()
    }
}

fn scene_rng(seed: u64, counter: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(counter);
    rng
}

/// Style table for the domains preset. Styles c/d and e/f are deliberate
/// twin pairs: identical background and noise, opposite low-contrast
/// polarity, so the style label genuinely disambiguates what intensities
/// alone resolve only unreliably.
fn domain_style(index: usize) -> SceneStyle {
    const TABLE: [SceneStyle; 7] = [
        SceneStyle {
            bg_mean: 0.30,
            fg_delta: 0.35,
            noise_sigma: 0.06,
            radius: (4.0, 7.0),
            eccentricity: 0.15,
            count: (3, 7),
        },
        SceneStyle {
            bg_mean: 0.70,
            fg_delta: -0.35,
            noise_sigma: 0.06,
            radius: (4.0, 7.0),
            eccentricity: 0.15,
            count: (3, 7),
        },
        SceneStyle {
            bg_mean: 0.45,
            fg_delta: 0.13,
            noise_sigma: 0.11,
            radius: (3.5, 6.5),
            eccentricity: 0.30,
            count: (3, 7),
        },
        SceneStyle {
            bg_mean: 0.45,
            fg_delta: -0.13,
            noise_sigma: 0.11,
            radius: (3.5, 6.5),
            eccentricity: 0.30,
            count: (3, 7),
        },
        SceneStyle {
            bg_mean: 0.55,
            fg_delta: 0.12,
            noise_sigma: 0.11,
            radius: (4.0, 7.0),
            eccentricity: 0.40,
            count: (3, 6),
        },
        SceneStyle {
            bg_mean: 0.55,
            fg_delta: -0.12,
            noise_sigma: 0.11,
            radius: (4.0, 7.0),
            eccentricity: 0.40,
            count: (3, 6),
        },
        SceneStyle {
            bg_mean: 0.40,
            fg_delta: -0.20,
            noise_sigma: 0.09,
            radius: (5.0, 9.0),
            eccentricity: 0.60,
            count: (3, 6),
        },
    ];
    if index < TABLE.len() {
        return TABLE[index];
    }
    // Procedural extension beyond the tuned seven.
    let frac = |k: f64| (index as f64 * k).fract();
    SceneStyle {
        bg_mean: 0.35 + 0.30 * frac(0.618),
        fg_delta: if index % 2 == 0 { 1.0 } else { -1.0 } * (0.12 + 0.20 * frac(0.371)),
        noise_sigma: 0.05 + 0.08 * frac(0.227),
        radius: (3.0 + 2.0 * frac(0.511), 6.0 + 2.0 * frac(0.733)),
        eccentricity: 0.5 * frac(0.293),
        count: (3, 7),
    }
}

fn style_class_name(index: usize) -> String {
    if index < 26 {
        char::from(b'a' + index as u8).to_string()
    } else {
        format!("s{index}")
    }
}

/// Visual-domain dataset: `styles` distinct appearances, one shared task
/// (segment the blobs), metadata = one-hot style label. Counts are per
/// style and splits are exactly uniform across styles.
pub fn gen_domains(
    styles: usize,
    per_style: SplitCounts,
    image_size: usize,
    seed: u64,
) -> Result<Dataset> {
    if styles < 2 {
        return Err(Error::InvalidConfig(format!(
            "domains generator needs >= 2 styles, got {styles}"
        )));
    }
    let class_names: Vec<String> = (0..styles).map(style_class_name).collect();
    let schema = MetadataSchema::new(vec![FieldSpec::Categorical {
        name: "domain".into(),
        classes: class_names.clone(),
    }])?;

    let mut samples = Vec::new();
    let mut counter = 0u64;
    for (style_idx, class) in class_names.iter().enumerate() {
        let spec = SceneSpec {
            height: image_size,
            width: image_size,
            style: domain_style(style_idx),
            edge_softness: 0.25,
        };
        for (split, n) in per_style.iter() {
            for i in 0..n {
                let mut rng = scene_rng(seed, counter);
                let scene = scene::render_blob_scene(&spec, false, &mut rng);
                samples.push(Sample {
                    id: format!("{}-{}-{:04}", split.as_str(), class, i),
                    split,
                    subset: class.clone(),
                    record: MetadataRecord::class(class),
                    multilabel: false,
                    image_key: counter,
                    image: scene.image,
                    mask: scene.blob_mask,
                });
                counter += 1;
            }
        }
    }
    let dataset = Dataset {
        generator: GeneratorInfo {
            name: "domains".into(),
            version: 1,
            seed,
        },
        schema,
        mask_channels: 1,
        samples,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Uniform single-style blob dataset, the base material for the
/// annotation-styles transform.
pub fn gen_uniform_blobs(counts: SplitCounts, image_size: usize, seed: u64) -> Result<Dataset> {
    let schema = MetadataSchema::single_categorical("style", &["accurate"])?;
    // Larger, softer-edged blobs: polygonization differences between the
    // annotation styles grow with blob size, and a soft intensity edge
    // leaves the exact boundary to the label convention.
    let spec = SceneSpec {
        height: image_size,
        width: image_size,
        style: SceneStyle {
            bg_mean: 0.40,
            fg_delta: 0.30,
            noise_sigma: 0.08,
            radius: (5.0, 9.0),
            eccentricity: 0.35,
            count: (3, 6),
        },
        edge_softness: 0.35,
    };
    let mut samples = Vec::new();
    let mut counter = 0u64;
    for (split, n) in counts.iter() {
        for i in 0..n {
            let mut rng = scene_rng(seed, counter);
            let scene = scene::render_blob_scene(&spec, false, &mut rng);
            samples.push(Sample {
                id: format!("{}-blob-{:04}", split.as_str(), i),
                split,
                subset: "accurate".into(),
                record: MetadataRecord::class("accurate"),
                multilabel: false,
                image_key: counter,
                image: scene.image,
                mask: scene.blob_mask,
            });
            counter += 1;
        }
    }
    let dataset = Dataset {
        generator: GeneratorInfo {
            name: "uniform-blobs".into(),
            version: 1,
            seed,
        },
        schema,
        mask_channels: 1,
        samples,
    };
    dataset.validate()?;
    Ok(dataset)
}

pub const STYLE_NAMES: [&str; 3] = ["accurate", "fine", "coarse"];
pub const DEFAULT_FINE_TOLERANCE: f64 = 2.0;
pub const DEFAULT_COARSE_TOLERANCE: f64 = 3.5;

/// Annotation-style transform: partition the train split into thirds
/// {accurate, fine, coarse} (remainder goes to accurate), polygonize the
/// fine/coarse thirds at their tolerances, and relabel metadata to the
/// one-hot style. Validation and test masks stay untouched and are
/// labeled "accurate".
pub fn gen_annotation_styles(
    base: &Dataset,
    t_fine: f64,
    t_coarse: f64,
    seed: u64,
) -> Result<Dataset> {
    if base.mask_channels != 1 {
        return Err(Error::Dataset(
            "annotation styles expects single-channel masks".into(),
        ));
    }
    let schema = MetadataSchema::single_categorical("style", &STYLE_NAMES)?;

    let train_ids: Vec<usize> = base
        .samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.split == Split::Train)
        .map(|(i, _)| i)
        .collect();
    let mut order = train_ids.clone();
    use rand::seq::SliceRandom;
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let third = order.len() / 3;
    // order[..n-2*third] stays accurate (absorbs any remainder).
    let fine_set: std::collections::HashSet<usize> =
        order[order.len() - 2 * third..order.len() - third]
            .iter()
            .copied()
            .collect();
    let coarse_set: std::collections::HashSet<usize> =
        order[order.len() - third..].iter().copied().collect();

    let mut samples = Vec::with_capacity(base.samples.len());
    let mut per_style_counter = std::collections::BTreeMap::<(Split, &str), usize>::new();
    for (idx, s) in base.samples.iter().enumerate() {
        let (style, tolerance) = if s.split != Split::Train {
            ("accurate", 0.0)
        } else if fine_set.contains(&idx) {
            ("fine", t_fine)
        } else if coarse_set.contains(&idx) {
            ("coarse", t_coarse)
        } else {
            ("accurate", 0.0)
        };
        let mask = if tolerance > 0.0 {
            let plane = s.mask.index_axis0(0);
            let poly = polygon::polygonize_mask(&plane, tolerance)?;
            let (h, w) = (poly.shape()[0], poly.shape()[1]);
            poly.reshaped(vec![1, h, w])
        } else {
            s.mask.clone()
        };
        let i = per_style_counter.entry((s.split, style)).or_insert(0);
        samples.push(Sample {
            id: format!("{}-{}-{:04}", s.split.as_str(), style, i),
            split: s.split,
            subset: style.to_string(),
            record: MetadataRecord::class(style),
            multilabel: false,
            image_key: s.image_key,
            image: s.image.clone(),
            mask,
        });
        *i += 1;
    }
    let dataset = Dataset {
        generator: GeneratorInfo {
            name: "styles".into(),
            version: 1,
            seed,
        },
        schema,
        mask_channels: 1,
        samples,
    };
    dataset.validate()?;
    Ok(dataset)
}

pub const TASK_NAMES: [&str; 2] = ["nuclei", "anomaly"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MultitaskCounts {
    /// Samples whose target is the blob mask.
    pub nuclei: SplitCounts,
    /// Images carrying an artifact annotation (each contributes an
    /// anomaly-task sample).
    pub anomaly: SplitCounts,
    /// How many train anomaly images are additionally emitted under the
    /// nuclei task ("multilabel" pairs). Val/test anomaly images are
    /// always paired so that parallel-head models can be scored.
    pub multilabel_train: usize,
}

/// Metadata-as-task-switch dataset. Every image contains blobs; anomaly
/// images also contain streak/blotch artifacts, and half of the
/// nuclei-only images carry unannotated artifacts as distractors. Each
/// sample has exactly one target mask, selected by the task metadata.
pub fn gen_multitask(counts: MultitaskCounts, image_size: usize, seed: u64) -> Result<Dataset> {
    if counts.multilabel_train > counts.anomaly.train {
        return Err(Error::InvalidConfig(
            "multilabel_train exceeds anomaly train count".into(),
        ));
    }
    let schema = MetadataSchema::single_categorical("task", &TASK_NAMES)?;
    let spec = SceneSpec {
        height: image_size,
        width: image_size,
        style: SceneStyle {
            bg_mean: 0.40,
            fg_delta: 0.30,
            noise_sigma: 0.07,
            radius: (3.0, 6.0),
            eccentricity: 0.35,
            count: (4, 8),
        },
        edge_softness: 0.25,
    };

    let mut samples = Vec::new();
    let mut counter = 0u64;

    // Nuclei-task images; artifacts appear unannotated in two-fifths of
    // them, as distractors the nuclei task must learn to suppress.
    for (split, n) in counts.nuclei.iter() {
        for i in 0..n {
            let mut rng = scene_rng(seed, counter);
            let with_artifacts = rng.gen_bool(0.4);
            let scene = scene::render_blob_scene(&spec, with_artifacts, &mut rng);
            samples.push(Sample {
                id: format!("{}-nuclei-{:04}", split.as_str(), i),
                split,
                subset: "nuclei".into(),
                record: MetadataRecord::class("nuclei"),
                multilabel: false,
                image_key: counter,
                image: scene.image,
                mask: scene.blob_mask,
            });
            counter += 1;
        }
    }

    // Anomaly-annotated images. Paired ones are emitted twice: once per
    // task, sharing the image.
    for (split, n) in counts.anomaly.iter() {
        for i in 0..n {
            let mut rng = scene_rng(seed, counter);
            let scene = scene::render_blob_scene(&spec, true, &mut rng);
            let paired = match split {
                Split::Train => i < counts.multilabel_train,
                _ => true,
            };
            samples.push(Sample {
                id: format!("{}-anomaly-{:04}", split.as_str(), i),
                split,
                subset: "anomaly".into(),
                record: MetadataRecord::class("anomaly"),
                multilabel: paired,
                image_key: counter,
                image: scene.image.clone(),
                mask: scene.artifact_mask,
            });
            if paired {
                samples.push(Sample {
                    id: format!("{}-anomaly-{:04}-nview", split.as_str(), i),
                    split,
                    subset: "nuclei".into(),
                    record: MetadataRecord::class("nuclei"),
                    multilabel: true,
                    image_key: counter,
                    image: scene.image,
                    mask: scene.blob_mask,
                });
            }
            counter += 1;
        }
    }

    let dataset = Dataset {
        generator: GeneratorInfo {
            name: "multitask".into(),
            version: 1,
            seed,
        },
        schema,
        mask_channels: 1,
        samples,
    };
    dataset.validate()?;
    Ok(dataset)
}

pub const LESION_RADIUS_RANGE: (f64, f64) = (3.0, 9.0);

/// Continuous-metadata dataset: organ phantom with an embedded lesion
/// whose intensity fades out at a random fraction of its radius.
/// Metadata is the normalized lesion size; masks have two channels
/// (organ, lesion).
pub fn gen_continuous(counts: SplitCounts, image_size: usize, seed: u64) -> Result<Dataset> {
    let schema = MetadataSchema::new(vec![FieldSpec::Continuous {
        name: "size".into(),
        min: LESION_RADIUS_RANGE.0,
        max: LESION_RADIUS_RANGE.1,
    }])?;
    let mut samples = Vec::new();
    let mut counter = 0u64;
    for (split, n) in counts.iter() {
        for i in 0..n {
            let mut rng = scene_rng(seed, counter);
            let phantom =
                scene::render_phantom(image_size, image_size, LESION_RADIUS_RANGE, &mut rng);
            samples.push(Sample {
                id: format!("{}-size-{:04}", split.as_str(), i),
                split,
                subset: "all".into(),
                record: MetadataRecord::scalar(phantom.lesion_radius),
                multilabel: false,
                image_key: counter,
                image: phantom.image,
                mask: phantom.mask,
            });
            counter += 1;
        }
    }
    let dataset = Dataset {
        generator: GeneratorInfo {
            name: "continuous".into(),
            version: 1,
            seed,
        },
        schema,
        mask_channels: 2,
        samples,
    };
    dataset.validate()?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metadata::FieldValue;
    use crate::tensor::Tensor;

    #[test]
    fn domains_counts_are_uniform_and_one_hot() {
        let ds = gen_domains(7, SplitCounts::new(4, 2, 2), 24, 11).unwrap();
        assert_eq!(ds.samples.len(), 7 * 8);
        let counts = ds.counts();
        for subset in ds.subsets() {
            assert_eq!(counts[&(Split::Train, subset.clone())], 4);
            assert_eq!(counts[&(Split::Val, subset.clone())], 2);
            assert_eq!(counts[&(Split::Test, subset.clone())], 2);
        }
        for s in &ds.samples {
            let v: Tensor<f32> = ds.schema.encode(&s.record).unwrap();
            assert_eq!(v.numel(), 7);
            assert_eq!(v.data().iter().filter(|&&x| x == 1.0).count(), 1);
        }
    }

    #[test]
    fn generation_is_bit_reproducible() {
        let a = gen_domains(3, SplitCounts::new(3, 1, 1), 24, 42).unwrap();
        let b = gen_domains(3, SplitCounts::new(3, 1, 1), 24, 42).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.image.data(), y.image.data());
            assert_eq!(x.mask.data(), y.mask.data());
        }
        let c = gen_multitask(
            MultitaskCounts {
                nuclei: SplitCounts::new(6, 2, 2),
                anomaly: SplitCounts::new(3, 1, 1),
                multilabel_train: 3,
            },
            24,
            42,
        )
        .unwrap();
        let d = gen_multitask(
            MultitaskCounts {
                nuclei: SplitCounts::new(6, 2, 2),
                anomaly: SplitCounts::new(3, 1, 1),
                multilabel_train: 3,
            },
            24,
            42,
        )
        .unwrap();
        for (x, y) in c.samples.iter().zip(&d.samples) {
            assert_eq!(x.image.data(), y.image.data());
        }
    }

    #[test]
    fn annotation_styles_partitions_thirds_train_only() {
        let base = gen_uniform_blobs(SplitCounts::new(20, 6, 6), 24, 5).unwrap();
        let ds = gen_annotation_styles(&base, 2.0, 3.5, 9).unwrap();
        let counts = ds.counts();
        // 20 = 6 + 6 + remainder 8 to accurate.
        assert_eq!(counts[&(Split::Train, "accurate".to_string())], 8);
        assert_eq!(counts[&(Split::Train, "fine".to_string())], 6);
        assert_eq!(counts[&(Split::Train, "coarse".to_string())], 6);
        // Every val/test record encodes "accurate".
        for s in ds.samples.iter().filter(|s| s.split != Split::Train) {
            assert_eq!(s.subset, "accurate");
            assert_eq!(s.record, MetadataRecord::class("accurate"));
        }
    }

    #[test]
    fn annotation_styles_alters_only_degraded_thirds() {
        let base = gen_uniform_blobs(SplitCounts::new(12, 2, 2), 24, 6).unwrap();
        let ds = gen_annotation_styles(&base, 2.0, 3.5, 10).unwrap();
        let by_key: std::collections::HashMap<u64, &Sample> =
            base.samples.iter().map(|s| (s.image_key, s)).collect();
        let mut coarse_changed = 0;
        for s in &ds.samples {
            let original = by_key[&s.image_key];
            match s.subset.as_str() {
                "accurate" => assert_eq!(s.mask.data(), original.mask.data()),
                "coarse" => {
                    if s.mask.data() != original.mask.data() {
                        coarse_changed += 1;
                    }
                }
                _ => {}
            }
        }
        assert!(coarse_changed > 0, "coarse third never differs");
    }

    #[test]
    fn multitask_pairs_appear_exactly_twice_with_different_tasks() {
        let ds = gen_multitask(
            MultitaskCounts {
                nuclei: SplitCounts::new(20, 4, 6),
                anomaly: SplitCounts::new(5, 2, 3),
                multilabel_train: 5,
            },
            24,
            13,
        )
        .unwrap();
        let mut by_key: std::collections::HashMap<u64, Vec<&Sample>> = Default::default();
        for s in ds.samples.iter().filter(|s| s.multilabel) {
            by_key.entry(s.image_key).or_default().push(s);
        }
        // 5 train + 2 val + 3 test paired images.
        assert_eq!(by_key.len(), 10);
        for (key, pair) in by_key {
            assert_eq!(pair.len(), 2, "image {key} not emitted exactly twice");
            assert_eq!(pair[0].image.data(), pair[1].image.data());
            assert_ne!(pair[0].record, pair[1].record);
            // Anomaly and nuclei masks differ whenever artifacts exist.
            assert_ne!(pair[0].mask.data(), pair[1].mask.data());
        }
    }

    #[test]
    fn multitask_anomaly_is_the_minority_task() {
        let ds = gen_multitask(
            MultitaskCounts {
                nuclei: SplitCounts::new(50, 6, 8),
                anomaly: SplitCounts::new(6, 2, 3),
                multilabel_train: 6,
            },
            24,
            3,
        )
        .unwrap();
        let train: Vec<_> = ds.split(Split::Train).collect();
        let anomaly = train.iter().filter(|s| s.subset == "anomaly").count();
        let nuclei = train.iter().filter(|s| s.subset == "nuclei").count();
        assert_eq!(anomaly, 6);
        assert_eq!(nuclei, 56); // 50 nuclei-only + 6 paired views
        assert!(anomaly * 4 < nuclei);
    }

    #[test]
    fn continuous_metadata_spans_unit_interval_and_encodes_size() {
        let ds = gen_continuous(SplitCounts::new(40, 5, 5), 24, 21).unwrap();
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for s in &ds.samples {
            let v: Tensor<f32> = ds.schema.encode(&s.record).unwrap();
            assert_eq!(v.numel(), 1);
            lo = lo.min(v.data()[0]);
            hi = hi.max(v.data()[0]);
            let FieldValue::Scalar(raw) = s.record.values[0] else {
                panic!("expected scalar record");
            };
            assert!((LESION_RADIUS_RANGE.0..LESION_RADIUS_RANGE.1).contains(&raw));
        }
        assert!(lo < 0.15 && hi > 0.85, "sizes span [{lo}, {hi}]");
    }

    /// Styles must be distinguishable from simple image statistics,
    /// otherwise there is nothing for the metadata to disambiguate
    /// against: leave-one-out 3-NN on (mean, std) must clear 80%.
    #[test]
    fn domain_styles_are_separable_by_three_nearest_neighbors() {
        let ds = gen_domains(7, SplitCounts::new(12, 0, 0), 32, 17).unwrap();
        let feats: Vec<(f64, f64, &str)> = ds
            .samples
            .iter()
            .map(|s| {
                let n = s.image.numel() as f64;
                let mean = s.image.data().iter().map(|&v| v as f64).sum::<f64>() / n;
                let var = s
                    .image
                    .data()
                    .iter()
                    .map(|&v| (v as f64 - mean).powi(2))
                    .sum::<f64>()
                    / n;
                (mean, var.sqrt(), s.subset.as_str())
            })
            .collect();
        // Normalize features to comparable scales.
        let max_std = feats.iter().map(|f| f.1).fold(0.0, f64::max);
        let mut correct = 0;
        for (i, probe) in feats.iter().enumerate() {
            let mut dists: Vec<(f64, &str)> = feats
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, f)| {
                    let d = (f.0 - probe.0).powi(2) + ((f.1 - probe.1) / max_std).powi(2);
                    (d, f.2)
                })
                .collect();
            dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let mut votes: std::collections::HashMap<&str, usize> = Default::default();
            for (_, label) in dists.iter().take(3) {
                *votes.entry(label).or_insert(0) += 1;
            }
            let winner = votes
                .into_iter()
                .max_by_key(|&(label, n)| (n, std::cmp::Reverse(label)))
                .unwrap()
                .0;
            if winner == probe.2 {
                correct += 1;
            }
        }
        let accuracy = correct as f64 / feats.len() as f64;
        assert!(accuracy > 0.8, "3-NN style accuracy {accuracy:.3}");
    }
}
