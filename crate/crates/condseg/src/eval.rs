//! F1 evaluation with metadata modes.
//!
//! Per-image F1 (Dice) against the ground-truth mask, grouped by subset
//! tag, with the metadata transformed per mode before encoding:
//! `correct` uses the sample's own record, `dummy` replaces every vector
//! with zeros, `swap` relabels a categorical field through a permutation.
//! The report's average is the unweighted mean over samples; multi-class
//! masks score as the mean of per-channel F1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metadata::{swap, Permutation};
use crate::scalar::Scalar;
use crate::synth::{Dataset, Sample, Split};
use crate::tensor::Tensor;
use crate::unet::{binarize_logits, ConditionedUNet};

/// `2 TP / (2 TP + FP + FN)` over all elements of two equal-shape binary
/// masks. Two empty masks score 1.0 (correct emptiness is not an error).
pub fn f1_score<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "f1_score",
            format!("{:?} vs {:?}", pred.shape(), target.shape()),
        ));
    }
    if !pred.is_binary() || !target.is_binary() {
        return Err(Error::invalid("f1_score", "masks must be binary"));
    }
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fn_ = 0u64;
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let p = p == S::one();
        let t = t == S::one();
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp + fp + fn_ == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
}

/// Per-sample score for a `[K, H, W]` mask: mean of per-channel F1
/// (one-vs-rest). Identical to `f1_score` for K = 1.
pub fn mask_f1<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<f64> {
    if pred.shape() != target.shape() || pred.rank() != 3 {
        return Err(Error::shape(
            "mask_f1",
            format!("{:?} vs {:?}", pred.shape(), target.shape()),
        ));
    }
    let k = pred.shape()[0];
    let mut sum = 0.0;
    for c in 0..k {
        sum += f1_score(&pred.index_axis0(c), &target.index_axis0(c))?;
    }
    Ok(sum / k as f64)
}

/// How metadata is presented to the model during evaluation.
#[derive(Debug, Clone, PartialEq)]
pub enum EvalMode {
    Correct,
    Dummy,
    Swap(Permutation),
}

impl EvalMode {
    pub fn label(&self) -> String {
        match self {
            EvalMode::Correct => "correct".into(),
            EvalMode::Dummy => "dummy".into(),
            EvalMode::Swap(p) => {
                let pairs: Vec<String> = p
                    .mapping
                    .iter()
                    .map(|(from, to)| format!("{from}:{to}"))
                    .collect();
                format!("swap({})", pairs.join(","))
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubsetScore {
    pub subset: String,
    pub n: usize,
    pub f1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// Generator name of the evaluated dataset.
    pub dataset: String,
    pub split: String,
    pub mode: String,
    pub threshold: f64,
    pub n: usize,
    /// Unweighted mean over samples.
    pub average: f64,
    pub subsets: Vec<SubsetScore>,
    /// `(sample id, subset, f1)` rows backing the aggregates.
    #[serde(skip)]
    pub per_sample: Vec<(String, String, f64)>,
}

impl EvalReport {
    pub fn subset_f1(&self, subset: &str) -> Option<f64> {
        self.subsets.iter().find(|s| s.subset == subset).map(|s| s.f1)
    }

    /// Per-sample CSV: `id,subset,f1`.
    pub fn per_sample_csv(&self) -> String {
        let mut out = String::from("id,subset,f1\n");
        for (id, subset, f1) in &self.per_sample {
            out.push_str(&format!("{id},{subset},{f1}\n"));
        }
        out
    }
}

/// Evaluate a model over one split of a dataset.
///
/// Metadata-free models ignore the mode entirely (there is no metadata
/// to transform). Swap permutations are validated against the schema.
pub fn evaluate(
    model: &ConditionedUNet<f32>,
    dataset: &Dataset,
    split: Split,
    mode: &EvalMode,
    threshold: f64,
) -> Result<EvalReport> {
    let samples: Vec<&Sample> = dataset.split(split).collect();
    if samples.is_empty() {
        return Err(Error::Dataset(format!(
            "no samples in split {}",
            split.as_str()
        )));
    }
    evaluate_samples(model, dataset, &samples, split, mode, threshold)
}

/// Evaluate an explicit sample list (stratified variants evaluate only
/// their own subset).
pub fn evaluate_samples(
    model: &ConditionedUNet<f32>,
    dataset: &Dataset,
    samples: &[&Sample],
    split: Split,
    mode: &EvalMode,
    threshold: f64,
) -> Result<EvalReport> {
    let uses_meta = model.config().conditioning.uses_metadata();
    if let EvalMode::Swap(perm) = mode {
        // Validate the permutation once, against a real record.
        if let Some(sample) = samples.first() {
            swap(&dataset.schema, &sample.record, perm)?;
        }
    }
    let mut per_sample = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(8) {
        let images: Vec<&Tensor<f32>> = chunk.iter().map(|s| &s.image).collect();
        let image = Tensor::stack(&images)?;
        let meta = if uses_meta {
            let rows: Vec<Tensor<f32>> = chunk
                .iter()
                .map(|s| match mode {
                    EvalMode::Correct => dataset.schema.encode(&s.record),
                    EvalMode::Dummy => Ok(dataset.schema.dummy()),
                    EvalMode::Swap(perm) => {
                        let record = swap(&dataset.schema, &s.record, perm)?;
                        dataset.schema.encode(&record)
                    }
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&Tensor<f32>> = rows.iter().collect();
            Some(Tensor::stack(&refs)?)
        } else {
            None
        };
        let logits = model.logits(&image, meta.as_ref())?;
        let pred = binarize_logits(&logits, threshold);
        for (i, sample) in chunk.iter().enumerate() {
            let f1 = mask_f1(&pred.index_axis0(i), &sample.mask)?;
            per_sample.push((sample.id.clone(), sample.subset.clone(), f1));
        }
    }

    // Group by subset in first-appearance order.
    let mut subset_order: Vec<String> = Vec::new();
    for (_, subset, _) in &per_sample {
        if !subset_order.contains(subset) {
            subset_order.push(subset.clone());
        }
    }
    let subsets = subset_order
        .into_iter()
        .map(|name| {
            let scores: Vec<f64> = per_sample
                .iter()
                .filter(|(_, s, _)| *s == name)
                .map(|(_, _, f1)| *f1)
                .collect();
            SubsetScore {
                subset: name,
                n: scores.len(),
                f1: scores.iter().sum::<f64>() / scores.len() as f64,
            }
        })
        .collect();
    let average = per_sample.iter().map(|(_, _, f1)| f1).sum::<f64>() / per_sample.len() as f64;
    Ok(EvalReport {
        dataset: dataset.generator.name.clone(),
        split: split.as_str().to_string(),
        mode: mode.label(),
        threshold,
        n: per_sample.len(),
        average,
        subsets,
        per_sample,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::ConditioningKind;
    use crate::metadata::MetadataRecord;
    use crate::synth::{gen_domains, SplitCounts};
    use crate::unet::UNetConfig;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mask(data: Vec<f32>) -> Tensor<f32> {
        Tensor::from_vec(vec![data.len()], data)
    }

    #[test]
    fn f1_of_identical_nonempty_masks_is_one() {
        let m = mask(vec![1.0, 0.0, 1.0, 1.0]);
        assert_eq!(f1_score(&m, &m).unwrap(), 1.0);
    }

    #[test]
    fn f1_of_disjoint_masks_is_zero() {
        let a = mask(vec![1.0, 1.0, 0.0, 0.0]);
        let b = mask(vec![0.0, 0.0, 1.0, 1.0]);
        assert_eq!(f1_score(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn f1_formula_case() {
        // TP = 1, FP = 1, FN = 1 -> 2/(2+1+1) = 0.5.
        let pred = mask(vec![1.0, 1.0, 0.0]);
        let target = mask(vec![1.0, 0.0, 1.0]);
        assert_eq!(f1_score(&pred, &target).unwrap(), 0.5);
    }

    #[test]
    fn f1_of_two_empty_masks_is_one_by_convention() {
        let e = mask(vec![0.0, 0.0, 0.0]);
        assert_eq!(f1_score(&e, &e).unwrap(), 1.0);
        // Empty prediction against non-empty target is 0.
        let t = mask(vec![0.0, 1.0, 0.0]);
        assert_eq!(f1_score(&e, &t).unwrap(), 0.0);
    }

    #[test]
    fn f1_rejects_shape_mismatch() {
        let a = mask(vec![1.0, 0.0]);
        let b = mask(vec![1.0, 0.0, 0.0]);
        assert!(f1_score(&a, &b).is_err());
    }

    #[test]
    fn mask_f1_averages_channels() {
        let pred = Tensor::from_vec(vec![2, 1, 2], vec![1.0f32, 1.0, 0.0, 0.0]);
        let target = Tensor::from_vec(vec![2, 1, 2], vec![1.0f32, 1.0, 1.0, 1.0]);
        // Channel 0 perfect (1.0), channel 1 empty-vs-full (0.0).
        assert_eq!(mask_f1(&pred, &target).unwrap(), 0.5);
    }

    fn small_model(kind: ConditioningKind, meta_dim: usize) -> ConditionedUNet<f32> {
        let cfg = UNetConfig {
            depth: 2,
            base_channels: 4,
            conditioning: kind,
            meta_dim,
            ..UNetConfig::default()
        };
        ConditionedUNet::build(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn dummy_mode_ignores_true_labels() {
        // Relabeling the dataset's records must not change a dummy-mode
        // report: the labels never reach the model.
        let dataset = gen_domains(3, SplitCounts::new(2, 1, 2), 16, 5).unwrap();
        let model = small_model(ConditioningKind::Sme, 3);
        let a = evaluate(&model, &dataset, Split::Test, &EvalMode::Dummy, 0.5).unwrap();
        let mut relabeled = dataset.clone();
        for s in &mut relabeled.samples {
            s.record = MetadataRecord::class("a");
        }
        let b = evaluate(&model, &relabeled, Split::Test, &EvalMode::Dummy, 0.5).unwrap();
        for (x, y) in a.per_sample.iter().zip(&b.per_sample) {
            assert_eq!(x.2, y.2);
        }
    }

    #[test]
    fn identity_swap_equals_correct_mode() {
        let dataset = gen_domains(3, SplitCounts::new(2, 1, 2), 16, 6).unwrap();
        let model = small_model(ConditioningKind::Me, 3);
        let correct = evaluate(&model, &dataset, Split::Test, &EvalMode::Correct, 0.5).unwrap();
        let ident = EvalMode::Swap(Permutation::identity("domain"));
        let swapped = evaluate(&model, &dataset, Split::Test, &ident, 0.5).unwrap();
        assert_eq!(correct.average, swapped.average);
        for (x, y) in correct.per_sample.iter().zip(&swapped.per_sample) {
            assert_eq!(x.2, y.2);
        }
    }

    #[test]
    fn metadata_free_model_ignores_modes_entirely() {
        let dataset = gen_domains(3, SplitCounts::new(2, 1, 2), 16, 7).unwrap();
        let model = small_model(ConditioningKind::None, 0);
        let a = evaluate(&model, &dataset, Split::Test, &EvalMode::Correct, 0.5).unwrap();
        let b = evaluate(&model, &dataset, Split::Test, &EvalMode::Dummy, 0.5).unwrap();
        for (x, y) in a.per_sample.iter().zip(&b.per_sample) {
            assert_eq!(x.2, y.2);
        }
    }

    #[test]
    fn invalid_swap_permutation_is_rejected() {
        let dataset = gen_domains(3, SplitCounts::new(2, 1, 2), 16, 8).unwrap();
        let model = small_model(ConditioningKind::Me, 3);
        let bad = EvalMode::Swap(Permutation::parse("domain", "a:z").unwrap());
        assert!(evaluate(&model, &dataset, Split::Test, &bad, 0.5).is_err());
    }

    #[test]
    fn averages_recompute_from_per_sample_rows() {
        let dataset = gen_domains(4, SplitCounts::new(2, 1, 3), 16, 9).unwrap();
        let model = small_model(ConditioningKind::None, 0);
        let report = evaluate(&model, &dataset, Split::Test, &EvalMode::Correct, 0.5).unwrap();
        let recomputed =
            report.per_sample.iter().map(|r| r.2).sum::<f64>() / report.per_sample.len() as f64;
        assert!((report.average - recomputed).abs() < 1e-9);
        for subset in &report.subsets {
            let vals: Vec<f64> = report
                .per_sample
                .iter()
                .filter(|r| r.1 == subset.subset)
                .map(|r| r.2)
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            assert!((subset.f1 - mean).abs() < 1e-9);
            assert_eq!(subset.n, vals.len());
        }
    }

    proptest! {
        #[test]
        fn f1_is_symmetric_and_reflexive(bits in proptest::collection::vec(0u8..2, 12)) {
            let a = mask(bits.iter().map(|&b| f32::from(b)).collect());
            let flipped = mask(bits.iter().map(|&b| f32::from(1 - b)).collect());
            prop_assert_eq!(f1_score(&a, &a).unwrap(), 1.0);
            prop_assert_eq!(
                f1_score(&a, &flipped).unwrap(),
                f1_score(&flipped, &a).unwrap()
            );
        }
    }
}
