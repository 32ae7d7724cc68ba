//! Experiment presets, the variant grid runner, and report rendering.
//!
//! A preset binds a generator, a metadata schema, desk-scale counts, and
//! the variant grid of its comparison table. `run_experiment` executes
//! every `(variant, seed)` cell: generate the data for the seed, build
//! and train the model, evaluate it in every mode relevant to the
//! preset, and write per-run CSVs plus a `summary.toml` into the run's
//! own directory. Independent cells run in parallel worker threads
//! (capped by `CONDSEG_THREADS`); each run is internally
//! single-threaded, so results do not depend on scheduling.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::ConditioningKind;
use crate::error::{Error, Result};
use crate::eval::{evaluate, f1_score, EvalMode, EvalReport, SubsetScore};
use crate::metadata::Permutation;
use crate::synth::{
    gen_annotation_styles, gen_continuous, gen_domains, gen_multitask, gen_uniform_blobs,
    Dataset, MultitaskCounts, Sample, Split, SplitCounts,
};
use crate::tensor::Tensor;
use crate::training::{train, TrainConfig, TrainOutcome};
use crate::unet::{binarize_logits, ConditionedUNet, UNetConfig};

// ---------------------------------------------------------------------------
// Presets and variants
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Domains,
    Styles,
    Multitask,
    Continuous,
}

impl Preset {
    pub const ALL: [Preset; 4] = [
        Preset::Domains,
        Preset::Styles,
        Preset::Multitask,
        Preset::Continuous,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Domains => "domains",
            Preset::Styles => "styles",
            Preset::Multitask => "multitask",
            Preset::Continuous => "continuous",
        }
    }

    /// Variant grid of the preset's comparison table.
    pub fn default_variants(self) -> Vec<Variant> {
        match self {
            Preset::Domains => vec![
                Variant::BaselineStratified,
                Variant::Baseline,
                Variant::Film,
                Variant::Me,
                Variant::Sme,
            ],
            Preset::Styles => vec![
                Variant::BaselineStratified,
                Variant::Baseline,
                Variant::Me,
                Variant::Sme,
                Variant::Film,
            ],
            Preset::Multitask => vec![
                Variant::BaselineStratified,
                Variant::Me,
                Variant::Sme,
                Variant::TwoHeads,
            ],
            Preset::Continuous => vec![Variant::Baseline, Variant::Me, Variant::Sme],
        }
    }

    /// Row order of the rendered table, mirroring the comparison tables.
    pub fn row_order(self) -> Vec<&'static str> {
        match self {
            Preset::Domains => vec![
                "baseline-stratified",
                "baseline",
                "film-dummy",
                "film",
                "me",
                "sme-dummy",
                "sme",
            ],
            Preset::Styles => vec![
                "baseline-stratified",
                "baseline",
                "me",
                "sme",
                "film",
                "sme-dummy",
            ],
            Preset::Multitask => vec![
                "baseline-stratified",
                "me",
                "sme-dummy",
                "sme-swap",
                "sme",
                "two-heads",
            ],
            Preset::Continuous => vec!["baseline", "me", "sme"],
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "domains" => Ok(Preset::Domains),
            "styles" => Ok(Preset::Styles),
            "multitask" => Ok(Preset::Multitask),
            "continuous" => Ok(Preset::Continuous),
            other => Err(Error::InvalidConfig(format!(
                "unknown preset {other:?} (expected domains|styles|multitask|continuous)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Metadata-free U-Net with vanilla SE blocks.
    Baseline,
    /// The baseline trained separately on each subset.
    BaselineStratified,
    Me,
    Sme,
    Film,
    /// Parallel two-headed baseline trained on the multilabel subset.
    TwoHeads,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::BaselineStratified => "baseline-stratified",
            Variant::Me => "me",
            Variant::Sme => "sme",
            Variant::Film => "film",
            Variant::TwoHeads => "two-heads",
        }
    }

    pub fn allowed_for(self, preset: Preset) -> bool {
        match self {
            Variant::TwoHeads => preset == Preset::Multitask,
            Variant::BaselineStratified => preset != Preset::Continuous,
            _ => true,
        }
    }

    fn conditioning(self) -> ConditioningKind {
        match self {
            Variant::Baseline | Variant::BaselineStratified => ConditioningKind::Se,
            Variant::Me => ConditioningKind::Me,
            Variant::Sme => ConditioningKind::Sme,
            Variant::Film => ConditioningKind::Film,
            Variant::TwoHeads => ConditioningKind::None,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "baseline-stratified" => Ok(Variant::BaselineStratified),
            "me" => Ok(Variant::Me),
            "sme" => Ok(Variant::Sme),
            "film" => Ok(Variant::Film),
            "two-heads" => Ok(Variant::TwoHeads),
            other => Err(Error::InvalidConfig(format!(
                "unknown variant {other:?}"
            ))),
        }
    }
}

/// Desk-scale knobs for one preset; every field is echoed into run
/// configs so results are attributable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PresetSpec {
    pub image_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub styles_count: usize,
    pub per_style: (usize, usize, usize),
    pub blobs: (usize, usize, usize),
    pub nuclei: (usize, usize, usize),
    pub anomaly: (usize, usize, usize),
    pub multilabel_train: usize,
    pub continuous: (usize, usize, usize),
    pub fine_tolerance: f64,
    pub coarse_tolerance: f64,
}

impl PresetSpec {
    pub fn for_preset(preset: Preset) -> Self {
        let base = PresetSpec {
            image_size: 40,
            epochs: 20,
            batch_size: 8,
            styles_count: 7,
            per_style: (48, 12, 12),
            blobs: (144, 36, 36),
            nuclei: (400, 48, 72),
            anomaly: (48, 16, 24),
            multilabel_train: 48,
            continuous: (240, 48, 48),
            fine_tolerance: 2.0,
            coarse_tolerance: 3.5,
        };
        match preset {
            Preset::Domains => base,
            Preset::Styles => PresetSpec {
                epochs: 18,
                ..base
            },
            Preset::Multitask => PresetSpec {
                epochs: 24,
                ..base
            },
            Preset::Continuous => PresetSpec {
                epochs: 16,
                ..base
            },
        }
    }

    fn counts(of: (usize, usize, usize)) -> SplitCounts {
        SplitCounts::new(of.0, of.1, of.2)
    }
}

/// Generate the preset's dataset for one seed (bit-reproducible).
pub fn generate_dataset(preset: Preset, spec: &PresetSpec, seed: u64) -> Result<Dataset> {
    match preset {
        Preset::Domains => gen_domains(
            spec.styles_count,
            PresetSpec::counts(spec.per_style),
            spec.image_size,
            seed,
        ),
        Preset::Styles => {
            let base = gen_uniform_blobs(PresetSpec::counts(spec.blobs), spec.image_size, seed)?;
            gen_annotation_styles(&base, spec.fine_tolerance, spec.coarse_tolerance, seed)
        }
        Preset::Multitask => gen_multitask(
            MultitaskCounts {
                nuclei: PresetSpec::counts(spec.nuclei),
                anomaly: PresetSpec::counts(spec.anomaly),
                multilabel_train: spec.multilabel_train,
            },
            spec.image_size,
            seed,
        ),
        Preset::Continuous => gen_continuous(
            PresetSpec::counts(spec.continuous),
            spec.image_size,
            seed,
        ),
    }
}

// ---------------------------------------------------------------------------
// Run results
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RowResult {
    pub label: String,
    /// Unweighted mean over samples; absent for stratified rows (the
    /// per-subset models are not comparable as one average).
    pub average: Option<f64>,
    pub subsets: Vec<SubsetScore>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub preset: String,
    pub variant: String,
    pub seed: u64,
    pub spec: PresetSpec,
    pub rows: Vec<RowResult>,
}

/// Metadata sweep on the continuous preset: predicted lesion pixel
/// counts when the same test images are given low vs high size metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SizeProbe {
    pub meta_low: f64,
    pub meta_high: f64,
    pub low_mean_pixels: f64,
    pub high_mean_pixels: f64,
    /// `(high - low) / max(low, 1)`.
    pub rel_increase: f64,
    pub n: usize,
}

fn model_seed(seed: u64, label: &str) -> u64 {
    // FNV-1a over the label, mixed with the run seed.
    let mut hash = 0xcbf29ce484222325u64;
    for b in label.as_bytes() {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash ^ seed
}

fn build_model(
    kind: ConditioningKind,
    dataset: &Dataset,
    seed: u64,
    label: &str,
) -> Result<ConditionedUNet<f32>> {
    let cfg = UNetConfig {
        conditioning: kind,
        meta_dim: if kind.uses_metadata() {
            dataset.schema.total_dim()
        } else {
            0
        },
        out_channels: dataset.mask_channels,
        ..UNetConfig::default()
    };
    ConditionedUNet::build(cfg, &mut ChaCha8Rng::seed_from_u64(model_seed(seed, label)))
}

fn train_cfg(spec: &PresetSpec, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: spec.epochs,
        batch_size: spec.batch_size,
        seed,
        ..TrainConfig::default()
    }
}

/// Restrict a dataset to one subset tag across all splits.
fn filter_subset(dataset: &Dataset, subset: &str) -> Dataset {
    Dataset {
        generator: dataset.generator.clone(),
        schema: dataset.schema.clone(),
        mask_channels: dataset.mask_channels,
        samples: dataset
            .samples
            .iter()
            .filter(|s| s.subset == subset)
            .cloned()
            .collect(),
    }
}

/// Assemble the multilabel subset into two-channel samples
/// (channel 0: nuclei, channel 1: anomaly).
fn paired_dataset(dataset: &Dataset) -> Result<Dataset> {
    let mut by_key: BTreeMap<(Split, u64), Vec<&Sample>> = BTreeMap::new();
    for s in dataset.samples.iter().filter(|s| s.multilabel) {
        by_key.entry((s.split, s.image_key)).or_default().push(s);
    }
    let mut samples = Vec::new();
    for ((split, key), pair) in by_key {
        if pair.len() != 2 {
            return Err(Error::Dataset(format!(
                "multilabel image {key} has {} views, expected 2",
                pair.len()
            )));
        }
        let (nuclei, anomaly) = if pair[0].subset == "nuclei" {
            (pair[0], pair[1])
        } else {
            (pair[1], pair[0])
        };
        let (h, w) = (nuclei.image.shape()[1], nuclei.image.shape()[2]);
        let mut mask = Tensor::zeros(&[2, h, w]);
        mask.data_mut()[..h * w].copy_from_slice(nuclei.mask.data());
        mask.data_mut()[h * w..].copy_from_slice(anomaly.mask.data());
        samples.push(Sample {
            id: format!("{}-pair-{key:04}", split.as_str()),
            split,
            subset: "pair".into(),
            record: nuclei.record.clone(),
            multilabel: true,
            image_key: key,
            image: nuclei.image.clone(),
            mask,
        });
    }
    Ok(Dataset {
        generator: dataset.generator.clone(),
        schema: dataset.schema.clone(),
        mask_channels: 2,
        samples,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn report_row(label: &str, report: &EvalReport) -> RowResult {
    RowResult {
        label: label.to_string(),
        average: Some(report.average),
        subsets: report.subsets.clone(),
    }
}

/// Evaluation modes shown in the preset's table for a variant.
fn eval_modes(preset: Preset, variant: Variant) -> Vec<(String, EvalMode)> {
    let label = variant.as_str();
    let mut modes = vec![(label.to_string(), EvalMode::Correct)];
    match (preset, variant) {
        (Preset::Domains, Variant::Film) | (Preset::Domains, Variant::Sme) => {
            modes.push((format!("{label}-dummy"), EvalMode::Dummy));
        }
        (Preset::Styles, Variant::Sme) => {
            modes.push((format!("{label}-dummy"), EvalMode::Dummy));
        }
        (Preset::Multitask, Variant::Sme) => {
            modes.push((format!("{label}-dummy"), EvalMode::Dummy));
            let transposition = Permutation {
                field: "task".into(),
                mapping: vec![
                    ("nuclei".into(), "anomaly".into()),
                    ("anomaly".into(), "nuclei".into()),
                ],
            };
            modes.push((format!("{label}-swap"), EvalMode::Swap(transposition)));
        }
        _ => {}
    }
    modes
}

// ---------------------------------------------------------------------------
// Single run
// ---------------------------------------------------------------------------

struct RunOutput {
    summary: RunSummary,
    probe: Option<SizeProbe>,
}

fn save_history(dir: &Path, name: &str, outcome: &TrainOutcome) -> Result<()> {
    write_text(
        &dir.join(format!("history{name}.csv")),
        &crate::training::history_csv(&outcome.history),
    )
}

fn run_one(
    preset: Preset,
    spec: &PresetSpec,
    variant: Variant,
    seed: u64,
    dir: &Path,
) -> Result<RunOutput> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let dataset = generate_dataset(preset, spec, seed)?;
    let cfg = train_cfg(spec, seed);
    let threshold = cfg.threshold;
    let mut rows = Vec::new();
    let mut probe = None;

    match variant {
        Variant::BaselineStratified => {
            // One metadata-free model per subset, each scored on its own
            // test samples.
            let mut subsets = Vec::new();
            for subset in dataset.subsets() {
                let part = filter_subset(&dataset, &subset);
                // A subset is a stratum only if it spans all three splits
                // (annotation styles exist in train only; their stratified
                // model is the accurate-third one).
                if Split::ALL
                    .iter()
                    .any(|&s| part.split(s).next().is_none())
                {
                    continue;
                }
                let label = format!("{}-{subset}", variant.as_str());
                let mut model =
                    build_model(ConditioningKind::Se, &part, seed, &label)?;
                let outcome = train(&mut model, &part, &cfg)?;
                save_history(dir, &format!("-{subset}"), &outcome)?;
                let report = evaluate(&model, &part, Split::Test, &EvalMode::Correct, threshold)?;
                write_text(
                    &dir.join(format!("eval-{subset}.csv")),
                    &report.per_sample_csv(),
                )?;
                subsets.extend(report.subsets);
            }
            rows.push(RowResult {
                label: variant.as_str().to_string(),
                average: None,
                subsets,
            });
        }
        Variant::TwoHeads => {
            let pairs = paired_dataset(&dataset)?;
            let mut model = build_model(ConditioningKind::None, &pairs, seed, variant.as_str())?;
            let outcome = train(&mut model, &pairs, &cfg)?;
            save_history(dir, "", &outcome)?;
            // Score each head on its own task over the paired test set.
            let test: Vec<&Sample> = pairs.split(Split::Test).collect();
            let mut per_sample = Vec::new();
            for chunk in test.chunks(8) {
                let images: Vec<&Tensor<f32>> = chunk.iter().map(|s| &s.image).collect();
                let logits = model.logits(&Tensor::stack(&images)?, None)?;
                let pred = binarize_logits(&logits, threshold);
                for (i, sample) in chunk.iter().enumerate() {
                    let p = pred.index_axis0(i);
                    for (channel, task) in ["nuclei", "anomaly"].iter().enumerate() {
                        let f1 = f1_score(
                            &p.index_axis0(channel),
                            &sample.mask.index_axis0(channel),
                        )?;
                        per_sample.push((format!("{}:{task}", sample.id), task.to_string(), f1));
                    }
                }
            }
            let mut csv = String::from("id,subset,f1\n");
            for (id, task, f1) in &per_sample {
                csv.push_str(&format!("{id},{task},{f1}\n"));
            }
            write_text(&dir.join("eval-two-heads.csv"), &csv)?;
            let subset_score = |task: &str| {
                let scores: Vec<f64> = per_sample
                    .iter()
                    .filter(|(_, t, _)| t == task)
                    .map(|(_, _, f1)| *f1)
                    .collect();
                SubsetScore {
                    subset: task.to_string(),
                    n: scores.len(),
                    f1: scores.iter().sum::<f64>() / scores.len().max(1) as f64,
                }
            };
            let average =
                per_sample.iter().map(|r| r.2).sum::<f64>() / per_sample.len().max(1) as f64;
            rows.push(RowResult {
                label: variant.as_str().to_string(),
                average: Some(average),
                subsets: vec![subset_score("nuclei"), subset_score("anomaly")],
            });
        }
        _ => {
            let mut model = build_model(variant.conditioning(), &dataset, seed, variant.as_str())?;
            let outcome = train(&mut model, &dataset, &cfg)?;
            save_history(dir, "", &outcome)?;
            for (label, mode) in eval_modes(preset, variant) {
                let report = evaluate(&model, &dataset, Split::Test, &mode, threshold)?;
                write_text(
                    &dir.join(format!("eval-{label}.csv")),
                    &report.per_sample_csv(),
                )?;
                rows.push(report_row(&label, &report));
            }
            if preset == Preset::Continuous && variant.conditioning().uses_metadata() {
                let p = size_sweep(&model, &dataset, Split::Test, 0.2, 0.8, threshold)?;
                write_text(
                    &dir.join("probe.toml"),
                    &toml::to_string(&p)
                        .map_err(|e| Error::Report(format!("probe serialization: {e}")))?,
                )?;
                probe = Some(p);
            }
        }
    }

    let summary = RunSummary {
        preset: preset.as_str().to_string(),
        variant: variant.as_str().to_string(),
        seed,
        spec: *spec,
        rows,
    };
    write_text(
        &dir.join("summary.toml"),
        &toml::to_string(&summary)
            .map_err(|e| Error::Report(format!("summary serialization: {e}")))?,
    )?;
    Ok(RunOutput { summary, probe })
}

/// Predict the same test images under two metadata values and compare
/// lesion-channel pixel counts.
pub fn size_sweep(
    model: &ConditionedUNet<f32>,
    dataset: &Dataset,
    split: Split,
    meta_low: f64,
    meta_high: f64,
    threshold: f64,
) -> Result<SizeProbe> {
    let samples: Vec<&Sample> = dataset.split(split).collect();
    let mut low_sum = 0.0;
    let mut high_sum = 0.0;
    for chunk in samples.chunks(8) {
        let images: Vec<&Tensor<f32>> = chunk.iter().map(|s| &s.image).collect();
        let image = Tensor::stack(&images)?;
        for (value, acc) in [(meta_low, &mut low_sum), (meta_high, &mut high_sum)] {
            let meta = Tensor::full(&[chunk.len(), 1], value as f32);
            let pred = binarize_logits(&model.logits(&image, Some(&meta))?, threshold);
            for i in 0..chunk.len() {
                // Lesion channel is channel 1.
                *acc += pred.index_axis0(i).index_axis0(1).count_nonzero() as f64;
            }
        }
    }
    let n = samples.len();
    let low_mean = low_sum / n as f64;
    let high_mean = high_sum / n as f64;
    Ok(SizeProbe {
        meta_low,
        meta_high,
        low_mean_pixels: low_mean,
        high_mean_pixels: high_mean,
        rel_increase: (high_mean - low_mean) / low_mean.max(1.0),
        n,
    })
}

// ---------------------------------------------------------------------------
// Grid runner
// ---------------------------------------------------------------------------

pub fn default_threads() -> usize {
    std::env::var("CONDSEG_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

#[derive(Debug)]
pub struct ExperimentResults {
    pub summaries: Vec<RunSummary>,
    pub probes: Vec<(String, u64, SizeProbe)>,
}

/// Run the `(variant, seed)` grid for a preset, writing run artifacts
/// under `out_dir/<preset>/seed-<seed>/<variant>/` and the aggregate
/// report under `out_dir/<preset>/`.
pub fn run_experiment(
    preset: Preset,
    variants: &[Variant],
    seeds: &[u64],
    spec: &PresetSpec,
    out_dir: &Path,
    threads: usize,
) -> Result<ExperimentResults> {
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("need at least one seed".into()));
    }
    for v in variants {
        if !v.allowed_for(preset) {
            return Err(Error::InvalidConfig(format!(
                "variant {} is not part of the {} preset",
                v.as_str(),
                preset.as_str()
            )));
        }
    }
    let mut tasks: Vec<(Variant, u64)> = Vec::new();
    for &seed in seeds {
        for &variant in variants {
            tasks.push((variant, seed));
        }
    }
    let queue = Mutex::new(tasks);
    let outputs: Mutex<Vec<(Variant, u64, RunOutput)>> = Mutex::new(Vec::new());
    let failure: Mutex<Option<Error>> = Mutex::new(None);
    let workers = threads.max(1).min(seeds.len() * variants.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let task = queue.lock().expect("queue").pop();
                let Some((variant, seed)) = task else { break };
                let dir = out_dir
                    .join(preset.as_str())
                    .join(format!("seed-{seed}"))
                    .join(variant.as_str());
                match run_one(preset, spec, variant, seed, &dir) {
                    Ok(output) => outputs
                        .lock()
                        .expect("outputs")
                        .push((variant, seed, output)),
                    Err(e) => {
                        failure.lock().expect("failure").get_or_insert(e);
                        return;
                    }
                }
            });
        }
    });
    if let Some(e) = failure.into_inner().expect("failure") {
        return Err(e);
    }
    let mut outputs = outputs.into_inner().expect("outputs");
    outputs.sort_by_key(|(v, s, _)| (v.as_str(), *s));
    let mut summaries = Vec::new();
    let mut probes = Vec::new();
    for (variant, seed, output) in outputs {
        if let Some(p) = output.probe {
            probes.push((variant.as_str().to_string(), seed, p));
        }
        summaries.push(output.summary);
    }
    // Render the aggregate table alongside the runs.
    let table = aggregate(preset, &summaries)?;
    write_text(
        &out_dir.join(preset.as_str()).join("report.csv"),
        &render_csv(&table),
    )?;
    write_text(
        &out_dir.join(preset.as_str()).join("report.txt"),
        &render_text(&table),
    )?;
    Ok(ExperimentResults { summaries, probes })
}

// ---------------------------------------------------------------------------
// Aggregation and rendering
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AggregateCell {
    pub mean: f64,
    pub sd: f64,
    pub n_seeds: usize,
}

fn cell(values: &[f64]) -> AggregateCell {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    AggregateCell {
        mean,
        sd: var.sqrt(),
        n_seeds: n,
    }
}

#[derive(Debug, Clone)]
pub struct AggregateRow {
    pub label: String,
    pub average: Option<AggregateCell>,
    pub cells: Vec<Option<AggregateCell>>,
}

#[derive(Debug, Clone)]
pub struct AggregateTable {
    pub preset: String,
    pub seeds: Vec<u64>,
    pub subsets: Vec<String>,
    pub rows: Vec<AggregateRow>,
}

impl AggregateTable {
    pub fn row(&self, label: &str) -> Option<&AggregateRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn cell(&self, label: &str, subset: &str) -> Option<&AggregateCell> {
        let idx = self.subsets.iter().position(|s| s == subset)?;
        self.row(label)?.cells.get(idx)?.as_ref()
    }
}

/// Collapse per-seed run summaries into a mean +- sd table.
pub fn aggregate(preset: Preset, summaries: &[RunSummary]) -> Result<AggregateTable> {
    if summaries.is_empty() {
        return Err(Error::Report("no runs found".into()));
    }
    let mut seeds: Vec<u64> = summaries.iter().map(|s| s.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();

    // Stable subset order: first appearance across rows.
    let mut subsets: Vec<String> = Vec::new();
    for summary in summaries {
        for row in &summary.rows {
            for s in &row.subsets {
                if !subsets.contains(&s.subset) {
                    subsets.push(s.subset.clone());
                }
            }
        }
    }

    // label -> subset -> values over seeds; label -> averages.
    let mut by_label: BTreeMap<String, (Vec<f64>, BTreeMap<String, Vec<f64>>)> = BTreeMap::new();
    for summary in summaries {
        for row in &summary.rows {
            let entry = by_label.entry(row.label.clone()).or_default();
            if let Some(avg) = row.average {
                entry.0.push(avg);
            }
            for s in &row.subsets {
                entry.1.entry(s.subset.clone()).or_default().push(s.f1);
            }
        }
    }

    // Table order from the preset, then any unexpected labels sorted.
    let mut order: Vec<String> = preset
        .row_order()
        .into_iter()
        .filter(|l| by_label.contains_key(*l))
        .map(str::to_string)
        .collect();
    for label in by_label.keys() {
        if !order.contains(label) {
            order.push(label.clone());
        }
    }

    let rows = order
        .into_iter()
        .map(|label| {
            let (averages, per_subset) = &by_label[&label];
            AggregateRow {
                label: label.clone(),
                average: (!averages.is_empty()).then(|| cell(averages)),
                cells: subsets
                    .iter()
                    .map(|s| per_subset.get(s).map(|vals| cell(vals)))
                    .collect(),
            }
        })
        .collect();
    Ok(AggregateTable {
        preset: preset.as_str().to_string(),
        seeds,
        subsets,
        rows,
    })
}

/// CSV rendering: full-precision means and standard deviations.
pub fn render_csv(table: &AggregateTable) -> String {
    let mut out = String::from("label,average_mean,average_sd");
    for s in &table.subsets {
        out.push_str(&format!(",{s}_mean,{s}_sd"));
    }
    out.push('\n');
    for row in &table.rows {
        out.push_str(&row.label);
        match &row.average {
            Some(c) => out.push_str(&format!(",{},{}", c.mean, c.sd)),
            None => out.push_str(",,"),
        }
        for c in &row.cells {
            match c {
                Some(c) => out.push_str(&format!(",{},{}", c.mean, c.sd)),
                None => out.push_str(",,"),
            }
        }
        out.push('\n');
    }
    out
}

/// Aligned-text rendering; the best average cell is flagged with `*`.
pub fn render_text(table: &AggregateTable) -> String {
    let fmt_cell = |c: &Option<AggregateCell>| match c {
        Some(c) => format!("{:.3}+-{:.3}", c.mean, c.sd),
        None => "-".to_string(),
    };
    let best_avg = table
        .rows
        .iter()
        .filter_map(|r| r.average.as_ref().map(|c| (r.label.clone(), c.mean)))
        .max_by(|a, b| a.1.partial_cmp(&b.1).expect("finite means"))
        .map(|(label, _)| label);

    let mut headers = vec!["row".to_string(), "average".to_string()];
    headers.extend(table.subsets.iter().cloned());
    let mut lines: Vec<Vec<String>> = vec![headers];
    for row in &table.rows {
        let mut line = vec![row.label.clone()];
        let marker = if best_avg.as_deref() == Some(&row.label) {
            " *"
        } else {
            ""
        };
        line.push(format!("{}{marker}", fmt_cell(&row.average)));
        for c in &row.cells {
            line.push(fmt_cell(c));
        }
        lines.push(line);
    }
    let cols = lines[0].len();
    let widths: Vec<usize> = (0..cols)
        .map(|c| lines.iter().map(|l| l[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = format!(
        "preset: {} (seeds: {})\n",
        table.preset,
        table
            .seeds
            .iter()
            .map(u64::to_string)
            .collect::<Vec<_>>()
            .join(",")
    );
    for (i, line) in lines.iter().enumerate() {
        let rendered: Vec<String> = line
            .iter()
            .zip(&widths)
            .map(|(cell, w)| format!("{cell:<w$}"))
            .collect();
        out.push_str(rendered.join(" | ").trim_end());
        out.push('\n');
        if i == 0 {
            let total: usize = widths.iter().sum::<usize>() + 3 * (cols - 1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Report re-rendering from disk
// ---------------------------------------------------------------------------

/// Load every run summary under `out_dir/<preset>/seed-*/<variant>/`.
pub fn load_summaries(out_dir: &Path, preset: Preset) -> Result<Vec<RunSummary>> {
    let preset_dir = out_dir.join(preset.as_str());
    let mut summaries = Vec::new();
    let mut seed_dirs: Vec<PathBuf> = match std::fs::read_dir(&preset_dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_dir())
            .collect(),
        Err(_) => return Ok(summaries),
    };
    seed_dirs.sort();
    for seed_dir in seed_dirs {
        let mut variant_dirs: Vec<PathBuf> = std::fs::read_dir(&seed_dir)
            .map_err(|e| Error::io(&seed_dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_dir())
            .collect();
        variant_dirs.sort();
        for dir in variant_dirs {
            let path = dir.join("summary.toml");
            if !path.exists() {
                continue;
            }
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let summary: RunSummary = toml::from_str(&text).map_err(|e| Error::CorruptFile {
                path: path.clone(),
                detail: e.to_string(),
            })?;
            summaries.push(summary);
        }
    }
    Ok(summaries)
}

/// Re-render reports for every preset found under `out_dir`. Returns the
/// concatenated text rendering; errors if no runs exist at all.
pub fn report(out_dir: &Path) -> Result<String> {
    let mut combined = String::new();
    for preset in Preset::ALL {
        let summaries = load_summaries(out_dir, preset)?;
        if summaries.is_empty() {
            continue;
        }
        let table = aggregate(preset, &summaries)?;
        write_text(
            &out_dir.join(preset.as_str()).join("report.csv"),
            &render_csv(&table),
        )?;
        let text = render_text(&table);
        write_text(&out_dir.join(preset.as_str()).join("report.txt"), &text)?;
        combined.push_str(&text);
        combined.push('\n');
    }
    if combined.is_empty() {
        return Err(Error::Report(format!(
            "no runs found under {}",
            out_dir.display()
        )));
    }
    Ok(combined)
}
