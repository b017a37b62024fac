//! Dataset loading, batch evaluation and macro-F1 reports.
//!
//! Datasets are JSONL with one `{id, text, aspect, label, slice}` object
//! per line, `slice` being `explicit` or `implicit`. Reports carry metrics
//! for all items and for the implicit (ISA) slice, the per-item records
//! they were computed from, and an echo of the configuration.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::backend::{GenerationBackend, GenerationRequest};
use crate::estimator::{CausalEstimate, Pipeline, PipelineError};
use crate::model::{
    normalize_label, Ablation, AspectTerm, ChainOfThought, Demonstration, LabelScheme, Polarity,
    Sentence,
};
use crate::prompting::Prompter;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("line {line}: duplicate id {id:?}")]
    DuplicateId { line: usize, id: String },
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("{predictions} predictions but {golds} gold labels")]
    LengthMismatch { predictions: usize, golds: usize },
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("could not build worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slice {
    Explicit,
    Implicit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetItem {
    pub id: String,
    pub sentence: Sentence,
    pub aspect: AspectTerm,
    pub gold: Polarity,
    pub slice: Slice,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetLine {
    id: String,
    text: String,
    aspect: String,
    label: String,
    slice: Slice,
}

pub fn parse_dataset(reader: impl BufRead, scheme: LabelScheme) -> Result<Vec<DatasetItem>, DatasetError> {
    let mut items = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let number = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| DatasetError::MalformedLine { line: number, reason };
        let raw: DatasetLine = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let gold = normalize_label(&raw.label, scheme).map_err(|_| malformed(format!("unknown label {:?}", raw.label)))?;
        let sentence = Sentence::new(raw.id.clone(), raw.text).map_err(|e| malformed(e.to_string()))?;
        let aspect = AspectTerm::new(raw.aspect).map_err(|e| malformed(e.to_string()))?;
        if !seen.insert(raw.id.clone()) {
            return Err(DatasetError::DuplicateId { line: number, id: raw.id });
        }
        items.push(DatasetItem {
            id: raw.id,
            sentence,
            aspect,
            gold,
            slice: raw.slice,
        });
    }
    Ok(items)
}

pub fn load_dataset(path: &Path, scheme: LabelScheme) -> Result<Vec<DatasetItem>, DatasetError> {
    parse_dataset(BufReader::new(fs::File::open(path)?), scheme)
}

pub fn write_dataset_jsonl(items: &[DatasetItem], path: &Path) -> std::io::Result<()> {
    let mut out = String::new();
    for item in items {
        let line = DatasetLine {
            id: item.id.clone(),
            text: item.sentence.text().to_string(),
            aspect: item.aspect.surface().to_string(),
            label: item.gold.as_str().to_string(),
            slice: item.slice,
        };
        out.push_str(&serde_json::to_string(&line).map_err(std::io::Error::other)?);
        out.push('\n');
    }
    fs::write(path, out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Metrics for one slice. `confusion[gold][predicted]` counts items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub items: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_label: BTreeMap<Polarity, LabelMetrics>,
    pub confusion: BTreeMap<Polarity, BTreeMap<Polarity, usize>>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn slice_metrics(
    predictions: &[Polarity],
    golds: &[Polarity],
    labels: &[Polarity],
) -> Result<SliceMetrics, MetricError> {
    if predictions.len() != golds.len() {
        return Err(MetricError::LengthMismatch {
            predictions: predictions.len(),
            golds: golds.len(),
        });
    }
    let mut confusion: BTreeMap<Polarity, BTreeMap<Polarity, usize>> = labels
        .iter()
        .map(|&g| (g, labels.iter().map(|&p| (p, 0)).collect()))
        .collect();
    for (&p, &g) in predictions.iter().zip(golds) {
        *confusion.entry(g).or_default().entry(p).or_default() += 1;
    }
    let per_label: BTreeMap<Polarity, LabelMetrics> = labels
        .iter()
        .map(|&l| {
            let tp = predictions.iter().zip(golds).filter(|(p, g)| **p == l && **g == l).count();
            let predicted = predictions.iter().filter(|p| **p == l).count();
            let support = golds.iter().filter(|g| **g == l).count();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            (l, LabelMetrics { precision, recall, f1, support })
        })
        .collect();
    let macro_f1 = if labels.is_empty() {
        0.0
    } else {
        per_label.values().map(|m| m.f1).sum::<f64>() / labels.len() as f64
    };
    let correct = predictions.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(SliceMetrics {
        items: golds.len(),
        accuracy: ratio(correct, golds.len()),
        macro_f1,
        per_label,
        confusion,
    })
}

/// Unweighted mean of per-label F1 over `labels`.
pub fn macro_f1(predictions: &[Polarity], golds: &[Polarity], labels: &[Polarity]) -> Result<f64, MetricError> {
    Ok(slice_metrics(predictions, golds, labels)?.macro_f1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Capital,
    CotSc,
    Icl,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Capital => "capital",
            Method::CotSc => "cot-sc",
            Method::Icl => "icl",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "capital" => Ok(Method::Capital),
            "cot-sc" => Ok(Method::CotSc),
            "icl" => Ok(Method::Icl),
            other => Err(format!("unknown method {other:?} (expected capital, cot-sc or icl)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemSeeds {
    pub run: u64,
    pub kmeans: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub id: String,
    pub slice: Slice,
    pub gold: Polarity,
    pub predicted: Option<Polarity>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Stage-1 answer counts, for the voting baseline.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub votes: Option<BTreeMap<Polarity, usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub estimate: Option<CausalEstimate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<ItemSeeds>,
    pub ablations: Vec<Ablation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: Method,
    /// Always `macro-f1`.
    pub metric: String,
    pub config: serde_json::Value,
    pub all: SliceMetrics,
    /// Absent when the dataset has no implicit items.
    pub isa: Option<SliceMetrics>,
    pub failed: usize,
    pub incomplete: bool,
    pub items: Vec<ItemRecord>,
}

/// Metrics over the successfully evaluated records, for all items and for
/// the implicit slice.
pub fn metrics_from_records(
    records: &[ItemRecord],
    labels: &[Polarity],
) -> (SliceMetrics, Option<SliceMetrics>) {
    let pairs = |only: Option<Slice>| -> (Vec<Polarity>, Vec<Polarity>) {
        records
            .iter()
            .filter(|r| only.is_none_or(|s| r.slice == s))
            .filter_map(|r| r.predicted.map(|p| (p, r.gold)))
            .unzip()
    };
    let (p, g) = pairs(None);
    let all = slice_metrics(&p, &g, labels).expect("paired");
    let isa = if records.iter().any(|r| r.slice == Slice::Implicit) {
        let (p, g) = pairs(Some(Slice::Implicit));
        Some(slice_metrics(&p, &g, labels).expect("paired"))
    } else {
        None
    };
    (all, isa)
}

impl EvalReport {
    /// Recomputes the headline metrics from the per-item records.
    pub fn recompute(&self, labels: &[Polarity]) -> (SliceMetrics, Option<SliceMetrics>) {
        metrics_from_records(&self.items, labels)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Human-readable summary table.
    pub fn text_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "method: {}  metric: {}", self.method.as_str(), self.metric);
        if self.incomplete {
            let _ = writeln!(out, "INCOMPLETE: run was interrupted");
        }
        let _ = writeln!(out, "{:<10} {:>6} {:>9} {:>9}", "slice", "items", "macro-f1", "accuracy");
        let mut row = |name: &str, m: Option<&SliceMetrics>| match m {
            Some(m) => {
                let _ = writeln!(out, "{:<10} {:>6} {:>9.4} {:>9.4}", name, m.items, m.macro_f1, m.accuracy);
            }
            None => {
                let _ = writeln!(out, "{:<10} {:>6} {:>9} {:>9}", name, 0, "n/a", "n/a");
            }
        };
        row("ALL", Some(&self.all));
        row("ISA", self.isa.as_ref());
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<10} {:>9} {:>9} {:>9} {:>8}", "label", "precision", "recall", "f1", "support");
        for (label, m) in &self.all.per_label {
            let _ = writeln!(
                out,
                "{:<10} {:>9.4} {:>9.4} {:>9.4} {:>8}",
                label.as_str(),
                m.precision,
                m.recall,
                m.f1,
                m.support
            );
        }
        if self.failed > 0 {
            let _ = writeln!(out, "\nfailed items: {}", self.failed);
        }
        out
    }
}

/// Progress callback: `(done, total, item id)`.
pub type ProgressFn = dyn Fn(usize, usize, &str) + Sync;

/// Knobs that are not part of the pipeline configuration.
pub struct EvalOptions<'a> {
    /// Upper bound on items in flight.
    pub parallelism: usize,
    /// When set, items not yet started are skipped and the report is
    /// marked incomplete.
    pub cancel: Option<&'a AtomicBool>,
    /// Called after each item.
    pub progress: Option<&'a ProgressFn>,
    pub config_echo: serde_json::Value,
}

impl Default for EvalOptions<'_> {
    fn default() -> Self {
        Self {
            parallelism: 1,
            cancel: None,
            progress: None,
            config_echo: serde_json::Value::Null,
        }
    }
}

fn evaluate_item(pipeline: &Pipeline<'_>, method: Method, item: &DatasetItem) -> ItemRecord {
    let config = pipeline.config;
    let mut record = ItemRecord {
        id: item.id.clone(),
        slice: item.slice,
        gold: item.gold,
        predicted: None,
        error: None,
        votes: None,
        estimate: None,
        seeds: None,
        ablations: config.ablations.clone(),
    };
    let outcome: Result<(), PipelineError> = match method {
        Method::Capital => pipeline.run_capital(&item.sentence, &item.aspect).map(|run| {
            record.predicted = Some(run.estimate.chosen);
            record.seeds = Some(ItemSeeds {
                run: config.rng_seed,
                kmeans: run.kmeans_seed,
            });
            record.estimate = Some(run.estimate);
        }),
        Method::CotSc => pipeline.run_cot_sc(&item.sentence, &item.aspect).map(|(chosen, cots)| {
            let mut votes: BTreeMap<Polarity, usize> = BTreeMap::new();
            for label in cots.iter().filter_map(|c| c.parsed_answer) {
                *votes.entry(label).or_default() += 1;
            }
            record.predicted = Some(chosen);
            record.votes = Some(votes);
        }),
        Method::Icl => pipeline
            .run_icl(&item.sentence, &item.aspect)
            .map(|chosen| record.predicted = Some(chosen)),
    };
    if let Err(e) = outcome {
        record.error = Some(e.to_string());
    }
    record
}

/// Evaluates every item with at most `options.parallelism` in flight.
/// Per-item failures are recorded and the run continues.
pub fn run_evaluation(
    dataset: &[DatasetItem],
    method: Method,
    pipeline: &Pipeline<'_>,
    options: &EvalOptions<'_>,
) -> Result<EvalReport, EvalError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.parallelism.max(1))
        .build()
        .map_err(|e| EvalError::Pool(e.to_string()))?;
    let done = std::sync::atomic::AtomicUsize::new(0);
    let cancelled = || options.cancel.is_some_and(|c| c.load(Ordering::SeqCst));
    let results: Vec<Option<ItemRecord>> = pool.install(|| {
        dataset
            .par_iter()
            .map(|item| {
                if cancelled() {
                    return None;
                }
                let record = evaluate_item(pipeline, method, item);
                let n = done.fetch_add(1, Ordering::SeqCst) + 1;
                if let Some(progress) = options.progress {
                    progress(n, dataset.len(), &item.id);
                }
                Some(record)
            })
            .collect()
    });
    let incomplete = results.iter().any(Option::is_none);
    let items: Vec<ItemRecord> = results.into_iter().flatten().collect();
    let labels = pipeline.config.label_scheme.labels();
    let (all, isa) = metrics_from_records(&items, labels);
    Ok(EvalReport {
        method,
        metric: "macro-f1".into(),
        config: options.config_echo.clone(),
        all,
        isa,
        failed: items.iter().filter(|r| r.error.is_some()).count(),
        incomplete,
        items,
    })
}

pub fn train_tag(item_id: &str) -> String {
    format!("{item_id}/train")
}

/// Outcome counts of [`build_training_store`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct BuildSummary {
    pub items: usize,
    pub kept: usize,
    pub dropped_no_wrong: usize,
    pub dropped_no_correct: usize,
    pub failed: usize,
    pub backend_calls: u64,
}

enum TrainOutcome {
    Kept(Box<Demonstration>),
    NoWrong,
    NoCorrect,
    Failed(String),
}

/// Samples `samples` CoTs per training item with the zero-shot stage-1
/// prompt and pairs the first CoT that parses to a wrong label with the
/// first that parses to the gold one. Items lacking either are dropped;
/// backend failures are logged and skipped.
pub fn build_training_store(
    items: &[DatasetItem],
    prompter: &Prompter,
    backend: &dyn GenerationBackend,
    samples: usize,
    temperature: f64,
    max_tokens: u32,
) -> (Vec<Demonstration>, BuildSummary) {
    let scheme = prompter.scheme();
    let calls_before = backend.stats().calls;
    let outcomes: Vec<TrainOutcome> = items
        .par_iter()
        .map(|item| {
            let request = GenerationRequest {
                prompt: prompter.assemble_initial_prompt(&[], &item.sentence, &item.aspect),
                temperature,
                count: samples,
                max_tokens,
                request_tag: train_tag(&item.id),
            };
            let completions = match backend.sample_completions(&request) {
                Ok(c) => c,
                Err(e) => return TrainOutcome::Failed(e.to_string()),
            };
            let cots: Vec<ChainOfThought> = completions
                .into_iter()
                .enumerate()
                .map(|(i, c)| ChainOfThought::parsed(c.text, i + 1, scheme))
                .collect();
            let wrong = cots
                .iter()
                .find(|c| c.parsed_answer.is_some_and(|l| l != item.gold));
            let correct = cots.iter().find(|c| c.parsed_answer == Some(item.gold));
            match (wrong, correct) {
                (None, _) => TrainOutcome::NoWrong,
                (_, None) => TrainOutcome::NoCorrect,
                (Some(w), Some(c)) => {
                    match Demonstration::new(item.sentence.clone(), item.aspect.clone(), item.gold, w.clone(), c.clone()) {
                        Ok(d) => TrainOutcome::Kept(Box::new(d)),
                        Err(e) => TrainOutcome::Failed(e.to_string()),
                    }
                }
            }
        })
        .collect();
    let mut summary = BuildSummary {
        items: items.len(),
        ..BuildSummary::default()
    };
    let mut demos = Vec::new();
    for (item, outcome) in items.iter().zip(outcomes) {
        match outcome {
            TrainOutcome::Kept(d) => {
                summary.kept += 1;
                demos.push(*d);
            }
            TrainOutcome::NoWrong => summary.dropped_no_wrong += 1,
            TrainOutcome::NoCorrect => summary.dropped_no_correct += 1,
            TrainOutcome::Failed(reason) => {
                warn!(item = %item.id, %reason, "skipping training item");
                summary.failed += 1;
            }
        }
    }
    summary.backend_calls = backend.stats().calls - calls_before;
    (demos, summary)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use Polarity::*;

    const THREE: &[Polarity] = &[Positive, Negative, Neutral];

    #[test]
    fn loads_valid_lines() {
        let text = r#"{"id":"a","text":"The soup was cold.","aspect":"soup","label":"negative","slice":"implicit"}
{"id":"b","text":"Great staff.","aspect":"staff","label":"Positive","slice":"explicit"}

{"id":"c","text":"It has a screen.","aspect":"screen","label":"neutral","slice":"implicit"}
"#;
        let items = parse_dataset(text.as_bytes(), LabelScheme::ThreeClass).unwrap();
        assert_eq!(items.len(), 3);
        assert_eq!((items[1].gold, items[1].slice), (Positive, Slice::Explicit));
    }

    #[test]
    fn rejects_unknown_label_and_duplicates() {
        let bad = r#"{"id":"a","text":"x y","aspect":"x","label":"positive","slice":"explicit"}
{"id":"b","text":"x y","aspect":"x","label":"happy","slice":"explicit"}"#;
        match parse_dataset(bad.as_bytes(), LabelScheme::ThreeClass) {
            Err(DatasetError::MalformedLine { line: 2, reason }) => assert!(reason.contains("happy")),
            other => panic!("unexpected {other:?}"),
        }
        let dup = r#"{"id":"a","text":"x y","aspect":"x","label":"positive","slice":"explicit"}
{"id":"a","text":"x z","aspect":"x","label":"negative","slice":"implicit"}"#;
        assert!(matches!(
            parse_dataset(dup.as_bytes(), LabelScheme::ThreeClass),
            Err(DatasetError::DuplicateId { line: 2, .. })
        ));
        let conflict = r#"{"id":"a","text":"x y","aspect":"x","label":"conflict","slice":"explicit"}"#;
        assert!(parse_dataset(conflict.as_bytes(), LabelScheme::ThreeClass).is_err());
        assert!(parse_dataset(conflict.as_bytes(), LabelScheme::FourClass).is_ok());
    }

    #[test]
    fn perfect_predictions_score_one() {
        let g = [Positive, Negative, Neutral, Negative];
        assert_eq!(macro_f1(&g, &g, THREE).unwrap(), 1.0);
    }

    #[test]
    fn symmetric_binary_confusion_gives_half() {
        // One TP, FP, FN and TN per label: P = R = F1 = 1/2 for both.
        let golds = [Positive, Positive, Negative, Negative];
        let preds = [Positive, Negative, Positive, Negative];
        assert_eq!(macro_f1(&preds, &golds, &[Positive, Negative]).unwrap(), 0.5);
    }

    #[test]
    fn constant_prediction_closed_form() {
        // Golds 2 pos, 3 neg, 1 neu, all predicted neg: neg P = 1/2, R = 1,
        // F1 = 2/3; other labels score zero.
        let golds = [Positive, Positive, Negative, Negative, Negative, Neutral];
        let preds = [Negative; 6];
        let m = slice_metrics(&preds, &golds, THREE).unwrap();
        assert!((m.macro_f1 - (2.0 / 3.0) / 3.0).abs() < 1e-15);
        assert_eq!(m.per_label[&Positive].f1, 0.0);
        assert_eq!(m.confusion[&Positive][&Negative], 2);
        assert_eq!(m.confusion.values().flat_map(|r| r.values()).sum::<usize>(), 6);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert_eq!(
            macro_f1(&[Positive], &[], THREE),
            Err(MetricError::LengthMismatch { predictions: 1, golds: 0 })
        );
    }

    fn record(id: usize, slice: Slice, gold: Polarity, predicted: Polarity) -> ItemRecord {
        ItemRecord {
            id: id.to_string(),
            slice,
            gold,
            predicted: Some(predicted),
            error: None,
            votes: None,
            estimate: None,
            seeds: None,
            ablations: Vec::new(),
        }
    }

    #[test]
    fn isa_absent_without_implicit_items() {
        let (_, isa) = metrics_from_records(&[record(0, Slice::Explicit, Positive, Positive)], THREE);
        assert!(isa.is_none());
    }

    fn polarity() -> impl Strategy<Value = Polarity> {
        prop::sample::select(THREE.to_vec())
    }

    proptest! {
        #[test]
        fn macro_f1_ignores_item_order(
            pairs in prop::collection::vec((polarity(), polarity()), 1..40),
            seed in any::<u64>(),
        ) {
            let (p, g): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
            let mut shuffled = pairs.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let (ps, gs): (Vec<_>, Vec<_>) = shuffled.into_iter().unzip();
            prop_assert_eq!(macro_f1(&p, &g, THREE).unwrap(), macro_f1(&ps, &gs, THREE).unwrap());
        }

        #[test]
        fn isa_depends_only_on_implicit_items(
            implicit in prop::collection::vec((polarity(), polarity()), 1..20),
            explicit in prop::collection::vec((polarity(), polarity()), 0..20),
        ) {
            let base: Vec<ItemRecord> = implicit
                .iter()
                .enumerate()
                .map(|(i, &(g, p))| record(i, Slice::Implicit, g, p))
                .collect();
            let mut mixed = base.clone();
            mixed.extend(explicit.iter().enumerate().map(|(i, &(g, p))| record(100 + i, Slice::Explicit, g, p)));
            let (_, isa_base) = metrics_from_records(&base, THREE);
            let (all, isa_mixed) = metrics_from_records(&mixed, THREE);
            prop_assert_eq!(isa_base, isa_mixed);
            prop_assert_eq!(all.confusion.values().flat_map(|r| r.values()).sum::<usize>(), mixed.len());
        }
    }
}
