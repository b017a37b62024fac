//! A small scripted corpus for running the whole pipeline offline.
//!
//! Ten test items, a five-demonstration store and a script keyed by
//! request tag. Several items are engineered so the methods disagree:
//!
//! - [`DIVERGENT_ITEM`]: five of eight CoTs argue the wrong label, but every
//!   revision concludes the gold one, so voting and CAPITAL differ.
//! - [`WEIGHTING_ITEM`]: clusters of six and two CoTs whose revisions lean
//!   opposite ways; dropping the mass weighting flips the answer.
//! - [`KMEANS_ITEM`]: a seven-CoT cluster with a split stage-2 vote next to
//!   a one-CoT outlier that settles it.
//! - [`GOLDEN_ITEM`]: masses 0.25 / 0.75 with known stage-2 frequencies.
//! - [`HARD_ITEM`]: every method answers wrong.
//!
//! Every `{id}/revise/{i}` entry exists for `i` in `1..=A`, so the answers
//! depend only on which group a representative CoT belongs to.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::backend::Script;
use crate::config::{BackendKind, BackendSettings, RunConfig};
use crate::estimator::{cot_tag, icl_tag, revision_tag};
use crate::eval::{write_dataset_jsonl, DatasetItem, Slice};
use crate::model::{
    AspectTerm, ChainOfThought, Demonstration, LabelScheme, PipelineConfig, Polarity, Sentence,
};
use crate::retrieval::save_store_jsonl;
use Polarity::{Negative as Neg, Neutral as Neu, Positive as Pos};

pub const DIVERGENT_ITEM: &str = "rest-07";
pub const WEIGHTING_ITEM: &str = "lap-03";
pub const KMEANS_ITEM: &str = "rest-12";
pub const GOLDEN_ITEM: &str = "lap-09";
pub const HARD_ITEM: &str = "rest-15";

/// One group of near-identical stage-1 CoTs.
struct Group {
    size: usize,
    reasoning: &'static str,
    concludes: Polarity,
    /// Labels of the `N` revision answers; `None` is an unparseable reply.
    revisions: Vec<Option<Polarity>>,
}

struct ItemPlan {
    id: &'static str,
    text: &'static str,
    aspect: &'static str,
    gold: Polarity,
    slice: Slice,
    icl: Polarity,
    groups: Vec<Group>,
}

/// Everything needed to run the scripted corpus.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub config: PipelineConfig,
    pub dataset: Vec<DatasetItem>,
    pub store: Vec<Demonstration>,
    pub script: Script,
}

#[derive(Debug, Clone)]
pub struct CorpusFiles {
    pub dataset: PathBuf,
    pub store: PathBuf,
    pub script: PathBuf,
    pub config: PathBuf,
}

/// Per-item expectations a test can check against.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Expectation {
    pub id: &'static str,
    pub gold: Polarity,
    pub group_sizes: Vec<usize>,
    pub stage1_votes: Vec<(Polarity, usize)>,
    pub group_revisions: Vec<Vec<Option<Polarity>>>,
}

fn cot_text(aspect: &str, reasoning: &str, label: Polarity, variant: usize) -> String {
    format!(
        "Stage 1: the sentence talks about the {aspect}. Stage 2: {reasoning} \
         Stage 3: the sentiment polarity towards the {aspect} is {}. [draft {variant}]",
        label.as_str()
    )
}

fn revision_text(label: Option<Polarity>, k: usize) -> String {
    match label {
        Some(l) => format!(
            "Improved reasoning (reply {k}): weighing what the speaker implies, the answer is {}.",
            l.as_str()
        ),
        None => format!("Improved reasoning (reply {k}): the evidence is unclear, no verdict."),
    }
}

fn votes(labels: &[(Polarity, usize)]) -> Vec<Option<Polarity>> {
    labels.iter().flat_map(|&(l, n)| std::iter::repeat_n(Some(l), n)).collect()
}

fn plans() -> Vec<ItemPlan> {
    let plain = |id, text, aspect, gold, slice, reasoning| ItemPlan {
        id,
        text,
        aspect,
        gold,
        slice,
        icl: gold,
        groups: vec![Group { size: 8, reasoning, concludes: gold, revisions: votes(&[(gold, 5)]) }],
    };
    vec![
        ItemPlan {
            id: DIVERGENT_ITEM,
            text: "The waiter brought the bill before we had even finished our mains.",
            aspect: "waiter",
            gold: Neg,
            slice: Slice::Implicit,
            icl: Pos,
            groups: vec![
                Group {
                    size: 5,
                    reasoning: "a prompt bill means efficient table turnover and attentive staff who keep things moving quickly.",
                    concludes: Pos,
                    revisions: votes(&[(Neg, 5)]),
                },
                Group {
                    size: 3,
                    reasoning: "being handed the check mid-meal implies the guests were rushed out, which reflects badly on service.",
                    concludes: Neg,
                    revisions: votes(&[(Neg, 5)]),
                },
            ],
        },
        ItemPlan {
            id: WEIGHTING_ITEM,
            text: "I had to carry the charger to every single lecture.",
            aspect: "battery",
            gold: Neg,
            slice: Slice::Implicit,
            icl: Neg,
            groups: vec![
                Group {
                    size: 6,
                    reasoning: "needing the charger all day means the battery cannot last through a few hours of use.",
                    concludes: Neg,
                    revisions: votes(&[(Neg, 4), (Pos, 1)]),
                },
                Group {
                    size: 2,
                    reasoning: "the laptop is light enough that carrying its charger everywhere is no burden at all.",
                    concludes: Pos,
                    revisions: votes(&[(Pos, 5)]),
                },
            ],
        },
        ItemPlan {
            id: KMEANS_ITEM,
            text: "We waited forty minutes and the kitchen still got the order wrong.",
            aspect: "kitchen",
            gold: Neg,
            slice: Slice::Explicit,
            icl: Neg,
            groups: vec![
                Group {
                    size: 7,
                    reasoning: "a long wait followed by a wrong order suggests the kitchen is overwhelmed by demand.",
                    concludes: Neg,
                    revisions: votes(&[(Pos, 2), (Neg, 2), (Neu, 1)]),
                },
                Group {
                    size: 1,
                    reasoning: "mistakes after forty minutes are plain incompetence; nobody checked the ticket.",
                    concludes: Neg,
                    revisions: votes(&[(Neg, 5)]),
                },
            ],
        },
        ItemPlan {
            id: GOLDEN_ITEM,
            text: "The keyboard is fine, but the trackpad registers clicks I never made.",
            aspect: "trackpad",
            gold: Neg,
            slice: Slice::Explicit,
            icl: Neg,
            groups: vec![
                Group {
                    size: 2,
                    reasoning: "the keyboard praise sets a generally satisfied tone for the whole machine.",
                    concludes: Pos,
                    revisions: votes(&[(Pos, 3), (Neg, 1), (Neu, 1)]),
                },
                Group {
                    size: 6,
                    reasoning: "phantom clicks make the trackpad unreliable, which is a clear defect the writer resents.",
                    concludes: Neg,
                    revisions: votes(&[(Pos, 1), (Neg, 3), (Neu, 1)]),
                },
            ],
        },
        ItemPlan {
            id: HARD_ITEM,
            text: "They finally fixed the heating, so the terrace is usable in winter now.",
            aspect: "terrace",
            gold: Pos,
            slice: Slice::Implicit,
            icl: Neu,
            groups: vec![Group {
                size: 8,
                reasoning: "the sentence only reports a repair and states a fact about the seasons.",
                concludes: Neu,
                revisions: votes(&[(Neu, 5)]),
            }],
        },
        plain(
            "lap-01",
            "The screen is bright and the colours are gorgeous.",
            "screen",
            Pos,
            Slice::Explicit,
            "bright, gorgeous colours are openly enthusiastic words about the display.",
        ),
        plain(
            "lap-05",
            "The fan spins up loudly the moment I open a browser tab.",
            "fan",
            Neg,
            Slice::Implicit,
            "a fan that roars under light load is noisy and distracting for the owner.",
        ),
        plain(
            "rest-02",
            "The menu lists three vegetarian dishes.",
            "menu",
            Neu,
            Slice::Explicit,
            "counting dishes is descriptive and carries no evaluation of the menu.",
        ),
        plain(
            "rest-04",
            "My glass of water was refilled before I noticed it was empty.",
            "service",
            Pos,
            Slice::Implicit,
            "anticipating needs without being asked shows attentive, caring staff.",
        ),
        ItemPlan {
            id: "lap-11",
            text: "It ships with a USB-C port on the left side.",
            aspect: "port",
            gold: Neu,
            slice: Slice::Explicit,
            icl: Neu,
            groups: vec![Group {
                size: 8,
                reasoning: "the placement of a port is reported without any judgement.",
                concludes: Neu,
                revisions: vec![Some(Neu), Some(Neu), None, Some(Neu), Some(Neu)],
            }],
        },
    ]
}

/// `(id, sentence, aspect, gold, wrong conclusion, wrong reasoning, correct reasoning)`.
const DEMOS: &[(&str, &str, &str, Polarity, Polarity, &str, &str)] = &[
    (
        "train-01",
        "The staff cleared our plates while we were still eating.",
        "staff",
        Neg,
        Pos,
        "quick clearing means efficient, attentive staff.",
        "removing plates mid-meal rushes guests and is rude.",
    ),
    (
        "train-02",
        "The battery took me from breakfast to a late dinner.",
        "battery",
        Pos,
        Neu,
        "the sentence only states a time span.",
        "lasting a whole day is exactly what a user hopes for.",
    ),
    (
        "train-03",
        "The soup arrived at room temperature.",
        "soup",
        Neg,
        Neu,
        "the temperature is reported as a plain fact.",
        "soup is meant to be hot, so lukewarm soup is a complaint.",
    ),
    (
        "train-04",
        "The laptop comes in silver and grey.",
        "laptop",
        Neu,
        Pos,
        "having colour choices is a nice bonus.",
        "listing colours describes the product without judging it.",
    ),
    (
        "train-05",
        "I have to restart the router every morning.",
        "router",
        Neg,
        Neu,
        "a morning restart is a routine habit.",
        "a daily forced restart signals an unreliable device.",
    ),
];

impl SyntheticCorpus {
    /// A = 8, K = 2, N = 5, R = 1, L = 2, three classes.
    pub fn config() -> PipelineConfig {
        PipelineConfig {
            demos_r: 1,
            cot_samples_a: 8,
            clusters_k: 2,
            revision_queries_n: 5,
            revision_demos_l: 2,
            rng_seed: 7,
            ..PipelineConfig::default()
        }
    }

    pub fn build() -> Self {
        let scheme = LabelScheme::ThreeClass;
        let config = Self::config();
        let mut script = Script::default();
        let mut dataset = Vec::new();
        for plan in plans() {
            let mut cots = Vec::new();
            let mut revisions = Vec::new();
            for group in &plan.groups {
                for _ in 0..group.size {
                    cots.push(cot_text(plan.aspect, group.reasoning, group.concludes, cots.len() + 1));
                    revisions.push(&group.revisions);
                }
            }
            assert_eq!(cots.len(), config.cot_samples_a, "{} must have A CoTs", plan.id);
            for (i, answers) in revisions.iter().enumerate() {
                let texts = answers.iter().enumerate().map(|(k, &l)| revision_text(l, k + 1)).collect();
                script.insert(revision_tag(plan.id, i + 1), texts);
            }
            script.insert(cot_tag(plan.id), cots);
            script.insert(icl_tag(plan.id), vec![format!("The sentiment is {}.", plan.icl.as_str())]);
            dataset.push(DatasetItem {
                id: plan.id.to_string(),
                sentence: Sentence::new(plan.id, plan.text).expect("non-empty"),
                aspect: AspectTerm::new(plan.aspect).expect("non-empty"),
                gold: plan.gold,
                slice: plan.slice,
            });
        }
        let store = DEMOS
            .iter()
            .map(|&(id, text, aspect, gold, wrong, wrong_reason, right_reason)| {
                Demonstration::new(
                    Sentence::new(id, text).expect("non-empty"),
                    AspectTerm::new(aspect).expect("non-empty"),
                    gold,
                    ChainOfThought::parsed(cot_text(aspect, wrong_reason, wrong, 1), 1, scheme),
                    ChainOfThought::parsed(cot_text(aspect, right_reason, gold, 2), 2, scheme),
                )
                .expect("demonstration invariants hold")
            })
            .collect();
        Self {
            config,
            dataset,
            store,
            script,
        }
    }

    /// Writes `dataset.jsonl`, `store.jsonl`, `script.json` and
    /// `config.toml` (scripted backend, paths relative to `dir`).
    pub fn write_to(&self, dir: &Path) -> std::io::Result<CorpusFiles> {
        fs::create_dir_all(dir)?;
        let files = CorpusFiles {
            dataset: dir.join("dataset.jsonl"),
            store: dir.join("store.jsonl"),
            script: dir.join("script.json"),
            config: dir.join("config.toml"),
        };
        write_dataset_jsonl(&self.dataset, &files.dataset)?;
        save_store_jsonl(&self.store, &files.store).map_err(std::io::Error::other)?;
        self.script.save(&files.script)?;
        let config = RunConfig {
            pipeline: self.config.clone(),
            backend: BackendSettings {
                kind: BackendKind::Scripted,
                script: Some("script.json".into()),
                ..BackendSettings::default()
            },
            dataset: Some("dataset.jsonl".into()),
            store: Some("store.jsonl".into()),
            parallelism: 2,
            ..RunConfig::default()
        };
        fs::write(&files.config, config.to_toml())?;
        Ok(files)
    }

    /// The engineered structure of every item.
    pub fn expectations() -> Vec<Expectation> {
        plans()
            .into_iter()
            .map(|plan| {
                let mut tally: Vec<(Polarity, usize)> = Vec::new();
                for g in &plan.groups {
                    match tally.iter_mut().find(|(l, _)| *l == g.concludes) {
                        Some(entry) => entry.1 += g.size,
                        None => tally.push((g.concludes, g.size)),
                    }
                }
                Expectation {
                    id: plan.id,
                    gold: plan.gold,
                    group_sizes: plan.groups.iter().map(|g| g.size).collect(),
                    stage1_votes: tally,
                    group_revisions: plan.groups.iter().map(|g| g.revisions.clone()).collect(),
                }
            })
            .collect()
    }
}
