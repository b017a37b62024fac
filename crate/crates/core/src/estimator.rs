//! Front-door combination of cluster masses and stage-2 answer
//! frequencies, the end-to-end pipeline, and the voting baselines.
//!
//! The score of label `y` is `Σ_k w_k · freq_k(y)` where `w_k` is the
//! cluster mass `|T_k| / A` and `freq_k(y)` is the share of the `N`
//! revision answers for cluster `k` that concluded `y`. Unparseable
//! answers are kept apart as abstentions and never count for any label.

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::backend::{sha256_hex, BackendError, GenerationBackend, GenerationRequest};
use crate::clustering::{cluster_cots, ClusterError};
use crate::encoder::{Encoder, EncoderError};
use crate::model::{
    parse_polarity, Ablation, AspectTerm, ChainOfThought, LabelScheme, PipelineConfig, Polarity,
    Sentence,
};
use crate::prompting::{DemoOrder, PromptText, Prompter};
use crate::retrieval::{take_top, DemoStore, RetrievalError, TopSelection};

/// Relative tolerance under which two scores count as tied.
pub const TIE_TOLERANCE: f64 = 1e-12;
const MASS_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum EstimateError {
    #[error("{masses} masses but {dists} distributions")]
    LengthMismatch { masses: usize, dists: usize },
    #[error("cluster masses sum to {0}, expected 1")]
    MassesNotNormalized(f64),
    #[error("every stage-2 answer in every cluster was unparseable")]
    DegenerateAllAbstain,
    #[error("all {} revision answers were unparseable", .distribution.query_count)]
    AllAbstained { distribution: AnswerDistribution },
    #[error("no CoT carried a parseable answer")]
    NoParsedAnswers,
    #[error("no clusters to combine")]
    Empty,
}

/// Label frequencies over `N` stage-2 answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerDistribution {
    pub counts: BTreeMap<Polarity, usize>,
    pub query_count: usize,
    pub abstain_count: usize,
}

impl AnswerDistribution {
    /// `None` entries are abstentions.
    pub fn from_answers(answers: &[Option<Polarity>], scheme: LabelScheme) -> Self {
        let mut counts: BTreeMap<Polarity, usize> = scheme.labels().iter().map(|&l| (l, 0)).collect();
        let mut abstain_count = 0;
        for answer in answers {
            match answer {
                Some(label) => *counts.entry(*label).or_default() += 1,
                None => abstain_count += 1,
            }
        }
        Self {
            counts,
            query_count: answers.len(),
            abstain_count,
        }
    }

    pub fn freq(&self, label: Polarity) -> f64 {
        if self.query_count == 0 {
            return 0.0;
        }
        self.counts.get(&label).copied().unwrap_or(0) as f64 / self.query_count as f64
    }

    pub fn abstain_fraction(&self) -> f64 {
        if self.query_count == 0 {
            return 0.0;
        }
        self.abstain_count as f64 / self.query_count as f64
    }

    pub fn is_all_abstained(&self) -> bool {
        self.abstain_count == self.query_count
    }

    /// Labels with the highest non-zero count.
    pub fn top_labels(&self) -> Vec<Polarity> {
        let best = self.counts.values().copied().max().unwrap_or(0);
        if best == 0 {
            return Vec::new();
        }
        self.counts
            .iter()
            .filter(|(_, &c)| c == best)
            .map(|(&l, _)| l)
            .collect()
    }
}

/// How the final label was selected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    /// Argmax of mass-weighted scores.
    FrontDoor,
    /// Plain majority over every stage-2 answer.
    MajorityVote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterProvenance {
    pub cluster_id: usize,
    /// `|T_k| / A`, or `1 / K` without clustering.
    pub mass: f64,
    /// Weight actually applied when aggregating.
    pub weight: f64,
    pub size: usize,
    pub representative_index: usize,
    pub distribution: AnswerDistribution,
}

/// Per-label approximation of `P(Y | do(X))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalEstimate {
    pub scores: BTreeMap<Polarity, f64>,
    pub abstain_mass: f64,
    pub provenance: Vec<ClusterProvenance>,
    pub chosen: Polarity,
    pub selection: Selection,
}

/// Order-independent sum: terms are sorted before adding.
fn canonical_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.into_iter().sum()
}

fn is_tied(a: f64, b: f64) -> bool {
    (a - b).abs() <= TIE_TOLERANCE * a.abs().max(b.abs())
}

/// Argmax of `scores`. Ties go to the label whose supporting clusters (those
/// where it is a top answer) carry more weight, then to the fixed order
/// Positive < Negative < Neutral < Conflict.
pub fn choose_label(scores: &BTreeMap<Polarity, f64>, provenance: &[ClusterProvenance]) -> Polarity {
    let best = scores.values().copied().fold(f64::NEG_INFINITY, f64::max);
    let tied: Vec<Polarity> = scores
        .iter()
        .filter(|(_, &s)| is_tied(s, best))
        .map(|(&l, _)| l)
        .collect();
    if tied.len() == 1 {
        return tied[0];
    }
    let support = |label: Polarity| {
        canonical_sum(
            provenance
                .iter()
                .filter(|p| p.distribution.top_labels().contains(&label))
                .map(|p| p.weight)
                .collect(),
        )
    };
    let supports: Vec<(Polarity, f64)> = tied.iter().map(|&l| (l, support(l))).collect();
    let top = supports.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    supports
        .into_iter()
        .find(|(_, s)| is_tied(*s, top))
        .map(|(l, _)| l)
        .expect("at least one tied label")
}

fn aggregate(
    weights: &[f64],
    dists: &[AnswerDistribution],
) -> (BTreeMap<Polarity, f64>, f64) {
    let mut labels: Vec<Polarity> = dists.iter().flat_map(|d| d.counts.keys().copied()).collect();
    labels.sort_unstable();
    labels.dedup();
    let scores = labels
        .into_iter()
        .map(|l| {
            let terms = weights.iter().zip(dists).map(|(w, d)| w * d.freq(l)).collect();
            (l, canonical_sum(terms))
        })
        .collect();
    let abstain = canonical_sum(
        weights
            .iter()
            .zip(dists)
            .map(|(w, d)| w * d.abstain_fraction())
            .collect(),
    );
    (scores, abstain)
}

fn provenance_for(weights: &[f64], dists: &[AnswerDistribution]) -> Vec<ClusterProvenance> {
    weights
        .iter()
        .zip(dists)
        .enumerate()
        .map(|(k, (&w, d))| ClusterProvenance {
            cluster_id: k,
            mass: w,
            weight: w,
            size: 0,
            representative_index: 0,
            distribution: d.clone(),
        })
        .collect()
}

/// `score(y) = Σ_k masses[k] · dists[k].freq(y)`.
pub fn front_door_combine(masses: &[f64], dists: &[AnswerDistribution]) -> Result<CausalEstimate, EstimateError> {
    if masses.len() != dists.len() {
        return Err(EstimateError::LengthMismatch {
            masses: masses.len(),
            dists: dists.len(),
        });
    }
    combine_provenance(provenance_for(masses, dists))
}

/// Combines fully described clusters; weights come from `provenance`.
pub fn combine_provenance(provenance: Vec<ClusterProvenance>) -> Result<CausalEstimate, EstimateError> {
    if provenance.is_empty() {
        return Err(EstimateError::Empty);
    }
    let weights: Vec<f64> = provenance.iter().map(|p| p.weight).collect();
    let total = canonical_sum(weights.clone());
    if (total - 1.0).abs() > MASS_TOLERANCE {
        return Err(EstimateError::MassesNotNormalized(total));
    }
    if provenance.iter().all(|p| p.distribution.is_all_abstained()) {
        return Err(EstimateError::DegenerateAllAbstain);
    }
    let dists: Vec<AnswerDistribution> = provenance.iter().map(|p| p.distribution.clone()).collect();
    let (scores, abstain_mass) = aggregate(&weights, &dists);
    let chosen = choose_label(&scores, &provenance);
    Ok(CausalEstimate {
        scores,
        abstain_mass,
        provenance,
        chosen,
        selection: Selection::FrontDoor,
    })
}

impl CausalEstimate {
    /// Scores rebuilt from the provenance alone.
    pub fn reaggregate(&self) -> (BTreeMap<Polarity, f64>, f64) {
        let weights: Vec<f64> = self.provenance.iter().map(|p| p.weight).collect();
        let dists: Vec<AnswerDistribution> = self.provenance.iter().map(|p| p.distribution.clone()).collect();
        aggregate(&weights, &dists)
    }

    pub fn total_mass(&self) -> f64 {
        self.scores.values().sum::<f64>() + self.abstain_mass
    }
}

/// Most frequent parsed label; ties by the fixed label order.
pub fn majority_vote_labels(answers: impl IntoIterator<Item = Option<Polarity>>) -> Result<Polarity, EstimateError> {
    let mut counts: BTreeMap<Polarity, usize> = BTreeMap::new();
    for label in answers.into_iter().flatten() {
        *counts.entry(label).or_default() += 1;
    }
    let best = counts.values().copied().max().ok_or(EstimateError::NoParsedAnswers)?;
    Ok(*counts.iter().find(|(_, &c)| c == best).unwrap().0)
}

/// Self-consistency baseline over sampled CoTs.
pub fn majority_vote(cots: &[ChainOfThought]) -> Result<Polarity, EstimateError> {
    majority_vote_labels(cots.iter().map(|c| c.parsed_answer))
}

/// Queries the revision prompt `n` times and tallies the final labels.
/// Fails with [`EstimateError::AllAbstained`] (carrying the distribution)
/// when nothing parses.
pub fn estimate_answer_distribution(
    backend: &dyn GenerationBackend,
    request: &GenerationRequest,
    scheme: LabelScheme,
) -> Result<AnswerDistribution, StageError> {
    let completions = backend.sample_completions(request)?;
    let answers: Vec<Option<Polarity>> = completions
        .iter()
        .map(|c| parse_polarity(&c.text, scheme).ok())
        .collect();
    let distribution = AnswerDistribution::from_answers(&answers, scheme);
    if distribution.is_all_abstained() {
        return Err(EstimateError::AllAbstained { distribution }.into());
    }
    Ok(distribution)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Retrieval,
    CotGeneration,
    Embedding,
    Clustering,
    Revision,
    Combination,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Retrieval => "retrieval",
            Stage::CotGeneration => "cot-generation",
            Stage::Embedding => "embedding",
            Stage::Clustering => "clustering",
            Stage::Revision => "revision",
            Stage::Combination => "combination",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum StageError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Estimate(#[from] EstimateError),
}

/// A stage failure tagged with where it happened.
#[derive(Debug, Error)]
#[error("item {item}: {stage} stage failed: {source}")]
pub struct PipelineError {
    pub item: String,
    pub stage: Stage,
    #[source]
    pub source: StageError,
}

/// Deterministic per-item seed derived from the run seed.
pub fn derive_seed(base: u64, item_id: &str, purpose: &str) -> u64 {
    let digest = sha256_hex(format!("{base}/{item_id}/{purpose}").as_bytes());
    u64::from_str_radix(&digest[..16], 16).expect("hex digest")
}

pub fn cot_tag(item_id: &str) -> String {
    format!("{item_id}/cot")
}

pub fn revision_tag(item_id: &str, sample_index: usize) -> String {
    format!("{item_id}/revise/{sample_index}")
}

pub fn icl_tag(item_id: &str) -> String {
    format!("{item_id}/icl")
}

/// Everything `run_capital` produced for one item.
#[derive(Debug, Clone)]
pub struct CapitalRun {
    pub estimate: CausalEstimate,
    pub stage1: Vec<ChainOfThought>,
    pub kmeans_seed: u64,
}

/// Wires the stages together for one configuration.
pub struct Pipeline<'a> {
    pub config: &'a PipelineConfig,
    pub prompter: &'a Prompter,
    pub store: &'a DemoStore,
    pub backend: &'a dyn GenerationBackend,
    pub encoder: &'a dyn Encoder,
}

struct Unit {
    mass: f64,
    size: usize,
    representative: ChainOfThought,
}

impl Pipeline<'_> {
    fn scheme(&self) -> LabelScheme {
        self.config.label_scheme
    }

    fn fail<E: Into<StageError>>(item: &Sentence, stage: Stage) -> impl FnOnce(E) -> PipelineError + '_ {
        move |e| PipelineError {
            item: item.id().to_string(),
            stage,
            source: e.into(),
        }
    }

    /// Stage-1 prompt `[d_1, ..., d_R, s_test]` with similarity-selected
    /// demonstrations.
    pub fn initial_prompt(&self, sentence: &Sentence, aspect: &AspectTerm) -> Result<PromptText, PipelineError> {
        let probe = self
            .encoder
            .embed(sentence.text())
            .map_err(Self::fail(sentence, Stage::Retrieval))?;
        let demos = self
            .store
            .select_stage1_demos(&probe, self.config.demos_r, Some(sentence.id()))
            .map_err(Self::fail(sentence, Stage::Retrieval))?;
        Ok(self.prompter.assemble_initial_prompt(&demos, sentence, aspect))
    }

    /// Samples `A` CoTs for the stage-1 prompt, parsed but not embedded.
    pub fn sample_stage1(&self, sentence: &Sentence, aspect: &AspectTerm) -> Result<Vec<ChainOfThought>, PipelineError> {
        let prompt = self.initial_prompt(sentence, aspect)?;
        let request = GenerationRequest {
            prompt,
            temperature: self.config.sampling_temperature,
            count: self.config.cot_samples_a,
            max_tokens: self.config.max_tokens,
            request_tag: cot_tag(sentence.id()),
        };
        let completions = self
            .backend
            .sample_completions(&request)
            .map_err(Self::fail(sentence, Stage::CotGeneration))?;
        Ok(completions
            .into_iter()
            .enumerate()
            .map(|(i, c)| ChainOfThought::parsed(c.text, i + 1, self.scheme()))
            .collect())
    }

    /// CoT-SC: majority vote over the stage-1 samples.
    pub fn run_cot_sc(&self, sentence: &Sentence, aspect: &AspectTerm) -> Result<(Polarity, Vec<ChainOfThought>), PipelineError> {
        let cots = self.sample_stage1(sentence, aspect)?;
        let chosen = majority_vote(&cots).map_err(Self::fail(sentence, Stage::Combination))?;
        Ok((chosen, cots))
    }

    /// Answer-only few-shot prompting, one greedy sample.
    pub fn run_icl(&self, sentence: &Sentence, aspect: &AspectTerm) -> Result<Polarity, PipelineError> {
        let probe = self
            .encoder
            .embed(sentence.text())
            .map_err(Self::fail(sentence, Stage::Retrieval))?;
        let demos = self
            .store
            .select_stage1_demos(&probe, self.config.demos_r, Some(sentence.id()))
            .map_err(Self::fail(sentence, Stage::Retrieval))?;
        let request = GenerationRequest {
            prompt: self.prompter.assemble_icl_prompt(&demos, sentence, aspect),
            temperature: 0.0,
            count: 1,
            max_tokens: self.config.max_tokens,
            request_tag: icl_tag(sentence.id()),
        };
        let completion = self
            .backend
            .sample_completions(&request)
            .map_err(Self::fail(sentence, Stage::CotGeneration))?;
        majority_vote_labels([parse_polarity(&completion[0].text, self.scheme()).ok()])
            .map_err(Self::fail(sentence, Stage::Combination))
    }

    fn embed_all(&self, sentence: &Sentence, cots: Vec<ChainOfThought>) -> Result<Vec<ChainOfThought>, PipelineError> {
        cots.into_iter()
            .map(|c| {
                let e = self.encoder.embed(&c.text)?;
                Ok(c.with_embedding(e))
            })
            .collect::<Result<_, EncoderError>>()
            .map_err(Self::fail(sentence, Stage::Embedding))
    }

    fn units(&self, sentence: &Sentence, cots: &[ChainOfThought], kmeans_seed: u64) -> Result<Vec<Unit>, PipelineError> {
        let k = self.config.clusters_k;
        if self.config.has(Ablation::NoKmeans) {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.rng_seed, sentence.id(), "no-kmeans"));
            if k > cots.len() {
                return Err(Self::fail(sentence, Stage::Clustering)(ClusterError::KTooLarge { k, points: cots.len() }));
            }
            let mut picked = rand::seq::index::sample(&mut rng, cots.len(), k).into_vec();
            picked.sort_unstable();
            return Ok(picked
                .into_iter()
                .map(|i| Unit {
                    mass: 1.0 / k as f64,
                    size: 1,
                    representative: cots[i].clone(),
                })
                .collect());
        }
        let (clusters, _) = cluster_cots(cots, k, kmeans_seed).map_err(Self::fail(sentence, Stage::Clustering))?;
        Ok(clusters
            .into_iter()
            .map(|c| Unit {
                mass: c.mass,
                size: c.members.len(),
                representative: c.representative,
            })
            .collect())
    }

    fn revise(&self, sentence: &Sentence, aspect: &AspectTerm, cluster_id: usize, unit: &Unit) -> Result<AnswerDistribution, PipelineError> {
        let probe = unit
            .representative
            .embedding
            .as_ref()
            .expect("stage-1 CoTs are embedded before revision");
        let ranked = self
            .store
            .rank_by_wrong_cot_excluding(probe, sentence.id())
            .map_err(Self::fail(sentence, Stage::Retrieval))?;
        let l = self.config.revision_demos_l;
        let demos = if self.config.has(Ablation::NwgmRandom) {
            let seed = derive_seed(self.config.rng_seed, sentence.id(), &format!("nwgm-random/{cluster_id}"));
            take_top(&ranked, l, TopSelection::Random(&mut ChaCha8Rng::seed_from_u64(seed)))
        } else {
            take_top::<ChaCha8Rng>(&ranked, l, TopSelection::Ranked)
        };
        let order = if self.config.has(Ablation::NwgmReverse) {
            DemoOrder::MostSimilarFirst
        } else {
            DemoOrder::MostSimilarLast
        };
        let request = GenerationRequest {
            prompt: self
                .prompter
                .assemble_revision_prompt(&demos, sentence, aspect, &unit.representative, order),
            temperature: self.config.revision_temperature,
            count: self.config.revision_queries_n,
            max_tokens: self.config.max_tokens,
            request_tag: revision_tag(sentence.id(), unit.representative.sample_index),
        };
        match estimate_answer_distribution(self.backend, &request, self.scheme()) {
            Ok(d) => Ok(d),
            Err(StageError::Estimate(EstimateError::AllAbstained { distribution })) => {
                warn!(item = sentence.id(), cluster_id, "cluster abstained on every revision answer");
                Ok(distribution)
            }
            Err(e) => Err(Self::fail(sentence, Stage::Revision)(e)),
        }
    }

    /// Full pipeline for one test item.
    pub fn run_capital(&self, sentence: &Sentence, aspect: &AspectTerm) -> Result<CapitalRun, PipelineError> {
        let stage1 = self.sample_stage1(sentence, aspect)?;
        let embedded = self.embed_all(sentence, stage1.clone())?;
        let kmeans_seed = derive_seed(self.config.rng_seed, sentence.id(), "kmeans");
        let units = self.units(sentence, &embedded, kmeans_seed)?;

        let dists = units
            .par_iter()
            .enumerate()
            .map(|(k, unit)| self.revise(sentence, aspect, k, unit))
            .collect::<Result<Vec<_>, _>>()?;

        let no_weighting = self.config.has(Ablation::NoWeighting);
        let uniform = 1.0 / units.len() as f64;
        let provenance: Vec<ClusterProvenance> = units
            .iter()
            .zip(dists)
            .enumerate()
            .map(|(k, (unit, distribution))| ClusterProvenance {
                cluster_id: k,
                mass: unit.mass,
                weight: if no_weighting { uniform } else { unit.mass },
                size: unit.size,
                representative_index: unit.representative.sample_index,
                distribution,
            })
            .collect();
        let mut estimate = combine_provenance(provenance).map_err(Self::fail(sentence, Stage::Combination))?;
        if no_weighting {
            let votes = estimate.provenance.iter().flat_map(|p| {
                p.distribution
                    .counts
                    .iter()
                    .flat_map(|(&label, &count)| std::iter::repeat_n(Some(label), count))
            });
            estimate.chosen = majority_vote_labels(votes).map_err(Self::fail(sentence, Stage::Combination))?;
            estimate.selection = Selection::MajorityVote;
        }
        Ok(CapitalRun {
            estimate,
            stage1,
            kmeans_seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use Polarity::*;

    fn dist(answers: &[Option<Polarity>]) -> AnswerDistribution {
        AnswerDistribution::from_answers(answers, LabelScheme::ThreeClass)
    }

    #[test]
    fn frequencies_follow_indicator_counts() {
        let d = dist(&[Some(Positive), Some(Positive), Some(Negative), Some(Positive), Some(Positive)]);
        assert_eq!((d.freq(Positive), d.freq(Negative)), (0.8, 0.2));
        let d = dist(&[Some(Neutral); 5]);
        assert_eq!(d.freq(Neutral), 1.0);
        let d = dist(&[Some(Positive), Some(Positive), None, Some(Negative)]);
        assert_eq!((d.freq(Positive), d.freq(Negative), d.abstain_fraction()), (0.5, 0.25, 0.25));
        assert_eq!(d.top_labels(), [Positive]);
    }

    #[test]
    fn combine_reference_cases() {
        let e = front_door_combine(&[0.25, 0.75], &[dist(&[Some(Positive)]), dist(&[Some(Negative)])]).unwrap();
        assert_eq!((e.scores[&Positive], e.scores[&Negative], e.chosen), (0.25, 0.75, Negative));

        let d = dist(&[Some(Neutral), Some(Neutral), Some(Neutral), Some(Positive), Some(Positive)]);
        assert_eq!(front_door_combine(&[1.0], &[d]).unwrap().chosen, Neutral);
    }

    #[test]
    fn tie_falls_through_to_label_order() {
        let a = dist(&[Some(Positive), Some(Positive), Some(Positive), Some(Negative), Some(Negative)]);
        let b = dist(&[Some(Negative), Some(Negative), Some(Negative), Some(Positive), Some(Positive)]);
        let e = front_door_combine(&[0.5, 0.5], &[a, b]).unwrap();
        assert_eq!((e.scores[&Positive], e.scores[&Negative]), (0.5, 0.5));
        // Each label tops one cluster of mass 0.5, so support ties too.
        assert_eq!(e.chosen, Positive);
    }

    #[test]
    fn tie_prefers_heavier_support() {
        // pos = 0.6/3 + 0.4*3/4 = 0.5 and neg = 0.6*2/3 + 0.4/4 = 0.5, but
        // negative tops the 0.6 cluster while positive tops the 0.4 one.
        let heavy = dist(&[Some(Negative), Some(Negative), Some(Positive)]);
        let light = dist(&[Some(Positive), Some(Positive), Some(Positive), Some(Negative)]);
        let e = front_door_combine(&[0.6, 0.4], &[heavy, light]).unwrap();
        assert!(is_tied(e.scores[&Positive], e.scores[&Negative]));
        assert_eq!(e.chosen, Negative);
    }

    #[test]
    fn combine_errors() {
        let d = dist(&[Some(Positive)]);
        assert!(matches!(front_door_combine(&[1.0], &[d.clone(), d.clone()]), Err(EstimateError::LengthMismatch { masses: 1, dists: 2 })));
        assert!(matches!(front_door_combine(&[0.5], &[d]), Err(EstimateError::MassesNotNormalized(_))));
        let none = dist(&[None, None]);
        assert!(matches!(front_door_combine(&[1.0], &[none]), Err(EstimateError::DegenerateAllAbstain)));
    }

    #[test]
    fn abstentions_keep_total_mass() {
        let e = front_door_combine(
            &[0.5, 0.5],
            &[dist(&[Some(Positive), None]), dist(&[None, None])],
        )
        .unwrap();
        assert_eq!(e.scores[&Positive], 0.25);
        assert_eq!(e.abstain_mass, 0.75);
        assert!((e.total_mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn majority_vote_rules() {
        let cots = |labels: &[Option<Polarity>]| {
            labels
                .iter()
                .enumerate()
                .map(|(i, l)| ChainOfThought { text: String::new(), parsed_answer: *l, embedding: None, sample_index: i + 1 })
                .collect::<Vec<_>>()
        };
        assert_eq!(majority_vote(&cots(&[Some(Positive), Some(Positive), Some(Negative)])).unwrap(), Positive);
        assert_eq!(majority_vote(&cots(&[Some(Negative), Some(Positive)])).unwrap(), Positive);
        assert_eq!(majority_vote(&cots(&[None, None, Some(Negative)])).unwrap(), Negative);
        assert!(matches!(majority_vote(&cots(&[None])), Err(EstimateError::NoParsedAnswers)));
    }

    #[test]
    fn seeds_are_stable_and_distinct() {
        assert_eq!(derive_seed(1, "a", "kmeans"), derive_seed(1, "a", "kmeans"));
        assert_ne!(derive_seed(1, "a", "kmeans"), derive_seed(1, "b", "kmeans"));
        assert_ne!(derive_seed(1, "a", "kmeans"), derive_seed(2, "a", "kmeans"));
    }

    mod props {
        use proptest::prelude::*;
        use rand::seq::SliceRandom;

        use super::*;

        fn label() -> impl Strategy<Value = Option<Polarity>> {
            prop_oneof![
                4 => prop::sample::select(LabelScheme::ThreeClass.labels().to_vec()).prop_map(Some),
                1 => Just(None),
            ]
        }

        /// Cluster sizes (masses are `size / A`) with one answer list each.
        fn clusters(max_k: usize) -> impl Strategy<Value = (Vec<f64>, Vec<AnswerDistribution>)> {
            prop::collection::vec((1usize..6, prop::collection::vec(label(), 1..8)), 1..=max_k)
                .prop_filter("some cluster must parse", |cs| {
                    cs.iter().any(|(_, a)| a.iter().any(Option::is_some))
                })
                .prop_map(|cs| {
                    let total: usize = cs.iter().map(|c| c.0).sum();
                    let masses = cs.iter().map(|c| c.0 as f64 / total as f64).collect();
                    let dists = cs.iter().map(|c| dist(&c.1)).collect();
                    (masses, dists)
                })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(256))]

            #[test]
            fn scores_and_abstain_sum_to_one((masses, dists) in clusters(8)) {
                let e = front_door_combine(&masses, &dists).unwrap();
                prop_assert!((e.total_mass() - 1.0).abs() <= 1e-10);
                prop_assert!(e.scores.values().all(|&s| s >= 0.0));
            }

            #[test]
            fn argmax_ignores_positive_scaling((masses, dists) in clusters(8), c in 1e-6f64..1e6) {
                let e = front_door_combine(&masses, &dists).unwrap();
                let scaled = e.scores.iter().map(|(&l, &s)| (l, s * c)).collect();
                prop_assert_eq!(choose_label(&scaled, &e.provenance), e.chosen);
            }

            #[test]
            fn single_cluster_picks_mode(answers in prop::collection::vec(label(), 1..12)) {
                prop_assume!(answers.iter().any(Option::is_some));
                let e = front_door_combine(&[1.0], &[dist(&answers)]).unwrap();
                prop_assert_eq!(e.chosen, majority_vote_labels(answers).unwrap());
            }

            #[test]
            fn permuting_clusters_changes_nothing((masses, dists) in clusters(8), seed in any::<u64>()) {
                let e = front_door_combine(&masses, &dists).unwrap();
                let mut pairs: Vec<_> = masses.iter().copied().zip(dists.iter().cloned()).collect();
                pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                let (m2, d2): (Vec<f64>, Vec<AnswerDistribution>) = pairs.into_iter().unzip();
                let p = front_door_combine(&m2, &d2).unwrap();
                prop_assert_eq!(&p.scores, &e.scores);
                prop_assert_eq!(p.abstain_mass, e.abstain_mass);
                prop_assert_eq!(p.chosen, e.chosen);
            }

            #[test]
            fn provenance_reaggregates_exactly((masses, dists) in clusters(8)) {
                let e = front_door_combine(&masses, &dists).unwrap();
                prop_assert_eq!(e.reaggregate(), (e.scores.clone(), e.abstain_mass));
            }

            #[test]
            fn unweighted_vote_agrees_on_equal_unanimous_clusters(
                labels in prop::collection::vec(prop::sample::select(LabelScheme::ThreeClass.labels().to_vec()), 1..8),
                n in 1usize..6,
            ) {
                let k = labels.len();
                let dists: Vec<_> = labels.iter().map(|&l| dist(&vec![Some(l); n])).collect();
                let e = front_door_combine(&vec![1.0 / k as f64; k], &dists).unwrap();
                let votes = labels.iter().flat_map(|&l| std::iter::repeat_n(Some(l), n));
                prop_assert_eq!(majority_vote_labels(votes).unwrap(), e.chosen);
            }
        }
    }
}
