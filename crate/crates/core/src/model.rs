//! Domain types shared by every stage of the pipeline.

use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Failure to map text onto a polarity label. Carries the raw input so
/// callers can log it or retry.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("no polarity label found in {raw:?}")]
pub struct ParseFailure {
    pub raw: String,
}

/// Violation of a domain-type invariant at construction time.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("sentence text is empty")]
    EmptySentence,
    #[error("aspect surface is empty")]
    EmptyAspect,
    #[error("aspect span {start}..{end} does not match {surface:?} in the sentence")]
    SpanMismatch {
        surface: String,
        start: usize,
        end: usize,
    },
    #[error("embedding has zero length")]
    EmptyEmbedding,
    #[error("embedding contains a non-finite entry")]
    NonFiniteEmbedding,
    #[error("embedding has zero norm and cannot be normalized")]
    ZeroNorm,
    #[error("demonstration {id}: {reason}")]
    InvalidDemonstration { id: String, reason: String },
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sentence {
    id: String,
    text: String,
}

impl Sentence {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Result<Self, ModelError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(ModelError::EmptySentence);
        }
        Ok(Self {
            id: id.into(),
            text,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

/// The target term whose polarity is being asked about.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AspectTerm {
    surface: String,
    char_span: Option<(usize, usize)>,
}

impl AspectTerm {
    pub fn new(surface: impl Into<String>) -> Result<Self, ModelError> {
        let surface = surface.into();
        if surface.trim().is_empty() {
            return Err(ModelError::EmptyAspect);
        }
        Ok(Self {
            surface,
            char_span: None,
        })
    }

    /// Attaches a character span (in `char` offsets) into `sentence` and
    /// checks that it covers the surface form, ignoring case.
    pub fn with_span(
        self,
        sentence: &Sentence,
        start: usize,
        end: usize,
    ) -> Result<Self, ModelError> {
        let mismatch = || ModelError::SpanMismatch {
            surface: self.surface.clone(),
            start,
            end,
        };
        if start > end {
            return Err(mismatch());
        }
        let slice: String = sentence.text().chars().skip(start).take(end - start).collect();
        if slice.chars().count() != end - start || slice.to_lowercase() != self.surface.to_lowercase()
        {
            return Err(mismatch());
        }
        Ok(Self {
            char_span: Some((start, end)),
            ..self
        })
    }

    pub fn surface(&self) -> &str {
        &self.surface
    }

    pub fn char_span(&self) -> Option<(usize, usize)> {
        self.char_span
    }
}

/// Sentiment polarity. The derived order is the fixed tie-break order used
/// throughout: Positive < Negative < Neutral < Conflict.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
    Neutral,
    Conflict,
}

impl Polarity {
    pub const ALL: [Polarity; 4] = [
        Polarity::Positive,
        Polarity::Negative,
        Polarity::Neutral,
        Polarity::Conflict,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Positive => "positive",
            Polarity::Negative => "negative",
            Polarity::Neutral => "neutral",
            Polarity::Conflict => "conflict",
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which label set is active. `Conflict` is only legal under `FourClass`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelScheme {
    #[default]
    ThreeClass,
    FourClass,
}

impl LabelScheme {
    pub fn labels(self) -> &'static [Polarity] {
        match self {
            LabelScheme::ThreeClass => &Polarity::ALL[..3],
            LabelScheme::FourClass => &Polarity::ALL[..],
        }
    }

    pub fn contains(self, label: Polarity) -> bool {
        self.labels().contains(&label)
    }
}

fn label_pattern() -> &'static Regex {
    static PATTERN: OnceLock<Regex> = OnceLock::new();
    PATTERN.get_or_init(|| Regex::new(r"(?i)\b(positive|negative|neutral|conflict)\b").unwrap())
}

fn polarity_of_word(word: &str) -> Option<Polarity> {
    Polarity::ALL
        .into_iter()
        .find(|p| p.as_str().eq_ignore_ascii_case(word))
}

/// Extracts the final polarity from a completion: the last whole-word,
/// case-insensitive occurrence of an active label wins, so the Stage 3
/// conclusion overrides labels mentioned during reasoning.
pub fn parse_polarity(completion_text: &str, scheme: LabelScheme) -> Result<Polarity, ParseFailure> {
    label_pattern()
        .find_iter(completion_text)
        .filter_map(|m| polarity_of_word(m.as_str()))
        .filter(|p| scheme.contains(*p))
        .last()
        .ok_or_else(|| ParseFailure {
            raw: completion_text.to_string(),
        })
}

/// Maps a single label token onto the enumeration. No abbreviations.
pub fn normalize_label(raw: &str, scheme: LabelScheme) -> Result<Polarity, ParseFailure> {
    polarity_of_word(raw.trim())
        .filter(|p| scheme.contains(*p))
        .ok_or_else(|| ParseFailure {
            raw: raw.to_string(),
        })
}

/// A unit-free real vector. Values are kept in `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, ModelError> {
        if values.is_empty() {
            return Err(ModelError::EmptyEmbedding);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteEmbedding);
        }
        Ok(Self { values })
    }

    /// Builds an L2-normalized vector.
    pub fn normalized(values: Vec<f64>) -> Result<Self, ModelError> {
        let mut v = Self::new(values)?;
        let norm = v.norm();
        if norm == 0.0 {
            return Err(ModelError::ZeroNorm);
        }
        v.values.iter_mut().for_each(|x| *x /= norm);
        Ok(v)
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn squared_distance(&self, other: &EmbeddingVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

/// One sampled reasoning chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainOfThought {
    pub text: String,
    pub parsed_answer: Option<Polarity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<EmbeddingVector>,
    /// 1-based index within its generation batch.
    pub sample_index: usize,
}

impl ChainOfThought {
    /// Parses the answer out of `text` under `scheme`.
    pub fn parsed(text: impl Into<String>, sample_index: usize, scheme: LabelScheme) -> Self {
        let text = text.into();
        let parsed_answer = parse_polarity(&text, scheme).ok();
        Self {
            text,
            parsed_answer,
            embedding: None,
            sample_index,
        }
    }

    pub fn with_embedding(mut self, embedding: EmbeddingVector) -> Self {
        self.embedding = Some(embedding);
        self
    }
}

/// A training example with one wrong and one correct reasoning chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    sentence: Sentence,
    aspect: AspectTerm,
    gold: Polarity,
    wrong_cot: ChainOfThought,
    correct_cot: ChainOfThought,
}

impl Demonstration {
    pub fn new(
        sentence: Sentence,
        aspect: AspectTerm,
        gold: Polarity,
        wrong_cot: ChainOfThought,
        correct_cot: ChainOfThought,
    ) -> Result<Self, ModelError> {
        let invalid = |reason: &str| ModelError::InvalidDemonstration {
            id: sentence.id().to_string(),
            reason: reason.to_string(),
        };
        match wrong_cot.parsed_answer {
            Some(answer) if answer == gold => {
                return Err(invalid("wrong CoT agrees with the gold label"))
            }
            _ => {}
        }
        if correct_cot.parsed_answer != Some(gold) {
            return Err(invalid("correct CoT does not conclude with the gold label"));
        }
        Ok(Self {
            sentence,
            aspect,
            gold,
            wrong_cot,
            correct_cot,
        })
    }

    pub fn sentence(&self) -> &Sentence {
        &self.sentence
    }

    pub fn aspect(&self) -> &AspectTerm {
        &self.aspect
    }

    pub fn gold(&self) -> Polarity {
        self.gold
    }

    pub fn wrong_cot(&self) -> &ChainOfThought {
        &self.wrong_cot
    }

    pub fn correct_cot(&self) -> &ChainOfThought {
        &self.correct_cot
    }
}

/// Ablation switches. At most one is normally active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Render revision demonstrations most-similar-first instead of last.
    NwgmReverse,
    /// Pick revision demonstrations uniformly at random.
    NwgmRandom,
    /// Skip clustering: K random CoTs with equal weight.
    NoKmeans,
    /// Majority vote over all stage-2 answers instead of weighting.
    NoWeighting,
}

impl Ablation {
    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::NwgmReverse => "nwgm-reverse",
            Ablation::NwgmRandom => "nwgm-random",
            Ablation::NoKmeans => "no-kmeans",
            Ablation::NoWeighting => "no-weighting",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            Ablation::NwgmReverse,
            Ablation::NwgmRandom,
            Ablation::NoKmeans,
            Ablation::NoWeighting,
        ]
        .into_iter()
        .find(|a| a.as_str() == s.trim())
        .ok_or_else(|| format!("unknown ablation {s:?}"))
    }
}

/// Hyperparameters of one pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Stage-1 demonstrations (R).
    pub demos_r: usize,
    /// CoT samples per item (A).
    pub cot_samples_a: usize,
    /// Clusters (K).
    pub clusters_k: usize,
    /// Stage-2 queries per cluster (N).
    pub revision_queries_n: usize,
    /// Demonstrations in each revision prompt (L).
    pub revision_demos_l: usize,
    pub sampling_temperature: f64,
    pub revision_temperature: f64,
    pub max_tokens: u32,
    pub label_scheme: LabelScheme,
    pub rng_seed: u64,
    pub ablations: Vec<Ablation>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            demos_r: 3,
            cot_samples_a: 20,
            clusters_k: 8,
            revision_queries_n: 5,
            revision_demos_l: 3,
            sampling_temperature: 0.7,
            revision_temperature: 0.7,
            max_tokens: 1024,
            label_scheme: LabelScheme::ThreeClass,
            rng_seed: 0,
            ablations: Vec::new(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.cot_samples_a < 1 {
            return fail("cot_samples_a must be at least 1".into());
        }
        if self.clusters_k < 1 || self.clusters_k > self.cot_samples_a {
            return fail(format!(
                "clusters_k must lie in 1..={} (got {})",
                self.cot_samples_a, self.clusters_k
            ));
        }
        if self.revision_queries_n < 1 {
            return fail("revision_queries_n must be at least 1".into());
        }
        for (name, t) in [
            ("sampling_temperature", self.sampling_temperature),
            ("revision_temperature", self.revision_temperature),
        ] {
            if !(t.is_finite() && t > 0.0) {
                return fail(format!("{name} must be finite and positive (got {t})"));
            }
        }
        Ok(())
    }

    pub fn has(&self, ablation: Ablation) -> bool {
        self.ablations.contains(&ablation)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn final_label_wins() {
        let text = "Stage 1 ... Stage 3 ... Final answer: POSITIVE";
        assert_eq!(parse_polarity(text, LabelScheme::ThreeClass), Ok(Polarity::Positive));
        let text = "neither positive nor negative; it is neutral";
        assert_eq!(parse_polarity(text, LabelScheme::ThreeClass), Ok(Polarity::Neutral));
    }

    #[test]
    fn missing_label_is_a_failure() {
        let err = parse_polarity("the food arrived.", LabelScheme::ThreeClass).unwrap_err();
        assert_eq!(err.raw, "the food arrived.");
    }

    #[test]
    fn conflict_respects_scheme() {
        assert_eq!(
            normalize_label("CONFLICT", LabelScheme::FourClass),
            Ok(Polarity::Conflict)
        );
        assert!(normalize_label("CONFLICT", LabelScheme::ThreeClass).is_err());
        // Under three classes a trailing "conflict" is ignored.
        assert_eq!(
            parse_polarity("negative, or maybe conflict", LabelScheme::ThreeClass),
            Ok(Polarity::Negative)
        );
    }

    #[test]
    fn whole_words_only() {
        assert_eq!(
            parse_polarity("positive despite conflicting cues", LabelScheme::FourClass),
            Ok(Polarity::Positive)
        );
        assert!(parse_polarity("positively nonneutral", LabelScheme::FourClass).is_err());
    }

    #[test]
    fn normalize_trims_and_rejects_abbreviations() {
        assert_eq!(
            normalize_label(" Negative ", LabelScheme::ThreeClass),
            Ok(Polarity::Negative)
        );
        assert!(normalize_label("pos", LabelScheme::ThreeClass).is_err());
    }

    #[test]
    fn label_round_trip() {
        for p in Polarity::ALL {
            assert_eq!(normalize_label(&p.to_string(), LabelScheme::FourClass), Ok(p));
        }
    }

    #[test]
    fn sentence_and_aspect_invariants() {
        assert_eq!(Sentence::new("s", "   "), Err(ModelError::EmptySentence));
        assert_eq!(AspectTerm::new(""), Err(ModelError::EmptyAspect));
        let s = Sentence::new("s", "The Wait time was endless").unwrap();
        let a = AspectTerm::new("wait time").unwrap().with_span(&s, 4, 13).unwrap();
        assert_eq!(a.char_span(), Some((4, 13)));
        assert!(AspectTerm::new("wait time").unwrap().with_span(&s, 0, 9).is_err());
        assert!(AspectTerm::new("wait time").unwrap().with_span(&s, 20, 29).is_err());
    }

    #[test]
    fn demonstration_invariants() {
        let s = Sentence::new("d1", "Service was slow").unwrap();
        let a = AspectTerm::new("service").unwrap();
        let scheme = LabelScheme::ThreeClass;
        let wrong = ChainOfThought::parsed("so positive", 1, scheme);
        let right = ChainOfThought::parsed("so negative", 2, scheme);
        assert!(Demonstration::new(s.clone(), a.clone(), Polarity::Negative, wrong.clone(), right.clone()).is_ok());
        assert!(Demonstration::new(s.clone(), a.clone(), Polarity::Negative, right.clone(), right.clone()).is_err());
        assert!(Demonstration::new(s, a, Polarity::Negative, wrong.clone(), wrong).is_err());
    }

    #[test]
    fn normalization_gives_unit_norm() {
        let v = EmbeddingVector::normalized(vec![3.0, 4.0, 12.0]).unwrap();
        assert!((v.norm() - 1.0).abs() <= 1e-9);
        assert_eq!(EmbeddingVector::normalized(vec![0.0; 3]), Err(ModelError::ZeroNorm));
        assert_eq!(EmbeddingVector::new(vec![f64::NAN]), Err(ModelError::NonFiniteEmbedding));
    }

    #[test]
    fn config_defaults_and_bounds() {
        let c = PipelineConfig::default();
        assert_eq!((c.demos_r, c.clusters_k, c.cot_samples_a, c.revision_queries_n), (3, 8, 20, 5));
        c.validate().unwrap();
        let bad = PipelineConfig { clusters_k: 21, ..PipelineConfig::default() };
        assert!(bad.validate().is_err());
        let bad = PipelineConfig { sampling_temperature: 0.0, ..PipelineConfig::default() };
        assert!(bad.validate().is_err());
    }
}
