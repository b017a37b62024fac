//! Demonstration store over the training set and the two retrieval paths:
//! stage-1 selection by sentence similarity and stage-2 ranking by
//! wrong-CoT similarity.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{cosine, Encoder, EncoderError};
use crate::model::{
    normalize_label, AspectTerm, ChainOfThought, Demonstration, EmbeddingVector, LabelScheme,
    ModelError, Sentence,
};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("probe has dimension {probe}, store has {store}")]
    DimensionMismatch { probe: usize, store: usize },
    #[error("{path}:{line}: {reason}")]
    MalformedLine {
        path: String,
        line: usize,
        reason: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Demonstrations with precomputed wrong-CoT and sentence embeddings.
/// Immutable once indexed; re-indexing builds a new store.
#[derive(Debug, Clone, Default)]
pub struct DemoStore {
    entries: Vec<Demonstration>,
    wrong_matrix: Vec<EmbeddingVector>,
    sentence_matrix: Vec<EmbeddingVector>,
}

/// One row of a ranking.
#[derive(Debug, Clone, Copy)]
pub struct Ranked<'a> {
    pub index: usize,
    pub similarity: f64,
    pub demo: &'a Demonstration,
}

/// How [`take_top`] picks demonstrations from a ranking.
pub enum TopSelection<'r, R: Rng> {
    Ranked,
    /// Uniform sample without replacement (NWGM-Random).
    Random(&'r mut R),
}

impl DemoStore {
    pub fn index(demos: Vec<Demonstration>, encoder: &dyn Encoder) -> Result<Self, RetrievalError> {
        let wrong_matrix = demos
            .iter()
            .map(|d| encoder.embed(&d.wrong_cot().text))
            .collect::<Result<Vec<_>, _>>()?;
        let sentence_matrix = demos
            .iter()
            .map(|d| encoder.embed(d.sentence().text()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            entries: demos,
            wrong_matrix,
            sentence_matrix,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Demonstration] {
        &self.entries
    }

    pub fn wrong_embedding(&self, j: usize) -> &EmbeddingVector {
        &self.wrong_matrix[j]
    }

    pub fn sentence_embedding(&self, j: usize) -> &EmbeddingVector {
        &self.sentence_matrix[j]
    }

    fn check_dim(&self, probe: &EmbeddingVector) -> Result<(), RetrievalError> {
        match self.wrong_matrix.first() {
            Some(row) if row.dim() != probe.dim() => Err(RetrievalError::DimensionMismatch {
                probe: probe.dim(),
                store: row.dim(),
            }),
            _ => Ok(()),
        }
    }

    fn rank_rows<'a>(
        &'a self,
        rows: &[EmbeddingVector],
        probe: &EmbeddingVector,
        exclude_sentence_id: Option<&str>,
    ) -> Result<Vec<Ranked<'a>>, RetrievalError> {
        self.check_dim(probe)?;
        let mut ranked = self
            .entries
            .iter()
            .zip(rows)
            .enumerate()
            .filter(|(_, (d, _))| exclude_sentence_id != Some(d.sentence().id()))
            .map(|(index, (demo, row))| {
                Ok(Ranked {
                    index,
                    similarity: cosine(probe, row)?,
                    demo,
                })
            })
            .collect::<Result<Vec<_>, RetrievalError>>()?;
        // Stable: equal similarities keep ascending entry order.
        ranked.sort_by(|a, b| b.similarity.total_cmp(&a.similarity));
        Ok(ranked)
    }

    /// Every entry, most similar wrong CoT first.
    pub fn rank_by_wrong_cot(&self, probe: &EmbeddingVector) -> Result<Vec<Ranked<'_>>, RetrievalError> {
        self.rank_rows(&self.wrong_matrix, probe, None)
    }

    /// Same as [`Self::rank_by_wrong_cot`] but drops entries whose sentence id
    /// equals the test sentence id.
    pub fn rank_by_wrong_cot_excluding(
        &self,
        probe: &EmbeddingVector,
        test_sentence_id: &str,
    ) -> Result<Vec<Ranked<'_>>, RetrievalError> {
        self.rank_rows(&self.wrong_matrix, probe, Some(test_sentence_id))
    }

    /// Top-`r` entries by sentence similarity, most similar first.
    pub fn select_stage1_demos(
        &self,
        test_sentence_embedding: &EmbeddingVector,
        r: usize,
        test_sentence_id: Option<&str>,
    ) -> Result<Vec<Demonstration>, RetrievalError> {
        Ok(self
            .rank_rows(&self.sentence_matrix, test_sentence_embedding, test_sentence_id)?
            .into_iter()
            .take(r)
            .map(|row| row.demo.clone())
            .collect())
    }
}

/// First `min(l, J)` entries of `ranked`, or a uniform sample of that size.
/// Sampled entries keep their ranked order.
pub fn take_top<R: Rng>(ranked: &[Ranked<'_>], l: usize, selection: TopSelection<'_, R>) -> Vec<Demonstration> {
    let size = l.min(ranked.len());
    match selection {
        TopSelection::Ranked => ranked[..size].iter().map(|r| r.demo.clone()).collect(),
        TopSelection::Random(rng) => {
            let mut picked = rand::seq::index::sample(rng, ranked.len(), size).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| ranked[i].demo.clone()).collect()
        }
    }
}

/// On-disk form of one demonstration. Embeddings are never persisted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreRecord {
    pub id: String,
    pub sentence: String,
    pub aspect: String,
    pub gold: String,
    pub wrong_cot: String,
    pub correct_cot: String,
}

impl StoreRecord {
    pub fn from_demo(d: &Demonstration) -> Self {
        Self {
            id: d.sentence().id().to_string(),
            sentence: d.sentence().text().to_string(),
            aspect: d.aspect().surface().to_string(),
            gold: d.gold().to_string(),
            wrong_cot: d.wrong_cot().text.clone(),
            correct_cot: d.correct_cot().text.clone(),
        }
    }

    pub fn into_demo(self, scheme: LabelScheme) -> Result<Demonstration, String> {
        let gold = normalize_label(&self.gold, scheme).map_err(|e| e.to_string())?;
        let err = |e: ModelError| e.to_string();
        Demonstration::new(
            Sentence::new(self.id, self.sentence).map_err(err)?,
            AspectTerm::new(self.aspect).map_err(err)?,
            gold,
            ChainOfThought::parsed(self.wrong_cot, 1, scheme),
            ChainOfThought::parsed(self.correct_cot, 2, scheme),
        )
        .map_err(err)
    }
}

pub fn save_store_jsonl(demos: &[Demonstration], path: &Path) -> Result<(), RetrievalError> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for d in demos {
        let line = serde_json::to_string(&StoreRecord::from_demo(d)).map_err(std::io::Error::other)?;
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_store_jsonl(path: &Path, scheme: LabelScheme) -> Result<Vec<Demonstration>, RetrievalError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut demos = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| RetrievalError::MalformedLine {
            path: path.display().to_string(),
            line: i + 1,
            reason,
        };
        let record: StoreRecord = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        demos.push(record.into_demo(scheme).map_err(malformed)?);
    }
    Ok(demos)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::encoder::LocalEncoder;
    use crate::model::Polarity;

    fn demo(id: &str, sentence: &str, wrong: &str) -> Demonstration {
        let scheme = LabelScheme::ThreeClass;
        Demonstration::new(
            Sentence::new(id, sentence).unwrap(),
            AspectTerm::new("service").unwrap(),
            Polarity::Negative,
            ChainOfThought::parsed(format!("{wrong} so positive"), 1, scheme),
            ChainOfThought::parsed("it was bad so negative", 2, scheme),
        )
        .unwrap()
    }

    fn store() -> DemoStore {
        DemoStore::index(
            vec![
                demo("a", "The waiter was rude", "rudeness shows confidence"),
                demo("b", "Food came out cold", "cold food is refreshing"),
                demo("c", "The bill was huge", "a huge bill means luxury"),
            ],
            &LocalEncoder::default(),
        )
        .unwrap()
    }

    #[test]
    fn indexing_builds_unit_rows() {
        let s = store();
        assert_eq!(s.len(), 3);
        for j in 0..3 {
            assert!((s.wrong_embedding(j).norm() - 1.0).abs() < 1e-9);
            assert!((s.sentence_embedding(j).norm() - 1.0).abs() < 1e-9);
        }
        let again = store();
        assert_eq!(again.wrong_embedding(1), s.wrong_embedding(1));
    }

    #[test]
    fn exact_probe_ranks_first() {
        let s = store();
        let probe = s.wrong_embedding(1).clone();
        let ranked = s.rank_by_wrong_cot(&probe).unwrap();
        assert_eq!(ranked[0].index, 1);
        assert!((ranked[0].similarity - 1.0).abs() < 1e-12);
        let mut indices: Vec<_> = ranked.iter().map(|r| r.index).collect();
        indices.sort_unstable();
        assert_eq!(indices, [0, 1, 2]);
        assert!(ranked.windows(2).all(|w| w[0].similarity >= w[1].similarity));
    }

    #[test]
    fn ties_keep_entry_order() {
        let encoder = LocalEncoder::default();
        let s = DemoStore::index(
            vec![demo("a", "x one", "same wrong"), demo("b", "x two", "same wrong"), demo("c", "x three", "other")],
            &encoder,
        )
        .unwrap();
        let probe = encoder.embed("same wrong so positive").unwrap();
        let ranked = s.rank_by_wrong_cot(&probe).unwrap();
        assert_eq!((ranked[0].index, ranked[1].index), (0, 1));
    }

    #[test]
    fn leakage_guard_and_empty_store() {
        let s = store();
        let probe = s.wrong_embedding(0).clone();
        let ranked = s.rank_by_wrong_cot_excluding(&probe, "a").unwrap();
        assert!(ranked.iter().all(|r| r.demo.sentence().id() != "a"));
        assert_eq!(ranked.len(), 2);

        let empty = DemoStore::index(Vec::new(), &LocalEncoder::default()).unwrap();
        assert!(empty.rank_by_wrong_cot(&probe).unwrap().is_empty());
        assert!(empty.select_stage1_demos(&probe, 3, None).unwrap().is_empty());
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let probe = EmbeddingVector::normalized(vec![1.0, 0.0]).unwrap();
        assert!(matches!(store().rank_by_wrong_cot(&probe), Err(RetrievalError::DimensionMismatch { .. })));
    }

    #[test]
    fn stage1_selection_sizes() {
        let s = store();
        let probe = LocalEncoder::default().embed("The waiter was rude to us").unwrap();
        assert!(s.select_stage1_demos(&probe, 0, None).unwrap().is_empty());
        assert_eq!(s.select_stage1_demos(&probe, 10, None).unwrap().len(), 3);
        let top = s.select_stage1_demos(&probe, 1, None).unwrap();
        assert_eq!(top[0].sentence().id(), "a");
    }

    #[test]
    fn take_top_modes() {
        let s = store();
        let ranked = s.rank_by_wrong_cot(s.wrong_embedding(2)).unwrap();
        let top = take_top::<ChaCha8Rng>(&ranked, 2, TopSelection::Ranked);
        assert_eq!(top.len(), 2);
        assert_eq!(top[0].sentence().id(), "c");
        assert!(take_top::<ChaCha8Rng>(&ranked, 0, TopSelection::Ranked).is_empty());

        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            take_top(&ranked, 2, TopSelection::Random(&mut rng))
                .iter()
                .map(|d| d.sentence().id().to_string())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(11), draw(11));
        assert_eq!(draw(11).len(), 2);
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        let demos = store().entries().to_vec();
        save_store_jsonl(&demos, &path).unwrap();
        let loaded = load_store_jsonl(&path, LabelScheme::ThreeClass).unwrap();
        assert_eq!(loaded.len(), 3);
        assert_eq!(StoreRecord::from_demo(&loaded[2]), StoreRecord::from_demo(&demos[2]));

        fs::write(&path, "{\"id\": \"x\"}\n").unwrap();
        assert!(matches!(
            load_store_jsonl(&path, LabelScheme::ThreeClass),
            Err(RetrievalError::MalformedLine { line: 1, .. })
        ));
    }
}
