use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::{
    prompt_fingerprint, BackendError, CallStats, Completion, GenerationBackend, GenerationRequest,
};

/// Script file contents: keys are either 64-hex prompt fingerprints or
/// aliases matched against the request tag.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Script {
    pub entries: BTreeMap<String, Vec<String>>,
}

impl Script {
    pub fn insert(&mut self, key: impl Into<String>, completions: Vec<String>) {
        self.entries.insert(key.into(), completions);
    }

    pub fn load(path: &Path) -> Result<Self, std::io::Error> {
        let raw = fs::read_to_string(path)?;
        serde_json::from_str(&raw).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    pub fn save(&self, path: &Path) -> Result<(), std::io::Error> {
        let json = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        fs::write(path, json + "\n")
    }
}

fn is_fingerprint(key: &str) -> bool {
    key.len() == 64 && key.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

/// Deterministic backend replaying a [`Script`]. Sample index `i` of a
/// request gets entry `i` of the matching completion list.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    by_fingerprint: BTreeMap<String, Vec<String>>,
    by_alias: BTreeMap<String, Vec<String>>,
    calls: AtomicU64,
}

impl ScriptedBackend {
    pub fn new(script: Script) -> Self {
        let (by_fingerprint, by_alias) = script
            .entries
            .into_iter()
            .partition(|(k, _)| is_fingerprint(k));
        Self {
            by_fingerprint,
            by_alias,
            calls: AtomicU64::new(0),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, std::io::Error> {
        Script::load(path).map(Self::new)
    }
}

impl GenerationBackend for ScriptedBackend {
    fn id(&self) -> &str {
        "scripted"
    }

    fn sample_completions(&self, request: &GenerationRequest) -> Result<Vec<Completion>, BackendError> {
        request.validate()?;
        self.calls.fetch_add(1, Ordering::Relaxed);
        let fingerprint = prompt_fingerprint(&request.prompt);
        let entries = self
            .by_fingerprint
            .get(&fingerprint)
            .or_else(|| self.by_alias.get(&request.request_tag));
        let available = entries.map_or(0, Vec::len);
        match entries {
            Some(entries) if entries.len() >= request.count => Ok(entries[..request.count]
                .iter()
                .map(|text| Completion {
                    text: text.clone(),
                    backend_id: self.id().to_string(),
                    cached: false,
                })
                .collect()),
            _ => Err(BackendError::ScriptMiss {
                fingerprint,
                tag: request.request_tag.clone(),
                needed: request.count,
                available,
            }),
        }
    }

    fn stats(&self) -> CallStats {
        CallStats {
            calls: self.calls.load(Ordering::Relaxed),
            retries: 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompting::PromptText;

    fn request(tag: &str, prompt: &str, count: usize) -> GenerationRequest {
        GenerationRequest {
            prompt: PromptText::raw(prompt),
            temperature: 0.7,
            count,
            max_tokens: 64,
            request_tag: tag.into(),
        }
    }

    #[test]
    fn returns_entries_in_index_order() {
        let mut script = Script::default();
        script.insert("item/cot", vec!["a".into(), "b".into(), "c".into()]);
        let backend = ScriptedBackend::new(script);
        let out = backend.sample_completions(&request("item/cot", "p", 3)).unwrap();
        let texts: Vec<_> = out.iter().map(|c| c.text.as_str()).collect();
        assert_eq!(texts, ["a", "b", "c"]);
        assert!(out.iter().all(|c| !c.cached && c.backend_id == "scripted"));
    }

    #[test]
    fn short_script_is_a_miss() {
        let mut script = Script::default();
        script.insert("item/cot", vec!["a".into(), "b".into(), "c".into()]);
        let backend = ScriptedBackend::new(script);
        assert!(matches!(
            backend.sample_completions(&request("item/cot", "p", 4)),
            Err(BackendError::ScriptMiss { needed: 4, available: 3, .. })
        ));
        assert!(matches!(
            backend.sample_completions(&request("other", "p", 1)),
            Err(BackendError::ScriptMiss { available: 0, .. })
        ));
    }

    #[test]
    fn fingerprint_keys_take_precedence() {
        let prompt = PromptText::raw("exact prompt");
        let mut script = Script::default();
        script.insert(prompt_fingerprint(&prompt), vec!["by-fp".into()]);
        script.insert("tag", vec!["by-alias".into()]);
        let backend = ScriptedBackend::new(script);
        let hit = backend.sample_completions(&request("tag", "exact prompt", 1)).unwrap();
        assert_eq!(hit[0].text, "by-fp");
        let alias = backend.sample_completions(&request("tag", "different", 1)).unwrap();
        assert_eq!(alias[0].text, "by-alias");
        assert_eq!(backend.stats().calls, 2);
    }

    #[test]
    fn script_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        let mut script = Script::default();
        script.insert("x/cot", vec!["one".into()]);
        script.save(&path).unwrap();
        assert_eq!(Script::load(&path).unwrap(), script);
    }
}
