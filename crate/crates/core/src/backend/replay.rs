use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{generate_batch, Backend, BackendError, Generation, GenerationRequest, Generator};
use crate::prompt::RenderedPrompt;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub prompt_hash: String,
    pub backend_id: String,
    pub raw_text: String,
}

/// Recorded generations keyed by (backend_id, prompt_hash).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReplayArchive {
    entries: BTreeMap<(String, String), String>,
}

impl ReplayArchive {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, backend_id: &str, prompt_hash: &str) -> Option<&str> {
        self.entries
            .get(&(backend_id.to_string(), prompt_hash.to_string()))
            .map(String::as_str)
    }

    /// Adds a record. Re-adding the same text is a no-op; a different text
    /// under an existing key is a collision.
    pub fn insert(&mut self, record: ReplayRecord) -> Result<(), BackendError> {
        let key = (record.backend_id, record.prompt_hash);
        match self.entries.get(&key) {
            Some(existing) if *existing != record.raw_text => Err(BackendError::ReplayCollision {
                backend_id: key.0,
                prompt_hash: key.1,
            }),
            Some(_) => Ok(()),
            None => {
                self.entries.insert(key, record.raw_text);
                Ok(())
            }
        }
    }

    pub fn records(&self) -> impl Iterator<Item = ReplayRecord> + '_ {
        self.entries.iter().map(|((b, h), t)| ReplayRecord {
            prompt_hash: h.clone(),
            backend_id: b.clone(),
            raw_text: t.clone(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let err = |message: String| BackendError::Archive {
            path: path.display().to_string(),
            message,
        };
        let file = File::open(path).map_err(|e| err(e.to_string()))?;
        let mut archive = Self::default();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| err(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: ReplayRecord = serde_json::from_str(&line).map_err(|e| err(format!("line {}: {e}", i + 1)))?;
            archive.insert(record)?;
        }
        Ok(archive)
    }

    /// Writes all records, sorted by key, one JSON object per line.
    pub fn save(&self, path: &Path) -> Result<(), BackendError> {
        let err = |e: std::io::Error| BackendError::Archive {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(err)?;
        }
        let tmp = path.with_extension("jsonl.tmp");
        let mut f = File::create(&tmp).map_err(err)?;
        for r in self.records() {
            writeln!(f, "{}", serde_json::to_string(&r).expect("record serializes")).map_err(err)?;
        }
        f.sync_all().map_err(err)?;
        fs::rename(&tmp, path).map_err(err)
    }
}

/// Answers from an archive; the lookup key is the requesting member id.
pub struct ReplayBackend {
    archive: Arc<ReplayArchive>,
}

impl ReplayBackend {
    pub fn new(archive: Arc<ReplayArchive>) -> Self {
        Self { archive }
    }
}

impl Generator for ReplayBackend {
    fn generate(&self, req: &GenerationRequest<'_>) -> Result<Generation, BackendError> {
        self.archive
            .get(req.member_id, &req.prompt.content_hash)
            .map(|t| Generation {
                raw_text: t.to_string(),
                attempt_count: 1,
            })
            .ok_or_else(|| BackendError::MissingReplayEntry {
                backend_id: req.member_id.to_string(),
                prompt_hash: req.prompt.content_hash.clone(),
            })
    }
}

/// Generates every prompt with `backend` and stores the texts in the archive
/// at `out`, merging with any records already there. Fails on the first
/// generation error or on a collision with an existing record.
pub fn record_replay_capture(
    backend: &Backend,
    prompts: &[RenderedPrompt],
    out: &Path,
    parallelism: usize,
) -> Result<ReplayArchive, BackendError> {
    let mut archive = if out.exists() {
        ReplayArchive::load(out)?
    } else {
        ReplayArchive::default()
    };
    let results = generate_batch(std::slice::from_ref(backend), prompts, parallelism)?;
    for (_, result) in results {
        let g = result?;
        archive.insert(ReplayRecord {
            prompt_hash: g.prompt_hash,
            backend_id: g.backend_id,
            raw_text: g.raw_text,
        })?;
    }
    archive.save(out)?;
    Ok(archive)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::tests::prompt;
    use crate::backend::{BackendSpec, BuildContext, MockScript};

    fn canned(prompts: &[RenderedPrompt], suffix: &str) -> Backend {
        let map = prompts
            .iter()
            .map(|p| (p.content_hash.clone(), format!("{} {suffix}", p.text)))
            .collect();
        Backend::build(BackendSpec::mock("m", MockScript::canned(map)), &BuildContext::default()).unwrap()
    }

    #[test]
    fn capture_then_replay_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("arch.jsonl");
        let prompts: Vec<RenderedPrompt> = (0..5).map(|i| prompt(&format!("d{i}"), &format!("text {i}"))).collect();
        let source = canned(&prompts, "out");
        let archive = record_replay_capture(&source, &prompts, &path, 2).unwrap();
        assert_eq!(archive.len(), 5);

        let spec = BackendSpec::replay("m", &path);
        let replay = Backend::build(spec, &BuildContext::default()).unwrap();
        for p in &prompts {
            assert_eq!(replay.generate(p).unwrap().raw_text, source.generate(p).unwrap().raw_text);
        }
        let missing = replay.generate(&prompt("d9", "never recorded")).unwrap_err();
        assert!(matches!(missing, BackendError::MissingReplayEntry { .. }));
    }

    #[test]
    fn recapture_with_different_text_collides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("arch.jsonl");
        let prompts = vec![prompt("d0", "same")];
        record_replay_capture(&canned(&prompts, "first"), &prompts, &path, 1).unwrap();
        record_replay_capture(&canned(&prompts, "first"), &prompts, &path, 1).unwrap();
        let err = record_replay_capture(&canned(&prompts, "second"), &prompts, &path, 1).unwrap_err();
        assert!(matches!(err, BackendError::ReplayCollision { .. }));
    }

    #[test]
    fn replay_filters_by_member() {
        let mut a = ReplayArchive::default();
        a.insert(ReplayRecord {
            prompt_hash: "h".into(),
            backend_id: "x".into(),
            raw_text: "t".into(),
        })
        .unwrap();
        assert_eq!(a.get("x", "h"), Some("t"));
        assert_eq!(a.get("y", "h"), None);
    }
}
