//! Generation backends: live HTTP chat/completions, scripted mocks and replay archives.

mod live;
mod mock;
mod replay;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::RenderedPrompt;

pub use live::{LiveClient, RetryPolicy};
pub use mock::{MockBehavior, MockGold, MockScript, ScriptedMock};
pub use replay::{record_replay_capture, ReplayArchive, ReplayBackend, ReplayRecord};

pub const DEFAULT_MAX_TOKENS: u32 = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    Live,
    ScriptedMock,
    Replay,
}

fn default_max_tokens() -> u32 {
    DEFAULT_MAX_TOKENS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendSpec {
    pub backend_id: String,
    pub kind: BackendKind,
    /// Chat/completions URL (live only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    /// Model name sent on the wire; defaults to `backend_id`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default)]
    pub temperature: f64,
    /// Name of the environment variable holding the API key.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub credentials_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock: Option<MockScript>,
    /// Replay archive path (replay only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub archive: Option<PathBuf>,
}

impl BackendSpec {
    pub fn mock(backend_id: impl Into<String>, script: MockScript) -> Self {
        Self {
            backend_id: backend_id.into(),
            kind: BackendKind::ScriptedMock,
            endpoint: None,
            model: None,
            max_tokens: DEFAULT_MAX_TOKENS,
            temperature: 0.0,
            credentials_ref: None,
            mock: Some(script),
            archive: None,
        }
    }

    pub fn live(backend_id: impl Into<String>, endpoint: impl Into<String>, credentials_ref: Option<String>) -> Self {
        Self {
            backend_id: backend_id.into(),
            kind: BackendKind::Live,
            endpoint: Some(endpoint.into()),
            model: None,
            max_tokens: DEFAULT_MAX_TOKENS,
            temperature: 0.0,
            credentials_ref,
            mock: None,
            archive: None,
        }
    }

    pub fn replay(backend_id: impl Into<String>, archive: impl Into<PathBuf>) -> Self {
        Self {
            backend_id: backend_id.into(),
            kind: BackendKind::Replay,
            endpoint: None,
            model: None,
            max_tokens: DEFAULT_MAX_TOKENS,
            temperature: 0.0,
            credentials_ref: None,
            mock: None,
            archive: Some(archive.into()),
        }
    }

    pub fn model_name(&self) -> &str {
        self.model.as_deref().unwrap_or(&self.backend_id)
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let invalid = |msg: String| Err(BackendError::InvalidSpec(format!("{}: {msg}", self.backend_id)));
        if self.backend_id.trim().is_empty() {
            return invalid("empty backend_id".into());
        }
        if self.max_tokens < 1 {
            return invalid("max_tokens must be at least 1".into());
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return invalid(format!("temperature {} must be a non-negative number", self.temperature));
        }
        match self.kind {
            BackendKind::Live if self.endpoint.is_none() => invalid("live backend needs an endpoint".into()),
            BackendKind::ScriptedMock => match &self.mock {
                None => invalid("scripted-mock backend needs a [mock] script".into()),
                Some(script) => script.validate().map_err(|m| BackendError::InvalidSpec(format!("{}: {m}", self.backend_id))),
            },
            BackendKind::Replay if self.archive.is_none() => invalid("replay backend needs an archive path".into()),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("invalid backend spec: {0}")]
    InvalidSpec(String),
    #[error("backend {backend_id} unavailable after {attempts} attempt(s): {message}")]
    Unavailable {
        backend_id: String,
        attempts: u32,
        message: String,
    },
    #[error("backend {backend_id} rejected the credentials: {message}")]
    Credential { backend_id: String, message: String },
    #[error("credential variable {var} for backend {backend_id} is not set")]
    MissingCredential { backend_id: String, var: String },
    #[error("backend {backend_id} returned an unusable response: {message}")]
    MalformedResponse { backend_id: String, message: String },
    #[error("no gold label for {0}; scripted mocks need one per window")]
    MissingGold(String),
    #[error("canned map of {backend_id} has no entry for prompt {prompt_hash}")]
    MissingCannedEntry { backend_id: String, prompt_hash: String },
    #[error("replay archive has no entry for {backend_id} / {prompt_hash}")]
    MissingReplayEntry { backend_id: String, prompt_hash: String },
    #[error("replay archive already holds a different text for {backend_id} / {prompt_hash}")]
    ReplayCollision { backend_id: String, prompt_hash: String },
    #[error("replay archive {path}: {message}")]
    Archive { path: String, message: String },
    #[error("parallelism must be at least 1")]
    ZeroParallelism,
}

/// Text returned by one generator call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    pub raw_text: String,
    pub attempt_count: u32,
}

/// One generation request. `member_id` names the voting member (it differs
/// from the backend id in self-consistency mode); `sample` distinguishes
/// repeated draws for the same prompt.
#[derive(Debug, Clone, Copy)]
pub struct GenerationRequest<'a> {
    pub member_id: &'a str,
    pub prompt: &'a RenderedPrompt,
    pub sample: u32,
}

pub trait Generator: Send + Sync {
    fn generate(&self, request: &GenerationRequest<'_>) -> Result<Generation, BackendError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationResult {
    pub backend_id: String,
    pub prompt_hash: String,
    pub raw_text: String,
    pub latency: Duration,
    pub attempt_count: u32,
}

/// What a backend needs from the run besides its own spec.
#[derive(Debug, Clone, Default)]
pub struct BuildContext {
    pub gold: Arc<MockGold>,
    pub retry: RetryPolicy,
    /// Base directory for relative archive paths.
    pub base_dir: Option<PathBuf>,
}

/// A validated spec with its generator.
pub struct Backend {
    pub spec: BackendSpec,
    generator: Box<dyn Generator>,
}

impl std::fmt::Debug for Backend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backend").field("spec", &self.spec).finish_non_exhaustive()
    }
}

impl Backend {
    pub fn build(spec: BackendSpec, ctx: &BuildContext) -> Result<Self, BackendError> {
        spec.validate()?;
        let generator: Box<dyn Generator> = match spec.kind {
            BackendKind::Live => Box::new(LiveClient::new(&spec, ctx.retry.clone())?),
            BackendKind::ScriptedMock => Box::new(ScriptedMock::new(
                &spec.backend_id,
                spec.mock.clone().expect("validated"),
                ctx.gold.clone(),
            )),
            BackendKind::Replay => {
                let path = resolve_path(ctx.base_dir.as_deref(), spec.archive.as_ref().expect("validated"));
                Box::new(ReplayBackend::new(Arc::new(ReplayArchive::load(&path)?)))
            }
        };
        Ok(Self { spec, generator })
    }

    /// Wraps any generator, e.g. a test double.
    pub fn with_generator(spec: BackendSpec, generator: Box<dyn Generator>) -> Self {
        Self { spec, generator }
    }

    pub fn id(&self) -> &str {
        &self.spec.backend_id
    }

    pub fn generate_as(&self, member_id: &str, prompt: &RenderedPrompt, sample: u32) -> Result<GenerationResult, BackendError> {
        let start = Instant::now();
        let g = self.generator.generate(&GenerationRequest {
            member_id,
            prompt,
            sample,
        })?;
        Ok(GenerationResult {
            backend_id: member_id.to_string(),
            prompt_hash: prompt.content_hash.clone(),
            raw_text: g.raw_text,
            latency: start.elapsed(),
            attempt_count: g.attempt_count,
        })
    }

    pub fn generate(&self, prompt: &RenderedPrompt) -> Result<GenerationResult, BackendError> {
        self.generate_as(self.id(), prompt, 0)
    }
}

/// One unit of batch work.
#[derive(Debug, Clone, Copy)]
pub struct Job<'a> {
    pub backend: &'a Backend,
    pub member_id: &'a str,
    pub prompt: &'a RenderedPrompt,
    pub sample: u32,
}

pub type BatchKey = (String, String);
pub type BatchResults = BTreeMap<BatchKey, Result<GenerationResult, BackendError>>;

/// Runs jobs on a pool of `parallelism` threads. Results come back in job
/// order regardless of completion order.
pub fn run_jobs(jobs: &[Job<'_>], parallelism: usize) -> Result<Vec<Result<GenerationResult, BackendError>>, BackendError> {
    if parallelism == 0 {
        return Err(BackendError::ZeroParallelism);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| BackendError::InvalidSpec(format!("thread pool: {e}")))?;
    Ok(pool.install(|| {
        jobs.par_iter()
            .map(|j| j.backend.generate_as(j.member_id, j.prompt, j.sample))
            .collect()
    }))
}

/// Every (backend, prompt) pair, keyed by (backend_id, prompt_hash).
/// Prompts with the same hash are generated once per backend.
pub fn generate_batch(backends: &[Backend], prompts: &[RenderedPrompt], parallelism: usize) -> Result<BatchResults, BackendError> {
    let mut unique: BTreeMap<&str, &RenderedPrompt> = BTreeMap::new();
    for p in prompts {
        unique.entry(p.content_hash.as_str()).or_insert(p);
    }
    let jobs: Vec<Job<'_>> = backends
        .iter()
        .flat_map(|b| {
            unique.values().map(move |p| Job {
                backend: b,
                member_id: b.id(),
                prompt: p,
                sample: 0,
            })
        })
        .collect();
    let results = run_jobs(&jobs, parallelism)?;
    Ok(jobs
        .iter()
        .zip(results)
        .map(|(j, r)| ((j.member_id.to_string(), j.prompt.content_hash.clone()), r))
        .collect())
}

pub(crate) fn resolve_path(base: Option<&Path>, path: &Path) -> PathBuf {
    match base {
        Some(b) if path.is_relative() => b.join(path),
        _ => path.to_path_buf(),
    }
}
