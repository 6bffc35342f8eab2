use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::OrchestratorError;
use crate::backend::{resolve_path, BackendKind, BackendSpec};
use crate::corpus::{FilterConfig, DEFAULT_WINDOW_SIZES};
use crate::prompt::{builtin_templates, PromptMode, PromptTemplate, TemplateFamily};
use crate::vote::EnsembleConfig;

/// One ensemble member: a backend plus the template its prompts use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberConfig {
    /// A key of `[templates]` or a built-in family (`llama2`, `alpaca`, `vicuna`).
    pub template: String,
    #[serde(flatten)]
    pub spec: BackendSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum RunMode {
    Mvp,
    /// One backend sampled `samples` times; each sample is a voter.
    SelfConsistency { samples: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub documents: usize,
    #[serde(default = "half")]
    pub positive_rate: f64,
}

fn half() -> f64 {
    0.5
}

fn default_sizes() -> Vec<usize> {
    DEFAULT_WINDOW_SIZES.to_vec()
}

fn default_parallelism() -> usize {
    4
}

fn default_mode() -> RunMode {
    RunMode::Mvp
}

fn default_prompt_mode() -> PromptMode {
    PromptMode::Cot
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub run_id: String,
    #[serde(default)]
    pub seed: u64,
    /// Run directories are created under this path.
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// JSONL corpus; mutually exclusive with `[synthetic]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
    /// JSONL of gold labels for a file corpus.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<PathBuf>,
    pub terms: PathBuf,
    pub classes: Vec<String>,
    /// Extra aliases accepted when normalizing answers, e.g. `GCA = ["GCA"]`.
    #[serde(default)]
    pub abbreviations: BTreeMap<String, Vec<String>>,
    #[serde(default = "default_sizes")]
    pub context_sizes: Vec<usize>,
    /// Keep at most this many documents per class (in document-id order).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_documents_per_class: Option<usize>,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default = "default_mode")]
    pub mode: RunMode,
    #[serde(default = "default_prompt_mode")]
    pub prompt_mode: PromptMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identification_threshold: Option<usize>,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub templates: BTreeMap<String, PathBuf>,
    pub backends: Vec<MemberConfig>,
    /// Paths are resolved against this directory (the config file's).
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, OrchestratorError> {
        toml::from_str(text).map_err(|e| OrchestratorError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, OrchestratorError> {
        let text = std::fs::read_to_string(path).map_err(|e| OrchestratorError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        Ok(cfg)
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        resolve_path(self.base_dir.as_deref(), path)
    }

    pub fn run_dir(&self) -> PathBuf {
        self.resolve(&self.output_dir).join(&self.run_id)
    }

    /// Digest of everything that determines the transcript.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    /// Voting members in ballot order.
    pub fn member_ids(&self) -> Vec<String> {
        match self.mode {
            RunMode::Mvp => self.backends.iter().map(|b| b.spec.backend_id.clone()).collect(),
            RunMode::SelfConsistency { samples } => {
                let id = &self.backends[0].spec.backend_id;
                (0..samples).map(|i| format!("{id}#{i}")).collect()
            }
        }
    }

    pub fn ensemble(&self) -> Result<EnsembleConfig, OrchestratorError> {
        let cfg = EnsembleConfig::new(self.member_ids())?;
        Ok(match self.identification_threshold {
            Some(t) => cfg.with_threshold(t)?,
            None => cfg,
        })
    }

    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let bad = |m: String| Err(OrchestratorError::Config(m));
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) || self.run_id.starts_with('.') {
            return bad(format!("run_id `{}` is not a plain directory name", self.run_id));
        }
        match (&self.corpus, &self.synthetic) {
            (Some(_), Some(_)) => return bad("give either `corpus` or `[synthetic]`, not both".into()),
            (None, None) => return bad("one of `corpus` or `[synthetic]` is required".into()),
            _ => {}
        }
        if let Some(s) = &self.synthetic {
            if s.documents == 0 || !(0.0..=1.0).contains(&s.positive_rate) {
                return bad("synthetic corpus needs documents >= 1 and positive_rate in [0, 1]".into());
            }
        }
        if self.classes.is_empty() {
            return bad("`classes` is empty".into());
        }
        if self.classes.iter().collect::<BTreeSet<_>>().len() != self.classes.len() {
            return bad("`classes` has duplicates".into());
        }
        if self.context_sizes.is_empty() || self.context_sizes.contains(&0) {
            return bad("`context_sizes` must be non-empty and positive".into());
        }
        if self.context_sizes.iter().collect::<BTreeSet<_>>().len() != self.context_sizes.len() {
            return bad("`context_sizes` has duplicates".into());
        }
        if self.parallelism == 0 {
            return bad("`parallelism` must be at least 1".into());
        }
        self.filter.validate()?;
        if self.backends.is_empty() {
            return bad("no backends configured".into());
        }
        let mut ids = BTreeSet::new();
        for b in &self.backends {
            b.spec.validate()?;
            if b.spec.backend_id.contains('#') {
                return bad(format!("backend id `{}` may not contain `#`", b.spec.backend_id));
            }
            if !ids.insert(&b.spec.backend_id) {
                return bad(format!("duplicate backend `{}`", b.spec.backend_id));
            }
        }
        if let RunMode::SelfConsistency { samples } = self.mode {
            if self.backends.len() != 1 {
                return bad("self-consistency samples exactly one backend".into());
            }
            if samples < 2 {
                return bad("self-consistency needs at least 2 samples".into());
            }
            let b = &self.backends[0].spec;
            if b.kind == BackendKind::Live && b.temperature <= 0.0 {
                return bad("self-consistency needs temperature > 0".into());
            }
        }
        self.ensemble()?;
        Ok(())
    }

    /// Loads the template a member uses, in the configured prompt mode.
    pub fn template_for(&self, member: &MemberConfig) -> Result<PromptTemplate, OrchestratorError> {
        let template = match self.templates.get(&member.template) {
            Some(path) => PromptTemplate::load(&self.resolve(path))?,
            None => {
                let family: TemplateFamily = member.template.parse()?;
                builtin_templates()
                    .remove(&family)
                    .ok_or_else(|| OrchestratorError::Config(format!("no built-in template for `{}`", member.template)))?
            }
        };
        let template = template.with_mode(self.prompt_mode);
        crate::prompt::validate_template(&template).map_err(|v| {
            OrchestratorError::Config(format!(
                "template `{}`: {}",
                member.template,
                v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
            ))
        })?;
        Ok(template)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        run_id = "r1"
        seed = 3
        terms = "terms.tsv"
        classes = ["B", "GCA"]
        context_sizes = [32, 64]

        [synthetic]
        documents = 20

        [filter]
        max_doc_frequency = 1.0

        [[backends]]
        backend_id = "llama2"
        kind = "scripted-mock"
        template = "llama2"
        mock = { behavior = "accuracy", p = 0.9, seed = 1 }

        [[backends]]
        backend_id = "vicuna"
        kind = "scripted-mock"
        template = "vicuna"
        mock = { behavior = "always-correct" }
    "#;

    #[test]
    fn parses_and_validates() {
        let cfg = RunConfig::parse(MINIMAL).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.member_ids(), vec!["llama2", "vicuna"]);
        assert_eq!(cfg.ensemble().unwrap().threshold(), 1);
        assert_eq!(cfg.filter.min_term_chars, 4);
        assert_eq!(cfg.parallelism, 4);
        assert_eq!(cfg.mode, RunMode::Mvp);
        let t = cfg.template_for(&cfg.backends[1]).unwrap();
        assert_eq!(t.id, "vicuna-cot");
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = RunConfig::parse(MINIMAL).unwrap();
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.seed = 4;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn rejects_bad_configs() {
        let base = RunConfig::parse(MINIMAL).unwrap();
        let mut c = base.clone();
        c.classes.clear();
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.corpus = Some("x.jsonl".into());
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.backends[1].spec.backend_id = "llama2".into();
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.mode = RunMode::SelfConsistency { samples: 3 };
        assert!(c.validate().is_err(), "two backends");
        c.backends.truncate(1);
        c.validate().unwrap();
        assert_eq!(c.member_ids(), vec!["llama2#0", "llama2#1", "llama2#2"]);
        c.mode = RunMode::SelfConsistency { samples: 1 };
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.run_id = "../x".into();
        assert!(c.validate().is_err());
        let mut c = base;
        c.identification_threshold = Some(3);
        assert!(c.validate().is_err());
    }

    #[test]
    fn self_consistency_live_needs_temperature() {
        let mut c = RunConfig::parse(MINIMAL).unwrap();
        c.backends.truncate(1);
        c.backends[0].spec = BackendSpec::live("llama2", "http://localhost:1", None);
        c.mode = RunMode::SelfConsistency { samples: 4 };
        assert!(c.validate().is_err());
        c.backends[0].spec.temperature = 0.7;
        c.validate().unwrap();
    }
}
