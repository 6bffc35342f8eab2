use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BackendError, Generation, GenerationRequest, Generator};
use crate::corpus::{ContextWindow, GoldLabel, TermEntry};
use crate::parse::OTHER;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MockBehavior {
    AlwaysCorrect,
    AlwaysWrong,
    /// Each task is answered correctly with probability `p`.
    Accuracy,
    /// Answers come verbatim from `canned`, keyed by prompt hash.
    Canned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    pub behavior: MockBehavior,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Fraction of answers emitted without any JSON object.
    #[serde(default)]
    pub non_compliant_rate: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub canned: BTreeMap<String, String>,
}

impl MockScript {
    fn with(behavior: MockBehavior) -> Self {
        Self {
            behavior,
            p: None,
            seed: 0,
            non_compliant_rate: 0.0,
            canned: BTreeMap::new(),
        }
    }

    pub fn always_correct() -> Self {
        Self::with(MockBehavior::AlwaysCorrect)
    }

    pub fn always_wrong() -> Self {
        Self::with(MockBehavior::AlwaysWrong)
    }

    pub fn accuracy(p: f64, seed: u64) -> Self {
        Self {
            p: Some(p),
            seed,
            ..Self::with(MockBehavior::Accuracy)
        }
    }

    pub fn canned(map: BTreeMap<String, String>) -> Self {
        Self {
            canned: map,
            ..Self::with(MockBehavior::Canned)
        }
    }

    pub fn non_compliant(mut self, rate: f64) -> Self {
        self.non_compliant_rate = rate;
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.non_compliant_rate) {
            return Err(format!("non_compliant_rate {} outside [0, 1]", self.non_compliant_rate));
        }
        match (self.behavior, self.p) {
            (MockBehavior::Accuracy, None) => Err("accuracy mock needs p".into()),
            (MockBehavior::Accuracy, Some(p)) if !unit(p) => Err(format!("p {p} outside [0, 1]")),
            _ => Ok(()),
        }
    }
}

/// Gold labels and display names the scripted mocks answer from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MockGold {
    labels: HashMap<(String, String), bool>,
    /// disease_id → preferred label, in class order.
    names: BTreeMap<String, String>,
}

impl MockGold {
    pub fn new(terms: &[TermEntry], gold: &[GoldLabel]) -> Self {
        Self {
            labels: gold
                .iter()
                .map(|g| ((g.doc_id.clone(), g.disease_id.clone()), g.identification))
                .collect(),
            names: terms.iter().map(|t| (t.disease_id.clone(), t.preferred_label.clone())).collect(),
        }
    }

    /// Gold read from windows that carry labels.
    pub fn from_windows(terms: &[TermEntry], windows: &[ContextWindow]) -> Self {
        let gold: Vec<GoldLabel> = windows
            .iter()
            .filter_map(|w| {
                w.gold_identification.map(|identification| GoldLabel {
                    doc_id: w.doc_id.clone(),
                    disease_id: w.disease_id.clone(),
                    identification,
                })
            })
            .collect();
        Self::new(terms, &gold)
    }

    fn lookup(&self, doc_id: &str, disease_id: &str) -> Option<bool> {
        self.labels.get(&(doc_id.to_string(), disease_id.to_string())).copied()
    }

    fn display(&self, disease_id: &str) -> String {
        self.names.get(disease_id).cloned().unwrap_or_else(|| disease_id.to_string())
    }
}

/// Deterministic mock: output depends only on (seed, prompt hash, sample).
pub struct ScriptedMock {
    backend_id: String,
    script: MockScript,
    gold: Arc<MockGold>,
}

impl ScriptedMock {
    pub fn new(backend_id: &str, script: MockScript, gold: Arc<MockGold>) -> Self {
        Self {
            backend_id: backend_id.to_string(),
            script,
            gold,
        }
    }

    fn rng(&self, prompt_hash: &str, sample: u32) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.script.seed.to_le_bytes());
        h.update(prompt_hash.as_bytes());
        h.update(sample.to_le_bytes());
        ChaCha8Rng::from_seed(h.finalize().into())
    }

    fn wrong_label(&self, gold: &str, rng: &mut ChaCha8Rng) -> String {
        let others: Vec<&str> = self
            .gold
            .names
            .keys()
            .map(String::as_str)
            .chain(std::iter::once(OTHER))
            .filter(|id| *id != gold)
            .collect();
        others[rng.random_range(0..others.len())].to_string()
    }
}

const LEADS: &[&str] = &[
    "Based on the note, here is my answer.",
    "Let me read the context carefully.",
    "The patient's record was reviewed.",
    "Answer:",
];

impl Generator for ScriptedMock {
    fn generate(&self, req: &GenerationRequest<'_>) -> Result<Generation, BackendError> {
        let hash = &req.prompt.content_hash;
        if self.script.behavior == MockBehavior::Canned {
            return self
                .script
                .canned
                .get(hash)
                .map(|t| Generation {
                    raw_text: t.clone(),
                    attempt_count: 1,
                })
                .ok_or_else(|| BackendError::MissingCannedEntry {
                    backend_id: self.backend_id.clone(),
                    prompt_hash: hash.clone(),
                });
        }
        let w = &req.prompt.window_ref;
        let gold_ident = self
            .gold
            .lookup(&w.doc_id, &w.disease_id)
            .ok_or_else(|| BackendError::MissingGold(w.to_string()))?;
        let mut rng = self.rng(hash, req.sample);
        let (ident_ok, class_ok) = match self.script.behavior {
            MockBehavior::AlwaysCorrect => (true, true),
            MockBehavior::AlwaysWrong => (false, false),
            _ => {
                let p = self.script.p.unwrap_or(1.0);
                (rng.random::<f64>() < p, rng.random::<f64>() < p)
            }
        };
        let label = if class_ok {
            w.disease_id.clone()
        } else {
            self.wrong_label(&w.disease_id, &mut rng)
        };
        let label = if label == OTHER { OTHER.to_string() } else { self.gold.display(&label) };
        let lead = LEADS[rng.random_range(0..LEADS.len())];
        let non_compliant = rng.random::<f64>() < self.script.non_compliant_rate;
        let yes = gold_ident == ident_ok;
        let raw_text = if non_compliant {
            format!(
                "{lead} The text mentions {label}. It is {} that the patient has it.",
                if yes { "likely" } else { "unlikely" }
            )
        } else {
            format!(
                "{lead}\n{}",
                serde_json::json!({"answer": if yes { "yes" } else { "no" }, "disease": label})
            )
        };
        Ok(Generation {
            raw_text,
            attempt_count: 1,
        })
    }
}
