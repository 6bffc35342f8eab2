//! Seeded stand-in corpus with known labels, used for desk-scale runs.

use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{term_key, word_key, Document, TermEntry};

/// Reference label for one (document, disease) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldLabel {
    pub doc_id: String,
    pub disease_id: String,
    /// `true` when the patient currently has the disease.
    pub identification: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticCorpus {
    pub documents: Vec<Document>,
    pub gold: Vec<GoldLabel>,
}

const FILLER: &[&str] = &[
    "admitted", "afebrile", "ambulating", "appetite", "blood", "cardiology", "chest", "chronic", "clear",
    "consulted", "creatinine", "daily", "denies", "diet", "discharged", "dose", "edema", "electrolytes",
    "evaluated", "exam", "fluids", "follow-up", "given", "heart", "home", "imaging", "improved", "intake",
    "labs", "mild", "monitored", "morning", "nausea", "neuro", "normal", "notable", "nursing", "oral",
    "overnight", "oxygen", "pain", "physical", "plan", "pressure", "rate", "regimen", "renal", "repeat",
    "resolved", "rhythm", "saturation", "scheduled", "service", "soft", "stable", "status", "surgery",
    "therapy", "tolerated", "transferred", "trended", "unremarkable", "urine", "vitals", "walking", "weight",
    "well", "wound", "x-ray", "ordered", "continued", "remained", "noted", "reviewed", "started", "tapered",
];

const POSITIVE: &[&str] = &[
    "The patient was diagnosed with {} during this admission.",
    "Active {} confirmed on current workup and treatment was started.",
    "Patient presents with {} and remains under active management.",
    "Current admission notable for {} requiring inpatient care.",
];

const NEGATIVE: &[&str] = &[
    "Family history of {} in the patient's mother.",
    "Patient had {} in the past which has fully resolved.",
    "Remote history of {} with no current symptoms.",
    "Father was treated for {} years ago.",
];

fn sentence(rng: &mut ChaCha8Rng, vocab: &[&str]) -> String {
    let n = rng.random_range(6..=14);
    let mut words: Vec<String> = (0..n).map(|_| vocab.choose(rng).unwrap().to_string()).collect();
    if let Some(first) = words.first_mut() {
        let mut cs = first.chars();
        if let Some(c) = cs.next() {
            *first = c.to_uppercase().chain(cs).collect();
        }
    }
    let mut s = words.join(" ");
    s.push('.');
    s
}

/// Generates `n_docs` notes, each embedding exactly one disease mention.
///
/// The positive share of gold labels follows `positive_rate`; negative notes
/// phrase the mention as family history or a resolved past condition.
/// Output is a pure function of the arguments.
///
/// # Panics
///
/// If `positive_rate` is outside `[0, 1]` or `diseases` is empty while
/// `n_docs > 0`.
pub fn generate_synthetic_corpus(
    seed: u64,
    n_docs: usize,
    diseases: &[TermEntry],
    positive_rate: f64,
) -> SyntheticCorpus {
    assert!((0.0..=1.0).contains(&positive_rate), "positive_rate must lie in [0, 1]");
    assert!(n_docs == 0 || !diseases.is_empty(), "at least one disease is required");

    // Filler words never collide with a word of any disease term.
    let reserved: HashSet<String> = diseases
        .iter()
        .flat_map(|d| d.surface_forms().filter_map(term_key).collect::<Vec<_>>())
        .flat_map(|k| k.split(' ').map(str::to_string).collect::<Vec<_>>())
        .collect();
    let vocab: Vec<&str> = FILLER.iter().copied().filter(|w| !reserved.contains(&word_key(w))).collect();
    assert!(!vocab.is_empty(), "disease terms exhaust the filler vocabulary");

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut documents = Vec::with_capacity(n_docs);
    let mut gold = Vec::with_capacity(n_docs);
    for i in 0..n_docs {
        let disease = diseases.choose(&mut rng).unwrap();
        let forms: Vec<&str> = disease.surface_forms().collect();
        let form = *forms.choose(&mut rng).unwrap();
        let positive = rng.random_bool(positive_rate);
        let template = if positive {
            POSITIVE.choose(&mut rng).unwrap()
        } else {
            NEGATIVE.choose(&mut rng).unwrap()
        };
        let mention = template.replacen("{}", form, 1);

        let before = rng.random_range(0..=16);
        let after = rng.random_range(0..=16);
        let mut parts: Vec<String> = (0..before).map(|_| sentence(&mut rng, &vocab)).collect();
        parts.push(mention);
        parts.extend((0..after).map(|_| sentence(&mut rng, &vocab)));

        let doc_id = format!("syn-{i:06}");
        documents.push(Document {
            doc_id: doc_id.clone(),
            text: parts.join(" "),
        });
        gold.push(GoldLabel {
            doc_id,
            disease_id: disease.disease_id.clone(),
            identification: positive,
        });
    }
    SyntheticCorpus { documents, gold }
}
