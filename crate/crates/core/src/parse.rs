//! Structured-answer extraction from free-form generations.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::corpus::TermEntry;
use crate::prompt::AnswerKeys;

/// Reserved class name for predictions outside the configured diseases.
pub const OTHER: &str = "Other";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Identification {
    No,
    Yes,
}

impl Identification {
    pub fn from_bool(yes: bool) -> Self {
        if yes {
            Self::Yes
        } else {
            Self::No
        }
    }

    pub fn is_yes(self) -> bool {
        self == Self::Yes
    }
}

impl fmt::Display for Identification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(if self.is_yes() { "yes" } else { "no" })
    }
}

/// A configured disease id, or [`OTHER`].
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum DiseaseLabel {
    Disease(String),
    Other,
}

impl DiseaseLabel {
    pub fn as_str(&self) -> &str {
        match self {
            Self::Disease(id) => id,
            Self::Other => OTHER,
        }
    }
}

impl From<String> for DiseaseLabel {
    fn from(s: String) -> Self {
        if s == OTHER {
            Self::Other
        } else {
            Self::Disease(s)
        }
    }
}

impl From<&str> for DiseaseLabel {
    fn from(s: &str) -> Self {
        Self::from(s.to_string())
    }
}

impl From<DiseaseLabel> for String {
    fn from(l: DiseaseLabel) -> Self {
        l.as_str().to_string()
    }
}

impl fmt::Display for DiseaseLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerSource {
    Auto,
    Human,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedAnswer {
    pub identification: Identification,
    pub disease_label: DiseaseLabel,
    pub source: AnswerSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ComplianceStatus {
    Compliant,
    Partial,
    NonCompliant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractionResult {
    pub status: ComplianceStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<ParsedAnswer>,
    /// Byte offsets `[start, end)` of the accepted JSON object in the raw text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub json_span: Option<(usize, usize)>,
}

impl ExtractionResult {
    fn non_compliant() -> Self {
        Self {
            status: ComplianceStatus::NonCompliant,
            answer: None,
            json_span: None,
        }
    }
}

/// The disease classes answers are normalized onto.
#[derive(Debug, Clone, Default)]
pub struct ClassSet {
    ids: Vec<String>,
    lookup: HashMap<String, String>,
}

#[derive(Debug, Error)]
pub enum ClassSetError {
    #[error("class set is empty")]
    Empty,
    #[error("`{0}` is reserved for the catch-all class")]
    Reserved(String),
    #[error("unknown class `{0}`")]
    Unknown(String),
}

/// Case-folds and replaces every non-alphanumeric run with one space.
pub fn normalize_text(text: &str) -> String {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

fn strip_parentheticals(text: &str) -> (String, Vec<String>) {
    let mut outside = String::new();
    let mut inside = Vec::new();
    let mut depth = 0usize;
    let mut current = String::new();
    for c in text.chars() {
        match c {
            '(' | '[' => {
                depth += 1;
                if depth == 1 {
                    current.clear();
                    continue;
                }
            }
            ')' | ']' if depth > 0 => {
                depth -= 1;
                if depth == 0 {
                    inside.push(std::mem::take(&mut current));
                    continue;
                }
            }
            _ => {}
        }
        if depth == 0 {
            outside.push(c);
        } else {
            current.push(c);
        }
    }
    (outside, inside)
}

impl ClassSet {
    /// Classes from dictionary entries: id, label and synonyms all resolve.
    pub fn new(entries: &[TermEntry]) -> Result<Self, ClassSetError> {
        if entries.is_empty() {
            return Err(ClassSetError::Empty);
        }
        let mut set = Self::default();
        for e in entries {
            if e.disease_id == OTHER {
                return Err(ClassSetError::Reserved(e.disease_id.clone()));
            }
            set.ids.push(e.disease_id.clone());
            set.register(&e.disease_id, &e.disease_id);
            for form in e.surface_forms() {
                set.register(&e.disease_id, form);
            }
        }
        Ok(set)
    }

    /// Registers an extra alias, typically an abbreviation such as `GCA`.
    pub fn add_abbreviation(&mut self, disease_id: &str, abbreviation: &str) -> Result<(), ClassSetError> {
        if !self.ids.iter().any(|id| id == disease_id) {
            return Err(ClassSetError::Unknown(disease_id.to_string()));
        }
        self.register(disease_id, abbreviation);
        Ok(())
    }

    fn register(&mut self, disease_id: &str, alias: &str) {
        let key = normalize_text(alias);
        if !key.is_empty() {
            self.lookup.entry(key).or_insert_with(|| disease_id.to_string());
        }
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Configured diseases followed by [`DiseaseLabel::Other`].
    pub fn labels(&self) -> Vec<DiseaseLabel> {
        self.ids
            .iter()
            .cloned()
            .map(DiseaseLabel::Disease)
            .chain(std::iter::once(DiseaseLabel::Other))
            .collect()
    }

    pub fn contains(&self, label: &DiseaseLabel) -> bool {
        match label {
            DiseaseLabel::Other => true,
            DiseaseLabel::Disease(id) => self.ids.contains(id),
        }
    }

    fn exact(&self, text: &str) -> Option<&str> {
        self.lookup.get(&normalize_text(text)).map(String::as_str)
    }
}

/// Maps a free-text disease name onto a configured class.
///
/// Tries, in order: the whole text; the text with parenthesised parts
/// removed; each parenthesised part; and finally a phrase search that
/// succeeds only when exactly one class is named.
pub fn normalize_disease_label(text: &str, classes: &ClassSet) -> DiseaseLabel {
    if let Some(id) = classes.exact(text) {
        return DiseaseLabel::Disease(id.to_string());
    }
    let (outside, inside) = strip_parentheticals(text);
    if let Some(id) = classes.exact(&outside) {
        return DiseaseLabel::Disease(id.to_string());
    }
    for part in &inside {
        if let Some(id) = classes.exact(part) {
            return DiseaseLabel::Disease(id.to_string());
        }
    }
    let padded = format!(" {} ", normalize_text(text));
    let mut hits: Vec<&str> = classes
        .lookup
        .iter()
        .filter(|(alias, _)| padded.contains(&format!(" {alias} ")))
        .map(|(_, id)| id.as_str())
        .collect();
    hits.sort_unstable();
    hits.dedup();
    match hits.as_slice() {
        [one] => DiseaseLabel::Disease(one.to_string()),
        _ => DiseaseLabel::Other,
    }
}

/// Reads an identification value. `None` means uninterpretable.
pub fn interpret_identification(value: &Value) -> Option<Identification> {
    match value {
        Value::Bool(b) => Some(Identification::from_bool(*b)),
        Value::String(s) => match s.trim().to_ascii_lowercase().as_str() {
            "yes" => Some(Identification::Yes),
            "no" => Some(Identification::No),
            _ => None,
        },
        Value::Number(n) => match n.as_f64() {
            Some(1.0) => Some(Identification::Yes),
            Some(0.0) => Some(Identification::No),
            _ => None,
        },
        _ => None,
    }
}

/// End offset (exclusive) of the brace-balanced object starting at `start`,
/// skipping braces inside JSON strings.
fn balanced_end(text: &str, start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, c) in text[start..].char_indices() {
        if in_string {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_string = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(start + i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

/// The first brace-balanced substring that parses as a JSON object.
pub fn find_first_object(text: &str) -> Option<((usize, usize), Map<String, Value>)> {
    for (start, _) in text.match_indices('{') {
        let Some(end) = balanced_end(text, start) else {
            continue;
        };
        if let Ok(Value::Object(map)) = serde_json::from_str::<Value>(&text[start..end]) {
            return Some(((start, end), map));
        }
    }
    None
}

fn get_key<'a>(map: &'a Map<String, Value>, key: &str) -> Option<&'a Value> {
    map.get(key).or_else(|| {
        map.iter()
            .find(|(k, _)| k.trim().eq_ignore_ascii_case(key))
            .map(|(_, v)| v)
    })
}

/// Classifies generations against a class set and answer key names.
#[derive(Debug, Clone)]
pub struct Extractor {
    pub keys: AnswerKeys,
    pub classes: ClassSet,
}

impl Extractor {
    pub fn new(keys: AnswerKeys, classes: ClassSet) -> Self {
        Self { keys, classes }
    }

    /// Only the first parsable object is considered; it is compliant when
    /// both keys carry interpretable values and partial when only the
    /// identification does (its disease then counts as [`OTHER`]).
    pub fn extract(&self, raw_text: &str) -> ExtractionResult {
        let Some((span, object)) = find_first_object(raw_text) else {
            return ExtractionResult::non_compliant();
        };
        let Some(identification) = get_key(&object, &self.keys.identification).and_then(interpret_identification) else {
            return ExtractionResult::non_compliant();
        };
        let disease = get_key(&object, &self.keys.disease).and_then(Value::as_str);
        let (status, disease_label) = match disease {
            Some(text) => (ComplianceStatus::Compliant, normalize_disease_label(text, &self.classes)),
            None => (ComplianceStatus::Partial, DiseaseLabel::Other),
        };
        ExtractionResult {
            status,
            answer: Some(ParsedAnswer {
                identification,
                disease_label,
                source: AnswerSource::Auto,
            }),
            json_span: Some(span),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplianceRecord {
    pub backend_id: String,
    pub total: usize,
    pub failures: usize,
    pub compliance_rate: f64,
}

impl ComplianceRecord {
    fn new(backend_id: String, total: usize, failures: usize) -> Self {
        Self {
            compliance_rate: 1.0 - failures as f64 / total as f64,
            backend_id,
            total,
            failures,
        }
    }

    /// Compliance as a percentage rounded to one decimal, e.g. `"96.8"`.
    pub fn percent_one_decimal(&self) -> String {
        format!("{:.1}", self.compliance_rate * 100.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplianceReport {
    pub per_backend: Vec<ComplianceRecord>,
    pub overall: ComplianceRecord,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ComplianceError {
    #[error("no extraction results")]
    Empty,
    #[error("backend `{0}` has no results")]
    EmptyBackend(String),
}

/// Per-backend and overall compliance, in backend-id order. Failures are
/// the non-compliant extractions.
pub fn compliance_report<'a, I, S>(results: I) -> Result<ComplianceReport, ComplianceError>
where
    I: IntoIterator<Item = (S, &'a [ComplianceStatus])>,
    S: Into<String>,
{
    let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for (backend, statuses) in results {
        let backend = backend.into();
        let entry = counts.entry(backend).or_default();
        entry.0 += statuses.len();
        entry.1 += statuses.iter().filter(|s| **s == ComplianceStatus::NonCompliant).count();
    }
    compliance_from_counts(counts)
}

/// Like [`compliance_report`] but from `(backend, total, failures)` counts.
pub fn compliance_from_counts(counts: BTreeMap<String, (usize, usize)>) -> Result<ComplianceReport, ComplianceError> {
    if counts.is_empty() {
        return Err(ComplianceError::Empty);
    }
    let mut per_backend = Vec::with_capacity(counts.len());
    let (mut total, mut failures) = (0, 0);
    for (backend, (n, f)) in counts {
        if n == 0 {
            return Err(ComplianceError::EmptyBackend(backend));
        }
        total += n;
        failures += f;
        per_backend.push(ComplianceRecord::new(backend, n, f));
    }
    Ok(ComplianceReport {
        per_backend,
        overall: ComplianceRecord::new("overall".into(), total, failures),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    pub(crate) fn paper_classes() -> ClassSet {
        let mut c = ClassSet::new(&[
            TermEntry::new("Babesiosis", "Babesiosis", ["babesia infection"]),
            TermEntry::new("Giant Cell Arteritis", "Giant Cell Arteritis", ["temporal arteritis"]),
            TermEntry::new("Graft Versus Host Disease", "Graft Versus Host Disease", Vec::<String>::new()),
            TermEntry::new("Cryptogenic Organizing Pneumonia", "Cryptogenic Organizing Pneumonia", Vec::<String>::new()),
        ])
        .unwrap();
        c.add_abbreviation("Giant Cell Arteritis", "GCA").unwrap();
        c.add_abbreviation("Graft Versus Host Disease", "GVHD").unwrap();
        c.add_abbreviation("Cryptogenic Organizing Pneumonia", "COP").unwrap();
        c
    }

    fn extractor() -> Extractor {
        Extractor::new(AnswerKeys::default(), paper_classes())
    }

    #[test]
    fn exact_object_is_compliant() {
        let raw = r#"{"answer":"yes","disease":"Babesiosis"}"#;
        let r = extractor().extract(raw);
        assert_eq!(r.status, ComplianceStatus::Compliant);
        let a = r.answer.unwrap();
        assert_eq!(a.identification, Identification::Yes);
        assert_eq!(a.disease_label, DiseaseLabel::Disease("Babesiosis".into()));
        assert_eq!(a.source, AnswerSource::Auto);
        assert_eq!(r.json_span, Some((0, raw.len())));
    }

    #[test]
    fn chatter_around_object() {
        let raw = r#"Sure! Here is my answer: {"answer": "no", "disease": "none"} Hope that helps."#;
        let r = extractor().extract(raw);
        assert_eq!(r.status, ComplianceStatus::Compliant);
        let a = r.answer.unwrap();
        assert_eq!((a.identification, a.disease_label), (Identification::No, DiseaseLabel::Other));
        let (s, e) = r.json_span.unwrap();
        assert_eq!(&raw[s..e], r#"{"answer": "no", "disease": "none"}"#);
    }

    #[test]
    fn prose_only_is_non_compliant() {
        let r = extractor().extract("The patient likely has GVHD.");
        assert_eq!(r, ExtractionResult::non_compliant());
    }

    #[test]
    fn missing_disease_key_is_partial() {
        let r = extractor().extract(r#"{"answer": true}"#);
        assert_eq!(r.status, ComplianceStatus::Partial);
        assert_eq!(r.answer.unwrap().disease_label, DiseaseLabel::Other);
    }

    #[test]
    fn identification_vocabulary() {
        assert_eq!(interpret_identification(&json!(true)), Some(Identification::Yes));
        assert_eq!(interpret_identification(&json!(false)), Some(Identification::No));
        assert_eq!(interpret_identification(&json!("No")), Some(Identification::No));
        assert_eq!(interpret_identification(&json!(" YES ")), Some(Identification::Yes));
        assert_eq!(interpret_identification(&json!(1)), Some(Identification::Yes));
        assert_eq!(interpret_identification(&json!(0)), Some(Identification::No));
        assert_eq!(interpret_identification(&json!("maybe")), None);
        assert_eq!(interpret_identification(&json!(2)), None);
        assert_eq!(interpret_identification(&json!(null)), None);
        let r = extractor().extract(r#"{"answer": "maybe", "disease": "Babesiosis"}"#);
        assert_eq!(r.status, ComplianceStatus::NonCompliant);
    }

    #[test]
    fn label_normalization() {
        let c = paper_classes();
        assert_eq!(normalize_disease_label("Babesiosis", &c), DiseaseLabel::Disease("Babesiosis".into()));
        assert_eq!(
            normalize_disease_label("giant-cell arteritis (GCA)", &c),
            DiseaseLabel::Disease("Giant Cell Arteritis".into())
        );
        assert_eq!(normalize_disease_label("GVHD", &c), DiseaseLabel::Disease("Graft Versus Host Disease".into()));
        assert_eq!(normalize_disease_label("lupus", &c), DiseaseLabel::Other);
        assert_eq!(normalize_disease_label("", &c), DiseaseLabel::Other);
        assert_eq!(
            normalize_disease_label("The disease is babesiosis.", &c),
            DiseaseLabel::Disease("Babesiosis".into())
        );
        assert_eq!(normalize_disease_label("babesiosis or GCA", &c), DiseaseLabel::Other);
    }

    #[test]
    fn class_set_rules() {
        assert!(matches!(ClassSet::new(&[]), Err(ClassSetError::Empty)));
        assert!(matches!(
            ClassSet::new(&[TermEntry::new("Other", "x", Vec::<String>::new())]),
            Err(ClassSetError::Reserved(_))
        ));
        let mut c = paper_classes();
        assert!(c.add_abbreviation("nope", "N").is_err());
        assert_eq!(c.labels().len(), 5);
        assert_eq!(c.labels().last(), Some(&DiseaseLabel::Other));
    }

    #[test]
    fn compliance_arithmetic() {
        let mut counts = BTreeMap::new();
        for (b, f) in [("a", 0usize), ("b", 10)] {
            counts.insert(b.to_string(), (10, f));
        }
        let r = compliance_from_counts(counts).unwrap();
        assert_eq!(r.per_backend[0].percent_one_decimal(), "100.0");
        assert_eq!(r.per_backend[1].percent_one_decimal(), "0.0");
        assert_eq!(r.overall.failures, 10);
        assert_eq!(r.overall.total, 20);
        assert_eq!(compliance_from_counts(BTreeMap::new()), Err(ComplianceError::Empty));
        let statuses = [ComplianceStatus::Compliant, ComplianceStatus::Partial, ComplianceStatus::NonCompliant];
        let r = compliance_report([("x", &statuses[..])]).unwrap();
        assert_eq!(r.per_backend[0].failures, 1);
        assert_eq!(compliance_report([("x", &[][..])]), Err(ComplianceError::EmptyBackend("x".into())));
    }

    #[test]
    fn disease_label_serializes_as_plain_string() {
        assert_eq!(serde_json::to_string(&DiseaseLabel::Other).unwrap(), "\"Other\"");
        let l: DiseaseLabel = serde_json::from_str("\"GCA\"").unwrap();
        assert_eq!(l, DiseaseLabel::Disease("GCA".into()));
    }

    proptest! {
        #[test]
        fn extraction_is_pure_and_span_sound(raw in ".{0,120}", inner in r#"\{"answer": ?"(yes|no|maybe)"(, "disease": "[A-Za-z ]{0,12}")?\}"#) {
            let ex = extractor();
            for text in [raw.clone(), format!("{raw}{inner}{raw}")] {
                let a = ex.extract(&text);
                prop_assert_eq!(&a, &ex.extract(&text));
                prop_assert_eq!(a.status == ComplianceStatus::NonCompliant, a.answer.is_none());
                prop_assert_eq!(a.json_span.is_some(), a.status != ComplianceStatus::NonCompliant);
                if let Some((s, e)) = a.json_span {
                    let reparsed: Value = serde_json::from_str(&text[s..e]).unwrap();
                    prop_assert_eq!(Some(reparsed.as_object().unwrap().clone()), find_first_object(&text).map(|x| x.1));
                }
                if let Some(ans) = &a.answer {
                    prop_assert!(ex.classes.contains(&ans.disease_label));
                }
            }
        }

        #[test]
        fn failures_add_up(per in prop::collection::vec(prop::collection::vec(0u8..3, 1..50), 1..6)) {
            let statuses: Vec<(String, Vec<ComplianceStatus>)> = per
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    let s = v
                        .iter()
                        .map(|x| match x {
                            0 => ComplianceStatus::Compliant,
                            1 => ComplianceStatus::Partial,
                            _ => ComplianceStatus::NonCompliant,
                        })
                        .collect();
                    (format!("b{i}"), s)
                })
                .collect();
            let r = compliance_report(statuses.iter().map(|(b, s)| (b.as_str(), s.as_slice()))).unwrap();
            prop_assert_eq!(r.per_backend.iter().map(|b| b.failures).sum::<usize>(), r.overall.failures);
            prop_assert_eq!(r.per_backend.iter().map(|b| b.total).sum::<usize>(), r.overall.total);
            for b in r.per_backend.iter().chain([&r.overall]) {
                prop_assert!(b.failures <= b.total);
                prop_assert!((b.compliance_rate - (1.0 - b.failures as f64 / b.total as f64)).abs() < 1e-15);
            }
        }

        #[test]
        fn normalization_range_is_closed(text in ".{0,40}") {
            let c = paper_classes();
            prop_assert!(c.contains(&normalize_disease_label(&text, &c)));
        }
    }
}
