//! Corpus ingestion, dictionary term matching and context-window extraction.
//!
//! Documents arrive as line-delimited JSON, the disease dictionary as a
//! three-column TSV. Matching is whole-word and case-folded: a word is a
//! maximal run of non-whitespace, compared after trimming punctuation at its
//! edges, and multi-word terms match as contiguous phrases.

mod synthetic;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use synthetic::{generate_synthetic_corpus, GoldLabel, SyntheticCorpus};

/// Window sizes used throughout the experiments, in words.
pub const DEFAULT_WINDOW_SIZES: [usize; 4] = [32, 64, 128, 256];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: duplicate id `{id}`")]
    Duplicate { line: usize, id: String },
    #[error("invalid filter configuration: {0}")]
    InvalidFilter(String),
    #[error("disease `{0}` has no matched documents")]
    NoMentions(String),
    #[error("document `{doc_id}` does not mention disease `{disease_id}`")]
    MissingMention { doc_id: String, disease_id: String },
    #[error("unknown document `{0}`")]
    UnknownDocument(String),
    #[error("unknown disease `{0}`")]
    UnknownDisease(String),
    #[error("window size {size} cannot hold the {mention_words}-word mention in `{doc_id}`")]
    WindowTooSmall {
        doc_id: String,
        size: usize,
        mention_words: usize,
    },
    #[error("invalid window reference `{0}`")]
    InvalidWindowRef(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
}

/// A dictionary entry for one disease.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermEntry {
    pub disease_id: String,
    pub preferred_label: String,
    pub synonyms: Vec<String>,
}

impl TermEntry {
    /// Builds an entry, dropping synonyms that repeat after case-folding.
    pub fn new(
        disease_id: impl Into<String>,
        preferred_label: impl Into<String>,
        synonyms: impl IntoIterator<Item = impl Into<String>>,
    ) -> Self {
        let mut seen = HashSet::new();
        let synonyms = synonyms
            .into_iter()
            .map(Into::into)
            .map(|s: String| s.trim().to_string())
            .filter(|s| !s.is_empty() && seen.insert(s.to_lowercase()))
            .collect();
        Self {
            disease_id: disease_id.into(),
            preferred_label: preferred_label.into(),
            synonyms,
        }
    }

    /// All surface forms of this disease (label first, then synonyms).
    pub fn surface_forms(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.preferred_label.as_str()).chain(self.synonyms.iter().map(String::as_str))
    }

    /// Distinct matching keys for every surface form, in first-seen order.
    pub fn match_keys(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.surface_forms()
            .filter_map(term_key)
            .filter(|k| seen.insert(k.clone()))
            .collect()
    }
}

/// Term → sorted, de-duplicated document ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvertedIndex {
    pub postings: BTreeMap<String, Vec<String>>,
    pub corpus_size: usize,
}

impl InvertedIndex {
    pub fn is_empty(&self) -> bool {
        self.postings.is_empty()
    }

    pub fn len(&self) -> usize {
        self.postings.len()
    }

    pub fn get(&self, term_key: &str) -> Option<&[String]> {
        self.postings.get(term_key).map(Vec::as_slice)
    }

    /// Union of the postings of every key belonging to `entry`.
    pub fn documents_for(&self, entry: &TermEntry) -> BTreeSet<String> {
        entry
            .match_keys()
            .iter()
            .filter_map(|k| self.postings.get(k))
            .flatten()
            .cloned()
            .collect()
    }

    pub fn from_json_file(path: &Path) -> Result<Self, CorpusError> {
        let file = File::open(path)?;
        serde_json::from_reader(BufReader::new(file)).map_err(|e| CorpusError::Parse {
            line: e.line(),
            message: e.to_string(),
        })
    }
}

/// Weak-supervision thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    /// Terms shorter than this many characters are dropped.
    pub min_term_chars: usize,
    /// Terms found in strictly more than this fraction of the corpus are dropped.
    pub max_doc_frequency: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_term_chars: 4,
            max_doc_frequency: 0.005,
        }
    }
}

impl FilterConfig {
    pub fn new(min_term_chars: usize, max_doc_frequency: f64) -> Result<Self, CorpusError> {
        let cfg = Self {
            min_term_chars,
            max_doc_frequency,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.min_term_chars < 1 {
            return Err(CorpusError::InvalidFilter("min_term_chars must be at least 1".into()));
        }
        if !(self.max_doc_frequency > 0.0 && self.max_doc_frequency <= 1.0) {
            return Err(CorpusError::InvalidFilter(format!(
                "max_doc_frequency must lie in (0, 1], got {}",
                self.max_doc_frequency
            )));
        }
        Ok(())
    }
}

/// Identifies one context window: a document, the disease it was cut for,
/// and the window size in words.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WindowRef {
    pub doc_id: String,
    pub disease_id: String,
    pub window_words: usize,
}

impl fmt::Display for WindowRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}@{}", self.doc_id, self.disease_id, self.window_words)
    }
}

impl FromStr for WindowRef {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || CorpusError::InvalidWindowRef(s.to_string());
        let (rest, words) = s.rsplit_once('@').ok_or_else(bad)?;
        let (doc_id, disease_id) = rest.rsplit_once('#').ok_or_else(bad)?;
        if doc_id.is_empty() || disease_id.is_empty() {
            return Err(bad());
        }
        Ok(Self {
            doc_id: doc_id.to_string(),
            disease_id: disease_id.to_string(),
            window_words: words.parse().map_err(|_| bad())?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextWindow {
    pub doc_id: String,
    pub disease_id: String,
    pub window_words: usize,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_identification: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_disease: Option<String>,
}

impl ContextWindow {
    pub fn window_ref(&self) -> WindowRef {
        WindowRef {
            doc_id: self.doc_id.clone(),
            disease_id: self.disease_id.clone(),
            window_words: self.window_words,
        }
    }

    pub fn word_count(&self) -> usize {
        self.text.split_whitespace().count()
    }
}

/// Copies gold labels onto windows whose (document, disease) pair is labeled.
pub fn attach_gold(windows: &mut [ContextWindow], gold: &[GoldLabel]) {
    let by_key: HashMap<(&str, &str), bool> = gold
        .iter()
        .map(|g| ((g.doc_id.as_str(), g.disease_id.as_str()), g.identification))
        .collect();
    for w in windows {
        if let Some(&ident) = by_key.get(&(w.doc_id.as_str(), w.disease_id.as_str())) {
            w.gold_identification = Some(ident);
            w.gold_disease = Some(w.disease_id.clone());
        }
    }
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct RawDocument {
    doc_id: Option<String>,
    text: Option<String>,
}

pub fn load_corpus(path: &Path) -> Result<Vec<Document>, CorpusError> {
    read_corpus(BufReader::new(File::open(path)?))
}

/// Reads one JSON object per line. Blank lines are skipped.
pub fn read_corpus<R: BufRead>(reader: R) -> Result<Vec<Document>, CorpusError> {
    let mut docs = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawDocument = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let parse_err = |message: &str| CorpusError::Parse {
            line: line_no,
            message: message.to_string(),
        };
        let doc_id = raw.doc_id.ok_or_else(|| parse_err("missing field `doc_id`"))?;
        let text = raw.text.ok_or_else(|| parse_err("missing field `text`"))?;
        if doc_id.is_empty() {
            return Err(parse_err("empty `doc_id`"));
        }
        if text.trim().is_empty() {
            return Err(parse_err("empty `text`"));
        }
        if !seen.insert(doc_id.clone()) {
            return Err(CorpusError::Duplicate {
                line: line_no,
                id: doc_id,
            });
        }
        docs.push(Document { doc_id, text });
    }
    Ok(docs)
}

pub fn load_term_list(path: &Path) -> Result<Vec<TermEntry>, CorpusError> {
    read_term_list(BufReader::new(File::open(path)?))
}

/// Reads `disease_id<TAB>preferred_label<TAB>syn1|syn2|...` rows. The
/// synonym column may be absent. Blank lines and `#` comments are skipped.
pub fn read_term_list<R: BufRead>(reader: R) -> Result<Vec<TermEntry>, CorpusError> {
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let mut cols = line.split('\t').map(str::trim);
        let disease_id = cols.next().unwrap_or_default();
        let label = cols.next().unwrap_or_default();
        let synonyms = cols.next().unwrap_or_default();
        if cols.next().is_some() {
            return Err(CorpusError::Parse {
                line: line_no,
                message: "expected at most three tab-separated columns".into(),
            });
        }
        if disease_id.is_empty() {
            return Err(CorpusError::Parse {
                line: line_no,
                message: "empty disease_id".into(),
            });
        }
        if label.is_empty() {
            return Err(CorpusError::Parse {
                line: line_no,
                message: format!("empty preferred_label for `{disease_id}`"),
            });
        }
        if !seen.insert(disease_id.to_string()) {
            return Err(CorpusError::Duplicate {
                line: line_no,
                id: disease_id.to_string(),
            });
        }
        entries.push(TermEntry::new(disease_id, label, synonyms.split('|')));
    }
    Ok(entries)
}

// ---------------------------------------------------------------------------
// Matching
// ---------------------------------------------------------------------------

/// Case-folded comparison key of a single whitespace-delimited word.
pub(crate) fn word_key(word: &str) -> String {
    word.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase()
}

/// Canonical matching key of a term: its word keys joined by single spaces.
/// Returns `None` for terms with no alphanumeric content.
pub fn term_key(term: &str) -> Option<String> {
    let words: Vec<String> = term
        .split_whitespace()
        .map(word_key)
        .filter(|w| !w.is_empty())
        .collect();
    if words.is_empty() {
        None
    } else {
        Some(words.join(" "))
    }
}

/// Byte spans of the whitespace-delimited words of `text`.
pub(crate) fn word_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                spans.push((s, i));
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push((s, text.len()));
    }
    spans
}

/// A phrase dictionary keyed on its first word.
struct PhraseMatcher {
    terms: Vec<(String, Vec<String>)>,
    by_first: HashMap<String, Vec<usize>>,
}

impl PhraseMatcher {
    fn new<'a>(keys: impl IntoIterator<Item = &'a str>) -> Self {
        let mut terms: Vec<(String, Vec<String>)> = Vec::new();
        let mut seen = HashSet::new();
        for key in keys {
            if seen.insert(key.to_string()) {
                let words = key.split(' ').map(str::to_string).collect();
                terms.push((key.to_string(), words));
            }
        }
        let mut by_first: HashMap<String, Vec<usize>> = HashMap::new();
        for (idx, (_, words)) in terms.iter().enumerate() {
            by_first.entry(words[0].clone()).or_default().push(idx);
        }
        Self { terms, by_first }
    }

    /// Indices of all terms occurring anywhere in `words`.
    fn matches(&self, words: &[String]) -> BTreeSet<usize> {
        let mut found = BTreeSet::new();
        for (pos, w) in words.iter().enumerate() {
            let Some(candidates) = self.by_first.get(w) else {
                continue;
            };
            for &idx in candidates {
                let phrase = &self.terms[idx].1;
                if words.len() - pos >= phrase.len() && words[pos..pos + phrase.len()] == phrase[..] {
                    found.insert(idx);
                }
            }
        }
        found
    }
}

fn document_word_keys(text: &str) -> Vec<String> {
    text.split_whitespace().map(word_key).collect()
}

/// Matches every term of `terms` against every document in parallel.
///
/// Only terms with at least one matching document appear in the result.
pub fn build_inverted_index(corpus: &[Document], terms: &[TermEntry]) -> InvertedIndex {
    let keys: Vec<String> = terms.iter().flat_map(TermEntry::match_keys).collect();
    let matcher = PhraseMatcher::new(keys.iter().map(String::as_str));

    let hits: Vec<(usize, BTreeSet<usize>)> = corpus
        .par_iter()
        .enumerate()
        .map(|(doc_idx, doc)| (doc_idx, matcher.matches(&document_word_keys(&doc.text))))
        .collect();

    let mut postings: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (doc_idx, term_ids) in hits {
        for t in term_ids {
            postings
                .entry(matcher.terms[t].0.clone())
                .or_default()
                .push(corpus[doc_idx].doc_id.clone());
        }
    }
    for list in postings.values_mut() {
        list.sort();
        list.dedup();
    }
    InvertedIndex {
        postings,
        corpus_size: corpus.len(),
    }
}

/// Drops short terms, then terms occurring in strictly more than
/// `max_doc_frequency` of the corpus.
pub fn apply_weak_supervision_filters(index: &InvertedIndex, cfg: &FilterConfig) -> InvertedIndex {
    let postings = index
        .postings
        .iter()
        .filter(|(term, _)| term.chars().count() >= cfg.min_term_chars)
        .filter(|(_, docs)| {
            index.corpus_size == 0 || (docs.len() as f64 / index.corpus_size as f64) <= cfg.max_doc_frequency
        })
        .map(|(t, d)| (t.clone(), d.clone()))
        .collect();
    InvertedIndex {
        postings,
        corpus_size: index.corpus_size,
    }
}

/// Disease ids ranked by matched-document count, descending, ties broken
/// by id. Diseases without matches are not returned.
pub fn select_top_diseases(index: &InvertedIndex, terms: &[TermEntry], k: usize) -> Vec<String> {
    let mut counts: Vec<(usize, &str)> = terms
        .iter()
        .map(|e| (index.documents_for(e).len(), e.disease_id.as_str()))
        .filter(|(n, _)| *n > 0)
        .collect();
    counts.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    counts.into_iter().take(k).map(|(_, id)| id.to_string()).collect()
}

/// First occurrence of any of `keys` in `words`: (start word, length in words).
fn first_mention(words: &[String], keys: &[String]) -> Option<(usize, usize)> {
    let phrases: Vec<Vec<&str>> = keys.iter().map(|k| k.split(' ').collect()).collect();
    for pos in 0..words.len() {
        let best = phrases
            .iter()
            .filter(|p| words.len() - pos >= p.len() && words[pos..pos + p.len()].iter().zip(p.iter()).all(|(a, b)| a == b))
            .map(Vec::len)
            .max();
        if let Some(len) = best {
            return Some((pos, len));
        }
    }
    None
}

/// Word range `[start, end)` of a `size`-word window around a mention at
/// `[mention, mention + len)` in a document of `total` words.
///
/// The mention is centered with any odd slack placed after it; when the
/// window would cross a document edge it spills over to the other side.
pub fn window_bounds(total: usize, mention: usize, len: usize, size: usize) -> (usize, usize) {
    if total <= size {
        return (0, total);
    }
    let before = size.saturating_sub(len) / 2;
    let mut start = mention.saturating_sub(before);
    if start + size > total {
        start = total - size;
    }
    (start, start + size)
}

/// Cuts one window per (document, disease, size), centered on the first
/// mention of the disease among the terms kept in `index`.
///
/// Output order: disease (as given), then document id, then size (as given).
pub fn extract_context_windows(
    corpus: &[Document],
    index: &InvertedIndex,
    terms: &[TermEntry],
    disease_ids: &[String],
    sizes: &[usize],
) -> Result<Vec<ContextWindow>, CorpusError> {
    let docs: HashMap<&str, &Document> = corpus.iter().map(|d| (d.doc_id.as_str(), d)).collect();
    let mut windows = Vec::new();
    for disease_id in disease_ids {
        let entry = terms
            .iter()
            .find(|e| &e.disease_id == disease_id)
            .ok_or_else(|| CorpusError::UnknownDisease(disease_id.clone()))?;
        let keys: Vec<String> = entry
            .match_keys()
            .into_iter()
            .filter(|k| index.postings.contains_key(k))
            .collect();
        let doc_ids = index.documents_for(entry);
        if doc_ids.is_empty() {
            return Err(CorpusError::NoMentions(disease_id.clone()));
        }
        for doc_id in doc_ids {
            let doc = docs
                .get(doc_id.as_str())
                .ok_or_else(|| CorpusError::UnknownDocument(doc_id.clone()))?;
            let spans = word_spans(&doc.text);
            let words = document_word_keys(&doc.text);
            let (mention, len) = first_mention(&words, &keys).ok_or_else(|| CorpusError::MissingMention {
                doc_id: doc_id.clone(),
                disease_id: disease_id.clone(),
            })?;
            for &size in sizes {
                if len > size {
                    return Err(CorpusError::WindowTooSmall {
                        doc_id: doc_id.clone(),
                        size,
                        mention_words: len,
                    });
                }
                let (start, end) = window_bounds(words.len(), mention, len, size);
                let text = doc.text[spans[start].0..spans[end - 1].1].to_string();
                windows.push(ContextWindow {
                    doc_id: doc_id.clone(),
                    disease_id: disease_id.clone(),
                    window_words: size,
                    text,
                    gold_identification: None,
                    gold_disease: None,
                });
            }
        }
    }
    Ok(windows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn doc(id: &str, text: &str) -> Document {
        Document {
            doc_id: id.into(),
            text: text.into(),
        }
    }

    /// Straight (term, doc) scan with no shared code path beyond `term_key`.
    fn naive_index(corpus: &[Document], terms: &[TermEntry]) -> InvertedIndex {
        let mut postings: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for entry in terms {
            for key in entry.match_keys() {
                let needle: Vec<&str> = key.split(' ').collect();
                for d in corpus {
                    let hay: Vec<String> = d
                        .text
                        .split_whitespace()
                        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
                        .collect();
                    let hit = hay.windows(needle.len()).any(|w| w.iter().zip(&needle).all(|(a, b)| a == b));
                    if hit {
                        postings.entry(key.clone()).or_default().push(d.doc_id.clone());
                    }
                }
            }
        }
        for v in postings.values_mut() {
            v.sort();
            v.dedup();
        }
        InvertedIndex {
            postings,
            corpus_size: corpus.len(),
        }
    }

    #[test]
    fn empty_corpus_file() {
        assert!(read_corpus("".as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn corpus_keeps_input_order() {
        let input = r#"{"doc_id":"c","text":"one"}
{"doc_id":"a","text":"two"}
{"doc_id":"b","text":"three"}
"#;
        let docs = read_corpus(input.as_bytes()).unwrap();
        let ids: Vec<_> = docs.iter().map(|d| d.doc_id.as_str()).collect();
        assert_eq!(ids, ["c", "a", "b"]);
    }

    #[test]
    fn corpus_missing_text_names_line() {
        let input = "{\"doc_id\":\"a\",\"text\":\"ok\"}\n{\"doc_id\":\"b\"}\n";
        match read_corpus(input.as_bytes()) {
            Err(CorpusError::Parse { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("text"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn corpus_rejects_duplicates_and_garbage() {
        let dup = "{\"doc_id\":\"a\",\"text\":\"x\"}\n{\"doc_id\":\"a\",\"text\":\"y\"}\n";
        assert!(matches!(read_corpus(dup.as_bytes()), Err(CorpusError::Duplicate { line: 2, .. })));
        let bad = "not json\n";
        assert!(matches!(read_corpus(bad.as_bytes()), Err(CorpusError::Parse { line: 1, .. })));
    }

    #[test]
    fn term_list_parses_synonyms() {
        let entries = read_term_list("B \t Babesiosis \t babesiosis|babesia infection\n".as_bytes()).unwrap();
        assert_eq!(entries.len(), 1);
        assert_eq!(entries[0].disease_id, "B");
        assert_eq!(entries[0].preferred_label, "Babesiosis");
        assert_eq!(entries[0].synonyms, ["babesiosis", "babesia infection"]);
    }

    #[test]
    fn term_list_edge_cases() {
        assert!(read_term_list("".as_bytes()).unwrap().is_empty());
        let dup = "B\tBabesiosis\t\nB\tOther\t\n";
        assert!(matches!(read_term_list(dup.as_bytes()), Err(CorpusError::Duplicate { line: 2, .. })));
        let empty_label = "B\t\tx\n";
        assert!(matches!(read_term_list(empty_label.as_bytes()), Err(CorpusError::Parse { line: 1, .. })));
        let folded = read_term_list("X\tFoo\tBar|bar|BAR|baz\n".as_bytes()).unwrap();
        assert_eq!(folded[0].synonyms, ["Bar", "baz"]);
    }

    #[test]
    fn index_empty_corpus() {
        let idx = build_inverted_index(&[], &[TermEntry::new("B", "Babesiosis", Vec::<String>::new())]);
        assert!(idx.postings.is_empty());
        assert_eq!(idx.corpus_size, 0);
    }

    #[test]
    fn index_matches_naive_scan_on_small_fixture() {
        let corpus = vec![
            doc("d1", "patient with babesiosis confirmed"),
            doc("d2", "no mention"),
            doc("d3", "history of babesiosis"),
        ];
        let terms = vec![TermEntry::new("B", "babesiosis", Vec::<String>::new())];
        let idx = build_inverted_index(&corpus, &terms);
        assert_eq!(idx, naive_index(&corpus, &terms));
        assert_eq!(idx.postings["babesiosis"], ["d1", "d3"]);
    }

    #[test]
    fn matching_is_whole_word_and_phrase_aware() {
        let corpus = vec![
            doc("a", "Giant Cell Arteritis, biopsy proven."),
            doc("b", "giant cell tumour; arteritis elsewhere"),
            doc("c", "babesiosisX is not a word we know"),
            doc("d", "(BABESIOSIS)"),
        ];
        let terms = vec![
            TermEntry::new("GCA", "Giant Cell Arteritis", ["arteritis"]),
            TermEntry::new("B", "Babesiosis", Vec::<String>::new()),
        ];
        let idx = build_inverted_index(&corpus, &terms);
        assert_eq!(idx.postings["giant cell arteritis"], ["a"]);
        assert_eq!(idx.postings["arteritis"], ["a", "b"]);
        assert_eq!(idx.postings["babesiosis"], ["d"]);
        assert_eq!(idx, naive_index(&corpus, &terms));
    }

    #[test]
    fn length_rule_drops_short_terms() {
        let corpus = vec![doc("a", "GVH noted"), doc("b", "gvhd noted")];
        let terms = vec![TermEntry::new("GVHD", "GVHD", ["GVH"])];
        let idx = build_inverted_index(&corpus, &terms);
        let filtered = apply_weak_supervision_filters(&idx, &FilterConfig::new(4, 1.0).unwrap());
        assert!(!filtered.postings.contains_key("gvh"));
        assert_eq!(filtered.postings["gvhd"], ["b"]);
    }

    #[test]
    fn prevalence_rule_is_strict() {
        let ids = |n: usize| (0..n).map(|i| format!("d{i:04}")).collect::<Vec<_>>();
        let mut postings = BTreeMap::new();
        postings.insert("sixdocs".to_string(), ids(6));
        postings.insert("fivedocs".to_string(), ids(5));
        let idx = InvertedIndex {
            postings,
            corpus_size: 1000,
        };
        let out = apply_weak_supervision_filters(&idx, &FilterConfig::default());
        assert!(!out.postings.contains_key("sixdocs"));
        assert_eq!(out.postings["fivedocs"], idx.postings["fivedocs"]);
    }

    #[test]
    fn filtering_empty_index() {
        let out = apply_weak_supervision_filters(&InvertedIndex::default(), &FilterConfig::default());
        assert_eq!(out, InvertedIndex::default());
    }

    #[test]
    fn filter_config_validation() {
        assert!(FilterConfig::new(0, 0.5).is_err());
        assert!(FilterConfig::new(1, 0.0).is_err());
        assert!(FilterConfig::new(1, 1.5).is_err());
        assert!(FilterConfig::new(1, 1.0).is_ok());
    }

    fn count_index(counts: &[(&str, usize)]) -> (InvertedIndex, Vec<TermEntry>) {
        let mut postings = BTreeMap::new();
        let mut terms = Vec::new();
        for (id, n) in counts {
            let key = format!("term{}", id.to_lowercase());
            postings.insert(key.clone(), (0..*n).map(|i| format!("{id}{i}")).collect());
            terms.push(TermEntry::new(*id, key, Vec::<String>::new()));
        }
        (
            InvertedIndex {
                postings,
                corpus_size: 100,
            },
            terms,
        )
    }

    #[test]
    fn top_diseases_tie_break() {
        let (idx, terms) = count_index(&[("d", 1), ("c", 3), ("b", 3), ("a", 5)]);
        assert!(select_top_diseases(&idx, &terms, 0).is_empty());
        assert_eq!(select_top_diseases(&idx, &terms, 2), ["a", "b"]);
        assert_eq!(select_top_diseases(&idx, &terms, 10), ["a", "b", "c", "d"]);
    }

    #[test]
    fn top_diseases_union_over_synonyms() {
        let corpus = vec![doc("1", "alpha beta"), doc("2", "beta"), doc("3", "gamma")];
        let terms = vec![
            TermEntry::new("AB", "alpha", ["beta"]),
            TermEntry::new("G", "gamma", Vec::<String>::new()),
        ];
        let idx = build_inverted_index(&corpus, &terms);
        assert_eq!(idx.documents_for(&terms[0]).len(), 2);
        assert_eq!(select_top_diseases(&idx, &terms, 2), ["AB", "G"]);
    }

    #[test]
    fn window_bounds_examples() {
        // 10 words, mention at the sixth word (index 5), size 4 -> words 5..8 (1-based)
        assert_eq!(window_bounds(10, 5, 1, 4), (4, 8));
        assert_eq!(window_bounds(20, 3, 1, 256), (0, 20));
        assert_eq!(window_bounds(100, 0, 1, 32), (0, 32));
        assert_eq!(window_bounds(100, 99, 1, 32), (68, 100));
    }

    proptest! {
        #[test]
        fn window_always_contains_mention(total in 1usize..300, m in 0usize..300, len in 1usize..4, size in 1usize..300) {
            prop_assume!(m + len <= total && len <= size);
            let (s, e) = window_bounds(total, m, len, size);
            prop_assert!(s <= m && m + len <= e);
            prop_assert_eq!(e - s, size.min(total));
        }
    }

    #[test]
    fn extracted_windows_contain_the_mention() {
        let text = "w0 w1 w2 w3 w4 Babesiosis w6 w7 w8 w9";
        let corpus = vec![doc("a", text)];
        let terms = vec![TermEntry::new("B", "Babesiosis", Vec::<String>::new())];
        let idx = build_inverted_index(&corpus, &terms);
        let ws = extract_context_windows(&corpus, &idx, &terms, &["B".into()], &[4, 256]).unwrap();
        assert_eq!(ws[0].text, "w4 Babesiosis w6 w7");
        assert_eq!(ws[1].text, text);
        assert_eq!(ws[1].word_count(), 10);
    }

    #[test]
    fn window_for_unmatched_disease_is_an_error() {
        let corpus = vec![doc("a", "nothing here")];
        let terms = vec![TermEntry::new("B", "Babesiosis", Vec::<String>::new())];
        let idx = build_inverted_index(&corpus, &terms);
        assert!(matches!(
            extract_context_windows(&corpus, &idx, &terms, &["B".into()], &[32]),
            Err(CorpusError::NoMentions(_))
        ));
        assert!(matches!(
            extract_context_windows(&corpus, &idx, &terms, &["Z".into()], &[32]),
            Err(CorpusError::UnknownDisease(_))
        ));
    }

    #[test]
    fn window_ref_round_trips_through_display() {
        let r = WindowRef {
            doc_id: "note#7".into(),
            disease_id: "GCA".into(),
            window_words: 64,
        };
        assert_eq!(r.to_string().parse::<WindowRef>().unwrap(), r);
        assert!("nope".parse::<WindowRef>().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn parallel_index_equals_naive_scan(
            docs in prop::collection::vec(prop::collection::vec(0usize..8, 1..30), 0..40),
            terms in prop::collection::vec(prop::collection::vec(0usize..8, 1..3), 1..6),
        ) {
            const VOCAB: [&str; 8] = ["alpha", "Beta", "gamma,", "(delta)", "eps", "zeta.", "eta", "THETA"];
            let corpus: Vec<Document> = docs
                .iter()
                .enumerate()
                .map(|(i, ws)| doc(&format!("d{i}"), &ws.iter().map(|&w| VOCAB[w]).collect::<Vec<_>>().join(" ")))
                .collect();
            let terms: Vec<TermEntry> = terms
                .iter()
                .enumerate()
                .map(|(i, ws)| TermEntry::new(format!("t{i}"), ws.iter().map(|&w| VOCAB[w]).collect::<Vec<_>>().join(" "), Vec::<String>::new()))
                .collect();
            let idx = build_inverted_index(&corpus, &terms);
            prop_assert_eq!(&idx, &naive_index(&corpus, &terms));
            for docs in idx.postings.values() {
                prop_assert!(docs.windows(2).all(|w| w[0] < w[1]));
                prop_assert!(docs.len() <= idx.corpus_size);
            }
            let filtered = apply_weak_supervision_filters(&idx, &FilterConfig::new(4, 0.2).unwrap());
            for (term, docs) in &filtered.postings {
                prop_assert_eq!(Some(docs), idx.postings.get(term));
                prop_assert!(term.chars().count() >= 4);
                prop_assert!(docs.len() as f64 / idx.corpus_size as f64 <= 0.2);
            }
        }
    }
}
