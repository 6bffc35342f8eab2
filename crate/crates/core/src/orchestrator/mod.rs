//! Experiment runs: windows × members through render, generate and extract,
//! with an append-only log, resumption and the manual-annotation queue.

mod config;
mod report;
mod store;

use std::collections::{BTreeSet, HashSet};
use std::path::PathBuf;
use std::sync::Arc;

use thiserror::Error;

use crate::backend::{run_jobs, Backend, BackendError, BuildContext, Job, MockGold, RetryPolicy};
use crate::corpus::{
    apply_weak_supervision_filters, attach_gold, build_inverted_index, extract_context_windows, generate_synthetic_corpus,
    load_corpus, load_term_list, ContextWindow, CorpusError, GoldLabel, TermEntry, WindowRef,
};
use crate::eval::EvalError;
use crate::parse::{ClassSet, ClassSetError, ComplianceStatus, Extractor};
use crate::prompt::{render_prompt, PromptError, RenderedPrompt};
use crate::vote::{vote_ballot, VoteError};

pub use config::{MemberConfig, RunConfig, RunMode, SyntheticConfig};
pub use report::{correctness, evaluate_run, format_run_report, scored_ballots, Coverage, RunReport};
pub use store::{
    task_id, AnnotationTask, ClassInfo, CompletionSummary, Event, RecordEntry, RunHeader, RunRecord, RunState, RunStats,
    RunStore, TaskDetail, TaskFilter, TaskPage, TaskStatus, VerdictRecord, LOG_FILE,
};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Vote(#[from] VoteError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Classes(#[from] ClassSetError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("run log line {line}: {message}")]
    CorruptLog { line: usize, message: String },
    #[error("rejected event: {0}")]
    InvalidEvent(String),
    #[error("run directory holds a different configuration (fingerprint mismatch)")]
    FingerprintMismatch,
    #[error("unknown run `{0}`")]
    UnknownRun(String),
    #[error("unknown task `{0}`")]
    TaskNotFound(String),
    #[error("task `{0}` is already labeled")]
    AlreadyLabeled(String),
    #[error("invalid label: {0}")]
    InvalidLabel(String),
    #[error("{backend_id} / {prompt_hash} is not a non-compliant generation")]
    NotAFailure { backend_id: String, prompt_hash: String },
}

/// Inputs derived from the config: the dictionary entries of the classes
/// and the gold-labeled context windows.
#[derive(Debug, Clone)]
pub struct PreparedInputs {
    pub terms: Vec<TermEntry>,
    pub classes: Vec<TermEntry>,
    pub windows: Vec<ContextWindow>,
}

fn read_gold(path: &std::path::Path) -> Result<Vec<GoldLabel>, OrchestratorError> {
    let text = std::fs::read_to_string(path).map_err(|source| OrchestratorError::Io {
        path: path.display().to_string(),
        source,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| OrchestratorError::Config(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn prepare_inputs(cfg: &RunConfig) -> Result<PreparedInputs, OrchestratorError> {
    let terms = load_term_list(&cfg.resolve(&cfg.terms))?;
    let classes: Vec<TermEntry> = cfg
        .classes
        .iter()
        .map(|id| {
            terms
                .iter()
                .find(|t| &t.disease_id == id)
                .cloned()
                .ok_or_else(|| OrchestratorError::Config(format!("class `{id}` is not in the term list")))
        })
        .collect::<Result<_, _>>()?;
    let (documents, gold) = match (&cfg.corpus, &cfg.synthetic) {
        (Some(path), _) => {
            let docs = load_corpus(&cfg.resolve(path))?;
            let gold = match &cfg.gold {
                Some(g) => read_gold(&cfg.resolve(g))?,
                None => Vec::new(),
            };
            (docs, gold)
        }
        (None, Some(s)) => {
            let syn = generate_synthetic_corpus(cfg.seed, s.documents, &classes, s.positive_rate);
            (syn.documents, syn.gold)
        }
        (None, None) => return Err(OrchestratorError::Config("no corpus".into())),
    };
    let index = apply_weak_supervision_filters(&build_inverted_index(&documents, &terms), &cfg.filter);
    let mut windows = extract_context_windows(&documents, &index, &terms, &cfg.classes, &cfg.context_sizes)?;
    if let Some(cap) = cfg.max_documents_per_class {
        let mut kept: std::collections::BTreeMap<&str, BTreeSet<String>> = Default::default();
        for w in &windows {
            let docs = kept.entry(cfg.classes.iter().find(|c| **c == w.disease_id).unwrap()).or_default();
            if docs.len() < cap {
                docs.insert(w.doc_id.clone());
            }
        }
        windows.retain(|w| kept[w.disease_id.as_str()].contains(&w.doc_id));
    }
    attach_gold(&mut windows, &gold);
    Ok(PreparedInputs { terms, classes, windows })
}

pub fn class_set(cfg: &RunConfig, classes: &[TermEntry]) -> Result<ClassSet, OrchestratorError> {
    let mut set = ClassSet::new(classes)?;
    for (id, aliases) in &cfg.abbreviations {
        for a in aliases {
            set.add_abbreviation(id, a)?;
        }
    }
    Ok(set)
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Stop after this many new generations (used to simulate interruption).
    pub max_new_generations: Option<usize>,
    pub retry: RetryPolicy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Completed,
    Interrupted,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub status: RunStatus,
    pub new_generations: usize,
    pub store: RunStore,
}

struct Member {
    id: String,
    backend: usize,
    sample: u32,
}

struct Pair {
    window: usize,
    member: usize,
    prompt: RenderedPrompt,
}

/// Runs (or resumes) the experiment described by `cfg`.
///
/// Work happens in a fixed order: windows in extraction order, members in
/// ballot order. Generations are computed in parallel chunks but logged in
/// that order, so an interrupted run that is resumed writes the same log
/// as one that ran straight through. A (member, prompt hash) pair already
/// in the log is never generated again.
pub fn run_experiment(cfg: &RunConfig, opts: &RunOptions) -> Result<RunOutcome, OrchestratorError> {
    cfg.validate()?;
    let inputs = prepare_inputs(cfg)?;
    let classes = class_set(cfg, &inputs.classes)?;
    let ensemble = cfg.ensemble()?;
    let run_dir = cfg.run_dir();
    let store = RunStore::open(&run_dir)?;

    match store.with_state(|s| s.header.as_ref().map(|h| h.fingerprint.clone())) {
        Some(fp) if fp != cfg.fingerprint() => return Err(OrchestratorError::FingerprintMismatch),
        Some(_) => {}
        None => store.append(&[Event::RunStarted(RunHeader {
            run_id: cfg.run_id.clone(),
            fingerprint: cfg.fingerprint(),
            members: ensemble.member_ids.clone(),
            threshold: ensemble.threshold(),
            classes: inputs
                .classes
                .iter()
                .map(|t| ClassInfo {
                    id: t.disease_id.clone(),
                    label: t.preferred_label.clone(),
                    synonyms: t.synonyms.clone(),
                })
                .collect(),
        })])?,
    }
    if store.with_state(|s| s.completed.is_some()) {
        return Ok(RunOutcome {
            run_dir,
            status: RunStatus::Completed,
            new_generations: 0,
            store,
        });
    }

    let ctx = BuildContext {
        gold: Arc::new(MockGold::from_windows(&inputs.terms, &inputs.windows)),
        retry: opts.retry.clone(),
        base_dir: cfg.base_dir.clone(),
    };
    let backends: Vec<Backend> = cfg
        .backends
        .iter()
        .map(|b| Backend::build(b.spec.clone(), &ctx))
        .collect::<Result<_, _>>()?;
    let templates = cfg
        .backends
        .iter()
        .map(|b| cfg.template_for(b))
        .collect::<Result<Vec<_>, _>>()?;
    let extractors: Vec<Extractor> = templates
        .iter()
        .map(|t| Extractor::new(t.answer_keys.clone(), classes.clone()))
        .collect();
    let members: Vec<Member> = ensemble
        .member_ids
        .iter()
        .enumerate()
        .map(|(i, id)| match cfg.mode {
            RunMode::Mvp => Member {
                id: id.clone(),
                backend: i,
                sample: 0,
            },
            RunMode::SelfConsistency { .. } => Member {
                id: id.clone(),
                backend: 0,
                sample: i as u32,
            },
        })
        .collect();

    let mut pairs = Vec::with_capacity(inputs.windows.len() * members.len());
    for (wi, w) in inputs.windows.iter().enumerate() {
        for (mi, m) in members.iter().enumerate() {
            pairs.push(Pair {
                window: wi,
                member: mi,
                prompt: render_prompt(&templates[m.backend], w)?,
            });
        }
    }

    let chunk = cfg.parallelism * 16;
    let mut new_generations = 0usize;
    let mut start = 0;
    while start < pairs.len() {
        // Take pairs until the chunk holds `chunk` new generations or the
        // interruption budget is spent.
        let mut jobs: Vec<Job<'_>> = Vec::new();
        let mut planned: HashSet<(String, String)> = HashSet::new();
        let mut end = start;
        let mut interrupted = false;
        store.with_state(|s| {
            while end < pairs.len() && jobs.len() < chunk {
                let p = &pairs[end];
                let m = &members[p.member];
                let k = (m.id.clone(), p.prompt.content_hash.clone());
                if !s.generations.contains_key(&k) && !planned.contains(&k) {
                    if opts.max_new_generations.is_some_and(|cap| new_generations + jobs.len() >= cap) {
                        interrupted = true;
                        break;
                    }
                    planned.insert(k);
                    jobs.push(Job {
                        backend: &backends[m.backend],
                        member_id: &m.id,
                        prompt: &p.prompt,
                        sample: m.sample,
                    });
                }
                end += 1;
            }
        });
        let results = run_jobs(&jobs, cfg.parallelism)?;
        let mut fresh: std::collections::HashMap<(String, String), Result<_, BackendError>> = jobs
            .iter()
            .zip(results)
            .map(|(j, r)| ((j.member_id.to_string(), j.prompt.content_hash.clone()), r))
            .collect();

        let mut events = Vec::new();
        let mut failure = None;
        let snapshot = store.snapshot();
        let mut state = snapshot;
        for p in &pairs[start..end] {
            let w = &inputs.windows[p.window];
            let m = &members[p.member];
            let hash = &p.prompt.content_hash;
            let k = (m.id.clone(), hash.clone());
            let emit = |e: Event, state: &mut RunState, events: &mut Vec<Event>| {
                state.apply(&e).expect("runner emits consistent events");
                events.push(e);
            };
            if !state.has_prompt(&p.prompt.window_ref, &m.id) {
                emit(
                    Event::Prompt {
                        window_ref: p.prompt.window_ref.clone(),
                        member_id: m.id.clone(),
                        template_id: p.prompt.template_id.clone(),
                        prompt_hash: hash.clone(),
                        gold_identification: w.gold_identification,
                        gold_disease: w.gold_disease.clone(),
                        window_text: w.text.clone(),
                        prompt_text: p.prompt.text.clone(),
                    },
                    &mut state,
                    &mut events,
                );
            }
            if !state.generations.contains_key(&k) {
                match fresh.remove(&k) {
                    Some(Ok(g)) => {
                        new_generations += 1;
                        emit(
                            Event::Generation {
                                member_id: m.id.clone(),
                                prompt_hash: hash.clone(),
                                raw_text: g.raw_text,
                                attempt_count: g.attempt_count,
                            },
                            &mut state,
                            &mut events,
                        );
                    }
                    Some(Err(e)) => {
                        failure = Some(e);
                        break;
                    }
                    None => unreachable!("every missing generation in the chunk was scheduled"),
                }
            }
            if !state.extractions.contains_key(&k) {
                let raw = &state.generations[&k].raw_text;
                let result = extractors[m.backend].extract(raw);
                emit(
                    Event::Extraction {
                        member_id: m.id.clone(),
                        prompt_hash: hash.clone(),
                        result,
                    },
                    &mut state,
                    &mut events,
                );
            }
            if state.extractions[&k].status == ComplianceStatus::NonCompliant && state.task_for(&k.0, &k.1).is_none() {
                emit(
                    Event::AnnotationQueued {
                        task_id: task_id(&cfg.run_id, &k.0, &k.1),
                        member_id: k.0.clone(),
                        prompt_hash: k.1.clone(),
                    },
                    &mut state,
                    &mut events,
                );
            }
        }
        store.append(&events)?;
        if let Some(e) = failure {
            return Err(e.into());
        }
        if interrupted {
            return Ok(RunOutcome {
                run_dir,
                status: RunStatus::Interrupted,
                new_generations,
                store,
            });
        }
        start = end;
    }

    let mut events = Vec::new();
    let summary = store.with_state(|s| -> Result<CompletionSummary, OrchestratorError> {
        let mut complete = 0;
        // a cut log may already hold some of the verdicts
        let logged: std::collections::BTreeSet<&WindowRef> = s.verdicts.iter().map(|v| &v.window_ref).collect();
        for w in &s.windows {
            let (answers, missing) = s.ballot(w);
            if !missing.is_empty() {
                continue;
            }
            complete += 1;
            if logged.contains(&w.window_ref) {
                continue;
            }
            let v = vote_ballot(&answers, &ensemble)?;
            events.push(Event::Verdict(VerdictRecord {
                window_ref: w.window_ref.clone(),
                identification: v.identification.decision,
                yes_votes: v.identification.yes_votes,
                threshold: v.identification.threshold,
                argmax_set: v.classification.argmax_set.into_iter().collect(),
            }));
        }
        Ok(CompletionSummary {
            windows: s.windows.len(),
            generations: s.generations.len(),
            annotation_tasks: s.tasks.len(),
            complete_ballots: complete,
        })
    })?;
    events.push(Event::RunCompleted(summary));
    store.append(&events)?;
    Ok(RunOutcome {
        run_dir,
        status: RunStatus::Completed,
        new_generations,
        store,
    })
}
