//! Append-only run log and the state rebuilt from it.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::OrchestratorError;
use crate::corpus::WindowRef;
use crate::parse::{
    compliance_report, AnswerSource, ComplianceReport, ComplianceStatus, DiseaseLabel, ExtractionResult, Identification,
    ParsedAnswer, OTHER,
};

pub const LOG_FILE: &str = "log.jsonl";

/// One configured disease as recorded in the run header.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub id: String,
    pub label: String,
    #[serde(default)]
    pub synonyms: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunHeader {
    pub run_id: String,
    pub fingerprint: String,
    pub members: Vec<String>,
    pub threshold: usize,
    pub classes: Vec<ClassInfo>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionSummary {
    pub windows: usize,
    pub generations: usize,
    pub annotation_tasks: usize,
    pub complete_ballots: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub window_ref: WindowRef,
    pub identification: Identification,
    pub yes_votes: usize,
    pub threshold: usize,
    pub argmax_set: Vec<DiseaseLabel>,
}

/// One line of the run log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    RunStarted(RunHeader),
    Prompt {
        window_ref: WindowRef,
        member_id: String,
        template_id: String,
        prompt_hash: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gold_identification: Option<bool>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gold_disease: Option<String>,
        window_text: String,
        prompt_text: String,
    },
    Generation {
        member_id: String,
        prompt_hash: String,
        raw_text: String,
        attempt_count: u32,
    },
    Extraction {
        member_id: String,
        prompt_hash: String,
        result: ExtractionResult,
    },
    AnnotationQueued {
        task_id: String,
        member_id: String,
        prompt_hash: String,
    },
    Label {
        task_id: String,
        answer: ParsedAnswer,
        annotator_id: String,
        labeled_at: DateTime<Utc>,
    },
    Verdict(VerdictRecord),
    RunCompleted(CompletionSummary),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskStatus {
    Pending,
    Labeled,
}

/// A non-compliant generation waiting for (or holding) a human label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub task_id: String,
    pub backend_id: String,
    pub prompt_hash: String,
    /// First window whose prompt produced this generation.
    pub window_ref: WindowRef,
    pub raw_text: String,
    pub status: TaskStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<ParsedAnswer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotator_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labeled_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowEntry {
    pub window_ref: WindowRef,
    pub text: String,
    pub gold_identification: Option<bool>,
    pub gold_disease: Option<String>,
    /// member id → prompt hash
    pub prompts: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptInfo {
    pub text: String,
    pub template_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationEntry {
    pub raw_text: String,
    pub attempt_count: u32,
}

pub type GenKey = (String, String);

/// Everything the log says, indexed.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunState {
    pub header: Option<RunHeader>,
    pub windows: Vec<WindowEntry>,
    window_index: HashMap<WindowRef, usize>,
    pub prompts: HashMap<String, PromptInfo>,
    pub generations: HashMap<GenKey, GenerationEntry>,
    /// Generation keys in log order.
    pub generation_order: Vec<GenKey>,
    pub extractions: HashMap<GenKey, ExtractionResult>,
    pub tasks: BTreeMap<String, AnnotationTask>,
    /// Task ids in queue order.
    pub task_order: Vec<String>,
    task_by_key: HashMap<GenKey, String>,
    pub verdicts: Vec<VerdictRecord>,
    pub completed: Option<CompletionSummary>,
}

pub fn task_id(run_id: &str, member_id: &str, prompt_hash: &str) -> String {
    let digest = Sha256::digest(format!("{run_id}|{member_id}|{prompt_hash}").as_bytes());
    hex::encode(&digest[..8])
}

fn key(member: &str, hash: &str) -> GenKey {
    (member.to_string(), hash.to_string())
}

impl RunState {
    pub fn apply(&mut self, event: &Event) -> Result<(), String> {
        match event {
            Event::RunStarted(h) => {
                if self.header.is_some() {
                    return Err("second run_started".into());
                }
                self.header = Some(h.clone());
            }
            Event::Prompt {
                window_ref,
                member_id,
                template_id,
                prompt_hash,
                gold_identification,
                gold_disease,
                window_text,
                prompt_text,
            } => {
                let idx = *self.window_index.entry(window_ref.clone()).or_insert_with(|| {
                    self.windows.push(WindowEntry {
                        window_ref: window_ref.clone(),
                        text: window_text.clone(),
                        gold_identification: *gold_identification,
                        gold_disease: gold_disease.clone(),
                        prompts: BTreeMap::new(),
                    });
                    self.windows.len() - 1
                });
                self.windows[idx].prompts.insert(member_id.clone(), prompt_hash.clone());
                self.prompts.entry(prompt_hash.clone()).or_insert_with(|| PromptInfo {
                    text: prompt_text.clone(),
                    template_id: template_id.clone(),
                });
            }
            Event::Generation {
                member_id,
                prompt_hash,
                raw_text,
                attempt_count,
            } => {
                let k = key(member_id, prompt_hash);
                if !self.prompts.contains_key(prompt_hash) {
                    return Err(format!("generation for unknown prompt {prompt_hash}"));
                }
                if self.generations.contains_key(&k) {
                    return Err(format!("duplicate generation for {member_id} / {prompt_hash}"));
                }
                self.generations.insert(
                    k.clone(),
                    GenerationEntry {
                        raw_text: raw_text.clone(),
                        attempt_count: *attempt_count,
                    },
                );
                self.generation_order.push(k);
            }
            Event::Extraction {
                member_id,
                prompt_hash,
                result,
            } => {
                let k = key(member_id, prompt_hash);
                if !self.generations.contains_key(&k) {
                    return Err(format!("extraction without generation for {member_id} / {prompt_hash}"));
                }
                self.extractions.insert(k, result.clone());
            }
            Event::AnnotationQueued {
                task_id,
                member_id,
                prompt_hash,
            } => {
                let k = key(member_id, prompt_hash);
                let raw_text = self
                    .generations
                    .get(&k)
                    .ok_or_else(|| format!("task {task_id} for unknown generation"))?
                    .raw_text
                    .clone();
                let window_ref = self
                    .windows
                    .iter()
                    .find(|w| w.prompts.get(member_id) == Some(prompt_hash))
                    .map(|w| w.window_ref.clone())
                    .ok_or_else(|| format!("task {task_id} has no window"))?;
                if self.tasks.contains_key(task_id) {
                    return Err(format!("duplicate task {task_id}"));
                }
                self.tasks.insert(
                    task_id.clone(),
                    AnnotationTask {
                        task_id: task_id.clone(),
                        backend_id: member_id.clone(),
                        prompt_hash: prompt_hash.clone(),
                        window_ref,
                        raw_text,
                        status: TaskStatus::Pending,
                        label: None,
                        annotator_id: None,
                        labeled_at: None,
                    },
                );
                self.task_order.push(task_id.clone());
                self.task_by_key.insert(k, task_id.clone());
            }
            Event::Label {
                task_id,
                answer,
                annotator_id,
                labeled_at,
            } => {
                let task = self.tasks.get_mut(task_id).ok_or_else(|| format!("label for unknown task {task_id}"))?;
                if task.status == TaskStatus::Labeled {
                    return Err(format!("task {task_id} labeled twice"));
                }
                task.status = TaskStatus::Labeled;
                task.label = Some(answer.clone());
                task.annotator_id = Some(annotator_id.clone());
                task.labeled_at = Some(*labeled_at);
            }
            Event::Verdict(v) => self.verdicts.push(v.clone()),
            Event::RunCompleted(s) => self.completed = Some(s.clone()),
        }
        Ok(())
    }

    pub fn run_id(&self) -> Option<&str> {
        self.header.as_ref().map(|h| h.run_id.as_str())
    }

    pub fn has_prompt(&self, window_ref: &WindowRef, member: &str) -> bool {
        self.window_index
            .get(window_ref)
            .is_some_and(|&i| self.windows[i].prompts.contains_key(member))
    }

    pub fn task_for(&self, member: &str, hash: &str) -> Option<&AnnotationTask> {
        self.task_by_key.get(&key(member, hash)).and_then(|id| self.tasks.get(id))
    }

    /// The vote a generation contributes: its parsed answer, or the human
    /// label once its annotation task is done.
    pub fn answer_for(&self, member: &str, hash: &str) -> Option<ParsedAnswer> {
        let k = key(member, hash);
        match self.extractions.get(&k) {
            Some(r) if r.status != ComplianceStatus::NonCompliant => r.answer.clone(),
            Some(_) => self.task_for(member, hash).and_then(|t| t.label.clone()),
            None => None,
        }
    }

    /// Ballot of a window, plus the members still missing a vote.
    pub fn ballot(&self, window: &WindowEntry) -> (BTreeMap<String, ParsedAnswer>, Vec<String>) {
        let members = self.header.as_ref().map(|h| h.members.as_slice()).unwrap_or_default();
        let mut answers = BTreeMap::new();
        let mut missing = Vec::new();
        for m in members {
            match window.prompts.get(m).and_then(|h| self.answer_for(m, h)) {
                Some(a) => {
                    answers.insert(m.clone(), a);
                }
                None => missing.push(m.clone()),
            }
        }
        (answers, missing)
    }

    /// Non-compliant generations that have no task yet, in log order.
    pub fn unqueued_failures(&self) -> Vec<GenKey> {
        self.generation_order
            .iter()
            .filter(|k| {
                self.extractions.get(*k).is_some_and(|r| r.status == ComplianceStatus::NonCompliant)
                    && !self.task_by_key.contains_key(*k)
            })
            .cloned()
            .collect()
    }

    pub fn compliance(&self) -> Option<ComplianceReport> {
        let mut by_member: BTreeMap<&str, Vec<ComplianceStatus>> = BTreeMap::new();
        for k in &self.generation_order {
            if let Some(r) = self.extractions.get(k) {
                by_member.entry(k.0.as_str()).or_default().push(r.status);
            }
        }
        compliance_report(by_member.iter().map(|(m, s)| (*m, s.as_slice()))).ok()
    }

    pub fn record(&self) -> RunRecord {
        let members = self.header.as_ref().map(|h| h.members.clone()).unwrap_or_default();
        let mut entries = Vec::new();
        for w in &self.windows {
            for m in &members {
                let Some(hash) = w.prompts.get(m) else { continue };
                let k = key(m, hash);
                let extraction = self.extractions.get(&k);
                entries.push(RecordEntry {
                    window_ref: w.window_ref.clone(),
                    backend_id: m.clone(),
                    prompt_hash: hash.clone(),
                    raw_text: self.generations.get(&k).map(|g| g.raw_text.clone()),
                    status: extraction.map(|e| e.status),
                    answer: self.answer_for(m, hash),
                    task_id: self.task_for(m, hash).map(|t| t.task_id.clone()),
                });
            }
        }
        RunRecord {
            run_id: self.run_id().unwrap_or_default().to_string(),
            entries,
            verdicts: self.verdicts.clone(),
            completed: self.completed.is_some(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordEntry {
    pub window_ref: WindowRef,
    pub backend_id: String,
    pub prompt_hash: String,
    pub raw_text: Option<String>,
    pub status: Option<ComplianceStatus>,
    pub answer: Option<ParsedAnswer>,
    pub task_id: Option<String>,
}

/// Per-sample view of a run, in window then member order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub entries: Vec<RecordEntry>,
    pub verdicts: Vec<VerdictRecord>,
    pub completed: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskFilter {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<TaskStatus>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskPage {
    pub tasks: Vec<AnnotationTask>,
    pub total: usize,
    pub page: usize,
    pub page_size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDetail {
    #[serde(flatten)]
    pub task: AnnotationTask,
    pub window_text: String,
    pub disease: ClassInfo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub run_id: String,
    pub generations: usize,
    pub compliance: Option<ComplianceReport>,
    pub tasks_total: usize,
    pub tasks_pending: usize,
    pub tasks_labeled: usize,
    pub ballots_total: usize,
    pub ballots_complete: usize,
    pub completed: bool,
}

struct Inner {
    file: File,
    state: RunState,
}

/// A run directory's log, shared between the runner and the review API.
/// Reads and writes go through one lock; every append is flushed to disk
/// before the call returns.
pub struct RunStore {
    dir: PathBuf,
    inner: Mutex<Inner>,
}

impl std::fmt::Debug for RunStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RunStore").field("dir", &self.dir).finish_non_exhaustive()
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> OrchestratorError + '_ {
    move |source| OrchestratorError::Io {
        path: path.display().to_string(),
        source,
    }
}

impl RunStore {
    /// Opens (or creates) the log in `dir`. A trailing line without its
    /// newline is the remnant of an interrupted append and is cut off.
    pub fn open(dir: &Path) -> Result<Self, OrchestratorError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(LOG_FILE);
        let err = io_err(&path);
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(&path).map_err(&err)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(&err)?;
        let keep = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
        if keep < bytes.len() {
            log::warn!("{}: dropping {} bytes of incomplete trailing record", path.display(), bytes.len() - keep);
            file.set_len(keep as u64).map_err(&err)?;
            file.seek(SeekFrom::End(0)).map_err(&err)?;
        }
        let mut state = RunState::default();
        for (i, line) in BufReader::new(&bytes[..keep]).lines().enumerate() {
            let line = line.map_err(&err)?;
            if line.trim().is_empty() {
                continue;
            }
            let event: Event = serde_json::from_str(&line).map_err(|e| OrchestratorError::CorruptLog {
                line: i + 1,
                message: e.to_string(),
            })?;
            state.apply(&event).map_err(|message| OrchestratorError::CorruptLog { line: i + 1, message })?;
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            inner: Mutex::new(Inner { file, state }),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn log_path(&self) -> PathBuf {
        self.dir.join(LOG_FILE)
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn with_state<R>(&self, f: impl FnOnce(&RunState) -> R) -> R {
        f(&self.lock().state)
    }

    pub fn snapshot(&self) -> RunState {
        self.with_state(Clone::clone)
    }

    /// Validates events against the current state, writes them as one block
    /// and syncs the file.
    pub fn append(&self, events: &[Event]) -> Result<(), OrchestratorError> {
        let mut inner = self.lock();
        Self::append_locked(&mut inner, &self.log_path(), events)
    }

    fn append_locked(inner: &mut Inner, path: &Path, events: &[Event]) -> Result<(), OrchestratorError> {
        if events.is_empty() {
            return Ok(());
        }
        let mut next = inner.state.clone();
        let mut buf = Vec::new();
        for e in events {
            next.apply(e).map_err(OrchestratorError::InvalidEvent)?;
            serde_json::to_writer(&mut buf, e).expect("events serialize");
            buf.push(b'\n');
        }
        let err = io_err(path);
        inner.file.write_all(&buf).map_err(&err)?;
        inner.file.sync_data().map_err(&err)?;
        inner.state = next;
        Ok(())
    }

    /// One pending task per listed non-compliant generation. Generations
    /// that already have a task keep it.
    pub fn enqueue_manual_annotation(
        &self,
        run_id: &str,
        failures: &[GenKey],
    ) -> Result<Vec<AnnotationTask>, OrchestratorError> {
        let mut inner = self.lock();
        if inner.state.run_id() != Some(run_id) {
            return Err(OrchestratorError::UnknownRun(run_id.to_string()));
        }
        let mut events = Vec::new();
        let mut ids = Vec::new();
        for (member, hash) in failures {
            let status = inner.state.extractions.get(&key(member, hash)).map(|r| r.status);
            if status != Some(ComplianceStatus::NonCompliant) {
                return Err(OrchestratorError::NotAFailure {
                    backend_id: member.clone(),
                    prompt_hash: hash.clone(),
                });
            }
            let id = task_id(run_id, member, hash);
            if !inner.state.tasks.contains_key(&id) && !ids.contains(&id) {
                events.push(Event::AnnotationQueued {
                    task_id: id.clone(),
                    member_id: member.clone(),
                    prompt_hash: hash.clone(),
                });
            }
            ids.push(id);
        }
        let path = self.log_path();
        Self::append_locked(&mut inner, &path, &events)?;
        Ok(ids.iter().map(|id| inner.state.tasks[id].clone()).collect())
    }

    /// Records a human label. The first label on a task wins; later ones
    /// get [`OrchestratorError::AlreadyLabeled`].
    pub fn submit_label(
        &self,
        task_id: &str,
        identification: Identification,
        disease: &str,
        annotator_id: &str,
    ) -> Result<AnnotationTask, OrchestratorError> {
        let mut inner = self.lock();
        let task = inner
            .state
            .tasks
            .get(task_id)
            .ok_or_else(|| OrchestratorError::TaskNotFound(task_id.to_string()))?;
        if task.status == TaskStatus::Labeled {
            return Err(OrchestratorError::AlreadyLabeled(task_id.to_string()));
        }
        if annotator_id.trim().is_empty() {
            return Err(OrchestratorError::InvalidLabel("annotator_id is empty".into()));
        }
        let classes = &inner.state.header.as_ref().expect("tasks imply a header").classes;
        let disease_label = if disease.eq_ignore_ascii_case(OTHER) {
            DiseaseLabel::Other
        } else if let Some(c) = classes.iter().find(|c| c.id == disease) {
            DiseaseLabel::Disease(c.id.clone())
        } else {
            return Err(OrchestratorError::InvalidLabel(format!(
                "disease `{disease}` is not one of {} or {OTHER}",
                classes.iter().map(|c| c.id.as_str()).collect::<Vec<_>>().join(", ")
            )));
        };
        let event = Event::Label {
            task_id: task_id.to_string(),
            answer: ParsedAnswer {
                identification,
                disease_label,
                source: AnswerSource::Human,
            },
            annotator_id: annotator_id.to_string(),
            labeled_at: Utc::now(),
        };
        let path = self.log_path();
        Self::append_locked(&mut inner, &path, &[event])?;
        Ok(inner.state.tasks[task_id].clone())
    }

    pub fn list_tasks(&self, filter: &TaskFilter, page: usize, page_size: usize) -> TaskPage {
        let page = page.max(1);
        let page_size = page_size.max(1);
        self.with_state(|s| {
            let matching: Vec<&AnnotationTask> = s
                .task_order
                .iter()
                .map(|id| &s.tasks[id])
                .filter(|t| filter.status.is_none_or(|st| t.status == st))
                .filter(|t| filter.backend.as_ref().is_none_or(|b| &t.backend_id == b))
                .filter(|t| filter.context.is_none_or(|c| t.window_ref.window_words == c))
                .collect();
            TaskPage {
                total: matching.len(),
                tasks: matching
                    .into_iter()
                    .skip((page - 1).saturating_mul(page_size))
                    .take(page_size)
                    .cloned()
                    .collect(),
                page,
                page_size,
            }
        })
    }

    pub fn task_detail(&self, task_id: &str) -> Result<TaskDetail, OrchestratorError> {
        self.with_state(|s| {
            let task = s
                .tasks
                .get(task_id)
                .ok_or_else(|| OrchestratorError::TaskNotFound(task_id.to_string()))?;
            let window = s
                .windows
                .iter()
                .find(|w| w.window_ref == task.window_ref)
                .expect("task windows are logged");
            let disease_id = &task.window_ref.disease_id;
            let disease = s
                .header
                .as_ref()
                .and_then(|h| h.classes.iter().find(|c| &c.id == disease_id))
                .cloned()
                .unwrap_or_else(|| ClassInfo {
                    id: disease_id.clone(),
                    label: disease_id.clone(),
                    synonyms: vec![],
                });
            Ok(TaskDetail {
                task: task.clone(),
                window_text: window.text.clone(),
                disease,
            })
        })
    }

    pub fn stats(&self) -> RunStats {
        self.with_state(|s| {
            let labeled = s.tasks.values().filter(|t| t.status == TaskStatus::Labeled).count();
            let complete = s.windows.iter().filter(|w| s.ballot(w).1.is_empty()).count();
            RunStats {
                run_id: s.run_id().unwrap_or_default().to_string(),
                generations: s.generations.len(),
                compliance: s.compliance(),
                tasks_total: s.tasks.len(),
                tasks_pending: s.tasks.len() - labeled,
                tasks_labeled: labeled,
                ballots_total: s.windows.len(),
                ballots_complete: complete,
                completed: s.completed.is_some(),
            }
        })
    }
}
