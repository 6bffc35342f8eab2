use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::store::{RunState, VerdictRecord};
use super::OrchestratorError;
use crate::corpus::WindowRef;
use crate::eval::{
    ablation_leave_one_out, build_results_table, format_results_table, score_ensemble, score_member, AblationReport,
    ResultsRow, SampleBallot, Task,
};
use crate::parse::{ComplianceReport, DiseaseLabel, Identification};
use crate::vote::{score_classification, vote_ballot, EnsembleConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Coverage {
    pub windows: usize,
    /// Windows whose ballot has a vote from every member.
    pub complete: usize,
    /// Complete windows that also carry gold labels; metrics use these.
    pub scored: usize,
}

impl Coverage {
    pub fn fraction(&self) -> f64 {
        if self.windows == 0 {
            0.0
        } else {
            self.scored as f64 / self.windows as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub coverage: Coverage,
    pub compliance: Option<ComplianceReport>,
    pub table: Vec<ResultsRow>,
    /// Current verdicts, human labels included.
    pub verdicts: Vec<VerdictRecord>,
    pub ablation: Option<AblationReport>,
    pub pending_tasks: usize,
}

fn ensemble_of(state: &RunState) -> Result<EnsembleConfig, OrchestratorError> {
    let header = state
        .header
        .as_ref()
        .ok_or_else(|| OrchestratorError::UnknownRun("(empty log)".into()))?;
    Ok(EnsembleConfig::new(header.members.clone())?.with_threshold(header.threshold)?)
}

fn class_labels(state: &RunState) -> Vec<DiseaseLabel> {
    let mut labels: Vec<DiseaseLabel> = state
        .header
        .iter()
        .flat_map(|h| h.classes.iter().map(|c| DiseaseLabel::Disease(c.id.clone())))
        .collect();
    labels.push(DiseaseLabel::Other);
    labels
}

/// Complete, gold-labeled ballots in window order.
pub fn scored_ballots(state: &RunState) -> Vec<SampleBallot> {
    state
        .windows
        .iter()
        .filter_map(|w| {
            let (answers, missing) = state.ballot(w);
            let (Some(ident), Some(disease)) = (w.gold_identification, w.gold_disease.as_ref()) else {
                return None;
            };
            missing.is_empty().then(|| SampleBallot {
                window_ref: w.window_ref.clone(),
                gold_identification: Identification::from_bool(ident),
                gold_disease: DiseaseLabel::from(disease.as_str()),
                answers,
            })
        })
        .collect()
}

pub fn evaluate_run(state: &RunState) -> Result<RunReport, OrchestratorError> {
    let ensemble = ensemble_of(state)?;
    let classes = class_labels(state);
    let ballots = scored_ballots(state);

    let mut verdicts = Vec::new();
    let mut complete = 0;
    for w in &state.windows {
        let (answers, missing) = state.ballot(w);
        if !missing.is_empty() {
            continue;
        }
        complete += 1;
        let v = vote_ballot(&answers, &ensemble)?;
        verdicts.push(VerdictRecord {
            window_ref: w.window_ref.clone(),
            identification: v.identification.decision,
            yes_votes: v.identification.yes_votes,
            threshold: v.identification.threshold,
            argmax_set: v.classification.argmax_set.into_iter().collect(),
        });
    }

    let mut table = Vec::new();
    let mut ablation = None;
    if !ballots.is_empty() {
        let (mvp_by_ctx, _) = score_ensemble(&ballots, &ensemble, &classes)?;
        let mut member_by_ctx = BTreeMap::new();
        for m in &ensemble.member_ids {
            member_by_ctx.insert(m.clone(), score_member(&ballots, m, &classes)?.0);
        }
        for (ctx, mvp) in &mvp_by_ctx {
            for task in [Task::Identification, Task::Classification] {
                let pick = |s: &crate::eval::TaskScores| match task {
                    Task::Identification => s.identification,
                    Task::Classification => s.classification,
                };
                let per_model = ensemble
                    .member_ids
                    .iter()
                    .map(|m| (m.clone(), pick(&member_by_ctx[m][ctx])))
                    .collect();
                table.extend(build_results_table(per_model, pick(mvp), *ctx, task));
            }
        }
        if ensemble.m() >= 2 {
            ablation = Some(ablation_leave_one_out(&ballots, &ensemble, &classes)?);
        }
    }

    Ok(RunReport {
        run_id: state.run_id().unwrap_or_default().to_string(),
        coverage: Coverage {
            windows: state.windows.len(),
            complete,
            scored: ballots.len(),
        },
        compliance: state.compliance(),
        table,
        verdicts,
        ablation,
        pending_tasks: state
            .tasks
            .values()
            .filter(|t| t.status == super::TaskStatus::Pending)
            .count(),
    })
}

/// Per-window 0/1 correctness, for the ensemble (`member = None`) or one
/// member, over scored ballots.
pub fn correctness(state: &RunState, member: Option<&str>, task: Task) -> Result<BTreeMap<WindowRef, f64>, OrchestratorError> {
    let ensemble = ensemble_of(state)?;
    let mut out = BTreeMap::new();
    for b in scored_ballots(state) {
        let ok = match member {
            None => {
                let v = vote_ballot(&b.answers, &ensemble)?;
                match task {
                    Task::Identification => v.identification.decision == b.gold_identification,
                    Task::Classification => score_classification(&v.classification, &b.gold_disease),
                }
            }
            Some(m) => {
                let a = b
                    .answers
                    .get(m)
                    .ok_or_else(|| OrchestratorError::Config(format!("no member `{m}` in this run")))?;
                match task {
                    Task::Identification => a.identification == b.gold_identification,
                    Task::Classification => a.disease_label == b.gold_disease,
                }
            }
        };
        out.insert(b.window_ref, if ok { 1.0 } else { 0.0 });
    }
    Ok(out)
}

/// Plain-text rendering of a report.
pub fn format_run_report(r: &RunReport) -> String {
    let mut out = format!(
        "run {}: {} of {} windows scored ({:.1}% coverage), {} complete ballots, {} annotation tasks pending\n",
        r.run_id,
        r.coverage.scored,
        r.coverage.windows,
        r.coverage.fraction() * 100.0,
        r.coverage.complete,
        r.pending_tasks
    );
    if let Some(c) = &r.compliance {
        out.push_str("\nJSON compliance\n");
        for rec in c.per_backend.iter().chain(std::iter::once(&c.overall)) {
            out.push_str(&format!(
                "  {:<24} {:>6} failures / {:>6}  {}%\n",
                rec.backend_id,
                rec.failures,
                rec.total,
                rec.percent_one_decimal()
            ));
        }
    }
    if !r.table.is_empty() {
        out.push('\n');
        out.push_str(&format_results_table(&r.table));
    }
    if let Some(a) = &r.ablation {
        out.push_str("\nLeave-one-out (overall, identification / classification accuracy)\n");
        for row in &a.rows {
            let name = row.excluded.as_deref().map_or("(all members)".to_string(), |m| format!("without {m}"));
            out.push_str(&format!(
                "  {:<28} {:.4} / {:.4}\n",
                name, row.overall.identification.accuracy, row.overall.classification.accuracy
            ));
        }
    }
    if r.coverage.scored == 0 {
        out.push_str("\nno scored windows yet\n");
    }
    out
}
