use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{aprf, resolve_classification, AprfScores, EvalError};
use crate::corpus::WindowRef;
use crate::parse::{DiseaseLabel, Identification, ParsedAnswer};
use crate::vote::{vote_ballot, EnsembleConfig};

/// One evaluated sample: its gold labels and every member's answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleBallot {
    pub window_ref: WindowRef,
    pub gold_identification: Identification,
    pub gold_disease: DiseaseLabel,
    pub answers: BTreeMap<String, ParsedAnswer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScores {
    pub samples: usize,
    pub identification: AprfScores,
    pub classification: AprfScores,
}

const IDENT_CLASSES: [Identification; 2] = [Identification::No, Identification::Yes];

fn score(
    preds: &[(Identification, DiseaseLabel)],
    ballots: &[&SampleBallot],
    classes: &[DiseaseLabel],
) -> Result<TaskScores, EvalError> {
    let gold_i: Vec<Identification> = ballots.iter().map(|b| b.gold_identification).collect();
    let gold_d: Vec<DiseaseLabel> = ballots.iter().map(|b| b.gold_disease.clone()).collect();
    let pred_i: Vec<Identification> = preds.iter().map(|p| p.0).collect();
    let pred_d: Vec<DiseaseLabel> = preds.iter().map(|p| p.1.clone()).collect();
    Ok(TaskScores {
        samples: ballots.len(),
        identification: aprf(&pred_i, &gold_i, &IDENT_CLASSES)?,
        classification: aprf(&pred_d, &gold_d, classes)?,
    })
}

fn by_context(ballots: &[SampleBallot]) -> BTreeMap<usize, Vec<&SampleBallot>> {
    let mut groups: BTreeMap<usize, Vec<&SampleBallot>> = BTreeMap::new();
    for b in ballots {
        groups.entry(b.window_ref.window_words).or_default().push(b);
    }
    groups
}

fn ensemble_predictions(
    ballots: &[&SampleBallot],
    cfg: &EnsembleConfig,
) -> Result<Vec<(Identification, DiseaseLabel)>, EvalError> {
    ballots
        .iter()
        .map(|b| {
            let votes: BTreeMap<String, ParsedAnswer> = cfg
                .member_ids
                .iter()
                .filter_map(|m| b.answers.get(m).map(|a| (m.clone(), a.clone())))
                .collect();
            let v = vote_ballot(&votes, cfg)?;
            Ok((v.identification.decision, resolve_classification(&v.classification, &b.gold_disease)))
        })
        .collect()
}

/// Ensemble scores per context size plus pooled over all samples.
pub fn score_ensemble(
    ballots: &[SampleBallot],
    cfg: &EnsembleConfig,
    classes: &[DiseaseLabel],
) -> Result<(BTreeMap<usize, TaskScores>, TaskScores), EvalError> {
    let all: Vec<&SampleBallot> = ballots.iter().collect();
    let overall = score(&ensemble_predictions(&all, cfg)?, &all, classes)?;
    let mut per_context = BTreeMap::new();
    for (ctx, group) in by_context(ballots) {
        per_context.insert(ctx, score(&ensemble_predictions(&group, cfg)?, &group, classes)?);
    }
    Ok((per_context, overall))
}

/// One member scored alone, over the samples where it has an answer.
pub fn score_member(
    ballots: &[SampleBallot],
    member: &str,
    classes: &[DiseaseLabel],
) -> Result<(BTreeMap<usize, TaskScores>, TaskScores), EvalError> {
    let answered: Vec<SampleBallot> = ballots.iter().filter(|b| b.answers.contains_key(member)).cloned().collect();
    let preds = |group: &[&SampleBallot]| -> Vec<(Identification, DiseaseLabel)> {
        group
            .iter()
            .map(|b| {
                let a = &b.answers[member];
                (a.identification, a.disease_label.clone())
            })
            .collect()
    };
    let all: Vec<&SampleBallot> = answered.iter().collect();
    let overall = score(&preds(&all), &all, classes)?;
    let mut per_context = BTreeMap::new();
    for (ctx, group) in by_context(&answered) {
        per_context.insert(ctx, score(&preds(&group), &group, classes)?);
    }
    Ok((per_context, overall))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// `None` for the full-ensemble baseline.
    pub excluded: Option<String>,
    pub per_context: BTreeMap<usize, TaskScores>,
    pub overall: TaskScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    /// Baseline first, then one row per excluded member in ensemble order.
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn baseline(&self) -> &AblationRow {
        &self.rows[0]
    }

    pub fn without(&self, member: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.excluded.as_deref() == Some(member))
    }
}

/// Re-scores the ensemble once per member with that member's votes removed.
pub fn ablation_leave_one_out(
    ballots: &[SampleBallot],
    cfg: &EnsembleConfig,
    classes: &[DiseaseLabel],
) -> Result<AblationReport, EvalError> {
    if cfg.m() < 2 {
        return Err(EvalError::EnsembleTooSmall);
    }
    let (per_context, overall) = score_ensemble(ballots, cfg, classes)?;
    let mut rows = vec![AblationRow {
        excluded: None,
        per_context,
        overall,
    }];
    let reduced: Vec<AblationRow> = cfg
        .member_ids
        .par_iter()
        .map(|member| {
            let sub = cfg.without(member)?;
            let (per_context, overall) = score_ensemble(ballots, &sub, classes)?;
            Ok(AblationRow {
                excluded: Some(member.clone()),
                per_context,
                overall,
            })
        })
        .collect::<Result<_, EvalError>>()?;
    rows.extend(reduced);
    Ok(AblationReport { rows })
}
