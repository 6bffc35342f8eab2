use std::fmt;

use serde::{Deserialize, Serialize};

use super::AprfScores;

pub const MVP_ROW: &str = "Models-Vote Prompting";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Identification,
    Classification,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Identification => "identification",
            Task::Classification => "classification",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsRow {
    pub context: usize,
    pub task: Task,
    pub model: String,
    pub scores: AprfScores,
    /// Per APRF column: this row holds the best value for its context and task.
    pub best: [bool; 4],
}

fn hundredths(x: f64) -> i64 {
    (x * 100.0).round() as i64
}

/// Rows for one context and task: each model in the given order, then the
/// ensemble. Best flags compare values at the two decimals that are printed,
/// so displayed ties are all flagged.
pub fn build_results_table(
    per_model: Vec<(String, AprfScores)>,
    mvp: AprfScores,
    context: usize,
    task: Task,
) -> Vec<ResultsRow> {
    let mut rows: Vec<ResultsRow> = per_model
        .into_iter()
        .chain(std::iter::once((MVP_ROW.to_string(), mvp)))
        .map(|(model, scores)| ResultsRow {
            context,
            task,
            model,
            scores,
            best: [false; 4],
        })
        .collect();
    for col in 0..4 {
        let top = rows.iter().map(|r| hundredths(r.scores.as_array()[col])).max().unwrap_or(0);
        for r in rows.iter_mut() {
            r.best[col] = hundredths(r.scores.as_array()[col]) == top;
        }
    }
    rows
}

/// Aligned text rendering; best values are marked with `*`.
pub fn format_results_table(rows: &[ResultsRow]) -> String {
    let cells: Vec<[String; 4]> = rows
        .iter()
        .map(|r| {
            [
                r.model.clone(),
                format!("{} words", r.context),
                r.task.to_string(),
                r.scores
                    .as_array()
                    .iter()
                    .zip(r.best)
                    .map(|(v, b)| format!("{v:.2}{}", if b { "*" } else { " " }))
                    .collect::<Vec<_>>()
                    .join(" "),
            ]
        })
        .collect();
    let header = ["Model", "Context", "Task", "A     P     R     F"];
    let mut widths = header.map(|h| h.chars().count());
    for c in &cells {
        for (w, s) in widths.iter_mut().zip(c) {
            *w = (*w).max(s.chars().count());
        }
    }
    let line = |c: &[&str; 4]| -> String {
        let mut s = String::new();
        for (i, (cell, w)) in c.iter().zip(widths).enumerate() {
            if i > 0 {
                s.push_str("  ");
            }
            s.push_str(&format!("{cell:<w$}"));
        }
        s.trim_end().to_string()
    };
    let mut out = line(&header);
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 6));
    out.push('\n');
    for c in &cells {
        out.push_str(&line(&[c[0].as_str(), c[1].as_str(), c[2].as_str(), c[3].as_str()]));
        out.push('\n');
    }
    out
}

/// One JSON object per row.
pub fn results_to_jsonl(rows: &[ResultsRow]) -> String {
    rows.iter()
        .map(|r| serde_json::to_string(r).expect("rows serialize") + "\n")
        .collect()
}
