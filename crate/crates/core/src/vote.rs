//! Majority voting across ensemble members (or across samples of one model).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parse::{DiseaseLabel, Identification, ParsedAnswer};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VoteError {
    #[error("ensemble has no members")]
    NoMembers,
    #[error("duplicate member `{0}`")]
    DuplicateMember(String),
    #[error("identification threshold {threshold} outside 1..={m}")]
    InvalidThreshold { threshold: usize, m: usize },
    #[error("incomplete ballot, missing votes from: {}", .0.join(", "))]
    IncompleteBallot(Vec<String>),
    #[error("vote from non-member `{0}`")]
    UnknownMember(String),
    #[error("no samples to aggregate")]
    NoSamples,
    #[error("samples come from several backends: {}", .0.join(", "))]
    MixedBackends(Vec<String>),
}

/// Ensemble membership and the yes-vote threshold.
///
/// Without an explicit threshold, a yes verdict needs at least half of the
/// members (`ceil(m / 2)`): 2 of 4, 2 of 3, 1 of 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub member_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identification_threshold: Option<usize>,
}

pub fn default_threshold(m: usize) -> usize {
    m.div_ceil(2)
}

impl EnsembleConfig {
    pub fn new(member_ids: Vec<String>) -> Result<Self, VoteError> {
        let cfg = Self {
            member_ids,
            identification_threshold: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_threshold(mut self, threshold: usize) -> Result<Self, VoteError> {
        self.identification_threshold = Some(threshold);
        self.validate()?;
        Ok(self)
    }

    pub fn m(&self) -> usize {
        self.member_ids.len()
    }

    pub fn threshold(&self) -> usize {
        self.identification_threshold.unwrap_or_else(|| default_threshold(self.m()))
    }

    pub fn validate(&self) -> Result<(), VoteError> {
        if self.member_ids.is_empty() {
            return Err(VoteError::NoMembers);
        }
        let mut seen = BTreeSet::new();
        for id in &self.member_ids {
            if !seen.insert(id) {
                return Err(VoteError::DuplicateMember(id.clone()));
            }
        }
        let t = self.threshold();
        if t < 1 || t > self.m() {
            return Err(VoteError::InvalidThreshold { threshold: t, m: self.m() });
        }
        Ok(())
    }

    /// The same ensemble minus one member. An explicit threshold is kept
    /// (clamped to the new size); the default rule is recomputed.
    pub fn without(&self, member: &str) -> Result<Self, VoteError> {
        let member_ids: Vec<String> = self.member_ids.iter().filter(|m| *m != member).cloned().collect();
        let identification_threshold = self.identification_threshold.map(|t| t.min(member_ids.len()));
        let cfg = Self {
            member_ids,
            identification_threshold,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn check_ballot<V>(&self, votes: &BTreeMap<String, V>) -> Result<(), VoteError> {
        if let Some(extra) = votes.keys().find(|k| !self.member_ids.contains(k)) {
            return Err(VoteError::UnknownMember(extra.clone()));
        }
        let missing: Vec<String> = self.member_ids.iter().filter(|m| !votes.contains_key(*m)).cloned().collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(VoteError::IncompleteBallot(missing))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentificationVerdict {
    pub decision: Identification,
    pub yes_votes: usize,
    pub threshold: usize,
    pub member_votes: BTreeMap<String, Identification>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassificationVerdict {
    /// Every label reaching the maximal count; ties are kept, not broken.
    pub argmax_set: BTreeSet<DiseaseLabel>,
    pub member_votes: BTreeMap<String, DiseaseLabel>,
}

impl ClassificationVerdict {
    pub fn contains(&self, label: &DiseaseLabel) -> bool {
        self.argmax_set.contains(label)
    }
}

pub fn vote_identification(
    votes: &BTreeMap<String, Identification>,
    cfg: &EnsembleConfig,
) -> Result<IdentificationVerdict, VoteError> {
    cfg.check_ballot(votes)?;
    let yes_votes = votes.values().filter(|v| v.is_yes()).count();
    let threshold = cfg.threshold();
    Ok(IdentificationVerdict {
        decision: Identification::from_bool(yes_votes >= threshold),
        yes_votes,
        threshold,
        member_votes: votes.clone(),
    })
}

pub fn vote_classification(
    votes: &BTreeMap<String, DiseaseLabel>,
    cfg: &EnsembleConfig,
) -> Result<ClassificationVerdict, VoteError> {
    cfg.check_ballot(votes)?;
    let mut counts: BTreeMap<&DiseaseLabel, usize> = BTreeMap::new();
    for label in votes.values() {
        *counts.entry(label).or_default() += 1;
    }
    let max = counts.values().copied().max().unwrap_or(0);
    Ok(ClassificationVerdict {
        argmax_set: counts.into_iter().filter(|(_, n)| *n == max).map(|(l, _)| l.clone()).collect(),
        member_votes: votes.clone(),
    })
}

/// A gold label counts as recovered when it is anywhere in the argmax set.
pub fn score_classification(verdict: &ClassificationVerdict, gold: &DiseaseLabel) -> bool {
    verdict.contains(gold)
}

/// Both verdicts for one sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleVerdict {
    pub identification: IdentificationVerdict,
    pub classification: ClassificationVerdict,
}

/// Votes on a complete ballot of parsed answers.
pub fn vote_ballot(ballot: &BTreeMap<String, ParsedAnswer>, cfg: &EnsembleConfig) -> Result<SampleVerdict, VoteError> {
    let ident = ballot.iter().map(|(k, a)| (k.clone(), a.identification)).collect();
    let class = ballot.iter().map(|(k, a)| (k.clone(), a.disease_label.clone())).collect();
    Ok(SampleVerdict {
        identification: vote_identification(&ident, cfg)?,
        classification: vote_classification(&class, cfg)?,
    })
}

/// Self-consistency: several answers sampled from a single backend, each
/// treated as one voter. `threshold` defaults to `ceil(k / 2)`.
pub fn self_consistency_aggregate(
    samples: &[(String, ParsedAnswer)],
    threshold: Option<usize>,
) -> Result<SampleVerdict, VoteError> {
    if samples.is_empty() {
        return Err(VoteError::NoSamples);
    }
    let backends: BTreeSet<&String> = samples.iter().map(|(b, _)| b).collect();
    if backends.len() > 1 {
        return Err(VoteError::MixedBackends(backends.into_iter().cloned().collect()));
    }
    let ballot: BTreeMap<String, ParsedAnswer> = samples
        .iter()
        .enumerate()
        .map(|(i, (_, a))| (format!("sample-{i:04}"), a.clone()))
        .collect();
    let mut cfg = EnsembleConfig::new(ballot.keys().cloned().collect())?;
    if let Some(t) = threshold {
        cfg = cfg.with_threshold(t)?;
    }
    vote_ballot(&ballot, &cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parse::AnswerSource;
    use proptest::prelude::*;

    fn members(n: usize) -> EnsembleConfig {
        EnsembleConfig::new((0..n).map(|i| format!("m{i}")).collect()).unwrap()
    }

    fn ident_ballot(bits: &[u8]) -> BTreeMap<String, Identification> {
        bits.iter()
            .enumerate()
            .map(|(i, b)| (format!("m{i}"), Identification::from_bool(*b == 1)))
            .collect()
    }

    fn class_ballot(labels: &[&str]) -> BTreeMap<String, DiseaseLabel> {
        labels.iter().enumerate().map(|(i, l)| (format!("m{i}"), DiseaseLabel::from(*l))).collect()
    }

    fn answer(yes: bool, label: &str) -> ParsedAnswer {
        ParsedAnswer {
            identification: Identification::from_bool(yes),
            disease_label: label.into(),
            source: AnswerSource::Auto,
        }
    }

    #[test]
    fn four_member_boundary() {
        let cfg = members(4);
        assert_eq!(cfg.threshold(), 2);
        let v = vote_identification(&ident_ballot(&[1, 1, 0, 0]), &cfg).unwrap();
        assert_eq!((v.decision, v.yes_votes), (Identification::Yes, 2));
        let v = vote_identification(&ident_ballot(&[1, 0, 0, 0]), &cfg).unwrap();
        assert_eq!(v.decision, Identification::No);
        let v = vote_identification(&ident_ballot(&[0, 0, 0, 0]), &cfg).unwrap();
        assert_eq!(v.decision, Identification::No);
    }

    #[test]
    fn default_thresholds() {
        assert_eq!(default_threshold(1), 1);
        assert_eq!(default_threshold(3), 2);
        assert_eq!(default_threshold(4), 2);
        assert_eq!(default_threshold(5), 3);
    }

    #[test]
    fn all_sixteen_ballots_match_counting() {
        let cfg = members(4);
        for mask in 0u8..16 {
            let bits: Vec<u8> = (0..4).map(|i| (mask >> i) & 1).collect();
            let yes = bits.iter().filter(|b| **b == 1).count();
            let expected = if yes < 2 { Identification::No } else { Identification::Yes };
            assert_eq!(vote_identification(&ident_ballot(&bits), &cfg).unwrap().decision, expected, "{bits:?}");
        }
    }

    #[test]
    fn incomplete_and_foreign_ballots() {
        let cfg = members(4);
        let err = vote_identification(&ident_ballot(&[1, 1, 0]), &cfg).unwrap_err();
        assert_eq!(err, VoteError::IncompleteBallot(vec!["m3".into()]));
        let mut extra = ident_ballot(&[1, 1, 0, 0]);
        extra.insert("zz".into(), Identification::Yes);
        assert_eq!(vote_identification(&extra, &cfg).unwrap_err(), VoteError::UnknownMember("zz".into()));
        assert!(vote_classification(&class_ballot(&["B"]), &cfg).is_err());
    }

    #[test]
    fn config_validation() {
        assert_eq!(EnsembleConfig::new(vec![]).unwrap_err(), VoteError::NoMembers);
        assert!(EnsembleConfig::new(vec!["a".into(), "a".into()]).is_err());
        assert!(members(4).with_threshold(0).is_err());
        assert!(members(4).with_threshold(5).is_err());
        assert_eq!(members(4).with_threshold(3).unwrap().threshold(), 3);
        let smaller = members(4).without("m3").unwrap();
        assert_eq!((smaller.m(), smaller.threshold()), (3, 2));
        assert!(members(1).without("m0").is_err());
    }

    #[test]
    fn classification_examples() {
        let cfg = members(4);
        let v = vote_classification(&class_ballot(&["B", "B", "B", "B"]), &cfg).unwrap();
        assert_eq!(v.argmax_set, BTreeSet::from(["B".into()]));
        let v = vote_classification(&class_ballot(&["B", "B", "GCA", "GCA"]), &cfg).unwrap();
        assert_eq!(v.argmax_set.len(), 2);
        assert!(score_classification(&v, &"B".into()));
        assert!(score_classification(&v, &"GCA".into()));
        assert!(!score_classification(&v, &"COP".into()));
        let v = vote_classification(&class_ballot(&["B", "GCA", "COP", "Other"]), &cfg).unwrap();
        assert_eq!(v.argmax_set.len(), 4);
        let single = vote_classification(&class_ballot(&["GCA", "GCA", "B", "COP"]), &cfg).unwrap();
        assert!(!score_classification(&single, &"B".into()));
    }

    #[test]
    fn all_625_classification_ballots_match_counting() {
        const LABELS: [&str; 5] = ["B", "GCA", "GVHD", "COP", "Other"];
        let cfg = members(4);
        for code in 0..625usize {
            let ballot: Vec<&str> = (0..4).map(|i| LABELS[(code / 5usize.pow(i)) % 5]).collect();
            let counts: Vec<usize> = LABELS.iter().map(|l| ballot.iter().filter(|b| *b == l).count()).collect();
            let max = *counts.iter().max().unwrap();
            let expected: BTreeSet<DiseaseLabel> = LABELS
                .iter()
                .zip(&counts)
                .filter(|(_, c)| **c == max)
                .map(|(l, _)| DiseaseLabel::from(*l))
                .collect();
            assert_eq!(vote_classification(&class_ballot(&ballot), &cfg).unwrap().argmax_set, expected);
        }
    }

    #[test]
    fn self_consistency_examples() {
        let one = self_consistency_aggregate(&[("x".into(), answer(true, "GCA"))], None).unwrap();
        assert_eq!(one.identification.decision, Identification::Yes);
        assert_eq!(one.classification.argmax_set, BTreeSet::from(["GCA".into()]));

        let s = [
            ("x".to_string(), answer(true, "B")),
            ("x".to_string(), answer(true, "B")),
            ("x".to_string(), answer(false, "COP")),
        ];
        let v = self_consistency_aggregate(&s, Some(2)).unwrap();
        assert_eq!(v.identification.decision, Identification::Yes);
        assert_eq!(v.classification.argmax_set, BTreeSet::from(["B".into()]));
        assert_eq!(self_consistency_aggregate(&s, None).unwrap(), v);

        let mixed = [("x".to_string(), answer(true, "B")), ("y".to_string(), answer(true, "B"))];
        assert!(matches!(self_consistency_aggregate(&mixed, None), Err(VoteError::MixedBackends(_))));
        assert_eq!(self_consistency_aggregate(&[], None), Err(VoteError::NoSamples));
    }

    proptest! {
        #[test]
        fn permutation_invariance(labels in prop::collection::vec(0usize..5, 1..6), yes in prop::collection::vec(any::<bool>(), 6), rot in 0usize..6) {
            const L: [&str; 5] = ["B", "GCA", "GVHD", "COP", "Other"];
            let n = labels.len();
            let cfg = members(n);
            let ballot: BTreeMap<String, ParsedAnswer> = (0..n).map(|i| (format!("m{i}"), answer(yes[i], L[labels[i]]))).collect();
            // Reassign the same answers to members in rotated order.
            let rotated: BTreeMap<String, ParsedAnswer> = (0..n).map(|i| (format!("m{i}"), ballot[&format!("m{}", (i + rot) % n)].clone())).collect();
            let a = vote_ballot(&ballot, &cfg).unwrap();
            let b = vote_ballot(&rotated, &cfg).unwrap();
            prop_assert_eq!(a.identification.decision, b.identification.decision);
            prop_assert_eq!(a.classification.argmax_set, b.classification.argmax_set);
        }

        #[test]
        fn unanimity_absorbs(n in 1usize..6, yes in any::<bool>(), label in 0usize..5) {
            const L: [&str; 5] = ["B", "GCA", "GVHD", "COP", "Other"];
            let ballot: BTreeMap<String, ParsedAnswer> = (0..n).map(|i| (format!("m{i}"), answer(yes, L[label]))).collect();
            let v = vote_ballot(&ballot, &members(n)).unwrap();
            prop_assert_eq!(v.identification.decision, Identification::from_bool(yes));
            prop_assert_eq!(v.classification.argmax_set, BTreeSet::from([DiseaseLabel::from(L[label])]));
        }
    }
}
