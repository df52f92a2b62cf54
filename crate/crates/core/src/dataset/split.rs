//! Class-stratified, subject-level hold-out splits.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{subject_classes, AnnotatedImage};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub round_id: usize,
    pub train_subjects: BTreeSet<String>,
    pub test_subjects: BTreeSet<String>,
    pub fraction: f64,
}

impl SplitPlan {
    /// Fails if any subject appears on both sides.
    pub fn check_disjoint(&self) -> Result<()> {
        match self.train_subjects.intersection(&self.test_subjects).next() {
            Some(s) => Err(Error::Leakage(format!("subject {s} is in both train and test of round {}", self.round_id))),
            None => Ok(()),
        }
    }

    pub fn train_indices(&self, corpus: &[AnnotatedImage]) -> Vec<usize> {
        (0..corpus.len()).filter(|&i| self.train_subjects.contains(&corpus[i].subject_id)).collect()
    }

    pub fn test_indices(&self, corpus: &[AnnotatedImage]) -> Vec<usize> {
        (0..corpus.len()).filter(|&i| self.test_subjects.contains(&corpus[i].subject_id)).collect()
    }
}

/// `rounds` independent shuffles; in each, every class contributes
/// `round(fraction · n_class)` subjects to training (at least one on each side).
pub fn split(corpus: &[AnnotatedImage], fraction: f64, rounds: usize, seed: u64) -> Result<Vec<SplitPlan>> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config("fraction", format!("{fraction} is not in (0, 1)")));
    }
    if rounds == 0 {
        return Err(Error::config("rounds", "must be at least 1"));
    }
    let classes = subject_classes(corpus)?;
    let mut by_class: Vec<Vec<String>> = Vec::new();
    for (subject, &c) in &classes {
        if by_class.len() <= c {
            by_class.resize(c + 1, Vec::new());
        }
        by_class[c].push(subject.clone());
    }
    for (c, subjects) in by_class.iter().enumerate() {
        if subjects.len() < 2 {
            return Err(Error::Dataset {
                record: format!("class {c}"),
                detail: format!("{} subject(s); a split needs at least 2 per class", subjects.len()),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plans = Vec::with_capacity(rounds);
    for round_id in 0..rounds {
        let mut plan = SplitPlan { round_id, train_subjects: BTreeSet::new(), test_subjects: BTreeSet::new(), fraction };
        for subjects in &by_class {
            let mut order = subjects.clone();
            order.shuffle(&mut rng);
            let n_train = ((fraction * order.len() as f64).round() as usize).clamp(1, order.len() - 1);
            plan.train_subjects.extend(order[..n_train].iter().cloned());
            plan.test_subjects.extend(order[n_train..].iter().cloned());
        }
        plan.check_disjoint()?;
        plans.push(plan);
    }
    Ok(plans)
}
