//! Measurements on generated data and split plans, independent of the
//! generator's own geometry helpers.

use std::collections::BTreeSet;

use ccdet::dataset::synth::SynthParams;
use ccdet::dataset::{split, AnnotatedImage, Mask};

pub const PROFILE_BINS: usize = 9;

/// Mean thickness in `PROFILE_BINS` equal angular sectors of the arc,
/// measured as pixel area of the shape mask per unit arc length.
pub fn thickness_profile(p: &SynthParams, shape: &Mask) -> Vec<f64> {
    let start = (p.mid_angle - p.span / 2.0) as f64;
    let span = p.span as f64;
    let mut area = vec![0usize; PROFILE_BINS];
    for y in 0..shape.height {
        for x in 0..shape.width {
            if !shape.get(x, y) {
                continue;
            }
            let (dx, dy) = (x as f64 + 0.5 - p.center.0 as f64, y as f64 + 0.5 - p.center.1 as f64);
            let t = (dy.atan2(dx) - start).rem_euclid(std::f64::consts::TAU) / span;
            if t < 1.0 {
                area[((t * PROFILE_BINS as f64) as usize).min(PROFILE_BINS - 1)] += 1;
            }
        }
    }
    let arc_len = p.radius as f64 * span / PROFILE_BINS as f64;
    area.into_iter().map(|a| a as f64 / arc_len).collect()
}

pub fn coefficient_of_variation(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt() / mean
}

/// Mid-third mean over outer-thirds mean.
pub fn midbody_ratio(profile: &[f64]) -> f64 {
    let third = profile.len() / 3;
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let outer: Vec<f64> = profile[..third].iter().chain(&profile[2 * third..]).copied().collect();
    mean(&profile[third..2 * third]) / mean(&outer)
}

/// Shared area of two normalised histograms over common bins.
pub fn histogram_overlap(a: &[f64], b: &[f64], bins: usize) -> f64 {
    let lo = a.iter().chain(b).copied().fold(f64::INFINITY, f64::min);
    let hi = a.iter().chain(b).copied().fold(f64::NEG_INFINITY, f64::max);
    let hist = |v: &[f64]| {
        let mut h = vec![0.0; bins];
        for &x in v {
            let i = (((x - lo) / (hi - lo)) * bins as f64) as usize;
            h[i.min(bins - 1)] += 1.0 / v.len() as f64;
        }
        h
    };
    let (ha, hb) = (hist(a), hist(b));
    ha.iter().zip(&hb).map(|(x, y)| x.min(*y)).sum()
}

/// Every round of a seeded split keeps subjects on one side only, covers
/// every subject, and maps to a partition of the image indices.
pub fn split_is_leak_free(corpus: &[AnnotatedImage], seed: u64) -> Result<(), String> {
    let plans = split(corpus, 0.8, 3, seed).map_err(|e| e.to_string())?;
    let all: BTreeSet<&str> = corpus.iter().map(|s| s.subject_id.as_str()).collect();
    for p in &plans {
        if let Some(s) = p.train_subjects.intersection(&p.test_subjects).next() {
            return Err(format!("seed {seed} round {}: {s} on both sides", p.round_id));
        }
        let covered: BTreeSet<&str> = p.train_subjects.iter().chain(&p.test_subjects).map(String::as_str).collect();
        if covered != all {
            return Err(format!("seed {seed} round {}: subjects not covered", p.round_id));
        }
        let (tr, te) = (p.train_indices(corpus), p.test_indices(corpus));
        if tr.len() + te.len() != corpus.len() {
            return Err(format!("seed {seed} round {}: indices do not partition", p.round_id));
        }
        for &i in &te {
            if p.train_subjects.contains(&corpus[i].subject_id) {
                return Err(format!("seed {seed} round {}: test image {i} from a training subject", p.round_id));
            }
        }
    }
    Ok(())
}
