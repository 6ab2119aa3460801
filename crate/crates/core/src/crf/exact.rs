//! Brute-force CRF oracle for small scenes.

use crate::error::{Error, Result};

use super::{check_candidates, Candidates, PairwiseProvider};

/// Largest joint assignment count [`exact_inference`] will enumerate.
pub const ENUMERATION_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct ExactResult {
    pub map: Vec<usize>,
    pub map_score: f64,
    /// Aligned with each region's candidate list.
    pub marginals: Vec<Vec<f64>>,
}

/// Unnormalized log-score of a full labeling.
pub fn score_assignment(
    cands: &[Candidates],
    phi: &dyn PairwiseProvider,
    gamma: f64,
    positions: &[usize],
) -> f64 {
    let n = cands.len();
    let mut s: f64 = positions.iter().zip(cands).map(|(&a, c)| c.theta[a]).sum();
    if gamma != 0.0 {
        let mut pair = 0.0;
        for i in 0..n {
            for j in (0..n).filter(|&j| j != i) {
                pair += phi.phi(i, j, cands[i].classes[positions[i]], cands[j].classes[positions[j]]);
            }
        }
        s += gamma * pair;
    }
    s
}

/// Enumerates every joint labeling over the candidate lists. Returns the
/// exact MAP (ties to the lexicographically smallest class vector) and exact
/// per-region marginals.
pub fn exact_inference(
    cands: &[Candidates],
    phi: &dyn PairwiseProvider,
    gamma: f64,
) -> Result<ExactResult> {
    check_candidates(cands)?;
    let joint: f64 = cands.iter().map(|c| c.classes.len() as f64).product();
    if joint > ENUMERATION_LIMIT {
        return Err(Error::TooLarge {
            joint,
            limit: ENUMERATION_LIMIT,
        });
    }
    let n = cands.len();
    // Enumerate candidates in ascending class order so the first maximum is
    // the lexicographically smallest labeling.
    let orders: Vec<Vec<usize>> = cands
        .iter()
        .map(|c| {
            let mut o: Vec<usize> = (0..c.classes.len()).collect();
            o.sort_by_key(|&a| c.classes[a]);
            o
        })
        .collect();

    let mut digits = vec![0usize; n];
    let mut positions = vec![0usize; n];
    let mut scores = Vec::with_capacity(joint as usize);
    let mut assignments = Vec::with_capacity(joint as usize);
    loop {
        for i in 0..n {
            positions[i] = orders[i][digits[i]];
        }
        scores.push(score_assignment(cands, phi, gamma, &positions));
        assignments.push(positions.clone());
        // odometer, last region fastest
        let mut done = true;
        for r in (0..n).rev() {
            digits[r] += 1;
            if digits[r] < orders[r].len() {
                done = false;
                break;
            }
            digits[r] = 0;
        }
        if done {
            break;
        }
    }

    let mut best = 0;
    for (t, &s) in scores.iter().enumerate() {
        if s.is_nan() {
            return Err(Error::NonFinite("joint score".into()));
        }
        if s > scores[best] {
            best = t;
        }
    }
    let m = scores[best];
    let weights: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let z: f64 = weights.iter().sum();
    let mut marginals: Vec<Vec<f64>> = cands.iter().map(|c| vec![0.0; c.classes.len()]).collect();
    for (w, pos) in weights.iter().zip(&assignments) {
        for (i, &a) in pos.iter().enumerate() {
            marginals[i][a] += w / z;
        }
    }
    Ok(ExactResult {
        map: assignments[best]
            .iter()
            .zip(cands)
            .map(|(&a, c)| c.classes[a])
            .collect(),
        map_score: m,
        marginals,
    })
}
