//! Context CRF over all regions of a scene.
//!
//! The joint score of a labeling is `sum_i theta_i(c_i) + gamma * sum_{i != j}
//! phi_ij(c_i, c_j)`. Inference first prunes each region to its top-K unary
//! classes and then fits a fully factorized mean-field approximation by
//! sequential coordinate updates, so context only reranks the candidates.

mod exact;

pub use exact::{exact_inference, score_assignment, ExactResult, ENUMERATION_LIMIT};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered-pair potential `phi_ij(c_i, c_j)` between regions `i` and `j`.
pub trait PairwiseProvider: Sync {
    fn phi(&self, i: usize, j: usize, ci: usize, cj: usize) -> f64;
}

impl<F> PairwiseProvider for F
where
    F: Fn(usize, usize, usize, usize) -> f64 + Sync,
{
    fn phi(&self, i: usize, j: usize, ci: usize, cj: usize) -> f64 {
        self(i, j, ci, cj)
    }
}

/// No context at all; every pairwise potential is zero.
pub struct NoContext;

impl PairwiseProvider for NoContext {
    fn phi(&self, _: usize, _: usize, _: usize, _: usize) -> f64 {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    pub gamma: f64,
    pub top_k: usize,
    pub max_sweeps: usize,
    /// Stop once no marginal moves by more than this in L1 during a sweep.
    pub convergence_tol: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            top_k: 5,
            max_sweeps: 50,
            convergence_tol: 1e-5,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.max_sweeps == 0 {
            return Err(Error::Config("top_k and max_sweeps must be at least 1".into()));
        }
        if !(self.gamma >= 0.0) || !(self.convergence_tol >= 0.0) {
            return Err(Error::Config("gamma and convergence_tol must be non-negative".into()));
        }
        Ok(())
    }
}

/// Candidate classes of one region with their unary log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidates {
    pub classes: Vec<usize>,
    pub theta: Vec<f64>,
}

/// Keeps the `k` best classes per region, best first; equal scores go to the
/// lower class index.
///
/// `unary[i][t]` is the log-probability of `classes[t]` for region `i`.
pub fn prune_topk(unary: &[Vec<f64>], classes: &[usize], k: usize) -> Result<Vec<Candidates>> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    unary
        .iter()
        .enumerate()
        .map(|(i, row)| {
            if row.len() != classes.len() {
                return Err(Error::Shape(format!(
                    "region {i}: {} scores for {} classes",
                    row.len(),
                    classes.len()
                )));
            }
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&a, &b| {
                row[b]
                    .partial_cmp(&row[a])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(classes[a].cmp(&classes[b]))
            });
            order.truncate(k);
            Ok(Candidates {
                classes: order.iter().map(|&t| classes[t]).collect(),
                theta: order.iter().map(|&t| row[t]).collect(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldState {
    pub candidates: Vec<Vec<usize>>,
    /// `q[i][a]` is the marginal of `candidates[i][a]`.
    pub q: Vec<Vec<f64>>,
    pub sweeps: usize,
    pub converged: bool,
}

impl MeanFieldState {
    /// Candidates of region `i` ranked by marginal, ties to the lower class.
    pub fn ranked(&self, i: usize) -> Vec<(usize, f64)> {
        let mut r: Vec<(usize, f64)> = self.candidates[i]
            .iter()
            .copied()
            .zip(self.q[i].iter().copied())
            .collect();
        r.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
        r
    }
}

pub(crate) fn softmax_into(logits: &[f64], out: &mut Vec<f64>) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    out.clear();
    out.extend(logits.iter().map(|&l| (l - m).exp()));
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= z);
}

/// Symmetrized coupling `phi_ij(a, b) + phi_ji(b, a)` for every ordered region
/// pair, indexed `[i][j][a * |cand_j| + b]`.
struct Coupling {
    n: usize,
    tables: Vec<Vec<f64>>,
}

impl Coupling {
    fn build(cands: &[Candidates], phi: &dyn PairwiseProvider) -> Result<Self> {
        let n = cands.len();
        let mut tables = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    tables.push(Vec::new());
                    continue;
                }
                let (ci, cj) = (&cands[i].classes, &cands[j].classes);
                let mut t = Vec::with_capacity(ci.len() * cj.len());
                for &a in ci {
                    for &b in cj {
                        let v = phi.phi(i, j, a, b) + phi.phi(j, i, b, a);
                        if !v.is_finite() {
                            return Err(Error::NonFinite(format!(
                                "pairwise potential between region {i} (class {a}) and region {j} (class {b})"
                            )));
                        }
                        t.push(v);
                    }
                }
                tables.push(t);
            }
        }
        Ok(Self { n, tables })
    }

    fn context(&self, i: usize, q: &[Vec<f64>], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for j in (0..self.n).filter(|&j| j != i) {
            let t = &self.tables[i * self.n + j];
            let qj = &q[j];
            let nb = qj.len();
            for (a, o) in out.iter_mut().enumerate() {
                let row = &t[a * nb..(a + 1) * nb];
                *o += row.iter().zip(qj).map(|(m, p)| m * p).sum::<f64>();
            }
        }
    }
}

fn check_candidates(cands: &[Candidates]) -> Result<()> {
    for (i, c) in cands.iter().enumerate() {
        if c.classes.is_empty() || c.classes.len() != c.theta.len() {
            return Err(Error::Shape(format!("region {i}: malformed candidate list")));
        }
        if let Some(t) = c.theta.iter().find(|t| t.is_nan() || **t == f64::INFINITY) {
            return Err(Error::NonFinite(format!("unary potential {t} for region {i}")));
        }
    }
    Ok(())
}

/// Initial marginals: softmax of the unary over each candidate list.
pub fn unary_marginals(cands: &[Candidates]) -> Vec<Vec<f64>> {
    cands
        .iter()
        .map(|c| {
            let mut q = Vec::new();
            softmax_into(&c.theta, &mut q);
            q
        })
        .collect()
}

/// State with marginals fixed at the unary softmax; what inference returns
/// when context is disabled.
pub fn unary_state(cands: &[Candidates]) -> MeanFieldState {
    MeanFieldState {
        candidates: cands.iter().map(|c| c.classes.clone()).collect(),
        q: unary_marginals(cands),
        sweeps: 0,
        converged: true,
    }
}

/// Mean-field inference started from the unary softmax.
pub fn mean_field(
    cands: &[Candidates],
    phi: &dyn PairwiseProvider,
    cfg: &InferenceConfig,
) -> Result<MeanFieldState> {
    mean_field_from(cands, phi, cfg, unary_marginals(cands), |_| {})
}

/// Mean-field inference returning the free energy at the start and after
/// every sweep.
pub fn mean_field_traced(
    cands: &[Candidates],
    phi: &dyn PairwiseProvider,
    cfg: &InferenceConfig,
    init: Vec<Vec<f64>>,
) -> Result<(MeanFieldState, Vec<f64>)> {
    let mut trace = Vec::new();
    let coupling = Coupling::build(cands, phi)?;
    let mut record = |q: &[Vec<f64>]| trace.push(free_energy_with(cands, q, &coupling, cfg.gamma));
    let state = run_sweeps(cands, &coupling, cfg, init, &mut record)?;
    Ok((state, trace))
}

/// Mean-field inference from explicit initial marginals. `on_sweep` sees the
/// marginals before the first sweep and after each one.
pub fn mean_field_from(
    cands: &[Candidates],
    phi: &dyn PairwiseProvider,
    cfg: &InferenceConfig,
    init: Vec<Vec<f64>>,
    mut on_sweep: impl FnMut(&[Vec<f64>]),
) -> Result<MeanFieldState> {
    cfg.validate()?;
    check_candidates(cands)?;
    let coupling = if cfg.gamma == 0.0 {
        Coupling {
            n: cands.len(),
            tables: Vec::new(),
        }
    } else {
        Coupling::build(cands, phi)?
    };
    run_sweeps(cands, &coupling, cfg, init, &mut on_sweep)
}

fn run_sweeps(
    cands: &[Candidates],
    coupling: &Coupling,
    cfg: &InferenceConfig,
    init: Vec<Vec<f64>>,
    on_sweep: &mut dyn FnMut(&[Vec<f64>]),
) -> Result<MeanFieldState> {
    cfg.validate()?;
    check_candidates(cands)?;
    if init.len() != cands.len()
        || init.iter().zip(cands).any(|(q, c)| q.len() != c.classes.len())
    {
        return Err(Error::Shape("initial marginals do not match candidates".into()));
    }
    let mut q = init;
    on_sweep(&q);
    let has_context = !coupling.tables.is_empty();
    let mut logits = Vec::new();
    let mut ctx = Vec::new();
    let mut next = Vec::new();
    let mut sweeps = 0;
    let mut converged = false;
    while sweeps < cfg.max_sweeps {
        sweeps += 1;
        let mut max_change: f64 = 0.0;
        for (i, c) in cands.iter().enumerate() {
            ctx.resize(c.classes.len(), 0.0);
            if has_context {
                coupling.context(i, &q, &mut ctx);
            } else {
                ctx.iter_mut().for_each(|v| *v = 0.0);
            }
            logits.clear();
            logits.extend(c.theta.iter().zip(&ctx).map(|(t, x)| t + cfg.gamma * x));
            softmax_into(&logits, &mut next);
            let change: f64 = next.iter().zip(&q[i]).map(|(a, b)| (a - b).abs()).sum();
            max_change = max_change.max(change);
            q[i].clone_from(&next);
        }
        on_sweep(&q);
        if max_change <= cfg.convergence_tol {
            converged = true;
            break;
        }
    }
    Ok(MeanFieldState {
        candidates: cands.iter().map(|c| c.classes.clone()).collect(),
        q,
        sweeps,
        converged,
    })
}

/// Per-region argmax of the marginals; ties go to the lower class index.
pub fn map_assignment(state: &MeanFieldState) -> Vec<usize> {
    state
        .candidates
        .iter()
        .zip(&state.q)
        .map(|(cls, q)| {
            let mut best = 0;
            for a in 1..cls.len() {
                if q[a] > q[best] || (q[a] == q[best] && cls[a] < cls[best]) {
                    best = a;
                }
            }
            cls[best]
        })
        .collect()
}

fn free_energy_with(cands: &[Candidates], q: &[Vec<f64>], coupling: &Coupling, gamma: f64) -> f64 {
    let mut f = 0.0;
    for (c, qi) in cands.iter().zip(q) {
        for (&p, &t) in qi.iter().zip(&c.theta) {
            if p > 0.0 {
                f += p * (p.ln() - t);
            }
        }
    }
    if gamma != 0.0 && !coupling.tables.is_empty() {
        // Each unordered pair appears twice in the symmetrized tables.
        let mut pair = 0.0;
        let mut ctx = Vec::new();
        for (i, qi) in q.iter().enumerate() {
            ctx.resize(qi.len(), 0.0);
            coupling.context(i, q, &mut ctx);
            pair += qi.iter().zip(&ctx).map(|(p, x)| p * x).sum::<f64>();
        }
        f -= gamma * 0.5 * pair;
    }
    f
}

/// Variational free energy `E_Q[-score] - H(Q)`; equals `KL(Q || P) - log Z`.
pub fn free_energy(
    state: &MeanFieldState,
    cands: &[Candidates],
    phi: &dyn PairwiseProvider,
    gamma: f64,
) -> Result<f64> {
    check_candidates(cands)?;
    let coupling = if gamma == 0.0 {
        Coupling {
            n: cands.len(),
            tables: Vec::new(),
        }
    } else {
        Coupling::build(cands, phi)?
    };
    Ok(free_energy_with(cands, &state.q, &coupling, gamma))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(classes: &[usize], theta: &[f64]) -> Candidates {
        Candidates {
            classes: classes.to_vec(),
            theta: theta.to_vec(),
        }
    }

    fn softmax(x: &[f64]) -> Vec<f64> {
        let mut v = Vec::new();
        softmax_into(x, &mut v);
        v
    }

    #[test]
    fn prune_orders_and_truncates() {
        let u = vec![vec![0.5f64.ln(), 0.3f64.ln(), 0.2f64.ln()]];
        let c = prune_topk(&u, &[0, 1, 2], 2).unwrap();
        assert_eq!(c[0].classes, vec![0, 1]);
        let all = prune_topk(&u, &[0, 1, 2], 10).unwrap();
        assert_eq!(all[0].classes, vec![0, 1, 2]);
        let tied = prune_topk(&[vec![-1.0, -1.0, -1.0]], &[7, 3, 5], 2).unwrap();
        assert_eq!(tied[0].classes, vec![3, 5]);
        assert!(prune_topk(&u, &[0, 1, 2], 0).is_err());
    }

    #[test]
    fn zero_gamma_is_unary_softmax() {
        let cands = vec![cand(&[0, 1], &[-0.2, -1.7]), cand(&[2, 0], &[-0.5, -0.9])];
        let phi = |_: usize, _: usize, _: usize, _: usize| 3.0;
        let cfg = InferenceConfig {
            gamma: 0.0,
            ..Default::default()
        };
        let s = mean_field(&cands, &phi, &cfg).unwrap();
        assert_eq!(s.sweeps, 1);
        assert!(s.converged);
        assert_eq!(s.q[0], softmax(&[-0.2, -1.7]));
        assert_eq!(map_assignment(&s), vec![0, 2]);
    }

    #[test]
    fn single_region_ignores_gamma() {
        let cands = vec![cand(&[4, 1, 3], &[-1.0, -0.4, -2.0])];
        let phi = |_: usize, _: usize, _: usize, _: usize| 1.0;
        let s = mean_field(&cands, &phi, &InferenceConfig::default()).unwrap();
        assert_eq!(s.q[0], softmax(&[-1.0, -0.4, -2.0]));
    }

    #[test]
    fn two_by_two_against_hand_iteration() {
        let th = [[0.1, -0.3], [-0.2, 0.4]];
        let p = [[[0.5, -0.1], [0.2, 0.3]], [[-0.4, 0.6], [0.1, 0.0]]]; // p[i][a][b] for i -> 1-i
        let phi = move |i: usize, _j: usize, a: usize, b: usize| p[i][a][b];
        let gamma = 0.7;
        let cands = vec![cand(&[0, 1], &th[0]), cand(&[0, 1], &th[1])];
        let cfg = InferenceConfig {
            gamma,
            max_sweeps: 500,
            convergence_tol: 1e-14,
            top_k: 2,
        };
        let s = mean_field(&cands, &phi, &cfg).unwrap();

        // Independent fixed-point iteration with explicit 2x2 arithmetic.
        let sm = |a: f64, b: f64| {
            let (ea, eb) = (a.exp(), b.exp());
            [ea / (ea + eb), eb / (ea + eb)]
        };
        let mut q0 = sm(th[0][0], th[0][1]);
        let mut q1 = sm(th[1][0], th[1][1]);
        for _ in 0..500 {
            let u = |a: usize| (0..2).map(|b| q1[b] * (p[0][a][b] + p[1][b][a])).sum::<f64>();
            q0 = sm(th[0][0] + gamma * u(0), th[0][1] + gamma * u(1));
            let v = |b: usize| (0..2).map(|a| q0[a] * (p[1][b][a] + p[0][a][b])).sum::<f64>();
            q1 = sm(th[1][0] + gamma * v(0), th[1][1] + gamma * v(1));
        }
        for a in 0..2 {
            assert!((s.q[0][a] - q0[a]).abs() < 1e-12);
            assert!((s.q[1][a] - q1[a]).abs() < 1e-12);
        }
    }

    #[test]
    fn map_ties_pick_lowest_class() {
        let s = MeanFieldState {
            candidates: vec![vec![5, 2, 9], vec![1, 0]],
            q: vec![vec![1.0 / 3.0; 3], vec![0.0, 1.0]],
            sweeps: 1,
            converged: true,
        };
        assert_eq!(map_assignment(&s), vec![2, 0]);
    }

    #[test]
    fn free_energy_at_zero_gamma_is_minus_log_partition() {
        let cands = vec![cand(&[0, 1, 2], &[-0.1, -2.0, -1.0]), cand(&[0, 1], &[0.3, -0.3])];
        let s = unary_state(&cands);
        let f = free_energy(&s, &cands, &NoContext, 0.0).unwrap();
        let want: f64 = -cands
            .iter()
            .map(|c| c.theta.iter().map(|t| t.exp()).sum::<f64>().ln())
            .sum::<f64>();
        assert!((f - want).abs() < 1e-12);

        let shifted: Vec<_> = cands
            .iter()
            .map(|c| cand(&c.classes, &c.theta.iter().map(|t| t + 2.5).collect::<Vec<_>>()))
            .collect();
        let fs = free_energy(&s, &shifted, &NoContext, 0.0).unwrap();
        assert!((fs - (f - 2.0 * 2.5)).abs() < 1e-12);
    }

    #[test]
    fn non_finite_potential_names_region() {
        let cands = vec![cand(&[0], &[0.0]), cand(&[1], &[0.0])];
        let phi = |i: usize, _: usize, _: usize, _: usize| if i == 1 { f64::NAN } else { 0.0 };
        let err = mean_field(&cands, &phi, &InferenceConfig::default()).unwrap_err();
        assert!(err.to_string().contains("region"));
    }
}
