//! Pseudo-likelihood objective for the relation network and its exact gradient.
//!
//! For region `i` with ground truth `y_i` and every seen class `c`:
//!
//! ```text
//! s_i(c) = theta_i(c) + gamma * sum_{j != i} [ phi_ij(c, y_j) + phi_ji(y_j, c) ]
//! L      = sum_i ( logsumexp_{c in S} s_i(c) - s_i(y_i) )
//! ```
//!
//! The unary term is dropped when no unary log-probabilities are supplied.

use crate::error::{Error, Result};
use crate::kgraph::{LabelSpace, RelationGraph};
use crate::par::{self, Exec};
use crate::scene::Scene;

use super::{Forward, RelNetParams};

/// Graph, label space and coupling weight shared by every loss evaluation.
#[derive(Clone, Copy)]
pub struct LossTerms<'a> {
    pub graph: &'a RelationGraph,
    pub labels: &'a LabelSpace,
    pub gamma: f64,
}

pub fn pseudo_likelihood_loss(
    scene: &Scene,
    params: &RelNetParams,
    terms: LossTerms<'_>,
    unary: Option<&[Vec<f64>]>,
) -> Result<f64> {
    scene_loss(scene, params, terms, unary, false).map(|(l, _)| l)
}

/// Loss and its gradient with respect to every relation-net parameter.
pub fn loss_gradients(
    scene: &Scene,
    params: &RelNetParams,
    terms: LossTerms<'_>,
    unary: Option<&[Vec<f64>]>,
) -> Result<(f64, RelNetParams)> {
    let (l, g) = scene_loss(scene, params, terms, unary, true)?;
    Ok((l, g.expect("gradient requested")))
}

/// Summed loss and gradient over several scenes. Per-scene work may run in
/// parallel; the reduction is always in input order.
pub fn batch_loss_gradients(
    scenes: &[&Scene],
    unary: Option<&[&[Vec<f64>]]>,
    params: &RelNetParams,
    terms: LossTerms<'_>,
    exec: Exec,
) -> Result<(f64, RelNetParams)> {
    if let Some(u) = unary {
        if u.len() != scenes.len() {
            return Err(Error::Shape(format!(
                "{} scenes but {} unary blocks",
                scenes.len(),
                u.len()
            )));
        }
    }
    let parts = par::map_range(exec, scenes.len(), |s| {
        loss_gradients(scenes[s], params, terms, unary.map(|u| u[s]))
    });
    let mut total = 0.0;
    let mut grad = params.zeros_like();
    for part in parts {
        let (l, g) = part?;
        total += l;
        grad.axpy(1.0, &g);
    }
    Ok((total, grad))
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn scene_loss(
    scene: &Scene,
    params: &RelNetParams,
    terms: LossTerms<'_>,
    unary: Option<&[Vec<f64>]>,
    want_grad: bool,
) -> Result<(f64, Option<RelNetParams>)> {
    let LossTerms { graph, labels, gamma } = terms;
    if params.n_relations() != graph.n_relations() {
        return Err(Error::Shape(format!(
            "relation net has {} outputs, graph has {} predicates",
            params.n_relations(),
            graph.n_relations()
        )));
    }
    if graph.n_classes() != labels.len() {
        return Err(Error::Shape("graph and label space disagree".into()));
    }
    let n = scene.len();
    let y = scene.labels()?;
    for (i, &c) in y.iter().enumerate() {
        labels.check(c)?;
        if !labels.is_seen(c) {
            return Err(Error::UnseenLabel { region: i, class: c });
        }
    }
    if let Some(u) = unary {
        if u.len() != n || u.iter().any(|row| row.len() != labels.len()) {
            return Err(Error::Shape(format!(
                "unary must be {n} rows of {} log-probabilities",
                labels.len()
            )));
        }
    }
    let seen = labels.seen();
    let k = params.n_relations();

    let mut fwd: Vec<Option<Forward>> = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            if i == j || gamma == 0.0 {
                fwd.push(None);
            } else {
                let x = params.input(
                    &scene.regions[i].bbox,
                    &scene.regions[j].bbox,
                    params.pair_features(scene, i, j),
                )?;
                fwd.push(Some(params.forward_cached(x)));
            }
        }
    }
    let ell = |i: usize, j: usize| -> &[f64] {
        fwd[i * n + j]
            .as_ref()
            .map(|f| f.out.as_slice().unwrap())
            .unwrap_or(&[])
    };

    let mut loss = 0.0;
    // w[i][t] = P_i(seen[t]) - [seen[t] == y_i]
    let mut w: Vec<Vec<f64>> = Vec::with_capacity(if want_grad { n } else { 0 });
    for i in 0..n {
        let scores: Vec<f64> = seen
            .iter()
            .map(|&c| {
                let mut s = unary.map_or(0.0, |u| u[i][c]);
                if gamma != 0.0 {
                    let mut ctx = 0.0;
                    for j in (0..n).filter(|&j| j != i) {
                        let (lij, lji) = (ell(i, j), ell(j, i));
                        ctx += graph.between(c, y[j]).iter().map(|&r| lij[r]).sum::<f64>();
                        ctx += graph.between(y[j], c).iter().map(|&r| lji[r]).sum::<f64>();
                    }
                    s += gamma * ctx;
                }
                s
            })
            .collect();
        let pos = seen.binary_search(&y[i]).expect("label checked as seen");
        let lse = log_sum_exp(&scores);
        let li = lse - scores[pos];
        if !li.is_finite() {
            return Err(Error::NonFinite(format!(
                "pseudo-likelihood term for region {i} of scene {}",
                scene.id
            )));
        }
        loss += li;
        if want_grad {
            let mut wi: Vec<f64> = scores.iter().map(|s| (s - lse).exp()).collect();
            wi[pos] -= 1.0;
            w.push(wi);
        }
    }
    if !want_grad {
        return Ok((loss, None));
    }

    let mut grad = params.zeros_like();
    if gamma == 0.0 {
        return Ok((loss, Some(grad)));
    }
    let mut upstream = vec![0.0; k];
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            upstream.iter_mut().for_each(|u| *u = 0.0);
            for (t, &c) in seen.iter().enumerate() {
                let (wi, wj) = (w[i][t], w[j][t]);
                for &r in graph.between(c, y[j]) {
                    upstream[r] += gamma * wi;
                }
                for &r in graph.between(y[i], c) {
                    upstream[r] += gamma * wj;
                }
            }
            if upstream.iter().all(|&u| u == 0.0) {
                continue;
            }
            let f = fwd[i * n + j].as_ref().expect("forward cached");
            params.backward(f, &upstream, params.pair_features(scene, i, j), &mut grad);
        }
    }
    Ok((loss, Some(grad)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BBox, GeomEmbedConfig};
    use crate::kgraph::RelationSet;
    use crate::scene::Region;

    fn embed() -> GeomEmbedConfig {
        GeomEmbedConfig {
            dims_per_component: 4,
            wavelength_base: 10.0,
            clamp_eps: 1e-3,
        }
    }

    fn region(x: f64, y: f64, w: f64, h: f64, label: usize) -> Region {
        Region {
            bbox: BBox::new(x, y, w, h).unwrap(),
            feature: vec![0.5, -0.25, 1.0],
            label: Some(label),
        }
    }

    fn world() -> (LabelSpace, RelationGraph) {
        let labels = LabelSpace::new(
            vec!["a".into(), "b".into(), "c".into(), "u".into()],
            vec![true, true, true, false],
        )
        .unwrap();
        let rs = RelationSet::new(vec!["on".into(), "near".into()]).unwrap();
        let g = RelationGraph::from_edges(4, rs, [(0, 0, 1), (1, 1, 0), (2, 0, 1), (0, 1, 2), (3, 0, 1)])
            .unwrap();
        (labels, g)
    }

    #[test]
    fn single_region_without_unary_is_uniform() {
        let (labels, g) = world();
        let p = RelNetParams::init(embed(), 4, 2, None, 3).unwrap();
        let scene = Scene { id: "s".into(), regions: vec![region(0., 0., 1., 1., 1)] };
        let terms = LossTerms { graph: &g, labels: &labels, gamma: 1.0 };
        let l = pseudo_likelihood_loss(&scene, &p, terms, None).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_gamma_reduces_to_cross_entropy() {
        let (labels, g) = world();
        let p = RelNetParams::init(embed(), 4, 2, None, 3).unwrap();
        let scene = Scene {
            id: "s".into(),
            regions: vec![region(0., 0., 1., 1., 0), region(2., 1., 2., 1., 2)],
        };
        let unary = vec![vec![-0.2, -1.5, -2.5, -3.0], vec![-1.0, -2.0, -0.7, -4.0]];
        let terms = LossTerms { graph: &g, labels: &labels, gamma: 0.0 };
        let l = pseudo_likelihood_loss(&scene, &p, terms, Some(&unary)).unwrap();
        let ce = |row: &[f64], y: usize| log_sum_exp(&row[..3]) - row[y];
        assert!((l - (ce(&unary[0], 0) + ce(&unary[1], 2))).abs() < 1e-12);
        let (_, grad) = loss_gradients(&scene, &p, terms, Some(&unary)).unwrap();
        assert!(grad.flat().all(|v| v == 0.0));
    }

    #[test]
    fn two_regions_match_enumeration() {
        let (labels, g) = world();
        let mut p = RelNetParams::zeros(embed(), 1, 2, None).unwrap();
        // Constant outputs: l(on) = 0.7, l(near) = -0.4 for every pair.
        p.b2[0] = 0.7;
        p.b2[1] = -0.4;
        let scene = Scene {
            id: "s".into(),
            regions: vec![region(0., 0., 1., 1., 0), region(3., 0., 1., 2., 1)],
        };
        let gamma = 0.8;
        let terms = LossTerms { graph: &g, labels: &labels, gamma };
        let l = pseudo_likelihood_loss(&scene, &p, terms, None).unwrap();

        // Brute force: phi(a,b) sums l over the admitted predicates.
        let ell = [0.7, -0.4];
        let phi = |a: usize, b: usize| -> f64 {
            (0..2).filter(|&r| g.has_relation(a, r, b).unwrap()).map(|r| ell[r]).sum()
        };
        let y = [0usize, 1];
        let mut want = 0.0;
        for i in 0..2 {
            let j = 1 - i;
            let score = |c: usize| gamma * (phi(c, y[j]) + phi(y[j], c));
            let z: f64 = (0..3).map(|c| score(c).exp()).sum();
            want -= (score(y[i]).exp() / z).ln();
        }
        assert!((l - want).abs() < 1e-12, "{l} vs {want}");
    }

    #[test]
    fn unseen_label_is_rejected() {
        let (labels, g) = world();
        let p = RelNetParams::init(embed(), 4, 2, None, 3).unwrap();
        let scene = Scene {
            id: "s".into(),
            regions: vec![region(0., 0., 1., 1., 0), region(1., 1., 1., 1., 3)],
        };
        let terms = LossTerms { graph: &g, labels: &labels, gamma: 1.0 };
        let err = pseudo_likelihood_loss(&scene, &p, terms, None).unwrap_err();
        assert!(matches!(err, Error::UnseenLabel { region: 1, class: 3 }));
    }

    #[test]
    fn duplicated_batch_doubles_gradient() {
        let (labels, g) = world();
        let p = RelNetParams::init(embed(), 6, 2, None, 11).unwrap();
        let scene = Scene {
            id: "s".into(),
            regions: vec![
                region(0., 0., 1., 1., 0),
                region(2., 0.5, 1.5, 1., 1),
                region(-1., 3., 0.5, 2., 2),
            ],
        };
        let terms = LossTerms { graph: &g, labels: &labels, gamma: 1.0 };
        let (l1, g1) = loss_gradients(&scene, &p, terms, None).unwrap();
        let (l2, g2) =
            batch_loss_gradients(&[&scene, &scene], None, &p, terms, Exec::Sequential).unwrap();
        assert!((l2 - 2.0 * l1).abs() < 1e-12);
        for (a, b) in g1.flat().zip(g2.flat()) {
            assert!((2.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }
}
