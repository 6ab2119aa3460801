//! Two-layer graph convolutional regressor from word embeddings to classifier
//! rows.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kgraph::LabelSpace;

use super::ClassifierMatrix;

/// Undirected concept graph over classes and auxiliary ancestor nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct WordGraph {
    pub names: Vec<String>,
    /// One row per node.
    pub embeddings: Array2<f64>,
    /// Node-index pairs; direction is ignored.
    pub edges: Vec<(usize, usize)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeFile {
    name: String,
    embedding: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WordGraphFile {
    nodes: Vec<NodeFile>,
    edges: Vec<[String; 2]>,
}

impl WordGraph {
    pub fn new(names: Vec<String>, embeddings: Array2<f64>, edges: Vec<(usize, usize)>) -> Result<Self> {
        if names.len() != embeddings.nrows() {
            return Err(Error::Shape(format!(
                "{} node names for {} embedding rows",
                names.len(),
                embeddings.nrows()
            )));
        }
        let mut seen = BTreeSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::Invalid(format!("duplicate word-graph node `{n}`")));
            }
        }
        for &(a, b) in &edges {
            for v in [a, b] {
                if v >= names.len() {
                    return Err(Error::range("word-graph node", v, names.len()));
                }
            }
        }
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("word-graph embedding".into()));
        }
        Ok(Self {
            names,
            embeddings,
            edges,
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: WordGraphFile = serde_json::from_str(text)?;
        let d = file.nodes.first().map_or(0, |n| n.embedding.len());
        let mut names = Vec::with_capacity(file.nodes.len());
        let mut data = Vec::with_capacity(file.nodes.len() * d);
        for n in file.nodes {
            if n.embedding.len() != d {
                return Err(Error::format(
                    "word graph",
                    format!("node `{}` has {} dims, expected {d}", n.name, n.embedding.len()),
                ));
            }
            names.push(n.name);
            data.extend(n.embedding);
        }
        let index: BTreeMap<&str, usize> =
            names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        let mut edges = Vec::with_capacity(file.edges.len());
        for [a, b] in &file.edges {
            let ia = *index
                .get(a.as_str())
                .ok_or_else(|| Error::format("word graph", format!("edge endpoint `{a}` is not a node")))?;
            let ib = *index
                .get(b.as_str())
                .ok_or_else(|| Error::format("word graph", format!("edge endpoint `{b}` is not a node")))?;
            edges.push((ia, ib));
        }
        let emb = Array2::from_shape_vec((names.len(), d), data)
            .map_err(|e| Error::format("word graph", e.to_string()))?;
        Self::new(names, emb, edges)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = WordGraphFile {
            nodes: self
                .names
                .iter()
                .zip(self.embeddings.rows())
                .map(|(n, e)| NodeFile {
                    name: n.clone(),
                    embedding: e.to_vec(),
                })
                .collect(),
            edges: self
                .edges
                .iter()
                .map(|&(a, b)| [self.names[a].clone(), self.names[b].clone()])
                .collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GcnConfig {
    pub hidden_dim: usize,
    pub dropout_rate: f64,
    pub leaky_slope: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for GcnConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            dropout_rate: 0.5,
            leaky_slope: 0.2,
            learning_rate: 0.01,
            weight_decay: 5e-4,
            iterations: 300,
            seed: 0,
        }
    }
}

impl GcnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 {
            return Err(Error::Config("GCN hidden_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("GCN dropout_rate must lie in [0, 1)".into()));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 || !self.leaky_slope.is_finite() {
            return Err(Error::Config("invalid GCN optimizer settings".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcnOutput {
    pub weights: ClassifierMatrix,
    /// Seen-row MSE without dropout, before training and after every step.
    pub mse: Vec<f64>,
}

type SparseRows = Vec<Vec<(usize, f64)>>;

/// `D^-1/2 (A + I) D^-1/2` as sorted sparse rows.
fn normalized_adjacency(n: usize, edges: &[(usize, usize)]) -> SparseRows {
    let mut nbrs: Vec<BTreeSet<usize>> = (0..n).map(|i| BTreeSet::from([i])).collect();
    for &(a, b) in edges {
        nbrs[a].insert(b);
        nbrs[b].insert(a);
    }
    let deg: Vec<f64> = nbrs.iter().map(|s| s.len() as f64).collect();
    nbrs.iter()
        .enumerate()
        .map(|(i, s)| s.iter().map(|&j| (j, 1.0 / (deg[i] * deg[j]).sqrt())).collect())
        .collect()
}

fn propagate(adj: &SparseRows, m: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(m.raw_dim());
    for (i, row) in adj.iter().enumerate() {
        let mut o = out.row_mut(i);
        for &(j, w) in row {
            o.scaled_add(w, &m.row(j));
        }
    }
    out
}

struct Adam {
    m: Array2<f64>,
    v: Array2<f64>,
}

impl Adam {
    fn new(shape: (usize, usize)) -> Self {
        Self {
            m: Array2::zeros(shape),
            v: Array2::zeros(shape),
        }
    }

    fn step(&mut self, p: &mut Array2<f64>, g: &Array2<f64>, lr: f64, t: i32) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        let c1 = 1.0 - B1.powi(t);
        let c2 = 1.0 - B2.powi(t);
        for ((pi, gi), (mi, vi)) in p
            .iter_mut()
            .zip(g)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *mi = B1 * *mi + (1.0 - B1) * gi;
            *vi = B2 * *vi + (1.0 - B2) * gi * gi;
            *pi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + EPS);
        }
    }
}

struct Net<'a> {
    adj: &'a SparseRows,
    ax: &'a Array2<f64>,
    slope: f64,
}

struct Pass {
    z1: Array2<f64>,
    ah: Array2<f64>,
    norms: Vec<f64>,
    out: Array2<f64>,
}

impl Net<'_> {
    fn forward(&self, w1: &Array2<f64>, w2: &Array2<f64>, mask: Option<&Array2<f64>>) -> Result<Pass> {
        let z1 = self.ax.dot(w1);
        let mut h = z1.mapv(|z| if z > 0.0 { z } else { self.slope * z });
        if let Some(m) = mask {
            h *= m;
        }
        let ah = propagate(self.adj, &h);
        let mut out = ah.dot(w2);
        let mut norms = Vec::with_capacity(out.nrows());
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let n = row.dot(&row).sqrt();
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::NonFinite(format!("GCN output row {i} has norm {n}")));
            }
            row.mapv_inplace(|v| v / n);
            norms.push(n);
        }
        Ok(Pass { z1, ah, norms, out })
    }
}

fn seen_mse(out: &Array2<f64>, targets: &[(usize, usize)], t: &Array2<f64>) -> f64 {
    let mut s = 0.0;
    for &(node, r) in targets {
        let d = &out.row(node) - &t.row(r);
        s += d.dot(&d);
    }
    s / targets.len() as f64
}

/// Trains the GCN to regress the L2-normalized seen rows of `w_seen`
/// (in `labels.seen()` order) and returns predicted rows for every class.
///
/// Nodes are processed in name order, so the result does not depend on the
/// order of nodes or edges in `wg`.
pub fn gcn_synthesize(
    wg: &WordGraph,
    labels: &LabelSpace,
    w_seen: &Array2<f64>,
    cfg: &GcnConfig,
) -> Result<GcnOutput> {
    cfg.validate()?;
    if w_seen.nrows() != labels.seen().len() {
        return Err(Error::Shape(format!(
            "{} seen rows for {} seen classes",
            w_seen.nrows(),
            labels.seen().len()
        )));
    }
    if labels.seen().is_empty() {
        return Err(Error::Invalid("GCN needs at least one seen class".into()));
    }
    let n = wg.len();
    let mut canon: Vec<usize> = (0..n).collect();
    canon.sort_by(|&a, &b| wg.names[a].cmp(&wg.names[b]));
    let mut pos = vec![0; n];
    for (k, &orig) in canon.iter().enumerate() {
        pos[orig] = k;
    }
    let by_name: BTreeMap<&str, usize> =
        (0..n).map(|k| (wg.names[canon[k]].as_str(), k)).collect();
    let class_node: Vec<usize> = labels
        .names()
        .iter()
        .map(|c| {
            by_name
                .get(c.as_str())
                .copied()
                .ok_or_else(|| Error::Invalid(format!("class `{c}` has no word-graph node")))
        })
        .collect::<Result<_>>()?;

    let x = wg.embeddings.select(Axis(0), &canon);
    let edges: Vec<(usize, usize)> = wg.edges.iter().map(|&(a, b)| (pos[a], pos[b])).collect();
    let adj = normalized_adjacency(n, &edges);
    let ax = propagate(&adj, &x);

    let mut targets_m = w_seen.clone();
    super::l2_normalize_rows(&mut targets_m)?;
    let targets: Vec<(usize, usize)> = labels
        .seen()
        .iter()
        .enumerate()
        .map(|(r, &c)| (class_node[c], r))
        .collect();

    let (dw, h, df) = (x.ncols(), cfg.hidden_dim, w_seen.ncols());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut glorot = |rows: usize, cols: usize| {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-a..a))
    };
    let mut w1 = glorot(dw, h);
    let mut w2 = glorot(h, df);
    let (mut opt1, mut opt2) = (Adam::new((dw, h)), Adam::new((h, df)));
    let net = Net {
        adj: &adj,
        ax: &ax,
        slope: cfg.leaky_slope,
    };
    let keep = 1.0 - cfg.dropout_rate;
    let mut mse = vec![seen_mse(&net.forward(&w1, &w2, None)?.out, &targets, &targets_m)];

    for step in 0..cfg.iterations {
        let mask = Array2::from_shape_simple_fn((n, h), || {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let p = net.forward(&w1, &w2, Some(&mask))?;
        let mut dout = Array2::<f64>::zeros((n, df));
        let scale = 2.0 / targets.len() as f64;
        for &(node, r) in &targets {
            let y = p.out.row(node);
            let dy = (&y - &targets_m.row(r)) * scale;
            let proj = y.dot(&dy);
            let dz = (&dy - &(&y * proj)) / p.norms[node];
            dout.row_mut(node).assign(&dz);
        }
        let mut g2 = p.ah.t().dot(&dout);
        let dah = dout.dot(&w2.t());
        let dh = propagate(&adj, &dah) * &mask;
        let dz1 = ndarray::Zip::from(&dh)
            .and(&p.z1)
            .map_collect(|&d, &z| if z > 0.0 { d } else { cfg.leaky_slope * d });
        let mut g1 = ax.t().dot(&dz1);
        g1.scaled_add(cfg.weight_decay, &w1);
        g2.scaled_add(cfg.weight_decay, &w2);
        if g1.iter().chain(g2.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("GCN gradient at step {step}")));
        }
        let t = step as i32 + 1;
        opt1.step(&mut w1, &g1, cfg.learning_rate, t);
        opt2.step(&mut w2, &g2, cfg.learning_rate, t);
        let eval = net.forward(&w1, &w2, None)?;
        mse.push(seen_mse(&eval.out, &targets, &targets_m));
    }

    let out = net.forward(&w1, &w2, None)?.out;
    let weights = ClassifierMatrix::new(out.select(Axis(0), &class_node))?;
    Ok(GcnOutput { weights, mse })
}
