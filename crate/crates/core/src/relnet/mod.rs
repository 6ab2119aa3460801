//! Relationship inference module.
//!
//! A two-layer rectifier MLP maps the embedded pairwise geometry of an ordered
//! box pair to one potential per predicate. The pairwise CRF potential between
//! two labels is the sum of those potentials over the predicates the knowledge
//! graph admits for the label pair.
//!
//! In appearance-augmented mode a learned projection of both region features
//! is concatenated to the geometry embedding.

mod loss;
mod train;

pub use loss::{batch_loss_gradients, loss_gradients, pseudo_likelihood_loss, LossTerms};
pub use train::{train_relnet, TrainConfig, TrainLog};

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crf::PairwiseProvider;
use crate::error::{Error, Result};
use crate::geometry::{embed_into, geometry_feature, BBox, GeomEmbedConfig};
use crate::kgraph::RelationGraph;
use crate::par::{self, Exec};
use crate::scene::Scene;

/// Weights of the relation MLP. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct RelNetParams {
    pub embed: GeomEmbedConfig,
    /// hidden x input
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// relations x hidden
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    /// Optional appearance projection, proj_dim x feature_dim.
    pub appearance: Option<Array2<f64>>,
}

impl RelNetParams {
    pub fn zeros(
        embed: GeomEmbedConfig,
        hidden: usize,
        n_relations: usize,
        appearance: Option<(usize, usize)>,
    ) -> Result<Self> {
        embed.validate()?;
        if hidden == 0 {
            return Err(Error::Config("hidden width must be at least 1".into()));
        }
        let proj = appearance.map_or(0, |(p, _)| p);
        let input = embed.output_dim() + 2 * proj;
        Ok(Self {
            embed,
            w1: Array2::zeros((hidden, input)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((n_relations, hidden)),
            b2: Array1::zeros(n_relations),
            appearance: appearance.map(|(p, d)| Array2::zeros((p, d))),
        })
    }

    /// Uniform initialization in `±1/sqrt(fan_in)`, seeded.
    pub fn init(
        embed: GeomEmbedConfig,
        hidden: usize,
        n_relations: usize,
        appearance: Option<(usize, usize)>,
        seed: u64,
    ) -> Result<Self> {
        let mut p = Self::zeros(embed, hidden, n_relations, appearance)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |a: &mut [f64], fan_in: usize| {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            for v in a {
                *v = rng.random_range(-bound..bound);
            }
        };
        let input = p.input_dim();
        fill(p.w1.as_slice_mut().unwrap(), input);
        fill(p.b1.as_slice_mut().unwrap(), input);
        fill(p.w2.as_slice_mut().unwrap(), hidden);
        fill(p.b2.as_slice_mut().unwrap(), hidden);
        if let Some(a) = p.appearance.as_mut() {
            let d = a.ncols();
            fill(a.as_slice_mut().unwrap(), d);
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            embed: self.embed,
            w1: Array2::zeros(self.w1.raw_dim()),
            b1: Array1::zeros(self.b1.raw_dim()),
            w2: Array2::zeros(self.w2.raw_dim()),
            b2: Array1::zeros(self.b2.raw_dim()),
            appearance: self.appearance.as_ref().map(|a| Array2::zeros(a.raw_dim())),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn n_relations(&self) -> usize {
        self.w2.nrows()
    }

    pub fn appearance_dims(&self) -> Option<(usize, usize)> {
        self.appearance.as_ref().map(|a| (a.nrows(), a.ncols()))
    }

    pub fn validate(&self) -> Result<()> {
        self.embed.validate()?;
        let proj = self.appearance_dims().map_or(0, |(p, _)| p);
        let want_in = self.embed.output_dim() + 2 * proj;
        let h = self.hidden_dim();
        if self.input_dim() != want_in {
            return Err(Error::Shape(format!(
                "layer1 expects {} inputs, embedding provides {want_in}",
                self.input_dim()
            )));
        }
        if self.b1.len() != h || self.w2.ncols() != h || self.b2.len() != self.n_relations() {
            return Err(Error::Shape("relation net layer sizes disagree".into()));
        }
        if self.flat().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("relation net parameters".into()));
        }
        Ok(())
    }

    /// Parameter arrays in a fixed order: w1, b1, w2, b2, appearance.
    pub fn arrays(&self) -> Vec<&[f64]> {
        let mut v = vec![
            self.w1.as_slice().unwrap(),
            self.b1.as_slice().unwrap(),
            self.w2.as_slice().unwrap(),
            self.b2.as_slice().unwrap(),
        ];
        if let Some(a) = &self.appearance {
            v.push(a.as_slice().unwrap());
        }
        v
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = vec![
            self.w1.as_slice_mut().unwrap(),
            self.b1.as_slice_mut().unwrap(),
            self.w2.as_slice_mut().unwrap(),
            self.b2.as_slice_mut().unwrap(),
        ];
        if let Some(a) = &mut self.appearance {
            v.push(a.as_slice_mut().unwrap());
        }
        v
    }

    pub fn flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.arrays().into_iter().flat_map(|a| a.iter().copied())
    }

    pub fn n_params(&self) -> usize {
        self.arrays().iter().map(|a| a.len()).sum()
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Self) {
        for (dst, src) in self.arrays_mut().into_iter().zip(other.arrays()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for a in self.arrays_mut() {
            a.iter_mut().for_each(|v| *v *= alpha);
        }
    }

    fn input(&self, bi: &BBox, bj: &BBox, feats: Option<(&[f64], &[f64])>) -> Result<Vec<f64>> {
        let g = geometry_feature(bi, bj, self.embed.clamp_eps)?;
        let mut x = Vec::with_capacity(self.input_dim());
        embed_into(&g, &self.embed.wavelengths(), &mut x);
        match (&self.appearance, feats) {
            (None, _) => {}
            (Some(proj), Some((fi, fj))) => {
                if fi.len() != proj.ncols() || fj.len() != proj.ncols() {
                    return Err(Error::Shape(format!(
                        "appearance projection expects {}-dim features, got {} and {}",
                        proj.ncols(),
                        fi.len(),
                        fj.len()
                    )));
                }
                x.extend(proj.dot(&ArrayView1::from(fi)));
                x.extend(proj.dot(&ArrayView1::from(fj)));
            }
            (Some(_), None) => {
                return Err(Error::Invalid(
                    "appearance-augmented relation net needs region features".into(),
                ))
            }
        }
        Ok(x)
    }

    fn forward_cached(&self, x: Vec<f64>) -> Forward {
        let xv = Array1::from(x);
        let pre = self.w1.dot(&xv) + &self.b1;
        let hidden = pre.mapv(|v| v.max(0.0));
        let out = self.w2.dot(&hidden) + &self.b2;
        Forward { x: xv, pre, hidden, out }
    }

    /// Relation potential for every predicate, for the ordered pair `(bi, bj)`.
    pub fn relation_potentials(&self, bi: &BBox, bj: &BBox) -> Result<Vec<f64>> {
        let x = self.input(bi, bj, None)?;
        Ok(self.forward_cached(x).out.to_vec())
    }

    pub fn relation_potentials_with_appearance(
        &self,
        bi: &BBox,
        bj: &BBox,
        fi: &[f64],
        fj: &[f64],
    ) -> Result<Vec<f64>> {
        let x = self.input(bi, bj, Some((fi, fj)))?;
        Ok(self.forward_cached(x).out.to_vec())
    }

    /// Pairwise potential for labels `(ci, cj)` on the ordered box pair.
    pub fn pairwise_potential(
        &self,
        graph: &RelationGraph,
        ci: usize,
        cj: usize,
        bi: &BBox,
        bj: &BBox,
    ) -> Result<f64> {
        let admitted = graph.relations_between(ci, cj)?;
        if self.n_relations() != graph.n_relations() {
            return Err(Error::Shape(format!(
                "relation net has {} outputs, graph has {} predicates",
                self.n_relations(),
                graph.n_relations()
            )));
        }
        if admitted.is_empty() {
            return Ok(0.0);
        }
        let ell = self.relation_potentials(bi, bj)?;
        Ok(admitted.iter().map(|&k| ell[k]).sum())
    }

    fn pair_features<'s>(&self, scene: &'s Scene, i: usize, j: usize) -> Option<(&'s [f64], &'s [f64])> {
        self.appearance
            .as_ref()
            .map(|_| (scene.regions[i].feature.as_slice(), scene.regions[j].feature.as_slice()))
    }

    /// Relation potentials for every ordered pair of distinct regions.
    pub fn scene_potentials(&self, scene: &Scene, exec: Exec) -> Result<PairPotentials> {
        let n = scene.len();
        let k = self.n_relations();
        let rows = par::map_range(exec, n * n, |idx| -> Result<Vec<f64>> {
            let (i, j) = (idx / n, idx % n);
            if i == j {
                return Ok(vec![0.0; k]);
            }
            let x = self.input(
                &scene.regions[i].bbox,
                &scene.regions[j].bbox,
                self.pair_features(scene, i, j),
            )?;
            Ok(self.forward_cached(x).out.to_vec())
        });
        let mut data = Vec::with_capacity(n * n * k);
        for r in rows {
            data.extend(r?);
        }
        Ok(PairPotentials { n, k, data })
    }

    /// Accumulates the gradient of `upstream . out(i, j)` into `grad`.
    fn backward(&self, fwd: &Forward, upstream: &[f64], feats: Option<(&[f64], &[f64])>, grad: &mut Self) {
        let g = ArrayView1::from(upstream);
        for (r, &gr) in upstream.iter().enumerate() {
            if gr != 0.0 {
                grad.w2.row_mut(r).scaled_add(gr, &fwd.hidden);
            }
        }
        grad.b2 += &g;
        let mut dpre = self.w2.t().dot(&g);
        dpre.zip_mut_with(&fwd.pre, |d, &p| {
            if p <= 0.0 {
                *d = 0.0;
            }
        });
        for (r, &d) in dpre.iter().enumerate() {
            if d != 0.0 {
                grad.w1.row_mut(r).scaled_add(d, &fwd.x);
            }
        }
        grad.b1 += &dpre;
        if let (Some(gp), Some((fi, fj))) = (grad.appearance.as_mut(), feats) {
            let dx = self.w1.t().dot(&dpre);
            let base = self.embed.output_dim();
            let p = gp.nrows();
            let fi = ArrayView1::from(fi);
            let fj = ArrayView1::from(fj);
            for r in 0..p {
                gp.row_mut(r).scaled_add(dx[base + r], &fi);
                gp.row_mut(r).scaled_add(dx[base + p + r], &fj);
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let (proj, feat) = self.appearance_dims().unwrap_or((0, 0));
        let file = RelNetFile {
            format: FORMAT.into(),
            version: VERSION,
            embed: self.embed,
            header: RelNetHeader {
                input_dim: self.input_dim(),
                hidden_dim: self.hidden_dim(),
                n_relations: self.n_relations(),
                appearance_dim: proj,
                feature_dim: feat,
            },
            layer1_w: self.w1.as_slice().unwrap().to_vec(),
            layer1_b: self.b1.to_vec(),
            layer2_w: self.w2.as_slice().unwrap().to_vec(),
            layer2_b: self.b2.to_vec(),
            appearance_w: self.appearance.as_ref().map(|a| a.as_slice().unwrap().to_vec()),
        };
        Ok(serde_json::to_string(&file)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: RelNetFile = serde_json::from_str(text)?;
        if f.format != FORMAT || f.version != VERSION {
            return Err(Error::format(
                "relnet",
                format!("unsupported format {} v{}", f.format, f.version),
            ));
        }
        let h = f.header;
        let shape = |name: &str, data: Vec<f64>, r: usize, c: usize| {
            Array2::from_shape_vec((r, c), data)
                .map_err(|e| Error::format("relnet", format!("{name}: {e}")))
        };
        let vec = |name: &str, data: Vec<f64>, n: usize| {
            if data.len() == n {
                Ok(Array1::from(data))
            } else {
                Err(Error::format("relnet", format!("{name}: expected {n} values")))
            }
        };
        let appearance = match (f.appearance_w, h.appearance_dim) {
            (None, 0) => None,
            (Some(a), p) if p > 0 => Some(shape("appearance_w", a, p, h.feature_dim)?),
            _ => return Err(Error::format("relnet", "appearance header and weights disagree")),
        };
        let p = Self {
            embed: f.embed,
            w1: shape("layer1_w", f.layer1_w, h.hidden_dim, h.input_dim)?,
            b1: vec("layer1_b", f.layer1_b, h.hidden_dim)?,
            w2: shape("layer2_w", f.layer2_w, h.n_relations, h.hidden_dim)?,
            b2: vec("layer2_b", f.layer2_b, h.n_relations)?,
            appearance,
        };
        p.validate()?;
        Ok(p)
    }
}

const FORMAT: &str = "ctxzsl-relnet";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RelNetHeader {
    input_dim: usize,
    hidden_dim: usize,
    n_relations: usize,
    appearance_dim: usize,
    feature_dim: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RelNetFile {
    format: String,
    version: u32,
    embed: GeomEmbedConfig,
    header: RelNetHeader,
    layer1_w: Vec<f64>,
    layer1_b: Vec<f64>,
    layer2_w: Vec<f64>,
    layer2_b: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    appearance_w: Option<Vec<f64>>,
}

struct Forward {
    x: Array1<f64>,
    pre: Array1<f64>,
    hidden: Array1<f64>,
    out: Array1<f64>,
}

/// Relation potentials `l(r | B_i, B_j)` for all ordered region pairs of a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct PairPotentials {
    n: usize,
    k: usize,
    data: Vec<f64>,
}

impl PairPotentials {
    pub fn from_fn(n: usize, k: usize, mut f: impl FnMut(usize, usize) -> Vec<f64>) -> Self {
        let mut data = Vec::with_capacity(n * n * k);
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    data.extend(std::iter::repeat_n(0.0, k));
                } else {
                    let row = f(i, j);
                    assert_eq!(row.len(), k);
                    data.extend(row);
                }
            }
        }
        Self { n, k, data }
    }

    pub fn n_regions(&self) -> usize {
        self.n
    }

    pub fn n_relations(&self) -> usize {
        self.k
    }

    pub fn get(&self, i: usize, j: usize) -> &[f64] {
        let at = (i * self.n + j) * self.k;
        &self.data[at..at + self.k]
    }

    /// Graph-masked sum of the `(i, j)` relation potentials for labels `(ci, cj)`.
    pub fn phi(&self, graph: &RelationGraph, i: usize, j: usize, ci: usize, cj: usize) -> f64 {
        let ell = self.get(i, j);
        graph.between(ci, cj).iter().map(|&k| ell[k]).sum()
    }
}

/// Pairwise provider backed by precomputed scene potentials and the graph.
///
/// Class indices at or beyond `graph.n_classes()` (e.g. a background label)
/// have zero pairwise potential with everything.
pub struct ScenePairwise<'a> {
    pub potentials: &'a PairPotentials,
    pub graph: &'a RelationGraph,
}

impl PairwiseProvider for ScenePairwise<'_> {
    fn phi(&self, i: usize, j: usize, ci: usize, cj: usize) -> f64 {
        let n = self.graph.n_classes();
        if ci >= n || cj >= n {
            return 0.0;
        }
        self.potentials.phi(self.graph, i, j, ci, cj)
    }
}
