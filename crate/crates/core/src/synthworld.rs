//! Seeded synthetic worlds in which some unseen classes can only be told
//! apart from a confusable seen class through their relations.
//!
//! A world holds class prototypes in feature space, word embeddings that are
//! noisy copies of the prototypes, a relation graph with predicate-specific
//! box geometry, and a small word hierarchy. Scenes are grown along graph
//! edges so every object is related to at least one other object.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::detection::{Proposal, ProposalSet};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::kgraph::{build_graph, LabelSpace, RelationGraph, TripleCount};
use crate::par::{self, Exec};
use crate::scene::{Region, Scene};
use crate::zsl::{EmbeddingTable, WordGraph};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub n_classes: usize,
    pub n_seen: usize,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub n_predicates: usize,
    /// Probability of each random (subject, predicate, object) edge.
    pub edge_density: f64,
    /// 1 gives independent random prototype directions; smaller values pull
    /// every prototype towards a shared direction.
    pub prototype_separation: f64,
    /// Cosine between the prototypes of each confusable pair.
    pub confusable_cosine: f64,
    pub ambiguity_rate: f64,
    /// (unseen class, seen class) index pairs.
    pub confusable_pairs: Vec<(usize, usize)>,
    /// Per-component Gaussian noise on unit-norm prototypes.
    pub noise_sigma: f64,
    /// Features are `feature_scale * (prototype + noise)`.
    pub feature_scale: f64,
    /// Norm of the perturbation added to prototypes to form embeddings.
    pub embed_noise: f64,
    pub n_ancestors: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        let (n_classes, n_seen) = (40, 30);
        Self {
            n_classes,
            n_seen,
            feature_dim: 64,
            embed_dim: 64,
            n_predicates: 6,
            edge_density: 0.015,
            prototype_separation: 1.0,
            confusable_cosine: 0.9,
            ambiguity_rate: 0.8,
            confusable_pairs: (n_seen..n_classes).map(|u| (u, u - n_seen)).collect(),
            noise_sigma: 0.1,
            feature_scale: 10.0,
            embed_noise: 0.5,
            n_ancestors: 8,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_seen == 0 || self.n_seen >= self.n_classes {
            return bad("need 0 < n_seen < n_classes");
        }
        if self.feature_dim < 2 || self.embed_dim < 2 || self.n_predicates == 0 {
            return bad("feature_dim and embed_dim must be at least 2; n_predicates at least 1");
        }
        if !(0.0..=1.0).contains(&self.edge_density) || !(0.0..=1.0).contains(&self.ambiguity_rate) {
            return bad("edge_density and ambiguity_rate must lie in [0, 1]");
        }
        if !(self.prototype_separation > 0.0 && self.prototype_separation <= 1.0) {
            return bad("prototype_separation must lie in (0, 1]");
        }
        if !(self.confusable_cosine > -1.0 && self.confusable_cosine < 1.0) {
            return bad("confusable_cosine must lie in (-1, 1)");
        }
        if !(self.noise_sigma >= 0.0) || !(self.feature_scale > 0.0) || !(self.embed_noise >= 0.0) {
            return bad("noise_sigma and embed_noise must be non-negative, feature_scale positive");
        }
        let mut used = BTreeSet::new();
        for &(u, s) in &self.confusable_pairs {
            if u < self.n_seen || u >= self.n_classes || s >= self.n_seen {
                return bad("confusable pairs must be (unseen, seen) class indices");
            }
            if !used.insert(u) {
                return bad("an unseen class may appear in at most one confusable pair");
            }
        }
        Ok(())
    }

    fn confusable_of(&self, u: usize) -> Option<usize> {
        self.confusable_pairs.iter().find(|p| p.0 == u).map(|p| p.1)
    }
}

/// Box geometry of a subject relative to its object for one predicate.
/// Offsets are in units of the object's size, scales are log size ratios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredicateGeometry {
    pub dx: f64,
    pub dy: f64,
    pub log_w: f64,
    pub log_h: f64,
}

const NAMED_PREDICATES: [(&str, PredicateGeometry); 6] = [
    ("on", PredicateGeometry { dx: 0.2, dy: -0.7, log_w: -0.5, log_h: -0.6 }),
    ("holding", PredicateGeometry { dx: 0.5, dy: 0.4, log_w: -1.2, log_h: -1.2 }),
    ("next_to", PredicateGeometry { dx: 1.3, dy: 0.05, log_w: 0.0, log_h: 0.0 }),
    ("under", PredicateGeometry { dx: 0.05, dy: 1.1, log_w: 0.6, log_h: 0.3 }),
    ("wearing", PredicateGeometry { dx: -0.3, dy: -0.2, log_w: 1.1, log_h: 1.4 }),
    ("behind", PredicateGeometry { dx: -0.8, dy: -0.4, log_w: 0.4, log_h: 0.5 }),
];

const GEOM_JITTER: f64 = 0.08;

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub labels: LabelSpace,
    pub embeddings: EmbeddingTable,
    pub graph: RelationGraph,
    pub triples: Vec<TripleCount>,
    /// Unit-norm prototype per class.
    pub prototypes: Array2<f64>,
    /// Ideal seen classifier: prototype rows of the seen classes.
    pub w_seen: Array2<f64>,
    /// Geometry per relation in `graph.relations()` order.
    pub geometry: Vec<PredicateGeometry>,
    pub word_graph: WordGraph,
}

/// Deterministic generator for the named sub-stream `name` of `seed`.
pub fn substream(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ h);
    rng.set_stream(index);
    rng
}

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
    Array1::from_shape_simple_fn(d, || rng.sample::<f64, _>(StandardNormal))
}

fn normalized(v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    v / n
}

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Array1<f64> {
    normalized(gaussian_vec(rng, d))
}

fn class_names(n: usize) -> Vec<String> {
    (0..n).map(|c| format!("class_{c:02}")).collect()
}

fn predicate_names(n: usize) -> Vec<String> {
    (0..n)
        .map(|k| match NAMED_PREDICATES.get(k) {
            Some((name, _)) => name.to_string(),
            None => format!("rel_{k:02}"),
        })
        .collect()
}

pub fn gen_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let (n, d) = (cfg.n_classes, cfg.feature_dim);
    let names = class_names(n);
    let labels = LabelSpace::new(names.clone(), (0..n).map(|c| c < cfg.n_seen).collect())?;

    let mut rng = substream(cfg.seed, "prototypes", 0);
    let shared = random_unit(&mut rng, d);
    let mut protos = Array2::zeros((n, d));
    for c in 0..n {
        let r = random_unit(&mut rng, d);
        let v = &r * cfg.prototype_separation + &shared * (1.0 - cfg.prototype_separation);
        protos.row_mut(c).assign(&normalized(v));
    }
    for &(u, s) in &cfg.confusable_pairs {
        let ps = protos.row(s).to_owned();
        let r = random_unit(&mut rng, d);
        let orth = normalized(&r - &ps * r.dot(&ps));
        let cos = cfg.confusable_cosine;
        let pu = &ps * cos + &orth * (1.0 - cos * cos).sqrt();
        protos.row_mut(u).assign(&normalized(pu));
    }

    let mut rng = substream(cfg.seed, "embeddings", 0);
    let projection = if cfg.embed_dim == d {
        None
    } else {
        let scale = 1.0 / (cfg.embed_dim as f64).sqrt();
        Some(Array2::from_shape_simple_fn((cfg.embed_dim, d), || {
            rng.sample::<f64, _>(StandardNormal) * scale
        }))
    };
    let mut emb = Array2::zeros((n, cfg.embed_dim));
    for c in 0..n {
        let base = match &projection {
            None => protos.row(c).to_owned(),
            Some(p) => normalized(p.dot(&protos.row(c))),
        };
        let noise = random_unit(&mut rng, cfg.embed_dim) * cfg.embed_noise;
        emb.row_mut(c).assign(&normalized(base + noise));
    }
    let embeddings = EmbeddingTable::new(emb)?;

    let rel_names = predicate_names(cfg.n_predicates);
    let edges = sample_edges(cfg)?;
    let mut rng = substream(cfg.seed, "triples", 0);
    let mut triples = Vec::new();
    let mut is_edge = BTreeSet::new();
    for &(s, p, o) in &edges {
        is_edge.insert((s, p, o));
        triples.push(TripleCount::new(&names[s], &rel_names[p], &names[o], rng.random_range(21..=200)));
    }
    // sub-threshold noise that graph construction has to discard
    for _ in 0..edges.len() {
        let (s, p, o) = (rng.random_range(0..n), rng.random_range(0..cfg.n_predicates), rng.random_range(0..n));
        if s != o && !is_edge.contains(&(s, p, o)) {
            triples.push(TripleCount::new(&names[s], &rel_names[p], &names[o], rng.random_range(1..=20)));
        }
    }
    let graph = build_graph(&triples, &labels, 20, cfg.n_predicates)?;
    let geometry = graph
        .relations()
        .names()
        .iter()
        .map(|name| predicate_geometry(cfg.seed, &rel_names, name))
        .collect();

    let w_seen = protos.select(ndarray::Axis(0), labels.seen());
    let word_graph = build_word_graph(cfg, &labels, &embeddings)?;
    Ok(World {
        config: cfg.clone(),
        labels,
        embeddings,
        graph,
        triples,
        prototypes: protos,
        w_seen,
        geometry,
        word_graph,
    })
}

fn predicate_geometry(seed: u64, rel_names: &[String], name: &str) -> PredicateGeometry {
    if let Some((_, g)) = NAMED_PREDICATES.iter().find(|(n, _)| *n == name) {
        return *g;
    }
    let k = rel_names.iter().position(|n| n == name).unwrap_or(0) as u64;
    let mut rng = substream(seed, "predicate-geometry", k);
    PredicateGeometry {
        dx: rng.random_range(-1.5..1.5),
        dy: rng.random_range(-1.5..1.5),
        log_w: rng.random_range(-1.2..1.2),
        log_h: rng.random_range(-1.2..1.2),
    }
}

/// Random edges plus guaranteed edges for every class; unseen classes of a
/// confusable pair never share a neighbor with their seen partner.
fn sample_edges(cfg: &WorldConfig) -> Result<Vec<(usize, usize, usize)>> {
    let (n, np) = (cfg.n_classes, cfg.n_predicates);
    let mut rng = substream(cfg.seed, "edges", 0);
    let mut edges = BTreeSet::new();
    for s in 0..n {
        for p in 0..np {
            for o in 0..n {
                if s != o && rng.random::<f64>() < cfg.edge_density {
                    edges.insert((s, p, o));
                }
            }
        }
    }
    if cfg.edge_density == 0.0 {
        return Ok(Vec::new());
    }
    let neighbors = |edges: &BTreeSet<(usize, usize, usize)>, c: usize| -> BTreeSet<usize> {
        edges
            .iter()
            .filter_map(|&(s, _, o)| {
                if s == c {
                    Some(o)
                } else if o == c {
                    Some(s)
                } else {
                    None
                }
            })
            .collect()
    };
    // every seen class takes part in at least two seen-only edges
    for c in 0..cfg.n_seen {
        while edges
            .iter()
            .filter(|&&(s, _, o)| (s == c || o == c) && s < cfg.n_seen && o < cfg.n_seen)
            .count()
            < 2
        {
            let other = rng.random_range(0..cfg.n_seen);
            if other == c {
                continue;
            }
            let p = rng.random_range(0..np);
            if rng.random::<bool>() {
                edges.insert((c, p, other));
            } else {
                edges.insert((other, p, c));
            }
        }
    }
    for u in cfg.n_seen..n {
        let partner = cfg.confusable_of(u);
        if let Some(s) = partner {
            let taken = neighbors(&edges, s);
            edges.retain(|&(a, _, b)| !((a == u && (taken.contains(&b) || b == s)) || (b == u && (taken.contains(&a) || a == s))));
        }
        let forbidden: BTreeSet<usize> = partner.map(|s| neighbors(&edges, s)).unwrap_or_default();
        let mut attempts = 0;
        while neighbors(&edges, u).len() < 2 {
            attempts += 1;
            if attempts > 10_000 {
                return Err(Error::Config(format!(
                    "cannot give unseen class {u} a neighborhood distinct from its confusable partner"
                )));
            }
            let x = rng.random_range(0..cfg.n_seen);
            if Some(x) == partner || forbidden.contains(&x) {
                continue;
            }
            let p = rng.random_range(0..np);
            if rng.random::<bool>() {
                edges.insert((u, p, x));
            } else {
                edges.insert((x, p, u));
            }
        }
    }
    Ok(edges.into_iter().collect())
}

fn build_word_graph(cfg: &WorldConfig, labels: &LabelSpace, emb: &EmbeddingTable) -> Result<WordGraph> {
    let n = cfg.n_classes;
    let groups = cfg.n_ancestors.max(1);
    let mut group_of: Vec<usize> = (0..n).map(|c| c % groups).collect();
    for &(u, s) in &cfg.confusable_pairs {
        group_of[u] = group_of[s];
    }
    let mut names = labels.names().to_vec();
    let mut rows = emb.vectors.clone();
    let mut edges = Vec::new();
    for g in 0..groups {
        let members: Vec<usize> = (0..n).filter(|&c| group_of[c] == g).collect();
        let mut mean = Array1::<f64>::zeros(emb.dim());
        for &c in &members {
            mean += &emb.row(c);
        }
        let norm = mean.dot(&mean).sqrt();
        let row = if norm > 0.0 { mean / norm } else { Array1::zeros(emb.dim()) };
        rows.push_row(row.view()).map_err(|e| Error::Shape(e.to_string()))?;
        let node = names.len();
        names.push(format!("ancestor_{g:02}"));
        edges.extend(members.iter().map(|&c| (c, node)));
    }
    WordGraph::new(names, rows, edges)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub n_scenes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// When false only seen-seen edges are used.
    pub include_unseen: bool,
    pub seed: u64,
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_objects < 2 || self.max_objects < self.min_objects {
            return Err(Error::Config("object range must satisfy 2 <= min <= max".into()));
        }
        Ok(())
    }
}

/// A generated scene with the relations used to place its boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub scene: Scene,
    /// (subject region, predicate, object region)
    pub relations: Vec<(usize, usize, usize)>,
    pub ambiguous: Vec<bool>,
}

fn place_subject(rng: &mut ChaCha8Rng, obj: &BBox, g: &PredicateGeometry) -> BBox {
    let mut j = || GEOM_JITTER * rng.sample::<f64, _>(StandardNormal);
    let w = obj.w * (g.log_w + j()).exp();
    let h = obj.h * (g.log_h + j()).exp();
    BBox {
        x: obj.x + (g.dx + j()) * obj.w,
        y: obj.y + (g.dy + j()) * obj.h,
        w,
        h,
    }
}

fn place_object(rng: &mut ChaCha8Rng, subj: &BBox, g: &PredicateGeometry) -> BBox {
    let mut j = || GEOM_JITTER * rng.sample::<f64, _>(StandardNormal);
    let w = subj.w / (g.log_w + j()).exp();
    let h = subj.h / (g.log_h + j()).exp();
    BBox {
        x: subj.x - (g.dx + j()) * w,
        y: subj.y - (g.dy + j()) * h,
        w,
        h,
    }
}

impl World {
    /// Region feature for class `c`; `ambiguous` uses the midpoint with the
    /// confusable partner.
    fn feature(&self, rng: &mut ChaCha8Rng, c: usize, ambiguous: bool) -> Vec<f64> {
        let center = match (ambiguous, self.config.confusable_of(c)) {
            (true, Some(s)) => (&self.prototypes.row(c) + &self.prototypes.row(s)) * 0.5,
            _ => self.prototypes.row(c).to_owned(),
        };
        let noise = gaussian_vec(rng, self.config.feature_dim) * self.config.noise_sigma;
        ((center + noise) * self.config.feature_scale).to_vec()
    }

    fn allowed_edges(&self, include_unseen: bool) -> Vec<(usize, usize, usize)> {
        self.graph
            .edges()
            .filter(|&(s, _, o)| include_unseen || (self.labels.is_seen(s) && self.labels.is_seen(o)))
            .collect()
    }

    fn one_scene(&self, edges: &[(usize, usize, usize)], cfg: &SceneConfig, index: usize) -> SynthScene {
        let mut rng = substream(cfg.seed, "scene", index as u64);
        let target = rng.random_range(cfg.min_objects..=cfg.max_objects);
        let mut classes = Vec::new();
        let mut boxes: Vec<BBox> = Vec::new();
        let mut relations = Vec::new();

        let &(s, p, o) = edges.choose(&mut rng).expect("non-empty edge list");
        let obj = BBox {
            x: rng.random_range(100.0..500.0),
            y: rng.random_range(100.0..500.0),
            w: rng.random_range(40.0..120.0),
            h: rng.random_range(40.0..120.0),
        };
        let subj = place_subject(&mut rng, &obj, &self.geometry[p]);
        classes.extend([s, o]);
        boxes.extend([subj, obj]);
        relations.push((0, p, 1));

        while classes.len() < target {
            let anchor = rng.random_range(0..classes.len());
            let c = classes[anchor];
            let touching: Vec<&(usize, usize, usize)> =
                edges.iter().filter(|e| e.0 == c || e.2 == c).collect();
            let Some(&&(es, ep, eo)) = touching.choose(&mut rng) else {
                break;
            };
            let new = classes.len();
            let g = &self.geometry[ep];
            if es == c {
                boxes.push(place_object(&mut rng, &boxes[anchor], g));
                classes.push(eo);
                relations.push((anchor, ep, new));
            } else {
                boxes.push(place_subject(&mut rng, &boxes[anchor], g));
                classes.push(es);
                relations.push((new, ep, anchor));
            }
        }

        let mut ambiguous = Vec::with_capacity(classes.len());
        let regions = classes
            .iter()
            .zip(&boxes)
            .map(|(&c, b)| {
                let amb = !self.labels.is_seen(c)
                    && self.config.confusable_of(c).is_some()
                    && rng.random::<f64>() < self.config.ambiguity_rate;
                ambiguous.push(amb);
                Region {
                    bbox: *b,
                    feature: self.feature(&mut rng, c, amb),
                    label: Some(c),
                }
            })
            .collect();
        SynthScene {
            scene: Scene {
                id: format!("scene_{index:05}"),
                regions,
            },
            relations,
            ambiguous,
        }
    }

    /// Generates labeled scenes; scene `i` uses its own derived random stream.
    pub fn gen_scenes(&self, cfg: &SceneConfig, exec: Exec) -> Result<Vec<SynthScene>> {
        cfg.validate()?;
        let edges = self.allowed_edges(cfg.include_unseen);
        if edges.is_empty() {
            return Err(Error::Config("relation graph has no usable edges for scene generation".into()));
        }
        Ok(par::map_range(exec, cfg.n_scenes, |i| self.one_scene(&edges, cfg, i)))
    }

    /// Proposals around the objects of `scenes`: jittered copies of every
    /// ground-truth box plus background clutter, some of it below the
    /// objectness threshold.
    pub fn gen_proposals(&self, scenes: &[Scene], seed: u64, exec: Exec) -> Vec<ProposalSet> {
        par::map_range(exec, scenes.len(), |i| {
            let mut rng = substream(seed, "proposals", i as u64);
            let scene = &scenes[i];
            let mut proposals = Vec::new();
            for r in &scene.regions {
                for _ in 0..2 {
                    let b = &r.bbox;
                    let mut j = || 0.05 * rng.sample::<f64, _>(StandardNormal);
                    let bbox = BBox {
                        x: b.x + j() * b.w,
                        y: b.y + j() * b.h,
                        w: b.w * (1.0 + j()).max(0.5),
                        h: b.h * (1.0 + j()).max(0.5),
                    };
                    let noise = gaussian_vec(&mut rng, self.config.feature_dim)
                        * (0.5 * self.config.noise_sigma * self.config.feature_scale);
                    let feature = (Array1::from(r.feature.clone()) + noise).to_vec();
                    proposals.push(Proposal {
                        bbox,
                        score: rng.random_range(0.3..1.0),
                        feature,
                    });
                }
            }
            for _ in 0..2 * scene.regions.len() {
                let bbox = BBox {
                    x: rng.random_range(0.0..600.0),
                    y: rng.random_range(0.0..600.0),
                    w: rng.random_range(20.0..150.0),
                    h: rng.random_range(20.0..150.0),
                };
                let feature = (gaussian_vec(&mut rng, self.config.feature_dim)
                    * (self.config.noise_sigma * self.config.feature_scale))
                    .to_vec();
                proposals.push(Proposal {
                    bbox,
                    score: rng.random_range(0.0..0.5),
                    feature,
                });
            }
            ProposalSet {
                image_id: scene.id.clone(),
                proposals,
            }
        })
    }
}

pub fn into_scenes(batch: Vec<SynthScene>) -> Vec<Scene> {
    batch.into_iter().map(|s| s.scene).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldConfig {
        WorldConfig {
            n_classes: 12,
            n_seen: 8,
            feature_dim: 16,
            embed_dim: 16,
            n_predicates: 3,
            edge_density: 0.05,
            confusable_pairs: vec![(8, 0), (9, 1)],
            n_ancestors: 3,
            seed: 3,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn worlds_are_reproducible() {
        let a = gen_world(&small()).unwrap();
        let b = gen_world(&small()).unwrap();
        assert_eq!(a, b);
        let mut other = small();
        other.seed = 4;
        assert_ne!(gen_world(&other).unwrap().prototypes, a.prototypes);
    }

    #[test]
    fn prototypes_are_unit_and_confusable_pairs_aligned() {
        let w = gen_world(&small()).unwrap();
        for r in w.prototypes.rows() {
            assert!((r.dot(&r) - 1.0).abs() < 1e-12);
        }
        let c = w.prototypes.row(8).dot(&w.prototypes.row(0));
        assert!((c - 0.9).abs() < 1e-12);
    }

    #[test]
    fn zero_density_gives_empty_graph() {
        let cfg = WorldConfig { edge_density: 0.0, ..small() };
        assert_eq!(gen_world(&cfg).unwrap().graph.n_edges(), 0);
    }

    #[test]
    fn confusable_neighborhoods_differ() {
        let w = gen_world(&small()).unwrap();
        for &(u, s) in &w.config.confusable_pairs {
            let nb = |c: usize| -> BTreeSet<(usize, usize, bool)> {
                w.graph
                    .edges()
                    .filter_map(|(a, p, b)| {
                        if a == c {
                            Some((b, p, true))
                        } else if b == c {
                            Some((a, p, false))
                        } else {
                            None
                        }
                    })
                    .collect()
            };
            assert!(!nb(u).is_empty());
            assert!(nb(u).symmetric_difference(&nb(s)).next().is_some());
        }
    }

    #[test]
    fn sampled_relations_exist_in_graph() {
        let w = gen_world(&small()).unwrap();
        let cfg = SceneConfig { n_scenes: 50, min_objects: 2, max_objects: 5, include_unseen: true, seed: 1 };
        for s in w.gen_scenes(&cfg, Exec::Sequential).unwrap() {
            let labels = s.scene.labels().unwrap();
            assert!(labels.len() >= 2);
            for &(i, p, j) in &s.relations {
                assert!(w.graph.has_relation(labels[i], p, labels[j]).unwrap());
            }
        }
    }

    #[test]
    fn scene_generation_is_parallel_safe() {
        let w = gen_world(&small()).unwrap();
        let cfg = SceneConfig { n_scenes: 20, min_objects: 2, max_objects: 4, include_unseen: true, seed: 9 };
        assert_eq!(
            w.gen_scenes(&cfg, Exec::Sequential).unwrap(),
            w.gen_scenes(&cfg, Exec::Parallel).unwrap()
        );
    }
}
