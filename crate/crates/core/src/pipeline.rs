//! End-to-end orchestration: classifier synthesis, scene inference with and
//! without context, detection, metric tables and the dataset directory
//! layout. Work is parallel over scenes and merged in input order.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::Serialize;

use crate::crf::{self, InferenceConfig, MeanFieldState};
use crate::detection::{
    detect_scene, recall_at_k, with_background, BgNorm, DetectConfig, DetectContext, Detection,
    GroundTruth, ProposalSet,
};
use crate::error::{Error, Result};
use crate::evaluation::{harmonic_mean, per_class_accuracy, per_instance_accuracy, topk_accuracy, EvalRecord};
use crate::kgraph::{LabelSpace, RelationGraph};
use crate::par::{self, Exec};
use crate::relnet::{RelNetParams, ScenePairwise};
use crate::scene::Scene;
use crate::zsl::{
    conse_scores, gcn_synthesize, log_softmax, sync_classifier, unary_log_probs, we_weights,
    ClassifierMatrix, EmbeddingTable, GcnConfig, Method, Setting, Similarity, WordGraph,
};

/// Produces per-region unary log-probabilities over a class subset.
#[derive(Debug, Clone, PartialEq)]
pub enum UnaryModel {
    Linear(ClassifierMatrix),
    /// Cosine of the convex seen-embedding combination to each class
    /// embedding, sharpened by `1 / temperature`.
    Conse {
        w_seen: Array2<f64>,
        embeddings: EmbeddingTable,
        temperature: f64,
        top_t: Option<usize>,
    },
}

impl UnaryModel {
    pub fn log_probs(&self, labels: &LabelSpace, f: &[f64], restrict: &[usize]) -> Result<Vec<f64>> {
        match self {
            UnaryModel::Linear(w) => unary_log_probs(w, f, restrict),
            UnaryModel::Conse {
                w_seen,
                embeddings,
                temperature,
                top_t,
            } => {
                if f.len() != w_seen.ncols() {
                    return Err(Error::Shape(format!(
                        "feature has {} dims, classifier expects {}",
                        f.len(),
                        w_seen.ncols()
                    )));
                }
                let logits = w_seen.dot(&ndarray::ArrayView1::from(f)).to_vec();
                let seen_probs: Vec<f64> = log_softmax(&logits).iter().map(|l| l.exp()).collect();
                let (cos, _) = conse_scores(&seen_probs, embeddings, labels, restrict, *top_t)?;
                let scaled: Vec<f64> = cos.iter().map(|c| c / temperature).collect();
                Ok(log_softmax(&scaled))
            }
        }
    }

    /// Builds the unary model for `method` from a synthesized classifier file.
    pub fn for_method(
        method: Method,
        classifier: ClassifierMatrix,
        labels: &LabelSpace,
        embeddings: &EmbeddingTable,
    ) -> Result<Self> {
        Ok(match method {
            Method::Conse => UnaryModel::Conse {
                w_seen: classifier.rows(labels.seen()),
                embeddings: embeddings.clone(),
                temperature: CONSE_TEMPERATURE,
                top_t: None,
            },
            _ => UnaryModel::Linear(classifier),
        })
    }
}

pub const CONSE_TEMPERATURE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisInputs<'a> {
    pub labels: &'a LabelSpace,
    pub embeddings: &'a EmbeddingTable,
    /// Seen classifier rows in `labels.seen()` order.
    pub w_seen: &'a Array2<f64>,
    pub word_graph: Option<&'a WordGraph>,
    pub gcn: GcnConfig,
    pub similarity: Similarity,
    pub row_normalize: bool,
    pub ridge: f64,
}

/// Full classifier `[W_S; W_U]` with the unseen rows produced by `method`.
/// CONSE has no unseen rows of its own; they are left at zero.
pub fn synthesize(method: Method, inp: &SynthesisInputs<'_>) -> Result<ClassifierMatrix> {
    let labels = inp.labels;
    let d = inp.w_seen.ncols();
    let unseen = labels.unseen();
    let w_unseen = match method {
        Method::We => {
            if inp.embeddings.dim() != d {
                return Err(Error::Shape(format!(
                    "WE needs embeddings in feature space: embedding dim {} vs feature dim {d}",
                    inp.embeddings.dim()
                )));
            }
            we_weights(inp.embeddings)?.rows(unseen)
        }
        Method::Conse => Array2::zeros((unseen.len(), d)),
        Method::Gcn => {
            let wg = inp
                .word_graph
                .ok_or_else(|| Error::Config("GCN synthesis needs a word graph".into()))?;
            gcn_synthesize(wg, labels, inp.w_seen, &inp.gcn)?.weights.rows(unseen)
        }
        Method::Sync => {
            return sync_classifier(
                labels,
                inp.embeddings,
                inp.w_seen,
                inp.similarity,
                inp.row_normalize,
                inp.ridge,
            )
        }
    };
    ClassifierMatrix::assemble(labels, inp.w_seen, &w_unseen)
}

/// Unary-only and context records for the same regions.
#[derive(Debug, Clone, PartialEq)]
pub struct InferOutput {
    pub unary: Vec<EvalRecord>,
    pub context: Vec<EvalRecord>,
}

/// Relation net and graph providing pairwise potentials.
#[derive(Clone, Copy)]
pub struct ContextModel<'a> {
    pub relnet: &'a RelNetParams,
    pub graph: &'a RelationGraph,
}

pub fn region_id(scene: &Scene, i: usize) -> String {
    format!("{}/{i}", scene.id)
}

/// Ranked list: candidates by marginal, then the pruned classes in unary
/// order with score 0.
fn ranked_record(state: &MeanFieldState, i: usize, unary: &[f64], restrict: &[usize]) -> Vec<(usize, f64)> {
    let mut ranked = state.ranked(i);
    let mut rest: Vec<usize> = (0..restrict.len())
        .filter(|&t| !state.candidates[i].contains(&restrict[t]))
        .collect();
    rest.sort_by(|&a, &b| {
        unary[b]
            .partial_cmp(&unary[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(restrict[a].cmp(&restrict[b]))
    });
    ranked.extend(rest.into_iter().map(|t| (restrict[t], 0.0)));
    ranked
}

struct SceneStates {
    unary: Vec<Vec<f64>>,
    base: MeanFieldState,
    context: MeanFieldState,
}

fn infer_restricted(
    scene: &Scene,
    labels: &LabelSpace,
    unary: &UnaryModel,
    context: Option<ContextModel<'_>>,
    cfg: &InferenceConfig,
    restrict: &[usize],
) -> Result<SceneStates> {
    let rows = scene
        .regions
        .iter()
        .map(|r| unary.log_probs(labels, &r.feature, restrict))
        .collect::<Result<Vec<_>>>()?;
    let cands = crf::prune_topk(&rows, restrict, cfg.top_k)?;
    let base = crf::unary_state(&cands);
    let ctx = match context {
        Some(m) if cfg.gamma != 0.0 && scene.len() > 1 => {
            let pots = m.relnet.scene_potentials(scene, Exec::Sequential)?;
            let provider = ScenePairwise {
                potentials: &pots,
                graph: m.graph,
            };
            crf::mean_field(&cands, &provider, cfg)?
        }
        _ => base.clone(),
    };
    Ok(SceneStates {
        unary: rows,
        base,
        context: ctx,
    })
}

/// Runs unary-only and context inference over labeled scenes.
///
/// Generalized: one joint inference over all classes. Classic: one inference
/// restricted to unseen classes and one restricted to seen classes; each
/// region is reported from the run matching its ground-truth partition.
pub fn infer_scenes(
    scenes: &[Scene],
    labels: &LabelSpace,
    unary: &UnaryModel,
    context: Option<ContextModel<'_>>,
    cfg: &InferenceConfig,
    setting: Setting,
    exec: Exec,
) -> Result<InferOutput> {
    cfg.validate()?;
    let all = labels.all();
    let per_scene = par::try_map(exec, scenes, |scene| -> Result<(Vec<EvalRecord>, Vec<EvalRecord>)> {
        let gts = scene.labels()?;
        let runs: Vec<(Vec<usize>, SceneStates)> = match setting {
            Setting::Generalized => vec![(
                all.clone(),
                infer_restricted(scene, labels, unary, context, cfg, &all)?,
            )],
            Setting::Classic => [labels.unseen(), labels.seen()]
                .into_iter()
                .map(|r| Ok((r.to_vec(), infer_restricted(scene, labels, unary, context, cfg, r)?)))
                .collect::<Result<_>>()?,
        };
        let mut base = Vec::with_capacity(scene.len());
        let mut ctx = Vec::with_capacity(scene.len());
        for (i, &gt) in gts.iter().enumerate() {
            let (restrict, st) = match setting {
                Setting::Generalized => (&runs[0].0, &runs[0].1),
                Setting::Classic => {
                    let r = if labels.is_seen(gt) { &runs[1] } else { &runs[0] };
                    (&r.0, &r.1)
                }
            };
            let id = region_id(scene, i);
            base.push(EvalRecord {
                region_id: id.clone(),
                gt,
                ranked: ranked_record(&st.base, i, &st.unary[i], restrict),
            });
            ctx.push(EvalRecord {
                region_id: id,
                gt,
                ranked: ranked_record(&st.context, i, &st.unary[i], restrict),
            });
        }
        Ok((base, ctx))
    })?;
    let mut out = InferOutput {
        unary: Vec::new(),
        context: Vec::new(),
    };
    for (b, c) in per_scene {
        out.unary.extend(b);
        out.context.extend(c);
    }
    Ok(out)
}

/// Unary log-probabilities over the full label space, for relation-net
/// training with the unary term. Unseen entries are unused by the loss.
pub fn training_unary(scenes: &[Scene], labels: &LabelSpace, unary: &UnaryModel, exec: Exec) -> Result<Vec<Vec<Vec<f64>>>> {
    let seen = labels.seen();
    par::try_map(exec, scenes, |s| {
        s.regions
            .iter()
            .map(|r| {
                let lp = unary.log_probs(labels, &r.feature, seen)?;
                let mut full = vec![0.0; labels.len()];
                for (&c, v) in seen.iter().zip(lp) {
                    full[c] = v;
                }
                Ok(full)
            })
            .collect::<Result<Vec<_>>>()
    })
}

/// One row of a metrics table. Accuracies are fractions in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub variant: String,
    pub k: usize,
    pub subset: String,
    pub per_instance: f64,
    pub per_class: f64,
    pub topk: f64,
}

/// Metrics for unseen and seen ground truth and, in the generalized
/// setting, their harmonic mean; one block per `k`.
pub fn metrics_rows(variant: &str, records: &[EvalRecord], labels: &LabelSpace, setting: Setting, ks: &[usize]) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for &k in ks {
        let mut parts = Vec::new();
        for (name, subset) in [("unseen", labels.unseen()), ("seen", labels.seen())] {
            if !records.iter().any(|r| subset.contains(&r.gt)) {
                continue;
            }
            let row = MetricsRow {
                variant: variant.to_string(),
                k,
                subset: name.to_string(),
                per_instance: per_instance_accuracy(records, subset)?,
                per_class: per_class_accuracy(records, subset)?,
                topk: topk_accuracy(records, k, subset)?,
            };
            parts.push(row.clone());
            rows.push(row);
        }
        if setting == Setting::Generalized && parts.len() == 2 {
            rows.push(MetricsRow {
                variant: variant.to_string(),
                k,
                subset: "hm".into(),
                per_instance: harmonic_mean(parts[0].per_instance, parts[1].per_instance),
                per_class: harmonic_mean(parts[0].per_class, parts[1].per_class),
                topk: harmonic_mean(parts[0].topk, parts[1].topk),
            });
        }
    }
    if rows.is_empty() {
        return Err(Error::Undefined("no records to evaluate".into()));
    }
    Ok(rows)
}

fn pct(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

/// Metrics table as CSV with percentages to one decimal.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("variant,k,subset,per_instance,per_class,topk\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.variant,
            r.k,
            r.subset,
            pct(r.per_instance),
            pct(r.per_class),
            pct(r.topk)
        ));
    }
    out
}

/// Top-K pruning sweep: reruns context inference for each `K` and reports
/// top-1 accuracies.
pub fn topk_sweep(
    scenes: &[Scene],
    labels: &LabelSpace,
    unary: &UnaryModel,
    context: ContextModel<'_>,
    base_cfg: &InferenceConfig,
    setting: Setting,
    ks: &[usize],
    exec: Exec,
) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for &k in ks {
        let cfg = InferenceConfig { top_k: k, ..*base_cfg };
        let out = infer_scenes(scenes, labels, unary, Some(context), &cfg, setting, exec)?;
        for mut r in metrics_rows("context", &out.context, labels, setting, &[1])? {
            r.k = k;
            rows.push(r);
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecallRow {
    pub variant: String,
    pub iou: f64,
    pub subset: String,
    pub recall: f64,
}

/// Detections for every proposal set. Classic setting runs detection twice,
/// over unseen and over seen classes, and merges per image.
pub fn detect_all(
    proposals: &[ProposalSet],
    w: &ClassifierMatrix,
    labels: &LabelSpace,
    context: Option<ContextModel<'_>>,
    cfg: &DetectConfig,
    bg_norm: BgNorm,
    setting: Setting,
    exec: Exec,
) -> Result<Vec<Vec<Detection>>> {
    let wb = with_background(w, bg_norm)?;
    let bg = w.n_classes();
    let ctx = context.map(|c| DetectContext {
        relnet: c.relnet,
        graph: c.graph,
    });
    let all = labels.all();
    let class_sets: Vec<&[usize]> = match setting {
        Setting::Generalized => vec![&all],
        Setting::Classic => vec![labels.unseen(), labels.seen()],
    };
    par::try_map(exec, proposals, |p| {
        let mut dets = Vec::new();
        for classes in &class_sets {
            dets.extend(detect_scene(p, &wb, classes, bg, ctx, cfg)?);
        }
        Ok(dets)
    })
}

/// Ground truth of every scene, aligned with `proposals` by image id.
pub fn ground_truth_for(proposals: &[ProposalSet], scenes: &[Scene]) -> Result<Vec<Vec<GroundTruth>>> {
    let by_id: std::collections::BTreeMap<&str, &Scene> = scenes.iter().map(|s| (s.id.as_str(), s)).collect();
    proposals
        .iter()
        .map(|p| {
            let s = by_id
                .get(p.image_id.as_str())
                .ok_or_else(|| Error::Invalid(format!("no ground truth for image `{}`", p.image_id)))?;
            Ok(s.regions
                .iter()
                .filter_map(|r| r.label.map(|class| GroundTruth { bbox: r.bbox, class }))
                .collect())
        })
        .collect()
}

/// Recall@k at IoU 0.4 and 0.5 for unseen, seen and their harmonic mean.
pub fn recall_report(variant: &str, dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], labels: &LabelSpace, k: usize) -> Result<Vec<RecallRow>> {
    let mut rows = Vec::new();
    for iou in [0.4, 0.5] {
        let u = recall_at_k(dets, gts, iou, k, labels.unseen())?;
        let s = recall_at_k(dets, gts, iou, k, labels.seen())?;
        for (subset, recall) in [("unseen", u), ("seen", s), ("hm", harmonic_mean(u, s))] {
            rows.push(RecallRow {
                variant: variant.to_string(),
                iou,
                subset: subset.into(),
                recall,
            });
        }
    }
    Ok(rows)
}

pub fn recall_csv(rows: &[RecallRow]) -> String {
    let mut out = String::from("variant,iou,subset,recall\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.variant, r.iou, r.subset, pct(r.recall)));
    }
    out
}

/// File names inside a dataset directory.
pub mod files {
    pub const LABELS: &str = "labels.json";
    pub const EMBEDDINGS: &str = "embeddings.csv";
    pub const GRAPH: &str = "graph.json";
    pub const TRIPLES: &str = "triples.csv";
    pub const SEEN_CLASSIFIER: &str = "classifier_seen.csv";
    pub const WORD_GRAPH: &str = "wordgraph.json";
    pub const TRAIN_SCENES: &str = "train_scenes.jsonl";
    pub const TEST_SCENES: &str = "test_scenes.jsonl";
    pub const PROPOSALS: &str = "proposals.jsonl";
    pub const WORLD: &str = "world.json";
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, text).map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

/// A dataset directory produced by the synthetic-world generator.
#[derive(Debug, Clone)]
pub struct DatasetDir(pub PathBuf);

impl DatasetDir {
    pub fn path(&self, name: &str) -> PathBuf {
        self.0.join(name)
    }

    pub fn labels(&self) -> Result<LabelSpace> {
        LabelSpace::from_json(&read_text(&self.path(files::LABELS))?)
    }

    pub fn embeddings(&self, labels: &LabelSpace) -> Result<EmbeddingTable> {
        EmbeddingTable::from_csv(&read_text(&self.path(files::EMBEDDINGS))?, labels)
    }

    pub fn graph(&self, labels: &LabelSpace) -> Result<RelationGraph> {
        RelationGraph::from_json(&read_text(&self.path(files::GRAPH))?, labels)
    }

    pub fn w_seen(&self, labels: &LabelSpace) -> Result<Array2<f64>> {
        ClassifierMatrix::seen_from_csv(&read_text(&self.path(files::SEEN_CLASSIFIER))?, labels)
    }

    pub fn word_graph(&self) -> Result<WordGraph> {
        WordGraph::from_json(&read_text(&self.path(files::WORD_GRAPH))?)
    }

    pub fn scenes(&self, name: &str, labels: &LabelSpace) -> Result<Vec<Scene>> {
        crate::scene::read_scenes(&read_text(&self.path(name))?, labels)
    }

    pub fn proposals(&self) -> Result<Vec<ProposalSet>> {
        crate::detection::read_proposals(&read_text(&self.path(files::PROPOSALS))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{gen_world, into_scenes, SceneConfig, WorldConfig};

    fn small_world() -> crate::synthworld::World {
        gen_world(&WorldConfig {
            n_classes: 12,
            n_seen: 8,
            feature_dim: 16,
            embed_dim: 16,
            n_predicates: 3,
            edge_density: 0.05,
            confusable_pairs: vec![(8, 0), (9, 1)],
            n_ancestors: 3,
            seed: 5,
            ..WorldConfig::default()
        })
        .unwrap()
    }

    fn inputs(w: &crate::synthworld::World) -> SynthesisInputs<'_> {
        SynthesisInputs {
            labels: &w.labels,
            embeddings: &w.embeddings,
            w_seen: &w.w_seen,
            word_graph: Some(&w.word_graph),
            gcn: GcnConfig { iterations: 30, ..GcnConfig::default() },
            similarity: Similarity::Cosine,
            row_normalize: true,
            ridge: 1e-6,
        }
    }

    #[test]
    fn every_method_emits_all_rows() {
        let w = small_world();
        for m in [Method::We, Method::Conse, Method::Gcn, Method::Sync] {
            let c = synthesize(m, &inputs(&w)).unwrap();
            assert_eq!(c.n_classes(), 12);
            assert_eq!(c.rows(w.labels.seen()), w.w_seen);
        }
    }

    #[test]
    fn zero_gamma_context_equals_unary() {
        let w = small_world();
        let cfg = SceneConfig { n_scenes: 10, min_objects: 2, max_objects: 4, include_unseen: true, seed: 2 };
        let scenes = into_scenes(w.gen_scenes(&cfg, Exec::Sequential).unwrap());
        let unary = UnaryModel::Linear(synthesize(Method::We, &inputs(&w)).unwrap());
        let net = RelNetParams::init(Default::default(), 8, w.graph.n_relations(), None, 1).unwrap();
        let ctx = ContextModel { relnet: &net, graph: &w.graph };
        let icfg = InferenceConfig { gamma: 0.0, ..InferenceConfig::default() };
        for setting in [Setting::Generalized, Setting::Classic] {
            let out = infer_scenes(&scenes, &w.labels, &unary, Some(ctx), &icfg, setting, Exec::Parallel).unwrap();
            assert_eq!(out.unary, out.context);
        }
    }

    #[test]
    fn conse_unary_is_normalized() {
        let w = small_world();
        let c = synthesize(Method::Conse, &inputs(&w)).unwrap();
        let m = UnaryModel::for_method(Method::Conse, c, &w.labels, &w.embeddings).unwrap();
        let f = w.prototypes.row(3).mapv(|v| v * 10.0).to_vec();
        let lp = m.log_probs(&w.labels, &f, &w.labels.all()).unwrap();
        let s: f64 = lp.iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}
