//! Zero-shot detection over precomputed proposals.
//!
//! Proposals are scored by the unary classifier extended with a background
//! row, the best-scoring boxes go through context inference with background
//! as an extra label, and the survivors are deduplicated by per-class NMS.

use serde::{Deserialize, Serialize};

use crate::crf::{self, InferenceConfig, MeanFieldState};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::kgraph::{LabelSpace, RelationGraph};
use crate::par::Exec;
use crate::relnet::{RelNetParams, ScenePairwise};
use crate::scene::{Region, Scene};
use crate::zsl::{unary_log_probs, ClassifierMatrix};

/// Denominator used by [`background_weight`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BgNorm {
    /// `sum / ||sum||^2`
    #[default]
    Squared,
    /// `sum / ||sum||`
    Plain,
}

const UNIT_TOL: f64 = 1e-6;

/// Background classifier row from the normalized average of the class rows.
/// Every row of `w` must already have unit L2 norm.
pub fn background_weight(w: &ClassifierMatrix, norm: BgNorm) -> Result<Vec<f64>> {
    if w.n_classes() == 0 {
        return Err(Error::Invalid("no classifier rows".into()));
    }
    for (c, row) in w.weights.rows().into_iter().enumerate() {
        let n = row.dot(&row).sqrt();
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::Invalid(format!(
                "classifier row {c} has norm {n}; rows must be L2-normalized before computing the background weight"
            )));
        }
    }
    let sum = w.weights.sum_axis(ndarray::Axis(0));
    let sq = sum.dot(&sum);
    if !(sq > 0.0) {
        return Err(Error::Invalid("classifier rows sum to the zero vector".into()));
    }
    let denom = match norm {
        BgNorm::Squared => sq,
        BgNorm::Plain => sq.sqrt(),
    };
    Ok(sum.iter().map(|v| v / denom).collect())
}

/// `w` with the background row appended; background gets index `w.n_classes()`.
pub fn with_background(w: &ClassifierMatrix, norm: BgNorm) -> Result<ClassifierMatrix> {
    let bg = background_weight(w, norm)?;
    let mut m = w.weights.clone();
    m.push_row(ndarray::ArrayView1::from(&bg))
        .map_err(|e| Error::Shape(e.to_string()))?;
    ClassifierMatrix::new(m)
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
    let iy = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class: usize,
    pub score: f64,
}

fn score_order<T>(items: &[T], score: impl Fn(&T) -> f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| {
        score(&items[b])
            .partial_cmp(&score(&items[a]))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order
}

/// Greedy per-class NMS. Output is in descending score order, ties in input
/// order.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Result<Vec<Detection>> {
    if !(0.0..=1.0).contains(&iou_threshold) {
        return Err(Error::Config("NMS threshold must lie in [0, 1]".into()));
    }
    let mut kept: Vec<Detection> = Vec::new();
    for t in score_order(dets, |d| d.score) {
        let d = dets[t];
        if kept
            .iter()
            .all(|k| k.class != d.class || iou(&k.bbox, &d.bbox) <= iou_threshold)
        {
            kept.push(d);
        }
    }
    Ok(kept)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub score: f64,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSet {
    pub image_id: String,
    pub proposals: Vec<Proposal>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProposalLine {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    score: f64,
    feature: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProposalFileLine {
    image_id: String,
    proposals: Vec<ProposalLine>,
}

pub fn write_proposals(sets: &[ProposalSet]) -> Result<String> {
    let mut out = String::new();
    for s in sets {
        let line = ProposalFileLine {
            image_id: s.image_id.clone(),
            proposals: s
                .proposals
                .iter()
                .map(|p| ProposalLine {
                    bbox: p.bbox.to_array(),
                    score: p.score,
                    feature: p.feature.clone(),
                })
                .collect(),
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_proposals(text: &str) -> Result<Vec<ProposalSet>> {
    let mut sets = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: ProposalFileLine = serde_json::from_str(line)
            .map_err(|e| Error::format("proposals", format!("line {}: {e}", n + 1)))?;
        let mut proposals = Vec::with_capacity(f.proposals.len());
        for p in f.proposals {
            if !p.score.is_finite() {
                return Err(Error::format("proposals", format!("line {}: non-finite score", n + 1)));
            }
            proposals.push(Proposal {
                bbox: BBox::from_array(p.bbox)?,
                score: p.score,
                feature: p.feature,
            });
        }
        sets.push(ProposalSet {
            image_id: f.image_id,
            proposals,
        });
    }
    Ok(sets)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectConfig {
    pub inference: InferenceConfig,
    pub objectness_threshold: f64,
    pub max_boxes: usize,
    pub nms_threshold: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            inference: InferenceConfig::default(),
            objectness_threshold: 0.07,
            max_boxes: 100,
            nms_threshold: 0.4,
        }
    }
}

/// Context model used by [`detect_scene`].
#[derive(Clone, Copy)]
pub struct DetectContext<'a> {
    pub relnet: &'a RelNetParams,
    pub graph: &'a RelationGraph,
}

/// Detects objects among `classes` in one image.
///
/// `w` must contain the background row at index `background` (see
/// [`with_background`]); `classes` must not include it.
pub fn detect_scene(
    props: &ProposalSet,
    w: &ClassifierMatrix,
    classes: &[usize],
    background: usize,
    context: Option<DetectContext<'_>>,
    cfg: &DetectConfig,
) -> Result<Vec<Detection>> {
    cfg.inference.validate()?;
    if background >= w.n_classes() {
        return Err(Error::range("background class", background, w.n_classes()));
    }
    if classes.contains(&background) {
        return Err(Error::Invalid("class list must not contain the background index".into()));
    }
    let mut all = classes.to_vec();
    all.push(background);

    let surviving: Vec<&Proposal> = props
        .proposals
        .iter()
        .filter(|p| p.score > cfg.objectness_threshold)
        .collect();
    if surviving.is_empty() {
        return Ok(Vec::new());
    }
    let unary = surviving
        .iter()
        .map(|p| unary_log_probs(w, &p.feature, &all))
        .collect::<Result<Vec<_>>>()?;
    let best: Vec<f64> = unary
        .iter()
        .map(|u| u[..classes.len()].iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let mut keep = score_order(&best, |b| *b);
    keep.truncate(cfg.max_boxes);
    keep.sort_unstable();

    let kept_unary: Vec<Vec<f64>> = keep.iter().map(|&t| unary[t].clone()).collect();
    let cands = crf::prune_topk(&kept_unary, &all, cfg.inference.top_k)?;
    let state: MeanFieldState = match context {
        Some(ctx) if cfg.inference.gamma != 0.0 => {
            let scene = Scene {
                id: props.image_id.clone(),
                regions: keep
                    .iter()
                    .map(|&t| Region {
                        bbox: surviving[t].bbox,
                        feature: surviving[t].feature.clone(),
                        label: None,
                    })
                    .collect(),
            };
            let pots = ctx.relnet.scene_potentials(&scene, Exec::Sequential)?;
            let provider = ScenePairwise {
                potentials: &pots,
                graph: ctx.graph,
            };
            crf::mean_field(&cands, &provider, &cfg.inference)?
        }
        _ => crf::unary_state(&cands),
    };

    let labels = crf::map_assignment(&state);
    let mut dets = Vec::new();
    for (r, &c) in labels.iter().enumerate() {
        if c == background {
            continue;
        }
        let a = state.candidates[r].iter().position(|&x| x == c).unwrap_or(0);
        dets.push(Detection {
            bbox: surviving[keep[r]].bbox,
            class: c,
            score: state.q[r][a],
        });
    }
    nms(&dets, cfg.nms_threshold)
}

/// Ground-truth object for recall.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub class: usize,
}

/// Fraction of ground truths with class in `restrict` matched by the top-`k`
/// detections of their image at `iou >= iou_threshold`.
pub fn recall_at_k(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    iou_threshold: f64,
    k: usize,
    restrict: &[usize],
) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if dets.len() != gts.len() {
        return Err(Error::Shape(format!(
            "{} detection lists for {} images",
            dets.len(),
            gts.len()
        )));
    }
    let mut total = 0usize;
    let mut hit = 0usize;
    for (d, g) in dets.iter().zip(gts) {
        let mut claimed = vec![false; g.len()];
        let mut order = score_order(d, |x| x.score);
        order.truncate(k);
        for t in order {
            let det = &d[t];
            let mut best: Option<(usize, f64)> = None;
            for (gi, gt) in g.iter().enumerate() {
                if claimed[gi] || gt.class != det.class {
                    continue;
                }
                let v = iou(&det.bbox, &gt.bbox);
                if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((gi, v));
                }
            }
            if let Some((gi, _)) = best {
                claimed[gi] = true;
            }
        }
        for (gi, gt) in g.iter().enumerate() {
            if restrict.contains(&gt.class) {
                total += 1;
                if claimed[gi] {
                    hit += 1;
                }
            }
        }
    }
    if total == 0 {
        return Err(Error::Undefined("no ground-truth boxes in the requested class set".into()));
    }
    Ok(hit as f64 / total as f64)
}

/// Detections CSV: `image_id,class,score,x,y,w,h`.
pub fn write_detections_csv(
    per_image: &[(String, Vec<Detection>)],
    labels: &LabelSpace,
) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["image_id", "class", "score", "x", "y", "w", "h"])?;
    for (id, dets) in per_image {
        for d in dets {
            w.write_record([
                id.clone(),
                labels.name(d.class).to_string(),
                d.score.to_string(),
                d.bbox.x.to_string(),
                d.bbox.y.to_string(),
                d.bbox.w.to_string(),
                d.bbox.h.to_string(),
            ])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::format("detections", e.to_string()))
}
