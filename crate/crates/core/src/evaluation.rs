//! Recognition metrics and the per-class improvement report.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kgraph::{LabelSpace, RelationGraph};

/// Prediction for one region: ranked classes, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub region_id: String,
    pub gt: usize,
    pub ranked: Vec<(usize, f64)>,
}

impl EvalRecord {
    pub fn top1(&self) -> Option<usize> {
        self.ranked.first().map(|r| r.0)
    }

    fn hit_at(&self, k: usize) -> bool {
        self.ranked.iter().take(k).any(|r| r.0 == self.gt)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RankedLine {
    class: String,
    score: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    region_id: String,
    gt: String,
    ranked: Vec<RankedLine>,
}

pub fn write_records(records: &[EvalRecord], labels: &LabelSpace) -> Result<String> {
    let mut out = String::new();
    for r in records {
        let line = RecordLine {
            region_id: r.region_id.clone(),
            gt: labels.name(r.gt).to_string(),
            ranked: r
                .ranked
                .iter()
                .map(|&(c, s)| RankedLine {
                    class: labels.name(c).to_string(),
                    score: s,
                })
                .collect(),
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_records(text: &str, labels: &LabelSpace) -> Result<Vec<EvalRecord>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let at = |m: String| Error::format("records", format!("line {}: {m}", n + 1));
        let l: RecordLine = serde_json::from_str(line).map_err(|e| at(e.to_string()))?;
        let ranked = l
            .ranked
            .iter()
            .map(|r| Ok((labels.index_of(&r.class)?, r.score)))
            .collect::<Result<Vec<_>>>()?;
        if ranked.windows(2).any(|w| !(w[0].1 >= w[1].1)) {
            return Err(at("ranked list is not sorted by descending score".into()));
        }
        out.push(EvalRecord {
            region_id: l.region_id,
            gt: labels.index_of(&l.gt)?,
            ranked,
        });
    }
    Ok(out)
}

fn restricted<'a>(records: &'a [EvalRecord], restrict_gt: &[usize]) -> Result<Vec<&'a EvalRecord>> {
    let set: BTreeSet<usize> = restrict_gt.iter().copied().collect();
    let r: Vec<&EvalRecord> = records.iter().filter(|r| set.contains(&r.gt)).collect();
    if r.is_empty() {
        return Err(Error::Undefined("no records with ground truth in the requested class set".into()));
    }
    Ok(r)
}

/// Fraction of records (ground truth in `restrict_gt`) whose top-`k` contains
/// the ground truth.
pub fn topk_accuracy(records: &[EvalRecord], k: usize, restrict_gt: &[usize]) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let r = restricted(records, restrict_gt)?;
    Ok(r.iter().filter(|x| x.hit_at(k)).count() as f64 / r.len() as f64)
}

pub fn per_instance_accuracy(records: &[EvalRecord], restrict_gt: &[usize]) -> Result<f64> {
    topk_accuracy(records, 1, restrict_gt)
}

/// Per-class top-1 accuracy of every class with at least one instance.
pub fn class_accuracies(records: &[EvalRecord], restrict_gt: &[usize]) -> Result<BTreeMap<usize, f64>> {
    let mut counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for r in restricted(records, restrict_gt)? {
        let e = counts.entry(r.gt).or_default();
        e.1 += 1;
        if r.top1() == Some(r.gt) {
            e.0 += 1;
        }
    }
    Ok(counts
        .into_iter()
        .map(|(c, (hit, n))| (c, hit as f64 / n as f64))
        .collect())
}

/// Unweighted mean of per-class accuracies.
pub fn per_class_accuracy(records: &[EvalRecord], restrict_gt: &[usize]) -> Result<f64> {
    let acc = class_accuracies(records, restrict_gt)?;
    Ok(acc.values().sum::<f64>() / acc.len() as f64)
}

/// `2ab / (a + b)`, defined as 0 when `a + b = 0`.
pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b > 0.0 {
        2.0 * a * b / (a + b)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImprovementRow {
    pub class: usize,
    pub delta: f64,
    pub degree: usize,
    pub frequency: usize,
}

/// Per-class accuracy change from `base` to `context`, joined with graph
/// degree and test frequency. One row per class with a test instance.
pub fn improvement_report(
    base: &[EvalRecord],
    context: &[EvalRecord],
    graph: &RelationGraph,
    restrict_gt: &[usize],
) -> Result<Vec<ImprovementRow>> {
    let key = |rs: &[EvalRecord]| -> BTreeMap<String, usize> {
        rs.iter().map(|r| (r.region_id.clone(), r.gt)).collect()
    };
    if base.len() != context.len() || key(base) != key(context) || key(base).len() != base.len() {
        return Err(Error::Invalid(
            "base and context records must cover the same regions with the same ground truth".into(),
        ));
    }
    let b = class_accuracies(base, restrict_gt)?;
    let c = class_accuracies(context, restrict_gt)?;
    let mut freq: BTreeMap<usize, usize> = BTreeMap::new();
    for r in base.iter().filter(|r| b.contains_key(&r.gt)) {
        *freq.entry(r.gt).or_default() += 1;
    }
    b.iter()
        .map(|(&class, &acc)| {
            Ok(ImprovementRow {
                class,
                delta: c[&class] - acc,
                degree: graph.class_degree(class)?,
                frequency: freq[&class],
            })
        })
        .collect()
}

pub fn write_improvement_csv(rows: &[ImprovementRow], labels: &LabelSpace) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["class", "delta", "degree", "frequency"])?;
    for r in rows {
        w.write_record([
            labels.name(r.class).to_string(),
            r.delta.to_string(),
            r.degree.to_string(),
            r.frequency.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::format("report", e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kgraph::RelationSet;

    fn rec(id: &str, gt: usize, top: usize, other: usize) -> EvalRecord {
        EvalRecord {
            region_id: id.into(),
            gt,
            ranked: vec![(top, 0.6), (other, 0.4)],
        }
    }

    fn fixture() -> Vec<EvalRecord> {
        vec![
            rec("a1", 0, 0, 1),
            rec("a2", 0, 0, 1),
            rec("a3", 0, 1, 0),
            rec("b1", 1, 0, 1),
        ]
    }

    #[test]
    fn paper_harmonic_means() {
        assert!((harmonic_mean(12.7, 32.2) - 18.2).abs() <= 0.05);
        assert!((harmonic_mean(13.8, 34.5) - 19.7).abs() <= 0.05);
        assert_eq!(harmonic_mean(3.0, 3.0), 3.0);
        assert_eq!(harmonic_mean(0.0, 5.0), 0.0);
        assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
    }

    #[test]
    fn accuracy_fixtures() {
        let r = fixture();
        assert_eq!(per_instance_accuracy(&r, &[0, 1]).unwrap(), 0.5);
        assert!((per_class_accuracy(&r, &[0, 1]).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(topk_accuracy(&r, 2, &[0, 1]).unwrap(), 1.0);
        assert_eq!(per_class_accuracy(&r, &[0]).unwrap(), per_instance_accuracy(&r, &[0]).unwrap());
        assert!(per_instance_accuracy(&r, &[7]).is_err());
        assert!(topk_accuracy(&r, 0, &[0]).is_err());
    }

    #[test]
    fn report_deltas() {
        let rels = RelationSet::new(vec!["near".into()]).unwrap();
        let g = RelationGraph::from_edges(2, rels, [(0, 0, 1)]).unwrap();
        let base = fixture();
        let same = improvement_report(&base, &base, &g, &[0, 1]).unwrap();
        assert!(same.iter().all(|r| r.delta == 0.0));
        let mut ctx = base.clone();
        ctx[3] = rec("b1", 1, 1, 0);
        let rows = improvement_report(&base, &ctx, &g, &[0, 1]).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!((rows[0].delta, rows[0].frequency, rows[0].degree), (0.0, 3, 1));
        assert_eq!((rows[1].delta, rows[1].frequency), (1.0, 1));
        assert!(improvement_report(&base, &ctx[..3], &g, &[0, 1]).is_err());
    }

    #[test]
    fn records_round_trip_and_strictness() {
        let labels = LabelSpace::new(vec!["a".into(), "b".into()], vec![true, false]).unwrap();
        let r = fixture();
        let text = write_records(&r, &labels).unwrap();
        assert_eq!(read_records(&text, &labels).unwrap(), r);
        let unsorted = r#"{"region_id":"x","gt":"a","ranked":[{"class":"a","score":0.1},{"class":"b","score":0.9}]}"#;
        assert!(read_records(unsorted, &labels).is_err());
        let extra = r#"{"region_id":"x","gt":"a","ranked":[],"setting":"classic"}"#;
        assert!(read_records(extra, &labels).is_err());
    }
}
