//! Unary model: classifier matrices over seen and unseen classes.
//!
//! Four ways of filling in the unseen rows are provided: word embeddings
//! (WE), convex combinations of seen embeddings (CONSE), a graph
//! convolutional regressor over a word graph (GCN) and phantom-class
//! synthesis (SYNC).

mod conse;
mod gcn;
mod sync;

pub use conse::{conse_embedding, conse_infer, conse_scores};
pub use gcn::{gcn_synthesize, GcnConfig, GcnOutput, WordGraph};
pub use sync::{build_similarity, sync_classifier, sync_synthesize, Similarity, SyncModel};

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kgraph::LabelSpace;

/// Classifier-synthesis method for the unseen classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    We,
    Conse,
    Gcn,
    Sync,
}

impl Method {
    /// Context weight chosen on held-out seen classes for each method.
    pub fn default_gamma(self) -> f64 {
        match self {
            Method::Sync => 0.5,
            Method::We | Method::Conse | Method::Gcn => 1.0,
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "we" => Ok(Method::We),
            "conse" => Ok(Method::Conse),
            "gcn" => Ok(Method::Gcn),
            "sync" => Ok(Method::Sync),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::We => "we",
            Method::Conse => "conse",
            Method::Gcn => "gcn",
            Method::Sync => "sync",
        })
    }
}

/// Classic: predict among unseen classes only. Generalized: among all classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Classic,
    Generalized,
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classic" => Ok(Setting::Classic),
            "generalized" => Ok(Setting::Generalized),
            other => Err(Error::Config(format!("unknown setting `{other}`"))),
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setting::Classic => "classic",
            Setting::Generalized => "generalized",
        })
    }
}

/// One word vector per class, rows in label-space order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub vectors: Array2<f64>,
}

impl EmbeddingTable {
    pub fn new(vectors: Array2<f64>) -> Result<Self> {
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding table".into()));
        }
        Ok(Self { vectors })
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn row(&self, class: usize) -> ArrayView1<'_, f64> {
        self.vectors.row(class)
    }

    pub fn from_csv(text: &str, labels: &LabelSpace) -> Result<Self> {
        let (names, m) = read_matrix_csv(text, "embeddings")?;
        Self::new(reorder_rows(&names, &m, labels, "embeddings")?)
    }

    pub fn to_csv(&self, labels: &LabelSpace) -> String {
        write_matrix_csv(labels.names(), &self.vectors)
    }
}

/// Weight rows `W` over the feature space, bound to the label-space order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierMatrix {
    pub weights: Array2<f64>,
}

impl ClassifierMatrix {
    pub fn new(weights: Array2<f64>) -> Result<Self> {
        if weights.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("classifier weights".into()));
        }
        Ok(Self { weights })
    }

    pub fn n_classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.ncols()
    }

    /// Rows for `classes`, in that order.
    pub fn rows(&self, classes: &[usize]) -> Array2<f64> {
        self.weights.select(Axis(0), classes)
    }

    /// Full matrix from seen rows (in `labels.seen()` order) and unseen rows
    /// (in `labels.unseen()` order).
    pub fn assemble(labels: &LabelSpace, seen: &Array2<f64>, unseen: &Array2<f64>) -> Result<Self> {
        if seen.nrows() != labels.seen().len() || unseen.nrows() != labels.unseen().len() {
            return Err(Error::Shape("seen/unseen row counts disagree with label space".into()));
        }
        if seen.ncols() != unseen.ncols() {
            return Err(Error::Shape("seen and unseen rows differ in width".into()));
        }
        let mut w = Array2::zeros((labels.len(), seen.ncols()));
        for (r, &c) in labels.seen().iter().enumerate() {
            w.row_mut(c).assign(&seen.row(r));
        }
        for (r, &c) in labels.unseen().iter().enumerate() {
            w.row_mut(c).assign(&unseen.row(r));
        }
        Self::new(w)
    }

    /// Reads a classifier CSV covering every class.
    pub fn from_csv(text: &str, labels: &LabelSpace) -> Result<Self> {
        let (names, m) = read_matrix_csv(text, "classifier")?;
        Self::new(reorder_rows(&names, &m, labels, "classifier")?)
    }

    /// Reads seen-class rows only, returned in `labels.seen()` order.
    pub fn seen_from_csv(text: &str, labels: &LabelSpace) -> Result<Array2<f64>> {
        let (names, m) = read_matrix_csv(text, "classifier")?;
        let mut out = Array2::zeros((labels.seen().len(), m.ncols()));
        let mut filled = vec![false; labels.seen().len()];
        for (r, name) in names.iter().enumerate() {
            let c = labels.index_of(name)?;
            let Ok(pos) = labels.seen().binary_search(&c) else {
                continue;
            };
            if filled[pos] {
                return Err(Error::format("classifier", format!("duplicate row `{name}`")));
            }
            filled[pos] = true;
            out.row_mut(pos).assign(&m.row(r));
        }
        if let Some(pos) = filled.iter().position(|f| !f) {
            return Err(Error::format(
                "classifier",
                format!("missing seen class `{}`", labels.name(labels.seen()[pos])),
            ));
        }
        Ok(out)
    }

    pub fn to_csv(&self, labels: &LabelSpace) -> String {
        write_matrix_csv(labels.names(), &self.weights)
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// Log-softmax of `W_restrict . f`, aligned with `restrict`.
pub fn unary_log_probs(w: &ClassifierMatrix, f: &[f64], restrict: &[usize]) -> Result<Vec<f64>> {
    if f.len() != w.feature_dim() {
        return Err(Error::Shape(format!(
            "feature has {} dims, classifier expects {}",
            f.len(),
            w.feature_dim()
        )));
    }
    if restrict.is_empty() {
        return Err(Error::Invalid("empty class restriction".into()));
    }
    let fv = ArrayView1::from(f);
    let mut logits = Vec::with_capacity(restrict.len());
    for &c in restrict {
        if c >= w.n_classes() {
            return Err(Error::range("class", c, w.n_classes()));
        }
        logits.push(w.weights.row(c).dot(&fv));
    }
    Ok(log_softmax(&logits))
}

/// Word-embedding classifier: every row is the L2-normalized class embedding.
pub fn we_weights(emb: &EmbeddingTable) -> Result<ClassifierMatrix> {
    let mut w = emb.vectors.clone();
    for (c, mut row) in w.rows_mut().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if !(norm > 0.0) {
            return Err(Error::Invalid(format!("class {c} has a zero-norm embedding")));
        }
        row.mapv_inplace(|v| v / norm);
    }
    ClassifierMatrix::new(w)
}

pub(crate) fn l2_normalize_rows(m: &mut Array2<f64>) -> Result<()> {
    for (r, mut row) in m.rows_mut().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if !(norm > 0.0) {
            return Err(Error::Invalid(format!("row {r} has zero norm")));
        }
        row.mapv_inplace(|v| v / norm);
    }
    Ok(())
}

/// Parses `name,v0,v1,...` rows with a header line.
pub fn read_matrix_csv(text: &str, what: &str) -> Result<(Vec<String>, Array2<f64>)> {
    let mut rdr = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let headers = rdr.headers()?.clone();
    if headers.get(0) != Some("class") || headers.len() < 2 {
        return Err(Error::format(what, "header must be `class,v0,v1,...`"));
    }
    for (k, h) in headers.iter().skip(1).enumerate() {
        if h != format!("v{k}") {
            return Err(Error::format(what, format!("unexpected column `{h}`")));
        }
    }
    let d = headers.len() - 1;
    let mut names = Vec::new();
    let mut data = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != d + 1 {
            return Err(Error::format(what, format!("row {} has {} fields", line + 2, rec.len())));
        }
        names.push(rec[0].to_string());
        for v in rec.iter().skip(1) {
            data.push(v.trim().parse::<f64>().map_err(|e| {
                Error::format(what, format!("row {}: `{v}`: {e}", line + 2))
            })?);
        }
    }
    let m = Array2::from_shape_vec((names.len(), d), data)
        .map_err(|e| Error::format(what, e.to_string()))?;
    Ok((names, m))
}

pub fn write_matrix_csv(names: &[String], m: &Array2<f64>) -> String {
    let mut out = String::from("class");
    for k in 0..m.ncols() {
        out.push_str(&format!(",v{k}"));
    }
    out.push('\n');
    for (name, row) in names.iter().zip(m.rows()) {
        out.push_str(name);
        for v in row {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

fn reorder_rows(names: &[String], m: &Array2<f64>, labels: &LabelSpace, what: &str) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((labels.len(), m.ncols()));
    let mut filled = vec![false; labels.len()];
    for (r, name) in names.iter().enumerate() {
        let c = labels.index_of(name)?;
        if filled[c] {
            return Err(Error::format(what, format!("duplicate row `{name}`")));
        }
        filled[c] = true;
        out.row_mut(c).assign(&m.row(r));
    }
    if let Some(c) = filled.iter().position(|f| !f) {
        return Err(Error::format(what, format!("missing class `{}`", labels.name(c))));
    }
    Ok(out)
}
