use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::kgraph::LabelSpace;

use super::{ClassifierMatrix, EmbeddingTable};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Similarity {
    Cosine,
    Rbf { bandwidth: f64 },
}

/// Similarity of every row of `a` to every phantom row. Under `row_normalize`
/// negative entries are clipped to zero and each row is scaled to sum to 1.
pub fn build_similarity(
    a: ArrayView2<'_, f64>,
    phantoms: ArrayView2<'_, f64>,
    mode: Similarity,
    row_normalize: bool,
) -> Result<Array2<f64>> {
    if a.ncols() != phantoms.ncols() {
        return Err(Error::Shape(format!(
            "rows have {} dims, phantoms {}",
            a.ncols(),
            phantoms.ncols()
        )));
    }
    if phantoms.nrows() == 0 {
        return Err(Error::Invalid("at least one phantom class is required".into()));
    }
    let mut s = Array2::zeros((a.nrows(), phantoms.nrows()));
    match mode {
        Similarity::Cosine => {
            let norm = |v: ndarray::ArrayView1<'_, f64>, what: &str, i: usize| {
                let n = v.dot(&v).sqrt();
                if n > 0.0 {
                    Ok(n)
                } else {
                    Err(Error::Invalid(format!("{what} {i} is a zero vector under cosine similarity")))
                }
            };
            let pn: Vec<f64> = phantoms
                .rows()
                .into_iter()
                .enumerate()
                .map(|(p, r)| norm(r, "phantom", p))
                .collect::<Result<_>>()?;
            for (i, r) in a.rows().into_iter().enumerate() {
                let rn = norm(r, "row", i)?;
                for (p, ph) in phantoms.rows().into_iter().enumerate() {
                    s[[i, p]] = r.dot(&ph) / (rn * pn[p]);
                }
            }
        }
        Similarity::Rbf { bandwidth } => {
            if !(bandwidth > 0.0) {
                return Err(Error::Config("rbf bandwidth must be positive".into()));
            }
            for (i, r) in a.rows().into_iter().enumerate() {
                for (p, ph) in phantoms.rows().into_iter().enumerate() {
                    let d = &r - &ph;
                    s[[i, p]] = (-d.dot(&d) / (2.0 * bandwidth * bandwidth)).exp();
                }
            }
        }
    }
    if row_normalize {
        for (i, mut row) in s.rows_mut().into_iter().enumerate() {
            row.mapv_inplace(|v| v.max(0.0));
            let total = row.sum();
            if !(total > 0.0) {
                return Err(Error::Invalid(format!(
                    "similarity row {i} has no positive entry and cannot be normalized"
                )));
            }
            row.mapv_inplace(|v| v / total);
        }
    }
    Ok(s)
}

/// Similarities of seen (`s_seen`) and unseen (`s_unseen`) classes to `P`
/// phantom classes.
#[derive(Debug, Clone, PartialEq)]
pub struct SyncModel {
    pub s_seen: Array2<f64>,
    pub s_unseen: Array2<f64>,
    pub ridge: f64,
}

impl SyncModel {
    pub fn new(s_seen: Array2<f64>, s_unseen: Array2<f64>, ridge: f64) -> Result<Self> {
        if s_seen.ncols() == 0 || s_seen.ncols() != s_unseen.ncols() {
            return Err(Error::Shape("seen and unseen similarity widths must agree and be positive".into()));
        }
        if !(ridge >= 0.0) || !ridge.is_finite() {
            return Err(Error::Config("ridge must be a finite non-negative number".into()));
        }
        Ok(Self {
            s_seen,
            s_unseen,
            ridge,
        })
    }

    pub fn n_phantoms(&self) -> usize {
        self.s_seen.ncols()
    }

    /// `V = (S_S^T S_S + ridge I)^-1 S_S^T W_S`.
    pub fn phantom_classifiers(&self, w_seen: &Array2<f64>) -> Result<Array2<f64>> {
        if w_seen.nrows() != self.s_seen.nrows() {
            return Err(Error::Shape(format!(
                "{} seen classifier rows for {} similarity rows",
                w_seen.nrows(),
                self.s_seen.nrows()
            )));
        }
        let p = self.n_phantoms();
        let ss = to_dmatrix(&self.s_seen);
        let ws = to_dmatrix(w_seen);
        let mut a = ss.transpose() * &ss;
        for k in 0..p {
            a[(k, k)] += self.ridge;
        }
        let b = ss.transpose() * ws;
        let guidance = "normal matrix is singular; set ridge > 0";
        let chol = a.clone().cholesky().ok_or_else(|| Error::Singular(guidance.into()))?;
        let diag: Vec<f64> = (0..p).map(|k| chol.l_dirty()[(k, k)].powi(2)).collect();
        let max = diag.iter().copied().fold(0.0, f64::max);
        let min = diag.iter().copied().fold(f64::INFINITY, f64::min);
        if !(min > max * 1e-13) {
            return Err(Error::Singular(guidance.into()));
        }
        let v = chol.solve(&b);
        let out = Array2::from_shape_fn((v.nrows(), v.ncols()), |(i, j)| v[(i, j)]);
        if out.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("phantom classifiers".into()));
        }
        Ok(out)
    }
}

fn to_dmatrix(m: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]])
}

/// Unseen classifier rows `W_U = S_U V`.
pub fn sync_synthesize(sm: &SyncModel, w_seen: &Array2<f64>) -> Result<Array2<f64>> {
    let v = sm.phantom_classifiers(w_seen)?;
    Ok(sm.s_unseen.dot(&v))
}

/// Full classifier matrix with phantoms placed at the seen-class embeddings.
pub fn sync_classifier(
    labels: &LabelSpace,
    emb: &EmbeddingTable,
    w_seen: &Array2<f64>,
    mode: Similarity,
    row_normalize: bool,
    ridge: f64,
) -> Result<ClassifierMatrix> {
    let seen = emb.vectors.select(ndarray::Axis(0), labels.seen());
    let unseen = emb.vectors.select(ndarray::Axis(0), labels.unseen());
    let s_seen = build_similarity(seen.view(), seen.view(), mode, row_normalize)?;
    let s_unseen = build_similarity(unseen.view(), seen.view(), mode, row_normalize)?;
    let sm = SyncModel::new(s_seen, s_unseen, ridge)?;
    let w_unseen = sync_synthesize(&sm, w_seen)?;
    ClassifierMatrix::assemble(labels, w_seen, &w_unseen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identity_similarity_recovers_seen_rows() {
        let ws = array![[1.0, 2.0], [-0.5, 0.3], [0.0, 1.0]];
        let su = array![[0.2, 0.3, 0.5]];
        let sm = SyncModel::new(Array2::eye(3), su.clone(), 1e-6).unwrap();
        let wu = sync_synthesize(&sm, &ws).unwrap();
        let expect = su.dot(&ws);
        for (a, b) in wu.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_unseen_similarity_gives_zero_rows() {
        let sm = SyncModel::new(Array2::eye(2), Array2::zeros((1, 2)), 1e-6).unwrap();
        let wu = sync_synthesize(&sm, &array![[1.0], [2.0]]).unwrap();
        assert_eq!(wu, array![[0.0]]);
    }

    #[test]
    fn singular_without_ridge_is_rejected() {
        let ss = array![[1.0, 1.0], [1.0, 1.0]];
        let sm = SyncModel::new(ss, Array2::zeros((1, 2)), 0.0).unwrap();
        let err = sync_synthesize(&sm, &array![[1.0], [2.0]]).unwrap_err();
        assert!(err.to_string().contains("ridge > 0"));
    }

    #[test]
    fn similarity_examples() {
        let a = array![[1.0, 0.0], [0.0, 2.0]];
        let p = array![[2.0, 0.0]];
        let s = build_similarity(a.view(), p.view(), Similarity::Cosine, false).unwrap();
        assert_eq!(s[[0, 0]], 1.0);
        let sigma = 0.7;
        let q = array![[0.0, 0.0]];
        let r = array![[0.0, 0.0], [sigma * 2f64.sqrt(), 0.0]];
        let s = build_similarity(r.view(), q.view(), Similarity::Rbf { bandwidth: sigma }, false).unwrap();
        assert_eq!(s[[0, 0]], 1.0);
        assert!((s[[1, 0]] - (-1f64).exp()).abs() < 1e-12);
        let z = array![[0.0, 0.0]];
        assert!(build_similarity(z.view(), p.view(), Similarity::Cosine, false).is_err());
    }

    #[test]
    fn row_normalize_sums_to_one() {
        let a = array![[1.0, 0.2], [0.3, 1.0], [0.5, 0.5]];
        let p = array![[1.0, 0.0], [0.0, 1.0], [0.7, 0.7]];
        let s = build_similarity(a.view(), p.view(), Similarity::Cosine, true).unwrap();
        for r in s.rows() {
            assert!((r.sum() - 1.0).abs() < 1e-9);
        }
    }
}
