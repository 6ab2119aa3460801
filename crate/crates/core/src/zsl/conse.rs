use ndarray::Array1;

use crate::error::{Error, Result};
use crate::kgraph::LabelSpace;

use super::EmbeddingTable;

/// Convex combination of seen-class embeddings weighted by `seen_probs`
/// (aligned with `labels.seen()`). With `top_t`, only the `t` most probable
/// seen classes contribute.
pub fn conse_embedding(
    seen_probs: &[f64],
    emb: &EmbeddingTable,
    labels: &LabelSpace,
    top_t: Option<usize>,
) -> Result<Array1<f64>> {
    let seen = labels.seen();
    if seen_probs.len() != seen.len() {
        return Err(Error::Shape(format!(
            "{} seen probabilities for {} seen classes",
            seen_probs.len(),
            seen.len()
        )));
    }
    let mut order: Vec<usize> = (0..seen.len()).collect();
    if let Some(t) = top_t {
        order.sort_by(|&a, &b| {
            seen_probs[b]
                .partial_cmp(&seen_probs[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        order.truncate(t);
        order.sort_unstable();
    }
    let mut f = Array1::zeros(emb.dim());
    for t in order {
        f.scaled_add(seen_probs[t], &emb.row(seen[t]));
    }
    Ok(f)
}

/// Cosine similarity of the CONSE embedding to every class in `restrict`.
pub fn conse_scores(
    seen_probs: &[f64],
    emb: &EmbeddingTable,
    labels: &LabelSpace,
    restrict: &[usize],
    top_t: Option<usize>,
) -> Result<(Vec<f64>, Array1<f64>)> {
    let f = conse_embedding(seen_probs, emb, labels, top_t)?;
    let fnorm = f.dot(&f).sqrt();
    if !(fnorm > 0.0) {
        return Err(Error::Invalid("CONSE embedding is the zero vector".into()));
    }
    let mut cos = Vec::with_capacity(restrict.len());
    for &c in restrict {
        labels.check(c)?;
        let e = emb.row(c);
        let en = e.dot(&e).sqrt();
        if !(en > 0.0) {
            return Err(Error::Invalid(format!("class {c} has a zero-norm embedding")));
        }
        cos.push(f.dot(&e) / (fnorm * en));
    }
    Ok((cos, f))
}

/// Predicts the class in `restrict` whose embedding is closest in cosine to
/// the CONSE embedding; ties go to the lower class index.
pub fn conse_infer(
    seen_probs: &[f64],
    emb: &EmbeddingTable,
    labels: &LabelSpace,
    restrict: &[usize],
    top_t: Option<usize>,
) -> Result<(usize, Array1<f64>)> {
    if restrict.is_empty() {
        return Err(Error::Invalid("empty class restriction".into()));
    }
    let (cos, f) = conse_scores(seen_probs, emb, labels, restrict, top_t)?;
    let mut best = 0;
    for t in 1..restrict.len() {
        if cos[t] > cos[best] || (cos[t] == cos[best] && restrict[t] < restrict[best]) {
            best = t;
        }
    }
    Ok((restrict[best], f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn setup() -> (LabelSpace, EmbeddingTable) {
        let labels = LabelSpace::new(
            vec!["e1".into(), "e2".into(), "u".into()],
            vec![true, true, false],
        )
        .unwrap();
        let emb = EmbeddingTable::new(array![[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]]).unwrap();
        (labels, emb)
    }

    #[test]
    fn one_hot_returns_hot_class() {
        let (labels, emb) = setup();
        let (c, f) = conse_infer(&[0.0, 1.0], &emb, &labels, &labels.all(), None).unwrap();
        assert_eq!(c, 1);
        assert_eq!(f.to_vec(), vec![0.0, 1.0]);
    }

    #[test]
    fn hand_cosine() {
        let (labels, emb) = setup();
        let (c, _) = conse_infer(&[0.8, 0.2], &emb, &labels, labels.unseen(), None).unwrap();
        assert_eq!(c, 2);
        let (cos, _) = conse_scores(&[0.8, 0.2], &emb, &labels, &[2], None).unwrap();
        assert!((cos[0] - 0.64 / 0.68f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn uniform_tie_goes_to_lowest() {
        let (labels, emb) = setup();
        let (c, _) = conse_infer(&[0.5, 0.5], &emb, &labels, &[1, 0], None).unwrap();
        assert_eq!(c, 0);
    }

    #[test]
    fn top_t_truncates_and_zero_is_rejected() {
        let (labels, emb) = setup();
        let f = conse_embedding(&[0.3, 0.7], &emb, &labels, Some(1)).unwrap();
        assert_eq!(f.to_vec(), vec![0.0, 0.7]);
        assert!(conse_infer(&[0.0, 0.0], &emb, &labels, &[2], None).is_err());
    }
}
