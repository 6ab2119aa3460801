use ctxzsl::kgraph::LabelSpace;
use ctxzsl::zsl::{conse_infer, conse_scores, sync_synthesize, unary_log_probs, ClassifierMatrix, EmbeddingTable, SyncModel};
use ndarray::{Array1, Array2};
use proptest::prelude::*;

const C: usize = 6;
const D: usize = 4;

fn matrix(r: usize, c: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-2.0..2.0f64, r * c).prop_map(move |v| Array2::from_shape_vec((r, c), v).unwrap())
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b })
}

proptest! {
    #[test]
    fn log_probs_ignore_a_shared_row_offset(
        w in matrix(C, D),
        f in prop::collection::vec(-2.0..2.0f64, D),
        offset in prop::collection::vec(-3.0..3.0f64, D),
    ) {
        let all: Vec<usize> = (0..C).collect();
        let shifted = &w + &Array1::from(offset).insert_axis(ndarray::Axis(0));
        let a = unary_log_probs(&ClassifierMatrix::new(w).unwrap(), &f, &all).unwrap();
        let b = unary_log_probs(&ClassifierMatrix::new(shifted).unwrap(), &f, &all).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn restriction_preserves_the_argmax(
        w in matrix(C, D),
        f in prop::collection::vec(-2.0..2.0f64, D),
        mask in prop::collection::vec(any::<bool>(), C),
    ) {
        let restrict: Vec<usize> = (0..C).filter(|&c| mask[c]).collect();
        prop_assume!(!restrict.is_empty());
        let w = ClassifierMatrix::new(w).unwrap();
        let all: Vec<usize> = (0..C).collect();
        let full = unary_log_probs(&w, &f, &all).unwrap();
        let sub = unary_log_probs(&w, &f, &restrict).unwrap();
        let from_full: Vec<f64> = restrict.iter().map(|&c| full[c]).collect();
        prop_assert_eq!(restrict[argmax(&from_full)], restrict[argmax(&sub)]);
    }

    #[test]
    fn conse_ignores_positive_rescaling(emb in matrix(C, D), p in prop::collection::vec(0.01..1.0f64, 3)) {
        let labels = LabelSpace::new(
            (0..C).map(|i| format!("k{i}")).collect(),
            (0..C).map(|i| i < 3).collect(),
        )
        .unwrap();
        prop_assume!(emb.rows().into_iter().all(|r| r.dot(&r) > 1e-6));
        let emb = EmbeddingTable::new(emb).unwrap();
        let all: Vec<usize> = (0..C).collect();
        let doubled: Vec<f64> = p.iter().map(|v| 2.0 * v).collect();
        let Ok((cos, f)) = conse_scores(&p, &emb, &labels, &all, None) else { return Ok(()); };
        let (cos2, f2) = conse_scores(&doubled, &emb, &labels, &all, None).unwrap();
        prop_assert_eq!(&f * 2.0, f2);
        prop_assert_eq!(cos, cos2);
        prop_assert_eq!(
            conse_infer(&p, &emb, &labels, &all, None).unwrap().0,
            conse_infer(&doubled, &emb, &labels, &all, None).unwrap().0
        );
    }

    #[test]
    fn sync_reproduces_seen_rows_from_copied_similarities(
        s_seen in matrix(5, 5),
        w_seen in matrix(5, D),
        pick in prop::collection::vec(0usize..5, 1..4),
    ) {
        let gram = s_seen.t().dot(&s_seen);
        let min_pivot = nalgebra::DMatrix::from_fn(5, 5, |i, j| gram[[i, j]])
            .cholesky()
            .map(|c| (0..5).map(|k| c.l()[(k, k)]).fold(f64::INFINITY, f64::min));
        prop_assume!(matches!(min_pivot, Some(v) if v > 0.1));
        let s_unseen = Array2::from_shape_fn((pick.len(), 5), |(r, c)| s_seen[[pick[r], c]]);
        let sm = SyncModel::new(s_seen, s_unseen, 0.0).unwrap();
        let w_u = sync_synthesize(&sm, &w_seen).unwrap();
        for (r, &src) in pick.iter().enumerate() {
            for c in 0..D {
                prop_assert!((w_u[[r, c]] - w_seen[[src, c]]).abs() <= 1e-8);
            }
        }
    }
}
