//! Property tests for the spec-level invariants that hold over arbitrary
//! inputs: pooling, scoring, regularizer homogeneity, index exactness and
//! the metric ranges.

use proptest::prelude::*;

use lsr_core::data::{Qrels, RunFile};
use lsr_core::index::{brute_force_search, build_index, estimate_rflops};
use lsr_core::linalg::Matrix;
use lsr_core::objectives::{flops_reg, l1_reg, lambda_at, RegularizerConfig};
use lsr_core::sparse::{pool, score, SparseVector};

fn sparse_vector(vocab: u32) -> impl Strategy<Value = SparseVector> {
    proptest::collection::btree_map(0..vocab, 0.01f64..3.0, 0..(vocab as usize / 2))
        .prop_map(|entries| {
            SparseVector::new(entries.into_iter().collect()).expect("sorted positive entries")
        })
}

fn logit_matrix() -> impl Strategy<Value = (Matrix, Vec<u8>)> {
    (1usize..6, 1usize..8).prop_flat_map(|(rows, cols)| {
        let data = proptest::collection::vec(-2.0f64..2.0, rows * cols);
        let mask = proptest::collection::vec(0u8..2, rows);
        (data, mask).prop_map(move |(d, m)| (Matrix::from_vec(rows, cols, d).unwrap(), m))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pooled_weights_are_positive_and_scores_nonnegative(
        q in sparse_vector(30),
        d in sparse_vector(30),
    ) {
        for (_, w) in q.entries() {
            prop_assert!(*w > 0.0);
        }
        prop_assert!(score(&q, &d) >= 0.0);
        // symmetry
        prop_assert_eq!(score(&q, &d), score(&d, &q));
    }

    #[test]
    fn pooling_is_permutation_invariant((logits, mask) in logit_matrix()) {
        let base = pool(&logits, &mask).unwrap();
        // rotate the rows by one
        let rows = logits.rows();
        let mut rotated = Matrix::zeros(rows, logits.cols());
        let mut rotated_mask = vec![0u8; rows];
        for r in 0..rows {
            let src = (r + 1) % rows;
            rotated.row_mut(r).copy_from_slice(logits.row(src));
            rotated_mask[r] = mask[src];
        }
        let after = pool(&rotated, &rotated_mask).unwrap();
        prop_assert_eq!(base, after);
    }

    #[test]
    fn pooling_support_matches_positive_unmasked_columns((logits, mask) in logit_matrix()) {
        let pooled = pool(&logits, &mask).unwrap();
        let mut expected = 0usize;
        for c in 0..logits.cols() {
            let positive = (0..logits.rows())
                .any(|r| mask[r] != 0 && logits.get(r, c) > 0.0);
            if positive {
                expected += 1;
            }
        }
        prop_assert_eq!(pooled.support_size(), expected);
        prop_assert!(pooled.support_size() <= logits.cols());
    }

    #[test]
    fn raising_a_logit_never_lowers_its_pooled_weight(
        (logits, mask) in logit_matrix(),
        bump in 0.0f64..3.0,
    ) {
        if mask.iter().all(|&m| m == 0) {
            return Ok(());
        }
        let row = mask.iter().position(|&m| m != 0).unwrap();
        let col = 0usize;
        let before = pool(&logits, &mask).unwrap().to_dense(logits.cols());
        let mut bumped = logits.clone();
        bumped.set(row, col, bumped.get(row, col) + bump);
        let after = pool(&bumped, &mask).unwrap().to_dense(logits.cols());
        prop_assert!(after[col] >= before[col] - 1e-15);
    }

    #[test]
    fn regularizer_homogeneity(batch in proptest::collection::vec(sparse_vector(20), 1..5)) {
        let scaled: Vec<SparseVector> = batch
            .iter()
            .map(|v| {
                let entries = v.entries().iter().map(|&(i, w)| (i, 2.0 * w)).collect();
                SparseVector::new(entries).unwrap()
            })
            .collect();
        let l1 = l1_reg(&batch);
        let l1x2 = l1_reg(&scaled);
        prop_assert!((l1x2 - 2.0 * l1).abs() < 1e-9 * (1.0 + l1));

        let fl = flops_reg(&batch, true).unwrap();
        let flx2 = flops_reg(&scaled, true).unwrap();
        prop_assert!((flx2 - 4.0 * fl).abs() < 1e-9 * (1.0 + fl));
    }

    #[test]
    fn lambda_ramp_monotone(ramp in 1usize..1000, steps in 0usize..2000) {
        let cfg = RegularizerConfig { ramp_steps: ramp, ..RegularizerConfig::default() };
        let (a, _) = lambda_at(steps, &cfg);
        let (b, _) = lambda_at(steps + 1, &cfg);
        prop_assert!(b >= a);
        let (full, _) = lambda_at(ramp, &cfg);
        prop_assert!((full - cfg.lambda_q).abs() < 1e-18);
    }

    #[test]
    fn index_search_equals_brute_force(
        docs in proptest::collection::vec(sparse_vector(25), 1..30),
        query in sparse_vector(25),
        k in 1usize..20,
    ) {
        let corpus: Vec<(String, SparseVector)> = docs
            .into_iter()
            .enumerate()
            .map(|(i, v)| (format!("d{i:03}"), v))
            .collect();
        let index = build_index(corpus.clone(), 25, 0.0).unwrap();
        let fast = index.search(&query, k);
        let slow = brute_force_search(&corpus, &query, k);
        prop_assert_eq!(fast.len(), slow.len());
        for ((da, sa), (db, sb)) in fast.iter().zip(&slow) {
            prop_assert_eq!(da, db);
            prop_assert!((sa - sb).abs() < 1e-9);
        }
    }

    #[test]
    fn rflops_bounded_by_query_support(
        docs in proptest::collection::vec(sparse_vector(15), 1..15),
        queries in proptest::collection::vec(sparse_vector(15), 1..8),
    ) {
        let corpus: Vec<(String, SparseVector)> = docs
            .into_iter()
            .enumerate()
            .map(|(i, v)| (format!("d{i}"), v))
            .collect();
        let index = build_index(corpus, 15, 0.0).unwrap();
        let est = estimate_rflops(&index, &queries).unwrap();
        prop_assert!(est >= 0.0);
        prop_assert!(est <= 15.0 + 1e-12);
    }

    #[test]
    fn metrics_in_unit_interval_under_random_runs(
        ranks in proptest::collection::vec(0usize..10, 1..6),
    ) {
        // one query per case: a relevant doc planted at a random rank (or
        // absent when the rank exceeds the list)
        let mut qrels = Qrels::new();
        let mut run = RunFile::new("prop");
        for (qi, &rank) in ranks.iter().enumerate() {
            let qid = format!("q{qi}");
            qrels.insert(&qid, "rel", 1).unwrap();
            let mut ranked = Vec::new();
            for pos in 0..5usize {
                let doc = if pos == rank { "rel".to_string() } else { format!("f{pos}") };
                ranked.push((doc, (5 - pos) as f64));
            }
            run.set_ranking(&qid, ranked).unwrap();
        }
        for m in [
            lsr_core::eval::mrr_at_k(&run, &qrels, 10),
            lsr_core::eval::recall_at_k(&run, &qrels, 10),
            lsr_core::eval::ndcg_at_k(&run, &qrels, 10),
        ] {
            prop_assert!((0.0..=1.0).contains(&m.mean));
        }
    }
}
