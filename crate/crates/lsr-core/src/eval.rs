//! Ranking metrics and paired significance testing.
//!
//! A query is evaluated when it appears in the run and has at least one
//! relevant (rel > 0) judgment; queries failing that are counted as skipped
//! rather than scored, so recall and NDCG normalizers are always defined.
//! NDCG uses the exponential gain `2^rel - 1` with a `1/log2(rank+1)`
//! discount, normalized by the ideal DCG from the qrels.

use std::collections::BTreeMap;

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{Qrels, RunFile};
use crate::{Error, Result};

/// A metric mean with its per-query breakdown (the per-query values feed
/// the paired t-test).
#[derive(Debug, Clone)]
pub struct MetricSummary {
    pub mean: f64,
    pub per_query: BTreeMap<String, f64>,
    /// Queries in the run without any relevant judgment.
    pub skipped: usize,
}

impl MetricSummary {
    pub fn evaluated(&self) -> usize {
        self.per_query.len()
    }
}

fn summarize<F>(run: &RunFile, qrels: &Qrels, score_query: F) -> MetricSummary
where
    F: Fn(&str, &[(String, f64)]) -> f64,
{
    let mut per_query = BTreeMap::new();
    let mut skipped = 0;
    for qid in run.queries() {
        if qrels.relevant_docs(qid).is_empty() {
            skipped += 1;
            continue;
        }
        let ranked = run.ranking(qid).expect("query came from the run");
        per_query.insert(qid.to_string(), score_query(qid, ranked));
    }
    let mean = if per_query.is_empty() {
        0.0
    } else {
        per_query.values().sum::<f64>() / per_query.len() as f64
    };
    MetricSummary {
        mean,
        per_query,
        skipped,
    }
}

/// Mean reciprocal rank of the first relevant document within the top k
/// (0 when none of the top k is relevant).
pub fn mrr_at_k(run: &RunFile, qrels: &Qrels, k: usize) -> MetricSummary {
    summarize(run, qrels, |qid, ranked| {
        for (i, (doc, _)) in ranked.iter().take(k).enumerate() {
            if qrels.is_relevant(qid, doc) {
                return 1.0 / (i + 1) as f64;
            }
        }
        0.0
    })
}

/// Fraction of a query's relevant documents present in the top k.
pub fn recall_at_k(run: &RunFile, qrels: &Qrels, k: usize) -> MetricSummary {
    summarize(run, qrels, |qid, ranked| {
        let relevant = qrels.relevant_docs(qid);
        let hit = ranked
            .iter()
            .take(k)
            .filter(|(doc, _)| qrels.is_relevant(qid, doc))
            .count();
        hit as f64 / relevant.len() as f64
    })
}

fn dcg(gains: impl Iterator<Item = u32>) -> f64 {
    gains
        .enumerate()
        .map(|(i, rel)| {
            let gain = (1u64 << rel) as f64 - 1.0; // 2^rel - 1
            gain / ((i + 2) as f64).log2()
        })
        .sum()
}

/// Normalized discounted cumulative gain at k with exponential gains.
pub fn ndcg_at_k(run: &RunFile, qrels: &Qrels, k: usize) -> MetricSummary {
    summarize(run, qrels, |qid, ranked| {
        let got = dcg(ranked
            .iter()
            .take(k)
            .map(|(doc, _)| qrels.relevance(qid, doc).unwrap_or(0)));
        let mut ideal: Vec<u32> = qrels
            .relevant_docs(qid)
            .into_iter()
            .map(|(_, r)| r)
            .collect();
        ideal.sort_unstable_by(|a, b| b.cmp(a));
        let ideal_dcg = dcg(ideal.into_iter().take(k));
        if ideal_dcg == 0.0 {
            0.0
        } else {
            got / ideal_dcg
        }
    })
}

/// Two-sided paired Student t-test result.
#[derive(Debug, Clone, Copy)]
pub struct TTestResult {
    pub t: f64,
    pub p: f64,
    pub n: usize,
    /// p <= 0.05
    pub significant: bool,
}

/// Two-sided paired t-test over per-query metric values. The query sets
/// must match and contain at least two queries.
///
/// Degenerate variance is handled by convention: all-zero differences give
/// p = 1; a nonzero constant difference gives p = 0.
pub fn paired_t_test(
    a: &BTreeMap<String, f64>,
    b: &BTreeMap<String, f64>,
) -> Result<TTestResult> {
    if a.len() != b.len() || a.keys().zip(b.keys()).any(|(x, y)| x != y) {
        return Err(Error::Contract(
            "paired t-test requires identical query sets".into(),
        ));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Contract(format!(
            "paired t-test requires n >= 2 queries, got {n}"
        )));
    }
    let diffs: Vec<f64> = a.values().zip(b.values()).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n as f64 - 1.0);

    let (t, p) = if var == 0.0 {
        if mean == 0.0 {
            (0.0, 1.0)
        } else {
            (f64::INFINITY * mean.signum(), 0.0)
        }
    } else {
        let t = mean / (var / n as f64).sqrt();
        let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64)
            .map_err(|e| Error::Contract(format!("t distribution: {e}")))?;
        let p = 2.0 * (1.0 - dist.cdf(t.abs()));
        (t, p.clamp(0.0, 1.0))
    };
    Ok(TTestResult {
        t,
        p,
        n,
        significant: p <= 0.05,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    fn simple_qrels(pairs: &[(&str, &str, u32)]) -> Qrels {
        let mut q = Qrels::new();
        for (qid, doc, rel) in pairs {
            q.insert(qid, doc, *rel).unwrap();
        }
        q
    }

    fn run_of(rankings: &[(&str, &[&str])]) -> RunFile {
        let mut run = RunFile::new("test");
        for (qid, docs) in rankings {
            let ranked: Vec<(String, f64)> = docs
                .iter()
                .enumerate()
                .map(|(i, d)| (d.to_string(), (docs.len() - i) as f64))
                .collect();
            run.set_ranking(qid, ranked).unwrap();
        }
        run
    }

    #[test]
    fn mrr_first_rank_everywhere_is_one() {
        let qrels = simple_qrels(&[("q1", "d1", 1), ("q2", "d9", 1)]);
        let run = run_of(&[("q1", &["d1", "d2"]), ("q2", &["d9", "d1"])]);
        let m = mrr_at_k(&run, &qrels, 10);
        assert_eq!(m.mean, 1.0);
        assert_eq!(m.evaluated(), 2);
    }

    #[test]
    fn mrr_single_query_rank_three() {
        let qrels = simple_qrels(&[("q1", "d3", 1)]);
        let run = run_of(&[("q1", &["d1", "d2", "d3"])]);
        close(mrr_at_k(&run, &qrels, 10).mean, 1.0 / 3.0, 1e-12);
    }

    #[test]
    fn mrr_three_query_hand_case() {
        // ranks 1, 4, and not-retrieved: (1 + 0.25 + 0)/3
        let qrels = simple_qrels(&[("q1", "r", 1), ("q2", "r", 1), ("q3", "r", 1)]);
        let run = run_of(&[
            ("q1", &["r", "x", "y", "z"]),
            ("q2", &["x", "y", "z", "r"]),
            ("q3", &["x", "y", "z", "w"]),
        ]);
        close(mrr_at_k(&run, &qrels, 10).mean, (1.0 + 0.25) / 3.0, 1e-12);
    }

    #[test]
    fn mrr_respects_cutoff() {
        let qrels = simple_qrels(&[("q1", "r", 1)]);
        let run = run_of(&[("q1", &["a", "b", "r"])]);
        assert_eq!(mrr_at_k(&run, &qrels, 2).mean, 0.0);
        close(mrr_at_k(&run, &qrels, 3).mean, 1.0 / 3.0, 1e-12);
    }

    #[test]
    fn recall_examples() {
        let qrels = simple_qrels(&[("q1", "a", 1), ("q1", "b", 1)]);
        let run = run_of(&[("q1", &["a", "b"])]);
        assert_eq!(recall_at_k(&run, &qrels, 10).mean, 1.0);
        let run = run_of(&[("q1", &["a", "x"])]);
        assert_eq!(recall_at_k(&run, &qrels, 10).mean, 0.5);
    }

    #[test]
    fn recall_matches_set_intersection_oracle() {
        let qrels = simple_qrels(&[
            ("q1", "a", 1),
            ("q1", "b", 2),
            ("q2", "c", 1),
            ("q3", "d", 1),
            ("q3", "e", 1),
            ("q3", "f", 1),
        ]);
        let run = run_of(&[
            ("q1", &["b", "x", "a"]),
            ("q2", &["x", "y"]),
            ("q3", &["d", "f", "x"]),
        ]);
        let m = recall_at_k(&run, &qrels, 3);
        // oracle: per-query |relevant ∩ top-3| / |relevant|
        let want = (2.0 / 2.0 + 0.0 / 1.0 + 2.0 / 3.0) / 3.0;
        close(m.mean, want, 1e-12);
    }

    #[test]
    fn ndcg_perfect_binary_ranking_is_one() {
        let qrels = simple_qrels(&[("q1", "a", 1), ("q1", "b", 1)]);
        let run = run_of(&[("q1", &["a", "b", "x"])]);
        close(ndcg_at_k(&run, &qrels, 10).mean, 1.0, 1e-12);
    }

    #[test]
    fn ndcg_single_relevant_at_rank_two() {
        let qrels = simple_qrels(&[("q1", "r", 1)]);
        let run = run_of(&[("q1", &["x", "r"])]);
        close(ndcg_at_k(&run, &qrels, 10).mean, 1.0 / 3f64.log2(), 1e-9);
    }

    #[test]
    fn ndcg_graded_case_matches_permutation_oracle() {
        // rel = {3, 1}: brute-force the best ordering for the normalizer.
        let qrels = simple_qrels(&[("q1", "hi", 3), ("q1", "lo", 1)]);
        let run = run_of(&[("q1", &["lo", "hi"])]);
        let got = ndcg_at_k(&run, &qrels, 10).mean;

        let gain = |rel: u32| (2f64.powi(rel as i32)) - 1.0;
        let dcg_of = |rels: &[u32]| -> f64 {
            rels.iter()
                .enumerate()
                .map(|(i, &r)| gain(r) / ((i + 2) as f64).log2())
                .sum()
        };
        // all permutations of the two judged docs
        let ideal = dcg_of(&[3, 1]).max(dcg_of(&[1, 3]));
        let want = dcg_of(&[1, 3]) / ideal;
        close(got, want, 1e-12);
    }

    #[test]
    fn unjudged_queries_are_skipped_and_counted() {
        let qrels = simple_qrels(&[("q1", "a", 1), ("q2", "b", 0)]);
        let run = run_of(&[("q1", &["a"]), ("q2", &["b"]), ("q3", &["c"])]);
        let m = mrr_at_k(&run, &qrels, 10);
        // q2 has only rel=0 judgments, q3 has none: both skipped.
        assert_eq!(m.evaluated(), 1);
        assert_eq!(m.skipped, 2);
        assert_eq!(m.mean, 1.0);
    }

    #[test]
    fn metrics_stay_in_unit_interval() {
        let qrels = simple_qrels(&[("q1", "a", 3), ("q1", "b", 1), ("q2", "c", 2)]);
        let run = run_of(&[("q1", &["x", "b", "a"]), ("q2", &["c", "x"])]);
        for m in [
            mrr_at_k(&run, &qrels, 10),
            recall_at_k(&run, &qrels, 10),
            ndcg_at_k(&run, &qrels, 10),
        ] {
            assert!((0.0..=1.0).contains(&m.mean));
            for v in m.per_query.values() {
                assert!((0.0..=1.0).contains(v));
            }
        }
    }

    fn map_of(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn t_test_identical_inputs_give_p_one() {
        let a = map_of(&[("q1", 0.5), ("q2", 0.25), ("q3", 0.75)]);
        let r = paired_t_test(&a, &a.clone()).unwrap();
        assert_eq!(r.p, 1.0);
        assert!(!r.significant);
    }

    #[test]
    fn t_test_constant_positive_difference_is_certain() {
        let a: BTreeMap<String, f64> = (0..10).map(|i| (format!("q{i}"), 0.6)).collect();
        let b: BTreeMap<String, f64> = (0..10).map(|i| (format!("q{i}"), 0.4)).collect();
        let r = paired_t_test(&a, &b).unwrap();
        assert!(r.p < 0.05);
        assert!(r.significant);
    }

    #[test]
    fn t_test_matches_tabulated_critical_value() {
        // t statistic from first principles on a hand case.
        let diffs = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // mean 3.5
        let n = diffs.len() as f64;
        let mean = 3.5;
        let sd = (diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0)).sqrt();
        let t_expected = mean / (sd / n.sqrt());

        let a: BTreeMap<String, f64> = diffs
            .iter()
            .enumerate()
            .map(|(i, &d)| (format!("q{i}"), d))
            .collect();
        let b: BTreeMap<String, f64> = (0..6).map(|i| (format!("q{i}"), 0.0)).collect();
        let r = paired_t_test(&a, &b).unwrap();
        close(r.t, t_expected, 1e-12);
        assert!(r.p < 0.05);

        // Direct CDF check at the tabulated two-sided 5% point for df = 5.
        let dist = StudentsT::new(0.0, 1.0, 5.0).unwrap();
        let p_at_crit = 2.0 * (1.0 - dist.cdf(2.570582));
        close(p_at_crit, 0.05, 1e-4);
    }

    #[test]
    fn t_test_requires_matching_queries() {
        let a = map_of(&[("q1", 0.5), ("q2", 0.25)]);
        let b = map_of(&[("q1", 0.5), ("q3", 0.25)]);
        assert!(paired_t_test(&a, &b).is_err());
        let short = map_of(&[("q1", 0.5)]);
        assert!(paired_t_test(&short, &short.clone()).is_err());
    }

    #[test]
    fn doc_relabeling_leaves_metrics_unchanged() {
        let qrels1 = simple_qrels(&[("q1", "a", 2), ("q1", "b", 1)]);
        let run1 = run_of(&[("q1", &["b", "a", "c"])]);
        let qrels2 = simple_qrels(&[("q1", "XX", 2), ("q1", "YY", 1)]);
        let run2 = run_of(&[("q1", &["YY", "XX", "ZZ"])]);
        for (m1, m2) in [
            (mrr_at_k(&run1, &qrels1, 10), mrr_at_k(&run2, &qrels2, 10)),
            (
                recall_at_k(&run1, &qrels1, 10),
                recall_at_k(&run2, &qrels2, 10),
            ),
            (ndcg_at_k(&run1, &qrels1, 10), ndcg_at_k(&run2, &qrels2, 10)),
        ] {
            close(m1.mean, m2.mean, 1e-15);
        }
    }
}
