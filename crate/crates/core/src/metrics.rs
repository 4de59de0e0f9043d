//! Ranking metrics over per-query scored document lists.
//!
//! Labels follow the corpus convention: 1 = NR, 2 = SR, 3 = MR. "Relevant"
//! means label ≥ 2.
//!
//! | metric    | per query                                             | queries counted     |
//! | --------- | ----------------------------------------------------- | ------------------- |
//! | P_mr@k    | 1 if the MR document is in the top k                  | with an MR document |
//! | P_r@5     | relevant documents in the top 5, divided by 5         | all                 |
//! | NDCG@5    | DCG@5 / IDCG, gain `2^(y−1) − 1`, IDCG over the full list | all             |
//! | MAP       | mean precision at the rank of each relevant document  | with a relevant doc |
//! | MRR_mr    | 1 / rank of the MR document                           | with an MR document |
//! | MRR_r     | 1 / rank of the first relevant document               | with a relevant doc |

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{MR, SR};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub doc_id: String,
    pub score: f64,
    pub label: u8,
}

/// Documents of one query, by descending score with ties broken by ascending
/// document id.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query_id: String,
    pub entries: Vec<RankedEntry>,
}

impl RankedList {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of MR entries; more than one is a data problem; MR metrics use
    /// the first.
    pub fn mr_count(&self) -> usize {
        self.entries.iter().filter(|e| e.label == MR).count()
    }

    fn labels(&self) -> impl Iterator<Item = u8> + '_ {
        self.entries.iter().map(|e| e.label)
    }
}

fn ranking_order(a: &RankedEntry, b: &RankedEntry) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.doc_id.cmp(&b.doc_id))
}

pub fn rank(query_id: &str, scored: impl IntoIterator<Item = (String, f64, u8)>) -> RankedList {
    let mut entries: Vec<RankedEntry> = scored
        .into_iter()
        .map(|(doc_id, score, label)| RankedEntry { doc_id, score, label })
        .collect();
    entries.sort_by(ranking_order);
    RankedList {
        query_id: query_id.to_string(),
        entries,
    }
}

/// 1-based rank of the first entry satisfying `pred`.
fn first_rank(rl: &RankedList, pred: impl Fn(u8) -> bool) -> Option<usize> {
    rl.labels().position(pred).map(|i| i + 1)
}

fn is_relevant(label: u8) -> bool {
    label >= SR
}

/// `None` when the list has no MR document.
pub fn precision_mr_at_k(rl: &RankedList, k: usize) -> Option<f64> {
    first_rank(rl, |l| l == MR).map(|rank| if rank <= k { 1.0 } else { 0.0 })
}

/// Relevant documents among the top `k`, over `k` (even for shorter lists).
pub fn precision_r_at_k(rl: &RankedList, k: usize) -> f64 {
    rl.labels().take(k).filter(|&l| is_relevant(l)).count() as f64 / k as f64
}

pub fn precision_r_at_5(rl: &RankedList) -> f64 {
    precision_r_at_k(rl, 5)
}

fn gain(label: u8) -> f64 {
    (1u64 << label.saturating_sub(1)) as f64 - 1.0
}

fn dcg(labels: impl Iterator<Item = u8>, k: usize) -> f64 {
    labels
        .take(k)
        .enumerate()
        .map(|(i, l)| gain(l) / ((i + 2) as f64).log2())
        .sum()
}

/// NDCG@k; 0 when the query has no relevant document.
pub fn ndcg_at_k(rl: &RankedList, k: usize) -> f64 {
    let mut ideal: Vec<u8> = rl.labels().collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg = dcg(ideal.into_iter(), k);
    if idcg == 0.0 {
        0.0
    } else {
        dcg(rl.labels(), k) / idcg
    }
}

pub fn ndcg_at_5(rl: &RankedList) -> f64 {
    ndcg_at_k(rl, 5)
}

/// Average precision over the full list; `None` without relevant documents.
pub fn average_precision(rl: &RankedList) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, l) in rl.labels().enumerate() {
        if is_relevant(l) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

pub fn mrr_mr(rl: &RankedList) -> Option<f64> {
    first_rank(rl, |l| l == MR).map(|r| 1.0 / r as f64)
}

pub fn mrr_r(rl: &RankedList) -> Option<f64> {
    first_rank(rl, is_relevant).map(|r| 1.0 / r as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Metric {
    PMrAt1,
    PMrAt5,
    PrAt5,
    NdcgAt5,
    Map,
    MrrMr,
    MrrR,
}

impl Metric {
    pub const ALL: [Metric; 7] = [
        Metric::PMrAt1,
        Metric::PMrAt5,
        Metric::PrAt5,
        Metric::NdcgAt5,
        Metric::Map,
        Metric::MrrMr,
        Metric::MrrR,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Metric::PMrAt1 => "P_mr@1",
            Metric::PMrAt5 => "P_mr@5",
            Metric::PrAt5 => "P_r@5",
            Metric::NdcgAt5 => "NDCG@5",
            Metric::Map => "MAP",
            Metric::MrrMr => "MRR_mr",
            Metric::MrrR => "MRR_r",
        }
    }
}

/// Metric values for a single query; `None` where the query does not count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub query_id: String,
    pub n_docs: usize,
    pub p_mr_at_1: Option<f64>,
    pub p_mr_at_5: Option<f64>,
    pub p_r_at_5: Option<f64>,
    pub ndcg_at_5: Option<f64>,
    pub map: Option<f64>,
    pub mrr_mr: Option<f64>,
    pub mrr_r: Option<f64>,
}

impl QueryMetrics {
    pub fn get(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::PMrAt1 => self.p_mr_at_1,
            Metric::PMrAt5 => self.p_mr_at_5,
            Metric::PrAt5 => self.p_r_at_5,
            Metric::NdcgAt5 => self.ndcg_at_5,
            Metric::Map => self.map,
            Metric::MrrMr => self.mrr_mr,
            Metric::MrrR => self.mrr_r,
        }
    }
}

pub fn query_metrics(rl: &RankedList) -> QueryMetrics {
    QueryMetrics {
        query_id: rl.query_id.clone(),
        n_docs: rl.len(),
        p_mr_at_1: precision_mr_at_k(rl, 1),
        p_mr_at_5: precision_mr_at_k(rl, 5),
        p_r_at_5: Some(precision_r_at_5(rl)),
        ndcg_at_5: Some(ndcg_at_5(rl)),
        map: average_precision(rl),
        mrr_mr: mrr_mr(rl),
        mrr_r: mrr_r(rl),
    }
}

/// Query-averaged metrics. A metric with no contributing query reports 0 with
/// a count of 0.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub p_mr_at_1: f64,
    pub p_mr_at_5: f64,
    pub p_r_at_5: f64,
    pub ndcg_at_5: f64,
    pub map: f64,
    pub mrr_mr: f64,
    pub mrr_r: f64,
    /// Contributing queries, in [`Metric::ALL`] order.
    pub n_queries: [usize; 7],
}

impl MetricReport {
    pub fn get(&self, m: Metric) -> f64 {
        match m {
            Metric::PMrAt1 => self.p_mr_at_1,
            Metric::PMrAt5 => self.p_mr_at_5,
            Metric::PrAt5 => self.p_r_at_5,
            Metric::NdcgAt5 => self.ndcg_at_5,
            Metric::Map => self.map,
            Metric::MrrMr => self.mrr_mr,
            Metric::MrrR => self.mrr_r,
        }
    }

    fn set(&mut self, m: Metric, v: f64) {
        match m {
            Metric::PMrAt1 => self.p_mr_at_1 = v,
            Metric::PMrAt5 => self.p_mr_at_5 = v,
            Metric::PrAt5 => self.p_r_at_5 = v,
            Metric::NdcgAt5 => self.ndcg_at_5 = v,
            Metric::Map => self.map = v,
            Metric::MrrMr => self.mrr_mr = v,
            Metric::MrrR => self.mrr_r = v,
        }
    }

    pub fn count(&self, m: Metric) -> usize {
        let idx = Metric::ALL.iter().position(|&x| x == m).expect("metric listed");
        self.n_queries[idx]
    }

    /// `metric<TAB>value<TAB>n_queries`, one row per metric.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("metric\tvalue\tn_queries\n");
        for m in Metric::ALL {
            let _ = writeln!(out, "{}\t{}\t{}", m.name(), self.get(m), self.count(m));
        }
        out
    }
}

/// Unweighted mean of each metric over its contributing queries, folded in
/// input order.
pub fn aggregate(per_query: &[QueryMetrics]) -> Result<MetricReport> {
    if per_query.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let mut report = MetricReport::default();
    for (idx, m) in Metric::ALL.into_iter().enumerate() {
        let (sum, n) = per_query
            .iter()
            .filter_map(|q| q.get(m))
            .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
        report.set(m, if n > 0 { sum / n as f64 } else { 0.0 });
        report.n_queries[idx] = n;
    }
    Ok(report)
}

pub fn per_query_jsonl(per_query: &[QueryMetrics]) -> String {
    let mut out = String::new();
    for q in per_query {
        out.push_str(&serde_json::to_string(q).expect("metrics serialize"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::NR;

    /// Ranked list in the given order (scores strictly decreasing).
    fn listed(labels: &[u8]) -> RankedList {
        rank(
            "q",
            labels
                .iter()
                .enumerate()
                .map(|(i, &l)| (format!("d{i}"), 1.0 - i as f64 * 0.01, l)),
        )
    }

    #[test]
    fn tie_break_by_doc_id() {
        let rl = rank("q", vec![("b".into(), 0.5, NR), ("a".into(), 0.5, MR)]);
        assert_eq!(rl.entries[0].doc_id, "a");
    }

    #[test]
    fn sorted_input_is_unchanged() {
        let rl = listed(&[MR, SR, NR]);
        let again = rank("q", rl.entries.iter().map(|e| (e.doc_id.clone(), e.score, e.label)));
        assert_eq!(again, rl);
    }

    #[test]
    fn precision_mr_examples() {
        assert_eq!(precision_mr_at_k(&listed(&[MR]), 1), Some(1.0));
        assert_eq!(precision_mr_at_k(&listed(&[NR, NR, NR, NR, NR, MR]), 5), Some(0.0));
        assert_eq!(precision_mr_at_k(&listed(&[NR, MR, SR]), 2), Some(1.0));
        assert_eq!(precision_mr_at_k(&listed(&[NR, SR]), 2), None);
    }

    #[test]
    fn precision_r_examples() {
        assert!((precision_r_at_5(&listed(&[MR, SR, SR, NR, NR])) - 0.6).abs() < 1e-15);
        assert_eq!(precision_r_at_5(&listed(&[NR; 7])), 0.0);
        // One MR and no SR, ranked perfectly.
        assert!((precision_r_at_5(&listed(&[MR, NR, NR, NR, NR, NR])) - 0.2).abs() < 1e-15);
        assert!((precision_r_at_5(&listed(&[MR])) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg_at_5(&listed(&[MR, SR, NR, NR])), 1.0);
        assert_eq!(ndcg_at_5(&listed(&[NR, NR])), 0.0);
        let got = ndcg_at_5(&listed(&[SR, MR, NR, NR, NR]));
        let l3 = 3f64.log2();
        let want = (1.0 + 3.0 / l3) / (3.0 + 1.0 / l3);
        assert!((got - want).abs() < 1e-15);
    }

    #[test]
    fn ap_and_mrr_examples() {
        let rl = listed(&[MR]);
        assert_eq!(average_precision(&rl), Some(1.0));
        assert_eq!(mrr_mr(&rl), Some(1.0));
        assert_eq!(mrr_r(&rl), Some(1.0));

        let rl = listed(&[NR, NR, MR]);
        assert!((average_precision(&rl).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((mrr_mr(&rl).unwrap() - 1.0 / 3.0).abs() < 1e-15);

        let rl = listed(&[SR, NR, MR]);
        assert!((average_precision(&rl).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(mrr_r(&rl), Some(1.0));
        assert!((mrr_mr(&rl).unwrap() - 1.0 / 3.0).abs() < 1e-15);

        assert_eq!(average_precision(&listed(&[NR])), None);
    }

    #[test]
    fn aggregate_examples() {
        let q = |v: f64| QueryMetrics {
            query_id: "q".into(),
            n_docs: 1,
            p_mr_at_1: Some(v),
            p_mr_at_5: Some(v),
            p_r_at_5: Some(v),
            ndcg_at_5: Some(v),
            map: Some(v),
            mrr_mr: Some(v),
            mrr_r: Some(v),
        };
        let r = aggregate(&[q(1.0), q(0.0), q(1.0)]).unwrap();
        assert!((r.p_mr_at_1 - 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(aggregate(&[]), Err(Error::EmptyEvaluation)));

        // One query without any relevant document.
        let a = query_metrics(&listed(&[SR, MR, NR]));
        let b = query_metrics(&listed(&[NR, NR]));
        let r = aggregate(&[a.clone(), b]).unwrap();
        assert_eq!(r.count(Metric::Map), 1);
        assert_eq!(r.count(Metric::MrrR), 1);
        assert_eq!(r.count(Metric::PMrAt1), 1);
        assert_eq!(r.count(Metric::NdcgAt5), 2);
        assert_eq!(r.count(Metric::PrAt5), 2);
        assert_eq!(r.map, a.map.unwrap());
        assert_eq!(r.ndcg_at_5, a.ndcg_at_5.unwrap() / 2.0);
        assert_eq!(r.p_mr_at_1, 0.0);
        assert_eq!(r.mrr_mr, 0.5);

        let tsv = r.to_tsv();
        assert_eq!(tsv.lines().count(), 8);
        assert!(tsv.contains("MAP\t"));
        assert_eq!(per_query_jsonl(&[a]).lines().count(), 1);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_scored() -> impl Strategy<Value = Vec<(String, f64, u8)>> {
            prop::collection::vec((-1.0f64..1.0, 1u8..=3), 1..9).prop_map(|v| {
                v.into_iter()
                    .enumerate()
                    .map(|(i, (s, l))| (format!("d{i}"), s, l))
                    .collect()
            })
        }

        proptest! {
            #[test]
            fn permutation_does_not_change_ranking(scored in arb_scored(), seed in any::<u64>()) {
                use rand::seq::SliceRandom;
                use rand::SeedableRng;
                let mut shuffled = scored.clone();
                shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
                prop_assert_eq!(rank("q", scored), rank("q", shuffled));
            }

            #[test]
            fn metrics_invariant_under_monotone_maps(scored in arb_scored(), a in 0.1f64..5.0, b in -3.0f64..3.0) {
                let base = query_metrics(&rank("q", scored.clone()));
                let maps: [&dyn Fn(f64) -> f64; 3] = [
                    &|s| a * s + b,
                    &|s| s.exp(),
                    &|s| (s * 3.0).tanh() + s,
                ];
                for f in maps {
                    let moved = scored.iter().map(|(d, s, l)| (d.clone(), f(*s), *l));
                    prop_assert_eq!(&query_metrics(&rank("q", moved)), &base);
                }
            }

            #[test]
            fn metric_orderings(scored in arb_scored()) {
                let m = query_metrics(&rank("q", scored));
                if let (Some(p1), Some(p5)) = (m.p_mr_at_1, m.p_mr_at_5) {
                    prop_assert!(p1 <= p5);
                }
                if let (Some(rr), Some(rm)) = (m.mrr_r, m.mrr_mr) {
                    prop_assert!(rr >= rm);
                }
                let n = m.ndcg_at_5.unwrap();
                prop_assert!((0.0..=1.0 + 1e-12).contains(&n));
            }
        }
    }
}
