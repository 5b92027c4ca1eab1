//! Evaluation metrics: per-class precision/recall aggregates, top-k ranking
//! scores, distribution distances and sequence-generation scores.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Per-behavior true-positive, false-positive and false-negative counts for
/// single-label predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionTally {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
    pub total: u64,
}

impl ConfusionTally {
    pub fn new(n_classes: usize) -> Self {
        Self {
            tp: vec![0; n_classes],
            fp: vec![0; n_classes],
            fn_: vec![0; n_classes],
            total: 0,
        }
    }

    pub fn from_pairs(predicted: &[u32], actual: &[u32], n_classes: usize) -> Self {
        let mut t = Self::new(n_classes);
        for (&p, &a) in predicted.iter().zip(actual) {
            t.add(p, a);
        }
        t
    }

    pub fn add(&mut self, predicted: u32, actual: u32) {
        let (p, a) = (predicted as usize, actual as usize);
        if p == a {
            self.tp[p] += 1;
        } else {
            self.fp[p] += 1;
            self.fn_[a] += 1;
        }
        self.total += 1;
    }

    pub fn n_classes(&self) -> usize {
        self.tp.len()
    }

    /// Recall of one class, `None` when the class never occurs.
    pub fn recall(&self, b: usize) -> Option<f64> {
        let d = self.tp[b] + self.fn_[b];
        (d > 0).then(|| self.tp[b] as f64 / d as f64)
    }

    pub fn precision(&self, b: usize) -> Option<f64> {
        let d = self.tp[b] + self.fp[b];
        (d > 0).then(|| self.tp[b] as f64 / d as f64)
    }

    pub fn support(&self, b: usize) -> u64 {
        self.tp[b] + self.fn_[b]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightingVariant {
    /// Per-class scores weighted by `TP_b`, normalized by the total number
    /// of predictions (precision) or labels (recall).
    #[default]
    PaperExact,
    /// Per-class scores weighted by class support `TP_b + FN_b`.
    SupportWeighted,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfusionMetrics {
    pub precision_macro: f64,
    pub recall_macro: f64,
    pub precision_weighted: f64,
    pub recall_weighted: f64,
    /// Classes whose precision had a zero denominator (counted as 0).
    pub undefined_precision: usize,
    /// Classes whose recall had a zero denominator (counted as 0).
    pub undefined_recall: usize,
}

/// Macro averages run over every class in the tally; undefined per-class
/// scores contribute 0.
pub fn confusion_metrics(t: &ConfusionTally, variant: WeightingVariant) -> ConfusionMetrics {
    let n = t.n_classes();
    let prec: Vec<Option<f64>> = (0..n).map(|b| t.precision(b)).collect();
    let rec: Vec<Option<f64>> = (0..n).map(|b| t.recall(b)).collect();
    let undefined_precision = prec.iter().filter(|p| p.is_none()).count();
    let undefined_recall = rec.iter().filter(|p| p.is_none()).count();
    let macro_of = |v: &[Option<f64>]| v.iter().map(|x| x.unwrap_or(0.0)).sum::<f64>() / n as f64;
    let predictions: u64 = (0..n).map(|b| t.tp[b] + t.fp[b]).sum();
    let labels: u64 = (0..n).map(|b| t.tp[b] + t.fn_[b]).sum();
    let ratio = |num: f64, den: u64| if den == 0 { 0.0 } else { num / den as f64 };
    let (precision_weighted, recall_weighted) = match variant {
        WeightingVariant::PaperExact => (
            ratio((0..n).map(|b| t.tp[b] as f64 * prec[b].unwrap_or(0.0)).sum(), predictions),
            ratio((0..n).map(|b| t.tp[b] as f64 * rec[b].unwrap_or(0.0)).sum(), labels),
        ),
        WeightingVariant::SupportWeighted => (
            ratio((0..n).map(|b| t.support(b) as f64 * prec[b].unwrap_or(0.0)).sum(), labels),
            ratio((0..n).map(|b| t.support(b) as f64 * rec[b].unwrap_or(0.0)).sum(), labels),
        ),
    };
    ConfusionMetrics {
        precision_macro: macro_of(&prec),
        recall_macro: macro_of(&rec),
        precision_weighted,
        recall_weighted,
        undefined_precision,
        undefined_recall,
    }
}

/// A true label and candidates ranked by descending score.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankedPrediction {
    pub actual: u32,
    pub ranked: Vec<u32>,
}

impl RankedPrediction {
    /// 1-based rank of the true label, if listed.
    pub fn rank(&self) -> Option<usize> {
        self.ranked.iter().position(|&b| b == self.actual).map(|i| i + 1)
    }
}

pub fn hit_rate(preds: &[RankedPrediction], k: usize) -> f64 {
    assert!(k >= 1, "k must be at least 1");
    if preds.is_empty() {
        return 0.0;
    }
    preds.iter().filter(|p| p.rank().is_some_and(|r| r <= k)).count() as f64 / preds.len() as f64
}

/// Single-relevant-item NDCG: `1/log2(rank+1)` within the cutoff.
pub fn ndcg(preds: &[RankedPrediction], k: usize) -> f64 {
    assert!(k >= 1, "k must be at least 1");
    if preds.is_empty() {
        return 0.0;
    }
    preds
        .iter()
        .map(|p| match p.rank() {
            Some(r) if r <= k => 1.0 / ((r + 1) as f64).log2(),
            _ => 0.0,
        })
        .sum::<f64>()
        / preds.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorOrder {
    ById,
    /// Descending frequency under the first distribution, ties by id.
    #[default]
    ByPFrequency,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistributionDistances {
    pub ks: f64,
    pub wd: f64,
    pub jsd: f64,
}

pub fn normalize_counts(counts: &[u64]) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    counts
        .iter()
        .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
        .collect()
}

/// KS and Wasserstein distance of the CDFs along the chosen behavior order,
/// and Jensen-Shannon divergence in bits.
pub fn distribution_distances(p: &[f64], q: &[f64], order: BehaviorOrder) -> Result<DistributionDistances> {
    if p.len() != q.len() {
        return Err(Error::InvalidConfig(format!(
            "distributions over {} and {} behaviors",
            p.len(),
            q.len()
        )));
    }
    let mut idx: Vec<usize> = (0..p.len()).collect();
    if order == BehaviorOrder::ByPFrequency {
        idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    }
    let (mut cp, mut cq, mut ks, mut wd) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for &i in &idx {
        cp += p[i];
        cq += q[i];
        let d = (cp - cq).abs();
        ks = ks.max(d);
        wd += d;
    }
    let kl = |a: &[f64], m: &[f64]| -> f64 {
        a.iter()
            .zip(m)
            .filter(|(x, _)| **x > 0.0)
            .map(|(x, y)| x * (x / y).log2())
            .sum()
    };
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let jsd = (0.5 * kl(p, &m) + 0.5 * kl(q, &m)).clamp(0.0, 1.0);
    Ok(DistributionDistances { ks, wd, jsd })
}

fn ngram_counts(seq: &[u32], n: usize) -> HashMap<&[u32], u64> {
    let mut m = HashMap::new();
    if seq.len() >= n {
        for g in seq.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

/// Sentence BLEU with uniform weights, brevity penalty, and add-one
/// smoothing of orders `n ≥ 2` when any clipped precision is zero.
pub fn bleu(candidate: &[u32], reference: &[u32], max_n: usize) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut matches = Vec::with_capacity(max_n);
    let mut totals = Vec::with_capacity(max_n);
    for n in 1..=max_n {
        let cand = ngram_counts(candidate, n);
        let refc = ngram_counts(reference, n);
        let m: u64 = cand.iter().map(|(g, c)| (*c).min(*refc.get(g).unwrap_or(&0))).sum();
        matches.push(m as f64);
        totals.push(candidate.len().saturating_sub(n - 1) as f64);
    }
    let smooth = matches.iter().zip(&totals).any(|(m, t)| *m == 0.0 || *t == 0.0);
    let mut log_sum = 0.0;
    for i in 0..max_n {
        let (m, t) = if smooth && i > 0 {
            (matches[i] + 1.0, totals[i] + 1.0)
        } else {
            (matches[i], totals[i])
        };
        if m == 0.0 || t == 0.0 {
            return 0.0;
        }
        log_sum += (m / t).ln();
    }
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let bp = if c >= r { 1.0 } else { (1.0 - r / c).exp() };
    bp * (log_sum / max_n as f64).exp()
}

/// Unique n-grams over total n-grams across all sequences.
pub fn distinct_n(sequences: &[Vec<u32>], n: usize) -> f64 {
    let mut unique = std::collections::HashSet::new();
    let mut total = 0usize;
    for s in sequences {
        if s.len() >= n {
            for g in s.windows(n) {
                unique.insert(g.to_vec());
                total += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        unique.len() as f64 / total as f64
    }
}

/// Flat metric report: ordered name → value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub values: BTreeMap<String, f64>,
}

impl MetricReport {
    pub fn insert(&mut self, key: impl Into<String>, value: f64) {
        self.values.insert(key.into(), value);
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.values.get(key).copied()
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k},{v}");
        }
        s
    }

    pub fn write(&self, csv_path: &Path, kv_path: &Path) -> Result<()> {
        std::fs::write(csv_path, self.to_csv()).map_err(|e| Error::io(csv_path, e))?;
        std::fs::write(kv_path, self.to_kv()).map_err(|e| Error::io(kv_path, e))
    }
}

/// Prediction report with the standard key names (`prec_m`, `rec_m`,
/// `prec_w`, `rec_w`, `hr@k`, `ndcg@k`).
pub fn prediction_report(tally: &ConfusionTally, ranked: &[RankedPrediction], variant: WeightingVariant, ks: &[usize]) -> MetricReport {
    let m = confusion_metrics(tally, variant);
    let mut r = MetricReport::default();
    r.insert("prec_m", m.precision_macro);
    r.insert("rec_m", m.recall_macro);
    r.insert("prec_w", m.precision_weighted);
    r.insert("rec_w", m.recall_weighted);
    r.insert("undefined_precision_classes", m.undefined_precision as f64);
    r.insert("undefined_recall_classes", m.undefined_recall as f64);
    for &k in ks {
        r.insert(format!("hr@{k}"), hit_rate(ranked, k));
        r.insert(format!("ndcg@{k}"), ndcg(ranked, k));
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn macro_recall_arithmetic() {
        // class 0: 1 of 2 right, class 1: 2 of 2 right
        let t = ConfusionTally::from_pairs(&[0, 1, 1, 1], &[0, 0, 1, 1], 2);
        assert_eq!(confusion_metrics(&t, WeightingVariant::PaperExact).recall_macro, 0.75);
    }

    #[test]
    fn perfect_predictor() {
        let y = [0, 1, 2, 2, 1, 0, 0];
        let t = ConfusionTally::from_pairs(&y, &y, 3);
        for v in [WeightingVariant::PaperExact, WeightingVariant::SupportWeighted] {
            let m = confusion_metrics(&t, v);
            assert_eq!(
                (m.precision_macro, m.recall_macro, m.precision_weighted, m.recall_weighted),
                (1.0, 1.0, 1.0, 1.0)
            );
        }
    }

    /// Recomputes every metric from an explicit confusion matrix.
    fn brute(pred: &[u32], act: &[u32], n: usize) -> [f64; 6] {
        let mut cm = vec![vec![0u64; n]; n];
        for (&p, &a) in pred.iter().zip(act) {
            cm[a as usize][p as usize] += 1;
        }
        let (mut pm, mut rm, mut pw, mut rw, mut sp, mut sr) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let total = pred.len() as f64;
        for b in 0..n {
            let tp = cm[b][b] as f64;
            let col: f64 = (0..n).map(|a| cm[a][b] as f64).sum();
            let row: f64 = cm[b].iter().sum::<u64>() as f64;
            let prec = if col > 0.0 { tp / col } else { 0.0 };
            let rec = if row > 0.0 { tp / row } else { 0.0 };
            pm += prec / n as f64;
            rm += rec / n as f64;
            pw += tp * prec / total;
            rw += tp * rec / total;
            sp += row * prec / total;
            sr += row * rec / total;
        }
        [pm, rm, pw, rw, sp, sr]
    }

    #[test]
    fn matches_confusion_matrix_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let n = rng.random_range(2..8);
            let len = rng.random_range(1..200);
            let pred: Vec<u32> = (0..len).map(|_| rng.random_range(0..n as u32)).collect();
            let act: Vec<u32> = (0..len).map(|_| rng.random_range(0..n as u32)).collect();
            let t = ConfusionTally::from_pairs(&pred, &act, n);
            let a = confusion_metrics(&t, WeightingVariant::PaperExact);
            let b = confusion_metrics(&t, WeightingVariant::SupportWeighted);
            let o = brute(&pred, &act, n);
            let got = [a.precision_macro, a.recall_macro, a.precision_weighted, a.recall_weighted, b.precision_weighted, b.recall_weighted];
            for (x, y) in got.iter().zip(o) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    fn ranked(actual: u32, rank: usize, n: u32) -> RankedPrediction {
        let mut others: Vec<u32> = (0..n).filter(|&b| b != actual).collect();
        others.insert(rank - 1, actual);
        RankedPrediction { actual, ranked: others }
    }

    #[test]
    fn ranking_closed_forms() {
        let all: Vec<_> = (1..=6).map(|r| ranked(0, r, 6)).collect();
        assert_eq!(hit_rate(&all, 6), 1.0);
        assert_eq!(hit_rate(&[ranked(1, 4, 6)], 3), 0.0);
        let mixed: Vec<_> = [1, 2, 4, 5].iter().map(|&r| ranked(2, r, 6)).collect();
        assert_eq!(hit_rate(&mixed, 3), 0.5);
        assert_eq!(ndcg(&[ranked(0, 1, 5)], 3), 1.0);
        assert!((ndcg(&[ranked(0, 2, 5)], 3) - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert_eq!(ndcg(&[ranked(0, 4, 5)], 3), 0.0);
        for k in 1..6 {
            assert!(hit_rate(&mixed, k) <= hit_rate(&mixed, k + 1));
            assert!(ndcg(&mixed, k) <= ndcg(&mixed, k + 1));
        }
    }

    #[test]
    fn distance_closed_forms() {
        let p = [0.2, 0.5, 0.3];
        let d = distribution_distances(&p, &p, BehaviorOrder::ByPFrequency).unwrap();
        assert_eq!((d.ks, d.wd, d.jsd), (0.0, 0.0, 0.0));
        let d = distribution_distances(&[1.0, 0.0], &[0.0, 1.0], BehaviorOrder::ById).unwrap();
        assert_eq!((d.ks, d.wd, d.jsd), (1.0, 1.0, 1.0));
        assert!(distribution_distances(&[1.0], &[0.5, 0.5], BehaviorOrder::ById).is_err());
    }

    #[test]
    fn distances_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let a: Vec<u64> = (0..9).map(|_| rng.random_range(0..20)).collect();
            let b: Vec<u64> = (0..9).map(|_| rng.random_range(1..20)).collect();
            let (p, q) = (normalize_counts(&a), normalize_counts(&b));
            let x = distribution_distances(&p, &q, BehaviorOrder::ById).unwrap();
            let y = distribution_distances(&q, &p, BehaviorOrder::ById).unwrap();
            assert!((x.jsd - y.jsd).abs() < 1e-12);
            assert!((x.ks - y.ks).abs() < 1e-12);
            assert!((x.wd - y.wd).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&x.jsd));
        }
    }

    #[test]
    fn bleu_closed_forms() {
        let r = [1, 2, 3, 4, 5, 6, 7, 8];
        assert!((bleu(&r, &r, 4) - 1.0).abs() < 1e-15);
        assert!(bleu(&[9, 10, 11, 12, 13, 14, 15, 16], &r, 4) < 0.05);
        // half-length exact prefix: every precision 1, brevity penalty e^(1-2)
        let half = [1, 2, 3, 4];
        assert!((bleu(&half, &r, 4) - (-1f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn distinct_closed_forms() {
        assert!((distinct_n(&[vec![0, 0, 0, 0]], 2) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(distinct_n(&[vec![1, 2, 3, 4, 5]], 2), 1.0);
        let s = vec![1, 2, 3, 4];
        assert!((distinct_n(&[s.clone(), s], 2) - 0.5).abs() < 1e-15);
        let flat = vec![7, 7, 7, 7];
        assert!((distinct_n(&[flat.clone(), flat], 2) - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn report_formats() {
        let t = ConfusionTally::from_pairs(&[0, 1], &[0, 1], 2);
        let r = prediction_report(&t, &[ranked(0, 1, 2)], WeightingVariant::PaperExact, &[1, 3, 5]);
        for key in ["prec_m", "rec_m", "prec_w", "rec_w", "hr@1", "hr@3", "hr@5", "ndcg@3", "ndcg@5"] {
            assert!(r.get(key).is_some(), "{key}");
        }
        assert!(r.to_csv().starts_with("metric,value\n"));
        assert!(r.to_kv().contains("rec_m=1"));
    }
}
