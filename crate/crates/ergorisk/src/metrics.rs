//! Confusion-matrix construction and every evaluation statistic the
//! toolkit reports: class-wise rates, Cohen's kappa, multiclass MCC,
//! probability-vector error norms, and rank-based one-vs-rest ROC AUC.
//!
//! All computations are pure integer/float arithmetic on the confusion
//! matrix or the raw probability rows. Zero-denominator rates are reported
//! as 0 and listed in the report's `degenerate` field instead of producing
//! NaNs.

use serde::Serialize;

use crate::error::{Error, Result};

/// Square count matrix: rows are true classes, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix { k, counts: vec![0; k * k] }
    }

    /// Tally predictions; labels outside `0..k` are rejected.
    pub fn from_labels(truth: &[usize], preds: &[usize], k: usize) -> Result<Self> {
        if truth.len() != preds.len() {
            return Err(Error::Value(format!(
                "{} true labels vs {} predictions",
                truth.len(),
                preds.len()
            )));
        }
        let mut cm = ConfusionMatrix::new(k);
        for (&t, &p) in truth.iter().zip(preds) {
            if t >= k || p >= k {
                return Err(Error::Value(format!("label pair ({t},{p}) outside 0..{k}")));
            }
            cm.counts[t * k + p] += 1;
        }
        Ok(cm)
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn at(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.k + pred] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.at(i, i)).sum()
    }

    /// Number of samples whose true class is `c`.
    pub fn row_sum(&self, c: usize) -> u64 {
        (0..self.k).map(|j| self.at(c, j)).sum()
    }

    /// Number of samples predicted as class `c`.
    pub fn col_sum(&self, c: usize) -> u64 {
        (0..self.k).map(|i| self.at(i, c)).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let n = self.total();
        if n == 0 {
            return 0.0;
        }
        self.trace() as f64 / n as f64
    }

    /// Rows as nested vectors (for serialization).
    pub fn rows(&self) -> Vec<Vec<u64>> {
        (0..self.k).map(|i| self.counts[i * self.k..(i + 1) * self.k].to_vec()).collect()
    }
}

/// One-vs-rest reduction of a confusion matrix for a single class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassCounts {
    pub true_pos: u64,
    pub true_neg: u64,
    pub false_pos: u64,
    pub false_neg: u64,
}

/// Collapse the matrix to positives/negatives for class `c`.
pub fn one_vs_rest_counts(cm: &ConfusionMatrix, c: usize) -> ClassCounts {
    let true_pos = cm.at(c, c);
    let false_neg = cm.row_sum(c) - true_pos;
    let false_pos = cm.col_sum(c) - true_pos;
    let true_neg = cm.total() - true_pos - false_neg - false_pos;
    ClassCounts { true_pos, true_neg, false_pos, false_neg }
}

/// Class-wise rates plus the list of rates whose denominator was zero
/// (those are reported as 0).
#[derive(Debug, Clone, PartialEq)]
pub struct BasicMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub specificity: f64,
    pub npv: f64,
    pub fpr: f64,
    pub fdr: f64,
    pub fnr: f64,
    pub degenerate: Vec<&'static str>,
}

/// Textbook one-vs-rest rates. The complements (FPR, FDR, FNR) are
/// computed literally as `1 - base` so the complement identities hold
/// exactly.
pub fn basic_metrics(c: ClassCounts) -> BasicMetrics {
    let mut degenerate = Vec::new();
    let mut ratio = |num: u64, den: u64, name: &'static str| -> f64 {
        if den == 0 {
            degenerate.push(name);
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(c.true_pos, c.true_pos + c.false_pos, "precision");
    let recall = ratio(c.true_pos, c.true_pos + c.false_neg, "recall");
    let specificity = ratio(c.true_neg, c.true_neg + c.false_pos, "specificity");
    let npv = ratio(c.true_neg, c.true_neg + c.false_neg, "npv");
    let f1 = if precision + recall == 0.0 {
        degenerate.push("f1");
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    BasicMetrics {
        precision,
        recall,
        f1,
        specificity,
        npv,
        fpr: 1.0 - specificity,
        fdr: 1.0 - precision,
        fnr: 1.0 - recall,
        degenerate,
    }
}

/// Cohen's kappa: `(p_o - p_e) / (1 - p_e)` with the degenerate rule
/// `p_e = 1 -> 1 if p_o = 1 else 0`.
pub fn cohen_kappa(cm: &ConfusionMatrix) -> f64 {
    let n = cm.total();
    if n == 0 {
        return 0.0;
    }
    let nf = n as f64;
    let p_o = cm.trace() as f64 / nf;
    let p_e = (0..cm.classes())
        .map(|c| cm.row_sum(c) as f64 * cm.col_sum(c) as f64)
        .sum::<f64>()
        / (nf * nf);
    if (1.0 - p_e).abs() < f64::EPSILON {
        return if (1.0 - p_o).abs() < f64::EPSILON { 1.0 } else { 0.0 };
    }
    (p_o - p_e) / (1.0 - p_e)
}

/// Multiclass Matthews correlation coefficient in the covariance form:
/// `(N*trace - sum_k t_k p_k) / sqrt((N^2 - sum p_k^2)(N^2 - sum t_k^2))`
/// with `t` the row sums and `p` the column sums. Reduces to the familiar
/// binary formula on a 2x2 matrix. Zero denominator yields 0.
pub fn mcc_multiclass(cm: &ConfusionMatrix) -> f64 {
    let s = cm.total() as f64;
    if s == 0.0 {
        return 0.0;
    }
    let c = cm.trace() as f64;
    let mut tp_dot = 0.0;
    let mut p_sq = 0.0;
    let mut t_sq = 0.0;
    for k in 0..cm.classes() {
        let t = cm.row_sum(k) as f64;
        let p = cm.col_sum(k) as f64;
        tp_dot += t * p;
        p_sq += p * p;
        t_sq += t * t;
    }
    let den = ((s * s - p_sq) * (s * s - t_sq)).sqrt();
    if den == 0.0 {
        return 0.0;
    }
    (c * s - tp_dot) / den
}

fn check_probs(probs: &[Vec<f64>], labels: &[usize], k: usize) -> Result<()> {
    if probs.len() != labels.len() {
        return Err(Error::Value(format!(
            "{} probability rows vs {} labels",
            probs.len(),
            labels.len()
        )));
    }
    for (i, row) in probs.iter().enumerate() {
        if row.len() != k {
            return Err(Error::Value(format!("probability row {i} has {} entries, expected {k}", row.len())));
        }
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Value(format!("label {bad} outside 0..{k}")));
    }
    Ok(())
}

/// Root-mean-square of per-sample L2 deviations between predicted
/// probability rows and one-hot targets: `sqrt(mean_i ||p_i - y_i||^2)`.
pub fn prob_rmse(probs: &[Vec<f64>], labels: &[usize], k: usize) -> Result<f64> {
    check_probs(probs, labels, k)?;
    if probs.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (row, &label) in probs.iter().zip(labels) {
        for (j, &p) in row.iter().enumerate() {
            let d = p - if j == label { 1.0 } else { 0.0 };
            total += d * d;
        }
    }
    Ok((total / probs.len() as f64).sqrt())
}

/// Mean per-sample L1 deviation: `mean_i ||p_i - y_i||_1`.
pub fn prob_mae(probs: &[Vec<f64>], labels: &[usize], k: usize) -> Result<f64> {
    check_probs(probs, labels, k)?;
    if probs.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (row, &label) in probs.iter().zip(labels) {
        for (j, &p) in row.iter().enumerate() {
            total += (p - if j == label { 1.0 } else { 0.0 }).abs();
        }
    }
    Ok(total / probs.len() as f64)
}

/// One-vs-rest ROC AUC for class `c` via the exact rank statistic
/// (mid-ranks for ties): the probability that a positive sample's class-c
/// score outranks a negative's. Returns `None` when either side is empty.
pub fn roc_auc_ovr(probs: &[Vec<f64>], labels: &[usize], c: usize, k: usize) -> Result<Option<f64>> {
    check_probs(probs, labels, k)?;
    if c >= k {
        return Err(Error::Value(format!("class {c} outside 0..{k}")));
    }
    let n = probs.len();
    let n_pos = labels.iter().filter(|&&l| l == c).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| probs[a][c].partial_cmp(&probs[b][c]).unwrap().then(a.cmp(&b)));
    // Mid-rank assignment over tied scores, then the Mann-Whitney identity.
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && probs[order[j + 1]][c] == probs[order[i]][c] {
            j += 1;
        }
        let mid_rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] == c {
                rank_sum_pos += mid_rank;
            }
        }
        i = j + 1;
    }
    let auc = (rank_sum_pos - n_pos as f64 * (n_pos as f64 + 1.0) / 2.0)
        / (n_pos as f64 * n_neg as f64);
    Ok(Some(auc))
}

/// Per-class block of the evaluation report.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ClassReport {
    pub class: usize,
    pub support: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub specificity: f64,
    pub npv: f64,
    pub fpr: f64,
    pub fdr: f64,
    pub fnr: f64,
    pub auc: f64,
}

/// Complete evaluation report. Serializes to JSON with this exact field
/// order.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct EvalReport {
    pub samples: u64,
    pub accuracy: f64,
    pub cohen_kappa: f64,
    pub mcc: f64,
    pub prob_rmse: f64,
    pub prob_mae: f64,
    /// L2 error averaged over all `n*k` entries instead of per sample.
    pub prob_rmse_per_element: f64,
    /// L1 error averaged over all `n*k` entries instead of per sample.
    pub prob_mae_per_element: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub macro_specificity: f64,
    pub macro_npv: f64,
    pub macro_fpr: f64,
    pub macro_fdr: f64,
    pub macro_fnr: f64,
    pub macro_auc: f64,
    pub per_class: Vec<ClassReport>,
    /// Rates whose denominator was zero (reported as 0), as
    /// `class{c}.{rate}` entries.
    pub degenerate: Vec<String>,
    pub confusion: Vec<Vec<u64>>,
}

/// Assemble the full report from labels, predictions, and probability rows.
pub fn build_report(
    truth: &[usize],
    preds: &[usize],
    probs: &[Vec<f64>],
    k: usize,
) -> Result<EvalReport> {
    check_probs(probs, truth, k)?;
    let cm = ConfusionMatrix::from_labels(truth, preds, k)?;
    let n = cm.total();
    let nf = probs.len() as f64;

    let mut per_class = Vec::with_capacity(k);
    let mut degenerate = Vec::new();
    let mut macros = [0.0f64; 9];
    for c in 0..k {
        let counts = one_vs_rest_counts(&cm, c);
        let m = basic_metrics(counts);
        for name in &m.degenerate {
            degenerate.push(format!("class{c}.{name}"));
        }
        let auc = match roc_auc_ovr(probs, truth, c, k)? {
            Some(a) => a,
            None => {
                degenerate.push(format!("class{c}.auc"));
                0.0
            }
        };
        for (slot, value) in macros.iter_mut().zip([
            m.precision,
            m.recall,
            m.f1,
            m.specificity,
            m.npv,
            m.fpr,
            m.fdr,
            m.fnr,
            auc,
        ]) {
            *slot += value;
        }
        per_class.push(ClassReport {
            class: c,
            support: cm.row_sum(c),
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            specificity: m.specificity,
            npv: m.npv,
            fpr: m.fpr,
            fdr: m.fdr,
            fnr: m.fnr,
            auc,
        });
    }
    let kf = k as f64;
    let rmse = prob_rmse(probs, truth, k)?;
    let mae = prob_mae(probs, truth, k)?;
    Ok(EvalReport {
        samples: n,
        accuracy: cm.accuracy(),
        cohen_kappa: cohen_kappa(&cm),
        mcc: mcc_multiclass(&cm),
        prob_rmse: rmse,
        prob_mae: mae,
        prob_rmse_per_element: if nf == 0.0 { 0.0 } else { rmse / kf.sqrt() },
        prob_mae_per_element: if nf == 0.0 { 0.0 } else { mae / kf },
        macro_precision: macros[0] / kf,
        macro_recall: macros[1] / kf,
        macro_f1: macros[2] / kf,
        macro_specificity: macros[3] / kf,
        macro_npv: macros[4] / kf,
        macro_fpr: macros[5] / kf,
        macro_fdr: macros[6] / kf,
        macro_fnr: macros[7] / kf,
        macro_auc: macros[8] / kf,
        per_class,
        degenerate,
        confusion: cm.rows(),
    })
}

/// Plain-text rendering: one row per class, a macro row, then the summary
/// statistics and the confusion matrix.
pub fn render_tables(r: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str(
        "class  support  precision  recall    f1        specificity  npv       fpr       fdr       fnr       auc\n",
    );
    for c in &r.per_class {
        out.push_str(&format!(
            "{:<5}  {:<7}  {:<9.4}  {:<8.4}  {:<8.4}  {:<11.4}  {:<8.4}  {:<8.4}  {:<8.4}  {:<8.4}  {:.4}\n",
            c.class,
            c.support,
            c.precision,
            c.recall,
            c.f1,
            c.specificity,
            c.npv,
            c.fpr,
            c.fdr,
            c.fnr,
            c.auc
        ));
    }
    out.push_str(&format!(
        "macro  {:<7}  {:<9.4}  {:<8.4}  {:<8.4}  {:<11.4}  {:<8.4}  {:<8.4}  {:<8.4}  {:<8.4}  {:.4}\n",
        r.samples,
        r.macro_precision,
        r.macro_recall,
        r.macro_f1,
        r.macro_specificity,
        r.macro_npv,
        r.macro_fpr,
        r.macro_fdr,
        r.macro_fnr,
        r.macro_auc
    ));
    out.push_str(&format!(
        "\naccuracy {:.4}  kappa {:.4}  mcc {:.4}\n",
        r.accuracy, r.cohen_kappa, r.mcc
    ));
    out.push_str(&format!(
        "prob_rmse {:.4} (per-element {:.4})  prob_mae {:.4} (per-element {:.4})\n",
        r.prob_rmse, r.prob_rmse_per_element, r.prob_mae, r.prob_mae_per_element
    ));
    if !r.degenerate.is_empty() {
        out.push_str(&format!("zero-denominator rates: {}\n", r.degenerate.join(", ")));
    }
    out.push_str("\nconfusion (rows = true class):\n");
    for row in &r.confusion {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:>5}")).collect();
        out.push_str(&cells.join(" "));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ErgRng;
    use rand::Rng as _;

    fn random_cm(rng: &mut ErgRng, k: usize, max: u64) -> ConfusionMatrix {
        let mut cm = ConfusionMatrix::new(k);
        for t in 0..k {
            for p in 0..k {
                for _ in 0..rng.gen_range(0..=max) {
                    cm.add(t, p);
                }
            }
        }
        cm
    }

    #[test]
    fn confusion_examples() {
        let cm = ConfusionMatrix::from_labels(&[0, 1, 2, 3], &[0, 1, 2, 3], 4).unwrap();
        for t in 0..4 {
            for p in 0..4 {
                assert_eq!(cm.at(t, p), u64::from(t == p));
            }
        }
        let cm = ConfusionMatrix::from_labels(&[2], &[5], 8).unwrap();
        assert_eq!(cm.at(2, 5), 1);
        assert_eq!(cm.total(), 1);
        assert!(ConfusionMatrix::from_labels(&[8], &[0], 8).is_err());
        assert!(ConfusionMatrix::from_labels(&[0, 1], &[0], 8).is_err());

        let mut rng = ErgRng::seed(1);
        let truth: Vec<usize> = (0..200).map(|_| rng.gen_range(0..8)).collect();
        let preds: Vec<usize> = (0..200).map(|_| rng.gen_range(0..8)).collect();
        let cm = ConfusionMatrix::from_labels(&truth, &preds, 8).unwrap();
        for c in 0..8 {
            let support = truth.iter().filter(|&&t| t == c).count() as u64;
            assert_eq!(cm.row_sum(c), support);
        }
    }

    #[test]
    fn one_vs_rest_hand_case() {
        let mut cm = ConfusionMatrix::new(2);
        for (t, p, n) in [(0, 0, 3), (0, 1, 1), (1, 0, 2), (1, 1, 4)] {
            for _ in 0..n {
                cm.add(t, p);
            }
        }
        let c = one_vs_rest_counts(&cm, 0);
        assert_eq!(
            (c.true_pos, c.false_neg, c.false_pos, c.true_neg),
            (3, 1, 2, 4)
        );
        let mut rng = ErgRng::seed(2);
        let cm = random_cm(&mut rng, 8, 5);
        for class in 0..8 {
            let c = one_vs_rest_counts(&cm, class);
            assert_eq!(c.true_pos + c.true_neg + c.false_pos + c.false_neg, cm.total());
        }
        let diag = ConfusionMatrix::from_labels(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        for class in 0..3 {
            let c = one_vs_rest_counts(&diag, class);
            assert_eq!((c.false_pos, c.false_neg), (0, 0));
        }
    }

    #[test]
    fn basic_metric_examples() {
        let m = basic_metrics(ClassCounts { true_pos: 1, true_neg: 1, false_pos: 0, false_neg: 0 });
        assert_eq!((m.precision, m.recall, m.f1, m.specificity), (1.0, 1.0, 1.0, 1.0));
        assert!(m.degenerate.is_empty());

        let m = basic_metrics(ClassCounts { true_pos: 3, true_neg: 0, false_pos: 2, false_neg: 0 });
        assert!((m.precision - 0.6).abs() < 1e-12);
        assert!((m.fdr - 0.4).abs() < 1e-12);

        let m = basic_metrics(ClassCounts { true_pos: 0, true_neg: 5, false_pos: 0, false_neg: 0 });
        assert_eq!(m.precision, 0.0);
        assert_eq!(m.recall, 0.0);
        assert!(m.degenerate.contains(&"precision"));
        assert!(m.degenerate.contains(&"recall"));
        assert!(m.degenerate.contains(&"f1"));
    }

    #[test]
    fn basic_metrics_match_direct_recomputation() {
        let mut rng = ErgRng::seed(3);
        for _ in 0..100 {
            let cm = random_cm(&mut rng, 8, 6);
            for class in 0..8 {
                let c = one_vs_rest_counts(&cm, class);
                let m = basic_metrics(c);
                let (tp, tn, fp, fneg) = (
                    c.true_pos as f64,
                    c.true_neg as f64,
                    c.false_pos as f64,
                    c.false_neg as f64,
                );
                if tp + fp > 0.0 {
                    assert!((m.precision - tp / (tp + fp)).abs() < 1e-12);
                }
                if tp + fneg > 0.0 {
                    assert!((m.recall - tp / (tp + fneg)).abs() < 1e-12);
                }
                if tn + fp > 0.0 {
                    assert!((m.specificity - tn / (tn + fp)).abs() < 1e-12);
                }
                if tn + fneg > 0.0 {
                    assert!((m.npv - tn / (tn + fneg)).abs() < 1e-12);
                }
                // Complement identities are exact, not approximate.
                assert_eq!(m.fpr, 1.0 - m.specificity);
                assert_eq!(m.fdr, 1.0 - m.precision);
                assert_eq!(m.fnr, 1.0 - m.recall);
            }
        }
    }

    #[test]
    fn kappa_examples() {
        let diag = ConfusionMatrix::from_labels(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!(cohen_kappa(&diag), 1.0);
        let mut constant = ConfusionMatrix::new(2);
        for _ in 0..5 {
            constant.add(0, 0);
            constant.add(1, 0);
        }
        assert_eq!(cohen_kappa(&constant), 0.0);

        let mut rng = ErgRng::seed(4);
        for _ in 0..50 {
            let cm = random_cm(&mut rng, 8, 4);
            let n = cm.total();
            if n == 0 {
                continue;
            }
            // Independent integer-arithmetic oracle:
            // kappa = (N*trace - sum r_c c_c) / (N^2 - sum r_c c_c).
            let rc: u128 = (0..8)
                .map(|c| cm.row_sum(c) as u128 * cm.col_sum(c) as u128)
                .sum();
            let num = n as i128 * cm.trace() as i128 - rc as i128;
            let den = (n as i128) * (n as i128) - rc as i128;
            let want = if den == 0 {
                if cm.trace() == n { 1.0 } else { 0.0 }
            } else {
                num as f64 / den as f64
            };
            assert!((cohen_kappa(&cm) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn mcc_examples() {
        let diag = ConfusionMatrix::from_labels(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!(mcc_multiclass(&diag), 1.0);

        let mut cm = ConfusionMatrix::new(2);
        for (t, p, n) in [(0, 0, 2), (0, 1, 1), (1, 0, 1), (1, 1, 2)] {
            for _ in 0..n {
                cm.add(t, p);
            }
        }
        assert!((mcc_multiclass(&cm) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn mcc_matches_binary_formula_on_2x2() {
        let mut rng = ErgRng::seed(5);
        for _ in 0..100 {
            let cm = random_cm(&mut rng, 2, 9);
            let c = one_vs_rest_counts(&cm, 0);
            // With class 0 as "positive": rows/cols of the 2x2 matrix.
            let (tp, tn, fp, fneg) = (
                c.true_pos as f64,
                c.true_neg as f64,
                c.false_pos as f64,
                c.false_neg as f64,
            );
            let den = ((tp + fp) * (tp + fneg) * (tn + fp) * (tn + fneg)).sqrt();
            let want = if den == 0.0 { 0.0 } else { (tp * tn - fp * fneg) / den };
            assert!(
                (mcc_multiclass(&cm) - want).abs() < 1e-12,
                "{} vs {want}",
                mcc_multiclass(&cm)
            );
        }
    }

    #[test]
    fn mcc_matches_covariance_oracle_on_8x8() {
        let mut rng = ErgRng::seed(6);
        for _ in 0..50 {
            let cm = random_cm(&mut rng, 8, 4);
            let s = cm.total() as f64;
            if s == 0.0 {
                continue;
            }
            // Triple-sum covariance oracle, a different factorization.
            let mut num = 0.0;
            for k in 0..8 {
                for l in 0..8 {
                    for m in 0..8 {
                        num += cm.at(k, k) as f64 * cm.at(l, m) as f64
                            - cm.at(k, l) as f64 * cm.at(m, k) as f64;
                    }
                }
            }
            let mut dx = 0.0;
            let mut dy = 0.0;
            for k in 0..8 {
                let pk = cm.col_sum(k) as f64;
                let tk = cm.row_sum(k) as f64;
                dx += pk * (s - pk);
                dy += tk * (s - tk);
            }
            let den = (dx * dy).sqrt();
            let want = if den == 0.0 { 0.0 } else { num / den };
            assert!((mcc_multiclass(&cm) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn prob_error_examples() {
        // Perfect one-hot predictions.
        let probs = vec![
            vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
        ];
        assert_eq!(prob_rmse(&probs, &[0, 3], 8).unwrap(), 0.0);
        assert_eq!(prob_mae(&probs, &[0, 3], 8).unwrap(), 0.0);

        // Uniform rows vs one-hot targets.
        let probs = vec![vec![0.125; 8]; 3];
        let rmse = prob_rmse(&probs, &[0, 4, 7], 8).unwrap();
        let mae = prob_mae(&probs, &[0, 4, 7], 8).unwrap();
        assert!((rmse - 0.875f64.sqrt()).abs() < 1e-12, "{rmse}");
        assert!((rmse - 0.9354).abs() < 1e-4);
        assert!((mae - 1.75).abs() < 1e-12);
    }

    #[test]
    fn prob_errors_match_summation_oracle() {
        let mut rng = ErgRng::seed(7);
        let n = 40;
        let probs: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let raw: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..1.0)).collect();
                let z: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / z).collect()
            })
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..8)).collect();
        let mut sq = 0.0;
        let mut l1 = 0.0;
        for (row, &label) in probs.iter().zip(&labels) {
            let mut s2 = 0.0;
            let mut s1 = 0.0;
            for (j, &p) in row.iter().enumerate() {
                let y = if j == label { 1.0 } else { 0.0 };
                s2 += (p - y) * (p - y);
                s1 += (p - y).abs();
            }
            sq += s2;
            l1 += s1;
        }
        let want_rmse = (sq / n as f64).sqrt();
        let want_mae = l1 / n as f64;
        assert!((prob_rmse(&probs, &labels, 8).unwrap() - want_rmse).abs() < 1e-9);
        assert!((prob_mae(&probs, &labels, 8).unwrap() - want_mae).abs() < 1e-9);
    }

    #[test]
    fn auc_examples() {
        // Perfectly separated class-0 scores.
        let probs = vec![
            vec![0.9, 0.1],
            vec![0.8, 0.2],
            vec![0.2, 0.8],
            vec![0.1, 0.9],
        ];
        let labels = [0, 0, 1, 1];
        assert_eq!(roc_auc_ovr(&probs, &labels, 0, 2).unwrap(), Some(1.0));
        // Identical scores everywhere: chance level.
        let flat = vec![vec![0.5, 0.5]; 6];
        let labels = [0, 1, 0, 1, 0, 1];
        assert_eq!(roc_auc_ovr(&flat, &labels, 0, 2).unwrap(), Some(0.5));
        // One-sided labels: undefined.
        assert_eq!(roc_auc_ovr(&flat, &[0; 6], 1, 2).unwrap(), None);
    }

    #[test]
    fn auc_matches_pairwise_oracle() {
        let mut rng = ErgRng::seed(8);
        for _ in 0..20 {
            let n = 30;
            // Coarse scores force plenty of ties.
            let probs: Vec<Vec<f64>> = (0..n)
                .map(|_| vec![rng.gen_range(0..5) as f64 / 4.0, 0.0])
                .collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            let got = roc_auc_ovr(&probs, &labels, 0, 2).unwrap();
            let pos: Vec<f64> =
                (0..n).filter(|&i| labels[i] == 0).map(|i| probs[i][0]).collect();
            let neg: Vec<f64> =
                (0..n).filter(|&i| labels[i] != 0).map(|i| probs[i][0]).collect();
            if pos.is_empty() || neg.is_empty() {
                assert_eq!(got, None);
                continue;
            }
            let mut wins = 0.0;
            for &p in &pos {
                for &q in &neg {
                    if p > q {
                        wins += 1.0;
                    } else if p == q {
                        wins += 0.5;
                    }
                }
            }
            let want = wins / (pos.len() * neg.len()) as f64;
            assert!((got.unwrap() - want).abs() < 1e-12);
        }
    }

    fn random_eval(rng: &mut ErgRng, n: usize) -> (Vec<usize>, Vec<usize>, Vec<Vec<f64>>) {
        let truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..8)).collect();
        let probs: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let raw: Vec<f64> = (0..8).map(|_| rng.gen_range(0.1..1.0)).collect();
                let z: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / z).collect()
            })
            .collect();
        let preds: Vec<usize> = probs
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0
            })
            .collect();
        (truth, preds, probs)
    }

    #[test]
    fn accuracy_equals_trace_ratio_and_micro_recall() {
        let mut rng = ErgRng::seed(9);
        let (truth, preds, probs) = random_eval(&mut rng, 120);
        let report = build_report(&truth, &preds, &probs, 8).unwrap();
        let cm = ConfusionMatrix::from_labels(&truth, &preds, 8).unwrap();
        assert_eq!(report.accuracy, cm.trace() as f64 / cm.total() as f64);
        let mut tp = 0u64;
        let mut tp_fn = 0u64;
        for c in 0..8 {
            let counts = one_vs_rest_counts(&cm, c);
            tp += counts.true_pos;
            tp_fn += counts.true_pos + counts.false_neg;
        }
        assert!((report.accuracy - tp as f64 / tp_fn as f64).abs() < 1e-15);
    }

    #[test]
    fn report_is_invariant_under_class_permutation() {
        let mut rng = ErgRng::seed(10);
        let (truth, preds, probs) = random_eval(&mut rng, 90);
        let report = build_report(&truth, &preds, &probs, 8).unwrap();

        let perm: [usize; 8] = [5, 2, 7, 0, 4, 1, 6, 3];
        let t2: Vec<usize> = truth.iter().map(|&c| perm[c]).collect();
        let p2: Vec<usize> = preds.iter().map(|&c| perm[c]).collect();
        let pr2: Vec<Vec<f64>> = probs
            .iter()
            .map(|row| {
                let mut out = vec![0.0; 8];
                for (c, &v) in row.iter().enumerate() {
                    out[perm[c]] = v;
                }
                out
            })
            .collect();
        let report2 = build_report(&t2, &p2, &pr2, 8).unwrap();

        for (a, b) in [
            (report.accuracy, report2.accuracy),
            (report.cohen_kappa, report2.cohen_kappa),
            (report.mcc, report2.mcc),
            (report.prob_rmse, report2.prob_rmse),
            (report.prob_mae, report2.prob_mae),
            (report.macro_precision, report2.macro_precision),
            (report.macro_f1, report2.macro_f1),
            (report.macro_auc, report2.macro_auc),
        ] {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        for c in 0..8 {
            assert!((report.per_class[c].f1 - report2.per_class[perm[c]].f1).abs() < 1e-12);
            assert!((report.per_class[c].auc - report2.per_class[perm[c]].auc).abs() < 1e-12);
        }
    }

    #[test]
    fn report_json_has_fixed_key_order_and_is_deterministic() {
        let mut rng = ErgRng::seed(11);
        let (truth, preds, probs) = random_eval(&mut rng, 40);
        let report = build_report(&truth, &preds, &probs, 8).unwrap();
        let a = serde_json::to_string_pretty(&report).unwrap();
        let b = serde_json::to_string_pretty(&build_report(&truth, &preds, &probs, 8).unwrap())
            .unwrap();
        assert_eq!(a, b);
        let order = [
            "\"samples\"",
            "\"accuracy\"",
            "\"cohen_kappa\"",
            "\"mcc\"",
            "\"prob_rmse\"",
            "\"prob_mae\"",
            "\"macro_precision\"",
            "\"per_class\"",
            "\"degenerate\"",
            "\"confusion\"",
        ];
        let mut last = 0;
        for key in order {
            let at = a.find(key).unwrap_or_else(|| panic!("{key} missing"));
            assert!(at > last, "{key} out of order");
            last = at;
        }
    }

    #[test]
    fn rendered_tables_cover_all_classes() {
        let mut rng = ErgRng::seed(12);
        let (truth, preds, probs) = random_eval(&mut rng, 40);
        let report = build_report(&truth, &preds, &probs, 8).unwrap();
        let text = render_tables(&report);
        assert!(text.contains("precision"));
        assert!(text.contains("macro"));
        assert!(text.contains("accuracy"));
        assert_eq!(text.lines().filter(|l| l.starts_with(char::is_numeric)).count(), 8);
    }

    #[test]
    fn kappa_and_mcc_are_one_iff_diagonal() {
        let diag = ConfusionMatrix::from_labels(&[0, 1, 1, 2], &[0, 1, 1, 2], 3).unwrap();
        assert_eq!(cohen_kappa(&diag), 1.0);
        assert_eq!(mcc_multiclass(&diag), 1.0);
        let mut off = ConfusionMatrix::new(3);
        off.add(0, 0);
        off.add(1, 1);
        off.add(2, 1);
        assert!(cohen_kappa(&off) < 1.0);
        assert!(mcc_multiclass(&off) < 1.0);
    }
}
