//! Ranking and thresholded classification metrics for multi-label output.
//!
//! Average precision is the all-points variant: the mean, over ground-truth
//! positives, of precision at each positive's rank, with descending-score
//! ranking and ties broken stably by sample index. The thresholded suite
//! builds per-category counters (correct / predicted / ground-truth
//! positives) and derives overall and per-category precision, recall, and F1
//! from them, in either fixed-threshold or top-k mode.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("score at index {index} is not finite")]
    NonFiniteScore { index: usize },
    #[error("no category has a defined average precision")]
    AllUndefined,
    #[error("row {row} has {got} entries, expected {expected}")]
    RaggedRow {
        row: usize,
        got: usize,
        expected: usize,
    },
    #[error("probabilities have {probs} rows, labels {labels}")]
    RowCountMismatch { probs: usize, labels: usize },
    #[error("empty evaluation set")]
    Empty,
    #[error("threshold {0} outside (0, 1)")]
    BadThreshold(f64),
    #[error("top-k of {k} invalid for {c} categories")]
    BadTopK { k: usize, c: usize },
}

/// How probabilities become hard positive/negative predictions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EvalMode {
    /// Predict positive when probability strictly exceeds tau.
    Threshold(f64),
    /// Predict the k highest-probability categories of each sample.
    TopK(usize),
}

/// Per-category prediction counters: correct positives, predicted positives,
/// ground-truth positives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalCounters {
    pub m_c: Vec<usize>,
    pub m_p: Vec<usize>,
    pub m_g: Vec<usize>,
}

impl EvalCounters {
    pub fn c(&self) -> usize {
        self.m_c.len()
    }

    /// Internal consistency: a correct positive is both predicted and true.
    pub fn is_consistent(&self) -> bool {
        self.m_c.len() == self.m_p.len()
            && self.m_c.len() == self.m_g.len()
            && self
                .m_c
                .iter()
                .zip(&self.m_p)
                .zip(&self.m_g)
                .all(|((&c, &p), &g)| c <= p.min(g))
    }
}

/// The six headline numbers plus the counters they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdMetrics {
    pub op: f64,
    pub or: f64,
    pub of1: f64,
    pub cp: f64,
    pub cr: f64,
    pub cf1: f64,
    pub counters: EvalCounters,
}

/// Mean of the defined per-category average precisions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanAp {
    pub map: f64,
    pub defined: usize,
    pub undefined: usize,
}

/// All-points average precision over (score, is_positive) pairs in sample
/// order. `None` when the list holds no positive.
pub fn average_precision(ranked: &[(f64, bool)]) -> Result<Option<f64>, MetricsError> {
    for (index, &(score, _)) in ranked.iter().enumerate() {
        if !score.is_finite() {
            return Err(MetricsError::NonFiniteScore { index });
        }
    }
    let total_pos = ranked.iter().filter(|&&(_, pos)| pos).count();
    if total_pos == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..ranked.len()).collect();
    // Stable sort: equal scores keep ascending sample index.
    order.sort_by(|&a, &b| ranked[b].0.partial_cmp(&ranked[a].0).unwrap());
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (rank0, &i) in order.iter().enumerate() {
        if ranked[i].1 {
            hits += 1;
            acc += hits as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(Some(acc / total_pos as f64))
}

/// Arithmetic mean of the defined APs; errors when none is defined.
pub fn mean_ap(aps: &[Option<f64>]) -> Result<MeanAp, MetricsError> {
    let defined: Vec<f64> = aps.iter().filter_map(|&a| a).collect();
    if defined.is_empty() {
        return Err(MetricsError::AllUndefined);
    }
    Ok(MeanAp {
        map: defined.iter().sum::<f64>() / defined.len() as f64,
        defined: defined.len(),
        undefined: aps.len() - defined.len(),
    })
}

fn check_grid(probs: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<usize, MetricsError> {
    if probs.len() != labels.len() {
        return Err(MetricsError::RowCountMismatch {
            probs: probs.len(),
            labels: labels.len(),
        });
    }
    if probs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let c = probs[0].len();
    if c == 0 {
        return Err(MetricsError::Empty);
    }
    for (row, p) in probs.iter().enumerate() {
        if p.len() != c {
            return Err(MetricsError::RaggedRow {
                row,
                got: p.len(),
                expected: c,
            });
        }
        if let Some(index) = p.iter().position(|v| !v.is_finite()) {
            return Err(MetricsError::NonFiniteScore { index });
        }
    }
    for (row, y) in labels.iter().enumerate() {
        if y.len() != c {
            return Err(MetricsError::RaggedRow {
                row,
                got: y.len(),
                expected: c,
            });
        }
    }
    Ok(c)
}

/// Per-category (score, is_positive) lists in sample order, the input shape
/// for [`average_precision`].
pub fn ranked_by_category(
    probs: &[Vec<f64>],
    labels: &[Vec<bool>],
) -> Result<Vec<Vec<(f64, bool)>>, MetricsError> {
    let c = check_grid(probs, labels)?;
    Ok((0..c)
        .map(|k| {
            probs
                .iter()
                .zip(labels)
                .map(|(p, y)| (p[k], y[k]))
                .collect()
        })
        .collect())
}

/// AP per category over an N x C score grid.
pub fn per_category_ap(
    probs: &[Vec<f64>],
    labels: &[Vec<bool>],
) -> Result<Vec<Option<f64>>, MetricsError> {
    ranked_by_category(probs, labels)?
        .iter()
        .map(|r| average_precision(r))
        .collect()
}

/// Hard positive predictions for every sample under the given mode.
fn predict(probs: &[Vec<f64>], c: usize, mode: EvalMode) -> Result<Vec<Vec<bool>>, MetricsError> {
    match mode {
        EvalMode::Threshold(tau) => {
            if !(tau > 0.0 && tau < 1.0) {
                return Err(MetricsError::BadThreshold(tau));
            }
            Ok(probs
                .iter()
                .map(|p| p.iter().map(|&v| v > tau).collect())
                .collect())
        }
        EvalMode::TopK(k) => {
            if k == 0 || k > c {
                return Err(MetricsError::BadTopK { k, c });
            }
            Ok(probs
                .iter()
                .map(|p| {
                    let mut order: Vec<usize> = (0..c).collect();
                    // Stable: equal scores prefer the lower category id.
                    order.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap());
                    let mut row = vec![false; c];
                    for &i in &order[..k] {
                        row[i] = true;
                    }
                    row
                })
                .collect())
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Builds the counters for a prediction rule and derives the six metrics:
/// OP/OR over summed counters, CP/CR as per-category means (a category that
/// predicts nothing contributes precision 0), F1s as harmonic means.
pub fn threshold_metrics(
    probs: &[Vec<f64>],
    labels: &[Vec<bool>],
    mode: EvalMode,
) -> Result<ThresholdMetrics, MetricsError> {
    let c = check_grid(probs, labels)?;
    let preds = predict(probs, c, mode)?;
    let mut counters = EvalCounters {
        m_c: vec![0; c],
        m_p: vec![0; c],
        m_g: vec![0; c],
    };
    for (pred, truth) in preds.iter().zip(labels) {
        for k in 0..c {
            counters.m_p[k] += usize::from(pred[k]);
            counters.m_g[k] += usize::from(truth[k]);
            counters.m_c[k] += usize::from(pred[k] && truth[k]);
        }
    }
    let sum = |v: &[usize]| v.iter().sum::<usize>();
    let op = ratio(sum(&counters.m_c), sum(&counters.m_p));
    let or = ratio(sum(&counters.m_c), sum(&counters.m_g));
    let cp = (0..c)
        .map(|k| ratio(counters.m_c[k], counters.m_p[k]))
        .sum::<f64>()
        / c as f64;
    let cr = (0..c)
        .map(|k| ratio(counters.m_c[k], counters.m_g[k]))
        .sum::<f64>()
        / c as f64;
    Ok(ThresholdMetrics {
        op,
        or,
        of1: f1(op, or),
        cp,
        cr,
        cf1: f1(cp, cr),
        counters,
    })
}

/// Flat `key=value` lines for the eval report file.
pub fn format_report(map: &MeanAp, all: &ThresholdMetrics, topk: &ThresholdMetrics, k: usize) -> String {
    let mut out = String::new();
    out.push_str(&format!("mAP={:.6}\n", map.map));
    out.push_str(&format!("categories_with_positives={}\n", map.defined));
    out.push_str(&format!("categories_without_positives={}\n", map.undefined));
    for (tag, m) in [("all", all), (&format!("top{k}"), topk)] {
        out.push_str(&format!("{tag}_OP={:.6}\n", m.op));
        out.push_str(&format!("{tag}_OR={:.6}\n", m.or));
        out.push_str(&format!("{tag}_OF1={:.6}\n", m.of1));
        out.push_str(&format!("{tag}_CP={:.6}\n", m.cp));
        out.push_str(&format!("{tag}_CR={:.6}\n", m.cr));
        out.push_str(&format!("{tag}_CF1={:.6}\n", m.cf1));
    }
    out
}

/// Per-category AP table as CSV; undefined APs emit an empty cell.
pub fn format_ap_csv(aps: &[Option<f64>]) -> String {
    let mut out = String::from("category,ap\n");
    for (k, ap) in aps.iter().enumerate() {
        match ap {
            Some(v) => out.push_str(&format!("{k},{v:.6}\n")),
            None => out.push_str(&format!("{k},\n")),
        }
    }
    out
}
