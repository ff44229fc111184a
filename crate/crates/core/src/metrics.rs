//! Confusion matrices and accuracy / precision / recall / F1, per class and
//! macro-averaged.
//!
//! Per class `c` with matrix `M` (rows gold, columns predicted):
//! `TP = M[c][c]`, `FP = column − TP`, `FN = row − TP`, `TN = total − TP − FP − FN`.
//! Undefined ratios (0/0) are reported as 0.

use std::fmt::Write as _;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Label, SentimentScale};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("gold and predicted label lists differ in length ({gold} vs {pred})")]
    LengthMismatch { gold: usize, pred: usize },
    #[error("label {0:?} is not on the evaluation scale")]
    OffScale(Label),
    #[error("class index {index} is out of range for {classes} classes")]
    ClassIndex { index: usize, classes: usize },
    #[error("cannot compute metrics over zero examples")]
    EmptyEvaluation,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    /// `counts[gold][pred]`.
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(labels: Vec<String>) -> Self {
        let k = labels.len();
        Self {
            labels,
            counts: vec![vec![0; k]; k],
        }
    }

    /// Tallies class-index pairs.
    pub fn from_indices(labels: Vec<String>, gold: &[usize], pred: &[usize]) -> Result<Self, MetricsError> {
        if gold.len() != pred.len() {
            return Err(MetricsError::LengthMismatch {
                gold: gold.len(),
                pred: pred.len(),
            });
        }
        let mut m = Self::zeros(labels);
        let k = m.labels.len();
        for (&g, &p) in gold.iter().zip(pred) {
            for index in [g, p] {
                if index >= k {
                    return Err(MetricsError::ClassIndex { index, classes: k });
                }
            }
            m.counts[g][p] += 1;
        }
        Ok(m)
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn class_counts(&self, class: usize) -> ClassCounts {
        let tp = self.counts[class][class];
        let row: u64 = self.counts[class].iter().sum();
        let col: u64 = self.counts.iter().map(|r| r[class]).sum();
        let fp = col - tp;
        let fn_ = row - tp;
        ClassCounts {
            tp,
            fp,
            fn_,
            tn: self.total() - tp - fp - fn_,
        }
    }

    /// Reorders classes; `order[i]` is the old index of new class `i`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            labels: order.iter().map(|&i| self.labels[i].clone()).collect(),
            counts: order
                .iter()
                .map(|&g| order.iter().map(|&p| self.counts[g][p]).collect())
                .collect(),
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

/// Builds the matrix for label sequences on `scale`.
pub fn confusion(gold: &[Label], pred: &[Label], scale: SentimentScale) -> Result<ConfusionMatrix, MetricsError> {
    if gold.len() != pred.len() {
        return Err(MetricsError::LengthMismatch {
            gold: gold.len(),
            pred: pred.len(),
        });
    }
    let index = |l: Label| scale.index_of(l).ok_or(MetricsError::OffScale(l));
    let g = gold.iter().map(|&l| index(l)).collect::<Result<Vec<_>, _>>()?;
    let p = pred.iter().map(|&l| index(l)).collect::<Result<Vec<_>, _>>()?;
    let labels = scale.tokens().into_iter().map(String::from).collect();
    ConfusionMatrix::from_indices(labels, &g, &p)
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: u64,
    pub accuracy: f64,
    /// Always `"macro"`: unweighted mean over classes.
    pub averaging: String,
    #[serde(rename = "macro")]
    pub macro_avg: Prf,
    /// Macro recall, which is SemEval's AvgRec.
    pub avg_rec: f64,
    pub per_class: IndexMap<String, ClassMetrics>,
    pub confusion: ConfusionMatrix,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn compute_metrics(m: &ConfusionMatrix) -> Result<MetricsReport, MetricsError> {
    let total = m.total();
    if total == 0 {
        return Err(MetricsError::EmptyEvaluation);
    }
    let k = m.num_classes();
    let mut per_class = IndexMap::with_capacity(k);
    let (mut sp, mut sr, mut sf) = (0.0, 0.0, 0.0);
    for c in 0..k {
        let cc = m.class_counts(c);
        let precision = ratio(cc.tp, cc.tp + cc.fp);
        let recall = ratio(cc.tp, cc.tp + cc.fn_);
        let f1 = harmonic(precision, recall);
        sp += precision;
        sr += recall;
        sf += f1;
        per_class.insert(
            m.labels[c].clone(),
            ClassMetrics {
                precision,
                recall,
                f1,
                support: cc.tp + cc.fn_,
            },
        );
    }
    let kf = k as f64;
    let macro_avg = Prf {
        precision: sp / kf,
        recall: sr / kf,
        f1: sf / kf,
    };
    Ok(MetricsReport {
        n: total,
        accuracy: m.trace() as f64 / total as f64,
        averaging: "macro".to_string(),
        avg_rec: macro_avg.recall,
        macro_avg,
        per_class,
        confusion: m.clone(),
    })
}

/// One table row: accuracy plus macro precision / recall / F1.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Summary {
    pub fn minus(&self, other: &Summary) -> Summary {
        Summary {
            accuracy: self.accuracy - other.accuracy,
            precision: self.precision - other.precision,
            recall: self.recall - other.recall,
            f1: self.f1 - other.f1,
        }
    }

    pub fn values(&self) -> [f64; 4] {
        [self.accuracy, self.precision, self.recall, self.f1]
    }
}

impl From<&MetricsReport> for Summary {
    fn from(r: &MetricsReport) -> Self {
        Summary {
            accuracy: r.accuracy,
            precision: r.macro_avg.precision,
            recall: r.macro_avg.recall,
            f1: r.macro_avg.f1,
        }
    }
}

/// Rounds half away from zero at `places` decimals, on the decimal
/// expansion rather than the binary value (so 0.12345 → 0.1235).
pub fn format_fixed(x: f64, places: usize) -> String {
    if !x.is_finite() {
        return x.to_string();
    }
    let negative = x < 0.0;
    let wide = format!("{:.*}", places + 8, x.abs());
    let (int_part, frac_part) = wide.split_once('.').unwrap();
    let mut digits: Vec<u8> = int_part
        .bytes()
        .chain(frac_part.bytes().take(places))
        .map(|b| b - b'0')
        .collect();
    let round_up = frac_part.as_bytes()[places] >= b'5';
    if round_up {
        let mut i = digits.len();
        loop {
            if i == 0 {
                digits.insert(0, 1);
                break;
            }
            i -= 1;
            if digits[i] == 9 {
                digits[i] = 0;
            } else {
                digits[i] += 1;
                break;
            }
        }
    }
    let int_len = digits.len() - places;
    let mut s = String::new();
    let is_zero = digits.iter().all(|&d| d == 0);
    if negative && !is_zero {
        s.push('-');
    }
    s.extend(digits[..int_len].iter().map(|d| (b'0' + d) as char));
    if places > 0 {
        s.push('.');
        s.extend(digits[int_len..].iter().map(|d| (b'0' + d) as char));
    }
    s
}

pub const TABLE_HEADER: [&str; 5] = ["Model", "Accuracy", "Precision", "Recall", "F1 Score"];

/// Fixed-width table, one row per entry, 4 decimal places.
pub fn render_table<'a, I>(rows: I) -> String
where
    I: IntoIterator<Item = (&'a str, Summary)>,
{
    let rows: Vec<(String, [String; 4])> = rows
        .into_iter()
        .map(|(name, s)| (name.to_string(), s.values().map(|v| format_fixed(v, 4))))
        .collect();
    let name_w = rows
        .iter()
        .map(|r| r.0.chars().count())
        .chain([TABLE_HEADER[0].len()])
        .max()
        .unwrap();
    let col_w = TABLE_HEADER[1..].iter().map(|h| h.len()).max().unwrap().max(7);
    let mut out = String::new();
    let line = |out: &mut String, cells: [&str; 5]| {
        let _ = write!(out, "| {:<name_w$} ", cells[0]);
        for c in &cells[1..] {
            let _ = write!(out, "| {:>col_w$} ", c);
        }
        out.push_str("|\n");
    };
    line(&mut out, TABLE_HEADER);
    let _ = write!(out, "|{}", "-".repeat(name_w + 2));
    for _ in 1..5 {
        let _ = write!(out, "|{}", "-".repeat(col_w + 2));
    }
    out.push_str("|\n");
    for (name, v) in &rows {
        line(&mut out, [name, &v[0], &v[1], &v[2], &v[3]]);
    }
    out
}

/// Table text plus machine-readable JSON of the full reports.
pub fn render_report(results: &IndexMap<String, MetricsReport>) -> (String, serde_json::Value) {
    let table = render_table(results.iter().map(|(k, r)| (k.as_str(), Summary::from(r))));
    let json = serde_json::to_value(results).expect("reports serialize");
    (table, json)
}
