//! Test-set evaluation: accuracy, AUC, precision, recall, F1.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::data::DomainDataset;
use crate::error::{IdianError, Result};
use crate::model::IdianModel;
use crate::rng::NoiseSource;

/// Sizes up to this use exact pair enumeration for AUC, larger ones the rank sum.
pub const AUC_PAIRWISE_LIMIT: usize = 10_000;

const EVAL_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc: f64,
    /// Only defined for two classes.
    pub auc: Option<f64>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub n_eval: usize,
    /// Unlabeled test instances skipped.
    pub n_excluded: usize,
    /// A precision or recall denominator was zero and the value was set to 0.
    pub degenerate: bool,
}

/// Fraction of (positive, negative) pairs ranked correctly, ties counting ½.
pub fn auc_pairwise(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_auc_input(scores, labels)?;
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, l)| **l).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, l)| !**l).map(|(s, _)| *s).collect();
    let mut twice_wins: u64 = 0;
    for p in &pos {
        for n in &neg {
            twice_wins += match p.partial_cmp(n) {
                Some(Ordering::Greater) => 2,
                Some(Ordering::Equal) => 1,
                _ => 0,
            };
        }
    }
    Ok(twice_wins as f64 / (2.0 * pos.len() as f64 * neg.len() as f64))
}

/// Mann-Whitney U from mid-ranks, divided by `n_pos · n_neg`.
pub fn auc_rank_sum(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_auc_input(scores, labels)?;
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank, so mid-ranks of tie groups stay integral.
    let mut twice_rank = vec![0u64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1, mean (i + j + 2) / 2
        let tr = (i + j + 2) as u64;
        for k in i..=j {
            twice_rank[order[k]] = tr;
        }
        i = j + 1;
    }
    let n_pos = labels.iter().filter(|l| **l).count() as u64;
    let n_neg = n as u64 - n_pos;
    let twice_rank_pos: u64 = twice_rank.iter().zip(labels).filter(|(_, l)| **l).map(|(r, _)| *r).sum();
    // U = R_pos − n_pos(n_pos+1)/2
    let twice_u = twice_rank_pos - n_pos * (n_pos + 1);
    Ok(twice_u as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() <= AUC_PAIRWISE_LIMIT {
        auc_pairwise(scores, labels)
    } else {
        auc_rank_sum(scores, labels)
    }
}

fn check_auc_input(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(IdianError::config("scores and labels differ in length"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(IdianError::numeric("non-finite score"));
    }
    let pos = labels.iter().filter(|l| **l).count();
    if pos == 0 || pos == labels.len() {
        return Err(IdianError::Data(
            "AUC needs at least one positive and one negative".into(),
        ));
    }
    Ok(())
}

pub fn confusion_matrix(truth: &[usize], predicted: &[usize], n_classes: usize) -> Result<Vec<Vec<usize>>> {
    if truth.len() != predicted.len() {
        return Err(IdianError::config("truth and predictions differ in length"));
    }
    let mut c = vec![vec![0; n_classes]; n_classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= n_classes || p >= n_classes {
            return Err(IdianError::config("class index out of range"));
        }
        c[t][p] += 1;
    }
    Ok(c)
}

/// `(accuracy, precision, recall, f1, degenerate)` from a confusion matrix.
///
/// Two classes: class 1 is positive. More classes: macro-averaged precision
/// and recall, with F1 the harmonic mean of those two averages.
pub fn scores_from_confusion(confusion: &[Vec<usize>]) -> (f64, f64, f64, f64, bool) {
    let k = confusion.len();
    let total: usize = confusion.iter().flatten().sum();
    let correct: usize = (0..k).map(|i| confusion[i][i]).sum();
    let acc = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
    let mut degenerate = false;
    let mut ratio = |num: usize, den: usize| {
        if den == 0 {
            degenerate = true;
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let per_class = |c: usize| {
        let tp = confusion[c][c];
        let predicted: usize = (0..k).map(|t| confusion[t][c]).sum();
        let actual: usize = confusion[c].iter().sum();
        (tp, predicted, actual)
    };
    let (precision, recall) = if k == 2 {
        let (tp, predicted, actual) = per_class(1);
        (ratio(tp, predicted), ratio(tp, actual))
    } else {
        let mut p = 0.0;
        let mut r = 0.0;
        for c in 0..k {
            let (tp, predicted, actual) = per_class(c);
            p += ratio(tp, predicted);
            r += ratio(tp, actual);
        }
        (p / k.max(1) as f64, r / k.max(1) as f64)
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    (acc, precision, recall, f1, degenerate)
}

/// Builds a report from true labels, predicted labels and, for two classes,
/// positive-class scores.
pub fn report_from_predictions(
    truth: &[usize],
    predicted: &[usize],
    positive_scores: Option<&[f64]>,
    n_classes: usize,
    n_excluded: usize,
) -> Result<EvalReport> {
    let confusion = confusion_matrix(truth, predicted, n_classes)?;
    let (acc, precision, recall, f1, mut degenerate) = scores_from_confusion(&confusion);
    let auc = match (n_classes, positive_scores) {
        (2, Some(scores)) => {
            let labels: Vec<bool> = truth.iter().map(|y| *y == 1).collect();
            match auc(scores, &labels) {
                Ok(v) => Some(v),
                Err(IdianError::Data(_)) => {
                    degenerate = true;
                    None
                }
                Err(e) => return Err(e),
            }
        }
        _ => None,
    };
    Ok(EvalReport {
        acc,
        auc,
        precision,
        recall,
        f1,
        confusion,
        n_eval: truth.len(),
        n_excluded,
        degenerate,
    })
}

fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Evaluates target-domain predictions. Imputation noise is derived per
/// instance index from `eval_seed`, so results are deterministic.
pub fn evaluate(model: &IdianModel, test: &DomainDataset, eval_seed: u64) -> Result<EvalReport> {
    if test.dim != model.target_dim {
        return Err(IdianError::config(format!(
            "test data has {} features, model expects {}",
            test.dim, model.target_dim
        )));
    }
    let rows: Vec<usize> = (0..test.len()).filter(|&i| test.instances[i].label.is_some()).collect();
    let excluded = test.len() - rows.len();
    if rows.is_empty() {
        return Err(IdianError::Data("no labeled test instances".into()));
    }
    let mut noise = NoiseSource::indexed(eval_seed);
    let mut truth = Vec::with_capacity(rows.len());
    let mut predicted = Vec::with_capacity(rows.len());
    let mut scores = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(EVAL_CHUNK) {
        let x = test.feature_matrix(chunk);
        let m = test.mask_matrix(chunk);
        // Indexed noise keyed by instance index: rows of a chunk are not
        // necessarily contiguous, so draw them one index at a time.
        let mut eps = ndarray::Array2::zeros(x.dim());
        for (r, &i) in chunk.iter().enumerate() {
            eps.row_mut(r).assign(&noise.sample(1, test.dim, i).row(0));
        }
        let probs = model.predict_with_noise(&x, &m, &eps)?;
        for (r, &i) in chunk.iter().enumerate() {
            let row = probs.row(r);
            truth.push(test.instances[i].label.expect("filtered"));
            predicted.push(argmax(row));
            if model.n_classes == 2 {
                scores.push(row[1]);
            }
        }
    }
    let scores = (model.n_classes == 2).then_some(&scores[..]);
    report_from_predictions(&truth, &predicted, scores, model.n_classes, excluded)
}
