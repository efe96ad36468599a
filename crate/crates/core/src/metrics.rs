//! Accuracy, ROC curves and AUC.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    /// `None` for classes absent from the labels.
    pub per_class: Vec<Option<f64>>,
    /// Unweighted mean over present classes.
    pub average: f64,
}

pub fn accuracy(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<ClassAccuracy> {
    if predictions.is_empty() {
        return Err(Error::EmptyInput);
    }
    if predictions.len() != labels.len() {
        return Err(Error::InconsistentDims(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut correct = vec![0usize; num_classes];
    let mut count = vec![0usize; num_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        if l >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: l,
                classes: num_classes,
            });
        }
        count[l] += 1;
        correct[l] += usize::from(p == l);
    }
    let per_class: Vec<Option<f64>> = correct
        .iter()
        .zip(&count)
        .map(|(&c, &n)| (n > 0).then(|| c as f64 / n as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let average = present.iter().sum::<f64>() / present.len() as f64;
    Ok(ClassAccuracy { per_class, average })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC points from a descending threshold sweep, one point per distinct
/// score, from `(0, 0)` to `(1, 1)`.
pub fn roc_curve(scores: &[f64], positive: &[bool]) -> Result<Vec<RocPoint>> {
    if scores.len() != positive.len() {
        return Err(Error::InconsistentDims(format!(
            "{} scores for {} labels",
            scores.len(),
            positive.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NumericFailure("NaN score".into()));
    }
    let pos = positive.iter().filter(|&&p| p).count();
    let neg = positive.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    Ok(points)
}

/// Trapezoidal area under ROC points ordered by the sweep.
pub fn auc(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

/// True-positive rate of a ROC polyline at `fpr`; on a vertical segment the
/// highest value is taken.
fn tpr_at(points: &[RocPoint], fpr: f64) -> f64 {
    let mut best: f64 = 0.0;
    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        if fpr < a.fpr || fpr > b.fpr {
            continue;
        }
        let t = if b.fpr == a.fpr {
            b.tpr
        } else {
            a.tpr + (b.tpr - a.tpr) * (fpr - a.fpr) / (b.fpr - a.fpr)
        };
        best = best.max(t);
    }
    best
}

/// Macro average of one-vs-rest ROC curves. `scores[c][i]` is the score of
/// sample `i` for class `c`; `positive[c][i]` marks membership. Classes with
/// no positives or no negatives are skipped. Returns the pointwise-mean curve
/// over the union of FPR knots and the mean of per-class AUCs.
pub fn macro_roc(scores: &[Vec<f64>], positive: &[Vec<bool>]) -> Result<(Vec<RocPoint>, f64)> {
    let mut curves = Vec::new();
    for (s, p) in scores.iter().zip(positive) {
        match roc_curve(s, p) {
            Ok(c) => curves.push(c),
            Err(Error::SingleClass) => {}
            Err(e) => return Err(e),
        }
    }
    if curves.is_empty() {
        return Err(Error::SingleClass);
    }
    if curves.len() == 1 {
        let a = auc(&curves[0]);
        return Ok((curves.pop().unwrap(), a));
    }
    let mean_auc = curves.iter().map(|c| auc(c)).sum::<f64>() / curves.len() as f64;
    let mut knots: Vec<f64> = curves.iter().flatten().map(|p| p.fpr).collect();
    knots.sort_by(f64::total_cmp);
    knots.dedup();
    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0 }];
    for &f in &knots {
        let tpr = curves.iter().map(|c| tpr_at(c, f)).sum::<f64>() / curves.len() as f64;
        points.push(RocPoint { fpr: f, tpr });
    }
    Ok((points, mean_auc))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_examples() {
        let all = accuracy(&[0, 1, 1], &[0, 1, 1], 2).unwrap();
        assert_eq!(all.per_class, vec![Some(1.0), Some(1.0)]);
        assert_eq!(all.average, 1.0);
        let half = accuracy(&[0, 1, 1, 0], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(half.average, 0.5);
        let uneven = accuracy(&[0, 0, 1, 0, 0, 0], &[0, 0, 1, 1, 1, 1], 2).unwrap();
        assert_eq!(uneven.average, 0.625);
        let absent = accuracy(&[0, 0], &[0, 0], 3).unwrap();
        assert_eq!(absent.per_class, vec![Some(1.0), None, None]);
        assert_eq!(absent.average, 1.0);
        assert!(matches!(accuracy(&[], &[], 2), Err(Error::EmptyInput)));
    }

    #[test]
    fn roc_examples() {
        let sep = roc_curve(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap();
        assert!(sep.contains(&RocPoint { fpr: 0.0, tpr: 1.0 }));
        assert_eq!(auc(&sep), 1.0);
        let inv = roc_curve(&[0.1, 0.2, 0.8, 0.9], &[true, true, false, false]).unwrap();
        assert_eq!(auc(&inv), 0.0);
        let ties = roc_curve(&[0.5; 4], &[true, false, true, false]).unwrap();
        assert_eq!(
            ties,
            vec![RocPoint { fpr: 0.0, tpr: 0.0 }, RocPoint { fpr: 1.0, tpr: 1.0 }]
        );
        assert_eq!(auc(&ties), 0.5);
        assert!(matches!(roc_curve(&[0.1, 0.2], &[true, true]), Err(Error::SingleClass)));
    }

    #[test]
    fn macro_average_of_identical_curves() {
        let s = vec![0.9, 0.3, 0.6, 0.1];
        let p = vec![true, false, true, false];
        let single = roc_curve(&s, &p).unwrap();
        let (curve, a) = macro_roc(&[s.clone(), s], &[p.clone(), p]).unwrap();
        assert_eq!(a, auc(&single));
        assert_eq!(auc(&curve), auc(&single));
        assert_eq!(curve.last(), Some(&RocPoint { fpr: 1.0, tpr: 1.0 }));
    }
}
