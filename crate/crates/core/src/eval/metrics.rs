use std::collections::BTreeSet;

/// Unweighted mean of per-class F1 over the classes present in either the
/// truth or the predictions.
pub fn macro_f1(truth: &[usize], pred: &[usize]) -> f64 {
    assert_eq!(truth.len(), pred.len());
    let labels: BTreeSet<usize> = truth.iter().chain(pred).copied().collect();
    if labels.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for &c in &labels {
        let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
        for (&t, &p) in truth.iter().zip(pred) {
            match (t == c, p == c) {
                (true, true) => tp += 1.0,
                (false, true) => fp += 1.0,
                (true, false) => fn_ += 1.0,
                _ => {}
            }
        }
        let denom = 2.0 * tp + fp + fn_;
        if denom > 0.0 {
            total += 2.0 * tp / denom;
        }
    }
    total / labels.len() as f64
}

/// `sum |y - yhat| / sum |y - mean(y)|`. Infinite when the truth is constant
/// and the prediction is not; 0 when both are exact.
pub fn relative_absolute_error(truth: &[f64], pred: &[f64]) -> f64 {
    assert_eq!(truth.len(), pred.len());
    let mean = crate::util::mean(truth);
    let num: f64 = truth.iter().zip(pred).map(|(t, p)| (t - p).abs()).sum();
    let den: f64 = truth.iter().map(|t| (t - mean).abs()).sum();
    if den == 0.0 {
        return if num == 0.0 { 0.0 } else { f64::INFINITY };
    }
    num / den
}

/// `1 - RAE`, clipped to `[0, 1]`.
pub fn one_minus_rae(truth: &[f64], pred: &[f64]) -> f64 {
    (1.0 - relative_absolute_error(truth, pred)).clamp(0.0, 1.0)
}
