use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= classes) {
        Some(&label) => Err(Error::LabelOutOfRange { label, classes }),
        None => Ok(()),
    }
}

/// Negative log softmax probability of `label` for one row of logits.
#[inline]
pub(crate) fn nll(row: &[f64], label: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - row[label]
}

/// Mean cross-entropy of `logits` (batch x classes) against integer labels.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if logits.shape().len() != 2 || logits.rows() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "logits {:?} vs {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let classes = logits.shape()[1];
    check_labels(labels, classes)?;
    let total = nll_sum(logits.data(), classes, labels, 0.0);
    Ok(total / labels.len() as f64)
}

/// Adds each example's loss to `acc` in order. Callers that evaluate a set in
/// chunks thread the accumulator through to get the same bits as one batch.
pub(crate) fn nll_sum(logits: &[f64], classes: usize, labels: &[usize], mut acc: f64) -> f64 {
    for (row, &label) in logits.chunks_exact(classes).zip(labels) {
        acc += nll(row, label);
    }
    acc
}

/// Mean loss and its gradient w.r.t. the logits.
pub(crate) fn cross_entropy_grad(logits: &[f64], classes: usize, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    check_labels(labels, classes)?;
    let batch = labels.len();
    let inv = 1.0 / batch as f64;
    let mut grad = vec![0.0; logits.len()];
    let mut total = 0.0;
    for ((row, g), &label) in logits
        .chunks_exact(classes)
        .zip(grad.chunks_exact_mut(classes))
        .zip(labels)
    {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (gi, &v) in g.iter_mut().zip(row) {
            *gi = (v - max).exp();
            sum += *gi;
        }
        total += max + sum.ln() - row[label];
        for gi in g.iter_mut() {
            *gi *= inv / sum;
        }
        g[label] -= inv;
    }
    Ok((total * inv, grad))
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_classes() {
        let logits = Tensor::new(vec![2, 10], vec![0.3; 20]).unwrap();
        let l = cross_entropy(&logits, &[0, 7]).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_margin_is_nearly_zero() {
        let logits = Tensor::new(vec![1, 3], vec![50.0, 0.0, 0.0]).unwrap();
        assert!(cross_entropy(&logits, &[0]).unwrap() < 1e-9);
    }

    #[test]
    fn two_class_hand_value() {
        // -ln(e / (e + e^2)) = ln(1 + e)
        let oracle = (1.0 + std::f64::consts::E).ln();
        let logits = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let l = cross_entropy(&logits, &[0]).unwrap();
        assert!((l - oracle).abs() < 1e-12);
        assert!((l - 1.313262).abs() < 1e-6);
    }

    #[test]
    fn out_of_range_label_rejected() {
        let logits = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            cross_entropy(&logits, &[2]),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn gradient_matches_loss() {
        let logits = [0.2, -1.0, 3.0, 0.5, 0.5, -0.5];
        let labels = [2, 0];
        let (l, g) = cross_entropy_grad(&logits, 3, &labels).unwrap();
        let t = Tensor::new(vec![2, 3], logits.to_vec()).unwrap();
        assert!((l - cross_entropy(&t, &labels).unwrap()).abs() < 1e-14);
        let h = 1e-6;
        for k in 0..6 {
            let mut p = logits;
            p[k] += h;
            let mut m = logits;
            m[k] -= h;
            let fd = (cross_entropy(&Tensor::new(vec![2, 3], p.to_vec()).unwrap(), &labels).unwrap()
                - cross_entropy(&Tensor::new(vec![2, 3], m.to_vec()).unwrap(), &labels).unwrap())
                / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-8);
        }
    }
}
