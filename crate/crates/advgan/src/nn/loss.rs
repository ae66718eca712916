//! Classification losses and their logit gradients.

use ndarray::{Array1, Array2, Axis};

use crate::Scalar;

/// Row-wise numerically stable softmax.
pub fn softmax<F: Scalar>(logits: &Array2<F>) -> Array2<F> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

pub fn log_softmax<F: Scalar>(logits: &Array2<F>) -> Array2<F> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let logsum = row.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
        row.mapv_inplace(|v| v - logsum);
    }
    out
}

/// Mean cross-entropy against integer labels, with the gradient with respect
/// to the logits (mean reduction).
pub fn cross_entropy<F: Scalar>(logits: &Array2<F>, labels: &[usize]) -> (F, Array2<F>) {
    let n = logits.dim().0;
    assert_eq!(n, labels.len(), "logit/label batch sizes differ");
    let ls = log_softmax(logits);
    let mut loss = F::zero();
    for (i, &y) in labels.iter().enumerate() {
        loss = loss - ls[[i, y]];
    }
    let nf = F::from_usize(n).unwrap();
    loss = loss / nf;
    let mut grad = softmax(logits);
    for (i, &y) in labels.iter().enumerate() {
        grad[[i, y]] = grad[[i, y]] - F::one();
    }
    grad.mapv_inplace(|v| v / nf);
    (loss, grad)
}

/// Mean cross-entropy against soft target distributions (distillation),
/// with the logit gradient.
pub fn soft_cross_entropy<F: Scalar>(logits: &Array2<F>, targets: &Array2<F>) -> (F, Array2<F>) {
    let n = logits.dim().0;
    assert_eq!(logits.dim(), targets.dim(), "logit/target shapes differ");
    let ls = log_softmax(logits);
    let loss = -(targets * &ls).sum() / F::from_usize(n).unwrap();
    let nf = F::from_usize(n).unwrap();
    let grad = (softmax(logits) - targets).mapv(|v| v / nf);
    (loss, grad)
}

/// Per-instance margin loss on logits: `max(max_{i != t} z_i - z_t, kappa)`.
///
/// With `kappa = 0` the loss reaches its floor exactly when the target class
/// holds the (unique) arg max.
pub fn cw_margin<F: Scalar>(logits: &Array2<F>, targets: &[usize], kappa: F) -> Array1<F> {
    let n = logits.dim().0;
    assert_eq!(n, targets.len(), "logit/target batch sizes differ");
    Array1::from_shape_fn(n, |i| {
        let t = targets[i];
        let row = logits.row(i);
        let best_other = row
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != t)
            .map(|(_, &v)| v)
            .fold(F::neg_infinity(), F::max);
        (best_other - row[t]).max(kappa)
    })
}

/// Mean margin loss and its logit (sub)gradient; the gradient is zero on
/// instances already at the kappa floor.
pub fn cw_margin_mean<F: Scalar>(
    logits: &Array2<F>,
    targets: &[usize],
    kappa: F,
) -> (F, Array2<F>) {
    let n = logits.dim().0;
    let nf = F::from_usize(n).unwrap();
    let mut grad = Array2::<F>::zeros(logits.raw_dim());
    let mut total = F::zero();
    for i in 0..n {
        let t = targets[i];
        let row = logits.row(i);
        let (mut best_j, mut best_v) = (usize::MAX, F::neg_infinity());
        for (j, &v) in row.iter().enumerate() {
            if j != t && v > best_v {
                best_v = v;
                best_j = j;
            }
        }
        let margin = best_v - row[t];
        if margin > kappa {
            total = total + margin;
            grad[[i, best_j]] = F::one() / nf;
            grad[[i, t]] = -F::one() / nf;
        } else {
            total = total + kappa;
        }
    }
    (total / nf, grad)
}

/// Untargeted counterpart: `max(z_y - max_{i != y} z_i, kappa)` pushes the
/// true class below the runner-up.
pub fn cw_margin_untargeted_mean<F: Scalar>(
    logits: &Array2<F>,
    labels: &[usize],
    kappa: F,
) -> (F, Array2<F>) {
    let n = logits.dim().0;
    let nf = F::from_usize(n).unwrap();
    let mut grad = Array2::<F>::zeros(logits.raw_dim());
    let mut total = F::zero();
    for i in 0..n {
        let y = labels[i];
        let row = logits.row(i);
        let (mut best_j, mut best_v) = (usize::MAX, F::neg_infinity());
        for (j, &v) in row.iter().enumerate() {
            if j != y && v > best_v {
                best_v = v;
                best_j = j;
            }
        }
        let margin = row[y] - best_v;
        if margin > kappa {
            total = total + margin;
            grad[[i, y]] = F::one() / nf;
            grad[[i, best_j]] = -F::one() / nf;
        } else {
            total = total + kappa;
        }
    }
    (total / nf, grad)
}

pub fn argmax_rows<F: Scalar>(logits: &Array2<F>) -> Vec<usize> {
    logits
        .axis_iter(Axis(0))
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(j, _)| j)
                .unwrap()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn softmax_rows_sum_to_one() {
        let z = array![[1.0f64, 2.0, 3.0], [-5.0, 0.0, 5.0]];
        let p = softmax(&z);
        for row in p.rows() {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn margin_loss_matches_hand_computed_cases() {
        // target already dominates
        let z = array![[2.0f64, 5.0, 1.0]];
        assert_abs_diff_eq!(cw_margin(&z, &[1], 0.0)[0], 0.0);
        // target trails by 3
        let z = array![[5.0f64, 2.0, 1.0]];
        assert_abs_diff_eq!(cw_margin(&z, &[1], 0.0)[0], 3.0);
        // tie hits the kappa floor
        let z = array![[3.0f64, 3.0, 0.0]];
        assert_abs_diff_eq!(cw_margin(&z, &[0], 0.5)[0], 0.5);
    }

    #[test]
    fn margin_floor_iff_target_argmax() {
        let z = array![[0.1f64, 0.9, -0.3], [1.5, 0.2, 0.3]];
        let m = cw_margin(&z, &[1, 2], 0.0);
        assert!(m[0] <= 0.0);
        assert!(m[1] > 0.0);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let z = array![[0.5f64, -0.2, 1.0]];
        let (_, g) = cross_entropy(&z, &[2]);
        let p = softmax(&z);
        assert_abs_diff_eq!(g[[0, 0]], p[[0, 0]], epsilon = 1e-12);
        assert_abs_diff_eq!(g[[0, 2]], p[[0, 2]] - 1.0, epsilon = 1e-12);
    }
}
