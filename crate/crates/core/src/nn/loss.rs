use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Mean softmax cross-entropy over a `batch x C` logit matrix.
///
/// Returns the loss and its gradient with respect to the logits,
/// `(softmax - onehot) / batch`. Uses the max-shifted log-sum-exp so large
/// logits do not overflow.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (n, c) = match logits.shape() {
        [n, c] => (*n, *c),
        s => return Err(Error::dim("softmax_cross_entropy logits", s, &[labels.len(), 0])),
    };
    if labels.len() != n {
        return Err(Error::dim("softmax_cross_entropy labels", &[labels.len()], &[n]));
    }
    let inv_n = T::one() / T::from_f64(n as f64);
    let mut grad = vec![T::zero(); n * c];
    let mut total = 0.0f64;
    for (i, (row, &y)) in logits.data().chunks(c).zip(labels).enumerate() {
        if y >= c {
            return Err(Error::Index {
                op: "softmax_cross_entropy label",
                index: y,
                bound: c,
            });
        }
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let g = &mut grad[i * c..(i + 1) * c];
        let mut sum = T::zero();
        for (gj, &v) in g.iter_mut().zip(row) {
            *gj = (v - max).exp();
            sum += *gj;
        }
        let log_sum = sum.ln();
        total += (log_sum - (row[y] - max)).to_f64();
        for gj in g.iter_mut() {
            *gj = *gj / sum * inv_n;
        }
        g[y] -= inv_n;
    }
    let loss = T::from_f64(total / n as f64);
    Ok((loss, Tensor::new(vec![n, c], grad)?))
}
