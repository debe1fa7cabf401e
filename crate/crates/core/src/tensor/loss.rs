use super::{Scalar, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct SoftmaxCrossEntropy<T> {
    /// Mean cross-entropy over the batch.
    pub loss: T,
    /// `(probs − onehot) / N`.
    pub grad_logits: Tensor<T>,
    pub probs: Tensor<T>,
}

/// Row-wise softmax of `[N, C]` logits, stabilised by max subtraction.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c) = logits.dims2("softmax")?;
    let mut out = logits.data().to_vec();
    if c == 0 {
        return Tensor::new(logits.shape().to_vec(), out);
    }
    for row in out.chunks_mut(c) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    Tensor::new(logits.shape().to_vec(), out)
}

pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<SoftmaxCrossEntropy<T>> {
    let (n, c) = logits.dims2("softmax_cross_entropy")?;
    if labels.len() != n {
        return Err(Error::shape("softmax_cross_entropy", "labels", n, labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::InvalidArgument(format!("label {bad} out of range for {c} classes")));
    }
    let probs = softmax(logits)?;
    let inv_n = T::one() / T::from_f64(n.max(1) as f64);
    let mut loss = T::zero();
    let mut grad = probs.data().to_vec();
    for (i, (&label, logit_row)) in labels.iter().zip(logits.data().chunks(c)).enumerate() {
        // -log p_y computed from the logits as logsumexp - z_y, which stays
        // finite even when p_y underflows.
        let max = logit_row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + logit_row.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
        loss += lse - logit_row[label];
        grad[i * c + label] -= T::one();
    }
    for g in grad.iter_mut() {
        *g *= inv_n;
    }
    Ok(SoftmaxCrossEntropy {
        loss: loss * inv_n,
        grad_logits: Tensor::new([n, c], grad)?,
        probs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_c() {
        let logits = Tensor::<f64>::zeros([2, 28]);
        let out = softmax_cross_entropy(&logits, &[0, 27]).unwrap();
        assert!((out.loss - 28f64.ln()).abs() < 1e-12);
        assert!((out.loss - 3.3322).abs() < 1e-4);
    }

    #[test]
    fn confident_correct_logit_has_vanishing_loss() {
        let mut logits = Tensor::<f32>::zeros([1, 4]);
        logits.data_mut()[2] = 50.0;
        let out = softmax_cross_entropy(&logits, &[2]).unwrap();
        assert!(out.loss >= 0.0 && out.loss < 1e-6);
    }

    #[test]
    fn rows_sum_to_one_and_grad_is_scaled() {
        let logits = Tensor::<f64>::from_fn([3, 5], |i| (i as f64 * 0.7).sin() * 4.0);
        let out = softmax_cross_entropy(&logits, &[1, 4, 0]).unwrap();
        for row in out.probs.data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let p = out.probs.data()[1];
        assert!((out.grad_logits.data()[1] - (p - 1.0) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_label() {
        let logits = Tensor::<f32>::zeros([1, 3]);
        assert!(softmax_cross_entropy(&logits, &[3]).is_err());
    }
}
