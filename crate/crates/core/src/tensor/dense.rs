use super::{Scalar, Tensor};
use crate::{Error, Result};

fn check<T: Scalar>(op: &'static str, input: &Tensor<T>, weights: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (n, d) = input.dims2(op)?;
    let (wd, m) = weights.dims2(op)?;
    if wd != d {
        return Err(Error::shape(op, "weights rows (input features)", d, wd));
    }
    Ok((n, d, m))
}

/// `input · weights + bias` for `input: [N, D]`, `weights: [D, M]`, `bias: [M]`.
pub fn dense_forward<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d, m) = check("dense_forward", input, weights)?;
    if bias.shape() != [m] {
        return Err(Error::shape("dense_forward", "bias", format!("[{m}]"), format!("{:?}", bias.shape())));
    }
    let mut out = Vec::with_capacity(n * m);
    for _ in 0..n {
        out.extend_from_slice(bias.data());
    }
    T::gemm(n, d, m, T::one(), input.data(), (d, 1), weights.data(), (m, 1), T::one(), &mut out, (m, 1));
    Tensor::new([n, m], out)
}

#[derive(Debug, Clone)]
pub struct DenseGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn dense_backward<T: Scalar>(grad_out: &Tensor<T>, input: &Tensor<T>, weights: &Tensor<T>) -> Result<DenseGrads<T>> {
    let (n, d, m) = check("dense_backward", input, weights)?;
    if grad_out.shape() != [n, m] {
        return Err(Error::shape(
            "dense_backward",
            "grad_out",
            format!("[{n}, {m}]"),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let g = grad_out.data();
    let mut gi = vec![T::zero(); n * d];
    T::gemm(n, m, d, T::one(), g, (m, 1), weights.data(), (1, m), T::zero(), &mut gi, (d, 1));
    let mut gw = vec![T::zero(); d * m];
    T::gemm(d, n, m, T::one(), input.data(), (1, d), g, (m, 1), T::zero(), &mut gw, (m, 1));
    let mut gb = vec![T::zero(); m];
    for row in g.chunks(m) {
        for (acc, &v) in gb.iter_mut().zip(row) {
            *acc += v;
        }
    }
    Ok(DenseGrads {
        input: Tensor::new([n, d], gi)?,
        weights: Tensor::new([d, m], gw)?,
        bias: Tensor::new([m], gb)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weights_pass_input_through() {
        let x = Tensor::<f32>::from_fn([2, 3], |i| i as f32 - 2.5);
        let w = Tensor::from_fn([3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let y = dense_forward(&x, &w, &Tensor::zeros([3])).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn zero_input_yields_bias() {
        let x = Tensor::<f32>::zeros([3, 4]);
        let w = Tensor::from_fn([4, 2], |i| i as f32);
        let b = Tensor::new([2], vec![0.5, -1.5]).unwrap();
        let y = dense_forward(&x, &w, &b).unwrap();
        assert_eq!(y.data(), [0.5, -1.5, 0.5, -1.5, 0.5, -1.5]);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let x = Tensor::<f32>::zeros([1, 4]);
        let w = Tensor::zeros([3, 2]);
        let err = dense_forward(&x, &w, &Tensor::zeros([2])).unwrap_err();
        assert!(err.to_string().contains("input features"));
    }

    #[test]
    fn backward_of_tiny_case_by_hand() {
        // y = x·W + b with x = [1, 2], W = [[1, 0], [0, 1]], g = [3, 4]
        let x = Tensor::<f64>::new([1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let g = Tensor::new([1, 2], vec![3.0, 4.0]).unwrap();
        let grads = dense_backward(&g, &x, &w).unwrap();
        assert_eq!(grads.input.data(), [3.0, 4.0]);
        assert_eq!(grads.weights.data(), [3.0, 4.0, 6.0, 8.0]);
        assert_eq!(grads.bias.data(), [3.0, 4.0]);
    }
}
