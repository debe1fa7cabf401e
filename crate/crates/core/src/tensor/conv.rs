use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::{Error, Result};

/// Geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    pub fn square(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvSpec {
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding,
            in_channels,
            out_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_h == 0 || self.kernel_w == 0 || self.stride == 0 {
            return Err(Error::InvalidConfig(format!(
                "kernel and stride must be positive: {self:?}"
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidConfig(format!(
                "channel counts must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// Output `(h, w)` for an input of `(h, w)`; errors when the padded input
    /// is smaller than the kernel.
    pub fn output_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < self.kernel_h {
            return Err(Error::shape("conv2d", "height", format!(">= {}", self.kernel_h), ph));
        }
        if pw < self.kernel_w {
            return Err(Error::shape("conv2d", "width", format!(">= {}", self.kernel_w), pw));
        }
        Ok((
            (ph - self.kernel_h) / self.stride + 1,
            (pw - self.kernel_w) / self.stride + 1,
        ))
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn check_operands<T: Scalar>(
        &self,
        op: &'static str,
        input: &Tensor<T>,
        filters: &Tensor<T>,
    ) -> Result<(usize, usize, usize, usize, usize)> {
        let (n, c, h, w) = input.dims4(op)?;
        if c != self.in_channels {
            return Err(Error::shape(op, "input channels", self.in_channels, c));
        }
        let expected = [self.out_channels, self.in_channels, self.kernel_h, self.kernel_w];
        if filters.shape() != expected {
            return Err(Error::shape(
                op,
                "filters",
                format!("{expected:?}"),
                format!("{:?}", filters.shape()),
            ));
        }
        let (oh, ow) = self.output_extent(h, w)?;
        Ok((n, h, w, oh, ow))
    }
}

/// Unfolds one sample `[C, H, W]` into `[C·kh·kw, oh·ow]`.
fn im2col<T: Scalar>(x: &[T], h: usize, w: usize, spec: &ConvSpec, oh: usize, ow: usize, col: &mut [T]) {
    let (kh, kw, s, p) = (spec.kernel_h, spec.kernel_w, spec.stride, spec.padding);
    let cols = oh * ow;
    for c in 0..spec.in_channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let row = &mut col[((c * kh + i) * kw + j) * cols..][..cols];
                for oy in 0..oh {
                    let iy = (oy * s + i) as isize - p as isize;
                    let out_row = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, dst) in out_row.iter_mut().enumerate() {
                        let ix = (ox * s + j) as isize - p as isize;
                        *dst = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into `[C, H, W]`.
fn col2im<T: Scalar>(col: &[T], h: usize, w: usize, spec: &ConvSpec, oh: usize, ow: usize, x: &mut [T]) {
    let (kh, kw, s, p) = (spec.kernel_h, spec.kernel_w, spec.stride, spec.padding);
    let cols = oh * ow;
    x.fill(T::zero());
    for c in 0..spec.in_channels {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let row = &col[((c * kh + i) * kw + j) * cols..][..cols];
                for oy in 0..oh {
                    let iy = (oy * s + i) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * s + j) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation (no kernel flip) of `input: [N, Cin, H, W]` with
/// `filters: [Cout, Cin, kh, kw]`, plus an optional per-channel bias.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    filters: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let (n, h, w, oh, ow) = spec.check_operands("conv2d_forward", input, filters)?;
    if let Some(b) = bias {
        if b.shape() != [spec.out_channels] {
            return Err(Error::shape(
                "conv2d_forward",
                "bias",
                format!("[{}]", spec.out_channels),
                format!("{:?}", b.shape()),
            ));
        }
    }
    let cout = spec.out_channels;
    let k = spec.patch_len();
    let cols = oh * ow;
    let in_stride = spec.in_channels * h * w;
    let mut out = vec![T::zero(); n * cout * cols];
    if n == 0 {
        return Tensor::new([0, cout, oh, ow], out);
    }

    out.par_chunks_mut(cout * cols)
        .zip(input.data().par_chunks(in_stride))
        .for_each_init(
            || vec![T::zero(); k * cols],
            |col, (y, x)| {
                im2col(x, h, w, spec, oh, ow, col);
                if let Some(b) = bias {
                    for (co, row) in y.chunks_mut(cols).enumerate() {
                        row.fill(b.data()[co]);
                    }
                }
                let beta = if bias.is_some() { T::one() } else { T::zero() };
                T::gemm(cout, k, cols, T::one(), filters.data(), (k, 1), col, (cols, 1), beta, y, (cols, 1));
            },
        );
    Tensor::new([n, cout, oh, ow], out)
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub filters: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Gradients of [`conv2d_forward`] with respect to input, filters and bias.
pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    filters: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<ConvGrads<T>> {
    let (gi, gf, gb) = backward_impl(grad_out, input, filters, spec, true)?;
    Ok(ConvGrads {
        input: gi.expect("requested input gradient"),
        filters: gf,
        bias: gb,
    })
}

/// Filter and bias gradients only; skips the input gradient, which the first
/// layer of a network never needs.
pub fn conv2d_weight_grads<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    filters: &Tensor<T>,
    spec: &ConvSpec,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (_, gf, gb) = backward_impl(grad_out, input, filters, spec, false)?;
    Ok((gf, gb))
}

type BackwardParts<T> = (Option<Tensor<T>>, Tensor<T>, Tensor<T>);

fn backward_impl<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    filters: &Tensor<T>,
    spec: &ConvSpec,
    want_input: bool,
) -> Result<BackwardParts<T>> {
    let (n, h, w, oh, ow) = spec.check_operands("conv2d_backward", input, filters)?;
    let expected = [n, spec.out_channels, oh, ow];
    if grad_out.shape() != expected {
        return Err(Error::shape(
            "conv2d_backward",
            "grad_out",
            format!("{expected:?}"),
            format!("{:?}", grad_out.shape()),
        ));
    }
    let cout = spec.out_channels;
    let k = spec.patch_len();
    let cols = oh * ow;
    let in_stride = spec.in_channels * h * w;

    let mut grad_input = if want_input {
        vec![T::zero(); input.len()]
    } else {
        Vec::new()
    };
    let input_chunks: Vec<Option<&mut [T]>> = if want_input {
        grad_input.chunks_mut(in_stride).map(Some).collect()
    } else {
        (0..n).map(|_| None).collect()
    };

    // Per-sample weight gradients are computed in parallel and summed in
    // sample order afterwards, so the result does not depend on scheduling.
    let per_sample: Vec<(Vec<T>, Vec<T>)> = input
        .data()
        .par_chunks(in_stride)
        .zip(grad_out.data().par_chunks(cout * cols))
        .zip(input_chunks.into_par_iter())
        .map(|((x, g), gin)| {
            let mut col = vec![T::zero(); k * cols];
            im2col(x, h, w, spec, oh, ow, &mut col);
            let mut gf = vec![T::zero(); cout * k];
            // gf[cout×k] = g[cout×cols] · colᵀ[cols×k]
            T::gemm(cout, cols, k, T::one(), g, (cols, 1), &col, (1, cols), T::zero(), &mut gf, (k, 1));
            let gb: Vec<T> = g.chunks(cols).map(|row| row.iter().copied().sum()).collect();
            if let Some(gin) = gin {
                // col ← filtersᵀ[k×cout] · g[cout×cols]
                T::gemm(k, cout, cols, T::one(), filters.data(), (1, k), g, (cols, 1), T::zero(), &mut col, (cols, 1));
                col2im(&col, h, w, spec, oh, ow, gin);
            }
            (gf, gb)
        })
        .collect();

    let mut grad_filters = vec![T::zero(); cout * k];
    let mut grad_bias = vec![T::zero(); cout];
    for (gf, gb) in &per_sample {
        for (acc, v) in grad_filters.iter_mut().zip(gf) {
            *acc += *v;
        }
        for (acc, v) in grad_bias.iter_mut().zip(gb) {
            *acc += *v;
        }
    }

    let grad_input = if want_input {
        Some(Tensor::new(input.shape().to_vec(), grad_input)?)
    } else {
        None
    };
    Ok((
        grad_input,
        Tensor::new(filters.shape().to_vec(), grad_filters)?,
        Tensor::new([cout], grad_bias)?,
    ))
}
