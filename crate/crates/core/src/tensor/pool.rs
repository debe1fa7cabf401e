use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::{Error, Result};

/// Max-pooling window and stride (no padding).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaxPool {
    pub window: usize,
    pub stride: usize,
}

/// Output `(h, w)` of a max-pool over `(h, w)`.
pub fn pool_extent(pool: MaxPool, h: usize, w: usize) -> Result<(usize, usize)> {
    if pool.window == 0 || pool.stride == 0 {
        return Err(Error::InvalidConfig(format!(
            "pool window and stride must be positive: {pool:?}"
        )));
    }
    if pool.window > h || pool.window > w {
        return Err(Error::shape(
            "maxpool",
            "spatial extent",
            format!(">= window {}", pool.window),
            format!("{h}x{w}"),
        ));
    }
    Ok(((h - pool.window) / pool.stride + 1, (w - pool.window) / pool.stride + 1))
}

/// Max over each window. Returns the output and, per output element, the
/// linear index into `input` of the selected value. Ties go to the lowest
/// linear index.
pub fn maxpool_forward<T: Scalar>(input: &Tensor<T>, pool: MaxPool) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = input.dims4("maxpool_forward")?;
    let (oh, ow) = pool_extent(pool, h, w)?;
    let planes = n * c;
    let mut out = vec![T::zero(); planes * oh * ow];
    let mut argmax = vec![0usize; planes * oh * ow];
    out.par_chunks_mut(oh * ow)
        .zip(argmax.par_chunks_mut(oh * ow))
        .enumerate()
        .for_each(|(p, (o, a))| {
            let base = p * h * w;
            let plane = &input.data()[base..base + h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let (y0, x0) = (oy * pool.stride, ox * pool.stride);
                    let mut best = y0 * w + x0;
                    for y in y0..y0 + pool.window {
                        for x in x0..x0 + pool.window {
                            // Strict comparison in row-major scan keeps the
                            // lowest index on ties.
                            if plane[y * w + x] > plane[best] {
                                best = y * w + x;
                            }
                        }
                    }
                    o[oy * ow + ox] = plane[best];
                    a[oy * ow + ox] = base + best;
                }
            }
        });
    Ok((Tensor::new([n, c, oh, ow], out)?, argmax))
}

/// Routes each output gradient to the input position that won the max.
pub fn maxpool_backward<T: Scalar>(grad_out: &Tensor<T>, argmax: &[usize], input_shape: &[usize]) -> Result<Tensor<T>> {
    if grad_out.len() != argmax.len() {
        return Err(Error::shape("maxpool_backward", "argmax length", grad_out.len(), argmax.len()));
    }
    let len: usize = input_shape.iter().product();
    let mut grad = vec![T::zero(); len];
    for (&g, &idx) in grad_out.data().iter().zip(argmax) {
        if idx >= len {
            return Err(Error::shape("maxpool_backward", "argmax index", format!("< {len}"), idx));
        }
        grad[idx] += g;
    }
    Tensor::new(input_shape.to_vec(), grad)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    const P: MaxPool = MaxPool { window: 2, stride: 2 };

    #[test]
    fn constant_input_routes_to_first_index() {
        let x = Tensor::<f32>::full([1, 1, 4, 4], 3.0);
        let (y, arg) = maxpool_forward(&x, P).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.0));
        assert_eq!(arg, vec![0, 2, 8, 10]);
        let g = maxpool_backward(&Tensor::full([1, 1, 2, 2], 1.0), &arg, x.shape()).unwrap();
        let mut expected = vec![0.0; 16];
        for i in [0, 2, 8, 10] {
            expected[i] = 1.0;
        }
        assert_eq!(g.data(), expected);
    }

    #[test]
    fn ramp_selects_bottom_right() {
        let x = Tensor::<f32>::from_fn([1, 1, 4, 4], |i| i as f32);
        let (y, arg) = maxpool_forward(&x, P).unwrap();
        assert_eq!(y.data(), [5.0, 7.0, 13.0, 15.0]);
        assert_eq!(arg, vec![5, 7, 13, 15]);
    }

    #[test]
    fn overlapping_windows_accumulate() {
        let x = Tensor::<f64>::from_fn([1, 1, 3, 5], |i| if i == 7 { 10.0 } else { 0.0 });
        let pool = MaxPool { window: 3, stride: 1 };
        let (y, arg) = maxpool_forward(&x, pool).unwrap();
        assert_eq!(y.data(), [10.0, 10.0, 10.0]);
        let g = maxpool_backward(&Tensor::full([1, 1, 1, 3], 1.0), &arg, x.shape()).unwrap();
        assert_eq!(g.data()[7], 3.0);
    }

    #[test]
    fn window_larger_than_input_is_rejected() {
        let x = Tensor::<f32>::zeros([1, 1, 2, 2]);
        assert!(maxpool_forward(&x, MaxPool { window: 3, stride: 1 }).is_err());
    }

    #[test]
    fn matches_brute_force_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (h, w) = (rng.gen_range(3..9), rng.gen_range(3..9));
            let pool = MaxPool { window: rng.gen_range(1..=3), stride: rng.gen_range(1..=3) };
            let x = Tensor::<f64>::from_fn([2, 2, h, w], |_| rng.gen_range(-1.0..1.0));
            let (y, _) = maxpool_forward(&x, pool).unwrap();
            let (oh, ow) = pool_extent(pool, h, w).unwrap();
            for p in 0..4 {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut m = f64::NEG_INFINITY;
                        for dy in 0..pool.window {
                            for dx in 0..pool.window {
                                m = m.max(x.data()[p * h * w + (oy * pool.stride + dy) * w + ox * pool.stride + dx]);
                            }
                        }
                        assert_eq!(y.data()[p * oh * ow + oy * ow + ox], m);
                    }
                }
            }
        }
    }
}
