//! Max pooling (3x3, stride 2, no padding in the backbones) with cached
//! argmax indices for the backward scatter.

use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct PoolSpec {
    pub k: usize,
    pub stride: usize,
}

impl PoolSpec {
    pub fn backbone() -> Self {
        PoolSpec { k: 3, stride: 2 }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h - self.k) / self.stride + 1,
            (w - self.k) / self.stride + 1,
        )
    }
}

/// Returns the pooled map and, per output element, the flat index of the
/// winning input element (first maximum in scan order; deterministic).
pub fn maxpool_forward<T: Scalar>(x: &Tensor<T>, spec: &PoolSpec) -> (Tensor<T>, Vec<u32>) {
    let d = x.dims();
    assert_eq!(d.len(), 4, "pool expects NHWC");
    let (n, h, w, c) = (d[0], d[1], d[2], d[3]);
    let (ho, wo) = spec.out_hw(h, w);
    let mut y = Tensor::zeros(&[n, ho, wo, c]);
    let mut arg = vec![0u32; n * ho * wo * c];
    let xd = x.data();
    let yd = y.data_mut();
    for ni in 0..n {
        let x_base = ni * h * w * c;
        for oy in 0..ho {
            for ox in 0..wo {
                let out_base = ((ni * ho + oy) * wo + ox) * c;
                for ci in 0..c {
                    let mut best = T::from_f64(f64::NEG_INFINITY);
                    let mut best_idx = 0u32;
                    for ky in 0..spec.k {
                        let iy = oy * spec.stride + ky;
                        for kx in 0..spec.k {
                            let ix = ox * spec.stride + kx;
                            let idx = x_base + (iy * w + ix) * c + ci;
                            let v = xd[idx];
                            if v > best {
                                best = v;
                                best_idx = idx as u32;
                            }
                        }
                    }
                    yd[out_base + ci] = best;
                    arg[out_base + ci] = best_idx;
                }
            }
        }
    }
    (y, arg)
}

/// Scatter `dy` back to the argmax positions.
pub fn maxpool_backward<T: Scalar>(dy: &Tensor<T>, argmax: &[u32], x_dims: &[usize]) -> Tensor<T> {
    assert_eq!(dy.numel(), argmax.len(), "pool argmax length");
    let mut dx = Tensor::zeros(x_dims);
    let dxd = dx.data_mut();
    for (g, &idx) in dy.data().iter().zip(argmax) {
        dxd[idx as usize] += *g;
    }
    dx
}
