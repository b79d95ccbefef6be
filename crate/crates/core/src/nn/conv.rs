//! 2-D convolution via im2col + GEMM, with the matching col2im backward.
//! Activations are NHWC; kernels are stored as a (kh*kw*cin, cout) matrix
//! whose row order is (ky, kx, channel).

use super::{Scratch, MAX_COL_ELEMS};
use crate::tensor::{gemm, Scalar, Tensor};

/// Static description of one convolution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvSpec {
    pub kh: usize,
    pub kw: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    /// Symmetric zero padding; 0 = "valid", (k-1)/2 with stride 1 = "same".
    pub pad: usize,
}

impl ConvSpec {
    pub fn valid(k: usize, cin: usize, cout: usize, stride: usize) -> Self {
        ConvSpec {
            kh: k,
            kw: k,
            cin,
            cout,
            stride,
            pad: 0,
        }
    }

    pub fn same(k: usize, cin: usize, cout: usize) -> Self {
        assert!(k % 2 == 1, "same-padding needs an odd kernel");
        ConvSpec {
            kh: k,
            kw: k,
            cin,
            cout,
            stride: 1,
            pad: (k - 1) / 2,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let ho = (h + 2 * self.pad - self.kh) / self.stride + 1;
        let wo = (w + 2 * self.pad - self.kw) / self.stride + 1;
        (ho, wo)
    }

    pub fn weight_dims(&self) -> [usize; 2] {
        [self.kh * self.kw * self.cin, self.cout]
    }
}

/// Fill `col` (rows = chunk output positions, cols = kh*kw*cin) from samples
/// [n0, n1) of `x`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col<T: Scalar>(
    x: &[T],
    h: usize,
    w: usize,
    spec: &ConvSpec,
    n0: usize,
    n1: usize,
    ho: usize,
    wo: usize,
    col: &mut [T],
) {
    let k = spec.kh * spec.kw * spec.cin;
    let cin = spec.cin;
    let sample = h * w * cin;
    let mut row = 0usize;
    for n in n0..n1 {
        let xs = &x[n * sample..(n + 1) * sample];
        for oy in 0..ho {
            for ox in 0..wo {
                let base = row * k;
                row += 1;
                for ky in 0..spec.kh {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    let seg0 = base + ky * spec.kw * cin;
                    if iy < 0 || iy as usize >= h {
                        col[seg0..seg0 + spec.kw * cin]
                            .iter_mut()
                            .for_each(|v| *v = T::ZERO);
                        continue;
                    }
                    let iy = iy as usize;
                    for kx in 0..spec.kw {
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        let seg = seg0 + kx * cin;
                        if ix < 0 || ix as usize >= w {
                            col[seg..seg + cin].iter_mut().for_each(|v| *v = T::ZERO);
                        } else {
                            let src = (iy * w + ix as usize) * cin;
                            col[seg..seg + cin].copy_from_slice(&xs[src..src + cin]);
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add a column matrix (gradient of im2col) back into `dx`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im_add<T: Scalar>(
    col: &[T],
    h: usize,
    w: usize,
    spec: &ConvSpec,
    n0: usize,
    n1: usize,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let k = spec.kh * spec.kw * spec.cin;
    let cin = spec.cin;
    let sample = h * w * cin;
    let mut row = 0usize;
    for n in n0..n1 {
        let xs = &mut dx[n * sample..(n + 1) * sample];
        for oy in 0..ho {
            for ox in 0..wo {
                let base = row * k;
                row += 1;
                for ky in 0..spec.kh {
                    let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    let iy = iy as usize;
                    for kx in 0..spec.kw {
                        let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        let src = base + (ky * spec.kw + kx) * cin;
                        let dst = (iy * w + ix as usize) * cin;
                        for c in 0..cin {
                            xs[dst + c] += col[src + c];
                        }
                    }
                }
            }
        }
    }
}

fn samples_per_chunk(ho: usize, wo: usize, k: usize, n: usize) -> usize {
    let per_sample = ho * wo * k;
    (MAX_COL_ELEMS / per_sample.max(1)).clamp(1, n.max(1))
}

/// y[n, oy, ox, :] = W^T . patch + b, for every output position.
pub fn conv_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    spec: &ConvSpec,
    scratch: &mut Scratch<T>,
) -> Tensor<T> {
    let [n, h, wd, cin] = x_dims(x);
    assert_eq!(cin, spec.cin, "conv input channels");
    assert_eq!(w.dims(), spec.weight_dims(), "conv weight dims");
    assert_eq!(b.dims(), [spec.cout], "conv bias dims");
    let (ho, wo) = spec.out_hw(h, wd);
    let k = spec.kh * spec.kw * spec.cin;
    let mut y = Tensor::zeros(&[n, ho, wo, spec.cout]);
    let chunk = samples_per_chunk(ho, wo, k, n);
    let mut n0 = 0;
    while n0 < n {
        let n1 = (n0 + chunk).min(n);
        let rows = (n1 - n0) * ho * wo;
        let col = scratch.col(rows * k);
        im2col(x.data(), h, wd, spec, n0, n1, ho, wo, col);
        let out = &mut y.data_mut()[n0 * ho * wo * spec.cout..n1 * ho * wo * spec.cout];
        gemm(
            false,
            false,
            rows,
            spec.cout,
            k,
            T::ONE,
            col,
            w.data(),
            T::ZERO,
            out,
        );
        n0 = n1;
    }
    // bias
    let bd = b.data();
    for row in y.data_mut().chunks_exact_mut(spec.cout) {
        for (v, bv) in row.iter_mut().zip(bd) {
            *v += *bv;
        }
    }
    y
}

/// Gradients of a conv layer. `dy` is [n, ho, wo, cout]; returns (dw, db)
/// and, when `want_dx`, the input gradient.
pub fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: &ConvSpec,
    dy: &Tensor<T>,
    want_dx: bool,
    scratch: &mut Scratch<T>,
) -> (Tensor<T>, Tensor<T>, Option<Tensor<T>>) {
    let [n, h, wd, _] = x_dims(x);
    let (ho, wo) = spec.out_hw(h, wd);
    assert_eq!(dy.dims(), [n, ho, wo, spec.cout], "conv dy dims");
    let k = spec.kh * spec.kw * spec.cin;

    let mut dw = Tensor::zeros(&spec.weight_dims());
    let mut db = Tensor::zeros(&[spec.cout]);
    for row in dy.data().chunks_exact(spec.cout) {
        for (g, d) in db.data_mut().iter_mut().zip(row) {
            *g += *d;
        }
    }
    let mut dx = if want_dx {
        Some(Tensor::zeros(&[n, h, wd, spec.cin]))
    } else {
        None
    };

    let chunk = samples_per_chunk(ho, wo, k, n);
    let mut n0 = 0;
    while n0 < n {
        let n1 = (n0 + chunk).min(n);
        let rows = (n1 - n0) * ho * wo;
        let dy_rows = &dy.data()[n0 * ho * wo * spec.cout..n1 * ho * wo * spec.cout];

        // dW += col^T . dy; col is (rows, k) so col^T is (k, rows).
        let col = scratch.col(rows * k);
        im2col(x.data(), h, wd, spec, n0, n1, ho, wo, col);
        gemm(
            true,
            false,
            k,
            spec.cout,
            rows,
            T::ONE,
            col,
            dy_rows,
            T::ONE,
            dw.data_mut(),
        );

        if let Some(dx) = dx.as_mut() {
            // dcol = dy . W^T, then scatter back.
            let dcol = scratch.col2(rows * k);
            gemm(
                false,
                true,
                rows,
                k,
                spec.cout,
                T::ONE,
                dy_rows,
                w.data(),
                T::ZERO,
                dcol,
            );
            col2im_add(dcol, h, wd, spec, n0, n1, ho, wo, dx.data_mut());
        }
        n0 = n1;
    }
    (dw, db, dx)
}

fn x_dims<T: Scalar>(x: &Tensor<T>) -> [usize; 4] {
    let d = x.dims();
    assert_eq!(d.len(), 4, "conv expects NHWC, got {:?}", d);
    [d[0], d[1], d[2], d[3]]
}
