//! Turning a filter plus search features into a localization signal:
//! cross-correlation, bicubic response upsampling, cosine-window blending,
//! and peak extraction.

use crate::nn::conv::{col2im_add, im2col, ConvSpec};
use crate::nn::Scratch;
use crate::tensor::{gemm, Scalar, Tensor};

/// Valid cross-correlation of each sample's search feature map
/// [n, hs, ws, c] with that sample's filter [n, hf, wf, c], producing
/// [n, hs-hf+1, ws-wf+1]. Each output cell is the inner product of the
/// filter with the co-located search window.
pub fn correlate<T: Scalar>(
    search: &Tensor<T>,
    filter: &Tensor<T>,
    scratch: &mut Scratch<T>,
) -> Tensor<T> {
    let sd = search.dims();
    let fd = filter.dims();
    assert_eq!(sd.len(), 4, "search must be NHWC");
    assert_eq!(fd.len(), 4, "filter must be NHWC");
    assert_eq!(sd[0], fd[0], "batch sizes");
    assert_eq!(sd[3], fd[3], "channel counts");
    assert!(
        sd[1] >= fd[1] && sd[2] >= fd[2],
        "filter larger than search"
    );
    let (n, hs, ws, c) = (sd[0], sd[1], sd[2], sd[3]);
    let (hf, wf) = (fd[1], fd[2]);
    let (ho, wo) = (hs - hf + 1, ws - wf + 1);
    let spec = ConvSpec::valid(hf.max(wf), c, 1, 1);
    // Non-square filters would need kh != kw; all callers use square ones.
    assert_eq!(hf, wf, "filter must be square");

    let k = hf * wf * c;
    let fsz = k;
    let col = scratch.col(ho * wo * k);
    let mut out = Tensor::zeros(&[n, ho, wo]);
    for i in 0..n {
        im2col(search.data(), hs, ws, &spec, i, i + 1, ho, wo, col);
        gemm(
            false,
            false,
            ho * wo,
            1,
            k,
            T::ONE,
            col,
            &filter.data()[i * fsz..(i + 1) * fsz],
            T::ZERO,
            &mut out.data_mut()[i * ho * wo..(i + 1) * ho * wo],
        );
    }
    out
}

/// Backward of [`correlate`]: given d(response), returns
/// (d(search features), d(filter)).
pub fn correlate_backward<T: Scalar>(
    search: &Tensor<T>,
    filter: &Tensor<T>,
    d_resp: &Tensor<T>,
    scratch: &mut Scratch<T>,
) -> (Tensor<T>, Tensor<T>) {
    let sd = search.dims();
    let fd = filter.dims();
    let (n, hs, ws, c) = (sd[0], sd[1], sd[2], sd[3]);
    let (hf, wf) = (fd[1], fd[2]);
    let (ho, wo) = (hs - hf + 1, ws - wf + 1);
    assert_eq!(d_resp.dims(), &[n, ho, wo], "d_resp shape");
    let spec = ConvSpec::valid(hf, c, 1, 1);
    let k = hf * wf * c;

    let mut d_search = Tensor::zeros(sd);
    let mut d_filter = Tensor::zeros(fd);
    let (col, dcol) = scratch.col_pair(ho * wo * k, ho * wo * k);
    for i in 0..n {
        let dy = &d_resp.data()[i * ho * wo..(i + 1) * ho * wo];
        // d_filter = col^T . dy
        im2col(search.data(), hs, ws, &spec, i, i + 1, ho, wo, col);
        gemm(
            true,
            false,
            k,
            1,
            ho * wo,
            T::ONE,
            col,
            dy,
            T::ZERO,
            &mut d_filter.data_mut()[i * k..(i + 1) * k],
        );
        // dcol = dy . filter^T  (rank-1: each response cell spreads the
        // filter, scaled by its gradient, over its window)
        gemm(
            false,
            true,
            ho * wo,
            k,
            1,
            T::ONE,
            dy,
            &filter.data()[i * k..(i + 1) * k],
            T::ZERO,
            dcol,
        );
        col2im_add(dcol, hs, ws, &spec, i, i + 1, ho, wo, d_search.data_mut());
    }
    (d_search, d_filter)
}

/// Catmull-Rom kernel (bicubic with a = -0.5).
fn cubic_weight(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        (1.5 * x - 2.5) * x * x + 1.0
    } else if x < 2.0 {
        ((-0.5 * x + 2.5) * x - 4.0) * x + 2.0
    } else {
        0.0
    }
}

struct Taps {
    idx: [usize; 4],
    w: [f64; 4],
}

fn taps_for(len: usize, factor: usize) -> Vec<Taps> {
    let out_len = (len - 1) * factor + 1;
    (0..out_len)
        .map(|u| {
            let i0 = u / factor;
            let frac = (u % factor) as f64 / factor as f64;
            let mut t = Taps {
                idx: [0; 4],
                w: [0.0; 4],
            };
            for j in 0..4 {
                let src = i0 as isize - 1 + j as isize;
                t.idx[j] = src.clamp(0, len as isize - 1) as usize;
                t.w[j] = cubic_weight(frac + 1.0 - j as f64);
            }
            t
        })
        .collect()
}

/// Bicubic upsampling of an h x w map by an integer factor, producing
/// ((h-1)*factor+1) x ((w-1)*factor+1). Grid-aligned outputs reproduce the
/// input exactly; boundary taps clamp to the edge.
pub fn upsample_bicubic<T: Scalar>(map: &[T], h: usize, w: usize, factor: usize) -> Vec<T> {
    assert_eq!(map.len(), h * w, "map size");
    assert!(h >= 1 && w >= 1 && factor >= 1);
    let wf = (w - 1) * factor + 1;
    let hf = (h - 1) * factor + 1;
    let xtaps = taps_for(w, factor);
    let ytaps = taps_for(h, factor);

    // rows pass: h x w -> h x wf (in f64 for accumulation)
    let mut rows = vec![0.0f64; h * wf];
    for y in 0..h {
        let src = &map[y * w..(y + 1) * w];
        for (u, t) in xtaps.iter().enumerate() {
            let mut acc = 0.0;
            for j in 0..4 {
                acc += t.w[j] * src[t.idx[j]].to_f64();
            }
            rows[y * wf + u] = acc;
        }
    }
    // columns pass: h x wf -> hf x wf
    let mut out = vec![T::ZERO; hf * wf];
    for (v, t) in ytaps.iter().enumerate() {
        for u in 0..wf {
            let mut acc = 0.0;
            for j in 0..4 {
                acc += t.w[j] * rows[t.idx[j] * wf + u];
            }
            out[v * wf + u] = T::from_f64(acc);
        }
    }
    out
}

/// Normalized 2D Hann window (outer product of 1D Hann curves, scaled to
/// sum to one).
pub fn hann2d(h: usize, w: usize) -> Vec<f64> {
    let hann1 = |n: usize| -> Vec<f64> {
        if n == 1 {
            return vec![1.0];
        }
        (0..n)
            .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos()))
            .collect()
    };
    let hy = hann1(h);
    let hx = hann1(w);
    let mut out: Vec<f64> = (0..h * w).map(|i| hy[i / w] * hx[i % w]).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Shift the map so its minimum is zero, scale it to sum to one (uniform if
/// the map is flat), then blend with a sum-one window:
/// out = (1 - blend) * normalized + blend * window.
pub fn apply_window<T: Scalar>(map: &[T], window: &[f64], blend: f64) -> Vec<T> {
    assert_eq!(map.len(), window.len(), "map/window size");
    let min = map.iter().fold(f64::INFINITY, |m, v| m.min(v.to_f64()));
    let shifted: Vec<f64> = map.iter().map(|v| v.to_f64() - min).collect();
    let sum: f64 = shifted.iter().sum();
    let n = map.len() as f64;
    shifted
        .iter()
        .zip(window)
        .map(|(&s, &w)| {
            let norm = if sum > 0.0 { s / sum } else { 1.0 / n };
            T::from_f64((1.0 - blend) * norm + blend * w)
        })
        .collect()
}

/// Largest value in a map.
pub fn max_value<T: Scalar>(map: &[T]) -> f64 {
    map.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.to_f64()))
}

/// Mean (x, y) position of the k largest cells of an h x w map. Equal
/// values rank in row-major order (earlier flat index wins).
pub fn topk_mean_cell<T: Scalar>(map: &[T], h: usize, w: usize, k: usize) -> (f64, f64) {
    assert_eq!(map.len(), h * w, "map size");
    let k = k.min(map.len()).max(1);
    let mut idx: Vec<usize> = (0..map.len()).collect();
    idx.sort_by(|&a, &b| {
        map[b]
            .to_f64()
            .partial_cmp(&map[a].to_f64())
            .unwrap()
            .then(a.cmp(&b))
    });
    let top = &idx[..k];
    let mx = top.iter().map(|&i| (i % w) as f64).sum::<f64>() / k as f64;
    let my = top.iter().map(|&i| (i / w) as f64).sum::<f64>() / k as f64;
    (mx, my)
}

/// Multiplier that disfavours off-center scale candidates: gamma^|offset|.
pub fn scale_penalty(offset: i32, gamma: f64) -> f64 {
    gamma.powi(offset.abs())
}
