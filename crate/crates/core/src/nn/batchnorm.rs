//! Batch normalization over the (batch, height, width) axes of NHWC tensors,
//! with full backward through the batch statistics.

use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
/// Running statistics keep 0.9 of the old value per update.
pub const BN_MOMENTUM: f64 = 0.9;

/// Learned scale/offset plus running statistics for inference.
#[derive(Clone, Debug)]
pub struct BnParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

impl<T: Scalar> BnParams<T> {
    pub fn new(channels: usize) -> Self {
        BnParams {
            gamma: Tensor::full(&[channels], T::ONE),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::ONE),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }
}

/// Forward cache: the normalized activations and per-channel 1/sqrt(var+eps).
pub struct BnCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    /// Biased batch statistics (what normalization used), for running updates.
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

fn channel_count<T: Scalar>(x: &Tensor<T>) -> usize {
    *x.dims().last().expect("bn expects a channel axis")
}

/// Training-mode forward using batch statistics. Does not touch running
/// stats; call `update_running` with the cache afterwards if desired.
pub fn bn_forward_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> (Tensor<T>, BnCache<T>) {
    let c = channel_count(x);
    assert_eq!(gamma.numel(), c, "bn gamma channels");
    let m = x.numel() / c;
    assert!(m > 0, "bn needs at least one spatial element");

    // Two-pass statistics, accumulated in f64 for stability.
    let mut mean = vec![0.0f64; c];
    for row in x.data().chunks_exact(c) {
        for (acc, v) in mean.iter_mut().zip(row) {
            *acc += v.to_f64();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m as f64);
    let mut var = vec![0.0f64; c];
    for row in x.data().chunks_exact(c) {
        for ((acc, v), mu) in var.iter_mut().zip(row).zip(&mean) {
            let d = v.to_f64() - mu;
            *acc += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= m as f64);

    let inv_std: Vec<T> = var
        .iter()
        .map(|&v| T::from_f64(1.0 / (v + BN_EPS).sqrt()))
        .collect();
    let mean_t: Vec<T> = mean.iter().map(|&v| T::from_f64(v)).collect();

    let mut xhat = Tensor::zeros(x.dims());
    let mut y = Tensor::zeros(x.dims());
    let (g, b) = (gamma.data(), beta.data());
    for (row_i, (xr, (xh, yr))) in x
        .data()
        .chunks_exact(c)
        .zip(
            xhat.data_mut()
                .chunks_exact_mut(c)
                .zip(y.data_mut().chunks_exact_mut(c)),
        )
        .enumerate()
    {
        let _ = row_i;
        for ci in 0..c {
            let h = (xr[ci] - mean_t[ci]) * inv_std[ci];
            xh[ci] = h;
            yr[ci] = g[ci] * h + b[ci];
        }
    }
    let cache = BnCache {
        xhat,
        inv_std,
        batch_mean: mean_t,
        batch_var: var.iter().map(|&v| T::from_f64(v)).collect(),
    };
    (y, cache)
}

/// Blend the cached batch statistics into the running statistics.
pub fn update_running<T: Scalar>(params: &mut BnParams<T>, cache: &BnCache<T>) {
    let mom = T::from_f64(BN_MOMENTUM);
    let one_minus = T::from_f64(1.0 - BN_MOMENTUM);
    for (r, b) in params
        .running_mean
        .data_mut()
        .iter_mut()
        .zip(&cache.batch_mean)
    {
        *r = mom * *r + one_minus * *b;
    }
    for (r, b) in params
        .running_var
        .data_mut()
        .iter_mut()
        .zip(&cache.batch_var)
    {
        *r = mom * *r + one_minus * *b;
    }
}

/// Inference-mode forward: a fixed per-channel affine map from running stats.
pub fn bn_forward_infer<T: Scalar>(x: &Tensor<T>, params: &BnParams<T>) -> Tensor<T> {
    let c = channel_count(x);
    assert_eq!(params.channels(), c, "bn channels");
    let mut scale = vec![T::ZERO; c];
    let mut shift = vec![T::ZERO; c];
    for ci in 0..c {
        let inv = T::from_f64(1.0 / (params.running_var.data()[ci].to_f64() + BN_EPS).sqrt());
        scale[ci] = params.gamma.data()[ci] * inv;
        shift[ci] =
            params.beta.data()[ci] - params.gamma.data()[ci] * params.running_mean.data()[ci] * inv;
    }
    let mut y = Tensor::zeros(x.dims());
    for (xr, yr) in x
        .data()
        .chunks_exact(c)
        .zip(y.data_mut().chunks_exact_mut(c))
    {
        for ci in 0..c {
            yr[ci] = scale[ci] * xr[ci] + shift[ci];
        }
    }
    y
}

/// Backward through training-mode BN (including the batch statistics).
/// Returns (dgamma, dbeta, dx).
pub fn bn_backward<T: Scalar>(
    dy: &Tensor<T>,
    cache: &BnCache<T>,
    gamma: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let c = gamma.numel();
    let m = dy.numel() / c;
    assert_eq!(dy.dims(), cache.xhat.dims(), "bn dy dims");

    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    let mut sum_dxhat = vec![0.0f64; c];
    let mut sum_dxhat_xhat = vec![0.0f64; c];
    let g = gamma.data();
    for (dr, hr) in dy
        .data()
        .chunks_exact(c)
        .zip(cache.xhat.data().chunks_exact(c))
    {
        for ci in 0..c {
            let d = dr[ci].to_f64();
            let h = hr[ci].to_f64();
            dgamma[ci] += d * h;
            dbeta[ci] += d;
            let dxh = d * g[ci].to_f64();
            sum_dxhat[ci] += dxh;
            sum_dxhat_xhat[ci] += dxh * h;
        }
    }

    let mf = m as f64;
    let mut dx = Tensor::zeros(dy.dims());
    for (dxr, (dr, hr)) in dx.data_mut().chunks_exact_mut(c).zip(
        dy.data()
            .chunks_exact(c)
            .zip(cache.xhat.data().chunks_exact(c)),
    ) {
        for ci in 0..c {
            let dxh = dr[ci].to_f64() * g[ci].to_f64();
            let term = (mf * dxh - sum_dxhat[ci] - hr[ci].to_f64() * sum_dxhat_xhat[ci]) / mf;
            dxr[ci] = T::from_f64(term * cache.inv_std[ci].to_f64());
        }
    }
    (
        Tensor::from_vec(&[c], dgamma.into_iter().map(T::from_f64).collect()),
        Tensor::from_vec(&[c], dbeta.into_iter().map(T::from_f64).collect()),
        dx,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_tensor(dims: &[usize], rng: &mut crate::rng::Rng) -> Tensor<f64> {
        let n = dims.iter().product();
        Tensor::from_vec(dims, (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect())
    }

    #[test]
    fn train_forward_normalizes() {
        let mut rng = crate::rng::rng_from_seed(5);
        let x = rand_tensor(&[3, 4, 4, 2], &mut rng);
        let gamma = Tensor::full(&[2], 1.0);
        let beta = Tensor::zeros(&[2]);
        let (y, _) = bn_forward_train(&x, &gamma, &beta);
        let c = 2;
        let m = y.numel() / c;
        for ci in 0..c {
            let mean: f64 = y.data().iter().skip(ci).step_by(c).sum::<f64>() / m as f64;
            let var: f64 = y
                .data()
                .iter()
                .skip(ci)
                .step_by(c)
                .map(|v| (v - mean) * (v - mean))
                .sum::<f64>()
                / m as f64;
            assert!(mean.abs() < 1e-10, "channel {ci} mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "channel {ci} var {var}");
        }
    }

    #[test]
    fn infer_mode_is_affine_in_running_stats() {
        let mut rng = crate::rng::rng_from_seed(6);
        let x = rand_tensor(&[2, 3, 3, 2], &mut rng);
        let mut p = BnParams::<f64>::new(2);
        p.gamma.data_mut().copy_from_slice(&[2.0, 0.5]);
        p.beta.data_mut().copy_from_slice(&[1.0, -1.0]);
        p.running_mean.data_mut().copy_from_slice(&[0.3, -0.2]);
        p.running_var.data_mut().copy_from_slice(&[4.0, 0.25]);
        let y = bn_forward_infer(&x, &p);
        let i = 7; // arbitrary element, channel = 7 % 2 = 1
        let expect = 0.5 * (x.data()[i] - -0.2) / (0.25f64 + BN_EPS).sqrt() + -1.0;
        assert!((y.data()[i] - expect).abs() < 1e-12);
    }

    #[test]
    fn running_update_blends() {
        let mut p = BnParams::<f64>::new(1);
        let cache = BnCache {
            xhat: Tensor::zeros(&[1, 1, 1, 1]),
            inv_std: vec![1.0],
            batch_mean: vec![1.0],
            batch_var: vec![2.0],
        };
        update_running(&mut p, &cache);
        assert!((p.running_mean.data()[0] - 0.1).abs() < 1e-12);
        assert!((p.running_var.data()[0] - (0.9 + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn backward_matches_finite_differences_through_batch_stats() {
        let mut rng = crate::rng::rng_from_seed(7);
        let x = rand_tensor(&[2, 3, 2, 3], &mut rng);
        let gamma = rand_tensor(&[3], &mut rng);
        let beta = rand_tensor(&[3], &mut rng);
        let m = rand_tensor(&[2, 3, 2, 3], &mut rng);

        let loss = |x: &Tensor<f64>, g: &Tensor<f64>, b: &Tensor<f64>| {
            let (y, _) = bn_forward_train(x, g, b);
            y.iter().zip(m.iter()).map(|(a, b)| a * b).sum::<f64>()
        };

        let (_, cache) = bn_forward_train(&x, &gamma, &beta);
        let (dgamma, dbeta, dx) = bn_backward(&m, &cache, &gamma);

        let eps = 1e-6;
        for i in 0..x.numel() {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let fd = (loss(&xp, &gamma, &beta) - loss(&xm, &gamma, &beta)) / (2.0 * eps);
            let an = dx.data()[i];
            assert!(
                (fd - an).abs() <= 1e-5 * (1.0 + fd.abs()),
                "dx[{i}]: fd {fd} vs {an}"
            );
        }
        for i in 0..3 {
            let mut gp = gamma.clone();
            gp.data_mut()[i] += eps;
            let mut gm = gamma.clone();
            gm.data_mut()[i] -= eps;
            let fd = (loss(&x, &gp, &beta) - loss(&x, &gm, &beta)) / (2.0 * eps);
            assert!((fd - dgamma.data()[i]).abs() <= 1e-6 * (1.0 + fd.abs()));

            let mut bp = beta.clone();
            bp.data_mut()[i] += eps;
            let mut bm = beta.clone();
            bm.data_mut()[i] -= eps;
            let fd = (loss(&x, &gamma, &bp) - loss(&x, &gamma, &bm)) / (2.0 * eps);
            assert!((fd - dbeta.data()[i]).abs() <= 1e-6 * (1.0 + fd.abs()));
        }
    }
}
