//! The five-layer convolutional feature extractors: one for 127x127 exemplar
//! patches (output 6x6x256) and one for 255x255 search patches (output
//! 22x22x256). Layers: conv(11x11,s2)+BN+ReLU, pool, conv(5x5)+BN+ReLU,
//! pool, conv(3x3)+BN+ReLU, conv(3x3)+BN+ReLU, conv(3x3)+BN; all
//! convolutions unpadded; the last layer has no ReLU.

use crate::nn::act::relu_inplace;
use crate::nn::batchnorm::{
    bn_backward, bn_forward_infer, bn_forward_train, update_running, BnCache, BnParams,
};
use crate::nn::conv::{conv_backward, conv_forward, ConvSpec};
use crate::nn::init::{fan_in_std, fill_normal, he_std};
use crate::nn::pool::{maxpool_backward, maxpool_forward, PoolSpec};
use crate::nn::Scratch;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

pub const EXEMPLAR_SIZE: usize = 127;
pub const SEARCH_SIZE: usize = 255;
pub const EXEMPLAR_FEAT: usize = 6;
pub const SEARCH_FEAT: usize = 22;
pub const FEAT_CHANNELS: usize = 256;

/// One conv + batch-norm stage.
#[derive(Clone, Debug)]
pub struct ConvBlock<T> {
    pub spec: ConvSpec,
    pub w: Tensor<T>,
    pub b: Tensor<T>,
    pub bn: BnParams<T>,
    pub relu: bool,
    /// A 3x3 stride-2 max pool follows this stage.
    pub pooled: bool,
}

#[derive(Clone, Debug)]
pub struct Backbone<T> {
    pub layers: Vec<ConvBlock<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Everything the backward pass needs from one forward call: the normalized
/// input, per-layer BN caches (the normalized pre-activation `xhat`), and
/// pool argmax indices. Post-activation maps are recomputed on the fly.
pub struct BackboneCache<T> {
    pub input: Tensor<T>,
    pub bn: Vec<BnCache<T>>,
    pub pool_args: Vec<Option<Vec<u32>>>,
    pub z_dims: Vec<Vec<usize>>,
}

/// Per-layer parameter gradients, accumulated across unroll steps.
#[derive(Clone, Debug)]
pub struct BackboneGrads<T> {
    pub dw: Vec<Tensor<T>>,
    pub db: Vec<Tensor<T>>,
    pub dgamma: Vec<Tensor<T>>,
    pub dbeta: Vec<Tensor<T>>,
}

impl<T: Scalar> Backbone<T> {
    /// Table-driven construction with fan-in-scaled Gaussian weights,
    /// BN gamma=1/beta=0.
    pub fn new(rng: &mut Rng) -> Self {
        let table: [(usize, usize, usize, usize, bool, bool); 5] = [
            // (k, cin, cout, stride, relu, pooled)
            (11, 3, 96, 2, true, true),
            (5, 96, 256, 1, true, true),
            (3, 256, 384, 1, true, false),
            (3, 384, 384, 1, true, false),
            (3, 384, 256, 1, false, false),
        ];
        let layers = table
            .iter()
            .map(|&(k, cin, cout, stride, relu, pooled)| {
                let spec = ConvSpec::valid(k, cin, cout, stride);
                let fan_in = k * k * cin;
                let std = if relu {
                    he_std(fan_in)
                } else {
                    fan_in_std(fan_in)
                };
                let mut w = Tensor::zeros(&spec.weight_dims());
                fill_normal(&mut w, rng, std);
                ConvBlock {
                    spec,
                    w,
                    b: Tensor::zeros(&[cout]),
                    bn: BnParams::new(cout),
                    relu,
                    pooled,
                }
            })
            .collect();
        Backbone { layers }
    }

    /// Spatial output size for a square input of side `s`.
    pub fn out_side(&self, mut s: usize) -> usize {
        for l in &self.layers {
            s = (s - l.spec.kh) / l.spec.stride + 1;
            if l.pooled {
                let p = PoolSpec::backbone();
                s = (s - p.k) / p.stride + 1;
            }
        }
        s
    }

    /// Forward over a batch of normalized NHWC inputs. In `Train` mode batch
    /// statistics are used and a cache is returned; running stats are NOT
    /// updated here (call `update_running_stats` with the cache).
    pub fn forward(
        &self,
        x: &Tensor<T>,
        mode: Mode,
        scratch: &mut Scratch<T>,
    ) -> (Tensor<T>, Option<BackboneCache<T>>) {
        let mut cache = if mode == Mode::Train {
            Some(BackboneCache {
                input: x.clone(),
                bn: Vec::with_capacity(5),
                pool_args: Vec::with_capacity(5),
                z_dims: Vec::with_capacity(5),
            })
        } else {
            None
        };
        let mut a = x.clone();
        for l in &self.layers {
            let z = conv_forward(&a, &l.w, &l.b, &l.spec, scratch);
            let mut y = match (&mut cache, mode) {
                (Some(c), Mode::Train) => {
                    c.z_dims.push(z.dims().to_vec());
                    let (y, bc) = bn_forward_train(&z, &l.bn.gamma, &l.bn.beta);
                    c.bn.push(bc);
                    y
                }
                _ => bn_forward_infer(&z, &l.bn),
            };
            if l.relu {
                relu_inplace(y.data_mut());
            }
            a = if l.pooled {
                let (p, args) = maxpool_forward(&y, &PoolSpec::backbone());
                if let Some(c) = &mut cache {
                    c.pool_args.push(Some(args));
                }
                p
            } else {
                if let Some(c) = &mut cache {
                    c.pool_args.push(None);
                }
                y
            };
        }
        (a, cache)
    }

    /// Blend each layer's cached batch statistics into its running stats.
    pub fn update_running_stats(&mut self, cache: &BackboneCache<T>) {
        for (l, bc) in self.layers.iter_mut().zip(&cache.bn) {
            update_running(&mut l.bn, bc);
        }
    }

    /// Recompute the post-activation (and post-pool) input of layer `target`
    /// from the cache. Layer 0's input is the cached network input.
    fn layer_input(&self, cache: &BackboneCache<T>, target: usize) -> Tensor<T> {
        if target == 0 {
            return cache.input.clone();
        }
        let l = &self.layers[target - 1];
        let bc = &cache.bn[target - 1];
        let c = l.spec.cout;
        let mut y = Tensor::zeros(&cache.z_dims[target - 1]);
        let (g, b) = (l.bn.gamma.data(), l.bn.beta.data());
        for (yr, hr) in y
            .data_mut()
            .chunks_exact_mut(c)
            .zip(bc.xhat.data().chunks_exact(c))
        {
            for ci in 0..c {
                yr[ci] = g[ci] * hr[ci] + b[ci];
            }
        }
        if l.relu {
            relu_inplace(y.data_mut());
        }
        if let Some(args) = &cache.pool_args[target - 1] {
            // Gather through the recorded argmax; no fresh max search.
            let dims = {
                let d = y.dims();
                let p = PoolSpec::backbone();
                let (ho, wo) = p.out_hw(d[1], d[2]);
                vec![d[0], ho, wo, d[3]]
            };
            let mut pooled = Tensor::zeros(&dims);
            for (o, &idx) in pooled.data_mut().iter_mut().zip(args.iter()) {
                *o = y.data()[idx as usize];
            }
            pooled
        } else {
            y
        }
    }

    /// Backward one forward call. `d_out` is the gradient at the backbone
    /// output; parameter gradients accumulate into `grads`. Returns the
    /// gradient wrt the (normalized) input only when `want_dx`.
    pub fn backward(
        &self,
        cache: &BackboneCache<T>,
        d_out: &Tensor<T>,
        grads: &mut BackboneGrads<T>,
        scratch: &mut Scratch<T>,
        want_dx: bool,
    ) -> Option<Tensor<T>> {
        let mut d = d_out.clone();
        for li in (0..self.layers.len()).rev() {
            let l = &self.layers[li];
            let bc = &cache.bn[li];
            // through pool
            if let Some(args) = &cache.pool_args[li] {
                // need the pre-pool activation dims
                let zd = &cache.z_dims[li];
                d = maxpool_backward(&d, args, zd);
            }
            // through relu: mask from recomputed activation sign
            if l.relu {
                let c = l.spec.cout;
                let (g, b) = (l.bn.gamma.data(), l.bn.beta.data());
                for (dr, hr) in d
                    .data_mut()
                    .chunks_exact_mut(c)
                    .zip(bc.xhat.data().chunks_exact(c))
                {
                    for ci in 0..c {
                        if g[ci] * hr[ci] + b[ci] <= T::ZERO {
                            dr[ci] = T::ZERO;
                        }
                    }
                }
            }
            // through bn
            let (dgamma, dbeta, dz) = bn_backward(&d, bc, &l.bn.gamma);
            acc(&mut grads.dgamma[li], &dgamma);
            acc(&mut grads.dbeta[li], &dbeta);
            // through conv
            let input = self.layer_input(cache, li);
            let need_dx = li > 0 || want_dx;
            let (dw, db, dx) = conv_backward(&input, &l.w, &l.spec, &dz, need_dx, scratch);
            acc(&mut grads.dw[li], &dw);
            acc(&mut grads.db[li], &db);
            match dx {
                Some(dx) => d = dx,
                None => return None,
            }
        }
        Some(d)
    }
}

fn acc<T: Scalar>(dst: &mut Tensor<T>, src: &Tensor<T>) {
    debug_assert_eq!(dst.dims(), src.dims());
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += *s;
    }
}

impl<T: Scalar> BackboneGrads<T> {
    pub fn zeros_like(bb: &Backbone<T>) -> Self {
        BackboneGrads {
            dw: bb
                .layers
                .iter()
                .map(|l| Tensor::zeros(&l.spec.weight_dims()))
                .collect(),
            db: bb
                .layers
                .iter()
                .map(|l| Tensor::zeros(&[l.spec.cout]))
                .collect(),
            dgamma: bb
                .layers
                .iter()
                .map(|l| Tensor::zeros(&[l.spec.cout]))
                .collect(),
            dbeta: bb
                .layers
                .iter()
                .map(|l| Tensor::zeros(&[l.spec.cout]))
                .collect(),
        }
    }
}
