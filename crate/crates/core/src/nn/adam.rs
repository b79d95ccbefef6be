//! ADAM optimizer with bias correction, plus gradient clipping helpers.

use crate::tensor::{Scalar, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment estimates, one pair per parameter tensor, matched by
/// position. The parameter enumeration order must be stable (the model's
/// visitor guarantees a canonical order).
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(shapes: &[Vec<usize>]) -> Self {
        Adam {
            t: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    /// One update step over all parameters. `params` and `grads` must align
    /// with the moment vectors.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "adam: param count");
        assert_eq!(grads.len(), self.m.len(), "adam: grad count");
        self.t += 1;
        let b1 = T::from_f64(ADAM_BETA1);
        let b2 = T::from_f64(ADAM_BETA2);
        let one_minus_b1 = T::from_f64(1.0 - ADAM_BETA1);
        let one_minus_b2 = T::from_f64(1.0 - ADAM_BETA2);
        let corr1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let corr2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        // Fold bias correction into the step size: lr * sqrt(corr2)/corr1.
        let alpha = T::from_f64(lr * corr2.sqrt() / corr1);
        let eps = T::from_f64(ADAM_EPS);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.dims(), m.dims(), "adam: shape drift");
            assert_eq!(g.dims(), m.dims(), "adam: grad shape");
            for ((pv, gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mv = b1 * *mv + one_minus_b1 * *gv;
                *vv = b2 * *vv + one_minus_b2 * *gv * *gv;
                *pv -= alpha * *mv / (vv.sqrt() + eps);
            }
        }
    }
}

/// Clip every gradient element to [-limit, limit].
pub fn clip_elementwise<T: Scalar>(grads: &mut [&mut Tensor<T>], limit: f64) {
    let lo = T::from_f64(-limit);
    let hi = T::from_f64(limit);
    for g in grads {
        for v in g.data_mut() {
            *v = (*v).max(lo).min(hi);
        }
    }
}

/// Scale all gradients so their joint L2 norm is at most `limit`.
pub fn clip_global_norm<T: Scalar>(grads: &mut [&mut Tensor<T>], limit: f64) {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for v in g.data() {
            let f = v.to_f64();
            sq += f * f;
        }
    }
    let norm = sq.sqrt();
    if norm > limit && norm > 0.0 {
        let s = T::from_f64(limit / norm);
        for g in grads {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
}
