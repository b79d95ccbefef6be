//! Elementwise activations. Backward helpers work from the *outputs*, which
//! is exact for these functions and avoids caching inputs.

use crate::tensor::Scalar;

pub fn relu_inplace<T: Scalar>(x: &mut [T]) {
    for v in x {
        if *v < T::ZERO {
            *v = T::ZERO;
        }
    }
}

/// dx = dy * [y > 0], written into `dy`.
pub fn relu_backward_inplace<T: Scalar>(dy: &mut [T], y: &[T]) {
    for (d, o) in dy.iter_mut().zip(y) {
        if *o <= T::ZERO {
            *d = T::ZERO;
        }
    }
}

pub fn sigmoid_inplace<T: Scalar>(x: &mut [T]) {
    for v in x {
        *v = sigmoid(*v);
    }
}

#[inline(always)]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    // Stable in both tails.
    if x >= T::ZERO {
        let e = (-x).exp();
        T::ONE / (T::ONE + e)
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

pub fn tanh_inplace<T: Scalar>(x: &mut [T]) {
    for v in x {
        *v = v.tanh();
    }
}
