//! The full tracker model: exemplar and search feature extractors plus the
//! filter-generating LSTM, with canonical parameter naming, a stable
//! checksum, and flat trainable-parameter access for the optimizer.

use crate::backbone::{Backbone, BackboneCache, BackboneGrads, Mode, EXEMPLAR_SIZE, SEARCH_SIZE};
use crate::error::{Error, Result};
use crate::filtergen::{LstmGrads, LstmParams};
use crate::nn::Scratch;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};
use sha2::{Digest, Sha256};

/// Pixel intensities in [0,1] are shifted/scaled to roughly zero-mean,
/// unit-ish variance before entering the networks.
pub const PIXEL_SHIFT: f64 = 0.5;
pub const PIXEL_SCALE: f64 = 0.25;

/// Architecture variant switches. Defaults are the full model.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantConfig {
    /// One backbone serves both exemplar and search patches.
    pub shared_backbone: bool,
    /// Start tracking from all-zero memory instead of the learned init net.
    pub zero_init: bool,
    /// Spatial size of the LSTM gate convolutions (3 or 1).
    pub gate_kernel: usize,
}

impl Default for VariantConfig {
    fn default() -> Self {
        VariantConfig {
            shared_backbone: false,
            zero_init: false,
            gate_kernel: 3,
        }
    }
}

#[derive(Clone)]
pub struct RflModel<T> {
    pub ecnn: Backbone<T>,
    /// Separate search-branch backbone; `None` when shared with `ecnn`.
    pub scnn: Option<Backbone<T>>,
    pub lstm: LstmParams<T>,
    pub variant: VariantConfig,
}

impl<T: Scalar> RflModel<T> {
    pub fn new(rng: &mut Rng, variant: &VariantConfig) -> Self {
        let ecnn = Backbone::new(rng);
        let scnn = (!variant.shared_backbone).then(|| Backbone::new(rng));
        let lstm = LstmParams::new(rng, variant.gate_kernel, variant.zero_init);
        RflModel {
            ecnn,
            scnn,
            lstm,
            variant: variant.clone(),
        }
    }

    pub fn search_backbone(&self) -> &Backbone<T> {
        self.scnn.as_ref().unwrap_or(&self.ecnn)
    }

    /// (x - shift) / scale applied to every element, in place.
    pub fn normalize_pixels(x: &mut Tensor<T>) {
        let shift = T::from_f64(PIXEL_SHIFT);
        let inv = T::from_f64(1.0 / PIXEL_SCALE);
        for v in x.data_mut() {
            *v = (*v - shift) * inv;
        }
    }

    fn check_patch(x: &Tensor<T>, side: usize, what: &'static str) -> Result<()> {
        let d = x.dims();
        if d.len() != 4 || d[1] != side || d[2] != side || d[3] != 3 {
            return Err(Error::ShapeMismatch {
                what,
                expected: vec![d.first().copied().unwrap_or(1), side, side, 3],
                got: d.to_vec(),
            });
        }
        Ok(())
    }

    /// Normalize raw [0,1] exemplar patches [n,127,127,3] and run the
    /// exemplar backbone, yielding [n,6,6,256] features.
    pub fn exemplar_features(
        &self,
        patches: &Tensor<T>,
        mode: Mode,
        scratch: &mut Scratch<T>,
    ) -> Result<(Tensor<T>, Option<BackboneCache<T>>)> {
        Self::check_patch(patches, EXEMPLAR_SIZE, "exemplar patch batch")?;
        let mut x = patches.clone();
        Self::normalize_pixels(&mut x);
        Ok(self.ecnn.forward(&x, mode, scratch))
    }

    /// Normalize raw [0,1] search patches [n,255,255,3] and run the search
    /// backbone, yielding [n,22,22,256] features.
    pub fn search_features(
        &self,
        patches: &Tensor<T>,
        mode: Mode,
        scratch: &mut Scratch<T>,
    ) -> Result<(Tensor<T>, Option<BackboneCache<T>>)> {
        Self::check_patch(patches, SEARCH_SIZE, "search patch batch")?;
        let mut x = patches.clone();
        Self::normalize_pixels(&mut x);
        Ok(self.search_backbone().forward(&x, mode, scratch))
    }

    /// Visit every persistent tensor (weights, biases, BN affine and running
    /// stats, LSTM and init-net parameters) in a canonical order with stable
    /// names.
    pub fn visit_all<F: FnMut(&str, &Tensor<T>)>(&self, mut f: F) {
        visit_backbone(&self.ecnn, "ecnn", true, &mut |n, t| f(n, t));
        if let Some(s) = &self.scnn {
            visit_backbone(s, "scnn", true, &mut |n, t| f(n, t));
        }
        f("lstm/gates/w", &self.lstm.w_gates);
        f("lstm/gates/b", &self.lstm.b_gates);
        f("lstm/out/w", &self.lstm.w_out);
        f("lstm/out/b", &self.lstm.b_out);
        f("lstm/init_h/w", &self.lstm.w_init_h);
        f("lstm/init_h/b", &self.lstm.b_init_h);
        f("lstm/init_c/w", &self.lstm.w_init_c);
        f("lstm/init_c/b", &self.lstm.b_init_c);
    }

    /// Same traversal as [`visit_all`] but with mutable access.
    pub fn visit_all_mut<F: FnMut(&str, &mut Tensor<T>)>(&mut self, mut f: F) {
        visit_backbone_mut(&mut self.ecnn, "ecnn", true, &mut |n, t| f(n, t));
        if let Some(s) = &mut self.scnn {
            visit_backbone_mut(s, "scnn", true, &mut |n, t| f(n, t));
        }
        f("lstm/gates/w", &mut self.lstm.w_gates);
        f("lstm/gates/b", &mut self.lstm.b_gates);
        f("lstm/out/w", &mut self.lstm.w_out);
        f("lstm/out/b", &mut self.lstm.b_out);
        f("lstm/init_h/w", &mut self.lstm.w_init_h);
        f("lstm/init_h/b", &mut self.lstm.b_init_h);
        f("lstm/init_c/w", &mut self.lstm.w_init_c);
        f("lstm/init_c/b", &mut self.lstm.b_init_c);
    }

    /// Mutable references to the optimizer-updated tensors (everything except
    /// BN running stats), in a fixed order matching [`ModelGrads::flat`].
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v: Vec<&mut Tensor<T>> = Vec::new();
        for b in self.ecnn.layers.iter_mut() {
            v.push(&mut b.w);
            v.push(&mut b.b);
            v.push(&mut b.bn.gamma);
            v.push(&mut b.bn.beta);
        }
        if let Some(s) = &mut self.scnn {
            for b in s.layers.iter_mut() {
                v.push(&mut b.w);
                v.push(&mut b.b);
                v.push(&mut b.bn.gamma);
                v.push(&mut b.bn.beta);
            }
        }
        v.push(&mut self.lstm.w_gates);
        v.push(&mut self.lstm.b_gates);
        v.push(&mut self.lstm.w_out);
        v.push(&mut self.lstm.b_out);
        v.push(&mut self.lstm.w_init_h);
        v.push(&mut self.lstm.b_init_h);
        v.push(&mut self.lstm.w_init_c);
        v.push(&mut self.lstm.b_init_c);
        v
    }

    pub fn trainable_dims(&self) -> Vec<Vec<usize>> {
        let mut dims = Vec::new();
        self.visit_trainable(|_, t| dims.push(t.dims().to_vec()));
        dims
    }

    /// Read-only traversal of the optimizer-updated tensors, same order as
    /// [`trainable_mut`].
    pub fn visit_trainable<F: FnMut(&str, &Tensor<T>)>(&self, mut f: F) {
        visit_backbone(&self.ecnn, "ecnn", false, &mut |n, t| f(n, t));
        if let Some(s) = &self.scnn {
            visit_backbone(s, "scnn", false, &mut |n, t| f(n, t));
        }
        f("lstm/gates/w", &self.lstm.w_gates);
        f("lstm/gates/b", &self.lstm.b_gates);
        f("lstm/out/w", &self.lstm.w_out);
        f("lstm/out/b", &self.lstm.b_out);
        f("lstm/init_h/w", &self.lstm.w_init_h);
        f("lstm/init_h/b", &self.lstm.b_init_h);
        f("lstm/init_c/w", &self.lstm.w_init_c);
        f("lstm/init_c/b", &self.lstm.b_init_c);
    }

    /// SHA-256 over every persistent tensor's name, shape, and data, so any
    /// parameter drift is detectable.
    pub fn param_checksum(&self) -> String {
        let mut hasher = Sha256::new();
        self.visit_all(|name, t| {
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            for d in t.dims() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in t.iter() {
                hasher.update(v.to_f64().to_le_bytes());
            }
        });
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Cast every parameter to another scalar type (e.g. f32 -> f64 for
    /// high-precision gradient checks).
    pub fn cast<U: Scalar>(&self) -> RflModel<U> {
        let mut rng = crate::rng::rng_from_seed(0);
        let mut out = RflModel::<U>::new(&mut rng, &self.variant);
        let mut src: Vec<Tensor<U>> = Vec::new();
        self.visit_all(|_, t| src.push(t.cast::<U>()));
        let mut i = 0;
        out.visit_all_mut(|_, t| {
            *t = src[i].clone();
            i += 1;
        });
        out
    }
}

fn visit_backbone<T: Scalar, F: FnMut(&str, &Tensor<T>)>(
    bb: &Backbone<T>,
    prefix: &str,
    with_stats: bool,
    f: &mut F,
) {
    for (i, blk) in bb.layers.iter().enumerate() {
        let l = i + 1;
        f(&format!("{prefix}/conv{l}/w"), &blk.w);
        f(&format!("{prefix}/conv{l}/b"), &blk.b);
        f(&format!("{prefix}/conv{l}/bn_gamma"), &blk.bn.gamma);
        f(&format!("{prefix}/conv{l}/bn_beta"), &blk.bn.beta);
        if with_stats {
            f(&format!("{prefix}/conv{l}/bn_mean"), &blk.bn.running_mean);
            f(&format!("{prefix}/conv{l}/bn_var"), &blk.bn.running_var);
        }
    }
}

fn visit_backbone_mut<T: Scalar, F: FnMut(&str, &mut Tensor<T>)>(
    bb: &mut Backbone<T>,
    prefix: &str,
    with_stats: bool,
    f: &mut F,
) {
    for (i, blk) in bb.layers.iter_mut().enumerate() {
        let l = i + 1;
        f(&format!("{prefix}/conv{l}/w"), &mut blk.w);
        f(&format!("{prefix}/conv{l}/b"), &mut blk.b);
        f(&format!("{prefix}/conv{l}/bn_gamma"), &mut blk.bn.gamma);
        f(&format!("{prefix}/conv{l}/bn_beta"), &mut blk.bn.beta);
        if with_stats {
            f(
                &format!("{prefix}/conv{l}/bn_mean"),
                &mut blk.bn.running_mean,
            );
            f(&format!("{prefix}/conv{l}/bn_var"), &mut blk.bn.running_var);
        }
    }
}

/// Gradients for every trainable tensor, accumulated across the unrolled
/// clip.
pub struct ModelGrads<T> {
    pub ecnn: BackboneGrads<T>,
    pub scnn: Option<BackboneGrads<T>>,
    pub lstm: LstmGrads<T>,
}

impl<T: Scalar> ModelGrads<T> {
    pub fn zeros_like(model: &RflModel<T>) -> Self {
        ModelGrads {
            ecnn: BackboneGrads::zeros_like(&model.ecnn),
            scnn: model.scnn.as_ref().map(BackboneGrads::zeros_like),
            lstm: LstmGrads::zeros_like(&model.lstm),
        }
    }

    /// Reset every gradient tensor to zero (between optimizer steps).
    pub fn zero(&mut self) {
        for t in self.flat_mut() {
            t.fill(T::ZERO);
        }
    }

    /// Gradient of the shared or search backbone, matching
    /// `RflModel::search_backbone`.
    pub fn search_grads(&mut self) -> &mut BackboneGrads<T> {
        match &mut self.scnn {
            Some(g) => g,
            None => &mut self.ecnn,
        }
    }

    /// Flat view in the exact order of `RflModel::trainable_mut`.
    pub fn flat(&self) -> Vec<&Tensor<T>> {
        fn push_bb<'a, T: Scalar>(g: &'a BackboneGrads<T>, v: &mut Vec<&'a Tensor<T>>) {
            for i in 0..g.dw.len() {
                v.push(&g.dw[i]);
                v.push(&g.db[i]);
                v.push(&g.dgamma[i]);
                v.push(&g.dbeta[i]);
            }
        }
        let mut v: Vec<&Tensor<T>> = Vec::new();
        push_bb(&self.ecnn, &mut v);
        if let Some(s) = &self.scnn {
            push_bb(s, &mut v);
        }
        v.push(&self.lstm.dw_gates);
        v.push(&self.lstm.db_gates);
        v.push(&self.lstm.dw_out);
        v.push(&self.lstm.db_out);
        v.push(&self.lstm.dw_init_h);
        v.push(&self.lstm.db_init_h);
        v.push(&self.lstm.dw_init_c);
        v.push(&self.lstm.db_init_c);
        v
    }

    /// Mutable flat view, same order.
    pub fn flat_mut(&mut self) -> Vec<&mut Tensor<T>> {
        fn push_bb<'a, T: Scalar>(g: &'a mut BackboneGrads<T>, v: &mut Vec<&'a mut Tensor<T>>) {
            for (((w, b), ga), be) in
                g.dw.iter_mut()
                    .zip(g.db.iter_mut())
                    .zip(g.dgamma.iter_mut())
                    .zip(g.dbeta.iter_mut())
            {
                v.push(w);
                v.push(b);
                v.push(ga);
                v.push(be);
            }
        }
        let mut v: Vec<&mut Tensor<T>> = Vec::new();
        push_bb(&mut self.ecnn, &mut v);
        if let Some(s) = &mut self.scnn {
            push_bb(s, &mut v);
        }
        v.push(&mut self.lstm.dw_gates);
        v.push(&mut self.lstm.db_gates);
        v.push(&mut self.lstm.dw_out);
        v.push(&mut self.lstm.db_out);
        v.push(&mut self.lstm.dw_init_h);
        v.push(&mut self.lstm.db_init_h);
        v.push(&mut self.lstm.dw_init_c);
        v.push(&mut self.lstm.db_init_c);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    use std::sync::OnceLock;

    // Building a full model is expensive (tens of millions of parameters),
    // so the test suite shares one per variant and clones when mutating.
    fn base_model(shared: bool) -> &'static RflModel<f32> {
        static SPLIT: OnceLock<RflModel<f32>> = OnceLock::new();
        static SHARED: OnceLock<RflModel<f32>> = OnceLock::new();
        let cell = if shared { &SHARED } else { &SPLIT };
        cell.get_or_init(|| {
            let mut rng = crate::rng::rng_from_seed(61);
            RflModel::new(
                &mut rng,
                &VariantConfig {
                    shared_backbone: shared,
                    zero_init: false,
                    gate_kernel: 3,
                },
            )
        })
    }

    #[test]
    fn visitor_names_and_counts() {
        let m = base_model(false);
        let mut names = Vec::new();
        m.visit_all(|n, _| names.push(n.to_string()));
        assert_eq!(names.len(), 5 * 6 * 2 + 8);
        assert!(names.contains(&"ecnn/conv1/w".to_string()));
        assert!(names.contains(&"scnn/conv5/bn_var".to_string()));
        assert!(names.contains(&"lstm/gates/w".to_string()));
        assert!(names.contains(&"lstm/init_c/b".to_string()));
        // unique
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());

        let shared = base_model(true);
        let mut n2 = 0;
        shared.visit_all(|_, _| n2 += 1);
        assert_eq!(n2, 5 * 6 + 8);
    }

    #[test]
    fn trainable_order_matches_grads_flat() {
        let mut m = base_model(false).clone();
        let mut g = ModelGrads::zeros_like(&m);
        {
            let params = m.trainable_mut();
            let grads = g.flat();
            assert_eq!(params.len(), grads.len());
            for (p, gr) in params.iter().zip(grads.iter()) {
                assert_eq!(p.dims(), gr.dims());
            }
            assert_eq!(params.len(), 5 * 4 * 2 + 8);
        }
        assert_eq!(g.flat_mut().len(), 5 * 4 * 2 + 8);
        let mut names = Vec::new();
        m.visit_trainable(|n, _| names.push(n.to_string()));
        assert_eq!(names.len(), 5 * 4 * 2 + 8);
        assert_eq!(names[0], "ecnn/conv1/w");
        assert_eq!(names[3], "ecnn/conv1/bn_beta");
    }

    #[test]
    fn checksum_changes_with_any_parameter() {
        let mut m = base_model(true).clone();
        let base = m.param_checksum();
        assert_eq!(base.len(), 64);
        assert_eq!(base, m.param_checksum()); // deterministic
        m.lstm.b_out.data_mut()[3] += 1e-3;
        assert_ne!(base, m.param_checksum());
    }

    #[test]
    fn normalize_pixels_formula() {
        let mut t = Tensor::from_vec(&[1, 1, 1, 3], vec![0.0f32, 0.5, 1.0]);
        RflModel::normalize_pixels(&mut t);
        assert_eq!(t.data(), &[-2.0, 0.0, 2.0]);
    }

    #[test]
    fn feature_wrappers_validate_shape() {
        let m = base_model(true);
        let mut s = Scratch::new();
        let bad = Tensor::<f32>::zeros(&[1, 100, 100, 3]);
        assert!(m.exemplar_features(&bad, Mode::Infer, &mut s).is_err());
        assert!(m.search_features(&bad, Mode::Infer, &mut s).is_err());
    }

    #[test]
    fn cast_round_trip_preserves_values() {
        let m = base_model(true);
        let m64 = m.cast::<f64>();
        let back = m64.cast::<f32>();
        assert_eq!(m.param_checksum(), back.param_checksum());
    }

    #[test]
    fn shared_variant_reuses_exemplar_backbone() {
        let m = base_model(true);
        assert!(m.scnn.is_none());
        let p = std::ptr::from_ref(m.search_backbone());
        assert_eq!(p, std::ptr::from_ref(&m.ecnn));
    }
}
