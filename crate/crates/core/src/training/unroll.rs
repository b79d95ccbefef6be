//! Forward and backward passes over one unrolled clip.
//!
//! A clip of N steps runs: build the initial memory from the first
//! exemplar's features, emit a filter, score it against the first search
//! image; then for each later step, advance the LSTM on that step's
//! exemplar features, emit a filter, score it against that step's search
//! image. Each step contributes a response-map loss; the clip loss is the
//! mean over steps.
//!
//! The backward pass is structured to keep peak memory low: each step's
//! search-branch gradient is complete as soon as that step's loss gradient
//! is known (nothing later depends on the search features), so the search
//! backbone is backpropagated eagerly inside the forward loop and its large
//! activation cache is dropped immediately. Only the exemplar-branch caches
//! and the small LSTM step caches are retained for the reverse sweep.

use crate::backbone::Mode;
use crate::error::{Error, Result};
use crate::filtergen::{
    generate_filter, generate_filter_backward, init_state, init_state_backward, lstm_step,
    lstm_step_backward, LstmState, StepCache,
};
use crate::model::{ModelGrads, RflModel};
use crate::nn::Scratch;
use crate::response::{correlate, correlate_backward};
use crate::supervision::{loss_and_grad, LabelMap};
use crate::tensor::{Scalar, Tensor};

/// Per-clip loss breakdown.
#[derive(Clone, Debug)]
pub struct ClipLoss {
    /// Mean of the per-step losses (the quantity being optimized).
    pub mean: f64,
    pub per_step: Vec<f64>,
}

fn check_clip_args<T: Scalar>(
    exemplars: &[Tensor<T>],
    searches: &[Tensor<T>],
    labels: &[Vec<LabelMap>],
) -> Result<()> {
    if exemplars.is_empty() || exemplars.len() != searches.len() || exemplars.len() != labels.len()
    {
        return Err(Error::Config(format!(
            "clip needs equal, nonzero step counts (exemplars {}, searches {}, labels {})",
            exemplars.len(),
            searches.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// Clip loss only: no gradients, no model mutation. Batch statistics are
/// used for normalization (training-mode forward), so this is the exact
/// function differentiated by [`clip_grads`]; finite-difference checks call
/// it with perturbed parameters.
pub fn clip_loss<T: Scalar>(
    model: &RflModel<T>,
    exemplars: &[Tensor<T>],
    searches: &[Tensor<T>],
    labels: &[Vec<LabelMap>],
    balanced: bool,
    scratch: &mut Scratch<T>,
) -> Result<f64> {
    check_clip_args(exemplars, searches, labels)?;
    let steps = exemplars.len();
    let mut state: Option<LstmState<T>> = None;
    let mut total = 0.0;
    for t in 0..steps {
        let (e_feat, _) = model.exemplar_features(&exemplars[t], Mode::Train, scratch)?;
        let next = match &state {
            None => init_state(&e_feat, &model.lstm, scratch),
            Some(prev) => lstm_step(prev, &e_feat, &model.lstm, scratch, false).0,
        };
        let filter = generate_filter(&next.h, &model.lstm, scratch);
        state = Some(next);
        let (s_feat, _) = model.search_features(&searches[t], Mode::Train, scratch)?;
        let logits = correlate(&s_feat, &filter, scratch);
        let (loss_t, _) = loss_and_grad(&logits, &labels[t], balanced)?;
        total += loss_t;
    }
    Ok(total / steps as f64)
}

/// Forward + backward over one clip batch. Parameter gradients of the mean
/// per-step loss accumulate into `grads`. With `update_stats`, each
/// backbone application also folds its batch statistics into the running
/// BN statistics (chronological order); pass `false` when the model must
/// stay untouched (gradient checking).
#[allow(clippy::too_many_arguments)]
pub fn clip_grads<T: Scalar>(
    model: &mut RflModel<T>,
    exemplars: &[Tensor<T>],
    searches: &[Tensor<T>],
    labels: &[Vec<LabelMap>],
    balanced: bool,
    update_stats: bool,
    grads: &mut ModelGrads<T>,
    scratch: &mut Scratch<T>,
) -> Result<ClipLoss> {
    check_clip_args(exemplars, searches, labels)?;
    let steps = exemplars.len();
    let inv_steps = T::from_f64(1.0 / steps as f64);

    let mut e0_feat: Option<Tensor<T>> = None;
    let mut e_caches = Vec::with_capacity(steps);
    let mut states: Vec<LstmState<T>> = Vec::with_capacity(steps);
    let mut step_caches: Vec<StepCache<T>> = Vec::with_capacity(steps.saturating_sub(1));
    let mut d_filters: Vec<Tensor<T>> = Vec::with_capacity(steps);
    let mut per_step = Vec::with_capacity(steps);

    for t in 0..steps {
        let (e_feat, ec) = model.exemplar_features(&exemplars[t], Mode::Train, scratch)?;
        let ec = ec.expect("train mode returns a cache");
        if update_stats {
            model.ecnn.update_running_stats(&ec);
        }
        let next = if t == 0 {
            let s = init_state(&e_feat, &model.lstm, scratch);
            e0_feat = Some(e_feat);
            s
        } else {
            let (s, c) = lstm_step(&states[t - 1], &e_feat, &model.lstm, scratch, true);
            step_caches.push(c.expect("cache requested"));
            s
        };
        let filter = generate_filter(&next.h, &model.lstm, scratch);
        states.push(next);
        e_caches.push(Some(ec));

        let (s_feat, sc) = model.search_features(&searches[t], Mode::Train, scratch)?;
        let sc = sc.expect("train mode returns a cache");
        if update_stats {
            match &mut model.scnn {
                Some(b) => b.update_running_stats(&sc),
                None => model.ecnn.update_running_stats(&sc),
            }
        }
        let logits = correlate(&s_feat, &filter, scratch);
        let (loss_t, mut d_logits) = loss_and_grad(&logits, &labels[t], balanced)?;
        per_step.push(loss_t);
        for v in d_logits.data_mut() {
            *v *= inv_steps;
        }
        let (d_sfeat, d_filter) = correlate_backward(&s_feat, &filter, &d_logits, scratch);
        model
            .search_backbone()
            .backward(&sc, &d_sfeat, grads.search_grads(), scratch, false);
        d_filters.push(d_filter);
    }

    // Reverse sweep through the LSTM chain and the exemplar branch.
    let state_dims = states[0].h.dims().to_vec();
    let mut dh = Tensor::zeros(&state_dims);
    let mut dc = Tensor::zeros(&state_dims);
    for t in (0..steps).rev() {
        let dh_head = generate_filter_backward(
            &states[t].h,
            &d_filters[t],
            &model.lstm,
            &mut grads.lstm,
            scratch,
        );
        for (a, b) in dh.data_mut().iter_mut().zip(dh_head.data()) {
            *a += *b;
        }
        if t > 0 {
            let (de_t, dh_prev, dc_prev) = lstm_step_backward(
                &step_caches[t - 1],
                &states[t - 1].c,
                &states[t].c,
                &dh,
                &dc,
                &model.lstm,
                &mut grads.lstm,
                scratch,
            );
            let ec = e_caches[t].take().expect("cache consumed once");
            model
                .ecnn
                .backward(&ec, &de_t, &mut grads.ecnn, scratch, false);
            dh = dh_prev;
            dc = dc_prev;
        } else if !model.lstm.zero_init {
            let de0 = init_state_backward(
                e0_feat.as_ref().expect("first exemplar features retained"),
                &states[0],
                &dh,
                &dc,
                &model.lstm,
                &mut grads.lstm,
                scratch,
            );
            let ec = e_caches[0].take().expect("cache consumed once");
            model
                .ecnn
                .backward(&ec, &de0, &mut grads.ecnn, scratch, false);
        }
    }

    let mean = per_step.iter().sum::<f64>() / steps as f64;
    Ok(ClipLoss { mean, per_step })
}
