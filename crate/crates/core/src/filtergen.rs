//! The convolutional LSTM that memorizes target appearance and emits the
//! correlation filter, plus the memory-state initialization network.
//!
//! States h and c are 6x6x1024 feature maps. The four gates are one fused
//! zero-padded convolution over concat(exemplar features, h) with output
//! channels packed (forget, input, candidate, output), mathematically
//! identical to four separate gate convolutions but a single GEMM. The
//! output layer is a 1x1 convolution from h to the 6x6x256 filter, with no
//! activation. The init net maps the first exemplar's features through two
//! zero-padded 3x3 convolutions with tanh to produce h0 and c0.

use crate::nn::conv::{conv_backward, conv_forward, ConvSpec};
use crate::nn::init::{fan_in_std, fill_normal};
use crate::nn::Scratch;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

pub const STATE_CHANNELS: usize = 1024;

/// Paired hidden/cell state maps, shaped [batch, side, side, state_ch].
#[derive(Clone, Debug)]
pub struct LstmState<T> {
    pub h: Tensor<T>,
    pub c: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct LstmParams<T> {
    pub feat_ch: usize,
    pub state_ch: usize,
    /// Fused gate convolution: (feat_ch + state_ch) -> 4 * state_ch,
    /// zero-padded so spatial size is preserved.
    pub gate_spec: ConvSpec,
    pub w_gates: Tensor<T>,
    pub b_gates: Tensor<T>,
    /// Output layer: 1x1, state_ch -> feat_ch, no activation.
    pub out_spec: ConvSpec,
    pub w_out: Tensor<T>,
    pub b_out: Tensor<T>,
    /// Init net: 3x3 zero-padded, feat_ch -> state_ch, tanh; one per state.
    pub init_spec: ConvSpec,
    pub w_init_h: Tensor<T>,
    pub b_init_h: Tensor<T>,
    pub w_init_c: Tensor<T>,
    pub b_init_c: Tensor<T>,
    /// Variant: ignore the init net and start from all-zero states.
    pub zero_init: bool,
}

impl<T: Scalar> LstmParams<T> {
    /// Production configuration: 256-channel features, 1024-channel states.
    pub fn new(rng: &mut Rng, gate_kernel: usize, zero_init: bool) -> Self {
        Self::with_dims(rng, 256, STATE_CHANNELS, gate_kernel, zero_init)
    }

    pub fn with_dims(
        rng: &mut Rng,
        feat_ch: usize,
        state_ch: usize,
        gate_kernel: usize,
        zero_init: bool,
    ) -> Self {
        assert!(
            gate_kernel % 2 == 1,
            "gate kernel must be odd, got {gate_kernel}"
        );
        let gate_spec = ConvSpec::same(gate_kernel, feat_ch + state_ch, 4 * state_ch);
        let out_spec = ConvSpec::valid(1, state_ch, feat_ch, 1);
        let init_spec = ConvSpec::same(3, feat_ch, state_ch);

        let mut w_gates = Tensor::zeros(&gate_spec.weight_dims());
        fill_normal(
            &mut w_gates,
            rng,
            fan_in_std(gate_kernel * gate_kernel * (feat_ch + state_ch)),
        );
        // Forget-gate bias starts at 1 so early training doesn't wipe memory.
        let mut b_gates = Tensor::zeros(&[4 * state_ch]);
        b_gates.data_mut()[..state_ch]
            .iter_mut()
            .for_each(|v| *v = T::ONE);

        // Near-zero output layer: initial filters (and responses) start tiny.
        let mut w_out = Tensor::zeros(&out_spec.weight_dims());
        fill_normal(&mut w_out, rng, 1e-3);

        let mut w_init_h = Tensor::zeros(&init_spec.weight_dims());
        let mut w_init_c = Tensor::zeros(&init_spec.weight_dims());
        fill_normal(&mut w_init_h, rng, fan_in_std(9 * feat_ch));
        fill_normal(&mut w_init_c, rng, fan_in_std(9 * feat_ch));

        LstmParams {
            feat_ch,
            state_ch,
            gate_spec,
            w_gates,
            b_gates,
            out_spec,
            w_out,
            b_out: Tensor::zeros(&[feat_ch]),
            init_spec,
            w_init_h,
            b_init_h: Tensor::zeros(&[state_ch]),
            w_init_c,
            b_init_c: Tensor::zeros(&[state_ch]),
            zero_init,
        }
    }
}

/// Build the initial memory state from the first exemplar's feature map
/// (h0 = tanh(conv_h(e0)), c0 = tanh(conv_c(e0))), or all zeros in the
/// zero-init variant.
pub fn init_state<T: Scalar>(
    e0: &Tensor<T>,
    p: &LstmParams<T>,
    scratch: &mut Scratch<T>,
) -> LstmState<T> {
    let d = e0.dims();
    assert_eq!(d.len(), 4, "e0 must be NHWC");
    assert_eq!(d[3], p.feat_ch, "e0 channels");
    let state_dims = [d[0], d[1], d[2], p.state_ch];
    if p.zero_init {
        return LstmState {
            h: Tensor::zeros(&state_dims),
            c: Tensor::zeros(&state_dims),
        };
    }
    let mut h = conv_forward(e0, &p.w_init_h, &p.b_init_h, &p.init_spec, scratch);
    let mut c = conv_forward(e0, &p.w_init_c, &p.b_init_c, &p.init_spec, scratch);
    crate::nn::act::tanh_inplace(h.data_mut());
    crate::nn::act::tanh_inplace(c.data_mut());
    LstmState { h, c }
}

/// Backward through `init_state`. `dh0`/`dc0` are gradients at the produced
/// states (post-tanh, so the state values themselves parameterize the tanh
/// derivative). Returns d(e0) and accumulates parameter gradients.
pub fn init_state_backward<T: Scalar>(
    e0: &Tensor<T>,
    state0: &LstmState<T>,
    dh0: &Tensor<T>,
    dc0: &Tensor<T>,
    p: &LstmParams<T>,
    g: &mut LstmGrads<T>,
    scratch: &mut Scratch<T>,
) -> Tensor<T> {
    if p.zero_init {
        return Tensor::zeros(e0.dims());
    }
    let mut de0 = Tensor::zeros(e0.dims());
    for (state, dstate, w, dw, db) in [
        (
            &state0.h,
            dh0,
            &p.w_init_h,
            &mut g.dw_init_h,
            &mut g.db_init_h,
        ),
        (
            &state0.c,
            dc0,
            &p.w_init_c,
            &mut g.dw_init_c,
            &mut g.db_init_c,
        ),
    ] {
        let mut dpre = Tensor::zeros(dstate.dims());
        for ((d, s), o) in dpre
            .data_mut()
            .iter_mut()
            .zip(dstate.data())
            .zip(state.data())
        {
            *d = *s * (T::ONE - *o * *o);
        }
        let (dwv, dbv, dx) = conv_backward(e0, w, &p.init_spec, &dpre, true, scratch);
        acc(dw, &dwv);
        acc(db, &dbv);
        for (a, b) in de0.data_mut().iter_mut().zip(dx.unwrap().data()) {
            *a += *b;
        }
    }
    de0
}

/// Forward cache for one LSTM step: the concatenated input and the
/// post-activation gate maps (packed f|i|e|o).
pub struct StepCache<T> {
    pub xcat: Tensor<T>,
    pub gates: Tensor<T>,
}

/// One conv-LSTM step. Gates: f = sig, i = sig, candidate e = tanh,
/// o = sig; c_t = f*c + i*e; h_t = o * tanh(c_t).
pub fn lstm_step<T: Scalar>(
    state: &LstmState<T>,
    e_t: &Tensor<T>,
    p: &LstmParams<T>,
    scratch: &mut Scratch<T>,
    want_cache: bool,
) -> (LstmState<T>, Option<StepCache<T>>) {
    let d = e_t.dims();
    assert_eq!(d[3], p.feat_ch, "e_t channels");
    assert_eq!(state.h.dims()[..3], d[..3], "state/input spatial dims");
    assert_eq!(state.h.dims()[3], p.state_ch, "state channels");
    let n = d[0];
    let (hh, ww) = (d[1], d[2]);
    let sc = p.state_ch;

    // concat along channels: (e_t, h)
    let mut xcat = Tensor::zeros(&[n, hh, ww, p.feat_ch + sc]);
    {
        let xc = xcat.data_mut();
        let ed = e_t.data();
        let hd = state.h.data();
        let cin = p.feat_ch + sc;
        for pos in 0..n * hh * ww {
            xc[pos * cin..pos * cin + p.feat_ch]
                .copy_from_slice(&ed[pos * p.feat_ch..(pos + 1) * p.feat_ch]);
            xc[pos * cin + p.feat_ch..(pos + 1) * cin]
                .copy_from_slice(&hd[pos * sc..(pos + 1) * sc]);
        }
    }

    let mut gates = conv_forward(&xcat, &p.w_gates, &p.b_gates, &p.gate_spec, scratch);
    for row in gates.data_mut().chunks_exact_mut(4 * sc) {
        for v in &mut row[..sc] {
            *v = crate::nn::act::sigmoid(*v);
        }
        for v in &mut row[sc..2 * sc] {
            *v = crate::nn::act::sigmoid(*v);
        }
        for v in &mut row[2 * sc..3 * sc] {
            *v = v.tanh();
        }
        for v in &mut row[3 * sc..4 * sc] {
            *v = crate::nn::act::sigmoid(*v);
        }
    }

    let mut c_new = Tensor::zeros(state.c.dims());
    let mut h_new = Tensor::zeros(state.h.dims());
    {
        let g = gates.data();
        let cp = state.c.data();
        let cn = c_new.data_mut();
        let hn = h_new.data_mut();
        for pos in 0..n * hh * ww {
            let gr = &g[pos * 4 * sc..(pos + 1) * 4 * sc];
            for ci in 0..sc {
                let f = gr[ci];
                let i = gr[sc + ci];
                let e = gr[2 * sc + ci];
                let o = gr[3 * sc + ci];
                let c = f * cp[pos * sc + ci] + i * e;
                cn[pos * sc + ci] = c;
                hn[pos * sc + ci] = o * c.tanh();
            }
        }
    }
    let cache = want_cache.then_some(StepCache { xcat, gates });
    (LstmState { h: h_new, c: c_new }, cache)
}

/// Backward through one step. Takes gradients wrt the step's outputs
/// (dh_t, dc_t), the previous cell state and this step's cell state, and
/// returns (de_t, dh_prev, dc_prev).
#[allow(clippy::too_many_arguments)]
pub fn lstm_step_backward<T: Scalar>(
    cache: &StepCache<T>,
    c_prev: &Tensor<T>,
    c_t: &Tensor<T>,
    dh_t: &Tensor<T>,
    dc_t: &Tensor<T>,
    p: &LstmParams<T>,
    g: &mut LstmGrads<T>,
    scratch: &mut Scratch<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let sc = p.state_ch;
    let positions = c_prev.numel() / sc;
    let mut dz = Tensor::zeros(cache.gates.dims());
    let mut dc_prev = Tensor::zeros(c_prev.dims());
    {
        let gd = cache.gates.data();
        let cpd = c_prev.data();
        let ctd = c_t.data();
        let dhd = dh_t.data();
        let dcd = dc_t.data();
        let dzd = dz.data_mut();
        let dcp = dc_prev.data_mut();
        for pos in 0..positions {
            let gr = &gd[pos * 4 * sc..(pos + 1) * 4 * sc];
            let zr = &mut dzd[pos * 4 * sc..(pos + 1) * 4 * sc];
            for ci in 0..sc {
                let f = gr[ci];
                let i = gr[sc + ci];
                let e = gr[2 * sc + ci];
                let o = gr[3 * sc + ci];
                let tc = ctd[pos * sc + ci].tanh();
                let dh = dhd[pos * sc + ci];
                let dct = dcd[pos * sc + ci] + dh * o * (T::ONE - tc * tc);
                let do_ = dh * tc;
                let df = dct * cpd[pos * sc + ci];
                let di = dct * e;
                let de = dct * i;
                dcp[pos * sc + ci] = dct * f;
                zr[ci] = df * f * (T::ONE - f);
                zr[sc + ci] = di * i * (T::ONE - i);
                zr[2 * sc + ci] = de * (T::ONE - e * e);
                zr[3 * sc + ci] = do_ * o * (T::ONE - o);
            }
        }
    }
    let (dwg, dbg, dxcat) =
        conv_backward(&cache.xcat, &p.w_gates, &p.gate_spec, &dz, true, scratch);
    acc(&mut g.dw_gates, &dwg);
    acc(&mut g.db_gates, &dbg);
    let dxcat = dxcat.unwrap();

    // split dxcat into (de_t, dh_prev)
    let d = cache.xcat.dims();
    let cin = p.feat_ch + sc;
    let mut de_t = Tensor::zeros(&[d[0], d[1], d[2], p.feat_ch]);
    let mut dh_prev = Tensor::zeros(&[d[0], d[1], d[2], sc]);
    {
        let src = dxcat.data();
        let de = de_t.data_mut();
        let dh = dh_prev.data_mut();
        for pos in 0..positions {
            de[pos * p.feat_ch..(pos + 1) * p.feat_ch]
                .copy_from_slice(&src[pos * cin..pos * cin + p.feat_ch]);
            dh[pos * sc..(pos + 1) * sc]
                .copy_from_slice(&src[pos * cin + p.feat_ch..(pos + 1) * cin]);
        }
    }
    (de_t, dh_prev, dc_prev)
}

/// The output layer: 1x1 convolution from the hidden state to the filter,
/// no activation.
pub fn generate_filter<T: Scalar>(
    h: &Tensor<T>,
    p: &LstmParams<T>,
    scratch: &mut Scratch<T>,
) -> Tensor<T> {
    assert_eq!(h.dims()[3], p.state_ch, "hidden channels");
    conv_forward(h, &p.w_out, &p.b_out, &p.out_spec, scratch)
}

/// Backward of `generate_filter`: returns dh.
pub fn generate_filter_backward<T: Scalar>(
    h: &Tensor<T>,
    dfilter: &Tensor<T>,
    p: &LstmParams<T>,
    g: &mut LstmGrads<T>,
    scratch: &mut Scratch<T>,
) -> Tensor<T> {
    let (dw, db, dh) = conv_backward(h, &p.w_out, &p.out_spec, dfilter, true, scratch);
    acc(&mut g.dw_out, &dw);
    acc(&mut g.db_out, &db);
    dh.unwrap()
}

/// Exponential smoothing of both state maps: (1 - beta) * old + beta * new.
pub fn damp_state<T: Scalar>(old: &LstmState<T>, new: &LstmState<T>, beta: f64) -> LstmState<T> {
    assert_eq!(old.h.dims(), new.h.dims(), "damp_state shapes");
    assert_eq!(old.c.dims(), new.c.dims(), "damp_state shapes");
    let a = T::from_f64(1.0 - beta);
    let b = T::from_f64(beta);
    let blend = |o: &Tensor<T>, n: &Tensor<T>| {
        let mut out = Tensor::zeros(o.dims());
        for ((r, ov), nv) in out.data_mut().iter_mut().zip(o.data()).zip(n.data()) {
            *r = a * *ov + b * *nv;
        }
        out
    };
    LstmState {
        h: blend(&old.h, &new.h),
        c: blend(&old.c, &new.c),
    }
}

#[derive(Clone, Debug)]
pub struct LstmGrads<T> {
    pub dw_gates: Tensor<T>,
    pub db_gates: Tensor<T>,
    pub dw_out: Tensor<T>,
    pub db_out: Tensor<T>,
    pub dw_init_h: Tensor<T>,
    pub db_init_h: Tensor<T>,
    pub dw_init_c: Tensor<T>,
    pub db_init_c: Tensor<T>,
}

impl<T: Scalar> LstmGrads<T> {
    pub fn zeros_like(p: &LstmParams<T>) -> Self {
        LstmGrads {
            dw_gates: Tensor::zeros(p.w_gates.dims()),
            db_gates: Tensor::zeros(p.b_gates.dims()),
            dw_out: Tensor::zeros(p.w_out.dims()),
            db_out: Tensor::zeros(p.b_out.dims()),
            dw_init_h: Tensor::zeros(p.w_init_h.dims()),
            db_init_h: Tensor::zeros(p.b_init_h.dims()),
            dw_init_c: Tensor::zeros(p.w_init_c.dims()),
            db_init_c: Tensor::zeros(p.b_init_c.dims()),
        }
    }
}

fn acc<T: Scalar>(dst: &mut Tensor<T>, src: &Tensor<T>) {
    debug_assert_eq!(dst.dims(), src.dims());
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += *s;
    }
}
