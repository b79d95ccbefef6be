//! Online tracking: a state machine that localizes the target frame by
//! frame with the learned filter, updates the recurrent memory from each
//! new exemplar, and adapts scale through a damped three-level pyramid.
//! Network parameters are never modified while tracking.

use crate::backbone::Mode;
use crate::data::{SequenceRecord, EXEMPLAR_CONTEXT, EXEMPLAR_OUT, SEARCH_CONTEXT, SEARCH_OUT};
use crate::error::{Error, Result};
use crate::filtergen::{damp_state, generate_filter, init_state, lstm_step, LstmState};
use crate::geometry::{crop_region, format_rect_line, BBox, CropSpec, GridSpec};
use crate::image::{extract_patch, ImageBuf};
use crate::model::RflModel;
use crate::nn::Scratch;
use crate::response::{
    apply_window, correlate, hann2d, max_value, scale_penalty, topk_mean_cell, upsample_bicubic,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrackerConfig {
    /// Ratio between adjacent pyramid levels; levels are step^{-1,0,1}.
    pub scale_step: f64,
    /// Multiplier applied to the off-center pyramid levels' peak scores.
    pub scale_penalty: f64,
    /// Smoothing weight for scale updates (0 = frozen scale).
    pub scale_damping: f64,
    /// Smoothing weight for memory-state updates.
    pub state_damping: f64,
    /// Blend weight of the center-prior window on normalized response maps.
    pub window_weight: f64,
    /// Number of top response cells averaged into the predicted position.
    pub top_k: usize,
    /// Response-map upsampling factor before the position readout.
    pub upsample: usize,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            scale_step: 1.03,
            scale_penalty: 0.97,
            scale_damping: 0.6,
            state_damping: 0.06,
            window_weight: 0.11,
            top_k: 5,
            upsample: 16,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.scale_step >= 1.0
            && (0.0..=1.0).contains(&self.scale_penalty)
            && self.scale_penalty > 0.0
            && (0.0..=1.0).contains(&self.scale_damping)
            && (0.0..=1.0).contains(&self.state_damping)
            && (0.0..1.0).contains(&self.window_weight)
            && self.top_k >= 1
            && self.upsample >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "tracker parameters out of range: {self:?}"
            )))
        }
    }
}

/// Everything that evolves while tracking one sequence.
#[derive(Clone)]
pub struct TrackerState {
    pub lstm: LstmState<f32>,
    /// Correlation filter [1, 6, 6, 256] regenerated after every update.
    pub filter: Tensor<f32>,
    /// Estimated target center in frame coordinates (x, y).
    pub center: (f64, f64),
    /// Estimated target size in frame pixels (w, h).
    pub target_size: (f64, f64),
    /// Cumulative size multiplier relative to the initial box.
    pub scale: f64,
    /// Frames processed so far (the init frame counts as 0).
    pub frame_index: usize,
}

fn patch_tensor(patches: &[ImageBuf]) -> Tensor<f32> {
    let (h, w) = (patches[0].h, patches[0].w);
    let mut data = Vec::with_capacity(patches.len() * h * w * 3);
    for p in patches {
        debug_assert_eq!((p.h, p.w), (h, w));
        data.extend_from_slice(&p.data);
    }
    Tensor::from_vec(&[patches.len(), h, w, 3], data)
}

/// The damped per-step size multiplier for a chosen pyramid offset:
/// (1 - damping) + damping * step^offset. Offset 0 is a fixed point (the
/// size stays put when the middle scale wins).
pub fn scale_update_factor(cfg: &TrackerConfig, offset: i32) -> f64 {
    (1.0 - cfg.scale_damping) + cfg.scale_damping * cfg.scale_step.powi(offset)
}

fn exemplar_patch(frame: &ImageBuf, center: (f64, f64), size: (f64, f64)) -> Result<ImageBuf> {
    let spec = crop_region(
        &BBox::new(center.0, center.1, size.0, size.1),
        EXEMPLAR_CONTEXT,
        EXEMPLAR_OUT,
    )?;
    extract_patch(frame, &spec)
}

/// Start tracking: cut the first exemplar around the ground-truth box,
/// build the initial memory from its features, and emit the first filter.
pub fn init_track(
    frame: &ImageBuf,
    bbox0: &BBox,
    model: &RflModel<f32>,
    cfg: &TrackerConfig,
    scratch: &mut Scratch<f32>,
) -> Result<TrackerState> {
    cfg.validate()?;
    bbox0.validate()?;
    let patch = exemplar_patch(frame, (bbox0.cx, bbox0.cy), (bbox0.w, bbox0.h))?;
    let (e_feat, _) = model.exemplar_features(&patch_tensor(&[patch]), Mode::Infer, scratch)?;
    let lstm = init_state(&e_feat, &model.lstm, scratch);
    let filter = generate_filter(&lstm.h, &model.lstm, scratch);
    Ok(TrackerState {
        lstm,
        filter,
        center: (bbox0.cx, bbox0.cy),
        target_size: (bbox0.w, bbox0.h),
        scale: 1.0,
        frame_index: 0,
    })
}

/// Process one frame: score a three-level scale pyramid of search crops
/// against the current filter, read the new position from the windowed
/// winning response, damp the scale, then refresh the memory and filter
/// from an exemplar cut at the new position.
pub fn track_step(
    state: &TrackerState,
    frame: &ImageBuf,
    model: &RflModel<f32>,
    cfg: &TrackerConfig,
    scratch: &mut Scratch<f32>,
) -> Result<(BBox, TrackerState)> {
    let (w, h) = state.target_size;
    let base = crop_region(
        &BBox::new(state.center.0, state.center.1, w, h),
        SEARCH_CONTEXT,
        SEARCH_OUT,
    )?;
    let offsets = [-1i32, 0, 1];
    let sides: Vec<f64> = offsets
        .iter()
        .map(|&m| base.side * cfg.scale_step.powi(m))
        .collect();
    let patches = sides
        .iter()
        .map(|&side| {
            extract_patch(
                frame,
                &CropSpec {
                    center: state.center,
                    side,
                    out_size: SEARCH_OUT,
                },
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let (s_feat, _) = model.search_features(&patch_tensor(&patches), Mode::Infer, scratch)?;
    let fd = state.filter.dims();
    let mut tiled = Tensor::zeros(&[offsets.len(), fd[1], fd[2], fd[3]]);
    for chunk in tiled.data_mut().chunks_exact_mut(state.filter.numel()) {
        chunk.copy_from_slice(state.filter.data());
    }
    let responses = correlate(&s_feat, &tiled, scratch);
    let rd = responses.dims();
    let (cells_y, cells_x) = (rd[1], rd[2]);
    let up_h = (cells_y - 1) * cfg.upsample + 1;
    let up_w = (cells_x - 1) * cfg.upsample + 1;
    let window = hann2d(up_h, up_w);

    let mut best: Option<(usize, f64, Vec<f32>)> = None;
    for (si, &m) in offsets.iter().enumerate() {
        let raw = &responses.data()[si * cells_y * cells_x..(si + 1) * cells_y * cells_x];
        let up = upsample_bicubic(raw, cells_y, cells_x, cfg.upsample);
        let windowed = apply_window(&up, &window, cfg.window_weight);
        let peak = max_value(&windowed) * scale_penalty(m, cfg.scale_penalty);
        if best.as_ref().map_or(true, |(_, b, _)| peak > *b) {
            best = Some((si, peak, windowed));
        }
    }
    let (best_idx, _, best_map) = best.expect("nonempty pyramid");
    let m_best = offsets[best_idx];

    // Upsampled index u maps to search-patch pixel origin + stride*u/factor;
    // patch pixels map to the frame through the winning crop's pixel pitch.
    let (ux, uy) = topk_mean_cell(&best_map, up_h, up_w, cfg.top_k);
    let grid = GridSpec::response_default();
    let patch_center = (SEARCH_OUT - 1) as f64 / 2.0;
    let pitch = sides[best_idx] / SEARCH_OUT as f64;
    let px = grid.origin + grid.stride * ux / cfg.upsample as f64;
    let py = grid.origin + grid.stride * uy / cfg.upsample as f64;
    let center = (
        state.center.0 + (px - patch_center) * pitch,
        state.center.1 + (py - patch_center) * pitch,
    );

    let factor = scale_update_factor(cfg, m_best);
    let scale = state.scale * factor;
    let target_size = (state.target_size.0 * factor, state.target_size.1 * factor);
    let predicted = BBox::new(center.0, center.1, target_size.0, target_size.1);

    let patch = exemplar_patch(frame, center, target_size)?;
    let (e_feat, _) = model.exemplar_features(&patch_tensor(&[patch]), Mode::Infer, scratch)?;
    let (stepped, _) = lstm_step(&state.lstm, &e_feat, &model.lstm, scratch, false);
    let lstm = damp_state(&state.lstm, &stepped, cfg.state_damping);
    let filter = generate_filter(&lstm.h, &model.lstm, scratch);

    Ok((
        predicted,
        TrackerState {
            lstm,
            filter,
            center,
            target_size,
            scale,
            frame_index: state.frame_index + 1,
        },
    ))
}

/// One-pass tracking of a whole sequence: initialize on the first frame's
/// ground truth, then run [`track_step`] over the remaining frames. Returns
/// exactly one box per frame; the first is the init box itself.
pub fn track_sequence(
    seq: &SequenceRecord,
    model: &RflModel<f32>,
    cfg: &TrackerConfig,
) -> Result<Vec<BBox>> {
    if seq.is_empty() {
        return Err(Error::EmptySequence);
    }
    let init = seq.boxes[0].ok_or_else(|| {
        Error::Config(format!(
            "sequence {} has no ground truth on its first frame",
            seq.name
        ))
    })?;
    let mut scratch = Scratch::new();
    let mut state = init_track(&seq.frame(0)?, &init, model, cfg, &mut scratch)?;
    let mut boxes = Vec::with_capacity(seq.len());
    boxes.push(init);
    for i in 1..seq.len() {
        let (bbox, next) = track_step(&state, &seq.frame(i)?, model, cfg, &mut scratch)?;
        boxes.push(bbox);
        state = next;
    }
    Ok(boxes)
}

/// Write one corner-form `x,y,w,h` line per box (the ground-truth file
/// dialect).
pub fn write_track_results(path: &std::path::Path, boxes: &[BBox]) -> Result<()> {
    let mut out = String::new();
    for b in boxes {
        out.push_str(&format_rect_line(b));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}
