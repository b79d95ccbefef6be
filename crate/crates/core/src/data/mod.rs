//! Training data plumbing: sequence records (on-disk or synthetic), clip
//! sampling, exemplar/search patch cropping, and photometric/geometric
//! augmentation.

pub mod otb;
pub mod synth;

use crate::error::{Error, Result};
use crate::geometry::{crop_region, BBox, CropSpec, GridSpec};
use crate::image::{extract_patch, ImageBuf};
use crate::rng::Rng;
use crate::supervision::{groundtruth_map, LabelMap};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng as _;
use std::path::PathBuf;

pub const EXEMPLAR_CONTEXT: f64 = 2.0;
pub const SEARCH_CONTEXT: f64 = 4.0;
pub const EXEMPLAR_OUT: usize = 127;
pub const SEARCH_OUT: usize = 255;

/// Where a sequence's frames come from.
#[derive(Clone, Debug)]
pub enum FrameSource {
    /// Image files on disk, one per frame.
    Files(Vec<PathBuf>),
    /// Procedurally rendered frames (re-rendered on demand; cheap and
    /// deterministic).
    Synth(synth::SynthSpec),
}

/// One video sequence with per-frame ground truth. `None` boxes mark frames
/// where the target is absent from the annotations.
#[derive(Clone, Debug)]
pub struct SequenceRecord {
    pub name: String,
    pub frames: FrameSource,
    pub boxes: Vec<Option<BBox>>,
}

impl SequenceRecord {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn frame(&self, i: usize) -> Result<ImageBuf> {
        match &self.frames {
            FrameSource::Files(paths) => {
                let p = paths.get(i).ok_or(Error::EmptySequence)?;
                ImageBuf::load(p)
            }
            FrameSource::Synth(spec) => Ok(synth::render_frame(spec, i)),
        }
    }
}

/// A training clip: n exemplar patches from sampled frames 1..n and n search
/// patches from sampled frames 2..n+1, with the target box of each search
/// frame expressed in that search patch's pixel coordinates.
#[derive(Clone, Debug)]
pub struct Clip {
    pub exemplars: Vec<ImageBuf>,
    pub searches: Vec<ImageBuf>,
    pub label_boxes: Vec<BBox>,
}

/// How frame indices are chosen from a sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleStrategy {
    /// Uniform without replacement, then sorted ascending.
    UniformRandom,
    /// Evenly spaced across the valid frames.
    EvenlySpaced,
}

/// Photometric distortion parameters. The four adjustments are applied in
/// `order`; each output is clamped to [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct ColorAug {
    pub order: [ColorOp; 4],
    /// Additive shift, drawn from +-32/255.
    pub brightness: f32,
    /// Multiplier around the patch's mean luminance, drawn from [0.5, 1.5].
    pub contrast: f32,
    /// Multiplier around per-pixel luminance, drawn from [0.5, 1.5].
    pub saturation: f32,
    /// Hue rotation as a fraction of the full circle, drawn from +-0.05.
    pub hue: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColorOp {
    Brightness,
    Contrast,
    Saturation,
    Hue,
}

impl ColorAug {
    pub fn identity() -> Self {
        ColorAug {
            order: [
                ColorOp::Brightness,
                ColorOp::Contrast,
                ColorOp::Saturation,
                ColorOp::Hue,
            ],
            brightness: 0.0,
            contrast: 1.0,
            saturation: 1.0,
            hue: 0.0,
        }
    }

    pub fn draw(rng: &mut Rng) -> Self {
        let mut order = [
            ColorOp::Brightness,
            ColorOp::Contrast,
            ColorOp::Saturation,
            ColorOp::Hue,
        ];
        order.shuffle(rng);
        ColorAug {
            order,
            brightness: rng.gen_range(-32.0 / 255.0..=32.0 / 255.0),
            contrast: rng.gen_range(0.5..=1.5),
            saturation: rng.gen_range(0.5..=1.5),
            hue: rng.gen_range(-0.05..=0.05),
        }
    }
}

fn luminance(p: [f32; 3]) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn rgb_to_hsv(p: [f32; 3]) -> [f32; 3] {
    let (r, g, b) = (p[0], p[1], p[2]);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / d).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

fn hsv_to_rgb(p: [f32; 3]) -> [f32; 3] {
    let (h, s, v) = (p[0].rem_euclid(1.0) * 6.0, p[1], p[2]);
    let i = h.floor();
    let f = h - i;
    let p0 = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 % 6 {
        0 => [v, t, p0],
        1 => [q, v, p0],
        2 => [p0, v, t],
        3 => [p0, q, v],
        4 => [t, p0, v],
        _ => [v, p0, q],
    }
}

/// Apply the four photometric adjustments in the configured order, clamping
/// to [0,1] after each.
pub fn apply_color(patch: &ImageBuf, aug: &ColorAug) -> ImageBuf {
    let mut out = patch.clone();
    for op in aug.order {
        match op {
            ColorOp::Brightness => {
                if aug.brightness != 0.0 {
                    for v in &mut out.data {
                        *v = (*v + aug.brightness).clamp(0.0, 1.0);
                    }
                }
            }
            ColorOp::Contrast => {
                if aug.contrast != 1.0 {
                    let mean: f32 = out
                        .data
                        .chunks_exact(3)
                        .map(|p| luminance([p[0], p[1], p[2]]))
                        .sum::<f32>()
                        / (out.w * out.h) as f32;
                    for v in &mut out.data {
                        *v = ((*v - mean) * aug.contrast + mean).clamp(0.0, 1.0);
                    }
                }
            }
            ColorOp::Saturation => {
                if aug.saturation != 1.0 {
                    for p in out.data.chunks_exact_mut(3) {
                        let l = luminance([p[0], p[1], p[2]]);
                        for v in p {
                            *v = ((*v - l) * aug.saturation + l).clamp(0.0, 1.0);
                        }
                    }
                }
            }
            ColorOp::Hue => {
                if aug.hue != 0.0 {
                    for p in out.data.chunks_exact_mut(3) {
                        let mut hsv = rgb_to_hsv([p[0], p[1], p[2]]);
                        hsv[0] += aug.hue;
                        let rgb = hsv_to_rgb(hsv);
                        p[0] = rgb[0].clamp(0.0, 1.0);
                        p[1] = rgb[1].clamp(0.0, 1.0);
                        p[2] = rgb[2].clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    out
}

/// Geometric jitter for one crop: translation of the crop center in patch
/// pixels, and a stretch term added to the context factor (the crop side
/// becomes (context + stretch) * sqrt(w*h)).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeomAug {
    pub dx: f64,
    pub dy: f64,
    pub stretch: f64,
}

impl GeomAug {
    pub fn identity() -> Self {
        GeomAug {
            dx: 0.0,
            dy: 0.0,
            stretch: 0.0,
        }
    }

    /// Search jitter: center shift up to 4 patch pixels per axis, stretch in
    /// +-0.05.
    pub fn draw_search(rng: &mut Rng) -> Self {
        GeomAug {
            dx: rng.gen_range(-4.0..=4.0),
            dy: rng.gen_range(-4.0..=4.0),
            stretch: rng.gen_range(-0.05..=0.05),
        }
    }

    /// Exemplar jitter: stretch in +-0.5, translation anywhere that keeps
    /// the target box fully inside the (stretched) crop.
    pub fn draw_exemplar(gt: &BBox, rng: &mut Rng) -> Self {
        let stretch = rng.gen_range(-0.5..=0.5);
        let side = (EXEMPLAR_CONTEXT + stretch) * (gt.w * gt.h).sqrt();
        // translation bound in patch pixels: |d| * side/out <= (side - box)/2
        let bx = (EXEMPLAR_OUT as f64 * (side - gt.w) / (2.0 * side)).max(0.0);
        let by = (EXEMPLAR_OUT as f64 * (side - gt.h) / (2.0 * side)).max(0.0);
        GeomAug {
            dx: rng.gen_range(-bx..=bx),
            dy: rng.gen_range(-by..=by),
            stretch,
        }
    }
}

/// The crop window a geometric augmentation produces for a target box:
/// side = (context + stretch) * sqrt(w*h), center shifted by (dx, dy) patch
/// pixels converted to frame pixels.
pub fn aug_crop_spec(gt: &BBox, context: f64, out_size: usize, aug: &GeomAug) -> Result<CropSpec> {
    let base = crop_region(gt, context + aug.stretch, out_size)?;
    let k = base.side / out_size as f64;
    Ok(CropSpec {
        center: (base.center.0 + aug.dx * k, base.center.1 + aug.dy * k),
        side: base.side,
        out_size,
    })
}

/// Express a frame-coordinate box in the pixel coordinates of a patch cut by
/// `spec` (center-pixel-aligned convention).
pub fn box_in_patch(b: &BBox, spec: &CropSpec) -> BBox {
    let k = spec.side / spec.out_size as f64;
    let c = (spec.out_size as f64 - 1.0) / 2.0;
    BBox {
        cx: c + (b.cx - spec.center.0) / k,
        cy: c + (b.cy - spec.center.1) / k,
        w: b.w / k,
        h: b.h / k,
    }
}

/// Pick n+1 frame indices (among frames that have ground truth), sorted
/// ascending.
fn choose_frames(
    seq: &SequenceRecord,
    n: usize,
    strategy: SampleStrategy,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    let valid: Vec<usize> = (0..seq.len()).filter(|&i| seq.boxes[i].is_some()).collect();
    if valid.len() < n + 1 {
        return Err(Error::TooShortSequence {
            need: n + 1,
            got: valid.len(),
        });
    }
    let mut picks: Vec<usize> = match strategy {
        SampleStrategy::UniformRandom => {
            rand::seq::index::sample(rng, valid.len(), n + 1).into_vec()
        }
        SampleStrategy::EvenlySpaced => (0..=n).map(|k| k * (valid.len() - 1) / n.max(1)).collect(),
    };
    picks.sort_unstable();
    picks.dedup();
    // Evenly-spaced picks can collide on short sequences; pad from the front.
    let mut next = 0usize;
    while picks.len() < n + 1 {
        if !picks.contains(&next) {
            picks.push(next);
            picks.sort_unstable();
        }
        next += 1;
    }
    Ok(picks.into_iter().map(|i| valid[i]).collect())
}

/// Sample one training clip. Frames are chosen by `strategy`; exemplars are
/// context-2 crops of sampled frames 1..n and searches context-4 crops of
/// sampled frames 2..n+1, each centered on its own frame's ground truth.
/// With `augment`, geometric and photometric jitter is applied to everything
/// except the first exemplar; label boxes always reflect the actual crop.
pub fn sample_clip(
    seq: &SequenceRecord,
    n: usize,
    rng: &mut Rng,
    strategy: SampleStrategy,
    augment: bool,
) -> Result<Clip> {
    if n == 0 {
        return Err(Error::Config("clip length must be positive".into()));
    }
    let frames = choose_frames(seq, n, strategy, rng)?;
    let mut exemplars = Vec::with_capacity(n);
    let mut searches = Vec::with_capacity(n);
    let mut label_boxes = Vec::with_capacity(n);
    // Frames can repeat across steps (exemplar k+1 and search k share frame
    // k+1); cache the most recent decode.
    let mut cached: Option<(usize, ImageBuf)> = None;
    let get_frame = |idx: usize, cached: &mut Option<(usize, ImageBuf)>| -> Result<ImageBuf> {
        if let Some((ci, img)) = cached {
            if *ci == idx {
                return Ok(img.clone());
            }
        }
        let img = seq.frame(idx)?;
        *cached = Some((idx, img.clone()));
        Ok(img)
    };

    for k in 0..n {
        // exemplar from sampled frame k
        let ei = frames[k];
        let egt = seq.boxes[ei].as_ref().unwrap();
        let eimg = get_frame(ei, &mut cached)?;
        let eaug = if augment && k > 0 {
            GeomAug::draw_exemplar(egt, rng)
        } else {
            GeomAug::identity()
        };
        let espec = aug_crop_spec(egt, EXEMPLAR_CONTEXT, EXEMPLAR_OUT, &eaug)?;
        let mut epatch = extract_patch(&eimg, &espec)?;
        if augment && k > 0 {
            epatch = apply_color(&epatch, &ColorAug::draw(rng));
        }
        exemplars.push(epatch);

        // search from sampled frame k+1
        let si = frames[k + 1];
        let sgt = seq.boxes[si].as_ref().unwrap();
        let simg = get_frame(si, &mut cached)?;
        let saug = if augment {
            GeomAug::draw_search(rng)
        } else {
            GeomAug::identity()
        };
        let sspec = aug_crop_spec(sgt, SEARCH_CONTEXT, SEARCH_OUT, &saug)?;
        let mut spatch = extract_patch(&simg, &sspec)?;
        if augment {
            spatch = apply_color(&spatch, &ColorAug::draw(rng));
        }
        searches.push(spatch);
        label_boxes.push(box_in_patch(sgt, &sspec));
    }
    Ok(Clip {
        exemplars,
        searches,
        label_boxes,
    })
}

/// Stack clips into step-major training tensors: for each step t, an
/// exemplar batch [n,127,127,3], a search batch [n,255,255,3] (raw [0,1]
/// pixels), and per-sample label maps built from the label boxes.
#[allow(clippy::type_complexity)]
pub fn assemble_batch(
    clips: &[Clip],
    alpha: f64,
) -> Result<(Vec<Tensor<f32>>, Vec<Tensor<f32>>, Vec<Vec<LabelMap>>)> {
    if clips.is_empty() {
        return Err(Error::EmptySequence);
    }
    let steps = clips[0].exemplars.len();
    if clips
        .iter()
        .any(|c| c.exemplars.len() != steps || c.searches.len() != steps)
    {
        return Err(Error::Config("clips in a batch must share length".into()));
    }
    let n = clips.len();
    let grid = GridSpec::response_default();
    let mut exemplars = Vec::with_capacity(steps);
    let mut searches = Vec::with_capacity(steps);
    let mut labels = Vec::with_capacity(steps);
    for t in 0..steps {
        let mut e = Tensor::zeros(&[n, EXEMPLAR_OUT, EXEMPLAR_OUT, 3]);
        let mut s = Tensor::zeros(&[n, SEARCH_OUT, SEARCH_OUT, 3]);
        let mut lms = Vec::with_capacity(n);
        let esz = EXEMPLAR_OUT * EXEMPLAR_OUT * 3;
        let ssz = SEARCH_OUT * SEARCH_OUT * 3;
        for (i, clip) in clips.iter().enumerate() {
            e.data_mut()[i * esz..(i + 1) * esz].copy_from_slice(&clip.exemplars[t].data);
            s.data_mut()[i * ssz..(i + 1) * ssz].copy_from_slice(&clip.searches[t].data);
            lms.push(groundtruth_map(&clip.label_boxes[t], &grid, alpha)?);
        }
        exemplars.push(e);
        searches.push(s);
        labels.push(lms);
    }
    Ok((exemplars, searches, labels))
}
