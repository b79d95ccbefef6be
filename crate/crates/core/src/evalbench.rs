//! One-pass evaluation: run the tracker over whole sequences from their
//! first annotation, score every annotated frame against ground truth, and
//! aggregate per-sequence success curves into a macro-averaged report.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;

use crate::data::SequenceRecord;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::model::RflModel;
use crate::tracker::{track_sequence, write_track_results, TrackerConfig};

/// Number of overlap thresholds on the success curve (0.00 to 1.00
/// inclusive, step 0.01).
pub const CURVE_POINTS: usize = 101;

/// Environment variable overriding the evaluation worker count.
pub const WORKERS_ENV: &str = "RFL_NUM_WORKERS";

pub fn overlap_thresholds() -> Vec<f64> {
    (0..CURVE_POINTS)
        .map(|i| i as f64 / (CURVE_POINTS - 1) as f64)
        .collect()
}

/// Fraction of overlaps strictly greater than each threshold. An empty
/// overlap list yields all zeros.
pub fn success_rates(ious: &[f64], thresholds: &[f64]) -> Vec<f64> {
    thresholds
        .iter()
        .map(|&t| {
            if ious.is_empty() {
                0.0
            } else {
                ious.iter().filter(|&&v| v > t).count() as f64 / ious.len() as f64
            }
        })
        .collect()
}

pub fn success_curve(ious: &[f64]) -> Vec<f64> {
    success_rates(ious, &overlap_thresholds())
}

/// Area under a success curve: the mean of its values.
pub fn auc(curve: &[f64]) -> f64 {
    if curve.is_empty() {
        0.0
    } else {
        curve.iter().sum::<f64>() / curve.len() as f64
    }
}

/// Success rate at a single overlap threshold (strictly greater).
pub fn success_at(ious: &[f64], threshold: f64) -> f64 {
    success_rates(ious, &[threshold])[0]
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

#[derive(Clone, Debug)]
pub struct SequenceEval {
    pub name: String,
    /// Predicted box for every frame, annotated or not.
    pub boxes: Vec<BBox>,
    /// Overlap with ground truth on annotated frames, in frame order.
    pub ious: Vec<f64>,
    /// Center distance in pixels on annotated frames.
    pub cles: Vec<f64>,
    pub curve: Vec<f64>,
    pub auc: f64,
    pub mean_iou: f64,
    pub mean_cle: f64,
    /// Fraction of annotated frames with overlap above one half.
    pub success_at_05: f64,
}

#[derive(Clone, Debug)]
pub struct OpeReport {
    pub sequences: Vec<SequenceEval>,
    /// Per-threshold success averaged across sequences (each sequence
    /// weighted equally).
    pub curve: Vec<f64>,
    /// Mean of the per-sequence areas; equals the area of `curve`.
    pub auc: f64,
    pub mean_iou: f64,
    pub mean_cle: f64,
    pub success_at_05: f64,
}

/// Track one sequence and score it on every annotated frame. Frames without
/// ground truth are tracked but not scored.
pub fn eval_sequence(
    seq: &SequenceRecord,
    model: &RflModel<f32>,
    cfg: &TrackerConfig,
) -> Result<SequenceEval> {
    let boxes = track_sequence(seq, model, cfg)?;
    let mut ious = Vec::new();
    let mut cles = Vec::new();
    for (pred, gt) in boxes.iter().zip(&seq.boxes) {
        if let Some(gt) = gt {
            ious.push(iou(pred, gt)?);
            cles.push(((pred.cx - gt.cx).powi(2) + (pred.cy - gt.cy).powi(2)).sqrt());
        }
    }
    let curve = success_curve(&ious);
    let auc_val = auc(&curve);
    let mean_iou = mean(&ious);
    let mean_cle = mean(&cles);
    let success_at_05 = success_at(&ious, 0.5);
    Ok(SequenceEval {
        name: seq.name.clone(),
        boxes,
        ious,
        cles,
        curve,
        auc: auc_val,
        mean_iou,
        mean_cle,
        success_at_05,
    })
}

/// Resolve the worker count: explicit request, then the `RFL_NUM_WORKERS`
/// environment variable, then the machine's available parallelism.
pub fn worker_count(requested: Option<usize>) -> usize {
    requested
        .or_else(|| std::env::var(WORKERS_ENV).ok().and_then(|s| s.parse().ok()))
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

/// Evaluate every sequence (in parallel across `workers` threads) and
/// macro-average the results. When `out_dir` is given, writes per-sequence
/// box files under `results/`, a `summary.json`, and the averaged success
/// curve as `curve.csv`.
pub fn run_ope(
    sequences: &[SequenceRecord],
    model: &RflModel<f32>,
    cfg: &TrackerConfig,
    workers: Option<usize>,
    out_dir: Option<&Path>,
) -> Result<OpeReport> {
    if sequences.is_empty() {
        return Err(Error::Config("no sequences to evaluate".into()));
    }
    let n_workers = worker_count(workers).min(sequences.len());
    let next = AtomicUsize::new(0);
    let slots: Vec<OnceLock<Result<SequenceEval>>> =
        (0..sequences.len()).map(|_| OnceLock::new()).collect();
    std::thread::scope(|scope| {
        for _ in 0..n_workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= sequences.len() {
                    break;
                }
                let r = eval_sequence(&sequences[i], model, cfg);
                let _ = slots[i].set(r);
            });
        }
    });
    let per: Vec<SequenceEval> = slots
        .into_iter()
        .map(|s| s.into_inner().expect("worker filled every slot"))
        .collect::<Result<_>>()?;

    let curve: Vec<f64> = (0..CURVE_POINTS)
        .map(|t| per.iter().map(|s| s.curve[t]).sum::<f64>() / per.len() as f64)
        .collect();
    let report = OpeReport {
        auc: mean(&per.iter().map(|s| s.auc).collect::<Vec<_>>()),
        mean_iou: mean(&per.iter().map(|s| s.mean_iou).collect::<Vec<_>>()),
        mean_cle: mean(&per.iter().map(|s| s.mean_cle).collect::<Vec<_>>()),
        success_at_05: mean(&per.iter().map(|s| s.success_at_05).collect::<Vec<_>>()),
        sequences: per,
        curve,
    };
    if let Some(dir) = out_dir {
        write_report(dir, &report)?;
    }
    Ok(report)
}

/// Save every frame with the ground-truth box (green) and the predicted box
/// (red) burned in; returns the number of images written.
pub fn write_overlays(seq: &SequenceRecord, boxes: &[BBox], dir: &Path) -> Result<usize> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let n = seq.len().min(boxes.len());
    for i in 0..n {
        let mut frame = seq.frame(i)?;
        if let Some(gt) = &seq.boxes[i] {
            frame.draw_rect(gt, [0.0, 1.0, 0.0]);
        }
        frame.draw_rect(&boxes[i], [1.0, 0.0, 0.0]);
        frame.save_png(&dir.join(format!("{i:04}.png")))?;
    }
    Ok(n)
}

fn write_report(dir: &Path, report: &OpeReport) -> Result<()> {
    let results = dir.join("results");
    std::fs::create_dir_all(&results).map_err(|e| Error::io(results.display().to_string(), e))?;
    for s in &report.sequences {
        write_track_results(&results.join(format!("{}.txt", s.name)), &s.boxes)?;
    }

    let summary = serde_json::json!({
        "auc": report.auc,
        "mean_iou": report.mean_iou,
        "mean_cle": report.mean_cle,
        "success_at_0.5": report.success_at_05,
        "sequences": report.sequences.iter().map(|s| serde_json::json!({
            "name": s.name,
            "frames": s.boxes.len(),
            "evaluated": s.ious.len(),
            "auc": s.auc,
            "mean_iou": s.mean_iou,
            "mean_cle": s.mean_cle,
            "success_at_0.5": s.success_at_05,
        })).collect::<Vec<_>>(),
    });
    let summary_path = dir.join("summary.json");
    std::fs::write(
        &summary_path,
        serde_json::to_string_pretty(&summary).expect("json encoding"),
    )
    .map_err(|e| Error::io(summary_path.display().to_string(), e))?;

    let mut csv = String::from("threshold,success\n");
    for (t, v) in overlap_thresholds().iter().zip(&report.curve) {
        csv.push_str(&format!("{t:.2},{v}\n"));
    }
    let curve_path = dir.join("curve.csv");
    std::fs::write(&curve_path, csv).map_err(|e| Error::io(curve_path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{ground_truth, SynthSpec};
    use crate::data::FrameSource;
    use crate::model::VariantConfig;
    use crate::rng::rng_from_seed;
    use rand::Rng as _;
    use std::sync::OnceLock as Once;

    fn model() -> &'static RflModel<f32> {
        static M: Once<RflModel<f32>> = Once::new();
        M.get_or_init(|| RflModel::new(&mut rng_from_seed(99), &VariantConfig::default()))
    }

    fn synth_seq(seed: u64, length: usize) -> SequenceRecord {
        let spec = SynthSpec {
            seed,
            length,
            ..SynthSpec::default()
        };
        SequenceRecord {
            name: format!("synth-{seed}"),
            boxes: ground_truth(&spec),
            frames: FrameSource::Synth(spec),
        }
    }

    #[test]
    fn success_counts_use_strict_inequality() {
        assert_eq!(success_rates(&[0.4], &[0.3, 0.4, 0.5]), vec![1.0, 0.0, 0.0]);
        // Mean of that three-point curve.
        assert!((auc(&success_rates(&[0.4], &[0.3, 0.4, 0.5])) - 1.0 / 3.0).abs() < 1e-12);
        // A perfect run never clears the t = 1.0 point.
        let perfect = success_curve(&[1.0, 1.0]);
        assert_eq!(perfect[0], 1.0);
        assert_eq!(perfect[CURVE_POINTS - 1], 0.0);
        assert!((auc(&perfect) - 100.0 / 101.0).abs() < 1e-12);
    }

    #[test]
    fn success_curve_matches_naive_counting_on_random_lists() {
        let mut rng = rng_from_seed(42);
        for _ in 0..20 {
            let n = rng.gen_range(1..=200);
            let ious: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
            let curve = success_curve(&ious);
            assert_eq!(curve.len(), CURVE_POINTS);
            for (i, &t) in overlap_thresholds().iter().enumerate() {
                let mut hits = 0usize;
                for &v in &ious {
                    if v > t {
                        hits += 1;
                    }
                }
                assert_eq!(curve[i], hits as f64 / n as f64, "threshold {t}");
            }
            assert!((auc(&curve) - curve.iter().sum::<f64>() / 101.0).abs() < 1e-15);

            // The curve never increases with the threshold, and shuffling
            // the frames changes nothing.
            for w in curve.windows(2) {
                assert!(w[1] <= w[0]);
            }
            let mut shuffled = ious.clone();
            shuffled.reverse();
            shuffled.rotate_left(n / 3);
            assert_eq!(success_curve(&shuffled), curve);
        }
    }

    #[test]
    fn success_at_half_matches_hand_count() {
        assert_eq!(success_at(&[0.6, 0.4], 0.5), 0.5);
        assert_eq!(success_at(&[], 0.5), 0.0);
    }

    #[test]
    fn empty_overlap_list_scores_zero() {
        assert_eq!(success_curve(&[]), vec![0.0; CURVE_POINTS]);
        assert_eq!(auc(&[]), 0.0);
    }

    #[test]
    fn sequence_eval_scores_annotated_frames_only() {
        let mut seq = synth_seq(11, 4);
        seq.boxes[2] = None;
        let eval = eval_sequence(&seq, model(), &TrackerConfig::default()).unwrap();
        assert_eq!(eval.boxes.len(), 4);
        assert_eq!(eval.ious.len(), 3);
        assert_eq!(eval.cles.len(), 3);
        // The first frame echoes the init box back.
        assert!((eval.ious[0] - 1.0).abs() < 1e-12);
        assert_eq!(eval.cles[0], 0.0);
        assert_eq!(eval.curve.len(), CURVE_POINTS);
        assert!((eval.auc - auc(&eval.curve)).abs() < 1e-15);
    }

    #[test]
    fn report_is_invariant_to_worker_count_and_writes_files() {
        let seqs = vec![synth_seq(21, 3), synth_seq(22, 4)];
        let cfg = TrackerConfig::default();
        let one = run_ope(&seqs, model(), &cfg, Some(1), None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let two = run_ope(&seqs, model(), &cfg, Some(2), Some(dir.path())).unwrap();
        assert_eq!(one.auc, two.auc);
        assert_eq!(one.curve, two.curve);
        for (a, b) in one.sequences.iter().zip(&two.sequences) {
            assert_eq!(a.boxes, b.boxes);
            assert_eq!(a.ious, b.ious);
        }
        // Macro AUC equals the area of the macro curve.
        assert!((two.auc - auc(&two.curve)).abs() < 1e-12);

        let summary: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("summary.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(summary["sequences"].as_array().unwrap().len(), 2);
        assert!((summary["auc"].as_f64().unwrap() - two.auc).abs() < 1e-12);
        let curve_csv = std::fs::read_to_string(dir.path().join("curve.csv")).unwrap();
        assert_eq!(curve_csv.lines().count(), 1 + CURVE_POINTS);
        let boxes_txt = std::fs::read_to_string(dir.path().join("results/synth-21.txt")).unwrap();
        assert_eq!(boxes_txt.lines().count(), 3);
        assert!(summary["success_at_0.5"].as_f64().is_some());

        // Macro scores are the plain means of the per-sequence scores.
        let hand_auc = (two.sequences[0].auc + two.sequences[1].auc) / 2.0;
        assert!((two.auc - hand_auc).abs() < 1e-12);

        // Overlay images: one per frame, boxes burned in.
        let seq = &seqs[0];
        let overlay_dir = dir.path().join("overlay").join(&seq.name);
        let n = write_overlays(seq, &two.sequences[0].boxes, &overlay_dir).unwrap();
        assert_eq!(n, seq.len());
        assert_eq!(std::fs::read_dir(&overlay_dir).unwrap().count(), seq.len());
    }

    #[test]
    fn evaluating_nothing_is_an_error() {
        let err = run_ope(&[], model(), &TrackerConfig::default(), Some(1), None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn worker_count_resolution_prefers_explicit_request() {
        assert_eq!(worker_count(Some(3)), 3);
        assert!(worker_count(None) >= 1);
    }
}
