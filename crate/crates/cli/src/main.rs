//! `rfl`: train the recurrent filter-learning tracker, track sequences,
//! run one-pass evaluations, generate synthetic datasets, and inspect
//! checkpoints.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 I/O or data
//! error, 3 numeric failure during optimization.

mod config;

use clap::{Args, Parser, Subcommand};
use config::ConfigMap;
use rfl_core::data::otb::{load_otb_root, load_otb_sequence};
use rfl_core::data::synth::{write_corpus, SynthSpec};
use rfl_core::evalbench::{run_ope, write_overlays};
use rfl_core::geometry::iou;
use rfl_core::model::VariantConfig;
use rfl_core::tracker::{track_sequence, write_track_results, TrackerConfig};
use rfl_core::training::{
    load_checkpoint, save_checkpoint, train, write_loss_csv, LossRow, TrainConfig, TrainState,
};
use rfl_core::{Error, Result};
use std::io::Write as _;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "rfl",
    version,
    about = "Recurrent filter-learning visual tracker"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model on a dataset of annotated sequences
    Train(TrainArgs),
    /// Track one sequence from its first annotation and write the boxes
    Track(TrackArgs),
    /// One-pass evaluation over a dataset; writes summary and curves
    Eval(EvalArgs),
    /// Generate a synthetic dataset in the ingestion layout
    Synth(SynthArgs),
    /// Print a checkpoint's variant, iteration, and tensor shapes
    Inspect(InspectArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root: one subdirectory per sequence (img/ + groundtruth_rect.txt)
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the checkpoint and loss log
    #[arg(long, default_value = "runs/train")]
    out: PathBuf,
    /// Key-value config file; command-line flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Resume from a checkpoint (restores parameters, optimizer, iteration;
    /// the model variant then comes from the checkpoint)
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Total training iterations [default: 10000]
    #[arg(long)]
    iters: Option<u64>,
    /// Clips per mini-batch [default: 10]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Frames per clip [default: 10]
    #[arg(long)]
    clip_len: Option<usize>,
    /// Initial learning rate [default: 1e-4]
    #[arg(long)]
    lr: Option<f64>,
    /// Learning-rate decay factor [default: 0.8]
    #[arg(long)]
    lr_decay: Option<f64>,
    /// Iterations between learning-rate decays [default: 5000]
    #[arg(long)]
    lr_decay_every: Option<u64>,
    /// Gradient magnitude limit [default: 10]
    #[arg(long)]
    grad_clip: Option<f64>,
    /// Clip gradients by joint L2 norm instead of per element
    #[arg(long)]
    global_norm_clip: bool,
    /// Reweight the loss so positive and negative cells contribute equally
    #[arg(long)]
    balanced_loss: bool,
    /// Disable photometric and geometric augmentation
    #[arg(long)]
    no_augment: bool,
    /// Master seed for initialization and clip sampling [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Share one backbone between exemplar and search branches
    #[arg(long)]
    shared_backbone: bool,
    /// Start the memory from zeros instead of the learned init net
    #[arg(long)]
    zero_init: bool,
    /// Gate convolution kernel size, 3 or 1 [default: 3]
    #[arg(long)]
    gate_kernel: Option<usize>,
    /// Iterations between checkpoint saves; 0 saves only at the end [default: 500]
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Iterations between progress lines [default: 10]
    #[arg(long)]
    log_every: Option<u64>,
}

#[derive(Args)]
struct TrackerFlags {
    /// Scale pyramid step [default: 1.03]
    #[arg(long)]
    scale_step: Option<f64>,
    /// Peak penalty for off-center pyramid levels [default: 0.97]
    #[arg(long)]
    scale_penalty: Option<f64>,
    /// Scale update damping [default: 0.6]
    #[arg(long)]
    scale_damping: Option<f64>,
    /// Memory state damping [default: 0.06]
    #[arg(long)]
    state_damping: Option<f64>,
    /// Center-prior window blend weight [default: 0.11]
    #[arg(long)]
    window_weight: Option<f64>,
    /// Response cells averaged into the position readout [default: 5]
    #[arg(long)]
    top_k: Option<usize>,
    /// Response upsampling factor [default: 16]
    #[arg(long)]
    upsample: Option<usize>,
}

fn tracker_config(f: &TrackerFlags, file: &mut ConfigMap) -> Result<TrackerConfig> {
    let d = TrackerConfig::default();
    let cfg = TrackerConfig {
        scale_step: file.resolve(f.scale_step, "scale_step", d.scale_step)?,
        scale_penalty: file.resolve(f.scale_penalty, "scale_penalty", d.scale_penalty)?,
        scale_damping: file.resolve(f.scale_damping, "scale_damping", d.scale_damping)?,
        state_damping: file.resolve(f.state_damping, "state_damping", d.state_damping)?,
        window_weight: file.resolve(f.window_weight, "window_weight", d.window_weight)?,
        top_k: file.resolve(f.top_k, "top_k", d.top_k)?,
        upsample: file.resolve(f.upsample, "upsample", d.upsample)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Args)]
struct TrackArgs {
    /// Sequence directory (img/ + groundtruth_rect.txt)
    #[arg(long)]
    seq: PathBuf,
    /// Checkpoint file
    #[arg(long)]
    ckpt: PathBuf,
    /// Results file; defaults to <sequence-name>.txt in the working directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Key-value config file; command-line flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    tracker: TrackerFlags,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset root: one subdirectory per sequence
    #[arg(long)]
    dataset: PathBuf,
    /// Checkpoint file
    #[arg(long)]
    ckpt: PathBuf,
    /// Report directory (results/, summary.json, curve.csv)
    #[arg(long, default_value = "eval-out")]
    out: PathBuf,
    /// Parallel tracking threads; defaults to RFL_NUM_WORKERS or the
    /// machine's available parallelism
    #[arg(long)]
    workers: Option<usize>,
    /// Also write per-frame overlay images of predicted vs annotated boxes
    #[arg(long)]
    overlays: bool,
    /// Key-value config file; command-line flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    tracker: TrackerFlags,
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset root
    #[arg(long)]
    out: PathBuf,
    /// Number of sequences to generate
    #[arg(long)]
    n: usize,
    /// Master seed; each sequence derives its own stream from it
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Frames per sequence
    #[arg(long, default_value_t = 40)]
    length: usize,
    /// Frame width in pixels
    #[arg(long, default_value_t = 320)]
    width: usize,
    /// Frame height in pixels
    #[arg(long, default_value_t = 240)]
    height: usize,
    /// Nominal target side in pixels
    #[arg(long, default_value_t = 56.0)]
    target_size: f64,
    /// Aspect-ratio jitter of the target
    #[arg(long, default_value_t = 0.15)]
    aspect_jitter: f64,
    /// Target speed in pixels per frame
    #[arg(long, default_value_t = 3.0)]
    speed: f64,
    /// Relative size oscillation amplitude
    #[arg(long, default_value_t = 0.0)]
    size_drift: f64,
    /// Number of background distractor shapes
    #[arg(long, default_value_t = 10)]
    clutter: usize,
    /// Checker cells across the target texture
    #[arg(long, default_value_t = 4)]
    texture_cells: usize,
    /// Slowly rotate the target's hue over time
    #[arg(long)]
    recolor: bool,
}

#[derive(Args)]
struct InspectArgs {
    /// Checkpoint file
    #[arg(long)]
    ckpt: PathBuf,
}

fn load_config(path: &Option<PathBuf>) -> Result<ConfigMap> {
    match path {
        Some(p) => ConfigMap::load(p),
        None => Ok(ConfigMap::default()),
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut file = load_config(&a.config)?;
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        batch_size: file.resolve(a.batch_size, "batch_size", d.batch_size)?,
        clip_len: file.resolve(a.clip_len, "clip_len", d.clip_len)?,
        lr0: file.resolve(a.lr, "lr", d.lr0)?,
        lr_decay: file.resolve(a.lr_decay, "lr_decay", d.lr_decay)?,
        lr_decay_every: file.resolve(a.lr_decay_every, "lr_decay_every", d.lr_decay_every)?,
        grad_clip: file.resolve(a.grad_clip, "grad_clip", d.grad_clip)?,
        global_norm_clip: file.resolve_flag(a.global_norm_clip, "global_norm_clip")?,
        balanced_loss: file.resolve_flag(a.balanced_loss, "balanced_loss")?,
        total_iters: file.resolve(a.iters, "iters", d.total_iters)?,
        seed: file.resolve(a.seed, "seed", d.seed)?,
        variant: VariantConfig {
            shared_backbone: file.resolve_flag(a.shared_backbone, "shared_backbone")?,
            zero_init: file.resolve_flag(a.zero_init, "zero_init")?,
            gate_kernel: file.resolve(a.gate_kernel, "gate_kernel", d.variant.gate_kernel)?,
        },
        augment: !file.resolve_flag(a.no_augment, "no_augment")?,
        ..d
    };
    let checkpoint_every = file.resolve(a.checkpoint_every, "checkpoint_every", 500u64)?;
    let log_every = file.resolve(a.log_every, "log_every", 10u64)?.max(1);
    file.finish()?;

    let sequences = load_otb_root(&a.data)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(a.out.display().to_string(), e))?;
    let ckpt_path = a.out.join("checkpoint.rfl");
    let loss_path = a.out.join("loss.csv");

    let mut state = match &a.resume {
        Some(p) => {
            let loaded = load_checkpoint::<f32>(p)?;
            println!("resuming {} at iteration {}", p.display(), loaded.iter);
            TrainState::from_checkpoint(loaded)
        }
        None => TrainState::new(&cfg),
    };
    let v = &state.model.variant;
    println!(
        "training on {} sequences: batch {} x clip {}, {} iterations, seed {}, \
         shared backbone {}, zero-init memory {}, gate kernel {}",
        sequences.len(),
        cfg.batch_size,
        cfg.clip_len,
        cfg.total_iters,
        cfg.seed,
        v.shared_backbone,
        v.zero_init,
        v.gate_kernel
    );

    let mut rows: Vec<LossRow> = Vec::new();
    let outcome = train(&mut state, &cfg, &sequences, |st, row| {
        rows.push(row);
        if row.iter % log_every == 0 || row.iter + 1 == cfg.total_iters {
            println!(
                "iter {:>6}  loss {:.6}  lr {:.3e}",
                row.iter, row.loss, row.lr
            );
            std::io::stdout().flush().ok();
        }
        if checkpoint_every > 0 && (row.iter + 1) % checkpoint_every == 0 {
            save_checkpoint(&ckpt_path, &st.model, Some(&st.adam), st.iter)?;
            write_loss_csv(&loss_path, &rows)?;
        }
        Ok(())
    });
    outcome?;

    save_checkpoint(&ckpt_path, &state.model, Some(&state.adam), state.iter)?;
    write_loss_csv(&loss_path, &rows)?;
    println!(
        "saved {} at iteration {}; loss log {}",
        ckpt_path.display(),
        state.iter,
        loss_path.display()
    );
    Ok(())
}

fn cmd_track(a: TrackArgs) -> Result<()> {
    let mut file = load_config(&a.config)?;
    let cfg = tracker_config(&a.tracker, &mut file)?;
    file.finish()?;

    let seq = load_otb_sequence(&a.seq)?;
    let loaded = load_checkpoint::<f32>(&a.ckpt)?;
    let boxes = track_sequence(&seq, &loaded.model, &cfg)?;
    let out = a
        .out
        .unwrap_or_else(|| PathBuf::from(format!("{}.txt", seq.name)));
    write_track_results(&out, &boxes)?;
    println!(
        "{}: tracked {} frames -> {}",
        seq.name,
        boxes.len(),
        out.display()
    );

    let mut ious = Vec::new();
    for (p, g) in boxes.iter().zip(&seq.boxes) {
        if let Some(g) = g {
            ious.push(iou(p, g)?);
        }
    }
    if ious.len() > 1 {
        println!(
            "mean IoU over {} annotated frames: {:.4}",
            ious.len(),
            ious.iter().sum::<f64>() / ious.len() as f64
        );
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut file = load_config(&a.config)?;
    let cfg = tracker_config(&a.tracker, &mut file)?;
    let workers = file.resolve(a.workers, "workers", 0usize)?;
    file.finish()?;

    let sequences = load_otb_root(&a.dataset)?;
    let loaded = load_checkpoint::<f32>(&a.ckpt)?;
    let workers = if workers == 0 { None } else { Some(workers) };
    let report = run_ope(&sequences, &loaded.model, &cfg, workers, Some(&a.out))?;

    for s in &report.sequences {
        println!(
            "  {:<24} auc {:.4}  iou {:.4}  p@0.5 {:.4}  cle {:.1}px",
            s.name, s.auc, s.mean_iou, s.success_at_05, s.mean_cle
        );
    }
    println!("sequences: {}", report.sequences.len());
    println!("AUC: {:.4}", report.auc);
    println!("mean IoU: {:.4}", report.mean_iou);
    println!("P@0.5: {:.4}", report.success_at_05);
    println!("mean CLE: {:.2} px", report.mean_cle);
    println!("report written to {}", a.out.display());

    if a.overlays {
        for (seq, ev) in sequences.iter().zip(&report.sequences) {
            write_overlays(seq, &ev.boxes, &a.out.join("overlay").join(&seq.name))?;
        }
        println!("overlays under {}", a.out.join("overlay").display());
    }
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        seed: a.seed,
        length: a.length,
        width: a.width,
        height: a.height,
        target_size: a.target_size,
        aspect_jitter: a.aspect_jitter,
        speed: a.speed,
        size_drift: a.size_drift,
        clutter: a.clutter,
        texture_cells: a.texture_cells,
        recolor: a.recolor,
    };
    let dirs = write_corpus(&a.out, a.n, &spec)?;
    println!(
        "wrote {} sequences of {} frames under {}",
        dirs.len(),
        spec.length,
        a.out.display()
    );
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> Result<()> {
    let loaded = load_checkpoint::<f32>(&a.ckpt)?;
    let m = &loaded.model;
    println!("checkpoint {}", a.ckpt.display());
    println!("  iteration: {}", loaded.iter);
    println!(
        "  optimizer state: {}",
        if loaded.adam.is_some() {
            "present"
        } else {
            "absent"
        }
    );
    let v = &m.variant;
    println!(
        "  shared backbone: {}   zero-init memory: {}   gate kernel: {}",
        v.shared_backbone, v.zero_init, v.gate_kernel
    );
    let mut total = 0usize;
    m.visit_all(|name, t| {
        println!(
            "  {:<28} {:>20}  {:>9}",
            name,
            format!("{:?}", t.dims()),
            t.numel()
        );
        total += t.numel();
    });
    let trainable: usize = m
        .trainable_dims()
        .iter()
        .map(|dims| dims.iter().product::<usize>())
        .sum();
    println!("trainable parameters: {trainable}");
    println!("total stored values: {total}");
    Ok(())
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // --help and --version land here and must keep exit code 0.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let outcome = match cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Track(a) => cmd_track(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Inspect(a) => cmd_inspect(a),
    };
    if let Err(e) = outcome {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
