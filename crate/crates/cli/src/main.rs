//! `retcomplete`: build a palette, train, complete, upsample and benchmark.
//!
//! Exit status is 0 on success, 1 on runtime failure and 2 on bad usage.
//! Failures print one line, `error[<kind>]: <message>`, to stderr.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};

use retcomplete_core::bench::{emit_report, run_bench};
use retcomplete_core::image::{load_image, load_mask, save_image};
use retcomplete_core::inferencer::{complete, complete_simultaneous};
use retcomplete_core::palette::{collect_pixels, fit_kmeans};
use retcomplete_core::sequencer::{downsample, gen_mask, to_sequence};
use retcomplete_core::trainer::{load_model, stored_palette, train_loop, TrainOutputs};
use retcomplete_core::upsampler::{bilinear_upscale, toy_samples, train_upsampler, UpsampleSample};
use retcomplete_core::{
    BenchConfig, BiRetNet, Checkpoint, Error, ImageTensor, MaskKind, MaskSpec, ModelConfig, Palette,
    PipelineConfig, SamplingPolicy, Trainer, UpsamplerParams,
};

#[derive(Parser)]
#[command(name = "retcomplete", version, about = "Pluralistic image completion with bidirectional retention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a K-means color palette to a directory of images.
    BuildPalette(BuildPalette),
    /// Train the completion model (and optionally the upsampler).
    Train(Train),
    /// Fill the masked pixels of a low-resolution image.
    Complete(Complete),
    /// Refine a completed low-resolution image to full resolution.
    Upsample(Upsample),
    /// Time recurrent decoding against per-step recomputation.
    Bench(Bench),
}

#[derive(Args)]
struct BuildPalette {
    /// Directory of PNG/PPM/PGM images.
    #[arg(long)]
    corpus: PathBuf,
    /// Number of colors.
    #[arg(long)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
    /// Area-downsample each image to this side first.
    #[arg(long)]
    side: Option<usize>,
    #[arg(long, default_value_t = 50)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Train {
    /// `key = value` pipeline configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of training images.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    palette: PathBuf,
    /// Receives metrics.csv, model.rckpt and periodic checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Also train the upsampler on the full-resolution images.
    #[arg(long)]
    upsampler: bool,
}

#[derive(Args)]
struct Complete {
    #[arg(long)]
    ckpt: PathBuf,
    /// Image to complete; downsampled to the model's side.
    #[arg(long)]
    image: PathBuf,
    /// Mask image, white = missing. Without it one is generated from --mask-kind.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long, default_value = "center")]
    mask_kind: MaskKind,
    #[arg(long, default_value_t = 0.5)]
    mask_ratio: f64,
    /// `top1` or `topk:K:T`.
    #[arg(long, default_value = "top1")]
    policy: SamplingPolicy,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Completed low-resolution image (.png, .ppm).
    #[arg(long)]
    out: PathBuf,
    /// Per-pixel normalized entropy map (.pgm, .png).
    #[arg(long)]
    entropy: Option<PathBuf>,
    /// Writes the low-resolution mask actually used.
    #[arg(long)]
    mask_out: Option<PathBuf>,
    /// Predict all masked pixels at once instead of one by one.
    #[arg(long)]
    simultaneous: bool,
}

#[derive(Args)]
struct Upsample {
    /// Upsampler checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Completed low-resolution image.
    #[arg(long)]
    low: PathBuf,
    /// Original full-resolution image.
    #[arg(long)]
    orig: PathBuf,
    /// Full-resolution mask, white = missing.
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Bench {
    /// Model checkpoint; without it a randomly initialized --preset model is timed.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Overrides the model's side.
    #[arg(long)]
    side: Option<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.25,0.5,0.75")]
    ratios: Vec<f64>,
    #[arg(long, default_value_t = 9)]
    reps: usize,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    /// Baseline steps timed per repetition.
    #[arg(long, default_value_t = 12)]
    baseline_steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn image_files(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("cannot list {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm" | "pgm"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no PNG/PPM/PGM images in {}", dir.display());
    }
    Ok(files)
}

fn load_all(dir: &Path) -> anyhow::Result<Vec<ImageTensor>> {
    image_files(dir)?
        .iter()
        .map(|p| load_image(p).map_err(Into::into))
        .collect()
}

fn build_palette(a: BuildPalette) -> anyhow::Result<()> {
    let mut images = load_all(&a.corpus)?;
    if let Some(side) = a.side {
        images = images.iter().map(|i| downsample(i, side)).collect::<Result<_, _>>()?;
    }
    let fit = fit_kmeans(&collect_pixels(&images)?, a.k, a.iters, a.seed)?;
    fit.palette.save(&a.out)?;
    println!(
        "palette k={} inertia={:.6} converged={} sha256={}",
        fit.palette.k(),
        fit.inertia.last().copied().unwrap_or(0.0),
        fit.converged,
        fit.palette.hash()
    );
    Ok(())
}

fn train(a: Train) -> anyhow::Result<()> {
    let mut cfg = match &a.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    let palette = Palette::load(&a.palette)?;
    if palette.k() != cfg.model.k {
        return Err(Error::Config(format!(
            "palette has {} colors but model.k = {}",
            palette.k(),
            cfg.model.k
        ))
        .into());
    }
    let images = load_all(&a.data)?;
    let side = cfg.model.side;
    let grids = images
        .iter()
        .map(|img| palette.quantize(&downsample(img, side)?))
        .collect::<Result<Vec<_>, _>>()?;
    let mut trainer = Trainer::new(cfg.model, cfg.train.clone())?;
    let out = TrainOutputs { dir: a.out.clone() };
    let log = train_loop(&mut trainer, &grids, Some(&palette), Some(&out))?;
    if let Some(m) = log.last() {
        println!("step {} loss {:.4} acc {:.3}", m.step, m.loss, m.acc);
    }
    if a.upsampler {
        cfg.upsampler.validate()?;
        // stage-one output stand-in: the quantized low-resolution image
        let mut samples: Vec<UpsampleSample> = toy_samples(&images, side)?;
        for s in &mut samples {
            s.low = palette.dequantize(&palette.quantize(&s.low)?)?;
        }
        let mut net = UpsamplerParams::new(cfg.upsampler, cfg.train.seed)?;
        let log = train_upsampler(&mut net, &samples, &cfg.train)?;
        let path = a.out.join("upsampler.rckpt");
        net.to_checkpoint(cfg.train.steps, cfg.train.seed).save(&path)?;
        if let Some(m) = log.last() {
            println!("upsampler step {} l1 {:.4}", m.step, m.loss);
        }
    }
    Ok(())
}

fn run_complete(a: Complete) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let model = load_model(&ckpt)?;
    let palette = stored_palette(&ckpt)?.ok_or_else(|| anyhow!("{} stores no palette", a.ckpt.display()))?;
    let side = model.config().side;
    let img = load_image(&a.image)?;
    let low = downsample(&img, side)?;
    let mask = match &a.mask {
        Some(p) => {
            let m = load_mask(p)?;
            if m.height() == side && m.width() == side {
                m
            } else {
                m.shrink_any(side)?
            }
        }
        None => gen_mask(
            &MaskSpec::new(a.mask_kind, a.mask_ratio, a.seed),
            side,
        )?,
    };
    let seq = to_sequence(&low, &palette, &mask)?;
    let done = if a.simultaneous {
        complete_simultaneous(&model, &seq, a.policy, a.seed)?
    } else {
        complete(&model, &seq, a.policy, a.seed)?
    };
    save_image(&palette.dequantize(&done.grid)?, &a.out)?;
    if let Some(p) = &a.entropy {
        save_image(&done.entropy_map(palette.k()), p)?;
    }
    if let Some(p) = &a.mask_out {
        save_image(&mask.to_image(), p)?;
    }
    println!("completed {} of {} pixels", done.steps.len(), seq.len());
    Ok(())
}

fn upsample(a: Upsample) -> anyhow::Result<()> {
    let net = UpsamplerParams::from_checkpoint(&Checkpoint::load(&a.ckpt)?)?;
    let orig = load_image(&a.orig)?;
    let mask = load_mask(&a.mask)?;
    let up = bilinear_upscale(&load_image(&a.low)?, orig.height(), orig.width())?;
    save_image(&net.refine(&up, &orig, &mask)?, &a.out)?;
    Ok(())
}

fn bench(a: Bench) -> anyhow::Result<()> {
    let mut model = match &a.ckpt {
        Some(p) => load_model(&Checkpoint::load(p)?)?,
        None => BiRetNet::new(ModelConfig::preset(&a.preset)?, a.seed)?,
    };
    if let Some(side) = a.side {
        let cfg = ModelConfig { side, ..*model.config() };
        let mut resized = BiRetNet::new(cfg, a.seed)?;
        if a.ckpt.is_some() {
            // only the positional table depends on the side
            let src = model.params();
            for id in src.ids() {
                let name = src.name(id);
                let dst = resized.params().find(name).expect("same architecture");
                if resized.params().get(dst).shape() == src.get(id).shape() {
                    *resized.params_mut().get_mut(dst) = src.get(id).clone();
                }
            }
        }
        model = resized;
    }
    let cfg = BenchConfig {
        ratios: a.ratios,
        reps: a.reps,
        warmup: a.warmup,
        baseline_steps: a.baseline_steps,
        seed: a.seed,
    };
    let run = run_bench(&model, &cfg)?;
    let paths = emit_report(&run, &a.out)?;
    for r in &run.rows {
        println!("{:<9} ratio {:<5} median {:.4} ms/pixel", r.method, r.mask_ratio, r.median_ms);
    }
    println!("wrote {}", paths.csv.display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::BuildPalette(a) => build_palette(a),
        Command::Train(a) => train(a),
        Command::Complete(a) => run_complete(a),
        Command::Upsample(a) => upsample(a),
        Command::Bench(a) => bench(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let core = e.chain().find_map(|c| c.downcast_ref::<Error>());
            let kind = core.map_or("runtime", Error::kind);
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error[{kind}]: {msg}");
            ExitCode::from(if matches!(core, Some(Error::Usage(_))) { 2 } else { 1 })
        }
    }
}
