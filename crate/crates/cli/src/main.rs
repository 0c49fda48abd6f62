//! `supw`: superpixels, synthetic data, training, evaluation, grid search,
//! and gradient verification behind one binary.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use supw_core::imaging::{load_image, save_image, save_labels_png};
use supw_core::metrics::{confusion, format_report, metrics_from, report_from_metrics, ImageMetrics};
use supw_core::segnet::{forward, tensor_from_image, Checkpoint, SegNetwork};
use supw_core::slic::{overlay, slic_run, SlicParams};
use supw_core::slic_loss::PredMask;
use supw_core::synthdata::{gen_dataset, source_preset, target_preset, Split};
use supw_core::train::{
    format_grid, gradient_suite, grid_search, list_samples, train_loop, TrainConfig,
};
use supw_core::imaging::rgb_to_lab;
use supw_core::numerics::Tensor;

#[derive(Parser)]
#[command(name = "supw", version, about = "Superpixel-consistency + selective-whitening segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Segment an image into SLIC superpixels
    Slic(SlicArgs),
    /// Generate a synthetic two-domain dataset
    Synth(SynthArgs),
    /// Train the segmentation network
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset
    Eval(EvalArgs),
    /// Run the hyperparameter grid search
    Grid(GridArgs),
    /// Verify analytic gradients against finite differences
    Gradcheck,
}

#[derive(Args)]
struct SlicArgs {
    /// Input image (PNG or PPM)
    #[arg(long)]
    image: PathBuf,
    /// Target superpixel count
    #[arg(long, default_value_t = 500)]
    k: usize,
    /// Compactness
    #[arg(long, default_value_t = 50.0)]
    m: f64,
    /// 16-bit label map output path
    #[arg(long)]
    labels_out: PathBuf,
    /// Boundary overlay output path
    #[arg(long)]
    overlay_out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Domain preset
    #[arg(long, value_parser = ["source", "target"])]
    domain: String,
    /// Number of samples (>= 10)
    #[arg(long)]
    n: usize,
    /// Square image size, multiple of 8
    #[arg(long, default_value_t = 128)]
    size: usize,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Clone)]
struct TrainOverrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Superpixel-consistency weight w in [0,1]
    #[arg(long)]
    w: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    m: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    /// Whitening loss weight
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    input_size: Option<usize>,
    /// Disable the superpixel-consistency loss
    #[arg(long)]
    no_slic: bool,
    /// Disable the whitening loss
    #[arg(long)]
    no_isw: bool,
    /// Shorthand for --no-slic --no-isw
    #[arg(long)]
    baseline: bool,
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut TrainConfig) {
        macro_rules! set {
            ($field:ident, $opt:expr) => {
                if let Some(v) = $opt {
                    cfg.$field = v;
                }
            };
        }
        set!(seed, self.seed);
        set!(epochs, self.epochs);
        set!(lr0, self.lr0);
        set!(batch_size, self.batch_size);
        set!(slic_weight, self.w);
        set!(slic_k, self.k);
        set!(slic_m, self.m);
        set!(tau, self.tau);
        set!(isw_lambda, self.lambda);
        set!(warmup_epochs, self.warmup);
        set!(input_size, self.input_size);
        if self.no_slic || self.baseline {
            cfg.use_slic_loss = false;
        }
        if self.no_isw || self.baseline {
            cfg.use_isw = false;
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Training config JSON (defaults used when omitted)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (images/ + masks/, optional manifest.json)
    #[arg(long)]
    data: PathBuf,
    /// Output directory (checkpoint, run log, config echo)
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint path
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory
    #[arg(long)]
    data: PathBuf,
    /// JSON report output path
    #[arg(long)]
    report: PathBuf,
    /// Manifest split to evaluate (test, val, train)
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
    split: String,
    /// Resize inputs to this size (must match training)
    #[arg(long, default_value_t = 128)]
    input_size: usize,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Source dataset directory (train + val splits)
    #[arg(long)]
    data: PathBuf,
    /// Target dataset directory (test split)
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: TrainOverrides,
}

/// Usage problems that clap's parser can't catch (value-range preconditions).
struct UsageError(String);

fn threads() -> usize {
    std::env::var("SUPW_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn load_config(path: &Option<PathBuf>, overrides: &TrainOverrides) -> anyhow::Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::from_json_file(p)
            .with_context(|| format!("reading config {}", p.display()))?,
        None => TrainConfig::default(),
    };
    overrides.apply(&mut cfg);
    Ok(cfg)
}

fn print_config(cfg: &TrainConfig) {
    println!(
        "resolved config: {}",
        serde_json::to_string(cfg).expect("config serializes")
    );
    println!("worker thread cap: {}", threads());
}

fn cmd_slic(args: &SlicArgs) -> anyhow::Result<()> {
    println!(
        "resolved config: slic k={} m={} image={} labels_out={} overlay_out={}",
        args.k,
        args.m,
        args.image.display(),
        args.labels_out.display(),
        args.overlay_out.display()
    );
    let image = load_image(&args.image)?;
    let grid = slic_run(&rgb_to_lab(&image), &SlicParams::new(args.k, args.m))?;
    save_labels_png(&grid.labels, grid.width, grid.height, &args.labels_out)?;
    save_image(&overlay(&image, &grid)?, &args.overlay_out)?;
    println!("regions: {}", grid.num_regions);
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> anyhow::Result<()> {
    let spec = match args.domain.as_str() {
        "source" => source_preset(),
        _ => target_preset(),
    };
    println!(
        "resolved config: synth domain={} n={} size={} seed={} out={}",
        spec.name,
        args.n,
        args.size,
        args.seed,
        args.out.display()
    );
    let manifest = gen_dataset(&spec, args.n, args.size, &args.out, args.seed)?;
    println!("wrote {} samples to {}", manifest.entries.len(), args.out.display());
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> anyhow::Result<()> {
    let cfg = load_config(&args.config, &args.overrides)?;
    print_config(&cfg);
    if !args.data.exists() {
        return Err(anyhow!("data directory {} does not exist", args.data.display()));
    }
    let (ck, log) = train_loop::<f32>(&cfg, &args.data, &args.data, &args.out)?;
    let last = log.records.last().expect("epochs >= 1");
    println!(
        "done: {} epochs, best val IoU {:.4} (epoch {}), final losses task={:.4} slic={:.4} isw={:.4}",
        log.records.len(),
        log.records.iter().map(|r| r.val_iou).fold(f64::NEG_INFINITY, f64::max),
        ck.meta.epoch,
        last.l_task,
        last.l_slic,
        last.l_isw
    );
    println!("checkpoint: {}", args.out.join("best.supw").display());
    Ok(())
}

fn parse_split(s: &str) -> Split {
    match s {
        "train" => Split::Train,
        "val" => Split::Val,
        _ => Split::Test,
    }
}

fn cmd_eval(args: &EvalArgs) -> anyhow::Result<()> {
    println!(
        "resolved config: eval ckpt={} data={} split={} input_size={} report={}",
        args.ckpt.display(),
        args.data.display(),
        args.split,
        args.input_size,
        args.report.display()
    );
    let net: SegNetwork<f32> = Checkpoint::load(&args.ckpt)?.to_network()?;
    let files = list_samples(&args.data, parse_split(&args.split))?;
    let mut per_image = Vec::with_capacity(files.len());
    for f in &files {
        let image = load_image(&f.image_path)?.resize(args.input_size, args.input_size);
        let mask = supw_core::imaging::load_mask(&f.mask_path)?
            .resize(args.input_size, args.input_size);
        let out = forward(&net, &tensor_from_image::<f32>(&image), false)?;
        let s = out.probs.shape().to_vec();
        let probs = Tensor::from_vec(&[s[2], s[3]], out.probs.data().to_vec())?;
        let c = confusion(&PredMask::new(probs)?, &mask, 0.5)?;
        per_image.push(ImageMetrics {
            file: f.file.clone(),
            metrics: metrics_from(c),
        });
    }
    let report = report_from_metrics(per_image)?;
    std::fs::write(&args.report, serde_json::to_string_pretty(&report)?)
        .with_context(|| format!("writing {}", args.report.display()))?;
    print!("{}", format_report(&report));
    Ok(())
}

fn cmd_grid(args: &GridArgs) -> anyhow::Result<()> {
    let cfg = load_config(&args.config, &args.overrides)?;
    print_config(&cfg);
    let table = grid_search::<f32>(&cfg, &args.data, &args.target, &args.out)?;
    print!("{}", format_grid(&table));
    Ok(())
}

fn cmd_gradcheck() -> anyhow::Result<()> {
    println!("resolved config: gradcheck h=1e-5 rel_tol=1e-3 (64-bit)");
    let reports = gradient_suite()?;
    let mut failures = 0;
    for (name, report) in &reports {
        println!(
            "{} {name}: max rel err {:.3e} ({} entries)",
            if report.passed { "PASS" } else { "FAIL" },
            report.max_rel_err,
            report.checked
        );
        if !report.passed {
            failures += 1;
        }
    }
    if failures > 0 {
        return Err(anyhow!("{failures} gradient check(s) failed"));
    }
    println!("all {} checks passed", reports.len());
    Ok(())
}

fn validate(cmd: &Cmd) -> Result<(), UsageError> {
    match cmd {
        Cmd::Slic(a) => {
            if a.k == 0 {
                return Err(UsageError("--k must be >= 1".into()));
            }
            if a.m <= 0.0 {
                return Err(UsageError("--m must be positive".into()));
            }
        }
        Cmd::Synth(a) => {
            if a.n < 10 {
                return Err(UsageError("--n must be >= 10".into()));
            }
            if a.size == 0 || a.size % 8 != 0 {
                return Err(UsageError("--size must be a positive multiple of 8".into()));
            }
        }
        Cmd::Eval(a) => {
            if a.input_size == 0 || a.input_size % 8 != 0 {
                return Err(UsageError("--input-size must be a positive multiple of 8".into()));
            }
        }
        _ => {}
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are successes, not usage errors
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(1),
            };
        }
    };
    if let Err(UsageError(msg)) = validate(&cli.command) {
        eprintln!("usage error: {msg}");
        return ExitCode::from(1);
    }
    let result = match &cli.command {
        Cmd::Slic(a) => cmd_slic(a),
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Grid(a) => cmd_grid(a),
        Cmd::Gradcheck => cmd_gradcheck(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
