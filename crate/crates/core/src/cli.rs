//! Command-line front end. [`run`] never exits the process; the binary maps
//! its return value to the exit status.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::analysis::{ablation_ladder, analyze_config, ladder_strictly_increasing, ladder_text};
use crate::autodiff::DEFAULT_EPSILON;
use crate::decoder::argmax_labels;
use crate::error::{Error, Result};
use crate::io;
use crate::model::{LeMoReModel, ModelConfig};
use crate::tensor::interpolate_bilinear;
use crate::training::{run_training, synthetic_dataset, TrainConfig, TrainState};
use crate::verify::{worst_over_seeds, GRADCHECK_TOLERANCE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "lemore",
    version,
    about = "Lightweight semantic segmentation toolkit"
)]
pub struct Cli {
    /// Worker threads for kernel parallelism (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Model configuration JSON (analyze and ablate default to the full topology, train and infer to the toy one).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `dotted.key=value` override applied after loading, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parameter and compute report.
    Analyze {
        #[command(flatten)]
        model: ModelArgs,
        /// Probe resolution `HxW`; the model is rebuilt at this size.
        #[arg(long)]
        resolution: Option<String>,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Train on the synthetic shape dataset.
    Train {
        #[command(flatten)]
        model: ModelArgs,
        /// Training configuration JSON (toy preset when omitted).
        #[arg(long)]
        train_config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Where to write the trained weights.
        #[arg(long)]
        weights_out: PathBuf,
        /// JSON-lines metrics log.
        #[arg(long)]
        metrics: PathBuf,
    },
    /// Segment a PPM image.
    Infer {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Input image (binary PPM).
        #[arg(long)]
        input: PathBuf,
        /// Label map output (binary PGM).
        #[arg(long)]
        output: PathBuf,
        /// Colourized label map output (binary PPM).
        #[arg(long)]
        palette: Option<PathBuf>,
    },
    /// Finite-difference check of every op and composite block.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of consecutive seeds starting at `--seed`.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long, default_value_t = DEFAULT_EPSILON)]
        epsilon: f64,
    },
    /// Parameter and MAC ladder over the ablation toggles.
    Ablate {
        #[command(flatten)]
        model: ModelArgs,
    },
}

/// Outcome of a command other than success.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Failed(Error),
    Verification(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Failed(e)
    }
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Failed(_) => EXIT_IO,
            Failure::Verification(_) => EXIT_VERIFY,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Failed(e) => write!(f, "{e}"),
            Failure::Verification(m) => write!(f, "verification failed: {m}"),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn parse_resolution(text: &str) -> std::result::Result<(usize, usize), Failure> {
    let bad = || Failure::Usage(format!("resolution `{text}` is not HxW"));
    let (h, w) = text.split_once(['x', 'X']).ok_or_else(bad)?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    if h == 0 || w == 0 {
        return Err(bad());
    }
    Ok((h, w))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

fn load_model_config(
    args: &ModelArgs,
    fallback: ModelConfig,
) -> std::result::Result<ModelConfig, Failure> {
    let mut config = match &args.config {
        Some(p) => ModelConfig::from_json(&read_text(p)?)?,
        None => fallback,
    };
    for o in &args.overrides {
        config
            .apply_override(o)
            .map_err(|e| Failure::Usage(format!("--set {o}: {e}")))?;
    }
    Ok(config)
}

fn analyze(
    out: &mut dyn Write,
    model: &ModelArgs,
    resolution: Option<&str>,
    json: Option<&Path>,
) -> CmdResult {
    if resolution.is_some()
        && model
            .overrides
            .iter()
            .any(|o| o.trim_start().starts_with("input_size"))
    {
        return Err(Failure::Usage(
            "--resolution conflicts with --set input_size".into(),
        ));
    }
    let resolution = resolution.map(parse_resolution).transpose()?;
    let config = load_model_config(model, ModelConfig::default())?;
    let res = resolution.unwrap_or(config.input_size);
    let report = analyze_config(&config, res)?;
    write!(out, "{}", report.to_text()).map_err(Error::from)?;
    if let Some(p) = json {
        std::fs::write(p, report.to_json() + "\n").map_err(Error::from)?;
    }
    Ok(())
}

struct TrainOptions<'a> {
    train_config: Option<&'a Path>,
    steps: Option<usize>,
    lr: Option<f64>,
    batch_size: Option<usize>,
    weights_out: &'a Path,
    metrics: &'a Path,
}

fn train(out: &mut dyn Write, model: &ModelArgs, opts: TrainOptions<'_>) -> CmdResult {
    let config = load_model_config(model, ModelConfig::toy())?;
    let mut tc = match opts.train_config {
        Some(p) => TrainConfig::from_json(&read_text(p)?)?,
        None => TrainConfig::toy(),
    };
    if let Some(s) = opts.steps {
        tc.sgd.max_steps = s;
    }
    if let Some(lr) = opts.lr {
        tc.sgd.base_lr = lr;
    }
    if let Some(b) = opts.batch_size {
        tc.batch_size = b;
    }
    tc.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let (h, w) = config.input_size;
    if h != w {
        return Err(Failure::Usage(format!(
            "synthetic scenes are square, input_size is {h}x{w}"
        )));
    }
    let dataset = synthetic_dataset(tc.dataset_seed, tc.dataset_size, h)?;
    let mut state = TrainState::new(LeMoReModel::build(&config)?, tc.sgd);
    let mut log =
        std::io::BufWriter::new(std::fs::File::create(opts.metrics).map_err(Error::from)?);
    let summary = run_training(&mut state, &dataset, &tc, &mut log)?;
    log.flush().map_err(Error::from)?;
    io::save_weights(&state.model, opts.weights_out)?;
    writeln!(
        out,
        "steps {} final_loss {:.6} train_miou {:.6}",
        summary.steps, summary.final_loss, summary.final_miou
    )
    .map_err(Error::from)?;
    Ok(())
}

fn infer(
    model: &ModelArgs,
    weights: Option<&Path>,
    input: &Path,
    output: &Path,
    palette: Option<&Path>,
) -> CmdResult {
    let config = load_model_config(model, ModelConfig::toy())?;
    let mut net = LeMoReModel::build(&config)?;
    if let Some(w) = weights {
        io::load_weights(&mut net, w)?;
    }
    let image = io::read_ppm(input)?;
    let (_, h0, w0) = image.chw()?;
    let (h, w) = config.input_size;
    let resized = interpolate_bilinear(&image, h, w)?;
    let logits = interpolate_bilinear(&net.infer(&resized)?, h0, w0)?;
    let labels = argmax_labels(&logits)?;
    io::write_label_pgm(&labels, w0, h0, output)?;
    if let Some(p) = palette {
        io::write_palette_ppm(&labels, w0, h0, p)?;
    }
    Ok(())
}

fn gradcheck(out: &mut dyn Write, seed: u64, seeds: u64, epsilon: f64) -> CmdResult {
    if seeds == 0 {
        return Err(Failure::Usage("--seeds must be at least 1".into()));
    }
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Failure::Usage("--epsilon must be positive".into()));
    }
    let reports = worst_over_seeds(seed..seed + seeds, epsilon)?;
    let width = reports.iter().map(|r| r.name.len()).max().unwrap_or(4);
    let mut worst = 0.0f64;
    for r in &reports {
        writeln!(
            out,
            "{:<width$}  {:.3e}  ({} coordinates, {} skipped at kinks)",
            r.name, r.max_error, r.coordinates, r.kinks
        )
        .map_err(Error::from)?;
        worst = worst.max(r.max_error);
    }
    writeln!(
        out,
        "max error {worst:.3e} over seeds {seed}..{}",
        seed + seeds
    )
    .map_err(Error::from)?;
    if worst < GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(Failure::Verification(format!(
            "max error {worst:.3e} exceeds {GRADCHECK_TOLERANCE:e}"
        )))
    }
}

fn ablate(out: &mut dyn Write, model: &ModelArgs) -> CmdResult {
    let config = load_model_config(model, ModelConfig::default())?;
    let ladder = ablation_ladder(&config)?;
    write!(out, "{}", ladder_text(&ladder)).map_err(Error::from)?;
    if ladder_strictly_increasing(&ladder) {
        Ok(())
    } else {
        Err(Failure::Verification(
            "parameter ladder is not strictly increasing".into(),
        ))
    }
}

fn dispatch(cli: &Cli, out: &mut dyn Write) -> CmdResult {
    match &cli.command {
        Command::Analyze {
            model,
            resolution,
            json,
        } => analyze(out, model, resolution.as_deref(), json.as_deref()),
        Command::Train {
            model,
            train_config,
            steps,
            lr,
            batch_size,
            weights_out,
            metrics,
        } => train(
            out,
            model,
            TrainOptions {
                train_config: train_config.as_deref(),
                steps: *steps,
                lr: *lr,
                batch_size: *batch_size,
                weights_out,
                metrics,
            },
        ),
        Command::Infer {
            model,
            weights,
            input,
            output,
            palette,
        } => infer(model, weights.as_deref(), input, output, palette.as_deref()),
        Command::Gradcheck {
            seed,
            seeds,
            epsilon,
        } => gradcheck(out, *seed, *seeds, *epsilon),
        Command::Ablate { model } => ablate(out, model),
    }
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit status; diagnostics go to `err` as a single line.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return EXIT_OK;
            }
            let first = e.to_string();
            let line = first.lines().next().unwrap_or("invalid arguments");
            let _ = writeln!(err, "{}", line.trim_start_matches("error: ").trim());
            return EXIT_USAGE;
        }
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    match cli.threads {
        Some(0) => {
            let _ = writeln!(err, "usage error: --threads must be at least 1");
            return EXIT_USAGE;
        }
        Some(n) => builder = builder.num_threads(n),
        None => {}
    }
    let pool = match builder.build() {
        Ok(p) => p,
        Err(e) => {
            let _ = writeln!(err, "thread pool: {e}");
            return EXIT_IO;
        }
    };
    let (result, buffer) = pool.install(|| {
        let mut buffer = Vec::new();
        let r = dispatch(&cli, &mut buffer);
        (r, buffer)
    });
    let _ = out.write_all(&buffer);
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let msg = f.to_string().replace('\n', " ");
            let _ = writeln!(err, "error: {msg}");
            f.exit_code()
        }
    }
}
