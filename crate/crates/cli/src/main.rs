use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use julkit::config::RunConfig;
use julkit::diffcore::{inject_backward_fault, Graph, Tensor};
use julkit::histmatch::{bin_centers, soft_histogram, HistogramSpec, Spacing};
use julkit::imageio::{rescale_unit, write_pgm, write_ppm};
use julkit::synthdata::{mask_lower_half, Dataset, Sequence};
use julkit::trainer::checkpoint;
use julkit::trainer::eval::{frame_output, EvalSet};
use julkit::trainer::{eval_seed, evaluate, run, Event, Metrics, ModelBundle};
use julkit::{gradsuite, Error};

/// Number of sample triplets written after training.
const SAMPLE_COUNT: usize = 8;

#[derive(Parser)]
#[command(name = "julkit", version, about = "Joint uncertainty learning toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compare every backward rule and composite loss against finite differences.
    Gradcheck(GradcheckArgs),
    /// Train a model and write checkpoint, metrics and sample images.
    Train(TrainArgs),
    /// Evaluate a checkpoint and print one metrics CSV row.
    Eval(EvalArgs),
    /// Print the soft histogram of a set of values as CSV.
    HistDemo(HistDemoArgs),
    /// Render the synthetic dataset to a directory.
    Dataset(DatasetArgs),
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corrupt the backward rule of the named op (verification fixture).
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long = "enable_un1")]
    enable_un1: Option<bool>,
    #[arg(long = "enable_un2")]
    enable_un2: Option<bool>,
    #[arg(long = "enable_pe")]
    enable_pe: Option<bool>,
    #[arg(long = "enable_sync")]
    enable_sync: Option<bool>,
    #[arg(long = "enable_adversarial")]
    enable_adversarial: Option<bool>,
    #[arg(long = "enable_error_head")]
    enable_error_head: Option<bool>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
}

#[derive(Args)]
struct EvalArgs {
    checkpoint: PathBuf,
    /// Run configuration; defaults to `config.json` next to the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Regenerate the dataset from this seed instead of the configured one.
    #[arg(long)]
    dataset_seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    split: Split,
}

#[derive(Clone, Copy, ValueEnum)]
enum SpacingArg {
    Linear,
    Log,
}

#[derive(Args)]
struct HistDemoArgs {
    /// Whitespace or comma separated values; omit for a synthetic Laplacian sample.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = 11)]
    bins: usize,
    #[arg(long, default_value_t = 3.0)]
    alpha: f64,
    #[arg(long, value_enum, default_value_t = SpacingArg::Linear)]
    spacing: SpacingArg,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 0.2)]
    loc: f64,
    #[arg(long, default_value_t = 0.05)]
    scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DatasetArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

/// Failures mapped onto the process exit-code contract.
enum Failure {
    Verification(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(e.into())
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::HistDemo(a) => cmd_hist_demo(a),
        Command::Dataset(a) => cmd_dataset(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            match e {
                Error::Numerics { .. } => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn threads() -> usize {
    std::env::var("JULKIT_THREADS").ok().and_then(|v| v.parse().ok()).filter(|&n| n > 0).unwrap_or(1)
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Error> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn cmd_gradcheck(args: GradcheckArgs) -> CmdResult {
    inject_backward_fault(args.inject_fault.as_deref());
    let results = gradsuite::run_suite(args.seed);
    inject_backward_fault(None);
    let results = results?;
    println!("op,error,threshold,pass");
    for r in &results {
        println!("{},{:e},{:e},{}", r.op, r.error, r.threshold, r.passed());
    }
    let failed: Vec<String> =
        results.iter().filter(|r| !r.passed()).map(|r| format!("{} ({:e})", r.op, r.error)).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verification(format!("gradient mismatch in {}", failed.join(", "))))
    }
}

fn apply_overrides(cfg: &mut RunConfig, a: &TrainArgs) {
    let t = &mut cfg.train;
    if let Some(s) = a.seed {
        t.seed = s;
    }
    if let Some(s) = a.steps {
        t.steps = s;
    }
    if let Some(b) = a.bins {
        t.hist.bin_count = b;
    }
    if let Some(s) = a.data_seed {
        cfg.data.seed = s;
    }
    let flags = [
        (a.enable_un1, &mut t.enable_un1),
        (a.enable_un2, &mut t.enable_un2),
        (a.enable_pe, &mut t.enable_pe),
        (a.enable_sync, &mut t.enable_sync),
        (a.enable_adversarial, &mut t.enable_adversarial),
        (a.enable_error_head, &mut t.enable_error_head),
    ];
    for (value, field) in flags {
        if let Some(v) = value {
            *field = v;
        }
    }
    if let Some(o) = &a.out {
        cfg.out_dir = o.clone();
    }
}

fn cmd_train(args: TrainArgs) -> CmdResult {
    let mut cfg = load_config(args.config.as_deref())?;
    apply_overrides(&mut cfg, &args);
    cfg.validate()?;
    let out = cfg.out_dir.clone();
    fs::create_dir_all(out.join("samples"))?;
    fs::write(out.join("config.json"), cfg.to_json())?;
    let data = Dataset::generate(&cfg.data)?;

    let mut csv = File::create(out.join("metrics.csv"))?;
    writeln!(csv, "{}", Metrics::CSV_HEADER)?;
    let start = Instant::now();
    let mut io_error = None;
    let result = run(&cfg, &data, threads(), |event| match event {
        Event::SyncPretrained(r) => eprintln!(
            "sync pretrain: held-out accuracy {:.3} -> {:.3} (threshold {:.3}), aligned wins {:.3}, final loss {:.4}",
            r.initial_accuracy, r.accuracy, r.threshold, r.aligned_wins, r.final_loss
        ),
        Event::Step(s) if s.step % 50 == 0 => {
            let parts: Vec<String> = s.parts.iter().map(|(k, v)| format!("{k} {v:.4}")).collect();
            eprintln!("step {:>5}  total {:.4}  {}  [{:.0?}]", s.step, s.total, parts.join("  "), start.elapsed());
        }
        Event::Step(_) => {}
        Event::Eval(m) => {
            eprintln!("eval  {m}");
            if let Err(e) = writeln!(csv, "{}", m.csv_row()).and_then(|_| csv.flush()) {
                io_error.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = io_error {
        return Err(e.into());
    }
    if let Some(r) = &result.sync {
        fs::write(
            out.join("sync.csv"),
            format!(
                "initial_accuracy,threshold,accuracy,aligned_wins,final_loss\n{:.8},{:.8},{:.8},{:.8},{:.8}\n",
                r.initial_accuracy, r.threshold, r.accuracy, r.aligned_wins, r.final_loss
            ),
        )?;
    }
    checkpoint::save(&out.join("checkpoint.julc"), &result.bundle, cfg.hash())?;
    write_samples(&out.join("samples"), &result.bundle, &data.test, cfg.data.seed)?;
    eprintln!("wrote {} in {:.1?}", out.display(), start.elapsed());
    Ok(())
}

/// Source, generated and truth images plus rescaled σ and ε maps for evenly spaced held-out frames.
fn write_samples(dir: &Path, bundle: &ModelBundle, test: &Sequence, data_seed: u64) -> Result<(), Error> {
    let set = EvalSet::new(test, eval_seed(data_seed))?;
    let n = set.samples.len();
    for k in 0..SAMPLE_COUNT.min(n) {
        let sample = &set.samples[k * n / SAMPLE_COUNT.min(n)];
        let o = frame_output(bundle, sample)?;
        let t = sample.frame_index;
        write_ppm(&dir.join(format!("{t:03}_source.ppm")), &mask_lower_half(&sample.truth))?;
        write_ppm(&dir.join(format!("{t:03}_generated.ppm")), &o.generated)?;
        write_ppm(&dir.join(format!("{t:03}_truth.ppm")), &sample.truth)?;
        write_pgm(&dir.join(format!("{t:03}_sigma.pgm")), &rescale_unit(&o.sigma))?;
        write_pgm(&dir.join(format!("{t:03}_error.pgm")), &rescale_unit(&o.error))?;
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> CmdResult {
    let config_path = match &args.config {
        Some(p) => p.clone(),
        None => args.checkpoint.parent().unwrap_or(Path::new(".")).join("config.json"),
    };
    let mut cfg = RunConfig::load(&config_path)?;
    let mut bundle = ModelBundle::new(cfg.train.seed);
    checkpoint::load_into(&args.checkpoint, &mut bundle, cfg.hash())?;
    if let Some(s) = args.dataset_seed {
        cfg.data.seed = s;
    }
    let data = Dataset::generate(&cfg.data)?;
    let seq = match args.split {
        Split::Test => data.test,
        Split::Train => {
            let mut seq = data.train.into_iter().next().expect("at least one training identity");
            seq.frames.truncate(cfg.data.test_frames);
            seq.signal.truncate(cfg.data.test_frames);
            seq
        }
    };
    let set = EvalSet::new(&seq, eval_seed(cfg.data.seed))?;
    let tc = &cfg.train;
    let m = evaluate(tc.steps, &bundle, &set, &tc.hist, tc.uncertainty_enabled(), threads())?;
    println!("{}", Metrics::CSV_HEADER);
    println!("{}", m.csv_row());
    Ok(())
}

fn parse_values(text: &str) -> Result<Vec<f64>, Error> {
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| Error::Parse(format!("not a real: `{s}`"))))
        .collect()
}

/// Laplace(loc, scale) draws by inverting the CDF.
fn laplace_samples(n: usize, loc: f64, scale: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let u: f64 = rng.gen_range(-0.5..0.5);
            loc - scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
        })
        .collect()
}

fn cmd_hist_demo(args: HistDemoArgs) -> CmdResult {
    let values = match &args.input {
        Some(p) => parse_values(&fs::read_to_string(p)?)?,
        None => {
            if !(args.scale > 0.0) {
                return Err(Error::Config { path: "scale".into(), message: "must be positive".into() }.into());
            }
            laplace_samples(args.samples, args.loc, args.scale, args.seed)
        }
    };
    if values.is_empty() {
        return Err(Error::Parse("no values".into()).into());
    }
    let spacing = match args.spacing {
        SpacingArg::Linear => Spacing::Linear,
        SpacingArg::Log => Spacing::Logarithmic,
    };
    let spec = HistogramSpec { bin_count: args.bins, alpha_max: args.alpha, spacing, ..HistogramSpec::default() };
    spec.validate()?;
    let centers = bin_centers(&values, &spec)?;
    let g = Graph::new();
    let hist = soft_histogram(&g, g.constant(Tensor::from_vec(values)), &centers, &spec)?;
    let mass = g.value(hist.mass);
    println!("center,mass");
    for (c, m) in centers.data().iter().zip(mass.data()) {
        println!("{c:.8},{m:.8}");
    }
    let total: f64 = mass.data().iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Failure::Verification(format!("histogram mass sums to {total}")));
    }
    Ok(())
}

fn cmd_dataset(args: DatasetArgs) -> CmdResult {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.data.seed = s;
    }
    let data = Dataset::generate(&cfg.data)?;
    data.dump(&args.out)?;
    eprintln!(
        "wrote {} training identities and one held-out identity to {}",
        data.train.len(),
        args.out.display()
    );
    Ok(())
}
