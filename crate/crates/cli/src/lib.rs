//! Command-line front end: training, evaluation, benchmarks, gradient and
//! hash checks. [`run`] takes the full argument vector and returns the
//! process exit code: 0 on success, 1 on a runtime error or a failed check,
//! 2 on a usage error.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use pairconnect::bench::{
    bench_interleaved, bench_sweep, parity_table, sweep_csv, BenchConfig, ParityReport, SweepRow, PIN_ENV,
};
use pairconnect::hashing::estimate_collision_rate;
use pairconnect::model::{check_model_gradients, gradcheck_config, Model, ModelKind, PoolingMode};
use pairconnect::numerics::{Rng, Scalar, ABS_FLOOR};
use pairconnect::training::{evaluate, prepare_data, Checkpoint, MetricsLog, Split, TrainConfig, Trainer};
use pairconnect::{Error, Result};

/// Gradient checks pass when the maximum relative error is at most this.
pub const GRADCHECK_TOLERANCE: Scalar = 1e-6;

#[derive(Parser, Debug)]
#[command(
    name = "pairconnect",
    about = "Hashed pair-embedding sequence model: training, evaluation and benchmarks",
    arg_required_else_help = true,
    after_help = "Configuration: `--config FILE` reads `key = value` lines; `--set key=value` overrides \
                  single keys after the file. The benchmark pins itself to one CPU; set \
                  PAIRCONNECT_PIN_CPU to a CPU index to choose it or to `off` to disable pinning."
)]
pub struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one configuration key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and log per-step metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on its configured evaluation set.
    Eval(EvalArgs),
    /// Single-thread forward-pass throughput.
    Bench(BenchArgs),
    /// Throughput grid over sequence lengths and table sizes.
    Sweep(SweepArgs),
    /// Compare backward gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Train PairConnect at several table sizes and report test losses.
    AblateHash(AblateArgs),
    /// Estimate pair-hash collision rates.
    Collide(CollideArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Model kind (pairconnect or transformer).
    #[arg(long)]
    pub model: Option<ModelKind>,
    /// Train until this many optimizer steps have been taken in total.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Append metrics to this CSV file.
    #[arg(long, value_name = "FILE")]
    pub metrics: Option<PathBuf>,
    /// Write a checkpoint here when training ends.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Continue from a checkpoint; its configuration replaces `--config`.
    #[arg(long, value_name = "FILE")]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct TimingArgs {
    #[arg(long, default_value_t = 5)]
    pub warmup: usize,
    #[arg(long, default_value_t = 30)]
    pub iterations: usize,
    #[arg(long, default_value_t = 5)]
    pub repetitions: usize,
    /// Do not pin the benchmark thread.
    #[arg(long)]
    pub no_pin: bool,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Model kind; ignored with --compare or --checkpoint.
    #[arg(long)]
    pub model: Option<ModelKind>,
    /// Benchmark a trained checkpoint instead of a fresh model.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Benchmark PairConnect and the Transformer with interleaved repetitions.
    #[arg(long)]
    pub compare: bool,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[command(flatten)]
    pub timing: TimingArgs,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_value = "pairconnect,transformer")]
    pub models: Vec<ModelKind>,
    #[arg(long = "m", value_delimiter = ',', default_value = "32,64,128")]
    pub seq_lens: Vec<usize>,
    #[arg(long = "k", value_delimiter = ',', default_value = "100,1000,10000")]
    pub table_sizes: Vec<usize>,
    /// Write the CSV here as well as to stdout.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub timing: TimingArgs,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "pairconnect")]
    pub model: ModelKind,
    /// Scalar precision the binary must have been built with (f64 or f32).
    #[arg(long, default_value = "f64")]
    pub precision: String,
    /// Pooling mode for PairConnect; all three when omitted.
    #[arg(long)]
    pub pooling: Option<PoolingMode>,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Table sizes to train at.
    #[arg(long = "k", value_delimiter = ',', required = true)]
    pub table_sizes: Vec<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CollideArgs {
    #[arg(long = "k", default_value_t = 100)]
    pub table_size: usize,
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
    #[arg(long, default_value_t = 1_000_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli, out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn load_config(cli: &Cli) -> Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    apply_overrides(&mut cfg, &cli.overrides)?;
    Ok(cfg)
}

fn apply_overrides(cfg: &mut TrainConfig, overrides: &[String]) -> Result<()> {
    for kv in overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    Ok(())
}

fn execute(cli: &Cli, out: &mut dyn Write) -> Result<i32> {
    match &cli.command {
        Command::Train(a) => train(cli, a, out),
        Command::Eval(a) => eval(cli, a, out),
        Command::Bench(a) => bench(cli, a, out),
        Command::Sweep(a) => sweep(cli, a, out),
        Command::Gradcheck(a) => gradcheck(a, out),
        Command::AblateHash(a) => ablate(cli, a, out),
        Command::Collide(a) => collide(a, out),
    }
}

fn train(cli: &Cli, a: &TrainArgs, out: &mut dyn Write) -> Result<i32> {
    let (mut trainer, data) = match &a.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let data = prepare_data(&ck.config)?;
            (ck.to_trainer(&data)?, data)
        }
        None => {
            let mut cfg = load_config(cli)?;
            if let Some(m) = a.model {
                cfg.model.kind = m;
            }
            if let Some(lr) = a.lr {
                cfg.lr = lr;
            }
            let data = prepare_data(&cfg)?;
            if cfg.model.vocab_size != data.vocab_size {
                log::info!("vocab_size set to {} from the training data", data.vocab_size);
                cfg.model.vocab_size = data.vocab_size;
            }
            (Trainer::new(&cfg, &data)?, data)
        }
    };
    let target = a.steps.unwrap_or(trainer.cfg.steps) as u64;
    let mut log = MetricsLog::default();
    if target > trainer.step {
        trainer.train_steps(&data, (target - trainer.step) as usize, &mut log)?;
    }
    if let Some(path) = &a.metrics {
        log.append_to(path)?;
    }
    if let Some(path) = &a.checkpoint {
        Checkpoint::from_trainer(&trainer).save(path)?;
    }
    let train_loss = log.last_loss(Split::Train).map_or("n/a".into(), |l| format!("{l:.6}"));
    let eval_loss = log.last_loss(Split::Eval).map_or("n/a".into(), |l| format!("{l:.6}"));
    writeln!(
        out,
        "{} trained to step {}: last train loss {train_loss}, last eval loss {eval_loss}",
        trainer.cfg.model.kind, trainer.step
    )?;
    Ok(0)
}

fn eval(cli: &Cli, a: &EvalArgs, out: &mut dyn Write) -> Result<i32> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = ck.to_model()?;
    let mut cfg = ck.config.clone();
    apply_overrides(&mut cfg, &cli.overrides)?;
    if cfg.model != ck.config.model {
        return Err(Error::Config("eval may override data settings only, not the model".into()));
    }
    let data = prepare_data(&cfg)?;
    let m = evaluate(&model, &data.eval)?;
    writeln!(
        out,
        "eval loss {:.6}, masked-token accuracy {:.4} over {} masked tokens",
        m.loss, m.accuracy, m.masked
    )?;
    Ok(0)
}

fn bench_config(t: &TimingArgs, seq_len: usize) -> BenchConfig {
    BenchConfig {
        seq_len,
        warmup: t.warmup,
        iterations: t.iterations,
        repetitions: t.repetitions,
        pin_thread: !t.no_pin,
        ..BenchConfig::default()
    }
}

fn bench(cli: &Cli, a: &BenchArgs, out: &mut dyn Write) -> Result<i32> {
    let mut cfg = load_config(cli)?;
    cfg.model.dropout = 0.0;
    let models: Vec<Model> = if let Some(path) = &a.checkpoint {
        vec![Checkpoint::load(path)?.to_model()?]
    } else if a.compare {
        [ModelKind::PairConnect, ModelKind::Transformer]
            .into_iter()
            .map(|kind| Model::new(&pairconnect::model::ModelConfig { kind, ..cfg.model.clone() }))
            .collect::<Result<_>>()?
    } else {
        if let Some(kind) = a.model {
            cfg.model.kind = kind;
        }
        vec![Model::new(&cfg.model)?]
    };
    let bench = bench_config(&a.timing, a.seq_len.unwrap_or(cfg.model.seq_len));
    let refs: Vec<&Model> = models.iter().collect();
    let reports = bench_interleaved(&refs, &bench)?;
    for r in &reports {
        writeln!(out, "# {}", r.summary())?;
    }
    if reports.len() == 2 {
        writeln!(out, "# throughput ratio pairconnect/transformer: {:.4}", reports[0].median / reports[1].median)?;
    }
    let rows: Vec<SweepRow> = reports.iter().map(SweepRow::from_report).collect();
    write!(out, "{}", sweep_csv(&rows))?;
    let parity: Vec<ParityReport> = models.iter().map(ParityReport::of).collect();
    for line in parity_table(&parity).lines() {
        writeln!(out, "# {line}")?;
    }
    writeln!(out, "# pin override: {PIN_ENV}")?;
    Ok(0)
}

fn sweep(cli: &Cli, a: &SweepArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = load_config(cli)?;
    let bench = bench_config(&a.timing, cfg.model.seq_len);
    let rows = bench_sweep(&cfg.model, &a.models, &a.seq_lens, &a.table_sizes, &bench)?;
    let csv = sweep_csv(&rows);
    if let Some(path) = &a.out {
        std::fs::write(path, &csv)?;
    }
    write!(out, "{csv}")?;
    Ok(0)
}

fn gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    let built = if std::mem::size_of::<Scalar>() == 8 { "f64" } else { "f32" };
    if a.precision != built {
        return Err(Error::Config(format!(
            "this binary computes in {built}; rebuild {} the `f32` feature for {}",
            if built == "f64" { "with" } else { "without" },
            a.precision
        )));
    }
    let poolings = match (a.model, a.pooling) {
        (ModelKind::Transformer, _) => vec![PoolingMode::default()],
        (_, Some(p)) => vec![p],
        (_, None) => vec![PoolingMode::PerPairMlp, PoolingMode::PoolThenMlp, PoolingMode::ConcatProject],
    };
    let mut worst: Scalar = 0.0;
    for pooling in poolings {
        let cfg = gradcheck_config(a.model, pooling);
        let r = check_model_gradients(&cfg, a.step as Scalar, a.seed)?;
        let label = match a.model {
            ModelKind::PairConnect => format!("pairconnect/{pooling}"),
            ModelKind::Transformer => "transformer".to_string(),
        };
        writeln!(
            out,
            "{label}: max relative error {:.3e} over {} scalars (absolute below {ABS_FLOOR:e}); roundoff-adjusted ratio {:.3}",
            r.max_error, r.checked, r.roundoff_ratio
        )?;
        worst = worst.max(r.max_error);
    }
    let pass = worst <= GRADCHECK_TOLERANCE;
    writeln!(
        out,
        "max relative error {worst:.3e}: {}",
        if pass { "PASS" } else { "FAIL" }
    )?;
    Ok(if pass { 0 } else { 1 })
}

fn ablate(cli: &Cli, a: &AblateArgs, out: &mut dyn Write) -> Result<i32> {
    let mut base = load_config(cli)?;
    base.model.kind = ModelKind::PairConnect;
    if let Some(s) = a.steps {
        base.steps = s;
    }
    let dataset = match &base.train_data {
        Some(p) => p.file_stem().map_or("data".into(), |s| s.to_string_lossy().into_owned()),
        None => "cycles".to_string(),
    };
    let mut csv = String::from("hash_size,dataset,test_loss,train_loss\n");
    for &k in &a.table_sizes {
        let mut cfg = base.clone();
        cfg.model.table_size = k;
        let data = prepare_data(&cfg)?;
        cfg.model.vocab_size = data.vocab_size;
        let mut trainer = Trainer::new(&cfg, &data)?;
        let mut log = MetricsLog::default();
        trainer.train_steps(&data, cfg.steps, &mut log)?;
        let test = evaluate(&trainer.model, &data.eval)?;
        let train = log.last_loss(Split::Train).unwrap_or(f64::NAN);
        let line = format!("{k},{dataset},{:.6},{:.6}\n", test.loss, train);
        write!(out, "{line}")?;
        csv.push_str(&line);
    }
    if let Some(path) = &a.out {
        std::fs::write(path, csv)?;
    }
    Ok(0)
}

fn collide(a: &CollideArgs, out: &mut dyn Write) -> Result<i32> {
    let mut rng = Rng::new(a.seed);
    let stats = estimate_collision_rate(a.table_size, a.heads, a.samples, &mut rng)?;
    let k = a.table_size as f64;
    writeln!(out, "heads,K,samples,kind,rate,std_error,expected")?;
    for (h, r) in stats.per_head.iter().enumerate() {
        writeln!(
            out,
            "{},{},{},head{h},{:.6e},{:.3e},{:.6e}",
            a.heads,
            a.table_size,
            r.samples,
            r.rate,
            r.std_error,
            1.0 / k
        )?;
    }
    let s = &stats.simultaneous;
    writeln!(
        out,
        "{},{},{},all-heads,{:.6e},{:.3e},{:.6e}",
        a.heads,
        a.table_size,
        s.samples,
        s.rate,
        s.std_error,
        k.powi(-(a.heads as i32))
    )?;
    Ok(0)
}
