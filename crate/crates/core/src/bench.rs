//! Single-thread, batch-1 inference throughput measurement and the sweep
//! report built on top of it.
//!
//! Timing covers the forward pass only (tape recording in evaluation mode,
//! no backward). Warmup iterations are discarded; each repetition reports
//! `samples / elapsed` on a monotonic clock and the report's headline value
//! is the median over repetitions. Work counters come from the tape and are
//! identical across runs for a fixed configuration.

use std::fmt::Write as _;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::mlmdata::FIRST_WORD_ID;
use crate::model::{Model, ModelConfig, ModelKind};
use crate::nn::Mode;
use crate::numerics::{OpCounters, Rng, Tape};

/// Environment variable overriding the CPU the benchmark pins itself to.
/// A CPU index selects that CPU; `off` disables pinning.
pub const PIN_ENV: &str = "PAIRCONNECT_PIN_CPU";

pub const SWEEP_CSV_HEADER: &str = "model,mode,L,heads,d,K,m,samples_per_sec,flops_est,lookups";

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub seq_len: usize,
    pub batch_size: usize,
    pub warmup: usize,
    /// Timed forward passes per repetition.
    pub iterations: usize,
    pub repetitions: usize,
    pub pin_thread: bool,
    /// Seed of the synthetic token stream.
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            seq_len: 128,
            batch_size: 1,
            warmup: 5,
            iterations: 30,
            repetitions: 5,
            pin_thread: true,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 30 {
            return Err(Error::Config(format!("need at least 30 measured iterations, got {}", self.iterations)));
        }
        if self.warmup < 5 {
            return Err(Error::Config(format!("need at least 5 warmup iterations, got {}", self.warmup)));
        }
        if self.repetitions < 5 {
            return Err(Error::Config(format!("need at least 5 repetitions, got {}", self.repetitions)));
        }
        if self.seq_len == 0 || self.batch_size == 0 {
            return Err(Error::Config("seq_len and batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Outcome of a pinning attempt.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Pinning {
    Pinned(usize),
    Disabled,
    /// Pinning was requested but failed; the benchmark still ran.
    Failed(String),
}

impl std::fmt::Display for Pinning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Pinning::Pinned(cpu) => write!(f, "pinned to cpu {cpu}"),
            Pinning::Disabled => f.write_str("not pinned"),
            Pinning::Failed(why) => write!(f, "pinning failed: {why}"),
        }
    }
}

/// Pins the calling thread to one CPU, honouring [`PIN_ENV`]. Never fails
/// hard: problems are returned as [`Pinning::Failed`].
pub fn pin_current_thread() -> Pinning {
    let requested = std::env::var(PIN_ENV).ok();
    let cpu = match requested.as_deref().map(str::trim) {
        Some("off") | Some("none") => return Pinning::Disabled,
        Some(s) => match s.parse::<usize>() {
            Ok(c) => c,
            Err(_) => return Pinning::Failed(format!("{PIN_ENV}={s:?} is not a cpu index")),
        },
        None => current_cpu(),
    };
    set_affinity(cpu)
}

#[cfg(target_os = "linux")]
fn current_cpu() -> usize {
    // SAFETY: sched_getcpu has no preconditions.
    let c = unsafe { libc::sched_getcpu() };
    if c < 0 {
        0
    } else {
        c as usize
    }
}

#[cfg(not(target_os = "linux"))]
fn current_cpu() -> usize {
    0
}

#[cfg(target_os = "linux")]
fn set_affinity(cpu: usize) -> Pinning {
    if cpu >= libc::CPU_SETSIZE as usize {
        return Pinning::Failed(format!("cpu {cpu} out of range"));
    }
    // SAFETY: the set is zero-initialised and only touched through the libc
    // helpers; pid 0 addresses the calling thread.
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        libc::CPU_ZERO(&mut set);
        libc::CPU_SET(cpu, &mut set);
        if libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set) != 0 {
            return Pinning::Failed(std::io::Error::last_os_error().to_string());
        }
    }
    Pinning::Pinned(cpu)
}

#[cfg(not(target_os = "linux"))]
fn set_affinity(_cpu: usize) -> Pinning {
    Pinning::Failed("thread pinning is only implemented on linux".into())
}

/// CPU model name where available, plus OS and architecture.
pub fn host_description() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|v| v.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    format!("{cpu} ({} {})", std::env::consts::OS, std::env::consts::ARCH)
}

/// Uniformly random real-word ids, `[batch x m]`.
pub fn synthetic_batch(vocab_size: usize, batch: usize, m: usize, rng: &mut Rng) -> Result<Vec<Vec<u32>>> {
    let words = vocab_size
        .checked_sub(FIRST_WORD_ID as usize)
        .filter(|&w| w > 0)
        .ok_or_else(|| Error::Config(format!("vocabulary of {vocab_size} has no real words")))?;
    Ok((0..batch)
        .map(|_| (0..m).map(|_| FIRST_WORD_ID + rng.index(words) as u32).collect())
        .collect())
}

/// One evaluation-mode forward pass; returns the tape's work counters.
pub fn forward_once(model: &Model, inputs: &[Vec<u32>]) -> Result<OpCounters> {
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape)?;
    let out = model.forward(&mut tape, &bound, inputs, &mut Mode::Eval)?;
    std::hint::black_box(tape.value(out));
    Ok(tape.counters())
}

/// Work counters of one forward pass over a synthetic `[batch x m]` input.
pub fn forward_counters(model: &Model, batch: usize, m: usize, seed: u64) -> Result<OpCounters> {
    let inputs = synthetic_batch(model.config().vocab_size, batch, m, &mut Rng::new(seed))?;
    forward_once(model, &inputs)
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub model: ModelConfig,
    pub bench: BenchConfig,
    /// Samples per second of each repetition.
    pub runs: Vec<f64>,
    pub median: f64,
    pub mean: f64,
    pub std_dev: f64,
    pub counters: OpCounters,
    pub pinning: Pinning,
    pub host: String,
}

impl BenchReport {
    pub fn summary(&self) -> String {
        let runs: Vec<String> = self.runs.iter().map(|r| format!("{r:.3}")).collect();
        format!(
            "{} L={} heads={} d={} K={} m={}: median {:.3} samples/s (mean {:.3}, std {:.3}; runs [{}]); {}; {}",
            self.model.kind,
            self.model.layers,
            self.model.heads,
            self.model.d_model,
            self.model.table_size,
            self.bench.seq_len,
            self.median,
            self.mean,
            self.std_dev,
            runs.join(", "),
            self.pinning,
            self.host
        )
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Measures forward throughput of `model`. Dropout is never applied
/// (evaluation mode) and the calling thread is pinned if requested.
pub fn bench_throughput(model: &Model, cfg: &BenchConfig) -> Result<BenchReport> {
    Ok(bench_interleaved(&[model], cfg)?.remove(0))
}

/// Benchmarks several models with their repetitions interleaved: repetition
/// `r` times every model once before repetition `r + 1` starts, so slow
/// drifts in machine speed affect all models alike. All models see the same
/// synthetic token batches.
pub fn bench_interleaved(models: &[&Model], cfg: &BenchConfig) -> Result<Vec<BenchReport>> {
    cfg.validate()?;
    let pinning = if cfg.pin_thread {
        pin_current_thread()
    } else {
        Pinning::Disabled
    };
    if let Pinning::Failed(why) = &pinning {
        log::warn!("benchmark continues unpinned: {why}");
    }
    let vocab = models
        .iter()
        .map(|m| m.config().vocab_size)
        .min()
        .ok_or_else(|| Error::Config("nothing to benchmark".into()))?;
    let mut rng = Rng::new(cfg.seed);
    let batches = (0..cfg.warmup + cfg.iterations)
        .map(|_| synthetic_batch(vocab, cfg.batch_size, cfg.seq_len, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let counters = models
        .iter()
        .map(|m| forward_once(m, &batches[0]))
        .collect::<Result<Vec<_>>>()?;
    let mut runs = vec![Vec::with_capacity(cfg.repetitions); models.len()];
    for _ in 0..cfg.repetitions {
        for (model, out) in models.iter().zip(&mut runs) {
            for b in &batches[..cfg.warmup] {
                forward_once(model, b)?;
            }
            let start = Instant::now();
            for b in &batches[cfg.warmup..] {
                forward_once(model, b)?;
            }
            let secs = start.elapsed().as_secs_f64();
            out.push((cfg.iterations * cfg.batch_size) as f64 / secs.max(f64::MIN_POSITIVE));
        }
    }
    let host = host_description();
    Ok(models
        .iter()
        .zip(runs)
        .zip(counters)
        .map(|((model, runs), counters)| {
            let (mean, std_dev) = mean_std(&runs);
            BenchReport {
                model: model.config().clone(),
                bench: cfg.clone(),
                median: median(&runs),
                runs,
                mean,
                std_dev,
                counters,
                pinning: pinning.clone(),
                host: host.clone(),
            }
        })
        .collect())
}

/// One CSV row of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub kind: ModelKind,
    pub mode: String,
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub table_size: usize,
    pub seq_len: usize,
    pub samples_per_sec: f64,
    pub flops_est: u64,
    pub lookups: u64,
}

impl SweepRow {
    pub fn from_report(report: &BenchReport) -> Self {
        let cfg = &report.model;
        let (mode, table_size) = match cfg.kind {
            ModelKind::PairConnect => (cfg.pooling.to_string(), cfg.table_size),
            ModelKind::Transformer => ("attention".to_string(), 0),
        };
        SweepRow {
            kind: cfg.kind,
            mode,
            layers: cfg.layers,
            heads: cfg.heads,
            d_model: cfg.d_model,
            table_size,
            seq_len: report.bench.seq_len,
            samples_per_sec: report.median,
            flops_est: report.counters.total_flops(),
            lookups: report.counters.pair_lookups + report.counters.embedding_lookups,
        }
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.4},{},{}",
            self.kind,
            self.mode,
            self.layers,
            self.heads,
            self.d_model,
            self.table_size,
            self.seq_len,
            self.samples_per_sec,
            self.flops_est,
            self.lookups
        )
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

/// Benchmarks every model kind in `kinds` at every `(m, K)` grid point
/// derived from `base`. `K` is ignored for the Transformer, which is
/// measured once per `m`.
pub fn bench_sweep(
    base: &ModelConfig,
    kinds: &[ModelKind],
    seq_lens: &[usize],
    table_sizes: &[usize],
    bench: &BenchConfig,
) -> Result<Vec<SweepRow>> {
    let points: usize = kinds
        .iter()
        .map(|k| match k {
            ModelKind::PairConnect => seq_lens.len() * table_sizes.len(),
            ModelKind::Transformer => seq_lens.len(),
        })
        .sum();
    if points < 2 {
        return Err(Error::Config(format!("a sweep needs at least 2 points, got {points}")));
    }
    let mut rows = Vec::with_capacity(points);
    for &kind in kinds {
        for &m in seq_lens {
            let ks: &[usize] = match kind {
                ModelKind::PairConnect => table_sizes,
                ModelKind::Transformer => &table_sizes[..table_sizes.len().min(1)],
            };
            for &k in ks {
                let cfg = ModelConfig {
                    kind,
                    table_size: k,
                    seq_len: m,
                    dropout: 0.0,
                    ..base.clone()
                };
                let model = Model::new(&cfg)?;
                let report = bench_throughput(&model, &BenchConfig { seq_len: m, ..bench.clone() })?;
                log::info!("{}", report.summary());
                rows.push(SweepRow::from_report(&report));
            }
        }
    }
    Ok(rows)
}

/// Parameter and memory footprint of a model, split into pair tables and
/// everything else.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParityReport {
    pub kind: ModelKind,
    pub total_scalars: usize,
    pub table_scalars: usize,
    pub bytes: usize,
}

impl ParityReport {
    pub fn of(model: &Model) -> Self {
        let total = model.params().num_scalars();
        ParityReport {
            kind: model.config().kind,
            total_scalars: total,
            table_scalars: model.table_scalars(),
            bytes: total * std::mem::size_of::<crate::numerics::Scalar>(),
        }
    }

    pub fn dense_scalars(&self) -> usize {
        self.total_scalars - self.table_scalars
    }
}

pub fn parity_table(reports: &[ParityReport]) -> String {
    let mut out = String::from("model,total_params,table_params,dense_params,bytes\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.kind,
            r.total_scalars,
            r.table_scalars,
            r.dense_scalars(),
            r.bytes
        );
    }
    out
}
