//! Compares forward throughput of both models at the default benchmark
//! configuration. Optional args: `pair_dim pair_hidden`.

use pairconnect::bench::{bench_throughput, BenchConfig};
use pairconnect::model::{Model, ModelConfig, ModelKind};

fn main() -> pairconnect::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let base = ModelConfig { dropout: 0.0, ..ModelConfig::default() };
    let pc = ModelConfig {
        pair_dim: args.first().copied().unwrap_or(base.pair_dim),
        pair_hidden: args.get(1).copied().unwrap_or(base.pair_hidden),
        ..base.clone()
    };
    let tr = ModelConfig { kind: ModelKind::Transformer, ..base };
    let bench = BenchConfig::default();
    let a = bench_throughput(&Model::new(&pc)?, &bench)?;
    let b = bench_throughput(&Model::new(&tr)?, &bench)?;
    println!("{}\n{}\nratio {:.3}", a.summary(), b.summary(), a.median / b.median);
    println!("{:?}\n{:?}", a.counters, b.counters);
    Ok(())
}
