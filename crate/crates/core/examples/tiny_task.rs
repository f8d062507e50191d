//! Trains both models on the synthetic cycle task and prints eval loss and
//! masked-token accuracy. Args: `[steps] [dropout] [seq_len] [table_size]`.

use std::time::Instant;

use pairconnect::model::ModelKind;
use pairconnect::training::{evaluate, prepare_data, MetricsLog, TrainConfig, Trainer};

fn main() -> pairconnect::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: &str| args.get(i).cloned().unwrap_or_else(|| d.to_string());
    let steps: usize = arg(0, "2000").parse().unwrap();
    for kind in [ModelKind::PairConnect, ModelKind::Transformer] {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(&format!(
            "model = {kind}\nlayers = 1\nheads = 1\nd_model = 32\nd_hidden = 32\npair_dim = 32\npair_hidden = 32\n\
             table_size = {}\ndropout = {}\nseq_len = {}\nlr = 0.001\nbatch_size = 32\neval_every = 250\nvocab_size = 22\n",
            arg(3, "1024"),
            arg(1, "0"),
            arg(2, "8")
        ))?;
        let data = prepare_data(&cfg)?;
        let start = Instant::now();
        let mut tr = Trainer::new(&cfg, &data)?;
        let mut log = MetricsLog::default();
        tr.train_steps(&data, steps, &mut log)?;
        let m = evaluate(&tr.model, &data.eval)?;
        println!(
            "{kind}: eval loss {:.5} accuracy {:.4} ({} masked) in {:.1}s; evals {:?}",
            m.loss,
            m.accuracy,
            m.masked,
            start.elapsed().as_secs_f64(),
            log.losses(pairconnect::training::Split::Eval)
        );
    }
    Ok(())
}
