//! Runs the model gradient check for every pooling mode and the Transformer.

use pairconnect::model::{check_model_gradients, gradcheck_config, ModelKind, PoolingMode};

fn main() -> pairconnect::Result<()> {
    for (kind, pooling) in [
        (ModelKind::PairConnect, PoolingMode::PerPairMlp),
        (ModelKind::PairConnect, PoolingMode::PoolThenMlp),
        (ModelKind::PairConnect, PoolingMode::ConcatProject),
        (ModelKind::Transformer, PoolingMode::PoolThenMlp),
    ] {
        for h in [1e-5, 1e-4, 1e-3] {
            let r = check_model_gradients(&gradcheck_config(kind, pooling), h, 0)?;
            println!("{kind} {pooling} h={h:e}: max relative error {:.3e}, roundoff ratio {:.3}", r.max_error, r.roundoff_ratio);
        }
    }
    Ok(())
}
