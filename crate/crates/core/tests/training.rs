//! End-to-end training behaviour on the synthetic cycle task.
#![cfg(not(feature = "f32"))]

use pairconnect::model::{ModelConfig, ModelKind, PoolingMode};
use pairconnect::nn::Mode;
use pairconnect::numerics::{Tape, Tensor};
use pairconnect::training::{
    adam_step, evaluate, mlm_loss, prepare_data, Checkpoint, MetricsLog, Split, TrainConfig, TrainData, Trainer,
};
use pairconnect::Error;

fn tiny(kind: ModelKind, dropout: f64) -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            kind,
            vocab_size: 22,
            layers: 1,
            heads: 1,
            d_model: 16,
            d_hidden: 16,
            pair_dim: 16,
            pair_hidden: 16,
            table_size: 128,
            pooling: PoolingMode::PoolThenMlp,
            dropout,
            seq_len: 8,
            positional: true,
            hash_seed: 3,
            init_seed: 4,
        },
        batch_size: 16,
        lr: 1e-3,
        steps: 200,
        eval_every: 50,
        record_wall_time: false,
        train_sequences: 256,
        eval_sequences: 64,
        ..TrainConfig::default()
    }
}

fn batch_loss(trainer: &Trainer, batch: &pairconnect::mlmdata::MaskedBatch) -> f64 {
    let mut tape = Tape::new();
    let bound = trainer.model.params().bind(&mut tape).unwrap();
    let logits = trainer.model.forward(&mut tape, &bound, &batch.inputs(), &mut Mode::Eval).unwrap();
    let loss = mlm_loss(&mut tape, logits, batch).unwrap();
    tape.value(loss).item()
}

#[test]
fn small_adam_step_lowers_the_loss_on_its_batch() {
    for kind in [ModelKind::PairConnect, ModelKind::Transformer] {
        let cfg = TrainConfig { lr: 1e-6, ..tiny(kind, 0.0) };
        let data = prepare_data(&cfg).unwrap();
        let mut trainer = Trainer::new(&cfg, &data).unwrap();
        let batch = data.eval[0].clone();
        assert!(batch.num_masked() > 0);
        let before = batch_loss(&trainer, &batch);
        let grads = {
            let mut tape = Tape::new();
            let bound = trainer.model.params().bind(&mut tape).unwrap();
            let logits = trainer.model.forward(&mut tape, &bound, &batch.inputs(), &mut Mode::Eval).unwrap();
            let loss = mlm_loss(&mut tape, logits, &batch).unwrap();
            let mut g = tape.backward(loss).unwrap();
            bound
                .nodes()
                .iter()
                .zip(trainer.model.params().tensors())
                .map(|(&n, p)| g.take(n).unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect::<Vec<_>>()
        };
        adam_step(trainer.model.params_mut(), &grads, &mut trainer.adam).unwrap();
        let after = batch_loss(&trainer, &batch);
        assert!(after < before, "{kind}: {before} -> {after}");
    }
}

#[test]
fn loss_falls_below_uniform_within_200_steps() {
    for kind in [ModelKind::PairConnect, ModelKind::Transformer] {
        let cfg = tiny(kind, 0.0);
        let data = prepare_data(&cfg).unwrap();
        let mut trainer = Trainer::new(&cfg, &data).unwrap();
        let mut log = MetricsLog::default();
        trainer.train_steps(&data, 200, &mut log).unwrap();
        let uniform = (data.vocab_size as f64).ln();
        let last = log.last_loss(Split::Eval).unwrap();
        assert!(last < uniform, "{kind}: {last} vs ln U {uniform}");
    }
}

#[test]
fn zero_output_projection_gives_log_vocab() {
    let cfg = tiny(ModelKind::PairConnect, 0.0);
    let data = prepare_data(&cfg).unwrap();
    let mut trainer = Trainer::new(&cfg, &data).unwrap();
    let id = trainer.model.params().find("output").unwrap();
    let out = trainer.model.params_mut().get_mut(id);
    *out = Tensor::zeros(out.shape());
    let m = evaluate(&trainer.model, &data.eval).unwrap();
    assert!((m.loss - (data.vocab_size as f64).ln()).abs() < 1e-12);
    let again = evaluate(&trainer.model, &data.eval).unwrap();
    assert_eq!(m.loss.to_bits(), again.loss.to_bits());
}

fn run_to(cfg: &TrainConfig, data: &TrainData, steps: usize) -> (Trainer, MetricsLog) {
    let mut t = Trainer::new(cfg, data).unwrap();
    let mut log = MetricsLog::default();
    t.train_steps(data, steps, &mut log).unwrap();
    (t, log)
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    for kind in [ModelKind::PairConnect, ModelKind::Transformer] {
        let cfg = TrainConfig { eval_every: 10, ..tiny(kind, 0.1) };
        let data = prepare_data(&cfg).unwrap();
        let (full, full_log) = run_to(&cfg, &data, 40);

        let (half, mut log) = run_to(&cfg, &data, 20);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("half.ckpt");
        Checkpoint::from_trainer(&half).save(&path).unwrap();
        let mut resumed = Checkpoint::load(&path).unwrap().to_trainer(&data).unwrap();
        resumed.train_steps(&data, 20, &mut log).unwrap();

        let bits = |l: &MetricsLog| -> Vec<(u64, u64)> {
            l.losses(Split::Train).into_iter().map(|(s, v)| (s, v.to_bits())).collect()
        };
        assert_eq!(bits(&full_log), bits(&log), "{kind}");
        assert_eq!(
            Checkpoint::from_trainer(&full).to_bytes(),
            Checkpoint::from_trainer(&resumed).to_bytes(),
            "{kind}"
        );
    }
}

#[test]
fn identical_seeds_give_identical_csv() {
    let cfg = TrainConfig { eval_every: 10, ..tiny(ModelKind::PairConnect, 0.1) };
    let data = prepare_data(&cfg).unwrap();
    let (_, a) = run_to(&cfg, &data, 30);
    let (_, b) = run_to(&cfg, &data, 30);
    assert_eq!(a.to_csv(), b.to_csv());
    let other = TrainConfig { seed: 99, ..cfg.clone() };
    let (_, c) = run_to(&other, &data, 30);
    assert_ne!(a.to_csv(), c.to_csv());
}

#[test]
fn checkpoint_bytes_round_trip_and_reject_corruption() {
    let cfg = tiny(ModelKind::Transformer, 0.1);
    let data = prepare_data(&cfg).unwrap();
    let (trainer, _) = run_to(&cfg, &data, 5);
    let bytes = Checkpoint::from_trainer(&trainer).to_bytes();
    let again = Checkpoint::from_bytes(&bytes).unwrap().to_bytes();
    assert_eq!(bytes, again);

    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::BadMagic)));
    let mut bad = bytes.clone();
    bad[8] = 99;
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::VersionMismatch { .. })));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Truncated(_))));
}
