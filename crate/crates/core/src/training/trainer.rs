use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::mlmdata::{arithmetic_cycles, read_tokens, Batcher, MaskedBatch, MlmDataset, Vocab, FIRST_WORD_ID, IGNORE};
use crate::model::Model;
use crate::nn::Mode;
use crate::numerics::{NodeId, Rng, Tape, Tensor};
use crate::training::adam::{adam_step, AdamState};
use crate::training::config::TrainConfig;

pub const METRICS_CSV_HEADER: &str = "step,split,loss,wall_ms";

/// RNG streams derived from the training seed.
const MASK_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;
const CYCLE_STREAM: u64 = 3;

/// Mean cross-entropy over masked positions of `batch`; every other position
/// (unmasked words and PAD) is ignored and receives exactly zero gradient.
pub fn mlm_loss(tape: &mut Tape<'_>, logits: NodeId, batch: &MaskedBatch) -> Result<NodeId> {
    let flat = batch.flat_targets();
    let rows = tape.value(logits).rows();
    if rows != flat.len() {
        return Err(Error::dim("mlm_loss", tape.value(logits).shape(), &[batch.len(), batch.seq_len()]));
    }
    let ignore: HashSet<usize> = flat.iter().enumerate().filter(|(_, &t)| t == IGNORE).map(|(i, _)| i).collect();
    let targets = flat.iter().map(|&t| if t == IGNORE { 0 } else { t as usize }).collect();
    tape.cross_entropy_rows(logits, targets, &ignore)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    /// Mean cross-entropy per masked token.
    pub loss: f64,
    /// Fraction of masked tokens whose arg-max prediction is the target.
    pub accuracy: f64,
    pub masked: usize,
}

/// Evaluation-mode loss and accuracy over fixed, pre-masked batches.
pub fn evaluate(model: &Model, batches: &[MaskedBatch]) -> Result<EvalMetrics> {
    let mut total = 0.0;
    let mut correct = 0usize;
    let mut masked = 0usize;
    for batch in batches {
        let count = batch.num_masked();
        if count == 0 {
            continue;
        }
        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape)?;
        let logits = model.forward(&mut tape, &bound, &batch.inputs(), &mut Mode::Eval)?;
        let loss = mlm_loss(&mut tape, logits, batch)?;
        total += tape.value(loss).item() as f64 * count as f64;
        let lv = tape.value(logits);
        for (r, &t) in batch.flat_targets().iter().enumerate() {
            if t != IGNORE && argmax(lv.row(r)) == t as usize {
                correct += 1;
            }
        }
        masked += count;
    }
    if masked == 0 {
        return Ok(EvalMetrics {
            loss: 0.0,
            accuracy: 0.0,
            masked: 0,
        });
    }
    Ok(EvalMetrics {
        loss: total / masked as f64,
        accuracy: correct as f64 / masked as f64,
        masked,
    })
}

fn argmax(row: &[crate::numerics::Scalar]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub split: Split,
    pub loss: f64,
    pub wall_ms: u64,
}

/// Per-step training losses and periodic evaluation losses.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricRow>,
}

impl MetricsLog {
    pub fn push(&mut self, row: MetricRow) {
        self.rows.push(row);
    }

    pub fn losses(&self, split: Split) -> Vec<(u64, f64)> {
        self.rows.iter().filter(|r| r.split == split).map(|r| (r.step, r.loss)).collect()
    }

    pub fn last_loss(&self, split: Split) -> Option<f64> {
        self.rows.iter().rev().find(|r| r.split == split).map(|r| r.loss)
    }

    fn row_line(r: &MetricRow) -> String {
        // `{:?}` prints the shortest text that parses back to the same f64.
        format!("{},{},{:?},{}", r.step, r.split.as_str(), r.loss, r.wall_ms)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(out, "{}", Self::row_line(r));
        }
        out
    }

    /// Appends rows to `path`, writing the header first if the file is new
    /// or empty.
    pub fn append_to(&self, path: &Path) -> Result<()> {
        let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        let mut text = String::new();
        if fresh {
            text.push_str(METRICS_CSV_HEADER);
            text.push('\n');
        }
        for r in &self.rows {
            let _ = writeln!(text, "{}", Self::row_line(r));
        }
        f.write_all(text.as_bytes())?;
        Ok(())
    }
}

/// Training sequences, the fixed masked evaluation set and the id space.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub train: MlmDataset,
    pub eval: Vec<MaskedBatch>,
    pub vocab_size: usize,
    pub vocab: Option<Vocab>,
}

/// Loads text corpora named in `cfg`, or builds the synthetic cycle task
/// when no training file is given. The vocabulary comes from the training
/// split only. `cfg.model.vocab_size` is not consulted; callers copy
/// [`TrainData::vocab_size`] into it.
pub fn prepare_data(cfg: &TrainConfig) -> Result<TrainData> {
    let dcfg = cfg.data_config();
    dcfg.validate()?;
    let m = cfg.model.seq_len;
    let (train, eval_ds, vocab_size, vocab) = match &cfg.train_data {
        Some(path) => {
            let tokens = read_tokens(path)?;
            let vocab = Vocab::build(tokens.iter().map(String::as_str))?;
            let train = MlmDataset::from_ids(&vocab.encode(tokens.iter().map(String::as_str))?, m)?;
            let eval = match &cfg.eval_data {
                Some(p) => {
                    let t = read_tokens(p)?;
                    MlmDataset::from_ids(&vocab.encode(t.iter().map(String::as_str))?, m)?
                }
                None => MlmDataset { sequences: Vec::new() },
            };
            let size = vocab.total_size();
            (train, eval, size, Some(vocab))
        }
        None => {
            let mut rng = Rng::with_stream(cfg.seed, CYCLE_STREAM);
            let train = MlmDataset {
                sequences: arithmetic_cycles(cfg.cycle_vocab, cfg.train_sequences, m, &mut rng),
            };
            let eval = MlmDataset {
                sequences: arithmetic_cycles(cfg.cycle_vocab, cfg.eval_sequences, m, &mut rng),
            };
            (train, eval, FIRST_WORD_ID as usize + cfg.cycle_vocab, None)
        }
    };
    if train.is_empty() {
        return Err(Error::Data(format!("training data yields no sequences of length {m}")));
    }
    let eval = eval_ds.fixed_masked_batches(&dcfg, cfg.eval_seed)?;
    Ok(TrainData {
        train,
        eval,
        vocab_size,
        vocab,
    })
}

/// Model, optimizer and every source of randomness of one training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub adam: AdamState,
    pub batcher: Batcher,
    pub mask_rng: Rng,
    pub dropout_rng: Rng,
    /// Completed optimizer steps.
    pub step: u64,
}

impl Trainer {
    /// Fresh run. `cfg.model.vocab_size` must already match the data.
    pub fn new(cfg: &TrainConfig, data: &TrainData) -> Result<Self> {
        cfg.validate()?;
        if cfg.model.vocab_size != data.vocab_size {
            return Err(Error::Config(format!(
                "model vocab_size {} does not match the data's {}",
                cfg.model.vocab_size, data.vocab_size
            )));
        }
        let model = Model::new(&cfg.model)?;
        let adam = AdamState::new(model.params(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
        Ok(Trainer {
            cfg: cfg.clone(),
            batcher: Batcher::new(&data.train, &cfg.data_config())?,
            model,
            adam,
            mask_rng: Rng::with_stream(cfg.seed, MASK_STREAM),
            dropout_rng: Rng::with_stream(cfg.seed, DROPOUT_STREAM),
            step: 0,
        })
    }

    /// Draws the next batch, takes one Adam step and returns the batch loss
    /// measured before the update.
    pub fn train_step(&mut self, data: &TrainData) -> Result<f64> {
        let dcfg = self.cfg.data_config();
        let batch = self.batcher.next_batch(&data.train, &dcfg, &mut self.mask_rng)?;
        let inputs = batch.inputs();
        let (loss, grads) = {
            let store = self.model.params();
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape)?;
            let logits = self
                .model
                .forward(&mut tape, &bound, &inputs, &mut Mode::Train(&mut self.dropout_rng))?;
            let loss = mlm_loss(&mut tape, logits, &batch)?;
            let mut g = tape.backward(loss)?;
            let grads: Vec<Tensor> = bound
                .nodes()
                .iter()
                .zip(store.tensors())
                .map(|(&id, p)| g.take(id).unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            (tape.value(loss).item() as f64, grads)
        };
        adam_step(self.model.params_mut(), &grads, &mut self.adam)?;
        self.step += 1;
        Ok(loss)
    }

    /// Runs `n` steps, logging every training loss and evaluating before the
    /// first step, every `eval_every` steps and after the last. Errors carry
    /// the index of the step that failed.
    pub fn train_steps(&mut self, data: &TrainData, n: usize, log: &mut MetricsLog) -> Result<()> {
        if n == 0 {
            return Err(Error::Config("train_steps needs n >= 1".into()));
        }
        let start = Instant::now();
        let wall = |start: &Instant, on: bool| if on { start.elapsed().as_millis() as u64 } else { 0 };
        let has_eval = data.eval.iter().any(|b| b.num_masked() > 0);
        let end = self.step + n as u64;
        let mut evaluated_at = None;
        if has_eval && self.step == 0 {
            self.log_eval(data, log, wall(&start, self.cfg.record_wall_time))?;
            evaluated_at = Some(0);
        }
        while self.step < end {
            let step = self.step + 1;
            let loss = self.train_step(data).map_err(|e| Error::Step {
                step: step as usize,
                source: Box::new(e),
            })?;
            log.push(MetricRow {
                step,
                split: Split::Train,
                loss,
                wall_ms: wall(&start, self.cfg.record_wall_time),
            });
            let periodic = self.cfg.eval_every > 0 && step.is_multiple_of(self.cfg.eval_every as u64);
            if has_eval && (periodic || step == end) && evaluated_at != Some(step) {
                self.log_eval(data, log, wall(&start, self.cfg.record_wall_time))?;
                evaluated_at = Some(step);
            }
        }
        Ok(())
    }

    fn log_eval(&self, data: &TrainData, log: &mut MetricsLog, wall_ms: u64) -> Result<()> {
        let metrics = evaluate(&self.model, &data.eval).map_err(|e| Error::Step {
            step: self.step as usize,
            source: Box::new(e),
        })?;
        log::info!(
            "step {}: eval loss {:.5}, masked accuracy {:.4}",
            self.step,
            metrics.loss,
            metrics.accuracy
        );
        log.push(MetricRow {
            step: self.step,
            split: Split::Eval,
            loss: metrics.loss,
            wall_ms,
        });
        Ok(())
    }
}
