//! Architecture configuration and the model kinds behind one interface.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use crate::attention::TransformerModel;
use crate::error::{Error, Result};
use crate::nn::{Bound, Mode, ParamStore};
use crate::numerics::{finite_diff_check, GradCheck, NodeId, Tape, Tensor};
use crate::pairconnect::PairConnectModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    PairConnect,
    Transformer,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::PairConnect => "pairconnect",
            ModelKind::Transformer => "transformer",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pairconnect" => Ok(ModelKind::PairConnect),
            "transformer" => Ok(ModelKind::Transformer),
            other => Err(Error::Config(format!("unknown model kind {other:?}"))),
        }
    }
}

/// How a pair head reduces a token's `m` pair embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PoolingMode {
    /// `sum_j Mlp2(W[i,j])`.
    PerPairMlp,
    /// `Mlp2(sum_j W[i,j])`.
    #[default]
    PoolThenMlp,
    /// `Mlp2([W[i,j] for j != i])` over the concatenated non-self pairs; fixes `m`.
    ConcatProject,
}

impl fmt::Display for PoolingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolingMode::PerPairMlp => "per-pair-mlp",
            PoolingMode::PoolThenMlp => "pool-then-mlp",
            PoolingMode::ConcatProject => "concat-project",
        })
    }
}

impl FromStr for PoolingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-pair-mlp" => Ok(PoolingMode::PerPairMlp),
            "pool-then-mlp" => Ok(PoolingMode::PoolThenMlp),
            "concat-project" => Ok(PoolingMode::ConcatProject),
            other => Err(Error::Config(format!("unknown pooling mode {other:?}"))),
        }
    }
}

/// Architecture hyperparameters for either model kind.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Id space including PAD and MASK.
    pub vocab_size: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    /// Hidden width of the unigram, projection, combiner and feedforward MLPs.
    pub d_hidden: usize,
    /// Row width of each pair table and output width of each pair head.
    pub pair_dim: usize,
    /// Hidden width of the per-head pair MLPs.
    pub pair_hidden: usize,
    /// Slots per pair table (K).
    pub table_size: usize,
    pub pooling: PoolingMode,
    pub dropout: f64,
    /// Sequence length; binding only for `ConcatProject`.
    pub seq_len: usize,
    pub positional: bool,
    pub hash_seed: u32,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::PairConnect,
            vocab_size: 10_002,
            layers: 6,
            heads: 4,
            d_model: 256,
            d_hidden: 256,
            pair_dim: 256,
            pair_hidden: 256,
            table_size: 1000,
            pooling: PoolingMode::PoolThenMlp,
            dropout: 0.1,
            seq_len: 128,
            positional: true,
            hash_seed: 0,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("heads", self.heads),
            ("d_model", self.d_model),
            ("d_hidden", self.d_hidden),
            ("seq_len", self.seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        match self.kind {
            ModelKind::PairConnect => {
                if self.pair_dim == 0 || self.pair_hidden == 0 {
                    return Err(Error::Config("pair_dim and pair_hidden must be positive".into()));
                }
                if self.table_size == 0 || self.table_size as u64 > u32::MAX as u64 + 1 {
                    return Err(Error::Config(format!("table size {} out of range", self.table_size)));
                }
                if self.pooling == PoolingMode::ConcatProject && self.seq_len < 2 {
                    return Err(Error::Config("concat-project needs seq_len >= 2".into()));
                }
            }
            ModelKind::Transformer => {
                if !self.d_model.is_multiple_of(self.heads) {
                    return Err(Error::Config(format!(
                        "d_model {} is not divisible by {} heads",
                        self.d_model, self.heads
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Either model behind the interface the trainer and benchmark use.
#[derive(Clone, Debug)]
pub enum Model {
    PairConnect(PairConnectModel),
    Transformer(TransformerModel),
}

impl Model {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        Ok(match cfg.kind {
            ModelKind::PairConnect => Model::PairConnect(PairConnectModel::new(cfg)?),
            ModelKind::Transformer => Model::Transformer(TransformerModel::new(cfg)?),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            Model::PairConnect(m) => m.config(),
            Model::Transformer(m) => m.config(),
        }
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            Model::PairConnect(m) => m.params(),
            Model::Transformer(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Model::PairConnect(m) => m.params_mut(),
            Model::Transformer(m) => m.params_mut(),
        }
    }

    /// Logits `[B*m x vocab_size]` for a `[B x m]` batch, rows in
    /// sequence-major order.
    pub fn forward(&self, tape: &mut Tape<'_>, bound: &Bound, inputs: &[Vec<u32>], mode: &mut Mode<'_>) -> Result<NodeId> {
        match self {
            Model::PairConnect(m) => m.forward(tape, bound, inputs, mode),
            Model::Transformer(m) => m.forward(tape, bound, inputs, mode),
        }
    }

    /// Evaluation-mode logits as a plain tensor.
    pub fn logits(&self, inputs: &[Vec<u32>]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params().bind(&mut tape)?;
        let out = self.forward(&mut tape, &bound, inputs, &mut Mode::Eval)?;
        Ok(tape.value(out).clone())
    }

    /// `(parameter name, hash seed, K)` of every pair table.
    pub fn pair_tables(&self) -> Vec<(String, u32, usize)> {
        match self {
            Model::PairConnect(m) => m.pair_tables(),
            Model::Transformer(_) => Vec::new(),
        }
    }

    /// Scalars held in pair tables.
    pub fn table_scalars(&self) -> usize {
        match self {
            Model::PairConnect(m) => m.table_scalars(),
            Model::Transformer(_) => 0,
        }
    }
}

/// The small configuration used for gradient checks: 2 layers, 2 heads,
/// width 8, `m = 6`, `K = 31`, 17 ids, dropout off.
pub fn gradcheck_config(kind: ModelKind, pooling: PoolingMode) -> ModelConfig {
    ModelConfig {
        kind,
        vocab_size: 17,
        layers: 2,
        heads: 2,
        d_model: 8,
        d_hidden: 8,
        pair_dim: 8,
        pair_hidden: 8,
        table_size: 31,
        pooling,
        dropout: 0.0,
        seq_len: 6,
        positional: true,
        hash_seed: 7,
        init_seed: 11,
    }
}

/// Central-difference check of every parameter of a freshly initialized
/// model. The loss is the mean cross-entropy of two random sequences of
/// length `cfg.seq_len` against random targets, with a few positions ignored.
pub fn check_model_gradients(cfg: &ModelConfig, h: crate::numerics::Scalar, seed: u64) -> Result<GradCheck> {
    if cfg.dropout != 0.0 {
        return Err(Error::Config("gradient checks need dropout = 0".into()));
    }
    let model = Model::new(cfg)?;
    let mut rng = crate::numerics::Rng::new(seed);
    let words = cfg.vocab_size.saturating_sub(2).max(1);
    let inputs: Vec<Vec<u32>> = (0..2)
        .map(|_| (0..cfg.seq_len).map(|_| 2 + rng.index(words) as u32).collect())
        .collect();
    let rows = 2 * cfg.seq_len;
    let targets: Vec<usize> = (0..rows).map(|_| rng.index(cfg.vocab_size)).collect();
    let ignore: HashSet<usize> = (0..rows).filter(|_| rng.bernoulli(0.25)).collect();
    finite_diff_check(model.params().tensors(), h, |tape, ids| {
        let bound = Bound::from_nodes(ids.to_vec());
        let logits = model.forward(tape, &bound, &inputs, &mut Mode::Eval)?;
        tape.cross_entropy_rows(logits, targets.clone(), &ignore)
    })
}
