//! The PairConnect model.
//!
//! Each layer keeps a unigram stream `x` and, per head, a hashed table of
//! ordered-pair embeddings keyed by the original input token ids. A head
//! pools a token's `m` pair rows into one vector; the heads are concatenated,
//! projected back to `d_model`, added to the unigram MLP output and passed
//! through a combiner MLP. Output width equals input width, so layers stack.

use crate::error::{Error, Result};
use crate::hashing::{PairHasher, PairKeys};
use crate::model::{ModelConfig, ModelKind, PoolingMode};
use crate::nn::{batch_dims, tiled_positions, Bound, Mlp2, Mode, ParamId, ParamStore};
use crate::numerics::{NodeId, OpClass, ParamInit, Rng, Tape, Tensor};

/// Embedding table `[K x pair_dim]` with the hasher that addresses it.
#[derive(Clone, Debug, PartialEq)]
pub struct PairTable {
    pub table: ParamId,
    pub hasher: PairHasher,
}

/// Row `(i, j)` of the result (flattened as `i*m + j`) is the table row at
/// `pair_index(tokens[i], tokens[j])`. Shape `[m*m x d]`.
pub fn pair_lookup(tokens: &[u32], table: &Tensor, hasher: &PairHasher) -> Result<Tensor> {
    let (k, _) = table.dims2("pair_lookup")?;
    if k != hasher.table_size() {
        return Err(Error::dim("pair_lookup", table.shape(), &[hasher.table_size()]));
    }
    let slots = PairKeys::new(tokens).slots(hasher);
    crate::numerics::gather_rows(table, &slots)
}

/// Pair keys for every sequence of a batch, hashed once per table.
#[derive(Clone, Debug)]
pub struct BatchKeys {
    keys: Vec<PairKeys>,
    seq_len: usize,
}

impl BatchKeys {
    pub fn new(inputs: &[Vec<u32>]) -> Self {
        BatchKeys {
            keys: inputs.iter().map(|s| PairKeys::new(s)).collect(),
            seq_len: inputs.first().map_or(0, Vec::len),
        }
    }

    pub fn batch(&self) -> usize {
        self.keys.len()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    fn slots(&self, hasher: &PairHasher, with_self: bool) -> Vec<usize> {
        let mut out = Vec::new();
        for k in &self.keys {
            if with_self {
                out.extend(k.slots(hasher));
            } else {
                out.extend(k.slots_without_self(hasher));
            }
        }
        out
    }
}

/// One pair head: a table and its MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct PairHead {
    pub table: PairTable,
    pub mlp: Mlp2,
}

impl PairHead {
    /// Pooled head output `[B*m x pair_dim]`.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        bound: &Bound,
        keys: &BatchKeys,
        pooling: PoolingMode,
        mode: &mut Mode<'_>,
    ) -> Result<NodeId> {
        let m = keys.seq_len();
        let table = bound.node(self.table.table);
        let prev = tape.set_class(OpClass::Pair);
        let pooled = match pooling {
            PoolingMode::PoolThenMlp => tape.pair_pool(table, keys.slots(&self.table.hasher, true), m),
            PoolingMode::PerPairMlp => tape.gather_rows(table, keys.slots(&self.table.hasher, true)),
            PoolingMode::ConcatProject => {
                let d = tape.value(table).cols();
                let expected = self.mlp_input_width(tape, bound);
                if (m - 1) * d != expected {
                    tape.set_class(prev);
                    return Err(Error::dim("concat-project", &[m - 1, d], &[expected]));
                }
                tape.gather_rows(table, keys.slots(&self.table.hasher, false))
                    .and_then(|g| tape.reshape(g, vec![keys.batch() * m, (m - 1) * d]))
            }
        };
        tape.set_class(prev);
        let pooled = pooled?;
        let out = self.mlp.forward(tape, bound, pooled, mode)?;
        match pooling {
            PoolingMode::PerPairMlp => {
                let prev = tape.set_class(OpClass::Pair);
                let summed = tape.sum_groups(out, m);
                tape.set_class(prev);
                summed
            }
            _ => Ok(out),
        }
    }

    fn mlp_input_width(&self, tape: &Tape<'_>, bound: &Bound) -> usize {
        tape.value(bound.node(self.mlp.w0)).rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairConnectLayer {
    pub heads: Vec<PairHead>,
    pub unigram: Mlp2,
    /// Concatenated head outputs (`heads * pair_dim`) to `d_model`.
    pub pair_projection: Mlp2,
    pub combiner: Mlp2,
    pub pooling: PoolingMode,
}

impl PairConnectLayer {
    /// Head outputs concatenated column-wise, `[B*m x heads*pair_dim]`.
    pub fn multihead_forward(&self, tape: &mut Tape<'_>, bound: &Bound, keys: &BatchKeys, mode: &mut Mode<'_>) -> Result<NodeId> {
        let outs = self
            .heads
            .iter()
            .map(|h| h.forward(tape, bound, keys, self.pooling, mode))
            .collect::<Result<Vec<_>>>()?;
        if outs.len() == 1 {
            return Ok(outs[0]);
        }
        tape.concat_cols(&outs)
    }

    /// `combiner(unigram(x) + projection(multihead(x)))`.
    pub fn forward(&self, tape: &mut Tape<'_>, bound: &Bound, keys: &BatchKeys, hidden: NodeId, mode: &mut Mode<'_>) -> Result<NodeId> {
        let width = tape.value(hidden).cols();
        let expected = tape.value(bound.node(self.unigram.w0)).rows();
        if width != expected {
            return Err(Error::dim("layer_forward", tape.value(hidden).shape(), &[expected]));
        }
        let x_uni = self.unigram.forward(tape, bound, hidden, mode)?;
        let pairs = self.multihead_forward(tape, bound, keys, mode)?;
        let x_pair = self.pair_projection.forward(tape, bound, pairs, mode)?;
        let sum = tape.add(x_uni, x_pair)?;
        self.combiner.forward(tape, bound, sum, mode)
    }
}

#[derive(Clone, Debug)]
pub struct PairConnectModel {
    cfg: ModelConfig,
    store: ParamStore,
    pub embedding: ParamId,
    pub layers: Vec<PairConnectLayer>,
    pub output: ParamId,
}

impl PairConnectModel {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        if cfg.kind != ModelKind::PairConnect {
            return Err(Error::Config("PairConnectModel needs kind = pairconnect".into()));
        }
        cfg.validate()?;
        let mut rng = Rng::new(cfg.init_seed);
        let mut store = ParamStore::new();
        let d = cfg.d_model;
        let embedding = store.init("embed", &[cfg.vocab_size, d], ParamInit::UniformScaled, &mut rng);
        let head_in = match cfg.pooling {
            PoolingMode::ConcatProject => (cfg.seq_len - 1) * cfg.pair_dim,
            _ => cfg.pair_dim,
        };
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let mut heads = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                let prefix = format!("layer{l}.head{h}");
                let table = store.init(
                    format!("{prefix}.table"),
                    &[cfg.table_size, cfg.pair_dim],
                    ParamInit::UniformScaled,
                    &mut rng,
                );
                let hasher = PairHasher::for_table(cfg.hash_seed, l, h, cfg.table_size)?;
                let mlp = Mlp2::new(
                    &mut store,
                    &format!("{prefix}.mlp"),
                    (head_in, cfg.pair_hidden, cfg.pair_dim),
                    cfg.dropout,
                    &mut rng,
                );
                heads.push(PairHead {
                    table: PairTable { table, hasher },
                    mlp,
                });
            }
            let mk = |store: &mut ParamStore, name: &str, d_in: usize, rng: &mut Rng| {
                Mlp2::new(store, &format!("layer{l}.{name}"), (d_in, cfg.d_hidden, d), cfg.dropout, rng)
            };
            let unigram = mk(&mut store, "unigram", d, &mut rng);
            let pair_projection = mk(&mut store, "pair_projection", cfg.heads * cfg.pair_dim, &mut rng);
            let combiner = mk(&mut store, "combiner", d, &mut rng);
            layers.push(PairConnectLayer {
                heads,
                unigram,
                pair_projection,
                combiner,
                pooling: cfg.pooling,
            });
        }
        let output = store.init("output", &[d, cfg.vocab_size], ParamInit::UniformScaled, &mut rng);
        Ok(PairConnectModel {
            cfg: cfg.clone(),
            store,
            embedding,
            layers,
            output,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn table_scalars(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| &l.heads)
            .map(|h| self.store.get(h.table.table).len())
            .sum()
    }

    /// `(parameter name, hash seed, K)` of every pair table, layer-major.
    pub fn pair_tables(&self) -> Vec<(String, u32, usize)> {
        self.layers
            .iter()
            .flat_map(|l| &l.heads)
            .map(|h| {
                (
                    self.store.name(h.table.table).to_string(),
                    h.table.hasher.seed(),
                    h.table.hasher.table_size(),
                )
            })
            .collect()
    }

    /// Word embedding plus (optionally) sinusoidal positions, `[B*m x d]`.
    pub fn embed(&self, tape: &mut Tape<'_>, bound: &Bound, inputs: &[Vec<u32>]) -> Result<NodeId> {
        let (b, m) = batch_dims(inputs, self.cfg.vocab_size)?;
        let ids: Vec<usize> = inputs.iter().flatten().map(|&t| t as usize).collect();
        let x = tape.gather_rows(bound.node(self.embedding), ids)?;
        if !self.cfg.positional {
            return Ok(x);
        }
        let pe = tape.constant(tiled_positions(b, m, self.cfg.d_model))?;
        tape.add(x, pe)
    }

    /// Final hidden states `[B*m x d]` before the output projection.
    pub fn encode(&self, tape: &mut Tape<'_>, bound: &Bound, inputs: &[Vec<u32>], mode: &mut Mode<'_>) -> Result<NodeId> {
        let (_, m) = batch_dims(inputs, self.cfg.vocab_size)?;
        if self.cfg.pooling == PoolingMode::ConcatProject && m != self.cfg.seq_len {
            return Err(Error::dim("concat-project", &[self.cfg.seq_len], &[m]));
        }
        let mut hidden = self.embed(tape, bound, inputs)?;
        if self.layers.is_empty() {
            return Ok(hidden);
        }
        let keys = BatchKeys::new(inputs);
        for layer in &self.layers {
            hidden = layer.forward(tape, bound, &keys, hidden, mode)?;
        }
        Ok(hidden)
    }

    pub fn forward(&self, tape: &mut Tape<'_>, bound: &Bound, inputs: &[Vec<u32>], mode: &mut Mode<'_>) -> Result<NodeId> {
        let hidden = self.encode(tape, bound, inputs, mode)?;
        tape.matmul(hidden, bound.node(self.output))
    }
}
