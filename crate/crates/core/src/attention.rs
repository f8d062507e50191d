//! Transformer-encoder baseline: multi-head scaled dot-product attention in a
//! post-norm residual block with a GELU feedforward.

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelKind};
use crate::nn::{batch_dims, tiled_positions, Bound, Mlp2, Mode, ParamId, ParamStore};
use crate::numerics::{NodeId, OpClass, ParamInit, Rng, Scalar, Tape};

const LN_EPS: Scalar = 1e-5;

/// Query, key and value projections of one head, each `[d x d_h]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionHeadParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayerParams {
    pub heads: Vec<AttentionHeadParams>,
    pub wo: ParamId,
    pub ff: Mlp2,
    pub norm1: LayerNormParams,
    pub norm2: LayerNormParams,
    pub dropout: f64,
}

/// `softmax(Q K^T / sqrt(d_h)) V` for one sequence `x: [m x d]`, given the
/// head's already projected `q`, `k`, `v` (each `[m x d_h]`).
fn attend(tape: &mut Tape<'_>, q: NodeId, k: NodeId, v: NodeId) -> Result<NodeId> {
    let d_h = tape.value(q).cols();
    let prev = tape.set_class(OpClass::Attention);
    let out = (|| {
        let scores = tape.matmul_nt(q, k)?;
        let scores = tape.scale(scores, 1.0 / (d_h as Scalar).sqrt())?;
        let weights = tape.softmax_rows(scores)?;
        tape.matmul(weights, v)
    })();
    tape.set_class(prev);
    out
}

/// One attention head over one sequence `x: [m x d]`, returning `[m x d_h]`.
pub fn attention_head_forward(tape: &mut Tape<'_>, bound: &Bound, x: NodeId, head: &AttentionHeadParams) -> Result<NodeId> {
    let q = tape.matmul(x, bound.node(head.wq))?;
    let k = tape.matmul(x, bound.node(head.wk))?;
    let v = tape.matmul(x, bound.node(head.wv))?;
    attend(tape, q, k, v)
}

impl EncoderLayerParams {
    /// Multi-head attention over `batch` stacked sequences of length `m`:
    /// heads concatenated then projected by `wo`. `[B*m x d]` in and out.
    pub fn mha_forward(&self, tape: &mut Tape<'_>, bound: &Bound, x: NodeId, batch: usize, m: usize) -> Result<NodeId> {
        let projected = self
            .heads
            .iter()
            .map(|h| {
                Ok((
                    tape.matmul(x, bound.node(h.wq))?,
                    tape.matmul(x, bound.node(h.wk))?,
                    tape.matmul(x, bound.node(h.wv))?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut per_seq = Vec::with_capacity(batch);
        for b in 0..batch {
            let mut head_outs = Vec::with_capacity(self.heads.len());
            for &(q, k, v) in &projected {
                let (q, k, v) = if batch == 1 {
                    (q, k, v)
                } else {
                    (
                        tape.slice_rows(q, b * m, m)?,
                        tape.slice_rows(k, b * m, m)?,
                        tape.slice_rows(v, b * m, m)?,
                    )
                };
                head_outs.push(attend(tape, q, k, v)?);
            }
            per_seq.push(if head_outs.len() == 1 {
                head_outs[0]
            } else {
                tape.concat_cols(&head_outs)?
            });
        }
        let joined = if per_seq.len() == 1 {
            per_seq[0]
        } else {
            tape.concat_rows(&per_seq)?
        };
        tape.matmul(joined, bound.node(self.wo))
    }

    /// `Y = norm1(X + dropout(mha(X)))`, `Z = norm2(Y + ff(Y))`. The
    /// feedforward MLP ends in its own dropout, which serves as the residual
    /// dropout of the second sub-block.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        bound: &Bound,
        x: NodeId,
        batch: usize,
        m: usize,
        mode: &mut Mode<'_>,
    ) -> Result<NodeId> {
        let attn = self.mha_forward(tape, bound, x, batch, m)?;
        let attn = tape.dropout(attn, self.dropout, mode.rng())?;
        let y = tape.add(x, attn)?;
        let y = tape.layer_norm(y, bound.node(self.norm1.gamma), bound.node(self.norm1.beta), LN_EPS)?;
        let ff = self.ff.forward(tape, bound, y, mode)?;
        let z = tape.add(y, ff)?;
        tape.layer_norm(z, bound.node(self.norm2.gamma), bound.node(self.norm2.beta), LN_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct TransformerModel {
    cfg: ModelConfig,
    store: ParamStore,
    pub embedding: ParamId,
    pub layers: Vec<EncoderLayerParams>,
    pub output: ParamId,
}

impl TransformerModel {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        if cfg.kind != ModelKind::Transformer {
            return Err(Error::Config("TransformerModel needs kind = transformer".into()));
        }
        cfg.validate()?;
        let mut rng = Rng::new(cfg.init_seed);
        let mut store = ParamStore::new();
        let d = cfg.d_model;
        let d_h = d / cfg.heads;
        let embedding = store.init("embed", &[cfg.vocab_size, d], ParamInit::UniformScaled, &mut rng);
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let heads = (0..cfg.heads)
                .map(|h| {
                    let p = format!("layer{l}.head{h}");
                    let mut w = |name: &str| store.init(format!("{p}.{name}"), &[d, d_h], ParamInit::UniformScaled, &mut rng);
                    AttentionHeadParams {
                        wq: w("wq"),
                        wk: w("wk"),
                        wv: w("wv"),
                    }
                })
                .collect();
            let wo = store.init(format!("layer{l}.wo"), &[d, d], ParamInit::UniformScaled, &mut rng);
            let ff = Mlp2::new(&mut store, &format!("layer{l}.ff"), (d, cfg.d_hidden, d), cfg.dropout, &mut rng);
            let mut norm = |name: &str| LayerNormParams {
                gamma: store.init(format!("layer{l}.{name}.gamma"), &[d], ParamInit::Ones, &mut rng),
                beta: store.init(format!("layer{l}.{name}.beta"), &[d], ParamInit::Zeros, &mut rng),
            };
            let norm1 = norm("norm1");
            let norm2 = norm("norm2");
            layers.push(EncoderLayerParams {
                heads,
                wo,
                ff,
                norm1,
                norm2,
                dropout: cfg.dropout,
            });
        }
        let output = store.init("output", &[d, cfg.vocab_size], ParamInit::UniformScaled, &mut rng);
        Ok(TransformerModel {
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

    pub fn forward(&self, tape: &mut Tape<'_>, bound: &Bound, inputs: &[Vec<u32>], mode: &mut Mode<'_>) -> Result<NodeId> {
        let (b, m) = batch_dims(inputs, self.cfg.vocab_size)?;
        let mut x = self.embed(tape, bound, inputs)?;
        for layer in &self.layers {
            x = layer.forward(tape, bound, x, b, m, mode)?;
        }
        tape.matmul(x, bound.node(self.output))
    }
}

#[cfg(all(test, not(feature = "f32")))]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn cfg(heads: usize, layers: usize) -> ModelConfig {
        ModelConfig {
            kind: ModelKind::Transformer,
            vocab_size: 9,
            layers,
            heads,
            d_model: 4,
            d_hidden: 6,
            seq_len: 5,
            dropout: 0.0,
            init_seed: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn heads_must_divide_width() {
        assert!(matches!(TransformerModel::new(&cfg(3, 1)), Err(Error::Config(_))));
    }

    #[test]
    fn single_token_returns_value_row() {
        let model = TransformerModel::new(&cfg(2, 1)).unwrap();
        let store = model.params();
        let head = &model.layers[0].heads[0];
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape).unwrap();
        let x = tape.constant(Tensor::new(vec![1, 4], vec![0.3, -1.0, 2.0, 0.5]).unwrap()).unwrap();
        let out = attention_head_forward(&mut tape, &bound, x, head).unwrap();
        let v = crate::numerics::matmul(tape.value(x), store.get(head.wv)).unwrap();
        assert_eq!(tape.value(out), &v);
    }

    #[test]
    fn shape_is_preserved() {
        let model = TransformerModel::new(&cfg(2, 2)).unwrap();
        for m in [1usize, 5, 16] {
            let inputs = vec![(0..m as u32).map(|t| 2 + t % 7).collect::<Vec<_>>(); 2];
            let mut tape = Tape::new();
            let bound = model.params().bind(&mut tape).unwrap();
            let out = model.forward(&mut tape, &bound, &inputs, &mut Mode::Eval).unwrap();
            assert_eq!(tape.value(out).shape(), &[2 * m, 9]);
        }
    }
}
