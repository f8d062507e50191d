//! Parameter storage and the building blocks shared by both models.

use crate::error::{Error, Result};
use crate::numerics::{NodeId, ParamInit, Rng, Scalar, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn init(&mut self, name: impl Into<String>, shape: &[usize], init: ParamInit, rng: &mut Rng) -> ParamId {
        let t = init.build(shape, rng);
        self.add(name, t)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Registers every parameter on `tape` by reference.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> Result<Bound> {
        self.tensors
            .iter()
            .map(|t| tape.param(t))
            .collect::<Result<Vec<_>>>()
            .map(Bound)
    }

    /// Replaces all values, checking names and shapes line up.
    pub fn load_values(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        if named.len() != self.tensors.len() {
            return Err(Error::Malformed(format!(
                "expected {} parameters, found {}",
                self.tensors.len(),
                named.len()
            )));
        }
        for (i, (name, t)) in named.into_iter().enumerate() {
            if name != self.names[i] {
                return Err(Error::Malformed(format!("expected parameter {}, found {name}", self.names[i])));
            }
            if t.shape() != self.tensors[i].shape() {
                return Err(Error::dim("load_values", self.tensors[i].shape(), t.shape()));
            }
            self.tensors[i] = t;
        }
        Ok(())
    }
}

/// Tape nodes of a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<NodeId>);

impl Bound {
    pub fn from_nodes(nodes: Vec<NodeId>) -> Self {
        Bound(nodes)
    }

    pub fn node(&self, id: ParamId) -> NodeId {
        self.0[id.0]
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.0
    }
}

/// Forward-pass mode. Training carries the dropout source.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut Rng),
}

impl Mode<'_> {
    pub fn rng(&mut self) -> Option<&mut Rng> {
        match self {
            Mode::Eval => None,
            Mode::Train(rng) => Some(rng),
        }
    }

    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Two bias-free linear maps with GELU between them:
/// `dropout(dropout(gelu(x W0)) W1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp2 {
    pub w0: ParamId,
    pub w1: ParamId,
    pub dropout: f64,
}

impl Mlp2 {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dims: (usize, usize, usize),
        dropout: f64,
        rng: &mut Rng,
    ) -> Self {
        let (d_in, d1, d2) = dims;
        Mlp2 {
            w0: store.init(format!("{prefix}.w0"), &[d_in, d1], ParamInit::UniformScaled, rng),
            w1: store.init(format!("{prefix}.w1"), &[d1, d2], ParamInit::UniformScaled, rng),
            dropout,
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, bound: &Bound, x: NodeId, mode: &mut Mode<'_>) -> Result<NodeId> {
        let h = tape.matmul(x, bound.node(self.w0))?;
        let h = tape.gelu(h)?;
        let h = tape.dropout(h, self.dropout, mode.rng())?;
        let y = tape.matmul(h, bound.node(self.w1))?;
        tape.dropout(y, self.dropout, mode.rng())
    }

    pub fn input_width(&self, store: &ParamStore) -> usize {
        store.get(self.w0).rows()
    }
}

/// Sinusoidal position table `[m x d]`: `sin(p / 10000^(2i/d))` in even
/// columns, the matching cosine in odd columns.
pub fn sinusoidal_positions(m: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; m * d];
    for p in 0..m {
        for i in (0..d).step_by(2) {
            let freq = (10_000f64).powf(-(i as f64) / d as f64);
            let angle = p as f64 * freq;
            data[p * d + i] = angle.sin() as Scalar;
            if i + 1 < d {
                data[p * d + i + 1] = angle.cos() as Scalar;
            }
        }
    }
    Tensor::new(vec![m, d], data).expect("shape matches data")
}

/// Position table tiled over `batch` sequences, `[batch*m x d]`.
pub fn tiled_positions(batch: usize, m: usize, d: usize) -> Tensor {
    let one = sinusoidal_positions(m, d);
    let mut data = Vec::with_capacity(batch * m * d);
    for _ in 0..batch {
        data.extend_from_slice(one.data());
    }
    Tensor::new(vec![batch * m, d], data).expect("shape matches data")
}

/// Validates a `[B x m]` batch of token ids and returns `(B, m)`.
pub fn batch_dims(inputs: &[Vec<u32>], vocab_size: usize) -> Result<(usize, usize)> {
    let m = inputs.first().map_or(0, Vec::len);
    if m == 0 {
        return Err(Error::Contract("forward needs at least one non-empty sequence".into()));
    }
    for row in inputs {
        if row.len() != m {
            return Err(Error::dim("forward", &[inputs.len(), m], &[row.len()]));
        }
        if let Some(&bad) = row.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::Index {
                op: "forward",
                index: bad as usize,
                bound: vocab_size,
            });
        }
    }
    Ok((inputs.len(), m))
}
