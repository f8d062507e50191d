//! Binary checkpoints. The byte layout is documented in
//! `docs/checkpoint-format.md`; every integer and float is little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::mlmdata::{Batcher, BatcherState};
use crate::model::Model;
use crate::numerics::{Rng, RngState, Scalar, Tensor};
use crate::training::adam::AdamState;
use crate::training::config::TrainConfig;
use crate::training::trainer::{TrainData, Trainer};

pub const MAGIC: [u8; 8] = *b"PAIRCKPT";
pub const VERSION: u32 = 1;

const FLAG_OPTIMIZER: u8 = 1;
const SCALAR_BYTES: u8 = std::mem::size_of::<Scalar>() as u8;

/// Hash metadata of one pair table, stored so that lookups can be checked to
/// reproduce exactly after loading.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TableRecord {
    pub name: String,
    pub seed: u32,
    pub table_size: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub batcher: BatcherState,
    pub rngs: Vec<(String, RngState)>,
    pub tables: Vec<TableRecord>,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Option<AdamState>,
}

impl Checkpoint {
    /// Model weights only, without optimizer or data position.
    pub fn from_model(model: &Model, config: &TrainConfig) -> Self {
        Checkpoint {
            config: TrainConfig {
                model: model.config().clone(),
                ..config.clone()
            },
            step: 0,
            batcher: BatcherState { epoch: 0, cursor: 0 },
            rngs: Vec::new(),
            tables: table_records(model),
            params: named_params(model),
            optimizer: None,
        }
    }

    pub fn from_trainer(trainer: &Trainer) -> Self {
        Checkpoint {
            config: trainer.cfg.clone(),
            step: trainer.step,
            batcher: trainer.batcher.state(),
            rngs: vec![
                ("mask".to_string(), trainer.mask_rng.state()),
                ("dropout".to_string(), trainer.dropout_rng.state()),
            ],
            tables: table_records(&trainer.model),
            params: named_params(&trainer.model),
            optimizer: Some(trainer.adam.clone()),
        }
    }

    /// Rebuilds the model and checks that its pair tables hash exactly as
    /// recorded.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(&self.config.model)?;
        let expected = table_records(&model);
        if expected != self.tables {
            return Err(Error::Malformed(format!(
                "pair-table hash metadata {:?} does not match the configuration's {:?}",
                self.tables, expected
            )));
        }
        model.params_mut().load_values(self.params.clone())?;
        Ok(model)
    }

    /// Restores a training run exactly where it was saved.
    pub fn to_trainer(&self, data: &TrainData) -> Result<Trainer> {
        let model = self.to_model()?;
        let adam = self
            .optimizer
            .clone()
            .ok_or_else(|| Error::Malformed("checkpoint has no optimizer state".into()))?;
        if adam.m.len() != model.params().len() {
            return Err(Error::Malformed("optimizer state does not match the parameters".into()));
        }
        let rng = |name: &str| {
            self.rngs
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, s)| Rng::from_state(*s))
                .ok_or_else(|| Error::Malformed(format!("checkpoint has no {name} rng")))
        };
        Ok(Trainer {
            batcher: Batcher::resume(&data.train, &self.config.data_config(), self.batcher)?,
            cfg: self.config.clone(),
            model,
            adam,
            mask_rng: rng("mask")?,
            dropout_rng: rng("dropout")?,
            step: self.step,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(&MAGIC);
        w.u32(VERSION);
        w.u8(SCALAR_BYTES);
        w.u8(if self.optimizer.is_some() { FLAG_OPTIMIZER } else { 0 });
        w.str(&self.config.to_text());
        w.u64(self.step);
        w.u64(self.batcher.epoch);
        w.u64(self.batcher.cursor as u64);
        w.u32(self.rngs.len() as u32);
        for (name, s) in &self.rngs {
            w.str(name);
            w.u64(s.seed);
            w.u64(s.stream);
            w.bytes(&s.word_pos.to_le_bytes());
        }
        w.u32(self.tables.len() as u32);
        for t in &self.tables {
            w.str(&t.name);
            w.u32(t.seed);
            w.u64(t.table_size);
        }
        w.u32(self.params.len() as u32);
        for (name, t) in &self.params {
            w.str(name);
            w.u32(t.ndim() as u32);
            for &d in t.shape() {
                w.u64(d as u64);
            }
            w.scalars(t.data());
        }
        if let Some(adam) = &self.optimizer {
            w.u64(adam.t);
            for x in [adam.lr, adam.beta1, adam.beta2, adam.eps] {
                w.bytes(&x.to_le_bytes());
            }
            for t in adam.m.iter().chain(&adam.v) {
                w.scalars(t.data());
            }
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let width = r.u8("scalar width")?;
        if width != SCALAR_BYTES {
            return Err(Error::Malformed(format!(
                "checkpoint stores {width}-byte scalars, this build uses {SCALAR_BYTES}"
            )));
        }
        let flags = r.u8("flags")?;
        if flags & !FLAG_OPTIMIZER != 0 {
            return Err(Error::Malformed(format!("unknown flags {flags:#x}")));
        }
        let config = TrainConfig::from_text(&r.str("config")?)
            .map_err(|e| Error::Malformed(format!("config echo: {e}")))?;
        let step = r.u64("step")?;
        let batcher = BatcherState {
            epoch: r.u64("batcher")?,
            cursor: r.usize("batcher")?,
        };
        let n_rngs = r.u32("rng count")?;
        let mut rngs = Vec::new();
        for _ in 0..n_rngs {
            let name = r.str("rng name")?;
            let seed = r.u64("rng state")?;
            let stream = r.u64("rng state")?;
            let word_pos = u128::from_le_bytes(r.take(16, "rng state")?.try_into().expect("16 bytes"));
            rngs.push((name, RngState { seed, stream, word_pos }));
        }
        let n_tables = r.u32("table count")?;
        let mut tables = Vec::new();
        for _ in 0..n_tables {
            tables.push(TableRecord {
                name: r.str("table name")?,
                seed: r.u32("table seed")?,
                table_size: r.u64("table size")?,
            });
        }
        let n_params = r.u32("parameter count")?;
        let mut params = Vec::new();
        for _ in 0..n_params {
            let name = r.str("parameter name")?;
            let ndim = r.u32("parameter shape")? as usize;
            if ndim > 8 {
                return Err(Error::Malformed(format!("parameter {name} has {ndim} dimensions")));
            }
            let shape = (0..ndim).map(|_| r.usize("parameter shape")).collect::<Result<Vec<_>>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Malformed(format!("parameter {name} shape overflows")))?;
            let data = r.scalars(len, "parameter values")?;
            params.push((name, Tensor::new(shape, data)?));
        }
        let optimizer = if flags & FLAG_OPTIMIZER != 0 {
            let t = r.u64("optimizer")?;
            let mut hyper = [0.0f64; 4];
            for h in &mut hyper {
                *h = f64::from_le_bytes(r.take(8, "optimizer")?.try_into().expect("8 bytes"));
            }
            let mut moments = |what| {
                params
                    .iter()
                    .map(|(_, p)| Tensor::new(p.shape().to_vec(), r.scalars(p.len(), what)?))
                    .collect::<Result<Vec<_>>>()
            };
            let m = moments("optimizer first moments")?;
            let v = moments("optimizer second moments")?;
            Some(AdamState {
                lr: hyper[0],
                beta1: hyper[1],
                beta2: hyper[2],
                eps: hyper[3],
                t,
                m,
                v,
            })
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(Error::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            config,
            step,
            batcher,
            rngs,
            tables,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn table_records(model: &Model) -> Vec<TableRecord> {
    model
        .pair_tables()
        .into_iter()
        .map(|(name, seed, k)| TableRecord {
            name,
            seed,
            table_size: k as u64,
        })
        .collect()
}

fn named_params(model: &Model) -> Vec<(String, Tensor)> {
    let store = model.params();
    store.names().iter().cloned().zip(store.tensors().iter().cloned()).collect()
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }

    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }

    fn scalars(&mut self, values: &[Scalar]) {
        self.0.reserve(values.len() * SCALAR_BYTES as usize);
        for v in values {
            self.bytes(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(Error::Truncated(what))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self, what: &'static str) -> Result<usize> {
        let v = self.u64(what)?;
        usize::try_from(v).map_err(|_| Error::Malformed(format!("{what} value {v} does not fit in memory")))
    }

    fn str(&mut self, what: &'static str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Malformed(format!("{what} is not UTF-8")))
    }

    fn scalars(&mut self, n: usize, what: &'static str) -> Result<Vec<Scalar>> {
        let width = SCALAR_BYTES as usize;
        let bytes = self.take(n.checked_mul(width).ok_or(Error::Truncated(what))?, what)?;
        Ok(bytes
            .chunks_exact(width)
            .map(|c| Scalar::from_le_bytes(c.try_into().expect("scalar width")))
            .collect())
    }
}

#[cfg(all(test, not(feature = "f32")))]
mod tests {
    use super::*;
    use crate::model::ModelKind;
    use crate::training::trainer::{prepare_data, MetricsLog};

    fn cfg() -> TrainConfig {
        let mut c = TrainConfig {
            lr: 1e-3,
            batch_size: 4,
            cycle_vocab: 5,
            train_sequences: 10,
            eval_sequences: 4,
            record_wall_time: false,
            ..TrainConfig::default()
        };
        c.model.kind = ModelKind::PairConnect;
        c.model.vocab_size = 7;
        c.model.layers = 1;
        c.model.heads = 2;
        c.model.d_model = 4;
        c.model.d_hidden = 4;
        c.model.pair_dim = 4;
        c.model.pair_hidden = 4;
        c.model.table_size = 16;
        c.model.seq_len = 5;
        c
    }

    fn trained() -> (Trainer, TrainData) {
        let c = cfg();
        let data = prepare_data(&c).unwrap();
        let mut tr = Trainer::new(&c, &data).unwrap();
        tr.train_steps(&data, 3, &mut MetricsLog::default()).unwrap();
        (tr, data)
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let (tr, _) = trained();
        let ck = Checkpoint::from_trainer(&tr);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn header_errors_are_distinct() {
        let (tr, _) = trained();
        let bytes = Checkpoint::from_trainer(&tr).to_bytes();

        let mut bad = bytes.clone();
        bad[0] ^= 0xff;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::BadMagic)));

        let mut bad = bytes.clone();
        bad[8..12].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::VersionMismatch { found: 99, expected: VERSION })
        ));

        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Truncated(_))), "cut {cut}");
        }

        let mut long = bytes;
        long.push(0);
        assert!(matches!(Checkpoint::from_bytes(&long), Err(Error::Malformed(_))));
    }

    #[test]
    fn table_metadata_is_verified() {
        let (tr, _) = trained();
        let mut ck = Checkpoint::from_trainer(&tr);
        ck.tables[1].seed ^= 1;
        assert!(matches!(ck.to_model(), Err(Error::Malformed(_))));
    }

    #[test]
    fn weights_only_checkpoint_restores_model() {
        let (tr, _) = trained();
        let ck = Checkpoint::from_model(&tr.model, &tr.cfg);
        assert!(ck.optimizer.is_none());
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        let model = back.to_model().unwrap();
        assert_eq!(model.params(), tr.model.params());
    }
}
