//! Corpus ingestion, vocabulary, fixed-length chunking and MLM masking.
//!
//! Token-id conventions: 0 is padding, 1 is the mask token, corpus words
//! start at 2 in descending frequency order (ties broken lexicographically).

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Rng;

pub const PAD_ID: u32 = 0;
pub const MASK_ID: u32 = 1;
pub const FIRST_WORD_ID: u32 = 2;
/// Target value at positions that carry no prediction.
pub const IGNORE: u32 = u32::MAX;

const PAD_TOKEN: &str = "<pad>";
const MASK_TOKEN: &str = "<mask>";
const UNK_TOKEN: &str = "<unk>";

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    ids: HashMap<String, u32>,
    words: Vec<String>,
}

impl Vocab {
    /// Frequency-ordered vocabulary of a whitespace-tokenized corpus.
    pub fn build<'a, I>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for t in tokens {
            *counts.entry(t).or_default() += 1;
        }
        if counts.is_empty() {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut entries: Vec<(&str, u64)> = counts.into_iter().collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let words: Vec<String> = entries.into_iter().map(|(w, _)| w.to_owned()).collect();
        Ok(Self::from_words(words))
    }

    fn from_words(words: Vec<String>) -> Self {
        let ids = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), FIRST_WORD_ID + i as u32))
            .collect();
        Vocab { ids, words }
    }

    /// Number of corpus words (excludes the two reserved ids).
    pub fn num_words(&self) -> usize {
        self.words.len()
    }

    /// Total id space including PAD and MASK.
    pub fn total_size(&self) -> usize {
        self.words.len() + FIRST_WORD_ID as usize
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.ids.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        match id {
            PAD_ID => Some(PAD_TOKEN),
            MASK_ID => Some(MASK_TOKEN),
            _ => self.words.get((id - FIRST_WORD_ID) as usize).map(String::as_str),
        }
    }

    /// Maps tokens to ids; unknown words fall back to `<unk>` when the
    /// vocabulary has it.
    pub fn encode<'a, I>(&self, tokens: I) -> Result<Vec<u32>>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let unk = self.id(UNK_TOKEN);
        tokens
            .into_iter()
            .map(|t| {
                self.id(t)
                    .or(unk)
                    .ok_or_else(|| Error::Data(format!("token {t:?} is not in the vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Vec<&str>> {
        ids.iter()
            .map(|&id| {
                self.word(id)
                    .ok_or_else(|| Error::Data(format!("id {id} is not in the vocabulary")))
            })
            .collect()
    }

    /// Two-column `word<TAB>id` listing of corpus words.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> Result<()> {
        for (i, w) in self.words.iter().enumerate() {
            writeln!(out, "{w}\t{}", FIRST_WORD_ID as usize + i)?;
        }
        Ok(())
    }

    pub fn save_tsv(&self, path: &Path) -> Result<()> {
        let f = fs::File::create(path)?;
        self.write_tsv(std::io::BufWriter::new(f))
    }

    pub fn load_tsv(path: &Path) -> Result<Self> {
        let reader = BufReader::new(fs::File::open(path)?);
        let mut words = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            let (word, id) = line
                .split_once('\t')
                .ok_or_else(|| Error::Data(format!("vocab line {} has no tab", n + 1)))?;
            let id: u32 = id
                .trim()
                .parse()
                .map_err(|_| Error::Data(format!("vocab line {} has a bad id", n + 1)))?;
            if id != FIRST_WORD_ID + words.len() as u32 {
                return Err(Error::Data(format!("vocab line {} has id {id} out of sequence", n + 1)));
            }
            words.push(word.to_owned());
        }
        if words.is_empty() {
            return Err(Error::Data("empty vocabulary file".into()));
        }
        Ok(Self::from_words(words))
    }
}

/// Whitespace tokens of a UTF-8 text file.
pub fn read_tokens(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    Ok(text.split_whitespace().map(str::to_owned).collect())
}

/// Contiguous non-overlapping windows of length `m`; the last partial window
/// is right-padded with `PAD_ID`.
pub fn chunk_sequences(ids: &[u32], m: usize) -> Result<Vec<Vec<u32>>> {
    if m < 2 {
        return Err(Error::Config(format!("sequence length {m} must be at least 2")));
    }
    Ok(ids
        .chunks(m)
        .map(|c| {
            let mut seq = c.to_vec();
            seq.resize(m, PAD_ID);
            seq
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub seq_len: usize,
    pub batch_size: usize,
    /// Fraction of real words masked in a selected sequence.
    pub mask_fraction: f64,
    /// Probability that a sequence is selected for masking at all.
    pub masked_sequence_fraction: f64,
    pub shuffle_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seq_len: 128,
            batch_size: 32,
            mask_fraction: 0.15,
            masked_sequence_fraction: 0.90,
            shuffle_seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_fraction > 0.0 && self.mask_fraction < 1.0) {
            return Err(Error::Config(format!("mask fraction {} outside (0, 1)", self.mask_fraction)));
        }
        if !(0.0..=1.0).contains(&self.masked_sequence_fraction) {
            return Err(Error::Config(format!(
                "masked-sequence fraction {} outside [0, 1]",
                self.masked_sequence_fraction
            )));
        }
        if self.seq_len < 2 {
            return Err(Error::Config(format!("sequence length {} must be at least 2", self.seq_len)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// One masked sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedRow {
    pub inputs: Vec<u32>,
    /// Original id at masked positions, `IGNORE` elsewhere.
    pub targets: Vec<u32>,
    /// Ascending masked positions.
    pub mask_positions: Vec<usize>,
}

impl MaskedRow {
    pub fn pad_mask(&self) -> Vec<bool> {
        self.inputs.iter().map(|&t| t == PAD_ID).collect()
    }
}

/// With probability `masked_sequence_fraction` the sequence is selected and
/// `max(1, round(mask_fraction * n_real))` real-word positions, drawn without
/// replacement, are replaced by `MASK_ID`. Padding is never masked.
pub fn apply_mlm_mask(seq: &[u32], cfg: &DataConfig, rng: &mut Rng) -> Result<MaskedRow> {
    let real: Vec<usize> = seq
        .iter()
        .enumerate()
        .filter(|(_, &t)| t >= FIRST_WORD_ID)
        .map(|(i, _)| i)
        .collect();
    if real.is_empty() {
        return Err(Error::Data("sequence has no real words to mask".into()));
    }
    let mut row = MaskedRow {
        inputs: seq.to_vec(),
        targets: vec![IGNORE; seq.len()],
        mask_positions: Vec::new(),
    };
    if !rng.bernoulli(cfg.masked_sequence_fraction) {
        return Ok(row);
    }
    let count = ((cfg.mask_fraction * real.len() as f64).round() as usize).clamp(1, real.len());
    let mut picked: Vec<usize> = rng
        .sample_indices(real.len(), count)
        .into_iter()
        .map(|k| real[k])
        .collect();
    picked.sort_unstable();
    for &p in &picked {
        row.targets[p] = seq[p];
        row.inputs[p] = MASK_ID;
    }
    row.mask_positions = picked;
    Ok(row)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedBatch {
    pub rows: Vec<MaskedRow>,
}

impl MaskedBatch {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.rows.first().map_or(0, |r| r.inputs.len())
    }

    pub fn inputs(&self) -> Vec<Vec<u32>> {
        self.rows.iter().map(|r| r.inputs.clone()).collect()
    }

    pub fn num_masked(&self) -> usize {
        self.rows.iter().map(|r| r.mask_positions.len()).sum()
    }

    /// Targets flattened row-major over `[B x m]`.
    pub fn flat_targets(&self) -> Vec<u32> {
        self.rows.iter().flat_map(|r| r.targets.iter().copied()).collect()
    }
}

/// Immutable set of fixed-length sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct MlmDataset {
    pub sequences: Vec<Vec<u32>>,
}

impl MlmDataset {
    pub fn from_ids(ids: &[u32], m: usize) -> Result<Self> {
        Ok(MlmDataset {
            sequences: chunk_sequences(ids, m)?,
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Masks every sequence once under `seed`, in dataset order. Used for
    /// evaluation so every model sees the same masked set.
    pub fn fixed_masked_batches(&self, cfg: &DataConfig, seed: u64) -> Result<Vec<MaskedBatch>> {
        cfg.validate()?;
        let mut rng = Rng::new(seed);
        let rows = self
            .sequences
            .iter()
            .map(|s| apply_mlm_mask(s, cfg, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(rows
            .chunks(cfg.batch_size)
            .map(|c| MaskedBatch { rows: c.to_vec() })
            .collect())
    }
}

/// Epoch-shuffled batching with masking applied as batches are drawn.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batcher {
    epoch: u64,
    cursor: usize,
    order: Vec<usize>,
}

/// Serializable position of a [`Batcher`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatcherState {
    pub epoch: u64,
    pub cursor: usize,
}

impl Batcher {
    pub fn new(dataset: &MlmDataset, cfg: &DataConfig) -> Result<Self> {
        Self::resume(dataset, cfg, BatcherState { epoch: 0, cursor: 0 })
    }

    pub fn resume(dataset: &MlmDataset, cfg: &DataConfig, state: BatcherState) -> Result<Self> {
        cfg.validate()?;
        if dataset.is_empty() {
            return Err(Error::Data("cannot batch an empty dataset".into()));
        }
        Ok(Batcher {
            epoch: state.epoch,
            cursor: state.cursor,
            order: epoch_order(dataset.len(), cfg.shuffle_seed, state.epoch),
        })
    }

    pub fn state(&self) -> BatcherState {
        BatcherState {
            epoch: self.epoch,
            cursor: self.cursor,
        }
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Next `batch_size` sequences of the current epoch (the final batch of
    /// an epoch may be short), masked with `rng`.
    pub fn next_batch(&mut self, dataset: &MlmDataset, cfg: &DataConfig, rng: &mut Rng) -> Result<MaskedBatch> {
        if self.cursor >= self.order.len() {
            self.epoch += 1;
            self.cursor = 0;
            self.order = epoch_order(dataset.len(), cfg.shuffle_seed, self.epoch);
        }
        let end = (self.cursor + cfg.batch_size).min(self.order.len());
        let rows = self.order[self.cursor..end]
            .iter()
            .map(|&i| apply_mlm_mask(&dataset.sequences[i], cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        self.cursor = end;
        Ok(MaskedBatch { rows })
    }
}

/// Permutation of `0..n` for one epoch, a pure function of `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    Rng::with_stream(seed, epoch).shuffle(&mut order);
    order
}

/// Sequences where each token follows its predecessor cyclically:
/// `w[t+1] = 2 + ((w[t] - 2 + 1) mod vocab)`, from a random start. Every token
/// is determined by any of its neighbours.
pub fn arithmetic_cycles(vocab: usize, count: usize, m: usize, rng: &mut Rng) -> Vec<Vec<u32>> {
    (0..count)
        .map(|_| {
            let start = rng.index(vocab);
            (0..m)
                .map(|t| FIRST_WORD_ID + ((start + t) % vocab) as u32)
                .collect()
        })
        .collect()
}
