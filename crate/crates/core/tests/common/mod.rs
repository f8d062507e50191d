//! Property checks shared by the property suite and the acceptance run. Each
//! check takes the generated inputs and fails the case with a message.
#![allow(dead_code)]

use pairconnect::hashing::PairHasher;
use pairconnect::mlmdata::{apply_mlm_mask, DataConfig, MaskedBatch, IGNORE};
use pairconnect::model::{Model, ModelConfig, ModelKind, PoolingMode};
use pairconnect::nn::Mode;
use pairconnect::numerics::{gather_rows, matmul, softmax_rows, Rng, Scalar, Tape, Tensor};
use pairconnect::pairconnect::{pair_lookup, BatchKeys};
use pairconnect::training::mlm_loss;
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

pub const CASES: u32 = 128;

pub type Check = Result<(), TestCaseError>;

pub fn random_tensor(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.symmetric(scale)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

pub fn small_pairconnect(pooling: PoolingMode, positional: bool, seq_len: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        kind: ModelKind::PairConnect,
        vocab_size: 23,
        layers: 2,
        heads: 2,
        d_model: 6,
        d_hidden: 7,
        pair_dim: 5,
        pair_hidden: 4,
        table_size: 37,
        pooling,
        dropout: 0.0,
        seq_len,
        positional,
        hash_seed: seed as u32,
        init_seed: seed,
    }
}

/// `|a - b| <= 1e-12 * max(1, |a|, |b|)` element-wise.
pub fn close(a: &[Scalar], b: &[Scalar]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(&x, &y)| (x - y).abs() <= 1e-12 * x.abs().max(y.abs()).max(1.0))
}

pub fn sum_pooling() -> impl Strategy<Value = PoolingMode> {
    prop_oneof![Just(PoolingMode::PoolThenMlp), Just(PoolingMode::PerPairMlp)]
}

// ---- softmax normalization ----

pub fn softmax_inputs() -> impl Strategy<Value = (usize, usize, f64, u64)> {
    (1usize..6, 1usize..40, prop_oneof![Just(1.0f64), Just(50.0), Just(1e4)], any::<u64>())
}

pub fn softmax_normalized((rows, cols, magnitude, seed): (usize, usize, f64, u64)) -> Check {
    let mut rng = Rng::new(seed);
    let x = random_tensor(rows, cols, magnitude, &mut rng);
    let p = softmax_rows(&x).unwrap();
    for r in 0..rows {
        let row = p.row(r);
        prop_assert!(row.iter().all(|&v| v >= 0.0));
        let s: Scalar = row.iter().sum();
        prop_assert!((s - 1.0).abs() <= 1e-12, "row {} sums to {}", r, s);
    }
    Ok(())
}

// ---- gather backward vs one-hot transpose ----

pub fn scatter_inputs() -> impl Strategy<Value = (usize, usize, Vec<usize>, u64)> {
    (1usize..=16, 1usize..=8, prop::collection::vec(0usize..1000, 0..24), any::<u64>())
}

pub fn scatter_add_matches_one_hot((k, d, picks, seed): (usize, usize, Vec<usize>, u64)) -> Check {
    let mut rng = Rng::new(seed);
    let table = random_tensor(k, d, 1.0, &mut rng);
    let indices: Vec<usize> = picks.iter().map(|p| p % k).collect();
    let upstream = random_tensor(indices.len(), d, 1.0, &mut rng);

    let mut tape = Tape::new();
    let t = tape.param(&table).unwrap();
    let g = tape.gather_rows(t, indices.clone()).unwrap();
    let c = tape.constant(upstream.clone()).unwrap();
    let weighted = tape.mul(g, c).unwrap();
    let loss = tape.sum(weighted).unwrap();
    let grads = tape.backward(loss).unwrap();
    let got = grads.get(t).cloned().unwrap_or_else(|| Tensor::zeros(&[k, d]));

    // E is [n x K] with E[r, indices[r]] = 1; the oracle is E^T * upstream.
    let mut e = Tensor::zeros(&[indices.len(), k]);
    for (r, &i) in indices.iter().enumerate() {
        e.row_mut(r)[i] = 1.0;
    }
    let mut oracle = Tensor::zeros(&[k, d]);
    for kk in 0..k {
        for j in 0..d {
            let mut acc = 0.0;
            for r in 0..indices.len() {
                acc += e.at(r, kk) * upstream.at(r, j);
            }
            oracle.row_mut(kk)[j] = acc;
        }
    }
    prop_assert!(got.max_abs_diff(&oracle) <= 1e-12);
    Ok(())
}

// ---- summed lookups vs one-hot product ----

pub fn one_hot_inputs() -> impl Strategy<Value = (usize, usize, Vec<usize>, u64)> {
    (2usize..=32, 1usize..=16, prop::collection::vec(0usize..1000, 1..40), any::<u64>())
}

/// Largest absolute difference between the summed embedding rows of `ids`
/// and the count vector of `ids` multiplied into `w`.
pub fn one_hot_gap(w: &Tensor, ids: &[usize]) -> Scalar {
    let (u, d) = (w.rows(), w.cols());
    let gathered = gather_rows(w, ids).unwrap();
    let mut summed = vec![0.0; d];
    for r in 0..ids.len() {
        for (s, v) in summed.iter_mut().zip(gathered.row(r)) {
            *s += v;
        }
    }
    let mut counts = Tensor::zeros(&[1, u]);
    for &i in ids {
        counts.row_mut(0)[i] += 1.0;
    }
    let product = matmul(&counts, w).unwrap();
    summed.iter().zip(product.data()).map(|(a, b)| (a - b).abs()).fold(0.0, Scalar::max)
}

pub fn one_hot_equivalence((u, d, words, seed): (usize, usize, Vec<usize>, u64)) -> Check {
    let mut rng = Rng::new(seed);
    let w = random_tensor(u, d, 1.0, &mut rng);
    let ids: Vec<usize> = words.iter().map(|x| x % u).collect();
    let gap = one_hot_gap(&w, &ids);
    prop_assert!(gap <= 1e-12, "gap {}", gap);
    Ok(())
}

// ---- context permutation ----

pub type PermInputs = (PoolingMode, Vec<u32>, usize, u64, u64);

pub fn permutation_inputs() -> impl Strategy<Value = PermInputs> {
    (sum_pooling(), prop::collection::vec(2u32..23, 3..8), 0usize..8, any::<u64>(), 0u64..1000)
}

/// `tokens` with every position except `i` shuffled.
fn shuffle_context(tokens: &[u32], i: usize, seed: u64) -> Vec<u32> {
    let mut order: Vec<usize> = (0..tokens.len()).filter(|&j| j != i).collect();
    Rng::new(seed).shuffle(&mut order);
    let mut out = tokens.to_vec();
    for (slot, &src) in (0..tokens.len()).filter(|&j| j != i).zip(&order) {
        out[slot] = tokens[src];
    }
    out
}

/// Without positional encoding the whole model output of token `i` ignores
/// the order of the other tokens.
pub fn model_permutation((pooling, tokens, anchor, shuffle_seed, seed): PermInputs) -> Check {
    let m = tokens.len();
    let i = anchor % m;
    let model = Model::new(&small_pairconnect(pooling, false, m, seed)).unwrap();
    let permuted = shuffle_context(&tokens, i, shuffle_seed);
    let a = model.logits(&[tokens]).unwrap();
    let b = model.logits(&[permuted]).unwrap();
    prop_assert!(close(a.row(i), b.row(i)), "{:?} vs {:?}", a.row(i), b.row(i));
    Ok(())
}

/// With positional encoding only the pair path keeps the property.
pub fn pair_path_permutation((pooling, tokens, anchor, shuffle_seed, seed): PermInputs) -> Check {
    let m = tokens.len();
    let i = anchor % m;
    let model = Model::new(&small_pairconnect(pooling, true, m, seed)).unwrap();
    let Model::PairConnect(pc) = &model else { unreachable!() };
    let head = &pc.layers[0].heads[0];
    let pooled = |seq: Vec<u32>| -> Tensor {
        let mut tape = Tape::new();
        let bound = pc.params().bind(&mut tape).unwrap();
        let keys = BatchKeys::new(&[seq]);
        let out = head.forward(&mut tape, &bound, &keys, pooling, &mut Mode::Eval).unwrap();
        tape.value(out).clone()
    };
    let permuted = shuffle_context(&tokens, i, shuffle_seed);
    let (a, b) = (pooled(tokens), pooled(permuted));
    prop_assert!(close(a.row(i), b.row(i)));
    Ok(())
}

// ---- ordered-pair asymmetry ----

pub fn ordered_pair_inputs() -> impl Strategy<Value = (u32, u32, u32)> {
    (2u32..10_000, 2u32..10_000, any::<u32>())
}

pub fn ordered_pair_asymmetry((a, b, seed): (u32, u32, u32)) -> Check {
    prop_assume!(a != b);
    let hasher = PairHasher::new(seed, 1024).unwrap();
    prop_assume!(hasher.pair_index(a, b) != hasher.pair_index(b, a));
    // Row r of the table is (r, r + 0.5), so distinct slots give distinct embeddings.
    let data = (0..1024 * 2).map(|v| (v / 2) as Scalar + if v % 2 == 1 { 0.5 } else { 0.0 }).collect();
    let table = Tensor::new(vec![1024, 2], data).unwrap();
    let rows = pair_lookup(&[a, b], &table, &hasher).unwrap();
    // Row (0, 1) holds the (a, b) embedding, row (1, 0) the (b, a) one.
    prop_assert_ne!(rows.row(1), rows.row(2));
    Ok(())
}

// ---- loss gradient at unmasked positions ----

pub fn loss_inputs() -> impl Strategy<Value = (usize, usize, usize, u64)> {
    (1usize..4, 2usize..10, 3usize..12, any::<u64>())
}

pub fn random_masked_batch(batch: usize, m: usize, u: usize, selected: f64, rng: &mut Rng) -> MaskedBatch {
    let cfg = DataConfig {
        seq_len: m,
        batch_size: batch,
        mask_fraction: 0.3,
        masked_sequence_fraction: selected,
        shuffle_seed: 0,
    };
    let rows = (0..batch)
        .map(|_| {
            let seq: Vec<u32> = (0..m).map(|_| 2 + rng.index(u - 2) as u32).collect();
            apply_mlm_mask(&seq, &cfg, rng).unwrap()
        })
        .collect();
    MaskedBatch { rows }
}

pub fn unmasked_zero_gradient((batch, m, u, seed): (usize, usize, usize, u64)) -> Check {
    let mut rng = Rng::new(seed);
    let mb = random_masked_batch(batch, m, u, 0.7, &mut rng);
    let logits = random_tensor(batch * m, u, 3.0, &mut rng);
    let mut tape = Tape::new();
    let l = tape.param(&logits).unwrap();
    let loss = mlm_loss(&mut tape, l, &mb).unwrap();
    let grads = tape.backward(loss).unwrap();
    let g = grads.get(l).cloned().unwrap_or_else(|| Tensor::zeros(&[batch * m, u]));
    for (r, &t) in mb.flat_targets().iter().enumerate() {
        if t == IGNORE {
            prop_assert!(g.row(r).iter().all(|&v| v == 0.0), "row {}: {:?}", r, g.row(r));
        } else {
            prop_assert!(g.row(r).iter().any(|&v| v != 0.0));
        }
    }
    Ok(())
}
