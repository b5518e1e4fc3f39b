//! Key-value memory addressing, blocked memories, and the shared-private
//! composition used by the multilingual models.
//!
//! A context `c` addresses a memory by `p = softmax(c · kⱼ)` over the key rows
//! and reads `c* = Σ pⱼ vⱼ` from the paired value rows. A blocked memory splits
//! `c` into `n` contiguous segments and addresses one independent block per
//! segment; the read-outs are concatenated.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::params::{Bound, Init, ParamId, ParamStore};
use crate::numerics::{matmul_nt, softmax, Tape, Tensor, Var};
use crate::seq2seq::WEIGHT_INIT;

pub const MEMORY_INIT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryBlock {
    pub keys: ParamId,
    pub values: ParamId,
}

/// A learnable memory of `n_blocks` blocks, each holding `slots_per_block`
/// key/value rows of width `width / n_blocks`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryBank {
    pub name: String,
    pub blocks: Vec<MemoryBlock>,
    pub slots_per_block: usize,
    pub width: usize,
}

impl MemoryBank {
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        total_slots: usize,
        n_blocks: usize,
        seed: u64,
    ) -> Result<Self> {
        if n_blocks == 0 || width % n_blocks != 0 {
            return Err(Error::Config(format!(
                "memory blocks ({n_blocks}) must evenly divide the hidden width ({width})"
            )));
        }
        if total_slots % n_blocks != 0 || total_slots < n_blocks {
            return Err(Error::Config(format!(
                "memory slots ({total_slots}) must be a positive multiple of the block count ({n_blocks})"
            )));
        }
        let slots = total_slots / n_blocks;
        let w = width / n_blocks;
        let init = Init::Uniform(MEMORY_INIT);
        let blocks = (0..n_blocks)
            .map(|i| {
                Ok(MemoryBlock {
                    keys: store.register(&format!("{name}.block{i}.keys"), &[slots, w], init, seed)?,
                    values: store.register(&format!("{name}.block{i}.values"), &[slots, w], init, seed)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(MemoryBank {
            name: name.to_string(),
            blocks,
            slots_per_block: slots,
            width,
        })
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_width(&self) -> usize {
        self.width / self.blocks.len()
    }

    pub fn block_keys<'a>(&self, store: &'a ParamStore, block: usize) -> Result<&'a Tensor> {
        let blk = self
            .blocks
            .get(block)
            .ok_or_else(|| Error::Config(format!("bank `{}` has no block {block}", self.name)))?;
        Ok(store.get(blk.keys))
    }
}

/// Single key-value read: returns `(c*, p)` for `c` (`B × w`) against keys and
/// values (`t × w`); `p` is `B × t`.
pub fn address_single(tape: &mut Tape, c: Var, keys: Var, values: Var) -> Result<(Var, Var)> {
    let (t, w) = tape.value(keys).dims2();
    if tape.value(values).dims2() != (t, w) {
        return Err(Error::shape("address_single", tape.value(keys).shape(), tape.value(values).shape()));
    }
    if tape.value(c).cols() != w {
        return Err(Error::shape("address_single", tape.value(c).shape(), tape.value(keys).shape()));
    }
    let scores = tape.matmul_nt(c, keys)?;
    let p = tape.softmax_rows(scores, None)?;
    let out = tape.matmul(p, values)?;
    Ok((out, p))
}

/// Blocked read: segment `i` of `c` addresses block `i`; returns the
/// concatenated read-out and each block's weights.
pub fn address_blocked(tape: &mut Tape, b: &Bound, bank: &MemoryBank, c: Var) -> Result<(Var, Vec<Var>)> {
    let d = tape.value(c).cols();
    if d != bank.width {
        return Err(Error::shape("address_blocked", tape.value(c).shape(), &[bank.width]));
    }
    let w = bank.block_width();
    let mut outs = Vec::with_capacity(bank.n_blocks());
    let mut weights = Vec::with_capacity(bank.n_blocks());
    for (i, blk) in bank.blocks.iter().enumerate() {
        let seg = if bank.n_blocks() == 1 {
            c
        } else {
            tape.slice_cols(c, i * w, (i + 1) * w)?
        };
        let (o, p) = address_single(tape, seg, b[blk.keys], b[blk.values])?;
        outs.push(o);
        weights.push(p);
    }
    let out = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    Ok((out, weights))
}

/// Linear map from `[u_private; u_shared]` (width `2d`) back to width `d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Combiner {
    pub w: ParamId,
    pub b: ParamId,
}

impl Combiner {
    pub fn register(store: &mut ParamStore, prefix: &str, width: usize, seed: u64) -> Result<Self> {
        Ok(Combiner {
            w: store.register(&format!("{prefix}.w"), &[2 * width, width], Init::Uniform(WEIGHT_INIT), seed)?,
            b: store.register(&format!("{prefix}.b"), &[width], Init::Zeros, seed)?,
        })
    }
}

/// One language's view of memory: its private bank plus, when enabled, the
/// bank shared by all languages and the combiner merging the two read-outs.
/// `shared` holds ids into the same store for every language, so all
/// languages read and update the same parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SharedPrivateMemory {
    pub private: MemoryBank,
    pub shared: Option<(MemoryBank, Combiner)>,
}

#[derive(Debug, Clone)]
pub struct MemoryReadout {
    pub c_star: Var,
    pub private: Var,
    pub shared: Option<Var>,
    pub private_weights: Vec<Var>,
    pub shared_weights: Vec<Var>,
}

/// `c* = W [blocked(c, private); blocked(c, shared)] + b`, or the private
/// read-out alone when no shared bank is configured.
pub fn shared_private_forward(tape: &mut Tape, b: &Bound, mem: &SharedPrivateMemory, c: Var) -> Result<MemoryReadout> {
    let (u_priv, private_weights) = address_blocked(tape, b, &mem.private, c)?;
    match &mem.shared {
        None => Ok(MemoryReadout {
            c_star: u_priv,
            private: u_priv,
            shared: None,
            private_weights,
            shared_weights: Vec::new(),
        }),
        Some((bank, comb)) => {
            if bank.n_blocks() != mem.private.n_blocks() {
                return Err(Error::Config(format!(
                    "shared bank has {} blocks but private bank has {}",
                    bank.n_blocks(),
                    mem.private.n_blocks()
                )));
            }
            let (u_shared, shared_weights) = address_blocked(tape, b, bank, c)?;
            let both = tape.concat_cols(&[u_priv, u_shared])?;
            let proj = tape.matmul(both, b[comb.w])?;
            let c_star = tape.add_row(proj, b[comb.b])?;
            Ok(MemoryReadout {
                c_star,
                private: u_priv,
                shared: Some(u_shared),
                private_weights,
                shared_weights,
            })
        }
    }
}

pub(crate) fn shannon(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockStats {
    /// Addressing weight of each slot averaged over the contexts.
    pub mean_weights: Vec<f64>,
    /// Average Shannon entropy (nats) of the per-context weight vectors.
    pub entropy: f64,
    /// Entropy of `mean_weights`, i.e. how evenly the slots are used overall.
    pub usage_entropy: f64,
}

/// Slot usage of each block for a batch of contexts (`B × d`).
pub fn memory_stats(store: &ParamStore, bank: &MemoryBank, contexts: &Tensor) -> Result<Vec<BlockStats>> {
    let (rows, d) = contexts.dims2();
    if d != bank.width {
        return Err(Error::shape("memory_stats", contexts.shape(), &[bank.width]));
    }
    let w = bank.block_width();
    bank.blocks
        .iter()
        .enumerate()
        .map(|(i, blk)| {
            let seg: Vec<f64> = (0..rows)
                .flat_map(|r| contexts.row(r)[i * w..(i + 1) * w].iter().copied())
                .collect();
            let seg = Tensor::matrix(rows, w, seg)?;
            let scores = matmul_nt(&seg, store.get(blk.keys))?;
            let mut mean = vec![0.0; bank.slots_per_block];
            let mut entropy = 0.0;
            for r in 0..rows {
                let p = softmax(scores.row(r))?;
                entropy += shannon(&p);
                for (m, v) in mean.iter_mut().zip(&p) {
                    *m += v / rows as f64;
                }
            }
            Ok(BlockStats {
                usage_entropy: shannon(&mean),
                mean_weights: mean,
                entropy: entropy / rows as f64,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rnd(shape: &[usize], seed: u64) -> Tensor {
        Tensor::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn singleton_memory_returns_its_value() {
        let mut tape = Tape::new();
        let c = tape.constant(rnd(&[1, 3], 1));
        let k = tape.constant(rnd(&[1, 3], 2));
        let v = tape.constant(rnd(&[1, 3], 3));
        let (out, p) = address_single(&mut tape, c, k, v).unwrap();
        assert_eq!(tape.value(out), tape.value(v));
        assert_eq!(tape.value(p).data(), &[1.0]);
    }

    #[test]
    fn identical_keys_average_values() {
        let mut tape = Tape::new();
        let c = tape.constant(rnd(&[1, 2], 1));
        let k = tape.constant(Tensor::from_rows(&[vec![0.3, 0.1], vec![0.3, 0.1], vec![0.3, 0.1]]).unwrap());
        let vals = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 5.0], vec![-1.0, 2.0]]).unwrap();
        let v = tape.constant(vals);
        let (out, _) = address_single(&mut tape, c, k, v).unwrap();
        let o = tape.value(out).data();
        assert!((o[0] - 1.0).abs() < 1e-12 && (o[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn sharp_alignment_selects_one_value() {
        let keys = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap();
        let vals = rnd(&[3, 2], 9);
        let c = Tensor::matrix(1, 2, vec![0.0, 100.0]).unwrap();
        // explicit softmax over the three dot products
        let scores: Vec<f64> = (0..3).map(|j| c.row(0).iter().zip(keys.row(j)).map(|(a, b)| a * b).sum()).collect();
        let p = softmax(&scores).unwrap();
        let oracle: Vec<f64> = (0..2).map(|col| (0..3).map(|j| p[j] * vals.at(j, col)).sum()).collect();

        let mut tape = Tape::new();
        let (cv, kv, vv) = (tape.constant(c), tape.constant(keys), tape.constant(vals.clone()));
        let (out, _) = address_single(&mut tape, cv, kv, vv).unwrap();
        let o = tape.value(out).data();
        assert!(o.iter().zip(&oracle).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(o.iter().zip(vals.row(1)).all(|(a, b)| (a - b).abs() < 1e-4));
    }

    #[test]
    fn zero_slots_rejected() {
        let mut store = ParamStore::new();
        assert!(MemoryBank::register(&mut store, "m", 4, 0, 2, 0).is_err());
        assert!(MemoryBank::register(&mut store, "m", 6, 8, 4, 0).is_err());
    }

    #[test]
    fn one_block_equals_single_addressing() {
        let mut store = ParamStore::new();
        let bank = MemoryBank::register(&mut store, "m", 4, 5, 1, 3).unwrap();
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let c = tape.constant(rnd(&[2, 4], 4));
        let (blocked, _) = address_blocked(&mut tape, &b, &bank, c).unwrap();
        let (single, _) = address_single(&mut tape, c, b[bank.blocks[0].keys], b[bank.blocks[0].values]).unwrap();
        let (x, y) = (tape.value(blocked).data(), tape.value(single).data());
        assert!(x.iter().zip(y).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn blocked_matches_per_block_loop() {
        let mut store = ParamStore::new();
        let bank = MemoryBank::register(&mut store, "m", 4, 6, 2, 8).unwrap();
        let c = rnd(&[1, 4], 10);
        let mut oracle = Vec::new();
        for (i, blk) in bank.blocks.iter().enumerate() {
            let (k, v) = (store.get(blk.keys), store.get(blk.values));
            let seg = &c.data()[2 * i..2 * i + 2];
            let scores: Vec<f64> = (0..3).map(|j| seg[0] * k.at(j, 0) + seg[1] * k.at(j, 1)).collect();
            let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for col in 0..2 {
                oracle.push((0..3).map(|j| e[j] / z * v.at(j, col)).sum::<f64>());
            }
        }
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let cv = tape.constant(c);
        let (out, weights) = address_blocked(&mut tape, &b, &bank, cv).unwrap();
        assert_eq!(tape.value(out).cols(), 4);
        assert!(tape.value(out).data().iter().zip(&oracle).all(|(a, o)| (a - o).abs() <= 1e-12));
        for w in weights {
            assert!((tape.value(w).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_values_yield_bias() {
        let mut store = ParamStore::new();
        let private = MemoryBank::register(&mut store, "p", 4, 4, 2, 1).unwrap();
        let shared = MemoryBank::register(&mut store, "s", 4, 4, 2, 1).unwrap();
        let comb = Combiner::register(&mut store, "c", 4, 1).unwrap();
        for bank in [&private, &shared] {
            for blk in &bank.blocks {
                *store.get_mut(blk.values) = Tensor::zeros(&[2, 2]);
            }
        }
        *store.get_mut(comb.b) = Tensor::vector(vec![0.1, 0.2, 0.3, 0.4]);
        let mem = SharedPrivateMemory {
            private,
            shared: Some((shared, comb)),
        };
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let c = tape.constant(rnd(&[1, 4], 2));
        let r = shared_private_forward(&mut tape, &b, &mem, c).unwrap();
        assert_eq!(tape.value(r.c_star).data(), &[0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn stats_entropy() {
        let mut store = ParamStore::new();
        let bank = MemoryBank::register(&mut store, "m", 2, 4, 1, 1).unwrap();
        // zero keys: uniform weights
        *store.get_mut(bank.blocks[0].keys) = Tensor::zeros(&[4, 2]);
        let ctx = rnd(&[3, 2], 5);
        let s = memory_stats(&store, &bank, &ctx).unwrap();
        assert!((s[0].entropy - 4f64.ln()).abs() < 1e-12);

        // very sharp keys: near one-hot weights
        *store.get_mut(bank.blocks[0].keys) =
            Tensor::from_rows(&[vec![1e4, 0.0], vec![0.0, 1e4], vec![-1e4, 0.0], vec![0.0, -1e4]]).unwrap();
        let ctx = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, -1.0]]).unwrap();
        let s = memory_stats(&store, &bank, &ctx).unwrap();
        assert!(s[0].entropy.abs() < 1e-9);
        assert!((s[0].usage_entropy - 2f64.ln()).abs() < 1e-9);

        // mixed batch against the direct formula
        let keys = rnd(&[4, 2], 6);
        *store.get_mut(bank.blocks[0].keys) = keys.clone();
        let ctx = rnd(&[5, 2], 7);
        let s = memory_stats(&store, &bank, &ctx).unwrap();
        let mut direct = 0.0;
        for r in 0..5 {
            let logits: Vec<f64> = (0..4).map(|j| ctx.at(r, 0) * keys.at(j, 0) + ctx.at(r, 1) * keys.at(j, 1)).collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            direct -= logits.iter().map(|l| (l.exp() / z) * (l.exp() / z).ln()).sum::<f64>();
        }
        assert!((s[0].entropy - direct / 5.0).abs() < 1e-9);
    }
}
