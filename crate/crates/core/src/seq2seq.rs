//! GRU encoder, additive attention, attentional GRU decoder and the sequence
//! negative log-likelihood.
//!
//! All functions operate on mini-batches: a hidden state is a `B × d` matrix
//! and sequences are given as `B` padded rows of token ids.

use crate::error::{Error, Result};
use crate::model::params::{Bound, Init, ParamId, ParamStore};
use crate::numerics::{Tape, Tensor, Var};

pub const WEIGHT_INIT: f64 = 0.08;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn register(store: &mut ParamStore, name: &str, vocab: usize, dim: usize, seed: u64) -> Result<Self> {
        let table = store.register(name, &[vocab, dim], Init::Uniform(WEIGHT_INIT), seed)?;
        Ok(Embedding { table, vocab, dim })
    }

    pub fn lookup(&self, tape: &mut Tape, b: &Bound, ids: &[usize]) -> Result<Var> {
        tape.gather(b[self.table], ids)
    }
}

/// Weights of one GRU cell. The input path stacks the update, reset and
/// candidate projections column-wise (`e × 3d`); the recurrent path keeps the
/// gate projections (`d × 2d`) apart from the candidate's (`d × d`) because
/// the latter is applied to the reset-scaled state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GruParams {
    pub w_x: ParamId,
    pub u_zr: ParamId,
    pub u_h: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruParams {
    pub fn register(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, seed: u64) -> Result<Self> {
        let w = Init::Uniform(WEIGHT_INIT);
        Ok(GruParams {
            w_x: store.register(&format!("{prefix}.w_x"), &[input, 3 * hidden], w, seed)?,
            u_zr: store.register(&format!("{prefix}.u_zr"), &[hidden, 2 * hidden], w, seed)?,
            u_h: store.register(&format!("{prefix}.u_h"), &[hidden, hidden], w, seed)?,
            bias: store.register(&format!("{prefix}.bias"), &[3 * hidden], Init::Zeros, seed)?,
            input,
            hidden,
        })
    }
}

/// One GRU transition:
/// `z = σ(W_z x + U_z h + b_z)`, `r = σ(W_r x + U_r h + b_r)`,
/// `h̃ = tanh(W_h x + U_h (r ⊙ h) + b_h)`, `h' = (1 − z) ⊙ h + z ⊙ h̃`.
pub fn gru_step(tape: &mut Tape, b: &Bound, p: &GruParams, x: Var, h: Var) -> Result<Var> {
    let d = p.hidden;
    if tape.value(x).cols() != p.input || tape.value(h).cols() != d || tape.value(x).rows() != tape.value(h).rows() {
        return Err(Error::shape("gru_step", tape.value(x).shape(), tape.value(h).shape()));
    }
    let xw = tape.matmul(x, b[p.w_x])?;
    let xw = tape.add_row(xw, b[p.bias])?;
    let hu = tape.matmul(h, b[p.u_zr])?;
    let x_gates = tape.slice_cols(xw, 0, 2 * d)?;
    let gates = tape.add(x_gates, hu)?;
    let gates = tape.sigmoid(gates);
    let z = tape.slice_cols(gates, 0, d)?;
    let r = tape.slice_cols(gates, d, 2 * d)?;
    let rh = tape.mul(r, h)?;
    let rh_u = tape.matmul(rh, b[p.u_h])?;
    let x_cand = tape.slice_cols(xw, 2 * d, 3 * d)?;
    let cand = tape.add(x_cand, rh_u)?;
    let cand = tape.tanh(cand);
    let delta = tape.sub(cand, h)?;
    let step = tape.mul(z, delta)?;
    tape.add(h, step)
}

/// Encoder states for a padded batch of queries.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// One `B × d` state per time step; padded steps repeat the carried state.
    pub states: Vec<Var>,
    /// Row-major `B × T` keep-mask.
    pub mask: Vec<bool>,
    /// State at each row's last unmasked position.
    pub context: Var,
    pub batch: usize,
}

impl EncoderOutput {
    pub fn steps(&self) -> usize {
        self.states.len()
    }
}

fn check_rect(ids: &[Vec<usize>], mask: &[Vec<bool>]) -> Result<(usize, usize)> {
    let rows = ids.len();
    let t = ids.first().map_or(0, Vec::len);
    if rows == 0 || t == 0 {
        return Err(Error::Empty("sequence"));
    }
    if mask.len() != rows || ids.iter().zip(mask).any(|(r, m)| r.len() != t || m.len() != t) {
        return Err(Error::shape("sequence mask", &[rows, t], &[mask.len()]));
    }
    if mask.iter().any(|m| !m.iter().any(|&k| k)) {
        return Err(Error::Empty("sequence (row with no unmasked tokens)"));
    }
    Ok((rows, t))
}

/// Runs the GRU left to right from a zero state. Masked positions carry the
/// previous state through unchanged, so the final state is each row's
/// context vector.
pub fn encode(
    tape: &mut Tape,
    b: &Bound,
    emb: &Embedding,
    gru: &GruParams,
    ids: &[Vec<usize>],
    mask: &[Vec<bool>],
) -> Result<EncoderOutput> {
    let (rows, t) = check_rect(ids, mask)?;
    let mut h = tape.constant(Tensor::zeros(&[rows, gru.hidden]));
    let mut states = Vec::with_capacity(t);
    for step in 0..t {
        let col: Vec<usize> = ids.iter().map(|r| r[step]).collect();
        let keep: Vec<bool> = mask.iter().map(|m| m[step]).collect();
        let x = emb.lookup(tape, b, &col)?;
        let next = gru_step(tape, b, gru, x, h)?;
        h = if keep.iter().all(|&k| k) {
            next
        } else {
            tape.select_rows(&keep, next, h)?
        };
        states.push(h);
    }
    Ok(EncoderOutput {
        states,
        mask: mask.iter().flatten().copied().collect(),
        context: h,
        batch: rows,
    })
}

/// Bahdanau-style scoring `e_t = vᵀ tanh(W_q s + W_k h_t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionParams {
    pub w_query: ParamId,
    pub w_key: ParamId,
    pub v: ParamId,
}

impl AttentionParams {
    pub fn register(store: &mut ParamStore, prefix: &str, hidden: usize, seed: u64) -> Result<Self> {
        let w = Init::Uniform(WEIGHT_INIT);
        Ok(AttentionParams {
            w_query: store.register(&format!("{prefix}.w_query"), &[hidden, hidden], w, seed)?,
            w_key: store.register(&format!("{prefix}.w_key"), &[hidden, hidden], w, seed)?,
            v: store.register(&format!("{prefix}.v"), &[hidden, 1], w, seed)?,
        })
    }

    /// Key projections `W_k h_t`; these depend only on the encoder, so they
    /// are computed once per query and reused by every decoding step.
    pub fn project_keys(&self, tape: &mut Tape, b: &Bound, enc: &EncoderOutput) -> Result<Vec<Var>> {
        enc.states.iter().map(|&s| tape.matmul(s, b[self.w_key])).collect()
    }
}

/// Attention read-out for decoder state `s`; returns `(Σ α_t h_t, α)` with
/// `α` of shape `B × T`.
pub fn attend(
    tape: &mut Tape,
    b: &Bound,
    att: &AttentionParams,
    s: Var,
    enc: &EncoderOutput,
    keys: &[Var],
) -> Result<(Var, Var)> {
    if keys.len() != enc.steps() {
        return Err(Error::shape("attend", &[keys.len()], &[enc.steps()]));
    }
    let q = tape.matmul(s, b[att.w_query])?;
    let mut scores = Vec::with_capacity(keys.len());
    for &k in keys {
        let pre = tape.add(q, k)?;
        let act = tape.tanh(pre);
        scores.push(tape.matmul(act, b[att.v])?);
    }
    let scores = tape.concat_cols(&scores)?;
    let weights = tape.softmax_rows(scores, Some(&enc.mask))?;
    let out = tape.weighted_sum(weights, &enc.states)?;
    Ok((out, weights))
}

/// Attentional decoder: GRU input is `[embed(y_prev); attention read-out]`,
/// logits are an affine map of the new state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decoder {
    pub embedding: Embedding,
    pub gru: GruParams,
    pub attention: AttentionParams,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

impl Decoder {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        embedding: Embedding,
        hidden: usize,
        seed: u64,
    ) -> Result<Self> {
        let gru = GruParams::register(store, &format!("{prefix}.decoder"), embedding.dim + hidden, hidden, seed)?;
        let attention = AttentionParams::register(store, &format!("{prefix}.attention"), hidden, seed)?;
        let out_w = store.register(
            &format!("{prefix}.output.w"),
            &[hidden, embedding.vocab],
            Init::Uniform(WEIGHT_INIT),
            seed,
        )?;
        let out_b = store.register(&format!("{prefix}.output.b"), &[embedding.vocab], Init::Zeros, seed)?;
        Ok(Decoder {
            embedding,
            gru,
            attention,
            out_w,
            out_b,
        })
    }

    pub fn vocab(&self) -> usize {
        self.embedding.vocab
    }

    /// State update only; see [`Decoder::logits`].
    pub fn step_state(
        &self,
        tape: &mut Tape,
        b: &Bound,
        y_prev: &[usize],
        h_prev: Var,
        enc: &EncoderOutput,
        keys: &[Var],
    ) -> Result<Var> {
        let (read, _) = attend(tape, b, &self.attention, h_prev, enc, keys)?;
        let e = self.embedding.lookup(tape, b, y_prev)?;
        let x = tape.concat_cols(&[e, read])?;
        gru_step(tape, b, &self.gru, x, h_prev)
    }

    pub fn logits(&self, tape: &mut Tape, b: &Bound, h: Var) -> Result<Var> {
        let z = tape.matmul(h, b[self.out_w])?;
        tape.add_row(z, b[self.out_b])
    }

    /// One decoding step; returns `(logits, h)`.
    pub fn decode_step(
        &self,
        tape: &mut Tape,
        b: &Bound,
        y_prev: &[usize],
        h_prev: Var,
        enc: &EncoderOutput,
        keys: &[Var],
    ) -> Result<(Var, Var)> {
        let h = self.step_state(tape, b, y_prev, h_prev, enc, keys)?;
        Ok((self.logits(tape, b, h)?, h))
    }

    /// Teacher-forced unroll from initial state `h0` over decoder inputs
    /// `inputs` (`B` rows of `T` ids). Returns logits stacked step-major, i.e.
    /// row `t·B + i` holds step `t` of row `i`.
    pub fn unroll(
        &self,
        tape: &mut Tape,
        b: &Bound,
        h0: Var,
        enc: &EncoderOutput,
        inputs: &[Vec<usize>],
    ) -> Result<Var> {
        let steps = inputs.first().map_or(0, Vec::len);
        if steps == 0 {
            return Err(Error::Empty("decoder inputs"));
        }
        let keys = self.attention.project_keys(tape, b, enc)?;
        let mut h = h0;
        let mut states = Vec::with_capacity(steps);
        for t in 0..steps {
            let col: Vec<usize> = inputs.iter().map(|r| r[t]).collect();
            h = self.step_state(tape, b, &col, h, enc, &keys)?;
            states.push(h);
        }
        let stacked = tape.concat_rows(&states)?;
        self.logits(tape, b, stacked)
    }
}

/// Mean of `−log softmax(logits[i])[targets[i]]` over rows where `mask[i]`.
pub fn sequence_nll(tape: &mut Tape, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
    if targets.len() != mask.len() {
        return Err(Error::shape("sequence_nll", &[targets.len()], &[mask.len()]));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Empty("sequence_nll (no unmasked targets)"));
    }
    let weights: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let total = tape.cross_entropy(logits, targets, &weights)?;
    Ok(tape.scale(total, 1.0 / count as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::softmax;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Elementwise GRU written with explicit loops over the unfused gate
    /// weights, sliced out of the stacked parameter layout.
    fn gru_oracle(store: &ParamStore, p: &GruParams, x: &[f64], h: &[f64]) -> Vec<f64> {
        let (e, d) = (p.input, p.hidden);
        let wx = store.get(p.w_x);
        let uzr = store.get(p.u_zr);
        let uh = store.get(p.u_h);
        let bias = store.get(p.bias).data();
        let lin_x = |gate: usize, j: usize| (0..e).map(|i| x[i] * wx.at(i, gate * d + j)).sum::<f64>() + bias[gate * d + j];
        let lin_h = |gate: usize, j: usize| (0..d).map(|i| h[i] * uzr.at(i, gate * d + j)).sum::<f64>();
        let z: Vec<f64> = (0..d).map(|j| sigmoid(lin_x(0, j) + lin_h(0, j))).collect();
        let r: Vec<f64> = (0..d).map(|j| sigmoid(lin_x(1, j) + lin_h(1, j))).collect();
        let rh: Vec<f64> = (0..d).map(|i| r[i] * h[i]).collect();
        (0..d)
            .map(|j| {
                let cand = (lin_x(2, j) + (0..d).map(|i| rh[i] * uh.at(i, j)).sum::<f64>()).tanh();
                (1.0 - z[j]) * h[j] + z[j] * cand
            })
            .collect()
    }

    fn perturb_all(store: &mut ParamStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in store.tensors_mut() {
            *t = Tensor::uniform(t.shape(), 0.5, &mut rng);
        }
    }

    #[test]
    fn zero_weights_halve_the_state() {
        let mut store = ParamStore::new();
        let p = GruParams::register(&mut store, "g", 3, 4, 1).unwrap();
        for t in store.tensors_mut() {
            *t = Tensor::zeros(t.shape());
        }
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let x = tape.constant(Tensor::matrix(1, 3, vec![1.0, -2.0, 3.0]).unwrap());
        let h0 = Tensor::matrix(1, 4, vec![0.4, -0.2, 1.0, 0.0]).unwrap();
        let h = tape.constant(h0.clone());
        let out = gru_step(&mut tape, &b, &p, x, h).unwrap();
        assert_eq!(tape.value(out).shape(), &[1, 4]);
        assert!(tape.value(out).max_abs_diff(&h0.map(|v| 0.5 * v)) < 1e-15);
    }

    #[test]
    fn gru_matches_scalar_oracle() {
        let mut store = ParamStore::new();
        let p = GruParams::register(&mut store, "g", 3, 4, 1).unwrap();
        perturb_all(&mut store, 5);
        let x = vec![0.3, -0.8, 0.5];
        let h = vec![0.1, 0.7, -0.4, 0.2];
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let xv = tape.constant(Tensor::matrix(1, 3, x.clone()).unwrap());
        let hv = tape.constant(Tensor::matrix(1, 4, h.clone()).unwrap());
        let out = gru_step(&mut tape, &b, &p, xv, hv).unwrap();
        let oracle = gru_oracle(&store, &p, &x, &h);
        for (a, o) in tape.value(out).data().iter().zip(&oracle) {
            assert!((a - o).abs() <= 1e-12);
        }
        let bad = tape.constant(Tensor::zeros(&[1, 2]));
        assert!(gru_step(&mut tape, &b, &p, bad, hv).is_err());
    }

    struct Fixture {
        store: ParamStore,
        emb: Embedding,
        enc: GruParams,
        dec: Decoder,
    }

    fn fixture() -> Fixture {
        let mut store = ParamStore::new();
        let emb = Embedding::register(&mut store, "emb", 9, 3, 2).unwrap();
        let enc = GruParams::register(&mut store, "enc", 3, 4, 2).unwrap();
        let dec = Decoder::register(&mut store, "x", emb, 4, 2).unwrap();
        perturb_all(&mut store, 8);
        Fixture { store, emb, enc, dec }
    }

    #[test]
    fn encoder_context_and_padding() {
        let f = fixture();
        let mut tape = Tape::new();
        let b = f.store.bind(&mut tape);
        let one = encode(&mut tape, &b, &f.emb, &f.enc, &[vec![5]], &[vec![true]]).unwrap();
        let x = f.emb.lookup(&mut tape, &b, &[5]).unwrap();
        let h0 = tape.constant(Tensor::zeros(&[1, 4]));
        let direct = gru_step(&mut tape, &b, &f.enc, x, h0).unwrap();
        assert_eq!(tape.value(one.context), tape.value(direct));

        let plain = encode(&mut tape, &b, &f.emb, &f.enc, &[vec![4, 6, 7]], &[vec![true; 3]]).unwrap();
        let padded = encode(
            &mut tape,
            &b,
            &f.emb,
            &f.enc,
            &[vec![4, 6, 7, 0, 0]],
            &[vec![true, true, true, false, false]],
        )
        .unwrap();
        assert!(tape.value(plain.context).max_abs_diff(tape.value(padded.context)) <= 1e-12);
        assert_eq!(tape.value(padded.context), tape.value(padded.states[2]));
        assert!(encode(&mut tape, &b, &f.emb, &f.enc, &[vec![]], &[vec![]]).is_err());
    }

    #[test]
    fn batched_encoding_matches_unbatched_rows() {
        let f = fixture();
        let mut tape = Tape::new();
        let b = f.store.bind(&mut tape);
        let ids = vec![vec![4, 5, 6, 7], vec![8, 1, 0, 0]];
        let mask = vec![vec![true; 4], vec![true, true, false, false]];
        let batched = encode(&mut tape, &b, &f.emb, &f.enc, &ids, &mask).unwrap();
        let row1 = encode(&mut tape, &b, &f.emb, &f.enc, &[vec![8, 1]], &[vec![true, true]]).unwrap();
        let bc = tape.value(batched.context).row(1).to_vec();
        let rc = tape.value(row1.context).row(0);
        assert!(bc.iter().zip(rc).all(|(a, c)| (a - c).abs() <= 1e-9));
    }

    #[test]
    fn attention_properties() {
        let f = fixture();
        let att = f.dec.attention;
        let mut tape = Tape::new();
        let b = f.store.bind(&mut tape);
        let enc = encode(&mut tape, &b, &f.emb, &f.enc, &[vec![4]], &[vec![true]]).unwrap();
        let keys = att.project_keys(&mut tape, &b, &enc).unwrap();
        let s = tape.constant(Tensor::matrix(1, 4, vec![0.2, -0.1, 0.5, 0.3]).unwrap());
        let (out, w) = attend(&mut tape, &b, &att, s, &enc, &keys).unwrap();
        assert_eq!(tape.value(out), tape.value(enc.states[0]));
        assert_eq!(tape.value(w).data(), &[1.0]);

        let ids = vec![vec![4, 5, 6], vec![7, 0, 0]];
        let mask = vec![vec![true; 3], vec![true, false, false]];
        let enc = encode(&mut tape, &b, &f.emb, &f.enc, &ids, &mask).unwrap();
        let keys = att.project_keys(&mut tape, &b, &enc).unwrap();
        let s = tape.constant(Tensor::uniform(&[2, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(3)));
        let (_, w) = attend(&mut tape, &b, &att, s, &enc, &keys).unwrap();
        let w = tape.value(w);
        assert!((w.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(w.row(1), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn attention_over_identical_states_returns_the_state() {
        let f = fixture();
        let att = f.dec.attention;
        let mut tape = Tape::new();
        let b = f.store.bind(&mut tape);
        let state = tape.constant(Tensor::matrix(1, 4, vec![0.5, -0.3, 0.2, 0.9]).unwrap());
        let enc = EncoderOutput {
            states: vec![state; 3],
            mask: vec![true; 3],
            context: state,
            batch: 1,
        };
        let keys = att.project_keys(&mut tape, &b, &enc).unwrap();
        let s = tape.constant(Tensor::matrix(1, 4, vec![1.0, 2.0, -1.0, 0.0]).unwrap());
        let (out, _) = attend(&mut tape, &b, &att, s, &enc, &keys).unwrap();
        assert!(tape.value(out).max_abs_diff(tape.value(state)) < 1e-15);
        let empty = EncoderOutput {
            states: vec![state],
            mask: vec![false],
            context: state,
            batch: 1,
        };
        let keys = att.project_keys(&mut tape, &b, &empty).unwrap();
        assert!(attend(&mut tape, &b, &att, s, &empty, &keys).is_err());
    }

    #[test]
    fn unroll_matches_stepwise_decoding() {
        let f = fixture();
        let mut tape = Tape::new();
        let b = f.store.bind(&mut tape);
        let enc = encode(&mut tape, &b, &f.emb, &f.enc, &[vec![4, 5]], &[vec![true, true]]).unwrap();
        let inputs = vec![vec![2, 6, 7]];
        let unrolled = f.dec.unroll(&mut tape, &b, enc.context, &enc, &inputs).unwrap();
        let stacked = tape.value(unrolled).clone();
        assert_eq!(stacked.dims2(), (3, 9));

        let keys = f.dec.attention.project_keys(&mut tape, &b, &enc).unwrap();
        let mut h = enc.context;
        for t in 0..3 {
            let (logits, next) = f.dec.decode_step(&mut tape, &b, &[inputs[0][t]], h, &enc, &keys).unwrap();
            let again = f.dec.decode_step(&mut tape, &b, &[inputs[0][t]], h, &enc, &keys).unwrap().0;
            assert_eq!(tape.value(logits), tape.value(again));
            assert_eq!(tape.value(logits).len(), f.dec.vocab());
            let diff: f64 = tape
                .value(logits)
                .data()
                .iter()
                .zip(stacked.row(t))
                .map(|(a, c)| (a - c).abs())
                .fold(0.0, f64::max);
            assert!(diff <= 1e-12);
            h = next;
        }
    }

    #[test]
    fn nll_cases() {
        let v = 7;
        let mut tape = Tape::new();
        let uniform = tape.constant(Tensor::zeros(&[3, v]));
        let l = sequence_nll(&mut tape, uniform, &[1, 2, 3], &[true; 3]).unwrap();
        assert!((tape.value(l).item() - (v as f64).ln()).abs() < 1e-12);

        let mut peaked = Tensor::zeros(&[2, v]);
        peaked.data_mut()[4] = 50.0;
        peaked.data_mut()[v + 1] = 50.0;
        let p = tape.constant(peaked);
        let l = sequence_nll(&mut tape, p, &[4, 1], &[true, true]).unwrap();
        assert!(tape.value(l).item() <= 1e-6);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = Tensor::uniform(&[3, v], 2.0, &mut rng);
        let targets = [0, 5, 2];
        let lv = tape.constant(logits.clone());
        let masked = sequence_nll(&mut tape, lv, &targets, &[true, true, false]).unwrap();
        let per_row = |i: usize| -softmax(logits.row(i)).unwrap()[targets[i]].ln();
        let expect = (per_row(0) + per_row(1)) / 2.0;
        assert!((tape.value(masked).item() - expect).abs() < 1e-12);
        assert!(sequence_nll(&mut tape, lv, &targets, &[false; 3]).is_err());
    }
}
