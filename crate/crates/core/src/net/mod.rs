//! Policy-token transformer.
//!
//! Vehicle tokens are embedded by a linear map, shifted by a sinusoidal
//! encoding of their physical (lane-major) position, and prefixed with a
//! learnable policy token. After `n_layers` pre-norm blocks the policy
//! token's output row alone is normalized and mapped to one row of Q-values
//! per CAV agent.
//!
//! `forward` sorts the vehicle tokens into a canonical order before
//! assembling the input, so the output does not depend on vehicle storage
//! order, down to the last bit.

mod params;

pub use params::{init_parameters, parameter_count, parameter_shapes, Layout, ParameterSet};

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::TokenSequence;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use params::*;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
    /// MLP hidden width as a multiple of `d_model`.
    pub mlp_ratio: usize,
    pub dropout: f64,
    pub n_pos: usize,
    pub token_len: usize,
    pub n_cav: usize,
    pub n_actions: usize,
    /// Add the sinusoidal physical-position rows to the vehicle tokens.
    pub ppe: bool,
    /// Add a learned position table on top.
    pub learned_pos: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            d_model: 192,
            n_layers: 2,
            n_heads: 6,
            d_head: 32,
            mlp_ratio: 4,
            dropout: 0.1,
            n_pos: 750,
            token_len: 1000,
            n_cav: 2,
            n_actions: 9,
            ppe: true,
            learned_pos: false,
        }
    }
}

impl NetConfig {
    /// One block, three heads of width 32: small enough for a single core.
    pub fn desk() -> Self {
        NetConfig {
            d_model: 96,
            n_layers: 1,
            n_heads: 3,
            ..NetConfig::default()
        }
    }

    pub fn n_outputs(&self) -> usize {
        self.n_cav * self.n_actions
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_ratio * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.d_head,
            self.mlp_ratio,
            self.n_pos,
            self.token_len,
            self.n_cav,
            self.n_actions,
        ]
        .iter()
        .all(|&x| x > 0);
        if !positive {
            return Err(Error::config("network dimensions must be positive"));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::config(format!("d_model {} must be even", self.d_model)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// One row of action values per CAV agent.
#[derive(Clone, Debug, PartialEq)]
pub struct QValues {
    pub values: Tensor,
}

impl QValues {
    pub fn n_agents(&self) -> usize {
        self.values.rows()
    }

    pub fn row(&self, agent: usize) -> &[f64] {
        self.values.row(agent)
    }

    /// Greedy action of one agent; ties go to the lowest index.
    pub fn argmax(&self, agent: usize) -> usize {
        argmax(self.row(agent))
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Sinusoidal encoding of a physical position index.
pub fn compute_ppe(pos: usize, config: &NetConfig) -> Result<Vec<f64>> {
    let mut out = vec![0.0; config.d_model];
    ppe_row(pos, config, &ppe_denominators(config), &mut out)?;
    Ok(out)
}

fn ppe_denominators(config: &NetConfig) -> Vec<f64> {
    let d = config.d_model;
    let base = 2.0 * config.n_pos as f64;
    (0..d / 2).map(|k| libm::pow(base, (2 * k) as f64 / d as f64)).collect()
}

fn ppe_row(pos: usize, config: &NetConfig, denominators: &[f64], out: &mut [f64]) -> Result<()> {
    if pos >= config.n_pos {
        return Err(Error::Index {
            index: pos,
            len: config.n_pos,
        });
    }
    for (k, den) in denominators.iter().enumerate() {
        let (s, c) = libm::sincos(pos as f64 / den);
        out[2 * k] = s;
        out[2 * k + 1] = c;
    }
    Ok(())
}

/// Token order used by `forward`: by position, then by token contents.
pub fn canonical_order(seq: &TokenSequence) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..seq.len()).collect();
    idx.sort_by(|&a, &b| {
        seq.positions[a].cmp(&seq.positions[b]).then_with(|| {
            seq.token(a)
                .iter()
                .zip(seq.token(b))
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| *o != Ordering::Equal)
                .unwrap_or(Ordering::Equal)
        })
    });
    idx
}

/// Puts every parameter array on the tape, as tracked leaves or constants.
pub fn bind(tape: &mut Tape, params: &ParameterSet, trainable: bool) -> Vec<Var> {
    params
        .tensors
        .iter()
        .map(|t| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect()
}

fn fault(layer: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::NumericFault {
            layer,
            source: Box::new(e),
        },
        other => other,
    }
}

/// `softmax(q kᵀ / √d_head) v` together with the attention weights.
fn attend(tape: &mut Tape, q: Var, k: Var, v: Var, d_head: usize) -> Result<(Var, Var)> {
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / libm::sqrt(d_head as f64))?;
    let weights = tape.softmax_rows(scores)?;
    Ok((tape.matmul(weights, v)?, weights))
}

/// Multi-head attention of one sequence whose fused projections `qkv`
/// (`n × 3·n_heads·d_head`) are already computed. Returns the concatenated
/// head outputs before the output projection.
fn heads(
    tape: &mut Tape,
    qkv: Var,
    n_heads: usize,
    d_head: usize,
    mut maps: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let mut outs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let base = 3 * h * d_head;
        let q = tape.slice_cols(qkv, base, d_head)?;
        let k = tape.slice_cols(qkv, base + d_head, d_head)?;
        let v = tape.slice_cols(qkv, base + 2 * d_head, d_head)?;
        let (o, w) = attend(tape, q, k, v, d_head)?;
        if let Some(m) = maps.as_deref_mut() {
            m.push(w);
        }
        outs.push(o);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        tape.concat_cols(&outs)
    }
}

/// Single-head attention with fused weights `u_qkv` (`D × 3·d_head`, laid out
/// as q | k | v).
pub fn self_attention(z: &Tensor, u_qkv: &Tensor) -> Result<Tensor> {
    if !u_qkv.cols().is_multiple_of(3) {
        return Err(Error::Dimension {
            op: "self_attention",
            left: z.shape().to_vec(),
            right: u_qkv.shape().to_vec(),
        });
    }
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let u = tape.constant(u_qkv.clone());
    let qkv = tape.matmul(zv, u)?;
    let out = heads(&mut tape, qkv, 1, u_qkv.cols() / 3, None)?;
    Ok(tape.value(out).clone())
}

/// All heads followed by the output projection `w_o`.
pub fn multi_head_attention(z: &Tensor, u_qkv: &Tensor, w_o: &Tensor, n_heads: usize) -> Result<Tensor> {
    if n_heads == 0 || !u_qkv.cols().is_multiple_of(3 * n_heads) {
        return Err(Error::Dimension {
            op: "multi_head_attention",
            left: u_qkv.shape().to_vec(),
            right: vec![n_heads],
        });
    }
    let d_head = u_qkv.cols() / (3 * n_heads);
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let u = tape.constant(u_qkv.clone());
    let w = tape.constant(w_o.clone());
    let qkv = tape.matmul(zv, u)?;
    let cat = heads(&mut tape, qkv, n_heads, d_head, None)?;
    let out = tape.matmul(cat, w)?;
    Ok(tape.value(out).clone())
}

/// A batch of sequences stacked for one pass.
struct Stacked {
    tokens: Tensor,
    positions: Vec<usize>,
    batch: usize,
    n_tokens: usize,
}

fn stack(seqs: &[&TokenSequence], config: &NetConfig, canonical: bool) -> Result<Stacked> {
    let first = seqs.first().ok_or_else(|| Error::contract("empty batch"))?;
    let n = first.len();
    let t = config.token_len;
    let mut data = Vec::with_capacity(seqs.len() * n * t);
    let mut positions = Vec::with_capacity(seqs.len() * n);
    for seq in seqs {
        if seq.len() != n || seq.token_len() != t {
            return Err(Error::Dimension {
                op: "token sequence",
                left: vec![n, t],
                right: vec![seq.len(), seq.token_len()],
            });
        }
        let order: Vec<usize> = if canonical {
            canonical_order(seq)
        } else {
            (0..n).collect()
        };
        for j in order {
            data.extend_from_slice(seq.token(j));
            positions.push(seq.positions[j]);
        }
    }
    Ok(Stacked {
        tokens: Tensor::new(vec![seqs.len() * n, t], data)?,
        positions,
        batch: seqs.len(),
        n_tokens: n,
    })
}

/// `z_0` for a whole batch: `batch · (n_tokens + 1)` rows, policy token first
/// in each sample. Dropout is applied when training.
fn embed<R: Rng + ?Sized>(
    tape: &mut Tape,
    vars: &[Var],
    config: &NetConfig,
    s: &Stacked,
    rng: &mut R,
    training: bool,
) -> Result<Var> {
    let layout = Layout::new(config);
    let x = tape.constant(s.tokens.clone());
    let mut e = tape.matmul(x, vars[Layout::EMBEDDING])?;
    if config.ppe {
        let d = config.d_model;
        let den = ppe_denominators(config);
        let mut rows = vec![0.0; s.positions.len() * d];
        for (r, &p) in s.positions.iter().enumerate() {
            ppe_row(p, config, &den, &mut rows[r * d..(r + 1) * d])?;
        }
        let pe = tape.constant(Tensor::new(vec![s.positions.len(), config.d_model], rows)?);
        e = tape.add(e, pe)?;
    }
    if let Some(i) = layout.pos_table() {
        let learned = tape.gather_rows(vars[i], &s.positions)?;
        e = tape.add(e, learned)?;
    }
    let mut parts = Vec::with_capacity(2 * s.batch);
    for b in 0..s.batch {
        parts.push(vars[Layout::POLICY_TOKEN]);
        parts.push(tape.slice_rows(e, b * s.n_tokens, s.n_tokens)?);
    }
    let z0 = tape.concat_rows(&parts)?;
    tape.dropout(z0, config.dropout, rng, training)
}

#[allow(clippy::too_many_arguments)]
fn block<R: Rng + ?Sized>(
    tape: &mut Tape,
    vars: &[Var],
    config: &NetConfig,
    l: usize,
    z: Var,
    s: &Stacked,
    rng: &mut R,
    training: bool,
    mut maps: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let layout = Layout::new(config);
    let p = |w: usize| vars[layout.layer(l, w)];
    let rows = s.n_tokens + 1;
    let h = tape.layer_norm(z, p(LN1_GAIN), p(LN1_BIAS))?;
    let qkv = tape.matmul(h, p(U_QKV))?;
    let mut per_sample = Vec::with_capacity(s.batch);
    for b in 0..s.batch {
        let qkv_b = tape.slice_rows(qkv, b * rows, rows)?;
        per_sample.push(heads(tape, qkv_b, config.n_heads, config.d_head, maps.as_deref_mut())?);
    }
    let cat = if s.batch == 1 {
        per_sample[0]
    } else {
        tape.concat_rows(&per_sample)?
    };
    let attn = tape.matmul(cat, p(W_O))?;
    let attn = tape.dropout(attn, config.dropout, rng, training)?;
    let z = tape.add(z, attn)?;

    let h = tape.layer_norm(z, p(LN2_GAIN), p(LN2_BIAS))?;
    let m = tape.matmul(h, p(MLP_W1))?;
    let m = tape.add_row(m, p(MLP_B1))?;
    let m = tape.gelu(m)?;
    let m = tape.matmul(m, p(MLP_W2))?;
    let m = tape.add_row(m, p(MLP_B2))?;
    let m = tape.dropout(m, config.dropout, rng, training)?;
    tape.add(z, m)
}

fn network<R: Rng + ?Sized>(
    tape: &mut Tape,
    vars: &[Var],
    config: &NetConfig,
    s: &Stacked,
    rng: &mut R,
    training: bool,
    mut maps: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let layout = Layout::new(config);
    let mut z = embed(tape, vars, config, s, rng, training).map_err(fault(0))?;
    for l in 0..config.n_layers {
        z = block(tape, vars, config, l, z, s, rng, training, maps.as_deref_mut()).map_err(fault(l + 1))?;
    }
    let head = || -> Result<Vec<usize>> { Ok((0..s.batch).map(|b| b * (s.n_tokens + 1)).collect()) };
    let out = (|| {
        let policy = tape.gather_rows(z, &head()?)?;
        let y = tape.layer_norm(policy, vars[layout.final_gain()], vars[layout.final_bias()])?;
        let q = tape.matmul(y, vars[layout.head_weight()])?;
        tape.add_row(q, vars[layout.head_bias()])
    })();
    out.map_err(fault(config.n_layers + 1))
}

/// Builds the network for a batch on `tape` (parameters already bound with
/// [`bind`]) and returns the `batch × n_cav·n_actions` Q matrix.
pub fn forward_on_tape<R: Rng + ?Sized>(
    tape: &mut Tape,
    vars: &[Var],
    config: &NetConfig,
    seqs: &[&TokenSequence],
    rng: &mut R,
    training: bool,
) -> Result<Var> {
    let s = stack(seqs, config, true)?;
    network(tape, vars, config, &s, rng, training, None)
}

fn split_q(q: &Tensor, config: &NetConfig) -> Vec<QValues> {
    (0..q.rows())
        .map(|b| QValues {
            values: Tensor::new(vec![config.n_cav, config.n_actions], q.row(b).to_vec()).expect("shape"),
        })
        .collect()
}

pub fn forward_batch<R: Rng + ?Sized>(
    seqs: &[&TokenSequence],
    params: &ParameterSet,
    rng: &mut R,
    training: bool,
) -> Result<Vec<QValues>> {
    let mut tape = Tape::new();
    let vars = bind(&mut tape, params, false);
    let q = forward_on_tape(&mut tape, &vars, &params.config, seqs, rng, training)?;
    Ok(split_q(tape.value(q), &params.config))
}

pub fn forward<R: Rng + ?Sized>(
    seq: &TokenSequence,
    params: &ParameterSet,
    rng: &mut R,
    training: bool,
) -> Result<QValues> {
    Ok(forward_batch(&[seq], params, rng, training)?.remove(0))
}

/// `z_0` for one sequence in storage order.
pub fn assemble_input<R: Rng + ?Sized>(
    seq: &TokenSequence,
    params: &ParameterSet,
    rng: &mut R,
    training: bool,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = bind(&mut tape, params, false);
    let s = stack(&[seq], &params.config, false)?;
    let z0 = embed(&mut tape, &vars, &params.config, &s, rng, training)?;
    Ok(tape.value(z0).clone())
}

/// Attention weights of every layer and head (layer-major) for one sequence
/// in canonical order, evaluation mode.
pub fn attention_maps(seq: &TokenSequence, params: &ParameterSet) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let vars = bind(&mut tape, params, false);
    let s = stack(&[seq], &params.config, true)?;
    let mut maps = Vec::new();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    network(&mut tape, &vars, &params.config, &s, &mut rng, false, Some(&mut maps))?;
    Ok(maps.into_iter().map(|m| tape.value(m).clone()).collect())
}
