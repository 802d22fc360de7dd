//! Temporal attention over one modality's encoder states.
//!
//! For decoder state `s` and encoder states `h_1..h_L`:
//! `e_t = w_A^T tanh(W_A s + V_A h_t + b_A)`, `alpha = softmax(e)`,
//! `c = sum_t alpha_t h_t`.

use rand_chacha::ChaCha8Rng;

use crate::encoder::EncoderOutput;
use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

/// `W_A: [a, s_dim]`, `V_A: [a, h_dim]`, `w_A: [a]`, `b_A: [a]`.
#[derive(Clone, Debug)]
pub struct TemporalAttentionParams {
    pub w_a: ParamId,
    pub v_a: ParamId,
    pub w_score: ParamId,
    pub b_a: ParamId,
    pub inner: usize,
}

impl TemporalAttentionParams {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        scope: &str,
        s_dim: usize,
        h_dim: usize,
        inner: usize,
        scale: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            w_a: store.add_uniform(format!("{scope}.W_A"), &[inner, s_dim], scale, rng)?,
            v_a: store.add_uniform(format!("{scope}.V_A"), &[inner, h_dim], scale, rng)?,
            w_score: store.add_uniform(format!("{scope}.w_A"), &[inner], scale, rng)?,
            b_a: store.add_uniform(format!("{scope}.b_A"), &[inner], 0.0, rng)?,
            inner,
        })
    }
}

/// The decoder-independent part `V_A h_t + b_A` for every frame, `[L, a]`.
/// Computed once per sequence and reused for every output word.
pub fn attention_keys<T: Scalar>(
    g: &mut Graph<'_, T>,
    enc: &EncoderOutput,
    p: &TemporalAttentionParams,
) -> Result<Var> {
    let (v, b) = (g.param(p.v_a), g.param(p.b_a));
    let vh = g.linear_rows(enc.states, v)?;
    g.add_rows(vh, b)
}

/// Scores `e[L]` from precomputed keys.
pub fn scores_from_keys<T: Scalar>(
    g: &mut Graph<'_, T>,
    s_prev: Var,
    keys: Var,
    p: &TemporalAttentionParams,
) -> Result<Var> {
    let (w, w_score) = (g.param(p.w_a), g.param(p.w_score));
    let ws = g.matvec(w, s_prev)?;
    let pre = g.add_rows(keys, ws)?;
    let act = g.tanh(pre);
    g.matvec(act, w_score)
}

pub fn attention_scores<T: Scalar>(
    g: &mut Graph<'_, T>,
    s_prev: Var,
    enc: &EncoderOutput,
    p: &TemporalAttentionParams,
) -> Result<Var> {
    let keys = attention_keys(g, enc, p)?;
    scores_from_keys(g, s_prev, keys, p)
}

/// Softmax over time.
pub fn attention_weights<T: Scalar>(g: &mut Graph<'_, T>, scores: Var) -> Result<Var> {
    if g.shape(scores).len() != 1 {
        return Err(Error::EmptyInput("attention_weights"));
    }
    g.softmax(scores)
}

/// `c = sum_t alpha_t h_t`.
pub fn content_vector<T: Scalar>(g: &mut Graph<'_, T>, alpha: Var, enc: &EncoderOutput) -> Result<Var> {
    if g.shape(alpha) != [enc.len] {
        return dim_err("content_vector", g.shape(alpha), &[enc.len]);
    }
    g.vecmat(alpha, enc.states)
}
