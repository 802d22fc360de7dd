//! Combining per-modality content vectors into the pre-output activation
//! `g_i`.
//!
//! * simple: `g = tanh(W_s s + sum_k W_ck c_k + b_s)` with fixed matrices.
//! * attention: `d_k = W_ck c_k + b_ck`,
//!   `v_k = w_B^T tanh(W_B s + V_Bk c_k + b_Bk)`, `beta = softmax(v)`,
//!   `g = tanh(W_s s + sum_k beta_k d_k + b_s)`.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// Simple fusion restricted to a single modality.
    Unimodal,
    Simple,
    Attention,
}

impl FusionMode {
    pub const ALLOWED: &'static str = "unimodal, simple, attention";
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unimodal" => Ok(Self::Unimodal),
            "simple" => Ok(Self::Simple),
            "attention" => Ok(Self::Attention),
            other => Err(Error::Config(format!(
                "unknown fusion mode {other:?} (allowed: {})",
                Self::ALLOWED
            ))),
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Unimodal => "unimodal",
            Self::Simple => "simple",
            Self::Attention => "attention",
        })
    }
}

/// `W_B: [b, s_dim]`, `V_Bk: [b, c_k]`, `b_Bk: [b]`, `w_B: [b]`.
#[derive(Clone, Debug)]
pub struct ModalityAttentionParams {
    pub w_b: ParamId,
    pub v_b: Vec<ParamId>,
    pub b_b: Vec<ParamId>,
    pub w_score: ParamId,
}

#[derive(Clone, Debug)]
pub struct FusionParams {
    pub mode: FusionMode,
    pub w_s: ParamId,
    pub b_s: ParamId,
    pub w_c: Vec<ParamId>,
    /// Present only in attention mode; simple fusion has no per-modality bias.
    pub b_c: Vec<Option<ParamId>>,
    pub modality_attention: Option<ModalityAttentionParams>,
    pub dim: usize,
}

impl FusionParams {
    /// `content_dims[k]` is the encoder output width of modality `k`.
    #[allow(clippy::too_many_arguments)]
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        mode: FusionMode,
        content_dims: &[usize],
        s_dim: usize,
        dim: usize,
        attn_dim: usize,
        scale: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        validate_modality_count(mode, content_dims.len())?;
        let w_s = store.add_uniform("fusion.W_s", &[dim, s_dim], scale, rng)?;
        let b_s = store.add_uniform("fusion.b_s", &[dim], 0.0, rng)?;
        let mut w_c = Vec::new();
        let mut b_c = Vec::new();
        for (k, &cd) in content_dims.iter().enumerate() {
            w_c.push(store.add_uniform(format!("fusion.W_c{}", k + 1), &[dim, cd], scale, rng)?);
            b_c.push(if mode == FusionMode::Attention {
                Some(store.add_uniform(format!("fusion.b_c{}", k + 1), &[dim], 0.0, rng)?)
            } else {
                None
            });
        }
        let modality_attention = if mode == FusionMode::Attention {
            let w_b = store.add_uniform("mattn.W_B", &[attn_dim, s_dim], scale, rng)?;
            let mut v_b = Vec::new();
            let mut b_b = Vec::new();
            for (k, &cd) in content_dims.iter().enumerate() {
                v_b.push(store.add_uniform(format!("mattn.V_B{}", k + 1), &[attn_dim, cd], scale, rng)?);
                b_b.push(store.add_uniform(format!("mattn.b_B{}", k + 1), &[attn_dim], 0.0, rng)?);
            }
            let w_score = store.add_uniform("mattn.w_B", &[attn_dim], scale, rng)?;
            Some(ModalityAttentionParams {
                w_b,
                v_b,
                b_b,
                w_score,
            })
        } else {
            None
        };
        Ok(Self {
            mode,
            w_s,
            b_s,
            w_c,
            b_c,
            modality_attention,
            dim,
        })
    }

    pub fn num_modalities(&self) -> usize {
        self.w_c.len()
    }
}

pub fn validate_modality_count(mode: FusionMode, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Config("at least one modality is required".into()));
    }
    if mode == FusionMode::Unimodal && k != 1 {
        return Err(Error::Config(format!(
            "unimodal fusion takes exactly one modality, got {k}"
        )));
    }
    Ok(())
}

/// `d_k = W_ck c_k + b_ck` (no bias in simple mode).
pub fn modality_projection<T: Scalar>(
    g: &mut Graph<'_, T>,
    content: Var,
    k: usize,
    p: &FusionParams,
) -> Result<Var> {
    let w = *p
        .w_c
        .get(k)
        .ok_or_else(|| Error::Config(format!("unknown modality index {k}")))?;
    let w = g.param(w);
    let wc = g.matvec(w, content)?;
    match p.b_c[k] {
        Some(b) => {
            let b = g.param(b);
            g.add(wc, b)
        }
        None => Ok(wc),
    }
}

/// Modality weights `beta[K]`.
pub fn modality_attention<T: Scalar>(
    g: &mut Graph<'_, T>,
    s_prev: Var,
    contents: &[Var],
    p: &FusionParams,
) -> Result<Var> {
    if contents.is_empty() {
        return Err(Error::EmptyInput("modality_attention"));
    }
    let ma = p.modality_attention.as_ref().ok_or_else(|| {
        Error::Config(format!("modality attention requested in {} fusion mode", p.mode))
    })?;
    if contents.len() != ma.v_b.len() {
        return Err(Error::Config(format!(
            "expected {} content vectors, got {}",
            ma.v_b.len(),
            contents.len()
        )));
    }
    let w_b = g.param(ma.w_b);
    let ws = g.matvec(w_b, s_prev)?;
    let mut rows = Vec::with_capacity(contents.len());
    for (k, &c) in contents.iter().enumerate() {
        let (v, b) = (g.param(ma.v_b[k]), g.param(ma.b_b[k]));
        let vc = g.matvec(v, c)?;
        let pre = g.add(ws, vc)?;
        let pre = g.add(pre, b)?;
        rows.push(g.tanh(pre));
    }
    let u = g.stack_rows(&rows)?;
    let w_score = g.param(ma.w_score);
    let v = g.matvec(u, w_score)?;
    g.softmax(v)
}

#[derive(Clone, Copy, Debug)]
pub struct FusionOutput {
    /// Pre-output activation `g_i`.
    pub pre_output: Var,
    /// The fused term added inside the tanh (`sum_k W_ck c_k` or
    /// `sum_k beta_k d_k`).
    pub fused: Var,
    /// Modality weights; attention mode only.
    pub beta: Option<Var>,
}

pub fn fused_preactivation<T: Scalar>(
    g: &mut Graph<'_, T>,
    s_prev: Var,
    contents: &[Var],
    p: &FusionParams,
) -> Result<FusionOutput> {
    check_contents(p, contents)?;
    match p.mode {
        FusionMode::Unimodal | FusionMode::Simple => {
            if p.b_c.iter().any(Option::is_some) || p.modality_attention.is_some() {
                return Err(Error::Config(format!(
                    "{} fusion must not carry per-modality biases or modality attention",
                    p.mode
                )));
            }
            let d: Vec<Var> = contents
                .iter()
                .enumerate()
                .map(|(k, &c)| modality_projection(g, c, k, p))
                .collect::<Result<_>>()?;
            let fused = g.add_all(&d)?;
            finish(g, s_prev, fused, None, p)
        }
        FusionMode::Attention => {
            let beta = modality_attention(g, s_prev, contents, p)?;
            fused_with_beta(g, s_prev, contents, beta, p)
        }
    }
}

/// Attention-mode fusion with externally supplied modality weights.
pub fn fused_with_beta<T: Scalar>(
    g: &mut Graph<'_, T>,
    s_prev: Var,
    contents: &[Var],
    beta: Var,
    p: &FusionParams,
) -> Result<FusionOutput> {
    check_contents(p, contents)?;
    if p.mode != FusionMode::Attention {
        return Err(Error::Config(format!(
            "modality weights supplied to {} fusion",
            p.mode
        )));
    }
    if g.shape(beta) != [contents.len()] {
        return Err(Error::Dimension {
            op: "fused_with_beta",
            lhs: g.shape(beta).to_vec(),
            rhs: vec![contents.len()],
        });
    }
    let d: Vec<Var> = contents
        .iter()
        .enumerate()
        .map(|(k, &c)| modality_projection(g, c, k, p))
        .collect::<Result<_>>()?;
    let dm = g.stack_rows(&d)?;
    let fused = g.vecmat(beta, dm)?;
    finish(g, s_prev, fused, Some(beta), p)
}

fn check_contents(p: &FusionParams, contents: &[Var]) -> Result<()> {
    if contents.len() != p.num_modalities() {
        return Err(Error::Config(format!(
            "fusion configured for {} modalities, got {} content vectors",
            p.num_modalities(),
            contents.len()
        )));
    }
    Ok(())
}

fn finish<T: Scalar>(
    g: &mut Graph<'_, T>,
    s_prev: Var,
    fused: Var,
    beta: Option<Var>,
    p: &FusionParams,
) -> Result<FusionOutput> {
    let (w_s, b_s) = (g.param(p.w_s), g.param(p.b_s));
    let ws = g.matvec(w_s, s_prev)?;
    let pre = g.add(ws, fused)?;
    let pre = g.add(pre, b_s)?;
    Ok(FusionOutput {
        pre_output: g.tanh(pre),
        fused,
        beta,
    })
}
