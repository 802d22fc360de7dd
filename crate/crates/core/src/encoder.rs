//! Per-modality encoders: bidirectional LSTM, tanh projection, or identity.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::lstm::{lstm_step, LstmParams, LstmWeights};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderMode {
    Blstm,
    Projection,
    Passthrough,
}

impl FromStr for EncoderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blstm" => Ok(Self::Blstm),
            "projection" => Ok(Self::Projection),
            "passthrough" => Ok(Self::Passthrough),
            other => Err(Error::Config(format!(
                "unknown encoder mode {other:?} (expected blstm, projection or passthrough)"
            ))),
        }
    }
}

impl fmt::Display for EncoderMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Blstm => "blstm",
            Self::Projection => "projection",
            Self::Passthrough => "passthrough",
        })
    }
}

/// `units` is the LSTM cell count per direction for `blstm` and the layer
/// width for `projection`; it is ignored for `passthrough`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub mode: EncoderMode,
    #[serde(default)]
    pub units: usize,
}

impl EncoderSpec {
    pub fn output_dim(&self, input_dim: usize) -> usize {
        match self.mode {
            EncoderMode::Blstm => 2 * self.units,
            EncoderMode::Projection => self.units,
            EncoderMode::Passthrough => input_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode != EncoderMode::Passthrough && self.units == 0 {
            return Err(Error::Config(format!("{} encoder needs units > 0", self.mode)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum EncoderParams {
    Blstm { fwd: LstmParams, bwd: LstmParams },
    Projection { w_p: ParamId, b_p: ParamId },
    Passthrough,
}

impl EncoderParams {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        scope: &str,
        spec: &EncoderSpec,
        input_dim: usize,
        scale: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        spec.validate()?;
        Ok(match spec.mode {
            EncoderMode::Blstm => Self::Blstm {
                fwd: LstmParams::register(store, &format!("{scope}.fwd"), input_dim, spec.units, scale, rng)?,
                bwd: LstmParams::register(store, &format!("{scope}.bwd"), input_dim, spec.units, scale, rng)?,
            },
            EncoderMode::Projection => Self::Projection {
                w_p: store.add_uniform(format!("{scope}.W_p"), &[spec.units, input_dim], scale, rng)?,
                b_p: store.add_uniform(format!("{scope}.b_p"), &[spec.units], 0.0, rng)?,
            },
            EncoderMode::Passthrough => Self::Passthrough,
        })
    }
}

/// Encoder states `[L, H]`, one row per input frame.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    pub states: Var,
    pub len: usize,
    pub dim: usize,
    pub modality: usize,
}

/// Forward and backward LSTM passes from zero states; row `t` of the result is
/// `[h_t^(f); h_t^(b)]`.
pub fn blstm_encode<T: Scalar>(
    g: &mut Graph<'_, T>,
    frames: Var,
    fwd: &LstmWeights,
    bwd: &LstmWeights,
) -> Result<Var> {
    let len = g.shape(frames)[0];
    if len == 0 {
        return Err(Error::EmptyInput("blstm_encode"));
    }
    let xs: Vec<Var> = (0..len).map(|t| g.row(frames, t)).collect::<Result<_>>()?;
    let run = |g: &mut Graph<'_, T>, w: &LstmWeights, order: &mut dyn Iterator<Item = usize>| {
        let zero = g.input(Tensor::zeros(&[w.cells]));
        let (mut h, mut c) = (zero, zero);
        let mut out = vec![zero; len];
        for t in order {
            (h, c) = lstm_step(g, w, xs[t], h, c)?;
            out[t] = h;
        }
        Ok::<_, Error>(out)
    };
    let hf = run(g, fwd, &mut (0..len))?;
    let hb = run(g, bwd, &mut (0..len).rev())?;
    let rows: Vec<Var> = hf
        .into_iter()
        .zip(hb)
        .map(|(f, b)| g.concat(&[f, b]))
        .collect::<Result<_>>()?;
    g.stack_rows(&rows)
}

/// Encodes one modality's `[L, D]` feature matrix.
pub fn encode_modality<T: Scalar>(
    g: &mut Graph<'_, T>,
    frames: Var,
    params: &EncoderParams,
    modality: usize,
) -> Result<EncoderOutput> {
    let shape = g.shape(frames).to_vec();
    if shape.len() != 2 {
        return Err(Error::Dimension {
            op: "encode_modality",
            lhs: shape,
            rhs: vec![],
        });
    }
    let len = shape[0];
    let states = match params {
        EncoderParams::Blstm { fwd, bwd } => {
            if shape[1] != fwd.input {
                return Err(Error::Dimension {
                    op: "encode_modality",
                    lhs: shape,
                    rhs: vec![len, fwd.input],
                });
            }
            let fw = LstmWeights::bind(g, fwd)?;
            let bw = LstmWeights::bind(g, bwd)?;
            blstm_encode(g, frames, &fw, &bw)?
        }
        EncoderParams::Projection { w_p, b_p } => {
            let (w, b) = (g.param(*w_p), g.param(*b_p));
            let lin = g.linear_rows(frames, w)?;
            let pre = g.add_rows(lin, b)?;
            g.tanh(pre)
        }
        EncoderParams::Passthrough => frames,
    };
    let dim = g.shape(states)[1];
    Ok(EncoderOutput {
        states,
        len,
        dim,
        modality,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};

    fn random_frames(rng: &mut ChaCha8Rng, l: usize, d: usize) -> Tensor<f64> {
        let data = (0..l * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::matrix(l, d, data).unwrap()
    }

    fn randomize(ps: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
        for id in ps.ids().collect::<Vec<_>>() {
            for v in ps.get_mut(id).data_mut() {
                *v = rng.random_range(-0.8..0.8);
            }
        }
    }

    #[test]
    fn passthrough_is_identity() {
        let ps = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_frames(&mut rng, 5, 3);
        let mut g = Graph::new(&ps);
        let xv = g.input(x.clone());
        let out = encode_modality(&mut g, xv, &EncoderParams::Passthrough, 0).unwrap();
        assert_eq!(g.value(out.states), &x);
        assert_eq!(out.len, 5);
        assert_eq!(out.dim, 3);
    }

    #[test]
    fn zero_projection_gives_zero_states() {
        let mut ps = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = EncoderSpec { mode: EncoderMode::Projection, units: 6 };
        let p = EncoderParams::register(&mut ps, "enc", &spec, 3, 0.0, &mut rng).unwrap();
        let mut g = Graph::new(&ps);
        let xv = g.input(random_frames(&mut rng, 4, 3));
        let out = encode_modality(&mut g, xv, &p, 0).unwrap();
        assert!(g.value(out.states).data().iter().all(|&v| v == 0.0));
        assert_eq!(g.shape(out.states), &[4, 6]);
    }

    #[test]
    fn projection_width_is_independent_of_input_dim() {
        let spec = EncoderSpec { mode: EncoderMode::Projection, units: 512 };
        for d in [7, 260, 4096] {
            assert_eq!(spec.output_dim(d), 512);
        }
        let mut ps = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = EncoderParams::register(&mut ps, "enc", &spec, 20, 0.05, &mut rng).unwrap();
        let mut g = Graph::new(&ps);
        let xv = g.input(random_frames(&mut rng, 3, 20));
        let out = encode_modality(&mut g, xv, &p, 0).unwrap();
        assert_eq!(g.shape(out.states), &[3, 512]);
    }

    #[test]
    fn unknown_mode_is_config_error() {
        assert!(matches!("gru".parse::<EncoderMode>(), Err(Error::Config(_))));
        assert_eq!("blstm".parse::<EncoderMode>().unwrap(), EncoderMode::Blstm);
    }

    #[test]
    fn blstm_single_frame_matches_one_step_each_way() {
        let mut ps = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = EncoderSpec { mode: EncoderMode::Blstm, units: 3 };
        let p = EncoderParams::register(&mut ps, "enc", &spec, 2, 0.5, &mut rng).unwrap();
        randomize(&mut ps, &mut rng);
        let EncoderParams::Blstm { fwd, bwd } = &p else { unreachable!() };
        let mut g = Graph::new(&ps);
        let x = random_frames(&mut rng, 1, 2);
        let xv = g.input(x.clone());
        let out = encode_modality(&mut g, xv, &p, 0).unwrap();
        assert_eq!(g.shape(out.states), &[1, 6]);
        let x0 = g.input(Tensor::vector(x.row(0).to_vec()).unwrap());
        let z = g.input(Tensor::zeros(&[3]));
        let fw = LstmWeights::bind(&mut g, fwd).unwrap();
        let bw = LstmWeights::bind(&mut g, bwd).unwrap();
        let (hf, _) = lstm_step(&mut g, &fw, x0, z, z).unwrap();
        let (hb, _) = lstm_step(&mut g, &bw, x0, z, z).unwrap();
        let row = g.value(out.states).row(0).to_vec();
        assert_eq!(&row[..3], g.value(hf).data());
        assert_eq!(&row[3..], g.value(hb).data());
    }

    #[test]
    fn blstm_reversal_symmetry_with_shared_params() {
        let mut ps = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shared = LstmParams::register(&mut ps, "shared", 3, 4, 0.6, &mut rng).unwrap();
        randomize(&mut ps, &mut rng);
        let x = random_frames(&mut rng, 6, 3);
        let mut rev_rows: Vec<Vec<f64>> = (0..6).map(|t| x.row(t).to_vec()).collect();
        rev_rows.reverse();
        let xr = Tensor::from_rows(&rev_rows).unwrap();

        let mut g = Graph::new(&ps);
        let w = LstmWeights::bind(&mut g, &shared).unwrap();
        let a = g.input(x);
        let b = g.input(xr);
        let ha = blstm_encode(&mut g, a, &w, &w).unwrap();
        let hb = blstm_encode(&mut g, b, &w, &w).unwrap();
        for t in 0..6 {
            let fwd_x = &g.value(ha).row(t)[..4];
            let bwd_rev = &g.value(hb).row(5 - t)[4..];
            assert_eq!(fwd_x, bwd_rev);
        }
    }

    /// Hand-unrolled three-step oracle written with scalar arithmetic only.
    #[test]
    fn blstm_matches_hand_unrolled_oracle() {
        let mut ps = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let spec = EncoderSpec { mode: EncoderMode::Blstm, units: 2 };
        let p = EncoderParams::register(&mut ps, "enc", &spec, 3, 0.5, &mut rng).unwrap();
        randomize(&mut ps, &mut rng);
        let x = random_frames(&mut rng, 3, 3);
        let mut g = Graph::new(&ps);
        let xv = g.input(x.clone());
        let out = encode_modality(&mut g, xv, &p, 0).unwrap();
        let got = g.value(out.states).clone();

        let EncoderParams::Blstm { fwd, bwd } = &p else { unreachable!() };
        let step = |lp: &LstmParams, x: &[f64], h: &[f64], c: &[f64]| {
            let aff = |w: ParamId, u: ParamId, b: ParamId, j: usize| {
                let (w, u, b) = (ps.get(w), ps.get(u), ps.get(b));
                let mut s = 0.0;
                for k in 0..x.len() {
                    s += w.data()[j * x.len() + k] * x[k];
                }
                for k in 0..h.len() {
                    s += u.data()[j * h.len() + k] * h[k];
                }
                s + b.data()[j]
            };
            let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
            let mut h2 = vec![0.0; 2];
            let mut c2 = vec![0.0; 2];
            for j in 0..2 {
                let i = sig(aff(lp.w_xi, lp.w_hi, lp.b_i, j));
                let f = sig(aff(lp.w_xf, lp.w_hf, lp.b_f, j));
                let o = sig(aff(lp.w_xo, lp.w_ho, lp.b_o, j));
                let cc = aff(lp.w_xc, lp.w_hc, lp.b_c, j).tanh();
                c2[j] = f * c[j] + i * cc;
                h2[j] = o * c2[j].tanh();
            }
            (h2, c2)
        };
        let (mut h, mut c) = (vec![0.0; 2], vec![0.0; 2]);
        let mut hf = Vec::new();
        for t in 0..3 {
            (h, c) = step(fwd, x.row(t), &h, &c);
            hf.push(h.clone());
        }
        let (mut h, mut c) = (vec![0.0; 2], vec![0.0; 2]);
        let mut hb = vec![vec![]; 3];
        for t in (0..3).rev() {
            (h, c) = step(bwd, x.row(t), &h, &c);
            hb[t] = h.clone();
        }
        for t in 0..3 {
            let want: Vec<f64> = hf[t].iter().chain(&hb[t]).copied().collect();
            for (a, b) in got.row(t).iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "t={t}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn empty_sequence_is_rejected() {
        // zero-row matrices cannot be constructed, so emptiness is caught at
        // the tensor boundary
        assert!(Tensor::<f64>::matrix(0, 3, vec![]).is_err());
    }
}
