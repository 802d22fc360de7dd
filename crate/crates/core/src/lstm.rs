//! LSTM cell without peephole connections.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

/// Parameter ids of one LSTM: input-to-gate matrices `W_x*` are
/// `[cells, input]`, hidden-to-gate matrices `W_h*` are `[cells, cells]`, and
/// biases are `[cells]`.
#[derive(Clone, Debug)]
pub struct LstmParams {
    pub w_xi: ParamId,
    pub w_hi: ParamId,
    pub w_xf: ParamId,
    pub w_hf: ParamId,
    pub w_xo: ParamId,
    pub w_ho: ParamId,
    pub w_xc: ParamId,
    pub w_hc: ParamId,
    pub b_i: ParamId,
    pub b_f: ParamId,
    pub b_o: ParamId,
    pub b_c: ParamId,
    pub input: usize,
    pub cells: usize,
}

impl LstmParams {
    /// Registers `{scope}.W_xi`, `{scope}.W_hi`, ..., `{scope}.b_c`. Matrices
    /// are uniform in `[-scale, scale]`, biases start at zero.
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        scope: &str,
        input: usize,
        cells: usize,
        scale: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut m = |name: &str, cols: usize| {
            store.add_uniform(format!("{scope}.{name}"), &[cells, cols], scale, rng)
        };
        let (w_xi, w_hi) = (m("W_xi", input)?, m("W_hi", cells)?);
        let (w_xf, w_hf) = (m("W_xf", input)?, m("W_hf", cells)?);
        let (w_xo, w_ho) = (m("W_xo", input)?, m("W_ho", cells)?);
        let (w_xc, w_hc) = (m("W_xc", input)?, m("W_hc", cells)?);
        let mut b = |name: &str| store.add_uniform(format!("{scope}.{name}"), &[cells], 0.0, rng);
        Ok(Self {
            w_xi,
            w_hi,
            w_xf,
            w_hf,
            w_xo,
            w_ho,
            w_xc,
            w_hc,
            b_i: b("b_i")?,
            b_f: b("b_f")?,
            b_o: b("b_o")?,
            b_c: b("b_c")?,
            input,
            cells,
        })
    }

    pub fn all(&self) -> [ParamId; 12] {
        [
            self.w_xi, self.w_hi, self.w_xf, self.w_hf, self.w_xo, self.w_ho, self.w_xc,
            self.w_hc, self.b_i, self.b_f, self.b_o, self.b_c,
        ]
    }
}

/// Gate weights stacked in `i, f, o, c` order so each step needs one
/// input affine and one recurrent affine.
#[derive(Clone, Copy, Debug)]
pub struct LstmWeights {
    wx: Var,
    wh: Var,
    b: Var,
    pub input: usize,
    pub cells: usize,
}

impl LstmWeights {
    pub fn bind<T: Scalar>(g: &mut Graph<'_, T>, p: &LstmParams) -> Result<Self> {
        let wx = [p.w_xi, p.w_xf, p.w_xo, p.w_xc].map(|id| g.param(id));
        let wh = [p.w_hi, p.w_hf, p.w_ho, p.w_hc].map(|id| g.param(id));
        let b = [p.b_i, p.b_f, p.b_o, p.b_c].map(|id| g.param(id));
        Ok(Self {
            wx: g.stack_rows(&wx)?,
            wh: g.stack_rows(&wh)?,
            b: g.concat(&b)?,
            input: p.input,
            cells: p.cells,
        })
    }
}

/// One cell update; returns `(h_t, c_t)`.
pub fn lstm_step<T: Scalar>(
    g: &mut Graph<'_, T>,
    w: &LstmWeights,
    x: Var,
    h_prev: Var,
    c_prev: Var,
) -> Result<(Var, Var)> {
    let n = w.cells;
    let wx = g.matvec(w.wx, x)?;
    let wh = g.matvec(w.wh, h_prev)?;
    let pre = g.add(wx, wh)?;
    let pre = g.add(pre, w.b)?;
    let i = g.slice(pre, 0, n)?;
    let f = g.slice(pre, n, n)?;
    let o = g.slice(pre, 2 * n, n)?;
    let cand = g.slice(pre, 3 * n, n)?;
    let i = g.sigmoid(i);
    let f = g.sigmoid(f);
    let o = g.sigmoid(o);
    let cand = g.tanh(cand);
    gate_update(g, i, f, o, cand, c_prev)
}

/// Reference path with four separate affines per gate; must agree bit for bit
/// with [`lstm_step`].
pub fn lstm_step_unfused<T: Scalar>(
    g: &mut Graph<'_, T>,
    p: &LstmParams,
    x: Var,
    h_prev: Var,
    c_prev: Var,
) -> Result<(Var, Var)> {
    let gate = |g: &mut Graph<'_, T>, wx, wh, b| -> Result<Var> {
        let (wx, wh, b) = (g.param(wx), g.param(wh), g.param(b));
        let a = g.matvec(wx, x)?;
        let r = g.matvec(wh, h_prev)?;
        let s = g.add(a, r)?;
        g.add(s, b)
    };
    let i = gate(g, p.w_xi, p.w_hi, p.b_i)?;
    let f = gate(g, p.w_xf, p.w_hf, p.b_f)?;
    let o = gate(g, p.w_xo, p.w_ho, p.b_o)?;
    let cand = gate(g, p.w_xc, p.w_hc, p.b_c)?;
    let i = g.sigmoid(i);
    let f = g.sigmoid(f);
    let o = g.sigmoid(o);
    let cand = g.tanh(cand);
    gate_update(g, i, f, o, cand, c_prev)
}

fn gate_update<T: Scalar>(
    g: &mut Graph<'_, T>,
    i: Var,
    f: Var,
    o: Var,
    cand: Var,
    c_prev: Var,
) -> Result<(Var, Var)> {
    let keep = g.mul(f, c_prev)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c);
    let h = g.mul(o, tc)?;
    Ok((h, c))
}
