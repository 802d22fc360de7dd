//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node in creation order, which is
//! also a topological order. [`Graph::backward`] walks the nodes in reverse and
//! accumulates gradients, so the summation order for a parameter used in many
//! places is fixed by the order the forward pass was written in. The graph is
//! rebuilt for every training example.

use crate::error::{dim_err, Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Tanh,
    Sigmoid,
    Mul,
    Add,
}

/// Deliberately wrong gradient rules, used as a negative control for the
/// finite-difference checker.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradFault {
    /// Sigmoid backward uses `y` instead of `y (1 - y)`.
    Sigmoid,
    /// Tanh backward drops the `y^2` term.
    Tanh,
}

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    MatVec(Var, Var),
    LinearRows(Var, Var),
    VecMat(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRows(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    CrossEntropy { logits: Var, target: usize, probs: Vec<T> },
    Concat(Vec<Var>),
    StackRows(Vec<Var>),
    Slice { src: Var, start: usize },
    Row { src: Var, index: usize },
    Sum(Var),
    Scale(Var, T),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<'p, T> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
    fault: Option<GradFault>,
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            fault: None,
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn inject_fault(&mut self, fault: Option<GradFault>) {
        self.fault = fault;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Param(_) => true,
            Op::Input => false,
            _ => inputs.iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant leaf; no gradient flows into it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, &[])
    }

    /// The leaf for a learnable parameter. Repeated calls return the same node,
    /// so every use of a parameter feeds one gradient buffer.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(self.params.get(id).clone(), Op::Param(id), &[]);
        self.param_vars[id.0] = Some(v);
        v
    }

    fn expect_vector(&self, op: &'static str, v: Var) -> Result<usize> {
        let s = self.shape(v);
        if s.len() != 1 {
            return dim_err(op, s, &[]);
        }
        Ok(s[0])
    }

    fn expect_matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return dim_err(op, s, &[]);
        }
        Ok((s[0], s[1]))
    }

    /// `m x` for `m: [r, c]`, `x: [c]`.
    pub fn matvec(&mut self, m: Var, x: Var) -> Result<Var> {
        let (r, c) = self.expect_matrix("matvec", m)?;
        let n = self.expect_vector("matvec", x)?;
        if n != c {
            return dim_err("matvec", self.shape(m), self.shape(x));
        }
        let (mv, xv) = (self.value(m).data(), self.value(x).data());
        let out: Vec<T> = (0..r).map(|i| dot(&mv[i * c..(i + 1) * c], xv)).collect();
        let t = Tensor::vector(out)?;
        Ok(self.push(t, Op::MatVec(m, x), &[m, x]))
    }

    /// `W x + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let wx = self.matvec(w, x)?;
        self.add(wx, b)
    }

    /// Row-wise linear map `x w^T` for `x: [l, n]`, `w: [m, n]`, giving `[l, m]`.
    pub fn linear_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (l, n) = self.expect_matrix("linear_rows", x)?;
        let (m, n2) = self.expect_matrix("linear_rows", w)?;
        if n != n2 {
            return dim_err("linear_rows", self.shape(x), self.shape(w));
        }
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let mut out = Vec::with_capacity(l * m);
        for r in 0..l {
            let xr = &xv[r * n..(r + 1) * n];
            for i in 0..m {
                out.push(dot(xr, &wv[i * n..(i + 1) * n]));
            }
        }
        let t = Tensor::matrix(l, m, out)?;
        Ok(self.push(t, Op::LinearRows(x, w), &[x, w]))
    }

    /// `v^T m` for `v: [l]`, `m: [l, d]`: the `v`-weighted sum of the rows.
    pub fn vecmat(&mut self, v: Var, m: Var) -> Result<Var> {
        let l = self.expect_vector("vecmat", v)?;
        let (r, d) = self.expect_matrix("vecmat", m)?;
        if l != r {
            return dim_err("vecmat", self.shape(v), self.shape(m));
        }
        let (vv, mv) = (self.value(v).data(), self.value(m).data());
        let mut out = vec![T::zero(); d];
        for (t, &w) in vv.iter().enumerate() {
            for (o, &h) in out.iter_mut().zip(&mv[t * d..(t + 1) * d]) {
                *o += w * h;
            }
        }
        let t = Tensor::vector(out)?;
        Ok(self.push(t, Op::VecMat(v, m), &[v, m]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(op, self.shape(a), self.shape(b));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    /// Sums a non-empty list left to right.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars.split_first().ok_or(Error::EmptyInput("add_all"))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// Adds the vector `v: [c]` to every row of `m: [r, c]`.
    pub fn add_rows(&mut self, m: Var, v: Var) -> Result<Var> {
        let (r, c) = self.expect_matrix("add_rows", m)?;
        let n = self.expect_vector("add_rows", v)?;
        if n != c {
            return dim_err("add_rows", self.shape(m), self.shape(v));
        }
        let (mv, vv) = (self.value(m).data(), self.value(v).data());
        let mut out = Vec::with_capacity(r * c);
        for row in mv.chunks(c) {
            out.extend(row.iter().zip(vv).map(|(&x, &y)| x + y));
        }
        let t = Tensor::matrix(r, c, out)?;
        Ok(self.push(t, Op::AddRows(m, v), &[m, v]))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.tanh());
        self.push(t, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self
            .value(a)
            .map(|x| T::one() / (T::one() + (-x).exp()));
        self.push(t, Op::Sigmoid(a), &[a])
    }

    pub fn elementwise(&mut self, kind: Elementwise, args: &[Var]) -> Result<Var> {
        match (kind, args) {
            (Elementwise::Tanh, &[a]) => Ok(self.tanh(a)),
            (Elementwise::Sigmoid, &[a]) => Ok(self.sigmoid(a)),
            (Elementwise::Mul, &[a, b]) => self.mul(a, b),
            (Elementwise::Add, &[a, b]) => self.add(a, b),
            _ => Err(Error::Contract(format!(
                "{kind:?} takes {} argument(s), got {}",
                if matches!(kind, Elementwise::Tanh | Elementwise::Sigmoid) { 1 } else { 2 },
                args.len()
            ))),
        }
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.expect_vector("softmax", a)?;
        let p = tensor::softmax(self.value(a).data())?;
        let t = Tensor::vector(p)?;
        Ok(self.push(t, Op::Softmax(a), &[a]))
    }

    /// `-log softmax(logits)[target]` as a scalar node.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let n = self.expect_vector("cross_entropy", logits)?;
        if target >= n {
            return Err(Error::Contract(format!(
                "cross_entropy target {target} out of range for {n} classes"
            )));
        }
        let lp = tensor::log_softmax(self.value(logits).data())?;
        let probs = lp.iter().map(|v| v.exp()).collect();
        let t = Tensor::scalar(-lp[target]);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            &[logits],
        ))
    }

    /// Concatenates vectors end to end.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat"));
        }
        let mut data = Vec::new();
        for &p in parts {
            self.expect_vector("concat", p)?;
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::vector(data)?;
        Ok(self.push(t, Op::Concat(parts.to_vec()), parts))
    }

    /// Stacks vectors (as single rows) and matrices with a common column count.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptyInput("stack_rows"))?;
        let cols = *self.shape(first).last().unwrap();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            let (r, c) = match s.len() {
                1 => (1, s[0]),
                2 => (s[0], s[1]),
                _ => return dim_err("stack_rows", s, &[cols]),
            };
            if c != cols {
                return dim_err("stack_rows", s, &[cols]);
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(t, Op::StackRows(parts.to_vec()), parts))
    }

    /// `src[start..start + len]` of a vector.
    pub fn slice(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let n = self.expect_vector("slice", src)?;
        if len == 0 || start + len > n {
            return dim_err("slice", &[n], &[start, len]);
        }
        let t = Tensor::vector(self.value(src).data()[start..start + len].to_vec())?;
        Ok(self.push(t, Op::Slice { src, start }, &[src]))
    }

    /// Row `index` of a matrix, as a vector.
    pub fn row(&mut self, src: Var, index: usize) -> Result<Var> {
        let (r, _) = self.expect_matrix("row", src)?;
        if index >= r {
            return dim_err("row", self.shape(src), &[index]);
        }
        let t = Tensor::vector(self.value(src).row(index).to_vec())?;
        Ok(self.push(t, Op::Row { src, index }, &[src]))
    }

    /// Sum of all elements as a scalar node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let t = self.value(a).map(|x| x * c);
        self.push(t, Op::Scale(a, c), &[a])
    }

    /// Gradients of the scalar `loss` with respect to every parameter that
    /// reaches it.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients::empty(self.params.len());

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let y = node.value.data();
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    out.set(*id, Tensor::new(node.value.shape().to_vec(), g)?);
                }
                Op::MatVec(m, x) => {
                    let (r, c) = (self.shape(*m)[0], self.shape(*m)[1]);
                    let xv = self.value(*x).data();
                    self.acc(&mut grads, *m, |dm| {
                        for i in 0..r {
                            let gi = g[i];
                            for (d, &xj) in dm[i * c..(i + 1) * c].iter_mut().zip(xv) {
                                *d += gi * xj;
                            }
                        }
                    });
                    let mv = self.value(*m).data();
                    self.acc(&mut grads, *x, |dx| {
                        for i in 0..r {
                            let gi = g[i];
                            for (d, &mij) in dx.iter_mut().zip(&mv[i * c..(i + 1) * c]) {
                                *d += mij * gi;
                            }
                        }
                    });
                }
                Op::LinearRows(x, w) => {
                    let (l, n) = (self.shape(*x)[0], self.shape(*x)[1]);
                    let m = self.shape(*w)[0];
                    let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                    self.acc(&mut grads, *x, |dx| {
                        for r in 0..l {
                            for i in 0..m {
                                let gri = g[r * m + i];
                                for (d, &wij) in
                                    dx[r * n..(r + 1) * n].iter_mut().zip(&wv[i * n..(i + 1) * n])
                                {
                                    *d += gri * wij;
                                }
                            }
                        }
                    });
                    self.acc(&mut grads, *w, |dw| {
                        for r in 0..l {
                            for i in 0..m {
                                let gri = g[r * m + i];
                                for (d, &xrj) in
                                    dw[i * n..(i + 1) * n].iter_mut().zip(&xv[r * n..(r + 1) * n])
                                {
                                    *d += gri * xrj;
                                }
                            }
                        }
                    });
                }
                Op::VecMat(v, m) => {
                    let d = self.shape(*m)[1];
                    let (vv, mv) = (self.value(*v).data(), self.value(*m).data());
                    self.acc(&mut grads, *v, |dv| {
                        for (t, dvt) in dv.iter_mut().enumerate() {
                            *dvt += dot(&g, &mv[t * d..(t + 1) * d]);
                        }
                    });
                    self.acc(&mut grads, *m, |dm| {
                        for (t, &w) in vv.iter().enumerate() {
                            for (dd, &gd) in dm[t * d..(t + 1) * d].iter_mut().zip(&g) {
                                *dd += w * gd;
                            }
                        }
                    });
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, |da| add_into(da, &g));
                    self.acc(&mut grads, *b, |db| add_into(db, &g));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    self.acc(&mut grads, *a, |da| {
                        for ((d, &gi), &bi) in da.iter_mut().zip(&g).zip(bv) {
                            *d += gi * bi;
                        }
                    });
                    self.acc(&mut grads, *b, |db| {
                        for ((d, &gi), &ai) in db.iter_mut().zip(&g).zip(av) {
                            *d += gi * ai;
                        }
                    });
                }
                Op::AddRows(m, v) => {
                    let c = self.shape(*v)[0];
                    self.acc(&mut grads, *m, |dm| add_into(dm, &g));
                    self.acc(&mut grads, *v, |dv| {
                        for row in g.chunks(c) {
                            add_into(dv, row);
                        }
                    });
                }
                Op::Tanh(a) => {
                    let faulty = self.fault == Some(GradFault::Tanh);
                    self.acc(&mut grads, *a, |da| {
                        for ((d, &gi), &yi) in da.iter_mut().zip(&g).zip(y) {
                            let local = if faulty { T::one() } else { T::one() - yi * yi };
                            *d += gi * local;
                        }
                    });
                }
                Op::Sigmoid(a) => {
                    let faulty = self.fault == Some(GradFault::Sigmoid);
                    self.acc(&mut grads, *a, |da| {
                        for ((d, &gi), &yi) in da.iter_mut().zip(&g).zip(y) {
                            let local = if faulty { yi } else { yi * (T::one() - yi) };
                            *d += gi * local;
                        }
                    });
                }
                Op::Softmax(a) => {
                    let gy = dot(&g, y);
                    self.acc(&mut grads, *a, |da| {
                        for ((d, &gi), &yi) in da.iter_mut().zip(&g).zip(y) {
                            *d += yi * (gi - gy);
                        }
                    });
                }
                Op::CrossEntropy {
                    logits,
                    target,
                    probs,
                } => {
                    let g0 = g[0];
                    self.acc(&mut grads, *logits, |dl| {
                        for (k, (d, &p)) in dl.iter_mut().zip(probs).enumerate() {
                            let onehot = if k == *target { T::one() } else { T::zero() };
                            *d += g0 * (p - onehot);
                        }
                    });
                }
                Op::Concat(parts) | Op::StackRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        let seg = &g[off..off + n];
                        self.acc(&mut grads, p, |dp| add_into(dp, seg));
                        off += n;
                    }
                }
                Op::Slice { src, start } => {
                    let start = *start;
                    self.acc(&mut grads, *src, |ds| add_into(&mut ds[start..start + g.len()], &g));
                }
                Op::Row { src, index } => {
                    let c = self.shape(*src)[1];
                    let index = *index;
                    self.acc(&mut grads, *src, |ds| {
                        add_into(&mut ds[index * c..(index + 1) * c], &g)
                    });
                }
                Op::Sum(a) => {
                    let g0 = g[0];
                    self.acc(&mut grads, *a, |da| {
                        for d in da.iter_mut() {
                            *d += g0;
                        }
                    });
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    self.acc(&mut grads, *a, |da| {
                        for (d, &gi) in da.iter_mut().zip(&g) {
                            *d += gi * c;
                        }
                    });
                }
            }
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
        f(buf);
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
