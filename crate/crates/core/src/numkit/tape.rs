//! Matrix-level reverse-mode differentiation.
//!
//! Every node holds a dense [`Mat`] value. Operations are recorded in
//! evaluation order; [`Tape::backward`] walks them in reverse and
//! accumulates adjoints. Nodes that do not depend on any parameter leaf are
//! skipped during the backward sweep.

use std::sync::Arc;

use crate::error::Result;
use crate::numkit::chol::{cholesky, CholFactor, JitterPolicy};
use crate::numkit::mat::Mat;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which log-likelihood estimator a data term uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LikKind {
    /// `log E_q[p(y|f)]`
    LogExpected,
    /// `E_q[log p(y|f)]`
    ExpectedLog,
}

/// A symmetric positive-definite node together with its factorization.
#[derive(Clone, Debug)]
pub struct Spd {
    var: Var,
    factor: Arc<CholFactor>,
}

impl Spd {
    pub fn factor(&self) -> &CholFactor {
        &self.factor
    }

    pub fn var(&self) -> Var {
        self.var
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddDiag(Var),
    MulScalar(Var, Var),
    AddScalar(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Trace(Var),
    TrilFromPacked(Var),
    Rbf {
        x1: Var,
        x2: Var,
        log_amp: Var,
        log_ls: Var,
    },
    SpdSolve {
        p: Var,
        b: Var,
        factor: Arc<CholFactor>,
    },
    SpdLogDet {
        p: Var,
        factor: Arc<CholFactor>,
    },
    Cholesky(Var),
    ColDots(Var, Var),
    BlockGram {
        u: Var,
        v: Var,
        block: usize,
    },
    GatherCols(Var, Vec<usize>),
    GatherEntries(Var, Vec<usize>, Vec<usize>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    AddRowBroadcast(Var, Var),
    GaussLogLik {
        y: Vec<f64>,
        mean: Var,
        var: Var,
        noise: Option<Var>,
        kind: LikKind,
    },
    SoftmaxLogLik {
        f: Var,
        class: usize,
        kind: LikKind,
    },
    FlipAdjoint(Var),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    jitters: Vec<f64>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Grads {
    grads: Vec<Option<Mat>>,
    shapes: Vec<(usize, usize)>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    /// Adjoint of `v`, zeros when the output does not depend on it.
    pub fn wrt(&self, v: Var) -> Mat {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Mat::zeros(r, c)
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.scalar_value()
    }

    /// Jitter applied by every factorization recorded so far.
    pub fn jitters(&self) -> &[f64] {
        &self.jitters
    }

    /// Number of factorizations that needed a non-zero jitter.
    pub fn jitter_events(&self) -> usize {
        self.jitters.iter().filter(|&&j| j > 0.0).count()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn ng2(&self, a: Var, b: Var) -> bool {
        self.ng(a) || self.ng(b)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that is a parameter or a constant depending on `trainable`.
    pub fn leaf(&mut self, value: Mat, trainable: bool) -> Var {
        self.push(value, Op::Leaf, trainable)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b));
        let ng = self.ng2(a, b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).sub(self.value(b));
        let ng = self.ng2(a, b);
        self.push(v, Op::Sub(a, b), ng)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).hadamard(self.value(b));
        let ng = self.ng2(a, b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    /// `a + c I`.
    pub fn add_diag(&mut self, a: Var, c: f64) -> Var {
        let mut v = self.value(a).clone();
        v.add_diag(c);
        let ng = self.ng(a);
        self.push(v, Op::AddDiag(a), ng)
    }

    /// `a * s` with `s` a 1x1 node.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let v = self.value(a).scale(self.scalar(s));
        let ng = self.ng2(a, s);
        self.push(v, Op::MulScalar(a, s), ng)
    }

    /// `a + s` with `s` a 1x1 node broadcast to every entry.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Var {
        let c = self.scalar(s);
        let v = self.value(a).map(|x| x + c);
        let ng = self.ng2(a, s);
        self.push(v, Op::AddScalar(a, s), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.ng2(a, b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(v, Op::Transpose(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        let ng = self.ng(a);
        self.push(v, Op::Exp(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        let ng = self.ng(a);
        self.push(v, Op::Log(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::Sum(a), ng)
    }

    pub fn trace(&mut self, a: Var) -> Var {
        let v = Mat::scalar(self.value(a).trace());
        let ng = self.ng(a);
        self.push(v, Op::Trace(a), ng)
    }

    /// Lower-triangular `n x n` matrix from a packed row-major lower
    /// triangle (1 x n(n+1)/2) whose diagonal entries are log-values.
    pub fn tril_from_packed(&mut self, packed: Var) -> Var {
        let p = self.value(packed).as_slice();
        let n = packed_dim(p.len());
        let mut l = Mat::zeros(n, n);
        let mut k = 0;
        for i in 0..n {
            for j in 0..=i {
                l[(i, j)] = if i == j { p[k].exp() } else { p[k] };
                k += 1;
            }
        }
        let ng = self.ng(packed);
        self.push(l, Op::TrilFromPacked(packed), ng)
    }

    /// Squared-exponential kernel matrix
    /// `amp * exp(-½ Σ_d (x1_id - x2_jd)² / ls_d)` with `amp = exp(log_amp)`
    /// and `ls = exp(log_ls)`.
    pub fn rbf(&mut self, x1: Var, x2: Var, log_amp: Var, log_ls: Var) -> Var {
        let v = rbf_value(
            self.value(x1),
            self.value(x2),
            self.scalar(log_amp),
            self.value(log_ls).as_slice(),
        );
        let ng = self.ng2(x1, x2) || self.ng2(log_amp, log_ls);
        self.push(
            v,
            Op::Rbf {
                x1,
                x2,
                log_amp,
                log_ls,
            },
            ng,
        )
    }

    /// Factors a symmetric positive-definite node (jitter ladder applied).
    pub fn spd(&mut self, p: Var) -> Result<Spd> {
        let factor = cholesky(self.value(p), JitterPolicy::Ladder)?;
        self.jitters.push(factor.jitter());
        Ok(Spd {
            var: p,
            factor: Arc::new(factor),
        })
    }

    /// `P^{-1} B`.
    pub fn spd_solve(&mut self, p: &Spd, b: Var) -> Var {
        let v = p.factor.solve_mat(self.value(b));
        let ng = self.ng2(p.var, b);
        self.push(
            v,
            Op::SpdSolve {
                p: p.var,
                b,
                factor: Arc::clone(&p.factor),
            },
            ng,
        )
    }

    /// `log |P|`.
    pub fn spd_logdet(&mut self, p: &Spd) -> Var {
        let v = Mat::scalar(p.factor.logdet());
        let ng = self.ng(p.var);
        self.push(
            v,
            Op::SpdLogDet {
                p: p.var,
                factor: Arc::clone(&p.factor),
            },
            ng,
        )
    }

    /// Lower Cholesky factor of a symmetric node, jitter ladder applied.
    pub fn cholesky(&mut self, a: Var) -> Result<Var> {
        let factor = cholesky(self.value(a), JitterPolicy::Ladder)?;
        self.jitters.push(factor.jitter());
        let ng = self.ng(a);
        Ok(self.push(factor.l().clone(), Op::Cholesky(a), ng))
    }

    /// Row vector of column-wise inner products `Σ_i a_ij b_ij`.
    pub fn col_dots(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "col_dots: shape mismatch");
        let mut out = Mat::zeros(1, av.cols());
        for i in 0..av.rows() {
            for (o, (x, y)) in out.as_mut_slice().iter_mut().zip(av.row(i).iter().zip(bv.row(i))) {
                *o += x * y;
            }
        }
        let ng = self.ng2(a, b);
        self.push(out, Op::ColDots(a, b), ng)
    }

    /// For `u`, `v` of shape `m x (n·block)`, stacks the `n` blocks
    /// `u[:, blk]ᵀ v[:, blk]` into an `(n·block) x block` matrix.
    pub fn block_gram(&mut self, u: Var, v: Var, block: usize) -> Var {
        let (uv, vv) = (self.value(u), self.value(v));
        assert_eq!(uv.shape(), vv.shape(), "block_gram: shape mismatch");
        assert_eq!(uv.cols() % block, 0, "block_gram: ragged blocks");
        let n = uv.cols() / block;
        let mut out = Mat::zeros(n * block, block);
        for m in 0..uv.rows() {
            let (ur, vr) = (uv.row(m), vv.row(m));
            for b in 0..n {
                for i in 0..block {
                    let ui = ur[b * block + i];
                    if ui == 0.0 {
                        continue;
                    }
                    let orow = out.row_mut(b * block + i);
                    for j in 0..block {
                        orow[j] += ui * vr[b * block + j];
                    }
                }
            }
        }
        let ng = self.ng2(u, v);
        self.push(out, Op::BlockGram { u, v, block }, ng)
    }

    /// Columns of `a` in the order given by `idx` (repetition allowed).
    pub fn gather_cols(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let av = self.value(a);
        let out = Mat::from_fn(av.rows(), idx.len(), |i, k| av[(i, idx[k])]);
        let ng = self.ng(a);
        self.push(out, Op::GatherCols(a, idx), ng)
    }

    /// `out[i][j] = a[rows[i]][cols[j]]`.
    pub fn gather_entries(&mut self, a: Var, rows: Vec<usize>, cols: Vec<usize>) -> Var {
        let av = self.value(a);
        let out = Mat::from_fn(rows.len(), cols.len(), |i, j| av[(rows[i], cols[j])]);
        let ng = self.ng(a);
        self.push(out, Op::GatherEntries(a, rows, cols), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let out = Mat::from_fn(len, av.cols(), |i, j| av[(start + i, j)]);
        let ng = self.ng(a);
        self.push(out, Op::SliceRows(a, start), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let out = Mat::from_fn(av.rows(), len, |i, j| av[(i, start + j)]);
        let ng = self.ng(a);
        self.push(out, Op::SliceCols(a, start), ng)
    }

    /// Adds the 1 x c node `row` to every row of `a`.
    pub fn add_row_broadcast(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row).as_slice().to_vec();
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            for (o, x) in out.row_mut(i).iter_mut().zip(&r) {
                *o += x;
            }
        }
        let ng = self.ng2(a, row);
        self.push(out, Op::AddRowBroadcast(a, row), ng)
    }

    /// Per-point Gaussian data term for targets `y` (1 x n row), latent mean
    /// and variance rows, and an optional 1x1 noise variance node.
    pub fn gauss_loglik(
        &mut self,
        y: Vec<f64>,
        mean: Var,
        var: Var,
        noise: Option<Var>,
        kind: LikKind,
    ) -> Var {
        let (m, v) = (self.value(mean).as_slice(), self.value(var).as_slice());
        let s2 = noise.map_or(0.0, |n| self.scalar(n));
        let out: Vec<f64> = y
            .iter()
            .zip(m.iter().zip(v))
            .map(|(&yi, (&mi, &vi))| {
                let r = yi - mi;
                match kind {
                    LikKind::LogExpected => {
                        let t = vi + s2;
                        -0.5 * (LN_2PI + t.ln() + r * r / t)
                    }
                    LikKind::ExpectedLog => -0.5 * (LN_2PI + s2.ln() + (r * r + vi) / s2),
                }
            })
            .collect();
        let ng = self.ng2(mean, var) || noise.is_some_and(|n| self.ng(n));
        self.push(
            Mat::row_vec(&out),
            Op::GaussLogLik {
                y,
                mean,
                var,
                noise,
                kind,
            },
            ng,
        )
    }

    /// Monte Carlo categorical data term over `f` (samples x classes):
    /// `log mean_s softmax(f_s)_class` or `mean_s log softmax(f_s)_class`.
    pub fn softmax_loglik(&mut self, f: Var, class: usize, kind: LikKind) -> Var {
        let logp = log_softmax_at(self.value(f), class);
        let s = logp.len() as f64;
        let v = match kind {
            LikKind::LogExpected => log_sum_exp(&logp) - s.ln(),
            LikKind::ExpectedLog => logp.iter().sum::<f64>() / s,
        };
        let ng = self.ng(f);
        self.push(Mat::scalar(v), Op::SoftmaxLogLik { f, class, kind }, ng)
    }

    /// Identity in the forward pass, negated adjoint in the backward pass.
    /// Used to verify that gradient checks catch adjoint faults.
    pub fn flip_adjoint(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        let ng = self.ng(a);
        self.push(v, Op::FlipAdjoint(a), ng)
    }

    /// Reverse sweep from the scalar node `out`.
    pub fn backward(&self, out: Var) -> Grads {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Mat>> = (0..n).map(|_| None).collect();
        grads[out.0] = Some(Mat::filled(
            self.value(out).rows(),
            self.value(out).cols(),
            1.0,
        ));
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        }
    }

    fn acc(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g.hadamard(self.value(*b)));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, g.hadamard(self.value(*a)));
                }
            }
            Op::Scale(a, c) => self.acc(grads, *a, g.scale(*c)),
            Op::AddDiag(a) => self.acc(grads, *a, g.clone()),
            Op::MulScalar(a, s) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g.scale(self.scalar(*s)));
                }
                if self.ng(*s) {
                    let d = g.hadamard(self.value(*a)).sum();
                    self.acc(grads, *s, Mat::scalar(d));
                }
            }
            Op::AddScalar(a, s) => {
                self.acc(grads, *a, g.clone());
                if self.ng(*s) {
                    self.acc(grads, *s, Mat::scalar(g.sum()));
                }
            }
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g.matmul_tr(self.value(*b)));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, self.value(*a).tr_matmul(g));
                }
            }
            Op::Transpose(a) => self.acc(grads, *a, g.transpose()),
            Op::Exp(a) => self.acc(grads, *a, g.hadamard(&node.value)),
            Op::Log(a) => self.acc(grads, *a, g.zip_map(self.value(*a), |gi, x| gi / x)),
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                self.acc(grads, *a, Mat::filled(r, c, g.scalar_value()));
            }
            Op::Trace(a) => {
                let n = self.value(*a).rows();
                self.acc(grads, *a, Mat::identity(n).scale(g.scalar_value()));
            }
            Op::TrilFromPacked(p) => {
                let n = node.value.rows();
                let mut out = Vec::with_capacity(n * (n + 1) / 2);
                for i in 0..n {
                    for j in 0..=i {
                        out.push(if i == j {
                            g[(i, i)] * node.value[(i, i)]
                        } else {
                            g[(i, j)]
                        });
                    }
                }
                self.acc(grads, *p, Mat::row_vec(&out));
            }
            Op::Rbf {
                x1,
                x2,
                log_amp,
                log_ls,
            } => self.rbf_backward(node, g, *x1, *x2, *log_amp, *log_ls, grads),
            Op::SpdSolve { p, b, factor } => {
                let gb = factor.solve_mat(g);
                if self.ng(*p) {
                    // P̄ = -B̄ Xᵀ, symmetrized
                    let gp = gb.matmul_tr(&node.value).scale(-1.0);
                    self.acc(grads, *p, symmetrize(&gp));
                }
                self.acc(grads, *b, gb);
            }
            Op::SpdLogDet { p, factor } => {
                self.acc(grads, *p, factor.inverse().scale(g.scalar_value()));
            }
            Op::Cholesky(a) => self.acc(grads, *a, cholesky_adjoint(&node.value, g)),
            Op::ColDots(a, b) => {
                let row = g.as_slice();
                let scale_cols = |m: &Mat| {
                    let mut out = m.clone();
                    for i in 0..out.rows() {
                        for (o, s) in out.row_mut(i).iter_mut().zip(row) {
                            *o *= s;
                        }
                    }
                    out
                };
                if self.ng(*a) {
                    self.acc(grads, *a, scale_cols(self.value(*b)));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, scale_cols(self.value(*a)));
                }
            }
            Op::BlockGram { u, v, block } => {
                let block = *block;
                let (uv, vv) = (self.value(*u), self.value(*v));
                let n = uv.cols() / block;
                let mut gu = Mat::zeros(uv.rows(), uv.cols());
                let mut gv = Mat::zeros(vv.rows(), vv.cols());
                for m in 0..uv.rows() {
                    for b in 0..n {
                        for i in 0..block {
                            let grow = g.row(b * block + i);
                            let ui = uv[(m, b * block + i)];
                            let mut acc_u = 0.0;
                            for j in 0..block {
                                acc_u += grow[j] * vv[(m, b * block + j)];
                                gv[(m, b * block + j)] += grow[j] * ui;
                            }
                            gu[(m, b * block + i)] += acc_u;
                        }
                    }
                }
                self.acc(grads, *u, gu);
                self.acc(grads, *v, gv);
            }
            Op::GatherCols(a, idx) => {
                let (r, c) = self.value(*a).shape();
                let mut ga = Mat::zeros(r, c);
                for i in 0..r {
                    for (k, &j) in idx.iter().enumerate() {
                        ga[(i, j)] += g[(i, k)];
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::GatherEntries(a, rows, cols) => {
                let (r, c) = self.value(*a).shape();
                let mut ga = Mat::zeros(r, c);
                for (i, &ri) in rows.iter().enumerate() {
                    for (j, &cj) in cols.iter().enumerate() {
                        ga[(ri, cj)] += g[(i, j)];
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::SliceRows(a, start) => {
                let (r, c) = self.value(*a).shape();
                let mut ga = Mat::zeros(r, c);
                for i in 0..g.rows() {
                    ga.row_mut(start + i).copy_from_slice(g.row(i));
                }
                self.acc(grads, *a, ga);
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.value(*a).shape();
                let mut ga = Mat::zeros(r, c);
                for i in 0..r {
                    ga.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                self.acc(grads, *a, ga);
            }
            Op::AddRowBroadcast(a, row) => {
                self.acc(grads, *a, g.clone());
                if self.ng(*row) {
                    let mut gr = Mat::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (o, x) in gr.as_mut_slice().iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                    self.acc(grads, *row, gr);
                }
            }
            Op::GaussLogLik {
                y,
                mean,
                var,
                noise,
                kind,
            } => {
                let (m, v) = (self.value(*mean).as_slice(), self.value(*var).as_slice());
                let s2 = noise.map_or(0.0, |n| self.scalar(n));
                let n = y.len();
                let mut gm = vec![0.0; n];
                let mut gv = vec![0.0; n];
                let mut gs = 0.0;
                for k in 0..n {
                    let r = y[k] - m[k];
                    let gk = g.as_slice()[k];
                    match kind {
                        LikKind::LogExpected => {
                            let t = v[k] + s2;
                            gm[k] = gk * r / t;
                            let dt = -0.5 / t + 0.5 * r * r / (t * t);
                            gv[k] = gk * dt;
                            gs += gk * dt;
                        }
                        LikKind::ExpectedLog => {
                            gm[k] = gk * r / s2;
                            gv[k] = -0.5 * gk / s2;
                            gs += gk * (-0.5 / s2 + 0.5 * (r * r + v[k]) / (s2 * s2));
                        }
                    }
                }
                self.acc(grads, *mean, Mat::row_vec(&gm));
                self.acc(grads, *var, Mat::row_vec(&gv));
                if let Some(nv) = noise {
                    self.acc(grads, *nv, Mat::scalar(gs));
                }
            }
            Op::SoftmaxLogLik { f, class, kind } => {
                let fv = self.value(*f);
                let (s, c) = fv.shape();
                let logp = log_softmax_at(fv, *class);
                let weights: Vec<f64> = match kind {
                    LikKind::LogExpected => {
                        let lse = log_sum_exp(&logp);
                        logp.iter().map(|l| (l - lse).exp()).collect()
                    }
                    LikKind::ExpectedLog => vec![1.0 / s as f64; s],
                };
                let gs = g.scalar_value();
                let mut gf = Mat::zeros(s, c);
                for i in 0..s {
                    let probs = softmax(fv.row(i));
                    for j in 0..c {
                        let delta = if j == *class { 1.0 } else { 0.0 };
                        gf[(i, j)] = gs * weights[i] * (delta - probs[j]);
                    }
                }
                self.acc(grads, *f, gf);
            }
            Op::FlipAdjoint(a) => self.acc(grads, *a, g.scale(-1.0)),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn rbf_backward(
        &self,
        node: &Node,
        g: &Mat,
        x1: Var,
        x2: Var,
        log_amp: Var,
        log_ls: Var,
        grads: &mut [Option<Mat>],
    ) {
        let (a, b) = (self.value(x1), self.value(x2));
        let ls: Vec<f64> = self.value(log_ls).as_slice().iter().map(|l| l.exp()).collect();
        let k = &node.value;
        let d = ls.len();
        let (n1, n2) = (a.rows(), b.rows());
        // weighted kernel entries: ḡ_ij K_ij
        let w = g.hadamard(k);
        if self.ng(log_amp) {
            self.acc(grads, log_amp, Mat::scalar(w.sum()));
        }
        let (need1, need2, need_ls) = (self.ng(x1), self.ng(x2), self.ng(log_ls));
        if !(need1 || need2 || need_ls) {
            return;
        }
        let mut g1 = Mat::zeros(n1, d);
        let mut g2 = Mat::zeros(n2, d);
        let mut gl = vec![0.0; d];
        for i in 0..n1 {
            let ai = a.row(i);
            for j in 0..n2 {
                let wij = w[(i, j)];
                if wij == 0.0 {
                    continue;
                }
                let bj = b.row(j);
                for t in 0..d {
                    let diff = ai[t] - bj[t];
                    let s = wij * diff / ls[t];
                    g1[(i, t)] -= s;
                    g2[(j, t)] += s;
                    gl[t] += 0.5 * s * diff;
                }
            }
        }
        if need1 {
            self.acc(grads, x1, g1);
        }
        if need2 {
            self.acc(grads, x2, g2);
        }
        if need_ls {
            self.acc(grads, log_ls, Mat::row_vec(&gl));
        }
    }
}

/// Dimension `n` of the lower triangle stored in `len = n(n+1)/2` entries.
pub fn packed_dim(len: usize) -> usize {
    let n = ((((8 * len + 1) as f64).sqrt() - 1.0) / 2.0).round() as usize;
    assert_eq!(n * (n + 1) / 2, len, "packed length {len} is not triangular");
    n
}

pub(crate) fn rbf_value(a: &Mat, b: &Mat, log_amp: f64, log_ls: &[f64]) -> Mat {
    assert_eq!(a.cols(), b.cols(), "rbf: input dimensions differ");
    assert_eq!(a.cols(), log_ls.len(), "rbf: one length-scale per dimension");
    let amp = log_amp.exp();
    let inv: Vec<f64> = log_ls.iter().map(|l| (-l).exp()).collect();
    Mat::from_fn(a.rows(), b.rows(), |i, j| {
        let (ai, bj) = (a.row(i), b.row(j));
        let mut s = 0.0;
        for t in 0..inv.len() {
            let d = ai[t] - bj[t];
            s += d * d * inv[t];
        }
        amp * (-0.5 * s).exp()
    })
}

fn symmetrize(a: &Mat) -> Mat {
    a.add(&a.transpose()).scale(0.5)
}

/// Adjoint of `A` for `L = chol(A)` given `L̄`, for symmetric perturbations
/// of `A`: `½ (S + Sᵀ)` with `S = L^{-T} Φ(Lᵀ L̄) L^{-1}` where `Φ` keeps the
/// lower triangle and halves the diagonal.
fn cholesky_adjoint(l: &Mat, gl: &Mat) -> Mat {
    let n = l.rows();
    let mut phi = l.tr_matmul(gl);
    for i in 0..n {
        for j in 0..n {
            if j > i {
                phi[(i, j)] = 0.0;
            } else if i == j {
                phi[(i, j)] *= 0.5;
            }
        }
    }
    // S = L^{-T} Φ L^{-1}: solve Lᵀ Y = Φ, then S = (L^{-T} Yᵀ)ᵀ
    let l_lower = lower_factor(l);
    let y = l_lower.solve_upper_mat(&phi);
    let s = l_lower.solve_upper_mat(&y.transpose()).transpose();
    symmetrize(&s)
}

fn lower_factor(l: &Mat) -> CholFactor {
    // wrap an existing lower factor for its triangular solves
    CholFactor::from_lower(l.clone())
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn log_softmax_at(f: &Mat, class: usize) -> Vec<f64> {
    (0..f.rows())
        .map(|i| {
            let row = f.row(i);
            row[class] - log_sum_exp(row)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central differences of `f` over every entry of `x0`.
    fn fd(x0: &Mat, f: &dyn Fn(&Mat) -> f64) -> Mat {
        let mut out = Mat::zeros(x0.rows(), x0.cols());
        for k in 0..x0.as_slice().len() {
            let h = 1e-5 * (1.0 + x0.as_slice()[k].abs());
            let mut p = x0.clone();
            p.as_mut_slice()[k] += h;
            let mut m = x0.clone();
            m.as_mut_slice()[k] -= h;
            out.as_mut_slice()[k] = (f(&p) - f(&m)) / (2.0 * h);
        }
        out
    }

    fn rel_err(a: &Mat, b: &Mat) -> f64 {
        a.sub(b).max_abs() / b.max_abs().max(a.max_abs()).max(1e-12)
    }

    fn spd_from(x: &Mat) -> Mat {
        let mut p = x.matmul_tr(x);
        p.add_diag(0.5);
        p
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let mut t = Tape::new();
        let p = t.param(Mat::row_vec(&[1.5, -2.0, 0.25]));
        let sq = t.mul(p, p);
        let s = t.sum(sq);
        let obj = t.scale(s, 0.5);
        let g = t.backward(obj);
        assert_eq!(g.wrt(p), Mat::row_vec(&[1.5, -2.0, 0.25]));
    }

    #[test]
    fn logdet_of_diagonal_gradient() {
        let mut t = Tape::new();
        let p = t.param(Mat::diag(&[2.0, 8.0]));
        let h = t.spd(p).unwrap();
        let ld = t.spd_logdet(&h);
        let g = t.backward(ld);
        let gp = g.wrt(p);
        assert!((gp[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((gp[(1, 1)] - 0.125).abs() < 1e-15);
    }

    #[test]
    fn solve_logdet_cholesky_match_finite_differences() {
        let x0 = Mat::from_fn(4, 4, |i, j| ((i * 7 + j * 3) % 5) as f64 * 0.3 - 0.4);
        let b = Mat::from_fn(4, 2, |i, j| (i as f64) * 0.5 - j as f64);
        let build = |t: &mut Tape, xv: Var| {
            let xt = t.transpose(xv);
            let xx = t.matmul(xv, xt);
            let p = t.add_diag(xx, 0.5);
            let h = t.spd(p).unwrap();
            let bv = t.constant(b.clone());
            let sol = t.spd_solve(&h, bv);
            let s1 = t.sum(sol);
            let ld = t.spd_logdet(&h);
            let l = t.cholesky(p).unwrap();
            let l2 = t.mul(l, l);
            let s2 = t.sum(l2);
            let w = t.scale(s2, 0.3);
            let a = t.add(s1, ld);
            t.add(a, w)
        };
        let f = |x: &Mat| {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let o = build(&mut t, xv);
            t.scalar(o)
        };
        let mut t = Tape::new();
        let xv = t.param(x0.clone());
        let o = build(&mut t, xv);
        let g = t.backward(o).wrt(xv);
        let n = fd(&x0, &f);
        assert!(rel_err(&g, &n) < 1e-6, "{}", rel_err(&g, &n));
        // sanity for the helper
        assert!(spd_from(&x0).asymmetry() < 1e-15);
    }

    #[test]
    fn rbf_gradients_match_finite_differences() {
        let x1 = Mat::from_fn(3, 2, |i, j| (i as f64) * 0.4 - (j as f64) * 0.3);
        let x2 = Mat::from_fn(4, 2, |i, j| (i as f64) * -0.2 + (j as f64) * 0.5);
        let la = Mat::scalar(0.3);
        let ll = Mat::row_vec(&[-0.2, 0.4]);
        let wts = Mat::from_fn(3, 4, |i, j| 1.0 + (i + 2 * j) as f64 * 0.1);
        let eval = |a: &Mat, b: &Mat, amp: &Mat, ls: &Mat, train: [bool; 4]| {
            let mut t = Tape::new();
            let va = t.leaf(a.clone(), train[0]);
            let vb = t.leaf(b.clone(), train[1]);
            let vamp = t.leaf(amp.clone(), train[2]);
            let vls = t.leaf(ls.clone(), train[3]);
            let k = t.rbf(va, vb, vamp, vls);
            let w = t.constant(wts.clone());
            let kw = t.mul(k, w);
            let o = t.sum(kw);
            (t.scalar(o), t.backward(o), [va, vb, vamp, vls])
        };
        let (_, g, vars) = eval(&x1, &x2, &la, &ll, [true; 4]);
        let n1 = fd(&x1, &|x| eval(x, &x2, &la, &ll, [false; 4]).0);
        let n2 = fd(&x2, &|x| eval(&x1, x, &la, &ll, [false; 4]).0);
        let na = fd(&la, &|x| eval(&x1, &x2, x, &ll, [false; 4]).0);
        let nl = fd(&ll, &|x| eval(&x1, &x2, &la, x, [false; 4]).0);
        assert!(rel_err(&g.wrt(vars[0]), &n1) < 1e-7);
        assert!(rel_err(&g.wrt(vars[1]), &n2) < 1e-7);
        assert!(rel_err(&g.wrt(vars[2]), &na) < 1e-7);
        assert!(rel_err(&g.wrt(vars[3]), &nl) < 1e-7);
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let x0 = Mat::from_fn(3, 6, |i, j| ((i + 1) * (j + 2)) as f64 * 0.05 - 0.3);
        let f_build = |t: &mut Tape, x: Var| {
            let sq = t.mul(x, x);
            let g = t.block_gram(x, sq, 3);
            let gs = t.slice_rows(g, 3, 3);
            let gc = t.gather_cols(x, vec![0, 0, 5, 2]);
            let ge = t.gather_entries(x, vec![2, 1], vec![4, 4, 0]);
            let sc = t.slice_cols(x, 1, 2);
            let cd = t.col_dots(x, sq);
            let packed = t.slice_cols(x, 0, 6);
            let packed = t.slice_rows(packed, 0, 1);
            let tril = t.tril_from_packed(packed);
            let e = t.exp(sc);
            let row = t.slice_cols(cd, 0, 2);
            let rb = t.add_row_broadcast(e, row);
            let lg = t.log(e);
            let parts = [gs, gc, ge, rb, lg, tril, cd];
            let mut acc = t.constant(Mat::scalar(0.0));
            for (k, p) in parts.into_iter().enumerate() {
                let s = t.sum(p);
                let s = t.scale(s, 1.0 + 0.1 * k as f64);
                acc = t.add(acc, s);
            }
            let tr = t.trace(tril);
            let sm = t.constant(Mat::scalar(0.7));
            let prod = t.mul_scalar(tr, sm);
            let sh = t.add_scalar(prod, acc);
            let q = t.mul(sh, sh);
            let f = t.flip_adjoint(q);
            let f = t.flip_adjoint(f);
            t.sum(f)
        };
        let f = |x: &Mat| {
            let mut t = Tape::new();
            let v = t.constant(x.clone());
            let o = f_build(&mut t, v);
            t.scalar(o)
        };
        let mut t = Tape::new();
        let v = t.param(x0.clone());
        let o = f_build(&mut t, v);
        let g = t.backward(o).wrt(v);
        let n = fd(&x0, &f);
        assert!(rel_err(&g, &n) < 1e-7, "{}", rel_err(&g, &n));
    }

    #[test]
    fn likelihood_ops_match_finite_differences() {
        for kind in [LikKind::LogExpected, LikKind::ExpectedLog] {
            let x0 = Mat::row_vec(&[0.3, -0.4, 1.2, 0.1, 0.7, -0.5, 0.05]);
            let y = vec![0.5, -1.0, 0.2];
            let build = |t: &mut Tape, x: Var| {
                let mean = t.slice_cols(x, 0, 3);
                let lv = t.slice_cols(x, 3, 3);
                let var = t.exp(lv);
                let ln = t.slice_cols(x, 6, 1);
                let noise = t.exp(ln);
                let ll = t.gauss_loglik(y.clone(), mean, var, Some(noise), kind);
                let s1 = t.sum(ll);
                let f = t.constant(Mat::from_fn(5, 3, |i, j| ((i * 3 + j) % 4) as f64 * 0.4 - 0.6));
                let shift = t.slice_cols(x, 0, 3);
                let fs = t.add_row_broadcast(f, shift);
                let sl = t.softmax_loglik(fs, 1, kind);
                t.add(s1, sl)
            };
            let f = |xm: &Mat| {
                let mut t = Tape::new();
                let v = t.constant(xm.clone());
                let o = build(&mut t, v);
                t.scalar(o)
            };
            let mut t = Tape::new();
            let v = t.param(x0.clone());
            let o = build(&mut t, v);
            let g = t.backward(o).wrt(v);
            let n = fd(&x0, &f);
            assert!(rel_err(&g, &n) < 1e-7, "{kind:?}: {}", rel_err(&g, &n));
        }
    }

    #[test]
    fn constants_receive_no_adjoint() {
        let mut t = Tape::new();
        let c = t.constant(Mat::scalar(2.0));
        let p = t.param(Mat::scalar(3.0));
        let m = t.mul(c, p);
        let g = t.backward(m);
        assert!(g.get(c).is_none());
        assert_eq!(g.wrt(p).scalar_value(), 2.0);
    }

    #[test]
    fn packed_dimension() {
        assert_eq!(packed_dim(1), 1);
        assert_eq!(packed_dim(6), 3);
        assert_eq!(packed_dim(5050), 100);
    }
}
