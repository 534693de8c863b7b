//! Reverse-mode differentiation over a flat operation tape.
//!
//! A [`Tape`] records every forward operation of one computation graph in
//! order; since each node only references earlier nodes, walking the tape
//! backwards is a reverse topological traversal. Gradients flow into
//! [`ParameterStore`] leaves registered through [`Tape::param`].

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::params::ParameterStore;
use crate::numerics::tensor::{
    log_sum_exp, matmul_nn_acc, matmul_nt_acc, matmul_tn_acc, softmax, Tensor,
};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Elementwise activation kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
    /// Pass-through, used by tests that pin layer arithmetic without a nonlinearity.
    Identity,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(String),
    MatMul(Var, Var),
    /// a[m,k] * b[n,k]^T
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// matrix + broadcast row vector
    AddRow(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Sum(Var),
    MeanRows(Var),
    /// rows of a scaled by per-row factors
    RowScale(Var, Var),
    Col(Var, usize),
    ConcatCols(Var, Var),
    SliceCols(Var, usize, usize),
    GatherRows(Var, Rc<Vec<usize>>),
    /// rows of input added into destination rows of a fresh [rows, n] output
    ScatterAddRows {
        src: Var,
        dest: Rc<Vec<usize>>,
    },
    /// Width-preserving 1-D convolution over a stacked (subject, relation)
    /// pair per query, with per-query kernels and channel biases.
    ConvDecode {
        subj: Var,
        rel: Var,
        kernels: Var,
        bias: Var,
        channels: usize,
        ksize: usize,
    },
    /// theta broadcast over queries: (alpha + 1) * theta + beta
    FilmModulate {
        theta: Var,
        alpha: Var,
        beta: Var,
    },
    /// Per-destination-group normalized exponential decay weights.
    DecayNormalize {
        delta: Var,
        dts: Rc<Vec<f64>>,
        groups: Rc<Vec<(usize, usize)>>,
    },
    /// t*a + (1-t)*b with scalar t
    Lerp {
        a: Var,
        b: Var,
        t: Var,
    },
    /// per-row convex combination with t[m]
    RowLerp {
        a: Var,
        b: Var,
        t: Var,
    },
    /// Summed softmax cross-entropy over rows of logits.
    CrossEntropySum {
        logits: Var,
        targets: Rc<Vec<usize>>,
    },
    Dropout {
        x: Var,
        rate: f64,
        seed: u64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// One forward/backward computation graph.
pub struct Tape {
    nodes: Vec<Node>,
    check_finite: bool,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            check_finite: true,
            backward_done: false,
        }
    }

    /// Disable the per-op finiteness scan (it is on by default).
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if self.check_finite {
            if let Some(bad) = value.find_non_finite() {
                return Err(Error::NonFinite {
                    op: format!("{:?} (value {})", op_name(&op), bad),
                });
            }
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // -- leaves ------------------------------------------------------------

    /// Constant leaf; gradients do not flow into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Leaf bound to a named parameter; `backward` accumulates its gradient
    /// back into the store.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        let t = store.value(name)?.clone();
        self.push(t, Op::Param(name.to_string()), true)
    }

    // -- arithmetic --------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.rows(), ta.cols());
        let (k2, n) = (tb.rows(), tb.cols());
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                details: format!("{:?} x {:?}", ta.shape(), tb.shape()),
            });
        }
        let mut out = Tensor::zeros(vec![m, n]);
        matmul_nn_acc(ta.data(), tb.data(), out.data_mut(), m, k, n);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// a[m,k] * b[n,k]^T -> [m,n]
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.rows(), ta.cols());
        let (n, k2) = (tb.rows(), tb.cols());
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_nt",
                details: format!("{:?} x {:?}^T", ta.shape(), tb.shape()),
            });
        }
        let mut out = Tensor::zeros(vec![m, n]);
        matmul_nt_acc(ta.data(), tb.data(), out.data_mut(), m, k, n);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMulNt(a, b), ng)
    }

    fn binary_same_shape(&mut self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape {
                op: "elementwise",
                details: format!(
                    "{op}: {:?} vs {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let out = zip_tensors(self.value(a), self.value(b), |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub")?;
        let out = zip_tensors(self.value(a), self.value(b), |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")?;
        let out = zip_tensors(self.value(a), self.value(b), |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = map_tensor(self.value(a), |x| x * c);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    /// matrix[m,n] + row[n] broadcast over rows
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if ta.cols() != tr.len() {
            return Err(Error::Shape {
                op: "add_row",
                details: format!("{:?} + row {:?}", ta.shape(), tr.shape()),
            });
        }
        let cols = ta.cols();
        let mut out = ta.clone();
        for i in 0..out.rows() {
            let r = &mut out.data_mut()[i * cols..(i + 1) * cols];
            for (j, v) in r.iter_mut().enumerate() {
                *v += tr.data()[j];
            }
        }
        let ng = self.needs(a) || self.needs(row);
        self.push(out, Op::AddRow(a, row), ng)
    }

    // -- activations ---------------------------------------------------------

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = map_tensor(self.value(a), |x| x.max(0.0));
        let ng = self.needs(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = map_tensor(self.value(a), sigmoid_scalar);
        let ng = self.needs(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = map_tensor(self.value(a), f64::tanh);
        let ng = self.needs(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let out = map_tensor(self.value(a), softplus_scalar);
        let ng = self.needs(a);
        self.push(out, Op::Softplus(a), ng)
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Result<Var> {
        match kind {
            Activation::Sigmoid => self.sigmoid(a),
            Activation::Tanh => self.tanh(a),
            Activation::Relu => self.relu(a),
            Activation::Identity => self.scale(a, 1.0),
        }
    }

    // -- reductions and reshapes ---------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// [m,n] -> [n], mean over rows
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = (t.rows(), t.cols());
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (j, o) in out.iter_mut().enumerate() {
                *o += t.data()[i * n + j];
            }
        }
        out.iter_mut().for_each(|x| *x /= m as f64);
        let ng = self.needs(a);
        self.push(Tensor::vector(out), Op::MeanRows(a), ng)
    }

    /// rows of a[m,n] scaled by s[m]
    pub fn row_scale(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ta, ts) = (self.value(a), self.value(s));
        if ta.rows() != ts.len() {
            return Err(Error::Shape {
                op: "row_scale",
                details: format!("{:?} rows vs scale {:?}", ta.shape(), ts.shape()),
            });
        }
        let n = ta.cols();
        let mut out = ta.clone();
        for i in 0..ta.rows() {
            let f = ts.data()[i];
            out.data_mut()[i * n..(i + 1) * n]
                .iter_mut()
                .for_each(|x| *x *= f);
        }
        let ng = self.needs(a) || self.needs(s);
        self.push(out, Op::RowScale(a, s), ng)
    }

    /// column j of [m,n] -> [m]
    pub fn col(&mut self, a: Var, j: usize) -> Result<Var> {
        let t = self.value(a);
        if j >= t.cols() {
            return Err(Error::IndexRange {
                op: "col",
                details: format!("column {} of {:?}", j, t.shape()),
            });
        }
        let n = t.cols();
        let out: Vec<f64> = (0..t.rows()).map(|i| t.data()[i * n + j]).collect();
        let ng = self.needs(a);
        self.push(Tensor::vector(out), Op::Col(a, j), ng)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() {
            return Err(Error::Shape {
                op: "concat_cols",
                details: format!("{:?} | {:?}", ta.shape(), tb.shape()),
            });
        }
        let (m, p, q) = (ta.rows(), ta.cols(), tb.cols());
        let mut data = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            data.extend_from_slice(&ta.data()[i * p..(i + 1) * p]);
            data.extend_from_slice(&tb.data()[i * q..(i + 1) * q]);
        }
        let out = Tensor::new(vec![m, p + q], data)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::ConcatCols(a, b), ng)
    }

    pub fn slice_cols(&mut self, a: Var, lo: usize, hi: usize) -> Result<Var> {
        let t = self.value(a);
        if lo > hi || hi > t.cols() {
            return Err(Error::IndexRange {
                op: "slice_cols",
                details: format!("{}..{} of {:?}", lo, hi, t.shape()),
            });
        }
        let (m, n, w) = (t.rows(), t.cols(), hi - lo);
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&t.data()[i * n + lo..i * n + hi]);
        }
        let out = Tensor::new(vec![m, w], data)?;
        let ng = self.needs(a);
        self.push(out, Op::SliceCols(a, lo, hi), ng)
    }

    pub fn gather_rows(&mut self, a: Var, ids: Rc<Vec<usize>>) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = (t.rows(), t.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= m) {
            return Err(Error::IndexRange {
                op: "gather_rows",
                details: format!("row {} of {:?}", bad, t.shape()),
            });
        }
        let mut data = Vec::with_capacity(ids.len() * n);
        for &i in ids.iter() {
            data.extend_from_slice(&t.data()[i * n..(i + 1) * n]);
        }
        let out = Tensor::new(vec![ids.len(), n], data)?;
        let ng = self.needs(a);
        self.push(out, Op::GatherRows(a, ids), ng)
    }

    /// src[k,n] rows added into a fresh zero [rows,n] output at dest[k].
    pub fn scatter_add_rows(&mut self, src: Var, dest: Rc<Vec<usize>>, rows: usize) -> Result<Var> {
        let t = self.value(src);
        if t.rows() != dest.len() {
            return Err(Error::Shape {
                op: "scatter_add_rows",
                details: format!("{} rows vs {} destinations", t.rows(), dest.len()),
            });
        }
        if let Some(&bad) = dest.iter().find(|&&i| i >= rows) {
            return Err(Error::IndexRange {
                op: "scatter_add_rows",
                details: format!("destination {} of {}", bad, rows),
            });
        }
        let n = t.cols();
        let mut out = Tensor::zeros(vec![rows, n]);
        for (r, &d) in dest.iter().enumerate() {
            let dst = &mut out.data_mut()[d * n..(d + 1) * n];
            let s = &t.data()[r * n..(r + 1) * n];
            for (x, y) in dst.iter_mut().zip(s) {
                *x += y;
            }
        }
        let ng = self.needs(src);
        self.push(out, Op::ScatterAddRows { src, dest }, ng)
    }

    // -- model-specific ops ----------------------------------------------------

    /// Width-preserving 1-D convolution of stacked (subject, relation) rows.
    ///
    /// Per query q and channel c:
    /// `out[q, c*d + j] = bias[q,c] + sum_{u,v} kernels[q, c*2*ks + u*ks + v] * row_u[q, j + v - pad]`
    /// with zero padding outside `[0, d)` and `pad = (ks-1)/2`.
    pub fn conv_decode(
        &mut self,
        subj: Var,
        rel: Var,
        kernels: Var,
        bias: Var,
        channels: usize,
        ksize: usize,
    ) -> Result<Var> {
        let (ts, tr) = (self.value(subj), self.value(rel));
        let (tk, tb) = (self.value(kernels), self.value(bias));
        let (q, d) = (ts.rows(), ts.cols());
        if d < 1 {
            return Err(Error::InvalidArgument {
                op: "conv_decode",
                details: "embedding width must be >= 1".into(),
            });
        }
        if ksize % 2 == 0 {
            return Err(Error::InvalidArgument {
                op: "conv_decode",
                details: format!("kernel width {} must be odd for same-width output", ksize),
            });
        }
        if tr.rows() != q || tr.cols() != d {
            return Err(Error::Shape {
                op: "conv_decode",
                details: format!("subject {:?} vs relation {:?}", ts.shape(), tr.shape()),
            });
        }
        if tk.rows() != q || tk.cols() != channels * 2 * ksize || tb.rows() != q || tb.cols() != channels
        {
            return Err(Error::Shape {
                op: "conv_decode",
                details: format!(
                    "kernels {:?} bias {:?} for {} channels x 2 x {}",
                    tk.shape(),
                    tb.shape(),
                    channels,
                    ksize
                ),
            });
        }
        let mut out = Tensor::zeros(vec![q, channels * d]);
        conv_decode_forward(
            ts.data(),
            tr.data(),
            tk.data(),
            tb.data(),
            out.data_mut(),
            q,
            d,
            channels,
            ksize,
        );
        let ng = self.needs(subj) || self.needs(rel) || self.needs(kernels) || self.needs(bias);
        self.push(
            out,
            Op::ConvDecode {
                subj,
                rel,
                kernels,
                bias,
                channels,
                ksize,
            },
            ng,
        )
    }

    /// Per-query scaled/shifted copies of a flat parameter block:
    /// `out[q] = (alpha[q] + 1) .* theta + beta[q]`.
    pub fn film_modulate(&mut self, theta: Var, alpha: Var, beta: Var) -> Result<Var> {
        let n = self.value(theta).len();
        let (ta, tb) = (self.value(alpha), self.value(beta));
        let q = ta.rows();
        if ta.cols() != n || tb.cols() != n || tb.rows() != q {
            return Err(Error::Shape {
                op: "film_modulate",
                details: format!(
                    "theta {:?}, alpha {:?}, beta {:?}",
                    self.value(theta).shape(),
                    ta.shape(),
                    tb.shape()
                ),
            });
        }
        let th = self.value(theta).data().to_vec();
        let mut out = Tensor::zeros(vec![q, n]);
        for qi in 0..q {
            let a = &ta.data()[qi * n..(qi + 1) * n];
            let b = &tb.data()[qi * n..(qi + 1) * n];
            let o = &mut out.data_mut()[qi * n..(qi + 1) * n];
            for j in 0..n {
                o[j] = (a[j] + 1.0) * th[j] + b[j];
            }
        }
        let ng = self.needs(theta) || self.needs(alpha) || self.needs(beta);
        self.push(out, Op::FilmModulate { theta, alpha, beta }, ng)
    }

    /// Normalized exponential decay weights per destination group.
    ///
    /// `dts` holds the elapsed time of each edge; `groups` are disjoint
    /// `(start, end)` ranges covering `dts`, one per destination node.
    /// Within each group: `w_e = exp(-delta * dt_e) / sum exp(-delta * dt)`.
    pub fn decay_normalize(
        &mut self,
        delta: Var,
        dts: Rc<Vec<f64>>,
        groups: Rc<Vec<(usize, usize)>>,
    ) -> Result<Var> {
        if self.value(delta).len() != 1 {
            return Err(Error::Shape {
                op: "decay_normalize",
                details: "delta must be scalar".into(),
            });
        }
        for &(s, e) in groups.iter() {
            if s >= e || e > dts.len() {
                return Err(Error::InvalidArgument {
                    op: "decay_normalize",
                    details: format!("empty or out-of-range group ({s},{e})"),
                });
            }
        }
        let d = self.value(delta).item();
        let mut w = vec![0.0; dts.len()];
        for &(s, e) in groups.iter() {
            // max-shift for stability; dt >= 0 so -delta*dt <= 0 already, but
            // large delta*dt underflows all the way to 0/0 without the shift
            let m = dts[s..e].iter().cloned().fold(f64::INFINITY, f64::min);
            let mut z = 0.0;
            for i in s..e {
                let v = (-d * (dts[i] - m)).exp();
                w[i] = v;
                z += v;
            }
            for wi in &mut w[s..e] {
                *wi /= z;
            }
        }
        let ng = self.needs(delta);
        self.push(
            Tensor::vector(w),
            Op::DecayNormalize { delta, dts, groups },
            ng,
        )
    }

    /// t*a + (1-t)*b with scalar t
    pub fn lerp(&mut self, a: Var, b: Var, t: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "lerp")?;
        if self.value(t).len() != 1 {
            return Err(Error::Shape {
                op: "lerp",
                details: "gate must be scalar".into(),
            });
        }
        let tv = self.value(t).item();
        let out = zip_tensors(self.value(a), self.value(b), |x, y| tv * x + (1.0 - tv) * y);
        let ng = self.needs(a) || self.needs(b) || self.needs(t);
        self.push(out, Op::Lerp { a, b, t }, ng)
    }

    /// per-row convex combination: out[i] = t[i]*a[i] + (1-t[i])*b[i]
    pub fn row_lerp(&mut self, a: Var, b: Var, t: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "row_lerp")?;
        if self.value(t).len() != self.value(a).rows() {
            return Err(Error::Shape {
                op: "row_lerp",
                details: "gate length must equal row count".into(),
            });
        }
        let n = self.value(a).cols();
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            let g = self.value(t).data()[i];
            let bv = &self.value(b).data()[i * n..(i + 1) * n];
            let o = &mut out.data_mut()[i * n..(i + 1) * n];
            for j in 0..n {
                o[j] = g * o[j] + (1.0 - g) * bv[j];
            }
        }
        let ng = self.needs(a) || self.needs(b) || self.needs(t);
        self.push(out, Op::RowLerp { a, b, t }, ng)
    }

    /// Summed softmax cross-entropy over rows: `sum_q -log softmax(logits[q])[target_q]`.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: Rc<Vec<usize>>) -> Result<Var> {
        let t = self.value(logits);
        let (q, k) = (t.rows(), t.cols());
        if targets.len() != q {
            return Err(Error::Shape {
                op: "cross_entropy_sum",
                details: format!("{} logit rows vs {} targets", q, targets.len()),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&c| c >= k) {
            return Err(Error::IndexRange {
                op: "cross_entropy_sum",
                details: format!("target class {} of {}", bad, k),
            });
        }
        let mut loss = 0.0;
        for (qi, &tgt) in targets.iter().enumerate() {
            let row = &t.data()[qi * k..(qi + 1) * k];
            loss += log_sum_exp(row) - row[tgt];
        }
        let ng = self.needs(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropySum { logits, targets },
            ng,
        )
    }

    /// Inverted dropout: zero with probability `rate`, scale survivors by
    /// 1/(1-rate); identity outside training. The mask is a pure function of
    /// `seed`, so backward can regenerate it instead of storing it.
    pub fn dropout(&mut self, x: Var, rate: f64, training: bool, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument {
                op: "dropout",
                details: format!("rate {} outside [0, 1)", rate),
            });
        }
        if !training || rate == 0.0 {
            return self.scale(x, 1.0);
        }
        let t = self.value(x);
        let mut out = t.clone();
        apply_dropout_mask(out.data_mut(), rate, seed);
        let ng = self.needs(x);
        self.push(out, Op::Dropout { x, rate, seed }, ng)
    }

    // -- backward ----------------------------------------------------------

    /// Reverse pass from a scalar loss. Parameter gradients are accumulated
    /// into `store`; a second call on the same tape is an error.
    pub fn backward(&mut self, loss: Var, store: &mut ParameterStore) -> Result<()> {
        let grads = self.backward_internal(loss)?;
        for (i, g) in grads.into_iter().enumerate() {
            if let (Op::Param(name), Some(grad)) = (&self.nodes[i].op, g) {
                if self.check_finite && !grad.all_finite() {
                    return Err(Error::NonFinite {
                        op: format!("gradient of {}", name),
                    });
                }
                store.accumulate_grad(name, &grad)?;
            }
        }
        Ok(())
    }

    /// Reverse pass returning the gradient of `wrt`; used by tests that probe
    /// gradients of non-parameter nodes.
    pub fn grad_of(&mut self, loss: Var, wrt: Var) -> Result<Tensor> {
        let mut grads = self.backward_internal(loss)?;
        Ok(grads[wrt.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.nodes[wrt.0].value.shape().to_vec())))
    }

    fn backward_internal(&mut self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        self.backward_done = true;
        if self.value(loss).len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                details: format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            });
        }

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if let Op::Param(_) = self.nodes[i].op {
                grads[i] = Some(g);
                continue;
            }
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
        }
        Ok(grads)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, add: impl FnOnce(&mut Tensor)) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = grads[v.0]
            .get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape().to_vec()));
        add(slot);
    }

    #[allow(clippy::too_many_lines)]
    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let value = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                self.accumulate(grads, *a, |da| {
                    matmul_nt_acc(g.data(), tb.data(), da.data_mut(), m, n, k);
                });
                self.accumulate(grads, *b, |db| {
                    matmul_tn_acc(ta.data(), g.data(), db.data_mut(), m, k, n);
                });
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                // y = a b^T: da = g b ; db = g^T a
                self.accumulate(grads, *a, |da| {
                    matmul_nn_acc(g.data(), tb.data(), da.data_mut(), m, n, k);
                });
                self.accumulate(grads, *b, |db| {
                    matmul_tn_acc(g.data(), ta.data(), db.data_mut(), m, n, k);
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |da| acc(da, g.data(), 1.0));
                self.accumulate(grads, *b, |db| acc(db, g.data(), 1.0));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |da| acc(da, g.data(), 1.0));
                self.accumulate(grads, *b, |db| acc(db, g.data(), -1.0));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                self.accumulate(grads, *a, |da| acc_mul(da, g.data(), tb.data()));
                self.accumulate(grads, *b, |db| acc_mul(db, g.data(), ta.data()));
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, |da| acc(da, g.data(), *c));
            }
            Op::AddRow(a, row) => {
                let cols = self.nodes[row.0].value.len();
                self.accumulate(grads, *a, |da| acc(da, g.data(), 1.0));
                self.accumulate(grads, *row, |dr| {
                    for (idx, &gv) in g.data().iter().enumerate() {
                        dr.data_mut()[idx % cols] += gv;
                    }
                });
            }
            Op::Relu(a) => {
                self.accumulate(grads, *a, |da| {
                    for ((d, &gv), &yv) in
                        da.data_mut().iter_mut().zip(g.data()).zip(value.data())
                    {
                        if yv > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                self.accumulate(grads, *a, |da| {
                    for ((d, &gv), &yv) in
                        da.data_mut().iter_mut().zip(g.data()).zip(value.data())
                    {
                        *d += gv * yv * (1.0 - yv);
                    }
                });
            }
            Op::Tanh(a) => {
                self.accumulate(grads, *a, |da| {
                    for ((d, &gv), &yv) in
                        da.data_mut().iter_mut().zip(g.data()).zip(value.data())
                    {
                        *d += gv * (1.0 - yv * yv);
                    }
                });
            }
            Op::Softplus(a) => {
                let ta = &self.nodes[a.0].value;
                self.accumulate(grads, *a, |da| {
                    for ((d, &gv), &xv) in da.data_mut().iter_mut().zip(g.data()).zip(ta.data())
                    {
                        *d += gv * sigmoid_scalar(xv);
                    }
                });
            }
            Op::Sum(a) => {
                let gv = g.item();
                self.accumulate(grads, *a, |da| {
                    da.data_mut().iter_mut().for_each(|d| *d += gv);
                });
            }
            Op::MeanRows(a) => {
                let m = self.nodes[a.0].value.rows();
                let n = self.nodes[a.0].value.cols();
                self.accumulate(grads, *a, |da| {
                    for i in 0..m {
                        for j in 0..n {
                            da.data_mut()[i * n + j] += g.data()[j] / m as f64;
                        }
                    }
                });
            }
            Op::RowScale(a, s) => {
                let (ta, ts) = (&self.nodes[a.0].value, &self.nodes[s.0].value);
                let n = ta.cols();
                self.accumulate(grads, *a, |da| {
                    for i in 0..ta.rows() {
                        let f = ts.data()[i];
                        for j in 0..n {
                            da.data_mut()[i * n + j] += g.data()[i * n + j] * f;
                        }
                    }
                });
                self.accumulate(grads, *s, |ds| {
                    for i in 0..ta.rows() {
                        let mut dot = 0.0;
                        for j in 0..n {
                            dot += g.data()[i * n + j] * ta.data()[i * n + j];
                        }
                        ds.data_mut()[i] += dot;
                    }
                });
            }
            Op::Col(a, j) => {
                let n = self.nodes[a.0].value.cols();
                self.accumulate(grads, *a, |da| {
                    for (i, &gv) in g.data().iter().enumerate() {
                        da.data_mut()[i * n + j] += gv;
                    }
                });
            }
            Op::ConcatCols(a, b) => {
                let (p, q) = (self.nodes[a.0].value.cols(), self.nodes[b.0].value.cols());
                let m = self.nodes[a.0].value.rows();
                self.accumulate(grads, *a, |da| {
                    for i in 0..m {
                        for j in 0..p {
                            da.data_mut()[i * p + j] += g.data()[i * (p + q) + j];
                        }
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for i in 0..m {
                        for j in 0..q {
                            db.data_mut()[i * q + j] += g.data()[i * (p + q) + p + j];
                        }
                    }
                });
            }
            Op::SliceCols(a, lo, hi) => {
                let n = self.nodes[a.0].value.cols();
                let w = hi - lo;
                let m = self.nodes[a.0].value.rows();
                self.accumulate(grads, *a, |da| {
                    for i in 0..m {
                        for j in 0..w {
                            da.data_mut()[i * n + lo + j] += g.data()[i * w + j];
                        }
                    }
                });
            }
            Op::GatherRows(a, ids) => {
                let n = self.nodes[a.0].value.cols();
                self.accumulate(grads, *a, |da| {
                    for (r, &src) in ids.iter().enumerate() {
                        for j in 0..n {
                            da.data_mut()[src * n + j] += g.data()[r * n + j];
                        }
                    }
                });
            }
            Op::ScatterAddRows { src, dest } => {
                let n = self.nodes[src.0].value.cols();
                self.accumulate(grads, *src, |ds| {
                    for (r, &d) in dest.iter().enumerate() {
                        for j in 0..n {
                            ds.data_mut()[r * n + j] += g.data()[d * n + j];
                        }
                    }
                });
            }
            Op::ConvDecode {
                subj,
                rel,
                kernels,
                bias,
                channels,
                ksize,
            } => {
                let (ts, tr) = (&self.nodes[subj.0].value, &self.nodes[rel.0].value);
                let tk = &self.nodes[kernels.0].value;
                let (q, d) = (ts.rows(), ts.cols());
                let (c, ks) = (*channels, *ksize);
                self.accumulate(grads, *bias, |db| {
                    conv_decode_backward_bias(g.data(), db.data_mut(), q, d, c);
                });
                self.accumulate(grads, *kernels, |dk| {
                    conv_decode_backward_kernels(
                        g.data(),
                        ts.data(),
                        tr.data(),
                        dk.data_mut(),
                        q,
                        d,
                        c,
                        ks,
                    );
                });
                self.accumulate(grads, *subj, |dsub| {
                    conv_decode_backward_input(g.data(), tk.data(), dsub.data_mut(), q, d, c, ks, 0);
                });
                self.accumulate(grads, *rel, |drel| {
                    conv_decode_backward_input(g.data(), tk.data(), drel.data_mut(), q, d, c, ks, 1);
                });
            }
            Op::FilmModulate { theta, alpha, beta } => {
                let n = self.nodes[theta.0].value.len();
                let q = self.nodes[alpha.0].value.rows();
                let th = &self.nodes[theta.0].value;
                let al = &self.nodes[alpha.0].value;
                self.accumulate(grads, *theta, |dt| {
                    for qi in 0..q {
                        for j in 0..n {
                            dt.data_mut()[j] += g.data()[qi * n + j] * (al.data()[qi * n + j] + 1.0);
                        }
                    }
                });
                self.accumulate(grads, *alpha, |da| {
                    for qi in 0..q {
                        for j in 0..n {
                            da.data_mut()[qi * n + j] += g.data()[qi * n + j] * th.data()[j];
                        }
                    }
                });
                self.accumulate(grads, *beta, |db| acc(db, g.data(), 1.0));
            }
            Op::DecayNormalize { delta, dts, groups } => {
                // w = softmax over group of (-delta * dt);
                // dw_e/ddelta = w_e * (sum_j w_j dt_j - dt_e)
                let w = value;
                self.accumulate(grads, *delta, |dd| {
                    let mut total = 0.0;
                    for &(s, e) in groups.iter() {
                        let mean_dt: f64 =
                            (s..e).map(|j| w.data()[j] * dts[j]).sum();
                        for idx in s..e {
                            total += g.data()[idx] * w.data()[idx] * (mean_dt - dts[idx]);
                        }
                    }
                    dd.data_mut()[0] += total;
                });
            }
            Op::Lerp { a, b, t } => {
                let tv = self.nodes[t.0].value.item();
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                self.accumulate(grads, *a, |da| acc(da, g.data(), tv));
                self.accumulate(grads, *b, |db| acc(db, g.data(), 1.0 - tv));
                self.accumulate(grads, *t, |dt| {
                    let mut s = 0.0;
                    for ((&gv, &av), &bv) in g.data().iter().zip(ta.data()).zip(tb.data()) {
                        s += gv * (av - bv);
                    }
                    dt.data_mut()[0] += s;
                });
            }
            Op::RowLerp { a, b, t } => {
                let (ta, tb, tt) = (
                    &self.nodes[a.0].value,
                    &self.nodes[b.0].value,
                    &self.nodes[t.0].value,
                );
                let n = ta.cols();
                self.accumulate(grads, *a, |da| {
                    for i in 0..ta.rows() {
                        let gv = tt.data()[i];
                        for j in 0..n {
                            da.data_mut()[i * n + j] += g.data()[i * n + j] * gv;
                        }
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for i in 0..ta.rows() {
                        let gv = 1.0 - tt.data()[i];
                        for j in 0..n {
                            db.data_mut()[i * n + j] += g.data()[i * n + j] * gv;
                        }
                    }
                });
                self.accumulate(grads, *t, |dt| {
                    for i in 0..ta.rows() {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g.data()[i * n + j] * (ta.data()[i * n + j] - tb.data()[i * n + j]);
                        }
                        dt.data_mut()[i] += s;
                    }
                });
            }
            Op::CrossEntropySum { logits, targets } => {
                let t = &self.nodes[logits.0].value;
                let k = t.cols();
                let gv = g.item();
                self.accumulate(grads, *logits, |dl| {
                    for (qi, &tgt) in targets.iter().enumerate() {
                        let row = &t.data()[qi * k..(qi + 1) * k];
                        let probs = softmax(row);
                        let drow = &mut dl.data_mut()[qi * k..(qi + 1) * k];
                        for (j, &p) in probs.iter().enumerate() {
                            drow[j] += gv * (p - if j == tgt { 1.0 } else { 0.0 });
                        }
                    }
                });
            }
            Op::Dropout { x, rate, seed } => {
                let mut mask = vec![1.0; g.len()];
                apply_dropout_mask(&mut mask, *rate, *seed);
                self.accumulate(grads, *x, |dx| acc_mul(dx, g.data(), &mask));
            }
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Param(_) => "param",
        Op::MatMul(..) => "matmul",
        Op::MatMulNt(..) => "matmul_nt",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddRow(..) => "add_row",
        Op::Relu(_) => "relu",
        Op::Sigmoid(_) => "sigmoid",
        Op::Tanh(_) => "tanh",
        Op::Softplus(_) => "softplus",
        Op::Sum(_) => "sum",
        Op::MeanRows(_) => "mean_rows",
        Op::RowScale(..) => "row_scale",
        Op::Col(..) => "col",
        Op::ConcatCols(..) => "concat_cols",
        Op::SliceCols(..) => "slice_cols",
        Op::GatherRows(..) => "gather_rows",
        Op::ScatterAddRows { .. } => "scatter_add_rows",
        Op::ConvDecode { .. } => "conv_decode",
        Op::FilmModulate { .. } => "film_modulate",
        Op::DecayNormalize { .. } => "decay_normalize",
        Op::Lerp { .. } => "lerp",
        Op::RowLerp { .. } => "row_lerp",
        Op::CrossEntropySum { .. } => "cross_entropy_sum",
        Op::Dropout { .. } => "dropout",
    }
}

fn zip_tensors(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes checked by caller")
}

fn map_tensor(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = a.data().iter().map(|&x| f(x)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn acc(dst: &mut Tensor, src: &[f64], factor: f64) {
    for (d, &s) in dst.data_mut().iter_mut().zip(src) {
        *d += s * factor;
    }
}

fn acc_mul(dst: &mut Tensor, a: &[f64], b: &[f64]) {
    for ((d, &x), &y) in dst.data_mut().iter_mut().zip(a).zip(b) {
        *d += x * y;
    }
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_scalar(x: f64) -> f64 {
    // ln(1 + e^x) = max(x, 0) + ln(1 + e^-|x|)
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn apply_dropout_mask(data: &mut [f64], rate: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 / (1.0 - rate);
    for v in data.iter_mut() {
        if rng.gen::<f64>() < rate {
            *v = 0.0;
        } else {
            *v *= keep;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_decode_forward(
    subj: &[f64],
    rel: &[f64],
    kernels: &[f64],
    bias: &[f64],
    out: &mut [f64],
    q: usize,
    d: usize,
    channels: usize,
    ksize: usize,
) {
    let pad = (ksize - 1) / 2;
    for qi in 0..q {
        let rows = [&subj[qi * d..(qi + 1) * d], &rel[qi * d..(qi + 1) * d]];
        let kern = &kernels[qi * channels * 2 * ksize..(qi + 1) * channels * 2 * ksize];
        let b = &bias[qi * channels..(qi + 1) * channels];
        let o = &mut out[qi * channels * d..(qi + 1) * channels * d];
        for c in 0..channels {
            let oc = &mut o[c * d..(c + 1) * d];
            oc.iter_mut().for_each(|x| *x = b[c]);
            for (u, row) in rows.iter().enumerate() {
                let kc = &kern[c * 2 * ksize + u * ksize..c * 2 * ksize + (u + 1) * ksize];
                for (v, &kv) in kc.iter().enumerate() {
                    if kv == 0.0 {
                        continue;
                    }
                    // out[j] += kv * row[j + v - pad]
                    for j in 0..d {
                        let src = j + v;
                        if src >= pad && src - pad < d {
                            oc[j] += kv * row[src - pad];
                        }
                    }
                }
            }
        }
    }
}

fn conv_decode_backward_bias(g: &[f64], db: &mut [f64], q: usize, d: usize, channels: usize) {
    for qi in 0..q {
        for c in 0..channels {
            let sum: f64 = g[qi * channels * d + c * d..qi * channels * d + (c + 1) * d]
                .iter()
                .sum();
            db[qi * channels + c] += sum;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_decode_backward_kernels(
    g: &[f64],
    subj: &[f64],
    rel: &[f64],
    dk: &mut [f64],
    q: usize,
    d: usize,
    channels: usize,
    ksize: usize,
) {
    let pad = (ksize - 1) / 2;
    for qi in 0..q {
        let rows = [&subj[qi * d..(qi + 1) * d], &rel[qi * d..(qi + 1) * d]];
        for c in 0..channels {
            let gc = &g[qi * channels * d + c * d..qi * channels * d + (c + 1) * d];
            for (u, row) in rows.iter().enumerate() {
                for v in 0..ksize {
                    let mut s = 0.0;
                    for (j, &gv) in gc.iter().enumerate() {
                        let src = j + v;
                        if src >= pad && src - pad < d {
                            s += gv * row[src - pad];
                        }
                    }
                    dk[qi * channels * 2 * ksize + c * 2 * ksize + u * ksize + v] += s;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_decode_backward_input(
    g: &[f64],
    kernels: &[f64],
    dx: &mut [f64],
    q: usize,
    d: usize,
    channels: usize,
    ksize: usize,
    u: usize,
) {
    let pad = (ksize - 1) / 2;
    for qi in 0..q {
        let kern = &kernels[qi * channels * 2 * ksize..(qi + 1) * channels * 2 * ksize];
        let drow = &mut dx[qi * d..(qi + 1) * d];
        for c in 0..channels {
            let gc = &g[qi * channels * d + c * d..qi * channels * d + (c + 1) * d];
            let kc = &kern[c * 2 * ksize + u * ksize..c * 2 * ksize + (u + 1) * ksize];
            for (v, &kv) in kc.iter().enumerate() {
                if kv == 0.0 {
                    continue;
                }
                for (j, &gv) in gc.iter().enumerate() {
                    let src = j + v;
                    if src >= pad && src - pad < d {
                        drow[src - pad] += gv * kv;
                    }
                }
            }
        }
    }
}
