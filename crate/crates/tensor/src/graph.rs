//! Reverse-mode tape.
//!
//! Nodes are appended in evaluation order, so the node index is already a
//! topological order and `backward` is a single reverse sweep. Parameter
//! values are read from the borrowed [`ParamStore`] and never copied;
//! parameter gradients are collected in the graph and handed back with
//! [`Graph::take_param_grads`].

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::param::{BufferId, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

enum Op {
    Input,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        m: usize,
        k: usize,
        n: usize,
    },
    Gru(Box<GruCache>),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
        batch: usize,
        channels: usize,
        inner: usize,
    },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddConst(Var),
    Scale(Var, f64),
    Reshape(Var),
    Concat {
        a: Var,
        b: Var,
        rows: usize,
        ca: usize,
        cb: usize,
    },
    Softmax {
        x: Var,
        k: usize,
    },
    LogSoftmax {
        x: Var,
        k: usize,
    },
    SoftmaxNll {
        x: Var,
        k: usize,
        probs: Vec<f64>,
        targets: Vec<usize>,
        weights: Vec<f64>,
    },
    LogHadamardNll(Box<HadamardNllCache>),
    SumSquares {
        x: Var,
        scale: f64,
    },
}

struct GruCache {
    x: Var,
    h: Var,
    wx: Var,
    wh: Var,
    b: Var,
    batch: usize,
    input: usize,
    hidden: usize,
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
    rh: Vec<f64>,
}

struct HadamardNllCache {
    raw: Var,
    att: Var,
    heads: usize,
    k: usize,
    p_raw: Vec<f64>,
    p_att: Vec<f64>,
    targets: Vec<usize>,
    weights: Vec<f64>,
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
    grad: Option<Vec<f64>>,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    mode: Mode,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
    param_grads: Vec<Option<Vec<f64>>>,
    bn_updates: Vec<(BufferId, BufferId, Vec<f64>, Vec<f64>)>,
}

fn mismatch(op: &'static str, expected: &[usize], got: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        expected: expected.to_vec(),
        got: got.to_vec(),
    }
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore, mode: Mode) -> Self {
        Graph {
            store,
            mode,
            nodes: Vec::new(),
            param_nodes: vec![None; store.len()],
            param_grads: vec![None; store.len()],
            bn_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(p)) => &self.store.get(*p).value,
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient of the last `backward` call with respect to `v`, if any.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant input; gradients are not propagated into it.
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Input, false, "input")
    }

    /// Like [`Graph::input`] but gradients are kept (used by gradient checks).
    pub fn input_with_grad(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Input, true, "input")
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let frozen = self.store.get(id).frozen;
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: !frozen,
            grad: None,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(mismatch("conv2d", &[0, 0, 0, 0], &xs));
        }
        let geom = ConvGeom::new(&xs, &ws, stride, pad).ok_or_else(|| mismatch("conv2d", &ws, &xs))?;
        if self.shape(b) != [geom.f] {
            return Err(mismatch("conv2d", &[geom.f], self.shape(b)));
        }
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &geom,
        );
        let t = Tensor::from_vec(&[geom.n, geom.f, geom.oh, geom.ow], out)?;
        let ng = self.needs_grad(x) || self.needs_grad(w) || self.needs_grad(b);
        self.push(t, Op::Conv2d { x, w, b, geom }, ng, "conv2d")
    }

    pub fn maxpool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || kernel == 0 || stride == 0 || kernel > s[2] || kernel > s[3] {
            return Err(mismatch("maxpool2d", &[0, 0, kernel, kernel], &s));
        }
        let (out, argmax, os) = kernels::maxpool_forward(self.value(x).data(), [s[0], s[1], s[2], s[3]], kernel, stride);
        let t = Tensor::from_vec(&os, out)?;
        let ng = self.needs_grad(x);
        self.push(t, Op::MaxPool { x, argmax }, ng, "maxpool2d")
    }

    /// `x (m×k) · w (k×n) + b`
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(mismatch("linear", &ws, &xs));
        }
        let (m, k, n) = (xs[0], xs[1], ws[1]);
        let mut out = vec![0.0; m * n];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [n] {
                return Err(mismatch("linear", &[n], bv.shape()));
            }
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bv.data());
            }
        }
        kernels::gemm_acc(self.value(x).data(), self.value(w).data(), &mut out, m, k, n);
        let ng = self.needs_grad(x) || self.needs_grad(w) || b.map_or(false, |b| self.needs_grad(b));
        self.push(Tensor::from_vec(&[m, n], out)?, Op::Linear { x, w, b, m, k, n }, ng, "linear")
    }

    /// One GRU step. `wx: (in, 3H)`, `wh: (H, 3H)`, `b: (3H)`, gate order
    /// update `z`, reset `r`, candidate.
    ///
    /// z = σ(x·Wz + h·Uz + bz), r = σ(x·Wr + h·Ur + br),
    /// h̃ = tanh(x·Wh + (r⊙h)·Uh + bh), h′ = (1−z)⊙h + z⊙h̃
    pub fn gru(&mut self, x: Var, h: Var, wx: Var, wh: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let hs = self.shape(h).to_vec();
        if xs.len() != 2 || hs.len() != 2 || xs[0] != hs[0] {
            return Err(mismatch("gru", &xs, &hs));
        }
        let (batch, input, hidden) = (xs[0], xs[1], hs[1]);
        let g3 = 3 * hidden;
        if self.shape(wx) != [input, g3] {
            return Err(mismatch("gru", &[input, g3], self.shape(wx)));
        }
        if self.shape(wh) != [hidden, g3] {
            return Err(mismatch("gru", &[hidden, g3], self.shape(wh)));
        }
        if self.shape(b) != [g3] {
            return Err(mismatch("gru", &[g3], self.shape(b)));
        }
        let xv = self.value(x).data();
        let hv = self.value(h).data();
        let whv = self.value(wh).data();
        let mut gx = vec![0.0; batch * g3];
        for row in gx.chunks_mut(g3) {
            row.copy_from_slice(self.value(b).data());
        }
        kernels::gemm_acc(xv, self.value(wx).data(), &mut gx, batch, input, g3);
        let mut z = vec![0.0; batch * hidden];
        let mut r = vec![0.0; batch * hidden];
        let mut n = vec![0.0; batch * hidden];
        let mut rh = vec![0.0; batch * hidden];
        let mut out = vec![0.0; batch * hidden];
        let mut gh = vec![0.0; g3];
        for i in 0..batch {
            let hrow = &hv[i * hidden..(i + 1) * hidden];
            gh.fill(0.0);
            // z and r recurrent terms
            for (kk, &hk) in hrow.iter().enumerate() {
                if hk != 0.0 {
                    let wrow = &whv[kk * g3..kk * g3 + 2 * hidden];
                    for (g, w) in gh[..2 * hidden].iter_mut().zip(wrow) {
                        *g += hk * w;
                    }
                }
            }
            for j in 0..hidden {
                let o = i * hidden + j;
                z[o] = kernels::sigmoid(gx[i * g3 + j] + gh[j]);
                r[o] = kernels::sigmoid(gx[i * g3 + hidden + j] + gh[hidden + j]);
                rh[o] = r[o] * hrow[j];
            }
            let rhrow = &rh[i * hidden..(i + 1) * hidden];
            for (kk, &v) in rhrow.iter().enumerate() {
                if v != 0.0 {
                    let wrow = &whv[kk * g3 + 2 * hidden..(kk + 1) * g3];
                    for (g, w) in gh[2 * hidden..].iter_mut().zip(wrow) {
                        *g += v * w;
                    }
                }
            }
            for j in 0..hidden {
                let o = i * hidden + j;
                n[o] = (gx[i * g3 + 2 * hidden + j] + gh[2 * hidden + j]).tanh();
                out[o] = (1.0 - z[o]) * hrow[j] + z[o] * n[o];
            }
        }
        let ng = [x, h, wx, wh, b].iter().any(|&v| self.needs_grad(v));
        let cache = GruCache {
            x,
            h,
            wx,
            wh,
            b,
            batch,
            input,
            hidden,
            z,
            r,
            n,
            rh,
        };
        self.push(Tensor::from_vec(&[batch, hidden], out)?, Op::Gru(Box::new(cache)), ng, "gru")
    }

    /// Batch normalization over dimension 1 of `(N, C, ...)`. In training
    /// mode the running statistics held in `running` (mean, var) are
    /// scheduled for update; apply them with [`Graph::apply_bn_updates`].
    pub fn batchnorm(&mut self, x: Var, gamma: Var, beta: Var, running: (BufferId, BufferId)) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(mismatch("batchnorm", &[0, 0], &s));
        }
        let (batch, channels) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        if self.shape(gamma) != [channels] || self.shape(beta) != [channels] {
            return Err(mismatch("batchnorm", &[channels], self.shape(gamma)));
        }
        let training = self.mode == Mode::Train;
        if training && batch < 2 {
            return Err(TensorError::BatchTooSmall(batch));
        }
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let count = (batch * inner) as f64;
        let (mean, var) = if training {
            let mut mean = vec![0.0; channels];
            let mut var = vec![0.0; channels];
            for nb in 0..batch {
                for c in 0..channels {
                    let base = (nb * channels + c) * inner;
                    mean[c] += xv[base..base + inner].iter().sum::<f64>();
                }
            }
            for m in &mut mean {
                *m /= count;
            }
            for nb in 0..batch {
                for c in 0..channels {
                    let base = (nb * channels + c) * inner;
                    var[c] += xv[base..base + inner].iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
                }
            }
            for v in &mut var {
                *v /= count;
            }
            (mean, var)
        } else {
            (
                self.store.buffer(running.0).data().to_vec(),
                self.store.buffer(running.1).data().to_vec(),
            )
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for nb in 0..batch {
            for c in 0..channels {
                let base = (nb * channels + c) * inner;
                for i in base..base + inner {
                    xhat[i] = (xv[i] - mean[c]) * inv_std[c];
                    out[i] = gv[c] * xhat[i] + bv[c];
                }
            }
        }
        if training {
            self.bn_updates.push((running.0, running.1, mean, var));
        }
        let ng = [x, gamma, beta].iter().any(|&v| self.needs_grad(v));
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            training,
            batch,
            channels,
            inner,
        };
        self.push(Tensor::from_vec(&s, out)?, op, ng, "batchnorm")
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op, name: &'static str) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::from_vec(t.shape(), data)?;
        let ng = self.needs_grad(x);
        self.push(t, op, ng, name)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(0.0), Op::Relu(x), "relu")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::tanh, Op::Tanh(x), "tanh")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, kernels::sigmoid, Op::Sigmoid(x), "sigmoid")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, |v| v * c, Op::Scale(x, c), "scale")
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op, name: &'static str) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_vec(ta.shape(), data)?;
        let ng = self.needs_grad(a) || self.needs_grad(b);
        self.push(t, op, ng, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    /// Elementwise (Hadamard) product.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b), "hadamard")
    }

    /// Adds a constant tensor; the gradient passes through unchanged.
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let t = self.value(x);
        if t.shape() != c.shape() {
            return Err(mismatch("add_const", t.shape(), c.shape()));
        }
        let data = t.data().iter().zip(c.data()).map(|(a, b)| a + b).collect();
        let t = Tensor::from_vec(t.shape(), data)?;
        let ng = self.needs_grad(x);
        self.push(t, Op::AddConst(x), ng, "add_const")
    }

    /// Additive i.i.d. Gaussian noise in training mode, identity otherwise.
    pub fn gaussian_noise<R: Rng>(&mut self, x: Var, sigma: f64, rng: &mut R) -> Result<Var> {
        if self.mode == Mode::Eval || sigma == 0.0 {
            return Ok(x);
        }
        if !(sigma > 0.0) {
            return Err(TensorError::Invalid(format!("noise sigma must be >= 0, got {sigma}")));
        }
        let normal = Normal::new(0.0, sigma).map_err(|e| TensorError::Invalid(e.to_string()))?;
        let shape = self.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let noise = Tensor::from_vec(&shape, (0..n).map(|_| normal.sample(rng)).collect())?;
        self.add_const(x, &noise)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.needs_grad(x);
        self.push(t, Op::Reshape(x), ng, "reshape")
    }

    /// Concatenates two matrices along columns.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(mismatch("concat", &sa, &sb));
        }
        let (rows, ca, cb) = (sa[0], sa[1], sb[1]);
        let mut out = Vec::with_capacity(rows * (ca + cb));
        for i in 0..rows {
            out.extend_from_slice(self.value(a).row(i));
            out.extend_from_slice(self.value(b).row(i));
        }
        let ng = self.needs_grad(a) || self.needs_grad(b);
        self.push(Tensor::from_vec(&[rows, ca + cb], out)?, Op::Concat { a, b, rows, ca, cb }, ng, "concat")
    }

    fn last_dim(&self, x: Var) -> usize {
        *self.shape(x).last().unwrap_or(&1)
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let k = self.last_dim(x);
        let t = self.value(x);
        let t = Tensor::from_vec(t.shape(), kernels::softmax_rows(t.data(), k))?;
        let ng = self.needs_grad(x);
        self.push(t, Op::Softmax { x, k }, ng, "softmax")
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let k = self.last_dim(x);
        let t = self.value(x);
        let t = Tensor::from_vec(t.shape(), kernels::log_softmax_rows(t.data(), k))?;
        let ng = self.needs_grad(x);
        self.push(t, Op::LogSoftmax { x, k }, ng, "log_softmax")
    }

    /// `Σ_i w_i · (−log softmax(x_i)[t_i])` over the rows of `x`.
    pub fn softmax_nll(&mut self, x: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let k = self.last_dim(x);
        let rows = self.value(x).len() / k;
        if targets.len() != rows || weights.len() != rows || targets.iter().any(|&t| t >= k) {
            return Err(mismatch("softmax_nll", &[rows], &[targets.len()]));
        }
        let logp = kernels::log_softmax_rows(self.value(x).data(), k);
        let loss: f64 = (0..rows).map(|i| -weights[i] * logp[i * k + targets[i]]).sum();
        let probs = logp.iter().map(|v| v.exp()).collect();
        let ng = self.needs_grad(x);
        let op = Op::SoftmaxNll {
            x,
            k,
            probs,
            targets: targets.to_vec(),
            weights: weights.to_vec(),
        };
        self.push(Tensor::scalar(loss), op, ng, "softmax_nll")
    }

    /// Negative log of a Hadamard-combined likelihood:
    /// `Σ_{i,h} w · −log(softmax(raw_{i,h})[t] · softmax(att_i)[t])`.
    ///
    /// `raw` has shape `(N·heads, K)` (head-major within each sample),
    /// `att` has shape `(N, K)` and is shared by all heads of a sample.
    pub fn log_hadamard_nll(&mut self, raw: Var, att: Var, heads: usize, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let k = self.last_dim(att);
        let n = self.value(att).len() / k;
        if self.value(raw).len() != n * heads * k || self.last_dim(raw) != k {
            return Err(mismatch("log_hadamard_nll", &[n * heads, k], self.shape(raw)));
        }
        if targets.len() != n * heads || weights.len() != n * heads || targets.iter().any(|&t| t >= k) {
            return Err(mismatch("log_hadamard_nll", &[n * heads], &[targets.len()]));
        }
        let lr = kernels::log_softmax_rows(self.value(raw).data(), k);
        let la = kernels::log_softmax_rows(self.value(att).data(), k);
        let mut loss = 0.0;
        for i in 0..n {
            for h in 0..heads {
                let row = i * heads + h;
                let t = targets[row];
                loss -= weights[row] * (lr[row * k + t] + la[i * k + t]);
            }
        }
        let cache = HadamardNllCache {
            raw,
            att,
            heads,
            k,
            p_raw: lr.iter().map(|v| v.exp()).collect(),
            p_att: la.iter().map(|v| v.exp()).collect(),
            targets: targets.to_vec(),
            weights: weights.to_vec(),
        };
        let ng = self.needs_grad(raw) || self.needs_grad(att);
        self.push(Tensor::scalar(loss), Op::LogHadamardNll(Box::new(cache)), ng, "log_hadamard_nll")
    }

    /// `scale · Σ x²`
    pub fn sum_squares(&mut self, x: Var, scale: f64) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().map(|v| v * v).sum();
        let ng = self.needs_grad(x);
        self.push(Tensor::scalar(scale * s), Op::SumSquares { x, scale }, ng, "sum_squares")
    }

    /// Sums a list of scalar nodes.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let mut iter = terms.iter();
        let first = *iter
            .next()
            .ok_or_else(|| TensorError::Invalid("add_all: no terms".into()))?;
        let mut acc = first;
        for &t in iter {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// Running-statistic updates scheduled by training-mode batchnorm.
    pub fn take_bn_updates(&mut self) -> Vec<(BufferId, BufferId, Vec<f64>, Vec<f64>)> {
        std::mem::take(&mut self.bn_updates)
    }

    pub fn apply_bn_updates(updates: Vec<(BufferId, BufferId, Vec<f64>, Vec<f64>)>, store: &mut ParamStore) {
        for (mid, vid, mean, var) in updates {
            for (r, m) in store.buffer_mut(mid).data_mut().iter_mut().zip(&mean) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
            }
            for (r, v) in store.buffer_mut(vid).data_mut().iter_mut().zip(&var) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v;
            }
        }
    }

    /// Parameter gradients from the last backward pass, indexed by
    /// parameter id (`None` for parameters not reached or frozen).
    pub fn take_param_grads(&mut self) -> Vec<Option<Vec<f64>>> {
        std::mem::replace(&mut self.param_grads, vec![None; self.store.len()])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(mismatch("backward", &[1], self.shape(loss)));
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else { continue };
            let contribs = self.local_grads(i, &g);
            if let Op::Param(p) = self.nodes[i].op {
                match &mut self.param_grads[p.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g.clone()),
                }
            }
            self.nodes[i].grad = Some(g);
            for (v, cg) in contribs {
                let node = &mut self.nodes[v.0];
                if !node.needs_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&cg).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(cg),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let ng = |v: Var| self.nodes[v.0].needs_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    geom,
                    ng(*x),
                );
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                out.push((*w, dw));
                out.push((*b, db));
            }
            Op::MaxPool { x, argmax } => {
                if ng(*x) {
                    let mut dx = vec![0.0; self.value(*x).len()];
                    for (&src, &gv) in argmax.iter().zip(g) {
                        dx[src] += gv;
                    }
                    out.push((*x, dx));
                }
            }
            Op::Linear { x, w, b, m, k, n } => {
                if ng(*x) {
                    let mut dx = vec![0.0; m * k];
                    kernels::gemm_bt_acc(g, self.value(*w).data(), &mut dx, *m, *n, *k);
                    out.push((*x, dx));
                }
                if ng(*w) {
                    let mut dw = vec![0.0; k * n];
                    kernels::gemm_at_acc(self.value(*x).data(), g, &mut dw, *m, *k, *n);
                    out.push((*w, dw));
                }
                if let Some(b) = b {
                    if ng(*b) {
                        let mut db = vec![0.0; *n];
                        for row in g.chunks(*n) {
                            db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                        }
                        out.push((*b, db));
                    }
                }
            }
            Op::Gru(c) => out.extend(self.gru_backward(c, g)),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
                batch,
                channels,
                inner,
            } => {
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![0.0; *channels];
                let mut dbeta = vec![0.0; *channels];
                let mut sum_dxhat = vec![0.0; *channels];
                let mut sum_dxhat_xhat = vec![0.0; *channels];
                for nb in 0..*batch {
                    for c in 0..*channels {
                        let base = (nb * channels + c) * inner;
                        for j in base..base + inner {
                            dgamma[c] += g[j] * xhat[j];
                            dbeta[c] += g[j];
                            let dxh = g[j] * gv[c];
                            sum_dxhat[c] += dxh;
                            sum_dxhat_xhat[c] += dxh * xhat[j];
                        }
                    }
                }
                if ng(*x) {
                    let mut dx = vec![0.0; g.len()];
                    let m = (batch * inner) as f64;
                    for nb in 0..*batch {
                        for c in 0..*channels {
                            let base = (nb * channels + c) * inner;
                            for j in base..base + inner {
                                let dxh = g[j] * gv[c];
                                dx[j] = if *training {
                                    inv_std[c] / m * (m * dxh - sum_dxhat[c] - xhat[j] * sum_dxhat_xhat[c])
                                } else {
                                    dxh * inv_std[c]
                                };
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                out.push((*x, g.iter().zip(xv).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect()));
            }
            Op::Tanh(x) => {
                let y = node.value.as_ref().unwrap().data();
                out.push((*x, g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect()));
            }
            Op::Sigmoid(x) => {
                let y = node.value.as_ref().unwrap().data();
                out.push((*x, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect()));
            }
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if ng(*a) {
                    out.push((*a, g.iter().zip(bv).map(|(g, b)| g * b).collect()));
                }
                if ng(*b) {
                    out.push((*b, g.iter().zip(av).map(|(g, a)| g * a).collect()));
                }
            }
            Op::AddConst(x) | Op::Reshape(x) => out.push((*x, g.to_vec())),
            Op::Scale(x, c) => out.push((*x, g.iter().map(|v| v * c).collect())),
            Op::Concat { a, b, rows, ca, cb } => {
                let w = ca + cb;
                let mut da = Vec::with_capacity(rows * ca);
                let mut db = Vec::with_capacity(rows * cb);
                for r in 0..*rows {
                    da.extend_from_slice(&g[r * w..r * w + ca]);
                    db.extend_from_slice(&g[r * w + ca..(r + 1) * w]);
                }
                out.push((*a, da));
                out.push((*b, db));
            }
            Op::Softmax { x, k } => {
                let p = node.value.as_ref().unwrap().data();
                let mut dx = vec![0.0; g.len()];
                for ((gr, pr), dr) in g.chunks(*k).zip(p.chunks(*k)).zip(dx.chunks_mut(*k)) {
                    let s: f64 = gr.iter().zip(pr).map(|(a, b)| a * b).sum();
                    for ((d, gi), pi) in dr.iter_mut().zip(gr).zip(pr) {
                        *d = pi * (gi - s);
                    }
                }
                out.push((*x, dx));
            }
            Op::LogSoftmax { x, k } => {
                let lp = node.value.as_ref().unwrap().data();
                let mut dx = vec![0.0; g.len()];
                for ((gr, lr), dr) in g.chunks(*k).zip(lp.chunks(*k)).zip(dx.chunks_mut(*k)) {
                    let s: f64 = gr.iter().sum();
                    for ((d, gi), li) in dr.iter_mut().zip(gr).zip(lr) {
                        *d = gi - li.exp() * s;
                    }
                }
                out.push((*x, dx));
            }
            Op::SoftmaxNll {
                x,
                k,
                probs,
                targets,
                weights,
            } => {
                let mut dx = probs.clone();
                for (r, row) in dx.chunks_mut(*k).enumerate() {
                    row[targets[r]] -= 1.0;
                    let s = weights[r] * g[0];
                    row.iter_mut().for_each(|v| *v *= s);
                }
                out.push((*x, dx));
            }
            Op::LogHadamardNll(c) => {
                let k = c.k;
                let n = c.p_att.len() / k;
                let mut draw = c.p_raw.clone();
                let mut datt = vec![0.0; c.p_att.len()];
                for i in 0..n {
                    for h in 0..c.heads {
                        let row = i * c.heads + h;
                        let s = c.weights[row] * g[0];
                        let t = c.targets[row];
                        let dr = &mut draw[row * k..(row + 1) * k];
                        dr[t] -= 1.0;
                        dr.iter_mut().for_each(|v| *v *= s);
                        let pa = &c.p_att[i * k..(i + 1) * k];
                        let da = &mut datt[i * k..(i + 1) * k];
                        for (d, p) in da.iter_mut().zip(pa) {
                            *d += s * p;
                        }
                        da[t] -= s;
                    }
                }
                if ng(c.raw) {
                    out.push((c.raw, draw));
                }
                if ng(c.att) {
                    out.push((c.att, datt));
                }
            }
            Op::SumSquares { x, scale } => {
                let xv = self.value(*x).data();
                out.push((*x, xv.iter().map(|v| 2.0 * scale * v * g[0]).collect()));
            }
        }
        out
    }

    fn gru_backward(&self, c: &GruCache, dout: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let (batch, input, hidden) = (c.batch, c.input, c.hidden);
        let g3 = 3 * hidden;
        let hv = self.value(c.h).data();
        let whv = self.value(c.wh).data();
        let mut dgx = vec![0.0; batch * g3];
        let mut dh = vec![0.0; batch * hidden];
        let mut drh = vec![0.0; hidden];
        // dWh columns for z/r use h, the candidate column uses r⊙h
        let mut dwh = vec![0.0; hidden * g3];
        for i in 0..batch {
            let o = i * hidden;
            let drow = &mut dgx[i * g3..(i + 1) * g3];
            for j in 0..hidden {
                let d = dout[o + j];
                let (z, n, h) = (c.z[o + j], c.n[o + j], hv[o + j]);
                dh[o + j] = d * (1.0 - z);
                drow[j] = d * (n - h) * z * (1.0 - z);
                drow[2 * hidden + j] = d * z * (1.0 - n * n);
            }
            // d(r⊙h) = dan · Unᵀ
            for kk in 0..hidden {
                let wrow = &whv[kk * g3 + 2 * hidden..(kk + 1) * g3];
                drh[kk] = wrow.iter().zip(&drow[2 * hidden..]).map(|(a, b)| a * b).sum();
            }
            for j in 0..hidden {
                let r = c.r[o + j];
                dh[o + j] += drh[j] * r;
                drow[hidden + j] = drh[j] * hv[o + j] * r * (1.0 - r);
            }
            // recurrent contribution of z and r gates to dh
            for kk in 0..hidden {
                let wrow = &whv[kk * g3..kk * g3 + 2 * hidden];
                dh[o + kk] += wrow.iter().zip(&drow[..2 * hidden]).map(|(a, b)| a * b).sum::<f64>();
            }
            for kk in 0..hidden {
                let (hk, rhk) = (hv[o + kk], c.rh[o + kk]);
                let wrow = &mut dwh[kk * g3..(kk + 1) * g3];
                if hk != 0.0 {
                    for j in 0..2 * hidden {
                        wrow[j] += hk * drow[j];
                    }
                }
                if rhk != 0.0 {
                    for j in 2 * hidden..g3 {
                        wrow[j] += rhk * drow[j];
                    }
                }
            }
        }
        let ng = |v: Var| self.nodes[v.0].needs_grad;
        let mut out = Vec::new();
        if ng(c.x) {
            let mut dx = vec![0.0; batch * input];
            kernels::gemm_bt_acc(&dgx, self.value(c.wx).data(), &mut dx, batch, g3, input);
            out.push((c.x, dx));
        }
        if ng(c.wx) {
            let mut dwx = vec![0.0; input * g3];
            kernels::gemm_at_acc(self.value(c.x).data(), &dgx, &mut dwx, batch, input, g3);
            out.push((c.wx, dwx));
        }
        if ng(c.b) {
            let mut db = vec![0.0; g3];
            for row in dgx.chunks(g3) {
                db.iter_mut().zip(row).for_each(|(a, v)| *a += v);
            }
            out.push((c.b, db));
        }
        out.push((c.wh, dwh));
        out.push((c.h, dh));
        out
    }
}
