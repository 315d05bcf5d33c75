//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a write-once list of nodes. Each operation appends a node
//! holding its forward value and whatever it needs for the backward pass, so
//! the node order is already a topological order and [`Graph::backward`] is a
//! single reverse sweep.
//!
//! Gradients accumulate: calling `backward` twice on the same graph adds the
//! second set of leaf gradients to the first. Nothing is reset implicitly;
//! the optimizer clears parameter gradients after it consumes them.

use std::collections::BTreeMap;

use crate::tensor::{ParamSet, Tensor};
use crate::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Affine { a: Var, scale: f64 },
    Sigmoid { a: Var },
    Tanh { a: Var },
    Relu { a: Var },
    Sum { a: Var },
    Mean { a: Var },
    Reshape { a: Var },
    Cols { a: Var, start: usize },
    TimeStep { a: Var, t: usize },
    Conv1d { x: Var, k: Var, b: Var },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Gather { a: Var, idx: Vec<usize> },
    Huber { pred: Var, target: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Statistics of a train-mode batch normalization, returned to the caller so
/// it can fold them into its running estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (divide-by-n) variance, the one used for normalization.
    pub var: Vec<f64>,
    pub batch: usize,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
    bound: BTreeMap<String, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient accumulated on a leaf by previous backward passes.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    /// Records a leaf. Its gradient is tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad();
        let value = tensor.detached();
        // Leaves are validated by construction; non-finite inputs are still
        // rejected so that downstream invariants hold.
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: rg,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Binds the named parameter as a gradient-tracking leaf. Binding the same
    /// name twice returns the same node, so a weight shared across time steps
    /// accumulates a single gradient.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = params.get(name)?.detached().with_requires_grad(true);
        let v = self.leaf(t);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Adds the gradients of every bound parameter into `params`. Parameters
    /// that were bound but unreachable from the loss receive zeros.
    pub fn export_grads(&self, params: &mut ParamSet) -> Result<()> {
        for (name, &v) in &self.bound {
            let t = params.get_mut(name)?;
            match &self.leaf_grads[v.0] {
                Some(g) => t.accumulate_grad(g)?,
                None => t.accumulate_grad(&vec![0.0; t.numel()])?,
            }
        }
        Ok(())
    }

    // ---------------------------------------------------------------- ops

    /// `y = x W + b` for `x: [batch, in]`, `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 {
            return Err(Error::Shape {
                op: "linear",
                detail: format!("expected x[batch,in], W[in,out], b[out]; got {xs:?}, {ws:?}, {bs:?}"),
            });
        }
        let (batch, inp, out) = (xs[0], xs[1], ws[1]);
        if ws[0] != inp {
            return Err(Error::Shape {
                op: "linear",
                detail: format!("x axis 1 has {inp} features but W axis 0 has {}", ws[0]),
            });
        }
        if bs[0] != out {
            return Err(Error::Shape {
                op: "linear",
                detail: format!("W axis 1 has {out} outputs but b axis 0 has {}", bs[0]),
            });
        }
        let mut y = matmul(self.value(x).data(), self.value(w).data(), batch, inp, out);
        let bias = self.value(b).data();
        for row in y.chunks_mut(out) {
            row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push("linear", Tensor::new(&[batch, out], y)?, Op::Linear { x, w, b }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("cannot multiply {sa:?} by {sb:?} (a axis 1 must equal b axis 0)"),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let y = matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", Tensor::new(&[m, n], y)?, Op::MatMul { a, b }, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(op_name, t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// `scale * a + shift`, element-wise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        self.map("affine", a, |x| scale * x + shift, Op::Affine { a, scale })
    }

    fn map(&mut self, op_name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let src = self.value(a);
        let t = Tensor::new(src.shape(), src.data().iter().map(|&x| f(x)).collect())?;
        let rg = self.rg(a);
        self.push(op_name, t, op, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map("sigmoid", a, sigmoid, Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map("tanh", a, f64::tanh, Op::Tanh { a })
    }

    /// Rectifier; the subgradient at zero is taken as zero.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map("relu", a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu { a })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push("sum", Tensor::scalar(s), Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::EmptyInput { op: "mean" });
        }
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push("mean", Tensor::scalar(s / n as f64), Op::Mean { a }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).detached().reshape(shape)?;
        let rg = self.rg(a);
        self.push("reshape", t, Op::Reshape { a }, rg)
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || start + len > s[1] {
            return Err(Error::Shape {
                op: "cols",
                detail: format!("columns {start}..{} out of range for {s:?}", start + len),
            });
        }
        let (rows, width) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * width + start..r * width + start + len]);
        }
        let rg = self.rg(a);
        self.push("cols", Tensor::new(&[rows, len], data)?, Op::Cols { a, start }, rg)
    }

    /// Slice `[:, t, :]` of a `[batch, time, features]` tensor.
    pub fn time_step(&mut self, a: Var, t: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 3 || t >= s[1] {
            return Err(Error::Shape {
                op: "time_step",
                detail: format!("step {t} out of range for {s:?} (expected [batch, time, features])"),
            });
        }
        let (batch, time, feat) = (s[0], s[1], s[2]);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(batch * feat);
        for n in 0..batch {
            let off = (n * time + t) * feat;
            data.extend_from_slice(&src[off..off + feat]);
        }
        let rg = self.rg(a);
        self.push("time_step", Tensor::new(&[batch, feat], data)?, Op::TimeStep { a, t }, rg)
    }

    /// Valid (unpadded) cross-correlation along the last axis.
    ///
    /// `x` is `[batch, in_ch, time]` (or `[in_ch, time]` for a single sample),
    /// `k` is `[out_ch, in_ch, width]` and `b` is `[out_ch]`. The output has
    /// `time - width + 1` steps.
    pub fn conv1d(&mut self, x: Var, k: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        let bs = self.shape(b).to_vec();
        let (batch, cin, time, unbatched) = match xs.as_slice() {
            [c, t] => (1, *c, *t, true),
            [n, c, t] => (*n, *c, *t, false),
            _ => {
                return Err(Error::Shape {
                    op: "conv1d",
                    detail: format!("input must be [channels, time] or [batch, channels, time], got {xs:?}"),
                })
            }
        };
        let [cout, kin, width] = ks.as_slice() else {
            return Err(Error::Shape {
                op: "conv1d",
                detail: format!("kernels must be [out_ch, in_ch, width], got {ks:?}"),
            });
        };
        let (cout, width) = (*cout, *width);
        if *kin != cin {
            return Err(Error::Shape {
                op: "conv1d",
                detail: format!("input has {cin} channels but kernels expect {kin}"),
            });
        }
        if bs != [cout] {
            return Err(Error::Shape {
                op: "conv1d",
                detail: format!("bias must be [{cout}], got {bs:?}"),
            });
        }
        if time < width {
            return Err(Error::InsufficientLength {
                op: "conv1d",
                len: time,
                kernel: width,
            });
        }
        let tout = time - width + 1;
        let xv = self.value(x).data();
        let kv = self.value(k).data();
        let bv = self.value(b).data();
        let mut y = vec![0.0; batch * cout * tout];
        for n in 0..batch {
            for o in 0..cout {
                let yrow = &mut y[(n * cout + o) * tout..(n * cout + o + 1) * tout];
                yrow.fill(bv[o]);
                for c in 0..cin {
                    let xrow = &xv[(n * cin + c) * time..(n * cin + c + 1) * time];
                    let krow = &kv[(o * cin + c) * width..(o * cin + c + 1) * width];
                    for (t, yv) in yrow.iter_mut().enumerate() {
                        *yv += krow.iter().zip(&xrow[t..t + width]).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
        }
        let shape = if unbatched { vec![cout, tout] } else { vec![batch, cout, tout] };
        let rg = self.rg(x) || self.rg(k) || self.rg(b);
        self.push("conv1d", Tensor::new(&shape, y)?, Op::Conv1d { x, k, b }, rg)
    }

    /// Train-mode batch normalization over the rows of `x: [batch, features]`.
    /// Returns the output and the batch statistics used.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (batch, feat) = self.bn_shapes(x, gamma, beta)?;
        if batch < 2 {
            return Err(Error::DegenerateBatch { batch });
        }
        let xv = self.value(x).data();
        let mut mean = vec![0.0; feat];
        for row in xv.chunks(feat) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= batch as f64);
        let mut var = vec![0.0; feat];
        for row in xv.chunks(feat) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= batch as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.bn_apply(x, gamma, beta, &mean, inv_std, true)?;
        Ok((out, BatchStats { mean, var, batch }))
    }

    /// Eval-mode batch normalization using externally supplied statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        let (_, feat) = self.bn_shapes(x, gamma, beta)?;
        if mean.len() != feat || var.len() != feat {
            return Err(Error::Shape {
                op: "batch_norm",
                detail: format!("running stats have {} / {} entries for {feat} features", mean.len(), var.len()),
            });
        }
        let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.bn_apply(x, gamma, beta, mean, inv_std, false)
    }

    fn bn_shapes(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize)> {
        let xs = self.shape(x);
        if xs.len() != 2 {
            return Err(Error::Shape {
                op: "batch_norm",
                detail: format!("input must be [batch, features], got {xs:?}"),
            });
        }
        let feat = xs[1];
        if self.shape(gamma) != [feat] || self.shape(beta) != [feat] {
            return Err(Error::Shape {
                op: "batch_norm",
                detail: format!(
                    "gamma {:?} and beta {:?} must both be [{feat}]",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            });
        }
        Ok((xs[0], feat))
    }

    fn bn_apply(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], inv_std: Vec<f64>, batch_stats: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let feat = shape[1];
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut y = Vec::with_capacity(xv.len());
        for row in xv.chunks(feat) {
            for j in 0..feat {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                y.push(g[j] * h + bt[j]);
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            "batch_norm",
            Tensor::new(&shape, y)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        )
    }

    /// Picks `a[i, idx[i]]` from a `[batch, k]` tensor.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || s[0] != idx.len() || idx.iter().any(|&i| i >= s[1]) {
            return Err(Error::Shape {
                op: "gather",
                detail: format!("{} indices into {s:?}", idx.len()),
            });
        }
        let k = s[1];
        let src = self.value(a).data();
        let data = idx.iter().enumerate().map(|(r, &c)| src[r * k + c]).collect();
        let rg = self.rg(a);
        self.push("gather", Tensor::from_vec(data), Op::Gather { a, idx: idx.to_vec() }, rg)
    }

    /// Mean Huber loss with unit threshold: `e²/2` for `|e| <= 1`, else
    /// `|e| - 1/2`, where `e = pred - target`.
    pub fn huber_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("huber_loss", pred, target)?;
        let n = self.value(pred).numel();
        if n == 0 {
            return Err(Error::EmptyInput { op: "huber_loss" });
        }
        let total: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(p, t)| huber(p - t))
            .sum();
        let rg = self.rg(pred) || self.rg(target);
        self.push("huber_loss", Tensor::scalar(total / n as f64), Op::Huber { pred, target }, rg)
    }

    // ----------------------------------------------------------- backward

    /// Propagates d`loss`/d(node) to every leaf that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(Error::Rank {
                op: "backward",
                shape: shape.to_vec(),
            });
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(gy) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let nodes = &self.nodes;
            let rg = |v: Var| nodes[v.0].requires_grad;
            let val = |v: Var| nodes[v.0].value.data();
            match &node.op {
                Op::Leaf => {
                    if !gy.iter().all(|g| g.is_finite()) {
                        return Err(Error::NonFinite { op: "backward" });
                    }
                    match &mut self.leaf_grads[i] {
                        Some(g) => g.iter_mut().zip(&gy).for_each(|(g, d)| *g += d),
                        slot @ None => *slot = Some(gy),
                    }
                }
                Op::Linear { x, w, b } => {
                    let xs = nodes[x.0].value.shape();
                    let (batch, inp) = (xs[0], xs[1]);
                    let out = nodes[w.0].value.shape()[1];
                    if rg(*x) {
                        add_into(&mut adj, *x, matmul_bt(&gy, val(*w), batch, out, inp));
                    }
                    if rg(*w) {
                        add_into(&mut adj, *w, matmul_at(val(*x), &gy, batch, inp, out));
                    }
                    if rg(*b) {
                        let mut gb = vec![0.0; out];
                        for row in gy.chunks(out) {
                            gb.iter_mut().zip(row).for_each(|(g, v)| *g += v);
                        }
                        add_into(&mut adj, *b, gb);
                    }
                }
                Op::MatMul { a, b } => {
                    let sa = nodes[a.0].value.shape();
                    let (m, k) = (sa[0], sa[1]);
                    let n = nodes[b.0].value.shape()[1];
                    if rg(*a) {
                        add_into(&mut adj, *a, matmul_bt(&gy, val(*b), m, n, k));
                    }
                    if rg(*b) {
                        add_into(&mut adj, *b, matmul_at(val(*a), &gy, m, k, n));
                    }
                }
                Op::Add { a, b } => {
                    if rg(*a) {
                        add_into(&mut adj, *a, gy.clone());
                    }
                    if rg(*b) {
                        add_into(&mut adj, *b, gy);
                    }
                }
                Op::Sub { a, b } => {
                    if rg(*a) {
                        add_into(&mut adj, *a, gy.clone());
                    }
                    if rg(*b) {
                        add_into(&mut adj, *b, gy.iter().map(|g| -g).collect());
                    }
                }
                Op::Mul { a, b } => {
                    if rg(*a) {
                        add_into(&mut adj, *a, gy.iter().zip(val(*b)).map(|(g, y)| g * y).collect());
                    }
                    if rg(*b) {
                        add_into(&mut adj, *b, gy.iter().zip(val(*a)).map(|(g, x)| g * x).collect());
                    }
                }
                Op::Affine { a, scale } => {
                    add_into(&mut adj, *a, gy.iter().map(|g| g * scale).collect());
                }
                Op::Sigmoid { a } => {
                    let y = node.value.data();
                    add_into(&mut adj, *a, gy.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect());
                }
                Op::Tanh { a } => {
                    let y = node.value.data();
                    add_into(&mut adj, *a, gy.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect());
                }
                Op::Relu { a } => {
                    let x = val(*a);
                    add_into(
                        &mut adj,
                        *a,
                        gy.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
                    );
                }
                Op::Sum { a } => {
                    let n = nodes[a.0].value.numel();
                    add_into(&mut adj, *a, vec![gy[0]; n]);
                }
                Op::Mean { a } => {
                    let n = nodes[a.0].value.numel();
                    add_into(&mut adj, *a, vec![gy[0] / n as f64; n]);
                }
                Op::Reshape { a } => add_into(&mut adj, *a, gy),
                Op::Cols { a, start } => {
                    let s = nodes[a.0].value.shape();
                    let (rows, width) = (s[0], s[1]);
                    let len = gy.len() / rows.max(1);
                    let mut ga = vec![0.0; rows * width];
                    for r in 0..rows {
                        ga[r * width + start..r * width + start + len].copy_from_slice(&gy[r * len..(r + 1) * len]);
                    }
                    add_into(&mut adj, *a, ga);
                }
                Op::TimeStep { a, t } => {
                    let s = nodes[a.0].value.shape();
                    let (batch, time, feat) = (s[0], s[1], s[2]);
                    let mut ga = vec![0.0; batch * time * feat];
                    for n in 0..batch {
                        let off = (n * time + t) * feat;
                        ga[off..off + feat].copy_from_slice(&gy[n * feat..(n + 1) * feat]);
                    }
                    add_into(&mut adj, *a, ga);
                }
                Op::Conv1d { x, k, b } => {
                    let xs = nodes[x.0].value.shape();
                    let (batch, cin, time) = match xs {
                        [c, t] => (1, *c, *t),
                        [n, c, t] => (*n, *c, *t),
                        _ => unreachable!("validated in forward"),
                    };
                    let ks = nodes[k.0].value.shape();
                    let (cout, width) = (ks[0], ks[2]);
                    let tout = time - width + 1;
                    let xv = val(*x);
                    let kv = val(*k);
                    let mut gx = rg(*x).then(|| vec![0.0; xv.len()]);
                    let mut gk = rg(*k).then(|| vec![0.0; kv.len()]);
                    let mut gb = rg(*b).then(|| vec![0.0; cout]);
                    for n in 0..batch {
                        for o in 0..cout {
                            let grow = &gy[(n * cout + o) * tout..(n * cout + o + 1) * tout];
                            if let Some(gb) = gb.as_mut() {
                                gb[o] += grow.iter().sum::<f64>();
                            }
                            for c in 0..cin {
                                let xoff = (n * cin + c) * time;
                                let koff = (o * cin + c) * width;
                                for (t, &g) in grow.iter().enumerate() {
                                    if g == 0.0 {
                                        continue;
                                    }
                                    for j in 0..width {
                                        if let Some(gx) = gx.as_mut() {
                                            gx[xoff + t + j] += g * kv[koff + j];
                                        }
                                        if let Some(gk) = gk.as_mut() {
                                            gk[koff + j] += g * xv[xoff + t + j];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if let Some(g) = gx {
                        add_into(&mut adj, *x, g);
                    }
                    if let Some(g) = gk {
                        add_into(&mut adj, *k, g);
                    }
                    if let Some(g) = gb {
                        add_into(&mut adj, *b, g);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let feat = inv_std.len();
                    let batch = gy.len() / feat;
                    let gv = val(*gamma);
                    if rg(*gamma) {
                        let mut gg = vec![0.0; feat];
                        for (grow, hrow) in gy.chunks(feat).zip(xhat.chunks(feat)) {
                            for j in 0..feat {
                                gg[j] += grow[j] * hrow[j];
                            }
                        }
                        add_into(&mut adj, *gamma, gg);
                    }
                    if rg(*beta) {
                        let mut gb = vec![0.0; feat];
                        for grow in gy.chunks(feat) {
                            gb.iter_mut().zip(grow).for_each(|(g, v)| *g += v);
                        }
                        add_into(&mut adj, *beta, gb);
                    }
                    if rg(*x) {
                        let mut gx = vec![0.0; gy.len()];
                        if *batch_stats {
                            // d xhat contributions through the batch mean and variance
                            let mut sum_g = vec![0.0; feat];
                            let mut sum_gh = vec![0.0; feat];
                            for (grow, hrow) in gy.chunks(feat).zip(xhat.chunks(feat)) {
                                for j in 0..feat {
                                    let gh = grow[j] * gv[j];
                                    sum_g[j] += gh;
                                    sum_gh[j] += gh * hrow[j];
                                }
                            }
                            let nb = batch as f64;
                            for r in 0..batch {
                                for j in 0..feat {
                                    let idx = r * feat + j;
                                    let gh = gy[idx] * gv[j];
                                    gx[idx] = inv_std[j] / nb * (nb * gh - sum_g[j] - xhat[idx] * sum_gh[j]);
                                }
                            }
                        } else {
                            for (idx, g) in gy.iter().enumerate() {
                                let j = idx % feat;
                                gx[idx] = g * gv[j] * inv_std[j];
                            }
                        }
                        add_into(&mut adj, *x, gx);
                    }
                }
                Op::Gather { a, idx } => {
                    let k = nodes[a.0].value.shape()[1];
                    let mut ga = vec![0.0; idx.len() * k];
                    for (r, &c) in idx.iter().enumerate() {
                        ga[r * k + c] = gy[r];
                    }
                    add_into(&mut adj, *a, ga);
                }
                Op::Huber { pred, target } => {
                    let p = val(*pred);
                    let t = val(*target);
                    let n = p.len() as f64;
                    let d: Vec<f64> = p.iter().zip(t).map(|(p, t)| gy[0] * huber_grad(p - t) / n).collect();
                    if rg(*target) {
                        add_into(&mut adj, *target, d.iter().map(|g| -g).collect());
                    }
                    if rg(*pred) {
                        add_into(&mut adj, *pred, d);
                    }
                }
            }
        }
        Ok(())
    }
}

fn add_into(adj: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
    match &mut adj[v.0] {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(g, d)| *g += d),
        slot @ None => *slot = Some(delta),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Element-wise Huber loss with threshold 1.
pub fn huber(e: f64) -> f64 {
    let a = e.abs();
    if a <= 1.0 {
        0.5 * e * e
    } else {
        a - 0.5
    }
}

fn huber_grad(e: f64) -> f64 {
    e.clamp(-1.0, 1.0)
}

/// `[m, k] x [k, n]`
fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, b)| *o += av * b);
        }
    }
    out
}

/// `g [m, n] x bᵀ` where `b` is `[k, n]`; result `[m, k]`.
fn matmul_bt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ x g` where `a` is `[m, k]` and `g` is `[m, n]`; result `[k, n]`.
fn matmul_at(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            orow.iter_mut().zip(grow).for_each(|(o, g)| *o += av * g);
        }
    }
    out
}
