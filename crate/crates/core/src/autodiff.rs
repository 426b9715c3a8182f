//! Define-by-run reverse-mode automatic differentiation.
//!
//! Every op evaluates eagerly and appends a node to a [`Tape`]. A node keeps
//! its value, the ids of its inputs and a closure that maps the upstream
//! gradient to gradients for those inputs. [`Tape::backward`] walks the nodes
//! in reverse creation order, which is a valid topological order because
//! nodes can only reference earlier nodes.
//!
//! Tracked tensors are never mutated in place. A tape is single-threaded
//! (`RefCell` inside); build one tape per forward pass.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::{self, ExactSum};
use crate::tensor::{broadcast_index, broadcast_shapes, numel, permute_data, Tensor};

type Backward = Box<dyn Fn(&BackCtx<'_>) -> Vec<Option<Vec<f64>>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<Backward>,
    requires_grad: bool,
}

/// What a backward closure sees: the upstream gradient, the op's output and
/// its inputs, and which inputs actually need a gradient.
pub struct BackCtx<'a> {
    pub grad: &'a [f64],
    pub out: &'a Tensor,
    pub inputs: Vec<&'a Tensor>,
    pub needs: Vec<bool>,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: Cell::new(true),
        }
    }

    /// A tape that records values only; nothing on it can be differentiated.
    pub fn inference() -> Self {
        let t = Self::new();
        t.grad_enabled.set(false);
        t
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable input. Gradients are reported for it after `backward`.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let requires_grad = self.grad_enabled.get();
        self.insert(value, Vec::new(), None, requires_grad)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.insert(value, Vec::new(), None, false)
    }

    fn insert(&self, value: Tensor, parents: Vec<usize>, backward: Option<Backward>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            parents,
            backward,
            requires_grad,
        });
        Var { tape: self, id }
    }

    fn push<F>(&self, value: Tensor, parents: &[usize], backward: F) -> Var<'_>
    where
        F: Fn(&BackCtx<'_>) -> Vec<Option<Vec<f64>>> + 'static,
    {
        let requires_grad = self.grad_enabled.get() && {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        let backward: Option<Backward> = if requires_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        self.insert(value, parents.to_vec(), backward, requires_grad)
    }

    fn value_of(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Gradients of a scalar `loss` with respect to every leaf that
    /// requires one.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", root.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.id).map(|_| None).collect();
        let mut leaves = HashMap::new();
        if !root.requires_grad {
            return Ok(Gradients { leaves });
        }
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.backward {
                Some(bw) => {
                    let ctx = BackCtx {
                        grad: &g,
                        out: &node.value,
                        inputs: node.parents.iter().map(|&p| &nodes[p].value).collect(),
                        needs: node.parents.iter().map(|&p| nodes[p].requires_grad).collect(),
                    };
                    let parent_grads = bw(&ctx);
                    for (&p, pg) in node.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !nodes[p].requires_grad {
                            continue;
                        }
                        match &mut grads[p] {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
                None if node.parents.is_empty() => {
                    leaves.insert(id, g);
                }
                None => {}
            }
        }
        Ok(Gradients { leaves })
    }

    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat", "no inputs"))?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(Error::contract("concat", format!("axis {axis} for rank {}", base.len())));
        }
        let mut sizes = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, &s));
            }
            sizes.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = sizes.iter().sum();
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut data = vec![0.0; outer * total * inner];
        {
            let nodes = self.nodes.borrow();
            let mut offset = 0;
            for (p, &len) in parts.iter().zip(&sizes) {
                let src = nodes[p.id].value.data();
                for o in 0..outer {
                    let dst = (o * total + offset) * inner;
                    data[dst..dst + len * inner].copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
                }
                offset += len;
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(self.push(Tensor::from_parts(out_shape, data), &ids, move |ctx| {
            let mut offset = 0;
            sizes
                .iter()
                .zip(&ctx.needs)
                .map(|(&len, &need)| {
                    let start = offset;
                    offset += len;
                    need.then(|| {
                        let mut g = vec![0.0; outer * len * inner];
                        for o in 0..outer {
                            let src = (o * total + start) * inner;
                            g[o * len * inner..(o + 1) * len * inner]
                                .copy_from_slice(&ctx.grad[src..src + len * inner]);
                        }
                        g
                    })
                })
                .collect()
        }))
    }

    /// Multiply by a fixed Bernoulli keep-mask scaled by `1/(1-p)`.
    pub fn dropout<'t, R: Rng + ?Sized>(&'t self, x: Var<'t>, p: f64, rng: &mut R) -> Var<'t> {
        if p <= 0.0 {
            return x;
        }
        let shape = x.shape();
        let keep = 1.0 / (1.0 - p);
        let mask = Tensor::from_fn(&shape, |_| if rng.random::<f64>() < p { 0.0 } else { keep });
        let m = self.constant(mask);
        x.mul(m).expect("dropout mask has the input shape")
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    leaves: HashMap<usize, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&[f64]> {
        self.leaves.get(&v.id).map(Vec::as_slice)
    }

    /// Gradient as a tensor shaped like `v`; zeros when `v` did not
    /// influence the loss.
    pub fn tensor(&self, v: Var<'_>) -> Tensor {
        let shape = v.shape();
        match self.get(v) {
            Some(g) => Tensor::from_parts(shape, g.to_vec()),
            None => Tensor::zeros(&shape),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn name(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
        }
    }

    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => a / b,
        }
    }

    fn grads(self, a: f64, b: f64) -> (f64, f64) {
        match self {
            BinOp::Add => (1.0, 1.0),
            BinOp::Sub => (1.0, -1.0),
            BinOp::Mul => (b, a),
            BinOp::Div => (1.0 / b, -a / (b * b)),
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn to_tensor(&self) -> Tensor {
        let v = self.value();
        Tensor::from_parts(v.shape().to_vec(), v.data().to_vec())
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().data()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    // ---- elementwise ------------------------------------------------------

    fn unary<F, D>(self, f: F, df: D) -> Var<'t>
    where
        F: Fn(f64) -> f64,
        D: Fn(f64, f64) -> f64 + 'static,
    {
        let out = {
            let x = self.value();
            Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
        };
        self.tape.push(out, &[self.id], move |ctx| {
            let x = ctx.inputs[0].data();
            let y = ctx.out.data();
            let g = ctx.grad.iter().zip(x.iter().zip(y)).map(|(g, (&x, &y))| g * df(x, y)).collect();
            vec![Some(g)]
        })
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(kernels::sigmoid, |_, y| y * (1.0 - y))
    }

    /// `ln σ(x)`, stable for large `|x|`.
    pub fn log_sigmoid(self) -> Var<'t> {
        self.unary(|x| x.min(0.0) - (-x.abs()).exp().ln_1p(), |x, _| kernels::sigmoid(-x))
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    /// Subgradient 0 at the origin.
    pub fn abs(self) -> Var<'t> {
        self.unary(f64::abs, |x, _| x.signum() * (x != 0.0) as u8 as f64)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    /// `x^e` for non-negative `x`.
    pub fn powf(self, e: f64) -> Var<'t> {
        self.unary(move |x| x.powf(e), move |x, _| if x == 0.0 { 0.0 } else { e * x.powf(e - 1.0) })
    }

    /// Gradient passes only strictly inside the interval.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(move |x| x.clamp(lo, hi), move |x, _| if x > lo && x < hi { 1.0 } else { 0.0 })
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(move |x| x + c, |_, _| 1.0)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    fn binary(self, other: Var<'t>, op: BinOp) -> Result<Var<'t>> {
        let (out, a_shape, b_shape) = {
            let a = self.value();
            let b = other.value();
            let out_shape = broadcast_shapes(a.shape(), b.shape())
                .ok_or_else(|| Error::shape(op.name(), a.shape(), b.shape()))?;
            let data: Vec<f64> = if a.shape() == b.shape() {
                a.data().iter().zip(b.data()).map(|(&x, &y)| op.apply(x, y)).collect()
            } else {
                let ia = broadcast_index(a.shape(), &out_shape);
                let ib = broadcast_index(b.shape(), &out_shape);
                ia.iter()
                    .zip(&ib)
                    .map(|(&i, &j)| op.apply(a.data()[i], b.data()[j]))
                    .collect()
            };
            (
                Tensor::from_parts(out_shape, data),
                a.shape().to_vec(),
                b.shape().to_vec(),
            )
        };
        Ok(self.tape.push(out, &[self.id, other.id], move |ctx| {
            let a = ctx.inputs[0].data();
            let b = ctx.inputs[1].data();
            let mut ga = ctx.needs[0].then(|| vec![0.0; a.len()]);
            let mut gb = ctx.needs[1].then(|| vec![0.0; b.len()]);
            if a_shape == b_shape {
                for i in 0..ctx.grad.len() {
                    let (da, db) = op.grads(a[i], b[i]);
                    if let Some(ga) = &mut ga {
                        ga[i] += ctx.grad[i] * da;
                    }
                    if let Some(gb) = &mut gb {
                        gb[i] += ctx.grad[i] * db;
                    }
                }
            } else {
                let out_shape = ctx.out.shape();
                let ia = broadcast_index(&a_shape, out_shape);
                let ib = broadcast_index(&b_shape, out_shape);
                for (k, (&i, &j)) in ia.iter().zip(&ib).enumerate() {
                    let (da, db) = op.grads(a[i], b[j]);
                    if let Some(ga) = &mut ga {
                        ga[i] += ctx.grad[k] * da;
                    }
                    if let Some(gb) = &mut gb {
                        gb[j] += ctx.grad[k] * db;
                    }
                }
            }
            vec![ga, gb]
        }))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinOp::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinOp::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinOp::Mul)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinOp::Div)
    }

    // ---- linear algebra ---------------------------------------------------

    /// Batched matrix product `[.., m, k] · [.., k, n]` with broadcast batch
    /// dimensions.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, false)
    }

    /// Same as [`Var::matmul`] but every dot product is correctly rounded, so
    /// the forward value does not depend on the order of the inner dimension.
    pub fn matmul_exact(self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, true)
    }

    fn matmul_impl(self, other: Var<'t>, exact: bool) -> Result<Var<'t>> {
        let (out, plan) = {
            let a = self.value();
            let b = other.value();
            let plan = MatmulPlan::new(a.shape(), b.shape())?;
            let (m, k, n) = (plan.m, plan.k, plan.n);
            let mut data = vec![0.0; plan.batches() * m * n];
            for (bi, (&ao, &bo)) in plan.a_off.iter().zip(&plan.b_off).enumerate() {
                let out = &mut data[bi * m * n..(bi + 1) * m * n];
                let a = &a.data()[ao * m * k..(ao + 1) * m * k];
                let b = &b.data()[bo * k * n..(bo + 1) * k * n];
                if exact {
                    kernels::mm_exact(out, a, b, m, k, n);
                } else {
                    kernels::mm_acc(out, a, b, m, k, n);
                }
            }
            (Tensor::from_parts(plan.out_shape.clone(), data), plan)
        };
        Ok(self.tape.push(out, &[self.id, other.id], move |ctx| {
            let (m, k, n) = (plan.m, plan.k, plan.n);
            let a = ctx.inputs[0].data();
            let b = ctx.inputs[1].data();
            let mut ga = ctx.needs[0].then(|| vec![0.0; a.len()]);
            let mut gb = ctx.needs[1].then(|| vec![0.0; b.len()]);
            for (bi, (&ao, &bo)) in plan.a_off.iter().zip(&plan.b_off).enumerate() {
                let g = &ctx.grad[bi * m * n..(bi + 1) * m * n];
                if let Some(ga) = &mut ga {
                    let bb = &b[bo * k * n..(bo + 1) * k * n];
                    kernels::mm_acc_bt(&mut ga[ao * m * k..(ao + 1) * m * k], g, bb, m, k, n);
                }
                if let Some(gb) = &mut gb {
                    let ab = &a[ao * m * k..(ao + 1) * m * k];
                    kernels::mm_acc_at(&mut gb[bo * k * n..(bo + 1) * k * n], ab, g, m, k, n);
                }
            }
            vec![ga, gb]
        }))
    }

    /// `x[.., G·cin] → [.., G·cout]` where output group `g` only reads input
    /// group `g` through `weights[g]` (`[G, cin, cout]`).
    pub fn grouped_linear(self, weights: Var<'t>, groups: usize) -> Result<Var<'t>> {
        let (out, cin, cout) = {
            let x = self.value();
            let w = weights.value();
            let ws = w.shape();
            if ws.len() != 3 || ws[0] != groups || groups == 0 {
                return Err(Error::contract(
                    "grouped_linear",
                    format!("weights {ws:?} do not describe {groups} groups"),
                ));
            }
            let (cin, cout) = (ws[1], ws[2]);
            let xs = x.shape();
            let ch = *xs.last().unwrap_or(&0);
            if !ch.is_multiple_of(groups) {
                return Err(Error::contract(
                    "grouped_linear",
                    format!("{ch} channels not divisible into {groups} groups"),
                ));
            }
            if ch != groups * cin {
                return Err(Error::shape("grouped_linear", xs, ws));
            }
            let rows = x.numel() / ch;
            let mut data = vec![0.0; rows * groups * cout];
            let (xd, wd) = (x.data(), w.data());
            for r in 0..rows {
                for g in 0..groups {
                    let xin = &xd[r * ch + g * cin..r * ch + (g + 1) * cin];
                    let dst = &mut data[(r * groups + g) * cout..(r * groups + g + 1) * cout];
                    kernels::mm_acc(dst, xin, &wd[g * cin * cout..(g + 1) * cin * cout], 1, cin, cout);
                }
            }
            let mut shape = xs.to_vec();
            *shape.last_mut().unwrap() = groups * cout;
            (Tensor::from_parts(shape, data), cin, cout)
        };
        Ok(self.tape.push(out, &[self.id, weights.id], move |ctx| {
            let x = ctx.inputs[0].data();
            let w = ctx.inputs[1].data();
            let ch = groups * cin;
            let rows = x.len() / ch;
            let mut gx = ctx.needs[0].then(|| vec![0.0; x.len()]);
            let mut gw = ctx.needs[1].then(|| vec![0.0; w.len()]);
            for r in 0..rows {
                for g in 0..groups {
                    let go = &ctx.grad[(r * groups + g) * cout..(r * groups + g + 1) * cout];
                    let wg = &w[g * cin * cout..(g + 1) * cin * cout];
                    if let Some(gx) = &mut gx {
                        kernels::mm_acc_bt(&mut gx[r * ch + g * cin..r * ch + (g + 1) * cin], go, wg, 1, cin, cout);
                    }
                    if let Some(gw) = &mut gw {
                        let xin = &x[r * ch + g * cin..r * ch + (g + 1) * cin];
                        kernels::mm_acc_at(&mut gw[g * cin * cout..(g + 1) * cin * cout], xin, go, 1, cin, cout);
                    }
                }
            }
            vec![gx, gw]
        }))
    }

    // ---- normalisation ----------------------------------------------------

    /// Max-subtracted softmax over the last axis.
    pub fn softmax_last(self) -> Var<'t> {
        let out = {
            let x = self.value();
            let n = *x.shape().last().unwrap_or(&1);
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(n.max(1)) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                row.iter_mut().for_each(|v| *v /= sum);
            }
            Tensor::from_parts(x.shape().to_vec(), data)
        };
        self.tape.push(out, &[self.id], |ctx| {
            let y = ctx.out.data();
            let n = *ctx.out.shape().last().unwrap_or(&1);
            let mut gx = vec![0.0; y.len()];
            for ((gr, yr), dst) in ctx.grad.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                for ((d, g), y) in dst.iter_mut().zip(gr).zip(yr) {
                    *d = y * (g - dot);
                }
            }
            vec![Some(gx)]
        })
    }

    /// Layer normalisation over the last axis, `ε = 1e-5`.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        self.layer_norm_impl(gain, bias, false)
    }

    /// [`Var::layer_norm`] with order-independent row statistics.
    pub fn layer_norm_exact(self, gain: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        self.layer_norm_impl(gain, bias, true)
    }

    fn layer_norm_impl(self, gain: Var<'t>, bias: Var<'t>, exact: bool) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            let g = gain.value();
            let b = bias.value();
            let n = *x.shape().last().unwrap_or(&0);
            if g.shape() != [n] || b.shape() != [n] {
                return Err(Error::shape("layer_norm", x.shape(), g.shape()));
            }
            let mut data = vec![0.0; x.numel()];
            for (row, dst) in x.data().chunks(n).zip(data.chunks_mut(n)) {
                let (mean, inv_std) = row_stats(row, exact);
                for i in 0..n {
                    dst[i] = (row[i] - mean) * inv_std * g.data()[i] + b.data()[i];
                }
            }
            Tensor::from_parts(x.shape().to_vec(), data)
        };
        Ok(self.tape.push(out, &[self.id, gain.id, bias.id], move |ctx| {
            let x = ctx.inputs[0].data();
            let gain = ctx.inputs[1].data();
            let n = gain.len();
            let mut gx = vec![0.0; x.len()];
            let mut gg = vec![0.0; n];
            let mut gb = vec![0.0; n];
            let mut dxhat = vec![0.0; n];
            for ((row, go), dst) in x.chunks(n).zip(ctx.grad.chunks(n)).zip(gx.chunks_mut(n)) {
                let (mean, inv_std) = row_stats(row, exact);
                let mut mean_d = 0.0;
                let mut mean_dx = 0.0;
                for i in 0..n {
                    let xhat = (row[i] - mean) * inv_std;
                    dxhat[i] = go[i] * gain[i];
                    gg[i] += go[i] * xhat;
                    gb[i] += go[i];
                    mean_d += dxhat[i];
                    mean_dx += dxhat[i] * xhat;
                }
                mean_d /= n as f64;
                mean_dx /= n as f64;
                for i in 0..n {
                    let xhat = (row[i] - mean) * inv_std;
                    dst[i] = inv_std * (dxhat[i] - mean_d - xhat * mean_dx);
                }
            }
            vec![Some(gx), Some(gg), Some(gb)]
        }))
    }

    // ---- resampling -------------------------------------------------------

    /// Bilinear resize of `[.., h, w, c]` to `[.., out_h, out_w, c]` with
    /// half-pixel centres (align-corners = false). Only upsampling.
    pub fn bilinear_upsample(self, out_h: usize, out_w: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() < 3 {
            return Err(Error::contract("bilinear_upsample", format!("need [.., h, w, c], got {shape:?}")));
        }
        let r = shape.len();
        let (h, w, c) = (shape[r - 3], shape[r - 2], shape[r - 1]);
        if out_h < h || out_w < w || h == 0 || w == 0 {
            return Err(Error::contract(
                "bilinear_upsample",
                format!("target {out_h}x{out_w} smaller than source {h}x{w}"),
            ));
        }
        let batch: usize = shape[..r - 3].iter().product();
        let ty = kernels::bilinear_taps(h, out_h);
        let tx = kernels::bilinear_taps(w, out_w);
        let out = {
            let x = self.value();
            let xd = x.data();
            let mut data = vec![0.0; batch * out_h * out_w * c];
            for b in 0..batch {
                let src = &xd[b * h * w * c..(b + 1) * h * w * c];
                let dst = &mut data[b * out_h * out_w * c..(b + 1) * out_h * out_w * c];
                for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                        let o = (oy * out_w + ox) * c;
                        for ch in 0..c {
                            let p00 = src[(y0 * w + x0) * c + ch];
                            let p01 = src[(y0 * w + x1) * c + ch];
                            let p10 = src[(y1 * w + x0) * c + ch];
                            let p11 = src[(y1 * w + x1) * c + ch];
                            let top = p00 + wx * (p01 - p00);
                            let bottom = p10 + wx * (p11 - p10);
                            dst[o + ch] = top + wy * (bottom - top);
                        }
                    }
                }
            }
            let mut out_shape = shape.clone();
            out_shape[r - 3] = out_h;
            out_shape[r - 2] = out_w;
            Tensor::from_parts(out_shape, data)
        };
        Ok(self.tape.push(out, &[self.id], move |ctx| {
            let mut gx = vec![0.0; batch * h * w * c];
            for b in 0..batch {
                let go = &ctx.grad[b * out_h * out_w * c..(b + 1) * out_h * out_w * c];
                let dst = &mut gx[b * h * w * c..(b + 1) * h * w * c];
                for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                        let o = (oy * out_w + ox) * c;
                        for ch in 0..c {
                            let g = go[o + ch];
                            dst[(y0 * w + x0) * c + ch] += g * (1.0 - wy) * (1.0 - wx);
                            dst[(y0 * w + x1) * c + ch] += g * (1.0 - wy) * wx;
                            dst[(y1 * w + x0) * c + ch] += g * wy * (1.0 - wx);
                            dst[(y1 * w + x1) * c + ch] += g * wy * wx;
                        }
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    // ---- layout -----------------------------------------------------------

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().reshape(shape)?;
        Ok(self.tape.push(out, &[self.id], |ctx| vec![Some(ctx.grad.to_vec())]))
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'t>> {
        let out = self.value().permute(axes)?;
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Ok(self.tape.push(out, &[self.id], move |ctx| {
            let (_, g) = permute_data(ctx.out.shape(), ctx.grad, &inverse);
            vec![Some(g)]
        }))
    }

    /// Swap the last two axes.
    pub fn transpose_last(self) -> Result<Var<'t>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(Error::contract("transpose", "rank < 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(&axes)
    }

    /// Contiguous slice `start..start+len` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let indices: Vec<usize> = (start..start + len).collect();
        self.index_select(axis, &indices)
    }

    /// Gather `indices` along `axis`; repeated indices accumulate gradient.
    pub fn index_select(self, axis: usize, indices: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::contract("index_select", format!("axis {axis} for rank {}", shape.len())));
        }
        let dim = shape[axis];
        if let Some(&bad) = indices.iter().find(|&&i| i >= dim) {
            return Err(Error::contract("index_select", format!("index {bad} out of range {dim}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let idx = indices.to_vec();
        let out = {
            let x = self.value();
            let xd = x.data();
            let mut data = Vec::with_capacity(outer * idx.len() * inner);
            for o in 0..outer {
                for &i in &idx {
                    let s = (o * dim + i) * inner;
                    data.extend_from_slice(&xd[s..s + inner]);
                }
            }
            let mut out_shape = shape.clone();
            out_shape[axis] = idx.len();
            Tensor::from_parts(out_shape, data)
        };
        Ok(self.tape.push(out, &[self.id], move |ctx| {
            let mut g = vec![0.0; outer * dim * inner];
            let mut src = 0;
            for o in 0..outer {
                for &i in &idx {
                    let d = (o * dim + i) * inner;
                    for (a, b) in g[d..d + inner].iter_mut().zip(&ctx.grad[src..src + inner]) {
                        *a += b;
                    }
                    src += inner;
                }
            }
            vec![Some(g)]
        }))
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum_all(self) -> Var<'t> {
        let out = Tensor::scalar(self.value().data().iter().sum());
        self.tape.push(out, &[self.id], |ctx| vec![Some(vec![ctx.grad[0]; ctx.inputs[0].numel()])])
    }

    pub fn mean_all(self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Sum over the last axis, dropping it.
    pub fn sum_last(self) -> Var<'t> {
        let (out, n) = {
            let x = self.value();
            let shape = x.shape();
            let n = *shape.last().unwrap_or(&1);
            let data = x.data().chunks(n.max(1)).map(|r| r.iter().sum()).collect();
            (Tensor::from_parts(shape[..shape.len().saturating_sub(1)].to_vec(), data), n)
        };
        self.tape.push(out, &[self.id], move |ctx| {
            let g = ctx.grad.iter().flat_map(|&g| std::iter::repeat_n(g, n)).collect();
            vec![Some(g)]
        })
    }
}

fn row_stats(row: &[f64], exact: bool) -> (f64, f64) {
    const EPS: f64 = 1e-5;
    let n = row.len() as f64;
    let (mean, var) = if exact {
        let mut acc = ExactSum::new();
        row.iter().for_each(|&v| acc.add(v));
        let mean = acc.value() / n;
        acc.clear();
        row.iter().for_each(|&v| acc.add((v - mean) * (v - mean)));
        (mean, acc.value() / n)
    } else {
        let mean = row.iter().sum::<f64>() / n;
        (mean, row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n)
    };
    (mean, 1.0 / (var + EPS).sqrt())
}

struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
    a_off: Vec<usize>,
    b_off: Vec<usize>,
}

impl MatmulPlan {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::shape("matmul", a, b));
        }
        let (ra, rb) = (a.len(), b.len());
        let (m, k) = (a[ra - 2], a[ra - 1]);
        let (k2, n) = (b[rb - 2], b[rb - 1]);
        if k != k2 {
            return Err(Error::shape("matmul", a, b));
        }
        let batch =
            broadcast_shapes(&a[..ra - 2], &b[..rb - 2]).ok_or_else(|| Error::shape("matmul", a, b))?;
        let a_off = broadcast_index(&a[..ra - 2], &batch);
        let b_off = broadcast_index(&b[..rb - 2], &batch);
        let mut out_shape = batch;
        out_shape.extend([m, n]);
        Ok(MatmulPlan {
            m,
            k,
            n,
            out_shape,
            a_off,
            b_off,
        })
    }

    fn batches(&self) -> usize {
        numel(&self.out_shape[..self.out_shape.len() - 2])
    }
}

/// Run `f` as a free function of plain tensors (used by tests and checks).
pub fn eval<F>(inputs: &[Tensor], f: F) -> Result<Tensor>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::inference();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    Ok(f(&tape, &vars)?.to_tensor())
}
