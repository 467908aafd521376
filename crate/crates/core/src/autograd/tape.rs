//! Define-by-run reverse-mode differentiation.
//!
//! Every operation evaluates eagerly and appends a node to the [`Tape`]. Nodes
//! are stored in creation order, which is a topological order, so the
//! backward pass is a single reverse sweep. Gradient contributions are added
//! into their target in that fixed order, which keeps results bit-stable.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Zero padding mode for [`Tape::conv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Padding {
    /// Output keeps the input's spatial size; kernel must be odd.
    Same,
    /// No padding; output shrinks by `kernel - 1`.
    Valid,
}

impl Padding {
    fn amount(self, kernel: usize) -> usize {
        match self {
            Padding::Same => (kernel - 1) / 2,
            Padding::Valid => 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Constant,
    MatMul,
    Conv2d,
    Add,
    AddBias,
    Relu,
    LogSoftmax,
    Mean,
    Sum,
    Mul,
    Scale,
    Reshape,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Conv2d(Var, Var, Padding),
    Add(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    LogSoftmax(Var),
    Mean(Var),
    Sum(Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Reshape(Var),
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// A recording of one forward evaluation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`]: one optional gradient per node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient with respect to `v`; zeros when `v` did not influence the output.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn add_into(dst: &mut Option<Tensor>, g: Tensor) {
    match dst {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        None => *dst = Some(g),
    }
}

fn matmul_raw(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(x: &[usize], wt: &[usize], padding: Padding) -> Result<Self> {
        if x.len() != 4 || wt.len() != 4 || x[1] != wt[1] || wt[2] != wt[3] {
            return Err(Error::shape("conv2d", x, wt));
        }
        let k = wt[2];
        if padding == Padding::Same && k.is_multiple_of(2) {
            return Err(Error::invalid("conv2d: same padding requires an odd kernel"));
        }
        let pad = padding.amount(k);
        if x[2] + 2 * pad < k || x[3] + 2 * pad < k {
            return Err(Error::shape("conv2d", x, wt));
        }
        Ok(ConvGeom {
            batch: x[0],
            cin: x[1],
            h: x[2],
            w: x[3],
            cout: wt[0],
            k,
            pad,
            oh: x[2] + 2 * pad - k + 1,
            ow: x[3] + 2 * pad - k + 1,
        })
    }

    /// Calls `f(x_index, w_index, out_index)` for every multiply-accumulate.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let ConvGeom { batch, cin, h, w, cout, k, pad, oh, ow } = *self;
        for b in 0..batch {
            for o in 0..cout {
                for c in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let wi = ((o * cin + c) * k + ky) * k + kx;
                            for y in 0..oh {
                                let iy = y + ky;
                                if iy < pad || iy - pad >= h {
                                    continue;
                                }
                                let iy = iy - pad;
                                for x in 0..ow {
                                    let ix = x + kx;
                                    if ix < pad || ix - pad >= w {
                                        continue;
                                    }
                                    let xi = ((b * cin + c) * h + iy) * w + ix - pad;
                                    let oi = ((b * cout + o) * oh + y) * ow + x;
                                    f(xi, wi, oi);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn kind(&self, v: Var) -> OpKind {
        match self.nodes[v.0].op {
            Op::Leaf => OpKind::Leaf,
            Op::Constant => OpKind::Constant,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Conv2d(..) => OpKind::Conv2d,
            Op::Add(..) => OpKind::Add,
            Op::AddBias(..) => OpKind::AddBias,
            Op::Relu(_) => OpKind::Relu,
            Op::LogSoftmax(_) => OpKind::LogSoftmax,
            Op::Mean(_) => OpKind::Mean,
            Op::Sum(_) => OpKind::Sum,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Reshape(_) => OpKind::Reshape,
        }
    }

    /// A trainable input; gradients flow to it.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    /// A fixed input; no gradient is tracked.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Constant, t, false)
    }

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), Tensor::new(vec![m, n], out)?, rg))
    }

    /// Stride-1 convolution. `x: [batch, cin, h, w]`, `w: [cout, cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, padding: Padding) -> Result<Var> {
        let g = ConvGeom::new(self.value(x).shape(), self.value(w).shape(), padding)?;
        let mut out = vec![0.0f32; g.batch * g.cout * g.oh * g.ow];
        {
            let (xd, wd) = (self.value(x).data(), self.value(w).data());
            g.for_each(|xi, wi, oi| out[oi] += xd[xi] * wd[wi]);
        }
        let rg = self.rg(x) || self.rg(w);
        let t = Tensor::new(vec![g.batch, g.cout, g.oh, g.ow], out)?;
        Ok(self.push(Op::Conv2d(x, w, padding), t, rg))
    }

    /// Elementwise sum of equally shaped tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), t, rg))
    }

    /// Adds `bias: [c]` along axis 1 of `x: [batch, c, ...]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tx.shape().len() < 2 || tb.shape().len() != 1 || tx.shape()[1] != tb.shape()[0] {
            return Err(Error::shape("add_bias", tx.shape(), tb.shape()));
        }
        let c = tb.shape()[0];
        let inner: usize = tx.shape()[2..].iter().product();
        let mut data = tx.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += tb.data()[(i / inner) % c];
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Op::AddBias(x, bias), t, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(Op::Relu(x), t, rg)
    }

    /// Row-wise log-softmax of a `[rows, classes]` tensor.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape().len() != 2 {
            return Err(Error::shape("log_softmax", tx.shape(), &[0, 0]));
        }
        let k = tx.shape()[1];
        let mut data = Vec::with_capacity(tx.len());
        for row in tx.data().chunks(k) {
            let lse = log_sum_exp(row);
            data.extend(row.iter().map(|&v| v - lse));
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(Op::LogSoftmax(x), t, rg))
    }

    /// Mean over all elements.
    pub fn mean(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let s: f32 = tx.data().iter().sum();
        let t = Tensor::scalar(s / tx.len() as f32);
        let rg = self.rg(x);
        self.push(Op::Mean(x), t, rg)
    }

    /// Sum over all elements.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f32 = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Op::Sum(x), Tensor::scalar(s), rg)
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), t, rg))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * c).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(Op::Scale(x, c), t, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(Op::Reshape(x), t, rg))
    }

    /// Reverse sweep from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if !out.is_scalar() {
            return Err(Error::NonScalarOutput(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::full(out.shape(), 1.0));

        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            match node.op {
                Op::Leaf | Op::Constant => {
                    grads[id] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(a), self.value(b));
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    if self.rg(a) {
                        let mut ga = vec![0.0f32; m * k];
                        for i in 0..m {
                            let grow = &g.data()[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &tb.data()[p * n..(p + 1) * n];
                                ga[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                            }
                        }
                        add_into(&mut grads[a.0], Tensor::new(vec![m, k], ga)?);
                    }
                    if self.rg(b) {
                        let mut gb = vec![0.0f32; k * n];
                        for i in 0..m {
                            let grow = &g.data()[i * n..(i + 1) * n];
                            for p in 0..k {
                                let aip = ta.data()[i * k + p];
                                if aip == 0.0 {
                                    continue;
                                }
                                for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *o += aip * gv;
                                }
                            }
                        }
                        add_into(&mut grads[b.0], Tensor::new(vec![k, n], gb)?);
                    }
                }
                Op::Conv2d(x, w, padding) => {
                    let (tx, tw) = (self.value(x), self.value(w));
                    let geom = ConvGeom::new(tx.shape(), tw.shape(), padding)?;
                    if self.rg(x) {
                        let mut gx = vec![0.0f32; tx.len()];
                        geom.for_each(|xi, wi, oi| gx[xi] += g.data()[oi] * tw.data()[wi]);
                        add_into(&mut grads[x.0], Tensor::new(tx.shape().to_vec(), gx)?);
                    }
                    if self.rg(w) {
                        let mut gw = vec![0.0f32; tw.len()];
                        geom.for_each(|xi, wi, oi| gw[wi] += g.data()[oi] * tx.data()[xi]);
                        add_into(&mut grads[w.0], Tensor::new(tw.shape().to_vec(), gw)?);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(a) {
                        add_into(&mut grads[a.0], g.clone());
                    }
                    if self.rg(b) {
                        add_into(&mut grads[b.0], g);
                    }
                }
                Op::AddBias(x, bias) => {
                    if self.rg(bias) {
                        let c = self.value(bias).len();
                        let inner: usize = g.shape()[2..].iter().product();
                        let mut gb = vec![0.0f32; c];
                        for (i, v) in g.data().iter().enumerate() {
                            gb[(i / inner) % c] += v;
                        }
                        add_into(&mut grads[bias.0], Tensor::vector(gb));
                    }
                    if self.rg(x) {
                        add_into(&mut grads[x.0], g);
                    }
                }
                Op::Relu(x) => {
                    if self.rg(x) {
                        let tx = self.value(x);
                        let data = g
                            .data()
                            .iter()
                            .zip(tx.data())
                            .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                            .collect();
                        add_into(&mut grads[x.0], Tensor::new(g.shape().to_vec(), data)?);
                    }
                }
                Op::LogSoftmax(x) => {
                    if self.rg(x) {
                        let y = &node.value;
                        let k = y.shape()[1];
                        let mut data = Vec::with_capacity(y.len());
                        for (grow, yrow) in g.data().chunks(k).zip(y.data().chunks(k)) {
                            let s: f32 = grow.iter().sum();
                            data.extend(grow.iter().zip(yrow).map(|(&gv, &yv)| gv - yv.exp() * s));
                        }
                        add_into(&mut grads[x.0], Tensor::new(y.shape().to_vec(), data)?);
                    }
                }
                Op::Mean(x) => {
                    if self.rg(x) {
                        let tx = self.value(x);
                        let v = g.data()[0] / tx.len() as f32;
                        add_into(&mut grads[x.0], Tensor::full(tx.shape(), v));
                    }
                }
                Op::Sum(x) => {
                    if self.rg(x) {
                        add_into(&mut grads[x.0], Tensor::full(self.value(x).shape(), g.data()[0]));
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(a), self.value(b));
                    if self.rg(a) {
                        let data = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                        add_into(&mut grads[a.0], Tensor::new(g.shape().to_vec(), data)?);
                    }
                    if self.rg(b) {
                        let data = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                        add_into(&mut grads[b.0], Tensor::new(g.shape().to_vec(), data)?);
                    }
                }
                Op::Scale(x, c) => {
                    if self.rg(x) {
                        let data = g.data().iter().map(|v| v * c).collect();
                        add_into(&mut grads[x.0], Tensor::new(g.shape().to_vec(), data)?);
                    }
                }
                Op::Reshape(x) => {
                    if self.rg(x) {
                        let shape = self.value(x).shape().to_vec();
                        add_into(&mut grads[x.0], g.reshaped(&shape)?);
                    }
                }
            }
        }

        // Only leaves keep their gradient; intermediates were consumed above.
        for (id, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[id] = None;
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Numerically stable `ln(sum(exp(row)))`.
pub fn log_sum_exp(row: &[f32]) -> f32 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !max.is_finite() {
        return max;
    }
    let s: f32 = row.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}
