//! Dense `f64` tensors and a tape-based reverse-mode autodiff graph.
//!
//! A [`Tensor`] is a plain value container that owns its optional gradient
//! slot and carries no graph attachment, so it can move freely between
//! threads. Differentiation happens on a [`Graph`]: tensors enter it as
//! leaves, every operation appends one node, and [`Graph::backward`] walks
//! the tape once in reverse append order. Graphs are meant to be rebuilt
//! for every forward pass.
//!
//! There is no broadcasting. Every shape coercion (bias addition, row
//! scaling, reshapes) is its own explicit operation.

use crate::error::{Error, Result};

/// Row-major n-dimensional array of `f64` with an optional gradient slot.
///
/// Scalars use an empty `dims` list.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::shape(
                "tensor",
                format!("zero-sized dimension in {dims:?}"),
            ));
        }
        let expected: usize = dims.iter().product();
        if expected != values.len() {
            return Err(Error::shape(
                "tensor",
                format!("dims {dims:?} need {expected} values, got {}", values.len()),
            ));
        }
        Ok(Tensor {
            dims,
            values,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            values: vec![0.0; n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(dims);
        t.values.fill(value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            dims: Vec::new(),
            values: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    /// Rank-1 tensor over `values`.
    pub fn from_vec(values: Vec<f64>) -> Self {
        Tensor {
            dims: vec![values.len()],
            values,
            grad: None,
            requires_grad: false,
        }
    }

    /// Marks the tensor as trainable.
    pub fn trainable(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.values.len(), 1);
        self.values[0]
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<f64>>) {
        if let Some(g) = &grad {
            assert_eq!(g.len(), self.values.len(), "gradient length mismatch");
        }
        self.grad = grad;
    }

    /// Adds `g` into the gradient slot, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        assert_eq!(g.len(), self.values.len(), "gradient length mismatch");
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(mut self, dims: Vec<usize>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.values.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {dims:?} changes element count", self.dims),
            ));
        }
        self.dims = dims;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise binary operation selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sqrt(Var),
    Sum(Var),
    Reshape(Var),
    Transpose(Var),
    Row(Var, usize),
    Column(Var, usize),
    ScaleRows(Var, Var),
    Stack(Vec<Var>),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    Conv2d(Var, Var),
    MaxPool { input: Var, argmax: Vec<usize> },
    Softmax { input: Var, temperature: f64 },
    LogSoftmax { input: Var, temperature: f64 },
    Pick { input: Var, labels: Vec<usize> },
    KlDiv(Var, Var),
    Huber(Var, Var),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    dims: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Append-only tape of operations.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
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

    /// Adds a leaf; it is differentiable iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.push_leaf(tensor.dims.clone(), tensor.values.clone(), tensor.requires_grad)
    }

    /// Adds a leaf that never receives gradient.
    pub fn constant(&mut self, tensor: &Tensor) -> Var {
        self.push_leaf(tensor.dims.clone(), tensor.values.clone(), false)
    }

    /// Copies the value of `v` into a fresh non-differentiable leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let node = &self.nodes[v.0];
        let (dims, value) = (node.dims.clone(), node.value.clone());
        self.push_leaf(dims, value, false)
    }

    fn push_leaf(&mut self, dims: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            dims,
            value,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, dims: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Var {
        debug_assert_eq!(dims.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            op,
            dims,
            value,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].dims
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        Tensor {
            dims: node.dims.clone(),
            values: node.value.clone(),
            grad: None,
            requires_grad: false,
        }
    }

    /// Accumulated gradient of a differentiable leaf, once `backward` has run.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn same_dims(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.dims(a), self.dims(b)),
            ));
        }
        Ok(())
    }

    fn rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.dims(v) {
            [r, c] => Ok((r, c)),
            ref d => Err(Error::shape(op, format!("expected rank 2, got {d:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rank2("matmul", a)?;
        let (k2, n) = self.rank2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.dims(a), self.dims(b)),
            ));
        }
        let out = matmul_raw(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), vec![m, n], out, rg))
    }

    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Var) -> Result<Var> {
        match kind {
            Elementwise::Add => self.add(a, b),
            Elementwise::Sub => self.sub(a, b),
            Elementwise::Mul => self.mul(a, b),
        }
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.same_dims(name, a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let dims = self.dims(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(op, dims, out, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * s).collect();
        let dims = self.dims(a).to_vec();
        let rg = self.rg(a);
        self.push(Op::Scale(a, s), dims, out, rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .iter()
            .map(|&x| if x > 0.0 { x } else { 0.0 })
            .collect();
        let dims = self.dims(a).to_vec();
        let rg = self.rg(a);
        self.push(Op::Relu(a), dims, out, rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|x| x.sqrt()).collect();
        let dims = self.dims(a).to_vec();
        let rg = self.rg(a);
        self.push(Op::Sqrt(a), dims, out, rg)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(Op::Sum(a), Vec::new(), vec![s], rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Inner product of two same-shaped nodes.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        Ok(self.sum(p))
    }

    pub fn reshape(&mut self, a: Var, dims: Vec<usize>) -> Result<Var> {
        let n: usize = dims.iter().product();
        if n != self.value(a).len() {
            return Err(Error::shape("reshape", format!("{:?} -> {dims:?}", self.dims(a))));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(Op::Reshape(a), dims, out, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.rank2("transpose", a)?;
        let out = transpose_raw(self.value(a), r, c);
        let rg = self.rg(a);
        Ok(self.push(Op::Transpose(a), vec![c, r], out, rg))
    }

    /// Row `i` of a rank-2 node, as a rank-1 node.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let (r, c) = self.rank2("row", a)?;
        if i >= r {
            return Err(Error::shape("row", format!("row {i} of {r}")));
        }
        let out = self.value(a)[i * c..(i + 1) * c].to_vec();
        let rg = self.rg(a);
        Ok(self.push(Op::Row(a, i), vec![c], out, rg))
    }

    /// Column `j` of a rank-2 node, as a rank-1 node.
    pub fn column(&mut self, a: Var, j: usize) -> Result<Var> {
        let (r, c) = self.rank2("column", a)?;
        if j >= c {
            return Err(Error::shape("column", format!("column {j} of {c}")));
        }
        let v = self.value(a);
        let out = (0..r).map(|i| v[i * c + j]).collect();
        let rg = self.rg(a);
        Ok(self.push(Op::Column(a, j), vec![r], out, rg))
    }

    /// Multiplies row `i` of `x[N×K]` by `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (r, c) = self.rank2("scale_rows", x)?;
        if self.dims(s) != [r] {
            return Err(Error::shape(
                "scale_rows",
                format!("{:?} by {:?}", self.dims(x), self.dims(s)),
            ));
        }
        let (xv, sv) = (self.value(x), self.value(s));
        let out = (0..r * c).map(|idx| xv[idx] * sv[idx / c]).collect();
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(Op::ScaleRows(x, s), vec![r, c], out, rg))
    }

    /// Stacks equally shaped nodes along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("stack", "no inputs"))?;
        let inner = self.dims(first).to_vec();
        let mut out = Vec::with_capacity(parts.len() * self.value(first).len());
        for &p in parts {
            if self.dims(p) != inner.as_slice() {
                return Err(Error::shape(
                    "stack",
                    format!("{:?} vs {:?}", self.dims(p), inner),
                ));
            }
            out.extend_from_slice(self.value(p));
        }
        let mut dims = vec![parts.len()];
        dims.extend(inner);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Op::Stack(parts.to_vec()), dims, out, rg))
    }

    /// `x[N×F] + b[F]` applied to every row.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (r, c) = self.rank2("add_row_bias", x)?;
        if self.dims(b) != [c] {
            return Err(Error::shape(
                "add_row_bias",
                format!("{:?} + {:?}", self.dims(x), self.dims(b)),
            ));
        }
        let (xv, bv) = (self.value(x), self.value(b));
        let out = (0..r * c).map(|idx| xv[idx] + bv[idx % c]).collect();
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(Op::AddRowBias(x, b), vec![r, c], out, rg))
    }

    /// `x[N×C×H×W] + b[C]` applied per channel.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let [n, c, h, w] = rank4("add_channel_bias", self.dims(x))?;
        if self.dims(b) != [c] {
            return Err(Error::shape(
                "add_channel_bias",
                format!("{:?} + {:?}", self.dims(x), self.dims(b)),
            ));
        }
        let plane = h * w;
        let (xv, bv) = (self.value(x), self.value(b));
        let out = (0..n * c * plane)
            .map(|idx| xv[idx] + bv[(idx / plane) % c])
            .collect();
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(Op::AddChannelBias(x, b), vec![n, c, h, w], out, rg))
    }

    /// 3×3 convolution, stride 1, zero padding 1.
    ///
    /// `x` is `[N, Cin, H, W]`, `w` is `[Cout, Cin, 3, 3]`; no bias.
    pub fn conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let [n, cin, h, wd] = rank4("conv2d", self.dims(x))?;
        let [cout, cin2, kh, kw] = rank4("conv2d", self.dims(w))?;
        if cin != cin2 || kh != 3 || kw != 3 {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} with kernel {:?}", self.dims(x), self.dims(w)),
            ));
        }
        let geo = ConvGeometry {
            n,
            cin,
            cout,
            h,
            w: wd,
        };
        let out = conv2d_forward(self.value(x), self.value(w), geo);
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Op::Conv2d(x, w), vec![n, cout, h, wd], out, rg))
    }

    /// Max over each `H×W` plane of a `[C, H, W]` node, giving `[C]`.
    ///
    /// Gradient goes to the first maximal entry in row-major scan order.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        match *self.dims(x) {
            [c, h, w] => Ok(self.max_pool_planes(x, c, h * w, vec![c])),
            ref d => Err(Error::shape(
                "global_max_pool",
                format!("expected [C, H, W], got {d:?}"),
            )),
        }
    }

    /// Per-example global max-pool of `[N, C, H, W]`, giving `[N, C]`.
    pub fn global_max_pool_batch(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = rank4("global_max_pool_batch", self.dims(x))?;
        Ok(self.max_pool_planes(x, n * c, h * w, vec![n, c]))
    }

    fn max_pool_planes(&mut self, x: Var, planes: usize, size: usize, dims: Vec<usize>) -> Var {
        let xv = self.value(x);
        let mut out = Vec::with_capacity(planes);
        let mut argmax = Vec::with_capacity(planes);
        for p in 0..planes {
            let base = p * size;
            let mut best = base;
            for idx in base + 1..base + size {
                if xv[idx] > xv[best] {
                    best = idx;
                }
            }
            out.push(xv[best]);
            argmax.push(best);
        }
        let rg = self.rg(x);
        self.push(Op::MaxPool { input: x, argmax }, dims, out, rg)
    }

    /// Temperature softmax over the last axis of a rank-1 or rank-2 node.
    pub fn softmax_t(&mut self, x: Var, temperature: f64) -> Result<Var> {
        let (rows, k) = self.row_layout("softmax_t", x, temperature)?;
        let xv = self.value(x);
        let mut out = vec![0.0; rows * k];
        for r in 0..rows {
            softmax_row(&xv[r * k..(r + 1) * k], temperature, &mut out[r * k..(r + 1) * k]);
        }
        let dims = self.dims(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(
            Op::Softmax {
                input: x,
                temperature,
            },
            dims,
            out,
            rg,
        ))
    }

    /// Log of [`Graph::softmax_t`], computed directly for stability.
    pub fn log_softmax_t(&mut self, x: Var, temperature: f64) -> Result<Var> {
        let (rows, k) = self.row_layout("log_softmax_t", x, temperature)?;
        let xv = self.value(x);
        let mut out = vec![0.0; rows * k];
        for r in 0..rows {
            let row = &xv[r * k..(r + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row
                .iter()
                .map(|z| ((z - max) / temperature).exp())
                .sum::<f64>()
                .ln();
            for (o, z) in out[r * k..(r + 1) * k].iter_mut().zip(row) {
                *o = (z - max) / temperature - lse;
            }
        }
        let dims = self.dims(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(
            Op::LogSoftmax {
                input: x,
                temperature,
            },
            dims,
            out,
            rg,
        ))
    }

    fn row_layout(&self, op: &'static str, x: Var, temperature: f64) -> Result<(usize, usize)> {
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::Param(format!(
                "{op}: temperature must be positive, got {temperature}"
            )));
        }
        match *self.dims(x) {
            [k] => Ok((1, k)),
            [r, k] => Ok((r, k)),
            ref d => Err(Error::shape(op, format!("expected rank 1 or 2, got {d:?}"))),
        }
    }

    /// Gathers `x[n, labels[n]]` into a rank-1 node.
    pub fn pick(&mut self, x: Var, labels: &[usize]) -> Result<Var> {
        let (r, c) = self.rank2("pick", x)?;
        if labels.len() != r {
            return Err(Error::shape(
                "pick",
                format!("{r} rows but {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Data(format!("label {bad} out of range for {c} classes")));
        }
        let xv = self.value(x);
        let out = labels.iter().enumerate().map(|(i, &l)| xv[i * c + l]).collect();
        let rg = self.rg(x);
        Ok(self.push(
            Op::Pick {
                input: x,
                labels: labels.to_vec(),
            },
            vec![r],
            out,
            rg,
        ))
    }

    /// `Σ p·(ln p − log_q)` over all elements; zero-probability entries
    /// contribute nothing.
    pub fn kl_div(&mut self, p: Var, log_q: Var) -> Result<Var> {
        self.same_dims("kl_div", p, log_q)?;
        let s = self
            .value(p)
            .iter()
            .zip(self.value(log_q))
            .map(|(&pi, &lq)| if pi > 0.0 { pi * (pi.ln() - lq) } else { 0.0 })
            .sum();
        let rg = self.rg(p) || self.rg(log_q);
        Ok(self.push(Op::KlDiv(p, log_q), Vec::new(), vec![s], rg))
    }

    /// Huber penalty between two scalars, unit threshold.
    pub fn huber(&mut self, x: Var, y: Var) -> Result<Var> {
        if self.value(x).len() != 1 || self.value(y).len() != 1 {
            return Err(Error::shape(
                "huber",
                format!("{:?} vs {:?}", self.dims(x), self.dims(y)),
            ));
        }
        let v = huber(self.scalar(x), self.scalar(y));
        let rg = self.rg(x) || self.rg(y);
        Ok(self.push(Op::Huber(x, y), Vec::new(), vec![v], rg))
    }

    /// Back-propagates from a scalar node into every differentiable leaf.
    ///
    /// Leaf gradients accumulate across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.dims(loss)),
            ));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let nodes = &self.nodes;
            let mut send = |v: Var, contrib: Vec<f64>| {
                if nodes[v.0].requires_grad {
                    add_into(&mut adj[v.0], contrib);
                }
            };
            let val = |v: Var| nodes[v.0].value.as_slice();
            match &node.op {
                Op::Leaf => leaf_grads.push((idx, g)),
                Op::MatMul(a, b) => {
                    let (m, k) = (nodes[a.0].dims[0], nodes[a.0].dims[1]);
                    let n = nodes[b.0].dims[1];
                    if nodes[a.0].requires_grad {
                        let bt = transpose_raw(val(*b), k, n);
                        send(*a, matmul_raw(&g, &bt, m, n, k));
                    }
                    if nodes[b.0].requires_grad {
                        let at = transpose_raw(val(*a), m, k);
                        send(*b, matmul_raw(&at, &g, k, m, n));
                    }
                }
                Op::Add(a, b) => {
                    send(*b, g.clone());
                    send(*a, g);
                }
                Op::Sub(a, b) => {
                    send(*b, g.iter().map(|x| -x).collect());
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    send(*a, zip_map(&g, val(*b), |gi, bi| gi * bi));
                    send(*b, zip_map(&g, val(*a), |gi, ai| gi * ai));
                }
                Op::Div(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    send(*a, zip_map(&g, bv, |gi, bi| gi / bi));
                    let db = (0..g.len()).map(|i| -g[i] * av[i] / (bv[i] * bv[i])).collect();
                    send(*b, db);
                }
                Op::Scale(a, s) => send(*a, g.iter().map(|x| x * s).collect()),
                Op::Relu(a) => {
                    send(*a, zip_map(&g, val(*a), |gi, x| if x > 0.0 { gi } else { 0.0 }));
                }
                Op::Sqrt(a) => send(*a, zip_map(&g, &node.value, |gi, y| 0.5 * gi / y)),
                Op::Sum(a) => send(*a, vec![g[0]; val(*a).len()]),
                Op::Reshape(a) => send(*a, g),
                Op::Transpose(a) => {
                    let (r, c) = (nodes[a.0].dims[0], nodes[a.0].dims[1]);
                    send(*a, transpose_raw(&g, c, r));
                }
                Op::Row(a, i) => {
                    let c = nodes[a.0].dims[1];
                    let mut d = vec![0.0; val(*a).len()];
                    d[i * c..(i + 1) * c].copy_from_slice(&g);
                    send(*a, d);
                }
                Op::Column(a, j) => {
                    let c = nodes[a.0].dims[1];
                    let mut d = vec![0.0; val(*a).len()];
                    for (i, gi) in g.iter().enumerate() {
                        d[i * c + j] = *gi;
                    }
                    send(*a, d);
                }
                Op::ScaleRows(x, s) => {
                    let c = nodes[x.0].dims[1];
                    let (xv, sv) = (val(*x), val(*s));
                    if nodes[s.0].requires_grad {
                        let ds = (0..sv.len())
                            .map(|i| (0..c).map(|k| g[i * c + k] * xv[i * c + k]).sum())
                            .collect();
                        send(*s, ds);
                    }
                    send(*x, (0..g.len()).map(|idx| g[idx] * sv[idx / c]).collect());
                }
                Op::Stack(parts) => {
                    let chunk = g.len() / parts.len();
                    for (p, piece) in parts.iter().zip(g.chunks(chunk)) {
                        send(*p, piece.to_vec());
                    }
                }
                Op::AddRowBias(x, b) => {
                    let c = nodes[b.0].value.len();
                    let mut db = vec![0.0; c];
                    for (idx, gi) in g.iter().enumerate() {
                        db[idx % c] += gi;
                    }
                    send(*b, db);
                    send(*x, g);
                }
                Op::AddChannelBias(x, b) => {
                    let d = &nodes[x.0].dims;
                    let (c, plane) = (d[1], d[2] * d[3]);
                    let mut db = vec![0.0; c];
                    for (idx, gi) in g.iter().enumerate() {
                        db[(idx / plane) % c] += gi;
                    }
                    send(*b, db);
                    send(*x, g);
                }
                Op::Conv2d(x, w) => {
                    let xd = &nodes[x.0].dims;
                    let geo = ConvGeometry {
                        n: xd[0],
                        cin: xd[1],
                        cout: nodes[w.0].dims[0],
                        h: xd[2],
                        w: xd[3],
                    };
                    let (dx, dw) = conv2d_backward(val(*x), val(*w), &g, geo);
                    send(*x, dx);
                    send(*w, dw);
                }
                Op::MaxPool { input, argmax } => {
                    let mut d = vec![0.0; val(*input).len()];
                    for (gi, &pos) in g.iter().zip(argmax) {
                        d[pos] += gi;
                    }
                    send(*input, d);
                }
                Op::Softmax { input, temperature } => {
                    let k = *node.dims.last().unwrap();
                    let y = &node.value;
                    let mut d = vec![0.0; y.len()];
                    for r in 0..y.len() / k {
                        let span = r * k..(r + 1) * k;
                        let inner: f64 = span.clone().map(|i| g[i] * y[i]).sum();
                        for i in span {
                            d[i] = y[i] * (g[i] - inner) / temperature;
                        }
                    }
                    send(*input, d);
                }
                Op::LogSoftmax { input, temperature } => {
                    let k = *node.dims.last().unwrap();
                    let y = &node.value;
                    let mut d = vec![0.0; y.len()];
                    for r in 0..y.len() / k {
                        let span = r * k..(r + 1) * k;
                        let gsum: f64 = span.clone().map(|i| g[i]).sum();
                        for i in span {
                            d[i] = (g[i] - y[i].exp() * gsum) / temperature;
                        }
                    }
                    send(*input, d);
                }
                Op::Pick { input, labels } => {
                    let c = nodes[input.0].dims[1];
                    let mut d = vec![0.0; val(*input).len()];
                    for (i, &l) in labels.iter().enumerate() {
                        d[i * c + l] = g[i];
                    }
                    send(*input, d);
                }
                Op::KlDiv(p, lq) => {
                    let (pv, lqv) = (val(*p), val(*lq));
                    if nodes[p.0].requires_grad {
                        let dp = pv
                            .iter()
                            .zip(lqv)
                            .map(|(&pi, &l)| g[0] * (pi.max(f64::MIN_POSITIVE).ln() - l + 1.0))
                            .collect();
                        send(*p, dp);
                    }
                    send(*lq, pv.iter().map(|pi| -g[0] * pi).collect());
                }
                Op::Huber(x, y) => {
                    let d = val(*x)[0] - val(*y)[0];
                    let slope = if d.abs() <= 1.0 { d } else { d.signum() };
                    send(*x, vec![g[0] * slope]);
                    send(*y, vec![-g[0] * slope]);
                }
            }
        }

        for (idx, g) in leaf_grads {
            add_into(&mut self.nodes[idx].grad, g);
        }
        Ok(())
    }
}

/// Huber penalty with unit threshold.
pub fn huber(x: f64, y: f64) -> f64 {
    let d = (x - y).abs();
    if d <= 1.0 {
        0.5 * d * d
    } else {
        d - 0.5
    }
}

/// Stable temperature softmax of one row into `out`.
pub fn softmax_row(z: &[f64], temperature: f64, out: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, v) in out.iter_mut().zip(z) {
        *o = ((v - max) / temperature).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

fn add_into(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
        None => *slot = Some(contrib),
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn rank4(op: &'static str, dims: &[usize]) -> Result<[usize; 4]> {
    <[usize; 4]>::try_from(dims).map_err(|_| Error::shape(op, format!("expected rank 4, got {dims:?}")))
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

#[derive(Clone, Copy)]
struct ConvGeometry {
    n: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
}

/// Calls `f(out_index, in_index, kernel_index)` for every in-bounds tap.
fn conv_taps(geo: ConvGeometry, mut f: impl FnMut(usize, usize, usize)) {
    let ConvGeometry { n, cin, cout, h, w } = geo;
    for b in 0..n {
        for co in 0..cout {
            for y in 0..h {
                for x in 0..w {
                    let o = ((b * cout + co) * h + y) * w + x;
                    for ci in 0..cin {
                        for ky in 0..3 {
                            let iy = y as isize + ky as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let ix = x as isize + kx as isize - 1;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let i = ((b * cin + ci) * h + iy as usize) * w + ix as usize;
                                let k = ((co * cin + ci) * 3 + ky) * 3 + kx;
                                f(o, i, k);
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_forward(x: &[f64], k: &[f64], geo: ConvGeometry) -> Vec<f64> {
    let mut out = vec![0.0; geo.n * geo.cout * geo.h * geo.w];
    conv_taps(geo, |o, i, kk| out[o] += x[i] * k[kk]);
    out
}

fn conv2d_backward(x: &[f64], k: &[f64], g: &[f64], geo: ConvGeometry) -> (Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; k.len()];
    conv_taps(geo, |o, i, kk| {
        dx[i] += g[o] * k[kk];
        dk[kk] += g[o] * x[i];
    });
    (dx, dk)
}
