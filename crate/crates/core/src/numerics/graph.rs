//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of a forward pass into an arena; each
//! recorded value is addressed by a copyable [`Var`]. [`Graph::backward`] walks
//! the arena in reverse and returns one gradient per node that depends on a
//! parameter leaf.

use crate::error::{Error, Result};
use crate::numerics::tensor::{compensated_sum, 
    self, axis_split, gemm_nt, gemm_tn, matmul_dims, normal_cdf, normal_pdf, row_stats, Tensor,
};

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Param,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Softmax(Var, usize),
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    Gelu(Var),
    GatherRows(Var, Vec<usize>),
    ScatterRows { visible: Var, fill: Var, index: Vec<usize> },
    ConcatRows(Vec<Var>),
    SplitHeads(Var),
    MergeHeads(Var),
    Sum(Var),
    MeanSquaredError(Var, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Param => "param",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::GatherRows(..) => "gather_rows",
            Op::ScatterRows { .. } => "scatter_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::SplitHeads(..) => "split_heads",
            Op::MergeHeads(..) => "merge_heads",
            Op::Sum(..) => "sum",
            Op::MeanSquaredError(..) => "mse",
        }
    }
}

/// Names of every differentiable operation, as reported by gradient-check failures.
pub const DIFFERENTIABLE_OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "add_bias",
    "scale",
    "matmul",
    "transpose",
    "softmax",
    "layer_norm",
    "gelu",
    "gather_rows",
    "scatter_rows",
    "concat_rows",
    "split_heads",
    "merge_heads",
    "sum",
    "mse",
];

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    flipped: bool,
}

/// Arena of recorded operations for one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    sign_flip: Option<&'static str>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Negates the backward rule of the named op for every node recorded until
    /// [`Graph::clear_sign_flip`]. Mutation-testing hook for the gradient
    /// checker; never set during training.
    pub fn inject_sign_flip(&mut self, op: &str) -> Result<()> {
        let name = DIFFERENTIABLE_OPS
            .iter()
            .find(|n| **n == op)
            .ok_or_else(|| Error::Config(format!("unknown op `{op}`")))?;
        self.sign_flip = Some(name);
        Ok(())
    }

    pub fn clear_sign_flip(&mut self) {
        self.sign_flip = None;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let flipped = self.sign_flip == Some(op.name());
        self.nodes.push(Node { value, op, needs_grad, flipped });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Param, true)
    }

    /// A leaf that does not receive a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), self.ng(&[a, b])))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b), self.ng(&[a, b])))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b), self.ng(&[a, b])))
    }

    /// Adds a vector to every row of `x` (broadcast over all leading axes).
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let c = xv.last_dim();
        if bv.len() != c {
            return Err(Error::shape("add_bias", format!("bias {:?} for rows of {c}", bv.shape())));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddBias(x, bias), self.ng(&[x, bias])))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).scale(s);
        let ng = self.ng(&[x]);
        self.push(out, Op::Scale(x, s), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), self.ng(&[a, b])))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose_last2()?;
        Ok(self.push(out, Op::Transpose(x), self.ng(&[x])))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = tensor::softmax(self.value(x), axis)?;
        Ok(self.push(out, Op::Softmax(x, axis), self.ng(&[x])))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let out = tensor::layer_norm(self.value(x), self.value(gain), self.value(bias), eps)?;
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, eps }, self.ng(&[x, gain, bias])))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = tensor::gelu(self.value(x));
        let ng = self.ng(&[x]);
        self.push(out, Op::Gelu(x), ng)
    }

    /// Selects rows of a 2-D tensor in the given order.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(Error::shape("gather_rows", format!("expected rank 2, got {:?}", xv.shape())));
        }
        let (rows, c) = (xv.shape()[0], xv.shape()[1]);
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            if i >= rows {
                return Err(Error::shape("gather_rows", format!("row {i} out of range for {rows} rows")));
            }
            data.extend_from_slice(xv.row(i));
        }
        let out = Tensor::new(vec![index.len(), c], data)?;
        Ok(self.push(out, Op::GatherRows(x, index.to_vec()), self.ng(&[x])))
    }

    /// Builds a `[total, c]` tensor whose rows at `index` are the rows of `visible`
    /// (in order) and whose remaining rows all equal the vector `fill`.
    pub fn scatter_rows(&mut self, visible: Var, fill: Var, index: &[usize], total: usize) -> Result<Var> {
        let vv = self.value(visible);
        let fv = self.value(fill);
        let c = fv.len();
        if vv.rank() != 2 || vv.shape()[1] != c {
            return Err(Error::shape(
                "scatter_rows",
                format!("visible {:?} does not match fill of length {c}", vv.shape()),
            ));
        }
        if vv.shape()[0] != index.len() {
            return Err(Error::shape(
                "scatter_rows",
                format!("{} visible rows for {} indices", vv.shape()[0], index.len()),
            ));
        }
        let mut data: Vec<f64> = Vec::with_capacity(total * c);
        for _ in 0..total {
            data.extend_from_slice(fv.data());
        }
        for (r, &i) in index.iter().enumerate() {
            if i >= total {
                return Err(Error::shape("scatter_rows", format!("row {i} out of range for {total} rows")));
            }
            data[i * c..(i + 1) * c].copy_from_slice(vv.row(r));
        }
        let out = Tensor::new(vec![total, c], data)?;
        let ng = self.ng(&[visible, fill]);
        Ok(self.push(out, Op::ScatterRows { visible, fill, index: index.to_vec() }, ng))
    }

    /// Stacks 2-D tensors with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let c = self.value(*first).last_dim();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.rank() != 2 || v.shape()[1] != c {
                return Err(Error::shape("concat_rows", format!("{:?} does not have {c} columns", v.shape())));
            }
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(vec![rows, c], data)?;
        let ng = self.ng(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// `[t, heads * dh]` -> `[heads, t, dh]`
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || heads == 0 || xv.shape()[1] % heads != 0 {
            return Err(Error::shape("split_heads", format!("{:?} into {heads} heads", xv.shape())));
        }
        let (t, d) = (xv.shape()[0], xv.shape()[1]);
        let dh = d / heads;
        let mut data = vec![0.0; t * d];
        for h in 0..heads {
            for i in 0..t {
                data[(h * t + i) * dh..(h * t + i + 1) * dh]
                    .copy_from_slice(&xv.data()[i * d + h * dh..i * d + (h + 1) * dh]);
            }
        }
        let out = Tensor::new(vec![heads, t, dh], data)?;
        Ok(self.push(out, Op::SplitHeads(x), self.ng(&[x])))
    }

    /// `[heads, t, dh]` -> `[t, heads * dh]`
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 3 {
            return Err(Error::shape("merge_heads", format!("expected rank 3, got {:?}", xv.shape())));
        }
        let out = merge_heads_fwd(xv);
        Ok(self.push(out, Op::MergeHeads(x), self.ng(&[x])))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(&[x]);
        self.push(out, Op::Sum(x), ng)
    }

    /// Mean of squared differences; an empty pair yields 0.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let p = self.value(pred);
        let t = self.value(target);
        if p.shape() != t.shape() {
            return Err(Error::shape("mse", format!("{:?} vs {:?}", p.shape(), t.shape())));
        }
        let n = p.len();
        let s = compensated_sum(p.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)));
        let out = Tensor::scalar(if n == 0 { 0.0 } else { s / n as f64 });
        Ok(self.push(out, Op::MeanSquaredError(pred, target), self.ng(&[pred, target])))
    }

    /// Reverse pass from a scalar output. Every node that depends on a
    /// parameter gets a gradient; parameters that do not influence `output`
    /// get a zero gradient of their own shape.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(Error::shape("backward", format!("output must be scalar, got {:?}", out.shape())));
        }
        if !out.is_finite() {
            return Err(Error::NonFinite { context: "backward output".into() });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::full(out.shape().to_vec(), 1.0));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(mut g) = grads[idx].take() else { continue };
            if node.flipped {
                g = g.scale(-1.0);
            }
            self.backprop(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Param) && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.nodes[v.0].needs_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g)?,
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn backprop(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Param | Op::Constant => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                let ga = g.mul(self.value(*b))?;
                let gb = g.mul(self.value(*a))?;
                self.accumulate(grads, *a, ga)?;
                self.accumulate(grads, *b, gb)?;
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, g.clone())?;
                if self.nodes[bias.0].needs_grad {
                    let c = g.last_dim();
                    let mut gb = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    self.accumulate(grads, *bias, Tensor::new(shape, gb)?)?;
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.scale(*s))?,
            Op::MatMul(a, b) => self.backprop_matmul(*a, *b, g, grads)?,
            Op::Transpose(x) => self.accumulate(grads, *x, g.transpose_last2()?)?,
            Op::Softmax(x, axis) => {
                let y = &node.value;
                let (outer, len, inner) = axis_split(y.shape(), *axis)?;
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = 0.0;
                        for j in 0..len {
                            let k = base + j * inner;
                            dot += g.data()[k] * y.data()[k];
                        }
                        for j in 0..len {
                            let k = base + j * inner;
                            dx[k] = y.data()[k] * (g.data()[k] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx)?)?;
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let c = xv.last_dim();
                let mut dx = vec![0.0; xv.len()];
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                let mut xhat = vec![0.0; c];
                let mut dxhat = vec![0.0; c];
                for r in 0..xv.rows() {
                    let row = xv.row(r);
                    let grow = g.row(r);
                    let (mean, rstd) = row_stats(row, *eps);
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..c {
                        xhat[j] = (row[j] - mean) * rstd;
                        dgain[j] += grow[j] * xhat[j];
                        dbias[j] += grow[j];
                        dxhat[j] = grow[j] * gv.data()[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * xhat[j];
                    }
                    m1 /= c as f64;
                    m2 /= c as f64;
                    let dst = &mut dx[r * c..(r + 1) * c];
                    for j in 0..c {
                        dst[j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?)?;
                let gshape = gv.shape().to_vec();
                let bshape = self.value(*bias).shape().to_vec();
                self.accumulate(grads, *gain, Tensor::new(gshape, dgain)?)?;
                self.accumulate(grads, *bias, Tensor::new(bshape, dbias)?)?;
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let dx: Vec<f64> = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| gv * (normal_cdf(v) + v * normal_pdf(v)))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?)?;
            }
            Op::GatherRows(x, index) => {
                let xv = self.value(*x);
                let c = xv.last_dim();
                let mut dx = Tensor::zeros(xv.shape().to_vec());
                for (r, &i) in index.iter().enumerate() {
                    for (d, v) in dx.data_mut()[i * c..(i + 1) * c].iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                self.accumulate(grads, *x, dx)?;
            }
            Op::ScatterRows { visible, fill, index } => {
                let c = g.last_dim();
                let total = g.rows();
                let mut is_visible = vec![false; total];
                let mut dv = Vec::with_capacity(index.len() * c);
                for &i in index {
                    is_visible[i] = true;
                    dv.extend_from_slice(g.row(i));
                }
                let mut df = vec![0.0; c];
                for (r, vis) in is_visible.iter().enumerate() {
                    if !vis {
                        for (acc, v) in df.iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                }
                let vshape = self.value(*visible).shape().to_vec();
                let fshape = self.value(*fill).shape().to_vec();
                self.accumulate(grads, *visible, Tensor::new(vshape, dv)?)?;
                self.accumulate(grads, *fill, Tensor::new(fshape, df)?)?;
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    let shape = self.value(p).shape().to_vec();
                    let part = Tensor::new(shape, g.data()[offset..offset + n].to_vec())?;
                    offset += n;
                    self.accumulate(grads, p, part)?;
                }
            }
            Op::SplitHeads(x) => self.accumulate(grads, *x, merge_heads_fwd(g))?,
            Op::MergeHeads(x) => {
                let shape = self.value(*x).shape().to_vec();
                let (heads, t, dh) = (shape[0], shape[1], shape[2]);
                let d = heads * dh;
                let mut dx = vec![0.0; g.len()];
                for h in 0..heads {
                    for i in 0..t {
                        dx[(h * t + i) * dh..(h * t + i + 1) * dh]
                            .copy_from_slice(&g.data()[i * d + h * dh..i * d + (h + 1) * dh]);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(shape, dx)?)?;
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::full(shape, g.item()))?;
            }
            Op::MeanSquaredError(pred, target) => {
                let p = self.value(*pred);
                let t = self.value(*target);
                let n = p.len();
                if n > 0 {
                    let k = 2.0 * g.item() / n as f64;
                    let dp: Vec<f64> = p.data().iter().zip(t.data()).map(|(a, b)| k * (a - b)).collect();
                    let dp = Tensor::new(p.shape().to_vec(), dp)?;
                    let dt = dp.scale(-1.0);
                    self.accumulate(grads, *pred, dp)?;
                    self.accumulate(grads, *target, dt)?;
                }
            }
        }
        Ok(())
    }

    fn backprop_matmul(&self, a: Var, b: Var, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let av = self.value(a);
        let bv = self.value(b);
        let d = matmul_dims(av.shape(), bv.shape())?;
        let (m, k, n) = (d.m, d.k, d.n);
        if self.nodes[a.0].needs_grad {
            let mut da = vec![0.0; av.len()];
            for bi in 0..d.batch {
                let ao = if d.a_batched { bi * m * k } else { 0 };
                let bo = if d.b_batched { bi * k * n } else { 0 };
                gemm_nt(
                    &g.data()[bi * m * n..(bi + 1) * m * n],
                    &bv.data()[bo..bo + k * n],
                    &mut da[ao..ao + m * k],
                    m,
                    n,
                    k,
                );
            }
            self.accumulate(grads, a, Tensor::new(av.shape().to_vec(), da)?)?;
        }
        if self.nodes[b.0].needs_grad {
            let mut db = vec![0.0; bv.len()];
            for bi in 0..d.batch {
                let ao = if d.a_batched { bi * m * k } else { 0 };
                let bo = if d.b_batched { bi * k * n } else { 0 };
                gemm_tn(
                    &av.data()[ao..ao + m * k],
                    &g.data()[bi * m * n..(bi + 1) * m * n],
                    &mut db[bo..bo + k * n],
                    m,
                    k,
                    n,
                );
            }
            self.accumulate(grads, b, Tensor::new(bv.shape().to_vec(), db)?)?;
        }
        Ok(())
    }
}

fn merge_heads_fwd(x: &Tensor) -> Tensor {
    let (heads, t, dh) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let d = heads * dh;
    let mut data = vec![0.0; x.len()];
    for h in 0..heads {
        for i in 0..t {
            data[i * d + h * dh..i * d + (h + 1) * dh]
                .copy_from_slice(&x.data()[(h * t + i) * dh..(h * t + i + 1) * dh]);
        }
    }
    Tensor::new(vec![t, d], data).expect("merge_heads shape")
}
