//! Expression graph with forward evaluation and reverse-mode gradients.
//!
//! Nodes are appended in topological order, so evaluation is a single forward
//! sweep and backpropagation a single reverse sweep. Shapes are inferred when a
//! node is added; a binding whose shape disagrees with its leaf declaration is
//! reported at evaluation time.

use std::borrow::Cow;
use std::collections::HashMap;

use super::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a node inside an [`Expr`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf(String),
    Const(Tensor),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Elu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LogSumExp(Var),
    LayerNorm(Var, f64),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Embedding { table: Var, indices: Vec<usize> },
    Pick { src: Var, indices: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { src: Var, axis: usize, start: usize, end: usize },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::Const(_) => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Elu(_) => "elu",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Square(_) => "square",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::LogSumExp(_) => "logsumexp",
            Op::LayerNorm(..) => "layer_norm",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul(..) => "batch_matmul",
            Op::Embedding { .. } => "embedding",
            Op::Pick { .. } => "pick",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(_) => "reshape",
            Op::Permute(..) => "permute",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumLast(_) => "sum_last",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
}

/// Named tensors bound to the leaves of an expression.
#[derive(Default, Clone, Debug)]
pub struct Bindings<'a> {
    map: HashMap<String, &'a Tensor>,
}

impl<'a> Bindings<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, name: impl Into<String>, value: &'a Tensor) -> &mut Self {
        self.map.insert(name.into(), value);
        self
    }

    pub fn get(&self, name: &str) -> Option<&'a Tensor> {
        self.map.get(name).copied()
    }
}

impl<'a> FromIterator<(String, &'a Tensor)> for Bindings<'a> {
    fn from_iter<I: IntoIterator<Item = (String, &'a Tensor)>>(iter: I) -> Self {
        Bindings { map: iter.into_iter().collect() }
    }
}

/// A differentiable computation over dense arrays.
///
/// The root is the most recently added node unless set explicitly.
#[derive(Clone, Debug, Default)]
pub struct Expr {
    nodes: Vec<Node>,
    leaves: HashMap<String, Var>,
    root: Option<Var>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn drop_last(shape: &[usize]) -> Vec<usize> {
    if shape.len() <= 1 {
        vec![1]
    } else {
        shape[..shape.len() - 1].to_vec()
    }
}

impl Expr {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn root(&self) -> Option<Var> {
        self.root.or_else(|| self.nodes.len().checked_sub(1).map(Var))
    }

    pub fn set_root(&mut self, v: Var) {
        self.root = Some(v);
    }

    /// Names of all leaves referenced by the expression.
    pub fn leaf_names(&self) -> impl Iterator<Item = &str> {
        self.leaves.keys().map(String::as_str)
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> Var {
        self.nodes.push(Node { op, shape });
        Var(self.nodes.len() - 1)
    }

    fn shape_err(&self, op: &str, detail: String) -> Error {
        Error::Shape { node: self.nodes.len(), op: op.to_string(), detail }
    }

    /// Declares (or reuses) a named leaf of the given shape.
    pub fn leaf(&mut self, name: &str, shape: &[usize]) -> Result<Var> {
        if let Some(&v) = self.leaves.get(name) {
            if self.shape(v) != shape {
                return Err(self.shape_err(
                    "leaf",
                    format!("leaf `{name}` redeclared as {shape:?}, was {:?}", self.shape(v)),
                ));
            }
            return Ok(v);
        }
        if shape.is_empty() || shape.contains(&0) {
            return Err(self.shape_err("leaf", format!("leaf `{name}` has invalid shape {shape:?}")));
        }
        let v = self.push(Op::Leaf(name.to_string()), shape.to_vec());
        self.leaves.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        let shape = value.shape().to_vec();
        self.push(Op::Const(value), shape)
    }

    fn broadcast(&mut self, name: &str, a: Var, b: Var) -> Result<Vec<usize>> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b);
        let ok = numel(sb) == 1 || (sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb);
        if !ok {
            return Err(self.shape_err(name, format!("cannot broadcast {sb:?} onto {sa:?}")));
        }
        Ok(sa)
    }

    /// `a + b`, where `b` may be a scalar or a trailing-suffix of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.broadcast("add", a, b)?;
        Ok(self.push(Op::Add(a, b), s))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.broadcast("sub", a, b)?;
        Ok(self.push(Op::Sub(a, b), s))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.broadcast("mul", a, b)?;
        Ok(self.push(Op::Mul(a, b), s))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.broadcast("div", a, b)?;
        Ok(self.push(Op::Div(a, b), s))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let s = self.shape(a).to_vec();
        self.push(Op::Scale(a, c), s)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let s = self.shape(a).to_vec();
        self.push(Op::AddScalar(a, c), s)
    }

    fn unary(&mut self, a: Var, op: Op) -> Var {
        let s = self.shape(a).to_vec();
        self.push(op, s)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a))
    }

    /// ELU with α = 1.
    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Elu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softmax(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        self.unary(a, Op::LogSoftmax(a))
    }

    /// Log-sum-exp over the last axis.
    pub fn logsumexp(&mut self, a: Var) -> Var {
        let s = drop_last(self.shape(a));
        self.push(Op::LogSumExp(a), s)
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        self.unary(a, Op::LayerNorm(a, eps))
    }

    /// `a[.., k] · b[k, n] -> [.., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sb.len() != 2 || sa.last() != Some(&sb[0]) {
            return Err(self.shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let mut s = sa;
        *s.last_mut().unwrap() = sb[1];
        Ok(self.push(Op::MatMul(a, b), s))
    }

    /// `a[b, m, k] · c[b, k, n] -> [b, m, n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(self.shape_err("batch_matmul", format!("{sa:?} x {sb:?}")));
        }
        Ok(self.push(Op::BatchMatMul(a, b), vec![sa[0], sa[1], sb[2]]))
    }

    /// Gathers rows of a `[V, D]` table.
    pub fn embedding(&mut self, table: Var, indices: Vec<usize>) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 || indices.is_empty() {
            return Err(self.shape_err("embedding", format!("table {st:?}, {} indices", indices.len())));
        }
        if let Some(bad) = indices.iter().find(|&&i| i >= st[0]) {
            return Err(self.shape_err("embedding", format!("index {bad} out of range for {st:?}")));
        }
        let n = indices.len();
        Ok(self.push(Op::Embedding { table, indices }, vec![n, st[1]]))
    }

    /// Selects one entry of the last axis per row.
    pub fn pick(&mut self, src: Var, indices: Vec<usize>) -> Result<Var> {
        let s = self.shape(src).to_vec();
        let w = *s.last().unwrap();
        let rows = numel(&s) / w;
        if indices.len() != rows {
            return Err(self.shape_err("pick", format!("{} indices for {rows} rows", indices.len())));
        }
        if let Some(bad) = indices.iter().find(|&&i| i >= w) {
            return Err(self.shape_err("pick", format!("index {bad} out of range for width {w}")));
        }
        Ok(self.push(Op::Pick { src, indices }, drop_last(&s)))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = match parts.first() {
            Some(&p) => self.shape(p).to_vec(),
            None => return Err(self.shape_err("concat", "no inputs".into())),
        };
        if axis >= first.len() {
            return Err(self.shape_err("concat", format!("axis {axis} for rank {}", first.len())));
        }
        let mut out = first.clone();
        out[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(self.shape_err("concat", format!("{s:?} vs {first:?} on axis {axis}")));
            }
            out[axis] += s[axis];
        }
        Ok(self.push(Op::Concat { parts: parts.to_vec(), axis }, out))
    }

    pub fn slice(&mut self, src: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let mut s = self.shape(src).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(self.shape_err("slice", format!("{start}..{end} on axis {axis} of {s:?}")));
        }
        s[axis] = end - start;
        Ok(self.push(Op::Slice { src, axis, start, end }, s))
    }

    pub fn reshape(&mut self, src: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(src)) || shape.contains(&0) {
            return Err(self.shape_err("reshape", format!("{:?} -> {shape:?}", self.shape(src))));
        }
        Ok(self.push(Op::Reshape(src), shape.to_vec()))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, src: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(src).to_vec();
        let mut seen = vec![false; s.len()];
        for &p in perm {
            if p >= s.len() || seen[p] {
                return Err(self.shape_err("permute", format!("bad permutation {perm:?} for {s:?}")));
            }
            seen[p] = true;
        }
        if perm.len() != s.len() {
            return Err(self.shape_err("permute", format!("bad permutation {perm:?} for {s:?}")));
        }
        let out = perm.iter().map(|&p| s[p]).collect();
        Ok(self.push(Op::Permute(src, perm.to_vec()), out))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.push(Op::Sum(a), vec![1])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        self.push(Op::Mean(a), vec![1])
    }

    pub fn sum_last(&mut self, a: Var) -> Var {
        let s = drop_last(self.shape(a));
        self.push(Op::SumLast(a), s)
    }

    /// Forward value of the root.
    pub fn evaluate(&self, bindings: &Bindings<'_>) -> Result<Tensor> {
        let root = self.root().ok_or_else(|| Error::Usage("empty expression".into()))?;
        let mut values = self.forward(bindings)?;
        Ok(values.swap_remove(root.0).into_owned())
    }

    /// Forward values of every node, in insertion order.
    pub fn forward<'a>(&self, bindings: &Bindings<'a>) -> Result<Vec<Cow<'a, Tensor>>> {
        let mut values: Vec<Cow<'a, Tensor>> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let v = match &node.op {
                Op::Leaf(name) => {
                    let t = bindings.get(name).ok_or_else(|| {
                        Error::Usage(format!("leaf `{name}` (node {id}) is not bound"))
                    })?;
                    if t.shape() != node.shape.as_slice() {
                        return Err(Error::Shape {
                            node: id,
                            op: node.op.name().into(),
                            detail: format!(
                                "`{name}` bound to {:?}, declared {:?}",
                                t.shape(),
                                node.shape
                            ),
                        });
                    }
                    Cow::Borrowed(t)
                }
                op => Cow::Owned(eval_op(op, &node.shape, &values)),
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Gradient of the (scalar) root with respect to the named leaves.
    pub fn gradient(&self, bindings: &Bindings<'_>, wrt: &[&str]) -> Result<HashMap<String, Tensor>> {
        self.value_and_gradient(bindings, wrt).map(|(_, g)| g)
    }

    pub fn value_and_gradient(
        &self,
        bindings: &Bindings<'_>,
        wrt: &[&str],
    ) -> Result<(f64, HashMap<String, Tensor>)> {
        let root = self.root().ok_or_else(|| Error::Usage("empty expression".into()))?;
        if numel(self.shape(root)) != 1 {
            return Err(Error::Usage(format!(
                "gradient requires a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        for name in wrt {
            if !self.leaves.contains_key(*name) && bindings.get(name).is_none() {
                return Err(Error::Usage(format!("unknown leaf `{name}`")));
            }
        }
        let values = self.forward(bindings)?;
        let grads = self.backward(&values, root);
        let out = wrt
            .iter()
            .map(|&name| {
                let g = match self.leaves.get(name) {
                    Some(v) => grads[v.0]
                        .clone()
                        .unwrap_or_else(|| Tensor::zeros(self.shape(*v).to_vec())),
                    None => Tensor::zeros(bindings.get(name).unwrap().shape().to_vec()),
                };
                (name.to_string(), g)
            })
            .collect();
        Ok((values[root.0].item(), out))
    }

    fn backward(&self, values: &[Cow<'_, Tensor>], root: Var) -> Vec<Option<Tensor>> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(self.shape(root).to_vec(), 1.0));
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            backprop(&node.op, &g, &values[id], values, &mut grads);
            // Leaves keep their gradient for the caller.
            if matches!(node.op, Op::Leaf(_)) {
                grads[id] = Some(g);
            }
        }
        grads
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn rows_of(shape: &[usize]) -> (usize, usize) {
    let w = *shape.last().unwrap();
    (numel(shape) / w, w)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Maps each output flat index of a permutation to its input flat index.
fn permute_index_map(in_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let n = numel(&out_shape);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..n {
        let src: usize = idx.iter().zip(perm).map(|(&i, &p)| i * in_strides[p]).sum();
        map.push(src);
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    map
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let (rows, w) = rows_of(x.shape());
    let mut out = vec![0.0; x.numel()];
    for r in 0..rows {
        let src = &x.data()[r * w..(r + 1) * w];
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let dst = &mut out[r * w..(r + 1) * w];
        let mut z = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            z += *d;
        }
        for d in dst.iter_mut() {
            *d /= z;
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

fn logsumexp_rows(x: &Tensor) -> Vec<f64> {
    let (rows, w) = rows_of(x.shape());
    (0..rows)
        .map(|r| {
            let src = &x.data()[r * w..(r + 1) * w];
            let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            max + src.iter().map(|&s| (s - max).exp()).sum::<f64>().ln()
        })
        .collect()
}

fn binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let inner = b.numel();
    let bd = b.data();
    let data = a.data().iter().enumerate().map(|(i, &x)| f(x, bd[i % inner])).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

fn eval_op(op: &Op, shape: &[usize], vals: &[Cow<'_, Tensor>]) -> Tensor {
    let v = |x: &Var| -> &Tensor { &vals[x.0] };
    match op {
        Op::Leaf(_) => unreachable!("leaves are bound, not evaluated"),
        Op::Const(t) => t.clone(),
        Op::Add(a, b) => binary(v(a), v(b), |x, y| x + y),
        Op::Sub(a, b) => binary(v(a), v(b), |x, y| x - y),
        Op::Mul(a, b) => binary(v(a), v(b), |x, y| x * y),
        Op::Div(a, b) => binary(v(a), v(b), |x, y| x / y),
        Op::Scale(a, c) => v(a).map(|x| x * c),
        Op::AddScalar(a, c) => v(a).map(|x| x + c),
        Op::Relu(a) => v(a).map(|x| x.max(0.0)),
        Op::Sigmoid(a) => v(a).map(sigmoid),
        Op::Elu(a) => v(a).map(|x| if x > 0.0 { x } else { x.exp_m1() }),
        Op::Exp(a) => v(a).map(f64::exp),
        Op::Log(a) => v(a).map(f64::ln),
        Op::Square(a) => v(a).map(|x| x * x),
        Op::Softmax(a) => softmax_rows(v(a)),
        Op::LogSoftmax(a) => {
            let x = v(a);
            let lse = logsumexp_rows(x);
            let w = x.last_dim();
            let data = x.data().iter().enumerate().map(|(i, &s)| s - lse[i / w]).collect();
            Tensor::from_parts(x.shape().to_vec(), data)
        }
        Op::LogSumExp(a) => Tensor::from_parts(shape.to_vec(), logsumexp_rows(v(a))),
        Op::LayerNorm(a, eps) => {
            let x = v(a);
            let (rows, w) = rows_of(x.shape());
            let mut out = vec![0.0; x.numel()];
            for r in 0..rows {
                let src = &x.data()[r * w..(r + 1) * w];
                let mean = src.iter().sum::<f64>() / w as f64;
                let var = src.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / w as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for (o, s) in out[r * w..(r + 1) * w].iter_mut().zip(src) {
                    *o = (s - mean) * inv;
                }
            }
            Tensor::from_parts(x.shape().to_vec(), out)
        }
        Op::MatMul(a, b) => {
            let (x, y) = (v(a), v(b));
            let (m, k) = rows_of(x.shape());
            let n = y.shape()[1];
            let mut out = vec![0.0; m * n];
            matmul_into(x.data(), y.data(), &mut out, m, k, n);
            Tensor::from_parts(shape.to_vec(), out)
        }
        Op::BatchMatMul(a, b) => {
            let (x, y) = (v(a), v(b));
            let (bs, m, k) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let n = y.shape()[2];
            let mut out = vec![0.0; bs * m * n];
            for i in 0..bs {
                matmul_into(
                    &x.data()[i * m * k..(i + 1) * m * k],
                    &y.data()[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
            Tensor::from_parts(shape.to_vec(), out)
        }
        Op::Embedding { table, indices } => {
            let t = v(table);
            let d = t.shape()[1];
            let mut out = Vec::with_capacity(indices.len() * d);
            for &i in indices {
                out.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
            }
            Tensor::from_parts(shape.to_vec(), out)
        }
        Op::Pick { src, indices } => {
            let x = v(src);
            let w = x.last_dim();
            let out = indices.iter().enumerate().map(|(r, &i)| x.data()[r * w + i]).collect();
            Tensor::from_parts(shape.to_vec(), out)
        }
        Op::Concat { parts, axis } => {
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let mut out = Vec::with_capacity(numel(shape));
            for o in 0..outer {
                for p in parts {
                    let t = v(p);
                    let chunk = t.shape()[*axis] * inner;
                    out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            Tensor::from_parts(shape.to_vec(), out)
        }
        Op::Slice { src, axis, start, end } => {
            let x = v(src);
            let outer: usize = x.shape()[..*axis].iter().product();
            let inner: usize = x.shape()[axis + 1..].iter().product();
            let full = x.shape()[*axis] * inner;
            let mut out = Vec::with_capacity(numel(shape));
            for o in 0..outer {
                out.extend_from_slice(&x.data()[o * full + start * inner..o * full + end * inner]);
            }
            Tensor::from_parts(shape.to_vec(), out)
        }
        Op::Reshape(a) => v(a).clone().with_shape(shape.to_vec()),
        Op::Permute(a, perm) => {
            let x = v(a);
            let map = permute_index_map(x.shape(), perm);
            Tensor::from_parts(shape.to_vec(), map.iter().map(|&i| x.data()[i]).collect())
        }
        Op::Sum(a) => Tensor::scalar(v(a).data().iter().sum()),
        Op::Mean(a) => {
            let x = v(a);
            Tensor::scalar(x.data().iter().sum::<f64>() / x.numel() as f64)
        }
        Op::SumLast(a) => {
            let x = v(a);
            let w = x.last_dim();
            Tensor::from_parts(shape.to_vec(), x.data().chunks(w).map(|c| c.iter().sum()).collect())
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn backprop(
    op: &Op,
    g: &Tensor,
    out: &Tensor,
    vals: &[Cow<'_, Tensor>],
    grads: &mut [Option<Tensor>],
) {
    let v = |x: &Var| -> &Tensor { &vals[x.0] };
    let elementwise = |x: &Tensor, f: &dyn Fn(usize, f64) -> f64| -> Tensor {
        let data = g.data().iter().enumerate().map(|(i, &gi)| f(i, gi)).collect();
        Tensor::from_parts(x.shape().to_vec(), data)
    };
    match op {
        Op::Leaf(_) | Op::Const(_) => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
            let inner = v(b).numel();
            let mut gb = vec![0.0; inner];
            for (i, &gi) in g.data().iter().enumerate() {
                gb[i % inner] += sign * gi;
            }
            accumulate(grads, *a, g.clone());
            accumulate(grads, *b, Tensor::from_parts(v(b).shape().to_vec(), gb));
        }
        Op::Mul(a, b) => {
            let (x, y) = (v(a), v(b));
            let inner = y.numel();
            let mut ga = vec![0.0; x.numel()];
            let mut gb = vec![0.0; inner];
            for (i, &gi) in g.data().iter().enumerate() {
                ga[i] = gi * y.data()[i % inner];
                gb[i % inner] += gi * x.data()[i];
            }
            accumulate(grads, *a, Tensor::from_parts(x.shape().to_vec(), ga));
            accumulate(grads, *b, Tensor::from_parts(y.shape().to_vec(), gb));
        }
        Op::Div(a, b) => {
            let (x, y) = (v(a), v(b));
            let inner = y.numel();
            let mut ga = vec![0.0; x.numel()];
            let mut gb = vec![0.0; inner];
            for (i, &gi) in g.data().iter().enumerate() {
                let d = y.data()[i % inner];
                ga[i] = gi / d;
                gb[i % inner] -= gi * x.data()[i] / (d * d);
            }
            accumulate(grads, *a, Tensor::from_parts(x.shape().to_vec(), ga));
            accumulate(grads, *b, Tensor::from_parts(y.shape().to_vec(), gb));
        }
        Op::Scale(a, c) => accumulate(grads, *a, g.map(|x| x * c)),
        Op::AddScalar(a, _) => accumulate(grads, *a, g.clone()),
        Op::Relu(a) => {
            let x = v(a);
            let gx = elementwise(x, &|i, gi| if x.data()[i] > 0.0 { gi } else { 0.0 });
            accumulate(grads, *a, gx);
        }
        Op::Sigmoid(a) => {
            let gx = elementwise(v(a), &|i, gi| {
                let s = out.data()[i];
                gi * s * (1.0 - s)
            });
            accumulate(grads, *a, gx);
        }
        Op::Elu(a) => {
            let x = v(a);
            let gx = elementwise(x, &|i, gi| {
                if x.data()[i] > 0.0 {
                    gi
                } else {
                    gi * (out.data()[i] + 1.0)
                }
            });
            accumulate(grads, *a, gx);
        }
        Op::Exp(a) => {
            let gx = elementwise(v(a), &|i, gi| gi * out.data()[i]);
            accumulate(grads, *a, gx);
        }
        Op::Log(a) => {
            let x = v(a);
            let gx = elementwise(x, &|i, gi| gi / x.data()[i]);
            accumulate(grads, *a, gx);
        }
        Op::Square(a) => {
            let x = v(a);
            let gx = elementwise(x, &|i, gi| 2.0 * gi * x.data()[i]);
            accumulate(grads, *a, gx);
        }
        Op::Softmax(a) => {
            let (rows, w) = rows_of(out.shape());
            let mut gx = vec![0.0; out.numel()];
            for r in 0..rows {
                let y = &out.data()[r * w..(r + 1) * w];
                let gr = &g.data()[r * w..(r + 1) * w];
                let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..w {
                    gx[r * w + j] = y[j] * (gr[j] - dot);
                }
            }
            accumulate(grads, *a, Tensor::from_parts(out.shape().to_vec(), gx));
        }
        Op::LogSoftmax(a) => {
            let (rows, w) = rows_of(out.shape());
            let mut gx = vec![0.0; out.numel()];
            for r in 0..rows {
                let y = &out.data()[r * w..(r + 1) * w];
                let gr = &g.data()[r * w..(r + 1) * w];
                let total: f64 = gr.iter().sum();
                for j in 0..w {
                    gx[r * w + j] = gr[j] - y[j].exp() * total;
                }
            }
            accumulate(grads, *a, Tensor::from_parts(out.shape().to_vec(), gx));
        }
        Op::LogSumExp(a) => {
            let x = v(a);
            let (rows, w) = rows_of(x.shape());
            let mut gx = vec![0.0; x.numel()];
            for r in 0..rows {
                let lse = out.data()[r];
                for j in 0..w {
                    gx[r * w + j] = g.data()[r] * (x.data()[r * w + j] - lse).exp();
                }
            }
            accumulate(grads, *a, Tensor::from_parts(x.shape().to_vec(), gx));
        }
        Op::LayerNorm(a, eps) => {
            let x = v(a);
            let (rows, w) = rows_of(x.shape());
            let wf = w as f64;
            let mut gx = vec![0.0; x.numel()];
            for r in 0..rows {
                let src = &x.data()[r * w..(r + 1) * w];
                let mean = src.iter().sum::<f64>() / wf;
                let var = src.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / wf;
                let inv = 1.0 / (var + eps).sqrt();
                let xhat = &out.data()[r * w..(r + 1) * w];
                let gr = &g.data()[r * w..(r + 1) * w];
                let g_mean = gr.iter().sum::<f64>() / wf;
                let gx_mean = gr.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / wf;
                for j in 0..w {
                    gx[r * w + j] = inv * (gr[j] - g_mean - xhat[j] * gx_mean);
                }
            }
            accumulate(grads, *a, Tensor::from_parts(x.shape().to_vec(), gx));
        }
        Op::MatMul(a, b) => {
            let (x, y) = (v(a), v(b));
            let (m, k) = rows_of(x.shape());
            let n = y.shape()[1];
            let mut ga = vec![0.0; m * k];
            matmul_nt_into(g.data(), y.data(), &mut ga, m, k, n);
            let mut gb = vec![0.0; k * n];
            matmul_tn_into(x.data(), g.data(), &mut gb, m, k, n);
            accumulate(grads, *a, Tensor::from_parts(x.shape().to_vec(), ga));
            accumulate(grads, *b, Tensor::from_parts(y.shape().to_vec(), gb));
        }
        Op::BatchMatMul(a, b) => {
            let (x, y) = (v(a), v(b));
            let (bs, m, k) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let n = y.shape()[2];
            let mut ga = vec![0.0; bs * m * k];
            let mut gb = vec![0.0; bs * k * n];
            for i in 0..bs {
                let gi = &g.data()[i * m * n..(i + 1) * m * n];
                matmul_nt_into(gi, &y.data()[i * k * n..(i + 1) * k * n], &mut ga[i * m * k..(i + 1) * m * k], m, k, n);
                matmul_tn_into(&x.data()[i * m * k..(i + 1) * m * k], gi, &mut gb[i * k * n..(i + 1) * k * n], m, k, n);
            }
            accumulate(grads, *a, Tensor::from_parts(x.shape().to_vec(), ga));
            accumulate(grads, *b, Tensor::from_parts(y.shape().to_vec(), gb));
        }
        Op::Embedding { table, indices } => {
            let t = v(table);
            let d = t.shape()[1];
            let mut gt = vec![0.0; t.numel()];
            for (r, &i) in indices.iter().enumerate() {
                for j in 0..d {
                    gt[i * d + j] += g.data()[r * d + j];
                }
            }
            accumulate(grads, *table, Tensor::from_parts(t.shape().to_vec(), gt));
        }
        Op::Pick { src, indices } => {
            let x = v(src);
            let w = x.last_dim();
            let mut gx = vec![0.0; x.numel()];
            for (r, &i) in indices.iter().enumerate() {
                gx[r * w + i] = g.data()[r];
            }
            accumulate(grads, *src, Tensor::from_parts(x.shape().to_vec(), gx));
        }
        Op::Concat { parts, axis } => {
            let shape = out.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let mut chunks: Vec<Vec<f64>> = parts.iter().map(|p| Vec::with_capacity(v(p).numel())).collect();
            let mut offset = 0;
            for _ in 0..outer {
                for (pi, p) in parts.iter().enumerate() {
                    let len = v(p).shape()[*axis] * inner;
                    chunks[pi].extend_from_slice(&g.data()[offset..offset + len]);
                    offset += len;
                }
            }
            for (p, data) in parts.iter().zip(chunks) {
                accumulate(grads, *p, Tensor::from_parts(v(p).shape().to_vec(), data));
            }
        }
        Op::Slice { src, axis, start, end } => {
            let x = v(src);
            let outer: usize = x.shape()[..*axis].iter().product();
            let inner: usize = x.shape()[axis + 1..].iter().product();
            let full = x.shape()[*axis] * inner;
            let len = (end - start) * inner;
            let mut gx = vec![0.0; x.numel()];
            for o in 0..outer {
                gx[o * full + start * inner..o * full + end * inner]
                    .copy_from_slice(&g.data()[o * len..(o + 1) * len]);
            }
            accumulate(grads, *src, Tensor::from_parts(x.shape().to_vec(), gx));
        }
        Op::Reshape(a) => accumulate(grads, *a, g.clone().with_shape(v(a).shape().to_vec())),
        Op::Permute(a, perm) => {
            let x = v(a);
            let map = permute_index_map(x.shape(), perm);
            let mut gx = vec![0.0; x.numel()];
            for (o, &i) in map.iter().enumerate() {
                gx[i] = g.data()[o];
            }
            accumulate(grads, *a, Tensor::from_parts(x.shape().to_vec(), gx));
        }
        Op::Sum(a) => accumulate(grads, *a, Tensor::full(v(a).shape().to_vec(), g.item())),
        Op::Mean(a) => {
            let x = v(a);
            accumulate(grads, *a, Tensor::full(x.shape().to_vec(), g.item() / x.numel() as f64));
        }
        Op::SumLast(a) => {
            let x = v(a);
            let w = x.last_dim();
            let data = (0..x.numel()).map(|i| g.data()[i / w]).collect();
            accumulate(grads, *a, Tensor::from_parts(x.shape().to_vec(), data));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval1(e: &Expr, name: &str, t: &Tensor) -> Tensor {
        let mut b = Bindings::new();
        b.bind(name, t);
        e.evaluate(&b).unwrap()
    }

    #[test]
    fn elementwise_product() {
        let mut e = Expr::new();
        let a = e.leaf("a", &[1]).unwrap();
        let b = e.leaf("b", &[1]).unwrap();
        e.mul(a, b).unwrap();
        let (ta, tb) = (Tensor::scalar(2.0), Tensor::scalar(3.0));
        let mut bind = Bindings::new();
        bind.bind("a", &ta).bind("b", &tb);
        assert_eq!(e.evaluate(&bind).unwrap().item(), 6.0);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut e = Expr::new();
        let x = e.leaf("x", &[2]).unwrap();
        e.softmax(x);
        let out = eval1(&e, "x", &Tensor::vector(vec![0.0, 0.0]));
        assert_eq!(out.data(), &[0.5, 0.5]);
    }

    #[test]
    fn matmul_matches_hand_arithmetic() {
        // [[1,2,3],[4,5,6]] · [[1,0,2,-1],[0,1,1,2],[3,-2,0,1]]
        let a = Tensor::new([2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::new([3, 4], vec![1., 0., 2., -1., 0., 1., 1., 2., 3., -2., 0., 1.]).unwrap();
        let mut e = Expr::new();
        let va = e.leaf("a", &[2, 3]).unwrap();
        let vb = e.leaf("b", &[3, 4]).unwrap();
        e.matmul(va, vb).unwrap();
        let mut bind = Bindings::new();
        bind.bind("a", &a).bind("b", &b);
        let out = e.evaluate(&bind).unwrap();
        assert_eq!(out.shape(), &[2, 4]);
        assert_eq!(out.data(), &[10., -4., 4., 6., 22., -7., 13., 12.]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut e = Expr::new();
        let x = e.leaf("x", &[2]).unwrap();
        let sq = e.square(x);
        e.sum(sq);
        let t = Tensor::vector(vec![1.0, 2.0]);
        let mut bind = Bindings::new();
        bind.bind("x", &t);
        let g = e.gradient(&bind, &["x"]).unwrap();
        assert_eq!(g["x"].data(), &[2.0, 4.0]);
    }

    #[test]
    fn relu_gradient_is_zero_for_negative_input() {
        let mut e = Expr::new();
        let x = e.leaf("x", &[1]).unwrap();
        let r = e.relu(x);
        e.sum(r);
        let t = Tensor::scalar(-1.0);
        let mut bind = Bindings::new();
        bind.bind("x", &t);
        assert_eq!(e.gradient(&bind, &["x"]).unwrap()["x"].item(), 0.0);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut e = Expr::new();
        let x = e.leaf("x", &[2]).unwrap();
        e.relu(x);
        let t = Tensor::vector(vec![1.0, 2.0]);
        let mut bind = Bindings::new();
        bind.bind("x", &t);
        assert!(matches!(e.gradient(&bind, &["x"]), Err(Error::Usage(_))));
    }

    #[test]
    fn shape_mismatch_names_the_node() {
        let mut e = Expr::new();
        let a = e.leaf("a", &[2, 3]).unwrap();
        let b = e.leaf("b", &[2, 3]).unwrap();
        match e.matmul(a, b) {
            Err(Error::Shape { node, op, .. }) => {
                assert_eq!(node, 2);
                assert_eq!(op, "matmul");
            }
            other => panic!("expected shape error, got {other:?}"),
        }
        // Binding a wrongly shaped tensor is caught at evaluation.
        let mut e = Expr::new();
        let x = e.leaf("x", &[3]).unwrap();
        e.relu(x);
        let t = Tensor::vector(vec![1.0, 2.0]);
        let mut bind = Bindings::new();
        bind.bind("x", &t);
        assert!(matches!(e.evaluate(&bind), Err(Error::Shape { node: 0, .. })));
    }

    #[test]
    fn permute_roundtrip() {
        let t = Tensor::new([2, 3, 4], (0..24).map(f64::from).collect()).unwrap();
        let mut e = Expr::new();
        let x = e.leaf("x", &[2, 3, 4]).unwrap();
        let p = e.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(e.shape(p), &[4, 2, 3]);
        e.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(eval1(&e, "x", &t), t);
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let t = Tensor::new([2, 3, 2], (0..12).map(f64::from).collect()).unwrap();
        let mut e = Expr::new();
        let x = e.leaf("x", &[2, 3, 2]).unwrap();
        let a = e.slice(x, 1, 0, 1).unwrap();
        let b = e.slice(x, 1, 1, 3).unwrap();
        e.concat(&[a, b], 1).unwrap();
        assert_eq!(eval1(&e, "x", &t), t);
    }
}
