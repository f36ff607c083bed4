//! Static computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only, topologically ordered list of primitive
//! nodes. Leaves are named inputs (data or parameters) and baked-in
//! constants; interior nodes are drawn from a fixed primitive set:
//! add, multiply, matrix-multiply, tanh, relu, square, exp, ln, sum, mean,
//! concatenate, slice, broadcast. Anything else (negation, clipping,
//! element-wise min, row sums) is composed from those primitives by the
//! builder helpers.
//!
//! Evaluation is split into [`Graph::forward`], which caches every node's
//! value, and [`Graph::backward`], which walks the cache in reverse and
//! accumulates vector-Jacobian products. Graphs are immutable once built
//! and safe to evaluate concurrently; each evaluation owns its buffers.

use std::collections::BTreeMap;

use crate::scalar::Real;
use crate::tensor::dense::{numel, Tensor, TensorError};

/// Handle to a node within one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Input(String),
    Constant(Tensor<T>),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Square(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Concat(NodeId, NodeId, usize),
    Slice {
        src: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    },
    Broadcast(NodeId),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Constant(_) => "constant",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::MatMul(..) => "matmul",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Square(_) => "square",
            Op::Exp(_) => "exp",
            Op::Ln(_) => "ln",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Broadcast(_) => "broadcast",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    shape: Vec<usize>,
}

/// Named input bindings for one forward pass. Values are borrowed; the
/// evaluation clones only what it caches.
pub type Bindings<'a, T> = BTreeMap<String, &'a Tensor<T>>;

/// Cached forward values for every node of one graph.
#[derive(Debug)]
pub struct Evaluation<T> {
    values: Vec<Tensor<T>>,
}

impl<T: Real> Evaluation<T> {
    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.values[id.0]
    }
}

/// Per-node gradients produced by a backward pass.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient w.r.t. a node; zero tensor if the node does not influence
    /// the differentiated output.
    pub fn of(&self, id: NodeId, shape: &[usize]) -> Tensor<T> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }

    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    inputs: BTreeMap<String, NodeId>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            inputs: BTreeMap::new(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn shape_of(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn input_id(&self, name: &str) -> Option<NodeId> {
        self.inputs.get(name).copied()
    }

    fn push(&mut self, op: Op<T>, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, shape });
        NodeId(self.nodes.len() - 1)
    }

    fn mismatch(&self, detail: String) -> TensorError {
        TensorError::ShapeMismatch {
            node: self.nodes.len(),
            detail,
        }
    }

    // ---- leaves ------------------------------------------------------

    /// Declare a named input (data or parameter) with a fixed shape.
    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId, TensorError> {
        if self.inputs.contains_key(name) {
            return Err(self.mismatch(format!("duplicate input name `{name}`")));
        }
        let id = self.push(Op::Input(name.to_string()), shape.to_vec());
        self.inputs.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Constant(value), shape)
    }

    pub fn constant_scalar(&mut self, value: T) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    // ---- primitives ---------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(self.mismatch(format!(
                "add operands {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::Add(a, b), shape))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(self.mismatch(format!(
                "mul operands {:?} vs {:?}",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::Mul(a, b), shape))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => {
                let shape = vec![*m, *n];
                Ok(self.push(Op::MatMul(a, b), shape))
            }
            _ => Err(self.mismatch(format!("matmul operands {sa:?} x {sb:?}"))),
        }
    }

    fn unary(&mut self, op: impl FnOnce(NodeId) -> Op<T>, x: NodeId) -> NodeId {
        let shape = self.nodes[x.0].shape.clone();
        self.push(op(x), shape)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Tanh, x)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Relu, x)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Square, x)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Exp, x)
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        self.unary(Op::Ln, x)
    }

    /// Sum of all elements, producing a rank-0 scalar.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x), Vec::new())
    }

    /// Mean of all elements, producing a rank-0 scalar.
    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Mean(x), Vec::new())
    }

    /// Concatenate two rank-2 tensors along `axis`.
    pub fn concat(&mut self, a: NodeId, b: NodeId, axis: usize) -> Result<NodeId, TensorError> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        match (sa.as_slice(), sb.as_slice(), axis) {
            ([ra, ca], [rb, cb], 0) if ca == cb => {
                let shape = vec![ra + rb, *ca];
                Ok(self.push(Op::Concat(a, b, 0), shape))
            }
            ([ra, ca], [rb, cb], 1) if ra == rb => {
                let shape = vec![*ra, ca + cb];
                Ok(self.push(Op::Concat(a, b, 1), shape))
            }
            _ => Err(self.mismatch(format!("concat axis {axis} of {sa:?} and {sb:?}"))),
        }
    }

    /// Contiguous slice of a rank-2 tensor along `axis`.
    pub fn slice(
        &mut self,
        src: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<NodeId, TensorError> {
        let s = &self.nodes[src.0].shape;
        match (s.as_slice(), axis) {
            ([r, c], 0) if start + len <= *r => {
                let shape = vec![len, *c];
                Ok(self.push(Op::Slice { src, axis, start, len }, shape))
            }
            ([r, c], 1) if start + len <= *c => {
                let shape = vec![*r, len];
                Ok(self.push(Op::Slice { src, axis, start, len }, shape))
            }
            _ => Err(self.mismatch(format!(
                "slice axis {axis} [{start}, {start}+{len}) of {s:?}"
            ))),
        }
    }

    /// Broadcast a scalar to any shape, or replicate a single row `[1,n]`
    /// / column `[m,1]` across a rank-2 target.
    pub fn broadcast(&mut self, src: NodeId, shape: &[usize]) -> Result<NodeId, TensorError> {
        let s = self.nodes[src.0].shape.clone();
        let ok = match (s.as_slice(), shape) {
            ([], _) => true,
            (a, b) if a == b => true,
            ([1, n], [_, n2]) => n == n2,
            ([m, 1], [m2, _]) => m == m2,
            _ => false,
        };
        if !ok {
            return Err(self.mismatch(format!("broadcast {s:?} -> {shape:?}")));
        }
        Ok(self.push(Op::Broadcast(src), shape.to_vec()))
    }

    // ---- composed helpers ----------------------------------------------

    /// Multiply by a compile-time scalar constant.
    pub fn scale(&mut self, x: NodeId, c: T) -> Result<NodeId, TensorError> {
        let shape = self.nodes[x.0].shape.clone();
        let k = self.constant_scalar(c);
        let k = self.broadcast(k, &shape)?;
        self.mul(x, k)
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.scale(x, -T::one())
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let nb = self.neg(b)?;
        self.add(a, nb)
    }

    /// Add a scalar constant element-wise.
    pub fn shift(&mut self, x: NodeId, c: T) -> Result<NodeId, TensorError> {
        let shape = self.nodes[x.0].shape.clone();
        let k = self.constant_scalar(c);
        let k = self.broadcast(k, &shape)?;
        self.add(x, k)
    }

    /// Element-wise minimum, composed as `min(a, b) = b - relu(b - a)`.
    pub fn min_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let d = self.sub(b, a)?;
        let r = self.relu(d);
        self.sub(b, r)
    }

    /// Clamp to a constant interval, composed from shifted relus:
    /// `clip(x) = lo + relu(x - lo) - relu(x - hi)`.
    pub fn clip(&mut self, x: NodeId, lo: T, hi: T) -> Result<NodeId, TensorError> {
        let a = self.shift(x, -lo)?;
        let a = self.relu(a);
        let b = self.shift(x, -hi)?;
        let b = self.relu(b);
        let d = self.sub(a, b)?;
        self.shift(d, lo)
    }

    /// Per-row sum of a `[m,n]` tensor as `[m,1]`, composed via a matmul
    /// with a constant ones column.
    pub fn row_sum(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let n = match self.nodes[x.0].shape.as_slice() {
            [_, n] => *n,
            s => return Err(self.mismatch(format!("row_sum of {s:?}"))),
        };
        let ones = self.constant(Tensor::ones(&[n, 1]));
        self.matmul(x, ones)
    }

    // ---- evaluation -----------------------------------------------------

    /// Evaluate every node given the named input bindings. Deterministic:
    /// the same graph and bindings always produce bitwise-identical values.
    pub fn forward(&self, bindings: &Bindings<'_, T>) -> Result<Evaluation<T>, TensorError> {
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let value = match &node.op {
                Op::Input(name) => {
                    let bound = *bindings
                        .get(name)
                        .ok_or_else(|| TensorError::MissingInput(name.clone()))?;
                    if bound.shape() != node.shape {
                        return Err(TensorError::InputShape {
                            name: name.clone(),
                            bound: bound.shape().to_vec(),
                            declared: node.shape.clone(),
                        });
                    }
                    bound.clone()
                }
                Op::Constant(t) => t.clone(),
                Op::Add(a, b) => values[a.0].zip_map(&values[b.0], |x, y| x + y),
                Op::Mul(a, b) => values[a.0].zip_map(&values[b.0], |x, y| x * y),
                Op::MatMul(a, b) => values[a.0].matmul(&values[b.0])?,
                Op::Tanh(x) => values[x.0].map(|v| v.tanh()),
                Op::Relu(x) => values[x.0].map(|v| if v > T::zero() { v } else { T::zero() }),
                Op::Square(x) => values[x.0].map(|v| v * v),
                Op::Exp(x) => values[x.0].map(|v| v.exp()),
                Op::Ln(x) => values[x.0].map(|v| v.ln()),
                Op::Sum(x) => Tensor::scalar(values[x.0].sum()),
                Op::Mean(x) => Tensor::scalar(values[x.0].mean()),
                Op::Concat(a, b, axis) => concat_values(&values[a.0], &values[b.0], *axis),
                Op::Slice { src, axis, start, len } => {
                    slice_values(&values[src.0], *axis, *start, *len)
                }
                Op::Broadcast(src) => broadcast_values(&values[src.0], &node.shape),
            };
            if !value.all_finite() {
                return Err(TensorError::NonFinite {
                    node: idx,
                    op: node.op.name().to_string(),
                });
            }
            values.push(value);
        }
        Ok(Evaluation { values })
    }

    /// Reverse pass seeded with ones on `output` (which must therefore be
    /// single-element); gradients accumulate additively across fan-out.
    pub fn backward(
        &self,
        eval: &Evaluation<T>,
        output: NodeId,
    ) -> Result<Gradients<T>, TensorError> {
        let out_shape = self.nodes[output.0].shape.clone();
        if numel(&out_shape) != 1 {
            return Err(TensorError::SeedShape {
                seed: vec![],
                output: out_shape,
            });
        }
        let seed = Tensor::ones(&out_shape);
        self.backward_seeded(eval, output, &seed)
    }

    /// Reverse pass with an explicit seed matching the output shape.
    pub fn backward_seeded(
        &self,
        eval: &Evaluation<T>,
        output: NodeId,
        seed: &Tensor<T>,
    ) -> Result<Gradients<T>, TensorError> {
        if eval.values.len() != self.nodes.len() {
            return Err(TensorError::StaleEvaluation {
                eval_nodes: eval.values.len(),
                graph_nodes: self.nodes.len(),
            });
        }
        if seed.shape() != self.nodes[output.0].shape {
            return Err(TensorError::SeedShape {
                seed: seed.shape().to_vec(),
                output: self.nodes[output.0].shape.clone(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed.clone());

        // Reverse topological sweep: a node's gradient is complete by the
        // time we reach it because all consumers have larger indices.
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].clone() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input(_) | Op::Constant(_) => continue,
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(&eval.values[b.0], |gv, bv| gv * bv);
                    let gb = g.zip_map(&eval.values[a.0], |gv, av| gv * av);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul(&eval.values[b.0].transpose())?;
                    let gb = eval.values[a.0].transpose().matmul(&g)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Tanh(x) => {
                    let y = &eval.values[idx];
                    let gx = g.zip_map(y, |gv, yv| gv * (T::one() - yv * yv));
                    accumulate(&mut grads, *x, gx);
                }
                Op::Relu(x) => {
                    let xin = &eval.values[x.0];
                    let gx = g.zip_map(xin, |gv, xv| if xv > T::zero() { gv } else { T::zero() });
                    accumulate(&mut grads, *x, gx);
                }
                Op::Square(x) => {
                    let two = T::cast(2.0);
                    let xin = &eval.values[x.0];
                    let gx = g.zip_map(xin, |gv, xv| gv * two * xv);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Exp(x) => {
                    let y = &eval.values[idx];
                    let gx = g.zip_map(y, |gv, yv| gv * yv);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Ln(x) => {
                    let xin = &eval.values[x.0];
                    let gx = g.zip_map(xin, |gv, xv| gv / xv);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sum(x) => {
                    let gx = Tensor::full(eval.values[x.0].shape(), g.item());
                    accumulate(&mut grads, *x, gx);
                }
                Op::Mean(x) => {
                    let n = T::from_usize(eval.values[x.0].len()).unwrap();
                    let gx = Tensor::full(eval.values[x.0].shape(), g.item() / n);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Concat(a, b, axis) => {
                    let split = match axis {
                        0 => eval.values[a.0].shape()[0],
                        _ => eval.values[a.0].shape()[1],
                    };
                    let total = match axis {
                        0 => g.shape()[0],
                        _ => g.shape()[1],
                    };
                    let ga = slice_values(&g, *axis, 0, split);
                    let gb = slice_values(&g, *axis, split, total - split);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Slice { src, axis, start, len } => {
                    let gx = unslice_values(&g, eval.values[src.0].shape(), *axis, *start, *len);
                    accumulate(&mut grads, *src, gx);
                }
                Op::Broadcast(src) => {
                    let gx = unbroadcast_values(&g, eval.values[src.0].shape());
                    accumulate(&mut grads, *src, gx);
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Gradient w.r.t. a named input; zero if the input does not influence
    /// the output.
    pub fn grad_of_input(
        &self,
        grads: &Gradients<T>,
        name: &str,
    ) -> Result<Tensor<T>, TensorError> {
        let id = self
            .input_id(name)
            .ok_or_else(|| TensorError::MissingInput(name.to_string()))?;
        Ok(grads.of(id, &self.nodes[id.0].shape))
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_scaled(&g, T::one()),
        slot @ None => *slot = Some(g),
    }
}

fn concat_values<T: Real>(a: &Tensor<T>, b: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (ra, ca) = (a.shape()[0], a.shape()[1]);
    let (rb, cb) = (b.shape()[0], b.shape()[1]);
    if axis == 0 {
        let mut data = Vec::with_capacity((ra + rb) * ca);
        data.extend_from_slice(a.data());
        data.extend_from_slice(b.data());
        Tensor::from_parts_unchecked(vec![ra + rb, ca], data)
    } else {
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            data.extend_from_slice(a.row(i));
            data.extend_from_slice(b.row(i));
        }
        Tensor::from_parts_unchecked(vec![ra, ca + cb], data)
    }
}

fn slice_values<T: Real>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Tensor<T> {
    let (r, c) = (x.shape()[0], x.shape()[1]);
    if axis == 0 {
        let data = x.data()[start * c..(start + len) * c].to_vec();
        Tensor::from_parts_unchecked(vec![len, c], data)
    } else {
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&x.row(i)[start..start + len]);
        }
        Tensor::from_parts_unchecked(vec![r, len], data)
    }
}

fn unslice_values<T: Real>(
    g: &Tensor<T>,
    src_shape: &[usize],
    axis: usize,
    start: usize,
    len: usize,
) -> Tensor<T> {
    let (r, c) = (src_shape[0], src_shape[1]);
    let mut out = Tensor::zeros(src_shape);
    if axis == 0 {
        out.data_mut()[start * c..(start + len) * c].copy_from_slice(g.data());
    } else {
        for i in 0..r {
            let row = &mut out.data_mut()[i * c + start..i * c + start + len];
            row.copy_from_slice(g.row(i));
        }
    }
    out
}

fn broadcast_values<T: Real>(src: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    if src.shape() == target {
        return src.clone();
    }
    if src.shape().is_empty() {
        return Tensor::full(target, src.item());
    }
    let (m, n) = (target[0], target[1]);
    let mut data = Vec::with_capacity(m * n);
    match src.shape() {
        [1, _] => {
            for _ in 0..m {
                data.extend_from_slice(src.data());
            }
        }
        [_, 1] => {
            for i in 0..m {
                let v = src.data()[i];
                data.extend(std::iter::repeat(v).take(n));
            }
        }
        s => panic!("unsupported broadcast source {s:?}"),
    }
    Tensor::from_parts_unchecked(vec![m, n], data)
}

fn unbroadcast_values<T: Real>(g: &Tensor<T>, src_shape: &[usize]) -> Tensor<T> {
    if g.shape() == src_shape {
        return g.clone();
    }
    if src_shape.is_empty() {
        return Tensor::scalar(g.sum());
    }
    let (m, n) = (g.shape()[0], g.shape()[1]);
    match src_shape {
        [1, _] => {
            let mut acc = vec![T::zero(); n];
            for i in 0..m {
                for (a, &v) in acc.iter_mut().zip(g.row(i)) {
                    *a += v;
                }
            }
            Tensor::from_parts_unchecked(vec![1, n], acc)
        }
        [_, 1] => {
            let mut acc = vec![T::zero(); m];
            for (i, a) in acc.iter_mut().enumerate() {
                *a = g.row(i).iter().copied().sum();
            }
            Tensor::from_parts_unchecked(vec![m, 1], acc)
        }
        s => panic!("unsupported unbroadcast target {s:?}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn bind<'a>(pairs: &[(&str, &'a Tensor<f64>)]) -> Bindings<'a, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn identity_graph_returns_input() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x", &[3]).unwrap();
        let v = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let eval = g.forward(&bind(&[("x", &v)])).unwrap();
        assert_eq!(eval.value(x).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let mut g = Graph::<f64>::new();
        let a = g.input("a", &[2, 2]).unwrap();
        let b = g.input("b", &[2, 1]).unwrap();
        let c = g.matmul(a, b).unwrap();
        let av = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bv = Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap();
        let eval = g.forward(&bind(&[("a", &av), ("b", &bv)])).unwrap();
        assert_eq!(eval.value(c).data(), &[3.0, 7.0]);
    }

    /// Series-expansion oracle for tanh, independent of the library call:
    /// Maclaurin series at x/4 (fast convergence), then the doubling
    /// identity tanh(2u) = 2 tanh(u) / (1 + tanh(u)^2) applied twice.
    fn tanh_series(x: f64) -> f64 {
        let u = x / 4.0;
        let u2 = u * u;
        let mut t = u
            * (1.0 - u2 / 3.0 + 2.0 * u2 * u2 / 15.0 - 17.0 * u2 * u2 * u2 / 315.0
                + 62.0 * u2 * u2 * u2 * u2 / 2835.0);
        for _ in 0..2 {
            t = 2.0 * t / (1.0 + t * t);
        }
        t
    }

    #[test]
    fn tanh_matches_series_expansion_oracle() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x", &[]).unwrap();
        let y = g.tanh(x);
        let v = Tensor::scalar(0.5);
        let eval = g.forward(&bind(&[("x", &v)])).unwrap();
        let got = eval.value(y).item();
        assert_abs_diff_eq!(got, 0.46211715726000974, epsilon = 1e-12);
        assert_abs_diff_eq!(got, tanh_series(0.5), epsilon = 1e-10);
    }

    #[test]
    fn forward_rejects_missing_and_misshaped_inputs() {
        let mut g = Graph::<f64>::new();
        let _ = g.input("x", &[2]).unwrap();
        assert!(matches!(
            g.forward(&Bindings::new()),
            Err(TensorError::MissingInput(_))
        ));
        let bad = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let err = g.forward(&bind(&[("x", &bad)])).unwrap_err();
        assert!(matches!(err, TensorError::InputShape { .. }));
    }

    #[test]
    fn forward_rejects_non_finite_intermediate() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x", &[]).unwrap();
        let _ = g.ln(x);
        let v = Tensor::scalar(-1.0);
        let err = g.forward(&bind(&[("x", &v)])).unwrap_err();
        match err {
            TensorError::NonFinite { op, .. } => assert_eq!(op, "ln"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn square_gradient_is_2x() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x", &[]).unwrap();
        let y = g.square(x);
        let v = Tensor::scalar(3.0);
        let eval = g.forward(&bind(&[("x", &v)])).unwrap();
        let grads = g.backward(&eval, y).unwrap();
        assert_abs_diff_eq!(g.grad_of_input(&grads, "x").unwrap().item(), 6.0);
    }

    #[test]
    fn tanh_gradient_at_zero_is_one() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x", &[]).unwrap();
        let y = g.tanh(x);
        let v = Tensor::scalar(0.0);
        let eval = g.forward(&bind(&[("x", &v)])).unwrap();
        let grads = g.backward(&eval, y).unwrap();
        assert_abs_diff_eq!(g.grad_of_input(&grads, "x").unwrap().item(), 1.0);
    }

    #[test]
    fn backward_rejects_evaluation_from_another_graph() {
        let mut g1 = Graph::<f64>::new();
        let x = g1.input("x", &[]).unwrap();
        let y = g1.square(x);
        let v = Tensor::scalar(1.0);
        let eval = g1.forward(&bind(&[("x", &v)])).unwrap();
        // Extending the graph invalidates the cached evaluation.
        let mut g2 = g1.clone();
        let z = g2.square(y);
        let err = g2.backward(&eval, z).unwrap_err();
        assert!(matches!(err, TensorError::StaleEvaluation { .. }));
    }

    #[test]
    fn fanout_gradients_accumulate() {
        // y = x*x + x*x = 2x^2, dy/dx = 4x
        let mut g = Graph::<f64>::new();
        let x = g.input("x", &[]).unwrap();
        let a = g.mul(x, x).unwrap();
        let b = g.mul(x, x).unwrap();
        let y = g.add(a, b).unwrap();
        let v = Tensor::scalar(2.0);
        let eval = g.forward(&bind(&[("x", &v)])).unwrap();
        let grads = g.backward(&eval, y).unwrap();
        assert_abs_diff_eq!(g.grad_of_input(&grads, "x").unwrap().item(), 8.0);
    }

    #[test]
    fn composed_min_and_clip_behave_pointwise() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x", &[4]).unwrap();
        let k = g.constant(Tensor::vector(vec![0.5, 0.5, 0.5, 0.5]));
        let m = g.min_elem(x, k).unwrap();
        let c = g.clip(x, 0.6, 1.4).unwrap();
        let v = Tensor::vector(vec![0.0, 0.5, 1.0, 2.0]);
        let eval = g.forward(&bind(&[("x", &v)])).unwrap();
        assert_eq!(eval.value(m).data(), &[0.0, 0.5, 0.5, 0.5]);
        assert_eq!(eval.value(c).data(), &[0.6, 0.6, 1.0, 1.4]);
    }

    #[test]
    fn row_sum_via_ones_matmul() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x", &[2, 3]).unwrap();
        let s = g.row_sum(x).unwrap();
        let v = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let eval = g.forward(&bind(&[("x", &v)])).unwrap();
        assert_eq!(eval.value(s).data(), &[6.0, 15.0]);
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x", &[2, 2]).unwrap();
        let h = g.tanh(x);
        let e = g.exp(h);
        let y = g.mean(e);
        let v = Tensor::matrix(2, 2, vec![0.3, -1.7, 2.9, 0.01]).unwrap();
        let inputs = bind(&[("x", &v)]);
        let a = g.forward(&inputs).unwrap();
        let b = g.forward(&inputs).unwrap();
        assert_eq!(a.value(y).data(), b.value(y).data());
    }
}
