//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] evaluates primitives eagerly. When recording, every primitive
//! application is appended as a record holding its inputs and output, so
//! [`Tape::backward`] can replay the records in reverse. Named leaves are
//! registered with [`Tape::leaf`]; their gradients come back in a
//! [`GradientMap`].

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{NodeId, Shape, Tensor};

/// Primitive operation kinds.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    /// Elementwise sum of two equal-shaped tensors.
    Add,
    /// Elementwise difference.
    Sub,
    /// Elementwise (Hadamard) product.
    Mul,
    /// Multiplication by a constant.
    Scale(f64),
    Tanh,
    Sigmoid,
    Relu,
    /// Softmax of a vector, computed with max subtraction.
    Softmax,
    /// Natural log of `max(x, floor)`; NaN passes through.
    Log {
        floor: f64,
    },
    /// `W x` for a matrix `W` and vector `x`.
    MatVec,
    /// `xᵀ W` for a vector `x` and matrix `W`.
    VecMat,
    /// Inner product of two vectors, giving a scalar.
    Dot,
    /// Concatenation of scalars and vectors into one vector.
    Concat,
    /// Contiguous sub-vector.
    Slice {
        start: usize,
        len: usize,
    },
    /// `Σ_i w_i v_i`; the first input is the weight vector, the rest the vectors.
    WeightedSum,
    /// One row of a matrix.
    RowSelect(usize),
    /// One element of a vector, as a scalar.
    Pick(usize),
    /// Sum of all entries, as a scalar.
    Sum,
    /// Mean of one or more scalars.
    Mean,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale(_) => "scale",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Relu => "relu",
            OpKind::Softmax => "softmax",
            OpKind::Log { .. } => "log",
            OpKind::MatVec => "matvec",
            OpKind::VecMat => "vecmat",
            OpKind::Dot => "dot",
            OpKind::Concat => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::WeightedSum => "weighted_sum",
            OpKind::RowSelect(_) => "row",
            OpKind::Pick(_) => "pick",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OpKind::Scale(s) => write!(f, "scale:{s}"),
            OpKind::Log { floor } => write!(f, "log:{floor}"),
            OpKind::Slice { start, len } => write!(f, "slice:{start}:{len}"),
            OpKind::RowSelect(r) => write!(f, "row:{r}"),
            OpKind::Pick(i) => write!(f, "pick:{i}"),
            other => f.write_str(other.name()),
        }
    }
}

/// Parses the textual form produced by `Display`, e.g. `tanh`, `scale:0.5`, `slice:2:3`.
impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<OpKind> {
        let mut parts = s.split(':');
        let name = parts.next().unwrap_or_default();
        let args: Vec<&str> = parts.collect();
        let bad = || Error::usage(format!("malformed operation kind '{s}'"));
        let float =
            |i: usize| -> Result<f64> { args.get(i).and_then(|a| a.parse().ok()).ok_or_else(bad) };
        let index = |i: usize| -> Result<usize> {
            args.get(i).and_then(|a| a.parse().ok()).ok_or_else(bad)
        };
        let kind = match name {
            "add" => OpKind::Add,
            "sub" => OpKind::Sub,
            "mul" => OpKind::Mul,
            "scale" => OpKind::Scale(float(0)?),
            "tanh" => OpKind::Tanh,
            "sigmoid" => OpKind::Sigmoid,
            "relu" => OpKind::Relu,
            "softmax" => OpKind::Softmax,
            "log" => OpKind::Log {
                floor: if args.is_empty() { 0.0 } else { float(0)? },
            },
            "matvec" => OpKind::MatVec,
            "vecmat" => OpKind::VecMat,
            "dot" => OpKind::Dot,
            "concat" => OpKind::Concat,
            "slice" => OpKind::Slice {
                start: index(0)?,
                len: index(1)?,
            },
            "weighted_sum" => OpKind::WeightedSum,
            "row" => OpKind::RowSelect(index(0)?),
            "pick" => OpKind::Pick(index(0)?),
            "sum" => OpKind::Sum,
            "mean" => OpKind::Mean,
            _ => return Err(Error::usage(format!("unknown operation kind '{name}'"))),
        };
        Ok(kind)
    }
}

#[derive(Debug)]
enum Node {
    Leaf { name: String, shape: Shape },
    Op(Record),
}

#[derive(Debug)]
struct Record {
    kind: OpKind,
    inputs: Vec<Tensor>,
    output: Tensor,
}

/// Recorded computation for one forward pass.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    /// A recording tape.
    pub fn new() -> Tape {
        Tape {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape that evaluates primitives without recording them.
    pub fn detached() -> Tape {
        Tape {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of recorded nodes (leaves and operations).
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers `value` as a named differentiable leaf. On a detached tape
    /// the value is returned unchanged.
    pub fn leaf(&mut self, name: impl Into<String>, value: Tensor) -> Result<Tensor> {
        if !self.recording {
            return Ok(value.detach());
        }
        let name = name.into();
        if self.leaf_names().any(|n| n == name) {
            return Err(Error::usage(format!("leaf '{name}' registered twice")));
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node::Leaf {
            name,
            shape: value.shape(),
        });
        Ok(value.detach().with_node(id))
    }

    fn leaf_names(&self) -> impl Iterator<Item = &str> {
        self.nodes.iter().filter_map(|n| match n {
            Node::Leaf { name, .. } => Some(name.as_str()),
            Node::Op(_) => None,
        })
    }

    /// Applies one primitive. Records it when the tape is recording.
    pub fn apply(&mut self, kind: OpKind, inputs: &[&Tensor]) -> Result<Tensor> {
        if let Some(bad) = inputs
            .iter()
            .filter_map(|t| t.node())
            .find(|id| id.0 >= self.nodes.len())
        {
            return Err(Error::usage(format!(
                "node {} does not belong to this tape",
                bad.0
            )));
        }
        let output = forward(&kind, inputs)?;
        if !self.recording {
            return Ok(output);
        }
        let id = NodeId(self.nodes.len());
        let output = output.with_node(id);
        self.nodes.push(Node::Op(Record {
            kind,
            inputs: inputs.iter().map(|t| (*t).clone()).collect(),
            output: output.clone(),
        }));
        Ok(output)
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: &Tensor, factor: f64) -> Result<Tensor> {
        self.apply(OpKind::Scale(factor), &[a])
    }

    pub fn tanh(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(OpKind::Tanh, &[a])
    }

    pub fn sigmoid(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(OpKind::Sigmoid, &[a])
    }

    pub fn relu(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(OpKind::Relu, &[a])
    }

    pub fn softmax(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(OpKind::Softmax, &[a])
    }

    pub fn log(&mut self, a: &Tensor, floor: f64) -> Result<Tensor> {
        self.apply(OpKind::Log { floor }, &[a])
    }

    pub fn matvec(&mut self, m: &Tensor, x: &Tensor) -> Result<Tensor> {
        self.apply(OpKind::MatVec, &[m, x])
    }

    pub fn vecmat(&mut self, x: &Tensor, m: &Tensor) -> Result<Tensor> {
        self.apply(OpKind::VecMat, &[x, m])
    }

    pub fn dot(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(OpKind::Dot, &[a, b])
    }

    pub fn concat(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        self.apply(OpKind::Concat, parts)
    }

    pub fn slice(&mut self, a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        self.apply(OpKind::Slice { start, len }, &[a])
    }

    pub fn weighted_sum(&mut self, weights: &Tensor, vectors: &[&Tensor]) -> Result<Tensor> {
        let mut inputs = Vec::with_capacity(vectors.len() + 1);
        inputs.push(weights);
        inputs.extend_from_slice(vectors);
        self.apply(OpKind::WeightedSum, &inputs)
    }

    pub fn row(&mut self, m: &Tensor, r: usize) -> Result<Tensor> {
        self.apply(OpKind::RowSelect(r), &[m])
    }

    pub fn pick(&mut self, a: &Tensor, i: usize) -> Result<Tensor> {
        self.apply(OpKind::Pick(i), &[a])
    }

    pub fn sum(&mut self, a: &Tensor) -> Result<Tensor> {
        self.apply(OpKind::Sum, &[a])
    }

    pub fn mean(&mut self, scalars: &[&Tensor]) -> Result<Tensor> {
        self.apply(OpKind::Mean, scalars)
    }

    /// `W x + b`.
    pub fn affine(&mut self, w: &Tensor, x: &Tensor, b: &Tensor) -> Result<Tensor> {
        let wx = self.matvec(w, x)?;
        self.add(&wx, b)
    }

    /// Gradients of the scalar `loss` with respect to every registered leaf.
    /// Leaves that do not influence `loss` receive zero tensors.
    pub fn backward(&self, loss: &Tensor) -> Result<GradientMap> {
        if loss.shape() != Shape::Scalar {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {}",
                loss.shape()
            )));
        }
        let root = loss
            .node()
            .filter(|id| id.0 < self.nodes.len())
            .ok_or_else(|| Error::usage("loss was not recorded on this tape"))?;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let Node::Op(record) = &self.nodes[idx] else {
                continue;
            };
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            backprop(record, &upstream, &mut grads);
            grads[idx] = Some(upstream);
        }

        let mut map = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Node::Leaf { name, shape } = node {
                let grad = match grads.get_mut(idx).and_then(Option::take) {
                    Some(values) => Tensor::from_parts(*shape, values),
                    None => Tensor::zeros(*shape),
                };
                map.insert(name.clone(), grad);
            }
        }
        Ok(GradientMap(map))
    }
}

/// Gradients keyed by leaf name; each has the shape of its leaf.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientMap(BTreeMap<String, Tensor>);

impl GradientMap {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }
}

fn expect_arity(kind: &OpKind, inputs: &[&Tensor], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(Error::usage(format!(
            "{} takes {n} input(s), got {}",
            kind.name(),
            inputs.len()
        )));
    }
    Ok(())
}

fn vector_len(op: &'static str, t: &Tensor) -> Result<usize> {
    match t.shape() {
        Shape::Vector(n) => Ok(n),
        other => Err(Error::dim(op, other, Shape::Vector(other.len()))),
    }
}

fn map_unary(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(t.shape(), t.values().iter().map(|&v| f(v)).collect())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_values(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn forward(kind: &OpKind, inputs: &[&Tensor]) -> Result<Tensor> {
    let name = kind.name();
    match kind {
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            expect_arity(kind, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(Error::dim(name, a.shape(), b.shape()));
            }
            let f: fn(f64, f64) -> f64 = match kind {
                OpKind::Add => |x, y| x + y,
                OpKind::Sub => |x, y| x - y,
                _ => |x, y| x * y,
            };
            let data = a
                .values()
                .iter()
                .zip(b.values())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Ok(Tensor::from_parts(a.shape(), data))
        }
        OpKind::Scale(s) => {
            expect_arity(kind, inputs, 1)?;
            Ok(map_unary(inputs[0], |v| v * s))
        }
        OpKind::Tanh => {
            expect_arity(kind, inputs, 1)?;
            Ok(map_unary(inputs[0], f64::tanh))
        }
        OpKind::Sigmoid => {
            expect_arity(kind, inputs, 1)?;
            Ok(map_unary(inputs[0], sigmoid))
        }
        OpKind::Relu => {
            expect_arity(kind, inputs, 1)?;
            Ok(map_unary(inputs[0], |v| if v > 0.0 { v } else { 0.0 }))
        }
        OpKind::Log { floor } => {
            expect_arity(kind, inputs, 1)?;
            // `f64::max` would swallow NaN, so the floor only applies to ordered values
            Ok(map_unary(inputs[0], |v| {
                if v < *floor {
                    floor.ln()
                } else {
                    v.ln()
                }
            }))
        }
        OpKind::Softmax => {
            expect_arity(kind, inputs, 1)?;
            let n = vector_len(name, inputs[0])?;
            if n == 0 {
                return Err(Error::usage("softmax of an empty vector"));
            }
            Ok(Tensor::from_parts(
                Shape::Vector(n),
                softmax_values(inputs[0].values()),
            ))
        }
        OpKind::MatVec => {
            expect_arity(kind, inputs, 2)?;
            let (m, x) = (inputs[0], inputs[1]);
            let Shape::Matrix(rows, cols) = m.shape() else {
                return Err(Error::dim(name, m.shape(), x.shape()));
            };
            if x.shape() != Shape::Vector(cols) {
                return Err(Error::dim(name, m.shape(), x.shape()));
            }
            let xv = x.values();
            let data = m
                .values()
                .chunks_exact(cols.max(1))
                .take(rows)
                .map(|row| row.iter().zip(xv).map(|(w, v)| w * v).sum())
                .collect::<Vec<f64>>();
            let data = if cols == 0 { vec![0.0; rows] } else { data };
            Ok(Tensor::from_parts(Shape::Vector(rows), data))
        }
        OpKind::VecMat => {
            expect_arity(kind, inputs, 2)?;
            let (x, m) = (inputs[0], inputs[1]);
            let Shape::Matrix(rows, cols) = m.shape() else {
                return Err(Error::dim(name, x.shape(), m.shape()));
            };
            if x.shape() != Shape::Vector(rows) {
                return Err(Error::dim(name, x.shape(), m.shape()));
            }
            let mut out = vec![0.0; cols];
            for (i, &xi) in x.values().iter().enumerate() {
                let row = &m.values()[i * cols..(i + 1) * cols];
                for (o, w) in out.iter_mut().zip(row) {
                    *o += xi * w;
                }
            }
            Ok(Tensor::from_parts(Shape::Vector(cols), out))
        }
        OpKind::Dot => {
            expect_arity(kind, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            vector_len(name, a)?;
            if a.shape() != b.shape() {
                return Err(Error::dim(name, a.shape(), b.shape()));
            }
            let d = a.values().iter().zip(b.values()).map(|(x, y)| x * y).sum();
            Ok(Tensor::scalar(d))
        }
        OpKind::Concat => {
            if inputs.is_empty() {
                return Err(Error::usage("concat needs at least one input"));
            }
            let mut data = Vec::new();
            for t in inputs {
                if t.shape().rank() > 1 {
                    return Err(Error::dim(name, t.shape(), Shape::Vector(t.len())));
                }
                data.extend_from_slice(t.values());
            }
            Ok(Tensor::from_parts(Shape::Vector(data.len()), data))
        }
        OpKind::Slice { start, len } => {
            expect_arity(kind, inputs, 1)?;
            let n = vector_len(name, inputs[0])?;
            if start + len > n {
                return Err(Error::dim(
                    name,
                    inputs[0].shape(),
                    Shape::Vector(start + len),
                ));
            }
            Ok(Tensor::from_parts(
                Shape::Vector(*len),
                inputs[0].values()[*start..start + len].to_vec(),
            ))
        }
        OpKind::WeightedSum => {
            let Some((weights, vectors)) = inputs.split_first() else {
                return Err(Error::usage("weighted_sum needs a weight vector"));
            };
            let k = vector_len(name, weights)?;
            if k != vectors.len() || k == 0 {
                return Err(Error::dim(
                    name,
                    weights.shape(),
                    Shape::Vector(vectors.len()),
                ));
            }
            let shape = vectors[0].shape();
            vector_len(name, vectors[0])?;
            let mut out = vec![0.0; shape.len()];
            for (w, v) in weights.values().iter().zip(vectors) {
                if v.shape() != shape {
                    return Err(Error::dim(name, shape, v.shape()));
                }
                for (o, x) in out.iter_mut().zip(v.values()) {
                    *o += w * x;
                }
            }
            Ok(Tensor::from_parts(shape, out))
        }
        OpKind::RowSelect(r) => {
            expect_arity(kind, inputs, 1)?;
            let m = inputs[0];
            let Shape::Matrix(rows, cols) = m.shape() else {
                return Err(Error::dim(name, m.shape(), Shape::Matrix(r + 1, 0)));
            };
            if *r >= rows {
                return Err(Error::usage(format!(
                    "row {r} out of range for {}",
                    m.shape()
                )));
            }
            Ok(Tensor::from_parts(Shape::Vector(cols), m.row(*r).to_vec()))
        }
        OpKind::Pick(i) => {
            expect_arity(kind, inputs, 1)?;
            let n = vector_len(name, inputs[0])?;
            if *i >= n {
                return Err(Error::usage(format!(
                    "index {i} out of range for {}",
                    inputs[0].shape()
                )));
            }
            Ok(Tensor::scalar(inputs[0].values()[*i]))
        }
        OpKind::Sum => {
            expect_arity(kind, inputs, 1)?;
            Ok(Tensor::scalar(inputs[0].values().iter().sum()))
        }
        OpKind::Mean => {
            if inputs.is_empty() {
                return Err(Error::usage("mean needs at least one input"));
            }
            let mut total = 0.0;
            for t in inputs {
                if t.shape() != Shape::Scalar {
                    return Err(Error::dim(name, t.shape(), Shape::Scalar));
                }
                total += t.values()[0];
            }
            Ok(Tensor::scalar(total / inputs.len() as f64))
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], input: &Tensor, f: impl FnOnce(&mut [f64])) {
    let Some(id) = input.node() else {
        return;
    };
    let slot = grads[id.0].get_or_insert_with(|| vec![0.0; input.len()]);
    f(slot);
}

fn backprop(record: &Record, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let inputs = &record.inputs;
    let y = record.output.values();
    match &record.kind {
        OpKind::Add => {
            for input in inputs {
                accumulate(grads, input, |acc| axpy(acc, 1.0, g));
            }
        }
        OpKind::Sub => {
            accumulate(grads, &inputs[0], |acc| axpy(acc, 1.0, g));
            accumulate(grads, &inputs[1], |acc| axpy(acc, -1.0, g));
        }
        OpKind::Mul => {
            let (a, b) = (&inputs[0], &inputs[1]);
            accumulate(grads, a, |acc| {
                for ((o, gi), bi) in acc.iter_mut().zip(g).zip(b.values()) {
                    *o += gi * bi;
                }
            });
            accumulate(grads, b, |acc| {
                for ((o, gi), ai) in acc.iter_mut().zip(g).zip(a.values()) {
                    *o += gi * ai;
                }
            });
        }
        OpKind::Scale(s) => accumulate(grads, &inputs[0], |acc| axpy(acc, *s, g)),
        OpKind::Tanh => accumulate(grads, &inputs[0], |acc| {
            for ((o, gi), yi) in acc.iter_mut().zip(g).zip(y) {
                *o += gi * (1.0 - yi * yi);
            }
        }),
        OpKind::Sigmoid => accumulate(grads, &inputs[0], |acc| {
            for ((o, gi), yi) in acc.iter_mut().zip(g).zip(y) {
                *o += gi * yi * (1.0 - yi);
            }
        }),
        OpKind::Relu => accumulate(grads, &inputs[0], |acc| {
            for ((o, gi), xi) in acc.iter_mut().zip(g).zip(inputs[0].values()) {
                if *xi > 0.0 {
                    *o += gi;
                }
            }
        }),
        OpKind::Log { floor } => accumulate(grads, &inputs[0], |acc| {
            for ((o, gi), xi) in acc.iter_mut().zip(g).zip(inputs[0].values()) {
                if *xi > *floor {
                    *o += gi / xi;
                }
            }
        }),
        OpKind::Softmax => accumulate(grads, &inputs[0], |acc| {
            let gy: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
            for ((o, gi), yi) in acc.iter_mut().zip(g).zip(y) {
                *o += yi * (gi - gy);
            }
        }),
        OpKind::MatVec => {
            let (m, x) = (&inputs[0], &inputs[1]);
            let cols = x.len();
            accumulate(grads, m, |acc| {
                for (row, gi) in acc.chunks_exact_mut(cols.max(1)).zip(g) {
                    axpy(row, *gi, x.values());
                }
            });
            accumulate(grads, x, |acc| {
                for (row, gi) in m.values().chunks_exact(cols.max(1)).zip(g) {
                    axpy(acc, *gi, row);
                }
            });
        }
        OpKind::VecMat => {
            let (x, m) = (&inputs[0], &inputs[1]);
            let cols = g.len();
            accumulate(grads, x, |acc| {
                for (o, row) in acc.iter_mut().zip(m.values().chunks_exact(cols.max(1))) {
                    *o += row.iter().zip(g).map(|(w, gj)| w * gj).sum::<f64>();
                }
            });
            accumulate(grads, m, |acc| {
                for (row, xi) in acc.chunks_exact_mut(cols.max(1)).zip(x.values()) {
                    axpy(row, *xi, g);
                }
            });
        }
        OpKind::Dot => {
            let (a, b) = (&inputs[0], &inputs[1]);
            accumulate(grads, a, |acc| axpy(acc, g[0], b.values()));
            accumulate(grads, b, |acc| axpy(acc, g[0], a.values()));
        }
        OpKind::Concat => {
            let mut offset = 0;
            for input in inputs {
                let n = input.len();
                accumulate(grads, input, |acc| axpy(acc, 1.0, &g[offset..offset + n]));
                offset += n;
            }
        }
        OpKind::Slice { start, len } => accumulate(grads, &inputs[0], |acc| {
            axpy(&mut acc[*start..start + len], 1.0, g);
        }),
        OpKind::WeightedSum => {
            let (weights, vectors) = inputs.split_first().expect("checked in forward");
            accumulate(grads, weights, |acc| {
                for (o, v) in acc.iter_mut().zip(vectors) {
                    *o += v.values().iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                }
            });
            for (w, v) in weights.values().iter().zip(vectors) {
                accumulate(grads, v, |acc| axpy(acc, *w, g));
            }
        }
        OpKind::RowSelect(r) => {
            let cols = g.len();
            accumulate(grads, &inputs[0], |acc| {
                axpy(&mut acc[r * cols..(r + 1) * cols], 1.0, g);
            });
        }
        OpKind::Pick(i) => accumulate(grads, &inputs[0], |acc| acc[*i] += g[0]),
        OpKind::Sum => accumulate(grads, &inputs[0], |acc| {
            for o in acc.iter_mut() {
                *o += g[0];
            }
        }),
        OpKind::Mean => {
            let share = g[0] / inputs.len() as f64;
            for input in inputs {
                accumulate(grads, input, |acc| acc[0] += share);
            }
        }
    }
}

fn axpy(acc: &mut [f64], alpha: f64, x: &[f64]) {
    for (o, v) in acc.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest relative error over every checked entry.
    pub max_rel_error: f64,
    /// Largest relative error per named parameter.
    pub per_param: BTreeMap<String, f64>,
}

/// Compares the tape's analytic gradient of `f` with central finite
/// differences for every entry of every parameter.
///
/// `f` receives a tape and the parameters (as leaves on a recording tape, as
/// constants on a detached one) and must return a scalar. The relative error
/// of one entry is `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn grad_check<F>(f: F, params: &[(String, Tensor)], epsilon: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Tensor]) -> Result<Tensor>,
{
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::usage(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }

    let mut tape = Tape::new();
    let leaves = params
        .iter()
        .map(|(name, t)| tape.leaf(name.clone(), t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &leaves)?;
    check_finite_scalar(&loss)?;
    let analytic = tape.backward(&loss)?;

    let evaluate = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::detached();
        let out = f(&mut tape, values)?;
        check_finite_scalar(&out)?;
        out.item()
    };

    let mut current: Vec<Tensor> = params.iter().map(|(_, t)| t.detach()).collect();
    let mut per_param = BTreeMap::new();
    let mut max_rel_error: f64 = 0.0;
    for (p, (name, original)) in params.iter().enumerate() {
        let grad = analytic
            .get(name)
            .ok_or_else(|| Error::usage(format!("no gradient for '{name}'")))?;
        let mut worst: f64 = 0.0;
        for k in 0..original.len() {
            let base = original.values()[k];
            current[p].values_mut()[k] = base + epsilon;
            let plus = evaluate(&current)?;
            current[p].values_mut()[k] = base - epsilon;
            let minus = evaluate(&current)?;
            current[p].values_mut()[k] = base;

            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = grad.values()[k];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        max_rel_error = max_rel_error.max(worst);
        per_param.insert(name.clone(), worst);
    }
    Ok(GradCheckReport {
        max_rel_error,
        per_param,
    })
}

fn check_finite_scalar(t: &Tensor) -> Result<()> {
    if t.shape() != Shape::Scalar {
        return Err(Error::usage(format!(
            "checked function must return a scalar, got {}",
            t.shape()
        )));
    }
    if !t.is_finite() {
        return Err(Error::Numerical(format!(
            "checked function returned {}",
            t.values()[0]
        )));
    }
    Ok(())
}
