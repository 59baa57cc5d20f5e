//! Tape-based reverse-mode automatic differentiation.
//!
//! Operations are evaluated eagerly and appended to a [`Tape`] together with
//! the values their local vector-Jacobian products need. [`Tape::vjp`] then
//! sweeps the tape once in reverse. Because parents always precede children,
//! the node order is a topological order and no sorting is needed.
//!
//! ```
//! use pcdde::autodiff::tape_forward;
//! use pcdde::tensor::Tensor;
//!
//! let w = Tensor::from_rows(&[vec![2.0]]).unwrap();
//! let (out, tape, y) = tape_forward(&[Tensor::scalar(3.0), w], |t, v| t.matmul(v[0], v[1])).unwrap();
//! assert_eq!(out.data(), &[6.0]);
//! let grads = tape.vjp(y, &Tensor::scalar(1.0)).unwrap();
//! assert_eq!(grads[0].data(), &[2.0]);
//! assert_eq!(grads[1].data(), &[3.0]);
//! ```

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    /// The `i`-th differentiable input.
    Input(usize),
    Constant,
    MatMul,
    Add,
    Scale(f64),
    Tanh,
    Relu,
    Concat,
    Slice { start: usize, len: usize },
}

#[derive(Clone, Debug)]
pub struct TapeNode {
    pub op: OpKind,
    pub parents: Vec<usize>,
    /// Forward value. Tanh and relu reuse it (or the parent's) in their VJPs.
    pub value: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<TapeNode>,
    inputs: Vec<usize>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn eval_matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    match (a.rank(), b.rank()) {
        (2, 1) => {
            if a.cols() != b.len() {
                return Err(mismatch("matmul", a, b));
            }
            let out = (0..a.rows())
                .map(|i| dot(a.row(i), b.data()))
                .collect::<Vec<_>>();
            Ok(Tensor::vector(out))
        }
        (1, 2) => {
            if a.len() != b.rows() {
                return Err(mismatch("matmul", a, b));
            }
            let mut out = vec![0.0; b.cols()];
            for (i, &ai) in a.data().iter().enumerate() {
                for (o, &bij) in out.iter_mut().zip(b.row(i)) {
                    *o += ai * bij;
                }
            }
            Ok(Tensor::vector(out))
        }
        (2, 2) => {
            if a.cols() != b.rows() {
                return Err(mismatch("matmul", a, b));
            }
            let (m, n) = (a.rows(), b.cols());
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for (k, &aik) in a.row(i).iter().enumerate() {
                    for (o, &bkj) in out[i * n..(i + 1) * n].iter_mut().zip(b.row(k)) {
                        *o += aik * bkj;
                    }
                }
            }
            Tensor::matrix(m, n, out)
        }
        _ => Err(mismatch("matmul", a, b)),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn eval_node(op: &OpKind, parents: &[&Tensor]) -> Result<Tensor> {
    match op {
        OpKind::Input(_) | OpKind::Constant => unreachable!("leaves carry their own value"),
        OpKind::MatMul => eval_matmul(parents[0], parents[1]),
        OpKind::Add => {
            let (a, b) = (parents[0], parents[1]);
            if a.shape() != b.shape() {
                return Err(mismatch("add", a, b));
            }
            let mut out = a.clone();
            out.add_scaled(b, 1.0)?;
            Ok(out)
        }
        OpKind::Scale(s) => Ok(parents[0].scaled(*s)),
        OpKind::Tanh => Ok(parents[0].map(f64::tanh)),
        OpKind::Relu => Ok(parents[0].map(|v| v.max(0.0))),
        OpKind::Concat => {
            let mut out = Vec::new();
            for p in parents {
                if p.rank() != 1 {
                    return Err(Error::ShapeMismatch {
                        op: "concat",
                        lhs: p.shape().to_vec(),
                        rhs: vec![],
                    });
                }
                out.extend_from_slice(p.data());
            }
            Ok(Tensor::vector(out))
        }
        OpKind::Slice { start, len } => {
            let a = parents[0];
            if a.rank() != 1 || start + len > a.len() {
                return Err(Error::ShapeMismatch {
                    op: "slice",
                    lhs: a.shape().to_vec(),
                    rhs: vec![*start, *len],
                });
            }
            Ok(Tensor::vector(a.data()[*start..start + len].to_vec()))
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

    pub fn nodes(&self) -> &[TapeNode] {
        &self.nodes
    }

    pub fn num_inputs(&self) -> usize {
        self.inputs.len()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: OpKind, parents: Vec<usize>, value: Tensor) -> Var {
        self.nodes.push(TapeNode { op, parents, value });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: OpKind, parents: Vec<usize>) -> Result<Var> {
        let value = {
            let vals: Vec<&Tensor> = parents.iter().map(|&p| &self.nodes[p].value).collect();
            eval_node(&op, &vals)?
        };
        Ok(self.push(op, parents, value))
    }

    /// Registers a differentiable input.
    pub fn input(&mut self, value: Tensor) -> Var {
        let slot = self.inputs.len();
        let v = self.push(OpKind::Input(slot), vec![], value);
        self.inputs.push(v.0);
        v
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(OpKind::Constant, vec![], value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::MatMul, vec![a.0, b.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::Add, vec![a.0, b.0])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.record(OpKind::Scale(s), vec![a.0])
            .expect("scale accepts every shape")
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.record(OpKind::Tanh, vec![a.0])
            .expect("tanh accepts every shape")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.record(OpKind::Relu, vec![a.0])
            .expect("relu accepts every shape")
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.record(OpKind::Concat, parts.iter().map(|v| v.0).collect())
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.record(OpKind::Slice { start, len }, vec![a.0])
    }

    /// `a + s * b`, recorded as a scale followed by an add.
    pub fn axpy(&mut self, a: Var, s: f64, b: Var) -> Result<Var> {
        let sb = self.scale(b, s);
        self.add(a, sb)
    }

    /// Re-evaluates every node from new input values, returning all node
    /// values in tape order. Constants keep their recorded values.
    pub fn replay(&self, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
        if inputs.len() != self.inputs.len() {
            return Err(Error::InvalidTensor(format!(
                "replay expects {} inputs, got {}",
                self.inputs.len(),
                inputs.len()
            )));
        }
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                OpKind::Input(slot) => {
                    let given = &inputs[*slot];
                    if given.shape() != node.value.shape() {
                        return Err(mismatch("replay input", given, &node.value));
                    }
                    given.clone()
                }
                OpKind::Constant => node.value.clone(),
                op => {
                    let parents: Vec<&Tensor> = node.parents.iter().map(|&p| &values[p]).collect();
                    eval_node(op, &parents)?
                }
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Pulls `cotangent` back from `output` to every input. The result holds
    /// one gradient per registered input, in registration order.
    pub fn vjp(&self, output: Var, cotangent: &Tensor) -> Result<Vec<Tensor>> {
        let out_val = &self.nodes[output.0].value;
        if out_val.shape() != cotangent.shape() {
            return Err(mismatch("vjp cotangent", out_val, cotangent));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        adj[output.0] = Some(cotangent.clone());

        for idx in (0..=output.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                OpKind::Input(_) | OpKind::Constant => {
                    adj[idx] = Some(g);
                    continue;
                }
                OpKind::MatMul => {
                    let a = &self.nodes[node.parents[0]].value;
                    let b = &self.nodes[node.parents[1]].value;
                    let (ga, gb) = matmul_vjp(a, b, &g);
                    accumulate(&mut adj, node.parents[0], ga);
                    accumulate(&mut adj, node.parents[1], gb);
                }
                OpKind::Add => {
                    accumulate(&mut adj, node.parents[0], g.clone());
                    accumulate(&mut adj, node.parents[1], g);
                }
                OpKind::Scale(s) => accumulate(&mut adj, node.parents[0], g.scaled(*s)),
                OpKind::Tanh => {
                    let mut ga = g;
                    for (gi, y) in ga.data_mut().iter_mut().zip(node.value.data()) {
                        *gi *= 1.0 - y * y;
                    }
                    accumulate(&mut adj, node.parents[0], ga);
                }
                OpKind::Relu => {
                    let x = &self.nodes[node.parents[0]].value;
                    let mut ga = g;
                    for (gi, xi) in ga.data_mut().iter_mut().zip(x.data()) {
                        if *xi <= 0.0 {
                            *gi = 0.0;
                        }
                    }
                    accumulate(&mut adj, node.parents[0], ga);
                }
                OpKind::Concat => {
                    let mut offset = 0;
                    for &p in &node.parents {
                        let n = self.nodes[p].value.len();
                        let part = Tensor::vector(g.data()[offset..offset + n].to_vec());
                        accumulate(&mut adj, p, part);
                        offset += n;
                    }
                }
                OpKind::Slice { start, len } => {
                    let parent = node.parents[0];
                    let mut ga = Tensor::zeros_like(&self.nodes[parent].value);
                    ga.data_mut()[*start..start + len].copy_from_slice(g.data());
                    accumulate(&mut adj, parent, ga);
                }
            }
        }

        Ok(self
            .inputs
            .iter()
            .map(|&i| {
                adj.get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros_like(&self.nodes[i].value))
            })
            .collect())
    }
}

fn accumulate(adj: &mut [Option<Tensor>], idx: usize, g: Tensor) {
    match &mut adj[idx] {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn outer(u: &[f64], v: &[f64]) -> Tensor {
    let data = u
        .iter()
        .flat_map(|&a| v.iter().map(move |&b| a * b))
        .collect();
    Tensor::matrix(u.len(), v.len(), data).expect("outer product shape")
}

fn transpose(m: &Tensor) -> Tensor {
    let (r, c) = (m.rows(), m.cols());
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = m.get(i, j);
        }
    }
    Tensor::matrix(c, r, data).expect("transpose shape")
}

fn matmul_vjp(a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    match (a.rank(), b.rank()) {
        // y = A b
        (2, 1) => {
            let ga = outer(g.data(), b.data());
            let gb = eval_matmul(g, a).expect("shape checked on forward");
            (ga, gb)
        }
        // y = aᵀ B
        (1, 2) => {
            let ga = eval_matmul(b, g).expect("shape checked on forward");
            let gb = outer(a.data(), g.data());
            (ga, gb)
        }
        _ => {
            let ga = eval_matmul(g, &transpose(b)).expect("shape checked on forward");
            let gb = eval_matmul(&transpose(a), g).expect("shape checked on forward");
            (ga, gb)
        }
    }
}

/// Builds a graph over `inputs` with `graph` and returns the output value,
/// the recorded tape, and the output handle.
pub fn tape_forward<F>(inputs: &[Tensor], graph: F) -> Result<(Tensor, Tape, Var)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = graph(&mut tape, &vars)?;
    Ok((tape.value(out).clone(), tape, out))
}

/// Central-difference gradient of a scalar function.
pub fn finite_diff_grad<F>(mut f: F, point: &Tensor, step: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> f64,
{
    if !(step > 0.0) {
        return Err(Error::InvalidTensor(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let mut probe = point.clone();
    let mut grad = Tensor::zeros_like(point);
    for i in 0..point.len() {
        let x = point.data()[i];
        probe.data_mut()[i] = x + step;
        let plus = f(&probe);
        probe.data_mut()[i] = x - step;
        let minus = f(&probe);
        probe.data_mut()[i] = x;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFiniteProbe { coordinate: i });
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * step);
    }
    Ok(grad)
}
