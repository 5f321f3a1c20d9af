use std::cell::{Cell, Ref, RefCell};

use super::{elementwise, matmul_into, plan_broadcast, Broadcast, OpKind, Tensor, TensorError};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Elementwise { kind: OpKind, a: usize, b: Option<usize> },
    MatMul { a: usize, b: usize },
    SumAll { a: usize },
    SumLast { a: usize },
    LogSoftmax { a: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations. Nodes are appended as they are
/// computed, so inputs always precede their consumers.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).finish()
    }
}

/// Gradients of one backward pass, indexed by the vars of the tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a tracked leaf, `None` for detached values.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Clears all recorded nodes so the tape can be reused for a new pass.
    pub fn reset(&mut self) {
        self.nodes.get_mut().clear();
        self.consumed.set(false);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Registers a gradient-tracked leaf.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a detached leaf; it never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    pub fn elementwise<'t>(
        &'t self,
        kind: OpKind,
        a: Var<'t>,
        b: Option<Var<'t>>,
    ) -> Result<Var<'t>, TensorError> {
        let value = {
            let nodes = self.nodes.borrow();
            elementwise(kind, &nodes[a.id].value, b.map(|b| &nodes[b.id].value))?
        };
        let rg = self.requires_grad(a.id) || b.is_some_and(|b| self.requires_grad(b.id));
        Ok(self.push(
            value,
            Op::Elementwise {
                kind,
                a: a.id,
                b: b.map(|b| b.id),
            },
            rg,
        ))
    }

    /// Runs reverse-mode accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, TensorError> {
        if self.consumed.get() {
            return Err(TensorError::BackwardTwice);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(root.value.shape().to_vec()));
        }
        self.consumed.set(true);

        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        if root.requires_grad {
            grads[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));
        }
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let is_leaf = matches!(node.op, Op::Leaf);
            if is_leaf {
                if grads[id].is_none() {
                    grads[id] = Some(Tensor::zeros(node.value.shape()));
                }
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, node, &g, &mut grads)?;
        }
        // Tracked leaves recorded after the loss never saw it.
        for (id, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        for g in grads.iter().flatten() {
            if !g.is_finite() {
                return Err(TensorError::NonFinite { op: "backward" });
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, delta: Tensor) {
    match &mut grads[id] {
        Some(g) => {
            for (x, d) in g.data_mut().iter_mut().zip(delta.data()) {
                *x += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

/// Sums `g` (shaped like the broadcast result) back into `target`'s shape.
fn reduce_to(g: &[f64], result: &Tensor, target: &Tensor) -> Tensor {
    match plan_broadcast("reduce", result, target) {
        Ok(Broadcast::Same) | Err(_) => Tensor::new(target.shape(), g.to_vec())
            .expect("gradient length matches operand"),
        Ok(Broadcast::Indexed(idx)) => {
            let mut out = Tensor::zeros(target.shape());
            let d = out.data_mut();
            for (&j, &v) in idx.iter().zip(g) {
                d[j] += v;
            }
            out
        }
    }
}

fn broadcast_values(result: &Tensor, operand: &Tensor) -> Vec<f64> {
    match plan_broadcast("expand", result, operand) {
        Ok(Broadcast::Indexed(idx)) => idx.iter().map(|&j| operand.data()[j]).collect(),
        _ => operand.data().to_vec(),
    }
}

fn propagate(
    nodes: &[Node],
    node: &Node,
    g: &Tensor,
    grads: &mut [Option<Tensor>],
) -> Result<(), TensorError> {
    let gd = g.data();
    let y = &node.value;
    match node.op {
        Op::Leaf => {}
        Op::Elementwise { kind, a, b } => {
            let av = &nodes[a].value;
            let a_rg = nodes[a].requires_grad;
            match (kind, b) {
                (OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div, Some(b)) => {
                    let bv = &nodes[b].value;
                    let b_rg = nodes[b].requires_grad;
                    let bx = broadcast_values(y, bv);
                    if a_rg {
                        let da: Vec<f64> = match kind {
                            OpKind::Add | OpKind::Sub => gd.to_vec(),
                            OpKind::Mul => gd.iter().zip(&bx).map(|(g, b)| g * b).collect(),
                            _ => gd.iter().zip(&bx).map(|(g, b)| g / b).collect(),
                        };
                        accumulate(grads, a, Tensor::new(av.shape(), da)?);
                    }
                    if b_rg {
                        let db: Vec<f64> = match kind {
                            OpKind::Add => gd.to_vec(),
                            OpKind::Sub => gd.iter().map(|g| -g).collect(),
                            OpKind::Mul => gd.iter().zip(av.data()).map(|(g, a)| g * a).collect(),
                            _ => gd
                                .iter()
                                .zip(av.data())
                                .zip(&bx)
                                .map(|((g, a), b)| -g * a / (b * b))
                                .collect(),
                        };
                        accumulate(grads, b, reduce_to(&db, y, bv));
                    }
                }
                (unary, None) if a_rg => {
                    let da: Vec<f64> = match unary {
                        OpKind::Exp => gd.iter().zip(y.data()).map(|(g, y)| g * y).collect(),
                        OpKind::Log => gd.iter().zip(av.data()).map(|(g, a)| g / a).collect(),
                        OpKind::Tanh => gd
                            .iter()
                            .zip(y.data())
                            .map(|(g, y)| g * (1.0 - y * y))
                            .collect(),
                        OpKind::Relu => gd
                            .iter()
                            .zip(av.data())
                            .map(|(g, a)| if *a > 0.0 { *g } else { 0.0 })
                            .collect(),
                        OpKind::Scale(c) => gd.iter().map(|g| c * g).collect(),
                        _ => unreachable!("binary kinds always carry an operand"),
                    };
                    accumulate(grads, a, Tensor::new(av.shape(), da)?);
                }
                _ => {}
            }
        }
        Op::MatMul { a, b } => {
            let av = &nodes[a].value;
            let bv = &nodes[b].value;
            let (m, k) = av.matrix_dims("matmul")?;
            let (_, n) = bv.matrix_dims("matmul")?;
            if nodes[a].requires_grad {
                // dA = dC · Bᵀ
                let mut da = vec![0.0; m * k];
                let bt = bv.transpose()?;
                matmul_into(gd, bt.data(), &mut da, m, n, k);
                accumulate(grads, a, Tensor::new(&[m, k], da)?);
            }
            if nodes[b].requires_grad {
                // dB = Aᵀ · dC
                let mut db = vec![0.0; k * n];
                let at = av.transpose()?;
                matmul_into(at.data(), gd, &mut db, k, m, n);
                accumulate(grads, b, Tensor::new(&[k, n], db)?);
            }
        }
        Op::SumAll { a } => {
            if nodes[a].requires_grad {
                accumulate(grads, a, Tensor::full(nodes[a].value.shape(), gd[0]));
            }
        }
        Op::SumLast { a } => {
            if nodes[a].requires_grad {
                let av = &nodes[a].value;
                let w = av.cols();
                let da: Vec<f64> = (0..av.len()).map(|i| gd[i / w]).collect();
                accumulate(grads, a, Tensor::new(av.shape(), da)?);
            }
        }
        Op::LogSoftmax { a } => {
            if nodes[a].requires_grad {
                let w = y.cols();
                let mut da = vec![0.0; y.len()];
                for (r, chunk) in da.chunks_mut(w).enumerate() {
                    let g_row = &gd[r * w..(r + 1) * w];
                    let y_row = &y.data()[r * w..(r + 1) * w];
                    let total: f64 = g_row.iter().sum();
                    for ((d, g), ly) in chunk.iter_mut().zip(g_row).zip(y_row) {
                        *d = g - ly.exp() * total;
                    }
                }
                accumulate(grads, a, Tensor::new(y.shape(), da)?);
            }
        }
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    /// Borrow of the recorded value.
    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.tape.elementwise(OpKind::Add, self, Some(other))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.tape.elementwise(OpKind::Sub, self, Some(other))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.tape.elementwise(OpKind::Mul, self, Some(other))
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.tape.elementwise(OpKind::Div, self, Some(other))
    }

    pub fn exp(self) -> Result<Var<'t>, TensorError> {
        self.tape.elementwise(OpKind::Exp, self, None)
    }

    pub fn log(self) -> Result<Var<'t>, TensorError> {
        self.tape.elementwise(OpKind::Log, self, None)
    }

    pub fn tanh(self) -> Result<Var<'t>, TensorError> {
        self.tape.elementwise(OpKind::Tanh, self, None)
    }

    pub fn relu(self) -> Result<Var<'t>, TensorError> {
        self.tape.elementwise(OpKind::Relu, self, None)
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>, TensorError> {
        self.tape.elementwise(OpKind::Scale(c), self, None)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].value.matmul(&nodes[other.id].value)?
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            value,
            Op::MatMul {
                a: self.id,
                b: other.id,
            },
            rg,
        ))
    }

    /// Sum of every element as a rank-0 tensor.
    pub fn sum(self) -> Result<Var<'t>, TensorError> {
        let value = Tensor::scalar(self.value().sum());
        Ok(self
            .tape
            .push(value, Op::SumAll { a: self.id }, self.requires_grad()))
    }

    /// Sum over the trailing axis, keeping it with extent 1.
    pub fn sum_last(self) -> Result<Var<'t>, TensorError> {
        let value = {
            let v = self.value();
            let w = v.cols();
            let data: Vec<f64> = v.data().chunks(w).map(|c| c.iter().sum()).collect();
            let mut shape = v.shape().to_vec();
            match shape.last_mut() {
                Some(last) => *last = 1,
                None => shape.push(1),
            }
            Tensor::new(&shape, data)?
        };
        Ok(self
            .tape
            .push(value, Op::SumLast { a: self.id }, self.requires_grad()))
    }

    pub fn mean(self) -> Result<Var<'t>, TensorError> {
        let n = self.value().len() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Numerically stable log-softmax over the trailing axis.
    pub fn log_softmax(self) -> Result<Var<'t>, TensorError> {
        let value = {
            let v = self.value();
            let w = v.cols();
            let mut out = Vec::with_capacity(v.len());
            for row in v.data().chunks(w) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                out.extend(row.iter().map(|x| x - lse));
            }
            Tensor::new(v.shape(), out)?
        };
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "log_softmax" });
        }
        Ok(self
            .tape
            .push(value, Op::LogSoftmax { a: self.id }, self.requires_grad()))
    }
}
