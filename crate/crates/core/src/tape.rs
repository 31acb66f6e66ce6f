//! Reverse-mode differentiation over [`DenseGrid`] values.
//!
//! A [`Tape`] records every operation as a node appended after its inputs, so
//! node order is a topological order. [`Tape::backward`] walks the nodes once
//! in reverse and accumulates gradients into every node that needs one.
//! Nodes created with [`Tape::constant`] (and everything computed only from
//! constants) never receive gradients, which is how generator outputs are
//! detached and frozen networks are evaluated.

use std::hash::{DefaultHasher, Hash, Hasher};

use crate::error::{CodaError, Result};
use crate::grid::DenseGrid;
use crate::kernels::{self, ConvSpec};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    },
    Relu(Var),
    LeakyRelu(Var, f64),
    MaxPool2 { input: Var, argmax: Vec<usize> },
    Resize(Var),
    BlockSum(Var, usize),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    SumPerItem(Var),
    MeanPerItem(Var),
    SelectItem(Var, usize),
    Stack(Vec<Var>),
    LogSigmoid(Var),
}

#[derive(Debug)]
struct Node {
    value: DenseGrid,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient of one scalar with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<DenseGrid>>,
    shapes: Vec<[usize; 4]>,
}

impl Gradients {
    /// Gradient for `var`; exactly zero when `var` does not influence the root.
    pub fn get(&self, var: Var) -> DenseGrid {
        self.grads[var.0]
            .clone()
            .unwrap_or_else(|| DenseGrid::zeros(self.shapes[var.0]))
    }

    pub fn get_ref(&self, var: Var) -> Option<&DenseGrid> {
        self.grads[var.0].as_ref()
    }
}

fn same_shape(op: &'static str, a: &DenseGrid, b: &DenseGrid) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(CodaError::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn zip_with(a: &DenseGrid, b: &DenseGrid, f: impl Fn(f64, f64) -> f64) -> DenseGrid {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    DenseGrid::new(a.shape(), data).expect("shapes checked by caller")
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

    fn push(&mut self, value: DenseGrid, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Hash of every branch decision on the tape: the sign pattern entering
    /// each (leaky) ReLU and the winners of each max pool. Two evaluations
    /// with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) | Op::LeakyRelu(x, _) => {
                    for &v in self.nodes[x.0].value.data() {
                        (v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool2 { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// A leaf that takes no gradient.
    pub fn constant(&mut self, value: DenseGrid) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn variable(&mut self, value: DenseGrid) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &DenseGrid {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let value = kernels::conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            spec,
        )?;
        let needs = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let needs = self.needs(x);
        self.push(value, Op::Relu(x), needs)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let needs = self.needs(x);
        self.push(value, Op::LeakyRelu(x, slope), needs)
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (value, argmax) = kernels::maxpool2_forward(self.value(x))?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::MaxPool2 { input: x, argmax }, needs))
    }

    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let value = kernels::resize_bilinear_forward(self.value(x), out_h, out_w)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Resize(x), needs))
    }

    pub fn block_sum_downsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let value = kernels::block_sum_forward(self.value(x), factor)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::BlockSum(x, factor), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let value = zip_with(self.value(a), self.value(b), |x, y| x + y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let value = zip_with(self.value(a), self.value(b), |x, y| x - y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub(a, b), needs))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let value = zip_with(self.value(a), self.value(b), |x, y| x * y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let needs = self.needs(x);
        self.push(value, Op::Scale(x, factor), needs)
    }

    pub fn add_scalar(&mut self, x: Var, offset: f64) -> Var {
        let value = self.value(x).map(|v| v + offset);
        let needs = self.needs(x);
        self.push(value, Op::AddScalar(x), needs)
    }

    /// Sum of every element, as a 1×1×1×1 grid.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = DenseGrid::scalar(self.value(x).sum());
        let needs = self.needs(x);
        self.push(value, Op::Sum(x), needs)
    }

    /// Per-item sums, shape (N, 1, 1, 1).
    pub fn sum_per_item(&mut self, x: Var) -> Var {
        let g = self.value(x);
        let sums = (0..g.batch()).map(|n| g.item(n).iter().sum()).collect();
        let value = DenseGrid::new([g.batch(), 1, 1, 1], sums).expect("batch ≥ 1");
        let needs = self.needs(x);
        self.push(value, Op::SumPerItem(x), needs)
    }

    /// Per-item means, shape (N, 1, 1, 1).
    pub fn mean_per_item(&mut self, x: Var) -> Var {
        let g = self.value(x);
        let len = g.item_len() as f64;
        let means = (0..g.batch()).map(|n| g.item(n).iter().sum::<f64>() / len).collect();
        let value = DenseGrid::new([g.batch(), 1, 1, 1], means).expect("batch ≥ 1");
        let needs = self.needs(x);
        self.push(value, Op::MeanPerItem(x), needs)
    }

    /// Batch item `n` of `x`, shape (1, C, H, W).
    pub fn select_item(&mut self, x: Var, n: usize) -> Result<Var> {
        let g = self.value(x);
        if n >= g.batch() {
            return Err(CodaError::invalid(
                "select_item",
                format!("item {n} out of range for batch {}", g.batch()),
            ));
        }
        let value = g.item_grid(n);
        let needs = self.needs(x);
        Ok(self.push(value, Op::SelectItem(x, n), needs))
    }

    /// Concatenate along the batch axis.
    pub fn stack(&mut self, items: &[Var]) -> Result<Var> {
        let grids: Vec<DenseGrid> = items.iter().map(|&v| self.value(v).clone()).collect();
        let value = DenseGrid::stack(&grids)?;
        let needs = items.iter().any(|&v| self.needs(v));
        Ok(self.push(value, Op::Stack(items.to_vec()), needs))
    }

    /// Elementwise numerically stable `log σ(x)`.
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(kernels::log_sigmoid);
        let needs = self.needs(x);
        self.push(value, Op::LogSigmoid(x), needs)
    }

    /// Gradients of the scalar `root` with respect to every recorded node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(CodaError::shape(
                "backward",
                format!("root must be scalar, got shape {:?}", root_value.shape()),
            ));
        }
        let mut grads: Vec<Option<DenseGrid>> = vec![None; root.0 + 1];
        grads[root.0] = Some(DenseGrid::filled(root_value.shape(), 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        grads.resize(self.nodes.len(), None);
        for (i, g) in grads.iter_mut().enumerate() {
            if !self.nodes[i].needs_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &DenseGrid, grads: &mut [Option<DenseGrid>]) -> Result<()> {
        let mut accumulate = |v: Var, delta: DenseGrid, tape: &Tape| {
            if !tape.needs(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                        *e += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            } => {
                let need = (
                    self.needs(*input),
                    self.needs(*weight),
                    bias.is_some_and(|b| self.needs(b)),
                );
                let cg = kernels::conv2d_backward(self.value(*input), self.value(*weight), g, *spec, need)?;
                if let Some(dx) = cg.input {
                    accumulate(*input, dx, self);
                }
                if let Some(dw) = cg.weight {
                    accumulate(*weight, dw, self);
                }
                if let (Some(b), Some(db)) = (bias, cg.bias) {
                    let shape = self.value(*b).shape();
                    accumulate(*b, DenseGrid::new(shape, db.into_data())?, self);
                }
            }
            Op::Relu(x) => {
                let d = zip_with(self.value(*x), g, |v, gv| if v > 0.0 { gv } else { 0.0 });
                accumulate(*x, d, self);
            }
            Op::LeakyRelu(x, slope) => {
                let d = zip_with(self.value(*x), g, |v, gv| if v > 0.0 { gv } else { slope * gv });
                accumulate(*x, d, self);
            }
            Op::MaxPool2 { input, argmax } => {
                let mut d = DenseGrid::zeros(self.value(*input).shape());
                let dd = d.data_mut();
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    dd[src] += gv;
                }
                accumulate(*input, d, self);
            }
            Op::Resize(x) => {
                let d = kernels::resize_bilinear_backward(self.value(*x).shape(), g)?;
                accumulate(*x, d, self);
            }
            Op::BlockSum(x, factor) => {
                let d = kernels::block_sum_backward(self.value(*x).shape(), g, *factor)?;
                accumulate(*x, d, self);
            }
            Op::Add(a, b) => {
                accumulate(*a, g.clone(), self);
                accumulate(*b, g.clone(), self);
            }
            Op::Sub(a, b) => {
                accumulate(*a, g.clone(), self);
                accumulate(*b, g.map(|v| -v), self);
            }
            Op::Mul(a, b) => {
                let da = zip_with(g, self.value(*b), |gv, bv| gv * bv);
                let db = zip_with(g, self.value(*a), |gv, av| gv * av);
                accumulate(*a, da, self);
                accumulate(*b, db, self);
            }
            Op::Scale(x, factor) => accumulate(*x, g.map(|v| v * factor), self),
            Op::AddScalar(x) => accumulate(*x, g.clone(), self),
            Op::Sum(x) => {
                let d = DenseGrid::filled(self.value(*x).shape(), g.data()[0]);
                accumulate(*x, d, self);
            }
            Op::SumPerItem(x) | Op::MeanPerItem(x) => {
                let xv = self.value(*x);
                let len = xv.item_len();
                let norm = match node.op {
                    Op::MeanPerItem(_) => 1.0 / len as f64,
                    _ => 1.0,
                };
                let mut d = Vec::with_capacity(xv.len());
                for &gv in g.data() {
                    d.extend(std::iter::repeat_n(gv * norm, len));
                }
                accumulate(*x, DenseGrid::new(xv.shape(), d)?, self);
            }
            Op::SelectItem(x, n) => {
                let xv = self.value(*x);
                let len = xv.item_len();
                let mut d = DenseGrid::zeros(xv.shape());
                d.data_mut()[n * len..(n + 1) * len].copy_from_slice(g.data());
                accumulate(*x, d, self);
            }
            Op::Stack(items) => {
                let mut offset = 0;
                for &item in items {
                    let shape = self.value(item).shape();
                    let len = self.value(item).len();
                    let d = DenseGrid::new(shape, g.data()[offset..offset + len].to_vec())?;
                    offset += len;
                    accumulate(item, d, self);
                }
            }
            Op::LogSigmoid(x) => {
                // d/dx log σ(x) = σ(−x)
                let d = zip_with(self.value(*x), g, |v, gv| gv * kernels::sigmoid(-v));
                accumulate(*x, d, self);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(h: usize, w: usize, v: &[f64]) -> DenseGrid {
        DenseGrid::from_2d(h, w, v.to_vec()).unwrap()
    }

    #[test]
    fn relu_values_and_gradient() {
        let mut t = Tape::new();
        let x = t.variable(grid(1, 3, &[-1.0, 0.0, 2.0]));
        let y = t.relu(x);
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn leaky_relu_negative_side() {
        let mut t = Tape::new();
        let x = t.variable(grid(1, 1, &[-1.0]));
        let y = t.leaky_relu(x, 0.2);
        assert_eq!(t.value(y).data(), &[-0.2]);
        let s = t.sum(y);
        assert_eq!(t.backward(s).unwrap().get(x).data(), &[0.2]);
    }

    #[test]
    fn maxpool_values_and_tie_rule() {
        let mut t = Tape::new();
        let x = t.variable(grid(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let y = t.maxpool2(x).unwrap();
        assert_eq!(t.value(y).data(), &[4.0]);

        let tie = t.variable(grid(2, 2, &[5.0; 4]));
        let p = t.maxpool2(tie).unwrap();
        let s = t.sum(p);
        assert_eq!(t.backward(s).unwrap().get(tie).data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_rejects_odd_dims() {
        let mut t = Tape::new();
        let x = t.constant(DenseGrid::zeros([1, 1, 3, 4]));
        assert!(t.maxpool2(x).is_err());
    }

    #[test]
    fn maxpool_identity_pattern_blockwise() {
        let mut data = vec![0.0; 16];
        for i in 0..4 {
            data[i * 4 + i] = 1.0 + i as f64;
        }
        let mut t = Tape::new();
        let x = t.constant(grid(4, 4, &data));
        let y = t.maxpool2(x).unwrap();
        // brute force per 2×2 block
        let mut expected = vec![];
        for by in 0..2 {
            for bx in 0..2 {
                let mut m = f64::MIN;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(data[(2 * by + dy) * 4 + 2 * bx + dx]);
                    }
                }
                expected.push(m);
            }
        }
        assert_eq!(t.value(y).data(), expected.as_slice());
    }

    #[test]
    fn grid_sum_value_and_gradient() {
        let mut t = Tape::new();
        let z = t.variable(DenseGrid::zeros([1, 1, 3, 3]));
        let zs = t.sum(z);
        assert_eq!(t.scalar_value(zs), 0.0);
        let x = t.variable(grid(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let s = t.sum(x);
        assert_eq!(t.scalar_value(s), 10.0);
        assert_eq!(t.backward(s).unwrap().get(x).data(), &[1.0; 4]);
    }

    #[test]
    fn unused_parameters_get_exact_zero() {
        let mut t = Tape::new();
        let used = t.variable(grid(1, 2, &[1.0, 2.0]));
        let unused = t.variable(grid(1, 2, &[3.0, 4.0]));
        let s = t.sum(used);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(unused).data(), &[0.0, 0.0]);
        assert!(g.get_ref(unused).is_none());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(grid(1, 2, &[1.0, 2.0]));
        let v = t.variable(grid(1, 2, &[3.0, 4.0]));
        let p = t.mul(c, v).unwrap();
        let s = t.sum(p);
        let g = t.backward(s).unwrap();
        assert!(g.get_ref(c).is_none());
        assert_eq!(g.get(v).data(), &[1.0, 2.0]);
    }

    #[test]
    fn shared_input_accumulates() {
        let mut t = Tape::new();
        let x = t.variable(grid(1, 1, &[3.0]));
        let y = t.mul(x, x).unwrap();
        let s = t.sum(y);
        assert_eq!(t.backward(s).unwrap().get(x).data(), &[6.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut t = Tape::new();
        let x = t.variable(grid(1, 2, &[1.0, 2.0]));
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn resize_identity_and_constant() {
        let mut t = Tape::new();
        let x = t.constant(grid(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let same = t.resize_bilinear(x, 2, 3).unwrap();
        assert_eq!(t.value(same), t.value(x));
        let c = t.constant(DenseGrid::filled([1, 1, 3, 5], 2.5));
        let r = t.resize_bilinear(c, 7, 2).unwrap();
        assert!(t.value(r).data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn block_sum_examples() {
        let mut t = Tape::new();
        let x = t.constant(DenseGrid::filled([1, 1, 2, 2], 1.0));
        let same = t.block_sum_downsample(x, 1).unwrap();
        assert_eq!(t.value(same), t.value(x));
        let y = t.block_sum_downsample(x, 2).unwrap();
        assert_eq!(t.value(y).data(), &[4.0]);
        let odd = t.constant(DenseGrid::zeros([1, 1, 3, 4]));
        assert!(t.block_sum_downsample(odd, 2).is_err());
    }
}
