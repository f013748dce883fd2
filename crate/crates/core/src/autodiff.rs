//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive applied during a forward pass and
//! replays the records in reverse to accumulate exact gradients. The
//! primitive set is deliberately small and auditable: matrix multiply,
//! additions (including the one permitted broadcast, matrix + bias row),
//! pointwise nonlinearities, stabilised softmax / log-softmax, reductions,
//! row selection / gathering, concatenation and mask-based dropout.
//!
//! A tape is single-writer: one forward/backward pass owns it exclusively.
//! Parameters live outside the tape in a read-only [`ParamSet`], so many
//! tapes may evaluate concurrently over shared weights; merging gradients
//! across tapes is the caller's job (by summation).
//!
//! Every forward output and every backward contribution is checked for
//! NaN/Inf; a violation surfaces as an error naming the primitive.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::tensor::{Real, Tensor};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// The primitive operations the tape understands.
#[derive(Debug, Clone)]
pub enum Primitive<T> {
    /// `[m,k] x [k,n] -> [m,n]`
    MatMul,
    /// Elementwise sum of two same-shape tensors.
    Add,
    /// `[m,n] + [n]` with the bias row broadcast over rows. The only
    /// broadcast the tape permits.
    AddBias,
    /// Elementwise difference.
    Sub,
    /// Elementwise product.
    Mul,
    /// Multiply by a compile-time constant.
    Scale(T),
    /// Add a compile-time constant.
    AddConst(T),
    Tanh,
    Relu,
    Sigmoid,
    /// `ln(1 + e^x)`, evaluated stably.
    Softplus,
    Exp,
    Log,
    /// Pass-through inside `(lo, hi)`, zero gradient outside.
    Clamp(T, T),
    /// Row-wise softmax with max subtraction.
    SoftmaxRows,
    /// Row-wise log-softmax via log-sum-exp.
    LogSoftmaxRows,
    /// Sum of all entries -> scalar.
    Sum,
    /// Mean of all entries -> scalar.
    Mean,
    /// Concatenate along `axis` (0: stack rows / vectors, 1: widen rows).
    Concat { axis: usize },
    /// Select one row of a matrix -> `[1,n]`.
    RowSelect(usize),
    /// Gather rows of a `[v,e]` matrix by index -> `[t,e]`; backward
    /// scatter-adds, so repeated indices accumulate.
    GatherRows(Vec<usize>),
    /// `x * mask / keep` with an externally supplied 0/1 mask (input 1).
    /// The mask is constant: no gradient flows into it.
    Dropout { keep: T },
    /// Reinterpret the buffer under a new shape of equal size.
    Reshape(Vec<usize>),
}

impl<T> Primitive<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::AddBias => "add_bias",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Scale(_) => "scale",
            Primitive::AddConst(_) => "add_const",
            Primitive::Tanh => "tanh",
            Primitive::Relu => "relu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Softplus => "softplus",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Clamp(_, _) => "clamp",
            Primitive::SoftmaxRows => "softmax_rows",
            Primitive::LogSoftmaxRows => "log_softmax_rows",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::Concat { .. } => "concat",
            Primitive::RowSelect(_) => "row_select",
            Primitive::GatherRows(_) => "gather_rows",
            Primitive::Dropout { .. } => "dropout",
            Primitive::Reshape(_) => "reshape",
        }
    }
}

#[derive(Debug, Clone)]
struct Record<T> {
    prim: Primitive<T>,
    inputs: Vec<Var>,
    out: Var,
}

#[derive(Debug)]
enum Slot<T> {
    Owned(Tensor<T>),
    Param(usize),
}

/// Wengert list: executed primitives in topological order plus the value
/// arena they operate on.
pub struct Tape<'p, T: Real> {
    params: Option<&'p ParamSet<T>>,
    slots: Vec<Slot<T>>,
    records: Vec<Record<T>>,
    grads: Vec<Option<Vec<T>>>,
    param_vars: HashMap<usize, Var>,
}

impl<T: Real> Tape<'static, T> {
    /// A tape with no backing parameter set (leaves only).
    pub fn new() -> Self {
        Tape {
            params: None,
            slots: Vec::new(),
            records: Vec::new(),
            grads: Vec::new(),
            param_vars: HashMap::new(),
        }
    }
}

impl<T: Real> Default for Tape<'static, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Real> Tape<'p, T> {
    /// A tape reading parameters from a shared read-only set.
    pub fn over(params: &'p ParamSet<T>) -> Self {
        Tape {
            params: Some(params),
            slots: Vec::new(),
            records: Vec::new(),
            grads: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    fn push_slot(&mut self, slot: Slot<T>) -> Var {
        let id = self.slots.len();
        self.slots.push(slot);
        self.grads.push(None);
        Var(id)
    }

    /// Register an owned leaf (input data, noise, masks, or free tensors
    /// under gradient check).
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        self.push_slot(Slot::Owned(tensor))
    }

    /// Register a parameter of the backing set. Registering the same
    /// parameter twice returns the same node, so gradient contributions
    /// from every use accumulate onto one slot.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id.index()) {
            return v;
        }
        let set = self.params.expect("Tape::param requires Tape::over(..)");
        assert!(id.index() < set.len(), "parameter id out of range");
        let v = self.push_slot(Slot::Param(id.index()));
        self.param_vars.insert(id.index(), v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.slots[v.0] {
            Slot::Owned(t) => t,
            Slot::Param(i) => self
                .params
                .expect("param slot without ParamSet")
                .get(ParamId(*i)),
        }
    }

    pub fn value_scalar(&self, v: Var) -> T {
        self.value(v).item()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Apply one primitive, recording it for the backward pass.
    pub fn apply(&mut self, prim: Primitive<T>, inputs: &[Var]) -> Result<Var> {
        let out = {
            let refs: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
            eval_primitive(&prim, &refs)?
        };
        if out.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: prim.name() });
        }
        let out_var = self.push_slot(Slot::Owned(out));
        self.records.push(Record { prim, inputs: inputs.to_vec(), out: out_var });
        Ok(out_var)
    }

    // Convenience wrappers.

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.apply(Primitive::AddBias, &[a, bias])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.apply(Primitive::Scale(c), &[x])
    }

    pub fn add_const(&mut self, x: Var, c: T) -> Result<Var> {
        self.apply(Primitive::AddConst(c), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Tanh, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sigmoid, &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Softplus, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Exp, &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Log, &[x])
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        self.apply(Primitive::Clamp(lo, hi), &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::SoftmaxRows, &[x])
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::LogSoftmaxRows, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sum, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Mean, &[x])
    }

    pub fn concat(&mut self, axis: usize, inputs: &[Var]) -> Result<Var> {
        self.apply(Primitive::Concat { axis }, inputs)
    }

    pub fn row_select(&mut self, x: Var, row: usize) -> Result<Var> {
        self.apply(Primitive::RowSelect(row), &[x])
    }

    pub fn gather_rows(&mut self, table: Var, indices: Vec<usize>) -> Result<Var> {
        self.apply(Primitive::GatherRows(indices), &[table])
    }

    pub fn dropout(&mut self, x: Var, mask: Var, keep: T) -> Result<Var> {
        self.apply(Primitive::Dropout { keep }, &[x, mask])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        self.apply(Primitive::Reshape(shape), &[x])
    }

    /// Replay the tape in reverse, accumulating gradients of `loss` into
    /// every node. Leaves unreachable from the loss keep a `None` slot and
    /// read back as zero. Running backward twice on the same tape yields
    /// bit-identical gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::LossNotScalar { shape: lt.shape().to_vec() });
        }
        self.grads = vec![None; self.slots.len()];
        self.grads[loss.0] = Some(vec![T::one()]);
        let records = std::mem::take(&mut self.records);
        let mut outcome = Ok(());
        for rec in records.iter().rev() {
            if let Err(e) = self.backward_record(rec) {
                outcome = Err(e);
                break;
            }
        }
        self.records = records;
        outcome
    }

    /// Gradient accumulated on a node by the last `backward`, if any
    /// reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient of a node, with unreachable nodes reading as zero.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![T::zero(); self.value(v).numel()],
        }
    }

    /// Gradients for the backing parameter set, aligned with its indices.
    /// Parameters never registered on this tape get `None`.
    pub fn param_grads(&self) -> Vec<Option<Vec<T>>> {
        let n = self.params.map_or(0, |p| p.len());
        let mut out = vec![None; n];
        for (&pid, &var) in &self.param_vars {
            out[pid] = Some(self.grad_or_zeros(var));
        }
        out
    }

    /// The last `backward`'s gradient attached to a copy of the node value.
    pub fn value_with_grad(&self, v: Var) -> Result<Tensor<T>> {
        self.value(v).clone().with_grad(self.grad_or_zeros(v))
    }

    fn accumulate(&mut self, v: Var, delta: &[T], op: &'static str) -> Result<()> {
        if delta.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGrad { op });
        }
        match &mut self.grads[v.0] {
            Some(acc) => {
                for (a, d) in acc.iter_mut().zip(delta) {
                    *a += *d;
                }
            }
            None => self.grads[v.0] = Some(delta.to_vec()),
        }
        Ok(())
    }

    fn backward_record(&mut self, rec: &Record<T>) -> Result<()> {
        let d_out = match &self.grads[rec.out.0] {
            Some(g) => g.clone(),
            None => return Ok(()),
        };
        let name = rec.prim.name();
        match &rec.prim {
            Primitive::MatMul => {
                let (a, b) = (rec.inputs[0], rec.inputs[1]);
                let (m, k) = {
                    let t = self.value(a);
                    (t.shape()[0], t.shape()[1])
                };
                let n = self.value(b).shape()[1];
                let mut d_a = vec![T::zero(); m * k];
                {
                    let bv = self.value(b).data();
                    for i in 0..m {
                        for l in 0..k {
                            let mut acc = T::zero();
                            for j in 0..n {
                                acc += d_out[i * n + j] * bv[l * n + j];
                            }
                            d_a[i * k + l] = acc;
                        }
                    }
                }
                let mut d_b = vec![T::zero(); k * n];
                {
                    let av = self.value(a).data();
                    for i in 0..m {
                        for l in 0..k {
                            let ail = av[i * k + l];
                            for j in 0..n {
                                d_b[l * n + j] += ail * d_out[i * n + j];
                            }
                        }
                    }
                }
                self.accumulate(a, &d_a, name)?;
                self.accumulate(b, &d_b, name)?;
            }
            Primitive::Add => {
                self.accumulate(rec.inputs[0], &d_out, name)?;
                self.accumulate(rec.inputs[1], &d_out, name)?;
            }
            Primitive::AddBias => {
                let (a, bias) = (rec.inputs[0], rec.inputs[1]);
                self.accumulate(a, &d_out, name)?;
                let n = self.value(bias).numel();
                let rows = d_out.len() / n;
                let mut d_bias = vec![T::zero(); n];
                for i in 0..rows {
                    for j in 0..n {
                        d_bias[j] += d_out[i * n + j];
                    }
                }
                self.accumulate(bias, &d_bias, name)?;
            }
            Primitive::Sub => {
                self.accumulate(rec.inputs[0], &d_out, name)?;
                let neg: Vec<T> = d_out.iter().map(|d| -*d).collect();
                self.accumulate(rec.inputs[1], &neg, name)?;
            }
            Primitive::Mul => {
                let (a, b) = (rec.inputs[0], rec.inputs[1]);
                let d_a: Vec<T> = d_out
                    .iter()
                    .zip(self.value(b).data())
                    .map(|(d, bv)| *d * *bv)
                    .collect();
                let d_b: Vec<T> = d_out
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(d, av)| *d * *av)
                    .collect();
                self.accumulate(a, &d_a, name)?;
                self.accumulate(b, &d_b, name)?;
            }
            Primitive::Scale(c) => {
                let d: Vec<T> = d_out.iter().map(|d| *d * *c).collect();
                self.accumulate(rec.inputs[0], &d, name)?;
            }
            Primitive::AddConst(_) => {
                self.accumulate(rec.inputs[0], &d_out, name)?;
            }
            Primitive::Tanh => {
                let y = self.value(rec.out).data();
                let d: Vec<T> = d_out
                    .iter()
                    .zip(y)
                    .map(|(d, y)| *d * (T::one() - *y * *y))
                    .collect();
                self.accumulate(rec.inputs[0], &d, name)?;
            }
            Primitive::Relu => {
                let x = self.value(rec.inputs[0]).data();
                let d: Vec<T> = d_out
                    .iter()
                    .zip(x)
                    .map(|(d, x)| if *x > T::zero() { *d } else { T::zero() })
                    .collect();
                self.accumulate(rec.inputs[0], &d, name)?;
            }
            Primitive::Sigmoid => {
                let y = self.value(rec.out).data();
                let d: Vec<T> = d_out
                    .iter()
                    .zip(y)
                    .map(|(d, y)| *d * *y * (T::one() - *y))
                    .collect();
                self.accumulate(rec.inputs[0], &d, name)?;
            }
            Primitive::Softplus => {
                let x = self.value(rec.inputs[0]).data();
                let d: Vec<T> = d_out
                    .iter()
                    .zip(x)
                    .map(|(d, x)| *d * stable_sigmoid(*x))
                    .collect();
                self.accumulate(rec.inputs[0], &d, name)?;
            }
            Primitive::Exp => {
                let y = self.value(rec.out).data();
                let d: Vec<T> = d_out.iter().zip(y).map(|(d, y)| *d * *y).collect();
                self.accumulate(rec.inputs[0], &d, name)?;
            }
            Primitive::Log => {
                let x = self.value(rec.inputs[0]).data();
                let d: Vec<T> = d_out.iter().zip(x).map(|(d, x)| *d / *x).collect();
                self.accumulate(rec.inputs[0], &d, name)?;
            }
            Primitive::Clamp(lo, hi) => {
                let x = self.value(rec.inputs[0]).data();
                let d: Vec<T> = d_out
                    .iter()
                    .zip(x)
                    .map(|(d, x)| if *x > *lo && *x < *hi { *d } else { T::zero() })
                    .collect();
                self.accumulate(rec.inputs[0], &d, name)?;
            }
            Primitive::SoftmaxRows => {
                let y = self.value(rec.out);
                let cols = y.cols();
                let rows = y.numel() / cols;
                let yv = y.data();
                let mut d = vec![T::zero(); yv.len()];
                for r in 0..rows {
                    let base = r * cols;
                    let mut dot = T::zero();
                    for c in 0..cols {
                        dot += d_out[base + c] * yv[base + c];
                    }
                    for c in 0..cols {
                        d[base + c] = yv[base + c] * (d_out[base + c] - dot);
                    }
                }
                self.accumulate(rec.inputs[0], &d, name)?;
            }
            Primitive::LogSoftmaxRows => {
                let y = self.value(rec.out);
                let cols = y.cols();
                let rows = y.numel() / cols;
                let yv = y.data();
                let mut d = vec![T::zero(); yv.len()];
                for r in 0..rows {
                    let base = r * cols;
                    let mut dsum = T::zero();
                    for c in 0..cols {
                        dsum += d_out[base + c];
                    }
                    for c in 0..cols {
                        d[base + c] = d_out[base + c] - yv[base + c].exp() * dsum;
                    }
                }
                self.accumulate(rec.inputs[0], &d, name)?;
            }
            Primitive::Sum => {
                let n = self.value(rec.inputs[0]).numel();
                let d = vec![d_out[0]; n];
                self.accumulate(rec.inputs[0], &d, name)?;
            }
            Primitive::Mean => {
                let n = self.value(rec.inputs[0]).numel();
                let d = vec![d_out[0] / T::lit(n as f64); n];
                self.accumulate(rec.inputs[0], &d, name)?;
            }
            Primitive::Concat { axis } => {
                match axis {
                    1 => {
                        // Rows widened from per-input column blocks.
                        let rows = self.value(rec.out).rows();
                        let total_cols = self.value(rec.out).cols();
                        let mut offset = 0;
                        for &inp in &rec.inputs {
                            let c = self.value(inp).cols();
                            let mut d = vec![T::zero(); rows * c];
                            for r in 0..rows {
                                for j in 0..c {
                                    d[r * c + j] = d_out[r * total_cols + offset + j];
                                }
                            }
                            offset += c;
                            self.accumulate(inp, &d, name)?;
                        }
                    }
                    _ => {
                        // Contiguous blocks (vectors, or stacked rows).
                        let mut offset = 0;
                        for &inp in &rec.inputs {
                            let n = self.value(inp).numel();
                            let d = d_out[offset..offset + n].to_vec();
                            offset += n;
                            self.accumulate(inp, &d, name)?;
                        }
                    }
                }
            }
            Primitive::RowSelect(row) => {
                let x = self.value(rec.inputs[0]);
                let cols = x.cols();
                let mut d = vec![T::zero(); x.numel()];
                d[row * cols..(row + 1) * cols].copy_from_slice(&d_out);
                self.accumulate(rec.inputs[0], &d, name)?;
            }
            Primitive::GatherRows(indices) => {
                let table = self.value(rec.inputs[0]);
                let cols = table.cols();
                let mut d = vec![T::zero(); table.numel()];
                for (t, &idx) in indices.iter().enumerate() {
                    for j in 0..cols {
                        d[idx * cols + j] += d_out[t * cols + j];
                    }
                }
                self.accumulate(rec.inputs[0], &d, name)?;
            }
            Primitive::Dropout { keep } => {
                let mask = self.value(rec.inputs[1]).data();
                let d: Vec<T> = d_out
                    .iter()
                    .zip(mask)
                    .map(|(d, m)| *d * *m / *keep)
                    .collect();
                self.accumulate(rec.inputs[0], &d, name)?;
            }
            Primitive::Reshape(_) => {
                self.accumulate(rec.inputs[0], &d_out, name)?;
            }
        }
        Ok(())
    }
}

fn stable_sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn expect_arity<T>(prim: &Primitive<T>, inputs: &[&Tensor<T>], arity: usize) -> Result<()> {
    if inputs.len() != arity {
        return Err(Error::InvalidShape {
            op: prim.name(),
            shape: vec![inputs.len()],
            msg: format!("expected {arity} inputs"),
        });
    }
    Ok(())
}

fn same_shape<'a, T: Real>(
    prim: &Primitive<T>,
    a: &'a Tensor<T>,
    b: &'a Tensor<T>,
) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: prim.name(),
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn rank2<'a, T: Real>(prim: &Primitive<T>, t: &'a Tensor<T>) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::InvalidShape {
            op: prim.name(),
            shape: t.shape().to_vec(),
            msg: "rank-2 tensor required".into(),
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// Forward evaluation of one primitive. Pure; shape checks included.
pub(crate) fn eval_primitive<T: Real>(
    prim: &Primitive<T>,
    inputs: &[&Tensor<T>],
) -> Result<Tensor<T>> {
    match prim {
        Primitive::MatMul => {
            expect_arity(prim, inputs, 2)?;
            let (m, k) = rank2(prim, inputs[0])?;
            let (k2, n) = rank2(prim, inputs[1])?;
            if k != k2 {
                return Err(Error::ShapeMismatch {
                    op: prim.name(),
                    lhs: inputs[0].shape().to_vec(),
                    rhs: inputs[1].shape().to_vec(),
                });
            }
            let a = inputs[0].data();
            let b = inputs[1].data();
            let mut c = vec![T::zero(); m * n];
            for i in 0..m {
                for l in 0..k {
                    let ail = a[i * k + l];
                    if ail == T::zero() {
                        continue;
                    }
                    let brow = &b[l * n..(l + 1) * n];
                    let crow = &mut c[i * n..(i + 1) * n];
                    for j in 0..n {
                        crow[j] += ail * brow[j];
                    }
                }
            }
            Tensor::from_raw(vec![m, n], c)
        }
        Primitive::Add | Primitive::Sub | Primitive::Mul => {
            expect_arity(prim, inputs, 2)?;
            same_shape(prim, inputs[0], inputs[1])?;
            let a = inputs[0].data();
            let b = inputs[1].data();
            let data: Vec<T> = match prim {
                Primitive::Add => a.iter().zip(b).map(|(x, y)| *x + *y).collect(),
                Primitive::Sub => a.iter().zip(b).map(|(x, y)| *x - *y).collect(),
                _ => a.iter().zip(b).map(|(x, y)| *x * *y).collect(),
            };
            Tensor::from_raw(inputs[0].shape().to_vec(), data)
        }
        Primitive::AddBias => {
            expect_arity(prim, inputs, 2)?;
            let (rows, cols) = rank2(prim, inputs[0])?;
            let bias = inputs[1];
            if bias.numel() != cols || bias.rows() != 1 {
                return Err(Error::ShapeMismatch {
                    op: prim.name(),
                    lhs: inputs[0].shape().to_vec(),
                    rhs: bias.shape().to_vec(),
                });
            }
            let a = inputs[0].data();
            let b = bias.data();
            let mut data = vec![T::zero(); rows * cols];
            for i in 0..rows {
                for j in 0..cols {
                    data[i * cols + j] = a[i * cols + j] + b[j];
                }
            }
            Tensor::from_raw(inputs[0].shape().to_vec(), data)
        }
        Primitive::Scale(c) => {
            expect_arity(prim, inputs, 1)?;
            let data: Vec<T> = inputs[0].data().iter().map(|x| *x * *c).collect();
            Tensor::from_raw(inputs[0].shape().to_vec(), data)
        }
        Primitive::AddConst(c) => {
            expect_arity(prim, inputs, 1)?;
            let data: Vec<T> = inputs[0].data().iter().map(|x| *x + *c).collect();
            Tensor::from_raw(inputs[0].shape().to_vec(), data)
        }
        Primitive::Tanh => unary(prim, inputs, |x| x.tanh()),
        Primitive::Relu => unary(prim, inputs, |x| if x > T::zero() { x } else { T::zero() }),
        Primitive::Sigmoid => unary(prim, inputs, stable_sigmoid),
        Primitive::Softplus => unary(prim, inputs, |x| {
            // max(x,0) + ln(1 + e^-|x|)
            x.max(T::zero()) + (-x.abs()).exp().ln_1p()
        }),
        Primitive::Exp => unary(prim, inputs, |x| x.exp()),
        Primitive::Log => unary(prim, inputs, |x| x.ln()),
        Primitive::Clamp(lo, hi) => unary(prim, inputs, |x| x.max(*lo).min(*hi)),
        Primitive::SoftmaxRows => {
            expect_arity(prim, inputs, 1)?;
            let x = inputs[0];
            let cols = x.cols();
            let rows = x.numel() / cols;
            let xv = x.data();
            let mut data = vec![T::zero(); xv.len()];
            for r in 0..rows {
                let row = &xv[r * cols..(r + 1) * cols];
                let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for (j, v) in row.iter().enumerate() {
                    let e = (*v - max).exp();
                    data[r * cols + j] = e;
                    sum += e;
                }
                for j in 0..cols {
                    data[r * cols + j] /= sum;
                }
            }
            Tensor::from_raw(x.shape().to_vec(), data)
        }
        Primitive::LogSoftmaxRows => {
            expect_arity(prim, inputs, 1)?;
            let x = inputs[0];
            let cols = x.cols();
            let rows = x.numel() / cols;
            let xv = x.data();
            let mut data = vec![T::zero(); xv.len()];
            for r in 0..rows {
                let row = &xv[r * cols..(r + 1) * cols];
                let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for v in row {
                    sum += (*v - max).exp();
                }
                let lse = max + sum.ln();
                for j in 0..cols {
                    data[r * cols + j] = row[j] - lse;
                }
            }
            Tensor::from_raw(x.shape().to_vec(), data)
        }
        Primitive::Sum => {
            expect_arity(prim, inputs, 1)?;
            let s = inputs[0].data().iter().cloned().sum();
            Ok(Tensor::scalar(s))
        }
        Primitive::Mean => {
            expect_arity(prim, inputs, 1)?;
            let n = T::lit(inputs[0].numel() as f64);
            let s: T = inputs[0].data().iter().cloned().sum();
            Ok(Tensor::scalar(s / n))
        }
        Primitive::Concat { axis } => {
            if inputs.is_empty() {
                return Err(Error::InvalidShape {
                    op: prim.name(),
                    shape: vec![0],
                    msg: "concat needs at least one input".into(),
                });
            }
            match axis {
                0 => {
                    if inputs[0].shape().len() == 1 {
                        // Vector concatenation.
                        let mut data = Vec::new();
                        for t in inputs {
                            if t.shape().len() != 1 {
                                return Err(Error::ShapeMismatch {
                                    op: prim.name(),
                                    lhs: inputs[0].shape().to_vec(),
                                    rhs: t.shape().to_vec(),
                                });
                            }
                            data.extend_from_slice(t.data());
                        }
                        let n = data.len();
                        Tensor::from_raw(vec![n], data)
                    } else {
                        // Stack rows.
                        let cols = inputs[0].cols();
                        let mut rows = 0;
                        let mut data = Vec::new();
                        for t in inputs {
                            let (r, c) = rank2(prim, t)?;
                            if c != cols {
                                return Err(Error::ShapeMismatch {
                                    op: prim.name(),
                                    lhs: inputs[0].shape().to_vec(),
                                    rhs: t.shape().to_vec(),
                                });
                            }
                            rows += r;
                            data.extend_from_slice(t.data());
                        }
                        Tensor::from_raw(vec![rows, cols], data)
                    }
                }
                1 => {
                    let rows = rank2(prim, inputs[0])?.0;
                    let mut total_cols = 0;
                    for t in inputs {
                        let (r, c) = rank2(prim, t)?;
                        if r != rows {
                            return Err(Error::ShapeMismatch {
                                op: prim.name(),
                                lhs: inputs[0].shape().to_vec(),
                                rhs: t.shape().to_vec(),
                            });
                        }
                        total_cols += c;
                    }
                    let mut data = vec![T::zero(); rows * total_cols];
                    let mut offset = 0;
                    for t in inputs {
                        let c = t.cols();
                        for r in 0..rows {
                            for j in 0..c {
                                data[r * total_cols + offset + j] = t.data()[r * c + j];
                            }
                        }
                        offset += c;
                    }
                    Tensor::from_raw(vec![rows, total_cols], data)
                }
                _ => Err(Error::InvalidShape {
                    op: prim.name(),
                    shape: vec![*axis],
                    msg: "axis must be 0 or 1".into(),
                }),
            }
        }
        Primitive::RowSelect(row) => {
            expect_arity(prim, inputs, 1)?;
            let (rows, cols) = rank2(prim, inputs[0])?;
            if *row >= rows {
                return Err(Error::IndexOutOfRange {
                    what: "row",
                    index: *row,
                    limit: rows,
                });
            }
            let data = inputs[0].data()[row * cols..(row + 1) * cols].to_vec();
            Tensor::from_raw(vec![1, cols], data)
        }
        Primitive::GatherRows(indices) => {
            expect_arity(prim, inputs, 1)?;
            let (rows, cols) = rank2(prim, inputs[0])?;
            let mut data = Vec::with_capacity(indices.len() * cols);
            for &idx in indices {
                if idx >= rows {
                    return Err(Error::IndexOutOfRange {
                        what: "gather row",
                        index: idx,
                        limit: rows,
                    });
                }
                data.extend_from_slice(&inputs[0].data()[idx * cols..(idx + 1) * cols]);
            }
            Tensor::from_raw(vec![indices.len(), cols], data)
        }
        Primitive::Dropout { keep } => {
            expect_arity(prim, inputs, 2)?;
            same_shape(prim, inputs[0], inputs[1])?;
            if *keep <= T::zero() || *keep > T::one() {
                return Err(Error::Numeric("dropout keep probability must be in (0, 1]".into()));
            }
            let data: Vec<T> = inputs[0]
                .data()
                .iter()
                .zip(inputs[1].data())
                .map(|(x, m)| *x * *m / *keep)
                .collect();
            Tensor::from_raw(inputs[0].shape().to_vec(), data)
        }
        Primitive::Reshape(shape) => {
            expect_arity(prim, inputs, 1)?;
            let numel: usize = shape.iter().product();
            if numel != inputs[0].numel() {
                return Err(Error::InvalidShape {
                    op: prim.name(),
                    shape: shape.clone(),
                    msg: format!("cannot reshape {} values", inputs[0].numel()),
                });
            }
            Tensor::from_raw(shape.clone(), inputs[0].data().to_vec())
        }
    }
}

fn unary<T: Real>(
    prim: &Primitive<T>,
    inputs: &[&Tensor<T>],
    f: impl Fn(T) -> T,
) -> Result<Tensor<T>> {
    expect_arity(prim, inputs, 1)?;
    let data: Vec<T> = inputs[0].data().iter().map(|x| f(*x)).collect();
    Tensor::from_raw(inputs[0].shape().to_vec(), data)
}

/// Relative error with an absolute floor, as used by the gradient checks:
/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error<T: Real>(analytic: T, numeric: T) -> T {
    let floor = T::lit(1e-8);
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Compare tape gradients of a scalar-valued function against central
/// finite differences, returning the max relative error over all
/// coordinates of all `params`.
///
/// The function is evaluated twice up front; if the two results differ
/// bitwise the check refuses to proceed (finite differences of a
/// non-deterministic function are meaningless).
pub fn grad_check<T, F>(f: F, params: &[Tensor<T>], step: T) -> Result<T>
where
    T: Real,
    F: Fn(&mut Tape<'static, T>, &[Var]) -> Result<Var>,
{
    let run = |ps: &[Tensor<T>]| -> Result<T> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|t| tape.leaf(t.clone())).collect();
        let y = f(&mut tape, &vars)?;
        let yt = tape.value(y);
        if yt.numel() != 1 {
            return Err(Error::LossNotScalar { shape: yt.shape().to_vec() });
        }
        Ok(yt.item())
    };

    let y1 = run(params)?;
    let y2 = run(params)?;
    if y1 != y2 {
        return Err(Error::NonDeterministic(format!("{y1} vs {y2}")));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|t| tape.leaf(t.clone())).collect();
    let y = f(&mut tape, &vars)?;
    tape.backward(y)?;
    let analytic: Vec<Vec<T>> = vars.iter().map(|v| tape.grad_or_zeros(*v)).collect();

    let mut work: Vec<Tensor<T>> = params.to_vec();
    let two_step = T::lit(2.0) * step;
    let mut max_err = T::zero();
    for pi in 0..params.len() {
        for ci in 0..params[pi].numel() {
            let orig = work[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + step;
            let fp = run(&work)?;
            work[pi].data_mut()[ci] = orig - step;
            let fm = run(&work)?;
            work[pi].data_mut()[ci] = orig;
            let diff = (fp - fm) / two_step;
            let err = relative_error(analytic[pi][ci], diff);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}

/// [`grad_check`] over a whole parameter set: `f` builds the scalar
/// objective on a tape backed by the set it is given.
pub fn grad_check_params<T, F>(params: &ParamSet<T>, step: T, f: F) -> Result<T>
where
    T: Real,
    F: for<'q> Fn(&mut Tape<'q, T>) -> Result<Var>,
{
    let run = |ps: &ParamSet<T>| -> Result<T> {
        let mut tape = Tape::over(ps);
        let y = f(&mut tape)?;
        let yt = tape.value(y);
        if yt.numel() != 1 {
            return Err(Error::LossNotScalar { shape: yt.shape().to_vec() });
        }
        Ok(yt.item())
    };

    let y1 = run(params)?;
    let y2 = run(params)?;
    if y1 != y2 {
        return Err(Error::NonDeterministic(format!("{y1} vs {y2}")));
    }

    let analytic = {
        let mut tape = Tape::over(params);
        let y = f(&mut tape)?;
        tape.backward(y)?;
        tape.param_grads()
    };

    let mut work = params.clone();
    let two_step = T::lit(2.0) * step;
    let mut max_err = T::zero();
    for (id, _, tensor) in params.iter() {
        let n = tensor.numel();
        for ci in 0..n {
            let orig = work.get(id).data()[ci];
            work.get_mut(id).data_mut()[ci] = orig + step;
            let fp = run(&work)?;
            work.get_mut(id).data_mut()[ci] = orig - step;
            let fm = run(&work)?;
            work.get_mut(id).data_mut()[ci] = orig;
            let diff = (fp - fm) / two_step;
            let a = analytic[id.index()]
                .as_ref()
                .map_or(T::zero(), |g| g[ci]);
            let err = relative_error(a, diff);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(data: Vec<f64>) -> Tensor<f64> {
        Tensor::vector(data).unwrap()
    }

    #[test]
    fn tanh_of_zero_vector_is_zero() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(t1(vec![0.0, 0.0, 0.0]));
        let y = tape.tanh(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(t1(vec![0.0, 0.0]));
        let y = tape.softmax_rows(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn matmul_identity_returns_input() {
        let mut tape: Tape<f64> = Tape::new();
        let eye = tape.leaf(
            Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
        );
        let a_data = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let a = tape.leaf(Tensor::matrix(3, 2, a_data.clone()).unwrap());
        let y = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(y).data(), a_data.as_slice());
    }

    #[test]
    fn tanh_derivative_at_zero_is_one() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let y = tape.tanh(x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0]);
    }

    #[test]
    fn sigmoid_derivative_at_zero_is_quarter() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let y = tape.sigmoid(x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.25]);
    }

    #[test]
    fn reused_input_accumulates_both_paths() {
        // f(x) = x * x has gradient 2x through additive accumulation.
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn zero_loss_gradient_zeroes_all_parameters() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(t1(vec![1.0, -2.0, 0.5]));
        let s = tape.sum(x).unwrap();
        let loss = tape.scale(s, 0.0).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn replaying_backward_is_bit_identical() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(t1(vec![0.3, -1.2, 2.7]));
        let h = tape.tanh(x).unwrap();
        let s = tape.sum(h).unwrap();
        tape.backward(s).unwrap();
        let g1 = tape.grad(x).unwrap().to_vec();
        tape.backward(s).unwrap();
        let g2 = tape.grad(x).unwrap().to_vec();
        assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn unreachable_leaf_reads_back_zero() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0));
        let unused = tape.leaf(t1(vec![5.0, 5.0]));
        let y = tape.tanh(x).unwrap();
        tape.backward(y).unwrap();
        assert!(tape.grad(unused).is_none());
        assert_eq!(tape.grad_or_zeros(unused), vec![0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = tape.leaf(Tensor::matrix(2, 2, vec![0.0; 4]).unwrap());
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn log_of_negative_is_a_numeric_error() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(t1(vec![-1.0]));
        let err = tape.log(x).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "log" }));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(t1(vec![1.0, 2.0]));
        let y = tape.tanh(x).unwrap();
        let err = tape.backward(y).unwrap_err();
        assert!(matches!(err, Error::LossNotScalar { .. }));
    }

    #[test]
    fn dropout_with_fixed_mask_is_deterministic() {
        let run = || {
            let mut tape: Tape<f64> = Tape::new();
            let x = tape.leaf(t1(vec![1.0, 2.0, 3.0, 4.0]));
            let mask = tape.leaf(t1(vec![1.0, 0.0, 1.0, 0.0]));
            let y = tape.dropout(x, mask, 0.5).unwrap();
            tape.value(y).data().to_vec()
        };
        assert_eq!(run(), run());
        assert_eq!(run(), vec![2.0, 0.0, 6.0, 0.0]);
    }

    #[test]
    fn param_registration_deduplicates() {
        let mut set: ParamSet<f64> = ParamSet::new();
        let w = set.insert("w", Tensor::scalar(2.0));
        let mut tape = Tape::over(&set);
        let a = tape.param(w);
        let b = tape.param(w);
        assert_eq!(a, b);
        // y = w * w -> dy/dw = 2w = 4.
        let y = tape.mul(a, b).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.param_grads()[0].as_ref().unwrap(), &vec![4.0]);
    }

    #[test]
    fn gather_rows_scatter_adds_repeats() {
        let mut tape: Tape<f64> = Tape::new();
        let table = tape.leaf(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let g = tape.gather_rows(table, vec![0, 2, 0]).unwrap();
        assert_eq!(tape.value(g).data(), &[1.0, 2.0, 5.0, 6.0, 1.0, 2.0]);
        let s = tape.sum(g).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(table).unwrap(), &[2.0, 2.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn concat_axis1_round_trips_gradients() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap());
        let b = tape.leaf(Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = tape.concat(1, &[a, b]).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 3]);
        assert_eq!(tape.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let s = tape.sum(c).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0, 1.0]);
        assert_eq!(tape.grad(b).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_check_passes_on_polynomial() {
        // f(x) = sum(x * x); analytic and central differences agree to
        // machine precision on polynomials.
        let err = grad_check(
            |tape, vars| {
                let sq = tape.mul(vars[0], vars[0])?;
                tape.sum(sq)
            },
            &[t1(vec![3.0, -1.5])],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "relative error {err}");
    }

    #[test]
    fn grad_check_detects_non_determinism() {
        use std::cell::Cell;
        let calls = Cell::new(0.0f64);
        let err = grad_check(
            |tape, vars| {
                calls.set(calls.get() + 1.0);
                let shifted = tape.add_const(vars[0], calls.get())?;
                tape.sum(shifted)
            },
            &[t1(vec![1.0])],
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic(_)));
    }

    #[test]
    fn corrupted_backward_rule_reads_as_half_error() {
        // A backward rule that doubles the true gradient produces a
        // relative error of |2g - g| / 2g = 0.5, which the checker flags.
        let g = 0.731_f64;
        let err = relative_error(2.0 * g, g);
        assert!((err - 0.5).abs() < 1e-12);
    }
}
