//! Dense row-major tensors and the handful of kernels a small ViT needs.
//!
//! Values are always stored as `f64`. The thread-local [`Precision`] switch
//! decides whether every freshly produced tensor is rounded through `f32`,
//! which gives 32-bit arithmetic semantics on outputs while keeping a single
//! storage type. Tests run in 64-bit (the default); training selects 32-bit.
//!
//! Tensors never alias: transpose, slice and friends copy.

mod gradcheck;
mod tape;

use std::cell::Cell;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use gradcheck::grad_check;
pub(crate) use tape::mean_std;
pub use tape::{Gradients, NoiseAmplitude, Tape, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    pub fn byte_width(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

thread_local! {
    static PRECISION: Cell<Precision> = const { Cell::new(Precision::F64) };
}

/// Precision in effect on the current thread.
pub fn precision() -> Precision {
    PRECISION.with(|p| p.get())
}

/// Switches the current thread's precision until the guard is dropped.
pub fn set_precision(p: Precision) -> PrecisionGuard {
    let previous = PRECISION.with(|cell| cell.replace(p));
    PrecisionGuard { previous }
}

#[must_use = "precision reverts when the guard is dropped"]
pub struct PrecisionGuard {
    previous: Precision,
}

impl Drop for PrecisionGuard {
    fn drop(&mut self) {
        PRECISION.with(|cell| cell.set(self.previous));
    }
}

fn round_in_place(data: &mut [f64]) {
    if precision() == Precision::F32 {
        for x in data.iter_mut() {
            *x = *x as f32 as f64;
        }
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        let head = &self.data[..self.data.len().min(SHOWN)];
        write!(f, "Tensor{:?} {:?}", self.shape, head)?;
        if self.data.len() > SHOWN {
            write!(f, "..")?;
        }
        Ok(())
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Builds a tensor, checking that `shape` has positive extents and covers `data`.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::contract(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        if numel_of(&shape) != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Self::from_parts(shape, data))
    }

    /// Unchecked constructor used by kernels whose shape arithmetic is already validated.
    pub(crate) fn from_parts(shape: Vec<usize>, mut data: Vec<f64>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        round_in_place(&mut data);
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    /// Stores `data` exactly as given, whatever the current precision.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(Vec::new(), vec![value])
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = numel_of(&shape);
        Self::from_parts(shape, vec![value; n])
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let data = (0..numel_of(&shape)).map(f).collect();
        Self::from_parts(shape, data)
    }

    /// Independent `N(0, std^2)` entries.
    pub fn randn(shape: impl Into<Vec<usize>>, std: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| std * rng.sample::<f64, _>(StandardNormal))
    }

    /// Independent `U(lo, hi)` entries.
    pub fn uniform(shape: impl Into<Vec<usize>>, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| rng.random_range(lo..hi))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access; copies the buffer first if it is shared.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::contract(format!(
                "item() on a tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Bitwise equality of shape and every scalar.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    fn last_dim(&self) -> Result<usize> {
        self.shape
            .last()
            .copied()
            .ok_or_else(|| Error::contract("operation needs a tensor of rank >= 1"))
    }

    // ---- linear algebra -------------------------------------------------

    /// Batched matrix product `[.., m, k] x [.., k, n]`.
    ///
    /// Batch prefixes must be equal, or one side must be a plain matrix that is
    /// shared across the other's batch.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let plan = MatmulPlan::new(self.shape(), rhs.shape())?;
        let mut out = vec![0.0; plan.out_numel()];
        let (m, k, n) = (plan.m, plan.k, plan.n);
        match plan.batching {
            Batching::SharedRhs => gemm(&self.data, &rhs.data, &mut out, plan.batch * m, k, n),
            Batching::Paired => {
                for b in 0..plan.batch {
                    gemm(
                        &self.data[b * m * k..(b + 1) * m * k],
                        &rhs.data[b * k * n..(b + 1) * k * n],
                        &mut out[b * m * n..(b + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            }
            Batching::SharedLhs => {
                for b in 0..plan.batch {
                    gemm(
                        &self.data,
                        &rhs.data[b * k * n..(b + 1) * k * n],
                        &mut out[b * m * n..(b + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        }
        Ok(Tensor::from_parts(plan.out_shape, out))
    }

    // ---- elementwise ----------------------------------------------------

    /// `self + rhs`, where the smaller operand's shape must be a suffix of the larger's.
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.broadcast_zip(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.broadcast_zip(rhs, "sub", |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.broadcast_zip(rhs, "mul", |a, b| a * b)
    }

    fn broadcast_zip(
        &self,
        rhs: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (out_shape, period) = broadcast_shape(op, &self.shape, &rhs.shape)?;
        let n = numel_of(&out_shape);
        let a_small = self.numel() < n;
        let data = (0..n)
            .map(|i| {
                let (ia, ib) = if a_small {
                    (i % period, i)
                } else {
                    (i, i % period)
                };
                f(self.data[ia], rhs.data[ib])
            })
            .collect();
        Ok(Tensor::from_parts(out_shape, data))
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|x| x * factor)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&x| f(x)).collect(),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        self.map(gelu_scalar)
    }

    // ---- layout ---------------------------------------------------------

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        let shape = shape.into();
        if numel_of(&shape) != self.numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    /// Swaps two axes (copying).
    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor> {
        let rank = self.rank();
        if a >= rank || b >= rank {
            return Err(Error::contract(format!(
                "transpose axes ({a}, {b}) out of range for shape {:?}",
                self.shape
            )));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(a, b);
        Ok(self.permute(&perm))
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub(crate) fn permute(&self, perm: &[usize]) -> Tensor {
        let rank = self.rank();
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        // Axes that stay put at the tail can be copied as contiguous chunks.
        let mut fixed = rank;
        while fixed > 0 && perm[fixed - 1] == fixed - 1 {
            fixed -= 1;
        }
        if fixed == 0 {
            return self.clone();
        }
        let chunk: usize = self.shape[fixed..].iter().product();
        let in_strides = strides(&self.shape);
        let outer_shape = &out_shape[..fixed];
        let mut out = Vec::with_capacity(self.numel());
        let mut index = vec![0usize; fixed];
        loop {
            let offset: usize = index
                .iter()
                .zip(perm)
                .map(|(&i, &p)| i * in_strides[p])
                .sum();
            out.extend_from_slice(&self.data[offset..offset + chunk]);
            // odometer increment
            let mut axis = fixed;
            loop {
                if axis == 0 {
                    return Tensor::from_parts(out_shape, out);
                }
                axis -= 1;
                index[axis] += 1;
                if index[axis] < outer_shape[axis] {
                    break;
                }
                index[axis] = 0;
            }
        }
    }

    /// `self[.., start..end, ..]` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor> {
        if axis >= self.rank() || start >= end || end > self.shape[axis] {
            return Err(Error::contract(format!(
                "slice {start}..{end} on axis {axis} of shape {:?}",
                self.shape
            )));
        }
        let (outer, len, inner) = split_at_axis(&self.shape, axis);
        let width = (end - start) * inner;
        let mut out = Vec::with_capacity(outer * width);
        for o in 0..outer {
            let base = o * len * inner + start * inner;
            out.extend_from_slice(&self.data[base..base + width]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = end - start;
        Ok(Tensor::from_parts(shape, out))
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        if axis >= first.rank() {
            return Err(Error::contract(format!(
                "concat axis {axis} out of range for shape {:?}",
                first.shape
            )));
        }
        for p in &parts[1..] {
            let compatible = p.rank() == first.rank()
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &first.shape, &p.shape));
            }
        }
        let (outer, _, inner) = split_at_axis(&first.shape, axis);
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let w = p.shape[axis] * inner;
                out.extend_from_slice(&p.data[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Tensor::from_parts(shape, out))
    }

    /// Stacks `n` copies along a new leading axis.
    pub fn repeat_leading(&self, n: usize) -> Result<Tensor> {
        if n == 0 {
            return Err(Error::contract("repeat_leading with n = 0"));
        }
        let mut out = Vec::with_capacity(n * self.numel());
        for _ in 0..n {
            out.extend_from_slice(&self.data);
        }
        let mut shape = vec![n];
        shape.extend_from_slice(&self.shape);
        Ok(Tensor::from_parts(shape, out))
    }

    // ---- reductions -----------------------------------------------------

    /// Sums out `axis`, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::contract(format!(
                "sum_axis({axis}) on shape {:?}",
                self.shape
            )));
        }
        let (outer, len, inner) = split_at_axis(&self.shape, axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                let src = &self.data[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Ok(Tensor::from_parts(shape, out))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let n = *self
            .shape
            .get(axis)
            .ok_or_else(|| Error::contract(format!("mean_axis({axis}) on {:?}", self.shape)))?;
        Ok(self.sum_axis(axis)?.scale(1.0 / n as f64))
    }

    pub fn sum_all(&self) -> Tensor {
        Tensor::scalar(self.data.iter().sum())
    }

    pub fn mean_all(&self) -> Tensor {
        Tensor::scalar(self.data.iter().sum::<f64>() / self.numel() as f64)
    }

    /// Euclidean norm of each last-axis slice; the last axis is removed.
    pub fn l2norm_lastdim(&self) -> Result<Tensor> {
        let n = self.last_dim()?;
        let out = self
            .data
            .chunks_exact(n)
            .map(|row| row.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        Ok(Tensor::from_parts(
            self.shape[..self.rank() - 1].to_vec(),
            out,
        ))
    }

    // ---- normalisation --------------------------------------------------

    /// Max-shifted softmax over the last axis.
    pub fn softmax_lastdim(&self) -> Result<Tensor> {
        let n = self.last_dim()?;
        let mut out = self.data.as_ref().clone();
        for row in out.chunks_exact_mut(n) {
            softmax_row(row);
        }
        Ok(Tensor::from_parts(self.shape.clone(), out))
    }

    pub fn layernorm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        Ok(layernorm_forward(self, gain, bias, eps)?.0)
    }

    /// Mean cross-entropy of `logits [N, C]` against integer labels.
    pub fn cross_entropy_logits(&self, labels: &[usize]) -> Result<Tensor> {
        Ok(cross_entropy_forward(self, labels)?.0)
    }
}

// ---- kernel helpers ------------------------------------------------------

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// `(prod(shape[..axis]), shape[axis], prod(shape[axis+1..]))`.
pub(crate) fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

/// Output shape and the element period of the smaller operand.
pub(crate) fn broadcast_shape(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<(Vec<usize>, usize)> {
    let (big, small) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if !big.ends_with(small) {
        return Err(Error::shape(op, a, b));
    }
    Ok((big.to_vec(), numel_of(small).max(1)))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub(crate) fn gelu_derivative(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub(crate) fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    let inv = 1.0 / total;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

/// Returns `(output, normalised input, reciprocal std per row)`.
pub(crate) fn layernorm_forward(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let n = x.last_dim()?;
    if gain.shape() != [n] || bias.shape() != [n] {
        return Err(Error::shape("layernorm", x.shape(), gain.shape()));
    }
    let rows = x.numel() / n;
    let mut xhat = Vec::with_capacity(x.numel());
    let mut out = Vec::with_capacity(x.numel());
    let mut rstd = Vec::with_capacity(rows);
    for row in x.data().chunks_exact(n) {
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let r = 1.0 / (var + eps).sqrt();
        rstd.push(r);
        for (i, v) in row.iter().enumerate() {
            let h = (v - mean) * r;
            xhat.push(h);
            out.push(h * gain.data[i] + bias.data[i]);
        }
    }
    Ok((
        Tensor::from_parts(x.shape.clone(), out),
        Tensor::from_parts(x.shape.clone(), xhat),
        rstd,
    ))
}

/// Returns `(mean loss, softmax probabilities)`.
pub(crate) fn cross_entropy_forward(logits: &Tensor, labels: &[usize]) -> Result<(Tensor, Tensor)> {
    let [n, c] = logits.shape() else {
        return Err(Error::contract(format!(
            "cross entropy expects [N, C] logits, got {:?}",
            logits.shape()
        )));
    };
    let (n, c) = (*n, *c);
    if labels.len() != n {
        return Err(Error::shape(
            "cross_entropy",
            logits.shape(),
            &[labels.len()],
        ));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::contract(format!("label {bad} outside 0..{c}")));
    }
    let mut probs = logits.data().to_vec();
    let mut loss = 0.0;
    for (row, &label) in probs.chunks_exact_mut(c).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        loss += lse - row[label];
        softmax_row(row);
    }
    Ok((
        Tensor::scalar(loss / n as f64),
        Tensor::from_parts(vec![n, c], probs),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Batching {
    /// rhs is a single matrix; lhs batch dims are folded into rows.
    SharedRhs,
    /// Equal batch prefixes.
    Paired,
    /// lhs is a single matrix applied to each rhs batch.
    SharedLhs,
}

#[derive(Clone, Debug)]
pub(crate) struct MatmulPlan {
    pub batching: Batching,
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub out_shape: Vec<usize>,
}

impl MatmulPlan {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::shape("matmul", a, b));
        }
        let (a_batch, a_mat) = a.split_at(a.len() - 2);
        let (b_batch, b_mat) = b.split_at(b.len() - 2);
        let (m, k) = (a_mat[0], a_mat[1]);
        let (k2, n) = (b_mat[0], b_mat[1]);
        if k != k2 {
            return Err(Error::shape("matmul", a, b));
        }
        let (batching, batch_shape) = if b_batch.is_empty() {
            (Batching::SharedRhs, a_batch)
        } else if a_batch == b_batch {
            (Batching::Paired, a_batch)
        } else if a_batch.is_empty() {
            (Batching::SharedLhs, b_batch)
        } else {
            return Err(Error::shape("matmul", a, b));
        };
        let mut out_shape = batch_shape.to_vec();
        out_shape.extend([m, n]);
        Ok(MatmulPlan {
            batching,
            batch: batch_shape.iter().product(),
            m,
            k,
            n,
            out_shape,
        })
    }

    pub fn out_numel(&self) -> usize {
        self.batch * self.m * self.n
    }
}

/// `out += a[m,k] * b[k,n]`.
pub(crate) fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// `out += a[m,k] * b[n,k]^T`.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] += a_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out += a[k,m]^T * b[k,n]`.
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &api) in a_row.iter().enumerate() {
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += api * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_dot() {
        let id = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let m = t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        assert_eq!(id.matmul(&m).unwrap().data(), m.data());
        let row = t(&[1, 2], &[1.0, 2.0]);
        let col = t(&[2, 1], &[3.0, 4.0]);
        assert_eq!(row.matmul(&col).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::randn([5, 7], 1.0, &mut rng);
        let b = Tensor::randn([7, 3], 1.0, &mut rng);
        let got = a.matmul(&b).unwrap();
        for (g, w) in got.data().iter().zip(naive_matmul(&a, &b)) {
            assert!((g - w).abs() <= 1e-6 * w.abs().max(1.0));
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros([2, 3]);
        let b = Tensor::zeros([4, 2]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn batched_matmul_modes_agree_with_per_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::randn([3, 4, 5], 1.0, &mut rng);
        let w = Tensor::randn([5, 2], 1.0, &mut rng);
        let shared = a.matmul(&w).unwrap();
        let paired = a.matmul(&w.repeat_leading(3).unwrap()).unwrap();
        assert!(shared.max_abs_diff(&paired).unwrap() < 1e-12);
        let lhs = Tensor::randn([4, 5], 1.0, &mut rng);
        let b = Tensor::randn([3, 5, 2], 1.0, &mut rng);
        let a_shared = lhs.matmul(&b).unwrap();
        let a_paired = lhs.repeat_leading(3).unwrap().matmul(&b).unwrap();
        assert!(a_shared.max_abs_diff(&a_paired).unwrap() < 1e-12);
    }

    #[test]
    fn softmax_examples() {
        let s = t(&[3], &[0.0, 0.0, 0.0]).softmax_lastdim().unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = t(&[2], &[1000.0, 0.0]).softmax_lastdim().unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1].abs() < 1e-12);
        let s = t(&[3], &[1.0, 2.0, 3.0]).softmax_lastdim().unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|x| x.exp()).sum();
        for (i, v) in s.data().iter().enumerate() {
            assert!((v - ((i + 1) as f64).exp() / z).abs() < 1e-15);
        }
    }

    #[test]
    fn layernorm_examples() {
        let one = Tensor::ones([2]);
        let zero = Tensor::zeros([2]);
        let c = t(&[2], &[3.0, 3.0]).layernorm(&one, &zero, 1e-5).unwrap();
        assert_eq!(c.data(), &[0.0, 0.0]);
        let c = t(&[2], &[1.0, -1.0]).layernorm(&one, &zero, 1e-15).unwrap();
        assert!((c.data()[0] - 1.0).abs() < 1e-12 && (c.data()[1] + 1.0).abs() < 1e-12);

        let x = [0.3, -1.2, 2.5, 0.7];
        let mean = x.iter().sum::<f64>() / 4.0;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        let got = t(&[4], &x)
            .layernorm(&Tensor::ones([4]), &Tensor::zeros([4]), 1e-5)
            .unwrap();
        for (g, v) in got.data().iter().zip(x) {
            assert!((g - (v - mean) / (var + 1e-5).sqrt()).abs() < 1e-12);
        }
        let got_mean = got.data().iter().sum::<f64>() / 4.0;
        let got_var = got.data().iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(got_mean.abs() < 1e-5 && (got_var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn norms_and_cross_entropy() {
        assert_eq!(
            t(&[2], &[3.0, 4.0]).l2norm_lastdim().unwrap().data(),
            &[5.0]
        );
        assert_eq!(Tensor::zeros([3]).l2norm_lastdim().unwrap().data(), &[0.0]);
        for c in [2usize, 10, 37] {
            let ce = Tensor::full([3, c], 0.25)
                .cross_entropy_logits(&[0, c - 1, c / 2])
                .unwrap();
            assert!((ce.item().unwrap() - (c as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn reshape_transpose_round_trip_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn([2, 3, 4, 5], 1.0, &mut rng);
        let back = x
            .transpose(1, 2)
            .unwrap()
            .reshape([2, 4, 15])
            .unwrap()
            .reshape([2, 4, 3, 5])
            .unwrap()
            .transpose(1, 2)
            .unwrap();
        assert!(back.bit_eq(&x));
    }

    #[test]
    fn permute_matches_index_formula() {
        let x = Tensor::from_fn([2, 3, 4], |i| i as f64);
        let p = x.permute(&[2, 0, 1]);
        assert_eq!(p.shape(), &[4, 2, 3]);
        for c in 0..4 {
            for a in 0..2 {
                for b in 0..3 {
                    assert_eq!(p.data()[c * 6 + a * 3 + b], (a * 12 + b * 4 + c) as f64);
                }
            }
        }
    }

    #[test]
    fn slice_concat_inverse() {
        let x = Tensor::from_fn([2, 5, 3], |i| i as f64);
        let a = x.slice(1, 0, 2).unwrap();
        let b = x.slice(1, 2, 5).unwrap();
        assert!(Tensor::concat(&[&a, &b], 1).unwrap().bit_eq(&x));
        assert!(x.slice(1, 3, 3).is_err());
    }

    #[test]
    fn broadcast_add_suffix() {
        let x = Tensor::zeros([2, 3]);
        let b = t(&[3], &[1.0, 2.0, 3.0]);
        assert_eq!(x.add(&b).unwrap().data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        assert!(x.add(&Tensor::zeros([2])).is_err());
    }

    #[test]
    fn f32_precision_rounds_outputs() {
        let x = Tensor::scalar(0.1);
        assert_eq!(x.data()[0], 0.1);
        let _g = set_precision(Precision::F32);
        let y = x.scale(1.0);
        assert_eq!(y.data()[0], 0.1f32 as f64);
        drop(_g);
        assert_eq!(precision(), Precision::F64);
    }

    #[test]
    fn gelu_reference_values() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        // tanh-approximate GELU(1) = 0.8411919906...
        assert!((gelu_scalar(1.0) - 0.841_191_990_608_276_8).abs() < 1e-12);
        let h = 1e-6;
        for x in [-2.0, -0.3, 0.0, 0.9, 3.1] {
            let fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert!((fd - gelu_derivative(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(Tensor::new([0, 3], vec![]).is_err());
        assert!(Tensor::new([2, 3], vec![0.0; 5]).is_err());
    }
}
