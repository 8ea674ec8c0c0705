//! Reverse-mode differentiation over a linear record of executed ops.
//!
//! A [`Var`] is a handle into a [`Tape`]. Ops append a node holding the
//! output value plus whatever the backward rule needs; [`Tape::backward`]
//! then walks the nodes in exact reverse execution order. A tape built with
//! [`Tape::no_grad`] keeps only values.

use std::cell::RefCell;

use super::{
    cross_entropy_forward, gelu_derivative, gemm_nt, gemm_tn, layernorm_forward, split_at_axis,
    Batching, MatmulPlan, Tensor,
};
use crate::error::{Error, Result};

/// Amplitude of the matched-statistics noise matrix.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NoiseAmplitude {
    /// Noise scaled to the map's own mean and standard deviation.
    #[default]
    Matched,
    /// Mean and standard deviation replaced by zero; the map passes through.
    Zero,
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Gelu(usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Slice {
        src: usize,
        axis: usize,
        start: usize,
    },
    Concat {
        srcs: Vec<usize>,
        axis: usize,
    },
    RepeatLeading(usize),
    SumAxis(usize, usize),
    SumAll(usize),
    L2Norm(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Tensor,
        rstd: Vec<f64>,
    },
    CrossEntropy {
        logits: usize,
        probs: Tensor,
        labels: Vec<usize>,
    },
    MatchedNoise {
        src: usize,
        z: Tensor,
        mu: f64,
        sigma: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// A tape that evaluates ops but records no backward information.
    pub fn no_grad() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let op = if self.grad_enabled { op } else { Op::Leaf };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let values: Vec<Tensor> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().collect();
        let out = Tensor::concat(&refs, axis)?;
        Ok(self.push(
            out,
            Op::Concat {
                srcs: parts.iter().map(|p| p.id).collect(),
                axis,
            },
        ))
    }

    /// Gradients of the scalar `loss` with respect to every recorded node.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !self.grad_enabled {
            return Err(Error::contract("backward on a no_grad tape"));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::ones(nodes[loss.id].value.shape().to_vec()));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].clone() else { continue };
            for (input, contribution) in backprop(&nodes, id, &g)? {
                accumulate(&mut grads[input], contribution);
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(slot: &mut Option<Tensor>, contribution: Tensor) {
    match slot {
        None => *slot = Some(contribution),
        Some(existing) => {
            for (e, c) in existing.data_mut().iter_mut().zip(contribution.data()) {
                *e += c;
            }
        }
    }
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros if the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn unary(&self, out: Tensor, op: Op) -> Var<'t> {
        self.tape.push(out, op)
    }

    pub fn matmul(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        let out = self.value().matmul(&rhs.value())?;
        Ok(self.unary(out, Op::MatMul(self.id, rhs.id)))
    }

    pub fn add(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        let out = self.value().add(&rhs.value())?;
        Ok(self.unary(out, Op::Add(self.id, rhs.id)))
    }

    pub fn sub(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        let out = self.value().sub(&rhs.value())?;
        Ok(self.unary(out, Op::Sub(self.id, rhs.id)))
    }

    pub fn mul(&self, rhs: Var<'t>) -> Result<Var<'t>> {
        let out = self.value().mul(&rhs.value())?;
        Ok(self.unary(out, Op::Mul(self.id, rhs.id)))
    }

    pub fn scale(&self, factor: f64) -> Var<'t> {
        let out = self.value().scale(factor);
        self.unary(out, Op::Scale(self.id, factor))
    }

    pub fn gelu(&self) -> Var<'t> {
        let out = self.value().gelu();
        self.unary(out, Op::Gelu(self.id))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let out = self.value().reshape(shape)?;
        Ok(self.unary(out, Op::Reshape(self.id)))
    }

    pub fn transpose(&self, a: usize, b: usize) -> Result<Var<'t>> {
        let out = self.value().transpose(a, b)?;
        let mut perm: Vec<usize> = (0..out.rank()).collect();
        perm.swap(a, b);
        Ok(self.unary(out, Op::Permute(self.id, perm)))
    }

    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        let out = self.value().slice(axis, start, end)?;
        Ok(self.unary(
            out,
            Op::Slice {
                src: self.id,
                axis,
                start,
            },
        ))
    }

    pub fn repeat_leading(&self, n: usize) -> Result<Var<'t>> {
        let out = self.value().repeat_leading(n)?;
        Ok(self.unary(out, Op::RepeatLeading(self.id)))
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        let out = self.value().sum_axis(axis)?;
        Ok(self.unary(out, Op::SumAxis(self.id, axis)))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        let summed = self.sum_axis(axis)?;
        let n = self.shape()[axis];
        Ok(summed.scale(1.0 / n as f64))
    }

    pub fn sum(&self) -> Var<'t> {
        let out = self.value().sum_all();
        self.unary(out, Op::SumAll(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().numel();
        self.sum().scale(1.0 / n as f64)
    }

    pub fn l2norm_lastdim(&self) -> Result<Var<'t>> {
        let out = self.value().l2norm_lastdim()?;
        Ok(self.unary(out, Op::L2Norm(self.id)))
    }

    pub fn softmax_lastdim(&self) -> Result<Var<'t>> {
        let out = self.value().softmax_lastdim()?;
        Ok(self.unary(out, Op::Softmax(self.id)))
    }

    pub fn layernorm(&self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (out, xhat, rstd) =
            layernorm_forward(&self.value(), &gain.value(), &bias.value(), eps)?;
        Ok(self.unary(
            out,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                rstd,
            },
        ))
    }

    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<'t>> {
        let (loss, probs) = cross_entropy_forward(&self.value(), labels)?;
        Ok(self.unary(
            loss,
            Op::CrossEntropy {
                logits: self.id,
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// `self - offdiag * (sigma * z + mu)` over square trailing matrices, where
    /// `mu`/`sigma` are the population mean and standard deviation of all of
    /// `self`'s entries. Returns the output and the `(mu, sigma)` used.
    pub fn subtract_matched_noise(
        &self,
        z: &Tensor,
        amplitude: NoiseAmplitude,
    ) -> Result<(Var<'t>, f64, f64)> {
        let a = self.value();
        let (out, mu, sigma) = matched_noise_forward(&a, z, amplitude)?;
        let var = match amplitude {
            NoiseAmplitude::Matched => self.unary(
                out,
                Op::MatchedNoise {
                    src: self.id,
                    z: z.clone(),
                    mu,
                    sigma,
                },
            ),
            // a - 0: gradient is the identity
            NoiseAmplitude::Zero => self.unary(out, Op::Scale(self.id, 1.0)),
        };
        Ok((var, mu, sigma))
    }
}

/// Population mean and standard deviation of every entry.
pub(crate) fn mean_std(data: &[f64]) -> (f64, f64) {
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn matched_noise_forward(
    a: &Tensor,
    z: &Tensor,
    amplitude: NoiseAmplitude,
) -> Result<(Tensor, f64, f64)> {
    let rank = a.rank();
    if a.shape() != z.shape() || rank < 2 || a.shape()[rank - 1] != a.shape()[rank - 2] {
        return Err(Error::shape("subtract_matched_noise", a.shape(), z.shape()));
    }
    let t = a.shape()[rank - 1];
    let (mu, sigma) = match amplitude {
        NoiseAmplitude::Matched => mean_std(a.data()),
        NoiseAmplitude::Zero => (0.0, 0.0),
    };
    let out = a
        .data()
        .iter()
        .zip(z.data())
        .enumerate()
        .map(|(i, (&x, &zi))| {
            let within = i % (t * t);
            let noise = if within / t == within % t {
                0.0
            } else {
                sigma * zi + mu
            };
            x - noise
        })
        .collect();
    Ok((Tensor::from_parts(a.shape().to_vec(), out), mu, sigma))
}

/// Sums `g` (shape of the larger operand) down to `small_shape`.
fn reduce_to(g: &Tensor, small_shape: &[usize]) -> Tensor {
    if g.shape() == small_shape {
        return g.clone();
    }
    let period: usize = small_shape.iter().product();
    let mut out = vec![0.0; period];
    for (i, v) in g.data().iter().enumerate() {
        out[i % period] += v;
    }
    Tensor::from_parts(small_shape.to_vec(), out)
}

fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn backprop(nodes: &[Node], id: usize, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
    let node = &nodes[id];
    let val = |i: usize| &nodes[i].value;
    let out = match &node.op {
        Op::Leaf => Vec::new(),
        Op::MatMul(a, b) => {
            let (ga, gb) = matmul_backward(val(*a), val(*b), g)?;
            vec![(*a, ga), (*b, gb)]
        }
        Op::Add(a, b) => {
            vec![
                (*a, reduce_to(g, val(*a).shape())),
                (*b, reduce_to(g, val(*b).shape())),
            ]
        }
        Op::Sub(a, b) => vec![
            (*a, reduce_to(g, val(*a).shape())),
            (*b, reduce_to(g, val(*b).shape()).scale(-1.0)),
        ],
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let ga = g.mul(vb)?;
            let gb = g.mul(va)?;
            vec![
                (*a, reduce_to(&ga, va.shape())),
                (*b, reduce_to(&gb, vb.shape())),
            ]
        }
        Op::Scale(a, c) => vec![(*a, g.scale(*c))],
        Op::Gelu(a) => {
            let x = val(*a);
            let data = x
                .data()
                .iter()
                .zip(g.data())
                .map(|(&xi, &gi)| gi * gelu_derivative(xi))
                .collect();
            vec![(*a, Tensor::from_parts(x.shape().to_vec(), data))]
        }
        Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape().to_vec())?)],
        Op::Permute(a, perm) => vec![(*a, g.permute(&inverse_permutation(perm)))],
        Op::Slice { src, axis, start } => {
            let shape = val(*src).shape();
            let (outer, len, inner) = split_at_axis(shape, *axis);
            let width = g.shape()[*axis] * inner;
            let mut full = vec![0.0; val(*src).numel()];
            for o in 0..outer {
                let dst = o * len * inner + start * inner;
                full[dst..dst + width].copy_from_slice(&g.data()[o * width..(o + 1) * width]);
            }
            vec![(*src, Tensor::from_parts(shape.to_vec(), full))]
        }
        Op::Concat { srcs, axis } => {
            let mut offset = 0;
            let mut grads = Vec::with_capacity(srcs.len());
            for &s in srcs {
                let len = val(s).shape()[*axis];
                grads.push((s, g.slice(*axis, offset, offset + len)?));
                offset += len;
            }
            grads
        }
        Op::RepeatLeading(a) => vec![(*a, g.sum_axis(0)?)],
        Op::SumAxis(a, axis) => {
            let shape = val(*a).shape();
            let (outer, len, inner) = split_at_axis(shape, *axis);
            let mut full = Vec::with_capacity(val(*a).numel());
            for o in 0..outer {
                let row = &g.data()[o * inner..(o + 1) * inner];
                for _ in 0..len {
                    full.extend_from_slice(row);
                }
            }
            vec![(*a, Tensor::from_parts(shape.to_vec(), full))]
        }
        Op::SumAll(a) => vec![(*a, Tensor::full(val(*a).shape().to_vec(), g.data()[0]))],
        Op::L2Norm(a) => {
            let x = val(*a);
            let n = *x.shape().last().unwrap_or(&1);
            let norms = node.value.data();
            let mut data = Vec::with_capacity(x.numel());
            for ((row, &norm), &gi) in x.data().chunks_exact(n).zip(norms).zip(g.data()) {
                for &v in row {
                    data.push(if norm > 0.0 { gi * v / norm } else { 0.0 });
                }
            }
            vec![(*a, Tensor::from_parts(x.shape().to_vec(), data))]
        }
        Op::Softmax(a) => {
            let y = &node.value;
            let n = *y.shape().last().unwrap_or(&1);
            let mut data = Vec::with_capacity(y.numel());
            for (yr, gr) in y.data().chunks_exact(n).zip(g.data().chunks_exact(n)) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                data.extend(yr.iter().zip(gr).map(|(yi, gi)| yi * (gi - dot)));
            }
            vec![(*a, Tensor::from_parts(y.shape().to_vec(), data))]
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let n = *xhat.shape().last().unwrap_or(&1);
            let gamma = val(*gain).data();
            let mut dx = Vec::with_capacity(xhat.numel());
            let mut dgain = vec![0.0; n];
            let mut dbias = vec![0.0; n];
            for ((hr, gr), &r) in xhat
                .data()
                .chunks_exact(n)
                .zip(g.data().chunks_exact(n))
                .zip(rstd)
            {
                let mut mean_d = 0.0;
                let mut mean_dh = 0.0;
                for i in 0..n {
                    let d = gr[i] * gamma[i];
                    mean_d += d;
                    mean_dh += d * hr[i];
                    dgain[i] += gr[i] * hr[i];
                    dbias[i] += gr[i];
                }
                mean_d /= n as f64;
                mean_dh /= n as f64;
                dx.extend((0..n).map(|i| r * (gr[i] * gamma[i] - mean_d - hr[i] * mean_dh)));
            }
            vec![
                (*x, Tensor::from_parts(xhat.shape().to_vec(), dx)),
                (*gain, Tensor::from_parts(vec![n], dgain)),
                (*bias, Tensor::from_parts(vec![n], dbias)),
            ]
        }
        Op::CrossEntropy {
            logits,
            probs,
            labels,
        } => {
            let (n, c) = (probs.shape()[0], probs.shape()[1]);
            let scale = g.data()[0] / n as f64;
            let mut data = probs.data().to_vec();
            for (row, &l) in data.chunks_exact_mut(c).zip(labels) {
                row[l] -= 1.0;
                for v in row.iter_mut() {
                    *v *= scale;
                }
            }
            vec![(*logits, Tensor::from_parts(vec![n, c], data))]
        }
        Op::MatchedNoise { src, z, mu, sigma } => {
            let a = val(*src);
            let t = *a.shape().last().unwrap_or(&1);
            let count = a.numel() as f64;
            let mut s_z = 0.0;
            let mut s_m = 0.0;
            for (i, (&gi, &zi)) in g.data().iter().zip(z.data()).enumerate() {
                let within = i % (t * t);
                if within / t != within % t {
                    s_z += gi * zi;
                    s_m += gi;
                }
            }
            let sigma_term = if *sigma > 0.0 {
                s_z / (count * sigma)
            } else {
                0.0
            };
            let data = a
                .data()
                .iter()
                .zip(g.data())
                .map(|(&aj, &gj)| gj - sigma_term * (aj - mu) - s_m / count)
                .collect();
            vec![(*src, Tensor::from_parts(a.shape().to_vec(), data))]
        }
    };
    Ok(out)
}

fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor)> {
    let plan = MatmulPlan::new(a.shape(), b.shape())?;
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let mut ga = vec![0.0; a.numel()];
    let mut gb = vec![0.0; b.numel()];
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    match plan.batching {
        Batching::SharedRhs => {
            let rows = plan.batch * m;
            gemm_nt(gd, bd, &mut ga, rows, n, k);
            gemm_tn(ad, gd, &mut gb, k, rows, n);
        }
        Batching::Paired => {
            for i in 0..plan.batch {
                let (sa, sb, sg) = (i * m * k, i * k * n, i * m * n);
                gemm_nt(
                    &gd[sg..sg + m * n],
                    &bd[sb..sb + k * n],
                    &mut ga[sa..sa + m * k],
                    m,
                    n,
                    k,
                );
                gemm_tn(
                    &ad[sa..sa + m * k],
                    &gd[sg..sg + m * n],
                    &mut gb[sb..sb + k * n],
                    k,
                    m,
                    n,
                );
            }
        }
        Batching::SharedLhs => {
            for i in 0..plan.batch {
                let (sb, sg) = (i * k * n, i * m * n);
                gemm_nt(&gd[sg..sg + m * n], &bd[sb..sb + k * n], &mut ga, m, n, k);
                gemm_tn(ad, &gd[sg..sg + m * n], &mut gb[sb..sb + k * n], k, m, n);
            }
        }
    }
    Ok((
        Tensor::from_parts(a.shape().to_vec(), ga),
        Tensor::from_parts(b.shape().to_vec(), gb),
    ))
}
