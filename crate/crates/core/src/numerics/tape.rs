//! Reverse-mode differentiation over a fixed operator set.
//!
//! A [`Tape`] records every primitive executed during a forward pass; calling
//! [`Tape::backward`] on a scalar replays the record in reverse and
//! accumulates exact gradients on every `requires_grad` leaf. Tapes are
//! single-threaded; tensors are immutable and may be shared across tapes.

use std::sync::Arc;

use rustfft::num_complex::Complex64;

use super::kernels::{self, BiquadSection, ResampleMap};
use super::stft::StftKernel;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BCE_CLAMP: f64 = 1e-7;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Discriminant of a recorded op, for tape inspection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Conv1d,
    ConvTranspose1d,
    Dense,
    BatchNorm1d,
    Relu,
    Sigmoid,
    Hadamard,
    ConcatChannels,
    ConcatBatch,
    SliceBatch,
    Add,
    Scale,
    Sum,
    MeanTime,
    Sqrt,
    Log,
    LogFloor,
    MulScalar,
    L1Loss,
    BceLoss,
    PadRight,
    TruncRight,
    ClampSym,
    DelayAdd,
    Biquad,
    Resample,
    StftMagnitude,
    Reshape,
}

/// Per-channel batch statistics captured by a train-mode batch norm,
/// for the caller's running-average update.
#[derive(Clone, Debug)]
pub struct BnStats {
    pub mean: Vec<f64>,
    /// Biased (1/N) variance over the (batch, length) axes.
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Clone)]
enum Op {
    Leaf,
    Conv1d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    ConvTranspose1d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    BatchNorm1d {
        input: Var,
        gamma: Var,
        beta: Var,
        train: bool,
        mean: Arc<Vec<f64>>,
        inv_std: Arc<Vec<f64>>,
    },
    Relu {
        input: Var,
    },
    Sigmoid {
        input: Var,
    },
    Hadamard {
        a: Var,
        b: Var,
    },
    ConcatChannels {
        a: Var,
        b: Var,
    },
    ConcatBatch {
        items: Arc<Vec<Var>>,
    },
    SliceBatch {
        input: Var,
        index: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        c: f64,
    },
    Sum {
        input: Var,
    },
    MeanTime {
        input: Var,
    },
    Sqrt {
        input: Var,
    },
    Log {
        input: Var,
    },
    LogFloor {
        input: Var,
        floor: f64,
    },
    MulScalar {
        input: Var,
        scalar: Var,
    },
    L1Loss {
        a: Var,
        b: Var,
    },
    BceLoss {
        pred: Var,
        target: Var,
    },
    PadRight {
        input: Var,
        n: usize,
    },
    TruncRight {
        input: Var,
    },
    ClampSym {
        input: Var,
        bound: f64,
    },
    DelayAdd {
        input: Var,
        delay: usize,
        gain: f64,
    },
    Biquad {
        input: Var,
        sections: Arc<Vec<BiquadSection>>,
    },
    Resample {
        input: Var,
        map: Arc<ResampleMap>,
    },
    StftMagnitude {
        input: Var,
        kernel: Arc<StftKernel>,
        spectra: Arc<Vec<Complex64>>,
    },
    Reshape {
        input: Var,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv1d { .. } => OpKind::Conv1d,
            Op::ConvTranspose1d { .. } => OpKind::ConvTranspose1d,
            Op::Dense { .. } => OpKind::Dense,
            Op::BatchNorm1d { .. } => OpKind::BatchNorm1d,
            Op::Relu { .. } => OpKind::Relu,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::Hadamard { .. } => OpKind::Hadamard,
            Op::ConcatChannels { .. } => OpKind::ConcatChannels,
            Op::ConcatBatch { .. } => OpKind::ConcatBatch,
            Op::SliceBatch { .. } => OpKind::SliceBatch,
            Op::Add { .. } => OpKind::Add,
            Op::Scale { .. } => OpKind::Scale,
            Op::Sum { .. } => OpKind::Sum,
            Op::MeanTime { .. } => OpKind::MeanTime,
            Op::Sqrt { .. } => OpKind::Sqrt,
            Op::Log { .. } => OpKind::Log,
            Op::LogFloor { .. } => OpKind::LogFloor,
            Op::MulScalar { .. } => OpKind::MulScalar,
            Op::L1Loss { .. } => OpKind::L1Loss,
            Op::BceLoss { .. } => OpKind::BceLoss,
            Op::PadRight { .. } => OpKind::PadRight,
            Op::TruncRight { .. } => OpKind::TruncRight,
            Op::ClampSym { .. } => OpKind::ClampSym,
            Op::DelayAdd { .. } => OpKind::DelayAdd,
            Op::Biquad { .. } => OpKind::Biquad,
            Op::Resample { .. } => OpKind::Resample,
            Op::StftMagnitude { .. } => OpKind::StftMagnitude,
            Op::Reshape { .. } => OpKind::Reshape,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Op kinds recorded from node index `mark` onward (see [`Tape::mark`]).
    pub fn op_kinds_since(&self, mark: usize) -> Vec<OpKind> {
        self.nodes[mark..].iter().map(|n| n.op.kind()).collect()
    }

    /// Current node count; pass to [`Tape::op_kinds_since`] to inspect a span.
    pub fn mark(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ── forward ops ─────────────────────────────────────────────────────

    pub fn conv1d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let x = self.value(input).clone();
        let w = self.value(weight).clone();
        let b = self.value(bias).clone();
        let (bn, ci, l) = x.dims3()?;
        let (co, wci, k) = w.dims3()?;
        if wci != ci {
            return Err(Error::contract(format!(
                "conv1d: input has {ci} channels, weight expects {wci}"
            )));
        }
        if b.shape() != [co] {
            return Err(Error::contract("conv1d: bias shape must be [out_channels]"));
        }
        if stride < 1 || k < 1 {
            return Err(Error::contract("conv1d: stride and kernel must be >= 1"));
        }
        let lout = kernels::conv1d_out_len(l, k, stride, padding).ok_or_else(|| {
            Error::contract(format!(
                "conv1d: window k={k} does not fit input length {l} with padding {padding}"
            ))
        })?;
        let mut out = vec![0.0; bn * co * lout];
        let mut scratch = Vec::new();
        for item in 0..bn {
            kernels::conv1d_item(
                &x.data()[item * ci * l..(item + 1) * ci * l],
                ci,
                l,
                w.data(),
                b.data(),
                co,
                k,
                stride,
                padding,
                &mut out[item * co * lout..(item + 1) * co * lout],
                lout,
                &mut scratch,
            );
        }
        let rg = self.needs_grad(&[input, weight, bias]);
        Ok(self.push(
            Tensor::new(vec![bn, co, lout], out)?,
            Op::Conv1d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            rg,
        ))
    }

    pub fn conv1d_transpose(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var> {
        let x = self.value(input).clone();
        let w = self.value(weight).clone();
        let b = self.value(bias).clone();
        let (bn, ci, l) = x.dims3()?;
        let (wci, co, k) = w.dims3()?;
        if wci != ci {
            return Err(Error::contract(format!(
                "conv1d_transpose: input has {ci} channels, weight expects {wci}"
            )));
        }
        if b.shape() != [co] {
            return Err(Error::contract(
                "conv1d_transpose: bias shape must be [out_channels]",
            ));
        }
        if output_padding >= stride {
            return Err(Error::contract(format!(
                "conv1d_transpose: output_padding {output_padding} must be < stride {stride}"
            )));
        }
        let lout = kernels::convt1d_out_len(l, k, stride, padding, output_padding)
            .filter(|&lo| lo > 0)
            .ok_or_else(|| {
                Error::contract("conv1d_transpose: degenerate output length".to_string())
            })?;
        let mut out = vec![0.0; bn * co * lout];
        let mut scratch = Vec::new();
        for item in 0..bn {
            kernels::convt1d_item(
                &x.data()[item * ci * l..(item + 1) * ci * l],
                ci,
                l,
                w.data(),
                b.data(),
                co,
                k,
                stride,
                padding,
                lout,
                &mut out[item * co * lout..(item + 1) * co * lout],
                &mut scratch,
            );
        }
        let rg = self.needs_grad(&[input, weight, bias]);
        Ok(self.push(
            Tensor::new(vec![bn, co, lout], out)?,
            Op::ConvTranspose1d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            rg,
        ))
    }

    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let x = self.value(input).clone();
        let w = self.value(weight).clone();
        let b = self.value(bias).clone();
        let (bn, n) = x.dims2()?;
        let (m, wn) = w.dims2()?;
        if wn != n {
            return Err(Error::contract(format!(
                "dense: input width {n} does not match weight width {wn}"
            )));
        }
        if b.shape() != [m] {
            return Err(Error::contract("dense: bias shape must be [out_features]"));
        }
        let mut out = vec![0.0; bn * m];
        kernels::dense_forward(x.data(), bn, n, w.data(), b.data(), m, &mut out);
        let rg = self.needs_grad(&[input, weight, bias]);
        Ok(self.push(
            Tensor::new(vec![bn, m], out)?,
            Op::Dense {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    /// Batch norm over the (batch, length) axes of a `[B, C, L]` tensor.
    ///
    /// Train mode computes batch statistics (requires `B*L >= 2`) and
    /// returns them so the caller can maintain running averages; eval mode
    /// normalizes with the supplied `running` statistics.
    pub fn batch_norm1d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
        train: bool,
    ) -> Result<(Var, Option<BnStats>)> {
        let x = self.value(input).clone();
        let g = self.value(gamma).clone();
        let be = self.value(beta).clone();
        let (bn, c, l) = x.dims3()?;
        if g.shape() != [c] || be.shape() != [c] {
            return Err(Error::contract("batch_norm1d: gamma/beta must be [C]"));
        }
        let count = bn * l;
        let (mean, var): (Vec<f64>, Vec<f64>) = if train {
            if count < 2 {
                return Err(Error::contract(
                    "batch_norm1d: train mode needs at least 2 samples per channel",
                ));
            }
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for item in 0..bn {
                    let row = &x.data()[(item * c + ch) * l..(item * c + ch + 1) * l];
                    s += row.iter().sum::<f64>();
                }
                let mu = s / count as f64;
                let mut sq = 0.0;
                for item in 0..bn {
                    let row = &x.data()[(item * c + ch) * l..(item * c + ch + 1) * l];
                    sq += row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
                }
                mean[ch] = mu;
                var[ch] = sq / count as f64;
            }
            (mean, var)
        } else {
            let (rm, rv) = running.ok_or_else(|| {
                Error::contract("batch_norm1d: eval mode requires running statistics")
            })?;
            if rm.len() != c || rv.len() != c {
                return Err(Error::contract("batch_norm1d: running stats must be [C]"));
            }
            (rm.to_vec(), rv.to_vec())
        };
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut out = vec![0.0; bn * c * l];
        for item in 0..bn {
            for ch in 0..c {
                let base = (item * c + ch) * l;
                let (mu, is, ga, bb) = (mean[ch], inv_std[ch], g.data()[ch], be.data()[ch]);
                for (o, v) in out[base..base + l].iter_mut().zip(&x.data()[base..base + l]) {
                    *o = ga * (*v - mu) * is + bb;
                }
            }
        }
        let stats = train.then(|| BnStats {
            mean: mean.clone(),
            var: var.clone(),
            count,
        });
        let rg = self.needs_grad(&[input, gamma, beta]);
        let v = self.push(
            Tensor::new(vec![bn, c, l], out)?,
            Op::BatchNorm1d {
                input,
                gamma,
                beta,
                train,
                mean: Arc::new(mean),
                inv_std: Arc::new(inv_std),
            },
            rg,
        );
        Ok((v, stats))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let x = self.value(input).clone();
        let out: Vec<f64> = x.data().iter().map(|&v| v.max(0.0)).collect();
        let rg = self.nodes[input.0].requires_grad;
        self.push(
            Tensor::new(x.shape().to_vec(), out).expect("shape preserved"),
            Op::Relu { input },
            rg,
        )
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let x = self.value(input).clone();
        let out: Vec<f64> = x.data().iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        let rg = self.nodes[input.0].requires_grad;
        self.push(
            Tensor::new(x.shape().to_vec(), out).expect("shape preserved"),
            Op::Sigmoid { input },
            rg,
        )
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let xa = self.value(a).clone();
        let xb = self.value(b).clone();
        if xa.shape() != xb.shape() {
            return Err(Error::contract(format!(
                "hadamard: shape mismatch {:?} vs {:?}",
                xa.shape(),
                xb.shape()
            )));
        }
        let out: Vec<f64> = xa
            .data()
            .iter()
            .zip(xb.data().iter())
            .map(|(&u, &v)| u * v)
            .collect();
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(
            Tensor::new(xa.shape().to_vec(), out)?,
            Op::Hadamard { a, b },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let xa = self.value(a).clone();
        let xb = self.value(b).clone();
        if xa.shape() != xb.shape() {
            return Err(Error::contract(format!(
                "add: shape mismatch {:?} vs {:?}",
                xa.shape(),
                xb.shape()
            )));
        }
        let out: Vec<f64> = xa
            .data()
            .iter()
            .zip(xb.data().iter())
            .map(|(&u, &v)| u + v)
            .collect();
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(Tensor::new(xa.shape().to_vec(), out)?, Op::Add { a, b }, rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let xa = self.value(a).clone();
        let xb = self.value(b).clone();
        let (ba, ca, la) = xa.dims3()?;
        let (bb, cb, lb) = xb.dims3()?;
        if ba != bb || la != lb {
            return Err(Error::contract(format!(
                "concat_channels: batch/length mismatch {:?} vs {:?}",
                xa.shape(),
                xb.shape()
            )));
        }
        let mut out = Vec::with_capacity(ba * (ca + cb) * la);
        for item in 0..ba {
            out.extend_from_slice(&xa.data()[item * ca * la..(item + 1) * ca * la]);
            out.extend_from_slice(&xb.data()[item * cb * la..(item + 1) * cb * la]);
        }
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![ba, ca + cb, la], out)?,
            Op::ConcatChannels { a, b },
            rg,
        ))
    }

    pub fn concat_batch(&mut self, items: &[Var]) -> Result<Var> {
        if items.is_empty() {
            return Err(Error::contract("concat_batch: no items"));
        }
        let first = self.value(items[0]).clone();
        let (_, c, l) = first.dims3()?;
        let mut total_b = 0;
        let mut out = Vec::new();
        for &it in items {
            let t = self.value(it).clone();
            let (bi, ci, li) = t.dims3()?;
            if ci != c || li != l {
                return Err(Error::contract(format!(
                    "concat_batch: item shape {:?} != [_, {c}, {l}]",
                    t.shape()
                )));
            }
            total_b += bi;
            out.extend_from_slice(t.data());
        }
        let rg = self.needs_grad(items);
        Ok(self.push(
            Tensor::new(vec![total_b, c, l], out)?,
            Op::ConcatBatch {
                items: Arc::new(items.to_vec()),
            },
            rg,
        ))
    }

    pub fn slice_batch(&mut self, input: Var, index: usize) -> Result<Var> {
        let x = self.value(input).clone();
        let (bn, c, l) = x.dims3()?;
        if index >= bn {
            return Err(Error::contract(format!(
                "slice_batch: index {index} out of range for batch {bn}"
            )));
        }
        let out = x.data()[index * c * l..(index + 1) * c * l].to_vec();
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(
            Tensor::new(vec![1, c, l], out)?,
            Op::SliceBatch { input, index },
            rg,
        ))
    }

    pub fn scale(&mut self, input: Var, c: f64) -> Var {
        let x = self.value(input).clone();
        let out: Vec<f64> = x.data().iter().map(|&v| v * c).collect();
        let rg = self.nodes[input.0].requires_grad;
        self.push(
            Tensor::new(x.shape().to_vec(), out).expect("shape preserved"),
            Op::Scale { input, c },
            rg,
        )
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let x = self.value(input).clone();
        let s: f64 = x.data().iter().sum();
        let rg = self.nodes[input.0].requires_grad;
        self.push(Tensor::scalar(s), Op::Sum { input }, rg)
    }

    /// Global average over the length axis: `[B, C, L] -> [B, C]`.
    pub fn mean_time(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input).clone();
        let (bn, c, l) = x.dims3()?;
        let mut out = vec![0.0; bn * c];
        for (row, o) in out.iter_mut().enumerate() {
            let base = row * l;
            *o = x.data()[base..base + l].iter().sum::<f64>() / l as f64;
        }
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(
            Tensor::new(vec![bn, c], out)?,
            Op::MeanTime { input },
            rg,
        ))
    }

    pub fn sqrt(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input).clone();
        if x.data().iter().any(|&v| v < 0.0) {
            return Err(Error::contract("sqrt: negative input"));
        }
        let out: Vec<f64> = x.data().iter().map(|&v| v.sqrt()).collect();
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(
            Tensor::new(x.shape().to_vec(), out)?,
            Op::Sqrt { input },
            rg,
        ))
    }

    pub fn log(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input).clone();
        if x.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::contract("log: non-positive input"));
        }
        let out: Vec<f64> = x.data().iter().map(|&v| v.ln()).collect();
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(Tensor::new(x.shape().to_vec(), out)?, Op::Log { input }, rg))
    }

    /// `ln(max(x, floor))`; zero gradient on floored entries.
    pub fn log_floor(&mut self, input: Var, floor: f64) -> Result<Var> {
        if floor <= 0.0 {
            return Err(Error::contract("log_floor: floor must be positive"));
        }
        let x = self.value(input).clone();
        let out: Vec<f64> = x.data().iter().map(|&v| v.max(floor).ln()).collect();
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(
            Tensor::new(x.shape().to_vec(), out)?,
            Op::LogFloor { input, floor },
            rg,
        ))
    }

    /// Broadcast multiply by a scalar node.
    pub fn mul_scalar(&mut self, input: Var, scalar: Var) -> Result<Var> {
        let x = self.value(input).clone();
        let s = self.value(scalar).scalar_value()?;
        let out: Vec<f64> = x.data().iter().map(|&v| v * s).collect();
        let rg = self.needs_grad(&[input, scalar]);
        Ok(self.push(
            Tensor::new(x.shape().to_vec(), out)?,
            Op::MulScalar { input, scalar },
            rg,
        ))
    }

    /// Mean absolute difference, reduced to a scalar.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let xa = self.value(a).clone();
        let xb = self.value(b).clone();
        if xa.shape() != xb.shape() {
            return Err(Error::contract(format!(
                "l1_loss: shape mismatch {:?} vs {:?}",
                xa.shape(),
                xb.shape()
            )));
        }
        let n = xa.numel() as f64;
        let s: f64 = xa
            .data()
            .iter()
            .zip(xb.data().iter())
            .map(|(&u, &v)| (u - v).abs())
            .sum();
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(Tensor::scalar(s / n), Op::L1Loss { a, b }, rg))
    }

    /// Mean binary cross-entropy with predictions clamped to
    /// `[BCE_CLAMP, 1 - BCE_CLAMP]`.
    pub fn bce_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let p = self.value(pred).clone();
        let t = self.value(target).clone();
        if p.shape() != t.shape() {
            return Err(Error::contract(format!(
                "bce_loss: shape mismatch {:?} vs {:?}",
                p.shape(),
                t.shape()
            )));
        }
        let n = p.numel() as f64;
        let mut s = 0.0;
        for (&pi, &ti) in p.data().iter().zip(t.data().iter()) {
            let pc = pi.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            s -= ti * pc.ln() + (1.0 - ti) * (1.0 - pc).ln();
        }
        let rg = self.needs_grad(&[pred, target]);
        Ok(self.push(Tensor::scalar(s / n), Op::BceLoss { pred, target }, rg))
    }

    /// Zero-pad the length axis on the right.
    pub fn pad_right(&mut self, input: Var, n: usize) -> Result<Var> {
        let x = self.value(input).clone();
        let (bn, c, l) = x.dims3()?;
        let mut out = vec![0.0; bn * c * (l + n)];
        for row in 0..bn * c {
            out[row * (l + n)..row * (l + n) + l].copy_from_slice(&x.data()[row * l..(row + 1) * l]);
        }
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(
            Tensor::new(vec![bn, c, l + n], out)?,
            Op::PadRight { input, n },
            rg,
        ))
    }

    /// Drop samples on the right of the length axis, keeping `new_len`.
    pub fn trunc_right(&mut self, input: Var, new_len: usize) -> Result<Var> {
        let x = self.value(input).clone();
        let (bn, c, l) = x.dims3()?;
        if new_len == 0 || new_len > l {
            return Err(Error::contract(format!(
                "trunc_right: new length {new_len} invalid for {l}"
            )));
        }
        let mut out = Vec::with_capacity(bn * c * new_len);
        for row in 0..bn * c {
            out.extend_from_slice(&x.data()[row * l..row * l + new_len]);
        }
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(
            Tensor::new(vec![bn, c, new_len], out)?,
            Op::TruncRight { input },
            rg,
        ))
    }

    /// Clamp to `[-bound, bound]`; gradient passes inside the interval.
    pub fn clamp_sym(&mut self, input: Var, bound: f64) -> Result<Var> {
        if bound <= 0.0 {
            return Err(Error::contract("clamp_sym: bound must be positive"));
        }
        let x = self.value(input).clone();
        let out: Vec<f64> = x.data().iter().map(|&v| v.clamp(-bound, bound)).collect();
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(
            Tensor::new(x.shape().to_vec(), out)?,
            Op::ClampSym { input, bound },
            rg,
        ))
    }

    /// `y[n] = x[n] + gain * x[n - delay]` along the length axis.
    pub fn delay_add(&mut self, input: Var, delay: usize, gain: f64) -> Result<Var> {
        let x = self.value(input).clone();
        let (bn, c, l) = x.dims3()?;
        let mut out = x.data().to_vec();
        for row in 0..bn * c {
            let base = row * l;
            for npos in (delay..l).rev() {
                out[base + npos] += gain * x.data()[base + npos - delay];
            }
        }
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(
            Tensor::new(vec![bn, c, l], out)?,
            Op::DelayAdd { input, delay, gain },
            rg,
        ))
    }

    /// Causal biquad cascade along the length axis (zero initial state).
    pub fn biquad(&mut self, input: Var, sections: Arc<Vec<BiquadSection>>) -> Result<Var> {
        let x = self.value(input).clone();
        let (bn, c, l) = x.dims3()?;
        let mut out = x.data().to_vec();
        for row in 0..bn * c {
            kernels::biquad_cascade(&sections, &mut out[row * l..(row + 1) * l]);
        }
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(
            Tensor::new(vec![bn, c, l], out)?,
            Op::Biquad { input, sections },
            rg,
        ))
    }

    /// Linear-interpolation resampling along the length axis.
    pub fn resample(&mut self, input: Var, map: Arc<ResampleMap>) -> Result<Var> {
        let x = self.value(input).clone();
        let (bn, c, l) = x.dims3()?;
        if l != map.in_len {
            return Err(Error::contract(format!(
                "resample: map expects input length {}, got {l}",
                map.in_len
            )));
        }
        let lo = map.out_len();
        let mut out = vec![0.0; bn * c * lo];
        for row in 0..bn * c {
            map.apply(&x.data()[row * l..(row + 1) * l], &mut out[row * lo..(row + 1) * lo]);
        }
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(
            Tensor::new(vec![bn, c, lo], out)?,
            Op::Resample { input, map },
            rg,
        ))
    }

    /// Magnitude spectrogram of each batch row: `[B, L] -> [B, frames, bins]`.
    pub fn stft_magnitude(&mut self, input: Var, kernel: Arc<StftKernel>) -> Result<Var> {
        let x = self.value(input).clone();
        let (bn, l) = x.dims2()?;
        if l != kernel.in_len() {
            return Err(Error::contract(format!(
                "stft_magnitude: kernel expects length {}, got {l}",
                kernel.in_len()
            )));
        }
        let (frames, bins) = (kernel.frames(), kernel.bins());
        let mut mags = vec![0.0; bn * frames * bins];
        let mut spectra = vec![Complex64::default(); bn * frames * bins];
        for item in 0..bn {
            kernel.forward(
                &x.data()[item * l..(item + 1) * l],
                &mut mags[item * frames * bins..(item + 1) * frames * bins],
                &mut spectra[item * frames * bins..(item + 1) * frames * bins],
            );
        }
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(
            Tensor::new(vec![bn, frames, bins], mags)?,
            Op::StftMagnitude {
                input,
                kernel,
                spectra: Arc::new(spectra),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let x = self.value(input).reshaped(shape)?;
        let rg = self.nodes[input.0].requires_grad;
        Ok(self.push(x, Op::Reshape { input }, rg))
    }

    // ── backward ────────────────────────────────────────────────────────

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient of a leaf, with zeros when the leaf never entered the graph.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<f64> {
        match &self.nodes[v.0].grad {
            Some(g) => g.clone(),
            None => vec![0.0; self.nodes[v.0].value.numel()],
        }
    }

    fn accum(&mut self, v: Var, delta: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        debug_assert_eq!(delta.len(), node.value.numel());
        match &mut node.grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta.iter()) {
                    *gi += *di;
                }
            }
            None => node.grad = Some(delta),
        }
    }

    /// Reverse sweep from a scalar loss. Gradients of intermediate nodes are
    /// freed as soon as they have been propagated; leaf gradients remain
    /// readable through [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                self.nodes[i].grad = None;
                continue;
            }
            let is_leaf = matches!(self.nodes[i].op, Op::Leaf);
            if is_leaf {
                continue;
            }
            let Some(gy) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            self.backprop_op(Var(i), &op, &gy)?;
        }
        Ok(())
    }

    fn backprop_op(&mut self, out: Var, op: &Op, gy: &[f64]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Conv1d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let x = self.value(*input).clone();
                let w = self.value(*weight).clone();
                let (bn, ci, l) = x.dims3()?;
                let (co, _, k) = w.dims3()?;
                let lout = self.value(out).shape()[2];
                let mut scratch = Vec::new();
                if self.nodes[input.0].requires_grad {
                    let mut dx = vec![0.0; bn * ci * l];
                    for item in 0..bn {
                        kernels::conv1d_item_bwd_input(
                            &gy[item * co * lout..(item + 1) * co * lout],
                            w.data(),
                            ci,
                            l,
                            co,
                            k,
                            *stride,
                            *padding,
                            lout,
                            &mut dx[item * ci * l..(item + 1) * ci * l],
                            &mut scratch,
                        );
                    }
                    self.accum(*input, dx);
                }
                if self.nodes[weight.0].requires_grad || self.nodes[bias.0].requires_grad {
                    let mut dw = vec![0.0; w.numel()];
                    let mut db = vec![0.0; co];
                    for item in 0..bn {
                        kernels::conv1d_item_bwd_params(
                            &x.data()[item * ci * l..(item + 1) * ci * l],
                            &gy[item * co * lout..(item + 1) * co * lout],
                            ci,
                            l,
                            co,
                            k,
                            *stride,
                            *padding,
                            lout,
                            &mut dw,
                            &mut db,
                            &mut scratch,
                        );
                    }
                    self.accum(*weight, dw);
                    self.accum(*bias, db);
                }
            }
            Op::ConvTranspose1d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let x = self.value(*input).clone();
                let w = self.value(*weight).clone();
                let (bn, ci, l) = x.dims3()?;
                let (_, co, k) = w.dims3()?;
                let lout = self.value(out).shape()[2];
                let mut scratch = Vec::new();
                if self.nodes[input.0].requires_grad {
                    let mut dx = vec![0.0; bn * ci * l];
                    for item in 0..bn {
                        kernels::convt1d_item_bwd_input(
                            &gy[item * co * lout..(item + 1) * co * lout],
                            w.data(),
                            ci,
                            l,
                            co,
                            k,
                            *stride,
                            *padding,
                            lout,
                            &mut dx[item * ci * l..(item + 1) * ci * l],
                            &mut scratch,
                        );
                    }
                    self.accum(*input, dx);
                }
                if self.nodes[weight.0].requires_grad || self.nodes[bias.0].requires_grad {
                    let mut dw = vec![0.0; w.numel()];
                    let mut db = vec![0.0; co];
                    for item in 0..bn {
                        kernels::convt1d_item_bwd_params(
                            &x.data()[item * ci * l..(item + 1) * ci * l],
                            &gy[item * co * lout..(item + 1) * co * lout],
                            ci,
                            l,
                            co,
                            k,
                            *stride,
                            *padding,
                            lout,
                            &mut dw,
                            &mut db,
                            &mut scratch,
                        );
                    }
                    self.accum(*weight, dw);
                    self.accum(*bias, db);
                }
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let x = self.value(*input).clone();
                let w = self.value(*weight).clone();
                let (bn, n) = x.dims2()?;
                let (m, _) = w.dims2()?;
                if self.nodes[input.0].requires_grad {
                    let mut dx = vec![0.0; bn * n];
                    kernels::dense_bwd_input(gy, w.data(), bn, n, m, &mut dx);
                    self.accum(*input, dx);
                }
                if self.nodes[weight.0].requires_grad || self.nodes[bias.0].requires_grad {
                    let mut dw = vec![0.0; m * n];
                    let mut db = vec![0.0; m];
                    kernels::dense_bwd_params(x.data(), gy, bn, n, m, &mut dw, &mut db);
                    self.accum(*weight, dw);
                    self.accum(*bias, db);
                }
            }
            Op::BatchNorm1d {
                input,
                gamma,
                beta,
                train,
                mean,
                inv_std,
            } => {
                let x = self.value(*input).clone();
                let g = self.value(*gamma).clone();
                let (bn, c, l) = x.dims3()?;
                let count = (bn * l) as f64;
                // Per-channel reductions of gy and gy * x_hat.
                let mut s1 = vec![0.0; c];
                let mut s2 = vec![0.0; c];
                for item in 0..bn {
                    for ch in 0..c {
                        let base = (item * c + ch) * l;
                        let (mu, is) = (mean[ch], inv_std[ch]);
                        let mut a = 0.0;
                        let mut b = 0.0;
                        for (gi, xi) in gy[base..base + l].iter().zip(&x.data()[base..base + l]) {
                            a += *gi;
                            b += *gi * (*xi - mu) * is;
                        }
                        s1[ch] += a;
                        s2[ch] += b;
                    }
                }
                if self.nodes[gamma.0].requires_grad {
                    self.accum(*gamma, s2.clone());
                }
                if self.nodes[beta.0].requires_grad {
                    self.accum(*beta, s1.clone());
                }
                if self.nodes[input.0].requires_grad {
                    let mut dx = vec![0.0; bn * c * l];
                    for item in 0..bn {
                        for ch in 0..c {
                            let base = (item * c + ch) * l;
                            let (mu, is, ga) = (mean[ch], inv_std[ch], g.data()[ch]);
                            if *train {
                                let m1 = s1[ch] / count;
                                let m2 = s2[ch] / count;
                                for ((d, gi), xi) in dx[base..base + l]
                                    .iter_mut()
                                    .zip(&gy[base..base + l])
                                    .zip(&x.data()[base..base + l])
                                {
                                    let xh = (*xi - mu) * is;
                                    *d = ga * is * (*gi - m1 - xh * m2);
                                }
                            } else {
                                for (d, gi) in dx[base..base + l].iter_mut().zip(&gy[base..base + l]) {
                                    *d = ga * is * *gi;
                                }
                            }
                        }
                    }
                    self.accum(*input, dx);
                }
            }
            Op::Relu { input } => {
                let x = self.value(*input).clone();
                let dx: Vec<f64> = x
                    .data()
                    .iter()
                    .zip(gy.iter())
                    .map(|(&xi, &gi)| if xi > 0.0 { gi } else { 0.0 })
                    .collect();
                self.accum(*input, dx);
            }
            Op::Sigmoid { input } => {
                let y = self.value(out).clone();
                let dx: Vec<f64> = y
                    .data()
                    .iter()
                    .zip(gy.iter())
                    .map(|(&yi, &gi)| gi * yi * (1.0 - yi))
                    .collect();
                self.accum(*input, dx);
            }
            Op::Hadamard { a, b } => {
                let xa = self.value(*a).clone();
                let xb = self.value(*b).clone();
                if self.nodes[a.0].requires_grad {
                    let da: Vec<f64> = gy.iter().zip(xb.data().iter()).map(|(&g, &v)| g * v).collect();
                    self.accum(*a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let db: Vec<f64> = gy.iter().zip(xa.data().iter()).map(|(&g, &v)| g * v).collect();
                    self.accum(*b, db);
                }
            }
            Op::ConcatChannels { a, b } => {
                let (ba, ca, la) = self.value(*a).dims3()?;
                let (_, cb, _) = self.value(*b).dims3()?;
                let mut da = vec![0.0; ba * ca * la];
                let mut db = vec![0.0; ba * cb * la];
                let stride_out = (ca + cb) * la;
                for item in 0..ba {
                    da[item * ca * la..(item + 1) * ca * la]
                        .copy_from_slice(&gy[item * stride_out..item * stride_out + ca * la]);
                    db[item * cb * la..(item + 1) * cb * la].copy_from_slice(
                        &gy[item * stride_out + ca * la..(item + 1) * stride_out],
                    );
                }
                self.accum(*a, da);
                self.accum(*b, db);
            }
            Op::ConcatBatch { items } => {
                let mut offset = 0;
                for &it in items.iter() {
                    let n = self.value(it).numel();
                    let d = gy[offset..offset + n].to_vec();
                    offset += n;
                    self.accum(it, d);
                }
            }
            Op::SliceBatch { input, index } => {
                let x = self.value(*input).clone();
                let (_, c, l) = x.dims3()?;
                let mut dx = vec![0.0; x.numel()];
                dx[index * c * l..(index + 1) * c * l].copy_from_slice(gy);
                self.accum(*input, dx);
            }
            Op::Add { a, b } => {
                if self.nodes[a.0].requires_grad {
                    self.accum(*a, gy.to_vec());
                }
                if self.nodes[b.0].requires_grad {
                    self.accum(*b, gy.to_vec());
                }
            }
            Op::Scale { input, c } => {
                let dx: Vec<f64> = gy.iter().map(|&g| g * c).collect();
                self.accum(*input, dx);
            }
            Op::Sum { input } => {
                let n = self.value(*input).numel();
                self.accum(*input, vec![gy[0]; n]);
            }
            Op::MeanTime { input } => {
                let (bn, c, l) = self.value(*input).dims3()?;
                let mut dx = vec![0.0; bn * c * l];
                for row in 0..bn * c {
                    let g = gy[row] / l as f64;
                    dx[row * l..(row + 1) * l].fill(g);
                }
                self.accum(*input, dx);
            }
            Op::Sqrt { input } => {
                let y = self.value(out).clone();
                let dx: Vec<f64> = y
                    .data()
                    .iter()
                    .zip(gy.iter())
                    .map(|(&yi, &gi)| if yi > 0.0 { gi / (2.0 * yi) } else { 0.0 })
                    .collect();
                self.accum(*input, dx);
            }
            Op::Log { input } => {
                let x = self.value(*input).clone();
                let dx: Vec<f64> = x.data().iter().zip(gy.iter()).map(|(&xi, &gi)| gi / xi).collect();
                self.accum(*input, dx);
            }
            Op::LogFloor { input, floor } => {
                let x = self.value(*input).clone();
                let dx: Vec<f64> = x
                    .data()
                    .iter()
                    .zip(gy.iter())
                    .map(|(&xi, &gi)| if xi > *floor { gi / xi } else { 0.0 })
                    .collect();
                self.accum(*input, dx);
            }
            Op::MulScalar { input, scalar } => {
                let x = self.value(*input).clone();
                let s = self.value(*scalar).scalar_value()?;
                if self.nodes[input.0].requires_grad {
                    let dx: Vec<f64> = gy.iter().map(|&g| g * s).collect();
                    self.accum(*input, dx);
                }
                if self.nodes[scalar.0].requires_grad {
                    let ds: f64 = gy.iter().zip(x.data().iter()).map(|(&g, &v)| g * v).sum();
                    self.accum(*scalar, vec![ds]);
                }
            }
            Op::L1Loss { a, b } => {
                let xa = self.value(*a).clone();
                let xb = self.value(*b).clone();
                let n = xa.numel() as f64;
                let g = gy[0] / n;
                if self.nodes[a.0].requires_grad {
                    let da: Vec<f64> = xa
                        .data()
                        .iter()
                        .zip(xb.data().iter())
                        .map(|(&u, &v)| g * (u - v).signum() * if u == v { 0.0 } else { 1.0 })
                        .collect();
                    self.accum(*a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let db: Vec<f64> = xa
                        .data()
                        .iter()
                        .zip(xb.data().iter())
                        .map(|(&u, &v)| -g * (u - v).signum() * if u == v { 0.0 } else { 1.0 })
                        .collect();
                    self.accum(*b, db);
                }
            }
            Op::BceLoss { pred, target } => {
                let p = self.value(*pred).clone();
                let t = self.value(*target).clone();
                let n = p.numel() as f64;
                let g = gy[0] / n;
                if self.nodes[pred.0].requires_grad {
                    let dp: Vec<f64> = p
                        .data()
                        .iter()
                        .zip(t.data().iter())
                        .map(|(&pi, &ti)| {
                            if pi < BCE_CLAMP || pi > 1.0 - BCE_CLAMP {
                                0.0
                            } else {
                                g * (pi - ti) / (pi * (1.0 - pi))
                            }
                        })
                        .collect();
                    self.accum(*pred, dp);
                }
                if self.nodes[target.0].requires_grad {
                    let dt: Vec<f64> = p
                        .data()
                        .iter()
                        .map(|&pi| {
                            let pc = pi.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                            g * ((1.0 - pc).ln() - pc.ln())
                        })
                        .collect();
                    self.accum(*target, dt);
                }
            }
            Op::PadRight { input, n } => {
                let (bn, c, l) = self.value(*input).dims3()?;
                let mut dx = vec![0.0; bn * c * l];
                for row in 0..bn * c {
                    dx[row * l..(row + 1) * l]
                        .copy_from_slice(&gy[row * (l + n)..row * (l + n) + l]);
                }
                self.accum(*input, dx);
            }
            Op::TruncRight { input } => {
                let (bn, c, l) = self.value(*input).dims3()?;
                let new_len = self.value(out).shape()[2];
                let mut dx = vec![0.0; bn * c * l];
                for row in 0..bn * c {
                    dx[row * l..row * l + new_len]
                        .copy_from_slice(&gy[row * new_len..(row + 1) * new_len]);
                }
                self.accum(*input, dx);
            }
            Op::ClampSym { input, bound } => {
                let x = self.value(*input).clone();
                let dx: Vec<f64> = x
                    .data()
                    .iter()
                    .zip(gy.iter())
                    .map(|(&xi, &gi)| if xi.abs() <= *bound { gi } else { 0.0 })
                    .collect();
                self.accum(*input, dx);
            }
            Op::DelayAdd { input, delay, gain } => {
                let (bn, c, l) = self.value(*input).dims3()?;
                let mut dx = gy.to_vec();
                for row in 0..bn * c {
                    let base = row * l;
                    for npos in 0..l.saturating_sub(*delay) {
                        dx[base + npos] += gain * gy[base + npos + delay];
                    }
                }
                self.accum(*input, dx);
            }
            Op::Biquad { input, sections } => {
                let (bn, c, l) = self.value(*input).dims3()?;
                let mut dx = gy.to_vec();
                for row in 0..bn * c {
                    kernels::biquad_cascade_adjoint(sections, &mut dx[row * l..(row + 1) * l]);
                }
                self.accum(*input, dx);
            }
            Op::Resample { input, map } => {
                let (bn, c, l) = self.value(*input).dims3()?;
                let lo = map.out_len();
                let mut dx = vec![0.0; bn * c * l];
                for row in 0..bn * c {
                    map.apply_adjoint(
                        &gy[row * lo..(row + 1) * lo],
                        &mut dx[row * l..(row + 1) * l],
                    );
                }
                self.accum(*input, dx);
            }
            Op::StftMagnitude {
                input,
                kernel,
                spectra,
            } => {
                let (bn, l) = self.value(*input).dims2()?;
                let per = kernel.frames() * kernel.bins();
                let mut dx = vec![0.0; bn * l];
                for item in 0..bn {
                    kernel.backward(
                        &gy[item * per..(item + 1) * per],
                        &spectra[item * per..(item + 1) * per],
                        &mut dx[item * l..(item + 1) * l],
                    );
                }
                self.accum(*input, dx);
            }
            Op::Reshape { input } => {
                self.accum(*input, gy.to_vec());
            }
        }
        Ok(())
    }

    /// Index and op kind of the first non-finite tensor on the tape, if any.
    pub fn first_non_finite(&self) -> Option<(usize, OpKind)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.all_finite())
            .map(|(i, n)| (i, n.op.kind()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor3(b: usize, c: usize, l: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![b, c, l], data).unwrap()
    }

    #[test]
    fn sum_backward_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor3(1, 1, 4, vec![1.0, -2.0, 3.0, 0.5]), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn quadratic_backward_is_2x() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor3(1, 1, 3, vec![1.0, -2.0, 0.5]), true);
        let sq = tape.hadamard(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn untouched_leaf_reports_zero_grads() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor3(1, 1, 2, vec![1.0, 2.0]), true);
        let y = tape.leaf(tensor3(1, 1, 2, vec![3.0, 4.0]), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(tape.grad(y).is_none());
        assert_eq!(tape.grad_or_zeros(y), vec![0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor3(1, 1, 2, vec![1.0, 2.0]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn conv_channel_mismatch_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor3(1, 2, 4, vec![0.0; 8]), false);
        let w = tape.leaf(tensor3(1, 3, 1, vec![0.0; 3]), false);
        let b = tape.leaf(Tensor::new(vec![1], vec![0.0]).unwrap(), false);
        assert!(tape.conv1d(x, w, b, 1, 0).is_err());
    }

    #[test]
    fn output_padding_must_be_less_than_stride() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor3(1, 1, 4, vec![0.0; 4]), false);
        let w = tape.leaf(tensor3(1, 1, 3, vec![0.0; 3]), false);
        let b = tape.leaf(Tensor::new(vec![1], vec![0.0]).unwrap(), false);
        assert!(tape.conv1d_transpose(x, w, b, 2, 0, 2).is_err());
        assert!(tape.conv1d_transpose(x, w, b, 2, 0, 1).is_ok());
    }

    #[test]
    fn dense_hand_example() {
        // input (1,2), weight ((1,1),(1,-1)) -> (3, -1)
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap(), false);
        let w = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 1.0, 1.0, -1.0]).unwrap(), false);
        let b = tape.leaf(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap(), false);
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, -1.0]);
    }

    #[test]
    fn dense_identity_and_bias_only() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![0.25, -0.5]).unwrap(), false);
        let id = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(), false);
        let zero_b = tape.leaf(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap(), false);
        let y = tape.dense(x, id, zero_b).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25, -0.5]);

        let zeros = tape.leaf(Tensor::new(vec![2, 2], vec![0.0; 4]).unwrap(), false);
        let b5 = tape.leaf(Tensor::new(vec![2], vec![5.0, 5.0]).unwrap(), false);
        let y2 = tape.dense(x, zeros, b5).unwrap();
        assert_eq!(tape.value(y2).data(), &[5.0, 5.0]);
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0), false);
        let y = tape.sigmoid(x);
        assert_eq!(tape.value(y).data(), &[0.5]);
    }

    #[test]
    fn concat_channels_shape_law() {
        let mut tape = Tape::new();
        let a = tape.leaf(tensor3(1, 1, 5, vec![1.0; 5]), false);
        let b = tape.leaf(tensor3(1, 1, 5, vec![2.0; 5]), false);
        let y = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 2, 5]);
    }

    #[test]
    fn hadamard_identity_mask() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor3(1, 1, 3, vec![0.1, -0.7, 2.0]), false);
        let ones = tape.leaf(tensor3(1, 1, 3, vec![1.0; 3]), false);
        let y = tape.hadamard(x, ones).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn bce_examples() {
        let mut tape = Tape::new();
        // pred = 0.5 everywhere -> ln 2 regardless of target
        let p = tape.leaf(Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap(), false);
        let t = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap(), false);
        let l = tape.bce_loss(p, t).unwrap();
        assert!((tape.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);

        // pred=(0.9,0.1), target=(1,0) -> -(ln 0.9 + ln 0.9)/2
        let p2 = tape.leaf(Tensor::new(vec![1, 2], vec![0.9, 0.1]).unwrap(), false);
        let t2 = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap(), false);
        let l2 = tape.bce_loss(p2, t2).unwrap();
        let expect = -(0.9f64.ln() + 0.9f64.ln()) / 2.0;
        assert!((tape.value(l2).data()[0] - expect).abs() < 1e-12);
        assert!((expect - 0.10536).abs() < 1e-4);

        // exact-match limit: pred = 1 - 1e-7, target = 1 -> about 1e-7
        let p3 = tape.leaf(Tensor::new(vec![1, 1], vec![1.0 - 1e-7]).unwrap(), false);
        let t3 = tape.leaf(Tensor::new(vec![1, 1], vec![1.0]).unwrap(), false);
        let l3 = tape.bce_loss(p3, t3).unwrap();
        assert!(tape.value(l3).data()[0] < 2e-7);
    }

    #[test]
    fn batch_norm_train_mode_examples() {
        // Constant input per channel with gamma=1, beta=0 -> all zeros.
        let mut tape = Tape::new();
        let x = tape.leaf(tensor3(2, 1, 3, vec![4.0; 6]), false);
        let g = tape.leaf(Tensor::new(vec![1], vec![1.0]).unwrap(), false);
        let b = tape.leaf(Tensor::new(vec![1], vec![0.0]).unwrap(), false);
        let (y, stats) = tape.batch_norm1d(x, g, b, None, true).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let stats = stats.unwrap();
        assert_eq!(stats.mean, vec![4.0]);
        assert_eq!(stats.var, vec![0.0]);

        // gamma=0, beta=7 -> all sevens.
        let x2 = tape.leaf(tensor3(1, 1, 4, vec![1.0, 2.0, 3.0, 4.0]), false);
        let g0 = tape.leaf(Tensor::new(vec![1], vec![0.0]).unwrap(), false);
        let b7 = tape.leaf(Tensor::new(vec![1], vec![7.0]).unwrap(), false);
        let (y2, _) = tape.batch_norm1d(x2, g0, b7, None, true).unwrap();
        assert!(tape.value(y2).data().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn batch_norm_normalizes_mean_and_variance() {
        let mut tape = Tape::new();
        let n = 64;
        let data: Vec<f64> = (0..2 * n).map(|i| (i as f64 * 0.37).sin() * 3.0 + 1.5).collect();
        let x = tape.leaf(tensor3(2, 1, n, data), false);
        let g = tape.leaf(Tensor::new(vec![1], vec![1.0]).unwrap(), false);
        let b = tape.leaf(Tensor::new(vec![1], vec![0.0]).unwrap(), false);
        let (y, _) = tape.batch_norm1d(x, g, b, None, true).unwrap();
        let out = tape.value(y).data();
        let mean: f64 = out.iter().sum::<f64>() / out.len() as f64;
        let var: f64 = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / out.len() as f64;
        assert!(mean.abs() < 1e-8, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-4, "var {var}");
    }

    #[test]
    fn batch_norm_train_needs_two_samples() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor3(1, 1, 1, vec![1.0]), false);
        let g = tape.leaf(Tensor::new(vec![1], vec![1.0]).unwrap(), false);
        let b = tape.leaf(Tensor::new(vec![1], vec![0.0]).unwrap(), false);
        assert!(tape.batch_norm1d(x, g, b, None, true).is_err());
    }

    #[test]
    fn shape_algebra_sweep_executes() {
        // Execute real convolutions across the sweep and check the
        // produced lengths against the formula.
        let mut tape = Tape::new();
        for l in (4usize..=64).step_by(7) {
            for &k in &[1usize, 3, 5] {
                for &s in &[1usize, 2] {
                    for &p in &[0usize, 1, 2] {
                        let Some(lout) = kernels::conv1d_out_len(l, k, s, p) else {
                            continue;
                        };
                        let x = tape.leaf(tensor3(1, 1, l, vec![1.0; l]), false);
                        let w = tape.leaf(tensor3(1, 1, k, vec![1.0; k]), false);
                        let b = tape.leaf(Tensor::new(vec![1], vec![0.0]).unwrap(), false);
                        let y = tape.conv1d(x, w, b, s, p).unwrap();
                        assert_eq!(tape.value(y).shape()[2], lout);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_adjointness_inner_product() {
        // <conv(x, w), y> == <x, conv_transpose(y, w)> on matching geometry.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for &(l, k, s, p) in &[(16usize, 3usize, 2usize, 1usize), (20, 5, 2, 2), (9, 3, 1, 0)] {
            let ci = 2;
            let co = 3;
            let lout = kernels::conv1d_out_len(l, k, s, p).unwrap();
            let out_pad = l + 2 * p - ((lout - 1) * s + k);
            if out_pad >= s {
                continue;
            }
            let xv: Vec<f64> = (0..ci * l).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let wv: Vec<f64> = (0..co * ci * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let yv: Vec<f64> = (0..co * lout).map(|_| rng.gen_range(-1.0..1.0)).collect();

            let mut tape = Tape::new();
            let x = tape.leaf(tensor3(1, ci, l, xv.clone()), false);
            let w = tape.leaf(tensor3(co, ci, k, wv.clone()), false);
            let b0 = tape.leaf(Tensor::new(vec![co], vec![0.0; co]).unwrap(), false);
            let ax = tape.conv1d(x, w, b0, s, p).unwrap();
            let lhs: f64 = tape
                .value(ax)
                .data()
                .iter()
                .zip(yv.iter())
                .map(|(a, b)| a * b)
                .sum();

            // Same weights viewed as [ci_t = co, co_t = ci, k].
            let y = tape.leaf(tensor3(1, co, lout, yv), false);
            let wt = tape.leaf(tensor3(co, ci, k, wv), false);
            let b1 = tape.leaf(Tensor::new(vec![ci], vec![0.0; ci]).unwrap(), false);
            let aty = tape.conv1d_transpose(y, wt, b1, s, p, out_pad).unwrap();
            assert_eq!(tape.value(aty).shape()[2], l);
            let rhs: f64 = tape
                .value(aty)
                .data()
                .iter()
                .zip(xv.iter())
                .map(|(a, b)| a * b)
                .sum();
            assert!((lhs - rhs).abs() <= 1e-10, "l={l} k={k} s={s} p={p}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn graph_is_deterministic_across_runs() {
        let run = || {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
            let xv: Vec<f64> = (0..2 * 32).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let wv: Vec<f64> = (0..4 * 2 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut tape = Tape::new();
            let x = tape.leaf(tensor3(1, 2, 32, xv), false);
            let w = tape.leaf(tensor3(4, 2, 3, wv), true);
            let b = tape.leaf(Tensor::new(vec![4], vec![0.01; 4]).unwrap(), true);
            let y = tape.conv1d(x, w, b, 2, 1).unwrap();
            let z = tape.sigmoid(y);
            let s = tape.sum(z);
            tape.backward(s).unwrap();
            (
                tape.value(s).data().to_vec(),
                tape.grad(w).unwrap().to_vec(),
            )
        };
        let (a1, g1) = run();
        let (a2, g2) = run();
        assert_eq!(a1, a2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn tape_op_inspection() {
        let mut tape = Tape::new();
        let x = tape.leaf(tensor3(1, 1, 4, vec![1.0; 4]), false);
        let mark = tape.mark();
        let y = tape.relu(x);
        let _ = tape.sum(y);
        assert_eq!(tape.op_kinds_since(mark), vec![OpKind::Relu, OpKind::Sum]);
    }
}
