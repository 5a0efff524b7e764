//! Central finite-difference gradient verification.
//!
//! This is the independent oracle for every differentiable op: it never
//! touches the analytic backward path, only repeated forward evaluations.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{BiquadSection, ResampleMap};
use super::stft::StftKernel;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default)]
pub struct CheckReport {
    pub max_rel: f64,
    pub checked: usize,
}

fn rel_err(analytic: f64, fd: f64) -> f64 {
    let denom = analytic.abs().max(fd.abs()).max(1e-6);
    (analytic - fd).abs() / denom
}

/// Compare analytic gradients of `build`'s scalar output against central
/// finite differences, perturbing up to `max_per_tensor` elements of each
/// input (spread evenly across the tensor).
///
/// `build` must be deterministic: any constants it introduces have to be
/// identical on every invocation.
pub fn finite_diff<F>(inputs: &[Tensor], max_per_tensor: usize, h: f64, build: F) -> Result<CheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = build(&mut tape, &vars)?;
        tape.value(loss).scalar_value()
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();

    let mut report = CheckReport::default();
    for (ti, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let stride = n.div_ceil(max_per_tensor).max(1);
        for j in (0..n).step_by(stride) {
            let mut plus = input.data().to_vec();
            let mut minus = plus.clone();
            plus[j] += h;
            minus[j] -= h;
            let mut tensors = inputs.to_vec();
            tensors[ti] = Tensor::new(input.shape().to_vec(), plus)?;
            let fp = eval(&tensors)?;
            tensors[ti] = Tensor::new(input.shape().to_vec(), minus)?;
            let fm = eval(&tensors)?;
            let fd = (fp - fm) / (2.0 * h);
            let a = analytic[ti][j];
            report.max_rel = report.max_rel.max(rel_err(a, fd));
            report.checked += 1;
        }
    }
    Ok(report)
}

fn rand_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Offset uniformly away from zero so relu/l1/clamp kinks are not sampled.
fn rand_tensor_offset(shape: Vec<usize>, offset: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n).map(|_| rng.gen_range(0.1..1.0) + offset).collect(),
    )
    .unwrap()
}

/// Finite-difference check of every differentiable primitive with seeded
/// random inputs. Returns `(op name, max relative error)` per primitive.
pub fn run_primitive_checks() -> Result<Vec<(String, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    let mut out: Vec<(String, f64)> = Vec::new();
    let mut push = |name: &str, r: CheckReport| out.push((name.to_string(), r.max_rel));

    // conv1d: input, weight and bias gradients through a sum.
    {
        let x = rand_tensor(vec![2, 2, 12], &mut rng);
        let w = rand_tensor(vec![3, 2, 3], &mut rng);
        let b = rand_tensor(vec![3], &mut rng);
        let r = finite_diff(&[x, w, b], 24, FD_STEP, |t, v| {
            let y = t.conv1d(v[0], v[1], v[2], 2, 1)?;
            let sq = t.hadamard(y, y)?;
            Ok(t.sum(sq))
        })?;
        push("conv1d", r);
    }
    // conv1d_transpose.
    {
        let x = rand_tensor(vec![2, 3, 7], &mut rng);
        let w = rand_tensor(vec![3, 2, 3], &mut rng);
        let b = rand_tensor(vec![2], &mut rng);
        let r = finite_diff(&[x, w, b], 24, FD_STEP, |t, v| {
            let y = t.conv1d_transpose(v[0], v[1], v[2], 2, 1, 1)?;
            let sq = t.hadamard(y, y)?;
            Ok(t.sum(sq))
        })?;
        push("conv1d_transpose", r);
    }
    // dense.
    {
        let x = rand_tensor(vec![3, 5], &mut rng);
        let w = rand_tensor(vec![4, 5], &mut rng);
        let b = rand_tensor(vec![4], &mut rng);
        let r = finite_diff(&[x, w, b], 20, FD_STEP, |t, v| {
            let y = t.dense(v[0], v[1], v[2])?;
            let sq = t.hadamard(y, y)?;
            Ok(t.sum(sq))
        })?;
        push("dense", r);
    }
    // batch_norm1d in train mode.
    {
        let x = rand_tensor(vec![2, 3, 6], &mut rng);
        let g = rand_tensor_offset(vec![3], 0.5, &mut rng);
        let b = rand_tensor(vec![3], &mut rng);
        let r = finite_diff(&[x, g, b], 24, FD_STEP, |t, v| {
            let (y, _) = t.batch_norm1d(v[0], v[1], v[2], None, true)?;
            let sq = t.hadamard(y, y)?;
            Ok(t.sum(sq))
        })?;
        push("batch_norm1d(train)", r);
    }
    // batch_norm1d in eval mode.
    {
        let x = rand_tensor(vec![2, 3, 6], &mut rng);
        let g = rand_tensor_offset(vec![3], 0.5, &mut rng);
        let b = rand_tensor(vec![3], &mut rng);
        let rm = vec![0.1, -0.2, 0.05];
        let rv = vec![0.9, 1.1, 1.4];
        let r = finite_diff(&[x, g, b], 24, FD_STEP, move |t, v| {
            let (y, _) = t.batch_norm1d(v[0], v[1], v[2], Some((&rm, &rv)), false)?;
            let sq = t.hadamard(y, y)?;
            Ok(t.sum(sq))
        })?;
        push("batch_norm1d(eval)", r);
    }
    // relu, away from the kink.
    {
        let x = rand_tensor_offset(vec![1, 1, 16], 0.2, &mut rng);
        let r = finite_diff(&[x], 16, FD_STEP, |t, v| {
            let y = t.relu(v[0]);
            let sq = t.hadamard(y, y)?;
            Ok(t.sum(sq))
        })?;
        push("relu", r);
    }
    // sigmoid.
    {
        let x = rand_tensor(vec![1, 1, 16], &mut rng);
        let r = finite_diff(&[x], 16, FD_STEP, |t, v| {
            let y = t.sigmoid(v[0]);
            Ok(t.sum(y))
        })?;
        push("sigmoid", r);
    }
    // hadamard of two inputs.
    {
        let a = rand_tensor(vec![1, 2, 8], &mut rng);
        let b = rand_tensor(vec![1, 2, 8], &mut rng);
        let r = finite_diff(&[a, b], 16, FD_STEP, |t, v| {
            let y = t.hadamard(v[0], v[1])?;
            Ok(t.sum(y))
        })?;
        push("hadamard", r);
    }
    // concat_channels + slice_batch + concat_batch round trip.
    {
        let a = rand_tensor(vec![2, 1, 6], &mut rng);
        let b = rand_tensor(vec![2, 2, 6], &mut rng);
        let r = finite_diff(&[a, b], 18, FD_STEP, |t, v| {
            let y = t.concat_channels(v[0], v[1])?;
            let i0 = t.slice_batch(y, 0)?;
            let i1 = t.slice_batch(y, 1)?;
            let i1s = t.scale(i1, 0.5);
            let back = t.concat_batch(&[i0, i1s])?;
            let sq = t.hadamard(back, back)?;
            Ok(t.sum(sq))
        })?;
        push("concat/slice", r);
    }
    // add + scale + mean_time.
    {
        let a = rand_tensor(vec![2, 2, 5], &mut rng);
        let b = rand_tensor(vec![2, 2, 5], &mut rng);
        let r = finite_diff(&[a, b], 20, FD_STEP, |t, v| {
            let y = t.add(v[0], v[1])?;
            let z = t.scale(y, -1.7);
            let m = t.mean_time(z)?;
            let sq = t.hadamard(m, m)?;
            Ok(t.sum(sq))
        })?;
        push("add/scale/mean_time", r);
    }
    // sqrt and log on positive inputs.
    {
        let x = rand_tensor_offset(vec![1, 1, 10], 0.5, &mut rng);
        let r = finite_diff(&[x], 10, FD_STEP, |t, v| {
            let s = t.sqrt(v[0])?;
            let lg = t.log(s)?;
            Ok(t.sum(lg))
        })?;
        push("sqrt/log", r);
    }
    // log_floor away from the floor.
    {
        let x = rand_tensor_offset(vec![1, 1, 10], 0.5, &mut rng);
        let r = finite_diff(&[x], 10, FD_STEP, |t, v| {
            let y = t.log_floor(v[0], 1e-5)?;
            Ok(t.sum(y))
        })?;
        push("log_floor", r);
    }
    // mul_scalar with a derived scalar (power-style coupling).
    {
        let x = rand_tensor(vec![1, 1, 12], &mut rng);
        let noise = rand_tensor(vec![1, 1, 12], &mut rng);
        let r = finite_diff(&[x], 12, FD_STEP, move |t, v| {
            let sq = t.hadamard(v[0], v[0])?;
            let power = t.sum(sq);
            let scaled = t.scale(power, 1.0 / 12.0);
            let amp = t.sqrt(scaled)?;
            let nv = t.constant(noise.clone());
            let scaled_noise = t.mul_scalar(nv, amp)?;
            let y = t.add(v[0], scaled_noise)?;
            let ysq = t.hadamard(y, y)?;
            Ok(t.sum(ysq))
        })?;
        push("mul_scalar", r);
    }
    // l1_loss away from ties.
    {
        let a = rand_tensor_offset(vec![1, 1, 9], 1.0, &mut rng);
        let b = rand_tensor(vec![1, 1, 9], &mut rng);
        let r = finite_diff(&[a, b], 18, FD_STEP, |t, v| t.l1_loss(v[0], v[1]))?;
        push("l1_loss", r);
    }
    // bce_loss with predictions strictly inside (0, 1).
    {
        let logits = rand_tensor(vec![2, 6], &mut rng);
        let target = Tensor::new(
            vec![2, 6],
            (0..12).map(|i| f64::from(i % 2 == 0)).collect(),
        )
        .unwrap();
        let r = finite_diff(&[logits], 12, FD_STEP, move |t, v| {
            let p = t.sigmoid(v[0]);
            let tt = t.constant(target.clone());
            t.bce_loss(p, tt)
        })?;
        push("bce_loss", r);
    }
    // pad/trunc/clamp chain (inputs away from the clamp bound).
    {
        let x = rand_tensor(vec![1, 2, 7], &mut rng);
        let r = finite_diff(&[x], 14, FD_STEP, |t, v| {
            let p = t.pad_right(v[0], 3)?;
            let c = t.clamp_sym(p, 4.0)?;
            let tr = t.trunc_right(c, 5)?;
            let sq = t.hadamard(tr, tr)?;
            Ok(t.sum(sq))
        })?;
        push("pad/trunc/clamp", r);
    }
    // delay_add.
    {
        let x = rand_tensor(vec![1, 1, 16], &mut rng);
        let r = finite_diff(&[x], 16, FD_STEP, |t, v| {
            let y = t.delay_add(v[0], 5, 0.3)?;
            let sq = t.hadamard(y, y)?;
            Ok(t.sum(sq))
        })?;
        push("delay_add", r);
    }
    // biquad cascade.
    {
        let x = rand_tensor(vec![1, 1, 24], &mut rng);
        let sections = Arc::new(vec![
            BiquadSection {
                b0: 0.2,
                b1: 0.3,
                b2: 0.1,
                a1: -0.5,
                a2: 0.2,
            },
            BiquadSection {
                b0: 0.9,
                b1: -0.1,
                b2: 0.05,
                a1: 0.2,
                a2: -0.1,
            },
        ]);
        let r = finite_diff(&[x], 24, FD_STEP, move |t, v| {
            let y = t.biquad(v[0], Arc::clone(&sections))?;
            let sq = t.hadamard(y, y)?;
            Ok(t.sum(sq))
        })?;
        push("biquad", r);
    }
    // resample (fixed-factor linear map).
    {
        let x = rand_tensor(vec![1, 1, 20], &mut rng);
        let map = Arc::new(ResampleMap::new(20, 31));
        let r = finite_diff(&[x], 20, FD_STEP, move |t, v| {
            let y = t.resample(v[0], Arc::clone(&map))?;
            let sq = t.hadamard(y, y)?;
            Ok(t.sum(sq))
        })?;
        push("resample", r);
    }
    // stft magnitude.
    {
        let x = rand_tensor(vec![1, 48], &mut rng);
        let kernel = Arc::new(StftKernel::new(16, 8, 48));
        let r = finite_diff(&[x], 24, FD_STEP, move |t, v| {
            let m = t.stft_magnitude(v[0], Arc::clone(&kernel))?;
            let lg = t.log_floor(m, 1e-5)?;
            Ok(t.sum(lg))
        })?;
        push("stft_magnitude", r);
    }
    // reshape composite.
    {
        let x = rand_tensor(vec![2, 3, 4], &mut rng);
        let r = finite_diff(&[x], 24, FD_STEP, |t, v| {
            let y = t.reshape(v[0], vec![2, 12])?;
            let sq = t.hadamard(y, y)?;
            Ok(t.sum(sq))
        })?;
        push("reshape", r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_primitives_match_finite_differences() {
        for (name, max_rel) in run_primitive_checks().unwrap() {
            assert!(max_rel <= 1e-4, "{name}: max relative error {max_rel:.3e}");
        }
    }
}
