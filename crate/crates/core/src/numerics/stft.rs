//! Windowed-FFT magnitude transform with an exact backward pass.
//!
//! Forward: reflect-pad around each frame center, multiply by a periodic
//! Hann window, FFT, keep `n_fft/2 + 1` magnitudes. Backward maps magnitude
//! gradients to frame gradients with one inverse FFT per frame and
//! scatter-adds them through the same reflect index map.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Fold an (possibly negative) index into `[0, len)` by mirror reflection
/// without edge repetition (`x[-1] -> x[1]`, `x[len] -> x[len-2]`).
pub fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = (2 * (len - 1)) as isize;
    let mut m = i.rem_euclid(period);
    if m as usize >= len {
        m = period - m;
    }
    m as usize
}

pub struct StftKernel {
    n_fft: usize,
    hop: usize,
    in_len: usize,
    frames: usize,
    window: Vec<f64>,
    /// Source sample index for each (frame, tap).
    index: Vec<usize>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl StftKernel {
    pub fn new(n_fft: usize, hop: usize, in_len: usize) -> StftKernel {
        assert!(n_fft >= 2 && hop >= 1 && in_len >= 1);
        let frames = 1 + in_len / hop;
        // Periodic Hann.
        let window: Vec<f64> = (0..n_fft)
            .map(|n| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / n_fft as f64).cos()))
            .collect();
        let half = (n_fft / 2) as isize;
        let mut index = Vec::with_capacity(frames * n_fft);
        for f in 0..frames {
            let center = (f * hop) as isize;
            for n in 0..n_fft as isize {
                index.push(reflect_index(center - half + n, in_len));
            }
        }
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(n_fft);
        let inv = planner.plan_fft_inverse(n_fft);
        StftKernel {
            n_fft,
            hop,
            in_len,
            frames,
            window,
            index,
            fwd,
            inv,
        }
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    /// Magnitude spectrogram of one signal. Writes `frames * bins` values
    /// into `mags` and the complex half-spectra into `spectra` (same layout).
    pub fn forward(&self, x: &[f64], mags: &mut [f64], spectra: &mut [Complex64]) {
        assert_eq!(x.len(), self.in_len);
        let bins = self.bins();
        assert_eq!(mags.len(), self.frames * bins);
        assert_eq!(spectra.len(), self.frames * bins);
        let mut buf = vec![Complex64::default(); self.n_fft];
        let mut scratch = vec![Complex64::default(); self.fwd.get_inplace_scratch_len()];
        for f in 0..self.frames {
            let idx = &self.index[f * self.n_fft..(f + 1) * self.n_fft];
            for ((b, &i), &w) in buf.iter_mut().zip(idx.iter()).zip(self.window.iter()) {
                *b = Complex64::new(x[i] * w, 0.0);
            }
            self.fwd.process_with_scratch(&mut buf, &mut scratch);
            for k in 0..bins {
                spectra[f * bins + k] = buf[k];
                mags[f * bins + k] = buf[k].norm();
            }
        }
    }

    /// Accumulate `d loss / d x` given `d loss / d magnitude` and the saved
    /// spectra from the forward pass.
    pub fn backward(&self, dmag: &[f64], spectra: &[Complex64], dx: &mut [f64]) {
        let bins = self.bins();
        assert_eq!(dmag.len(), self.frames * bins);
        assert_eq!(dx.len(), self.in_len);
        let mut buf = vec![Complex64::default(); self.n_fft];
        let mut scratch = vec![Complex64::default(); self.inv.get_inplace_scratch_len()];
        for f in 0..self.frames {
            // d|X_k|/dbuf_n = Re(conj(X_k) e^{-iwkn})/|X_k|, so feeding
            // c_k = g_k X_k/|X_k| (interior bins halved, hermitian mirror)
            // to the unnormalized inverse FFT yields the frame gradient.
            for b in buf.iter_mut() {
                *b = Complex64::default();
            }
            for k in 0..bins {
                let xk = spectra[f * bins + k];
                let m = xk.norm();
                if m == 0.0 {
                    continue;
                }
                let c = xk * (dmag[f * bins + k] / m);
                if k == 0 || k == self.n_fft / 2 {
                    buf[k] = c;
                } else {
                    buf[k] = c * 0.5;
                    buf[self.n_fft - k] = c.conj() * 0.5;
                }
            }
            self.inv.process_with_scratch(&mut buf, &mut scratch);
            let idx = &self.index[f * self.n_fft..(f + 1) * self.n_fft];
            for ((b, &i), &w) in buf.iter().zip(idx.iter()).zip(self.window.iter()) {
                dx[i] += b.re * w;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_folds_both_ends() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(-2, 5), 2);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(6, 5), 2);
        assert_eq!(reflect_index(0, 1), 0);
        assert_eq!(reflect_index(-7, 1), 0);
        // Deep fold: period 8 for len 5.
        assert_eq!(reflect_index(8, 5), 0);
        assert_eq!(reflect_index(9, 5), 1);
    }

    #[test]
    fn silence_gives_zero_magnitudes() {
        let k = StftKernel::new(16, 4, 32);
        let x = vec![0.0; 32];
        let mut mags = vec![0.0; k.frames() * k.bins()];
        let mut spec = vec![Complex64::default(); mags.len()];
        k.forward(&x, &mut mags, &mut spec);
        assert!(mags.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn frame_count_matches_hop_formula() {
        let k = StftKernel::new(16, 4, 33);
        assert_eq!(k.frames(), 1 + 33 / 4);
    }
}
