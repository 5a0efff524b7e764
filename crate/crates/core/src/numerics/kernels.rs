//! Raw per-item numeric kernels behind the tape ops.
//!
//! Everything here operates on flat `f64` slices; shape checking and batch
//! iteration happen in the tape layer.
//!
//! The convolution kernels use a polyphase layout: the (zero-padded) input
//! is split into `stride` unit-stride phase rows so that every inner loop
//! is a contiguous multiply-add the autovectorizer can handle, tiled so the
//! accumulators stay in L1. Reference implementations (`*_ref`) keep the
//! naive loops and serve as oracles for the blocked paths.

/// `floor((l + 2p - k)/s) + 1`, or `None` when the window does not fit.
pub fn conv1d_out_len(l: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    let padded = l + 2 * p;
    if k == 0 || s == 0 || padded < k {
        return None;
    }
    Some((padded - k) / s + 1)
}

/// `(l - 1)*s - 2p + k + output_padding` for the transposed convolution.
/// Returns `None` when the result would underflow (degenerate geometry).
pub fn convt1d_out_len(l: usize, k: usize, s: usize, p: usize, out_pad: usize) -> Option<usize> {
    let extent = (l - 1) * s + k + out_pad;
    extent.checked_sub(2 * p)
}

const T_TILE: usize = 240;
const G_BLOCK: usize = 4;

/// Phase split of a conceptually left/right zero-padded row set.
///
/// `phases[(row*s + ph)*plen + t] = padded_row[s*t + ph]` where
/// `padded_row[i] = rows[row][i - left_pad]` inside bounds and 0 outside.
fn split_phases(
    rows: &[f64],
    row_n: usize,
    row_len: usize,
    left_pad: usize,
    s: usize,
    plen: usize,
    out: &mut Vec<f64>,
) {
    out.clear();
    out.resize(row_n * s * plen, 0.0);
    for r in 0..row_n {
        let src = &rows[r * row_len..(r + 1) * row_len];
        for ph in 0..s {
            let dst = &mut out[(r * s + ph) * plen..(r * s + ph + 1) * plen];
            // Valid t range: left_pad <= s*t + ph < left_pad + row_len.
            let t_lo = (left_pad + s - 1 - ph) / s * s + ph; // first index >= left_pad with parity ph
            let mut i = t_lo;
            while i < left_pad + row_len {
                dst[i / s] = src[i - left_pad];
                i += s;
            }
        }
    }
}

/// Inverse of [`split_phases`]: `out[r][o] (+)= phases[r][(o+crop)%s][(o+crop)/s]`.
fn unsplit_phases_add(
    phases: &[f64],
    row_n: usize,
    s: usize,
    plen: usize,
    crop: usize,
    out: &mut [f64],
    out_len: usize,
) {
    for r in 0..row_n {
        let dst = &mut out[r * out_len..(r + 1) * out_len];
        for ph in 0..s {
            let src = &phases[(r * s + ph) * plen..(r * s + ph + 1) * plen];
            // o + crop = s*t + ph  =>  o = s*t + ph - crop.
            let mut t = if ph >= crop { 0 } else { (crop - ph + s - 1) / s };
            loop {
                let o = s * t + ph;
                if o < crop {
                    t += 1;
                    continue;
                }
                let oi = o - crop;
                if oi >= out_len {
                    break;
                }
                dst[oi] += src[t];
                t += 1;
            }
        }
    }
}

#[inline]
fn axpy(acc: &mut [f64], src: &[f64], w: f64) {
    for (a, s) in acc.iter_mut().zip(src.iter()) {
        *a += w * *s;
    }
}

#[inline]
#[allow(clippy::too_many_arguments)]
fn axpy4(
    a0: &mut [f64],
    a1: &mut [f64],
    a2: &mut [f64],
    a3: &mut [f64],
    src: &[f64],
    w0: f64,
    w1: f64,
    w2: f64,
    w3: f64,
) {
    let n = src.len();
    for i in 0..n {
        let sv = src[i];
        a0[i] += w0 * sv;
        a1[i] += w1 * sv;
        a2[i] += w2 * sv;
        a3[i] += w3 * sv;
    }
}

#[inline]
fn dot4(a0: &[f64], a1: &[f64], a2: &[f64], a3: &[f64], b: &[f64]) -> [f64; 4] {
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    let n = b.len();
    for i in 0..n {
        let bv = b[i];
        s0 += a0[i] * bv;
        s1 += a1[i] * bv;
        s2 += a2[i] * bv;
        s3 += a3[i] * bv;
    }
    [s0, s1, s2, s3]
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let n4 = n / 4 * 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    let mut i = 0;
    while i < n4 {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
        i += 4;
    }
    for t in n4..n {
        s0 += a[t] * b[t];
    }
    (s0 + s1) + (s2 + s3)
}

/// `out[g][t] = bias[g] + sum_{in,j} w[g][in][j] * phases[in][j%s][t + j/s]`.
#[allow(clippy::too_many_arguments)]
fn gather_mac(
    phases: &[f64],
    plen: usize,
    in_n: usize,
    s: usize,
    w: &[f64],
    bias: Option<&[f64]>,
    g_n: usize,
    k: usize,
    out: &mut [f64],
    lout: usize,
) {
    let mut g0 = 0;
    while g0 < g_n {
        let gb = (g_n - g0).min(G_BLOCK);
        let mut t0 = 0;
        while t0 < lout {
            let tt = (lout - t0).min(T_TILE);
            let mut acc0 = [0.0f64; T_TILE];
            let mut acc1 = [0.0f64; T_TILE];
            let mut acc2 = [0.0f64; T_TILE];
            let mut acc3 = [0.0f64; T_TILE];
            if let Some(b) = bias {
                acc0[..tt].fill(b[g0]);
                if gb > 1 {
                    acc1[..tt].fill(b[g0 + 1]);
                }
                if gb > 2 {
                    acc2[..tt].fill(b[g0 + 2]);
                }
                if gb > 3 {
                    acc3[..tt].fill(b[g0 + 3]);
                }
            }
            for in_ in 0..in_n {
                for j in 0..k {
                    let base = (in_ * s + j % s) * plen + t0 + j / s;
                    let src = &phases[base..base + tt];
                    if gb == G_BLOCK {
                        let widx = |g: usize| w[((g0 + g) * in_n + in_) * k + j];
                        axpy4(
                            &mut acc0[..tt],
                            &mut acc1[..tt],
                            &mut acc2[..tt],
                            &mut acc3[..tt],
                            src,
                            widx(0),
                            widx(1),
                            widx(2),
                            widx(3),
                        );
                    } else {
                        for g in 0..gb {
                            let wv = w[((g0 + g) * in_n + in_) * k + j];
                            let acc = match g {
                                0 => &mut acc0,
                                1 => &mut acc1,
                                2 => &mut acc2,
                                _ => &mut acc3,
                            };
                            axpy(&mut acc[..tt], src, wv);
                        }
                    }
                }
            }
            for g in 0..gb {
                let acc = match g {
                    0 => &acc0,
                    1 => &acc1,
                    2 => &acc2,
                    _ => &acc3,
                };
                out[(g0 + g) * lout + t0..(g0 + g) * lout + t0 + tt].copy_from_slice(&acc[..tt]);
            }
            t0 += tt;
        }
        g0 += gb;
    }
}

#[inline]
#[allow(clippy::too_many_arguments)]
fn axpy_4src(
    acc: &mut [f64],
    s0: &[f64],
    s1: &[f64],
    s2: &[f64],
    s3: &[f64],
    w0: f64,
    w1: f64,
    w2: f64,
    w3: f64,
) {
    let n = acc.len();
    for i in 0..n {
        acc[i] += w0 * s0[i] + w1 * s1[i] + w2 * s2[i] + w3 * s3[i];
    }
}

/// Scatter transpose of [`gather_mac`]:
/// `phases[g][j%s][t + j/s] += sum_in w[in][g][j] * src[in][t]`.
///
/// The phase buffer must be zeroed by the caller (`plen >= src_len + k`).
#[allow(clippy::too_many_arguments)]
fn scatter_mac(
    src_rows: &[f64],
    src_len: usize,
    in_n: usize,
    w: &[f64],
    g_n: usize,
    k: usize,
    s: usize,
    phases: &mut [f64],
    plen: usize,
) {
    const TW: usize = T_TILE + 8;
    for g in 0..g_n {
        let mut t0 = 0;
        while t0 < src_len {
            let tt = (src_len - t0).min(T_TILE);
            // Accumulator covers phase positions [t0, t0 + tt + k/s].
            let mut acc = [[0.0f64; TW]; 4];
            debug_assert!(s <= 4 && tt + k / s + 1 <= TW);
            let mut in0 = 0;
            while in0 < in_n {
                let ib = (in_n - in0).min(4);
                if ib == 4 {
                    let row = |q: usize| {
                        &src_rows[(in0 + q) * src_len + t0..(in0 + q) * src_len + t0 + tt]
                    };
                    for j in 0..k {
                        let wv = |q: usize| w[((in0 + q) * g_n + g) * k + j];
                        axpy_4src(
                            &mut acc[j % s][j / s..j / s + tt],
                            row(0),
                            row(1),
                            row(2),
                            row(3),
                            wv(0),
                            wv(1),
                            wv(2),
                            wv(3),
                        );
                    }
                } else {
                    for q in 0..ib {
                        let src = &src_rows
                            [(in0 + q) * src_len + t0..(in0 + q) * src_len + t0 + tt];
                        for j in 0..k {
                            let wv = w[((in0 + q) * g_n + g) * k + j];
                            axpy(&mut acc[j % s][j / s..j / s + tt], src, wv);
                        }
                    }
                }
                in0 += ib;
            }
            for ph in 0..s {
                let width = tt + k / s + 1;
                let dst = &mut phases[(g * s + ph) * plen + t0..(g * s + ph) * plen + t0 + width];
                for (d, a) in dst.iter_mut().zip(acc[ph][..width].iter()) {
                    *d += *a;
                }
            }
            t0 += tt;
        }
    }
}

/// Weight-gradient dots: `dw[a][b][j] += sum_t a_rows[a][t] * phases[b][j%s][t + j/s]`.
#[allow(clippy::too_many_arguments)]
fn dot_mac(
    a_rows: &[f64],
    a_len: usize,
    a_n: usize,
    phases: &[f64],
    plen: usize,
    b_n: usize,
    s: usize,
    k: usize,
    dw: &mut [f64],
) {
    let mut a0i = 0;
    while a0i < a_n {
        let ab = (a_n - a0i).min(G_BLOCK);
        for b in 0..b_n {
            let mut sums = [[0.0f64; G_BLOCK]; 8];
            debug_assert!(k <= 8);
            let mut t0 = 0;
            while t0 < a_len {
                let tt = (a_len - t0).min(T_TILE);
                for j in 0..k {
                    let base = (b * s + j % s) * plen + t0 + j / s;
                    let ph = &phases[base..base + tt];
                    if ab == G_BLOCK {
                        let row = |g: usize| {
                            &a_rows[(a0i + g) * a_len + t0..(a0i + g) * a_len + t0 + tt]
                        };
                        let r = dot4(row(0), row(1), row(2), row(3), ph);
                        for g in 0..4 {
                            sums[j][g] += r[g];
                        }
                    } else {
                        for g in 0..ab {
                            let row =
                                &a_rows[(a0i + g) * a_len + t0..(a0i + g) * a_len + t0 + tt];
                            sums[j][g] += dot(row, ph);
                        }
                    }
                }
                t0 += tt;
            }
            for g in 0..ab {
                for j in 0..k {
                    dw[((a0i + g) * b_n + b) * k + j] += sums[j][g];
                }
            }
        }
        a0i += ab;
    }
}

// ── convolution entry points ─────────────────────────────────────────────

/// Cross-correlation forward for one batch item.
///
/// `x`: `[ci][l]`, `w`: `[co][ci][k]`, `bias`: `[co]`, `out`: `[co][lout]`.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_item(
    x: &[f64],
    ci_n: usize,
    l: usize,
    w: &[f64],
    bias: &[f64],
    co_n: usize,
    k: usize,
    s: usize,
    p: usize,
    out: &mut [f64],
    lout: usize,
    scratch: &mut Vec<f64>,
) {
    let plen = (l + 2 * p) / s + k + 2;
    split_phases(x, ci_n, l, p, s, plen, scratch);
    gather_mac(scratch, plen, ci_n, s, w, Some(bias), co_n, k, out, lout);
}

/// Gradient w.r.t. the convolution input, one item (accumulated into `dx`).
#[allow(clippy::too_many_arguments)]
pub fn conv1d_item_bwd_input(
    dy: &[f64],
    w: &[f64],
    ci_n: usize,
    l: usize,
    co_n: usize,
    k: usize,
    s: usize,
    p: usize,
    lout: usize,
    dx: &mut [f64],
    scratch: &mut Vec<f64>,
) {
    // dxp[s*t + j] += w[co][ci][j] * dy[co][t]; w layout [in=co][g=ci] after
    // viewing the first two axes as (in, g).
    let plen = lout + k + 2;
    scratch.clear();
    scratch.resize(ci_n * s * plen, 0.0);
    scatter_mac(dy, lout, co_n, w, ci_n, k, s, scratch, plen);
    unsplit_phases_add(scratch, ci_n, s, plen, p, dx, l);
}

/// Gradients w.r.t. weight and bias, one item (accumulated into `dw`, `db`).
#[allow(clippy::too_many_arguments)]
pub fn conv1d_item_bwd_params(
    x: &[f64],
    dy: &[f64],
    ci_n: usize,
    l: usize,
    co_n: usize,
    k: usize,
    s: usize,
    p: usize,
    lout: usize,
    dw: &mut [f64],
    db: &mut [f64],
    scratch: &mut Vec<f64>,
) {
    let plen = (l + 2 * p) / s + k + 2;
    split_phases(x, ci_n, l, p, s, plen, scratch);
    for co in 0..co_n {
        db[co] += dy[co * lout..(co + 1) * lout].iter().sum::<f64>();
    }
    dot_mac(dy, lout, co_n, scratch, plen, ci_n, s, k, dw);
}

/// Transposed convolution (scatter-add) forward for one item.
///
/// `x`: `[ci][l]`, `w`: `[ci][co][k]`, `out`: `[co][lout]` where
/// `lout = (l-1)*s - 2p + k + out_pad`.
#[allow(clippy::too_many_arguments)]
pub fn convt1d_item(
    x: &[f64],
    ci_n: usize,
    l: usize,
    w: &[f64],
    bias: &[f64],
    co_n: usize,
    k: usize,
    s: usize,
    p: usize,
    lout: usize,
    out: &mut [f64],
    scratch: &mut Vec<f64>,
) {
    let plen = l + k + 2;
    scratch.clear();
    scratch.resize(co_n * s * plen, 0.0);
    scatter_mac(x, l, ci_n, w, co_n, k, s, scratch, plen);
    for (o, &b) in out.iter_mut().zip(bias.iter().flat_map(|b| std::iter::repeat(b).take(lout))) {
        *o = b;
    }
    unsplit_phases_add(scratch, co_n, s, plen, p, out, lout);
}

/// Gradient w.r.t. the transposed-convolution input, one item.
#[allow(clippy::too_many_arguments)]
pub fn convt1d_item_bwd_input(
    dy: &[f64],
    w: &[f64],
    ci_n: usize,
    l: usize,
    co_n: usize,
    k: usize,
    s: usize,
    p: usize,
    lout: usize,
    dx: &mut [f64],
    scratch: &mut Vec<f64>,
) {
    // dx[ci][t] = sum_{co,j} dy_ext[co][s*t + j] * w[ci][co][j]
    // where dy_ext is dy placed at offset p. This is a gather over dy phases.
    let ext = ((l - 1) * s + k).max(p + lout);
    let plen = ext / s + k + 2;
    split_phases(dy, co_n, lout, p, s, plen, scratch);
    let mut tmp = vec![0.0; ci_n * l];
    gather_mac(scratch, plen, co_n, s, w, None, ci_n, k, &mut tmp, l);
    for (d, t) in dx.iter_mut().zip(tmp.iter()) {
        *d += *t;
    }
}

/// Gradients w.r.t. transposed-convolution weight and bias, one item.
#[allow(clippy::too_many_arguments)]
pub fn convt1d_item_bwd_params(
    x: &[f64],
    dy: &[f64],
    ci_n: usize,
    l: usize,
    co_n: usize,
    k: usize,
    s: usize,
    p: usize,
    lout: usize,
    dw: &mut [f64],
    db: &mut [f64],
    scratch: &mut Vec<f64>,
) {
    let ext = ((l - 1) * s + k).max(p + lout);
    let plen = ext / s + k + 2;
    split_phases(dy, co_n, lout, p, s, plen, scratch);
    for co in 0..co_n {
        db[co] += dy[co * lout..(co + 1) * lout].iter().sum::<f64>();
    }
    // dw[ci][co][j] = sum_t x[ci][t] * dy_ext[co][s*t + j].
    dot_mac(x, l, ci_n, scratch, plen, co_n, s, k, dw);
}

// ── reference (naive) convolutions, used as oracles in tests ────────────

#[allow(clippy::too_many_arguments)]
pub fn conv1d_item_ref(
    x: &[f64],
    ci_n: usize,
    l: usize,
    w: &[f64],
    bias: &[f64],
    co_n: usize,
    k: usize,
    s: usize,
    p: usize,
    out: &mut [f64],
    lout: usize,
) {
    for co in 0..co_n {
        for t in 0..lout {
            let mut acc = bias[co];
            for ci in 0..ci_n {
                for j in 0..k {
                    let idx = (s * t + j) as isize - p as isize;
                    if idx >= 0 && (idx as usize) < l {
                        acc += w[(co * ci_n + ci) * k + j] * x[ci * l + idx as usize];
                    }
                }
            }
            out[co * lout + t] = acc;
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn convt1d_item_ref(
    x: &[f64],
    ci_n: usize,
    l: usize,
    w: &[f64],
    bias: &[f64],
    co_n: usize,
    k: usize,
    s: usize,
    p: usize,
    lout: usize,
    out: &mut [f64],
) {
    for co in 0..co_n {
        for o in out[co * lout..(co + 1) * lout].iter_mut() {
            *o = bias[co];
        }
    }
    for ci in 0..ci_n {
        for t in 0..l {
            for co in 0..co_n {
                for j in 0..k {
                    let pos = (s * t + j) as isize - p as isize;
                    if pos >= 0 && (pos as usize) < lout {
                        out[co * lout + pos as usize] +=
                            x[ci * l + t] * w[(ci * co_n + co) * k + j];
                    }
                }
            }
        }
    }
}

// ── dense ────────────────────────────────────────────────────────────────

/// Affine map for a batch: `y[b] = w · x[b] + bias`, `w`: `[m][n]`.
pub fn dense_forward(x: &[f64], b_n: usize, n: usize, w: &[f64], bias: &[f64], m: usize, y: &mut [f64]) {
    for b in 0..b_n {
        let xrow = &x[b * n..(b + 1) * n];
        let yrow = &mut y[b * m..(b + 1) * m];
        for i in 0..m {
            yrow[i] = bias[i] + dot(&w[i * n..(i + 1) * n], xrow);
        }
    }
}

pub fn dense_bwd_input(dy: &[f64], w: &[f64], b_n: usize, n: usize, m: usize, dx: &mut [f64]) {
    for b in 0..b_n {
        let dyrow = &dy[b * m..(b + 1) * m];
        let dxrow = &mut dx[b * n..(b + 1) * n];
        for (i, &g) in dyrow.iter().enumerate() {
            if g != 0.0 {
                axpy(dxrow, &w[i * n..(i + 1) * n], g);
            }
        }
    }
}

pub fn dense_bwd_params(
    x: &[f64],
    dy: &[f64],
    b_n: usize,
    n: usize,
    m: usize,
    dw: &mut [f64],
    db: &mut [f64],
) {
    for b in 0..b_n {
        let xrow = &x[b * n..(b + 1) * n];
        let dyrow = &dy[b * m..(b + 1) * m];
        for (i, &g) in dyrow.iter().enumerate() {
            db[i] += g;
            if g != 0.0 {
                axpy(&mut dw[i * n..(i + 1) * n], xrow, g);
            }
        }
    }
}

// ── IIR / resampling ─────────────────────────────────────────────────────

/// One second-order IIR section (direct form I coefficients, `a0 == 1`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BiquadSection {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl BiquadSection {
    /// Causal single pass with zero initial state, in place.
    pub fn run(&self, x: &mut [f64]) {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        for v in x.iter_mut() {
            let x0 = *v;
            let y0 = self.b0 * x0 + self.b1 * x1 + self.b2 * x2 - self.a1 * y1 - self.a2 * y2;
            x2 = x1;
            x1 = x0;
            y2 = y1;
            y1 = y0;
            *v = y0;
        }
    }
}

/// Run a biquad cascade over `x` (zero initial state each section).
pub fn biquad_cascade(sections: &[BiquadSection], x: &mut [f64]) {
    for s in sections {
        s.run(x);
    }
}

/// Adjoint of [`biquad_cascade`] as a linear operator on a fixed-length
/// signal: reverse, filter, reverse (lower-triangular Toeplitz transpose).
pub fn biquad_cascade_adjoint(sections: &[BiquadSection], g: &mut [f64]) {
    g.reverse();
    biquad_cascade(sections, g);
    g.reverse();
}

/// Precomputed linear-interpolation map: `out[i] = (1-frac[i])*x[lo[i]] + frac[i]*x[lo[i]+1]`
/// (`lo[i]+1` clamped to the last sample).
#[derive(Clone, Debug)]
pub struct ResampleMap {
    pub in_len: usize,
    pub lo: Vec<usize>,
    pub frac: Vec<f64>,
}

impl ResampleMap {
    /// Zero-anchored grid: output position `i` reads input position
    /// `i * in_len / out_len`.
    pub fn new(in_len: usize, out_len: usize) -> ResampleMap {
        assert!(in_len > 0 && out_len > 0);
        let ratio = in_len as f64 / out_len as f64;
        let mut lo = Vec::with_capacity(out_len);
        let mut frac = Vec::with_capacity(out_len);
        for i in 0..out_len {
            let pos = i as f64 * ratio;
            let mut idx = pos.floor() as usize;
            let mut f = pos - idx as f64;
            if idx >= in_len - 1 {
                idx = in_len - 1;
                f = 0.0;
            }
            lo.push(idx);
            frac.push(f);
        }
        ResampleMap { in_len, lo, frac }
    }

    pub fn out_len(&self) -> usize {
        self.lo.len()
    }

    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.in_len);
        for ((o, &i0), &f) in out.iter_mut().zip(self.lo.iter()).zip(self.frac.iter()) {
            let hi = if i0 + 1 < self.in_len { x[i0 + 1] } else { x[i0] };
            *o = x[i0] * (1.0 - f) + hi * f;
        }
    }

    /// Transpose (scatter-add) of [`ResampleMap::apply`].
    pub fn apply_adjoint(&self, dy: &[f64], dx: &mut [f64]) {
        debug_assert_eq!(dx.len(), self.in_len);
        for ((&g, &i0), &f) in dy.iter().zip(self.lo.iter()).zip(self.frac.iter()) {
            let hi = if i0 + 1 < self.in_len { i0 + 1 } else { i0 };
            dx[i0] += g * (1.0 - f);
            dx[hi] += g * f;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn out_len_formula_against_exhaustive_enumeration() {
        // Independent oracle: count valid window placements directly.
        for l in 4usize..=64 {
            for &k in &[1usize, 3, 5] {
                for &s in &[1usize, 2] {
                    for &p in &[0usize, 1, 2] {
                        let padded = l + 2 * p;
                        if padded < k {
                            assert_eq!(conv1d_out_len(l, k, s, p), None);
                            continue;
                        }
                        let mut count = 0;
                        let mut start = 0;
                        while start + k <= padded {
                            count += 1;
                            start += s;
                        }
                        assert_eq!(conv1d_out_len(l, k, s, p), Some(count), "l={l} k={k} s={s} p={p}");
                    }
                }
            }
        }
    }

    #[test]
    fn identity_kernel() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let w = [1.0];
        let mut out = [0.0; 4];
        let mut scratch = Vec::new();
        conv1d_item(&x, 1, 4, &w, &[0.0], 1, 1, 1, 0, &mut out, 4, &mut scratch);
        assert_eq!(out, x);
    }

    #[test]
    fn hand_convolution_with_padding() {
        // [0,1,2,3,0] boxcar 3-tap: 0+1+2, 1+2+3, 2+3+0.
        let x = [1.0, 2.0, 3.0];
        let w = [1.0, 1.0, 1.0];
        let mut out = [0.0; 3];
        let mut scratch = Vec::new();
        conv1d_item(&x, 1, 3, &w, &[0.0], 1, 3, 1, 1, &mut out, 3, &mut scratch);
        assert_eq!(out, [3.0, 6.0, 5.0]);
    }

    #[test]
    fn zero_kernel_gives_bias() {
        let x = [0.3, -0.7, 0.1];
        let w = [0.0, 0.0, 0.0];
        let mut out = [0.0; 3];
        let mut scratch = Vec::new();
        conv1d_item(&x, 1, 3, &w, &[2.5], 1, 3, 1, 1, &mut out, 3, &mut scratch);
        assert_eq!(out, [2.5, 2.5, 2.5]);
    }

    #[test]
    fn transposed_stride2_scatter() {
        // Input (1,2), 1-tap kernel (1), stride 2 -> (1, 0, 2).
        let x = [1.0, 2.0];
        let w = [1.0];
        let lout = convt1d_out_len(2, 1, 2, 0, 0).unwrap();
        assert_eq!(lout, 3);
        let mut out = vec![0.0; lout];
        let mut scratch = Vec::new();
        convt1d_item(&x, 1, 2, &w, &[0.0], 1, 1, 2, 0, lout, &mut out, &mut scratch);
        assert_eq!(out, [1.0, 0.0, 2.0]);
    }

    #[test]
    fn transposed_identity() {
        let x = [0.5, -1.0, 2.0];
        let w = [1.0];
        let lout = convt1d_out_len(3, 1, 1, 0, 0).unwrap();
        assert_eq!(lout, 3);
        let mut out = vec![0.0; lout];
        let mut scratch = Vec::new();
        convt1d_item(&x, 1, 3, &w, &[0.0], 1, 1, 1, 0, lout, &mut out, &mut scratch);
        assert_eq!(out, x);
    }

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn blocked_conv_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(ci, co, l, k, s, p) in &[
            (1usize, 1usize, 5usize, 3usize, 1usize, 1usize),
            (2, 3, 17, 3, 2, 2),
            (3, 4, 33, 5, 2, 1),
            (4, 8, 64, 3, 2, 2),
            (2, 5, 29, 1, 1, 0),
            (3, 7, 41, 3, 1, 2),
        ] {
            let Some(lout) = conv1d_out_len(l, k, s, p) else { continue };
            let x = rand_vec(ci * l, &mut rng);
            let w = rand_vec(co * ci * k, &mut rng);
            let b = rand_vec(co, &mut rng);
            let mut out = vec![0.0; co * lout];
            let mut out_ref = vec![0.0; co * lout];
            let mut scratch = Vec::new();
            conv1d_item(&x, ci, l, &w, &b, co, k, s, p, &mut out, lout, &mut scratch);
            conv1d_item_ref(&x, ci, l, &w, &b, co, k, s, p, &mut out_ref, lout);
            for (a, r) in out.iter().zip(out_ref.iter()) {
                assert!((a - r).abs() < 1e-12, "ci={ci} co={co} l={l} k={k} s={s} p={p}");
            }
        }
    }

    #[test]
    fn blocked_convt_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for &(ci, co, l, k, s, p, op) in &[
            (1usize, 1usize, 5usize, 3usize, 2usize, 1usize, 1usize),
            (3, 2, 16, 3, 2, 2, 1),
            (4, 4, 21, 5, 2, 2, 0),
            (2, 6, 33, 3, 1, 1, 0),
            (5, 3, 11, 3, 2, 0, 1),
        ] {
            let Some(lout) = convt1d_out_len(l, k, s, p, op).filter(|&v| v > 0) else {
                continue;
            };
            let x = rand_vec(ci * l, &mut rng);
            let w = rand_vec(ci * co * k, &mut rng);
            let b = rand_vec(co, &mut rng);
            let mut out = vec![0.0; co * lout];
            let mut out_ref = vec![0.0; co * lout];
            let mut scratch = Vec::new();
            convt1d_item(&x, ci, l, &w, &b, co, k, s, p, lout, &mut out, &mut scratch);
            convt1d_item_ref(&x, ci, l, &w, &b, co, k, s, p, lout, &mut out_ref);
            for (a, r) in out.iter().zip(out_ref.iter()) {
                assert!((a - r).abs() < 1e-12, "ci={ci} co={co} l={l} k={k} s={s} p={p} op={op}");
            }
        }
    }

    #[test]
    fn conv_backward_input_matches_transpose_oracle() {
        // The input gradient of conv(x) under loss <y, dy> must equal the
        // transposed convolution of dy, built here from the reference path.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(ci, co, l, k, s, p) in &[(2usize, 3usize, 19usize, 3usize, 2usize, 1usize), (3, 4, 24, 3, 1, 2)] {
            let lout = conv1d_out_len(l, k, s, p).unwrap();
            let w = rand_vec(co * ci * k, &mut rng);
            let dy = rand_vec(co * lout, &mut rng);
            let mut dx = vec![0.0; ci * l];
            let mut scratch = Vec::new();
            conv1d_item_bwd_input(&dy, &w, ci, l, co, k, s, p, lout, &mut dx, &mut scratch);

            // Oracle: dx[ci][t] = sum_{co,j, s*u+j-p==t} w * dy[co][u].
            let mut oracle = vec![0.0; ci * l];
            for c_o in 0..co {
                for u in 0..lout {
                    for c_i in 0..ci {
                        for j in 0..k {
                            let idx = (s * u + j) as isize - p as isize;
                            if idx >= 0 && (idx as usize) < l {
                                oracle[c_i * l + idx as usize] +=
                                    w[(c_o * ci + c_i) * k + j] * dy[c_o * lout + u];
                            }
                        }
                    }
                }
            }
            for (a, r) in dx.iter().zip(oracle.iter()) {
                assert!((a - r).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_params_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (ci, co, l, k, s, p) = (3usize, 5usize, 27usize, 3usize, 2usize, 2usize);
        let lout = conv1d_out_len(l, k, s, p).unwrap();
        let x = rand_vec(ci * l, &mut rng);
        let dy = rand_vec(co * lout, &mut rng);
        let mut dw = vec![0.0; co * ci * k];
        let mut db = vec![0.0; co];
        let mut scratch = Vec::new();
        conv1d_item_bwd_params(&x, &dy, ci, l, co, k, s, p, lout, &mut dw, &mut db, &mut scratch);

        let mut dw_ref = vec![0.0; co * ci * k];
        for c_o in 0..co {
            for c_i in 0..ci {
                for j in 0..k {
                    let mut acc = 0.0;
                    for t in 0..lout {
                        let idx = (s * t + j) as isize - p as isize;
                        if idx >= 0 && (idx as usize) < l {
                            acc += dy[c_o * lout + t] * x[c_i * l + idx as usize];
                        }
                    }
                    dw_ref[(c_o * ci + c_i) * k + j] = acc;
                }
            }
        }
        for (a, r) in dw.iter().zip(dw_ref.iter()) {
            assert!((a - r).abs() < 1e-12);
        }
        for c_o in 0..co {
            let expect: f64 = dy[c_o * lout..(c_o + 1) * lout].iter().sum();
            assert!((db[c_o] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn resample_identity_when_lengths_match() {
        let map = ResampleMap::new(7, 7);
        let x: Vec<f64> = (0..7).map(|i| i as f64 * 0.3 - 1.0).collect();
        let mut out = vec![0.0; 7];
        map.apply(&x, &mut out);
        assert_eq!(out, x);
    }

    #[test]
    fn resample_adjoint_inner_product() {
        let map = ResampleMap::new(13, 29);
        let x: Vec<f64> = (0..13).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.5).collect();
        let y: Vec<f64> = (0..29).map(|i| ((i * 104729) % 29) as f64 / 29.0 - 0.5).collect();
        let mut ax = vec![0.0; 29];
        map.apply(&x, &mut ax);
        let mut aty = vec![0.0; 13];
        map.apply_adjoint(&y, &mut aty);
        let lhs: f64 = ax.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(aty.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn biquad_adjoint_inner_product() {
        let sections = [
            BiquadSection { b0: 0.2, b1: 0.3, b2: 0.1, a1: -0.4, a2: 0.2 },
            BiquadSection { b0: 0.9, b1: -0.2, b2: 0.05, a1: 0.1, a2: -0.3 },
        ];
        let n = 64;
        let x: Vec<f64> = (0..n).map(|i| ((i * 31) % 17) as f64 / 17.0 - 0.5).collect();
        let y: Vec<f64> = (0..n).map(|i| ((i * 57) % 23) as f64 / 23.0 - 0.5).collect();
        let mut ax = x.clone();
        biquad_cascade(&sections, &mut ax);
        let mut aty = y.clone();
        biquad_cascade_adjoint(&sections, &mut aty);
        let lhs: f64 = ax.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(aty.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
