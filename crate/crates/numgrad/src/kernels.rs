//! Dense loops shared by forward and backward rules. Row-major throughout.

/// `out[m,n] += a[m,k] * b[k,n]`
pub fn mm_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    // four output rows per pass over `b`; per-element summation order is
    // still p = 0..k
    let blocks = m / 4;
    for bi in 0..blocks {
        let i = bi * 4;
        let (o0, rest) = out[i * n..(i + 4) * n].split_at_mut(n);
        let (o1, rest) = rest.split_at_mut(n);
        let (o2, o3) = rest.split_at_mut(n);
        for p in 0..k {
            let (a0, a1, a2, a3) = (a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]);
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                let bv = brow[j];
                o0[j] += a0 * bv;
                o1[j] += a1 * bv;
                o2[j] += a2 * bv;
                o3[j] += a3 * bv;
            }
        }
    }
    for i in blocks * 4..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m,k] += a[m,n] * b[k,n]^T`
pub fn mm_nt_acc(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += dot(arow, brow);
        }
    }
}

/// `out[k,n] += a[m,k]^T * b[m,n]`
pub fn mm_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators; fixed order keeps results reproducible
    let b = &b[..a.len()];
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// Row-wise softmax in place over rows of width `cols`.
pub fn softmax_rows(x: &mut [f64], cols: usize) {
    for row in x.chunks_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Keys `lo..hi` that query `i` may attend to.
#[inline]
pub fn key_range(causal: bool, window: Option<usize>, offset: usize, i: usize, tk: usize) -> (usize, usize) {
    if !causal {
        return (0, tk);
    }
    let qi = i + offset;
    let hi = (qi + 1).min(tk);
    let lo = window.map_or(0, |w| qi.saturating_sub(w));
    (lo.min(hi), hi)
}

pub struct AttnShape {
    pub tq: usize,
    pub tk: usize,
    pub d: usize,
    pub heads: usize,
}

/// Multi-head scaled dot-product attention. Returns output `[tq,d]` and
/// probabilities `[heads,tq,tk]`.
pub fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    s: &AttnShape,
    causal: bool,
    window: Option<usize>,
) -> (Vec<f64>, Vec<f64>) {
    let dh = s.d / s.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let offset = s.tk.saturating_sub(s.tq);
    let mut probs = vec![0.0; s.heads * s.tq * s.tk];
    let mut out = vec![0.0; s.tq * s.d];
    for h in 0..s.heads {
        let c0 = h * dh;
        for i in 0..s.tq {
            let qrow = &q[i * s.d + c0..i * s.d + c0 + dh];
            let prow = &mut probs[(h * s.tq + i) * s.tk..(h * s.tq + i + 1) * s.tk];
            // masked keys get probability exactly zero; skip them
            let (lo, hi) = key_range(causal, window, offset, i, s.tk);
            if lo < hi {
                let live = &mut prow[lo..hi];
                for (j, p) in (lo..hi).zip(live.iter_mut()) {
                    let krow = &k[j * s.d + c0..j * s.d + c0 + dh];
                    *p = dot(qrow, krow) * scale;
                }
                softmax_rows(live, hi - lo);
            } else {
                prow.iter_mut().for_each(|p| *p = f64::NAN);
            }
            let orow = &mut out[i * s.d + c0..i * s.d + c0 + dh];
            for (j, &p) in prow.iter().enumerate().take(hi).skip(lo) {
                if p == 0.0 {
                    continue;
                }
                let vrow = &v[j * s.d + c0..j * s.d + c0 + dh];
                for (o, &vv) in orow.iter_mut().zip(vrow) {
                    *o += p * vv;
                }
            }
        }
    }
    (out, probs)
}

/// Gradients of attention w.r.t. (q, k, v); each is accumulated only when requested.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    s: &AttnShape,
    mut dq: Option<&mut [f64]>,
    mut dk: Option<&mut [f64]>,
    mut dv: Option<&mut [f64]>,
) {
    let dh = s.d / s.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dp = vec![0.0; s.tk];
    for h in 0..s.heads {
        let c0 = h * dh;
        for i in 0..s.tq {
            let prow = &probs[(h * s.tq + i) * s.tk..(h * s.tq + i + 1) * s.tk];
            let dorow = &dout[i * s.d + c0..i * s.d + c0 + dh];
            let mut weighted = 0.0;
            for (j, &p) in prow.iter().enumerate() {
                if p == 0.0 {
                    dp[j] = 0.0;
                    continue;
                }
                let vrow = &v[j * s.d + c0..j * s.d + c0 + dh];
                dp[j] = dot(dorow, vrow);
                weighted += p * dp[j];
                if let Some(dv) = dv.as_deref_mut() {
                    let dvrow = &mut dv[j * s.d + c0..j * s.d + c0 + dh];
                    for (o, &g) in dvrow.iter_mut().zip(dorow) {
                        *o += p * g;
                    }
                }
            }
            if dq.is_none() && dk.is_none() {
                continue;
            }
            let qrow = &q[i * s.d + c0..i * s.d + c0 + dh];
            for (j, &p) in prow.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                let ds = p * (dp[j] - weighted) * scale;
                if let Some(dq) = dq.as_deref_mut() {
                    let krow = &k[j * s.d + c0..j * s.d + c0 + dh];
                    let dqrow = &mut dq[i * s.d + c0..i * s.d + c0 + dh];
                    for (o, &kv) in dqrow.iter_mut().zip(krow) {
                        *o += ds * kv;
                    }
                }
                if let Some(dk) = dk.as_deref_mut() {
                    let dkrow = &mut dk[j * s.d + c0..j * s.d + c0 + dh];
                    for (o, &qv) in dkrow.iter_mut().zip(qrow) {
                        *o += ds * qv;
                    }
                }
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
