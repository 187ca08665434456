//! Plain loops for the hot paths. Inner loops run over contiguous memory so
//! the compiler can vectorize them; zero inputs are skipped because the
//! occupancy inputs are very sparse.

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four partial sums keep the reduction order fixed and vectorizable
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * i + l] * b[4 * i + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Rows of `a` processed together so each slice of `b` is reused from cache.
const ROW_BLOCK: usize = 4;
/// Column tile of `b` and `out`.
const COL_BLOCK: usize = 256;

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let mut i0 = 0;
    while i0 < m {
        let rows = (m - i0).min(ROW_BLOCK);
        let mut j0 = 0;
        while j0 < n {
            let j1 = (j0 + COL_BLOCK).min(n);
            for kk in 0..k {
                let brow = &b[kk * n + j0..kk * n + j1];
                for i in i0..i0 + rows {
                    let av = a[i * k + kk];
                    if av != 0.0 {
                        axpy(av, brow, &mut out[i * n + j0..i * n + j1]);
                    }
                }
            }
            j0 = j1;
        }
        i0 += rows;
    }
}

/// `out[m×k] += a[m×n] · b[k×n]ᵀ`
pub fn gemm_bt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for kk in 0..k {
        let brow = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            out[i * k + kk] += dot(&a[i * n..(i + 1) * n], brow);
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn gemm_at_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for kk in 0..k {
        let orow = &mut out[kk * n..(kk + 1) * n];
        for i in 0..m {
            let av = a[i * k + kk];
            if av != 0.0 {
                axpy(av, &b[i * n..(i + 1) * n], orow);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Option<Self> {
        let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
        let (f, wc, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
        if wc != c || stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return None;
        }
        Some(ConvGeom {
            n,
            c,
            h,
            w,
            f,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    /// Output coordinate hit by input coordinate `i` at kernel offset `k`.
    #[inline]
    fn target(&self, i: usize, k: usize, out: usize) -> Option<usize> {
        let t = i + self.pad;
        if t < k {
            return None;
        }
        let t = t - k;
        if t % self.stride != 0 {
            return None;
        }
        let o = t / self.stride;
        (o < out).then_some(o)
    }

    fn weight_to_ckkf(&self, w: &[f64]) -> Vec<f64> {
        let mut wt = vec![0.0; w.len()];
        let kk = self.kh * self.kw;
        for f in 0..self.f {
            for c in 0..self.c {
                for k in 0..kk {
                    wt[(c * kk + k) * self.f + f] = w[(f * self.c + c) * kk + k];
                }
            }
        }
        wt
    }
}

pub fn conv2d_forward(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
    let wt = g.weight_to_ckkf(w);
    let plane = g.oh * g.ow;
    let mut out_t = vec![0.0; g.n * plane * g.f];
    for px in out_t.chunks_mut(g.f) {
        px.copy_from_slice(b);
    }
    for n in 0..g.n {
        for c in 0..g.c {
            for ih in 0..g.h {
                for iw in 0..g.w {
                    let xv = x[((n * g.c + c) * g.h + ih) * g.w + iw];
                    if xv == 0.0 {
                        continue;
                    }
                    for ki in 0..g.kh {
                        let Some(oh) = g.target(ih, ki, g.oh) else { continue };
                        for kj in 0..g.kw {
                            let Some(ow) = g.target(iw, kj, g.ow) else { continue };
                            let wo = ((c * g.kh + ki) * g.kw + kj) * g.f;
                            let oo = ((n * g.oh + oh) * g.ow + ow) * g.f;
                            axpy(xv, &wt[wo..wo + g.f], &mut out_t[oo..oo + g.f]);
                        }
                    }
                }
            }
        }
    }
    nhwc_to_nchw(&out_t, g.n, plane, g.f)
}

/// Returns `(dx, dw, db)`; `dx` only when requested.
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    want_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let plane = g.oh * g.ow;
    let dy_t = nchw_to_nhwc(dy, g.n, plane, g.f);
    let mut db = vec![0.0; g.f];
    for px in dy_t.chunks(g.f) {
        axpy(1.0, px, &mut db);
    }
    let kk = g.kh * g.kw;
    let mut dwt = vec![0.0; g.c * kk * g.f];
    let wt = g.weight_to_ckkf(w);
    let mut dx = want_dx.then(|| vec![0.0; x.len()]);
    for n in 0..g.n {
        for c in 0..g.c {
            for ih in 0..g.h {
                for iw in 0..g.w {
                    let xi = ((n * g.c + c) * g.h + ih) * g.w + iw;
                    let xv = x[xi];
                    if xv == 0.0 && dx.is_none() {
                        continue;
                    }
                    let mut acc = 0.0;
                    for ki in 0..g.kh {
                        let Some(oh) = g.target(ih, ki, g.oh) else { continue };
                        for kj in 0..g.kw {
                            let Some(ow) = g.target(iw, kj, g.ow) else { continue };
                            let wo = ((c * g.kh + ki) * g.kw + kj) * g.f;
                            let oo = ((n * g.oh + oh) * g.ow + ow) * g.f;
                            let dyp = &dy_t[oo..oo + g.f];
                            if xv != 0.0 {
                                axpy(xv, dyp, &mut dwt[wo..wo + g.f]);
                            }
                            if dx.is_some() {
                                acc += dot(&wt[wo..wo + g.f], dyp);
                            }
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        dx[xi] = acc;
                    }
                }
            }
        }
    }
    let mut dw = vec![0.0; w.len()];
    for f in 0..g.f {
        for c in 0..g.c {
            for k in 0..kk {
                dw[(f * g.c + c) * kk + k] = dwt[(c * kk + k) * g.f + f];
            }
        }
    }
    (dx, dw, db)
}

fn nhwc_to_nchw(src: &[f64], n: usize, plane: usize, f: usize) -> Vec<f64> {
    let mut dst = vec![0.0; src.len()];
    for b in 0..n {
        for p in 0..plane {
            for ch in 0..f {
                dst[(b * f + ch) * plane + p] = src[(b * plane + p) * f + ch];
            }
        }
    }
    dst
}

fn nchw_to_nhwc(src: &[f64], n: usize, plane: usize, f: usize) -> Vec<f64> {
    let mut dst = vec![0.0; src.len()];
    for b in 0..n {
        for ch in 0..f {
            for p in 0..plane {
                dst[(b * plane + p) * f + ch] = src[(b * f + ch) * plane + p];
            }
        }
    }
    dst
}

/// Max-pool over `(N, C, H, W)` without padding. Returns the output and,
/// per output element, the flat input index of the first maximum.
pub fn maxpool_forward(
    x: &[f64],
    shape: [usize; 4],
    k: usize,
    stride: usize,
) -> (Vec<f64>, Vec<usize>, [usize; 4]) {
    let [n, c, h, w] = shape;
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for nc in 0..n * c {
        let base = nc * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = base + i * stride * w + j * stride;
                for di in 0..k {
                    let row = base + (i * stride + di) * w + j * stride;
                    for dj in 0..k {
                        let v = x[row + dj];
                        if v > best {
                            best = v;
                            best_idx = row + dj;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg, [n, c, oh, ow])
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise log-softmax of a `rows × k` matrix.
pub fn log_softmax_rows(x: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(k).zip(out.chunks_mut(k)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let lse = m + s.ln();
        for (oi, v) in o.iter_mut().zip(row) {
            *oi = v - lse;
        }
    }
    out
}

pub fn softmax_rows(x: &[f64], k: usize) -> Vec<f64> {
    let mut out = log_softmax_rows(x, k);
    for v in &mut out {
        *v = v.exp();
    }
    out
}
