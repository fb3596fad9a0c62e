//! Dense computational kernels with explicit backward passes.
//!
//! Everything is written against contiguous standard-layout arrays and runs
//! single-threaded with a fixed reduction order, so outputs are bitwise
//! reproducible for fixed inputs.

use ndarray::{Array1, Array2, Array4, ArrayView2};

use crate::num::Real;

// ---------------------------------------------------------------------------
// Convolution (im2col + GEMM)
// ---------------------------------------------------------------------------

/// Output spatial size of a convolution.
pub fn conv_out_size(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

/// Lower the input into a (Cin*k*k, B*Ho*Wo) matrix.
pub fn im2col<F: Real>(
    x: &Array4<F>,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array2<F> {
    let (b, cin, h, w) = x.dim();
    let ho = conv_out_size(h, k, stride, pad);
    let wo = conv_out_size(w, k, stride, pad);
    let cols = b * ho * wo;
    let mut col = Array2::<F>::zeros((cin * k * k, cols));
    let xs = x.as_slice().expect("x contiguous");
    let cs = col.as_slice_mut().expect("col contiguous");
    for ci in 0..cin {
        for kh in 0..k {
            for kw in 0..k {
                let row = (ci * k + kh) * k + kw;
                let row_base = row * cols;
                for bi in 0..b {
                    let x_base = (bi * cin + ci) * h * w;
                    for oh in 0..ho {
                        let ih = (oh * stride + kh) as isize - pad as isize;
                        let out_base = row_base + (bi * ho + oh) * wo;
                        if ih < 0 || ih >= h as isize {
                            continue; // zero padding, already zeroed
                        }
                        let x_row = x_base + ih as usize * w;
                        if stride == 1 {
                            // iw = ow + kw - pad: contiguous run where valid
                            let shift = kw as isize - pad as isize;
                            let ow_lo = (-shift).max(0) as usize;
                            let ow_hi = ((w as isize - shift).min(wo as isize)).max(0) as usize;
                            if ow_lo < ow_hi {
                                let src_lo = (ow_lo as isize + shift) as usize;
                                cs[out_base + ow_lo..out_base + ow_hi].copy_from_slice(
                                    &xs[x_row + src_lo..x_row + src_lo + (ow_hi - ow_lo)],
                                );
                            }
                        } else {
                            for ow in 0..wo {
                                let iw = (ow * stride + kw) as isize - pad as isize;
                                if iw >= 0 && iw < w as isize {
                                    cs[out_base + ow] = xs[x_row + iw as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add the column matrix back onto the input gradient.
pub fn col2im<F: Real>(
    dcol: &Array2<F>,
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<F> {
    let ho = conv_out_size(h, k, stride, pad);
    let wo = conv_out_size(w, k, stride, pad);
    let cols = b * ho * wo;
    let mut dx = Array4::<F>::zeros((b, cin, h, w));
    let ds = dcol.as_slice().expect("dcol contiguous");
    let xs = dx.as_slice_mut().expect("dx contiguous");
    for ci in 0..cin {
        for kh in 0..k {
            for kw in 0..k {
                let row = (ci * k + kh) * k + kw;
                let row_base = row * cols;
                for bi in 0..b {
                    let x_base = (bi * cin + ci) * h * w;
                    for oh in 0..ho {
                        let ih = (oh * stride + kh) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let x_row = x_base + ih as usize * w;
                        let out_base = row_base + (bi * ho + oh) * wo;
                        for ow in 0..wo {
                            let iw = (ow * stride + kw) as isize - pad as isize;
                            if iw >= 0 && iw < w as isize {
                                let xi = x_row + iw as usize;
                                xs[xi] = xs[xi] + ds[out_base + ow];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// y = conv2d(x, w) + b, with w shaped (Cout, Cin, k, k).
pub fn conv2d_forward<F: Real>(
    x: &Array4<F>,
    w: &ArrayView2<F>, // (Cout, Cin*k*k)
    bias: &[F],
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<F> {
    let (b, _cin, h, wd) = x.dim();
    let cout = w.nrows();
    let ho = conv_out_size(h, k, stride, pad);
    let wo = conv_out_size(wd, k, stride, pad);
    let col = im2col(x, k, stride, pad);
    let y = w.dot(&col); // (Cout, B*Ho*Wo)
    let mut out = Array4::<F>::zeros((b, cout, ho, wo));
    let ys = y.as_slice().expect("y contiguous");
    let os = out.as_slice_mut().expect("out contiguous");
    let plane = ho * wo;
    for co in 0..cout {
        let y_row = co * b * plane;
        for bi in 0..b {
            let dst = (bi * cout + co) * plane;
            let src = y_row + bi * plane;
            os[dst..dst + plane].copy_from_slice(&ys[src..src + plane]);
            let bv = bias[co];
            for v in &mut os[dst..dst + plane] {
                *v = *v + bv;
            }
        }
    }
    out
}

/// Gradients of conv2d. Returns (dx, dw, db) with dw shaped (Cout, Cin*k*k).
pub fn conv2d_backward<F: Real>(
    x: &Array4<F>,
    w: &ArrayView2<F>,
    dy: &Array4<F>,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Array4<F>, Array2<F>, Array1<F>) {
    let (b, cin, h, wd) = x.dim();
    let (_, cout, ho, wo) = dy.dim();
    let plane = ho * wo;
    // (Cout, B*Ho*Wo) layout of dy
    let mut dy_mat = Array2::<F>::zeros((cout, b * plane));
    {
        let ds = dy.as_slice().expect("dy contiguous");
        let ms = dy_mat.as_slice_mut().expect("dy_mat contiguous");
        for co in 0..cout {
            let m_row = co * b * plane;
            for bi in 0..b {
                let src = (bi * cout + co) * plane;
                let dst = m_row + bi * plane;
                ms[dst..dst + plane].copy_from_slice(&ds[src..src + plane]);
            }
        }
    }
    let col = im2col(x, k, stride, pad);
    let dw = dy_mat.dot(&col.t()); // (Cout, Cin*k*k)
    let mut db = Array1::<F>::zeros(cout);
    for co in 0..cout {
        let mut acc = 0.0f64;
        for v in dy_mat.row(co).iter() {
            acc += v.to_f64();
        }
        db[co] = F::from_f64(acc);
    }
    let dcol = w.t().dot(&dy_mat); // (Cin*k*k, B*Ho*Wo)
    let dx = col2im(&dcol, b, cin, h, wd, k, stride, pad);
    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// y = x · Wᵀ + b with x (N, Din), W (Dout, Din).
pub fn linear_forward<F: Real>(x: &Array2<F>, w: &ArrayView2<F>, bias: &[F]) -> Array2<F> {
    let mut y = x.dot(&w.t());
    for mut row in y.rows_mut() {
        for (v, &bv) in row.iter_mut().zip(bias.iter()) {
            *v = *v + bv;
        }
    }
    y
}

/// Returns (dx, dw, db).
pub fn linear_backward<F: Real>(
    x: &Array2<F>,
    w: &ArrayView2<F>,
    dy: &Array2<F>,
) -> (Array2<F>, Array2<F>, Array1<F>) {
    let dx = dy.dot(w);
    let dw = dy.t().dot(x);
    let dout = dy.ncols();
    let mut db = Array1::<F>::zeros(dout);
    for j in 0..dout {
        let mut acc = 0.0f64;
        for v in dy.column(j).iter() {
            acc += v.to_f64();
        }
        db[j] = F::from_f64(acc);
    }
    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// Group normalization (no affine; modulation is applied separately)
// ---------------------------------------------------------------------------

pub const GN_EPS: f64 = 1e-5;

pub struct GroupNormCache<F: Real> {
    pub xhat: Array4<F>,
    pub inv_std: Array2<F>, // (B, groups)
}

/// Normalize each of `groups` channel groups to zero mean / unit variance.
pub fn group_norm_forward<F: Real>(x: &Array4<F>, groups: usize) -> GroupNormCache<F> {
    let (b, c, h, w) = x.dim();
    assert!(c % groups == 0, "channels {c} not divisible by groups {groups}");
    let gs = c / groups;
    let n = gs * h * w;
    let mut xhat = x.clone();
    let mut inv_std = Array2::<F>::zeros((b, groups));
    let xs = xhat.as_slice_mut().expect("contiguous");
    for bi in 0..b {
        for g in 0..groups {
            let base = (bi * c + g * gs) * h * w;
            let seg = &mut xs[base..base + n];
            let mut sum = 0.0f64;
            for v in seg.iter() {
                sum += v.to_f64();
            }
            let mean = sum / n as f64;
            let mut var = 0.0f64;
            for v in seg.iter() {
                let d = v.to_f64() - mean;
                var += d * d;
            }
            var /= n as f64;
            let istd = 1.0 / (var + GN_EPS).sqrt();
            let mean_f = F::from_f64(mean);
            let istd_f = F::from_f64(istd);
            for v in seg.iter_mut() {
                *v = (*v - mean_f) * istd_f;
            }
            inv_std[[bi, g]] = istd_f;
        }
    }
    GroupNormCache { xhat, inv_std }
}

/// dx given d(xhat).
pub fn group_norm_backward<F: Real>(
    cache: &GroupNormCache<F>,
    dxhat: &Array4<F>,
    groups: usize,
) -> Array4<F> {
    let (b, c, h, w) = cache.xhat.dim();
    let gs = c / groups;
    let n = gs * h * w;
    let mut dx = dxhat.clone();
    let xh = cache.xhat.as_slice().expect("contiguous");
    let ds = dx.as_slice_mut().expect("contiguous");
    for bi in 0..b {
        for g in 0..groups {
            let base = (bi * c + g * gs) * h * w;
            let mut m1 = 0.0f64;
            let mut m2 = 0.0f64;
            for i in base..base + n {
                m1 += ds[i].to_f64();
                m2 += ds[i].to_f64() * xh[i].to_f64();
            }
            m1 /= n as f64;
            m2 /= n as f64;
            let m1 = F::from_f64(m1);
            let m2 = F::from_f64(m2);
            let istd = cache.inv_std[[bi, g]];
            for i in base..base + n {
                ds[i] = istd * (ds[i] - m1 - xh[i] * m2);
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

#[inline]
fn sigmoid<F: Real>(x: F) -> F {
    let one = F::from_f64(1.0);
    one / (one + (F::from_f64(0.0) - x).exp())
}

pub fn silu_forward<F: Real>(x: &Array4<F>) -> Array4<F> {
    x.mapv(|v| v * sigmoid(v))
}

pub fn silu_backward<F: Real>(x: &Array4<F>, dy: &Array4<F>) -> Array4<F> {
    let one = F::from_f64(1.0);
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |d, &v| {
        let s = sigmoid(v);
        *d = *d * (s * (one + v * (one - s)));
    });
    dx
}

pub fn silu2_forward<F: Real>(x: &Array2<F>) -> Array2<F> {
    x.mapv(|v| v * sigmoid(v))
}

pub fn silu2_backward<F: Real>(x: &Array2<F>, dy: &Array2<F>) -> Array2<F> {
    let one = F::from_f64(1.0);
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |d, &v| {
        let s = sigmoid(v);
        *d = *d * (s * (one + v * (one - s)));
    });
    dx
}

// ---------------------------------------------------------------------------
// Attention core
// ---------------------------------------------------------------------------

pub struct AttentionCache<F: Real> {
    pub q: Array4<F>, // (B, heads, T, dh)
    pub k: Array4<F>,
    pub v: Array4<F>,
    pub p: Array4<F>, // (B, heads, T, T) softmax probabilities
}

/// Softmax over the last axis of a (T, T) matrix, row by row, in the
/// element's native precision.
fn softmax_rows<F: Real>(s: &mut Array2<F>) {
    let (rows, cols) = s.dim();
    let zero = F::from_f64(0.0);
    let one = F::from_f64(1.0);
    let data = s.as_slice_mut().expect("softmax input contiguous");
    for r in 0..rows {
        let row = &mut data[r * cols..(r + 1) * cols];
        let mut max = row[0];
        for v in row.iter() {
            max = max.max_val(*v);
        }
        let mut sum = zero;
        for v in row.iter_mut() {
            let e = (*v - max).exp();
            sum = sum + e;
            *v = e;
        }
        let inv = one / sum;
        for v in row.iter_mut() {
            *v = *v * inv;
        }
    }
}

/// Scaled dot-product self-attention. Inputs are (B, heads, T, dh).
pub fn attention_forward<F: Real>(
    q: Array4<F>,
    k: Array4<F>,
    v: Array4<F>,
) -> (Array4<F>, AttentionCache<F>) {
    let (b, heads, t, dh) = q.dim();
    let scale = F::from_f64(1.0 / (dh as f64).sqrt());
    let mut out = Array4::<F>::zeros((b, heads, t, dh));
    let mut p_all = Array4::<F>::zeros((b, heads, t, t));
    for bi in 0..b {
        for h in 0..heads {
            let qm = q.slice(ndarray::s![bi, h, .., ..]);
            let km = k.slice(ndarray::s![bi, h, .., ..]);
            let vm = v.slice(ndarray::s![bi, h, .., ..]);
            let mut s = qm.dot(&km.t());
            s.mapv_inplace(|x| x * scale);
            softmax_rows(&mut s);
            let o = s.dot(&vm);
            out.slice_mut(ndarray::s![bi, h, .., ..]).assign(&o);
            p_all.slice_mut(ndarray::s![bi, h, .., ..]).assign(&s);
        }
    }
    let cache = AttentionCache { q, k, v, p: p_all };
    (out, cache)
}

/// Returns (dq, dk, dv).
pub fn attention_backward<F: Real>(
    cache: &AttentionCache<F>,
    dout: &Array4<F>,
) -> (Array4<F>, Array4<F>, Array4<F>) {
    let (b, heads, t, dh) = cache.q.dim();
    let scale = F::from_f64(1.0 / (dh as f64).sqrt());
    let mut dq = Array4::<F>::zeros((b, heads, t, dh));
    let mut dk = dq.clone();
    let mut dv = dq.clone();
    for bi in 0..b {
        for h in 0..heads {
            let p = cache.p.slice(ndarray::s![bi, h, .., ..]);
            let q = cache.q.slice(ndarray::s![bi, h, .., ..]);
            let k = cache.k.slice(ndarray::s![bi, h, .., ..]);
            let v = cache.v.slice(ndarray::s![bi, h, .., ..]);
            let dot = dout.slice(ndarray::s![bi, h, .., ..]);
            let dvm = p.t().dot(&dot);
            let dp = dot.dot(&v.t());
            // softmax backward: ds = p ∘ (dp - rowsum(dp ∘ p))
            let mut ds = dp.clone();
            for (mut ds_row, p_row) in ds.rows_mut().into_iter().zip(p.rows()) {
                let mut acc = 0.0f64;
                for (d, pv) in ds_row.iter().zip(p_row.iter()) {
                    acc += d.to_f64() * pv.to_f64();
                }
                let acc = F::from_f64(acc);
                for (d, pv) in ds_row.iter_mut().zip(p_row.iter()) {
                    *d = (*d - acc) * *pv;
                }
            }
            let dqm = ds.dot(&k).mapv(|x| x * scale);
            let dkm = ds.t().dot(&q).mapv(|x| x * scale);
            dq.slice_mut(ndarray::s![bi, h, .., ..]).assign(&dqm);
            dk.slice_mut(ndarray::s![bi, h, .., ..]).assign(&dkm);
            dv.slice_mut(ndarray::s![bi, h, .., ..]).assign(&dvm);
        }
    }
    (dq, dk, dv)
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

pub fn upsample_nearest2_forward<F: Real>(x: &Array4<F>) -> Array4<F> {
    let (b, c, h, w) = x.dim();
    let mut y = Array4::<F>::zeros((b, c, h * 2, w * 2));
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = x[[bi, ci, i, j]];
                    y[[bi, ci, 2 * i, 2 * j]] = v;
                    y[[bi, ci, 2 * i, 2 * j + 1]] = v;
                    y[[bi, ci, 2 * i + 1, 2 * j]] = v;
                    y[[bi, ci, 2 * i + 1, 2 * j + 1]] = v;
                }
            }
        }
    }
    y
}

pub fn upsample_nearest2_backward<F: Real>(dy: &Array4<F>) -> Array4<F> {
    let (b, c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array4::<F>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    dx[[bi, ci, i, j]] = dy[[bi, ci, 2 * i, 2 * j]]
                        + dy[[bi, ci, 2 * i, 2 * j + 1]]
                        + dy[[bi, ci, 2 * i + 1, 2 * j]]
                        + dy[[bi, ci, 2 * i + 1, 2 * j + 1]];
                }
            }
        }
    }
    dx
}

/// 2x2 mean pooling (forward only; used to build frame pyramids over leaf
/// inputs that carry no gradient).
pub fn avgpool2<F: Real>(x: &Array4<F>) -> Array4<F> {
    let (b, c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "avgpool2 needs even dims, got {h}x{w}");
    let quarter = F::from_f64(0.25);
    let mut y = Array4::<F>::zeros((b, c, h / 2, w / 2));
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h / 2 {
                for j in 0..w / 2 {
                    let s = x[[bi, ci, 2 * i, 2 * j]]
                        + x[[bi, ci, 2 * i, 2 * j + 1]]
                        + x[[bi, ci, 2 * i + 1, 2 * j]]
                        + x[[bi, ci, 2 * i + 1, 2 * j + 1]];
                    y[[bi, ci, i, j]] = s * quarter;
                }
            }
        }
    }
    y
}

/// Per-output interpolation stencil for bilinear resize (align-corners).
fn bilinear_stencil(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    // (lo, hi, frac): out = (1 - frac) * in[lo] + frac * in[hi]
    (0..out_len)
        .map(|o| {
            if in_len == 1 || out_len == 1 {
                return (0, 0, 0.0);
            }
            let pos = o as f64 * (in_len - 1) as f64 / (out_len - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

pub fn resize_bilinear_forward<F: Real>(x: &Array4<F>, ho: usize, wo: usize) -> Array4<F> {
    let (b, c, h, w) = x.dim();
    if (h, w) == (ho, wo) {
        return x.clone();
    }
    let sh = bilinear_stencil(ho, h);
    let sw = bilinear_stencil(wo, w);
    let mut y = Array4::<F>::zeros((b, c, ho, wo));
    for bi in 0..b {
        for ci in 0..c {
            for (i, &(ilo, ihi, fi)) in sh.iter().enumerate() {
                for (j, &(jlo, jhi, fj)) in sw.iter().enumerate() {
                    let v00 = x[[bi, ci, ilo, jlo]].to_f64();
                    let v01 = x[[bi, ci, ilo, jhi]].to_f64();
                    let v10 = x[[bi, ci, ihi, jlo]].to_f64();
                    let v11 = x[[bi, ci, ihi, jhi]].to_f64();
                    let top = v00 * (1.0 - fj) + v01 * fj;
                    let bot = v10 * (1.0 - fj) + v11 * fj;
                    y[[bi, ci, i, j]] = F::from_f64(top * (1.0 - fi) + bot * fi);
                }
            }
        }
    }
    y
}

pub fn resize_bilinear_backward<F: Real>(
    dy: &Array4<F>,
    h: usize,
    w: usize,
) -> Array4<F> {
    let (b, c, ho, wo) = dy.dim();
    if (h, w) == (ho, wo) {
        return dy.clone();
    }
    let sh = bilinear_stencil(ho, h);
    let sw = bilinear_stencil(wo, w);
    let mut dx = Array4::<F>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for (i, &(ilo, ihi, fi)) in sh.iter().enumerate() {
                for (j, &(jlo, jhi, fj)) in sw.iter().enumerate() {
                    let g = dy[[bi, ci, i, j]].to_f64();
                    dx[[bi, ci, ilo, jlo]] =
                        dx[[bi, ci, ilo, jlo]] + F::from_f64(g * (1.0 - fi) * (1.0 - fj));
                    dx[[bi, ci, ilo, jhi]] =
                        dx[[bi, ci, ilo, jhi]] + F::from_f64(g * (1.0 - fi) * fj);
                    dx[[bi, ci, ihi, jlo]] =
                        dx[[bi, ci, ihi, jlo]] + F::from_f64(g * fi * (1.0 - fj));
                    dx[[bi, ci, ihi, jhi]] = dx[[bi, ci, ihi, jhi]] + F::from_f64(g * fi * fj);
                }
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Channel concat/split
// ---------------------------------------------------------------------------

pub fn concat_channels<F: Real>(a: &Array4<F>, b: &Array4<F>) -> Array4<F> {
    let (n, ca, h, w) = a.dim();
    let (_, cb, _, _) = b.dim();
    let mut out = Array4::<F>::zeros((n, ca + cb, h, w));
    out.slice_mut(ndarray::s![.., ..ca, .., ..]).assign(a);
    out.slice_mut(ndarray::s![.., ca.., .., ..]).assign(b);
    out
}

pub fn split_channels<F: Real>(x: &Array4<F>, ca: usize) -> (Array4<F>, Array4<F>) {
    let a = x.slice(ndarray::s![.., ..ca, .., ..]).to_owned();
    let b = x.slice(ndarray::s![.., ca.., .., ..]).to_owned();
    (a, b)
}

// ---------------------------------------------------------------------------
// Timestep embedding
// ---------------------------------------------------------------------------

/// Fixed sinusoidal embedding of integer timesteps, (B, dim).
pub fn timestep_embedding<F: Real>(t: &[usize], dim: usize) -> Array2<F> {
    let half = dim / 2;
    let mut out = Array2::<F>::zeros((t.len(), dim));
    for (bi, &tv) in t.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            let arg = tv as f64 * freq;
            out[[bi, i]] = F::from_f64(arg.sin());
            out[[bi, half + i]] = F::from_f64(arg.cos());
        }
    }
    out
}

// ---------------------------------------------------------------------------
// (B,C,H,W) <-> (B*H*W, C) reordering for per-pixel modulation maps
// ---------------------------------------------------------------------------

pub fn rows_to_maps<F: Real>(rows: &Array2<F>, b: usize, h: usize, w: usize) -> Array4<F> {
    let c = rows.ncols();
    let mut out = Array4::<F>::zeros((b, c, h, w));
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let r = (bi * h + i) * w + j;
                for ci in 0..c {
                    out[[bi, ci, i, j]] = rows[[r, ci]];
                }
            }
        }
    }
    out
}

pub fn maps_to_rows<F: Real>(maps: &Array4<F>) -> Array2<F> {
    let (b, c, h, w) = maps.dim();
    let mut out = Array2::<F>::zeros((b * h * w, c));
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let r = (bi * h + i) * w + j;
                for ci in 0..c {
                    out[[r, ci]] = maps[[bi, ci, i, j]];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use ndarray::{Array2, Array4};

    fn rand4(rng: &mut Rng, dims: (usize, usize, usize, usize)) -> Array4<f64> {
        let mut a = Array4::<f64>::zeros(dims);
        rng.fill_normal(&mut a);
        a
    }

    /// Direct (quadruple-loop) convolution as the oracle for the im2col path.
    fn conv_naive(
        x: &Array4<f64>,
        w: &Array4<f64>,
        b: &[f64],
        stride: usize,
        pad: usize,
    ) -> Array4<f64> {
        let (bn, cin, h, wd) = x.dim();
        let (cout, _, k, _) = w.dim();
        let ho = conv_out_size(h, k, stride, pad);
        let wo = conv_out_size(wd, k, stride, pad);
        let mut y = Array4::<f64>::zeros((bn, cout, ho, wo));
        for bi in 0..bn {
            for co in 0..cout {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for kh in 0..k {
                                for kw in 0..k {
                                    let ih = (oh * stride + kh) as isize - pad as isize;
                                    let iw = (ow * stride + kw) as isize - pad as isize;
                                    if ih >= 0
                                        && iw >= 0
                                        && (ih as usize) < h
                                        && (iw as usize) < wd
                                    {
                                        acc += x[[bi, ci, ih as usize, iw as usize]]
                                            * w[[co, ci, kh, kw]];
                                    }
                                }
                            }
                        }
                        y[[bi, co, oh, ow]] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let mut rng = Rng::seed_from(2);
        for &(k, stride, pad) in &[(3usize, 1usize, 1usize), (3, 2, 1), (1, 1, 0)] {
            let x = rand4(&mut rng, (2, 3, 6, 6));
            let w = rand4(&mut rng, (4, 3, k, k));
            let b: Vec<f64> = (0..4).map(|_| rng.normal_f64()).collect();
            let wm = w.view().into_shape_with_order((4, 3 * k * k)).unwrap();
            let got = conv2d_forward(&x, &wm, &b, k, stride, pad);
            let want = conv_naive(&x, &w, &b, stride, pad);
            let diff = (&got - &want).mapv(f64::abs).iter().cloned().fold(0.0, f64::max);
            assert!(diff < 1e-12, "k={k} s={stride}: max diff {diff}");
        }
    }

    /// Finite differences over every input/weight element of a small conv.
    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = Rng::seed_from(3);
        let x = rand4(&mut rng, (1, 2, 4, 4));
        let w = rand4(&mut rng, (3, 2, 3, 3));
        let b: Vec<f64> = (0..3).map(|_| rng.normal_f64()).collect();
        let wm = w.view().into_shape_with_order((3, 18)).unwrap();
        let y = conv2d_forward(&x, &wm, &b, 3, 1, 1);
        // Loss = sum(y * g) for fixed random g, so dL/dy = g.
        let g = rand4(&mut rng, y.dim());
        let (dx, dw, db) = conv2d_backward(&x, &wm, &g, 3, 1, 1);
        let loss = |x: &Array4<f64>, w: &Array4<f64>, b: &[f64]| -> f64 {
            let wm = w.view().into_shape_with_order((3, 18)).unwrap();
            let y = conv2d_forward(x, &wm, b, 3, 1, 1);
            (&y * &g).sum()
        };
        let h = 1e-6;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            let fd = (loss(&xp, &w, &b) - loss(&xm, &w, &b)) / (2.0 * h);
            let an = dx.as_slice().unwrap()[idx];
            assert!((fd - an).abs() < 1e-6, "dx[{idx}]: {fd} vs {an}");
        }
        for idx in 0..w.len() {
            let mut wp = w.clone();
            let mut wm2 = w.clone();
            wp.as_slice_mut().unwrap()[idx] += h;
            wm2.as_slice_mut().unwrap()[idx] -= h;
            let fd = (loss(&x, &wp, &b) - loss(&x, &wm2, &b)) / (2.0 * h);
            let an = dw.as_slice().unwrap()[idx];
            assert!((fd - an).abs() < 1e-6, "dw[{idx}]: {fd} vs {an}");
        }
        for idx in 0..3 {
            let mut bp = b.clone();
            let mut bm = b.clone();
            bp[idx] += h;
            bm[idx] -= h;
            let fd = (loss(&x, &w, &bp) - loss(&x, &w, &bm)) / (2.0 * h);
            assert!((fd - db[idx]).abs() < 1e-6, "db[{idx}]");
        }
    }

    #[test]
    fn group_norm_statistics_and_backward() {
        let mut rng = Rng::seed_from(5);
        let x = rand4(&mut rng, (2, 8, 5, 5));
        let groups = 4;
        let cache = group_norm_forward(&x, groups);
        // Per-group mean ~0, variance ~1 (up to the eps shrinkage).
        let (b, c, h, w) = x.dim();
        let gs = c / groups;
        for bi in 0..b {
            for g in 0..groups {
                let mut sum = 0.0;
                let mut sum2 = 0.0;
                for ci in g * gs..(g + 1) * gs {
                    for i in 0..h {
                        for j in 0..w {
                            let v = cache.xhat[[bi, ci, i, j]];
                            sum += v;
                            sum2 += v * v;
                        }
                    }
                }
                let n = (gs * h * w) as f64;
                let mean = sum / n;
                let var = sum2 / n - mean * mean;
                assert!(mean.abs() < 1e-10, "group mean {mean}");
                assert!((var - 1.0).abs() < 1e-3, "group var {var}");
            }
        }
        // Finite-difference check through a random linear functional.
        let gref = rand4(&mut rng, x.dim());
        let dx = group_norm_backward(&cache, &gref, groups);
        let loss = |x: &Array4<f64>| -> f64 {
            let c = group_norm_forward(x, groups);
            (&c.xhat * &gref).sum()
        };
        let h_step = 1e-6;
        for idx in (0..x.len()).step_by(37) {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h_step;
            xm.as_slice_mut().unwrap()[idx] -= h_step;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h_step);
            let an = dx.as_slice().unwrap()[idx];
            assert!((fd - an).abs() < 1e-5, "gn dx[{idx}]: {fd} vs {an}");
        }
    }

    #[test]
    fn silu_backward_matches_fd() {
        let mut rng = Rng::seed_from(7);
        let x = rand4(&mut rng, (1, 2, 3, 3));
        let g = rand4(&mut rng, (1, 2, 3, 3));
        let dx = silu_backward(&x, &g);
        let h = 1e-6;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            let fd = ((&silu_forward(&xp) * &g).sum() - (&silu_forward(&xm) * &g).sum())
                / (2.0 * h);
            let an = dx.as_slice().unwrap()[idx];
            assert!((fd - an).abs() < 1e-7, "silu dx[{idx}]");
        }
    }

    #[test]
    fn linear_backward_matches_fd() {
        let mut rng = Rng::seed_from(9);
        let mut x = Array2::<f64>::zeros((3, 4));
        let mut w = Array2::<f64>::zeros((2, 4));
        rng.fill_normal(&mut x);
        rng.fill_normal(&mut w);
        let b: Vec<f64> = (0..2).map(|_| rng.normal_f64()).collect();
        let mut g = Array2::<f64>::zeros((3, 2));
        rng.fill_normal(&mut g);
        let (dx, dw, db) = linear_backward(&x, &w.view(), &g);
        let loss = |x: &Array2<f64>, w: &Array2<f64>, b: &[f64]| {
            (&linear_forward(x, &w.view(), b) * &g).sum()
        };
        let h = 1e-6;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            let fd = (loss(&xp, &w, &b) - loss(&xm, &w, &b)) / (2.0 * h);
            assert!((fd - dx.as_slice().unwrap()[idx]).abs() < 1e-7);
        }
        for idx in 0..w.len() {
            let mut wp = w.clone();
            let mut wm = w.clone();
            wp.as_slice_mut().unwrap()[idx] += h;
            wm.as_slice_mut().unwrap()[idx] -= h;
            let fd = (loss(&x, &wp, &b) - loss(&x, &wm, &b)) / (2.0 * h);
            assert!((fd - dw.as_slice().unwrap()[idx]).abs() < 1e-7);
        }
        for idx in 0..2 {
            let mut bp = b.clone();
            let mut bm = b.clone();
            bp[idx] += h;
            bm[idx] -= h;
            let fd = (loss(&x, &w, &bp) - loss(&x, &w, &bm)) / (2.0 * h);
            assert!((fd - db[idx]).abs() < 1e-7);
        }
    }

    #[test]
    fn attention_backward_matches_fd() {
        let mut rng = Rng::seed_from(11);
        let q = rand4(&mut rng, (1, 2, 4, 3));
        let k = rand4(&mut rng, (1, 2, 4, 3));
        let v = rand4(&mut rng, (1, 2, 4, 3));
        let g = rand4(&mut rng, (1, 2, 4, 3));
        let (_, cache) = attention_forward(q.clone(), k.clone(), v.clone());
        let (dq, dk, dv) = attention_backward(&cache, &g);
        let loss = |q: &Array4<f64>, k: &Array4<f64>, v: &Array4<f64>| {
            let (o, _) = attention_forward(q.clone(), k.clone(), v.clone());
            (&o * &g).sum()
        };
        let h = 1e-6;
        for (arr, grad, name) in [(&q, &dq, "q"), (&k, &dk, "k"), (&v, &dv, "v")] {
            for idx in 0..arr.len() {
                let mut ap = arr.clone();
                let mut am = arr.clone();
                ap.as_slice_mut().unwrap()[idx] += h;
                am.as_slice_mut().unwrap()[idx] -= h;
                let (lp, lm) = match name {
                    "q" => (loss(&ap, &k, &v), loss(&am, &k, &v)),
                    "k" => (loss(&q, &ap, &v), loss(&q, &am, &v)),
                    _ => (loss(&q, &k, &ap), loss(&q, &k, &am)),
                };
                let fd = (lp - lm) / (2.0 * h);
                let an = grad.as_slice().unwrap()[idx];
                assert!((fd - an).abs() < 1e-6, "d{name}[{idx}]: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn upsample_and_resize_adjoint() {
        // backward is the adjoint of forward: <Ax, y> == <x, Aᵀy>.
        let mut rng = Rng::seed_from(13);
        let x = rand4(&mut rng, (1, 2, 3, 3));
        let y = rand4(&mut rng, (1, 2, 6, 6));
        let ax = upsample_nearest2_forward(&x);
        let aty = upsample_nearest2_backward(&y);
        let lhs = (&ax * &y).sum();
        let rhs = (&x * &aty).sum();
        assert!((lhs - rhs).abs() < 1e-10);

        let x = rand4(&mut rng, (1, 2, 4, 4));
        let y = rand4(&mut rng, (1, 2, 7, 5));
        let ax = resize_bilinear_forward(&x, 7, 5);
        let aty = resize_bilinear_backward(&y, 4, 4);
        let lhs = (&ax * &y).sum();
        let rhs = (&x * &aty).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn rows_maps_roundtrip() {
        let mut rng = Rng::seed_from(15);
        let maps = rand4(&mut rng, (2, 3, 4, 5));
        let rows = maps_to_rows(&maps);
        let back = rows_to_maps(&rows, 2, 4, 5);
        assert_eq!(maps, back);
    }

    #[test]
    fn avgpool_reduces_dims() {
        let x = Array4::<f64>::from_elem((1, 1, 4, 4), 2.0);
        let y = avgpool2(&x);
        assert_eq!(y.dim(), (1, 1, 2, 2));
        assert_eq!(y[[0, 0, 0, 0]], 2.0);
    }
}
