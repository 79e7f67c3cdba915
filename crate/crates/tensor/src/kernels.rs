//! Numeric kernels behind the tape ops. Everything here is plain
//! tensor-in/tensor-out; gradients are assembled in `tape.rs`.

use crate::tensor::split_shape;
use crate::{Real, Tensor};

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let nd = a.len().max(b.len());
    (0..nd)
        .map(|i| {
            let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
            let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
            match (da, db) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => panic!("shapes {a:?} and {b:?} do not broadcast"),
            }
        })
        .collect()
}

/// Strides of `shape` viewed inside the broadcast shape `out` (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let off = nd - shape.len();
    let mut strides = vec![0; nd];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + off] = if shape[i] == 1 && out[i + off] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

/// Calls `f(out_index, a_offset, b_offset)` for each element of the broadcast shape.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let nd = out.len();
    if nd == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[nd - 1];
    let (ia, ib) = (sa[nd - 1], sb[nd - 1]);
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    let mut idx = vec![0usize; nd - 1];
    let (mut ba, mut bb) = (0usize, 0usize);
    let mut o = 0;
    loop {
        for j in 0..inner {
            f(o + j, ba + j * ia, bb + j * ib);
        }
        o += inner;
        if o >= total {
            break;
        }
        // odometer over the leading axes
        let mut d = nd - 1;
        loop {
            d -= 1;
            idx[d] += 1;
            ba += sa[d];
            bb += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ba -= sa[d] * idx[d];
            bb -= sb[d] * idx[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn broadcast_binary<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Tensor<T> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    let out = broadcast_shape(a.shape(), b.shape());
    if out == a.shape() && b.numel() == 1 {
        let y = b.data()[0];
        return Tensor::new(out, a.data().iter().map(|&x| f(x, y)).collect());
    }
    if out == b.shape() && a.numel() == 1 {
        let x = a.data()[0];
        return Tensor::new(out, b.data().iter().map(|&y| f(x, y)).collect());
    }
    if out == a.shape() && is_suffix(b.shape(), &out) {
        let n = b.numel();
        let mut data = Vec::with_capacity(a.numel());
        for chunk in a.data().chunks(n) {
            data.extend(chunk.iter().zip(b.data()).map(|(&x, &y)| f(x, y)));
        }
        return Tensor::new(out, data);
    }
    if out == b.shape() && is_suffix(a.shape(), &out) {
        let n = a.numel();
        let mut data = Vec::with_capacity(b.numel());
        for chunk in b.data().chunks(n) {
            data.extend(a.data().iter().zip(chunk).map(|(&x, &y)| f(x, y)));
        }
        return Tensor::new(out, data);
    }
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let total = out.iter().product();
    let mut data = vec![T::zero(); total];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&out, &sa, &sb, |o, i, j| data[o] = f(ad[i], bd[j]));
    Tensor::new(out, data)
}

/// Sums `g` (of a broadcast shape) down to `shape`.
pub(crate) fn reduce_to_shape<T: Real>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let n: usize = shape.iter().product();
    if n == 1 {
        return Tensor::new(shape.to_vec(), vec![g.sum()]);
    }
    if is_suffix(shape, g.shape()) {
        let mut out = vec![T::zero(); n];
        for chunk in g.data().chunks(n) {
            for (o, &v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        return Tensor::new(shape.to_vec(), out);
    }
    let sa = broadcast_strides(shape, g.shape());
    let zeros = vec![0; g.ndim()];
    let mut out = vec![T::zero(); n];
    let gd = g.data();
    for_each_broadcast(g.shape(), &sa, &zeros, |o, i, _| out[i] += gd[o]);
    Tensor::new(shape.to_vec(), out)
}

pub(crate) fn sum_axis<T: Real>(x: &Tensor<T>, axis: usize) -> Vec<T> {
    let (outer, n, inner) = x.split_at_axis(axis);
    let mut out = vec![T::zero(); outer * inner];
    let d = x.data();
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        for k in 0..n {
            let src = &d[(o * n + k) * inner..(o * n + k + 1) * inner];
            for (a, &b) in dst.iter_mut().zip(src) {
                *a += b;
            }
        }
    }
    out
}

/// Inverse of [`sum_axis`]: repeats `g` (shape without `axis`) along `axis`.
pub(crate) fn expand_axis<T: Real>(g: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, n, inner) = split_shape(shape, axis);
    let mut out = Vec::with_capacity(outer * n * inner);
    for o in 0..outer {
        let src = &g[o * inner..(o + 1) * inner];
        for _ in 0..n {
            out.extend_from_slice(src);
        }
    }
    out
}

pub(crate) fn permute<T: Real>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let nd = x.ndim();
    assert_eq!(perm.len(), nd, "permutation rank mismatch");
    let in_shape = x.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let mut in_strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let zeros = vec![0; nd];
    let mut data = vec![T::zero(); x.numel()];
    let d = x.data();
    for_each_broadcast(&out_shape, &src_strides, &zeros, |o, i, _| data[o] = d[i]);
    Tensor::new(out_shape, data)
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub(crate) fn concat<T: Real>(parts: &[&Tensor<T>], axis: usize) -> Tensor<T> {
    let first = parts[0].shape();
    let mut out_shape = first.to_vec();
    out_shape[axis] = 0;
    for p in parts {
        assert_eq!(p.ndim(), first.len(), "concat rank mismatch");
        for (i, (&a, &b)) in p.shape().iter().zip(first).enumerate() {
            assert!(i == axis || a == b, "concat shape mismatch {:?} vs {:?}", p.shape(), first);
        }
        out_shape[axis] += p.dim(axis);
    }
    let (outer, _, inner) = split_shape(&out_shape, axis);
    let mut data = Vec::with_capacity(out_shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let len = p.dim(axis) * inner;
            data.extend_from_slice(&p.data()[o * len..(o + 1) * len]);
        }
    }
    Tensor::new(out_shape, data)
}

pub(crate) fn narrow<T: Real>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Tensor<T> {
    let (outer, n, inner) = x.split_at_axis(axis);
    assert!(start + len <= n, "narrow out of range");
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * n + start) * inner;
        data.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    Tensor::new(shape, data)
}

/// Adjoint of [`narrow`]: scatters `g` into a zero tensor of `shape`.
pub(crate) fn unnarrow<T: Real>(g: &Tensor<T>, shape: &[usize], axis: usize, start: usize) -> Tensor<T> {
    let (outer, n, inner) = split_shape(shape, axis);
    let len = g.dim(axis);
    let mut data = vec![T::zero(); outer * n * inner];
    for o in 0..outer {
        let base = (o * n + start) * inner;
        data[base..base + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
    }
    Tensor::new(shape.to_vec(), data)
}

/// Gathers rows (axis 0) of `x`.
pub(crate) fn index_select<T: Real>(x: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    let rows = x.dim(0);
    let row = x.numel() / rows.max(1);
    let mut data = Vec::with_capacity(idx.len() * row);
    for &i in idx {
        assert!(i < rows, "index {i} out of range for {rows} rows");
        data.extend_from_slice(&x.data()[i * row..(i + 1) * row]);
    }
    let mut shape = x.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, data)
}

pub(crate) fn index_add<T: Real>(g: &Tensor<T>, idx: &[usize], shape: &[usize]) -> Tensor<T> {
    let row: usize = shape[1..].iter().product();
    let mut out = vec![T::zero(); shape[0] * row];
    for (k, &i) in idx.iter().enumerate() {
        let dst = &mut out[i * row..(i + 1) * row];
        for (a, &b) in dst.iter_mut().zip(&g.data()[k * row..(k + 1) * row]) {
            *a += b;
        }
    }
    Tensor::new(shape.to_vec(), out)
}

pub(crate) fn softmax_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let n = *x.shape().last().expect("softmax of a scalar");
    let mut data = x.data().to_vec();
    for row in data.chunks_mut(n) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor::new(x.shape().to_vec(), data)
}

pub(crate) fn softmax_rows_backward<T: Real>(y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let n = *y.shape().last().unwrap();
    let mut out = Vec::with_capacity(y.numel());
    for (yr, gr) in y.data().chunks(n).zip(g.data().chunks(n)) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        out.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
    }
    Tensor::new(y.shape().to_vec(), out)
}

/// Normalizes `len`-sized groups of a flat buffer. Returns (normalized, rstd per group).
pub(crate) fn normalize_groups<T: Real>(data: &[T], len: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let mut out = Vec::with_capacity(data.len());
    let mut rstds = Vec::with_capacity(data.len() / len.max(1));
    let inv_n = T::one() / T::of(len as f64);
    for chunk in data.chunks(len) {
        let mean = chunk.iter().copied().sum::<T>() * inv_n;
        let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
        let rstd = T::one() / (var + eps).sqrt();
        out.extend(chunk.iter().map(|&v| (v - mean) * rstd));
        rstds.push(rstd);
    }
    (out, rstds)
}

/// Backward of [`normalize_groups`] given the normalized output `xhat`.
pub(crate) fn normalize_groups_backward<T: Real>(xhat: &[T], rstd: &[T], g: &[T], len: usize) -> Vec<T> {
    let inv_n = T::one() / T::of(len as f64);
    let mut out = Vec::with_capacity(g.len());
    for ((xh, gr), &r) in xhat.chunks(len).zip(g.chunks(len)).zip(rstd) {
        let mg = gr.iter().copied().sum::<T>() * inv_n;
        let mgx = gr.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() * inv_n;
        out.extend(gr.iter().zip(xh).map(|(&gv, &xv)| r * (gv - mg - xv * mgx)));
    }
    out
}

/// Gathers NHWC channel-grouped data into contiguous per-(image, group) blocks.
pub(crate) fn group_gather<T: Real>(x: &[T], n: usize, hw: usize, c: usize, groups: usize) -> Vec<T> {
    let cg = c / groups;
    let mut out = Vec::with_capacity(x.len());
    for img in 0..n {
        for g in 0..groups {
            for p in 0..hw {
                let base = (img * hw + p) * c + g * cg;
                out.extend_from_slice(&x[base..base + cg]);
            }
        }
    }
    out
}

pub(crate) fn group_scatter<T: Real>(blocks: &[T], n: usize, hw: usize, c: usize, groups: usize) -> Vec<T> {
    let cg = c / groups;
    let mut out = vec![T::zero(); blocks.len()];
    let mut k = 0;
    for img in 0..n {
        for g in 0..groups {
            for p in 0..hw {
                let base = (img * hw + p) * c + g * cg;
                out[base..base + cg].copy_from_slice(&blocks[k..k + cg]);
                k += cg;
            }
        }
    }
    out
}

/// Geometry of a square-kernel NHWC convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x_shape: &[usize], k: usize, stride: usize, pad: usize) -> Self {
        assert_eq!(x_shape.len(), 4, "conv2d expects NHWC input");
        let (n, h, w, cin) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        assert!(h + 2 * pad >= k && w + 2 * pad >= k, "conv2d kernel larger than input");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Self { n, h, w, cin, k, stride, pad, ho, wo }
    }

    pub fn col_width(&self) -> usize {
        self.k * self.k * self.cin
    }

    pub fn rows(&self) -> usize {
        self.n * self.ho * self.wo
    }
}

pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let cw = g.col_width();
    let mut cols = vec![T::zero(); g.rows() * cw];
    let mut r = 0;
    for img in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = &mut cols[r * cw..(r + 1) * cw];
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = ((img * g.h + iy as usize) * g.w + ix as usize) * g.cin;
                        let dst = (ky * g.k + kx) * g.cin;
                        row[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                    }
                }
                r += 1;
            }
        }
    }
    cols
}

pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let cw = g.col_width();
    let mut x = vec![T::zero(); g.n * g.h * g.w * g.cin];
    let mut r = 0;
    for img in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = &cols[r * cw..(r + 1) * cw];
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = ((img * g.h + iy as usize) * g.w + ix as usize) * g.cin;
                        let src = (ky * g.k + kx) * g.cin;
                        for c in 0..g.cin {
                            x[dst + c] += row[src + c];
                        }
                    }
                }
                r += 1;
            }
        }
    }
    x
}

/// Bilinear (half-pixel centers, edge clamped) interpolation taps along one axis.
fn upsample_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// NHWC bilinear resize to `(ho, wo)`.
pub(crate) fn resize_bilinear<T: Real>(x: &Tensor<T>, ho: usize, wo: usize) -> Tensor<T> {
    let (n, h, w, c) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let ty = upsample_taps(h, ho);
    let tx = upsample_taps(w, wo);
    let d = x.data();
    let mut out = vec![T::zero(); n * ho * wo * c];
    for img in 0..n {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let taps = [
                    (y0, x0, (1.0 - fy) * (1.0 - fx)),
                    (y0, x1, (1.0 - fy) * fx),
                    (y1, x0, fy * (1.0 - fx)),
                    (y1, x1, fy * fx),
                ];
                let dst = ((img * ho + oy) * wo + ox) * c;
                for (yy, xx, wgt) in taps {
                    let wt = T::of(wgt);
                    let src = ((img * h + yy) * w + xx) * c;
                    for ch in 0..c {
                        out[dst + ch] += wt * d[src + ch];
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, ho, wo, c], out)
}

pub(crate) fn resize_bilinear_backward<T: Real>(g: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
    let (n, h, w, c) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (ho, wo) = (g.dim(1), g.dim(2));
    let ty = upsample_taps(h, ho);
    let tx = upsample_taps(w, wo);
    let gd = g.data();
    let mut out = vec![T::zero(); n * h * w * c];
    for img in 0..n {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let taps = [
                    (y0, x0, (1.0 - fy) * (1.0 - fx)),
                    (y0, x1, (1.0 - fy) * fx),
                    (y1, x0, fy * (1.0 - fx)),
                    (y1, x1, fy * fx),
                ];
                let src = ((img * ho + oy) * wo + ox) * c;
                for (yy, xx, wgt) in taps {
                    let wt = T::of(wgt);
                    let dst = ((img * h + yy) * w + xx) * c;
                    for ch in 0..c {
                        out[dst + ch] += wt * gd[src + ch];
                    }
                }
            }
        }
    }
    Tensor::new(in_shape.to_vec(), out)
}

/// Exclusive prefix sum along the last axis.
pub(crate) fn cumsum_exclusive<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let n = *x.shape().last().expect("cumsum of a scalar");
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(n) {
        let mut acc = T::zero();
        for &v in row {
            out.push(acc);
            acc += v;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Adjoint of [`cumsum_exclusive`]: reverse exclusive suffix sum.
pub(crate) fn cumsum_exclusive_backward<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let n = *g.shape().last().unwrap();
    let mut out = vec![T::zero(); g.numel()];
    for (dst, row) in out.chunks_mut(n).zip(g.data().chunks(n)) {
        let mut acc = T::zero();
        for i in (0..n).rev() {
            dst[i] = acc;
            acc += row[i];
        }
    }
    Tensor::new(g.shape().to_vec(), out)
}

/// LU factorization with partial pivoting in f64. Returns None when singular.
pub(crate) struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
}

impl Lu {
    pub fn factor(a: &[f64], n: usize) -> Option<Self> {
        let mut lu = a.to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let scale = lu.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        for col in 0..n {
            let (piv, pv) = (col..n)
                .map(|r| (r, lu[r * n + col].abs()))
                .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pv <= 1e-14 * scale {
                return None;
            }
            if piv != col {
                for j in 0..n {
                    lu.swap(piv * n + j, col * n + j);
                }
                perm.swap(piv, col);
            }
            let d = lu[col * n + col];
            for r in col + 1..n {
                let f = lu[r * n + col] / d;
                lu[r * n + col] = f;
                for j in col + 1..n {
                    lu[r * n + j] -= f * lu[col * n + j];
                }
            }
        }
        Some(Self { n, lu, perm })
    }

    pub fn log_abs_det(&self) -> f64 {
        (0..self.n).map(|i| self.lu[i * self.n + i].abs().ln()).sum()
    }

    pub fn inverse(&self) -> Vec<f64> {
        let n = self.n;
        let mut inv = vec![0.0; n * n];
        for c in 0..n {
            let mut x: Vec<f64> = (0..n).map(|r| if self.perm[r] == c { 1.0 } else { 0.0 }).collect();
            for r in 0..n {
                for k in 0..r {
                    x[r] -= self.lu[r * n + k] * x[k];
                }
            }
            for r in (0..n).rev() {
                for k in r + 1..n {
                    x[r] -= self.lu[r * n + k] * x[k];
                }
                x[r] /= self.lu[r * n + r];
            }
            for r in 0..n {
                inv[r * n + c] = x[r];
            }
        }
        inv
    }
}

pub(crate) fn transpose2<T: Copy>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(a.len());
    for c in 0..cols {
        for r in 0..rows {
            out.push(a[r * cols + c]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_general_path_matches_manual() {
        let a = Tensor::<f64>::from_fn(vec![2, 1, 3], |i| i as f64);
        let b = Tensor::<f64>::from_fn(vec![1, 4, 1], |i| 10.0 * i as f64);
        let c = broadcast_binary(&a, &b, |x, y| x + y);
        assert_eq!(c.shape(), &[2, 4, 3]);
        for i in 0..2 {
            for j in 0..4 {
                for k in 0..3 {
                    let v = c.data()[(i * 4 + j) * 3 + k];
                    assert_eq!(v, (i * 3 + k) as f64 + 10.0 * j as f64);
                }
            }
        }
        let r = reduce_to_shape(&c, &[1, 4, 1]);
        assert_eq!(r.data(), &[15.0 + 0.0, 15.0 + 60.0, 15.0 + 120.0, 15.0 + 180.0]);
    }

    #[test]
    fn permute_roundtrip() {
        let a = Tensor::<f64>::from_fn(vec![2, 3, 4], |i| i as f64);
        let p = permute(&a, &[2, 0, 1]);
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.data()[1 * 6 + 1 * 3 + 2], a.data()[1 * 12 + 2 * 4 + 1]);
        let back = permute(&p, &inverse_permutation(&[2, 0, 1]));
        assert_eq!(back, a);
    }

    #[test]
    fn lu_inverse_and_det() {
        let a = [4.0, 3.0, 6.0, 3.0];
        let lu = Lu::factor(&a, 2).unwrap();
        assert!((lu.log_abs_det() - 6.0f64.ln()).abs() < 1e-12);
        let inv = lu.inverse();
        let expect = [-0.5, 0.5, 1.0, -2.0 / 3.0];
        for (x, y) in inv.iter().zip(expect) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(Lu::factor(&[1.0, 2.0, 2.0, 4.0], 2).is_none());
    }

    #[test]
    fn resize_identity_when_same_size() {
        let a = Tensor::<f64>::from_fn(vec![1, 3, 3, 2], |i| i as f64);
        assert_eq!(resize_bilinear(&a, 3, 3), a);
    }
}
