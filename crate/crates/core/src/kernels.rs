//! Forward and backward kernels on flat row-major buffers.
//!
//! Tensors are `[N, C, T, H, W]` unless stated otherwise. Convolutions go
//! through im2col and a single GEMM per batch item; batch items are processed
//! in parallel and weight gradients are reduced in batch order so results do
//! not depend on the thread count.

use rayon::prelude::*;

use crate::tensor::Real;

/// Stride and zero padding of a 3D convolution, ordered (t, h, w).
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvGeometry {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeometry {
    pub fn unit() -> Self {
        ConvGeometry {
            stride: [1, 1, 1],
            padding: [0, 0, 0],
        }
    }

    pub fn strided(stride: [usize; 3]) -> Self {
        ConvGeometry {
            stride,
            padding: [0, 0, 0],
        }
    }

    pub fn with_padding(mut self, padding: [usize; 3]) -> Self {
        self.padding = padding;
        self
    }

    /// Output extent along each axis, or `None` if the kernel does not fit.
    pub fn output_extents(&self, input: [usize; 3], kernel: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.padding[a];
            if kernel[a] > padded || self.stride[a] == 0 {
                return None;
            }
            out[a] = (padded - kernel[a]) / self.stride[a] + 1;
        }
        Some(out)
    }
}

/// Precomputed extents for one convolution call.
#[derive(Clone, Copy, Debug)]
pub struct ConvShape {
    pub n: usize,
    pub c: usize,
    pub input: [usize; 3],
    pub k: usize,
    pub kernel: [usize; 3],
    pub output: [usize; 3],
    pub geom: ConvGeometry,
}

impl ConvShape {
    fn in_len(&self) -> usize {
        self.c * self.input.iter().product::<usize>()
    }

    fn patch_len(&self) -> usize {
        self.c * self.kernel.iter().product::<usize>()
    }

    fn out_positions(&self) -> usize {
        self.output.iter().product()
    }

    fn pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.geom == ConvGeometry::unit()
    }

    pub fn output_dims(&self) -> Vec<usize> {
        vec![self.n, self.k, self.output[0], self.output[1], self.output[2]]
    }
}

fn im2col<R: Real>(x: &[R], s: &ConvShape, col: &mut [R]) {
    let [ti, hi, wi] = s.input;
    let [kt, kh, kw] = s.kernel;
    let [to, ho, wo] = s.output;
    let [st, sh, sw] = s.geom.stride;
    let [pt, ph, pw] = s.geom.padding;
    let p = to * ho * wo;
    let mut row = 0;
    for c in 0..s.c {
        let xc = &x[c * ti * hi * wi..(c + 1) * ti * hi * wi];
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let dst = &mut col[row * p..(row + 1) * p];
                    for ot in 0..to {
                        let it = (ot * st + dt) as isize - pt as isize;
                        for oh in 0..ho {
                            let ih = (oh * sh + dh) as isize - ph as isize;
                            let line = &mut dst[(ot * ho + oh) * wo..(ot * ho + oh + 1) * wo];
                            if it < 0 || it >= ti as isize || ih < 0 || ih >= hi as isize {
                                line.fill(R::zero());
                                continue;
                            }
                            let src = &xc[(it as usize * hi + ih as usize) * wi..][..wi];
                            for (ow, v) in line.iter_mut().enumerate() {
                                let iw = (ow * sw + dw) as isize - pw as isize;
                                *v = if iw < 0 || iw >= wi as isize {
                                    R::zero()
                                } else {
                                    src[iw as usize]
                                };
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn col2im<R: Real>(col: &[R], s: &ConvShape, dx: &mut [R]) {
    let [ti, hi, wi] = s.input;
    let [kt, kh, kw] = s.kernel;
    let [to, ho, wo] = s.output;
    let [st, sh, sw] = s.geom.stride;
    let [pt, ph, pw] = s.geom.padding;
    let p = to * ho * wo;
    let mut row = 0;
    for c in 0..s.c {
        let xc = &mut dx[c * ti * hi * wi..(c + 1) * ti * hi * wi];
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let src = &col[row * p..(row + 1) * p];
                    for ot in 0..to {
                        let it = (ot * st + dt) as isize - pt as isize;
                        if it < 0 || it >= ti as isize {
                            continue;
                        }
                        for oh in 0..ho {
                            let ih = (oh * sh + dh) as isize - ph as isize;
                            if ih < 0 || ih >= hi as isize {
                                continue;
                            }
                            let line = &src[(ot * ho + oh) * wo..(ot * ho + oh + 1) * wo];
                            let base = (it as usize * hi + ih as usize) * wi;
                            for (ow, &v) in line.iter().enumerate() {
                                let iw = (ow * sw + dw) as isize - pw as isize;
                                if iw >= 0 && iw < wi as isize {
                                    xc[base + iw as usize] += v;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

pub fn conv3d_forward<R: Real>(x: &[R], w: &[R], bias: Option<&[R]>, s: &ConvShape) -> Vec<R> {
    let (ck, p, k) = (s.patch_len(), s.out_positions(), s.k);
    let mut out = vec![R::zero(); s.n * k * p];
    out.par_chunks_mut(k * p).enumerate().for_each(|(n, out_n)| {
        let xn = &x[n * s.in_len()..(n + 1) * s.in_len()];
        let owned;
        let col: &[R] = if s.pointwise() {
            xn
        } else {
            let mut buf = vec![R::zero(); ck * p];
            im2col(xn, s, &mut buf);
            owned = buf;
            &owned
        };
        R::gemm(k, ck, p, R::one(), w, (ck, 1), col, (p, 1), R::zero(), out_n, (p, 1));
        if let Some(b) = bias {
            for (row, &bk) in out_n.chunks_mut(p).zip(b) {
                row.iter_mut().for_each(|v| *v += bk);
            }
        }
    });
    out
}

/// Gradients `(dx, dw, dbias)` of a convolution given the output gradient.
pub fn conv3d_backward<R: Real>(
    x: &[R],
    w: &[R],
    dy: &[R],
    s: &ConvShape,
    need_dx: bool,
) -> (Option<Vec<R>>, Vec<R>, Vec<R>) {
    let (ck, p, k) = (s.patch_len(), s.out_positions(), s.k);
    let per_item: Vec<(Option<Vec<R>>, Vec<R>)> = (0..s.n)
        .into_par_iter()
        .map(|n| {
            let xn = &x[n * s.in_len()..(n + 1) * s.in_len()];
            let dyn_ = &dy[n * k * p..(n + 1) * k * p];
            let owned;
            let col: &[R] = if s.pointwise() {
                xn
            } else {
                let mut buf = vec![R::zero(); ck * p];
                im2col(xn, s, &mut buf);
                owned = buf;
                &owned
            };
            let mut dw = vec![R::zero(); k * ck];
            R::gemm(k, p, ck, R::one(), dyn_, (p, 1), col, (1, p), R::zero(), &mut dw, (ck, 1));
            let dx = need_dx.then(|| {
                let mut dcol = vec![R::zero(); ck * p];
                R::gemm(ck, k, p, R::one(), w, (1, ck), dyn_, (p, 1), R::zero(), &mut dcol, (p, 1));
                if s.pointwise() {
                    dcol
                } else {
                    let mut dxn = vec![R::zero(); s.in_len()];
                    col2im(&dcol, s, &mut dxn);
                    dxn
                }
            });
            (dx, dw)
        })
        .collect();

    let mut dw = vec![R::zero(); k * ck];
    let mut dx = need_dx.then(|| Vec::with_capacity(s.n * s.in_len()));
    for (dxn, dwn) in per_item {
        dw.iter_mut().zip(&dwn).for_each(|(a, &b)| *a += b);
        if let (Some(acc), Some(part)) = (dx.as_mut(), dxn) {
            acc.extend_from_slice(&part);
        }
    }
    let mut db = vec![R::zero(); k];
    for n in 0..s.n {
        for (kk, acc) in db.iter_mut().enumerate() {
            let row = &dy[(n * k + kk) * p..(n * k + kk + 1) * p];
            *acc += R::from_f64(row.iter().map(|v| v.as_f64()).sum());
        }
    }
    (dx, dw, db)
}

/// Extents of a temporal transpose convolution with kernel and stride (2,1,1).
#[derive(Clone, Copy, Debug)]
pub struct UpShape {
    pub n: usize,
    pub c: usize,
    pub k: usize,
    pub t: usize,
    pub spatial: usize,
}

/// `out[n,k,2t+j,s] = sum_c x[n,c,t,s] * w[c,k,j] + b[k]` with `w` laid out as
/// `[C, K, 2, 1, 1]`.
pub fn up_temporal_forward<R: Real>(x: &[R], w: &[R], bias: Option<&[R]>, s: &UpShape) -> Vec<R> {
    let UpShape { n, c, k, t, spatial } = *s;
    let ts = t * spatial;
    let mut out = vec![R::zero(); n * k * 2 * ts];
    let mut yj = vec![R::zero(); k * ts];
    for b in 0..n {
        let xn = &x[b * c * ts..(b + 1) * c * ts];
        let on = &mut out[b * k * 2 * ts..(b + 1) * k * 2 * ts];
        for j in 0..2 {
            R::gemm(k, c, ts, R::one(), &w[j..], (2, 2 * k), xn, (ts, 1), R::zero(), &mut yj, (ts, 1));
            for kk in 0..k {
                let bk = bias.map_or(R::zero(), |b| b[kk]);
                for tt in 0..t {
                    let dst = &mut on[(kk * 2 * t + 2 * tt + j) * spatial..][..spatial];
                    let src = &yj[kk * ts + tt * spatial..][..spatial];
                    dst.iter_mut().zip(src).for_each(|(d, &v)| *d = v + bk);
                }
            }
        }
    }
    out
}

pub fn up_temporal_backward<R: Real>(
    x: &[R],
    w: &[R],
    dy: &[R],
    s: &UpShape,
) -> (Vec<R>, Vec<R>, Vec<R>) {
    let UpShape { n, c, k, t, spatial } = *s;
    let ts = t * spatial;
    let mut dx = vec![R::zero(); n * c * ts];
    let mut dw = vec![R::zero(); c * k * 2];
    let mut db = vec![R::zero(); k];
    let mut dyj = vec![R::zero(); k * ts];
    for b in 0..n {
        let xn = &x[b * c * ts..(b + 1) * c * ts];
        let dyn_ = &dy[b * k * 2 * ts..(b + 1) * k * 2 * ts];
        for j in 0..2 {
            for kk in 0..k {
                for tt in 0..t {
                    let src = &dyn_[(kk * 2 * t + 2 * tt + j) * spatial..][..spatial];
                    dyj[kk * ts + tt * spatial..][..spatial].copy_from_slice(src);
                }
            }
            let dxn = &mut dx[b * c * ts..(b + 1) * c * ts];
            R::gemm(c, k, ts, R::one(), &w[j..], (2 * k, 2), &dyj, (ts, 1), R::one(), dxn, (ts, 1));
            R::gemm(c, ts, k, R::one(), xn, (ts, 1), &dyj, (1, ts), R::one(), &mut dw[j..], (2 * k, 2));
        }
        for kk in 0..k {
            let row = &dyn_[kk * 2 * ts..(kk + 1) * 2 * ts];
            db[kk] += R::from_f64(row.iter().map(|v| v.as_f64()).sum());
        }
    }
    (dx, dw, db)
}

/// Mean over the trailing `spatial` values of each `[N, C, T]` cell.
pub fn avg_pool_forward<R: Real>(x: &[R], cells: usize, spatial: usize) -> Vec<R> {
    (0..cells)
        .map(|i| {
            let sum: f64 = x[i * spatial..(i + 1) * spatial].iter().map(|v| v.as_f64()).sum();
            R::from_f64(sum / spatial as f64)
        })
        .collect()
}

pub fn avg_pool_backward<R: Real>(dy: &[R], spatial: usize) -> Vec<R> {
    let scale = R::from_f64(1.0 / spatial as f64);
    dy.iter()
        .flat_map(|&g| std::iter::repeat_n(g * scale, spatial))
        .collect()
}

/// Per-channel batch statistics over every axis except channels.
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub fn channel_stats<R: Real>(x: &[R], n: usize, c: usize, inner: usize) -> BatchStats {
    let m = (n * inner) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let rows = (0..n).map(|b| &x[(b * c + ch) * inner..(b * c + ch + 1) * inner]);
        let sum: f64 = rows.clone().flatten().map(|v| v.as_f64()).sum();
        let mu = sum / m;
        let sq: f64 = rows.flatten().map(|v| (v.as_f64() - mu).powi(2)).sum();
        mean[ch] = mu;
        var[ch] = sq / m;
    }
    BatchStats { mean, var }
}

/// `y = scale * (x - mean) * inv_std + shift` per channel.
#[allow(clippy::too_many_arguments)]
pub fn channel_affine<R: Real>(
    x: &[R],
    n: usize,
    c: usize,
    inner: usize,
    mean: &[f64],
    inv_std: &[f64],
    scale: &[R],
    shift: &[R],
) -> Vec<R> {
    let mut out = vec![R::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let a = scale[ch].as_f64() * inv_std[ch];
            let off = shift[ch].as_f64() - mean[ch] * a;
            let range = (b * c + ch) * inner..(b * c + ch + 1) * inner;
            for (o, &v) in out[range.clone()].iter_mut().zip(&x[range]) {
                *o = R::from_f64(v.as_f64() * a + off);
            }
        }
    }
    out
}

/// Train-mode batch-norm backward. Returns `(dx, dscale, dshift)`.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm_backward<R: Real>(
    x: &[R],
    dy: &[R],
    n: usize,
    c: usize,
    inner: usize,
    mean: &[f64],
    inv_std: &[f64],
    scale: &[R],
) -> (Vec<R>, Vec<R>, Vec<R>) {
    let m = (n * inner) as f64;
    let mut dx = vec![R::zero(); x.len()];
    let mut dscale = vec![R::zero(); c];
    let mut dshift = vec![R::zero(); c];
    for ch in 0..c {
        let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
        for b in 0..n {
            let r = (b * c + ch) * inner..(b * c + ch + 1) * inner;
            for (&xv, &g) in x[r.clone()].iter().zip(&dy[r]) {
                let xhat = (xv.as_f64() - mean[ch]) * inv_std[ch];
                sum_dy += g.as_f64();
                sum_dy_xhat += g.as_f64() * xhat;
            }
        }
        dscale[ch] = R::from_f64(sum_dy_xhat);
        dshift[ch] = R::from_f64(sum_dy);
        let g_scale = scale[ch].as_f64();
        let k = g_scale * inv_std[ch] / m;
        for b in 0..n {
            let r = (b * c + ch) * inner..(b * c + ch + 1) * inner;
            for ((o, &xv), &g) in dx[r.clone()].iter_mut().zip(&x[r.clone()]).zip(&dy[r]) {
                let xhat = (xv.as_f64() - mean[ch]) * inv_std[ch];
                *o = R::from_f64(k * (m * g.as_f64() - sum_dy - xhat * sum_dy_xhat));
            }
        }
    }
    (dx, dscale, dshift)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn swish_forward<R: Real>(x: &[R]) -> Vec<R> {
    x.iter()
        .map(|&v| {
            let v = v.as_f64();
            R::from_f64(v * sigmoid(v))
        })
        .collect()
}

pub fn swish_backward<R: Real>(x: &[R], dy: &[R]) -> Vec<R> {
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| {
            let v = v.as_f64();
            let s = sigmoid(v);
            R::from_f64(g.as_f64() * (s + v * s * (1.0 - s)))
        })
        .collect()
}

/// Output index `t` reads input index `floor(t * t_in / t_out)`.
pub fn nearest_source(t: usize, t_in: usize, t_out: usize) -> usize {
    t * t_in / t_out
}

pub fn interp_forward<R: Real>(x: &[R], rows: usize, t_in: usize, t_out: usize, spatial: usize) -> Vec<R> {
    let mut out = Vec::with_capacity(rows * t_out * spatial);
    for r in 0..rows {
        for t in 0..t_out {
            let src = nearest_source(t, t_in, t_out);
            out.extend_from_slice(&x[(r * t_in + src) * spatial..][..spatial]);
        }
    }
    out
}

pub fn interp_backward<R: Real>(dy: &[R], rows: usize, t_in: usize, t_out: usize, spatial: usize) -> Vec<R> {
    let mut dx = vec![R::zero(); rows * t_in * spatial];
    for r in 0..rows {
        for t in 0..t_out {
            let src = nearest_source(t, t_in, t_out);
            let d = &mut dx[(r * t_in + src) * spatial..][..spatial];
            let g = &dy[(r * t_out + t) * spatial..][..spatial];
            d.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
        }
    }
    dx
}

/// Cross entropy averaged over all `(n, position)` cells of `[N, K, P]`
/// logits, against a weighted mixture of hard targets. Returns the loss and
/// the gradient with respect to the logits.
pub fn cross_entropy<R: Real>(
    logits: &[R],
    n: usize,
    k: usize,
    p: usize,
    targets: &[(f64, &[usize])],
) -> (f64, Vec<R>) {
    let cells = (n * p) as f64;
    let mut loss = 0.0;
    let mut grad = vec![R::zero(); logits.len()];
    let mut logp = vec![0.0; k];
    for b in 0..n {
        for pos in 0..p {
            let at = |c: usize| (b * k + c) * p + pos;
            let max = (0..k).map(|c| logits[at(c)].as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + (0..k).map(|c| (logits[at(c)].as_f64() - max).exp()).sum::<f64>().ln();
            for (c, lp) in logp.iter_mut().enumerate() {
                *lp = logits[at(c)].as_f64() - lse;
            }
            let total_w: f64 = targets.iter().map(|(w, _)| w).sum();
            for c in 0..k {
                grad[at(c)] = R::from_f64(total_w * logp[c].exp() / cells);
            }
            for &(w, tgt) in targets {
                let t = tgt[b * p + pos];
                loss -= w * logp[t];
                grad[at(t)] -= R::from_f64(w / cells);
            }
        }
    }
    (loss / cells, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], xs: [usize; 5], w: &[f64], ws: [usize; 5], g: ConvGeometry) -> Vec<f64> {
        let [n, c, t, h, wd] = xs;
        let [k, _, kt, kh, kw] = ws;
        let o = g.output_extents([t, h, wd], [kt, kh, kw]).unwrap();
        let mut out = vec![0.0; n * k * o[0] * o[1] * o[2]];
        let mut idx = 0;
        for b in 0..n {
            for kk in 0..k {
                for ot in 0..o[0] {
                    for oh in 0..o[1] {
                        for ow in 0..o[2] {
                            let mut acc = 0.0;
                            for cc in 0..c {
                                for dt in 0..kt {
                                    for dh in 0..kh {
                                        for dw in 0..kw {
                                            let it = (ot * g.stride[0] + dt) as isize - g.padding[0] as isize;
                                            let ih = (oh * g.stride[1] + dh) as isize - g.padding[1] as isize;
                                            let iw = (ow * g.stride[2] + dw) as isize - g.padding[2] as isize;
                                            if it < 0 || ih < 0 || iw < 0 || it >= t as isize || ih >= h as isize || iw >= wd as isize {
                                                continue;
                                            }
                                            let xi = (((b * c + cc) * t + it as usize) * h + ih as usize) * wd + iw as usize;
                                            let wi = (((kk * c + cc) * kt + dt) * kh + dh) * kw + dw;
                                            acc += x[xi] * w[wi];
                                        }
                                    }
                                }
                            }
                            out[idx] = acc;
                            idx += 1;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_loops() {
        let xs = [2, 3, 5, 6, 7];
        let ws = [4, 3, 3, 3, 2];
        let x: Vec<f64> = (0..xs.iter().product()).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
        let w: Vec<f64> = (0..ws.iter().product()).map(|i| ((i * 13 % 7) as f64) * 0.1).collect();
        for g in [
            ConvGeometry::unit(),
            ConvGeometry::strided([2, 1, 3]).with_padding([1, 1, 0]),
            ConvGeometry::strided([1, 4, 4]).with_padding([1, 1, 1]),
        ] {
            let output = g.output_extents([5, 6, 7], [3, 3, 2]).unwrap();
            let s = ConvShape { n: 2, c: 3, input: [5, 6, 7], k: 4, kernel: [3, 3, 2], output, geom: g };
            let fast = conv3d_forward(&x, &w, None, &s);
            let slow = naive_conv(&x, xs, &w, ws, g);
            assert_eq!(fast.len(), slow.len());
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn output_extent_formula() {
        let g = ConvGeometry::strided([2, 4, 4]).with_padding([1, 1, 1]);
        assert_eq!(g.output_extents([32, 28, 28], [3, 3, 3]), Some([16, 7, 7]));
        assert_eq!(ConvGeometry::unit().output_extents([1, 1, 1], [2, 1, 1]), None);
    }

    #[test]
    fn interp_replicates() {
        let x = [1.0f64, 2.0, 3.0, 4.0];
        let y = interp_forward(&x, 1, 4, 32, 1);
        for (t, v) in y.iter().enumerate() {
            assert_eq!(*v, x[t / 8]);
        }
        assert_eq!(interp_forward(&x, 1, 4, 4, 1), x.to_vec());
    }
}
