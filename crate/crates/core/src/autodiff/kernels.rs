//! Forward and backward kernels behind the tape operations.
//!
//! Every kernel accumulates in a fixed order so results are reproducible
//! bit-for-bit on one platform. Convolution sums `bias, then c, ky, kx`
//! (kernel-major) for each output element.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Output extent of a strided, zero-padded window.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new<T: Scalar>(
        x: &Tensor<T>,
        k: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (c_in, h, w) = x.dims3()?;
        let [c_out, kc, kh, kw] = k.shape()[..] else {
            return Err(Error::shape(format!("kernel must be [Co,Ci,kh,kw], got {:?}", k.shape())));
        };
        if kc != c_in {
            return Err(Error::shape(format!(
                "input has {c_in} channels but kernel expects {kc}"
            )));
        }
        if let Some(b) = bias {
            if b.shape() != [c_out] {
                return Err(Error::shape(format!("bias {:?} for {c_out} outputs", b.shape())));
            }
        }
        if stride == 0 {
            return Err(Error::contract("stride must be positive"));
        }
        let ho = conv_out_extent(h, kh, stride, pad)
            .ok_or_else(|| Error::shape(format!("kernel height {kh} exceeds padded input {h}+2*{pad}")))?;
        let wo = conv_out_extent(w, kw, stride, pad)
            .ok_or_else(|| Error::shape(format!("kernel width {kw} exceeds padded input {w}+2*{pad}")))?;
        Ok(Self { c_in, h, w, c_out, kh, kw, ho, wo, stride, pad })
    }

    /// Output rows `oy` whose input row `oy*stride + ky - pad` is in bounds.
    #[inline]
    fn valid_out(&self, k: usize, extent_in: usize, extent_out: usize) -> std::ops::Range<usize> {
        let (s, p) = (self.stride, self.pad);
        let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
        // largest o with o*s + k - p <= extent_in - 1
        let top = extent_in + p;
        if top <= k {
            return 0..0;
        }
        let hi = ((top - 1 - k) / s + 1).min(extent_out);
        lo.min(hi)..hi
    }
}

/// Unfolds the input into rows indexed by tap `(c, ky, kx)`, each holding
/// that tap's input value for every output cell (zero where padded).
fn im2col<'x, T: Scalar>(x: &'x Tensor<T>, g: &ConvGeom) -> std::borrow::Cow<'x, [T]> {
    if g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0 {
        return std::borrow::Cow::Borrowed(x.data());
    }
    let plane = g.ho * g.wo;
    let mut col = vec![T::zero(); g.c_in * g.kh * g.kw * plane];
    let mut rows = col.chunks_exact_mut(plane);
    for c in 0..g.c_in {
        let src = &x.data()[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let oys = g.valid_out(ky, g.h, g.ho);
            for kx in 0..g.kw {
                let row = rows.next().expect("tap row");
                let oxs = g.valid_out(kx, g.w, g.wo);
                for oy in oys.clone() {
                    let srow = &src[(oy * g.stride + ky - g.pad) * g.w..];
                    let first = oxs.start * g.stride + kx - g.pad;
                    let d = &mut row[oy * g.wo + oxs.start..oy * g.wo + oxs.end];
                    for (o, &v) in d.iter_mut().zip(srow[first..].iter().step_by(g.stride)) {
                        *o = v;
                    }
                }
            }
        }
    }
    std::borrow::Cow::Owned(col)
}

/// Scatter form for inputs that are zero outside a few spatial cells (spatial
/// guidance maps). Visiting input cells in row-major order keeps each
/// output's taps in `(c, ky, kx)` order; skipped taps only add zeros.
fn conv2d_sparse<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>, bias: Option<&Tensor<T>>, g: &ConvGeom) -> Option<Tensor<T>> {
    let hw = g.h * g.w;
    let xd = x.data();
    let active: Vec<usize> = (0..hw).filter(|&p| (0..g.c_in).any(|c| xd[c * hw + p] != T::zero())).collect();
    if active.len() * 8 > hw {
        return None;
    }
    let kd = k.data();
    let plane = g.ho * g.wo;
    let mut out = vec![T::zero(); g.c_out * plane];
    for o in 0..g.c_out {
        let dst = &mut out[o * plane..(o + 1) * plane];
        if let Some(b) = bias {
            dst.fill(b.data()[o]);
        }
        for c in 0..g.c_in {
            let wk = &kd[(o * g.c_in + c) * g.kh * g.kw..(o * g.c_in + c + 1) * g.kh * g.kw];
            for &p in &active {
                let v = xd[c * hw + p];
                let (iy, ix) = (p / g.w, p % g.w);
                for ky in 0..g.kh {
                    let ny = iy + g.pad;
                    if ny < ky || (ny - ky) % g.stride != 0 || (ny - ky) / g.stride >= g.ho {
                        continue;
                    }
                    let oy = (ny - ky) / g.stride;
                    for kx in 0..g.kw {
                        let nx = ix + g.pad;
                        if nx < kx || (nx - kx) % g.stride != 0 || (nx - kx) / g.stride >= g.wo {
                            continue;
                        }
                        dst[oy * g.wo + (nx - kx) / g.stride] += wk[ky * g.kw + kx] * v;
                    }
                }
            }
        }
    }
    Some(Tensor::new([g.c_out, g.ho, g.wo], out).expect("conv output shape"))
}

/// Every output element accumulates bias first, then taps in `(c, ky, kx)`
/// order, matching the direct nested-loop definition.
pub(crate) fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &ConvGeom,
) -> Tensor<T> {
    const OB: usize = 4;
    const PB: usize = 16;
    let kd = k.data();
    let plane = g.ho * g.wo;
    let taps = g.c_in * g.kh * g.kw;
    if let Some(out) = conv2d_sparse(x, k, bias, g) {
        return out;
    }
    let col = im2col(x, g);
    let mut out = vec![T::zero(); g.c_out * plane];
    if let Some(b) = bias {
        for (dst, &bv) in out.chunks_exact_mut(plane).zip(b.data()) {
            dst.fill(bv);
        }
    }
    let full_o = g.c_out / OB * OB;
    let full_p = plane / PB * PB;
    // Register tile of OB output channels x PB cells, held across all taps.
    for o0 in (0..full_o).step_by(OB) {
        for p0 in (0..full_p).step_by(PB) {
            let mut acc = [[T::zero(); PB]; OB];
            for (j, a) in acc.iter_mut().enumerate() {
                a.copy_from_slice(&out[(o0 + j) * plane + p0..(o0 + j) * plane + p0 + PB]);
            }
            for t in 0..taps {
                let src: &[T; PB] = col[t * plane + p0..t * plane + p0 + PB].try_into().expect("tile");
                for (j, a) in acc.iter_mut().enumerate() {
                    let w = kd[(o0 + j) * taps + t];
                    for i in 0..PB {
                        a[i] += w * src[i];
                    }
                }
            }
            for (j, a) in acc.iter().enumerate() {
                out[(o0 + j) * plane + p0..(o0 + j) * plane + p0 + PB].copy_from_slice(a);
            }
        }
    }
    let scalar = |out: &mut [T], o: usize, cells: std::ops::Range<usize>| {
        for t in 0..taps {
            let w = kd[o * taps + t];
            for p in cells.clone() {
                out[o * plane + p] += w * col[t * plane + p];
            }
        }
    };
    for o in 0..full_o {
        scalar(&mut out, o, full_p..plane);
    }
    for o in full_o..g.c_out {
        scalar(&mut out, o, 0..plane);
    }
    Tensor::new([g.c_out, g.ho, g.wo], out).expect("conv output shape")
}

/// Gradients of a convolution. Each requested slot is `Some`.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    gout: &Tensor<T>,
    g: &ConvGeom,
    want: [bool; 3],
) -> [Option<Tensor<T>>; 3] {
    const LANES: usize = 8;
    let kd = k.data();
    let gd = gout.data();
    let plane = g.ho * g.wo;
    let taps = g.c_in * g.kh * g.kw;
    let gb = want[2].then(|| {
        (0..g.c_out).map(|o| gd[o * plane..(o + 1) * plane].iter().copied().sum()).collect::<Vec<T>>()
    });

    // d/dk[o, t] = <gout[o, :], col[t, :]>, summed in LANES interleaved partials.
    let gk = want[1].then(|| {
        let col = im2col(x, g);
        let mut gk = vec![T::zero(); k.len()];
        for o in 0..g.c_out {
            let grow = &gd[o * plane..(o + 1) * plane];
            for t in 0..taps {
                let crow = &col[t * plane..(t + 1) * plane];
                let mut acc = [T::zero(); LANES];
                let mut gc = grow.chunks_exact(LANES);
                let mut cc = crow.chunks_exact(LANES);
                for (a, b) in (&mut gc).zip(&mut cc) {
                    for i in 0..LANES {
                        acc[i] += a[i] * b[i];
                    }
                }
                let mut sum: T = acc.iter().copied().sum();
                for (a, b) in gc.remainder().iter().zip(cc.remainder()) {
                    sum += *a * *b;
                }
                gk[o * taps + t] = sum;
            }
        }
        gk
    });

    // d/dcol[t, :] = sum_o k[o, t] * gout[o, :], then folded back onto the input.
    let gx = want[0].then(|| {
        let mut gcol = vec![T::zero(); taps * plane];
        for (t, row) in gcol.chunks_exact_mut(plane).enumerate() {
            for o in 0..g.c_out {
                let w = kd[o * taps + t];
                for (r, &v) in row.iter_mut().zip(&gd[o * plane..(o + 1) * plane]) {
                    *r += w * v;
                }
            }
        }
        if g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0 {
            return gcol;
        }
        let mut gx = vec![T::zero(); x.len()];
        let mut rows = gcol.chunks_exact(plane);
        for c in 0..g.c_in {
            let dst = &mut gx[c * g.h * g.w..(c + 1) * g.h * g.w];
            for ky in 0..g.kh {
                let oys = g.valid_out(ky, g.h, g.ho);
                for kx in 0..g.kw {
                    let row = rows.next().expect("tap row");
                    let oxs = g.valid_out(kx, g.w, g.wo);
                    for oy in oys.clone() {
                        let base = (oy * g.stride + ky - g.pad) * g.w;
                        for ox in oxs.clone() {
                            dst[base + ox * g.stride + kx - g.pad] += row[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
        gx
    });

    [
        gx.map(|d| Tensor::new(x.shape().to_vec(), d).unwrap()),
        gk.map(|d| Tensor::new(k.shape().to_vec(), d).unwrap()),
        gb.map(|d| Tensor::new([g.c_out], d).unwrap()),
    ]
}

/// Convolution of a spatially constant input: `z` tiled to `[Cz,h,w]`,
/// stride 1, zero padding `pad`, no bias. Each output sums the per-tap
/// responses `Σ_c k[o,c,ky,kx]·z[c]` over in-bounds taps, in `ky, kx` order.
pub(crate) fn tiled_conv_forward<T: Scalar>(
    z: &Tensor<T>,
    k: &Tensor<T>,
    offset: usize,
    h: usize,
    w: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let [c_out, ck, kh, kw] = k.shape()[..] else {
        return Err(Error::shape(format!("kernel must be [Co,Ci,kh,kw], got {:?}", k.shape())));
    };
    let cz = z.len();
    if z.shape() != [cz] || offset + cz > ck {
        return Err(Error::shape(format!(
            "guidance vector {:?} at kernel input {offset} of {ck}",
            z.shape()
        )));
    }
    if kh != 2 * pad + 1 || kw != 2 * pad + 1 {
        return Err(Error::contract("tiled convolution needs an odd 'same' kernel"));
    }
    let taps = tap_responses(z, k, offset);
    // Cells whose window clips the same taps share one value; sum each class
    // once, in (ky, kx) order.
    let classes = |extent: usize, kk: usize| {
        let mut id = vec![0usize; extent];
        let mut ranges: Vec<(usize, usize)> = Vec::new();
        for (o, slot) in id.iter_mut().enumerate() {
            let lo = pad.saturating_sub(o);
            let hi = (extent + pad - o).min(kk);
            *slot = ranges.iter().position(|&r| r == (lo, hi)).unwrap_or_else(|| {
                ranges.push((lo, hi));
                ranges.len() - 1
            });
        }
        (id, ranges)
    };
    let (row_id, row_ranges) = classes(h, kh);
    let (col_id, col_ranges) = classes(w, kw);
    let plane = h * w;
    let mut out = vec![T::zero(); c_out * plane];
    let mut rows = vec![T::zero(); row_ranges.len() * w];
    let mut cells = vec![T::zero(); col_ranges.len()];
    for o in 0..c_out {
        let tap = &taps[o * kh * kw..(o + 1) * kh * kw];
        for (ri, &(ky0, ky1)) in row_ranges.iter().enumerate() {
            for (cell, &(kx0, kx1)) in cells.iter_mut().zip(&col_ranges) {
                let mut acc = T::zero();
                for ky in ky0..ky1 {
                    for &v in &tap[ky * kw + kx0..ky * kw + kx1] {
                        acc += v;
                    }
                }
                *cell = acc;
            }
            for (v, &ci) in rows[ri * w..(ri + 1) * w].iter_mut().zip(&col_id) {
                *v = cells[ci];
            }
        }
        for (oy, row) in out[o * plane..(o + 1) * plane].chunks_exact_mut(w).enumerate() {
            row.copy_from_slice(&rows[row_id[oy] * w..(row_id[oy] + 1) * w]);
        }
    }
    Tensor::new([c_out, h, w], out)
}

fn tap_responses<T: Scalar>(z: &Tensor<T>, k: &Tensor<T>, offset: usize) -> Vec<T> {
    let [c_out, ck, kh, kw] = k.shape()[..] else { unreachable!() };
    let n = kh * kw;
    let kd = k.data();
    let mut taps = vec![T::zero(); c_out * n];
    for (o, dst) in taps.chunks_exact_mut(n).enumerate() {
        let weights = kd[(o * ck + offset) * n..].chunks_exact(n);
        for (&zc, wk) in z.data().iter().zip(weights) {
            for (d, &v) in dst.iter_mut().zip(wk) {
                *d += v * zc;
            }
        }
    }
    taps
}

pub(crate) fn tiled_conv_backward<T: Scalar>(
    z: &Tensor<T>,
    k: &Tensor<T>,
    offset: usize,
    gout: &Tensor<T>,
    pad: usize,
    want: [bool; 2],
) -> [Option<Tensor<T>>; 2] {
    let [c_out, ck, kh, kw] = k.shape()[..] else { unreachable!() };
    let cz = z.len();
    let (_, h, w) = gout.dims3().expect("tiled conv grad is 3-D");
    let g = ConvGeom { c_in: cz, h, w, c_out, kh, kw, ho: h, wo: w, stride: 1, pad };
    let gd = gout.data();
    let plane = h * w;
    // gradient w.r.t. each tap response
    let mut gt = vec![T::zero(); c_out * kh * kw];
    for o in 0..c_out {
        for ky in 0..kh {
            let rows = g.valid_out(ky, h, h);
            for kx in 0..kw {
                let cols = g.valid_out(kx, w, w);
                let mut acc = T::zero();
                for oy in rows.clone() {
                    let base = o * plane + oy * w;
                    for &v in &gd[base + cols.start..base + cols.end] {
                        acc += v;
                    }
                }
                gt[(o * kh + ky) * kw + kx] = acc;
            }
        }
    }
    let kd = k.data();
    let zd = z.data();
    let gz = want[0].then(|| {
        let mut gz = vec![T::zero(); cz];
        for o in 0..c_out {
            for (c, gzc) in gz.iter_mut().enumerate() {
                for t in 0..kh * kw {
                    *gzc += gt[o * kh * kw + t] * kd[(o * ck + offset + c) * kh * kw + t];
                }
            }
        }
        Tensor::new([cz], gz).unwrap()
    });
    let gk = want[1].then(|| {
        let mut gk = vec![T::zero(); k.len()];
        for o in 0..c_out {
            for c in 0..cz {
                for t in 0..kh * kw {
                    gk[(o * ck + offset + c) * kh * kw + t] = gt[o * kh * kw + t] * zd[c];
                }
            }
        }
        Tensor::new(k.shape().to_vec(), gk).unwrap()
    });
    [gz, gk]
}

/// One axis of a half-pixel bilinear resampling: for each destination index,
/// the two source indices and the weight of the second.
pub(crate) fn bilinear_axis(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

pub(crate) fn resize_forward<T: Scalar>(x: &Tensor<T>, h2: usize, w2: usize) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3()?;
    if h2 == 0 || w2 == 0 {
        return Err(Error::shape("resize target must be at least 1x1"));
    }
    if h2 == h && w2 == w {
        return Ok(x.clone());
    }
    let ys = bilinear_axis(h, h2);
    let xs: Vec<(usize, usize, T)> = bilinear_axis(w, w2).into_iter().map(|(a, b, f)| (a, b, T::lit(f))).collect();
    let xd = x.data();
    let mut out = Vec::with_capacity(c * h2 * w2);
    // Horizontal pass per source row, then vertical blend of the two rows.
    let mut rows = vec![T::zero(); h * w2];
    for ch in 0..c {
        let p = &xd[ch * h * w..(ch + 1) * h * w];
        for (src, dst) in p.chunks_exact(w).zip(rows.chunks_exact_mut(w2)) {
            for (d, &(x0, x1, fx)) in dst.iter_mut().zip(&xs) {
                *d = src[x0] * (T::one() - fx) + src[x1] * fx;
            }
        }
        for &(y0, y1, fy) in &ys {
            let fy = T::lit(fy);
            let (top, bot) = (&rows[y0 * w2..(y0 + 1) * w2], &rows[y1 * w2..(y1 + 1) * w2]);
            out.extend(top.iter().zip(bot).map(|(&t, &b)| t * (T::one() - fy) + b * fy));
        }
    }
    Tensor::new([c, h2, w2], out)
}

pub(crate) fn resize_backward<T: Scalar>(x_shape: &[usize], gout: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = (x_shape[0], x_shape[1], x_shape[2]);
    let (_, h2, w2) = gout.dims3().unwrap();
    if h2 == h && w2 == w {
        return gout.clone();
    }
    let ys = bilinear_axis(h, h2);
    let xs = bilinear_axis(w, w2);
    let gd = gout.data();
    let mut gx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let p = &mut gx[ch * h * w..(ch + 1) * h * w];
        for (dy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let fy = T::lit(fy);
            for (dx, &(x0, x1, fx)) in xs.iter().enumerate() {
                let fx = T::lit(fx);
                let g = gd[(ch * h2 + dy) * w2 + dx];
                let gt = g * (T::one() - fy);
                let gb = g * fy;
                p[y0 * w + x0] += gt * (T::one() - fx);
                p[y0 * w + x1] += gt * fx;
                p[y1 * w + x0] += gb * (T::one() - fx);
                p[y1 * w + x1] += gb * fx;
            }
        }
    }
    Tensor::new(x_shape.to_vec(), gx).unwrap()
}

/// `(Σ mask·feat / Σ mask, Σ mask)`; zero vector and zero count for an empty mask.
pub(crate) fn masked_average_forward<T: Scalar>(
    f: &Tensor<T>,
    mask: &Tensor<T>,
) -> Result<(Tensor<T>, T)> {
    let (c, h, w) = f.dims3()?;
    if mask.shape() != [1, h, w] {
        return Err(Error::shape(format!("mask {:?} for features {:?}", mask.shape(), f.shape())));
    }
    let m = mask.data();
    let count: T = m.iter().copied().sum();
    if count == T::zero() {
        return Ok((Tensor::zeros([c]), T::zero()));
    }
    let z = (0..c)
        .map(|ch| {
            let p = f.plane(ch);
            let mut acc = T::zero();
            for (&mi, &fi) in m.iter().zip(p) {
                if mi != T::zero() {
                    acc += mi * fi;
                }
            }
            acc / count
        })
        .collect();
    Ok((Tensor::vector(z), count))
}

/// Softmax cross-entropy per valid pixel. Returns the mean loss and the
/// gradient w.r.t. the logits of the mean loss.
pub(crate) fn cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    target: &[u8],
    ignore: u8,
) -> Result<(T, Tensor<T>)> {
    let (k, h, w) = logits.dims3()?;
    if k < 2 {
        return Err(Error::shape("cross-entropy needs at least two classes"));
    }
    let n = h * w;
    if target.len() != n {
        return Err(Error::shape(format!("target has {} pixels, logits {h}x{w}", target.len())));
    }
    if let Some((index, &label)) =
        target.iter().enumerate().find(|&(_, &t)| t != ignore && t as usize >= k)
    {
        return Err(Error::InvalidLabel { label, index, classes: k });
    }
    let valid = target.iter().filter(|&&t| t != ignore).count();
    let ld = logits.data();
    let mut grad = vec![T::zero(); k * n];
    if valid == 0 {
        return Ok((T::zero(), Tensor::new([k, h, w], grad)?));
    }
    let inv = T::one() / T::from_count(valid);
    let mut total = T::zero();
    for (i, &t) in target.iter().enumerate() {
        if t == ignore {
            continue;
        }
        let mut mx = T::neg_infinity();
        for c in 0..k {
            mx = mx.max(ld[c * n + i]);
        }
        let mut denom = T::zero();
        for c in 0..k {
            denom += (ld[c * n + i] - mx).exp();
        }
        let lse = mx + denom.ln();
        total += lse - ld[t as usize * n + i];
        for c in 0..k {
            let p = (ld[c * n + i] - mx).exp() / denom;
            let y = if c == t as usize { T::one() } else { T::zero() };
            grad[c * n + i] = (p - y) * inv;
        }
    }
    Ok((total * inv, Tensor::new([k, h, w], grad)?))
}

/// Copies `len` entries starting at `start` along `axis`.
pub(crate) fn narrow<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    if axis >= shape.len() || len == 0 || start + len > shape[axis] {
        return Err(Error::shape(format!("cannot narrow {shape:?} axis {axis} to {start}..{}", start + len)));
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * shape[axis] + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut s = shape.to_vec();
    s[axis] = len;
    Tensor::new(s, out)
}

pub(crate) fn narrow_backward<T: Scalar>(
    x_shape: &[usize],
    axis: usize,
    start: usize,
    gout: &Tensor<T>,
) -> Tensor<T> {
    let len = gout.shape()[axis];
    let outer: usize = x_shape[..axis].iter().product();
    let inner: usize = x_shape[axis + 1..].iter().product();
    let mut gx = vec![T::zero(); x_shape.iter().product()];
    for o in 0..outer {
        let base = (o * x_shape[axis] + start) * inner;
        let src = &gout.data()[o * len * inner..(o + 1) * len * inner];
        gx[base..base + len * inner].copy_from_slice(src);
    }
    Tensor::new(x_shape.to_vec(), gx).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_extent_law() {
        assert_eq!(conv_out_extent(64, 3, 2, 1), Some(32));
        assert_eq!(conv_out_extent(16, 3, 1, 1), Some(16));
        assert_eq!(conv_out_extent(3, 3, 1, 0), Some(1));
        assert_eq!(conv_out_extent(2, 5, 1, 1), None);
    }

    #[test]
    fn bilinear_axis_identity_and_clamp() {
        let same = bilinear_axis(4, 4);
        for (d, &(i0, _, f)) in same.iter().enumerate() {
            assert_eq!(i0, d);
            assert_eq!(f, 0.0);
        }
        // upsampling 2 -> 4: first destination clamps to the edge
        let up = bilinear_axis(2, 4);
        assert_eq!(up[0], (0, 1, 0.0));
        assert_eq!(up[1], (0, 1, 0.25));
        assert_eq!(up[3], (1, 1, 0.0));
    }
}
