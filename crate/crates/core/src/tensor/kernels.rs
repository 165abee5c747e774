//! Raw numeric kernels behind the tape operations.
//!
//! Every output element is produced by a fixed-order sequential reduction,
//! so results are bit-identical between the parallel and sequential
//! execution modes within one build configuration. Parallel kernels split
//! work over disjoint output regions only.

use super::Element;
use crate::exec;

/// `c = a * b` for row-major `a: [m,k]`, `b: [k,n]`. Parallel over rows
/// of `c`; each row accumulates over `k` in ascending order.
pub fn matmul<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![E::zero(); m * n];
    exec::for_each_chunk(&mut c, n, |start, chunk| {
        let first_row = start / n;
        for (r, row) in chunk.chunks_mut(n).enumerate() {
            let arow = &a[(first_row + r) * k..(first_row + r + 1) * k];
            for (kk, &av) in arow.iter().enumerate() {
                let brow = &b[kk * n..(kk + 1) * n];
                for (cj, &bj) in row.iter_mut().zip(brow.iter()) {
                    *cj = *cj + av * bj;
                }
            }
        }
    });
    c
}

/// `c = a^T * b` for row-major `a: [k,m]`, `b: [k,n]` without
/// materializing the transpose. Same fixed per-element accumulation
/// order as [`matmul`].
pub fn matmul_ta<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![E::zero(); m * n];
    exec::for_each_chunk(&mut c, n, |start, chunk| {
        let first_row = start / n;
        for (r, row) in chunk.chunks_mut(n).enumerate() {
            let i = first_row + r;
            for kk in 0..k {
                let av = a[kk * m + i];
                let brow = &b[kk * n..(kk + 1) * n];
                for (cj, &bj) in row.iter_mut().zip(brow.iter()) {
                    *cj = *cj + av * bj;
                }
            }
        }
    });
    c
}

pub fn transpose<E: Element>(a: &[E], rows: usize, cols: usize) -> Vec<E> {
    let mut out = vec![E::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Output spatial extent of an unpadded convolution.
pub fn conv_out_extent(h: usize, k: usize, stride: usize) -> usize {
    (h - k) / stride + 1
}

/// Unfolds one sample `x: [c,h,w]` into `[(c*kh*kw), oh*ow]` columns
/// (no padding; stride `s`).
pub fn im2col<E: Element>(
    x: &[E],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    s: usize,
) -> (Vec<E>, usize, usize) {
    let oh = conv_out_extent(h, kh, s);
    let ow = conv_out_extent(w, kw, s);
    let ohw = oh * ow;
    let mut cols = vec![E::zero(); c * kh * kw * ohw];
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &mut cols[((ci * kh + ki) * kw + kj) * ohw..][..ohw];
                for oy in 0..oh {
                    let src = &x[ci * h * w + (oy * s + ki) * w + kj..];
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if s == 1 {
                        dst.copy_from_slice(&src[..ow]);
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            *d = src[ox * s];
                        }
                    }
                }
            }
        }
    }
    (cols, oh, ow)
}

/// Adjoint of [`im2col`]: scatter-adds columns back onto the `[c,h,w]` grid.
pub fn col2im<E: Element>(
    cols: &[E],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    s: usize,
    oh: usize,
    ow: usize,
) -> Vec<E> {
    let ohw = oh * ow;
    let mut x = vec![E::zero(); c * h * w];
    exec::for_each_chunk(&mut x, h * w, |start, chunk| {
        let first = start / (h * w);
        for (d, xc) in chunk.chunks_mut(h * w).enumerate() {
            let ci = first + d;
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = &cols[((ci * kh + ki) * kw + kj) * ohw..][..ohw];
                    for oy in 0..oh {
                        let y = oy * s + ki;
                        for ox in 0..ow {
                            xc[y * w + ox * s + kj] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    });
    x
}

/// Forward convolution over pre-padded input.
/// `x: [b,cin,h,w]`, `weight: [cout,cin,kh,kw]`, `bias: [cout]`.
pub fn conv2d_fwd<E: Element>(
    x: &[E],
    (b, cin, h, w): (usize, usize, usize, usize),
    weight: &[E],
    (cout, kh, kw): (usize, usize, usize),
    bias: &[E],
    stride: usize,
) -> (Vec<E>, usize, usize) {
    let oh = conv_out_extent(h, kh, stride);
    let ow = conv_out_extent(w, kw, stride);
    let ohw = oh * ow;
    let mut out = vec![E::zero(); b * cout * ohw];
    for bi in 0..b {
        let (cols, _, _) = im2col(&x[bi * cin * h * w..][..cin * h * w], cin, h, w, kh, kw, stride);
        let prod = matmul(weight, &cols, cout, cin * kh * kw, ohw);
        let dst = &mut out[bi * cout * ohw..][..cout * ohw];
        for co in 0..cout {
            let bv = bias[co];
            for (d, &p) in dst[co * ohw..(co + 1) * ohw]
                .iter_mut()
                .zip(prod[co * ohw..(co + 1) * ohw].iter())
            {
                *d = p + bv;
            }
        }
    }
    (out, oh, ow)
}

/// Gradients of [`conv2d_fwd`]. Any of the three outputs can be skipped.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd<E: Element>(
    x: &[E],
    (b, cin, h, w): (usize, usize, usize, usize),
    weight: &[E],
    (cout, kh, kw): (usize, usize, usize),
    stride: usize,
    d_out: &[E],
    (oh, ow): (usize, usize),
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Vec<E>>, Option<Vec<E>>, Option<Vec<E>>) {
    let ohw = oh * ow;
    let kk = cin * kh * kw;
    let mut dx = if need_dx { Some(vec![E::zero(); b * cin * h * w]) } else { None };
    let mut dw = if need_dw { Some(vec![E::zero(); cout * kk]) } else { None };
    let mut db = if need_db { Some(vec![E::zero(); cout]) } else { None };

    for bi in 0..b {
        let dob = &d_out[bi * cout * ohw..][..cout * ohw];
        if let Some(db) = db.as_mut() {
            for co in 0..cout {
                let mut acc = E::zero();
                for &g in &dob[co * ohw..(co + 1) * ohw] {
                    acc += g;
                }
                db[co] += acc;
            }
        }
        if need_dw || need_dx {
            if let Some(dw) = dw.as_mut() {
                let (cols, _, _) =
                    im2col(&x[bi * cin * h * w..][..cin * h * w], cin, h, w, kh, kw, stride);
                // dw += d_out * cols^T, computed as (cols * d_out^T)^T so
                // only the small operand gets transposed
                let dobt = transpose(dob, cout, ohw);
                let part_t = matmul(&cols, &dobt, kk, ohw, cout);
                for i in 0..cout {
                    let drow = &mut dw[i * kk..(i + 1) * kk];
                    for (j, d) in drow.iter_mut().enumerate() {
                        *d += part_t[j * cout + i];
                    }
                }
            }
            if let Some(dx) = dx.as_mut() {
                // d_cols = W^T * d_out without materializing W^T
                let dcols = matmul_ta(weight, dob, kk, cout, ohw);
                let part = col2im(&dcols, cin, h, w, kh, kw, stride, oh, ow);
                let dst = &mut dx[bi * cin * h * w..][..cin * h * w];
                dst.copy_from_slice(&part);
            }
        }
    }
    (dx, dw, db)
}

/// Output spatial extent of a transposed convolution.
pub fn convt_out_extent(h: usize, k: usize, stride: usize, padding: usize) -> usize {
    (h - 1) * stride + k - 2 * padding
}

/// Unfold for the transposed geometry: gathers
/// `cols[(c*kh+ki)*kw+kj, iy*w_in+ix] = src[c, iy*s+ki-p, ix*s+kj-p]`
/// (zero when out of range). The adjoint of [`col2im_t`].
#[allow(clippy::too_many_arguments)]
pub fn im2col_t<E: Element>(
    src: &[E],
    c: usize,
    (oh, ow): (usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    padding: usize,
    (h_in, w_in): (usize, usize),
) -> Vec<E> {
    let hw = h_in * w_in;
    let mut cols = vec![E::zero(); c * kh * kw * hw];
    for ci in 0..c {
        let sp = &src[ci * oh * ow..(ci + 1) * oh * ow];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &mut cols[((ci * kh + ki) * kw + kj) * hw..][..hw];
                for iy in 0..h_in {
                    let oy = (iy * stride + ki) as isize - padding as isize;
                    if oy < 0 || oy as usize >= oh {
                        continue;
                    }
                    let srow = &sp[oy as usize * ow..(oy as usize + 1) * ow];
                    let drow = &mut row[iy * w_in..(iy + 1) * w_in];
                    for (ix, d) in drow.iter_mut().enumerate() {
                        let ox = (ix * stride + kj) as isize - padding as isize;
                        if ox >= 0 && (ox as usize) < ow {
                            *d = srow[ox as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Fold for the transposed geometry: scatter-adds
/// `cols[(c*kh+ki)*kw+kj, iy*w_in+ix]` onto `out[c, iy*s+ki-p, ix*s+kj-p]`.
#[allow(clippy::too_many_arguments)]
pub fn col2im_t<E: Element>(
    cols: &[E],
    c: usize,
    (oh, ow): (usize, usize),
    (kh, kw): (usize, usize),
    stride: usize,
    padding: usize,
    (h_in, w_in): (usize, usize),
) -> Vec<E> {
    let hw = h_in * w_in;
    let mut out = vec![E::zero(); c * oh * ow];
    exec::for_each_chunk(&mut out, oh * ow, |start, chunk| {
        let first = start / (oh * ow);
        for (d, oc) in chunk.chunks_mut(oh * ow).enumerate() {
            let ci = first + d;
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = &cols[((ci * kh + ki) * kw + kj) * hw..][..hw];
                    for iy in 0..h_in {
                        let oy = (iy * stride + ki) as isize - padding as isize;
                        if oy < 0 || oy as usize >= oh {
                            continue;
                        }
                        let orow = &mut oc[oy as usize * ow..(oy as usize + 1) * ow];
                        let srow = &row[iy * w_in..(iy + 1) * w_in];
                        for (ix, &v) in srow.iter().enumerate() {
                            let ox = (ix * stride + kj) as isize - padding as isize;
                            if ox >= 0 && (ox as usize) < ow {
                                orow[ox as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Transposed convolution: `x: [b,cin,h,w]`, `weight: [cin,cout,kh,kw]`.
/// Output extent `(h-1)*stride - 2*padding + kh`. Computed as a matmul
/// over the reshaped kernel followed by a strided fold.
#[allow(clippy::too_many_arguments)]
pub fn convt2d_fwd<E: Element>(
    x: &[E],
    (b, cin, h, w): (usize, usize, usize, usize),
    weight: &[E],
    (cout, kh, kw): (usize, usize, usize),
    bias: &[E],
    stride: usize,
    padding: usize,
) -> (Vec<E>, usize, usize) {
    let oh = convt_out_extent(h, kh, stride, padding);
    let ow = convt_out_extent(w, kw, stride, padding);
    let hw = h * w;
    let kk = cout * kh * kw;
    let mut out = vec![E::zero(); b * cout * oh * ow];
    for bi in 0..b {
        let xb = &x[bi * cin * hw..(bi + 1) * cin * hw];
        // weight is [cin, cout*kh*kw] row-major; read it transposed
        let prod = matmul_ta(weight, xb, kk, cin, hw);
        let folded = col2im_t(&prod, cout, (oh, ow), (kh, kw), stride, padding, (h, w));
        let dst = &mut out[bi * cout * oh * ow..][..cout * oh * ow];
        for co in 0..cout {
            let bv = bias[co];
            for (d, &v) in dst[co * oh * ow..(co + 1) * oh * ow]
                .iter_mut()
                .zip(folded[co * oh * ow..(co + 1) * oh * ow].iter())
            {
                *d = v + bv;
            }
        }
    }
    (out, oh, ow)
}

/// Gradients of [`convt2d_fwd`], via the adjoint unfold plus matmuls.
#[allow(clippy::too_many_arguments)]
pub fn convt2d_bwd<E: Element>(
    x: &[E],
    (b, cin, h, w): (usize, usize, usize, usize),
    weight: &[E],
    (cout, kh, kw): (usize, usize, usize),
    stride: usize,
    padding: usize,
    d_out: &[E],
    (oh, ow): (usize, usize),
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Vec<E>>, Option<Vec<E>>, Option<Vec<E>>) {
    let hw = h * w;
    let kk = cout * kh * kw;
    let mut dx = if need_dx { Some(vec![E::zero(); b * cin * hw]) } else { None };
    let mut dw = if need_dw { Some(vec![E::zero(); cin * kk]) } else { None };
    let mut db = if need_db { Some(vec![E::zero(); cout]) } else { None };

    for bi in 0..b {
        let dob = &d_out[bi * cout * oh * ow..][..cout * oh * ow];
        if need_dx || need_dw {
            let cols = im2col_t(dob, cout, (oh, ow), (kh, kw), stride, padding, (h, w));
            if let Some(dx) = dx.as_mut() {
                // d_x = W_r x cols, W_r: [cin, cout*kh*kw]
                let part = matmul(weight, &cols, cin, kk, hw);
                dx[bi * cin * hw..(bi + 1) * cin * hw].copy_from_slice(&part);
            }
            if let Some(dw) = dw.as_mut() {
                // d_W += x_flat * cols^T, via (cols * x_flat^T)^T
                let xb = &x[bi * cin * hw..(bi + 1) * cin * hw];
                let xbt = transpose(xb, cin, hw);
                let part_t = matmul(&cols, &xbt, kk, hw, cin);
                for i in 0..cin {
                    let drow = &mut dw[i * kk..(i + 1) * kk];
                    for (j, d) in drow.iter_mut().enumerate() {
                        *d += part_t[j * cin + i];
                    }
                }
            }
        }
        if let Some(db) = db.as_mut() {
            for co in 0..cout {
                let mut acc = E::zero();
                for &g in &dob[co * oh * ow..(co + 1) * oh * ow] {
                    acc += g;
                }
                db[co] += acc;
            }
        }
    }
    (dx, dw, db)
}

/// Reflects an out-of-range coordinate back into `[0, n)`; requires the
/// overhang to be at most `n - 1`.
fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    debug_assert!((0..n).contains(&r));
    r as usize
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadKind {
    Zero,
    Reflect,
}

/// Pads `[b,c,h,w]` spatially by `[top, bottom, left, right]`.
pub fn pad_fwd<E: Element>(
    x: &[E],
    (b, c, h, w): (usize, usize, usize, usize),
    pads: [usize; 4],
    kind: PadKind,
) -> Vec<E> {
    let [pt, pb, pl, pr] = pads;
    let (ph, pw) = (h + pt + pb, w + pl + pr);
    let mut out = vec![E::zero(); b * c * ph * pw];
    for ch in 0..b * c {
        let src = &x[ch * h * w..][..h * w];
        let dst = &mut out[ch * ph * pw..][..ph * pw];
        for py in 0..ph {
            let sy = py as isize - pt as isize;
            match kind {
                PadKind::Zero => {
                    if sy < 0 || sy as usize >= h {
                        continue;
                    }
                    let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                    let drow = &mut dst[py * pw..(py + 1) * pw];
                    drow[pl..pl + w].copy_from_slice(srow);
                }
                PadKind::Reflect => {
                    let sy = reflect_index(sy, h);
                    let srow = &src[sy * w..(sy + 1) * w];
                    let drow = &mut dst[py * pw..(py + 1) * pw];
                    for (px, d) in drow.iter_mut().enumerate() {
                        let sx = reflect_index(px as isize - pl as isize, w);
                        *d = srow[sx];
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`pad_fwd`]: routes padded-grid gradients back to sources.
pub fn pad_bwd<E: Element>(
    d_padded: &[E],
    (b, c, h, w): (usize, usize, usize, usize),
    pads: [usize; 4],
    kind: PadKind,
) -> Vec<E> {
    let [pt, pb, pl, pr] = pads;
    let (ph, pw) = (h + pt + pb, w + pl + pr);
    let mut dx = vec![E::zero(); b * c * h * w];
    for ch in 0..b * c {
        let src = &d_padded[ch * ph * pw..][..ph * pw];
        let dst = &mut dx[ch * h * w..][..h * w];
        match kind {
            PadKind::Zero => {
                for y in 0..h {
                    let srow = &src[(y + pt) * pw + pl..][..w];
                    dst[y * w..(y + 1) * w].copy_from_slice(srow);
                }
            }
            PadKind::Reflect => {
                for py in 0..ph {
                    let sy = reflect_index(py as isize - pt as isize, h);
                    for px in 0..pw {
                        let sx = reflect_index(px as isize - pl as isize, w);
                        dst[sy * w + sx] += src[py * pw + px];
                    }
                }
            }
        }
    }
    dx
}

/// Per-(sample, channel) normalization to zero mean and unit variance
/// (biased variance, `eps` floor). Returns the output and the saved
/// `1/sqrt(var+eps)` per channel for the backward pass.
pub fn instance_norm_fwd<E: Element>(
    x: &[E],
    (b, c, hw): (usize, usize, usize),
    eps: E,
) -> (Vec<E>, Vec<E>) {
    let n = E::from_f64(hw as f64);
    let mut y = vec![E::zero(); x.len()];
    let mut inv_std = vec![E::zero(); b * c];
    for ch in 0..b * c {
        let src = &x[ch * hw..][..hw];
        let mut mean = E::zero();
        for &v in src {
            mean += v;
        }
        mean = mean / n;
        let mut var = E::zero();
        for &v in src {
            let d = v - mean;
            var += d * d;
        }
        var = var / n;
        let r = (var + eps).sqrt().recip();
        inv_std[ch] = r;
        for (d, &v) in y[ch * hw..(ch + 1) * hw].iter_mut().zip(src.iter()) {
            *d = (v - mean) * r;
        }
    }
    (y, inv_std)
}

/// Backward of instance normalization given output `y` and saved inverse
/// standard deviations.
pub fn instance_norm_bwd<E: Element>(
    y: &[E],
    inv_std: &[E],
    (b, c, hw): (usize, usize, usize),
    d_y: &[E],
) -> Vec<E> {
    let n = E::from_f64(hw as f64);
    let mut dx = vec![E::zero(); y.len()];
    for ch in 0..b * c {
        let yc = &y[ch * hw..][..hw];
        let gc = &d_y[ch * hw..][..hw];
        let mut m1 = E::zero();
        let mut m2 = E::zero();
        for (&g, &yv) in gc.iter().zip(yc.iter()) {
            m1 += g;
            m2 += g * yv;
        }
        m1 = m1 / n;
        m2 = m2 / n;
        let r = inv_std[ch];
        for ((d, &g), &yv) in dx[ch * hw..(ch + 1) * hw]
            .iter_mut()
            .zip(gc.iter())
            .zip(yc.iter())
        {
            *d = r * (g - m1 - yv * m2);
        }
    }
    dx
}
