//! Raw forward/adjoint kernels. The tape in [`crate::tape`] wires these into
//! reverse-mode autodiff; the image helpers in [`crate::image`] call the
//! forward halves directly.

use crate::tensor::{planes, Scalar, Tensor};

/// Unfold `k x k` "same"-padded patches of one `[C, H, W]` sample into a
/// `[C*k*k, H*W]` matrix.
fn im2col<F: Scalar>(x: &[F], c: usize, h: usize, w: usize, k: usize, out: &mut [F]) {
    let p = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * hw;
                let dst = &mut out[row..row + hw];
                let dy = ky as isize - p;
                let dx = kx as isize - p;
                let x0 = (-dx).clamp(0, w as isize) as usize;
                let x1 = (w as isize - dx).clamp(0, w as isize) as usize;
                for y in 0..h {
                    let drow = &mut dst[y * w..(y + 1) * w];
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        drow.fill(F::zero());
                        continue;
                    }
                    let srow = &plane[sy as usize * w..(sy as usize + 1) * w];
                    drow[..x0].fill(F::zero());
                    drow[x1..].fill(F::zero());
                    let s0 = (x0 as isize + dx) as usize;
                    drow[x0..x1].copy_from_slice(&srow[s0..s0 + (x1 - x0)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into `[C, H, W]`.
fn col2im<F: Scalar>(cols: &[F], c: usize, h: usize, w: usize, k: usize, out: &mut [F]) {
    let p = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut out[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * hw;
                let src = &cols[row..row + hw];
                let dy = ky as isize - p;
                let dx = kx as isize - p;
                let x0 = (-dx).clamp(0, w as isize) as usize;
                let x1 = (w as isize - dx).clamp(0, w as isize) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = (x0 as isize + dx) as usize;
                    let drow = &mut plane[sy as usize * w + s0..sy as usize * w + s0 + (x1 - x0)];
                    for (d, &s) in drow.iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Stride-1 "same" convolution: `x [N, Ci, H, W]`, `w [Co, Ci, k, k]`.
pub fn conv2d_forward<F: Scalar>(x: &Tensor<F>, w: &Tensor<F>, b: Option<&Tensor<F>>) -> Tensor<F> {
    let (n, ci, h, wd) = dims4(x);
    let (co, wci, k, k2) = dims4(w);
    assert_eq!(ci, wci, "conv2d: input has {ci} channels, kernel expects {wci}");
    assert!(k == k2 && k % 2 == 1, "conv2d: kernel must be odd and square");
    let hw = h * wd;
    let kk = ci * k * k;
    let mut out = vec![F::zero(); n * co * hw];
    let mut cols = if k == 1 { Vec::new() } else { vec![F::zero(); kk * hw] };
    for s in 0..n {
        let xs = &x.data()[s * ci * hw..(s + 1) * ci * hw];
        let rhs: &[F] = if k == 1 {
            xs
        } else {
            im2col(xs, ci, h, wd, k, &mut cols);
            &cols
        };
        let os = &mut out[s * co * hw..(s + 1) * co * hw];
        if let Some(b) = b {
            for (c, chunk) in os.chunks_exact_mut(hw).enumerate() {
                chunk.fill(b.data()[c]);
            }
        }
        let beta = if b.is_some() { F::one() } else { F::zero() };
        F::gemm(co, kk, hw, w.data(), kk as isize, 1, rhs, hw as isize, 1, beta, os, hw as isize, 1);
    }
    Tensor::new(vec![n, co, h, wd], out).expect("conv2d output shape")
}

/// Gradients of [`conv2d_forward`]; each output is computed only when requested.
pub fn conv2d_backward<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    gout: &Tensor<F>,
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> (Option<Tensor<F>>, Option<Tensor<F>>, Option<Tensor<F>>) {
    let (n, ci, h, wd) = dims4(x);
    let (co, _, k, _) = dims4(w);
    let hw = h * wd;
    let kk = ci * k * k;
    let mut dx = need_x.then(|| vec![F::zero(); n * ci * hw]);
    let mut dw = need_w.then(|| vec![F::zero(); co * kk]);
    let mut cols = vec![F::zero(); if k == 1 { 0 } else { kk * hw }];
    let mut dcols = vec![F::zero(); if k == 1 || !need_x { 0 } else { kk * hw }];
    for s in 0..n {
        let gs = &gout.data()[s * co * hw..(s + 1) * co * hw];
        let xs = &x.data()[s * ci * hw..(s + 1) * ci * hw];
        if let Some(dw) = dw.as_mut() {
            let rhs: &[F] = if k == 1 {
                xs
            } else {
                im2col(xs, ci, h, wd, k, &mut cols);
                &cols
            };
            // dW[co, kk] += g[co, hw] * cols^T[hw, kk]
            F::gemm(co, hw, kk, gs, hw as isize, 1, rhs, 1, hw as isize, F::one(), dw, kk as isize, 1);
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[s * ci * hw..(s + 1) * ci * hw];
            if k == 1 {
                F::gemm(kk, co, hw, w.data(), 1, kk as isize, gs, hw as isize, 1, F::zero(), dxs, hw as isize, 1);
            } else {
                F::gemm(kk, co, hw, w.data(), 1, kk as isize, gs, hw as isize, 1, F::zero(), &mut dcols, hw as isize, 1);
                col2im(&dcols, ci, h, wd, k, dxs);
            }
        }
    }
    let db = need_b.then(|| {
        let mut db = vec![F::zero(); co];
        for s in 0..n {
            for (c, chunk) in gout.data()[s * co * hw..(s + 1) * co * hw].chunks_exact(hw).enumerate() {
                db[c] += chunk.iter().copied().sum::<F>();
            }
        }
        Tensor::new(vec![co], db).unwrap()
    });
    (
        dx.map(|d| Tensor::new(x.shape().to_vec(), d).unwrap()),
        dw.map(|d| Tensor::new(w.shape().to_vec(), d).unwrap()),
        db,
    )
}

/// `y = x W^T + b` with `x [N, D]`, `w [O, D]`.
pub fn linear_forward<F: Scalar>(x: &Tensor<F>, w: &Tensor<F>, b: Option<&Tensor<F>>) -> Tensor<F> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let (o, wd) = (w.shape()[0], w.shape()[1]);
    assert_eq!(d, wd, "linear: input width {d} vs weight width {wd}");
    let mut out = vec![F::zero(); n * o];
    if let Some(b) = b {
        for row in out.chunks_exact_mut(o) {
            row.copy_from_slice(b.data());
        }
    }
    let beta = if b.is_some() { F::one() } else { F::zero() };
    F::gemm(n, d, o, x.data(), d as isize, 1, w.data(), 1, d as isize, beta, &mut out, o as isize, 1);
    Tensor::new(vec![n, o], out).unwrap()
}

pub fn linear_backward<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    gout: &Tensor<F>,
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> (Option<Tensor<F>>, Option<Tensor<F>>, Option<Tensor<F>>) {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let o = w.shape()[0];
    let dx = need_x.then(|| {
        let mut dx = vec![F::zero(); n * d];
        F::gemm(n, o, d, gout.data(), o as isize, 1, w.data(), d as isize, 1, F::zero(), &mut dx, d as isize, 1);
        Tensor::new(vec![n, d], dx).unwrap()
    });
    let dw = need_w.then(|| {
        let mut dw = vec![F::zero(); o * d];
        F::gemm(o, n, d, gout.data(), 1, o as isize, x.data(), d as isize, 1, F::zero(), &mut dw, d as isize, 1);
        Tensor::new(vec![o, d], dw).unwrap()
    });
    let db = need_b.then(|| {
        let mut db = vec![F::zero(); o];
        for row in gout.data().chunks_exact(o) {
            for (a, &g) in db.iter_mut().zip(row) {
                *a += g;
            }
        }
        Tensor::new(vec![o], db).unwrap()
    });
    (dx, dw, db)
}

/// 2x2 average pooling over the last two dims. Requires even `H` and `W`.
pub fn avg_pool2<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let (h, w) = x.hw();
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims, got {h}x{w}");
    let (oh, ow) = (h / 2, w / 2);
    let p = planes(x.shape());
    let quarter = F::of(0.25);
    let mut out = Vec::with_capacity(p * oh * ow);
    for plane in x.data().chunks_exact(h * w) {
        for y in 0..oh {
            let r0 = &plane[2 * y * w..(2 * y + 1) * w];
            let r1 = &plane[(2 * y + 1) * w..(2 * y + 2) * w];
            for xx in 0..ow {
                // pairwise order keeps avg(v, v, v, v) == v exactly
                let s = (r0[2 * xx] + r0[2 * xx + 1]) + (r1[2 * xx] + r1[2 * xx + 1]);
                out.push(s * quarter);
            }
        }
    }
    let mut shape = x.shape().to_vec();
    let n = shape.len();
    shape[n - 2] = oh;
    shape[n - 1] = ow;
    Tensor::new(shape, out).unwrap()
}

pub fn avg_pool2_backward<F: Scalar>(gout: &Tensor<F>) -> Tensor<F> {
    let g = upsample_nearest2(gout);
    let quarter = F::of(0.25);
    g.map(|v| v * quarter)
}

/// Nearest-neighbour x2 upsampling; right inverse of [`avg_pool2`].
pub fn upsample_nearest2<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let (h, w) = x.hw();
    let (oh, ow) = (2 * h, 2 * w);
    let p = planes(x.shape());
    let mut out = Vec::with_capacity(p * oh * ow);
    for plane in x.data().chunks_exact(h * w) {
        for y in 0..oh {
            let src = &plane[(y / 2) * w..(y / 2 + 1) * w];
            for xx in 0..ow {
                out.push(src[xx / 2]);
            }
        }
    }
    let mut shape = x.shape().to_vec();
    let n = shape.len();
    shape[n - 2] = oh;
    shape[n - 1] = ow;
    Tensor::new(shape, out).unwrap()
}

pub fn upsample_nearest2_backward<F: Scalar>(gout: &Tensor<F>) -> Tensor<F> {
    let (oh, ow) = gout.hw();
    let (h, w) = (oh / 2, ow / 2);
    let p = planes(gout.shape());
    let mut out = vec![F::zero(); p * h * w];
    for (plane, dst) in gout.data().chunks_exact(oh * ow).zip(out.chunks_exact_mut(h * w)) {
        for y in 0..oh {
            for xx in 0..ow {
                dst[(y / 2) * w + xx / 2] += plane[y * ow + xx];
            }
        }
    }
    let mut shape = gout.shape().to_vec();
    let n = shape.len();
    shape[n - 2] = h;
    shape[n - 1] = w;
    Tensor::new(shape, out).unwrap()
}

/// Source taps for x2 bilinear upsampling with half-pixel centres and edge clamping.
fn bilinear_taps(n: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * n)
        .map(|o| {
            let i = o / 2;
            if o % 2 == 0 {
                (i.saturating_sub(1), i, 0.25, 0.75)
            } else {
                (i, (i + 1).min(n - 1), 0.75, 0.25)
            }
        })
        .collect()
}

/// Bilinear x2 upsampling over the last two dims.
pub fn upsample_bilinear2<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let (h, w) = x.hw();
    let (oh, ow) = (2 * h, 2 * w);
    let tx: Vec<_> = bilinear_taps(w).into_iter().map(|(a, b, wa, wb)| (a, b, F::of(wa), F::of(wb))).collect();
    let ty: Vec<_> = bilinear_taps(h).into_iter().map(|(a, b, wa, wb)| (a, b, F::of(wa), F::of(wb))).collect();
    let p = planes(x.shape());
    let mut out = vec![F::zero(); p * oh * ow];
    let mut tmp = vec![F::zero(); h * ow];
    for (plane, dst) in x.data().chunks_exact(h * w).zip(out.chunks_exact_mut(oh * ow)) {
        for y in 0..h {
            let src = &plane[y * w..(y + 1) * w];
            for (xx, &(a, b, wa, wb)) in tx.iter().enumerate() {
                tmp[y * ow + xx] = wa * src[a] + wb * src[b];
            }
        }
        for (y, &(a, b, wa, wb)) in ty.iter().enumerate() {
            for xx in 0..ow {
                dst[y * ow + xx] = wa * tmp[a * ow + xx] + wb * tmp[b * ow + xx];
            }
        }
    }
    let mut shape = x.shape().to_vec();
    let n = shape.len();
    shape[n - 2] = oh;
    shape[n - 1] = ow;
    Tensor::new(shape, out).unwrap()
}

pub fn upsample_bilinear2_backward<F: Scalar>(gout: &Tensor<F>) -> Tensor<F> {
    let (oh, ow) = gout.hw();
    let (h, w) = (oh / 2, ow / 2);
    let tx: Vec<_> = bilinear_taps(w).into_iter().map(|(a, b, wa, wb)| (a, b, F::of(wa), F::of(wb))).collect();
    let ty: Vec<_> = bilinear_taps(h).into_iter().map(|(a, b, wa, wb)| (a, b, F::of(wa), F::of(wb))).collect();
    let p = planes(gout.shape());
    let mut out = vec![F::zero(); p * h * w];
    let mut tmp = vec![F::zero(); h * ow];
    for (plane, dst) in gout.data().chunks_exact(oh * ow).zip(out.chunks_exact_mut(h * w)) {
        tmp.iter_mut().for_each(|v| *v = F::zero());
        for (y, &(a, b, wa, wb)) in ty.iter().enumerate() {
            for xx in 0..ow {
                let g = plane[y * ow + xx];
                tmp[a * ow + xx] += wa * g;
                tmp[b * ow + xx] += wb * g;
            }
        }
        for y in 0..h {
            for (xx, &(a, b, wa, wb)) in tx.iter().enumerate() {
                let g = tmp[y * ow + xx];
                dst[y * w + a] += wa * g;
                dst[y * w + b] += wb * g;
            }
        }
    }
    let mut shape = gout.shape().to_vec();
    let n = shape.len();
    shape[n - 2] = h;
    shape[n - 1] = w;
    Tensor::new(shape, out).unwrap()
}

pub(crate) fn dims4<F: Scalar>(t: &Tensor<F>) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected a 4-d tensor, got {s:?}");
    (s[0], s[1], s[2], s[3])
}
