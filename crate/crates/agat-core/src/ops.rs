//! Pure tensor kernels: forward passes and their hand-derived adjoints.
//!
//! The graph engine wires these into the tape; the benchmark module reuses
//! the same forward kernels with gradients disabled, so train-time and
//! eval-time transforms are guaranteed to agree.

use rayon::prelude::*;

use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

/// [m,k] x [k,n] -> [m,n]
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0; m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let arow = &ad[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &bd[kk * n..(kk + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    Tensor::new(vec![m, n], out).unwrap()
}

/// u b^T: gradient to the left operand.
pub fn matmul_backward_a(b: &Tensor, u: &Tensor) -> Tensor {
    let (k, n) = (b.shape()[0], b.shape()[1]);
    let m = u.shape()[0];
    let (bd, ud) = (b.data(), u.data());
    let mut ga = vec![0.0; m * k];
    ga.par_chunks_mut(k).enumerate().for_each(|(i, row)| {
        let urow = &ud[i * n..(i + 1) * n];
        for (kk, g) in row.iter_mut().enumerate() {
            let brow = &bd[kk * n..(kk + 1) * n];
            *g = urow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    });
    Tensor::new(vec![m, k], ga).unwrap()
}

/// a^T u: gradient to the right operand.
pub fn matmul_backward_b(a: &Tensor, u: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = u.shape()[1];
    let (ad, ud) = (a.data(), u.data());
    let mut gb = vec![0.0; k * n];
    gb.par_chunks_mut(n).enumerate().for_each(|(kk, row)| {
        for i in 0..m {
            let av = ad[i * k + kk];
            let urow = &ud[i * n..(i + 1) * n];
            for (g, &uv) in row.iter_mut().zip(urow) {
                *g += av * uv;
            }
        }
    });
    Tensor::new(vec![k, n], gb).unwrap()
}

// ---------------------------------------------------------------------------
// conv2d (zero padding, stride 1 or 2)
// ---------------------------------------------------------------------------

pub fn conv2d_out_shape(x: &[usize], w: &[usize], stride: usize, pad: usize) -> [usize; 4] {
    let ho = (x[2] + 2 * pad - w[2]) / stride + 1;
    let wo = (x[3] + 2 * pad - w[3]) / stride + 1;
    [x[0], w[0], ho, wo]
}

pub fn conv2d(x: &Tensor, w: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Tensor {
    let [bsz, f, ho, wo] = conv2d_out_shape(x.shape(), w.shape(), stride, pad);
    let (c, h, wi) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kh, kw) = (w.shape()[2], w.shape()[3]);
    let (xd, wd, bd) = (x.data(), w.data(), bias.data());

    let mut out = vec![0.0; bsz * f * ho * wo];
    out.par_chunks_mut(f * ho * wo)
        .enumerate()
        .for_each(|(b, ob)| {
            for fi in 0..f {
                let of = &mut ob[fi * ho * wo..(fi + 1) * ho * wo];
                for yo in 0..ho {
                    let yi0 = (yo * stride) as isize - pad as isize;
                    for xo in 0..wo {
                        let xi0 = (xo * stride) as isize - pad as isize;
                        let mut acc = bd[fi];
                        for ci in 0..c {
                            let xoff = ((b * c + ci) * h) as isize;
                            let woff = ((fi * c + ci) * kh) as isize;
                            for i in 0..kh {
                                let yi = yi0 + i as isize;
                                if yi < 0 || yi >= h as isize {
                                    continue;
                                }
                                let j0 = (-xi0).max(0) as usize;
                                let j1 = (wi as isize - xi0).min(kw as isize).max(0) as usize;
                                if j0 >= j1 {
                                    continue;
                                }
                                let xrow = ((xoff + yi) as usize) * wi;
                                let wrow = ((woff + i as isize) as usize) * kw;
                                let xi_start = (xi0 + j0 as isize) as usize;
                                let xs = &xd[xrow + xi_start..xrow + xi_start + (j1 - j0)];
                                let ks = &wd[wrow + j0..wrow + j1];
                                acc += xs.iter().zip(ks).map(|(a, k)| a * k).sum::<f64>();
                            }
                        }
                        of[yo * wo + xo] = acc;
                    }
                }
            }
        });
    Tensor::new(vec![bsz, f, ho, wo], out).unwrap()
}

/// Gradient to the convolution input: scatter, one sample per task.
pub fn conv2d_backward_x(
    xshape: &[usize],
    w: &Tensor,
    u: &Tensor,
    stride: usize,
    pad: usize,
) -> Tensor {
    let (bsz, c, h, wi) = (xshape[0], xshape[1], xshape[2], xshape[3]);
    let (f, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (ho, wo) = (u.shape()[2], u.shape()[3]);
    let (wd, ud) = (w.data(), u.data());

    let mut gx = vec![0.0; bsz * c * h * wi];
    gx.par_chunks_mut(c * h * wi).enumerate().for_each(|(b, g)| {
        for fi in 0..f {
            let uoff = ((b * f + fi) * ho) * wo;
            for yo in 0..ho {
                let yi0 = (yo * stride) as isize - pad as isize;
                for xo in 0..wo {
                    let uv = ud[uoff + yo * wo + xo];
                    if uv == 0.0 {
                        continue;
                    }
                    let xi0 = (xo * stride) as isize - pad as isize;
                    for ci in 0..c {
                        for i in 0..kh {
                            let yi = yi0 + i as isize;
                            if yi < 0 || yi >= h as isize {
                                continue;
                            }
                            let grow = (ci * h + yi as usize) * wi;
                            let wrow = ((fi * c + ci) * kh + i) * kw;
                            let j0 = (-xi0).max(0) as usize;
                            let j1 = (wi as isize - xi0).min(kw as isize).max(0) as usize;
                            for j in j0..j1 {
                                g[grow + (xi0 + j as isize) as usize] += wd[wrow + j] * uv;
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::new(xshape.to_vec(), gx).unwrap()
}

/// Gradients to weights and bias: one filter per task, batch summed inside
/// in a fixed order.
pub fn conv2d_backward_wb(
    x: &Tensor,
    wshape: &[usize],
    u: &Tensor,
    stride: usize,
    pad: usize,
) -> (Tensor, Tensor) {
    let (bsz, c, h, wi) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (f, kh, kw) = (wshape[0], wshape[2], wshape[3]);
    let (ho, wo) = (u.shape()[2], u.shape()[3]);
    let (xd, ud) = (x.data(), u.data());

    let mut gw = vec![0.0; f * c * kh * kw];
    gw.par_chunks_mut(c * kh * kw)
        .enumerate()
        .for_each(|(fi, gfi)| {
            for b in 0..bsz {
                let uoff = ((b * f + fi) * ho) * wo;
                for ci in 0..c {
                    for i in 0..kh {
                        for yo in 0..ho {
                            let yi = (yo * stride) as isize - pad as isize + i as isize;
                            if yi < 0 || yi >= h as isize {
                                continue;
                            }
                            let urow = &ud[uoff + yo * wo..uoff + (yo + 1) * wo];
                            let xrow = ((b * c + ci) * h + yi as usize) * wi;
                            for j in 0..kw {
                                let mut acc = 0.0;
                                for (xo, &uv) in urow.iter().enumerate() {
                                    let xi = (xo * stride) as isize - pad as isize + j as isize;
                                    if xi >= 0 && xi < wi as isize {
                                        acc += uv * xd[xrow + xi as usize];
                                    }
                                }
                                gfi[(ci * kh + i) * kw + j] += acc;
                            }
                        }
                    }
                }
            }
        });

    let mut gb = vec![0.0; f];
    for b in 0..bsz {
        for (fi, g) in gb.iter_mut().enumerate() {
            let uoff = ((b * f + fi) * ho) * wo;
            *g += ud[uoff..uoff + ho * wo].iter().sum::<f64>();
        }
    }

    (
        Tensor::new(wshape.to_vec(), gw).unwrap(),
        Tensor::new(vec![f], gb).unwrap(),
    )
}

// ---------------------------------------------------------------------------
// max pool 2x2 stride 2
// ---------------------------------------------------------------------------

pub fn maxpool2(x: &Tensor) -> Tensor {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (ho, wo) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = vec![0.0; b * c * ho * wo];
    for bc in 0..b * c {
        let xoff = bc * h * w;
        let ooff = bc * ho * wo;
        for yo in 0..ho {
            for xo in 0..wo {
                let i = xoff + 2 * yo * w + 2 * xo;
                let m = xd[i].max(xd[i + 1]).max(xd[i + w]).max(xd[i + w + 1]);
                out[ooff + yo * wo + xo] = m;
            }
        }
    }
    Tensor::new(vec![b, c, ho, wo], out).unwrap()
}

/// Routes each upstream value to the first maximum in scan order.
pub fn maxpool2_backward(x: &Tensor, u: &Tensor) -> Tensor {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (ho, wo) = (h / 2, w / 2);
    let (xd, ud) = (x.data(), u.data());
    let mut gx = vec![0.0; b * c * h * w];
    for bc in 0..b * c {
        let xoff = bc * h * w;
        let ooff = bc * ho * wo;
        for yo in 0..ho {
            for xo in 0..wo {
                let i = xoff + 2 * yo * w + 2 * xo;
                let cand = [i, i + 1, i + w, i + w + 1];
                let mut best = cand[0];
                for &k in &cand[1..] {
                    if xd[k] > xd[best] {
                        best = k;
                    }
                }
                gx[best] += ud[ooff + yo * wo + xo];
            }
        }
    }
    Tensor::new(x.shape().to_vec(), gx).unwrap()
}

// ---------------------------------------------------------------------------
// softmax over the last dimension
// ---------------------------------------------------------------------------

pub fn softmax(x: &Tensor) -> Tensor {
    let k = *x.shape().last().unwrap();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

pub fn softmax_backward(y: &Tensor, u: &Tensor) -> Tensor {
    let k = *y.shape().last().unwrap();
    let mut gx = vec![0.0; y.len()];
    for ((grow, yrow), urow) in gx
        .chunks_mut(k)
        .zip(y.data().chunks(k))
        .zip(u.data().chunks(k))
    {
        let dot: f64 = yrow.iter().zip(urow).map(|(a, b)| a * b).sum();
        for ((g, &yv), &uv) in grow.iter_mut().zip(yrow).zip(urow) {
            *g = yv * (uv - dot);
        }
    }
    Tensor::new(y.shape().to_vec(), gx).unwrap()
}

// ---------------------------------------------------------------------------
// affine grid + bilinear grid sampling (align-corners convention)
// ---------------------------------------------------------------------------

/// theta rows [a,b,tx,c,d,ty] in normalized coordinates ([-1,1] spans the
/// image) -> sampling grid [B,H,W,2] with the last axis holding (gx,gy).
pub fn affine_grid(theta: &Tensor, h: usize, w: usize) -> Tensor {
    let b = theta.shape()[0];
    let td = theta.data();
    let mut out = vec![0.0; b * h * w * 2];
    for bi in 0..b {
        let t = &td[bi * 6..bi * 6 + 6];
        for yi in 0..h {
            let yt = norm_coord(yi, h);
            for xi in 0..w {
                let xt = norm_coord(xi, w);
                let o = ((bi * h + yi) * w + xi) * 2;
                out[o] = t[0] * xt + t[1] * yt + t[2];
                out[o + 1] = t[3] * xt + t[4] * yt + t[5];
            }
        }
    }
    Tensor::new(vec![b, h, w, 2], out).unwrap()
}

pub fn affine_grid_backward(u: &Tensor, h: usize, w: usize) -> Tensor {
    let b = u.shape()[0];
    let ud = u.data();
    let mut gt = vec![0.0; b * 6];
    for bi in 0..b {
        let g = &mut gt[bi * 6..bi * 6 + 6];
        for yi in 0..h {
            let yt = norm_coord(yi, h);
            for xi in 0..w {
                let xt = norm_coord(xi, w);
                let o = ((bi * h + yi) * w + xi) * 2;
                g[0] += ud[o] * xt;
                g[1] += ud[o] * yt;
                g[2] += ud[o];
                g[3] += ud[o + 1] * xt;
                g[4] += ud[o + 1] * yt;
                g[5] += ud[o + 1];
            }
        }
    }
    Tensor::new(vec![b, 6], gt).unwrap()
}

#[inline]
fn norm_coord(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}

#[inline]
fn unnorm(g: f64, n: usize) -> f64 {
    (g + 1.0) * 0.5 * (n - 1) as f64
}

/// Bilinear sampling of `x` [B,C,H,W] at `grid` [B,Hg,Wg,2]; coordinates
/// outside the image contribute zero (zero padding).
pub fn grid_sample(x: &Tensor, grid: &Tensor) -> Tensor {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (hg, wg) = (grid.shape()[1], grid.shape()[2]);
    let (xd, gd) = (x.data(), grid.data());
    let mut out = vec![0.0; b * c * hg * wg];
    out.par_chunks_mut(c * hg * wg)
        .enumerate()
        .for_each(|(bi, ob)| {
            for yo in 0..hg {
                for xo in 0..wg {
                    let o = ((bi * hg + yo) * wg + xo) * 2;
                    let ix = unnorm(gd[o], w);
                    let iy = unnorm(gd[o + 1], h);
                    let x0 = ix.floor();
                    let y0 = iy.floor();
                    let wx = ix - x0;
                    let wy = iy - y0;
                    let (x0, y0) = (x0 as isize, y0 as isize);
                    for ci in 0..c {
                        let plane = ((bi * c + ci) * h) * w;
                        let mut acc = 0.0;
                        for (dy, wyv) in [(0isize, 1.0 - wy), (1, wy)] {
                            let yy = y0 + dy;
                            if yy < 0 || yy >= h as isize {
                                continue;
                            }
                            for (dx, wxv) in [(0isize, 1.0 - wx), (1, wx)] {
                                let xx = x0 + dx;
                                if xx < 0 || xx >= w as isize {
                                    continue;
                                }
                                acc += wyv * wxv * xd[plane + yy as usize * w + xx as usize];
                            }
                        }
                        ob[(ci * hg + yo) * wg + xo] = acc;
                    }
                }
            }
        });
    Tensor::new(vec![b, c, hg, wg], out).unwrap()
}

/// Gradients to the sampled image and the sampling coordinates. Callers
/// discard whichever side is constant.
pub fn grid_sample_backward(x: &Tensor, grid: &Tensor, u: &Tensor) -> (Tensor, Tensor) {
    let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let (hg, wg) = (grid.shape()[1], grid.shape()[2]);
    let (xd, gd, ud) = (x.data(), grid.data(), u.data());
    let mut gx = vec![0.0; x.len()];
    let mut gg = vec![0.0; grid.len()];

    let per_x = c * h * w;
    let per_g = hg * wg * 2;
    gx.par_chunks_mut(per_x)
        .zip(gg.par_chunks_mut(per_g))
        .enumerate()
        .for_each(|(bi, (gxb, ggb))| {
            for yo in 0..hg {
                for xo in 0..wg {
                    let o = ((bi * hg + yo) * wg + xo) * 2;
                    let ix = unnorm(gd[o], w);
                    let iy = unnorm(gd[o + 1], h);
                    let x0f = ix.floor();
                    let y0f = iy.floor();
                    let wx = ix - x0f;
                    let wy = iy - y0f;
                    let (x0, y0) = (x0f as isize, y0f as isize);
                    let mut dix = 0.0;
                    let mut diy = 0.0;
                    for ci in 0..c {
                        let uv = ud[((bi * c + ci) * hg + yo) * wg + xo];
                        if uv == 0.0 {
                            continue;
                        }
                        let plane = (ci * h) * w;
                        let xplane = ((bi * c + ci) * h) * w;
                        let mut corner = [0.0; 4]; // y0x0, y0x1, y1x0, y1x1
                        for (k, (dy, dx)) in
                            [(0isize, 0isize), (0, 1), (1, 0), (1, 1)].iter().enumerate()
                        {
                            let yy = y0 + dy;
                            let xx = x0 + dx;
                            if yy < 0 || yy >= h as isize || xx < 0 || xx >= w as isize {
                                continue;
                            }
                            let idx = yy as usize * w + xx as usize;
                            corner[k] = xd[xplane + idx];
                            let wgt = (if *dy == 0 { 1.0 - wy } else { wy })
                                * (if *dx == 0 { 1.0 - wx } else { wx });
                            gxb[plane + idx] += wgt * uv;
                        }
                        dix += uv
                            * ((1.0 - wy) * (corner[1] - corner[0])
                                + wy * (corner[3] - corner[2]));
                        diy += uv
                            * ((1.0 - wx) * (corner[2] - corner[0])
                                + wx * (corner[3] - corner[1]));
                    }
                    ggb[(yo * wg + xo) * 2] = dix * 0.5 * (w - 1) as f64;
                    ggb[(yo * wg + xo) * 2 + 1] = diy * 0.5 * (h - 1) as f64;
                }
            }
        });
    (
        Tensor::new(x.shape().to_vec(), gx).unwrap(),
        Tensor::new(grid.shape().to_vec(), gg).unwrap(),
    )
}

/// Sampler theta realizing "rotate by `deg`, zoom by `scale`, then shift by
/// (tx,ty) pixels" on the image: the returned row is the inverse map fed to
/// `affine_grid`.
pub fn rts_theta(deg: f64, tx_px: f64, ty_px: f64, scale: f64, h: usize, w: usize) -> [f64; 6] {
    let th = deg.to_radians();
    let (s, c) = (th.sin(), th.cos());
    let tx = tx_px * 2.0 / (w.max(2) - 1) as f64;
    let ty = ty_px * 2.0 / (h.max(2) - 1) as f64;
    // inverse of p -> scale*R(th)*p + t is R(-th)/scale * (p - t)
    let inv = 1.0 / scale;
    [
        c * inv,
        s * inv,
        -(c * tx + s * ty) * inv,
        -s * inv,
        c * inv,
        (s * tx - c * ty) * inv,
    ]
}

pub const IDENTITY_THETA: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

/// Affine-warp a batch with one theta row per sample (no gradients).
pub fn warp_affine(x: &Tensor, thetas: &Tensor) -> Tensor {
    let grid = affine_grid(thetas, x.shape()[2], x.shape()[3]);
    grid_sample(x, &grid)
}

// ---------------------------------------------------------------------------
// separable Gaussian blur with differentiable sigma
// ---------------------------------------------------------------------------

pub const BLUR_MAX_RADIUS: usize = 7;
const BLUR_SIGMA_FLOOR: f64 = 1e-9;

/// Normalized kernel weights for radius `ceil(3*sigma)` capped at
/// [`BLUR_MAX_RADIUS`], plus their analytic d/dsigma (through the
/// normalizer). Sigma at or below the floor degenerates to the identity
/// kernel with zero derivative.
pub fn blur_kernel(sigma: f64) -> (Vec<f64>, Vec<f64>, usize) {
    let sigma = sigma.abs();
    if sigma <= BLUR_SIGMA_FLOOR {
        return (vec![1.0], vec![0.0], 0);
    }
    let r = ((3.0 * sigma).ceil() as usize).clamp(1, BLUR_MAX_RADIUS);
    let n = 2 * r + 1;
    let mut g = vec![0.0; n];
    let mut dg = vec![0.0; n];
    let inv2s2 = 1.0 / (2.0 * sigma * sigma);
    for (k, i) in (-(r as isize)..=r as isize).enumerate() {
        let i2 = (i * i) as f64;
        g[k] = (-i2 * inv2s2).exp();
        dg[k] = g[k] * i2 / (sigma * sigma * sigma);
    }
    let z: f64 = g.iter().sum();
    let dz: f64 = dg.iter().sum();
    let mut k = vec![0.0; n];
    let mut dk = vec![0.0; n];
    for i in 0..n {
        k[i] = g[i] / z;
        dk[i] = (dg[i] * z - g[i] * dz) / (z * z);
    }
    (k, dk, r)
}

#[inline]
fn clampi(v: isize, hi: usize) -> usize {
    v.clamp(0, hi as isize - 1) as usize
}

/// Correlate rows of one [H,W] plane with `k`, clamp-to-edge padding.
fn blur_rows_plane(src: &[f64], dst: &mut [f64], h: usize, w: usize, k: &[f64], r: usize) {
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        let orow = &mut dst[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (t, &kv) in k.iter().enumerate() {
                acc += kv * row[clampi(x as isize + t as isize - r as isize, w)];
            }
            orow[x] = acc;
        }
    }
}

fn blur_cols_plane(src: &[f64], dst: &mut [f64], h: usize, w: usize, k: &[f64], r: usize) {
    for y in 0..h {
        let orow = &mut dst[y * w..(y + 1) * w];
        for (t, &kv) in k.iter().enumerate() {
            let yy = clampi(y as isize + t as isize - r as isize, h);
            let srow = &src[yy * w..(yy + 1) * w];
            for (o, &s) in orow.iter_mut().zip(srow) {
                *o += kv * s;
            }
        }
    }
}

/// Exact adjoint of `blur_rows_plane` (scatter form of the clamp padding).
fn scatter_rows_plane(u: &[f64], dst: &mut [f64], h: usize, w: usize, k: &[f64], r: usize) {
    for y in 0..h {
        let urow = &u[y * w..(y + 1) * w];
        let orow = &mut dst[y * w..(y + 1) * w];
        for x in 0..w {
            let uv = urow[x];
            if uv == 0.0 {
                continue;
            }
            for (t, &kv) in k.iter().enumerate() {
                orow[clampi(x as isize + t as isize - r as isize, w)] += kv * uv;
            }
        }
    }
}

fn scatter_cols_plane(u: &[f64], dst: &mut [f64], h: usize, w: usize, k: &[f64], r: usize) {
    for y in 0..h {
        let urow = &u[y * w..(y + 1) * w];
        for (t, &kv) in k.iter().enumerate() {
            let yy = clampi(y as isize + t as isize - r as isize, h);
            let orow = &mut dst[yy * w..(yy + 1) * w];
            for (o, &uv) in orow.iter_mut().zip(urow) {
                *o += kv * uv;
            }
        }
    }
}

fn separable_pass(plane: &[f64], h: usize, w: usize, kr: &[f64], kc: &[f64], r: usize) -> Vec<f64> {
    let mut tmp = vec![0.0; h * w];
    blur_rows_plane(plane, &mut tmp, h, w, kr, r);
    let mut out = vec![0.0; h * w];
    blur_cols_plane(&tmp, &mut out, h, w, kc, r);
    out
}

/// Per-sample separable Gaussian blur; `sigma` holds one value per batch row.
pub fn gauss_blur(x: &Tensor, sigma: &[f64]) -> Tensor {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    assert_eq!(sigma.len(), b);
    let xd = x.data();
    let mut out = vec![0.0; x.len()];
    out.par_chunks_mut(c * h * w)
        .enumerate()
        .for_each(|(bi, ob)| {
            let (k, _, r) = blur_kernel(sigma[bi]);
            for ci in 0..c {
                let plane = &xd[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                let blurred = separable_pass(plane, h, w, &k, &k, r);
                ob[ci * h * w..(ci + 1) * h * w].copy_from_slice(&blurred);
            }
        });
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

/// Returns (grad_x, grad_sigma); each side is computed only when asked for.
pub fn gauss_blur_backward(
    x: &Tensor,
    sigma: &[f64],
    u: &Tensor,
    need_x: bool,
    need_sigma: bool,
) -> (Option<Tensor>, Option<Vec<f64>>) {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (xd, ud) = (x.data(), u.data());
    let mut gx = vec![0.0; if need_x { x.len() } else { b }];
    let mut gs = vec![0.0; b];
    let per = if need_x { c * h * w } else { 1 };
    gx.par_chunks_mut(per)
        .zip(gs.par_iter_mut())
        .enumerate()
        .for_each(|(bi, (gxb, gsb))| {
            let (k, dk, r) = blur_kernel(sigma[bi]);
            for ci in 0..c {
                let off = (bi * c + ci) * h * w;
                let plane = &xd[off..off + h * w];
                let up = &ud[off..off + h * w];

                if need_x {
                    // adjoint: scatter back through cols then rows
                    let mut t = vec![0.0; h * w];
                    scatter_cols_plane(up, &mut t, h, w, &k, r);
                    scatter_rows_plane(&t, &mut gxb[ci * h * w..(ci + 1) * h * w], h, w, &k, r);
                }

                // d(out)/d(sigma) = dKc(Kr x) + Kc(dKr x)
                if need_sigma && sigma[bi].abs() > BLUR_SIGMA_FLOOR {
                    let term1 = separable_pass(plane, h, w, &k, &dk, r);
                    let term2 = separable_pass(plane, h, w, &dk, &k, r);
                    *gsb += up
                        .iter()
                        .zip(term1.iter().zip(&term2))
                        .map(|(uv, (a, b))| uv * (a + b))
                        .sum::<f64>();
                }
            }
        });
    (
        need_x.then(|| Tensor::new(x.shape().to_vec(), gx).unwrap()),
        need_sigma.then_some(gs),
    )
}

// ---------------------------------------------------------------------------
// soft shape rasterizer (disc / square / triangle)
// ---------------------------------------------------------------------------

pub const SHAPE_KINDS: usize = 3;

/// Implicit distance of shape `kind` at offset (dx,dy) from the center, with
/// partials wrt dx, dy, and the radius parameter. Negative inside.
pub fn shape_distance(kind: usize, dx: f64, dy: f64, r: f64) -> (f64, f64, f64, f64) {
    match kind {
        // disc: ||p|| - r
        0 => {
            let l = (dx * dx + dy * dy).sqrt();
            if l < 1e-12 {
                (-r, 0.0, 0.0, -1.0)
            } else {
                (l - r, dx / l, dy / l, -1.0)
            }
        }
        // square: Chebyshev distance, half-side r
        1 => {
            let (ax, ay) = (dx.abs(), dy.abs());
            if ax >= ay {
                (ax - r, dx.signum(), 0.0, -1.0)
            } else {
                (ay - r, 0.0, dy.signum(), -1.0)
            }
        }
        // equilateral triangle, exact SDF with branch-consistent partials
        _ => {
            let k = 3.0f64.sqrt();
            let sx = if dx >= 0.0 { 1.0 } else { -1.0 };
            let p1x = dx.abs() - r;
            let p1y = dy + r / k;
            // jacobian rows: d p2{x,y} / d(dx, dy, r)
            let (p2x, p2y, mut jx, jy);
            if p1x + k * p1y > 0.0 {
                p2x = (p1x - k * p1y) / 2.0;
                p2y = (-k * p1x - p1y) / 2.0;
                jx = [0.5 * sx, -k / 2.0, -1.0];
                jy = [-k / 2.0 * sx, -0.5, k / 2.0 - 1.0 / (2.0 * k)];
            } else {
                p2x = p1x;
                p2y = p1y;
                jx = [sx, 0.0, -1.0];
                jy = [0.0, 1.0, 1.0 / k];
            }
            let p3y = p2y;
            let p3x;
            if p2x < -2.0 * r {
                p3x = p2x + 2.0 * r;
                jx[2] += 2.0;
            } else if p2x <= 0.0 {
                p3x = 0.0;
                jx = [0.0, 0.0, 0.0];
            } else {
                p3x = p2x;
            }
            let l = (p3x * p3x + p3y * p3y).sqrt();
            if l < 1e-12 {
                return (0.0, 0.0, 0.0, 0.0);
            }
            let sgn = if p3y >= 0.0 { 1.0 } else { -1.0 };
            let dd_p3x = -sgn * p3x / l;
            let dd_p3y = -sgn * p3y / l;
            (
                -l * sgn,
                dd_p3x * jx[0] + dd_p3y * jy[0],
                dd_p3x * jx[1] + dd_p3y * jy[1],
                dd_p3x * jx[2] + dd_p3y * jy[2],
            )
        }
    }
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone)]
pub struct RasterParams {
    pub height: usize,
    pub width: usize,
    /// Radius in pixels of a size-1.0 shape.
    pub base_radius: f64,
    /// Edge softness in pixels.
    pub tau: f64,
}

impl Default for RasterParams {
    fn default() -> Self {
        RasterParams {
            height: 64,
            width: 64,
            base_radius: 12.0,
            tau: 1.5,
        }
    }
}

/// alpha rows are [cx, cy, size, logit_disc, logit_square, logit_triangle]
/// with (cx,cy) in [-1,1] image coordinates; colors is [B,3]. Output
/// [B,3,H,W]: sigmoid coverage of each shape blended by the logit softmax,
/// times the class color.
pub fn soft_shapes(alpha: &Tensor, colors: &Tensor, p: &RasterParams) -> Tensor {
    let b = alpha.shape()[0];
    let (h, w) = (p.height, p.width);
    let (ad, cd) = (alpha.data(), colors.data());
    let mut out = vec![0.0; b * 3 * h * w];
    out.par_chunks_mut(3 * h * w).enumerate().for_each(|(bi, ob)| {
        let a = &ad[bi * 6..bi * 6 + 6];
        let col = &cd[bi * 3..bi * 3 + 3];
        let mx = (a[0] + 1.0) * 0.5 * (w - 1) as f64;
        let my = (a[1] + 1.0) * 0.5 * (h - 1) as f64;
        let r = a[2] * p.base_radius;
        let wts = logit_softmax([a[3], a[4], a[5]]);
        for y in 0..h {
            let dy = y as f64 - my;
            for x in 0..w {
                let dx = x as f64 - mx;
                let mut cov = 0.0;
                for (kind, &wk) in wts.iter().enumerate() {
                    let (d, _, _, _) = shape_distance(kind, dx, dy, r);
                    cov += wk * sigmoid(-d / p.tau);
                }
                for ch in 0..3 {
                    ob[(ch * h + y) * w + x] = col[ch] * cov;
                }
            }
        }
    });
    Tensor::new(vec![b, 3, h, w], out).unwrap()
}

/// Gradient of a scalar through `soft_shapes` wrt alpha.
pub fn soft_shapes_backward(
    alpha: &Tensor,
    colors: &Tensor,
    p: &RasterParams,
    u: &Tensor,
) -> Tensor {
    let b = alpha.shape()[0];
    let (h, w) = (p.height, p.width);
    let (ad, cd, ud) = (alpha.data(), colors.data(), u.data());
    let mut ga = vec![0.0; b * 6];
    ga.par_chunks_mut(6).enumerate().for_each(|(bi, g)| {
        let a = &ad[bi * 6..bi * 6 + 6];
        let col = &cd[bi * 3..bi * 3 + 3];
        let ub = &ud[bi * 3 * h * w..(bi + 1) * 3 * h * w];
        let mx = (a[0] + 1.0) * 0.5 * (w - 1) as f64;
        let my = (a[1] + 1.0) * 0.5 * (h - 1) as f64;
        let r = a[2] * p.base_radius;
        let wts = logit_softmax([a[3], a[4], a[5]]);
        let mut s = [0.0; SHAPE_KINDS]; // sum over pixels of dcov * cov_k
        for y in 0..h {
            let dy = y as f64 - my;
            for x in 0..w {
                let dx = x as f64 - mx;
                let mut dcov = 0.0;
                for ch in 0..3 {
                    dcov += ub[(ch * h + y) * w + x] * col[ch];
                }
                if dcov == 0.0 {
                    continue;
                }
                for (kind, &wk) in wts.iter().enumerate() {
                    let (d, ddx, ddy, dr) = shape_distance(kind, dx, dy, r);
                    let c = sigmoid(-d / p.tau);
                    s[kind] += dcov * c;
                    let dd = dcov * wk * c * (1.0 - c) * (-1.0 / p.tau);
                    g[0] += dd * ddx * (-0.5 * (w - 1) as f64);
                    g[1] += dd * ddy * (-0.5 * (h - 1) as f64);
                    g[2] += dd * dr * p.base_radius;
                }
            }
        }
        let dot: f64 = wts.iter().zip(&s).map(|(a, b)| a * b).sum();
        for kind in 0..SHAPE_KINDS {
            g[3 + kind] = wts[kind] * (s[kind] - dot);
        }
    });
    Tensor::new(vec![b, 6], ga).unwrap()
}

/// Smallest distance (in pixels) of any coverage-relevant pixel to a branch
/// boundary of the shape distances. Gradient checks resample attribute
/// vectors whose margin is too small, since finite differences straddling a
/// kink are meaningless.
pub fn soft_shapes_kink_margin(alpha_row: &[f64], p: &RasterParams) -> f64 {
    let (h, w) = (p.height, p.width);
    let mx = (alpha_row[0] + 1.0) * 0.5 * (w - 1) as f64;
    let my = (alpha_row[1] + 1.0) * 0.5 * (h - 1) as f64;
    let r = alpha_row[2] * p.base_radius;
    let k = 3.0f64.sqrt();
    let band = 15.0 * p.tau;
    let mut margin = f64::INFINITY;
    for y in 0..h {
        let dy = y as f64 - my;
        for x in 0..w {
            let dx = x as f64 - mx;
            // disc center
            let l = (dx * dx + dy * dy).sqrt();
            if (l - r).abs() < band {
                margin = margin.min(l);
            }
            // square diagonal
            if (dx.abs().max(dy.abs()) - r).abs() < band {
                margin = margin.min((dx.abs() - dy.abs()).abs());
            }
            // triangle branch boundaries
            let p1x = dx.abs() - r;
            let p1y = dy + r / k;
            let refl = p1x + k * p1y;
            let (p2x, p2y) = if refl > 0.0 {
                ((p1x - k * p1y) / 2.0, (-k * p1x - p1y) / 2.0)
            } else {
                (p1x, p1y)
            };
            let p3x = p2x - p2x.clamp(-2.0 * r, 0.0);
            let d3 = (p3x * p3x + p2y * p2y).sqrt();
            if d3 < band {
                margin = margin
                    .min(refl.abs())
                    .min(p2x.abs())
                    .min((p2x + 2.0 * r).abs())
                    .min(dx.abs());
            }
        }
    }
    margin
}

fn logit_softmax(l: [f64; 3]) -> [f64; 3] {
    let m = l[0].max(l[1]).max(l[2]);
    let e = [(l[0] - m).exp(), (l[1] - m).exp(), (l[2] - m).exp()];
    let z = e[0] + e[1] + e[2];
    [e[0] / z, e[1] / z, e[2] / z]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_all_ones() {
        let a = Tensor::filled(&[2, 3], 1.0);
        let b = Tensor::filled(&[3, 2], 1.0);
        let c = matmul(&a, &b);
        assert_eq!(c.shape(), &[2, 2]);
        assert!(c.data().iter().all(|&v| (v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn conv_matches_hand_computation() {
        // 1x1x3x3 input, single 2x2 filter, stride 1, no pad
        let x = Tensor::new(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let w = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = conv2d(&x, &w, &b, 1, 0);
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[6.0, 8.0, 12.0, 14.0]);
    }

    #[test]
    fn conv_stride2_with_padding_shape() {
        let x = Tensor::zeros(&[2, 3, 64, 64]);
        let w = Tensor::zeros(&[8, 3, 3, 3]);
        let b = Tensor::zeros(&[8]);
        let y = conv2d(&x, &w, &b, 2, 1);
        assert_eq!(y.shape(), &[2, 8, 32, 32]);
    }

    #[test]
    fn softmax_uniform_rows() {
        let s = softmax(&Tensor::new(vec![1, 4], vec![0.0; 4]).unwrap());
        assert!(s.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn identity_grid_reproduces_image() {
        let x = Tensor::new(vec![1, 1, 5, 7], (0..35).map(|i| i as f64 / 35.0).collect()).unwrap();
        let theta = Tensor::new(vec![1, 6], IDENTITY_THETA.to_vec()).unwrap();
        let y = warp_affine(&x, &theta);
        assert!(x.max_abs_diff(&y) < 1e-12);
    }

    #[test]
    fn integer_translation_is_index_shift() {
        let mut img = Tensor::zeros(&[1, 1, 8, 8]);
        img.data_mut()[8 * 3 + 4] = 1.0;
        // sampler theta shifting content 2 pixels right
        let theta = Tensor::new(
            vec![1, 6],
            rts_theta(0.0, 2.0, 0.0, 1.0, 8, 8).to_vec(),
        )
        .unwrap();
        let y = warp_affine(&img, &theta);
        let mut expect = Tensor::zeros(&[1, 1, 8, 8]);
        expect.data_mut()[8 * 3 + 6] = 1.0;
        assert!(y.max_abs_diff(&expect) < 1e-9);
    }

    #[test]
    fn four_quarter_turns_compose_to_identity() {
        let mut img = Tensor::zeros(&[1, 1, 9, 9]);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = ((i * 37) % 101) as f64 / 101.0;
        }
        let theta = Tensor::new(vec![1, 6], rts_theta(90.0, 0.0, 0.0, 1.0, 9, 9).to_vec()).unwrap();
        let mut y = img.clone();
        for _ in 0..4 {
            y = warp_affine(&y, &theta);
        }
        assert!(img.max_abs_diff(&y) < 1e-5 * 4.0);
    }

    #[test]
    fn blur_kernel_rows_sum_to_one() {
        for &s in &[0.2, 0.5, 0.9, 1.7, 2.6, 3.0] {
            let (k, _, _) = blur_kernel(s);
            let z: f64 = k.iter().sum();
            assert!((z - 1.0).abs() < 1e-12, "sigma {} sums to {}", s, z);
        }
    }

    #[test]
    fn blur_preserves_constant_image() {
        let x = Tensor::filled(&[1, 1, 10, 12], 0.6);
        let y = gauss_blur(&x, &[1.3]);
        assert!(x.max_abs_diff(&y) < 1e-12);
    }

    #[test]
    fn tiny_sigma_blur_is_identity() {
        let x = Tensor::new(vec![1, 1, 4, 4], (0..16).map(|i| i as f64 / 16.0).collect()).unwrap();
        let y = gauss_blur(&x, &[1e-6]);
        assert!(x.max_abs_diff(&y) < 1e-6);
    }

    #[test]
    fn disc_coverage_matches_analytic_area() {
        use std::f64::consts::PI;
        let p = RasterParams::default();
        let colors = Tensor::new(vec![1, 3], vec![1.0, 1.0, 1.0]).unwrap();
        for &size in &[0.6, 0.9, 1.2] {
            let alpha =
                Tensor::new(vec![1, 6], vec![0.0, 0.0, size, 8.0, 0.0, 0.0]).unwrap();
            let img = soft_shapes(&alpha, &colors, &p);
            let r = size * p.base_radius;
            let area = PI * r * r;
            // binarized foreground count against the disc area
            let count = img.data()[..64 * 64].iter().filter(|&&v| v > 0.5).count() as f64;
            assert!(
                (count - area).abs() / area < 0.05,
                "size {}: count {} vs area {}",
                size,
                count,
                area
            );
            // raw sigmoid mass carries the soft edge: area + pi^3 tau^2 / 3
            let mass: f64 = img.data()[..64 * 64].iter().sum();
            let expected = area + PI.powi(3) * p.tau * p.tau / 3.0;
            assert!(
                (mass - expected).abs() / expected < 0.02,
                "size {}: mass {} vs {}",
                size,
                mass,
                expected
            );
        }
    }

    #[test]
    fn uniform_logits_blend_is_average_of_pure_shapes() {
        let p = RasterParams::default();
        let colors = Tensor::new(vec![1, 3], vec![0.8, 0.4, 0.2]).unwrap();
        let mk = |logits: [f64; 3]| {
            let mut a = Tensor::zeros(&[1, 6]);
            a.data_mut()
                .copy_from_slice(&[0.1, -0.2, 0.9, logits[0], logits[1], logits[2]]);
            soft_shapes(&a, &colors, &p)
        };
        let blend = mk([0.0, 0.0, 0.0]);
        let pure: Vec<Tensor> = (0..3)
            .map(|k| {
                let mut l = [-60.0; 3];
                l[k] = 60.0;
                mk(l)
            })
            .collect();
        for i in 0..blend.len() {
            let avg = (pure[0].data()[i] + pure[1].data()[i] + pure[2].data()[i]) / 3.0;
            assert!((blend.data()[i] - avg).abs() < 1e-9);
        }
    }
}
