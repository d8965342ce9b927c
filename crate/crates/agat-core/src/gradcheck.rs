//! Central finite-difference verification of every differentiable path.
//!
//! The estimator here is the independent oracle the rest of the crate is
//! judged against: it never calls [`Graph::backward`]. Random probe inputs
//! are drawn from the deterministic [`Rng`] and are resampled away from
//! non-smooth points (ReLU kinks, pooling ties, bilinear cell boundaries,
//! blur radius jumps, rasterizer branch creases) before differencing.

use crate::error::{AgatError, Result};
use crate::graph::{Graph, NodeId};
use crate::losses;
use crate::models::{ArchId, Classifier};
use crate::ops::{self, RasterParams};
use crate::rng::Rng;
use crate::surrogates::SurrogateSpec;
use crate::tensor::Tensor;

pub const DEFAULT_H: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;
/// Sampling margin that keeps probes away from kinks.
pub const KINK_MARGIN: f64 = 1e-3;

/// Central-difference estimate (f(x+h e_i) - f(x-h e_i)) / 2h per
/// coordinate.
pub fn finite_difference_gradient(
    f: &mut dyn FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    h: f64,
) -> Result<Tensor> {
    assert!(h > 0.0, "step must be positive");
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(AgatError::non_finite(
                "finite_difference_gradient",
                format!("coordinate {}: f+={} f-={}", i, fp, fm),
            ));
        }
        grad.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Same estimate restricted to the listed coordinates (for large parameter
/// tensors where the full sweep would dominate runtime).
pub fn finite_difference_at(
    f: &mut dyn FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    h: f64,
    coords: &[usize],
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(coords.len());
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}

/// |a - b| / max(|a|, |b|, floor). The floor keeps noise on near-zero
/// gradients from masquerading as relative error.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

pub fn max_relative_error(analytic: &Tensor, fd: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(fd.data())
        .map(|(&a, &b)| relative_error(a, b))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_err: f64,
    pub checks: usize,
}

impl CheckOutcome {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// A differentiable scalar function of one tensor, expressed as a graph
/// builder so both value and analytic gradient come from the same tape.
type BuildFn<'a> = &'a dyn Fn(&mut Graph, NodeId) -> Result<NodeId>;

fn check_one(name: &str, build: BuildFn, x: &Tensor, h: f64) -> Result<CheckOutcome> {
    let mut g = Graph::new();
    let xn = g.leaf(x.clone(), true, "probe");
    let out = build(&mut g, xn)?;
    let grads = g.backward(out)?;
    let analytic = grads.grad(xn).clone();

    let mut eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let xn = g.leaf(t.clone(), false, "probe");
        let out = build(&mut g, xn)?;
        Ok(g.value(out).item())
    };
    let fd = finite_difference_gradient(&mut eval, x, h)?;
    Ok(CheckOutcome {
        name: name.to_string(),
        max_rel_err: max_relative_error(&analytic, &fd),
        checks: x.len(),
    })
}

fn merge(into: &mut Vec<CheckOutcome>, o: CheckOutcome) {
    if let Some(existing) = into.iter_mut().find(|c| c.name == o.name) {
        existing.max_rel_err = existing.max_rel_err.max(o.max_rel_err);
        existing.checks += o.checks;
    } else {
        into.push(o);
    }
}

fn rand_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.range(-2.0, 2.0)).collect(),
    )
    .unwrap()
}

/// Uniform in [-2,2] with |v| >= margin (for kinks at zero).
fn rand_tensor_away_from_zero(rng: &mut Rng, shape: &[usize], margin: f64) -> Tensor {
    let mut t = rand_tensor(rng, shape);
    for v in t.data_mut() {
        if v.abs() < margin {
            *v = margin * if *v >= 0.0 { 1.0 } else { -1.0 } + *v;
        }
    }
    t
}

/// 2x2 pooling cells get a unique maximum with a clear gap.
fn rand_pool_input(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let mut t = rand_tensor(rng, shape);
    let (h, w) = (shape[2], shape[3]);
    let planes = shape[0] * shape[1];
    for p in 0..planes {
        let off = p * h * w;
        for yo in 0..h / 2 {
            for xo in 0..w / 2 {
                let i = off + 2 * yo * w + 2 * xo;
                let cell = [i, i + 1, i + w, i + w + 1];
                let mut best = cell[0];
                for &c in &cell[1..] {
                    if t.data()[c] > t.data()[best] {
                        best = c;
                    }
                }
                t.data_mut()[best] += 10.0 * KINK_MARGIN;
            }
        }
    }
    t
}

/// Grid whose pixel-space coordinates sit well inside bilinear cells and
/// away from the image border.
fn rand_grid(rng: &mut Rng, b: usize, hg: usize, wg: usize, h: usize, w: usize) -> Tensor {
    let n = b * hg * wg * 2;
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let extent = if i % 2 == 0 { w } else { h };
        // integer cell then interior offset
        let cell = rng.below(extent - 1) as f64;
        let frac = rng.range(5.0 * KINK_MARGIN, 1.0 - 5.0 * KINK_MARGIN);
        let px = cell + frac;
        data.push(px / (extent - 1) as f64 * 2.0 - 1.0);
    }
    Tensor::new(vec![b, hg, wg, 2], data).unwrap()
}

/// Blur sigma away from zero and from the ceil(3 sigma) radius jumps.
fn rand_sigma(rng: &mut Rng, n: usize) -> Tensor {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let s = rng.range(0.2, 2.2);
        let dist_to_jump = (s * 3.0 - (s * 3.0).round()).abs() / 3.0;
        if dist_to_jump > 1e-2 {
            out.push(s);
        }
    }
    Tensor::from_vec(out)
}

/// Affine theta near a generic transform, resampled until every sampling
/// coordinate clears the bilinear margins.
fn rand_affine_theta(rng: &mut Rng, b: usize, h: usize, w: usize) -> Tensor {
    loop {
        let mut rows = Vec::with_capacity(b * 6);
        for _ in 0..b {
            let rot = rng.range(-0.6, 0.6);
            let scale = rng.range(0.8, 1.25);
            let (s, c) = (rot.sin() / scale, rot.cos() / scale);
            rows.extend_from_slice(&[
                c,
                -s,
                rng.range(-0.3, 0.3),
                s,
                c,
                rng.range(-0.3, 0.3),
            ]);
        }
        let theta = Tensor::new(vec![b, 6], rows).unwrap();
        let grid = ops::affine_grid(&theta, h, w);
        let ok = grid.data().chunks(2).all(|p| {
            let ix = (p[0] + 1.0) * 0.5 * (w - 1) as f64;
            let iy = (p[1] + 1.0) * 0.5 * (h - 1) as f64;
            let fr = |v: f64| (v - v.round()).abs();
            // clear of lattice lines; crossing the border is fine as long as
            // the border itself is not straddled
            fr(ix) > 2.0 * KINK_MARGIN && fr(iy) > 2.0 * KINK_MARGIN
        });
        if ok {
            return theta;
        }
    }
}

fn rand_soft_alpha(rng: &mut Rng, b: usize, p: &RasterParams) -> Tensor {
    let mut rows = Vec::with_capacity(b * 6);
    let mut row = [0.0; 6];
    let mut placed = 0;
    while placed < b {
        row[0] = rng.range(-0.5, 0.5);
        row[1] = rng.range(-0.5, 0.5);
        row[2] = rng.range(0.5, 1.3);
        row[3] = rng.range(-1.5, 1.5);
        row[4] = rng.range(-1.5, 1.5);
        row[5] = rng.range(-1.5, 1.5);
        if ops::soft_shapes_kink_margin(&row, p) > 5.0 * KINK_MARGIN {
            rows.extend_from_slice(&row);
            placed += 1;
        }
    }
    Tensor::new(vec![b, 6], rows).unwrap()
}

/// Gradient checks for every graph primitive. `repeats` random draws per
/// primitive; the spec-level property test uses 50, the CLI default 8.
pub fn check_primitives(rng: &mut Rng, repeats: usize, h: f64) -> Result<Vec<CheckOutcome>> {
    let mut out: Vec<CheckOutcome> = Vec::new();
    for _ in 0..repeats {
        let a = rand_tensor(rng, &[2, 3]);
        let b = rand_tensor(rng, &[2, 3]);

        let bc = b.clone();
        merge(
            &mut out,
            check_one(
                "primitives.add",
                &|g, x| {
                    let c = g.constant(bc.clone());
                    let s = g.add(x, c)?;
                    g.sq_norm(s)
                },
                &a,
                h,
            )?,
        );
        let bc = b.clone();
        merge(
            &mut out,
            check_one(
                "primitives.sub",
                &|g, x| {
                    let c = g.constant(bc.clone());
                    let s = g.sub(c, x)?;
                    g.sq_norm(s)
                },
                &a,
                h,
            )?,
        );
        let bc = b.clone();
        merge(
            &mut out,
            check_one(
                "primitives.mul",
                &|g, x| {
                    let c = g.constant(bc.clone());
                    let s = g.mul(x, c)?;
                    g.sq_norm(s)
                },
                &a,
                h,
            )?,
        );
        merge(
            &mut out,
            check_one(
                "primitives.mul_const",
                &|g, x| {
                    let s = g.mul_const(x, -1.7)?;
                    g.sq_norm(s)
                },
                &a,
                h,
            )?,
        );

        let m = rand_tensor(rng, &[3, 4]);
        let mc = m.clone();
        merge(
            &mut out,
            check_one(
                "primitives.matmul",
                &|g, x| {
                    let c = g.constant(mc.clone());
                    let s = g.matmul(x, c)?;
                    g.sq_norm(s)
                },
                &rand_tensor(rng, &[2, 3]),
                h,
            )?,
        );
        // right operand too
        let lhs = rand_tensor(rng, &[2, 3]);
        let lc = lhs.clone();
        merge(
            &mut out,
            check_one(
                "primitives.matmul",
                &|g, x| {
                    let c = g.constant(lc.clone());
                    let s = g.matmul(c, x)?;
                    g.sq_norm(s)
                },
                &m,
                h,
            )?,
        );

        let bias = rand_tensor(rng, &[4]);
        let xc = rand_tensor(rng, &[3, 4]);
        let xcc = xc.clone();
        merge(
            &mut out,
            check_one(
                "primitives.add_bias",
                &|g, x| {
                    let c = g.constant(xcc.clone());
                    let s = g.add_bias(c, x)?;
                    g.sq_norm(s)
                },
                &bias,
                h,
            )?,
        );

        // conv2d stride 1 and 2, zero padding; check x and w paths
        for &(stride, pad) in &[(1usize, 0usize), (2, 1)] {
            let x = rand_tensor(rng, &[2, 2, 6, 6]);
            let w = rand_tensor(rng, &[3, 2, 3, 3]);
            let bs = rand_tensor(rng, &[3]);
            let (wc, bc1) = (w.clone(), bs.clone());
            merge(
                &mut out,
                check_one(
                    "primitives.conv2d",
                    &|g, xin| {
                        let wn = g.constant(wc.clone());
                        let bn = g.constant(bc1.clone());
                        let c = g.conv2d(xin, wn, bn, stride, pad)?;
                        g.sq_norm(c)
                    },
                    &x,
                    h,
                )?,
            );
            let (xcl, bc2) = (x.clone(), bs.clone());
            merge(
                &mut out,
                check_one(
                    "primitives.conv2d",
                    &|g, win| {
                        let xn = g.constant(xcl.clone());
                        let bn = g.constant(bc2.clone());
                        let c = g.conv2d(xn, win, bn, stride, pad)?;
                        g.sq_norm(c)
                    },
                    &w,
                    h,
                )?,
            );
        }

        merge(
            &mut out,
            check_one(
                "primitives.relu",
                &|g, x| {
                    let r = g.relu(x)?;
                    g.sq_norm(r)
                },
                &rand_tensor_away_from_zero(rng, &[2, 5], KINK_MARGIN),
                h,
            )?,
        );
        merge(
            &mut out,
            check_one(
                "primitives.sigmoid",
                &|g, x| {
                    let r = g.sigmoid(x)?;
                    g.sq_norm(r)
                },
                &a,
                h,
            )?,
        );
        merge(
            &mut out,
            check_one(
                "primitives.softmax",
                &|g, x| {
                    let r = g.softmax(x)?;
                    g.sq_norm(r)
                },
                &a,
                h,
            )?,
        );
        // log needs strictly positive inputs with margin for the fd step
        let pos = rand_tensor(rng, &[2, 3]).map(|v| v.abs() + 0.1);
        merge(
            &mut out,
            check_one(
                "primitives.log",
                &|g, x| {
                    let r = g.log(x)?;
                    g.sq_norm(r)
                },
                &pos,
                h,
            )?,
        );
        merge(
            &mut out,
            check_one(
                "primitives.exp",
                &|g, x| {
                    let r = g.exp(x)?;
                    g.sq_norm(r)
                },
                &a,
                h,
            )?,
        );
        merge(&mut out, check_one("primitives.sum", &|g, x| g.sum(x), &a, h)?);
        merge(
            &mut out,
            check_one("primitives.mean", &|g, x| g.mean(x), &a, h)?,
        );
        merge(
            &mut out,
            check_one("primitives.sq_norm", &|g, x| g.sq_norm(x), &a, h)?,
        );
        merge(
            &mut out,
            check_one(
                "primitives.max_pool2",
                &|g, x| {
                    let r = g.max_pool2(x)?;
                    g.sq_norm(r)
                },
                &rand_pool_input(rng, &[1, 2, 4, 4]),
                h,
            )?,
        );

        // affine grid alone (grid output squared-norm)
        merge(
            &mut out,
            check_one(
                "primitives.affine_grid",
                &|g, t| {
                    let grid = g.affine_grid(t, 5, 6)?;
                    g.sq_norm(grid)
                },
                &rand_affine_theta(rng, 1, 5, 6),
                h,
            )?,
        );

        // grid sample: image path and coordinate path
        let img = rand_tensor(rng, &[1, 2, 6, 6]);
        let grid = rand_grid(rng, 1, 4, 4, 6, 6);
        let gc = grid.clone();
        merge(
            &mut out,
            check_one(
                "primitives.grid_sample",
                &|g, x| {
                    let gn = g.constant(gc.clone());
                    let s = g.grid_sample(x, gn)?;
                    g.sq_norm(s)
                },
                &img,
                h,
            )?,
        );
        let ic = img.clone();
        merge(
            &mut out,
            check_one(
                "primitives.grid_sample",
                &|g, gn| {
                    let x = g.constant(ic.clone());
                    let s = g.grid_sample(x, gn)?;
                    g.sq_norm(s)
                },
                &grid,
                h,
            )?,
        );

        // gaussian blur: image path and sigma path
        let img = rand_tensor(rng, &[2, 1, 7, 7]).map(|v| (v + 2.0) / 4.0);
        let sigma = rand_sigma(rng, 2);
        let sc = sigma.clone();
        merge(
            &mut out,
            check_one(
                "primitives.gauss_blur",
                &|g, x| {
                    let sn = g.constant(sc.clone());
                    let s = g.gauss_blur(x, sn)?;
                    g.sq_norm(s)
                },
                &img,
                h,
            )?,
        );
        let ic = img.clone();
        merge(
            &mut out,
            check_one(
                "primitives.gauss_blur",
                &|g, sn| {
                    let x = g.constant(ic.clone());
                    let s = g.gauss_blur(x, sn)?;
                    g.sq_norm(s)
                },
                &sigma,
                h,
            )?,
        );

        merge(
            &mut out,
            check_one(
                "primitives.broadcast_scalar",
                &|g, s| {
                    let b = g.broadcast_scalar(s, &[2, 3])?;
                    let q = g.mul(b, b)?;
                    g.sum(q)
                },
                &Tensor::scalar(rng.range(-2.0, 2.0)),
                h,
            )?,
        );
        merge(
            &mut out,
            check_one(
                "primitives.slice_col",
                &|g, x| {
                    let c = g.slice_col(x, 1)?;
                    g.sq_norm(c)
                },
                &rand_tensor(rng, &[3, 4]),
                h,
            )?,
        );
        let imgc = rand_tensor(rng, &[2, 1, 3, 3]);
        let icc = imgc.clone();
        merge(
            &mut out,
            check_one(
                "primitives.scale_per_sample",
                &|g, s| {
                    let x = g.constant(icc.clone());
                    let o = g.scale_per_sample(x, s)?;
                    g.sq_norm(o)
                },
                &rand_tensor(rng, &[2]),
                h,
            )?,
        );

        // soft shapes rasterizer
        let p = RasterParams {
            height: 24,
            width: 24,
            base_radius: 6.0,
            tau: 1.5,
        };
        let alpha = rand_soft_alpha(rng, 1, &p);
        let colors = Tensor::new(vec![1, 3], vec![0.9, 0.5, 0.2]).unwrap();
        let (pc, cc) = (p.clone(), colors.clone());
        merge(
            &mut out,
            check_one(
                "primitives.soft_shapes",
                &|g, al| {
                    let c = g.constant(cc.clone());
                    let img = g.soft_shapes(al, c, pc.clone())?;
                    g.sq_norm(img)
                },
                &alpha,
                h,
            )?,
        );

        // fused cross-entropy
        let logits = rand_tensor(rng, &[3, 5]);
        let target = {
            let mut t = Tensor::zeros(&[3, 5]);
            for b in 0..3 {
                t.data_mut()[b * 5 + rng.below(5)] = 1.0;
            }
            t
        };
        let tc = target.clone();
        merge(
            &mut out,
            check_one(
                "primitives.cross_entropy",
                &|g, l| {
                    let t = g.constant(tc.clone());
                    g.cross_entropy(l, t)
                },
                &logits,
                h,
            )?,
        );
    }
    Ok(out)
}

/// Kink-aware sampled central difference: coordinates whose +-h probes land
/// in different branch regions (ReLU sign flips, pool argmax changes,
/// sampling cell changes) are skipped, and the skipped fraction is bounded.
/// Returns (per-coordinate errors vs analytic, skipped count).
fn fd_sampled_with_signature(
    eval: &mut dyn FnMut(&Tensor) -> Result<(f64, u64)>,
    x: &Tensor,
    analytic: &Tensor,
    coords: &[usize],
    h: f64,
) -> Result<(f64, usize, usize)> {
    let mut probe = x.clone();
    let mut max_err: f64 = 0.0;
    let mut skipped = 0;
    let mut kept = 0;
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let (fp, sig_p) = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let (fm, sig_m) = eval(&probe)?;
        probe.data_mut()[i] = orig;
        if sig_p != sig_m {
            skipped += 1;
            continue;
        }
        let fd = (fp - fm) / (2.0 * h);
        max_err = max_err.max(relative_error(analytic.data()[i], fd));
        kept += 1;
    }
    Ok((max_err, kept, skipped))
}

/// Model forwards: sampled input coordinates and sampled coordinates of
/// every parameter tensor, with kink-straddling probes excluded.
pub fn check_models(rng: &mut Rng, h: f64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for arch in [ArchId::MnistCnn, ArchId::ShapesCnn, ArchId::CifarCnn] {
        let model = Classifier::build(arch, 977)?;
        let name = format!("models.{}", arch.name());
        let [c, hh, ww] = model.input_shape;
        let x = rand_tensor(rng, &[1, c, hh, ww]).map(|v| (v + 2.0) / 4.0);

        // analytic gradients for input and parameters in one pass
        let mut g = Graph::new();
        let xn = g.leaf(x.clone(), true, "probe");
        let fwd = model.forward(&mut g, xn, true)?;
        let loss = g.mean(fwd.logits)?;
        let grads = g.backward(loss)?;
        let gx = grads.grad(xn).clone();

        let mut max_err: f64 = 0.0;
        let mut checks = 0;
        let mut skipped_total = 0;

        // d(mean logit)/dx on sampled pixels
        let coords: Vec<usize> = (0..256).map(|_| rng.below(x.len())).collect();
        let mc = model.clone();
        let mut eval = |t: &Tensor| -> Result<(f64, u64)> {
            let mut g = Graph::new();
            let xn = g.constant(t.clone());
            let f = mc.forward(&mut g, xn, false)?;
            let m = g.mean(f.logits)?;
            Ok((g.value(m).item(), g.nonsmooth_signature()))
        };
        let (err, kept, skipped) = fd_sampled_with_signature(&mut eval, &x, &gx, &coords, h)?;
        max_err = max_err.max(err);
        checks += kept;
        skipped_total += skipped;

        // sampled parameter coordinates
        for (pi, param) in model.params().iter().enumerate() {
            let analytic = grads.grad(fwd.params[pi]).clone();
            let coords: Vec<usize> = (0..4.min(param.value.len()))
                .map(|_| rng.below(param.value.len()))
                .collect();
            let mut mutable = model.clone();
            let mut eval = |t: &Tensor| -> Result<(f64, u64)> {
                mutable.set_param(pi, t.clone());
                let mut g = Graph::new();
                let xn = g.constant(x.clone());
                let f = mutable.forward(&mut g, xn, false)?;
                let m = g.mean(f.logits)?;
                Ok((g.value(m).item(), g.nonsmooth_signature()))
            };
            let (err, kept, skipped) =
                fd_sampled_with_signature(&mut eval, &param.value, &analytic, &coords, h)?;
            max_err = max_err.max(err);
            checks += kept;
            skipped_total += skipped;
        }

        // a suite where most probes straddle kinks would prove nothing
        if skipped_total * 5 > (checks + skipped_total) {
            return Err(AgatError::Train(format!(
                "{}: {} of {} fd probes straddled kinks",
                name,
                skipped_total,
                checks + skipped_total
            )));
        }
        merge(
            &mut out,
            CheckOutcome {
                name,
                max_rel_err: max_err,
                checks,
            },
        );
    }
    Ok(out)
}

/// Surrogate application: d(scalar of F(x, alpha)) / d alpha against fd,
/// with alpha kept a margin inside its bounds.
pub fn check_surrogates(rng: &mut Rng, h: f64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();

    // affine STN on a smooth random image
    let spec = SurrogateSpec::affine_stn();
    let x = rand_tensor(rng, &[1, 1, 9, 9]).map(|v| (v + 2.0) / 4.0);
    let x = ops::gauss_blur(&x, &[1.0]); // smooth so bilinear is well-behaved
    let alpha = rand_affine_theta(rng, 1, 9, 9);
    let xc = x.clone();
    let sp = spec.clone();
    merge(
        &mut out,
        check_one(
            "surrogates.affine",
            &|g, al| {
                let xn = g.constant(xc.clone());
                let y = sp.apply_graph(g, xn, al, None)?;
                g.sq_norm(y)
            },
            &alpha,
            h,
        )?,
    );

    // blur + noise, both attribute coordinates
    let spec = SurrogateSpec::blur_noise();
    let x = rand_tensor(rng, &[2, 1, 8, 8]).map(|v| (v + 2.0) / 4.0);
    let noise = {
        let mut n = Tensor::zeros(&[2, 1, 8, 8]);
        rng.fill_normal(n.data_mut());
        n
    };
    let sig = rand_sigma(rng, 2);
    let alpha = Tensor::new(
        vec![2, 2],
        vec![
            sig.data()[0],
            rng.range(0.01, 0.25),
            sig.data()[1],
            rng.range(0.01, 0.25),
        ],
    )
    .unwrap();
    let (xc, nc, sp) = (x.clone(), noise.clone(), spec.clone());
    merge(
        &mut out,
        check_one(
            "surrogates.blur_noise",
            &|g, al| {
                let xn = g.constant(xc.clone());
                let y = sp.apply_graph(g, xn, al, Some(&nc))?;
                g.sq_norm(y)
            },
            &alpha,
            h,
        )?,
    );

    // soft shapes
    let spec = SurrogateSpec::soft_shapes();
    let p = spec.raster_params();
    let alpha = rand_soft_alpha(rng, 1, &p);
    let colors = Tensor::new(vec![1, 3], vec![0.2, 0.7, 0.9]).unwrap();
    let sp = spec.clone();
    let cc = colors.clone();
    merge(
        &mut out,
        check_one(
            "surrogates.soft_shapes",
            &|g, al| {
                let xn = g.constant(cc.clone());
                let y = sp.apply_graph(g, xn, al, None)?;
                g.sq_norm(y)
            },
            &alpha,
            h,
        )?,
    );

    Ok(out)
}

/// Loss gradients wrt their differentiable arguments.
pub fn check_losses(rng: &mut Rng, h: f64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();

    let z_gen = rand_tensor(rng, &[3, 6]);
    let z = rand_tensor(rng, &[3, 6]);
    let zc = z.clone();
    merge(
        &mut out,
        check_one(
            "losses.l_feat",
            &|g, zg| {
                let zs = g.constant(zc.clone());
                losses::l_feat(g, zs, zg)
            },
            &z_gen,
            h,
        )?,
    );

    let a_src = rand_tensor(rng, &[3, 4]);
    let a_gen = rand_tensor(rng, &[3, 4]);
    let (ac, zc2, zg2) = (a_src.clone(), z.clone(), z_gen.clone());
    merge(
        &mut out,
        check_one(
            "losses.l_const",
            &|g, ag| {
                let asrc = g.constant(ac.clone());
                let zs = g.constant(zc2.clone());
                let zg = g.constant(zg2.clone());
                losses::l_const(
                    g,
                    zs,
                    zg,
                    asrc,
                    ag,
                    &losses::LossWeights {
                        lambda1: 0.5,
                        lambda2: 0.5,
                        beta: 0.25,
                    },
                )
            },
            &a_gen,
            h,
        )?,
    );

    // l_cls_agat wrt generated logits; y one-hot, y_hat an arbitrary
    // distribution
    let logits = rand_tensor(rng, &[4, 6]);
    let y = losses::one_hot(&[0, 2, 5, 1], 6);
    let y_hat = {
        let raw = rand_tensor(rng, &[4, 6]);
        ops::softmax(&raw)
    };
    let (yc, yh) = (y.clone(), y_hat.clone());
    merge(
        &mut out,
        check_one(
            "losses.l_cls_agat",
            &|g, lg| {
                let yn = g.constant(yc.clone());
                let yhn = g.constant(yh.clone());
                losses::l_cls_agat(g, lg, yn, yhn, true)
            },
            &logits,
            h,
        )?,
    );

    let yc = y.clone();
    merge(
        &mut out,
        check_one(
            "losses.l_ce",
            &|g, lg| {
                let yn = g.constant(yc.clone());
                losses::l_ce(g, lg, yn)
            },
            &logits,
            h,
        )?,
    );

    // full agat objective wrt alpha-like vector through a tiny linear map
    let w = rand_tensor(rng, &[4, 6]);
    let alpha = rand_tensor(rng, &[2, 4]);
    let a_srcv = rand_tensor(rng, &[2, 4]);
    let yv = losses::one_hot(&[1, 3], 6);
    let yhv = ops::softmax(&rand_tensor(rng, &[2, 6]));
    let (wc, asc, yvc, yhc) = (w.clone(), a_srcv.clone(), yv.clone(), yhv.clone());
    merge(
        &mut out,
        check_one(
            "losses.l_agat",
            &|g, al| {
                let wn = g.constant(wc.clone());
                let logits = g.matmul(al, wn)?;
                let yn = g.constant(yvc.clone());
                let yhn = g.constant(yhc.clone());
                let cls = losses::l_cls_agat(g, logits, yn, yhn, true)?;
                let asn = g.constant(asc.clone());
                let zeros = g.constant(Tensor::zeros(&[2, 3]));
                let zeros2 = g.constant(Tensor::zeros(&[2, 3]));
                let konst = losses::l_const(
                    g,
                    zeros,
                    zeros2,
                    asn,
                    al,
                    &losses::LossWeights {
                        lambda1: 1.0,
                        lambda2: 1.0,
                        beta: 5.0,
                    },
                )?;
                losses::l_agat(g, cls, konst, 5.0)
            },
            &alpha,
            h,
        )?,
    );

    Ok(out)
}

/// The full default suite. `filter` keeps only checks whose name contains
/// the given substring (e.g. "surrogates.affine").
pub fn run_suite(seed: u64, repeats: usize, filter: Option<&str>) -> Result<Vec<CheckOutcome>> {
    let mut rng = Rng::new(seed);
    let mut all = Vec::new();
    all.extend(check_primitives(&mut rng, repeats, DEFAULT_H)?);
    all.extend(check_models(&mut rng, DEFAULT_H)?);
    all.extend(check_surrogates(&mut rng, DEFAULT_H)?);
    all.extend(check_losses(&mut rng, DEFAULT_H)?);
    if let Some(f) = filter {
        all.retain(|c| c.name.contains(f));
    }
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_of_linear_function_is_ones() {
        let x = Tensor::from_vec(vec![0.3, -1.0, 2.0]);
        let mut f = |t: &Tensor| -> Result<f64> { Ok(t.data().iter().sum()) };
        let g = finite_difference_gradient(&mut f, &x, 1e-5).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn fd_of_sum_of_squares_matches_closed_form() {
        let x = Tensor::from_vec(vec![1.0, -2.0, 3.0]);
        let mut f = |t: &Tensor| -> Result<f64> { Ok(t.data().iter().map(|v| v * v).sum()) };
        let g = finite_difference_gradient(&mut f, &x, 1e-5).unwrap();
        let expect = [2.0, -4.0, 6.0];
        for (a, b) in g.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn fd_of_sigmoid_at_zero() {
        let x = Tensor::from_vec(vec![0.0]);
        let mut f = |t: &Tensor| -> Result<f64> { Ok(1.0 / (1.0 + (-t.data()[0]).exp())) };
        let g = finite_difference_gradient(&mut f, &x, 1e-5).unwrap();
        assert!((g.data()[0] - 0.25).abs() < 1e-8);
    }

    #[test]
    fn fd_rejects_non_finite_values() {
        let x = Tensor::from_vec(vec![0.0]);
        let mut f = |t: &Tensor| -> Result<f64> { Ok(t.data()[0].ln()) };
        assert!(finite_difference_gradient(&mut f, &x, 1e-5).is_err());
    }

    #[test]
    fn injected_wrong_sign_gradient_is_detected() {
        // a sign-flipped gradient must blow past the tolerance
        let fd = Tensor::from_vec(vec![2.0 * 0.7, 2.0 * -0.4]);
        let mutated = fd.map(|v| -v);
        assert!(max_relative_error(&mutated, &fd) > DEFAULT_TOL);
        assert!(max_relative_error(&fd, &fd) < DEFAULT_TOL);
    }
}
