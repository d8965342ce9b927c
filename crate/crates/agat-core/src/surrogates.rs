//! Differentiable attribute-parameterized image manipulators F(x, alpha).
//!
//! Three families ship: the affine spatial-transformer path, the blur+noise
//! composition, and the soft-rasterized shapes renderer that fills the
//! semantic-surrogate slot (the generative-model surrogate is an interface
//! slot with the same apply/init/project contract, not a shipped model).
//! All of them are pure given (x, alpha, frozen noise) and differentiable in
//! alpha through the graph engine.

use crate::data::SampleAttrs;
use crate::error::{AgatError, Result};
use crate::graph::{Graph, NodeId};
use crate::ops::{self, RasterParams};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurrogateId {
    AffineStn,
    BlurNoise,
    NoiseOnly,
    BlurOnly,
    SoftShapes,
}

impl SurrogateId {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "affine-stn" => Ok(SurrogateId::AffineStn),
            "blur-noise" => Ok(SurrogateId::BlurNoise),
            "noise-only" => Ok(SurrogateId::NoiseOnly),
            "blur-only" => Ok(SurrogateId::BlurOnly),
            "soft-shapes" => Ok(SurrogateId::SoftShapes),
            other => Err(AgatError::Config(format!(
                "unknown surrogate id '{}'",
                other
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SurrogateId::AffineStn => "affine-stn",
            SurrogateId::BlurNoise => "blur-noise",
            SurrogateId::NoiseOnly => "noise-only",
            SurrogateId::BlurOnly => "blur-only",
            SurrogateId::SoftShapes => "soft-shapes",
        }
    }
}

/// A surrogate with its attribute dimensionality, per-coordinate bounds box
/// (the epsilon-ball of the worst-case problem), and initialization rule.
#[derive(Debug, Clone)]
pub struct SurrogateSpec {
    pub id: SurrogateId,
    pub d_alpha: usize,
    /// Per-coordinate [lo, hi]; projection clamps into this box.
    pub bounds: Vec<(f64, f64)>,
    pub init_jitter: f64,
    raster: Option<RasterParams>,
}

impl SurrogateSpec {
    /// Rows are the six sampler-matrix entries [a,b,tx,c,d,ty]. The box
    /// keeps the induced rotation inside +-60 degrees (|sin| <= 0.87), the
    /// zoom inside 0.5..1.5 (diagonal entries of the inverse map), and the
    /// translation inside 12 px on a 28x28 frame.
    pub fn affine_stn() -> Self {
        let rot = 60f64.to_radians().sin();
        let t = 12.0 / 14.0;
        SurrogateSpec {
            id: SurrogateId::AffineStn,
            d_alpha: 6,
            bounds: vec![
                (1.0 / 1.5, 2.0),
                (-rot, rot),
                (-t, t),
                (-rot, rot),
                (1.0 / 1.5, 2.0),
                (-t, t),
            ],
            init_jitter: 0.05,
            raster: None,
        }
    }

    /// alpha = [blur sigma in pixels, noise sigma in intensity units].
    pub fn blur_noise() -> Self {
        SurrogateSpec {
            id: SurrogateId::BlurNoise,
            d_alpha: 2,
            bounds: vec![(0.0, 3.0), (0.0, 0.3)],
            init_jitter: 0.0,
            raster: None,
        }
    }

    /// blur-noise with the blur coordinate pinned to zero.
    pub fn noise_only() -> Self {
        let mut s = Self::blur_noise();
        s.id = SurrogateId::NoiseOnly;
        s.bounds[0] = (0.0, 0.0);
        s
    }

    /// blur-noise with the noise coordinate pinned to zero.
    pub fn blur_only() -> Self {
        let mut s = Self::blur_noise();
        s.id = SurrogateId::BlurOnly;
        s.bounds[1] = (0.0, 0.0);
        s
    }

    /// alpha = [cx, cy, size, shape logits x3]; the class color is supplied
    /// per sample, not part of alpha. Position bounds keep every shape size
    /// fully inside the frame.
    pub fn soft_shapes() -> Self {
        SurrogateSpec {
            id: SurrogateId::SoftShapes,
            d_alpha: 6,
            bounds: vec![
                (-0.45, 0.45),
                (-0.45, 0.45),
                (0.4, 1.4),
                (-4.0, 4.0),
                (-4.0, 4.0),
                (-4.0, 4.0),
            ],
            init_jitter: 0.05,
            raster: Some(RasterParams::default()),
        }
    }

    pub fn from_id(id: SurrogateId) -> Self {
        match id {
            SurrogateId::AffineStn => Self::affine_stn(),
            SurrogateId::BlurNoise => Self::blur_noise(),
            SurrogateId::NoiseOnly => Self::noise_only(),
            SurrogateId::BlurOnly => Self::blur_only(),
            SurrogateId::SoftShapes => Self::soft_shapes(),
        }
    }

    pub fn raster_params(&self) -> RasterParams {
        self.raster.clone().unwrap_or_default()
    }

    pub fn uses_frozen_noise(&self) -> bool {
        matches!(
            self.id,
            SurrogateId::BlurNoise | SurrogateId::NoiseOnly | SurrogateId::BlurOnly
        )
    }

    /// The attribute vector of the untouched source sample, used both as the
    /// reference in the attribute-divergence loss and as the identity check.
    pub fn source_alpha(&self, batch: usize, attrs: Option<&[SampleAttrs]>) -> Tensor {
        match self.id {
            SurrogateId::AffineStn => {
                let mut t = Tensor::zeros(&[batch, 6]);
                for b in 0..batch {
                    t.data_mut()[b * 6..b * 6 + 6].copy_from_slice(&ops::IDENTITY_THETA);
                }
                t
            }
            SurrogateId::BlurNoise | SurrogateId::NoiseOnly | SurrogateId::BlurOnly => {
                Tensor::zeros(&[batch, 2])
            }
            SurrogateId::SoftShapes => {
                let attrs = attrs.expect("soft-shapes needs per-sample attribute metadata");
                let mut t = Tensor::zeros(&[batch, 6]);
                for (b, a) in attrs.iter().take(batch).enumerate() {
                    let row = &mut t.data_mut()[b * 6..b * 6 + 6];
                    row[0] = a.cx;
                    row[1] = a.cy;
                    row[2] = a.size;
                    // one-hot shape logits at a representative magnitude
                    row[3 + a.shape] = 3.0;
                }
                t
            }
        }
    }

    /// Initialization rule: affine starts at identity plus uniform jitter,
    /// blur-noise at [0.5, 0.02], soft-shapes at the source attributes plus
    /// jitter. Always projected into bounds.
    pub fn init_alpha(
        &self,
        batch: usize,
        attrs: Option<&[SampleAttrs]>,
        rng: &mut Rng,
    ) -> Tensor {
        let mut alpha = match self.id {
            SurrogateId::AffineStn | SurrogateId::SoftShapes => {
                self.source_alpha(batch, attrs)
            }
            SurrogateId::BlurNoise | SurrogateId::NoiseOnly | SurrogateId::BlurOnly => {
                let mut t = Tensor::zeros(&[batch, 2]);
                for b in 0..batch {
                    t.data_mut()[b * 2] = 0.5;
                    t.data_mut()[b * 2 + 1] = 0.02;
                }
                t
            }
        };
        if self.init_jitter > 0.0 {
            for v in alpha.data_mut() {
                *v += rng.range(-self.init_jitter, self.init_jitter);
            }
        }
        self.project(&mut alpha);
        alpha
    }

    /// Coordinatewise clamp into the bounds box; idempotent.
    pub fn project(&self, alpha: &mut Tensor) {
        let d = self.d_alpha;
        for row in alpha.data_mut().chunks_mut(d) {
            for (v, &(lo, hi)) in row.iter_mut().zip(&self.bounds) {
                *v = v.clamp(lo, hi);
            }
        }
    }

    pub fn in_bounds(&self, alpha: &Tensor) -> bool {
        let d = self.d_alpha;
        alpha.data().chunks(d).all(|row| {
            row.iter()
                .zip(&self.bounds)
                .all(|(v, &(lo, hi))| *v >= lo && *v <= hi)
        })
    }

    fn check_alpha(&self, alpha: &Tensor, batch: usize) -> Result<()> {
        if alpha.shape() != [batch, self.d_alpha] {
            return Err(AgatError::shape(
                "surrogate apply",
                format!(
                    "{} wants alpha [{},{}], got {:?}",
                    self.id.name(),
                    batch,
                    self.d_alpha,
                    alpha.shape()
                ),
            ));
        }
        Ok(())
    }

    /// Build F(x, alpha) on the graph. For soft-shapes, `x` is the [B,3]
    /// per-sample color matrix (the rendered image depends on alpha only);
    /// for the blur family `frozen_noise` must hold the per-event standard
    /// normal draw of the image shape.
    pub fn apply_graph(
        &self,
        g: &mut Graph,
        x: NodeId,
        alpha: NodeId,
        frozen_noise: Option<&Tensor>,
    ) -> Result<NodeId> {
        let batch = g.value(x).shape()[0];
        self.check_alpha(g.value(alpha), batch)?;
        match self.id {
            SurrogateId::AffineStn => {
                let (h, w) = (g.value(x).shape()[2], g.value(x).shape()[3]);
                let grid = g.affine_grid(alpha, h, w)?;
                g.grid_sample(x, grid)
            }
            SurrogateId::BlurNoise | SurrogateId::NoiseOnly | SurrogateId::BlurOnly => {
                let noise = frozen_noise.ok_or_else(|| {
                    AgatError::Config("blur-noise surrogate needs frozen noise".into())
                })?;
                if noise.shape() != g.value(x).shape() {
                    return Err(AgatError::shape(
                        "apply_blur_noise",
                        format!(
                            "noise {:?} vs image {:?}",
                            noise.shape(),
                            g.value(x).shape()
                        ),
                    ));
                }
                let sigma = g.slice_col(alpha, 0)?;
                if g.value(sigma).data().iter().any(|&s| s < 0.0) {
                    return Err(AgatError::Config(
                        "negative blur sigma reached apply_blur_noise".into(),
                    ));
                }
                let blurred = g.gauss_blur(x, sigma)?;
                let amp = g.slice_col(alpha, 1)?;
                let nn = g.constant(noise.clone());
                let scaled = g.scale_per_sample(nn, amp)?;
                g.add(blurred, scaled)
            }
            SurrogateId::SoftShapes => {
                let p = self.raster_params();
                g.soft_shapes(alpha, x, p)
            }
        }
    }

    /// Pure forward (no gradients). Outputs are NOT clamped to [0,1]; that
    /// happens at export/append time only.
    pub fn apply(
        &self,
        x: &Tensor,
        alpha: &Tensor,
        frozen_noise: Option<&Tensor>,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let an = g.constant(alpha.clone());
        let out = self.apply_graph(&mut g, xn, an, frozen_noise)?;
        Ok(g.value(out).clone())
    }
}

/// Affine warp with per-sample theta rows (pure helper).
pub fn apply_affine(x: &Tensor, alpha: &Tensor) -> Tensor {
    ops::warp_affine(x, alpha)
}

/// Blur + additive frozen noise (pure helper).
pub fn apply_blur_noise(x: &Tensor, alpha: &Tensor, frozen_noise: &Tensor) -> Tensor {
    let b = x.shape()[0];
    let sigma: Vec<f64> = (0..b).map(|i| alpha.data()[i * 2]).collect();
    let mut out = ops::gauss_blur(x, &sigma);
    let per = x.len() / b;
    for bi in 0..b {
        let amp = alpha.data()[bi * 2 + 1];
        for (o, n) in out.data_mut()[bi * per..(bi + 1) * per]
            .iter_mut()
            .zip(&frozen_noise.data()[bi * per..(bi + 1) * per])
        {
            *o += amp * n;
        }
    }
    out
}

/// Soft-rasterized shapes from attributes and per-sample colors (pure
/// helper).
pub fn apply_soft_shapes(alpha: &Tensor, colors: &Tensor, p: &RasterParams) -> Tensor {
    ops::soft_shapes(alpha, colors, p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smooth_image(rng: &mut Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let raw = Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform()).collect()).unwrap();
        ops::gauss_blur(&raw, &vec![0.8; shape[0]])
    }

    #[test]
    fn affine_identity_reproduces_input() {
        let mut rng = Rng::new(1);
        let x = smooth_image(&mut rng, &[2, 1, 12, 12]);
        let spec = SurrogateSpec::affine_stn();
        let alpha = spec.source_alpha(2, None);
        let y = spec.apply(&x, &alpha, None).unwrap();
        assert!(x.max_abs_diff(&y) < 1e-9);
    }

    #[test]
    fn pure_translation_preserves_total_intensity() {
        // one bright blob well inside the frame, shifted 3 px
        let mut x = Tensor::zeros(&[1, 1, 16, 16]);
        for y in 6..10 {
            for xx in 6..10 {
                x.data_mut()[y * 16 + xx] = 0.9;
            }
        }
        let theta = Tensor::new(
            vec![1, 6],
            ops::rts_theta(0.0, 3.0, -2.0, 1.0, 16, 16).to_vec(),
        )
        .unwrap();
        let y = apply_affine(&x, &theta);
        let s0: f64 = x.data().iter().sum();
        let s1: f64 = y.data().iter().sum();
        assert!((s0 - s1).abs() < 1e-6, "{} vs {}", s0, s1);
    }

    #[test]
    fn blur_noise_near_zero_alpha_is_identity() {
        let mut rng = Rng::new(2);
        let x = smooth_image(&mut rng, &[1, 1, 8, 8]);
        let spec = SurrogateSpec::blur_noise();
        let alpha = Tensor::new(vec![1, 2], vec![1e-6, 0.0]).unwrap();
        let noise = Tensor::filled(&[1, 1, 8, 8], 3.33);
        let y = spec.apply(&x, &alpha, Some(&noise)).unwrap();
        assert!(x.max_abs_diff(&y) < 1e-6);
    }

    #[test]
    fn noise_amplitude_matches_statistical_oracle() {
        // zero image, alpha = [0, 0.1], batch 64 of 32x32x3
        let b = 64;
        let x = Tensor::zeros(&[b, 3, 32, 32]);
        let mut noise = Tensor::zeros(&[b, 3, 32, 32]);
        let mut rng = Rng::new(7);
        rng.fill_normal(noise.data_mut());
        let mut alpha = Tensor::zeros(&[b, 2]);
        for i in 0..b {
            alpha.data_mut()[i * 2 + 1] = 0.1;
        }
        let y = apply_blur_noise(&x, &alpha, &noise);
        let n = y.len() as f64;
        let mean: f64 = y.data().iter().sum::<f64>() / n;
        let var: f64 = y.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        assert!((0.095..=0.105).contains(&std), "std {}", std);
    }

    #[test]
    fn blur_is_total_variation_contraction() {
        let tv = |t: &Tensor| -> f64 {
            let (h, w) = (t.shape()[2], t.shape()[3]);
            let d = t.data();
            let mut s = 0.0;
            for y in 0..h {
                for x in 0..w {
                    if x + 1 < w {
                        s += (d[y * w + x + 1] - d[y * w + x]).abs();
                    }
                    if y + 1 < h {
                        s += (d[(y + 1) * w + x] - d[y * w + x]).abs();
                    }
                }
            }
            s
        };
        let mut rng = Rng::new(3);
        for trial in 0..20 {
            let x = Tensor::new(
                vec![1, 1, 12, 12],
                (0..144).map(|_| rng.uniform()).collect(),
            )
            .unwrap();
            let sigma = rng.range(0.3, 2.5);
            let y = ops::gauss_blur(&x, &[sigma]);
            assert!(
                tv(&y) <= tv(&x) + 1e-9,
                "trial {} sigma {}: {} > {}",
                trial,
                sigma,
                tv(&y),
                tv(&x)
            );
        }
    }

    #[test]
    fn soft_shapes_centroid_tracks_cx() {
        let spec = SurrogateSpec::soft_shapes();
        let p = spec.raster_params();
        let colors = Tensor::new(vec![1, 3], vec![1.0, 1.0, 1.0]).unwrap();
        let centroid_x = |img: &Tensor| -> f64 {
            let (h, w) = (p.height, p.width);
            let d = img.data();
            let (mut m, mut mx) = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let v = d[y * w + x];
                    m += v;
                    mx += v * x as f64;
                }
            }
            mx / m
        };
        let mk = |cx: f64| {
            let alpha =
                Tensor::new(vec![1, 6], vec![cx, 0.0, 1.0, 6.0, 0.0, 0.0]).unwrap();
            apply_soft_shapes(&alpha, &colors, &p)
        };
        let delta = 0.3;
        let c0 = centroid_x(&mk(0.0));
        let c1 = centroid_x(&mk(delta));
        let moved = c1 - c0;
        let expect = delta * p.width as f64 / 2.0;
        assert!(
            (moved - expect).abs() < 0.5,
            "moved {} expected {}",
            moved,
            expect
        );
    }

    #[test]
    fn init_alpha_rules() {
        let mut rng = Rng::new(5);
        let affine = SurrogateSpec::affine_stn();
        let mut no_jitter = affine.clone();
        no_jitter.init_jitter = 0.0;
        let a = no_jitter.init_alpha(3, None, &mut rng);
        for b in 0..3 {
            assert_eq!(&a.data()[b * 6..b * 6 + 6], &ops::IDENTITY_THETA);
        }

        // determinism
        let mut r1 = Rng::new(9);
        let mut r2 = Rng::new(9);
        let a1 = affine.init_alpha(4, None, &mut r1);
        let a2 = affine.init_alpha(4, None, &mut r2);
        assert_eq!(a1.data(), a2.data());

        // blur-noise init lands in bounds even for the pinned variants
        let noise_only = SurrogateSpec::noise_only();
        let a = noise_only.init_alpha(2, None, &mut rng);
        assert!(noise_only.in_bounds(&a));
        assert_eq!(a.data()[0], 0.0); // blur coordinate pinned
    }

    #[test]
    fn projection_clamps_and_is_idempotent() {
        let spec = SurrogateSpec::blur_noise();
        let mut a = Tensor::new(vec![1, 2], vec![-0.3, 0.5]).unwrap();
        spec.project(&mut a);
        assert_eq!(a.data(), &[0.0, 0.3]);
        let mut b = a.clone();
        spec.project(&mut b);
        assert_eq!(a.data(), b.data());
        // in-bounds vectors pass through untouched
        let mut c = Tensor::new(vec![1, 2], vec![1.5, 0.1]).unwrap();
        let before = c.clone();
        spec.project(&mut c);
        assert_eq!(before.data(), c.data());
    }

    #[test]
    fn batchwise_independence_under_permutation() {
        let mut rng = Rng::new(11);
        let x = smooth_image(&mut rng, &[3, 1, 10, 10]);
        let spec = SurrogateSpec::affine_stn();
        let mut alpha = spec.source_alpha(3, None);
        for v in alpha.data_mut() {
            *v += rng.range(-0.2, 0.2);
        }
        let y = spec.apply(&x, &alpha, None).unwrap();
        let perm = [2usize, 0, 1];
        let xp = x.gather_rows(&perm);
        let ap = alpha.gather_rows(&perm);
        let yp = spec.apply(&xp, &ap, None).unwrap();
        assert!(y.gather_rows(&perm).max_abs_diff(&yp) < 1e-15);
    }
}
