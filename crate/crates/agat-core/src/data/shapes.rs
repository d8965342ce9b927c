//! Procedural shapes dataset: single flat-colored anti-aliased shapes on a
//! black 64x64 canvas, eight color classes, three sizes, positions sampled
//! inside a named quadrant. Stands in for rendered single-object scenes at
//! desk scale; material is dropped, so the material+position split rules
//! reduce to position-only splits.

use crate::error::{AgatError, Result};
use crate::ops::{self, RasterParams};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::{LabeledDataset, SampleAttrs};

pub const COLOR_NAMES: [&str; 8] = [
    "gray", "red", "blue", "green", "brown", "purple", "cyan", "yellow",
];

/// Flat RGB values per color class.
pub const COLOR_PALETTE: [[f64; 3]; 8] = [
    [0.34, 0.34, 0.34],
    [0.68, 0.14, 0.14],
    [0.16, 0.29, 0.84],
    [0.11, 0.41, 0.08],
    [0.51, 0.29, 0.10],
    [0.51, 0.15, 0.75],
    [0.16, 0.82, 0.82],
    [1.00, 0.93, 0.20],
];

pub const SIZE_TABLE: [f64; 3] = [0.6, 0.9, 1.2];

/// Quadrants: 0 NW, 1 NE, 2 SW, 3 SE (y grows downward).
pub const QUADRANT_NAMES: [&str; 4] = ["NW", "NE", "SW", "SE"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitRule {
    TrainSizePos,
    TestSizePos,
    TrainMatPos,
    TestMatPos,
    Iid,
}

impl SplitRule {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train-size-pos" => Ok(SplitRule::TrainSizePos),
            "test-size-pos" => Ok(SplitRule::TestSizePos),
            "train-mat-pos" => Ok(SplitRule::TrainMatPos),
            "test-mat-pos" => Ok(SplitRule::TestMatPos),
            "iid" => Ok(SplitRule::Iid),
            other => Err(AgatError::Config(format!("unknown split_rule '{}'", other))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SplitRule::TrainSizePos => "train-size-pos",
            SplitRule::TestSizePos => "test-size-pos",
            SplitRule::TrainMatPos => "train-mat-pos",
            SplitRule::TestMatPos => "test-mat-pos",
            SplitRule::Iid => "iid",
        }
    }

    /// Allowed (size_class, quadrant) pairs.
    pub fn allowed_pairs(&self) -> Vec<(usize, usize)> {
        match self {
            // (small, NW), (medium, NE), (large, SE)
            SplitRule::TrainSizePos => vec![(0, 0), (1, 1), (2, 3)],
            // (small, SE), (medium, NW), (large, SW)
            SplitRule::TestSizePos => vec![(0, 3), (1, 0), (2, 2)],
            // material dropped: the north positions with every size
            SplitRule::TrainMatPos => cross(&[0, 1, 2], &[0, 1]),
            // the south positions with every size
            SplitRule::TestMatPos => cross(&[0, 1, 2], &[2, 3]),
            SplitRule::Iid => cross(&[0, 1, 2], &[0, 1, 2, 3]),
        }
    }
}

fn cross(sizes: &[usize], quads: &[usize]) -> Vec<(usize, usize)> {
    let mut v = Vec::new();
    for &s in sizes {
        for &q in quads {
            v.push((s, q));
        }
    }
    v
}

/// Center range (pixels) for a quadrant, keeping a disc of radius `margin`
/// inside the frame. The quadrant constrains the center, not the extent.
fn center_range(quadrant: usize, axis_is_x: bool, margin: f64, extent: usize) -> (f64, f64) {
    let half = extent as f64 / 2.0;
    let lo_side = match (quadrant, axis_is_x) {
        (0, true) | (0, false) => true,          // NW: left, top
        (1, true) => false,                      // NE: right
        (1, false) => true,                      // NE: top
        (2, true) => true,                       // SW: left
        (2, false) => false,                     // SW: bottom
        _ => false,                              // SE: right, bottom
    };
    if lo_side {
        (margin, half)
    } else {
        (half, extent as f64 - margin)
    }
}

/// Lighting jitter range applied multiplicatively to the class color.
pub const BRIGHTNESS_RANGE: (f64, f64) = (0.70, 1.05);

pub fn raster_params() -> RasterParams {
    RasterParams::default()
}

/// Deterministic generation: same (n, rule, seed) yields byte-identical
/// tensors. Labels are color indices; attribute metadata rides along.
pub fn generate_shapes_dataset(n: usize, rule: SplitRule, seed: u64) -> Result<LabeledDataset> {
    if n == 0 {
        return Err(AgatError::Data("shapes dataset size must be positive".into()));
    }
    let p = raster_params();
    let (h, w) = (p.height, p.width);
    let mut rng = Rng::new(seed ^ 0x5a5a_0001);
    let pairs = rule.allowed_pairs();

    let mut labels = Vec::with_capacity(n);
    let mut attrs = Vec::with_capacity(n);
    let mut alpha = Tensor::zeros(&[n, 6]);
    let mut colors = Tensor::zeros(&[n, 3]);
    for i in 0..n {
        let color = rng.below(8);
        let shape = rng.below(3);
        let (size_class, quadrant) = pairs[rng.below(pairs.len())];
        let size = SIZE_TABLE[size_class];
        let margin = size * p.base_radius + 2.0;
        let (xlo, xhi) = center_range(quadrant, true, margin, w);
        let (ylo, yhi) = center_range(quadrant, false, margin, h);
        let cx_px = rng.range(xlo, xhi);
        let cy_px = rng.range(ylo, yhi);
        let cx = cx_px / (w - 1) as f64 * 2.0 - 1.0;
        let cy = cy_px / (h - 1) as f64 * 2.0 - 1.0;
        let brightness = rng.range(BRIGHTNESS_RANGE.0, BRIGHTNESS_RANGE.1);

        let row = &mut alpha.data_mut()[i * 6..i * 6 + 6];
        row[0] = cx;
        row[1] = cy;
        row[2] = size;
        // effectively exact one-hot blend for the dataset render
        row[3 + shape] = 30.0;
        for (c, base) in colors.data_mut()[i * 3..i * 3 + 3]
            .iter_mut()
            .zip(COLOR_PALETTE[color])
        {
            *c = base * brightness;
        }

        labels.push(color);
        attrs.push(SampleAttrs {
            shape,
            size_class,
            quadrant,
            cx,
            cy,
            size,
            brightness,
        });
    }

    // render in chunks to bound peak memory
    let mut data = Vec::with_capacity(n * 3 * h * w);
    let chunk = 128;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let a = alpha.gather_rows(&idx);
        let c = colors.gather_rows(&idx);
        let mut img = ops::soft_shapes(&a, &c, &p);
        img.clamp_in_place(0.0, 1.0);
        data.extend_from_slice(img.data());
        start = end;
    }
    let images = Tensor::new(vec![n, 3, h, w], data)?;
    let mut ds = LabeledDataset::new(images, labels, 8)?;
    ds.attrs = Some(attrs);
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_size_pos_never_emits_forbidden_pairs() {
        let d = generate_shapes_dataset(10_000, SplitRule::TrainSizePos, 3).unwrap();
        let allowed = SplitRule::TrainSizePos.allowed_pairs();
        for a in d.attrs.as_ref().unwrap() {
            assert!(
                allowed.contains(&(a.size_class, a.quadrant)),
                "forbidden pair ({},{})",
                a.size_class,
                a.quadrant
            );
        }
        // in particular (small, SE) never appears
        assert!(!d
            .attrs
            .as_ref()
            .unwrap()
            .iter()
            .any(|a| a.size_class == 0 && a.quadrant == 3));
    }

    #[test]
    fn seeded_generation_is_byte_identical() {
        let a = generate_shapes_dataset(8, SplitRule::Iid, 42).unwrap();
        let b = generate_shapes_dataset(8, SplitRule::Iid, 42).unwrap();
        assert_eq!(a.images().fnv1a(), b.images().fnv1a());
        assert_eq!(a.labels(), b.labels());
        let c = generate_shapes_dataset(8, SplitRule::Iid, 43).unwrap();
        assert_ne!(a.images().fnv1a(), c.images().fnv1a());
    }

    #[test]
    fn centered_disc_foreground_count_matches_area() {
        // render one disc at the center through the same raster path
        let p = raster_params();
        for &size in &SIZE_TABLE {
            let alpha =
                Tensor::new(vec![1, 6], vec![0.0, 0.0, size, 30.0, 0.0, 0.0]).unwrap();
            let colors = Tensor::new(vec![1, 3], vec![1.0, 1.0, 1.0]).unwrap();
            let img = ops::soft_shapes(&alpha, &colors, &p);
            let count = img.data()[..p.height * p.width]
                .iter()
                .filter(|&&v| v > 0.5)
                .count() as f64;
            let area = std::f64::consts::PI * (size * p.base_radius).powi(2);
            assert!(
                (count - area).abs() / area < 0.05,
                "size {}: count {} vs area {}",
                size,
                count,
                area
            );
        }
    }

    #[test]
    fn unknown_rule_is_rejected() {
        assert!(SplitRule::parse("train-color-pos").is_err());
        assert!(SplitRule::parse("iid").is_ok());
    }

    #[test]
    fn pixels_stay_in_unit_range() {
        let d = generate_shapes_dataset(32, SplitRule::TestMatPos, 9).unwrap();
        assert!(d
            .images()
            .data()
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
    }
}
