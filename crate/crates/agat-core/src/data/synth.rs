//! Procedural stand-in datasets for environments without the reference
//! archives. Digit glyphs are stroke-rendered seven-segment figures with
//! mild pose jitter; the RGB variant draws thin colored glyphs on dark
//! backgrounds so that noise and blur corruptions genuinely destroy the
//! discriminative detail. Both export through the standard binary formats
//! (`write_idx`, `write_cifar_binary`) and reload through the ordinary
//! loaders.

use crate::rng::Rng;
use crate::tensor::Tensor;

use super::LabeledDataset;

/// Segment endpoints in a unit box, y growing downward.
const SEGS: [[f64; 4]; 7] = [
    [0.25, 0.15, 0.75, 0.15], // A top
    [0.75, 0.15, 0.75, 0.50], // B upper right
    [0.75, 0.50, 0.75, 0.85], // C lower right
    [0.25, 0.85, 0.75, 0.85], // D bottom
    [0.25, 0.50, 0.25, 0.85], // E lower left
    [0.25, 0.15, 0.25, 0.50], // F upper left
    [0.25, 0.50, 0.75, 0.50], // G middle
];

/// Active segments per digit (A..G bit order as in `SEGS`).
const DIGIT_SEGS: [&[usize]; 10] = [
    &[0, 1, 2, 3, 4, 5],    // 0
    &[1, 2],                // 1
    &[0, 1, 6, 4, 3],       // 2
    &[0, 1, 6, 2, 3],       // 3
    &[5, 6, 1, 2],          // 4
    &[0, 5, 6, 2, 3],       // 5
    &[0, 5, 6, 4, 3, 2],    // 6
    &[0, 1, 2],             // 7
    &[0, 1, 2, 3, 4, 5, 6], // 8
    &[0, 1, 2, 3, 5, 6],    // 9
];

fn dist_to_segment(px: f64, py: f64, s: &[f64; 4]) -> f64 {
    let (ax, ay, bx, by) = (s[0], s[1], s[2], s[3]);
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0);
    let (cx, cy) = (ax + t * dx, ay + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

struct GlyphPose {
    rot: f64,
    scale: f64,
    tx: f64,
    ty: f64,
    thickness: f64,
}

/// Segment endpoints in pixel space after pose.
fn posed_segments(digit: usize, side: usize, pose: &GlyphPose) -> Vec<[f64; 4]> {
    let half = (side as f64 - 1.0) / 2.0;
    let (s, c) = (pose.rot.sin(), pose.rot.cos());
    let map = |x: f64, y: f64| -> (f64, f64) {
        let ux = (x - 0.5) * side as f64 * pose.scale;
        let uy = (y - 0.5) * side as f64 * pose.scale;
        (
            c * ux - s * uy + half + pose.tx,
            s * ux + c * uy + half + pose.ty,
        )
    };
    DIGIT_SEGS[digit]
        .iter()
        .map(|&i| {
            let seg = &SEGS[i];
            let (ax, ay) = map(seg[0], seg[1]);
            let (bx, by) = map(seg[2], seg[3]);
            [ax, ay, bx, by]
        })
        .collect()
}

fn render_glyph(digit: usize, side: usize, pose: &GlyphPose, out: &mut [f64]) {
    let segs = posed_segments(digit, side, pose);
    let reach = pose.thickness / 2.0 + 1.0;
    for (i, v) in out.iter_mut().enumerate() {
        let (py, px) = ((i / side) as f64, (i % side) as f64);
        let mut best = f64::INFINITY;
        for s in &segs {
            // cheap reject on the bounding box
            if px < s[0].min(s[2]) - reach
                || px > s[0].max(s[2]) + reach
                || py < s[1].min(s[3]) - reach
                || py > s[1].max(s[3]) + reach
            {
                continue;
            }
            best = best.min(dist_to_segment(px, py, s));
            if best <= 0.0 {
                break;
            }
        }
        *v = (pose.thickness / 2.0 + 0.5 - best).clamp(0.0, 1.0);
    }
}

/// 28x28 grayscale digit glyphs with small pose jitter (rotation up to 6
/// degrees, translation up to 1.5 px, scale 0.58..0.70 of the frame).
pub fn digits_dataset(n: usize, seed: u64) -> LabeledDataset {
    let side = 28;
    let mut rng = Rng::new(seed ^ 0xd161_0001);
    let mut data = vec![0.0; n * side * side];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let digit = rng.below(10);
        let pose = GlyphPose {
            rot: rng.range(-6.0, 6.0) * std::f64::consts::PI / 180.0,
            scale: rng.range(0.58, 0.70),
            tx: rng.range(-1.5, 1.5),
            ty: rng.range(-1.5, 1.5),
            thickness: rng.range(1.7, 2.4),
        };
        render_glyph(digit, side, &pose, &mut data[i * side * side..(i + 1) * side * side]);
        labels.push(digit);
    }
    let images = Tensor::new(vec![n, 1, side, side], data).unwrap();
    LabeledDataset::new(images, labels, 10).unwrap()
}

/// 32x32 RGB scenes: a thin bright glyph over a dark background plus faint
/// sensor grain. Stroke color is uninformative; class identity lives in the
/// thin strokes that corruption wipes out first.
pub fn rgb_glyphs_dataset(n: usize, seed: u64) -> LabeledDataset {
    let side = 32;
    let plane = side * side;
    let mut rng = Rng::new(seed ^ 0x26b_0002);
    let mut data = vec![0.0; n * 3 * plane];
    let mut labels = Vec::with_capacity(n);
    let mut mask = vec![0.0; plane];
    for i in 0..n {
        let digit = rng.below(10);
        let pose = GlyphPose {
            rot: rng.range(-8.0, 8.0) * std::f64::consts::PI / 180.0,
            scale: rng.range(0.52, 0.66),
            tx: rng.range(-2.0, 2.0),
            ty: rng.range(-2.0, 2.0),
            thickness: rng.range(1.0, 1.4),
        };
        render_glyph(digit, side, &pose, &mut mask);
        let bg: [f64; 3] = [
            rng.range(0.02, 0.22),
            rng.range(0.02, 0.22),
            rng.range(0.02, 0.22),
        ];
        let fg: [f64; 3] = [
            rng.range(0.55, 1.0),
            rng.range(0.55, 1.0),
            rng.range(0.55, 1.0),
        ];
        for ch in 0..3 {
            let off = (i * 3 + ch) * plane;
            for p in 0..plane {
                let v = bg[ch] + (fg[ch] - bg[ch]) * mask[p] + 0.015 * rng.normal();
                data[off + p] = v.clamp(0.0, 1.0);
            }
        }
        labels.push(digit);
    }
    let images = Tensor::new(vec![n, 3, side, side], data).unwrap();
    LabeledDataset::new(images, labels, 10).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digits_are_deterministic_and_in_range() {
        let a = digits_dataset(16, 5);
        let b = digits_dataset(16, 5);
        assert_eq!(a.images().fnv1a(), b.images().fnv1a());
        assert!(a.images().data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(a.labels().iter().all(|&l| l < 10));
    }

    #[test]
    fn digit_classes_are_visually_distinct() {
        // mean per-pixel distance between class prototypes must be clearly
        // positive, otherwise the classification task is degenerate
        let d = digits_dataset(400, 11);
        let side = 28 * 28;
        let mut protos = vec![vec![0.0; side]; 10];
        let mut counts = [0usize; 10];
        for i in 0..d.len() {
            let y = d.labels()[i];
            counts[y] += 1;
            for (a, b) in protos[y].iter_mut().zip(d.images().sample(i)) {
                *a += b;
            }
        }
        for (p, &c) in protos.iter_mut().zip(&counts) {
            for v in p.iter_mut() {
                *v /= c.max(1) as f64;
            }
        }
        for a in 0..10 {
            for b in a + 1..10 {
                let dist: f64 = protos[a]
                    .iter()
                    .zip(&protos[b])
                    .map(|(x, y)| (x - y).abs())
                    .sum::<f64>()
                    / side as f64;
                assert!(dist > 0.01, "classes {} and {} overlap ({})", a, b, dist);
            }
        }
    }

    #[test]
    fn rgb_glyphs_have_contrast() {
        let d = rgb_glyphs_dataset(32, 3);
        for i in 0..d.len() {
            let s = d.images().sample(i);
            let max = s.iter().cloned().fold(0.0, f64::max);
            let min = s.iter().cloned().fold(1.0, f64::min);
            assert!(max - min > 0.3, "sample {} has no contrast", i);
        }
    }
}
