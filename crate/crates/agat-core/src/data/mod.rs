//! Dataset ingestion, the append-only augmentation store, checkpoint
//! persistence, and run configuration.

mod cifar;
mod checkpoint;
pub mod config;
mod idx;
mod shapes;
pub mod synth;

pub use cifar::{load_cifar_binary, write_cifar_binary};
pub use checkpoint::{dump_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{DatasetKind, InnerSign, Mode, Profile, RunConfig};
pub use idx::{load_idx, write_idx};
pub use shapes::{
    generate_shapes_dataset, SplitRule, COLOR_NAMES, COLOR_PALETTE, QUADRANT_NAMES, SIZE_TABLE,
};

use serde::{Deserialize, Serialize};

use crate::error::{AgatError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Source,
    Generated,
}

/// Per-sample generation metadata for the shapes dataset (attribute ground
/// truth the semantic surrogate initializes from).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleAttrs {
    /// 0 disc, 1 square, 2 triangle.
    pub shape: usize,
    /// Index into the size table (small/medium/large).
    pub size_class: usize,
    /// 0 NW, 1 NE, 2 SW, 3 SE.
    pub quadrant: usize,
    /// Center in [-1,1] image coordinates.
    pub cx: f64,
    pub cy: f64,
    /// Size factor (0.6 / 0.9 / 1.2).
    pub size: f64,
    /// Lighting jitter multiplier applied to the class color.
    pub brightness: f64,
}

/// Images plus labels plus provenance. Source entries form an immutable
/// prefix; generated entries are append-only behind them.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    images: Tensor,
    labels: Vec<usize>,
    provenance: Vec<Provenance>,
    pub num_classes: usize,
    pub attrs: Option<Vec<SampleAttrs>>,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.rank() != 4 {
            return Err(AgatError::Data(format!(
                "dataset images must be [N,C,H,W], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(AgatError::Data(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(AgatError::Data(format!(
                "label {} outside class range [0,{})",
                bad, num_classes
            )));
        }
        if images
            .data()
            .iter()
            .any(|&v| !(0.0..=1.0).contains(&v))
        {
            return Err(AgatError::Data(
                "pixel values must lie in [0,1]".into(),
            ));
        }
        let n = labels.len();
        Ok(LabeledDataset {
            images,
            labels,
            provenance: vec![Provenance::Source; n],
            num_classes,
            attrs: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    /// [C,H,W] of a single sample.
    pub fn image_shape(&self) -> [usize; 3] {
        [
            self.images.shape()[1],
            self.images.shape()[2],
            self.images.shape()[3],
        ]
    }

    pub fn source_len(&self) -> usize {
        self.provenance
            .iter()
            .take_while(|p| **p == Provenance::Source)
            .count()
    }

    pub fn generated_len(&self) -> usize {
        self.len() - self.source_len()
    }

    /// Hash of the source prefix (images and labels); must never change.
    pub fn source_hash(&self) -> u64 {
        let n = self.source_len();
        let per = self.images.len() / self.len().max(1);
        let mut h = 0xcbf29ce484222325u64;
        for v in &self.images.data()[..n * per] {
            for byte in v.to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        for &l in &self.labels[..n] {
            h ^= l as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }

    /// Append generated samples (flagged as such) without touching the
    /// existing entries. Pixel values are clamped to [0,1] by the caller's
    /// contract and validated here.
    pub fn append_generated(&mut self, images: Tensor, labels: &[usize]) -> Result<()> {
        if images.shape()[0] == 0 || labels.is_empty() {
            return Ok(());
        }
        if images.shape()[1..] != self.images.shape()[1..] {
            return Err(AgatError::Data(format!(
                "appended image shape {:?} differs from dataset {:?}",
                &images.shape()[1..],
                &self.images.shape()[1..]
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(AgatError::Data(format!(
                "{} appended images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(AgatError::Data(format!(
                "appended label {} outside class range [0,{})",
                bad, self.num_classes
            )));
        }
        if images.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(AgatError::Data(
                "appended pixel values must lie in [0,1]".into(),
            ));
        }
        let added = labels.len();
        self.images = Tensor::concat_rows(&self.images, &images)?;
        self.labels.extend_from_slice(labels);
        self.provenance
            .extend(std::iter::repeat(Provenance::Generated).take(added));
        if let Some(attrs) = &mut self.attrs {
            // generated samples carry no ground-truth attribute metadata
            let _ = attrs;
        }
        Ok(())
    }

    /// Gather a batch by index.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.images.gather_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// A new dataset holding only the listed samples (all flagged source).
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let (images, labels) = self.batch(indices);
        LabeledDataset {
            images,
            labels,
            provenance: vec![Provenance::Source; indices.len()],
            num_classes: self.num_classes,
            attrs: self
                .attrs
                .as_ref()
                .map(|a| indices.iter().map(|&i| a[i].clone()).collect()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(n: usize) -> LabeledDataset {
        let images = Tensor::filled(&[n, 1, 2, 2], 0.5);
        let labels = (0..n).map(|i| i % 10).collect();
        LabeledDataset::new(images, labels, 10).unwrap()
    }

    #[test]
    fn append_grows_and_flags_generated() {
        let mut d = tiny(100);
        let add = Tensor::filled(&[30, 1, 2, 2], 0.25);
        d.append_generated(add, &vec![3; 30]).unwrap();
        assert_eq!(d.len(), 130);
        assert_eq!(d.source_len(), 100);
        assert_eq!(d.generated_len(), 30);
    }

    #[test]
    fn append_zero_is_identity() {
        let mut d = tiny(5);
        let h = d.source_hash();
        d.append_generated(Tensor::filled(&[1, 1, 2, 2], 0.1), &[])
            .unwrap();
        assert_eq!(d.len(), 5);
        assert_eq!(d.source_hash(), h);
    }

    #[test]
    fn append_bad_label_rejected() {
        let mut d = tiny(5);
        let add = Tensor::filled(&[1, 1, 2, 2], 0.25);
        assert!(d.append_generated(add, &[12]).is_err());
    }

    #[test]
    fn append_never_touches_source_prefix() {
        let mut d = tiny(50);
        let h0 = d.source_hash();
        for _ in 0..3 {
            let add = Tensor::filled(&[7, 1, 2, 2], 0.75);
            d.append_generated(add, &vec![1; 7]).unwrap();
            assert_eq!(d.source_hash(), h0);
        }
        assert_eq!(d.len(), 71);
    }

    #[test]
    fn out_of_range_pixels_rejected() {
        let images = Tensor::filled(&[1, 1, 2, 2], 1.5);
        assert!(LabeledDataset::new(images, vec![0], 10).is_err());
    }
}
