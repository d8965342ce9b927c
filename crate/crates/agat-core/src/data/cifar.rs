//! Raw CIFAR-10 binary batches: 3073-byte records, one label byte followed
//! by 32x32 red, green, and blue planes.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{AgatError, Result};
use crate::tensor::Tensor;

use super::LabeledDataset;

const RECORD: usize = 3073;
const PLANE: usize = 1024;

pub fn load_cifar_binary(path: &Path, max_n: usize) -> Result<LabeledDataset> {
    let buf = fs::read(path).map_err(|e| AgatError::io(path.display().to_string(), e))?;
    if buf.is_empty() || buf.len() % RECORD != 0 {
        return Err(AgatError::Data(format!(
            "{}: {} bytes is not a whole number of {}-byte records",
            path.display(),
            buf.len(),
            RECORD
        )));
    }
    let n = (buf.len() / RECORD).min(max_n);
    if n == 0 {
        return Err(AgatError::Data("max_n must be positive".into()));
    }
    let mut data = Vec::with_capacity(n * 3 * PLANE);
    let mut labels = Vec::with_capacity(n);
    for r in 0..n {
        let rec = &buf[r * RECORD..(r + 1) * RECORD];
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(AgatError::Data(format!(
                "record {}: label {} out of range",
                r, label
            )));
        }
        labels.push(label);
        data.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    let images = Tensor::new(vec![n, 3, 32, 32], data)?;
    LabeledDataset::new(images, labels, 10)
}

/// Write a [N,3,32,32] dataset as one CIFAR-style binary batch.
pub fn write_cifar_binary(dataset: &LabeledDataset, path: &Path) -> Result<()> {
    let shape = dataset.images().shape();
    if shape[1..] != [3, 32, 32] {
        return Err(AgatError::Data(format!(
            "CIFAR export wants [N,3,32,32], got {:?}",
            shape
        )));
    }
    let n = shape[0];
    let mut buf = Vec::with_capacity(n * RECORD);
    for r in 0..n {
        buf.push(dataset.labels()[r] as u8);
        buf.extend(
            dataset
                .images()
                .sample(r)
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
    }
    let mut f =
        fs::File::create(path).map_err(|e| AgatError::io(path.display().to_string(), e))?;
    f.write_all(&buf)
        .map_err(|e| AgatError::io(path.display().to_string(), e))?;
    Ok(())
}
