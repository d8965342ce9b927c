//! IDX file ingestion (big-endian, magic 2051 for image files and 2049 for
//! label files) plus a writer used by the synthetic dataset exporters and
//! tests.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{AgatError, Result};
use crate::tensor::Tensor;

use super::LabeledDataset;

const IMAGE_MAGIC: u32 = 2051;
const LABEL_MAGIC: u32 = 2049;

fn read_u32_be(buf: &[u8], off: usize, path: &str) -> Result<u32> {
    let bytes: [u8; 4] = buf
        .get(off..off + 4)
        .ok_or_else(|| AgatError::Data(format!("{}: truncated header", path)))?
        .try_into()
        .unwrap();
    Ok(u32::from_be_bytes(bytes))
}

/// Raw bytes scale to [0,1] by division by 255; labels must lie in [0,10).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let ibuf = fs::read(images_path)
        .map_err(|e| AgatError::io(images_path.display().to_string(), e))?;
    let lbuf = fs::read(labels_path)
        .map_err(|e| AgatError::io(labels_path.display().to_string(), e))?;
    let ip = images_path.display().to_string();
    let lp = labels_path.display().to_string();

    let magic = read_u32_be(&ibuf, 0, &ip)?;
    if magic != IMAGE_MAGIC {
        return Err(AgatError::Data(format!(
            "{}: bad magic {} (want {})",
            ip, magic, IMAGE_MAGIC
        )));
    }
    let n = read_u32_be(&ibuf, 4, &ip)? as usize;
    let h = read_u32_be(&ibuf, 8, &ip)? as usize;
    let w = read_u32_be(&ibuf, 12, &ip)? as usize;
    let want = 16 + n * h * w;
    if ibuf.len() < want {
        return Err(AgatError::Data(format!(
            "{}: truncated, {} bytes but header promises {}",
            ip,
            ibuf.len(),
            want
        )));
    }

    let magic = read_u32_be(&lbuf, 0, &lp)?;
    if magic != LABEL_MAGIC {
        return Err(AgatError::Data(format!(
            "{}: bad magic {} (want {})",
            lp, magic, LABEL_MAGIC
        )));
    }
    let ln = read_u32_be(&lbuf, 4, &lp)? as usize;
    if ln != n {
        return Err(AgatError::Data(format!(
            "count mismatch: {} images vs {} labels",
            n, ln
        )));
    }
    if lbuf.len() < 8 + ln {
        return Err(AgatError::Data(format!("{}: truncated labels", lp)));
    }

    let data: Vec<f64> = ibuf[16..16 + n * h * w]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    let labels: Vec<usize> = lbuf[8..8 + ln].iter().map(|&b| b as usize).collect();
    if let Some(&bad) = labels.iter().find(|&&l| l >= 10) {
        return Err(AgatError::Data(format!("label byte {} out of range", bad)));
    }
    let images = Tensor::new(vec![n, 1, h, w], data)?;
    LabeledDataset::new(images, labels, 10)
}

/// Write a [N,1,H,W] dataset in IDX format (values quantized to bytes).
pub fn write_idx(dataset: &LabeledDataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let shape = dataset.images().shape();
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    if shape[1] != 1 {
        return Err(AgatError::Data(
            "IDX export supports single-channel images only".into(),
        ));
    }
    let mut ibuf = Vec::with_capacity(16 + n * h * w);
    ibuf.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    ibuf.extend_from_slice(&(n as u32).to_be_bytes());
    ibuf.extend_from_slice(&(h as u32).to_be_bytes());
    ibuf.extend_from_slice(&(w as u32).to_be_bytes());
    ibuf.extend(
        dataset
            .images()
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    let mut lbuf = Vec::with_capacity(8 + n);
    lbuf.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    lbuf.extend_from_slice(&(n as u32).to_be_bytes());
    lbuf.extend(dataset.labels().iter().map(|&l| l as u8));

    let mut f = fs::File::create(images_path)
        .map_err(|e| AgatError::io(images_path.display().to_string(), e))?;
    f.write_all(&ibuf)
        .map_err(|e| AgatError::io(images_path.display().to_string(), e))?;
    let mut f = fs::File::create(labels_path)
        .map_err(|e| AgatError::io(labels_path.display().to_string(), e))?;
    f.write_all(&lbuf)
        .map_err(|e| AgatError::io(labels_path.display().to_string(), e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip_dir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn byte_255_scales_to_one() {
        let dir = roundtrip_dir();
        let ip = dir.path().join("img.idx");
        let lp = dir.path().join("lbl.idx");
        let mut images = Tensor::zeros(&[2, 1, 3, 3]);
        images.data_mut()[0] = 1.0;
        let d = LabeledDataset::new(images, vec![4, 9], 10).unwrap();
        write_idx(&d, &ip, &lp).unwrap();
        let back = load_idx(&ip, &lp).unwrap();
        assert_eq!(back.images().data()[0], 1.0);
        assert_eq!(back.labels(), &[4, 9]);
        assert_eq!(back.images().shape(), &[2, 1, 3, 3]);
    }

    #[test]
    fn swapped_files_fail_on_magic() {
        let dir = roundtrip_dir();
        let ip = dir.path().join("img.idx");
        let lp = dir.path().join("lbl.idx");
        let d = LabeledDataset::new(Tensor::zeros(&[1, 1, 2, 2]), vec![0], 10).unwrap();
        write_idx(&d, &ip, &lp).unwrap();
        let err = load_idx(&lp, &ip).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{}", err);
    }

    #[test]
    fn truncated_image_file_fails() {
        let dir = roundtrip_dir();
        let ip = dir.path().join("img.idx");
        let lp = dir.path().join("lbl.idx");
        let d = LabeledDataset::new(Tensor::zeros(&[4, 1, 5, 5]), vec![0; 4], 10).unwrap();
        write_idx(&d, &ip, &lp).unwrap();
        let buf = fs::read(&ip).unwrap();
        fs::write(&ip, &buf[..buf.len() - 10]).unwrap();
        assert!(load_idx(&ip, &lp).unwrap_err().to_string().contains("truncated"));
    }

    #[test]
    fn count_mismatch_fails() {
        let dir = roundtrip_dir();
        let d1 = LabeledDataset::new(Tensor::zeros(&[3, 1, 2, 2]), vec![0; 3], 10).unwrap();
        let d2 = LabeledDataset::new(Tensor::zeros(&[2, 1, 2, 2]), vec![0; 2], 10).unwrap();
        let (i1, l1) = (dir.path().join("a.img"), dir.path().join("a.lbl"));
        let (i2, l2) = (dir.path().join("b.img"), dir.path().join("b.lbl"));
        write_idx(&d1, &i1, &l1).unwrap();
        write_idx(&d2, &i2, &l2).unwrap();
        assert!(load_idx(&i1, &l2)
            .unwrap_err()
            .to_string()
            .contains("count mismatch"));
    }
}
