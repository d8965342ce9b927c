//! Dense n-dimensional array of f64, row-major. The universal value carrier
//! for the graph engine, datasets, and checkpoints.

use crate::error::{AgatError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(AgatError::shape(
                "Tensor::new",
                format!("shape {:?} wants {} values, got {}", shape, n, data.len()),
            ));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(AgatError::shape(
                "Tensor::new",
                format!("zero-sized dimension in {:?}", shape),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// True when the tensor holds exactly one value (any rank).
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(AgatError::shape(
                "Tensor::reshaped",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(AgatError::non_finite(
                    context,
                    format!("entry {} is {}", i, v),
                ));
            }
        }
        Ok(())
    }

    /// Clamp every entry into [lo, hi] in place.
    pub fn clamp_in_place(&mut self, lo: f64, hi: f64) {
        for v in &mut self.data {
            *v = v.clamp(lo, hi);
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Row-major offset of a [B,C,H,W] index.
    #[inline]
    pub fn idx4(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 4);
        ((b * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    /// The [C,H,W] slice of sample `b` in a [B,C,H,W] tensor.
    pub fn sample(&self, b: usize) -> &[f64] {
        let per = self.data.len() / self.shape[0];
        &self.data[b * per..(b + 1) * per]
    }

    /// Concatenate along axis 0; all trailing dims must agree.
    pub fn concat_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape[1..] != b.shape[1..] {
            return Err(AgatError::shape(
                "Tensor::concat_rows",
                format!("{:?} vs {:?}", a.shape, b.shape),
            ));
        }
        let mut shape = a.shape.clone();
        shape[0] += b.shape[0];
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Ok(Tensor { shape, data })
    }

    /// Gather the listed axis-0 slices into a new tensor.
    pub fn gather_rows(&self, indices: &[usize]) -> Tensor {
        let per = self.data.len() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        Tensor { shape, data }
    }

    /// FNV-1a over the raw little-endian bytes; the determinism fingerprint.
    pub fn fnv1a(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        for v in &self.data {
            for byte in v.to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn check_finite_names_offender() {
        let t = Tensor::from_vec(vec![1.0, f64::NAN]);
        let err = t.check_finite("unit").unwrap_err();
        assert!(err.to_string().contains("unit"));
    }

    #[test]
    fn gather_and_concat_round_trip() {
        let a = Tensor::new(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let picked = a.gather_rows(&[2, 0]);
        assert_eq!(picked.data(), &[5., 6., 1., 2.]);
        let joined = Tensor::concat_rows(&a, &picked).unwrap();
        assert_eq!(joined.shape(), &[5, 2]);
    }

    #[test]
    fn fnv_is_content_sensitive() {
        let a = Tensor::from_vec(vec![1.0, 2.0]);
        let b = Tensor::from_vec(vec![1.0, 2.0000001]);
        assert_ne!(a.fnv1a(), b.fnv1a());
        assert_eq!(a.fnv1a(), a.clone().fnv1a());
    }
}
