use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{shape_err, TensorError};
use crate::Result;

/// Row-major 2-D tensor of `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 2],
    data: Vec<f32>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(shape_err(
                "Tensor::new",
                format!("{} elements for {rows}x{cols}", rows * cols),
                data.len(),
            ));
        }
        Ok(Self {
            shape: [rows, cols],
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::full(rows, cols, 0.0)
    }

    pub fn full(rows: usize, cols: usize, value: f32) -> Self {
        Self {
            shape: [rows, cols],
            data: vec![value; rows * cols],
            requires_grad: false,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self::full(1, 1, value)
    }

    pub fn row(data: Vec<f32>) -> Self {
        let n = data.len();
        Self {
            shape: [1, n],
            data,
            requires_grad: false,
        }
    }

    /// Builds a tensor from equally sized rows.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(shape_err("Tensor::from_rows", format!("{cols} columns"), format!("row {i} with {}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn randn<R: Rng + ?Sized>(rows: usize, cols: usize, std: f32, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        Self {
            shape: [rows, cols],
            data,
            requires_grad: false,
        }
    }

    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, low: f32, high: f32, rng: &mut R) -> Self {
        let data = if low == high {
            vec![low; rows * cols]
        } else {
            let dist = Uniform::new(low, high).expect("low < high");
            (0..rows * cols).map(|_| dist.sample(rng)).collect()
        };
        Self {
            shape: [rows, cols],
            data,
            requires_grad: false,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    pub fn shape(&self) -> [usize; 2] {
        self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row_slice(&self, r: usize) -> &[f32] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_slice_mut(&mut self, r: usize) -> &mut [f32] {
        let c = self.shape[1];
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.shape[1] + c]
    }

    /// Value of a `1 x 1` tensor.
    pub fn item(&self) -> Result<f32> {
        if self.data.len() != 1 {
            return Err(TensorError::NonScalarRoot(self.shape.to_vec()));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// New tensor whose row `r` is a copy of row `sources[r]` of `self`.
    pub fn select_rows(&self, sources: &[usize]) -> Tensor {
        let c = self.shape[1];
        let mut data = Vec::with_capacity(sources.len() * c);
        for &s in sources {
            data.extend_from_slice(self.row_slice(s));
        }
        Tensor {
            shape: [sources.len(), c],
            data,
            requires_grad: self.requires_grad,
        }
    }

    /// Plain (untaped) matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let [n, k] = self.shape;
        let [k2, m] = other.shape;
        if k != k2 {
            return Err(shape_err("matmul", format!("inner dimension {k}"), k2));
        }
        let mut out = vec![0.0f32; n * m];
        matmul_into(&self.data, &other.data, &mut out, n, k, m);
        Tensor::new(n, m, out)
    }
}

/// `out[n x m] += a[n x k] * b[k x m]`, i-k-j loop order so the inner loop is contiguous.
pub(crate) fn matmul_into(a: &[f32], b: &[f32], out: &mut [f32], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[k x m] += a[n x k]^T * b[n x m]`.
pub(crate) fn matmul_at_b_into(a: &[f32], b: &[f32], out: &mut [f32], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[n x k] += a[n x m] * b[k x m]^T`.
pub(crate) fn matmul_a_bt_into(a: &[f32], b: &[f32], out: &mut [f32], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        let orow = &mut out[i * k..(i + 1) * k];
        for (p, o) in orow.iter_mut().enumerate() {
            let brow = &b[p * m..(p + 1) * m];
            let mut acc = 0.0f32;
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            *o += acc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(2, 3, vec![0.0; 5]).is_err());
        let t = Tensor::new(2, 3, vec![0.0; 6]).unwrap();
        assert_eq!(t.shape(), [2, 3]);
        assert_eq!(t.rows() * t.cols(), t.len());
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(2, 1, vec![1.0, -1.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[-1.0, -1.0]);
        assert!(b.matmul(&b).is_err());
    }

    #[test]
    fn select_rows_copies() {
        let a = Tensor::new(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(a.select_rows(&[2, 0, 0]).data(), &[3.0, 1.0, 1.0]);
    }
}
