//! Dense row-major `f64` arrays of low rank (0 through 3 in practice).

use rand::Rng;

/// One draw from the standard normal distribution via the Box-Muller
/// transform; two uniforms per sample keeps the stream layout simple and
/// deterministic.
pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[derive(Debug, Clone, PartialEq)]
pub struct NdArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl NdArray {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        NdArray { shape: shape.to_vec(), data: vec![0.0; len] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        NdArray { shape: shape.to_vec(), data: vec![value; len] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "from_vec: shape {shape:?} does not match {} values",
            data.len()
        );
        NdArray { shape: shape.to_vec(), data }
    }

    pub fn scalar(value: f64) -> Self {
        NdArray { shape: vec![], data: vec![value] }
    }

    /// Standard-normal entries scaled by `std`.
    pub fn randn(rng: &mut impl Rng, shape: &[usize], std: f64) -> Self {
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| std * standard_normal(rng)).collect();
        NdArray { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item: array has {} values", self.data.len());
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        assert_eq!(self.rank(), 2, "rows: rank {} array", self.rank());
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.rank(), 2, "cols: rank {} array", self.rank());
        self.shape[1]
    }

    #[inline]
    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    #[inline]
    pub fn set2(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.shape[1] + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// Matrix product of two rank-2 arrays.
    pub fn matmul(&self, other: &NdArray) -> NdArray {
        assert_eq!(self.rank(), 2, "matmul: lhs rank {}", self.rank());
        assert_eq!(other.rank(), 2, "matmul: rhs rank {}", other.rank());
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        assert_eq!(k, k2, "matmul: inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (kk, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[kk * n..(kk + 1) * n];
                for j in 0..n {
                    out_row[j] += a * b_row[j];
                }
            }
        }
        NdArray { shape: vec![m, n], data: out }
    }

    pub fn transpose2(&self) -> NdArray {
        assert_eq!(self.rank(), 2, "transpose2: rank {}", self.rank());
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        NdArray { shape: vec![n, m], data: out }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> NdArray {
        NdArray { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Elementwise `self += scale * other`.
    pub fn add_scaled(&mut self, other: &NdArray, scale: f64) {
        assert_eq!(self.shape, other.shape, "add_scaled: {:?} vs {:?}", self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += scale * b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
