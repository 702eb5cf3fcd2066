//! Row-major dense tensor with up to four dimensions.

use rand::Rng;

use super::{fl, NnError, Real};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Tensor<F>, NnError> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(NnError::InvalidShape(format!(
                "{}-dimensional tensors unsupported",
                shape.len()
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NnError::InvalidShape(format!(
                "shape {shape:?} wants {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor<F> {
        let n = shape.iter().product();
        Tensor::new(shape, vec![F::zero(); n]).expect("consistent shape")
    }

    pub fn scalar_value(value: F) -> Tensor<F> {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<F>) -> Result<Tensor<F>, NnError> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn from_f64s(shape: Vec<usize>, values: &[f64]) -> Result<Tensor<F>, NnError> {
        Tensor::new(shape, values.iter().map(|&v| fl(v)).collect())
    }

    /// Uniform Xavier/Glorot initialization for a `[fan_in, fan_out]` matrix.
    pub fn xavier_uniform(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor<F> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| fl(rng.gen_range(-bound..bound)))
            .collect();
        Tensor {
            shape: vec![fan_in, fan_out],
            data,
        }
    }

    /// Gaussian initialization with the given standard deviation.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Tensor<F> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                // Box-Muller transform.
                let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                fl((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos() * std)
            })
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Row count, treating 1-D tensors as a single row.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[0]
        }
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn row(&self, i: usize) -> &[F] {
        let cols = self.cols();
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        let cols = self.cols();
        &mut self.data[i * cols..(i + 1) * cols]
    }

    /// The single element of a scalar-shaped tensor.
    pub fn scalar(&self) -> F {
        debug_assert_eq!(self.len(), 1, "scalar() on shape {:?}", self.shape);
        self.data[0]
    }

    pub fn transpose(&self) -> Tensor<F> {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.to_f32_lossy()).collect(),
        }
    }

    pub fn from_f32(src: &Tensor<f32>) -> Tensor<F> {
        Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&v| F::from_f32_lossy(v)).collect(),
        }
    }

    pub fn same_shape(&self, other: &Tensor<F>) -> bool {
        self.shape == other.shape
    }
}

/// `a + b` elementwise; shapes must match.
pub(crate) fn add_assign<F: Real>(acc: &mut [F], delta: &[F]) {
    debug_assert_eq!(acc.len(), delta.len());
    for (a, d) in acc.iter_mut().zip(delta) {
        *a += *d;
    }
}
