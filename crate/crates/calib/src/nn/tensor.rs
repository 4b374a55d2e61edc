//! Dense tensors over `f32` (training) or `f64` (gradient checking).

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Scalar element type for network buffers. Training instantiates `f32`;
/// the finite-difference gradient checker uses `f64` for headroom.
pub trait Elem:
    Float + FromPrimitive + ToPrimitive + Send + Sync + Default + std::fmt::Debug + 'static
{
    fn from_f64c(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts")
    }
}

impl Elem for f32 {}
impl Elem for f64 {}

/// Row-major dense tensor of rank <= 4. The buffer length always equals the
/// product of the dims.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E> {
    dims: Vec<usize>,
    data: Vec<E>,
}

impl<E: Elem> Tensor<E> {
    pub fn zeros(dims: &[usize]) -> Self {
        assert!(dims.len() <= 4, "rank must be <= 4");
        let len = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![E::zero(); len],
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<E>) -> Self {
        assert_eq!(
            dims.iter().product::<usize>(),
            data.len(),
            "buffer length must match shape"
        );
        Self {
            dims: dims.to_vec(),
            data,
        }
    }

    pub fn scalar_fill(dims: &[usize], value: E) -> Self {
        let len = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn fill(&mut self, value: E) {
        self.data.fill(value);
    }

    /// Elementwise `self += other`, shapes must match.
    pub fn add_assign(&mut self, other: &Tensor<E>) {
        assert_eq!(self.dims, other.dims, "shape mismatch in add_assign");
        for (d, s) in self.data.iter_mut().zip(&other.data) {
            *d = *d + *s;
        }
    }

    /// `self += a * other`.
    pub fn axpy_assign(&mut self, a: E, other: &Tensor<E>) {
        assert_eq!(self.dims, other.dims, "shape mismatch in axpy_assign");
        for (d, s) in self.data.iter_mut().zip(&other.data) {
            *d = *d + a * *s;
        }
    }

    /// Convert every element through `f64` into another element type.
    pub fn cast<T: Elem>(&self) -> Tensor<T> {
        Tensor {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .map(|&x| T::from_f64c(x.to_f64().unwrap()))
                .collect(),
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, E> {
        self.data.iter()
    }
}
