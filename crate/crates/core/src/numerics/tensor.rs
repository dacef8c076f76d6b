use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Dense row-major array with a gradient slot.
///
/// Every tensor carries a process-unique identity so a [`Graph`](super::Graph)
/// can bind it once as a leaf and later route gradients back to it. Cloning
/// produces a new identity: a clone is a different parameter.
#[derive(Debug)]
pub struct Tensor {
    id: u64,
    shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
    pub requires_grad: bool,
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Tensor {
            id: fresh_id(),
            shape: self.shape.clone(),
            data: self.data.clone(),
            grad: self.grad.clone(),
            requires_grad: self.requires_grad,
        }
    }
}

impl PartialEq for Tensor {
    /// Value equality: identity and gradients are ignored.
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Value(format!("invalid tensor shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("from_vec", shape, &[data.len()]));
        }
        Ok(Tensor {
            id: fresh_id(),
            shape: shape.to_vec(),
            grad: vec![0.0; numel],
            data,
            requires_grad: true,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::from_vec(shape, vec![0.0; numel]).expect("zero-sized tensor")
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self::from_vec(shape, vec![value; numel]).expect("zero-sized tensor")
    }

    /// Entries drawn from N(0, std²).
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..numel).map(|_| normal.sample(rng)).collect();
        Self::from_vec(shape, data).expect("zero-sized tensor")
    }

    pub fn frozen(mut self) -> Self {
        self.requires_grad = false;
        self
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// (rows, cols) view; rank-1 tensors are a single row.
    pub fn dims2(&self) -> (usize, usize) {
        dims2(&self.shape)
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        let (_, cols) = self.dims2();
        self.data[row * cols + col]
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub(crate) fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => (shape[..shape.len() - 1].iter().product(), shape[shape.len() - 1]),
    }
}

/// Anything that owns trainable tensors.
///
/// Both visitors must enumerate tensors in the same, stable order; optimizer
/// state and checkpoints rely on it.
pub trait Parameters {
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    fn set_requires_grad(&mut self, flag: bool) {
        for p in self.params_mut() {
            p.requires_grad = flag;
        }
    }

    fn all_finite(&self) -> bool {
        self.params().iter().all(|p| p.is_finite())
    }
}

impl<T: Parameters> Parameters for Vec<T> {
    fn params(&self) -> Vec<&Tensor> {
        self.iter().flat_map(|p| p.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.iter_mut().flat_map(|p| p.params_mut()).collect()
    }
}

impl<T: Parameters> Parameters for Option<T> {
    fn params(&self) -> Vec<&Tensor> {
        self.iter().flat_map(|p| p.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.iter_mut().flat_map(|p| p.params_mut()).collect()
    }
}
