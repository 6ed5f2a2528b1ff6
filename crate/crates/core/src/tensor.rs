//! Dense row-major `f64` tensors and the seeded random generator used for
//! initialization, dropout masks and shuffling.
//!
//! Randomness comes from ChaCha8 (`rand_chacha`). A generator is identified by
//! a `(seed, stream)` pair: the 64-bit seed is expanded with
//! `SeedableRng::seed_from_u64` and the ChaCha stream id selects an independent
//! sequence, so the draws are identical on every platform.
//! Uniform draws are `lo + (hi - lo) * u` with `u` the standard `[0, 1)` double;
//! normal draws use `rand_distr::StandardNormal` scaled as `mean + std * z`.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{shape_err, Error, Result};

/// Deterministic generator state. Single owner; clone it to replay a sequence.
#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, stream, inner }
    }

    /// Independent generator derived from the same seed.
    pub fn fork(&self, stream: u64) -> Self {
        Self::with_stream(self.seed, stream)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let u: f64 = self.inner.random();
        lo + (hi - lo) * u
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        let z: f64 = self.inner.sample(StandardNormal);
        mean + std * z
    }

    /// Bernoulli trial with success probability `p`.
    pub fn bernoulli(&mut self, p: f64) -> bool {
        let u: f64 = self.inner.random();
        u < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}

/// Fill rule for [`Tensor::create`].
pub enum Fill<'a> {
    Zeros,
    Constant(f64),
    Uniform { lo: f64, hi: f64, rng: &'a mut RngState },
    Normal { mean: f64, std: f64, rng: &'a mut RngState },
}

/// Elementwise operation with its second operand, if any.
#[derive(Clone, Copy, Debug)]
pub enum Elementwise<'a> {
    Add(&'a Tensor),
    Sub(&'a Tensor),
    Mul(&'a Tensor),
    Scale(f64),
    Exp,
    MaxWith(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(shape_err!("tensor needs at least one extent"));
    }
    if let Some(pos) = shape.iter().position(|&e| e == 0) {
        return Err(shape_err!("extent {pos} of {shape:?} is zero"));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn create(shape: &[usize], fill: Fill<'_>) -> Result<Self> {
        let len = check_shape(shape)?;
        let data = match fill {
            Fill::Zeros => vec![0.0; len],
            Fill::Constant(c) => {
                if !c.is_finite() {
                    return Err(Error::Domain(format!("fill value {c} is not finite")));
                }
                vec![c; len]
            }
            Fill::Uniform { lo, hi, rng } => {
                if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                    return Err(Error::Domain(format!("bad uniform range [{lo}, {hi})")));
                }
                (0..len).map(|_| rng.uniform(lo, hi)).collect()
            }
            Fill::Normal { mean, std, rng } => {
                if !(mean.is_finite() && std.is_finite() && std >= 0.0) {
                    return Err(Error::Domain(format!("bad normal parameters mean={mean} std={std}")));
                }
                (0..len).map(|_| rng.normal(mean, std)).collect()
            }
        };
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::create(shape, Fill::Zeros)
    }

    /// Builds a tensor from row-major data. Rejects non-finite values.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != data.len() {
            return Err(shape_err!("shape {shape:?} needs {len} values, got {}", data.len()));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("element {i} is not finite")));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    /// Internal constructor for kernels whose output shape is known to be valid.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        debug_assert!(shape.iter().all(|&e| e > 0));
        Self { shape, data }
    }

    pub(crate) fn zeros_like(&self) -> Self {
        Self { shape: self.shape.clone(), data: vec![0.0; self.data.len()] }
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

    fn flat_index(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() {
            return Err(shape_err!("index {index:?} has wrong rank for shape {:?}", self.shape));
        }
        let mut flat = 0;
        for (&i, &extent) in index.iter().zip(&self.shape) {
            if i >= extent {
                return Err(shape_err!("index {index:?} out of bounds for shape {:?}", self.shape));
            }
            flat = flat * extent + i;
        }
        Ok(flat)
    }

    pub fn get(&self, index: &[usize]) -> Result<f64> {
        Ok(self.data[self.flat_index(index)?])
    }

    pub fn set(&mut self, index: &[usize], value: f64) -> Result<()> {
        let i = self.flat_index(index)?;
        self.data[i] = value;
        Ok(())
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        Ok(Self { shape: shape.to_vec(), data: self.data })
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.data.len() / self.shape[0];
        &self.data[i * cols..(i + 1) * cols]
    }

    /// Leading-axis slice `[start, end)` copied into a new tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.shape[0] {
            return Err(shape_err!("row range {start}..{end} invalid for shape {:?}", self.shape));
        }
        let stride = self.data.len() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Self { shape, data: self.data[start * stride..end * stride].to_vec() })
    }

    /// Gathers leading-axis entries in the given order.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(shape_err!("gather needs at least one row"));
        }
        let stride = self.data.len() / self.shape[0];
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            if r >= self.shape[0] {
                return Err(shape_err!("row {r} out of bounds for shape {:?}", self.shape));
            }
            data.extend_from_slice(&self.data[r * stride..(r + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Ok(Self { shape, data })
    }

    pub fn elementwise(&self, op: Elementwise<'_>) -> Result<Self> {
        let zip = |other: &Tensor, f: fn(f64, f64) -> f64| -> Result<Vec<f64>> {
            if other.shape != self.shape {
                return Err(shape_err!("elementwise shapes differ: {:?} vs {:?}", self.shape, other.shape));
            }
            Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect())
        };
        let data = match op {
            Elementwise::Add(b) => zip(b, |a, b| a + b)?,
            Elementwise::Sub(b) => zip(b, |a, b| a - b)?,
            Elementwise::Mul(b) => zip(b, |a, b| a * b)?,
            Elementwise::Scale(s) => self.data.iter().map(|&a| a * s).collect(),
            Elementwise::Exp => self.data.iter().map(|&a| a.exp()).collect(),
            Elementwise::MaxWith(s) => self.data.iter().map(|&a| a.max(s)).collect(),
        };
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("{op:?} produced a non-finite value")));
        }
        Ok(Self { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.elementwise(Elementwise::Add(other))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.elementwise(Elementwise::Sub(other))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.elementwise(Elementwise::Mul(other))
    }

    pub fn scale(&self, s: f64) -> Result<Self> {
        self.elementwise(Elementwise::Scale(s))
    }

    pub fn exp(&self) -> Result<Self> {
        self.elementwise(Elementwise::Exp)
    }

    pub fn max_with(&self, s: f64) -> Result<Self> {
        self.elementwise(Elementwise::MaxWith(s))
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut t = Self::zeros(&[n, n])?;
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        Ok(t)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// `C = A · B` for rank-2 operands.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(shape_err!("matmul needs rank-2 operands, got {:?} and {:?}", a.shape, b.shape));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(shape_err!("matmul inner extents differ: {:?} x {:?}", a.shape, b.shape));
    }
    let mut c = vec![0.0; m * n];
    gemm(&a.data, &b.data, &mut c, m, k, n);
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("matmul overflowed".into()));
    }
    Ok(Tensor::from_parts(vec![m, n], c))
}

// Kernels below work on raw row-major slices. Summation order over the inner
// extent is always ascending, so results do not depend on how callers batch.

/// `c[m,n] += a[m,k] · b[k,n]`
pub(crate) fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_ip * b_pj;
            }
        }
    }
}

/// `c[k,n] += a[m,k]ᵀ · b[m,n]`
pub(crate) fn gemm_at_b(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let c_row = &mut c[p * n..(p + 1) * n];
            for (c_pj, &b_ij) in c_row.iter_mut().zip(b_row) {
                *c_pj += a_ip * b_ij;
            }
        }
    }
}

/// `c[m,k] += a[m,n] · b[k,n]ᵀ`
pub(crate) fn gemm_a_bt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let c_row = &mut c[i * k..(i + 1) * k];
        for (p, c_ip) in c_row.iter_mut().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            *c_ip += acc;
        }
    }
}
