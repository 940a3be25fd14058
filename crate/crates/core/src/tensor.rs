//! Dense row-major tensors and the handful of neural primitives the model
//! needs.
//!
//! Every reduction runs in a fixed loop order, so identical inputs give
//! bit-identical outputs regardless of thread count.

use std::cell::Cell;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::scalar::Scalar;

pub const MAX_RANK: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

/// Multiply-accumulates executed by the matrix products on this thread
/// since the last [`reset_mac_count`].
pub fn mac_count() -> u64 {
    MACS.with(|c| c.get())
}

pub fn reset_mac_count() {
    MACS.with(|c| c.set(0));
}

fn record_macs(n: usize) {
    MACS.with(|c| c.set(c.get() + n as u64));
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.len() > MAX_RANK {
            return Err(Error::Invalid(format!(
                "rank {} exceeds {MAX_RANK}",
                shape.len()
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "Tensor::new",
                left: shape.to_vec(),
                right: vec![data.len()],
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(
            shape.len() <= MAX_RANK,
            "rank {} exceeds {MAX_RANK}",
            shape.len()
        );
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Shape {
                    op: "from_rows",
                    left: vec![cols],
                    right: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(&[rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension of a matrix view (product of all but the last axis).
    pub fn rows(&self) -> usize {
        match self.shape.split_last() {
            Some((_, lead)) => lead.iter().product(),
            None => 1,
        }
    }

    /// Trailing dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() || shape.len() > MAX_RANK {
            return Err(Error::Shape {
                op: "reshape",
                left: self.shape,
                right: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Converts every element to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn transpose(&self) -> Result<Self> {
        let [r, c] = self.matrix_dims("transpose")?;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::new(&[c, r], out)
    }

    /// Elementwise sum with a tensor of identical shape.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "add")?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a + b)
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    /// Adds a bias vector to every row.
    pub fn add_row_vector(&mut self, bias: &Self) -> Result<()> {
        if bias.len() != self.cols() {
            return Err(Error::Shape {
                op: "add_row_vector",
                left: self.shape.clone(),
                right: bias.shape.clone(),
            });
        }
        let c = self.cols();
        for row in self.data.chunks_mut(c) {
            for (a, &b) in row.iter_mut().zip(&bias.data) {
                *a += b;
            }
        }
        Ok(())
    }

    /// Column sums of a matrix (length = cols), accumulated top to bottom.
    pub fn sum_rows(&self) -> Self {
        let c = self.cols();
        let mut out = vec![T::zero(); c];
        for row in self.data.chunks(c) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        Self {
            shape: vec![c],
            data: out,
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str) -> Result<[usize; 2]> {
        match self.shape[..] {
            [r, c] => Ok([r, c]),
            _ => Err(Error::Shape {
                op,
                left: self.shape.clone(),
                right: vec![],
            }),
        }
    }
}

/// `out += a · b` for row-major `a: m×k`, `b: k×p`. Each output element
/// accumulates over `k` in ascending order.
fn gemm_acc<T: Scalar>(m: usize, k: usize, p: usize, a: &[T], b: &[T], out: &mut [T]) {
    record_macs(m * k * p);
    for i in 0..m {
        let orow = &mut out[i * p..(i + 1) * p];
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * p..(kk + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Matrix product `a · b`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [m, k] = a.matrix_dims("matmul")?;
    let [k2, p] = b.matrix_dims("matmul")?;
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![T::zero(); m * p];
    gemm_acc(m, k, p, &a.data, &b.data, &mut out);
    Tensor::new(&[m, p], out)
}

/// `aᵀ · b` without materializing the transpose. Sums run over the shared
/// leading axis in ascending order.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [r, m] = a.matrix_dims("matmul_tn")?;
    let [r2, p] = b.matrix_dims("matmul_tn")?;
    if r != r2 {
        return Err(Error::Shape {
            op: "matmul_tn",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    record_macs(r * m * p);
    let mut out = vec![T::zero(); m * p];
    for t in 0..r {
        let arow = &a.data[t * m..(t + 1) * m];
        let brow = &b.data[t * p..(t + 1) * p];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * p..(i + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(&[m, p], out)
}

/// `a · bᵀ`.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [_, k] = a.matrix_dims("matmul_nt")?;
    let [_, k2] = b.matrix_dims("matmul_nt")?;
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul_nt",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    matmul(a, &b.transpose()?)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if !x.all_finite() {
        return Err(Error::NonFinite("softmax_rows input".into()));
    }
    let mut out = x.clone();
    let c = x.cols();
    if c == 0 {
        return Ok(out);
    }
    for row in out.data.chunks_mut(c) {
        softmax_in_place(row);
    }
    Ok(out)
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Normalized rows plus the statistics a backward pass needs.
#[derive(Clone, Debug)]
pub struct LayerNormCache<T> {
    /// `(x − mean) / sqrt(var + eps)` per row.
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Per-row layer normalization followed by the affine `gamma · x̂ + beta`.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    layer_norm_cached(x, gamma, beta, eps).map(|(y, _)| y)
}

pub fn layer_norm_cached<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let d = x.cols();
    if gamma.len() != d || beta.len() != d {
        return Err(Error::Shape {
            op: "layer_norm",
            left: x.shape.clone(),
            right: gamma.shape.clone(),
        });
    }
    if eps <= T::zero() {
        return Err(Error::Invalid("layer_norm eps must be positive".into()));
    }
    let n = T::lit(d as f64);
    let mut xhat = x.clone();
    let mut y = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows());
    for (hrow, yrow) in xhat.data.chunks_mut(d).zip(y.data.chunks_mut(d)) {
        let mean = hrow.iter().copied().sum::<T>() / n;
        let var = hrow.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + eps).sqrt();
        inv_std.push(inv);
        for ((h, yv), (&g, &b)) in hrow
            .iter_mut()
            .zip(yrow.iter_mut())
            .zip(gamma.data.iter().zip(&beta.data))
        {
            *h = (*h - mean) * inv;
            *yv = g * *h + b;
        }
    }
    Ok((y, LayerNormCache { xhat, inv_std }))
}

fn gelu_consts<T: Scalar>() -> (T, T) {
    (
        T::lit((2.0 / std::f64::consts::PI).sqrt()),
        T::lit(0.044715),
    )
}

/// GELU, tanh approximation.
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let (c, a) = gelu_consts::<T>();
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

/// Derivative of [`gelu_scalar`].
pub fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let (c, a) = gelu_consts::<T>();
    let half = T::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

/// I.i.d. standard normal samples. Draws are made in `f64` so the stream
/// is the same for every scalar type.
pub fn randn<T: Scalar>(rng: &mut RngState, shape: &[usize]) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z)
        })
        .collect();
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f32]]) -> Tensor<f32> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_value() {
        let i2 = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = m(&[&[3.0, 4.0], &[5.0, 6.0]]);
        assert_eq!(matmul(&i2, &b).unwrap(), b);
        let a = m(&[&[1.0, 2.0]]);
        let c = m(&[&[3.0], &[4.0]]);
        assert_eq!(matmul(&a, &c).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_mismatch_names_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let err = matmul(&a, &a).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn transposed_products_agree_with_plain() {
        let mut rng = RngState::new(3);
        let a: Tensor<f64> = randn(&mut rng, &[4, 3]);
        let b: Tensor<f64> = randn(&mut rng, &[4, 5]);
        let c: Tensor<f64> = randn(&mut rng, &[5, 3]);
        let tn = matmul_tn(&a, &b).unwrap();
        let plain = matmul(&a.transpose().unwrap(), &b).unwrap();
        assert!(tn.max_abs_diff(&plain) < 1e-12);
        let nt = matmul_nt(&a, &c).unwrap();
        let plain = matmul(&a, &c.transpose().unwrap()).unwrap();
        assert_eq!(nt, plain);
    }

    #[test]
    fn mac_counter_counts_products() {
        reset_mac_count();
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[3, 5]);
        matmul(&a, &b).unwrap();
        assert_eq!(mac_count(), 30);
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&m(&[&[0.0, 0.0]])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&m(&[&[1000.0, 1000.0, 1000.0]])).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let s = softmax_rows(&m(&[&[0.0, 3f32.ln()]])).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-6);
        assert!((s.data()[1] - 0.75).abs() < 1e-6);
        assert!(matches!(
            softmax_rows(&m(&[&[f32::NAN, 0.0]])),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::<f32>::full(&[3], 1.0);
        let zeros = Tensor::<f32>::zeros(&[3]);
        let y = layer_norm(&m(&[&[2.0, 2.0, 2.0]]), &ones, &zeros, 1e-5).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);

        let g = Tensor::<f64>::full(&[2], 1.0);
        let b = Tensor::<f64>::zeros(&[2]);
        let x = Tensor::from_rows(&[&[1.0f64, -1.0]]).unwrap();
        let y = layer_norm(&x, &g, &b, 1e-12).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-9 && (y.data()[1] + 1.0).abs() < 1e-9);

        let g = Tensor::<f32>::zeros(&[3]);
        let b = Tensor::<f32>::full(&[3], 5.0);
        let y = layer_norm(&m(&[&[1.0, 7.0, -3.0]]), &g, &b, 1e-5).unwrap();
        assert_eq!(y.data(), &[5.0, 5.0, 5.0]);

        assert!(layer_norm(&m(&[&[1.0, 2.0, 3.0]]), &g, &b, 0.0).is_err());
    }

    /// Φ(x) by composite Simpson quadrature of the standard normal density
    /// over `[0, x]`.
    fn normal_cdf(x: f64) -> f64 {
        let n = 2000;
        let h = x / n as f64;
        let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut acc = pdf(0.0) + pdf(x);
        for i in 1..n {
            acc += pdf(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        0.5 + acc * h / 3.0
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu_scalar(0.0f32), 0.0);
        assert!((gelu_scalar(20.0f32) - 20.0).abs() < 1e-5);
        assert!(gelu_scalar(-20.0f32).abs() < 1e-5);
        assert!((gelu_scalar(1.0f64) - 1.0 * normal_cdf(1.0)).abs() < 1e-3);
        for x in [-3.0, -1.5, -0.5, 0.5, 2.0, 3.5] {
            assert!((gelu_scalar(x) - x * normal_cdf(x)).abs() < 2e-3, "{x}");
        }
        let mut prev = 0.0f64;
        for i in 1..400 {
            let v = gelu_scalar(i as f64 * 0.025);
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for i in -40..40 {
            let x = i as f64 * 0.1;
            let h = 1e-6;
            let fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad_scalar(x)).abs() < 1e-7, "x={x}");
        }
    }

    #[test]
    fn randn_determinism_and_moments() {
        let a: Tensor<f32> = randn(&mut RngState::new(42), &[100]);
        let b: Tensor<f32> = randn(&mut RngState::new(42), &[100]);
        assert_eq!(a, b);
        let big: Tensor<f64> = randn(&mut RngState::new(7), &[100_000]);
        let n = big.len() as f64;
        let mean = big.data().iter().sum::<f64>() / n;
        let var = big.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
        let empty: Tensor<f32> = randn(&mut RngState::new(1), &[0]);
        assert!(empty.is_empty());
    }
}
