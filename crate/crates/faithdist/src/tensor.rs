//! Dense row-major f64 tensors and the elementary numeric operations used
//! throughout the crate: affine maps, ReLU, temperature softmax, KL
//! divergence and cross entropy.
//!
//! KL argument order is `kl_divergence(prediction, target)`: the divergence
//! of the target (second argument, teacher) from the prediction (first
//! argument, student). Conventions differ across libraries, so call sites
//! should not reorder casually.

use std::sync::Arc;

use crate::error::{Error, Result};

/// An immutable dense tensor of 64-bit floats, stored row-major.
///
/// The buffer is shared on clone, so recording a large weight tensor on a
/// gradient tape costs a pointer copy, not a memcpy.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor, rejecting non-finite entries and shape/data length
    /// disagreement.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                detail: format!("shape {:?} implies {} entries, got {}", shape, expected, data.len()),
            });
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor entry {v}")));
        }
        Ok(Self { shape, data: Arc::new(data) })
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: Arc::new(vec![0.0; n]) }
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Self::new(vec![1], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_vector(&self) -> bool {
        self.shape.len() == 1
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn as_scalar(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::ShapeMismatch {
                op: "as_scalar",
                detail: format!("shape {:?} is not scalar", self.shape),
            })
        }
    }

    /// Matrix rows, for 2-D tensors.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Matrix columns, for 2-D tensors.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn get(&self, i: usize) -> f64 {
        self.data[i]
    }

    /// Unchecked construction for internally computed values (gradients and
    /// intermediates may legitimately carry non-finite entries that are
    /// detected downstream).
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data: Arc::new(data) }
    }

    /// Mutable access to the buffer, copying it first if shared.
    pub fn data_mut(&mut self) -> &mut Vec<f64> {
        Arc::make_mut(&mut self.data)
    }

    pub(crate) fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_raw(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub fn linf_distance(&self, other: &Tensor) -> f64 {
        self.data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `Wx + b` for a matrix `W`, vector `x` and vector `b`.
pub fn affine(w: &Tensor, x: &Tensor, b: &Tensor) -> Result<Tensor> {
    if w.shape().len() != 2 || !x.is_vector() || !b.is_vector() {
        return Err(Error::ShapeMismatch {
            op: "affine",
            detail: format!("W {:?}, x {:?}, b {:?}", w.shape(), x.shape(), b.shape()),
        });
    }
    let (m, n) = (w.rows(), w.cols());
    if x.len() != n || b.len() != m {
        return Err(Error::ShapeMismatch {
            op: "affine",
            detail: format!("W is {m}x{n} but x has {} entries and b has {}", x.len(), b.len()),
        });
    }
    let mut out = Vec::with_capacity(m);
    let wd = w.data();
    let xd = x.data();
    for i in 0..m {
        let row = &wd[i * n..(i + 1) * n];
        let dot: f64 = row.iter().zip(xd).map(|(a, b)| a * b).sum();
        out.push(dot + b.get(i));
    }
    Ok(Tensor::from_raw(vec![m], out))
}

/// Elementwise `max(0, z)`.
pub fn relu(z: &Tensor) -> Tensor {
    z.map(|v| v.max(0.0))
}

/// Temperature softmax `softmax(z / T)`, stabilised by subtracting the max.
pub fn softmax_t(z: &Tensor, temperature: f64) -> Result<Tensor> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    let scaled: Vec<f64> = z.data().iter().map(|&v| v / temperature).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(Tensor::from_raw(
        z.shape().to_vec(),
        exps.into_iter().map(|e| e / sum).collect(),
    ))
}

/// KL divergence of the target `q` from the prediction `p`:
/// `sum_i q_i ln(q_i / p_i)`, with `0 ln(0/.) = 0`.
///
/// Returns `+inf` where some `p_i = 0` has `q_i > 0`.
pub fn kl_divergence(p: &Tensor, q: &Tensor) -> Result<f64> {
    check_probability("kl_divergence", p)?;
    check_probability("kl_divergence", q)?;
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch {
            op: "kl_divergence",
            detail: format!("p has {} entries, q has {}", p.len(), q.len()),
        });
    }
    let mut total = 0.0;
    for (&pi, &qi) in p.data().iter().zip(q.data()) {
        if qi == 0.0 {
            continue;
        }
        if pi == 0.0 {
            return Ok(f64::INFINITY);
        }
        total += qi * (qi / pi).ln();
    }
    Ok(total.max(0.0))
}

fn check_probability(op: &'static str, p: &Tensor) -> Result<()> {
    if p.data().iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidParameter(format!("{op}: negative probability entry")));
    }
    let sum: f64 = p.data().iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter(format!(
            "{op}: probabilities sum to {sum}, expected 1"
        )));
    }
    Ok(())
}

/// Cross entropy `-log softmax(logits)[y]`, computed in log space.
pub fn cross_entropy(logits: &Tensor, y: usize) -> Result<f64> {
    if y >= logits.len() {
        return Err(Error::IndexOutOfRange { index: y, len: logits.len() });
    }
    Ok(-log_softmax_at(logits.data(), y))
}

/// `log softmax(z)[i]` without forming the intermediate exponentials.
pub(crate) fn log_softmax_at(z: &[f64], i: usize) -> f64 {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    (z[i] - max) - log_sum
}
