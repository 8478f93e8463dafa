//! Dense f64 tensors with row-major flat storage.
//!
//! `Tensor` is the plain value carrier used everywhere: dataset tokens,
//! parameter values, exported maps. Gradient bookkeeping lives on the
//! [`crate::tape::Tape`], not here; a tensor joins a computation by being
//! pushed onto a tape as a leaf.

use std::fmt;

/// Result alias for tensor and tape operations.
pub type Result<T> = std::result::Result<T, TensorError>;

/// Errors raised by tensor construction, tape ops, and the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Two operands cannot be combined under the named primitive.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A single operand has a shape the primitive cannot accept.
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    /// Flat data length disagrees with the product of the shape.
    DataLength { expected: usize, got: usize },
    /// `backward` was called on a non-scalar output.
    NotScalar { op: &'static str, shape: Vec<usize> },
    /// `backward` was called twice on the same tape.
    TapeConsumed,
    /// A NaN or Inf was detected where finite values are required.
    NonFinite { context: String },
    /// Two forward evaluations of a supposedly deterministic function differed.
    NonDeterministic { context: &'static str },
    /// A parameter had no gradient when the optimizer needed one.
    MissingGrad { param: String },
    /// A parameter name was registered twice.
    DuplicateParam { name: String },
    /// Catch-all for invalid op arguments (bad axis, bad kernel size, ...).
    BadArgument { op: &'static str, reason: String },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch, lhs={lhs:?} rhs={rhs:?}")
            }
            TensorError::InvalidShape { op, shape, reason } => {
                write!(f, "{op}: invalid shape {shape:?}: {reason}")
            }
            TensorError::DataLength { expected, got } => {
                write!(f, "data length mismatch: expected {expected}, got {got}")
            }
            TensorError::NotScalar { op, shape } => {
                write!(f, "{op}: expected a scalar, got shape {shape:?}")
            }
            TensorError::TapeConsumed => {
                write!(f, "backward already ran on this tape; re-record the graph first")
            }
            TensorError::NonFinite { context } => {
                write!(f, "non-finite value detected in {context}")
            }
            TensorError::NonDeterministic { context } => {
                write!(f, "{context}: two forward evaluations differ; fix all randomness first")
            }
            TensorError::MissingGrad { param } => {
                write!(f, "parameter '{param}' has no gradient")
            }
            TensorError::DuplicateParam { name } => {
                write!(f, "parameter name '{name}' already registered")
            }
            TensorError::BadArgument { op, reason } => write!(f, "{op}: {reason}"),
        }
    }
}

impl std::error::Error for TensorError {}

/// An n-dimensional array of f64, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `data.len() == product(shape)`.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                expected,
                got: data.len(),
            });
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

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    /// A scalar carried as a shape-[1] tensor.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// 2-D convenience constructor from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(TensorError::InvalidShape {
                    op: "from_rows",
                    shape: vec![r, row.len()],
                    reason: "ragged rows".into(),
                });
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last axis; 1 for rank-0 (which we do not construct).
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// 2-D element access for tests and small utilities.
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    /// True when every element is finite. NaN or Inf anywhere makes the
    /// tensor an error state that callers must surface, never ignore.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn assert_finite(&self, context: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(TensorError::NonFinite {
                context: context.to_string(),
            })
        }
    }

    /// Reshape without copying; the element count must match.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(TensorError::DataLength {
                expected,
                got: self.data.len(),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Rows of a 2-D tensor reordered so that row i of the result is row
    /// `perm[i]` of the input.
    pub fn permuted_rows(&self, perm: &[usize]) -> Tensor {
        debug_assert_eq!(self.rank(), 2);
        debug_assert_eq!(perm.len(), self.shape[0]);
        let c = self.shape[1];
        let mut data = Vec::with_capacity(self.data.len());
        for &i in perm {
            data.extend_from_slice(&self.data[i * c..(i + 1) * c]);
        }
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }
}

/// A uniformly random permutation of 0..n.
pub fn random_permutation(n: usize, rng: &mut impl rand::Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    perm
}

/// Standard-normal init scaled by `std`, drawn row-major.
pub fn randn(shape: &[usize], std: f64, rng: &mut impl rand::Rng) -> Tensor {
    use rand::distributions::Distribution;
    let dist = rand_distr_standard_normal();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng) * std).collect();
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

// rand's StandardNormal lives in rand_distr in some versions; rand 0.8 ships
// it behind rand::distributions::Standard only for uniform. Use Box-Muller.
fn rand_distr_standard_normal() -> BoxMuller {
    BoxMuller
}

struct BoxMuller;

impl rand::distributions::Distribution<f64> for BoxMuller {
    fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        // Draw two uniforms every call; one output is discarded. Wasteful but
        // keeps the draw count per element fixed, which matters for
        // reproducibility across refactors.
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen::<f64>();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}
