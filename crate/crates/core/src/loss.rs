//! Convex per-sample losses `L(y, t)` of the scalar network output.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Loss {
    /// `scale · (y − t)²`. `scale = 1` is the plain L2 loss used for
    /// training; `scale = 0.5` gives the textbook half-squared error.
    Squared { scale: f64 },
    /// `log(1 + exp(−t·y))` for labels `t ∈ {−1, +1}`.
    Logistic,
}

impl Default for Loss {
    fn default() -> Self {
        Loss::l2()
    }
}

impl Loss {
    pub fn l2() -> Self {
        Loss::Squared { scale: 1.0 }
    }

    pub fn half_squared() -> Self {
        Loss::Squared { scale: 0.5 }
    }

    pub fn value(&self, y: f64, t: f64) -> f64 {
        match *self {
            Loss::Squared { scale } => scale * (y - t) * (y - t),
            Loss::Logistic => softplus(-t * y),
        }
    }

    /// `∂L/∂y`
    pub fn d1(&self, y: f64, t: f64) -> f64 {
        match *self {
            Loss::Squared { scale } => 2.0 * scale * (y - t),
            Loss::Logistic => -t * sigmoid(-t * y),
        }
    }

    /// `∂²L/∂y²`
    pub fn d2(&self, y: f64, t: f64) -> f64 {
        match *self {
            Loss::Squared { scale } => 2.0 * scale,
            Loss::Logistic => {
                let s = sigmoid(t * y);
                t * t * s * (1.0 - s)
            }
        }
    }

    /// A global lower bound `α ≤ L''`.
    pub fn curvature_lower_bound(&self) -> f64 {
        match *self {
            Loss::Squared { scale } => 2.0 * scale,
            Loss::Logistic => 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Loss::Squared { scale } if !(scale.is_finite() && scale > 0.0) => {
                Err(Error::InvalidArgument(format!("squared-loss scale must be positive, got {scale}")))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Loss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Loss::Squared { scale } if *scale == 1.0 => f.write_str("l2"),
            Loss::Squared { scale } => write!(f, "squared*{scale}"),
            Loss::Logistic => f.write_str("logistic"),
        }
    }
}

impl FromStr for Loss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" | "squared" => Ok(Loss::l2()),
            "half_squared" => Ok(Loss::half_squared()),
            "logistic" => Ok(Loss::Logistic),
            other => Err(Error::Config(format!("unknown loss `{other}`"))),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inputs (`N × n_0`, one sample per row) with their targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    inputs: Matrix,
    targets: Vec<f64>,
}

impl Batch {
    pub fn new(inputs: Matrix, targets: Vec<f64>) -> Result<Self> {
        if inputs.rows() != targets.len() {
            return Err(Error::Dimension(format!(
                "{} inputs but {} targets",
                inputs.rows(),
                targets.len()
            )));
        }
        Ok(Self { inputs, targets })
    }

    pub fn from_samples(xs: &[Vec<f64>], targets: &[f64]) -> Result<Self> {
        if xs.is_empty() {
            return Err(Error::EmptyBatch);
        }
        Self::new(Matrix::from_rows(xs)?, targets.to_vec())
    }

    pub fn single(x: &[f64], t: f64) -> Result<Self> {
        Self::new(Matrix::from_vec(1, x.len(), x.to_vec())?, vec![t])
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn input(&self, s: usize) -> &[f64] {
        self.inputs.row(s)
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    /// Rows `idx` as a new batch.
    pub fn select(&self, idx: &[usize]) -> Result<Batch> {
        if idx.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let d = self.inputs.cols();
        let mut data = Vec::with_capacity(idx.len() * d);
        let mut targets = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(self.inputs.row(i));
            targets.push(self.targets[i]);
        }
        Batch::new(Matrix::from_vec(idx.len(), d, data)?, targets)
    }
}
