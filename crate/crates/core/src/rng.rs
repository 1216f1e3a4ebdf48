//! Seeded random streams and symmetric weight initializers.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// A reproducible random stream keyed by `(master_seed, stream_index)`.
///
/// Streams are ChaCha8 counter streams: the same key always produces the
/// same sequence, and distinct stream indices under one master seed never
/// overlap. Monte Carlo trial `i` uses stream index `i`, which makes results
/// independent of scheduling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub master_seed: u64,
    pub stream_index: u64,
}

impl RngStream {
    pub fn new(master_seed: u64, stream_index: u64) -> Self {
        Self {
            master_seed,
            stream_index,
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.stream_index);
        rng
    }

    /// A stream for a different purpose (data, shuffling, ...) that keeps
    /// this stream's index but mixes `purpose` into the master seed.
    pub fn derive(&self, purpose: u64) -> Self {
        Self {
            master_seed: splitmix64(self.master_seed ^ splitmix64(purpose)),
            stream_index: self.stream_index,
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitKind {
    Gaussian,
    Uniform,
    /// Two-point ±√m2.
    Rademacher,
}

impl fmt::Display for InitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitKind::Gaussian => "gaussian",
            InitKind::Uniform => "uniform",
            InitKind::Rademacher => "rademacher",
        })
    }
}

impl FromStr for InitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" | "normal" => Ok(InitKind::Gaussian),
            "uniform" => Ok(InitKind::Uniform),
            "rademacher" => Ok(InitKind::Rademacher),
            other => Err(Error::Config(format!("unknown distribution `{other}`"))),
        }
    }
}

/// Zero-mean symmetric weight distribution with second moment
/// `m2 = gain / fan_in`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitDistribution {
    pub kind: InitKind,
    pub fan_in: usize,
    pub gain: f64,
}

impl InitDistribution {
    pub fn new(kind: InitKind, fan_in: usize) -> Result<Self> {
        Self::with_gain(kind, fan_in, 1.0)
    }

    /// `gain = 2` gives the rectifier-scaled variant.
    pub fn with_gain(kind: InitKind, fan_in: usize, gain: f64) -> Result<Self> {
        if fan_in == 0 {
            return Err(Error::InvalidArgument("fan_in must be positive".into()));
        }
        if !(gain.is_finite() && gain > 0.0) {
            return Err(Error::InvalidArgument(format!("gain must be positive, got {gain}")));
        }
        Ok(Self { kind, fan_in, gain })
    }

    pub fn gaussian(fan_in: usize) -> Result<Self> {
        Self::new(InitKind::Gaussian, fan_in)
    }

    pub fn m2(&self) -> f64 {
        self.gain / self.fan_in as f64
    }

    /// Exact `E(w^t)` of the distribution.
    pub fn exact_moment(&self, t: u32) -> f64 {
        if t % 2 == 1 {
            return 0.0;
        }
        let m2 = self.m2();
        let half = t / 2;
        match self.kind {
            // (t-1)!! σ^t
            InitKind::Gaussian => (1..=half).map(|i| (2 * i - 1) as f64).product::<f64>() * m2.powi(half as i32),
            // a^t / (t+1) with a = √(3 m2)
            InitKind::Uniform => (3.0 * m2).powi(half as i32) / (t as f64 + 1.0),
            InitKind::Rademacher => m2.powi(half as i32),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let m2 = self.m2();
        match self.kind {
            InitKind::Gaussian => m2.sqrt() * rng.sample::<f64, _>(StandardNormal),
            InitKind::Uniform => {
                let a = (3.0 * m2).sqrt();
                rng.random_range(-a..a)
            }
            InitKind::Rademacher => {
                if rng.random::<bool>() {
                    m2.sqrt()
                } else {
                    -m2.sqrt()
                }
            }
        }
    }
}

/// A `rows × cols` matrix of iid draws. The fan-in is the layer's input
/// width, which is the row count under the `y^l = W^lᵀ y^{l-1}` convention.
pub fn sample_weight_matrix<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    dist: &InitDistribution,
    rng: &mut R,
) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::Dimension(format!("{rows}x{cols} weight matrix")));
    }
    if dist.fan_in != rows {
        return Err(Error::InvalidArgument(format!(
            "fan_in {} does not match {rows} input rows",
            dist.fan_in
        )));
    }
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data)
}

/// Sample mean of `w^t` over `n_samples` draws.
pub fn empirical_moment<R: Rng + ?Sized>(
    dist: &InitDistribution,
    order: u32,
    n_samples: usize,
    rng: &mut R,
) -> Result<f64> {
    if order == 0 || n_samples == 0 {
        return Err(Error::InvalidArgument(
            "moment order and sample count must be positive".into(),
        ));
    }
    let mut acc = 0.0;
    for _ in 0..n_samples {
        acc += dist.sample(rng).powi(order as i32);
    }
    Ok(acc / n_samples as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_streams_repeat() {
        let dist = InitDistribution::gaussian(1).unwrap();
        let s = RngStream::new(42, 7);
        let a = sample_weight_matrix(1, 1, &dist, &mut s.rng()).unwrap();
        let b = sample_weight_matrix(1, 1, &dist, &mut s.rng()).unwrap();
        assert_eq!(a, b);
        let c = sample_weight_matrix(1, 1, &dist, &mut RngStream::new(42, 8).rng()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn gaussian_column_statistics() {
        let dist = InitDistribution::gaussian(1000).unwrap();
        let w = sample_weight_matrix(1000, 1, &dist, &mut RngStream::new(3, 0).rng()).unwrap();
        let n = 1000.0;
        let mean = w.as_slice().iter().sum::<f64>() / n;
        let var = w.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        // 4 standard errors of the mean: 4·√(m2/n)
        assert!(mean.abs() <= 4.0 * (dist.m2() / n).sqrt(), "mean {mean}");
        assert!((var - 0.001).abs() <= 0.1 * 0.001, "variance {var}");
    }

    #[test]
    fn rademacher_is_two_point() {
        let dist = InitDistribution::new(InitKind::Rademacher, 4).unwrap();
        let w = sample_weight_matrix(4, 50, &dist, &mut RngStream::new(1, 1).rng()).unwrap();
        assert!(w.as_slice().iter().all(|&v| v == 0.5 || v == -0.5));
    }

    #[test]
    fn dimension_and_fan_in_errors() {
        let dist = InitDistribution::gaussian(3).unwrap();
        let mut rng = RngStream::new(0, 0).rng();
        assert!(matches!(sample_weight_matrix(0, 2, &dist, &mut rng), Err(Error::Dimension(_))));
        assert!(sample_weight_matrix(2, 2, &dist, &mut rng).is_err());
        assert!(InitDistribution::gaussian(0).is_err());
    }

    #[test]
    fn gaussian_moments() {
        let n = 16;
        let dist = InitDistribution::gaussian(n).unwrap();
        let mut rng = RngStream::new(11, 0).rng();
        let m1 = empirical_moment(&dist, 1, 200_000, &mut rng).unwrap();
        let m2 = empirical_moment(&dist, 2, 200_000, &mut rng).unwrap();
        assert!(m1.abs() < 4.0 * (dist.m2() / 200_000.0).sqrt());
        assert!((m2 - 1.0 / n as f64).abs() < 0.02 / n as f64);

        let unit = InitDistribution::gaussian(1).unwrap();
        let m4 = empirical_moment(&unit, 4, 1_000_000, &mut RngStream::new(12, 0).rng()).unwrap();
        assert!((m4 - 3.0).abs() < 0.02 * 3.0, "m4 {m4}");
        assert_eq!(unit.exact_moment(4), 3.0);
        assert_eq!(unit.exact_moment(6), 15.0);
    }

    #[test]
    fn odd_moments_vanish_for_every_family() {
        let samples = 1_000_000;
        for kind in [InitKind::Gaussian, InitKind::Uniform, InitKind::Rademacher] {
            let dist = InitDistribution::new(kind, 8).unwrap();
            for (t, seed) in [(1u32, 5u64), (3, 6)] {
                let est = empirical_moment(&dist, t, samples, &mut RngStream::new(seed, 0).rng()).unwrap();
                // stderr of the mean of w^t is √(E w^{2t} / n)
                let se = (dist.exact_moment(2 * t) / samples as f64).sqrt();
                assert!(est.abs() < 5.0 * se, "{kind} t={t}: {est} vs se {se}");
            }
            let m2 = empirical_moment(&dist, 2, 200_000, &mut RngStream::new(9, 0).rng()).unwrap();
            assert!((m2 / dist.m2() - 1.0).abs() < 0.02, "{kind}");
        }
    }

    #[test]
    fn derived_streams_differ() {
        let base = RngStream::new(5, 2);
        assert_ne!(base.derive(1), base.derive(2));
        assert_eq!(base.derive(1).stream_index, 2);
        assert_eq!(base.derive(1), base.derive(1));
    }
}
