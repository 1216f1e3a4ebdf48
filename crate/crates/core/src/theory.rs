//! Monte Carlo checks of curvature statistics at random initialization.
//!
//! Every trial `i` draws from `RngStream::new(master_seed, i)`, so results do
//! not depend on how trials are scheduled across threads.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diff::{hhat_grad_product_cases_from_trace, output_gradient_from_trace, output_hessian_vp};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm_sq};
use crate::loss::Loss;
use crate::network::{forward, init_network, Architecture, InitScheme};
use crate::rng::{sample_weight_matrix, InitDistribution, InitKind, RngStream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// The same vector every trial, rescaled to unit norm.
    Fixed(Vec<f64>),
    /// A fresh Gaussian direction per trial.
    FreshUnit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct McConfig {
    pub arch: Architecture,
    pub init: InitScheme,
    pub input: InputMode,
    pub n_trials: usize,
    pub master_seed: u64,
}

impl McConfig {
    pub fn new(arch: Architecture, n_trials: usize, master_seed: u64) -> Self {
        Self {
            arch,
            init: InitScheme::gaussian(),
            input: InputMode::FreshUnit,
            n_trials,
            master_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_trials < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 trials, got {}", self.n_trials)));
        }
        self.arch.require_single_output()?;
        if let InputMode::Fixed(x) = &self.input {
            if x.len() != self.arch.input_dim() {
                return Err(Error::Dimension(format!(
                    "fixed input of length {} for n_0 = {}",
                    x.len(),
                    self.arch.input_dim()
                )));
            }
            if norm_sq(x) == 0.0 {
                return Err(Error::ZeroDirection);
            }
        }
        Ok(())
    }

    fn draw_input(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match &self.input {
            InputMode::Fixed(x) => unit(x.clone()),
            InputMode::FreshUnit => random_unit(self.arch.input_dim(), rng),
        }
    }
}

fn unit(mut x: Vec<f64>) -> Vec<f64> {
    let n = norm_sq(&x).sqrt();
    x.iter_mut().for_each(|v| *v /= n);
    x
}

/// Uniform direction on the unit sphere.
pub fn random_unit<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let x: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        if norm_sq(&x) > 0.0 {
            return unit(x);
        }
    }
}

/// Runs `trial(i, rng_i)` for every trial index in parallel and returns the
/// results in trial order.
pub fn run_trials<T, F>(n_trials: usize, master_seed: u64, trial: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, &mut ChaCha8Rng) -> Result<T> + Sync,
{
    (0..n_trials)
        .into_par_iter()
        .map(|i| trial(i, &mut RngStream::new(master_seed, i as u64).rng()))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub n_trials: usize,
    pub mean: f64,
    /// Unbiased.
    pub variance: f64,
    pub stderr: f64,
    pub min: f64,
    pub max: f64,
}

impl McSummary {
    /// Fixed-order two-pass summary.
    pub fn from_samples(xs: &[f64]) -> Result<Self> {
        if xs.len() < 2 {
            return Err(Error::InvalidArgument("need at least two samples".into()));
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let variance = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
        Ok(Self {
            n_trials: xs.len(),
            mean,
            variance,
            stderr: (variance / n).sqrt(),
            min: xs.iter().copied().fold(f64::INFINITY, f64::min),
            max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }

    /// `E(x²)` estimate.
    pub fn second_moment(&self) -> f64 {
        self.variance * (self.n_trials as f64 - 1.0) / self.n_trials as f64 + self.mean * self.mean
    }

    /// `|mean| ≤ k·stderr`.
    pub fn mean_within(&self, k: f64) -> bool {
        self.mean.abs() <= k * self.stderr
    }
}

/// `(Σ_{k=1..L} n_k)² / n_0³`.
pub fn predicted_variance_scale(widths: &[usize]) -> f64 {
    let hidden: f64 = widths[1..].iter().map(|&n| n as f64).sum();
    hidden * hidden / (widths[0] as f64).powi(3)
}

/// Per-trial `gᵀĤg` with `g` the output gradient.
pub fn mc_hhat_samples(cfg: &McConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    cfg.arch.require_linear("the output-Hessian statistics")?;
    run_trials(cfg.n_trials, cfg.master_seed, |_, rng| {
        let x = cfg.draw_input(rng);
        let net = init_network(&cfg.arch, cfg.init, rng)?;
        let trace = forward(&net, &x)?;
        let g = output_gradient_from_trace(&trace, &net)?;
        let hg = hhat_grad_product_cases_from_trace(&trace, &net)?;
        Ok(dot(&g.values, &hg))
    })
}

pub fn mc_hhat_stats(cfg: &McConfig) -> Result<McSummary> {
    McSummary::from_samples(&mc_hhat_samples(cfg)?)
}

/// Empirical `δ(ε) = Prob(|X − limit| > ε)` on a grid of `ε`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaTable {
    pub eps: Vec<f64>,
    pub delta: Vec<f64>,
}

impl DeltaTable {
    pub fn from_deviations(deviations: &[f64], grid: &[f64]) -> Result<Self> {
        if deviations.is_empty() || grid.is_empty() {
            return Err(Error::InvalidArgument("empty deviations or grid".into()));
        }
        if grid.windows(2).any(|w| w[0] >= w[1]) || grid[0] <= 0.0 {
            return Err(Error::InvalidArgument("grid must be positive and strictly increasing".into()));
        }
        let mut sorted: Vec<f64> = deviations.iter().map(|d| d.abs()).collect();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len() as f64;
        let delta = grid
            .iter()
            .map(|&e| {
                let at_most = sorted.partition_point(|&d| d <= e);
                (sorted.len() - at_most) as f64 / n
            })
            .collect();
        Ok(Self { eps: grid.to_vec(), delta })
    }

    /// `δ(ε)` from the nearest grid point at or below `ε`; `1` below the
    /// grid. `δ` is non-increasing, so this never understates it.
    pub fn at(&self, eps: f64) -> f64 {
        let i = self.eps.partition_point(|&e| e <= eps);
        if i == 0 {
            1.0
        } else {
            self.delta[i - 1]
        }
    }

    /// `0.005, 0.010, ..., max`.
    pub fn default_grid(max: f64) -> Vec<f64> {
        let steps = (max / 0.005).round() as usize;
        (1..=steps).map(|k| k as f64 * 0.005).collect()
    }
}

/// `Σ_{l=1..L} m_l / m_0`, read from the multipliers or, for constant-width
/// hidden layers, with all multipliers equal to one.
pub fn multiplier_sum(arch: &Architecture) -> Result<f64> {
    Ok(multipliers(arch)?.iter().skip(1).sum::<f64>() / multipliers(arch)?[0])
}

/// `m_0..m_L` of a constant-shape architecture.
pub fn multipliers(arch: &Architecture) -> Result<Vec<f64>> {
    if let Some(m) = arch.width_multipliers() {
        return Ok(m.to_vec());
    }
    let w = arch.widths();
    let l = arch.depth();
    if w[..l].iter().all(|&n| n == w[0]) {
        Ok(vec![1.0; l + 1])
    } else {
        Err(Error::Architecture(format!(
            "widths {w:?} carry no multipliers and are not constant-width"
        )))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradNormReport {
    pub summary: McSummary,
    /// `(Σ m_l/m_0)·‖y^0‖²`.
    pub limit: f64,
    pub delta: DeltaTable,
}

/// Distribution of `‖g‖²` for the output gradient at unit-norm inputs.
pub fn mc_grad_norm(cfg: &McConfig, grid: &[f64]) -> Result<GradNormReport> {
    cfg.validate()?;
    cfg.arch.require_linear("the gradient-norm statistics")?;
    let limit = multiplier_sum(&cfg.arch)?;
    let samples = run_trials(cfg.n_trials, cfg.master_seed, |_, rng| {
        let x = cfg.draw_input(rng);
        let net = init_network(&cfg.arch, cfg.init, rng)?;
        Ok(output_gradient_from_trace(&forward(&net, &x)?, &net)?.norm_sq())
    })?;
    let deviations: Vec<f64> = samples.iter().map(|s| s - limit).collect();
    Ok(GradNormReport {
        summary: McSummary::from_samples(&samples)?,
        limit,
        delta: DeltaTable::from_deviations(&deviations, grid)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Thm2Inputs {
    pub eps: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// `m_0..m_L`.
    pub multipliers: Vec<f64>,
    pub n: f64,
    pub y0_norm_sq: f64,
    pub delta: DeltaTable,
}

impl Thm2Inputs {
    pub fn validate(&self) -> Result<()> {
        let scalars = [self.eps, self.alpha, self.beta, self.gamma, self.n, self.y0_norm_sq];
        if scalars.iter().any(|v| !(v.is_finite() && *v > 0.0)) || self.multipliers.iter().any(|m| !(*m > 0.0)) {
            return Err(Error::InvalidArgument("bound inputs must be strictly positive".into()));
        }
        if self.multipliers.len() < 2 {
            return Err(Error::InvalidArgument("need multipliers m_0..m_L".into()));
        }
        if self.inner() <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "ε/β = {} is not below (Σ m_l/m_0)·‖y^0‖² = {}",
                self.eps / self.beta,
                self.inner() + self.eps / self.beta
            )));
        }
        Ok(())
    }

    fn inner(&self) -> f64 {
        let m0 = self.multipliers[0];
        let s: f64 = self.multipliers[1..].iter().sum::<f64>() / m0;
        s * self.y0_norm_sq - self.eps / self.beta
    }
}

/// Lower bound on `Prob(ĝᵀ𝓗ĝ > ε)`:
/// `(1−δ(2ε/α))·(1−δ(ε))·(1 − γ·Σ_{kk'} m_k m_{k'} / (n·m_0³·(ε/β)²·(Σ m_l/m_0·‖y^0‖² − ε/β)²))`.
/// The value may be negative, in which case it carries no information.
pub fn thm2_bound(inp: &Thm2Inputs) -> Result<f64> {
    inp.validate()?;
    let m0 = inp.multipliers[0];
    let sum_m: f64 = inp.multipliers[1..].iter().sum();
    let r = inp.eps / inp.beta;
    let tail = inp.gamma * sum_m * sum_m / (inp.n * m0.powi(3) * r * r * inp.inner().powi(2));
    Ok((1.0 - inp.delta.at(2.0 * inp.eps / inp.alpha)) * (1.0 - inp.delta.at(inp.eps)) * (1.0 - tail))
}

/// Per-trial quantities of the single-sample positivity experiment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositivitySample {
    /// `ĝᵀ𝓗ĝ` along the loss gradient.
    pub hess_proj: f64,
    /// `‖g_w‖²` of the output gradient.
    pub grad_norm_sq: f64,
    /// `gᵀĤg` of the output gradient.
    pub hhat_quad: f64,
    pub d1: f64,
    pub d2: f64,
}

/// Single-sample trials with a random `±1` target. With one sample
/// `ĝ = ±g_w/‖g_w‖`, so `ĝᵀ𝓗ĝ = L''·‖g_w‖² + L'·g_wᵀĤg_w/‖g_w‖²`, which
/// is evaluated exactly from the closed-form `Ĥg` product.
pub fn mc_positivity_samples(cfg: &McConfig, loss: &Loss) -> Result<Vec<PositivitySample>> {
    cfg.validate()?;
    loss.validate()?;
    cfg.arch.require_linear("the curvature-positivity experiment")?;
    run_trials(cfg.n_trials, cfg.master_seed, |_, rng| {
        let x = cfg.draw_input(rng);
        let net = init_network(&cfg.arch, cfg.init, rng)?;
        let t = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let trace = forward(&net, &x)?;
        let g = output_gradient_from_trace(&trace, &net)?;
        let hg = hhat_grad_product_cases_from_trace(&trace, &net)?;
        let y = trace.output();
        let (d1, d2) = (loss.d1(y, t), loss.d2(y, t));
        let gn = g.norm_sq();
        let hhat_quad = dot(&g.values, &hg);
        Ok(PositivitySample {
            hess_proj: d2 * gn + d1 * hhat_quad / gn,
            grad_norm_sq: gn,
            hhat_quad,
            d1,
            d2,
        })
    })
}

/// Fraction of trials with `ĝᵀ𝓗ĝ > ε`.
pub fn positivity_fraction(samples: &[PositivitySample], eps: f64) -> f64 {
    samples.iter().filter(|s| s.hess_proj > eps).count() as f64 / samples.len() as f64
}

pub fn mc_curvature_positivity(cfg: &McConfig, loss: &Loss, eps: f64) -> Result<f64> {
    Ok(positivity_fraction(&mc_positivity_samples(cfg, loss)?, eps))
}

/// Upper end of the one-sided Wilson score interval for a binomial
/// proportion `p̂` over `n` trials at normal quantile `z`.
pub fn wilson_upper(p_hat: f64, n: usize, z: f64) -> f64 {
    let n = n as f64;
    let z2 = z * z;
    let center = p_hat + z2 / (2.0 * n);
    let half = z * (p_hat * (1.0 - p_hat) / n + z2 / (4.0 * n * n)).sqrt();
    ((center + half) / (1.0 + z2 / n)).min(1.0)
}

/// One-sided 95% normal quantile.
pub const Z_95: f64 = 1.6448536269514722;

/// `γ̂ = Var(gᵀĤg)·n·m_0³ / Σ_{kk'} m_k m_{k'}`: the constant that makes the
/// width-scaling law match the measured second moment.
pub fn backfit_gamma(hhat_quads: &[f64], multipliers: &[f64], n: f64) -> Result<f64> {
    let s = McSummary::from_samples(hhat_quads)?;
    let sum_m: f64 = multipliers[1..].iter().sum();
    Ok(s.second_moment() * n * multipliers[0].powi(3) / (sum_m * sum_m))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thm2Row {
    pub eps: f64,
    pub empirical: f64,
    pub wilson_upper: f64,
    /// `None` when the bound's preconditions fail at this `ε`.
    pub bound: Option<f64>,
    /// Empirical probability is statistically consistent with the bound.
    pub consistent: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thm2Report {
    pub n: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub limit: f64,
    pub delta: DeltaTable,
    pub rows: Vec<Thm2Row>,
}

/// Compares the empirical positivity probability with the evaluated bound
/// at matched parameters: `α` from the loss, `β = max |L'|` over trials,
/// `γ` back-fitted, `δ(·)` from the same trials' gradient norms.
pub fn thm2_comparison(cfg: &McConfig, loss: &Loss, eps_grid: &[f64]) -> Result<Thm2Report> {
    let samples = mc_positivity_samples(cfg, loss)?;
    let m = multipliers(&cfg.arch)?;
    let n = cfg.arch.widths()[0] as f64 / m[0];
    let limit = multiplier_sum(&cfg.arch)?;
    let deviations: Vec<f64> = samples.iter().map(|s| s.grad_norm_sq - limit).collect();
    let max_eps = eps_grid.iter().copied().fold(0.0, f64::max);
    let alpha = loss.curvature_lower_bound();
    let delta = DeltaTable::from_deviations(&deviations, &DeltaTable::default_grid((2.0 * max_eps / alpha.max(1e-12)).max(max_eps) + 1.0))?;
    let beta = samples.iter().map(|s| s.d1.abs()).fold(0.0, f64::max);
    let quads: Vec<f64> = samples.iter().map(|s| s.hhat_quad).collect();
    let gamma = backfit_gamma(&quads, &m, n)?;
    let rows = eps_grid
        .iter()
        .map(|&eps| {
            let empirical = positivity_fraction(&samples, eps);
            let upper = wilson_upper(empirical, samples.len(), Z_95);
            let bound = thm2_bound(&Thm2Inputs {
                eps,
                alpha,
                beta,
                gamma,
                multipliers: m.clone(),
                n,
                y0_norm_sq: 1.0,
                delta: delta.clone(),
            })
            .ok();
            let consistent = bound.is_none_or(|b| b <= 0.0 || upper >= b);
            Thm2Row {
                eps,
                empirical,
                wilson_upper: upper,
                bound,
                consistent,
            }
        })
        .collect();
    Ok(Thm2Report {
        n,
        alpha,
        beta,
        gamma,
        limit,
        delta,
        rows,
    })
}

/// Per-trial `g^{uᵀ} Ĥ^v g^u` for two unit inputs `u`, `v`. With
/// `same_input` the second input is the first, which reduces to
/// [`mc_hhat_samples`] trial by trial.
pub fn mc_cross_sample(cfg: &McConfig, same_input: bool) -> Result<Vec<f64>> {
    cfg.validate()?;
    cfg.arch.require_linear("the cross-sample statistics")?;
    run_trials(cfg.n_trials, cfg.master_seed, |_, rng| {
        let u = cfg.draw_input(rng);
        let net = init_network(&cfg.arch, cfg.init, rng)?;
        let v = if same_input {
            u.clone()
        } else {
            random_unit(cfg.arch.input_dim(), rng)
        };
        let gu = output_gradient_from_trace(&forward(&net, &u)?, &net)?;
        Ok(dot(&gu.values, &output_hessian_vp(&net, &v, &gu.values)?))
    })
}

/// Which expectation of the three-factor product is measured.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BilinearVariant {
    /// `v1ᵀWᵀWv2 · v3ᵀWᵀWv4 · v5ᵀWᵀWv6`
    Full,
    /// First factor through row `j` only: `(W_j·v1)(W_j·v2) · v3ᵀWᵀWv4 · v5ᵀWᵀWv6`
    RowMasked,
    /// `(WᵀWv1)_j (WᵀWv2)_j · v3ᵀWᵀWv4`
    EntryMasked,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BilinearRow {
    pub variant: BilinearVariant,
    pub measured: McSummary,
    /// The printed width factor times the inner products.
    pub printed: f64,
    /// Leading term under `m2 = gain/n_{l-1}`.
    pub fan_in_leading: f64,
    /// Exact Gaussian expectation, where available.
    pub gaussian_exact: Option<f64>,
}

/// Monte Carlo estimates of the three bilinear expectations for
/// `W ∈ R^{n_in × n_out}` and fixed `v1..v6 ∈ R^{n_out}`, reported next to
/// the candidate closed forms. No verdict is attached.
pub fn mc_bilinear_identity(
    n_in: usize,
    n_out: usize,
    kind: InitKind,
    vs: &[Vec<f64>; 6],
    n_trials: usize,
    master_seed: u64,
) -> Result<Vec<BilinearRow>> {
    if vs.iter().any(|v| v.len() != n_out) {
        return Err(Error::Dimension(format!("bilinear vectors must have length n_out = {n_out}")));
    }
    let dist = InitDistribution::new(kind, n_in)?;
    let j = 0;
    let draws = run_trials(n_trials, master_seed, |_, rng| {
        let w = sample_weight_matrix(n_in, n_out, &dist, rng)?;
        let wv: Vec<Vec<f64>> = vs.iter().map(|v| w.matvec(v)).collect::<Result<_>>()?;
        let q = |a: usize, b: usize| dot(&wv[a], &wv[b]);
        let full = q(0, 1) * q(2, 3) * q(4, 5);
        let row = wv[0][j] * wv[1][j] * q(2, 3) * q(4, 5);
        let wtw = |a: usize| w.t_matvec(&wv[a]);
        let entry = wtw(0)?[j] * wtw(1)?[j] * q(2, 3);
        Ok([full, row, entry])
    })?;
    let column = |c: usize| draws.iter().map(|d| d[c]).collect::<Vec<f64>>();
    let ip = |a: usize, b: usize| dot(&vs[a], &vs[b]);
    let (ni, no) = (n_in as f64, n_out as f64);
    let m2 = dist.m2();
    let prod3 = ip(0, 1) * ip(2, 3) * ip(4, 5);
    let gaussian = kind == InitKind::Gaussian;
    Ok(vec![
        BilinearRow {
            variant: BilinearVariant::Full,
            measured: McSummary::from_samples(&column(0))?,
            printed: (no / ni).powi(3) * prod3,
            fan_in_leading: (ni * m2).powi(3) * prod3,
            gaussian_exact: gaussian.then(|| gaussian_triple_product(vs, n_in, m2)),
        },
        BilinearRow {
            variant: BilinearVariant::RowMasked,
            measured: McSummary::from_samples(&column(1))?,
            printed: no * no / ni.powi(3) * prod3,
            fan_in_leading: m2 * (ni * m2).powi(2) * prod3,
            gaussian_exact: None,
        },
        BilinearRow {
            variant: BilinearVariant::EntryMasked,
            measured: McSummary::from_samples(&column(2))?,
            printed: no * no / ni.powi(3) * ip(0, 1) * ip(2, 3),
            fan_in_leading: (vs[0][j] * vs[1][j] * (ni * m2).powi(2) + m2 * ip(0, 1)) * (ni * m2) * ip(2, 3),
            gaussian_exact: None,
        },
    ])
}

/// `E[Π_i (x·u_i)]` for `x ~ N(0, m2·I)`: sum over perfect matchings.
fn wick(us: &[&[f64]], m2: f64) -> f64 {
    fn rec(us: &[&[f64]]) -> f64 {
        if us.is_empty() {
            return 1.0;
        }
        let (first, rest) = (us[0], &us[1..]);
        (0..rest.len())
            .map(|k| {
                let others: Vec<&[f64]> = rest.iter().enumerate().filter(|(i, _)| *i != k).map(|(_, v)| *v).collect();
                dot(first, rest[k]) * rec(&others)
            })
            .sum()
    }
    if us.len() % 2 == 1 {
        return 0.0;
    }
    m2.powi(us.len() as i32 / 2) * rec(us)
}

/// Exact `E(v1ᵀWᵀWv2 · v3ᵀWᵀWv4 · v5ᵀWᵀWv6)` for Gaussian `W` with `n_in`
/// iid rows, splitting the triple row sum by which row indices coincide.
fn gaussian_triple_product(vs: &[Vec<f64>; 6], n_in: usize, m2: f64) -> f64 {
    let v: Vec<&[f64]> = vs.iter().map(|x| x.as_slice()).collect();
    let f = |p: usize| wick(&[v[2 * p], v[2 * p + 1]], m2);
    let ff = |p: usize, q: usize| wick(&[v[2 * p], v[2 * p + 1], v[2 * q], v[2 * q + 1]], m2);
    let n = n_in as f64;
    n * (n - 1.0) * (n - 2.0) * f(0) * f(1) * f(2)
        + n * (n - 1.0) * (ff(0, 1) * f(2) + ff(0, 2) * f(1) + ff(1, 2) * f(0))
        + n * wick(&v, m2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Activation;

    fn cfg(widths: &[usize], trials: usize) -> McConfig {
        McConfig::new(Architecture::new(widths.to_vec(), Activation::Identity).unwrap(), trials, 17)
    }

    #[test]
    fn variance_scale_arithmetic() {
        assert_eq!(predicted_variance_scale(&[4, 4, 1]), 25.0 / 64.0);
        assert!((predicted_variance_scale(&[64, 64, 64, 64, 1]) - 37249.0 / 262144.0).abs() < 1e-15);
        let a = predicted_variance_scale(&[16, 32, 32, 1]);
        let b = predicted_variance_scale(&[32, 32, 32, 1]);
        assert!((a / b - 8.0).abs() < 1e-12);
    }

    #[test]
    fn single_layer_trials_vanish() {
        let s = mc_hhat_stats(&cfg(&[5, 1], 50)).unwrap();
        assert_eq!((s.mean, s.variance, s.min, s.max), (0.0, 0.0, 0.0, 0.0));
        let g = mc_grad_norm(&cfg(&[5, 1], 50), &[0.1]).unwrap();
        assert!((g.summary.mean - 1.0).abs() < 1e-12 && g.summary.variance < 1e-25);
    }

    #[test]
    fn summary_fields() {
        let s = McSummary::from_samples(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.mean, 2.5);
        assert!((s.variance - 5.0 / 3.0).abs() < 1e-15);
        assert!((s.stderr - (s.variance / 4.0).sqrt()).abs() < 1e-15);
        assert!(McSummary::from_samples(&[1.0]).is_err());
    }

    #[test]
    fn trials_are_order_independent() {
        let c = cfg(&[6, 6, 6, 1], 40);
        let a = mc_hhat_samples(&c).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| mc_hhat_samples(&c).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn cross_sample_degenerates() {
        let c = cfg(&[5, 4, 3, 1], 20);
        let same = mc_cross_sample(&c, true).unwrap();
        let direct = mc_hhat_samples(&c).unwrap();
        for (a, b) in same.iter().zip(&direct) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn bound_arithmetic() {
        let zero = DeltaTable::from_deviations(&[0.0], &[0.01]).unwrap();
        let mut inp = Thm2Inputs {
            eps: 0.1,
            alpha: 2.0,
            beta: 1.0,
            gamma: 1.0,
            multipliers: vec![1.0; 5],
            n: 10_000.0,
            y0_norm_sq: 1.0,
            delta: DeltaTable { eps: vec![1e-9], delta: vec![0.0] },
        };
        let b = thm2_bound(&inp).unwrap();
        assert!((b - (1.0 - 16.0 / (0.01 * 15.21) / 10_000.0)).abs() < 1e-12);
        assert!((b - 0.9894806).abs() < 1e-7);
        inp.n = 100.0;
        assert!((thm2_bound(&inp).unwrap() + 0.0519395).abs() < 1e-6);
        inp.n = 1000.0;
        assert!(thm2_bound(&inp).unwrap() > -0.0519395);
        inp.eps = 5.0;
        assert!(thm2_bound(&inp).is_err());
        assert_eq!(zero.at(0.5), 0.0);
    }

    #[test]
    fn delta_table_is_conservative() {
        let t = DeltaTable::from_deviations(&[0.1, -0.3, 0.5, 2.0], &[0.2, 0.4, 1.0]).unwrap();
        assert_eq!(t.delta, vec![0.75, 0.5, 0.25]);
        assert_eq!(t.at(0.1), 1.0);
        assert_eq!(t.at(0.3), 0.75);
        assert_eq!(t.at(5.0), 0.25);
    }

    #[test]
    fn single_layer_positivity_is_certain() {
        let c = cfg(&[6, 1], 200);
        let samples = mc_positivity_samples(&c, &Loss::l2()).unwrap();
        assert!(samples.iter().all(|s| (s.hess_proj - 2.0).abs() < 1e-12));
        assert_eq!(positivity_fraction(&samples, 1.9), 1.0);
    }

    #[test]
    fn wick_fourth_moment() {
        let e: &[f64] = &[1.0];
        assert_eq!(wick(&[e, e, e, e], 1.0), 3.0);
        assert_eq!(wick(&[e; 6], 1.0), 15.0);
    }

    #[test]
    fn scalar_bilinear_is_sixth_moment() {
        let one = [vec![1.0], vec![1.0], vec![1.0], vec![1.0], vec![1.0], vec![1.0]];
        let rows = mc_bilinear_identity(1, 1, InitKind::Gaussian, &one, 4000, 3).unwrap();
        assert_eq!(rows[0].gaussian_exact, Some(15.0));
        assert_eq!(rows[0].printed, 1.0);
        let rows = mc_bilinear_identity(1, 1, InitKind::Rademacher, &one, 100, 3).unwrap();
        assert!(rows[0].measured.variance < 1e-25 && rows[0].measured.mean == 1.0);
    }
}
