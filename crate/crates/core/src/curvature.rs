//! The Gauss-Newton / functional split of the loss Hessian, projections
//! along the gradient, and the online curvature estimator.

use serde::{Deserialize, Serialize};

use crate::diff::{
    analytic_hhat, fd_output_hessian, hvp_exact_weights, per_sample_output_gradients, FdStep,
};
use crate::eigen::{min_eigenvalue, EigenMethod};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};
use crate::loss::{Batch, Loss};
use crate::network::{forward_batch, Activation, Network};

/// Dense `𝓗 = G + H` for one batch.
#[derive(Clone, Debug)]
pub struct HessianDecomposition {
    pub g: Matrix,
    pub h: Matrix,
    pub hessian: Matrix,
    pub batch_id: Option<String>,
    pub step: Option<usize>,
}

/// `G = (1/N) Σ L''(y_s) g_s g_sᵀ` and `H = (1/N) Σ L'(y_s) Ĥ^s`.
///
/// Linear networks use the closed-form `Ĥ^s`; rectified networks fall back
/// to a finite-difference output Hessian per sample.
pub fn decompose(net: &Network, batch: &Batch, loss: &Loss, cap: usize) -> Result<HessianDecomposition> {
    net.arch().require_single_output()?;
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let p = net.arch().param_count();
    if p > cap {
        return Err(Error::Capacity { params: p, cap });
    }
    let ys = forward_batch(net, batch.inputs())?.outputs();
    let grads = per_sample_output_gradients(net, batch)?;
    let n = batch.len() as f64;
    let mut g = Matrix::zeros(p, p);
    let mut h = Matrix::zeros(p, p);
    for s in 0..batch.len() {
        let (y, t) = (ys[s], batch.targets()[s]);
        let c2 = loss.d2(y, t) / n;
        let gs = &grads[s].values;
        for a in 0..p {
            let ca = c2 * gs[a];
            if ca != 0.0 {
                for (dst, gb) in g.row_mut(a).iter_mut().zip(gs) {
                    *dst += ca * gb;
                }
            }
        }
        let c1 = loss.d1(y, t) / n;
        if c1 != 0.0 {
            let hhat = match net.arch().activation() {
                Activation::Identity => analytic_hhat(net, batch.input(s), cap)?,
                Activation::Relu => fd_output_hessian(net, batch.input(s), FdStep::Auto, cap)?,
            };
            h.add_scaled(c1, &hhat)?;
        }
    }
    let hessian = g.add(&h)?;
    Ok(HessianDecomposition {
        g,
        h,
        hessian,
        batch_id: None,
        step: None,
    })
}

/// Symmetric linear map `v ↦ Mv` on `R^P`.
pub trait CurvatureOperator {
    fn dim(&self) -> usize;
    fn apply(&self, v: &[f64]) -> Result<Vec<f64>>;
}

impl CurvatureOperator for Matrix {
    fn dim(&self) -> usize {
        self.cols()
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        self.matvec(v)
    }
}

/// Matrix-free `𝓗·v` (finite differences of gradients).
pub struct HessianOperator<'a> {
    pub net: &'a Network,
    pub batch: &'a Batch,
    pub loss: Loss,
}

impl CurvatureOperator for HessianOperator<'_> {
    fn dim(&self) -> usize {
        self.net.arch().param_count()
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        Ok(crate::diff::hvp(self.net, self.batch, &self.loss, v)?.values)
    }
}

/// Matrix-free exact `G·v`.
pub struct GgnOperator<'a> {
    pub net: &'a Network,
    pub batch: &'a Batch,
    pub loss: Loss,
}

impl CurvatureOperator for GgnOperator<'_> {
    fn dim(&self) -> usize {
        self.net.arch().param_count()
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        Ok(crate::diff::ggn_vp(self.net, self.batch, &self.loss, v)?.values)
    }
}

/// Wraps a closure as an operator.
pub struct FnOperator<F> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&[f64]) -> Result<Vec<f64>>> CurvatureOperator for FnOperator<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        (self.f)(v)
    }
}

/// `ĝᵀMĝ` with `ĝ = g/‖g‖`.
pub fn curvature_projection<M: CurvatureOperator + ?Sized>(m: &M, g: &[f64]) -> Result<f64> {
    if g.len() != m.dim() {
        return Err(Error::Dimension(format!("direction of length {} for operator of size {}", g.len(), m.dim())));
    }
    let gn = norm(g);
    if gn == 0.0 {
        return Err(Error::ZeroDirection);
    }
    let unit: Vec<f64> = g.iter().map(|v| v / gn).collect();
    Ok(dot(&unit, &m.apply(&unit)?))
}

/// The three projections along a direction, computed matrix-free with
/// `H_ĝ := 𝓗_ĝ − G_ĝ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projections {
    pub hessian: f64,
    pub ggn: f64,
    pub functional: f64,
}

pub fn matrix_free_projections(net: &Network, batch: &Batch, loss: &Loss, g: &[f64]) -> Result<Projections> {
    let idx = net.arch().param_index();
    if g.len() != idx.len() {
        return Err(Error::Dimension(format!("direction of length {} for {} parameters", g.len(), idx.len())));
    }
    let gn = norm(g);
    if gn == 0.0 {
        return Err(Error::ZeroDirection);
    }
    let unit: Vec<f64> = g.iter().map(|v| v / gn).collect();
    let dir = idx.unflatten(&unit)?;
    let along = |ms: Vec<Matrix>| ms.iter().zip(&dir).map(|(m, d)| dot(m.as_slice(), d.as_slice())).sum::<f64>();
    // Exact products with activation masks held fixed: a finite-difference
    // step along g can cross ReLU kinks and return garbage.
    let (full, gv) = hvp_exact_weights(net, batch, loss, &dir)?;
    let hessian = along(full);
    let ggn = along(gv);
    Ok(Projections {
        hessian,
        ggn,
        functional: hessian - ggn,
    })
}

/// Smallest-eigenvalue check of a positive semidefinite candidate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PsdReport {
    pub min_eigenvalue: f64,
    pub frobenius: f64,
    /// `−1e-8·‖G‖_F`.
    pub threshold: f64,
    pub passed: bool,
    pub method: EigenMethod,
}

pub fn psd_check(g: &Matrix) -> Result<PsdReport> {
    let asym = g.max_asymmetry();
    let frobenius = g.frobenius_norm();
    if asym > 1e-8 * frobenius.max(1.0) {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }
    let mut sym = g.clone();
    sym.symmetrize();
    let (min_eigenvalue, method) = min_eigenvalue(&sym, 1e-8)?;
    let threshold = -1e-8 * frobenius;
    Ok(PsdReport {
        min_eigenvalue,
        frobenius,
        threshold,
        passed: min_eigenvalue >= threshold,
        method,
    })
}

/// `(L_{t+1} − L_t)/δ² + ‖g‖²/δ`. For an exactly quadratic loss this is
/// `½·gᵀ𝓗g`, not the full quadratic form.
pub fn estimate_curvature(loss_t: f64, loss_t1: f64, grad_norm_sq: f64, lr: f64) -> Result<f64> {
    if !(lr > 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
    }
    Ok((loss_t1 - loss_t) / (lr * lr) + grad_norm_sq / lr)
}

/// One training step's curvature measurements. The projection fields are
/// present only on probed steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvatureRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm_sq: f64,
    pub curv_estimate: Option<f64>,
    /// `½·gᵀ𝓗g = ½·‖g‖²·𝓗_ĝ`.
    pub curv_exact_half: Option<f64>,
    pub g_proj: Option<f64>,
    pub h_proj: Option<f64>,
    pub hess_proj: Option<f64>,
}
