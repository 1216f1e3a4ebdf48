//! Gradients, Hessian-vector products, and dense second-derivative oracles.
//!
//! Two families of second derivatives live here:
//!
//! * the Hessian `𝓗` of the batch-mean loss, reached matrix-free through
//!   [`hvp`] (central differences of gradients) and [`ggn_vp`] (exact
//!   Gauss-Newton product), or densely through [`fd_hessian`];
//! * the Hessian `Ĥ` of the raw scalar output of a linear network, available
//!   in closed form ([`analytic_hhat`]), as the closed-form product with the
//!   output gradient ([`hhat_grad_product_cases`]), as an exact matrix-free
//!   product ([`output_hessian_vp`]), and along a direction by finite
//!   differences ([`directional_output_curvature`]).

use crate::error::{Error, Result};
use crate::linalg::{dot, gemm, norm, Matrix, Op};
use crate::loss::{Batch, Loss};
use crate::network::{
    add_scaled_weights, forward, forward_batch, jacobian_apply, jacobian_apply_t, output_sensitivities,
    interlayer_jacobian, ActivationTrace, BatchTrace, Network,
};

/// Largest parameter count for which dense `P × P` matrices are built.
pub const DEFAULT_DENSE_CAP: usize = 20_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Averaging {
    PerSample,
    BatchMean,
}

/// Flat gradient in canonical parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientVector {
    pub values: Vec<f64>,
    pub averaging: Averaging,
}

impl GradientVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm_sq(&self) -> f64 {
        dot(&self.values, &self.values)
    }
}

fn check_capacity(p: usize, cap: usize) -> Result<()> {
    if p > cap {
        return Err(Error::Capacity { params: p, cap });
    }
    Ok(())
}

fn check_direction(net: &Network, v: &[f64]) -> Result<()> {
    let p = net.arch().param_count();
    if v.len() != p {
        return Err(Error::Dimension(format!("direction of length {} for {p} parameters", v.len())));
    }
    Ok(())
}

/// `∂y^L/∂z^k` for every layer: output sensitivities with inactive
/// rectified units zeroed. Index 0 is unused.
fn preactivation_sensitivities(trace: &ActivationTrace, net: &Network) -> Result<Vec<Vec<f64>>> {
    let mut a = output_sensitivities(trace, net)?;
    for (k, ak) in a.iter_mut().enumerate().skip(1) {
        for (i, v) in ak.iter_mut().enumerate() {
            if !trace.active(k, i) {
                *v = 0.0;
            }
        }
    }
    Ok(a)
}

/// Gradient of the scalar output with respect to every weight:
/// entry `(k, i, j)` is `a_{ki} · y^{k-1}_j`.
pub fn output_gradient(net: &Network, x: &[f64]) -> Result<GradientVector> {
    let trace = forward(net, x)?;
    output_gradient_from_trace(&trace, net)
}

pub fn output_gradient_from_trace(trace: &ActivationTrace, net: &Network) -> Result<GradientVector> {
    let b = preactivation_sensitivities(trace, net)?;
    let mut values = Vec::with_capacity(net.arch().param_count());
    for k in 1..=net.depth() {
        let y_prev = trace.y(k - 1);
        for &bi in &b[k] {
            values.extend(y_prev.iter().map(|yj| bi * yj));
        }
    }
    Ok(GradientVector {
        values,
        averaging: Averaging::PerSample,
    })
}

/// Backpropagates per-sample output cotangents `delta` (`N × 1`) and
/// returns weight-shaped gradients `Σ_s delta_s ∂y_s/∂W`.
fn backward(trace: &BatchTrace, net: &Network, delta: Matrix) -> Vec<Matrix> {
    let depth = net.depth();
    let mut grads: Vec<Option<Matrix>> = vec![None; depth];
    let mut delta = delta;
    for l in (1..=depth).rev() {
        let y_prev = &trace.ys[l - 1];
        let mut g = Matrix::zeros(y_prev.cols(), delta.cols());
        gemm(Op::T, y_prev, Op::N, &delta, 1.0, 0.0, &mut g);
        grads[l - 1] = Some(g);
        if l > 1 {
            let w = net.weight(l);
            let mut next = Matrix::zeros(delta.rows(), w.rows());
            gemm(Op::N, &delta, Op::T, w, 1.0, 0.0, &mut next);
            trace.apply_mask(l - 1, &mut next);
            delta = next;
        }
    }
    grads.into_iter().map(Option::unwrap).collect()
}

/// Batch-mean loss.
pub fn batch_loss(net: &Network, batch: &Batch, loss: &Loss) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let ys = forward_batch(net, batch.inputs())?.outputs();
    Ok(mean_loss(&ys, batch.targets(), loss))
}

fn mean_loss(ys: &[f64], ts: &[f64], loss: &Loss) -> f64 {
    ys.iter().zip(ts).map(|(&y, &t)| loss.value(y, t)).sum::<f64>() / ys.len() as f64
}

/// Batch-mean loss and its weight-shaped gradient.
pub fn loss_and_gradient(net: &Network, batch: &Batch, loss: &Loss) -> Result<(f64, Vec<Matrix>)> {
    net.arch().require_single_output()?;
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let trace = forward_batch(net, batch.inputs())?;
    let ys = trace.outputs();
    let n = ys.len() as f64;
    let delta: Vec<f64> = ys.iter().zip(batch.targets()).map(|(&y, &t)| loss.d1(y, t) / n).collect();
    let grads = backward(&trace, net, Matrix::from_vec(ys.len(), 1, delta)?);
    Ok((mean_loss(&ys, batch.targets(), loss), grads))
}

/// `(1/N) Σ_s L'(y_s) ∂y_s/∂W` in canonical order.
pub fn loss_gradient(net: &Network, batch: &Batch, loss: &Loss) -> Result<GradientVector> {
    let (_, grads) = loss_and_gradient(net, batch, loss)?;
    Ok(GradientVector {
        values: net.arch().param_index().flatten(&grads),
        averaging: Averaging::BatchMean,
    })
}

/// Hessian of the scalar output of a linear network, assembled entry by
/// entry from the five layer-offset cases (`l < k−1`, `l = k−1`, `l = k`,
/// `l = k+1`, `l > k+1`). Rows are `(k, i, j)`, columns `(l, u, v)`.
pub fn analytic_hhat(net: &Network, x: &[f64], cap: usize) -> Result<Matrix> {
    net.arch().require_linear("the closed-form output Hessian")?;
    net.arch().require_single_output()?;
    let p = net.arch().param_count();
    check_capacity(p, cap)?;
    let trace = forward(net, x)?;
    let a = output_sensitivities(&trace, net)?;
    let depth = net.depth();
    let widths = net.arch().widths();
    let idx = net.arch().param_index();

    // jac[l][m] = J_{l,m} for l < m
    let mut jac: Vec<Vec<Option<Matrix>>> = vec![vec![None; depth + 1]; depth + 1];
    for l in 0..depth {
        for m in l + 1..=depth {
            jac[l][m] = Some(interlayer_jacobian(&trace, net, l, m)?);
        }
    }
    let j_at = |from: usize, to: usize, r: usize, c: usize| jac[from][to].as_ref().unwrap()[(r, c)];

    let mut hhat = Matrix::zeros(p, p);
    for k in 1..=depth {
        let rows = idx.layer_range(k);
        let (n_in_k, n_out_k) = (widths[k - 1], widths[k]);
        for l in 1..=depth {
            if l == k {
                continue;
            }
            let cols = idx.layer_range(l);
            let (n_in_l, n_out_l) = (widths[l - 1], widths[l]);
            for i in 0..n_out_k {
                for j in 0..n_in_k {
                    let row = rows.start + i * n_in_k + j;
                    for u in 0..n_out_l {
                        for v in 0..n_in_l {
                            let value = if l + 1 < k {
                                a[k][i] * j_at(l, k - 1, u, j) * trace.y(l - 1)[v]
                            } else if l + 1 == k {
                                if j == u {
                                    a[k][i] * trace.y(l - 1)[v]
                                } else {
                                    0.0
                                }
                            } else if l == k + 1 {
                                if v == i {
                                    a[l][u] * trace.y(k - 1)[j]
                                } else {
                                    0.0
                                }
                            } else {
                                a[l][u] * j_at(k, l - 1, i, v) * trace.y(k - 1)[j]
                            };
                            hhat[(row, cols.start + u * n_in_l + v)] = value;
                        }
                    }
                }
            }
        }
    }
    Ok(hhat)
}

/// Which terms of the closed-form `Ĥg` product exist for weight layer `l`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerCase {
    First,
    Second,
    Interior,
    Penultimate,
    Last,
}

impl LayerCase {
    /// Classifies `l` in a depth-`L` network (`L ≥ 2`). Shallow networks
    /// collapse cases; the order below picks the one whose terms exist.
    pub fn classify(l: usize, depth: usize) -> Self {
        if l == 1 {
            LayerCase::First
        } else if l == depth {
            LayerCase::Last
        } else if l == 2 {
            LayerCase::Second
        } else if l + 1 == depth {
            LayerCase::Penultimate
        } else {
            LayerCase::Interior
        }
    }
}

/// `Σ_{ijk} Ĥ^{uvl}_{ijk} g^k_{ij}` for every `(l, u, v)`, evaluated per
/// layer from the closed-form case split without building `Ĥ`.
///
/// For layer `l` the product factors as `y^{l-1}_v·A_u + a_{lu}·B_v` with
///
/// * `next`:     `A += ‖a_{l+1}‖² y^l`
/// * `above`:    `A += Σ_{k>l+1} ‖a_k‖² J_{l,k-1} y^{k-1}`
/// * `previous`: `B += ‖y^{l-2}‖² a_{l-1}`
/// * `below`:    `B += Σ_{k<l-1} ‖y^{k-1}‖² J_{k,l-1}ᵀ a_k`
pub fn hhat_grad_product_cases(net: &Network, x: &[f64]) -> Result<Vec<f64>> {
    net.arch().require_linear("the closed-form Hessian-gradient product")?;
    net.arch().require_single_output()?;
    let trace = forward(net, x)?;
    hhat_grad_product_cases_from_trace(&trace, net)
}

pub fn hhat_grad_product_cases_from_trace(trace: &ActivationTrace, net: &Network) -> Result<Vec<f64>> {
    let depth = net.depth();
    let p = net.arch().param_count();
    if depth == 1 {
        return Ok(vec![0.0; p]);
    }
    let a = output_sensitivities(trace, net)?;
    let y = |l: usize| trace.y(l);
    let a_sq: Vec<f64> = a.iter().map(|v| dot(v, v)).collect();
    let y_sq: Vec<f64> = (0..=depth).map(|l| dot(y(l), y(l))).collect();

    let next = |l: usize, acc: &mut [f64]| {
        for (t, yv) in acc.iter_mut().zip(y(l)) {
            *t += a_sq[l + 1] * yv;
        }
    };
    let above = |l: usize, acc: &mut [f64]| -> Result<()> {
        for k in l + 2..=depth {
            let term = jacobian_apply(trace, net, l, k - 1, y(k - 1))?;
            for (t, v) in acc.iter_mut().zip(term) {
                *t += a_sq[k] * v;
            }
        }
        Ok(())
    };
    let previous = |l: usize, acc: &mut [f64]| {
        for (t, av) in acc.iter_mut().zip(&a[l - 1]) {
            *t += y_sq[l - 2] * av;
        }
    };
    let below = |l: usize, acc: &mut [f64]| -> Result<()> {
        for k in 1..l.saturating_sub(1) {
            let term = jacobian_apply_t(trace, net, k, l - 1, &a[k])?;
            for (t, v) in acc.iter_mut().zip(term) {
                *t += y_sq[k - 1] * v;
            }
        }
        Ok(())
    };

    let widths = net.arch().widths();
    let mut out = Vec::with_capacity(p);
    for l in 1..=depth {
        let mut big_a = vec![0.0; widths[l]];
        let mut big_b = vec![0.0; widths[l - 1]];
        match LayerCase::classify(l, depth) {
            LayerCase::First => {
                next(l, &mut big_a);
                above(l, &mut big_a)?;
            }
            LayerCase::Second => {
                previous(l, &mut big_b);
                next(l, &mut big_a);
                above(l, &mut big_a)?;
            }
            LayerCase::Interior => {
                above(l, &mut big_a)?;
                below(l, &mut big_b)?;
                next(l, &mut big_a);
                previous(l, &mut big_b);
            }
            LayerCase::Penultimate => {
                next(l, &mut big_a);
                previous(l, &mut big_b);
                below(l, &mut big_b)?;
            }
            LayerCase::Last => {
                previous(l, &mut big_b);
                below(l, &mut big_b)?;
            }
        }
        for u in 0..widths[l] {
            for v in 0..widths[l - 1] {
                out.push(y(l - 1)[v] * big_a[u] + a[l][u] * big_b[v]);
            }
        }
    }
    Ok(out)
}

/// `gᵀĤg` for one input, with `g` the output gradient.
pub fn hhat_grad_quadratic(net: &Network, x: &[f64]) -> Result<(f64, GradientVector)> {
    net.arch().require_linear("the closed-form Hessian-gradient product")?;
    net.arch().require_single_output()?;
    let trace = forward(net, x)?;
    let g = output_gradient_from_trace(&trace, net)?;
    let hg = hhat_grad_product_cases_from_trace(&trace, net)?;
    Ok((dot(&g.values, &hg), g))
}

/// Exact `Ĥ·v` for the output at `x` by forward-mode differentiation of the
/// output gradient. Rectified networks use the locally constant masks, which
/// is exact away from the measure-zero set of zero preactivations.
pub fn output_hessian_vp(net: &Network, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    net.arch().require_single_output()?;
    check_direction(net, v)?;
    let trace = forward(net, x)?;
    let idx = net.arch().param_index();
    let dirs = idx.unflatten(v)?;
    let depth = net.depth();
    let b = preactivation_sensitivities(&trace, net)?;
    let mask = |l: usize, vals: &mut Vec<f64>| {
        for (i, val) in vals.iter_mut().enumerate() {
            if !trace.active(l, i) {
                *val = 0.0;
            }
        }
    };

    // tangents of the layer outputs
    let mut y_dot = vec![vec![0.0; trace.y(0).len()]];
    for l in 1..=depth {
        let mut z = dirs[l - 1].t_matvec(trace.y(l - 1))?;
        let carried = net.weight(l).t_matvec(&y_dot[l - 1])?;
        z.iter_mut().zip(carried).for_each(|(a, c)| *a += c);
        mask(l, &mut z);
        y_dot.push(z);
    }
    // tangents of the preactivation sensitivities
    let mut b_dot = vec![Vec::new(); depth + 1];
    b_dot[depth] = vec![0.0];
    for l in (2..=depth).rev() {
        let mut t = dirs[l - 1].matvec(&b[l])?;
        let carried = net.weight(l).matvec(&b_dot[l])?;
        t.iter_mut().zip(carried).for_each(|(a, c)| *a += c);
        mask(l - 1, &mut t);
        b_dot[l - 1] = t;
    }
    let mut out = Vec::with_capacity(v.len());
    for l in 1..=depth {
        let (yp, ypd) = (trace.y(l - 1), &y_dot[l - 1]);
        for i in 0..b[l].len() {
            for j in 0..yp.len() {
                out.push(ypd[j] * b[l][i] + yp[j] * b_dot[l][i]);
            }
        }
    }
    Ok(out)
}

/// Step-size rule for [`fd_hessian`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FdStep {
    /// `h_a = ε_mach^{1/4} · (1 + |w_a|)` per coordinate.
    Auto,
    Fixed(f64),
}

impl FdStep {
    fn for_coordinate(self, w: f64) -> f64 {
        match self {
            FdStep::Auto => f64::EPSILON.powf(0.25) * (1.0 + w.abs()),
            FdStep::Fixed(h) => h,
        }
    }
}

/// Central four-point Hessian of `f` at `w`, symmetrized.
pub fn fd_hessian_of<F: FnMut(&[f64]) -> f64>(mut f: F, w: &[f64], step: FdStep) -> Result<Matrix> {
    let p = w.len();
    if p == 0 {
        return Err(Error::Dimension("empty parameter vector".into()));
    }
    let h: Vec<f64> = w.iter().map(|&wa| step.for_coordinate(wa)).collect();
    let mut point = w.to_vec();
    let mut out = Matrix::zeros(p, p);
    for a in 0..p {
        for b in a..p {
            let mut eval = |sa: f64, sb: f64| {
                point[a] += sa * h[a];
                point[b] += sb * h[b];
                let v = f(&point);
                point[a] = w[a];
                point[b] = w[b];
                v
            };
            let value = (eval(1.0, 1.0) - eval(1.0, -1.0) - eval(-1.0, 1.0) + eval(-1.0, -1.0)) / (4.0 * h[a] * h[b]);
            out[(a, b)] = value;
            out[(b, a)] = value;
        }
    }
    out.symmetrize();
    Ok(out)
}

/// Finite-difference Hessian of the batch-mean loss.
pub fn fd_hessian(net: &Network, batch: &Batch, loss: &Loss, step: FdStep, cap: usize) -> Result<Matrix> {
    net.arch().require_single_output()?;
    check_capacity(net.arch().param_count(), cap)?;
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let arch = net.arch().clone();
    let idx = arch.param_index();
    fd_hessian_of(
        |w| {
            let weights = idx.unflatten(w).expect("flat length is fixed");
            let probe = Network::from_weights(arch.clone(), weights).expect("finite perturbation");
            batch_loss(&probe, batch, loss).expect("batch validated")
        },
        &net.to_flat(),
        step,
    )
}

/// Finite-difference Hessian of the raw network output at `x`.
pub fn fd_output_hessian(net: &Network, x: &[f64], step: FdStep, cap: usize) -> Result<Matrix> {
    net.arch().require_single_output()?;
    check_capacity(net.arch().param_count(), cap)?;
    forward(net, x)?;
    let arch = net.arch().clone();
    let idx = arch.param_index();
    fd_hessian_of(
        |w| {
            let weights = idx.unflatten(w).expect("flat length is fixed");
            let probe = Network::from_weights(arch.clone(), weights).expect("finite perturbation");
            forward(&probe, x).expect("input validated").output()
        },
        &net.to_flat(),
        step,
    )
}

/// `𝓗·v` by central differences of loss gradients along `v̂ = v/‖v‖` with
/// step `h = √ε_mach · (1 + ‖W‖)`, rescaled by `‖v‖`.
pub fn hvp(net: &Network, batch: &Batch, loss: &Loss, v: &[f64]) -> Result<GradientVector> {
    check_direction(net, v)?;
    let idx = net.arch().param_index();
    let v_norm = norm(v);
    if v_norm == 0.0 {
        return Ok(GradientVector {
            values: vec![0.0; v.len()],
            averaging: Averaging::BatchMean,
        });
    }
    let unit: Vec<f64> = v.iter().map(|x| x / v_norm).collect();
    let dir = idx.unflatten(&unit)?;
    let values = hvp_weights(net, batch, loss, &dir, v_norm)?;
    Ok(GradientVector {
        values: idx.flatten(&values),
        averaging: Averaging::BatchMean,
    })
}

/// Weight-shaped core of [`hvp`]; `dir` must have unit norm and the result
/// is scaled by `scale`.
pub(crate) fn hvp_weights(net: &Network, batch: &Batch, loss: &Loss, dir: &[Matrix], scale: f64) -> Result<Vec<Matrix>> {
    let h = f64::EPSILON.sqrt() * (1.0 + net.param_norm());
    let mut probe = net.clone();
    add_scaled_weights(&mut probe, h, dir);
    let (_, plus) = loss_and_gradient(&probe, batch, loss)?;
    probe = net.clone();
    add_scaled_weights(&mut probe, -h, dir);
    let (_, minus) = loss_and_gradient(&probe, batch, loss)?;
    let c = scale / (2.0 * h);
    Ok(plus
        .into_iter()
        .zip(minus)
        .map(|(mut p, m)| {
            p.add_scaled(-1.0, &m).expect("same shapes");
            p.scale(c);
            p
        })
        .collect())
}

/// Exact `𝓗·v` by forward-over-reverse differentiation of the batch
/// gradient with the rectifier masks held fixed. Agrees with [`hvp`] on
/// linear networks; on rectified networks it is the Hessian of the active
/// linear piece, which finite differences cannot resolve once the step
/// crosses a kink.
pub fn hvp_exact(net: &Network, batch: &Batch, loss: &Loss, v: &[f64]) -> Result<GradientVector> {
    check_direction(net, v)?;
    let idx = net.arch().param_index();
    let dir = idx.unflatten(v)?;
    let (full, _) = hvp_exact_weights(net, batch, loss, &dir)?;
    Ok(GradientVector {
        values: idx.flatten(&full),
        averaging: Averaging::BatchMean,
    })
}

/// Returns `(𝓗·V, G·V)` for weight-shaped `dir`.
pub(crate) fn hvp_exact_weights(
    net: &Network,
    batch: &Batch,
    loss: &Loss,
    dir: &[Matrix],
) -> Result<(Vec<Matrix>, Vec<Matrix>)> {
    net.arch().require_single_output()?;
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let depth = net.depth();
    let trace = forward_batch(net, batch.inputs())?;
    let n = trace.ys[0].rows();
    // tangents of the layer outputs, ẏ^0 = 0
    let mut y_dot: Vec<Option<Matrix>> = vec![None];
    for l in 1..=depth {
        let mut z = Matrix::zeros(n, net.weight(l).cols());
        gemm(Op::N, &trace.ys[l - 1], Op::N, &dir[l - 1], 1.0, 0.0, &mut z);
        if let Some(t) = &y_dot[l - 1] {
            gemm(Op::N, t, Op::N, net.weight(l), 1.0, 1.0, &mut z);
        }
        trace.apply_mask(l, &mut z);
        y_dot.push(Some(z));
    }
    let ys = trace.outputs();
    let jv = y_dot[depth].as_ref().unwrap().col(0);
    let nf = n as f64;
    let mut delta = Vec::with_capacity(n);
    let mut delta_dot = Vec::with_capacity(n);
    for s in 0..n {
        let t = batch.targets()[s];
        delta.push(loss.d1(ys[s], t) / nf);
        delta_dot.push(loss.d2(ys[s], t) * jv[s] / nf);
    }
    let ggn = backward(&trace, net, Matrix::from_vec(n, 1, delta_dot.clone())?);
    let mut delta = Matrix::from_vec(n, 1, delta)?;
    let mut delta_dot = Matrix::from_vec(n, 1, delta_dot)?;
    let mut full: Vec<Option<Matrix>> = vec![None; depth];
    for l in (1..=depth).rev() {
        let y_prev = &trace.ys[l - 1];
        let mut g = Matrix::zeros(y_prev.cols(), delta.cols());
        gemm(Op::T, y_prev, Op::N, &delta_dot, 1.0, 0.0, &mut g);
        if let Some(t) = &y_dot[l - 1] {
            gemm(Op::T, t, Op::N, &delta, 1.0, 1.0, &mut g);
        }
        full[l - 1] = Some(g);
        if l > 1 {
            let w = net.weight(l);
            let mut next_dot = Matrix::zeros(n, w.rows());
            gemm(Op::N, &delta_dot, Op::T, w, 1.0, 0.0, &mut next_dot);
            gemm(Op::N, &delta, Op::T, &dir[l - 1], 1.0, 1.0, &mut next_dot);
            trace.apply_mask(l - 1, &mut next_dot);
            let mut next = Matrix::zeros(n, w.rows());
            gemm(Op::N, &delta, Op::T, w, 1.0, 0.0, &mut next);
            trace.apply_mask(l - 1, &mut next);
            delta = next;
            delta_dot = next_dot;
        }
    }
    Ok((full.into_iter().map(Option::unwrap).collect(), ggn))
}

/// Per-sample directional derivatives `g_s · v` of the outputs along
/// weight-shaped `dir`, by a forward tangent pass.
pub(crate) fn output_jvp_batch(trace: &BatchTrace, net: &Network, dir: &[Matrix]) -> Vec<f64> {
    let n = trace.ys[0].rows();
    let mut tangent: Option<Matrix> = None;
    for l in 1..=net.depth() {
        let mut z = Matrix::zeros(n, net.weight(l).cols());
        gemm(Op::N, &trace.ys[l - 1], Op::N, &dir[l - 1], 1.0, 0.0, &mut z);
        if let Some(t) = &tangent {
            gemm(Op::N, t, Op::N, net.weight(l), 1.0, 1.0, &mut z);
        }
        trace.apply_mask(l, &mut z);
        tangent = Some(z);
    }
    tangent.unwrap().col(0)
}

/// Exact Gauss-Newton product `(1/N) Σ_s L''(y_s) (g_s·v) g_s`.
pub fn ggn_vp(net: &Network, batch: &Batch, loss: &Loss, v: &[f64]) -> Result<GradientVector> {
    check_direction(net, v)?;
    let idx = net.arch().param_index();
    let dir = idx.unflatten(v)?;
    let out = ggn_vp_weights(net, batch, loss, &dir)?;
    Ok(GradientVector {
        values: idx.flatten(&out),
        averaging: Averaging::BatchMean,
    })
}

pub(crate) fn ggn_vp_weights(net: &Network, batch: &Batch, loss: &Loss, dir: &[Matrix]) -> Result<Vec<Matrix>> {
    net.arch().require_single_output()?;
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let trace = forward_batch(net, batch.inputs())?;
    let ys = trace.outputs();
    let jv = output_jvp_batch(&trace, net, dir);
    let n = ys.len() as f64;
    let delta: Vec<f64> = ys
        .iter()
        .zip(batch.targets())
        .zip(&jv)
        .map(|((&y, &t), &d)| loss.d2(y, t) * d / n)
        .collect();
    Ok(backward(&trace, net, Matrix::from_vec(ys.len(), 1, delta)?))
}

/// Second directional derivative of the output along `d̂ = d/‖d‖`, i.e.
/// `d̂ᵀĤd̂`, from the three-point stencil with `h = ε_mach^{1/4}(1 + ‖W‖)`.
pub fn directional_output_curvature(net: &Network, x: &[f64], d: &[f64]) -> Result<f64> {
    check_direction(net, d)?;
    let d_norm = norm(d);
    if d_norm == 0.0 {
        return Err(Error::ZeroDirection);
    }
    let idx = net.arch().param_index();
    let unit: Vec<f64> = d.iter().map(|v| v / d_norm).collect();
    let dir = idx.unflatten(&unit)?;
    let h = f64::EPSILON.powf(0.25) * (1.0 + net.param_norm());
    let center = forward(net, x)?.output();
    let mut probe = net.clone();
    add_scaled_weights(&mut probe, h, &dir);
    let plus = forward(&probe, x)?.output();
    probe = net.clone();
    add_scaled_weights(&mut probe, -h, &dir);
    let minus = forward(&probe, x)?.output();
    Ok((plus - 2.0 * center + minus) / (h * h))
}

/// Output gradients `g_s` of every sample, one per row (`N × P`).
pub fn per_sample_output_gradients(net: &Network, batch: &Batch) -> Result<Vec<GradientVector>> {
    (0..batch.len()).map(|s| output_gradient(net, batch.input(s))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::relative_error;
    use crate::network::{init_network, Activation, Architecture, InitScheme};
    use crate::rng::RngStream;

    fn scalar_chain(ws: &[f64]) -> Network {
        let arch = Architecture::new(vec![1; ws.len() + 1], Activation::Identity).unwrap();
        let weights = ws.iter().map(|&w| Matrix::from_vec(1, 1, vec![w]).unwrap()).collect();
        Network::from_weights(arch, weights).unwrap()
    }

    fn random_net(widths: &[usize], act: Activation, seed: u64) -> Network {
        let arch = Architecture::new(widths.to_vec(), act).unwrap();
        init_network(&arch, InitScheme::gaussian(), &mut RngStream::new(seed, 0).rng()).unwrap()
    }

    fn random_vec(n: usize, seed: u64) -> Vec<f64> {
        use rand::Rng;
        let mut rng = RngStream::new(seed, 99).rng();
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn scalar_chain_gradient() {
        let g = output_gradient(&scalar_chain(&[2.0, 3.0]), &[1.0]).unwrap();
        assert_eq!(g.values, vec![3.0, 2.0]);
    }

    #[test]
    fn single_layer_gradient_is_input() {
        let net = random_net(&[4, 1], Activation::Identity, 1);
        let x = [0.1, -0.4, 2.0, 0.3];
        assert_eq!(output_gradient(&net, &x).unwrap().values, x.to_vec());
    }

    #[test]
    fn loss_gradient_hand_values() {
        let net = scalar_chain(&[1.0, 1.0]);
        let one = Batch::single(&[1.0], 0.0).unwrap();
        let g = loss_gradient(&net, &one, &Loss::l2()).unwrap();
        assert_eq!(g.values, vec![2.0, 2.0]);
        let two = Batch::from_samples(&[vec![1.0], vec![1.0]], &[0.0, 0.0]).unwrap();
        assert_eq!(loss_gradient(&net, &two, &Loss::l2()).unwrap().values, g.values);
        let fit = Batch::single(&[1.0], 1.0).unwrap();
        assert_eq!(loss_gradient(&net, &fit, &Loss::l2()).unwrap().values, vec![0.0, 0.0]);
    }

    #[test]
    fn scalar_chain_hhat() {
        let h = analytic_hhat(&scalar_chain(&[1.0, 1.0]), &[1.0], DEFAULT_DENSE_CAP).unwrap();
        assert_eq!(h.as_slice(), &[0.0, 1.0, 1.0, 0.0]);
        let h3 = analytic_hhat(&scalar_chain(&[1.0, 1.0, 1.0]), &[1.0], DEFAULT_DENSE_CAP).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                assert_eq!(h3[(a, b)], if a == b { 0.0 } else { 1.0 });
            }
        }
    }

    #[test]
    fn single_layer_hhat_is_zero() {
        let net = random_net(&[3, 1], Activation::Identity, 2);
        let x = [1.0, 2.0, 3.0];
        assert!(analytic_hhat(&net, &x, DEFAULT_DENSE_CAP).unwrap().as_slice().iter().all(|&v| v == 0.0));
        assert!(hhat_grad_product_cases(&net, &x).unwrap().iter().all(|&v| v == 0.0));
        let d = random_vec(3, 1);
        assert!(directional_output_curvature(&net, &x, &d).unwrap().abs() < 1e-6);
    }

    #[test]
    fn hhat_errors() {
        let relu = random_net(&[2, 2, 1], Activation::Relu, 3);
        assert!(matches!(analytic_hhat(&relu, &[1.0, 0.0], 100), Err(Error::UnsupportedActivation(_))));
        assert!(matches!(hhat_grad_product_cases(&relu, &[1.0, 0.0]), Err(Error::UnsupportedActivation(_))));
        let lin = random_net(&[4, 4, 1], Activation::Identity, 3);
        assert!(matches!(
            analytic_hhat(&lin, &[0.0; 4], 10),
            Err(Error::Capacity { params: 20, cap: 10 })
        ));
    }

    #[test]
    fn scalar_chain_case_product() {
        let net = scalar_chain(&[1.0, 1.0]);
        let hg = hhat_grad_product_cases(&net, &[1.0]).unwrap();
        assert_eq!(hg, vec![1.0, 1.0]);
        let (q, _) = hhat_grad_quadratic(&net, &[1.0]).unwrap();
        assert_eq!(q, 2.0);
    }

    #[test]
    fn case_product_matches_dense_on_mixed_widths() {
        for (seed, widths) in [(1, vec![4, 5, 6, 3, 1]), (2, vec![2, 3, 1]), (3, vec![3, 2, 4, 1]), (4, vec![2, 3, 2, 3, 2, 3, 1])] {
            let net = random_net(&widths, Activation::Identity, seed);
            let x = random_vec(widths[0], seed);
            let dense = analytic_hhat(&net, &x, DEFAULT_DENSE_CAP).unwrap();
            let g = output_gradient(&net, &x).unwrap();
            let expected = dense.matvec(&g.values).unwrap();
            let got = hhat_grad_product_cases(&net, &x).unwrap();
            assert!(relative_error(&got, &expected) < 1e-10, "{widths:?}");
        }
    }

    #[test]
    fn layer_case_classification() {
        use LayerCase::*;
        let cases: Vec<_> = (1..=6).map(|l| LayerCase::classify(l, 6)).collect();
        assert_eq!(cases, vec![First, Second, Interior, Interior, Penultimate, Last]);
        assert_eq!(LayerCase::classify(2, 2), Last);
        assert_eq!(LayerCase::classify(2, 3), Second);
    }

    #[test]
    fn output_hessian_vp_matches_dense() {
        let net = random_net(&[3, 4, 2, 1], Activation::Identity, 8);
        let x = random_vec(3, 8);
        let dense = analytic_hhat(&net, &x, DEFAULT_DENSE_CAP).unwrap();
        let v = random_vec(net.arch().param_count(), 9);
        let got = output_hessian_vp(&net, &x, &v).unwrap();
        assert!(relative_error(&got, &dense.matvec(&v).unwrap()) < 1e-12);
    }

    #[test]
    fn scalar_quadratic_fd_hessian() {
        let h = fd_hessian_of(|w| 0.5 * w[0] * w[0], &[0.7], FdStep::Auto).unwrap();
        assert!((h[(0, 0)] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn linear_model_fd_hessian_is_second_moment() {
        let net = random_net(&[3, 1], Activation::Identity, 5);
        let xs = vec![random_vec(3, 1), random_vec(3, 2)];
        let batch = Batch::from_samples(&xs, &[0.5, -1.0]).unwrap();
        let h = fd_hessian(&net, &batch, &Loss::l2(), FdStep::Auto, DEFAULT_DENSE_CAP).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                let expected = xs.iter().map(|x| x[a] * x[b]).sum::<f64>(); // 2·(1/2)·Σ
                assert!((h[(a, b)] - expected).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn hvp_scalar_chain() {
        let net = scalar_chain(&[1.0, 1.0]);
        let batch = Batch::single(&[1.0], 0.0).unwrap();
        let hv = hvp(&net, &batch, &Loss::l2(), &[1.0, 0.0]).unwrap();
        assert!((hv.values[0] - 2.0).abs() < 1e-5 && (hv.values[1] - 4.0).abs() < 1e-5, "{hv:?}");
        assert_eq!(hvp(&net, &batch, &Loss::l2(), &[0.0, 0.0]).unwrap().values, vec![0.0, 0.0]);
    }

    #[test]
    fn exact_hvp_scalar_chain() {
        let net = scalar_chain(&[1.0, 1.0]);
        let batch = Batch::single(&[1.0], 0.0).unwrap();
        assert_eq!(hvp_exact(&net, &batch, &Loss::l2(), &[1.0, 0.0]).unwrap().values, vec![2.0, 4.0]);
    }

    #[test]
    fn exact_hvp_matches_fd_and_splits_off_ggn() {
        for (act, seed) in [(Activation::Identity, 1), (Activation::Relu, 2), (Activation::Relu, 3)] {
            let net = random_net(&[5, 6, 4, 1], act, seed);
            let xs: Vec<Vec<f64>> = (0..4).map(|s| random_vec(5, seed * 10 + s)).collect();
            let batch = Batch::from_samples(&xs, &[1.0, -1.0, 1.0, -1.0]).unwrap();
            let p = net.arch().param_index().len();
            let v = random_vec(p, seed + 50);
            let exact = hvp_exact(&net, &batch, &Loss::l2(), &v).unwrap();
            let fd = hvp(&net, &batch, &Loss::l2(), &v).unwrap();
            assert!(crate::linalg::relative_error(&fd.values, &exact.values) < 1e-5, "{act:?}");
            let idx = net.arch().param_index();
            let (_, gv) = hvp_exact_weights(&net, &batch, &Loss::l2(), &idx.unflatten(&v).unwrap()).unwrap();
            let ggn = ggn_vp(&net, &batch, &Loss::l2(), &v).unwrap();
            assert!(crate::linalg::relative_error(&idx.flatten(&gv), &ggn.values) < 1e-12);
        }
    }

    #[test]
    fn ggn_rank_one() {
        // one sample with output gradient (1, 2): chain weights (2, 1), x = 1
        let net = scalar_chain(&[2.0, 1.0]);
        let batch = Batch::single(&[1.0], 0.0).unwrap();
        assert_eq!(output_gradient(&net, &[1.0]).unwrap().values, vec![1.0, 2.0]);
        let gv = ggn_vp(&net, &batch, &Loss::l2(), &[1.0, 0.0]).unwrap();
        assert_eq!(gv.values, vec![2.0, 4.0]);
        let orth = ggn_vp(&net, &batch, &Loss::l2(), &[2.0, -1.0]).unwrap();
        assert_eq!(orth.values, vec![0.0, 0.0]);
    }

    #[test]
    fn directional_curvature_scalar_chain() {
        let c = directional_output_curvature(&scalar_chain(&[1.0, 1.0]), &[1.0], &[1.0, 1.0]).unwrap();
        assert!((c - 1.0).abs() < 1e-6, "{c}");
        assert!(matches!(
            directional_output_curvature(&scalar_chain(&[1.0, 1.0]), &[1.0], &[0.0, 0.0]),
            Err(Error::ZeroDirection)
        ));
    }
}
