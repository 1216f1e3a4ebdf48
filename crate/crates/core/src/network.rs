//! Bias-free feedforward networks with a single linear output unit.
//!
//! Layer `l` maps `y^{l-1}` to `y^l = φ(W^lᵀ y^{l-1})` where `W^l` is an
//! `n_{l-1} × n_l` matrix and φ is the hidden activation (the output layer is
//! always linear). Weights are stored as `weights[l - 1] = W^l`.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, gemm, Matrix, Op};
use crate::rng::{sample_weight_matrix, InitDistribution, InitKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" | "linear" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    widths: Vec<usize>,
    activation: Activation,
    /// `m_0..m_L` for the constant-shape family `n_l = n·m_l`. The output
    /// layer is pinned to a single unit, so `m_L` only enters the
    /// multiplier sums, never the width.
    width_multipliers: Option<Vec<f64>>,
}

impl Architecture {
    pub fn new(widths: Vec<usize>, activation: Activation) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Architecture(format!(
                "need at least an input and an output layer, got {widths:?}"
            )));
        }
        if widths.contains(&0) {
            return Err(Error::Architecture(format!("zero width in {widths:?}")));
        }
        Ok(Self {
            widths,
            activation,
            width_multipliers: None,
        })
    }

    /// Widths `n_l = n·m_l` for `l < L` and a single output unit.
    pub fn constant_shape(base: usize, multipliers: &[f64], activation: Activation) -> Result<Self> {
        if multipliers.len() < 2 {
            return Err(Error::Architecture("need multipliers m_0..m_L with L >= 1".into()));
        }
        if base == 0 || multipliers.iter().any(|m| !(m.is_finite() && *m > 0.0)) {
            return Err(Error::Architecture(format!(
                "base width {base} and multipliers {multipliers:?} must be positive"
            )));
        }
        let depth = multipliers.len() - 1;
        let mut widths = Vec::with_capacity(depth + 1);
        for &m in &multipliers[..depth] {
            let w = base as f64 * m;
            if (w - w.round()).abs() > 1e-9 || w.round() < 1.0 {
                return Err(Error::Architecture(format!(
                    "n·m = {base}·{m} is not a positive integer width"
                )));
            }
            widths.push(w.round() as usize);
        }
        widths.push(1);
        let mut arch = Self::new(widths, activation)?;
        arch.width_multipliers = Some(multipliers.to_vec());
        Ok(arch)
    }

    /// `depth` weight layers of width `n`, one output unit, all multipliers 1.
    pub fn constant_width(n: usize, depth: usize, activation: Activation) -> Result<Self> {
        Self::constant_shape(n, &vec![1.0; depth + 1], activation)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn width_multipliers(&self) -> Option<&[f64]> {
        self.width_multipliers.as_deref()
    }

    /// Base width `n` of the constant-shape family, if multipliers are set.
    pub fn base_width(&self) -> Option<f64> {
        self.width_multipliers
            .as_ref()
            .map(|m| self.widths[0] as f64 / m[0])
    }

    /// Number of weight layers `L`.
    pub fn depth(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        self.widths[self.depth()]
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1]).sum()
    }

    pub fn param_index(&self) -> ParamIndex {
        ParamIndex::new(&self.widths)
    }

    pub fn require_single_output(&self) -> Result<()> {
        if self.output_dim() != 1 {
            return Err(Error::Architecture(format!(
                "curvature analysis needs a single output unit, got {}",
                self.output_dim()
            )));
        }
        Ok(())
    }

    pub fn require_linear(&self, what: &str) -> Result<()> {
        if self.activation != Activation::Identity {
            return Err(Error::UnsupportedActivation(format!(
                "{what} is defined for linear (identity-activation) networks only, got {}",
                self.activation
            )));
        }
        Ok(())
    }
}

/// Weight coordinates: layer `k` in `1..=L`, input unit `j < n_{k-1}`,
/// output unit `i < n_k`. The weight is `W^k[(j, i)]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamTriple {
    pub layer: usize,
    pub input: usize,
    pub output: usize,
}

/// Canonical flat ordering of all weights: layers ascending, then output
/// unit, then input unit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamIndex {
    widths: Vec<usize>,
    offsets: Vec<usize>,
}

impl ParamIndex {
    pub fn new(widths: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(widths.len());
        let mut acc = 0;
        offsets.push(0);
        for w in widths.windows(2) {
            acc += w[0] * w[1];
            offsets.push(acc);
        }
        Self {
            widths: widths.to_vec(),
            offsets,
        }
    }

    pub fn len(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat range occupied by layer `k` (1-based).
    pub fn layer_range(&self, k: usize) -> std::ops::Range<usize> {
        self.offsets[k - 1]..self.offsets[k]
    }

    pub fn to_flat(&self, t: ParamTriple) -> Result<usize> {
        let depth = self.widths.len() - 1;
        if t.layer == 0 || t.layer > depth {
            return Err(Error::Index(format!("layer {} outside 1..={depth}", t.layer)));
        }
        let (n_in, n_out) = (self.widths[t.layer - 1], self.widths[t.layer]);
        if t.input >= n_in || t.output >= n_out {
            return Err(Error::Index(format!("{t:?} outside {n_in}x{n_out}")));
        }
        Ok(self.offsets[t.layer - 1] + t.output * n_in + t.input)
    }

    pub fn to_triple(&self, flat: usize) -> Result<ParamTriple> {
        if flat >= self.len() {
            return Err(Error::Index(format!("flat index {flat} >= {}", self.len())));
        }
        let layer = self.offsets.partition_point(|&o| o <= flat);
        let local = flat - self.offsets[layer - 1];
        let n_in = self.widths[layer - 1];
        Ok(ParamTriple {
            layer,
            input: local % n_in,
            output: local / n_in,
        })
    }

    /// Flattens weight-shaped matrices (`n_{k-1} × n_k` each).
    pub fn flatten(&self, mats: &[Matrix]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for m in mats {
            for i in 0..m.cols() {
                for j in 0..m.rows() {
                    out.push(m[(j, i)]);
                }
            }
        }
        out
    }

    pub fn unflatten(&self, flat: &[f64]) -> Result<Vec<Matrix>> {
        if flat.len() != self.len() {
            return Err(Error::Dimension(format!(
                "flat vector of length {} for {} parameters",
                flat.len(),
                self.len()
            )));
        }
        let mut mats = Vec::with_capacity(self.widths.len() - 1);
        for (k, w) in self.widths.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let block = &flat[self.offsets[k]..self.offsets[k + 1]];
            let mut m = Matrix::zeros(n_in, n_out);
            for i in 0..n_out {
                for j in 0..n_in {
                    m[(j, i)] = block[i * n_in + j];
                }
            }
            mats.push(m);
        }
        Ok(mats)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    arch: Architecture,
    weights: Vec<Matrix>,
}

impl Network {
    pub fn from_weights(arch: Architecture, weights: Vec<Matrix>) -> Result<Self> {
        if weights.len() != arch.depth() {
            return Err(Error::Architecture(format!(
                "{} weight matrices for depth {}",
                weights.len(),
                arch.depth()
            )));
        }
        for (l, (w, dims)) in weights.iter().zip(arch.widths().windows(2)).enumerate() {
            if w.shape() != (dims[0], dims[1]) {
                return Err(Error::Architecture(format!(
                    "W^{} has shape {:?}, expected {:?}",
                    l + 1,
                    w.shape(),
                    (dims[0], dims[1])
                )));
            }
            if !w.is_finite() {
                return Err(Error::Architecture(format!("W^{} has non-finite entries", l + 1)));
            }
        }
        Ok(Self { arch, weights })
    }

    pub fn from_flat(arch: Architecture, flat: &[f64]) -> Result<Self> {
        let weights = arch.param_index().unflatten(flat)?;
        Self::from_weights(arch, weights)
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn depth(&self) -> usize {
        self.arch.depth()
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [Matrix] {
        &mut self.weights
    }

    /// `W^l` for `l` in `1..=L`.
    pub fn weight(&self, l: usize) -> &Matrix {
        &self.weights[l - 1]
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.arch.param_index().flatten(&self.weights)
    }

    pub fn param_norm(&self) -> f64 {
        self.weights
            .iter()
            .map(|w| w.as_slice().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Whether hidden layer `l` applies the rectifier.
    fn rectified(&self, l: usize) -> bool {
        self.arch.activation == Activation::Relu && l < self.depth()
    }

    /// Plain text: a magic line, activation, widths, then each `W^l` as
    /// row-major lines. Values use shortest round-trip formatting.
    pub fn write_text<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "curvkit-network v1")?;
        writeln!(out, "activation {}", self.arch.activation)?;
        let widths: Vec<String> = self.arch.widths.iter().map(|w| w.to_string()).collect();
        writeln!(out, "widths {}", widths.join(" "))?;
        for (l, w) in self.weights.iter().enumerate() {
            writeln!(out, "layer {} {} {}", l + 1, w.rows(), w.cols())?;
            for r in 0..w.rows() {
                let row: Vec<String> = w.row(r).iter().map(|v| format!("{v:?}")).collect();
                writeln!(out, "{}", row.join(" "))?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_text(&mut buf)?;
        fs::File::create(path)?.write_all(&buf)?;
        Ok(())
    }

    pub fn parse_text(text: &str) -> std::result::Result<Self, String> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next().map(str::trim) != Some("curvkit-network v1") {
            return Err("missing `curvkit-network v1` header".into());
        }
        let activation: Activation = lines
            .next()
            .and_then(|l| l.strip_prefix("activation "))
            .ok_or("missing activation line")?
            .trim()
            .parse()
            .map_err(|e: Error| e.to_string())?;
        let widths = lines
            .next()
            .and_then(|l| l.strip_prefix("widths "))
            .ok_or("missing widths line")?
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|e| format!("bad width `{t}`: {e}")))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let arch = Architecture::new(widths, activation).map_err(|e| e.to_string())?;
        let mut weights = Vec::new();
        for l in 1..=arch.depth() {
            let header = lines.next().ok_or(format!("missing layer {l}"))?;
            let dims: Vec<usize> = header
                .strip_prefix("layer ")
                .ok_or(format!("expected `layer` line, got `{header}`"))?
                .split_whitespace()
                .map(|t| t.parse().map_err(|e| format!("bad layer header `{header}`: {e}")))
                .collect::<std::result::Result<_, _>>()?;
            if dims.len() != 3 || dims[0] != l {
                return Err(format!("bad layer header `{header}`"));
            }
            let (rows, cols) = (dims[1], dims[2]);
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let line = lines.next().ok_or(format!("layer {l} truncated"))?;
                for tok in line.split_whitespace() {
                    data.push(tok.parse::<f64>().map_err(|e| format!("bad value `{tok}`: {e}"))?);
                }
            }
            weights.push(Matrix::from_vec(rows, cols, data).map_err(|e| e.to_string())?);
        }
        Network::from_weights(arch, weights).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse_text(&text).map_err(|msg| Error::Parse {
            path: path.to_path_buf(),
            msg,
        })
    }
}

/// Weight family and scale used by [`init_network`]; each layer gets
/// `fan_in = n_{l-1}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitScheme {
    pub kind: InitKind,
    pub gain: f64,
}

impl InitScheme {
    pub fn fan_in(kind: InitKind) -> Self {
        Self { kind, gain: 1.0 }
    }

    pub fn gaussian() -> Self {
        Self::fan_in(InitKind::Gaussian)
    }
}

impl Default for InitScheme {
    fn default() -> Self {
        Self::gaussian()
    }
}

pub fn init_network<R: Rng + ?Sized>(arch: &Architecture, scheme: InitScheme, rng: &mut R) -> Result<Network> {
    let mut weights = Vec::with_capacity(arch.depth());
    for dims in arch.widths().windows(2) {
        let dist = InitDistribution::with_gain(scheme.kind, dims[0], scheme.gain)?;
        weights.push(sample_weight_matrix(dims[0], dims[1], &dist, rng)?);
    }
    Network::from_weights(arch.clone(), weights)
}

/// Layer outputs `y^0..y^L` of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTrace {
    layers: Vec<Vec<f64>>,
    rectified: bool,
}

impl ActivationTrace {
    /// `y^l`.
    pub fn y(&self, l: usize) -> &[f64] {
        &self.layers[l]
    }

    pub fn output(&self) -> f64 {
        self.layers.last().unwrap()[0]
    }

    pub fn depth(&self) -> usize {
        self.layers.len() - 1
    }

    /// Whether unit `i` of layer `l` passes gradient. Hidden rectified units
    /// are active iff their output is strictly positive; input and output
    /// layers are always active.
    pub fn active(&self, l: usize, i: usize) -> bool {
        !self.rectified || l == 0 || l == self.depth() || self.layers[l][i] > 0.0
    }

    fn apply_mask(&self, l: usize, v: &mut [f64]) {
        if self.rectified && l > 0 && l < self.depth() {
            for (vi, yi) in v.iter_mut().zip(&self.layers[l]) {
                if *yi <= 0.0 {
                    *vi = 0.0;
                }
            }
        }
    }
}

pub fn forward(net: &Network, x: &[f64]) -> Result<ActivationTrace> {
    if x.len() != net.arch.input_dim() {
        return Err(Error::Dimension(format!(
            "input of length {} for n_0 = {}",
            x.len(),
            net.arch.input_dim()
        )));
    }
    let mut layers = Vec::with_capacity(net.depth() + 1);
    layers.push(x.to_vec());
    for l in 1..=net.depth() {
        let mut y = net.weight(l).t_matvec(&layers[l - 1])?;
        if net.rectified(l) {
            y.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        layers.push(y);
    }
    Ok(ActivationTrace {
        layers,
        rectified: net.arch.activation == Activation::Relu,
    })
}

fn check_layer_pair(trace: &ActivationTrace, from: usize, to: usize) -> Result<()> {
    if from >= to || to > trace.depth() {
        return Err(Error::Index(format!(
            "need 0 <= from < to <= {}, got from={from}, to={to}",
            trace.depth()
        )));
    }
    Ok(())
}

/// `∂y^to/∂y^from` as an `n_from × n_to` matrix with entry `(u, j)` equal to
/// `∂y^to_j / ∂y^from_u`: the product `W^{from+1} D^{from+1} ··· W^to D^to`
/// where `D^m` masks inactive rectified units.
pub fn interlayer_jacobian(trace: &ActivationTrace, net: &Network, from: usize, to: usize) -> Result<Matrix> {
    check_layer_pair(trace, from, to)?;
    let mut acc = masked_weight(trace, net, from + 1);
    for m in from + 2..=to {
        acc = acc.matmul(&masked_weight(trace, net, m))?;
    }
    Ok(acc)
}

fn masked_weight(trace: &ActivationTrace, net: &Network, m: usize) -> Matrix {
    let mut w = net.weight(m).clone();
    if trace.rectified && m < trace.depth() {
        for i in 0..w.cols() {
            if !trace.active(m, i) {
                for j in 0..w.rows() {
                    w[(j, i)] = 0.0;
                }
            }
        }
    }
    w
}

/// `J_{from,to} · v` for `v ∈ R^{n_to}` without forming the Jacobian.
pub fn jacobian_apply(trace: &ActivationTrace, net: &Network, from: usize, to: usize, v: &[f64]) -> Result<Vec<f64>> {
    if from == to {
        return Ok(v.to_vec());
    }
    check_layer_pair(trace, from, to)?;
    let mut acc = v.to_vec();
    for m in (from + 1..=to).rev() {
        trace.apply_mask(m, &mut acc);
        acc = net.weight(m).matvec(&acc)?;
    }
    Ok(acc)
}

/// `J_{from,to}ᵀ · u` for `u ∈ R^{n_from}`.
pub fn jacobian_apply_t(trace: &ActivationTrace, net: &Network, from: usize, to: usize, u: &[f64]) -> Result<Vec<f64>> {
    if from == to {
        return Ok(u.to_vec());
    }
    check_layer_pair(trace, from, to)?;
    let mut acc = u.to_vec();
    for m in from + 1..=to {
        acc = net.weight(m).t_matvec(&acc)?;
        trace.apply_mask(m, &mut acc);
    }
    Ok(acc)
}

/// Output sensitivities `a_k = ∂y^L/∂y^k` for `k = 0..=L` (`a_L = [1]`).
pub fn output_sensitivities(trace: &ActivationTrace, net: &Network) -> Result<Vec<Vec<f64>>> {
    net.arch.require_single_output()?;
    let depth = net.depth();
    let mut a = vec![Vec::new(); depth + 1];
    a[depth] = vec![1.0];
    for k in (1..=depth).rev() {
        let mut upstream = a[k].clone();
        trace.apply_mask(k, &mut upstream);
        a[k - 1] = net.weight(k).matvec(&upstream)?;
    }
    Ok(a)
}

/// Row-stacked layer outputs for a batch: `ys[l]` is `N × n_l`.
#[derive(Clone, Debug)]
pub struct BatchTrace {
    pub(crate) ys: Vec<Matrix>,
    pub(crate) rectified: bool,
}

impl BatchTrace {
    pub fn outputs(&self) -> Vec<f64> {
        self.ys.last().unwrap().col(0)
    }

    pub(crate) fn depth(&self) -> usize {
        self.ys.len() - 1
    }

    /// Zeroes entries of `m` (shaped like layer `l`) at inactive units.
    pub(crate) fn apply_mask(&self, l: usize, m: &mut Matrix) {
        if self.rectified && l > 0 && l < self.depth() {
            for (v, y) in m.as_mut_slice().iter_mut().zip(self.ys[l].as_slice()) {
                if *y <= 0.0 {
                    *v = 0.0;
                }
            }
        }
    }
}

/// Forward pass over the rows of `inputs` (`N × n_0`).
pub fn forward_batch(net: &Network, inputs: &Matrix) -> Result<BatchTrace> {
    if inputs.cols() != net.arch.input_dim() {
        return Err(Error::Dimension(format!(
            "batch inputs have {} columns for n_0 = {}",
            inputs.cols(),
            net.arch.input_dim()
        )));
    }
    let mut ys = Vec::with_capacity(net.depth() + 1);
    ys.push(inputs.clone());
    for l in 1..=net.depth() {
        let w = net.weight(l);
        let mut y = Matrix::zeros(inputs.rows(), w.cols());
        gemm(Op::N, &ys[l - 1], Op::N, w, 1.0, 0.0, &mut y);
        if net.rectified(l) {
            y.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
        }
        ys.push(y);
    }
    Ok(BatchTrace {
        ys,
        rectified: net.arch.activation == Activation::Relu,
    })
}

/// Network outputs only.
pub fn predict_batch(net: &Network, inputs: &Matrix) -> Result<Vec<f64>> {
    Ok(forward_batch(net, inputs)?.outputs())
}

/// `net.weights += s · dir` for weight-shaped `dir`.
pub(crate) fn add_scaled_weights(net: &mut Network, s: f64, dir: &[Matrix]) {
    for (w, d) in net.weights_mut().iter_mut().zip(dir) {
        axpy(s, d.as_slice(), w.as_mut_slice());
    }
}
