//! Normalization layers: BatchNorm, GroupNorm, LayerNorm, simple LayerNorm
//! (no gain/bias) and variance-only LayerNorm (divide by the standard
//! deviation, keep the mean).
//!
//! Epsilon sits inside the square root: `std = sqrt(var + eps)`. All
//! variances are biased.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{mean_var, Matrix, Param};

pub const DEFAULT_EPS: f64 = 1e-8;
pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_GROUPS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum NormKind {
    None,
    BatchNorm,
    GroupNorm,
    LayerNorm,
    SimpleLn,
    VarianceOnlyLn,
}

impl NormKind {
    pub const ALL: [NormKind; 6] = [
        NormKind::None,
        NormKind::BatchNorm,
        NormKind::GroupNorm,
        NormKind::LayerNorm,
        NormKind::SimpleLn,
        NormKind::VarianceOnlyLn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NormKind::None => "none",
            NormKind::BatchNorm => "bn",
            NormKind::GroupNorm => "gn",
            NormKind::LayerNorm => "ln",
            NormKind::SimpleLn => "sln",
            NormKind::VarianceOnlyLn => "voln",
        }
    }

    /// Whether the kind carries a learned gain and bias.
    pub fn has_affine(self) -> bool {
        matches!(self, NormKind::BatchNorm | NormKind::GroupNorm | NormKind::LayerNorm)
    }

    pub fn allowed_names() -> String {
        NormKind::ALL.iter().map(|k| k.name()).collect::<Vec<_>>().join(", ")
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let kind = match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "none" | "w/o" => NormKind::None,
            "bn" | "batchnorm" => NormKind::BatchNorm,
            "gn" | "groupnorm" => NormKind::GroupNorm,
            "ln" | "layernorm" => NormKind::LayerNorm,
            "sln" | "simpleln" | "simplelayernorm" => NormKind::SimpleLn,
            "voln" | "varianceonlyln" | "varianceonlylayernorm" => NormKind::VarianceOnlyLn,
            _ => {
                return Err(Error::InvalidSpec(format!(
                    "unknown normalization `{s}` (allowed: {})",
                    NormKind::allowed_names()
                )))
            }
        };
        Ok(kind)
    }
}

impl From<NormKind> for String {
    fn from(k: NormKind) -> String {
        k.name().to_string()
    }
}

impl TryFrom<String> for NormKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Which normalization to apply plus its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormSpec {
    pub kind: NormKind,
    pub eps: f64,
    /// GroupNorm only.
    pub groups: usize,
    /// BatchNorm only: weight kept on the old running statistic.
    pub momentum: f64,
}

impl NormSpec {
    pub fn new(kind: NormKind) -> Self {
        NormSpec { kind, eps: DEFAULT_EPS, groups: DEFAULT_GROUPS, momentum: DEFAULT_MOMENTUM }
    }

    pub fn none() -> Self {
        NormSpec::new(NormKind::None)
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_momentum(mut self, momentum: f64) -> Self {
        self.momentum = momentum;
        self
    }

    pub fn validate(&self, width: usize) -> Result<()> {
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::InvalidSpec(format!("epsilon must be positive, got {}", self.eps)));
        }
        match self.kind {
            NormKind::GroupNorm => {
                if self.groups == 0 || !width.is_multiple_of(self.groups) {
                    return Err(Error::InvalidSpec(format!(
                        "group count {} does not divide width {width}",
                        self.groups
                    )));
                }
            }
            NormKind::BatchNorm
                if !(self.momentum > 0.0 && self.momentum < 1.0) => {
                    return Err(Error::InvalidSpec(format!("momentum must lie in (0,1), got {}", self.momentum)));
                }
            _ => {}
        }
        if self.kind != NormKind::None && width == 0 {
            return Err(Error::InvalidSpec("cannot normalize a zero-width input".into()));
        }
        Ok(())
    }

    /// Width of the contiguous segments a per-row normalization works on.
    fn segment(&self, width: usize) -> usize {
        match self.kind {
            NormKind::GroupNorm => width / self.groups,
            _ => width,
        }
    }
}

/// Forward intermediates kept for exactly one backward call.
#[derive(Debug, Clone)]
enum NormCache {
    Identity,
    /// LayerNorm, simple LayerNorm and GroupNorm: one std per (row, segment).
    Centered { normalized: Matrix, std: Vec<f64>, segment: usize },
    VarianceOnly { input: Matrix, mean: Vec<f64>, std: Vec<f64> },
    /// One std per column.
    Batch { normalized: Matrix, std: Vec<f64>, training: bool },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormGrads {
    pub input: Matrix,
    /// Empty for kinds without affine parameters.
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

/// A normalization layer with its learned and running state.
#[derive(Debug, Clone)]
pub struct NormLayer {
    spec: NormSpec,
    width: usize,
    pub gain: Param,
    pub bias: Param,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
    cache: Option<NormCache>,
}

impl NormLayer {
    pub fn new(spec: NormSpec, width: usize) -> Result<Self> {
        spec.validate(width)?;
        let affine = if spec.kind.has_affine() { width } else { 0 };
        let (rm, rv) = if spec.kind == NormKind::BatchNorm {
            (vec![0.0; width], vec![1.0; width])
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(NormLayer {
            spec,
            width,
            gain: Param::new(Matrix::filled(1, affine, 1.0)),
            bias: Param::new(Matrix::zeros(1, affine)),
            running_mean: rm,
            running_var: rv,
            cache: None,
        })
    }

    pub fn spec(&self) -> &NormSpec {
        &self.spec
    }

    pub fn kind(&self) -> NormKind {
        self.spec.kind
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn running_mean(&self) -> &[f64] {
        &self.running_mean
    }

    pub fn running_var(&self) -> &[f64] {
        &self.running_var
    }

    pub fn set_running_stats(&mut self, mean: Vec<f64>, var: Vec<f64>) -> Result<()> {
        if mean.len() != self.running_mean.len() || var.len() != self.running_var.len() {
            return Err(Error::dim("set_running_stats", format!("{} / {} for width {}", mean.len(), var.len(), self.width)));
        }
        if var.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) || mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSpec("running statistics must be finite with non-negative variance".into()));
        }
        self.running_mean = mean;
        self.running_var = var;
        Ok(())
    }

    /// Trainable parameters (gain then bias); empty for non-affine kinds.
    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        if self.spec.kind.has_affine() {
            vec![&mut self.gain, &mut self.bias]
        } else {
            Vec::new()
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        if self.spec.kind.has_affine() {
            vec![&self.gain, &self.bias]
        } else {
            Vec::new()
        }
    }

    /// Training-mode or eval-mode forward; primes the cache and, for
    /// BatchNorm in training mode, updates the running statistics.
    pub fn forward(&mut self, x: &Matrix, training: bool) -> Result<Matrix> {
        let (out, cache, batch_stats) = self.compute(x, training)?;
        if let Some((mean, var)) = batch_stats {
            let m = self.spec.momentum;
            for (r, b) in self.running_mean.iter_mut().zip(&mean) {
                *r = m * *r + (1.0 - m) * b;
            }
            for (r, b) in self.running_var.iter_mut().zip(&var) {
                *r = m * *r + (1.0 - m) * b;
            }
        }
        self.cache = Some(cache);
        Ok(out)
    }

    /// Eval-mode forward that leaves the layer untouched.
    pub fn infer(&self, x: &Matrix) -> Result<Matrix> {
        self.compute(x, false).map(|(out, _, _)| out)
    }

    #[allow(clippy::type_complexity)]
    fn compute(&self, x: &Matrix, training: bool) -> Result<(Matrix, NormCache, Option<(Vec<f64>, Vec<f64>)>)> {
        if x.cols() != self.width {
            return Err(Error::dim("norm forward", format!("{} cols for a width-{} layer", x.cols(), self.width)));
        }
        let eps = self.spec.eps;
        match self.spec.kind {
            NormKind::None => Ok((x.clone(), NormCache::Identity, None)),
            NormKind::SimpleLn | NormKind::LayerNorm | NormKind::GroupNorm => {
                let segment = self.spec.segment(self.width);
                let (normalized, std) = normalize_segments(x, segment, eps)?;
                let out = if self.spec.kind.has_affine() { self.affine(&normalized)? } else { normalized.clone() };
                Ok((out, NormCache::Centered { normalized, std, segment }, None))
            }
            NormKind::VarianceOnlyLn => {
                let (out, mean, std) = variance_only(x, eps)?;
                Ok((out, NormCache::VarianceOnly { input: x.clone(), mean, std }, None))
            }
            NormKind::BatchNorm => {
                let (mean, var) = if training {
                    if x.rows() < 2 {
                        return Err(Error::DegenerateBatch(x.rows()));
                    }
                    column_mean_var(x)
                } else {
                    (self.running_mean.clone(), self.running_var.clone())
                };
                let std: Vec<f64> = var.iter().map(|v| (v + eps).sqrt()).collect();
                let mut normalized = x.clone();
                for r in 0..x.rows() {
                    for ((v, m), s) in normalized.row_mut(r).iter_mut().zip(&mean).zip(&std) {
                        *v = (*v - m) / s;
                    }
                }
                normalized.ensure_finite("batch_norm")?;
                let out = self.affine(&normalized)?;
                let stats = training.then_some((mean, var));
                Ok((out, NormCache::Batch { normalized, std, training }, stats))
            }
        }
    }

    fn affine(&self, normalized: &Matrix) -> Result<Matrix> {
        normalized.mul_row_broadcast(self.gain.value.as_slice())?.add_row_broadcast(self.bias.value.as_slice())
    }

    /// Exact gradients for the last forward. Consumes the cache: a second
    /// call without a new forward is [`Error::MissingCache`].
    pub fn backward(&mut self, grad_out: &Matrix) -> Result<NormGrads> {
        let cache = self.cache.take().ok_or(Error::MissingCache("normalization layer"))?;
        if grad_out.cols() != self.width {
            return Err(Error::dim("norm backward", format!("{} cols for width {}", grad_out.cols(), self.width)));
        }
        let affine = self.spec.kind.has_affine();
        let gain = self.gain.value.as_slice();
        match cache {
            NormCache::Identity => Ok(NormGrads { input: grad_out.clone(), gain: Vec::new(), bias: Vec::new() }),
            NormCache::Centered { normalized, std, segment } => {
                check_rows(grad_out, &normalized)?;
                let dyhat = if affine { grad_out.mul_row_broadcast(gain)? } else { grad_out.clone() };
                let mut dx = Matrix::zeros(grad_out.rows(), self.width);
                let per_row = self.width / segment.max(1);
                for r in 0..grad_out.rows() {
                    for s in 0..per_row {
                        let span = s * segment..(s + 1) * segment;
                        let dy = &dyhat.row(r)[span.clone()];
                        let y = &normalized.row(r)[span.clone()];
                        let h = segment as f64;
                        let m1 = dy.iter().sum::<f64>() / h;
                        let m2 = dy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / h;
                        let inv = 1.0 / std[r * per_row + s];
                        for ((o, &d), &yy) in dx.row_mut(r)[span].iter_mut().zip(dy).zip(y) {
                            *o = inv * (d - m1 - yy * m2);
                        }
                    }
                }
                dx.ensure_finite("norm backward")?;
                let (g_gain, g_bias) = if affine { affine_grads(grad_out, &normalized)? } else { (Vec::new(), Vec::new()) };
                Ok(NormGrads { input: dx, gain: g_gain, bias: g_bias })
            }
            NormCache::VarianceOnly { input, mean, std } => {
                check_rows(grad_out, &input)?;
                let h = self.width as f64;
                let mut dx = Matrix::zeros(grad_out.rows(), self.width);
                for r in 0..grad_out.rows() {
                    let dy = grad_out.row(r);
                    let x = input.row(r);
                    let inv = 1.0 / std[r];
                    let dot: f64 = dy.iter().zip(x).map(|(a, b)| a * b).sum();
                    let coef = dot * inv * inv * inv / h;
                    for ((o, &d), &xv) in dx.row_mut(r).iter_mut().zip(dy).zip(x) {
                        *o = d * inv - (xv - mean[r]) * coef;
                    }
                }
                dx.ensure_finite("norm backward")?;
                Ok(NormGrads { input: dx, gain: Vec::new(), bias: Vec::new() })
            }
            NormCache::Batch { normalized, std, training } => {
                check_rows(grad_out, &normalized)?;
                let dyhat = grad_out.mul_row_broadcast(gain)?;
                let mut dx = Matrix::zeros(grad_out.rows(), self.width);
                if training {
                    let n = grad_out.rows() as f64;
                    for c in 0..self.width {
                        let (mut m1, mut m2) = (0.0, 0.0);
                        for r in 0..grad_out.rows() {
                            m1 += dyhat.get(r, c);
                            m2 += dyhat.get(r, c) * normalized.get(r, c);
                        }
                        m1 /= n;
                        m2 /= n;
                        for r in 0..grad_out.rows() {
                            dx.set(r, c, (dyhat.get(r, c) - m1 - normalized.get(r, c) * m2) / std[c]);
                        }
                    }
                } else {
                    // running statistics are constants here
                    for r in 0..grad_out.rows() {
                        for ((o, d), s) in dx.row_mut(r).iter_mut().zip(dyhat.row(r)).zip(&std) {
                            *o = d / s;
                        }
                    }
                }
                dx.ensure_finite("norm backward")?;
                let (g_gain, g_bias) = affine_grads(grad_out, &normalized)?;
                Ok(NormGrads { input: dx, gain: g_gain, bias: g_bias })
            }
        }
    }

    /// Runs [`backward`](Self::backward), adds the parameter gradients into
    /// the gain/bias buffers and returns the input gradient.
    pub fn backward_accumulate(&mut self, grad_out: &Matrix) -> Result<Matrix> {
        let grads = self.backward(grad_out)?;
        if self.spec.kind.has_affine() {
            self.gain.accumulate(&grads.gain)?;
            self.bias.accumulate(&grads.bias)?;
        }
        Ok(grads.input)
    }

    pub fn zero_grad(&mut self) {
        self.gain.zero_grad();
        self.bias.zero_grad();
    }
}

fn check_rows(grad: &Matrix, cached: &Matrix) -> Result<()> {
    if grad.rows() != cached.rows() {
        return Err(Error::dim("norm backward", format!("{} rows vs {} cached", grad.rows(), cached.rows())));
    }
    Ok(())
}

fn affine_grads(grad_out: &Matrix, normalized: &Matrix) -> Result<(Vec<f64>, Vec<f64>)> {
    let g_gain = grad_out.mul(normalized)?.col_sums();
    Ok((g_gain, grad_out.col_sums()))
}

fn column_mean_var(x: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let n = x.rows() as f64;
    let mean: Vec<f64> = x.col_sums().into_iter().map(|s| s / n).collect();
    let mut var = vec![0.0; x.cols()];
    for r in 0..x.rows() {
        for ((v, x), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    for v in &mut var {
        *v /= n;
    }
    (mean, var)
}

/// `(x - mean) / sqrt(var + eps)` over contiguous segments of each row.
/// Returns the normalized matrix and one std per (row, segment).
fn normalize_segments(x: &Matrix, segment: usize, eps: f64) -> Result<(Matrix, Vec<f64>)> {
    let per_row = x.cols() / segment.max(1);
    let mut out = x.clone();
    let mut stds = Vec::with_capacity(x.rows() * per_row);
    for r in 0..x.rows() {
        for chunk in out.row_mut(r).chunks_mut(segment.max(1)) {
            let (mean, var) = mean_var(chunk);
            let std = (var + eps).sqrt();
            for v in chunk.iter_mut() {
                *v = (*v - mean) / std;
            }
            stds.push(std);
        }
    }
    out.ensure_finite("normalize")?;
    Ok((out, stds))
}

fn variance_only(x: &Matrix, eps: f64) -> Result<(Matrix, Vec<f64>, Vec<f64>)> {
    let (means, vars) = x.row_mean_var();
    let stds: Vec<f64> = vars.iter().map(|v| (v + eps).sqrt()).collect();
    let mut out = x.clone();
    for (r, s) in stds.iter().enumerate() {
        for v in out.row_mut(r) {
            *v /= s;
        }
    }
    out.ensure_finite("variance_only_ln")?;
    Ok((out, means, stds))
}

/// LayerNorm: `gain ⊙ (x - μ)/sqrt(var + eps) + bias` per row.
pub fn layer_norm(x: &Matrix, gain: &[f64], bias: &[f64], eps: f64) -> Result<Matrix> {
    if gain.len() != x.cols() || bias.len() != x.cols() {
        return Err(Error::dim("layer_norm", format!("gain {} / bias {} for width {}", gain.len(), bias.len(), x.cols())));
    }
    let (n, _) = normalize_segments(x, x.cols(), eps)?;
    n.mul_row_broadcast(gain)?.add_row_broadcast(bias)
}

/// LayerNorm without gain and bias.
pub fn simple_ln(x: &Matrix, eps: f64) -> Result<Matrix> {
    normalize_segments(x, x.cols(), eps).map(|(n, _)| n)
}

/// Divides each row by its standard deviation; the mean is not removed.
pub fn vo_ln(x: &Matrix, eps: f64) -> Result<Matrix> {
    variance_only(x, eps).map(|(out, _, _)| out)
}

/// GroupNorm: LayerNorm over `groups` contiguous partitions of each row.
pub fn group_norm(x: &Matrix, gain: &[f64], bias: &[f64], groups: usize, eps: f64) -> Result<Matrix> {
    if groups == 0 || !x.cols().is_multiple_of(groups) {
        return Err(Error::InvalidSpec(format!("group count {groups} does not divide width {}", x.cols())));
    }
    if gain.len() != x.cols() || bias.len() != x.cols() {
        return Err(Error::dim("group_norm", format!("gain {} / bias {} for width {}", gain.len(), bias.len(), x.cols())));
    }
    let (n, _) = normalize_segments(x, x.cols() / groups, eps)?;
    n.mul_row_broadcast(gain)?.add_row_broadcast(bias)
}

/// Diagonal of the variance-only LayerNorm Jacobian:
/// `∂h_i/∂x_i = 1/δ - x_i (x_i - μ) / (δ³ H)` with `δ = sqrt(var + eps)`.
pub fn vo_ln_diag_derivative(x: &[f64], eps: f64) -> Vec<f64> {
    let (first, second) = vo_ln_diag_terms(x, eps);
    first.iter().zip(&second).map(|(a, b)| a - b).collect()
}

/// The two terms of [`vo_ln_diag_derivative`] separately: `1/δ` (repeated
/// per entry) and `x_i (x_i - μ) / (δ³ H)`.
pub fn vo_ln_diag_terms(x: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>) {
    if x.is_empty() {
        return (Vec::new(), Vec::new());
    }
    let h = x.len() as f64;
    let (mu, var) = mean_var(x);
    let delta = (var + eps).sqrt();
    let first = vec![1.0 / delta; x.len()];
    let second = x.iter().map(|xi| xi * (xi - mu) / (delta.powi(3) * h)).collect();
    (first, second)
}
