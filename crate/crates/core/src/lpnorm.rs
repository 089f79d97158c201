//! Projection of representations onto the radius-α lp sphere.
//!
//! `x̄ = α · x / max(‖x‖_p, ε)`, with the norm order and radius either fixed or
//! trainable. Trainable scalars are stored unconstrained and decoded through
//! softplus: `p = 1 + softplus(ρ)`, `α = softplus(a) + 1e-6`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor on the projection denominator; only the zero vector and norms
/// below it are affected.
pub const DEFAULT_EPSILON: f64 = 1e-12;
/// Floor added to the decoded learnable radius.
pub const ALPHA_FLOOR: f64 = 1e-6;

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn softplus_inverse(y: f64) -> f64 {
    debug_assert!(y > 0.0);
    y + (-(-y).exp_m1()).ln()
}

/// Derivative of softplus, i.e. the logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum NormOrder {
    One,
    Two,
    Inf,
    /// Any finite `p > 1`.
    General(f64),
    /// Trainable order; `raw` is ρ with `p = 1 + softplus(ρ)`.
    Learnable { raw: f64 },
}

impl NormOrder {
    /// Maps a numeric order onto the matching fixed mode.
    pub fn fixed(p: f64) -> Result<Self> {
        if p == 1.0 {
            Ok(Self::One)
        } else if p == 2.0 {
            Ok(Self::Two)
        } else if p == f64::INFINITY {
            Ok(Self::Inf)
        } else if p.is_finite() && p > 1.0 {
            Ok(Self::General(p))
        } else {
            Err(Error::Domain(format!("norm order must be >= 1, got {p}")))
        }
    }

    /// Learnable order initialised at p = 2.
    pub fn learnable() -> Self {
        Self::Learnable {
            raw: softplus_inverse(1.0),
        }
    }

    pub fn is_learnable(&self) -> bool {
        matches!(self, Self::Learnable { .. })
    }

    pub fn value(&self) -> f64 {
        match *self {
            Self::One => 1.0,
            Self::Two => 2.0,
            Self::Inf => f64::INFINITY,
            Self::General(p) => p,
            Self::Learnable { raw } => 1.0 + softplus(raw),
        }
    }

    pub fn with_raw(self, raw: f64) -> Self {
        match self {
            Self::Learnable { .. } => Self::Learnable { raw },
            other => other,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum RadiusParam {
    Fixed(f64),
    /// Trainable radius; `raw` is `a` with `α = softplus(a) + 1e-6`.
    Learnable { raw: f64 },
}

impl RadiusParam {
    pub fn fixed(alpha: f64) -> Result<Self> {
        if alpha.is_finite() && alpha > 0.0 {
            Ok(Self::Fixed(alpha))
        } else {
            Err(Error::Domain(format!("radius must be positive, got {alpha}")))
        }
    }

    /// Learnable radius initialised at α = 1.
    pub fn learnable() -> Self {
        Self::Learnable {
            raw: softplus_inverse(1.0 - ALPHA_FLOOR),
        }
    }

    pub fn is_learnable(&self) -> bool {
        matches!(self, Self::Learnable { .. })
    }

    pub fn value(&self) -> f64 {
        match *self {
            Self::Fixed(a) => a,
            Self::Learnable { raw } => softplus(raw) + ALPHA_FLOOR,
        }
    }

    pub fn with_raw(self, raw: f64) -> Self {
        match self {
            Self::Learnable { .. } => Self::Learnable { raw },
            other => other,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LpNormLayer {
    pub order: NormOrder,
    pub radius: RadiusParam,
    pub epsilon: f64,
}

impl LpNormLayer {
    pub fn new(order: NormOrder, radius: RadiusParam) -> Self {
        Self {
            order,
            radius,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn p(&self) -> f64 {
        self.order.value()
    }

    pub fn alpha(&self) -> f64 {
        self.radius.value()
    }

    /// Number of trainable scalars the layer carries (0, 1 or 2).
    pub fn trainable_count(&self) -> usize {
        usize::from(self.order.is_learnable()) + usize::from(self.radius.is_learnable())
    }
}

/// `‖x‖_p` for `p ≥ 1` or `p = ∞`, computed on `|xᵢ| / max|x|` to avoid
/// overflow for large `p`.
pub fn lp_norm(x: &[f64], p: f64) -> Result<f64> {
    if p.is_nan() || p < 1.0 {
        return Err(Error::Domain(format!("norm order must be >= 1, got {p}")));
    }
    Ok(norm_unchecked(x, p))
}

pub(crate) fn norm_unchecked(x: &[f64], p: f64) -> f64 {
    let max = max_abs(x);
    if max == 0.0 {
        return 0.0;
    }
    if p == f64::INFINITY {
        max
    } else if p == 1.0 {
        x.iter().map(|v| v.abs()).sum()
    } else if p == 2.0 {
        max * x.iter().map(|v| (v / max) * (v / max)).sum::<f64>().sqrt()
    } else {
        let s: f64 = x.iter().map(|v| (v.abs() / max).powf(p)).sum();
        max * s.powf(1.0 / p)
    }
}

fn max_abs(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradient of `‖x‖_p` with respect to `x`, given the precomputed norm.
///
/// `p = 1` uses `sign(xᵢ)` with `sign(0) = 0`; `p = ∞` puts `sign(xᵢ)` on the
/// maximal-magnitude coordinates, split evenly among ties.
pub fn norm_gradient(x: &[f64], p: f64, norm: f64) -> Vec<f64> {
    if norm == 0.0 {
        return vec![0.0; x.len()];
    }
    if p == f64::INFINITY {
        let max = max_abs(x);
        let ties = x.iter().filter(|v| v.abs() == max).count() as f64;
        x.iter()
            .map(|&v| if v.abs() == max { sign(v) / ties } else { 0.0 })
            .collect()
    } else if p == 1.0 {
        x.iter().map(|&v| sign(v)).collect()
    } else if p == 2.0 {
        x.iter().map(|&v| v / norm).collect()
    } else {
        x.iter()
            .map(|&v| sign(v) * (v.abs() / norm).powf(p - 1.0))
            .collect()
    }
}

/// `d‖x‖_p / dp` for finite `p > 1`. Zero for the zero vector.
pub fn norm_dp(x: &[f64], p: f64) -> f64 {
    let max = max_abs(x);
    if max == 0.0 {
        return 0.0;
    }
    let mut s = 0.0;
    let mut s_log = 0.0;
    for v in x {
        let u = v.abs() / max;
        if u > 0.0 {
            let up = u.powf(p);
            s += up;
            s_log += up * u.ln();
        }
    }
    let norm = max * s.powf(1.0 / p);
    norm * (s_log / (p * s) - s.ln() / (p * p))
}

/// `max(‖x‖_p, ε)`. Above the floor the projection is exactly
/// `α·x/‖x‖_p`, hence exactly scale invariant; the zero vector maps to 0.
pub fn denominator(norm: f64, eps: f64) -> f64 {
    norm.max(eps)
}

/// `α·x / max(‖x‖_p, ε)`.
pub fn normalize_forward(x: &[f64], layer: &LpNormLayer) -> Vec<f64> {
    let p = layer.p();
    let norm = norm_unchecked(x, p);
    let out = scale(x, layer.alpha() / denominator(norm, layer.epsilon));
    debug_assert!(magnitude_identity_holds(x, &out, layer.alpha(), norm, layer.epsilon));
    out
}

fn scale(x: &[f64], factor: f64) -> Vec<f64> {
    x.iter().map(|v| v * factor).collect()
}

// ‖x̄‖₂ = α·C_p whenever the norm is above the floor.
fn magnitude_identity_holds(x: &[f64], out: &[f64], alpha: f64, norm: f64, eps: f64) -> bool {
    if norm < eps || !norm.is_finite() {
        return true;
    }
    let actual = norm_unchecked(out, 2.0);
    let expected = alpha * norm_unchecked(x, 2.0) / norm;
    (actual - expected).abs() <= 1e-9 * expected
}

/// Vector-Jacobian product of the projection with respect to its input.
pub fn grad_wrt_input(x: &[f64], layer: &LpNormLayer, upstream: &[f64]) -> Vec<f64> {
    let p = layer.p();
    let norm = norm_unchecked(x, p);
    input_vjp(x, p, layer.alpha(), norm, layer.epsilon, upstream)
}

pub(crate) fn input_vjp(
    x: &[f64],
    p: f64,
    alpha: f64,
    norm: f64,
    eps: f64,
    upstream: &[f64],
) -> Vec<f64> {
    if norm < eps {
        // Constant denominator below the floor.
        return upstream.iter().map(|g| alpha * g / eps).collect();
    }
    let denom = norm;
    let gx: f64 = upstream.iter().zip(x).map(|(g, v)| g * v).sum();
    let dn = norm_gradient(x, p, norm);
    upstream
        .iter()
        .zip(&dn)
        .map(|(g, d)| alpha * (g / denom - gx * d / (denom * denom)))
        .collect()
}

/// Derivative of `⟨upstream, x̄⟩` with respect to the norm order `p` itself
/// (finite `p > 1`).
pub fn grad_wrt_p(x: &[f64], p: f64, alpha: f64, epsilon: f64, upstream: &[f64]) -> f64 {
    let norm = norm_unchecked(x, p);
    order_vjp(x, p, alpha, norm, epsilon, upstream)
}

pub(crate) fn order_vjp(
    x: &[f64],
    p: f64,
    alpha: f64,
    norm: f64,
    eps: f64,
    upstream: &[f64],
) -> f64 {
    if norm < eps {
        return 0.0;
    }
    let gx: f64 = upstream.iter().zip(x).map(|(g, v)| g * v).sum();
    -alpha * gx * norm_dp(x, p) / (norm * norm)
}

/// Gradient with respect to the raw order parameter ρ. `None` unless the
/// order is learnable.
pub fn grad_wrt_p_raw(x: &[f64], layer: &LpNormLayer, upstream: &[f64]) -> Option<f64> {
    match layer.order {
        NormOrder::Learnable { raw } => {
            Some(grad_wrt_p(x, layer.p(), layer.alpha(), layer.epsilon, upstream) * sigmoid(raw))
        }
        _ => None,
    }
}

/// Gradient with respect to the radius: `⟨upstream, x/max(‖x‖_p, ε)⟩`, times
/// `softplus′(a)` for the raw parameter. `None` when the radius is fixed.
pub fn grad_wrt_alpha(x: &[f64], layer: &LpNormLayer, upstream: &[f64]) -> Option<f64> {
    match layer.radius {
        RadiusParam::Learnable { raw } => {
            let norm = norm_unchecked(x, layer.p());
            Some(radius_vjp(x, norm, layer.epsilon, upstream) * sigmoid(raw))
        }
        RadiusParam::Fixed(_) => None,
    }
}

pub(crate) fn radius_vjp(x: &[f64], norm: f64, eps: f64, upstream: &[f64]) -> f64 {
    let denom = denominator(norm, eps);
    upstream.iter().zip(x).map(|(g, v)| g * v / denom).sum()
}

/// `C_p = ‖x‖₂ / ‖x‖_p`.
pub fn cp_ratio(x: &[f64], p: f64) -> Result<f64> {
    let norm_p = lp_norm(x, p)?;
    if norm_p == 0.0 {
        return Err(Error::Domain("C_p undefined for the zero vector".into()));
    }
    Ok(norm_unchecked(x, 2.0) / norm_p)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MagnitudeInterval {
    pub lo: f64,
    pub hi: f64,
    /// `‖x̄‖₂` of the actual projection.
    pub actual: f64,
}

impl MagnitudeInterval {
    pub fn contains_actual(&self, tol: f64) -> bool {
        self.actual >= self.lo - tol && self.actual <= self.hi + tol
    }
}

/// Bounds on the Euclidean length of the projected vector:
/// `α·min(1, C_p) ≤ ‖x̄‖₂ ≤ α·max(1, C_p)`.
pub fn magnitude_interval(x: &[f64], p: f64, alpha: f64) -> Result<MagnitudeInterval> {
    let cp = cp_ratio(x, p)?;
    let layer = LpNormLayer::new(NormOrder::fixed(p)?, RadiusParam::fixed(alpha)?);
    let actual = norm_unchecked(&normalize_forward(x, &layer), 2.0);
    Ok(MagnitudeInterval {
        lo: alpha * cp.min(1.0),
        hi: alpha * cp.max(1.0),
        actual,
    })
}

/// `⟨w, x̄⟩` split into `‖w‖₂ · ‖x̄‖₂ · cos θ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogitDecomposition {
    pub weight_norm: f64,
    pub feature_norm: f64,
    pub cosine: f64,
    pub inner: f64,
}

impl LogitDecomposition {
    pub fn reconstructed(&self) -> f64 {
        self.weight_norm * self.feature_norm * self.cosine
    }
}

pub fn logit_decomposition(w: &[f64], xbar: &[f64]) -> Result<LogitDecomposition> {
    if w.len() != xbar.len() {
        return Err(Error::Dimension {
            op: "logit_decomposition",
            left: vec![w.len()],
            right: vec![xbar.len()],
        });
    }
    let weight_norm = norm_unchecked(w, 2.0);
    let feature_norm = norm_unchecked(xbar, 2.0);
    if weight_norm == 0.0 || feature_norm == 0.0 {
        return Err(Error::Domain("angle undefined for a zero vector".into()));
    }
    let inner: f64 = w.iter().zip(xbar).map(|(a, b)| a * b).sum();
    Ok(LogitDecomposition {
        weight_norm,
        feature_norm,
        cosine: inner / (weight_norm * feature_norm),
        inner,
    })
}
