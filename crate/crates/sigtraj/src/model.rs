//! Generative model: Gaussian priors over latent sigmoid parameters and the
//! affine-Gaussian observation density, with closed-form log-densities and
//! their partial derivatives.
//!
//! A subject with attribute vector `x` has a shared slope `s` and per-target
//! inflection ages `p_k`:
//!
//! ```text
//! s   ~ N(w'x + b,   sigma_s^2)
//! p_k ~ N(v'x + a_k, sigma_p^2)
//! ```
//!
//! The latent severity for target `k` at age `t` is the sigmoid
//! `1 / (1 + exp(-(t - p_k) * s))`, and the observed score is
//! `y ~ N(c_k * latent + h_k, sigma_k^2)`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_4;

/// Output clamp for the latent sigmoid. Keeps log-densities and gradients
/// finite at extreme ages.
const LATENT_FLOOR: f64 = 1e-300;
const LATENT_CEIL: f64 = 1.0 - 1e-16;

/// Fixed per-subject attribute vector (genotype, demographics, baseline
/// imaging measures, ...), in the units declared by the cohort metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectAttributes {
    pub values: Vec<f64>,
}

impl SubjectAttributes {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Full parameter set of the generative model.
///
/// `sigma_*` fields are plain standard deviations; the trainer optimizes
/// their logarithms internally so positivity never binds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Slope-prior regression weights (length d).
    pub w: Vec<f64>,
    /// Slope-prior intercept.
    pub b: f64,
    /// Inflection-prior regression weights (length d), shared across targets.
    pub v: Vec<f64>,
    /// Per-target inflection lags (length m), in years of age.
    pub a: Vec<f64>,
    /// Slope prior standard deviation.
    pub sigma_s: f64,
    /// Inflection prior standard deviation, shared across targets.
    pub sigma_p: f64,
    /// Per-target observation scale (length m); sign encodes polarity.
    pub c: Vec<f64>,
    /// Per-target observation offset (length m).
    pub h: Vec<f64>,
    /// Per-target observation noise standard deviation (length m).
    pub sigma_y: Vec<f64>,
}

impl ModelParams {
    /// (attribute dimension d, target count m).
    pub fn dims(&self) -> (usize, usize) {
        (self.w.len(), self.a.len())
    }

    pub fn validate(&self) -> Result<()> {
        let (d, m) = self.dims();
        if self.v.len() != d {
            return Err(Error::DimensionMismatch {
                what: "v".into(),
                expected: d,
                got: self.v.len(),
            });
        }
        for (name, vec) in [("c", &self.c), ("h", &self.h), ("sigma_y", &self.sigma_y)] {
            if vec.len() != m {
                return Err(Error::DimensionMismatch {
                    what: name.into(),
                    expected: m,
                    got: vec.len(),
                });
            }
        }
        if !(self.sigma_s > 0.0 && self.sigma_s.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "sigma_s must be positive and finite, got {}",
                self.sigma_s
            )));
        }
        if !(self.sigma_p > 0.0 && self.sigma_p.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "sigma_p must be positive and finite, got {}",
                self.sigma_p
            )));
        }
        for (k, &s) in self.sigma_y.iter().enumerate() {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidParams(format!(
                    "sigma_y[{k}] must be positive and finite, got {s}"
                )));
            }
        }
        let finite = self.w.iter().chain(&self.v).chain(&self.a).chain(&self.c).chain(&self.h);
        if !self.b.is_finite() || finite.clone().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParams("non-finite parameter entry".into()));
        }
        Ok(())
    }

    fn check_x(&self, x: &SubjectAttributes) -> Result<()> {
        if x.dim() != self.w.len() {
            return Err(Error::DimensionMismatch {
                what: "attribute vector".into(),
                expected: self.w.len(),
                got: x.dim(),
            });
        }
        Ok(())
    }

    /// Prior mean of the slope, `w'x + b`.
    pub fn slope_prior_mean(&self, x: &SubjectAttributes) -> f64 {
        dot(&self.w, &x.values) + self.b
    }

    /// Prior mean of target `k`'s inflection age, `v'x + a_k`.
    pub fn inflection_prior_mean(&self, x: &SubjectAttributes, k: usize) -> f64 {
        dot(&self.v, &x.values) + self.a[k]
    }
}

/// Latent progression parameters of one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    /// Shared sigmoid slope, per year.
    pub slope: f64,
    /// Per-target inflection ages, in years.
    pub inflections: Vec<f64>,
}

/// One observed target value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetObservation {
    pub target: usize,
    pub value: f64,
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn gaussian_ln_pdf(x: f64, mean: f64, sigma: f64) -> f64 {
    let z = (x - mean) / sigma;
    -sigma.ln() - 0.5 * LN_2PI - 0.5 * z * z
}

/// Latent severity at age `t` for inflection `p` and slope `s`.
///
/// Total function: evaluated with the numerically stable branch (only
/// exponentials of non-positive quantities) and clamped into
/// `[1e-300, 1 - 1e-16]` so downstream log-densities stay finite.
pub fn sigmoid_latent(t: f64, p: f64, s: f64) -> f64 {
    let z = (t - p) * s;
    let raw = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    raw.clamp(LATENT_FLOOR, LATENT_CEIL)
}

/// Latent value together with its partials with respect to `p` and `s`.
///
/// Returns `(latent, d_latent/d_p, d_latent/d_s)`.
pub fn sigmoid_latent_partials(t: f64, p: f64, s: f64) -> (f64, f64, f64) {
    let latent = sigmoid_latent(t, p, s);
    let slope_factor = latent * (1.0 - latent);
    (latent, -s * slope_factor, (t - p) * slope_factor)
}

/// Maximum instantaneous rate of change of the latent sigmoid, `s / 4`,
/// attained at the inflection age.
pub fn max_rate(s: f64) -> f64 {
    s / 4.0
}

/// Joint log-density of the latent state under the attribute-conditioned
/// Gaussian priors.
pub fn prior_logdensity(
    latent: &LatentState,
    x: &SubjectAttributes,
    theta: &ModelParams,
) -> Result<f64> {
    theta.validate()?;
    theta.check_x(x)?;
    let (_, m) = theta.dims();
    if latent.inflections.len() != m {
        return Err(Error::DimensionMismatch {
            what: "inflections".into(),
            expected: m,
            got: latent.inflections.len(),
        });
    }
    let mut total = gaussian_ln_pdf(latent.slope, theta.slope_prior_mean(x), theta.sigma_s);
    for (k, &p) in latent.inflections.iter().enumerate() {
        total += gaussian_ln_pdf(p, theta.inflection_prior_mean(x, k), theta.sigma_p);
    }
    Ok(total)
}

/// Partial derivatives of [`prior_logdensity`].
#[derive(Debug, Clone)]
pub struct PriorGrad {
    pub d_slope: f64,
    pub d_inflections: Vec<f64>,
    pub d_w: Vec<f64>,
    pub d_b: f64,
    pub d_v: Vec<f64>,
    pub d_a: Vec<f64>,
    pub d_sigma_s: f64,
    pub d_sigma_p: f64,
}

/// Log-density of the priors along with all partial derivatives.
pub fn prior_logdensity_partials(
    latent: &LatentState,
    x: &SubjectAttributes,
    theta: &ModelParams,
) -> Result<(f64, PriorGrad)> {
    let value = prior_logdensity(latent, x, theta)?;
    let (d, m) = theta.dims();
    let var_s = theta.sigma_s * theta.sigma_s;
    let var_p = theta.sigma_p * theta.sigma_p;

    let rs = latent.slope - theta.slope_prior_mean(x);
    let mut grad = PriorGrad {
        d_slope: -rs / var_s,
        d_inflections: vec![0.0; m],
        d_w: vec![0.0; d],
        d_b: rs / var_s,
        d_v: vec![0.0; d],
        d_a: vec![0.0; m],
        d_sigma_s: -1.0 / theta.sigma_s + rs * rs / (var_s * theta.sigma_s),
        d_sigma_p: 0.0,
    };
    for j in 0..d {
        grad.d_w[j] = rs * x.values[j] / var_s;
    }
    for k in 0..m {
        let rp = latent.inflections[k] - theta.inflection_prior_mean(x, k);
        grad.d_inflections[k] = -rp / var_p;
        grad.d_a[k] = rp / var_p;
        for j in 0..d {
            grad.d_v[j] += rp * x.values[j] / var_p;
        }
        grad.d_sigma_p += -1.0 / theta.sigma_p + rp * rp / (var_p * theta.sigma_p);
    }
    Ok((value, grad))
}

/// Log-likelihood of one observed target value given the latent severity.
pub fn observation_loglik(
    obs: &TargetObservation,
    latent_value: f64,
    theta: &ModelParams,
) -> Result<f64> {
    let m = theta.a.len();
    if obs.target >= m {
        return Err(Error::InvalidTargetIndex {
            index: obs.target,
            n_targets: m,
        });
    }
    let k = obs.target;
    Ok(gaussian_ln_pdf(
        obs.value,
        theta.c[k] * latent_value + theta.h[k],
        theta.sigma_y[k],
    ))
}

/// Partial derivatives of [`observation_loglik`].
#[derive(Debug, Clone, Copy)]
pub struct ObservationGrad {
    pub d_latent: f64,
    pub d_c: f64,
    pub d_h: f64,
    pub d_sigma: f64,
}

/// Observation log-likelihood along with its partial derivatives.
pub fn observation_loglik_partials(
    obs: &TargetObservation,
    latent_value: f64,
    theta: &ModelParams,
) -> Result<(f64, ObservationGrad)> {
    let value = observation_loglik(obs, latent_value, theta)?;
    let k = obs.target;
    let sigma = theta.sigma_y[k];
    let var = sigma * sigma;
    let resid = obs.value - (theta.c[k] * latent_value + theta.h[k]);
    Ok((
        value,
        ObservationGrad {
            d_latent: resid * theta.c[k] / var,
            d_c: resid * latent_value / var,
            d_h: resid / var,
            d_sigma: -1.0 / sigma + resid * resid / (var * sigma),
        },
    ))
}

/// Draw a latent state from the attribute-conditioned priors.
pub fn sample_latent_prior<R: Rng + ?Sized>(
    x: &SubjectAttributes,
    theta: &ModelParams,
    rng: &mut R,
) -> LatentState {
    let eta: f64 = rng.sample(StandardNormal);
    let slope = theta.slope_prior_mean(x) + theta.sigma_s * eta;
    let inflections = (0..theta.a.len())
        .map(|k| {
            let eps: f64 = rng.sample(StandardNormal);
            theta.inflection_prior_mean(x, k) + theta.sigma_p * eps
        })
        .collect();
    LatentState { slope, inflections }
}
