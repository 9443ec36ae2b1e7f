//! Variational training: maximize a Monte Carlo estimate of the evidence
//! lower bound over model parameters and per-subject Gaussian proxies.
//!
//! The proxy for a subject is `q(s) = N(mu_s, sigma_s_proxy^2)` together with
//! `q(p) = N(mu_p, Sigma_p)`, `Sigma_p = chol_p' * chol_p` for a
//! lower-triangular factor with positive diagonal. Expected log-likelihood
//! terms are estimated with reparameterized samples
//! (`s = mu + sigma * eta`, `p = chol' * eps + mu`), so gradients flow through
//! the sampling step analytically. Prior cross-entropy and proxy entropy are
//! Gaussian-Gaussian expectations and are evaluated in closed form.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cohort::{Cohort, Visit};
use crate::error::{Error, Result};
use crate::mix_seed;
use crate::model::{
    sigmoid_latent_partials, ModelParams, SubjectAttributes, LN_2PI,
};
use crate::optim::AdamAscent;

/// Monte Carlo samples per gradient step during training.
pub const DEFAULT_MC_SAMPLES: usize = 8;
/// Monte Carlo samples used when reporting a final ELBO value.
pub const REPORT_MC_SAMPLES: usize = 256;
/// Moving-average window for the convergence check and the smoothed trace.
const TRACE_WINDOW: usize = 50;
/// Consecutive below-tolerance checks required before stopping; guards the
/// noisy Monte Carlo objective against premature plateau detection.
const CONVERGENCE_PATIENCE: usize = 3;

/// Packed lower-triangular matrix with row-major storage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowerTriangular {
    dim: usize,
    /// Rows concatenated: (0,0), (1,0), (1,1), (2,0), ...
    data: Vec<f64>,
}

impl LowerTriangular {
    pub fn scaled_identity(dim: usize, diag: f64) -> Self {
        let mut lt = Self {
            dim,
            data: vec![0.0; dim * (dim + 1) / 2],
        };
        for k in 0..dim {
            lt.set(k, k, diag);
        }
        lt
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            data: vec![0.0; dim * (dim + 1) / 2],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    fn index(&self, row: usize, col: usize) -> usize {
        debug_assert!(col <= row && row < self.dim);
        row * (row + 1) / 2 + col
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        if col > row {
            0.0
        } else {
            self.data[self.index(row, col)]
        }
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        let idx = self.index(row, col);
        self.data[idx] = value;
    }

    pub fn diag(&self, k: usize) -> f64 {
        self.get(k, k)
    }

    pub fn packed(&self) -> &[f64] {
        &self.data
    }

    /// `out = transpose(self) * eps + mu`, i.e. `out[k] = mu[k] + sum_{l >= k} self[l,k] * eps[l]`.
    pub fn t_mul_add(&self, eps: &[f64], mu: &[f64], out: &mut [f64]) {
        for k in 0..self.dim {
            let mut acc = mu[k];
            for l in k..self.dim {
                acc += self.get(l, k) * eps[l];
            }
            out[k] = acc;
        }
    }

    /// Diagonal entry `k` of the Gram matrix `transpose(self) * self`.
    pub fn gram_diag(&self, k: usize) -> f64 {
        (k..self.dim).map(|l| self.get(l, k).powi(2)).sum()
    }

    /// Dense Gram matrix `transpose(self) * self`.
    pub fn gram(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.dim]; self.dim];
        for i in 0..self.dim {
            for j in 0..self.dim {
                // (G'G)_{ij} = sum_l G_{li} G_{lj}, nonzero for l >= max(i,j)
                let mut acc = 0.0;
                for l in i.max(j)..self.dim {
                    acc += self.get(l, i) * self.get(l, j);
                }
                out[i][j] = acc;
            }
        }
        out
    }

    pub fn log_diag_sum(&self) -> f64 {
        (0..self.dim).map(|k| self.diag(k).ln()).sum()
    }
}

/// Per-subject variational proxy parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalState {
    /// Mean of the slope proxy.
    pub mu_s: f64,
    /// Standard deviation of the slope proxy.
    pub sigma_s_proxy: f64,
    /// Mean of the inflection proxy (length m).
    pub mu_p: Vec<f64>,
    /// Factor of the inflection proxy covariance `Sigma_p = chol_p' * chol_p`.
    pub chol_p: LowerTriangular,
}

impl VariationalState {
    /// Proxy implied by the priors for attributes `x`: the exact posterior
    /// when no observations are available.
    pub fn prior_implied(x: &SubjectAttributes, theta: &ModelParams) -> Self {
        let m = theta.a.len();
        Self {
            mu_s: theta.slope_prior_mean(x),
            sigma_s_proxy: theta.sigma_s,
            mu_p: (0..m).map(|k| theta.inflection_prior_mean(x, k)).collect(),
            chol_p: LowerTriangular::scaled_identity(m, theta.sigma_p),
        }
    }

    pub fn n_targets(&self) -> usize {
        self.mu_p.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_s_proxy > 0.0 && self.sigma_s_proxy.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "sigma_s_proxy must be positive, got {}",
                self.sigma_s_proxy
            )));
        }
        let m = self.mu_p.len();
        if self.chol_p.dim() != m {
            return Err(Error::DimensionMismatch {
                what: "chol_p".into(),
                expected: m,
                got: self.chol_p.dim(),
            });
        }
        for k in 0..m {
            if !(self.chol_p.diag(k) > 0.0 && self.chol_p.diag(k).is_finite()) {
                return Err(Error::InvalidParams(format!(
                    "chol_p diagonal entry {k} must be positive, got {}",
                    self.chol_p.diag(k)
                )));
            }
        }
        Ok(())
    }

    /// Proxy covariance of the inflection vector.
    pub fn covariance(&self) -> Vec<Vec<f64>> {
        self.chol_p.gram()
    }

    /// Draw a reparameterized sample.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> MonteCarloDraw {
        let eta: f64 = rng.sample(StandardNormal);
        let eps: Vec<f64> = (0..self.n_targets())
            .map(|_| rng.sample(StandardNormal))
            .collect();
        MonteCarloDraw::reparameterize(self, eta, eps)
    }
}

/// A reparameterized Monte Carlo sample: standard-normal auxiliaries and the
/// transformed latent draw.
#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloDraw {
    pub eta: f64,
    pub eps: Vec<f64>,
    pub s_sample: f64,
    pub p_sample: Vec<f64>,
}

impl MonteCarloDraw {
    /// Deterministic transform of auxiliaries through the proxy parameters:
    /// `s = eta * sigma + mu_s`, `p = chol' * eps + mu_p`.
    pub fn reparameterize(gamma: &VariationalState, eta: f64, eps: Vec<f64>) -> Self {
        let mut p_sample = vec![0.0; gamma.n_targets()];
        gamma.chol_p.t_mul_add(&eps, &gamma.mu_p, &mut p_sample);
        Self {
            eta,
            s_sample: gamma.mu_s + gamma.sigma_s_proxy * eta,
            eps,
            p_sample,
        }
    }
}

/// Training configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Monte Carlo samples per gradient step.
    pub mc_samples: usize,
    /// Adam step size.
    pub step_size: f64,
    pub max_iters: usize,
    /// Relative improvement of the smoothed ELBO below which training stops.
    pub convergence_tol: f64,
    /// Additional randomly perturbed initializations beyond the
    /// deterministic one; the best-scoring run is kept.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mc_samples: DEFAULT_MC_SAMPLES,
            step_size: 1e-2,
            max_iters: 5000,
            convergence_tol: 1e-4,
            restarts: 3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Defaults for test-time personalization of a single subject.
    pub fn personalization_default() -> Self {
        Self {
            max_iters: 2000,
            restarts: 0,
            seed: 0x7e57_5eed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mc_samples == 0 {
            return Err(Error::InvalidConfig("mc_samples must be positive".into()));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidConfig("step_size must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be positive".into()));
        }
        if !(self.convergence_tol > 0.0 && self.convergence_tol.is_finite()) {
            return Err(Error::InvalidConfig(
                "convergence_tol must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Closed-form entropy of the proxy distributions,
/// `H[q(s)] + H[q(p)] = 1/2 log(2 pi e sigma^2) + 1/2 log((2 pi e)^m det Sigma_p)`.
pub fn proxy_entropy(gamma: &VariationalState) -> Result<f64> {
    gamma.validate()?;
    let m = gamma.n_targets() as f64;
    Ok(0.5 * (1.0 + LN_2PI)
        + gamma.sigma_s_proxy.ln()
        + 0.5 * m * (1.0 + LN_2PI)
        + gamma.chol_p.log_diag_sum())
}

/// Gradient of the ELBO with respect to the model parameters, component for
/// component with [`ModelParams`]. Sigma entries are derivatives with respect
/// to the standard deviations themselves.
#[derive(Debug, Clone)]
pub struct ThetaGrad {
    pub w: Vec<f64>,
    pub b: f64,
    pub v: Vec<f64>,
    pub a: Vec<f64>,
    pub sigma_s: f64,
    pub sigma_p: f64,
    pub c: Vec<f64>,
    pub h: Vec<f64>,
    pub sigma_y: Vec<f64>,
}

impl ThetaGrad {
    pub fn zeros(d: usize, m: usize) -> Self {
        Self {
            w: vec![0.0; d],
            b: 0.0,
            v: vec![0.0; d],
            a: vec![0.0; m],
            sigma_s: 0.0,
            sigma_p: 0.0,
            c: vec![0.0; m],
            h: vec![0.0; m],
            sigma_y: vec![0.0; m],
        }
    }

    fn accumulate(&mut self, other: &ThetaGrad) {
        for (dst, src) in self.w.iter_mut().zip(&other.w) {
            *dst += src;
        }
        self.b += other.b;
        for (dst, src) in self.v.iter_mut().zip(&other.v) {
            *dst += src;
        }
        for (dst, src) in self.a.iter_mut().zip(&other.a) {
            *dst += src;
        }
        self.sigma_s += other.sigma_s;
        self.sigma_p += other.sigma_p;
        for (dst, src) in self.c.iter_mut().zip(&other.c) {
            *dst += src;
        }
        for (dst, src) in self.h.iter_mut().zip(&other.h) {
            *dst += src;
        }
        for (dst, src) in self.sigma_y.iter_mut().zip(&other.sigma_y) {
            *dst += src;
        }
    }
}

/// Gradient of the ELBO with respect to one subject's proxy parameters.
#[derive(Debug, Clone)]
pub struct GammaGrad {
    pub mu_s: f64,
    pub sigma_s_proxy: f64,
    pub mu_p: Vec<f64>,
    pub chol_p: LowerTriangular,
}

impl GammaGrad {
    pub fn zeros(m: usize) -> Self {
        Self {
            mu_s: 0.0,
            sigma_s_proxy: 0.0,
            mu_p: vec![0.0; m],
            chol_p: LowerTriangular::zeros(m),
        }
    }
}

/// One evaluation of the Monte Carlo ELBO and its gradients.
#[derive(Debug, Clone)]
pub struct ElboEval {
    pub elbo: f64,
    /// Monte Carlo standard error of the sampled likelihood portion.
    pub mc_se: f64,
    pub grad_theta: ThetaGrad,
    pub grad_gammas: Vec<GammaGrad>,
    /// Indices of subjects contributing no observation terms.
    pub unobserved_subjects: Vec<usize>,
}

/// Per-subject ELBO terms and gradients; shared by training and test-time
/// personalization.
struct SubjectEval {
    elbo: f64,
    per_sample_loglik: Vec<f64>,
    grad_theta: ThetaGrad,
    grad_gamma: GammaGrad,
    has_observations: bool,
}

fn subject_eval<R: Rng + ?Sized>(
    theta: &ModelParams,
    gamma: &VariationalState,
    x: &SubjectAttributes,
    visits: &[Visit],
    n_samples: usize,
    rng: &mut R,
) -> SubjectEval {
    let (d, m) = theta.dims();
    let mut grad_theta = ThetaGrad::zeros(d, m);
    let mut grad_gamma = GammaGrad::zeros(m);
    let mut elbo = 0.0;

    // Closed-form prior cross-entropy E_q[log p(s | x)] ...
    let var_s = theta.sigma_s * theta.sigma_s;
    let mu0_s = theta.slope_prior_mean(x);
    let rs = gamma.mu_s - mu0_s;
    let q_var_s = gamma.sigma_s_proxy * gamma.sigma_s_proxy;
    elbo += -0.5 * LN_2PI - theta.sigma_s.ln() - (rs * rs + q_var_s) / (2.0 * var_s);
    grad_gamma.mu_s += -rs / var_s;
    grad_gamma.sigma_s_proxy += -gamma.sigma_s_proxy / var_s;
    grad_theta.b += rs / var_s;
    for j in 0..d {
        grad_theta.w[j] += rs * x.values[j] / var_s;
    }
    grad_theta.sigma_s += -1.0 / theta.sigma_s + (rs * rs + q_var_s) / (var_s * theta.sigma_s);

    // ... and E_q[log p(p | x)] with the full-covariance proxy.
    let var_p = theta.sigma_p * theta.sigma_p;
    for k in 0..m {
        let rp = gamma.mu_p[k] - theta.inflection_prior_mean(x, k);
        let marg_var = gamma.chol_p.gram_diag(k);
        elbo += -0.5 * LN_2PI - theta.sigma_p.ln() - (rp * rp + marg_var) / (2.0 * var_p);
        grad_gamma.mu_p[k] += -rp / var_p;
        for l in k..m {
            let g = grad_gamma.chol_p.get(l, k) - gamma.chol_p.get(l, k) / var_p;
            grad_gamma.chol_p.set(l, k, g);
        }
        grad_theta.a[k] += rp / var_p;
        for j in 0..d {
            grad_theta.v[j] += rp * x.values[j] / var_p;
        }
        grad_theta.sigma_p +=
            -1.0 / theta.sigma_p + (rp * rp + marg_var) / (var_p * theta.sigma_p);
    }

    // Proxy entropy.
    elbo += 0.5 * (1.0 + LN_2PI) * (1.0 + m as f64)
        + gamma.sigma_s_proxy.ln()
        + gamma.chol_p.log_diag_sum();
    grad_gamma.sigma_s_proxy += 1.0 / gamma.sigma_s_proxy;
    for k in 0..m {
        let g = grad_gamma.chol_p.get(k, k) + 1.0 / gamma.chol_p.diag(k);
        grad_gamma.chol_p.set(k, k, g);
    }

    // Monte Carlo expectation of the observation log-likelihood.
    let inv_s = 1.0 / n_samples as f64;
    let mut per_sample_loglik = vec![0.0; n_samples];
    let mut eps = vec![0.0; m];
    let mut p_sample = vec![0.0; m];
    let mut has_observations = false;
    for sample_loglik in per_sample_loglik.iter_mut() {
        let eta: f64 = rng.sample(StandardNormal);
        for e in eps.iter_mut() {
            *e = rng.sample(StandardNormal);
        }
        let s_sample = gamma.mu_s + gamma.sigma_s_proxy * eta;
        gamma.chol_p.t_mul_add(&eps, &gamma.mu_p, &mut p_sample);

        for visit in visits {
            let t = visit.age;
            for (k, value) in visit.values.iter().enumerate().take(m) {
                let Some(y) = value else { continue };
                has_observations = true;
                let (latent, dlat_dp, dlat_ds) = sigmoid_latent_partials(t, p_sample[k], s_sample);
                let sigma = theta.sigma_y[k];
                let var = sigma * sigma;
                let resid = y - (theta.c[k] * latent + theta.h[k]);
                *sample_loglik += -sigma.ln() - 0.5 * LN_2PI - resid * resid / (2.0 * var);

                let d_latent = resid * theta.c[k] / var;
                grad_theta.c[k] += resid * latent / var * inv_s;
                grad_theta.h[k] += resid / var * inv_s;
                grad_theta.sigma_y[k] += (-1.0 / sigma + resid * resid / (var * sigma)) * inv_s;

                let dll_ds = d_latent * dlat_ds;
                let dll_dp = d_latent * dlat_dp;
                grad_gamma.mu_s += dll_ds * inv_s;
                grad_gamma.sigma_s_proxy += dll_ds * eta * inv_s;
                grad_gamma.mu_p[k] += dll_dp * inv_s;
                for l in k..m {
                    let g = grad_gamma.chol_p.get(l, k) + dll_dp * eps[l] * inv_s;
                    grad_gamma.chol_p.set(l, k, g);
                }
            }
        }
    }
    elbo += per_sample_loglik.iter().sum::<f64>() * inv_s;

    SubjectEval {
        elbo,
        per_sample_loglik,
        grad_theta,
        grad_gamma,
        has_observations,
    }
}

/// Monte Carlo ELBO over the cohort together with analytic gradients for all
/// model and proxy parameters. Missing target entries contribute no term;
/// subjects with no observed values contribute only prior cross-entropy and
/// entropy and are flagged in the result.
pub fn elbo_and_gradients<R: Rng + ?Sized>(
    theta: &ModelParams,
    gammas: &[VariationalState],
    cohort: &Cohort,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<ElboEval> {
    theta.validate()?;
    config.validate()?;
    let (d, m) = theta.dims();
    if d != cohort.n_attributes() {
        return Err(Error::DimensionMismatch {
            what: "model attribute dimension".into(),
            expected: cohort.n_attributes(),
            got: d,
        });
    }
    if m != cohort.n_targets() {
        return Err(Error::DimensionMismatch {
            what: "model target dimension".into(),
            expected: cohort.n_targets(),
            got: m,
        });
    }
    if gammas.len() != cohort.subjects.len() {
        return Err(Error::DimensionMismatch {
            what: "proxy states".into(),
            expected: cohort.subjects.len(),
            got: gammas.len(),
        });
    }
    if cohort.subjects.is_empty() {
        return Err(Error::InsufficientData("cohort has no subjects".into()));
    }

    let n_samples = config.mc_samples;
    let mut elbo = 0.0;
    let mut per_sample_totals = vec![0.0; n_samples];
    let mut grad_theta = ThetaGrad::zeros(d, m);
    let mut grad_gammas = Vec::with_capacity(gammas.len());
    let mut unobserved = Vec::new();

    for (i, (subject, gamma)) in cohort.subjects.iter().zip(gammas).enumerate() {
        gamma.validate()?;
        if gamma.n_targets() != m {
            return Err(Error::DimensionMismatch {
                what: format!("proxy state of subject {i}"),
                expected: m,
                got: gamma.n_targets(),
            });
        }
        let eval = subject_eval(
            theta,
            gamma,
            &subject.attributes,
            &subject.visits,
            n_samples,
            rng,
        );
        elbo += eval.elbo;
        for (total, value) in per_sample_totals.iter_mut().zip(&eval.per_sample_loglik) {
            *total += value;
        }
        grad_theta.accumulate(&eval.grad_theta);
        grad_gammas.push(eval.grad_gamma);
        if !eval.has_observations {
            unobserved.push(i);
        }
    }

    let mean = per_sample_totals.iter().sum::<f64>() / n_samples as f64;
    let var = per_sample_totals
        .iter()
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / (n_samples.max(2) - 1) as f64;
    let mc_se = (var / n_samples as f64).sqrt();

    Ok(ElboEval {
        elbo,
        mc_se,
        grad_theta,
        grad_gammas,
        unobserved_subjects: unobserved,
    })
}

/// ELBO estimate with `mc_samples` draws from a fresh seeded stream; returns
/// the estimate and its Monte Carlo standard error.
pub fn elbo_estimate(
    theta: &ModelParams,
    gammas: &[VariationalState],
    cohort: &Cohort,
    mc_samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let config = TrainConfig {
        mc_samples,
        ..TrainConfig::default()
    };
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let eval = elbo_and_gradients(theta, gammas, cohort, &config, &mut rng)?;
    Ok((eval.elbo, eval.mc_se))
}

// ---------------------------------------------------------------------------
// Flat packing for the optimizer. Standard deviations and triangular
// diagonals are stored as logarithms so the search space is unconstrained.
// ---------------------------------------------------------------------------

struct Packer {
    d: usize,
    m: usize,
    n_subjects: usize,
}

impl Packer {
    fn theta_len(&self) -> usize {
        2 * self.d + 4 * self.m + 3
    }

    fn gamma_len(&self) -> usize {
        2 + self.m + self.m * (self.m + 1) / 2
    }

    fn total_len(&self) -> usize {
        self.theta_len() + self.n_subjects * self.gamma_len()
    }

    fn pack_theta(&self, theta: &ModelParams, out: &mut Vec<f64>) {
        out.extend_from_slice(&theta.w);
        out.push(theta.b);
        out.extend_from_slice(&theta.v);
        out.extend_from_slice(&theta.a);
        out.push(theta.sigma_s.ln());
        out.push(theta.sigma_p.ln());
        out.extend_from_slice(&theta.c);
        out.extend_from_slice(&theta.h);
        out.extend(theta.sigma_y.iter().map(|s| s.ln()));
    }

    fn pack_gamma(&self, gamma: &VariationalState, out: &mut Vec<f64>) {
        out.push(gamma.mu_s);
        out.push(gamma.sigma_s_proxy.ln());
        out.extend_from_slice(&gamma.mu_p);
        for r in 0..self.m {
            for c in 0..=r {
                let v = gamma.chol_p.get(r, c);
                out.push(if r == c { v.ln() } else { v });
            }
        }
    }

    fn pack(&self, theta: &ModelParams, gammas: &[VariationalState]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_len());
        self.pack_theta(theta, &mut out);
        for gamma in gammas {
            self.pack_gamma(gamma, &mut out);
        }
        out
    }

    fn unpack_theta(&self, x: &[f64]) -> ModelParams {
        let (d, m) = (self.d, self.m);
        let mut pos = 0;
        let mut take = |n: usize| {
            let slice = &x[pos..pos + n];
            pos += n;
            slice
        };
        ModelParams {
            w: take(d).to_vec(),
            b: take(1)[0],
            v: take(d).to_vec(),
            a: take(m).to_vec(),
            sigma_s: take(1)[0].exp(),
            sigma_p: take(1)[0].exp(),
            c: take(m).to_vec(),
            h: take(m).to_vec(),
            sigma_y: take(m).iter().map(|l| l.exp()).collect(),
        }
    }

    fn unpack_gamma(&self, x: &[f64]) -> VariationalState {
        let m = self.m;
        let mut chol = LowerTriangular::zeros(m);
        let mut pos = 2 + m;
        for r in 0..m {
            for c in 0..=r {
                let v = x[pos];
                pos += 1;
                chol.set(r, c, if r == c { v.exp() } else { v });
            }
        }
        VariationalState {
            mu_s: x[0],
            sigma_s_proxy: x[1].exp(),
            mu_p: x[2..2 + m].to_vec(),
            chol_p: chol,
        }
    }

    fn unpack(&self, x: &[f64]) -> (ModelParams, Vec<VariationalState>) {
        let theta = self.unpack_theta(&x[..self.theta_len()]);
        let gammas = (0..self.n_subjects)
            .map(|i| {
                let start = self.theta_len() + i * self.gamma_len();
                self.unpack_gamma(&x[start..start + self.gamma_len()])
            })
            .collect();
        (theta, gammas)
    }

    /// Map natural-space gradients into the packed log-space coordinates.
    fn grad_to_packed(
        &self,
        eval: &ElboEval,
        theta: &ModelParams,
        gammas: &[VariationalState],
        out: &mut [f64],
    ) {
        let mut pos = 0;
        let put = |out: &mut [f64], pos: &mut usize, vals: &[f64]| {
            out[*pos..*pos + vals.len()].copy_from_slice(vals);
            *pos += vals.len();
        };
        let g = &eval.grad_theta;
        put(out, &mut pos, &g.w);
        put(out, &mut pos, &[g.b]);
        put(out, &mut pos, &g.v);
        put(out, &mut pos, &g.a);
        put(out, &mut pos, &[g.sigma_s * theta.sigma_s]);
        put(out, &mut pos, &[g.sigma_p * theta.sigma_p]);
        put(out, &mut pos, &g.c);
        put(out, &mut pos, &g.h);
        let sy: Vec<f64> = g
            .sigma_y
            .iter()
            .zip(&theta.sigma_y)
            .map(|(grad, sigma)| grad * sigma)
            .collect();
        put(out, &mut pos, &sy);

        for (gg, gamma) in eval.grad_gammas.iter().zip(gammas) {
            put(out, &mut pos, &[gg.mu_s]);
            put(
                out,
                &mut pos,
                &[gg.sigma_s_proxy * gamma.sigma_s_proxy],
            );
            put(out, &mut pos, &gg.mu_p);
            for r in 0..self.m {
                for c in 0..=r {
                    let grad = gg.chol_p.get(r, c);
                    out[pos] = if r == c {
                        grad * gamma.chol_p.diag(r)
                    } else {
                        grad
                    };
                    pos += 1;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Summary of a completed training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    /// Subject ids that contributed no observation terms.
    pub unobserved_subjects: Vec<String>,
    /// Score of every initialization (final reported ELBO, or validation
    /// score when a validation cohort was supplied).
    pub restart_scores: Vec<f64>,
    /// Index of the initialization that was kept.
    pub selected_restart: usize,
    /// Iterations performed by each initialization.
    pub iterations: Vec<usize>,
}

/// A trained model: parameters, per-subject proxies, and run metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainFit {
    pub params: ModelParams,
    pub proxies: Vec<VariationalState>,
    /// Monotone smoothed ELBO trace of the selected run (running maximum of a
    /// 50-iteration moving average).
    pub trace: Vec<f64>,
    /// Visit-age range seen in training, for extrapolation warnings.
    pub age_range: Option<(f64, f64)>,
    pub summary: TrainSummary,
}

fn init_theta(cohort: &Cohort, perturb: Option<&mut ChaCha12Rng>) -> ModelParams {
    let d = cohort.n_attributes();
    let m = cohort.n_targets();
    let mean_age = cohort.mean_visit_age().unwrap_or(70.0);
    let age_span = cohort
        .age_range()
        .map(|(lo, hi)| (hi - lo).max(1.0))
        .unwrap_or(30.0);
    let mut theta = ModelParams {
        w: vec![0.0; d],
        b: 0.5,
        v: vec![0.0; d],
        a: vec![mean_age; m],
        sigma_s: 0.1,
        sigma_p: 0.1 * age_span,
        c: cohort.meta.targets.iter().map(|t| t.signed_span()).collect(),
        h: cohort
            .meta
            .targets
            .iter()
            .map(|t| t.healthy_value())
            .collect(),
        sigma_y: cohort
            .meta
            .targets
            .iter()
            .map(|t| (0.1 * (t.range.1 - t.range.0).abs()).max(1e-3))
            .collect(),
    };
    if let Some(rng) = perturb {
        for w in theta.w.iter_mut().chain(theta.v.iter_mut()) {
            *w += 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
        theta.b += 0.1 * rng.sample::<f64, _>(StandardNormal);
        for a in theta.a.iter_mut() {
            *a += 2.0 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    theta
}

struct RunResult {
    theta: ModelParams,
    gammas: Vec<VariationalState>,
    trace: Vec<f64>,
    iterations: usize,
}

/// Moving-average convergence tracker producing the monotone smoothed trace.
struct TraceTracker {
    raw: Vec<f64>,
    smoothed: Vec<f64>,
    last_checked: Option<f64>,
    below_tol_checks: usize,
}

impl TraceTracker {
    fn new() -> Self {
        Self {
            raw: Vec::new(),
            smoothed: Vec::new(),
            last_checked: None,
            below_tol_checks: 0,
        }
    }

    /// Push a raw value; returns true once the 50-iteration moving average
    /// has improved by less than `tol` (relative) over
    /// [`CONVERGENCE_PATIENCE`] consecutive checks.
    fn push_and_check(&mut self, value: f64, tol: f64) -> bool {
        self.raw.push(value);
        let n = self.raw.len();
        let window = TRACE_WINDOW.min(n);
        let ma = self.raw[n - window..].iter().sum::<f64>() / window as f64;
        let smoothed = match self.smoothed.last() {
            Some(&prev) => prev.max(ma),
            None => ma,
        };
        self.smoothed.push(smoothed);

        if n % TRACE_WINDOW != 0 || n < 2 * TRACE_WINDOW {
            return false;
        }
        if let Some(prev) = self.last_checked {
            let improvement = (ma - prev) / prev.abs().max(1e-12);
            if improvement < tol {
                self.below_tol_checks += 1;
            } else {
                self.below_tol_checks = 0;
            }
        }
        self.last_checked = Some(ma);
        self.below_tol_checks >= CONVERGENCE_PATIENCE
    }
}

fn optimize_run(
    cohort: &Cohort,
    theta0: ModelParams,
    gammas0: Vec<VariationalState>,
    config: &TrainConfig,
    run_seed: u64,
) -> Result<RunResult> {
    let packer = Packer {
        d: cohort.n_attributes(),
        m: cohort.n_targets(),
        n_subjects: cohort.subjects.len(),
    };
    let mut x = packer.pack(&theta0, &gammas0);
    let mut grad = vec![0.0; x.len()];
    let mut adam = AdamAscent::new(x.len(), config.step_size);
    let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(run_seed, 2));
    let mut tracker = TraceTracker::new();
    let mut iterations = 0;

    for iter in 0..config.max_iters {
        let (theta, gammas) = packer.unpack(&x);
        let eval = elbo_and_gradients(&theta, &gammas, cohort, config, &mut rng)?;
        if !eval.elbo.is_finite() {
            return Err(Error::Divergence {
                iteration: iter,
                detail: "ELBO is not finite".into(),
            });
        }
        packer.grad_to_packed(&eval, &theta, &gammas, &mut grad);
        adam.ascend(&mut x, &grad);
        iterations = iter + 1;
        if tracker.push_and_check(eval.elbo, config.convergence_tol) {
            break;
        }
    }

    let (theta, gammas) = packer.unpack(&x);
    Ok(RunResult {
        theta,
        gammas,
        trace: tracker.smoothed,
        iterations,
    })
}

fn train_impl(
    cohort: &Cohort,
    validation: Option<&Cohort>,
    config: &TrainConfig,
) -> Result<TrainFit> {
    config.validate()?;
    cohort.validate()?;
    if cohort.subjects.is_empty() {
        return Err(Error::InsufficientData("cohort has no subjects".into()));
    }
    if let Some(val) = validation {
        val.validate()?;
    }

    let runs = config.restarts + 1;
    let mut best: Option<(f64, RunResult, usize)> = None;
    let mut restart_scores = Vec::with_capacity(runs);
    let mut iterations = Vec::with_capacity(runs);

    for run in 0..runs {
        let run_seed = mix_seed(config.seed, 1000 + run as u64);
        let theta0 = if run == 0 {
            init_theta(cohort, None)
        } else {
            let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(run_seed, 3));
            init_theta(cohort, Some(&mut rng))
        };
        let gammas0 = cohort
            .subjects
            .iter()
            .map(|s| VariationalState::prior_implied(&s.attributes, &theta0))
            .collect();
        let result = optimize_run(cohort, theta0, gammas0, config, run_seed)?;

        let score = match validation {
            None => {
                elbo_estimate(
                    &result.theta,
                    &result.gammas,
                    cohort,
                    REPORT_MC_SAMPLES,
                    mix_seed(run_seed, 4),
                )?
                .0
            }
            Some(val) => validation_score(&result.theta, val, config, mix_seed(run_seed, 5))?,
        };
        restart_scores.push(score);
        iterations.push(result.iterations);
        let better = match &best {
            None => true,
            Some((best_score, _, _)) => score > *best_score,
        };
        if better {
            best = Some((score, result, run));
        }
    }

    let (_, result, selected) = best.expect("at least one training run");
    let unobserved = cohort
        .subjects
        .iter()
        .filter(|s| s.n_observed() == 0)
        .map(|s| s.id.clone())
        .collect();

    Ok(TrainFit {
        params: result.theta,
        proxies: result.gammas,
        trace: result.trace,
        age_range: cohort.age_range(),
        summary: TrainSummary {
            unobserved_subjects: unobserved,
            restart_scores,
            selected_restart: selected,
            iterations,
        },
    })
}

/// Mean test-time ELBO over a held-out cohort: each subject's proxy is
/// personalized against its full history under fixed `theta`, then scored.
fn validation_score(
    theta: &ModelParams,
    validation: &Cohort,
    config: &TrainConfig,
    seed: u64,
) -> Result<f64> {
    let mut total = 0.0;
    for (i, subject) in validation.subjects.iter().enumerate() {
        let pers_config = TrainConfig {
            seed: mix_seed(seed, i as u64),
            max_iters: config.max_iters.min(1000),
            restarts: 0,
            ..config.clone()
        };
        let gamma = personalize_gamma(theta, &subject.attributes, &subject.visits, &pers_config)?;
        let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(seed, 0x9999 + i as u64));
        let eval = subject_eval(
            theta,
            &gamma,
            &subject.attributes,
            &subject.visits,
            64,
            &mut rng,
        );
        total += eval.elbo;
    }
    Ok(total / validation.subjects.len().max(1) as f64)
}

/// Maximize the ELBO over model parameters and per-subject proxies by
/// adaptive gradient ascent on reparameterized Monte Carlo gradients.
/// Deterministic given `config.seed`; the best initialization (by final
/// reported ELBO) is returned.
pub fn train(cohort: &Cohort, config: &TrainConfig) -> Result<TrainFit> {
    train_impl(cohort, None, config)
}

/// Like [`train`], but initializations are scored by mean personalized ELBO
/// on a held-out validation cohort.
pub fn train_validated(
    cohort: &Cohort,
    validation: &Cohort,
    config: &TrainConfig,
) -> Result<TrainFit> {
    train_impl(cohort, Some(validation), config)
}

/// Proxy start with the inflection means implied by inverting each target's
/// observations through the sigmoid at the prior-mean slope. Guards against
/// the reflected (negative-slope) posterior mode that a pure prior start can
/// fall into when the history is short.
fn observation_implied_proxy(
    theta: &ModelParams,
    x: &SubjectAttributes,
    visits: &[Visit],
) -> Option<VariationalState> {
    let slope = theta.slope_prior_mean(x);
    if slope.abs() < 0.05 {
        return None;
    }
    let mut proxy = VariationalState::prior_implied(x, theta);
    let m = theta.a.len();
    let mut any = false;
    for k in 0..m {
        let mut implied = Vec::new();
        for visit in visits {
            let Some(y) = visit.values.get(k).copied().flatten() else {
                continue;
            };
            let latent = ((y - theta.h[k]) / theta.c[k]).clamp(0.02, 0.98);
            implied.push(visit.age - (latent / (1.0 - latent)).ln() / slope);
        }
        if !implied.is_empty() {
            proxy.mu_p[k] = implied.iter().sum::<f64>() / implied.len() as f64;
            any = true;
        }
    }
    any.then_some(proxy)
}

fn ascend_gamma(
    theta: &ModelParams,
    x: &SubjectAttributes,
    visits: &[Visit],
    start: &VariationalState,
    config: &TrainConfig,
    seed: u64,
) -> Result<VariationalState> {
    let packer = Packer {
        d: theta.w.len(),
        m: theta.a.len(),
        n_subjects: 0,
    };
    let mut x_packed = Vec::with_capacity(packer.gamma_len());
    packer.pack_gamma(start, &mut x_packed);
    let mut adam = AdamAscent::new(x_packed.len(), config.step_size);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut tracker = TraceTracker::new();
    let m = theta.a.len();

    for iter in 0..config.max_iters {
        let gamma = packer.unpack_gamma(&x_packed);
        let eval = subject_eval(theta, &gamma, x, visits, config.mc_samples, &mut rng);
        if !eval.elbo.is_finite() {
            return Err(Error::Personalization(format!(
                "ELBO became non-finite at iteration {iter}"
            )));
        }
        let mut grad = vec![0.0; x_packed.len()];
        let gg = &eval.grad_gamma;
        grad[0] = gg.mu_s;
        grad[1] = gg.sigma_s_proxy * gamma.sigma_s_proxy;
        grad[2..2 + m].copy_from_slice(&gg.mu_p);
        let mut pos = 2 + m;
        for r in 0..m {
            for c in 0..=r {
                let g = gg.chol_p.get(r, c);
                grad[pos] = if r == c { g * gamma.chol_p.diag(r) } else { g };
                pos += 1;
            }
        }
        adam.ascend(&mut x_packed, &grad);
        if tracker.push_and_check(eval.elbo, config.convergence_tol) {
            break;
        }
    }
    Ok(packer.unpack_gamma(&x_packed))
}

/// Optimize one subject's proxy parameters with model parameters held fixed.
/// An empty or fully missing history returns the prior-implied proxy
/// exactly. Ascent runs from the prior-implied start and from an
/// observation-implied start (short histories leave a reflected slope mode
/// the prior start can fall into); the candidate with the better final ELBO
/// under common random numbers wins.
pub(crate) fn personalize_gamma(
    theta: &ModelParams,
    x: &SubjectAttributes,
    visits: &[Visit],
    config: &TrainConfig,
) -> Result<VariationalState> {
    theta.validate()?;
    config.validate()?;
    let prior_start = VariationalState::prior_implied(x, theta);
    if visits.iter().all(|v| v.n_observed() == 0) {
        return Ok(prior_start);
    }

    let mut starts = vec![prior_start];
    if let Some(implied) = observation_implied_proxy(theta, x, visits) {
        starts.push(implied);
    }

    let score_seed = mix_seed(config.seed, 0x5c0e);
    let mut best: Option<(f64, VariationalState)> = None;
    for (si, start) in starts.iter().enumerate() {
        let gamma = ascend_gamma(theta, x, visits, start, config, mix_seed(config.seed, 7 + si as u64))?;
        let mut rng = ChaCha12Rng::seed_from_u64(score_seed);
        let score = subject_eval(theta, &gamma, x, visits, 64, &mut rng).elbo;
        if best.as_ref().map_or(true, |(b, _)| score > *b) {
            best = Some((score, gamma));
        }
    }
    Ok(best.expect("at least one personalization start").1)
}
