//! Test-time forecasting.
//!
//! Scenario 1 (no history): latent parameters are drawn from the
//! attribute-conditioned priors. Scenario 2 (historical visits available):
//! the subject's proxy distributions are first optimized against the history
//! with model parameters frozen, then used as customized priors. Either way,
//! trajectories are generated by ancestral sampling: draw `(s, p)`, evaluate
//! the latent sigmoid at each query age, then draw the observed score from
//! the observation model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cohort::Visit;
use crate::error::{Error, Result};
use crate::inference::{personalize_gamma, TrainConfig, VariationalState};
use crate::mix_seed;
use crate::model::{sigmoid_latent, ModelParams, SubjectAttributes};

/// Ancestral samples behind the point prediction used in evaluation.
pub const MAP_POINT_SAMPLES: usize = 1024;

/// A test subject's historical visits. May be empty, which reduces every
/// operation to the prior-based scenario.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub visits: Vec<Visit>,
}

impl History {
    pub fn empty() -> Self {
        Self { visits: Vec::new() }
    }

    pub fn from_visits(visits: &[Visit]) -> Self {
        Self {
            visits: visits.to_vec(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.visits.is_empty()
    }

    pub fn n_observed(&self) -> usize {
        self.visits.iter().map(Visit::n_observed).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ForecastMode {
    PriorBased,
    Personalized,
}

impl std::fmt::Display for ForecastMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ForecastMode::PriorBased => write!(f, "prior-based"),
            ForecastMode::Personalized => write!(f, "personalized"),
        }
    }
}

/// Posterior summary for one (target, time) cell.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SummaryStat {
    pub mean: f64,
    pub stddev: f64,
    pub q05: f64,
    pub q50: f64,
    pub q95: f64,
}

/// Posterior trajectory summaries plus the raw sampled trajectories.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorForecast {
    pub times: Vec<f64>,
    pub mode: ForecastMode,
    pub sample_count: usize,
    /// `stats[target][time_index]`.
    pub stats: Vec<Vec<SummaryStat>>,
    /// `samples[target][sample][time_index]`, observation noise included.
    pub samples: Vec<Vec<Vec<f64>>>,
    /// Per-time flag set by [`PosteriorForecast::mark_extrapolation`].
    pub extrapolated: Vec<bool>,
}

impl PosteriorForecast {
    /// Flag query times lying outside the training age range.
    pub fn mark_extrapolation(&mut self, train_age_range: (f64, f64)) {
        for (flag, &t) in self.extrapolated.iter_mut().zip(&self.times) {
            *flag = t < train_age_range.0 || t > train_age_range.1;
        }
    }
}

/// Empirical quantile with linear interpolation between order statistics.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    if sorted.len() == 1 {
        return sorted[0];
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Optimize the proxy distributions for a new subject against its history,
/// with model parameters frozen. An empty (or fully missing) history returns
/// the prior-implied proxy exactly.
pub fn personalize(
    x: &SubjectAttributes,
    history: &History,
    theta: &ModelParams,
    config: &TrainConfig,
) -> Result<VariationalState> {
    personalize_gamma(theta, x, &history.visits, config)
}

/// Ancestral-sampling forecast from an explicit proxy state.
pub fn forecast_from_proxy<R: Rng + ?Sized>(
    proxy: &VariationalState,
    mode: ForecastMode,
    theta: &ModelParams,
    times: &[f64],
    n_samples: usize,
    rng: &mut R,
) -> Result<PosteriorForecast> {
    theta.validate()?;
    proxy.validate()?;
    if n_samples == 0 {
        return Err(Error::InvalidConfig("n_samples must be >= 1".into()));
    }
    if times.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidConfig("query times must be finite".into()));
    }
    let m = theta.a.len();
    let mut samples = vec![vec![vec![0.0; times.len()]; n_samples]; m];
    for sample_idx in 0..n_samples {
        let draw = proxy.draw(rng);
        for k in 0..m {
            for (ti, &t) in times.iter().enumerate() {
                let latent = sigmoid_latent(t, draw.p_sample[k], draw.s_sample);
                let mean = theta.c[k] * latent + theta.h[k];
                let noise: f64 = rng.sample(StandardNormal);
                samples[k][sample_idx][ti] = mean + theta.sigma_y[k] * noise;
            }
        }
    }

    let mut stats = Vec::with_capacity(m);
    for target_samples in &samples {
        let mut per_time = Vec::with_capacity(times.len());
        for ti in 0..times.len() {
            let mut values: Vec<f64> = target_samples.iter().map(|s| s[ti]).collect();
            values.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = if values.len() > 1 {
                values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            per_time.push(SummaryStat {
                mean,
                stddev: var.sqrt(),
                q05: quantile(&values, 0.05),
                q50: quantile(&values, 0.50),
                q95: quantile(&values, 0.95),
            });
        }
        stats.push(per_time);
    }

    Ok(PosteriorForecast {
        times: times.to_vec(),
        mode,
        sample_count: n_samples,
        stats,
        samples,
        extrapolated: vec![false; times.len()],
    })
}

/// Forecast future scores at the query ages. With an empty history the
/// latent parameters are sampled from the priors; otherwise the proxies are
/// personalized first. Deterministic given the RNG state.
pub fn forecast<R: Rng + ?Sized>(
    x: &SubjectAttributes,
    history: &History,
    theta: &ModelParams,
    times: &[f64],
    n_samples: usize,
    rng: &mut R,
) -> Result<PosteriorForecast> {
    let (proxy, mode) = personalized_proxy(x, history, theta)?;
    forecast_from_proxy(&proxy, mode, theta, times, n_samples, rng)
}

fn personalized_proxy(
    x: &SubjectAttributes,
    history: &History,
    theta: &ModelParams,
) -> Result<(VariationalState, ForecastMode)> {
    if history.n_observed() == 0 {
        Ok((
            VariationalState::prior_implied(x, theta),
            ForecastMode::PriorBased,
        ))
    } else {
        let config = TrainConfig::personalization_default();
        Ok((
            personalize(x, history, theta, &config)?,
            ForecastMode::Personalized,
        ))
    }
}

/// Sampled noiseless trajectory means (the component means of the posterior
/// predictive mixture), drawn with the deterministic point-forecast stream.
/// Returns `means[target][sample][time_index]`.
pub fn ancestral_mean_samples(
    x: &SubjectAttributes,
    history: &History,
    theta: &ModelParams,
    times: &[f64],
    config: &TrainConfig,
) -> Result<Vec<Vec<Vec<f64>>>> {
    theta.validate()?;
    let m = theta.a.len();
    if times.is_empty() {
        return Ok(vec![Vec::new(); m]);
    }
    let proxy = if history.n_observed() == 0 {
        VariationalState::prior_implied(x, theta)
    } else {
        personalize(x, history, theta, config)?
    };
    let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(config.seed, 0x4d41_5054));
    let mut means = vec![vec![vec![0.0; times.len()]; MAP_POINT_SAMPLES]; m];
    for sample_idx in 0..MAP_POINT_SAMPLES {
        let draw = proxy.draw(&mut rng);
        for k in 0..m {
            for (ti, &t) in times.iter().enumerate() {
                let latent = sigmoid_latent(t, draw.p_sample[k], draw.s_sample);
                means[k][sample_idx][ti] = theta.c[k] * latent + theta.h[k];
            }
        }
    }
    Ok(means)
}

/// Point prediction maximizing the Monte Carlo posterior: the mean of the
/// Gaussian mixture over sampled trajectory means (the observation layer is
/// Gaussian, so the mixture mean needs no noise draws). Returns
/// `values[target][time_index]`. This is the point prediction used by the
/// evaluation harness.
pub fn map_point_forecast(
    x: &SubjectAttributes,
    history: &History,
    theta: &ModelParams,
    times: &[f64],
    config: &TrainConfig,
) -> Result<Vec<Vec<f64>>> {
    let mixture = ancestral_mean_samples(x, history, theta, times, config)?;
    Ok(mixture
        .into_iter()
        .map(|target_samples| {
            let mut acc = vec![0.0; times.len()];
            for sample in &target_samples {
                for (a, v) in acc.iter_mut().zip(sample) {
                    *a += v;
                }
            }
            for a in acc.iter_mut() {
                *a /= MAP_POINT_SAMPLES as f64;
            }
            acc
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn toy_theta() -> ModelParams {
        ModelParams {
            w: vec![0.3],
            b: 0.4,
            v: vec![0.5],
            a: vec![72.0, 76.0],
            sigma_s: 0.15,
            sigma_p: 2.0,
            c: vec![-30.0, 70.0],
            h: vec![30.0, 0.0],
            sigma_y: vec![1.2, 2.5],
        }
    }

    #[test]
    fn empty_history_proxy_equals_prior() {
        let theta = toy_theta();
        let x = SubjectAttributes::new(vec![1.0]);
        let config = TrainConfig::personalization_default();
        let proxy = personalize(&x, &History::empty(), &theta, &config).unwrap();
        assert_eq!(proxy.mu_s, theta.slope_prior_mean(&x));
        assert_eq!(proxy.sigma_s_proxy, theta.sigma_s);
        for k in 0..2 {
            assert_eq!(proxy.mu_p[k], theta.inflection_prior_mean(&x, k));
        }
    }

    #[test]
    fn empty_history_forecast_matches_prior_scenario_exactly() {
        let theta = toy_theta();
        let x = SubjectAttributes::new(vec![0.5]);
        let times = [70.0, 75.0, 80.0];
        let scenario1 = {
            let mut rng = ChaCha12Rng::seed_from_u64(40);
            forecast(&x, &History::empty(), &theta, &times, 200, &mut rng).unwrap()
        };
        let scenario2 = {
            // explicit all-missing history still counts as no observations
            let history = History::from_visits(&[Visit {
                age: 70.0,
                values: vec![None, None],
            }]);
            let mut rng = ChaCha12Rng::seed_from_u64(40);
            forecast(&x, &history, &theta, &times, 200, &mut rng).unwrap()
        };
        assert_eq!(scenario1.mode, ForecastMode::PriorBased);
        assert_eq!(scenario2.mode, ForecastMode::PriorBased);
        assert_eq!(scenario1.samples, scenario2.samples);
    }

    #[test]
    fn degenerate_noise_forecast_collapses_to_plugin_mean() {
        let mut theta = toy_theta();
        theta.sigma_s = 1e-9;
        theta.sigma_p = 1e-9;
        theta.sigma_y = vec![1e-9, 1e-9];
        let x = SubjectAttributes::new(vec![1.0]);
        let times = [70.0, 78.0];
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let fc = forecast(&x, &History::empty(), &theta, &times, 64, &mut rng).unwrap();
        let s = theta.slope_prior_mean(&x);
        for k in 0..2 {
            let p = theta.inflection_prior_mean(&x, k);
            for (ti, &t) in times.iter().enumerate() {
                let expect = theta.c[k] * sigmoid_latent(t, p, s) + theta.h[k];
                assert_relative_eq!(fc.stats[k][ti].mean, expect, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn sample_mean_matches_analytic_mean_of_observation_layer() {
        // E[y | s, p] = c * latent + h; with sigma_s, sigma_p tiny the latent
        // is deterministic and the sample mean over the Gaussian noise layer
        // must match within Monte Carlo error.
        let mut theta = toy_theta();
        theta.sigma_s = 1e-12;
        theta.sigma_p = 1e-12;
        let x = SubjectAttributes::new(vec![1.0]);
        let times = [74.0];
        let n = 100_000;
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let fc = forecast(&x, &History::empty(), &theta, &times, n, &mut rng).unwrap();
        for k in 0..2 {
            let latent = sigmoid_latent(
                times[0],
                theta.inflection_prior_mean(&x, k),
                theta.slope_prior_mean(&x),
            );
            let analytic = theta.c[k] * latent + theta.h[k];
            let se = theta.sigma_y[k] / (n as f64).sqrt();
            assert!(
                (fc.stats[k][0].mean - analytic).abs() < 4.0 * se,
                "target {k}: {} vs {analytic}",
                fc.stats[k][0].mean
            );
        }
    }

    #[test]
    fn forecast_is_deterministic_given_seed() {
        let theta = toy_theta();
        let x = SubjectAttributes::new(vec![0.0]);
        let times = [70.0, 71.0];
        let a = forecast(&x, &History::empty(), &theta, &times, 50, &mut ChaCha12Rng::seed_from_u64(8)).unwrap();
        let b = forecast(&x, &History::empty(), &theta, &times, 50, &mut ChaCha12Rng::seed_from_u64(8)).unwrap();
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn sampled_trajectories_monotone_for_positive_slope() {
        let theta = toy_theta();
        let x = SubjectAttributes::new(vec![1.0]);
        let times: Vec<f64> = (0..20).map(|i| 60.0 + i as f64).collect();
        let proxy = VariationalState::prior_implied(&x, &theta);
        let mut rng = ChaCha12Rng::seed_from_u64(14);
        // inspect latent means through per-sample noiseless reconstruction:
        // monotonicity holds for the affine-transformed sigmoid when s > 0
        for _ in 0..100 {
            let draw = proxy.draw(&mut rng);
            if draw.s_sample <= 0.0 {
                continue;
            }
            for k in 0..2 {
                let series: Vec<f64> = times
                    .iter()
                    .map(|&t| theta.c[k] * sigmoid_latent(t, draw.p_sample[k], draw.s_sample) + theta.h[k])
                    .collect();
                let increasing = theta.c[k] > 0.0;
                for pair in series.windows(2) {
                    if increasing {
                        assert!(pair[1] >= pair[0] - 1e-12);
                    } else {
                        assert!(pair[1] <= pair[0] + 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn predictive_stddev_at_least_noise_floor() {
        let theta = toy_theta();
        let x = SubjectAttributes::new(vec![0.5]);
        let times = [68.0, 74.0, 82.0];
        let n = 20_000;
        let mut rng = ChaCha12Rng::seed_from_u64(15);
        let fc = forecast(&x, &History::empty(), &theta, &times, n, &mut rng).unwrap();
        for k in 0..2 {
            // MC slack: sd of a sample sd is roughly sigma / sqrt(2 n)
            let slack = 3.0 * theta.sigma_y[k] / (2.0 * n as f64).sqrt();
            for ti in 0..times.len() {
                assert!(
                    fc.stats[k][ti].stddev >= theta.sigma_y[k] - slack,
                    "stddev {} below noise floor {}",
                    fc.stats[k][ti].stddev,
                    theta.sigma_y[k]
                );
            }
        }
    }

    #[test]
    fn quantiles_are_monotone_in_level() {
        let theta = toy_theta();
        let x = SubjectAttributes::new(vec![1.5]);
        let mut rng = ChaCha12Rng::seed_from_u64(16);
        let fc = forecast(&x, &History::empty(), &theta, &[70.0, 80.0], 500, &mut rng).unwrap();
        for target in &fc.stats {
            for stat in target {
                assert!(stat.q05 <= stat.q50 && stat.q50 <= stat.q95);
            }
        }
    }

    #[test]
    fn map_point_forecast_empty_times_is_empty() {
        let theta = toy_theta();
        let x = SubjectAttributes::new(vec![1.0]);
        let out = map_point_forecast(&x, &History::empty(), &theta, &[], &TrainConfig::personalization_default()).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|v| v.is_empty()));
    }

    #[test]
    fn map_point_matches_forecast_mean_in_degenerate_case() {
        let mut theta = toy_theta();
        theta.sigma_s = 1e-9;
        theta.sigma_p = 1e-9;
        theta.sigma_y = vec![1e-9, 1e-9];
        let x = SubjectAttributes::new(vec![0.7]);
        let times = [71.0, 77.0];
        let config = TrainConfig::personalization_default();
        let points = map_point_forecast(&x, &History::empty(), &theta, &times, &config).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let fc = forecast(&x, &History::empty(), &theta, &times, 256, &mut rng).unwrap();
        for k in 0..2 {
            for ti in 0..times.len() {
                assert_relative_eq!(points[k][ti], fc.stats[k][ti].mean, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn extrapolation_flags_respect_training_range() {
        let theta = toy_theta();
        let x = SubjectAttributes::new(vec![0.0]);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut fc = forecast(&x, &History::empty(), &theta, &[60.0, 70.0, 95.0], 10, &mut rng).unwrap();
        fc.mark_extrapolation((65.0, 90.0));
        assert_eq!(fc.extrapolated, vec![true, false, true]);
    }
}
