//! Model interrogation: empirical inflection-age densities, mean latent
//! progression curves, risk-factor effect tables, and personalized
//! trajectory exports.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::Cohort;
use crate::error::{Error, Result};
use crate::inference::VariationalState;
use crate::mix_seed;
use crate::model::{max_rate, sigmoid_latent, ModelParams};
use crate::prediction::{forecast, History};

/// Variance (years squared) of the Gaussian kernel used for inflection-age
/// density estimates.
pub const KDE_VARIANCE: f64 = 2.5;

/// Pool inflection samples per target by drawing from each subject's proxy
/// distribution. Returns `samples[target][draw]`.
pub fn sample_inflections<R: Rng + ?Sized>(
    gammas: &[VariationalState],
    draws_per_subject: usize,
    rng: &mut R,
) -> Vec<Vec<f64>> {
    let m = gammas.first().map(|g| g.n_targets()).unwrap_or(0);
    let mut samples = vec![Vec::with_capacity(gammas.len() * draws_per_subject); m];
    for gamma in gammas {
        for _ in 0..draws_per_subject {
            let draw = gamma.draw(rng);
            for k in 0..m {
                samples[k].push(draw.p_sample[k]);
            }
        }
    }
    samples
}

/// Gaussian kernel density estimate with fixed variance [`KDE_VARIANCE`],
/// evaluated on `grid` for each target's pooled samples.
pub fn inflection_density(samples_per_target: &[Vec<f64>], grid: &[f64]) -> Result<Vec<Vec<f64>>> {
    if samples_per_target.iter().any(|s| s.is_empty()) {
        return Err(Error::EmptySamples(
            "every target needs at least one inflection sample".into(),
        ));
    }
    let norm = 1.0 / (2.0 * std::f64::consts::PI * KDE_VARIANCE).sqrt();
    let densities = samples_per_target
        .iter()
        .map(|samples| {
            let inv_n = 1.0 / samples.len() as f64;
            grid.iter()
                .map(|&x| {
                    samples
                        .iter()
                        .map(|&s| {
                            let z = x - s;
                            norm * (-z * z / (2.0 * KDE_VARIANCE)).exp()
                        })
                        .sum::<f64>()
                        * inv_n
                })
                .collect()
        })
        .collect();
    Ok(densities)
}

/// Latent progression curves at the empirical mean slope and mean inflection
/// ages. Returns `curves[target][grid_index]`; each curve crosses one half at
/// its mean inflection exactly.
pub fn mean_latent_curves(mean_slope: f64, mean_inflections: &[f64], grid: &[f64]) -> Vec<Vec<f64>> {
    mean_inflections
        .iter()
        .map(|&p| grid.iter().map(|&t| sigmoid_latent(t, p, mean_slope)).collect())
        .collect()
}

/// One attribute's effect on progression dynamics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RiskFactorRow {
    pub attribute: String,
    /// Change of the maximum latent progression rate (per year) per unit of
    /// the attribute: `w_j / 4`.
    pub delta_max_rate: f64,
    /// Shift of the inflection ages (years) per unit of the attribute: `v_j`.
    pub delta_inflection_years: f64,
}

/// Linear readout of the trained parameters: per attribute, the change of
/// the maximum progression rate (`w_j / 4`) and the inflection shift in
/// years (`v_j`), averaged over folds when several parameter sets are given.
pub fn risk_factor_report(thetas: &[&ModelParams], attribute_names: &[String]) -> Result<Vec<RiskFactorRow>> {
    let Some(first) = thetas.first() else {
        return Err(Error::EmptySamples("no parameter sets given".into()));
    };
    let d = first.w.len();
    if attribute_names.len() != d {
        return Err(Error::DimensionMismatch {
            what: "attribute names".into(),
            expected: d,
            got: attribute_names.len(),
        });
    }
    for theta in thetas {
        if theta.w.len() != d {
            return Err(Error::DimensionMismatch {
                what: "parameter sets".into(),
                expected: d,
                got: theta.w.len(),
            });
        }
    }
    let n = thetas.len() as f64;
    Ok((0..d)
        .map(|j| {
            let mean_w = thetas.iter().map(|t| t.w[j]).sum::<f64>() / n;
            let mean_v = thetas.iter().map(|t| t.v[j]).sum::<f64>() / n;
            RiskFactorRow {
                attribute: attribute_names[j].clone(),
                delta_max_rate: max_rate(mean_w),
                delta_inflection_years: mean_v,
            }
        })
        .collect())
}

/// One exported trajectory point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub subject_id: String,
    /// "baseline" (no past visits) or "personalized" (first four visits).
    pub condition: String,
    pub target: String,
    pub time: f64,
    pub mean: f64,
    pub stddev: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrajectoryExport {
    pub points: Vec<TrajectoryPoint>,
    /// Subjects x conditions that had to be dropped, with the reason.
    pub notes: Vec<String>,
}

/// Number of past visits defining the personalized condition.
pub const PERSONALIZED_VISITS: usize = 4;

/// Export posterior mean and one-standard-deviation bands over `grid` for
/// each subject under two conditions: no past visits (baseline) and the
/// first four visits (personalized). Subjects lacking four visits keep only
/// the baseline condition, with a note. Deterministic given `seed`.
pub fn export_personalized_trajectories(
    cohort: &Cohort,
    subject_indices: &[usize],
    theta: &ModelParams,
    grid: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<TrajectoryExport> {
    theta.validate()?;
    let mut export = TrajectoryExport::default();
    for (order, &idx) in subject_indices.iter().enumerate() {
        let subject = cohort
            .subjects
            .get(idx)
            .ok_or_else(|| Error::InvalidCohort(format!("no subject at index {idx}")))?;
        let conditions: Vec<(String, History)> = {
            let mut list = vec![("baseline".to_string(), History::empty())];
            if subject.visits.len() >= PERSONALIZED_VISITS {
                list.push((
                    "personalized".to_string(),
                    History::from_visits(&subject.visits[..PERSONALIZED_VISITS]),
                ));
            } else {
                export.notes.push(format!(
                    "subject {}: personalized condition dropped ({} < {PERSONALIZED_VISITS} visits)",
                    subject.id,
                    subject.visits.len()
                ));
            }
            list
        };
        for (ci, (condition, history)) in conditions.iter().enumerate() {
            let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(
                seed,
                (order as u64) << 4 | ci as u64,
            ));
            let fc = forecast(&subject.attributes, history, theta, grid, n_samples, &mut rng)?;
            for (k, target) in cohort.meta.targets.iter().enumerate() {
                for (ti, &t) in grid.iter().enumerate() {
                    export.points.push(TrajectoryPoint {
                        subject_id: subject.id.clone(),
                        condition: condition.clone(),
                        target: target.name.clone(),
                        time: t,
                        mean: fc.stats[k][ti].mean,
                        stddev: fc.stats[k][ti].stddev,
                    });
                }
            }
        }
    }
    Ok(export)
}
