//! Comparison estimators: population sigmoid fits (optionally stratified by
//! sex and/or APOE group), a per-target linear mixed-effects model, and
//! subject-level linear extrapolation. All benchmark predictors are
//! deterministic.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cohort::Cohort;
use crate::error::{Error, Result};
use crate::model::SubjectAttributes;
use crate::optim::{levenberg_marquardt, nelder_mead};
use crate::prediction::History;

/// Four-parameter sigmoid `scale * sigmoid((t - inflection) * slope) + bias`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmoidFit4 {
    pub scale: f64,
    pub bias: f64,
    pub inflection: f64,
    pub slope: f64,
}

impl SigmoidFit4 {
    pub fn eval(&self, t: f64) -> f64 {
        let z = (t - self.inflection) * self.slope;
        let sig = if z >= 0.0 {
            1.0 / (1.0 + (-z).exp())
        } else {
            let e = z.exp();
            e / (1.0 + e)
        };
        self.scale * sig + self.bias
    }
}

/// Stratification scheme for the population sigmoid benchmarks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strata {
    None,
    Sex,
    Apoe,
    SexApoe,
}

impl std::fmt::Display for Strata {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Strata::None => write!(f, "global"),
            Strata::Sex => write!(f, "sex"),
            Strata::Apoe => write!(f, "apoe"),
            Strata::SexApoe => write!(f, "sex-apoe"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StratumKey {
    pub sex: Option<i8>,
    pub apoe: Option<i8>,
}

/// JSON objects need string keys, so stratum maps serialize as entry lists.
mod stratum_map {
    use super::StratumKey;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::BTreeMap;

    pub fn serialize<S, V>(map: &BTreeMap<StratumKey, V>, serializer: S) -> Result<S::Ok, S::Error>
    where
        S: Serializer,
        V: Serialize,
    {
        let entries: Vec<(&StratumKey, &V)> = map.iter().collect();
        entries.serialize(serializer)
    }

    pub fn deserialize<'de, D, V>(deserializer: D) -> Result<BTreeMap<StratumKey, V>, D::Error>
    where
        D: Deserializer<'de>,
        V: Deserialize<'de>,
    {
        let entries: Vec<(StratumKey, V)> = Vec::deserialize(deserializer)?;
        Ok(entries.into_iter().collect())
    }
}

/// Population sigmoid fits per stratum, per target.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StratifiedSigmoid {
    pub strata: Strata,
    sex_attr: Option<usize>,
    apoe_attr: Option<usize>,
    /// Unstratified parent fit, also the fallback for empty strata.
    pub global: Vec<SigmoidFit4>,
    #[serde(with = "stratum_map")]
    pub fits: BTreeMap<StratumKey, Vec<SigmoidFit4>>,
    pub warnings: Vec<String>,
}

impl StratifiedSigmoid {
    fn key_for(&self, x: &SubjectAttributes) -> StratumKey {
        StratumKey {
            sex: self
                .sex_attr
                .map(|idx| x.values[idx].round().clamp(0.0, 1.0) as i8),
            apoe: self
                .apoe_attr
                .map(|idx| x.values[idx].round().clamp(0.0, 2.0) as i8),
        }
    }

    /// Per-target fits applicable to a subject.
    pub fn fits_for(&self, x: &SubjectAttributes) -> &[SigmoidFit4] {
        self.fits
            .get(&self.key_for(x))
            .map(Vec::as_slice)
            .unwrap_or(&self.global)
    }

    /// `values[target][time_index]`.
    pub fn predict(&self, x: &SubjectAttributes, times: &[f64]) -> Vec<Vec<f64>> {
        self.fits_for(x)
            .iter()
            .map(|fit| times.iter().map(|&t| fit.eval(t)).collect())
            .collect()
    }
}

fn quantile_of_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len().saturating_sub(1)) as f64;
    sorted[pos.round() as usize]
}

/// Nonlinear least squares for the 4-parameter sigmoid, multi-start over
/// inflection quantiles of the observed times.
fn fit_sigmoid4(ts: &[f64], ys: &[f64]) -> SigmoidFit4 {
    debug_assert_eq!(ts.len(), ys.len());
    let n = ts.len();
    let mean_y = ys.iter().sum::<f64>() / n as f64;
    let (ymin, ymax) = ys
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &y| {
            (lo.min(y), hi.max(y))
        });
    let mut sorted_t = ts.to_vec();
    sorted_t.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let t_mid = quantile_of_sorted(&sorted_t, 0.5);

    if ymax - ymin < 1e-12 {
        // constant data: zero scale, flat prediction at the mean
        return SigmoidFit4 {
            scale: 0.0,
            bias: mean_y,
            inflection: t_mid,
            slope: 0.0,
        };
    }

    // OLS slope of y on t seeds the sigmoid slope sign and magnitude
    let mean_t = ts.iter().sum::<f64>() / n as f64;
    let cov: f64 = ts.iter().zip(ys).map(|(t, y)| (t - mean_t) * (y - mean_y)).sum();
    let var_t: f64 = ts.iter().map(|t| (t - mean_t) * (t - mean_t)).sum();
    let ols_slope = if var_t > 1e-12 { cov / var_t } else { 0.0 };
    let scale0 = ymax - ymin;
    let slope0 = (4.0 * ols_slope / scale0).clamp(-10.0, 10.0);
    let slope0 = if slope0.abs() < 1e-3 {
        1e-3_f64.copysign(if slope0 == 0.0 { 1.0 } else { slope0 })
    } else {
        slope0
    };

    let model = |params: &[f64]| {
        let fit = SigmoidFit4 {
            scale: params[0],
            bias: params[1],
            inflection: params[2],
            slope: params[3],
        };
        let resid = DVector::from_iterator(n, ts.iter().zip(ys).map(|(&t, &y)| fit.eval(t) - y));
        let jac = DMatrix::from_fn(n, 4, |i, j| {
            let z = (ts[i] - fit.inflection) * fit.slope;
            let sig = if z >= 0.0 {
                1.0 / (1.0 + (-z).exp())
            } else {
                let e = z.exp();
                e / (1.0 + e)
            };
            let dsig = sig * (1.0 - sig);
            match j {
                0 => sig,
                1 => 1.0,
                2 => -fit.scale * dsig * fit.slope,
                _ => fit.scale * dsig * (ts[i] - fit.inflection),
            }
        });
        (resid, jac)
    };

    let mut best: Option<(SigmoidFit4, f64)> = None;
    for &q in &[0.1, 0.3, 0.5, 0.7, 0.9] {
        let p0 = quantile_of_sorted(&sorted_t, q);
        let start = [scale0, ymin, p0, slope0];
        let (params, sse) = levenberg_marquardt(&model, &start, 200);
        if params.iter().all(|v| v.is_finite()) {
            let candidate = SigmoidFit4 {
                scale: params[0],
                bias: params[1],
                inflection: params[2],
                slope: params[3],
            };
            if best.as_ref().map_or(true, |(_, b)| sse < *b) {
                best = Some((candidate, sse));
            }
        }
    }
    best.map(|(fit, _)| fit).unwrap_or(SigmoidFit4 {
        scale: 0.0,
        bias: mean_y,
        inflection: t_mid,
        slope: 0.0,
    })
}

fn expected_keys(strata: Strata) -> Vec<StratumKey> {
    match strata {
        Strata::None => vec![StratumKey {
            sex: None,
            apoe: None,
        }],
        Strata::Sex => (0..2)
            .map(|s| StratumKey {
                sex: Some(s),
                apoe: None,
            })
            .collect(),
        Strata::Apoe => (0..3)
            .map(|a| StratumKey {
                sex: None,
                apoe: Some(a),
            })
            .collect(),
        Strata::SexApoe => {
            let mut keys = Vec::new();
            for s in 0..2 {
                for a in 0..3 {
                    keys.push(StratumKey {
                        sex: Some(s),
                        apoe: Some(a),
                    });
                }
            }
            keys
        }
    }
}

/// Fit the 4-parameter sigmoid per target on pooled training data, separately
/// within each requested stratum. Empty strata fall back to the unstratified
/// parent fit with a warning.
pub fn fit_global_sigmoid(cohort: &Cohort, strata: Strata) -> Result<StratifiedSigmoid> {
    cohort.validate()?;
    let m = cohort.n_targets();
    let sex_attr = match strata {
        Strata::Sex | Strata::SexApoe => Some(
            cohort
                .meta
                .attribute_index("sex")
                .ok_or_else(|| Error::InvalidCohort("no attribute named 'sex'".into()))?,
        ),
        _ => None,
    };
    let apoe_attr = match strata {
        Strata::Apoe | Strata::SexApoe => Some(
            cohort
                .meta
                .attribute_index("apoe")
                .ok_or_else(|| Error::InvalidCohort("no attribute named 'apoe'".into()))?,
        ),
        _ => None,
    };

    // pooled (t, y) pairs per stratum per target
    let mut pooled: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); m];
    let mut per_stratum: BTreeMap<StratumKey, Vec<(Vec<f64>, Vec<f64>)>> = BTreeMap::new();
    for key in expected_keys(strata) {
        per_stratum.insert(key, vec![(Vec::new(), Vec::new()); m]);
    }

    for subject in &cohort.subjects {
        let key = StratumKey {
            sex: sex_attr.map(|idx| subject.attributes.values[idx].round().clamp(0.0, 1.0) as i8),
            apoe: apoe_attr.map(|idx| subject.attributes.values[idx].round().clamp(0.0, 2.0) as i8),
        };
        for visit in &subject.visits {
            for (k, value) in visit.values.iter().enumerate() {
                if let Some(y) = value {
                    pooled[k].0.push(visit.age);
                    pooled[k].1.push(*y);
                    if let Some(stratum) = per_stratum.get_mut(&key) {
                        stratum[k].0.push(visit.age);
                        stratum[k].1.push(*y);
                    }
                }
            }
        }
    }

    if pooled.iter().all(|(ts, _)| ts.is_empty()) {
        return Err(Error::InsufficientData(
            "no observed target values to fit".into(),
        ));
    }

    let global: Vec<SigmoidFit4> = pooled
        .iter()
        .map(|(ts, ys)| {
            if ts.is_empty() {
                SigmoidFit4 {
                    scale: 0.0,
                    bias: 0.0,
                    inflection: 0.0,
                    slope: 0.0,
                }
            } else {
                fit_sigmoid4(ts, ys)
            }
        })
        .collect();

    let mut warnings = Vec::new();
    let mut fits = BTreeMap::new();
    for (key, data) in per_stratum {
        let empty = data.iter().all(|(ts, _)| ts.is_empty());
        if empty {
            warnings.push(format!(
                "stratum (sex={:?}, apoe={:?}) is empty; using the unstratified fit",
                key.sex, key.apoe
            ));
            fits.insert(key, global.clone());
        } else {
            let per_target = data
                .iter()
                .enumerate()
                .map(|(k, (ts, ys))| {
                    if ts.is_empty() {
                        warnings.push(format!(
                            "stratum (sex={:?}, apoe={:?}) has no data for target {k}; using the unstratified fit",
                            key.sex, key.apoe
                        ));
                        global[k]
                    } else {
                        fit_sigmoid4(ts, ys)
                    }
                })
                .collect();
            fits.insert(key, per_target);
        }
    }

    Ok(StratifiedSigmoid {
        strata,
        sex_attr,
        apoe_attr,
        global,
        fits,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// Linear mixed-effects model
// ---------------------------------------------------------------------------

/// Per-target linear mixed-effects fit: fixed effects for the attributes, a
/// global time slope and intercept, and per-subject random intercept/slope
/// deviations. Estimated by maximum likelihood.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LmeFit {
    /// `[attributes..., time_slope, intercept]`, length d + 2.
    pub fixed_effects: Vec<f64>,
    /// Covariance of the per-subject (intercept, slope) deviations.
    pub random_cov: [[f64; 2]; 2],
    pub noise_var: f64,
    pub log_likelihood: f64,
    pub warnings: Vec<String>,
}

struct LmeData<'a> {
    /// Per subject: (attributes, (time, value) pairs).
    subjects: Vec<(&'a [f64], Vec<(f64, f64)>)>,
    d: usize,
}

impl LmeData<'_> {
    fn design_row(&self, x: &[f64], t: f64) -> Vec<f64> {
        let mut row = Vec::with_capacity(self.d + 2);
        row.extend_from_slice(x);
        row.push(t);
        row.push(1.0);
        row
    }

    fn n_obs(&self) -> usize {
        self.subjects.iter().map(|(_, v)| v.len()).sum()
    }
}

/// Profile marginal log-likelihood: for fixed variance components the fixed
/// effects are solved by generalized least squares. Returns (loglik, beta)
/// and notes whether a ridge was needed.
fn lme_profile_loglik(
    data: &LmeData,
    g: &[[f64; 2]; 2],
    noise_var: f64,
    ridge_used: &mut bool,
) -> (f64, DVector<f64>) {
    let p = data.d + 2;
    let mut xtvx = DMatrix::<f64>::zeros(p, p);
    let mut xtvy = DVector::<f64>::zeros(p);
    let g_mat = DMatrix::from_row_slice(2, 2, &[g[0][0], g[0][1], g[1][0], g[1][1]]);

    type SubjectCache = (
        DMatrix<f64>,
        DVector<f64>,
        nalgebra::Cholesky<f64, nalgebra::Dyn>,
        f64,
    );
    let mut cached: Vec<SubjectCache> = Vec::with_capacity(data.subjects.len());
    for (x, points) in &data.subjects {
        let n_i = points.len();
        let x_mat = DMatrix::from_fn(n_i, p, |i, j| data.design_row(x, points[i].0)[j]);
        let y_vec = DVector::from_iterator(n_i, points.iter().map(|&(_, y)| y));
        let z_mat = DMatrix::from_fn(n_i, 2, |i, j| if j == 0 { 1.0 } else { points[i].0 });
        let mut v = &z_mat * &g_mat * z_mat.transpose();
        for i in 0..n_i {
            v[(i, i)] += noise_var;
        }
        let chol = match v.clone().cholesky() {
            Some(c) => c,
            None => {
                for i in 0..n_i {
                    v[(i, i)] += 1e-10;
                }
                match v.cholesky() {
                    Some(c) => c,
                    None => return (f64::NEG_INFINITY, DVector::zeros(p)),
                }
            }
        };
        let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        xtvx += x_mat.transpose() * chol.solve(&x_mat);
        xtvy += x_mat.transpose() * chol.solve(&y_vec);
        cached.push((x_mat, y_vec, chol, log_det));
    }

    let beta = match xtvx.clone().cholesky() {
        Some(c) => c.solve(&xtvy),
        None => {
            *ridge_used = true;
            let mut ridged = xtvx;
            for i in 0..p {
                ridged[(i, i)] += 1e-8;
            }
            match ridged.cholesky() {
                Some(c) => c.solve(&xtvy),
                None => return (f64::NEG_INFINITY, DVector::zeros(p)),
            }
        }
    };

    let mut loglik = 0.0;
    for (x_mat, y_vec, chol, log_det) in &cached {
        let resid = y_vec - x_mat * &beta;
        let quad = resid.dot(&chol.solve(&resid));
        loglik += -0.5 * (y_vec.len() as f64 * crate::model::LN_2PI + log_det + quad);
    }
    (loglik, beta)
}

/// Ordinary least squares on the pooled design; returns (beta, rss).
fn pooled_ols(data: &LmeData) -> (DVector<f64>, f64) {
    let p = data.d + 2;
    let n = data.n_obs();
    let mut rows = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for (x, points) in &data.subjects {
        for &(t, y) in points {
            rows.push(data.design_row(x, t));
            ys.push(y);
        }
    }
    let x_mat = DMatrix::from_fn(n, p, |i, j| rows[i][j]);
    let y_vec = DVector::from_column_slice(&ys);
    let xtx = x_mat.transpose() * &x_mat;
    let xty = x_mat.transpose() * &y_vec;
    let beta = xtx
        .clone()
        .cholesky()
        .map(|c| c.solve(&xty))
        .unwrap_or_else(|| {
            let mut ridged = xtx;
            for i in 0..p {
                ridged[(i, i)] += 1e-8;
            }
            ridged
                .cholesky()
                .map(|c| c.solve(&xty))
                .unwrap_or_else(|| DVector::zeros(p))
        });
    let resid = &y_vec - &x_mat * &beta;
    (beta, resid.norm_squared())
}

/// Maximum-likelihood fit of the per-target linear mixed-effects model.
pub fn fit_lme(cohort: &Cohort) -> Result<Vec<LmeFit>> {
    cohort.validate()?;
    let m = cohort.n_targets();
    let d = cohort.n_attributes();
    let mut fits = Vec::with_capacity(m);

    for k in 0..m {
        let mut subjects: Vec<(&[f64], Vec<(f64, f64)>)> = Vec::new();
        for subject in &cohort.subjects {
            let points: Vec<(f64, f64)> = subject
                .visits
                .iter()
                .filter_map(|visit| visit.values[k].map(|y| (visit.age, y)))
                .collect();
            if !points.is_empty() {
                subjects.push((&subject.attributes.values, points));
            }
        }
        if subjects.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "target {k}: linear mixed-effects fit needs at least 2 subjects with data"
            )));
        }
        let data = LmeData { subjects, d };
        let mut warnings = Vec::new();
        if data.subjects.iter().all(|(_, pts)| pts.len() <= 1) {
            warnings.push(
                "every subject has a single visit; random intercept and slope variances are unidentifiable"
                    .to_string(),
            );
        }

        let (ols_beta, rss) = pooled_ols(&data);
        let n = data.n_obs() as f64;
        let resid_var = (rss / n.max(1.0)).max(1e-8);
        let times: Vec<f64> = data
            .subjects
            .iter()
            .flat_map(|(_, pts)| pts.iter().map(|&(t, _)| t))
            .collect();
        let mean_t = times.iter().sum::<f64>() / times.len() as f64;
        let var_t = (times.iter().map(|t| (t - mean_t) * (t - mean_t)).sum::<f64>()
            / times.len() as f64)
            .max(1e-3);

        // phi = [ln l11, l21, ln l22, ln sigma], G = L L'
        let phi0 = [
            (resid_var / 4.0).sqrt().ln(),
            0.0,
            (resid_var / (4.0 * var_t)).sqrt().ln(),
            (resid_var / 2.0).sqrt().ln(),
        ];
        let unpack_phi = |phi: &[f64]| {
            let l11 = phi[0].exp();
            let l21 = phi[1];
            let l22 = phi[2].exp();
            let g = [
                [l11 * l11, l11 * l21],
                [l11 * l21, l21 * l21 + l22 * l22],
            ];
            (g, (2.0 * phi[3]).exp())
        };
        let mut ridge_used = false;
        let mut objective = |phi: &[f64]| {
            let (g, noise) = unpack_phi(phi);
            let mut ridge = false;
            let (ll, _) = lme_profile_loglik(&data, &g, noise, &mut ridge);
            if !ll.is_finite() {
                1e12
            } else {
                -ll
            }
        };
        let start_ll = -objective(&phi0);
        let (phi_star, neg_ll) = nelder_mead(&mut objective, &phi0, &[0.5, 0.2, 0.5, 0.3], 500, 1e-10);
        let mut best_ll = -neg_ll;
        let (mut g_star, mut noise_star) = unpack_phi(&phi_star);
        debug_assert!(best_ll >= start_ll - 1e-9);

        // boundary candidate: no random effects at all (G = 0), where ML
        // collapses to ordinary least squares
        let ols_noise = (rss / n).max(1e-12);
        let zero_g = [[0.0, 0.0], [0.0, 0.0]];
        let mut ridge_boundary = false;
        let (boundary_ll, _) = lme_profile_loglik(&data, &zero_g, ols_noise, &mut ridge_boundary);
        let mut beta_star = {
            let (_, beta) = lme_profile_loglik(&data, &g_star, noise_star, &mut ridge_used);
            beta
        };
        if boundary_ll >= best_ll {
            best_ll = boundary_ll;
            g_star = zero_g;
            noise_star = ols_noise;
            beta_star = ols_beta.clone();
        }
        if ridge_used {
            warnings.push("singular design; a 1e-8 ridge was applied".to_string());
        }

        fits.push(LmeFit {
            fixed_effects: beta_star.iter().copied().collect(),
            random_cov: g_star,
            noise_var: noise_star,
            log_likelihood: best_ll,
            warnings,
        });
    }
    Ok(fits)
}

impl LmeFit {
    /// Population prediction ignoring random effects.
    pub fn population(&self, x: &SubjectAttributes, t: f64) -> f64 {
        let d = self.fixed_effects.len() - 2;
        let mut acc = 0.0;
        for j in 0..d {
            acc += self.fixed_effects[j] * x.values[j];
        }
        acc + self.fixed_effects[d] * t + self.fixed_effects[d + 1]
    }

    /// Posterior mean of the subject's random (intercept, slope) deviations
    /// given observed (time, value) pairs. Empty history gives zeros.
    pub fn random_effects_posterior_mean(
        &self,
        x: &SubjectAttributes,
        points: &[(f64, f64)],
    ) -> [f64; 2] {
        if points.is_empty() {
            return [0.0, 0.0];
        }
        let n = points.len();
        let g = DMatrix::from_row_slice(
            2,
            2,
            &[
                self.random_cov[0][0],
                self.random_cov[0][1],
                self.random_cov[1][0],
                self.random_cov[1][1],
            ],
        );
        let z = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { points[i].0 });
        let mut v = &z * &g * z.transpose();
        for i in 0..n {
            v[(i, i)] += self.noise_var;
        }
        let resid = DVector::from_iterator(
            n,
            points.iter().map(|&(t, y)| y - self.population(x, t)),
        );
        let solved = match v.cholesky() {
            Some(chol) => chol.solve(&resid),
            None => return [0.0, 0.0],
        };
        let u = g * z.transpose() * solved;
        [u[0], u[1]]
    }

    /// Predict at `times` given the target's historical (time, value) pairs.
    pub fn predict_one(&self, x: &SubjectAttributes, points: &[(f64, f64)], times: &[f64]) -> Vec<f64> {
        let u = self.random_effects_posterior_mean(x, points);
        times
            .iter()
            .map(|&t| self.population(x, t) + u[0] + u[1] * t)
            .collect()
    }
}

/// Predict all targets with the per-target mixed-effects fits, conditioning
/// each on the subject's history. Returns `values[target][time_index]`.
pub fn predict_lme(
    fits: &[LmeFit],
    x: &SubjectAttributes,
    history: &History,
    times: &[f64],
) -> Vec<Vec<f64>> {
    fits.iter()
        .enumerate()
        .map(|(k, fit)| {
            let points: Vec<(f64, f64)> = history
                .visits
                .iter()
                .filter_map(|visit| visit.values.get(k).copied().flatten().map(|y| (visit.age, y)))
                .collect();
            fit.predict_one(x, &points, times)
        })
        .collect()
}

/// Subject-specific linear benchmark: a least-squares line through the
/// subject's own historical points per target, carry-forward when only one
/// point exists. Returns `None` for targets absent from the history; errors
/// when the history has no visits at all.
pub fn predict_subject_linear(
    history: &History,
    times: &[f64],
) -> Result<Vec<Option<Vec<f64>>>> {
    if history.visits.is_empty() {
        return Err(Error::NotApplicable(
            "subject-specific linear benchmark requires at least one past visit".into(),
        ));
    }
    let m = history
        .visits
        .iter()
        .map(|v| v.values.len())
        .max()
        .unwrap_or(0);
    let mut out = Vec::with_capacity(m);
    for k in 0..m {
        let points: Vec<(f64, f64)> = history
            .visits
            .iter()
            .filter_map(|visit| visit.values.get(k).copied().flatten().map(|y| (visit.age, y)))
            .collect();
        if points.is_empty() {
            out.push(None);
            continue;
        }
        if points.len() == 1 {
            out.push(Some(vec![points[0].1; times.len()]));
            continue;
        }
        let n = points.len() as f64;
        let mean_t = points.iter().map(|&(t, _)| t).sum::<f64>() / n;
        let mean_y = points.iter().map(|&(_, y)| y).sum::<f64>() / n;
        let var_t: f64 = points.iter().map(|&(t, _)| (t - mean_t) * (t - mean_t)).sum();
        if var_t < 1e-12 {
            // repeated identical times: fall back to the mean value
            out.push(Some(vec![mean_y; times.len()]));
            continue;
        }
        let cov: f64 = points
            .iter()
            .map(|&(t, y)| (t - mean_t) * (y - mean_y))
            .sum();
        let slope = cov / var_t;
        let intercept = mean_y - slope * mean_t;
        out.push(Some(times.iter().map(|&t| intercept + slope * t).collect()));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Stratified linear benchmark (omitted from default reports)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit2 {
    pub intercept: f64,
    pub slope: f64,
}

impl LinearFit2 {
    pub fn eval(&self, t: f64) -> f64 {
        self.intercept + self.slope * t
    }
}

/// Straight-line analogue of [`fit_global_sigmoid`]; kept behind an explicit
/// request and excluded from default reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StratifiedLinear {
    pub strata: Strata,
    sex_attr: Option<usize>,
    apoe_attr: Option<usize>,
    pub global: Vec<LinearFit2>,
    #[serde(with = "stratum_map")]
    pub fits: BTreeMap<StratumKey, Vec<LinearFit2>>,
}

impl StratifiedLinear {
    pub fn predict(&self, x: &SubjectAttributes, times: &[f64]) -> Vec<Vec<f64>> {
        let key = StratumKey {
            sex: self
                .sex_attr
                .map(|idx| x.values[idx].round().clamp(0.0, 1.0) as i8),
            apoe: self
                .apoe_attr
                .map(|idx| x.values[idx].round().clamp(0.0, 2.0) as i8),
        };
        let fits = self.fits.get(&key).unwrap_or(&self.global);
        fits.iter()
            .map(|fit| times.iter().map(|&t| fit.eval(t)).collect())
            .collect()
    }
}

fn fit_line(ts: &[f64], ys: &[f64]) -> LinearFit2 {
    let n = ts.len() as f64;
    if ts.is_empty() {
        return LinearFit2 {
            intercept: 0.0,
            slope: 0.0,
        };
    }
    let mean_t = ts.iter().sum::<f64>() / n;
    let mean_y = ys.iter().sum::<f64>() / n;
    let var_t: f64 = ts.iter().map(|t| (t - mean_t) * (t - mean_t)).sum();
    if var_t < 1e-12 {
        return LinearFit2 {
            intercept: mean_y,
            slope: 0.0,
        };
    }
    let cov: f64 = ts.iter().zip(ys).map(|(t, y)| (t - mean_t) * (y - mean_y)).sum();
    let slope = cov / var_t;
    LinearFit2 {
        intercept: mean_y - slope * mean_t,
        slope,
    }
}

pub fn fit_global_linear(cohort: &Cohort, strata: Strata) -> Result<StratifiedLinear> {
    // reuse the sigmoid stratification machinery for the data partition
    let sigmoid = fit_global_sigmoid(cohort, strata)?;
    let m = cohort.n_targets();
    let mut pooled: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); m];
    let mut per_stratum: BTreeMap<StratumKey, Vec<(Vec<f64>, Vec<f64>)>> = BTreeMap::new();
    for key in sigmoid.fits.keys() {
        per_stratum.insert(*key, vec![(Vec::new(), Vec::new()); m]);
    }
    for subject in &cohort.subjects {
        let key = StratumKey {
            sex: sigmoid
                .sex_attr
                .map(|idx| subject.attributes.values[idx].round().clamp(0.0, 1.0) as i8),
            apoe: sigmoid
                .apoe_attr
                .map(|idx| subject.attributes.values[idx].round().clamp(0.0, 2.0) as i8),
        };
        for visit in &subject.visits {
            for (k, value) in visit.values.iter().enumerate() {
                if let Some(y) = value {
                    pooled[k].0.push(visit.age);
                    pooled[k].1.push(*y);
                    if let Some(stratum) = per_stratum.get_mut(&key) {
                        stratum[k].0.push(visit.age);
                        stratum[k].1.push(*y);
                    }
                }
            }
        }
    }
    let global: Vec<LinearFit2> = pooled.iter().map(|(ts, ys)| fit_line(ts, ys)).collect();
    let fits = per_stratum
        .into_iter()
        .map(|(key, data)| {
            let per_target = data
                .iter()
                .enumerate()
                .map(|(k, (ts, ys))| {
                    if ts.is_empty() {
                        global[k]
                    } else {
                        fit_line(ts, ys)
                    }
                })
                .collect();
            (key, per_target)
        })
        .collect();
    Ok(StratifiedLinear {
        strata,
        sex_attr: sigmoid.sex_attr,
        apoe_attr: sigmoid.apoe_attr,
        global,
        fits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{AttributeMeta, CohortMeta, Polarity, SubjectRecord, TargetMeta, Visit};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn meta(d_names: &[&str], m: usize) -> CohortMeta {
        CohortMeta {
            targets: (0..m)
                .map(|k| TargetMeta {
                    name: format!("t{k}"),
                    range: (0.0, 30.0),
                    polarity: Polarity::Increasing,
                })
                .collect(),
            attributes: d_names
                .iter()
                .map(|n| AttributeMeta {
                    name: n.to_string(),
                    unit: String::new(),
                })
                .collect(),
        }
    }

    fn canonical(fit: &SigmoidFit4) -> SigmoidFit4 {
        // resolve the (scale, slope) sign symmetry toward positive scale
        if fit.scale < 0.0 {
            SigmoidFit4 {
                scale: -fit.scale,
                bias: fit.bias + fit.scale,
                inflection: fit.inflection,
                slope: -fit.slope,
            }
        } else {
            *fit
        }
    }

    #[test]
    fn sigmoid_refit_recovers_noiseless_truth() {
        let truth = SigmoidFit4 {
            scale: 25.0,
            bias: 2.0,
            inflection: 74.0,
            slope: 0.8,
        };
        let ts: Vec<f64> = (0..120).map(|i| 60.0 + 0.25 * i as f64).collect();
        let ys: Vec<f64> = ts.iter().map(|&t| truth.eval(t)).collect();
        let fit = fit_sigmoid4(&ts, &ys);
        let sse: f64 = ts.iter().zip(&ys).map(|(&t, &y)| (fit.eval(t) - y).powi(2)).sum();
        assert!(sse <= 1e-8, "sse {sse}");
        let fit = canonical(&fit);
        assert_relative_eq!(fit.scale, truth.scale, max_relative = 1e-3);
        assert_relative_eq!(fit.bias, truth.bias, epsilon = 1e-2);
        assert_relative_eq!(fit.inflection, truth.inflection, epsilon = 1e-2);
        assert_relative_eq!(fit.slope, truth.slope, max_relative = 1e-3);
    }

    #[test]
    fn sigmoid_fit_constant_data_predicts_mean() {
        let ts: Vec<f64> = (0..10).map(|i| 60.0 + i as f64).collect();
        let ys = vec![12.5; 10];
        let fit = fit_sigmoid4(&ts, &ys);
        assert_eq!(fit.scale, 0.0);
        for &t in &[55.0, 70.0, 90.0] {
            assert_relative_eq!(fit.eval(t), 12.5);
        }
    }

    fn sigmoid_cohort(all_same_sex: bool) -> Cohort {
        let truth = SigmoidFit4 {
            scale: 20.0,
            bias: 5.0,
            inflection: 72.0,
            slope: 0.6,
        };
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let mut subjects = Vec::new();
        for i in 0..60 {
            let sex = if all_same_sex { 0.0 } else { (i % 2) as f64 };
            let base: f64 = 60.0 + 20.0 * rng.gen::<f64>();
            let visits = (0..4)
                .map(|j| {
                    let t = base + j as f64;
                    Visit {
                        age: t,
                        values: vec![Some(truth.eval(t))],
                    }
                })
                .collect();
            subjects.push(SubjectRecord {
                id: format!("s{i}"),
                attributes: crate::model::SubjectAttributes::new(vec![sex]),
                visits,
            });
        }
        Cohort {
            meta: meta(&["sex"], 1),
            subjects,
        }
    }

    #[test]
    fn stratum_identical_to_pool_equals_global_fit() {
        let cohort = sigmoid_cohort(true);
        let stratified = fit_global_sigmoid(&cohort, Strata::Sex).unwrap();
        let key = StratumKey {
            sex: Some(0),
            apoe: None,
        };
        let stratum = &stratified.fits[&key];
        for (a, b) in stratum.iter().zip(&stratified.global) {
            assert_relative_eq!(a.eval(70.0), b.eval(70.0), epsilon = 1e-9);
            assert_relative_eq!(a.eval(80.0), b.eval(80.0), epsilon = 1e-9);
        }
        // the empty male stratum fell back with a warning
        assert!(!stratified.warnings.is_empty());
        let male = StratumKey {
            sex: Some(1),
            apoe: None,
        };
        assert_eq!(stratified.fits[&male], stratified.global);
    }

    fn lme_cohort(with_noise: bool, single_visit: bool) -> Cohort {
        // y = 2*x + 0.5*t + 3 (+ noise) with no subject-level deviations
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let mut subjects = Vec::new();
        for i in 0..40 {
            let x = rng.gen::<f64>() * 2.0;
            let base: f64 = 65.0 + 10.0 * rng.gen::<f64>();
            let n_visits = if single_visit { 1 } else { 4 };
            let visits = (0..n_visits)
                .map(|j| {
                    let t = base + 1.5 * j as f64;
                    let noise: f64 = if with_noise {
                        0.4 * rng.sample::<f64, _>(rand_distr::StandardNormal)
                    } else {
                        0.0
                    };
                    Visit {
                        age: t,
                        values: vec![Some(2.0 * x + 0.5 * t + 3.0 + noise)],
                    }
                })
                .collect();
            subjects.push(SubjectRecord {
                id: format!("s{i}"),
                attributes: crate::model::SubjectAttributes::new(vec![x]),
                visits,
            });
        }
        Cohort {
            meta: meta(&["x"], 1),
            subjects,
        }
    }

    #[test]
    fn lme_pure_fixed_effect_data_collapses_to_ols() {
        let cohort = lme_cohort(true, false);
        let fits = fit_lme(&cohort).unwrap();
        let fit = &fits[0];

        // OLS oracle on the pooled design
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut ys: Vec<f64> = Vec::new();
        for subject in &cohort.subjects {
            for visit in &subject.visits {
                rows.push(vec![subject.attributes.values[0], visit.age, 1.0]);
                ys.push(visit.values[0].unwrap());
            }
        }
        let x = DMatrix::from_fn(rows.len(), 3, |i, j| rows[i][j]);
        let y = DVector::from_column_slice(&ys);
        let beta = (x.transpose() * &x)
            .cholesky()
            .unwrap()
            .solve(&(x.transpose() * &y));

        let frob: f64 = fit
            .random_cov
            .iter()
            .flatten()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        assert!(
            frob <= 1e-3 * fit.noise_var.sqrt(),
            "random_cov Frobenius {frob} vs noise sd {}",
            fit.noise_var.sqrt()
        );
        for j in 0..3 {
            assert!(
                (fit.fixed_effects[j] - beta[j]).abs() < 1e-6,
                "beta[{j}]: {} vs {}",
                fit.fixed_effects[j],
                beta[j]
            );
        }
    }

    #[test]
    fn lme_single_visit_warns_about_identifiability() {
        let cohort = lme_cohort(true, true);
        let fits = fit_lme(&cohort).unwrap();
        assert!(fits[0]
            .warnings
            .iter()
            .any(|w| w.contains("unidentifiable")));
    }

    #[test]
    fn lme_loglik_not_below_ols_start() {
        let cohort = lme_cohort(true, false);
        let fits = fit_lme(&cohort).unwrap();
        let fit = &fits[0];
        // the boundary candidate IS the OLS model, so the fitted loglik can
        // never be below pure OLS
        let mut subjects: Vec<(&[f64], Vec<(f64, f64)>)> = Vec::new();
        for subject in &cohort.subjects {
            let pts: Vec<(f64, f64)> = subject
                .visits
                .iter()
                .map(|v| (v.age, v.values[0].unwrap()))
                .collect();
            subjects.push((&subject.attributes.values, pts));
        }
        let data = LmeData { subjects, d: 1 };
        let (_, rss) = pooled_ols(&data);
        let n = data.n_obs() as f64;
        let mut ridge = false;
        let (ols_ll, _) = lme_profile_loglik(&data, &[[0.0; 2]; 2], rss / n, &mut ridge);
        assert!(fit.log_likelihood >= ols_ll - 1e-9);
    }

    #[test]
    fn lme_predict_empty_history_is_population_line() {
        let fit = LmeFit {
            fixed_effects: vec![2.0, 0.5, 3.0],
            random_cov: [[1.0, 0.1], [0.1, 0.2]],
            noise_var: 0.5,
            log_likelihood: 0.0,
            warnings: vec![],
        };
        let x = crate::model::SubjectAttributes::new(vec![1.5]);
        let pred = fit.predict_one(&x, &[], &[70.0, 80.0]);
        assert_relative_eq!(pred[0], 2.0 * 1.5 + 0.5 * 70.0 + 3.0);
        assert_relative_eq!(pred[1], 2.0 * 1.5 + 0.5 * 80.0 + 3.0);
    }

    #[test]
    fn lme_history_on_population_line_gives_zero_random_effects() {
        let fit = LmeFit {
            fixed_effects: vec![2.0, 0.5, 3.0],
            random_cov: [[1.0, 0.0], [0.0, 0.2]],
            noise_var: 0.5,
            log_likelihood: 0.0,
            warnings: vec![],
        };
        let x = crate::model::SubjectAttributes::new(vec![1.0]);
        let points: Vec<(f64, f64)> = [70.0, 72.0, 74.0]
            .iter()
            .map(|&t| (t, fit.population(&x, t)))
            .collect();
        let u = fit.random_effects_posterior_mean(&x, &points);
        assert_relative_eq!(u[0], 0.0, epsilon = 1e-10);
        assert_relative_eq!(u[1], 0.0, epsilon = 1e-10);
        // ... making the population line a fixed point of the predictor
        let times = [70.0, 72.0, 74.0, 78.0];
        let pred = fit.predict_one(&x, &points, &times);
        for (i, &t) in times.iter().enumerate() {
            assert_relative_eq!(pred[i], fit.population(&x, t), epsilon = 1e-10);
        }
    }

    #[test]
    fn lme_predict_matches_direct_gaussian_conditioning() {
        let fit = LmeFit {
            fixed_effects: vec![1.0, 0.3, -2.0],
            random_cov: [[0.8, 0.1], [0.1, 0.05]],
            noise_var: 0.3,
            log_likelihood: 0.0,
            warnings: vec![],
        };
        let x = crate::model::SubjectAttributes::new(vec![0.7]);
        let points = [(70.0, 21.0), (73.0, 23.5)];
        let times = [influence_free_time()];

        // oracle: joint Gaussian of (y_hist, y_new_mean) conditioning
        let g = DMatrix::from_row_slice(2, 2, &[0.8, 0.1, 0.1, 0.05]);
        let z_h = DMatrix::from_row_slice(2, 2, &[1.0, 70.0, 1.0, 73.0]);
        let z_new = DMatrix::from_row_slice(1, 2, &[1.0, times[0]]);
        let mut v_h = &z_h * &g * z_h.transpose();
        v_h[(0, 0)] += 0.3;
        v_h[(1, 1)] += 0.3;
        let cov_new_h = &z_new * &g * z_h.transpose();
        let resid = DVector::from_column_slice(&[
            21.0 - fit.population(&x, 70.0),
            23.5 - fit.population(&x, 73.0),
        ]);
        let cond = &cov_new_h * v_h.cholesky().unwrap().solve(&resid);
        let oracle = fit.population(&x, times[0]) + cond[0];

        let pred = fit.predict_one(&x, &points, &times);
        assert!((pred[0] - oracle).abs() < 1e-8);
    }

    fn influence_free_time() -> f64 {
        78.5
    }

    #[test]
    fn subject_linear_carry_forward_single_visit() {
        let history = History::from_visits(&[Visit {
            age: 70.0,
            values: vec![Some(25.0)],
        }]);
        let preds = predict_subject_linear(&history, &[72.0, 90.0, 55.0]).unwrap();
        assert_eq!(preds[0].as_ref().unwrap(), &vec![25.0, 25.0, 25.0]);
    }

    #[test]
    fn subject_linear_fits_line_through_two_visits() {
        let history = History::from_visits(&[
            Visit {
                age: 70.0,
                values: vec![Some(10.0)],
            },
            Visit {
                age: 72.0,
                values: vec![Some(14.0)],
            },
        ]);
        let preds = predict_subject_linear(&history, &[75.0]).unwrap();
        assert_relative_eq!(preds[0].as_ref().unwrap()[0], 20.0, epsilon = 1e-12);
    }

    #[test]
    fn subject_linear_reproduces_collinear_triple() {
        let history = History::from_visits(&[
            Visit {
                age: 70.0,
                values: vec![Some(5.0)],
            },
            Visit {
                age: 71.0,
                values: vec![Some(6.5)],
            },
            Visit {
                age: 73.0,
                values: vec![Some(9.5)],
            },
        ]);
        let preds = predict_subject_linear(&history, &[71.0]).unwrap();
        assert_relative_eq!(preds[0].as_ref().unwrap()[0], 6.5, epsilon = 1e-10);
    }

    #[test]
    fn subject_linear_rejects_empty_history() {
        assert!(matches!(
            predict_subject_linear(&History::empty(), &[70.0]),
            Err(Error::NotApplicable(_))
        ));
    }

    #[test]
    fn subject_linear_missing_target_is_none() {
        let history = History::from_visits(&[Visit {
            age: 70.0,
            values: vec![Some(25.0), None],
        }]);
        let preds = predict_subject_linear(&history, &[71.0]).unwrap();
        assert!(preds[0].is_some());
        assert!(preds[1].is_none());
    }
}
