//! Evaluation harness: subject-level cross-validation splits, scenario
//! protocols (past-visit sweep and bucketed horizon sweep), MAE statistics,
//! and a subject-level paired permutation test.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::benchmarks::{LmeFit, StratifiedLinear, StratifiedSigmoid};
use crate::cohort::Cohort;
use crate::error::{Error, Result};
use crate::inference::TrainConfig;
use crate::model::{ModelParams, SubjectAttributes};
use crate::prediction::{map_point_forecast, History};

/// Default permutation count for significance tests.
pub const DEFAULT_N_PERM: usize = 10_000;

/// A predictor that forecasts every target at the given ages from a subject's
/// attributes and history. `None` marks targets the predictor cannot score
/// (for example, the subject-specific benchmark without any history).
pub trait TrajectoryPredictor {
    fn name(&self) -> &str;
    fn predict(
        &self,
        x: &SubjectAttributes,
        history: &History,
        times: &[f64],
    ) -> Vec<Option<Vec<f64>>>;
}

// ---------------------------------------------------------------------------
// Cross-validation splits
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Subject-level k-fold partition: every fold reserves one part as the test
/// set and the next as a validation set; the rest form the training set.
/// Parts are size-balanced within one subject.
pub fn kfold_split(cohort: &Cohort, k: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    let n = cohort.subjects.len();
    if k < 3 {
        return Err(Error::InvalidConfig(
            "k must be at least 3 so a training set remains".into(),
        ));
    }
    if n < k {
        return Err(Error::TooFewSubjects { n, k });
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);

    let base = n / k;
    let remainder = n % k;
    let mut parts: Vec<Vec<usize>> = Vec::with_capacity(k);
    let mut cursor = 0;
    for part in 0..k {
        let size = base + usize::from(part < remainder);
        parts.push(indices[cursor..cursor + size].to_vec());
        cursor += size;
    }

    let folds = (0..k)
        .map(|f| {
            let test = parts[f].clone();
            let validation = parts[(f + 1) % k].clone();
            let train = (0..k)
                .filter(|&p| p != f && p != (f + 1) % k)
                .flat_map(|p| parts[p].iter().copied())
                .collect();
            FoldSplit {
                train,
                validation,
                test,
            }
        })
        .collect();
    Ok(folds)
}

// ---------------------------------------------------------------------------
// MAE
// ---------------------------------------------------------------------------

/// Predicted or true values keyed by (subject, target, time).
#[derive(Debug, Clone, Default)]
pub struct PredictionTable {
    entries: BTreeMap<(usize, usize, u64), f64>,
}

impl PredictionTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, subject: usize, target: usize, time: f64, value: f64) {
        self.entries.insert((subject, target, time.to_bits()), value);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &(usize, usize, u64)> {
        self.entries.keys()
    }

    pub fn get(&self, key: &(usize, usize, u64)) -> Option<f64> {
        self.entries.get(key).copied()
    }

    /// Restrict to the given key set.
    pub fn restricted(&self, keys: &BTreeSet<(usize, usize, u64)>) -> PredictionTable {
        PredictionTable {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| keys.contains(*k))
                .map(|(k, v)| (*k, *v))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MaeStat {
    pub mean: f64,
    /// Sample standard deviation of per-subject MAEs.
    pub stddev: f64,
    pub n_subjects: usize,
}

/// Per-target mean absolute error. Absolute errors are first averaged within
/// each subject, then the mean and sample standard deviation are taken across
/// subjects (the permutation unit is the subject). Prediction and truth keys
/// must align exactly.
pub fn mae(
    predictions: &PredictionTable,
    truths: &PredictionTable,
    n_targets: usize,
) -> Result<Vec<MaeStat>> {
    if predictions.is_empty() || truths.is_empty() {
        return Err(Error::AlignmentMismatch(
            "empty prediction or truth table".into(),
        ));
    }
    if predictions.len() != truths.len() {
        return Err(Error::AlignmentMismatch(format!(
            "{} predictions vs {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    // subject -> per-target absolute errors
    let mut per_subject: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for (key, truth) in truths.entries.iter() {
        let Some(pred) = predictions.get(key) else {
            return Err(Error::AlignmentMismatch(format!(
                "prediction missing for subject {} target {} time bits {}",
                key.0, key.1, key.2
            )));
        };
        let (subject, target, _) = *key;
        if target >= n_targets {
            return Err(Error::InvalidTargetIndex {
                index: target,
                n_targets,
            });
        }
        per_subject
            .entry(subject)
            .or_insert_with(|| vec![Vec::new(); n_targets])[target]
            .push((pred - truth).abs());
    }

    let mut stats = Vec::with_capacity(n_targets);
    for k in 0..n_targets {
        let subject_maes: Vec<f64> = per_subject
            .values()
            .filter(|targets| !targets[k].is_empty())
            .map(|targets| targets[k].iter().sum::<f64>() / targets[k].len() as f64)
            .collect();
        let n = subject_maes.len();
        if n == 0 {
            stats.push(MaeStat {
                mean: f64::NAN,
                stddev: f64::NAN,
                n_subjects: 0,
            });
            continue;
        }
        let mean = subject_maes.iter().sum::<f64>() / n as f64;
        let stddev = if n > 1 {
            (subject_maes.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64)
                .sqrt()
        } else {
            0.0
        };
        stats.push(MaeStat {
            mean,
            stddev,
            n_subjects: n,
        });
    }
    Ok(stats)
}

// ---------------------------------------------------------------------------
// Paired permutation test
// ---------------------------------------------------------------------------

/// Subject-level paired permutation test of "model A beats model B".
///
/// `a_errors[i]` and `b_errors[i]` hold subject i's absolute errors under the
/// two models at the same prediction points. Each permutation swaps the model
/// labels of whole subjects, keeping a subject's time-points together. The
/// statistic is the difference of subject-averaged MAEs, and the p-value is
/// the rank of the true difference among permuted ones (descending, ties
/// counted conservatively) divided by `n_perm + 1`.
pub fn paired_permutation_test(
    a_errors: &[Vec<f64>],
    b_errors: &[Vec<f64>],
    n_perm: usize,
    seed: u64,
) -> Result<f64> {
    if a_errors.len() != b_errors.len() {
        return Err(Error::AlignmentMismatch(format!(
            "{} vs {} subjects",
            a_errors.len(),
            b_errors.len()
        )));
    }
    let diffs: Vec<f64> = a_errors
        .iter()
        .zip(b_errors)
        .filter(|(a, b)| !a.is_empty() && !b.is_empty())
        .map(|(a, b)| {
            let mae_a = a.iter().sum::<f64>() / a.len() as f64;
            let mae_b = b.iter().sum::<f64>() / b.len() as f64;
            mae_b - mae_a
        })
        .collect();
    if diffs.len() < 2 {
        return Err(Error::InsufficientData(
            "paired permutation test needs at least 2 subjects".into(),
        ));
    }

    let n = diffs.len() as f64;
    let true_diff = diffs.iter().sum::<f64>() / n;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut rank = 1usize; // the true difference itself
    for _ in 0..n_perm {
        let permuted: f64 = diffs
            .iter()
            .map(|&d| if rng.gen::<bool>() { d } else { -d })
            .sum::<f64>()
            / n;
        if permuted >= true_diff {
            rank += 1;
        }
    }
    Ok(rank as f64 / (n_perm + 1) as f64)
}

// ---------------------------------------------------------------------------
// Scenario protocols
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    PastVisitSweep,
    HorizonSweep,
}

fn default_bucket() -> u32 {
    6
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    /// Number of visits handed to the models as history.
    pub past_visits: usize,
    /// Horizon bucket width in months (horizon sweep only).
    #[serde(default = "default_bucket")]
    pub horizon_bucket_months: u32,
    /// Scored horizon buckets in months, ascending (horizon sweep only).
    #[serde(default)]
    pub horizons: Vec<u32>,
}

impl ScenarioSpec {
    pub fn past_visit_sweep(past_visits: usize) -> Self {
        Self {
            kind: ScenarioKind::PastVisitSweep,
            past_visits,
            horizon_bucket_months: default_bucket(),
            horizons: Vec::new(),
        }
    }

    pub fn horizon_sweep(past_visits: usize, horizons: Vec<u32>) -> Self {
        Self {
            kind: ScenarioKind::HorizonSweep,
            past_visits,
            horizon_bucket_months: default_bucket(),
            horizons,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            ScenarioKind::PastVisitSweep => Ok(()),
            ScenarioKind::HorizonSweep => {
                if self.horizons.is_empty() {
                    return Err(Error::InvalidConfig(
                        "horizon sweep needs at least one horizon".into(),
                    ));
                }
                if self.horizon_bucket_months == 0 {
                    return Err(Error::InvalidConfig(
                        "horizon_bucket_months must be positive".into(),
                    ));
                }
                if self.horizons.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::InvalidConfig(
                        "horizons must be sorted strictly ascending".into(),
                    ));
                }
                Ok(())
            }
        }
    }

    pub fn label(&self) -> &'static str {
        match self.kind {
            ScenarioKind::PastVisitSweep => "past-visits",
            ScenarioKind::HorizonSweep => "horizon-months",
        }
    }

    fn points(&self) -> Vec<u32> {
        match self.kind {
            ScenarioKind::PastVisitSweep => vec![self.past_visits as u32],
            ScenarioKind::HorizonSweep => self.horizons.clone(),
        }
    }
}

/// Nearest multiple of `bucket` months, ties rounding toward the later
/// bucket.
pub fn horizon_bucket(months: f64, bucket: u32) -> u32 {
    let b = bucket as f64;
    (b * (months / b + 0.5).floor()).max(0.0) as u32
}

/// One evaluated fold: indices of test subjects and the models fitted on
/// that fold's training data. `models[0]` is the reference model for the
/// p-value comparisons.
pub struct EvaluatedFold {
    pub test_subjects: Vec<usize>,
    pub models: Vec<Box<dyn TrajectoryPredictor>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub target: String,
    pub scenario: String,
    pub point: u32,
    /// `None` when the model produced no prediction at this point (N/A).
    pub mae_mean: Option<f64>,
    pub mae_std: Option<f64>,
    pub n_subjects: usize,
    pub n_excluded: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairPvalue {
    pub scenario: String,
    pub point: u32,
    /// Reference model of the comparison (the first model of every fold).
    pub reference: String,
    pub model: String,
    /// One-sided p-value for "reference beats model".
    pub p: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub pvalues: Vec<PairPvalue>,
}

impl EvalReport {
    pub fn merge(&mut self, other: EvalReport) {
        self.rows.extend(other.rows);
        self.pvalues.extend(other.pvalues);
    }
}

/// Run one scenario over evaluated folds and assemble MAE rows plus paired
/// permutation p-values of the reference model against every other model.
pub fn run_scenario(
    cohort: &Cohort,
    folds: &[EvaluatedFold],
    spec: &ScenarioSpec,
    n_perm: usize,
    seed: u64,
) -> Result<EvalReport> {
    spec.validate()?;
    if folds.is_empty() {
        return Err(Error::InvalidConfig("no evaluated folds given".into()));
    }
    let model_names: Vec<String> = folds[0]
        .models
        .iter()
        .map(|m| m.name().to_string())
        .collect();
    for fold in folds {
        let names: Vec<&str> = fold.models.iter().map(|m| m.name()).collect();
        if names.len() != model_names.len()
            || names.iter().zip(&model_names).any(|(a, b)| a != b)
        {
            return Err(Error::InvalidConfig(
                "folds carry different model lists".into(),
            ));
        }
    }

    let m = cohort.n_targets();
    let points = spec.points();
    let point_index = |point: u32| points.iter().position(|&p| p == point);

    // per point: truth table and per-model prediction tables
    let mut truths: Vec<PredictionTable> = points.iter().map(|_| PredictionTable::new()).collect();
    let mut preds: Vec<Vec<PredictionTable>> = points
        .iter()
        .map(|_| model_names.iter().map(|_| PredictionTable::new()).collect())
        .collect();
    let mut excluded: Vec<usize> = vec![0; points.len()];

    for fold in folds {
        for &subject_idx in &fold.test_subjects {
            let subject = &cohort.subjects[subject_idx];
            if subject.visits.len() < spec.past_visits + 1 {
                for count in excluded.iter_mut() {
                    *count += 1;
                }
                continue;
            }
            let history = History::from_visits(&subject.visits[..spec.past_visits]);
            let scoring = &subject.visits[spec.past_visits..];

            // route each scoring visit to its scenario point
            let baseline_age = subject.visits[0].age;
            let mut routed: Vec<(usize, usize)> = Vec::new(); // (visit offset, point index)
            for (offset, visit) in scoring.iter().enumerate() {
                match spec.kind {
                    ScenarioKind::PastVisitSweep => routed.push((offset, 0)),
                    ScenarioKind::HorizonSweep => {
                        let months = (visit.age - baseline_age) * 12.0;
                        let bucket = horizon_bucket(months, spec.horizon_bucket_months);
                        if let Some(pi) = point_index(bucket) {
                            routed.push((offset, pi));
                        }
                    }
                }
            }
            if routed.is_empty() {
                for count in excluded.iter_mut() {
                    *count += 1;
                }
                continue;
            }

            let times: Vec<f64> = routed.iter().map(|&(o, _)| scoring[o].age).collect();
            let predictions: Vec<Vec<Option<Vec<f64>>>> = fold
                .models
                .iter()
                .map(|model| model.predict(&subject.attributes, &history, &times))
                .collect();

            let mut scored_any = false;
            for (ti, &(offset, pi)) in routed.iter().enumerate() {
                let visit = &scoring[offset];
                for k in 0..m {
                    let Some(truth) = visit.values[k] else { continue };
                    scored_any = true;
                    truths[pi].insert(subject_idx, k, visit.age, truth);
                    for (mi, model_pred) in predictions.iter().enumerate() {
                        if let Some(values) = &model_pred[k] {
                            preds[pi][mi].insert(subject_idx, k, visit.age, values[ti]);
                        }
                    }
                }
            }
            if !scored_any {
                for count in excluded.iter_mut() {
                    *count += 1;
                }
            }
        }
    }

    if truths.iter().all(|t| t.is_empty()) {
        return Err(Error::EmptyScenario(format!(
            "no subject provides {} past visits plus scorable later visits",
            spec.past_visits
        )));
    }

    let mut report = EvalReport::default();
    for (pi, &point) in points.iter().enumerate() {
        for (mi, name) in model_names.iter().enumerate() {
            let table = &preds[pi][mi];
            if table.is_empty() {
                for target in &cohort.meta.targets {
                    report.rows.push(ReportRow {
                        model: name.clone(),
                        target: target.name.clone(),
                        scenario: spec.label().into(),
                        point,
                        mae_mean: None,
                        mae_std: None,
                        n_subjects: 0,
                        n_excluded: excluded[pi],
                    });
                }
                continue;
            }
            let keys: BTreeSet<(usize, usize, u64)> = table.keys().copied().collect();
            let truth_subset = truths[pi].restricted(&keys);
            let stats = mae(table, &truth_subset, m)?;
            for (k, stat) in stats.iter().enumerate() {
                report.rows.push(ReportRow {
                    model: name.clone(),
                    target: cohort.meta.targets[k].name.clone(),
                    scenario: spec.label().into(),
                    point,
                    mae_mean: (stat.n_subjects > 0).then_some(stat.mean),
                    mae_std: (stat.n_subjects > 0).then_some(stat.stddev),
                    n_subjects: stat.n_subjects,
                    n_excluded: excluded[pi],
                });
            }
        }

        // paired permutation p-values: reference model vs every other, over
        // the keys both models scored, errors pooled across targets
        let reference = 0;
        for other in 1..model_names.len() {
            if preds[pi][reference].is_empty() || preds[pi][other].is_empty() {
                continue;
            }
            let ref_keys: BTreeSet<_> = preds[pi][reference].keys().copied().collect();
            let other_keys: BTreeSet<_> = preds[pi][other].keys().copied().collect();
            let common: BTreeSet<_> = ref_keys.intersection(&other_keys).copied().collect();
            if common.is_empty() {
                continue;
            }
            let mut per_subject: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
            for key in &common {
                let truth = truths[pi].get(key).expect("scored key has a truth");
                let entry = per_subject.entry(key.0).or_default();
                entry
                    .0
                    .push((preds[pi][reference].get(key).unwrap() - truth).abs());
                entry
                    .1
                    .push((preds[pi][other].get(key).unwrap() - truth).abs());
            }
            if per_subject.len() < 2 {
                continue;
            }
            let a: Vec<Vec<f64>> = per_subject.values().map(|(a, _)| a.clone()).collect();
            let b: Vec<Vec<f64>> = per_subject.values().map(|(_, b)| b.clone()).collect();
            let p = paired_permutation_test(
                &a,
                &b,
                n_perm,
                crate::mix_seed(seed, (pi as u64) << 8 | other as u64),
            )?;
            report.pvalues.push(PairPvalue {
                scenario: spec.label().into(),
                point,
                reference: model_names[reference].clone(),
                model: model_names[other].clone(),
                p,
            });
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Predictor adapters
// ---------------------------------------------------------------------------

/// The proposed model as an evaluation predictor: posterior-mean point
/// forecasts from ancestral samples, with test-time personalization when
/// history is available.
pub struct ProposedPredictor {
    pub params: ModelParams,
    pub personalization: TrainConfig,
}

impl ProposedPredictor {
    pub fn new(params: ModelParams) -> Self {
        Self {
            params,
            personalization: TrainConfig::personalization_default(),
        }
    }
}

impl TrajectoryPredictor for ProposedPredictor {
    fn name(&self) -> &str {
        "proposed"
    }

    fn predict(
        &self,
        x: &SubjectAttributes,
        history: &History,
        times: &[f64],
    ) -> Vec<Option<Vec<f64>>> {
        match map_point_forecast(x, history, &self.params, times, &self.personalization) {
            Ok(values) => values.into_iter().map(Some).collect(),
            Err(_) => vec![None; self.params.a.len()],
        }
    }
}

/// Training-fixed population sigmoid benchmark (global or stratified).
pub struct SigmoidBenchmarkPredictor {
    pub fit: StratifiedSigmoid,
    name: String,
}

impl SigmoidBenchmarkPredictor {
    pub fn new(fit: StratifiedSigmoid) -> Self {
        let name = fit.strata.to_string();
        Self { fit, name }
    }
}

impl TrajectoryPredictor for SigmoidBenchmarkPredictor {
    fn name(&self) -> &str {
        &self.name
    }

    fn predict(
        &self,
        x: &SubjectAttributes,
        _history: &History,
        times: &[f64],
    ) -> Vec<Option<Vec<f64>>> {
        self.fit.predict(x, times).into_iter().map(Some).collect()
    }
}

/// Straight-line analogue of the sigmoid benchmarks (off by default in
/// reports).
pub struct LinearBenchmarkPredictor {
    pub fit: StratifiedLinear,
    name: String,
}

impl LinearBenchmarkPredictor {
    pub fn new(fit: StratifiedLinear) -> Self {
        let name = format!("{}-linear", fit.strata);
        Self { fit, name }
    }
}

impl TrajectoryPredictor for LinearBenchmarkPredictor {
    fn name(&self) -> &str {
        &self.name
    }

    fn predict(
        &self,
        x: &SubjectAttributes,
        _history: &History,
        times: &[f64],
    ) -> Vec<Option<Vec<f64>>> {
        self.fit.predict(x, times).into_iter().map(Some).collect()
    }
}

/// Linear mixed-effects benchmark with per-subject random-effect adaptation.
pub struct LmeBenchmarkPredictor {
    pub fits: Vec<LmeFit>,
}

impl TrajectoryPredictor for LmeBenchmarkPredictor {
    fn name(&self) -> &str {
        "lme"
    }

    fn predict(
        &self,
        x: &SubjectAttributes,
        history: &History,
        times: &[f64],
    ) -> Vec<Option<Vec<f64>>> {
        crate::benchmarks::predict_lme(&self.fits, x, history, times)
            .into_iter()
            .map(Some)
            .collect()
    }
}

/// Subject-specific linear extrapolation; not applicable without history.
pub struct SubjectLinearPredictor {
    pub n_targets: usize,
}

impl TrajectoryPredictor for SubjectLinearPredictor {
    fn name(&self) -> &str {
        "subject-linear"
    }

    fn predict(
        &self,
        _x: &SubjectAttributes,
        history: &History,
        times: &[f64],
    ) -> Vec<Option<Vec<f64>>> {
        match crate::benchmarks::predict_subject_linear(history, times) {
            Ok(values) => {
                let mut out = values;
                out.resize(self.n_targets, None);
                out
            }
            Err(_) => vec![None; self.n_targets],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{AttributeMeta, CohortMeta, Polarity, SubjectRecord, TargetMeta, Visit};
    use approx::assert_relative_eq;

    fn toy_cohort(n: usize, visits_per_subject: usize) -> Cohort {
        let meta = CohortMeta {
            targets: vec![TargetMeta {
                name: "t0".into(),
                range: (0.0, 30.0),
                polarity: Polarity::Increasing,
            }],
            attributes: vec![AttributeMeta {
                name: "x".into(),
                unit: String::new(),
            }],
        };
        let subjects = (0..n)
            .map(|i| SubjectRecord {
                id: format!("s{i}"),
                attributes: SubjectAttributes::new(vec![i as f64]),
                visits: (0..visits_per_subject)
                    .map(|j| Visit {
                        age: 70.0 + j as f64,
                        values: vec![Some(10.0 + i as f64 + j as f64)],
                    })
                    .collect(),
            })
            .collect();
        Cohort { meta, subjects }
    }

    #[test]
    fn kfold_balanced_and_exhaustive() {
        let cohort = toy_cohort(40, 1);
        let folds = kfold_split(&cohort, 20, 5).unwrap();
        assert_eq!(folds.len(), 20);
        let mut all_test = Vec::new();
        for fold in &folds {
            assert_eq!(fold.test.len(), 2);
            assert_eq!(fold.validation.len(), 2);
            assert_eq!(fold.train.len(), 36);
            all_test.extend(fold.test.iter().copied());
            for idx in &fold.test {
                assert!(!fold.train.contains(idx));
                assert!(!fold.validation.contains(idx));
            }
        }
        all_test.sort_unstable();
        assert_eq!(all_test, (0..40).collect::<Vec<_>>());
    }

    #[test]
    fn kfold_deterministic_and_errors() {
        let cohort = toy_cohort(10, 1);
        let a = kfold_split(&cohort, 5, 9).unwrap();
        let b = kfold_split(&cohort, 5, 9).unwrap();
        for (fa, fb) in a.iter().zip(&b) {
            assert_eq!(fa.test, fb.test);
            assert_eq!(fa.train, fb.train);
        }
        assert!(matches!(
            kfold_split(&toy_cohort(4, 1), 5, 0),
            Err(Error::TooFewSubjects { .. })
        ));
    }

    #[test]
    fn mae_examples() {
        // one subject, preds [1,2] vs truths [1,4]: MAE 1.0
        let mut preds = PredictionTable::new();
        let mut truths = PredictionTable::new();
        preds.insert(0, 0, 70.0, 1.0);
        preds.insert(0, 0, 71.0, 2.0);
        truths.insert(0, 0, 70.0, 1.0);
        truths.insert(0, 0, 71.0, 4.0);
        let stats = mae(&preds, &truths, 1).unwrap();
        assert_relative_eq!(stats[0].mean, 1.0);
        assert_eq!(stats[0].n_subjects, 1);
        assert_relative_eq!(stats[0].stddev, 0.0);

        // perfect predictions
        let stats = mae(&truths, &truths, 1).unwrap();
        assert_relative_eq!(stats[0].mean, 0.0);
        assert_relative_eq!(stats[0].stddev, 0.0);

        // two subjects with MAEs 1 and 3: mean 2, sample stddev sqrt(2)
        let mut preds = PredictionTable::new();
        let mut truths = PredictionTable::new();
        preds.insert(0, 0, 70.0, 0.0);
        truths.insert(0, 0, 70.0, 1.0);
        preds.insert(1, 0, 70.0, 0.0);
        truths.insert(1, 0, 70.0, 3.0);
        let stats = mae(&preds, &truths, 1).unwrap();
        assert_relative_eq!(stats[0].mean, 2.0);
        assert_relative_eq!(stats[0].stddev, 2.0f64.sqrt());
    }

    #[test]
    fn mae_rejects_misaligned_tables() {
        let mut preds = PredictionTable::new();
        let mut truths = PredictionTable::new();
        preds.insert(0, 0, 70.0, 1.0);
        truths.insert(0, 0, 71.0, 1.0);
        assert!(mae(&preds, &truths, 1).is_err());
        assert!(mae(&PredictionTable::new(), &truths, 1).is_err());
    }

    #[test]
    fn permutation_identical_errors_gives_p_one() {
        let errors: Vec<Vec<f64>> = (0..10).map(|i| vec![1.0 + i as f64]).collect();
        let p = paired_permutation_test(&errors, &errors, 1000, 3).unwrap();
        assert_relative_eq!(p, 1.0);
    }

    #[test]
    fn permutation_all_wins_gives_minimal_p() {
        // model A strictly better on every one of 50 subjects; the chance of
        // a permutation matching the all-positive pattern is 2^-50
        let a: Vec<Vec<f64>> = (0..50).map(|i| vec![0.1 + 0.01 * i as f64]).collect();
        let b: Vec<Vec<f64>> = (0..50).map(|i| vec![1.0 + 0.01 * i as f64]).collect();
        let p = paired_permutation_test(&a, &b, 10_000, 12).unwrap();
        assert_relative_eq!(p, 1.0 / 10_001.0);
    }

    #[test]
    fn permutation_complementary_tails() {
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        let a: Vec<Vec<f64>> = (0..30).map(|_| vec![rng.gen::<f64>()]).collect();
        let b: Vec<Vec<f64>> = (0..30).map(|_| vec![rng.gen::<f64>()]).collect();
        let n_perm = 2000;
        let p_ab = paired_permutation_test(&a, &b, n_perm, 5).unwrap();
        let p_ba = paired_permutation_test(&b, &a, n_perm, 5).unwrap();
        // same seed means identical sign patterns, so the two tails cover
        // everything plus the two self-ranks (no ties with continuous data)
        assert_relative_eq!(p_ab + p_ba, (n_perm + 2) as f64 / (n_perm + 1) as f64, epsilon = 1e-12);
    }

    #[test]
    fn permutation_requires_two_subjects() {
        let a = vec![vec![1.0]];
        let b = vec![vec![2.0]];
        assert!(paired_permutation_test(&a, &b, 100, 0).is_err());
    }

    #[test]
    fn horizon_bucket_arithmetic() {
        assert_eq!(horizon_bucket(14.0, 6), 12);
        assert_eq!(horizon_bucket(15.0, 6), 18); // tie rounds toward later
        assert_eq!(horizon_bucket(9.0, 6), 12); // tie rounds toward later
        assert_eq!(horizon_bucket(11.9, 6), 12);
        assert_eq!(horizon_bucket(2.9, 6), 0);
        assert_eq!(horizon_bucket(36.0, 6), 36);
    }

    struct ConstantPredictor {
        name: String,
        value: f64,
    }

    impl TrajectoryPredictor for ConstantPredictor {
        fn name(&self) -> &str {
            &self.name
        }

        fn predict(
            &self,
            _x: &SubjectAttributes,
            _history: &History,
            times: &[f64],
        ) -> Vec<Option<Vec<f64>>> {
            vec![Some(vec![self.value; times.len()])]
        }
    }

    #[test]
    fn run_scenario_scores_later_visits() {
        let cohort = toy_cohort(6, 4);
        let folds = vec![EvaluatedFold {
            test_subjects: (0..6).collect(),
            models: vec![
                Box::new(ConstantPredictor {
                    name: "ref".into(),
                    value: 12.0,
                }),
                Box::new(ConstantPredictor {
                    name: "other".into(),
                    value: 0.0,
                }),
            ],
        }];
        let spec = ScenarioSpec::past_visit_sweep(2);
        let report = run_scenario(&cohort, &folds, &spec, 200, 11).unwrap();
        assert_eq!(report.rows.len(), 2);
        let ref_row = report.rows.iter().find(|r| r.model == "ref").unwrap();
        let other_row = report.rows.iter().find(|r| r.model == "other").unwrap();
        assert_eq!(ref_row.n_subjects, 6);
        assert!(ref_row.mae_mean.unwrap() < other_row.mae_mean.unwrap());
        assert_eq!(report.pvalues.len(), 1);
        assert!(report.pvalues[0].p < 0.05);
    }

    #[test]
    fn subject_linear_is_not_applicable_without_past_visits() {
        let cohort = toy_cohort(5, 3);
        let folds = vec![EvaluatedFold {
            test_subjects: (0..5).collect(),
            models: vec![
                Box::new(ConstantPredictor {
                    name: "ref".into(),
                    value: 11.0,
                }),
                Box::new(SubjectLinearPredictor { n_targets: 1 }),
            ],
        }];
        let spec = ScenarioSpec::past_visit_sweep(0);
        let report = run_scenario(&cohort, &folds, &spec, 100, 2).unwrap();
        let na_row = report
            .rows
            .iter()
            .find(|r| r.model == "subject-linear")
            .unwrap();
        assert!(na_row.mae_mean.is_none());
        assert_eq!(na_row.n_subjects, 0);
        // and no p-value row is produced for the inapplicable model
        assert!(report.pvalues.is_empty());
    }

    #[test]
    fn run_scenario_errors_when_no_subject_qualifies() {
        let cohort = toy_cohort(3, 2);
        let folds = vec![EvaluatedFold {
            test_subjects: vec![0, 1, 2],
            models: vec![Box::new(ConstantPredictor {
                name: "ref".into(),
                value: 0.0,
            })],
        }];
        let spec = ScenarioSpec::past_visit_sweep(5);
        assert!(matches!(
            run_scenario(&cohort, &folds, &spec, 10, 0),
            Err(Error::EmptyScenario(_))
        ));
    }
}
