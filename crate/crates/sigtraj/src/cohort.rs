//! Cohort containers: subjects, visits, and target/attribute metadata.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SubjectAttributes;

/// Direction a target moves as the disease progresses.
///
/// `Decreasing` targets start at the high (healthy) end of their range and
/// fall; `Increasing` targets start low and rise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Increasing,
    Decreasing,
}

/// Declared metadata for one time-varying target.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetMeta {
    pub name: String,
    /// Nominal (min, max) of the score. Values are not clamped to this range;
    /// it anchors initialization and reporting.
    pub range: (f64, f64),
    pub polarity: Polarity,
}

impl TargetMeta {
    /// Score value at the healthy end of the range.
    pub fn healthy_value(&self) -> f64 {
        match self.polarity {
            Polarity::Decreasing => self.range.1,
            Polarity::Increasing => self.range.0,
        }
    }

    /// Signed span from healthy to severe end.
    pub fn signed_span(&self) -> f64 {
        match self.polarity {
            Polarity::Decreasing => -(self.range.1 - self.range.0),
            Polarity::Increasing => self.range.1 - self.range.0,
        }
    }
}

/// Declared metadata for one fixed subject attribute.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttributeMeta {
    pub name: String,
    #[serde(default)]
    pub unit: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortMeta {
    pub targets: Vec<TargetMeta>,
    pub attributes: Vec<AttributeMeta>,
}

impl CohortMeta {
    pub fn n_targets(&self) -> usize {
        self.targets.len()
    }

    pub fn n_attributes(&self) -> usize {
        self.attributes.len()
    }

    pub fn target_index(&self, name: &str) -> Option<usize> {
        self.targets.iter().position(|t| t.name == name)
    }

    /// Case-insensitive attribute lookup (used for stratification keys).
    pub fn attribute_index(&self, name: &str) -> Option<usize> {
        self.attributes
            .iter()
            .position(|a| a.name.eq_ignore_ascii_case(name))
    }
}

/// One clinical visit: the subject's age and the per-target observations,
/// `None` where a target was not measured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Visit {
    pub age: f64,
    pub values: Vec<Option<f64>>,
}

impl Visit {
    pub fn n_observed(&self) -> usize {
        self.values.iter().filter(|v| v.is_some()).count()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    pub attributes: SubjectAttributes,
    /// Visits sorted by age.
    pub visits: Vec<Visit>,
}

impl SubjectRecord {
    pub fn n_observed(&self) -> usize {
        self.visits.iter().map(Visit::n_observed).sum()
    }

    pub fn baseline_age(&self) -> Option<f64> {
        self.visits.first().map(|v| v.age)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Cohort {
    pub meta: CohortMeta,
    pub subjects: Vec<SubjectRecord>,
}

impl Cohort {
    pub fn n_targets(&self) -> usize {
        self.meta.n_targets()
    }

    pub fn n_attributes(&self) -> usize {
        self.meta.n_attributes()
    }

    /// Structural validation: dimensions, finiteness, visit ordering.
    pub fn validate(&self) -> Result<()> {
        let d = self.n_attributes();
        let m = self.n_targets();
        for subj in &self.subjects {
            if subj.attributes.values.len() != d {
                return Err(Error::DimensionMismatch {
                    what: format!("attributes of subject {}", subj.id),
                    expected: d,
                    got: subj.attributes.values.len(),
                });
            }
            if subj.attributes.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidCohort(format!(
                    "subject {} has a non-finite attribute",
                    subj.id
                )));
            }
            let mut prev = f64::NEG_INFINITY;
            for visit in &subj.visits {
                if visit.values.len() != m {
                    return Err(Error::DimensionMismatch {
                        what: format!("visit values of subject {}", subj.id),
                        expected: m,
                        got: visit.values.len(),
                    });
                }
                if !visit.age.is_finite() {
                    return Err(Error::InvalidCohort(format!(
                        "subject {} has a non-finite visit age",
                        subj.id
                    )));
                }
                if visit.age < prev {
                    return Err(Error::InvalidCohort(format!(
                        "visits of subject {} are not sorted by age",
                        subj.id
                    )));
                }
                prev = visit.age;
                if visit.values.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidCohort(format!(
                        "subject {} has a non-finite target value",
                        subj.id
                    )));
                }
            }
        }
        Ok(())
    }

    /// New cohort holding only the subjects at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Cohort {
        Cohort {
            meta: self.meta.clone(),
            subjects: indices.iter().map(|&i| self.subjects[i].clone()).collect(),
        }
    }

    /// (min, max) over all visit ages, if any visit exists.
    pub fn age_range(&self) -> Option<(f64, f64)> {
        let mut range: Option<(f64, f64)> = None;
        for subj in &self.subjects {
            for visit in &subj.visits {
                range = Some(match range {
                    None => (visit.age, visit.age),
                    Some((lo, hi)) => (lo.min(visit.age), hi.max(visit.age)),
                });
            }
        }
        range
    }

    /// Mean visit age pooled over all visits.
    pub fn mean_visit_age(&self) -> Option<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for subj in &self.subjects {
            for visit in &subj.visits {
                sum += visit.age;
                n += 1;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_meta() -> CohortMeta {
        CohortMeta {
            targets: vec![TargetMeta {
                name: "score".into(),
                range: (0.0, 30.0),
                polarity: Polarity::Decreasing,
            }],
            attributes: vec![AttributeMeta {
                name: "apoe".into(),
                unit: "e4 count".into(),
            }],
        }
    }

    #[test]
    fn healthy_end_follows_polarity() {
        let meta = toy_meta();
        assert_eq!(meta.targets[0].healthy_value(), 30.0);
        assert_eq!(meta.targets[0].signed_span(), -30.0);
    }

    #[test]
    fn validate_rejects_unsorted_visits() {
        let cohort = Cohort {
            meta: toy_meta(),
            subjects: vec![SubjectRecord {
                id: "s0".into(),
                attributes: SubjectAttributes { values: vec![1.0] },
                visits: vec![
                    Visit {
                        age: 72.0,
                        values: vec![Some(28.0)],
                    },
                    Visit {
                        age: 70.0,
                        values: vec![Some(27.0)],
                    },
                ],
            }],
        };
        assert!(cohort.validate().is_err());
    }

    #[test]
    fn subset_keeps_requested_order() {
        let mut cohort = Cohort {
            meta: toy_meta(),
            subjects: vec![],
        };
        for i in 0..4 {
            cohort.subjects.push(SubjectRecord {
                id: format!("s{i}"),
                attributes: SubjectAttributes { values: vec![0.0] },
                visits: vec![],
            });
        }
        let sub = cohort.subset(&[2, 0]);
        assert_eq!(sub.subjects.len(), 2);
        assert_eq!(sub.subjects[0].id, "s2");
        assert_eq!(sub.subjects[1].id, "s0");
    }
}
