//! Per-sample uncertainty scores computed from a set of perturbed
//! predictions (test-time augmentation).
//!
//! [`bregman_information`] works on raw logits; the four confidence-based
//! baselines work on row-wise softmax probabilities.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_logits, softmax, ModelConfig, ParameterVector};
use crate::scalar::Scalar;

/// Values this far below zero are treated as rounding noise and clamped.
pub const BI_CLAMP_TOLERANCE: f64 = 1e-12;

/// `P × C` logits, one row per perturbed copy of a sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitSet<T> {
    data: Vec<T>,
    classes: usize,
}

impl<T: Scalar> LogitSet<T> {
    pub fn new(rows: Vec<Vec<T>>) -> Result<Self> {
        let classes = rows.first().ok_or(Error::Empty("logit set"))?.len();
        if classes < 2 {
            return Err(Error::InvalidArgument("logit set needs at least 2 classes".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * classes);
        for row in rows {
            crate::error::check_len(classes, row.len())?;
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument("non-finite logit".into()));
            }
            data.extend(row);
        }
        Ok(Self { data, classes })
    }

    pub fn num_perturbations(&self) -> usize {
        self.data.len() / self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.classes)
    }

    pub fn to_probabilities(&self) -> ProbabilitySet<T> {
        ProbabilitySet {
            data: self.rows().flat_map(softmax).collect(),
            classes: self.classes,
        }
    }
}

/// `P × C` class probabilities; each row is a distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilitySet<T> {
    data: Vec<T>,
    classes: usize,
}

impl<T: Scalar> ProbabilitySet<T> {
    pub fn new(rows: Vec<Vec<T>>) -> Result<Self> {
        let classes = rows.first().ok_or(Error::Empty("probability set"))?.len();
        if classes < 2 {
            return Err(Error::InvalidArgument("probability set needs at least 2 classes".into()));
        }
        let tol = T::lit(1e-9).max(T::epsilon() * T::from_count(8 * classes));
        let mut data = Vec::with_capacity(rows.len() * classes);
        for row in rows {
            crate::error::check_len(classes, row.len())?;
            if row.iter().any(|&p| !(p >= T::zero() && p <= T::one())) {
                return Err(Error::InvalidArgument("probability outside [0, 1]".into()));
            }
            let sum: T = row.iter().copied().sum();
            if (sum - T::one()).abs() > tol {
                return Err(Error::InvalidArgument(format!("row sums to {sum}, not 1")));
            }
            data.extend(row);
        }
        Ok(Self { data, classes })
    }

    pub fn num_perturbations(&self) -> usize {
        self.data.len() / self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn rows(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.classes)
    }

    fn mean_over_rows(&self, f: impl Fn(&[T]) -> T) -> T {
        let sum: T = self.rows().map(f).sum();
        sum / T::from_count(self.num_perturbations())
    }
}

/// Largest and second-largest entries of a row with at least two entries.
fn top_two<T: Scalar>(row: &[T]) -> (T, T) {
    let mut first = T::neg_infinity();
    let mut second = T::neg_infinity();
    for &p in row {
        if p > first {
            second = first;
            first = p;
        } else if p > second {
            second = p;
        }
    }
    (first, second)
}

/// `ln Σ exp(x)` with max-subtraction.
pub fn stable_lse<T: Scalar>(x: &[T]) -> Result<T> {
    if x.is_empty() {
        return Err(Error::Empty("log-sum-exp input"));
    }
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return Err(Error::InvalidArgument("non-finite log-sum-exp input".into()));
    }
    Ok(max + x.iter().map(|&v| (v - max).exp()).sum::<T>().ln())
}

/// Mean LSE of the perturbed logits minus the LSE of the mean logits.
pub fn bregman_information<T: Scalar>(ls: &LogitSet<T>) -> T {
    let p = T::from_count(ls.num_perturbations());
    let mut mean = vec![T::zero(); ls.num_classes()];
    let mut lse_sum = T::zero();
    for row in ls.rows() {
        lse_sum += stable_lse(row).expect("validated logit row");
        for (m, &z) in mean.iter_mut().zip(row) {
            *m += z;
        }
    }
    mean.iter_mut().for_each(|m| *m /= p);
    let bi = lse_sum / p - stable_lse(&mean).expect("validated logit row");
    if bi < T::zero() && bi >= -T::lit(BI_CLAMP_TOLERANCE) {
        T::zero()
    } else {
        bi
    }
}

pub fn least_confidence<T: Scalar>(ps: &ProbabilitySet<T>) -> T {
    T::one() - ps.mean_over_rows(|row| top_two(row).0)
}

pub fn margin_sampling<T: Scalar>(ps: &ProbabilitySet<T>) -> T {
    T::one()
        - ps.mean_over_rows(|row| {
            let (first, second) = top_two(row);
            first - second
        })
}

pub fn ratio_confidence<T: Scalar>(ps: &ProbabilitySet<T>) -> Result<T> {
    if ps.rows().any(|row| top_two(row).0 <= T::zero()) {
        return Err(Error::InvalidArgument("zero top probability".into()));
    }
    Ok(ps.mean_over_rows(|row| {
        let (first, second) = top_two(row);
        second / first
    }))
}

pub fn entropy_score<T: Scalar>(ps: &ProbabilitySet<T>) -> T {
    ps.mean_over_rows(|row| {
        -row.iter()
            .filter(|&&p| p > T::zero())
            .map(|&p| p * p.ln())
            .sum::<T>()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    GaussianNoise { sigma: f64 },
    ElementMask { fraction: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub count: usize,
    pub kind: PerturbationKind,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self {
            count: 12,
            kind: PerturbationKind::GaussianNoise { sigma: 0.1 },
        }
    }
}

impl PerturbationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count < 1 {
            return Err(Error::config("perturbations", "count must be at least 1"));
        }
        match self.kind {
            PerturbationKind::GaussianNoise { sigma } if !(sigma > 0.0 && sigma.is_finite()) => {
                Err(Error::config("sigma", "must be positive"))
            }
            PerturbationKind::ElementMask { fraction } if !(0.0..1.0).contains(&fraction) => {
                Err(Error::config("mask_fraction", "must lie in [0, 1)"))
            }
            _ => Ok(()),
        }
    }
}

/// `spec.count` perturbed copies of `x`, drawn from the caller's generator.
pub fn perturb_features<T: Scalar, R: Rng + ?Sized>(
    x: &[T],
    spec: &PerturbationSpec,
    rng: &mut R,
) -> Result<Vec<Vec<T>>> {
    spec.validate()?;
    let copies = match spec.kind {
        PerturbationKind::GaussianNoise { sigma } => {
            let noise = Normal::new(0.0, sigma).expect("validated sigma");
            (0..spec.count)
                .map(|_| x.iter().map(|&v| v + T::lit(noise.sample(rng))).collect())
                .collect()
        }
        PerturbationKind::ElementMask { fraction } => {
            let masked = ((fraction * x.len() as f64).round() as usize).min(x.len());
            (0..spec.count)
                .map(|_| {
                    let mut copy = x.to_vec();
                    for i in index::sample(rng, x.len(), masked) {
                        copy[i] = T::zero();
                    }
                    copy
                })
                .collect()
        }
    };
    Ok(copies)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UncertaintyMetric {
    #[default]
    Bi,
    Lc,
    Ms,
    Rc,
    En,
}

impl UncertaintyMetric {
    pub const ALL: [UncertaintyMetric; 5] = [Self::Bi, Self::Lc, Self::Ms, Self::Rc, Self::En];

    pub fn score<T: Scalar>(self, logits: &LogitSet<T>) -> Result<T> {
        let value = match self {
            Self::Bi => bregman_information(logits),
            Self::Lc => least_confidence(&logits.to_probabilities()),
            Self::Ms => margin_sampling(&logits.to_probabilities()),
            Self::Rc => ratio_confidence(&logits.to_probabilities())?,
            Self::En => entropy_score(&logits.to_probabilities()),
        };
        Ok(value)
    }
}

/// Logits of every perturbed copy of `x` under the given model.
pub fn perturbed_logits<T: Scalar, R: Rng + ?Sized>(
    params: &ParameterVector<T>,
    config: &ModelConfig,
    x: &[T],
    spec: &PerturbationSpec,
    rng: &mut R,
) -> Result<LogitSet<T>> {
    let rows = perturb_features(x, spec, rng)?
        .iter()
        .map(|copy| forward_logits(params, config, copy))
        .collect::<Result<Vec<_>>>()?;
    LogitSet::new(rows)
}

/// Test-time-augmentation uncertainty of one unlabeled sample.
pub fn score_sample<T: Scalar, R: Rng + ?Sized>(
    params: &ParameterVector<T>,
    config: &ModelConfig,
    x: &[T],
    spec: &PerturbationSpec,
    metric: UncertaintyMetric,
    rng: &mut R,
) -> Result<T> {
    metric.score(&perturbed_logits(params, config, x, spec, rng)?)
}
