//! Communication-round scheduling and server-side aggregation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParameterVector;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommSchedule {
    pub burn_in: usize,
    pub q: usize,
}

impl Default for CommSchedule {
    fn default() -> Self {
        Self { burn_in: 30, q: 5 }
    }
}

impl CommSchedule {
    pub fn new(burn_in: usize, q: usize) -> Result<Self> {
        if q == 0 {
            return Err(Error::config("q", "must be at least 1"));
        }
        Ok(Self { burn_in, q })
    }

    /// True once the per-task batch counter has passed the burn-in and sits
    /// on a multiple of `q`.
    pub fn should_communicate(&self, bn: usize) -> bool {
        bn > self.burn_in && bn % self.q == 0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationStrategy {
    #[default]
    FedAvg,
    /// Per-class models first, then a uniform mean over classes.
    ClassWeighted,
    /// Plain averaging on the server; clients add the proximal gradient term.
    FedProx,
}

/// Sum that does not depend on the order of `terms`.
fn ordered_sum<T: Scalar>(terms: &mut [T]) -> T {
    terms.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    terms.iter().copied().sum()
}

/// Coordinate-wise (weighted) mean. Terms are reduced in sorted order, so the
/// result is bit-identical under any permutation of the inputs.
pub fn fedavg<T: Scalar>(params: &[&ParameterVector<T>], weights: Option<&[T]>) -> Result<ParameterVector<T>> {
    let first = *params.first().ok_or(Error::Empty("parameter list"))?;
    for p in params {
        first.ensure_same_layout(p)?;
    }
    if let Some(w) = weights {
        crate::error::check_len(params.len(), w.len())?;
        if w.iter().any(|&x| !(x >= T::zero())) {
            return Err(Error::InvalidArgument("negative aggregation weight".into()));
        }
    }
    if params.len() == 1 {
        return Ok(first.clone());
    }
    let mut out = ParameterVector::zeros(first.layout().clone());
    let mut terms = vec![T::zero(); params.len()];
    match weights {
        None => {
            let n = T::from_count(params.len());
            for (i, slot) in out.values_mut().iter_mut().enumerate() {
                for (t, p) in terms.iter_mut().zip(params) {
                    *t = p.values()[i];
                }
                *slot = ordered_sum(&mut terms) / n;
            }
        }
        Some(w) => {
            let total = ordered_sum(&mut w.to_vec());
            if !(total > T::zero()) {
                return Err(Error::InvalidArgument("aggregation weights sum to zero".into()));
            }
            for (i, slot) in out.values_mut().iter_mut().enumerate() {
                for ((t, p), &wk) in terms.iter_mut().zip(params).zip(w) {
                    *t = wk * p.values()[i];
                }
                *slot = ordered_sum(&mut terms) / total;
            }
        }
    }
    Ok(out)
}

/// Parameters each client parked for aggregation, with the classes it saw
/// since the previous round.
#[derive(Clone, Debug)]
pub struct RoundReport<T> {
    pub params: Vec<ParameterVector<T>>,
    pub classes: Vec<BTreeSet<usize>>,
}

/// Averages one model per observed class, then averages those class models
/// uniformly.
///
/// Classes with the same set of contributing clients share one class model,
/// which enters the final mean weighted by the number of such classes. When
/// every client reports the same classes this is exactly [`fedavg`].
pub fn class_weighted_avg<T: Scalar>(report: &RoundReport<T>) -> Result<ParameterVector<T>> {
    crate::error::check_len(report.params.len(), report.classes.len())?;
    let all: Vec<&ParameterVector<T>> = report.params.iter().collect();
    let mut contributors: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (client, classes) in report.classes.iter().enumerate() {
        for &c in classes {
            contributors.entry(c).or_default().push(client);
        }
    }
    if contributors.is_empty() {
        return fedavg(&all, None);
    }
    let mut groups: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    for clients in contributors.into_values() {
        *groups.entry(clients).or_default() += 1;
    }
    let mut class_models = Vec::with_capacity(groups.len());
    let mut weights = Vec::with_capacity(groups.len());
    for (clients, n_classes) in groups {
        let members: Vec<&ParameterVector<T>> = clients.iter().map(|&k| &report.params[k]).collect();
        class_models.push(fedavg(&members, None)?);
        weights.push(T::from_count(n_classes));
    }
    let refs: Vec<&ParameterVector<T>> = class_models.iter().collect();
    fedavg(&refs, Some(&weights))
}

#[derive(Clone, Debug)]
pub struct GlobalState<T> {
    pub theta_g: ParameterVector<T>,
    pub theta_g_prev: ParameterVector<T>,
    /// Completed communication rounds.
    pub round: usize,
}

impl<T: Scalar> GlobalState<T> {
    pub fn new(initial: ParameterVector<T>) -> Self {
        Self {
            theta_g_prev: initial.clone(),
            theta_g: initial,
            round: 0,
        }
    }

    /// Midpoint of `theta_new` and the previous round's global parameters;
    /// pass-through on the first round.
    pub fn temporal_smooth(&self, theta_new: &ParameterVector<T>) -> Result<ParameterVector<T>> {
        theta_new.ensure_same_layout(&self.theta_g_prev)?;
        if self.round == 0 {
            return Ok(theta_new.clone());
        }
        let half = T::lit(0.5);
        let mut out = theta_new.clone();
        for (o, &prev) in out.values_mut().iter_mut().zip(self.theta_g_prev.values()) {
            *o = half * (*o + prev);
        }
        Ok(out)
    }

    pub fn rotate(&mut self, theta: ParameterVector<T>) {
        self.theta_g_prev = theta.clone();
        self.theta_g = theta;
        self.round += 1;
    }
}

/// Overwrites every client's parameters with `theta_g`.
pub fn broadcast<'a, T: Scalar + 'a>(
    theta_g: &ParameterVector<T>,
    clients: impl IntoIterator<Item = &'a mut ParameterVector<T>>,
) -> Result<()> {
    for params in clients {
        params.copy_from(theta_g)?;
    }
    Ok(())
}

/// One line of the round log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RoundRecord {
    pub round: usize,
    pub task: usize,
    pub bn: usize,
    pub client_classes: Vec<BTreeSet<usize>>,
    pub checksum: u64,
}

impl fmt::Display for RoundRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "round={} task={} bn={} classes=", self.round, self.task, self.bn)?;
        for (k, classes) in self.client_classes.iter().enumerate() {
            if k > 0 {
                f.write_str(";")?;
            }
            let ids: Vec<String> = classes.iter().map(usize::to_string).collect();
            write!(f, "{{{}}}", ids.join(","))?;
        }
        write!(f, " checksum={:016x}", self.checksum)
    }
}
