//! Task-accuracy bookkeeping and the average last accuracy / forgetting
//! metrics.
//!
//! Task indices are zero-based: entry `(t, i)` is the accuracy on task `i`
//! measured after training on task `t`, defined for `i <= t`. The matrix is
//! generic over the number type so the metrics can be checked in exact
//! rational arithmetic.

use num_traits::Num;
use serde::Serialize;

use crate::error::{check_len, Error, Result};
use crate::model::{forward_logits, ModelConfig, ParameterVector};
use crate::scalar::Scalar;
use crate::stream::LabeledExample;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AccuracyMatrix<A> {
    rows: Vec<Vec<Option<A>>>,
}

fn count<A: Num>(n: usize) -> A {
    (0..n).fold(A::zero(), |acc, _| acc + A::one())
}

impl<A: Clone + Num + PartialOrd> AccuracyMatrix<A> {
    pub fn new(num_tasks: usize) -> Self {
        Self {
            rows: (0..num_tasks).map(|t| vec![None; t + 1]).collect(),
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn record(&mut self, after_task: usize, on_task: usize, accuracy: A) -> Result<()> {
        if after_task >= self.rows.len() || on_task > after_task {
            return Err(Error::Matrix(format!(
                "entry ({after_task}, {on_task}) outside the lower triangle of a {}-task matrix",
                self.rows.len()
            )));
        }
        if !(accuracy >= A::zero() && accuracy <= A::one()) {
            return Err(Error::Matrix("accuracy must lie in [0, 1]".into()));
        }
        let slot = &mut self.rows[after_task][on_task];
        if slot.is_some() {
            return Err(Error::Matrix(format!("entry ({after_task}, {on_task}) already recorded")));
        }
        *slot = Some(accuracy);
        Ok(())
    }

    pub fn get(&self, after_task: usize, on_task: usize) -> Option<&A> {
        self.rows.get(after_task)?.get(on_task)?.as_ref()
    }

    fn require(&self, after_task: usize, on_task: usize) -> Result<A> {
        self.get(after_task, on_task)
            .cloned()
            .ok_or_else(|| Error::Matrix(format!("missing entry ({after_task}, {on_task})")))
    }

    /// Mean accuracy over all tasks after the final task.
    pub fn last_accuracy(&self) -> Result<A> {
        let t = self.rows.len();
        if t == 0 {
            return Err(Error::Matrix("no tasks".into()));
        }
        let mut sum = A::zero();
        for i in 0..t {
            sum = sum + self.require(t - 1, i)?;
        }
        Ok(sum / count(t))
    }

    /// Mean over past tasks of (peak accuracy before the final task) minus
    /// (final accuracy). Negative terms are kept.
    pub fn last_forgetting(&self) -> Result<A> {
        let t = self.rows.len();
        if t < 2 {
            return Err(Error::Matrix("forgetting needs at least two tasks".into()));
        }
        let mut sum = A::zero();
        for j in 0..t - 1 {
            let mut peak = self.require(j, j)?;
            for l in j + 1..t - 1 {
                let a = self.require(l, j)?;
                if a > peak {
                    peak = a;
                }
            }
            sum = sum + (peak - self.require(t - 1, j)?);
        }
        Ok(sum / count(t - 1))
    }

    /// Row-major dump of the recorded entries (missing ones as `None`).
    pub fn rows(&self) -> &[Vec<Option<A>>] {
        &self.rows
    }
}

fn client_mean<A: Clone + Num + PartialOrd>(
    matrices: &[AccuracyMatrix<A>],
    per_client: impl Fn(&AccuracyMatrix<A>) -> Result<A>,
) -> Result<A> {
    if matrices.is_empty() {
        return Err(Error::Matrix("no clients".into()));
    }
    let t = matrices[0].num_tasks();
    let mut sum = A::zero();
    for m in matrices {
        check_len(t, m.num_tasks())?;
        sum = sum + per_client(m)?;
    }
    Ok(sum / count(matrices.len()))
}

pub fn avg_last_accuracy<A: Clone + Num + PartialOrd>(matrices: &[AccuracyMatrix<A>]) -> Result<A> {
    client_mean(matrices, AccuracyMatrix::last_accuracy)
}

pub fn avg_last_forgetting<A: Clone + Num + PartialOrd>(matrices: &[AccuracyMatrix<A>]) -> Result<A> {
    client_mean(matrices, AccuracyMatrix::last_forgetting)
}

/// Index of the largest logit; ties go to the lowest class id.
pub fn argmax<T: Scalar>(logits: &[T]) -> usize {
    let mut best = 0;
    for (i, &z) in logits.iter().enumerate().skip(1) {
        if z > logits[best] {
            best = i;
        }
    }
    best
}

/// Fraction of `test` classified correctly by argmax over all classes.
pub fn evaluate_model<T: Scalar>(
    params: &ParameterVector<T>,
    config: &ModelConfig,
    test: &[LabeledExample<T>],
) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let mut correct = 0usize;
    for ex in test {
        if argmax(&forward_logits(params, config, &ex.features)?) == ex.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}
