//! Fixed-capacity replay memory with class-balanced, uncertainty-driven
//! admission.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Labeled;
use crate::scalar::Scalar;
use crate::stream::{LabeledExample, MiniBatch};

#[derive(Clone, Debug, PartialEq)]
pub struct StoredSample<T> {
    pub example: LabeledExample<T>,
    pub task_id: usize,
    pub score: T,
    /// Admission order across the buffer's lifetime; breaks score ties.
    pub arrival: u64,
}

impl<T> Labeled<T> for StoredSample<T> {
    fn features(&self) -> &[T] {
        &self.example.features
    }
    fn label(&self) -> usize {
        self.example.label
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryPolicy {
    /// Keep the least uncertain candidates of each class.
    #[default]
    BottomK,
    /// Keep the most uncertain candidates of each class.
    TopK,
    /// Uniform subset of the whole candidate pool, no class balancing.
    Random,
    /// Uniform subset within each class, class-balanced quotas.
    ClassBalancedRandom,
}

impl MemoryPolicy {
    pub fn is_class_balanced(self) -> bool {
        !matches!(self, MemoryPolicy::Random)
    }

    pub fn uses_scores(self) -> bool {
        matches!(self, MemoryPolicy::BottomK | MemoryPolicy::TopK)
    }
}

/// Per-class share of `capacity`; the `capacity % n` lowest class ids get one
/// extra slot.
pub fn class_quota(capacity: usize, classes_seen: &BTreeSet<usize>) -> Result<BTreeMap<usize, usize>> {
    if classes_seen.is_empty() {
        return Err(Error::Empty("classes seen"));
    }
    let n = classes_seen.len();
    let (base, extra) = (capacity / n, capacity % n);
    Ok(classes_seen
        .iter()
        .enumerate()
        .map(|(rank, &c)| (c, base + usize::from(rank < extra)))
        .collect())
}

#[derive(Clone, Debug)]
pub struct MemoryBuffer<T> {
    capacity: usize,
    policy: MemoryPolicy,
    per_class: BTreeMap<usize, Vec<StoredSample<T>>>,
    classes_seen: BTreeSet<usize>,
    next_arrival: u64,
}

impl<T: Scalar> MemoryBuffer<T> {
    pub fn new(capacity: usize, policy: MemoryPolicy) -> Self {
        Self {
            capacity,
            policy,
            per_class: BTreeMap::new(),
            classes_seen: BTreeSet::new(),
            next_arrival: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn policy(&self) -> MemoryPolicy {
        self.policy
    }

    pub fn len(&self) -> usize {
        self.per_class.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes_seen(&self) -> &BTreeSet<usize> {
        &self.classes_seen
    }

    pub fn class_samples(&self, class: usize) -> &[StoredSample<T>] {
        self.per_class.get(&class).map_or(&[], Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = &StoredSample<T>> {
        self.per_class.values().flatten()
    }

    /// Admits `batch` using precomputed scores for the new samples; stored
    /// samples keep the scores they already carry.
    pub fn update<R: Rng + ?Sized>(&mut self, batch: &MiniBatch<T>, scores: &[T], rng: &mut R) -> Result<()> {
        if scores.len() != batch.len() {
            return Err(Error::InvalidArgument(format!(
                "{} scores for {} samples",
                scores.len(),
                batch.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument("non-finite uncertainty score".into()));
        }
        let incoming: Vec<StoredSample<T>> = batch
            .examples
            .iter()
            .zip(scores)
            .map(|(ex, &score)| {
                let arrival = self.next_arrival;
                self.next_arrival += 1;
                StoredSample {
                    example: ex.clone(),
                    task_id: batch.task_id,
                    score,
                    arrival,
                }
            })
            .collect();
        self.classes_seen.extend(incoming.iter().map(|s| s.example.label));
        if self.policy.is_class_balanced() {
            self.admit_balanced(incoming, rng)
        } else {
            self.admit_random(incoming, rng);
            Ok(())
        }
    }

    /// Like [`update`](Self::update), but first rescores every stored sample
    /// of the classes present in `batch` with `scorer` so the whole merged
    /// candidate set is ranked under the same model.
    pub fn update_rescored<R, F>(&mut self, batch: &MiniBatch<T>, scores: &[T], mut scorer: F, rng: &mut R) -> Result<()>
    where
        R: Rng + ?Sized,
        F: FnMut(&[T]) -> Result<T>,
    {
        if self.policy.uses_scores() {
            let classes: BTreeSet<usize> = batch.examples.iter().map(|e| e.label).collect();
            for class in classes {
                if let Some(stored) = self.per_class.get_mut(&class) {
                    for sample in stored.iter_mut() {
                        sample.score = scorer(&sample.example.features)?;
                    }
                }
            }
        }
        self.update(batch, scores, rng)
    }

    fn retain<R: Rng + ?Sized>(&self, mut candidates: Vec<StoredSample<T>>, keep: usize, rng: &mut R) -> Vec<StoredSample<T>> {
        if candidates.len() <= keep {
            return candidates;
        }
        match self.policy {
            MemoryPolicy::BottomK => {
                candidates.sort_by(|a, b| by_score(a, b).then(a.arrival.cmp(&b.arrival)));
                candidates.truncate(keep);
            }
            MemoryPolicy::TopK => {
                candidates.sort_by(|a, b| by_score(b, a).then(a.arrival.cmp(&b.arrival)));
                candidates.truncate(keep);
            }
            MemoryPolicy::Random | MemoryPolicy::ClassBalancedRandom => {
                let mut picked = index::sample(rng, candidates.len(), keep).into_vec();
                picked.sort_unstable();
                let mut slots: Vec<Option<StoredSample<T>>> = candidates.into_iter().map(Some).collect();
                candidates = picked.into_iter().map(|i| slots[i].take().expect("distinct index")).collect();
            }
        }
        candidates.sort_by_key(|s| s.arrival);
        candidates
    }

    fn admit_balanced<R: Rng + ?Sized>(&mut self, incoming: Vec<StoredSample<T>>, rng: &mut R) -> Result<()> {
        let quotas = class_quota(self.capacity, &self.classes_seen)?;
        let mut by_class: BTreeMap<usize, Vec<StoredSample<T>>> = BTreeMap::new();
        for s in incoming {
            by_class.entry(s.example.label).or_default().push(s);
        }
        for (class, fresh) in by_class {
            let mut candidates = self.per_class.remove(&class).unwrap_or_default();
            candidates.extend(fresh);
            let kept = self.retain(candidates, quotas[&class], rng);
            self.per_class.insert(class, kept);
        }
        // Quotas shrink as new classes appear; trim the others right away.
        let over: Vec<usize> = self
            .per_class
            .iter()
            .filter(|(c, v)| v.len() > quotas[c])
            .map(|(&c, _)| c)
            .collect();
        for class in over {
            let stored = self.per_class.remove(&class).unwrap_or_default();
            let kept = self.retain(stored, quotas[&class], rng);
            self.per_class.insert(class, kept);
        }
        self.per_class.retain(|_, v| !v.is_empty());
        Ok(())
    }

    fn admit_random<R: Rng + ?Sized>(&mut self, incoming: Vec<StoredSample<T>>, rng: &mut R) {
        let mut pool: Vec<StoredSample<T>> = std::mem::take(&mut self.per_class).into_values().flatten().collect();
        pool.extend(incoming);
        pool.sort_by_key(|s| s.arrival);
        for s in self.retain(pool, self.capacity, rng) {
            self.per_class.entry(s.example.label).or_default().push(s);
        }
    }

    /// Uniform draw without replacement from samples of tasks other than
    /// `current_task`. Returns every eligible sample when fewer than
    /// `replay_size` exist.
    pub fn sample_replay<R: Rng + ?Sized>(&self, replay_size: usize, current_task: usize, rng: &mut R) -> Vec<StoredSample<T>> {
        let eligible: Vec<&StoredSample<T>> = self.iter().filter(|s| s.task_id != current_task).collect();
        let take = replay_size.min(eligible.len());
        if take == eligible.len() {
            return eligible.into_iter().cloned().collect();
        }
        let mut picked = index::sample(rng, eligible.len(), take).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|i| eligible[i].clone()).collect()
    }

    /// Debug dump: header `class_id,task_id,score,f0,...`, one row per sample.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let dim = self.iter().next().map_or(0, |s| s.example.features.len());
        write!(out, "class_id,task_id,score")?;
        for j in 0..dim {
            write!(out, ",f{j}")?;
        }
        writeln!(out)?;
        for s in self.iter() {
            write!(out, "{},{},{}", s.example.label, s.task_id, s.score.to_f64_lossy())?;
            for v in &s.example.features {
                write!(out, ",{}", v.to_f64_lossy())?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

fn by_score<T: Scalar>(a: &StoredSample<T>, b: &StoredSample<T>) -> Ordering {
    a.score.partial_cmp(&b.score).expect("finite scores")
}
