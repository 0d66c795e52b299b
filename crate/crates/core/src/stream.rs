//! Class-incremental task construction, client partitioning and single-pass
//! mini-batch streams, plus the dataset sources that feed them.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Labeled;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample<T> {
    /// Position in the source dataset; used to audit single-pass consumption.
    pub id: usize,
    pub features: Vec<T>,
    pub label: usize,
}

impl<T> Labeled<T> for LabeledExample<T> {
    fn features(&self) -> &[T] {
        &self.features
    }
    fn label(&self) -> usize {
        self.label
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TaskSpec {
    pub task_id: usize,
    pub classes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiniBatch<T> {
    pub examples: Vec<LabeledExample<T>>,
    pub task_id: usize,
}

impl<T> MiniBatch<T> {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskAssignment {
    #[default]
    RandomShuffle,
    SizeDescending,
}

/// Splits classes into `num_tasks` disjoint groups.
///
/// When the class count is not a multiple of `num_tasks`, the first
/// `classes % num_tasks` tasks receive one extra class.
pub fn assign_classes_to_tasks<R: Rng + ?Sized>(
    class_sizes: &[(usize, usize)],
    num_tasks: usize,
    mode: TaskAssignment,
    rng: &mut R,
) -> Result<Vec<TaskSpec>> {
    if num_tasks == 0 || num_tasks > class_sizes.len() {
        return Err(Error::config(
            "tasks",
            format!("need 1..={} tasks for {} classes", class_sizes.len(), class_sizes.len()),
        ));
    }
    let mut ordered: Vec<(usize, usize)> = class_sizes.to_vec();
    ordered.sort_unstable();
    match mode {
        TaskAssignment::RandomShuffle => ordered.shuffle(rng),
        TaskAssignment::SizeDescending => ordered.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0))),
    }
    let base = ordered.len() / num_tasks;
    let extra = ordered.len() % num_tasks;
    let mut rest = ordered.as_slice();
    let tasks = (0..num_tasks)
        .map(|task_id| {
            let take = base + usize::from(task_id < extra);
            let (head, tail) = rest.split_at(take);
            rest = tail;
            TaskSpec {
                task_id,
                classes: head.iter().map(|&(c, _)| c).collect(),
            }
        })
        .collect();
    Ok(tasks)
}

/// Seeded shuffle followed by a round-robin deal into `clients` lists.
pub fn partition_to_clients<T, R: Rng + ?Sized>(
    mut examples: Vec<LabeledExample<T>>,
    clients: usize,
    rng: &mut R,
) -> Result<Vec<Vec<LabeledExample<T>>>> {
    if clients == 0 {
        return Err(Error::config("clients", "must be at least 1"));
    }
    examples.shuffle(rng);
    let mut parts: Vec<Vec<LabeledExample<T>>> = (0..clients).map(|_| Vec::new()).collect();
    for (i, ex) in examples.into_iter().enumerate() {
        parts[i % clients].push(ex);
    }
    Ok(parts)
}

/// Per-class held-out split: `round(fraction · n_c)` examples of each class
/// go to the test side (at least one and at most `n_c − 1` when `n_c ≥ 2`).
pub fn split_train_test<T, R: Rng + ?Sized>(
    examples: Vec<LabeledExample<T>>,
    fraction: f64,
    rng: &mut R,
) -> Result<(Vec<LabeledExample<T>>, Vec<LabeledExample<T>>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config("test_fraction", "must lie in (0, 1)"));
    }
    let mut by_class: BTreeMap<usize, Vec<LabeledExample<T>>> = BTreeMap::new();
    for ex in examples {
        by_class.entry(ex.label).or_default().push(ex);
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (_, mut group) in by_class {
        group.shuffle(rng);
        let n = group.len();
        let mut n_test = (fraction * n as f64).round() as usize;
        if n >= 2 {
            n_test = n_test.clamp(1, n - 1);
        }
        let tail = group.split_off(n_test);
        test.extend(group);
        train.extend(tail);
    }
    train.sort_by_key(|e| e.id);
    test.sort_by_key(|e| e.id);
    Ok((train, test))
}

#[derive(Clone, Debug, PartialEq)]
pub enum StreamEvent<T> {
    Batch(MiniBatch<T>),
    EndOfTask { task_id: usize },
    EndOfStream,
}

/// Single-pass sequence of mini-batches for one client, grouped by task.
#[derive(Clone, Debug)]
pub struct ClientStream<T> {
    pub client_id: usize,
    tasks: Vec<(usize, Vec<MiniBatch<T>>)>,
    task_cursor: usize,
    batch_cursor: usize,
    batches_in_task: usize,
}

impl<T> ClientStream<T> {
    /// Shuffles each task's examples once and chunks them into batches of
    /// `batch_size`; the final short batch is kept.
    pub fn new<R: Rng + ?Sized>(
        client_id: usize,
        per_task: Vec<(usize, Vec<LabeledExample<T>>)>,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        let tasks = per_task
            .into_iter()
            .map(|(task_id, mut examples)| {
                examples.shuffle(rng);
                let mut batches = Vec::with_capacity(examples.len().div_ceil(batch_size));
                let mut it = examples.into_iter().peekable();
                while it.peek().is_some() {
                    batches.push(MiniBatch {
                        examples: it.by_ref().take(batch_size).collect(),
                        task_id,
                    });
                }
                (task_id, batches)
            })
            .collect();
        Ok(Self {
            client_id,
            tasks,
            task_cursor: 0,
            batch_cursor: 0,
            batches_in_task: 0,
        })
    }

    /// Batches consumed so far in the current task.
    pub fn bn(&self) -> usize {
        self.batches_in_task
    }

    pub fn current_task(&self) -> Option<usize> {
        self.tasks.get(self.task_cursor).map(|(id, _)| *id)
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Number of batches task index `task` was built with.
    pub fn batches_in(&self, task: usize) -> usize {
        self.tasks.get(task).map_or(0, |(_, b)| b.len())
    }

    pub fn next_batch(&mut self) -> StreamEvent<T> {
        let Some((task_id, batches)) = self.tasks.get_mut(self.task_cursor) else {
            return StreamEvent::EndOfStream;
        };
        if self.batch_cursor < batches.len() {
            let batch = std::mem::replace(
                &mut batches[self.batch_cursor],
                MiniBatch {
                    examples: Vec::new(),
                    task_id: *task_id,
                },
            );
            self.batch_cursor += 1;
            self.batches_in_task += 1;
            StreamEvent::Batch(batch)
        } else {
            let task_id = *task_id;
            self.task_cursor += 1;
            self.batch_cursor = 0;
            self.batches_in_task = 0;
            StreamEvent::EndOfTask { task_id }
        }
    }
}

/// Gaussian class clusters around centers drawn from `N(0, spread²·I)`.
pub fn synth_gaussian_blobs<T: Scalar, R: Rng + ?Sized>(
    class_sizes: &[usize],
    dim: usize,
    class_center_spread: f64,
    cluster_sigma: f64,
    rng: &mut R,
) -> Result<Vec<LabeledExample<T>>> {
    if dim < 2 {
        return Err(Error::config("dim", "must be at least 2"));
    }
    if class_sizes.iter().any(|&n| n < 1) {
        return Err(Error::config("samples_per_class", "must be at least 1"));
    }
    if !(class_center_spread >= 0.0 && cluster_sigma >= 0.0) {
        return Err(Error::config("spread", "must be nonnegative"));
    }
    let center_dist = Normal::new(0.0, class_center_spread).expect("nonnegative spread");
    let noise = Normal::new(0.0, cluster_sigma).expect("nonnegative sigma");
    let centers: Vec<Vec<f64>> = class_sizes
        .iter()
        .map(|_| (0..dim).map(|_| center_dist.sample(rng)).collect())
        .collect();
    let mut out = Vec::with_capacity(class_sizes.iter().sum());
    for (label, (&n, center)) in class_sizes.iter().zip(&centers).enumerate() {
        for _ in 0..n {
            let features = center.iter().map(|&mu| T::lit(mu + noise.sample(rng))).collect();
            out.push(LabeledExample {
                id: out.len(),
                features,
                label,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    #[default]
    Csv,
    Binary,
}

fn dataset_err(row: usize, message: impl Into<String>) -> Error {
    Error::Dataset {
        row,
        message: message.into(),
    }
}

/// Reads `label,f1,...,fd` rows (CSV) or the packed little-endian layout:
/// `u32 count, u32 dim`, then per record `u32 label` and `dim` × `f32`.
pub fn load_vector_dataset<T: Scalar>(path: &Path, format: DatasetFormat) -> Result<Vec<LabeledExample<T>>> {
    let bytes = fs::read(path).map_err(|e| Error::io("reading dataset", path, e))?;
    match format {
        DatasetFormat::Csv => parse_csv(&bytes),
        DatasetFormat::Binary => parse_binary(&bytes),
    }
}

fn parse_csv<T: Scalar>(bytes: &[u8]) -> Result<Vec<LabeledExample<T>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let mut out: Vec<LabeledExample<T>> = Vec::new();
    let mut dim = None;
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| dataset_err(row, e.to_string()))?;
        if record.len() < 2 {
            return Err(dataset_err(row, "expected a label and at least one feature"));
        }
        let label: usize = record[0]
            .parse()
            .map_err(|_| dataset_err(row, format!("bad label `{}`", &record[0])))?;
        let features = record
            .iter()
            .skip(1)
            .map(|field| {
                field
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .map(T::lit)
                    .ok_or_else(|| dataset_err(row, format!("bad feature `{field}`")))
            })
            .collect::<Result<Vec<T>>>()?;
        let expected = *dim.get_or_insert(features.len());
        if features.len() != expected {
            return Err(dataset_err(row, format!("expected {expected} features, found {}", features.len())));
        }
        out.push(LabeledExample {
            id: row,
            features,
            label,
        });
    }
    Ok(out)
}

fn parse_binary<T: Scalar>(bytes: &[u8]) -> Result<Vec<LabeledExample<T>>> {
    if bytes.is_empty() {
        return Ok(Vec::new());
    }
    let word = |at: usize, row: usize| -> Result<[u8; 4]> {
        bytes
            .get(at..at + 4)
            .map(|s| s.try_into().expect("four bytes"))
            .ok_or_else(|| dataset_err(row, "truncated file"))
    };
    let count = u32::from_le_bytes(word(0, 0)?) as usize;
    let dim = u32::from_le_bytes(word(4, 0)?) as usize;
    let record_len = 4 * (dim + 1);
    let mut out = Vec::with_capacity(count);
    for row in 0..count {
        let base = 8 + row * record_len;
        let label = u32::from_le_bytes(word(base, row)?) as usize;
        let features = (0..dim)
            .map(|j| {
                let v = f32::from_le_bytes(word(base + 4 * (j + 1), row)?);
                if v.is_finite() {
                    Ok(T::lit(f64::from(v)))
                } else {
                    Err(dataset_err(row, "non-finite feature"))
                }
            })
            .collect::<Result<Vec<T>>>()?;
        out.push(LabeledExample { id: row, features, label });
    }
    if bytes.len() != 8 + count * record_len {
        return Err(dataset_err(count, "trailing bytes after last record"));
    }
    Ok(out)
}

pub fn save_vector_dataset<T: Scalar>(path: &Path, format: DatasetFormat, examples: &[LabeledExample<T>]) -> Result<()> {
    let mut buf = Vec::new();
    match format {
        DatasetFormat::Csv => {
            for ex in examples {
                write!(buf, "{}", ex.label).expect("write to vec");
                for v in &ex.features {
                    write!(buf, ",{}", v.to_f64_lossy()).expect("write to vec");
                }
                buf.push(b'\n');
            }
        }
        DatasetFormat::Binary => {
            let dim = examples.first().map_or(0, |e| e.features.len());
            let to_u32 = |n: usize, what: &str| {
                u32::try_from(n).map_err(|_| Error::InvalidArgument(format!("{what} exceeds u32")))
            };
            buf.extend(to_u32(examples.len(), "record count")?.to_le_bytes());
            buf.extend(to_u32(dim, "dimension")?.to_le_bytes());
            for (row, ex) in examples.iter().enumerate() {
                if ex.features.len() != dim {
                    return Err(dataset_err(row, "inconsistent dimension"));
                }
                buf.extend(to_u32(ex.label, "label")?.to_le_bytes());
                for v in &ex.features {
                    buf.extend((v.to_f64_lossy() as f32).to_le_bytes());
                }
            }
        }
    }
    fs::write(path, buf).map_err(|e| Error::io("writing dataset", path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn examples(n: usize) -> Vec<LabeledExample<f64>> {
        (0..n)
            .map(|i| LabeledExample {
                id: i,
                features: vec![i as f64, 0.0],
                label: i % 3,
            })
            .collect()
    }

    #[test]
    fn random_assignment_partitions_classes() {
        let sizes: Vec<(usize, usize)> = (0..10).map(|c| (c, 50)).collect();
        let a = assign_classes_to_tasks(&sizes, 5, TaskAssignment::RandomShuffle, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = assign_classes_to_tasks(&sizes, 5, TaskAssignment::RandomShuffle, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        let mut all = BTreeSet::new();
        for t in &a {
            assert_eq!(t.classes.len(), 2);
            for &c in &t.classes {
                assert!(all.insert(c));
            }
        }
        assert_eq!(all.len(), 10);
    }

    #[test]
    fn size_descending_assignment() {
        let sizes = [(0, 100), (1, 90), (2, 10), (3, 5)];
        let tasks = assign_classes_to_tasks(&sizes, 2, TaskAssignment::SizeDescending, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(tasks[0].classes, vec![0, 1]);
        assert_eq!(tasks[1].classes, vec![2, 3]);
        assert!(assign_classes_to_tasks(&sizes, 5, TaskAssignment::SizeDescending, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn partition_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let parts = partition_to_clients(examples(10), 5, &mut rng).unwrap();
        assert!(parts.iter().all(|p| p.len() == 2));
        let parts = partition_to_clients(examples(11), 5, &mut rng).unwrap();
        let sizes: Vec<usize> = parts.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![3, 2, 2, 2, 2]);
        let mut ids: Vec<usize> = parts.iter().flatten().map(|e| e.id).collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..11).collect::<Vec<_>>());
    }

    #[test]
    fn stream_yields_each_batch_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ClientStream::new(0, vec![(0, examples(25))], 10, &mut rng).unwrap();
        let mut sizes = Vec::new();
        while let StreamEvent::Batch(b) = s.next_batch() {
            sizes.push(b.len());
        }
        assert_eq!(sizes, vec![10, 10, 5]);
        assert_eq!(s.next_batch(), StreamEvent::EndOfStream);
        assert_eq!(s.next_batch(), StreamEvent::EndOfStream);
    }

    #[test]
    fn bn_counter_resets_at_task_boundary() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ClientStream::new(0, vec![(0, examples(30)), (1, examples(5))], 10, &mut rng).unwrap();
        for _ in 0..3 {
            assert!(matches!(s.next_batch(), StreamEvent::Batch(_)));
        }
        assert_eq!(s.bn(), 3);
        assert_eq!(s.next_batch(), StreamEvent::EndOfTask { task_id: 0 });
        assert_eq!(s.bn(), 0);
        assert_eq!(s.current_task(), Some(1));
        match s.next_batch() {
            StreamEvent::Batch(b) => assert_eq!((b.task_id, b.len()), (1, 5)),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(s.next_batch(), StreamEvent::EndOfTask { task_id: 1 });
        assert_eq!(s.next_batch(), StreamEvent::EndOfStream);
    }

    #[test]
    fn blobs_degenerate_and_deterministic() {
        let a: Vec<LabeledExample<f64>> =
            synth_gaussian_blobs(&[5, 5], 3, 2.0, 0.0, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        for c in 0..2 {
            let members: Vec<_> = a.iter().filter(|e| e.label == c).collect();
            for m in &members {
                for (x, y) in m.features.iter().zip(&members[0].features) {
                    assert!((x - y).abs() < 1e-6);
                }
            }
        }
        let b = synth_gaussian_blobs::<f64, _>(&[5, 5], 3, 2.0, 0.0, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        assert!(synth_gaussian_blobs::<f64, _>(&[5], 1, 2.0, 1.0, &mut ChaCha8Rng::seed_from_u64(4)).is_err());
    }

    #[test]
    fn blob_means_follow_clt_bound() {
        // Recover the centers by redrawing them from the same seed.
        let seed = 99;
        let data: Vec<LabeledExample<f64>> =
            synth_gaussian_blobs(&[1000, 1000], 4, 3.0, 0.5, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, 3.0).unwrap();
        let centers: Vec<Vec<f64>> = (0..2).map(|_| (0..4).map(|_| dist.sample(&mut rng)).collect()).collect();
        for (c, center) in centers.iter().enumerate() {
            for d in 0..4 {
                let mean = data.iter().filter(|e| e.label == c).map(|e| e.features[d]).sum::<f64>() / 1000.0;
                assert!((mean - center[d]).abs() < 4.0 * 0.5 / 1000f64.sqrt());
            }
        }
    }

    #[test]
    fn test_split_is_per_class() {
        let (train, test) = split_train_test(examples(30), 0.2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(test.len(), 6);
        assert_eq!(train.len(), 24);
        for c in 0..3 {
            assert_eq!(test.iter().filter(|e| e.label == c).count(), 2);
        }
        assert!(split_train_test(examples(3), 1.0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn csv_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        fs::write(&path, "1,0.5,-0.25\n").unwrap();
        let got: Vec<LabeledExample<f64>> = load_vector_dataset(&path, DatasetFormat::Csv).unwrap();
        assert_eq!(got, vec![LabeledExample { id: 0, features: vec![0.5, -0.25], label: 1 }]);

        fs::write(&path, "").unwrap();
        assert!(load_vector_dataset::<f64>(&path, DatasetFormat::Csv).unwrap().is_empty());

        fs::write(&path, "0,1,2\n1,3\n").unwrap();
        match load_vector_dataset::<f64>(&path, DatasetFormat::Csv) {
            Err(Error::Dataset { row, .. }) => assert_eq!(row, 1),
            other => panic!("expected dataset error, got {other:?}"),
        }
        fs::write(&path, "0,1,x\n").unwrap();
        assert!(matches!(load_vector_dataset::<f64>(&path, DatasetFormat::Csv), Err(Error::Dataset { row: 0, .. })));
    }

    #[test]
    fn binary_truncation_reports_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        save_vector_dataset(&path, DatasetFormat::Binary, &examples(4)).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_vector_dataset::<f64>(&path, DatasetFormat::Binary), Err(Error::Dataset { row: 3, .. })));
        fs::write(&path, b"").unwrap();
        assert!(load_vector_dataset::<f64>(&path, DatasetFormat::Binary).unwrap().is_empty());
    }
}
