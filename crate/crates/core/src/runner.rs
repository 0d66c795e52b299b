//! Experiment orchestration: data preparation, the lockstep client/server
//! loop, evaluation at task boundaries and report emission.
//!
//! All randomness derives from the master seed through named sub-streams
//! ([`substream`]), indexed per client where a client owns the draws. Client
//! ticks touch only client-owned state, so serial and parallel execution
//! produce identical results.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{DataSource, ExperimentConfig};
use crate::error::{Error, Result};
use crate::federation::{broadcast, class_weighted_avg, fedavg, AggregationStrategy, GlobalState, RoundReport, RoundRecord};
use crate::memory::MemoryBuffer;
use crate::metrics::{avg_last_accuracy, avg_last_forgetting, evaluate_model, AccuracyMatrix};
use crate::model::{fedprox_augment, init_parameters, loss_and_grad, ModelConfig, OptimizerState, ParameterVector};
use crate::stream::{
    assign_classes_to_tasks, load_vector_dataset, partition_to_clients, split_train_test, synth_gaussian_blobs,
    ClientStream, LabeledExample, StreamEvent, TaskSpec,
};
use crate::uncertainty::{score_sample, PerturbationSpec, UncertaintyMetric};

/// Named random sub-streams derived from the master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Substream {
    Data = 1,
    Split = 2,
    Tasks = 3,
    Partition = 4,
    Init = 5,
    ClientOrder = 6,
    Perturb = 7,
    Replay = 8,
    MemorySelect = 9,
}

pub fn substream(master_seed: u64, which: Substream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(((which as u64) << 32) | (index & 0xffff_ffff));
    rng
}

struct Prepared {
    model: ModelConfig,
    tasks: Vec<TaskSpec>,
    /// Per task, the test examples of its classes.
    test_sets: Vec<Vec<LabeledExample<f64>>>,
    /// Per client, per task (in order), that client's share of the task.
    client_data: Vec<Vec<(usize, Vec<LabeledExample<f64>>)>>,
    train_ids: Vec<usize>,
}

fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    let seed = config.seed;
    let d = &config.data;
    let examples: Vec<LabeledExample<f64>> = match d.source {
        DataSource::Synthetic => synth_gaussian_blobs(
            &vec![d.samples_per_class; d.num_classes],
            d.dim,
            d.spread,
            d.sigma,
            &mut substream(seed, Substream::Data, 0),
        )?,
        DataSource::File => {
            let path = d.path.as_ref().ok_or_else(|| Error::config("data.path", "missing"))?;
            load_vector_dataset(path, d.format)?
        }
    };
    let first = examples.first().ok_or(Error::Empty("dataset"))?;
    let input_dim = first.features.len();
    let num_classes = match d.source {
        DataSource::Synthetic => d.num_classes,
        DataSource::File => examples.iter().map(|e| e.label).max().unwrap_or(0) + 1,
    }
    .max(2);

    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for e in &examples {
        *sizes.entry(e.label).or_default() += 1;
    }
    let class_sizes: Vec<(usize, usize)> = sizes.into_iter().collect();
    let tasks = assign_classes_to_tasks(&class_sizes, d.tasks, d.assignment, &mut substream(seed, Substream::Tasks, 0))?;

    let (train, test) = split_train_test(examples, d.test_fraction, &mut substream(seed, Substream::Split, 0))?;
    let train_ids = train.iter().map(|e| e.id).collect();

    let task_of: BTreeMap<usize, usize> = tasks
        .iter()
        .enumerate()
        .flat_map(|(t, spec)| spec.classes.iter().map(move |&c| (c, t)))
        .collect();
    let mut train_by_task: Vec<Vec<LabeledExample<f64>>> = vec![Vec::new(); tasks.len()];
    for e in train {
        train_by_task[task_of[&e.label]].push(e);
    }
    let mut test_sets: Vec<Vec<LabeledExample<f64>>> = vec![Vec::new(); tasks.len()];
    for e in test {
        test_sets[task_of[&e.label]].push(e);
    }

    let k = config.federation.clients;
    let mut client_data: Vec<Vec<(usize, Vec<LabeledExample<f64>>)>> = vec![Vec::new(); k];
    for (t, data) in train_by_task.into_iter().enumerate() {
        let parts = partition_to_clients(data, k, &mut substream(seed, Substream::Partition, t as u64))?;
        for (client, part) in parts.into_iter().enumerate() {
            client_data[client].push((tasks[t].task_id, part));
        }
    }

    let model = ModelConfig::new(
        input_dim,
        config.training.hidden.clone(),
        num_classes,
        substream(seed, Substream::Init, 0).next_u64(),
    );
    model.validate()?;
    Ok(Prepared {
        model,
        tasks,
        test_sets,
        client_data,
        train_ids,
    })
}

/// Everything a client worker needs that is shared read-only.
struct TickContext<'a> {
    model: &'a ModelConfig,
    batch_size: usize,
    metric: UncertaintyMetric,
    perturbation: PerturbationSpec,
    rescore_stored: bool,
    fedprox_mu: Option<f64>,
}

struct Client {
    id: usize,
    stream: ClientStream<f64>,
    params: ParameterVector<f64>,
    optimizer: OptimizerState<f64>,
    memory: MemoryBuffer<f64>,
    /// Last global parameters received; anchor of the proximal term.
    anchor: ParameterVector<f64>,
    perturb_rng: ChaCha8Rng,
    replay_rng: ChaCha8Rng,
    memory_rng: ChaCha8Rng,
    classes_since_round: BTreeSet<usize>,
    at_boundary: bool,
    /// Ids of every example that entered a gradient step from the live stream.
    consumed: Vec<usize>,
    replayed: usize,
}

enum Tick {
    Trained,
    Idle,
}

impl Client {
    fn tick(&mut self, ctx: &TickContext<'_>, first_task: bool) -> Result<Tick> {
        if self.at_boundary {
            return Ok(Tick::Idle);
        }
        let batch = match self.stream.next_batch() {
            StreamEvent::Batch(b) => b,
            StreamEvent::EndOfTask { .. } | StreamEvent::EndOfStream => {
                self.at_boundary = true;
                return Ok(Tick::Idle);
            }
        };

        let mut combined = batch.examples.clone();
        if !first_task {
            let replay = self.memory.sample_replay(ctx.batch_size, batch.task_id, &mut self.replay_rng);
            self.replayed += replay.len();
            combined.extend(replay.into_iter().map(|s| s.example));
        }
        let (_, mut grad) = loss_and_grad(&self.params, ctx.model, &combined)?;
        if let Some(mu) = ctx.fedprox_mu {
            grad = fedprox_augment(&grad, self.params.values(), self.anchor.values(), mu)?;
        }
        self.optimizer.step(&mut self.params, &grad)?;
        self.consumed.extend(batch.examples.iter().map(|e| e.id));
        self.classes_since_round.extend(batch.examples.iter().map(|e| e.label));

        let policy = self.memory.policy();
        let (params, perturb_rng) = (&self.params, &mut self.perturb_rng);
        let mut scorer = |x: &[f64]| score_sample(params, ctx.model, x, &ctx.perturbation, ctx.metric, &mut *perturb_rng);
        let scores: Vec<f64> = if policy.uses_scores() {
            batch.examples.iter().map(|e| scorer(&e.features)).collect::<Result<_>>()?
        } else {
            vec![0.0; batch.len()]
        };
        if ctx.rescore_stored {
            self.memory.update_rescored(&batch, &scores, scorer, &mut self.memory_rng)?;
        } else {
            self.memory.update(&batch, &scores, &mut self.memory_rng)?;
        }
        Ok(Tick::Trained)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ClientMetrics {
    pub client: usize,
    #[serde(rename = "A_k")]
    pub accuracy: f64,
    #[serde(rename = "F_k")]
    pub forgetting: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AuditReport {
    pub streamed_examples: usize,
    pub live_gradient_uses: usize,
    pub replayed_samples: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunResult {
    #[serde(rename = "A")]
    pub accuracy: f64,
    #[serde(rename = "F")]
    pub forgetting: Option<f64>,
    pub per_client: Vec<ClientMetrics>,
    pub matrices: Vec<AccuracyMatrix<f64>>,
    pub rounds: Vec<RoundRecord>,
    pub tasks: Vec<TaskSpec>,
    pub audit: AuditReport,
    pub wall_clock_secs: f64,
    pub config: ExperimentConfig,
    pub seed: u64,
}

#[derive(Serialize)]
struct Summary<'a> {
    #[serde(rename = "A")]
    accuracy: f64,
    #[serde(rename = "F")]
    forgetting: Option<f64>,
    seed: u64,
    num_rounds: usize,
    tasks: &'a [TaskSpec],
    audit: &'a AuditReport,
    config: &'a ExperimentConfig,
}

impl RunResult {
    /// Contents of `summary.json`. Excludes wall-clock time so reruns with
    /// the same seed are byte-identical.
    pub fn summary_json(&self) -> String {
        let summary = Summary {
            accuracy: self.accuracy,
            forgetting: self.forgetting,
            seed: self.seed,
            num_rounds: self.rounds.len(),
            tasks: &self.tasks,
            audit: &self.audit,
            config: &self.config,
        };
        serde_json::to_string_pretty(&summary).expect("summary serializes")
    }

    pub fn per_client_csv(&self) -> String {
        let mut out = String::from("client,A_k,F_k\n");
        for c in &self.per_client {
            let f = c.forgetting.map_or(String::new(), |f| f.to_string());
            writeln!(out, "{},{},{}", c.client, c.accuracy, f).expect("write to string");
        }
        out
    }

    /// Header `after_task,task_0,...`; cells above the diagonal are empty.
    pub fn matrix_csv(&self, client: usize) -> Option<String> {
        let m = self.matrices.get(client)?;
        let t = m.num_tasks();
        let mut out = String::from("after_task");
        for i in 0..t {
            write!(out, ",task_{i}").expect("write to string");
        }
        out.push('\n');
        for (after, row) in m.rows().iter().enumerate() {
            write!(out, "{after}").expect("write to string");
            for i in 0..t {
                match row.get(i).copied().flatten() {
                    Some(a) => write!(out, ",{a}").expect("write to string"),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        Some(out)
    }

    pub fn rounds_log(&self) -> String {
        self.rounds.iter().map(|r| format!("{r}\n")).collect()
    }
}

/// One experiment: clients, server state and the evaluation data.
pub struct Simulation {
    config: ExperimentConfig,
    model: ModelConfig,
    tasks: Vec<TaskSpec>,
    test_sets: Vec<Vec<LabeledExample<f64>>>,
    train_ids: Vec<usize>,
    clients: Vec<Client>,
    global: GlobalState<f64>,
    parallel: bool,
}

impl Simulation {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let prepared = prepare(&config)?;
        let seed = config.seed;
        let initial: ParameterVector<f64> = init_parameters(&prepared.model)?;
        let clients = prepared
            .client_data
            .into_iter()
            .enumerate()
            .map(|(id, per_task)| {
                let idx = id as u64;
                Ok(Client {
                    id,
                    stream: ClientStream::new(
                        id,
                        per_task,
                        config.training.batch_size,
                        &mut substream(seed, Substream::ClientOrder, idx),
                    )?,
                    params: initial.clone(),
                    optimizer: OptimizerState::new(config.training.optimizer, config.training.learning_rate, initial.len())?,
                    memory: MemoryBuffer::new(config.memory.capacity, config.memory.policy),
                    anchor: initial.clone(),
                    perturb_rng: substream(seed, Substream::Perturb, idx),
                    replay_rng: substream(seed, Substream::Replay, idx),
                    memory_rng: substream(seed, Substream::MemorySelect, idx),
                    classes_since_round: BTreeSet::new(),
                    at_boundary: false,
                    consumed: Vec::new(),
                    replayed: 0,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            model: prepared.model,
            tasks: prepared.tasks,
            test_sets: prepared.test_sets,
            train_ids: prepared.train_ids,
            clients,
            global: GlobalState::new(initial),
            config,
            parallel: false,
        })
    }

    /// Run client ticks and evaluation on the rayon pool. Results are
    /// identical to serial execution.
    pub fn with_parallel(mut self, parallel: bool) -> Self {
        self.parallel = parallel;
        self
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.model
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn memory(&self, client: usize) -> Option<&MemoryBuffer<f64>> {
        self.clients.get(client).map(|c| &c.memory)
    }

    pub fn client_params(&self, client: usize) -> Option<&ParameterVector<f64>> {
        self.clients.get(client).map(|c| &c.params)
    }

    fn run_tick(&mut self, ctx: &TickContext<'_>, first_task: bool) -> Result<bool> {
        let outcomes: Vec<Result<Tick>> = if self.parallel {
            self.clients.par_iter_mut().map(|c| c.tick(ctx, first_task)).collect()
        } else {
            self.clients.iter_mut().map(|c| c.tick(ctx, first_task)).collect()
        };
        let mut any = false;
        for outcome in outcomes {
            any |= matches!(outcome?, Tick::Trained);
        }
        Ok(any)
    }

    fn communicate(&mut self, task: usize, bn: usize) -> Result<RoundRecord> {
        let fed = &self.config.federation;
        let theta_new = match fed.aggregation {
            AggregationStrategy::FedAvg | AggregationStrategy::FedProx => {
                let refs: Vec<&ParameterVector<f64>> = self.clients.iter().map(|c| &c.params).collect();
                fedavg(&refs, None)?
            }
            AggregationStrategy::ClassWeighted => class_weighted_avg(&RoundReport {
                params: self.clients.iter().map(|c| c.params.clone()).collect(),
                classes: self.clients.iter().map(|c| c.classes_since_round.clone()).collect(),
            })?,
        };
        let theta_g = if fed.temporal_smoothing {
            self.global.temporal_smooth(&theta_new)?
        } else {
            theta_new
        };
        let record = RoundRecord {
            round: self.global.round,
            task,
            bn,
            client_classes: self.clients.iter_mut().map(|c| std::mem::take(&mut c.classes_since_round)).collect(),
            checksum: theta_g.checksum(),
        };
        broadcast(&theta_g, self.clients.iter_mut().map(|c| &mut c.params))?;
        for c in &mut self.clients {
            c.anchor.copy_from(&theta_g)?;
            if self.config.training.reset_optimizer_on_sync {
                c.optimizer.reset();
            }
        }
        self.global.rotate(theta_g);
        Ok(record)
    }

    fn evaluate(&self, after_task: usize, matrices: &mut [AccuracyMatrix<f64>]) -> Result<()> {
        let evaluate_client = |c: &Client| -> Result<Vec<f64>> {
            self.test_sets[..=after_task]
                .iter()
                .map(|test| evaluate_model(&c.params, &self.model, test))
                .collect()
        };
        let rows: Vec<Result<Vec<f64>>> = if self.parallel {
            self.clients.par_iter().map(evaluate_client).collect()
        } else {
            self.clients.iter().map(evaluate_client).collect()
        };
        for (matrix, row) in matrices.iter_mut().zip(rows) {
            for (i, acc) in row?.into_iter().enumerate() {
                matrix.record(after_task, i, acc)?;
            }
        }
        Ok(())
    }

    fn audit(&self) -> Result<AuditReport> {
        let mut uses: BTreeMap<usize, usize> = self.train_ids.iter().map(|&id| (id, 0)).collect();
        let mut total = 0;
        for c in &self.clients {
            for id in &c.consumed {
                total += 1;
                match uses.get_mut(id) {
                    Some(n) => *n += 1,
                    None => return Err(Error::Audit(format!("example {id} is not part of the training split"))),
                }
            }
        }
        if let Some((id, n)) = uses.iter().find(|(_, &n)| n != 1) {
            return Err(Error::Audit(format!("example {id} fed the optimizer {n} times from the stream")));
        }
        Ok(AuditReport {
            streamed_examples: uses.len(),
            live_gradient_uses: total,
            replayed_samples: self.clients.iter().map(|c| c.replayed).sum(),
        })
    }

    /// Runs the whole stream. Call once per simulation.
    pub fn run(&mut self) -> Result<RunResult> {
        let started = Instant::now();
        let cfg = self.config.clone();
        let model = self.model.clone();
        let ctx = TickContext {
            model: &model,
            batch_size: cfg.training.batch_size,
            metric: cfg.memory.metric,
            perturbation: cfg.perturbation.spec(),
            rescore_stored: cfg.memory.rescore_stored,
            fedprox_mu: (cfg.federation.aggregation == AggregationStrategy::FedProx).then_some(cfg.federation.fedprox_mu),
        };
        let schedule = cfg.federation.schedule();
        let num_tasks = self.tasks.len();
        let mut matrices = vec![AccuracyMatrix::new(num_tasks); self.clients.len()];
        let mut rounds = Vec::new();

        for task in 0..num_tasks {
            for c in &mut self.clients {
                c.at_boundary = false;
            }
            let mut bn = 0;
            while self.run_tick(&ctx, task == 0)? {
                bn += 1;
                if schedule.should_communicate(bn) {
                    rounds.push(self.communicate(task, bn)?);
                }
            }
            self.evaluate(task, &mut matrices)?;
        }
        for c in &mut self.clients {
            if !matches!(c.stream.next_batch(), StreamEvent::EndOfStream) {
                return Err(Error::Audit(format!("client {} stream not exhausted", c.id)));
            }
        }
        let audit = self.audit()?;

        let per_client = matrices
            .iter()
            .enumerate()
            .map(|(client, m)| {
                Ok(ClientMetrics {
                    client,
                    accuracy: m.last_accuracy()?,
                    forgetting: if num_tasks >= 2 { Some(m.last_forgetting()?) } else { None },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RunResult {
            accuracy: avg_last_accuracy(&matrices)?,
            forgetting: if num_tasks >= 2 { Some(avg_last_forgetting(&matrices)?) } else { None },
            per_client,
            matrices,
            rounds,
            tasks: self.tasks.clone(),
            audit,
            wall_clock_secs: started.elapsed().as_secs_f64(),
            seed: cfg.seed,
            config: cfg,
        })
    }
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<RunResult> {
    Simulation::new(config.clone())?.run()
}

pub fn run_experiment_parallel(config: &ExperimentConfig) -> Result<RunResult> {
    Simulation::new(config.clone())?.with_parallel(true).run()
}

/// Writes `summary.json`, `per_client.csv`, `acc_matrix_<k>.csv` and
/// `rounds.log` into `dir`. Refuses a non-empty directory unless `force`.
pub fn emit_report(result: &RunResult, dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(|e| Error::io("reading output dir", dir, e))?;
        if entries.next().is_some() && !force {
            return Err(Error::InvalidArgument(format!(
                "output directory {} is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io("creating output dir", dir, e))?;
    let write = |name: String, contents: String| {
        let path = dir.join(name);
        fs::write(&path, contents).map_err(|e| Error::io("writing report", path, e))
    };
    write("summary.json".into(), result.summary_json())?;
    write("per_client.csv".into(), result.per_client_csv())?;
    for k in 0..result.matrices.len() {
        write(format!("acc_matrix_{k}.csv"), result.matrix_csv(k).expect("client index in range"))?;
    }
    write("rounds.log".into(), result.rounds_log())?;
    Ok(())
}
