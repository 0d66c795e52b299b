use std::collections::BTreeSet;
use std::sync::Arc;

use ofcl::federation::{fedavg, GlobalState};
use ofcl::memory::{MemoryBuffer, MemoryPolicy};
use ofcl::metrics::{avg_last_accuracy, avg_last_forgetting, AccuracyMatrix};
use ofcl::model::{init_parameters, loss_and_grad, Block, Layout, ModelConfig, ParameterVector};
use ofcl::stream::{load_vector_dataset, save_vector_dataset, DatasetFormat, LabeledExample, MiniBatch};
use ofcl::uncertainty::{
    bregman_information, entropy_score, least_confidence, margin_sampling, ratio_confidence, stable_lse, LogitSet,
    ProbabilitySet,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn logit_rows() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..10, 2usize..12)
        .prop_flat_map(|(p, c)| prop::collection::vec(prop::collection::vec(-40.0f64..40.0, c), p))
}

fn prob_rows() -> impl Strategy<Value = Vec<Vec<f64>>> {
    logit_rows().prop_map(|rows| LogitSet::new(rows).unwrap().to_probabilities().rows().map(<[f64]>::to_vec).collect())
}

fn flat(values: Vec<f64>) -> ParameterVector<f64> {
    let layout = Arc::new(Layout {
        blocks: vec![Block {
            shape: vec![values.len()],
            offset: 0,
        }],
    });
    ParameterVector::from_parts(values, layout).unwrap()
}

fn matrix(values: &[f64], tasks: usize) -> AccuracyMatrix<f64> {
    let mut m = AccuracyMatrix::new(tasks);
    let mut it = values.iter();
    for t in 0..tasks {
        for i in 0..=t {
            m.record(t, i, *it.next().unwrap()).unwrap();
        }
    }
    m
}

proptest! {
    #[test]
    fn bi_nonnegative_and_row_shift_invariant(rows in logit_rows(), shifts in prop::collection::vec(-30.0f64..30.0, 10)) {
        let bi = bregman_information(&LogitSet::new(rows.clone()).unwrap());
        prop_assert!(bi >= 0.0);
        let shifted: Vec<Vec<f64>> = rows.iter().zip(&shifts).map(|(r, s)| r.iter().map(|v| v + s).collect()).collect();
        let bi2 = bregman_information(&LogitSet::new(shifted).unwrap());
        prop_assert!((bi - bi2).abs() < 1e-9);
    }

    #[test]
    fn lse_shift_equivariant(x in prop::collection::vec(-500.0f64..500.0, 1..20), s in -500.0f64..500.0) {
        let a = stable_lse(&x).unwrap();
        let shifted: Vec<f64> = x.iter().map(|v| v + s).collect();
        let b = stable_lse(&shifted).unwrap();
        prop_assert!((b - a - s).abs() < 1e-9 * (1.0 + a.abs() + s.abs()));
        prop_assert!(a >= x.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    }

    #[test]
    fn scores_in_range_and_row_order_invariant(rows in prob_rows(), seed in any::<u64>()) {
        let c = rows[0].len() as f64;
        let ps = ProbabilitySet::new(rows.clone()).unwrap();
        let scores = [least_confidence(&ps), margin_sampling(&ps), ratio_confidence(&ps).unwrap(), entropy_score(&ps)];
        let tol = 1e-12;
        for s in &scores[..3] {
            prop_assert!(*s >= -tol && *s <= 1.0 + tol);
        }
        prop_assert!(scores[3] >= -tol && scores[3] <= c.ln() + tol);

        let mut permuted = rows;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(permuted.as_mut_slice(), &mut rng);
        let ps2 = ProbabilitySet::new(permuted).unwrap();
        let scores2 = [least_confidence(&ps2), margin_sampling(&ps2), ratio_confidence(&ps2).unwrap(), entropy_score(&ps2)];
        for (a, b) in scores.iter().zip(&scores2) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_nonnegative_and_batch_order_free(
        seed in any::<u64>(),
        batch in prop::collection::vec((prop::collection::vec(-3.0f64..3.0, 4), 0usize..3), 1..12),
        perm_seed in any::<u64>(),
    ) {
        let config = ModelConfig::new(4, vec![5], 3, seed);
        let params: ParameterVector<f64> = init_parameters(&config).unwrap();
        let (loss, grad) = loss_and_grad(&params, &config, &batch).unwrap();
        prop_assert!(loss >= 0.0);
        let mut shuffled = batch.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
        let (loss2, grad2) = loss_and_grad(&params, &config, &shuffled).unwrap();
        prop_assert_eq!(loss.to_bits(), loss2.to_bits());
        prop_assert!(grad.iter().zip(&grad2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn fedavg_ignores_client_order(
        clients in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 8), 1..6),
        perm_seed in any::<u64>(),
    ) {
        let params: Vec<ParameterVector<f64>> = clients.into_iter().map(flat).collect();
        let refs: Vec<&ParameterVector<f64>> = params.iter().collect();
        let a = fedavg(&refs, None).unwrap();
        let mut shuffled = refs.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
        let b = fedavg(&shuffled, None).unwrap();
        prop_assert!(a.values().iter().zip(b.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn smoothing_lands_between_previous_and_new(
        prev in prop::collection::vec(-5.0f64..5.0, 6),
        new in prop::collection::vec(-5.0f64..5.0, 6),
    ) {
        let mut state = GlobalState::new(flat(vec![0.0; 6]));
        state.rotate(flat(prev.clone()));
        let out = state.temporal_smooth(&flat(new.clone())).unwrap();
        for ((o, p), n) in out.values().iter().zip(&prev).zip(&new) {
            prop_assert!(*o >= p.min(*n) && *o <= p.max(*n));
            prop_assert!((o - (p + n) / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn memory_never_exceeds_capacity(
        capacity in 0usize..40,
        policy in prop::sample::select(vec![MemoryPolicy::BottomK, MemoryPolicy::TopK, MemoryPolicy::Random, MemoryPolicy::ClassBalancedRandom]),
        batches in prop::collection::vec(prop::collection::vec((0usize..6, 0.0f64..1.0), 1..12), 1..40),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut buffer = MemoryBuffer::new(capacity, policy);
        let mut id = 0;
        for (task, batch) in batches.iter().enumerate() {
            let examples = batch.iter().map(|&(label, _)| { id += 1; LabeledExample { id, features: vec![0.0f64], label } }).collect();
            let scores: Vec<f64> = batch.iter().map(|&(_, s)| s).collect();
            buffer.update(&MiniBatch { examples, task_id: task / 5 }, &scores, &mut rng).unwrap();
            prop_assert!(buffer.len() <= capacity);
            let replay = buffer.sample_replay(10, task / 5, &mut rng);
            prop_assert!(replay.iter().all(|s| s.task_id != task / 5));
        }
    }

    #[test]
    fn averaged_metrics_ignore_client_order(
        clients in prop::collection::vec(prop::collection::vec(0.0f64..=1.0, 10), 1..6),
        perm_seed in any::<u64>(),
    ) {
        let matrices: Vec<AccuracyMatrix<f64>> = clients.iter().map(|v| matrix(v, 4)).collect();
        let mut shuffled = matrices.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
        let a = avg_last_accuracy(&matrices).unwrap();
        let f = avg_last_forgetting(&matrices).unwrap();
        prop_assert!((a - avg_last_accuracy(&shuffled).unwrap()).abs() < 1e-12);
        prop_assert!((f - avg_last_forgetting(&shuffled).unwrap()).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((-1.0..=1.0).contains(&f));
    }

    #[test]
    fn dataset_round_trip(
        rows in prop::collection::vec((0usize..9, prop::collection::vec(-1e3f64..1e3, 5)), 1..30),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let examples: Vec<LabeledExample<f64>> = rows
            .into_iter()
            .enumerate()
            .map(|(id, (label, features))| LabeledExample { id, features, label })
            .collect();
        let csv = dir.path().join("a.csv");
        let bin = dir.path().join("a.bin");
        let csv2 = dir.path().join("b.csv");
        save_vector_dataset(&csv, DatasetFormat::Csv, &examples).unwrap();
        let from_csv: Vec<LabeledExample<f64>> = load_vector_dataset(&csv, DatasetFormat::Csv).unwrap();
        save_vector_dataset(&bin, DatasetFormat::Binary, &from_csv).unwrap();
        let from_bin: Vec<LabeledExample<f64>> = load_vector_dataset(&bin, DatasetFormat::Binary).unwrap();
        save_vector_dataset(&csv2, DatasetFormat::Csv, &from_bin).unwrap();
        let back: Vec<LabeledExample<f64>> = load_vector_dataset(&csv2, DatasetFormat::Csv).unwrap();
        prop_assert_eq!(back.len(), examples.len());
        for (a, b) in examples.iter().zip(&back) {
            prop_assert_eq!(a.label, b.label);
            for (x, y) in a.features.iter().zip(&b.features) {
                prop_assert!((x - y).abs() <= f64::from(f32::EPSILON) * x.abs().max(1e-30));
            }
        }
    }
}

#[test]
fn replay_draws_only_from_earlier_tasks() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut buffer = MemoryBuffer::new(20, MemoryPolicy::BottomK);
    for task in 0..3usize {
        let examples = (0..10).map(|i| LabeledExample { id: task * 10 + i, features: vec![0.0f64], label: task }).collect();
        buffer.update(&MiniBatch { examples, task_id: task }, &[0.5; 10], &mut rng).unwrap();
    }
    let classes: BTreeSet<usize> = buffer.sample_replay(20, 2, &mut rng).iter().map(|s| s.example.label).collect();
    assert_eq!(classes, BTreeSet::from([0, 1]));
}
