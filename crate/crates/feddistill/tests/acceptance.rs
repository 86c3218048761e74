//! End-to-end acceptance gate. Each test covers one numbered claim and
//! prints a single PASS line with the measured quantities (visible with
//! `--nocapture`); failures abort with the offending numbers.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use feddistill::data::idx::load_idx_dataset;
use feddistill::data::partition::{dirichlet_partition, PartitionConfig};
use feddistill::data::synth::{synthetic_pair, SyntheticSpec};
use feddistill::data::Dataset;
use feddistill::distill::graph::composite_loss_graph;
use feddistill::distill::{
    decompose, few_kd, group_distill, kl_div, rich_kd, target_kd, ClassGroups,
    CompositeLossConfig, GroupDistillConfig,
};
use feddistill::federation::{
    aggregate, make_clients, run_experiment, ExperimentSetup, LocalHyper, LocalUpdate, Strategy,
};
use feddistill::metrics::{forgetting, rounds_to_reach, RoundHistory};
use feddistill::nn::tape::{finite_diff_check, taped_from_leaves};
use feddistill::nn::{checkpoint_bytes, record_model, ModelParams, Tape};
use feddistill::scalar::{Scalar, LOG_EPS};
use feddistill::seeding::derive_seed;
use feddistill::tensor::Tensor;

fn pass(n: usize, detail: &str) {
    println!("criterion {n:2}: PASS  {detail}");
}

/// Random probability row with every entry at least 1e-6.
fn random_distribution(c: usize, rng: &mut ChaCha8Rng) -> Vec<Scalar> {
    let raw: Vec<Scalar> = (0..c).map(|_| rng.random_range(0.01..1.0f64)).collect();
    let sum: Scalar = raw.iter().sum();
    let floor = 0.001 / c as Scalar;
    raw.iter().map(|v| 0.999 * v / sum + floor).collect()
}

fn random_groups(c: usize, rng: &mut ChaCha8Rng) -> ClassGroups {
    let rich: BTreeSet<usize> = (0..c).filter(|_| rng.random_range(0.0..1.0f64) < 0.5).collect();
    ClassGroups::from_rich_set(c, rich, 0.5).unwrap()
}

fn kl_term(p: Scalar, q: Scalar) -> Scalar {
    if p <= LOG_EPS {
        0.0
    } else {
        p * (p / q.max(LOG_EPS)).ln()
    }
}

#[test]
fn criterion_01_distillation_decomposition_identities() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xACC1);
    let mut worst_dkd = 0.0 as Scalar;
    let mut worst_lumped = 0.0 as Scalar;
    for trial in 0..1000 {
        let c = [3, 10, 100][trial % 3];
        let groups = random_groups(c, &mut rng);
        let teacher = random_distribution(c, &mut rng);
        let student = random_distribution(c, &mut rng);
        let target = rng.random_range(0..c);
        let t = decompose(&teacher, target, &groups);
        let s = decompose(&student, target, &groups);
        let full_kl = kl_div(&teacher, &student);

        // Splitting KL into a binary target/non-target part plus the scaled
        // KL over renormalized non-target entries is exact.
        let dkd = target_kd(&t, &s) + t.non_target_mass * kl_div(&t.non_target, &s.non_target);
        worst_dkd = worst_dkd.max((dkd - full_kl).abs());

        // With alpha_t = 1 and alpha_r = alpha_f = teacher non-target mass,
        // the group loss exceeds KL by exactly the two lumped-mass terms.
        let cfg = GroupDistillConfig {
            alpha_t: 1.0,
            alpha_r: t.non_target_mass,
            alpha_f: t.non_target_mass,
            temperature: 1.0,
        };
        let gd = group_distill(&teacher, &student, target, &groups, &cfg);
        let lump = t.non_target_mass
            * (kl_term(t.few_mass, s.few_mass) + kl_term(t.rich_mass, s.rich_mass));
        worst_lumped = worst_lumped.max((gd - full_kl - lump).abs());
    }
    assert!(worst_dkd < 1e-10, "target/non-target split identity off by {worst_dkd}");
    assert!(worst_lumped < 1e-10, "lumped-mass identity off by {worst_lumped}");
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 5.0, "identities took {secs:.1}s");
    pass(1, &format!("identity residuals {worst_dkd:.2e} / {worst_lumped:.2e} in {secs:.2}s"));
}

#[test]
fn criterion_02_distillation_terms_nonnegative_and_zero_at_self() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACC2);
    let mut min_term = Scalar::INFINITY;
    let mut max_self = 0.0 as Scalar;
    for trial in 0..1000 {
        let c = [3, 10, 100][trial % 3];
        let groups = random_groups(c, &mut rng);
        let teacher = random_distribution(c, &mut rng);
        let student = random_distribution(c, &mut rng);
        let target = rng.random_range(0..c);
        let t = decompose(&teacher, target, &groups);
        let s = decompose(&student, target, &groups);
        for v in [target_kd(&t, &s), rich_kd(&t, &s, &groups), few_kd(&t, &s, &groups)] {
            min_term = min_term.min(v);
        }
        let cfg = GroupDistillConfig { alpha_t: 1.0, alpha_r: 1.0, alpha_f: 1.0, temperature: 1.0 };
        let self_gd = group_distill(&teacher, &teacher, target, &groups, &cfg);
        max_self = max_self.max(self_gd.abs());
    }
    assert!(min_term >= -1e-12, "a distillation term went negative: {min_term}");
    assert!(max_self <= 1e-10, "self-distillation loss {max_self}");
    pass(2, &format!("min term {min_term:.2e}, max self-loss {max_self:.2e} over 1000 trials"));
}

/// Number of parameter tensors belonging to extractor layers.
fn extractor_param_count(model: &ModelParams) -> usize {
    model.layers()[..model.classifier_boundary()]
        .iter()
        .map(|l| l.weight.is_some() as usize + l.bias.is_some() as usize)
        .sum()
}

#[test]
fn criterion_03_composite_gradients_match_finite_differences() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xACC3);
    let mut worst = 0.0 as Scalar;
    for trial in 0..50 {
        let in_dim = rng.random_range(3..=8);
        let hidden = rng.random_range(4..=16);
        let c = rng.random_range(3..=6);
        let batch_n = rng.random_range(2..=8);
        let cfg = CompositeLossConfig {
            beta_l: rng.random_range(0.2..1.5f64),
            beta_e: rng.random_range(0.1..0.8f64),
            beta_fc: rng.random_range(0.1..0.8f64),
            gd: GroupDistillConfig {
                alpha_t: rng.random_range(0.0..1.0f64),
                alpha_r: rng.random_range(0.0..1.0f64),
                alpha_f: rng.random_range(0.0..1.5f64),
                temperature: [1.0, 2.0, 3.0][trial % 3],
            },
        };
        let groups = random_groups(c, &mut rng);
        let global = ModelParams::small_mlp(&[in_dim], hidden, c, false, rng.random_range(0..u64::MAX));
        let local = ModelParams::small_mlp(&[in_dim], hidden, c, false, rng.random_range(0..u64::MAX));
        let x = Tensor::new(
            vec![batch_n, in_dim],
            (0..batch_n * in_dim).map(|_| rng.random_range(-1.5..1.5f64)).collect(),
        );
        let labels: Vec<usize> = (0..batch_n).map(|_| rng.random_range(0..c)).collect();
        let params: Vec<Tensor> = local.param_tensors().into_iter().cloned().collect();
        let report = finite_diff_check(&params, 1e-5, |tape, ids| {
            let taped = taped_from_leaves(&local, ids);
            composite_loss_graph(tape, &global, &taped, &x, &labels, &groups, &cfg)
        })
        .unwrap();
        worst = worst.max(report.max_rel_err);
    }
    assert!(worst < 1e-4, "worst relative gradient error {worst}");

    // Term containment: relative to the plain CE loss, the embedding term
    // must leave classifier gradients bit-identical and the cross-classifier
    // term must leave extractor gradients bit-identical.
    let groups = ClassGroups::from_rich_set(4, [0usize, 2].into_iter().collect(), 0.25).unwrap();
    let global = ModelParams::small_mlp(&[5], 6, 4, false, 1001);
    let local = ModelParams::small_mlp(&[5], 6, 4, false, 1002);
    let x = Tensor::new(vec![3, 5], (0..15).map(|i| ((i * 7 % 11) as Scalar - 5.0) / 4.0).collect());
    let labels = vec![1usize, 3, 0];
    let grads_of = |cfg: &CompositeLossConfig| -> Vec<Option<Tensor>> {
        let mut tape = Tape::new();
        let taped = record_model(&mut tape, &local, true);
        let loss = composite_loss_graph(&mut tape, &global, &taped, &x, &labels, &groups, cfg)
            .unwrap();
        tape.backward(loss).unwrap();
        taped.param_grads(&tape).into_iter().map(|g| g.cloned()).collect()
    };
    let zero = CompositeLossConfig {
        beta_l: 0.0,
        beta_e: 0.0,
        beta_fc: 0.0,
        gd: GroupDistillConfig::default(),
    };
    let ce_only = grads_of(&zero);
    let e_only = grads_of(&CompositeLossConfig { beta_e: 0.7, ..zero });
    let fc_only = grads_of(&CompositeLossConfig { beta_fc: 0.7, ..zero });
    let n_ext = extractor_param_count(&local);
    for (i, (a, b)) in ce_only.iter().zip(&e_only).enumerate() {
        let (a, b) = (a.as_ref().unwrap(), b.as_ref().unwrap());
        if i >= n_ext {
            assert_eq!(a.max_abs_diff(b), 0.0, "embedding term touched classifier grad {i}");
        } else {
            assert!(a.max_abs_diff(b) > 0.0, "embedding term should move extractor grad {i}");
        }
    }
    for (i, (a, b)) in ce_only.iter().zip(&fc_only).enumerate() {
        let (a, b) = (a.as_ref().unwrap(), b.as_ref().unwrap());
        if i < n_ext {
            assert_eq!(a.max_abs_diff(b), 0.0, "cross-classifier term touched extractor grad {i}");
        } else {
            assert!(a.max_abs_diff(b) > 0.0, "cross-classifier term should move classifier grad {i}");
        }
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 60.0, "gradient checks took {secs:.1}s");
    pass(3, &format!("50 instances, worst rel err {worst:.2e}, containment exact, {secs:.1}s"));
}

#[test]
fn criterion_04_aggregation_algebra() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xACC4);
    for case in 0..500 {
        let in_dim = rng.random_range(2..=5);
        let hidden = rng.random_range(2..=6);
        let c = rng.random_range(2..=4);
        let n = rng.random_range(1..=5);
        let updates: Vec<LocalUpdate> = (0..n)
            .map(|i| {
                let mut p = ModelParams::small_mlp(&[in_dim], hidden, c, false, rng.random_range(0..u64::MAX));
                for t in p.param_tensors_mut() {
                    for v in t.data_mut() {
                        *v = rng.random_range(-2.0..2.0f64);
                    }
                }
                LocalUpdate { client_id: i, params: p, weight: rng.random_range(1..=20) }
            })
            .collect();
        let merged = aggregate(&updates).unwrap();

        if n == 1 {
            for (m, u) in merged.param_tensors().iter().zip(updates[0].params.param_tensors()) {
                assert_eq!(m.max_abs_diff(u), 0.0, "case {case}: single update must be exact");
            }
            continue;
        }
        // Convex bound per coordinate.
        let n_tensors = merged.param_tensors().len();
        for ti in 0..n_tensors {
            let m = merged.param_tensors()[ti].data().to_vec();
            for (ci, v) in m.iter().enumerate() {
                let lo = updates
                    .iter()
                    .map(|u| u.params.param_tensors()[ti].data()[ci])
                    .fold(Scalar::INFINITY, Scalar::min);
                let hi = updates
                    .iter()
                    .map(|u| u.params.param_tensors()[ti].data()[ci])
                    .fold(Scalar::NEG_INFINITY, Scalar::max);
                assert!(
                    *v >= lo - 1e-12 && *v <= hi + 1e-12,
                    "case {case}: coordinate {ci} of tensor {ti} outside client range"
                );
            }
        }
        // Permutation invariance.
        let mut shuffled = updates.clone();
        shuffled.reverse();
        let reversed = aggregate(&shuffled).unwrap();
        for (a, b) in merged.param_tensors().iter().zip(reversed.param_tensors()) {
            assert!(a.max_abs_diff(b) < 1e-12, "case {case}: order changed the mean");
        }
        // Weight-scale invariance.
        let scale = rng.random_range(2..=7usize);
        let scaled: Vec<LocalUpdate> = updates
            .iter()
            .map(|u| LocalUpdate {
                client_id: u.client_id,
                params: u.params.clone(),
                weight: u.weight * scale,
            })
            .collect();
        let rescaled = aggregate(&scaled).unwrap();
        for (a, b) in merged.param_tensors().iter().zip(rescaled.param_tensors()) {
            assert!(a.max_abs_diff(b) < 1e-12, "case {case}: weight scaling changed the mean");
        }
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 5.0, "aggregation algebra took {secs:.1}s");
    pass(4, &format!("500 random cases in {secs:.2}s"));
}

#[test]
fn criterion_05_partitioner_cover_determinism_and_skew() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xACC5);
    for case in 0..100 {
        let c = rng.random_range(2..=8);
        let per_class = rng.random_range(5..=40);
        let labels: Vec<usize> = (0..c * per_class).map(|i| i % c).collect();
        let data = vec![0.0; labels.len()];
        let ds = Dataset::new(data, 1, None, labels, c).unwrap();
        let cfg = PartitionConfig {
            alpha: rng.random_range(0.05..5.0f64),
            n_clients: rng.random_range(1..=10),
            min_samples_per_client: 0,
            seed: rng.random_range(0..u64::MAX),
        };
        let parts = dirichlet_partition(&ds, &cfg).unwrap();
        let mut seen = vec![false; ds.len()];
        for part in &parts {
            for &i in &part.indices {
                assert!(!seen[i], "case {case}: sample {i} assigned twice");
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s), "case {case}: a sample was dropped");
        let again = dirichlet_partition(&ds, &cfg).unwrap();
        assert_eq!(parts, again, "case {case}: partition not deterministic");
    }

    // Skew extremes on a balanced 10x100 dataset over 10 clients.
    let labels: Vec<usize> = (0..1000).map(|i| i % 10).collect();
    let ds = Dataset::new(vec![0.0; 1000], 1, None, labels, 10).unwrap();
    let uniform = dirichlet_partition(
        &ds,
        &PartitionConfig { alpha: 10_000.0, n_clients: 10, min_samples_per_client: 0, seed: 11 },
    )
    .unwrap();
    for part in &uniform {
        let n = part.indices.len() as Scalar;
        assert!((n - 100.0).abs() < 20.0, "alpha=1e4 client {} holds {n}", part.client_id);
    }
    let skewed = dirichlet_partition(
        &ds,
        &PartitionConfig { alpha: 0.1, n_clients: 10, min_samples_per_client: 0, seed: 11 },
    )
    .unwrap();
    let concentrated = skewed
        .iter()
        .filter(|p| !p.indices.is_empty())
        .filter(|p| {
            let mut h = p.class_histogram.clone();
            h.sort_unstable_by(|a, b| b.cmp(a));
            (h[0] + h[1]) as Scalar > 0.5 * p.indices.len() as Scalar
        })
        .count();
    assert!(concentrated >= 5, "alpha=0.1 concentrated only {concentrated}/10 clients");
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 30.0, "partitioner checks took {secs:.1}s");
    pass(5, &format!("100 configs covered deterministically, {concentrated}/10 skewed clients, {secs:.2}s"));
}

#[test]
fn criterion_06_forgetting_formula() {
    let record = |round: usize, accs: &[Scalar]| feddistill::metrics::RoundRecord {
        round,
        top1: accs.iter().sum::<Scalar>() / accs.len() as Scalar,
        per_class: accs.iter().map(|&a| Some(a)).collect(),
        mean_softmax: vec![1.0 / accs.len() as Scalar; accs.len()],
    };
    let mut worked = RoundHistory::new(2);
    worked.push(record(1, &[0.5, 0.2]));
    worked.push(record(2, &[0.9, 0.4]));
    worked.push(record(3, &[0.7, 0.6]));
    let f = forgetting(&worked).unwrap();
    assert!(f.abs() < 1e-12, "worked example gave {f}");

    let mut constant = RoundHistory::new(3);
    for t in 1..=5 {
        constant.push(record(t, &[0.3, 0.6, 0.9]));
    }
    assert_eq!(forgetting(&constant).unwrap(), 0.0);

    let mut improving = RoundHistory::new(2);
    for t in 1..=4 {
        let a = 0.1 * t as Scalar;
        improving.push(record(t, &[a, a + 0.05]));
    }
    assert!(forgetting(&improving).unwrap() <= 0.0);
    pass(6, "worked example 0, constant 0, improving nonpositive");
}

#[test]
fn criterion_07_idx_golden_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("images-idx3-ubyte");
    let labels = dir.path().join("labels-idx1-ubyte");
    let pixels: [u8; 12] = [0, 51, 102, 153, 204, 255, 10, 20, 30, 40, 50, 60];
    let mut image_bytes = Vec::new();
    image_bytes.extend_from_slice(&0x0000_0803u32.to_be_bytes());
    image_bytes.extend_from_slice(&2u32.to_be_bytes());
    image_bytes.extend_from_slice(&2u32.to_be_bytes());
    image_bytes.extend_from_slice(&3u32.to_be_bytes());
    image_bytes.extend_from_slice(&pixels);
    std::fs::write(&images, &image_bytes).unwrap();
    let mut label_bytes = Vec::new();
    label_bytes.extend_from_slice(&0x0000_0801u32.to_be_bytes());
    label_bytes.extend_from_slice(&2u32.to_be_bytes());
    label_bytes.extend_from_slice(&[7u8, 3]);
    std::fs::write(&labels, &label_bytes).unwrap();

    let ds = load_idx_dataset(&images, &labels, None, None).unwrap();
    assert_eq!(ds.len(), 2);
    assert_eq!(ds.num_classes(), 8);
    assert_eq!(ds.image_shape(), Some([1, 2, 3]));
    assert_eq!(ds.labels(), &[7, 3]);
    for (i, &p) in pixels.iter().enumerate() {
        let got = ds.sample(i / 6)[i % 6];
        assert_eq!(got, p as Scalar / 255.0, "pixel {i} not bit-exact");
    }

    let mut bad = image_bytes.clone();
    bad[3] = 0x99;
    std::fs::write(&images, &bad).unwrap();
    let err = load_idx_dataset(&images, &labels, None, None).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("magic"), "unexpected error {msg}");
    pass(7, "fixture parsed bit-exactly; bad magic rejected");
}

// Desk-scale directional runs shared by criteria 8, 9, and 10.

const DESK_SEEDS: [u64; 3] = [2022, 2023, 2024];
const DESK_ROUNDS: usize = 30;

struct StrategyRun {
    history: RoundHistory,
    round_checkpoints: Vec<Vec<u8>>,
}

struct DeskScale {
    dataset_kind: &'static str,
    fedavg: Vec<StrategyRun>,
    feddistill: Vec<StrategyRun>,
    feddistill_zero_beta: Vec<StrategyRun>,
    secs: f64,
}

fn mnist_paths() -> Option<[PathBuf; 4]> {
    let candidates = [
        std::env::var("MNIST_DIR").ok().map(PathBuf::from),
        Some(PathBuf::from("data/mnist")),
        Some(PathBuf::from("../../data/mnist")),
    ];
    for base in candidates.into_iter().flatten() {
        let files = [
            base.join("train-images-idx3-ubyte"),
            base.join("train-labels-idx1-ubyte"),
            base.join("t10k-images-idx3-ubyte"),
            base.join("t10k-labels-idx1-ubyte"),
        ];
        if files.iter().all(|f| f.is_file()) {
            return Some(files);
        }
    }
    None
}

fn desk_dataset() -> (&'static str, Dataset, Dataset) {
    if let Some([ti, tl, vi, vl]) = mnist_paths() {
        let train = load_idx_dataset(&ti, &tl, Some(10), Some(6000)).unwrap();
        let test = load_idx_dataset(&vi, &vl, Some(10), Some(2000)).unwrap();
        return ("mnist-6000", train, test);
    }
    let spec = SyntheticSpec {
        n_classes: 10,
        train_per_class: 600,
        test_per_class: 100,
        feature_dim: 32,
        separation: 0.4,
        seed: 7,
    };
    let (train, test) = synthetic_pair(&spec);
    ("synthetic-10", train, test)
}

fn run_strategy(train: &Dataset, test: &Dataset, strategy: &Strategy, seed: u64) -> StrategyRun {
    let parts = dirichlet_partition(
        train,
        &PartitionConfig {
            alpha: 0.1,
            n_clients: 20,
            min_samples_per_client: 10,
            seed: derive_seed(seed, &[feddistill::seeding::TAG_PARTITION]),
        },
    )
    .unwrap();
    let gamma = 1.0 / train.num_classes() as Scalar;
    let clients = make_clients(train, parts, gamma, seed).unwrap();
    let init = ModelParams::small_mlp(
        &[train.feature_dim()],
        64,
        train.num_classes(),
        false,
        derive_seed(seed, &[feddistill::seeding::TAG_INIT]),
    );
    let hyper = LocalHyper { lr: 0.01, momentum: 0.9, weight_decay: 1e-5, epochs: 2, batch_size: 64 };
    let setup = ExperimentSetup {
        train,
        test,
        clients: &clients,
        init: &init,
        strategy,
        hyper: &hyper,
        rounds: DESK_ROUNDS,
        sample_ratio: 0.25,
        seed,
        eval_batch_size: 512,
    };
    let mut round_checkpoints = Vec::with_capacity(DESK_ROUNDS);
    let (_, history) = run_experiment(&setup, |_, params| {
        round_checkpoints.push(checkpoint_bytes(params));
        Ok(())
    })
    .unwrap();
    StrategyRun { history, round_checkpoints }
}

fn desk_scale() -> &'static DeskScale {
    static DESK: OnceLock<DeskScale> = OnceLock::new();
    DESK.get_or_init(|| {
        let start = Instant::now();
        let (dataset_kind, train, test) = desk_dataset();
        let fedavg = Strategy::FedAvg;
        let feddistill = Strategy::FedDistill { composite: CompositeLossConfig::default() };
        let zero_beta = Strategy::FedDistill {
            composite: CompositeLossConfig {
                beta_l: 0.0,
                beta_e: 0.0,
                beta_fc: 0.0,
                gd: GroupDistillConfig::default(),
            },
        };
        // The round plans, partitions, and initializations derive from the
        // experiment seed alone, so the three strategies run paired.
        let run_all =
            |s: &Strategy| DESK_SEEDS.iter().map(|&sd| run_strategy(&train, &test, s, sd)).collect();
        DeskScale {
            dataset_kind,
            fedavg: run_all(&fedavg),
            feddistill: run_all(&feddistill),
            feddistill_zero_beta: run_all(&zero_beta),
            secs: start.elapsed().as_secs_f64(),
        }
    })
}

fn mean(values: impl Iterator<Item = Scalar>) -> Scalar {
    let v: Vec<Scalar> = values.collect();
    v.iter().sum::<Scalar>() / v.len() as Scalar
}

#[test]
fn criterion_08_feddistill_beats_fedavg_in_accuracy_and_forgetting() {
    let desk = desk_scale();
    let avg_top1 = mean(desk.fedavg.iter().map(|r| r.history.final_top1().unwrap()));
    let kd_top1 = mean(desk.feddistill.iter().map(|r| r.history.final_top1().unwrap()));
    let avg_f = mean(desk.fedavg.iter().map(|r| forgetting(&r.history).unwrap()));
    let kd_f = mean(desk.feddistill.iter().map(|r| forgetting(&r.history).unwrap()));
    assert!(
        kd_top1 >= avg_top1 + 0.02,
        "[{}] mean final top-1: feddistill {kd_top1:.4} vs fedavg {avg_top1:.4}",
        desk.dataset_kind
    );
    assert!(
        kd_f < avg_f,
        "[{}] mean forgetting: feddistill {kd_f:.4} vs fedavg {avg_f:.4}",
        desk.dataset_kind
    );
    assert!(desk.secs < 900.0, "desk-scale runs took {:.0}s", desk.secs);
    pass(
        8,
        &format!(
            "[{}] top-1 {kd_top1:.4} vs {avg_top1:.4} (gap {:+.2}pp), forgetting {kd_f:.4} vs {avg_f:.4}, runs {:.0}s",
            desk.dataset_kind,
            (kd_top1 - avg_top1) * 100.0,
            desk.secs
        ),
    );
}

#[test]
fn criterion_09_feddistill_reaches_fedavg_final_accuracy_early() {
    let desk = desk_scale();
    let mut early = 0;
    let mut detail = String::new();
    for (i, (avg, kd)) in desk.fedavg.iter().zip(&desk.feddistill).enumerate() {
        let target = avg.history.final_top1().unwrap();
        let reached = rounds_to_reach(&kd.history, target);
        if matches!(reached, Some(r) if r < DESK_ROUNDS) {
            early += 1;
        }
        detail.push_str(&format!(
            "seed {}: target {target:.4} reached at {reached:?}; ",
            DESK_SEEDS[i]
        ));
    }
    assert!(early >= 2, "only {early}/3 seeds reached the FedAvg target early: {detail}");
    pass(9, &format!("{early}/3 seeds early ({})", detail.trim_end_matches("; ")));
}

#[test]
fn criterion_10_zero_beta_reduction_is_bit_identical_to_fedavg() {
    let desk = desk_scale();
    for (i, (avg, zero)) in desk.fedavg.iter().zip(&desk.feddistill_zero_beta).enumerate() {
        assert_eq!(avg.round_checkpoints.len(), zero.round_checkpoints.len());
        for (round, (a, z)) in
            avg.round_checkpoints.iter().zip(&zero.round_checkpoints).enumerate()
        {
            assert_eq!(
                a,
                z,
                "seed {} round {} checkpoints diverge",
                DESK_SEEDS[i],
                round + 1
            );
        }
    }
    pass(10, &format!("all {} round checkpoints byte-identical across 3 seeds", DESK_ROUNDS));
}
