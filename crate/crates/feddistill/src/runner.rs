//! Experiment orchestration on disk: builds datasets and models from a
//! config, runs every seed, and lays out artifacts under the output
//! directory.
//!
//! Layout per run: `resolved_config.json`, `summary.json`, and one
//! `seed_<s>/` directory per seed holding `metrics.csv`, `final.ckpt`, and
//! optional interval checkpoints `round_<r>.ckpt`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{
    ConfigError, DatasetSpec, ExperimentConfig, GammaSpec, ModelSpec, StrategySpec,
};
use crate::data::idx::load_idx_dataset;
use crate::data::partition::{dirichlet_partition, PartitionConfig};
use crate::data::synth::{synthetic_pair, SyntheticSpec};
use crate::data::{DataError, Dataset};
use crate::distill::{ClassGroups, DistillError};
use crate::federation::{make_clients, run_experiment, ExperimentSetup, FederationError};
use crate::metrics::{emit, forgetting, EmitFormat, MetricsError, RoundHistory};
use crate::nn::{save_model, ModelParams, NnError};
use crate::scalar::Scalar;
use crate::seeding::{derive_seed, TAG_INIT, TAG_PARTITION};

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Federation(#[from] FederationError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("sweep grid {path}: {detail}")]
    Grid { path: String, detail: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunnerError + '_ {
    move |source| RunnerError::Io { path: path.display().to_string(), source }
}

pub fn apply_overrides(
    cfg: &mut ExperimentConfig,
    output_dir: Option<&Path>,
    seeds: Option<&[u64]>,
) -> Result<(), ConfigError> {
    if let Some(dir) = output_dir {
        cfg.output_dir = dir.display().to_string();
    }
    if let Some(seeds) = seeds {
        cfg.seeds = seeds.to_vec();
    }
    cfg.validate()
}

/// The datasets an experiment runs on; identical across seeds.
pub struct World {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn build_world(cfg: &ExperimentConfig) -> Result<World, RunnerError> {
    match &cfg.dataset {
        DatasetSpec::Synthetic(s) => {
            let spec = SyntheticSpec {
                n_classes: s.n_classes,
                train_per_class: s.train_per_class,
                test_per_class: s.test_per_class,
                feature_dim: s.feature_dim,
                separation: s.separation,
                seed: s.seed,
            };
            let (train, test) = synthetic_pair(&spec);
            Ok(World { train, test })
        }
        DatasetSpec::Idx(idx) => {
            let train = load_idx_dataset(
                Path::new(&idx.train_images),
                Path::new(&idx.train_labels),
                idx.num_classes,
                idx.train_limit,
            )?;
            let test = load_idx_dataset(
                Path::new(&idx.test_images),
                Path::new(&idx.test_labels),
                Some(train.num_classes()),
                idx.test_limit,
            )?;
            Ok(World { train, test })
        }
    }
}

pub fn build_model(
    cfg: &ExperimentConfig,
    world: &World,
    seed: u64,
) -> Result<ModelParams, RunnerError> {
    let c = world.train.num_classes();
    match &cfg.model {
        ModelSpec::SmallMlp(m) => {
            let input_shape: Vec<usize> = match world.train.image_shape() {
                Some(s) => s.to_vec(),
                None => vec![world.train.feature_dim()],
            };
            Ok(ModelParams::small_mlp(&input_shape, m.hidden_dim, c, m.classifier_bias, seed))
        }
        ModelSpec::SmallCnn(m) => {
            let Some([ch, h, w]) = world.train.image_shape() else {
                return Err(ConfigError::Invalid {
                    key: "model.small_cnn",
                    detail: "requires an image dataset (idx), not flat features".into(),
                }
                .into());
            };
            Ok(ModelParams::small_cnn(ch, h, w, m.hidden_dim, c, m.classifier_bias, seed)?)
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SeedOutcome {
    pub seed: u64,
    pub final_top1: Option<Scalar>,
    pub forgetting: Option<Scalar>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunSummary {
    pub strategy: String,
    pub rounds: usize,
    /// Forgetting is computed per seed over that seed's full history, then
    /// averaged across seeds.
    pub forgetting_method: String,
    pub per_seed: Vec<SeedOutcome>,
    pub mean_final_top1: Option<Scalar>,
    pub std_final_top1: Option<Scalar>,
    pub mean_forgetting: Option<Scalar>,
    pub std_forgetting: Option<Scalar>,
}

fn mean_std(values: &[Scalar]) -> (Option<Scalar>, Option<Scalar>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as Scalar;
    let mean = values.iter().sum::<Scalar>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<Scalar>() / n;
    (Some(mean), Some(var.sqrt()))
}

fn summarize(cfg: &ExperimentConfig, per_seed: Vec<SeedOutcome>) -> RunSummary {
    let finals: Vec<Scalar> = per_seed.iter().filter_map(|o| o.final_top1).collect();
    let forgets: Vec<Scalar> = per_seed.iter().filter_map(|o| o.forgetting).collect();
    let (mean_final_top1, std_final_top1) = mean_std(&finals);
    let (mean_forgetting, std_forgetting) = mean_std(&forgets);
    RunSummary {
        strategy: cfg.strategy.name().to_string(),
        rounds: cfg.federation.rounds,
        forgetting_method: "per-seed forgetting over the full history, averaged across seeds"
            .to_string(),
        per_seed,
        mean_final_top1,
        std_final_top1,
        mean_forgetting,
        std_forgetting,
    }
}

/// Runs one seed end to end, writing artifacts under `seed_dir`.
fn run_seed(
    cfg: &ExperimentConfig,
    world: &World,
    seed: u64,
    seed_dir: &Path,
) -> Result<(RoundHistory, SeedOutcome), RunnerError> {
    fs::create_dir_all(seed_dir).map_err(io_err(seed_dir))?;
    let partition_cfg = PartitionConfig {
        alpha: cfg.partition.alpha,
        n_clients: cfg.federation.n_clients,
        min_samples_per_client: cfg.partition.min_samples_per_client,
        seed: derive_seed(seed, &[TAG_PARTITION]),
    };
    let parts = dirichlet_partition(&world.train, &partition_cfg)?;
    let gamma = cfg.gamma.resolve(world.train.num_classes());
    let clients = make_clients(&world.train, parts, gamma, seed)?;
    let init = build_model(cfg, world, derive_seed(seed, &[TAG_INIT]))?;
    let strategy = cfg.strategy.to_strategy();
    let hyper = cfg.federation.local.to_hyper();
    let setup = ExperimentSetup {
        train: &world.train,
        test: &world.test,
        clients: &clients,
        init: &init,
        strategy: &strategy,
        hyper: &hyper,
        rounds: cfg.federation.rounds,
        sample_ratio: cfg.federation.sample_ratio,
        seed,
        eval_batch_size: cfg.eval_batch_size,
    };
    let interval = cfg.checkpoint_interval;
    let (final_params, history) = run_experiment(&setup, |round, params| {
        if interval > 0 && round % interval == 0 {
            save_model(params, &seed_dir.join(format!("round_{round}.ckpt")))
                .map_err(FederationError::Nn)?;
        }
        Ok(())
    })?;
    emit(&history, &seed_dir.join("metrics.csv"), EmitFormat::Csv)?;
    save_model(&final_params, &seed_dir.join("final.ckpt"))?;
    let outcome = SeedOutcome {
        seed,
        final_top1: history.final_top1(),
        forgetting: forgetting(&history).ok(),
    };
    Ok((history, outcome))
}

pub fn cmd_run(cfg: &ExperimentConfig) -> Result<RunSummary, RunnerError> {
    let out = PathBuf::from(&cfg.output_dir);
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    let resolved = out.join("resolved_config.json");
    fs::write(&resolved, cfg.to_resolved_json()).map_err(io_err(&resolved))?;
    let world = build_world(cfg)?;
    let mut per_seed = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        log::info!("seed {seed}: starting {} for {} rounds", cfg.strategy.name(), cfg.federation.rounds);
        let (_, outcome) = run_seed(cfg, &world, seed, &out.join(format!("seed_{seed}")))?;
        per_seed.push(outcome);
    }
    let summary = summarize(cfg, per_seed);
    let summary_path = out.join("summary.json");
    fs::write(&summary_path, serde_json::to_string_pretty(&summary).expect("summary serializes"))
        .map_err(io_err(&summary_path))?;
    Ok(summary)
}

/// Hyperparameter grid: every listed axis is swept over its values, the
/// Cartesian product defines the sweep points.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepGrid {
    pub alpha_t: Option<Vec<Scalar>>,
    pub alpha_r: Option<Vec<Scalar>>,
    pub alpha_f: Option<Vec<Scalar>>,
    pub beta_l: Option<Vec<Scalar>>,
    pub beta_e: Option<Vec<Scalar>>,
    pub beta_fc: Option<Vec<Scalar>>,
    pub gamma: Option<Vec<GammaSpec>>,
}

/// One sweep point: the axis values overriding the base config.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct SweepPoint {
    pub alpha_t: Option<Scalar>,
    pub alpha_r: Option<Scalar>,
    pub alpha_f: Option<Scalar>,
    pub beta_l: Option<Scalar>,
    pub beta_e: Option<Scalar>,
    pub beta_fc: Option<Scalar>,
    pub gamma: Option<GammaSpec>,
}

impl SweepPoint {
    fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = base.clone();
        if let StrategySpec::Feddistill(d) = &mut cfg.strategy {
            if let Some(v) = self.alpha_t {
                d.alpha_t = v;
            }
            if let Some(v) = self.alpha_r {
                d.alpha_r = v;
            }
            if let Some(v) = self.alpha_f {
                d.alpha_f = v;
            }
            if let Some(v) = self.beta_l {
                d.beta_l = v;
            }
            if let Some(v) = self.beta_e {
                d.beta_e = v;
            }
            if let Some(v) = self.beta_fc {
                d.beta_fc = v;
            }
        }
        if let Some(g) = &self.gamma {
            cfg.gamma = g.clone();
        }
        cfg
    }
}

/// Cartesian product in fixed axis order; absent axes contribute no factor.
pub fn sweep_points(grid: &SweepGrid) -> Vec<SweepPoint> {
    let mut points = vec![SweepPoint::default()];
    fn extend<T: Clone>(
        points: Vec<SweepPoint>,
        axis: &Option<Vec<T>>,
        set: impl Fn(&mut SweepPoint, T),
    ) -> Vec<SweepPoint> {
        match axis {
            None => points,
            Some(values) => {
                let set = &set;
                points
                    .into_iter()
                    .flat_map(|p| {
                        values.iter().map(move |v| {
                            let mut q = p.clone();
                            set(&mut q, v.clone());
                            q
                        })
                    })
                    .collect()
            }
        }
    }
    points = extend(points, &grid.alpha_t, |p, v| p.alpha_t = Some(v));
    points = extend(points, &grid.alpha_r, |p, v| p.alpha_r = Some(v));
    points = extend(points, &grid.alpha_f, |p, v| p.alpha_f = Some(v));
    points = extend(points, &grid.beta_l, |p, v| p.beta_l = Some(v));
    points = extend(points, &grid.beta_e, |p, v| p.beta_e = Some(v));
    points = extend(points, &grid.beta_fc, |p, v| p.beta_fc = Some(v));
    points = extend(points, &grid.gamma, |p, v| p.gamma = Some(v));
    points
}

fn load_grid(path: &Path) -> Result<SweepGrid, RunnerError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut de = serde_json::Deserializer::from_str(&text);
    let grid: SweepGrid = serde_path_to_error::deserialize(&mut de)
        .map_err(|e| RunnerError::Grid { path: path.display().to_string(), detail: e.to_string() })?;
    let axes = [
        ("alpha_t", grid.alpha_t.as_ref().map(Vec::len)),
        ("alpha_r", grid.alpha_r.as_ref().map(Vec::len)),
        ("alpha_f", grid.alpha_f.as_ref().map(Vec::len)),
        ("beta_l", grid.beta_l.as_ref().map(Vec::len)),
        ("beta_e", grid.beta_e.as_ref().map(Vec::len)),
        ("beta_fc", grid.beta_fc.as_ref().map(Vec::len)),
        ("gamma", grid.gamma.as_ref().map(Vec::len)),
    ];
    if axes.iter().all(|(_, n)| n.is_none()) {
        return Err(RunnerError::Grid {
            path: path.display().to_string(),
            detail: "grid lists no axis to sweep".into(),
        });
    }
    if let Some((name, _)) = axes.iter().find(|(_, n)| *n == Some(0)) {
        return Err(RunnerError::Grid {
            path: path.display().to_string(),
            detail: format!("axis `{name}` lists no values"),
        });
    }
    Ok(grid)
}

fn gamma_label(g: &Option<GammaSpec>) -> String {
    match g {
        None => String::new(),
        Some(GammaSpec::Ratio(r)) => format!("{r}"),
        Some(GammaSpec::Literal(s)) => s.clone(),
    }
}

fn opt_label(v: &Option<Scalar>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

pub fn cmd_sweep(cfg: &ExperimentConfig, grid_path: &Path) -> Result<(), RunnerError> {
    if !matches!(cfg.strategy, StrategySpec::Feddistill(_)) {
        return Err(RunnerError::Grid {
            path: grid_path.display().to_string(),
            detail: "sweeps vary distillation hyperparameters; the base strategy must be feddistill"
                .into(),
        });
    }
    let grid = load_grid(grid_path)?;
    let points = sweep_points(&grid);
    let out = PathBuf::from(&cfg.output_dir);
    fs::create_dir_all(&out).map_err(io_err(&out))?;

    let mut rows: Vec<(usize, SweepPoint, RunSummary)> = Vec::with_capacity(points.len());
    for (i, point) in points.into_iter().enumerate() {
        let mut sub = point.apply(cfg);
        sub.output_dir = out.join(format!("point_{i:03}")).display().to_string();
        sub.validate()?;
        log::info!("sweep point {i}: {:?}", point);
        let summary = cmd_run(&sub)?;
        rows.push((i, point, summary));
    }
    rows.sort_by(|a, b| {
        let ka = a.2.mean_final_top1.unwrap_or(Scalar::NEG_INFINITY);
        let kb = b.2.mean_final_top1.unwrap_or(Scalar::NEG_INFINITY);
        kb.partial_cmp(&ka).unwrap().then(a.0.cmp(&b.0))
    });
    let mut csv = String::from(
        "rank,point,alpha_t,alpha_r,alpha_f,beta_l,beta_e,beta_fc,gamma,mean_final_top1,std_final_top1,mean_forgetting\n",
    );
    for (rank, (i, point, summary)) in rows.iter().enumerate() {
        csv.push_str(&format!(
            "{},point_{i:03},{},{},{},{},{},{},{},{},{},{}\n",
            rank + 1,
            opt_label(&point.alpha_t),
            opt_label(&point.alpha_r),
            opt_label(&point.alpha_f),
            opt_label(&point.beta_l),
            opt_label(&point.beta_e),
            opt_label(&point.beta_fc),
            gamma_label(&point.gamma),
            opt_label(&summary.mean_final_top1),
            opt_label(&summary.std_final_top1),
            opt_label(&summary.mean_forgetting),
        ));
    }
    let ranking = out.join("ranking.csv");
    fs::write(&ranking, csv).map_err(io_err(&ranking))?;
    Ok(())
}

/// Writes per-client class histograms and rich/few assignments, one CSV per
/// seed, under the output directory.
pub fn cmd_partition_report(cfg: &ExperimentConfig) -> Result<(), RunnerError> {
    let world = build_world(cfg)?;
    let c = world.train.num_classes();
    let gamma = cfg.gamma.resolve(c);
    let out = PathBuf::from(&cfg.output_dir);
    fs::create_dir_all(&out).map_err(io_err(&out))?;
    for &seed in &cfg.seeds {
        let parts = dirichlet_partition(
            &world.train,
            &PartitionConfig {
                alpha: cfg.partition.alpha,
                n_clients: cfg.federation.n_clients,
                min_samples_per_client: cfg.partition.min_samples_per_client,
                seed: derive_seed(seed, &[TAG_PARTITION]),
            },
        )?;
        let mut csv = String::from("client_id,total,threshold");
        for class in 0..c {
            csv.push_str(&format!(",count_class_{class}"));
        }
        for class in 0..c {
            csv.push_str(&format!(",rich_class_{class}"));
        }
        csv.push('\n');
        for part in &parts {
            let groups = if part.indices.is_empty() {
                ClassGroups::from_rich_set(c, Default::default(), gamma)?
            } else {
                ClassGroups::from_counts(&part.class_histogram, gamma)?
            };
            csv.push_str(&format!("{},{},{gamma}", part.client_id, part.indices.len()));
            for count in &part.class_histogram {
                csv.push_str(&format!(",{count}"));
            }
            for class in 0..c {
                csv.push_str(&format!(",{}", groups.is_rich(class) as u8));
            }
            csv.push('\n');
        }
        let path = out.join(format!("partition_seed_{seed}.csv"));
        fs::write(&path, csv).map_err(io_err(&path))?;
        log::info!("wrote {}", path.display());
    }
    Ok(())
}
