//! Round-based federated training: per-round client sampling, local
//! training under one of three strategies, and sample-count-weighted
//! parameter aggregation.
//!
//! Determinism contract: every random decision flows from a seed derived
//! with `seeding::derive_seed`, keyed by round and client id, so results
//! are independent of worker count and client execution order.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::data::{ClientDataset, Dataset};
use crate::distill::graph::{composite_loss_graph, local_ce_graph};
use crate::distill::{ClassGroups, CompositeLossConfig, DistillError};
use crate::metrics::{evaluate, MetricsError, RoundHistory};
use crate::nn::{record_model, ModelParams, NnError, NodeId, SgdState, Tape, TapedModel};
use crate::scalar::Scalar;
use crate::seeding::{derive_seed, TAG_CLIENT, TAG_ROUND_PLAN};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum FederationError {
    #[error("sample ratio must be in (0, 1], got {0}")]
    BadSampleRatio(Scalar),
    #[error("no local update carried positive weight")]
    AllZeroWeights,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Strategy {
    FedAvg,
    FedProx { mu: Scalar },
    FedDistill { composite: CompositeLossConfig },
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::FedAvg => "fedavg",
            Strategy::FedProx { .. } => "fedprox",
            Strategy::FedDistill { .. } => "feddistill",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalHyper {
    pub lr: Scalar,
    pub momentum: Scalar,
    pub weight_decay: Scalar,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for LocalHyper {
    fn default() -> Self {
        LocalHyper { lr: 0.01, momentum: 0.9, weight_decay: 1e-5, epochs: 10, batch_size: 64 }
    }
}

/// One participant: its slice of the training set, its precomputed
/// rich/few class groups, and its private seed stream.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    pub dataset: ClientDataset,
    pub groups: ClassGroups,
    pub rng_seed: u64,
}

/// Builds client states from a partition. Groups use the client's own label
/// histogram; an empty client gets an all-few grouping it will never use.
pub fn make_clients(
    train: &Dataset,
    partitions: Vec<ClientDataset>,
    group_threshold: Scalar,
    experiment_seed: u64,
) -> Result<Vec<ClientState>, DistillError> {
    partitions
        .into_iter()
        .map(|dataset| {
            let groups = if dataset.indices.is_empty() {
                ClassGroups::from_rich_set(train.num_classes(), BTreeSet::new(), group_threshold)?
            } else {
                ClassGroups::from_counts(&dataset.class_histogram, group_threshold)?
            };
            Ok(ClientState {
                client_id: dataset.client_id,
                rng_seed: derive_seed(experiment_seed, &[TAG_CLIENT, dataset.client_id as u64]),
                dataset,
                groups,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundPlan {
    /// 1-based round index.
    pub round: usize,
    /// Distinct client ids, ascending.
    pub selected: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct LocalUpdate {
    pub client_id: usize,
    pub params: ModelParams,
    /// Sample count; zero means the client was skipped.
    pub weight: usize,
}

/// Uniform sample without replacement of ceil(ratio * n_total) ids, sorted.
pub fn sample_clients(
    n_total: usize,
    ratio: Scalar,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>, FederationError> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(FederationError::BadSampleRatio(ratio));
    }
    let k = ((ratio * n_total as Scalar).ceil() as usize).min(n_total);
    let mut ids: Vec<usize> = rand::seq::index::sample(rng, n_total, k).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Trains a copy of the global model on one client's data for the round.
///
/// Every epoch reshuffles the client's samples; the shuffle stream is keyed
/// by (client seed, round) so schedules cannot perturb it. The global model
/// is only read.
pub fn local_train(
    client: &ClientState,
    global: &ModelParams,
    train: &Dataset,
    strategy: &Strategy,
    hyper: &LocalHyper,
    round: usize,
) -> Result<LocalUpdate, FederationError> {
    let weight = client.dataset.indices.len();
    if weight == 0 {
        log::warn!("client {} has no data; contributing weight 0", client.client_id);
        return Ok(LocalUpdate { client_id: client.client_id, params: global.clone(), weight: 0 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(client.rng_seed, &[round as u64]));
    let mut local = global.clone();
    let mut sgd = SgdState::new(hyper.lr, hyper.momentum, hyper.weight_decay, &local);
    let mut order = client.dataset.indices.clone();
    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(hyper.batch_size) {
            let (batch, labels) = train.make_batch(chunk, global.input_shape());
            let mut tape = Tape::new();
            let taped = record_model(&mut tape, &local, true);
            let loss = match strategy {
                Strategy::FedAvg => local_ce_graph(&mut tape, &taped, &batch, &labels)?.3,
                Strategy::FedProx { mu } => {
                    let ce = local_ce_graph(&mut tape, &taped, &batch, &labels)?.3;
                    add_proximal_term(&mut tape, &taped, global, ce, *mu)
                }
                Strategy::FedDistill { composite } => composite_loss_graph(
                    &mut tape,
                    global,
                    &taped,
                    &batch,
                    &labels,
                    &client.groups,
                    composite,
                )?,
            };
            tape.backward(loss)?;
            let grads = taped.param_grads(&tape);
            sgd.step(&mut local, &grads);
        }
    }
    Ok(LocalUpdate { client_id: client.client_id, params: local, weight })
}

/// loss + (mu/2) * sum over parameters of ||theta - theta_g||^2.
fn add_proximal_term(
    tape: &mut Tape,
    taped: &TapedModel,
    global: &ModelParams,
    loss: NodeId,
    mu: Scalar,
) -> NodeId {
    let mut total = loss;
    let anchors: Vec<Tensor> = global.param_tensors().into_iter().cloned().collect();
    for (id, anchor) in taped.param_ids().into_iter().zip(anchors) {
        let prox = tape.sq_diff_half(id, anchor);
        let scaled = tape.scale(prox, mu);
        total = tape.add(total, scaled);
    }
    total
}

/// Sample-count-weighted mean of client parameters, coordinate-wise.
pub fn aggregate(updates: &[LocalUpdate]) -> Result<ModelParams, FederationError> {
    let total: usize = updates.iter().map(|u| u.weight).sum();
    if total == 0 {
        return Err(FederationError::AllZeroWeights);
    }
    let mut positive = updates.iter().filter(|u| u.weight > 0);
    if let (Some(only), None) = (positive.next(), positive.next()) {
        // A lone contributor defines the mean exactly; skip the scaled sum
        // so its parameters round-trip bit for bit.
        return Ok(only.params.clone());
    }
    let mut result = updates[0].params.clone();
    let mut sums: Vec<Tensor> =
        result.param_tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
    for update in updates {
        if update.weight == 0 {
            continue;
        }
        let w = update.weight as Scalar;
        for (sum, param) in sums.iter_mut().zip(update.params.param_tensors()) {
            for (s, &p) in sum.data_mut().iter_mut().zip(param.data()) {
                *s += w * p;
            }
        }
    }
    let scale = 1.0 / total as Scalar;
    for (dst, sum) in result.param_tensors_mut().into_iter().zip(sums) {
        for (d, &s) in dst.data_mut().iter_mut().zip(sum.data()) {
            *d = s * scale;
        }
    }
    Ok(result)
}

/// Runs one communication round: trains every selected client against the
/// same global snapshot (in parallel) and aggregates the results in plan
/// order.
pub fn run_round(
    global: &ModelParams,
    clients: &[ClientState],
    train: &Dataset,
    plan: &RoundPlan,
    strategy: &Strategy,
    hyper: &LocalHyper,
) -> Result<ModelParams, FederationError> {
    let updates: Vec<LocalUpdate> = plan
        .selected
        .par_iter()
        .map(|&id| local_train(&clients[id], global, train, strategy, hyper, plan.round))
        .collect::<Result<_, _>>()?;
    aggregate(&updates)
}

pub struct ExperimentSetup<'a> {
    pub train: &'a Dataset,
    pub test: &'a Dataset,
    pub clients: &'a [ClientState],
    pub init: &'a ModelParams,
    pub strategy: &'a Strategy,
    pub hyper: &'a LocalHyper,
    pub rounds: usize,
    pub sample_ratio: Scalar,
    pub seed: u64,
    pub eval_batch_size: usize,
}

/// Runs T rounds, evaluating the fresh global model after each one.
/// `on_round` fires after each evaluation with the round index and the new
/// global parameters, for checkpointing.
pub fn run_experiment(
    setup: &ExperimentSetup,
    mut on_round: impl FnMut(usize, &ModelParams) -> Result<(), FederationError>,
) -> Result<(ModelParams, RoundHistory), FederationError> {
    let mut global = setup.init.clone();
    let mut history = RoundHistory::new(setup.test.num_classes());
    for round in 1..=setup.rounds {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            setup.seed,
            &[TAG_ROUND_PLAN, round as u64],
        ));
        let selected = sample_clients(setup.clients.len(), setup.sample_ratio, &mut rng)?;
        let plan = RoundPlan { round, selected };
        global = run_round(&global, setup.clients, setup.train, &plan, setup.strategy, setup.hyper)?;
        let eval = evaluate(&global, setup.test, setup.eval_batch_size)?;
        log::info!(
            "round {round}/{}: top1 {:.4} ({} clients)",
            setup.rounds,
            eval.top1,
            plan.selected.len()
        );
        history.push_evaluation(round, &eval);
        on_round(round, &global)?;
    }
    Ok((global, history))
}
