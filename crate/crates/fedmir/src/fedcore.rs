//! Clustered federated training with privacy-aware selection.
//!
//! Each round the server broadcasts every cluster model together with its
//! latest membership-inference risk score. Every client samples a mini-batch,
//! scores all cluster models as `alpha * loss + beta * risk`, adopts the
//! argmin cluster, takes its local SGD steps, and submits the update; the
//! server averages submissions per cluster. With `alpha = 1` everywhere the
//! risk column is ignored and the loop reduces exactly to loss-only
//! clustering.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{Group, ShadowPool};
use crate::error::{Error, Result};
use crate::numkit::{batch_gradient, batch_loss, sgd_step, Batch, Model, ModelSpec};
use crate::redteam::{self, MiaRiskTable, TrainingBudget};
use crate::stream::{self, tag};

/// Pre-eval risk placeholder: the uninformative attack accuracy.
pub const DEFAULT_RISK: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClientProfile {
    pub client_id: usize,
    /// Weight on empirical loss.
    pub alpha: f64,
    /// Weight on MIA risk; alpha + beta = 1.
    pub beta: f64,
    /// Maximum tolerated MIA accuracy τ.
    pub mia_threshold: f64,
    pub group: Group,
}

impl ClientProfile {
    pub fn validate(&self) -> Result<()> {
        let ok_weight = |w: f64| w.is_finite() && (0.0..=1.0).contains(&w);
        if !ok_weight(self.alpha) || !ok_weight(self.beta) {
            return Err(Error::input("alpha and beta must lie in [0,1]"));
        }
        if (self.alpha + self.beta - 1.0).abs() > 1e-12 {
            return Err(Error::input("alpha + beta must equal 1"));
        }
        if !self.mia_threshold.is_finite() || !(0.5..=1.0).contains(&self.mia_threshold) {
            return Err(Error::input("mia_threshold must lie in [0.5,1.0]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Ifca,
    IfcaMir,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Ifca => "ifca",
            Algorithm::IfcaMir => "ifca-mir",
        }
    }
}

/// Broadcast state: one model and one risk score per cluster.
#[derive(Debug, Clone)]
pub struct ClusterSet {
    pub models: Vec<Model>,
    pub risks: Vec<f64>,
    pub round: usize,
}

impl ClusterSet {
    pub fn init(spec: ModelSpec, num_clusters: usize, seed: u64) -> Result<Self> {
        if num_clusters == 0 {
            return Err(Error::input("need at least one cluster"));
        }
        let models = (0..num_clusters)
            .map(|j| Model::init(spec, &mut stream::rng(seed, &[tag::MODEL_INIT, j as u64])))
            .collect::<Result<Vec<_>>>()?;
        Ok(ClusterSet { models, risks: vec![DEFAULT_RISK; num_clusters], round: 0 })
    }

    pub fn num_clusters(&self) -> usize {
        self.models.len()
    }
}

#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub round: usize,
    /// Client index -> selected cluster.
    pub assignments: Vec<usize>,
    /// Loss of the selected model on the client's mini-batch at selection time.
    pub selected_loss: Vec<f64>,
    /// Broadcast risk of the selected cluster at selection time.
    pub selected_risk: Vec<f64>,
    pub member_counts: Vec<usize>,
    /// Post-aggregation models.
    pub models: Vec<Model>,
}

/// Picks the cluster minimizing `alpha * loss + beta * risk`; ties break
/// toward the lowest index.
pub fn select_cluster(profile: &ClientProfile, losses: &[f64], risks: &[f64]) -> Result<usize> {
    if losses.is_empty() {
        return Err(Error::input("selection needs at least one cluster"));
    }
    if losses.len() != risks.len() {
        return Err(Error::input(format!(
            "{} losses but {} risks",
            losses.len(),
            risks.len()
        )));
    }
    let mut best = 0;
    let mut best_score = f64::INFINITY;
    for (j, (&loss, &risk)) in losses.iter().zip(risks).enumerate() {
        if !loss.is_finite() || !risk.is_finite() {
            return Err(Error::input(format!("non-finite score inputs for cluster {j}")));
        }
        let score = profile.alpha * loss + profile.beta * risk;
        if score < best_score {
            best = j;
            best_score = score;
        }
    }
    Ok(best)
}

/// `num_steps` SGD steps on the batch, starting from a copy of the model.
pub fn local_update(
    model: &Model,
    batch: &Batch,
    learning_rate: f64,
    num_steps: usize,
) -> Result<Model> {
    if num_steps == 0 {
        return Err(Error::input("local update needs at least one step"));
    }
    let mut m = model.clone();
    for _ in 0..num_steps {
        let grad = batch_gradient(&m, batch)?;
        m = sgd_step(&m, &grad, learning_rate)?;
    }
    Ok(m)
}

/// Unweighted elementwise mean per cluster, in submission order; clusters
/// with no submissions keep their previous model.
pub fn aggregate_cluster(
    previous: &ClusterSet,
    submissions: &[(usize, Model)],
) -> Result<Vec<Model>> {
    let s = previous.num_clusters();
    let mut sums: Vec<Option<(Vec<f64>, usize)>> = vec![None; s];
    for (j, model) in submissions {
        if *j >= s {
            return Err(Error::input(format!("cluster id {j} out of range for {s} clusters")));
        }
        if model.spec != previous.models[*j].spec {
            return Err(Error::input("submitted model spec does not match cluster spec"));
        }
        match &mut sums[*j] {
            None => sums[*j] = Some((model.params.clone(), 1)),
            Some((acc, count)) => {
                for (a, p) in acc.iter_mut().zip(&model.params) {
                    *a += p;
                }
                *count += 1;
            }
        }
    }
    sums.into_iter()
        .enumerate()
        .map(|(j, slot)| match slot {
            None => Ok(previous.models[j].clone()),
            Some((acc, count)) => {
                let inv = 1.0 / count as f64;
                Model::from_params(previous.models[j].spec, acc.iter().map(|a| a * inv).collect())
            }
        })
        .collect()
}

/// The round's mini-batch row indices for one client. Exposed so tests can
/// replay a round exactly.
pub fn sample_batch_indices(
    seed: u64,
    client_id: usize,
    round: usize,
    population: usize,
    batch_size: usize,
) -> Vec<usize> {
    let mut rng = stream::rng(seed, &[tag::BATCH, client_id as u64, round as u64]);
    rand::seq::index::sample(&mut rng, population, batch_size).into_vec()
}

struct ClientOutcome {
    cluster: usize,
    loss: f64,
    risk: f64,
    model: Model,
}

/// One synchronous round: selection, local updates (clients run in parallel,
/// determinism comes from per-client streams), then serial aggregation.
#[allow(clippy::too_many_arguments)]
pub fn run_round(
    state: &ClusterSet,
    clients: &[Batch],
    profiles: &[ClientProfile],
    risk_table: &[f64],
    learning_rate: f64,
    batch_size: usize,
    num_steps: usize,
    seed: u64,
) -> Result<(ClusterSet, RoundRecord)> {
    let s = state.num_clusters();
    if clients.is_empty() {
        return Err(Error::input("round needs at least one client"));
    }
    if clients.len() != profiles.len() {
        return Err(Error::input(format!(
            "{} clients but {} profiles",
            clients.len(),
            profiles.len()
        )));
    }
    if risk_table.len() != s {
        return Err(Error::input("risk table must have one entry per cluster"));
    }
    if batch_size == 0 {
        return Err(Error::input("batch size must be positive"));
    }
    let round = state.round;

    let outcomes: Vec<ClientOutcome> = (0..clients.len())
        .into_par_iter()
        .map(|i| -> Result<ClientOutcome> {
            let client = &clients[i];
            if batch_size > client.len() {
                return Err(Error::input(format!(
                    "client {i}: batch size {batch_size} exceeds dataset size {}",
                    client.len()
                )));
            }
            let rows = sample_batch_indices(seed, i, round, client.len(), batch_size);
            let mini = client.select(&rows);
            let losses = state
                .models
                .iter()
                .map(|m| batch_loss(m, &mini))
                .collect::<Result<Vec<f64>>>()?;
            let cluster = select_cluster(&profiles[i], &losses, risk_table)?;
            let model = local_update(&state.models[cluster], &mini, learning_rate, num_steps)?;
            Ok(ClientOutcome { cluster, loss: losses[cluster], risk: risk_table[cluster], model })
        })
        .collect::<Result<Vec<_>>>()?;

    let assignments: Vec<usize> = outcomes.iter().map(|o| o.cluster).collect();
    let selected_loss: Vec<f64> = outcomes.iter().map(|o| o.loss).collect();
    let selected_risk: Vec<f64> = outcomes.iter().map(|o| o.risk).collect();
    let mut member_counts = vec![0usize; s];
    for &a in &assignments {
        member_counts[a] += 1;
    }
    debug_assert_eq!(member_counts.iter().sum::<usize>(), clients.len());

    let submissions: Vec<(usize, Model)> =
        outcomes.into_iter().map(|o| (o.cluster, o.model)).collect();
    let models = aggregate_cluster(state, &submissions)?;
    let record = RoundRecord {
        round,
        assignments,
        selected_loss,
        selected_risk,
        member_counts,
        models: models.clone(),
    };
    let next = ClusterSet { models, risks: risk_table.to_vec(), round: round + 1 };
    Ok((next, record))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub num_clusters: usize,
    pub algorithm: Algorithm,
    pub rounds: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub local_steps: usize,
    /// Risk re-evaluation cadence in rounds (0 disables the red team).
    pub eval_period: usize,
    pub shadow_count: usize,
}

pub struct TrainSetup<'a> {
    pub config: TrainConfig,
    pub clients: &'a [Batch],
    pub profiles: &'a [ClientProfile],
    /// Server-held pool for the red team; without it risks stay at 0.5.
    pub shadow_pool: Option<&'a ShadowPool>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub config: TrainConfig,
    pub seed: u64,
    pub initial: ClusterSet,
    pub rounds: Vec<RoundRecord>,
    pub final_clusters: ClusterSet,
    pub risk_history: Vec<MiaRiskTable>,
}

impl TrainingRun {
    pub fn final_assignments(&self) -> Option<&[usize]> {
        self.rounds.last().map(|r| r.assignments.as_slice())
    }
}

/// Runs the full loop for `config.rounds` rounds. In ifca-mir mode the red
/// team re-scores every cluster at rounds `t ≡ 0 (mod eval_period)`; clients
/// see the most recent table in between. In ifca mode profiles are forced to
/// `alpha = 1` and the red team never runs.
pub fn train(setup: &TrainSetup) -> Result<TrainingRun> {
    let cfg = &setup.config;
    cfg.model.validate()?;
    if setup.clients.is_empty() || setup.clients.len() != setup.profiles.len() {
        return Err(Error::input("clients and profiles must be nonempty and aligned"));
    }
    for p in setup.profiles {
        p.validate()?;
    }
    if cfg.local_steps == 0 {
        return Err(Error::input("local_steps must be positive"));
    }

    let effective: Vec<ClientProfile> = match cfg.algorithm {
        Algorithm::Ifca => {
            setup.profiles.iter().map(|p| ClientProfile { alpha: 1.0, beta: 0.0, ..*p }).collect()
        }
        Algorithm::IfcaMir => setup.profiles.to_vec(),
    };

    let mut state = ClusterSet::init(cfg.model, cfg.num_clusters, setup.seed)?;
    let initial = state.clone();
    let mut rounds = Vec::with_capacity(cfg.rounds);
    let mut risk_history: Vec<MiaRiskTable> = Vec::new();

    for t in 0..cfg.rounds {
        if cfg.algorithm == Algorithm::IfcaMir && cfg.eval_period > 0 && t % cfg.eval_period == 0 {
            if let Some(pool) = setup.shadow_pool {
                let table = evaluate_risks(&state, setup, t, rounds.last(), pool)?;
                state.risks = table.risks.clone();
                risk_history.push(table);
            }
        }
        let (next, record) = run_round(
            &state,
            setup.clients,
            &effective,
            &state.risks,
            cfg.learning_rate,
            cfg.batch_size,
            cfg.local_steps,
            setup.seed,
        )?;
        state = next;
        rounds.push(record);
    }

    Ok(TrainingRun {
        config: cfg.clone(),
        seed: setup.seed,
        initial,
        rounds,
        final_clusters: state,
        risk_history,
    })
}

/// Member sample volume per cluster under the latest assignment (an even
/// split before the first round).
fn member_sample_counts(
    num_clusters: usize,
    clients: &[Batch],
    last: Option<&RoundRecord>,
) -> Vec<usize> {
    match last {
        None => {
            let total: usize = clients.iter().map(|b| b.len()).sum();
            vec![(total / num_clusters).max(1); num_clusters]
        }
        Some(record) => {
            let mut sums = vec![0usize; num_clusters];
            for (i, &a) in record.assignments.iter().enumerate() {
                sums[a] += clients[i].len();
            }
            sums
        }
    }
}

fn evaluate_risks(
    state: &ClusterSet,
    setup: &TrainSetup,
    t: usize,
    last: Option<&RoundRecord>,
    pool: &ShadowPool,
) -> Result<MiaRiskTable> {
    let s = state.num_clusters();
    let member_samples = member_sample_counts(s, setup.clients, last);
    let budget = TrainingBudget {
        steps: t * setup.config.local_steps,
        learning_rate: setup.config.learning_rate,
        batch_size: setup.config.batch_size,
    };
    let mut risks = Vec::with_capacity(s);
    let mut attacks = Vec::with_capacity(s);
    let mut warnings = Vec::new();
    for j in 0..s {
        let est = redteam::estimate_mia_risk(
            &state.models[j],
            pool,
            &budget,
            member_samples[j],
            setup.config.shadow_count,
            stream::derive(setup.seed, &[tag::RISK, t as u64, j as u64]),
        )?;
        risks.push(est.risk);
        attacks.push(est.attack);
        if let Some(w) = est.warning {
            warnings.push(format!("round {t}, cluster {j}: {w}"));
        }
    }
    Ok(MiaRiskTable { round: t, risks, attacks, warnings })
}
