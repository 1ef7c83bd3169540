//! Runs configured experiments and persists their results.
//!
//! A run executes `repeats` independent training repetitions (seed + repeat
//! index), evaluates each, and writes `results.csv`, `rounds.csv`,
//! `results.json`, and `config.echo.json`. Repeats execute in parallel;
//! output order and bytes are fixed by the config alone. Wall-clock timings
//! live only in `results.json` so `results.csv` stays byte-reproducible.

use std::borrow::Cow;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use fedmir::datagen::{
    assign_client_profiles, points_to_batch, synthesize_population, DataPoint, Group, Population,
    Source,
};
use fedmir::fedcore::{train, Algorithm, ClientProfile, TrainConfig, TrainSetup, TrainingRun};
use fedmir::metrics::{count_mia_violations, fairness_report, group_accuracy, LabeledPrediction};
use fedmir::numkit::{predict_labels, Batch};
use fedmir::redteam::{estimate_mia_risk, ground_truth_mia_accuracy, TrainingBudget};
use fedmir::stream::{self, tag};
use fedmir::{Error, Result};

use crate::config::ExperimentConfig;
use crate::csvout;

/// Axis label for plain (non-sweep) runs.
pub const NO_AXIS: &str = "none";

#[derive(Debug, Clone, Serialize)]
pub struct ResultRow {
    pub run_id: String,
    pub algorithm: String,
    pub axis: String,
    pub axis_value: f64,
    pub repeat: usize,
    pub seed: u64,
    pub acc_overall: Option<f64>,
    pub acc_majority: Option<f64>,
    pub acc_minority: Option<f64>,
    pub dp_diff: Option<f64>,
    pub eo_diff: Option<f64>,
    pub eodds_diff: Option<f64>,
    pub violations: usize,
    /// Ground-truth attack accuracy of the cluster hosting most of the
    /// group's clients.
    pub mia_acc_majority: Option<f64>,
    pub mia_acc_minority: Option<f64>,
    pub mia_acc_cluster: Vec<f64>,
    /// Reported in results.json only; excluded from results.csv.
    pub wall_clock_seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RoundRow {
    pub run_id: String,
    pub seed: u64,
    pub algorithm: String,
    pub round: usize,
    pub cluster: usize,
    pub member_count: usize,
    pub broadcast_risk: f64,
    pub mean_selected_loss: Option<f64>,
}

#[derive(Debug)]
pub struct RunArtifacts {
    pub rows: Vec<ResultRow>,
    pub round_rows: Vec<RoundRow>,
    /// Repeat indices skipped because the wall-clock budget ran out.
    pub skipped_repeats: Vec<usize>,
    pub num_clusters: usize,
}

impl RunArtifacts {
    pub fn complete(&self) -> bool {
        self.skipped_repeats.is_empty()
    }
}

pub fn results_header(num_clusters: usize) -> Vec<String> {
    let mut header: Vec<String> = [
        "run_id",
        "algorithm",
        "axis",
        "axis_value",
        "repeat",
        "seed",
        "acc_overall",
        "acc_majority",
        "acc_minority",
        "dp_diff",
        "eo_diff",
        "eodds_diff",
        "violations",
        "mia_acc_majority",
        "mia_acc_minority",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for j in 0..num_clusters {
        header.push(format!("mia_acc_cluster_{j}"));
    }
    header
}

pub fn results_row(row: &ResultRow) -> Vec<String> {
    let mut cells = vec![
        row.run_id.clone(),
        row.algorithm.clone(),
        row.axis.clone(),
        csvout::float(row.axis_value),
        row.repeat.to_string(),
        row.seed.to_string(),
        csvout::opt_float(row.acc_overall),
        csvout::opt_float(row.acc_majority),
        csvout::opt_float(row.acc_minority),
        csvout::opt_float(row.dp_diff),
        csvout::opt_float(row.eo_diff),
        csvout::opt_float(row.eodds_diff),
        row.violations.to_string(),
        csvout::opt_float(row.mia_acc_majority),
        csvout::opt_float(row.mia_acc_minority),
    ];
    cells.extend(row.mia_acc_cluster.iter().map(|&v| csvout::float(v)));
    cells
}

fn rounds_header() -> Vec<String> {
    ["run_id", "seed", "algorithm", "round", "cluster", "member_count", "broadcast_risk",
     "mean_selected_loss"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

fn rounds_row(row: &RoundRow) -> Vec<String> {
    vec![
        row.run_id.clone(),
        row.seed.to_string(),
        row.algorithm.clone(),
        row.round.to_string(),
        row.cluster.to_string(),
        row.member_count.to_string(),
        csvout::float(row.broadcast_risk),
        csvout::opt_float(row.mean_selected_loss),
    ]
}

enum RepeatOutcome {
    Done(Box<(ResultRow, Vec<RoundRow>)>),
    Skipped(usize),
}

/// Executes all repeats of one configured experiment.
pub fn run_experiment(
    config: &ExperimentConfig,
    axis: &str,
    axis_value: f64,
    deadline: Option<Instant>,
) -> Result<RunArtifacts> {
    config.validate()?;
    let shared_source =
        if config.source.per_seed() { None } else { Some(config.source.build(config.seed)?) };

    let outcomes: Vec<RepeatOutcome> = (0..config.repeats)
        .into_par_iter()
        .map(|repeat| -> Result<RepeatOutcome> {
            if let Some(d) = deadline {
                if Instant::now() >= d {
                    return Ok(RepeatOutcome::Skipped(repeat));
                }
            }
            let started = Instant::now();
            let seed = config.seed.wrapping_add(repeat as u64);
            let source: Cow<Source> = match &shared_source {
                Some(s) => Cow::Borrowed(s),
                None => Cow::Owned(config.source.build(seed)?),
            };
            let (mut row, round_rows) =
                run_repeat(config, axis, axis_value, repeat, seed, source.as_ref())?;
            row.wall_clock_seconds = started.elapsed().as_secs_f64();
            Ok(RepeatOutcome::Done(Box::new((row, round_rows))))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    let mut round_rows = Vec::new();
    let mut skipped_repeats = Vec::new();
    for outcome in outcomes {
        match outcome {
            RepeatOutcome::Done(done) => {
                let (row, rounds) = *done;
                rows.push(row);
                round_rows.extend(rounds);
            }
            RepeatOutcome::Skipped(r) => skipped_repeats.push(r),
        }
    }
    Ok(RunArtifacts {
        rows,
        round_rows,
        skipped_repeats,
        num_clusters: config.population.num_clusters,
    })
}

fn run_repeat(
    config: &ExperimentConfig,
    axis: &str,
    axis_value: f64,
    repeat: usize,
    seed: u64,
    source: &Source,
) -> Result<(ResultRow, Vec<RoundRow>)> {
    let mut pop_spec = config.population.clone();
    pop_spec.seed = seed;
    let population = synthesize_population(&pop_spec, source)?;
    let clients: Vec<Batch> =
        population.clients.iter().map(|c| c.to_batch()).collect::<Result<Vec<_>>>()?;
    for batch in &clients {
        if batch.features.cols != config.model.input_dim {
            return Err(Error::input(format!(
                "source features have dimension {}, model expects {}",
                batch.features.cols, config.model.input_dim
            )));
        }
    }
    let mut profiles =
        assign_client_profiles(pop_spec.num_clients, config.alpha_policy, config.threshold_range, seed)?;
    for (profile, client) in profiles.iter_mut().zip(&population.clients) {
        profile.group = client.group;
    }

    let setup = TrainSetup {
        config: TrainConfig {
            model: config.model,
            num_clusters: pop_spec.num_clusters,
            algorithm: config.algorithm,
            rounds: config.rounds,
            learning_rate: config.learning_rate,
            batch_size: config.batch_size,
            local_steps: config.local_steps,
            eval_period: config.eval_period,
            shadow_count: config.shadow_count,
        },
        clients: &clients,
        profiles: &profiles,
        shadow_pool: (config.algorithm == Algorithm::IfcaMir).then_some(&population.shadow),
        seed,
    };
    let run = train(&setup)?;

    let run_id = format!("{}-{}-{}-r{}", config.algorithm.as_str(), axis, axis_value, repeat);
    let evaluation = evaluate(config, &population, &run, &profiles, seed)?;
    let row = ResultRow {
        run_id: run_id.clone(),
        algorithm: config.algorithm.as_str().to_string(),
        axis: axis.to_string(),
        axis_value,
        repeat,
        seed,
        acc_overall: evaluation.acc_overall,
        acc_majority: evaluation.acc_majority,
        acc_minority: evaluation.acc_minority,
        dp_diff: evaluation.dp_diff,
        eo_diff: evaluation.eo_diff,
        eodds_diff: evaluation.eodds_diff,
        violations: evaluation.violations,
        mia_acc_majority: evaluation.mia_acc_majority,
        mia_acc_minority: evaluation.mia_acc_minority,
        mia_acc_cluster: evaluation.mia_acc_cluster,
        wall_clock_seconds: 0.0,
    };
    let round_rows = round_rows(&run_id, seed, config.algorithm, &run);
    Ok((row, round_rows))
}

struct Evaluation {
    acc_overall: Option<f64>,
    acc_majority: Option<f64>,
    acc_minority: Option<f64>,
    dp_diff: Option<f64>,
    eo_diff: Option<f64>,
    eodds_diff: Option<f64>,
    violations: usize,
    mia_acc_majority: Option<f64>,
    mia_acc_minority: Option<f64>,
    mia_acc_cluster: Vec<f64>,
}

/// Post-training measurement: each client keeps its final cluster model and
/// is tested on its group's held-out set; every cluster faces a freshly
/// trained shadow attack scored against the true member/non-member split.
fn evaluate(
    config: &ExperimentConfig,
    population: &Population,
    run: &TrainingRun,
    profiles: &[ClientProfile],
    seed: u64,
) -> Result<Evaluation> {
    let s = run.final_clusters.num_clusters();
    let Some(assignments) = run.final_assignments() else {
        return Ok(Evaluation {
            acc_overall: None,
            acc_majority: None,
            acc_minority: None,
            dp_diff: None,
            eo_diff: None,
            eodds_diff: None,
            violations: 0,
            mia_acc_majority: None,
            mia_acc_minority: None,
            mia_acc_cluster: vec![0.5; s],
        });
    };

    let mut preds = Vec::new();
    for (i, client) in population.clients.iter().enumerate() {
        let cluster = assignments[i];
        let model = &run.final_clusters.models[cluster];
        let test = population.test_set(client.group);
        if test.is_empty() {
            continue;
        }
        let batch = points_to_batch(test)?;
        let predicted = predict_labels(model, &batch.features)?;
        for (point, &label) in test.iter().zip(&predicted) {
            preds.push(LabeledPrediction {
                true_label: point.label,
                predicted_label: label,
                group: client.group,
                cluster,
            });
        }
    }
    let accuracy = if preds.is_empty() { None } else { Some(group_accuracy(&preds)?) };
    let fairness = fairness_report(&preds, config.positive_class).ok();

    let budget = TrainingBudget {
        steps: config.rounds * config.local_steps,
        learning_rate: config.learning_rate,
        batch_size: config.batch_size,
    };
    let mut mia_acc_cluster = Vec::with_capacity(s);
    for j in 0..s {
        mia_acc_cluster.push(cluster_ground_truth(
            config,
            population,
            run,
            assignments,
            j,
            &budget,
            seed,
        )?);
    }

    let violation_report = count_mia_violations(run, &mia_acc_cluster, profiles)?;

    let group_mia = |g: Group| {
        dominant_cluster(assignments, &population.clients, s, g).map(|j| mia_acc_cluster[j])
    };

    Ok(Evaluation {
        acc_overall: accuracy.map(|a| a.overall),
        acc_majority: accuracy.and_then(|a| a.majority),
        acc_minority: accuracy.and_then(|a| a.minority),
        dp_diff: fairness.map(|f| f.dp_diff),
        eo_diff: fairness.and_then(|f| f.eo_diff),
        eodds_diff: fairness.and_then(|f| f.eodds_diff),
        violations: violation_report.total_violations,
        mia_acc_majority: group_mia(Group::Majority),
        mia_acc_minority: group_mia(Group::Minority),
        mia_acc_cluster,
    })
}

/// Trains the red-team attack against the final cluster model and scores it
/// on true members (the cluster's actual training points) vs held-out points
/// of the same groups. Degenerate clusters report the uninformative 0.5.
fn cluster_ground_truth(
    config: &ExperimentConfig,
    population: &Population,
    run: &TrainingRun,
    assignments: &[usize],
    cluster: usize,
    budget: &TrainingBudget,
    seed: u64,
) -> Result<f64> {
    let members: Vec<DataPoint> = population
        .clients
        .iter()
        .enumerate()
        .filter(|(i, _)| assignments[*i] == cluster)
        .flat_map(|(_, c)| c.points.iter().cloned())
        .collect();
    if members.is_empty() {
        return Ok(0.5);
    }
    let estimate = estimate_mia_risk(
        &run.final_clusters.models[cluster],
        &population.shadow,
        budget,
        members.len(),
        config.shadow_count,
        stream::derive(seed, &[tag::RISK, config.rounds as u64, cluster as u64]),
    )?;
    let Some(attack) = estimate.attack else {
        return Ok(0.5);
    };
    let mut member_group_counts = [0usize; 2];
    for (i, client) in population.clients.iter().enumerate() {
        if assignments[i] == cluster {
            member_group_counts[client.group.index()] += client.points.len();
        }
    }
    // Non-members mirror the member group mixture so the attack is scored on
    // membership rather than on spotting a foreign group's deformation. The
    // held-out points come from the groups' test sets, which the cluster
    // model never trained on.
    let mut nonmembers: Vec<DataPoint> = Vec::new();
    let mut holdout_rng =
        stream::rng(seed, &[tag::HOLDOUT, config.rounds as u64, cluster as u64]);
    for g in Group::ALL {
        let count = member_group_counts[g.index()];
        if count == 0 {
            continue;
        }
        let test = population.test_set(g);
        if test.is_empty() {
            continue;
        }
        let share = count as f64 / members.len() as f64;
        let want = ((share * test.len() as f64).round() as usize).clamp(1, test.len());
        for idx in rand::seq::index::sample(&mut holdout_rng, test.len(), want) {
            nonmembers.push(test[idx].clone());
        }
    }
    if nonmembers.is_empty() {
        return Ok(0.5);
    }
    ground_truth_mia_accuracy(&attack, &run.final_clusters.models[cluster], &members, &nonmembers)
}

/// The cluster holding the plurality of the group's clients (ties toward the
/// lowest index); None when the group has no clients.
fn dominant_cluster(
    assignments: &[usize],
    clients: &[fedmir::datagen::ClientDataset],
    num_clusters: usize,
    group: Group,
) -> Option<usize> {
    let mut counts = vec![0usize; num_clusters];
    let mut any = false;
    for (i, client) in clients.iter().enumerate() {
        if client.group == group {
            counts[assignments[i]] += 1;
            any = true;
        }
    }
    if !any {
        return None;
    }
    let mut best = 0;
    for j in 1..num_clusters {
        if counts[j] > counts[best] {
            best = j;
        }
    }
    Some(best)
}

fn round_rows(run_id: &str, seed: u64, algorithm: Algorithm, run: &TrainingRun) -> Vec<RoundRow> {
    let s = run.final_clusters.num_clusters();
    let mut rows = Vec::with_capacity(run.rounds.len() * s);
    for record in &run.rounds {
        let risks: Vec<f64> = run
            .risk_history
            .iter()
            .rev()
            .find(|t| t.round <= record.round)
            .map(|t| t.risks.clone())
            .unwrap_or_else(|| vec![0.5; s]);
        for j in 0..s {
            let losses: Vec<f64> = record
                .assignments
                .iter()
                .zip(&record.selected_loss)
                .filter(|(&a, _)| a == j)
                .map(|(_, &l)| l)
                .collect();
            let mean_selected_loss = if losses.is_empty() {
                None
            } else {
                Some(losses.iter().sum::<f64>() / losses.len() as f64)
            };
            rows.push(RoundRow {
                run_id: run_id.to_string(),
                seed,
                algorithm: algorithm.as_str().to_string(),
                round: record.round,
                cluster: j,
                member_count: record.member_counts[j],
                broadcast_risk: risks[j],
                mean_selected_loss,
            });
        }
    }
    rows
}

#[derive(Serialize)]
struct ResultsJson<'a> {
    status: &'a str,
    skipped_repeats: &'a [usize],
    rows: &'a [ResultRow],
}

/// Writes the four run artifacts atomically into `out_dir`.
pub fn write_run_outputs(
    out_dir: &Path,
    config: &ExperimentConfig,
    artifacts: &RunArtifacts,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;

    let mut echo = serde_json::to_string_pretty(config)
        .map_err(|e| Error::format(e.to_string()))?;
    echo.push('\n');
    csvout::write_atomic(&out_dir.join("config.echo.json"), echo.as_bytes())?;

    let header = results_header(artifacts.num_clusters);
    let rows: Vec<Vec<String>> = artifacts.rows.iter().map(results_row).collect();
    csvout::write_atomic(&out_dir.join("results.csv"), &csvout::to_csv_bytes(&header, &rows)?)?;

    let rrows: Vec<Vec<String>> = artifacts.round_rows.iter().map(rounds_row).collect();
    csvout::write_atomic(&out_dir.join("rounds.csv"), &csvout::to_csv_bytes(&rounds_header(), &rrows)?)?;

    let json = ResultsJson {
        status: if artifacts.complete() { "complete" } else { "incomplete" },
        skipped_repeats: &artifacts.skipped_repeats,
        rows: &artifacts.rows,
    };
    let mut body =
        serde_json::to_string_pretty(&json).map_err(|e| Error::format(e.to_string()))?;
    body.push('\n');
    csvout::write_atomic(&out_dir.join("results.json"), body.as_bytes())?;
    Ok(())
}

/// `run`: one experiment, all repeats. Returns whether everything finished
/// within the wall-clock budget.
pub fn cmd_run(
    config: &ExperimentConfig,
    out_dir: &Path,
    deadline: Option<Instant>,
) -> Result<bool> {
    let artifacts = run_experiment(config, NO_AXIS, 0.0, deadline)?;
    write_run_outputs(out_dir, config, &artifacts)?;
    Ok(artifacts.complete())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    /// Varies the share of minority clients.
    MinorityFraction,
    /// Width of the deformation-parameter gap: minority draws from [0, v],
    /// majority from [v, 2v].
    DeformationGap,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::MinorityFraction => "minority-fraction",
            SweepAxis::DeformationGap => "deformation-gap",
        }
    }

    pub fn apply(self, config: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let mut adjusted = config.clone();
        match self {
            SweepAxis::MinorityFraction => {
                adjusted.population.minority_fraction = value;
            }
            SweepAxis::DeformationGap => {
                if !value.is_finite() || value <= 0.0 {
                    return Err(Error::input("deformation-gap values must be positive"));
                }
                adjusted.population.minority_range = [0.0, value];
                adjusted.population.majority_range = [value, 2.0 * value];
            }
        }
        adjusted.validate()?;
        Ok(adjusted)
    }
}

/// `sweep`: both algorithms at every axis value, each into its own
/// subdirectory, plus one concatenated long-format `sweep.csv`.
pub fn cmd_sweep(
    config: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
    out_dir: &Path,
    deadline: Option<Instant>,
) -> Result<bool> {
    if values.is_empty() {
        return Err(Error::input("sweep needs at least one value"));
    }
    let mut all_rows: Vec<Vec<String>> = Vec::new();
    let mut complete = true;
    for &value in values {
        for algorithm in [Algorithm::Ifca, Algorithm::IfcaMir] {
            let mut point = axis.apply(config, value)?;
            point.algorithm = algorithm;
            let artifacts = run_experiment(&point, axis.name(), value, deadline)?;
            let sub = out_dir.join(format!("{}-{}-{}", axis.name(), value, algorithm.as_str()));
            write_run_outputs(&sub, &point, &artifacts)?;
            complete &= artifacts.complete();
            all_rows.extend(artifacts.rows.iter().map(results_row));
        }
    }
    let header = results_header(config.population.num_clusters);
    csvout::write_atomic(&out_dir.join("sweep.csv"), &csvout::to_csv_bytes(&header, &all_rows)?)?;
    Ok(complete)
}
