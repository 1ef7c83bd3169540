//! Evaluation: per-group accuracy, fairness gaps, threshold violations, and
//! a synthetic probe that checks the clustered loop contracts at the rate
//! linear theory predicts.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::datagen::Group;
use crate::error::{Error, Result};
use crate::fedcore::{run_round, ClientProfile, ClusterSet, TrainingRun};
use crate::numkit::{l2_distance, Batch, Matrix, Model, ModelSpec};
use crate::stream::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledPrediction {
    pub true_label: usize,
    pub predicted_label: usize,
    pub group: Group,
    pub cluster: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupAccuracy {
    pub overall: f64,
    /// None when the group has no samples.
    pub majority: Option<f64>,
    pub minority: Option<f64>,
}

pub fn group_accuracy(preds: &[LabeledPrediction]) -> Result<GroupAccuracy> {
    if preds.is_empty() {
        return Err(Error::input("accuracy needs at least one prediction"));
    }
    let mut total = [0usize; 2];
    let mut correct = [0usize; 2];
    for p in preds {
        let g = p.group.index();
        total[g] += 1;
        if p.predicted_label == p.true_label {
            correct[g] += 1;
        }
    }
    let rate = |g: usize| {
        (total[g] > 0).then(|| correct[g] as f64 / total[g] as f64)
    };
    let overall = (correct[0] + correct[1]) as f64 / preds.len() as f64;
    Ok(GroupAccuracy {
        overall,
        majority: rate(Group::Majority.index()),
        minority: rate(Group::Minority.index()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FairnessReport {
    pub positive_class: usize,
    /// |P(Ŷ=pos | majority) − P(Ŷ=pos | minority)|.
    pub dp_diff: f64,
    /// TPR gap; None when either group has no positive-class samples.
    pub eo_diff: Option<f64>,
    /// max(TPR gap, FPR gap) over the gaps that are defined.
    pub eodds_diff: Option<f64>,
}

pub fn fairness_report(
    preds: &[LabeledPrediction],
    positive_class: usize,
) -> Result<FairnessReport> {
    let mut n = [0usize; 2];
    let mut pred_pos = [0usize; 2];
    let mut true_pos = [0usize; 2];
    let mut true_neg = [0usize; 2];
    let mut tp = [0usize; 2];
    let mut fp = [0usize; 2];
    for p in preds {
        let g = p.group.index();
        n[g] += 1;
        let predicted = p.predicted_label == positive_class;
        if predicted {
            pred_pos[g] += 1;
        }
        if p.true_label == positive_class {
            true_pos[g] += 1;
            if predicted {
                tp[g] += 1;
            }
        } else {
            true_neg[g] += 1;
            if predicted {
                fp[g] += 1;
            }
        }
    }
    if n[0] == 0 || n[1] == 0 {
        return Err(Error::input("fairness gaps need samples from both groups"));
    }

    let gap = |num: [usize; 2], den: [usize; 2]| -> Option<f64> {
        (den[0] > 0 && den[1] > 0)
            .then(|| (num[0] as f64 / den[0] as f64 - num[1] as f64 / den[1] as f64).abs())
    };
    let dp_diff = gap(pred_pos, n).expect("both groups nonempty");
    let eo_diff = gap(tp, true_pos);
    let fpr_gap = gap(fp, true_neg);
    let eodds_diff = match (eo_diff, fpr_gap) {
        (Some(a), Some(b)) => Some(a.max(b)),
        (Some(a), None) | (None, Some(a)) => Some(a),
        (None, None) => None,
    };
    Ok(FairnessReport { positive_class, dp_diff, eo_diff, eodds_diff })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClientViolation {
    pub client_id: usize,
    pub mia_threshold: f64,
    pub cluster: usize,
    pub violated: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViolationReport {
    /// Measured attack accuracy per cluster.
    pub cluster_mia_accuracy: Vec<f64>,
    pub clients: Vec<ClientViolation>,
    pub total_violations: usize,
}

/// A client is violated when the measured attack accuracy against its final
/// cluster strictly exceeds its threshold.
pub fn count_mia_violations(
    run: &TrainingRun,
    cluster_mia_accuracy: &[f64],
    profiles: &[ClientProfile],
) -> Result<ViolationReport> {
    let assignments = run
        .final_assignments()
        .ok_or_else(|| Error::input("run has no completed rounds"))?;
    if cluster_mia_accuracy.len() != run.final_clusters.num_clusters() {
        return Err(Error::input("need one measured attack accuracy per cluster"));
    }
    if profiles.len() != assignments.len() {
        return Err(Error::input("profiles do not align with the run's clients"));
    }
    let clients: Vec<ClientViolation> = profiles
        .iter()
        .zip(assignments)
        .map(|(p, &cluster)| ClientViolation {
            client_id: p.client_id,
            mia_threshold: p.mia_threshold,
            cluster,
            violated: cluster_mia_accuracy[cluster] > p.mia_threshold,
        })
        .collect();
    let total_violations = clients.iter().filter(|c| c.violated).count();
    Ok(ViolationReport {
        cluster_mia_accuracy: cluster_mia_accuracy.to_vec(),
        clients,
        total_violations,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceTrace {
    /// `distances[j][t]` is the distance of cluster j's model to its
    /// reference after t rounds; index 0 is the initialization.
    pub distances: Vec<Vec<f64>>,
    /// Mean selected-model mini-batch loss per round.
    pub mean_losses: Vec<f64>,
}

pub fn convergence_trace(run: &TrainingRun, reference: &[Model]) -> Result<ConvergenceTrace> {
    let s = run.initial.num_clusters();
    if reference.len() != s {
        return Err(Error::input("need one reference model per cluster"));
    }
    for r in reference {
        if r.spec != run.config.model {
            return Err(Error::input("reference model spec does not match the run"));
        }
    }
    let mut distances: Vec<Vec<f64>> = Vec::with_capacity(s);
    for j in 0..s {
        let mut trace = Vec::with_capacity(run.rounds.len() + 1);
        trace.push(l2_distance(&run.initial.models[j].params, &reference[j].params));
        for record in &run.rounds {
            trace.push(l2_distance(&record.models[j].params, &reference[j].params));
        }
        distances.push(trace);
    }
    let mean_losses = run
        .rounds
        .iter()
        .map(|r| r.selected_loss.iter().sum::<f64>() / r.selected_loss.len() as f64)
        .collect();
    Ok(ConvergenceTrace { distances, mean_losses })
}

/// Synthetic linear-regression scenario with known optima: `num_clusters`
/// orthogonal solutions separated by `separation`, features with covariance
/// eigenvalues spanning `[lambda, smoothness]`, and clients initialized
/// inside the basin radius `(1/2 - init_margin) * sqrt(lambda/smoothness) *
/// separation`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceProbe {
    pub num_clusters: usize,
    pub dim: usize,
    pub clients_per_cluster: usize,
    pub samples_per_client: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub smoothness: f64,
    pub separation: f64,
    pub noise_std: f64,
    pub init_margin: f64,
    /// Additive tolerance on the contraction-rate comparison.
    pub ratio_slack: f64,
    pub seeds: Vec<u64>,
}

impl ConvergenceProbe {
    pub fn validate(&self) -> Result<()> {
        if self.num_clusters == 0 || self.clients_per_cluster == 0 {
            return Err(Error::input("probe needs at least one cluster and client"));
        }
        if self.dim < self.num_clusters {
            return Err(Error::input("probe dimension must cover the orthogonal optima"));
        }
        if self.batch_size == 0 || self.batch_size > self.samples_per_client {
            return Err(Error::input("probe batch size must fit the per-client samples"));
        }
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !pos(self.lambda) || !pos(self.smoothness) || self.lambda > self.smoothness {
            return Err(Error::input("need 0 < lambda <= smoothness"));
        }
        if !pos(self.separation) {
            return Err(Error::input("separation must be positive"));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(Error::input("noise_std must be nonnegative"));
        }
        if !(0.0..0.5).contains(&self.init_margin) {
            return Err(Error::input("init_margin must lie in [0, 0.5)"));
        }
        if !self.ratio_slack.is_finite() || self.ratio_slack < 0.0 {
            return Err(Error::input("ratio_slack must be nonnegative"));
        }
        if self.seeds.is_empty() {
            return Err(Error::input("probe needs at least one seed"));
        }
        Ok(())
    }

    fn optima(&self) -> Result<Vec<Model>> {
        let spec = ModelSpec::linear_regression(self.dim);
        let scale = self.separation / std::f64::consts::SQRT_2;
        (0..self.num_clusters)
            .map(|j| {
                let mut params = vec![0.0; self.dim];
                params[j] = scale;
                Model::from_params(spec, params)
            })
            .collect()
    }

    fn covariance_diag(&self) -> Vec<f64> {
        if self.dim == 1 {
            return vec![self.smoothness];
        }
        let step = (self.smoothness - self.lambda) / (self.dim - 1) as f64;
        (0..self.dim).map(|i| self.lambda + step * i as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSeedReport {
    pub seed: u64,
    /// Mean one-round contraction over rounds still above the noise floor;
    /// None when the trace starts at the floor.
    pub mean_ratio: Option<f64>,
    pub ratio_ok: bool,
    pub converged: bool,
    pub distances: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    /// Theoretical one-round factor `1 - p * lambda / (8 * smoothness)`.
    pub contraction_bound: f64,
    pub pass_fraction: f64,
    pub passed: bool,
    pub seeds: Vec<ProbeSeedReport>,
}

fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    }
}

fn probe_clients(probe: &ConvergenceProbe, optima: &[Model], seed: u64) -> Vec<Batch> {
    let diag: Vec<f64> = probe.covariance_diag().iter().map(|v| v.sqrt()).collect();
    let mut clients = Vec::with_capacity(probe.num_clusters * probe.clients_per_cluster);
    for j in 0..probe.num_clusters {
        for c in 0..probe.clients_per_cluster {
            let mut rng = stream::rng(seed, &[tag::PROBE_DATA, j as u64, c as u64]);
            let n = probe.samples_per_client;
            let mut features = Vec::with_capacity(n * probe.dim);
            let mut targets = Vec::with_capacity(n);
            for _ in 0..n {
                let row: Vec<f64> =
                    diag.iter().map(|s| s * rng.sample::<f64, _>(StandardNormal)).collect();
                let clean: f64 =
                    row.iter().zip(&optima[j].params).map(|(x, w)| x * w).sum();
                let eps: f64 = rng.sample(StandardNormal);
                targets.push(clean + probe.noise_std * eps);
                features.extend_from_slice(&row);
            }
            let matrix = Matrix::new(n, probe.dim, features).expect("probe feature shape");
            clients.push(Batch::regression(matrix, targets).expect("probe targets are finite"));
        }
    }
    clients
}

fn probe_initial_state(probe: &ConvergenceProbe, optima: &[Model], seed: u64) -> ClusterSet {
    let radius = (0.5 - probe.init_margin)
        * (probe.lambda / probe.smoothness).sqrt()
        * probe.separation;
    let models = optima
        .iter()
        .enumerate()
        .map(|(j, opt)| {
            let mut rng = stream::rng(seed, &[tag::PROBE_INIT, j as u64]);
            let mut dir: Vec<f64>;
            loop {
                dir = (0..probe.dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 1e-9 {
                    for v in &mut dir {
                        *v /= norm;
                    }
                    break;
                }
            }
            let params =
                opt.params.iter().zip(&dir).map(|(w, d)| w + radius * d).collect();
            Model::from_params(opt.spec, params).expect("probe init params are finite")
        })
        .collect();
    ClusterSet { models, risks: vec![0.5; probe.num_clusters], round: 0 }
}

fn analyze_seed(
    probe: &ConvergenceProbe,
    seed: u64,
    distances: Vec<Vec<f64>>,
    bound: f64,
) -> ProbeSeedReport {
    let rounds = distances[0].len() - 1;
    let tail = ((rounds + 1) as f64 * 0.2).ceil().max(1.0) as usize;
    let mut ratios = Vec::new();
    let mut converged = true;
    for trace in &distances {
        let floor = median(&trace[trace.len() - tail..]).max(1e-12);
        for t in 0..rounds {
            if trace[t] > 3.0 * floor {
                ratios.push(trace[t + 1] / trace[t]);
            }
        }
        let initial = trace[0];
        let last = *trace.last().expect("trace has the init entry");
        if last > 0.1 * initial {
            converged = false;
        }
        if let Some(enter) = trace.iter().position(|&d| d <= 1.5 * floor) {
            if trace[enter..].iter().any(|&d| d > 3.0 * floor) {
                converged = false;
            }
        }
    }
    let mean_ratio = if ratios.is_empty() {
        None
    } else {
        Some(ratios.iter().sum::<f64>() / ratios.len() as f64)
    };
    let ratio_ok = mean_ratio.map_or(true, |r| r <= bound + probe.ratio_slack);
    ProbeSeedReport { seed, mean_ratio, ratio_ok, converged, distances }
}

/// Runs the probe once per seed with loss-only selection, step size
/// `1/smoothness`, and one local step. A seed passes when its mean
/// contraction ratio stays within the bound (plus slack) and every cluster
/// model converges to its optimum; the probe passes when the fraction of
/// passing seeds reaches `confidence`.
pub fn run_convergence_probe(
    probe: &ConvergenceProbe,
    rounds: usize,
    confidence: f64,
) -> Result<ProbeReport> {
    probe.validate()?;
    if rounds == 0 {
        return Err(Error::input("probe needs at least one round"));
    }
    if !(0.0..=1.0).contains(&confidence) {
        return Err(Error::input("confidence must lie in [0,1]"));
    }
    let optima = probe.optima()?;
    let p = 1.0 / probe.num_clusters as f64;
    let bound = 1.0 - p * probe.lambda / (8.0 * probe.smoothness);
    let learning_rate = 1.0 / probe.smoothness;
    let num_clients = probe.num_clusters * probe.clients_per_cluster;
    let profiles: Vec<ClientProfile> = (0..num_clients)
        .map(|i| ClientProfile {
            client_id: i,
            alpha: 1.0,
            beta: 0.0,
            mia_threshold: 1.0,
            group: Group::Majority,
        })
        .collect();
    let risk_table = vec![0.5; probe.num_clusters];

    let mut seed_reports = Vec::with_capacity(probe.seeds.len());
    for &seed in &probe.seeds {
        let clients = probe_clients(probe, &optima, seed);
        let mut state = probe_initial_state(probe, &optima, seed);
        let run_seed = stream::derive(seed, &[tag::PROBE_RUN]);
        let mut distances: Vec<Vec<f64>> = (0..probe.num_clusters)
            .map(|j| vec![l2_distance(&state.models[j].params, &optima[j].params)])
            .collect();
        for _ in 0..rounds {
            let (next, _) = run_round(
                &state,
                &clients,
                &profiles,
                &risk_table,
                learning_rate,
                probe.batch_size,
                1,
                run_seed,
            )?;
            state = next;
            for (j, trace) in distances.iter_mut().enumerate() {
                trace.push(l2_distance(&state.models[j].params, &optima[j].params));
            }
        }
        seed_reports.push(analyze_seed(probe, seed, distances, bound));
    }

    let passing = seed_reports.iter().filter(|r| r.ratio_ok && r.converged).count();
    let pass_fraction = passing as f64 / seed_reports.len() as f64;
    Ok(ProbeReport {
        contraction_bound: bound,
        pass_fraction,
        passed: pass_fraction >= confidence,
        seeds: seed_reports,
    })
}
