//! Acceptance gate: nine end-to-end checks of the simulator's headline
//! behaviours, from exact algorithmic identities to the desk-scale privacy /
//! accuracy / fairness trade-off. Each check prints one
//! `CRITERION n: PASS|FAIL - detail` line (visible with `--nocapture`) and
//! asserts the same condition, so a red criterion is a red test.
//!
//! Criteria 3-6 share one lazily built grid over the rotated-glyph benchmark:
//! IFCA at minority fractions {0.10, 0.30, 0.50} plus IFCA-MIR at 0.10, five
//! repeats each. On one core the grid takes roughly eight minutes; everything
//! else is fast.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use once_cell::sync::Lazy;
use rand::Rng;

use fedmir::datagen::{
    assign_client_profiles, glyphs, points_to_batch, synthesize_population, AlphaPolicy,
    Deformation, PopulationSpec, ShadowPool,
};
use fedmir::fedcore::{train, Algorithm, TrainConfig, TrainSetup, TrainingRun};
use fedmir::metrics::{run_convergence_probe, ConvergenceProbe};
use fedmir::numkit::{
    batch_gradient, batch_loss, predict_labels, Batch, Labels, Matrix, Model, ModelSpec,
};
use fedmir::redteam::{estimate_mia_risk, TrainingBudget};
use fedmir::stream;
use fedmir_cli::config::{ExperimentConfig, SourceSpec};
use fedmir_cli::runner::{run_experiment, ResultRow};

fn verdict(criterion: usize, label: &str, pass: bool, detail: &str) {
    let word = if pass { "PASS" } else { "FAIL" };
    println!("CRITERION {criterion} ({label}): {word} - {detail}");
    assert!(pass, "criterion {criterion} ({label}): {detail}");
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

// ---------------------------------------------------------------------------
// Shared benchmark grid for criteria 3-6.

/// The desk-scale benchmark: a 5,000-sample training corpus (50 clients x 100
/// samples) of 28x28 glyphs split into two rotation groups, an MLP head, and
/// five repeats. Both algorithms read the same config except for the
/// `algorithm` field, so per-repeat populations, profiles, and thresholds
/// coincide pairwise.
fn benchmark_config(algorithm: Algorithm, minority_fraction: f64) -> ExperimentConfig {
    ExperimentConfig {
        population: PopulationSpec {
            num_clients: 50,
            num_clusters: 2,
            minority_fraction,
            samples_per_client: 100,
            deformation: Deformation::Rotation,
            majority_range: [0.0, 10.0],
            minority_range: [20.0, 45.0],
            shadow_pool_size: 2000,
            test_per_group: 600,
            seed: 0,
        },
        source: SourceSpec::Glyphs { count: 8200, side: 28, classes: 10 },
        model: ModelSpec::mlp(784, 16, 10),
        algorithm,
        rounds: 80,
        learning_rate: 0.25,
        batch_size: 25,
        local_steps: 5,
        eval_period: 5,
        shadow_count: 3,
        alpha_policy: AlphaPolicy::Uniform([0.0, 0.4]),
        threshold_range: [0.5, 0.8],
        repeats: 5,
        seed: 11,
        positive_class: 0,
    }
}

struct Grid {
    /// IFCA rows at minority fractions 0.10, 0.30, 0.50, sorted by repeat.
    ifca: [Vec<ResultRow>; 3],
    /// IFCA-MIR rows at minority fraction 0.10, sorted by repeat.
    mir: Vec<ResultRow>,
    build_seconds: f64,
}

static GRID: Lazy<Grid> = Lazy::new(|| {
    let started = Instant::now();
    let run = |algorithm, fraction| {
        let config = benchmark_config(algorithm, fraction);
        let artifacts = run_experiment(&config, "minority-fraction", fraction, None)
            .expect("benchmark grid run");
        assert!(artifacts.complete(), "grid run skipped repeats");
        let mut rows = artifacts.rows;
        rows.sort_by_key(|r| r.repeat);
        rows
    };
    let ifca = [run(Algorithm::Ifca, 0.10), run(Algorithm::Ifca, 0.30), run(Algorithm::Ifca, 0.50)];
    let mir = run(Algorithm::IfcaMir, 0.10);
    Grid { ifca, mir, build_seconds: started.elapsed().as_secs_f64() }
});

fn column(rows: &[ResultRow], pick: impl Fn(&ResultRow) -> Option<f64>, what: &str) -> Vec<f64> {
    rows.iter()
        .map(|r| pick(r).unwrap_or_else(|| panic!("{what} missing in repeat {}", r.repeat)))
        .collect()
}

// ---------------------------------------------------------------------------
// Criterion 1: with alpha = 1 everywhere, IFCA-MIR is IFCA, bit for bit.

#[test]
fn criterion_1_alpha_one_mir_reduces_to_ifca() {
    let started = Instant::now();
    let spec = PopulationSpec {
        num_clients: 12,
        num_clusters: 2,
        minority_fraction: 0.25,
        samples_per_client: 40,
        deformation: Deformation::Rotation,
        majority_range: [0.0, 10.0],
        minority_range: [25.0, 40.0],
        shadow_pool_size: 400,
        test_per_group: 150,
        seed: 3,
    };
    let source = SourceSpec::Glyphs { count: 1400, side: 12, classes: 6 }.build(3).unwrap();
    let population = synthesize_population(&spec, &source).unwrap();
    let clients: Vec<Batch> =
        population.clients.iter().map(|c| c.to_batch().unwrap()).collect();
    let profiles =
        assign_client_profiles(spec.num_clients, AlphaPolicy::Fixed(1.0), [0.5, 0.8], 3).unwrap();

    let run = |algorithm| -> TrainingRun {
        let setup = TrainSetup {
            config: TrainConfig {
                model: ModelSpec::softmax(144, 6),
                num_clusters: 2,
                algorithm,
                rounds: 12,
                learning_rate: 0.3,
                batch_size: 10,
                local_steps: 2,
                eval_period: 4,
                shadow_count: 2,
            },
            clients: &clients,
            profiles: &profiles,
            shadow_pool: Some(&population.shadow),
            seed: 31,
        };
        train(&setup).unwrap()
    };

    let baseline = run(Algorithm::Ifca);
    let mir = run(Algorithm::IfcaMir);
    assert!(!mir.risk_history.is_empty(), "red team never ran in mir mode");

    let mut identical = baseline.rounds.len() == mir.rounds.len();
    for (a, b) in baseline.rounds.iter().zip(&mir.rounds) {
        identical &= a.assignments == b.assignments;
        identical &=
            a.models.iter().zip(&b.models).all(|(ma, mb)| ma.params == mb.params);
    }

    // Final per-cluster accuracies on the pooled test set must coincide too.
    let mut test_points = population.test_majority.clone();
    test_points.extend_from_slice(&population.test_minority);
    let test = points_to_batch(&test_points).unwrap();
    let truth = match &test.labels {
        Labels::Classes(c) => c.clone(),
        Labels::Targets(_) => unreachable!("glyph corpus is classification data"),
    };
    let accuracies = |run: &TrainingRun| -> Vec<f64> {
        run.final_clusters
            .models
            .iter()
            .map(|m| {
                let predicted = predict_labels(m, &test.features).unwrap();
                predicted.iter().zip(&truth).filter(|(p, t)| p == t).count() as f64
                    / truth.len() as f64
            })
            .collect()
    };
    identical &= accuracies(&baseline) == accuracies(&mir);

    let elapsed = started.elapsed().as_secs_f64();
    let pass = identical && elapsed < 60.0;
    verdict(
        1,
        "ifca reduction",
        pass,
        &format!(
            "alpha=1 trajectories identical={identical} over {} rounds in {elapsed:.1}s (limit 60s)",
            baseline.rounds.len()
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: analytic gradients vs central finite differences.

fn random_batch<R: Rng>(spec: &ModelSpec, n: usize, rng: &mut R) -> Batch {
    let feats: Vec<f64> = (0..n * spec.input_dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let features = Matrix::new(n, spec.input_dim, feats).unwrap();
    if spec.is_classifier() {
        let labels = (0..n).map(|_| rng.gen_range(0..spec.num_classes)).collect();
        Batch::classification(features, labels).unwrap()
    } else {
        let targets = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        Batch::regression(features, targets).unwrap()
    }
}

fn central_differences(model: &Model, batch: &Batch, h: f64) -> Vec<f64> {
    (0..model.params.len())
        .map(|i| {
            let mut plus = model.clone();
            plus.params[i] += h;
            let mut minus = model.clone();
            minus.params[i] -= h;
            (batch_loss(&plus, batch).unwrap() - batch_loss(&minus, batch).unwrap()) / (2.0 * h)
        })
        .collect()
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale.max(1e-8)
}

#[test]
fn criterion_2_analytic_gradients_match_finite_differences() {
    let started = Instant::now();
    let mut worst = 0.0f64;
    for family in 0..3u64 {
        for trial in 0..100u64 {
            let mut rng = stream::rng(4200 + family, &[trial]);
            let spec = match family {
                0 => ModelSpec::softmax(rng.gen_range(2..=8), rng.gen_range(2..=5)),
                1 => ModelSpec::mlp(
                    rng.gen_range(2..=6),
                    rng.gen_range(2..=6),
                    rng.gen_range(2..=5),
                ),
                _ => ModelSpec::linear_regression(rng.gen_range(1..=8)),
            };
            let mut model = Model::init(spec, &mut rng).unwrap();
            for p in &mut model.params {
                *p += rng.gen_range(-0.5..0.5);
            }
            let n = rng.gen_range(1..=6);
            let batch = random_batch(&spec, n, &mut rng);
            let analytic = batch_gradient(&model, &batch).unwrap();
            let numeric = central_differences(&model, &batch, 1e-6);
            worst = worst.max(relative_error(&analytic, &numeric));
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    let pass = worst <= 1e-5 && elapsed < 60.0;
    verdict(
        2,
        "gradient check",
        pass,
        &format!(
            "100 configs per family, worst relative error {worst:.2e} (limit 1e-5) in {elapsed:.1}s"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 3: the smaller the minority group, the bigger its attack surface.

#[test]
fn criterion_3_minority_attack_accuracy_falls_with_group_size() {
    let grid = &GRID;
    let minority =
        |arm: usize| column(&grid.ifca[arm], |r| r.mia_acc_minority, "minority attack accuracy");
    let m10 = minority(0);
    let m30 = minority(1);
    let m50 = minority(2);
    let monotone =
        (0..5).filter(|&r| m10[r] >= m30[r] && m30[r] >= m50[r]).count();
    let majority10 = column(&grid.ifca[0], |r| r.mia_acc_majority, "majority attack accuracy");
    let gap = mean(&m10) - mean(&majority10);
    let pass = monotone >= 4 && gap >= 0.10 && grid.build_seconds <= 900.0;
    verdict(
        3,
        "mia vs size",
        pass,
        &format!(
            "monotone non-increasing on {monotone}/5 seeds (need >=4); minority-majority gap at \
             0.10 is {gap:.3} (need >=0.10); grid built in {:.0}s (limit 900s)",
            grid.build_seconds
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 4: MIR's privacy detour costs little overall accuracy.

#[test]
fn criterion_4_mir_preserves_overall_accuracy() {
    let grid = &GRID;
    let ifca = mean(&column(&grid.ifca[0], |r| r.acc_overall, "overall accuracy"));
    let mir = mean(&column(&grid.mir, |r| r.acc_overall, "overall accuracy"));
    let diff = (ifca - mir).abs();
    let pass = diff <= 0.05 && grid.build_seconds <= 900.0;
    verdict(
        4,
        "accuracy preservation",
        pass,
        &format!("mean overall accuracy ifca {ifca:.4} vs mir {mir:.4}, |diff| {diff:.4} (limit 0.05)"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 5: MIR never adds threshold violations and usually removes some.

#[test]
fn criterion_5_mir_never_adds_violations_and_usually_removes_some() {
    let grid = &GRID;
    let ifca: Vec<usize> = grid.ifca[0].iter().map(|r| r.violations).collect();
    let mir: Vec<usize> = grid.mir.iter().map(|r| r.violations).collect();
    let never_worse = ifca.iter().zip(&mir).all(|(i, m)| m <= i);
    let strictly_better =
        ifca.iter().zip(&mir).filter(|(i, m)| **i > 0 && m < i).count();
    let pass = never_worse && strictly_better >= 3;
    verdict(
        5,
        "violation reduction",
        pass,
        &format!(
            "violations ifca {ifca:?} vs mir {mir:?}; never worse {never_worse}, strictly \
             smaller on {strictly_better}/5 seeds (need >=3)"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 6: the fairness picture stays put.

#[test]
fn criterion_6_mir_preserves_fairness_gaps() {
    let grid = &GRID;
    let gaps = |rows: &[ResultRow]| -> [f64; 3] {
        [
            mean(&column(rows, |r| r.dp_diff, "dp gap")),
            mean(&column(rows, |r| r.eo_diff, "eo gap")),
            mean(&column(rows, |r| r.eodds_diff, "eodds gap")),
        ]
    };
    let ifca = gaps(&grid.ifca[0]);
    let mir = gaps(&grid.mir);
    let shifts: Vec<f64> = ifca.iter().zip(&mir).map(|(a, b)| (a - b).abs()).collect();
    let pass = shifts.iter().all(|s| *s <= 0.05);
    verdict(
        6,
        "fairness preservation",
        pass,
        &format!(
            "per-seed-mean shifts |dp| {:.4}, |eo| {:.4}, |eodds| {:.4} (each limited to 0.05)",
            shifts[0], shifts[1], shifts[2]
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: the two-cluster quadratic probe contracts at the theory rate.

#[test]
fn criterion_7_contraction_probe_meets_theory_bound() {
    let started = Instant::now();
    let probe = ConvergenceProbe {
        num_clusters: 2,
        dim: 4,
        clients_per_cluster: 4,
        samples_per_client: 60,
        batch_size: 20,
        lambda: 1.0,
        smoothness: 1.0,
        separation: 2.0,
        noise_std: 0.02,
        init_margin: 0.1,
        ratio_slack: 0.05,
        seeds: vec![1, 2, 3, 4, 5],
    };
    let report = run_convergence_probe(&probe, 60, 0.8).unwrap();
    assert!((report.contraction_bound - 0.9375).abs() < 1e-12);

    let mut good_seeds = 0;
    let mut worst_settle = 0.0f64;
    for seed in &report.seeds {
        let settled = seed.distances.iter().all(|d| {
            let ratio = *d.last().unwrap() / d[0];
            worst_settle = worst_settle.max(ratio);
            ratio <= 0.10
        });
        if seed.ratio_ok && settled {
            good_seeds += 1;
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    let pass = good_seeds >= 4 && report.passed && elapsed < 120.0;
    verdict(
        7,
        "contraction probe",
        pass,
        &format!(
            "ratio within 0.9375+0.05 and final distance <=10% of initial on {good_seeds}/5 \
             seeds (need >=4); worst final/initial {worst_settle:.4}; {elapsed:.1}s (limit 120s)"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 8: the risk estimator reads chance for untrained targets and
// flags a memorizing regime.

#[test]
fn criterion_8_risk_estimator_sanity_oracles() {
    let started = Instant::now();
    let target = Model::zeros(ModelSpec::softmax(100, 4)).unwrap();

    let idle_pool =
        ShadowPool { points: glyphs::glyph_corpus(400, 10, 4, 41).unwrap(), seed: 41 };
    let idle = TrainingBudget { steps: 0, learning_rate: 0.2, batch_size: 25 };
    let untrained = estimate_mia_risk(&target, &idle_pool, &idle, 150, 3, 7).unwrap();

    let over_pool =
        ShadowPool { points: glyphs::glyph_corpus(400, 10, 4, 18).unwrap(), seed: 18 };
    let over = TrainingBudget { steps: 500, learning_rate: 0.3, batch_size: 50 };
    let overfit = estimate_mia_risk(&target, &over_pool, &over, 50, 3, 29).unwrap();

    let elapsed = started.elapsed().as_secs_f64();
    let untrained_ok = (0.45..=0.55).contains(&untrained.risk);
    let overfit_ok = overfit.risk >= 0.7;
    let pass = untrained_ok && overfit_ok && elapsed < 300.0;
    verdict(
        8,
        "red-team oracles",
        pass,
        &format!(
            "untrained risk {:.3} (needs [0.45, 0.55]); overfit risk {:.3} with 50 members and \
             a 500-step budget (needs >=0.7); {elapsed:.1}s (limit 300s)",
            untrained.risk, overfit.risk
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 9: identical config and seed give identical bytes, even when the
// repeats run concurrently.

#[test]
fn criterion_9_results_are_byte_reproducible() {
    let config = ExperimentConfig {
        population: PopulationSpec {
            num_clients: 8,
            num_clusters: 2,
            minority_fraction: 0.25,
            samples_per_client: 20,
            deformation: Deformation::SyntheticMeanShift,
            majority_range: [0.5, 1.0],
            minority_range: [0.0, 0.5],
            shadow_pool_size: 200,
            test_per_group: 40,
            seed: 0,
        },
        source: SourceSpec::Gaussian { input_dim: 16, num_classes: 4 },
        model: ModelSpec::softmax(16, 4),
        algorithm: Algorithm::IfcaMir,
        rounds: 6,
        learning_rate: 0.3,
        batch_size: 10,
        local_steps: 1,
        eval_period: 2,
        shadow_count: 2,
        alpha_policy: AlphaPolicy::Uniform([0.0, 1.0]),
        threshold_range: [0.5, 0.8],
        repeats: 3,
        seed: 19,
        positive_class: 0,
    };
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("config.json");
    fs::write(&config_path, serde_json::to_string_pretty(&config).unwrap()).unwrap();

    let run = |out: &Path, threads: &str| -> Vec<u8> {
        let output = Command::new(env!("CARGO_BIN_EXE_fedmir"))
            .env_remove("FEDMIR_OUT_DIR")
            .env_remove("FEDMIR_SEED")
            .env("RAYON_NUM_THREADS", threads)
            .args(["run", "--config"])
            .arg(&config_path)
            .arg("--out")
            .arg(out)
            .output()
            .unwrap();
        assert!(
            output.status.success(),
            "run failed: {}",
            String::from_utf8_lossy(&output.stderr)
        );
        fs::read(out.join("results.csv")).unwrap()
    };

    let serial_a = run(&dir.path().join("a"), "1");
    let serial_b = run(&dir.path().join("b"), "1");
    let concurrent = run(&dir.path().join("c"), "4");

    let rerun_identical = serial_a == serial_b;
    let concurrency_identical = serial_a == concurrent;
    let pass = rerun_identical && concurrency_identical;
    verdict(
        9,
        "determinism",
        pass,
        &format!(
            "results.csv bytes: rerun identical {rerun_identical}, 4-thread run identical \
             {concurrency_identical} ({} bytes)",
            serial_a.len()
        ),
    );
}
