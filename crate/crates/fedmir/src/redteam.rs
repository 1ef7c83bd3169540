//! Server-side membership-inference red team.
//!
//! The pipeline mirrors what an honest-but-curious server can do with its own
//! shadow pool: train shadow models under the same regime as a target cluster,
//! label their member/non-member confidence profiles, fit a logistic attack
//! model, and report its balanced accuracy ℓ = (TPR + TNR) / 2 on a held-out
//! attack-eval split. 0.5 means the attack learned nothing.

use rand::seq::SliceRandom;

use crate::datagen::{points_to_batch, DataPoint, ShadowPool};
use crate::error::{Error, Result};
use crate::numkit::{
    batch_gradient, predict_proba, sgd_step, Batch, Matrix, Model, ModelSpec, LOG_CLAMP,
};
use crate::stream::{self, tag};

const ATTACK_EPOCHS: usize = 50;
const ATTACK_BATCH: usize = 32;
const ATTACK_LR: f64 = 0.2;
const ATTACK_TRAIN_FRACTION: f64 = 0.8;

/// Optimization regime a shadow model copies from its target cluster.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingBudget {
    /// Accumulated SGD steps of the target cluster so far.
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl TrainingBudget {
    fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::input("budget learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::input("budget batch size must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ShadowSplit {
    pub shadow_index: usize,
    pub in_set: Vec<DataPoint>,
    pub out_set: Vec<DataPoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackExample {
    /// Sorted class probabilities (descending) followed by the true-label
    /// cross-entropy loss.
    pub features: Vec<f64>,
    pub member: bool,
}

/// Confidence-derived attack features for one prediction.
pub fn attack_features(probs: &[f64], true_label: usize) -> Vec<f64> {
    let mut f = probs.to_vec();
    f.sort_by(|a, b| b.partial_cmp(a).expect("finite probabilities"));
    f.push(-probs[true_label].max(LOG_CLAMP).ln());
    f
}

/// Logistic member/non-member classifier with a 0.5 decision threshold.
/// Features are standardized with statistics frozen from the training split.
#[derive(Debug, Clone)]
pub struct AttackModel {
    model: Model,
    means: Vec<f64>,
    stds: Vec<f64>,
}

impl AttackModel {
    pub fn feature_dim(&self) -> usize {
        self.model.spec.input_dim
    }

    fn standardize(&self, features: &[f64]) -> Vec<f64> {
        features
            .iter()
            .zip(self.means.iter().zip(&self.stds))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }

    /// Probability that the sample behind these features was a member.
    pub fn member_probability(&self, features: &[f64]) -> Result<f64> {
        if features.len() != self.feature_dim() {
            return Err(Error::input(format!(
                "attack features have length {}, expected {}",
                features.len(),
                self.feature_dim()
            )));
        }
        let row = Matrix::new(1, features.len(), self.standardize(features))?;
        Ok(predict_proba(&self.model, &row)?.row(0)[1])
    }

    pub fn predicts_member(&self, features: &[f64]) -> Result<bool> {
        Ok(self.member_probability(features)? > 0.5)
    }
}

#[derive(Debug, Clone)]
pub struct TrainedAttack {
    pub attack: AttackModel,
    /// Held-out attack examples reserved for evaluating ℓ.
    pub eval: Vec<AttackExample>,
}

/// Per-round red-team output broadcast to clients.
#[derive(Debug, Clone)]
pub struct MiaRiskTable {
    pub round: usize,
    pub risks: Vec<f64>,
    pub attacks: Vec<Option<AttackModel>>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RiskEstimate {
    pub risk: f64,
    pub attack: Option<AttackModel>,
    pub warning: Option<String>,
}

/// Trains `k` shadow models, each on its own member sample of
/// `member_set_size` points drawn without replacement from the pool, with a
/// disjoint non-member sample of equal size.
pub fn train_shadow_models(
    pool: &ShadowPool,
    spec: ModelSpec,
    k: usize,
    member_set_size: usize,
    budget: &TrainingBudget,
    seed: u64,
) -> Result<Vec<(Model, ShadowSplit)>> {
    spec.validate()?;
    budget.validate()?;
    if k == 0 {
        return Err(Error::input("need at least one shadow model"));
    }
    if member_set_size == 0 {
        return Err(Error::input("shadow member set must be nonempty"));
    }
    if 2 * member_set_size > pool.points.len() {
        return Err(Error::input(format!(
            "shadow pool of {} cannot supply disjoint in/out sets of {member_set_size}",
            pool.points.len()
        )));
    }

    let mut shadows = Vec::with_capacity(k);
    for i in 0..k {
        let mut split_rng = stream::rng(seed, &[tag::SHADOW_SPLIT, i as u64]);
        let picks =
            rand::seq::index::sample(&mut split_rng, pool.points.len(), 2 * member_set_size)
                .into_vec();
        let in_set: Vec<DataPoint> =
            picks[..member_set_size].iter().map(|&j| pool.points[j].clone()).collect();
        let out_set: Vec<DataPoint> =
            picks[member_set_size..].iter().map(|&j| pool.points[j].clone()).collect();

        let mut init_rng = stream::rng(seed, &[tag::SHADOW_INIT, i as u64]);
        let mut model = Model::init(spec, &mut init_rng)?;
        let train_batch = points_to_batch(&in_set)?;
        let mini = budget.batch_size.min(member_set_size);
        let mut batch_rng = stream::rng(seed, &[tag::SHADOW_BATCH, i as u64]);
        for _ in 0..budget.steps {
            let rows = rand::seq::index::sample(&mut batch_rng, member_set_size, mini).into_vec();
            let grad = batch_gradient(&model, &train_batch.select(&rows))?;
            model = sgd_step(&model, &grad, budget.learning_rate)?;
        }
        shadows.push((model, ShadowSplit { shadow_index: i, in_set, out_set }));
    }
    Ok(shadows)
}

/// One attack example per (shadow, point) pair across both splits; balanced
/// by construction.
pub fn build_attack_dataset(shadows: &[(Model, ShadowSplit)]) -> Result<Vec<AttackExample>> {
    if shadows.is_empty() {
        return Err(Error::input("no shadow models"));
    }
    let mut examples = Vec::new();
    for (model, split) in shadows {
        for (points, member) in [(&split.in_set, true), (&split.out_set, false)] {
            if points.is_empty() {
                return Err(Error::input("shadow split has an empty side"));
            }
            let batch = points_to_batch(points)?;
            let probs = predict_proba(model, &batch.features)?;
            for (i, p) in points.iter().enumerate() {
                examples.push(AttackExample {
                    features: attack_features(probs.row(i), p.label),
                    member,
                });
            }
        }
    }
    Ok(examples)
}

/// Fits the logistic attack model by SGD on a shuffled 80% split and returns
/// it together with the held-out 20% eval split.
pub fn train_attack_model(examples: &[AttackExample], seed: u64) -> Result<TrainedAttack> {
    let dim = examples.first().map(|e| e.features.len()).unwrap_or(0);
    if examples.iter().any(|e| e.features.len() != dim) {
        return Err(Error::input("attack examples have inconsistent feature lengths"));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = stream::rng(seed, &[tag::ATTACK]);
    order.shuffle(&mut rng);
    let train_n = ((examples.len() as f64) * ATTACK_TRAIN_FRACTION).floor() as usize;
    if train_n == 0 || train_n == examples.len() {
        return Err(Error::input("attack dataset too small to split"));
    }
    let (train_idx, eval_idx) = order.split_at(train_n);
    let train: Vec<&AttackExample> = train_idx.iter().map(|&i| &examples[i]).collect();
    if train.iter().all(|e| e.member) || train.iter().all(|e| !e.member) {
        return Err(Error::input("attack training split has a single label"));
    }

    let mut means = vec![0.0; dim];
    for e in &train {
        for (m, x) in means.iter_mut().zip(&e.features) {
            *m += x;
        }
    }
    for m in &mut means {
        *m /= train.len() as f64;
    }
    let mut stds = vec![0.0; dim];
    for e in &train {
        for (s, (x, m)) in stds.iter_mut().zip(e.features.iter().zip(&means)) {
            *s += (x - m) * (x - m);
        }
    }
    for s in &mut stds {
        *s = (*s / train.len() as f64).sqrt().max(1e-9);
    }

    let feats: Vec<f64> = train
        .iter()
        .flat_map(|e| {
            e.features
                .iter()
                .zip(means.iter().zip(&stds))
                .map(|(x, (m, s))| (x - m) / s)
                .collect::<Vec<f64>>()
        })
        .collect();
    let labels: Vec<usize> = train.iter().map(|e| e.member as usize).collect();
    let batch = Batch::classification(Matrix::new(train.len(), dim, feats)?, labels)?;

    // Zero init keeps the fit exactly symmetric under member-label flips.
    let mut model = Model::zeros(ModelSpec::softmax(dim, 2))?;
    let mini = ATTACK_BATCH.min(train.len());
    let mut idx: Vec<usize> = (0..train.len()).collect();
    for _ in 0..ATTACK_EPOCHS {
        idx.shuffle(&mut rng);
        for chunk in idx.chunks(mini) {
            let grad = batch_gradient(&model, &batch.select(chunk))?;
            model = sgd_step(&model, &grad, ATTACK_LR)?;
        }
    }

    Ok(TrainedAttack {
        attack: AttackModel { model, means, stds },
        eval: eval_idx.iter().map(|&i| examples[i].clone()).collect(),
    })
}

/// Balanced attack accuracy (TPR + TNR)/2 over labeled examples; `None` when
/// either label is absent.
pub fn attack_accuracy(attack: &AttackModel, examples: &[AttackExample]) -> Result<Option<f64>> {
    let mut hits = [0usize; 2];
    let mut totals = [0usize; 2];
    for e in examples {
        let side = e.member as usize;
        totals[side] += 1;
        if attack.predicts_member(&e.features)? == e.member {
            hits[side] += 1;
        }
    }
    if totals[0] == 0 || totals[1] == 0 {
        return Ok(None);
    }
    let tnr = hits[0] as f64 / totals[0] as f64;
    let tpr = hits[1] as f64 / totals[1] as f64;
    Ok(Some((tpr + tnr) / 2.0))
}

/// Full red-team pass for one cluster model: shadows mimicking the cluster's
/// regime (member set size capped at half the pool), attack model, and ℓ on
/// the held-out split. Degenerate pipelines yield ℓ = 0.5 plus a warning
/// instead of an error so training never stalls.
pub fn estimate_mia_risk(
    target: &Model,
    pool: &ShadowPool,
    budget: &TrainingBudget,
    cluster_member_size: usize,
    k: usize,
    seed: u64,
) -> Result<RiskEstimate> {
    if k == 0 {
        return Err(Error::input("need at least one shadow model"));
    }
    budget.validate()?;
    let member_set_size = cluster_member_size.min(pool.points.len() / 2);
    if member_set_size == 0 {
        return Ok(degenerate("shadow pool exhausted or empty target cluster"));
    }
    let outcome = (|| -> Result<(f64, AttackModel)> {
        let shadows = train_shadow_models(pool, target.spec, k, member_set_size, budget, seed)?;
        let examples = build_attack_dataset(&shadows)?;
        let trained = train_attack_model(&examples, seed)?;
        let acc = attack_accuracy(&trained.attack, &trained.eval)?
            .ok_or_else(|| Error::input("attack eval split has a single label"))?;
        Ok((acc.clamp(0.0, 1.0), trained.attack))
    })();
    Ok(match outcome {
        Ok((risk, attack)) => RiskEstimate { risk, attack: Some(attack), warning: None },
        Err(e) => degenerate(&e.to_string()),
    })
}

fn degenerate(reason: &str) -> RiskEstimate {
    RiskEstimate { risk: 0.5, attack: None, warning: Some(reason.to_string()) }
}

/// Attack accuracy against real data: TPR over actual members, TNR over
/// actual non-members of the target model.
pub fn ground_truth_mia_accuracy(
    attack: &AttackModel,
    target: &Model,
    member_data: &[DataPoint],
    nonmember_data: &[DataPoint],
) -> Result<f64> {
    if member_data.is_empty() || nonmember_data.is_empty() {
        return Err(Error::input("ground-truth evaluation needs both member and non-member data"));
    }
    let mut rates = [0.0; 2];
    for (side, points) in [(1usize, member_data), (0usize, nonmember_data)] {
        let batch = points_to_batch(points)?;
        let probs = predict_proba(target, &batch.features)?;
        let mut hits = 0usize;
        for (i, p) in points.iter().enumerate() {
            let member = attack.predicts_member(&attack_features(probs.row(i), p.label))?;
            if member == (side == 1) {
                hits += 1;
            }
        }
        rates[side] = hits as f64 / points.len() as f64;
    }
    Ok((rates[0] + rates[1]) / 2.0)
}
