//! Non-IID population builder: majority/minority client groups with
//! per-client deformations, group-conditional test sets, and the server's
//! shadow pool.

pub mod deform;
pub mod glyphs;
pub mod idx;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fedcore::ClientProfile;
use crate::numkit::{argmax, Batch, Matrix};
use crate::stream::{self, tag};

/// Distance between latent cluster means in the gaussian source.
const CLUSTER_MEAN_SPREAD: f64 = 3.0;

/// Sensitive attribute. The minority group is the smaller, more exposed one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Group {
    Majority,
    Minority,
}

impl Group {
    pub const ALL: [Group; 2] = [Group::Majority, Group::Minority];

    /// Stable numeric id, also the S ∈ {0,1} sensitive-attribute encoding.
    pub fn index(self) -> usize {
        match self {
            Group::Majority => 0,
            Group::Minority => 1,
        }
    }

    fn tag(self) -> u64 {
        self.index() as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataPoint {
    pub features: Vec<f64>,
    pub label: usize,
    pub group: Group,
    /// Position in the originating source; unique across a population, which
    /// is what makes client/shadow/test disjointness checkable by index.
    pub source_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Deformation {
    Rotation,
    Brightness,
    SyntheticMeanShift,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationSpec {
    pub num_clients: usize,
    pub num_clusters: usize,
    pub minority_fraction: f64,
    pub samples_per_client: usize,
    pub deformation: Deformation,
    pub majority_range: [f64; 2],
    pub minority_range: [f64; 2],
    pub shadow_pool_size: usize,
    #[serde(default = "default_test_per_group")]
    pub test_per_group: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_test_per_group() -> usize {
    200
}

impl PopulationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::input("population needs at least one client"));
        }
        if self.num_clusters == 0 {
            return Err(Error::input("population needs at least one cluster"));
        }
        if !(self.minority_fraction > 0.0 && self.minority_fraction < 1.0) {
            return Err(Error::input("minority_fraction must lie in (0,1)"));
        }
        if self.samples_per_client == 0 {
            return Err(Error::input("samples_per_client must be positive"));
        }
        if self.test_per_group == 0 {
            return Err(Error::input("test_per_group must be positive"));
        }
        for (name, range) in [("majority_range", self.majority_range), ("minority_range", self.minority_range)] {
            if !(range[0].is_finite() && range[1].is_finite() && range[0] <= range[1]) {
                return Err(Error::input(format!("{name} must be a well-ordered finite interval")));
            }
            if self.deformation == Deformation::Brightness && range[0] <= 0.0 {
                return Err(Error::input(format!("{name} must be positive for brightness")));
            }
        }
        Ok(())
    }

    fn minority_clients(&self) -> usize {
        (self.minority_fraction * self.num_clients as f64).floor() as usize
    }

    fn group_of(&self, client_id: usize) -> Group {
        if client_id < self.minority_clients() {
            Group::Minority
        } else {
            Group::Majority
        }
    }

    fn range_of(&self, group: Group) -> [f64; 2] {
        match group {
            Group::Majority => self.majority_range,
            Group::Minority => self.minority_range,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClientDataset {
    pub client_id: usize,
    pub group: Group,
    /// Deformation parameter (angle, brightness factor, or mean shift).
    pub deform_param: f64,
    pub points: Vec<DataPoint>,
}

impl ClientDataset {
    pub fn to_batch(&self) -> Result<Batch> {
        points_to_batch(&self.points)
    }
}

#[derive(Debug, Clone)]
pub struct ShadowPool {
    pub points: Vec<DataPoint>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Population {
    pub clients: Vec<ClientDataset>,
    pub shadow: ShadowPool,
    pub test_majority: Vec<DataPoint>,
    pub test_minority: Vec<DataPoint>,
}

impl Population {
    pub fn test_set(&self, group: Group) -> &[DataPoint] {
        match group {
            Group::Majority => &self.test_majority,
            Group::Minority => &self.test_minority,
        }
    }
}

/// Data source feeding a population: a concrete point list (IDX files,
/// glyphs) or the gaussian generator with latent per-cluster structure.
#[derive(Debug, Clone)]
pub enum Source {
    Points(Vec<DataPoint>),
    Gaussian { input_dim: usize, num_classes: usize },
}

/// Stacks points into a classification batch.
pub fn points_to_batch(points: &[DataPoint]) -> Result<Batch> {
    let cols = points.first().map(|p| p.features.len()).unwrap_or(0);
    let mut data = Vec::with_capacity(points.len() * cols);
    let mut labels = Vec::with_capacity(points.len());
    for p in points {
        if p.features.len() != cols {
            return Err(Error::input("points have inconsistent feature lengths"));
        }
        data.extend_from_slice(&p.features);
        labels.push(p.label);
    }
    Batch::classification(Matrix::new(points.len(), cols, data)?, labels)
}

/// Builds the full population: grouped clients with per-client deformation
/// parameters drawn from their group's range, an undeformed shadow pool, and
/// group-conditional test sets, all disjoint by source index.
pub fn synthesize_population(spec: &PopulationSpec, source: &Source) -> Result<Population> {
    spec.validate()?;
    match source {
        Source::Points(points) => from_points(spec, points),
        Source::Gaussian { input_dim, num_classes } => gaussian(spec, *input_dim, *num_classes),
    }
}

fn uniform_in<R: Rng>(range: [f64; 2], rng: &mut R) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.gen_range(range[0]..range[1])
    }
}

fn deform_features(deformation: Deformation, features: &[f64], param: f64) -> Result<Vec<f64>> {
    match deformation {
        Deformation::Rotation => deform::rotate_image(features, param),
        Deformation::Brightness => deform::adjust_brightness(features, param),
        Deformation::SyntheticMeanShift => {
            Err(Error::input("synthetic-mean-shift requires the gaussian source"))
        }
    }
}

fn from_points(spec: &PopulationSpec, points: &[DataPoint]) -> Result<Population> {
    let n = spec.num_clients;
    let spc = spec.samples_per_client;
    let needed = n * spc + spec.shadow_pool_size + 2 * spec.test_per_group;
    if points.len() < needed {
        return Err(Error::input(format!(
            "source has {} points but the population needs {needed}",
            points.len()
        )));
    }

    let mut order: Vec<usize> = (0..points.len()).collect();
    order.shuffle(&mut stream::rng(spec.seed, &[tag::PARTITION]));

    let mut clients = Vec::with_capacity(n);
    for i in 0..n {
        let group = spec.group_of(i);
        let param = uniform_in(spec.range_of(group), &mut stream::rng(spec.seed, &[tag::DEFORM, i as u64]));
        let mut pts = Vec::with_capacity(spc);
        for k in 0..spc {
            let src_idx = order[i * spc + k];
            let src = &points[src_idx];
            pts.push(DataPoint {
                features: deform_features(spec.deformation, &src.features, param)?,
                label: src.label,
                group,
                source_index: src_idx,
            });
        }
        clients.push(ClientDataset { client_id: i, group, deform_param: param, points: pts });
    }

    let mut cursor = n * spc;
    let shadow_points: Vec<DataPoint> = (0..spec.shadow_pool_size)
        .map(|k| {
            let src_idx = order[cursor + k];
            let src = &points[src_idx];
            DataPoint { features: src.features.clone(), label: src.label, group: src.group, source_index: src_idx }
        })
        .collect();
    cursor += spec.shadow_pool_size;

    let mut test_sets = Vec::new();
    for group in Group::ALL {
        let mut rng = stream::rng(spec.seed, &[tag::TEST_DEFORM, group.tag()]);
        let mut set = Vec::with_capacity(spec.test_per_group);
        for k in 0..spec.test_per_group {
            let src_idx = order[cursor + k];
            let src = &points[src_idx];
            let param = uniform_in(spec.range_of(group), &mut rng);
            set.push(DataPoint {
                features: deform_features(spec.deformation, &src.features, param)?,
                label: src.label,
                group,
                source_index: src_idx,
            });
        }
        cursor += spec.test_per_group;
        test_sets.push(set);
    }
    let test_minority = test_sets.pop().unwrap();
    let test_majority = test_sets.pop().unwrap();

    Ok(Population {
        clients,
        shadow: ShadowPool { points: shadow_points, seed: spec.seed },
        test_majority,
        test_minority,
    })
}

struct LatentCluster {
    mean: Vec<f64>,
    teacher: Vec<f64>,
}

fn unit_vector<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    for x in &mut v {
        *x /= norm;
    }
    v
}

fn gaussian(spec: &PopulationSpec, input_dim: usize, num_classes: usize) -> Result<Population> {
    if input_dim == 0 {
        return Err(Error::input("gaussian source needs input_dim >= 1"));
    }
    if num_classes < 2 {
        return Err(Error::input("gaussian source needs at least 2 classes"));
    }
    if spec.deformation != Deformation::SyntheticMeanShift {
        return Err(Error::input("gaussian source supports only synthetic-mean-shift"));
    }

    let scale = 1.0 / (input_dim as f64).sqrt();
    let latent: Vec<LatentCluster> = (0..spec.num_clusters)
        .map(|j| {
            let mut rng = stream::rng(spec.seed, &[tag::TEACHER, j as u64]);
            let mut mean = unit_vector(input_dim, &mut rng);
            for x in &mut mean {
                *x *= CLUSTER_MEAN_SPREAD;
            }
            let teacher = (0..num_classes * input_dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
                .collect();
            LatentCluster { mean, teacher }
        })
        .collect();
    let shift_dir = unit_vector(input_dim, &mut stream::rng(spec.seed, &[tag::TEACHER]));

    let sample = |cluster: &LatentCluster, shift: f64, rng: &mut rand_chacha::ChaCha8Rng| {
        let features: Vec<f64> = (0..input_dim)
            .map(|d| cluster.mean[d] + shift * shift_dir[d] + rng.sample::<f64, _>(StandardNormal))
            .collect();
        let logits: Vec<f64> = (0..num_classes)
            .map(|c| {
                cluster.teacher[c * input_dim..(c + 1) * input_dim]
                    .iter()
                    .zip(&features)
                    .map(|(w, x)| w * x)
                    .sum()
            })
            .collect();
        (features, argmax(&logits))
    };

    let n = spec.num_clients;
    let spc = spec.samples_per_client;
    let mut clients = Vec::with_capacity(n);
    for i in 0..n {
        let group = spec.group_of(i);
        let param = uniform_in(spec.range_of(group), &mut stream::rng(spec.seed, &[tag::DEFORM, i as u64]));
        let cluster = &latent[i % spec.num_clusters];
        let mut rng = stream::rng(spec.seed, &[tag::SYNTH_SAMPLE, 0, i as u64]);
        let points = (0..spc)
            .map(|k| {
                let (features, label) = sample(cluster, param, &mut rng);
                DataPoint { features, label, group, source_index: i * spc + k }
            })
            .collect();
        clients.push(ClientDataset { client_id: i, group, deform_param: param, points });
    }

    let mut base = n * spc;
    let minority_share = (spec.minority_fraction * spec.shadow_pool_size as f64).floor() as usize;
    let mut param_rng = stream::rng(spec.seed, &[tag::SHADOW_DEFORM]);
    let mut sample_rng = stream::rng(spec.seed, &[tag::SYNTH_SAMPLE, 1, 0]);
    let shadow_points: Vec<DataPoint> = (0..spec.shadow_pool_size)
        .map(|k| {
            let group = if k < minority_share { Group::Minority } else { Group::Majority };
            let param = uniform_in(spec.range_of(group), &mut param_rng);
            let (features, label) = sample(&latent[k % spec.num_clusters], param, &mut sample_rng);
            DataPoint { features, label, group, source_index: base + k }
        })
        .collect();
    base += spec.shadow_pool_size;

    let mut test_sets = Vec::new();
    for group in Group::ALL {
        let mut param_rng = stream::rng(spec.seed, &[tag::TEST_DEFORM, group.tag()]);
        let mut sample_rng = stream::rng(spec.seed, &[tag::SYNTH_SAMPLE, 2 + group.tag(), 0]);
        let set: Vec<DataPoint> = (0..spec.test_per_group)
            .map(|k| {
                let param = uniform_in(spec.range_of(group), &mut param_rng);
                let (features, label) = sample(&latent[k % spec.num_clusters], param, &mut sample_rng);
                DataPoint { features, label, group, source_index: base + k }
            })
            .collect();
        base += spec.test_per_group;
        test_sets.push(set);
    }
    let test_minority = test_sets.pop().unwrap();
    let test_majority = test_sets.pop().unwrap();

    Ok(Population {
        clients,
        shadow: ShadowPool { points: shadow_points, seed: spec.seed },
        test_majority,
        test_minority,
    })
}

/// How clients weight accuracy (α) against privacy (β = 1 − α).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaPolicy {
    Fixed(f64),
    Uniform([f64; 2]),
}

impl AlphaPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            AlphaPolicy::Fixed(a) => {
                if !(a.is_finite() && (0.0..=1.0).contains(&a)) {
                    return Err(Error::input("fixed alpha must lie in [0,1]"));
                }
            }
            AlphaPolicy::Uniform([lo, hi]) => {
                if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi && hi <= 1.0) {
                    return Err(Error::input("uniform alpha range must be ordered within [0,1]"));
                }
            }
        }
        Ok(())
    }
}

/// Draws per-client (α, β, τ) profiles. β = 1 − α exactly; τ uniform in
/// `threshold_range`, drawn independently of α. Group tags default to
/// majority; callers overwrite them from the population's grouping.
pub fn assign_client_profiles(
    n: usize,
    alpha_policy: AlphaPolicy,
    threshold_range: [f64; 2],
    seed: u64,
) -> Result<Vec<ClientProfile>> {
    alpha_policy.validate()?;
    let [lo, hi] = threshold_range;
    if !(lo.is_finite() && hi.is_finite() && 0.5 <= lo && lo <= hi && hi <= 1.0) {
        return Err(Error::input("threshold range must be ordered within [0.5,1.0]"));
    }
    Ok((0..n)
        .map(|i| {
            let mut rng = stream::rng(seed, &[tag::PROFILE, i as u64]);
            let alpha = match alpha_policy {
                AlphaPolicy::Fixed(a) => a,
                AlphaPolicy::Uniform(range) => uniform_in(range, &mut rng),
            };
            let mia_threshold = uniform_in(threshold_range, &mut rng);
            ClientProfile { client_id: i, alpha, beta: 1.0 - alpha, mia_threshold, group: Group::Majority }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn image_spec(n: usize, p: f64, seed: u64) -> PopulationSpec {
        PopulationSpec {
            num_clients: n,
            num_clusters: 2,
            minority_fraction: p,
            samples_per_client: 4,
            deformation: Deformation::Rotation,
            majority_range: [20.0, 40.0],
            minority_range: [0.0, 20.0],
            shadow_pool_size: 12,
            test_per_group: 6,
            seed,
        }
    }

    fn glyph_source(count: usize) -> Source {
        Source::Points(glyphs::glyph_corpus(count, 12, 4, 77).unwrap())
    }

    fn gauss_spec(n: usize, p: f64, seed: u64) -> PopulationSpec {
        PopulationSpec {
            num_clients: n,
            num_clusters: 2,
            minority_fraction: p,
            samples_per_client: 5,
            deformation: Deformation::SyntheticMeanShift,
            majority_range: [1.0, 2.0],
            minority_range: [0.0, 1.0],
            shadow_pool_size: 10,
            test_per_group: 8,
            seed,
        }
    }

    #[test]
    fn minority_split_counts() {
        let src = Source::Gaussian { input_dim: 4, num_classes: 2 };
        let pop = synthesize_population(&gauss_spec(20, 0.1, 1), &src).unwrap();
        assert_eq!(pop.clients.iter().filter(|c| c.group == Group::Minority).count(), 2);
        let pop = synthesize_population(&gauss_spec(20, 0.5, 1), &src).unwrap();
        assert_eq!(pop.clients.iter().filter(|c| c.group == Group::Minority).count(), 10);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = image_spec(5, 0.4, 9);
        let src = glyph_source(60);
        let a = synthesize_population(&spec, &src).unwrap();
        let b = synthesize_population(&spec, &src).unwrap();
        for (ca, cb) in a.clients.iter().zip(&b.clients) {
            assert_eq!(ca.deform_param, cb.deform_param);
            for (pa, pb) in ca.points.iter().zip(&cb.points) {
                assert_eq!(pa.features, pb.features);
            }
        }
    }

    #[test]
    fn client_param_is_independent_of_population_size() {
        let src = Source::Gaussian { input_dim: 3, num_classes: 2 };
        let small = synthesize_population(&gauss_spec(6, 0.4, 5), &src).unwrap();
        let large = synthesize_population(&gauss_spec(12, 0.4, 5), &src).unwrap();
        // Client 2 is minority in both populations (floor(0.4*6)=2 vs floor(0.4*12)=4
        // puts id 1 in minority both times; id 1 keeps its group and its draw).
        assert_eq!(small.clients[1].deform_param, large.clients[1].deform_param);
    }

    #[test]
    fn params_respect_group_ranges() {
        let spec = image_spec(10, 0.3, 21);
        let pop = synthesize_population(&spec, &glyph_source(100)).unwrap();
        for c in &pop.clients {
            let [lo, hi] = spec.range_of(c.group);
            assert!(c.deform_param >= lo && c.deform_param <= hi);
            assert!(c.points.iter().all(|p| p.group == c.group));
            assert_eq!(c.points.len(), spec.samples_per_client);
        }
    }

    #[test]
    fn partition_is_disjoint_by_source_index() {
        let spec = image_spec(8, 0.25, 3);
        let pop = synthesize_population(&spec, &glyph_source(80)).unwrap();
        let mut seen = HashSet::new();
        let mut total = 0;
        for c in &pop.clients {
            for p in &c.points {
                assert!(seen.insert(p.source_index), "client point reused");
                total += 1;
            }
        }
        for p in pop
            .shadow
            .points
            .iter()
            .chain(&pop.test_majority)
            .chain(&pop.test_minority)
        {
            assert!(seen.insert(p.source_index), "shadow/test point reused");
            total += 1;
        }
        assert_eq!(total, 8 * 4 + 12 + 2 * 6);
    }

    #[test]
    fn insufficient_source_is_input_error() {
        let spec = image_spec(8, 0.25, 3);
        assert!(matches!(
            synthesize_population(&spec, &glyph_source(20)),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn mean_shift_requires_gaussian_source() {
        let mut spec = image_spec(2, 0.4, 0);
        spec.deformation = Deformation::SyntheticMeanShift;
        assert!(matches!(
            synthesize_population(&spec, &glyph_source(60)),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn gaussian_population_is_well_formed() {
        let src = Source::Gaussian { input_dim: 6, num_classes: 3 };
        let pop = synthesize_population(&gauss_spec(10, 0.3, 13), &src).unwrap();
        for c in &pop.clients {
            for p in &c.points {
                assert!(p.label < 3);
                assert!(p.features.iter().all(|v| v.is_finite()));
            }
        }
        assert_eq!(pop.shadow.points.len(), 10);
        assert_eq!(pop.test_minority.len(), 8);
    }

    #[test]
    fn fixed_alpha_one_gives_zero_beta() {
        let profiles = assign_client_profiles(20, AlphaPolicy::Fixed(1.0), [0.5, 0.8], 4).unwrap();
        for p in &profiles {
            assert_eq!(p.alpha, 1.0);
            assert_eq!(p.beta, 0.0);
        }
    }

    #[test]
    fn alpha_beta_sum_to_one_exactly() {
        let profiles =
            assign_client_profiles(500, AlphaPolicy::Uniform([0.0, 1.0]), [0.5, 0.8], 11).unwrap();
        for p in &profiles {
            assert_eq!(p.alpha + p.beta, 1.0);
        }
    }

    #[test]
    fn thresholds_average_to_range_midpoint() {
        let profiles =
            assign_client_profiles(10_000, AlphaPolicy::Fixed(0.5), [0.5, 0.8], 123).unwrap();
        let mean: f64 =
            profiles.iter().map(|p| p.mia_threshold).sum::<f64>() / profiles.len() as f64;
        assert!((mean - 0.65).abs() < 0.02, "mean threshold {mean}");
        assert!(profiles.iter().all(|p| (0.5..0.8).contains(&p.mia_threshold)));
    }

    #[test]
    fn invalid_ranges_are_rejected() {
        assert!(assign_client_profiles(2, AlphaPolicy::Fixed(0.5), [0.2, 0.4], 0).is_err());
        assert!(assign_client_profiles(2, AlphaPolicy::Fixed(0.5), [0.8, 0.5], 0).is_err());
        assert!(assign_client_profiles(2, AlphaPolicy::Fixed(1.5), [0.5, 0.8], 0).is_err());
        assert!(assign_client_profiles(2, AlphaPolicy::Uniform([0.5, 0.2]), [0.5, 0.8], 0).is_err());
    }

    #[test]
    fn profile_draws_are_per_client_streams() {
        let a = assign_client_profiles(5, AlphaPolicy::Uniform([0.0, 1.0]), [0.5, 0.8], 7).unwrap();
        let b = assign_client_profiles(9, AlphaPolicy::Uniform([0.0, 1.0]), [0.5, 0.8], 7).unwrap();
        for (pa, pb) in a.iter().zip(&b) {
            assert_eq!(pa.alpha, pb.alpha);
            assert_eq!(pa.mia_threshold, pb.mia_threshold);
        }
    }
}
