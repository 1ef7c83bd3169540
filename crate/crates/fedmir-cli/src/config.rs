//! JSON experiment configuration.
//!
//! One document drives a whole experiment. `population.seed` is ignored:
//! the runner derives per-repeat seeds from the top-level `seed`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fedmir::datagen::{glyphs, idx, AlphaPolicy, PopulationSpec, Source};
use fedmir::fedcore::Algorithm;
use fedmir::numkit::ModelSpec;
use fedmir::{Error, Result};

fn default_local_steps() -> usize {
    1
}
fn default_eval_period() -> usize {
    5
}
fn default_shadow_count() -> usize {
    3
}
fn default_threshold_range() -> [f64; 2] {
    [0.5, 0.8]
}
fn default_repeats() -> usize {
    5
}
fn default_side() -> usize {
    28
}
fn default_classes() -> usize {
    10
}

/// Where raw points come from before partitioning and deformation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SourceSpec {
    /// IDX image/label file pair.
    Idx { images: PathBuf, labels: PathBuf },
    /// Procedurally rendered glyph images.
    Glyphs {
        count: usize,
        #[serde(default = "default_side")]
        side: usize,
        #[serde(default = "default_classes")]
        classes: usize,
    },
    /// Gaussian generator with latent per-cluster structure.
    Gaussian { input_dim: usize, num_classes: usize },
}

impl SourceSpec {
    /// Whether the source must be rebuilt per repeat. All current sources are
    /// shared: the glyph corpus plays the role of a fixed image dataset
    /// (repeats re-partition it, as with a real MNIST subset), files are
    /// immutable, and the gaussian generator is seeded by the population
    /// itself.
    pub fn per_seed(&self) -> bool {
        false
    }

    pub fn build(&self, seed: u64) -> Result<Source> {
        match self {
            SourceSpec::Idx { images, labels } => Ok(Source::Points(idx::load_idx(images, labels)?)),
            SourceSpec::Glyphs { count, side, classes } => {
                Ok(Source::Points(glyphs::glyph_corpus(*count, *side, *classes, seed)?))
            }
            SourceSpec::Gaussian { input_dim, num_classes } => {
                Ok(Source::Gaussian { input_dim: *input_dim, num_classes: *num_classes })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub population: PopulationSpec,
    pub source: SourceSpec,
    pub model: ModelSpec,
    pub algorithm: Algorithm,
    pub rounds: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    #[serde(default = "default_local_steps")]
    pub local_steps: usize,
    #[serde(default = "default_eval_period")]
    pub eval_period: usize,
    #[serde(default = "default_shadow_count")]
    pub shadow_count: usize,
    pub alpha_policy: AlphaPolicy,
    #[serde(default = "default_threshold_range")]
    pub threshold_range: [f64; 2],
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    pub seed: u64,
    /// Class treated as the positive outcome in fairness gaps.
    #[serde(default)]
    pub positive_class: usize,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.population.validate()?;
        self.model.validate()?;
        self.alpha_policy.validate()?;
        if !self.model.is_classifier() {
            return Err(Error::input("experiments need a classifier model"));
        }
        if self.positive_class >= self.model.num_classes {
            return Err(Error::input(format!(
                "positive_class {} out of range for {} classes",
                self.positive_class, self.model.num_classes
            )));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::input("learning_rate must be positive"));
        }
        if self.batch_size == 0 || self.batch_size > self.population.samples_per_client {
            return Err(Error::input("batch_size must fit within samples_per_client"));
        }
        if self.local_steps == 0 {
            return Err(Error::input("local_steps must be positive"));
        }
        if self.eval_period == 0 {
            return Err(Error::input("eval_period must be positive"));
        }
        if self.shadow_count == 0 {
            return Err(Error::input("shadow_count must be positive"));
        }
        if self.repeats == 0 {
            return Err(Error::input("repeats must be positive"));
        }
        let [lo, hi] = self.threshold_range;
        if !(lo.is_finite() && hi.is_finite() && 0.5 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::input("threshold_range must be ordered within [0.5,1.0]"));
        }
        match &self.source {
            SourceSpec::Gaussian { input_dim, num_classes } => {
                if *input_dim != self.model.input_dim || *num_classes != self.model.num_classes {
                    return Err(Error::input("gaussian source dimensions must match the model"));
                }
            }
            SourceSpec::Glyphs { side, classes, .. } => {
                if side * side != self.model.input_dim {
                    return Err(Error::input("glyph side^2 must match the model input_dim"));
                }
                if *classes != self.model.num_classes {
                    return Err(Error::input("glyph classes must match the model"));
                }
            }
            SourceSpec::Idx { .. } => {}
        }
        Ok(())
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::input(format!("{}: {e}", path.display())))?;
    let config: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    config.validate()?;
    Ok(config)
}
