//! Declarative experiment configuration: a single versioned JSON document
//! binding dataset, architecture, partitioning, training, aggregation,
//! attack plan, and trigger recipe.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{AttackBudget, AttackMethod, TemporalSchedule};
use crate::error::{Error, Result};
use crate::federation::{AggregationRule, PartitionSpec, TrainingConfig};
use crate::net::ArchName;
use crate::trigger::{
    EmbeddingSpec, FractalTemplateSpec, FrequencyWindow, MultiScaleSpec, StaticPatchSpec,
    TriggerSpec,
};

pub const CONFIG_VERSION: u32 = 1;

/// Output root override; run directories are created beneath it.
pub const OUTPUT_ROOT_ENV: &str = "FRACFED_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Procedural { classes: usize, train: usize, test: usize, height: usize, width: usize },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

/// Independent disable switches for the attack's components.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSwitches {
    /// Structure-aware client selection replaced by a random draw.
    #[serde(default)]
    pub no_scc_selection: bool,
    /// Fractal perturbation replaced by the energy-matched static patch.
    #[serde(default)]
    pub no_fractal: bool,
    /// Temporal schedule replaced by constant maximum intensity.
    #[serde(default)]
    pub no_temporal: bool,
    /// Adaptive strength replaced by the fixed base strength.
    #[serde(default)]
    pub no_dynamic_strength: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub method: AttackMethod,
    pub target_class: usize,
    pub budget: AttackBudget,
    pub schedule: TemporalSchedule,
    /// Global base strength epsilon_0.
    pub eps0: f64,
    /// Fraction of each malicious client's batch that is poisoned.
    pub poison_fraction: f64,
    /// Probe dataset size m.
    #[serde(default = "default_probe_count")]
    pub probe_count: usize,
    #[serde(default)]
    pub ablation: AblationSwitches,
}

fn default_probe_count() -> usize {
    32
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedSpec {
    pub master: u64,
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub dataset: DatasetSpec,
    pub architecture: ArchName,
    pub partition: PartitionSpec,
    pub training: TrainingConfig,
    pub aggregation: AggregationRule,
    pub attack: Option<AttackConfig>,
    pub trigger: TriggerSpec,
    pub seeds: SeedSpec,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        match &self.dataset {
            DatasetSpec::Procedural { classes, train, test, height, width } => {
                if *train == 0 || *test == 0 {
                    return Err(Error::Config("dataset needs train and test samples".into()));
                }
                if *classes < 2 || *height < 8 || *width < 8 {
                    return Err(Error::Config("degenerate procedural dataset spec".into()));
                }
            }
            DatasetSpec::Idx { .. } => {}
        }
        self.training.validate()?;
        self.aggregation.validate()?;
        self.trigger.embedding.validate()?;
        self.trigger.scales.validate()?;
        if let Some(attack) = &self.attack {
            attack.budget.validate(self.partition.n_clients)?;
            attack.schedule.validate()?;
            if attack.eps0 < 0.0 || !(0.0..=1.0).contains(&attack.poison_fraction) {
                return Err(Error::Config(
                    "attack needs eps0 >= 0 and poison_fraction in [0, 1]".into(),
                ));
            }
            if attack.probe_count == 0 {
                return Err(Error::Config("probe_count must be positive".into()));
            }
        }
        if self.seeds.repeats == 0 {
            return Err(Error::Config("seeds.repeats must be positive".into()));
        }
        if self.partition.n_clients == 0 {
            return Err(Error::Config("n_clients must be positive".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> Result<String> {
        let canonical = serde_json::to_string(self)?;
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        Ok(hex::encode(hasher.finalize()))
    }

    /// Input image shape `[C, H, W]` implied by the dataset spec.
    pub fn input_shape(&self) -> Result<Vec<usize>> {
        match &self.dataset {
            DatasetSpec::Procedural { height, width, .. } => Ok(vec![3, *height, *width]),
            DatasetSpec::Idx { .. } => {
                Err(Error::Config("IDX input shape is known only after loading".into()))
            }
        }
    }

    /// Minutes-scale laptop preset: 20 clients, 30 rounds, 8-class 16x16
    /// procedural data.
    pub fn desk_preset(
        architecture: ArchName,
        master_seed: u64,
        attack: Option<AttackMethod>,
        output_dir: PathBuf,
    ) -> Self {
        let attack = attack.map(|method| AttackConfig {
            method,
            target_class: 0,
            budget: AttackBudget::count(2),
            schedule: TemporalSchedule { i_max: 1.0, lambda: 0.5 },
            eps0: 8.0,
            poison_fraction: 0.6,
            probe_count: 32,
            ablation: AblationSwitches::default(),
        });
        ExperimentConfig {
            version: CONFIG_VERSION,
            dataset: DatasetSpec::Procedural {
                classes: 8,
                train: 1000,
                test: 256,
                height: 16,
                width: 16,
            },
            architecture,
            partition: PartitionSpec { n_clients: 20, dirichlet_alpha: 0.5 },
            training: TrainingConfig {
                rounds: 30,
                local_epochs: 3,
                lr: 0.03,
                participation_fraction: 0.25,
                ..TrainingConfig::default()
            },
            aggregation: AggregationRule::Fedavg,
            attack,
            trigger: TriggerSpec {
                template: FractalTemplateSpec {
                    seed: 7,
                    height: 16,
                    width: 16,
                    channels: 3,
                    spectral_exponent: 2.0,
                },
                scales: MultiScaleSpec { sigmas: vec![0.0, 1.0, 2.0], alphas: vec![0.5, 0.3, 0.2] },
                embedding: EmbeddingSpec {
                    eps_base: 8.0,
                    compat_exponent: 0.5,
                    window: FrequencyWindow { cutoff: 0.6, rolloff: 0.2 },
                    scc: 1.0,
                },
                static_patch: StaticPatchSpec::default(),
            },
            seeds: SeedSpec { master: master_seed, repeats: 1 },
            output_dir,
        }
    }
}

/// Execution record for one `run` or `sweep` invocation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub kind: String,
    pub config_hash: String,
    pub code_version: String,
    pub master_seed: u64,
    pub repeat_seeds: Vec<u64>,
    pub wall_clock_secs: f64,
    pub output_dir: PathBuf,
    pub metrics_files: Vec<PathBuf>,
    pub rounds_files: Vec<PathBuf>,
    pub probe_files: Vec<PathBuf>,
    pub checkpoint_files: Vec<PathBuf>,
    pub summary_file: Option<PathBuf>,
}
