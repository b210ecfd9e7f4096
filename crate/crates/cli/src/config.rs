use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use uma_core::attack::{AttackConfig, AttackMode};
use uma_core::data::{DatasetSpec, ForgetSpec, MaskSpec};
use uma_core::digest::json_digest;
use uma_core::model::{ArchSpec, ModelKind};
use uma_core::purify::PurifierConfig;
use uma_core::trainer::TrainConfig;
use uma_core::unlearn::UnlearnConfig;
use uma_core::verify::{MiaConfig, RobustnessThresholds};

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub hidden: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseConfig {
    pub purifier: PurifierConfig,
    /// Also run the attack that differentiates through the purifier.
    #[serde(default = "yes")]
    pub adaptive: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Label of the unlearning run to attack.
    pub method: String,
    pub epsilon: f64,
    #[serde(default)]
    pub steps: Vec<usize>,
    /// Step sizes in input units.
    #[serde(default)]
    pub step_size: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub master_seed: u64,
    pub dataset: DatasetSpec,
    pub split: ForgetSpec,
    pub model: ModelSpec,
    pub train: TrainConfig,
    /// Masking for autoencoder pipelines.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inpainting: Option<MaskSpec>,
    pub unlearn: Vec<UnlearnConfig>,
    pub attacks: Vec<AttackConfig>,
    /// Defaults to thresholds anchored on the `retrain` run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thresholds: Option<RobustnessThresholds>,
    #[serde(default)]
    pub mia: MiaConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub defenses: Option<DefenseConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

fn attack_order(a: &AttackConfig) -> f64 {
    match a.mode {
        AttackMode::Bounded { epsilon } => epsilon,
        AttackMode::Unbounded => f64::INFINITY,
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let config: Self = serde_json::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn digest(&self) -> String {
        json_digest(self)
    }

    pub fn arch(&self) -> ArchSpec {
        let width = self.dataset.width();
        match self.model.kind {
            ModelKind::Classifier => ArchSpec::classifier(width, &self.model.hidden, self.dataset.classes()),
            ModelKind::Autoencoder => ArchSpec::autoencoder(width, &self.model.hidden, self.model.latent.unwrap_or(0)),
            ModelKind::Vae => ArchSpec::vae(width, &self.model.hidden, self.model.latent.unwrap_or(0)),
        }
    }

    /// Display labels of the unlearning runs, suffixed with the run index when
    /// two runs share a label.
    pub fn run_labels(&self) -> Vec<String> {
        let base: Vec<String> = self.unlearn.iter().map(UnlearnConfig::label).collect();
        base.iter()
            .enumerate()
            .map(|(i, l)| if base.iter().filter(|b| *b == l).count() > 1 { format!("{l}#{i}") } else { l.clone() })
            .collect()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.version != CONFIG_VERSION {
            return bad(format!("unsupported config version {}", self.version));
        }
        self.arch().validate().map_err(CliError::from)?;
        if self.model.kind == ModelKind::Vae {
            return bad("the experiment model must be a classifier or an autoencoder".into());
        }
        let autoencoder = self.model.kind == ModelKind::Autoencoder;
        if autoencoder != self.inpainting.is_some() {
            return bad("`inpainting` is required exactly for autoencoder experiments".into());
        }
        self.train.validate().map_err(CliError::from)?;
        if self.unlearn.is_empty() {
            return bad("at least one unlearning run is required".into());
        }
        for u in &self.unlearn {
            if !u.method.supports(self.model.kind) {
                return bad(format!("{} cannot unlearn a {} model", u.method, self.model.kind));
            }
            if u.inpainting.is_some() {
                return bad("set `inpainting` at the experiment level".into());
            }
        }
        if self.attacks.is_empty() {
            return bad("at least one attack is required".into());
        }
        for a in &self.attacks {
            a.validate().map_err(CliError::from)?;
            if !autoencoder && a.mode == AttackMode::Unbounded {
                return bad("attacks on classifiers must be bounded".into());
            }
        }
        if self.attacks.windows(2).any(|w| attack_order(&w[0]) >= attack_order(&w[1])) {
            return bad("the ε grid must be strictly ascending".into());
        }
        if let Some(t) = &self.thresholds {
            t.validate().map_err(CliError::from)?;
        } else if !self.unlearn.iter().any(|u| u.method == uma_core::unlearn::Method::Retrain && u.adversarial.is_none()) {
            return bad("thresholds are missing and there is no retrain run to anchor them".into());
        }
        if let Some(d) = &self.defenses {
            if autoencoder {
                return bad("defenses apply to classifier experiments".into());
            }
            d.purifier.train.validate().map_err(CliError::from)?;
        }
        if let Some(s) = &self.sweep {
            if autoencoder {
                return bad("sweeps apply to classifier experiments".into());
            }
            if !self.run_labels().contains(&s.method) {
                return bad(format!("sweep method `{}` is not an unlearning run", s.method));
            }
            if !(s.epsilon > 0.0) {
                return bad("sweep ε must be positive".into());
            }
        }
        Ok(())
    }
}
