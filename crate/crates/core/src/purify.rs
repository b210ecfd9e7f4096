//! Test-time VAE purification and the adaptive attack that differentiates
//! through it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attack::{run_attack, AttackConfig, AttackResult, AttackTargets};
use crate::error::{config_err, Result};
use crate::model::{build_model, ArchSpec, Model, ModelKind, ModelPair};
use crate::seed::derive_seed;
use crate::tensor::Tensor;
use crate::trainer::{train, Checkpoint, TrainConfig, TrainHistory, TrainSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PurifierConfig {
    pub hidden: Vec<usize>,
    pub latent: usize,
    pub train: TrainConfig,
}

impl PurifierConfig {
    pub fn arch(&self, width: usize) -> ArchSpec {
        ArchSpec::vae(width, &self.hidden, self.latent)
    }
}

/// A VAE applied to queries before they reach the unlearned model.
#[derive(Clone, Debug, PartialEq)]
pub struct Purifier {
    pub vae: Model,
    pub history: TrainHistory,
}

impl Purifier {
    pub fn new(vae: Model) -> Result<Self> {
        vae.expect_kind(ModelKind::Vae)?;
        if vae.arch.input != vae.arch.output {
            return Err(config_err("purifier must map images to images"));
        }
        Ok(Self { vae, history: TrainHistory::default() })
    }

    /// `decode(mu(x))`.
    pub fn purify(&self, batch: &Tensor) -> Result<Tensor> {
        self.vae.run(batch)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.vae.clone());
        ck.seed_lineage = BTreeMap::from([("purifier/init".to_string(), self.vae.init_seed)]);
        ck
    }
}

/// Trains a VAE to reconstruct the rows of `inputs`.
pub fn train_purifier(inputs: &Tensor, config: &PurifierConfig) -> Result<Purifier> {
    let arch = config.arch(inputs.cols());
    let vae = build_model(&arch, derive_seed(config.train.seed, "purifier/init"))?;
    let data = TrainSet::reconstruction(inputs.clone(), inputs.clone())?;
    let (vae, history) = train(&vae, &data, &config.train)?;
    Ok(Purifier { vae, history })
}

/// Classifier outputs on purified queries.
pub fn purified_logits(purifier: &Purifier, model: &Model, batch: &Tensor) -> Result<Tensor> {
    model.logits(&purifier.purify(batch)?)
}

/// Mapping attack with the purifier composed in front of the unlearned model;
/// gradients flow through the purifier.
pub fn adaptive_uma(
    pair: &ModelPair,
    purifier: Option<&Purifier>,
    targets: &AttackTargets,
    config: &AttackConfig,
) -> Result<AttackResult> {
    run_attack(pair, purifier.map(|p| &p.vae), targets, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DatasetSpec};

    fn config(epochs: usize) -> PurifierConfig {
        PurifierConfig { hidden: vec![32], latent: 8, train: TrainConfig::new(epochs, 0.005, 1) }
    }

    #[test]
    fn purify_is_deterministic_and_in_range() {
        let d = generate_dataset(&DatasetSpec::Glyphs { n: 100, side: 8, classes: 4, noise: 0.05 }, 3).unwrap();
        let p = train_purifier(&d.features, &config(2)).unwrap();
        let a = p.purify(&d.features).unwrap();
        assert_eq!(a, p.purify(&d.features).unwrap());
        assert_eq!(a.shape(), d.features.shape());
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn rejects_non_vae() {
        let m = build_model(&ArchSpec::autoencoder(16, &[8], 4), 0).unwrap();
        assert!(Purifier::new(m).is_err());
    }
}
