//! Unlearning baselines and adversarial unlearning.
//!
//! Every method starts from the original model and produces a [`ModelPair`].
//! Data is read through an [`AuditedView`], which counts reads of forget rows
//! so that retraining can prove it never touched them.

use std::cell::Cell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::attack::{uma, AttackConfig, AttackMode, AttackTargets};
use crate::data::{InpaintingTask, LabeledDataset, UnlearningSplit};
use crate::digest::json_digest;
use crate::error::{config_err, Error, Result};
use crate::graph::{gradient, Bindings, Graph};
use crate::model::{build_model, Model, ModelKind, ModelPair, Provenance};
use crate::seed::{derive_seed, derived_rng};
use crate::tensor::Tensor;
use crate::trainer::{one_hot, train, OptimizerKind, ParamMask, TrainConfig, TrainSet, Trainer};

pub const DEFAULT_SALIENCY: f64 = 0.5;
pub const DEFAULT_L1: f64 = 5e-4;
pub const DEFAULT_DAMPING: f64 = 20.0;

/// Gray level the generative methods drive forgotten reconstructions toward.
pub const FORGET_FILL: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Retrain,
    Ft,
    Rl,
    Iu,
    L1Sparse,
    Salun,
    GenI2i,
    GenSalun,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Retrain => "retrain",
            Self::Ft => "ft",
            Self::Rl => "rl",
            Self::Iu => "iu",
            Self::L1Sparse => "l1_sparse",
            Self::Salun => "salun",
            Self::GenI2i => "gen_i2i",
            Self::GenSalun => "gen_salun",
        }
    }

    /// Whether the method can unlearn a model of this kind. Retraining and
    /// fine-tuning work for both; the generative methods need autoencoders.
    pub fn supports(&self, kind: ModelKind) -> bool {
        match self {
            Self::Retrain | Self::Ft => matches!(kind, ModelKind::Classifier | ModelKind::Autoencoder),
            Self::GenI2i | Self::GenSalun => kind == ModelKind::Autoencoder,
            _ => kind == ModelKind::Classifier,
        }
    }

    pub fn is_generative(&self) -> bool {
        matches!(self, Self::GenI2i | Self::GenSalun)
    }

    /// Whether the training objective contains a forget-set term.
    pub fn has_forget_objective(&self) -> bool {
        matches!(self, Self::Rl | Self::Salun | Self::GenI2i | Self::GenSalun)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn default_batch() -> usize {
    64
}

fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adam
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnlearnConfig {
    pub method: Method,
    pub epochs: usize,
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    /// l1 coefficient (`l1_sparse` only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l1: Option<f64>,
    /// Fraction of parameters updated (`salun`, `gen_salun`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub saliency: Option<f64>,
    /// Inverse step of the influence update (`iu` only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub damping: Option<f64>,
    /// Masking used by the generative methods.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inpainting: Option<InpaintingTask>,
    /// Inner attack of adversarial unlearning.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adversarial: Option<AttackConfig>,
    #[serde(default)]
    pub seed: u64,
}

impl UnlearnConfig {
    /// Config with the method's default auxiliary fields filled in.
    pub fn new(method: Method, epochs: usize, learning_rate: f64, seed: u64) -> Self {
        Self {
            method,
            epochs,
            learning_rate,
            batch_size: default_batch(),
            optimizer: default_optimizer(),
            l1: None,
            saliency: None,
            damping: None,
            inpainting: None,
            adversarial: None,
            seed,
        }
        .with_defaults()
    }

    /// Fills missing method-specific fields with their defaults.
    pub fn with_defaults(mut self) -> Self {
        match self.method {
            Method::L1Sparse => {
                self.l1.get_or_insert(DEFAULT_L1);
            }
            Method::Salun | Method::GenSalun => {
                self.saliency.get_or_insert(DEFAULT_SALIENCY);
            }
            Method::Iu => {
                self.damping.get_or_insert(DEFAULT_DAMPING);
            }
            _ => {}
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.method;
        let need = |present: bool, required: bool, field: &str| -> Result<()> {
            match (present, required) {
                (true, false) => Err(config_err(format!("`{field}` does not apply to {m}"))),
                (false, true) => Err(config_err(format!("{m} requires `{field}`"))),
                _ => Ok(()),
            }
        };
        need(self.l1.is_some(), m == Method::L1Sparse, "l1")?;
        need(self.saliency.is_some(), matches!(m, Method::Salun | Method::GenSalun), "saliency")?;
        need(self.damping.is_some(), m == Method::Iu, "damping")?;
        if m.is_generative() && self.inpainting.is_none() {
            return Err(config_err(format!("{m} requires `inpainting`")));
        }
        if self.inpainting.is_some() && !m.supports(ModelKind::Autoencoder) {
            return Err(config_err(format!("`inpainting` does not apply to {m}")));
        }
        if let Some(f) = self.saliency {
            if !(f > 0.0 && f <= 1.0) {
                return Err(config_err(format!("saliency fraction {f} outside (0, 1]")));
            }
        }
        if let Some(d) = self.damping {
            if !(d > 0.0) {
                return Err(config_err("damping must be positive"));
            }
        }
        if let Some(l) = self.l1 {
            if !(l >= 0.0) {
                return Err(config_err("l1 coefficient must be non-negative"));
            }
        }
        if !(self.learning_rate >= 0.0) || self.batch_size == 0 {
            return Err(config_err("invalid learning rate or batch size"));
        }
        if let Some(a) = &self.adversarial {
            a.validate()?;
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        json_digest(self)
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs.max(1),
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            optimizer: self.optimizer,
            weight_decay: 0.0,
            l1: self.l1.unwrap_or(0.0),
            seed: derive_seed(self.seed, "train"),
        }
    }

    /// Display name, with `+adv` when an inner attack is configured.
    pub fn label(&self) -> String {
        match &self.adversarial {
            Some(_) => format!("{}+adv", self.method),
            None => self.method.to_string(),
        }
    }
}

/// Row access to a dataset that counts reads of forget rows.
pub struct AuditedView<'a> {
    dataset: &'a LabeledDataset,
    forget: BTreeSet<usize>,
    forget_reads: Cell<usize>,
}

impl<'a> AuditedView<'a> {
    pub fn new(dataset: &'a LabeledDataset, split: &UnlearningSplit) -> Self {
        Self { dataset, forget: split.forget.iter().copied().collect(), forget_reads: Cell::new(0) }
    }

    fn audit(&self, indices: &[usize]) {
        let hits = indices.iter().filter(|i| self.forget.contains(i)).count();
        self.forget_reads.set(self.forget_reads.get() + hits);
    }

    pub fn features(&self, indices: &[usize]) -> Result<Tensor> {
        self.audit(indices);
        self.dataset.rows(indices)
    }

    pub fn labels(&self, indices: &[usize]) -> Vec<usize> {
        self.audit(indices);
        self.dataset.labels_of(indices)
    }

    pub fn classification(&self, indices: &[usize]) -> Result<TrainSet> {
        self.audit(indices);
        TrainSet::classification(
            self.dataset.rows(indices)?,
            self.dataset.labels_of(indices),
            self.dataset.classes(),
        )
    }

    pub fn masked(&self, task: &InpaintingTask, indices: &[usize]) -> Result<crate::data::MaskedBatch> {
        self.audit(indices);
        task.masked(self.dataset, indices)
    }

    pub fn forget_reads(&self) -> usize {
        self.forget_reads.get()
    }
}

/// Parameters selected by forget-loss gradient magnitude.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMask {
    pub mask: ParamMask,
    pub fraction: f64,
    pub selected: usize,
}

/// Gradient of the mean loss over `data` with respect to every parameter.
pub fn loss_gradient(model: &Model, data: &TrainSet) -> Result<BTreeMap<String, Tensor>> {
    let n = data.len();
    if n == 0 {
        return Err(Error::EmptySet("gradient over an empty set".into()));
    }
    let mut g = Graph::new();
    let x = g.leaf("x", &[n, model.arch.input])?;
    let t = g.leaf("target", &[n, model.arch.output])?;
    let out = model.append(&mut g, x, "")?;
    let loss = match (&data.targets, model.kind()) {
        (crate::trainer::Targets::Classes { .. }, ModelKind::Classifier) => g.cross_entropy(out, t)?,
        (crate::trainer::Targets::Images(_), ModelKind::Autoencoder) => g.mse(out, t)?,
        _ => return Err(config_err("targets do not suit the model")),
    };
    g.set_output(loss);
    let target = match &data.targets {
        crate::trainer::Targets::Classes { labels, classes } => one_hot(labels, *classes),
        crate::trainer::Targets::Images(t) => t.clone(),
    };
    let mut b = Bindings::new();
    b.bind("x", &data.inputs).bind("target", &target);
    model.bind_params(&mut b, "");
    let names = model.param_names();
    let wrt: Vec<&str> = names.iter().map(String::as_str).collect();
    Ok(gradient(&g, &b, &wrt)?.into_inner())
}

/// Marks the `round(fraction * count)` parameters with the largest
/// `|d mean forget loss / d theta|`, ties broken by parameter order.
pub fn saliency_mask(model: &Model, forget: &TrainSet, fraction: f64) -> Result<SaliencyMask> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(config_err(format!("saliency fraction {fraction} outside (0, 1]")));
    }
    let grads = loss_gradient(model, forget)?;
    let mut flat: Vec<(f64, &str, usize)> = Vec::new();
    for (name, g) in &grads {
        flat.extend(g.data().iter().enumerate().map(|(k, v)| (v.abs(), name.as_str(), k)));
    }
    let total = flat.len();
    let keep = ((fraction * total as f64).round() as usize).min(total);
    flat.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut mask: ParamMask = grads.iter().map(|(k, g)| (k.clone(), vec![false; g.len()])).collect();
    for &(_, name, k) in &flat[..keep] {
        mask.get_mut(name).unwrap()[k] = true;
    }
    Ok(SaliencyMask { mask, fraction, selected: keep })
}

/// Selects the encoder parameters; the decoder stays frozen.
pub fn encoder_mask(model: &Model) -> ParamMask {
    model.params.iter().map(|(k, t)| (k.clone(), vec![k.starts_with("enc"); t.len()])).collect()
}

/// A label drawn uniformly from the classes other than `label`.
fn random_other_label(label: usize, classes: usize, seed: u64, index: usize) -> usize {
    let mut r = derived_rng(seed, &format!("relabel/{index}"));
    let pick = r.gen_range(0..classes - 1);
    if pick >= label {
        pick + 1
    } else {
        pick
    }
}

/// Retain rows as a training set for the model's kind.
fn retain_set(original: &Model, view: &AuditedView, split: &UnlearningSplit, config: &UnlearnConfig) -> Result<TrainSet> {
    match (original.kind(), &config.inpainting) {
        (ModelKind::Autoencoder, Some(task)) => {
            let b = view.masked(task, &split.retain)?;
            TrainSet::reconstruction(b.masked, b.originals)
        }
        _ => view.classification(&split.retain),
    }
}

/// Retain and forget training sets of a forget-based objective.
struct Objective {
    retain: TrainSet,
    forget: TrainSet,
    mask: Option<ParamMask>,
}

fn forget_objective(
    original: &Model,
    split: &UnlearningSplit,
    view: &AuditedView,
    config: &UnlearnConfig,
) -> Result<Objective> {
    match config.method {
        Method::Rl | Method::Salun => {
            let retain = view.classification(&split.retain)?;
            let x = view.features(&split.forget)?;
            let truth = view.labels(&split.forget);
            let classes = original.arch.output;
            let relabeled: Vec<usize> = truth
                .iter()
                .zip(&split.forget)
                .map(|(&y, &i)| random_other_label(y, classes, config.seed, i))
                .collect();
            let forget = TrainSet::classification(x.clone(), relabeled, classes)?;
            let mask = if config.method == Method::Salun {
                let truth_set = TrainSet::classification(x, truth, classes)?;
                Some(saliency_mask(original, &truth_set, config.saliency.unwrap())?.mask)
            } else {
                None
            };
            Ok(Objective { retain, forget, mask })
        }
        Method::GenI2i | Method::GenSalun => {
            let task = config.inpainting.as_ref().unwrap();
            let r = view.masked(task, &split.retain)?;
            let f = view.masked(task, &split.forget)?;
            let retain = TrainSet::reconstruction(r.masked, r.originals)?;
            let gray = Tensor::full(f.originals.shape(), FORGET_FILL);
            // equal total weight for the retain and forget terms
            let w = retain.len() as f64 / f.masked.rows() as f64;
            let forget = TrainSet::reconstruction(f.masked.clone(), gray)?.with_weight(w);
            let mask = if config.method == Method::GenSalun {
                let truth = TrainSet::reconstruction(f.masked, f.originals)?;
                Some(saliency_mask(original, &truth, config.saliency.unwrap())?.mask)
            } else {
                Some(encoder_mask(original))
            };
            Ok(Objective { retain, forget, mask })
        }
        m => Err(config_err(format!("{m} has no forget objective"))),
    }
}

fn provenance(config: &UnlearnConfig, forget_reads: usize) -> Provenance {
    let mut seeds = BTreeMap::new();
    seeds.insert("unlearn".to_string(), config.seed);
    seeds.insert("train".to_string(), derive_seed(config.seed, "train"));
    if config.method == Method::Retrain {
        seeds.insert("retrain/init".to_string(), derive_seed(config.seed, "retrain/init"));
    }
    Provenance { method: config.label(), config_digest: config.digest(), seeds, forget_reads }
}

/// `U(f, D_u)`: applies the configured unlearning method.
pub fn unlearn(
    original: &Model,
    split: &UnlearningSplit,
    dataset: &LabeledDataset,
    config: &UnlearnConfig,
) -> Result<ModelPair> {
    config.validate()?;
    if !config.method.supports(original.kind()) {
        return Err(config_err(format!("{} cannot unlearn a {} model", config.method, original.kind())));
    }
    if original.kind() == ModelKind::Autoencoder && config.inpainting.is_none() {
        return Err(config_err(format!("{} on an autoencoder requires `inpainting`", config.method)));
    }
    if config.adversarial.is_some() {
        return adversarial_unlearn_impl(original, split, dataset, config);
    }
    let view = AuditedView::new(dataset, split);
    let unlearned = match config.method {
        Method::Retrain => {
            let fresh = build_model(&original.arch, derive_seed(config.seed, "retrain/init"))?;
            if config.epochs == 0 {
                fresh
            } else {
                train(&fresh, &retain_set(original, &view, split, config)?, &config.train_config())?.0
            }
        }
        Method::Ft | Method::L1Sparse => {
            if config.epochs == 0 {
                original.clone()
            } else {
                train(original, &retain_set(original, &view, split, config)?, &config.train_config())?.0
            }
        }
        Method::Iu => {
            let forget = view.classification(&split.forget)?;
            let grads = loss_gradient(original, &forget)?;
            let step = 1.0 / config.damping.unwrap();
            let mut m = original.clone();
            for (name, g) in grads {
                let p = m.params.get_mut(&name).unwrap();
                for (v, d) in p.data_mut().iter_mut().zip(g.data()) {
                    *v += step * d;
                }
            }
            m
        }
        Method::Rl | Method::Salun | Method::GenI2i | Method::GenSalun => {
            let obj = forget_objective(original, split, &view, config)?;
            run_objective(original, &obj, config, None)?
        }
    };
    ModelPair::new(original.clone(), unlearned, provenance(config, view.forget_reads()))
}

/// Trains on `retain ∪ forget`, adding the adversarially mapped forget inputs
/// every epoch when `attack` is given.
fn run_objective(
    original: &Model,
    obj: &Objective,
    config: &UnlearnConfig,
    attack: Option<(&AttackConfig, &AttackTargets)>,
) -> Result<Model> {
    if config.epochs == 0 {
        return Ok(original.clone());
    }
    let base = TrainSet::concat(&[&obj.retain, &obj.forget])?;
    let mut trainer = Trainer::new(original.clone(), config.train_config())?;
    if let Some(mask) = &obj.mask {
        trainer = trainer.with_mask(mask.clone());
    }
    for epoch in 0..config.epochs {
        let data = match attack {
            Some((attack_cfg, targets)) => {
                let mut cfg = attack_cfg.clone();
                cfg.seed = derive_seed(attack_cfg.seed, &format!("adversarial/{epoch}"));
                let pair = ModelPair::identity(original);
                let pair = ModelPair { unlearned: trainer.model().clone(), ..pair };
                let result = uma(&pair, targets, &cfg)?;
                let adv = TrainSet { inputs: result.adversarial()?, ..obj.forget.clone() };
                TrainSet::concat(&[&obj.retain, &obj.forget, &adv])?
            }
            None => base.clone(),
        };
        trainer.run_epoch(&data)?;
    }
    Ok(trainer.into_model())
}

fn attack_is_degenerate(attack: &AttackConfig) -> bool {
    matches!(attack.mode, AttackMode::Bounded { epsilon } if epsilon == 0.0)
}

fn adversarial_unlearn_impl(
    original: &Model,
    split: &UnlearningSplit,
    dataset: &LabeledDataset,
    config: &UnlearnConfig,
) -> Result<ModelPair> {
    let attack = config.adversarial.as_ref().unwrap();
    if !config.method.has_forget_objective() {
        return Err(config_err(format!("{} has no forget objective to robustify", config.method)));
    }
    if original.kind() == ModelKind::Classifier && attack.mode == AttackMode::Unbounded {
        return Err(config_err("adversarial unlearning of a classifier needs a bounded attack"));
    }
    let view = AuditedView::new(dataset, split);
    let obj = forget_objective(original, split, &view, config)?;
    let unlearned = if attack_is_degenerate(attack) {
        run_objective(original, &obj, config, None)?
    } else {
        // the attack maps toward the original's outputs on the forget inputs
        let targets = AttackTargets::with_indices(
            obj.forget.inputs.clone(),
            view.labels(&split.forget),
            split.forget.clone(),
        )?;
        run_objective(original, &obj, config, Some((attack, &targets)))?
    };
    ModelPair::new(original.clone(), unlearned, provenance(config, view.forget_reads()))
}

/// Unlearning with the robust term: each epoch regenerates mapping-attack
/// inputs against the current model and trains on them with the forget targets.
pub fn adversarial_unlearn(
    original: &Model,
    split: &UnlearningSplit,
    dataset: &LabeledDataset,
    base: &UnlearnConfig,
    attack: &AttackConfig,
) -> Result<ModelPair> {
    let mut config = base.clone();
    config.adversarial = Some(attack.clone());
    unlearn(original, split, dataset, &config)
}
