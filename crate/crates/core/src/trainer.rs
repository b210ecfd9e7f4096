//! Mini-batch training, accuracy and checkpoints.
//!
//! Shuffling draws from a stream keyed by `(seed, epoch)`, so a run that is
//! resumed at an epoch boundary, or split across processes, sees the same
//! batches as an uninterrupted one.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::digest::json_digest;
use crate::error::{config_err, Error, Result};
use crate::graph::{forward, value_and_gradient, Bindings, Graph, NodeId};
use crate::model::{build_model, params_digest, ArchSpec, Model, ModelKind};
use crate::seed::derived_rng;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Rows per forward pass when evaluating large sets.
const EVAL_CHUNK: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

fn default_batch() -> usize {
    64
}

fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adam
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub l1: f64,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(epochs: usize, learning_rate: f64, seed: u64) -> Self {
        Self {
            epochs,
            batch_size: default_batch(),
            learning_rate,
            optimizer: default_optimizer(),
            weight_decay: 0.0,
            l1: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(config_err("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(config_err("batch size must be positive"));
        }
        // a zero rate is accepted: it is the identity update
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(config_err(format!("invalid learning rate {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0) || !(self.l1 >= 0.0) {
            return Err(config_err("regularization coefficients must be non-negative"));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        json_digest(self)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    /// Class index per row.
    Classes { labels: Vec<usize>, classes: usize },
    /// Target image per row (reconstruction).
    Images(Tensor),
}

/// Inputs, targets and per-row loss weights.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSet {
    pub inputs: Tensor,
    pub targets: Targets,
    pub weights: Vec<f64>,
}

impl TrainSet {
    pub fn classification(inputs: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::Shape("one label per input row required".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(config_err(format!("label {bad} out of range for {classes} classes")));
        }
        let weights = vec![1.0; labels.len()];
        Ok(Self { inputs, targets: Targets::Classes { labels, classes }, weights })
    }

    pub fn reconstruction(inputs: Tensor, targets: Tensor) -> Result<Self> {
        if inputs.shape() != targets.shape() {
            return Err(Error::Shape("inputs and targets differ in shape".into()));
        }
        let weights = vec![1.0; inputs.rows()];
        Ok(Self { inputs, targets: Targets::Images(targets), weights })
    }

    pub fn with_weight(mut self, w: f64) -> Self {
        self.weights.iter_mut().for_each(|v| *v = w);
        self
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Stacks sets of the same target kind.
    pub fn concat(parts: &[&TrainSet]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| config_err("nothing to concatenate"))?;
        let inputs = Tensor::concat_rows(&parts.iter().map(|p| &p.inputs).collect::<Vec<_>>())?;
        let weights = parts.iter().flat_map(|p| p.weights.iter().copied()).collect();
        let targets = match &first.targets {
            Targets::Classes { classes, .. } => {
                let mut labels = Vec::new();
                for p in parts {
                    match &p.targets {
                        Targets::Classes { labels: l, classes: c } if c == classes => {
                            labels.extend_from_slice(l)
                        }
                        _ => return Err(config_err("mixed target kinds")),
                    }
                }
                Targets::Classes { labels, classes: *classes }
            }
            Targets::Images(_) => {
                let mut imgs = Vec::new();
                for p in parts {
                    match &p.targets {
                        Targets::Images(t) => imgs.push(t),
                        _ => return Err(config_err("mixed target kinds")),
                    }
                }
                Targets::Images(Tensor::concat_rows(&imgs)?)
            }
        };
        Ok(Self { inputs, targets, weights })
    }

    fn subset(&self, idx: &[usize]) -> Result<Self> {
        let targets = match &self.targets {
            Targets::Classes { labels, classes } => {
                Targets::Classes { labels: idx.iter().map(|&i| labels[i]).collect(), classes: *classes }
            }
            Targets::Images(t) => Targets::Images(t.select_rows(idx)?),
        };
        Ok(Self {
            inputs: self.inputs.select_rows(idx)?,
            targets,
            weights: idx.iter().map(|&i| self.weights[i]).collect(),
        })
    }
}

pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &y) in labels.iter().enumerate() {
        t.row_mut(i)[y] = 1.0;
    }
    t
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epoch_loss: Vec<f64>,
    /// Training accuracy per epoch (classifiers only).
    pub epoch_accuracy: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
}

/// Per-parameter update permission; entries missing from the map are frozen.
pub type ParamMask = BTreeMap<String, Vec<bool>>;

struct LossGraph {
    graph: Graph,
    logits: Option<NodeId>,
}

/// Weighted mean of per-row losses for one batch.
fn loss_graph(model: &Model, batch: usize, sampled: bool) -> Result<LossGraph> {
    let arch = &model.arch;
    let mut g = Graph::new();
    let x = g.leaf("x", &[batch, arch.input])?;
    let w = g.leaf("weight", &[batch, 1])?;
    let (rows, logits) = match arch.kind {
        ModelKind::Classifier => {
            let t = g.leaf("target", &[batch, arch.output])?;
            let z = model.append(&mut g, x, "")?;
            (g.cross_entropy_rows(z, t)?, Some(z))
        }
        ModelKind::Autoencoder => {
            let t = g.leaf("target", &[batch, arch.output])?;
            let y = model.append(&mut g, x, "")?;
            (g.mse_rows(y, t)?, None)
        }
        ModelKind::Vae => {
            let t = g.leaf("target", &[batch, arch.output])?;
            let (mu, logvar) = model.append_encoder(&mut g, x, "")?;
            let z = if sampled {
                let eps = g.leaf("eps", &[batch, arch.latent.unwrap()])?;
                let half = g.affine(logvar, 0.5, 0.0)?;
                let std = g.exp(half)?;
                let noise = g.mul(std, eps)?;
                g.add(mu, noise)?
            } else {
                mu
            };
            let y = model.append_decoder(&mut g, z, "")?;
            // Bernoulli reconstruction term plus KL to the unit Gaussian, beta = 1
            let log_y = g.log(y)?;
            let not_y = g.affine(y, -1.0, 1.0)?;
            let log_not_y = g.log(not_y)?;
            let not_t = g.affine(t, -1.0, 1.0)?;
            let hit = g.mul(t, log_y)?;
            let miss = g.mul(not_t, log_not_y)?;
            let ll = g.add(hit, miss)?;
            let ll_rows = g.sum_rows(ll)?;
            let rec = g.affine(ll_rows, -1.0, 0.0)?;
            let mu2 = g.mul(mu, mu)?;
            let var = g.exp(logvar)?;
            let one_plus = g.affine(logvar, 1.0, 1.0)?;
            let a = g.sub(one_plus, mu2)?;
            let inner = g.sub(a, var)?;
            let summed = g.sum_rows(inner)?;
            let kl = g.affine(summed, -0.5, 0.0)?;
            (g.add(rec, kl)?, None)
        }
    };
    let weighted = g.mul(rows, w)?;
    let total = g.sum(weighted)?;
    g.set_output(total);
    Ok(LossGraph { graph: g, logits })
}

struct BatchTensors {
    weight: Tensor,
    target: Tensor,
    eps: Option<Tensor>,
    weight_sum: f64,
}

fn batch_tensors(model: &Model, set: &TrainSet, eps: Option<Tensor>) -> Result<BatchTensors> {
    let n = set.len();
    let weight_sum: f64 = set.weights.iter().sum();
    let target = match &set.targets {
        Targets::Classes { labels, classes } => {
            if *classes != model.arch.output {
                return Err(config_err("class count does not match classifier width"));
            }
            one_hot(labels, *classes)
        }
        Targets::Images(t) => t.clone(),
    };
    match (&set.targets, model.kind()) {
        (Targets::Classes { .. }, ModelKind::Classifier)
        | (Targets::Images(_), ModelKind::Autoencoder | ModelKind::Vae) => {}
        _ => return Err(config_err(format!("targets do not suit a {} model", model.kind()))),
    }
    Ok(BatchTensors { weight: Tensor::new(vec![n, 1], set.weights.clone())?, target, eps, weight_sum })
}

enum OptState {
    Sgd,
    Adam { m: BTreeMap<String, Vec<f64>>, v: BTreeMap<String, Vec<f64>>, t: i32 },
}

/// Owns a private copy of the model while it is trained.
pub struct Trainer {
    model: Model,
    config: TrainConfig,
    state: OptState,
    mask: Option<ParamMask>,
    epoch: usize,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let state = match config.optimizer {
            OptimizerKind::Sgd => OptState::Sgd,
            OptimizerKind::Adam => {
                let zeros: BTreeMap<String, Vec<f64>> =
                    model.params.iter().map(|(k, t)| (k.clone(), vec![0.0; t.len()])).collect();
                OptState::Adam { m: zeros.clone(), v: zeros, t: 0 }
            }
        };
        Ok(Self { model, config, state, mask: None, epoch: 0 })
    }

    /// Restricts updates to the `true` entries of `mask`.
    pub fn with_mask(mut self, mask: ParamMask) -> Self {
        self.mask = Some(mask);
        self
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    /// One pass over `data` in shuffled mini-batches; returns the mean batch loss
    /// and, for classifiers, the running training accuracy.
    pub fn run_epoch(&mut self, data: &TrainSet) -> Result<(f64, Option<f64>)> {
        if data.is_empty() {
            return Err(Error::EmptySet("training set".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut derived_rng(self.config.seed, &format!("shuffle/{}", self.epoch)));
        let mut noise = derived_rng(self.config.seed, &format!("vae-noise/{}", self.epoch));
        let (mut loss_sum, mut weight_sum, mut correct) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(self.config.batch_size) {
            let batch = data.subset(chunk)?;
            let eps = if self.model.kind() == ModelKind::Vae {
                let latent = self.model.arch.latent.unwrap();
                let vals = (0..chunk.len() * latent).map(|_| StandardNormal.sample(&mut noise)).collect();
                Some(Tensor::new(vec![chunk.len(), latent], vals)?)
            } else {
                None
            };
            let (loss, hits) = self.step(&batch, eps)?;
            let w: f64 = batch.weights.iter().sum();
            loss_sum += loss * w;
            weight_sum += w;
            correct += hits;
        }
        let epoch = self.epoch;
        self.epoch += 1;
        let mean = loss_sum / weight_sum;
        if !mean.is_finite() || !self.model.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        let acc = matches!(data.targets, Targets::Classes { .. }).then(|| correct as f64 / data.len() as f64);
        Ok((mean, acc))
    }

    fn step(&mut self, batch: &TrainSet, eps: Option<Tensor>) -> Result<(f64, usize)> {
        let n = batch.len();
        let lg = loss_graph(&self.model, n, eps.is_some())?;
        let bt = batch_tensors(&self.model, batch, eps)?;
        let names = self.model.param_names();
        let wrt: Vec<&str> = names.iter().map(String::as_str).collect();
        let (trace, grads) = {
            let mut b = Bindings::new();
            b.bind("x", &batch.inputs).bind("weight", &bt.weight).bind("target", &bt.target);
            if let Some(e) = &bt.eps {
                b.bind("eps", e);
            }
            self.model.bind_params(&mut b, "");
            value_and_gradient(&lg.graph, &b, &wrt)?
        };
        let loss = trace.output().item() / bt.weight_sum;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch: self.epoch });
        }
        let hits = match (&batch.targets, lg.logits) {
            (Targets::Classes { labels, .. }, Some(z)) => trace
                .value(z)
                .argmax_rows()
                .iter()
                .zip(labels)
                .filter(|(p, y)| p == y)
                .count(),
            _ => 0,
        };

        let cfg = &self.config;
        let scale = 1.0 / bt.weight_sum;
        if let OptState::Adam { t, .. } = &mut self.state {
            *t += 1;
        }
        for (name, grad) in grads.iter() {
            let param = self.model.params.get_mut(name).expect("gradient for known parameter");
            let mask = self.mask.as_ref().map(|m| m.get(name));
            let theta = param.data_mut();
            for k in 0..theta.len() {
                if let Some(m) = mask {
                    if !m.map(|bits| bits[k]).unwrap_or(false) {
                        continue;
                    }
                }
                let mut gk = grad.data()[k] * scale;
                gk += cfg.weight_decay * theta[k];
                gk += cfg.l1 * crate::graph::sign(theta[k]);
                match &mut self.state {
                    OptState::Sgd => theta[k] -= cfg.learning_rate * gk,
                    OptState::Adam { m, v, t } => {
                        let (mk, vk) = (&mut m.get_mut(name).unwrap()[k], &mut v.get_mut(name).unwrap()[k]);
                        *mk = ADAM_BETA1 * *mk + (1.0 - ADAM_BETA1) * gk;
                        *vk = ADAM_BETA2 * *vk + (1.0 - ADAM_BETA2) * gk * gk;
                        let mhat = *mk / (1.0 - ADAM_BETA1.powi(*t));
                        let vhat = *vk / (1.0 - ADAM_BETA2.powi(*t));
                        theta[k] -= cfg.learning_rate * mhat / (vhat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok((loss, hits))
    }
}

/// Weighted mean loss over a whole set (VAE losses use the latent mean).
pub fn dataset_loss(model: &Model, data: &TrainSet) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptySet("loss set".into()));
    }
    let mut total = 0.0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let part = data.subset(chunk)?;
        let lg = loss_graph(model, chunk.len(), false)?;
        let bt = batch_tensors(model, &part, None)?;
        let mut b = Bindings::new();
        b.bind("x", &part.inputs).bind("weight", &bt.weight).bind("target", &bt.target);
        model.bind_params(&mut b, "");
        total += forward(&lg.graph, &b)?.output().item();
    }
    Ok(total / data.weights.iter().sum::<f64>())
}

/// `A(f, D)`: trains a copy of `model` on `data`.
pub fn train(model: &Model, data: &TrainSet, config: &TrainConfig) -> Result<(Model, TrainHistory)> {
    let mut trainer = Trainer::new(model.clone(), config.clone())?;
    let mut history = TrainHistory { initial_loss: dataset_loss(model, data)?, ..Default::default() };
    for _ in 0..config.epochs {
        let start = Instant::now();
        let (loss, acc) = trainer.run_epoch(data)?;
        history.epoch_loss.push(loss);
        if let Some(a) = acc {
            history.epoch_accuracy.push(a);
        }
        history.epoch_seconds.push(start.elapsed().as_secs_f64());
    }
    let model = trainer.into_model();
    history.final_loss = dataset_loss(&model, data)?;
    Ok((model, history))
}

/// Fraction of rows whose arg-max class (lowest index on ties) equals the label.
pub fn accuracy(model: &Model, samples: &Tensor, labels: &[usize]) -> Result<f64> {
    model.expect_kind(ModelKind::Classifier)?;
    if labels.is_empty() {
        return Err(Error::EmptySet("accuracy needs at least one sample".into()));
    }
    if samples.rows() != labels.len() {
        return Err(Error::Shape("one label per sample required".into()));
    }
    let preds = predict(model, samples)?;
    Ok(preds.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64)
}

pub fn predict(model: &Model, samples: &Tensor) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(samples.rows());
    let idx: Vec<usize> = (0..samples.rows()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        out.extend(model.logits(&samples.select_rows(chunk)?)?.argmax_rows());
    }
    Ok(out)
}

/// Cross-entropy of each row against its label.
pub fn per_sample_loss(model: &Model, samples: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    model.expect_kind(ModelKind::Classifier)?;
    let logits = model.logits(samples)?;
    Ok(logits
        .row_iter()
        .zip(labels)
        .map(|(z, &y)| {
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - z[y]
        })
        .collect())
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// A model plus the seeds and training configuration that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub seed_lineage: BTreeMap<String, u64>,
    pub train_config_digest: Option<String>,
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        let mut seed_lineage = BTreeMap::new();
        seed_lineage.insert("init".to_string(), model.init_seed);
        Self { model, seed_lineage, train_config_digest: None }
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointDocument {
    version: u32,
    arch: ArchSpec,
    init_seed: u64,
    seed_lineage: BTreeMap<String, u64>,
    train_config_digest: Option<String>,
    params: BTreeMap<String, Vec<f64>>,
    digest: String,
}

pub fn checkpoint_to_json(ck: &Checkpoint) -> Result<String> {
    let doc = CheckpointDocument {
        version: CHECKPOINT_VERSION,
        arch: ck.model.arch.clone(),
        init_seed: ck.model.init_seed,
        seed_lineage: ck.seed_lineage.clone(),
        train_config_digest: ck.train_config_digest.clone(),
        params: ck.model.params.iter().map(|(k, t)| (k.clone(), t.data().to_vec())).collect(),
        digest: ck.model.digest(),
    };
    Ok(serde_json::to_string(&doc)?)
}

pub fn checkpoint_from_json(text: &str) -> Result<Checkpoint> {
    let doc: CheckpointDocument =
        serde_json::from_str(text).map_err(|e| Error::Format(format!("checkpoint: {e}")))?;
    if doc.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", doc.version)));
    }
    let template = build_model(&doc.arch, 0).map_err(|e| Error::Format(e.to_string()))?;
    if template.params.len() != doc.params.len() {
        return Err(Error::Format("parameter set does not match architecture".into()));
    }
    let mut params = BTreeMap::new();
    for (name, t) in template.params {
        let values = doc
            .params
            .get(&name)
            .ok_or_else(|| Error::Format(format!("missing parameter `{name}`")))?;
        let tensor = Tensor::new(t.shape().to_vec(), values.clone())
            .map_err(|e| Error::Format(format!("parameter `{name}`: {e}")))?;
        params.insert(name, tensor);
    }
    let found = params_digest(&params);
    if found != doc.digest {
        return Err(Error::Integrity(format!("parameter digest {found} != recorded {}", doc.digest)));
    }
    Ok(Checkpoint {
        model: Model { arch: doc.arch, params, init_seed: doc.init_seed },
        seed_lineage: doc.seed_lineage,
        train_config_digest: doc.train_config_digest,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_to_json(ck)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint_from_json(&std::fs::read_to_string(path)?)
}

/// Loads a checkpoint and checks that it holds a model of `kind`.
pub fn load_model(path: &Path, kind: ModelKind) -> Result<Model> {
    let ck = load_checkpoint(path)?;
    ck.model.expect_kind(kind)?;
    Ok(ck.model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DatasetSpec};

    fn blob_set(n: usize, noise: f64) -> TrainSet {
        let d = generate_dataset(&DatasetSpec::Blobs { n, dim: 16, classes: 5, noise }, 11).unwrap();
        TrainSet::classification(d.features, d.labels, 5).unwrap()
    }

    #[test]
    fn zero_rate_is_identity() {
        let m = build_model(&ArchSpec::classifier(16, &[8], 5), 1).unwrap();
        let mut cfg = TrainConfig::new(1, 0.0, 3);
        cfg.optimizer = OptimizerKind::Sgd;
        let (trained, _) = train(&m, &blob_set(100, 0.05), &cfg).unwrap();
        assert_eq!(trained.digest(), m.digest());
        assert!(TrainConfig::new(0, 0.1, 0).validate().is_err());
        assert!(TrainConfig::new(1, -0.1, 0).validate().is_err());
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let m = build_model(&ArchSpec::classifier(16, &[16], 5), 2).unwrap();
        let data = blob_set(300, 0.05);
        let cfg = TrainConfig::new(5, 0.01, 4);
        let (a, h) = train(&m, &data, &cfg).unwrap();
        let (b, _) = train(&m, &data, &cfg).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert!(h.final_loss <= h.initial_loss);
        assert_eq!(h.epoch_loss.len(), 5);
    }

    #[test]
    fn accuracy_edge_cases() {
        let m = Model::zeroed(&ArchSpec::classifier(16, &[8], 5)).unwrap();
        let data = blob_set(100, 0.05);
        let Targets::Classes { labels, .. } = &data.targets else { unreachable!() };
        // all ties resolve to class 0, which holds a fifth of the rows
        assert_eq!(accuracy(&m, &data.inputs, labels).unwrap(), 0.2);
        assert!(matches!(accuracy(&m, &data.inputs, &[]), Err(Error::EmptySet(_))));
        let m = build_model(&ArchSpec::classifier(16, &[8], 5), 9).unwrap();
        let own = predict(&m, &data.inputs).unwrap();
        assert_eq!(accuracy(&m, &data.inputs, &own).unwrap(), 1.0);
    }

    #[test]
    fn mismatched_targets_rejected() {
        let ae = build_model(&ArchSpec::autoencoder(16, &[], 4), 0).unwrap();
        assert!(train(&ae, &blob_set(100, 0.05), &TrainConfig::new(1, 0.01, 0)).is_err());
    }
}
