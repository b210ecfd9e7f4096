//! Unlearning mapping attack.
//!
//! For every forgotten sample `x` the attack searches for a query whose
//! output under the unlearned model matches the original model's output on
//! `x`, by signed-gradient descent on a mapping loss. Discriminative attacks
//! stay inside an L-infinity ball around `x`; generative attacks may use any
//! input in the unit box. Both models are only read.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::graph::{value_and_gradient, Bindings, Graph, NodeId};
use crate::model::{softmax_rows, Model, ModelKind, ModelPair};
use crate::seed::derived_rng;
use crate::tensor::Tensor;

/// Tolerance used when checking that rows are probability distributions.
const DISTRIBUTION_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum AttackMode {
    /// Stay within `epsilon` of the clean input in every coordinate.
    Bounded { epsilon: f64 },
    /// Any input in `[0, 1]^d`.
    Unbounded,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Kl,
    Ce,
    Mse,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackInit {
    /// Uniform in the ball (bounded) or in the unit box (unbounded).
    #[default]
    Random,
    /// Start from the clean input itself.
    Clean,
}

pub const DEFAULT_STEPS: usize = 100;
pub const DEFAULT_STEP_SIZE: f64 = 1.0 / 255.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    #[serde(flatten)]
    pub mode: AttackMode,
    pub steps: usize,
    pub step_size: f64,
    /// Defaults to `kl` for classifiers and `mse` for autoencoders.
    #[serde(default)]
    pub loss: Option<LossKind>,
    #[serde(default)]
    pub init: AttackInit,
    #[serde(default)]
    pub seed: u64,
}

impl AttackConfig {
    pub fn bounded(epsilon: f64, seed: u64) -> Self {
        Self {
            mode: AttackMode::Bounded { epsilon },
            steps: DEFAULT_STEPS,
            step_size: DEFAULT_STEP_SIZE,
            loss: None,
            init: AttackInit::Random,
            seed,
        }
    }

    pub fn unbounded(seed: u64) -> Self {
        Self { mode: AttackMode::Unbounded, ..Self::bounded(0.0, seed) }
    }

    pub fn epsilon(&self) -> Option<f64> {
        match self.mode {
            AttackMode::Bounded { epsilon } => Some(epsilon),
            AttackMode::Unbounded => None,
        }
    }

    /// Human-readable budget, `unbounded` or the radius in 1/255 units.
    pub fn label(&self) -> String {
        match self.mode {
            AttackMode::Unbounded => "unbounded".into(),
            AttackMode::Bounded { epsilon } => format!("{}/255", fmt_255(epsilon)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let AttackMode::Bounded { epsilon } = self.mode {
            // a zero radius is the degenerate clean evaluation
            if !(epsilon >= 0.0) || !epsilon.is_finite() {
                return Err(config_err(format!("invalid attack radius {epsilon}")));
            }
        }
        if self.steps == 0 {
            return Err(config_err("attack needs at least one step"));
        }
        if !(self.step_size > 0.0) {
            return Err(config_err("attack step size must be positive"));
        }
        Ok(())
    }

    fn loss_for(&self, kind: ModelKind) -> Result<LossKind> {
        match (kind, self.loss) {
            (ModelKind::Classifier, None) => Ok(LossKind::Kl),
            (ModelKind::Classifier, Some(l)) => Ok(l),
            (ModelKind::Autoencoder, None | Some(LossKind::Mse)) => Ok(LossKind::Mse),
            (ModelKind::Autoencoder, Some(l)) => {
                Err(config_err(format!("{l:?} mapping loss needs probability outputs")))
            }
            (ModelKind::Vae, _) => Err(config_err("a VAE cannot be the attacked model")),
        }
    }
}

fn fmt_255(eps: f64) -> String {
    let v = eps * 255.0;
    if (v - v.round()).abs() < 1e-9 {
        format!("{}", v.round() as i64)
    } else {
        format!("{v:.3}")
    }
}

fn check_distributions(t: &Tensor, what: &str) -> Result<()> {
    for row in t.row_iter() {
        let total: f64 = row.iter().sum();
        if row.iter().any(|&v| !(v >= 0.0)) || (total - 1.0).abs() > DISTRIBUTION_TOL {
            return Err(Error::Domain(format!("{what} rows must be probability distributions")));
        }
    }
    Ok(())
}

/// Mean mapping loss between unlearned and original outputs.
///
/// `kl` is `KL(original || unlearned)` and `ce` is `-sum original * ln unlearned`,
/// both on probability rows; `mse` is the mean squared difference over all entries.
pub fn mapping_loss(unlearned: &Tensor, original: &Tensor, kind: LossKind) -> Result<f64> {
    if unlearned.shape() != original.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", unlearned.shape(), original.shape())));
    }
    let rows = unlearned.rows() as f64;
    match kind {
        LossKind::Mse => Ok(unlearned
            .data()
            .iter()
            .zip(original.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / unlearned.len() as f64),
        LossKind::Kl | LossKind::Ce => {
            check_distributions(unlearned, "unlearned output")?;
            check_distributions(original, "original output")?;
            let mut total = 0.0;
            for (q, p) in unlearned.data().iter().zip(original.data()) {
                if *p > 0.0 {
                    let lq = q.max(f64::MIN_POSITIVE).ln();
                    total += match kind {
                        LossKind::Kl => p * (p.ln() - lq),
                        _ => -p * lq,
                    };
                }
            }
            Ok(total / rows)
        }
    }
}

/// One signed-gradient descent step followed by projection and clipping.
///
/// `current` is the adversarial input itself (the clean input plus the
/// perturbation in bounded mode).
pub fn pgd_update(
    current: &Tensor,
    gradient: &Tensor,
    step_size: f64,
    mode: AttackMode,
    clean: &Tensor,
) -> Result<Tensor> {
    if current.shape() != gradient.shape() || current.shape() != clean.shape() {
        return Err(Error::Shape("pgd operands differ in shape".into()));
    }
    let mut next = current.clone();
    for ((v, &g), &x) in next.data_mut().iter_mut().zip(gradient.data()).zip(clean.data()) {
        *v -= step_size * crate::graph::sign(g);
        if let AttackMode::Bounded { epsilon } = mode {
            *v = v.clamp(x - epsilon, x + epsilon);
        }
        *v = v.clamp(0.0, 1.0);
    }
    Ok(next)
}

/// Samples to attack, with their labels and positions in the source dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackTargets {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

impl AttackTargets {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        let indices = (0..labels.len()).collect();
        Self::with_indices(inputs, labels, indices)
    }

    pub fn with_indices(inputs: Tensor, labels: Vec<usize>, indices: Vec<usize>) -> Result<Self> {
        if inputs.rows() != labels.len() || labels.len() != indices.len() {
            return Err(Error::Shape("targets need one label and index per row".into()));
        }
        Ok(Self { inputs, labels, indices })
    }

    pub fn from_dataset(dataset: &crate::data::LabeledDataset, indices: &[usize]) -> Result<Self> {
        Self::with_indices(dataset.rows(indices)?, dataset.labels_of(indices), indices.to_vec())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackedSample {
    pub index: usize,
    pub label: usize,
    pub adversarial: Vec<f64>,
    /// Mapping loss before each step and after the last one.
    pub trajectory: Vec<f64>,
    pub final_distance: f64,
}

/// The attack dataset: adversarial inputs paired with the original labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub config: AttackConfig,
    #[serde(rename = "per-sample")]
    pub samples: Vec<AttackedSample>,
}

impl AttackResult {
    pub fn adversarial(&self) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = self.samples.iter().map(|s| s.adversarial.clone()).collect();
        Tensor::from_rows(&rows)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn final_distances(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.final_distance).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Output-space distance between an unlearned output row and an original one:
/// L2 for class probabilities, mean absolute pixel difference for images.
pub fn output_distance(kind: ModelKind, unlearned: &[f64], original: &[f64]) -> f64 {
    match kind {
        ModelKind::Classifier => {
            unlearned.iter().zip(original).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
        }
        _ => unlearned.iter().zip(original).map(|(a, b)| (a - b).abs()).sum::<f64>() / unlearned.len() as f64,
    }
}

/// Outputs compared by the attack: probabilities for classifiers,
/// reconstructions for autoencoders.
pub fn model_outputs(model: &Model, inputs: &Tensor) -> Result<Tensor> {
    match model.kind() {
        ModelKind::Classifier => Ok(softmax_rows(&model.logits(inputs)?)),
        _ => model.run(inputs),
    }
}

struct AttackGraph {
    graph: Graph,
    rows: NodeId,
    outputs: NodeId,
}

fn attack_graph(unlearned: &Model, purifier: Option<&Model>, n: usize, loss: LossKind) -> Result<AttackGraph> {
    let mut g = Graph::new();
    let x = g.leaf("x", &[n, unlearned.arch.input])?;
    let target = g.leaf("target", &[n, unlearned.arch.output])?;
    let query = match purifier {
        Some(p) => p.append(&mut g, x, "purifier.")?,
        None => x,
    };
    let raw = unlearned.append(&mut g, query, "unlearned.")?;
    let (rows, outputs) = match unlearned.kind() {
        ModelKind::Classifier => {
            let probs = g.softmax(raw)?;
            let rows = match loss {
                LossKind::Kl => g.kl_rows(target, probs)?,
                LossKind::Ce => g.cross_entropy_rows(raw, target)?,
                LossKind::Mse => g.mse_rows(probs, target)?,
            };
            (rows, probs)
        }
        _ => (g.mse_rows(raw, target)?, raw),
    };
    let total = g.sum(rows)?;
    g.set_output(total);
    Ok(AttackGraph { graph: g, rows, outputs })
}

fn initial_inputs(targets: &AttackTargets, config: &AttackConfig) -> Result<Tensor> {
    let mut start = targets.inputs.clone();
    if config.init == AttackInit::Clean {
        return Ok(start);
    }
    for i in 0..start.rows() {
        let mut r = derived_rng(config.seed, &format!("uma/init/{i}"));
        for v in start.row_mut(i) {
            *v = match config.mode {
                AttackMode::Bounded { epsilon } if epsilon > 0.0 => {
                    (*v + r.gen_range(-epsilon..=epsilon)).clamp(0.0, 1.0)
                }
                AttackMode::Bounded { .. } => *v,
                AttackMode::Unbounded => r.gen::<f64>(),
            };
        }
    }
    Ok(start)
}

/// Shared attack loop; `purifier`, when present, is composed in front of the
/// unlearned model and differentiated through.
pub(crate) fn run_attack(
    pair: &ModelPair,
    purifier: Option<&Model>,
    targets: &AttackTargets,
    config: &AttackConfig,
) -> Result<AttackResult> {
    config.validate()?;
    if targets.is_empty() {
        return Err(Error::EmptySet("no attack targets".into()));
    }
    let kind = pair.unlearned.kind();
    if kind == ModelKind::Classifier && config.mode == AttackMode::Unbounded {
        return Err(config_err("attacks on classifiers must be bounded"));
    }
    if pair.original.arch != pair.unlearned.arch || targets.inputs.cols() != pair.unlearned.arch.input {
        return Err(config_err("targets do not match the model pair"));
    }
    if let Some(p) = purifier {
        if p.arch.input != pair.unlearned.arch.input || p.arch.output != p.arch.input {
            return Err(config_err("purifier width does not match the model pair"));
        }
    }
    let loss = config.loss_for(kind)?;
    let reference = model_outputs(&pair.original, &targets.inputs)?;
    let n = targets.len();
    let ag = attack_graph(&pair.unlearned, purifier, n, loss)?;

    let mut current = initial_inputs(targets, config)?;
    let mut trajectories = vec![Vec::with_capacity(config.steps + 1); n];
    let eval = |input: &Tensor| -> Result<(crate::graph::Trace, crate::graph::GradientMap)> {
        let mut b = Bindings::new();
        b.bind("x", input).bind("target", &reference);
        pair.unlearned.bind_params(&mut b, "unlearned.");
        if let Some(p) = purifier {
            p.bind_params(&mut b, "purifier.");
        }
        value_and_gradient(&ag.graph, &b, &["x"])
    };
    for _ in 0..config.steps {
        let (trace, grads) = eval(&current)?;
        for (traj, &l) in trajectories.iter_mut().zip(trace.value(ag.rows).data()) {
            traj.push(l);
        }
        current = pgd_update(&current, grads.get("x").unwrap(), config.step_size, config.mode, &targets.inputs)?;
    }
    let (trace, _) = eval(&current)?;
    for (traj, &l) in trajectories.iter_mut().zip(trace.value(ag.rows).data()) {
        traj.push(l);
    }
    let outputs = trace.value(ag.outputs);
    let samples = (0..n)
        .map(|i| AttackedSample {
            index: targets.indices[i],
            label: targets.labels[i],
            adversarial: current.row(i).to_vec(),
            trajectory: std::mem::take(&mut trajectories[i]),
            final_distance: output_distance(kind, outputs.row(i), reference.row(i)),
        })
        .collect();
    Ok(AttackResult { config: config.clone(), samples })
}

/// Runs the mapping attack against `pair.unlearned` for every target.
pub fn uma(pair: &ModelPair, targets: &AttackTargets, config: &AttackConfig) -> Result<AttackResult> {
    run_attack(pair, None, targets, config)
}
