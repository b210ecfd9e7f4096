//! Dense models: classifier, masked-reconstruction autoencoder and VAE.
//!
//! Parameters live in a name-sorted map so that digests and checkpoints are
//! independent of construction order. A model contributes its computation to
//! a caller-owned [`Graph`] through [`Model::append`], with every parameter
//! registered as a leaf under a caller-chosen prefix; this is how two models
//! (or a purifier and a classifier) are composed into one differentiable
//! objective.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, Error, Result};
use crate::graph::{evaluate, Bindings, Graph, NodeId};
use crate::seed::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Classifier,
    Autoencoder,
    Vae,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Classifier => "classifier",
            Self::Autoencoder => "autoencoder",
            Self::Vae => "vae",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Activation {
    Identity,
    Relu,
    Sigmoid,
}

#[derive(Clone, Debug)]
struct Layer {
    name: String,
    fan_in: usize,
    fan_out: usize,
    activation: Activation,
}

/// Layer widths of a model. Hidden layers use relu.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub kind: ModelKind,
    pub input: usize,
    #[serde(default)]
    pub hidden: Vec<usize>,
    /// Class count for classifiers; reconstruction width otherwise.
    pub output: usize,
    #[serde(default)]
    pub latent: Option<usize>,
}

impl ArchSpec {
    pub fn classifier(input: usize, hidden: &[usize], classes: usize) -> Self {
        Self { kind: ModelKind::Classifier, input, hidden: hidden.to_vec(), output: classes, latent: None }
    }

    pub fn autoencoder(input: usize, hidden: &[usize], latent: usize) -> Self {
        Self { kind: ModelKind::Autoencoder, input, hidden: hidden.to_vec(), output: input, latent: Some(latent) }
    }

    pub fn vae(input: usize, hidden: &[usize], latent: usize) -> Self {
        Self { kind: ModelKind::Vae, input, hidden: hidden.to_vec(), output: input, latent: Some(latent) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.output == 0 || self.hidden.iter().any(|&w| w == 0) {
            return Err(config_err("layer widths must be positive"));
        }
        match self.kind {
            ModelKind::Classifier => {
                if self.latent.is_some() {
                    return Err(config_err("classifiers have no latent width"));
                }
                if self.output < 2 {
                    return Err(config_err("classifier needs at least two outputs"));
                }
            }
            ModelKind::Autoencoder | ModelKind::Vae => {
                if self.output != self.input {
                    return Err(config_err(format!(
                        "{} output width {} must equal input width {}",
                        self.kind, self.output, self.input
                    )));
                }
                if !matches!(self.latent, Some(l) if l > 0) {
                    return Err(config_err(format!("{} needs a positive latent width", self.kind)));
                }
            }
        }
        Ok(())
    }

    fn dense_chain(prefix: &str, widths: &[usize], last: Activation) -> Vec<Layer> {
        let n = widths.len() - 1;
        (0..n)
            .map(|i| Layer {
                name: format!("{prefix}{i}"),
                fan_in: widths[i],
                fan_out: widths[i + 1],
                activation: if i + 1 == n { last } else { Activation::Relu },
            })
            .collect()
    }

    fn encoder_widths(&self) -> Vec<usize> {
        std::iter::once(self.input).chain(self.hidden.iter().copied()).collect()
    }

    fn decoder_widths(&self) -> Vec<usize> {
        let latent = self.latent.unwrap_or(0);
        std::iter::once(latent)
            .chain(self.hidden.iter().rev().copied())
            .chain(std::iter::once(self.output))
            .collect()
    }

    fn layers(&self) -> Vec<Layer> {
        match self.kind {
            ModelKind::Classifier => {
                let mut w = self.encoder_widths();
                w.push(self.output);
                Self::dense_chain("layer", &w, Activation::Identity)
            }
            ModelKind::Autoencoder => {
                let mut w = self.encoder_widths();
                w.push(self.latent.unwrap());
                let mut layers = Self::dense_chain("enc", &w, Activation::Relu);
                layers.extend(Self::dense_chain("dec", &self.decoder_widths(), Activation::Sigmoid));
                layers
            }
            ModelKind::Vae => {
                let w = self.encoder_widths();
                let latent = self.latent.unwrap();
                let trunk = *w.last().unwrap();
                let mut layers = if w.len() > 1 {
                    Self::dense_chain("enc", &w, Activation::Relu)
                } else {
                    Vec::new()
                };
                for head in ["mu", "logvar"] {
                    layers.push(Layer {
                        name: head.into(),
                        fan_in: trunk,
                        fan_out: latent,
                        activation: Activation::Identity,
                    });
                }
                layers.extend(Self::dense_chain("dec", &self.decoder_widths(), Activation::Sigmoid));
                layers
            }
        }
    }

    /// Number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|l| l.fan_in * l.fan_out + l.fan_out).sum()
    }

    /// Half-width of the uniform weight initialization for a layer.
    pub fn init_bound(fan_in: usize) -> f64 {
        (6.0 / fan_in as f64).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub arch: ArchSpec,
    pub params: BTreeMap<String, Tensor>,
    pub init_seed: u64,
}

/// Kaiming-style uniform weights in `±sqrt(6 / fan_in)`, zero biases.
pub fn build_model(arch: &ArchSpec, seed: u64) -> Result<Model> {
    arch.validate()?;
    let mut r = rng(seed);
    let mut params = BTreeMap::new();
    for layer in arch.layers() {
        let bound = ArchSpec::init_bound(layer.fan_in);
        let w: Vec<f64> =
            (0..layer.fan_in * layer.fan_out).map(|_| r.gen_range(-bound..=bound)).collect();
        params.insert(format!("{}.weight", layer.name), Tensor::new(vec![layer.fan_in, layer.fan_out], w)?);
        params.insert(format!("{}.bias", layer.name), Tensor::zeros(&[layer.fan_out]));
    }
    Ok(Model { arch: arch.clone(), params, init_seed: seed })
}

impl Model {
    /// Same architecture with every parameter set to zero.
    pub fn zeroed(arch: &ArchSpec) -> Result<Self> {
        let mut m = build_model(arch, 0)?;
        for t in m.params.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(m)
    }

    pub fn kind(&self) -> ModelKind {
        self.arch.kind
    }

    pub fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.arch.kind != kind {
            return Err(Error::ModelKind { expected: kind.to_string(), found: self.arch.kind.to_string() });
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }

    /// SHA-256 over every parameter name, shape and value, in name order.
    pub fn digest(&self) -> String {
        params_digest(&self.params)
    }

    pub fn abs_sum(&self) -> f64 {
        self.params.values().map(Tensor::abs_sum).sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.params.values().map(Tensor::sq_norm).sum()
    }

    pub fn bind_params<'a>(&'a self, bindings: &mut Bindings<'a>, prefix: &str) {
        for (name, t) in &self.params {
            bindings.bind(format!("{prefix}{name}"), t);
        }
    }

    fn append_layer(&self, g: &mut Graph, input: NodeId, layer: &Layer, prefix: &str) -> Result<NodeId> {
        let w = g.leaf(format!("{prefix}{}.weight", layer.name), &[layer.fan_in, layer.fan_out])?;
        let b = g.leaf(format!("{prefix}{}.bias", layer.name), &[layer.fan_out])?;
        let z = g.matmul(input, w)?;
        let z = g.add_row(z, b)?;
        match layer.activation {
            Activation::Identity => Ok(z),
            Activation::Relu => g.relu(z),
            Activation::Sigmoid => g.sigmoid(z),
        }
    }

    fn append_chain(&self, g: &mut Graph, mut x: NodeId, prefix: &str, layer_prefix: &str) -> Result<NodeId> {
        for layer in self.arch.layers().iter().filter(|l| l.name.starts_with(layer_prefix)) {
            x = self.append_layer(g, x, layer, prefix)?;
        }
        Ok(x)
    }

    /// Adds this model's forward computation on `input` to `g`.
    ///
    /// Classifiers yield logits, autoencoders their sigmoid reconstruction and
    /// VAEs the decoding of the latent mean.
    pub fn append(&self, g: &mut Graph, input: NodeId, prefix: &str) -> Result<NodeId> {
        match self.arch.kind {
            ModelKind::Classifier => self.append_chain(g, input, prefix, "layer"),
            ModelKind::Autoencoder => {
                let z = self.append_chain(g, input, prefix, "enc")?;
                self.append_chain(g, z, prefix, "dec")
            }
            ModelKind::Vae => {
                let (mu, _) = self.append_encoder(g, input, prefix)?;
                self.append_decoder(g, mu, prefix)
            }
        }
    }

    /// VAE encoder heads `(mu, logvar)`.
    pub fn append_encoder(&self, g: &mut Graph, input: NodeId, prefix: &str) -> Result<(NodeId, NodeId)> {
        self.expect_kind(ModelKind::Vae)?;
        let layers = self.arch.layers();
        let trunk = self.append_chain(g, input, prefix, "enc")?;
        let head = |name: &str| layers.iter().find(|l| l.name == name).unwrap().clone();
        let mu = self.append_layer(g, trunk, &head("mu"), prefix)?;
        let logvar = self.append_layer(g, trunk, &head("logvar"), prefix)?;
        Ok((mu, logvar))
    }

    pub fn append_decoder(&self, g: &mut Graph, z: NodeId, prefix: &str) -> Result<NodeId> {
        self.expect_kind(ModelKind::Vae)?;
        self.append_chain(g, z, prefix, "dec")
    }

    /// Evaluates [`Model::append`] on a batch.
    pub fn run(&self, batch: &Tensor) -> Result<Tensor> {
        if batch.shape().len() != 2 || batch.cols() != self.arch.input {
            return Err(Error::Shape(format!(
                "batch {:?} does not match input width {}",
                batch.shape(),
                self.arch.input
            )));
        }
        let mut g = Graph::new();
        let x = g.leaf("x", batch.shape())?;
        let out = self.append(&mut g, x, "")?;
        g.set_output(out);
        let mut b = Bindings::new();
        b.bind("x", batch);
        self.bind_params(&mut b, "");
        evaluate(&g, &b)
    }

    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        self.expect_kind(ModelKind::Classifier)?;
        self.run(batch)
    }
}

pub fn params_digest(params: &BTreeMap<String, Tensor>) -> String {
    let mut h = Sha256::new();
    for (name, t) in params {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update(t.canonical_bytes());
    }
    hex::encode(h.finalize())
}

pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

/// Class probabilities for each row.
pub fn forward_classify(model: &Model, batch: &Tensor) -> Result<Tensor> {
    Ok(softmax_rows(&model.logits(batch)?))
}

/// Reconstruction of each (masked) image row, in `[0, 1]`.
pub fn forward_reconstruct(model: &Model, batch: &Tensor) -> Result<Tensor> {
    model.expect_kind(ModelKind::Autoencoder)?;
    model.run(batch)
}

/// Where an unlearned model came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub method: String,
    pub config_digest: String,
    pub seeds: BTreeMap<String, u64>,
    /// Forget-row reads performed while producing the unlearned model.
    pub forget_reads: usize,
}

/// Pre- and post-unlearning models evaluated together.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelPair {
    pub original: Model,
    pub unlearned: Model,
    pub provenance: Provenance,
}

impl ModelPair {
    pub fn new(original: Model, unlearned: Model, provenance: Provenance) -> Result<Self> {
        if original.arch != unlearned.arch {
            return Err(config_err("pair members have different architectures"));
        }
        Ok(Self { original, unlearned, provenance })
    }

    /// Pair whose unlearned member is the original itself.
    pub fn identity(model: &Model) -> Self {
        Self {
            original: model.clone(),
            unlearned: model.clone(),
            provenance: Provenance {
                method: "identity".into(),
                config_digest: String::new(),
                seeds: BTreeMap::new(),
                forget_reads: 0,
            },
        }
    }
}
