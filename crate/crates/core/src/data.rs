//! Synthetic datasets, retain/forget/test partitions and image masking.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::seed::{derive_seed, derived_rng, rng};
use crate::tensor::Tensor;

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Share of each class held out as the test split.
pub const TEST_SHARE: f64 = 0.2;

/// Fill value for masked pixels.
pub const MASK_FILL: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Gaussian clusters around uniformly drawn centers, min-max normalized per dimension.
    Blobs { n: usize, dim: usize, classes: usize, noise: f64 },
    /// `side x side` grayscale shapes, one shape family per class.
    Glyphs { n: usize, side: usize, classes: usize, noise: f64 },
}

impl DatasetSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| config_err(format!("dataset spec: {e}")))
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Blobs { .. } => "blobs",
            Self::Glyphs { .. } => "glyphs",
        }
    }

    pub fn classes(&self) -> usize {
        match *self {
            Self::Blobs { classes, .. } | Self::Glyphs { classes, .. } => classes,
        }
    }

    pub fn samples(&self) -> usize {
        match *self {
            Self::Blobs { n, .. } | Self::Glyphs { n, .. } => n,
        }
    }

    pub fn width(&self) -> usize {
        match *self {
            Self::Blobs { dim, .. } => dim,
            Self::Glyphs { side, .. } => side * side,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    pub spec: DatasetSpec,
    pub generator_seed: u64,
    pub features: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.spec.classes()
    }

    pub fn width(&self) -> usize {
        self.features.cols()
    }

    pub fn rows(&self, indices: &[usize]) -> Result<Tensor> {
        self.features.select_rows(indices)
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = DatasetDocument {
            version: DATASET_FORMAT_VERSION,
            name: self.name.clone(),
            kind: self.spec.kind().to_string(),
            spec: self.spec.clone(),
            seed: self.generator_seed,
            shape: self.features.shape().to_vec(),
            features: self.features.data().to_vec(),
            labels: self.labels.clone(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: DatasetDocument = serde_json::from_str(text)?;
        if doc.version != DATASET_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {}", doc.version)));
        }
        if doc.kind != doc.spec.kind() {
            return Err(Error::Format(format!("kind `{}` disagrees with spec", doc.kind)));
        }
        let features = Tensor::new(doc.shape, doc.features)?;
        if features.rows() != doc.labels.len() {
            return Err(Error::Format("label count does not match feature rows".into()));
        }
        Ok(Self {
            name: doc.name,
            spec: doc.spec,
            generator_seed: doc.seed,
            features,
            labels: doc.labels,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetDocument {
    version: u32,
    name: String,
    kind: String,
    spec: DatasetSpec,
    seed: u64,
    shape: Vec<usize>,
    features: Vec<f64>,
    labels: Vec<usize>,
}

/// Draws a dataset. Labels cycle through the classes so every class gets
/// `n / K` rows (the first `n mod K` classes get one more).
pub fn generate_dataset(spec: &DatasetSpec, seed: u64) -> Result<LabeledDataset> {
    let (n, k) = (spec.samples(), spec.classes());
    if k < 2 {
        return Err(config_err("need at least two classes"));
    }
    if n < 10 * k {
        return Err(config_err(format!("need at least {} samples for {k} classes", 10 * k)));
    }
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    let features = match *spec {
        DatasetSpec::Blobs { dim, noise, .. } => {
            if dim == 0 || !(noise >= 0.0) {
                return Err(config_err("blobs need dim > 0 and noise >= 0"));
            }
            blobs(&labels, k, dim, noise, seed)
        }
        DatasetSpec::Glyphs { side, noise, .. } => {
            if side < 6 {
                return Err(config_err("glyph side must be at least 6"));
            }
            if k > GLYPH_FAMILIES {
                return Err(config_err(format!("glyphs support at most {GLYPH_FAMILIES} classes")));
            }
            if !(noise >= 0.0) {
                return Err(config_err("noise must be >= 0"));
            }
            glyphs(&labels, side, noise, seed)
        }
    }?;
    Ok(LabeledDataset {
        name: format!("{}-{seed}", spec.kind()),
        spec: spec.clone(),
        generator_seed: seed,
        features,
        labels,
    })
}

fn blobs(labels: &[usize], k: usize, dim: usize, noise: f64, seed: u64) -> Result<Tensor> {
    let mut center_rng = derived_rng(seed, "blobs/centers");
    let centers: Vec<Vec<f64>> =
        (0..k).map(|_| (0..dim).map(|_| center_rng.gen::<f64>()).collect()).collect();
    let mut noise_rng = derived_rng(seed, "blobs/noise");
    let mut data = Vec::with_capacity(labels.len() * dim);
    for &y in labels {
        for &c in &centers[y] {
            let z: f64 = StandardNormal.sample(&mut noise_rng);
            data.push(c + noise * z);
        }
    }
    // per-dimension min-max normalization into [0, 1]
    for j in 0..dim {
        let col = data.iter().skip(j).step_by(dim);
        let (lo, hi) = col.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
        let range = hi - lo;
        for i in 0..labels.len() {
            let v = &mut data[i * dim + j];
            *v = if range > 0.0 { ((*v - lo) / range).clamp(0.0, 1.0) } else { 0.5 };
        }
    }
    Tensor::new(vec![labels.len(), dim], data)
}

const GLYPH_FAMILIES: usize = 8;

fn glyphs(labels: &[usize], side: usize, noise: f64, seed: u64) -> Result<Tensor> {
    let mut r = derived_rng(seed, "glyphs");
    let mut data = Vec::with_capacity(labels.len() * side * side);
    for &y in labels {
        let dx = r.gen_range(-1i64..=1);
        let dy = r.gen_range(-1i64..=1);
        let ink = r.gen_range(0.75..=1.0);
        let mut img = vec![0.0; side * side];
        draw_glyph(y, side as i64, dx, dy, &mut |x, yy| {
            if (0..side as i64).contains(&x) && (0..side as i64).contains(&yy) {
                img[(yy as usize) * side + x as usize] = ink;
            }
        });
        for v in img.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut r);
            *v = (*v + noise * z).clamp(0.0, 1.0);
        }
        data.extend(img);
    }
    Tensor::new(vec![labels.len(), side * side], data)
}

fn draw_glyph(family: usize, s: i64, dx: i64, dy: i64, put: &mut dyn FnMut(i64, i64)) {
    let mid = s / 2;
    match family {
        // horizontal bar
        0 => {
            for x in 1..s - 1 {
                put(x + dx, mid - 1 + dy);
                put(x + dx, mid + dy);
            }
        }
        // vertical bar
        1 => {
            for y in 1..s - 1 {
                put(mid - 1 + dx, y + dy);
                put(mid + dx, y + dy);
            }
        }
        // plus
        2 => {
            for t in 1..s - 1 {
                put(t + dx, mid + dy);
                put(mid + dx, t + dy);
            }
        }
        // hollow box
        3 => {
            let (lo, hi) = (1, s - 2);
            for t in lo..=hi {
                put(t + dx, lo + dy);
                put(t + dx, hi + dy);
                put(lo + dx, t + dy);
                put(hi + dx, t + dy);
            }
        }
        // ring
        4 => {
            let c = (s as f64 - 1.0) / 2.0;
            let radius = s as f64 / 3.0;
            for y in 0..s {
                for x in 0..s {
                    let d = ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt();
                    if (d - radius).abs() < 0.75 {
                        put(x + dx, y + dy);
                    }
                }
            }
        }
        // main diagonal
        5 => {
            for t in 0..s {
                put(t + dx, t + dy);
            }
        }
        // X
        6 => {
            for t in 0..s {
                put(t + dx, t + dy);
                put(s - 1 - t + dx, t + dy);
            }
        }
        // filled center square
        _ => {
            for y in mid - 2..mid + 2 {
                for x in mid - 2..mid + 2 {
                    put(x + dx, y + dy);
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum ForgetSpec {
    /// Forget every training row of the listed classes.
    ClassWise { classes: Vec<usize> },
    /// Forget a uniformly drawn fraction of the training rows.
    InstanceWise { fraction: f64 },
}

impl ForgetSpec {
    pub fn scenario(&self) -> &'static str {
        match self {
            Self::ClassWise { .. } => "class-wise",
            Self::InstanceWise { .. } => "instance-wise",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnlearningSplit {
    pub retain: Vec<usize>,
    pub forget: Vec<usize>,
    pub test: Vec<usize>,
    pub spec: ForgetSpec,
}

impl UnlearningSplit {
    /// Retain and forget indices together, ascending.
    pub fn train(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.retain.iter().chain(&self.forget).copied().collect();
        all.sort_unstable();
        all
    }
}

/// Stratified test split, keyed by the dataset's own seed so that every
/// forget selection over the same dataset shares one train/test boundary.
pub fn test_indices(dataset: &LabeledDataset) -> Vec<usize> {
    let mut r = derived_rng(dataset.generator_seed, "split/test");
    let mut test = Vec::new();
    for class in 0..dataset.classes() {
        let mut members: Vec<usize> =
            (0..dataset.len()).filter(|&i| dataset.labels[i] == class).collect();
        members.shuffle(&mut r);
        let take = (members.len() as f64 * TEST_SHARE).round() as usize;
        test.extend_from_slice(&members[..take]);
    }
    test.sort_unstable();
    test
}

pub fn partition(dataset: &LabeledDataset, spec: &ForgetSpec, seed: u64) -> Result<UnlearningSplit> {
    let test = test_indices(dataset);
    let test_set: BTreeSet<usize> = test.iter().copied().collect();
    let train: Vec<usize> = (0..dataset.len()).filter(|i| !test_set.contains(i)).collect();
    let forget: Vec<usize> = match spec {
        ForgetSpec::ClassWise { classes } => {
            if classes.is_empty() {
                return Err(config_err("no forget classes listed"));
            }
            if let Some(c) = classes.iter().find(|&&c| c >= dataset.classes()) {
                return Err(config_err(format!("forget class {c} does not exist")));
            }
            train.iter().copied().filter(|&i| classes.contains(&dataset.labels[i])).collect()
        }
        ForgetSpec::InstanceWise { fraction } => {
            if !(*fraction > 0.0 && *fraction < 1.0) {
                return Err(config_err(format!("forget fraction {fraction} outside (0, 1)")));
            }
            let take = (fraction * train.len() as f64).round() as usize;
            let mut shuffled = train.clone();
            shuffled.shuffle(&mut rng(derive_seed(seed, "split/forget")));
            let mut f = shuffled[..take].to_vec();
            f.sort_unstable();
            f
        }
    };
    if forget.is_empty() {
        return Err(config_err("forget set is empty"));
    }
    let forget_set: BTreeSet<usize> = forget.iter().copied().collect();
    let retain = train.into_iter().filter(|i| !forget_set.contains(i)).collect();
    Ok(UnlearningSplit { retain, forget, test, spec: spec.clone() })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub fraction: f64,
    pub block_size: usize,
}

/// Masked-reconstruction task: which mask every dataset row receives.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InpaintingTask {
    pub mask: MaskSpec,
    pub seed: u64,
}

impl InpaintingTask {
    /// Masked copies of the given dataset rows.
    pub fn masked(&self, dataset: &LabeledDataset, indices: &[usize]) -> Result<MaskedBatch> {
        mask_images_keyed(&dataset.rows(indices)?, indices, &self.mask, self.seed)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedBatch {
    pub originals: Tensor,
    pub masked: Tensor,
    /// `true` where a pixel was replaced, one row per image.
    pub mask: Vec<Vec<bool>>,
}

/// Side length of square images stored as flat rows.
pub fn image_side(images: &Tensor) -> Result<usize> {
    let cols = images.cols();
    let side = (cols as f64).sqrt().round() as usize;
    if side * side != cols {
        return Err(config_err(format!("rows of width {cols} are not square images")));
    }
    Ok(side)
}

/// Masks `round(fraction * blocks)` aligned `block x block` tiles per image.
/// Coverage is therefore exact to within half a tile.
pub fn mask_images(images: &Tensor, spec: &MaskSpec, seed: u64) -> Result<MaskedBatch> {
    let keys: Vec<usize> = (0..images.rows()).collect();
    mask_images_keyed(images, &keys, spec, seed)
}

/// Like [`mask_images`], but the mask of row `i` depends only on `keys[i]`
/// (normally its dataset index), not on its position in the batch.
pub fn mask_images_keyed(images: &Tensor, keys: &[usize], spec: &MaskSpec, seed: u64) -> Result<MaskedBatch> {
    if keys.len() != images.rows() {
        return Err(Error::Shape("one mask key per image required".into()));
    }
    let side = image_side(images)?;
    let b = spec.block_size;
    if b == 0 || b > side {
        return Err(config_err(format!("block size {b} does not fit {side}x{side} images")));
    }
    if side % b != 0 {
        return Err(config_err(format!("block size {b} does not tile {side}x{side} images")));
    }
    if !(0.0..=1.0).contains(&spec.fraction) {
        return Err(config_err(format!("mask fraction {} outside [0, 1]", spec.fraction)));
    }
    let grid = side / b;
    let blocks = (spec.fraction * (grid * grid) as f64).round() as usize;
    let mut masked = images.clone();
    let mut mask = Vec::with_capacity(images.rows());
    for i in 0..images.rows() {
        let mut tiles: Vec<usize> = (0..grid * grid).collect();
        tiles.shuffle(&mut derived_rng(seed, &format!("mask/{}", keys[i])));
        let mut m = vec![false; side * side];
        for &t in &tiles[..blocks] {
            let (ty, tx) = (t / grid, t % grid);
            for y in ty * b..(ty + 1) * b {
                for x in tx * b..(tx + 1) * b {
                    m[y * side + x] = true;
                }
            }
        }
        for (v, &on) in masked.row_mut(i).iter_mut().zip(&m) {
            if on {
                *v = MASK_FILL;
            }
        }
        mask.push(m);
    }
    Ok(MaskedBatch { originals: images.clone(), masked, mask })
}
