//! Metrics and the robust-unlearning verdict.

use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attack::{model_outputs, output_distance, AttackResult, AttackTargets};
use crate::data::{InpaintingTask, LabeledDataset, UnlearningSplit};
use crate::error::{config_err, Error, Result};
use crate::model::{Model, ModelKind, ModelPair};
use crate::seed::derived_rng;
use crate::tensor::Tensor;
use crate::trainer::{accuracy, per_sample_loss};

/// Column order of the rendered report.
pub const CSV_HEADER: [&str; 10] =
    ["method", "scenario", "eps", "TA", "UA_clean", "MIA_clean", "UA_atk", "MIA_atk", "min_map_dist", "verdict"];

/// Accuracy on the forget set against the original labels.
pub fn unlearning_accuracy(model: &Model, inputs: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::EmptySet("forget set".into()));
    }
    accuracy(model, inputs, labels)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MiaConfig {
    /// Seed of the calibration subsample.
    pub seed: u64,
    /// Caps each calibration side; `None` uses every sample.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration_size: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiaResult {
    pub score: f64,
    /// Samples with loss `<= threshold` are flagged as members.
    pub threshold: f64,
    pub balanced_accuracy: f64,
    /// Set when calibration could not separate anything.
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MiaThreshold {
    pub threshold: f64,
    pub balanced_accuracy: f64,
    pub degenerate: bool,
}

impl MiaThreshold {
    pub fn is_member(&self, loss: f64) -> bool {
        loss <= self.threshold
    }

    pub fn score(&self, losses: &[f64]) -> f64 {
        if self.degenerate {
            return 0.5;
        }
        losses.iter().filter(|&&l| self.is_member(l)).count() as f64 / losses.len() as f64
    }
}

/// Picks the loss threshold maximizing balanced accuracy of "member iff loss
/// <= threshold"; the smallest maximizer wins. Only the order of the losses
/// matters.
pub fn fit_threshold(members: &[f64], non_members: &[f64]) -> Result<MiaThreshold> {
    if members.is_empty() || non_members.is_empty() {
        return Err(Error::EmptySet("MIA calibration set".into()));
    }
    let mut all: Vec<(f64, bool)> =
        members.iter().map(|&l| (l, true)).chain(non_members.iter().map(|&l| (l, false))).collect();
    if all.iter().any(|(l, _)| l.is_nan()) {
        return Err(Error::Domain("NaN loss in MIA calibration".into()));
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    if all.first().unwrap().0 == all.last().unwrap().0 {
        return Ok(MiaThreshold { threshold: all[0].0, balanced_accuracy: 0.5, degenerate: true });
    }
    let (nm, nn) = (members.len() as f64, non_members.len() as f64);
    // the empty prediction set scores 0.5; a threshold must beat it strictly
    let (mut best, mut best_acc) = (f64::NEG_INFINITY, 0.5);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < all.len() {
        let v = all[i].0;
        while i < all.len() && all[i].0 == v {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let acc = 0.5 * (tp as f64 / nm + (1.0 - fp as f64 / nn));
        if acc > best_acc {
            best = v;
            best_acc = acc;
        }
    }
    if best == f64::NEG_INFINITY {
        return Ok(MiaThreshold { threshold: best, balanced_accuracy: 0.5, degenerate: true });
    }
    Ok(MiaThreshold { threshold: best, balanced_accuracy: best_acc, degenerate: false })
}

/// MIA on precomputed losses.
pub fn mia_from_losses(members: &[f64], non_members: &[f64], forget: &[f64]) -> Result<MiaResult> {
    if forget.is_empty() {
        return Err(Error::EmptySet("forget set".into()));
    }
    let t = fit_threshold(members, non_members)?;
    Ok(MiaResult {
        score: t.score(forget),
        threshold: t.threshold,
        balanced_accuracy: t.balanced_accuracy,
        degenerate: t.degenerate,
    })
}

fn subsample(losses: Vec<f64>, cap: Option<usize>, seed: u64, label: &str) -> Vec<f64> {
    match cap {
        Some(c) if c < losses.len() => {
            let mut idx: Vec<usize> = (0..losses.len()).collect();
            idx.shuffle(&mut derived_rng(seed, label));
            let mut keep = idx[..c].to_vec();
            keep.sort_unstable();
            keep.into_iter().map(|i| losses[i]).collect()
        }
        _ => losses,
    }
}

/// Calibrated loss threshold of a classifier.
pub fn calibrate_mia(model: &Model, retain: &AttackTargets, test: &AttackTargets, config: &MiaConfig) -> Result<MiaThreshold> {
    if retain.is_empty() || test.is_empty() {
        return Err(Error::EmptySet("MIA calibration set".into()));
    }
    let m = per_sample_loss(model, &retain.inputs, &retain.labels)?;
    let n = per_sample_loss(model, &test.inputs, &test.labels)?;
    let m = subsample(m, config.calibration_size, config.seed, "mia/members");
    let n = subsample(n, config.calibration_size, config.seed, "mia/non-members");
    fit_threshold(&m, &n)
}

/// Fraction of `forget` flagged as members by a retain/test loss threshold.
pub fn mia_score(
    model: &Model,
    retain: &AttackTargets,
    test: &AttackTargets,
    forget: &AttackTargets,
    config: &MiaConfig,
) -> Result<MiaResult> {
    if forget.is_empty() {
        return Err(Error::EmptySet("forget set".into()));
    }
    let t = calibrate_mia(model, retain, test, config)?;
    let f = per_sample_loss(model, &forget.inputs, &forget.labels)?;
    Ok(MiaResult { score: t.score(&f), threshold: t.threshold, balanced_accuracy: t.balanced_accuracy, degenerate: t.degenerate })
}

/// Model inputs for the three evaluation splits. Generative pairs see the
/// masked images.
#[derive(Clone, Debug)]
pub struct EvalSets {
    pub scenario: String,
    pub retain: AttackTargets,
    pub forget: AttackTargets,
    pub test: AttackTargets,
}

impl EvalSets {
    pub fn classification(dataset: &LabeledDataset, split: &UnlearningSplit) -> Result<Self> {
        Ok(Self {
            scenario: split.spec.scenario().to_string(),
            retain: AttackTargets::from_dataset(dataset, &split.retain)?,
            forget: AttackTargets::from_dataset(dataset, &split.forget)?,
            test: AttackTargets::from_dataset(dataset, &split.test)?,
        })
    }

    pub fn inpainting(dataset: &LabeledDataset, split: &UnlearningSplit, task: &InpaintingTask) -> Result<Self> {
        let batch = |idx: &[usize]| -> Result<AttackTargets> {
            let m = task.masked(dataset, idx)?;
            AttackTargets::with_indices(m.masked, dataset.labels_of(idx), idx.to_vec())
        };
        Ok(Self {
            scenario: split.spec.scenario().to_string(),
            retain: batch(&split.retain)?,
            forget: batch(&split.forget)?,
            test: batch(&split.test)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessThresholds {
    /// Margin a mapped forget output must keep from the original output.
    pub epsilon1: f64,
    /// Bound on the mean retain-set output drift.
    pub epsilon2: f64,
}

impl RobustnessThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon1 > 0.0) || !(self.epsilon2 >= 0.0) {
            return Err(config_err(format!("invalid thresholds ε1={} ε2={}", self.epsilon1, self.epsilon2)));
        }
        Ok(())
    }
}

/// Per-row output distances between the two models of a pair on `inputs`.
pub fn pair_distances(pair: &ModelPair, inputs: &Tensor) -> Result<Vec<f64>> {
    let a = model_outputs(&pair.unlearned, inputs)?;
    let b = model_outputs(&pair.original, inputs)?;
    let kind = pair.unlearned.kind();
    Ok((0..a.rows()).map(|i| output_distance(kind, a.row(i), b.row(i))).collect())
}

/// Mean output drift of the unlearned model on the retain set.
pub fn retain_drift(pair: &ModelPair, retain: &Tensor) -> Result<f64> {
    let d = pair_distances(pair, retain)?;
    if d.is_empty() {
        return Err(Error::EmptySet("retain set".into()));
    }
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Thresholds anchored to a retrained pair: ε1 is half its median clean
/// forget distance, ε2 twice its retain drift.
pub fn default_thresholds(retrain: &ModelPair, sets: &EvalSets) -> Result<RobustnessThresholds> {
    if sets.forget.is_empty() {
        return Err(Error::EmptySet("forget set".into()));
    }
    let mut d = pair_distances(retrain, &sets.forget.inputs)?;
    let t = RobustnessThresholds { epsilon1: 0.5 * median(&mut d), epsilon2: 2.0 * retain_drift(retrain, &sets.retain.inputs)? };
    t.validate()?;
    Ok(t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    /// Dataset index of the forget sample.
    pub index: usize,
    pub eps: String,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum Verdict {
    RobustNoViolationFound,
    Violated {
        /// Forget sample mapped within ε1, if any.
        witness: Option<Witness>,
        retain_violation: bool,
    },
}

impl Verdict {
    pub fn is_violated(&self) -> bool {
        matches!(self, Self::Violated { .. })
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::RobustNoViolationFound => f.write_str("robust-no-violation-found"),
            Self::Violated { witness: Some(w), .. } => write!(f, "violated@{}", w.index),
            Self::Violated { .. } => f.write_str("violated-retain"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonEntry {
    pub eps: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ua_attacked: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mia_attacked: Option<f64>,
    pub min_map_dist: f64,
    pub verdict: Verdict,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub method: String,
    pub scenario: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ua_clean: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mia_clean: Option<f64>,
    pub retain_drift: f64,
    pub per_eps: Vec<EpsilonEntry>,
    pub verdict: Verdict,
    pub thresholds: RobustnessThresholds,
}

impl RobustnessReport {
    /// One CSV record per attack strength, in [`CSV_HEADER`] order.
    pub fn csv_rows(&self) -> Vec<Vec<String>> {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
        self.per_eps
            .iter()
            .map(|e| {
                vec![
                    self.method.clone(),
                    self.scenario.clone(),
                    e.eps.clone(),
                    opt(self.ta),
                    opt(self.ua_clean),
                    opt(self.mia_clean),
                    opt(e.ua_attacked),
                    opt(e.mia_attacked),
                    format!("{:.6}", e.min_map_dist),
                    e.verdict.to_string(),
                ]
            })
            .collect()
    }
}

/// Evaluates a pair against mapping-attack results.
///
/// Distances are recomputed from the adversarial inputs, so a witness always
/// satisfies `||f_u(δ) - f(x)|| <= ε1` on the plain pair.
pub fn robust_verdict(
    method: &str,
    pair: &ModelPair,
    sets: &EvalSets,
    attacks: &[AttackResult],
    thresholds: Option<&RobustnessThresholds>,
    mia: &MiaConfig,
) -> Result<RobustnessReport> {
    let thresholds = *thresholds.ok_or_else(|| config_err("robustness thresholds missing"))?;
    thresholds.validate()?;
    let kind = pair.unlearned.kind();
    let f = &pair.unlearned;
    let drift = retain_drift(pair, &sets.retain.inputs)?;
    let retain_violation = drift > thresholds.epsilon2;

    let classifier = kind == ModelKind::Classifier;
    let (ta, ua_clean, threshold) = if classifier {
        let t = calibrate_mia(f, &sets.retain, &sets.test, mia)?;
        (
            Some(accuracy(f, &sets.test.inputs, &sets.test.labels)?),
            Some(unlearning_accuracy(f, &sets.forget.inputs, &sets.forget.labels)?),
            Some(t),
        )
    } else {
        (None, None, None)
    };
    let mia_of = |inputs: &Tensor| -> Result<Option<f64>> {
        match &threshold {
            Some(t) => Ok(Some(t.score(&per_sample_loss(f, inputs, &sets.forget.labels)?))),
            None => Ok(None),
        }
    };
    let mia_clean = mia_of(&sets.forget.inputs)?;

    let reference = model_outputs(&pair.original, &sets.forget.inputs)?;
    let mut per_eps = Vec::with_capacity(attacks.len());
    let mut first_witness: Option<Witness> = None;
    for result in attacks {
        if result.samples.len() != sets.forget.len() {
            return Err(config_err("attack result does not cover the forget set"));
        }
        let adv = result.adversarial()?;
        let mapped = model_outputs(f, &adv)?;
        let eps = result.config.label();
        let mut best: Option<(usize, f64)> = None;
        for (i, s) in result.samples.iter().enumerate() {
            if s.index != sets.forget.indices[i] {
                return Err(config_err("attack result order differs from the forget set"));
            }
            let d = output_distance(kind, mapped.row(i), reference.row(i));
            if best.map_or(true, |(_, b)| d < b) {
                best = Some((i, d));
            }
        }
        let (bi, min_d) = best.unwrap();
        let witness = (min_d <= thresholds.epsilon1).then(|| Witness {
            index: sets.forget.indices[bi],
            eps: eps.clone(),
            distance: min_d,
        });
        let verdict = if witness.is_some() || retain_violation {
            Verdict::Violated { witness: witness.clone(), retain_violation }
        } else {
            Verdict::RobustNoViolationFound
        };
        if first_witness.is_none() {
            first_witness = witness;
        }
        per_eps.push(EpsilonEntry {
            eps,
            ua_attacked: if classifier { Some(unlearning_accuracy(f, &adv, &sets.forget.labels)?) } else { None },
            mia_attacked: mia_of(&adv)?,
            min_map_dist: min_d,
            verdict,
        });
    }
    let verdict = if first_witness.is_some() || retain_violation {
        Verdict::Violated { witness: first_witness, retain_violation }
    } else {
        Verdict::RobustNoViolationFound
    };
    Ok(RobustnessReport {
        method: method.to_string(),
        scenario: sets.scenario.clone(),
        ta,
        ua_clean,
        mia_clean,
        retain_drift: drift,
        per_eps,
        verdict,
        thresholds,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerativeReport {
    /// Summed per-image L1 between I2 and I1.
    pub l1_i2_i1: f64,
    /// Summed per-image L1 between I3 and I1.
    pub l1_i3_i1: f64,
    pub per_image_i2: Vec<f64>,
    pub per_image_i3: Vec<f64>,
    /// `l1_i3_i1 / l1_i2_i1`; 0 when both are 0.
    pub ratio: f64,
}

fn per_image_l1(a: &Tensor, b: &Tensor) -> Vec<f64> {
    (0..a.rows()).map(|i| a.row(i).iter().zip(b.row(i)).map(|(x, y)| (x - y).abs()).sum()).collect()
}

/// L1 report over original outputs `i1`, unlearned outputs on clean queries
/// `i2` and unlearned outputs on attacked queries `i3`.
pub fn generative_report(i1: &Tensor, i2: &Tensor, i3: &Tensor) -> Result<GenerativeReport> {
    if i1.shape() != i2.shape() || i1.shape() != i3.shape() {
        return Err(Error::Shape(format!("{:?} / {:?} / {:?}", i1.shape(), i2.shape(), i3.shape())));
    }
    let per_image_i2 = per_image_l1(i2, i1);
    let per_image_i3 = per_image_l1(i3, i1);
    let l1_i2_i1: f64 = per_image_i2.iter().sum();
    let l1_i3_i1: f64 = per_image_i3.iter().sum();
    let ratio = if l1_i3_i1 == 0.0 { 0.0 } else { l1_i3_i1 / l1_i2_i1 };
    Ok(GenerativeReport { l1_i2_i1, l1_i3_i1, per_image_i2, per_image_i3, ratio })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_scores() {
        let r = mia_from_losses(&[0.0; 4], &[1.0; 4], &[0.0; 3]).unwrap();
        assert_eq!((r.score, r.balanced_accuracy, r.threshold), (1.0, 1.0, 0.0));
        let r = mia_from_losses(&[0.1, 0.2], &[0.5, 0.6], &[0.9, 2.0]).unwrap();
        assert_eq!(r.score, 0.0);
    }

    #[test]
    fn degenerate_calibration_reports_half() {
        let r = mia_from_losses(&[0.3; 3], &[0.3; 5], &[0.0, 1.0]).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.score, 0.5);
        assert!(mia_from_losses(&[], &[0.3], &[0.1]).is_err());
    }

    #[test]
    fn smallest_maximizer_wins() {
        // thresholds 0.1 and 0.3 both reach balanced accuracy 0.75
        let t = fit_threshold(&[0.1, 0.3], &[0.2, 0.4]).unwrap();
        assert_eq!(t.threshold, 0.1);
        assert_eq!(t.balanced_accuracy, 0.75);
    }

    #[test]
    fn generative_identity_ratio() {
        let a = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.5, 0.5]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0, 1.0], vec![0.5, 0.0]]).unwrap();
        let r = generative_report(&a, &b, &a).unwrap();
        assert_eq!((r.l1_i2_i1, r.l1_i3_i1, r.ratio), (1.5, 0.0, 0.0));
        assert_eq!(r.per_image_i2, vec![1.0, 0.5]);
        let short = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        assert!(matches!(generative_report(&a, &b, &short), Err(Error::Shape(_))));
    }

    #[test]
    fn thresholds_validate() {
        assert!(RobustnessThresholds { epsilon1: 0.0, epsilon2: 0.1 }.validate().is_err());
        assert!(RobustnessThresholds { epsilon1: 0.1, epsilon2: 0.0 }.validate().is_ok());
    }
}
