use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use uma_core::attack::{model_outputs, uma, AttackConfig, AttackMode, AttackResult, AttackTargets};
use uma_core::data::{generate_dataset, partition, InpaintingTask, LabeledDataset, UnlearningSplit};
use uma_core::model::{build_model, Model, ModelKind, ModelPair, Provenance};
use uma_core::purify::{adaptive_uma, train_purifier, Purifier};
use uma_core::seed::derive_seed;
use uma_core::tensor::Tensor;
use uma_core::trainer::{accuracy, checkpoint_from_json, checkpoint_to_json, per_sample_loss, train, Checkpoint, TrainSet};
use uma_core::unlearn::{unlearn, Method};
use uma_core::verify::{
    calibrate_mia, default_thresholds, generative_report, robust_verdict, EvalSets, MiaConfig, RobustnessThresholds,
};

use crate::config::ExperimentConfig;
use crate::manifest::Manifest;
use crate::report::{csv_text, GenerativeEntry, RenderedReport, RetainL1, RunReport, REPORT_CSV, REPORT_TXT};
use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    GenData,
    Train,
    Unlearn,
    Attack,
    Verify,
    Defend,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] =
        [Stage::GenData, Stage::Train, Stage::Unlearn, Stage::Attack, Stage::Verify, Stage::Defend, Stage::Report];

    pub fn name(&self) -> &'static str {
        match self {
            Self::GenData => "gen-data",
            Self::Train => "train",
            Self::Unlearn => "unlearn",
            Self::Attack => "attack",
            Self::Verify => "verify",
            Self::Defend => "defend",
            Self::Report => "report",
        }
    }
}

/// File-name-safe form of a run or attack label.
pub fn slug(label: &str) -> String {
    label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' }).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefenseRow {
    pub method: String,
    pub eps: String,
    pub ua_clean: f64,
    pub ua_attacked: f64,
    pub ua_purified_clean: f64,
    /// Attack computed without knowledge of the purifier, then purified.
    pub ua_unaware: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ua_adaptive: Option<f64>,
}

pub const DEFENSE_HEADER: [&str; 7] =
    ["method", "eps", "UA_clean", "UA_atk", "UA_purified_clean", "UA_unaware", "UA_adaptive"];

impl DefenseRow {
    fn cells(&self) -> Vec<String> {
        vec![
            self.method.clone(),
            self.eps.clone(),
            format!("{:.4}", self.ua_clean),
            format!("{:.4}", self.ua_attacked),
            format!("{:.4}", self.ua_purified_clean),
            format!("{:.4}", self.ua_unaware),
            self.ua_adaptive.map(|v| format!("{v:.4}")).unwrap_or_default(),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Steps,
    StepSize,
}

impl SweepParam {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Steps => "steps",
            Self::StepSize => "step_size",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub ua_attacked: f64,
    pub mia_attacked: f64,
}

/// Stage state of one experiment directory.
pub struct Pipeline {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    pub manifest: Manifest,
    resume: bool,
    recomputed: bool,
    dataset: Option<LabeledDataset>,
    split: Option<UnlearningSplit>,
    original: Option<Model>,
    pairs: Vec<ModelPair>,
    attacks: Vec<Vec<AttackResult>>,
    reports: Vec<RunReport>,
    defense: Vec<DefenseRow>,
    purifier: Option<Purifier>,
}

impl Pipeline {
    /// Opens `out` for `config`. With `resume`, completed stages whose
    /// artifacts still verify are loaded instead of recomputed.
    pub fn open(config: ExperimentConfig, out: &Path, resume: bool) -> Result<Self, CliError> {
        config.validate()?;
        std::fs::create_dir_all(out).map_err(|e| CliError::stage("setup", e))?;
        let digest = config.digest();
        let manifest = match Manifest::load(out) {
            Ok(m) if resume && m.config_digest == digest => m,
            _ => Manifest::new(digest, config.master_seed),
        };
        Ok(Self {
            config,
            out: out.to_path_buf(),
            manifest,
            resume,
            recomputed: false,
            dataset: None,
            split: None,
            original: None,
            pairs: Vec::new(),
            attacks: Vec::new(),
            reports: Vec::new(),
            defense: Vec::new(),
            purifier: None,
        })
    }

    fn seed(&mut self, label: &str) -> u64 {
        let s = derive_seed(self.config.master_seed, label);
        self.manifest.seeds.insert(label.to_string(), s);
        s
    }

    fn task(&mut self) -> Option<InpaintingTask> {
        let mask = self.config.inpainting.clone()?;
        Some(InpaintingTask { mask, seed: self.seed("inpainting") })
    }

    fn write(&mut self, stage: Stage, rel: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.out.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::stage(stage.name(), e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| CliError::stage(stage.name(), e))?;
        self.manifest.record(stage.name(), rel, bytes);
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, stage: Stage, rel: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::stage(stage.name(), e))?;
        text.push('\n');
        self.write(stage, rel, text.as_bytes())
    }

    fn read(&self, rel: &str) -> Result<Vec<u8>, CliError> {
        self.manifest.verify_file(&self.out, rel)
    }

    fn read_text(&self, rel: &str) -> Result<String, CliError> {
        String::from_utf8(self.read(rel)?).map_err(|e| CliError::Integrity(format!("{rel}: {e}")))
    }

    fn read_json<T: for<'de> Deserialize<'de>>(&self, rel: &str) -> Result<T, CliError> {
        serde_json::from_slice(&self.read(rel)?).map_err(|e| CliError::Integrity(format!("{rel}: {e}")))
    }

    fn cached(&self, stage: Stage) -> bool {
        self.resume
            && !self.recomputed
            && self.manifest.is_done(stage.name())
            && self.manifest.verify_stage(&self.out, stage.name()).is_ok()
    }

    /// Runs every stage up to and including `last`.
    pub fn run_through(&mut self, last: Stage) -> Result<(), CliError> {
        for stage in Stage::ALL {
            if stage > last {
                break;
            }
            self.run_stage(stage)?;
        }
        Ok(())
    }

    /// Runs the stages before `last` from cache where possible, then `last`
    /// itself, recomputed unless `reuse_last`.
    pub fn run_command(&mut self, last: Stage, reuse_last: bool) -> Result<(), CliError> {
        for stage in Stage::ALL {
            if stage == last {
                if !reuse_last {
                    self.recomputed = true;
                }
                return self.run_stage(stage);
            }
            self.run_stage(stage)?;
        }
        Ok(())
    }

    fn run_stage(&mut self, stage: Stage) -> Result<(), CliError> {
        if stage == Stage::Defend && self.config.defenses.is_none() {
            return Ok(());
        }
        let cached = self.cached(stage);
        if !cached {
            self.recomputed = true;
            self.manifest.reset(stage.name());
        }
        let result = match stage {
            Stage::GenData => self.gen_data(cached),
            Stage::Train => self.train(cached),
            Stage::Unlearn => self.unlearn(cached),
            Stage::Attack => self.attack(cached),
            Stage::Verify => self.verify(cached),
            Stage::Defend => self.defend(cached),
            Stage::Report => self.report(),
        };
        match result {
            Ok(()) => {
                self.manifest.mark(stage.name(), None);
                self.manifest.save(&self.out)
            }
            Err(e) => {
                self.manifest.mark(stage.name(), Some(e.to_string()));
                self.manifest.save(&self.out)?;
                Err(e)
            }
        }
    }

    fn dataset(&self) -> &LabeledDataset {
        self.dataset.as_ref().expect("gen-data ran")
    }

    fn split(&self) -> &UnlearningSplit {
        self.split.as_ref().expect("gen-data ran")
    }

    fn original(&self) -> &Model {
        self.original.as_ref().expect("train ran")
    }

    fn eval_sets(&mut self) -> Result<EvalSets, CliError> {
        let task = self.task();
        let (d, s) = (self.dataset(), self.split());
        Ok(match task {
            Some(t) => EvalSets::inpainting(d, s, &t)?,
            None => EvalSets::classification(d, s)?,
        })
    }

    fn gen_data(&mut self, cached: bool) -> Result<(), CliError> {
        let data_seed = self.seed("dataset");
        let split_seed = self.seed("split");
        if cached {
            self.dataset = Some(LabeledDataset::from_json(&self.read_text("data/dataset.json")?)?);
            self.split = Some(self.read_json("data/split.json")?);
            return Ok(());
        }
        let dataset = generate_dataset(&self.config.dataset, data_seed)?;
        let split = partition(&dataset, &self.config.split, split_seed)?;
        self.write(Stage::GenData, "data/dataset.json", dataset.to_json()?.as_bytes())?;
        self.write_json(Stage::GenData, "data/split.json", &split)?;
        self.dataset = Some(dataset);
        self.split = Some(split);
        Ok(())
    }

    fn train(&mut self, cached: bool) -> Result<(), CliError> {
        let seed = self.seed("train");
        let task = self.task();
        if cached {
            self.original = Some(checkpoint_from_json(&self.read_text("models/original.json")?)?.model);
            return Ok(());
        }
        let arch = self.config.arch();
        let init = build_model(&arch, derive_seed(seed, "init"))?;
        let train_idx = self.split().train();
        let data = training_set(self.dataset(), &train_idx, task.as_ref())?;
        let mut tc = self.config.train.clone();
        tc.seed = seed;
        let (model, _) = train(&init, &data, &tc)?;
        let mut ck = Checkpoint::new(model.clone());
        ck.seed_lineage.insert("train".into(), seed);
        ck.train_config_digest = Some(tc.digest());
        self.write(Stage::Train, "models/original.json", checkpoint_to_json(&ck)?.as_bytes())?;
        self.original = Some(model);
        Ok(())
    }

    fn unlearn(&mut self, cached: bool) -> Result<(), CliError> {
        let labels = self.config.run_labels();
        let task = self.task();
        let mut configs = Vec::new();
        for (i, u) in self.config.unlearn.clone().into_iter().enumerate() {
            let mut c = u.with_defaults();
            c.seed = self.seed(&format!("unlearn/{i}"));
            c.inpainting = task.clone();
            if let Some(a) = &mut c.adversarial {
                a.seed = derive_seed(c.seed, "adversarial");
            }
            configs.push(c);
        }
        if cached {
            let mut pairs = Vec::new();
            for l in &labels {
                let base = format!("models/unlearned/{}", slug(l));
                let model = checkpoint_from_json(&self.read_text(&format!("{base}.json"))?)?.model;
                let prov: Provenance = self.read_json(&format!("{base}.provenance.json"))?;
                pairs.push(ModelPair::new(self.original().clone(), model, prov)?);
            }
            self.pairs = pairs;
            return Ok(());
        }
        let (original, split, dataset) = (self.original(), self.split(), self.dataset());
        let pairs: Vec<ModelPair> = configs
            .par_iter()
            .map(|c| unlearn(original, split, dataset, c))
            .collect::<Result<_, _>>()?;
        for (l, p) in labels.iter().zip(&pairs) {
            let base = format!("models/unlearned/{}", slug(l));
            let mut ck = Checkpoint::new(p.unlearned.clone());
            ck.seed_lineage.extend(p.provenance.seeds.clone());
            ck.train_config_digest = Some(p.provenance.config_digest.clone());
            self.write(Stage::Unlearn, &format!("{base}.json"), checkpoint_to_json(&ck)?.as_bytes())?;
            self.write_json(Stage::Unlearn, &format!("{base}.provenance.json"), &p.provenance)?;
        }
        self.pairs = pairs;
        Ok(())
    }

    /// Attack configurations with their derived seeds.
    fn attack_configs(&mut self) -> Vec<AttackConfig> {
        self.config
            .attacks
            .clone()
            .into_iter()
            .map(|mut a| {
                a.seed = self.seed(&format!("attack/{}", a.label()));
                a
            })
            .collect()
    }

    fn attack(&mut self, cached: bool) -> Result<(), CliError> {
        let labels = self.config.run_labels();
        let configs = self.attack_configs();
        let paths: Vec<Vec<String>> = labels
            .iter()
            .map(|l| configs.iter().map(|a| format!("attacks/{}/{}.json", slug(l), slug(&a.label()))).collect())
            .collect();
        if cached {
            let mut all = Vec::new();
            for row in &paths {
                let mut results = Vec::new();
                for p in row {
                    results.push(AttackResult::from_json(&self.read_text(p)?)?);
                }
                all.push(results);
            }
            self.attacks = all;
            return Ok(());
        }
        let targets = self.eval_sets()?.forget;
        let results: Vec<Vec<AttackResult>> = self
            .pairs
            .par_iter()
            .map(|pair| configs.iter().map(|a| uma(pair, &targets, a)).collect::<Result<Vec<_>, _>>())
            .collect::<Result<_, _>>()?;
        for (row, rs) in paths.iter().zip(&results) {
            for (p, r) in row.iter().zip(rs) {
                self.write(Stage::Attack, p, r.to_json()?.as_bytes())?;
            }
        }
        self.attacks = results;
        Ok(())
    }

    fn thresholds(&self, sets: &EvalSets) -> Result<RobustnessThresholds, CliError> {
        if let Some(t) = self.config.thresholds {
            return Ok(t);
        }
        let i = self
            .config
            .unlearn
            .iter()
            .position(|u| u.method == Method::Retrain && u.adversarial.is_none())
            .ok_or_else(|| CliError::Config("no retrain run to anchor thresholds".into()))?;
        Ok(default_thresholds(&self.pairs[i], sets)?)
    }

    fn verify(&mut self, cached: bool) -> Result<(), CliError> {
        let labels = self.config.run_labels();
        let mia = MiaConfig { seed: self.seed("mia"), ..self.config.mia.clone() };
        let paths: Vec<String> = labels.iter().map(|l| format!("reports/{}.json", slug(l))).collect();
        if cached {
            self.reports = paths.iter().map(|p| self.read_json(p)).collect::<Result<_, _>>()?;
            return Ok(());
        }
        let sets = self.eval_sets()?;
        let thresholds = self.thresholds(&sets)?;
        let retain_truth = match self.config.model.kind {
            ModelKind::Autoencoder => Some(self.dataset().rows(&self.split().retain)?),
            _ => None,
        };
        let reports: Vec<RunReport> = labels
            .par_iter()
            .zip(self.pairs.par_iter())
            .zip(self.attacks.par_iter())
            .map(|((label, pair), attacks)| {
                let robustness = robust_verdict(label, pair, &sets, attacks, Some(&thresholds), &mia)?;
                let (generative, retain_l1) = match &retain_truth {
                    Some(truth) => generative_entries(pair, &sets, attacks, truth)?,
                    None => (Vec::new(), None),
                };
                Ok(RunReport { robustness, generative, retain_l1 })
            })
            .collect::<Result<_, uma_core::Error>>()?;
        self.write_json(Stage::Verify, "reports/thresholds.json", &thresholds)?;
        for (p, r) in paths.iter().zip(&reports) {
            self.write_json(Stage::Verify, p, r)?;
        }
        self.manifest.reports = paths;
        self.reports = reports;
        Ok(())
    }

    fn defend(&mut self, cached: bool) -> Result<(), CliError> {
        let defense = self.config.defenses.clone().expect("defenses configured");
        let seed = self.seed("purifier");
        if cached {
            self.defense = self.read_json("defense/defense.json")?;
            let vae = checkpoint_from_json(&self.read_text("defense/purifier.json")?)?.model;
            self.purifier = Some(Purifier::new(vae)?);
            return Ok(());
        }
        let train_rows = self.dataset().rows(&self.split().train())?;
        let mut pc = defense.purifier.clone();
        pc.train.seed = seed;
        let purifier = train_purifier(&train_rows, &pc)?;
        let mut ck = purifier.checkpoint();
        ck.seed_lineage.insert("train".into(), seed);
        ck.train_config_digest = Some(pc.train.digest());
        self.write(Stage::Defend, "defense/purifier.json", checkpoint_to_json(&ck)?.as_bytes())?;

        let labels = self.config.run_labels();
        let configs = self.attack_configs();
        let forget = self.eval_sets()?.forget;
        let rows: Vec<Vec<DefenseRow>> = labels
            .par_iter()
            .zip(self.pairs.par_iter())
            .zip(self.attacks.par_iter())
            .map(|((label, pair), attacks)| {
                defense_rows(label, pair, &purifier, &forget, &configs, attacks, defense.adaptive)
            })
            .collect::<Result<_, uma_core::Error>>()?;
        let rows: Vec<DefenseRow> = rows.into_iter().flatten().collect();
        let cells: Vec<Vec<String>> = rows.iter().map(DefenseRow::cells).collect();
        self.write_json(Stage::Defend, "defense/defense.json", &rows)?;
        self.write(Stage::Defend, "defense/defense.csv", csv_text(&DEFENSE_HEADER, &cells).as_bytes())?;
        self.purifier = Some(purifier);
        self.defense = rows;
        Ok(())
    }

    fn report(&mut self) -> Result<(), CliError> {
        let rendered = RenderedReport::new(&self.reports);
        self.write(Stage::Report, REPORT_CSV, rendered.csv.as_bytes())?;
        self.write(Stage::Report, REPORT_TXT, rendered.table.as_bytes())?;
        Ok(())
    }

    pub fn pairs(&self) -> &[ModelPair] {
        &self.pairs
    }

    pub fn attacks(&self) -> &[Vec<AttackResult>] {
        &self.attacks
    }

    pub fn reports(&self) -> &[RunReport] {
        &self.reports
    }

    pub fn defense(&self) -> &[DefenseRow] {
        &self.defense
    }

    pub fn purifier(&self) -> Option<&Purifier> {
        self.purifier.as_ref()
    }

    pub fn pair(&self, label: &str) -> Option<&ModelPair> {
        let i = self.config.run_labels().iter().position(|l| l == label)?;
        self.pairs.get(i)
    }

    /// SHA-256 of the rendered CSV report.
    pub fn report_digest(&self) -> String {
        RenderedReport::new(&self.reports).digest()
    }

    pub fn report_table(&self) -> String {
        RenderedReport::new(&self.reports).table
    }
}

fn training_set(dataset: &LabeledDataset, idx: &[usize], task: Option<&InpaintingTask>) -> uma_core::Result<TrainSet> {
    match task {
        Some(t) => {
            let b = t.masked(dataset, idx)?;
            TrainSet::reconstruction(b.masked, b.originals)
        }
        None => TrainSet::classification(dataset.rows(idx)?, dataset.labels_of(idx), dataset.classes()),
    }
}

fn mean_l1(a: &Tensor, b: &Tensor) -> f64 {
    let total: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
    total / a.rows() as f64
}

fn generative_entries(
    pair: &ModelPair,
    sets: &EvalSets,
    attacks: &[AttackResult],
    retain_truth: &Tensor,
) -> uma_core::Result<(Vec<GenerativeEntry>, Option<RetainL1>)> {
    let i1 = model_outputs(&pair.original, &sets.forget.inputs)?;
    let i2 = model_outputs(&pair.unlearned, &sets.forget.inputs)?;
    let mut entries = Vec::new();
    for a in attacks {
        let i3 = model_outputs(&pair.unlearned, &a.adversarial()?)?;
        entries.push(GenerativeEntry { eps: a.config.label(), report: generative_report(&i1, &i2, &i3)? });
    }
    let retain = RetainL1 {
        original: mean_l1(&model_outputs(&pair.original, &sets.retain.inputs)?, retain_truth),
        unlearned: mean_l1(&model_outputs(&pair.unlearned, &sets.retain.inputs)?, retain_truth),
    };
    Ok((entries, Some(retain)))
}

fn defense_rows(
    label: &str,
    pair: &ModelPair,
    purifier: &Purifier,
    forget: &AttackTargets,
    configs: &[AttackConfig],
    attacks: &[AttackResult],
    adaptive: bool,
) -> uma_core::Result<Vec<DefenseRow>> {
    let f = &pair.unlearned;
    let ua = |x: &Tensor| accuracy(f, x, &forget.labels);
    let ua_clean = ua(&forget.inputs)?;
    let ua_purified_clean = ua(&purifier.purify(&forget.inputs)?)?;
    let mut rows = Vec::new();
    for (cfg, result) in configs.iter().zip(attacks) {
        if !matches!(cfg.mode, AttackMode::Bounded { epsilon } if epsilon > 0.0) {
            continue;
        }
        let adv = result.adversarial()?;
        let ua_adaptive = if adaptive {
            let r = adaptive_uma(pair, Some(purifier), forget, cfg)?;
            Some(ua(&purifier.purify(&r.adversarial()?)?)?)
        } else {
            None
        };
        rows.push(DefenseRow {
            method: label.to_string(),
            eps: cfg.label(),
            ua_clean,
            ua_attacked: ua(&adv)?,
            ua_purified_clean,
            ua_unaware: ua(&purifier.purify(&adv)?)?,
            ua_adaptive,
        });
    }
    Ok(rows)
}

/// Runs the whole pipeline and returns the manifest.
pub fn run_experiment(config: ExperimentConfig, out: &Path, resume: bool) -> Result<Pipeline, CliError> {
    let mut p = Pipeline::open(config, out, resume)?;
    p.run_through(Stage::Report)?;
    Ok(p)
}

/// Attacked UA and MIA of one unlearning run across a grid of attack steps or
/// step sizes, the other parameter fixed at its default.
pub fn sweep(
    config: ExperimentConfig,
    out: &Path,
    param: SweepParam,
    grid: &[f64],
) -> Result<Vec<SweepRow>, CliError> {
    let sc = config.sweep.clone().ok_or_else(|| CliError::Config("config has no `sweep` section".into()))?;
    if grid.is_empty() {
        return Err(CliError::Config("sweep grid is empty".into()));
    }
    let mut p = Pipeline::open(config, out, true)?;
    p.run_through(Stage::Unlearn)?;
    let base = AttackConfig::bounded(sc.epsilon, 0);
    let seed = p.seed(&format!("attack/{}", base.label()));
    let mia = MiaConfig { seed: p.seed("mia"), ..p.config.mia.clone() };
    let sets = p.eval_sets()?;
    let pair = p.pair(&sc.method).ok_or_else(|| CliError::Config(format!("unknown run `{}`", sc.method)))?.clone();
    let threshold = calibrate_mia(&pair.unlearned, &sets.retain, &sets.test, &mia)?;
    let rows: Vec<SweepRow> = grid
        .par_iter()
        .map(|&v| {
            let mut cfg = AttackConfig { seed, ..base.clone() };
            match param {
                SweepParam::Steps => cfg.steps = v as usize,
                SweepParam::StepSize => cfg.step_size = v,
            }
            let r = uma(&pair, &sets.forget, &cfg)?;
            let adv = r.adversarial()?;
            let losses = per_sample_loss(&pair.unlearned, &adv, &sets.forget.labels)?;
            Ok(SweepRow {
                value: v,
                ua_attacked: accuracy(&pair.unlearned, &adv, &sets.forget.labels)?,
                mia_attacked: threshold.score(&losses),
            })
        })
        .collect::<Result<_, uma_core::Error>>()?;
    let header = [param.name(), "UA_atk", "MIA_atk"];
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![format!("{}", r.value), format!("{:.4}", r.ua_attacked), format!("{:.4}", r.mia_attacked)])
        .collect();
    let rel = format!("sweep/{}.csv", param.name());
    p.write(Stage::Report, &rel, csv_text(&header, &cells).as_bytes())?;
    p.manifest.artifacts.get_mut(&rel).expect("recorded").stage = "sweep".into();
    p.manifest.save(&p.out)?;
    Ok(rows)
}
