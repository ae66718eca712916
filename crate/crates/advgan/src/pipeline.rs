//! Declarative end-to-end orchestration: one JSON config drives
//! data -> models -> defenses -> attacks -> distill -> evaluate, with
//! per-stage completion markers keyed by the config section hash so
//! unchanged stages are never recomputed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{AdvGanConfig, AttackConfig, GeneratorModel, TargetRule};
use crate::data::{load_mnist, save_idx, split_disjoint, Dataset, SplitSpec};
use crate::defenses::{adv_train, DefenseConfig, DefenseKind};
use crate::distillation::{
    dynamic_distill_attack, static_distill_attack, DistillConfig, IterationRecord,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    emit_grid, emit_report, transfer_attack, AttackMethod, CellResult, Provenance, Report,
};
use crate::models::{build_model, train_classifier, Arch, BlackBoxOracle, Classifier, TrainHyper};
use crate::rng::derive_seed;
use crate::{Real, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Data,
    Models,
    Defenses,
    Attacks,
    Distill,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Data,
        Stage::Models,
        Stage::Defenses,
        Stage::Attacks,
        Stage::Distill,
        Stage::Evaluate,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::Models => "models",
            Stage::Defenses => "defenses",
            Stage::Attacks => "attacks",
            Stage::Distill => "distill",
            Stage::Evaluate => "evaluate",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "data" => Ok(Stage::Data),
            "models" => Ok(Stage::Models),
            "defenses" => Ok(Stage::Defenses),
            "attacks" => Ok(Stage::Attacks),
            "distill" => Ok(Stage::Distill),
            "evaluate" => Ok(Stage::Evaluate),
            other => Err(Error::SchemaError(format!("unknown stage '{other}'"))),
        }
    }
}

/// A pipeline failure tagged with the stage it happened in, mapped onto the
/// documented process exit codes.
#[derive(Debug)]
pub struct PipelineFailure {
    pub stage: Option<Stage>,
    pub error: Error,
}

impl PipelineFailure {
    pub fn exit_code(&self) -> i32 {
        // missing artifacts are charged to the stage that should have
        // produced them
        let stage = match &self.error {
            Error::SchemaError(_) | Error::Json(_) => return 1,
            Error::MissingArtifact { stage, .. } => stage.parse().ok(),
            _ => self.stage,
        };
        match stage {
            None => 1,
            Some(Stage::Data) => 2,
            Some(Stage::Models) | Some(Stage::Defenses) => 3,
            Some(Stage::Attacks) | Some(Stage::Distill) => 4,
            Some(Stage::Evaluate) => 5,
        }
    }
}

impl std::fmt::Display for PipelineFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.stage {
            Some(s) => write!(f, "stage '{}': {}", s.name(), self.error),
            None => write!(f, "{}", self.error),
        }
    }
}

impl std::error::Error for PipelineFailure {}

// ---------------------------------------------------------------------------
// config schema

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataSection {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    #[serde(default)]
    pub test_images: Option<PathBuf>,
    #[serde(default)]
    pub test_labels: Option<PathBuf>,
    /// Fractions for the target_train / distill / eval splits.
    pub fractions: BTreeMap<String, f64>,
    /// Optional cap on instances before splitting (desk-scale runs).
    #[serde(default)]
    pub max_instances: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelsSection {
    pub archs: Vec<Arch>,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub target_accuracy: Option<f64>,
    /// Linearly anneal the learning rate to `learning_rate * fraction` over
    /// the whole run.
    #[serde(default)]
    pub final_lr_fraction: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DefensesSection {
    pub kinds: Vec<DefenseKind>,
    /// Architecture being defended.
    pub arch: Arch,
    pub epochs: usize,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_pgd_steps")]
    pub pgd_steps: usize,
    #[serde(default = "default_pgd_step_size")]
    pub pgd_step_size: f64,
    /// Frozen FGSM donors for the ensemble defense.
    #[serde(default)]
    pub donor_archs: Vec<Arch>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttacksSection {
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_true")]
    pub targeted: bool,
    /// Train one generator per architecture (semi-whitebox threat model).
    pub archs: Vec<Arch>,
    pub advgan: AdvGanConfig,
    /// Fixed class all targeted attacks aim for; one generator is trained
    /// toward it, and evaluation drops instances already labeled with it.
    #[serde(default = "default_target_class")]
    pub target_class: usize,
    /// Margin confidence used while training generators (evaluation always
    /// scores with plain argmax success).
    #[serde(default = "default_train_kappa")]
    pub train_kappa: f64,
    /// Instances drawn from the target-train split for generator training.
    #[serde(default)]
    pub train_size: Option<usize>,
    #[serde(default = "default_opt_steps")]
    pub opt_steps: usize,
    #[serde(default = "default_opt_lr")]
    pub opt_lr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillSection {
    pub oracle_arch: Arch,
    #[serde(flatten)]
    pub cfg: DistillConfig,
    /// Run the static baseline alongside the dynamic scheme.
    #[serde(default = "default_true")]
    pub run_static: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellSpec {
    pub name: String,
    pub arch: Arch,
    /// "none" or a defense kind.
    #[serde(default = "default_none")]
    pub defense: String,
    /// fgsm | opt | advgan
    pub attack: String,
    /// white | transfer | semi_white | black_static | black_dynamic
    pub access: String,
    /// Where transfer/semi-white attacks are crafted (defaults to `arch`).
    #[serde(default)]
    pub source_arch: Option<Arch>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationSection {
    /// Instances from the eval split used per cell.
    pub eval_size: usize,
    pub cells: Vec<CellSpec>,
    /// Emit a 10x10 perturbation grid from this architecture's generator.
    #[serde(default)]
    pub grid_arch: Option<Arch>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub master_seed: u64,
    pub data: DataSection,
    #[serde(default)]
    pub models: Option<ModelsSection>,
    #[serde(default)]
    pub defenses: Option<DefensesSection>,
    #[serde(default)]
    pub attacks: Option<AttacksSection>,
    #[serde(default)]
    pub distillation: Option<DistillSection>,
    #[serde(default)]
    pub evaluation: Option<EvaluationSection>,
}

fn default_batch() -> usize {
    128
}
fn default_lr() -> f64 {
    0.001
}
fn default_epsilon() -> f64 {
    0.3
}
fn default_pgd_steps() -> usize {
    40
}
fn default_pgd_step_size() -> f64 {
    0.01
}
fn default_true() -> bool {
    true
}
fn default_opt_steps() -> usize {
    100
}
fn default_opt_lr() -> f64 {
    0.01
}
fn default_none() -> String {
    "none".into()
}
fn default_target_class() -> usize {
    8
}
fn default_train_kappa() -> f64 {
    5.0
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<PipelineConfig> {
        let bytes = fs::read(path).map_err(|e| {
            Error::SchemaError(format!("cannot read config {}: {e}", path.display()))
        })?;
        let cfg: PipelineConfig = serde_json::from_slice(&bytes)
            .map_err(|e| Error::SchemaError(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(a) = &self.attacks {
            if a.target_class >= 10 {
                return Err(Error::SchemaError(format!(
                    "attacks.target_class must be a digit class, got {}",
                    a.target_class
                )));
            }
        }
        for key in ["target_train", "distill", "eval"] {
            if !self.data.fractions.contains_key(key) {
                return Err(Error::SchemaError(format!(
                    "data.fractions is missing '{key}'"
                )));
            }
        }
        if let Some(ev) = &self.evaluation {
            let mut seen = std::collections::BTreeSet::new();
            for cell in &ev.cells {
                if !seen.insert(&cell.name) {
                    return Err(Error::SchemaError(format!(
                        "duplicate cell name '{}'",
                        cell.name
                    )));
                }
                if !["fgsm", "opt", "advgan"].contains(&cell.attack.as_str()) {
                    return Err(Error::SchemaError(format!(
                        "cell '{}': unknown attack '{}'",
                        cell.name, cell.attack
                    )));
                }
                if ![
                    "white",
                    "transfer",
                    "semi_white",
                    "black_static",
                    "black_dynamic",
                ]
                .contains(&cell.access.as_str())
                {
                    return Err(Error::SchemaError(format!(
                        "cell '{}': unknown access mode '{}'",
                        cell.name, cell.access
                    )));
                }
                if cell.defense != "none" {
                    cell.defense.parse::<DefenseKind>()?;
                }
            }
        }
        Ok(())
    }

    /// Stages whose config sections are present; the default stage list for
    /// a full run. Explicitly requesting an absent stage is still an error.
    pub fn available_stages(&self) -> Vec<Stage> {
        let mut stages = vec![Stage::Data];
        if self.models.is_some() {
            stages.push(Stage::Models);
        }
        if self.defenses.is_some() {
            stages.push(Stage::Defenses);
        }
        if self.attacks.is_some() {
            stages.push(Stage::Attacks);
        }
        if self.distillation.is_some() {
            stages.push(Stage::Distill);
        }
        if self.evaluation.is_some() {
            stages.push(Stage::Evaluate);
        }
        stages
    }

    /// SHA-256 of the canonical serialization; provenance key.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn section_hash<T: Serialize>(master_seed: u64, section: &T) -> String {
    let mut bytes = master_seed.to_le_bytes().to_vec();
    bytes.extend_from_slice(&serde_json::to_vec(section).expect("section serializes"));
    sha256_hex(&bytes)
}

// ---------------------------------------------------------------------------
// run directory layout

pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: &Path) -> RunDir {
        RunDir { root: root.into() }
    }

    fn marker_path(&self, stage: Stage) -> PathBuf {
        self.root.join("markers").join(format!("{}.json", stage.name()))
    }

    fn marker_matches(&self, stage: Stage, hash: &str) -> bool {
        fs::read_to_string(self.marker_path(stage))
            .ok()
            .and_then(|s| serde_json::from_str::<serde_json::Value>(&s).ok())
            .and_then(|v| v.get("hash").and_then(|h| h.as_str().map(String::from)))
            .map_or(false, |h| h == hash)
    }

    fn write_marker(&self, stage: Stage, hash: &str) -> Result<()> {
        fs::create_dir_all(self.root.join("markers"))?;
        fs::write(
            self.marker_path(stage),
            serde_json::to_vec_pretty(&serde_json::json!({ "stage": stage.name(), "hash": hash }))?,
        )?;
        Ok(())
    }

    pub fn split_paths(&self, split: &str) -> (PathBuf, PathBuf) {
        let d = self.root.join("data");
        (
            d.join(format!("{split}-images.idx")),
            d.join(format!("{split}-labels.idx")),
        )
    }

    pub fn model_dir(&self, arch: Arch) -> PathBuf {
        self.root.join("models").join(arch.to_string())
    }

    pub fn defense_dir(&self, kind: DefenseKind, arch: Arch) -> PathBuf {
        self.root.join("defenses").join(format!("{kind}_{arch}"))
    }

    pub fn generator_dir(&self, arch: Arch) -> PathBuf {
        self.root.join("attacks").join(format!("generator_{arch}"))
    }

    pub fn distill_dir(&self, mode: &str) -> PathBuf {
        self.root.join("distill").join(mode)
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("evaluate")
    }

    fn load_split(&self, split: &str) -> Result<Dataset<Real>> {
        let (ip, lp) = self.split_paths(split);
        if !ip.exists() || !lp.exists() {
            return Err(Error::MissingArtifact {
                stage: "data".into(),
                artifact: format!("{split} split"),
            });
        }
        load_mnist(&ip, &lp)
    }

    fn load_model(&self, arch: Arch) -> Result<Classifier<Real>> {
        let dir = self.model_dir(arch);
        if !dir.join("manifest.json").exists() {
            return Err(Error::MissingArtifact {
                stage: "models".into(),
                artifact: format!("model {arch} checkpoint"),
            });
        }
        Classifier::load_checkpoint(&dir)
    }

    fn load_defended(&self, kind: DefenseKind, arch: Arch) -> Result<Classifier<Real>> {
        let dir = self.defense_dir(kind, arch);
        if !dir.join("manifest.json").exists() {
            return Err(Error::MissingArtifact {
                stage: "defenses".into(),
                artifact: format!("defended model {kind}_{arch}"),
            });
        }
        Classifier::load_checkpoint(&dir)
    }

    fn load_generator(&self, arch: Arch) -> Result<GeneratorModel<Real>> {
        let dir = self.generator_dir(arch);
        if !dir.join("manifest.json").exists() {
            return Err(Error::MissingArtifact {
                stage: "attacks".into(),
                artifact: format!("generator for {arch}"),
            });
        }
        GeneratorModel::load_checkpoint(&dir)
    }

    fn load_distill_generator(&self, mode: &str) -> Result<GeneratorModel<Real>> {
        let dir = self.distill_dir(mode).join("generator");
        if !dir.join("manifest.json").exists() {
            return Err(Error::MissingArtifact {
                stage: "distill".into(),
                artifact: format!("{mode} distillation generator"),
            });
        }
        GeneratorModel::load_checkpoint(&dir)
    }
}

// ---------------------------------------------------------------------------
// stage execution

/// Runs the requested stages in dependency order. Completed stages whose
/// config hash is unchanged are skipped.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    run_dir: &Path,
    stages: &[Stage],
    _deterministic: bool, // execution is sequential either way
) -> std::result::Result<(), PipelineFailure> {
    let rd = RunDir::new(run_dir);
    for stage in Stage::ALL {
        if !stages.contains(&stage) {
            continue;
        }
        let outcome = match stage {
            Stage::Data => stage_data(cfg, &rd),
            Stage::Models => stage_models(cfg, &rd),
            Stage::Defenses => stage_defenses(cfg, &rd),
            Stage::Attacks => stage_attacks(cfg, &rd),
            Stage::Distill => stage_distill(cfg, &rd),
            Stage::Evaluate => stage_evaluate(cfg, &rd),
        };
        outcome.map_err(|error| PipelineFailure {
            stage: Some(stage),
            error,
        })?;
    }
    Ok(())
}

fn stage_data(cfg: &PipelineConfig, rd: &RunDir) -> Result<()> {
    let hash = section_hash(cfg.master_seed, &cfg.data);
    if rd.marker_matches(Stage::Data, &hash) {
        return Ok(());
    }
    let mut full: Dataset<Real> = load_mnist(&cfg.data.train_images, &cfg.data.train_labels)?;
    if let Some(cap) = cfg.data.max_instances {
        full = full.take(cap, "train");
    }
    let spec = SplitSpec {
        fractions: cfg.data.fractions.clone(),
        seed: derive_seed(cfg.master_seed, "split"),
    };
    let (train, distill, eval) = split_disjoint(&full, &spec)?;
    fs::create_dir_all(rd.root.join("data"))?;
    for (split, ds) in [("target_train", &train), ("distill", &distill), ("eval", &eval)] {
        let (ip, lp) = rd.split_paths(split);
        save_idx(ds, &ip, &lp)?;
    }
    if let (Some(ti), Some(tl)) = (&cfg.data.test_images, &cfg.data.test_labels) {
        let test: Dataset<Real> = load_mnist(ti, tl)?;
        let (ip, lp) = rd.split_paths("test");
        save_idx(&test, &ip, &lp)?;
    }
    rd.write_marker(Stage::Data, &hash)
}

fn stage_models(cfg: &PipelineConfig, rd: &RunDir) -> Result<()> {
    let section = cfg
        .models
        .as_ref()
        .ok_or_else(|| Error::SchemaError("config has no 'models' section".into()))?;
    let hash = section_hash(cfg.master_seed, section);
    if rd.marker_matches(Stage::Models, &hash) {
        return Ok(());
    }
    let train = rd.load_split("target_train")?;
    let test = rd.load_split("test").or_else(|_| rd.load_split("eval"))?;
    let mut accuracies = BTreeMap::new();
    for &arch in &section.archs {
        let seed = derive_seed(cfg.master_seed, &format!("model-{arch}"));
        let model = build_model::<Real>(arch, seed);
        let hyper = TrainHyper {
            batch_size: section.batch_size,
            learning_rate: section.learning_rate,
            epochs: section.epochs,
            seed,
            holdout_fraction: None,
            target_accuracy: section.target_accuracy,
            final_lr_fraction: section.final_lr_fraction,
        };
        let (mut model, _) = train_classifier(model, &train, &hyper)?;
        let acc = model.accuracy(&test, 256);
        model.save_checkpoint(&rd.model_dir(arch))?;
        accuracies.insert(arch.to_string(), acc);
    }
    fs::write(
        rd.root.join("models").join("accuracy.json"),
        serde_json::to_vec_pretty(&accuracies)?,
    )?;
    rd.write_marker(Stage::Models, &hash)
}

fn stage_defenses(cfg: &PipelineConfig, rd: &RunDir) -> Result<()> {
    let section = cfg
        .defenses
        .as_ref()
        .ok_or_else(|| Error::SchemaError("config has no 'defenses' section".into()))?;
    let hash = section_hash(cfg.master_seed, section);
    if rd.marker_matches(Stage::Defenses, &hash) {
        return Ok(());
    }
    let train = rd.load_split("target_train")?;
    for &kind in &section.kinds {
        // warm start from the clean model, as the defenses harden rather
        // than retrain from scratch at desk scale
        let model = rd.load_model(section.arch)?;
        let mut donors: Vec<Classifier<Real>> = if kind == DefenseKind::Ensemble {
            section
                .donor_archs
                .iter()
                .map(|&a| rd.load_model(a))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        if kind == DefenseKind::Ensemble && donors.is_empty() {
            return Err(Error::MissingStaticModels);
        }
        let dc = DefenseConfig {
            kind,
            epsilon: section.epsilon,
            pgd_steps: section.pgd_steps,
            pgd_step_size: section.pgd_step_size,
            mix_ratio: 0.5,
            epochs: section.epochs,
            batch_size: 128,
            learning_rate: 0.001,
            seed: derive_seed(cfg.master_seed, &format!("defense-{kind}")),
        };
        let mut defended = adv_train(model, &train, &dc, &mut donors)?;
        defended.save_checkpoint(&rd.defense_dir(kind, section.arch))?;
    }
    rd.write_marker(Stage::Defenses, &hash)
}

fn attack_config(cfg: &PipelineConfig) -> AttackConfig {
    let a = cfg.attacks.as_ref();
    AttackConfig {
        epsilon: a.map_or(0.3, |s| s.epsilon),
        targeted: a.map_or(true, |s| s.targeted),
        target_rule: TargetRule::FixedClass(a.map_or(default_target_class(), |s| s.target_class)),
        kappa: 0.0,
        lambda: 10.0,
        seed: derive_seed(cfg.master_seed, "attack"),
        opt_steps: a.map_or(default_opt_steps(), |s| s.opt_steps),
        opt_lr: a.map_or(default_opt_lr(), |s| s.opt_lr),
    }
}

/// Training-time attack config: same targets, but with the configured
/// margin confidence so the generator keeps pushing past bare success.
fn train_attack_config(cfg: &PipelineConfig) -> AttackConfig {
    let mut atk = attack_config(cfg);
    atk.kappa = cfg
        .attacks
        .as_ref()
        .map_or(default_train_kappa(), |s| s.train_kappa);
    atk
}

fn stage_attacks(cfg: &PipelineConfig, rd: &RunDir) -> Result<()> {
    let section = cfg
        .attacks
        .as_ref()
        .ok_or_else(|| Error::SchemaError("config has no 'attacks' section".into()))?;
    let hash = section_hash(cfg.master_seed, section);
    if rd.marker_matches(Stage::Attacks, &hash) {
        return Ok(());
    }
    let mut train = rd.load_split("target_train")?;
    if let Some(cap) = section.train_size {
        train = train.take(cap, "advgan-train");
    }
    let atk = train_attack_config(cfg);
    for &arch in &section.archs {
        let mut target = rd.load_model(arch)?;
        let mut gan_cfg = section.advgan.clone();
        gan_cfg.seed = derive_seed(cfg.master_seed, &format!("advgan-{arch}"));
        let (mut generator, _d, history) =
            crate::attacks::advgan_train(&mut target, &train, &atk, &gan_cfg)?;
        let dir = rd.generator_dir(arch);
        generator.save_checkpoint(&dir)?;
        let summary: Vec<serde_json::Value> = history
            .iter()
            .map(|e| {
                serde_json::json!({
                    "epoch": e.epoch, "adv": e.adv, "gan_g": e.gan_g,
                    "gan_d": e.gan_d, "hinge": e.hinge, "total": e.total,
                })
            })
            .collect();
        fs::write(dir.join("losses.json"), serde_json::to_vec_pretty(&summary)?)?;
    }
    rd.write_marker(Stage::Attacks, &hash)
}

fn write_history(path: &Path, history: &[IterationRecord]) -> Result<()> {
    // JSON lines: one record per iteration
    let mut out = String::new();
    for rec in history {
        out.push_str(&serde_json::to_string(rec)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn stage_distill(cfg: &PipelineConfig, rd: &RunDir) -> Result<()> {
    let section = cfg
        .distillation
        .as_ref()
        .ok_or_else(|| Error::SchemaError("config has no 'distillation' section".into()))?;
    let hash = section_hash(cfg.master_seed, section);
    if rd.marker_matches(Stage::Distill, &hash) {
        return Ok(());
    }
    let pool = rd.load_split("distill")?;
    let atk = train_attack_config(cfg);
    let gan_cfg = cfg
        .attacks
        .as_ref()
        .map(|a| a.advgan.clone())
        .unwrap_or_default();

    let mut dcfg = section.cfg.clone();
    dcfg.seed = derive_seed(cfg.master_seed, "distill");

    if section.run_static {
        let mut oracle = BlackBoxOracle::new(rd.load_model(section.oracle_arch)?);
        let mut out = static_distill_attack(&mut oracle, &pool, &atk, &gan_cfg, &dcfg)?;
        let dir = rd.distill_dir("static");
        fs::create_dir_all(&dir)?;
        out.generator.save_checkpoint(&dir.join("generator"))?;
        out.substitute.save_checkpoint(&dir.join("substitute"))?;
        write_history(&dir.join("history.jsonl"), &out.history)?;
    }

    let mut oracle = BlackBoxOracle::new(rd.load_model(section.oracle_arch)?);
    let mut out = dynamic_distill_attack(&mut oracle, &pool, &atk, &gan_cfg, &dcfg)?;
    let dir = rd.distill_dir("dynamic");
    fs::create_dir_all(&dir)?;
    out.generator.save_checkpoint(&dir.join("generator"))?;
    out.substitute.save_checkpoint(&dir.join("substitute"))?;
    write_history(&dir.join("history.jsonl"), &out.history)?;

    rd.write_marker(Stage::Distill, &hash)
}

fn last_history_entry(path: &Path) -> Option<IterationRecord> {
    let text = fs::read_to_string(path).ok()?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .last()
        .and_then(|l| serde_json::from_str(l).ok())
}

fn stage_evaluate(cfg: &PipelineConfig, rd: &RunDir) -> Result<()> {
    let section = cfg
        .evaluation
        .as_ref()
        .ok_or_else(|| Error::SchemaError("config has no 'evaluation' section".into()))?;
    let hash = section_hash(cfg.master_seed, section);
    if rd.marker_matches(Stage::Evaluate, &hash) {
        return Ok(());
    }
    let mut eval = rd.load_split("eval")?;
    let atk = attack_config(cfg);
    if let (true, TargetRule::FixedClass(t)) = (atk.targeted, atk.target_rule) {
        // instances already labeled with the target are trivially "fooled"
        let keep: Vec<usize> = eval
            .labels
            .iter()
            .enumerate()
            .filter(|(_, &y)| y as usize != t)
            .map(|(i, _)| i)
            .collect();
        eval = eval.subset(&keep, "eval");
    }
    let eval = eval.take(section.eval_size, "eval");

    let mut cells = Vec::new();
    for spec in &section.cells {
        let mut dest = if spec.defense == "none" {
            rd.load_model(spec.arch)?
        } else {
            rd.load_defended(spec.defense.parse()?, spec.arch)?
        };
        let source_arch = spec.source_arch.unwrap_or(spec.arch);

        let mut cell = match spec.access.as_str() {
            "white" | "transfer" => {
                // "white" on a defended cell still crafts on the undefended
                // model: the attacker is not aware of the defense
                let mut source = if spec.access == "white" && spec.defense == "none" {
                    rd.load_model(spec.arch)?
                } else {
                    rd.load_model(source_arch)?
                };
                let mut method = match spec.attack.as_str() {
                    "fgsm" => AttackMethod::Fgsm,
                    "opt" => AttackMethod::Opt,
                    _ => {
                        let mut g = rd.load_generator(source_arch)?;
                        let cell =
                            run_generator_cell(&mut g, &mut dest, &eval, &atk)?;
                        cells.push(finish_cell(cell, spec));
                        continue;
                    }
                };
                transfer_attack(&mut source, &mut dest, &mut method, &eval, &atk)?
            }
            "semi_white" => {
                let mut g = rd.load_generator(source_arch)?;
                run_generator_cell(&mut g, &mut dest, &eval, &atk)?
            }
            "black_static" | "black_dynamic" => {
                let mode = if spec.access == "black_static" {
                    "static"
                } else {
                    "dynamic"
                };
                let mut g = rd.load_distill_generator(mode)?;
                let mut cell = run_generator_cell(&mut g, &mut dest, &eval, &atk)?;
                if let Some(rec) =
                    last_history_entry(&rd.distill_dir(mode).join("history.jsonl"))
                {
                    cell.queries = rec.queries;
                }
                cell
            }
            other => {
                return Err(Error::SchemaError(format!(
                    "unknown access mode '{other}'"
                )))
            }
        };
        cell = finish_cell(cell, spec);
        cells.push(cell);
    }

    let report = Report {
        cells,
        provenance: Provenance {
            master_seed: cfg.master_seed,
            config_hash: cfg.hash(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
        },
    };
    let expected: Vec<String> = section.cells.iter().map(|c| c.name.clone()).collect();
    emit_report(&report, &expected, &rd.report_dir())?;

    if let Some(grid_arch) = section.grid_arch {
        let mut g = rd.load_generator(grid_arch)?;
        let sources = one_per_class(&eval);
        if sources.len() >= 10 {
            emit_grid(
                &mut [&mut g],
                &sources,
                atk.epsilon,
                &rd.report_dir().join("grids").join("targets.png"),
            )?;
        }
    }
    rd.write_marker(Stage::Evaluate, &hash)
}

fn finish_cell(mut cell: CellResult, spec: &CellSpec) -> CellResult {
    cell.name = spec.name.clone();
    cell.arch = spec.arch.to_string();
    cell.defense = spec.defense.clone();
    cell.attack = spec.attack.clone();
    cell.access = spec.access.clone();
    cell
}

fn run_generator_cell<F: Scalar>(
    g: &mut GeneratorModel<F>,
    dest: &mut Classifier<F>,
    eval: &Dataset<F>,
    atk: &AttackConfig,
) -> Result<CellResult> {
    let mut method = AttackMethod::Generator(g);
    // the generator is its own source; `transfer_attack` only uses the
    // source for crafting, which the generator does alone
    let mut dummy_source = crate::models::Classifier::from_network(
        crate::nn::Network::new(Vec::new()),
        dest.num_classes,
    );
    transfer_attack(&mut dummy_source, dest, &mut method, eval, atk)
}

/// First instance of each class 0..9, ordered by class.
fn one_per_class<F: Scalar>(data: &Dataset<F>) -> Dataset<F> {
    let mut picks: Vec<Option<usize>> = vec![None; 10];
    for (i, &y) in data.labels.iter().enumerate() {
        let y = y as usize;
        if y < 10 && picks[y].is_none() {
            picks[y] = Some(i);
        }
    }
    let idx: Vec<usize> = picks.into_iter().flatten().collect();
    data.subset(&idx, "grid-sources")
}
