//! Metrics, runtime benchmarking, transferability, report emission, and
//! target-grid images.

use std::fs;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::attacks::{
    advgan_generate, fgsm, opt_attack, success_flags, AttackConfig, AttackResult, GeneratorModel,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::Classifier;
use crate::Scalar;

/// Success rate with natural errors excluded: only instances the model
/// classified correctly before the attack count toward the denominator.
pub fn attack_success_rate(
    clean_pred: &[usize],
    adv_pred: &[usize],
    labels: &[usize],
    targets: Option<&[usize]>,
) -> Result<f64> {
    if clean_pred.len() != adv_pred.len()
        || clean_pred.len() != labels.len()
        || targets.map_or(false, |t| t.len() != labels.len())
    {
        return Err(Error::ShapeMismatch(format!(
            "success-rate inputs disagree: {} clean, {} adversarial, {} labels",
            clean_pred.len(),
            adv_pred.len(),
            labels.len()
        )));
    }
    let flags = success_flags(adv_pred, labels, targets);
    let mut hits = 0usize;
    let mut denom = 0usize;
    for i in 0..labels.len() {
        if clean_pred[i] == labels[i] {
            denom += 1;
            if flags[i] {
                hits += 1;
            }
        }
    }
    if denom == 0 {
        return Ok(0.0);
    }
    Ok(hits as f64 / denom as f64)
}

/// Which attack a cell runs.
pub enum AttackMethod<'a, F: Scalar> {
    Fgsm,
    Opt,
    /// A trained generator; purely feed-forward at evaluation time.
    Generator(&'a mut GeneratorModel<F>),
}

impl<F: Scalar> AttackMethod<'_, F> {
    pub fn name(&self) -> &'static str {
        match self {
            AttackMethod::Fgsm => "fgsm",
            AttackMethod::Opt => "opt",
            AttackMethod::Generator(_) => "advgan",
        }
    }
}

/// One report cell's metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellResult {
    pub name: String,
    pub arch: String,
    pub defense: String,
    pub attack: String,
    pub access: String,
    pub success_rate: f64,
    pub pristine_accuracy: f64,
    pub mean_linf: f64,
    pub mean_l2: f64,
    pub queries: u64,
    /// Reported in a timing sidecar, never in report.csv, so reruns stay
    /// byte-identical.
    #[serde(default)]
    pub wall_time_seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub master_seed: u64,
    pub config_hash: String,
    pub code_version: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub cells: Vec<CellResult>,
    pub provenance: Provenance,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Runs `method` against `source` and scores the result on `dest`
/// (source == dest is the white-box case).
pub fn transfer_attack<F: Scalar>(
    source: &mut Classifier<F>,
    dest: &mut Classifier<F>,
    method: &mut AttackMethod<'_, F>,
    data: &Dataset<F>,
    cfg: &AttackConfig,
) -> Result<CellResult> {
    let labels = data.labels_usize();
    let x = &data.images;
    let result: AttackResult<F> = match method {
        AttackMethod::Fgsm => fgsm(source, x, &labels, cfg)?,
        AttackMethod::Opt => {
            let targets = if cfg.targeted {
                cfg.targets(&labels, 0)
            } else {
                // untargeted via the second-most-likely class of the source
                second_choice_targets(source, x)
            };
            opt_attack(source, x, &targets, cfg)?
        }
        AttackMethod::Generator(g) => advgan_generate(g, x, cfg.epsilon),
    };
    let clean_pred = dest.predict_dataset(data, 256);
    let adv_pred = predict_batched(dest, &result.adversarial);
    let targets = cfg.targeted.then(|| cfg.targets(&labels, 0));
    let success_rate = attack_success_rate(&clean_pred, &adv_pred, &labels, targets.as_deref())?;
    let pristine = clean_pred
        .iter()
        .zip(&labels)
        .filter(|(p, y)| p == y)
        .count() as f64
        / labels.len() as f64;
    Ok(CellResult {
        name: String::new(),
        arch: String::new(),
        defense: "none".into(),
        attack: method.name().into(),
        access: "transfer".into(),
        success_rate,
        pristine_accuracy: pristine,
        mean_linf: mean(&result.perturbation_linf),
        mean_l2: mean(&result.perturbation_l2),
        queries: result.queries_used,
        wall_time_seconds: result.wall_time_seconds,
    })
}

fn second_choice_targets<F: Scalar>(model: &mut Classifier<F>, x: &Array4<F>) -> Vec<usize> {
    let logits = model.logits(x);
    logits
        .axis_iter(Axis(0))
        .map(|row| {
            let mut idx: Vec<usize> = (0..row.len()).collect();
            idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap());
            idx[1]
        })
        .collect()
}

pub fn predict_batched<F: Scalar>(model: &mut Classifier<F>, x: &Array4<F>) -> Vec<usize> {
    let n = x.dim().0;
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + 256).min(n);
        let xb = x.slice(ndarray::s![start..end, .., .., ..]).to_owned();
        out.extend(model.predict(&xb));
        start = end;
    }
    out
}

/// Median wall time of `repeats` runs of `attack` over `x` (generation only;
/// any training happened before this call).
pub fn benchmark_runtime<F: Scalar>(
    x: &Array4<F>,
    repeats: usize,
    mut attack: impl FnMut(&Array4<F>),
) -> f64 {
    if x.dim().0 == 0 {
        return 0.0;
    }
    let mut times: Vec<f64> = (0..repeats.max(1))
        .map(|_| {
            let t = Instant::now();
            attack(x);
            t.elapsed().as_secs_f64()
        })
        .collect();
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    times[times.len() / 2]
}

fn fmt_rate(v: f64) -> String {
    format!("{:.6}", v)
}

/// Writes report.csv, report.md, timings.csv, and provenance.json.
/// `expected` names every cell the experiment grid promised; a promised cell
/// with no result is an error.
pub fn emit_report(report: &Report, expected: &[String], dir: &Path) -> Result<()> {
    for name in expected {
        if !report.cells.iter().any(|c| &c.name == name) {
            return Err(Error::MissingCell(name.clone()));
        }
    }
    fs::create_dir_all(dir)?;

    let mut csv = String::from(
        "cell,arch,defense,attack,access,success_rate,pristine_accuracy,mean_linf,mean_l2,queries\n",
    );
    for c in &report.cells {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            c.name,
            c.arch,
            c.defense,
            c.attack,
            c.access,
            fmt_rate(c.success_rate),
            fmt_rate(c.pristine_accuracy),
            fmt_rate(c.mean_linf),
            fmt_rate(c.mean_l2),
            c.queries
        ));
    }
    fs::write(dir.join("report.csv"), csv)?;

    let mut timings = String::from("cell,wall_time_seconds\n");
    for c in &report.cells {
        timings.push_str(&format!("{},{:.6}\n", c.name, c.wall_time_seconds));
    }
    fs::write(dir.join("timings.csv"), timings)?;

    let mut md = String::new();
    md.push_str("# Attack evaluation\n\n");
    md.push_str("| cell | arch | defense | attack | access | success | pristine acc | mean L-inf | mean L2 |\n");
    md.push_str("|---|---|---|---|---|---|---|---|---|\n");
    for c in &report.cells {
        md.push_str(&format!(
            "| {} | {} | {} | {} | {} | {:.1}% | {:.1}% | {:.3} | {:.3} |\n",
            c.name,
            c.arch,
            c.defense,
            c.attack,
            c.access,
            c.success_rate * 100.0,
            c.pristine_accuracy * 100.0,
            c.mean_linf,
            c.mean_l2
        ));
    }
    md.push_str(
        "\nSuccess rates exclude naturally misclassified instances from the denominator.\n",
    );
    fs::write(dir.join("report.md"), md)?;
    fs::write(
        dir.join("provenance.json"),
        serde_json::to_vec_pretty(&report.provenance)?,
    )?;
    Ok(())
}

/// 10x10 grayscale grid: column j holds adversarial versions of source image
/// j, produced by the generator for row i; the diagonal shows the originals.
/// Cells are upscaled x4 with nearest-neighbor for legibility.
pub fn emit_grid<F: Scalar>(
    generators: &mut [&mut GeneratorModel<F>],
    sources: &Dataset<F>,
    epsilon: f64,
    path: &Path,
) -> Result<()> {
    assert!(!generators.is_empty(), "need at least one generator");
    assert!(sources.len() >= 10, "grid needs 10 source images");
    const CELLS: usize = 10;
    const SCALE: usize = 4;
    const SIDE: usize = 28 * SCALE;
    let mut canvas = image::GrayImage::new((CELLS * SIDE) as u32, (CELLS * SIDE) as u32);

    let idx: Vec<usize> = (0..CELLS).collect();
    let originals = sources.subset(&idx, "grid").images;
    let n_gens = generators.len();
    for row in 0..CELLS {
        let adv = advgan_generate(generators[row % n_gens], &originals, epsilon).adversarial;
        for col in 0..CELLS {
            let img = if row == col {
                originals.index_axis(Axis(0), col)
            } else {
                adv.index_axis(Axis(0), col)
            };
            for y in 0..28 {
                for x in 0..28 {
                    let v = (img[[0, y, x]].to_f64().unwrap() * 255.0).round() as u8;
                    for dy in 0..SCALE {
                        for dx in 0..SCALE {
                            canvas.put_pixel(
                                (col * SIDE + x * SCALE + dx) as u32,
                                (row * SIDE + y * SCALE + dy) as u32,
                                image::Luma([v]),
                            );
                        }
                    }
                }
            }
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    canvas
        .save(path)
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(())
}
