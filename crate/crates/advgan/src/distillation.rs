//! Black-box attacks through a local substitute model: static distillation
//! of the oracle's outputs, and the dynamic scheme that alternates generator
//! updates against the frozen substitute with substitute updates on freshly
//! queried adversarial points.

use ndarray::{concatenate, Array2, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::attacks::{
    clamp01_with_mask, success_flags, AdvGanConfig, AdvGanTrainer, AttackConfig, GeneratorModel,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{build_model, Arch, BlackBoxOracle, Classifier};
use crate::nn::{loss, Adam, GradScope, Mode};
use crate::rng::{derive_seed, seeded, shuffled_indices};
use crate::Scalar;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillConfig {
    pub local_arch: Arch,
    /// Epochs for the initial fit of the substitute to the oracle's outputs.
    pub static_epochs: usize,
    /// Alternation rounds of the dynamic scheme.
    pub iterations: usize,
    pub distill_epochs_per_iter: usize,
    pub gen_epochs_per_iter: usize,
    /// Hard stop on total oracle queries; never exceeded.
    #[serde(default)]
    pub query_budget: Option<u64>,
    /// Distill against argmax one-hots instead of the full output
    /// distribution.
    #[serde(default)]
    pub hard_labels: bool,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Instances used to measure per-iteration success against the oracle.
    pub probe_size: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            local_arch: Arch::C,
            static_epochs: 10,
            iterations: 5,
            distill_epochs_per_iter: 2,
            gen_epochs_per_iter: 10,
            query_budget: None,
            hard_labels: false,
            batch_size: 128,
            learning_rate: 0.001,
            seed: 0,
            probe_size: 512,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) {
        assert!(self.iterations >= 1, "iterations must be >= 1");
        assert!(self.batch_size >= 1 && self.learning_rate > 0.0);
    }
}

/// One alternation round's bookkeeping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Attack success measured against the oracle (never the substitute).
    pub success_rate: f64,
    /// Cumulative oracle query count after the round.
    pub queries: u64,
}

pub struct DynamicDistillOutput<F: Scalar> {
    pub generator: GeneratorModel<F>,
    pub substitute: Classifier<F>,
    pub history: Vec<IterationRecord>,
    /// True when the query budget stopped the schedule early; the returned
    /// models are the best-so-far state.
    pub budget_exhausted: bool,
}

fn remaining_budget<F: Scalar>(oracle: &BlackBoxOracle<F>, budget: Option<u64>) -> u64 {
    match budget {
        Some(b) => b.saturating_sub(oracle.query_count()),
        None => u64::MAX,
    }
}

fn one_hot_rows<F: Scalar>(probs: &Array2<F>) -> Array2<F> {
    let mut out = Array2::zeros(probs.raw_dim());
    for (i, j) in loss::argmax_rows(probs).into_iter().enumerate() {
        out[[i, j]] = F::one();
    }
    out
}

/// Queries the oracle's output distribution over a batch, honoring the
/// hard-label flag.
fn query_targets<F: Scalar>(
    oracle: &mut BlackBoxOracle<F>,
    x: &Array4<F>,
    hard: bool,
) -> Array2<F> {
    let p = oracle.query_probs(x);
    if hard {
        one_hot_rows(&p)
    } else {
        p
    }
}

/// One pass of soft-target cross-entropy training over (images, targets).
fn soft_train_epoch<F: Scalar>(
    model: &mut Classifier<F>,
    opt: &mut Adam<F>,
    images: &Array4<F>,
    targets: &Array2<F>,
    batch_size: usize,
    epoch_seed: u64,
) -> Result<()> {
    let n = images.dim().0;
    let mut rng = seeded(epoch_seed);
    let order = shuffled_indices(n, &mut rng);
    for chunk in order.chunks(batch_size) {
        let x = images.select(Axis(0), chunk);
        let t = targets.select(Axis(0), chunk);
        let logits = model.logits_mode(&x, Mode::Train);
        let (loss_val, dlogits) = loss::soft_cross_entropy(&logits, &t);
        if !loss_val.is_finite() {
            return Err(Error::Diverged {
                context: "distillation",
            });
        }
        let nb = chunk.len();
        let d4 = dlogits
            .into_shape_with_order((nb, model.num_classes, 1, 1))
            .unwrap();
        model.net_mut().zero_grad();
        model.net_mut().backward(d4, GradScope::Full);
        let mut params = model.net_mut().params_mut();
        opt.step(&mut params);
    }
    Ok(())
}

/// Fits a fresh local model to the oracle's output distribution over the
/// pool (one query per pool instance, then purely local training).
pub fn static_distill<F: Scalar>(
    oracle: &mut BlackBoxOracle<F>,
    pool: &Dataset<F>,
    cfg: &DistillConfig,
) -> Result<Classifier<F>> {
    static_distill_with_targets(oracle, pool, cfg).map(|(model, _)| model)
}

/// Static distillation that also hands back the cached oracle outputs so the
/// dynamic scheme can reuse them without re-querying.
fn static_distill_with_targets<F: Scalar>(
    oracle: &mut BlackBoxOracle<F>,
    pool: &Dataset<F>,
    cfg: &DistillConfig,
) -> Result<(Classifier<F>, Array2<F>)> {
    cfg.validate();
    if remaining_budget(oracle, cfg.query_budget) < pool.len() as u64 {
        return Err(Error::BudgetExhausted {
            used: oracle.query_count(),
            budget: cfg.query_budget.unwrap_or(0),
        });
    }
    let pool_targets = query_pool_targets(oracle, pool, cfg.hard_labels);
    let mut model = build_model(cfg.local_arch, derive_seed(cfg.seed, "substitute"));
    let mut opt = Adam::new(cfg.learning_rate);
    for epoch in 0..cfg.static_epochs {
        soft_train_epoch(
            &mut model,
            &mut opt,
            &pool.images,
            &pool_targets,
            cfg.batch_size,
            derive_seed(cfg.seed, &format!("static-epoch{epoch}")),
        )?;
    }
    Ok((model, pool_targets))
}

fn query_pool_targets<F: Scalar>(
    oracle: &mut BlackBoxOracle<F>,
    pool: &Dataset<F>,
    hard: bool,
) -> Array2<F> {
    let n = pool.len();
    let mut targets = Array2::zeros((n, oracle.num_classes()));
    let mut start = 0;
    while start < n {
        let end = (start + 256).min(n);
        let x = pool.images.slice(ndarray::s![start..end, .., .., ..]).to_owned();
        targets
            .slice_mut(ndarray::s![start..end, ..])
            .assign(&query_targets(oracle, &x, hard));
        start = end;
    }
    targets
}

/// The static black-box attack: fit the substitute once, freeze it, and
/// train the generator against it for the same total generator epochs the
/// dynamic schedule would spend. Success is measured against the oracle.
pub fn static_distill_attack<F: Scalar>(
    oracle: &mut BlackBoxOracle<F>,
    pool: &Dataset<F>,
    atk: &AttackConfig,
    gan_cfg: &AdvGanConfig,
    cfg: &DistillConfig,
) -> Result<DynamicDistillOutput<F>> {
    cfg.validate();
    atk.validate();
    let mut substitute = static_distill(oracle, pool, cfg)?;
    let mut trainer = AdvGanTrainer::new(atk.clone(), gan_cfg.clone());
    let total_gen_epochs = cfg.iterations * cfg.gen_epochs_per_iter;
    trainer.train_epochs(&mut substitute, pool, total_gen_epochs)?;

    let mut history = Vec::new();
    let mut exhausted = false;
    let probe_n = cfg.probe_size.min(pool.len()).max(1);
    if remaining_budget(oracle, cfg.query_budget) < probe_n as u64 {
        exhausted = true;
    } else {
        let idx: Vec<usize> = (0..probe_n).collect();
        let probe = pool.subset(&idx, "probe");
        let labels = probe.labels_usize();
        let pert = trainer
            .generator
            .perturb(&probe.images, atk.epsilon, Mode::Eval);
        let (x_adv, _) = clamp01_with_mask(&(&probe.images + &pert));
        let pred = oracle.query_labels(&x_adv);
        let flags = if atk.targeted {
            let ts = atk.targets(&labels, 0);
            success_flags(&pred, &labels, Some(&ts))
        } else {
            success_flags(&pred, &labels, None)
        };
        history.push(IterationRecord {
            iteration: 0,
            success_rate: flags.iter().filter(|&&s| s).count() as f64 / probe_n as f64,
            queries: oracle.query_count(),
        });
    }
    Ok(DynamicDistillOutput {
        generator: trainer.generator,
        substitute,
        history,
        budget_exhausted: exhausted,
    })
}

/// The alternating black-box scheme: round i trains the generator against
/// the frozen substitute f_{i-1}, then refreshes the substitute on a 1:1
/// per-batch mix of pool points (cached oracle outputs) and the generator's
/// adversarial points (fresh oracle queries).
///
/// Only `query_probs`/`query_labels` are ever invoked on the oracle.
pub fn dynamic_distill_attack<F: Scalar>(
    oracle: &mut BlackBoxOracle<F>,
    pool: &Dataset<F>,
    atk: &AttackConfig,
    gan_cfg: &AdvGanConfig,
    cfg: &DistillConfig,
) -> Result<DynamicDistillOutput<F>> {
    cfg.validate();
    atk.validate();
    // the static phase already paid for the pool outputs; reuse, don't requery
    let (mut substitute, pool_targets) = static_distill_with_targets(oracle, pool, cfg)?;
    let mut trainer = AdvGanTrainer::new(atk.clone(), gan_cfg.clone());
    let mut history = Vec::new();
    let mut exhausted = false;
    let mut opt_f = Adam::new(cfg.learning_rate);

    for iteration in 1..=cfg.iterations {
        if cfg.gen_epochs_per_iter > 0 {
            trainer.train_epochs(&mut substitute, pool, cfg.gen_epochs_per_iter)?;
        }

        'distill: for epoch in 0..cfg.distill_epochs_per_iter {
            let mut rng = seeded(derive_seed(
                cfg.seed,
                &format!("dynamic-iter{iteration}-epoch{epoch}"),
            ));
            let order = shuffled_indices(pool.len(), &mut rng);
            for chunk in order.chunks(cfg.batch_size) {
                if remaining_budget(oracle, cfg.query_budget) < chunk.len() as u64 {
                    exhausted = true;
                    break 'distill;
                }
                let x = pool.images.select(Axis(0), chunk);
                let pert = trainer.generator.perturb(&x, atk.epsilon, Mode::Eval);
                let (x_adv, _) = clamp01_with_mask(&(&x + &pert));
                let t_clean = pool_targets.select(Axis(0), chunk);
                let t_adv = query_targets(oracle, &x_adv, cfg.hard_labels);
                // the two cross-entropy terms of the substitute update,
                // mixed 1:1 within the batch
                let xx = concatenate(Axis(0), &[x.view(), x_adv.view()]).unwrap();
                let tt = concatenate(Axis(0), &[t_clean.view(), t_adv.view()]).unwrap();
                let logits = substitute.logits_mode(&xx, Mode::Train);
                let (loss_val, dlogits) = loss::soft_cross_entropy(&logits, &tt);
                if !loss_val.is_finite() {
                    return Err(Error::Diverged {
                        context: "dynamic distillation",
                    });
                }
                let nb = xx.dim().0;
                let d4 = dlogits
                    .into_shape_with_order((nb, substitute.num_classes, 1, 1))
                    .unwrap();
                substitute.net_mut().zero_grad();
                substitute.net_mut().backward(d4, GradScope::Full);
                let mut params = substitute.net_mut().params_mut();
                opt_f.step(&mut params);
            }
        }

        // success against the oracle itself on a fixed probe
        let probe_n = cfg.probe_size.min(pool.len()).max(1);
        if remaining_budget(oracle, cfg.query_budget) < probe_n as u64 {
            exhausted = true;
        } else {
            let idx: Vec<usize> = (0..probe_n).collect();
            let probe = pool.subset(&idx, "probe");
            let labels = probe.labels_usize();
            let pert = trainer
                .generator
                .perturb(&probe.images, atk.epsilon, Mode::Eval);
            let (x_adv, _) = clamp01_with_mask(&(&probe.images + &pert));
            let pred = oracle.query_labels(&x_adv);
            let flags = if atk.targeted {
                let ts = atk.targets(&labels, 0);
                success_flags(&pred, &labels, Some(&ts))
            } else {
                success_flags(&pred, &labels, None)
            };
            history.push(IterationRecord {
                iteration,
                success_rate: flags.iter().filter(|&&s| s).count() as f64 / probe_n as f64,
                queries: oracle.query_count(),
            });
        }
        if exhausted {
            break;
        }
    }

    Ok(DynamicDistillOutput {
        generator: trainer.generator,
        substitute,
        history,
        budget_exhausted: exhausted,
    })
}
