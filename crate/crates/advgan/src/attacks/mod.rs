//! The three attack families under one bounded-perturbation contract:
//! fast gradient sign, iterative margin-loss optimization, and the trained
//! perturbation generator.

mod advgan;
mod fgsm;
mod opt;

pub use advgan::{
    advgan_generate, advgan_train, build_discriminator, build_generator, gan_losses, hinge_loss,
    AdvGanConfig, AdvGanTrainer, DiscriminatorModel, EpochLosses, GeneratorModel, LossMode,
};
pub use fgsm::fgsm;
pub use opt::{cw_margin_loss, opt_attack};

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::rng::derive_seed;
use crate::Scalar;

/// How targeted attacks pick the target class for each instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetRule {
    /// Every instance targets the same class.
    FixedClass(usize),
    /// `(y + 1) mod 10`.
    NextClass,
    /// Seeded per-instance draw from the nine classes other than the label.
    SeededRandom,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    /// L-infinity bound on the perturbation, in unit pixel range.
    pub epsilon: f64,
    pub targeted: bool,
    pub target_rule: TargetRule,
    /// Margin-loss confidence: the loss floors at `-kappa`, so positive
    /// values keep pushing until the target class dominates by `kappa`.
    pub kappa: f64,
    /// Trade-off between perturbation norm and margin loss in the
    /// optimization attack.
    pub lambda: f64,
    pub seed: u64,
    /// Gradient steps for the optimization attack.
    pub opt_steps: usize,
    /// Step size for the optimization attack.
    pub opt_lr: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            epsilon: 0.3,
            targeted: true,
            target_rule: TargetRule::SeededRandom,
            kappa: 0.0,
            lambda: 10.0,
            seed: 0,
            opt_steps: 1000,
            opt_lr: 0.01,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) {
        assert!(self.epsilon > 0.0, "epsilon must be positive");
        assert!(self.kappa >= 0.0, "kappa must be non-negative");
        assert!(self.lambda > 0.0, "lambda must be positive");
    }

    /// Per-instance targets for a batch, indexed by position within the
    /// run (`offset + i`), so target assignment is stable under batching.
    pub fn targets(&self, labels: &[usize], offset: usize) -> Vec<usize> {
        match self.target_rule {
            TargetRule::FixedClass(t) => vec![t; labels.len()],
            TargetRule::NextClass => labels.iter().map(|&y| (y + 1) % 10).collect(),
            TargetRule::SeededRandom => labels
                .iter()
                .enumerate()
                .map(|(i, &y)| {
                    let draw = derive_seed(self.seed, &format!("target/{}", offset + i)) % 9;
                    let t = draw as usize;
                    if t >= y {
                        t + 1
                    } else {
                        t
                    }
                })
                .collect(),
        }
    }
}

/// An adversarial batch with bookkeeping.
#[derive(Debug, Clone)]
pub struct AttackResult<F> {
    pub adversarial: Array4<F>,
    /// Per-instance goal flags; attacks that never see the target model
    /// (generator inference) leave this empty until scored.
    pub success: Vec<bool>,
    pub perturbation_linf: Vec<f64>,
    pub perturbation_l2: Vec<f64>,
    pub wall_time_seconds: f64,
    pub queries_used: u64,
}

impl<F: Scalar> AttackResult<F> {
    pub fn success_fraction(&self) -> f64 {
        if self.success.is_empty() {
            return 0.0;
        }
        self.success.iter().filter(|&&s| s).count() as f64 / self.success.len() as f64
    }
}

/// Clamps a batch into the valid pixel range, returning the pass-through
/// gradient mask (1 where unclamped).
pub fn clamp01_with_mask<F: Scalar>(x: &Array4<F>) -> (Array4<F>, Array4<F>) {
    let mut mask = Array4::ones(x.raw_dim());
    let mut y = x.clone();
    ndarray::Zip::from(&mut y).and(&mut mask).for_each(|v, m| {
        if *v < F::zero() {
            *v = F::zero();
            *m = F::zero();
        } else if *v > F::one() {
            *v = F::one();
            *m = F::zero();
        }
    });
    (y, mask)
}

/// Per-instance L-infinity and L2 norms of `adv - orig`.
pub fn perturbation_norms<F: Scalar>(orig: &Array4<F>, adv: &Array4<F>) -> (Vec<f64>, Vec<f64>) {
    let n = orig.dim().0;
    let mut linf = Vec::with_capacity(n);
    let mut l2 = Vec::with_capacity(n);
    for i in 0..n {
        let a = adv.index_axis(ndarray::Axis(0), i);
        let o = orig.index_axis(ndarray::Axis(0), i);
        let mut max = 0.0f64;
        let mut sq = 0.0f64;
        ndarray::Zip::from(&a).and(&o).for_each(|&av, &ov| {
            let d = (av - ov).to_f64().unwrap();
            max = max.max(d.abs());
            sq += d * d;
        });
        linf.push(max);
        l2.push(sq.sqrt());
    }
    (linf, l2)
}

/// Marks success flags given the defender-side predictions on the
/// adversarial batch.
pub fn success_flags(
    adv_pred: &[usize],
    labels: &[usize],
    targets: Option<&[usize]>,
) -> Vec<bool> {
    match targets {
        Some(ts) => adv_pred.iter().zip(ts).map(|(p, t)| p == t).collect(),
        None => adv_pred.iter().zip(labels).map(|(p, y)| p != y).collect(),
    }
}
