//! Adversarial-training defenses: FGSM adversarial training, ensemble
//! adversarial training with donor models, and iterative (projected
//! gradient) training.

use ndarray::{concatenate, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::Classifier;
use crate::nn::{loss, Adam, GradScope, Mode};
use crate::rng::{derive_seed, seeded, shuffled_indices, Prng};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseKind {
    /// Batches mix clean data with FGSM examples crafted on the current model.
    AdvFgsm,
    /// Batches mix clean data, FGSM on the current model, and FGSM on frozen
    /// donor models of different architectures.
    Ensemble,
    /// Clean data replaced by k-step projected-gradient examples.
    Iterative,
}

impl std::fmt::Display for DefenseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            DefenseKind::AdvFgsm => "adv_fgsm",
            DefenseKind::Ensemble => "ensemble",
            DefenseKind::Iterative => "iterative",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for DefenseKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adv_fgsm" | "adv" => Ok(DefenseKind::AdvFgsm),
            "ensemble" | "ens" => Ok(DefenseKind::Ensemble),
            "iterative" | "iter" => Ok(DefenseKind::Iterative),
            other => Err(Error::SchemaError(format!("unknown defense kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DefenseConfig {
    pub kind: DefenseKind,
    pub epsilon: f64,
    pub pgd_steps: usize,
    pub pgd_step_size: f64,
    /// Fraction of each batch replaced by adversarial examples (adv_fgsm).
    pub mix_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        DefenseConfig {
            kind: DefenseKind::AdvFgsm,
            epsilon: 0.3,
            pgd_steps: 40,
            pgd_step_size: 0.01,
            mix_ratio: 0.5,
            epochs: 3,
            batch_size: 128,
            learning_rate: 0.001,
            seed: 0,
        }
    }
}

impl DefenseConfig {
    pub fn validate(&self) {
        assert!(self.pgd_steps >= 1, "pgd_steps must be >= 1");
        assert!(
            self.mix_ratio > 0.0 && self.mix_ratio <= 1.0,
            "mix_ratio must be in (0, 1]"
        );
        assert!(self.epsilon >= 0.0);
    }
}

/// Untargeted one-step sign perturbation for defense-time example crafting
/// (epsilon 0 degenerates to the identity, i.e. standard training).
fn fgsm_examples<F: Scalar>(
    model: &mut Classifier<F>,
    x: &Array4<F>,
    y: &[usize],
    epsilon: f64,
) -> Result<Array4<F>> {
    let grad = model.input_gradient(x, y)?;
    let eps = F::from_f64(epsilon).unwrap();
    let mut adv = x.clone();
    ndarray::Zip::from(&mut adv).and(&grad).for_each(|v, &g| {
        let s = if g > F::zero() {
            F::one()
        } else if g < F::zero() {
            -F::one()
        } else {
            F::zero()
        };
        *v = (*v + eps * s).max(F::zero()).min(F::one());
    });
    Ok(adv)
}

/// k-step untargeted projected gradient ascent on the cross-entropy, with
/// per-step projection onto the epsilon box and pixel range. With
/// `random_start = false`, one step of size epsilon is exactly FGSM.
pub fn pgd<F: Scalar>(
    model: &mut Classifier<F>,
    x: &Array4<F>,
    y: &[usize],
    epsilon: f64,
    steps: usize,
    step_size: f64,
    random_start: bool,
    rng: &mut Prng,
) -> Result<Array4<F>> {
    if x.dim().0 != y.len() {
        return Err(Error::ShapeMismatch(format!(
            "batch of {} images vs {} labels",
            x.dim().0,
            y.len()
        )));
    }
    let eps = F::from_f64(epsilon).unwrap();
    let step = F::from_f64(step_size).unwrap();
    let mut adv = if random_start {
        let mut a = x.clone();
        a.mapv_inplace(|v| {
            let u: f64 = rng.gen_range(-epsilon..=epsilon);
            (v + F::from_f64(u).unwrap()).max(F::zero()).min(F::one())
        });
        a
    } else {
        x.clone()
    };
    for _ in 0..steps {
        let grad = model.input_gradient(&adv, y)?;
        ndarray::Zip::from(&mut adv)
            .and(&grad)
            .and(x)
            .for_each(|v, &g, &xv| {
                let s = if g > F::zero() {
                    F::one()
                } else if g < F::zero() {
                    -F::one()
                } else {
                    F::zero()
                };
                let mut nv = *v + step * s;
                // project onto the epsilon box, then the pixel range
                nv = nv.min(xv + eps).max(xv - eps);
                *v = nv.max(F::zero()).min(F::one());
            });
    }
    Ok(adv)
}

/// Adversarial training. The model comes in as-is (typically pre-trained on
/// clean data) and is hardened in place over `cfg.epochs` passes.
///
/// Donor models are required for (and only used by) the ensemble defense;
/// they stay frozen and are rotated round-robin across batches.
pub fn adv_train<F: Scalar>(
    mut model: Classifier<F>,
    data: &Dataset<F>,
    cfg: &DefenseConfig,
    donors: &mut [Classifier<F>],
) -> Result<Classifier<F>> {
    cfg.validate();
    if cfg.kind == DefenseKind::Ensemble && donors.is_empty() {
        return Err(Error::MissingStaticModels);
    }
    let n = data.len();
    let labels = data.labels_usize();
    let mut opt = Adam::new(cfg.learning_rate);
    let mut donor_cursor = 0usize;
    let mut pgd_rng = seeded(derive_seed(cfg.seed, "pgd-start"));

    for epoch in 0..cfg.epochs {
        let mut rng = seeded(derive_seed(cfg.seed, &format!("defense-epoch{epoch}")));
        let order = shuffled_indices(n, &mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let x = data.images.select(Axis(0), chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let nb = chunk.len();

            let (xb, yb): (Array4<F>, Vec<usize>) = match cfg.kind {
                DefenseKind::AdvFgsm => {
                    let n_adv = ((cfg.mix_ratio * nb as f64).round() as usize).min(nb);
                    let adv_x = x.slice(ndarray::s![..n_adv, .., .., ..]).to_owned();
                    let adv = fgsm_examples(&mut model, &adv_x, &y[..n_adv], cfg.epsilon)?;
                    let clean = x.slice(ndarray::s![n_adv.., .., .., ..]).to_owned();
                    (
                        concatenate(Axis(0), &[adv.view(), clean.view()]).unwrap(),
                        y.clone(),
                    )
                }
                DefenseKind::Ensemble => {
                    // thirds: clean, FGSM on current, FGSM on a donor
                    let a = nb / 3;
                    let b = 2 * nb / 3;
                    let x_cur = x.slice(ndarray::s![a..b, .., .., ..]).to_owned();
                    let adv_cur = fgsm_examples(&mut model, &x_cur, &y[a..b], cfg.epsilon)?;
                    let donor = &mut donors[donor_cursor % donors.len()];
                    donor_cursor += 1;
                    let x_don = x.slice(ndarray::s![b.., .., .., ..]).to_owned();
                    let adv_don = fgsm_examples(donor, &x_don, &y[b..], cfg.epsilon)?;
                    let clean = x.slice(ndarray::s![..a, .., .., ..]).to_owned();
                    (
                        concatenate(Axis(0), &[clean.view(), adv_cur.view(), adv_don.view()])
                            .unwrap(),
                        y.clone(),
                    )
                }
                DefenseKind::Iterative => {
                    let adv = pgd(
                        &mut model,
                        &x,
                        &y,
                        cfg.epsilon,
                        cfg.pgd_steps,
                        cfg.pgd_step_size,
                        true,
                        &mut pgd_rng,
                    )?;
                    (adv, y.clone())
                }
            };

            let logits = model.logits_mode(&xb, Mode::Train);
            let (loss_val, dlogits) = loss::cross_entropy(&logits, &yb);
            if !loss_val.is_finite() {
                return Err(Error::Diverged {
                    context: "adversarial training",
                });
            }
            let d4 = dlogits
                .into_shape_with_order((xb.dim().0, model.num_classes, 1, 1))
                .unwrap();
            model.net_mut().zero_grad();
            model.net_mut().backward(d4, GradScope::Full);
            let mut params = model.net_mut().params_mut();
            opt.step(&mut params);
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::{fgsm, AttackConfig};
    use crate::models::{build_model, Arch};
    use crate::rng::seeded;
    use ndarray::Array4;
    use rand::Rng;

    #[test]
    fn one_step_pgd_without_random_start_is_fgsm() {
        let mut m = build_model::<f32>(Arch::C, 7);
        let mut rng = seeded(1);
        let x = Array4::from_shape_simple_fn((4, 1, 28, 28), || rng.gen::<f32>());
        let y = vec![0, 1, 2, 3];
        let mut prng = seeded(2);
        let a = pgd(&mut m, &x, &y, 0.3, 1, 0.3, false, &mut prng).unwrap();
        let cfg = AttackConfig {
            targeted: false,
            epsilon: 0.3,
            ..Default::default()
        };
        let b = fgsm(&mut m, &x, &y, &cfg).unwrap().adversarial;
        assert_eq!(a, b);
    }

    #[test]
    fn pgd_output_stays_in_epsilon_box_and_pixel_range() {
        let mut m = build_model::<f32>(Arch::C, 8);
        let mut rng = seeded(3);
        let x = Array4::from_shape_simple_fn((4, 1, 28, 28), || rng.gen::<f32>());
        let y = vec![1, 2, 3, 4];
        let mut prng = seeded(4);
        let adv = pgd(&mut m, &x, &y, 0.2, 7, 0.05, true, &mut prng).unwrap();
        ndarray::Zip::from(&adv).and(&x).for_each(|&a, &o| {
            assert!((a - o).abs() <= 0.2 + 1e-6);
            assert!((0.0..=1.0).contains(&a));
        });
    }

    #[test]
    fn ensemble_without_donors_is_rejected() {
        let m = build_model::<f32>(Arch::A, 1);
        let data = crate::data::Dataset {
            images: Array4::zeros((4, 1, 28, 28)),
            labels: vec![0, 1, 2, 3],
            name: "toy".into(),
        };
        let cfg = DefenseConfig {
            kind: DefenseKind::Ensemble,
            epochs: 1,
            ..Default::default()
        };
        match adv_train(m, &data, &cfg, &mut []) {
            Err(Error::MissingStaticModels) => {}
            other => panic!("expected MissingStaticModels, got {other:?}"),
        }
    }
}
