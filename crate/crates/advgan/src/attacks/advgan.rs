use std::path::Path;
use std::time::Instant;

use ndarray::{Array1, Array4, Axis};
use serde::{Deserialize, Serialize};

use super::{
    clamp01_with_mask, perturbation_norms, AttackConfig, AttackResult,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{checkpoint, Classifier};
use crate::nn::{
    loss, Adam, Conv2d, ConvTranspose2d, Dense, Flatten, GradScope, InstanceNorm, Mode,
    Network, Relu, ResidualBlock, Tanh,
};
use crate::rng::{seeded, shuffled_indices};
use crate::Scalar;

const GENERATOR_ARCH: &str = "encdec-res4-v1";

/// Which terms enter the generator objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// adversarial + GAN + hinge
    Full,
    /// adversarial + plain L2 norm
    L2PlusAdv,
    /// adversarial + hinge
    HingePlusAdv,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdvGanConfig {
    /// Weight of the GAN realism term.
    pub alpha: f64,
    /// Weight of the hinge norm term.
    pub beta: f64,
    /// Soft bound on the perturbation L2 norm inside the hinge.
    pub c: f64,
    pub loss_mode: LossMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Early stop: probe the attack success rate on this many training
    /// instances after each epoch and stop once `target_success` is met.
    #[serde(default)]
    pub probe_size: usize,
    #[serde(default)]
    pub target_success: Option<f64>,
}

impl Default for AdvGanConfig {
    fn default() -> Self {
        AdvGanConfig {
            alpha: 1.0,
            beta: 1.0,
            // hinge engages once the L2 norm exceeds a tenth of the image diagonal scale
            c: 0.1 * (28.0f64 * 28.0).sqrt(),
            loss_mode: LossMode::Full,
            epochs: 20,
            batch_size: 128,
            lr: 0.001,
            seed: 0,
            probe_size: 0,
            target_success: None,
        }
    }
}

impl AdvGanConfig {
    pub fn validate(&self) {
        assert!(self.alpha >= 0.0 && self.beta >= 0.0 && self.c >= 0.0);
    }
}

/// Loss components of one optimization step, recorded in f64.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLosses {
    pub adv: f64,
    pub gan_g: f64,
    pub gan_d: f64,
    pub hinge: f64,
    pub norm_l2: f64,
    pub total: f64,
}

/// Mean loss components over one epoch, plus the step log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub adv: f64,
    pub gan_g: f64,
    pub gan_d: f64,
    pub hinge: f64,
    pub total: f64,
    pub steps: Vec<StepLosses>,
}

/// The perturbation generator: encoder, residual trunk, decoder, tanh.
/// Output times epsilon is the perturbation, so the L-infinity bound holds
/// by construction.
pub struct GeneratorModel<F: Scalar> {
    pub epsilon: f64,
    pub init_seed: u64,
    net: Network<F>,
}

/// Scalar-output convolutional discriminator.
pub struct DiscriminatorModel<F: Scalar> {
    pub init_seed: u64,
    net: Network<F>,
}

pub fn build_generator<F: Scalar>(epsilon: f64, seed: u64) -> GeneratorModel<F> {
    assert!(epsilon > 0.0);
    let mut rng = seeded(seed);
    let r = &mut rng;
    let net = Network::new(vec![
        Box::new(Conv2d::new(1, 8, 3, 1, 1, r)),
        Box::new(InstanceNorm::new(8)),
        Box::new(Relu::new()),
        Box::new(Conv2d::new(8, 16, 3, 2, 1, r)),
        Box::new(InstanceNorm::new(16)),
        Box::new(Relu::new()),
        Box::new(Conv2d::new(16, 32, 3, 2, 1, r)),
        Box::new(InstanceNorm::new(32)),
        Box::new(Relu::new()),
        Box::new(ResidualBlock::new(32, r)),
        Box::new(ResidualBlock::new(32, r)),
        Box::new(ResidualBlock::new(32, r)),
        Box::new(ResidualBlock::new(32, r)),
        Box::new(ConvTranspose2d::new(32, 16, 3, 2, 1, 1, r)),
        Box::new(InstanceNorm::new(16)),
        Box::new(Relu::new()),
        Box::new(ConvTranspose2d::new(16, 8, 3, 2, 1, 1, r)),
        Box::new(InstanceNorm::new(8)),
        Box::new(Relu::new()),
        Box::new(Conv2d::new(8, 1, 3, 1, 1, r)),
        Box::new(Tanh::new()),
    ]);
    GeneratorModel {
        epsilon,
        init_seed: seed,
        net,
    }
}

pub fn build_discriminator<F: Scalar>(seed: u64) -> DiscriminatorModel<F> {
    let mut rng = seeded(seed);
    let r = &mut rng;
    let net = Network::new(vec![
        Box::new(Conv2d::new(1, 8, 4, 2, 1, r)),
        Box::new(Relu::new()),
        Box::new(Conv2d::new(8, 16, 4, 2, 1, r)),
        Box::new(Relu::new()),
        Box::new(Conv2d::new(16, 32, 4, 2, 1, r)),
        Box::new(Relu::new()),
        Box::new(Flatten::new()),
        Box::new(Dense::new(32 * 3 * 3, 1, r)),
    ]);
    DiscriminatorModel {
        init_seed: seed,
        net,
    }
}

impl<F: Scalar> GeneratorModel<F> {
    /// The bounded perturbation for a batch: `epsilon * tanh(net(x))`.
    ///
    /// Eval-mode forwards over large batches run in fixed-size chunks: the
    /// im2col buffers of a whole-set forward would dwarf the model itself.
    /// Training batches must stay whole — backward needs their cached
    /// activations.
    pub fn perturb(&mut self, x: &Array4<F>, epsilon: f64, mode: Mode) -> Array4<F> {
        const EVAL_CHUNK: usize = 128;
        let n = x.dim().0;
        if matches!(mode, Mode::Eval) && n > EVAL_CHUNK {
            let mut out = Array4::<F>::zeros(x.raw_dim());
            let mut s = 0;
            while s < n {
                let e = (s + EVAL_CHUNK).min(n);
                let xb = x.slice(ndarray::s![s..e, .., .., ..]).to_owned();
                out.slice_mut(ndarray::s![s..e, .., .., ..])
                    .assign(&self.perturb(&xb, epsilon, mode));
                s = e;
            }
            return out;
        }
        let eps = F::from_f64(epsilon).unwrap();
        self.net.forward(x.clone(), mode).mapv(|v| v * eps)
    }

    fn backward_from_pert(&mut self, grad_pert: Array4<F>, epsilon: f64) {
        let eps = F::from_f64(epsilon).unwrap();
        self.net
            .backward(grad_pert.mapv(|v| v * eps), GradScope::Full);
    }

    pub fn net_mut(&mut self) -> &mut Network<F> {
        &mut self.net
    }

    pub fn save_checkpoint(&mut self, dir: &Path) -> Result<()> {
        let named = self.net.named_params_mut();
        let entries: Vec<(String, &crate::nn::Param<F>)> =
            named.iter().map(|(n, p)| (n.clone(), &**p)).collect();
        checkpoint::save_params(
            dir,
            "generator",
            GENERATOR_ARCH,
            self.init_seed,
            Some(self.epsilon),
            &entries,
        )
    }

    pub fn load_checkpoint(dir: &Path) -> Result<GeneratorModel<F>> {
        let manifest = checkpoint::read_manifest(dir)?;
        if manifest.kind != "generator" || manifest.arch != GENERATOR_ARCH {
            return Err(Error::ManifestMismatch(format!(
                "expected a '{GENERATOR_ARCH}' generator checkpoint, found '{}/{}'",
                manifest.kind, manifest.arch
            )));
        }
        let epsilon = manifest.epsilon.unwrap_or(0.3);
        let mut g = build_generator(epsilon, manifest.seed);
        let mut named = g.net.named_params_mut();
        checkpoint::load_params(dir, &manifest, &mut named)?;
        Ok(g)
    }
}

impl<F: Scalar> DiscriminatorModel<F> {
    /// Scalar score per image.
    pub fn score(&mut self, x: &Array4<F>, mode: Mode) -> Array1<F> {
        let n = x.dim().0;
        self.net
            .forward(x.clone(), mode)
            .into_shape_with_order(n)
            .unwrap()
    }

    pub fn net_mut(&mut self) -> &mut Network<F> {
        &mut self.net
    }
}

/// Least-squares GAN losses for a real/perturbed pair:
/// the discriminator minimizes `E[(D(x)-1)^2] + E[D(x_adv)^2]`, the
/// generator minimizes `E[(D(x_adv)-1)^2]`.
pub fn gan_losses<F: Scalar>(
    d: &mut DiscriminatorModel<F>,
    x: &Array4<F>,
    x_adv: &Array4<F>,
) -> (F, F) {
    let real = d.score(x, Mode::Eval);
    let fake = d.score(x_adv, Mode::Eval);
    let n = F::from_usize(real.len()).unwrap();
    let m = F::from_usize(fake.len()).unwrap();
    let one = F::one();
    let l_d = real.iter().map(|&v| (v - one) * (v - one)).sum::<F>() / n
        + fake.iter().map(|&v| v * v).sum::<F>() / m;
    let l_g = fake.iter().map(|&v| (v - one) * (v - one)).sum::<F>() / m;
    (l_d, l_g)
}

/// Mean soft hinge on per-instance perturbation L2 norms:
/// `mean(max(0, ||pert_i||_2 - c))`. With `c = 0` this is the mean L2 norm.
pub fn hinge_loss<F: Scalar>(pert: &Array4<F>, c: f64) -> F {
    let cf = F::from_f64(c).unwrap();
    let n = pert.dim().0;
    let mut total = F::zero();
    for i in 0..n {
        let norm = pert
            .index_axis(Axis(0), i)
            .iter()
            .map(|&v| v * v)
            .sum::<F>()
            .sqrt();
        total = total + (norm - cf).max(F::zero());
    }
    total / F::from_usize(n).unwrap()
}

/// Alternating generator/discriminator training against a frozen target.
/// Holding the optimizer state lets black-box iteration schedules resume
/// training where they left off.
pub struct AdvGanTrainer<F: Scalar> {
    pub generator: GeneratorModel<F>,
    pub discriminator: DiscriminatorModel<F>,
    pub atk: AttackConfig,
    pub cfg: AdvGanConfig,
    opt_g: Adam<F>,
    opt_d: Adam<F>,
    pub history: Vec<EpochLosses>,
    epochs_done: usize,
}

impl<F: Scalar> AdvGanTrainer<F> {
    pub fn new(atk: AttackConfig, cfg: AdvGanConfig) -> Self {
        atk.validate();
        cfg.validate();
        let generator = build_generator(atk.epsilon, crate::rng::derive_seed(cfg.seed, "generator"));
        let discriminator =
            build_discriminator(crate::rng::derive_seed(cfg.seed, "discriminator"));
        let (lr_g, lr_d) = (cfg.lr, cfg.lr);
        AdvGanTrainer {
            generator,
            discriminator,
            atk,
            cfg,
            opt_g: Adam::new(lr_g),
            opt_d: Adam::new(lr_d),
            history: Vec::new(),
            epochs_done: 0,
        }
    }

    /// Runs `epochs` passes over `data` against the frozen target `f`.
    /// The target's parameters are never updated: only eval-mode forward
    /// passes and input gradients are taken from it.
    pub fn train_epochs(
        &mut self,
        target: &mut Classifier<F>,
        data: &Dataset<F>,
        epochs: usize,
    ) -> Result<()> {
        let labels = data.labels_usize();
        let targets: Option<Vec<usize>> = self
            .atk
            .targeted
            .then(|| self.atk.targets(&labels, 0));
        let eps = self.atk.epsilon;
        let epsf = F::from_f64(eps).unwrap();
        // kappa is a confidence: the margin loss floors at -kappa
        let kappa = F::from_f64(-self.atk.kappa).unwrap();
        let alpha = F::from_f64(self.cfg.alpha).unwrap();
        let n_total = data.len();

        for _ in 0..epochs {
            let epoch = self.epochs_done;
            let mut order_rng = seeded(crate::rng::derive_seed(
                self.cfg.seed,
                &format!("advgan-epoch{epoch}"),
            ));
            let order = shuffled_indices(n_total, &mut order_rng);
            let mut steps = Vec::new();
            for chunk in order.chunks(self.cfg.batch_size) {
                let x = data.subset(chunk, "batch").images;
                let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                let batch_targets: Option<Vec<usize>> = targets
                    .as_ref()
                    .map(|ts| chunk.iter().map(|&i| ts[i]).collect());
                let nb = x.dim().0;
                let nbf = F::from_usize(nb).unwrap();

                // generator forward; keep the cache alive for its update
                let pert = self.generator.perturb(&x, eps, Mode::Train);
                let (x_adv, clamp_mask) = clamp01_with_mask(&(&x + &pert));

                // discriminator step (real from the source class, fake = x_adv)
                let mut l_gan_d = 0.0f64;
                if self.cfg.loss_mode == LossMode::Full {
                    self.discriminator.net.zero_grad();
                    let d_real = self.discriminator.score(&x, Mode::Train);
                    let g_real = d_real.mapv(|v| (v - F::one()) * (F::one() + F::one()) / nbf);
                    self.discriminator.net.backward(
                        g_real.into_shape_with_order((nb, 1, 1, 1)).unwrap(),
                        GradScope::Full,
                    );
                    let d_fake = self.discriminator.score(&x_adv, Mode::Train);
                    let g_fake = d_fake.mapv(|v| v * (F::one() + F::one()) / nbf);
                    self.discriminator.net.backward(
                        g_fake.into_shape_with_order((nb, 1, 1, 1)).unwrap(),
                        GradScope::Full,
                    );
                    let one = F::one();
                    l_gan_d = (d_real.iter().map(|&v| (v - one) * (v - one)).sum::<F>() / nbf
                        + d_fake.iter().map(|&v| v * v).sum::<F>() / nbf)
                        .to_f64()
                        .unwrap();
                    let mut params = self.discriminator.net.params_mut();
                    self.opt_d.step(&mut params);
                }

                // adversarial term through the frozen target
                let (l_adv_f, g_adv) = {
                    let refs: &[usize] = match &batch_targets {
                        Some(t) => t,
                        None => &batch_labels,
                    };
                    let mut loss_val = F::zero();
                    let (logits, grad) = target.logits_and_input_grad(&x_adv, |logits| {
                        let (l, g) = if batch_targets.is_some() {
                            loss::cw_margin_mean(logits, refs, kappa)
                        } else {
                            loss::cw_margin_untargeted_mean(logits, refs, kappa)
                        };
                        loss_val = l;
                        g
                    });
                    if logits.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Diverged {
                            context: "generator training (target logits)",
                        });
                    }
                    (loss_val, grad)
                };

                // GAN realism term for the generator
                let (l_gan_g, g_gan) = if self.cfg.loss_mode == LossMode::Full {
                    let d_fake = self.discriminator.score(&x_adv, Mode::Train);
                    let one = F::one();
                    let l = d_fake.iter().map(|&v| (v - one) * (v - one)).sum::<F>() / nbf;
                    let g_out = d_fake.mapv(|v| (v - one) * (one + one) / nbf);
                    let g = self.discriminator.net.backward(
                        g_out.into_shape_with_order((nb, 1, 1, 1)).unwrap(),
                        GradScope::InputOnly,
                    );
                    (l.to_f64().unwrap(), Some(g))
                } else {
                    (0.0, None)
                };

                // norm term on the raw perturbation
                let (hinge_c, norm_weight) = match self.cfg.loss_mode {
                    LossMode::Full | LossMode::HingePlusAdv => {
                        (self.cfg.c, if self.cfg.loss_mode == LossMode::Full {
                            self.cfg.beta
                        } else {
                            1.0
                        })
                    }
                    LossMode::L2PlusAdv => (0.0, 1.0),
                };
                let l_hinge = hinge_loss(&pert, hinge_c).to_f64().unwrap();
                let cf = F::from_f64(hinge_c).unwrap();
                let wf = F::from_f64(norm_weight).unwrap();
                let mut g_norm = Array4::<F>::zeros(pert.raw_dim());
                for i in 0..nb {
                    let p = pert.index_axis(Axis(0), i);
                    let norm = p.iter().map(|&v| v * v).sum::<F>().sqrt();
                    if norm > cf && norm > F::from_f64(1e-12).unwrap() {
                        let scale = wf / (norm * nbf);
                        let mut gi = g_norm.index_axis_mut(Axis(0), i);
                        ndarray::Zip::from(&mut gi).and(&p).for_each(|gv, &pv| {
                            *gv = pv * scale;
                        });
                    }
                }

                // assemble d(total)/d(pert) and step the generator
                let mut grad_pert = g_adv;
                if let Some(g_gan) = g_gan {
                    ndarray::Zip::from(&mut grad_pert)
                        .and(&g_gan)
                        .for_each(|a, &b| *a = *a + alpha * b);
                }
                ndarray::Zip::from(&mut grad_pert)
                    .and(&clamp_mask)
                    .for_each(|a, &m| *a = *a * m);
                ndarray::Zip::from(&mut grad_pert)
                    .and(&g_norm)
                    .for_each(|a, &b| *a = *a + b);

                self.generator.net.zero_grad();
                let _ = epsf; // perturbation scale enters via backward_from_pert
                self.generator.backward_from_pert(grad_pert, eps);
                let mut params = self.generator.net.params_mut();
                self.opt_g.step(&mut params);

                let l_adv = l_adv_f.to_f64().unwrap();
                if !l_adv.is_finite() || !l_hinge.is_finite() {
                    return Err(Error::Diverged {
                        context: "generator training",
                    });
                }
                let total = l_adv
                    + match self.cfg.loss_mode {
                        LossMode::Full => self.cfg.alpha * l_gan_g + self.cfg.beta * l_hinge,
                        _ => norm_weight * l_hinge,
                    };
                steps.push(StepLosses {
                    adv: l_adv,
                    gan_g: l_gan_g,
                    gan_d: l_gan_d,
                    hinge: l_hinge,
                    norm_l2: 0.0,
                    total,
                });
            }
            let mean = |f: fn(&StepLosses) -> f64| {
                steps.iter().map(f).sum::<f64>() / steps.len().max(1) as f64
            };
            self.history.push(EpochLosses {
                epoch,
                adv: mean(|s| s.adv),
                gan_g: mean(|s| s.gan_g),
                gan_d: mean(|s| s.gan_d),
                hinge: mean(|s| s.hinge),
                total: mean(|s| s.total),
                steps,
            });
            self.epochs_done += 1;
        }
        Ok(())
    }

    /// Targeted success rate of the current generator against `target` on
    /// the first `n` instances of `data`.
    pub fn probe_success(
        &mut self,
        target: &mut Classifier<F>,
        data: &Dataset<F>,
        n: usize,
    ) -> f64 {
        let n = n.min(data.len()).max(1);
        let idx: Vec<usize> = (0..n).collect();
        let probe = data.subset(&idx, "probe");
        let labels = probe.labels_usize();
        let result = advgan_generate(&mut self.generator, &probe.images, self.atk.epsilon);
        let pred = {
            let mut out = Vec::with_capacity(n);
            let mut start = 0;
            while start < n {
                let end = (start + 256).min(n);
                let xb = result
                    .adversarial
                    .slice(ndarray::s![start..end, .., .., ..])
                    .to_owned();
                out.extend(target.predict(&xb));
                start = end;
            }
            out
        };
        let flags = if self.atk.targeted {
            let ts = self.atk.targets(&labels, 0);
            super::success_flags(&pred, &labels, Some(&ts))
        } else {
            super::success_flags(&pred, &labels, None)
        };
        flags.iter().filter(|&&s| s).count() as f64 / n as f64
    }
}

/// Trains a generator/discriminator pair against a frozen target model.
pub fn advgan_train<F: Scalar>(
    target: &mut Classifier<F>,
    data: &Dataset<F>,
    atk: &AttackConfig,
    cfg: &AdvGanConfig,
) -> Result<(GeneratorModel<F>, DiscriminatorModel<F>, Vec<EpochLosses>)> {
    let mut trainer = AdvGanTrainer::new(atk.clone(), cfg.clone());
    for _ in 0..cfg.epochs {
        trainer.train_epochs(target, data, 1)?;
        if let Some(goal) = cfg.target_success {
            if cfg.probe_size > 0 && trainer.probe_success(target, data, cfg.probe_size) >= goal {
                break;
            }
        }
    }
    Ok((trainer.generator, trainer.discriminator, trainer.history))
}

/// Pure feed-forward generation: no access to any target model.
pub fn advgan_generate<F: Scalar>(
    generator: &mut GeneratorModel<F>,
    x: &Array4<F>,
    epsilon: f64,
) -> AttackResult<F> {
    let start = Instant::now();
    let pert = generator.perturb(x, epsilon, Mode::Eval);
    let (adv, _) = clamp01_with_mask(&(x + &pert));
    let wall = start.elapsed().as_secs_f64();
    let (linf, l2) = perturbation_norms(x, &adv);
    AttackResult {
        adversarial: adv,
        success: Vec::new(), // scored later by whoever holds a model
        perturbation_linf: linf,
        perturbation_l2: l2,
        wall_time_seconds: wall,
        queries_used: 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    #[test]
    fn generator_output_is_epsilon_bounded_by_construction() {
        let mut g = build_generator::<f32>(0.3, 1);
        let mut rng = seeded(5);
        let x = Array4::from_shape_simple_fn((16, 1, 28, 28), || rng.gen::<f32>());
        let r = advgan_generate(&mut g, &x, 0.3);
        for &v in &r.perturbation_linf {
            assert!(v <= 0.3 + 1e-6);
        }
        assert!(r.adversarial.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn zeroed_output_layer_is_identity_attack() {
        let mut g = build_generator::<f32>(0.3, 2);
        // zero the last conv so tanh(0) = 0 everywhere
        let params = g.net_mut().params_mut();
        let count = params.len();
        for p in params.into_iter().skip(count - 2) {
            p.value.fill(0.0);
        }
        let mut rng = seeded(6);
        let x = Array4::from_shape_simple_fn((4, 1, 28, 28), || rng.gen::<f32>());
        let r = advgan_generate(&mut g, &x, 0.3);
        assert_eq!(r.adversarial, x);
    }

    #[test]
    fn gan_losses_match_constant_discriminator_cases() {
        // bias-only discriminator scoring a constant value everywhere
        let mut rng = seeded(3);
        let x = Array4::from_shape_simple_fn((5, 1, 28, 28), || rng.gen::<f32>());
        let xa = x.clone();
        for (constant, expect_d, expect_g) in
            [(1.0f32, 1.0f32, 0.0f32), (0.0, 1.0, 1.0), (0.5, 0.5, 0.25)]
        {
            let mut d = build_discriminator::<f32>(1);
            for p in d.net_mut().params_mut() {
                p.value.fill(0.0);
                if p.name == "bias" && p.value.len() == 1 {
                    p.value.fill(constant);
                }
            }
            let (l_d, l_g) = gan_losses(&mut d, &x, &xa);
            assert!((l_d - expect_d).abs() < 1e-6, "L_D for D={constant}");
            assert!((l_g - expect_g).abs() < 1e-6, "L_G for D={constant}");
        }
    }

    #[test]
    fn hinge_loss_matches_hand_cases() {
        // single instance with known L2 norm: one pixel at 0.2
        let mut pert = Array4::<f64>::zeros((1, 1, 28, 28));
        pert[[0, 0, 0, 0]] = 0.2;
        assert!((hinge_loss(&pert, 0.3) - 0.0).abs() < 1e-12);
        pert[[0, 0, 0, 0]] = 0.5;
        assert!((hinge_loss(&pert, 0.3) - 0.2).abs() < 1e-12);
        assert!((hinge_loss(&pert, 0.0) - 0.5).abs() < 1e-12);
    }
}
