//! Tiny models with independently computable optima, used as oracles for the
//! attack implementations: a closed-form check of the sign-gradient attack on
//! a linear classifier, exhaustive grid search over the perturbation box for
//! the optimization attack, and distillation sanity checks.

use ndarray::{Array2, Array4};
use rand::Rng;

use advgan::attacks::{fgsm, opt_attack, AttackConfig};
use advgan::data::Dataset;
use advgan::distillation::{static_distill, DistillConfig};
use advgan::models::{build_model, Arch, BlackBoxOracle, Classifier};
use advgan::nn::{loss, Dense, Flatten, Layer, Network};
use advgan::rng::seeded;

/// `z = W^T x + b` on two features, three classes, with hand-picked weights.
/// Input tensors are shaped `[n, 1, 1, 2]`.
fn linear_model(w: [[f64; 3]; 2], b: [f64; 3]) -> Classifier<f64> {
    let mut rng = seeded(0);
    let mut dense = Dense::<f64>::new(2, 3, &mut rng);
    {
        let mut params = dense.params_mut();
        let ws = params[0].value.as_slice_mut().unwrap(); // [in=2, out=3] row-major
        for i in 0..2 {
            for j in 0..3 {
                ws[i * 3 + j] = w[i][j];
            }
        }
        let bs = params[1].value.as_slice_mut().unwrap();
        bs.copy_from_slice(&b);
    }
    let net = Network::new(vec![Box::new(Flatten::new()), Box::new(dense)]);
    Classifier::from_network(net, 3)
}

const W: [[f64; 3]; 2] = [[1.0, -0.5, 0.2], [-0.3, 0.8, 0.1]];
const B: [f64; 3] = [0.05, -0.1, 0.0];

fn logits_of(x0: f64, x1: f64) -> [f64; 3] {
    let mut z = [0.0; 3];
    for (j, zj) in z.iter_mut().enumerate() {
        *zj = W[0][j] * x0 + W[1][j] * x1 + B[j];
    }
    z
}

#[test]
fn fgsm_matches_closed_form_on_linear_model() {
    let mut model = linear_model(W, B);
    let cases = [(0.42, 0.66, 0usize), (0.8, 0.15, 2), (0.5, 0.5, 1)];
    let eps = 0.12;
    for &(x0, x1, y) in &cases {
        let x = Array4::from_shape_vec((1, 1, 1, 2), vec![x0, x1]).unwrap();
        let cfg = AttackConfig {
            epsilon: eps,
            targeted: false,
            ..AttackConfig::default()
        };
        let res = fgsm(&mut model, &x, &[y], &cfg).unwrap();

        // closed form: grad_x CE = W (softmax(z) - e_y), adv = clip(x + eps*sign)
        let z = logits_of(x0, x1);
        let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = z.iter().map(|&v| (v - zmax).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let p: Vec<f64> = exps.iter().map(|&e| e / sum).collect();
        let mut expected = [x0, x1];
        for (i, e) in expected.iter_mut().enumerate() {
            let mut grad = 0.0;
            for j in 0..3 {
                let delta = p[j] - if j == y { 1.0 } else { 0.0 };
                grad += W[i][j] * delta;
            }
            *e = (*e + eps * grad.signum()).clamp(0.0, 1.0);
        }
        let got = res.adversarial.as_slice().unwrap();
        for i in 0..2 {
            assert!(
                (got[i] - expected[i]).abs() < 1e-9,
                "feature {i}: got {} expected {}",
                got[i],
                expected[i]
            );
        }
    }
}

/// Objective value of the optimization attack at a candidate perturbation.
fn opt_objective(x: [f64; 2], eta: [f64; 2], target: usize, lambda: f64) -> f64 {
    let z = logits_of(x[0] + eta[0], x[1] + eta[1]);
    let other = (0..3)
        .filter(|&j| j != target)
        .map(|j| z[j])
        .fold(f64::NEG_INFINITY, f64::max);
    let margin = (other - z[target]).max(0.0);
    let norm = (eta[0] * eta[0] + eta[1] * eta[1]).sqrt();
    norm + lambda * margin
}

#[test]
fn opt_attack_matches_exhaustive_grid_search() {
    let mut model = linear_model(W, B);
    let eps = 0.5f64;
    let lambda = 10.0;
    let cases = [([0.42f64, 0.66], 1usize), ([0.8, 0.15], 1), ([0.3, 0.7], 0)];

    for &(xv, target) in &cases {
        // exhaustive search over the feasible box at resolution 0.01
        let mut grid_best = f64::INFINITY;
        let steps = (2.0 * eps / 0.01).round() as i64;
        for i in 0..=steps {
            for j in 0..=steps {
                let eta = [-eps + i as f64 * 0.01, -eps + j as f64 * 0.01];
                let p0 = xv[0] + eta[0];
                let p1 = xv[1] + eta[1];
                if !(0.0..=1.0).contains(&p0) || !(0.0..=1.0).contains(&p1) {
                    continue;
                }
                grid_best = grid_best.min(opt_objective(xv, eta, target, lambda));
            }
        }

        let x = Array4::from_shape_vec((1, 1, 1, 2), xv.to_vec()).unwrap();
        let cfg = AttackConfig {
            epsilon: eps,
            targeted: true,
            lambda,
            opt_steps: 8000,
            opt_lr: 0.002,
            ..AttackConfig::default()
        };
        let res = opt_attack(&mut model, &x, &[target], &cfg).unwrap();
        let adv = res.adversarial.as_slice().unwrap();
        let eta = [adv[0] - xv[0], adv[1] - xv[1]];
        let got = opt_objective(xv, eta, target, lambda);
        // the continuous optimizer must do at least as well as the 0.01 grid
        assert!(
            got <= grid_best + 1e-3,
            "x={xv:?} target={target}: optimizer objective {got:.6} vs grid {grid_best:.6}"
        );
    }
}

/// Cross entropy H(p, q) is minimized over q at q = p (Gibbs' inequality),
/// so the distillation loss can only be zero-gradient at an exact match.
#[test]
fn soft_cross_entropy_is_minimized_at_the_target_distribution() {
    let mut rng = seeded(55);
    for _ in 0..20 {
        let raw = Array2::from_shape_simple_fn((3, 5), || rng.gen_range(0.1..2.0f64));
        let sums = raw.sum_axis(ndarray::Axis(1));
        let p = &raw / &sums.insert_axis(ndarray::Axis(1));

        let matching_logits = p.mapv(f64::ln);
        let (best, _) = loss::soft_cross_entropy(&matching_logits, &p);
        for _ in 0..10 {
            let q = Array2::from_shape_simple_fn((3, 5), || rng.gen_range(-3.0..3.0f64));
            let (other, _) = loss::soft_cross_entropy(&q, &p);
            assert!(
                other >= best - 1e-9,
                "H(p,q)={other} fell below H(p,p)={best}"
            );
        }
    }
}

/// A substitute trained on a tiny pool must reproduce the oracle's labels on
/// that pool, and querying must be charged exactly once per pool instance.
#[test]
fn static_distillation_fits_the_pool_and_counts_queries() {
    let mut rng = seeded(66);
    let n = 4;
    let images = Array4::from_shape_simple_fn((n, 1, 28, 28), || rng.gen_range(0.0..1.0f64));
    let labels = vec![0u8; n]; // unused by distillation; the oracle labels rule
    let pool = Dataset {
        images: images.clone(),
        labels,
        name: "pool".into(),
    };

    let mut oracle = BlackBoxOracle::new(build_model::<f64>(Arch::A, 3));
    let cfg = DistillConfig {
        local_arch: Arch::C,
        static_epochs: 60,
        batch_size: 4,
        learning_rate: 0.005,
        seed: 9,
        ..DistillConfig::default()
    };
    let mut substitute = static_distill(&mut oracle, &pool, &cfg).unwrap();

    assert_eq!(
        oracle.query_count(),
        n as u64,
        "distillation must query each pool point exactly once"
    );
    let oracle_labels = oracle.query_labels(&images);
    let got = substitute.predict(&images);
    assert_eq!(got, oracle_labels, "substitute disagrees with oracle on its own training pool");
}
