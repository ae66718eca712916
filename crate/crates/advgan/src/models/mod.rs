//! The classifier zoo, standard training, input gradients, checkpoint
//! persistence, and the query-only black-box wrapper.

pub mod checkpoint;

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{
    loss, Adam, Conv2d, Dense, Dropout, Flatten, GradScope, MaxPool2d, Mode, Network, Relu,
};
use crate::rng::{seeded, shuffled_indices, Prng};
use crate::Scalar;

pub const NUM_CLASSES: usize = 10;

/// The three MNIST target architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arch {
    A,
    B,
    C,
    /// A caller-supplied network (toy targets in tests and oracles); not
    /// buildable from a checkpoint.
    Custom,
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Arch::A => write!(f, "A"),
            Arch::B => write!(f, "B"),
            Arch::C => write!(f, "C"),
            Arch::Custom => write!(f, "custom"),
        }
    }
}

impl std::str::FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Arch::A),
            "B" | "b" => Ok(Arch::B),
            "C" | "c" => Ok(Arch::C),
            other => Err(Error::UnknownArch(other.to_string())),
        }
    }
}

fn build_net<F: Scalar>(arch: Arch, rng: &mut Prng) -> Network<F> {
    match arch {
        Arch::Custom => panic!("custom classifiers are built from a network, not an arch id"),
        // conv(64,5x5) -> conv(64,5x5) -> dropout -> fc(128) -> dropout -> fc(10)
        Arch::A => Network::new(vec![
            Box::new(Conv2d::new(1, 64, 5, 1, 0, rng)),
            Box::new(Relu::new()),
            Box::new(Conv2d::new(64, 64, 5, 1, 0, rng)),
            Box::new(Relu::new()),
            Box::new(Dropout::new(0.25, Prng::clone(rng))),
            Box::new(Flatten::new()),
            Box::new(Dense::new(64 * 20 * 20, 128, rng)),
            Box::new(Relu::new()),
            Box::new(Dropout::new(0.5, Prng::clone(rng))),
            Box::new(Dense::new(128, NUM_CLASSES, rng)),
        ]),
        // dropout -> conv(64,8x8,s2) -> conv(128,6x6,s2) -> conv(128,5x5) -> dropout -> fc(10)
        Arch::B => Network::new(vec![
            Box::new(Dropout::new(0.2, Prng::clone(rng))),
            Box::new(Conv2d::new(1, 64, 8, 2, 3, rng)),
            Box::new(Relu::new()),
            Box::new(Conv2d::new(64, 128, 6, 2, 0, rng)),
            Box::new(Relu::new()),
            Box::new(Conv2d::new(128, 128, 5, 1, 0, rng)),
            Box::new(Relu::new()),
            Box::new(Dropout::new(0.5, Prng::clone(rng))),
            Box::new(Flatten::new()),
            Box::new(Dense::new(128, NUM_CLASSES, rng)),
        ]),
        // conv(32,3x3)x2 -> pool -> conv(64,3x3)x2 -> pool -> fc(200) -> fc(200) -> fc(10)
        Arch::C => Network::new(vec![
            Box::new(Conv2d::new(1, 32, 3, 1, 0, rng)),
            Box::new(Relu::new()),
            Box::new(Conv2d::new(32, 32, 3, 1, 0, rng)),
            Box::new(Relu::new()),
            Box::new(MaxPool2d::new(2)),
            Box::new(Conv2d::new(32, 64, 3, 1, 0, rng)),
            Box::new(Relu::new()),
            Box::new(Conv2d::new(64, 64, 3, 1, 0, rng)),
            Box::new(Relu::new()),
            Box::new(MaxPool2d::new(2)),
            Box::new(Flatten::new()),
            Box::new(Dense::new(64 * 4 * 4, 200, rng)),
            Box::new(Relu::new()),
            Box::new(Dense::new(200, 200, rng)),
            Box::new(Relu::new()),
            Box::new(Dense::new(200, NUM_CLASSES, rng)),
        ]),
    }
}

impl<F: Scalar> std::fmt::Debug for Classifier<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Classifier")
            .field("arch", &self.arch)
            .field("num_classes", &self.num_classes)
            .field("init_seed", &self.init_seed)
            .finish_non_exhaustive()
    }
}

/// A differentiable ten-class image classifier.
pub struct Classifier<F: Scalar> {
    pub arch: Arch,
    pub num_classes: usize,
    pub init_seed: u64,
    net: Network<F>,
}

/// Builds a freshly initialized classifier; identical seeds give identical
/// parameters.
pub fn build_model<F: Scalar>(arch: Arch, seed: u64) -> Classifier<F> {
    let mut rng = seeded(seed);
    Classifier {
        arch,
        num_classes: NUM_CLASSES,
        init_seed: seed,
        net: build_net(arch, &mut rng),
    }
}

impl<F: Scalar> Classifier<F> {
    /// Wraps an arbitrary network as a classifier (toy targets, oracles).
    pub fn from_network(net: Network<F>, num_classes: usize) -> Self {
        Classifier {
            arch: Arch::Custom,
            num_classes,
            init_seed: 0,
            net,
        }
    }

    /// Eval-mode logits. Large batches run in fixed-size chunks so that
    /// whole-set forwards stay within a bounded memory footprint.
    pub fn logits(&mut self, x: &Array4<F>) -> Array2<F> {
        const EVAL_CHUNK: usize = 256;
        let n = x.dim().0;
        if n > EVAL_CHUNK {
            let mut out = Array2::<F>::zeros((n, self.num_classes));
            let mut s = 0;
            while s < n {
                let e = (s + EVAL_CHUNK).min(n);
                let xb = x.slice(ndarray::s![s..e, .., .., ..]).to_owned();
                out.slice_mut(ndarray::s![s..e, ..])
                    .assign(&self.logits_mode(&xb, Mode::Eval));
                s = e;
            }
            return out;
        }
        self.logits_mode(x, Mode::Eval)
    }

    pub fn logits_mode(&mut self, x: &Array4<F>, mode: Mode) -> Array2<F> {
        let n = x.dim().0;
        let out = self.net.forward(x.clone(), mode);
        out.into_shape_with_order((n, self.num_classes)).unwrap()
    }

    pub fn probs(&mut self, x: &Array4<F>) -> Array2<F> {
        loss::softmax(&self.logits(x))
    }

    pub fn predict(&mut self, x: &Array4<F>) -> Vec<usize> {
        loss::argmax_rows(&self.logits(x))
    }

    /// Batched prediction over a whole dataset.
    pub fn predict_dataset(&mut self, data: &Dataset<F>, batch: usize) -> Vec<usize> {
        let n = data.len();
        let mut out = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let end = (start + batch).min(n);
            let x = data
                .images
                .slice(ndarray::s![start..end, .., .., ..])
                .to_owned();
            out.extend(self.predict(&x));
            start = end;
        }
        out
    }

    pub fn accuracy(&mut self, data: &Dataset<F>, batch: usize) -> f64 {
        if data.is_empty() {
            return 0.0;
        }
        let pred = self.predict_dataset(data, batch);
        let hits = pred
            .iter()
            .zip(&data.labels)
            .filter(|(p, l)| **p == **l as usize)
            .count();
        hits as f64 / data.len() as f64
    }

    /// Gradient of the mean cross-entropy with respect to the input batch.
    pub fn input_gradient(&mut self, x: &Array4<F>, labels: &[usize]) -> Result<Array4<F>> {
        if x.dim().0 != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "batch of {} images vs {} labels",
                x.dim().0,
                labels.len()
            )));
        }
        let (_, grad) = self.logits_and_input_grad(x, |logits| loss::cross_entropy(logits, labels).1);
        Ok(grad)
    }

    /// Runs one eval-mode forward pass, maps the logits to a logit gradient
    /// through `grad_fn`, and backpropagates it to the input only.
    pub fn logits_and_input_grad(
        &mut self,
        x: &Array4<F>,
        grad_fn: impl FnOnce(&Array2<F>) -> Array2<F>,
    ) -> (Array2<F>, Array4<F>) {
        let n = x.dim().0;
        let logits = self
            .net
            .forward(x.clone(), Mode::Eval)
            .into_shape_with_order((n, self.num_classes))
            .unwrap();
        let dlogits = grad_fn(&logits)
            .into_shape_with_order((n, self.num_classes, 1, 1))
            .unwrap();
        let gx = self.net.backward(dlogits, GradScope::InputOnly);
        (logits, gx)
    }

    pub fn param_count(&mut self) -> usize {
        self.net.param_count()
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
            "classifier",
            &self.arch.to_string(),
            self.init_seed,
            None,
            &entries,
        )
    }

    pub fn load_checkpoint(dir: &Path) -> Result<Classifier<F>> {
        let manifest = checkpoint::read_manifest(dir)?;
        if manifest.kind != "classifier" {
            return Err(Error::ManifestMismatch(format!(
                "expected a classifier checkpoint, found '{}'",
                manifest.kind
            )));
        }
        let arch: Arch = manifest.arch.parse()?;
        let mut model = build_model(arch, manifest.seed);
        let mut named = model.net.named_params_mut();
        checkpoint::load_params(dir, &manifest, &mut named)?;
        Ok(model)
    }
}

/// Training hyperparameters. Batch size 128 and learning rate 0.001 are the
/// reference defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHyper {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    /// When set, carve this fraction out of the data as a held-out set; the
    /// returned accuracy is measured on it.
    #[serde(default)]
    pub holdout_fraction: Option<f64>,
    /// Stop as soon as the monitored accuracy reaches this value.
    #[serde(default)]
    pub target_accuracy: Option<f64>,
    /// Linearly anneal the learning rate to `lr * fraction` over the whole
    /// run (constant when unset). Short training budgets benefit from the
    /// cooled-down tail.
    #[serde(default)]
    pub final_lr_fraction: Option<f64>,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            batch_size: 128,
            learning_rate: 0.001,
            epochs: 5,
            seed: 0,
            holdout_fraction: None,
            target_accuracy: None,
            final_lr_fraction: None,
        }
    }
}

/// Standard softmax-cross-entropy training with Adam.
///
/// Returns the model and the accuracy on the held-out part (or on the full
/// training data when no holdout is configured).
pub fn train_classifier<F: Scalar>(
    mut model: Classifier<F>,
    data: &Dataset<F>,
    hyper: &TrainHyper,
) -> Result<(Classifier<F>, f64)> {
    assert!(hyper.batch_size >= 1 && hyper.learning_rate > 0.0);
    let n = data.len();
    let mut rng = seeded(hyper.seed);
    let (train_idx, eval_idx): (Vec<usize>, Vec<usize>) = match hyper.holdout_fraction {
        Some(f) if f > 0.0 => {
            let order = shuffled_indices(n, &mut rng);
            let n_eval = ((f * n as f64).round() as usize).clamp(1, n - 1);
            (
                order[n_eval..].to_vec(),
                order[..n_eval].to_vec(),
            )
        }
        _ => ((0..n).collect(), (0..n).collect()),
    };
    let eval_set = data.subset(&eval_idx, "holdout");

    let mut opt = Adam::new(hyper.learning_rate);
    let steps_per_epoch = train_idx.len().div_ceil(hyper.batch_size);
    let total_steps = (steps_per_epoch * hyper.epochs).max(1);
    let mut step_no = 0usize;
    'outer: for epoch in 0..hyper.epochs {
        let mut order_rng = seeded(crate::rng::derive_seed(hyper.seed, &format!("epoch{epoch}")));
        let order = shuffled_indices(train_idx.len(), &mut order_rng);
        for chunk in order.chunks(hyper.batch_size) {
            if let Some(frac) = hyper.final_lr_fraction {
                let progress = step_no as f64 / total_steps as f64;
                opt.lr = hyper.learning_rate * (1.0 - progress * (1.0 - frac));
            }
            step_no += 1;
            let idx: Vec<usize> = chunk.iter().map(|&i| train_idx[i]).collect();
            let batch = data.subset(&idx, "batch");
            let labels = batch.labels_usize();
            let logits = model.logits_mode(&batch.images, Mode::Train);
            let (loss_val, dlogits) = loss::cross_entropy(&logits, &labels);
            if !loss_val.is_finite() {
                return Err(Error::Diverged {
                    context: "classifier training",
                });
            }
            let nb = batch.len();
            let d4 = dlogits
                .into_shape_with_order((nb, model.num_classes, 1, 1))
                .unwrap();
            model.net.zero_grad();
            model.net.backward(d4, GradScope::Full);
            let mut params = model.net.params_mut();
            opt.step(&mut params);
        }
        if let Some(target) = hyper.target_accuracy {
            if model.accuracy(&eval_set, hyper.batch_size.max(256)) >= target {
                break 'outer;
            }
        }
    }
    let acc = model.accuracy(&eval_set, hyper.batch_size.max(256));
    Ok((model, acc))
}

/// Query-only access to a hidden classifier.
///
/// The wrapper exposes output probabilities and labels; there is no way to
/// reach the inner model's parameters or gradients through it, and every
/// query is counted.
pub struct BlackBoxOracle<F: Scalar> {
    inner: Classifier<F>,
    queries: AtomicU64,
}

impl<F: Scalar> BlackBoxOracle<F> {
    pub fn new(inner: Classifier<F>) -> Self {
        BlackBoxOracle {
            inner,
            queries: AtomicU64::new(0),
        }
    }

    /// Softmax output distribution for a batch; counts one query per row.
    pub fn query_probs(&mut self, x: &Array4<F>) -> Array2<F> {
        self.queries.fetch_add(x.dim().0 as u64, Ordering::SeqCst);
        self.inner.probs(x)
    }

    /// Hard labels for a batch; counts one query per row.
    pub fn query_labels(&mut self, x: &Array4<F>) -> Vec<usize> {
        loss::argmax_rows(&self.query_probs(x))
    }

    pub fn query_count(&self) -> u64 {
        self.queries.load(Ordering::SeqCst)
    }

    /// Output arity is public knowledge (the label set), not model internals.
    pub fn num_classes(&self) -> usize {
        self.inner.num_classes
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn random_batch(n: usize, seed: u64) -> Array4<f32> {
        use rand::Rng;
        let mut rng = seeded(seed);
        Array4::from_shape_simple_fn((n, 1, 28, 28), || rng.gen::<f32>())
    }

    #[test]
    fn seeded_build_is_reproducible() {
        let mut a = build_model::<f32>(Arch::C, 42);
        let mut b = build_model::<f32>(Arch::C, 42);
        let x = random_batch(2, 0);
        assert_eq!(a.logits(&x), b.logits(&x));
    }

    #[test]
    fn logits_have_batch_by_ten_shape() {
        for arch in [Arch::A, Arch::B, Arch::C] {
            let mut m = build_model::<f32>(arch, 1);
            let x = random_batch(4, 3);
            assert_eq!(m.logits(&x).dim(), (4, 10));
        }
    }

    #[test]
    fn model_c_parameter_count_matches_layer_table() {
        // conv 32x1x3x3+32, conv 32x32x3x3+32, conv 64x32x3x3+64,
        // conv 64x64x3x3+64, fc 1024x200+200, fc 200x200+200, fc 200x10+10
        let expected = (32 * 9 + 32)
            + (32 * 32 * 9 + 32)
            + (64 * 32 * 9 + 64)
            + (64 * 64 * 9 + 64)
            + (1024 * 200 + 200)
            + (200 * 200 + 200)
            + (200 * 10 + 10);
        let mut m = build_model::<f32>(Arch::C, 0);
        assert_eq!(m.param_count(), expected);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut m = build_model::<f32>(Arch::B, 5);
        let p = m.probs(&random_batch(8, 9));
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_epochs_leaves_model_untouched() {
        let images = random_batch(40, 7);
        let labels: Vec<u8> = (0..40).map(|i| (i % 10) as u8).collect();
        let data = Dataset {
            images: images.clone(),
            labels,
            name: "t".into(),
        };
        let model = build_model::<f32>(Arch::C, 3);
        let mut fresh = build_model::<f32>(Arch::C, 3);
        let hyper = TrainHyper {
            epochs: 0,
            ..Default::default()
        };
        let (mut trained, _) = train_classifier(model, &data, &hyper).unwrap();
        assert_eq!(trained.logits(&images), fresh.logits(&images));
    }

    #[test]
    fn tiny_set_is_memorized() {
        use rand::Rng;
        let mut rng = seeded(11);
        let images = Array4::from_shape_simple_fn((16, 1, 28, 28), || rng.gen::<f32>());
        let labels: Vec<u8> = (0..16).map(|i| (i % 10) as u8).collect();
        let data = Dataset {
            images,
            labels,
            name: "tiny".into(),
        };
        let model = build_model::<f32>(Arch::A, 2);
        let hyper = TrainHyper {
            batch_size: 16,
            epochs: 200,
            seed: 1,
            target_accuracy: Some(1.0),
            ..Default::default()
        };
        let (_, acc) = train_classifier(model, &data, &hyper).unwrap();
        assert_eq!(acc, 1.0, "16 random images should be memorized");
    }

    #[test]
    fn constant_output_model_has_zero_input_gradient() {
        let mut m = build_model::<f32>(Arch::C, 4);
        // zero the final layer so the loss cannot depend on the input
        let mut params = m.net_mut().params_mut();
        let count = params.len();
        params[count - 2].value.fill(0.0);
        params[count - 1].value.fill(0.0);
        let x = random_batch(3, 8);
        let g = m.input_gradient(&x, &[1, 2, 3]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn oracle_counts_queries_exactly() {
        let mut oracle = BlackBoxOracle::new(build_model::<f32>(Arch::C, 6));
        assert_eq!(oracle.query_count(), 0);
        oracle.query_probs(&random_batch(5, 1));
        oracle.query_labels(&random_batch(3, 2));
        assert_eq!(oracle.query_count(), 8);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = build_model::<f32>(Arch::B, 77);
        let x = random_batch(4, 5);
        let before = m.logits(&x);
        m.save_checkpoint(dir.path()).unwrap();
        let mut loaded = Classifier::<f32>::load_checkpoint(dir.path()).unwrap();
        let after = loaded.logits(&x);
        assert_eq!(before, after);
    }

    #[test]
    fn edited_manifest_shape_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = build_model::<f32>(Arch::C, 1);
        m.save_checkpoint(dir.path()).unwrap();
        let path = dir.path().join("manifest.json");
        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replacen("200", "199", 1);
        std::fs::write(&path, text).unwrap();
        match Classifier::<f32>::load_checkpoint(dir.path()) {
            Err(Error::ManifestMismatch(_)) => {}
            other => panic!("expected ManifestMismatch, got {other:?}"),
        }
    }

    #[test]
    fn missing_tensor_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = build_model::<f32>(Arch::C, 1);
        m.save_checkpoint(dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("layer0_weight.bin")).unwrap();
        match Classifier::<f32>::load_checkpoint(dir.path()) {
            Err(Error::CorruptTensor(_)) => {}
            other => panic!("expected CorruptTensor, got {other:?}"),
        }
    }
}
