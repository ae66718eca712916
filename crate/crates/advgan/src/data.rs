//! MNIST-style IDX ingestion, unit-range normalization, and seeded
//! disjoint splits.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array4;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{seeded, shuffled_indices};
use crate::Scalar;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// A labelled image set with pixels in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Dataset<F> {
    /// `[n, 1, 28, 28]` (channel-first internally; the file format is row-major HxW).
    pub images: Array4<F>,
    pub labels: Vec<u8>,
    pub name: String,
}

impl<F: Scalar> Dataset<F> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels_usize(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }

    /// Copies the rows at `indices` into a new dataset.
    pub fn subset(&self, indices: &[usize], name: &str) -> Dataset<F> {
        let (_, c, h, w) = self.images.dim();
        let mut images = Array4::zeros((indices.len(), c, h, w));
        let mut labels = Vec::with_capacity(indices.len());
        for (row, &i) in indices.iter().enumerate() {
            images
                .index_axis_mut(ndarray::Axis(0), row)
                .assign(&self.images.index_axis(ndarray::Axis(0), i));
            labels.push(self.labels[i]);
        }
        Dataset {
            images,
            labels,
            name: name.to_string(),
        }
    }

    /// Keeps the first `n` instances (or all, when shorter).
    pub fn take(&self, n: usize, name: &str) -> Dataset<F> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx, name)
    }
}

/// Split fractions for target training, distillation pool, and evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSpec {
    pub fractions: BTreeMap<String, f64>,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(target_train: f64, distill: f64, eval: f64, seed: u64) -> Self {
        let mut fractions = BTreeMap::new();
        fractions.insert("target_train".to_string(), target_train);
        fractions.insert("distill".to_string(), distill);
        fractions.insert("eval".to_string(), eval);
        SplitSpec { fractions, seed }
    }

    fn fraction(&self, key: &str) -> Result<f64> {
        let f = *self
            .fractions
            .get(key)
            .ok_or_else(|| Error::BadSplitSpec(format!("missing fraction '{key}'")))?;
        if f <= 0.0 {
            return Err(Error::BadSplitSpec(format!("fraction '{key}' must be > 0")));
        }
        Ok(f)
    }

    pub fn validate(&self) -> Result<(f64, f64, f64)> {
        let t = self.fraction("target_train")?;
        let d = self.fraction("distill")?;
        let e = self.fraction("eval")?;
        if t + d + e > 1.0 + 1e-12 {
            return Err(Error::BadSplitSpec(format!(
                "fractions sum to {} > 1",
                t + d + e
            )));
        }
        Ok((t, d, e))
    }
}

fn read_u32_be(buf: &[u8], offset: usize) -> u32 {
    u32::from_be_bytes(buf[offset..offset + 4].try_into().unwrap())
}

/// Loads an IDX image/label pair into a unit-range dataset.
///
/// Pixels are scaled from `{0..255}` to `[0, 1]` by division by 255, keeping
/// perturbation bounds in the file's own pixel units.
pub fn load_mnist<F: Scalar>(images_path: &Path, labels_path: &Path) -> Result<Dataset<F>> {
    let mut img_bytes = Vec::new();
    File::open(images_path)?.read_to_end(&mut img_bytes)?;
    let mut lbl_bytes = Vec::new();
    File::open(labels_path)?.read_to_end(&mut lbl_bytes)?;

    // magic numbers first: a wrong file kind beats a short file
    for (bytes, path, expected) in [
        (&img_bytes, images_path, IDX_IMAGES_MAGIC),
        (&lbl_bytes, labels_path, IDX_LABELS_MAGIC),
    ] {
        if bytes.len() < 4 {
            return Err(Error::Truncated {
                path: path.into(),
                expected: 4,
                found: bytes.len(),
            });
        }
        let magic = read_u32_be(bytes, 0);
        if magic != expected {
            return Err(Error::BadMagic {
                path: path.into(),
                expected,
                found: magic,
            });
        }
    }
    if img_bytes.len() < 16 {
        return Err(Error::Truncated {
            path: images_path.into(),
            expected: 16,
            found: img_bytes.len(),
        });
    }
    if lbl_bytes.len() < 8 {
        return Err(Error::Truncated {
            path: labels_path.into(),
            expected: 8,
            found: lbl_bytes.len(),
        });
    }
    let n_img = read_u32_be(&img_bytes, 4) as usize;
    let n_lbl = read_u32_be(&lbl_bytes, 4) as usize;
    if n_img != n_lbl {
        return Err(Error::CountMismatch {
            images: n_img,
            labels: n_lbl,
        });
    }
    let h = read_u32_be(&img_bytes, 8) as usize;
    let w = read_u32_be(&img_bytes, 12) as usize;
    let expected = 16 + n_img * h * w;
    if img_bytes.len() < expected {
        return Err(Error::Truncated {
            path: images_path.into(),
            expected,
            found: img_bytes.len(),
        });
    }
    if lbl_bytes.len() < 8 + n_lbl {
        return Err(Error::Truncated {
            path: labels_path.into(),
            expected: 8 + n_lbl,
            found: lbl_bytes.len(),
        });
    }
    // true division (not reciprocal multiplication) keeps the round trip
    // with `save_idx` bit-exact
    let denom = F::from_f64(255.0).unwrap();
    let payload = &img_bytes[16..expected];
    let mut images = Array4::zeros((n_img, 1, h, w));
    {
        let out = images.as_slice_mut().unwrap();
        for (o, &b) in out.iter_mut().zip(payload.iter()) {
            *o = F::from_u8(b).unwrap() / denom;
        }
    }
    let labels = lbl_bytes[8..8 + n_lbl].to_vec();
    Ok(Dataset {
        images,
        labels,
        name: images_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into()),
    })
}

/// Writes a dataset back to an IDX image/label pair. Pixels are quantized
/// with `round(p * 255)`, the exact inverse of the load scaling.
pub fn save_idx<F: Scalar>(dataset: &Dataset<F>, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (n, _c, h, w) = dataset.images.dim();
    let mut img = BufWriter::new(File::create(images_path)?);
    img.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    img.write_all(&(n as u32).to_be_bytes())?;
    img.write_all(&(h as u32).to_be_bytes())?;
    img.write_all(&(w as u32).to_be_bytes())?;
    let f255 = F::from_f64(255.0).unwrap();
    let bytes: Vec<u8> = dataset
        .images
        .as_standard_layout()
        .iter()
        .map(|&p| {
            (p.max(F::zero()).min(F::one()) * f255)
                .round()
                .to_u8()
                .unwrap()
        })
        .collect();
    img.write_all(&bytes)?;
    img.flush()?;

    let mut lbl = BufWriter::new(File::create(labels_path)?);
    lbl.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    lbl.write_all(&(n as u32).to_be_bytes())?;
    lbl.write_all(&dataset.labels)?;
    lbl.flush()?;
    Ok(())
}

/// Splits a dataset into target-train / distill / eval parts whose index
/// sets partition a seeded shuffle of `0..n`. Same spec, same split.
pub fn split_disjoint<F: Scalar>(
    dataset: &Dataset<F>,
    spec: &SplitSpec,
) -> Result<(Dataset<F>, Dataset<F>, Dataset<F>)> {
    let (ft, fd, fe) = spec.validate()?;
    let n = dataset.len();
    let n_t = (ft * n as f64).round() as usize;
    let n_d = (fd * n as f64).round() as usize;
    let n_e = (fe * n as f64).round() as usize;
    for (name, count) in [("target_train", n_t), ("distill", n_d), ("eval", n_e)] {
        if count == 0 {
            return Err(Error::EmptySplit {
                name: match name {
                    "target_train" => "target_train",
                    "distill" => "distill",
                    _ => "eval",
                },
            });
        }
    }
    if n_t + n_d + n_e > n {
        return Err(Error::BadSplitSpec(format!(
            "split sizes {n_t}+{n_d}+{n_e} exceed {n} instances"
        )));
    }
    let order = shuffled_indices(n, &mut seeded(spec.seed));
    let t_idx = &order[..n_t];
    let d_idx = &order[n_t..n_t + n_d];
    let e_idx = &order[n_t + n_d..n_t + n_d + n_e];
    Ok((
        dataset.subset(t_idx, &format!("{}/target_train", dataset.name)),
        dataset.subset(d_idx, &format!("{}/distill", dataset.name)),
        dataset.subset(e_idx, &format!("{}/eval", dataset.name)),
    ))
}

/// The split index sets themselves, for disjointness audits.
pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let (ft, fd, fe) = spec.validate()?;
    let n_t = (ft * n as f64).round() as usize;
    let n_d = (fd * n as f64).round() as usize;
    let n_e = (fe * n as f64).round() as usize;
    let order = shuffled_indices(n, &mut seeded(spec.seed));
    Ok((
        order[..n_t].to_vec(),
        order[n_t..n_t + n_d].to_vec(),
        order[n_t + n_d..n_t + n_d + n_e].to_vec(),
    ))
}

/// SHA-256 digest of a file, as printed by `data verify`.
pub fn file_sha256(path: &Path) -> Result<String> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dataset(n: usize) -> Dataset<f32> {
        let images = Array4::from_shape_fn((n, 1, 4, 4), |(i, _, r, c)| {
            ((i * 16 + r * 4 + c) % 256) as f32 / 255.0
        });
        let labels = (0..n).map(|i| (i % 10) as u8).collect();
        Dataset {
            images,
            labels,
            name: "tiny".into(),
        }
    }

    #[test]
    fn split_sizes_follow_fractions() {
        let d = tiny_dataset(10);
        let spec = SplitSpec::new(0.5, 0.3, 0.2, 1);
        let (a, b, c) = split_disjoint(&d, &spec).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (5, 3, 2));
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let spec = SplitSpec::new(0.4, 0.3, 0.3, 99);
        let (a1, b1, c1) = split_indices(50, &spec).unwrap();
        let (a2, b2, c2) = split_indices(50, &spec).unwrap();
        assert_eq!((&a1, &b1, &c1), (&a2, &b2, &c2));
        let mut all: Vec<usize> = a1.iter().chain(&b1).chain(&c1).copied().collect();
        let before = all.len();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), before, "splits share indices");
    }

    #[test]
    fn degenerate_fraction_is_empty_split() {
        let d = tiny_dataset(10);
        let spec = SplitSpec::new(0.999, 0.0005, 0.0005, 1);
        match split_disjoint(&d, &spec) {
            Err(Error::EmptySplit { .. }) => {}
            other => panic!("expected EmptySplit, got {other:?}"),
        }
    }

    #[test]
    fn idx_round_trip_is_bit_identical() {
        let d = tiny_dataset(7);
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("imgs");
        let lp = dir.path().join("lbls");
        save_idx(&d, &ip, &lp).unwrap();
        let d2: Dataset<f32> = load_mnist(&ip, &lp).unwrap();
        assert_eq!(d.labels, d2.labels);
        assert_eq!(d.images, d2.images);
        // and the bytes themselves survive another round
        let ip2 = dir.path().join("imgs2");
        let lp2 = dir.path().join("lbls2");
        save_idx(&d2, &ip2, &lp2).unwrap();
        assert_eq!(std::fs::read(&ip).unwrap(), std::fs::read(&ip2).unwrap());
        assert_eq!(std::fs::read(&lp).unwrap(), std::fs::read(&lp2).unwrap());
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("imgs");
        let lp = dir.path().join("lbls");
        let d = tiny_dataset(3);
        save_idx(&d, &ip, &lp).unwrap();
        // a labels file passed where images are expected
        match load_mnist::<f32>(&lp, &lp) {
            Err(Error::BadMagic { found, .. }) => assert_eq!(found, IDX_LABELS_MAGIC),
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("imgs");
        let lp = dir.path().join("lbls");
        save_idx(&tiny_dataset(3), &ip, &lp).unwrap();
        let mut bytes = std::fs::read(&ip).unwrap();
        bytes.truncate(bytes.len() - 5);
        std::fs::write(&ip, bytes).unwrap();
        match load_mnist::<f32>(&ip, &lp) {
            Err(Error::Truncated { .. }) => {}
            other => panic!("expected Truncated, got {other:?}"),
        }
    }
}
