//! Dataset ingestion (IDX images, labelled CSV), synthetic generators,
//! normalisation, and minibatching.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng, Vector};

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Targets {
    Classes { labels: Vec<usize>, num_classes: usize },
    Real(Matrix),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes { labels, .. } => labels.len(),
            Targets::Real(m) => m.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Subset in the given index order.
    pub fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Classes { labels, num_classes } => Targets::Classes {
                labels: idx.iter().map(|&i| labels[i]).collect(),
                num_classes: *num_classes,
            },
            Targets::Real(m) => Targets::Real(Matrix::from_fn(idx.len(), m.cols(), |i, j| {
                m.get(idx[i], j)
            })),
        }
    }

    pub fn class_labels(&self) -> Option<&[usize]> {
        match self {
            Targets::Classes { labels, .. } => Some(labels),
            Targets::Real(_) => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Matrix,
    pub targets: Targets,
    pub split: String,
}

impl Dataset {
    pub fn new(inputs: Matrix, targets: Targets, split: &str) -> Result<Self> {
        if inputs.rows() != targets.len() {
            return Err(Error::shape(
                "dataset",
                inputs.shape(),
                (targets.len(), inputs.cols()),
            ));
        }
        if !inputs.all_finite() {
            return Err(Error::Config {
                field: "dataset.inputs".into(),
                reason: "contains non-finite values".into(),
            });
        }
        if let Targets::Classes { labels, num_classes } = &targets {
            for &y in labels {
                if y >= *num_classes {
                    return Err(Error::TargetOutOfRange {
                        class: y,
                        num_classes: *num_classes,
                    });
                }
            }
        }
        Ok(Dataset {
            inputs,
            targets,
            split: split.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_features(&self) -> usize {
        self.inputs.cols()
    }

    pub fn num_classes(&self) -> Option<usize> {
        match &self.targets {
            Targets::Classes { num_classes, .. } => Some(*num_classes),
            Targets::Real(_) => None,
        }
    }

    /// First `n` examples (or all, if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        Dataset {
            inputs: Matrix::from_fn(idx.len(), self.num_features(), |i, j| {
                self.inputs.get(idx[i], j)
            }),
            targets: self.targets.select(&idx),
            split: self.split.clone(),
        }
    }
}

/// Per-feature affine normalisation computed from a dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vector,
    pub std: Vector,
}

impl Normalizer {
    pub fn fit(ds: &Dataset) -> Normalizer {
        let (n, d) = ds.inputs.shape();
        let mut mean = Vector::zeros(d);
        let mut std = Vector::zeros(d);
        for j in 0..d {
            let mut s = 0.0;
            for i in 0..n {
                s += ds.inputs.get(i, j);
            }
            mean[j] = s / n as f64;
            let mut v = 0.0;
            for i in 0..n {
                let c = ds.inputs.get(i, j) - mean[j];
                v += c * c;
            }
            // Constant features pass through unscaled.
            std[j] = (v / n as f64).sqrt().max(1e-12);
        }
        Normalizer { mean, std }
    }

    pub fn normalise(&self, x: &Matrix) -> Matrix {
        Matrix::from_fn(x.rows(), x.cols(), |i, j| {
            (x.get(i, j) - self.mean[j]) / self.std[j]
        })
    }

    pub fn denormalise(&self, x: &Matrix) -> Matrix {
        Matrix::from_fn(x.rows(), x.cols(), |i, j| {
            x.get(i, j) * self.std[j] + self.mean[j]
        })
    }
}

fn read_u32_be(bytes: &[u8], offset: usize, path: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Idx {
            path: path.to_string(),
            reason: format!("truncated header: need {end} bytes, have {}", bytes.len()),
        });
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

/// Loads an IDX image/label file pair. Pixels are scaled to [0, 1].
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_name = images_path.display().to_string();
    let lbl_name = labels_path.display().to_string();
    let img = std::fs::read(images_path).map_err(|e| Error::io(img_name.clone(), e))?;
    let lbl = std::fs::read(labels_path).map_err(|e| Error::io(lbl_name.clone(), e))?;

    let magic = read_u32_be(&img, 0, &img_name)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Idx {
            path: img_name,
            reason: format!("expected magic {IDX_IMAGE_MAGIC:#010x}, found {magic:#010x}"),
        });
    }
    let n = read_u32_be(&img, 4, &img_name)? as usize;
    let rows = read_u32_be(&img, 8, &img_name)? as usize;
    let cols = read_u32_be(&img, 12, &img_name)? as usize;
    let features = rows * cols;
    let expected = 16 + n * features;
    if img.len() < expected {
        return Err(Error::Idx {
            path: img_name,
            reason: format!("truncated: need {expected} bytes, have {}", img.len()),
        });
    }

    let magic = read_u32_be(&lbl, 0, &lbl_name)?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::Idx {
            path: lbl_name,
            reason: format!("expected magic {IDX_LABEL_MAGIC:#010x}, found {magic:#010x}"),
        });
    }
    let n_lbl = read_u32_be(&lbl, 4, &lbl_name)? as usize;
    if n_lbl != n {
        return Err(Error::Idx {
            path: lbl_name,
            reason: format!("label count {n_lbl} does not match image count {n}"),
        });
    }
    if lbl.len() < 8 + n {
        return Err(Error::Idx {
            path: lbl_name,
            reason: format!("truncated: need {} bytes, have {}", 8 + n, lbl.len()),
        });
    }

    let inputs = Matrix::from_fn(n, features, |i, j| img[16 + i * features + j] as f64 / 255.0);
    let labels: Vec<usize> = lbl[8..8 + n].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(1, |&m| m + 1).max(10);
    Dataset::new(inputs, Targets::Classes { labels, num_classes }, "train")
}

/// Two interleaved unit semicircles offset by (1, -0.5), with isotropic
/// Gaussian noise. Balanced labels, class 0 first.
pub fn gen_two_moons(n: usize, noise: f64, rng: &mut Rng) -> Dataset {
    assert!(n % 2 == 0, "two-moons size must be even");
    let half = n / 2;
    let mut inputs = Matrix::zeros(n, 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..half {
        let t = std::f64::consts::PI * i as f64 / (half.max(2) - 1) as f64;
        inputs.set(i, 0, t.cos() + noise * rng.next_normal());
        inputs.set(i, 1, t.sin() + noise * rng.next_normal());
        labels.push(0);
    }
    for i in 0..half {
        let t = std::f64::consts::PI * i as f64 / (half.max(2) - 1) as f64;
        inputs.set(half + i, 0, 1.0 - t.cos() + noise * rng.next_normal());
        inputs.set(half + i, 1, -0.5 - t.sin() + noise * rng.next_normal());
        labels.push(1);
    }
    Dataset::new(
        inputs,
        Targets::Classes {
            labels,
            num_classes: 2,
        },
        "train",
    )
    .expect("construction is valid")
}

/// Synthetic 10-class image-like dataset: each class is a fixed smooth
/// template over an 8x8 grid, observed with additive Gaussian noise and
/// clamped to [0, 1]. Stands in for a digit subset.
pub fn gen_synthetic_images(n: usize, noise: f64, rng: &mut Rng) -> Dataset {
    let side = 8;
    let features = side * side;
    let num_classes = 10;
    // Deterministic class templates independent of the noise stream.
    let mut tmpl_rng = Rng::new(0x5eed_7e3a);
    let templates: Vec<Vec<f64>> = (0..num_classes)
        .map(|c| {
            let cx = 1.5 + 5.0 * tmpl_rng.next_f64();
            let cy = 1.5 + 5.0 * tmpl_rng.next_f64();
            let fx = 0.5 + tmpl_rng.next_f64();
            let fy = 0.5 + tmpl_rng.next_f64();
            let phase = c as f64 * std::f64::consts::PI / 5.0;
            (0..features)
                .map(|p| {
                    let (x, y) = ((p % side) as f64, (p / side) as f64);
                    let blob = (-((x - cx).powi(2) + (y - cy).powi(2)) / 6.0).exp();
                    let wave = 0.25 * ((fx * x + fy * y) + phase).sin();
                    (0.15 + 0.7 * blob + wave).clamp(0.0, 1.0)
                })
                .collect()
        })
        .collect();
    let mut inputs = Matrix::zeros(n, features);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % num_classes;
        for p in 0..features {
            let v = templates[c][p] + noise * rng.next_normal();
            inputs.set(i, p, v.clamp(0.0, 1.0));
        }
        labels.push(c);
    }
    Dataset::new(
        inputs,
        Targets::Classes {
            labels,
            num_classes,
        },
        "train",
    )
    .expect("construction is valid")
}

/// Labelled CSV: header row, feature columns, last column = integer class.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let name = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(name.clone(), e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Idx {
        path: name.clone(),
        reason: "empty file".into(),
    })?;
    let n_cols = header.split(',').count();
    if n_cols < 2 {
        return Err(Error::Idx {
            path: name,
            reason: "need at least one feature column and a label column".into(),
        });
    }
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != n_cols {
            return Err(Error::Idx {
                path: name,
                reason: format!("row {}: expected {n_cols} columns, found {}", i + 2, fields.len()),
            });
        }
        for f in &fields[..n_cols - 1] {
            let v: f64 = f.trim().parse().map_err(|_| Error::Idx {
                path: name.clone(),
                reason: format!("row {}: unparseable feature '{f}'", i + 2),
            })?;
            rows.push(v);
        }
        let y: usize = fields[n_cols - 1].trim().parse().map_err(|_| Error::Idx {
            path: name.clone(),
            reason: format!("row {}: unparseable label", i + 2),
        })?;
        labels.push(y);
    }
    let n = labels.len();
    let num_classes = labels.iter().max().map_or(1, |&m| m + 1);
    let inputs = Matrix::from_vec(n, n_cols - 1, rows)?;
    Dataset::new(inputs, Targets::Classes { labels, num_classes }, "train")
}

/// Epoch partition into minibatches; every example appears exactly once and
/// the final batch may be short.
pub fn batches(
    ds: &Dataset,
    batch_size: usize,
    rng: &mut Rng,
    shuffle: bool,
) -> Vec<(Matrix, Targets)> {
    assert!(batch_size >= 1);
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    if shuffle {
        rng.shuffle(&mut idx);
    }
    idx.chunks(batch_size)
        .map(|chunk| {
            let x = Matrix::from_fn(chunk.len(), ds.num_features(), |i, j| {
                ds.inputs.get(chunk[i], j)
            });
            (x, ds.targets.select(chunk))
        })
        .collect()
}
