//! Datasets: the MNIST IDX container and 2-D synthetic stand-ins.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labelled inputs in `[0,1]^d`, stored flat.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    inputs: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(input_shape: Vec<usize>, num_classes: usize, inputs: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        let d: usize = input_shape.iter().product();
        if d == 0 || inputs.len() != d * labels.len() {
            return Err(Error::invalid(format!(
                "dataset holds {} values for {} labels of dimension {d}",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!("label {bad} outside {num_classes} classes")));
        }
        crate::model::check_unit_box(&inputs)?;
        Ok(Self {
            input_shape,
            num_classes,
            inputs,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.inputs[i * d..(i + 1) * d]
    }

    pub fn tensor(&self, i: usize) -> Tensor {
        Tensor::from_vec(self.input(i).to_vec()).expect("dataset inputs are finite")
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// First `n` samples (or all, if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            input_shape: self.input_shape.clone(),
            num_classes: self.num_classes,
            inputs: self.inputs[..n * self.dim()].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

fn read_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes.get(at..at + 4).map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Reads an MNIST-style pair of IDX files (`idx3` images, `idx1` labels).
/// Pixels are scaled to `[0,1]`.
pub fn load_mnist_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images.as_ref(), labels.as_ref());
    let ib = std::fs::read(ip).map_err(|e| Error::io(ip, e))?;
    let lb = std::fs::read(lp).map_err(|e| Error::io(lp, e))?;

    match read_u32(&ib, 0) {
        Some(IDX_IMAGES_MAGIC) => {}
        Some(m) => return Err(format_err(ip, format!("bad magic {m:#010x}"))),
        None => return Err(format_err(ip, "truncated header")),
    }
    match read_u32(&lb, 0) {
        Some(IDX_LABELS_MAGIC) => {}
        Some(m) => return Err(format_err(lp, format!("bad magic {m:#010x}"))),
        None => return Err(format_err(lp, "truncated header")),
    }
    let (count, rows, cols) = match (read_u32(&ib, 4), read_u32(&ib, 8), read_u32(&ib, 12)) {
        (Some(c), Some(r), Some(k)) => (c as usize, r as usize, k as usize),
        _ => return Err(format_err(ip, "truncated header")),
    };
    let label_count = read_u32(&lb, 4).ok_or_else(|| format_err(lp, "truncated header"))? as usize;
    if count != label_count {
        return Err(format_err(ip, format!("{count} images but {label_count} labels")));
    }
    let pixels = count * rows * cols;
    if ib.len() < 16 + pixels {
        return Err(format_err(ip, format!("expected {pixels} pixel bytes, found {}", ib.len().saturating_sub(16))));
    }
    if lb.len() < 8 + count {
        return Err(format_err(lp, format!("expected {count} labels, found {}", lb.len().saturating_sub(8))));
    }
    let inputs = ib[16..16 + pixels].iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<usize> = lb[8..8 + count].iter().map(|&l| l as usize).collect();
    if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
        return Err(format_err(lp, format!("label {bad} outside 0-9")));
    }
    Dataset::new(vec![1, rows, cols], 10, inputs, labels)
}

/// Writes a dataset of single-channel images back out as an IDX pair.
pub fn write_mnist_idx(ds: &Dataset, images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<()> {
    let (rows, cols) = match ds.input_shape[..] {
        [1, r, c] => (r, c),
        _ => return Err(Error::invalid("IDX export needs [1, rows, cols] inputs")),
    };
    let mut ib = Vec::with_capacity(16 + ds.inputs.len());
    for v in [IDX_IMAGES_MAGIC, ds.len() as u32, rows as u32, cols as u32] {
        ib.extend_from_slice(&v.to_be_bytes());
    }
    ib.extend(ds.inputs.iter().map(|v| (v * 255.0).round() as u8));
    let mut lb = Vec::with_capacity(8 + ds.len());
    for v in [IDX_LABELS_MAGIC, ds.len() as u32] {
        lb.extend_from_slice(&v.to_be_bytes());
    }
    lb.extend(ds.labels.iter().map(|&l| l as u8));
    let (ip, lp) = (images.as_ref(), labels.as_ref());
    std::fs::write(ip, ib).map_err(|e| Error::io(ip, e))?;
    std::fs::write(lp, lb).map_err(|e| Error::io(lp, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Two uniform disks of radius 0.15 centred at (0.25,0.25) and (0.75,0.75).
    Blobs,
    /// Interleaved half-moons squeezed into the unit square.
    Moons,
}

impl std::str::FromStr for SyntheticKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(Self::Blobs),
            "moons" => Ok(Self::Moons),
            other => Err(Error::invalid(format!("unknown synthetic dataset {other:?}"))),
        }
    }
}

/// Two-class 2-D dataset in `[0,1]²`, alternating labels (so classes are
/// balanced to within one sample).
pub fn make_synthetic(kind: SyntheticKind, n: usize, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::invalid("synthetic datasets need at least two samples"));
    }
    let mut rng = rng::stream(seed, &[0x73796e]);
    let mut inputs = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let (x, y) = match kind {
            SyntheticKind::Blobs => {
                let c = if label == 0 { 0.25 } else { 0.75 };
                let r = 0.15 * rng.random::<f64>().sqrt();
                let th = rng.random::<f64>() * std::f64::consts::TAU;
                (c + r * th.cos(), c + r * th.sin())
            }
            SyntheticKind::Moons => {
                let th = rng.random::<f64>() * std::f64::consts::PI;
                let (mx, my) = if label == 0 {
                    (th.cos(), th.sin())
                } else {
                    (1.0 - th.cos(), 0.5 - th.sin())
                };
                let nx: f64 = StandardNormal.sample(&mut rng);
                let ny: f64 = StandardNormal.sample(&mut rng);
                // raw moons span x ∈ [-1, 2], y ∈ [-0.5, 1]
                let x = (mx + 0.05 * nx + 1.25) / 3.5;
                let y = (my + 0.05 * ny + 0.75) / 2.0;
                (x.clamp(0.0, 1.0), y.clamp(0.0, 1.0))
            }
        };
        inputs.push(x);
        inputs.push(y);
        labels.push(label);
    }
    Dataset::new(vec![2], 2, inputs, labels)
}
