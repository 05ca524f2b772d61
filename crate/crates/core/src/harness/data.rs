use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};
use crate::dp::seeded_stream;
use crate::tensor::Tensor;

/// Labelled feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(name: &str, features: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if !features.is_matrix() {
            return Err(HarnessError::Data("features must be a matrix".into()));
        }
        if features.rows() != labels.len() {
            return Err(HarnessError::Data(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(HarnessError::Data("dataset is empty".into()));
        }
        if classes < 2 {
            return Err(HarnessError::Data("need at least 2 classes".into()));
        }
        if let Some((row, l)) = labels.iter().enumerate().find(|(_, l)| **l >= classes) {
            return Err(HarnessError::Data(format!(
                "row {row}: label {l} out of range for {classes} classes"
            )));
        }
        Ok(Self {
            name: name.to_string(),
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn d_in(&self) -> usize {
        self.features.cols()
    }

    /// `δ = 1/(10N)`.
    pub fn default_delta(&self) -> f64 {
        crate::accountant::default_delta(self.len())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

/// Reads `f0,…,f{D-1},label` CSV.
pub fn load_csv(path: &Path, classes: usize) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))?;
    let headers = rdr
        .headers()
        .map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))?
        .clone();
    let width = headers.len();
    if width < 2 || headers.get(width - 1) != Some("label") {
        return Err(HarnessError::Data(format!(
            "{}: header must be f0,…,f{{D-1}},label",
            path.display()
        )));
    }
    for (i, h) in headers.iter().take(width - 1).enumerate() {
        if h != format!("f{i}") {
            return Err(HarnessError::Data(format!(
                "{}: header column {i} is `{h}`, expected `f{i}`",
                path.display()
            )));
        }
    }
    let d = width - 1;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        // header is line 1
        let line = k + 2;
        let rec = rec.map_err(|e| HarnessError::Data(format!("line {line}: {e}")))?;
        if rec.len() != width {
            return Err(HarnessError::Data(format!(
                "line {line}: expected {width} cells, found {}",
                rec.len()
            )));
        }
        for (j, cell) in rec.iter().take(d).enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| {
                HarnessError::Data(format!("line {line}: column f{j} is not a number: `{cell}`"))
            })?;
            if !v.is_finite() {
                return Err(HarnessError::Data(format!("line {line}: non-finite f{j}")));
            }
            data.push(v);
        }
        let cell = rec[d].trim();
        let label: usize = cell
            .parse()
            .map_err(|_| HarnessError::Data(format!("line {line}: bad label `{cell}`")))?;
        if label >= classes {
            return Err(HarnessError::Data(format!(
                "line {line}: label {label} out of range for {classes} classes"
            )));
        }
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(HarnessError::Data(format!("{}: no data rows", path.display())));
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let n = labels.len();
    Dataset::new(&name, Tensor::new(vec![n, d], data)?, labels, classes)
}

/// Writes a dataset as CSV. `f64` cells use the shortest round-trip form.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let io = |e: csv::Error| HarnessError::Data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    let d = ds.d_in();
    let mut header: Vec<String> = (0..d).map(|i| format!("f{i}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(io)?;
    for (i, l) in ds.labels.iter().enumerate() {
        let mut row: Vec<String> = ds.features.row(i).iter().map(|v| format!("{v:?}")).collect();
        row.push(l.to_string());
        w.write_record(&row).map_err(io)?;
    }
    w.flush()
        .map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))
}

/// Gaussian-cluster classification data.
///
/// Each class owns `clusters_per_class` centres `separation·u` with
/// `u ~ N(0, I/D)`; points are centre plus unit Gaussian noise. Centres
/// depend only on `seed`, so splits drawn with different `split` tags come
/// from the same distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub d_in: usize,
    pub separation: f64,
    #[serde(default = "one")]
    pub clusters_per_class: usize,
    pub seed: u64,
}

const SHIFT_STREAM: u64 = 1 << 32;

fn one() -> usize {
    1
}

impl SyntheticSpec {
    fn centres(&self, shift: f64) -> Vec<Vec<f64>> {
        let mut rng = seeded_stream(self.seed, 0);
        let mut jitter = seeded_stream(self.seed, SHIFT_STREAM);
        let scale = self.separation / (self.d_in as f64).sqrt();
        (0..self.classes * self.clusters_per_class)
            .map(|_| {
                (0..self.d_in)
                    .map(|_| {
                        let base = scale * rng.sample::<f64, _>(StandardNormal);
                        let dz: f64 = jitter.sample(StandardNormal);
                        if shift > 0.0 {
                            base + shift * scale * dz
                        } else {
                            base
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// Draws `n` points with uniformly random labels.
    pub fn sample(&self, name: &str, n: usize, split: u64) -> Result<Dataset> {
        self.sample_shifted(name, n, split, 0.0)
    }

    /// Like [`sample`](Self::sample), but every cluster centre is moved by
    /// `shift · separation · N(0, I/D)`. The move is the same for every
    /// split drawn with the same spec.
    pub fn sample_shifted(&self, name: &str, n: usize, split: u64, shift: f64) -> Result<Dataset> {
        if !(shift >= 0.0 && shift.is_finite()) {
            return Err(HarnessError::Data(format!("shift must be finite and ≥ 0, got {shift}")));
        }
        if self.classes < 2 {
            return Err(HarnessError::Data("need at least 2 classes".into()));
        }
        if self.clusters_per_class == 0 || self.d_in == 0 {
            return Err(HarnessError::Data("need ≥ 1 cluster and ≥ 1 feature".into()));
        }
        let centres = self.centres(shift);
        let mut rng = seeded_stream(self.seed, 1 + split);
        let mut data = Vec::with_capacity(n * self.d_in);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let label = rng.random_range(0..self.classes);
            let cluster = rng.random_range(0..self.clusters_per_class);
            let c = &centres[label * self.clusters_per_class + cluster];
            for m in c {
                data.push(m + rng.sample::<f64, _>(StandardNormal));
            }
            labels.push(label);
        }
        Dataset::new(name, Tensor::new(vec![n, self.d_in], data)?, labels, self.classes)
    }
}

/// Single-cluster synthetic dataset.
pub fn make_synthetic(classes: usize, n: usize, d_in: usize, seed: u64, separation: f64) -> Result<Dataset> {
    SyntheticSpec {
        classes,
        d_in,
        separation,
        clusters_per_class: 1,
        seed,
    }
    .sample("synthetic", n, 0)
}
