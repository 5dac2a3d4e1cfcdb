//! Dataset sources: synthetic generators and delimited text files.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::rng::{self, domain};

fn default_delimiter() -> char {
    ','
}

fn default_test_fraction() -> f64 {
    0.2
}

fn default_std() -> f64 {
    1.0
}

fn default_spread() -> f64 {
    2.0
}

fn default_noise() -> f64 {
    0.2
}

/// Where the target's train and test sets come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSource {
    /// Isotropic Gaussian clusters, one per class. Overlap grows with
    /// `cluster_std / center_spread`.
    Blobs {
        classes: usize,
        features: usize,
        n_train: usize,
        n_test: usize,
        #[serde(default = "default_std")]
        cluster_std: f64,
        #[serde(default = "default_spread")]
        center_spread: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Interleaved 2-D spirals, one arm per class.
    Spirals {
        classes: usize,
        n_train: usize,
        n_test: usize,
        #[serde(default = "default_noise")]
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Rows of float features followed by an integer label. A header row is
    /// detected and skipped. Without `test_path`, a seeded share of rows is
    /// held out as the test set.
    Delimited {
        path: PathBuf,
        #[serde(default)]
        test_path: Option<PathBuf>,
        #[serde(default = "default_delimiter")]
        delimiter: char,
        #[serde(default)]
        num_classes: Option<usize>,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
        #[serde(default)]
        seed: u64,
    },
}

fn balanced_labels(n: usize, classes: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(rng);
    labels
}

fn blobs(classes: usize, features: usize, n_train: usize, n_test: usize, std: f64, spread: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if classes < 2 || features == 0 || !(std > 0.0) || !(spread > 0.0) {
        return Err(Error::Dataset("blobs need >= 2 classes, >= 1 feature and positive scales".into()));
    }
    let mut r = rng::stream(seed, &[domain::DATASET, 1]);
    let center = Normal::new(0.0, spread).expect("positive spread");
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..features).map(|_| center.sample(&mut r)).collect())
        .collect();
    let noise = Normal::new(0.0, std).expect("positive std");
    let mut make = |n: usize| {
        let labels = balanced_labels(n, classes, &mut r);
        let mut x = Vec::with_capacity(n * features);
        for &y in &labels {
            x.extend(centers[y].iter().map(|&c| c + noise.sample(&mut r)));
        }
        Dataset::new(Tensor::new(vec![n, features], x)?, labels, classes)
    };
    Ok((make(n_train)?, make(n_test)?))
}

fn spirals(classes: usize, n_train: usize, n_test: usize, noise: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if classes < 2 || !(noise >= 0.0) {
        return Err(Error::Dataset("spirals need >= 2 classes and noise >= 0".into()));
    }
    let mut r = rng::stream(seed, &[domain::DATASET, 2]);
    let mut make = |n: usize| {
        let labels = balanced_labels(n, classes, &mut r);
        let mut x = Vec::with_capacity(2 * n);
        for &y in &labels {
            let t: f64 = r.random_range(0.05..1.0);
            let angle = 3.0 * std::f64::consts::PI * t + 2.0 * std::f64::consts::PI * y as f64 / classes as f64;
            x.push(t * angle.cos() + noise * (r.random::<f64>() - 0.5));
            x.push(t * angle.sin() + noise * (r.random::<f64>() - 0.5));
        }
        Dataset::new(Tensor::new(vec![n, 2], x)?, labels, classes)
    };
    Ok((make(n_train)?, make(n_test)?))
}

struct Table {
    features: Vec<f64>,
    labels: Vec<usize>,
    width: usize,
}

/// Parses delimited rows; the first row is a header when any of its cells
/// fails to parse as a number.
pub fn parse_delimited(text: &str, delimiter: char) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).peekable();
    if let Some((_, first)) = lines.peek() {
        if first.split(delimiter).any(|c| c.trim().parse::<f64>().is_err()) {
            lines.next();
        }
    }
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (i, line) in lines {
        let row_no = i + 1;
        let cells: Vec<&str> = line.split(delimiter).map(str::trim).collect();
        if cells.len() < 2 {
            return Err(Error::Dataset(format!("row {row_no}: need at least one feature and a label")));
        }
        if *width.get_or_insert(cells.len()) != cells.len() {
            return Err(Error::Dataset(format!(
                "row {row_no}: expected {} columns, found {}",
                width.unwrap(),
                cells.len()
            )));
        }
        let (label, feats) = cells.split_last().expect("at least two cells");
        let mut row = Vec::with_capacity(feats.len());
        for (j, cell) in feats.iter().enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| Error::Dataset(format!("row {row_no}, column {}: `{cell}` is not a number", j + 1)))?;
            if !v.is_finite() {
                return Err(Error::Dataset(format!("row {row_no}, column {}: non-finite value", j + 1)));
            }
            row.push(v);
        }
        let y: usize = label.parse().map_err(|_| {
            Error::Dataset(format!(
                "row {row_no}, column {}: label `{label}` is not a non-negative integer",
                cells.len()
            ))
        })?;
        rows.push(row);
        labels.push(y);
    }
    if rows.is_empty() {
        return Err(Error::Dataset("no data rows".into()));
    }
    Ok((rows, labels))
}

fn read_table(path: &std::path::Path, delimiter: char) -> Result<Table> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", path.display())))?;
    let (rows, labels) = parse_delimited(&text, delimiter)?;
    let width = rows[0].len();
    Ok(Table {
        features: rows.into_iter().flatten().collect(),
        labels,
        width,
    })
}

fn to_dataset(t: Table, classes: usize) -> Result<Dataset> {
    let n = t.labels.len();
    Dataset::new(Tensor::new(vec![n, t.width], t.features)?, t.labels, classes)
}

/// Rescales every feature column to zero mean and unit variance using the
/// train set's statistics; constant columns are only centred.
pub fn standardize(train: &mut Dataset, test: &mut Dataset) -> Result<()> {
    let w = train.features.row_len();
    if test.features.row_len() != w {
        return Err(Error::Dataset("train and test feature widths differ".into()));
    }
    let n = train.len() as f64;
    let mut mean = vec![0.0; w];
    for r in 0..train.len() {
        for (m, v) in mean.iter_mut().zip(train.features.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; w];
    for r in 0..train.len() {
        for ((s, v), m) in var.iter_mut().zip(train.features.row(r)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let scale: Vec<f64> = var
        .iter()
        .map(|s| {
            let sd = (s / n).sqrt();
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    for set in [train, test] {
        for row in set.features.data_mut().chunks_mut(w) {
            for ((v, m), s) in row.iter_mut().zip(&mean).zip(&scale) {
                *v = (*v - m) / s;
            }
        }
    }
    Ok(())
}

/// Loads or generates the source, then standardizes with train statistics.
pub fn load_dataset(source: &DatasetSource) -> Result<(Dataset, Dataset)> {
    let (mut train, mut test) = match source {
        DatasetSource::Blobs {
            classes,
            features,
            n_train,
            n_test,
            cluster_std,
            center_spread,
            seed,
        } => blobs(*classes, *features, *n_train, *n_test, *cluster_std, *center_spread, *seed)?,
        DatasetSource::Spirals {
            classes,
            n_train,
            n_test,
            noise,
            seed,
        } => spirals(*classes, *n_train, *n_test, *noise, *seed)?,
        DatasetSource::Delimited {
            path,
            test_path,
            delimiter,
            num_classes,
            test_fraction,
            seed,
        } => {
            let table = read_table(path, *delimiter)?;
            let tables = match test_path {
                Some(p) => (table, read_table(p, *delimiter)?),
                None => {
                    if !(*test_fraction > 0.0 && *test_fraction < 1.0) {
                        return Err(Error::Dataset("test_fraction must lie in (0, 1)".into()));
                    }
                    let n = table.labels.len();
                    let n_test = (n as f64 * test_fraction).round() as usize;
                    let mut order: Vec<usize> = (0..n).collect();
                    order.shuffle(&mut rng::stream(*seed, &[domain::DATASET, 3]));
                    let pick = |idx: &[usize]| Table {
                        features: idx
                            .iter()
                            .flat_map(|&i| table.features[i * table.width..(i + 1) * table.width].iter().copied())
                            .collect(),
                        labels: idx.iter().map(|&i| table.labels[i]).collect(),
                        width: table.width,
                    };
                    (pick(&order[n_test..]), pick(&order[..n_test]))
                }
            };
            let seen = tables.0.labels.iter().chain(&tables.1.labels).max().copied().unwrap_or(0) + 1;
            let classes = num_classes.unwrap_or(seen.max(2));
            if tables.0.width != tables.1.width {
                return Err(Error::Dataset("train and test files have different widths".into()));
            }
            (to_dataset(tables.0, classes)?, to_dataset(tables.1, classes)?)
        }
    };
    if train.is_empty() || test.is_empty() {
        return Err(Error::Dataset("empty split".into()));
    }
    standardize(&mut train, &mut test)?;
    Ok((train, test))
}

/// Reshapes flat feature rows to the per-sample shape a model expects.
pub fn shape_features(data: &mut Dataset, sample_shape: &[usize]) -> Result<()> {
    if data.sample_shape() == sample_shape {
        return Ok(());
    }
    let mut shape = vec![data.len()];
    shape.extend_from_slice(sample_shape);
    let features = std::mem::replace(&mut data.features, Tensor::zeros(&[1]));
    data.features = features.reshape(shape)?;
    Ok(())
}
