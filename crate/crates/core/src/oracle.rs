//! Ground-truth surface, frozen noisy labels and train/pool/test splits.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::csvio::{self, Provenance};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::stats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    pub grid_size: usize,
    pub noise_sigma: f64,
    /// Fraction of grid points labelled positive (the top tail).
    pub label_quantile: f64,
    pub train_size: usize,
    pub test_size: usize,
    /// Dataset seed; derived from the master seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            grid_size: 30,
            noise_sigma: 0.1,
            label_quantile: 0.01,
            train_size: 100,
            test_size: 100,
            seed: None,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 2 {
            return Err(Error::Config("oracle.grid_size must be at least 2".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("oracle.noise_sigma must be finite and >= 0".into()));
        }
        if !(self.label_quantile > 0.0 && self.label_quantile < 1.0) {
            return Err(Error::Config("oracle.label_quantile must be in (0, 1)".into()));
        }
        if self.train_size == 0 || self.train_size + self.test_size > self.grid_size * self.grid_size {
            return Err(Error::Config(format!(
                "oracle: train_size {} + test_size {} does not fit a {}x{} grid",
                self.train_size, self.test_size, self.grid_size, self.grid_size
            )));
        }
        Ok(())
    }
}

/// Noise-free surface: a sinusoidal ripple, a weak bilinear tilt and a
/// Gaussian bump centred at (70, 30) with width 20.
pub fn ground_truth(i: f64, j: f64) -> f64 {
    let ripple = (2.0 * PI * i / 50.0).sin() * (2.0 * PI * j / 50.0).cos();
    let tilt = i * j / 10_000.0;
    let bump = (-((i - 70.0).powi(2) + (j - 30.0).powi(2)) / (2.0 * 20.0 * 20.0)).exp();
    ripple + tilt + bump
}

pub fn noisy_value<R: rand::Rng + ?Sized>(i: f64, j: f64, sigma: f64, rng: &mut R) -> f64 {
    if sigma == 0.0 {
        return ground_truth(i, j);
    }
    let normal = Normal::new(0.0, sigma).expect("sigma checked finite and non-negative");
    ground_truth(i, j) + normal.sample(rng)
}

/// Labelling cut: the `(1 - q)` quantile, so roughly a fraction `q` of the
/// values land strictly above it.
pub fn compute_threshold(values: &[f64], q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidArgument(format!("label quantile {q} not in (0, 1)")));
    }
    stats::quantile(values, 1.0 - q)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    pub fn class(self) -> usize {
        match self {
            Label::Negative => 0,
            Label::Positive => 1,
        }
    }

    pub fn from_class(c: usize) -> Self {
        if c == 1 {
            Label::Positive
        } else {
            Label::Negative
        }
    }
}

pub fn label(value: f64, threshold: f64) -> Label {
    if value > threshold {
        Label::Positive
    } else {
        Label::Negative
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Pool,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Pool => "pool",
            Split::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "pool" => Some(Split::Pool),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

pub type Point = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entry {
    pub point: Point,
    pub value: f64,
    pub label: Label,
    pub split: Split,
}

/// Every grid point with its frozen noisy value, label and current split.
/// Entries are stored in `(i, j)` lexicographic order.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    size: usize,
    threshold: f64,
    entries: Vec<Entry>,
}

impl LabeledDataset {
    /// Draws the noise (once per point), fixes the threshold on all noisy
    /// values, then samples the splits.
    pub fn build(cfg: &OracleConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.grid_size;
        let mut noise_rng = RngStream::new(seed, 0);
        let mut entries = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                let value = noisy_value(i as f64, j as f64, cfg.noise_sigma, &mut noise_rng);
                entries.push(Entry {
                    point: (i, j),
                    value,
                    label: Label::Negative,
                    split: Split::Pool,
                });
            }
        }
        let values: Vec<f64> = entries.iter().map(|e| e.value).collect();
        let threshold = compute_threshold(&values, cfg.label_quantile)?;
        for e in &mut entries {
            e.label = label(e.value, threshold);
        }
        let mut ds = Self {
            size: n,
            threshold,
            entries,
        };
        ds.make_splits(cfg.train_size, cfg.test_size, &mut RngStream::new(seed, 1))?;
        Ok(ds)
    }

    /// Uniform disjoint train and test samples; everything else is pool.
    pub fn make_splits<R: rand::Rng + ?Sized>(&mut self, train: usize, test: usize, rng: &mut R) -> Result<()> {
        if train + test > self.entries.len() {
            return Err(Error::InvalidArgument(format!(
                "grid of {} points too small for {train} train + {test} test",
                self.entries.len()
            )));
        }
        let mut order: Vec<usize> = (0..self.entries.len()).collect();
        order.shuffle(rng);
        for e in &mut self.entries {
            e.split = Split::Pool;
        }
        for &k in &order[..train] {
            self.entries[k].split = Split::Train;
        }
        for &k in &order[train..train + test] {
            self.entries[k].split = Split::Test;
        }
        Ok(())
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    fn index(&self, (i, j): Point) -> Option<usize> {
        (i < self.size && j < self.size).then_some(i * self.size + j)
    }

    pub fn entry(&self, p: Point) -> Option<&Entry> {
        self.index(p).map(|k| &self.entries[k])
    }

    pub fn points(&self, split: Split) -> Vec<Point> {
        self.entries.iter().filter(|e| e.split == split).map(|e| e.point).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }

    pub fn positives(&self) -> usize {
        self.entries.iter().filter(|e| e.label == Label::Positive).count()
    }

    /// Oracle query: reveals the frozen label of a pool point and moves it
    /// into the training split.
    pub fn acquire(&mut self, p: Point) -> Result<Label> {
        let k = self
            .index(p)
            .ok_or_else(|| Error::InvalidArgument(format!("point {p:?} outside the grid")))?;
        let e = &mut self.entries[k];
        if e.split != Split::Pool {
            return Err(Error::InvalidArgument(format!(
                "point {p:?} is in the {} split, not the pool",
                e.split.as_str()
            )));
        }
        e.split = Split::Train;
        Ok(e.label)
    }

    pub fn write_csv(&self, path: &Path, prov: &Provenance) -> Result<()> {
        let mut w = csvio::create(path, prov)?;
        w.write_record(["i", "j", "value", "label", "split"])?;
        for e in &self.entries {
            w.write_record([
                e.point.0.to_string(),
                e.point.1.to_string(),
                csvio::num(e.value),
                e.label.class().to_string(),
                e.split.as_str().to_owned(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Reads a file written by [`write_csv`](Self::write_csv); the threshold
    /// is supplied by the caller since the file stores labels only.
    pub fn read_csv(path: &Path, threshold: f64) -> Result<Self> {
        let mut r = csvio::open(path)?;
        let mut entries = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let field = |k: usize| rec.get(k).ok_or_else(|| Error::InvalidArgument(format!("row has no column {k}")));
            let parse_usize = |k: usize| -> Result<usize> {
                field(k)?
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad integer in column {k}")))
            };
            let value: f64 = field(2)?.parse().map_err(|_| Error::InvalidArgument("bad value".into()))?;
            let split = Split::parse(field(4)?).ok_or_else(|| Error::InvalidArgument("bad split".into()))?;
            entries.push(Entry {
                point: (parse_usize(0)?, parse_usize(1)?),
                value,
                label: Label::from_class(parse_usize(3)?),
                split,
            });
        }
        let size = (entries.len() as f64).sqrt().round() as usize;
        if size * size != entries.len() {
            return Err(Error::InvalidArgument("dataset is not a square grid".into()));
        }
        entries.sort_by_key(|e| e.point);
        Ok(Self { size, threshold, entries })
    }
}
