//! MC-dropout classifier over latent codes, the BALD score, within-class
//! mixup and F1.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    cross_entropy, read_weights, softmax, write_weights, Activation, AdamConfig, AdamState, Mode, Network, NetworkSpec, Tensor,
    WeightSection,
};
use crate::oracle::Label;
use crate::rng::RngStream;

pub const CLASSES: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixupConfig {
    pub enabled: bool,
    /// Target minority:majority ratio after augmentation.
    pub ratio: f64,
}

impl Default for MixupConfig {
    fn default() -> Self {
        Self { enabled: true, ratio: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateConfig {
    pub hidden: usize,
    pub dropout: f64,
    pub mc_passes: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub mixup: MixupConfig,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            dropout: 0.1,
            mc_passes: 3,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            epochs: 7,
            batch_size: 16,
            mixup: MixupConfig::default(),
        }
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.mc_passes == 0 || self.batch_size == 0 {
            return Err(Error::Config("surrogate sizes must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("surrogate.dropout {} not in [0, 1)", self.dropout)));
        }
        if !(self.mixup.ratio > 0.0 && self.mixup.ratio <= 1.0) {
            return Err(Error::Config(format!("surrogate.mixup.ratio {} not in (0, 1]", self.mixup.ratio)));
        }
        Ok(())
    }
}

/// `K` softmax rows, one per stochastic pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePrediction {
    classes: usize,
    probs: Vec<f64>,
}

impl EnsemblePrediction {
    pub fn new(classes: usize, probs: Vec<f64>) -> Result<Self> {
        if classes == 0 || probs.is_empty() || !probs.len().is_multiple_of(classes) {
            return Err(Error::shape("ensemble rows"));
        }
        for row in probs.chunks(classes) {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!("ensemble row {row:?} is not a distribution")));
            }
        }
        Ok(Self { classes, probs })
    }

    pub fn passes(&self) -> usize {
        self.probs.len() / self.classes
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.probs[k * self.classes..(k + 1) * self.classes]
    }

    pub fn mean(&self) -> Vec<f64> {
        let k = self.passes() as f64;
        let mut m = vec![0.0; self.classes];
        for row in self.probs.chunks(self.classes) {
            m.iter_mut().zip(row).for_each(|(a, p)| *a += p / k);
        }
        m
    }
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// `H[mean] - mean H` in nats, clamped at 0.
pub fn bald_mi(pred: &EnsemblePrediction) -> f64 {
    let k = pred.passes() as f64;
    let expected: f64 = pred.probs.chunks(pred.classes).map(entropy).sum::<f64>() / k;
    (entropy(&pred.mean()) - expected).max(0.0)
}

/// `lambda * v1 + (1 - lambda) * v2` for two vectors of the same class.
pub fn mixup(v1: &[f64], l1: Label, v2: &[f64], l2: Label, lambda: f64) -> Result<Vec<f64>> {
    if l1 != l2 {
        return Err(Error::InvalidArgument("mixup pair crosses classes".into()));
    }
    if v1.len() != v2.len() {
        return Err(Error::shape("mixup vectors differ in length"));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("mixup lambda {lambda} not in [0, 1]")));
    }
    Ok(v1.iter().zip(v2).map(|(a, b)| lambda * a + (1.0 - lambda) * b).collect())
}

/// Tops up the minority class with within-class mixup samples until it
/// reaches `ratio` times the majority. Originals come first, unchanged.
pub fn augment<R: Rng + ?Sized>(
    latents: &[Vec<f64>],
    labels: &[Label],
    cfg: &MixupConfig,
    rng: &mut R,
) -> Result<(Vec<Vec<f64>>, Vec<Label>)> {
    let mut xs = latents.to_vec();
    let mut ys = labels.to_vec();
    if !cfg.enabled {
        return Ok((xs, ys));
    }
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == Label::Positive).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == Label::Negative).collect();
    let (minority, majority) = if pos.len() <= neg.len() { (pos, neg) } else { (neg, pos) };
    if minority.is_empty() {
        return Ok((xs, ys));
    }
    let target = (cfg.ratio * majority.len() as f64).round() as usize;
    let class = labels[minority[0]];
    for _ in minority.len()..target {
        let a = minority[rng.random_range(0..minority.len())];
        let b = minority[rng.random_range(0..minority.len())];
        let lambda: f64 = rng.random();
        xs.push(mixup(&latents[a], class, &latents[b], class, lambda)?);
        ys.push(class);
    }
    Ok((xs, ys))
}

#[derive(Debug, Clone)]
pub struct BnnModel {
    config: SurrogateConfig,
    network: Network,
    trained: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub final_loss: f64,
    pub augmented_size: usize,
}

impl BnnModel {
    pub fn new(input_dim: usize, config: SurrogateConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let spec = NetworkSpec::mlp(input_dim, &[config.hidden], CLASSES, Activation::Relu, Some(config.dropout))?;
        let network = Network::new(spec, &mut RngStream::new(seed, 0));
        Ok(Self {
            config,
            network,
            trained: false,
        })
    }

    pub fn config(&self) -> &SurrogateConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.network.spec().input_dim()
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// `K` MC-dropout passes over one latent, pass `k` drawing its masks
    /// from stream `(seed, k)`.
    pub fn mc_predict(&self, x: &[f64], seed: u64) -> Result<EnsemblePrediction> {
        if !self.trained {
            return Err(Error::Untrained);
        }
        let input = Tensor::row_vector(x.to_vec());
        let mut probs = Vec::with_capacity(self.config.mc_passes * CLASSES);
        for k in 0..self.config.mc_passes {
            let mut rng = RngStream::new(seed, k as u64);
            let logits = self.network.infer(&input, Mode::McDropout, &mut rng)?;
            probs.extend(softmax(logits.values()));
        }
        EnsemblePrediction::new(CLASSES, probs)
    }

    /// BALD score of one latent under the masks of `seed`.
    pub fn mutual_information(&self, x: &[f64], seed: u64) -> Result<f64> {
        Ok(bald_mi(&self.mc_predict(x, seed)?))
    }

    /// Class from the argmax of the mean MC probability; ties go negative.
    pub fn classify(&self, x: &[f64], seed: u64) -> Result<Label> {
        let mean = self.mc_predict(x, seed)?.mean();
        Ok(if mean[1] > mean[0] { Label::Positive } else { Label::Negative })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let sections = [WeightSection::new("surrogate", self.network.params().to_vec())];
        write_weights(BufWriter::new(file), &sections).map_err(|e| Error::io(path, e))
    }

    /// Loads weights saved by [`save`](Self::save) into a model of matching shape.
    pub fn load(path: &Path, input_dim: usize, config: SurrogateConfig) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut model = Self::new(input_dim, config, 0)?;
        for s in read_weights(BufReader::new(file))? {
            match s.name.as_str() {
                "surrogate" => model.network.set_params(s.values)?,
                other => return Err(Error::Weights(format!("unexpected section {other}"))),
            }
        }
        model.trained = true;
        Ok(model)
    }
}

/// Trains a fresh model on `(latents, labels)` with mixup balancing.
/// Streams: 0 init, 1 mixup, 2 batch order, 3 dropout.
pub fn train_surrogate(latents: &[Vec<f64>], labels: &[Label], cfg: &SurrogateConfig, seed: u64) -> Result<(BnnModel, TrainSummary)> {
    if latents.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if latents.len() != labels.len() {
        return Err(Error::shape("latents and labels differ in length"));
    }
    let dim = latents[0].len();
    let mut model = BnnModel::new(dim, cfg.clone(), seed)?;
    let (xs, ys) = augment(latents, labels, &cfg.mixup, &mut RngStream::new(seed, 1))?;
    let mut opt = AdamState::new(
        AdamConfig {
            weight_decay: cfg.weight_decay,
            ..AdamConfig::with_lr(cfg.learning_rate)
        },
        model.network.param_count(),
    );
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut order_rng = RngStream::new(seed, 2);
    let mut drop_rng = RngStream::new(seed, 3);
    let mut final_loss = f64::NAN;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let rows: Vec<Vec<f64>> = batch.iter().map(|&i| xs[i].clone()).collect();
            let input = Tensor::from_rows(&rows)?;
            let fwd = model.network.forward(&input, Mode::Train, &mut drop_rng)?;
            let n = batch.len() as f64;
            let mut grad = Vec::with_capacity(batch.len() * CLASSES);
            let mut loss = 0.0;
            for (r, &i) in batch.iter().enumerate() {
                let (l, g) = cross_entropy(fwd.output.row(r), ys[i].class())?;
                loss += l / n;
                grad.extend(g.into_iter().map(|v| v / n));
            }
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("surrogate epoch {epoch}: loss {loss}")));
            }
            let (grads, _) = model.network.backward(&fwd.tape, &Tensor::new(vec![batch.len(), CLASSES], grad)?)?;
            opt.step(model.network.params_mut(), &grads)?;
            total += loss * n;
        }
        final_loss = total / xs.len() as f64;
    }
    model.trained = true;
    Ok((
        model,
        TrainSummary {
            final_loss,
            augmented_size: xs.len(),
        },
    ))
}

/// F1 on the positive class; 0 when precision or recall is undefined.
pub fn f1_score(predictions: &[Label], labels: &[Label]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::shape("predictions and labels differ in length"));
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (p, l) in predictions.iter().zip(labels) {
        match (p, l) {
            (Label::Positive, Label::Positive) => tp += 1,
            (Label::Positive, Label::Negative) => fp += 1,
            (Label::Negative, Label::Positive) => fneg += 1,
            _ => {}
        }
    }
    let denom = 2 * tp + fp + fneg;
    Ok(if tp == 0 || denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    })
}
