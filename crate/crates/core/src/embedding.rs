//! Coordinate embeddings: sinusoidal positional encodings fed through an
//! autoencoder whose bottleneck is trained to respect grid distances.

use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::csvio::{self, Provenance};
use crate::error::{Error, Result};
use crate::nn::{triplet_margin_grad, Activation, AdamConfig, AdamState, Mode, Network, NetworkSpec, Tensor, WeightSection};
use crate::oracle::Point;
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingConfig {
    /// Encoding length per coordinate; the autoencoder input is twice this.
    pub pe_dim: usize,
    pub pe_base: f64,
    /// Hidden Dense+ReLU layers in each of the encoder and decoder.
    pub layers: usize,
    pub hidden: usize,
    pub latent_dim: usize,
    pub triplet_weight: f64,
    pub triplet_margin: f64,
    /// Chebyshev radius inside which a point counts as a positive.
    pub positive_radius: usize,
    /// Minimum Chebyshev distance of a negative.
    pub negative_radius: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            pe_dim: 128,
            pe_base: 10_000.0,
            layers: 6,
            hidden: 512,
            latent_dim: 50,
            triplet_weight: 0.1,
            triplet_margin: 1.0,
            positive_radius: 2,
            negative_radius: 10,
            learning_rate: 1e-3,
            epochs: 50,
            batch_size: 512,
        }
    }
}

impl EmbeddingConfig {
    pub fn validate(&self, grid_size: usize) -> Result<()> {
        if self.pe_dim == 0 || !self.pe_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("embedding.pe_dim {} must be even and > 0", self.pe_dim)));
        }
        if self.hidden == 0 || self.latent_dim == 0 || self.batch_size == 0 {
            return Err(Error::Config("embedding sizes must be > 0".into()));
        }
        if self.triplet_margin <= 0.0 || self.triplet_weight < 0.0 {
            return Err(Error::Config("embedding triplet margin must be > 0 and weight >= 0".into()));
        }
        self.triplet_rule().validate(grid_size)
    }

    pub fn input_dim(&self) -> usize {
        2 * self.pe_dim
    }

    pub fn triplet_rule(&self) -> TripletRule {
        TripletRule {
            positive_radius: self.positive_radius,
            negative_radius: self.negative_radius,
        }
    }
}

/// Interleaved sin/cos at geometrically spaced frequencies:
/// entry `2k` is `sin(c / base^(2k/d))`, entry `2k+1` the matching cosine.
pub fn positional_encoding(coord: f64, dim: usize, base: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(dim);
    for k in 0..dim / 2 {
        let angle = coord / base.powf(2.0 * k as f64 / dim as f64);
        out.push(angle.sin());
        out.push(angle.cos());
    }
    out
}

/// `[PE(i); PE(j)]`
pub fn encode_point(i: usize, j: usize, cfg: &EmbeddingConfig) -> Vec<f64> {
    let mut v = positional_encoding(i as f64, cfg.pe_dim, cfg.pe_base);
    v.extend(positional_encoding(j as f64, cfg.pe_dim, cfg.pe_base));
    v
}

fn chebyshev(a: Point, b: Point) -> usize {
    a.0.abs_diff(b.0).max(a.1.abs_diff(b.1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TripletRule {
    pub positive_radius: usize,
    pub negative_radius: usize,
}

impl TripletRule {
    pub fn validate(&self, grid_size: usize) -> Result<()> {
        if !(0 < self.positive_radius && self.positive_radius < self.negative_radius && self.negative_radius < grid_size) {
            return Err(Error::Config(format!(
                "triplet radii need 0 < {} < {} < grid size {}",
                self.positive_radius, self.negative_radius, grid_size
            )));
        }
        Ok(())
    }

    /// A positive within the positive radius (never the anchor itself) and
    /// a negative at least the negative radius away.
    pub fn sample<R: Rng + ?Sized>(&self, anchor: Point, grid_size: usize, rng: &mut R) -> (Point, Point) {
        let cells = (0..grid_size).flat_map(|i| (0..grid_size).map(move |j| (i, j)));
        let pos: Vec<Point> = cells
            .clone()
            .filter(|&c| c != anchor && chebyshev(c, anchor) <= self.positive_radius)
            .collect();
        let neg: Vec<Point> = cells.filter(|&c| chebyshev(c, anchor) >= self.negative_radius).collect();
        (
            *pos.choose(rng).expect("grid size >= 2 gives every point a neighbour"),
            *neg.choose(rng).expect("negative radius below grid size leaves candidates"),
        )
    }
}

/// Gradients of [`ae_loss`] with respect to its network outputs.
pub struct AeLossGrad {
    pub loss: f64,
    pub recon: Vec<f64>,
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

/// `sum |x - x_hat|^2 + weight * sum triplet(E(x), E(x_p), E(x_n))` over a
/// batch. Inputs are row-major batches; `latent_dim` splits the latent rows.
#[allow(clippy::too_many_arguments)]
pub fn ae_loss(
    inputs: &[f64],
    recon: &[f64],
    anchor: &[f64],
    positive: &[f64],
    negative: &[f64],
    latent_dim: usize,
    weight: f64,
    margin: f64,
) -> Result<f64> {
    Ok(ae_loss_grad(inputs, recon, anchor, positive, negative, latent_dim, weight, margin)?.loss)
}

#[allow(clippy::too_many_arguments)]
pub fn ae_loss_grad(
    inputs: &[f64],
    recon: &[f64],
    anchor: &[f64],
    positive: &[f64],
    negative: &[f64],
    latent_dim: usize,
    weight: f64,
    margin: f64,
) -> Result<AeLossGrad> {
    if inputs.len() != recon.len() {
        return Err(Error::shape("reconstruction differs from input"));
    }
    if anchor.len() != positive.len() || anchor.len() != negative.len() || latent_dim == 0 || !anchor.len().is_multiple_of(latent_dim) {
        return Err(Error::shape("triplet batches disagree"));
    }
    let mut loss = 0.0;
    let mut g_recon = vec![0.0; recon.len()];
    for ((g, x), xh) in g_recon.iter_mut().zip(inputs).zip(recon) {
        loss += (xh - x) * (xh - x);
        *g = 2.0 * (xh - x);
    }
    let mut ga = vec![0.0; anchor.len()];
    let mut gp = vec![0.0; anchor.len()];
    let mut gn = vec![0.0; anchor.len()];
    for r in 0..anchor.len() / latent_dim {
        let s = r * latent_dim..(r + 1) * latent_dim;
        let t = triplet_margin_grad(&anchor[s.clone()], &positive[s.clone()], &negative[s.clone()], margin)?;
        loss += weight * t.loss;
        for (k, idx) in s.enumerate() {
            ga[idx] = weight * t.anchor[k];
            gp[idx] = weight * t.positive[k];
            gn[idx] = weight * t.negative[k];
        }
    }
    Ok(AeLossGrad {
        loss,
        recon: g_recon,
        anchor: ga,
        positive: gp,
        negative: gn,
    })
}

#[derive(Debug, Clone)]
pub struct Autoencoder {
    config: EmbeddingConfig,
    encoder: Network,
    decoder: Network,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AeReport {
    pub initial_mse: f64,
    pub final_mse: f64,
    /// Summed batch losses per epoch.
    pub epoch_losses: Vec<f64>,
}

fn stack(points: &[Point], cfg: &EmbeddingConfig) -> Tensor {
    let mut values = Vec::with_capacity(points.len() * cfg.input_dim());
    for &(i, j) in points {
        values.extend(encode_point(i, j, cfg));
    }
    Tensor::new(vec![points.len(), cfg.input_dim()], values).expect("consistent widths")
}

impl Autoencoder {
    pub fn new(config: EmbeddingConfig, seed: u64) -> Result<Self> {
        let mut rng = RngStream::new(seed, 0);
        let hidden = vec![config.hidden; config.layers];
        let enc = NetworkSpec::mlp(config.input_dim(), &hidden, config.latent_dim, Activation::Relu, None)?;
        let dec = NetworkSpec::mlp(config.latent_dim, &hidden, config.input_dim(), Activation::Relu, None)?;
        Ok(Self {
            encoder: Network::new(enc, &mut rng),
            decoder: Network::new(dec, &mut rng),
            config,
        })
    }

    pub fn config(&self) -> &EmbeddingConfig {
        &self.config
    }

    pub fn encode(&self, points: &[Point]) -> Result<Tensor> {
        self.encoder.predict(&stack(points, &self.config))
    }

    /// Mean squared reconstruction error over `points`.
    pub fn reconstruction_mse(&self, points: &[Point]) -> Result<f64> {
        let x = stack(points, &self.config);
        let z = self.encoder.predict(&x)?;
        let xh = self.decoder.predict(&z)?;
        crate::nn::mse(x.values(), xh.values())
    }

    pub fn latent_table(&self, grid_size: usize) -> Result<LatentTable> {
        let points: Vec<Point> = (0..grid_size).flat_map(|i| (0..grid_size).map(move |j| (i, j))).collect();
        let z = self.encode(&points)?;
        Ok(LatentTable {
            size: grid_size,
            dim: self.config.latent_dim,
            values: z.into_values(),
        })
    }

    pub fn weight_sections(&self) -> Vec<WeightSection> {
        vec![
            WeightSection::new("encoder", self.encoder.params().to_vec()),
            WeightSection::new("decoder", self.decoder.params().to_vec()),
        ]
    }

    pub fn load_sections(&mut self, sections: Vec<WeightSection>) -> Result<()> {
        for s in sections {
            match s.name.as_str() {
                "encoder" => self.encoder.set_params(s.values)?,
                "decoder" => self.decoder.set_params(s.values)?,
                other => return Err(Error::Weights(format!("unexpected section {other}"))),
            }
        }
        Ok(())
    }

    /// One optimisation step on a batch of anchors; returns the batch loss.
    fn train_step(
        &mut self,
        anchors: &[Point],
        triplets: &[(Point, Point)],
        opt: &mut (AdamState, AdamState),
        rng: &mut RngStream,
    ) -> Result<f64> {
        let cfg = &self.config;
        let b = anchors.len();
        let mut all: Vec<Point> = anchors.to_vec();
        all.extend(triplets.iter().map(|t| t.0));
        all.extend(triplets.iter().map(|t| t.1));
        let x_all = stack(&all, cfg);
        let enc = self.encoder.forward(&x_all, Mode::Train, rng)?;
        let ld = cfg.latent_dim;
        let z = enc.output.values();
        let (za, rest) = z.split_at(b * ld);
        let (zp, zn) = rest.split_at(b * ld);
        let za_t = Tensor::new(vec![b, ld], za.to_vec())?;
        let dec = self.decoder.forward(&za_t, Mode::Train, rng)?;

        let x = &x_all.values()[..b * cfg.input_dim()];
        let g = ae_loss_grad(x, dec.output.values(), za, zp, zn, ld, cfg.triplet_weight, cfg.triplet_margin)?;
        if !g.loss.is_finite() {
            return Err(Error::Diverged(format!("autoencoder loss {}", g.loss)));
        }
        let g_recon = Tensor::new(vec![b, cfg.input_dim()], g.recon)?;
        let (dec_grads, dz_from_dec) = self.decoder.backward(&dec.tape, &g_recon)?;

        let mut dz = g.anchor;
        dz.iter_mut().zip(dz_from_dec.values()).for_each(|(a, d)| *a += d);
        dz.extend(g.positive);
        dz.extend(g.negative);
        let dz = Tensor::new(vec![3 * b, ld], dz)?;
        let (enc_grads, _) = self.encoder.backward(&enc.tape, &dz)?;

        opt.0.step(self.encoder.params_mut(), &enc_grads)?;
        opt.1.step(self.decoder.params_mut(), &dec_grads)?;
        Ok(g.loss)
    }
}

/// Trains the autoencoder on every grid point. Purely geometric: no labels
/// are involved.
pub fn train_autoencoder(grid_size: usize, cfg: &EmbeddingConfig, seed: u64) -> Result<(Autoencoder, AeReport)> {
    cfg.validate(grid_size)?;
    let mut ae = Autoencoder::new(cfg.clone(), seed)?;
    let rule = cfg.triplet_rule();
    let mut points: Vec<Point> = (0..grid_size).flat_map(|i| (0..grid_size).map(move |j| (i, j))).collect();
    let initial_mse = ae.reconstruction_mse(&points)?;
    let mut opt = (
        AdamState::new(AdamConfig::with_lr(cfg.learning_rate), ae.encoder.param_count()),
        AdamState::new(AdamConfig::with_lr(cfg.learning_rate), ae.decoder.param_count()),
    );
    let mut shuffle_rng = RngStream::new(seed, 1);
    let mut triplet_rng = RngStream::new(seed, 2);
    let mut fwd_rng = RngStream::new(seed, 3);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        points.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for batch in points.chunks(cfg.batch_size) {
            let triplets: Vec<(Point, Point)> = batch.iter().map(|&a| rule.sample(a, grid_size, &mut triplet_rng)).collect();
            total += ae.train_step(batch, &triplets, &mut opt, &mut fwd_rng).map_err(|e| match e {
                Error::Diverged(msg) => Error::Diverged(format!("epoch {epoch}: {msg}")),
                other => other,
            })?;
        }
        log::debug!("autoencoder epoch {epoch}: loss {total:.4}");
        epoch_losses.push(total);
    }
    points.sort_unstable();
    let final_mse = ae.reconstruction_mse(&points)?;
    Ok((
        ae,
        AeReport {
            initial_mse,
            final_mse,
            epoch_losses,
        },
    ))
}

/// Frozen latent code per grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTable {
    size: usize,
    dim: usize,
    values: Vec<f64>,
}

impl LatentTable {
    pub fn from_values(size: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != size * size * dim {
            return Err(Error::shape("latent table size"));
        }
        Ok(Self { size, dim, values })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn latent(&self, i: usize, j: usize) -> &[f64] {
        let k = i * self.size + j;
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn rows(&self, points: &[Point]) -> Tensor {
        let mut v = Vec::with_capacity(points.len() * self.dim);
        for &(i, j) in points {
            v.extend_from_slice(self.latent(i, j));
        }
        Tensor::new(vec![points.len(), self.dim], v).expect("consistent widths")
    }

    fn dist(&self, a: Point, b: Point) -> f64 {
        self.latent(a.0, a.1)
            .iter()
            .zip(self.latent(b.0, b.1))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }

    /// Smallest pairwise latent distance between distinct grid points.
    pub fn min_pairwise_distance(&self) -> f64 {
        let n = self.size;
        let pts: Vec<Point> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
        let mut best = f64::INFINITY;
        for a in 0..pts.len() {
            for b in a + 1..pts.len() {
                best = best.min(self.dist(pts[a], pts[b]));
            }
        }
        best
    }

    /// Fraction of `n` sampled triplets whose positive is nearer the anchor
    /// than the negative.
    pub fn triplet_audit(&self, rule: &TripletRule, n: usize, seed: u64) -> f64 {
        let mut rng = RngStream::new(seed, 0);
        let mut ok = 0;
        for _ in 0..n {
            let a = (rng.random_range(0..self.size), rng.random_range(0..self.size));
            let (p, q) = rule.sample(a, self.size, &mut rng);
            if self.dist(a, p) < self.dist(a, q) {
                ok += 1;
            }
        }
        ok as f64 / n as f64
    }

    pub fn write_csv(&self, path: &Path, prov: &Provenance) -> Result<()> {
        let mut w = csvio::create(path, prov)?;
        let mut header = vec!["i".to_owned(), "j".to_owned()];
        header.extend((0..self.dim).map(|k| format!("z{k}")));
        w.write_record(&header)?;
        for i in 0..self.size {
            for j in 0..self.size {
                let mut row = vec![i.to_string(), j.to_string()];
                row.extend(self.latent(i, j).iter().map(|&v| csvio::num(v)));
                w.write_record(&row)?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoding_at_zero() {
        let pe = positional_encoding(0.0, 8, 10_000.0);
        for k in 0..4 {
            assert_eq!(pe[2 * k], 0.0);
            assert_eq!(pe[2 * k + 1], 1.0);
        }
    }

    #[test]
    fn encodings_bounded_and_distinct() {
        let encs: Vec<Vec<f64>> = (0..30).map(|c| positional_encoding(c as f64, 128, 10_000.0)).collect();
        assert!(encs.iter().flatten().all(|v| (-1.0..=1.0).contains(v)));
        let mut min_gap = f64::INFINITY;
        for a in 0..30 {
            for b in a + 1..30 {
                let d: f64 = encs[a].iter().zip(&encs[b]).map(|(x, y)| (x - y).powi(2)).sum();
                min_gap = min_gap.min(d.sqrt());
            }
        }
        assert!(min_gap > 0.0);
    }

    #[test]
    fn point_encoding_layout() {
        let cfg = EmbeddingConfig::default();
        let v = encode_point(3, 7, &cfg);
        assert_eq!(v.len(), 256);
        assert_ne!(v, encode_point(7, 3, &cfg));
        let d = encode_point(4, 4, &cfg);
        assert_eq!(d[..128], d[128..]);
    }

    #[test]
    fn ae_loss_examples() {
        // Perfect reconstruction, hinge inactive.
        let l = ae_loss(&[1.0, 2.0], &[1.0, 2.0], &[0.0], &[0.0], &[5.0], 1, 0.1, 1.0).unwrap();
        assert_eq!(l, 0.0);
        // Weight zero leaves the reconstruction term.
        let l = ae_loss(&[0.0, 0.0], &[1.0, 1.0], &[0.0], &[0.0], &[0.0], 1, 0.0, 1.0).unwrap();
        assert_eq!(l, 2.0);
        // Reconstruction 2.0, triplet 3.0 (|a-p|^2 = 2, |a-n|^2 = 0, m = 1).
        let s2 = std::f64::consts::SQRT_2;
        let l = ae_loss(&[0.0, 0.0], &[1.0, 1.0], &[0.0], &[s2], &[0.0], 1, 0.1, 1.0).unwrap();
        assert!((l - 2.3).abs() < 1e-12);
    }

    #[test]
    fn triplet_rule_respects_radii() {
        let rule = TripletRule {
            positive_radius: 2,
            negative_radius: 10,
        };
        let mut rng = RngStream::new(1, 0);
        for _ in 0..200 {
            let a = (rng.random_range(0..30), rng.random_range(0..30));
            let (p, n) = rule.sample(a, 30, &mut rng);
            assert!(p != a && chebyshev(a, p) <= 2);
            assert!(chebyshev(a, n) >= 10);
        }
        assert!(TripletRule {
            positive_radius: 3,
            negative_radius: 3
        }
        .validate(30)
        .is_err());
    }

    #[test]
    fn small_autoencoder_trains_and_is_deterministic() {
        let cfg = EmbeddingConfig {
            pe_dim: 8,
            layers: 2,
            hidden: 32,
            latent_dim: 6,
            epochs: 15,
            batch_size: 32,
            positive_radius: 1,
            negative_radius: 4,
            ..EmbeddingConfig::default()
        };
        let (ae, report) = train_autoencoder(8, &cfg, 3).unwrap();
        assert!(report.final_mse < report.initial_mse);
        let (ae2, _) = train_autoencoder(8, &cfg, 3).unwrap();
        assert_eq!(ae.encoder.params(), ae2.encoder.params());
        let table = ae.latent_table(8).unwrap();
        assert_eq!(table.latent(2, 3).len(), 6);
        assert_ne!(table.latent(0, 0), table.latent(7, 7));
        assert!(table.min_pairwise_distance() > 1e-9);
    }
}
