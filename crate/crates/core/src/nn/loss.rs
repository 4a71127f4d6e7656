use crate::error::{Error, Result};

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - lse).collect()
}

/// `-log softmax(logits)[label]` and its gradient `softmax - onehot`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    let loss = -log_softmax(logits)[label];
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    Ok((loss, grad))
}

fn same_len(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("{what}: lengths {} and {}", a.len(), b.len())));
    }
    Ok(())
}

/// Mean of squared elementwise differences.
pub fn mse(x: &[f64], x_hat: &[f64]) -> Result<f64> {
    same_len(x, x_hat, "mse")?;
    if x.is_empty() {
        return Ok(0.0);
    }
    Ok(x.iter().zip(x_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64)
}

/// Gradient of [`mse`] with respect to `x_hat`.
pub fn mse_grad(x: &[f64], x_hat: &[f64]) -> Result<Vec<f64>> {
    same_len(x, x_hat, "mse")?;
    let n = x.len().max(1) as f64;
    Ok(x.iter().zip(x_hat).map(|(a, b)| 2.0 * (b - a) / n).collect())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `max(0, |a - p|^2 - |a - n|^2 + margin)` with squared Euclidean distances.
pub fn triplet_margin(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64) -> Result<f64> {
    Ok(triplet_margin_grad(anchor, positive, negative, margin)?.loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletGrad {
    pub loss: f64,
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

pub fn triplet_margin_grad(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64) -> Result<TripletGrad> {
    same_len(anchor, positive, "triplet positive")?;
    same_len(anchor, negative, "triplet negative")?;
    if margin.is_nan() || margin <= 0.0 {
        return Err(Error::InvalidArgument(format!("triplet margin must be > 0, got {margin}")));
    }
    let raw = sq_dist(anchor, positive) - sq_dist(anchor, negative) + margin;
    let d = anchor.len();
    if raw <= 0.0 {
        return Ok(TripletGrad {
            loss: 0.0,
            anchor: vec![0.0; d],
            positive: vec![0.0; d],
            negative: vec![0.0; d],
        });
    }
    let mut ga = vec![0.0; d];
    let mut gp = vec![0.0; d];
    let mut gn = vec![0.0; d];
    for i in 0..d {
        let dp = anchor[i] - positive[i];
        let dn = anchor[i] - negative[i];
        ga[i] = 2.0 * (dp - dn);
        gp[i] = -2.0 * dp;
        gn[i] = 2.0 * dn;
    }
    Ok(TripletGrad {
        loss: raw,
        anchor: ga,
        positive: gp,
        negative: gn,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn cross_entropy_examples() {
        let (l, _) = cross_entropy(&[0.0, 0.0], 0).unwrap();
        assert_relative_eq!(l, std::f64::consts::LN_2, epsilon = 1e-12);
        let (l, _) = cross_entropy(&[20.0, -20.0], 0).unwrap();
        assert!(l < 1e-15);
        let (l, g) = cross_entropy(&[1.0, 0.0], 1).unwrap();
        assert_relative_eq!(l, (1.0 + 1f64.exp()).ln(), epsilon = 1e-12);
        assert_relative_eq!(l, 1.3133, epsilon = 1e-4);
        assert_relative_eq!(g.iter().sum::<f64>(), 0.0, epsilon = 1e-15);
        assert!(matches!(
            cross_entropy(&[0.0, 0.0], 2),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn softmax_is_a_distribution() {
        let p = softmax(&[1000.0, -1000.0, 3.0, 0.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let p = softmax(&[0.1, 0.2, -0.3]);
        assert!(p.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert_relative_eq!(mse(&[1.0, 2.0, 3.0], &[1.0, 2.0, 5.0]).unwrap(), 4.0 / 3.0, epsilon = 1e-15);
        assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn triplet_examples() {
        let a = [0.5, -0.5];
        assert_eq!(triplet_margin(&a, &a, &a, 1.0).unwrap(), 1.0);
        // |a-p|^2 = 0, |a-n|^2 = 5.
        assert_eq!(triplet_margin(&[0.0, 0.0], &[0.0, 0.0], &[1.0, 2.0], 1.0).unwrap(), 0.0);
        // |a-p|^2 = 2, |a-n|^2 = 1.
        assert_eq!(triplet_margin(&[0.0, 0.0], &[1.0, 1.0], &[1.0, 0.0], 1.0).unwrap(), 2.0);
        assert!(triplet_margin(&[0.0], &[0.0, 1.0], &[0.0], 1.0).is_err());
        assert!(triplet_margin(&[0.0], &[0.0], &[0.0], 0.0).is_err());
    }
}
