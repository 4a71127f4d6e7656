//! Acquisition strategies and surrogate-call accounting.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::embedding::LatentTable;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::gflownet::{sample_terminals, PolicyModel};
use crate::grid::GridEnv;
use crate::oracle::Point;
use crate::rng::RngStream;
use crate::surrogate::BnnModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    #[serde(rename = "gflownet")]
    GFlowNet,
    Bald,
    Random,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::GFlowNet, Strategy::Bald, Strategy::Random];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::GFlowNet => "gflownet",
            Strategy::Bald => "bald",
            Strategy::Random => "random",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gflownet" | "gfn" => Ok(Strategy::GFlowNet),
            "bald" => Ok(Strategy::Bald),
            "random" => Ok(Strategy::Random),
            other => Err(Error::Config(format!("unknown strategy {other:?}"))),
        }
    }
}

/// Surrogate scoring calls per iteration.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CallLedger {
    per_iteration: Vec<u64>,
}

impl CallLedger {
    pub fn from_counts(per_iteration: Vec<u64>) -> Self {
        Self { per_iteration }
    }

    pub fn record(&mut self, calls: u64) {
        self.per_iteration.push(calls);
    }

    pub fn per_iteration(&self) -> &[u64] {
        &self.per_iteration
    }

    pub fn last(&self) -> u64 {
        self.per_iteration.last().copied().unwrap_or(0)
    }

    pub fn cumulative(&self) -> u64 {
        self.per_iteration.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Acquired {
    pub points: Vec<Point>,
    pub calls: u64,
}

fn check_k(pool: &[Point], k: usize) -> Result<()> {
    if k == 0 || pool.len() < k {
        return Err(Error::InvalidArgument(format!(
            "cannot acquire {k} points from a pool of {}",
            pool.len()
        )));
    }
    Ok(())
}

/// Mutual information of every pool point under one fixed set of dropout
/// masks.
pub fn score_pool(model: &BnnModel, latents: &LatentTable, pool: &[Point], mc_seed: u64, exec: Execution) -> Result<Vec<f64>> {
    exec.map(pool, |&(i, j)| model.mutual_information(latents.latent(i, j), mc_seed))
        .into_iter()
        .collect()
}

/// Top-`k` by score, ties broken towards the lexicographically smaller point.
pub fn top_k(pool: &[Point], scores: &[f64], k: usize) -> Vec<Point> {
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(pool[a].cmp(&pool[b])));
    order.into_iter().take(k).map(|i| pool[i]).collect()
}

/// Exhaustive BALD: every pool point is scored once.
pub fn acquire_bald(model: &BnnModel, latents: &LatentTable, pool: &[Point], k: usize, mc_seed: u64, exec: Execution) -> Result<Acquired> {
    check_k(pool, k)?;
    let scores = score_pool(model, latents, pool, mc_seed, exec)?;
    Ok(Acquired {
        points: top_k(pool, &scores, k),
        calls: pool.len() as u64,
    })
}

/// Uniform sample without replacement; never touches the surrogate.
pub fn acquire_random(pool: &[Point], k: usize, seed: u64) -> Result<Acquired> {
    check_k(pool, k)?;
    let mut rng = RngStream::new(seed, 0);
    Ok(Acquired {
        points: index::sample(&mut rng, pool.len(), k).into_iter().map(|i| pool[i]).collect(),
        calls: 0,
    })
}

/// Terminals from the trained policy, restricted to the pool. Sampling
/// needs no rewards, so the calls are the unique terminals scored while
/// training the policy this iteration.
#[allow(clippy::too_many_arguments)]
pub fn acquire_gfn(
    policy: &PolicyModel,
    env: &GridEnv,
    pool: &[Point],
    k: usize,
    budget: usize,
    training_calls: u64,
    seed: u64,
    exec: Execution,
) -> Result<(Acquired, usize)> {
    check_k(pool, k)?;
    let out = sample_terminals(policy, env, k, pool, budget, seed, exec)?;
    Ok((
        Acquired {
            points: out.points,
            calls: training_calls,
        },
        out.fallback,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_breaks_ties_lexicographically() {
        let pool = vec![(3, 1), (0, 2), (1, 1), (0, 1)];
        let scores = [0.5, 0.5, 0.9, 0.5];
        assert_eq!(top_k(&pool, &scores, 3), vec![(1, 1), (0, 1), (0, 2)]);
        assert_eq!(top_k(&pool, &scores, 4).len(), 4);
    }

    #[test]
    fn random_contract() {
        let pool: Vec<Point> = (0..20).map(|i| (i, 0)).collect();
        let a = acquire_random(&pool, 5, 3).unwrap();
        assert_eq!(a.calls, 0);
        assert_eq!(a, acquire_random(&pool, 5, 3).unwrap());
        let mut pts = a.points.clone();
        pts.sort_unstable();
        pts.dedup();
        assert_eq!(pts.len(), 5);
        assert!(acquire_random(&pool, 21, 3).is_err());
    }

    #[test]
    fn strategy_names_roundtrip() {
        for s in Strategy::ALL {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
        }
        assert!("greedy".parse::<Strategy>().is_err());
    }

    #[test]
    fn ledger_sums() {
        let mut l = CallLedger::default();
        l.record(700);
        l.record(690);
        assert_eq!(l.cumulative(), 1390);
        assert_eq!(l.last(), 690);
    }
}
