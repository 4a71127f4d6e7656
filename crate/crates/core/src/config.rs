//! Experiment configuration: presets, TOML files and dotted overrides.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::acquisition::Strategy;
use crate::embedding::EmbeddingConfig;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::gflownet::{GfnConfig, PolicyConfig};
use crate::grid::MaskConfig;
use crate::oracle::OracleConfig;
use crate::surrogate::SurrogateConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Desk,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
        })
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::Config(format!("preset: unknown value {other:?} (expected paper or desk)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub strategy: Strategy,
    pub iterations: usize,
    pub batch_size: usize,
    /// Score pools and sample rollouts on the rayon pool.
    pub parallel: bool,
    /// Write `checkpoint_<iter>/` after every iteration.
    pub checkpoints: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::GFlowNet,
            iterations: 20,
            batch_size: 10,
            parallel: true,
            checkpoints: true,
        }
    }
}

impl PipelineConfig {
    pub fn execution(&self) -> Execution {
        if self.parallel {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub seed: u64,
    pub oracle: OracleConfig,
    pub embedding: EmbeddingConfig,
    pub surrogate: SurrogateConfig,
    pub gflownet: GfnConfig,
    pub pipeline: PipelineConfig,
}

impl ExperimentConfig {
    /// Hyperparameters as published.
    pub fn paper() -> Self {
        Self {
            preset: Preset::Paper,
            seed: 0,
            oracle: OracleConfig::default(),
            embedding: EmbeddingConfig::default(),
            surrogate: SurrogateConfig::default(),
            gflownet: GfnConfig::default(),
            pipeline: PipelineConfig::default(),
        }
    }

    /// Single-core scale: smaller autoencoder and policy, shorter
    /// trajectories and fewer episodes. Everything else as published.
    pub fn desk() -> Self {
        let paper = Self::paper();
        Self {
            preset: Preset::Desk,
            embedding: EmbeddingConfig {
                pe_dim: 32,
                layers: 3,
                hidden: 128,
                ..paper.embedding
            },
            gflownet: GfnConfig {
                policy: PolicyConfig {
                    hidden: 64,
                    layers: 1,
                    heads: 4,
                    ff_dim: 128,
                    dropout: 0.1,
                },
                learning_rate: 3e-3,
                log_z_learning_rate: 0.1,
                episodes: 5_000,
                mask: MaskConfig {
                    min_length: 10,
                    max_length: 40,
                    ..paper.gflownet.mask
                },
                ..paper.gflownet
            },
            ..paper
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Paper => Self::paper(),
            Preset::Desk => Self::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.oracle.validate()?;
        self.embedding.validate(self.oracle.grid_size)?;
        self.surrogate.validate()?;
        self.gflownet.validate()?;
        let p = &self.pipeline;
        if p.batch_size == 0 {
            return Err(Error::Config("pipeline.batch_size must be > 0".into()));
        }
        let pool = self.oracle.grid_size.pow(2) - self.oracle.train_size - self.oracle.test_size;
        if p.batch_size * p.iterations > pool {
            return Err(Error::Config(format!(
                "pipeline: {} iterations of {} exceed the pool of {pool}",
                p.iterations, p.batch_size
            )));
        }
        if self.gflownet.mask.max_length < 2 * (self.oracle.grid_size - 1) && self.pipeline.strategy == Strategy::GFlowNet {
            log::debug!("gflownet.mask.max_length leaves part of the grid unreachable");
        }
        Ok(())
    }

    /// Oracle seed: explicit or derived from the master seed.
    pub fn oracle_seed(&self) -> u64 {
        self.oracle
            .seed
            .unwrap_or_else(|| crate::rng::purpose_seed(self.seed, 0, crate::rng::Purpose::Oracle))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// First 16 hex digits of the SHA-256 of the resolved TOML.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Resolves a config: the preset named in `text` (default paper), then
    /// the file's own keys, then each `key=value` override in order.
    pub fn resolve(text: &str, overrides: &[String]) -> Result<Self> {
        let mut user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            set_path(&mut user, key.trim(), parse_value(value.trim()))?;
        }
        let preset = match user.get("preset") {
            None => Preset::Paper,
            Some(toml::Value::String(s)) => s.parse()?,
            Some(other) => return Err(Error::Config(format!("preset: expected a string, got {other}"))),
        };
        let mut base = toml::Table::try_from(Self::preset(preset)).expect("config serialises");
        merge(&mut base, user, "")?;
        let cfg: Self = toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_owned()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::resolve(&text, overrides)
    }
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::Config(format!("empty override key {key:?}")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {p} is not a table")))?;
    }
    cur.insert(last.to_owned(), value);
    Ok(())
}

/// Overlays `user` onto `base`, rejecting keys the base does not know.
fn merge(base: &mut toml::Table, user: toml::Table, prefix: &str) -> Result<()> {
    for (k, v) in user {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => merge(b, u, &path)?,
            (Some(_), toml::Value::Table(_)) => return Err(Error::Config(format!("{path}: expected a value, got a table"))),
            (_, v) => {
                // Optional keys (e.g. oracle.seed) are absent from the serialised preset.
                let known = base.contains_key(&k) || optional_key(&path);
                if !known {
                    return Err(Error::Config(format!("unknown config key {path}")));
                }
                base.insert(k, v);
            }
        }
    }
    Ok(())
}

fn optional_key(path: &str) -> bool {
    matches!(path, "oracle.seed")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_roundtrip() {
        for p in [Preset::Paper, Preset::Desk] {
            let cfg = ExperimentConfig::preset(p);
            cfg.validate().unwrap();
            let back = ExperimentConfig::resolve(&cfg.to_toml(), &[]).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn paper_preset_matches_published_table() {
        let c = ExperimentConfig::paper();
        assert_eq!(
            (c.embedding.pe_dim, c.embedding.layers, c.embedding.hidden, c.embedding.latent_dim),
            (128, 6, 512, 50)
        );
        assert_eq!((c.embedding.epochs, c.embedding.batch_size), (50, 512));
        assert_eq!((c.surrogate.hidden, c.surrogate.mc_passes, c.surrogate.epochs), (256, 3, 7));
        let g = &c.gflownet;
        assert_eq!(
            (g.policy.hidden, g.policy.layers, g.policy.heads, g.policy.ff_dim),
            (256, 6, 8, 1024)
        );
        assert_eq!((g.episodes, g.mask.min_length, g.mask.max_length), (50_000, 50, 100));
        assert_eq!(
            (g.epsilon_greedy, g.mask.eps_stop, g.initial_partition, g.learning_rate),
            (0.1, 0.5, 10.0, 1e-4)
        );
        assert_eq!((c.pipeline.iterations, c.pipeline.batch_size, c.oracle.train_size), (20, 10, 100));
    }

    #[test]
    fn file_then_overrides() {
        let cfg = ExperimentConfig::resolve(
            "preset = \"desk\"\nseed = 3\n[pipeline]\nstrategy = \"bald\"\n",
            &[
                "pipeline.strategy=random".into(),
                "oracle.seed=7".into(),
                "gflownet.mask.eps_stop=0.25".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.preset, Preset::Desk);
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.pipeline.strategy, Strategy::Random);
        assert_eq!(cfg.oracle.seed, Some(7));
        assert_eq!(cfg.oracle_seed(), 7);
        assert_eq!(cfg.gflownet.mask.eps_stop, 0.25);
        assert_eq!(cfg.gflownet.episodes, 5_000);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = ExperimentConfig::resolve("[surrogate]\nhiden = 3\n", &[]).unwrap_err();
        assert!(err.to_string().contains("surrogate.hiden"), "{err}");
        let err = ExperimentConfig::resolve("", &["gflownet.mask.bogus=1".into()]).unwrap_err();
        assert!(err.to_string().contains("gflownet.mask.bogus"), "{err}");
        assert!(ExperimentConfig::resolve("preset = \"huge\"", &[]).is_err());
        assert!(ExperimentConfig::resolve("", &["noequals".into()]).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::desk();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }
}
