//! GFlowNet policy over the grid DAG, trained with Trajectory Balance.

use std::collections::{HashMap, VecDeque};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::csvio::{self, Provenance};
use crate::embedding::LatentTable;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::grid::{Action, ActionMask, GridEnv, GridState, MaskConfig, Trajectory, Transition};
use crate::nn::{Activation, AdamConfig, AdamState, LayerSpec, Mode, Network, NetworkSpec, Tape, Tensor, WeightSection};
use crate::oracle::Point;
use crate::rng::RngStream;
use crate::surrogate::BnnModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            layers: 6,
            heads: 8,
            ff_dim: 1024,
            dropout: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GfnConfig {
    pub policy: PolicyConfig,
    pub learning_rate: f64,
    /// Adam step size for `log Z`.
    pub log_z_learning_rate: f64,
    pub episodes: usize,
    pub epsilon_greedy: f64,
    pub mask: MaskConfig,
    pub initial_partition: f64,
    pub reward_floor: f64,
    /// Episodes after which a density snapshot is taken.
    pub snapshots: Vec<usize>,
    pub density_window: usize,
    /// Keep policy weights across AL iterations instead of reinitialising.
    pub warm_start: bool,
    /// Rollout attempts per requested terminal before falling back to the pool.
    pub sample_budget: usize,
}

impl Default for GfnConfig {
    fn default() -> Self {
        Self {
            policy: PolicyConfig::default(),
            learning_rate: 1e-4,
            log_z_learning_rate: 1e-4,
            episodes: 50_000,
            epsilon_greedy: 0.1,
            mask: MaskConfig {
                min_length: 50,
                max_length: 100,
                eps_stop: 0.5,
                forbid_backtrack: true,
                depth_aware_stop: true,
            },
            initial_partition: 10.0,
            reward_floor: 1e-6,
            snapshots: vec![300, 1000, 2000],
            density_window: 300,
            warm_start: true,
            sample_budget: 100,
        }
    }
}

impl GfnConfig {
    pub fn validate(&self) -> Result<()> {
        self.mask.validate()?;
        if !(0.0..1.0).contains(&self.epsilon_greedy) {
            return Err(Error::Config(format!(
                "gflownet.epsilon_greedy {} not in [0, 1)",
                self.epsilon_greedy
            )));
        }
        if self.initial_partition <= 0.0 || self.reward_floor <= 0.0 {
            return Err(Error::Config("gflownet.initial_partition and reward_floor must be > 0".into()));
        }
        if self.density_window == 0 || self.sample_budget == 0 {
            return Err(Error::Config("gflownet.density_window and sample_budget must be > 0".into()));
        }
        let p = &self.policy;
        if p.heads == 0 || !p.hidden.is_multiple_of(p.heads) {
            return Err(Error::Config(format!(
                "gflownet.policy.heads {} must divide hidden {}",
                p.heads, p.hidden
            )));
        }
        Ok(())
    }
}

/// What the policy sees of a state.
#[derive(Debug, Clone)]
pub enum Featurizer {
    /// Latent code of the current position; `t` only affects masking.
    Latent(Arc<LatentTable>),
    /// One-hot `x`, `y` and `t`, for exactly solvable toy instances where
    /// the optimal flow depends on the step counter.
    OneHot { size: usize, max_t: usize },
}

impl Featurizer {
    pub fn dim(&self) -> usize {
        match self {
            Featurizer::Latent(t) => t.dim(),
            Featurizer::OneHot { size, max_t } => 2 * size + max_t + 1,
        }
    }

    pub fn features(&self, s: &GridState) -> Vec<f64> {
        match self {
            Featurizer::Latent(t) => t.latent(s.x, s.y).to_vec(),
            Featurizer::OneHot { size, max_t } => {
                let mut v = vec![0.0; 2 * size + max_t + 1];
                v[s.x] = 1.0;
                v[size + s.y] = 1.0;
                v[2 * size + s.t.min(*max_t)] = 1.0;
                v
            }
        }
    }
}

/// Softmax over the unmasked logits; masked actions get exactly 0.
pub fn policy_distribution(logits: &[f64], mask: &ActionMask) -> Result<[f64; Action::COUNT]> {
    if logits.len() != Action::COUNT {
        return Err(Error::shape(format!("expected {} logits, got {}", Action::COUNT, logits.len())));
    }
    if mask.count() == 0 {
        return Err(Error::AllMasked);
    }
    let allowed = mask.as_array();
    let max = (0..Action::COUNT)
        .filter(|&a| allowed[a])
        .map(|a| logits[a])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut p = [0.0; Action::COUNT];
    let mut sum = 0.0;
    for a in 0..Action::COUNT {
        if allowed[a] {
            p[a] = (logits[a] - max).exp();
            sum += p[a];
        }
    }
    p.iter_mut().for_each(|v| *v /= sum);
    Ok(p)
}

fn draw(p: &[f64; Action::COUNT], rng: &mut impl Rng) -> Action {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (a, &pa) in p.iter().enumerate() {
        if pa > 0.0 {
            acc += pa;
            last = a;
            if u < acc {
                return Action::ALL[a];
            }
        }
    }
    Action::ALL[last]
}

#[derive(Debug, Clone)]
pub struct PolicyModel {
    network: Network,
    log_z: f64,
    featurizer: Featurizer,
}

/// Per-step record kept for the TB gradient.
struct Step {
    tape: Tape,
    probs: [f64; Action::COUNT],
    action: Action,
}

impl PolicyModel {
    pub fn new(cfg: &PolicyConfig, featurizer: Featurizer, initial_partition: f64, seed: u64) -> Result<Self> {
        let mut layers = vec![
            LayerSpec::LinearProjection {
                input: featurizer.dim(),
                output: cfg.hidden,
            },
            LayerSpec::Activation(Activation::LeakyRelu(0.01)),
        ];
        for _ in 0..cfg.layers {
            layers.push(LayerSpec::TransformerEncoder {
                hidden: cfg.hidden,
                heads: cfg.heads,
                ff_dim: cfg.ff_dim,
                dropout: cfg.dropout,
            });
        }
        layers.push(LayerSpec::Dense {
            input: cfg.hidden,
            output: Action::COUNT,
        });
        let network = Network::new(NetworkSpec::new(layers)?, &mut RngStream::new(seed, 0));
        Ok(Self {
            network,
            log_z: initial_partition.ln(),
            featurizer,
        })
    }

    pub fn log_z(&self) -> f64 {
        self.log_z
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn featurizer(&self) -> &Featurizer {
        &self.featurizer
    }

    pub fn set_featurizer(&mut self, featurizer: Featurizer) -> Result<()> {
        if featurizer.dim() != self.featurizer.dim() {
            return Err(Error::shape("featurizer width changed"));
        }
        self.featurizer = featurizer;
        Ok(())
    }

    fn logits(&self, state: &GridState) -> Result<Tensor> {
        self.network.predict(&Tensor::row_vector(self.featurizer.features(state)))
    }

    /// Action probabilities in eval mode.
    pub fn distribution(&self, state: &GridState, mask: &ActionMask) -> Result<[f64; Action::COUNT]> {
        policy_distribution(self.logits(state)?.values(), mask)
    }

    /// One rollout from the origin. Masks, the epsilon coin and the action
    /// draw come from `rng`; dropout masks from `drop_rng` when training.
    fn rollout(
        &self,
        env: &GridEnv,
        epsilon: f64,
        training: Option<&mut RngStream>,
        rng: &mut RngStream,
    ) -> Result<(Trajectory, Vec<Step>)> {
        let mut drop_rng = training;
        let mut state = GridState::ORIGIN;
        let mut prev: Option<GridState> = None;
        let mut traj = Trajectory {
            states: Vec::new(),
            actions: Vec::new(),
            forward_logprobs: Vec::new(),
            terminal: (0, 0),
        };
        let mut steps = Vec::new();
        loop {
            let mask = env.valid_actions(&state, prev.as_ref(), rng)?;
            let input = Tensor::row_vector(self.featurizer.features(&state));
            let (logits, tape) = match drop_rng.as_deref_mut() {
                Some(d) => {
                    let f = self.network.forward(&input, Mode::Train, d)?;
                    (f.output, Some(f.tape))
                }
                None => (self.network.predict(&input)?, None),
            };
            let probs = policy_distribution(logits.values(), &mask)?;
            let action = if epsilon > 0.0 && rng.random::<f64>() < epsilon {
                let allowed: Vec<Action> = mask.allowed().collect();
                allowed[rng.random_range(0..allowed.len())]
            } else {
                draw(&probs, rng)
            };
            traj.states.push(state);
            traj.actions.push(action);
            traj.forward_logprobs.push(probs[action.index()].ln());
            if let Some(tape) = tape {
                steps.push(Step { tape, probs, action });
            }
            match env.step(&state, action)? {
                Transition::Moved(next) => {
                    prev = Some(state);
                    state = next;
                }
                Transition::Terminal { x, y } => {
                    traj.terminal = (x, y);
                    return Ok((traj, steps));
                }
            }
        }
    }

    /// Rollout with the given exploration rate and no dropout.
    pub fn sample_trajectory(&self, env: &GridEnv, epsilon: f64, rng: &mut RngStream) -> Result<Trajectory> {
        Ok(self.rollout(env, epsilon, None, rng)?.0)
    }

    /// `n` noiseless rollouts, rollout `a` driven by `RngStream::new(seed, a)`.
    pub fn sample_many(&self, env: &GridEnv, n: usize, seed: u64, exec: Execution) -> Result<Vec<Point>> {
        exec.map_range(n, |a| {
            let mut rng = RngStream::new(seed, a as u64);
            self.sample_trajectory(env, 0.0, &mut rng).map(|t| t.terminal)
        })
        .into_iter()
        .collect()
    }

    pub fn weight_sections(&self) -> Vec<WeightSection> {
        vec![
            WeightSection::new("policy", self.network.params().to_vec()),
            WeightSection::new("log_z", vec![self.log_z]),
        ]
    }

    pub fn load_sections(&mut self, sections: Vec<WeightSection>) -> Result<()> {
        for s in sections {
            match s.name.as_str() {
                "policy" => self.network.set_params(s.values)?,
                "log_z" if s.values.len() == 1 => self.log_z = s.values[0],
                other => return Err(Error::Weights(format!("unexpected section {other}"))),
            }
        }
        Ok(())
    }
}

/// Sum of `log P_B` along a trajectory with `P_B` uniform over in-DAG parents.
pub fn log_pb(env: &GridEnv, traj: &Trajectory) -> Result<f64> {
    let mut total = 0.0;
    for s in traj.states.iter().skip(1) {
        total -= (env.dag_parents(s)?.len() as f64).ln();
    }
    Ok(total)
}

/// `(log Z + sum log P_F - log r - sum log P_B)^2`
pub fn tb_loss(log_z: f64, sum_log_pf: f64, reward: f64, sum_log_pb: f64) -> Result<f64> {
    Ok(tb_residual(log_z, sum_log_pf, reward, sum_log_pb)?.powi(2))
}

pub fn tb_residual(log_z: f64, sum_log_pf: f64, reward: f64, sum_log_pb: f64) -> Result<f64> {
    if reward.is_nan() || reward <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "trajectory balance needs a positive reward, got {reward}"
        )));
    }
    Ok(log_z + sum_log_pf - reward.ln() - sum_log_pb)
}

/// Raw (unfloored) reward of a terminal cell.
pub trait RewardSource: Sync {
    fn score(&self, cell: Point) -> Result<f64>;
}

impl<F> RewardSource for F
where
    F: Fn(Point) -> f64 + Sync,
{
    fn score(&self, cell: Point) -> Result<f64> {
        Ok(self(cell))
    }
}

/// BALD mutual information of a cell's latent under a fixed set of
/// dropout masks.
pub struct BaldReward<'a> {
    pub model: &'a BnnModel,
    pub latents: &'a LatentTable,
    pub mc_seed: u64,
}

impl RewardSource for BaldReward<'_> {
    fn score(&self, (x, y): Point) -> Result<f64> {
        self.model.mutual_information(self.latents.latent(x, y), self.mc_seed)
    }
}

/// Memoised rewards; every miss is one surrogate call.
#[derive(Debug, Clone, Default)]
pub struct RewardCache {
    floor: f64,
    values: HashMap<Point, f64>,
}

impl RewardCache {
    pub fn new(floor: f64) -> Self {
        Self {
            floor,
            values: HashMap::new(),
        }
    }

    pub fn reward(&mut self, source: &dyn RewardSource, cell: Point) -> Result<f64> {
        if let Some(&r) = self.values.get(&cell) {
            return Ok(r);
        }
        let r = source.score(cell)? + self.floor;
        self.values.insert(cell, r);
        Ok(r)
    }

    pub fn calls(&self) -> usize {
        self.values.len()
    }

    pub fn clear(&mut self) {
        self.values.clear();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRow {
    pub episode: usize,
    pub loss: f64,
    pub log_z: f64,
    pub length: usize,
    pub terminal: Point,
    pub calls: usize,
}

/// Terminal histogram over the most recent window of trajectories,
/// indexed `[x * size + y]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensitySnapshot {
    pub episode: usize,
    pub size: usize,
    pub counts: Vec<u32>,
}

impl DensitySnapshot {
    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64).collect()
    }

    pub fn write_csv(&self, path: &Path, prov: &Provenance) -> Result<()> {
        let mut w = csvio::create(path, prov)?;
        w.write_record(["i", "j", "count"])?;
        for i in 0..self.size {
            for j in 0..self.size {
                w.write_record([i.to_string(), j.to_string(), self.counts[i * self.size + j].to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpisodeLog {
    pub rows: Vec<EpisodeRow>,
    pub snapshots: Vec<DensitySnapshot>,
}

impl EpisodeLog {
    pub fn write_csv(&self, path: &Path, prov: &Provenance) -> Result<()> {
        let mut w = csvio::create(path, prov)?;
        w.write_record(["episode", "loss", "log_z", "length", "terminal_x", "terminal_y", "calls"])?;
        for r in &self.rows {
            w.write_record([
                r.episode.to_string(),
                csvio::num(r.loss),
                csvio::num(r.log_z),
                r.length.to_string(),
                r.terminal.0.to_string(),
                r.terminal.1.to_string(),
                r.calls.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Policy plus its optimiser state, so training can resume across AL
/// iterations.
#[derive(Debug, Clone)]
pub struct GfnTrainer {
    pub policy: PolicyModel,
    opt: AdamState,
    opt_z: AdamState,
}

impl GfnTrainer {
    pub fn new(policy: PolicyModel, learning_rate: f64, log_z_learning_rate: f64) -> Self {
        let n = policy.network.param_count();
        Self {
            policy,
            opt: AdamState::new(AdamConfig::with_lr(learning_rate), n),
            opt_z: AdamState::new(AdamConfig::with_lr(log_z_learning_rate), 1),
        }
    }

    /// Weights, `log Z` and both optimiser states.
    pub fn sections(&self) -> Vec<WeightSection> {
        let mut out = self.policy.weight_sections();
        for (name, opt) in [("opt", &self.opt), ("opt_z", &self.opt_z)] {
            let (m, v) = opt.moments();
            out.push(WeightSection::new(format!("{name}.m"), m.to_vec()));
            out.push(WeightSection::new(format!("{name}.v"), v.to_vec()));
            out.push(WeightSection::new(format!("{name}.step"), vec![opt.step_count() as f64]));
        }
        out
    }

    pub fn load_sections(&mut self, sections: Vec<WeightSection>) -> Result<()> {
        let (mut own, rest): (Vec<_>, Vec<_>) = sections.into_iter().partition(|s| s.name.starts_with("opt"));
        self.policy.load_sections(rest)?;
        for name in ["opt", "opt_z"] {
            let mut take = |suffix: &str| -> Result<Vec<f64>> {
                let key = format!("{name}.{suffix}");
                let i = own
                    .iter()
                    .position(|s| s.name == key)
                    .ok_or_else(|| Error::Weights(format!("missing section {key}")))?;
                Ok(own.swap_remove(i).values)
            };
            let (m, v, step) = (take("m")?, take("v")?, take("step")?);
            let step = *step.first().ok_or_else(|| Error::Weights(format!("empty {name}.step")))? as u64;
            let target = if name == "opt" { &mut self.opt } else { &mut self.opt_z };
            if m.len() != target.moments().0.len() {
                return Err(Error::Weights(format!(
                    "{name} state has {} slots, expected {}",
                    m.len(),
                    target.moments().0.len()
                )));
            }
            *target = AdamState::restore(target.config, m, v, step)?;
        }
        Ok(())
    }

    /// One TB step on a fresh trajectory; returns the loss and trajectory.
    pub fn episode(
        &mut self,
        env: &GridEnv,
        epsilon: f64,
        source: &dyn RewardSource,
        cache: &mut RewardCache,
        rng: &mut RngStream,
        drop_rng: &mut RngStream,
    ) -> Result<(f64, Trajectory)> {
        let (traj, steps) = self.policy.rollout(env, epsilon, Some(drop_rng), rng)?;
        let reward = cache.reward(source, traj.terminal)?;
        let delta = tb_residual(self.policy.log_z, traj.log_pf(), reward, log_pb(env, &traj)?)?;
        let loss = delta * delta;
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("trajectory balance loss {loss}")));
        }
        let mut grads = vec![0.0; self.policy.network.param_count()];
        for step in &steps {
            let g: Vec<f64> = (0..Action::COUNT)
                .map(|a| {
                    let onehot = if a == step.action.index() { 1.0 } else { 0.0 };
                    2.0 * delta * (onehot - step.probs[a])
                })
                .collect();
            self.policy.network.backward_into(&step.tape, &Tensor::row_vector(g), &mut grads)?;
        }
        self.opt.step(self.policy.network.params_mut(), &grads)?;
        let mut z = [self.policy.log_z];
        self.opt_z.step(&mut z, &[2.0 * delta])?;
        self.policy.log_z = z[0];
        Ok((loss, traj))
    }

    /// Runs `episodes` TB episodes against `source`, logging every episode
    /// and snapshotting terminal densities at `cfg.snapshots`.
    pub fn train(
        &mut self,
        env: &GridEnv,
        cfg: &GfnConfig,
        episodes: usize,
        source: &dyn RewardSource,
        cache: &mut RewardCache,
        seed: u64,
    ) -> Result<EpisodeLog> {
        let mut rng = RngStream::new(seed, 0);
        let mut drop_rng = RngStream::new(seed, 1);
        let mut window: VecDeque<Point> = VecDeque::with_capacity(cfg.density_window + 1);
        let mut log = EpisodeLog::default();
        for e in 1..=episodes {
            let (loss, traj) = self
                .episode(env, cfg.epsilon_greedy, source, cache, &mut rng, &mut drop_rng)
                .map_err(|err| match err {
                    Error::Diverged(m) => Error::Diverged(format!("episode {e}: {m}")),
                    other => other,
                })?;
            window.push_back(traj.terminal);
            if window.len() > cfg.density_window {
                window.pop_front();
            }
            log.rows.push(EpisodeRow {
                episode: e,
                loss,
                log_z: self.policy.log_z,
                length: traj.len(),
                terminal: traj.terminal,
                calls: cache.calls(),
            });
            if cfg.snapshots.contains(&e) {
                let n = env.size();
                let mut counts = vec![0u32; n * n];
                for &(x, y) in &window {
                    counts[x * n + y] += 1;
                }
                log.snapshots.push(DensitySnapshot {
                    episode: e,
                    size: n,
                    counts,
                });
            }
        }
        Ok(log)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    pub points: Vec<Point>,
    pub rollouts: usize,
    /// Slots filled uniformly from the pool after the rollout budget ran out.
    pub fallback: usize,
}

/// Noiseless rollouts until `k` distinct terminals satisfying `accept` are
/// found. Rollouts run in rounds of `k`, attempt `a` on stream `(seed, a)`,
/// and are consumed in attempt order so the result does not depend on
/// `exec`. After `budget * k` attempts the remainder is drawn uniformly
/// from `pool`.
pub fn sample_terminals(
    policy: &PolicyModel,
    env: &GridEnv,
    k: usize,
    pool: &[Point],
    budget: usize,
    seed: u64,
    exec: Execution,
) -> Result<SampleOutcome> {
    let in_pool: std::collections::HashSet<Point> = pool.iter().copied().collect();
    if k > in_pool.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot sample {k} terminals from a pool of {}",
            in_pool.len()
        )));
    }
    let mut chosen: Vec<Point> = Vec::with_capacity(k);
    let max_attempts = budget * k;
    let mut attempts = 0;
    while chosen.len() < k && attempts < max_attempts {
        let round = k.min(max_attempts - attempts);
        let base = attempts;
        let terminals: Vec<Point> = exec
            .map_range(round, |r| {
                let mut rng = RngStream::new(seed, (base + r) as u64);
                policy.sample_trajectory(env, 0.0, &mut rng).map(|t| t.terminal)
            })
            .into_iter()
            .collect::<Result<_>>()?;
        attempts += round;
        for t in terminals {
            if chosen.len() < k && in_pool.contains(&t) && !chosen.contains(&t) {
                chosen.push(t);
            }
        }
    }
    let mut fallback = 0;
    if chosen.len() < k {
        let mut rest: Vec<Point> = pool.iter().copied().filter(|p| !chosen.contains(p)).collect();
        rest.sort_unstable();
        rest.dedup();
        let mut rng = RngStream::new(seed, u64::MAX);
        while chosen.len() < k {
            let i = rng.random_range(0..rest.len());
            chosen.push(rest.swap_remove(i));
            fallback += 1;
        }
        log::warn!("gflownet sampling fell back to the pool for {fallback} of {k} points");
    }
    Ok(SampleOutcome {
        points: chosen,
        rollouts: attempts,
        fallback,
    })
}
