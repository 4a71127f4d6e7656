//! The active-learning loop, single-step GFlowNet analysis and strategy
//! comparison.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use crate::acquisition::{acquire_bald, acquire_gfn, acquire_random, score_pool, CallLedger, Strategy};
use crate::config::ExperimentConfig;
use crate::csvio::{self, Provenance};
use crate::embedding::{train_autoencoder, AeReport, LatentTable};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::gflownet::{BaldReward, EpisodeLog, Featurizer, GfnTrainer, PolicyModel, RewardCache};
use crate::grid::GridEnv;
use crate::nn::{read_weights, write_weights};
use crate::oracle::{Label, LabeledDataset, Point, Split};
use crate::rng::{purpose_seed, Purpose};
use crate::stats;
use crate::surrogate::{train_surrogate, BnnModel};

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub f1: f64,
    pub train_size: usize,
    pub pool_size: usize,
    pub test_size: usize,
    pub train_positives: usize,
    pub acquired: Vec<Point>,
    pub acquired_positives: usize,
    pub calls: u64,
    pub cumulative_calls: u64,
    pub surrogate_loss: f64,
    pub fallback: usize,
}

const RECORD_HEADER: [&str; 12] = [
    "iteration",
    "f1",
    "train_size",
    "pool_size",
    "test_size",
    "train_positives",
    "acquired",
    "acquired_positives",
    "calls",
    "cumulative_calls",
    "surrogate_loss",
    "fallback",
];

fn format_points(points: &[Point]) -> String {
    points.iter().map(|(i, j)| format!("{i}:{j}")).collect::<Vec<_>>().join(";")
}

fn parse_points(s: &str) -> Result<Vec<Point>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';')
        .map(|p| {
            let (i, j) = p
                .split_once(':')
                .ok_or_else(|| Error::InvalidArgument(format!("bad point {p:?}")))?;
            let parse = |v: &str| v.parse::<usize>().map_err(|_| Error::InvalidArgument(format!("bad point {p:?}")));
            Ok((parse(i)?, parse(j)?))
        })
        .collect()
}

impl IterationRecord {
    fn to_row(&self) -> Vec<String> {
        vec![
            self.iteration.to_string(),
            csvio::num(self.f1),
            self.train_size.to_string(),
            self.pool_size.to_string(),
            self.test_size.to_string(),
            self.train_positives.to_string(),
            format_points(&self.acquired),
            self.acquired_positives.to_string(),
            self.calls.to_string(),
            self.cumulative_calls.to_string(),
            csvio::num(self.surrogate_loss),
            self.fallback.to_string(),
        ]
    }

    fn from_row(rec: &csv::StringRecord) -> Result<Self> {
        let get = |k: usize| {
            rec.get(k)
                .ok_or_else(|| Error::InvalidArgument(format!("record row lacks column {}", RECORD_HEADER[k])))
        };
        let int = |k: usize| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad {} in records", RECORD_HEADER[k])))
        };
        let float = |k: usize| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad {} in records", RECORD_HEADER[k])))
        };
        Ok(Self {
            iteration: int(0)? as usize,
            f1: float(1)?,
            train_size: int(2)? as usize,
            pool_size: int(3)? as usize,
            test_size: int(4)? as usize,
            train_positives: int(5)? as usize,
            acquired: parse_points(get(6)?)?,
            acquired_positives: int(7)? as usize,
            calls: int(8)?,
            cumulative_calls: int(9)?,
            surrogate_loss: float(10)?,
            fallback: int(11)? as usize,
        })
    }
}

pub fn write_records(path: &Path, records: &[IterationRecord], prov: &Provenance) -> Result<()> {
    let mut w = csvio::create(path, prov)?;
    w.write_record(RECORD_HEADER)?;
    for r in records {
        w.write_record(r.to_row())?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<IterationRecord>> {
    let mut r = csvio::open(path)?;
    r.records().map(|rec| IterationRecord::from_row(&rec?)).collect()
}

/// Wall-clock seconds per iteration, kept apart from the records so that
/// reruns reproduce `records.csv` byte for byte.
#[derive(Debug, Clone, PartialEq)]
pub struct Timing {
    pub iteration: usize,
    pub acquisition_s: f64,
    pub surrogate_s: f64,
}

fn write_timings(path: &Path, timings: &[Timing], prov: &Provenance) -> Result<()> {
    let mut w = csvio::create(path, prov)?;
    w.write_record(["iteration", "acquisition_s", "surrogate_s"])?;
    for t in timings {
        w.write_record([
            t.iteration.to_string(),
            format!("{:.3}", t.acquisition_s),
            format!("{:.3}", t.surrogate_s),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<IterationRecord>,
    pub timings: Vec<Timing>,
    pub ledger: CallLedger,
    /// Split sizes `(train, pool, test)` after every iteration, for audits.
    pub splits: Vec<(usize, usize, usize)>,
}

impl RunOutput {
    pub fn final_f1(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.f1)
    }
}

/// Autoencoder latents for this config's grid and master seed.
pub fn build_latents(cfg: &ExperimentConfig) -> Result<(LatentTable, AeReport)> {
    let seed = purpose_seed(cfg.seed, 0, Purpose::Autoencoder);
    let (ae, report) = train_autoencoder(cfg.oracle.grid_size, &cfg.embedding, seed)?;
    log::info!(
        "autoencoder: reconstruction mse {:.4} -> {:.4}",
        report.initial_mse,
        report.final_mse
    );
    Ok((ae.latent_table(cfg.oracle.grid_size)?, report))
}

fn training_set(dataset: &LabeledDataset, latents: &LatentTable) -> (Vec<Vec<f64>>, Vec<Label>) {
    dataset
        .entries()
        .iter()
        .filter(|e| e.split == Split::Train)
        .map(|e| (latents.latent(e.point.0, e.point.1).to_vec(), e.label))
        .unzip()
}

/// Fresh surrogate on the current training split (canonical order), seeded
/// by iteration only.
fn fit_surrogate(cfg: &ExperimentConfig, dataset: &LabeledDataset, latents: &LatentTable, iteration: usize) -> Result<(BnnModel, f64)> {
    let (xs, ys) = training_set(dataset, latents);
    let (model, summary) = train_surrogate(&xs, &ys, &cfg.surrogate, purpose_seed(cfg.seed, iteration, Purpose::SurrogateTrain))?;
    Ok((model, summary.final_loss))
}

/// Test-split F1 with the mean of the MC passes.
pub fn evaluate(model: &BnnModel, dataset: &LabeledDataset, latents: &LatentTable, seed: u64, exec: Execution) -> Result<f64> {
    let test: Vec<_> = dataset.entries().iter().filter(|e| e.split == Split::Test).copied().collect();
    let preds: Vec<Label> = exec
        .map(&test, |e| model.classify(latents.latent(e.point.0, e.point.1), seed))
        .into_iter()
        .collect::<Result<_>>()?;
    let labels: Vec<Label> = test.iter().map(|e| e.label).collect();
    crate::surrogate::f1_score(&preds, &labels)
}

pub fn grid_env(cfg: &ExperimentConfig) -> Result<GridEnv> {
    GridEnv::new(cfg.oracle.grid_size, cfg.gflownet.mask)
}

fn new_trainer(cfg: &ExperimentConfig, latents: &Arc<LatentTable>, iteration: usize) -> Result<GfnTrainer> {
    let policy = PolicyModel::new(
        &cfg.gflownet.policy,
        Featurizer::Latent(latents.clone()),
        cfg.gflownet.initial_partition,
        purpose_seed(cfg.seed, iteration, Purpose::PolicyInit),
    )?;
    Ok(GfnTrainer::new(
        policy,
        cfg.gflownet.learning_rate,
        cfg.gflownet.log_z_learning_rate,
    ))
}

fn checkpoint_dir(outdir: &Path, iteration: usize) -> PathBuf {
    outdir.join(format!("checkpoint_{iteration}"))
}

const DONE_MARKER: &str = "complete";

struct State {
    dataset: LabeledDataset,
    surrogate: BnnModel,
    trainer: Option<GfnTrainer>,
    records: Vec<IterationRecord>,
    timings: Vec<Timing>,
    splits: Vec<(usize, usize, usize)>,
}

fn save_checkpoint(outdir: &Path, iteration: usize, st: &State, prov: &Provenance) -> Result<()> {
    let dir = checkpoint_dir(outdir, iteration);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    st.dataset.write_csv(&dir.join("dataset.csv"), prov)?;
    st.surrogate.save(&dir.join("surrogate.bin"))?;
    write_records(&dir.join("records.csv"), &st.records, prov)?;
    write_timings(&dir.join("timings.csv"), &st.timings, prov)?;
    if let Some(t) = &st.trainer {
        let path = dir.join("policy.bin");
        let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        write_weights(BufWriter::new(f), &t.sections()).map_err(|e| Error::io(&path, e))?;
    }
    let marker = dir.join(DONE_MARKER);
    fs::write(&marker, format!("{}\n", prov.comment())).map_err(|e| Error::io(&marker, e))
}

fn read_timings(path: &Path) -> Result<Vec<Timing>> {
    let mut r = csvio::open(path)?;
    r.records()
        .map(|rec| {
            let rec = rec?;
            let f = |k: usize| -> Result<f64> {
                rec.get(k)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::InvalidArgument("bad timings row".into()))
            };
            Ok(Timing {
                iteration: f(0)? as usize,
                acquisition_s: f(1)?,
                surrogate_s: f(2)?,
            })
        })
        .collect()
}

fn latest_checkpoint(outdir: &Path, max: usize) -> Option<usize> {
    (0..=max).rev().find(|&t| checkpoint_dir(outdir, t).join(DONE_MARKER).exists())
}

fn load_checkpoint(
    cfg: &ExperimentConfig,
    outdir: &Path,
    iteration: usize,
    latents: &Arc<LatentTable>,
    fresh: &LabeledDataset,
) -> Result<State> {
    let dir = checkpoint_dir(outdir, iteration);
    let dataset = LabeledDataset::read_csv(&dir.join("dataset.csv"), fresh.threshold())?;
    let mismatch = dataset
        .entries()
        .iter()
        .zip(fresh.entries())
        .any(|(a, b)| a.point != b.point || a.label != b.label);
    if mismatch || dataset.entries().len() != fresh.entries().len() {
        return Err(Error::Config(format!("{} does not belong to this configuration", dir.display())));
    }
    let surrogate = BnnModel::load(&dir.join("surrogate.bin"), latents.dim(), cfg.surrogate.clone())?;
    let trainer = if cfg.pipeline.strategy == Strategy::GFlowNet && iteration > 0 {
        let path = dir.join("policy.bin");
        let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut t = new_trainer(cfg, latents, iteration)?;
        t.load_sections(read_weights(BufReader::new(f))?)?;
        Some(t)
    } else {
        None
    };
    let records = read_records(&dir.join("records.csv"))?;
    let timings = read_timings(&dir.join("timings.csv"))?;
    let splits = records.iter().map(|r| (r.train_size, r.pool_size, r.test_size)).collect();
    Ok(State {
        dataset,
        surrogate,
        trainer,
        records,
        timings,
        splits,
    })
}

fn split_sizes(ds: &LabeledDataset) -> (usize, usize, usize) {
    (ds.count(Split::Train), ds.count(Split::Pool), ds.count(Split::Test))
}

fn train_positives(ds: &LabeledDataset) -> usize {
    ds.entries()
        .iter()
        .filter(|e| e.split == Split::Train && e.label == Label::Positive)
        .count()
}

/// Options for [`run_experiment`].
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Output directory; nothing is written when absent.
    pub outdir: Option<PathBuf>,
    /// Latents computed earlier for the same config and seed.
    pub latents: Option<Arc<LatentTable>>,
    /// Continue from the newest complete checkpoint in `outdir`.
    pub resume: bool,
}

/// Runs the active-learning loop for `cfg.pipeline.strategy`.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutput> {
    cfg.validate()?;
    let prov = Provenance::new(cfg.hash());
    let exec = cfg.pipeline.execution();
    if let Some(dir) = &opts.outdir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.resolved.toml");
        fs::write(&path, cfg.to_toml()).map_err(|e| Error::io(&path, e))?;
    }
    let latents = match &opts.latents {
        Some(l) => l.clone(),
        None => Arc::new(build_latents(cfg)?.0),
    };
    let fresh = LabeledDataset::build(&cfg.oracle, cfg.oracle_seed())?;
    let env = grid_env(cfg)?;
    let iterations = cfg.pipeline.iterations;

    let resumed = match (&opts.outdir, opts.resume) {
        (Some(dir), true) => latest_checkpoint(dir, iterations)
            .map(|t| load_checkpoint(cfg, dir, t, &latents, &fresh).map(|s| (t, s)))
            .transpose()?,
        _ => None,
    };
    let (start, mut st) = match resumed {
        Some((t, st)) => {
            log::info!("resuming after iteration {t}");
            (t + 1, st)
        }
        None => {
            let started = Instant::now();
            let (surrogate, loss) = fit_surrogate(cfg, &fresh, &latents, 0).map_err(|e| wrap(0, e))?;
            let f1 = evaluate(&surrogate, &fresh, &latents, purpose_seed(cfg.seed, 0, Purpose::Evaluation), exec)?;
            let (train, pool, test) = split_sizes(&fresh);
            let record = IterationRecord {
                iteration: 0,
                f1,
                train_size: train,
                pool_size: pool,
                test_size: test,
                train_positives: train_positives(&fresh),
                acquired: Vec::new(),
                acquired_positives: 0,
                calls: 0,
                cumulative_calls: 0,
                surrogate_loss: loss,
                fallback: 0,
            };
            log::info!("iteration 0: f1 {f1:.3}");
            let st = State {
                dataset: fresh.clone(),
                surrogate,
                trainer: None,
                records: vec![record],
                timings: vec![Timing {
                    iteration: 0,
                    acquisition_s: 0.0,
                    surrogate_s: started.elapsed().as_secs_f64(),
                }],
                splits: vec![(train, pool, test)],
            };
            if let (Some(dir), true) = (&opts.outdir, cfg.pipeline.checkpoints) {
                save_checkpoint(dir, 0, &st, &prov)?;
            }
            (1, st)
        }
    };

    for t in start..=iterations {
        step(cfg, &env, &latents, &mut st, t, exec, opts.outdir.as_deref(), &prov).map_err(|e| wrap(t, e))?;
        if let Some(dir) = &opts.outdir {
            write_records(&dir.join("records.csv"), &st.records, &prov)?;
            write_timings(&dir.join("timings.csv"), &st.timings, &prov)?;
            if cfg.pipeline.checkpoints {
                save_checkpoint(dir, t, &st, &prov)?;
            }
        }
    }
    if let Some(dir) = &opts.outdir {
        write_records(&dir.join("records.csv"), &st.records, &prov)?;
        write_timings(&dir.join("timings.csv"), &st.timings, &prov)?;
    }
    let ledger = CallLedger::from_counts(st.records.iter().skip(1).map(|r| r.calls).collect());
    Ok(RunOutput {
        records: st.records,
        timings: st.timings,
        ledger,
        splits: st.splits,
    })
}

fn wrap(iteration: usize, e: Error) -> Error {
    match e {
        e @ Error::Iteration { .. } => e,
        e => Error::Iteration {
            iteration,
            source: Box::new(e),
        },
    }
}

/// One pass of the loop: acquire with the current surrogate, label, retrain,
/// evaluate.
#[allow(clippy::too_many_arguments)]
fn step(
    cfg: &ExperimentConfig,
    env: &GridEnv,
    latents: &Arc<LatentTable>,
    st: &mut State,
    t: usize,
    exec: Execution,
    outdir: Option<&Path>,
    prov: &Provenance,
) -> Result<()> {
    let k = cfg.pipeline.batch_size;
    let pool = st.dataset.points(Split::Pool);
    let mc_seed = purpose_seed(cfg.seed, t, Purpose::McScoring);
    let started = Instant::now();
    let (acquired, fallback) = match cfg.pipeline.strategy {
        Strategy::Random => (acquire_random(&pool, k, purpose_seed(cfg.seed, t, Purpose::Random))?, 0),
        Strategy::Bald => (acquire_bald(&st.surrogate, latents, &pool, k, mc_seed, exec)?, 0),
        Strategy::GFlowNet => {
            let mut trainer = match st.trainer.take() {
                Some(tr) if cfg.gflownet.warm_start => tr,
                _ => new_trainer(cfg, latents, t)?,
            };
            let reward = BaldReward {
                model: &st.surrogate,
                latents,
                mc_seed,
            };
            let mut cache = RewardCache::new(cfg.gflownet.reward_floor);
            let log = trainer.train(
                env,
                &cfg.gflownet,
                cfg.gflownet.episodes,
                &reward,
                &mut cache,
                purpose_seed(cfg.seed, t, Purpose::PolicyTrain),
            )?;
            if let Some(dir) = outdir {
                let sub = dir.join(format!("gfn_{t}"));
                fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
                log.write_csv(&sub.join("episodes.csv"), prov)?;
                for s in &log.snapshots {
                    s.write_csv(&sub.join(format!("density_{}.csv", s.episode)), prov)?;
                }
            }
            let out = acquire_gfn(
                &trainer.policy,
                env,
                &pool,
                k,
                cfg.gflownet.sample_budget,
                cache.calls() as u64,
                purpose_seed(cfg.seed, t, Purpose::Acquisition),
                exec,
            )?;
            st.trainer = Some(trainer);
            out
        }
    };
    let acquisition_s = started.elapsed().as_secs_f64();

    let mut positives = 0;
    for &p in &acquired.points {
        if st.dataset.acquire(p)? == Label::Positive {
            positives += 1;
        }
    }
    let started = Instant::now();
    let (surrogate, loss) = fit_surrogate(cfg, &st.dataset, latents, t)?;
    let f1 = evaluate(
        &surrogate,
        &st.dataset,
        latents,
        purpose_seed(cfg.seed, t, Purpose::Evaluation),
        exec,
    )?;
    st.surrogate = surrogate;
    let (train, pool_n, test) = split_sizes(&st.dataset);
    let cumulative = st.records.last().map_or(0, |r| r.cumulative_calls) + acquired.calls;
    log::info!(
        "iteration {t}: f1 {f1:.3}, calls {} (cumulative {cumulative}), acquired positives {positives}",
        acquired.calls
    );
    st.records.push(IterationRecord {
        iteration: t,
        f1,
        train_size: train,
        pool_size: pool_n,
        test_size: test,
        train_positives: train_positives(&st.dataset),
        acquired: acquired.points,
        acquired_positives: positives,
        calls: acquired.calls,
        cumulative_calls: cumulative,
        surrogate_loss: loss,
        fallback,
    });
    st.timings.push(Timing {
        iteration: t,
        acquisition_s,
        surrogate_s: started.elapsed().as_secs_f64(),
    });
    st.splits.push((train, pool_n, test));
    Ok(())
}

/// One AL step with a fixed reward landscape: the initial surrogate's MI
/// over every cell, and the policy's terminal density as it trains.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub size: usize,
    /// MI per cell, indexed `[i * size + j]`.
    pub landscape: Vec<f64>,
    pub log: EpisodeLog,
    /// Spearman correlation of each density snapshot with the landscape.
    pub alignment: Vec<(usize, f64)>,
    /// Points an exhaustive scan of the initial pool would score.
    pub pool_size: usize,
}

impl Analysis {
    pub fn final_calls(&self) -> usize {
        self.log.rows.last().map_or(0, |r| r.calls)
    }

    pub fn write(&self, outdir: &Path, prov: &Provenance) -> Result<()> {
        fs::create_dir_all(outdir).map_err(|e| Error::io(outdir, e))?;
        for s in &self.log.snapshots {
            s.write_csv(&outdir.join(format!("density_{}.csv", s.episode)), prov)?;
        }
        let path = outdir.join("mi_landscape.csv");
        let mut w = csvio::create(&path, prov)?;
        w.write_record(["i", "j", "mi"])?;
        for i in 0..self.size {
            for j in 0..self.size {
                w.write_record([i.to_string(), j.to_string(), csvio::num(self.landscape[i * self.size + j])])?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let path = outdir.join("calls_curve.csv");
        let mut w = csvio::create(&path, prov)?;
        w.write_record(["episode", "gflownet_calls", "bald_calls", "random_calls"])?;
        for r in &self.log.rows {
            w.write_record([r.episode.to_string(), r.calls.to_string(), self.pool_size.to_string(), "0".into()])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let path = outdir.join("alignment.csv");
        let mut w = csvio::create(&path, prov)?;
        w.write_record(["episode", "spearman"])?;
        for (e, rho) in &self.alignment {
            w.write_record([e.to_string(), csvio::num(*rho)])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        self.log.write_csv(&outdir.join("episodes.csv"), prov)
    }
}

pub fn analyze_step(cfg: &ExperimentConfig, latents: Option<Arc<LatentTable>>) -> Result<Analysis> {
    cfg.validate()?;
    let exec = cfg.pipeline.execution();
    let latents = match latents {
        Some(l) => l,
        None => Arc::new(build_latents(cfg)?.0),
    };
    let dataset = LabeledDataset::build(&cfg.oracle, cfg.oracle_seed())?;
    let env = grid_env(cfg)?;
    let (surrogate, _) = fit_surrogate(cfg, &dataset, &latents, 0)?;
    let mc_seed = purpose_seed(cfg.seed, 1, Purpose::McScoring);
    let n = cfg.oracle.grid_size;
    let cells: Vec<Point> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
    let landscape = score_pool(&surrogate, &latents, &cells, mc_seed, exec)?;

    let mut trainer = new_trainer(cfg, &latents, 1)?;
    let reward = BaldReward {
        model: &surrogate,
        latents: &latents,
        mc_seed,
    };
    let mut cache = RewardCache::new(cfg.gflownet.reward_floor);
    let log = trainer.train(
        &env,
        &cfg.gflownet,
        cfg.gflownet.episodes,
        &reward,
        &mut cache,
        purpose_seed(cfg.seed, 1, Purpose::PolicyTrain),
    )?;
    let alignment = log
        .snapshots
        .iter()
        .map(|s| Ok((s.episode, stats::spearman(&s.as_f64(), &landscape)?)))
        .collect::<Result<_>>()?;
    Ok(Analysis {
        size: n,
        landscape,
        log,
        alignment,
        pool_size: dataset.count(Split::Pool),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub strategy: Strategy,
    pub seed: u64,
    pub final_f1: f64,
    pub cumulative_calls: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategySummary {
    pub strategy: Strategy,
    pub runs: usize,
    pub f1_mean: f64,
    pub f1_sd: f64,
    pub calls_mean: f64,
    pub calls_sd: f64,
}

pub fn summarize(runs: &[RunSummary], strategies: &[Strategy]) -> Vec<StrategySummary> {
    strategies
        .iter()
        .map(|&s| {
            let f1: Vec<f64> = runs.iter().filter(|r| r.strategy == s).map(|r| r.final_f1).collect();
            let calls: Vec<f64> = runs.iter().filter(|r| r.strategy == s).map(|r| r.cumulative_calls as f64).collect();
            StrategySummary {
                strategy: s,
                runs: f1.len(),
                f1_mean: stats::mean(&f1),
                f1_sd: stats::std_dev(&f1),
                calls_mean: stats::mean(&calls),
                calls_sd: stats::std_dev(&calls),
            }
        })
        .collect()
}

/// Config for one (strategy, seed) cell of a comparison.
pub fn variant(cfg: &ExperimentConfig, strategy: Strategy, seed: u64) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.pipeline.strategy = strategy;
    c.seed = seed;
    c
}

/// Every strategy under every seed; autoencoder latents are trained once per
/// seed and shared. Up to `jobs` runs execute at once.
pub fn compare_strategies(
    cfg: &ExperimentConfig,
    strategies: &[Strategy],
    seeds: &[u64],
    outdir: Option<&Path>,
    jobs: usize,
) -> Result<(Vec<RunSummary>, Vec<StrategySummary>)> {
    if seeds.is_empty() || strategies.is_empty() {
        return Err(Error::InvalidArgument("compare needs at least one seed and one strategy".into()));
    }
    let latents: Vec<Arc<LatentTable>> = with_jobs(jobs, || {
        Execution::Parallel
            .map(seeds, |&s| build_latents(&variant(cfg, strategies[0], s)).map(|l| Arc::new(l.0)))
            .into_iter()
            .collect::<Result<Vec<_>>>()
    })?;
    let cells: Vec<(Strategy, usize)> = seeds
        .iter()
        .enumerate()
        .flat_map(|(k, _)| strategies.iter().map(move |&s| (s, k)))
        .collect();
    let runs = with_jobs(jobs, || {
        Execution::Parallel
            .map(&cells, |&(strategy, k)| {
                let c = variant(cfg, strategy, seeds[k]);
                let opts = RunOptions {
                    outdir: outdir.map(|d| d.join(format!("{strategy}_seed{}", seeds[k]))),
                    latents: Some(latents[k].clone()),
                    resume: false,
                };
                run_experiment(&c, &opts).map(|out| RunSummary {
                    strategy,
                    seed: seeds[k],
                    final_f1: out.final_f1(),
                    cumulative_calls: out.ledger.cumulative(),
                })
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()
    })?;
    let summary = summarize(&runs, strategies);
    if let Some(dir) = outdir {
        let prov = Provenance::new(cfg.hash());
        let path = dir.join("runs.csv");
        let mut w = csvio::create(&path, &prov)?;
        w.write_record(["strategy", "seed", "final_f1", "cumulative_calls"])?;
        for r in &runs {
            w.write_record([
                r.strategy.to_string(),
                r.seed.to_string(),
                csvio::num(r.final_f1),
                r.cumulative_calls.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        let path = dir.join("summary.csv");
        let mut w = csvio::create(&path, &prov)?;
        w.write_record(["strategy", "runs", "f1_mean", "f1_sd", "calls_mean", "calls_sd"])?;
        for s in &summary {
            w.write_record([
                s.strategy.to_string(),
                s.runs.to_string(),
                csvio::num(s.f1_mean),
                csvio::num(s.f1_sd),
                csvio::num(s.calls_mean),
                csvio::num(s.calls_sd),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok((runs, summary))
}

#[cfg(feature = "parallel")]
fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> T {
    match rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

#[cfg(not(feature = "parallel"))]
fn with_jobs<T: Send>(_jobs: usize, f: impl FnOnce() -> T + Send) -> T {
    f()
}
