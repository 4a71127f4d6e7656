use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gfnact::acquisition::Strategy;
use gfnact::config::ExperimentConfig;
use gfnact::csvio::{self, Provenance};
use gfnact::embedding::train_autoencoder;
use gfnact::nn::write_weights;
use gfnact::oracle::{ground_truth, LabeledDataset};
use gfnact::pipeline::{analyze_step, compare_strategies, run_experiment, RunOptions};
use gfnact::rng::{purpose_seed, Purpose};
use gfnact::{Error, Result};

/// Generative active learning on a synthetic grid: BALD-rewarded GFlowNet
/// acquisition against exhaustive BALD and random baselines.
#[derive(Parser)]
#[command(name = "gfnact", version)]
struct Cli {
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config; without one the `paper` preset is used.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(short, long)]
    out: PathBuf,
    /// Override a config value, e.g. `--set pipeline.strategy=random`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the active-learning loop for one strategy.
    Run {
        #[command(flatten)]
        common: Common,
        /// Continue from the newest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Run several strategies over several seeds and summarise final F1.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated strategies.
        #[arg(long, value_delimiter = ',', default_value = "gflownet,bald,random")]
        strategies: Vec<String>,
        /// Comma-separated master seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        /// Concurrent runs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Train the coordinate autoencoder and export its latents.
    TrainAe {
        #[command(flatten)]
        common: Common,
    },
    /// Train the policy for one AL step against a fixed reward and export
    /// densities, the MI landscape and the surrogate-call curve.
    GfnAnalyze {
        #[command(flatten)]
        common: Common,
    },
    /// Export the noise-free and noisy ground-truth surfaces.
    ExportLandscape {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut overrides = common.overrides.clone();
    if let Ok(seed) = std::env::var("GFNACT_SEED") {
        let seed: u64 = seed
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("GFNACT_SEED: {seed:?} is not an unsigned integer")))?;
        overrides.push(format!("seed={seed}"));
    }
    match &common.config {
        Some(path) => ExperimentConfig::load(path, &overrides),
        None => ExperimentConfig::resolve("", &overrides),
    }
}

fn prepare(common: &Common) -> Result<(ExperimentConfig, Provenance)> {
    let cfg = load_config(common)?;
    fs::create_dir_all(&common.out).map_err(|e| Error::Config(format!("{}: {e}", common.out.display())))?;
    let path = common.out.join("config.resolved.toml");
    fs::write(&path, cfg.to_toml()).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let prov = Provenance::new(cfg.hash());
    Ok((cfg, prov))
}

fn run(cmd: Command) -> Result<String> {
    match cmd {
        Command::Run { common, resume } => {
            let (cfg, _) = prepare(&common)?;
            let out = run_experiment(
                &cfg,
                &RunOptions {
                    outdir: Some(common.out.clone()),
                    latents: None,
                    resume,
                },
            )?;
            Ok(format!(
                "run strategy={} iterations={} final_f1={:.4} cumulative_calls={} out={}",
                cfg.pipeline.strategy,
                out.records.len() - 1,
                out.final_f1(),
                out.ledger.cumulative(),
                common.out.display()
            ))
        }
        Command::Compare {
            common,
            strategies,
            seeds,
            jobs,
        } => {
            let (cfg, _) = prepare(&common)?;
            let strategies: Vec<Strategy> = strategies.iter().map(|s| s.trim().parse()).collect::<Result<_>>()?;
            let (_, summary) = compare_strategies(&cfg, &strategies, &seeds, Some(&common.out), jobs)?;
            let parts: Vec<String> = summary
                .iter()
                .map(|s| format!("{}={:.4}±{:.4}", s.strategy, s.f1_mean, s.f1_sd))
                .collect();
            Ok(format!(
                "compare seeds={} final_f1 {} out={}",
                seeds.len(),
                parts.join(" "),
                common.out.display()
            ))
        }
        Command::TrainAe { common } => {
            let (cfg, prov) = prepare(&common)?;
            let seed = purpose_seed(cfg.seed, 0, Purpose::Autoencoder);
            let (ae, report) = train_autoencoder(cfg.oracle.grid_size, &cfg.embedding, seed)?;
            let table = ae.latent_table(cfg.oracle.grid_size)?;
            table.write_csv(&common.out.join("latents.csv"), &prov)?;
            let path = common.out.join("autoencoder.bin");
            let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
            write_weights(BufWriter::new(f), &ae.weight_sections()).map_err(|e| Error::io(&path, e))?;
            let audit = table.triplet_audit(&cfg.embedding.triplet_rule(), 10_000, seed);
            let path = common.out.join("ae_loss.csv");
            let mut w = csvio::create(&path, &prov)?;
            w.write_record(["epoch", "loss"])?;
            for (e, l) in report.epoch_losses.iter().enumerate() {
                w.write_record([(e + 1).to_string(), csvio::num(*l)])?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
            Ok(format!(
                "train-ae mse {:.5}->{:.5} triplet_order {:.3} out={}",
                report.initial_mse,
                report.final_mse,
                audit,
                common.out.display()
            ))
        }
        Command::GfnAnalyze { common } => {
            let (cfg, prov) = prepare(&common)?;
            let analysis = analyze_step(&cfg, None)?;
            analysis.write(&common.out, &prov)?;
            let rho: Vec<String> = analysis.alignment.iter().map(|(e, r)| format!("{e}:{r:.3}")).collect();
            Ok(format!(
                "gfn-analyze episodes={} unique_calls={} pool={} spearman {} out={}",
                analysis.log.rows.len(),
                analysis.final_calls(),
                analysis.pool_size,
                rho.join(" "),
                common.out.display()
            ))
        }
        Command::ExportLandscape { common } => {
            let (cfg, prov) = prepare(&common)?;
            let ds = LabeledDataset::build(&cfg.oracle, cfg.oracle_seed())?;
            export_landscape(&ds, &common.out, &prov)?;
            Ok(format!(
                "export-landscape threshold={:.6} positives={} out={}",
                ds.threshold(),
                ds.positives(),
                common.out.display()
            ))
        }
    }
}

fn export_landscape(ds: &LabeledDataset, out: &Path, prov: &Provenance) -> Result<()> {
    for (name, noisy) in [("landscape_true.csv", false), ("landscape_noisy.csv", true)] {
        let path = out.join(name);
        let mut w = csvio::create(&path, prov)?;
        w.write_record(["i", "j", "value", "threshold", "positive"])?;
        for e in ds.entries() {
            let (i, j) = e.point;
            let value = if noisy { e.value } else { ground_truth(i as f64, j as f64) };
            w.write_record([
                i.to_string(),
                j.to_string(),
                csvio::num(value),
                csvio::num(ds.threshold()),
                e.label.class().to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, Error::Config(_)) { 1 } else { 2 })
        }
    }
}
