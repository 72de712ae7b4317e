use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use patchdesc::annealing::run_annealing;
use patchdesc::config::RunConfig;
use patchdesc::dataset::{self, sample_batch};
use patchdesc::eval::per_tier_report;
use patchdesc::gradcheck::run_gradcheck;
use patchdesc::model::{
    load_checkpoint, save_checkpoint, Activation, CheckpointMeta, DescriptorNet,
};
use patchdesc::supervision::SupervisorMode;
use patchdesc::train::{batch_gradients, preliminary_train, LossMode};
use patchdesc::{Error, Result};

#[derive(Parser)]
#[command(
    name = "patchdesc",
    about = "Local descriptor training with difficulty-balanced losses and \
             self-supervised sample weighting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LossArg {
    Triplet,
    Balance,
}

impl From<LossArg> for LossMode {
    fn from(v: LossArg) -> LossMode {
        match v {
            LossArg::Triplet => LossMode::Triplet,
            LossArg::Balance => LossMode::Balance,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic patch dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the dataset seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Preliminary training from random initialization.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        /// Overrides the training seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the loss mode from the config.
        #[arg(long)]
        loss: Option<LossArg>,
        /// Disable confidence weighting.
        #[arg(long)]
        no_unbiased: bool,
        /// Checkpoint output path; the training log goes next to it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Difficulty-annealed fine-tuning of a preliminary checkpoint.
    Anneal {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        loss: Option<LossArg>,
        #[arg(long)]
        no_unbiased: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Per-tier verification, matching and retrieval metrics.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// CSV output path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference verification of all gradient paths.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Deliberately corrupt one analytic gradient to exercise the
        /// failure path.
        #[arg(long)]
        corrupt_gradient: bool,
    },
    /// Dump per-triplet distances, confidences and weights as CSV.
    DumpDistributions {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 10)]
        batches: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => {
            let cfg = RunConfig::default();
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

fn build_net(cfg: &RunConfig) -> Result<DescriptorNet> {
    DescriptorNet::new_seeded(&cfg.model.layer_sizes, Activation::Tanh, cfg.model.init_seed)
}

/// Load the frozen supervisor network when the config names one.
fn load_supervisor(cfg: &RunConfig) -> Result<Option<DescriptorNet>> {
    match cfg.supervision.to_supervisor().mode {
        SupervisorMode::SelfMode => Ok(None),
        SupervisorMode::Pretrained(path) => {
            let (net, _) = load_checkpoint(&path)?;
            Ok(Some(net))
        }
    }
}

fn opt_fmt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for l in lines {
        writeln!(w, "{l}")?;
    }
    w.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData { config, seed, out } => {
            let cfg = load_config(&config)?;
            let mut syn = cfg.dataset.to_synthetic();
            if let Some(s) = seed {
                syn.seed = s;
            }
            let ds = dataset::generate(&syn)?;
            dataset::save(&ds, &out)?;
            println!(
                "wrote {} clusters ({} patches, dim {}) to {}",
                ds.num_clusters(),
                ds.patches.rows,
                ds.dim,
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Train {
            config,
            dataset: ds_path,
            seed,
            loss,
            no_unbiased,
            out,
            log,
        } => {
            let cfg = load_config(&config)?;
            let ds = dataset::load(&ds_path)?;
            let mode = loss.map(LossMode::from).unwrap_or(cfg.loss.mode()?);
            let unbiased = cfg.supervision.enabled && !no_unbiased;
            let seed = seed.unwrap_or(cfg.training.seed);
            let supervisor = load_supervisor(&cfg)?;
            let mut net = build_net(&cfg)?;
            let train_cfg = cfg.training.to_train(mode, unbiased, seed);
            let logs = preliminary_train(
                &mut net,
                &ds,
                &train_cfg,
                &cfg.loss.balance(),
                &cfg.loss.triplet(),
                &cfg.supervision.to_supervisor(),
                supervisor.as_ref(),
            )?;
            let log_path = log.unwrap_or_else(|| out.with_extension("log.csv"));
            let mut lines = vec!["epoch,loss,p_neg,mean_confidence,eval_map".to_string()];
            for l in &logs {
                lines.push(format!(
                    "{},{},{},{},{}",
                    l.epoch,
                    l.mean_loss,
                    opt_fmt(l.mean_p_neg),
                    opt_fmt(l.mean_confidence),
                    l.eval_map
                ));
            }
            write_lines(&log_path, &lines)?;
            let meta = CheckpointMeta {
                seed,
                stage: "preliminary".into(),
                config_hash: cfg.hash(),
            };
            save_checkpoint(&net, &meta, &out)?;
            println!(
                "trained {} steps; final eval {:.4}; checkpoint {}",
                train_cfg.steps,
                logs.last().map(|l| l.eval_map).unwrap_or(f64::NAN),
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Anneal {
            config,
            dataset: ds_path,
            checkpoint,
            seed,
            loss,
            no_unbiased,
            out,
            log,
        } => {
            let cfg = load_config(&config)?;
            let ds = dataset::load(&ds_path)?;
            let (mut net, meta) = load_checkpoint(&checkpoint)?;
            if meta.stage != "preliminary" {
                return Err(Error::Stage {
                    expected: "preliminary",
                    found: meta.stage,
                });
            }
            let mode = loss.map(LossMode::from).unwrap_or(cfg.loss.mode()?);
            let unbiased = cfg.supervision.enabled && !no_unbiased;
            let seed = seed.unwrap_or(cfg.training.seed);
            let supervisor = load_supervisor(&cfg)?;
            let logs = run_annealing(
                &mut net,
                &ds,
                &cfg.annealing.to_anneal(),
                mode,
                unbiased,
                &cfg.loss.balance(),
                &cfg.loss.triplet(),
                &cfg.supervision.to_supervisor(),
                supervisor.as_ref(),
                seed,
            )?;
            let log_path = log.unwrap_or_else(|| out.with_extension("log.csv"));
            let mut lines =
                vec!["t,bs,thr,lr,loss,mean_confidence,filtered_fraction".to_string()];
            for l in &logs {
                lines.push(format!(
                    "{},{},{},{},{},{},{}",
                    l.t, l.bs, l.thr, l.lr, l.mean_loss, l.mean_confidence, l.filtered_fraction
                ));
            }
            write_lines(&log_path, &lines)?;
            let meta = CheckpointMeta {
                seed,
                stage: "annealed".into(),
                config_hash: cfg.hash(),
            };
            save_checkpoint(&net, &meta, &out)?;
            println!(
                "annealed {} iterations; checkpoint {}",
                logs.len(),
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            checkpoint,
            dataset: ds_path,
            out,
        } => {
            let (net, _) = load_checkpoint(&checkpoint)?;
            let ds = dataset::load(&ds_path)?;
            let rows = per_tier_report(&net, &ds)?;
            let mut lines = vec!["tier,metric,value".to_string()];
            for r in &rows {
                lines.push(format!("{},{},{}", r.tier, r.metric, r.value));
            }
            match out {
                Some(p) => write_lines(&p, &lines)?,
                None => {
                    for l in &lines {
                        println!("{l}");
                    }
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck {
            seed,
            corrupt_gradient,
        } => {
            let report = run_gradcheck(seed, corrupt_gradient)?;
            for c in &report.components {
                let status = if c.max_rel_err <= report.tolerance {
                    "ok"
                } else {
                    "FAIL"
                };
                println!(
                    "{:<24} max_rel_err {:.3e}  {status}",
                    c.name, c.max_rel_err
                );
            }
            if report.passed() {
                println!("gradcheck passed (tolerance {:.0e})", report.tolerance);
                Ok(ExitCode::SUCCESS)
            } else {
                println!("gradcheck FAILED (tolerance {:.0e})", report.tolerance);
                Ok(ExitCode::from(3))
            }
        }
        Command::DumpDistributions {
            config,
            dataset: ds_path,
            checkpoint,
            seed,
            batches,
            out,
        } => {
            let cfg = load_config(&config)?;
            let ds = dataset::load(&ds_path)?;
            let (net, _) = load_checkpoint(&checkpoint)?;
            let seed = seed.unwrap_or(cfg.training.seed);
            let supervisor = load_supervisor(&cfg)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut lines = vec!["d_pos,d_neg,confidence,weight,weighted_d_neg".to_string()];
            for _ in 0..batches {
                let batch = sample_batch(&ds, cfg.training.batch_size.min(ds.num_clusters()), &mut rng)?;
                let stats = batch_gradients(
                    &net,
                    &batch,
                    LossMode::Balance,
                    true,
                    &cfg.loss.balance(),
                    &cfg.loss.triplet(),
                    &cfg.supervision.to_supervisor(),
                    supervisor.as_ref(),
                    None,
                )?;
                let conf = stats.confidences.as_ref().expect("weighting enabled");
                let w = stats.weights.as_ref().expect("weighting enabled");
                for (i, t) in stats.triplets.iter().enumerate() {
                    lines.push(format!(
                        "{},{},{},{},{}",
                        t.d_pos,
                        t.d_neg,
                        conf[i],
                        w[i],
                        w[i] * t.d_neg
                    ));
                }
            }
            write_lines(&out, &lines)?;
            println!("wrote {} rows to {}", lines.len() - 1, out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
