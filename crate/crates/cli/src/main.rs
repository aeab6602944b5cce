use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use symspot::ablate::{run_ablation, synthetic_benchmark, Axis};
use symspot::checkpoint::Checkpoint;
use symspot::config::RunConfig;
use symspot::drawing::io::{load_dataset, save_dataset};
use symspot::drawing::synth::generate_set;
use symspot::drawing::Drawing;
use symspot::train::{evaluate, prediction_json, EpochRecord, Trainer, CHECKPOINT_FILE};

#[derive(Parser)]
#[command(name = "symspot", version, about = "Panoptic symbol spotting on vector drawings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; built-in defaults when absent.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set optim.lr=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        Ok(RunConfig::load(self.config.as_deref(), &self.overrides)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoint.json and metrics.jsonl to output_dir.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from the checkpoint in output_dir.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint and print the per-class PQ/RQ/SQ table.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset JSON; the held-out synthetic split when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Size of the held-out synthetic split.
        #[arg(long, default_value_t = 50)]
        eval_count: usize,
        /// Directory for report.json and report.txt.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        threads: usize,
    },
    /// Per-primitive (class, instance) predictions as JSON.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        threads: usize,
    },
    /// Sweep one axis on the synthetic benchmark.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// pool_type, feat_dim, pgt, epsilon, encoding or multi_scale.
        #[arg(long)]
        axis: Axis,
        #[arg(long, default_value_t = 50)]
        eval_count: usize,
        /// Training seeds per setting; rows report the mean.
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        /// Directory for ablation_<axis>.json and .txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic dataset in the JSON drawing format.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Number of drawings; data.synthetic_count when absent.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { cfg, resume } => train(&cfg, resume),
        Command::Eval {
            checkpoint,
            data,
            eval_count,
            out,
            threads,
        } => eval(&checkpoint, data.as_deref(), eval_count, out.as_deref(), threads),
        Command::Predict {
            checkpoint,
            data,
            out,
            threads,
        } => predict(&checkpoint, &data, out.as_deref(), threads),
        Command::Ablate {
            cfg,
            axis,
            eval_count,
            repeats,
            out,
        } => ablate(&cfg, axis, eval_count, repeats, out.as_deref()),
        Command::GenData { cfg, count, out } => gen_data(&cfg, count, &out),
    }
}

fn log_epoch(rec: &EpochRecord) {
    let l = &rec.loss;
    let mut line = format!(
        "epoch {:>4} lr {:.2e} loss {:.4} (bce {:.4} dice {:.4} cls {:.4} aux {:.4}) recall {:.3} {:.1}s",
        rec.epoch, rec.lr, l.total, l.bce, l.dice, l.cls, l.aux, rec.query_recall, rec.seconds
    );
    if let Some(e) = &rec.eval {
        line.push_str(&format!(" | PQ {:.4} SQ {:.4} RQ {:.4}", e.pq, e.sq, e.rq));
    }
    info!("{line}");
}

/// Training drawings from `data.train`, or the synthetic set.
fn training_data(cfg: &RunConfig) -> Result<Vec<Drawing>> {
    match &cfg.data.train {
        Some(p) => Ok(load_dataset(p).with_context(|| format!("loading {}", p.display()))?.1),
        None => Ok(generate_set(cfg.seed, cfg.data.synthetic_count, &cfg.data.synthetic)?),
    }
}

fn train(args: &ConfigArgs, resume: bool) -> Result<()> {
    let cfg = args.load()?;
    let data = training_data(&cfg)?;
    let Some(first) = data.first() else {
        bail!("the training set is empty");
    };
    let eval_data = match &cfg.data.eval {
        Some(p) => Some(load_dataset(p).with_context(|| format!("loading {}", p.display()))?.1),
        None => None,
    };
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let ck_path = dir.join(CHECKPOINT_FILE);
    let mut trainer = if resume {
        let ck = Checkpoint::load(&ck_path)?;
        info!("resuming from epoch {}", ck.epoch);
        let mut t = Trainer::from_checkpoint(&ck)?;
        // Schedule keys may be extended on resume; architecture keys may not.
        t.model.config.epochs = cfg.epochs;
        t.model.config.eval_every = cfg.eval_every;
        t
    } else {
        Trainer::new(&cfg, &first.vocab)?
    };
    fs::write(dir.join("config.toml"), trainer.model.config.to_toml()?)?;
    info!(
        "training on {} drawings, {} parameters, output in {}",
        data.len(),
        trainer.model.store.num_scalars(),
        dir.display()
    );
    trainer.fit(&data, eval_data.as_deref(), Some(&dir), log_epoch)?;
    if let Some(eval_data) = &eval_data {
        write_report(&trainer.model, eval_data, Some(&dir), cfg.threads)?;
    }
    Ok(())
}

fn write_report(model: &symspot::model::Model, data: &[Drawing], out: Option<&Path>, threads: usize) -> Result<()> {
    let ev = evaluate(model, data, threads)?;
    let table = ev.report.to_table();
    print!("{table}");
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), ev.report.to_json()?)?;
        fs::write(dir.join("report.txt"), &table)?;
        info!("report written to {}", dir.display());
    }
    Ok(())
}

fn eval(checkpoint: &Path, data: Option<&Path>, eval_count: usize, out: Option<&Path>, threads: usize) -> Result<()> {
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let model = ck.model()?;
    let drawings = match data {
        Some(p) => load_dataset(p).with_context(|| format!("loading {}", p.display()))?.1,
        None => synthetic_benchmark(&model.config, eval_count)?.1,
    };
    write_report(&model, &drawings, out, threads)
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
        }
        _ => Ok(()),
    }
}

fn predict(checkpoint: &Path, data: &Path, out: Option<&Path>, threads: usize) -> Result<()> {
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let model = ck.model()?;
    let (_, drawings) = load_dataset(data).with_context(|| format!("loading {}", data.display()))?;
    let ev = evaluate(&model, &drawings, threads)?;
    let records: Vec<_> = drawings
        .iter()
        .zip(&ev.outputs)
        .map(|(d, o)| prediction_json(d, o))
        .collect();
    let text = serde_json::to_string_pretty(&serde_json::json!({ "drawings": records }))?;
    match out {
        Some(p) => {
            create_parent(p)?;
            fs::write(p, text).with_context(|| format!("writing {}", p.display()))?
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn ablate(args: &ConfigArgs, axis: Axis, eval_count: usize, repeats: usize, out: Option<&Path>) -> Result<()> {
    let cfg = args.load()?;
    let report = run_ablation(&cfg, axis, eval_count, repeats, |setting, rec| {
        info!("[{}={setting}] epoch {} loss {:.4}", axis.name(), rec.epoch, rec.loss.total)
    })?;
    let table = report.to_table();
    print!("{table}");
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("ablation_{}.json", axis.name())), report.to_json()?)?;
        fs::write(dir.join(format!("ablation_{}.txt", axis.name())), &table)?;
    }
    Ok(())
}

fn gen_data(args: &ConfigArgs, count: Option<usize>, out: &Path) -> Result<()> {
    let cfg = args.load()?;
    let n = count.unwrap_or(cfg.data.synthetic_count);
    let drawings = generate_set(cfg.seed, n, &cfg.data.synthetic)?;
    let vocab = symspot::drawing::synth::synthetic_vocab(cfg.data.synthetic.num_classes)?;
    create_parent(out)?;
    save_dataset(out, &vocab, &drawings)?;
    info!("wrote {n} drawings to {}", out.display());
    Ok(())
}
