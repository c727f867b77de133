use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use debias_cli::config::{DataConfig, ExperimentConfig, LodoPlan};
use debias_cli::report::{aggregate, collect_records, write_summary};
use debias_cli::runner::{run_grid, reevaluate_cell, Cell};
use debias_core::metrics::c2st_multi;
use debias_core::tensor::Tensor;
use debias_core::trainer::{Strategy, TapSelector};
use std::path::PathBuf;
use std::str::FromStr;

#[derive(Parser)]
#[command(
    name = "debias-dg",
    about = "Multi-source domain-generalization training with bias-regularized heads and cross-gradient augmentation",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Overrides {
    /// Experiment config file (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Restrict to these strategies (repeatable)
    #[arg(long = "strategy")]
    strategies: Vec<String>,
    /// Restrict to these held-out domains (repeatable)
    #[arg(long = "holdout")]
    holdouts: Vec<String>,
    /// Restrict to these seeds (repeatable)
    #[arg(long = "seed")]
    seeds: Vec<u64>,
    /// Output root (overrides config and DEBIAS_DG_OUT)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Perturbation step size
    #[arg(long)]
    epsilon: Option<f64>,
    /// Learning rate
    #[arg(long)]
    eta: Option<f64>,
    /// Training steps
    #[arg(long)]
    steps: Option<usize>,
    /// Tap set: "input-and-last", "all-but-last", or a comma list of taps
    #[arg(long = "tap-set")]
    tap_set: Option<String>,
}

impl Overrides {
    fn apply(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::from_file(&self.config)?;
        if !self.strategies.is_empty() {
            cfg.strategies = self
                .strategies
                .iter()
                .map(|s| Strategy::from_str(s).map_err(anyhow::Error::from))
                .collect::<Result<Vec<_>>>()?;
        }
        if !self.holdouts.is_empty() {
            cfg.lodo = LodoPlan::Holdouts(self.holdouts.clone());
        }
        if !self.seeds.is_empty() {
            cfg.seeds = self.seeds.clone();
        }
        if let Some(out) = &self.out {
            cfg.out_dir = Some(out.clone());
        }
        if let Some(e) = self.epsilon {
            cfg.train.epsilon = e;
        }
        if let Some(e) = self.eta {
            cfg.train.eta = e;
        }
        if let Some(s) = self.steps {
            cfg.train.steps = s;
        }
        if let Some(t) = &self.tap_set {
            cfg.train.tap_set = TapSelector::from_str(t)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the configured datasets and write them to disk
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Target directory (one subdirectory per domain)
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the strategy x holdout x seed grid
    Train(Overrides),
    /// Recompute metrics of a completed cell from its checkpoint
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        strategy: String,
        #[arg(long)]
        holdout: String,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Classifier two-sample test on raw features or saved embeddings
    C2st {
        /// First dataset directory (raw-feature mode)
        #[arg(long)]
        a: Option<PathBuf>,
        /// Second dataset directory (raw-feature mode)
        #[arg(long)]
        b: Option<PathBuf>,
        /// Embeddings CSV from a training run (multiclass over its domains)
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 400)]
        steps: usize,
    },
    /// Aggregate run records into summary tables
    Report(Overrides),
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::GenData { config, out } => gen_data(&config, &out),
        Cmd::Train(ov) => {
            let cfg = ov.apply()?;
            let outcome = run_grid(&cfg)?;
            println!(
                "run {} complete: {} cells executed, {} already done",
                outcome.run_dir.display(),
                outcome.executed.len(),
                outcome.skipped.len()
            );
            Ok(())
        }
        Cmd::Eval { config, strategy, holdout, seed, out } => {
            let mut cfg = ExperimentConfig::from_file(&config)?;
            if let Some(o) = out {
                cfg.out_dir = Some(o);
            }
            let run_dir = cfg.out_root().join(cfg.hash());
            let cell = Cell { strategy: Strategy::from_str(&strategy)?, holdout, seed };
            let (record, final_val, report) = reevaluate_cell(&cfg, &run_dir, &cell)?;
            println!("stored   final_val={:?} self={:.6} others={:.6}",
                record.final_val, record.report.self_score, record.report.others);
            println!("recomputed final_val={final_val:?} self={:.6} others={:.6}",
                report.self_score, report.others);
            let matches = match (record.final_val, final_val) {
                (Some(a), Some(b)) => (a - b).abs() < 1e-10,
                (None, None) => true,
                _ => false,
            } && (record.report.self_score - report.self_score).abs() < 1e-10
                && (record.report.others - report.others).abs() < 1e-10;
            if !matches {
                bail!("recomputed metrics do not match the stored record");
            }
            println!("match within 1e-10");
            Ok(())
        }
        Cmd::C2st { a, b, embeddings, seed, steps } => c2st_cmd(a, b, embeddings, seed, steps),
        Cmd::Report(ov) => {
            let cfg = ov.apply()?;
            let run_dir = cfg.out_root().join(cfg.hash());
            let records = collect_records(&run_dir)?;
            if records.is_empty() {
                bail!("no completed run records under {}", run_dir.display());
            }
            let summary = aggregate(&records)?;
            write_summary(&summary, &run_dir)?;
            println!("wrote {} and {}",
                run_dir.join("summary.csv").display(),
                run_dir.join("overall.csv").display());
            for row in &summary.rows {
                println!(
                    "{:<10} holdout={:<8} self={:.4}±{:.4} others={:.4}±{:.4} pd={} c2st={}",
                    row.strategy,
                    row.holdout,
                    row.self_mean,
                    row.self_std,
                    row.others_mean,
                    row.others_std,
                    row.pd_mean.map_or("-".into(), |v| format!("{v:.4}")),
                    row.c2st_mean.map_or("-".into(), |v| format!("{v:.4}")),
                );
            }
            Ok(())
        }
    }
}

fn gen_data(config: &PathBuf, out: &PathBuf) -> Result<()> {
    let cfg = ExperimentConfig::from_file(config)?;
    if matches!(cfg.data, DataConfig::Paths { .. }) {
        bail!("config data source is already on-disk paths; nothing to generate");
    }
    let datasets = cfg.data.load()?;
    for ds in &datasets {
        let dir = out.join(&ds.name);
        debias_core::datagen::write_dataset(ds, &dir)?;
        println!(
            "wrote {} ({} rows, {} features, {} labels)",
            dir.display(),
            ds.n_rows(),
            ds.n_features(),
            ds.n_labels()
        );
    }
    Ok(())
}

fn c2st_cmd(
    a: Option<PathBuf>,
    b: Option<PathBuf>,
    embeddings: Option<PathBuf>,
    seed: u64,
    steps: usize,
) -> Result<()> {
    let cfg = debias_core::metrics::C2stConfig { seed, steps, ..Default::default() };
    let outcome = match (a, b, embeddings) {
        (Some(a), Some(b), None) => {
            let da = debias_core::datagen::read_dataset(&a)?;
            let db = debias_core::datagen::read_dataset(&b)?;
            println!("raw-feature test: {} vs {}", da.name, db.name);
            c2st_multi(&[da.x, db.x], &cfg)?
        }
        (None, None, Some(path)) => {
            let sets = load_embedding_sets(&path)?;
            println!(
                "embedding test over {} domains: {}",
                sets.len(),
                sets.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>().join(", ")
            );
            let tensors: Vec<Tensor> = sets.into_iter().map(|(_, t)| t).collect();
            c2st_multi(&tensors, &cfg)?
        }
        _ => bail!("use either --a and --b (dataset dirs) or --embeddings (csv)"),
    };
    println!(
        "accuracy {:.4} (chance {:.4}) -> {}",
        outcome.accuracy,
        outcome.chance,
        if outcome.distinct { "sources are distinguishable" } else { "indistinguishable from chance" }
    );
    Ok(())
}

/// Parse an embeddings CSV (domain,label,z1..zk) into per-domain matrices.
fn load_embedding_sets(path: &PathBuf) -> Result<Vec<(String, Tensor)>> {
    let mut reader = csv::Reader::from_path(path)
        .with_context(|| format!("reading embeddings {}", path.display()))?;
    let headers = reader.headers()?.clone();
    if headers.len() < 3 || &headers[0] != "domain" {
        bail!("not an embeddings csv (expected domain,label,z1..)");
    }
    let dim = headers.len() - 2;
    let mut by_domain: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
    for row in reader.records() {
        let row = row?;
        let dom = row[0].to_string();
        let vals = by_domain.entry(dom).or_default();
        for j in 2..row.len() {
            vals.push(row[j].parse::<f64>().context("bad embedding value")?);
        }
    }
    let mut out = Vec::new();
    for (dom, vals) in by_domain {
        let n = vals.len() / dim;
        out.push((dom, Tensor::new(vec![n, dim], vals)?));
    }
    Ok(out)
}
