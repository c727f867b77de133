//! Grid runner: (strategy x holdout x seed) cells, each an isolated job
//! writing into its own directory under `out/<config-hash>/`.

use crate::config::ExperimentConfig;
use crate::record::{
    write_history_csv, BiasHeadScores, RunRecord, CHECKPOINT_FILE, EMBEDDINGS_FILE, HISTORY_FILE,
    RECORD_FILE,
};
use anyhow::{bail, Context, Result};
use debias_core::datagen::{derive_seed, lodo_split, DomainDataset, Split};
use debias_core::metrics::{c2st_multi, cross_dataset_report, export_embeddings};
use debias_core::tensor::Tensor;
use debias_core::trainer::{train, Strategy, TrainedModel};
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// One grid coordinate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cell {
    pub strategy: Strategy,
    pub holdout: String,
    pub seed: u64,
}

#[derive(Debug)]
pub struct GridOutcome {
    pub run_dir: PathBuf,
    pub executed: Vec<Cell>,
    pub skipped: Vec<Cell>,
}

/// Directory of one cell.
pub fn cell_dir(run_dir: &Path, cell: &Cell) -> PathBuf {
    run_dir
        .join(cell.strategy.name())
        .join(&cell.holdout)
        .join(format!("seed{}", cell.seed))
}

/// Enumerate the full grid in deterministic order.
pub fn enumerate_cells(cfg: &ExperimentConfig, holdouts: &[String]) -> Vec<Cell> {
    let mut cells = Vec::new();
    for &strategy in &cfg.strategies {
        for holdout in holdouts {
            for &seed in &cfg.seeds {
                cells.push(Cell { strategy, holdout: holdout.clone(), seed });
            }
        }
    }
    cells
}

/// Run the whole grid. Completed cells (a `run_record.json` exists) are
/// never re-run or overwritten.
pub fn run_grid(cfg: &ExperimentConfig) -> Result<GridOutcome> {
    let datasets = cfg.data.load()?;
    let holdouts = cfg.lodo.resolve(&datasets)?;
    let run_dir = cfg.out_root().join(cfg.hash());
    std::fs::create_dir_all(&run_dir)?;
    // keep the resolved config next to the results for later eval/report
    let cfg_path = run_dir.join("config.json");
    if !cfg_path.exists() {
        std::fs::write(&cfg_path, serde_json::to_string_pretty(cfg)?)?;
    }

    let cells = enumerate_cells(cfg, &holdouts);
    let (todo, skipped): (Vec<Cell>, Vec<Cell>) = cells
        .into_iter()
        .partition(|c| !RunRecord::exists(&cell_dir(&run_dir, c)));

    let results: Vec<Result<()>> = todo
        .par_iter()
        .map(|cell| {
            run_cell(cfg, &datasets, &run_dir, cell)
                .with_context(|| format!("cell {}/{}/seed{}", cell.strategy.name(), cell.holdout, cell.seed))
        })
        .collect();
    for r in results {
        r?;
    }
    Ok(GridOutcome { run_dir, executed: todo, skipped })
}

/// Train one cell and write its artifacts.
pub fn run_cell(
    cfg: &ExperimentConfig,
    datasets: &[DomainDataset],
    run_dir: &Path,
    cell: &Cell,
) -> Result<()> {
    let started = Instant::now();
    let dir = cell_dir(run_dir, cell);
    std::fs::create_dir_all(&dir)?;

    let split = lodo_split(datasets, &cell.holdout)?;
    let internal: Vec<&DomainDataset> = split.internal.iter().map(|&i| &datasets[i]).collect();
    if cell.strategy.models_bias() && internal.len() < 2 {
        bail!(
            "strategy {} needs at least 2 internal domains, got {}",
            cell.strategy.name(),
            internal.len()
        );
    }
    let train_cfg = cfg.train.to_train_config(cell.strategy, cell.seed);
    let outcome = train(&train_cfg, &internal)?;

    write_history_csv(&dir.join(HISTORY_FILE), &outcome.history)?;
    debias_core::checkpoint::save_model(&outcome.model, &dir.join(CHECKPOINT_FILE))?;

    let (report, bias_head_internal) = evaluate_model(cfg, &outcome.model, datasets, cell)?;

    // embeddings of every domain's test split, for scatter plots and
    // offline classifier tests
    let emb_sets: Vec<(String, Tensor, Tensor)> = datasets
        .iter()
        .map(|d| (d.name.clone(), d.split_x(Split::Test), d.split_y(Split::Test)))
        .collect();
    export_embeddings(&outcome.model.net, &emb_sets, &dir.join(EMBEDDINGS_FILE))?;

    let record = RunRecord {
        config_hash: cfg.hash(),
        data_hash: cfg.data_hash(),
        strategy: cell.strategy,
        holdout: cell.holdout.clone(),
        seed: cell.seed,
        report,
        final_val: outcome.final_val,
        bias_head_internal,
        history_path: HISTORY_FILE.into(),
        checkpoint_path: CHECKPOINT_FILE.into(),
        embeddings_path: EMBEDDINGS_FILE.into(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
        complete: true,
    };
    record.write(&dir)?;
    Ok(())
}

/// Score a trained model under a cell's LODO split: per-domain test scores,
/// the cross-dataset report, the embedding classifier test, and the
/// bias-head own-domain comparison.
pub fn evaluate_model(
    cfg: &ExperimentConfig,
    model: &TrainedModel,
    datasets: &[DomainDataset],
    cell: &Cell,
) -> Result<(debias_core::metrics::BiasReport, Option<BiasHeadScores>)> {
    let split = lodo_split(datasets, &cell.holdout)?;
    let internal: Vec<&DomainDataset> = split.internal.iter().map(|&i| &datasets[i]).collect();
    let external: Vec<&DomainDataset> = split.external.iter().map(|&i| &datasets[i]).collect();

    let mut per_domain = BTreeMap::new();
    for d in datasets {
        let x = d.split_x(Split::Test);
        let y = d.split_y(Split::Test);
        per_domain.insert(d.name.clone(), model.score_vw(&x, &y)?);
    }
    let internal_names: Vec<String> = internal.iter().map(|d| d.name.clone()).collect();
    let external_names: Vec<String> = external.iter().map(|d| d.name.clone()).collect();
    let mut report = cross_dataset_report(&per_domain, &internal_names, &external_names)?;

    // classifier test on the learned embeddings of the internal test sets,
    // averaged over probe seeds
    let emb: Vec<Tensor> = internal
        .iter()
        .map(|d| model.embed(&d.split_x(Split::Test)))
        .collect::<debias_core::Result<_>>()?;
    let mut accs = Vec::with_capacity(cfg.c2st.probe_seeds.max(1));
    for probe in 0..cfg.c2st.probe_seeds.max(1) {
        let c2st_seed = derive_seed(cell.seed, &format!("c2st-probe-{probe}"));
        let c2st_cfg = cfg.c2st.to_config(c2st_seed);
        accs.push(c2st_multi(&emb, &c2st_cfg)?.accuracy);
    }
    report.c2st_acc = Some(accs.iter().sum::<f64>() / accs.len() as f64);

    // own-domain bias-head comparison for the bias-modeling strategies;
    // trained domain index i corresponds to internal[i]
    let bias_head_internal = if cell.strategy.models_bias() {
        let mut vw_sum = 0.0;
        let mut bias_sum = 0.0;
        for (i, d) in internal.iter().enumerate() {
            let x = d.split_x(Split::Test);
            let y = d.split_y(Split::Test);
            vw_sum += model.score_vw(&x, &y)?;
            let logits = model.predict_bias(i, &x)?;
            bias_sum += model.score_logits(&logits, &y)?;
        }
        Some(BiasHeadScores {
            vw: vw_sum / internal.len() as f64,
            bias: bias_sum / internal.len() as f64,
        })
    } else {
        None
    };

    Ok((report, bias_head_internal))
}

/// Recompute a completed cell's metrics from its checkpoint. Returns the
/// stored record and the freshly recomputed (final_val, report).
pub fn reevaluate_cell(
    cfg: &ExperimentConfig,
    run_dir: &Path,
    cell: &Cell,
) -> Result<(RunRecord, Option<f64>, debias_core::metrics::BiasReport)> {
    let dir = cell_dir(run_dir, cell);
    let record = RunRecord::read(&dir)?;
    let datasets = cfg.data.load()?;
    let model = debias_core::checkpoint::load_model(&dir.join(&record.checkpoint_path))?;

    // validation metric over the internal domains, same computation as the
    // trainer's final eval
    let split = lodo_split(&datasets, &cell.holdout)?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for &i in &split.internal {
        let x = datasets[i].split_x(Split::Val);
        if x.rows() > 0 {
            xs.push(x);
            ys.push(datasets[i].split_y(Split::Val));
        }
    }
    let final_val = if xs.is_empty() {
        None
    } else {
        let x = concat_rows(&xs)?;
        let y = concat_rows(&ys)?;
        Some(model.score_vw(&x, &y)?)
    };

    let (report, _) = evaluate_model(cfg, &model, &datasets, cell)?;
    Ok((record, final_val, report))
}

fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
    let cols = parts[0].cols();
    let mut data = Vec::new();
    let mut rows = 0;
    for p in parts {
        data.extend_from_slice(p.data());
        rows += p.rows();
    }
    Ok(Tensor::new(vec![rows, cols], data)?)
}

/// Remove a stale partial cell (no complete record) so a fresh run starts
/// clean. Completed cells are left alone.
pub fn clean_partial_cell(run_dir: &Path, cell: &Cell) -> Result<bool> {
    let dir = cell_dir(run_dir, cell);
    if dir.is_dir() && !dir.join(RECORD_FILE).is_file() {
        std::fs::remove_dir_all(&dir)?;
        return Ok(true);
    }
    Ok(false)
}
