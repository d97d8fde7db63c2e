//! Run outputs: `metrics.csv` and `summary.json`.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::Result;
use crate::federation::FedRun;
use crate::metrics::RoundMetrics;

/// Budget tiers in ascending order, duplicates removed.
pub fn budget_tiers(cfg: &RunConfig) -> Vec<f64> {
    let mut tiers = cfg.budgets.clone();
    tiers.sort_by(f64::total_cmp);
    tiers.dedup();
    tiers
}

pub fn metrics_header(cfg: &RunConfig) -> Vec<String> {
    let mut h = vec!["round".to_string()];
    h.extend(budget_tiers(cfg).iter().map(|b| format!("loss_beta_{b}")));
    h.extend((0..cfg.model.layers).map(|l| format!("entropy_layer{l}")));
    for c in ["mean_entropy", "mean_gini", "pearson_r", "global_loss", "train_loss", "client_flops"] {
        h.push(c.to_string());
    }
    h
}

fn row(cfg: &RunConfig, m: &RoundMetrics) -> Vec<String> {
    let mut r = vec![m.round.to_string()];
    // tiers with no participant this round stay blank
    for b in budget_tiers(cfg) {
        r.push(m.loss_by_budget.iter().find(|(t, _)| *t == b).map(|(_, l)| l.to_string()).unwrap_or_default());
    }
    r.extend(m.layer_entropy.iter().map(f64::to_string));
    r.push(m.mean_entropy.to_string());
    r.push(m.mean_gini.to_string());
    r.push(m.pearson_r.map(|v| v.to_string()).unwrap_or_default());
    r.push(m.global_loss.to_string());
    r.push(m.train_loss.to_string());
    r.push(m.client_flops.iter().map(|(_, f)| f).sum::<f64>().to_string());
    r
}

/// Fixed header, one row per round, LF endings.
pub fn write_metrics_csv<W: Write>(cfg: &RunConfig, metrics: &[RoundMetrics], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(metrics_header(cfg))?;
    for m in metrics {
        w.write_record(row(cfg, m))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct Summary<'a> {
    pub seed: u64,
    pub wall_time_secs: f64,
    pub rounds_completed: usize,
    pub final_metrics: Option<&'a RoundMetrics>,
    pub config: &'a RunConfig,
}

pub fn summary<'a>(cfg: &'a RunConfig, run: &'a FedRun, wall_time_secs: f64) -> Summary<'a> {
    Summary {
        seed: cfg.seed,
        wall_time_secs,
        rounds_completed: run.metrics.len(),
        final_metrics: run.metrics.last(),
        config: cfg,
    }
}

/// Writes both files into `dir`, creating it if needed.
pub fn write_run(dir: &Path, cfg: &RunConfig, run: &FedRun, wall_time_secs: f64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let f = std::fs::File::create(dir.join("metrics.csv"))?;
    write_metrics_csv(cfg, &run.metrics, std::io::BufWriter::new(f))?;
    let text = serde_json::to_string_pretty(&summary(cfg, run, wall_time_secs))?;
    std::fs::write(dir.join("summary.json"), text + "\n")?;
    Ok(())
}
