use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{set_path, train, TrainConfig, TrainSummary};
use crate::dataset::FeatureDataset;
use crate::error::{Error, Result};
use crate::eval::DirectionReport;

/// One grid dimension: a dotted config path and the values it takes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub key: String,
    pub values: Vec<Value>,
}

/// Cartesian product of `axes`, each cell trained once per seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub axes: Vec<Axis>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.axes.is_empty() || self.axes.iter().any(|a| a.values.is_empty()) {
            return Err(Error::Config("ablation grid has no cells".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("ablation grid has no seeds".into()));
        }
        Ok(())
    }

    /// Override sets in row-major order (last axis fastest).
    pub fn cells(&self) -> Vec<Vec<(String, Value)>> {
        let mut out: Vec<Vec<(String, Value)>> = vec![vec![]];
        for axis in &self.axes {
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    axis.values.iter().map(move |v| {
                        let mut c = prefix.clone();
                        c.push((axis.key.clone(), v.clone()));
                        c
                    })
                })
                .collect();
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationCell {
    pub cell: usize,
    pub seed: u64,
    pub overrides: Vec<(String, Value)>,
    pub outcome: std::result::Result<TrainSummary, String>,
}

/// Fixed metric columns following the per-cell key columns.
pub const CSV_COLUMNS: [&str; 12] = [
    "s2c_r1", "s2c_r5", "s2c_r10", "s2c_mr", "c2s_r1", "c2s_r5", "c2s_r10", "c2s_mr", "rsum",
    "best_iter", "best_rsum", "error",
];

/// Trains every cell of the grid (in parallel on the current rayon pool)
/// and returns results in cell order. A failing cell is recorded, not fatal.
pub fn run_ablation(dataset: &FeatureDataset, base: &TrainConfig, grid: &GridSpec) -> Result<Vec<AblationCell>> {
    grid.validate()?;
    let jobs: Vec<_> = grid
        .cells()
        .into_iter()
        .enumerate()
        .flat_map(|(i, c)| grid.seeds.iter().map(move |&s| (i, s, c.clone())))
        .collect();
    let mut probe = serde_json::to_value(base).expect("config serializes");
    for axis in &grid.axes {
        set_path(&mut probe, &axis.key, Value::Null)?;
    }
    Ok(jobs
        .into_par_iter()
        .map(|(cell, seed, overrides)| {
            let outcome = base
                .with_overrides(&overrides)
                .and_then(|mut cfg| {
                    cfg.seed = seed;
                    let out = train::<f32>(dataset, &cfg, &mut |_| Ok(()))?;
                    Ok(TrainSummary {
                        final_report: out.final_report,
                        best_iter: out.best.0,
                        best: out.best.2,
                    })
                })
                .map_err(|e| e.to_string());
            AblationCell { cell, seed, overrides, outcome }
        })
        .collect())
}

/// Writes one row per cell: `cell, seed, <axis keys...>`, then [`CSV_COLUMNS`].
pub fn write_ablation_csv<W: Write>(grid: &GridSpec, cells: &[AblationCell], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["cell".to_string(), "seed".to_string()];
    header.extend(grid.axes.iter().map(|a| a.key.clone()));
    header.extend(CSV_COLUMNS.iter().map(|s| s.to_string()));
    let err = |e: csv::Error| Error::Input(format!("csv: {e}"));
    w.write_record(&header).map_err(err)?;
    let dir = |d: &Option<DirectionReport>| -> Vec<String> {
        match d {
            Some(d) => vec![d.r1.to_string(), d.r5.to_string(), d.r10.to_string(), d.mr.to_string()],
            None => vec![String::new(); 4],
        }
    };
    for c in cells {
        let mut rec = vec![c.cell.to_string(), c.seed.to_string()];
        rec.extend(c.overrides.iter().map(|(_, v)| match v {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        }));
        match &c.outcome {
            Ok(s) => {
                rec.extend(dir(&s.final_report.s2c));
                rec.extend(dir(&s.final_report.c2s));
                rec.push(s.final_report.rsum.to_string());
                rec.push(s.best_iter.to_string());
                rec.push(s.best.rsum.to_string());
                rec.push(String::new());
            }
            Err(e) => {
                rec.extend(std::iter::repeat_n(String::new(), CSV_COLUMNS.len() - 1));
                rec.push(e.clone());
            }
        }
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io("csv output", e))
}
