//! `sweep`: one full pipeline run per axis value on shared seeds, collected
//! into a plot-ready CSV. Per-run failures land in the row's error column
//! and the sweep continues.

use crate::config::PipelineConfig;
use crate::pipeline::{cmd_attach, cmd_cache, cmd_eval, cmd_induce, cmd_infer};
use gapa_core::error::{GapaError, Result};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    M,
    K,
    LayerPlacement,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::M => "m",
            Self::K => "k",
            Self::LayerPlacement => "layer",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub value: usize,
    pub nll: Option<f64>,
    pub ece: Option<f64>,
    pub ood_auroc: Option<f64>,
    pub bald_auroc: Option<f64>,
    pub setup_seconds: f64,
    pub query_seconds: f64,
    pub error: Option<String>,
}

fn run_value(cfg: &PipelineConfig) -> Result<(BTreeMap<String, serde_json::Value>, f64, f64)> {
    let setup_start = Instant::now();
    cmd_cache(cfg)?;
    cmd_induce(cfg)?;
    cmd_attach(cfg)?;
    let setup = setup_start.elapsed().as_secs_f64();
    let query_start = Instant::now();
    cmd_infer(cfg)?;
    let query = query_start.elapsed().as_secs_f64();
    let report = cmd_eval(cfg)?;
    Ok((report, setup, query))
}

fn get_num(report: &BTreeMap<String, serde_json::Value>, key: &str) -> Option<f64> {
    report.get(key).and_then(|v| v.as_f64())
}

/// Runs the sweep and writes `sweep_<axis>.csv` under the base out_dir.
/// Returns the rows in ascending axis-value order (the CSV order).
pub fn cmd_sweep(
    base: &PipelineConfig,
    axis: SweepAxis,
    values: &[usize],
) -> Result<(PathBuf, Vec<SweepRow>)> {
    if values.is_empty() {
        return Err(GapaError::InvalidParameter {
            what: "sweep needs at least one axis value".into(),
        });
    }
    let mut values = values.to_vec();
    values.sort_unstable();
    values.dedup();

    let mut rows = Vec::new();
    for &value in &values {
        let mut cfg = base.clone();
        cfg.out_dir = base.out_dir.join(format!("sweep_{}_{}", axis.name(), value));
        match axis {
            SweepAxis::M => cfg.m = Some(value),
            SweepAxis::K => cfg.k = value,
            SweepAxis::LayerPlacement => cfg.gapa_layers = Some(vec![value]),
        }
        let row = match cfg.validate().and_then(|()| {
            fs::create_dir_all(&cfg.out_dir)?;
            run_value(&cfg)
        }) {
            Ok((report, setup, query)) => SweepRow {
                value,
                nll: get_num(&report, "nll").or_else(|| get_num(&report, "gaussian_nll")),
                ece: get_num(&report, "ece"),
                ood_auroc: get_num(&report, "ood_auroc_entropy"),
                bald_auroc: get_num(&report, "ood_auroc_bald"),
                setup_seconds: setup,
                query_seconds: query,
                error: None,
            },
            Err(e) => SweepRow {
                value,
                nll: None,
                ece: None,
                ood_auroc: None,
                bald_auroc: None,
                setup_seconds: 0.0,
                query_seconds: 0.0,
                error: Some(e.to_string()),
            },
        };
        rows.push(row);
    }

    let mut csv = String::from(
        "value,nll,ece,ood_auroc_entropy,ood_auroc_bald,setup_seconds,query_seconds,error\n",
    );
    for r in &rows {
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            r.value,
            cell(r.nll),
            cell(r.ece),
            cell(r.ood_auroc),
            cell(r.bald_auroc),
            r.setup_seconds,
            r.query_seconds,
            r.error.clone().unwrap_or_default().replace(',', ";")
        )
        .expect("string write");
    }
    fs::create_dir_all(&base.out_dir)?;
    let path = base.out_dir.join(format!("sweep_{}.csv", axis.name()));
    fs::write(&path, csv)?;
    Ok((path, rows))
}
