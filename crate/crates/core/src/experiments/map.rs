//! Period scan of `f_a(x) = x e^{a(1-x)}` over a grid of growth parameters.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ensure_dir, write_manifest, Report};
use crate::error::{Error, Result};
use crate::lab::{detect_period, map_fa, map_iterate};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapConfig {
    pub a_min: f64,
    pub a_max: f64,
    /// Grid points including both ends.
    pub a_steps: usize,
    /// Values scanned in addition to the grid.
    pub extra: Vec<f64>,
    /// Starting point; `None` starts at the maximiser `1/a`.
    pub x0: Option<f64>,
    pub burn_in: usize,
    pub max_period: usize,
    pub tol: f64,
    pub orbit_samples: usize,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            a_min: 0.5,
            a_max: 3.6,
            a_steps: 32,
            extra: vec![2.0, 3.1167, 3.2, 3.5],
            x0: None,
            burn_in: 500,
            max_period: 64,
            tol: 1e-3,
            orbit_samples: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MapRow {
    pub a: f64,
    pub x0: f64,
    pub period: Option<usize>,
    pub orbit: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct MapOutcome {
    pub rows: Vec<MapRow>,
    pub report: Report,
}

pub fn run(cfg: &MapConfig, out: Option<&Path>) -> Result<MapOutcome> {
    if !(cfg.tol > 0.0) || cfg.max_period == 0 || !(cfg.a_min > 0.0) || cfg.a_max < cfg.a_min {
        return Err(Error::Config("map needs tol > 0, max_period >= 1, 0 < a_min <= a_max".into()));
    }
    let mut grid: Vec<f64> = match cfg.a_steps {
        0 => Vec::new(),
        1 => vec![cfg.a_min],
        n => (0..n)
            .map(|i| cfg.a_min + (cfg.a_max - cfg.a_min) * i as f64 / (n - 1) as f64)
            .collect(),
    };
    grid.extend(cfg.extra.iter().copied().filter(|a| *a > 0.0));
    grid.sort_by(f64::total_cmp);
    grid.dedup();

    let rows: Vec<MapRow> = grid
        .into_iter()
        .map(|a| {
            let x0 = cfg.x0.unwrap_or(1.0 / a);
            let mut x = x0;
            for _ in 0..cfg.burn_in {
                x = map_fa(a, x);
            }
            MapRow {
                a,
                x0,
                period: detect_period(a, x0, cfg.max_period, cfg.burn_in, cfg.tol),
                orbit: map_iterate(a, x, cfg.orbit_samples.saturating_sub(1)),
            }
        })
        .collect();

    let mut report = Report::default();
    let expect = [(0.5, Some(1)), (3.1167, Some(3)), (3.5, None)];
    for (a, want) in expect {
        if let Some(r) = rows.iter().find(|r| (r.a - a).abs() < 1e-12) {
            report.check(
                format!("period at a={a}"),
                r.period == want,
                format!("detected {:?}, expected {want:?}", r.period),
            );
        }
    }

    if let Some(dir) = out {
        let dir = ensure_dir(dir.to_path_buf())?;
        let mut w = csv::Writer::from_path(dir.join("bifurcation.csv"))?;
        w.write_record(["a", "x0", "period"])?;
        for r in &rows {
            w.write_record(&[
                r.a.to_string(),
                r.x0.to_string(),
                r.period.map_or_else(|| "none".to_string(), |p| p.to_string()),
            ])?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(dir.join("orbits.csv"))?;
        w.write_record(["a", "k", "x"])?;
        for r in &rows {
            for (k, x) in r.orbit.iter().enumerate() {
                w.write_record(&[r.a.to_string(), k.to_string(), x.to_string()])?;
            }
        }
        w.flush()?;
        write_manifest(&dir, "map", cfg)?;
    }
    Ok(MapOutcome { rows, report })
}
