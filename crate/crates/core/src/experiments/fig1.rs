//! Fitting `F(x) = c x` with the linear field `a z(⌊t/τ⌋τ) + b` over one or
//! more delay intervals.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ensure_dir, median, write_manifest, Report};
use crate::error::{Error, Result};
use crate::field::MlpParams;
use crate::lab::gen_linear_dataset;
use crate::model::{ModelKind, ModelParams, ModelSpec};
use crate::tensor::Tensor;
use crate::train::{train_with, Model, Sample, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Fig1Config {
    pub xs: Vec<f64>,
    pub slope: f64,
    pub tau: f64,
    /// Interval counts to compare; `T = n τ`.
    pub variants: Vec<usize>,
    /// Loss level whose first crossing is compared across variants.
    pub threshold: f64,
    pub seed: u64,
    pub n_seeds: usize,
    pub train: TrainConfig,
}

impl Default for Fig1Config {
    fn default() -> Self {
        Self {
            xs: vec![2.0, -2.0, 1.0, -1.0, 0.5, -0.5, 0.25, -0.25],
            slope: 16.0,
            tau: 1.0,
            variants: vec![1, 2],
            threshold: 1e-3,
            seed: 0,
            n_seeds: 5,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariantResult {
    pub n_intervals: usize,
    pub seed: u64,
    pub a: f64,
    pub b: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// First step whose loss is below the threshold.
    pub first_below: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct Fig1Outcome {
    pub runs: Vec<VariantResult>,
    pub report: Report,
}

pub fn linear_model(tau: f64, n_intervals: usize) -> Result<Model> {
    Ok(Model::new(
        ModelSpec::builder(ModelKind::NpcddeSimple, 1)
            .tau(tau)
            .intervals(n_intervals)
            .build(ModelParams::Shared(MlpParams::linear(0.0, 0.0)))?,
    ))
}

fn ab(model: &Model) -> (f64, f64) {
    let p = model.spec.params.flatten();
    (p[0], p[1])
}

pub fn run(cfg: &Fig1Config, out: Option<&Path>) -> Result<Fig1Outcome> {
    if cfg.variants.is_empty() || cfg.n_seeds == 0 || cfg.xs.is_empty() {
        return Err(Error::Config("fig1 needs variants, xs and n_seeds >= 1".into()));
    }
    let mut runs = Vec::new();
    for &n in &cfg.variants {
        let t_end = n as f64 * cfg.tau;
        let data: Vec<Sample> = gen_linear_dataset(cfg.slope, &cfg.xs)
            .into_iter()
            .map(|(x, y)| Sample {
                x: Tensor::scalar(x),
                targets: vec![(t_end, Tensor::scalar(y))],
            })
            .collect();
        for seed in cfg.seed..cfg.seed + cfg.n_seeds as u64 {
            let model = linear_model(cfg.tau, n)?;
            let mut params_log = Vec::new();
            let tc = TrainConfig { seed, ..cfg.train.clone() };
            let initial_loss = model.loss(&data)?;
            let (model, hist) = train_with(model, &tc, &data, &mut |step: usize, m: &Model, _| {
                let (a, b) = ab(m);
                params_log.push((step, a, b));
                Ok(None)
            })?;
            let (a, b) = ab(&model);
            params_log.push((tc.iterations, a, b));
            let first_below = hist
                .train
                .iter()
                .find(|(_, l)| *l < cfg.threshold)
                .map(|(s, _)| *s);
            if let Some(dir) = out {
                let dir = ensure_dir(dir.join(format!("T{n}tau")).join(format!("seed{seed}")))?;
                hist.write_csv(&dir.join("loss.csv"), &[])?;
                let mut w = csv::Writer::from_path(dir.join("params.csv"))?;
                w.write_record(["step", "a", "b"])?;
                for (s, a, b) in &params_log {
                    w.write_record(&[s.to_string(), a.to_string(), b.to_string()])?;
                }
                w.flush()?;
            }
            runs.push(VariantResult {
                n_intervals: n,
                seed,
                a,
                b,
                initial_loss,
                final_loss: hist.final_loss,
                first_below,
            });
        }
    }

    let mut report = Report::default();
    for r in &runs {
        report.check(
            format!("T={}tau seed {} loss decreased", r.n_intervals, r.seed),
            r.final_loss < r.initial_loss,
            format!("{:.3e} -> {:.3e}", r.initial_loss, r.final_loss),
        );
    }
    let median_first = |n: usize| {
        let v: Vec<f64> = runs
            .iter()
            .filter(|r| r.n_intervals == n)
            .map(|r| r.first_below.map_or(f64::INFINITY, |s| s as f64))
            .collect();
        median(&v)
    };
    if cfg.slope == 16.0 {
        for r in &runs {
            match r.n_intervals {
                2 => report.check(
                    format!("T=2tau seed {} optimum", r.seed),
                    (r.a - 3.0).abs() <= 0.05 && r.b.abs() <= 0.05,
                    format!("a={:.5} b={:.5}", r.a, r.b),
                ),
                1 => report.check(
                    format!("T=tau seed {} optimum", r.seed),
                    (r.a - 15.0).abs() <= 0.1,
                    format!("a={:.5} b={:.5}", r.a, r.b),
                ),
                _ => {}
            }
        }
        if cfg.variants.contains(&1) && cfg.variants.contains(&2) {
            let (m1, m2) = (median_first(1), median_first(2));
            report.check(
                "T=2tau reaches the threshold first",
                m2 < m1,
                format!("median first step below {:.0e}: T=2tau {m2}, T=tau {m1}", cfg.threshold),
            );
        }
    }
    if let Some(dir) = out {
        write_manifest(&ensure_dir(dir.to_path_buf())?, "fig1", cfg)?;
    }
    Ok(Fig1Outcome { runs, report })
}
