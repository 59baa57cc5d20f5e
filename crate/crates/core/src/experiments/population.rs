//! Learning the population dynamics `dx/dt = a x(t)(1 - x(⌊t⌋))` from
//! trajectories on `[0, 3]` and predicting `(3, 13]` free-running from `x(3)`.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ensure_dir, extend_horizon, median, write_manifest, ModelConfig, Report};
use crate::error::{Error, Result};
use crate::field::ArgRole;
use crate::lab::{gen_population_dataset, write_series_csv, PopulationDataset, SAMPLE_DT, TEST_END, TRAIN_END};
use crate::model::ModelKind;
use crate::tensor::Tensor;
use crate::train::{train_with, Model, Sample, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PopulationConfig {
    /// Growth parameters, one experiment each.
    pub regimes: Vec<f64>,
    pub n_traj: usize,
    pub data_seed: u64,
    pub models: Vec<ModelConfig>,
    pub seed: u64,
    pub n_seeds: usize,
    pub train: TrainConfig,
    /// Prediction windows `(3, 3 + h]` scored on the test series.
    pub horizons: Vec<usize>,
    /// Steps between test evaluations during training.
    pub eval_every: usize,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        let sub = |mut m: ModelConfig| {
            m.substeps = 10;
            m
        };
        let mut npcdde = ModelConfig::new("npcdde", ModelKind::NpcddeGeneric, 1.0, 3);
        npcdde.roles = Some(vec![ArgRole::Current, ArgRole::Grid(0)]);
        Self {
            regimes: vec![2.0, 3.2],
            n_traj: 100,
            data_seed: 0,
            models: vec![
                sub(npcdde),
                sub(ModelConfig::new("ndde", ModelKind::Ndde, 1.0, 3)),
                sub(ModelConfig::new("node", ModelKind::Node, 1.0, 3)),
                sub(ModelConfig::new("anode", ModelKind::Anode, 1.0, 3)),
            ],
            seed: 0,
            n_seeds: 5,
            train: TrainConfig::default(),
            horizons: vec![1, 2, 5, 10],
            eval_every: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PopulationRun {
    pub a: f64,
    pub model: String,
    pub kind: ModelKind,
    pub seed: u64,
    pub n_params: usize,
    pub final_train_loss: f64,
    /// One entry per configured horizon; infinite if the free run blew up.
    pub test_losses: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct PopulationOutcome {
    pub runs: Vec<PopulationRun>,
    pub report: Report,
}

fn steps_per_unit() -> usize {
    (1.0 / SAMPLE_DT).round() as usize
}

pub fn train_samples(ds: &PopulationDataset) -> Vec<Sample> {
    ds.train
        .iter()
        .map(|s| Sample {
            x: Tensor::scalar(s.values[0]),
            targets: s.times[1..]
                .iter()
                .zip(&s.values[1..])
                .map(|(t, v)| (*t, Tensor::scalar(*v)))
                .collect(),
        })
        .collect()
}

/// Free-running predictions from each series' `x(3)` at the test times.
pub fn predict_test(model: &Model, ds: &PopulationDataset) -> Result<Vec<Option<Vec<f64>>>> {
    let n = (TEST_END - TRAIN_END).round() as usize;
    let spec = extend_horizon(&model.spec, n)?;
    let m = Model { spec, readout: None };
    let times: Vec<f64> = (1..=n * steps_per_unit()).map(|i| i as f64 * SAMPLE_DT).collect();
    ds.train
        .par_iter()
        .map(|s| {
            let x3 = *s.values.last().expect("non-empty series");
            match m.predict(&Tensor::scalar(x3), &times) {
                Ok(p) => Ok(Some(p.into_iter().map(|v| v[0]).collect())),
                Err(Error::NonFiniteState { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// Mean squared error over `(3, 3 + h]` for each horizon `h`.
pub fn windowed_losses(preds: &[Option<Vec<f64>>], ds: &PopulationDataset, horizons: &[usize]) -> Vec<f64> {
    horizons
        .iter()
        .map(|&h| {
            let k = h * steps_per_unit();
            let mut sse = 0.0;
            let mut count = 0usize;
            for (p, s) in preds.iter().zip(&ds.test) {
                let Some(p) = p else { return f64::INFINITY };
                for (a, b) in p.iter().zip(&s.values).take(k) {
                    sse += (a - b) * (a - b);
                    count += 1;
                }
            }
            let v = sse / count.max(1) as f64;
            if v.is_finite() {
                v
            } else {
                f64::INFINITY
            }
        })
        .collect()
}

fn run_one(
    cfg: &PopulationConfig,
    mc: &ModelConfig,
    seed: u64,
    ds: &PopulationDataset,
    data: &[Sample],
    dir: Option<PathBuf>,
) -> Result<PopulationRun> {
    let model = Model::new(mc.build(1, seed)?);
    let tc = TrainConfig { seed, ..cfg.train.clone() };
    let every = cfg.eval_every.max(1);
    let (model, mut hist) = train_with(model, &tc, data, &mut |step: usize, m: &Model, _| {
        if step % every == 0 {
            Ok(Some(windowed_losses(&predict_test(m, ds)?, ds, &cfg.horizons)))
        } else {
            Ok(None)
        }
    })?;
    let preds = predict_test(&model, ds)?;
    let test_losses = windowed_losses(&preds, ds, &cfg.horizons);
    hist.train.push((tc.iterations, hist.final_loss));
    hist.test.push((tc.iterations, test_losses.clone()));
    if let Some(d) = dir {
        let d = ensure_dir(d)?;
        hist.write_csv(&d.join("loss.csv"), &cfg.horizons)?;
        let mut w = csv::Writer::from_path(d.join("trajectories.csv"))?;
        w.write_record(["series_id", "t", "true", "predicted"])?;
        for (p, s) in preds.iter().zip(&ds.test) {
            for (i, (t, v)) in s.times.iter().zip(&s.values).enumerate() {
                let pv = p.as_ref().map_or(f64::NAN, |p| p[i]);
                w.write_record(&[s.id.to_string(), format!("{t:.1}"), v.to_string(), pv.to_string()])?;
            }
        }
        w.flush()?;
    }
    Ok(PopulationRun {
        a: ds.a,
        model: mc.name.clone(),
        kind: mc.kind,
        seed,
        n_params: model.param_count(),
        final_train_loss: hist.final_loss,
        test_losses,
    })
}

fn regime_dir(out: &Path, a: f64) -> PathBuf {
    out.join(format!("a{a}"))
}

pub fn run(cfg: &PopulationConfig, out: Option<&Path>) -> Result<PopulationOutcome> {
    if cfg.models.is_empty() || cfg.n_seeds == 0 || cfg.regimes.is_empty() {
        return Err(Error::Config("population needs regimes, models and n_seeds >= 1".into()));
    }
    if cfg.models.iter().any(|m| m.kind == ModelKind::Unpcdde) {
        return Err(Error::Config("population models must share parameters across intervals".into()));
    }
    let mut runs = Vec::new();
    let mut report = Report::default();
    for &a in &cfg.regimes {
        let ds = gen_population_dataset(a, cfg.n_traj, cfg.data_seed)?;
        let data = train_samples(&ds);
        if let Some(out) = out {
            let d = ensure_dir(regime_dir(out, a))?;
            write_series_csv(&d.join("train.csv"), &ds.train)?;
            write_series_csv(&d.join("test.csv"), &ds.test)?;
        }
        let jobs: Vec<(&ModelConfig, u64)> = cfg
            .models
            .iter()
            .flat_map(|m| (cfg.seed..cfg.seed + cfg.n_seeds as u64).map(move |s| (m, s)))
            .collect();
        let regime_runs = jobs
            .par_iter()
            .map(|(mc, seed)| {
                let dir = out.map(|o| regime_dir(o, a).join(&mc.name).join(format!("seed{seed}")));
                run_one(cfg, mc, *seed, &ds, &data, dir)
            })
            .collect::<Result<Vec<_>>>()?;
        check_regime(cfg, a, &regime_runs, &mut report);
        runs.extend(regime_runs);
    }

    if let Some(dir) = out {
        let dir = ensure_dir(dir.to_path_buf())?;
        let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
        let mut header = vec!["a".to_string(), "model".into(), "seed".into(), "n_params".into(), "final_train_loss".into()];
        header.extend(cfg.horizons.iter().map(|h| format!("test_loss_h{h}")));
        w.write_record(&header)?;
        for r in &runs {
            let mut row = vec![
                r.a.to_string(),
                r.model.clone(),
                r.seed.to_string(),
                r.n_params.to_string(),
                r.final_train_loss.to_string(),
            ];
            row.extend(r.test_losses.iter().map(f64::to_string));
            w.write_record(&row)?;
        }
        w.flush()?;
        write_manifest(&dir, "population", cfg)?;
    }
    Ok(PopulationOutcome { runs, report })
}

/// Median over seeds of `f` for the first model of `kind`.
pub fn median_of(runs: &[PopulationRun], kind: ModelKind, f: impl Fn(&PopulationRun) -> f64) -> Option<f64> {
    let name = &runs.iter().find(|r| r.kind == kind)?.model;
    Some(median(&runs.iter().filter(|r| &r.model == name).map(f).collect::<Vec<_>>()))
}

fn check_regime(cfg: &PopulationConfig, a: f64, runs: &[PopulationRun], report: &mut Report) {
    let h1 = cfg.horizons.iter().position(|&h| h == 1);
    let Some(npc_train) = median_of(runs, ModelKind::NpcddeGeneric, |r| r.final_train_loss) else {
        return;
    };
    if a <= 2.5 {
        if let Some(node_train) = median_of(runs, ModelKind::Node, |r| r.final_train_loss) {
            report.check(
                format!("a={a}: npcdde train loss at most a tenth of node's"),
                npc_train <= 0.1 * node_train,
                format!("median final train loss npcdde {npc_train:.3e}, node {node_train:.3e}"),
            );
        }
        if let Some(i) = h1 {
            let v = median_of(runs, ModelKind::NpcddeGeneric, |r| r.test_losses[i]).unwrap();
            report.check(
                format!("a={a}: npcdde horizon-1 test loss below 1e-2"),
                v < 1e-2,
                format!("median {v:.3e}"),
            );
        }
    } else if let Some(i) = h1 {
        let npc = median_of(runs, ModelKind::NpcddeGeneric, |r| r.test_losses[i]).unwrap();
        for kind in [ModelKind::Node, ModelKind::Ndde, ModelKind::Anode] {
            if let Some(other) = median_of(runs, kind, |r| r.test_losses[i]) {
                report.check(
                    format!("a={a}: npcdde horizon-1 test loss below {kind}"),
                    npc < other,
                    format!("median npcdde {npc:.3e}, {kind} {other:.3e}"),
                );
            }
        }
    }
}
