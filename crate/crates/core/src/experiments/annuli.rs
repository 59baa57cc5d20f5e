//! Separating a disk from a surrounding annulus with a linear readout on
//! `z(T)`.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ensure_dir, median, write_manifest, ModelConfig, Report};
use crate::error::{Error, Result};
use crate::lab::{gen_annuli, write_annuli_csv, AnnuliSpec, LabeledPoint};
use crate::model::ModelKind;
use crate::solver::forward;
use crate::tensor::Tensor;
use crate::train::{train_with, Model, Readout, Sample, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnuliConfig {
    pub data: AnnuliSpec,
    pub models: Vec<ModelConfig>,
    pub seed: u64,
    pub n_seeds: usize,
    pub train: TrainConfig,
    /// Epochs whose start-of-epoch features are written, besides the final one.
    pub snapshot_epochs: Vec<usize>,
}

impl Default for AnnuliConfig {
    fn default() -> Self {
        let with_bias = |mut m: ModelConfig| {
            m.biases = true;
            m
        };
        Self {
            data: AnnuliSpec::default(),
            models: vec![
                with_bias(ModelConfig::new("node", ModelKind::Node, 1.0, 1)),
                with_bias(ModelConfig::new("npcdde_n1", ModelKind::NpcddeSimple, 1.0, 1)),
                with_bias(ModelConfig::new("npcdde_n2", ModelKind::NpcddeSimple, 0.5, 2)),
                with_bias(ModelConfig {
                    width: 9,
                    ..ModelConfig::new("npcdde_skip", ModelKind::NpcddeSkip, 0.5, 2)
                }),
            ],
            seed: 0,
            n_seeds: 5,
            train: TrainConfig {
                batch_size: Some(64),
                iterations: 96,
                ..TrainConfig::default()
            },
            snapshot_epochs: (0..6).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AnnuliRun {
    pub model: String,
    pub kind: ModelKind,
    pub seed: u64,
    pub n_params: usize,
    pub final_loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct AnnuliOutcome {
    pub runs: Vec<AnnuliRun>,
    pub report: Report,
}

fn samples(points: &[LabeledPoint], t_end: f64) -> Vec<Sample> {
    points
        .iter()
        .map(|p| Sample {
            x: Tensor::vector(p.x.to_vec()),
            targets: vec![(t_end, Tensor::scalar(p.label))],
        })
        .collect()
}

/// `z(T)` for every point.
pub fn features(model: &Model, points: &[LabeledPoint]) -> Result<Vec<Vec<f64>>> {
    points
        .par_iter()
        .map(|p| {
            let rec = forward(&model.spec, &Tensor::vector(p.x.to_vec()), &[])?;
            Ok(rec.final_state().data()[..model.spec.data_dim()].to_vec())
        })
        .collect()
}

/// Fraction of points whose readout sign matches the label.
pub fn accuracy(model: &Model, points: &[LabeledPoint]) -> Result<f64> {
    let feats = features(model, points)?;
    let readout = model.readout.as_ref().ok_or_else(|| Error::InvalidModel("no readout".into()))?;
    let hits = feats
        .iter()
        .zip(points)
        .filter(|(z, p)| readout.apply(z)[0].signum() == p.label)
        .count();
    Ok(hits as f64 / points.len().max(1) as f64)
}

fn write_features(path: &Path, feats: &[Vec<f64>], points: &[LabeledPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["point_id", "z1", "z2", "label"])?;
    for (i, (z, p)) in feats.iter().zip(points).enumerate() {
        w.write_record(&[i.to_string(), z[0].to_string(), z[1].to_string(), p.label.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn run_one(
    cfg: &AnnuliConfig,
    mc: &ModelConfig,
    seed: u64,
    points: &[LabeledPoint],
    dir: Option<PathBuf>,
) -> Result<AnnuliRun> {
    let spec = mc.build(2, seed)?;
    let model = Model::new(spec).with_readout(Readout::init(1, 2, seed.wrapping_add(1_000_003)));
    let data = samples(points, model.spec.final_time());
    let per_epoch = data.len().div_ceil(cfg.train.batch_size.unwrap_or(data.len()).max(1)).max(1);
    let tc = TrainConfig { seed, ..cfg.train.clone() };
    let dir = dir.map(ensure_dir).transpose()?;
    let (model, hist) = train_with(model, &tc, &data, &mut |step: usize, m: &Model, _| {
        if let Some(d) = &dir {
            let epoch = step / per_epoch;
            if step % per_epoch == 0 && cfg.snapshot_epochs.contains(&epoch) {
                let f = features(m, points)?;
                write_features(&d.join(format!("features_epoch{epoch}.csv")), &f, points)?;
            }
        }
        Ok(None)
    })?;
    if let Some(d) = &dir {
        hist.write_csv(&d.join("loss.csv"), &[])?;
        write_features(&d.join("features_final.csv"), &features(&model, points)?, points)?;
    }
    Ok(AnnuliRun {
        model: mc.name.clone(),
        kind: mc.kind,
        seed,
        n_params: model.param_count(),
        final_loss: hist.final_loss,
        accuracy: accuracy(&model, points)?,
    })
}

pub fn run(cfg: &AnnuliConfig, out: Option<&Path>) -> Result<AnnuliOutcome> {
    if cfg.models.is_empty() || cfg.n_seeds == 0 {
        return Err(Error::Config("annuli needs at least one model and n_seeds >= 1".into()));
    }
    let points = gen_annuli(&cfg.data)?;
    let jobs: Vec<(&ModelConfig, u64)> = cfg
        .models
        .iter()
        .flat_map(|m| (cfg.seed..cfg.seed + cfg.n_seeds as u64).map(move |s| (m, s)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|(mc, seed)| {
            let dir = out.map(|d| d.join(&mc.name).join(format!("seed{seed}")));
            run_one(cfg, mc, *seed, &points, dir)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut report = Report::default();
    let by_kind = |k: ModelKind, f: fn(&AnnuliRun) -> f64| -> Option<f64> {
        let name = &cfg.models.iter().find(|m| m.kind == k)?.name;
        Some(median(&runs.iter().filter(|r| &r.model == name).map(f).collect::<Vec<_>>()))
    };
    if let Some(acc) = by_kind(ModelKind::NpcddeSkip, |r| r.accuracy) {
        report.check(
            "skip-connection model separates the annuli",
            acc >= 0.99,
            format!("median final accuracy {acc:.4}"),
        );
    }
    if let (Some(node), Some(skip)) = (
        by_kind(ModelKind::Node, |r| r.final_loss),
        by_kind(ModelKind::NpcddeSkip, |r| r.final_loss),
    ) {
        report.check(
            "node ends with a higher loss than the skip-connection model",
            node > skip,
            format!("median final loss node {node:.4e}, skip {skip:.4e}"),
        );
    }

    if let Some(dir) = out {
        let dir = ensure_dir(dir.to_path_buf())?;
        write_annuli_csv(&dir.join("data.csv"), &points)?;
        let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
        w.write_record(["model", "seed", "n_params", "final_loss", "accuracy"])?;
        for r in &runs {
            w.write_record(&[
                r.model.clone(),
                r.seed.to_string(),
                r.n_params.to_string(),
                r.final_loss.to_string(),
                r.accuracy.to_string(),
            ])?;
        }
        w.flush()?;
        write_manifest(&dir, "annuli", cfg)?;
    }
    Ok(AnnuliOutcome { runs, report })
}
