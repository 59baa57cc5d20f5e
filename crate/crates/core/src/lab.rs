//! Ground truth for the synthetic experiments: the population PCDDE
//! `dx/dt = a x(t) (1 - x(⌊t⌋))`, its sampled map `f_a(x) = x e^{a(1-x)}`,
//! and the annuli and linear datasets.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `f_a(x) = x e^{a(1-x)}`.
pub fn map_fa(a: f64, x: f64) -> f64 {
    x * (a * (1.0 - x)).exp()
}

/// `[x0, f(x0), …, f^n(x0)]`.
pub fn map_iterate(a: f64, x0: f64, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n + 1);
    let mut x = x0;
    out.push(x);
    for _ in 0..n {
        x = map_fa(a, x);
        out.push(x);
    }
    out
}

/// Exact solution at time `t`. On `[k, k+1]` the field is linear in `x(t)`,
/// so `x(t) = x(k) e^{a(1 - x(k))(t - k)}`.
pub fn population_exact(a: f64, x0: f64, t: f64) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(Error::Config(format!("population time must be >= 0, got {t}")));
    }
    let k = t.floor();
    let mut x = x0;
    for _ in 0..k as u64 {
        x = map_fa(a, x);
    }
    let frac = t - k;
    if frac > 0.0 {
        x *= (a * (1.0 - x) * frac).exp();
    }
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::Overflow { time: t })
    }
}

/// Smallest `p <= max_period` such that `|x_{i+p} - x_i| < tol` for
/// `max_period` consecutive `i` after `burn_in` iterations.
pub fn detect_period(a: f64, x0: f64, max_period: usize, burn_in: usize, tol: f64) -> Option<usize> {
    let mut x = x0;
    for _ in 0..burn_in {
        x = map_fa(a, x);
    }
    let orbit = map_iterate(a, x, 2 * max_period);
    if orbit.iter().any(|v| !v.is_finite()) {
        return None;
    }
    (1..=max_period).find(|&p| (0..max_period).all(|i| (orbit[i + p] - orbit[i]).abs() < tol))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub id: usize,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationDataset {
    pub a: f64,
    pub x0: Vec<f64>,
    /// Samples on `[0, 3]` every 0.1.
    pub train: Vec<Series>,
    /// Samples on `(3, 13]` every 0.1, continuing the same trajectories.
    pub test: Vec<Series>,
}

pub const SAMPLE_DT: f64 = 0.1;
pub const TRAIN_END: f64 = 3.0;
pub const TEST_END: f64 = 13.0;

fn sample_times(from: usize, to: usize) -> Vec<f64> {
    (from..=to).map(|i| i as f64 * SAMPLE_DT).collect()
}

/// `n_traj` trajectories from `x0 ~ U(0.1, 2.0)`.
pub fn gen_population_dataset(a: f64, n_traj: usize, seed: u64) -> Result<PopulationDataset> {
    if !(a > 0.0) {
        return Err(Error::Config(format!("growth parameter must be positive, got {a}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0: Vec<f64> = (0..n_traj).map(|_| rng.gen_range(0.1..2.0)).collect();
    let train_t = sample_times(0, 30);
    let test_t = sample_times(31, 130);
    let series = |times: &[f64]| -> Result<Vec<Series>> {
        x0.iter()
            .enumerate()
            .map(|(id, &x)| {
                Ok(Series {
                    id,
                    times: times.to_vec(),
                    values: times
                        .iter()
                        .map(|&t| population_exact(a, x, t))
                        .collect::<Result<_>>()?,
                })
            })
            .collect()
    };
    Ok(PopulationDataset {
        a,
        train: series(&train_t)?,
        test: series(&test_t)?,
        x0,
    })
}

pub fn write_series_csv(path: &Path, series: &[Series]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["series_id", "t", "x"])?;
    for s in series {
        for (t, x) in s.times.iter().zip(&s.values) {
            w.write_record(&[s.id.to_string(), t.to_string(), x.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnuliSpec {
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
    pub per_class: usize,
    pub seed: u64,
}

impl Default for AnnuliSpec {
    fn default() -> Self {
        Self {
            r1: 1.0,
            r2: 2.0,
            r3: 3.0,
            per_class: 512,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabeledPoint {
    pub x: [f64; 2],
    pub label: f64,
}

/// Disk of radius `r1` labelled -1 and annulus `r2 <= |x| <= r3` labelled +1,
/// each sampled uniformly by area, classes interleaved.
pub fn gen_annuli(spec: &AnnuliSpec) -> Result<Vec<LabeledPoint>> {
    if !(0.0 < spec.r1 && spec.r1 < spec.r2 && spec.r2 < spec.r3) {
        return Err(Error::Config("annuli radii must satisfy 0 < r1 < r2 < r3".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut pts = Vec::with_capacity(2 * spec.per_class);
    let mut polar = |r: f64, label: f64, rng: &mut ChaCha8Rng| {
        let phi = rng.gen_range(0.0..2.0 * PI);
        pts.push(LabeledPoint {
            x: [r * phi.cos(), r * phi.sin()],
            label,
        });
    };
    for _ in 0..spec.per_class {
        let u: f64 = rng.gen();
        polar(spec.r1 * u.sqrt(), -1.0, &mut rng);
        let u: f64 = rng.gen();
        let r = (spec.r2 * spec.r2 + u * (spec.r3 * spec.r3 - spec.r2 * spec.r2)).sqrt();
        polar(r, 1.0, &mut rng);
    }
    Ok(pts)
}

pub fn write_annuli_csv(path: &Path, points: &[LabeledPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["x1", "x2", "label"])?;
    for p in points {
        w.write_record(&[p.x[0].to_string(), p.x[1].to_string(), p.label.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Pairs `(x, c x)`.
pub fn gen_linear_dataset(c: f64, xs: &[f64]) -> Vec<(f64, f64)> {
    xs.iter().map(|&x| (x, c * x)).collect()
}

/// Writes `value` as pretty JSON.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_values() {
        assert_eq!(population_exact(2.0, 1.0, 7.3).unwrap(), 1.0);
        assert!((population_exact(2.0, 0.5, 0.5).unwrap() - 0.5 * 0.5f64.exp()).abs() < 1e-15);
        assert!((population_exact(2.0, 0.5, 1.0).unwrap() - 0.5 * std::f64::consts::E).abs() < 1e-15);
        assert!(population_exact(2.0, 0.5, -1.0).is_err());
        assert!(matches!(population_exact(1e3, 1e-3, 2.5), Err(Error::Overflow { .. })));
    }

    #[test]
    fn map_basics() {
        assert_eq!(map_fa(3.7, 1.0), 1.0);
        let a = 2.5;
        assert!((map_fa(a, 1.0 / a) - (a - 1.0f64).exp() / a).abs() < 1e-15);
        assert_eq!(map_iterate(2.0, 0.3, 4).len(), 5);
    }

    #[test]
    fn periods() {
        assert_eq!(detect_period(0.5, 0.5, 64, 500, 1e-3), Some(1));
        assert_eq!(detect_period(2.3, 0.5, 64, 2000, 1e-6), Some(2));
        let a = 3.11670;
        assert_eq!(detect_period(a, 1.0 / a, 64, 500, 1e-3), Some(3));
        assert_eq!(detect_period(3.5, 0.3, 64, 500, 1e-3), None);
    }

    #[test]
    fn population_dataset_shape() {
        let d = gen_population_dataset(2.0, 100, 1).unwrap();
        assert_eq!(d.train.len(), 100);
        assert!(d.train.iter().all(|s| s.values.len() == 31));
        assert!(d.test.iter().all(|s| s.values.len() == 100));
        assert!((d.test[0].times[0] - 3.1).abs() < 1e-12);
        let sup = d.train.iter().chain(&d.test).flat_map(|s| s.values.iter().copied()).fold(0.0, f64::max);
        assert!(sup < 5.0);
        for s in &d.train {
            assert_eq!(s.values[0], d.x0[s.id]);
        }
    }

    #[test]
    fn annuli_geometry() {
        let spec = AnnuliSpec::default();
        let pts = gen_annuli(&spec).unwrap();
        assert_eq!(pts.len(), 1024);
        assert_eq!(pts.iter().filter(|p| p.label > 0.0).count(), 512);
        for p in &pts {
            let r = p.x[0].hypot(p.x[1]);
            if p.label > 0.0 {
                assert!(r >= 2.0 - 1e-12 && r <= 3.0 + 1e-12);
            } else {
                assert!(r <= 1.0 + 1e-12);
            }
        }
        assert!(gen_annuli(&AnnuliSpec { r2: 0.5, ..spec }).is_err());
    }

    #[test]
    fn linear_dataset() {
        assert_eq!(gen_linear_dataset(16.0, &[1.0, 0.0, -0.5]), vec![(1.0, 16.0), (0.0, 0.0), (-0.5, -8.0)]);
    }
}
