//! Adjoint against the tape and against central differences on random models.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ensure_dir, write_manifest, Report};
use crate::adjoint::{backward_with, gradients, AdjointOptions};
use crate::autodiff::finite_diff_grad;
use crate::bptt::grads_via_bptt;
use crate::error::{Error, Result};
use crate::field::{Architecture, ArgRole, InitScheme};
use crate::model::{Integrator, ModelKind, ModelSpec};
use crate::solver::forward;
use crate::tensor::{relative_error, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub cases: usize,
    pub seed: u64,
    pub fd_step: f64,
    pub bptt_tol: f64,
    pub fd_tol: f64,
    pub max_width: usize,
    pub max_state_dim: usize,
    /// Drops the delay jumps from the adjoint; the run must then fail.
    pub sabotage: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            cases: 50,
            seed: 0,
            fd_step: 1e-5,
            bptt_tol: 1e-6,
            fd_tol: 1e-4,
            max_width: 10,
            max_state_dim: 4,
            sabotage: false,
        }
    }
}

/// Floor for the relative-error denominator.
const ERR_FLOOR: f64 = 1e-8;

const KIND_CYCLE: [ModelKind; 7] = [
    ModelKind::NpcddeSkip,
    ModelKind::NpcddeGeneric,
    ModelKind::Unpcdde,
    ModelKind::NpcddeSimple,
    ModelKind::Node,
    ModelKind::Ndde,
    ModelKind::Anode,
];

/// A random model, input and squared-error targets.
#[derive(Clone, Debug)]
pub struct GradCase {
    pub spec: ModelSpec,
    pub x: Tensor,
    pub targets: Vec<(f64, Tensor)>,
}

impl GradCase {
    /// `½ Σ |z(t_i) - y_i|²`.
    pub fn loss(&self, spec: &ModelSpec, x: &Tensor) -> Result<f64> {
        let times: Vec<f64> = self.targets.iter().map(|(t, _)| *t).collect();
        let rec = forward(spec, x, &times)?;
        Ok(rec
            .observations
            .iter()
            .zip(&self.targets)
            .flat_map(|((_, z), (_, y))| z.data().iter().zip(y.data()).map(|(a, b)| 0.5 * (a - b) * (a - b)))
            .sum())
    }

    pub fn loss_grads(&self) -> Result<Vec<(f64, Tensor)>> {
        let times: Vec<f64> = self.targets.iter().map(|(t, _)| *t).collect();
        let rec = forward(&self.spec, &self.x, &times)?;
        Ok(rec
            .observations
            .iter()
            .zip(&self.targets)
            .map(|((t, z), (_, y))| (*t, Tensor::vector(z.data().iter().zip(y.data()).map(|(a, b)| a - b).collect())))
            .collect())
    }
}

pub fn random_case(cfg: &GradcheckConfig, case: usize) -> Result<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(case as u64);
    let kind = KIND_CYCLE[case % KIND_CYCLE.len()];
    let max_dim = cfg.max_state_dim.max(2);
    let n = *[1usize, 2, 3, 5].choose(&mut rng).unwrap();
    let width = rng.gen_range(2..=cfg.max_width.max(2));
    let (data_dim, augment) = if kind == ModelKind::Anode {
        (rng.gen_range(1..max_dim), 1)
    } else {
        (rng.gen_range(1..=max_dim), 0)
    };
    let mut b = ModelSpec::builder(kind, data_dim)
        .tau(rng.gen_range(0.3..1.0))
        .intervals(n)
        .substeps(rng.gen_range(1..=3));
    if augment > 0 {
        b = b.augment(augment);
    }
    if matches!(kind, ModelKind::NpcddeGeneric | ModelKind::Unpcdde) && rng.gen_bool(0.5) {
        let mut roles: Vec<ArgRole> = (0..=n).filter(|_| rng.gen_bool(0.6)).map(ArgRole::Grid).collect();
        if roles.is_empty() || rng.gen_bool(0.5) {
            roles.insert(0, ArgRole::Current);
        }
        b = b.roles(roles);
    }
    let has_current = b.signature().has_current();
    let integrator = match kind {
        ModelKind::NpcddeSimple | ModelKind::NpcddeSkip | ModelKind::NpcddeGeneric | ModelKind::Unpcdde
            if !has_current =>
        {
            *[Integrator::ExactConstantField, Integrator::Euler, Integrator::Rk4]
                .choose(&mut rng)
                .unwrap()
        }
        _ => *[Integrator::Euler, Integrator::Rk4].choose(&mut rng).unwrap(),
    };
    let arch = Architecture::two_hidden(width).with_biases(rng.gen_bool(0.5));
    let spec = b
        .integrator(integrator)
        .init(&arch, InitScheme::XavierUniform, rng.gen())?;
    let d = spec.state_dim();
    let x = Tensor::vector((0..data_dim).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let total = spec.total_steps();
    let mut nodes: Vec<usize> = (1..total).filter(|_| rng.gen_bool(0.2)).collect();
    nodes.push(total);
    let targets = nodes
        .into_iter()
        .map(|m| {
            (
                m as f64 * spec.dt(),
                Tensor::vector((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()),
            )
        })
        .collect();
    Ok(GradCase { spec, x, targets })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseResult {
    pub case: usize,
    pub kind: ModelKind,
    pub integrator: Integrator,
    pub state_dim: usize,
    pub n_intervals: usize,
    pub substeps: usize,
    pub n_params: usize,
    pub err_bptt: f64,
    pub err_fd: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradcheckOutcome {
    pub cases: Vec<CaseResult>,
    pub report: Report,
}

/// Gradient of the case loss over `(params, input)` by all three routes.
pub fn case_gradients(cfg: &GradcheckConfig, case: &GradCase) -> Result<[Vec<f64>; 3]> {
    let lg = case.loss_grads()?;
    let rec = forward(&case.spec, &case.x, &lg.iter().map(|(t, _)| *t).collect::<Vec<_>>())?;
    let adj = if cfg.sabotage && case.spec.kind != ModelKind::Ndde {
        backward_with(&rec, &lg, AdjointOptions { skip_delay_jumps: true })?
    } else {
        gradients(&rec, &lg)?
    };
    let tape = grads_via_bptt(&case.spec, &case.x, &lg)?;
    let np = case.spec.params.param_count();
    let mut point = case.spec.params.flatten();
    point.extend_from_slice(case.x.data());
    let fd = finite_diff_grad(
        |p: &Tensor| {
            let spec = ModelSpec {
                params: case.spec.params.with_flat(&p.data()[..np]).expect("same layout"),
                ..case.spec.clone()
            };
            case.loss(&spec, &Tensor::vector(p.data()[np..].to_vec())).unwrap_or(f64::NAN)
        },
        &Tensor::vector(point),
        cfg.fd_step,
    )?;
    let join = |g: crate::adjoint::Gradients| {
        let mut v = g.params;
        v.extend_from_slice(g.input.data());
        v
    };
    Ok([join(adj), join(tape), fd.into_data()])
}

pub fn run(cfg: &GradcheckConfig, out: Option<&Path>) -> Result<GradcheckOutcome> {
    if cfg.cases == 0 || !(cfg.fd_step > 0.0) {
        return Err(Error::Config("gradcheck needs cases >= 1 and fd_step > 0".into()));
    }
    let mut cases = Vec::with_capacity(cfg.cases);
    for i in 0..cfg.cases {
        let case = random_case(cfg, i)?;
        let [adj, tape, fd] = case_gradients(cfg, &case)?;
        let err_bptt = relative_error(&adj, &tape, ERR_FLOOR);
        let err_fd = relative_error(&adj, &fd, ERR_FLOOR);
        cases.push(CaseResult {
            case: i,
            kind: case.spec.kind,
            integrator: case.spec.integrator,
            state_dim: case.spec.state_dim(),
            n_intervals: case.spec.n_intervals,
            substeps: case.spec.substeps,
            n_params: case.spec.params.param_count(),
            err_bptt,
            err_fd,
            passed: err_bptt <= cfg.bptt_tol && err_fd <= cfg.fd_tol,
        });
    }
    let worst = |f: fn(&CaseResult) -> f64| {
        cases
            .iter()
            .max_by(|a, b| f(a).total_cmp(&f(b)))
            .map(|c| (c.case, c.kind, f(c)))
            .unwrap()
    };
    let (wb_case, wb_kind, wb) = worst(|c| c.err_bptt);
    let (wf_case, wf_kind, wf) = worst(|c| c.err_fd);
    let mut report = Report::default();
    report.check(
        "adjoint vs bptt",
        wb <= cfg.bptt_tol,
        format!("worst {wb:.3e} (case {wb_case}, {wb_kind}), tol {:.0e}", cfg.bptt_tol),
    );
    report.check(
        "adjoint vs finite differences",
        wf <= cfg.fd_tol,
        format!("worst {wf:.3e} (case {wf_case}, {wf_kind}), tol {:.0e}", cfg.fd_tol),
    );

    if let Some(dir) = out {
        let dir = ensure_dir(dir.to_path_buf())?;
        let mut w = csv::Writer::from_path(dir.join("gradcheck.csv"))?;
        w.write_record([
            "case",
            "kind",
            "integrator",
            "state_dim",
            "n_intervals",
            "substeps",
            "n_params",
            "err_bptt",
            "err_fd",
            "passed",
        ])?;
        for c in &cases {
            w.write_record(&[
                c.case.to_string(),
                c.kind.to_string(),
                serde_json::to_value(c.integrator)?.as_str().unwrap_or_default().to_string(),
                c.state_dim.to_string(),
                c.n_intervals.to_string(),
                c.substeps.to_string(),
                c.n_params.to_string(),
                format!("{:e}", c.err_bptt),
                format!("{:e}", c.err_fd),
                c.passed.to_string(),
            ])?;
        }
        w.flush()?;
        write_manifest(&dir, "gradcheck", cfg)?;
    }
    Ok(GradcheckOutcome { cases, report })
}
