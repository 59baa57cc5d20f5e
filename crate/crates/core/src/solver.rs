//! Fixed-step forward solves for every model variant.
//!
//! Within interval `[kτ, (k+1)τ)` the grid arguments of a piecewise-constant
//! field are frozen, so the interval is an ODE in `z(t)` alone and is stepped
//! with the chosen integrator. Grid states before `t = 0` resolve to the input.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::field::{ArgRole, MlpCache};
use crate::model::{Integrator, ModelKind, ModelParams, ModelSpec};
use crate::tensor::Tensor;

const GRID_TOL: f64 = 1e-9;

/// A vector field evaluated on the concatenated argument vector of interval
/// `interval`, writing `dz/dt` into `out`.
pub trait FieldFn {
    fn eval(&mut self, interval: usize, input: &[f64], out: &mut [f64]);
}

impl<F: FnMut(usize, &[f64], &mut [f64])> FieldFn for F {
    fn eval(&mut self, interval: usize, input: &[f64], out: &mut [f64]) {
        self(interval, input, out)
    }
}

/// The model's own MLP field, one cache per parameter set.
pub struct MlpField<'a> {
    params: &'a ModelParams,
    caches: Vec<MlpCache>,
    tape: Option<StageTape>,
}

impl<'a> MlpField<'a> {
    pub fn new(params: &'a ModelParams) -> Self {
        Self {
            params,
            caches: params.sets().iter().map(|p| p.cache()).collect(),
            tape: None,
        }
    }

    /// Also keeps the activations of every evaluation, in call order.
    pub fn taped(params: &'a ModelParams) -> Self {
        Self {
            tape: Some(StageTape::default()),
            ..Self::new(params)
        }
    }
}

impl FieldFn for MlpField<'_> {
    fn eval(&mut self, interval: usize, input: &[f64], out: &mut [f64]) {
        let i = self.params.set_index(interval);
        let cache = &mut self.caches[i];
        cache.input_mut().copy_from_slice(input);
        out.copy_from_slice(self.params.sets()[i].forward_cached(cache));
        if let Some(t) = &mut self.tape {
            t.starts.push(t.data.len());
            cache.save_acts(&mut t.data);
        }
    }
}

/// Network activations of each field evaluation of a forward solve, so the
/// adjoint can skip recomputing them.
#[derive(Clone, Debug, Default)]
pub struct StageTape {
    starts: Vec<usize>,
    data: Vec<f64>,
}

impl StageTape {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub(crate) fn restore(&self, eval: usize, cache: &mut MlpCache) {
        cache.load_acts(&self.data[self.starts[eval]..]);
    }
}

/// Everything the backward passes need from a forward solve.
#[derive(Clone, Debug)]
pub struct ForwardRecord {
    pub spec: ModelSpec,
    /// The input as given (data dimension).
    pub input: Tensor,
    /// `z(0)`, augmented for ANODE.
    pub start: Tensor,
    /// `z(kτ)` for `k = 0..=n`.
    pub grid_states: Vec<Tensor>,
    /// Per interval, the `substeps + 1` solver nodes from `z(kτ)` to `z((k+1)τ)`.
    pub substep_states: Vec<Vec<Tensor>>,
    pub observations: Vec<(f64, Tensor)>,
    /// Present when solved with [`forward_taped`].
    pub stages: Option<StageTape>,
}

impl ForwardRecord {
    pub fn final_state(&self) -> &Tensor {
        self.grid_states.last().expect("at least one grid state")
    }

    /// Solver node `m` on the global grid `t = m·dt`.
    pub fn node(&self, m: usize) -> &Tensor {
        let s = self.spec.substeps;
        if m == self.spec.total_steps() {
            return self.final_state();
        }
        &self.substep_states[m / s][m % s]
    }

    /// `z(kτ)`, or the start state for `k < 0`.
    pub fn history(&self, k: isize) -> &Tensor {
        if k < 0 {
            &self.start
        } else {
            &self.grid_states[k as usize]
        }
    }

    /// `(t, z(t))` over every solver node.
    pub fn nodes(&self) -> impl Iterator<Item = (f64, &Tensor)> {
        let dt = self.spec.dt();
        (0..=self.spec.total_steps()).map(move |m| (m as f64 * dt, self.node(m)))
    }
}

/// Index `m` with `|t - m·dt| <= 1e-9·max(1, |t|)`.
pub fn grid_index(time: f64, dt: f64, total_steps: usize) -> Result<usize> {
    let off = || Error::OffGrid { time, step: dt };
    if !time.is_finite() || time < -GRID_TOL {
        return Err(off());
    }
    let m = (time / dt).round();
    if (time - m * dt).abs() > GRID_TOL * time.abs().max(1.0) || m > total_steps as f64 {
        return Err(off());
    }
    Ok(m as usize)
}

/// Solves the model from `x` and stores the states at `obs_times`, which
/// must lie on the solver grid within `[0, nτ]`.
pub fn forward(spec: &ModelSpec, x: &Tensor, obs_times: &[f64]) -> Result<ForwardRecord> {
    let mut field = MlpField::new(&spec.params);
    forward_with(spec, x, obs_times, &mut field)
}

/// As [`forward`], also keeping the field activations for the adjoint.
pub fn forward_taped(spec: &ModelSpec, x: &Tensor, obs_times: &[f64]) -> Result<ForwardRecord> {
    let mut field = MlpField::taped(&spec.params);
    let mut rec = forward_with(spec, x, obs_times, &mut field)?;
    rec.stages = field.tape;
    Ok(rec)
}

/// As [`forward`] with the field supplied by the caller; `spec.params` is not
/// evaluated.
pub fn forward_with(
    spec: &ModelSpec,
    x: &Tensor,
    obs_times: &[f64],
    field: &mut dyn FieldFn,
) -> Result<ForwardRecord> {
    spec.validate()?;
    if x.rank() != 1 || x.len() != spec.data_dim() {
        return Err(Error::ShapeMismatch {
            op: "forward input",
            lhs: x.shape().to_vec(),
            rhs: vec![spec.data_dim()],
        });
    }
    let mut start = x.data().to_vec();
    start.resize(spec.state_dim(), 0.0);
    let obs_index = obs_times
        .iter()
        .map(|&t| grid_index(t, spec.dt(), spec.total_steps()))
        .collect::<Result<Vec<_>>>()?;

    let substep_states = if spec.kind == ModelKind::Ndde {
        solve_ndde(spec, &start, field)?
    } else {
        solve_grid(spec, &start, field)?
    };
    let mut grid_states: Vec<Tensor> = substep_states.iter().map(|s| s[0].clone()).collect();
    grid_states.push(substep_states.last().unwrap().last().unwrap().clone());
    let mut rec = ForwardRecord {
        spec: spec.clone(),
        input: x.clone(),
        start: Tensor::vector(start),
        grid_states,
        substep_states,
        observations: Vec::with_capacity(obs_times.len()),
        stages: None,
    };
    rec.observations = obs_times
        .iter()
        .zip(obs_index)
        .map(|(&t, m)| (t, rec.node(m).clone()))
        .collect();
    Ok(rec)
}

fn solve_grid(spec: &ModelSpec, start: &[f64], field: &mut dyn FieldFn) -> Result<Vec<Vec<Tensor>>> {
    let d = spec.state_dim();
    let roles = &spec.signature.roles;
    let current = spec.signature.position(ArgRole::Current);
    let mut input = vec![0.0; spec.signature.input_dim()];
    let mut out: Vec<Vec<Tensor>> = Vec::with_capacity(spec.n_intervals);
    let mut z0 = start.to_vec();
    for k in 0..spec.n_intervals {
        for (p, role) in roles.iter().enumerate() {
            if let ArgRole::Grid(lag) = *role {
                let src: &[f64] = match k.checked_sub(lag) {
                    None => start,
                    Some(i) if i == k => &z0,
                    Some(i) => out[i][0].data(),
                };
                input[p * d..(p + 1) * d].copy_from_slice(src);
            }
        }
        let states = steps(
            spec.integrator,
            &z0,
            spec.dt(),
            spec.tau,
            spec.substeps,
            |z, dz| {
                if let Some(c) = current {
                    input[c * d..(c + 1) * d].copy_from_slice(z);
                }
                field.eval(k, &input, dz);
            },
        )
        .map_err(|s| Error::NonFiniteState { interval: k, substep: s })?;
        z0 = states.last().unwrap().data().to_vec();
        out.push(states);
    }
    Ok(out)
}

/// Steps `substeps` times of size `h`; the exact rule lands on `span` exactly.
/// On a non-finite state returns the failing substep.
fn steps(
    integrator: Integrator,
    z0: &[f64],
    h: f64,
    span: f64,
    substeps: usize,
    mut f: impl FnMut(&[f64], &mut [f64]),
) -> std::result::Result<Vec<Tensor>, usize> {
    let d = z0.len();
    let mut states = Vec::with_capacity(substeps + 1);
    states.push(Tensor::vector(z0.to_vec()));
    match integrator {
        Integrator::ExactConstantField => {
            let mut c = vec![0.0; d];
            f(z0, &mut c);
            for s in 1..=substeps {
                let off = if s == substeps { span } else { s as f64 * h };
                let z: Vec<f64> = z0.iter().zip(&c).map(|(a, b)| a + off * b).collect();
                if z.iter().any(|v| !v.is_finite()) {
                    return Err(s - 1);
                }
                states.push(Tensor::vector(z));
            }
        }
        Integrator::Euler => {
            let mut k1 = vec![0.0; d];
            let mut z = z0.to_vec();
            for s in 0..substeps {
                f(&z, &mut k1);
                for (zi, ki) in z.iter_mut().zip(&k1) {
                    *zi += h * ki;
                }
                if z.iter().any(|v| !v.is_finite()) {
                    return Err(s);
                }
                states.push(Tensor::vector(z.clone()));
            }
        }
        Integrator::Rk4 => {
            let mut ks = [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]];
            let mut u = vec![0.0; d];
            let mut z = z0.to_vec();
            for s in 0..substeps {
                rk4_step(&mut z, &mut u, &mut ks, h, |a, b| f(a, b));
                if z.iter().any(|v| !v.is_finite()) {
                    return Err(s);
                }
                states.push(Tensor::vector(z.clone()));
            }
        }
    }
    Ok(states)
}

/// One classical RK4 step in place; `stage(i, u, k)` evaluates stage `i`.
fn rk4_step(
    z: &mut [f64],
    u: &mut [f64],
    ks: &mut [Vec<f64>; 4],
    h: f64,
    mut f: impl FnMut(&[f64], &mut [f64]),
) {
    rk4_step_staged(z, u, ks, h, |_, a, b| f(a, b));
}

pub(crate) fn rk4_step_staged(
    z: &mut [f64],
    u: &mut [f64],
    ks: &mut [Vec<f64>; 4],
    h: f64,
    mut f: impl FnMut(usize, &[f64], &mut [f64]),
) {
    let [k1, k2, k3, k4] = ks;
    f(0, z, k1);
    axpy_into(u, z, h / 2.0, k1);
    f(1, u, k2);
    axpy_into(u, z, h / 2.0, k2);
    f(2, u, k3);
    axpy_into(u, z, h, k3);
    f(3, u, k4);
    for i in 0..z.len() {
        let sum = k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i];
        z[i] += h / 6.0 * sum;
    }
}

/// `out = a + s * b`.
pub(crate) fn axpy_into(out: &mut [f64], a: &[f64], s: f64, b: &[f64]) {
    for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
        *o = x + s * y;
    }
}

/// Global solver node `i`, with every index `<= 0` resolving to the start.
fn ndde_node(nodes: &[Vec<f64>], i: isize) -> &[f64] {
    &nodes[i.max(0) as usize]
}

/// Delayed value seen by RK4 stage `stage` of step `j`: the node `S` steps
/// back at the stage's left end, the average of the two bracketing nodes at
/// the midpoint.
pub(crate) fn ndde_delay_weights(j: usize, substeps: usize, stage: usize) -> [(isize, f64); 2] {
    let lo = j as isize - substeps as isize;
    match stage {
        0 => [(lo, 1.0), (lo + 1, 0.0)],
        1 | 2 => [(lo, 0.5), (lo + 1, 0.5)],
        _ => [(lo, 0.0), (lo + 1, 1.0)],
    }
}

fn solve_ndde(spec: &ModelSpec, start: &[f64], field: &mut dyn FieldFn) -> Result<Vec<Vec<Tensor>>> {
    let d = spec.state_dim();
    let (s_per, h) = (spec.substeps, spec.dt());
    let current = spec.signature.position(ArgRole::Current);
    let delayed = spec.signature.position(ArgRole::Delayed).expect("validated");
    let mut input = vec![0.0; spec.signature.input_dim()];
    let mut nodes: Vec<Vec<f64>> = vec![start.to_vec()];
    let mut ks = [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]];
    let mut u = vec![0.0; d];
    for j in 0..spec.total_steps() {
        let k = j / s_per;
        let mut z = nodes[j].clone();
        let mut eval = |stage: usize, zs: &[f64], dz: &mut [f64], nodes: &[Vec<f64>]| {
            if let Some(c) = current {
                input[c * d..(c + 1) * d].copy_from_slice(zs);
            }
            let slot = &mut input[delayed * d..(delayed + 1) * d];
            let [(i0, w0), (i1, w1)] = ndde_delay_weights(j, s_per, stage);
            let (a, b) = (ndde_node(nodes, i0), ndde_node(nodes, i1));
            for ((o, x), y) in slot.iter_mut().zip(a).zip(b) {
                *o = if w1 == 0.0 {
                    *x
                } else if w0 == 0.0 {
                    *y
                } else {
                    w0 * x + w1 * y
                };
            }
            field.eval(k, &input, dz);
        };
        match spec.integrator {
            Integrator::Euler => {
                let k1 = &mut ks[0];
                eval(0, &z, k1, &nodes);
                for (zi, ki) in z.iter_mut().zip(k1.iter()) {
                    *zi += h * ki;
                }
            }
            Integrator::Rk4 => {
                rk4_step_staged(&mut z, &mut u, &mut ks, h, |stage, a, b| eval(stage, a, b, &nodes));
            }
            Integrator::ExactConstantField => unreachable!("rejected by validation"),
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState {
                interval: k,
                substep: j % s_per,
            });
        }
        nodes.push(z);
    }
    Ok((0..spec.n_intervals)
        .map(|k| {
            nodes[k * s_per..=(k + 1) * s_per]
                .iter()
                .map(|v| Tensor::vector(v.clone()))
                .collect()
        })
        .collect())
}

/// Writes every solver node of every record as `traj_id,t,component_index,value`.
pub fn write_trajectories_csv(path: &Path, records: &[ForwardRecord]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "traj_id,t,component_index,value")?;
    for (id, rec) in records.iter().enumerate() {
        for (t, z) in rec.nodes() {
            for (c, v) in z.data().iter().enumerate() {
                writeln!(w, "{id},{t},{c},{v}")?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::MlpParams;

    fn linear(kind: ModelKind, a: f64, b: f64) -> ModelSpec {
        ModelSpec::builder(kind, 1)
            .tau(1.0)
            .intervals(2)
            .build(ModelParams::Shared(MlpParams::linear(a, b)))
            .unwrap()
    }

    #[test]
    fn simple_linear_field_is_a_linear_map_per_interval() {
        let spec = linear(ModelKind::NpcddeSimple, 1.0, 0.5);
        let rec = forward(&spec, &Tensor::scalar(2.0), &[1.0, 2.0]).unwrap();
        // z(1) = 2 + (2 + 0.5) = 4.5, z(2) = 4.5 + 5 = 9.5
        assert_eq!(rec.observations[0].1.data(), &[4.5]);
        assert_eq!(rec.observations[1].1.data(), &[9.5]);
        assert_eq!(rec.grid_states.len(), 3);
    }

    #[test]
    fn node_rk4_tracks_exponential() {
        let spec = ModelSpec::builder(ModelKind::Node, 1)
            .tau(0.5)
            .intervals(2)
            .substeps(50)
            .build(ModelParams::Shared(MlpParams::linear(-1.0, 0.0)))
            .unwrap();
        let rec = forward(&spec, &Tensor::scalar(1.0), &[1.0]).unwrap();
        assert!((rec.observations[0].1.data()[0] - (-1.0f64).exp()).abs() < 1e-10);
    }

    #[test]
    fn grid_index_snaps_and_rejects() {
        assert_eq!(grid_index(0.3, 0.1, 10).unwrap(), 3);
        assert!(grid_index(0.35, 0.1, 10).is_err());
        assert!(grid_index(1.2, 0.1, 10).is_err());
        assert!(grid_index(-0.1, 0.1, 10).is_err());
    }

    #[test]
    fn non_finite_state_is_reported() {
        let spec = ModelSpec::builder(ModelKind::NpcddeSimple, 1)
            .intervals(3)
            .build(ModelParams::Shared(MlpParams::linear(1e300, 0.0)))
            .unwrap();
        let err = forward(&spec, &Tensor::scalar(1e300), &[]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteState { interval: 0, .. }));
    }
}
