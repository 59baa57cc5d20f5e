//! Interval-wise adjoint for piecewise-constant delay models.
//!
//! The backward sweep runs interval by interval from `nτ` down to `0`,
//! replaying each interval's stages from the checkpointed substep states and
//! reversing the integrator exactly. A grid state `z(lτ)` read as a frozen
//! argument by a later interval receives that interval's argument gradient
//! into `pending_grid[l]`, which is added to the adjoint state as a jump when
//! the sweep reaches `t = lτ`. Arguments before `t = 0` feed the input
//! gradient directly.

use crate::error::{Error, Result};
use crate::field::{ArgRole, MlpCache, MlpParams};
use crate::model::{Integrator, ModelKind, ModelSpec};
use crate::solver::{axpy_into, grid_index, ForwardRecord};
use crate::tensor::Tensor;

/// Gradients of a scalar loss with respect to the parameters and the input.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    /// Flat, in [`ModelParams::flatten`](crate::model::ModelParams::flatten) order.
    pub params: Vec<f64>,
    /// With respect to the data-dimension input.
    pub input: Tensor,
    /// Total delay jump added at each `lτ`, `l = 0..=n`. Empty for routes
    /// without interval structure.
    pub grid_jumps: Vec<Tensor>,
}

/// Backward state of the sweep: adjoint `a(t)`, pending jumps and running
/// parameter gradients.
#[derive(Clone, Debug)]
pub struct AdjointAccumulator {
    a: Vec<f64>,
    pending: Vec<Vec<f64>>,
    history: Vec<f64>,
    params: Vec<f64>,
    cursor: usize,
    dt: f64,
}

impl AdjointAccumulator {
    /// Starts at `t = nτ` with a zero adjoint.
    pub fn new(spec: &ModelSpec) -> Self {
        let d = spec.state_dim();
        Self {
            a: vec![0.0; d],
            pending: vec![vec![0.0; d]; spec.n_intervals + 1],
            history: vec![0.0; d],
            params: vec![0.0; spec.params.param_count()],
            cursor: spec.total_steps(),
            dt: spec.dt(),
        }
    }

    pub fn a_current(&self) -> &[f64] {
        &self.a
    }

    /// Jump collected so far for `z(lτ)`.
    pub fn pending(&self, l: usize) -> &[f64] {
        &self.pending[l]
    }

    pub fn param_grads(&self) -> &[f64] {
        &self.params
    }

    pub fn cursor_time(&self) -> f64 {
        self.cursor as f64 * self.dt
    }

    /// Adds `∂L/∂z(t)` at the cursor. Observations must arrive in decreasing
    /// time order, each exactly when the sweep sits on its node.
    pub fn accumulate_observation(&mut self, t: f64, grad: &Tensor) -> Result<()> {
        let m = grid_index(t, self.dt, usize::MAX).map_err(|_| Error::ObservationOrder {
            time: t,
            cursor: self.cursor_time(),
        })?;
        if m != self.cursor {
            return Err(Error::ObservationOrder {
                time: t,
                cursor: self.cursor_time(),
            });
        }
        if grad.len() != self.a.len() {
            return Err(Error::ShapeMismatch {
                op: "observation gradient",
                lhs: grad.shape().to_vec(),
                rhs: vec![self.a.len()],
            });
        }
        for (a, g) in self.a.iter_mut().zip(grad.data()) {
            *a += g;
        }
        Ok(())
    }

    /// Routes the gradient of argument `z((k - lag)τ)` used on interval `k`.
    fn add_delay(&mut self, k: usize, lag: usize, g: &[f64]) {
        let target = match k.checked_sub(lag) {
            Some(l) => &mut self.pending[l],
            None => &mut self.history,
        };
        for (t, v) in target.iter_mut().zip(g) {
            *t += v;
        }
    }

    fn absorb(&mut self, l: usize) {
        for (a, p) in self.a.iter_mut().zip(&self.pending[l]) {
            *a += p;
        }
    }
}

/// Switches used to build deliberately broken gradients for negative tests.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, Default)]
pub struct AdjointOptions {
    pub skip_delay_jumps: bool,
}

/// Gradients of `L` given `∂L/∂z(t_i)` at observed times, by the cheapest
/// exact route: the interval adjoint, or a global reverse sweep for NDDE.
pub fn gradients(record: &ForwardRecord, loss_grads: &[(f64, Tensor)]) -> Result<Gradients> {
    if record.spec.kind == ModelKind::Ndde {
        crate::bptt::ndde_backward(record, loss_grads)
    } else {
        backward(record, loss_grads)
    }
}

/// Interval adjoint. Matches [`grads_via_bptt`](crate::bptt::grads_via_bptt)
/// to rounding, since each substep is reversed exactly.
pub fn backward(record: &ForwardRecord, loss_grads: &[(f64, Tensor)]) -> Result<Gradients> {
    backward_with(record, loss_grads, AdjointOptions::default())
}

/// Observations as `(node, index into loss_grads)`, latest first.
pub(crate) fn observation_nodes(
    spec: &ModelSpec,
    loss_grads: &[(f64, Tensor)],
) -> Result<Vec<(usize, usize)>> {
    let d = spec.state_dim();
    let mut nodes = loss_grads
        .iter()
        .enumerate()
        .map(|(i, (t, g))| {
            if g.rank() != 1 || g.len() != d {
                return Err(Error::ShapeMismatch {
                    op: "observation gradient",
                    lhs: g.shape().to_vec(),
                    rhs: vec![d],
                });
            }
            Ok((grid_index(*t, spec.dt(), spec.total_steps())?, i))
        })
        .collect::<Result<Vec<_>>>()?;
    nodes.sort_by(|a, b| b.0.cmp(&a.0));
    Ok(nodes)
}

fn drain(
    acc: &mut AdjointAccumulator,
    obs: &[(usize, usize)],
    next: &mut usize,
    loss_grads: &[(f64, Tensor)],
) -> Result<()> {
    while let Some(&(m, i)) = obs.get(*next) {
        if m != acc.cursor {
            break;
        }
        acc.accumulate_observation(loss_grads[i].0, &loss_grads[i].1)?;
        *next += 1;
    }
    Ok(())
}

#[doc(hidden)]
pub fn backward_with(
    record: &ForwardRecord,
    loss_grads: &[(f64, Tensor)],
    opts: AdjointOptions,
) -> Result<Gradients> {
    let spec = &record.spec;
    if spec.kind == ModelKind::Ndde {
        return Err(Error::Unsupported(
            "ndde has no interval structure; use adjoint::gradients".into(),
        ));
    }
    let d = spec.state_dim();
    let s_per = spec.substeps;
    let h = spec.dt();
    let roles = &spec.signature.roles;
    let cur = spec.signature.position(ArgRole::Current);
    let in_dim = spec.signature.input_dim();
    let obs = observation_nodes(spec, loss_grads)?;
    let offsets = spec.params.offsets();

    let per_interval = match spec.integrator {
        Integrator::ExactConstantField => 1,
        Integrator::Euler => s_per,
        Integrator::Rk4 => 4 * s_per,
    };
    let tape = record.stages.as_ref();
    if tape.is_some_and(|t| t.len() != per_interval * spec.n_intervals) {
        return Err(Error::InvalidModel("stage tape does not match the record".into()));
    }

    let mut acc = AdjointAccumulator::new(spec);
    let mut next = 0;
    drain(&mut acc, &obs, &mut next, loss_grads)?;

    let mut input = vec![0.0; in_dim];
    let mut gin = vec![0.0; in_dim];
    let mut argbar = vec![0.0; in_dim];
    let mut kb = vec![0.0; d];
    let mut ub = vec![0.0; d];
    let mut ks = [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]];
    let mut u = vec![0.0; d];
    let mut abar = vec![0.0; d];

    for k in (0..spec.n_intervals).rev() {
        let set = spec.params.set_index(k);
        let theta = &spec.params.sets()[set];
        let pg = offsets[set]..offsets[set] + theta.param_count();
        for (p, role) in roles.iter().enumerate() {
            if let ArgRole::Grid(lag) = *role {
                input[p * d..(p + 1) * d]
                    .copy_from_slice(record.history(k as isize - lag as isize).data());
            }
        }
        argbar.fill(0.0);
        let mut caches = [theta.cache(), theta.cache(), theta.cache(), theta.cache()];

        match spec.integrator {
            Integrator::ExactConstantField => {
                let offset = |s: usize| if s == s_per { spec.tau } else { s as f64 * h };
                let cbar = &mut ub;
                cbar.fill(0.0);
                for s in (0..s_per).rev() {
                    let w = offset(s + 1) - offset(s);
                    for (c, a) in cbar.iter_mut().zip(&acc.a) {
                        *c += w * a;
                    }
                    acc.cursor -= 1;
                    if s > 0 {
                        drain(&mut acc, &obs, &mut next, loss_grads)?;
                    }
                }
                let c0 = &mut caches[0];
                match tape {
                    Some(t) => t.restore(k, c0),
                    None => {
                        c0.input_mut().copy_from_slice(&input);
                        theta.forward_cached(c0);
                    }
                }
                theta.backward_cached(c0, cbar, &mut gin, &mut acc.params[pg.clone()]);
                add_into(&mut argbar, &gin);
            }
            Integrator::Euler => {
                for s in (0..s_per).rev() {
                    let c0 = &mut caches[0];
                    match tape {
                        Some(t) => t.restore(k * s_per + s, c0),
                        None => {
                            load(c0, &input, cur, d, record.substep_states[k][s].data());
                            theta.forward_cached(c0);
                        }
                    }
                    for (b, a) in kb.iter_mut().zip(&acc.a) {
                        *b = h * a;
                    }
                    theta.backward_cached(c0, &kb, &mut gin, &mut acc.params[pg.clone()]);
                    if let Some(c) = cur {
                        add_into(&mut acc.a, &gin[c * d..(c + 1) * d]);
                    }
                    add_into(&mut argbar, &gin);
                    acc.cursor -= 1;
                    if s > 0 {
                        drain(&mut acc, &obs, &mut next, loss_grads)?;
                    }
                }
            }
            Integrator::Rk4 => {
                let coef_a = [h / 6.0, h / 3.0, h / 3.0, h / 6.0];
                let coef_u = [h / 2.0, h / 2.0, h, 0.0];
                for s in (0..s_per).rev() {
                    if let Some(t) = tape {
                        for (i, c) in caches.iter_mut().enumerate() {
                            t.restore((k * s_per + s) * 4 + i, c);
                        }
                    } else {
                        // replay the stages
                        let z = record.substep_states[k][s].data();
                        u.copy_from_slice(z);
                        for i in 0..4 {
                            load(&mut caches[i], &input, cur, d, &u);
                            ks[i].copy_from_slice(theta.forward_cached(&mut caches[i]));
                            if i < 3 {
                                let step = if i == 2 { h } else { h / 2.0 };
                                axpy_into(&mut u, z, step, &ks[i]);
                            }
                        }
                    }
                    abar.copy_from_slice(&acc.a);
                    ub.fill(0.0);
                    for i in (0..4).rev() {
                        for j in 0..d {
                            kb[j] = coef_a[i] * abar[j] + coef_u[i] * ub[j];
                        }
                        theta.backward_cached(&mut caches[i], &kb, &mut gin, &mut acc.params[pg.clone()]);
                        match cur {
                            Some(c) => ub.copy_from_slice(&gin[c * d..(c + 1) * d]),
                            None => ub.fill(0.0),
                        }
                        add_into(&mut acc.a, &ub);
                        add_into(&mut argbar, &gin);
                    }
                    acc.cursor -= 1;
                    if s > 0 {
                        drain(&mut acc, &obs, &mut next, loss_grads)?;
                    }
                }
            }
        }

        for (p, role) in roles.iter().enumerate() {
            if let ArgRole::Grid(lag) = *role {
                acc.add_delay(k, lag, &argbar[p * d..(p + 1) * d]);
            }
        }
        if !opts.skip_delay_jumps {
            acc.absorb(k);
        }
        drain(&mut acc, &obs, &mut next, loss_grads)?;
    }

    let mut input_grad = acc.a.clone();
    add_into(&mut input_grad, &acc.history);
    input_grad.truncate(spec.data_dim());
    Ok(Gradients {
        params: acc.params,
        input: Tensor::vector(input_grad),
        grid_jumps: acc.pending.into_iter().map(Tensor::vector).collect(),
    })
}

fn load(cache: &mut MlpCache, input: &[f64], cur: Option<usize>, d: usize, z: &[f64]) {
    let slot = cache.input_mut();
    slot.copy_from_slice(input);
    if let Some(c) = cur {
        slot[c * d..(c + 1) * d].copy_from_slice(z);
    }
}

pub(crate) fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// Unflattens a gradient into one [`MlpParams`] per parameter set.
pub fn param_sets(spec: &ModelSpec, flat: &[f64]) -> Result<Vec<MlpParams>> {
    Ok(spec.params.with_flat(flat)?.sets().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::MlpParams;
    use crate::model::ModelParams;
    use crate::solver::forward;

    #[test]
    fn linear_simple_model_matches_hand_derivative() {
        // z(2) = (1 + a)^2 x + (2 + a) b for dz/dt = a z(⌊t⌋) + b
        let (a, b, x) = (0.7, -0.3, 1.5);
        let spec = ModelSpec::builder(ModelKind::NpcddeSimple, 1)
            .intervals(2)
            .build(ModelParams::Shared(MlpParams::linear(a, b)))
            .unwrap();
        let rec = forward(&spec, &Tensor::scalar(x), &[2.0]).unwrap();
        let g = backward(&rec, &[(2.0, Tensor::scalar(1.0))]).unwrap();
        let da = 2.0 * (1.0 + a) * x + b;
        let db = 2.0 + a;
        assert!((g.params[0] - da).abs() < 1e-12);
        assert!((g.params[1] - db).abs() < 1e-12);
        assert!((g.input.data()[0] - (1.0 + a) * (1.0 + a)).abs() < 1e-12);
    }

    #[test]
    fn observations_must_arrive_in_order() {
        let spec = ModelSpec::builder(ModelKind::NpcddeSimple, 1)
            .intervals(2)
            .build(ModelParams::Shared(MlpParams::linear(1.0, 0.0)))
            .unwrap();
        let mut acc = AdjointAccumulator::new(&spec);
        assert!(acc.accumulate_observation(2.0, &Tensor::scalar(1.0)).is_ok());
        let err = acc.accumulate_observation(1.0, &Tensor::scalar(1.0)).unwrap_err();
        assert!(matches!(err, Error::ObservationOrder { .. }));
        assert_eq!(acc.a_current(), &[1.0]);
    }

    #[test]
    fn ndde_goes_through_the_dispatcher() {
        let spec = ModelSpec::builder(ModelKind::Ndde, 1)
            .substeps(4)
            .build(ModelParams::Shared(MlpParams::affine(
                Tensor::matrix(1, 2, vec![0.5, -0.5]).unwrap(),
                None,
            ).unwrap()))
            .unwrap();
        let rec = forward(&spec, &Tensor::scalar(1.0), &[1.0]).unwrap();
        assert!(backward(&rec, &[(1.0, Tensor::scalar(1.0))]).is_err());
        assert!(gradients(&rec, &[(1.0, Tensor::scalar(1.0))]).is_ok());
    }

    #[test]
    fn stage_tape_reproduces_the_replayed_adjoint() {
        use crate::field::{Architecture, InitScheme};
        use crate::solver::forward_taped;
        let cases = [
            (ModelKind::Node, Integrator::Rk4),
            (ModelKind::NpcddeGeneric, Integrator::Rk4),
            (ModelKind::NpcddeSkip, Integrator::Euler),
            (ModelKind::Unpcdde, Integrator::ExactConstantField),
        ];
        for (kind, integrator) in cases {
            let mut b = ModelSpec::builder(kind, 2).tau(0.5).intervals(3).substeps(4);
            if kind == ModelKind::Unpcdde {
                b = b.roles(vec![ArgRole::Grid(0), ArgRole::Grid(2)]);
            }
            let spec = b
                .integrator(integrator)
                .init(&Architecture::two_hidden(5), InitScheme::XavierUniform, 3)
                .unwrap();
            let x = Tensor::vector(vec![0.3, -0.8]);
            let obs = [(0.5, Tensor::vector(vec![1.0, 0.5])), (1.5, Tensor::vector(vec![-0.2, 1.0]))];
            let times = [0.5, 1.5];
            let plain = backward(&forward(&spec, &x, &times).unwrap(), &obs).unwrap();
            let rec = forward_taped(&spec, &x, &times).unwrap();
            assert!(rec.stages.is_some());
            let taped = backward(&rec, &obs).unwrap();
            assert_eq!(plain.params, taped.params, "{kind}");
            assert_eq!(plain.input, taped.input, "{kind}");
        }
    }
}
