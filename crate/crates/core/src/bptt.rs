//! Gradients by differentiating the recorded solver steps.
//!
//! [`grads_via_bptt`] records the whole solve on one tape and is the
//! reference the interval adjoint is checked against. [`ndde_backward`] is a
//! hand-written reverse sweep over the same steps for constant-delay models,
//! whose stages read solver nodes from one delay back.

use crate::adjoint::{add_into, observation_nodes, Gradients};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::field::ArgRole;
use crate::model::{Integrator, ModelKind, ModelSpec};
use crate::solver::{axpy_into, grid_index, ndde_delay_weights, ForwardRecord};
use crate::tensor::Tensor;

/// Records the forward solve on a tape and pulls the observation gradients
/// back through it.
pub fn grads_via_bptt(spec: &ModelSpec, x: &Tensor, loss_grads: &[(f64, Tensor)]) -> Result<Gradients> {
    spec.validate()?;
    if x.rank() != 1 || x.len() != spec.data_dim() {
        return Err(Error::ShapeMismatch {
            op: "bptt input",
            lhs: x.shape().to_vec(),
            rhs: vec![spec.data_dim()],
        });
    }
    let d = spec.state_dim();
    let s_per = spec.substeps;
    let h = spec.dt();
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let set_vars: Vec<_> = spec.params.sets().iter().map(|p| p.register(&mut tape)).collect();
    let start = if spec.augment_dim > 0 {
        let pad = tape.constant(Tensor::zeros(&[spec.augment_dim]));
        tape.concat(&[xv, pad])?
    } else {
        xv
    };

    let roles = spec.signature.roles.clone();
    let mut nodes = vec![start];
    let mut grid = vec![start];
    for k in 0..spec.n_intervals {
        let set = spec.params.set_index(k);
        let theta = &spec.params.sets()[set];
        let vars = &set_vars[set];
        let z0 = *nodes.last().unwrap();
        let base = nodes.len() - 1;
        let field = |tape: &mut Tape, nodes: &[Var], cur: Var, j: usize, stage: usize| -> Result<Var> {
            let args = roles
                .iter()
                .map(|r| match *r {
                    ArgRole::Current => Ok(cur),
                    ArgRole::Grid(lag) => Ok(match k.checked_sub(lag) {
                        Some(l) => grid[l],
                        None => start,
                    }),
                    ArgRole::Delayed => {
                        let [(i0, w0), (i1, w1)] = ndde_delay_weights(j, s_per, stage);
                        let n = |i: isize| nodes[i.max(0) as usize];
                        Ok(if w1 == 0.0 {
                            n(i0)
                        } else if w0 == 0.0 {
                            n(i1)
                        } else {
                            let sum = tape.add(n(i0), n(i1))?;
                            tape.scale(sum, 0.5)
                        })
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let input = if args.len() == 1 { args[0] } else { tape.concat(&args)? };
            theta.record(tape, vars, input)
        };
        match spec.integrator {
            Integrator::ExactConstantField => {
                let c = field(&mut tape, &nodes, z0, base, 0)?;
                for s in 1..=s_per {
                    let off = if s == s_per { spec.tau } else { s as f64 * h };
                    let z = tape.axpy(z0, off, c)?;
                    nodes.push(z);
                }
            }
            Integrator::Euler => {
                for s in 0..s_per {
                    let j = base + s;
                    let z = nodes[j];
                    let f = field(&mut tape, &nodes, z, j, 0)?;
                    let next = tape.axpy(z, h, f)?;
                    nodes.push(next);
                }
            }
            Integrator::Rk4 => {
                for s in 0..s_per {
                    let j = base + s;
                    let z = nodes[j];
                    let k1 = field(&mut tape, &nodes, z, j, 0)?;
                    let u2 = tape.axpy(z, h / 2.0, k1)?;
                    let k2 = field(&mut tape, &nodes, u2, j, 1)?;
                    let u3 = tape.axpy(z, h / 2.0, k2)?;
                    let k3 = field(&mut tape, &nodes, u3, j, 2)?;
                    let u4 = tape.axpy(z, h, k3)?;
                    let k4 = field(&mut tape, &nodes, u4, j, 3)?;
                    let k2s = tape.scale(k2, 2.0);
                    let k3s = tape.scale(k3, 2.0);
                    let sum = tape.add(k1, k2s)?;
                    let sum = tape.add(sum, k3s)?;
                    let sum = tape.add(sum, k4)?;
                    let next = tape.axpy(z, h / 6.0, sum)?;
                    nodes.push(next);
                }
            }
        }
        grid.push(*nodes.last().unwrap());
    }

    let mut params = vec![0.0; spec.params.param_count()];
    if loss_grads.is_empty() {
        return Ok(Gradients {
            params,
            input: Tensor::zeros(&[spec.data_dim()]),
            grid_jumps: Vec::new(),
        });
    }
    let mut outs = Vec::with_capacity(loss_grads.len());
    let mut cot = Vec::with_capacity(loss_grads.len() * d);
    for (t, g) in loss_grads {
        if g.len() != d {
            return Err(Error::ShapeMismatch {
                op: "observation gradient",
                lhs: g.shape().to_vec(),
                rhs: vec![d],
            });
        }
        outs.push(nodes[grid_index(*t, h, spec.total_steps())?]);
        cot.extend_from_slice(g.data());
    }
    let out = if outs.len() == 1 { outs[0] } else { tape.concat(&outs)? };
    let grads = tape.vjp(out, &Tensor::vector(cot))?;
    let mut it = grads.into_iter();
    let input = it.next().expect("input gradient");
    params.clear();
    for g in it {
        params.extend_from_slice(g.data());
    }
    Ok(Gradients {
        params,
        input,
        grid_jumps: Vec::new(),
    })
}

/// Reverse sweep over the solver nodes of a constant-delay model. Each step
/// is reversed exactly; the delayed argument's gradient goes to the nodes it
/// was read from.
pub fn ndde_backward(record: &ForwardRecord, loss_grads: &[(f64, Tensor)]) -> Result<Gradients> {
    let spec = &record.spec;
    if spec.kind != ModelKind::Ndde {
        return Err(Error::Unsupported(format!("reverse sweep is for ndde, got {}", spec.kind)));
    }
    let d = spec.state_dim();
    let s_per = spec.substeps;
    let h = spec.dt();
    let total = spec.total_steps();
    let theta = &spec.params.sets()[0];
    let cur = spec.signature.position(ArgRole::Current);
    let del = spec.signature.position(ArgRole::Delayed).expect("validated");
    let in_dim = spec.signature.input_dim();

    let mut abar = vec![vec![0.0; d]; total + 1];
    for (m, i) in observation_nodes(spec, loss_grads)? {
        add_into(&mut abar[m], loss_grads[i].1.data());
    }
    let mut params = vec![0.0; theta.param_count()];
    let mut caches = [theta.cache(), theta.cache(), theta.cache(), theta.cache()];
    let mut gin = vec![0.0; in_dim];
    let mut kb = vec![0.0; d];
    let mut ub = vec![0.0; d];
    let mut u = vec![0.0; d];
    let mut ks = [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]];
    let node = |i: isize| record.node(i.max(0) as usize).data();

    let stages = match spec.integrator {
        Integrator::Euler => 1,
        Integrator::Rk4 => 4,
        Integrator::ExactConstantField => unreachable!("rejected by validation"),
    };
    let (coef_a, coef_u) = if stages == 1 {
        ([h, 0.0, 0.0, 0.0], [0.0; 4])
    } else {
        ([h / 6.0, h / 3.0, h / 3.0, h / 6.0], [h / 2.0, h / 2.0, h, 0.0])
    };

    let tape = record.stages.as_ref();
    if tape.is_some_and(|t| t.len() != stages * total) {
        return Err(Error::InvalidModel("stage tape does not match the record".into()));
    }

    for j in (0..total).rev() {
        let z = record.node(j).data();
        u.copy_from_slice(z);
        for i in 0..stages {
            if let Some(t) = tape {
                t.restore(j * stages + i, &mut caches[i]);
                continue;
            }
            let slot = caches[i].input_mut();
            if let Some(c) = cur {
                slot[c * d..(c + 1) * d].copy_from_slice(&u);
            }
            let [(i0, w0), (i1, w1)] = ndde_delay_weights(j, s_per, i);
            let (a, b) = (node(i0), node(i1));
            for (q, o) in slot[del * d..(del + 1) * d].iter_mut().enumerate() {
                *o = if w1 == 0.0 {
                    a[q]
                } else if w0 == 0.0 {
                    b[q]
                } else {
                    w0 * a[q] + w1 * b[q]
                };
            }
            ks[i].copy_from_slice(theta.forward_cached(&mut caches[i]));
            if i < 3 {
                let step = if i == 2 { h } else { h / 2.0 };
                axpy_into(&mut u, z, step, &ks[i]);
            }
        }
        let a_next = abar[j + 1].clone();
        let mut a_here = a_next.clone();
        ub.fill(0.0);
        for i in (0..stages).rev() {
            for q in 0..d {
                kb[q] = coef_a[i] * a_next[q] + coef_u[i] * ub[q];
            }
            theta.backward_cached(&mut caches[i], &kb, &mut gin, &mut params);
            match cur {
                Some(c) => ub.copy_from_slice(&gin[c * d..(c + 1) * d]),
                None => ub.fill(0.0),
            }
            add_into(&mut a_here, &ub);
            let g = &gin[del * d..(del + 1) * d];
            for (idx, w) in ndde_delay_weights(j, s_per, i) {
                if w != 0.0 {
                    let target = &mut abar[idx.max(0) as usize];
                    for (t, v) in target.iter_mut().zip(g) {
                        *t += w * v;
                    }
                }
            }
        }
        add_into(&mut abar[j], &a_here);
    }
    Ok(Gradients {
        params,
        input: Tensor::vector(abar.swap_remove(0)),
        grid_jumps: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adjoint::backward;
    use crate::field::{Architecture, InitScheme, MlpParams};
    use crate::model::ModelParams;
    use crate::solver::{forward, forward_taped};
    use crate::tensor::relative_error;

    #[test]
    fn tape_matches_hand_derivative() {
        let (a, b, x) = (0.7, -0.3, 1.5);
        let spec = ModelSpec::builder(ModelKind::NpcddeSimple, 1)
            .intervals(2)
            .build(ModelParams::Shared(MlpParams::linear(a, b)))
            .unwrap();
        let g = grads_via_bptt(&spec, &Tensor::scalar(x), &[(2.0, Tensor::scalar(1.0))]).unwrap();
        assert!((g.params[0] - (2.0 * (1.0 + a) * x + b)).abs() < 1e-12);
        assert!((g.params[1] - (2.0 + a)).abs() < 1e-12);
    }

    #[test]
    fn adjoint_and_tape_agree_on_every_interval_kind() {
        for kind in [
            ModelKind::Node,
            ModelKind::Anode,
            ModelKind::NpcddeSimple,
            ModelKind::NpcddeSkip,
            ModelKind::NpcddeGeneric,
            ModelKind::Unpcdde,
        ] {
            for integrator in [Integrator::Euler, Integrator::Rk4] {
                let spec = ModelSpec::builder(kind, 2)
                    .tau(0.5)
                    .intervals(3)
                    .substeps(3)
                    .integrator(integrator)
                    .init(&Architecture::two_hidden(4).with_biases(true), InitScheme::XavierUniform, 2)
                    .unwrap();
                let x = Tensor::vector(vec![0.4, -0.8]);
                let times = [0.5, 1.0, 1.5];
                let rec = forward(&spec, &x, &times).unwrap();
                let lg: Vec<_> = rec
                    .observations
                    .iter()
                    .map(|(t, z)| (*t, z.map(|v| v - 0.3)))
                    .collect();
                let adj = backward(&rec, &lg).unwrap();
                let tape = grads_via_bptt(&spec, &x, &lg).unwrap();
                assert!(relative_error(&adj.params, &tape.params, 1e-12) < 1e-12, "{kind} {integrator:?}");
                assert!(relative_error(adj.input.data(), tape.input.data(), 1e-12) < 1e-12, "{kind}");
            }
        }
    }

    #[test]
    fn exact_rule_agrees_with_tape() {
        for kind in [ModelKind::NpcddeSimple, ModelKind::NpcddeSkip, ModelKind::Unpcdde] {
            let mut b = ModelSpec::builder(kind, 2).tau(0.5).intervals(3).substeps(4);
            if kind == ModelKind::Unpcdde {
                b = b.roles(vec![ArgRole::Grid(0), ArgRole::Grid(2)]);
            }
            let spec = b
                .integrator(Integrator::ExactConstantField)
                .init(&Architecture::two_hidden(4), InitScheme::XavierUniform, 5)
                .unwrap();
            let x = Tensor::vector(vec![1.0, 0.5]);
            let rec = forward(&spec, &x, &[0.25, 1.0, 1.125, 1.5]).unwrap();
            let lg: Vec<_> = rec.observations.iter().map(|(t, z)| (*t, z.clone())).collect();
            let adj = backward(&rec, &lg).unwrap();
            let tape = grads_via_bptt(&spec, &x, &lg).unwrap();
            assert!(relative_error(&adj.params, &tape.params, 1e-12) < 1e-12, "{kind}");
            assert!(relative_error(adj.input.data(), tape.input.data(), 1e-12) < 1e-12, "{kind}");
        }
    }

    #[test]
    fn ndde_sweep_matches_tape() {
        for integrator in [Integrator::Euler, Integrator::Rk4] {
            for substeps in [1, 3] {
                let spec = ModelSpec::builder(ModelKind::Ndde, 2)
                    .tau(0.5)
                    .intervals(3)
                    .substeps(substeps)
                    .integrator(integrator)
                    .init(&Architecture::two_hidden(4).with_biases(true), InitScheme::XavierUniform, 8)
                    .unwrap();
                let x = Tensor::vector(vec![0.4, -0.8]);
                let rec = forward(&spec, &x, &[0.5, 1.5]).unwrap();
                let lg: Vec<_> = rec.observations.iter().map(|(t, z)| (*t, z.clone())).collect();
                let sweep = ndde_backward(&rec, &lg).unwrap();
                let tape = grads_via_bptt(&spec, &x, &lg).unwrap();
                assert!(relative_error(&sweep.params, &tape.params, 1e-12) < 1e-12);
                assert!(relative_error(sweep.input.data(), tape.input.data(), 1e-12) < 1e-12);
                let taped = forward_taped(&spec, &x, &[0.5, 1.5]).unwrap();
                let reused = ndde_backward(&taped, &lg).unwrap();
                assert_eq!(reused.params, sweep.params);
                assert_eq!(reused.input, sweep.input);
            }
        }
    }
}
