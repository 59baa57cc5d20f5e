use proptest::prelude::*;

use pcdde::adjoint::gradients;
use pcdde::bptt::grads_via_bptt;
use pcdde::experiments::gradcheck::{case_gradients, random_case, GradCase, GradcheckConfig};
use pcdde::field::{field_vjp, ArgRole, Architecture, FieldSignature, InitScheme, Layer, MlpParams};
use pcdde::model::{Integrator, ModelKind, ModelParams, ModelSpec};
use pcdde::solver::{forward, forward_taped};
use pcdde::tensor::relative_error;
use pcdde::Tensor;

fn case(seed: u64, index: usize) -> GradCase {
    let cfg = GradcheckConfig { seed, max_width: 6, max_state_dim: 3, ..GradcheckConfig::default() };
    random_case(&cfg, index).unwrap()
}

fn obs_times(c: &GradCase) -> Vec<f64> {
    c.targets.iter().map(|(t, _)| *t).collect()
}

fn scaled(lg: &[(f64, Tensor)], s: f64) -> Vec<(f64, Tensor)> {
    lg.iter().map(|(t, g)| (*t, g.scaled(s))).collect()
}

fn pad_columns(p: &MlpParams, extra: usize) -> MlpParams {
    let mut layers = p.layers().to_vec();
    let w = &layers[0].weight;
    let cols = w.cols() + extra;
    let mut data = vec![0.0; w.rows() * cols];
    for r in 0..w.rows() {
        data[r * cols..r * cols + w.cols()].copy_from_slice(w.row(r));
    }
    layers[0] = Layer { weight: Tensor::matrix(w.rows(), cols, data).unwrap(), bias: layers[0].bias.clone() };
    MlpParams::new(layers, p.activation()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn three_routes_agree(seed in 0u64..1_000, index in 0usize..64) {
        let c = case(seed, index);
        let cfg = GradcheckConfig::default();
        let [adj, tape, fd] = case_gradients(&cfg, &c).unwrap();
        prop_assert!(relative_error(&adj, &tape, 1e-8) < 1e-9);
        prop_assert!(relative_error(&adj, &fd, 1e-8) < 1e-4);
    }

    #[test]
    fn gradients_are_linear_in_the_loss_cotangents(seed in 0u64..1_000, index in 0usize..64, s in -3.0f64..3.0) {
        let c = case(seed, index);
        let lg = c.loss_grads().unwrap();
        let rec = forward(&c.spec, &c.x, &obs_times(&c)).unwrap();
        let base = gradients(&rec, &lg).unwrap();
        let doubled: Vec<_> = lg.iter().map(|(t, g)| (*t, g.scaled(1.0))).chain(scaled(&lg, s)).collect();
        let sum = gradients(&rec, &doubled).unwrap();
        let want: Vec<f64> = base.params.iter().map(|g| g * (1.0 + s)).collect();
        prop_assert!(relative_error(&sum.params, &want, 1e-10) < 1e-10);
        let sc = gradients(&rec, &scaled(&lg, s)).unwrap();
        let want: Vec<f64> = base.input.data().iter().map(|g| g * s).collect();
        prop_assert!(relative_error(sc.input.data(), &want, 1e-10) < 1e-10);
    }

    #[test]
    fn taped_record_gives_the_same_gradients(seed in 0u64..1_000, index in 0usize..64) {
        let c = case(seed, index);
        let lg = c.loss_grads().unwrap();
        let plain = gradients(&forward(&c.spec, &c.x, &obs_times(&c)).unwrap(), &lg).unwrap();
        let taped = gradients(&forward_taped(&c.spec, &c.x, &obs_times(&c)).unwrap(), &lg).unwrap();
        prop_assert_eq!(plain.params, taped.params);
        prop_assert_eq!(plain.input, taped.input);
    }

    #[test]
    fn field_vjp_is_linear(
        seed in 0u64..1_000,
        a in prop::collection::vec(-2.0f64..2.0, 6),
        u in prop::collection::vec(-1.0f64..1.0, 2),
        v in prop::collection::vec(-1.0f64..1.0, 2),
        s in -2.0f64..2.0,
    ) {
        let sig = FieldSignature::new(2, vec![ArgRole::Current, ArgRole::Grid(0), ArgRole::Grid(1)]);
        let p = pcdde::field::init_params(&sig, &Architecture::two_hidden(4).with_biases(true), InitScheme::XavierUniform, seed);
        let args: Vec<Tensor> = a.chunks(2).map(|c| Tensor::vector(c.to_vec())).collect();
        let (tu, tv) = (Tensor::vector(u.clone()), Tensor::vector(v.clone()));
        let mix = Tensor::vector(u.iter().zip(&v).map(|(x, y)| x + s * y).collect());
        let gu = field_vjp(&p, &sig, &args, &tu).unwrap();
        let gv = field_vjp(&p, &sig, &args, &tv).unwrap();
        let gm = field_vjp(&p, &sig, &args, &mix).unwrap();
        let want: Vec<f64> = gu.params.flatten().iter().zip(gv.params.flatten()).map(|(x, y)| x + s * y).collect();
        prop_assert!(relative_error(&gm.params.flatten(), &want, 1e-12) < 1e-12);
        for i in 0..3 {
            let want: Vec<f64> = gu.args[i].data().iter().zip(gv.args[i].data()).map(|(x, y)| x + s * y).collect();
            prop_assert!(relative_error(gm.args[i].data(), &want, 1e-12) < 1e-12);
        }
    }

    #[test]
    fn dummy_arguments_receive_no_gradient(seed in 0u64..1_000, x in prop::collection::vec(-1.5f64..1.5, 2), n in 1usize..4) {
        let node = ModelSpec::builder(ModelKind::Node, 2)
            .tau(0.4)
            .intervals(n)
            .substeps(3)
            .init(&Architecture::two_hidden(5).with_biases(true), InitScheme::XavierUniform, seed)
            .unwrap();
        let theta = &node.params.sets()[0];
        let padded = ModelSpec::builder(ModelKind::NpcddeGeneric, 2)
            .tau(0.4)
            .intervals(n)
            .substeps(3)
            .roles(vec![ArgRole::Current, ArgRole::Grid(0), ArgRole::Grid(1)])
            .build(ModelParams::Shared(pad_columns(theta, 4)))
            .unwrap();
        let x = Tensor::vector(x);
        let t = n as f64 * 0.4;
        let lg = vec![(t, Tensor::vector(vec![1.0, -0.5]))];
        let g_node = gradients(&forward(&node, &x, &[t]).unwrap(), &lg).unwrap();
        let g_pad = gradients(&forward(&padded, &x, &[t]).unwrap(), &lg).unwrap();
        for j in &g_pad.grid_jumps {
            prop_assert!(j.data().iter().all(|v| *v == 0.0));
        }
        prop_assert!(relative_error(g_pad.input.data(), g_node.input.data(), 1e-12) < 1e-12);
    }

    #[test]
    fn identical_unshared_sets_reduce_to_shared(seed in 0u64..1_000, x in -1.5f64..1.5, n in 1usize..5) {
        let roles = vec![ArgRole::Current, ArgRole::Grid(0), ArgRole::Grid(1)];
        let shared = ModelSpec::builder(ModelKind::NpcddeGeneric, 1)
            .tau(0.5)
            .intervals(n)
            .substeps(2)
            .roles(roles.clone())
            .init(&Architecture::two_hidden(4), InitScheme::XavierUniform, seed)
            .unwrap();
        let theta = shared.params.sets()[0].clone();
        let unshared = ModelSpec::builder(ModelKind::Unpcdde, 1)
            .tau(0.5)
            .intervals(n)
            .substeps(2)
            .roles(roles)
            .build(ModelParams::PerInterval(vec![theta; n]))
            .unwrap();
        let t = n as f64 * 0.5;
        let lg = vec![(t, Tensor::scalar(1.0))];
        let rs = forward(&shared, &Tensor::scalar(x), &[t]).unwrap();
        let ru = forward(&unshared, &Tensor::scalar(x), &[t]).unwrap();
        prop_assert_eq!(rs.final_state(), ru.final_state());
        let gs = gradients(&rs, &lg).unwrap();
        let gu = gradients(&ru, &lg).unwrap();
        let np = gs.params.len();
        let summed: Vec<f64> = (0..np).map(|i| (0..n).map(|k| gu.params[k * np + i]).sum()).collect();
        prop_assert!(relative_error(&summed, &gs.params, 1e-12) < 1e-12);
        prop_assert!(relative_error(gu.input.data(), gs.input.data(), 1e-12) < 1e-12);
    }

    #[test]
    fn ndde_and_npcdde_coincide_on_one_interval(seed in 0u64..1_000, x in -1.5f64..1.5, substeps in 1usize..5, rk4 in any::<bool>()) {
        let integrator = if rk4 { Integrator::Rk4 } else { Integrator::Euler };
        let ndde = ModelSpec::builder(ModelKind::Ndde, 1)
            .substeps(substeps)
            .integrator(integrator)
            .init(&Architecture::two_hidden(4).with_biases(true), InitScheme::XavierUniform, seed)
            .unwrap();
        let npc = ModelSpec::builder(ModelKind::NpcddeGeneric, 1)
            .substeps(substeps)
            .integrator(integrator)
            .roles(vec![ArgRole::Current, ArgRole::Grid(0)])
            .build(ndde.params.clone())
            .unwrap();
        let lg = vec![(1.0, Tensor::scalar(1.0))];
        let a = forward(&ndde, &Tensor::scalar(x), &[1.0]).unwrap();
        let b = forward(&npc, &Tensor::scalar(x), &[1.0]).unwrap();
        prop_assert!((a.final_state().data()[0] - b.final_state().data()[0]).abs() < 1e-14);
        let ga = gradients(&a, &lg).unwrap();
        let gb = gradients(&b, &lg).unwrap();
        prop_assert!(relative_error(&ga.params, &gb.params, 1e-12) < 1e-12);
        prop_assert!(relative_error(ga.input.data(), gb.input.data(), 1e-12) < 1e-12);
    }
}

#[test]
fn linear_two_interval_gradient_has_closed_form() {
    // z(2) = (1 + a)^2 x + (2 + a) b
    let (a, b) = (0.4, 0.25);
    let spec = ModelSpec::builder(ModelKind::NpcddeSimple, 1)
        .intervals(2)
        .build(ModelParams::Shared(MlpParams::linear(a, b)))
        .unwrap();
    for x in [-2.0, 0.5, 1.0] {
        let rec = forward(&spec, &Tensor::scalar(x), &[2.0]).unwrap();
        let z = rec.final_state().data()[0];
        assert!((z - ((1.0 + a) * (1.0 + a) * x + (2.0 + a) * b)).abs() < 1e-14);
        let g = gradients(&rec, &[(2.0, Tensor::scalar(1.0))]).unwrap();
        assert!((g.params[0] - (2.0 * (1.0 + a) * x + b)).abs() < 1e-13);
        assert!((g.params[1] - (2.0 + a)).abs() < 1e-13);
    }
}

#[test]
fn tape_oracle_sees_interior_observations() {
    let c = (0..64).map(|i| case(3, i)).find(|c| c.targets.len() > 2).expect("some case observes the interior");
    let lg = c.loss_grads().unwrap();
    let adj = gradients(&forward(&c.spec, &c.x, &obs_times(&c)).unwrap(), &lg).unwrap();
    let tape = grads_via_bptt(&c.spec, &c.x, &lg).unwrap();
    assert!(relative_error(&adj.params, &tape.params, 1e-12) < 1e-12);
    assert!(relative_error(adj.input.data(), tape.input.data(), 1e-12) < 1e-12);
}
