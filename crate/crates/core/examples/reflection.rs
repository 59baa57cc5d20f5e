//! The reflection `x -> -x` is out of reach for an ODE flow on the line, but
//! the skip-connected piecewise-constant model represents it exactly with the
//! linear field `f(z(⌊t/τ⌋τ), z(⌊t/τ⌋τ - τ)) = (F(x) - x) / (2τ)` evaluated on
//! the older argument.

use pcdde::field::MlpParams;
use pcdde::model::{Integrator, ModelKind, ModelParams, ModelSpec};
use pcdde::solver::forward;
use pcdde::Tensor;

fn main() -> pcdde::Result<()> {
    let tau = 0.5;
    // G(x) = (-x - x) / (2τ) reads only the second argument
    let g = MlpParams::affine(Tensor::matrix(1, 2, vec![0.0, -1.0 / tau])?, None)?;
    let spec = ModelSpec::builder(ModelKind::NpcddeSkip, 1)
        .tau(tau)
        .intervals(2)
        .substeps(1)
        .integrator(Integrator::ExactConstantField)
        .build(ModelParams::Shared(g))?;

    for x in [-1.5, -1.0, 0.0, 0.25, 1.0, 3.0] {
        let rec = forward(&spec, &Tensor::scalar(x), &[tau])?;
        println!(
            "x = {x:5.2}   z(tau) = {:6.3}   z(2tau) = {:6.3}",
            rec.observations[0].1.data()[0],
            rec.final_state().data()[0]
        );
    }
    Ok(())
}
