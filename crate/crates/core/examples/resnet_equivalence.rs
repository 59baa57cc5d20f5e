//! With τ = 1, one interval per layer and unshared parameters, the
//! piecewise-constant model is a residual network `z <- z + f_k(z)`.

use pcdde::field::{ArgRole, Architecture, InitScheme};
use pcdde::model::{Integrator, ModelKind, ModelSpec};
use pcdde::solver::forward;
use pcdde::tensor::relative_error;
use pcdde::Tensor;

fn main() -> pcdde::Result<()> {
    let layers = 4;
    let spec = ModelSpec::builder(ModelKind::Unpcdde, 3)
        .intervals(layers)
        .substeps(1)
        .roles(vec![ArgRole::Grid(0)])
        .integrator(Integrator::ExactConstantField)
        .init(&Architecture::two_hidden(8).with_biases(true), InitScheme::XavierUniform, 11)?;

    let x = vec![0.2, -0.7, 1.1];
    let rec = forward(&spec, &Tensor::vector(x.clone()), &[])?;

    let mut z = x;
    for theta in spec.params.sets() {
        let fz = theta.eval(&z);
        for (zi, fi) in z.iter_mut().zip(&fz) {
            *zi += fi;
        }
    }
    println!("pcdde  z(T) = {:?}", rec.final_state().data());
    println!("resnet z_L  = {z:?}");
    println!("rel. error  = {:.2e}", relative_error(rec.final_state().data(), &z, 1e-12));
    Ok(())
}
