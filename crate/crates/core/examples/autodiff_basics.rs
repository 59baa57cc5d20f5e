//! Records `sum(tanh(W x))` on a tape, pulls a cotangent back, and compares
//! against central differences.

use pcdde::autodiff::{finite_diff_grad, tape_forward};
use pcdde::tensor::relative_error;
use pcdde::Tensor;

fn main() -> pcdde::Result<()> {
    let w = Tensor::matrix(2, 3, vec![0.5, -1.0, 0.3, 0.8, 0.2, -0.6])?;
    let x = Tensor::matrix(3, 1, vec![1.0, 0.5, -2.0])?;

    let (y, tape, out) = tape_forward(&[w.clone(), x.clone()], |t, v| {
        let h = t.matmul(v[0], v[1])?;
        Ok(t.tanh(h))
    })?;
    println!("y = {:?}", y.data());

    let ones = Tensor::new(y.shape().to_vec(), vec![1.0; y.len()])?;
    let grads = tape.vjp(out, &ones)?;

    let fd = finite_diff_grad(
        |xp| {
            let (y, _, _) = tape_forward(&[w.clone(), xp.clone()], |t, v| {
                let h = t.matmul(v[0], v[1])?;
                Ok(t.tanh(h))
            })
            .expect("shapes fixed");
            y.data().iter().sum()
        },
        &x,
        1e-6,
    )?;
    println!("dL/dx tape = {:?}", grads[1].data());
    println!("dL/dx fd   = {:?}", fd.data());
    println!("rel. error = {:.2e}", relative_error(grads[1].data(), fd.data(), 1e-8));
    Ok(())
}
