//! Verify tape gradients against central differences, first on a small
//! composite function, then on the rate-distortion loss of a tiny model.

use gabic::network::{Bound, Gabic, ModelConfig, QuantMode};
use gabic::tensor::gradcheck::{finite_diff_check, finite_diff_check_many, Probe};
use gabic::tensor::{Rng, Tensor};

fn main() -> gabic::Result<()> {
    let mut rng = Rng::new(1);
    let x = Tensor::<f64>::randn(&[2, 3, 4], 1.0, &mut rng);
    let err = finite_diff_check(
        |g, x| {
            let t = g.tanh(x);
            let s = g.softmax(t, 2).unwrap();
            let p = g.mul(s, x).unwrap();
            g.sum(p)
        },
        &x,
        1e-6,
        None,
    )?;
    println!("softmax(tanh(x)) * x: max relative error {err:.2e}");

    let model = Gabic::<f64>::new(ModelConfig::gradcheck(), 0)?;
    let img = Tensor::<f64>::uniform(&[1, 3, 64, 64], 0.0, 1.0, &mut rng);
    let mut inputs = vec![img];
    inputs.extend(model.params().tensors().iter().cloned());
    let err = finite_diff_check_many(
        |g, vars| {
            let p = Bound::from_vars(vars[1..].to_vec());
            let out = model.forward(g, &p, vars[0], QuantMode::Noise, 0.025, &mut Rng::new(9));
            out.expect("forward").rd.loss
        },
        &inputs,
        1e-5,
        Probe::Strided(1),
    )?;
    println!("RD loss, {} tensors probed: max relative error {err:.2e}", inputs.len());
    Ok(())
}
