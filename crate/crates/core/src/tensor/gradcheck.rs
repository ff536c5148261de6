//! Central-difference verification of tape gradients.

use super::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Which coordinates of each input to probe.
#[derive(Clone, Debug)]
pub enum Probe {
    All,
    /// At most this many coordinates, evenly strided through the tensor.
    Strided(usize),
}

impl Probe {
    fn coords(&self, len: usize) -> Vec<usize> {
        match *self {
            Probe::All => (0..len).collect(),
            Probe::Strided(max) if max >= len => (0..len).collect(),
            Probe::Strided(max) => {
                let step = len as f64 / max as f64;
                (0..max).map(|i| ((i as f64 + 0.5) * step) as usize).collect()
            }
        }
    }
}

/// Max over probed coordinates of
/// `|analytic - central| / max(1, |central|)` for a scalar function of one
/// tensor.
pub fn finite_diff_check<S: Real>(
    f: impl Fn(&mut Graph<S>, Var) -> Var,
    x: &Tensor<S>,
    eps: f64,
    probe: Option<Probe>,
) -> Result<f64> {
    finite_diff_check_many(
        |g, vars| f(g, vars[0]),
        std::slice::from_ref(x),
        eps,
        probe.unwrap_or(Probe::All),
    )
}

/// As [`finite_diff_check`], over several inputs at once.
pub fn finite_diff_check_many<S: Real>(
    f: impl Fn(&mut Graph<S>, &[Var]) -> Var,
    xs: &[Tensor<S>],
    eps: f64,
    probe: Probe,
) -> Result<f64> {
    if eps <= 0.0 {
        return Err(Error::invalid("finite difference step must be positive"));
    }
    let eval = |inputs: &[Tensor<S>], want_grad: bool| -> Result<(f64, Vec<Option<Tensor<S>>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars);
        if g.value(out).len() != 1 {
            return Err(Error::shape("finite_diff_check", "function must be scalar-valued"));
        }
        let value = g.value(out).item().f64();
        let grads = if want_grad {
            g.backward(out)?;
            vars.iter().map(|&v| g.grad(v)).collect()
        } else {
            Vec::new()
        };
        Ok((value, grads))
    };

    let (_, grads) = eval(xs, true)?;
    let mut worst = 0.0f64;
    let mut inputs = xs.to_vec();
    for (t, grad) in grads.iter().enumerate() {
        for idx in probe.coords(xs[t].len()) {
            let orig = xs[t].data()[idx];
            inputs[t].data_mut()[idx] = S::of(orig.f64() + eps);
            let (plus, _) = eval(&inputs, false)?;
            inputs[t].data_mut()[idx] = S::of(orig.f64() - eps);
            let (minus, _) = eval(&inputs, false)?;
            inputs[t].data_mut()[idx] = orig;
            let central = (plus - minus) / (2.0 * eps);
            let analytic = grad.as_ref().map_or(0.0, |g| g.data()[idx].f64());
            worst = worst.max((analytic - central).abs() / central.abs().max(1.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn sum_is_exact() {
        let mut rng = Rng::new(0);
        let x = Tensor::<f64>::randn(&[4, 4], 1.0, &mut rng);
        let err = finite_diff_check(|g, v| g.sum(v), &x, 1e-5, None).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn softmax_sum_is_constant() {
        let mut rng = Rng::new(1);
        let x = Tensor::<f64>::randn(&[6], 1.0, &mut rng);
        let err = finite_diff_check(
            |g, v| {
                let s = g.softmax(v, 0).unwrap();
                g.sum(s)
            },
            &x,
            1e-5,
            None,
        )
        .unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn detects_wrong_gradient() {
        // ste_round has a pass-through gradient but a piecewise-constant value.
        let x = Tensor::<f64>::new(&[2], vec![0.3, 1.2]).unwrap();
        let err = finite_diff_check(
            |g, v| {
                let z = g.constant(Tensor::zeros(&[2]));
                let r = g.ste_round(v, z).unwrap();
                g.sum(r)
            },
            &x,
            1e-5,
            None,
        )
        .unwrap();
        assert!(err > 0.5);
    }

    #[test]
    fn strided_probe_is_bounded() {
        assert_eq!(Probe::Strided(3).coords(10), vec![1, 5, 8]);
        assert_eq!(Probe::Strided(30).coords(4), vec![0, 1, 2, 3]);
    }
}
