use std::str::FromStr;

use super::config::SIGMA_MIN;
use crate::error::{Error, Result};
use crate::prob;
use crate::tensor::{Graph, Real, Rng, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantMode {
    /// Additive `U(-0.5, 0.5)` noise.
    Noise,
    /// Rounding with a pass-through gradient. Rates are still evaluated on
    /// the noisy proxy.
    SteRound,
    /// Exact rounding, detached from the tape.
    Round,
}

impl QuantMode {
    pub fn as_str(self) -> &'static str {
        match self {
            QuantMode::Noise => "noise",
            QuantMode::SteRound => "ste_round",
            QuantMode::Round => "round",
        }
    }

    /// Mode used for the input of the rate terms.
    pub fn rate_mode(self) -> QuantMode {
        match self {
            QuantMode::SteRound => QuantMode::Noise,
            m => m,
        }
    }
}

impl FromStr for QuantMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(QuantMode::Noise),
            "ste_round" | "ste" => Ok(QuantMode::SteRound),
            "round" => Ok(QuantMode::Round),
            other => Err(Error::invalid(format!("unknown quantization mode `{other}`"))),
        }
    }
}

/// `Q(v - mu) + mu` under `mode`. Noise draws come from `rng` in row-major
/// order.
pub fn quantize<S: Real>(g: &mut Graph<S>, v: Var, mu: Var, mode: QuantMode, rng: &mut Rng) -> Result<Var> {
    match mode {
        QuantMode::Noise => {
            if g.shape(v) != g.shape(mu) {
                return Err(Error::shape(
                    "quantize",
                    format!("{:?} vs {:?}", g.shape(v), g.shape(mu)),
                ));
            }
            // (v - mu + u) + mu == v + u
            let u = Tensor::uniform(g.shape(v), -0.5, 0.5, rng);
            let u = g.constant(u);
            g.add(v, u)
        }
        QuantMode::SteRound => g.ste_round(v, mu),
        QuantMode::Round => {
            let r = g.ste_round(v, mu)?;
            let t = g.value(r).clone();
            Ok(g.constant(t))
        }
    }
}

/// Rounding half away from zero of `v - mu`, plus `mu`.
pub fn round_values<S: Real>(v: &Tensor<S>, mu: &Tensor<S>) -> Result<Tensor<S>> {
    if v.shape() != mu.shape() {
        return Err(Error::shape("round_values", format!("{:?} vs {:?}", v.shape(), mu.shape())));
    }
    let data = v.data().iter().zip(mu.data()).map(|(&x, &m)| (x - m).round() + m).collect();
    Tensor::new(v.shape(), data)
}

/// Per-element Gaussian bits plus how many scales had to be raised to
/// [`SIGMA_MIN`].
pub fn gaussian_bits<S: Real>(y_hat: &Tensor<S>, mu: &Tensor<S>, sigma: &Tensor<S>) -> Result<(Tensor<S>, usize)> {
    if y_hat.shape() != mu.shape() || y_hat.shape() != sigma.shape() {
        return Err(Error::shape(
            "gaussian_bits",
            format!("{:?}, {:?}, {:?}", y_hat.shape(), mu.shape(), sigma.shape()),
        ));
    }
    let mut clamped = 0;
    let data = (0..y_hat.len())
        .map(|i| {
            let mut s = sigma.data()[i].f64();
            if !(s >= SIGMA_MIN) {
                clamped += 1;
                s = SIGMA_MIN;
            }
            S::of(prob::gaussian_bits((y_hat.data()[i] - mu.data()[i]).f64(), s))
        })
        .collect();
    Ok((Tensor::new(y_hat.shape(), data)?, clamped))
}

/// Learned per-channel logistic density of the hyper latent.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedPrior {
    pub loc: Vec<f64>,
    pub scale: Vec<f64>,
}

impl FactorizedPrior {
    pub fn channels(&self) -> usize {
        self.loc.len()
    }

    /// Probability of the unit bin centred on `z` in channel `c`.
    pub fn bin_probability(&self, c: usize, z: f64) -> f64 {
        prob::logistic_bin(z, self.loc[c], self.scale[c])
    }
}

/// Per-element bits of an NCHW hyper latent under `prior`.
pub fn factorized_bits<S: Real>(z_hat: &Tensor<S>, prior: &FactorizedPrior) -> Result<Tensor<S>> {
    let (n, c, h, w) = z_hat.dims4()?;
    if c != prior.channels() {
        return Err(Error::shape(
            "factorized_bits",
            format!("{c} channels vs prior of {}", prior.channels()),
        ));
    }
    if prior.scale.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::invalid("factorized prior scales must be positive"));
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(z_hat.len());
    for b in 0..n {
        for ch in 0..c {
            for &v in &z_hat.data()[(b * c + ch) * hw..][..hw] {
                out.push(S::of(prob::logistic_bits(v.f64(), prior.loc[ch], prior.scale[ch])));
            }
        }
    }
    Tensor::new(z_hat.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::new(&[v.len()], v.to_vec()).unwrap()
    }

    fn quant(v: &[f64], mu: &[f64], mode: QuantMode) -> Vec<f64> {
        let mut g = Graph::new();
        let (a, b) = (g.leaf(t(v)), g.constant(t(mu)));
        let q = quantize(&mut g, a, b, mode, &mut Rng::new(0)).unwrap();
        g.value(q).data().to_vec()
    }

    #[test]
    fn round_mode_examples() {
        assert_eq!(quant(&[2.4], &[0.4], QuantMode::Round), vec![2.4]);
        assert_eq!(quant(&[0.7, -0.5, 0.5, 1.5], &[0.0; 4], QuantMode::Round), vec![1.0, -1.0, 1.0, 2.0]);
    }

    #[test]
    fn noise_mean_abs_error_is_quarter() {
        let n = 1_000_000;
        let v: Vec<f64> = (0..n).map(|i| (i % 97) as f64 * 0.13 - 5.0).collect();
        let q = quant(&v, &vec![0.0; n], QuantMode::Noise);
        let mean = q.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum::<f64>() / n as f64;
        assert!((mean - 0.25).abs() < 0.01, "{mean}");
        assert!(q.iter().zip(&v).all(|(a, b)| (a - b).abs() <= 0.5));
    }

    #[test]
    fn ste_has_pass_through_gradient() {
        let mut g = Graph::<f64>::new();
        let v = g.leaf(t(&[0.3, -1.7]));
        let mu = g.constant(t(&[0.1, 0.0]));
        let q = quantize(&mut g, v, mu, QuantMode::SteRound, &mut Rng::new(0)).unwrap();
        assert_eq!(g.value(q).data(), &[0.1, -2.0]);
        let s = g.sum(q);
        g.backward(s).unwrap();
        assert_eq!(g.grad(v).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn round_mode_is_detached() {
        let mut g = Graph::<f64>::new();
        let v = g.leaf(t(&[0.3]));
        let mu = g.constant(t(&[0.0]));
        let q = quantize(&mut g, v, mu, QuantMode::Round, &mut Rng::new(0)).unwrap();
        assert!(!g.requires_grad(q));
    }

    #[test]
    fn unknown_mode_rejected() {
        assert!("stochastic".parse::<QuantMode>().is_err());
        assert_eq!("ste_round".parse::<QuantMode>().unwrap(), QuantMode::SteRound);
    }

    #[test]
    fn gaussian_bits_examples() {
        let (b, n) = gaussian_bits(&t(&[0.0]), &t(&[0.0]), &t(&[1.0])).unwrap();
        assert!((b.item() - 1.384866534291).abs() < 1e-9);
        assert_eq!(n, 0);
        let (b, _) = gaussian_bits(&t(&[0.0]), &t(&[0.0]), &t(&[SIGMA_MIN])).unwrap();
        assert!(b.item() < 1e-9);
        let (lo, n) = gaussian_bits(&t(&[0.0, 0.0]), &t(&[0.0, 0.0]), &t(&[0.001, -1.0])).unwrap();
        assert_eq!(n, 2);
        assert!(lo.data().iter().all(|&v| v >= 0.0 && v < 1e-9));
        for d in [0.3, 1.0, 2.5, 7.0] {
            let (p, _) = gaussian_bits(&t(&[d]), &t(&[0.0]), &t(&[0.8])).unwrap();
            let (m, _) = gaussian_bits(&t(&[-d]), &t(&[0.0]), &t(&[0.8])).unwrap();
            assert_eq!(p.item(), m.item());
            assert!(p.item() > 0.0);
        }
    }

    #[test]
    fn factorized_prior_properties() {
        let prior = FactorizedPrior {
            loc: vec![0.3],
            scale: vec![0.7],
        };
        // bin centred on the location is the most probable one
        let at = prior.bin_probability(0, 0.3);
        for off in [-2.0, -1.0, 1.0, 2.0] {
            assert!(prior.bin_probability(0, 0.3 + off) < at);
        }
        // integer bins cover the whole mass
        let total: f64 = (-200..=200).map(|k| prior.bin_probability(0, k as f64)).sum();
        assert!(total > 1.0 - 1e-6 && total <= 1.0 + 1e-12, "{total}");
        // bits fall as the scale shrinks
        let z = Tensor::<f64>::full(&[1, 1, 1, 1], 0.3);
        let mut last = f64::INFINITY;
        for s in [2.0, 1.0, 0.5, 0.1] {
            let p = FactorizedPrior {
                loc: vec![0.3],
                scale: vec![s],
            };
            let b = factorized_bits(&z, &p).unwrap().item();
            assert!(b > 0.0 && b < last);
            last = b;
        }
    }
}
