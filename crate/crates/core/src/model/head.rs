use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

/// Differentiable replacement for the classifier's argmax output layer.
///
/// `Gumbel` applies `softmax((log π + g) / τ)` with `π = softmax(logits)` and
/// i.i.d. standard Gumbel `g`; `Softmax` is the noise-free `π` itself.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Head {
    Softmax,
    Gumbel { tau: f64 },
}

impl Default for Head {
    fn default() -> Self {
        Head::Gumbel { tau: 1.0 }
    }
}

impl Head {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Head::Gumbel { tau } if !(tau > 0.0 && tau.is_finite()) => {
                Err(Error::invalid(format!("Gumbel temperature must be positive, got {tau}")))
            }
            _ => Ok(()),
        }
    }

    pub fn needs_noise(&self) -> bool {
        matches!(self, Head::Gumbel { .. })
    }

    /// Applies the head row-wise to `[n, K]` logits on the tape. `gumbel`
    /// supplies `n·K` noise values when the head is stochastic.
    pub fn apply(&self, tape: &mut Tape, logits: Var, gumbel: Option<&[f64]>) -> Result<Var> {
        match *self {
            Head::Softmax => tape.softmax_rows(logits),
            Head::Gumbel { tau } => {
                self.validate()?;
                let log_pi = tape.log_softmax_rows(logits)?;
                let shape = tape.value(log_pi).shape().to_vec();
                let g = match gumbel {
                    Some(g) => g.to_vec(),
                    None => vec![0.0; tape.value(log_pi).len()],
                };
                let g = tape.constant(Tensor::new(shape, g)?);
                let z = tape.add(log_pi, g)?;
                let z = tape.scale(z, 1.0 / tau)?;
                tape.softmax_rows(z)
            }
        }
    }
}

/// Draws `len` i.i.d. standard Gumbel values.
pub(crate) fn gumbel_noise(rng: &mut impl rand::Rng, len: usize) -> Vec<f64> {
    let dist = Gumbel::new(0.0, 1.0).expect("valid Gumbel parameters");
    (0..len).map(|_| dist.sample(rng)).collect()
}

/// Gumbel-Softmax sample of a length-K logit vector with explicit noise.
pub fn gumbel_softmax_with_noise(logits: &Tensor, noise: &[f64], tau: f64) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("Gumbel temperature must be positive, got {tau}")));
    }
    if noise.len() != logits.len() {
        return Err(Error::ShapeMismatch {
            op: "gumbel_softmax",
            lhs: logits.shape().to_vec(),
            rhs: vec![noise.len()],
        });
    }
    let mut tape = Tape::new();
    let l = tape.constant(logits.reshape(vec![1, logits.len()])?);
    let y = Head::Gumbel { tau }.apply(&mut tape, l, Some(noise))?;
    tape.value(y).reshape(vec![logits.len()])
}

/// Gumbel-Softmax sample of a length-K logit vector with seeded noise.
pub fn gumbel_softmax(logits: &Tensor, tau: f64, seed: u64) -> Result<Tensor> {
    let noise = gumbel_noise(&mut rng::stream(seed, &[0x6775_6d62]), logits.len());
    gumbel_softmax_with_noise(logits, &noise, tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::argmax;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec()).unwrap()
    }

    #[test]
    fn uniform_with_zero_noise() {
        let y = gumbel_softmax_with_noise(&t(&[0.4, 0.4, 0.4]), &[0.0; 3], 1.0).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn low_temperature_is_argmax() {
        // logits whose softmax is (0.9, 0.1)
        let logits = t(&[0.9f64.ln(), 0.1f64.ln()]);
        let y = gumbel_softmax_with_noise(&logits, &[0.0, 0.0], 1e-3).unwrap();
        assert!(y.data()[0] > 1.0 - 1e-6);
    }

    #[test]
    fn rejects_bad_temperature() {
        assert!(gumbel_softmax(&t(&[0.0, 1.0]), 0.0, 1).is_err());
        assert!(gumbel_softmax(&t(&[0.0, 1.0]), -1.0, 1).is_err());
    }

    #[test]
    fn argmax_frequency_matches_categorical() {
        // Gumbel-max: argmax(log π + g) is an exact categorical sampler.
        let logits = t(&[0.7f64.ln(), 0.3f64.ln()]);
        let draws = 100_000;
        let mut hits = 0usize;
        for s in 0..draws {
            let y = gumbel_softmax(&logits, 1.0, s as u64).unwrap();
            if argmax(y.data()) == 0 {
                hits += 1;
            }
        }
        let freq = hits as f64 / draws as f64;
        assert!((freq - 0.7).abs() < 0.01, "{freq}");
    }

    #[test]
    fn output_is_a_probability_vector() {
        for s in 0..50 {
            let y = gumbel_softmax(&t(&[3.0, -2.0, 0.5, 10.0]), 0.5, s).unwrap();
            let sum: f64 = y.data().iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
