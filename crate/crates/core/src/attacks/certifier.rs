use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;
use crate::ibp::ibp_radius_label;
use crate::model::{argmax, Classifier};
use crate::smoothing::{Smoothed, SmoothedEval};

/// Class decision and certified ℓ2 radius at a point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Verdict {
    pub class: usize,
    pub radius: f64,
}

/// What the differentiable scores of an [`Assessment`] are.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreKind {
    /// Class expectations in `[0,1]` summing to one.
    Probabilities,
    /// Unnormalised logits.
    Logits,
}

enum Backward {
    Smoothed(SmoothedEval),
    Tape { tape: Tape, x: Var, out: Var },
}

/// A verdict plus differentiable class scores at one point.
pub struct Assessment {
    pub verdict: Verdict,
    pub scores: Vec<f64>,
    pub kind: ScoreKind,
    backward: Backward,
}

impl Assessment {
    /// `Σ_k w_k ∂s_k/∂x` for the raw scores.
    pub fn vjp(&self, w: &[f64]) -> Result<Vec<f64>> {
        match &self.backward {
            Backward::Smoothed(e) => e.vjp(w),
            Backward::Tape { tape, x, out } => {
                let g = tape.backward_with(*out, w)?;
                Ok(g.wrt(tape, *x)?.into_data())
            }
        }
    }

    /// Log-probabilities: `ln s` for expectations, log-softmax for logits.
    pub fn log_scores(&self) -> Vec<f64> {
        match self.kind {
            ScoreKind::Probabilities => self.scores.iter().map(|p| p.max(f64::MIN_POSITIVE).ln()).collect(),
            ScoreKind::Logits => {
                let mx = self.scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + self.scores.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                self.scores.iter().map(|v| v - lse).collect()
            }
        }
    }

    /// `Σ_k w_k ∂(log s_k)/∂x`.
    pub fn log_vjp(&self, w: &[f64]) -> Result<Vec<f64>> {
        let seed: Vec<f64> = match self.kind {
            ScoreKind::Probabilities => {
                w.iter().zip(&self.scores).map(|(a, p)| a / p.max(f64::MIN_POSITIVE)).collect()
            }
            ScoreKind::Logits => {
                let total: f64 = w.iter().sum();
                w.iter().zip(self.log_scores()).map(|(a, l)| a - l.exp() * total).collect()
            }
        };
        self.vjp(&seed)
    }
}

/// A certified classifier as seen by an attacker.
pub trait Certifier: Sync {
    fn input_dim(&self) -> usize;
    fn num_classes(&self) -> usize;
    /// Verdict and differentiable scores at `x`; `stream` selects any noise.
    fn assess(&self, x: &[f64], stream: &[u64]) -> Result<Assessment>;
    /// Verdict only.
    fn certify(&self, x: &[f64], stream: &[u64]) -> Result<Verdict>;
}

impl Certifier for Smoothed<'_> {
    fn input_dim(&self) -> usize {
        self.model().input_dim()
    }

    fn num_classes(&self) -> usize {
        self.model().num_classes()
    }

    fn assess(&self, x: &[f64], stream: &[u64]) -> Result<Assessment> {
        let eval = self.evaluate(x, stream)?;
        Ok(Assessment {
            verdict: Verdict {
                class: eval.verdict.top_class,
                radius: eval.verdict.radius,
            },
            scores: eval.expectations.clone(),
            kind: ScoreKind::Probabilities,
            backward: Backward::Smoothed(eval),
        })
    }

    fn certify(&self, x: &[f64], stream: &[u64]) -> Result<Verdict> {
        let v = Smoothed::certify(self, x, stream)?;
        Ok(Verdict {
            class: v.top_class,
            radius: v.radius,
        })
    }
}

/// Deterministic classifier certified by interval bound propagation. The
/// certified ℓ∞ half-width is reported as an ℓ2 radius, which the ℓ∞ box
/// contains.
#[derive(Clone, Debug)]
pub struct IbpCertifier<'a> {
    model: &'a Classifier,
    tol: f64,
}

impl<'a> IbpCertifier<'a> {
    pub fn new(model: &'a Classifier, tol: f64) -> Self {
        Self { model, tol }
    }
}

impl Certifier for IbpCertifier<'_> {
    fn input_dim(&self) -> usize {
        self.model.input_dim()
    }

    fn num_classes(&self) -> usize {
        self.model.num_classes()
    }

    fn assess(&self, x: &[f64], _stream: &[u64]) -> Result<Assessment> {
        let mut tape = Tape::new();
        let xv = tape.leaf(Tensor::from_vec(x.to_vec())?);
        let out = self.model.logits_on(&mut tape, xv)?;
        let scores = tape.value(out).data().to_vec();
        let class = argmax(&scores);
        let radius = ibp_radius_label(self.model, x, class, self.tol)?;
        Ok(Assessment {
            verdict: Verdict { class, radius },
            scores,
            kind: ScoreKind::Logits,
            backward: Backward::Tape { tape, x: xv, out },
        })
    }

    fn certify(&self, x: &[f64], _stream: &[u64]) -> Result<Verdict> {
        self.model.check_domain(x)?;
        let class = argmax(&self.model.forward_batch(x, 1)?);
        Ok(Verdict {
            class,
            radius: ibp_radius_label(self.model, x, class, self.tol)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Head;
    use crate::smoothing::SmoothingConfig;

    #[test]
    fn log_vjp_matches_finite_differences() {
        let m = Classifier::default_mlp(3, 3, 2).unwrap();
        let s = Smoothed::new(&m, SmoothingConfig::new(0.3, 50, 0.005, 1).unwrap(), Head::Softmax).unwrap();
        let ibp = IbpCertifier::new(&m, 1e-4);
        let x = [0.2, 0.7, 0.4];
        let w = [1.0, -0.5, 0.25];
        for c in [&s as &dyn Certifier, &ibp] {
            let a = c.assess(&x, &[]).unwrap();
            let g = a.log_vjp(&w).unwrap();
            let f = |x: &[f64]| -> f64 {
                let l = c.assess(x, &[]).unwrap().log_scores();
                l.iter().zip(&w).map(|(a, b)| a * b).sum()
            };
            for i in 0..3 {
                let (mut p, mut q) = (x, x);
                p[i] += 1e-6;
                q[i] -= 1e-6;
                let fd = (f(&p) - f(&q)) / 2e-6;
                assert!((fd - g[i]).abs() < 1e-5 * fd.abs().max(1e-2), "{fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn ibp_certifier_agrees_with_model() {
        let m = Classifier::default_mlp(2, 2, 3).unwrap();
        let c = IbpCertifier::new(&m, 1e-5);
        let x = [0.4, 0.1];
        let v = c.certify(&x, &[]).unwrap();
        assert_eq!(v.class, m.predict(&Tensor::from_vec(x.to_vec()).unwrap()).unwrap());
        assert_eq!(c.assess(&x, &[]).unwrap().verdict, v);
    }
}
