//! Randomized smoothing: Monte-Carlo class expectations under Gaussian input
//! noise, simultaneous multinomial confidence bounds and the certified ℓ2
//! radius.
//!
//! Two views of the same noise draws are kept. The certificate is built from
//! hard votes `argmax f(x+η)` (the bounds need integer counts); the
//! differentiable expectations run the draws through a [`Head`] so attacks
//! get gradients of a smooth surrogate evaluated on identical noise.

mod normal;

pub use normal::{chi2_1_upper_quantile, inverse_normal_cdf};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{argmax, gumbel_noise, Classifier, Head};
use crate::rng;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before Φ⁻¹.
pub const PROB_CLAMP: f64 = 1e-12;

/// Noise draws are pushed through the network in chunks of this many rows
/// when no gradient is needed.
const VOTE_CHUNK: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothingConfig {
    pub sigma: f64,
    pub n_samples: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self {
            sigma: 0.5,
            n_samples: 1000,
            alpha: 0.005,
            seed: 0,
        }
    }
}

impl SmoothingConfig {
    pub fn new(sigma: f64, n_samples: usize, alpha: f64, seed: u64) -> Result<Self> {
        let cfg = Self {
            sigma,
            n_samples,
            alpha,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.n_samples < 2 {
            return Err(Error::invalid(format!("need at least 2 noise samples, got {}", self.n_samples)));
        }
        check_alpha(self.alpha)
    }

    /// Same configuration with a different sample budget.
    pub fn with_samples(&self, n_samples: usize) -> Self {
        Self {
            n_samples,
            ..self.clone()
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("alpha must lie in (0,1), got {alpha}")))
    }
}

/// Result of predict-and-certify at one point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothedVerdict {
    /// Vote frequencies of the base classifier under noise.
    pub y: Vec<f64>,
    pub top_class: usize,
    pub runner_up: usize,
    pub e0: f64,
    pub e1: f64,
    pub e0_lower: f64,
    pub e1_upper: f64,
    pub radius: f64,
}

impl SmoothedVerdict {
    /// Builds the verdict from per-class vote counts over `n` draws.
    pub fn from_counts(counts: &[usize], alpha: f64, sigma: f64) -> Result<Self> {
        let n: usize = counts.iter().sum();
        if n == 0 {
            return Err(Error::invalid("no votes"));
        }
        let y: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
        let (top, second) = top_two(&y)?;
        let (e0_lower, e1_upper) = goodman_bounds(&y, n, alpha)?;
        let radius = cohen_radius(e0_lower, e1_upper, sigma)?;
        Ok(Self {
            top_class: top,
            runner_up: second,
            e0: y[top],
            e1: y[second],
            e0_lower,
            e1_upper,
            radius,
            y,
        })
    }

    pub fn record(&self, sample_id: u64, cfg: &SmoothingConfig) -> VerdictRecord {
        VerdictRecord {
            sample_id,
            y: self.y.clone(),
            top_class: self.top_class,
            e0_lower: self.e0_lower,
            e1_upper: self.e1_upper,
            radius: self.radius,
            sigma: cfg.sigma,
            n: cfg.n_samples,
            alpha: cfg.alpha,
            seed: cfg.seed,
        }
    }
}

/// One JSON line per certified sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub sample_id: u64,
    pub y: Vec<f64>,
    pub top_class: usize,
    pub e0_lower: f64,
    pub e1_upper: f64,
    pub radius: f64,
    pub sigma: f64,
    pub n: usize,
    pub alpha: f64,
    pub seed: u64,
}

/// Index of the largest and second-largest entries, ties to the lower index.
pub fn top_two(y: &[f64]) -> Result<(usize, usize)> {
    if y.len() < 2 {
        return Err(Error::invalid("need at least two classes"));
    }
    let top = argmax(y);
    let mut second = if top == 0 { 1 } else { 0 };
    for (j, &v) in y.iter().enumerate() {
        if j != top && v > y[second] {
            second = j;
        }
    }
    Ok((top, second))
}

/// Two-sided interval for one multinomial proportion `p = count/n` with
/// χ² quantile `q`.
pub fn goodman_interval(p: f64, n: usize, q: f64) -> (f64, f64) {
    let n = n as f64;
    let centre = q + 2.0 * n * p;
    let half = (q * q + 4.0 * n * p * q * (1.0 - p)).max(0.0).sqrt();
    let den = 2.0 * (n + q);
    (((centre - half) / den).clamp(0.0, 1.0), ((centre + half) / den).clamp(0.0, 1.0))
}

/// Simultaneous intervals for every class proportion in `y` (estimated from
/// `n` draws) at family-wise level `alpha`.
pub fn goodman_intervals(y: &[f64], n: usize, alpha: f64) -> Result<Vec<(f64, f64)>> {
    check_alpha(alpha)?;
    if n == 0 || y.len() < 2 {
        return Err(Error::invalid("need n > 0 draws over at least two classes"));
    }
    for (i, &p) in y.iter().enumerate() {
        let count = p * n as f64;
        if !(0.0..=1.0 + 1e-12).contains(&p) || (count - count.round()).abs() > 1e-6 {
            return Err(Error::invalid(format!("y[{i}]·n = {count} is not a vote count")));
        }
    }
    let q = chi2_1_upper_quantile(alpha / y.len() as f64);
    Ok(y.iter().map(|&p| goodman_interval(p, n, q)).collect())
}

/// Lower bound of the largest proportion and upper bound of the second.
pub fn goodman_bounds(y: &[f64], n: usize, alpha: f64) -> Result<(f64, f64)> {
    let iv = goodman_intervals(y, n, alpha)?;
    let (top, second) = top_two(y)?;
    Ok((iv[top].0, iv[second].1))
}

/// `σ/2 · (Φ⁻¹(lower) − Φ⁻¹(upper))`, or 0 when the bounds overlap.
pub fn cohen_radius(e0_lower: f64, e1_upper: f64, sigma: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&e0_lower) || !(0.0..=1.0).contains(&e1_upper) {
        return Err(Error::invalid(format!("bounds ({e0_lower}, {e1_upper}) outside [0,1]")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    if e0_lower <= e1_upper {
        return Ok(0.0);
    }
    let lo = e0_lower.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let hi = e1_upper.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    Ok((0.5 * sigma * (inverse_normal_cdf(lo) - inverse_normal_cdf(hi))).max(0.0))
}

/// Gaussian (and, for a stochastic head, Gumbel) noise for one evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraws {
    pub n: usize,
    /// `n·d` values, already scaled by σ.
    pub gaussian: Vec<f64>,
    /// `n·K` values when the head needs them.
    pub gumbel: Option<Vec<f64>>,
}

impl NoiseDraws {
    pub fn sample(cfg: &SmoothingConfig, d: usize, k: usize, head: Head, stream: &[u64]) -> Self {
        let mut rng = rng::stream(cfg.seed, stream);
        let n = cfg.n_samples;
        let gaussian = (0..n * d)
            .map(|_| cfg.sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        let gumbel = head.needs_noise().then(|| gumbel_noise(&mut rng, n * k));
        Self { n, gaussian, gumbel }
    }
}

/// A base classifier wrapped with smoothing noise and an output head.
#[derive(Clone, Debug)]
pub struct Smoothed<'a> {
    model: &'a Classifier,
    cfg: SmoothingConfig,
    head: Head,
}

/// Expectations recorded on a tape, together with the hard-vote verdict from
/// the same draws.
pub struct SmoothedEval {
    pub verdict: SmoothedVerdict,
    /// `(1/N) Σ head(f(x+η))`.
    pub expectations: Vec<f64>,
    tape: Tape,
    x: Var,
    out: Var,
}

impl SmoothedEval {
    /// `Σ_k w_k ∂E_k/∂x`.
    pub fn vjp(&self, w: &[f64]) -> Result<Vec<f64>> {
        let g = self.tape.backward_with(self.out, w)?;
        Ok(g.wrt(&self.tape, self.x)?.into_data())
    }
}

impl<'a> Smoothed<'a> {
    pub fn new(model: &'a Classifier, cfg: SmoothingConfig, head: Head) -> Result<Self> {
        cfg.validate()?;
        head.validate()?;
        Ok(Self { model, cfg, head })
    }

    pub fn model(&self) -> &'a Classifier {
        self.model
    }

    pub fn config(&self) -> &SmoothingConfig {
        &self.cfg
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn draws(&self, stream: &[u64]) -> NoiseDraws {
        NoiseDraws::sample(&self.cfg, self.model.input_dim(), self.model.num_classes(), self.head, stream)
    }

    /// Differentiable expectations plus certificate, on one set of draws.
    pub fn evaluate(&self, x: &[f64], stream: &[u64]) -> Result<SmoothedEval> {
        self.model.check_domain(x)?;
        let draws = self.draws(stream);
        let (d, k, n) = (self.model.input_dim(), self.model.num_classes(), draws.n);
        let mut tape = Tape::new();
        let params = self.model.bind(&mut tape, false)?;
        let xv = tape.leaf(Tensor::from_vec(x.to_vec())?);
        let rows = tape.broadcast_rows(xv, n)?;
        let noise = tape.constant(Tensor::new(vec![n, d], draws.gaussian)?);
        let noisy = tape.add(rows, noise)?;
        let logits = self.model.forward_on(&mut tape, &params, noisy)?;
        let mut counts = vec![0usize; k];
        for row in tape.value(logits).data().chunks(k) {
            counts[argmax(row)] += 1;
        }
        let probs = self.head.apply(&mut tape, logits, draws.gumbel.as_deref())?;
        let out = tape.mean_rows(probs)?;
        let expectations = tape.value(out).data().to_vec();
        if expectations.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("smoothed expectations"));
        }
        Ok(SmoothedEval {
            verdict: SmoothedVerdict::from_counts(&counts, self.cfg.alpha, self.cfg.sigma)?,
            expectations,
            tape,
            x: xv,
            out,
        })
    }

    /// Vote counts of the base classifier over the configured draws.
    pub fn vote_counts(&self, x: &[f64], stream: &[u64]) -> Result<Vec<usize>> {
        self.model.check_domain(x)?;
        let (d, k) = (self.model.input_dim(), self.model.num_classes());
        let mut rng = rng::stream(self.cfg.seed, stream);
        let mut counts = vec![0usize; k];
        let mut left = self.cfg.n_samples;
        let mut batch = Vec::with_capacity(VOTE_CHUNK.min(left) * d);
        while left > 0 {
            let m = left.min(VOTE_CHUNK);
            batch.clear();
            for _ in 0..m {
                batch.extend(x.iter().map(|&v| {
                    v + self.cfg.sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
                }));
            }
            let logits = self.model.forward_batch(&batch, m)?;
            for row in logits.chunks(k) {
                counts[argmax(row)] += 1;
            }
            left -= m;
        }
        Ok(counts)
    }

    /// Predict-and-certify without building a tape.
    pub fn certify(&self, x: &[f64], stream: &[u64]) -> Result<SmoothedVerdict> {
        let counts = self.vote_counts(x, stream)?;
        SmoothedVerdict::from_counts(&counts, self.cfg.alpha, self.cfg.sigma)
    }
}

/// Monte-Carlo expectation of the head output under `N(0, σ²I)` input noise.
pub fn expectations(model: &Classifier, x: &Tensor, cfg: &SmoothingConfig, head: Head) -> Result<Tensor> {
    let eval = Smoothed::new(model, cfg.clone(), head)?.evaluate(x.data(), &[])?;
    Tensor::from_vec(eval.expectations)
}

/// Smoothed prediction with its certified ℓ2 radius.
pub fn certify(model: &Classifier, x: &Tensor, cfg: &SmoothingConfig) -> Result<SmoothedVerdict> {
    Smoothed::new(model, cfg.clone(), Head::Softmax)?.certify(x.data(), &[])
}
