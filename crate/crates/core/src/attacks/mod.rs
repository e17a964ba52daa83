//! Norm-minimising evasion attacks against certified classifiers.
//!
//! Every attack is driven by an *attacker* [`Certifier`] (cheap budget,
//! gradients) and judged by a *judge* certifier (the defender's
//! configuration, typically a larger sample budget). An attack succeeds
//! confidently when the judge assigns the final point a different class with
//! a non-zero radius.

mod baselines;
mod caa;
mod certifier;

pub use baselines::{cw_attack, deepfool_attack, pgd_attack, CwConfig, DeepFoolConfig, PgdConfig};
pub use caa::{caa_attack, CaaConfig};
pub use certifier::{Assessment, Certifier, IbpCertifier, ScoreKind, Verdict};

use std::time::Instant;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{distance, norm_l2};
use crate::error::{Error, Result};
use crate::rng;

/// Gradients with a smaller norm are replaced by a random direction.
pub const MIN_GRAD_NORM: f64 = 1e-12;

const JUDGE_STREAM: u64 = 0x6a75_6467;
const FALLBACK_STREAM: u64 = 0x6661_6c6c;
const CLEAN_ITER: u64 = u64::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Caa,
    Pgd,
    Cw,
    DeepFool,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Caa => "caa",
            Method::Pgd => "pgd",
            Method::Cw => "cw",
            Method::DeepFool => "deepfool",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "caa" => Ok(Method::Caa),
            "pgd" => Ok(Method::Pgd),
            "cw" => Ok(Method::Cw),
            "deepfool" => Ok(Method::DeepFool),
            other => Err(Error::invalid(format!("unknown attack {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Still predicted as the original class.
    Search,
    /// Adversarial but uncertified; stepping to raise confidence.
    Repair,
    /// Adversarial and certified; contracting towards the clean point.
    Refine,
}

/// One attack iteration, recorded before the step is taken.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub iter: usize,
    pub phase: Phase,
    pub point: Vec<f64>,
    pub class: usize,
    pub radius: f64,
    /// Distance from the clean point.
    pub norm: f64,
    /// Step length taken from this point.
    pub step: f64,
    /// Ray-query result that informed the step, if any.
    pub ray: Option<f64>,
    /// The step was cut to `eps_max`.
    pub clipped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub method: Method,
    pub original_class: usize,
    /// Judge's certified radius at the clean point.
    pub clean_radius: f64,
    /// The judge assigns `x_adv` a class other than the original.
    pub success: bool,
    /// ... and certifies it with a non-zero radius.
    pub confident: bool,
    pub x_adv: Option<Vec<f64>>,
    /// `‖x_adv − x₀‖₂`, or 0 without a success.
    pub norm: f64,
    pub adv_class: Option<usize>,
    pub adv_radius: f64,
    pub iterations: usize,
    pub gradient_fallbacks: usize,
    /// Why the attack stopped early, if it did.
    pub aborted: Option<String>,
    pub trace: Vec<TraceStep>,
    pub elapsed_secs: f64,
}

impl AttackResult {
    /// Perturbation norm of a confident success, 0 otherwise.
    pub fn attack_radius(&self) -> f64 {
        if self.confident {
            self.norm
        } else {
            0.0
        }
    }
}

/// The judge's verdict at a clean point, drawn exactly as every attack with
/// this `seed` draws it.
pub fn clean_verdict(judge: &dyn Certifier, x0: &[f64], seed: u64) -> Result<Verdict> {
    judge.certify(x0, &[seed, JUDGE_STREAM, CLEAN_ITER])
}

/// Fresh judge certification at `x_adv` and `x0`: true iff the class changed
/// and the new certificate is non-zero.
pub fn confident(judge: &dyn Certifier, x_adv: &[f64], x0: &[f64], seed: u64) -> Result<bool> {
    let c0 = clean_verdict(judge, x0, seed)?.class;
    let v = judge.certify(x_adv, &[seed, JUDGE_STREAM, 0])?;
    Ok(v.class != c0 && v.radius > 0.0)
}

/// Shared bookkeeping for one attack on one sample.
pub(crate) struct Run<'a> {
    method: Method,
    judge: &'a dyn Certifier,
    seed: u64,
    x0: Vec<f64>,
    c0: usize,
    clean_radius: f64,
    start: Instant,
    trace: Vec<TraceStep>,
    candidates: Vec<(f64, usize, Vec<f64>)>,
    confirmed: Option<(Vec<f64>, Verdict)>,
    fallbacks: usize,
}

impl<'a> Run<'a> {
    pub(crate) fn begin(method: Method, judge: &'a dyn Certifier, x0: &[f64], seed: u64) -> Result<Self> {
        let start = Instant::now();
        crate::model::check_unit_box(x0)?;
        let v = clean_verdict(judge, x0, seed)?;
        Ok(Self {
            method,
            judge,
            seed,
            x0: x0.to_vec(),
            c0: v.class,
            clean_radius: v.radius,
            start,
            trace: Vec::new(),
            candidates: Vec::new(),
            confirmed: None,
            fallbacks: 0,
        })
    }

    pub(crate) fn x0(&self) -> &[f64] {
        &self.x0
    }

    pub(crate) fn c0(&self) -> usize {
        self.c0
    }

    pub(crate) fn norm(&self, x: &[f64]) -> f64 {
        distance(x, &self.x0)
    }

    pub(crate) fn record(&mut self, step: TraceStep) {
        self.trace.push(step);
    }

    /// Remembers a point the attacker believes is a confident success.
    pub(crate) fn candidate(&mut self, x: &[f64], iter: usize) {
        self.candidates.push((self.norm(x), iter, x.to_vec()));
    }

    /// Judges `x` right away; keeps it if it passes.
    pub(crate) fn try_confirm(&mut self, x: &[f64], iter: usize) -> Result<bool> {
        let v = self.judge.certify(x, &[self.seed, JUDGE_STREAM, iter as u64])?;
        if v.class != self.c0 && v.radius > 0.0 {
            self.confirmed = Some((x.to_vec(), v));
            return Ok(true);
        }
        Ok(false)
    }

    /// `g/‖g‖`, or a seeded random unit vector when `g` vanishes.
    pub(crate) fn unit_or_random(&mut self, g: &[f64], iter: usize) -> Result<Vec<f64>> {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("attack gradient"));
        }
        let n = norm_l2(g);
        if n >= MIN_GRAD_NORM {
            return Ok(g.iter().map(|v| v / n).collect());
        }
        self.fallbacks += 1;
        let mut r = rng::stream(self.seed, &[FALLBACK_STREAM, self.method as u64, iter as u64]);
        let v: Vec<f64> = (0..g.len()).map(|_| StandardNormal.sample(&mut r)).collect();
        let n = norm_l2(&v);
        Ok(v.into_iter().map(|a| a / n).collect())
    }

    /// Picks the final answer: an already confirmed point, else the smallest
    /// candidates (at most `max_confirm` judged), else the last iterate.
    pub(crate) fn finish(
        mut self,
        iterations: usize,
        last: &[f64],
        aborted: Option<String>,
        max_confirm: usize,
    ) -> Result<AttackResult> {
        if self.confirmed.is_none() {
            let mut cands = std::mem::take(&mut self.candidates);
            cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for (_, iter, x) in cands.into_iter().take(max_confirm) {
                if self.try_confirm(&x, iter)? {
                    break;
                }
            }
        }
        let (x_adv, verdict) = match self.confirmed.take() {
            Some(found) => (Some(found.0), Some(found.1)),
            None => {
                let v = self.judge.certify(last, &[self.seed, JUDGE_STREAM, iterations as u64])?;
                if v.class != self.c0 {
                    (Some(last.to_vec()), Some(v))
                } else {
                    (None, None)
                }
            }
        };
        let norm = x_adv.as_deref().map_or(0.0, |x| self.norm(x));
        Ok(AttackResult {
            method: self.method,
            original_class: self.c0,
            clean_radius: self.clean_radius,
            success: verdict.is_some(),
            confident: verdict.is_some_and(|v| v.radius > 0.0),
            adv_class: verdict.map(|v| v.class),
            adv_radius: verdict.map_or(0.0, |v| v.radius),
            x_adv,
            norm,
            iterations,
            gradient_fallbacks: self.fallbacks,
            aborted,
            trace: self.trace,
            elapsed_secs: self.start.elapsed().as_secs_f64(),
        })
    }
}

/// Runs `body` and turns a non-finite failure into an aborted result.
pub(crate) fn guarded<T>(r: Result<T>) -> Result<std::result::Result<T, String>> {
    match r {
        Ok(v) => Ok(Ok(v)),
        Err(Error::NonFinite(what)) => Ok(Err(format!("non-finite {what}"))),
        Err(e) => Err(e),
    }
}

/// An attack with its parameters, as swept by the harness.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum AttackSpec {
    Caa(CaaConfig),
    Pgd(PgdConfig),
    Cw(CwConfig),
    #[serde(rename = "deepfool")]
    DeepFool(DeepFoolConfig),
}

impl AttackSpec {
    pub fn method(&self) -> Method {
        match self {
            AttackSpec::Caa(_) => Method::Caa,
            AttackSpec::Pgd(_) => Method::Pgd,
            AttackSpec::Cw(_) => Method::Cw,
            AttackSpec::DeepFool(_) => Method::DeepFool,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            AttackSpec::Caa(c) => c.validate(),
            AttackSpec::Pgd(c) => c.validate(),
            AttackSpec::Cw(c) => c.validate(),
            AttackSpec::DeepFool(c) => c.validate(),
        }
    }

    /// Same parameters with a different seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut s = self.clone();
        match &mut s {
            AttackSpec::Caa(c) => c.seed = seed,
            AttackSpec::Pgd(c) => c.seed = seed,
            AttackSpec::Cw(c) => c.seed = seed,
            AttackSpec::DeepFool(c) => c.seed = seed,
        }
        s
    }

    pub fn run(&self, attacker: &dyn Certifier, judge: &dyn Certifier, x0: &[f64]) -> Result<AttackResult> {
        match self {
            AttackSpec::Caa(c) => caa_attack(attacker, judge, x0, c),
            AttackSpec::Pgd(c) => pgd_attack(attacker, judge, x0, c),
            AttackSpec::Cw(c) => cw_attack(attacker, judge, x0, c),
            AttackSpec::DeepFool(c) => deepfool_attack(attacker, judge, x0, c),
        }
    }
}


#[cfg(test)]
mod tests {
    use super::testing::*;
    use super::*;
    use crate::model::Head;
    use crate::smoothing::{Smoothed, SmoothingConfig};

    #[test]
    fn confident_examples() {
        // boundary w·x = 0.5 along the first axis
        let m = linear_binary(&[1.0, 0.0], 0.5, 50.0);
        let judge = Smoothed::new(&m, SmoothingConfig::new(0.1, 2000, 0.005, 3).unwrap(), Head::Softmax).unwrap();
        let x0 = [0.1, 0.5];
        assert!(!confident(&judge, &x0, &x0, 1).unwrap());
        assert!(!confident(&judge, &[0.5, 0.5], &x0, 1).unwrap());
        assert!(confident(&judge, &[0.95, 0.5], &x0, 1).unwrap());
    }

    #[test]
    fn method_names_roundtrip() {
        for m in [Method::Caa, Method::Pgd, Method::Cw, Method::DeepFool] {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("fgsm".parse::<Method>().is_err());
    }

    #[test]
    fn spec_serialises_with_method_tag() {
        let s = AttackSpec::DeepFool(DeepFoolConfig::default());
        let j = serde_json::to_string(&s).unwrap();
        assert!(j.contains("\"method\":\"deepfool\""));
        assert_eq!(serde_json::from_str::<AttackSpec>(&j).unwrap(), s);
    }
}
