//! Gradient baselines recast against the certifier's class scores.

use serde::{Deserialize, Serialize};

use super::{guarded, AttackResult, Certifier, Method, Phase, Run, TraceStep, MIN_GRAD_NORM};
use crate::autodiff::norm_l2;
use crate::error::{Error, Result};
use crate::geometry::project_in_place;

const PGD_STREAM: u64 = 0x0070_6764;
const CW_STREAM: u64 = 0x6377;
const DEEPFOOL_STREAM: u64 = 0x6466;

/// Normalised-gradient ascent on the cross-entropy of the clean class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PgdConfig {
    pub eps_step: f64,
    pub iters: usize,
    pub seed: u64,
}

impl Default for PgdConfig {
    fn default() -> Self {
        Self {
            eps_step: 10.0 / 255.0,
            iters: 100,
            seed: 0,
        }
    }
}

/// Gradient descent on `‖x′−x₀‖² + c·max(f_{c₀} − max_{j≠c₀} f_j, −κ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CwConfig {
    pub c: f64,
    pub kappa: f64,
    pub steps: usize,
    pub lr: f64,
    pub max_confirm: usize,
    pub seed: u64,
}

impl Default for CwConfig {
    fn default() -> Self {
        Self {
            c: 1.0,
            kappa: 0.0,
            steps: 200,
            lr: 0.01,
            max_confirm: 5,
            seed: 0,
        }
    }
}

/// Iterated linearised projection onto the nearest class boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeepFoolConfig {
    pub iters: usize,
    pub overshoot: f64,
    pub seed: u64,
}

impl Default for DeepFoolConfig {
    fn default() -> Self {
        Self {
            iters: 50,
            overshoot: 1.02,
            seed: 0,
        }
    }
}

fn trace_at(run: &Run<'_>, i: usize, x: &[f64], class: usize, radius: f64, step: f64) -> TraceStep {
    TraceStep {
        iter: i,
        phase: if class == run.c0() { Phase::Search } else { Phase::Repair },
        point: x.to_vec(),
        class,
        radius,
        norm: run.norm(x),
        step,
        ray: None,
        clipped: false,
    }
}

impl PgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_step > 0.0 && self.eps_step.is_finite()) || self.iters == 0 {
            return Err(Error::invalid("PGD needs a positive step and at least one iteration"));
        }
        Ok(())
    }
}

impl CwConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c >= 0.0) || !(self.lr > 0.0) || self.steps == 0 || self.max_confirm == 0 || !(self.kappa >= 0.0) {
            return Err(Error::invalid("C-W needs c >= 0, kappa >= 0, lr > 0 and at least one step"));
        }
        Ok(())
    }
}

impl DeepFoolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 || !(self.overshoot >= 1.0) {
            return Err(Error::invalid("DeepFool needs at least one iteration and overshoot >= 1"));
        }
        Ok(())
    }
}

/// Steps `x ← P(x + ε·∇J/‖∇J‖)` with `J = −log s_{c₀}` and stops at the
/// first point the judge confirms.
pub fn pgd_attack(attacker: &dyn Certifier, judge: &dyn Certifier, x0: &[f64], cfg: &PgdConfig) -> Result<AttackResult> {
    cfg.validate()?;
    let mut run = Run::begin(Method::Pgd, judge, x0, cfg.seed)?;
    let c0 = run.c0();
    let mut x = x0.to_vec();
    let mut aborted = None;
    let mut iters = 0;
    for i in 0..cfg.iters {
        iters = i + 1;
        let step = guarded((|| {
            let a = attacker.assess(&x, &[cfg.seed, PGD_STREAM, i as u64])?;
            let v = a.verdict;
            if v.class != c0 && v.radius > 0.0 {
                run.candidate(&x, i);
                if run.try_confirm(&x, i)? {
                    return Ok(true);
                }
            }
            let mut w = vec![0.0; a.scores.len()];
            w[c0] = -1.0;
            let g = a.log_vjp(&w)?;
            let dir = run.unit_or_random(&g, i)?;
            run.record(trace_at(&run, i, &x, v.class, v.radius, cfg.eps_step));
            for (xi, d) in x.iter_mut().zip(&dir) {
                *xi += cfg.eps_step * d;
            }
            project_in_place(&mut x);
            Ok(false)
        })())?;
        match step {
            Ok(true) => break,
            Ok(false) => {}
            Err(why) => {
                aborted = Some(why);
                break;
            }
        }
    }
    run.finish(iters, &x, aborted, 1)
}

/// Projected gradient descent on the Carlini–Wagner objective over the
/// certifier's scores; returns the smallest confirmed candidate.
pub fn cw_attack(attacker: &dyn Certifier, judge: &dyn Certifier, x0: &[f64], cfg: &CwConfig) -> Result<AttackResult> {
    cfg.validate()?;
    let mut run = Run::begin(Method::Cw, judge, x0, cfg.seed)?;
    let c0 = run.c0();
    let mut x = x0.to_vec();
    let mut aborted = None;
    let mut iters = 0;
    for i in 0..cfg.steps {
        iters = i + 1;
        let step = guarded((|| {
            let a = attacker.assess(&x, &[cfg.seed, CW_STREAM, i as u64])?;
            let v = a.verdict;
            if v.class != c0 && v.radius > 0.0 {
                run.candidate(&x, i);
            }
            let f = &a.scores;
            if f.iter().any(|s| !s.is_finite()) {
                return Err(Error::NonFinite("attack objective"));
            }
            let j = (0..f.len())
                .filter(|&j| j != c0)
                .max_by(|&p, &q| f[p].total_cmp(&f[q]).then(q.cmp(&p)))
                .expect("at least two classes");
            let mut grad: Vec<f64> = x.iter().zip(run.x0()).map(|(a, b)| 2.0 * (a - b)).collect();
            if f[c0] - f[j] > -cfg.kappa && cfg.c > 0.0 {
                let mut w = vec![0.0; f.len()];
                w[c0] = cfg.c;
                w[j] = -cfg.c;
                for (g, h) in grad.iter_mut().zip(a.vjp(&w)?) {
                    *g += h;
                }
            }
            run.record(trace_at(&run, i, &x, v.class, v.radius, cfg.lr * norm_l2(&grad)));
            for (xi, g) in x.iter_mut().zip(&grad) {
                *xi -= cfg.lr * g;
            }
            project_in_place(&mut x);
            Ok(())
        })())?;
        if let Err(why) = step {
            aborted = Some(why);
            break;
        }
    }
    run.finish(iters, &x, aborted, cfg.max_confirm)
}

/// DeepFool over log-scores `log s_k`, accumulating the minimal linearised
/// steps and applying them to `x₀` with the overshoot factor. Iterates until
/// the attacker sees a certified adversarial point the judge confirms.
pub fn deepfool_attack(
    attacker: &dyn Certifier,
    judge: &dyn Certifier,
    x0: &[f64],
    cfg: &DeepFoolConfig,
) -> Result<AttackResult> {
    cfg.validate()?;
    let mut run = Run::begin(Method::DeepFool, judge, x0, cfg.seed)?;
    let c0 = run.c0();
    let mut total = vec![0.0; x0.len()];
    let mut x = x0.to_vec();
    let mut aborted = None;
    let mut iters = 0;
    for i in 0..cfg.iters {
        iters = i + 1;
        let step = guarded((|| {
            let a = attacker.assess(&x, &[cfg.seed, DEEPFOOL_STREAM, i as u64])?;
            let v = a.verdict;
            if v.class != c0 && v.radius > 0.0 {
                run.candidate(&x, i);
                if run.try_confirm(&x, i)? {
                    return Ok(true);
                }
            }
            let ls = a.log_scores();
            let mut best: Option<(f64, f64, Vec<f64>)> = None;
            for k in (0..ls.len()).filter(|&k| k != c0) {
                let mut w = vec![0.0; ls.len()];
                w[k] = 1.0;
                w[c0] = -1.0;
                let g = a.log_vjp(&w)?;
                let gn = norm_l2(&g);
                if gn < MIN_GRAD_NORM {
                    continue;
                }
                let f = ls[k] - ls[c0];
                let dist = f.abs() / gn;
                if best.as_ref().is_none_or(|b| dist < b.0) {
                    best = Some((dist, f, g));
                }
            }
            let (_, f, g) = best.ok_or(Error::NonFinite("vanishing class-difference gradients"))?;
            let gn2: f64 = g.iter().map(|v| v * v).sum();
            let scale = (f.abs() + 1e-4) / gn2;
            run.record(trace_at(&run, i, &x, v.class, v.radius, scale * gn2.sqrt() * cfg.overshoot));
            for (t, gi) in total.iter_mut().zip(&g) {
                *t += scale * gi;
            }
            for ((xi, a), t) in x.iter_mut().zip(run.x0()).zip(&total) {
                *xi = a + cfg.overshoot * t;
            }
            project_in_place(&mut x);
            Ok(false)
        })())?;
        match step {
            Ok(true) => break,
            Ok(false) => {}
            Err(why) => {
                aborted = Some(why);
                break;
            }
        }
    }
    run.finish(iters, &x, aborted, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::testing::{constant, linear_binary};
    use crate::attacks::IbpCertifier;
    use crate::autodiff::distance;
    use crate::model::{Classifier, Head};
    use crate::smoothing::{Smoothed, SmoothingConfig};

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = norm_l2(v);
        v.iter().map(|a| a / n).collect()
    }

    #[test]
    fn pgd_walks_along_the_normal() {
        let w = [0.6, 0.8];
        // boundary w·x = 0.7, clean point at distance 0.2 on the class-0 side
        let m = linear_binary(&w, 0.7, 20.0);
        let c = IbpCertifier::new(&m, 1e-7);
        let x0 = [0.5, 0.25];
        let cfg = PgdConfig {
            eps_step: 0.03,
            iters: 50,
            seed: 0,
        };
        let r = pgd_attack(&c, &c, &x0, &cfg).unwrap();
        assert!(r.confident);
        assert!(r.norm >= 0.2 && r.norm <= 0.2 + cfg.eps_step + 1e-9, "{}", r.norm);
        let d = unit(&[r.x_adv.as_ref().unwrap()[0] - x0[0], r.x_adv.as_ref().unwrap()[1] - x0[1]]);
        assert!((d[0] - 0.6).abs() < 1e-6 && (d[1] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn smoothed_pgd_reaches_the_margin() {
        let m = linear_binary(&[1.0, 0.0], 0.5, 50.0);
        let s = |n| Smoothed::new(&m, SmoothingConfig::new(0.05, n, 0.005, 2).unwrap(), Head::Softmax).unwrap();
        let (att, judge) = (s(200), s(2000));
        let r = pgd_attack(&att, &judge, &[0.2, 0.5], &PgdConfig { eps_step: 0.02, iters: 60, seed: 1 }).unwrap();
        assert!(r.confident);
        assert!(r.norm > r.clean_radius);
        assert!(r.norm > 0.3 && r.norm < 0.3 + 0.2, "{}", r.norm);
    }

    #[test]
    fn constant_model_defeats_every_baseline() {
        let m = constant(2, 3, 1);
        let c = IbpCertifier::new(&m, 1e-5);
        let x0 = [0.5, 0.5];
        let p = pgd_attack(&c, &c, &x0, &PgdConfig::default()).unwrap();
        assert!(!p.success && p.gradient_fallbacks > 0);
        let d = deepfool_attack(&c, &c, &x0, &DeepFoolConfig::default()).unwrap();
        assert!(!d.success && d.aborted.is_some());
        let w = cw_attack(&c, &c, &x0, &CwConfig { steps: 20, ..Default::default() }).unwrap();
        assert!(!w.success);
    }

    #[test]
    fn cw_without_loss_term_stays_put() {
        let m = linear_binary(&[1.0, 0.0], 0.5, 50.0);
        let c = IbpCertifier::new(&m, 1e-6);
        let r = cw_attack(&c, &c, &[0.3, 0.4], &CwConfig { c: 0.0, steps: 30, ..Default::default() }).unwrap();
        assert!(!r.success);
        assert!(r.trace.iter().all(|t| t.norm == 0.0));
    }

    #[test]
    fn cw_with_large_c_crosses_and_is_sound() {
        let m = linear_binary(&[1.0, 0.0], 0.5, 10.0);
        let c = IbpCertifier::new(&m, 1e-6);
        let cfg = CwConfig {
            c: 10.0,
            kappa: 2.0,
            steps: 300,
            lr: 0.01,
            max_confirm: 5,
            seed: 0,
        };
        let r = cw_attack(&c, &c, &[0.3, 0.4], &cfg).unwrap();
        assert!(r.confident, "{:?}", r.aborted);
        assert!(r.norm > r.clean_radius);
    }

    #[test]
    fn deepfool_projects_onto_a_hyperplane() {
        let w = [0.6, 0.8];
        let m = linear_binary(&w, 0.7, 20.0);
        let c = IbpCertifier::new(&m, 1e-7);
        let x0 = [0.5, 0.25];
        let r = deepfool_attack(&c, &c, &x0, &DeepFoolConfig::default()).unwrap();
        assert!(r.confident);
        assert_eq!(r.iterations, 2);
        // margin distance 0.2, plus the 1e-4 logit slack, times the overshoot
        let want = (0.2 + 1e-4 / 40.0) * 1.02;
        assert!((r.norm - want).abs() < 1e-9, "{} vs {want}", r.norm);
    }

    #[test]
    fn deepfool_first_step_matches_hand_linearisation() {
        // three linear classes in 2-D
        let weight = vec![0.0, 1.0, -0.5, 0.0, 0.3, 1.2];
        let bias = vec![0.2, -0.1, 0.0];
        let m = Classifier::linear(2, 3, weight.clone(), bias.clone()).unwrap();
        let c = IbpCertifier::new(&m, 1e-6);
        let x0 = [0.2, 0.1];
        let logit = |k: usize| weight[k] * x0[0] + weight[3 + k] * x0[1] + bias[k];
        let c0 = (0..3).max_by(|&a, &b| logit(a).total_cmp(&logit(b))).unwrap();
        let mut best: Option<(f64, [f64; 2])> = None;
        for k in (0..3).filter(|&k| k != c0) {
            let g = [weight[k] - weight[c0], weight[3 + k] - weight[3 + c0]];
            let f = logit(k) - logit(c0);
            let gn2 = g[0] * g[0] + g[1] * g[1];
            let dist = f.abs() / gn2.sqrt();
            let s = (f.abs() + 1e-4) / gn2;
            if best.is_none_or(|b| dist < b.0) {
                best = Some((dist, [x0[0] + 1.02 * s * g[0], x0[1] + 1.02 * s * g[1]]));
            }
        }
        let want = best.unwrap().1;
        let r = deepfool_attack(&c, &c, &x0, &DeepFoolConfig { iters: 1, ..Default::default() }).unwrap();
        let x1 = r.x_adv.clone().expect("one linearised step crosses a linear boundary");
        assert!(distance(&x1, &want) < 1e-9, "{x1:?} vs {want:?}");
        assert_eq!(r.trace.len(), 1);
    }
}
