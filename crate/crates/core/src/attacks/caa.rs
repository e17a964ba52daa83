use serde::{Deserialize, Serialize};

use super::{guarded, Certifier, Method, Phase, Run, TraceStep};
use crate::error::{Error, Result};
use crate::geometry::{clip_step, exit_radius, project_in_place, stay_radius, BallLedger, CertifiedBall};

const ATTACK_STREAM: u64 = 0x0063_6161;

/// Step-size controls of the certification-aware attack, in `[0,1]` input
/// units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaaConfig {
    pub eps_min: f64,
    pub eps_max: f64,
    /// Overshoot factor when leaving certified regions of the clean class.
    pub delta_grow: f64,
    /// Safety factor when contracting inside adversarial certified regions.
    pub delta_shrink: f64,
    pub max_iters: usize,
    /// How many of the smallest candidate points the judge examines.
    pub max_confirm: usize,
    pub seed: u64,
}

impl Default for CaaConfig {
    fn default() -> Self {
        Self {
            eps_min: 5.0 / 255.0,
            eps_max: 40.0 / 255.0,
            delta_grow: 0.05,
            delta_shrink: 0.05,
            max_iters: 100,
            max_confirm: 5,
            seed: 0,
        }
    }
}

impl CaaConfig {
    pub fn validate(&self) -> Result<()> {
        clip_step(self.eps_min, self.eps_min, self.eps_max)?;
        for d in [self.delta_grow, self.delta_shrink] {
            if !(d > 0.0 && d < 1.0) {
                return Err(Error::invalid(format!("delta must lie in (0,1), got {d}")));
            }
        }
        if self.max_iters == 0 || self.max_confirm == 0 {
            return Err(Error::invalid("max_iters and max_confirm must be at least 1"));
        }
        Ok(())
    }
}

/// Certification-aware attack.
///
/// While the point is still assigned the clean class `c₀`, it descends
/// `|E_{c₀} − E_o|` (`o` the strongest other class) with a step long enough
/// to clear every certified `c₀` ball met so far. Once another class wins
/// with a non-zero certificate, the point is pulled back towards `x₀` by as
/// much as the union of adversarial certified balls allows. Uncertified
/// adversarial points take a small step that raises their margin.
pub fn caa_attack(attacker: &dyn Certifier, judge: &dyn Certifier, x0: &[f64], cfg: &CaaConfig) -> Result<crate::attacks::AttackResult> {
    cfg.validate()?;
    let mut run = Run::begin(Method::Caa, judge, x0, cfg.seed)?;
    let c0 = run.c0();
    let mut ledger = BallLedger::new(c0);
    let mut x = x0.to_vec();
    let mut aborted = None;
    let mut iters = 0;
    for i in 0..cfg.max_iters {
        iters = i + 1;
        let step = guarded(caa_step(attacker, &mut run, &mut ledger, &mut x, i, cfg))?;
        if let Err(why) = step {
            aborted = Some(why);
            break;
        }
    }
    run.finish(iters, &x, aborted, cfg.max_confirm)
}

fn caa_step(
    attacker: &dyn Certifier,
    run: &mut Run<'_>,
    ledger: &mut BallLedger,
    x: &mut [f64],
    i: usize,
    cfg: &CaaConfig,
) -> Result<()> {
    let c0 = run.c0();
    let a = attacker.assess(x, &[cfg.seed, ATTACK_STREAM, i as u64])?;
    let v = a.verdict;
    if a.scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("attack objective"));
    }
    let k = a.scores.len();
    let norm = run.norm(x);
    let ball = CertifiedBall {
        center: x.to_vec(),
        radius: v.radius,
        class_label: v.class,
        step_index: i,
    };
    let mut trace = TraceStep {
        iter: i,
        phase: Phase::Search,
        point: x.to_vec(),
        class: v.class,
        radius: v.radius,
        norm,
        step: 0.0,
        ray: None,
        clipped: false,
    };

    if v.class == c0 {
        // strongest competitor in the differentiable scores
        let o = (0..k).filter(|&j| j != c0).max_by(|&p, &q| a.scores[p].total_cmp(&a.scores[q]).then(q.cmp(&p))).unwrap();
        let sign = if a.scores[c0] >= a.scores[o] { 1.0 } else { -1.0 };
        let mut w = vec![0.0; k];
        w[c0] = sign;
        w[o] = -sign;
        let g = a.vjp(&w)?;
        let dir = run.unit_or_random(&g, i)?;
        ledger.push(ball)?;
        let eps = if v.radius > 0.0 {
            let exit = exit_radius(ledger, x, &dir)?;
            trace.ray = Some(exit.rho);
            let raw = exit.rho.max(v.radius) * (1.0 + cfg.delta_grow);
            trace.clipped = raw > cfg.eps_max;
            clip_step(raw, cfg.eps_min, cfg.eps_max)?
        } else {
            cfg.eps_min
        };
        trace.step = eps;
        for (xi, d) in x.iter_mut().zip(&dir) {
            *xi -= eps * d;
        }
    } else if v.radius == 0.0 {
        trace.phase = Phase::Repair;
        let o = (0..k)
            .filter(|&j| j != v.class)
            .max_by(|&p, &q| a.scores[p].total_cmp(&a.scores[q]).then(q.cmp(&p)))
            .unwrap();
        let mut w = vec![0.0; k];
        w[v.class] = 1.0;
        w[o] = -1.0;
        let g = a.vjp(&w)?;
        let dir = run.unit_or_random(&g, i)?;
        ledger.push(ball)?;
        trace.step = cfg.eps_min;
        for (xi, d) in x.iter_mut().zip(&dir) {
            *xi += cfg.eps_min * d;
        }
    } else {
        trace.phase = Phase::Refine;
        ledger.push(ball)?;
        run.candidate(x, i);
        if norm > 0.0 {
            // unit vector pointing away from x₀, so the path x − ρ·dir heads back
            let dir: Vec<f64> = x.iter().zip(run.x0()).map(|(a, b)| (a - b) / norm).collect();
            let stay = stay_radius(ledger, x, &dir)?;
            trace.ray = Some(stay.rho);
            trace.clipped = stay.rho > cfg.eps_max;
            let s = stay.rho.min(cfg.eps_max).min(norm) * (1.0 - cfg.delta_shrink);
            trace.step = s;
            for (xi, d) in x.iter_mut().zip(&dir) {
                *xi -= s * d;
            }
        }
    }
    project_in_place(x);
    run.record(trace);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::testing::{constant, linear_binary};
    use crate::attacks::IbpCertifier;
    use crate::model::Head;
    use crate::smoothing::{Smoothed, SmoothingConfig};

    fn smoothed(m: &crate::model::Classifier, sigma: f64, n: usize) -> Smoothed<'_> {
        Smoothed::new(m, SmoothingConfig::new(sigma, n, 0.005, 7).unwrap(), Head::default()).unwrap()
    }

    #[test]
    fn constant_model_fails() {
        let m = constant(2, 2, 0);
        let (att, judge) = (smoothed(&m, 0.5, 100), smoothed(&m, 0.5, 1000));
        let cfg = CaaConfig {
            max_iters: 20,
            ..Default::default()
        };
        let r = caa_attack(&att, &judge, &[0.3, 0.3], &cfg).unwrap();
        assert!(!r.success && !r.confident);
        assert_eq!(r.norm, 0.0);
        assert_eq!(r.attack_radius(), 0.0);
        assert_eq!(r.iterations, 20);
        assert!(r.x_adv.is_none());
    }

    #[test]
    fn one_step_across_a_near_boundary() {
        // deterministic threshold model at x = 0.5, start 0.1 to its left
        let m = linear_binary(&[1.0], 0.5, 1e3);
        let ibp = IbpCertifier::new(&m, 1e-7);
        let cfg = CaaConfig {
            eps_min: 0.01,
            eps_max: 1.0,
            delta_grow: 0.5,
            delta_shrink: 0.05,
            max_iters: 1,
            max_confirm: 1,
            seed: 0,
        };
        let r = caa_attack(&ibp, &ibp, &[0.4], &cfg).unwrap();
        assert!(r.confident, "{r:?}");
        assert_eq!(r.trace.len(), 1);
        // the clean certificate is the distance 0.1; the step overshoots by half
        assert!((r.trace[0].step - 0.15).abs() < 1e-5);
        assert!((r.x_adv.unwrap()[0] - 0.55).abs() < 1e-5);
        assert!(r.norm > r.clean_radius);
    }

    #[test]
    fn refinement_contracts_towards_the_boundary() {
        let m = linear_binary(&[1.0], 0.5, 1e3);
        let ibp = IbpCertifier::new(&m, 1e-7);
        let cfg = CaaConfig {
            eps_min: 0.01,
            eps_max: 1.0,
            delta_grow: 0.5,
            delta_shrink: 0.1,
            max_iters: 30,
            max_confirm: 3,
            seed: 0,
        };
        let r = caa_attack(&ibp, &ibp, &[0.4], &cfg).unwrap();
        assert!(r.confident);
        assert!(r.norm > 0.1 && r.norm < 0.101, "{}", r.norm);
        let refine: Vec<&TraceStep> = r.trace.iter().filter(|t| t.phase == Phase::Refine).collect();
        assert!(refine.len() > 5);
        // consecutive refinement steps only move closer to x₀
        for w in refine.windows(2).filter(|w| w[1].iter == w[0].iter + 1) {
            assert!(w[1].norm <= w[0].norm + 1e-12);
        }
    }

    #[test]
    fn traces_are_deterministic() {
        let m = crate::model::Classifier::default_mlp(2, 2, 5).unwrap();
        let (att, judge) = (smoothed(&m, 0.25, 64), smoothed(&m, 0.25, 640));
        let cfg = CaaConfig {
            max_iters: 15,
            seed: 9,
            ..Default::default()
        };
        let a = caa_attack(&att, &judge, &[0.2, 0.3], &cfg).unwrap();
        let b = caa_attack(&att, &judge, &[0.2, 0.3], &cfg).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.x_adv, b.x_adv);
        if let Some(x) = &a.x_adv {
            assert!(x.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn rejects_bad_config() {
        let bad = CaaConfig {
            eps_min: 0.5,
            eps_max: 0.1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = CaaConfig {
            delta_grow: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
