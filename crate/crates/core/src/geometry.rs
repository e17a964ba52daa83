//! Certified ℓ2 balls collected during an attack, and ray queries against
//! their union along a path that is projected back onto `[0,1]^d`.
//!
//! Both ray queries walk the projected path `p(ρ) = P(x − ρ·dir)` from
//! `ρ = 0` and report the first point where it leaves the union. Since `P` is
//! 1-Lipschitz, a point whose deepest containing ball has margin `m` can
//! advance by `m` without leaving that ball, so the walk never skips over a
//! gap.

use serde::{Deserialize, Serialize};

use crate::autodiff::{distance, norm_l2};
use crate::error::{Error, Result};

/// Resolution of boundary crossings along a ray.
pub const RAY_TOL: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertifiedBall {
    pub center: Vec<f64>,
    pub radius: f64,
    pub class_label: usize,
    pub step_index: usize,
}

/// Balls in the order the attack produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BallLedger {
    original_class: usize,
    balls: Vec<CertifiedBall>,
    last_step: Option<usize>,
}

impl BallLedger {
    pub fn new(original_class: usize) -> Self {
        Self {
            original_class,
            balls: Vec::new(),
            last_step: None,
        }
    }

    pub fn original_class(&self) -> usize {
        self.original_class
    }

    pub fn balls(&self) -> &[CertifiedBall] {
        &self.balls
    }

    pub fn len(&self) -> usize {
        self.balls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.balls.is_empty()
    }

    /// Adds a ball. Zero-radius balls are dropped (returns `false`).
    pub fn push(&mut self, ball: CertifiedBall) -> Result<bool> {
        if !(ball.radius >= 0.0) || !ball.radius.is_finite() {
            return Err(Error::invalid(format!("ball radius must be finite and >= 0, got {}", ball.radius)));
        }
        crate::model::check_unit_box(&ball.center)?;
        if let Some(last) = self.last_step {
            if ball.step_index <= last {
                return Err(Error::invalid(format!("step index {} does not follow {last}", ball.step_index)));
            }
        }
        if let Some(last) = self.balls.last() {
            if ball.center.len() != last.center.len() {
                return Err(Error::ShapeMismatch {
                    op: "ball ledger",
                    lhs: vec![last.center.len()],
                    rhs: vec![ball.center.len()],
                });
            }
        }
        self.last_step = Some(ball.step_index);
        if ball.radius == 0.0 {
            return Ok(false);
        }
        self.balls.push(ball);
        Ok(true)
    }

    /// Balls certifying the original class.
    pub fn same_class(&self) -> impl Iterator<Item = &CertifiedBall> {
        self.balls.iter().filter(move |b| b.class_label == self.original_class)
    }

    /// Balls certifying some other class.
    pub fn adversarial(&self) -> impl Iterator<Item = &CertifiedBall> {
        self.balls.iter().filter(move |b| b.class_label != self.original_class)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Elementwise clip to `[0,1]`.
pub fn project(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.clamp(0.0, 1.0)).collect()
}

pub fn project_in_place(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

/// Outcome of a ray query.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RayRadius {
    pub rho: f64,
    /// The path never left the union inside the domain; `rho` is `√d`.
    pub saturated: bool,
    /// The starting point is outside the union.
    pub outside_start: bool,
}

/// First `ρ` at which `P(x − ρ·dir)` leaves every same-class ball.
pub fn exit_radius(ledger: &BallLedger, x: &[f64], dir: &[f64]) -> Result<RayRadius> {
    let balls: Vec<&CertifiedBall> = ledger.same_class().collect();
    first_exit(&balls, x, dir)
}

/// Extent of the connected stretch of `P(x − ρ·dir)` that stays inside the
/// union of adversarial-class balls. Zero (with `outside_start`) when `x` is
/// not covered.
pub fn stay_radius(ledger: &BallLedger, x: &[f64], dir: &[f64]) -> Result<RayRadius> {
    let balls: Vec<&CertifiedBall> = ledger.adversarial().collect();
    first_exit(&balls, x, dir)
}

/// `clip(eps, eps_min, eps_max)`.
pub fn clip_step(eps: f64, eps_min: f64, eps_max: f64) -> Result<f64> {
    if !(eps_min > 0.0) || !(eps_min <= eps_max) {
        return Err(Error::invalid(format!("step bounds need 0 < {eps_min} <= {eps_max}")));
    }
    Ok(eps.clamp(eps_min, eps_max))
}

fn path_point(x: &[f64], dir: &[f64], rho: f64, out: &mut [f64]) {
    for ((o, a), d) in out.iter_mut().zip(x).zip(dir) {
        *o = (a - rho * d).clamp(0.0, 1.0);
    }
}

/// Largest `r − ‖p − c‖` over the balls (negative when outside all of them).
fn margin(balls: &[&CertifiedBall], p: &[f64]) -> f64 {
    balls
        .iter()
        .map(|b| b.radius - distance(p, &b.center))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Beyond this `ρ` every moving coordinate of the path has hit the box.
fn freeze_point(x: &[f64], dir: &[f64]) -> f64 {
    x.iter()
        .zip(dir)
        .map(|(&a, &d)| {
            if d > 0.0 {
                a / d
            } else if d < 0.0 {
                (1.0 - a) / -d
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max)
}

fn first_exit(balls: &[&CertifiedBall], x: &[f64], dir: &[f64]) -> Result<RayRadius> {
    if x.len() != dir.len() {
        return Err(Error::ShapeMismatch {
            op: "ray query",
            lhs: vec![x.len()],
            rhs: vec![dir.len()],
        });
    }
    if (norm_l2(dir) - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("ray direction must be a unit vector, norm {}", norm_l2(dir))));
    }
    if let Some(b) = balls.iter().find(|b| b.center.len() != x.len()) {
        return Err(Error::ShapeMismatch {
            op: "ray query",
            lhs: vec![x.len()],
            rhs: vec![b.center.len()],
        });
    }
    let cap = (x.len() as f64).sqrt();
    let frozen = freeze_point(x, dir).min(cap);
    let mut p = vec![0.0; x.len()];
    path_point(x, dir, 0.0, &mut p);
    let mut m = margin(balls, &p);
    if m <= 0.0 {
        return Ok(RayRadius {
            rho: 0.0,
            saturated: false,
            outside_start: true,
        });
    }
    let inside = |rho: f64, p: &mut [f64]| {
        path_point(x, dir, rho, p);
        margin(balls, p) > 0.0
    };
    let mut rho = 0.0;
    loop {
        if rho >= frozen {
            // the projected path has stopped moving and is still covered
            return Ok(RayRadius {
                rho: cap,
                saturated: true,
                outside_start: false,
            });
        }
        if m > RAY_TOL {
            rho = (rho + m).min(frozen);
        } else {
            let probe = rho + RAY_TOL;
            if !inside(probe, &mut p) {
                let (mut lo, mut hi) = (rho, probe);
                for _ in 0..8 {
                    let mid = 0.5 * (lo + hi);
                    if inside(mid, &mut p) {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                return Ok(RayRadius {
                    rho: hi,
                    saturated: false,
                    outside_start: false,
                });
            }
            rho = probe;
        }
        path_point(x, dir, rho, &mut p);
        m = margin(balls, &p);
        if m <= 0.0 {
            // the margin step lands exactly on a boundary
            return Ok(RayRadius {
                rho,
                saturated: false,
                outside_start: false,
            });
        }
    }
}

/// Dense-sampling reference: the first of `steps` equally spaced `ρ` in
/// `[0, √d]` whose projected point is outside every ball.
#[doc(hidden)]
pub fn sampled_first_exit(balls: &[CertifiedBall], x: &[f64], dir: &[f64], steps: usize) -> f64 {
    let cap = (x.len() as f64).sqrt();
    let mut p = vec![0.0; x.len()];
    for k in 0..=steps {
        let rho = cap * k as f64 / steps as f64;
        path_point(x, dir, rho, &mut p);
        if !balls.iter().any(|b| distance(&p, &b.center) < b.radius) {
            return rho;
        }
    }
    cap
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn ball(center: Vec<f64>, radius: f64, class_label: usize, step_index: usize) -> CertifiedBall {
        CertifiedBall {
            center,
            radius,
            class_label,
            step_index,
        }
    }

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n = norm_l2(&v);
        v.into_iter().map(|a| a / n).collect()
    }

    #[test]
    fn projection() {
        assert_eq!(project(&[0.5]), vec![0.5]);
        assert_eq!(project(&[-0.2, 1.3]), vec![0.0, 1.0]);
        let p = project(&[-3.0, 0.2, 7.0]);
        assert_eq!(project(&p), p);
    }

    #[test]
    fn clip_step_examples() {
        assert_eq!(clip_step(0.5, 0.1, 1.0).unwrap(), 0.5);
        assert_eq!(clip_step(0.01, 0.1, 1.0).unwrap(), 0.1);
        assert_eq!(clip_step(5.0, 0.1, 1.0).unwrap(), 1.0);
        assert!(clip_step(0.5, 1.0, 0.1).is_err());
        assert!(clip_step(0.5, 0.0, 0.1).is_err());
    }

    #[test]
    fn ledger_rules() {
        let mut l = BallLedger::new(0);
        assert!(l.push(ball(vec![0.5, 0.5], 0.1, 0, 0)).unwrap());
        assert!(!l.push(ball(vec![0.5, 0.5], 0.0, 1, 1)).unwrap());
        assert!(l.push(ball(vec![0.5, 0.5], 0.1, 1, 1)).is_err());
        assert!(l.push(ball(vec![1.5, 0.5], 0.1, 1, 5)).is_err());
        assert!(l.push(ball(vec![0.5, 0.5], -0.1, 1, 5)).is_err());
        assert!(l.push(ball(vec![0.2, 0.5], 0.3, 2, 5)).unwrap());
        assert_eq!(l.len(), 2);
        assert_eq!(l.same_class().count(), 1);
        assert_eq!(l.adversarial().count(), 1);
        let back: BallLedger = serde_json::from_str(&l.to_json().unwrap()).unwrap();
        assert_eq!(back, l);
    }

    #[test]
    fn exit_from_centre() {
        let d = 100;
        let x = vec![0.5; d];
        let dir = unit(vec![1.0; d]);
        let mut l = BallLedger::new(3);
        l.push(ball(x.clone(), 1.0, 3, 0)).unwrap();
        let r = exit_radius(&l, &x, &dir).unwrap();
        assert!((r.rho - 1.0).abs() < 1e-6, "{r:?}");
        assert!(!r.saturated);
        // the same ball seen as adversarial
        let mut a = BallLedger::new(0);
        a.push(ball(x.clone(), 0.5, 3, 0)).unwrap();
        assert!((stay_radius(&a, &x, &dir).unwrap().rho - 0.5).abs() < 1e-6);
    }

    #[test]
    fn empty_ledgers() {
        let l = BallLedger::new(0);
        let x = vec![0.5, 0.5];
        let dir = unit(vec![1.0, 0.0]);
        let e = exit_radius(&l, &x, &dir).unwrap();
        assert_eq!(e.rho, 0.0);
        let s = stay_radius(&l, &x, &dir).unwrap();
        assert_eq!(s.rho, 0.0);
        assert!(s.outside_start);
    }

    #[test]
    fn rejects_non_unit_direction() {
        let l = BallLedger::new(0);
        assert!(exit_radius(&l, &[0.5, 0.5], &[1.0, 1.0]).is_err());
        assert!(exit_radius(&l, &[0.5, 0.5], &[1.0]).is_err());
    }

    #[test]
    fn chained_balls_match_sampling() {
        let x = vec![0.9, 0.5];
        let dir = vec![1.0, 0.0];
        let balls = vec![ball(vec![0.85, 0.5], 0.1, 1, 0), ball(vec![0.7, 0.52], 0.1, 1, 1)];
        let mut l = BallLedger::new(0);
        for b in &balls {
            l.push(b.clone()).unwrap();
        }
        let s = stay_radius(&l, &x, &dir).unwrap();
        let want = sampled_first_exit(&balls, &x, &dir, 100_000);
        assert!((s.rho - want).abs() < 1e-3, "{} vs {want}", s.rho);
        assert!(s.rho > 0.25);
    }

    #[test]
    fn disconnected_component_is_not_claimed() {
        let x = vec![0.9, 0.5];
        let dir = vec![1.0, 0.0];
        let mut l = BallLedger::new(0);
        l.push(ball(vec![0.9, 0.5], 0.05, 1, 0)).unwrap();
        l.push(ball(vec![0.3, 0.5], 0.1, 1, 1)).unwrap();
        assert!((stay_radius(&l, &x, &dir).unwrap().rho - 0.05).abs() < 1e-6);
    }

    #[test]
    fn path_bends_at_the_box() {
        // the path hits the first face at ρ ≈ 0.14 and then slides along it
        let x = vec![0.1, 0.5];
        let dir = unit(vec![1.0, 1.0]);
        let mut l = BallLedger::new(0);
        l.push(ball(vec![0.0, 0.3], 0.25, 0, 0)).unwrap();
        let r = exit_radius(&l, &x, &dir).unwrap();
        let want = sampled_first_exit(l.balls(), &x, &dir, 100_000);
        assert!((r.rho - want).abs() < 1e-3, "{} vs {want}", r.rho);
        // fully covered frozen path saturates
        let mut big = BallLedger::new(0);
        big.push(ball(vec![0.0, 0.0], 0.9, 0, 0)).unwrap();
        let s = exit_radius(&big, &x, &dir).unwrap();
        assert!(s.saturated);
        assert!((s.rho - 2f64.sqrt()).abs() < 1e-12);
    }

    fn random_config(rng: &mut impl Rng, d: usize) -> (Vec<CertifiedBall>, Vec<f64>, Vec<f64>) {
        let x: Vec<f64> = (0..d).map(|_| rng.random()).collect();
        let dir = unit((0..d).map(|_| rng.random::<f64>() - 0.5).collect());
        let scale = (d as f64).sqrt();
        let mut balls = vec![];
        let mut c = x.clone();
        for j in 0..rng.random_range(1..5) {
            let r = scale * rng.random_range(0.05..0.3);
            balls.push(ball(c.clone(), r, 0, j));
            // next centre somewhere along the path near this ball's rim
            let t = r * rng.random_range(0.5..1.3);
            let shift: Vec<f64> = c.iter().zip(&dir).map(|(a, b)| a - t * b + 0.05 * (rng.random::<f64>() - 0.5)).collect();
            c = project(&shift);
        }
        (balls, x, dir)
    }

    #[test]
    fn random_configurations_match_sampling() {
        let mut rng = crate::rng::stream(17, &[]);
        for &d in &[2usize, 10] {
            for _ in 0..100 {
                let (balls, x, dir) = random_config(&mut rng, d);
                let mut l = BallLedger::new(0);
                for b in &balls {
                    l.push(b.clone()).unwrap();
                }
                let r = exit_radius(&l, &x, &dir).unwrap();
                let want = sampled_first_exit(&balls, &x, &dir, 100_000);
                assert!((r.rho - want).abs() < 1e-3, "d={d}: {} vs {want}", r.rho);
            }
        }
    }

    proptest! {
        #[test]
        fn boundary_sandwich(seed in 0u64..10_000) {
            let mut rng = crate::rng::stream(seed, &[1]);
            let (balls, x, dir) = random_config(&mut rng, 3);
            let mut l = BallLedger::new(0);
            for b in &balls {
                l.push(b.clone()).unwrap();
            }
            let refs: Vec<&CertifiedBall> = balls.iter().collect();
            let r = exit_radius(&l, &x, &dir).unwrap();
            let mut p = vec![0.0; 3];
            if !r.saturated {
                path_point(&x, &dir, r.rho + 1e-4, &mut p);
                prop_assert!(margin(&refs, &p) <= 0.0);
            }
            if r.rho > 0.0 {
                path_point(&x, &dir, (r.rho - 1e-4).max(0.0), &mut p);
                prop_assert!(margin(&refs, &p) > 0.0);
            }
            // removing a ball never lengthens the exit
            let mut fewer = BallLedger::new(0);
            for b in &balls[..balls.len() - 1] {
                fewer.push(b.clone()).unwrap();
            }
            prop_assert!(exit_radius(&fewer, &x, &dir).unwrap().rho <= r.rho + 1e-9);
        }
    }
}
