use std::fs;

use serde::{Deserialize, Serialize};

use super::select::{point_summaries, select_from, PointSummary, Selection};
use super::sweep::run_sweep;
use super::{CertifierSpec, ExperimentConfig, MethodGrid};
use crate::attacks::{AttackSpec, Method};
use crate::error::{Error, Result};
use crate::metrics::median;

/// CAA outcome when the attacker smooths with `factor·σ` and the defender
/// certifies with `σ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaStudyRow {
    pub factor: f64,
    pub sigma_true: f64,
    pub attacker_sigma: f64,
    pub grid: usize,
    pub point: usize,
    pub samples: usize,
    pub success_rate: f64,
    /// Over confident successes.
    pub mean_norm: Option<f64>,
    pub median_norm: Option<f64>,
}

/// Runs the configured CAA grids once per σ factor, each in its own
/// subdirectory, and writes `sigma_study.json` next to them.
pub fn sigma_estimation_run(cfg: &ExperimentConfig, sigma_true: f64, factors: &[f64]) -> Result<Vec<SigmaStudyRow>> {
    if factors.is_empty() || factors.iter().any(|f| !(*f > 0.0 && f.is_finite())) {
        return Err(Error::invalid("σ factors must be a nonempty list of positive numbers"));
    }
    let CertifierSpec::Smoothing { .. } = cfg.certifier else {
        return Err(Error::invalid("the σ study needs a smoothing certifier"));
    };
    let caa: Vec<MethodGrid> = cfg.methods.iter().filter(|g| g.method() == Method::Caa).cloned().collect();
    if caa.is_empty() {
        return Err(Error::invalid("the σ study needs at least one CAA grid"));
    }
    let base = cfg.resolved_output_dir();
    let mut out = Vec::new();
    for &factor in factors {
        let mut c = cfg.clone();
        c.methods = caa.clone();
        if let CertifierSpec::Smoothing {
            sigmas,
            attacker_sigma_factor,
            ..
        } = &mut c.certifier
        {
            *sigmas = vec![sigma_true];
            *attacker_sigma_factor = factor;
        }
        c.output_dir = base.join(format!("sigma-factor-{factor}"));
        let rec = run_sweep(&c)?;
        for p in point_summaries(&rec)? {
            let norms: Vec<f64> = rec
                .rows
                .iter()
                .filter(|r| r.key.grid == p.grid && r.key.point == p.point && r.attack_radius > 0.0)
                .map(|r| r.attack_radius)
                .collect();
            out.push(SigmaStudyRow {
                factor,
                sigma_true,
                attacker_sigma: factor * sigma_true,
                grid: p.grid,
                point: p.point,
                samples: p.metrics.samples,
                success_rate: p.metrics.success_rate,
                mean_norm: (!norms.is_empty()).then(|| norms.iter().sum::<f64>() / norms.len() as f64),
                median_norm: median(&norms),
            });
        }
    }
    fs::create_dir_all(&base).map_err(|e| Error::io(&base, e))?;
    let p = base.join("sigma_study.json");
    fs::write(&p, serde_json::to_string_pretty(&out)?).map_err(|e| Error::io(&p, e))?;
    Ok(out)
}

/// CAA against PGD on an IBP-certified model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IbpStudy {
    pub points: Vec<PointSummary>,
    pub selections: Vec<Selection>,
    pub caa_success: Option<f64>,
    pub pgd_success: Option<f64>,
    /// The selected CAA and PGD points have the same iteration budget.
    pub matched_budget: bool,
    /// Selected CAA success rate is at least the selected PGD one, at a
    /// matched budget.
    pub caa_at_least_pgd: bool,
}

fn budget(spec: &AttackSpec) -> usize {
    match spec {
        AttackSpec::Caa(c) => c.max_iters,
        AttackSpec::Pgd(c) => c.iters,
        AttackSpec::Cw(c) => c.steps,
        AttackSpec::DeepFool(c) => c.iters,
    }
}

/// Sweeps the configured grids against the IBP certifier and compares the
/// CAA and PGD operating points chosen at `target_success`. A smoothing
/// configuration is switched to IBP and run in an `ibp` subdirectory.
pub fn ibp_study(cfg: &ExperimentConfig, target_success: f64) -> Result<IbpStudy> {
    let mut c = cfg.clone();
    if !matches!(c.certifier, CertifierSpec::Ibp { .. }) {
        c.certifier = CertifierSpec::Ibp { tol: 1e-4 };
        c.output_dir = cfg.resolved_output_dir().join("ibp");
        c.model.noise.get_or_insert(0.0);
    }
    let rec = run_sweep(&c)?;
    let points = point_summaries(&rec)?;
    let selections = select_from(&points, target_success);
    let first = |m: Method| selections.iter().find(|s| s.method == m);
    let (caa, pgd) = (first(Method::Caa), first(Method::Pgd));
    let matched_budget = match (caa, pgd) {
        (Some(a), Some(b)) => budget(&a.params) == budget(&b.params),
        _ => false,
    };
    let caa_at_least_pgd = matched_budget && caa.zip(pgd).is_some_and(|(a, b)| a.success_rate >= b.success_rate);
    let study = IbpStudy {
        caa_success: caa.map(|s| s.success_rate),
        pgd_success: pgd.map(|s| s.success_rate),
        points,
        selections,
        matched_budget,
        caa_at_least_pgd,
    };
    let dir = c.resolved_output_dir();
    let p = dir.join("ibp_study.json");
    fs::write(&p, serde_json::to_string_pretty(&study)?).map_err(|e| Error::io(&p, e))?;
    Ok(study)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::tests::BLOBS;

    fn config(dir: &std::path::Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::from_toml(BLOBS).unwrap();
        cfg.output_dir = dir.to_path_buf();
        cfg
    }

    #[test]
    fn unit_factor_reproduces_the_plain_sweep() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = config(tmp.path());
        let rows = sigma_estimation_run(&cfg, 0.25, &[1.0, 1.5]).unwrap();
        assert_eq!(rows.len(), 4, "two CAA points per factor");
        assert!(tmp.path().join("sigma_study.json").exists());

        let mut plain = cfg.clone();
        plain.methods.retain(|g| g.method() == Method::Caa);
        plain.output_dir = tmp.path().join("plain");
        let base = run_sweep(&plain).unwrap();
        let again = crate::harness::RunRecord::load(tmp.path().join("sigma-factor-1")).unwrap();
        assert_eq!(base.rows, again.rows);
        assert!(sigma_estimation_run(&cfg, 0.25, &[]).is_err());
        assert!(sigma_estimation_run(&cfg, 0.25, &[0.0]).is_err());
    }

    #[test]
    fn ibp_study_compares_selected_points() {
        let tmp = tempfile::tempdir().unwrap();
        let s = ibp_study(&config(tmp.path()), 0.9).unwrap();
        assert_eq!(s.points.len(), 3);
        assert_eq!(s.selections.len(), 2);
        assert!(s.matched_budget);
        assert!(s.points.iter().all(|p| p.sigma.is_none()));
        assert!(tmp.path().join("ibp").join("ibp_study.json").exists());
    }
}
