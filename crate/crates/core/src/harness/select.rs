use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::sweep::{ResultRow, RunRecord};
use crate::attacks::{AttackSpec, Method};
use crate::error::{Error, Result};
use crate::metrics::{summarize, MetricsSummary, ResultsMatrix};

/// Metrics of one (σ setting, method grid, parameter point).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointSummary {
    pub setting: usize,
    pub sigma: Option<f64>,
    pub grid: usize,
    pub point: usize,
    pub method: Method,
    pub params: AttackSpec,
    pub errors: usize,
    pub metrics: MetricsSummary,
}

/// The operating point chosen for one method grid at one σ setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub setting: usize,
    pub sigma: Option<f64>,
    pub grid: usize,
    pub point: usize,
    pub method: Method,
    pub params: AttackSpec,
    pub success_rate: f64,
    pub pct_to_cohen: Option<f64>,
    /// False when no point reached the target and the most successful one
    /// was taken instead.
    pub meets_target: bool,
}

/// Same-σ comparison of the selected points, including best proportions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub setting: usize,
    pub sigma: Option<f64>,
    pub metrics: Vec<MetricsSummary>,
}

type Group<'a> = BTreeMap<(usize, usize, usize), Vec<&'a ResultRow>>;

fn groups(record: &RunRecord) -> Group<'_> {
    let mut g: Group<'_> = BTreeMap::new();
    for r in &record.rows {
        g.entry((r.key.setting, r.key.grid, r.key.point)).or_default().push(r);
    }
    for rows in g.values_mut() {
        rows.sort_by_key(|r| r.key.sample);
    }
    g
}

fn matrix_column(rows: &[&ResultRow], times: &BTreeMap<crate::harness::TaskKey, f64>) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    (
        rows.iter().map(|r| r.clean_radius).collect(),
        rows.iter().map(|r| r.attack_radius).collect(),
        rows.iter().map(|r| times.get(&r.key).copied().unwrap_or(0.0)).collect(),
    )
}

/// Metrics of every swept point, in (setting, grid, point) order.
pub fn point_summaries(record: &RunRecord) -> Result<Vec<PointSummary>> {
    let times = record.timing_map();
    let mut out = Vec::new();
    for ((setting, grid, point), rows) in groups(record) {
        let first = rows[0];
        let (cohen, radii, t) = matrix_column(&rows, &times);
        let mut m = ResultsMatrix::new(cohen)?;
        m.add_method(first.method.name(), radii, t)?;
        out.push(PointSummary {
            setting,
            sigma: first.sigma,
            grid,
            point,
            method: first.method,
            params: first.params.clone(),
            errors: rows.iter().filter(|r| r.error.is_some()).count(),
            metrics: summarize(&m)?.remove(0),
        });
    }
    Ok(out)
}

fn pct_key(p: Option<f64>) -> f64 {
    p.unwrap_or(f64::INFINITY)
}

/// Per (σ setting, method grid): the point with the lowest %-C among those
/// reaching `target_success`; failing that, the most successful point. Ties
/// go to the lower %-C, then the earlier grid point.
pub fn select_operating_point(record: &RunRecord, target_success: f64) -> Result<Vec<Selection>> {
    if !(0.0..=1.0).contains(&target_success) {
        return Err(Error::invalid(format!("target success must lie in [0,1], got {target_success}")));
    }
    Ok(select_from(&point_summaries(record)?, target_success))
}

pub(crate) fn select_from(points: &[PointSummary], target: f64) -> Vec<Selection> {
    let mut by_group: BTreeMap<(usize, usize), Vec<&PointSummary>> = BTreeMap::new();
    for p in points {
        by_group.entry((p.setting, p.grid)).or_default().push(p);
    }
    let mut out = Vec::new();
    for cands in by_group.values() {
        let feasible: Vec<&&PointSummary> = cands.iter().filter(|p| p.metrics.success_rate >= target).collect();
        let lower_pct =
            |a: &PointSummary, b: &PointSummary| pct_key(a.metrics.pct_to_cohen).total_cmp(&pct_key(b.metrics.pct_to_cohen));
        let pick = if feasible.is_empty() {
            cands.iter().min_by(|a, b| {
                b.metrics
                    .success_rate
                    .total_cmp(&a.metrics.success_rate)
                    .then_with(|| lower_pct(a, b))
                    .then(a.point.cmp(&b.point))
            })
        } else {
            feasible.into_iter().min_by(|a, b| lower_pct(a, b).then(a.point.cmp(&b.point)))
        };
        if let Some(p) = pick {
            out.push(Selection {
                setting: p.setting,
                sigma: p.sigma,
                grid: p.grid,
                point: p.point,
                method: p.method,
                params: p.params.clone(),
                success_rate: p.metrics.success_rate,
                pct_to_cohen: p.metrics.pct_to_cohen,
                meets_target: p.metrics.success_rate >= target,
            });
        }
    }
    out
}

/// Puts the selected points of each σ setting side by side, so best
/// proportions compare methods on the same samples.
pub fn compare_selected(record: &RunRecord, selections: &[Selection]) -> Result<Vec<Comparison>> {
    let g = groups(record);
    let times = record.timing_map();
    let mut per_setting: BTreeMap<usize, Vec<&Selection>> = BTreeMap::new();
    for s in selections {
        per_setting.entry(s.setting).or_default().push(s);
    }
    let mut out = Vec::new();
    for (setting, sels) in per_setting {
        let mut matrix: Option<ResultsMatrix> = None;
        let mut samples: Option<Vec<usize>> = None;
        for s in &sels {
            let rows = g
                .get(&(s.setting, s.grid, s.point))
                .ok_or_else(|| Error::invalid(format!("no rows for grid {} point {}", s.grid, s.point)))?;
            let ids: Vec<usize> = rows.iter().map(|r| r.key.sample).collect();
            match &samples {
                Some(prev) if *prev != ids => {
                    return Err(Error::invalid("selected points were run on different samples"));
                }
                _ => samples = Some(ids),
            }
            let (cohen, radii, t) = matrix_column(rows, &times);
            let m = matrix.get_or_insert(ResultsMatrix::new(cohen)?);
            let dup = sels.iter().filter(|o| o.method == s.method).count() > 1;
            let name = if dup {
                format!("{}#{}", s.method, s.grid)
            } else {
                s.method.to_string()
            };
            m.add_method(name, radii, t)?;
        }
        if let Some(m) = matrix {
            out.push(Comparison {
                setting,
                sigma: sels[0].sigma,
                metrics: summarize(&m)?,
            });
        }
    }
    Ok(out)
}
