use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::select::{compare_selected, point_summaries, select_from, Comparison, PointSummary};
use super::sweep::RunRecord;
use crate::attacks::{AttackSpec, Method};
use crate::error::{Error, Result};
use crate::metrics::{summary_csv, MetricsSummary, SUMMARY_HEADER};

/// Smallest %-C reachable by a method grid at a required success rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub setting: usize,
    pub sigma: Option<f64>,
    pub grid: usize,
    pub method: Method,
    pub required_success: f64,
    pub min_pct_to_cohen: Option<f64>,
}

/// For every observed success rate `s` of a grid, the lowest %-C over its
/// points with success ≥ `s`. Listed by decreasing `s`.
pub fn frontier(points: &[PointSummary]) -> Vec<FrontierPoint> {
    let mut groups: BTreeMap<(usize, usize), Vec<&PointSummary>> = BTreeMap::new();
    for p in points {
        groups.entry((p.setting, p.grid)).or_default().push(p);
    }
    let mut out = Vec::new();
    for ((setting, grid), pts) in groups {
        let mut levels: Vec<f64> = pts.iter().map(|p| p.metrics.success_rate).collect();
        levels.sort_by(|a, b| b.total_cmp(a));
        levels.dedup();
        for s in levels {
            let best = pts
                .iter()
                .filter(|p| p.metrics.success_rate >= s)
                .filter_map(|p| p.metrics.pct_to_cohen)
                .min_by(f64::total_cmp);
            out.push(FrontierPoint {
                setting,
                sigma: pts[0].sigma,
                grid,
                method: pts[0].method,
                required_success: s,
                min_pct_to_cohen: best,
            });
        }
    }
    out
}

fn params_label(spec: &AttackSpec) -> String {
    match spec {
        AttackSpec::Caa(c) => format!(
            "eps_min={} eps_max={} delta_grow={} delta_shrink={} max_iters={}",
            c.eps_min, c.eps_max, c.delta_grow, c.delta_shrink, c.max_iters
        ),
        AttackSpec::Pgd(c) => format!("eps={} iters={}", c.eps_step, c.iters),
        AttackSpec::Cw(c) => format!("c={} kappa={} steps={} lr={}", c.c, c.kappa, c.steps, c.lr),
        AttackSpec::DeepFool(c) => format!("iters={} overshoot={}", c.iters, c.overshoot),
    }
}

fn sigma_label(s: Option<f64>) -> String {
    s.map_or("ibp".to_string(), |v| v.to_string())
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

fn points_csv(points: &[PointSummary]) -> String {
    let mut out = format!("setting,sigma,grid,point,params,errors,{SUMMARY_HEADER}\n");
    for p in points {
        let metrics = summary_csv(std::slice::from_ref(&p.metrics));
        let line = metrics.lines().nth(1).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            p.setting,
            sigma_label(p.sigma),
            p.grid,
            p.point,
            params_label(&p.params),
            p.errors,
            line
        );
    }
    out
}

fn frontier_csv(f: &[FrontierPoint]) -> String {
    let mut out = String::from("setting,sigma,grid,method,required_success,min_pct_to_cohen\n");
    for p in f {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            p.setting,
            sigma_label(p.sigma),
            p.grid,
            p.method,
            p.required_success,
            opt(p.min_pct_to_cohen)
        );
    }
    out
}

fn comparison_csv(c: &[Comparison]) -> String {
    let mut out = format!("setting,sigma,{SUMMARY_HEADER}\n");
    for cmp in c {
        for line in summary_csv(&cmp.metrics).lines().skip(1) {
            let _ = writeln!(out, "{},{},{}", cmp.setting, sigma_label(cmp.sigma), line);
        }
    }
    out
}

fn markdown_table(rows: &[MetricsSummary]) -> String {
    let pct = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.0}"));
    let mut out = String::from("| Method | Success % | Best % | r50 | %-C | Time (s) |\n|---|---:|---:|---:|---:|---:|\n");
    for r in rows {
        let _ = writeln!(
            out,
            "| {} | {:.0} | {} | {} | {} | {:.3} |",
            r.method,
            100.0 * r.success_rate,
            pct(r.best_proportion.map(|b| 100.0 * b)),
            r.median_radius.map_or("-".to_string(), |x| format!("{x:.3}")),
            pct(r.pct_to_cohen),
            r.median_time
        );
    }
    out
}

struct Series {
    name: String,
    points: Vec<(f64, f64)>,
    line: bool,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn svg_plot(title: &str, xlabel: &str, ylabel: &str, series: &[Series], diagonal: bool) -> String {
    let (w, h, ml, mr, mt, mb) = (640.0, 420.0, 70.0, 150.0, 40.0, 50.0);
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    let span = |v: Vec<f64>| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        match (lo.is_finite(), hi > lo) {
            (true, true) => (lo, hi),
            (true, false) => (lo - 0.5, lo + 0.5),
            _ => (0.0, 1.0),
        }
    };
    let (mut x0, mut x1) = span(all.iter().map(|p| p.0).collect());
    let (mut y0, mut y1) = span(all.iter().map(|p| p.1).collect());
    if diagonal {
        (x0, y0) = (x0.min(y0), x0.min(y0));
        (x1, y1) = (x1.max(y1), x1.max(y1));
    }
    let px = |x: f64| ml + (x - x0) / (x1 - x0) * (w - ml - mr);
    let py = |y: f64| h - mb - (y - y0) / (y1 - y0) * (h - mt - mb);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        (w - mr + ml) / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        "<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/><line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>",
        h - mb,
        w - mr,
        h - mb,
        h - mb
    );
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{}</text><text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>",
            px(fx),
            h - mb + 16.0,
            tick(fx),
            ml - 6.0,
            py(fy) + 4.0,
            tick(fy)
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text><text transform=\"translate(16,{}) rotate(-90)\" text-anchor=\"middle\">{}</text>",
        (w - mr + ml) / 2.0,
        h - 10.0,
        escape(xlabel),
        (h - mb + mt) / 2.0,
        escape(ylabel)
    );
    if diagonal {
        let _ = writeln!(
            s,
            "<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"gray\" stroke-dasharray=\"4 3\"/>",
            px(x0),
            py(y0),
            px(x1),
            py(y1)
        );
    }
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if ser.line && ser.points.len() > 1 {
            let pts: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
            let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>", pts.join(" "));
        }
        for &(x, y) in &ser.points {
            let _ = writeln!(s, "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{color}\"/>", px(x), py(y));
        }
        let ly = mt + 18.0 * i as f64;
        let _ = writeln!(
            s,
            "<rect x=\"{}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{color}\"/><text x=\"{}\" y=\"{}\">{}</text>",
            w - mr + 12.0,
            ly,
            w - mr + 28.0,
            ly + 9.0,
            escape(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn write(dir: &Path, name: &str, text: &str, out: &mut Vec<PathBuf>) -> Result<()> {
    let p = dir.join(name);
    fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    out.push(p);
    Ok(())
}

/// Writes `points.csv`, `frontier.csv`, `selected.csv`, `summary.md`,
/// `frontier.svg` and `radius_vs_cohen.svg` into `dir`.
pub fn report(record: &RunRecord, dir: impl AsRef<Path>, target_success: f64) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let points = point_summaries(record)?;
    let selections = select_from(&points, target_success);
    let comparisons = compare_selected(record, &selections)?;
    let front = frontier(&points);
    let mut files = Vec::new();
    write(dir, "points.csv", &points_csv(&points), &mut files)?;
    write(dir, "frontier.csv", &frontier_csv(&front), &mut files)?;
    write(dir, "selected.csv", &comparison_csv(&comparisons), &mut files)?;

    let mut md = format!("# {}\n\nConfiguration hash `{}`.\n\n", record.name, record.config_hash);
    for s in &record.settings {
        let _ = writeln!(
            md,
            "- σ = {}: model `{}`, clean accuracy {:.3}, {} samples attacked",
            sigma_label(s.sigma),
            &s.model_hash[..12.min(s.model_hash.len())],
            s.model_accuracy,
            s.samples.len()
        );
    }
    let _ = writeln!(md, "\nOperating points: lowest %-C at success ≥ {target_success}, else highest success.\n");
    for c in &comparisons {
        let _ = writeln!(md, "## σ = {}\n", sigma_label(c.sigma));
        for sel in selections.iter().filter(|s| s.setting == c.setting) {
            let _ = writeln!(
                md,
                "- {}: point {} ({}){}",
                sel.method,
                sel.point,
                params_label(&sel.params),
                if sel.meets_target { "" } else { ", below target" }
            );
        }
        md.push('\n');
        md.push_str(&markdown_table(&c.metrics));
        md.push('\n');
    }
    write(dir, "summary.md", &md, &mut files)?;

    let mut fs_series = Vec::new();
    let mut by_group: BTreeMap<(usize, usize), Vec<&FrontierPoint>> = BTreeMap::new();
    for f in &front {
        by_group.entry((f.setting, f.grid)).or_default().push(f);
    }
    for pts in by_group.values() {
        fs_series.push(Series {
            name: format!("{} σ={}", pts[0].method, sigma_label(pts[0].sigma)),
            points: pts
                .iter()
                .filter_map(|p| p.min_pct_to_cohen.map(|c| (100.0 * p.required_success, c)))
                .collect(),
            line: true,
        });
    }
    write(
        dir,
        "frontier.svg",
        &svg_plot("Minimum %-C at a required success rate", "success rate (%)", "%-C", &fs_series, false),
        &mut files,
    )?;

    let mut scatter = Vec::new();
    for sel in &selections {
        scatter.push(Series {
            name: format!("{} σ={}", sel.method, sigma_label(sel.sigma)),
            points: record
                .rows
                .iter()
                .filter(|r| r.key.setting == sel.setting && r.key.grid == sel.grid && r.key.point == sel.point)
                .filter(|r| r.attack_radius > 0.0)
                .map(|r| (r.clean_radius, r.attack_radius))
                .collect(),
            line: false,
        });
    }
    write(
        dir,
        "radius_vs_cohen.svg",
        &svg_plot("Attack radius against certified radius", "certified radius", "attack radius", &scatter, true),
        &mut files,
    )?;
    Ok(files)
}
