//! Sample-level metrics over attack results: success rate, best proportion,
//! median radius, %-C and median time.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One column of a [`ResultsMatrix`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodColumn {
    pub name: String,
    /// Attack radius per sample, 0 for a failed attack.
    pub radii: Vec<f64>,
    /// Wall-clock seconds per sample, certification included.
    pub times: Vec<f64>,
}

/// Attack radii and times of several methods over one set of correctly
/// classified samples, plus the clean certified radius of each sample.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultsMatrix {
    cohen: Vec<f64>,
    methods: Vec<MethodColumn>,
}

fn check_column(what: &str, v: &[f64]) -> Result<()> {
    if let Some(i) = v.iter().position(|r| !(r.is_finite() && *r >= 0.0)) {
        return Err(Error::invalid(format!("{what}[{i}] = {} is not a finite non-negative value", v[i])));
    }
    Ok(())
}

impl ResultsMatrix {
    pub fn new(cohen: Vec<f64>) -> Result<Self> {
        check_column("cohen radius", &cohen)?;
        Ok(Self {
            cohen,
            methods: Vec::new(),
        })
    }

    pub fn add_method(&mut self, name: impl Into<String>, radii: Vec<f64>, times: Vec<f64>) -> Result<()> {
        let name = name.into();
        if self.methods.iter().any(|m| m.name == name) {
            return Err(Error::invalid(format!("method {name} already present")));
        }
        for (what, v) in [("radius", &radii), ("time", &times)] {
            if v.len() != self.cohen.len() {
                return Err(Error::ShapeMismatch {
                    op: "results matrix",
                    lhs: vec![v.len()],
                    rhs: vec![self.cohen.len()],
                });
            }
            check_column(what, v)?;
        }
        self.methods.push(MethodColumn { name, radii, times });
        Ok(())
    }

    pub fn num_samples(&self) -> usize {
        self.cohen.len()
    }

    pub fn cohen(&self) -> &[f64] {
        &self.cohen
    }

    pub fn methods(&self) -> &[MethodColumn] {
        &self.methods
    }

    pub fn column(&self, method: &str) -> Result<&MethodColumn> {
        self.methods
            .iter()
            .find(|m| m.name == method)
            .ok_or_else(|| Error::invalid(format!("no results for method {method}")))
    }

    fn nonempty_column(&self, method: &str) -> Result<&MethodColumn> {
        if self.cohen.is_empty() {
            return Err(Error::invalid("metrics need at least one sample"));
        }
        self.column(method)
    }
}

/// Median with the mean-of-middle-two convention; `None` when empty.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => None,
        _ if n % 2 == 1 => Some(v[n / 2]),
        _ => Some(0.5 * (v[n / 2 - 1] + v[n / 2])),
    }
}

/// Fraction of samples with a positive attack radius.
pub fn success_rate(m: &ResultsMatrix, method: &str) -> Result<f64> {
    let col = m.nonempty_column(method)?;
    Ok(col.radii.iter().filter(|&&r| r > 0.0).count() as f64 / col.radii.len() as f64)
}

/// Among samples every method attacked successfully, the fraction where
/// `method` is no larger than all others (ties count for everyone). `None`
/// when no sample was attacked by all methods.
pub fn best_proportion(m: &ResultsMatrix, method: &str) -> Result<Option<f64>> {
    let col = m.nonempty_column(method)?;
    if m.methods.len() < 2 {
        return Err(Error::invalid("best proportion needs at least two methods"));
    }
    let (mut best, mut common) = (0usize, 0usize);
    for j in 0..m.num_samples() {
        if m.methods.iter().any(|o| o.radii[j] <= 0.0) {
            continue;
        }
        common += 1;
        if m.methods.iter().all(|o| col.radii[j] <= o.radii[j]) {
            best += 1;
        }
    }
    Ok((common > 0).then(|| best as f64 / common as f64))
}

/// Median attack radius over successful samples.
pub fn median_radius(m: &ResultsMatrix, method: &str) -> Result<Option<f64>> {
    let col = m.nonempty_column(method)?;
    let ok: Vec<f64> = col.radii.iter().copied().filter(|&r| r > 0.0).collect();
    Ok(median(&ok))
}

/// Median of `100·(r − C)/C` over successful samples with `C > 0`.
pub fn pct_to_cohen(m: &ResultsMatrix, method: &str) -> Result<Option<f64>> {
    let col = m.nonempty_column(method)?;
    let v: Vec<f64> = col
        .radii
        .iter()
        .zip(&m.cohen)
        .filter(|(&r, &c)| r > 0.0 && c > 0.0)
        .map(|(&r, &c)| 100.0 * (r - c) / c)
        .collect();
    Ok(median(&v))
}

/// Successful samples left out of [`pct_to_cohen`] because their clean
/// certificate is zero.
pub fn zero_cohen_excluded(m: &ResultsMatrix, method: &str) -> Result<usize> {
    let col = m.nonempty_column(method)?;
    Ok(col.radii.iter().zip(&m.cohen).filter(|(&r, &c)| r > 0.0 && c == 0.0).count())
}

/// Median time over all samples, successful or not.
pub fn timing(m: &ResultsMatrix, method: &str) -> Result<f64> {
    let col = m.nonempty_column(method)?;
    Ok(median(&col.times).unwrap_or(0.0))
}

/// All metrics of one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub method: String,
    pub samples: usize,
    pub success_rate: f64,
    /// Absent with fewer than two methods or no common success.
    pub best_proportion: Option<f64>,
    pub median_radius: Option<f64>,
    pub pct_to_cohen: Option<f64>,
    pub zero_cohen_excluded: usize,
    pub median_time: f64,
}

pub fn summarize(m: &ResultsMatrix) -> Result<Vec<MetricsSummary>> {
    m.methods
        .iter()
        .map(|c| {
            let name = c.name.as_str();
            Ok(MetricsSummary {
                method: c.name.clone(),
                samples: m.num_samples(),
                success_rate: success_rate(m, name)?,
                best_proportion: if m.methods.len() >= 2 {
                    best_proportion(m, name)?
                } else {
                    None
                },
                median_radius: median_radius(m, name)?,
                pct_to_cohen: pct_to_cohen(m, name)?,
                zero_cohen_excluded: zero_cohen_excluded(m, name)?,
                median_time: timing(m, name)?,
            })
        })
        .collect()
}

pub const SUMMARY_HEADER: &str = "method,samples,success_rate,best_proportion,median_radius,pct_to_cohen,zero_cohen_excluded,median_time";

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

/// CSV with raw values; absent metrics are empty cells.
pub fn summary_csv(rows: &[MetricsSummary]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.method,
            r.samples,
            r.success_rate,
            opt(r.best_proportion),
            opt(r.median_radius),
            opt(r.pct_to_cohen),
            r.zero_cohen_excluded,
            r.median_time
        ));
    }
    out
}

/// Aligned table in reporting format: percentages without decimals.
pub fn summary_text(rows: &[MetricsSummary]) -> String {
    let pct = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.0}"));
    let mut table = vec![["method", "N", "success %", "best %", "r50", "%-C", "time s"].map(String::from).to_vec()];
    for r in rows {
        table.push(vec![
            r.method.clone(),
            r.samples.to_string(),
            format!("{:.0}", 100.0 * r.success_rate),
            pct(r.best_proportion.map(|b| 100.0 * b)),
            r.median_radius.map_or("-".to_string(), |x| format!("{x:.3}")),
            pct(r.pct_to_cohen),
            format!("{:.3}", r.median_time),
        ]);
    }
    let widths: Vec<usize> = (0..7).map(|c| table.iter().map(|row| row[c].chars().count()).max().unwrap()).collect();
    let mut out = String::new();
    for row in table {
        let cells: Vec<String> = row.iter().zip(&widths).map(|(s, w)| format!("{s:>w$}")).collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}
