//! Repeated-measures statistics over validation outcomes.
//!
//! Sphericity is assumed; no epsilon correction is applied. When an effect's
//! error term has zero variance the result carries
//! [`Degeneracy::ZeroErrorVariance`]: a non-zero effect then reports
//! `F = ∞, p = 0` and a null effect reports `F = 0, p = 1`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use thiserror::Error;

use crate::objective::CostBreakdown;
use crate::protocol::{Condition, ValidationReport};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("table needs at least 2 subjects and 2 levels per factor (got {subjects} × {conditions} × {times})")]
    TooSmall { subjects: usize, conditions: usize, times: usize },
    #[error("table has {got} values, expected {expected}")]
    Shape { got: usize, expected: usize },
    #[error("cell ({subject}, {condition}, {time}) is not finite")]
    NonFinite { subject: usize, condition: usize, time: usize },
    #[error("one-way analysis needs a single time level (got {0})")]
    HasTimeAxis(usize),
    #[error("two-way analysis needs at least 2 time levels")]
    NoTimeAxis,
    #[error("invalid degrees of freedom {0}")]
    BadDf(f64),
    #[error("invalid statistic {0}")]
    BadStatistic(f64),
    #[error("subject {subject} has no {condition:?} results for day {day}")]
    MissingCell { subject: String, condition: Condition, day: u32 },
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

/// Reference distribution of a test statistic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Distribution {
    F { d1: f64, d2: f64 },
    /// Student t, two-sided.
    T { df: f64 },
}

fn check_df(df: f64) -> Result<()> {
    if df > 0.0 && df.is_finite() {
        Ok(())
    } else {
        Err(AnalysisError::BadDf(df))
    }
}

/// Upper-tail probability for F, two-sided probability for t.
pub fn tail_probability(statistic: f64, dist: Distribution) -> Result<f64> {
    if statistic.is_nan() {
        return Err(AnalysisError::BadStatistic(statistic));
    }
    match dist {
        Distribution::F { d1, d2 } => {
            check_df(d1)?;
            check_df(d2)?;
            if statistic < 0.0 {
                return Err(AnalysisError::BadStatistic(statistic));
            }
            if statistic == f64::INFINITY {
                return Ok(0.0);
            }
            let x = d2 / (d2 + d1 * statistic);
            Ok(beta_reg(d2 / 2.0, d1 / 2.0, x))
        }
        Distribution::T { df } => {
            check_df(df)?;
            if statistic.is_infinite() {
                return Ok(0.0);
            }
            let x = df / (df + statistic * statistic);
            Ok(beta_reg(df / 2.0, 0.5, x))
        }
    }
}

/// Subjects × conditions × time levels, all cells present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmTable {
    pub subjects: Vec<String>,
    pub conditions: Vec<String>,
    pub times: Vec<String>,
    values: Vec<f64>,
}

fn labels(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}{i}")).collect()
}

impl RmTable {
    /// `values` is laid out subject-major, then condition, then time.
    pub fn new(subjects: Vec<String>, conditions: Vec<String>, times: Vec<String>, values: Vec<f64>) -> Result<Self> {
        let (s, c, t) = (subjects.len(), conditions.len(), times.len());
        if s < 2 || c < 2 || t < 1 {
            return Err(AnalysisError::TooSmall {
                subjects: s,
                conditions: c,
                times: t,
            });
        }
        if values.len() != s * c * t {
            return Err(AnalysisError::Shape {
                got: values.len(),
                expected: s * c * t,
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(AnalysisError::NonFinite {
                subject: i / (c * t),
                condition: i / t % c,
                time: i % t,
            });
        }
        Ok(Self {
            subjects,
            conditions,
            times,
            values,
        })
    }

    /// Subjects × conditions with generated labels.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let c = rows.first().map_or(0, Vec::len);
        let values: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(labels("s", rows.len()), labels("c", c), vec!["t1".into()], values)
    }

    /// Subjects × conditions × times with generated labels.
    pub fn from_cube(cube: &[Vec<Vec<f64>>]) -> Result<Self> {
        let c = cube.first().map_or(0, Vec::len);
        let t = cube.first().and_then(|r| r.first()).map_or(0, Vec::len);
        let values: Vec<f64> = cube.iter().flatten().flatten().copied().collect();
        Self::new(labels("s", cube.len()), labels("c", c), labels("t", t), values)
    }

    pub fn get(&self, subject: usize, condition: usize, time: usize) -> f64 {
        let (c, t) = (self.conditions.len(), self.times.len());
        self.values[(subject * c + condition) * t + time]
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.subjects.len(), self.conditions.len(), self.times.len())
    }

    /// Averages over time, leaving subjects × conditions.
    pub fn collapse_time(&self) -> Self {
        let (s, c, t) = self.dims();
        let values = (0..s)
            .flat_map(|i| (0..c).map(move |j| (i, j)))
            .map(|(i, j)| (0..t).map(|k| self.get(i, j, k)).sum::<f64>() / t as f64)
            .collect();
        Self {
            subjects: self.subjects.clone(),
            conditions: self.conditions.clone(),
            times: vec!["mean".into()],
            values,
        }
    }

    /// Per-subject means for each level of `factor`, averaged over the
    /// other factor. Indexed `[level][subject]`.
    fn level_means(&self, factor: Factor) -> Vec<Vec<f64>> {
        let (s, c, t) = self.dims();
        match factor {
            Factor::Condition => (0..c)
                .map(|j| (0..s).map(|i| (0..t).map(|k| self.get(i, j, k)).sum::<f64>() / t as f64).collect())
                .collect(),
            Factor::Time => (0..t)
                .map(|k| (0..s).map(|i| (0..c).map(|j| self.get(i, j, k)).sum::<f64>() / c as f64).collect())
                .collect(),
        }
    }

    fn level_labels(&self, factor: Factor) -> &[String] {
        match factor {
            Factor::Condition => &self.conditions,
            Factor::Time => &self.times,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Factor {
    Condition,
    Time,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Degeneracy {
    ZeroErrorVariance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Effect {
    pub name: String,
    pub f: f64,
    pub df_num: f64,
    pub df_den: f64,
    pub p: f64,
    pub degenerate: Option<Degeneracy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnovaResult {
    pub effects: Vec<Effect>,
}

impl AnovaResult {
    pub fn effect(&self, name: &str) -> Option<&Effect> {
        self.effects.iter().find(|e| e.name == name)
    }
}

// Sums of squares below this fraction of the total are rounding residue.
const REL_ZERO: f64 = 1e-12;

fn effect(name: &str, ss: f64, df: f64, ss_err: f64, df_err: f64, ss_total: f64) -> Result<Effect> {
    let zero = REL_ZERO * ss_total;
    let (f, p, degenerate) = if ss_err <= zero {
        if ss <= zero {
            (0.0, 1.0, Some(Degeneracy::ZeroErrorVariance))
        } else {
            (f64::INFINITY, 0.0, Some(Degeneracy::ZeroErrorVariance))
        }
    } else {
        let f = if ss <= zero { 0.0 } else { (ss / df) / (ss_err / df_err) };
        (f, tail_probability(f, Distribution::F { d1: df, d2: df_err })?, None)
    };
    Ok(Effect {
        name: name.to_string(),
        f,
        df_num: df,
        df_den: df_err,
        p,
        degenerate,
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    sum / n as f64
}

/// Conditions as the within-subject factor. The effect is named
/// `condition`.
pub fn rm_anova_oneway(table: &RmTable) -> Result<AnovaResult> {
    let (s, c, t) = table.dims();
    if t != 1 {
        return Err(AnalysisError::HasTimeAxis(t));
    }
    let x = |i: usize, j: usize| table.get(i, j, 0);
    let grand = mean(table.values.iter().copied());
    let subj: Vec<f64> = (0..s).map(|i| mean((0..c).map(|j| x(i, j)))).collect();
    let cond: Vec<f64> = (0..c).map(|j| mean((0..s).map(|i| x(i, j)))).collect();
    let ss_total: f64 = table.values.iter().map(|v| (v - grand).powi(2)).sum();
    let ss_cond = s as f64 * cond.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let mut ss_err = 0.0;
    for i in 0..s {
        for j in 0..c {
            ss_err += (x(i, j) - subj[i] - cond[j] + grand).powi(2);
        }
    }
    let df = (c - 1) as f64;
    let df_err = ((c - 1) * (s - 1)) as f64;
    Ok(AnovaResult {
        effects: vec![effect("condition", ss_cond, df, ss_err, df_err, ss_total)?],
    })
}

/// Condition and time as crossed within-subject factors. Each effect is
/// tested against its own effect × subject interaction. Effects are named
/// `condition`, `time` and `condition:time`.
pub fn rm_anova_twoway(table: &RmTable) -> Result<AnovaResult> {
    let (s, a, b) = table.dims();
    if b < 2 {
        return Err(AnalysisError::NoTimeAxis);
    }
    let x = |i, j, k| table.get(i, j, k);
    let grand = mean(table.values.iter().copied());
    let m_s: Vec<f64> = (0..s).map(|i| mean((0..a).flat_map(|j| (0..b).map(move |k| x(i, j, k))))).collect();
    let m_a: Vec<f64> = (0..a).map(|j| mean((0..s).flat_map(|i| (0..b).map(move |k| x(i, j, k))))).collect();
    let m_b: Vec<f64> = (0..b).map(|k| mean((0..s).flat_map(|i| (0..a).map(move |j| x(i, j, k))))).collect();
    let m_ab = |j: usize, k: usize| mean((0..s).map(|i| x(i, j, k)));
    let m_as = |i: usize, j: usize| mean((0..b).map(|k| x(i, j, k)));
    let m_bs = |i: usize, k: usize| mean((0..a).map(|j| x(i, j, k)));

    let ss_total: f64 = table.values.iter().map(|v| (v - grand).powi(2)).sum();
    let ss_a = (s * b) as f64 * m_a.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let ss_b = (s * a) as f64 * m_b.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let (mut ss_ab, mut ss_as, mut ss_bs, mut ss_abs) = (0.0, 0.0, 0.0, 0.0);
    for j in 0..a {
        for k in 0..b {
            ss_ab += s as f64 * (m_ab(j, k) - m_a[j] - m_b[k] + grand).powi(2);
        }
    }
    for i in 0..s {
        for j in 0..a {
            ss_as += b as f64 * (m_as(i, j) - m_a[j] - m_s[i] + grand).powi(2);
        }
        for k in 0..b {
            ss_bs += a as f64 * (m_bs(i, k) - m_b[k] - m_s[i] + grand).powi(2);
        }
        for j in 0..a {
            for k in 0..b {
                let r = x(i, j, k) - m_ab(j, k) - m_as(i, j) - m_bs(i, k) + m_a[j] + m_b[k] + m_s[i] - grand;
                ss_abs += r * r;
            }
        }
    }
    let (da, db, ds) = ((a - 1) as f64, (b - 1) as f64, (s - 1) as f64);
    Ok(AnovaResult {
        effects: vec![
            effect("condition", ss_a, da, ss_as, da * ds, ss_total)?,
            effect("time", ss_b, db, ss_bs, db * ds, ss_total)?,
            effect("condition:time", ss_ab, da * db, ss_abs, da * db * ds, ss_total)?,
        ],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseResult {
    pub first: String,
    pub second: String,
    /// Mean of first − second over subjects.
    pub mean_difference: f64,
    /// `None` when the differences have zero variance.
    pub t: Option<f64>,
    pub df: f64,
    pub p_raw: Option<f64>,
    pub p_adjusted: Option<f64>,
    pub significant_05: bool,
    pub significant_01: bool,
    pub degenerate: Option<Degeneracy>,
}

/// Bonferroni adjustment for `m` comparisons.
pub fn bonferroni(p: f64, m: usize) -> f64 {
    (p * m as f64).min(1.0)
}

/// Paired two-sided t-tests between every pair of levels of `factor`.
pub fn bonferroni_pairwise(table: &RmTable, factor: Factor) -> Result<Vec<PairwiseResult>> {
    let means = table.level_means(factor);
    let names = table.level_labels(factor);
    let n = table.subjects.len();
    if means.len() < 2 {
        return Err(AnalysisError::TooSmall {
            subjects: n,
            conditions: table.conditions.len(),
            times: table.times.len(),
        });
    }
    let m = means.len() * (means.len() - 1) / 2;
    let df = (n - 1) as f64;
    let mut out = Vec::with_capacity(m);
    for u in 0..means.len() {
        for v in u + 1..means.len() {
            let d: Vec<f64> = means[u].iter().zip(&means[v]).map(|(a, b)| a - b).collect();
            let md = mean(d.iter().copied());
            let var = d.iter().map(|x| (x - md).powi(2)).sum::<f64>() / df;
            let scale = d.iter().map(|x| x.abs()).fold(0.0, f64::max);
            let (t, p_raw, degenerate) = if var <= (REL_ZERO * scale).powi(2) {
                (None, None, Some(Degeneracy::ZeroErrorVariance))
            } else {
                let t = md / (var / n as f64).sqrt();
                (Some(t), Some(tail_probability(t, Distribution::T { df })?), None)
            };
            let p_adjusted = p_raw.map(|p| bonferroni(p, m));
            out.push(PairwiseResult {
                first: names[u].clone(),
                second: names[v].clone(),
                mean_difference: md,
                t,
                df,
                p_raw,
                p_adjusted,
                significant_05: p_adjusted.is_some_and(|p| p < 0.05),
                significant_01: p_adjusted.is_some_and(|p| p < 0.01),
                degenerate,
            });
        }
    }
    Ok(out)
}

/// Which cost enters the analysis.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Total,
    Effort,
    Tracking,
    Stiffness,
}

impl Metric {
    pub fn of(self, c: &CostBreakdown) -> f64 {
        match self {
            Metric::Total => c.total,
            Metric::Effort => c.effort,
            Metric::Tracking => c.tracking,
            Metric::Stiffness => c.stiffness,
        }
    }
}

pub const CONTROLLER_CONDITIONS: [Condition; 3] = [Condition::Baseline, Condition::Best, Condition::LastMean];

pub fn condition_label(c: Condition) -> &'static str {
    match c {
        Condition::NoAssist => "no_assist",
        Condition::Baseline => "baseline",
        Condition::Best => "best",
        Condition::LastMean => "last_mean",
    }
}

/// Builds a subjects × conditions × days table from each subject's
/// validation reports. A cell is the metric averaged over rounds.
pub fn table_from_reports(
    subjects: &[(String, Vec<ValidationReport>)],
    conditions: &[Condition],
    metric: Metric,
) -> Result<RmTable> {
    let days = subjects.iter().map(|(_, r)| r.len()).min().unwrap_or(0);
    let mut values = Vec::new();
    for (name, reports) in subjects {
        for &condition in conditions {
            for report in &reports[..days] {
                let cells: Vec<f64> = report
                    .rounds
                    .iter()
                    .flat_map(|r| r.results.iter())
                    .filter(|r| r.condition == condition)
                    .map(|r| metric.of(&r.cost))
                    .collect();
                if cells.is_empty() {
                    return Err(AnalysisError::MissingCell {
                        subject: name.clone(),
                        condition,
                        day: report.day,
                    });
                }
                values.push(mean(cells.into_iter()));
            }
        }
    }
    RmTable::new(
        subjects.iter().map(|(n, _)| n.clone()).collect(),
        conditions.iter().map(|c| condition_label(*c).to_string()).collect(),
        (1..=days).map(|d| format!("day{d}")).collect(),
        values,
    )
}

/// `**` below 0.01, `*` below 0.05.
pub fn stars(p: f64) -> &'static str {
    if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

/// Delimited summary: one row per effect, then one per pairwise test.
pub fn summary_table(anova: &AnovaResult, pairwise: &[(Factor, Vec<PairwiseResult>)]) -> String {
    let mut out = String::from("kind,name,statistic,df1,df2,p,p_adjusted,flag\n");
    for e in &anova.effects {
        let flag = if e.degenerate.is_some() {
            "degenerate"
        } else {
            stars(e.p)
        };
        let _ = writeln!(out, "effect,{},{:.6},{},{},{:.6},,{}", e.name, e.f, e.df_num, e.df_den, e.p, flag);
    }
    for (factor, rows) in pairwise {
        let factor = match factor {
            Factor::Condition => "condition",
            Factor::Time => "time",
        };
        for r in rows {
            let flag = if r.degenerate.is_some() {
                "degenerate"
            } else if r.significant_01 {
                "**"
            } else if r.significant_05 {
                "*"
            } else {
                ""
            };
            let _ = writeln!(
                out,
                "pairwise_{factor},{}-{},{},{},,{},{},{}",
                r.first,
                r.second,
                fmt_opt(r.t),
                r.df,
                fmt_opt(r.p_raw),
                fmt_opt(r.p_adjusted),
                flag
            );
        }
    }
    out
}
