//! Step-wise acceptance bookkeeping and the summaries built from it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-step attempt and success counts.
///
/// Step `k` is attempted when the first `k` drafted tokens were accepted and
/// the round drafted at least `k + 1` tokens; it succeeds when token `k + 1`
/// is accepted too.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcceptanceStats {
    pub attempts: Vec<u64>,
    pub successes: Vec<u64>,
}

impl AcceptanceStats {
    pub fn new(steps: usize) -> Self {
        Self {
            attempts: vec![0; steps],
            successes: vec![0; steps],
        }
    }

    pub fn steps(&self) -> usize {
        self.attempts.len()
    }

    /// Records one round that drafted `depth` levels and accepted `accepted`.
    pub fn record(&mut self, accepted: usize, depth: usize) {
        let reach = depth.min(self.steps());
        for k in 0..reach.min(accepted + 1) {
            self.attempts[k] += 1;
            if accepted > k {
                self.successes[k] += 1;
            }
        }
    }

    /// Component-wise sum; steps missing on one side count as zero.
    pub fn merge(&self, other: &Self) -> Self {
        let n = self.steps().max(other.steps());
        let at = |v: &[u64], i: usize| v.get(i).copied().unwrap_or(0);
        Self {
            attempts: (0..n).map(|i| at(&self.attempts, i) + at(&other.attempts, i)).collect(),
            successes: (0..n).map(|i| at(&self.successes, i) + at(&other.successes, i)).collect(),
        }
    }
}

/// `α_k = successes_k / attempts_k`; steps never attempted are `None`.
pub fn alphas_from_stats(stats: &AcceptanceStats) -> Vec<Option<f64>> {
    stats
        .attempts
        .iter()
        .zip(&stats.successes)
        .map(|(&a, &s)| (a > 0).then(|| s as f64 / a as f64))
        .collect()
}

fn check_alphas(alphas: &[f64]) -> Result<()> {
    match alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        Some(a) => Err(Error::Input(format!("acceptance rate {a} outside [0, 1]"))),
        None => Ok(()),
    }
}

/// Mean accepted tokens: `1 + Σ_k Π_{j≤k} α_j`.
pub fn mat(alphas: &[f64]) -> Result<f64> {
    check_alphas(alphas)?;
    let mut total = 1.0;
    let mut prod = 1.0;
    for &a in alphas {
        prod *= a;
        total += prod;
    }
    Ok(total)
}

/// `α_{K-1} / α_0`.
pub fn retention(alphas: &[f64]) -> Result<f64> {
    check_alphas(alphas)?;
    match (alphas.first(), alphas.last()) {
        (Some(&a0), Some(&last)) if a0 > 0.0 => Ok(last / a0),
        _ => Err(Error::Numeric("retention needs a positive first-step rate".into())),
    }
}

/// The leading run of measured rates.
pub fn measured_prefix(alphas: &[Option<f64>]) -> Vec<f64> {
    alphas.iter().map_while(|a| *a).collect()
}

/// Number of step columns in a metrics report.
pub const REPORT_STEPS: usize = 7;

/// One row of the metrics report.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub method: String,
    pub depth: usize,
    pub alphas: Vec<Option<f64>>,
    pub retention: Option<f64>,
    pub mat: Option<f64>,
    pub tree_mat: Option<f64>,
}

impl MetricsRow {
    /// Fills retention and MAT from the step rates.
    pub fn from_alphas(method: impl Into<String>, depth: usize, alphas: Vec<Option<f64>>, tree_mat: Option<f64>) -> Self {
        let prefix = measured_prefix(&alphas);
        let full = prefix.len() == alphas.len() && !prefix.is_empty();
        Self {
            method: method.into(),
            depth,
            retention: full.then(|| retention(&prefix).ok()).flatten(),
            mat: (!prefix.is_empty()).then(|| mat(&prefix).ok()).flatten(),
            alphas,
            tree_mat,
        }
    }
}

pub fn report_header() -> Vec<String> {
    let mut h = vec!["method".to_string(), "depth".to_string()];
    h.extend((0..REPORT_STEPS).map(|k| format!("alpha_{k}")));
    h.extend(["retention", "mat", "tree_mat"].map(String::from));
    h
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

pub fn write_report(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(std::fs::File::create(path)?);
    w.write_record(report_header()).map_err(|e| Error::Format(e.to_string()))?;
    for r in rows {
        let mut rec = vec![r.method.clone(), r.depth.to_string()];
        for k in 0..REPORT_STEPS {
            rec.push(cell(r.alphas.get(k).copied().flatten()));
        }
        rec.extend([cell(r.retention), cell(r.mat), cell(r.tree_mat)]);
        w.write_record(&rec).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_reader(std::fs::File::open(path)?);
    let header: Vec<String> = r
        .headers()
        .map_err(|e| Error::Format(e.to_string()))?
        .iter()
        .map(String::from)
        .collect();
    if header != report_header() {
        return Err(Error::Input(format!("{}: unexpected columns {header:?}", path.display())));
    }
    let num = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| Error::Format(format!("bad number {s:?}")))
        }
    };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
        let alphas = (0..REPORT_STEPS).map(|k| num(&rec[2 + k])).collect::<Result<Vec<_>>>()?;
        rows.push(MetricsRow {
            method: rec[0].to_string(),
            depth: rec[1].parse().map_err(|_| Error::Format(format!("bad depth {:?}", &rec[1])))?,
            alphas,
            retention: num(&rec[2 + REPORT_STEPS])?,
            mat: num(&rec[3 + REPORT_STEPS])?,
            tree_mat: num(&rec[4 + REPORT_STEPS])?,
        });
    }
    Ok(rows)
}
