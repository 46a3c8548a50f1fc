//! Utterance- and system-level SRCC and MSE.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// A correlation that may be undefined (zero rank variance on either side).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Correlation {
    Defined(f64),
    Undefined,
}

impl Correlation {
    pub fn value(self) -> Option<f64> {
        match self {
            Correlation::Defined(v) => Some(v),
            Correlation::Undefined => None,
        }
    }

    pub fn from_result(r: Result<f64>) -> Result<Correlation> {
        match r {
            Ok(v) => Ok(Correlation::Defined(v)),
            Err(Error::UndefinedCorrelation(_)) => Ok(Correlation::Undefined),
            Err(e) => Err(e),
        }
    }
}

impl fmt::Display for Correlation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Correlation::Defined(v) => write!(f, "{v:.6}"),
            Correlation::Undefined => f.write_str("undefined"),
        }
    }
}

fn check_pair(x: &[f64], y: &[f64], min_len: usize) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Validation(format!(
            "vector lengths differ ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    if x.len() < min_len {
        return Err(Error::Validation(format!(
            "need at least {min_len} values, got {}",
            x.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite value in metric input".into()));
    }
    Ok(())
}

/// 1-based ranks; tied values share the mean of the positions they occupy.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // Positions start+1 ..= end.
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!(
            "need at least 2 pairs, got {}",
            x.len()
        )));
    }
    check_pair(x, y, 2)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with average ranks for ties.
pub fn srcc(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() < 2 && x.len() == y.len() {
        return Err(Error::UndefinedCorrelation(format!(
            "need at least 2 pairs, got {}",
            x.len()
        )));
    }
    check_pair(x, y, 2)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

pub fn mse(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y, 1)?;
    Ok(x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    #[default]
    Unweighted,
    /// System MSE weighted by utterance count. System SRCC is unaffected.
    Weighted,
}

impl Aggregation {
    pub fn as_str(self) -> &'static str {
        match self {
            Aggregation::Unweighted => "unweighted",
            Aggregation::Weighted => "weighted",
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unweighted" => Ok(Aggregation::Unweighted),
            "weighted" => Ok(Aggregation::Weighted),
            other => Err(Error::Config(format!("unknown aggregation `{other}`"))),
        }
    }
}

/// Per-system means, ordered by system id.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemAggregate {
    pub system_ids: Vec<String>,
    pub preds: Vec<f64>,
    pub labels: Vec<f64>,
    pub counts: Vec<usize>,
    pub aggregation: Aggregation,
}

impl SystemAggregate {
    pub fn mse(&self) -> f64 {
        let sq = self.preds.iter().zip(&self.labels).map(|(p, y)| (p - y).powi(2));
        match self.aggregation {
            Aggregation::Unweighted => sq.sum::<f64>() / self.preds.len() as f64,
            Aggregation::Weighted => {
                let total: usize = self.counts.iter().sum();
                sq.zip(&self.counts).map(|(e, n)| e * *n as f64).sum::<f64>() / total as f64
            }
        }
    }

    pub fn srcc(&self) -> Result<f64> {
        srcc(&self.preds, &self.labels)
    }
}

pub fn aggregate_by_system<S: AsRef<str>>(
    preds: &[f64],
    labels: &[f64],
    system_ids: &[S],
    aggregation: Aggregation,
) -> Result<SystemAggregate> {
    check_pair(preds, labels, 1)?;
    if system_ids.len() != preds.len() {
        return Err(Error::Validation("system ids not aligned with predictions".into()));
    }
    let mut sums: BTreeMap<&str, (f64, f64, usize)> = BTreeMap::new();
    for ((p, y), s) in preds.iter().zip(labels).zip(system_ids) {
        let e = sums.entry(s.as_ref()).or_insert((0.0, 0.0, 0));
        e.0 += p;
        e.1 += y;
        e.2 += 1;
    }
    let mut agg = SystemAggregate {
        system_ids: Vec::with_capacity(sums.len()),
        preds: Vec::with_capacity(sums.len()),
        labels: Vec::with_capacity(sums.len()),
        counts: Vec::with_capacity(sums.len()),
        aggregation,
    };
    for (sys, (p, y, n)) in sums {
        agg.system_ids.push(sys.to_string());
        agg.preds.push(p / n as f64);
        agg.labels.push(y / n as f64);
        agg.counts.push(n);
    }
    Ok(agg)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SystemMetric {
    pub pred_mean: f64,
    pub label_mean: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub utterance_srcc: Correlation,
    pub utterance_mse: f64,
    pub system_srcc: Correlation,
    pub system_mse: f64,
    pub aggregation: Aggregation,
    pub n_utterances: usize,
    pub n_systems: usize,
    pub per_system: BTreeMap<String, SystemMetric>,
}

pub const REPORT_CSV_HEADER: &str = "config,sys_srcc,sys_mse,utt_srcc,utt_mse,n_utt,n_sys,aggregation";

impl MetricReport {
    pub fn csv_row(&self, config: &str) -> String {
        format!(
            "{},{},{:.6},{},{:.6},{},{},{}",
            csv_field(config),
            self.system_srcc,
            self.system_mse,
            self.utterance_srcc,
            self.utterance_mse,
            self.n_utterances,
            self.n_systems,
            self.aggregation
        )
    }

    pub fn to_text(&self, config: &str) -> String {
        let mut out = String::new();
        out.push_str(&format!("configuration:   {config}\n"));
        out.push_str(&format!(
            "utterances:      {}  systems: {}\n",
            self.n_utterances, self.n_systems
        ));
        out.push_str(&format!("aggregation:     {}\n", self.aggregation));
        out.push_str(&format!(
            "system     SRCC {:>10}  MSE {:.6}\n",
            self.system_srcc.to_string(),
            self.system_mse
        ));
        out.push_str(&format!(
            "utterance  SRCC {:>10}  MSE {:.6}\n",
            self.utterance_srcc.to_string(),
            self.utterance_mse
        ));
        out.push_str(
            "note: system SRCC ranks unweighted system means; the aggregation mode changes system MSE only\n",
        );
        out
    }
}

/// Quotes a CSV field if needed.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn evaluate<S: AsRef<str>>(
    preds: &[f64],
    labels: &[f64],
    system_ids: &[S],
    aggregation: Aggregation,
) -> Result<MetricReport> {
    let utterance_mse = mse(preds, labels)?;
    let utterance_srcc = Correlation::from_result(srcc(preds, labels))?;
    let agg = aggregate_by_system(preds, labels, system_ids, aggregation)?;
    let system_srcc = Correlation::from_result(agg.srcc())?;
    let per_system = agg
        .system_ids
        .iter()
        .enumerate()
        .map(|(i, s)| {
            (
                s.clone(),
                SystemMetric {
                    pred_mean: agg.preds[i],
                    label_mean: agg.labels[i],
                    count: agg.counts[i],
                },
            )
        })
        .collect();
    Ok(MetricReport {
        utterance_srcc,
        utterance_mse,
        system_srcc,
        system_mse: agg.mse(),
        aggregation,
        n_utterances: preds.len(),
        n_systems: agg.system_ids.len(),
        per_system,
    })
}
