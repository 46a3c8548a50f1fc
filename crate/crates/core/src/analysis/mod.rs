//! Split diagnostics: how many utterances each system has, how those
//! utterances' MOS values spread, how reliable each system sample mean is,
//! and which conditions in one split never appear in another.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::UtteranceRecord;
use crate::error::{Error, Result};
use crate::features::{CategoryKind, MetadataVocab};

pub mod report;
pub mod svg;

pub const DEFAULT_MIN_COUNT: usize = 10;
pub const DEFAULT_MOS_BIN_WIDTH: f64 = 0.25;
/// Below this many utterances a normal-quantile half-width is only indicative.
pub const SMALL_SAMPLE_N: usize = 30;

fn check_edges(edges: &[f64]) -> Result<()> {
    if edges.len() < 2 {
        return Err(Error::Validation("need at least two bin edges".into()));
    }
    if edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Validation("bin edges must be finite and strictly increasing".into()));
    }
    Ok(())
}

enum Bin {
    Under,
    In(usize),
    Over,
}

/// Left-closed, right-open bins; the last bin also includes its right edge.
fn locate(edges: &[f64], value: f64) -> Bin {
    let last = edges.len() - 1;
    if value < edges[0] {
        return Bin::Under;
    }
    if value > edges[last] {
        return Bin::Over;
    }
    if value == edges[last] {
        return Bin::In(last - 1);
    }
    // First edge strictly greater than value, minus one.
    Bin::In(edges.partition_point(|e| *e <= value) - 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub underflow: usize,
    pub overflow: usize,
    pub title: String,
    pub x_label: String,
    pub y_label: String,
}

impl Histogram {
    pub fn from_values(values: impl IntoIterator<Item = f64>, edges: &[f64]) -> Result<Self> {
        check_edges(edges)?;
        let mut h = Histogram {
            edges: edges.to_vec(),
            counts: vec![0; edges.len() - 1],
            underflow: 0,
            overflow: 0,
            title: String::new(),
            x_label: String::new(),
            y_label: "count".into(),
        };
        for v in values {
            match locate(edges, v) {
                Bin::Under => h.underflow += 1,
                Bin::In(i) => h.counts[i] += 1,
                Bin::Over => h.overflow += 1,
            }
        }
        Ok(h)
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum::<usize>() + self.underflow + self.overflow
    }
}

/// Number of utterances per system.
pub fn utterance_counts(records: &[UtteranceRecord]) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for r in records {
        *out.entry(r.system_id.clone()).or_insert(0) += 1;
    }
    out
}

/// Histogram over systems of their utterance counts.
pub fn utterance_count_histogram(records: &[UtteranceRecord], bin_edges: &[f64]) -> Result<Histogram> {
    if records.is_empty() {
        return Err(Error::Validation("no utterances".into()));
    }
    let counts = utterance_counts(records);
    let mut h = Histogram::from_values(counts.values().map(|c| *c as f64), bin_edges)?;
    h.title = "Utterances per system".into();
    h.x_label = "utterances per system".into();
    h.y_label = "systems".into();
    Ok(h)
}

/// Edges 1, 1+step, ... covering `max_count`, at most ~30 bins.
pub fn default_count_edges(max_count: usize) -> Vec<f64> {
    let max_count = max_count.max(1);
    let step = max_count.div_ceil(30).max(1);
    let mut edges = vec![1.0];
    let mut e = 1;
    while e < max_count {
        e += step;
        edges.push(e as f64);
    }
    if edges.len() == 1 {
        edges.push(2.0);
    }
    edges
}

pub fn default_mos_edges(width: f64) -> Result<Vec<f64>> {
    if !(width > 0.0 && width <= 4.0) {
        return Err(Error::Config(format!("MOS bin width {width} must be in (0, 4]")));
    }
    let n = (4.0 / width).ceil() as usize;
    let mut edges: Vec<f64> = (0..=n).map(|i| (1.0 + i as f64 * width).min(5.0)).collect();
    edges.dedup();
    Ok(edges)
}

/// Utterance MOS counts per (system, MOS bin), systems ordered by overall MOS.
#[derive(Debug, Clone, PartialEq)]
pub struct MosGrid {
    pub systems: Vec<String>,
    pub system_means: Vec<f64>,
    pub system_counts: Vec<usize>,
    pub mos_edges: Vec<f64>,
    /// `cells[s][b]`: utterances of system `s` in MOS bin `b`.
    pub cells: Vec<Vec<usize>>,
    /// Utterances outside the edges, per system.
    pub outside: Vec<usize>,
}

pub fn system_mos_grid(records: &[UtteranceRecord], mos_edges: &[f64]) -> Result<MosGrid> {
    if records.is_empty() {
        return Err(Error::Validation("no utterances".into()));
    }
    check_edges(mos_edges)?;
    let mut by_system: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in records {
        by_system.entry(&r.system_id).or_default().push(r.mos);
    }
    let mut rows: Vec<(&str, f64, &Vec<f64>)> = by_system
        .iter()
        .map(|(s, v)| (*s, v.iter().sum::<f64>() / v.len() as f64, v))
        .collect();
    rows.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)));

    let mut grid = MosGrid {
        systems: Vec::with_capacity(rows.len()),
        system_means: Vec::with_capacity(rows.len()),
        system_counts: Vec::with_capacity(rows.len()),
        mos_edges: mos_edges.to_vec(),
        cells: Vec::with_capacity(rows.len()),
        outside: Vec::with_capacity(rows.len()),
    };
    for (sys, mean, values) in rows {
        let mut cells = vec![0; mos_edges.len() - 1];
        let mut outside = 0;
        for v in values {
            match locate(mos_edges, *v) {
                Bin::In(i) => cells[i] += 1,
                _ => outside += 1,
            }
        }
        grid.systems.push(sys.to_string());
        grid.system_means.push(mean);
        grid.system_counts.push(values.len());
        grid.cells.push(cells);
        grid.outside.push(outside);
    }
    Ok(grid)
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HalfWidth {
    pub value: f64,
    /// n < 30: the normal approximation is rough.
    pub small_sample: bool,
}

/// Two-sided normal-approximation confidence half-width z * s / sqrt(n).
pub fn sample_mean_half_width(std_unbiased: f64, n: usize, confidence: f64) -> Result<HalfWidth> {
    if n < 2 {
        return Err(Error::Undefined(format!(
            "half-width undefined for n = {n} (needs at least 2 utterances)"
        )));
    }
    if !(std_unbiased >= 0.0 && std_unbiased.is_finite()) {
        return Err(Error::Validation(format!("standard deviation {std_unbiased} invalid")));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::Validation(format!("confidence {confidence} outside (0, 1)")));
    }
    let z = normal_quantile(0.5 + confidence / 2.0);
    Ok(HalfWidth {
        value: z * std_unbiased / (n as f64).sqrt(),
        small_sample: n < SMALL_SAMPLE_N,
    })
}

/// Mean, unbiased spread and standard error of one system in one split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleSummary {
    pub mean: f64,
    pub std_unbiased: Option<f64>,
    pub count: usize,
    pub standard_error: Option<f64>,
}

impl SampleSummary {
    pub fn from_values(values: &[f64]) -> SampleSummary {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std_unbiased = (n >= 2).then(|| {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        });
        SampleSummary {
            mean,
            std_unbiased,
            count: n,
            standard_error: std_unbiased.map(|s| s / (n as f64).sqrt()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemDiagnostics {
    pub system_id: String,
    pub split: SampleSummary,
    pub reference: Option<SampleSummary>,
    /// `split.mean - reference.mean` when the system exists in both.
    pub discrepancy: Option<f64>,
    pub flagged_small: bool,
}

fn mos_by_system(records: &[UtteranceRecord]) -> BTreeMap<&str, Vec<f64>> {
    let mut out: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in records {
        out.entry(&r.system_id).or_default().push(r.mos);
    }
    out
}

/// Diagnostics for every system of `records`, ordered by system id.
/// `flagged_small` marks systems with fewer than `min_count` utterances.
pub fn flag_small_systems(
    records: &[UtteranceRecord],
    min_count: usize,
    reference: Option<&[UtteranceRecord]>,
) -> Result<Vec<SystemDiagnostics>> {
    if min_count == 0 {
        return Err(Error::Config("min_count must be at least 1".into()));
    }
    let reference = reference.map(mos_by_system);
    Ok(mos_by_system(records)
        .into_iter()
        .map(|(sys, values)| {
            let split = SampleSummary::from_values(&values);
            let reference = reference
                .as_ref()
                .and_then(|r| r.get(sys))
                .map(|v| SampleSummary::from_values(v));
            SystemDiagnostics {
                system_id: sys.to_string(),
                discrepancy: reference.map(|r| split.mean - r.mean),
                flagged_small: split.count < min_count,
                split,
                reference,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionMos {
    pub id: String,
    pub mos: f64,
    pub utterances: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceReport {
    /// Systems of `other` absent from the reference split.
    pub unseen_systems: Vec<ConditionMos>,
    pub unseen_rater_groups: Vec<ConditionMos>,
    pub reference_mos: f64,
    pub other_mos: f64,
    /// Utterance-weighted MOS over `other`'s utterances of seen / unseen systems.
    pub seen_system_mos: Option<f64>,
    pub unseen_system_mos: Option<f64>,
    pub seen_group_mos: Option<f64>,
    pub unseen_group_mos: Option<f64>,
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn conditions<'a>(
    records: &'a [UtteranceRecord],
    key: impl Fn(&'a UtteranceRecord) -> &'a str,
    unseen: &HashSet<&str>,
) -> Vec<ConditionMos> {
    let mut by: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in records {
        let k = key(r);
        if unseen.contains(k) {
            by.entry(k).or_default().push(r.mos);
        }
    }
    by.into_iter()
        .map(|(id, v)| ConditionMos {
            id: id.to_string(),
            mos: v.iter().sum::<f64>() / v.len() as f64,
            utterances: v.len(),
        })
        .collect()
}

pub fn split_divergence(reference: &[UtteranceRecord], other: &[UtteranceRecord]) -> Result<DivergenceReport> {
    if reference.is_empty() || other.is_empty() {
        return Err(Error::Validation("divergence needs two non-empty splits".into()));
    }
    let ref_systems: HashSet<&str> = reference.iter().map(|r| r.system_id.as_str()).collect();
    let ref_groups: HashSet<&str> = reference.iter().map(|r| r.rater_group_id.as_str()).collect();
    let unseen_sys: HashSet<&str> = other
        .iter()
        .map(|r| r.system_id.as_str())
        .filter(|s| !ref_systems.contains(s))
        .collect();
    let unseen_grp: HashSet<&str> = other
        .iter()
        .map(|r| r.rater_group_id.as_str())
        .filter(|g| !ref_groups.contains(g))
        .collect();

    Ok(DivergenceReport {
        unseen_systems: conditions(other, |r| &r.system_id, &unseen_sys),
        unseen_rater_groups: conditions(other, |r| &r.rater_group_id, &unseen_grp),
        reference_mos: mean_of(reference.iter().map(|r| r.mos)).unwrap(),
        other_mos: mean_of(other.iter().map(|r| r.mos)).unwrap(),
        seen_system_mos: mean_of(
            other
                .iter()
                .filter(|r| !unseen_sys.contains(r.system_id.as_str()))
                .map(|r| r.mos),
        ),
        unseen_system_mos: mean_of(
            other
                .iter()
                .filter(|r| unseen_sys.contains(r.system_id.as_str()))
                .map(|r| r.mos),
        ),
        seen_group_mos: mean_of(
            other
                .iter()
                .filter(|r| !unseen_grp.contains(r.rater_group_id.as_str()))
                .map(|r| r.mos),
        ),
        unseen_group_mos: mean_of(
            other
                .iter()
                .filter(|r| unseen_grp.contains(r.rater_group_id.as_str()))
                .map(|r| r.mos),
        ),
    })
}

/// Drops utterances whose rater group has no slot in `vocab`.
pub fn keep_known_raters(records: &[UtteranceRecord], vocab: &MetadataVocab) -> Vec<UtteranceRecord> {
    records
        .iter()
        .filter(|r| vocab.contains(CategoryKind::RaterGroup, &r.rater_group_id))
        .cloned()
        .collect()
}

/// Systems present in `records`, as a set.
pub fn system_set(records: &[UtteranceRecord]) -> BTreeSet<&str> {
    records.iter().map(|r| r.system_id.as_str()).collect()
}
