//! Markdown and CSV renderings of the split diagnostics.

use std::fmt::Write as _;

use super::{sample_mean_half_width, DivergenceReport, Histogram, MosGrid, SystemDiagnostics};
use crate::error::{Error, Result};
use crate::metrics::csv_field;

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"))
}

fn bin_label(edges: &[f64], i: usize) -> String {
    let close = if i + 2 == edges.len() { "]" } else { ")" };
    format!("[{}, {}{close}", edges[i], edges[i + 1])
}

pub fn histogram_csv(h: &Histogram) -> String {
    let mut out = String::from("bin_lo,bin_hi,count\n");
    for (i, c) in h.counts.iter().enumerate() {
        let _ = writeln!(out, "{},{},{c}", h.edges[i], h.edges[i + 1]);
    }
    if h.underflow > 0 {
        let _ = writeln!(out, "-inf,{},{}", h.edges[0], h.underflow);
    }
    if h.overflow > 0 {
        let _ = writeln!(out, "{},inf,{}", h.edges[h.edges.len() - 1], h.overflow);
    }
    out
}

pub fn histogram_markdown(h: &Histogram) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "## {}\n", h.title);
    let _ = writeln!(out, "| {} | {} |\n|---|---:|", h.x_label, h.y_label);
    for (i, c) in h.counts.iter().enumerate() {
        let _ = writeln!(out, "| {} | {c} |", bin_label(&h.edges, i));
    }
    if h.underflow + h.overflow > 0 {
        let _ = writeln!(out, "\n{} below range, {} above range.", h.underflow, h.overflow);
    }
    out
}

pub fn grid_csv(g: &MosGrid) -> String {
    let mut out = String::from("system_id,system_mos,utterances");
    for i in 0..g.mos_edges.len() - 1 {
        let _ = write!(out, ",bin_{}_{}", g.mos_edges[i], g.mos_edges[i + 1]);
    }
    out.push_str(",outside\n");
    for (s, sys) in g.systems.iter().enumerate() {
        let _ = write!(out, "{},{:.6},{}", csv_field(sys), g.system_means[s], g.system_counts[s]);
        for c in &g.cells[s] {
            let _ = write!(out, ",{c}");
        }
        let _ = writeln!(out, ",{}", g.outside[s]);
    }
    out
}

const DIAG_HEADER: &str = "system_id,n,mean,std,standard_error,half_width,small_sample,flagged,ref_n,ref_mean,discrepancy";

struct DiagRow {
    half_width: Option<f64>,
    small_sample: bool,
}

fn diag_row(d: &SystemDiagnostics, confidence: f64) -> Result<DiagRow> {
    match d.split.std_unbiased {
        Some(s) => {
            let hw = sample_mean_half_width(s, d.split.count, confidence)?;
            Ok(DiagRow { half_width: Some(hw.value), small_sample: hw.small_sample })
        }
        None => Ok(DiagRow { half_width: None, small_sample: true }),
    }
}

pub fn diagnostics_csv(diags: &[SystemDiagnostics], confidence: f64) -> Result<String> {
    let mut out = format!("{DIAG_HEADER}\n");
    for d in diags {
        let row = diag_row(d, confidence)?;
        let _ = writeln!(
            out,
            "{},{},{:.6},{},{},{},{},{},{},{},{}",
            csv_field(&d.system_id),
            d.split.count,
            d.split.mean,
            opt(d.split.std_unbiased),
            opt(d.split.standard_error),
            opt(row.half_width),
            row.small_sample,
            d.flagged_small,
            d.reference.map_or_else(|| "NA".into(), |r| r.count.to_string()),
            opt(d.reference.map(|r| r.mean)),
            opt(d.discrepancy),
        );
    }
    Ok(out)
}

pub fn diagnostics_markdown(diags: &[SystemDiagnostics], confidence: f64, min_count: usize) -> Result<String> {
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::Config(format!("confidence {confidence} outside (0, 1)")));
    }
    let mut out = String::new();
    let _ = writeln!(out, "## System sample means ({:.0}% half-width)\n", confidence * 100.0);
    out.push_str("| system | n | mean | std | half-width | reference n | reference mean | discrepancy | flag |\n");
    out.push_str("|---|---:|---:|---:|---:|---:|---:|---:|---|\n");
    let mut flagged = 0;
    for d in diags {
        let row = diag_row(d, confidence)?;
        let mut flag = String::new();
        if d.flagged_small {
            flagged += 1;
            flag.push_str("small");
        }
        if row.small_sample && row.half_width.is_some() {
            if !flag.is_empty() {
                flag.push(' ');
            }
            flag.push_str("approx");
        }
        let _ = writeln!(
            out,
            "| {} | {} | {:.3} | {} | {} | {} | {} | {} | {} |",
            d.system_id,
            d.split.count,
            d.split.mean,
            d.split.std_unbiased.map_or("NA".into(), |v| format!("{v:.3}")),
            row.half_width.map_or("NA".into(), |v| format!("{v:.3}")),
            d.reference.map_or("NA".into(), |r| r.count.to_string()),
            d.reference.map_or("NA".into(), |r| format!("{:.3}", r.mean)),
            d.discrepancy.map_or("NA".into(), |v| format!("{v:+.3}")),
            flag,
        );
    }
    let _ = writeln!(
        out,
        "\n{flagged} of {} systems have fewer than {min_count} utterances. \"approx\" marks half-widths from fewer than 30 utterances.",
        diags.len()
    );
    Ok(out)
}

pub fn divergence_markdown(name: &str, reference: &str, d: &DivergenceReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "## {name} vs {reference}\n");
    let _ = writeln!(out, "- MOS: {reference} {:.3}, {name} {:.3}", d.reference_mos, d.other_mos);
    let _ = writeln!(
        out,
        "- systems absent from {reference}: {} (MOS {} vs seen {})",
        d.unseen_systems.len(),
        d.unseen_system_mos.map_or("NA".into(), |v| format!("{v:.3}")),
        d.seen_system_mos.map_or("NA".into(), |v| format!("{v:.3}")),
    );
    let _ = writeln!(
        out,
        "- rater groups absent from {reference}: {} (MOS {} vs seen {})",
        d.unseen_rater_groups.len(),
        d.unseen_group_mos.map_or("NA".into(), |v| format!("{v:.3}")),
        d.seen_group_mos.map_or("NA".into(), |v| format!("{v:.3}")),
    );
    for (label, list) in [("system", &d.unseen_systems), ("rater group", &d.unseen_rater_groups)] {
        if list.is_empty() {
            continue;
        }
        let _ = writeln!(out, "\n| unseen {label} | utterances | MOS |\n|---|---:|---:|");
        for c in list {
            let _ = writeln!(out, "| {} | {} | {:.3} |", c.id, c.utterances, c.mos);
        }
    }
    out
}

pub fn divergence_csv(d: &DivergenceReport) -> String {
    let mut out = String::from("kind,id,utterances,mos\n");
    for (kind, list) in [("system", &d.unseen_systems), ("rater_group", &d.unseen_rater_groups)] {
        for c in list {
            let _ = writeln!(out, "{kind},{},{},{:.6}", csv_field(&c.id), c.utterances, c.mos);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{flag_small_systems, Histogram};
    use crate::data::UtteranceRecord;

    fn rec(utt: usize, sys: &str, mos: f64) -> UtteranceRecord {
        UtteranceRecord {
            utterance_id: format!("u{utt}"),
            system_id: sys.into(),
            rater_group_id: "g".into(),
            mos,
            rating_count: 8,
        }
    }

    #[test]
    fn histogram_tables() {
        let h = Histogram::from_values([1.0, 2.0, 9.0], &[1.0, 2.0, 3.0]).unwrap();
        let csv = histogram_csv(&h);
        assert_eq!(csv, "bin_lo,bin_hi,count\n1,2,1\n2,3,1\n3,inf,1\n");
        assert!(histogram_markdown(&h).contains("| [2, 3] | 1 |"));
    }

    #[test]
    fn singleton_system_has_na_spread() {
        let recs = [rec(0, "a", 3.0), rec(1, "b", 2.0), rec(2, "b", 4.0)];
        let diags = flag_small_systems(&recs, 10, None).unwrap();
        let csv = diagnostics_csv(&diags, 0.95).unwrap();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("a,1,3.000000,NA,NA,NA,true,true"));
        assert!(lines[2].starts_with("b,2,3.000000,1.414214,1.000000,1.959964,true,true"));
    }
}
