//! Seed-averaged tables, hyperparameter sweeps and the gap/FPR analysis.

use std::collections::BTreeMap;
use std::io::Write;

use super::{fmt_f64, run_all, with_pool, ExperimentConfig, SummaryRow};
use crate::adapt::gap_fpr_correlation;
use crate::error::Result;
use crate::metrics::h_score;

/// Seed-averaged metrics of one (method, scenario, segment).
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub scenario: String,
    pub segment: usize,
    pub seeds: usize,
    pub acc: f64,
    pub fpr95: f64,
    pub auroc: f64,
    /// Recomputed from the averaged columns.
    pub h_score: f64,
}

pub fn report_rows(summary: &[SummaryRow]) -> Vec<ReportRow> {
    let mut groups: BTreeMap<(String, String, usize), Vec<&SummaryRow>> = BTreeMap::new();
    for r in summary {
        groups
            .entry((r.method.clone(), r.scenario.clone(), r.segment))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((method, scenario, segment), rows)| {
            let n = rows.len() as f64;
            let mean = |f: fn(&SummaryRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
            let (acc, fpr95, auroc) = (mean(|r| r.acc), mean(|r| r.fpr95), mean(|r| r.auroc));
            ReportRow {
                method,
                scenario,
                segment,
                seeds: rows.len(),
                acc,
                fpr95,
                auroc,
                h_score: h_score(acc, fpr95, auroc).0,
            }
        })
        .collect()
}

/// Percentages with two decimals, columns Acc, FPR95, AUROC, H-score.
pub fn write_report(rows: &[ReportRow], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "method", "scenario", "segment", "seeds", "acc", "fpr95", "auroc", "h_score",
    ])?;
    let pct = |v: f64| format!("{:.2}", 100.0 * v);
    for r in rows {
        out.write_record([
            r.method.clone(),
            r.scenario.clone(),
            r.segment.to_string(),
            r.seeds.to_string(),
            pct(r.acc),
            pct(r.fpr95),
            pct(r.auroc),
            pct(r.h_score),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Values to try per axis; an empty axis keeps the config's value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepGrid {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma1: Vec<f64>,
    pub gamma2: Vec<f64>,
    pub unknown_ratio: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub alpha: f64,
    pub beta: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub unknown_ratio: f64,
    pub method: String,
    pub seed: u64,
    pub acc: f64,
    pub fpr95: f64,
    pub auroc: f64,
    pub h_score: f64,
}

fn axis(values: &[f64], fallback: f64) -> Vec<f64> {
    if values.is_empty() {
        vec![fallback]
    } else {
        values.to_vec()
    }
}

/// Cartesian product of the grid. Loss values apply to every method.
pub fn run_sweep(cfg: &ExperimentConfig, grid: &SweepGrid, jobs: usize) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let base = cfg.methods[0].loss.clone();
    let mut points = Vec::new();
    for &a in &axis(&grid.alpha, base.alpha) {
        for &b in &axis(&grid.beta, base.beta) {
            for &g1 in &axis(&grid.gamma1, base.gamma1) {
                for &g2 in &axis(&grid.gamma2, base.gamma2) {
                    for &u in &axis(&grid.unknown_ratio, cfg.scenario.unknown_ratio) {
                        points.push([a, b, g1, g2, u]);
                    }
                }
            }
        }
    }
    with_pool(jobs, || {
        let mut rows = Vec::new();
        for [a, b, g1, g2, u] in points {
            let mut c = cfg.clone();
            c.scenario.unknown_ratio = u;
            for m in &mut c.methods {
                m.loss.alpha = a;
                m.loss.beta = b;
                m.loss.gamma1 = g1;
                m.loss.gamma2 = g2;
            }
            for r in run_all(&c)? {
                let m = r.report.overall;
                rows.push(SweepRow {
                    alpha: a,
                    beta: b,
                    gamma1: g1,
                    gamma2: g2,
                    unknown_ratio: u,
                    method: r.method,
                    seed: r.seed,
                    acc: m.acc,
                    fpr95: m.fpr95,
                    auroc: m.auroc,
                    h_score: m.h_score,
                });
            }
        }
        Ok(rows)
    })?
}

pub fn write_sweep(rows: &[SweepRow], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "alpha",
        "beta",
        "gamma1",
        "gamma2",
        "unknown_ratio",
        "method",
        "seed",
        "acc",
        "fpr95",
        "auroc",
        "h_score",
    ])?;
    for r in rows {
        out.write_record([
            fmt_f64(r.alpha),
            fmt_f64(r.beta),
            fmt_f64(r.gamma1),
            fmt_f64(r.gamma2),
            fmt_f64(r.unknown_ratio),
            r.method.clone(),
            r.seed.to_string(),
            fmt_f64(r.acc),
            fmt_f64(r.fpr95),
            fmt_f64(r.auroc),
            fmt_f64(r.h_score),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Whole-stream entropy gap and FPR95 of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisPoint {
    pub severity_scale: f64,
    pub method: String,
    pub seed: u64,
    pub entropy_gap: f64,
    pub fpr95: f64,
}

/// Runs the config at several shift strengths (every domain severity
/// multiplied by each scale) and correlates entropy gap with `1 - FPR95`.
pub fn run_analysis(cfg: &ExperimentConfig, scales: &[f64], jobs: usize) -> Result<(Vec<AnalysisPoint>, Option<f64>)> {
    cfg.validate()?;
    let points = with_pool(jobs, || {
        let mut points = Vec::new();
        for &s in scales {
            let mut c = cfg.clone();
            for d in &mut c.scenario.domains {
                d.severity.iter_mut().for_each(|v| *v *= s);
            }
            for r in run_all(&c)? {
                points.push(AnalysisPoint {
                    severity_scale: s,
                    method: r.method,
                    seed: r.seed,
                    entropy_gap: r.report.overall_gap,
                    fpr95: r.report.overall.fpr95,
                });
            }
        }
        Ok::<_, crate::Error>(points)
    })??;
    let pairs: Vec<(f64, f64)> = points.iter().map(|p| (p.entropy_gap, p.fpr95)).collect();
    Ok((points, gap_fpr_correlation(&pairs)))
}

pub fn write_analysis(points: &[AnalysisPoint], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["severity_scale", "method", "seed", "entropy_gap", "fpr95"])?;
    for p in points {
        out.write_record([
            fmt_f64(p.severity_scale),
            p.method.clone(),
            p.seed.to_string(),
            fmt_f64(p.entropy_gap),
            fmt_f64(p.fpr95),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: &str, seed: u64, acc: f64, fpr95: f64, auroc: f64) -> SummaryRow {
        SummaryRow {
            method: method.into(),
            scenario: "s".into(),
            seed,
            segment: 0,
            acc,
            fpr95,
            auroc,
            h_score: h_score(acc, fpr95, auroc).0,
            entropy_gap: 0.0,
            eta: 0.5,
        }
    }

    #[test]
    fn report_averages_then_recomputes() {
        let rows = report_rows(&[row("aeo", 0, 0.6, 0.2, 0.9), row("aeo", 1, 0.8, 0.4, 0.7)]);
        assert_eq!(rows.len(), 1);
        let r = &rows[0];
        assert_eq!(r.seeds, 2);
        assert!((r.acc - 0.7).abs() < 1e-15);
        assert_eq!(r.h_score, h_score(r.acc, r.fpr95, r.auroc).0);
    }

    #[test]
    fn report_csv_is_in_percent() {
        let rows = report_rows(&[row("source", 0, 0.4854, 0.8579, 0.5831)]);
        let mut buf = Vec::new();
        write_report(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().nth(1).unwrap(), "source,s,0,1,48.54,85.79,58.31,27.75");
    }

    #[test]
    fn empty_axis_uses_config_value() {
        assert_eq!(axis(&[], 0.8), vec![0.8]);
        assert_eq!(axis(&[0.1, 0.2], 0.8), vec![0.1, 0.2]);
    }
}
