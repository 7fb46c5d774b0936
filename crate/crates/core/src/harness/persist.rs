//! Output files. Every float is written with 17 significant digits, which
//! is enough to reparse the exact bit pattern.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::RunResult;
use crate::adapt::BatchRecord;
use crate::error::Result;
use crate::metrics::histogram;

pub const HISTOGRAM_BINS: usize = 50;

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

struct SigDigits;

impl serde_json::ser::Formatter for SigDigits {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        writer.write_all(fmt_f64(value).as_bytes())
    }
}

/// Compact JSON with every float at 17 significant digits.
pub fn to_json_line<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, SigDigits);
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(buf).expect("serde_json emits utf-8"))
}

/// One line of `records.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordLine {
    pub method: String,
    pub scenario: String,
    pub seed: u64,
    #[serde(flatten)]
    pub record: BatchRecord,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub scenario: String,
    pub seed: u64,
    pub segment: usize,
    pub acc: f64,
    pub fpr95: f64,
    pub auroc: f64,
    pub h_score: f64,
    pub entropy_gap: f64,
    pub eta: f64,
}

const SUMMARY_HEADER: [&str; 10] = [
    "method",
    "scenario",
    "seed",
    "segment",
    "acc",
    "fpr95",
    "auroc",
    "h_score",
    "entropy_gap",
    "eta",
];

/// One row per (run, segment), in canonical order.
pub fn summary_rows(runs: &[RunResult]) -> Vec<SummaryRow> {
    let mut rows: Vec<SummaryRow> = runs
        .iter()
        .flat_map(|r| {
            r.report.segments.iter().map(move |s| SummaryRow {
                method: r.method.clone(),
                scenario: r.scenario.clone(),
                seed: r.seed,
                segment: s.segment,
                acc: s.metrics.acc,
                fpr95: s.metrics.fpr95,
                auroc: s.metrics.auroc,
                h_score: s.metrics.h_score,
                entropy_gap: s.entropy_gap,
                eta: r.eta,
            })
        })
        .collect();
    rows.sort_by(|a, b| (&a.method, &a.scenario, a.seed, a.segment).cmp(&(&b.method, &b.scenario, b.seed, b.segment)));
    rows
}

pub fn write_summary(rows: &[SummaryRow], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(SUMMARY_HEADER)?;
    for r in rows {
        out.write_record([
            r.method.clone(),
            r.scenario.clone(),
            r.seed.to_string(),
            r.segment.to_string(),
            fmt_f64(r.acc),
            fmt_f64(r.fpr95),
            fmt_f64(r.auroc),
            fmt_f64(r.h_score),
            fmt_f64(r.entropy_gap),
            fmt_f64(r.eta),
        ])?;
    }
    out.flush()?;
    Ok(())
}

fn parse_field<T: std::str::FromStr>(rec: &csv::StringRecord, idx: usize, line: u64) -> Result<T> {
    let raw = rec.get(idx).unwrap_or("");
    raw.parse().map_err(|_| {
        crate::Error::Config(format!(
            "summary line {line}: bad {} value {raw:?}",
            SUMMARY_HEADER[idx]
        ))
    })
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header = rdr.headers()?.clone();
    if header.iter().ne(SUMMARY_HEADER) {
        return Err(crate::Error::Config(format!(
            "{}:1: expected header {}",
            path.display(),
            SUMMARY_HEADER.join(",")
        )));
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i as u64 + 2;
        rows.push(SummaryRow {
            method: parse_field(&rec, 0, line)?,
            scenario: parse_field(&rec, 1, line)?,
            seed: parse_field(&rec, 2, line)?,
            segment: parse_field(&rec, 3, line)?,
            acc: parse_field(&rec, 4, line)?,
            fpr95: parse_field(&rec, 5, line)?,
            auroc: parse_field(&rec, 6, line)?,
            h_score: parse_field(&rec, 7, line)?,
            entropy_gap: parse_field(&rec, 8, line)?,
            eta: parse_field(&rec, 9, line)?,
        });
    }
    Ok(rows)
}

pub fn read_records(path: &Path) -> Result<Vec<RecordLine>> {
    let file = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in file.lines() {
        let line = line?;
        if !line.is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

fn write_records(runs: &[RunResult], w: impl Write) -> Result<()> {
    let mut w = BufWriter::new(w);
    for r in runs {
        for rec in &r.records {
            let line = RecordLine {
                method: r.method.clone(),
                scenario: r.scenario.clone(),
                seed: r.seed,
                record: rec.clone(),
            };
            writeln!(w, "{}", to_json_line(&line)?)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_histograms(runs: &[RunResult], num_known: usize, w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["method", "scenario", "seed", "bin", "lo", "hi", "known", "unknown"])?;
    for r in runs {
        let (mut known, mut unknown) = (Vec::new(), Vec::new());
        for rec in &r.records {
            for (&l, &s) in rec.labels.iter().zip(&rec.scores) {
                if l < num_known {
                    known.push(s);
                } else {
                    unknown.push(s);
                }
            }
        }
        let all = known.iter().chain(&unknown);
        let lo = all.clone().cloned().fold(f64::INFINITY, f64::min);
        let hi = all.cloned().fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() || !hi.is_finite() {
            continue;
        }
        let hk = histogram(&known, lo, hi, HISTOGRAM_BINS);
        let hu = histogram(&unknown, lo, hi, HISTOGRAM_BINS);
        let width = (hi - lo) / HISTOGRAM_BINS as f64;
        for b in 0..HISTOGRAM_BINS {
            let edge_hi = if b + 1 == HISTOGRAM_BINS {
                hi
            } else {
                lo + width * (b + 1) as f64
            };
            out.write_record([
                r.method.clone(),
                r.scenario.clone(),
                r.seed.to_string(),
                b.to_string(),
                fmt_f64(lo + width * b as f64),
                fmt_f64(edge_hi),
                hk[b].to_string(),
                hu[b].to_string(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

fn write_trace(runs: &[RunResult], window: usize, w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["method", "scenario", "seed", "window", "first_batch", "entropy_gap"])?;
    for r in runs {
        for (i, g) in r.report.gap_trace.iter().enumerate() {
            out.write_record([
                r.method.clone(),
                r.scenario.clone(),
                r.seed.to_string(),
                i.to_string(),
                (i * window).to_string(),
                fmt_f64(*g),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Writes `records.jsonl`, `summary.csv`, `histograms.csv` and `trace.csv`
/// into `dir`. `runs` must already be in canonical order.
pub fn persist(runs: &[RunResult], num_known: usize, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let path = |name: &str| dir.join(name);
    write_records(runs, File::create(path("records.jsonl"))?)?;
    write_summary(&summary_rows(runs), File::create(path("summary.csv"))?)?;
    write_histograms(runs, num_known, File::create(path("histograms.csv"))?)?;
    write_trace(runs, crate::adapt::DEFAULT_GAP_WINDOW, File::create(path("trace.csv"))?)?;
    Ok(["records.jsonl", "summary.csv", "histograms.csv", "trace.csv"]
        .iter()
        .map(|n| path(n))
        .collect())
}
