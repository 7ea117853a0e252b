//! CSV reports: comma separated, header row, `.` decimals, LF endings.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use randdisc::certify::Certificate;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::experiment::{output_error, ExperimentOutput};
use crate::spec::ExperimentSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub experiment: String,
    pub defense: String,
    pub epsilon: f64,
    pub eta: f64,
    pub clean_accuracy: f64,
    pub robust_accuracy: f64,
    pub certified_accuracy: Option<f64>,
    pub seed: u64,
}

/// One certificate per image and budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificateRow {
    pub experiment: String,
    pub defense: String,
    pub image: usize,
    pub epsilon: f64,
    pub u_kl: f64,
    pub cluster_term: f64,
    pub margin: f64,
    pub residual: f64,
    pub certified: bool,
    pub vote_confidence: f64,
    pub votes: usize,
    pub margin_error: f64,
    pub seed: u64,
}

impl CertificateRow {
    pub fn new(experiment: &str, defense: &str, image: usize, epsilon: f64, c: &Certificate, seed: u64) -> Self {
        Self {
            experiment: experiment.to_string(),
            defense: defense.to_string(),
            image,
            epsilon,
            u_kl: c.u_kl,
            cluster_term: c.cluster_term,
            margin: c.margin,
            residual: c.residual,
            certified: c.certified,
            vote_confidence: c.vote_confidence,
            votes: c.votes,
            margin_error: c.margin_error,
            seed,
        }
    }
}

/// Wall-clock cost of one (defense, ε) cell; kept out of the main report so
/// that report stays byte-identical across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub defense: String,
    pub epsilon: f64,
    pub wall_time_s: f64,
}

fn writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new())
}

fn finish(w: csv::Writer<Vec<u8>>) -> Vec<u8> {
    w.into_inner().expect("writing to memory cannot fail")
}

/// Serializes rows with a header line, even when there are no rows.
pub fn to_csv<T: Serialize>(rows: &[T], header: &[&str]) -> Vec<u8> {
    let mut w = writer();
    if rows.is_empty() {
        w.write_record(header).expect("in-memory write");
    }
    for r in rows {
        w.serialize(r).expect("rows serialize");
    }
    finish(w)
}

pub const REPORT_HEADER: [&str; 8] = [
    "experiment",
    "defense",
    "epsilon",
    "eta",
    "clean_accuracy",
    "robust_accuracy",
    "certified_accuracy",
    "seed",
];

pub fn report_csv(rows: &[ReportRow]) -> Vec<u8> {
    to_csv(rows, &REPORT_HEADER)
}

pub fn read_report(path: impl AsRef<Path>) -> Result<Vec<ReportRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| output_error(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<ReportRow>, _>>()
        .map_err(|e| output_error(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| output_error(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| output_error(path, e))
}

/// `path` with `suffix` appended to its file stem, e.g.
/// `out.csv` → `out.timing.csv`.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    path.with_file_name(format!("{stem}.{suffix}"))
}

/// Writes the report, the resolved config, the timings and (when any
/// certificates were computed) the per-image certificates.
pub fn write_outputs(spec: &ExperimentSpec, out: &ExperimentOutput) -> Result<Vec<PathBuf>> {
    let report = spec.output.clone();
    let config = sidecar(&report, "config.toml");
    let timing = sidecar(&report, "timing.csv");
    write(&report, &report_csv(&out.rows))?;
    write(&config, spec.to_toml().as_bytes())?;
    write(&timing, &to_csv(&out.timings, &["defense", "epsilon", "wall_time_s"]))?;
    let mut written = vec![report, config, timing];
    if !out.certificates.is_empty() {
        let certs = sidecar(&spec.output, "certificates.csv");
        write(&certs, &to_csv(&out.certificates, &[]))?;
        written.push(certs);
    }
    Ok(written)
}

/// A named CSV table for plotting.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotTable {
    pub name: String,
    pub csv: Vec<u8>,
}

fn format_number(v: f64) -> String {
    let mut w = writer();
    w.serialize([v]).expect("in-memory write");
    String::from_utf8(finish(w))
        .expect("CSV is UTF-8")
        .trim_end()
        .to_string()
}

/// Plot tables: `accuracy_vs_epsilon` with one robust-accuracy column per
/// defense and one row per ε, and `certified_vs_empirical_<defense>` with
/// columns `(epsilon, certified_acc, empirical_acc)` for every defense
/// that carries certificates.
pub fn plot_tables(rows: &[ReportRow]) -> Result<Vec<PlotTable>> {
    if rows.is_empty() {
        return Err(HarnessError::Usage("no report rows to plot".into()));
    }
    let mut defenses: Vec<&str> = Vec::new();
    for r in rows {
        if !defenses.contains(&r.defense.as_str()) {
            defenses.push(&r.defense);
        }
    }
    let mut by_eps: BTreeMap<u64, BTreeMap<&str, f64>> = BTreeMap::new();
    for r in rows {
        // non-negative floats order like their bit patterns
        by_eps
            .entry(r.epsilon.to_bits())
            .or_default()
            .insert(&r.defense, r.robust_accuracy);
    }
    let mut w = writer();
    let mut header = vec!["epsilon".to_string()];
    header.extend(defenses.iter().map(|d| d.to_string()));
    w.write_record(&header).expect("in-memory write");
    for (eps, cells) in &by_eps {
        let mut rec = vec![format_number(f64::from_bits(*eps))];
        rec.extend(
            defenses
                .iter()
                .map(|d| cells.get(d).map(|v| format_number(*v)).unwrap_or_default()),
        );
        w.write_record(&rec).expect("in-memory write");
    }
    let mut tables = vec![PlotTable {
        name: "accuracy_vs_epsilon".into(),
        csv: finish(w),
    }];
    for d in &defenses {
        let certified: Vec<&ReportRow> = rows
            .iter()
            .filter(|r| r.defense == *d && r.certified_accuracy.is_some())
            .collect();
        if certified.is_empty() {
            continue;
        }
        let mut w = writer();
        w.write_record(["epsilon", "certified_acc", "empirical_acc"])
            .expect("in-memory write");
        for r in certified {
            w.write_record([
                format_number(r.epsilon),
                format_number(r.certified_accuracy.unwrap_or_default()),
                format_number(r.robust_accuracy),
            ])
            .expect("in-memory write");
        }
        tables.push(PlotTable {
            name: format!("certified_vs_empirical_{d}"),
            csv: finish(w),
        });
    }
    Ok(tables)
}

/// Writes [`plot_tables`] into `dir` as `<name>.csv`.
pub fn emit_plot_data(rows: &[ReportRow], dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    plot_tables(rows)?
        .into_iter()
        .map(|t| {
            let path = dir.join(format!("{}.csv", t.name));
            write(&path, &t.csv).map(|_| path)
        })
        .collect()
}
