use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One (site, task) line of a condition's results, shaped like the per-hospital
/// comparison tables. Relative columns compare against local training under
/// the same seed; privacy columns are filled for DP conditions only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub site_id: String,
    /// Admissions at the site across all partitions.
    pub n: usize,
    pub task: String,
    pub condition: String,
    pub auc: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub rel_auc: Option<f64>,
    pub rel_ci_low: Option<f64>,
    pub rel_ci_high: Option<f64>,
    pub significant: Option<bool>,
    /// ε spent by the whole training run.
    pub epsilon: Option<f64>,
    /// ε spent through the early-stopped round (federated_dp).
    pub epsilon_at_best: Option<f64>,
    pub sampling_ratio: Option<f64>,
    pub noise_multiplier: Option<f64>,
    pub clip_norm: Option<f64>,
    pub steps: Option<u64>,
    pub steps_at_best: Option<u64>,
    pub delta: Option<f64>,
}

pub const RESULTS_HEADER: [&str; 19] = [
    "site_id",
    "n",
    "task",
    "condition",
    "auc",
    "ci_low",
    "ci_high",
    "rel_auc",
    "rel_ci_low",
    "rel_ci_high",
    "significant",
    "epsilon",
    "epsilon_at_best",
    "sampling_ratio",
    "noise_multiplier",
    "clip_norm",
    "steps",
    "steps_at_best",
    "delta",
];

/// Per-epoch (central) or per-round (federated) validation trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub epoch_or_round: usize,
    pub epsilon: Option<f64>,
    pub val_auc: f64,
    pub site_id: String,
    pub task: String,
}

pub const TRAJECTORY_HEADER: [&str; 5] = ["epoch_or_round", "epsilon", "val_auc", "site_id", "task"];

pub const RESULTS_FILE: &str = "results.csv";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const SUMMARY_FILE: &str = "summary.txt";

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

fn write_table<R: Serialize>(path: &Path, header: &[&str], rows: &[R]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_io(path, e))?;
    w.write_record(header).map_err(|e| csv_io(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_table<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    r.deserialize()
        .map(|row| {
            row.map_err(|e| Error::Csv {
                path: path.into(),
                line: e.position().map_or(0, |p| p.line()),
                msg: e.to_string(),
            })
        })
        .collect()
}

pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<ReportRow>> {
    read_table(path.as_ref())
}

pub fn read_trajectory(path: impl AsRef<Path>) -> Result<Vec<TrajectoryRow>> {
    read_table(path.as_ref())
}

/// Scores of one or two models on labelled records, as read by `read_scores`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub record_ids: Vec<String>,
    pub labels: Vec<u8>,
    pub score_a: Vec<f64>,
    pub score_b: Option<Vec<f64>>,
}

#[derive(Deserialize)]
struct ScoreLine {
    record_id: String,
    label: u8,
    score_a: f64,
    #[serde(default)]
    score_b: Option<f64>,
}

/// Read a score file with columns `record_id, label, score_a[, score_b]`.
pub fn read_scores(path: impl AsRef<Path>) -> Result<ScoreTable> {
    let path = path.as_ref();
    let lines: Vec<ScoreLine> = read_table(path)?;
    let has_b = lines.first().is_some_and(|l| l.score_b.is_some());
    let mut table = ScoreTable {
        record_ids: Vec::with_capacity(lines.len()),
        labels: Vec::with_capacity(lines.len()),
        score_a: Vec::with_capacity(lines.len()),
        score_b: has_b.then(Vec::new),
    };
    for (i, l) in lines.into_iter().enumerate() {
        let bad = |msg: String| Error::Csv { path: path.into(), line: i as u64 + 2, msg };
        if l.label > 1 {
            return Err(bad(format!("label {} is not 0 or 1", l.label)));
        }
        match (&mut table.score_b, l.score_b) {
            (Some(b), Some(v)) => b.push(v),
            (None, None) => {}
            _ => return Err(bad("score_b must be given on every row or none".into())),
        }
        table.record_ids.push(l.record_id);
        table.labels.push(l.label);
        table.score_a.push(l.score_a);
    }
    Ok(table)
}

/// Rows sorted by site, then task.
pub fn sort_rows(rows: &mut [ReportRow]) {
    rows.sort_by(|a, b| (&a.site_id, &a.task).cmp(&(&b.site_id, &b.task)));
}

pub fn sort_trajectory(rows: &mut [TrajectoryRow]) {
    rows.sort_by(|a, b| {
        (&a.site_id, &a.task, a.epoch_or_round).cmp(&(&b.site_id, &b.task, b.epoch_or_round))
    });
}

fn interval(v: f64, lo: f64, hi: f64) -> String {
    format!("{v:.3} ({lo:.3}, {hi:.3})")
}

/// Fixed-width text rendering of the results.
pub fn summary_table(rows: &[ReportRow], notes: &[String]) -> String {
    let mut s = String::new();
    for n in notes {
        let _ = writeln!(s, "# {n}");
    }
    let _ = writeln!(
        s,
        "{:<10} {:>6} {:<10} {:<13} {:<24} {:<26} {:>9}",
        "site", "N", "task", "condition", "AUC (95% CI)", "rel. AUC (95% CI)", "epsilon"
    );
    for r in rows {
        let rel = match (r.rel_auc, r.rel_ci_low, r.rel_ci_high) {
            (Some(d), Some(lo), Some(hi)) => {
                let mark = if r.significant == Some(true) { "*" } else { "" };
                format!("{}{mark}", interval(d, lo, hi))
            }
            _ => "-".to_string(),
        };
        let eps = r.epsilon.map_or("-".to_string(), |e| format!("{e:.3}"));
        let _ = writeln!(
            s,
            "{:<10} {:>6} {:<10} {:<13} {:<24} {:<26} {:>9}",
            r.site_id,
            r.n,
            r.task,
            r.condition,
            interval(r.auc, r.ci_low, r.ci_high),
            rel,
            eps
        );
    }
    s
}

/// Write `results.csv`, `trajectory.csv` and `summary.txt` under `outdir`,
/// returning the three paths.
pub fn emit_reports(
    rows: &[ReportRow],
    trajectory: &[TrajectoryRow],
    notes: &[String],
    outdir: impl AsRef<Path>,
) -> Result<[PathBuf; 3]> {
    let outdir = outdir.as_ref();
    fs::create_dir_all(outdir).map_err(|e| Error::io(outdir, e))?;
    let mut rows = rows.to_vec();
    sort_rows(&mut rows);
    let mut trajectory = trajectory.to_vec();
    sort_trajectory(&mut trajectory);

    let results = outdir.join(RESULTS_FILE);
    write_table(&results, &RESULTS_HEADER, &rows)?;
    let traj = outdir.join(TRAJECTORY_FILE);
    write_table(&traj, &TRAJECTORY_HEADER, &trajectory)?;
    let summary = outdir.join(SUMMARY_FILE);
    fs::write(&summary, summary_table(&rows, notes)).map_err(|e| Error::io(&summary, e))?;
    Ok([results, traj, summary])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(site: &str, task: &str) -> ReportRow {
        ReportRow {
            site_id: site.into(),
            n: 2000,
            task: task.into(),
            condition: "federated_dp".into(),
            auc: 0.71,
            ci_low: 0.65,
            ci_high: 0.77,
            rel_auc: Some(0.02),
            rel_ci_low: Some(-0.01),
            rel_ci_high: Some(0.05),
            significant: Some(false),
            epsilon: Some(3.25),
            epsilon_at_best: Some(1.5),
            sampling_ratio: Some(0.04),
            noise_multiplier: Some(1.0),
            clip_norm: Some(1.0),
            steps: Some(250),
            steps_at_best: Some(100),
            delta: Some(1e-5),
        }
    }

    #[test]
    fn empty_results_are_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let [results, traj, _] = emit_reports(&[], &[], &[], dir.path()).unwrap();
        let text = fs::read_to_string(results).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with("site_id,n,task,condition,auc"));
        assert_eq!(fs::read_to_string(traj).unwrap(), "epoch_or_round,epsilon,val_auc,site_id,task\n");
    }

    #[test]
    fn results_round_trip_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let mut plain = row("b", "mortality");
        plain.rel_auc = None;
        plain.rel_ci_low = None;
        plain.rel_ci_high = None;
        plain.significant = None;
        plain.epsilon = None;
        let rows = vec![row("b", "plos"), plain, row("a", "plos")];
        let [results, _, summary] = emit_reports(&rows, &[], &["note".into()], dir.path()).unwrap();
        let back = read_results(&results).unwrap();
        let mut want = rows.clone();
        sort_rows(&mut want);
        assert_eq!(back, want);
        assert_eq!(back[0].site_id, "a");
        assert_eq!(back[1].task, "mortality");
        let text = fs::read_to_string(summary).unwrap();
        assert!(text.starts_with("# note\n"));
        assert_eq!(text.lines().count(), 5);
    }

    #[test]
    fn trajectory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = vec![
            TrajectoryRow { epoch_or_round: 2, epsilon: Some(0.5), val_auc: 0.6, site_id: "s".into(), task: "plos".into() },
            TrajectoryRow { epoch_or_round: 1, epsilon: None, val_auc: 0.55, site_id: "s".into(), task: "plos".into() },
        ];
        let [_, traj, _] = emit_reports(&[], &t, &[], dir.path()).unwrap();
        let back = read_trajectory(traj).unwrap();
        assert_eq!(back[0], t[1]);
        assert_eq!(back[1], t[0]);
    }

    #[test]
    fn score_files() {
        let dir = tempfile::tempdir().unwrap();
        let two = dir.path().join("two.csv");
        fs::write(&two, "record_id,label,score_a,score_b\nr1,1,0.8,0.7\nr2,0,0.3,0.4\n").unwrap();
        let t = read_scores(&two).unwrap();
        assert_eq!(t.labels, vec![1, 0]);
        assert_eq!(t.score_b, Some(vec![0.7, 0.4]));
        let one = dir.path().join("one.csv");
        fs::write(&one, "record_id,label,score_a\nr1,1,0.8\n").unwrap();
        assert_eq!(read_scores(&one).unwrap().score_b, None);
        let ragged = dir.path().join("ragged.csv");
        fs::write(&ragged, "record_id,label,score_a,score_b\nr1,1,0.8,0.7\nr2,0,0.3,\n").unwrap();
        let err = read_scores(&ragged).unwrap_err();
        assert!(matches!(err, Error::Csv { line: 3, .. }), "{err}");
        let bad = dir.path().join("bad.csv");
        fs::write(&bad, "record_id,label,score_a\nr1,2,0.8\n").unwrap();
        assert!(read_scores(&bad).is_err());
    }

    #[test]
    fn unwritable_directory_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("occupied");
        fs::write(&file, "x").unwrap();
        let err = emit_reports(&[], &[], &[], &file).unwrap_err();
        assert!(err.to_string().contains("occupied"), "{err}");
    }
}
