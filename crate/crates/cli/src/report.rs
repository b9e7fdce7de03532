//! `report`: convergence and sweep charts plus a markdown summary from
//! one or more metrics CSV files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use ssda_core::trainer::MeanStd;

use crate::error::{invalid, CliError};
use crate::metrics::{self, fmt_sig, MetricsRow};
use crate::svg::{self, Bar, Series};
use crate::ReportArgs;

/// Metrics gathered from every input, grouped by run id in first-seen
/// order.
#[derive(Debug, Default)]
pub struct Collected {
    pub runs: Vec<(String, Vec<MetricsRow>)>,
    pub manifests: Vec<BTreeMap<String, String>>,
}

impl Collected {
    fn manifest(&self, run_id: &str) -> Option<&BTreeMap<String, String>> {
        self.manifests.iter().find(|m| m.get("run_id").map(String::as_str) == Some(run_id))
    }
}

/// Expands the patterns, sorted and without duplicates.
pub fn expand(patterns: &[String]) -> Result<Vec<PathBuf>, CliError> {
    let mut paths = Vec::new();
    for p in patterns {
        let entries = glob::glob(p).map_err(|e| CliError::Validation(format!("bad pattern `{p}`: {e}")))?;
        for entry in entries {
            let path = entry.map_err(|e| CliError::io(e.path().to_path_buf(), e.into()))?;
            if path.is_file() {
                paths.push(path);
            }
        }
    }
    paths.sort();
    paths.dedup();
    if paths.is_empty() {
        return invalid(format!("no runs found matching {}", patterns.join(" ")));
    }
    Ok(paths)
}

pub fn collect(paths: &[PathBuf]) -> Result<Collected, CliError> {
    let mut c = Collected::default();
    for path in paths {
        let file = metrics::read(path)?;
        c.manifests.extend(file.manifests);
        for row in file.rows {
            match c.runs.iter_mut().find(|(id, _)| *id == row.run_id) {
                Some((_, rows)) => rows.push(row),
                None => c.runs.push((row.run_id.clone(), vec![row])),
            }
        }
    }
    if c.runs.is_empty() {
        return invalid("no runs found: inputs hold no metric rows");
    }
    Ok(c)
}

/// Mean target accuracy over seeds at each evaluated epoch.
pub fn convergence(rows: &[MetricsRow]) -> Vec<(f64, f64)> {
    let mut by_epoch: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in rows {
        by_epoch.entry(r.record.epoch).or_default().push(r.record.target_accuracy);
    }
    by_epoch
        .into_iter()
        .map(|(e, accs)| (e as f64, MeanStd::of(&accs).mean))
        .collect()
}

/// Last-epoch value of `f` for each seed, ordered by seed.
pub fn finals(rows: &[MetricsRow], f: fn(&MetricsRow) -> f64) -> Vec<f64> {
    let mut last: BTreeMap<u64, &MetricsRow> = BTreeMap::new();
    for r in rows {
        let e = last.entry(r.record.seed).or_insert(r);
        if r.record.epoch >= e.record.epoch {
            *e = r;
        }
    }
    last.values().map(|r| f(r)).collect()
}

fn target(r: &MetricsRow) -> f64 {
    r.record.target_accuracy
}

fn pretext(r: &MetricsRow) -> f64 {
    r.record.pretext_accuracy
}

fn note(m: &BTreeMap<String, String>) -> String {
    m.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ")
}

/// Sweep bars keyed by the swept weight name, ordered by value.
pub fn sweeps(c: &Collected) -> BTreeMap<String, Vec<(f64, Bar)>> {
    let mut out: BTreeMap<String, Vec<(f64, Bar)>> = BTreeMap::new();
    for (id, rows) in &c.runs {
        let Some(m) = c.manifest(id) else { continue };
        let (Some(vary), Some(value)) = (m.get("sweep_vary"), m.get("sweep_value")) else {
            continue;
        };
        let Ok(value) = value.parse::<f64>() else { continue };
        let stats = MeanStd::of(&finals(rows, target));
        out.entry(vary.clone()).or_default().push((
            value,
            Bar {
                label: fmt_sig(value),
                mean: stats.mean,
                std: stats.std,
            },
        ));
    }
    for bars in out.values_mut() {
        bars.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    out
}

pub fn summary_markdown(c: &Collected) -> String {
    let mut s = String::from("# Run summary\n\n");
    s.push_str("| run | method | seeds | epochs | target acc (%) | pretext acc (%) |\n");
    s.push_str("|---|---|---:|---:|---:|---:|\n");
    for (id, rows) in &c.runs {
        let method = c.manifest(id).and_then(|m| m.get("method")).map_or("?", String::as_str);
        let t = MeanStd::of(&finals(rows, target));
        let p = MeanStd::of(&finals(rows, pretext));
        let seeds = finals(rows, target).len();
        let epochs = rows.iter().map(|r| r.record.epoch).max().unwrap_or(0);
        let _ = writeln!(
            s,
            "| {id} | {method} | {seeds} | {epochs} | {:.2} ± {:.2} | {:.2} ± {:.2} |",
            100.0 * t.mean,
            100.0 * t.std,
            100.0 * p.mean,
            100.0 * p.std
        );
    }
    let mut checksums: Vec<&str> = c.manifests.iter().filter_map(|m| m.get("dataset_checksum")).map(String::as_str).collect();
    checksums.sort_unstable();
    checksums.dedup();
    if !checksums.is_empty() {
        s.push_str("\nDatasets: ");
        s.push_str(&checksums.join(", "));
        s.push('\n');
    }
    s
}

fn write(path: PathBuf, text: &str) -> Result<PathBuf, CliError> {
    std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

pub fn report(a: &ReportArgs) -> Result<String, CliError> {
    let paths = expand(&a.runs)?;
    let c = collect(&paths)?;
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    let notes: Vec<String> = c.manifests.iter().map(note).collect();
    let mut written = Vec::new();

    let series: Vec<Series> = c
        .runs
        .iter()
        .map(|(id, rows)| Series {
            name: id.clone(),
            points: convergence(rows),
        })
        .collect();
    let chart = svg::line_chart("Convergence", "epoch", "target accuracy", &series, &notes);
    written.push(write(a.out.join("convergence.svg"), &chart)?);

    for (vary, bars) in sweeps(&c) {
        let bars: Vec<Bar> = bars.into_iter().map(|(_, b)| b).collect();
        let chart = svg::error_bar_chart(&format!("Target accuracy vs {vary}"), &vary, "target accuracy", &bars, &notes);
        written.push(write(a.out.join(format!("sweep_{vary}.svg")), &chart)?);
    }

    let summary = summary_markdown(&c);
    written.push(write(a.out.join("summary.md"), &summary)?);
    let mut out = String::new();
    for p in &written {
        let _ = writeln!(out, "wrote {}", p.display());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ssda_core::trainer::MetricsRecord;

    fn row(id: &str, seed: u64, epoch: usize, acc: f64) -> MetricsRow {
        MetricsRow {
            run_id: id.into(),
            record: MetricsRecord {
                epoch,
                seed,
                loss_main: 0.0,
                loss_pretext: 0.0,
                loss_consistency: 0.0,
                loss_entropy: 0.0,
                loss_total: 0.0,
                target_accuracy: acc,
                pretext_accuracy: 0.5,
                wall_time_s: 0.0,
            },
        }
    }

    #[test]
    fn convergence_averages_seeds_per_epoch() {
        let rows = vec![row("a", 0, 1, 0.2), row("a", 1, 1, 0.4), row("a", 0, 2, 0.6), row("a", 1, 2, 0.8)];
        let pts = convergence(&rows);
        assert_eq!(pts.len(), 2);
        assert!((pts[0].1 - 0.3).abs() < 1e-15 && (pts[1].1 - 0.7).abs() < 1e-15);
        assert_eq!(finals(&rows, target), vec![0.6, 0.8]);
    }

    #[test]
    fn sweeps_sorted_by_value() {
        let mut c = Collected::default();
        for (id, v, accs) in [("lambda_e=1", "1", [0.5, 0.7]), ("lambda_e=0.1", "0.1", [0.8, 0.8])] {
            c.runs.push((id.into(), vec![row(id, 0, 3, accs[0]), row(id, 1, 3, accs[1])]));
            c.manifests.push(BTreeMap::from([
                ("run_id".to_string(), id.to_string()),
                ("sweep_vary".to_string(), "lambda_e".to_string()),
                ("sweep_value".to_string(), v.to_string()),
            ]));
        }
        let s = sweeps(&c);
        let bars = &s["lambda_e"];
        assert_eq!(bars[0].1.label, "0.1");
        assert_eq!(bars[1].1.label, "1");
        assert!((bars[1].1.std - 0.2 / 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn empty_glob_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let pat = dir.path().join("*.csv").to_string_lossy().into_owned();
        match expand(&[pat]) {
            Err(CliError::Validation(m)) => assert!(m.contains("no runs found")),
            other => panic!("{other:?}"),
        }
    }
}
