//! Metrics CSV: manifest comment lines, a fixed header, one row per
//! evaluation point.

use std::collections::BTreeMap;
use std::path::Path;

use ssda_core::trainer::MetricsRecord;

use crate::error::CliError;

pub const HEADER: &str =
    "run_id,seed,epoch,loss_main,loss_pretext,loss_consistency,loss_entropy,loss_total,target_acc,pretext_acc,wall_time_s";

/// Formats like C's `%.9g`: nine significant digits, trailing zeros
/// dropped, exponent form below `1e-4` and from `1e9` up. Independent
/// of locale.
pub fn fmt_sig(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return if v.is_nan() { "nan".into() } else if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let negative = mantissa.starts_with('-');
    let digits: String = mantissa.chars().filter(char::is_ascii_digit).collect();
    let sign = if negative { "-" } else { "" };
    if !(-4..9).contains(&exp) {
        let (head, tail) = digits.split_at(1);
        let tail = tail.trim_end_matches('0');
        let frac = if tail.is_empty() { String::new() } else { format!(".{tail}") };
        return format!("{sign}{head}{frac}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs());
    }
    let body = if exp >= 0 {
        let split = exp as usize + 1;
        let (int, frac) = digits.split_at(split);
        let frac = frac.trim_end_matches('0');
        if frac.is_empty() {
            int.to_string()
        } else {
            format!("{int}.{frac}")
        }
    } else {
        let zeros = "0".repeat((-exp - 1) as usize);
        format!("0.{zeros}{}", digits.trim_end_matches('0'))
    };
    format!("{sign}{body}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub record: MetricsRecord,
}

impl MetricsRow {
    fn to_csv(&self) -> String {
        let r = &self.record;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            self.run_id,
            r.seed,
            r.epoch,
            fmt_sig(r.loss_main),
            fmt_sig(r.loss_pretext),
            fmt_sig(r.loss_consistency),
            fmt_sig(r.loss_entropy),
            fmt_sig(r.loss_total),
            fmt_sig(r.target_accuracy),
            fmt_sig(r.pretext_accuracy),
            fmt_sig(r.wall_time_s),
        )
    }
}

/// Renders a metrics file: each manifest block as `# key=value` lines,
/// then the header and rows.
pub fn render(manifest_blocks: &[String], rows: &[MetricsRow]) -> String {
    let mut out = String::new();
    for block in manifest_blocks {
        out.push_str(block);
    }
    out.push_str(HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.to_csv());
    }
    out
}

/// A parsed metrics file. Each manifest is the run of `# key=value`
/// lines starting at a `run_id` key.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsFile {
    pub manifests: Vec<BTreeMap<String, String>>,
    pub rows: Vec<MetricsRow>,
}

impl MetricsFile {
    pub fn manifest_for(&self, run_id: &str) -> Option<&BTreeMap<String, String>> {
        self.manifests.iter().find(|m| m.get("run_id").map(String::as_str) == Some(run_id))
    }
}

pub fn parse(text: &str, path: &Path) -> Result<MetricsFile, CliError> {
    let err = |line: usize, reason: String| CliError::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut file = MetricsFile::default();
    let mut seen_header = false;
    for (i, raw) in text.lines().enumerate() {
        let n = i + 1;
        let line = raw.trim_end_matches('\r');
        if let Some(comment) = line.strip_prefix('#') {
            if let Some((k, v)) = comment.trim().split_once('=') {
                let (k, v) = (k.trim().to_string(), v.trim().to_string());
                if k == "run_id" || file.manifests.is_empty() {
                    file.manifests.push(BTreeMap::new());
                }
                file.manifests.last_mut().expect("pushed above").insert(k, v);
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        if !seen_header {
            if line != HEADER {
                return Err(err(n, format!("expected header `{HEADER}`")));
            }
            seen_header = true;
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 11 {
            return Err(err(n, format!("expected 11 fields, found {}", f.len())));
        }
        let num = |j: usize| -> Result<f64, CliError> {
            f[j].parse::<f64>()
                .map_err(|_| err(n, format!("field {} `{}` is not a number", j + 1, f[j])))
        };
        let int = |j: usize| -> Result<u64, CliError> {
            f[j].parse::<u64>()
                .map_err(|_| err(n, format!("field {} `{}` is not an integer", j + 1, f[j])))
        };
        let record = MetricsRecord {
            seed: int(1)?,
            epoch: int(2)? as usize,
            loss_main: num(3)?,
            loss_pretext: num(4)?,
            loss_consistency: num(5)?,
            loss_entropy: num(6)?,
            loss_total: num(7)?,
            target_accuracy: num(8)?,
            pretext_accuracy: num(9)?,
            wall_time_s: num(10)?,
        };
        if !(0.0..=1.0).contains(&record.target_accuracy) || !(0.0..=1.0).contains(&record.pretext_accuracy) {
            return Err(err(n, "accuracy outside [0, 1]".into()));
        }
        file.rows.push(MetricsRow {
            run_id: f[0].to_string(),
            record,
        });
    }
    if !seen_header {
        return Err(err(text.lines().count().max(1), "missing header".into()));
    }
    Ok(file)
}

pub fn read(path: &Path) -> Result<MetricsFile, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse(&text, path)
}
