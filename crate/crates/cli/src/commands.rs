//! `gen-data`, `train`, `ablate` and `export-features`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ssda_core::data::idx::{load_dataset, save_dataset};
use ssda_core::data::{generate_shifted_shapes, DatasetSpec, DomainShift, ShiftedShapes};
use ssda_core::losses::LossWeights;
use ssda_core::network::MultiHeadNet;
use ssda_core::trainer::{run_parallel, summarize, MeanStd, RunResult, TrainConfig};

use crate::config::ConfigFile;
use crate::error::{invalid, CliError};
use crate::manifest::{self, Method, RunManifest, DEFAULT_LAMBDA_C, DEFAULT_LAMBDA_E, DEFAULT_LAMBDA_P};
use crate::metrics::{self, fmt_sig, MetricsRow};
use crate::svg::{self, Bar};
use crate::{AblateArgs, ExportArgs, GenDataArgs, OptimArgs, TrainArgs};

const DEFAULT_SEEDS: usize = 3;

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

pub fn gen_data(a: &GenDataArgs) -> Result<String, CliError> {
    let cfg = ConfigFile::load(a.config.as_deref())?;
    let defaults = DatasetSpec::default();
    let level = cfg.resolve_opt(a.shift, "shift")?;
    if let Some(l) = level {
        if !(0.0..=1.0).contains(&l) {
            return invalid(format!("--shift must lie in [0, 1], got {l}"));
        }
    }
    let base = level.map_or(defaults.domain_shift, DomainShift::from_level);
    let n = cfg.resolve_opt(a.n, "n")?;
    let spec = DatasetSpec {
        n_classes: cfg.resolve(a.classes, "classes", defaults.n_classes)?,
        n_source: cfg.resolve(a.n_source, "n_source", n.unwrap_or(defaults.n_source))?,
        n_target: cfg.resolve(a.n_target, "n_target", n.unwrap_or(defaults.n_target))?,
        image_size: cfg.resolve(a.size, "size", defaults.image_size)?,
        seed: cfg.resolve(a.seed, "seed", defaults.seed)?,
        domain_shift: DomainShift {
            background_hue_shift: cfg.resolve(a.hue_shift, "hue_shift", base.background_hue_shift)?,
            noise_sigma: cfg.resolve(a.noise, "noise", base.noise_sigma)?,
            texture_id: cfg.resolve(a.texture, "texture", base.texture_id)?,
        },
    };
    let out: PathBuf = cfg.resolve(a.out.clone(), "out", PathBuf::from("data"))?;
    cfg.reject_unused()?;
    let data = generate_shifted_shapes(&spec)?;
    save_dataset(&out, &data, &spec)?;
    let checksum = manifest::dataset_checksum(&out)?;
    Ok(format!("wrote {} ({} source, {} target)\nchecksum {checksum}\n", out.display(), spec.n_source, spec.n_target))
}

/// Settings shared by `train` and `ablate` after flag/file/default
/// resolution.
struct Resolved {
    data_dir: PathBuf,
    config: TrainConfig,
    n_seeds: usize,
    jobs: usize,
    out: Option<PathBuf>,
    record_timing: bool,
}

fn resolve_optim(o: &OptimArgs, cfg: &ConfigFile) -> Result<Resolved, CliError> {
    let d = TrainConfig::default();
    let batch = cfg.resolve_opt(o.batch_size, "batch_size")?;
    let config = TrainConfig {
        epochs: cfg.resolve(o.epochs, "epochs", d.epochs)?,
        batch_size_source: cfg.resolve(o.batch_size_source, "batch_size_source", batch.unwrap_or(d.batch_size_source))?,
        batch_size_target: cfg.resolve(o.batch_size_target, "batch_size_target", batch.unwrap_or(d.batch_size_target))?,
        learning_rate: cfg.resolve(o.lr, "lr", d.learning_rate)?,
        momentum: cfg.resolve(o.momentum, "momentum", d.momentum)?,
        weights: LossWeights::ZERO,
        seed: cfg.resolve(o.seed, "seed", d.seed)?,
        eval_every: cfg.resolve(o.eval_every, "eval_every", d.eval_every)?,
        strict: !(o.no_strict || cfg.resolve(None, "no_strict", false)?),
    };
    let n_seeds = cfg.resolve(o.seeds, "seeds", DEFAULT_SEEDS)?;
    if n_seeds == 0 {
        return invalid("--seeds must be at least 1");
    }
    let jobs = cfg.resolve(o.jobs, "jobs", default_jobs())?;
    if jobs == 0 {
        return invalid("--jobs must be at least 1");
    }
    Ok(Resolved {
        data_dir: cfg.resolve(o.data.clone(), "data", PathBuf::from("data"))?,
        config,
        n_seeds,
        jobs,
        out: cfg.resolve_opt(o.out.clone(), "out")?,
        record_timing: o.record_timing || cfg.resolve(None, "record_timing", false)?,
    })
}

fn load_data(dir: &Path) -> Result<(ShiftedShapes, DatasetSpec, String), CliError> {
    if !dir.is_dir() {
        return Err(CliError::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        ));
    }
    let (data, spec) = load_dataset(dir)?;
    let checksum = manifest::dataset_checksum(dir)?;
    Ok((data, spec, checksum))
}

fn seed_configs(base: &TrainConfig, n_seeds: usize) -> Vec<TrainConfig> {
    (0..n_seeds as u64)
        .map(|i| TrainConfig {
            seed: base.seed.wrapping_add(i),
            ..base.clone()
        })
        .collect()
}

fn rows_of(run_id: &str, runs: &[RunResult], record_timing: bool) -> Vec<MetricsRow> {
    runs.iter()
        .flat_map(|r| r.records.iter())
        .map(|rec| {
            let mut record = rec.clone();
            if !record_timing {
                record.wall_time_s = 0.0;
            }
            MetricsRow {
                run_id: run_id.to_string(),
                record,
            }
        })
        .collect()
}

fn pct(m: &MeanStd) -> String {
    format!("{:.2} ± {:.2}", 100.0 * m.mean, 100.0 * m.std)
}

pub fn train(a: &TrainArgs) -> Result<String, CliError> {
    let cfg = ConfigFile::load(a.optim.config.as_deref())?;
    let method: Method = cfg
        .resolve(a.method.clone(), "method", Method::Full.to_string())?
        .parse()
        .map_err(CliError::Validation)?;
    let weights = method.weights(
        cfg.resolve_opt(a.lambda_p, "lambda_p")?,
        cfg.resolve_opt(a.lambda_c, "lambda_c")?,
        cfg.resolve_opt(a.lambda_e, "lambda_e")?,
    )?;
    let run_id = cfg.resolve(a.run_id.clone(), "run_id", method.to_string())?;
    if run_id.is_empty() || run_id.contains([',', '\n', '\r']) {
        return invalid(format!("run id `{run_id}` may not be empty or contain commas or newlines"));
    }
    let r = resolve_optim(&a.optim, &cfg)?;
    cfg.reject_unused()?;
    let config = TrainConfig { weights, ..r.config };
    config.validate()?;
    let (data, spec, checksum) = load_data(&r.data_dir)?;
    let out = r.out.unwrap_or_else(|| PathBuf::from("runs").join(&run_id));

    let runs = run_parallel(&seed_configs(&config, r.n_seeds), &data, r.jobs)?;
    let manifest = RunManifest {
        run_id: run_id.clone(),
        method,
        config,
        n_seeds: r.n_seeds,
        dataset: spec,
        dataset_checksum: checksum,
        created_at: manifest::created_at(r.record_timing),
        code_version: manifest::code_version(),
        extra: Vec::new(),
    };
    let csv = metrics::render(&[manifest.comment_block("# ")], &rows_of(&run_id, &runs, r.record_timing));
    let csv_path = out.join("metrics.csv");
    write_file(&csv_path, csv.as_bytes())?;
    for run in &runs {
        let mut bytes = Vec::new();
        run.net.write_checkpoint(&mut bytes)?;
        write_file(&out.join(format!("checkpoint_seed{}.bin", run.seed)), &bytes)?;
    }
    let summary = summarize(runs)?;
    Ok(format!(
        "wrote {}\n{method}, {} (pretext {})\n",
        csv_path.display(),
        pct(&summary.target_accuracy),
        pct(&summary.pretext_accuracy)
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Weight {
    Pretext,
    Consistency,
    Entropy,
}

impl Weight {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        match s.replace('-', "_").as_str() {
            "lambda_p" => Ok(Weight::Pretext),
            "lambda_c" => Ok(Weight::Consistency),
            "lambda_e" => Ok(Weight::Entropy),
            other => invalid(format!("--vary must be lambda_p, lambda_c or lambda_e, got `{other}`")),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Weight::Pretext => "lambda_p",
            Weight::Consistency => "lambda_c",
            Weight::Entropy => "lambda_e",
        }
    }

    fn set(self, w: &mut LossWeights, v: f64) {
        match self {
            Weight::Pretext => w.lambda_p = v,
            Weight::Consistency => w.lambda_c = v,
            Weight::Entropy => w.lambda_e = v,
        }
    }
}

pub fn parse_values(raw: &str) -> Result<Vec<f64>, CliError> {
    let values: Vec<f64> = raw
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| CliError::Validation(format!("bad sweep value `{s}`"))))
        .collect::<Result<_, _>>()?;
    if values.is_empty() {
        return invalid("--values must list at least one value");
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return invalid(format!("sweep values must be finite and non-negative, got {v}"));
    }
    Ok(values)
}

/// Markdown table with an `Avg.` row and a `std` row, in percent.
pub fn ablation_table(vary: &str, values: &[f64], stats: &[MeanStd]) -> String {
    let mut s = format!("| {vary} |");
    for v in values {
        let _ = write!(s, " {} |", fmt_sig(*v));
    }
    s.push_str("\n|---|");
    s.push_str(&"---:|".repeat(values.len()));
    s.push_str("\n| Avg. |");
    for m in stats {
        let _ = write!(s, " {:.2} |", 100.0 * m.mean);
    }
    s.push_str("\n| std |");
    for m in stats {
        let _ = write!(s, " {:.2} |", 100.0 * m.std);
    }
    s.push('\n');
    s
}

pub fn ablate(a: &AblateArgs) -> Result<String, CliError> {
    let cfg = ConfigFile::load(a.optim.config.as_deref())?;
    let vary = Weight::parse(&cfg.resolve(a.vary.clone(), "vary", "lambda_c".to_string())?)?;
    let raw_values: String = cfg.resolve(a.values.clone(), "values", String::new())?;
    let values = parse_values(&raw_values)?;
    let given = [
        (Weight::Pretext, cfg.resolve_opt(a.lambda_p, "lambda_p")?, DEFAULT_LAMBDA_P),
        (Weight::Consistency, cfg.resolve_opt(a.lambda_c, "lambda_c")?, DEFAULT_LAMBDA_C),
        (Weight::Entropy, cfg.resolve_opt(a.lambda_e, "lambda_e")?, DEFAULT_LAMBDA_E),
    ];
    let mut fixed = LossWeights::ZERO;
    for (w, v, default) in given {
        if w == vary && v.is_some() {
            return invalid(format!("{} is being swept; drop --{}", w.name(), w.name().replace('_', "-")));
        }
        w.set(&mut fixed, v.unwrap_or(default));
    }
    fixed.validate()?;
    let r = resolve_optim(&a.optim, &cfg)?;
    cfg.reject_unused()?;
    r.config.validate()?;
    let (data, spec, checksum) = load_data(&r.data_dir)?;
    let out = r.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(format!("ablate_{}", vary.name())));

    let value_configs: Vec<TrainConfig> = values
        .iter()
        .map(|&v| {
            let mut weights = fixed;
            vary.set(&mut weights, v);
            TrainConfig { weights, ..r.config.clone() }
        })
        .collect();
    let configs: Vec<TrainConfig> = value_configs.iter().flat_map(|c| seed_configs(c, r.n_seeds)).collect();
    let mut runs = run_parallel(&configs, &data, r.jobs)?.into_iter();

    let created_at = manifest::created_at(r.record_timing);
    let mut blocks = Vec::new();
    let mut rows = Vec::new();
    let mut stats = Vec::new();
    let mut notes = Vec::new();
    for (&v, config) in values.iter().zip(value_configs) {
        let group: Vec<RunResult> = runs.by_ref().take(r.n_seeds).collect();
        let run_id = format!("{}={}", vary.name(), fmt_sig(v));
        let m = RunManifest {
            run_id: run_id.clone(),
            method: Method::Full,
            config,
            n_seeds: r.n_seeds,
            dataset: spec,
            dataset_checksum: checksum.clone(),
            created_at: created_at.clone(),
            code_version: manifest::code_version(),
            extra: vec![
                ("sweep_vary".into(), vary.name().into()),
                ("sweep_value".into(), fmt_sig(v)),
            ],
        };
        blocks.push(m.comment_block("# "));
        notes.push(m.pairs().iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" "));
        rows.extend(rows_of(&run_id, &group, r.record_timing));
        stats.push(summarize(group)?.target_accuracy);
    }

    write_file(&out.join("ablation.csv"), metrics::render(&blocks, &rows).as_bytes())?;
    let table = ablation_table(vary.name(), &values, &stats);
    let md = format!("# Target accuracy (%) vs {}\n\n{table}", vary.name());
    write_file(&out.join("ablation.md"), md.as_bytes())?;
    let bars: Vec<Bar> = values
        .iter()
        .zip(&stats)
        .map(|(v, m)| Bar {
            label: fmt_sig(*v),
            mean: m.mean,
            std: m.std,
        })
        .collect();
    let chart = svg::error_bar_chart(
        &format!("Target accuracy vs {}", vary.name()),
        vary.name(),
        "target accuracy",
        &bars,
        &notes,
    );
    write_file(&out.join("ablation.svg"), chart.as_bytes())?;
    Ok(format!("wrote {}\n{table}", out.display()))
}

pub fn export_features(a: &ExportArgs) -> Result<String, CliError> {
    let (data, spec, _) = load_data(&a.data)?;
    let net = MultiHeadNet::load(&a.checkpoint, spec.image_size).map_err(|e| match e {
        ssda_core::network::NetError::Io(source) => CliError::io(&a.checkpoint, source),
        other => other.into(),
    })?;
    let arch = net.arch();
    if arch.image_size != spec.image_size || arch.in_channels != 3 {
        return Err(CliError::Malformed(format!(
            "checkpoint expects {}x{0}x{0} images, dataset has 3x{}x{1}",
            arch.image_size, spec.image_size
        )));
    }
    let labels = data.source.iter().chain(&data.target_eval).filter_map(|e| e.label).max().map_or(0, |m| m + 1);
    if labels > arch.n_classes {
        return Err(CliError::Malformed(format!(
            "checkpoint has {} classes, dataset has labels up to {}",
            arch.n_classes,
            labels - 1
        )));
    }
    let limit = a.limit.unwrap_or(usize::MAX);
    let mut header = String::from("id,domain,label");
    for j in 0..arch.feature_dim {
        let _ = write!(header, ",f{j}");
    }
    let mut out = header;
    out.push('\n');
    let mut total = 0;
    for set in [&data.source, &data.target_eval] {
        let chosen: Vec<_> = set.iter().take(limit).collect();
        let images: Vec<_> = chosen.iter().map(|e| &e.image).collect();
        let feats = net.features(&images)?;
        let dim = feats.shape()[1];
        if dim != arch.feature_dim {
            return Err(CliError::Malformed(format!("feature dimension {dim} != {}", arch.feature_dim)));
        }
        for (i, (ex, row)) in chosen.iter().zip(feats.data().chunks(dim)).enumerate() {
            let label = ex.label.map_or(String::new(), |l| l.to_string());
            let _ = write!(out, "{i},{},{label}", ex.domain);
            for v in row {
                let _ = write!(out, ",{}", fmt_sig(*v));
            }
            out.push('\n');
        }
        total += chosen.len();
    }
    write_file(&a.out, out.as_bytes())?;
    Ok(format!("wrote {} ({total} rows, {} features)\n", a.out.display(), arch.feature_dim))
}
