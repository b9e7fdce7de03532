//! Run manifests: everything needed to trace a number back to the
//! method, weights, seed and dataset that produced it.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};
use ssda_core::data::idx::DATASET_FILES;
use ssda_core::data::DatasetSpec;
use ssda_core::losses::LossWeights;
use ssda_core::trainer::TrainConfig;

use crate::error::{invalid, CliError};
use crate::metrics::fmt_sig;

pub const DEFAULT_LAMBDA_P: f64 = 0.6;
pub const DEFAULT_LAMBDA_C: f64 = 0.2;
pub const DEFAULT_LAMBDA_E: f64 = 0.1;

/// Timestamp written when timing is not recorded, so outputs stay
/// byte-identical across repeated runs.
pub const FIXED_CREATED_AT: &str = "1970-01-01T00:00:00Z";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    SourceOnly,
    Rot,
    RotEntmin,
    Full,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::SourceOnly, Method::Rot, Method::RotEntmin, Method::Full];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::SourceOnly => "source_only",
            Method::Rot => "rot",
            Method::RotEntmin => "rot_entmin",
            Method::Full => "full",
        }
    }

    /// Builds the loss weights allowed by this method. Defaults fill the
    /// weights the method uses; supplying a weight the method fixes at
    /// zero is an error.
    pub fn weights(self, lambda_p: Option<f64>, lambda_c: Option<f64>, lambda_e: Option<f64>) -> Result<LossWeights, CliError> {
        let (uses_p, uses_c, uses_e) = match self {
            Method::SourceOnly => (false, false, false),
            Method::Rot => (true, false, false),
            Method::RotEntmin => (true, false, true),
            Method::Full => (true, true, true),
        };
        let pick = |name: &str, used: bool, given: Option<f64>, default: f64| -> Result<f64, CliError> {
            match (used, given) {
                (false, Some(_)) => invalid(format!("method {self} fixes {name} at 0; remove --{}", name.replace('_', "-"))),
                (false, None) => Ok(0.0),
                (true, v) => Ok(v.unwrap_or(default)),
            }
        };
        let w = LossWeights {
            lambda_p: pick("lambda_p", uses_p, lambda_p, DEFAULT_LAMBDA_P)?,
            lambda_c: pick("lambda_c", uses_c, lambda_c, DEFAULT_LAMBDA_C)?,
            lambda_e: pick("lambda_e", uses_e, lambda_e, DEFAULT_LAMBDA_E)?,
        };
        w.validate()?;
        Ok(w)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown method `{s}` (expected source_only, rot, rot_entmin or full)"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub run_id: String,
    pub method: Method,
    pub config: TrainConfig,
    pub n_seeds: usize,
    pub dataset: DatasetSpec,
    pub dataset_checksum: String,
    pub created_at: String,
    pub code_version: String,
    /// Additional provenance, such as the swept weight.
    pub extra: Vec<(String, String)>,
}

impl RunManifest {
    pub fn pairs(&self) -> Vec<(String, String)> {
        let c = &self.config;
        let d = &self.dataset;
        let mut out: Vec<(String, String)> = [
            ("run_id", self.run_id.clone()),
            ("method", self.method.to_string()),
            ("lambda_p", fmt_sig(c.weights.lambda_p)),
            ("lambda_c", fmt_sig(c.weights.lambda_c)),
            ("lambda_e", fmt_sig(c.weights.lambda_e)),
            ("seed", c.seed.to_string()),
            ("n_seeds", self.n_seeds.to_string()),
            ("epochs", c.epochs.to_string()),
            ("batch_size_source", c.batch_size_source.to_string()),
            ("batch_size_target", c.batch_size_target.to_string()),
            ("learning_rate", fmt_sig(c.learning_rate)),
            ("momentum", fmt_sig(c.momentum)),
            ("eval_every", c.eval_every.to_string()),
            ("strict", c.strict.to_string()),
            ("dataset_checksum", self.dataset_checksum.clone()),
            ("dataset_seed", d.seed.to_string()),
            ("dataset_classes", d.n_classes.to_string()),
            ("dataset_n_source", d.n_source.to_string()),
            ("dataset_n_target", d.n_target.to_string()),
            ("dataset_image_size", d.image_size.to_string()),
            ("dataset_background_hue_shift", fmt_sig(d.domain_shift.background_hue_shift)),
            ("dataset_noise_sigma", fmt_sig(d.domain_shift.noise_sigma)),
            ("dataset_texture_id", d.domain_shift.texture_id.to_string()),
            ("created_at", self.created_at.clone()),
            ("code_version", self.code_version.clone()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        out.extend(self.extra.iter().cloned());
        out
    }

    /// One `# key=value` line per field.
    pub fn comment_block(&self, prefix: &str) -> String {
        self.pairs().iter().map(|(k, v)| format!("{prefix}{k}={v}\n")).collect()
    }
}

pub fn code_version() -> String {
    format!("ssda {}", env!("CARGO_PKG_VERSION"))
}

pub fn created_at(record_timing: bool) -> String {
    if record_timing {
        chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
    } else {
        FIXED_CREATED_AT.to_string()
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// SHA-256 over the four IDX files of a dataset directory, in a fixed order.
pub fn dataset_checksum(dir: &Path) -> Result<String, CliError> {
    let mut h = Sha256::new();
    for name in DATASET_FILES {
        let path = dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| CliError::io(&path, e))?;
        h.update(&bytes);
    }
    Ok(format!("sha256:{}", hex(&h.finalize())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn templates() {
        let w = Method::SourceOnly.weights(None, None, None).unwrap();
        assert_eq!(w, LossWeights::ZERO);
        assert!(Method::SourceOnly.weights(None, Some(0.2), None).is_err());
        assert!(Method::SourceOnly.weights(Some(0.0), None, None).is_err());

        let w = Method::Rot.weights(Some(0.5), None, None).unwrap();
        assert_eq!((w.lambda_p, w.lambda_c, w.lambda_e), (0.5, 0.0, 0.0));
        assert!(Method::Rot.weights(None, None, Some(0.1)).is_err());

        let w = Method::RotEntmin.weights(None, None, None).unwrap();
        assert_eq!((w.lambda_p, w.lambda_c, w.lambda_e), (0.6, 0.0, 0.1));
        assert!(Method::RotEntmin.weights(None, Some(0.1), None).is_err());

        let w = Method::Full.weights(Some(0.6), Some(0.2), Some(0.1)).unwrap();
        assert_eq!(w, LossWeights::default());
        assert!(Method::Full.weights(Some(-0.1), None, None).is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("ours".parse::<Method>().is_err());
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
