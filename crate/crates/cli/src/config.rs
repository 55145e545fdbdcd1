//! Run configuration: one TOML table per pipeline stage. Every key is
//! optional; unknown keys anywhere are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use counterseg::clustering::{EncoderConfig, KMeansConfig, PatchStrategy};
use counterseg::datagen::{DataConfig, ImportConfig};
use counterseg::dataset::Split;
use counterseg::evalinfer::WindowConfig;
use counterseg::trainer::TrainConfig;
use counterseg::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub import: ImportConfig,
    pub encoder: EncoderConfig,
    pub cluster: ClusterConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    pub kmeans: KMeansConfig,
    /// How a composite's background patch is obtained for labeling.
    pub patch: PatchStrategy,
    /// Training backgrounds shown per cluster in the sweep montages.
    pub montage_per_cluster: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self { kmeans: KMeansConfig::default(), patch: PatchStrategy::default(), montage_per_cluster: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    pub window: WindowConfig,
    pub threshold: f32,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self { window: WindowConfig::default(), threshold: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub split: Split,
    pub threshold: f32,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { split: Split::Test, threshold: 0.5 }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                Self::parse(&text)
            }
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let value: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(one_line(&e.to_string())))?;
        let unknown = unknown_keys(&value);
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))));
        }
        let cfg: RunConfig = toml::Value::Table(value).try_into().map_err(|e: toml::de::Error| Error::Config(one_line(&e.to_string())))?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// SHA-256 of the canonical JSON form, independent of file formatting.
    pub fn hash(&self) -> Result<String> {
        Ok(counterseg::checkpoint::sha256_hex(&serde_json::to_vec(self)?))
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Dotted paths of every key in `user` that the schema does not know.
fn unknown_keys(user: &toml::Table) -> Vec<String> {
    // Optional fields are skipped when None, so fill them in for the schema.
    let mut template = RunConfig::default();
    template.train.steps_per_epoch = Some(1);
    let schema = match toml::Value::try_from(&template) {
        Ok(toml::Value::Table(t)) => t,
        _ => unreachable!("config serializes to a table"),
    };
    let mut out = Vec::new();
    walk(user, &schema, "", &mut out);
    out
}

fn walk(user: &toml::Table, schema: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (key, value) in user {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match (value, schema.get(key)) {
            (_, None) => out.push(path),
            (toml::Value::Table(u), Some(toml::Value::Table(s))) => walk(u, s, &path, out),
            _ => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_the_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn sections_override_defaults() {
        let cfg = RunConfig::parse("[data]\nsize = 16\n[train]\nk = 3\nsteps_per_epoch = 5\n[train.net]\nchannels = [4, 8]\n[infer.window]\ncrop = 32\n").unwrap();
        assert_eq!(cfg.data.size, 16);
        assert_eq!(cfg.train.k, 3);
        assert_eq!(cfg.train.steps_per_epoch, Some(5));
        assert_eq!(cfg.train.net.channels, vec![4, 8]);
        assert_eq!(cfg.infer.window.crop, 32);
    }

    #[test]
    fn every_unknown_key_is_listed() {
        let err = RunConfig::parse("bogus = 1\n[data]\nsise = 16\n[train]\nk = 3\n[train.net]\nchanels = [4]\n[cluster.kmeans]\nepsilon = 0.1\n").unwrap_err();
        assert_eq!(err.category(), "config");
        let msg = err.to_string();
        for key in ["bogus", "data.sise", "train.net.chanels", "cluster.kmeans.epsilon"] {
            assert!(msg.contains(key), "{msg} should mention {key}");
        }
        assert!(!msg.contains("train.k"));
    }

    #[test]
    fn bad_values_are_config_errors() {
        assert_eq!(RunConfig::parse("[train]\nk = 1\n").unwrap_err().category(), "config");
        assert_eq!(RunConfig::parse("[train]\nk = \"four\"\n").unwrap_err().category(), "config");
        assert_eq!(RunConfig::parse("[train\n").unwrap_err().category(), "config");
    }

    #[test]
    fn hash_ignores_formatting() {
        let a = RunConfig::parse("[data]\nsize = 16\n").unwrap();
        let b = RunConfig::parse("# comment\n[data]\n  size=16\n").unwrap();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        assert_ne!(a.hash().unwrap(), RunConfig::default().hash().unwrap());
    }
}
