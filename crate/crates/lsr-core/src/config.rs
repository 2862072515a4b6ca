//! Line-oriented `key = value` configuration with `[section]` headers.
//!
//! ```text
//! # comment
//! [encoder]
//! num_layers = 2
//! hidden_dim = 32
//! ```
//!
//! Values can be overridden by environment variables named
//! `LSR_<SECTION>_<KEY>` (upper-cased) and by `section.key=value` command
//! line overrides, in that order.

use std::collections::BTreeMap;
use std::path::Path;

use crate::encoder::{AdapterConfig, AdapterSets, EncoderConfig};
use crate::linalg::Precision;
use crate::objectives::RegularizerConfig;
use crate::{Error, Result};

pub const ENV_PREFIX: &str = "LSR";

/// Parsed configuration: `(section, key) -> value` with typed getters.
#[derive(Debug, Clone, Default)]
pub struct ConfigMap {
    values: BTreeMap<(String, String), String>,
}

impl ConfigMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut map = ConfigMap::new();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let Some(name) = name.strip_suffix(']') else {
                    return Err(Error::Parse {
                        path: "<config>".into(),
                        line: lineno + 1,
                        msg: format!("unterminated section header `{line}`"),
                    });
                };
                section = name.trim().to_string();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    path: "<config>".into(),
                    line: lineno + 1,
                    msg: format!("expected `key = value`, got `{line}`"),
                });
            };
            map.set(&section, key.trim(), value.trim());
        }
        Ok(map)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", path.display()),
            ))
        })?;
        Self::parse(&text)
    }

    pub fn set(&mut self, section: &str, key: &str, value: &str) {
        self.values
            .insert((section.to_string(), key.to_string()), value.to_string());
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.values
            .get(&(section.to_string(), key.to_string()))
            .map(String::as_str)
    }

    /// Applies `LSR_<SECTION>_<KEY>` environment overrides for every key
    /// already present (the config defines the schema; stray variables are
    /// ignored).
    pub fn apply_env(&mut self) {
        let keys: Vec<(String, String)> = self.values.keys().cloned().collect();
        for (section, key) in keys {
            let var = format!(
                "{ENV_PREFIX}_{}_{}",
                section.to_uppercase().replace('-', "_"),
                key.to_uppercase().replace('-', "_")
            );
            if let Ok(v) = std::env::var(&var) {
                self.set(&section, &key, &v);
            }
        }
    }

    /// Applies a `section.key=value` command line override.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let Some((path, value)) = spec.split_once('=') else {
            return Err(Error::Config(format!(
                "override `{spec}` must look like section.key=value"
            )));
        };
        let Some((section, key)) = path.trim().split_once('.') else {
            return Err(Error::Config(format!(
                "override key `{path}` must look like section.key"
            )));
        };
        self.set(section.trim(), key.trim(), value.trim());
        Ok(())
    }

    pub fn to_text(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        let mut current = None;
        for ((section, key), value) in &self.values {
            if current != Some(section) {
                if current.is_some() {
                    out.push('\n');
                }
                writeln!(out, "[{section}]").expect("string write");
                current = Some(section);
            }
            writeln!(out, "{key} = {value}").expect("string write");
        }
        out
    }

    pub fn get_usize(&self, section: &str, key: &str, default: usize) -> Result<usize> {
        match self.get(section, key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| {
                Error::Config(format!("[{section}] {key}: `{v}` is not an integer"))
            }),
        }
    }

    pub fn get_f64(&self, section: &str, key: &str, default: f64) -> Result<f64> {
        match self.get(section, key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("[{section}] {key}: `{v}` is not a number"))),
        }
    }

    pub fn get_bool(&self, section: &str, key: &str, default: bool) -> Result<bool> {
        match self.get(section, key) {
            None => Ok(default),
            Some("true") | Some("1") | Some("yes") => Ok(true),
            Some("false") | Some("0") | Some("no") => Ok(false),
            Some(v) => Err(Error::Config(format!(
                "[{section}] {key}: `{v}` is not a boolean"
            ))),
        }
    }

    pub fn get_str(&self, section: &str, key: &str, default: &str) -> String {
        self.get(section, key).unwrap_or(default).to_string()
    }
}

/// Reads `[encoder]` into a config, with the toy model as the default
/// shape.
pub fn encoder_from_map(map: &ConfigMap) -> Result<EncoderConfig> {
    let precision = match map.get_str("encoder", "precision", "f64").as_str() {
        "f64" => Precision::F64,
        "f32" => Precision::F32,
        other => {
            return Err(Error::Config(format!(
                "[encoder] precision: `{other}` is neither f64 nor f32"
            )))
        }
    };
    let cfg = EncoderConfig {
        num_layers: map.get_usize("encoder", "num_layers", 2)?,
        hidden_dim: map.get_usize("encoder", "hidden_dim", 32)?,
        num_heads: map.get_usize("encoder", "num_heads", 4)?,
        ffn_dim: map.get_usize("encoder", "ffn_dim", 64)?,
        vocab_size: map.get_usize("encoder", "vocab_size", 0)?,
        max_seq_len: map.get_usize("encoder", "max_seq_len", 32)?,
        precision,
    };
    Ok(cfg)
}

pub fn encoder_to_map(cfg: &EncoderConfig, map: &mut ConfigMap) {
    map.set("encoder", "num_layers", &cfg.num_layers.to_string());
    map.set("encoder", "hidden_dim", &cfg.hidden_dim.to_string());
    map.set("encoder", "num_heads", &cfg.num_heads.to_string());
    map.set("encoder", "ffn_dim", &cfg.ffn_dim.to_string());
    map.set("encoder", "vocab_size", &cfg.vocab_size.to_string());
    map.set("encoder", "max_seq_len", &cfg.max_seq_len.to_string());
    let precision = match cfg.precision {
        Precision::F64 => "f64",
        Precision::F32 => "f32",
    };
    map.set("encoder", "precision", precision);
}

/// Reads `[adapter]`; `active_layers` accepts `all`, `none`, or a comma
/// list of indices.
pub fn adapter_from_map(map: &ConfigMap, num_layers: usize) -> Result<AdapterConfig> {
    let sets = match map.get_str("adapter", "sets", "shared").as_str() {
        "shared" => AdapterSets::Shared,
        "query-document" | "bi" => AdapterSets::QueryDocument,
        other => {
            return Err(Error::Config(format!(
                "[adapter] sets: `{other}` is neither shared nor query-document"
            )))
        }
    };
    let active = match map.get_str("adapter", "active_layers", "all").as_str() {
        "all" => (0..num_layers).collect(),
        "none" => Default::default(),
        spec => {
            let mut out = std::collections::BTreeSet::new();
            for part in spec.split(',') {
                let idx: usize = part.trim().parse().map_err(|_| {
                    Error::Config(format!("[adapter] active_layers: bad index `{part}`"))
                })?;
                out.insert(idx);
            }
            out
        }
    };
    Ok(AdapterConfig {
        reduction_factor: map.get_usize("adapter", "reduction_factor", 16)?,
        after_attention: map.get_bool("adapter", "after_attention", true)?,
        after_ffn: map.get_bool("adapter", "after_ffn", true)?,
        active_layers: active,
        adapter_sets: sets,
        train_layernorms: map.get_bool("adapter", "train_layernorms", true)?,
        train_lm_head: map.get_bool("adapter", "train_lm_head", true)?,
    })
}

pub fn adapter_to_map(cfg: &AdapterConfig, map: &mut ConfigMap) {
    map.set(
        "adapter",
        "reduction_factor",
        &cfg.reduction_factor.to_string(),
    );
    map.set(
        "adapter",
        "after_attention",
        &cfg.after_attention.to_string(),
    );
    map.set("adapter", "after_ffn", &cfg.after_ffn.to_string());
    let active = cfg
        .active_layers
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(",");
    map.set(
        "adapter",
        "active_layers",
        if active.is_empty() { "none" } else { &active },
    );
    let sets = match cfg.adapter_sets {
        AdapterSets::Shared => "shared",
        AdapterSets::QueryDocument => "query-document",
    };
    map.set("adapter", "sets", sets);
    map.set(
        "adapter",
        "train_layernorms",
        &cfg.train_layernorms.to_string(),
    );
    map.set("adapter", "train_lm_head", &cfg.train_lm_head.to_string());
}

/// Reads `[regularizer]` with the triplet-training defaults.
pub fn regularizer_from_map(map: &ConfigMap) -> Result<RegularizerConfig> {
    let defaults = RegularizerConfig::default();
    let cfg = RegularizerConfig {
        lambda_q: map.get_f64("regularizer", "lambda_q", defaults.lambda_q)?,
        lambda_d: map.get_f64("regularizer", "lambda_d", defaults.lambda_d)?,
        ramp_steps: map.get_usize("regularizer", "ramp_steps", defaults.ramp_steps)?,
        flops_squared: map.get_bool("regularizer", "flops_squared", defaults.flops_squared)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn regularizer_to_map(cfg: &RegularizerConfig, map: &mut ConfigMap) {
    map.set("regularizer", "lambda_q", &format!("{:e}", cfg.lambda_q));
    map.set("regularizer", "lambda_d", &format!("{:e}", cfg.lambda_d));
    map.set("regularizer", "ramp_steps", &cfg.ramp_steps.to_string());
    map.set(
        "regularizer",
        "flops_squared",
        &cfg.flops_squared.to_string(),
    );
}
