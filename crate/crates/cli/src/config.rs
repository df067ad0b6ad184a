//! Run configuration: defaults, overridden by a flat `key = value` file,
//! overridden by command-line flags.

use std::path::Path;

use odid_core::gallery::{GateMode, Gates};
use odid_core::scalespace::DownsampleSource;
use odid_core::{Error, FeatureParams, MatchParams, MatcherKind, Result};
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Json,
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub features: FeatureParams,
    pub matching: MatchParams,
    pub gates: Gates,
    pub format: OutputFormat,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            features: FeatureParams::default(),
            matching: MatchParams::default(),
            gates: Gates::default(),
            format: OutputFormat::Json,
        }
    }
}

/// Keys accepted by [`RunConfig::set`], in the order they are documented.
pub const KEYS: &[&str] = &[
    "octaves",
    "intervals",
    "base_sigma",
    "contrast",
    "edge_r",
    "upsample",
    "downsample_source",
    "max_keypoints",
    "clamp",
    "multi_orientation",
    "peak_ratio",
    "ratio",
    "root_kernel",
    "cross_check",
    "matcher",
    "leaf_budget",
    "leaf_size",
    "gate",
    "quantile",
    "abs_floor",
    "format",
];

fn bad(key: &str, value: &str, want: &str) -> Error {
    Error::Config(format!("{key} = {value:?}: expected {want}"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str, want: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value, want))
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(bad(key, value, "a boolean")),
    }
}

pub fn parse_gate(value: &str) -> Result<GateMode> {
    match value {
        "zscore" => Ok(GateMode::Zscore),
        "absolute" => Ok(GateMode::Absolute),
        "both" => Ok(GateMode::Both),
        _ => Err(bad("gate", value, "zscore | absolute | both")),
    }
}

pub fn parse_matcher(value: &str) -> Result<MatcherKind> {
    match value {
        "brute" => Ok(MatcherKind::Brute),
        "approx" => Ok(MatcherKind::Approx),
        _ => Err(bad("matcher", value, "brute | approx")),
    }
}

pub fn parse_format(value: &str) -> Result<OutputFormat> {
    match value {
        "json" => Ok(OutputFormat::Json),
        "text" => Ok(OutputFormat::Text),
        _ => Err(bad("format", value, "json | text")),
    }
}

impl RunConfig {
    /// Sets one key; `-` and `_` are interchangeable in key names.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.replace('-', "_");
        let value = value.trim();
        let pyr = &mut self.features.pyramid;
        match key.as_str() {
            "octaves" => pyr.num_octaves = num(&key, value, "an integer")?,
            "intervals" => pyr.intervals = num(&key, value, "an integer")?,
            "base_sigma" => pyr.base_sigma = num(&key, value, "a number")?,
            "contrast" => pyr.contrast_threshold = num(&key, value, "a number")?,
            "edge_r" => pyr.edge_r = num(&key, value, "a number")?,
            "upsample" => pyr.upsample_input = parse_bool(&key, value)?,
            "downsample_source" => {
                pyr.downsample_source = match value {
                    "top" => DownsampleSource::TopLevel,
                    "doubled" => DownsampleSource::DoubledLevel,
                    _ => return Err(bad(&key, value, "top | doubled")),
                }
            }
            "max_keypoints" => {
                self.features.max_keypoints = match value {
                    "none" | "" => None,
                    v => Some(num(&key, v, "an integer or none")?),
                }
            }
            "clamp" => self.features.descriptor.clamp = num(&key, value, "a number")?,
            "multi_orientation" => self.features.descriptor.multi_orientation = parse_bool(&key, value)?,
            "peak_ratio" => self.features.descriptor.peak_ratio = num(&key, value, "a number")?,
            "ratio" => self.matching.ratio_threshold = num(&key, value, "a number")?,
            "root_kernel" => self.matching.root_kernel = parse_bool(&key, value)?,
            "cross_check" => self.matching.cross_check = parse_bool(&key, value)?,
            "matcher" => self.matching.matcher = parse_matcher(value)?,
            "leaf_budget" => self.matching.leaf_budget = num(&key, value, "an integer")?,
            "leaf_size" => self.matching.leaf_size = num(&key, value, "an integer")?,
            "gate" => self.gates.mode = parse_gate(value)?,
            "quantile" => self.gates.gaussian_quantile = num(&key, value, "a number")?,
            "abs_floor" => self.gates.abs_floor = Some(num(&key, value, "a number")?),
            "format" => self.format = parse_format(value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a flat `key = value` text; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.features.pyramid.validate()?;
        let m = &self.matching;
        if !(m.ratio_threshold > 0.0 && m.ratio_threshold < 1.0) {
            return Err(Error::Parameter(format!("ratio must be in (0, 1), got {}", m.ratio_threshold)));
        }
        if m.leaf_budget == 0 || m.leaf_size == 0 {
            return Err(Error::Parameter("leaf_budget and leaf_size must be >= 1".into()));
        }
        let q = self.gates.gaussian_quantile;
        if !(0.0..1.0).contains(&q) {
            return Err(Error::Parameter(format!("quantile must be in [0, 1), got {q}")));
        }
        let c = self.features.descriptor.clamp;
        if c.is_nan() || c <= 0.0 {
            return Err(Error::Parameter(format!("clamp must be positive, got {c}")));
        }
        Ok(())
    }
}
