//! Identity-labelled galleries: ingestion, the binary index format, open-set
//! identification and precision/recall evaluation.
//!
//! # Index file layout (little-endian)
//!
//! ```text
//! magic      b"ODID"
//! version    u16 = 1
//! entries    u32
//! per entry:
//!   code_len u16, code bytes (UTF-8)
//!   digest   [u8; 32]   SHA-256 of the source file
//!   count    u32
//!   per keypoint: x, y, sigma, orientation, response (f32), 128 x f32 descriptor
//! ```

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use statrs::function::erf::erfc;

use crate::descriptor::{Descriptor, DESCRIPTOR_LEN};
use crate::error::{Error, Result};
use crate::features::{extract_features, Feature, FeatureParams};
use crate::imgio::{decode_image, GrayImage};
use crate::matcher::{lowe_similarity, MatchParams};

pub const INDEX_MAGIC: [u8; 4] = *b"ODID";
pub const INDEX_VERSION: u16 = 1;
/// Scores spread below this are treated as identical (all z-scores 0).
pub const MIN_SCORE_STD: f64 = 1e-12;

pub type ContentDigest = [u8; 32];

pub fn digest_bytes(bytes: &[u8]) -> ContentDigest {
    Sha256::digest(bytes).into()
}

/// Digest of a decoded raster: dimensions as u32 followed by samples as f32, all LE.
pub fn digest_image(img: &GrayImage) -> ContentDigest {
    let mut h = Sha256::new();
    h.update((img.width() as u32).to_le_bytes());
    h.update((img.height() as u32).to_le_bytes());
    for s in img.data() {
        h.update(s.to_le_bytes());
    }
    h.finalize().into()
}

pub fn hex(digest: &ContentDigest) -> String {
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Keypoint geometry kept in the index, with its descriptor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndexedFeature {
    pub x: f32,
    pub y: f32,
    pub sigma: f32,
    pub orientation: f32,
    pub response: f32,
    pub descriptor: Descriptor,
}

impl From<&Feature> for IndexedFeature {
    fn from(f: &Feature) -> Self {
        Self {
            x: f.keypoint.x,
            y: f.keypoint.y,
            sigma: f.keypoint.sigma,
            orientation: f.keypoint.orientation,
            response: f.keypoint.response,
            descriptor: f.descriptor,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GalleryEntry {
    pub code: String,
    pub source_digest: ContentDigest,
    pub features: Vec<IndexedFeature>,
}

impl GalleryEntry {
    pub fn keypoint_count(&self) -> usize {
        self.features.len()
    }

    pub fn descriptors(&self) -> Vec<Descriptor> {
        self.features.iter().map(|f| f.descriptor).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GalleryIndex {
    entries: Vec<GalleryEntry>,
}

impl GalleryIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<GalleryEntry>) -> Result<Self> {
        let mut index = Self::new();
        for e in entries {
            index.push(e)?;
        }
        Ok(index)
    }

    /// Appends an entry; codes must be non-empty and unique.
    pub fn push(&mut self, entry: GalleryEntry) -> Result<()> {
        if entry.code.is_empty() {
            return Err(Error::EmptyCode);
        }
        if self.entries.iter().any(|e| e.code == entry.code) {
            return Err(Error::DuplicateCode(entry.code));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn entries(&self) -> &[GalleryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FileError {
    pub path: PathBuf,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct IngestReport {
    pub index: GalleryIndex,
    pub errors: Vec<FileError>,
    pub warnings: Vec<String>,
}

/// Extracts features for every `(path, code)`. Unreadable files are
/// collected as errors; images without keypoints are kept with a warning.
pub fn ingest(items: &[(PathBuf, String)], params: &FeatureParams) -> Result<IngestReport> {
    let mut seen = HashSet::new();
    for (_, code) in items {
        if code.is_empty() {
            return Err(Error::EmptyCode);
        }
        if !seen.insert(code.as_str()) {
            return Err(Error::DuplicateCode(code.clone()));
        }
    }

    let results: Vec<Result<GalleryEntry>> = items
        .par_iter()
        .map(|(path, code)| {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            let img = decode_image(&bytes, path)?;
            let features = extract_features(&img, params)?;
            Ok(GalleryEntry {
                code: code.clone(),
                source_digest: digest_bytes(&bytes),
                features: features.iter().map(IndexedFeature::from).collect(),
            })
        })
        .collect();

    let mut index = GalleryIndex::new();
    let mut errors = Vec::new();
    let mut warnings = Vec::new();
    for ((path, _), res) in items.iter().zip(results) {
        match res {
            Ok(entry) => {
                if entry.features.is_empty() {
                    let msg = format!("{}: no keypoints, entry kept with empty descriptors", path.display());
                    warn!("{msg}");
                    warnings.push(msg);
                }
                index.push(entry)?;
            }
            Err(e) => {
                warn!("{e}");
                errors.push(FileError {
                    path: path.clone(),
                    message: e.to_string(),
                });
            }
        }
    }
    Ok(IngestReport {
        index,
        errors,
        warnings,
    })
}

pub fn write_index<W: Write>(index: &GalleryIndex, mut w: W) -> std::io::Result<()> {
    let invalid = |m: String| std::io::Error::new(std::io::ErrorKind::InvalidInput, m);
    w.write_all(&INDEX_MAGIC)?;
    w.write_all(&INDEX_VERSION.to_le_bytes())?;
    let count = u32::try_from(index.len()).map_err(|_| invalid("too many entries".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for e in index.entries() {
        let code = e.code.as_bytes();
        let len = u16::try_from(code.len())
            .map_err(|_| invalid(format!("code {:?} longer than 65535 bytes", e.code)))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(code)?;
        w.write_all(&e.source_digest)?;
        let n = u32::try_from(e.features.len()).map_err(|_| invalid("too many keypoints".into()))?;
        w.write_all(&n.to_le_bytes())?;
        for f in &e.features {
            for v in [f.x, f.y, f.sigma, f.orientation, f.response] {
                w.write_all(&v.to_le_bytes())?;
            }
            for v in f.descriptor.values() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()
}

pub fn save_index(index: &GalleryIndex, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_index(index, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("truncated while reading {what}"),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn error(&self, offset: usize, message: String) -> Error {
        Error::Format {
            offset: offset as u64,
            message,
        }
    }
}

pub fn read_index(bytes: &[u8]) -> Result<GalleryIndex> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != INDEX_MAGIC {
        return Err(r.error(0, format!("bad magic {magic:02x?}")));
    }
    let version = r.u16("version")?;
    if version != INDEX_VERSION {
        return Err(r.error(4, format!("unsupported version {version}")));
    }
    let count = r.u32("entry count")?;
    let mut index = GalleryIndex::new();
    for _ in 0..count {
        let code_at = r.pos;
        let len = r.u16("code length")? as usize;
        let code = std::str::from_utf8(r.take(len, "code")?)
            .map_err(|e| r.error(code_at + 2, format!("code is not UTF-8: {e}")))?
            .to_owned();
        let source_digest: ContentDigest = r.take(32, "digest")?.try_into().expect("32 bytes");
        let n = r.u32("keypoint count")? as usize;
        // cheap sanity check before allocating
        let need = n.saturating_mul(4 * (5 + DESCRIPTOR_LEN));
        if bytes.len() - r.pos < need {
            return Err(r.error(r.pos, format!("truncated: {n} keypoints need {need} bytes")));
        }
        let mut features = Vec::with_capacity(n);
        for _ in 0..n {
            let x = r.f32("x")?;
            let y = r.f32("y")?;
            let sigma = r.f32("sigma")?;
            let orientation = r.f32("orientation")?;
            let response = r.f32("response")?;
            let mut values = [0.0f32; DESCRIPTOR_LEN];
            for v in values.iter_mut() {
                *v = r.f32("descriptor")?;
            }
            features.push(IndexedFeature {
                x,
                y,
                sigma,
                orientation,
                response,
                descriptor: Descriptor::from_values(values),
            });
        }
        index
            .push(GalleryEntry {
                code,
                source_digest,
                features,
            })
            .map_err(|e| r.error(code_at, e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return Err(r.error(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(index)
}

pub fn load_index(path: impl AsRef<Path>) -> Result<GalleryIndex> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_index(&bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// `Phi(z_best) > quantile` and `raw_best >= abs_floor` (floor default 0.08).
    Zscore,
    /// `raw_best >= abs_floor` only (floor default 0.66).
    Absolute,
    /// Both gates, floor default 0.66.
    Both,
}

impl GateMode {
    pub fn default_floor(self) -> f64 {
        match self {
            GateMode::Zscore => 0.08,
            GateMode::Absolute | GateMode::Both => 0.66,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gates {
    pub mode: GateMode,
    pub gaussian_quantile: f64,
    /// Overrides the mode's default floor.
    pub abs_floor: Option<f64>,
}

impl Default for Gates {
    fn default() -> Self {
        Self {
            mode: GateMode::Both,
            gaussian_quantile: 0.66,
            abs_floor: None,
        }
    }
}

impl Gates {
    pub fn floor(&self) -> f64 {
        self.abs_floor.unwrap_or_else(|| self.mode.default_floor())
    }
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// A probe ready for identification.
#[derive(Debug, Clone)]
pub struct Probe {
    pub digest: ContentDigest,
    pub descriptors: Vec<Descriptor>,
}

impl Probe {
    pub fn from_path(path: impl AsRef<Path>, params: &FeatureParams) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let img = decode_image(&bytes, path)?;
        Ok(Self {
            digest: digest_bytes(&bytes),
            descriptors: features_to_descriptors(&extract_features(&img, params)?),
        })
    }

    pub fn from_image(img: &GrayImage, params: &FeatureParams) -> Result<Self> {
        Ok(Self {
            digest: digest_image(img),
            descriptors: features_to_descriptors(&extract_features(img, params)?),
        })
    }
}

fn features_to_descriptors(features: &[Feature]) -> Vec<Descriptor> {
    features.iter().map(|f| f.descriptor).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedCandidate {
    pub code: String,
    pub score: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "decision", content = "code", rename_all = "snake_case")]
pub enum Decision {
    Identified(String),
    Rejected,
}

/// Thresholds applied and how the best candidate fared against each.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GateRecord {
    pub mode: GateMode,
    pub gaussian_quantile: f64,
    pub abs_floor: f64,
    /// `Phi(z)` of the best candidate.
    pub best_quantile: f64,
    pub zscore_passed: bool,
    pub floor_passed: bool,
    pub tie_at_top: bool,
    pub degenerate_probe: bool,
    pub zero_variance: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentificationReport {
    #[serde(serialize_with = "ser_digest")]
    pub probe_digest: ContentDigest,
    #[serde(flatten)]
    pub decision: Decision,
    pub ranked: Vec<RankedCandidate>,
    pub gates: GateRecord,
}

fn ser_digest<S: serde::Serializer>(d: &ContentDigest, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&hex(d))
}

/// Scores the probe against every entry, z-scores the scores over the
/// gallery and applies the gates to the top candidate.
pub fn identify(
    probe: &Probe,
    index: &GalleryIndex,
    gates: &Gates,
    match_params: &MatchParams,
) -> Result<IdentificationReport> {
    if index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    let scores: Vec<f64> = index
        .entries()
        .par_iter()
        .map(|e| lowe_similarity(&probe.descriptors, &e.descriptors(), match_params).value)
        .collect();

    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let std = (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt();
    let zero_variance = std < MIN_SCORE_STD;

    let mut ranked: Vec<RankedCandidate> = index
        .entries()
        .iter()
        .zip(&scores)
        .map(|(e, &score)| RankedCandidate {
            code: e.code.clone(),
            score,
            z: if zero_variance { 0.0 } else { (score - mean) / std },
        })
        .collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.code.cmp(&b.code)));

    let best = &ranked[0];
    let floor = gates.floor();
    let best_quantile = normal_cdf(best.z);
    let zscore_passed = best_quantile > gates.gaussian_quantile;
    let floor_passed = best.score >= floor;
    let degenerate_probe = probe.descriptors.is_empty();
    let accepted = !degenerate_probe
        && match gates.mode {
            GateMode::Absolute => floor_passed,
            GateMode::Zscore | GateMode::Both => zscore_passed && floor_passed,
        };
    let decision = if accepted {
        Decision::Identified(best.code.clone())
    } else {
        Decision::Rejected
    };
    let tie_at_top = ranked.len() > 1 && ranked[1].score == best.score;

    Ok(IdentificationReport {
        probe_digest: probe.digest,
        gates: GateRecord {
            mode: gates.mode,
            gaussian_quantile: gates.gaussian_quantile,
            abs_floor: floor,
            best_quantile,
            zscore_passed,
            floor_passed,
            tie_at_top,
            degenerate_probe,
            zero_variance,
        },
        ranked,
        decision,
    })
}

/// A labelled probe; `truth = None` means the subject is absent from the gallery.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledProbe {
    pub path: PathBuf,
    pub truth: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn record(&mut self, truth: Option<&str>, decision: &Decision) {
        match (truth, decision) {
            (Some(t), Decision::Identified(c)) if c == t => self.tp += 1,
            (_, Decision::Identified(_)) => self.fp += 1,
            (Some(_), Decision::Rejected) => self.fn_ += 1,
            (None, Decision::Rejected) => self.tn += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `None` when no probe was identified.
    pub fn precision(&self) -> Option<f64> {
        let d = self.tp + self.fp;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }

    /// `None` when no present-subject probe was seen.
    pub fn recall(&self) -> Option<f64> {
        let d = self.tp + self.fn_;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    #[serde(flatten)]
    pub confusion: Confusion,
    pub errors: Vec<FileError>,
}

/// Runs [`identify`] for every probe. A true code missing from the index
/// still counts as present (rejections become false negatives).
pub fn evaluate(
    probes: &[LabeledProbe],
    index: &GalleryIndex,
    gates: &Gates,
    feature_params: &FeatureParams,
    match_params: &MatchParams,
) -> Result<Evaluation> {
    if index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    let mut confusion = Confusion::default();
    let mut errors = Vec::new();
    for probe in probes {
        let outcome = Probe::from_path(&probe.path, feature_params)
            .and_then(|p| identify(&p, index, gates, match_params));
        match outcome {
            Ok(report) => confusion.record(probe.truth.as_deref(), &report.decision),
            Err(e) => errors.push(FileError {
                path: probe.path.clone(),
                message: e.to_string(),
            }),
        }
    }
    Ok(Evaluation {
        precision: confusion.precision(),
        recall: confusion.recall(),
        confusion,
        errors,
    })
}

/// Same as [`evaluate`] on in-memory images.
pub fn evaluate_images(
    probes: &[(GrayImage, Option<String>)],
    index: &GalleryIndex,
    gates: &Gates,
    feature_params: &FeatureParams,
    match_params: &MatchParams,
) -> Result<Evaluation> {
    if index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    let mut confusion = Confusion::default();
    let mut errors = Vec::new();
    for (i, (img, truth)) in probes.iter().enumerate() {
        match Probe::from_image(img, feature_params).and_then(|p| identify(&p, index, gates, match_params)) {
            Ok(report) => confusion.record(truth.as_deref(), &report.decision),
            Err(e) => errors.push(FileError {
                path: PathBuf::from(format!("<probe {i}>")),
                message: e.to_string(),
            }),
        }
    }
    Ok(Evaluation {
        precision: confusion.precision(),
        recall: confusion.recall(),
        confusion,
        errors,
    })
}

/// Builds an entry straight from an in-memory image.
pub fn entry_from_image(code: &str, img: &GrayImage, params: &FeatureParams) -> Result<GalleryEntry> {
    Ok(GalleryEntry {
        code: code.to_owned(),
        source_digest: digest_image(img),
        features: extract_features(img, params)?
            .iter()
            .map(IndexedFeature::from)
            .collect(),
    })
}
