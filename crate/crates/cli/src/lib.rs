//! `odid` command line: build a gallery index, identify probes, compare two
//! images and evaluate labelled probe sets.
//!
//! Exit codes: 0 success / identified, 1 error, 2 partial ingest, 3 rejected.

pub mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::warn;
use odid_core::features::Feature;
use odid_core::gallery::{self, Decision, LabeledProbe, Probe};
use odid_core::imgio::{load_image, Canvas, Color, Overlay};
use odid_core::matcher::match_descriptors;
use odid_core::{extract_features, Descriptor};
use serde::Serialize;
use serde_json::Value;

use crate::config::{parse_format, parse_gate, parse_matcher, OutputFormat, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_PARTIAL: i32 = 2;
pub const EXIT_REJECTED: i32 = 3;

/// Extensions picked up when indexing a directory.
pub const IMAGE_EXTENSIONS: &[&str] = &["png", "pgm", "ppm", "pnm", "pbm"];

/// Probe label for subjects that are not in the gallery.
pub const ABSENT: &str = "ABSENT";

#[derive(Debug, Parser)]
#[command(name = "odid", version, about = "Keypoint-based image identification against a labelled gallery")]
pub struct Cli {
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Extract features from every image in a directory and write an index.
    Index {
        image_dir: PathBuf,
        /// CSV of `filename,code` rows.
        codes: PathBuf,
        out: PathBuf,
    },
    /// Rank the gallery against one probe image and accept or reject.
    Identify { probe: PathBuf, index: PathBuf },
    /// Similarity score between two images.
    Match {
        a: PathBuf,
        b: PathBuf,
        /// Write a side-by-side PNG with keypoints and good matches.
        #[arg(long)]
        viz: Option<PathBuf>,
    },
    /// Precision and recall over a CSV of `filename,code|ABSENT` probes.
    Eval { probes: PathBuf, index: PathBuf },
}

/// Flags that override the config file.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub octaves: Option<usize>,
    #[arg(long, global = true)]
    pub intervals: Option<usize>,
    #[arg(long, global = true)]
    pub base_sigma: Option<f64>,
    #[arg(long, global = true)]
    pub contrast: Option<f64>,
    #[arg(long, global = true)]
    pub edge_r: Option<f64>,
    /// Ratio-test threshold.
    #[arg(long, global = true)]
    pub ratio: Option<f64>,
    /// brute | approx
    #[arg(long, global = true)]
    pub matcher: Option<String>,
    /// zscore | absolute | both
    #[arg(long, global = true)]
    pub gate: Option<String>,
    /// Required Gaussian quantile of the best z-score.
    #[arg(long, global = true)]
    pub quantile: Option<f64>,
    /// Minimum raw score of the best candidate.
    #[arg(long, global = true)]
    pub abs_floor: Option<f64>,
    #[arg(long, global = true)]
    pub root_kernel: Option<bool>,
    #[arg(long, global = true)]
    pub max_keypoints: Option<usize>,
    /// json | text
    #[arg(long, global = true)]
    pub format: Option<String>,
}

impl Overrides {
    /// Defaults, then the config file, then these flags.
    pub fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut c = RunConfig::default();
        if let Some(path) = &self.config {
            c.apply_file(path)?;
        }
        let pyr = &mut c.features.pyramid;
        if let Some(v) = self.octaves {
            pyr.num_octaves = v;
        }
        if let Some(v) = self.intervals {
            pyr.intervals = v;
        }
        if let Some(v) = self.base_sigma {
            pyr.base_sigma = v;
        }
        if let Some(v) = self.contrast {
            pyr.contrast_threshold = v;
        }
        if let Some(v) = self.edge_r {
            pyr.edge_r = v;
        }
        if let Some(v) = self.ratio {
            c.matching.ratio_threshold = v;
        }
        if let Some(v) = &self.matcher {
            c.matching.matcher = parse_matcher(v)?;
        }
        if let Some(v) = &self.gate {
            c.gates.mode = parse_gate(v)?;
        }
        if let Some(v) = self.quantile {
            c.gates.gaussian_quantile = v;
        }
        if let Some(v) = self.abs_floor {
            c.gates.abs_floor = Some(v);
        }
        if let Some(v) = self.root_kernel {
            c.matching.root_kernel = v;
        }
        if let Some(v) = self.max_keypoints {
            c.features.max_keypoints = Some(v);
        }
        if let Some(v) = &self.format {
            c.format = parse_format(v)?;
        }
        c.validate()?;
        Ok(c)
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli, out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_ERROR
        }
    }
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> anyhow::Result<i32> {
    let config = cli.overrides.resolve()?;
    match &cli.command {
        Command::Index { image_dir, codes, out: path } => cmd_index(image_dir, codes, path, &config, out),
        Command::Identify { probe, index } => cmd_identify(probe, index, &config, out),
        Command::Match { a, b, viz } => cmd_match(a, b, &config, viz.as_deref(), out),
        Command::Eval { probes, index } => cmd_eval(probes, index, &config, out),
    }
}

/// Pretty JSON, or one `path: value` line per leaf in text mode.
pub fn emit<T: Serialize>(value: &T, format: OutputFormat, out: &mut dyn Write) -> anyhow::Result<()> {
    let value = serde_json::to_value(value)?;
    match format {
        OutputFormat::Json => writeln!(out, "{}", serde_json::to_string_pretty(&value)?)?,
        OutputFormat::Text => {
            let mut lines = Vec::new();
            flatten_text("", &value, &mut lines);
            for line in lines {
                writeln!(out, "{line}")?;
            }
        }
    }
    Ok(())
}

fn flatten_text(prefix: &str, value: &Value, lines: &mut Vec<String>) {
    let join = |k: &str| {
        if prefix.is_empty() {
            k.to_owned()
        } else {
            format!("{prefix}.{k}")
        }
    };
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                flatten_text(&join(k), v, lines);
            }
        }
        Value::Array(items) if !items.is_empty() => {
            for (i, v) in items.iter().enumerate() {
                flatten_text(&join(&i.to_string()), v, lines);
            }
        }
        Value::Array(_) => lines.push(format!("{prefix}: []")),
        Value::String(s) => lines.push(format!("{prefix}: {s}")),
        other => lines.push(format!("{prefix}: {other}")),
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Two-column CSV rows, skipping blank lines and a `filename,...` header.
fn read_pairs(path: &Path) -> anyhow::Result<Vec<(String, String)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .with_context(|| format!("cannot read {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.with_context(|| format!("{}: malformed CSV", path.display()))?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        if record.len() != 2 {
            bail!("{} row {}: expected 2 columns, got {}", path.display(), i + 1, record.len());
        }
        if i == 0 && record[0].eq_ignore_ascii_case("filename") {
            continue;
        }
        rows.push((record[0].to_owned(), record[1].to_owned()));
    }
    Ok(rows)
}

#[derive(Debug, Serialize)]
struct IndexSummary {
    entries: usize,
    keypoints: usize,
    skipped: Vec<String>,
    errors: Vec<gallery::FileError>,
    warnings: Vec<String>,
}

pub fn cmd_index(
    image_dir: &Path,
    codes_file: &Path,
    out_path: &Path,
    config: &RunConfig,
    out: &mut dyn Write,
) -> anyhow::Result<i32> {
    let codes: BTreeMap<String, String> = read_pairs(codes_file)?.into_iter().collect();
    let mut files: Vec<PathBuf> = std::fs::read_dir(image_dir)
        .with_context(|| format!("cannot list {}", image_dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    files.sort();

    let mut warnings = Vec::new();
    let mut skipped = Vec::new();
    let mut items = Vec::new();
    for path in &files {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        match codes.get(name) {
            Some(code) => items.push((path.clone(), code.clone())),
            None => {
                let msg = format!("{name}: no code in {}, skipped", codes_file.display());
                warn!("{msg}");
                warnings.push(msg);
                skipped.push(name.to_owned());
            }
        }
    }
    if files.is_empty() {
        let msg = format!("{}: no images found", image_dir.display());
        warn!("{msg}");
        warnings.push(msg);
    }

    let report = gallery::ingest(&items, &config.features)?;
    gallery::save_index(&report.index, out_path)?;
    warnings.extend(report.warnings);
    let summary = IndexSummary {
        entries: report.index.len(),
        keypoints: report.index.entries().iter().map(|e| e.keypoint_count()).sum(),
        skipped,
        errors: report.errors,
        warnings,
    };
    emit(&summary, config.format, out)?;
    Ok(if summary.errors.is_empty() { EXIT_OK } else { EXIT_PARTIAL })
}

pub fn cmd_identify(probe: &Path, index_path: &Path, config: &RunConfig, out: &mut dyn Write) -> anyhow::Result<i32> {
    let index = gallery::load_index(index_path)?;
    let probe = Probe::from_path(probe, &config.features)?;
    let report = gallery::identify(&probe, &index, &config.gates, &config.matching)?;
    emit(&report, config.format, out)?;
    Ok(match report.decision {
        Decision::Identified(_) => EXIT_OK,
        Decision::Rejected => EXIT_REJECTED,
    })
}

#[derive(Debug, Serialize)]
struct MatchSummary {
    keypoints_a: usize,
    keypoints_b: usize,
    good_matches: usize,
    lowe_score: f64,
}

const KEYPOINT_COLOR: Color = [255, 200, 0];
const MATCH_COLOR: Color = [0, 220, 60];

fn descriptors(features: &[Feature]) -> Vec<Descriptor> {
    features.iter().map(|f| f.descriptor).collect()
}

fn keypoint_overlays(features: &[Feature], dx: f32, overlays: &mut Vec<Overlay>) {
    for f in features {
        let k = &f.keypoint;
        let r = (2.0 * k.sigma).round().max(2.0);
        let (cx, cy) = (k.x + dx, k.y);
        overlays.push(Overlay::Circle {
            cx: cx.round() as i64,
            cy: cy.round() as i64,
            radius: r as i64,
            color: KEYPOINT_COLOR,
        });
        overlays.push(Overlay::Line {
            x0: cx.round() as i64,
            y0: cy.round() as i64,
            x1: (cx + r * k.orientation.cos()).round() as i64,
            y1: (cy + r * k.orientation.sin()).round() as i64,
            color: KEYPOINT_COLOR,
        });
    }
}

pub fn cmd_match(
    a: &Path,
    b: &Path,
    config: &RunConfig,
    viz_out: Option<&Path>,
    out: &mut dyn Write,
) -> anyhow::Result<i32> {
    let img_a = load_image(a)?;
    let img_b = load_image(b)?;
    let fa = extract_features(&img_a, &config.features)?;
    let fb = extract_features(&img_b, &config.features)?;
    let outcome = match_descriptors(&descriptors(&fa), &descriptors(&fb), &config.matching);

    if let Some(path) = viz_out {
        let mut canvas = Canvas::new(img_a.width() + img_b.width(), img_a.height().max(img_b.height()));
        canvas.blit_gray(&img_a, 0, 0);
        canvas.blit_gray(&img_b, img_a.width(), 0);
        let offset = img_a.width() as f32;
        let mut overlays = Vec::new();
        keypoint_overlays(&fa, 0.0, &mut overlays);
        keypoint_overlays(&fb, offset, &mut overlays);
        for p in &outcome.pairs {
            let (ka, kb) = (&fa[p.query_idx].keypoint, &fb[p.train_idx].keypoint);
            overlays.push(Overlay::Line {
                x0: ka.x.round() as i64,
                y0: ka.y.round() as i64,
                x1: (kb.x + offset).round() as i64,
                y1: kb.y.round() as i64,
                color: MATCH_COLOR,
            });
        }
        for o in &overlays {
            canvas.draw(o);
        }
        canvas.save_png(path)?;
    }

    emit(
        &MatchSummary {
            keypoints_a: fa.len(),
            keypoints_b: fb.len(),
            good_matches: outcome.score.good_matches,
            lowe_score: outcome.score.value,
        },
        config.format,
        out,
    )?;
    Ok(EXIT_OK)
}

pub fn cmd_eval(probes_csv: &Path, index_path: &Path, config: &RunConfig, out: &mut dyn Write) -> anyhow::Result<i32> {
    let index = gallery::load_index(index_path)?;
    let base = probes_csv.parent().unwrap_or(Path::new(""));
    let probes: Vec<LabeledProbe> = read_pairs(probes_csv)?
        .into_iter()
        .map(|(file, truth)| LabeledProbe {
            path: base.join(file),
            truth: (truth != ABSENT).then_some(truth),
        })
        .collect();
    let eval = gallery::evaluate(&probes, &index, &config.gates, &config.features, &config.matching)?;
    for e in &eval.errors {
        warn!("{}: {}", e.path.display(), e.message);
    }
    emit(&eval, config.format, out)?;
    Ok(EXIT_OK)
}
