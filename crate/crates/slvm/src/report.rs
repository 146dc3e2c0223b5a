//! Structured-text report and run-manifest serialization.
//!
//! Reports are flat `key = value` text with a stable key order and
//! 4-decimal fixed-point IoUs, so two runs over the same registry compare
//! byte for byte. The run manifest records what a command did: its inputs,
//! outputs, and the digests that reproduce it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::dataset::ClassId;
use crate::error::{Error, Result};
use crate::eval::MetricsReport;
use crate::model::AblationFlags;

pub fn report_to_string(report: &MetricsReport) -> String {
    let mut out = String::new();
    writeln!(out, "shots = {}", report.shots).unwrap();
    writeln!(out, "ablation_apl = {}", report.ablation_flags.apl as u8).unwrap();
    writeln!(out, "ablation_pgml = {}", report.ablation_flags.pgml as u8).unwrap();
    writeln!(out, "ablation_fsla = {}", report.ablation_flags.fsla as u8).unwrap();
    writeln!(out, "config_digest = {}", report.config_digest).unwrap();
    writeln!(out, "registry_digest = {}", report.registry_digest).unwrap();
    for (class, iou) in &report.per_class_iou {
        writeln!(out, "class_iou {class} = {iou:.4}").unwrap();
    }
    for (fold, miou) in &report.fold_miou {
        writeln!(out, "fold_miou {fold} = {miou:.4}").unwrap();
    }
    writeln!(out, "mean_miou = {:.4}", report.mean_miou).unwrap();
    out
}

pub fn parse_report(text: &str, origin: &Path) -> Result<MetricsReport> {
    let mut shots = None;
    let mut apl = None;
    let mut pgml = None;
    let mut fsla = None;
    let mut config_digest = None;
    let mut registry_digest = None;
    let mut per_class_iou: BTreeMap<ClassId, f64> = BTreeMap::new();
    let mut fold_miou: BTreeMap<usize, f64> = BTreeMap::new();
    let mut mean_miou = None;

    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::format(origin, format!("report line {} lacks `=`", lineno + 1))
        })?;
        let (key, value) = (key.trim(), value.trim());
        let bad = |what: &str| Error::format(origin, format!("line {}: bad {what}", lineno + 1));
        match key.split_whitespace().collect::<Vec<_>>().as_slice() {
            ["shots"] => shots = Some(value.parse().map_err(|_| bad("shots"))?),
            ["ablation_apl"] => apl = Some(value == "1"),
            ["ablation_pgml"] => pgml = Some(value == "1"),
            ["ablation_fsla"] => fsla = Some(value == "1"),
            ["config_digest"] => config_digest = Some(value.to_string()),
            ["registry_digest"] => registry_digest = Some(value.to_string()),
            ["class_iou", class] => {
                let class: ClassId = class.parse().map_err(|_| bad("class id"))?;
                per_class_iou.insert(class, value.parse().map_err(|_| bad("class iou"))?);
            }
            ["fold_miou", fold] => {
                let fold: usize = fold.parse().map_err(|_| bad("fold index"))?;
                fold_miou.insert(fold, value.parse().map_err(|_| bad("fold miou"))?);
            }
            ["mean_miou"] => mean_miou = Some(value.parse().map_err(|_| bad("mean miou"))?),
            _ => return Err(Error::format(origin, format!("unknown report key `{key}`"))),
        }
    }

    let missing = |what: &str| Error::format(origin, format!("report lacks {what}"));
    Ok(MetricsReport {
        per_class_iou,
        fold_miou,
        mean_miou: mean_miou.ok_or_else(|| missing("mean_miou"))?,
        shots: shots.ok_or_else(|| missing("shots"))?,
        ablation_flags: AblationFlags {
            apl: apl.ok_or_else(|| missing("ablation_apl"))?,
            pgml: pgml.ok_or_else(|| missing("ablation_pgml"))?,
            fsla: fsla.ok_or_else(|| missing("ablation_fsla"))?,
        },
        config_digest: config_digest.ok_or_else(|| missing("config_digest"))?,
        registry_digest: registry_digest.ok_or_else(|| missing("registry_digest"))?,
    })
}

pub fn write_report(report: &MetricsReport, path: &Path) -> Result<()> {
    fs::write(path, report_to_string(report)).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<MetricsReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_report(&text, path)
}

/// What one command run did: inputs, outputs, digests.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RunManifest {
    pub command: String,
    pub config_path: String,
    pub seed: u64,
    pub started: String,
    pub finished: String,
    pub output_paths: Vec<PathBuf>,
    /// Named digests (config, registry, params, ...), in insertion order.
    pub digests: Vec<(String, String)>,
}

pub fn manifest_to_string(m: &RunManifest) -> String {
    let mut out = String::new();
    writeln!(out, "command = {}", m.command).unwrap();
    writeln!(out, "config_path = {}", m.config_path).unwrap();
    writeln!(out, "seed = {}", m.seed).unwrap();
    writeln!(out, "started = {}", m.started).unwrap();
    writeln!(out, "finished = {}", m.finished).unwrap();
    for p in &m.output_paths {
        writeln!(out, "output = {}", p.display()).unwrap();
    }
    for (name, digest) in &m.digests {
        writeln!(out, "digest {name} = {digest}").unwrap();
    }
    out
}

pub fn parse_manifest(text: &str, origin: &Path) -> Result<RunManifest> {
    let mut m = RunManifest::default();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::format(origin, format!("manifest line {} lacks `=`", lineno + 1))
        })?;
        let (key, value) = (key.trim(), value.trim());
        match key.split_whitespace().collect::<Vec<_>>().as_slice() {
            ["command"] => m.command = value.to_string(),
            ["config_path"] => m.config_path = value.to_string(),
            ["seed"] => {
                m.seed = value.parse().map_err(|_| {
                    Error::format(origin, format!("line {}: bad seed", lineno + 1))
                })?
            }
            ["started"] => m.started = value.to_string(),
            ["finished"] => m.finished = value.to_string(),
            ["output"] => m.output_paths.push(PathBuf::from(value)),
            ["digest", name] => m.digests.push((name.to_string(), value.to_string())),
            _ => {
                return Err(Error::format(
                    origin,
                    format!("unknown manifest key `{key}`"),
                ))
            }
        }
    }
    Ok(m)
}

pub fn write_manifest(m: &RunManifest, path: &Path) -> Result<()> {
    fs::write(path, manifest_to_string(m)).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<RunManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path)
}
