//! Run directories: metrics document, echoed scenario, CSV tables and a digest manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::scenario::{HarnessError, Stage};
use crate::sim::{RunReport, SweepAxis};

pub const MANIFEST: &str = "manifest.json";
pub const REPORT: &str = "report.json";
pub const SCENARIO: &str = "scenario.toml";
pub const PSD: &str = "psd.csv";
pub const CONSTELLATION: &str = "constellation.csv";
pub const SWEEP: &str = "sweep.json";
pub const SUMMARY: &str = "summary.csv";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub files: Vec<ManifestEntry>,
}

/// Sweep-level document; each point lives in its own run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepDocument {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub runs: Vec<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Stage {
        stage: Stage::Output,
        message: e.to_string(),
    }
}

/// `freq_hz,pre_db,post_db`, one row per bin.
pub fn psd_table(report: &RunReport) -> String {
    let (pre, post) = (&report.pre.spectrum, &report.post.spectrum);
    let mut out = String::from("freq_hz,pre_db,post_db\n");
    for ((f, a), b) in pre.freqs.iter().zip(&pre.psd_db).zip(&post.psd_db) {
        let _ = writeln!(out, "{f},{a},{b}");
    }
    out
}

/// `tag,i,q` with tag `pre` or `post`, one row per measured symbol.
pub fn constellation_table(report: &RunReport) -> String {
    let mut out = String::from("tag,i,q\n");
    for (tag, evm) in [("pre", &report.pre.evm), ("post", &report.post.evm)] {
        for z in &evm.constellation {
            let _ = writeln!(out, "{tag},{},{}", z.re, z.im);
        }
    }
    out
}

fn write_files(dir: &Path, files: &[(&str, Vec<u8>)]) -> Result<Manifest, HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (name, bytes) in files {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(io_err(&path))?;
    }
    let names: Vec<String> = files.iter().map(|(n, _)| n.to_string()).collect();
    write_manifest(dir, &names)
}

/// Digests the named files as they are on disk and writes the manifest.
fn write_manifest(dir: &Path, names: &[String]) -> Result<Manifest, HarnessError> {
    let mut manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        files: Vec::with_capacity(names.len()),
    };
    for name in names {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        manifest.files.push(ManifestEntry {
            path: name.clone(),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        });
    }
    let path = dir.join(MANIFEST);
    let text = serde_json::to_vec_pretty(&manifest).map_err(format_err)?;
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(manifest)
}

/// Writes one run directory and returns its manifest.
pub fn emit_outputs(report: &RunReport, out_dir: &Path) -> Result<Manifest, HarnessError> {
    let json = serde_json::to_vec_pretty(report).map_err(format_err)?;
    let toml = report.scenario.to_toml()?;
    write_files(
        out_dir,
        &[
            (REPORT, json),
            (SCENARIO, toml.into_bytes()),
            (PSD, psd_table(report).into_bytes()),
            (CONSTELLATION, constellation_table(report).into_bytes()),
        ],
    )
}

/// One row per sweep point.
pub fn summary_table(axis: SweepAxis, values: &[f64], reports: &[RunReport]) -> String {
    let mut out = format!(
        "{},antenna_sir_db,pre_evm_percent,post_evm_percent,suppression_db,residual_interference_db\n",
        axis.name()
    );
    for (v, r) in values.iter().zip(reports) {
        let sir = r.sir_db.map(|s| s.to_string()).unwrap_or_default();
        let resid = r
            .tune
            .as_ref()
            .map(|t| t.residual_interference_power_db.to_string())
            .unwrap_or_default();
        let _ = writeln!(
            out,
            "{v},{sir},{},{},{},{resid}",
            r.pre.evm.evm_rms_percent, r.post.evm.evm_rms_percent, r.suppression_db
        );
    }
    out
}

fn run_dir_name(index: usize) -> String {
    format!("run_{index:03}")
}

/// Writes a sweep: one run directory per value plus a summary and manifest at the top.
pub fn emit_sweep(axis: SweepAxis, values: &[f64], reports: &[RunReport], out_dir: &Path) -> Result<Manifest, HarnessError> {
    let runs: Vec<String> = (0..reports.len()).map(run_dir_name).collect();
    for (r, name) in reports.iter().zip(&runs) {
        emit_outputs(r, &out_dir.join(name))?;
    }
    let doc = SweepDocument {
        axis,
        values: values.to_vec(),
        runs: runs.clone(),
    };
    write_files(
        out_dir,
        &[
            (SWEEP, serde_json::to_vec_pretty(&doc).map_err(format_err)?),
            (SUMMARY, summary_table(axis, values, reports).into_bytes()),
        ],
    )?;
    let mut names = vec![SWEEP.to_string(), SUMMARY.to_string()];
    names.extend(runs.iter().map(|r| format!("{r}/{MANIFEST}")));
    write_manifest(out_dir, &names)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, HarnessError> {
    let path = dir.join(MANIFEST);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    serde_json::from_slice(&bytes).map_err(|e| HarnessError::Parse {
        origin: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Checks every digest listed in the manifest.
pub fn verify_manifest(dir: &Path) -> Result<Manifest, HarnessError> {
    let manifest = read_manifest(dir)?;
    for entry in &manifest.files {
        let path = dir.join(&entry.path);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let actual = sha256_hex(&bytes);
        if actual != entry.sha256 {
            return Err(HarnessError::DigestMismatch {
                path,
                expected: entry.sha256.clone(),
                actual,
            });
        }
    }
    Ok(manifest)
}

pub fn load_report(dir: &Path) -> Result<RunReport, HarnessError> {
    let path = dir.join(REPORT);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    serde_json::from_slice(&bytes).map_err(|e| HarnessError::Parse {
        origin: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Verifies a run or sweep directory, regenerates its tables from the metrics
/// document and returns a human-readable summary.
pub fn render_report(dir: &Path) -> Result<String, HarnessError> {
    verify_manifest(dir)?;
    if dir.join(SWEEP).exists() {
        let path = dir.join(SWEEP);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let doc: SweepDocument = serde_json::from_slice(&bytes).map_err(|e| HarnessError::Parse {
            origin: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut reports = Vec::with_capacity(doc.runs.len());
        for run in &doc.runs {
            let sub = dir.join(run);
            verify_manifest(&sub)?;
            check_tables(&sub)?;
            reports.push(load_report(&sub)?);
        }
        let summary = summary_table(doc.axis, &doc.values, &reports);
        let on_disk = fs::read_to_string(dir.join(SUMMARY)).map_err(io_err(dir))?;
        if summary != on_disk {
            return Err(HarnessError::Format(format!("{}: does not match regenerated table", dir.join(SUMMARY).display())));
        }
        return Ok(format!("sweep over {} ({} runs), digests verified\n{summary}", doc.axis.name(), reports.len()));
    }
    let report = check_tables(dir)?;
    Ok(run_summary(&report))
}

fn check_tables(dir: &Path) -> Result<RunReport, HarnessError> {
    let report = load_report(dir)?;
    for (name, regenerated) in [(PSD, psd_table(&report)), (CONSTELLATION, constellation_table(&report))] {
        let path: PathBuf = dir.join(name);
        if path.exists() {
            let on_disk = fs::read_to_string(&path).map_err(io_err(&path))?;
            if on_disk != regenerated {
                return Err(HarnessError::Format(format!("{}: does not match regenerated table", path.display())));
            }
        } else {
            fs::write(&path, regenerated).map_err(io_err(&path))?;
        }
    }
    Ok(report)
}

pub fn run_summary(r: &RunReport) -> String {
    let mut out = String::new();
    let name = if r.scenario.name.is_empty() { "(unnamed)" } else { &r.scenario.name };
    let _ = writeln!(out, "scenario            {name}");
    if let Some(sir) = r.sir_db {
        let _ = writeln!(out, "sir_db              {sir:.2}");
    }
    let _ = writeln!(out, "pre_evm_percent     {:.3}", r.pre.evm.evm_rms_percent);
    let _ = writeln!(out, "post_evm_percent    {:.3}", r.post.evm.evm_rms_percent);
    let _ = writeln!(out, "sideband_pre_db     {:.2}", r.pre.sideband_power_db);
    let _ = writeln!(out, "sideband_post_db    {:.2}", r.post.sideband_power_db);
    let _ = writeln!(out, "suppression_db      {:.2}", r.suppression_db);
    if let Some(t) = &r.tune {
        let _ = writeln!(out, "residual_db         {:.2}", t.residual_interference_power_db);
        for (k, c) in t.channels.iter().enumerate() {
            let _ = writeln!(
                out,
                "channel {k}           locked={} bias={:+.3} V atten={:.3} dB delay={:.4} ns",
                c.locked,
                c.settings.bias_voltage,
                c.settings.attenuation_db,
                c.settings.delay * 1e9
            );
        }
    }
    for w in &r.warnings {
        let _ = writeln!(out, "warning: {w}");
    }
    out
}
