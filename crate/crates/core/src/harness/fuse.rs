//! Directory-level inference and scoring of fused images.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataio::{list_pair_dir, list_pairs, load_gray, load_image_pair, NormalizedImage};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, write_report_csv, MetricReport};
use crate::msfm::{msfm_forward, MsfmWeights};
use crate::scalar::Scalar;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusedEntry {
    pub id: String,
    pub ir: PathBuf,
    pub vis: PathBuf,
    pub output: PathBuf,
    pub runtime_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedEntry {
    pub id: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub checkpoint: PathBuf,
    pub input_dir: PathBuf,
    pub output_dir: PathBuf,
    pub fused: Vec<FusedEntry>,
    pub skipped: Vec<SkippedEntry>,
    pub total_runtime_ms: f64,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

/// Fuses every pair under `input/ir` and `input/vis` into `output`, keeping
/// file names, and writes `manifest.json` there. Infrared files without a
/// visible counterpart are skipped and listed.
pub fn fuse_directory(checkpoint: &Path, input: &Path, output: &Path) -> Result<Manifest> {
    let ck = Checkpoint::<f32>::load(checkpoint)?;
    fuse_directory_with(&ck.msfm, checkpoint, input, output)
}

pub fn fuse_directory_with<T: Scalar>(
    weights: &MsfmWeights<T>,
    checkpoint: &Path,
    input: &Path,
    output: &Path,
) -> Result<Manifest> {
    let listing = list_pair_dir(input)?;
    fs::create_dir_all(output).map_err(|e| Error::io(format!("creating {}", output.display()), e))?;
    let start = Instant::now();
    let mut fused = Vec::with_capacity(listing.pairs.len());
    for (name, ir_path, vis_path) in &listing.pairs {
        let t = Instant::now();
        let pair = load_image_pair::<T>(ir_path, vis_path)?;
        let f = msfm_forward(weights, &pair.infrared, &pair.visible)?;
        let out = output.join(name);
        f.to_raw().save(&out)?;
        log::info!("fused {name}");
        fused.push(FusedEntry {
            id: name.clone(),
            ir: ir_path.clone(),
            vis: vis_path.clone(),
            output: out,
            runtime_ms: t.elapsed().as_secs_f64() * 1e3,
        });
    }
    let skipped = listing
        .missing_visible
        .iter()
        .map(|id| SkippedEntry {
            id: id.clone(),
            reason: "no visible counterpart".into(),
        })
        .collect();
    let manifest = Manifest {
        checkpoint: checkpoint.to_path_buf(),
        input_dir: input.to_path_buf(),
        output_dir: output.to_path_buf(),
        fused,
        skipped,
        total_runtime_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    let path = output.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(manifest)
}

/// Scores fused images (from this tool or any other method) against their
/// sources. Files are matched by name across the three directories; fused
/// files without both sources are ignored. Writes the per-image CSV with a
/// mean row and returns the rows.
pub fn evaluate_directory(fused: &Path, ir: &Path, vis: &Path, csv: &Path) -> Result<Vec<(String, MetricReport)>> {
    let listing = list_pairs(ir, vis)?;
    let mut rows = Vec::new();
    for (name, ir_path, vis_path) in &listing.pairs {
        let f_path = fused.join(name);
        if !f_path.is_file() {
            continue;
        }
        let pair = load_image_pair::<f64>(ir_path, vis_path)?;
        let f = NormalizedImage::<f64>::from_raw(&load_gray(&f_path)?);
        if f.dims() != pair.dims() {
            return Err(Error::DimensionMismatch(format!(
                "fused {name} is {:?}, sources are {:?}",
                f.dims(),
                pair.dims()
            )));
        }
        rows.push((name.clone(), evaluate(&f, &pair.infrared, &pair.visible)?));
    }
    if rows.is_empty() {
        return Err(Error::EmptyReport);
    }
    if let Some(parent) = csv.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
    }
    write_report_csv(csv, &rows)?;
    Ok(rows)
}
