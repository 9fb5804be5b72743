//! Grid over the content and global loss weights.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::TrainConfig;
use super::train::{train, TrainSummary};
use crate::checkpoint::Checkpoint;
use crate::dataio::{ImagePair, PatchSet, RawImage};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::metrics::{evaluate, MetricReport};
use crate::msfm::msfm_forward;
use crate::scalar::Scalar;

pub const DEFAULT_ALPHAS: [f64; 5] = [4.0, 7.0, 10.0, 13.0, 16.0];
pub const DEFAULT_GAMMAS: [f64; 5] = [1.0, 1.5, 2.0, 2.5, 3.0];
pub const SWEEP_EPOCHS: usize = 10;
const TILE_GAP: usize = 2;

/// The training config of one grid cell: `beta` stays at 1.
pub fn cell_config(base: &TrainConfig, alpha: f64, gamma: f64, epochs: usize, dir: &Path) -> TrainConfig {
    let mut cfg = base.clone();
    cfg.loss_weights = LossWeights { alpha, beta: 1.0, gamma };
    cfg.epochs = epochs;
    cfg.checkpoint_dir = dir.join(format!("a{alpha}_g{gamma}"));
    cfg.loss_log = None;
    cfg
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepCell {
    pub alpha: f64,
    pub gamma: f64,
    pub config: TrainConfig,
    pub summary: TrainSummary,
    /// Mean over the evaluation pairs.
    pub report: MetricReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepResult {
    /// Row-major over `alphas × gammas`.
    pub cells: Vec<SweepCell>,
    pub contact_sheet: PathBuf,
    pub metric_grid: PathBuf,
}

/// Trains one model per `(alpha, gamma)` on `patches`, fuses `eval_pairs`
/// with each, and writes `contact_sheet.png` (rows alpha, columns gamma,
/// showing the first evaluation pair) and `metric_grid.csv` under `out`.
pub fn sweep<T: Scalar>(
    alphas: &[f64],
    gammas: &[f64],
    base: &TrainConfig,
    patches: &PatchSet<T>,
    eval_pairs: &[ImagePair<T>],
    epochs: usize,
    out: &Path,
) -> Result<SweepResult> {
    if alphas.is_empty() || gammas.is_empty() {
        return Err(Error::Config("sweep grids must be non-empty".into()));
    }
    if let Some(v) = alphas.iter().chain(gammas).find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::Config(format!("sweep weight {v} is not a finite non-negative number")));
    }
    if eval_pairs.is_empty() {
        return Err(Error::InsufficientPairs { needed: 1, available: 0 });
    }
    fs::create_dir_all(out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    let mut cells = Vec::with_capacity(alphas.len() * gammas.len());
    let mut tiles = Vec::with_capacity(cells.capacity());
    for &alpha in alphas {
        for &gamma in gammas {
            let cfg = cell_config(base, alpha, gamma, epochs, out);
            log::info!("sweep cell alpha {alpha} gamma {gamma}");
            let summary = train(&cfg, patches)?;
            let last = &summary.epochs.last().expect("epochs ≥ 1").checkpoint;
            let weights = Checkpoint::<T>::load(last)?.msfm;
            let mut reports = Vec::with_capacity(eval_pairs.len());
            for (i, p) in eval_pairs.iter().enumerate() {
                let f = msfm_forward(&weights, &p.infrared, &p.visible)?;
                reports.push(evaluate(&f, &p.infrared, &p.visible)?);
                if i == 0 {
                    tiles.push(f.to_raw());
                }
            }
            cells.push(SweepCell {
                alpha,
                gamma,
                config: cfg,
                summary,
                report: MetricReport::mean(&reports)?,
            });
        }
    }
    let contact_sheet = out.join("contact_sheet.png");
    tile_sheet(&tiles, alphas.len(), gammas.len())?.save(&contact_sheet)?;
    let metric_grid = out.join("metric_grid.csv");
    write_grid(&metric_grid, &cells)?;
    Ok(SweepResult {
        cells,
        contact_sheet,
        metric_grid,
    })
}

fn tile_sheet(tiles: &[RawImage], rows: usize, cols: usize) -> Result<RawImage> {
    let (th, tw) = (tiles[0].height(), tiles[0].width());
    let h = rows * th + (rows - 1) * TILE_GAP;
    let w = cols * tw + (cols - 1) * TILE_GAP;
    let mut px = vec![255u8; h * w];
    for (k, t) in tiles.iter().enumerate() {
        let (oy, ox) = ((k / cols) * (th + TILE_GAP), (k % cols) * (tw + TILE_GAP));
        for y in 0..th {
            let dst = (oy + y) * w + ox;
            px[dst..dst + tw].copy_from_slice(&t.pixels()[y * tw..(y + 1) * tw]);
        }
    }
    RawImage::new(h, w, px)
}

fn write_grid(path: &Path, cells: &[SweepCell]) -> Result<()> {
    let err = |e: csv::Error| Error::io(format!("writing {}", path.display()), e.into());
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["alpha", "gamma", "final_total", "en", "sd", "sf", "vif", "qabf", "mi"])
        .map_err(err)?;
    for c in cells {
        let mut rec = vec![
            c.alpha.to_string(),
            c.gamma.to_string(),
            c.summary.last_mean_total().unwrap_or(f64::NAN).to_string(),
        ];
        rec.extend(c.report.values().iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}
