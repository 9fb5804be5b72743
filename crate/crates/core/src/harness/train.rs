//! Mini-batch training of the fusion network.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::{lr_at, MaskKind, TrainConfig};
use crate::autograd::{Graph, Var};
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::dataio::{extract_patches, load_pair_dir, systematic_indices, ImagePair, PatchSet};
use crate::error::{Error, Result};
use crate::gfem::{init_gfem, GfemConfig, GfemWeights};
use crate::losses::{objective, LossBreakdown, LossFlags, LossWeights};
use crate::msfm::{init_msfm, BnPhase, MsfmConfig, MsfmPass, MsfmWeights};
use crate::optim::{Adam, AdamConfig};
use crate::saliency::{generate_mask_or_empty, validate_mask, SaliencyMask};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Stacked `[n, 1, p, p]` inputs in symmetric range with a binary mask.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub ir: Tensor<T>,
    pub vis: Tensor<T>,
    pub mask: Tensor<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.ir.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Gathers the listed patches; every patch needs an attached mask.
pub fn make_batch<T: Scalar>(patches: &PatchSet<T>, indices: &[usize]) -> Result<Batch<T>> {
    if indices.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let p = patches.patch_size();
    let (mut ir, mut vis, mut mask) = (Vec::new(), Vec::new(), Vec::new());
    for &i in indices {
        let pair = patches.patch(i)?;
        let m = patches
            .mask(i)
            .ok_or(Error::MissingMask(i))?;
        ir.extend_from_slice(pair.infrared.to_symmetric().pixels());
        vis.extend_from_slice(pair.visible.to_symmetric().pixels());
        mask.extend(m.data().iter().map(|&b| T::of(b as f64)));
    }
    let shape = [indices.len(), 1, p, p];
    Ok(Batch {
        ir: Tensor::new(&shape, ir)?,
        vis: Tensor::new(&shape, vis)?,
        mask: Tensor::new(&shape, mask)?,
    })
}

/// Per-parameter gradients of the weighted objective on one batch, along
/// with the breakdown and the batch statistics of every BN layer.
pub struct StepGradients<T> {
    pub breakdown: LossBreakdown,
    pub grads: BTreeMap<String, Tensor<T>>,
    pub bn_stats: Vec<(String, crate::autograd::BatchStats<T>)>,
}

/// Forward and backward on one batch without touching the weights. Returns
/// `None` when every loss term is disabled.
pub fn compute_gradients<T: Scalar>(
    msfm: &MsfmWeights<T>,
    gfem: &GfemWeights<T>,
    batch: &Batch<T>,
    weights: &LossWeights,
    flags: &LossFlags,
) -> Result<Option<StepGradients<T>>> {
    if !flags.any() {
        return Ok(None);
    }
    let mut g = Graph::new();
    let mut pass = MsfmPass::new(&mut g, msfm, true, BnPhase::Train);
    let ir = Var::constant(batch.ir.clone());
    let vis = Var::constant(batch.vis.clone());
    let mask = Var::constant(batch.mask.clone());
    let fused = pass.forward(&mut g, &ir, &vis)?;
    let obj = objective(&mut g, &fused, &ir, &vis, &mask, flags.global.then_some(gfem), weights, flags)?;
    let total = obj.total.expect("at least one term is enabled");
    let (bound, bn_stats, _) = pass.into_parts();
    let grads = g.backward(&total)?;
    let grads = bound.gradients(&grads);
    Ok(Some(StepGradients {
        breakdown: obj.breakdown,
        grads,
        bn_stats,
    }))
}

/// Fusion weights, frozen extractor and optimizer state.
pub struct Trainer<T> {
    pub msfm: MsfmWeights<T>,
    pub gfem: GfemWeights<T>,
    pub weights: LossWeights,
    pub flags: LossFlags,
    adam: Adam<T>,
    gfem_checksum: u64,
    step: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(msfm_seed: u64, gfem_seed: u64, weights: LossWeights, flags: LossFlags, adam: AdamConfig) -> Result<Self> {
        let msfm = init_msfm(&MsfmConfig::with_seed(msfm_seed))?;
        let gfem = init_gfem(&GfemConfig::with_seed(gfem_seed))?;
        Self::with_weights(msfm, gfem, weights, flags, adam)
    }

    pub fn with_weights(
        msfm: MsfmWeights<T>,
        gfem: GfemWeights<T>,
        weights: LossWeights,
        flags: LossFlags,
        adam: AdamConfig,
    ) -> Result<Self> {
        weights.validate()?;
        if !gfem.config.frozen {
            return Err(Error::Config("the global feature extractor must stay frozen".into()));
        }
        Ok(Self {
            gfem_checksum: gfem.params.checksum(),
            msfm,
            gfem,
            weights,
            flags,
            adam: Adam::new(adam),
            step: 0,
        })
    }

    /// Optimizer steps taken so far.
    pub fn steps(&self) -> usize {
        self.step
    }

    /// One Adam step. With every term disabled nothing runs and the
    /// breakdown is all zeros.
    pub fn train_step(&mut self, batch: &Batch<T>, lr: f64) -> Result<LossBreakdown> {
        let Some(sg) = compute_gradients(&self.msfm, &self.gfem, batch, &self.weights, &self.flags)? else {
            return Ok(LossBreakdown::default());
        };
        self.step += 1;
        if !sg.breakdown.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                detail: format!("{:?}", sg.breakdown),
            });
        }
        if let Some((name, _)) = sg.grads.iter().find(|(_, t)| !t.all_finite()) {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                detail: format!("gradient of {name}"),
            });
        }
        self.adam.step(&mut self.msfm.params, &sg.grads, lr)?;
        self.msfm.update_running_stats(&sg.bn_stats)?;
        if !self.msfm.all_finite() {
            return Err(Error::NonFinite(format!("weights after step {}", self.step)));
        }
        Ok(sg.breakdown)
    }

    /// Errors if the extractor weights changed since construction.
    pub fn check_gfem_unchanged(&self) -> Result<()> {
        if self.gfem.params.checksum() == self.gfem_checksum {
            Ok(())
        } else {
            Err(Error::Config("global feature extractor weights changed during training".into()))
        }
    }

    pub fn checkpoint(&self, meta: CheckpointMeta) -> Checkpoint<T> {
        Checkpoint {
            msfm: self.msfm.clone(),
            gfem: self.gfem.clone(),
            meta,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub lr: f64,
    pub mean: LossBreakdown,
    pub checkpoint: PathBuf,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub patches: usize,
    pub epochs: Vec<EpochSummary>,
    pub loss_log: PathBuf,
    pub best_checkpoint: PathBuf,
    pub msfm_checksum: u64,
    pub gfem_checksum: u64,
}

impl TrainSummary {
    pub fn first_mean_total(&self) -> Option<f64> {
        self.epochs.first().map(|e| e.mean.total)
    }

    pub fn last_mean_total(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean.total)
    }
}

/// Per-patch masks: computed on each source image (or read from the mask
/// directory) and cropped to the patch windows.
pub fn attach_training_masks<T: Scalar>(patches: &mut PatchSet<T>, pairs: &[ImagePair<T>], config: &TrainConfig) -> Result<()> {
    let mut per_source: Vec<Option<SaliencyMask>> = vec![None; pairs.len()];
    let p = patches.patch_size();
    let mut masks = Vec::with_capacity(patches.len());
    for win in patches.windows().to_vec() {
        let src = &pairs[win.source];
        if per_source[win.source].is_none() {
            let m = match config.mask.method {
                MaskKind::External => {
                    let dir = config.mask.dir.as_ref().expect("validated");
                    let m = SaliencyMask::load(&dir.join(&src.id))?;
                    validate_mask(&m, &src.infrared)?;
                    m
                }
                _ => generate_mask_or_empty(&src.infrared, &config.mask.computed_method())?,
            };
            per_source[win.source] = Some(m);
        }
        let m = per_source[win.source].as_ref().expect("filled above");
        masks.push(m.crop(win.y, win.x, p, p)?);
    }
    patches.attach_masks(masks)
}

/// Patches with masks from loaded pairs, subsampled to `max_patches`.
pub fn prepare_patches<T: Scalar>(pairs: &[ImagePair<T>], config: &TrainConfig) -> Result<PatchSet<T>> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut patches = extract_patches(pairs, config.patch_size, config.stride)?;
    if let Some(n) = config.max_patches {
        if n < patches.len() {
            patches = patches.select(&systematic_indices(patches.len(), n, config.seed)?)?;
        }
    }
    attach_training_masks(&mut patches, pairs, config)?;
    Ok(patches)
}

/// Reads the pair directory named in the config and trains on it.
pub fn train_from_config<T: Scalar>(config: &TrainConfig) -> Result<TrainSummary> {
    config.validate()?;
    let dir = config
        .data_dir
        .as_ref()
        .ok_or_else(|| Error::Config("data_dir is required".into()))?;
    let pairs = load_pair_dir::<T>(dir)?;
    let patches = prepare_patches(&pairs, config)?;
    train(config, &patches)
}

fn initial_trainer<T: Scalar>(config: &TrainConfig) -> Result<Trainer<T>> {
    let msfm = init_msfm(&MsfmConfig::with_seed(config.msfm_seed))?;
    let gfem = match &config.gfem_checkpoint {
        Some(p) => Checkpoint::<T>::load(p)?.gfem,
        None => init_gfem(&GfemConfig::with_seed(config.gfem_seed))?,
    };
    Trainer::with_weights(msfm, gfem, config.loss_weights, config.loss_flags, config.adam)
}

fn epoch_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:04}.ckpt"))
}

pub const BEST_CHECKPOINT: &str = "best.ckpt";

/// Shuffled mini-batch training with per-step loss logging and one archive
/// per epoch. Keeps the newest `keep_last` epoch archives plus the one with
/// the lowest mean total loss as `best.ckpt`.
pub fn train<T: Scalar>(config: &TrainConfig, patches: &PatchSet<T>) -> Result<TrainSummary> {
    config.validate()?;
    if patches.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if patches.masks().is_none() {
        return Err(Error::MissingMask(0));
    }
    let dir = &config.checkpoint_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let log_path = config.loss_log_path();
    if let Some(parent) = log_path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
    }
    let mut log = csv::Writer::from_path(&log_path).map_err(|e| Error::io(format!("opening {}", log_path.display()), e.into()))?;
    let log_err = |e: csv::Error| Error::io("writing loss log".to_string(), e.into());
    log.write_record(["step", "content", "ssim", "global", "total", "lr"]).map_err(log_err)?;

    let mut trainer = initial_trainer::<T>(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..patches.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best: Option<f64> = None;
    let best_path = dir.join(BEST_CHECKPOINT);

    for epoch in 0..config.epochs {
        let lr = lr_at(epoch, config)?;
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        let mut n = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch = make_batch(patches, chunk)?;
            let b = trainer.train_step(&batch, lr)?;
            log.write_record(&[
                (trainer.steps()).to_string(),
                b.content.to_string(),
                b.ssim.to_string(),
                b.global.to_string(),
                b.total.to_string(),
                lr.to_string(),
            ])
            .map_err(log_err)?;
            sum.content += b.content;
            sum.ssim += b.ssim;
            sum.global += b.global;
            sum.total += b.total;
            n += 1;
        }
        log.flush().map_err(|e| Error::io("writing loss log".to_string(), e))?;
        let k = n.max(1) as f64;
        let mean = LossBreakdown {
            content: sum.content / k,
            ssim: sum.ssim / k,
            global: sum.global / k,
            total: sum.total / k,
        };
        trainer.check_gfem_unchanged()?;
        let ck = trainer.checkpoint(CheckpointMeta {
            epoch,
            step: trainer.steps(),
            mean_total_loss: Some(mean.total),
            train_seed: config.seed,
        });
        let path = epoch_path(dir, epoch);
        ck.save(&path)?;
        if best.map_or(true, |b| mean.total < b) {
            best = Some(mean.total);
            ck.save(&best_path)?;
        }
        if epoch >= config.keep_last {
            let stale = epoch_path(dir, epoch - config.keep_last);
            if stale.exists() {
                fs::remove_file(&stale).map_err(|e| Error::io(format!("removing {}", stale.display()), e))?;
            }
        }
        log::info!("epoch {epoch} lr {lr} mean total {:.6}", mean.total);
        epochs.push(EpochSummary {
            epoch,
            lr,
            mean,
            checkpoint: path,
        });
    }
    Ok(TrainSummary {
        steps: trainer.steps(),
        patches: patches.len(),
        epochs,
        loss_log: log_path,
        best_checkpoint: best_path,
        msfm_checksum: trainer.msfm.params.checksum(),
        gfem_checksum: trainer.gfem.params.checksum(),
    })
}
