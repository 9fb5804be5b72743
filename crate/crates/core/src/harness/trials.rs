//! Repeated random-sampling evaluation.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::{systematic_indices, ImagePair};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, write_report_csv, MetricReport};
use crate::msfm::{msfm_forward, MsfmWeights};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialSpec {
    pub n_trials: usize,
    pub pairs_per_trial: usize,
    pub base_seed: u64,
}

impl Default for TrialSpec {
    fn default() -> Self {
        Self {
            n_trials: 5,
            pairs_per_trial: 10,
            base_seed: 0,
        }
    }
}

impl TrialSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_trials == 0 || self.pairs_per_trial == 0 {
            return Err(Error::Config("trials and pairs per trial must be at least 1".into()));
        }
        Ok(())
    }

    /// Sampling seed of trial `t` (zero-based).
    pub fn trial_seed(&self, t: usize) -> u64 {
        self.base_seed.wrapping_add(t as u64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialResult {
    pub seed: u64,
    pub per_pair: Vec<(String, MetricReport)>,
    pub mean: MetricReport,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialTable {
    pub trials: Vec<TrialResult>,
    /// Mean of the trial means.
    pub overall: MetricReport,
}

impl TrialTable {
    /// One row per trial (`trial_1`, …) and the overall mean row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let rows: Vec<(String, MetricReport)> = self
            .trials
            .iter()
            .enumerate()
            .map(|(i, t)| (format!("trial_{}", i + 1), t.mean))
            .collect();
        write_report_csv(path, &rows)?;
        Ok(())
    }
}

/// Samples `pairs_per_trial` pairs per trial by systematic sampling with the
/// trial's seed, fuses and scores them. Each distinct pair is fused once.
pub fn run_trials<T: Scalar>(dataset: &[ImagePair<T>], weights: &MsfmWeights<T>, spec: &TrialSpec) -> Result<TrialTable> {
    spec.validate()?;
    let mut cache: HashMap<usize, MetricReport> = HashMap::new();
    let mut trials = Vec::with_capacity(spec.n_trials);
    for t in 0..spec.n_trials {
        let seed = spec.trial_seed(t);
        let mut per_pair = Vec::with_capacity(spec.pairs_per_trial);
        for i in systematic_indices(dataset.len(), spec.pairs_per_trial, seed)? {
            let report = match cache.get(&i) {
                Some(r) => *r,
                None => {
                    let p = &dataset[i];
                    let f = msfm_forward(weights, &p.infrared, &p.visible)?;
                    let r = evaluate(&f, &p.infrared, &p.visible)?;
                    cache.insert(i, r);
                    r
                }
            };
            per_pair.push((dataset[i].id.clone(), report));
        }
        let reports: Vec<MetricReport> = per_pair.iter().map(|(_, r)| *r).collect();
        trials.push(TrialResult {
            seed,
            mean: MetricReport::mean(&reports)?,
            per_pair,
        });
    }
    let means: Vec<MetricReport> = trials.iter().map(|t| t.mean).collect();
    Ok(TrialTable {
        overall: MetricReport::mean(&means)?,
        trials,
    })
}
