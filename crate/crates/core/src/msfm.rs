//! Multi-scale fusion network: two densely connected trunks without weight
//! sharing, three per-scale fusion layers feeding sequential branches, and a
//! final 1×1 fusion layer with Tanh output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{BatchNormMode, BatchStats, Graph, Var};
use crate::dataio::{NormalizedImage, ValueRange};
use crate::error::{Error, Result};
use crate::params::{normal, Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Fused output: a single-channel image in the symmetric range.
pub type FusedImage<T> = NormalizedImage<T>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl ConvSpec {
    const fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
        }
    }

    pub fn pad(&self) -> usize {
        self.kernel / 2
    }
}

pub const TRUNK_PLAN: [ConvSpec; 4] = [
    ConvSpec::new(1, 64, 5),
    ConvSpec::new(64, 128, 3),
    ConvSpec::new(192, 256, 3),
    ConvSpec::new(448, 512, 3),
];

pub const BRANCH1_PLAN: [ConvSpec; 3] = [
    ConvSpec::new(1, 64, 3),
    ConvSpec::new(64, 128, 3),
    ConvSpec::new(128, 256, 3),
];
pub const BRANCH2_PLAN: [ConvSpec; 2] = [ConvSpec::new(1, 64, 3), ConvSpec::new(64, 128, 3)];
pub const BRANCH3_PLAN: [ConvSpec; 1] = [ConvSpec::new(1, 64, 3)];

/// Channels entering the final fusion layer: both layer-4 trunk outputs and
/// the three branch outputs.
pub const FINAL_FUSION_CHANNELS: usize = 512 + 512 + 256 + 128 + 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Ir,
    Vis,
}

impl Modality {
    fn prefix(self) -> &'static str {
        match self {
            Modality::Ir => "trunk_ir",
            Modality::Vis => "trunk_vis",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnPhase {
    /// Batch statistics; running statistics are reported for update.
    Train,
    /// Frozen running statistics.
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MsfmConfig {
    pub trunk_channel_plan: Vec<ConvSpec>,
    pub branch_channel_plans: Vec<Vec<ConvSpec>>,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub rng_seed: u64,
}

impl Default for MsfmConfig {
    fn default() -> Self {
        Self {
            trunk_channel_plan: TRUNK_PLAN.to_vec(),
            branch_channel_plans: vec![BRANCH1_PLAN.to_vec(), BRANCH2_PLAN.to_vec(), BRANCH3_PLAN.to_vec()],
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            rng_seed: 0,
        }
    }
}

impl MsfmConfig {
    pub fn with_seed(rng_seed: u64) -> Self {
        Self {
            rng_seed,
            ..Self::default()
        }
    }

    /// The channel plan is fixed; only the seed and batch-norm constants vary.
    pub fn validate(&self) -> Result<()> {
        let d = Self::default();
        if self.trunk_channel_plan != d.trunk_channel_plan || self.branch_channel_plans != d.branch_channel_plans {
            return Err(Error::Config("msfm channel plan differs from the fixed architecture".into()));
        }
        if !(self.bn_eps > 0.0 && self.bn_eps.is_finite()) {
            return Err(Error::Config(format!("bn_eps must be positive, got {}", self.bn_eps)));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config(format!("bn_momentum must be in [0, 1], got {}", self.bn_momentum)));
        }
        Ok(())
    }
}

/// Trainable parameters plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct MsfmWeights<T> {
    pub config: MsfmConfig,
    pub params: ParamStore<T>,
    pub buffers: ParamStore<T>,
}

fn conv_layer_name(prefix: &str, k: usize) -> String {
    format!("{prefix}.conv{}", k + 1)
}

fn branch_prefix(scale: usize) -> String {
    format!("branch{scale}")
}

fn fuse_prefix(scale: usize) -> String {
    format!("fuse{scale}")
}

pub const FINAL_FUSE: &str = "fuse_final";

/// Kaiming-style normal init: std √(gain/fan_in), gain 2 before ReLU and
/// 1 before Tanh.
pub fn init_msfm<T: Scalar>(config: &MsfmConfig) -> Result<MsfmWeights<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut params = ParamStore::new();
    let mut buffers = ParamStore::new();

    let mut conv_bn = |name: String, spec: &ConvSpec, rng: &mut ChaCha8Rng| {
        let fan_in = spec.in_channels * spec.kernel * spec.kernel;
        let shape = [spec.out_channels, spec.in_channels, spec.kernel, spec.kernel];
        params.insert(format!("{name}.kernel"), normal(&shape, (2.0 / fan_in as f64).sqrt(), rng));
        params.insert(format!("{name}.bias"), Tensor::zeros(&[spec.out_channels]));
        params.insert(format!("{name}.gamma"), Tensor::ones(&[spec.out_channels]));
        params.insert(format!("{name}.beta"), Tensor::zeros(&[spec.out_channels]));
        buffers.insert(format!("{name}.running_mean"), Tensor::zeros(&[spec.out_channels]));
        buffers.insert(format!("{name}.running_var"), Tensor::ones(&[spec.out_channels]));
    };
    for m in [Modality::Ir, Modality::Vis] {
        for (k, spec) in config.trunk_channel_plan.iter().enumerate() {
            conv_bn(conv_layer_name(m.prefix(), k), spec, &mut rng);
        }
    }
    for (s, plan) in config.branch_channel_plans.iter().enumerate() {
        for (k, spec) in plan.iter().enumerate() {
            conv_bn(conv_layer_name(&branch_prefix(s + 1), k), spec, &mut rng);
        }
    }
    let mut fusion = |name: String, in_channels: usize, rng: &mut ChaCha8Rng| {
        params.insert(
            format!("{name}.kernel"),
            normal(&[1, in_channels, 1, 1], (1.0 / in_channels as f64).sqrt(), rng),
        );
        params.insert(format!("{name}.bias"), Tensor::zeros(&[1]));
    };
    for (s, spec) in config.trunk_channel_plan.iter().take(3).enumerate() {
        fusion(fuse_prefix(s + 1), 2 * spec.out_channels, &mut rng);
    }
    fusion(FINAL_FUSE.to_string(), FINAL_FUSION_CHANNELS, &mut rng);

    Ok(MsfmWeights {
        config: config.clone(),
        params,
        buffers,
    })
}

impl<T: Scalar> MsfmWeights<T> {
    /// Folds one training batch's statistics into the running estimates
    /// (unbiased variance, exponential moving average).
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats<T>)]) -> Result<()> {
        let m = T::of(self.config.bn_momentum);
        for (layer, s) in stats {
            let correction = if s.count > 1 {
                T::of(s.count as f64 / (s.count - 1) as f64)
            } else {
                T::one()
            };
            let mean = self.buffers.get_mut(&format!("{layer}.running_mean"))?;
            for (r, &b) in mean.data_mut().iter_mut().zip(&s.mean) {
                *r = (T::one() - m) * *r + m * b;
            }
            let var = self.buffers.get_mut(&format!("{layer}.running_var"))?;
            for (r, &b) in var.data_mut().iter_mut().zip(&s.var) {
                *r = (T::one() - m) * *r + m * b * correction;
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> MsfmWeights<U> {
        MsfmWeights {
            config: self.config.clone(),
            params: self.params.cast(),
            buffers: self.buffers.cast(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.all_finite() && self.buffers.all_finite()
    }
}

/// One recorded layer shape from a forward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEntry {
    pub layer: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ShapeTrace {
    pub entries: Vec<TraceEntry>,
}

impl ShapeTrace {
    pub fn get(&self, layer: &str) -> Option<&TraceEntry> {
        self.entries.iter().find(|e| e.layer == layer)
    }

    /// Checks every recorded conv against the fixed plan and resolution.
    pub fn check_plan(&self, height: usize, width: usize) -> Result<()> {
        let mut expected: Vec<(String, usize, usize)> = Vec::new();
        for m in [Modality::Ir, Modality::Vis] {
            for (k, s) in TRUNK_PLAN.iter().enumerate() {
                expected.push((conv_layer_name(m.prefix(), k), s.in_channels, s.out_channels));
            }
        }
        let branches: [&[ConvSpec]; 3] = [&BRANCH1_PLAN, &BRANCH2_PLAN, &BRANCH3_PLAN];
        for (s, plan) in branches.iter().enumerate() {
            expected.push((fuse_prefix(s + 1), 2 * TRUNK_PLAN[s].out_channels, 1));
            for (k, spec) in plan.iter().enumerate() {
                expected.push((conv_layer_name(&branch_prefix(s + 1), k), spec.in_channels, spec.out_channels));
            }
        }
        expected.push((FINAL_FUSE.into(), FINAL_FUSION_CHANNELS, 1));
        for (layer, cin, cout) in expected {
            let e = self
                .get(&layer)
                .ok_or_else(|| Error::Shape(format!("trace lacks layer {layer}")))?;
            if e.in_channels != cin || e.out_channels != cout || e.height != height || e.width != width {
                return Err(Error::Shape(format!(
                    "{layer}: traced {}→{} at {}×{}, expected {cin}→{cout} at {height}×{width}",
                    e.in_channels, e.out_channels, e.height, e.width
                )));
            }
        }
        Ok(())
    }
}

/// Graph-level forward pass over bound weights.
pub struct MsfmPass<'w, T> {
    weights: &'w MsfmWeights<T>,
    bound: Bound<T>,
    phase: BnPhase,
    stats: Vec<(String, BatchStats<T>)>,
    trace: ShapeTrace,
}

impl<'w, T: Scalar> MsfmPass<'w, T> {
    /// Binds the weights on `g`; `trainable` makes them gradient leaves.
    pub fn new(g: &mut Graph<T>, weights: &'w MsfmWeights<T>, trainable: bool, phase: BnPhase) -> Self {
        Self {
            weights,
            bound: weights.params.bind(g, trainable),
            phase,
            stats: Vec::new(),
            trace: ShapeTrace::default(),
        }
    }

    pub fn bound(&self) -> &Bound<T> {
        &self.bound
    }

    pub fn trace(&self) -> &ShapeTrace {
        &self.trace
    }

    pub fn into_parts(self) -> (Bound<T>, Vec<(String, BatchStats<T>)>, ShapeTrace) {
        (self.bound, self.stats, self.trace)
    }

    fn record_trace(&mut self, layer: &str, x: &Var<T>, y: &Var<T>) {
        let (xs, ys) = (x.shape(), y.shape());
        self.trace.entries.push(TraceEntry {
            layer: layer.to_string(),
            in_channels: xs[1],
            out_channels: ys[1],
            height: ys[2],
            width: ys[3],
        });
    }

    fn conv_bn_relu(&mut self, g: &mut Graph<T>, layer: &str, x: &Var<T>, pad: usize) -> Result<Var<T>> {
        let b = &self.bound;
        let y = g.conv2d(
            x,
            b.get(&format!("{layer}.kernel"))?,
            Some(b.get(&format!("{layer}.bias"))?),
            pad,
        )?;
        let eps = T::of(self.weights.config.bn_eps);
        let (gamma, beta) = (b.get(&format!("{layer}.gamma"))?, b.get(&format!("{layer}.beta"))?);
        let (y, stats) = match self.phase {
            BnPhase::Train => g.batch_norm(&y, gamma, beta, BatchNormMode::Train, eps)?,
            BnPhase::Eval => {
                let mean = self.weights.buffers.get(&format!("{layer}.running_mean"))?;
                let var = self.weights.buffers.get(&format!("{layer}.running_var"))?;
                g.batch_norm(
                    &y,
                    gamma,
                    beta,
                    BatchNormMode::Eval {
                        mean: mean.data(),
                        var: var.data(),
                    },
                    eps,
                )?
            }
        };
        if let Some(s) = stats {
            self.stats.push((layer.to_string(), s));
        }
        let out = g.relu(&y);
        self.record_trace(layer, x, &out);
        Ok(out)
    }

    fn fusion_layer(&mut self, g: &mut Graph<T>, name: &str, x: &Var<T>) -> Result<Var<T>> {
        let y = g.conv2d(
            x,
            self.bound.get(&format!("{name}.kernel"))?,
            Some(self.bound.get(&format!("{name}.bias"))?),
            0,
        )?;
        let out = g.tanh(&y);
        self.record_trace(name, x, &out);
        Ok(out)
    }

    /// Dense trunk: conv k sees the concatenation of all earlier outputs.
    pub fn trunk(&mut self, g: &mut Graph<T>, image: &Var<T>, modality: Modality) -> Result<[Var<T>; 4]> {
        let plan = self.weights.config.trunk_channel_plan.clone();
        let mut feats: Vec<Var<T>> = Vec::with_capacity(4);
        for (k, spec) in plan.iter().enumerate() {
            let input = match k {
                0 => image.clone(),
                1 => feats[0].clone(),
                _ => {
                    let refs: Vec<&Var<T>> = feats.iter().collect();
                    g.concat(&refs, 1)?
                }
            };
            let f = self.conv_bn_relu(g, &conv_layer_name(modality.prefix(), k), &input, spec.pad())?;
            feats.push(f);
        }
        let [f1, f2, f3, f4]: [Var<T>; 4] = feats.try_into().expect("four trunk layers");
        Ok([f1, f2, f3, f4])
    }

    /// Concatenates `ir ⊕ vis` and applies the scale's 1×1 Tanh layer.
    pub fn scale_fuse(&mut self, g: &mut Graph<T>, f_ir: &Var<T>, f_vis: &Var<T>, scale: usize) -> Result<Var<T>> {
        check_scale(scale)?;
        if f_ir.shape() != f_vis.shape() {
            return Err(Error::Shape(format!(
                "scale_fuse: ir {:?} vs vis {:?}",
                f_ir.shape(),
                f_vis.shape()
            )));
        }
        let cat = g.concat(&[f_ir, f_vis], 1)?;
        self.fusion_layer(g, &fuse_prefix(scale), &cat)
    }

    /// Sequential 3×3 convolutions of the scale's branch.
    pub fn branch(&mut self, g: &mut Graph<T>, fused: &Var<T>, scale: usize) -> Result<Var<T>> {
        check_scale(scale)?;
        if fused.shape().get(1) != Some(&1) {
            return Err(Error::Shape(format!("branch input must be 1-channel, got {:?}", fused.shape())));
        }
        let plan = self.weights.config.branch_channel_plans[scale - 1].clone();
        let mut x = fused.clone();
        for (k, spec) in plan.iter().enumerate() {
            x = self.conv_bn_relu(g, &conv_layer_name(&branch_prefix(scale), k), &x, spec.pad())?;
        }
        Ok(x)
    }

    /// Full network on `[n, 1, h, w]` inputs; returns `[n, 1, h, w]`.
    pub fn forward(&mut self, g: &mut Graph<T>, ir: &Var<T>, vis: &Var<T>) -> Result<Var<T>> {
        if ir.shape() != vis.shape() || ir.shape().len() != 4 || ir.shape()[1] != 1 {
            return Err(Error::Shape(format!(
                "msfm inputs must be matching [n, 1, h, w], got {:?} and {:?}",
                ir.shape(),
                vis.shape()
            )));
        }
        let ti = self.trunk(g, ir, Modality::Ir)?;
        let tv = self.trunk(g, vis, Modality::Vis)?;
        let mut paths = vec![ti[3].clone(), tv[3].clone()];
        for s in 1..=3 {
            let f = self.scale_fuse(g, &ti[s - 1], &tv[s - 1], s)?;
            paths.push(self.branch(g, &f, s)?);
        }
        drop((ti, tv));
        let refs: Vec<&Var<T>> = paths.iter().collect();
        let cat = g.concat(&refs, 1)?;
        drop(paths);
        self.fusion_layer(g, FINAL_FUSE, &cat)
    }
}

fn check_scale(scale: usize) -> Result<()> {
    if (1..=3).contains(&scale) {
        Ok(())
    } else {
        Err(Error::Shape(format!("scale must be 1, 2 or 3, got {scale}")))
    }
}

/// Trunk outputs at input resolution, channels 64/128/256/512.
#[derive(Clone, Debug)]
pub struct TrunkFeatures<T> {
    pub f1: Tensor<T>,
    pub f2: Tensor<T>,
    pub f3: Tensor<T>,
    pub f4: Tensor<T>,
}

fn image_var<T: Scalar>(image: &NormalizedImage<T>) -> Var<T> {
    Var::constant(image.to_symmetric().to_tensor())
}

/// Evaluation-mode trunk on one image.
pub fn trunk_forward<T: Scalar>(
    weights: &MsfmWeights<T>,
    image: &NormalizedImage<T>,
    modality: Modality,
) -> Result<TrunkFeatures<T>> {
    let mut g = Graph::new();
    let mut pass = MsfmPass::new(&mut g, weights, false, BnPhase::Eval);
    let [f1, f2, f3, f4] = pass.trunk(&mut g, &image_var(image), modality)?;
    Ok(TrunkFeatures {
        f1: f1.value().clone(),
        f2: f2.value().clone(),
        f3: f3.value().clone(),
        f4: f4.value().clone(),
    })
}

/// Evaluation-mode per-scale fusion of two `[n, c, h, w]` feature maps.
pub fn scale_fuse<T: Scalar>(weights: &MsfmWeights<T>, f_ir: &Tensor<T>, f_vis: &Tensor<T>, scale: usize) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let mut pass = MsfmPass::new(&mut g, weights, false, BnPhase::Eval);
    let y = pass.scale_fuse(&mut g, &Var::constant(f_ir.clone()), &Var::constant(f_vis.clone()), scale)?;
    Ok(y.value().clone())
}

/// Evaluation-mode branch on a `[n, 1, h, w]` fused map.
pub fn branch_forward<T: Scalar>(weights: &MsfmWeights<T>, fused: &Tensor<T>, scale: usize) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let mut pass = MsfmPass::new(&mut g, weights, false, BnPhase::Eval);
    let y = pass.branch(&mut g, &Var::constant(fused.clone()), scale)?;
    Ok(y.value().clone())
}

/// Evaluation-mode fusion of one registered pair, with its shape trace.
pub fn msfm_forward_traced<T: Scalar>(
    weights: &MsfmWeights<T>,
    ir: &NormalizedImage<T>,
    vis: &NormalizedImage<T>,
) -> Result<(FusedImage<T>, ShapeTrace)> {
    if ir.dims() != vis.dims() {
        return Err(Error::DimensionMismatch(format!(
            "ir {:?} vs vis {:?}",
            ir.dims(),
            vis.dims()
        )));
    }
    let mut g = Graph::new();
    let mut pass = MsfmPass::new(&mut g, weights, false, BnPhase::Eval);
    let y = pass.forward(&mut g, &image_var(ir), &image_var(vis))?;
    let fused = NormalizedImage::from_tensor(y.value(), ValueRange::Symmetric)?;
    let (_, _, trace) = pass.into_parts();
    Ok((fused, trace))
}

pub fn msfm_forward<T: Scalar>(
    weights: &MsfmWeights<T>,
    ir: &NormalizedImage<T>,
    vis: &NormalizedImage<T>,
) -> Result<FusedImage<T>> {
    msfm_forward_traced(weights, ir, vis).map(|(f, _)| f)
}
