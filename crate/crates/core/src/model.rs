//! A small convolutional network with interchangeable output heads.
//!
//! Trunk: `conv3x3 (pad 1) -> ReLU -> [2x2 max-pool]` blocks, global average
//! pooling, one dense ReLU layer. Heads: a T2D logit and/or a 4-biomarker
//! regression, selected by [`HeadMode`]. All parameters live in one flat
//! `Vec<f64>` described by a named layout, which keeps the optimizer,
//! gradient checks and checkpoints uniform.
//!
//! Forward and backward passes are hand-written and exact; there is no
//! autodiff graph.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data_model::N_BIOMARKERS;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::io::write_atomic;
use crate::seeding::{hash_str, rng_for};

/// Logits are clamped to this magnitude before the sigmoid.
pub const LOGIT_CLAMP: f64 = 30.0;
/// Probability clamp inside the binary cross-entropy.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    T2dOnly,
    BiomarkersOnly,
    MultiTarget,
}

impl HeadMode {
    pub fn has_t2d(self) -> bool {
        !matches!(self, HeadMode::BiomarkersOnly)
    }

    pub fn has_biomarkers(self) -> bool {
        !matches!(self, HeadMode::T2dOnly)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvBlock {
    pub out_channels: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default = "yes")]
    pub pool: bool,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

impl ConvBlock {
    pub fn new(out_channels: usize) -> Self {
        Self {
            out_channels,
            stride: 1,
            pool: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Random { seed: u64 },
    /// Loads matching tensors; absent heads are drawn with `seed`.
    Checkpoint { path: PathBuf, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Side of the (square) network input in pixels.
    pub input_size: usize,
    pub in_channels: usize,
    pub conv_blocks: Vec<ConvBlock>,
    pub trunk_feature_dim: usize,
    pub head_mode: HeadMode,
    pub init: Init,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 48,
            in_channels: 3,
            conv_blocks: [8, 16, 32, 64].map(ConvBlock::new).to_vec(),
            trunk_feature_dim: 64,
            head_mode: HeadMode::MultiTarget,
            init: Init::Random { seed: 0 },
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.conv_blocks.is_empty() {
            return bad("at least one conv block is required".into());
        }
        if self.trunk_feature_dim < 4 {
            return bad(format!("trunk_feature_dim {} < 4", self.trunk_feature_dim));
        }
        if self.in_channels == 0 || self.input_size == 0 {
            return bad("empty input".into());
        }
        let mut side = self.input_size;
        for (i, b) in self.conv_blocks.iter().enumerate() {
            if b.out_channels == 0 || !(1..=2).contains(&b.stride) {
                return bad(format!("conv block {i}: {b:?}"));
            }
            side = (side - 1) / b.stride + 1;
            if b.pool {
                side /= 2;
            }
            if side == 0 {
                return bad(format!("input {} collapses to nothing at block {i}", self.input_size));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub kind: ParamKind,
    /// Fan-in used for random initialization.
    fan_in: usize,
    /// Whether a ReLU follows this layer (selects the init scale).
    relu: bool,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn is_head(&self) -> bool {
        self.name.starts_with("head_")
    }
}

const T2D_HEAD: &str = "head_t2d";
const BIO_HEAD: &str = "head_bio";

fn build_layout(config: &ModelConfig) -> Vec<ParamSpec> {
    let mut layout = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, shape: Vec<usize>, kind, fan_in, relu| {
        let spec = ParamSpec {
            name,
            shape,
            offset,
            kind,
            fan_in,
            relu,
        };
        offset += spec.len();
        layout.push(spec);
    };
    let mut c_in = config.in_channels;
    for (i, b) in config.conv_blocks.iter().enumerate() {
        let fan_in = c_in * 9;
        push(format!("conv{i}.weight"), vec![b.out_channels, c_in, 3, 3], ParamKind::Weight, fan_in, true);
        push(format!("conv{i}.bias"), vec![b.out_channels], ParamKind::Bias, fan_in, true);
        c_in = b.out_channels;
    }
    let d = config.trunk_feature_dim;
    push("trunk.weight".into(), vec![d, c_in], ParamKind::Weight, c_in, true);
    push("trunk.bias".into(), vec![d], ParamKind::Bias, c_in, true);
    if config.head_mode.has_t2d() {
        push(format!("{T2D_HEAD}.weight"), vec![1, d], ParamKind::Weight, d, false);
        push(format!("{T2D_HEAD}.bias"), vec![1], ParamKind::Bias, d, false);
    }
    if config.head_mode.has_biomarkers() {
        push(format!("{BIO_HEAD}.weight"), vec![N_BIOMARKERS, d], ParamKind::Weight, d, false);
        push(format!("{BIO_HEAD}.bias"), vec![N_BIOMARKERS], ParamKind::Bias, d, false);
    }
    layout
}

/// Fills one tensor from its own seeded stream: fan-in scaled uniform
/// weights (He for ReLU layers, LeCun for heads), zero biases.
fn init_tensor(spec: &ParamSpec, seed: u64, out: &mut [f64]) {
    match spec.kind {
        ParamKind::Bias => out.fill(0.0),
        ParamKind::Weight => {
            let gain = if spec.relu { 6.0 } else { 3.0 };
            let limit = (gain / spec.fan_in as f64).sqrt();
            let mut rng = rng_for(seed, &[hash_str(&spec.name)]);
            for v in out {
                *v = limit * (2.0 * rng.random::<f64>() - 1.0);
            }
        }
    }
}

/// Model outputs for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Outputs {
    /// Clamped logits, present with a T2D head.
    pub t2d_logit: Option<Vec<f64>>,
    pub t2d_prob: Option<Vec<f64>>,
    pub biomarkers: Option<Vec<[f64; N_BIOMARKERS]>>,
}

impl Outputs {
    pub fn len(&self) -> usize {
        self.t2d_prob
            .as_ref()
            .map(Vec::len)
            .or(self.biomarkers.as_ref().map(Vec::len))
            .unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Training targets; a head's targets must be present when the head is.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Targets {
    pub labels: Option<Vec<u8>>,
    pub biomarkers: Option<Vec<[f64; N_BIOMARKERS]>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub bce: f64,
    pub mse: f64,
    pub l2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    layout: Vec<ParamSpec>,
    params: Vec<f64>,
}

/// Initializes a model per `config.init`.
pub fn init_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    match &config.init {
        Init::Random { seed } => Ok(Model::random(config, *seed)),
        Init::Checkpoint { path, seed } => {
            let ckpt = Checkpoint::load(path)?;
            let mut model = Model::random(config, *seed);
            for spec in &model.layout {
                match ckpt.tensor(&spec.name) {
                    Some(t) if t.shape == spec.shape => {
                        model.params[spec.range()].copy_from_slice(&t.data);
                    }
                    Some(t) => {
                        return Err(Error::CheckpointShapeMismatch {
                            name: spec.name.clone(),
                            expected: spec.shape.clone(),
                            found: t.shape.clone(),
                        })
                    }
                    None if spec.is_head() => {}
                    None => {
                        return Err(Error::CheckpointShapeMismatch {
                            name: spec.name.clone(),
                            expected: spec.shape.clone(),
                            found: vec![],
                        })
                    }
                }
            }
            Ok(model)
        }
    }
}

/// Keeps the trunk bit for bit and draws fresh heads for `new_mode`.
pub fn replace_output_head(model: &Model, new_mode: HeadMode, seed: u64) -> Model {
    let config = ModelConfig {
        head_mode: new_mode,
        init: Init::Random { seed },
        ..model.config.clone()
    };
    let mut out = Model::random(&config, seed);
    for spec in out.layout.iter().filter(|s| !s.is_head()) {
        out.params[spec.range()].copy_from_slice(model.param(&spec.name).expect("same trunk"));
    }
    out
}

impl Model {
    fn random(config: &ModelConfig, seed: u64) -> Self {
        let layout = build_layout(config);
        let n = layout.last().map_or(0, |s| s.offset + s.len());
        let mut params = vec![0.0; n];
        for spec in &layout {
            init_tensor(spec, seed, &mut params[spec.range()]);
        }
        Self {
            config: config.clone(),
            layout,
            params,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn head_mode(&self) -> HeadMode {
        self.config.head_mode
    }

    pub fn layout(&self) -> &[ParamSpec] {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn param(&self, name: &str) -> Option<&[f64]> {
        self.spec(name).map(|s| &self.params[s.range()])
    }

    pub fn spec(&self, name: &str) -> Option<&ParamSpec> {
        self.layout.iter().find(|s| s.name == name)
    }

    /// Parameters of the shared trunk (everything but the heads).
    pub fn trunk_params(&self) -> Vec<f64> {
        self.layout
            .iter()
            .filter(|s| !s.is_head())
            .flat_map(|s| self.params[s.range()].iter().copied())
            .collect()
    }

    /// Sum of squared weights (biases excluded).
    pub fn weight_sq_norm(&self) -> f64 {
        self.layout
            .iter()
            .filter(|s| s.kind == ParamKind::Weight)
            .map(|s| self.params[s.range()].iter().map(|w| w * w).sum::<f64>())
            .sum()
    }

    fn check_input(&self, img: &ImageTensor) -> Result<()> {
        let n = self.config.input_size;
        if img.height() != n || img.width() != n || img.channels() != self.config.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "model expects {n}x{n}x{}, got {}x{}x{}",
                self.config.in_channels,
                img.height(),
                img.width(),
                img.channels()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, batch: &[ImageTensor]) -> Result<Outputs> {
        let mode = self.config.head_mode;
        let mut logits = Vec::with_capacity(batch.len());
        let mut bios = Vec::with_capacity(batch.len());
        for img in batch {
            self.check_input(img)?;
            let pass = self.forward_one(img);
            if let Some(z) = pass.logit {
                logits.push(z);
            }
            if let Some(b) = pass.bio {
                bios.push(b);
            }
        }
        Ok(Outputs {
            t2d_prob: mode.has_t2d().then(|| logits.iter().map(|&z| sigmoid(z)).collect()),
            t2d_logit: mode.has_t2d().then_some(logits),
            biomarkers: mode.has_biomarkers().then_some(bios),
        })
    }

    /// Loss and its exact gradient with respect to every parameter.
    pub fn gradients(
        &self,
        batch: &[ImageTensor],
        targets: &Targets,
        lambda_bio: f64,
        l2: f64,
    ) -> Result<(LossBreakdown, Vec<f64>)> {
        let mode = self.config.head_mode;
        check_targets(mode, targets, batch.len())?;
        let n = batch.len().max(1) as f64;
        let mut grad = vec![0.0; self.params.len()];
        let mut bce_sum = 0.0;
        let mut mse_sum = 0.0;
        for (k, img) in batch.iter().enumerate() {
            self.check_input(img)?;
            let pass = self.forward_one(img);
            let mut d_logit = 0.0;
            if let (Some(z), Some(labels)) = (pass.logit, &targets.labels) {
                let (bce, dz) = bce_with_grad(z, labels[k]);
                bce_sum += bce;
                d_logit = dz / n;
            }
            let mut d_bio = [0.0; N_BIOMARKERS];
            if let (Some(b), Some(t)) = (pass.bio, &targets.biomarkers) {
                for j in 0..N_BIOMARKERS {
                    let r = b[j] - t[k][j];
                    mse_sum += r * r;
                    d_bio[j] = lambda_bio * 2.0 * r / (n * N_BIOMARKERS as f64);
                }
            }
            self.backward_one(&pass, d_logit, &d_bio, &mut grad);
        }
        for spec in self.layout.iter().filter(|s| s.kind == ParamKind::Weight) {
            for i in spec.range() {
                grad[i] += 2.0 * l2 * self.params[i];
            }
        }
        let bce = if mode.has_t2d() { bce_sum / n } else { 0.0 };
        let mse = if mode.has_biomarkers() {
            mse_sum / (n * N_BIOMARKERS as f64)
        } else {
            0.0
        };
        let l2_term = l2 * self.weight_sq_norm();
        let total = bce + lambda_bio * mse + l2_term;
        Ok((
            LossBreakdown {
                total,
                bce,
                mse,
                l2: l2_term,
            },
            grad,
        ))
    }

    fn forward_one(&self, img: &ImageTensor) -> Pass {
        let side = self.config.input_size;
        let c0 = self.config.in_channels;
        // HWC -> CHW
        let mut x = vec![0.0; c0 * side * side];
        for (p, px) in img.data().chunks_exact(c0).enumerate() {
            for (c, v) in px.iter().enumerate() {
                x[c * side * side + p] = *v;
            }
        }
        let mut blocks = Vec::with_capacity(self.config.conv_blocks.len());
        let mut cur = Plane {
            c: c0,
            h: side,
            w: side,
            data: x,
        };
        for (i, b) in self.config.conv_blocks.iter().enumerate() {
            let w = self.param_by_index(2 * i);
            let bias = self.param_by_index(2 * i + 1);
            let mut conv = conv_forward(&cur, w, bias, b.out_channels, b.stride);
            conv.data.iter_mut().for_each(|v| *v = v.max(0.0));
            let (pooled, argmax) = if b.pool {
                let (p, a) = maxpool_forward(&conv);
                (p, Some(a))
            } else {
                (conv.clone(), None)
            };
            blocks.push(BlockCache {
                input: cur,
                relu_out: conv,
                argmax,
            });
            cur = pooled;
        }
        let hw = (cur.h * cur.w) as f64;
        let gap: Vec<f64> = cur
            .data
            .chunks_exact(cur.h * cur.w)
            .map(|ch| ch.iter().sum::<f64>() / hw)
            .collect();
        let nb = self.config.conv_blocks.len();
        let tw = self.param_by_index(2 * nb);
        let tb = self.param_by_index(2 * nb + 1);
        let d = self.config.trunk_feature_dim;
        let hidden: Vec<f64> = (0..d)
            .map(|j| {
                let row = &tw[j * gap.len()..(j + 1) * gap.len()];
                (dot(row, &gap) + tb[j]).max(0.0)
            })
            .collect();
        let mut idx = 2 * nb + 2;
        let mut logit = None;
        if self.config.head_mode.has_t2d() {
            let w = self.param_by_index(idx);
            let b = self.param_by_index(idx + 1);
            logit = Some((dot(w, &hidden) + b[0]).clamp(-LOGIT_CLAMP, LOGIT_CLAMP));
            idx += 2;
        }
        let mut bio = None;
        if self.config.head_mode.has_biomarkers() {
            let w = self.param_by_index(idx);
            let b = self.param_by_index(idx + 1);
            bio = Some(std::array::from_fn(|j| dot(&w[j * d..(j + 1) * d], &hidden) + b[j]));
        }
        Pass {
            blocks,
            last_shape: (cur.c, cur.h, cur.w),
            gap,
            hidden,
            logit,
            bio,
        }
    }

    /// Accumulates into `grad` the gradient given upstream derivatives of
    /// the (clamped) logit and the biomarker outputs.
    fn backward_one(&self, pass: &Pass, d_logit: f64, d_bio: &[f64; N_BIOMARKERS], grad: &mut [f64]) {
        let nb = self.config.conv_blocks.len();
        let d = self.config.trunk_feature_dim;
        let mut d_hidden = vec![0.0; d];
        let mut idx = 2 * nb + 2;
        if let Some(z) = pass.logit {
            // No gradient flows through an active logit clamp.
            let dz = if z.abs() >= LOGIT_CLAMP { 0.0 } else { d_logit };
            let w = self.param_by_index(idx);
            let gw = self.layout[idx].range();
            for j in 0..d {
                grad[gw.start + j] += dz * pass.hidden[j];
                d_hidden[j] += dz * w[j];
            }
            grad[self.layout[idx + 1].offset] += dz;
            idx += 2;
        }
        if pass.bio.is_some() {
            let w = self.param_by_index(idx);
            let gw = self.layout[idx].offset;
            let gb = self.layout[idx + 1].offset;
            for (o, &g) in d_bio.iter().enumerate() {
                for j in 0..d {
                    grad[gw + o * d + j] += g * pass.hidden[j];
                    d_hidden[j] += g * w[o * d + j];
                }
                grad[gb + o] += g;
            }
        }
        // trunk dense + ReLU
        let c_last = pass.gap.len();
        let tw = self.param_by_index(2 * nb);
        let tw_off = self.layout[2 * nb].offset;
        let tb_off = self.layout[2 * nb + 1].offset;
        let mut d_gap = vec![0.0; c_last];
        for j in 0..d {
            if pass.hidden[j] <= 0.0 {
                continue;
            }
            let g = d_hidden[j];
            grad[tb_off + j] += g;
            for i in 0..c_last {
                grad[tw_off + j * c_last + i] += g * pass.gap[i];
                d_gap[i] += g * tw[j * c_last + i];
            }
        }
        // global average pool
        let (c, h, w) = pass.last_shape;
        let hw = h * w;
        let mut d_cur = Plane {
            c,
            h,
            w,
            data: d_gap.iter().flat_map(|&g| std::iter::repeat_n(g / hw as f64, hw)).collect(),
        };
        for i in (0..nb).rev() {
            let block = &pass.blocks[i];
            let b = &self.config.conv_blocks[i];
            let mut d_relu = match &block.argmax {
                Some(argmax) => maxpool_backward(&d_cur, argmax, &block.relu_out),
                None => d_cur,
            };
            for (g, &y) in d_relu.data.iter_mut().zip(&block.relu_out.data) {
                if y <= 0.0 {
                    *g = 0.0;
                }
            }
            let w_spec = &self.layout[2 * i];
            let b_spec = &self.layout[2 * i + 1];
            let (gw, rest) = grad[w_spec.offset..].split_at_mut(w_spec.len());
            let gb = &mut rest[b_spec.offset - w_spec.offset - w_spec.len()..][..b_spec.len()];
            d_cur = conv_backward(
                &block.input,
                &d_relu,
                self.param_by_index(2 * i),
                b.stride,
                gw,
                gb,
                i > 0,
            );
        }
    }

    fn param_by_index(&self, i: usize) -> &[f64] {
        &self.params[self.layout[i].range()]
    }

    pub fn save_checkpoint(&self, path: &Path, config_hash: &str) -> Result<()> {
        let bytes = self.to_checkpoint(config_hash).to_bytes()?;
        write_atomic(path, &bytes)
    }

    pub fn to_checkpoint(&self, config_hash: &str) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            head_mode: self.config.head_mode,
            config_hash: config_hash.to_string(),
            model: self.config.clone(),
            tensors: self
                .layout
                .iter()
                .map(|s| NamedTensor {
                    name: s.name.clone(),
                    shape: s.shape.clone(),
                    data: self.params[s.range()].to_vec(),
                })
                .collect(),
        }
    }

    /// Rebuilds a model exactly as stored.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = ModelConfig {
            head_mode: ckpt.head_mode,
            ..ckpt.model.clone()
        };
        config.validate()?;
        let mut model = Model::random(&config, 0);
        for spec in &model.layout {
            let t = ckpt.tensor(&spec.name).ok_or_else(|| Error::CheckpointShapeMismatch {
                name: spec.name.clone(),
                expected: spec.shape.clone(),
                found: vec![],
            })?;
            if t.shape != spec.shape || t.data.len() != spec.len() {
                return Err(Error::CheckpointShapeMismatch {
                    name: spec.name.clone(),
                    expected: spec.shape.clone(),
                    found: t.shape.clone(),
                });
            }
            model.params[spec.range()].copy_from_slice(&t.data);
        }
        Ok(model)
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

fn check_targets(mode: HeadMode, targets: &Targets, n: usize) -> Result<()> {
    if mode.has_t2d() {
        let labels = targets
            .labels
            .as_ref()
            .ok_or_else(|| Error::ModeMismatch("T2D head without labels".into()))?;
        if labels.len() != n {
            return Err(Error::ShapeMismatch(format!("{} labels for {n} samples", labels.len())));
        }
    }
    if mode.has_biomarkers() {
        let bio = targets
            .biomarkers
            .as_ref()
            .ok_or_else(|| Error::ModeMismatch("biomarker head without targets".into()))?;
        if bio.len() != n {
            return Err(Error::ShapeMismatch(format!("{} biomarker rows for {n} samples", bio.len())));
        }
    }
    Ok(())
}

/// Loss of precomputed outputs:
/// `BCE + lambda_bio * MSE + l2 * ||weights||^2`, batch means.
pub fn loss(outputs: &Outputs, targets: &Targets, lambda_bio: f64, l2: f64, model: &Model) -> Result<LossBreakdown> {
    let n = outputs.len();
    let mode = match (outputs.t2d_prob.is_some(), outputs.biomarkers.is_some()) {
        (true, true) => HeadMode::MultiTarget,
        (true, false) => HeadMode::T2dOnly,
        (false, true) => HeadMode::BiomarkersOnly,
        (false, false) => return Err(Error::ModeMismatch("outputs carry no head".into())),
    };
    check_targets(mode, targets, n)?;
    let nf = n.max(1) as f64;
    let bce = match (&outputs.t2d_prob, &targets.labels) {
        (Some(p), Some(y)) => p.iter().zip(y).map(|(&p, &y)| bce_prob(p, y)).sum::<f64>() / nf,
        _ => 0.0,
    };
    let mse = match (&outputs.biomarkers, &targets.biomarkers) {
        (Some(b), Some(t)) => {
            b.iter()
                .zip(t)
                .flat_map(|(b, t)| b.iter().zip(t).map(|(x, y)| (x - y) * (x - y)))
                .sum::<f64>()
                / (nf * N_BIOMARKERS as f64)
        }
        _ => 0.0,
    };
    let l2_term = l2 * model.weight_sq_norm();
    Ok(LossBreakdown {
        total: bce + lambda_bio * mse + l2_term,
        bce,
        mse,
        l2: l2_term,
    })
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Binary cross-entropy of a probability, clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_prob(p: f64, label: u8) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if label == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// BCE of `sigmoid(z)` and its derivative in `z` (zero where the
/// probability clamp is active).
fn bce_with_grad(z: f64, label: u8) -> (f64, f64) {
    let p = sigmoid(z);
    let loss = bce_prob(p, label);
    let clamped = !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p);
    let dz = if clamped { 0.0 } else { p - label as f64 };
    (loss, dz)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// CHW activation.
#[derive(Debug, Clone)]
struct Plane {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

#[derive(Debug)]
struct BlockCache {
    input: Plane,
    relu_out: Plane,
    argmax: Option<Vec<u32>>,
}

#[derive(Debug)]
struct Pass {
    blocks: Vec<BlockCache>,
    last_shape: (usize, usize, usize),
    gap: Vec<f64>,
    hidden: Vec<f64>,
    logit: Option<f64>,
    bio: Option<[f64; N_BIOMARKERS]>,
}

/// Valid output range `[lo, hi)` for kernel offset `k - 1` along an axis.
#[inline]
fn valid_range(out_len: usize, in_len: usize, stride: usize, k: usize) -> (usize, usize) {
    // input index = o * stride + k - 1 must lie in [0, in_len)
    let lo = if k == 0 { 1usize.div_ceil(stride) } else { 0 };
    let hi = ((in_len + 1 - k) as isize - 1).div_euclid(stride as isize) + 1;
    (lo, (hi.max(0) as usize).min(out_len))
}

fn conv_forward(x: &Plane, w: &[f64], b: &[f64], c_out: usize, stride: usize) -> Plane {
    let ho = (x.h - 1) / stride + 1;
    let wo = (x.w - 1) / stride + 1;
    let mut out = vec![0.0; c_out * ho * wo];
    let in_plane = x.h * x.w;
    for o in 0..c_out {
        let op = &mut out[o * ho * wo..(o + 1) * ho * wo];
        op.fill(b[o]);
        for i in 0..x.c {
            let ip = &x.data[i * in_plane..(i + 1) * in_plane];
            for ky in 0..3 {
                let (y0, y1) = valid_range(ho, x.h, stride, ky);
                for kx in 0..3 {
                    let wt = w[((o * x.c + i) * 3 + ky) * 3 + kx];
                    let (x0, x1) = valid_range(wo, x.w, stride, kx);
                    if x0 >= x1 {
                        continue;
                    }
                    for y in y0..y1 {
                        let iy = y * stride + ky - 1;
                        let orow = &mut op[y * wo + x0..y * wo + x1];
                        if stride == 1 {
                            let irow = &ip[iy * x.w + x0 + kx - 1..iy * x.w + x1 + kx - 1];
                            for (o, i) in orow.iter_mut().zip(irow) {
                                *o += wt * i;
                            }
                        } else {
                            for (j, o) in orow.iter_mut().enumerate() {
                                *o += wt * ip[iy * x.w + (x0 + j) * stride + kx - 1];
                            }
                        }
                    }
                }
            }
        }
    }
    Plane {
        c: c_out,
        h: ho,
        w: wo,
        data: out,
    }
}

/// Returns the input gradient (when `need_input`) and accumulates weight
/// and bias gradients.
fn conv_backward(
    x: &Plane,
    d_out: &Plane,
    w: &[f64],
    stride: usize,
    gw: &mut [f64],
    gb: &mut [f64],
    need_input: bool,
) -> Plane {
    let (ho, wo) = (d_out.h, d_out.w);
    let in_plane = x.h * x.w;
    let mut d_in = vec![0.0; if need_input { x.c * in_plane } else { 0 }];
    for o in 0..d_out.c {
        let gp = &d_out.data[o * ho * wo..(o + 1) * ho * wo];
        gb[o] += gp.iter().sum::<f64>();
        for i in 0..x.c {
            let ip = &x.data[i * in_plane..(i + 1) * in_plane];
            for ky in 0..3 {
                let (y0, y1) = valid_range(ho, x.h, stride, ky);
                for kx in 0..3 {
                    let widx = ((o * x.c + i) * 3 + ky) * 3 + kx;
                    let wt = w[widx];
                    let (x0, x1) = valid_range(wo, x.w, stride, kx);
                    if x0 >= x1 {
                        continue;
                    }
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let iy = y * stride + ky - 1;
                        let grow = &gp[y * wo + x0..y * wo + x1];
                        if stride == 1 {
                            let base = iy * x.w + x0 + kx - 1;
                            let irow = &ip[base..base + (x1 - x0)];
                            acc += dot(grow, irow);
                            if need_input {
                                let drow = &mut d_in[i * in_plane + base..i * in_plane + base + (x1 - x0)];
                                for (d, g) in drow.iter_mut().zip(grow) {
                                    *d += wt * g;
                                }
                            }
                        } else {
                            for (j, g) in grow.iter().enumerate() {
                                let ii = iy * x.w + (x0 + j) * stride + kx - 1;
                                acc += g * ip[ii];
                                if need_input {
                                    d_in[i * in_plane + ii] += wt * g;
                                }
                            }
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    Plane {
        c: x.c,
        h: x.h,
        w: x.w,
        data: d_in,
    }
}

/// 2x2 max-pool, stride 2, floor. Records the flat index of each maximum
/// (first maximum on ties).
fn maxpool_forward(x: &Plane) -> (Plane, Vec<u32>) {
    let (ho, wo) = (x.h / 2, x.w / 2);
    let mut out = Vec::with_capacity(x.c * ho * wo);
    let mut arg = Vec::with_capacity(x.c * ho * wo);
    for c in 0..x.c {
        let base = c * x.h * x.w;
        for y in 0..ho {
            for xx in 0..wo {
                let cands = [
                    base + 2 * y * x.w + 2 * xx,
                    base + 2 * y * x.w + 2 * xx + 1,
                    base + (2 * y + 1) * x.w + 2 * xx,
                    base + (2 * y + 1) * x.w + 2 * xx + 1,
                ];
                let mut best = cands[0];
                for &k in &cands[1..] {
                    if x.data[k] > x.data[best] {
                        best = k;
                    }
                }
                out.push(x.data[best]);
                arg.push(best as u32);
            }
        }
    }
    (
        Plane {
            c: x.c,
            h: ho,
            w: wo,
            data: out,
        },
        arg,
    )
}

fn maxpool_backward(d_out: &Plane, argmax: &[u32], input: &Plane) -> Plane {
    let mut d = vec![0.0; input.data.len()];
    for (g, &k) in d_out.data.iter().zip(argmax) {
        d[k as usize] += g;
    }
    Plane {
        c: input.c,
        h: input.h,
        w: input.w,
        data: d,
    }
}

pub const CHECKPOINT_FORMAT: &str = "fundus-t2d-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// JSON checkpoint container. Layout (version 1):
///
/// ```text
/// { "format": "fundus-t2d-checkpoint", "version": 1,
///   "head_mode": "t2d_only" | "biomarkers_only" | "multi_target",
///   "config_hash": "<hex>", "model": { ModelConfig },
///   "tensors": [ { "name": "conv0.weight", "shape": [8,3,3,3], "data": [..] }, .. ] }
/// ```
///
/// Weights are `[out, in, ky, kx]` for convolutions and `[out, in]` for
/// dense layers, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub head_mode: HeadMode,
    pub config_hash: String,
    pub model: ModelConfig,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut bytes = serde_json::to_vec(self).map_err(|e| Error::CheckpointIo {
            path: PathBuf::new(),
            reason: e.to_string(),
        })?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let io_err = |reason: String| Error::CheckpointIo {
            path: path.to_path_buf(),
            reason,
        };
        let bytes = std::fs::read(path).map_err(|e| io_err(e.to_string()))?;
        let ckpt: Checkpoint = serde_json::from_slice(&bytes).map_err(|e| io_err(e.to_string()))?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(io_err(format!(
                "unsupported container {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        Ok(ckpt)
    }
}
