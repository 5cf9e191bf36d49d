//! Flow-matching training: task mixing, masked loss, AdamW, checkpoints.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::canvas::{group_layers, LayeredDesign};
use crate::codec;
use crate::error::{Error, Result};
use crate::exec;
use crate::model::{Float, ModelConfig, Mrt, Params, SeqContext};
use crate::pack::{
    assemble_layer_prompt, encode_condition, encode_design, layer_captions, pack, restyle_prompt, PackedSequence, Role,
    TaskKind, TaskSpec, TaskVariant,
};
use crate::synth::{global_caption, restyle, CaptionMode};

/// `(1 - t) z0 + t eps`
pub fn interpolate(z0: &[f32], eps: &[f32], t: f32) -> Result<Vec<f32>> {
    if z0.len() != eps.len() {
        return Err(Error::Dimension(format!("interpolate: {} vs {} values", z0.len(), eps.len())));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::NonFinite(format!("interpolate: t = {t} outside [0, 1]")));
    }
    Ok(z0.iter().zip(eps).map(|(&a, &e)| (1.0 - t) * a + t * e).collect())
}

/// `z0 - eps`
pub fn velocity_target(z0: &[f32], eps: &[f32]) -> Result<Vec<f32>> {
    if z0.len() != eps.len() {
        return Err(Error::Dimension(format!("velocity_target: {} vs {} values", z0.len(), eps.len())));
    }
    Ok(z0.iter().zip(eps).map(|(&a, &e)| a - e).collect())
}

fn check_loss_shapes<T>(pred: &ArrayView2<T>, target: &ArrayView2<T>, roles: &[Role]) -> Result<usize> {
    if pred.dim() != target.dim() || pred.nrows() != roles.len() {
        return Err(Error::Dimension(format!(
            "loss: pred {:?}, target {:?}, {} roles",
            pred.dim(),
            target.dim(),
            roles.len()
        )));
    }
    let noised = roles.iter().filter(|r| **r == Role::Noised).count();
    if noised == 0 {
        return Err(Error::InvalidTask("loss: sequence has no noised tokens".into()));
    }
    Ok(noised * pred.ncols())
}

/// Mean squared error over the noised tokens' entries.
pub fn masked_flow_loss<T: Float>(pred: ArrayView2<T>, target: ArrayView2<T>, roles: &[Role]) -> Result<T> {
    let count = check_loss_shapes(&pred, &target, roles)?;
    let mut sum = T::zero();
    for (i, _) in roles.iter().enumerate().filter(|(_, r)| **r == Role::Noised) {
        for (&p, &q) in pred.row(i).iter().zip(target.row(i)) {
            sum += (p - q) * (p - q);
        }
    }
    Ok(sum / T::from_usize(count).unwrap())
}

/// Loss and its gradient with respect to `pred`; rows that are not noised
/// get exactly zero.
pub fn masked_flow_loss_grad<T: Float>(pred: ArrayView2<T>, target: ArrayView2<T>, roles: &[Role]) -> Result<(T, Array2<T>)> {
    let loss = masked_flow_loss(pred, target, roles)?;
    let count = T::from_usize(check_loss_shapes(&pred, &target, roles)?).unwrap();
    let two = T::one() + T::one();
    let mut grad = Array2::zeros(pred.raw_dim());
    for (i, _) in roles.iter().enumerate().filter(|(_, r)| **r == Role::Noised) {
        for ((g, &p), &q) in grad.row_mut(i).iter_mut().zip(pred.row(i)).zip(target.row(i)) {
            *g = two * (p - q) / count;
        }
    }
    Ok((loss, grad))
}

/// Probabilities of the three task families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskMix {
    pub t2l: f64,
    pub i2l: f64,
    pub l2l: f64,
}

impl Default for TaskMix {
    fn default() -> Self {
        TaskMix { t2l: 0.70, i2l: 0.15, l2l: 0.15 }
    }
}

/// Draws task kinds; the L2L share is split between addition and
/// restylization by `l2l_add_share`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskSampler {
    pub mix: TaskMix,
    pub l2l_add_share: f64,
}

impl TaskSampler {
    pub fn new(mix: TaskMix, l2l_add_share: f64) -> Result<Self> {
        let parts = [mix.t2l, mix.i2l, mix.l2l, l2l_add_share];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("task mix entries must lie in [0, 1]".into()));
        }
        if (mix.t2l + mix.i2l + mix.l2l - 1.0).abs() > 1e-9 {
            return Err(Error::Config("task mix must sum to 1".into()));
        }
        Ok(TaskSampler { mix, l2l_add_share })
    }

    /// Expected frequency of each kind.
    pub fn probability(&self, kind: TaskKind) -> f64 {
        match kind {
            TaskKind::T2l => self.mix.t2l,
            TaskKind::I2l => self.mix.i2l,
            TaskKind::L2lAdd => self.mix.l2l * self.l2l_add_share,
            TaskKind::L2lRestyle => self.mix.l2l * (1.0 - self.l2l_add_share),
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> TaskKind {
        let u: f64 = rng.random();
        if u < self.mix.t2l {
            TaskKind::T2l
        } else if u < self.mix.t2l + self.mix.i2l {
            TaskKind::I2l
        } else if rng.random::<f64>() < self.l2l_add_share {
            TaskKind::L2lAdd
        } else {
            TaskKind::L2lRestyle
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub task_mix: TaskMix,
    /// Fraction of the L2L share spent on layer addition.
    pub l2l_add_share: f64,
    pub grouping_prob: f64,
    pub caption_mode: CaptionMode,
    pub null_caption_prob: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub patch: u32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 4,
            steps: 1000,
            task_mix: TaskMix::default(),
            l2l_add_share: 0.5,
            grouping_prob: 0.3,
            caption_mode: CaptionMode::Mixed,
            null_caption_prob: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            patch: codec::DEFAULT_PATCH,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        TaskSampler::new(self.task_mix, self.l2l_add_share)?;
        let unit = |p: f64, name: &str| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("train.{name} must lie in [0, 1]")))
            }
        };
        unit(self.grouping_prob, "grouping_prob")?;
        unit(self.null_caption_prob, "null_caption_prob")?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        if self.batch_size == 0 || self.patch == 0 {
            return Err(Error::Config("train.batch_size and train.patch must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("train: invalid AdamW hyperparameters".into()));
        }
        Ok(())
    }

    pub fn sampler(&self) -> Result<TaskSampler> {
        TaskSampler::new(self.task_mix, self.l2l_add_share)
    }
}

/// One supervised example: noised tokens already hold `z_t`.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub seq: PackedSequence,
    pub target: Array2<f32>,
    pub clean: Array2<f32>,
    pub task: TaskKind,
    pub t: f32,
}

/// Merge one random z-contiguous run of at least two foregrounds.
pub fn random_grouping(design: &LayeredDesign, rng: &mut impl Rng) -> Result<LayeredDesign> {
    let k = design.k();
    if k < 2 {
        return Ok(design.clone());
    }
    let lo = rng.random_range(1..k);
    let hi = rng.random_range(lo + 1..=k);
    group_layers(design, &(lo..=hi).collect())
}

/// Random nonempty subset of `1..=k`, proper whenever `k >= 2`.
pub fn random_targets(k: usize, rng: &mut impl Rng) -> BTreeSet<usize> {
    if k <= 1 {
        return (1..=k).collect();
    }
    let size = rng.random_range(1..k);
    let mut all: Vec<usize> = (1..=k).collect();
    for i in 0..size {
        let j = rng.random_range(i..k);
        all.swap(i, j);
    }
    all[..size].iter().copied().collect()
}

/// Task spec for `kind` on `design`, with the caption each task is trained on.
pub fn training_task(design: &LayeredDesign, kind: TaskKind, mode: CaptionMode, s: u32, rng: &mut impl Rng) -> Result<TaskSpec> {
    let mode = match mode {
        CaptionMode::Mixed if rng.random::<bool>() => CaptionMode::Long,
        CaptionMode::Mixed => CaptionMode::Short,
        m => m,
    };
    Ok(match kind {
        TaskKind::T2l => TaskSpec { variant: TaskVariant::T2l, caption: global_caption(design, mode) },
        TaskKind::I2l => TaskSpec { variant: TaskVariant::I2l, caption: global_caption(design, mode) },
        TaskKind::L2lAdd => {
            let a = random_targets(design.k(), rng);
            let caption = assemble_layer_prompt(&layer_captions(design), &a)?;
            TaskSpec { variant: TaskVariant::L2lAdd(a), caption }
        }
        TaskKind::L2lRestyle => {
            let set = random_targets(design.k(), rng);
            let mut conds = BTreeMap::new();
            for &i in &set {
                let layer = &design.layers[i];
                conds.insert(i, encode_condition(&restyle(&layer.image, rng), layer.rect, s)?);
            }
            TaskSpec { variant: TaskVariant::L2lRestyle(conds), caption: restyle_prompt().to_string() }
        }
    })
}

/// Build a noised training example from a design.
pub fn make_training_example(
    design: &LayeredDesign,
    sampler: &TaskSampler,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<TrainingExample> {
    let design = if cfg.grouping_prob > 0.0 && rng.random::<f64>() < cfg.grouping_prob {
        random_grouping(design, rng)?
    } else {
        design.clone()
    };
    let kind = sampler.sample(rng);
    let mut task = training_task(&design, kind, cfg.caption_mode, cfg.patch, rng)?;
    if cfg.null_caption_prob > 0.0 && rng.random::<f64>() < cfg.null_caption_prob {
        task.caption.clear();
    }
    let latents = encode_design(&design, &task, cfg.patch)?;
    let mut seq = pack(&latents, &task)?;
    let t: f32 = rng.random();
    let (n, c) = (seq.len(), seq.channels);
    let clean = Array2::from_shape_vec((n, c), seq.tokens.clone()).map_err(|e| Error::Dimension(e.to_string()))?;
    let mut target = Array2::zeros((n, c));
    for i in 0..n {
        if seq.meta[i].role != Role::Noised {
            continue;
        }
        let eps: Vec<f32> = (0..c).map(|_| rng.sample(StandardNormal)).collect();
        let row = &mut seq.tokens[i * c..(i + 1) * c];
        let z0 = row.to_vec();
        row.copy_from_slice(&interpolate(&z0, &eps, t)?);
        for (dst, v) in target.row_mut(i).iter_mut().zip(velocity_target(&z0, &eps)?) {
            *dst = v;
        }
    }
    Ok(TrainingExample { seq, target, clean, task: kind, t })
}

/// Flat views of a parameter set, in a fixed order.
pub trait ParamTensors {
    fn tensors(&self) -> Vec<&[f32]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f32]>;

    fn sizes(&self) -> Vec<usize> {
        self.tensors().iter().map(|t| t.len()).collect()
    }

    fn accumulate(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += *y);
        }
    }

    fn scale_all(&mut self, k: f32) {
        for a in self.tensors_mut() {
            a.iter_mut().for_each(|x| *x *= k);
        }
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

impl ParamTensors for Params<f32> {
    fn tensors(&self) -> Vec<&[f32]> {
        self.named().into_iter().map(|t| t.data).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        self.slices_mut()
    }
}

impl ParamTensors for Mrt<f32> {
    fn tensors(&self) -> Vec<&[f32]> {
        self.params.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        self.params.tensors_mut()
    }
}

/// Optimizer moments, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(sizes: &[usize], lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn from_config(sizes: &[usize], cfg: &TrainConfig) -> Self {
        Self::new(sizes, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    }

    pub fn step<P: ParamTensors + ?Sized, G: ParamTensors + ?Sized>(&mut self, params: &mut P, grads: &G) {
        self.update(params.tensors_mut(), &grads.tensors());
    }

    /// One update of every tensor in `params` from the matching `grads`.
    pub fn update(&mut self, params: Vec<&mut [f32]>, grads: &[&[f32]]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let lr = self.lr as f32;
        let step = (self.lr / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        let decay = 1.0 - lr * self.weight_decay as f32;
        let eps = self.eps as f32;
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p = *p * decay - step * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
    }
}

/// Loss and parameter gradient for one example.
pub fn example_gradient(model: &Mrt<f32>, ex: &TrainingExample) -> Result<(f32, Params<f32>)> {
    let ctx = SeqContext::from_seq(&ex.seq, &model.config);
    let x = crate::model::seq_tokens::<f32>(&ex.seq);
    let (pred, cache) = model.forward_cached(&ctx, x.view(), ex.t as f64)?;
    let roles = ex.seq.roles();
    let (loss, dpred) = masked_flow_loss_grad(pred.view(), ex.target.view(), &roles)?;
    let mut grads = model.params.zeros_like();
    model.backward(&cache, dpred.view(), &mut grads);
    Ok((loss, grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub task: TaskKind,
    pub loss: f32,
}

/// Everything needed to resume training or sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Params<f32>,
    pub optimizer: AdamW,
    pub rng: ChaCha8Rng,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub step: u64,
    pub distilled: bool,
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MRTCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

pub struct Trainer {
    pub model: Mrt<f32>,
    pub config: TrainConfig,
    pub optimizer: AdamW,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub log: Vec<LossRecord>,
    sampler: TaskSampler,
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        check_channels(&model_cfg, cfg.patch)?;
        let model = Mrt::new(model_cfg, cfg.seed)?;
        let optimizer = AdamW::from_config(&model.params.sizes(), &cfg);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_7a11);
        let sampler = cfg.sampler()?;
        Ok(Trainer { model, config: cfg, optimizer, rng, step: 0, log: Vec::new(), sampler })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let Checkpoint { header, params, optimizer, rng } = ckpt;
        let model = Mrt::with_params(header.model, params)?;
        let sampler = header.train.sampler()?;
        Ok(Trainer { model, config: header.train, optimizer, rng, step: header.step, log: Vec::new(), sampler })
    }

    /// One optimizer step over `batch_size` examples drawn from `dataset`.
    /// Examples are prepared and differentiated concurrently; gradients are
    /// summed in index order.
    pub fn train_step(&mut self, dataset: &[LayeredDesign]) -> Result<f32> {
        if dataset.is_empty() {
            return Err(Error::Config("training dataset is empty".into()));
        }
        let b = self.config.batch_size;
        let draws: Vec<(usize, u64)> =
            (0..b).map(|_| (self.rng.random_range(0..dataset.len()), self.rng.next_u64())).collect();
        let results = exec::try_map(b, |i| {
            let (idx, seed) = draws[i];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ex = make_training_example(&dataset[idx], &self.sampler, &self.config, &mut rng)?;
            let (loss, grads) = example_gradient(&self.model, &ex)?;
            Ok::<_, Error>((ex.task, loss, grads))
        })?;
        self.step += 1;
        let mut total = self.model.params.zeros_like();
        let mut mean = 0.0;
        for (task, loss, grads) in &results {
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("loss {loss} at step {} ({})", self.step, task.name())));
            }
            total.add_assign(grads);
            mean += loss / b as f32;
            self.log.push(LossRecord { step: self.step, task: *task, loss: *loss });
        }
        total.scale(1.0 / b as f32);
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("gradient at step {}", self.step)));
        }
        self.optimizer.step(&mut self.model.params, &total);
        Ok(mean)
    }

    /// Run until `config.steps` optimizer steps have been taken.
    pub fn run(&mut self, dataset: &[LayeredDesign]) -> Result<()> {
        while self.step < self.config.steps {
            let loss = self.train_step(dataset)?;
            if self.step % 100 == 0 || self.step == self.config.steps {
                log::info!("step {} loss {loss:.5}", self.step);
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            header: CheckpointHeader {
                format_version: CHECKPOINT_VERSION,
                model: self.model.config.clone(),
                train: self.config.clone(),
                step: self.step,
                distilled: false,
            },
            params: self.model.params.clone(),
            optimizer: self.optimizer.clone(),
            rng: self.rng.clone(),
        }
    }
}

pub fn check_channels(model: &ModelConfig, patch: u32) -> Result<()> {
    if model.latent_channels != codec::channels(patch) {
        return Err(Error::Config(format!(
            "model.latent_channels = {} but patch {patch} gives {} channels",
            model.latent_channels,
            codec::channels(patch)
        )));
    }
    Ok(())
}

/// Train from scratch for `cfg.steps` steps.
pub fn train(model_cfg: ModelConfig, cfg: TrainConfig, dataset: &[LayeredDesign]) -> Result<(Checkpoint, Vec<LossRecord>)> {
    let mut tr = Trainer::new(model_cfg, cfg)?;
    tr.run(dataset)?;
    Ok((tr.checkpoint(), tr.log))
}

pub fn loss_log_csv(log: &[LossRecord]) -> String {
    let mut s = String::from("step,task,loss\n");
    for r in log {
        let _ = writeln!(s, "{},{},{}", r.step, r.task.name(), r.loss);
    }
    s
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len() as u32);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let header = serde_json::to_vec(&self.header).map_err(|e| Error::Config(e.to_string()))?;
        put_u32(&mut out, header.len() as u32);
        out.extend_from_slice(&header);
        let named = self.params.named();
        put_u32(&mut out, (3 * named.len()) as u32);
        for t in &named {
            put_tensor(&mut out, &t.name, &t.shape, t.data);
        }
        for (prefix, bufs) in [("adam.m.", &self.optimizer.m), ("adam.v.", &self.optimizer.v)] {
            for (t, buf) in named.iter().zip(bufs) {
                put_tensor(&mut out, &format!("{prefix}{}", t.name), &t.shape, buf);
            }
        }
        out.extend_from_slice(&self.optimizer.step.to_le_bytes());
        out.extend_from_slice(&self.rng.get_seed());
        out.extend_from_slice(&self.rng.get_stream().to_le_bytes());
        out.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader { buf: bytes, origin };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::format(origin, "not a checkpoint (bad magic)"));
        }
        let hlen = r.u32()? as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::format(origin, format!("header: {e}")))?;
        if header.format_version != CHECKPOINT_VERSION {
            return Err(Error::format(origin, format!("unsupported format version {}", header.format_version)));
        }
        header.model.validate()?;
        let mut params = Params::<f32>::zeros(&header.model);
        let count = r.u32()? as usize;
        let expected: Vec<(String, Vec<usize>)> =
            params.named().iter().map(|t| (t.name.clone(), t.shape.clone())).collect();
        if count != 3 * expected.len() {
            return Err(Error::format(origin, format!("{count} tensors, expected {}", 3 * expected.len())));
        }
        let read_into = |r: &mut Reader, name: &str, shape: &[usize], dst: &mut [f32]| -> Result<()> {
            let nlen = r.u32()? as usize;
            let got = std::str::from_utf8(r.take(nlen)?).map_err(|e| Error::format(origin, e.to_string()))?.to_string();
            let ndim = r.u32()? as usize;
            let dims = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if got != name || dims != shape {
                return Err(Error::format(origin, format!("tensor {got} {dims:?}, expected {name} {shape:?}")));
            }
            for v in dst.iter_mut() {
                *v = f32::from_le_bytes(r.take(4)?.try_into().unwrap());
            }
            Ok(())
        };
        for ((name, shape), dst) in expected.iter().zip(params.slices_mut()) {
            read_into(&mut r, name, shape, dst)?;
        }
        let sizes: Vec<usize> = expected.iter().map(|(_, s)| s.iter().product()).collect();
        let mut optimizer = AdamW::from_config(&sizes, &header.train);
        for (prefix, which) in [("adam.m.", 0), ("adam.v.", 1)] {
            for (i, (name, shape)) in expected.iter().enumerate() {
                let buf = if which == 0 { &mut optimizer.m[i] } else { &mut optimizer.v[i] };
                read_into(&mut r, &format!("{prefix}{name}"), shape, buf)?;
            }
        }
        optimizer.step = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        if !r.buf.is_empty() {
            return Err(Error::format(origin, format!("{} trailing bytes", r.buf.len())));
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        Ok(Checkpoint { header, params, optimizer, rng })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn model(&self) -> Result<Mrt<f32>> {
        Mrt::with_params(self.header.model.clone(), self.params.clone())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::format(self.origin, "truncated checkpoint"));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn interpolation_endpoints() {
        let z0 = [2.0, -1.0];
        let eps = [0.0, 3.0];
        assert_eq!(interpolate(&z0, &eps, 0.0).unwrap(), z0);
        assert_eq!(interpolate(&z0, &eps, 1.0).unwrap(), eps);
        assert_eq!(interpolate(&[2.0], &[0.0], 0.25).unwrap(), [1.5]);
        assert_eq!(velocity_target(&[1.0], &[0.0]).unwrap(), [1.0]);
        assert_eq!(velocity_target(&[0.5], &[0.5]).unwrap(), [0.0]);
    }

    #[test]
    fn loss_of_unit_error_is_one() {
        let p = array![[1.0f64, 1.0], [1.0, 1.0]];
        let t = Array2::zeros((2, 2));
        assert_eq!(masked_flow_loss(p.view(), t.view(), &[Role::Noised, Role::Noised]).unwrap(), 1.0);
        assert!(masked_flow_loss(p.view(), t.view(), &[Role::Clean, Role::Condition]).is_err());
    }

    #[test]
    fn random_targets_are_proper() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in 2..8 {
            for _ in 0..50 {
                let a = random_targets(k, &mut rng);
                assert!(!a.is_empty() && a.len() < k && a.iter().all(|&i| (1..=k).contains(&i)));
            }
        }
        assert_eq!(random_targets(1, &mut rng), BTreeSet::from([1]));
    }
}
