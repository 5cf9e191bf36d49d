//! Euler sampling of the learned flow with clean tokens held fixed.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::canvas::{visible_crop, compose, LayerRecord, LayeredDesign, Rect, RgbaImage};
use crate::codec::{decode_clamped, LatentGrid};
use crate::error::{Error, Result};
use crate::eval::{psnr, ssim, MetricMode};
use crate::model::{seq_tokens, ForwardCache, Mrt, Params, SeqContext};
use crate::pack::{
    assemble_layer_prompt, empty_latents, encode_condition, encode_design, layer_captions, pack, restyle_prompt, unpack,
    DesignLatents, PackedSequence, RegionKind, Role, TaskKind, TaskSpec, TaskVariant,
};
use crate::synth::{derive_layout, Layout};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub steps: usize,
    /// 1 disables guidance (conditional pass only).
    pub guidance: f64,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { steps: 50, guidance: 1.0, seed: 0 }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sample.steps must be at least 1".into()));
        }
        if !(self.guidance >= 0.0 && self.guidance.is_finite()) {
            return Err(Error::Config("sample.guidance must be a finite value >= 0".into()));
        }
        Ok(())
    }
}

/// A velocity field over `N x C` token matrices with a hand-written
/// vector-Jacobian product, so rollouts can be differentiated.
pub trait FlowField: Sync {
    type Ctx: Sync;
    type Cache: Send + Sync;
    type Grads: Send;

    fn predict(&self, ctx: &Self::Ctx, x: ArrayView2<f32>, t: f64) -> Result<Array2<f32>>;
    fn predict_cached(&self, ctx: &Self::Ctx, x: ArrayView2<f32>, t: f64) -> Result<(Array2<f32>, Self::Cache)>;
    /// Accumulate parameter gradients of `<dout, predict(x)>` and return the
    /// input gradient.
    fn backward(&self, cache: &Self::Cache, dout: ArrayView2<f32>, grads: &mut Self::Grads) -> Array2<f32>;
    fn zero_grads(&self) -> Self::Grads;
}

impl FlowField for Mrt<f32> {
    type Ctx = SeqContext;
    type Cache = ForwardCache<f32>;
    type Grads = Params<f32>;

    fn predict(&self, ctx: &SeqContext, x: ArrayView2<f32>, t: f64) -> Result<Array2<f32>> {
        self.forward(ctx, x, t)
    }

    fn predict_cached(&self, ctx: &SeqContext, x: ArrayView2<f32>, t: f64) -> Result<(Array2<f32>, ForwardCache<f32>)> {
        self.forward_cached(ctx, x, t)
    }

    fn backward(&self, cache: &ForwardCache<f32>, dout: ArrayView2<f32>, grads: &mut Params<f32>) -> Array2<f32> {
        Mrt::backward(self, cache, dout, grads)
    }

    fn zero_grads(&self) -> Params<f32> {
        self.params.zeros_like()
    }
}

/// Timestep of Euler step `k` out of `steps`.
pub fn timestep(k: usize, steps: usize) -> f64 {
    1.0 - k as f64 / steps as f64
}

/// Standard-normal noise for every noised row, drawn row by row.
pub fn initial_noise(clean: &Array2<f32>, noised: &[bool], seed: u64) -> Array2<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = clean.clone();
    for (mut row, &n) in x.rows_mut().into_iter().zip(noised) {
        if n {
            row.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        }
    }
    x
}

/// Integrate `dx/dt = -v` from `t = 1` to `0` with `steps` Euler steps,
/// touching only `noised` rows.
pub fn euler(
    mut x: Array2<f32>,
    noised: &[bool],
    steps: usize,
    mut velocity: impl FnMut(ArrayView2<f32>, f64) -> Result<Array2<f32>>,
) -> Result<Array2<f32>> {
    let dt = 1.0 / steps as f32;
    for k in 0..steps {
        let v = velocity(x.view(), timestep(k, steps))?;
        for ((mut row, vrow), &n) in x.rows_mut().into_iter().zip(v.rows()).zip(noised) {
            if n {
                row.scaled_add(dt, &vrow);
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("sampling trajectory diverged at step {k}")));
        }
    }
    Ok(x)
}

/// `v_null + scale (v_cond - v_null)`; `scale == 1` runs the conditional
/// pass only.
pub fn guided_velocity(model: &Mrt<f32>, ctx: &SeqContext, x: ArrayView2<f32>, t: f64, scale: f64) -> Result<Array2<f32>> {
    if scale == 1.0 {
        return model.forward(ctx, x, t);
    }
    let null = model.forward(&ctx.without_caption(), x, t)?;
    if scale == 0.0 {
        return Ok(null);
    }
    let cond = model.forward(ctx, x, t)?;
    Ok(&null + &((&cond - &null) * scale as f32))
}

fn noised_rows(seq: &PackedSequence) -> Vec<bool> {
    seq.meta.iter().map(|m| m.role == Role::Noised).collect()
}

fn with_tokens(seq: &PackedSequence, x: &Array2<f32>) -> PackedSequence {
    let mut out = seq.clone();
    out.tokens = x.iter().copied().collect();
    out
}

/// Sample every noised region of `seq`; other tokens are returned as given.
pub fn euler_sample(model: &Mrt<f32>, seq: &PackedSequence, cfg: &SampleConfig) -> Result<PackedSequence> {
    cfg.validate()?;
    let ctx = SeqContext::from_seq(seq, &model.config);
    let noised = noised_rows(seq);
    let x0 = initial_noise(&seq_tokens(seq), &noised, cfg.seed);
    let x = euler(x0, &noised, cfg.steps, |x, t| guided_velocity(model, &ctx, x, t, cfg.guidance))?;
    Ok(with_tokens(seq, &x))
}

/// Per-region latents of a sampled sequence (conditions dropped).
pub fn sample_latents(model: &Mrt<f32>, seq: &PackedSequence, cfg: &SampleConfig) -> Result<BTreeMap<RegionKind, LatentGrid>> {
    unpack(&euler_sample(model, seq, cfg)?)
}

/// Inputs of one generation task.
#[derive(Debug, Clone)]
pub enum TaskInput {
    T2l { layout: Layout, caption: String },
    /// `image` is the visible composite, `layout.bg_rect()` in size.
    I2l { image: RgbaImage, layout: Layout, caption: String },
    L2lAdd { design: LayeredDesign, targets: BTreeSet<usize> },
    /// Reference appearance for each target foreground, sized like the layer.
    L2lRestyle { design: LayeredDesign, references: BTreeMap<usize, RgbaImage> },
}

impl TaskInput {
    pub fn kind(&self) -> TaskKind {
        match self {
            TaskInput::T2l { .. } => TaskKind::T2l,
            TaskInput::I2l { .. } => TaskKind::I2l,
            TaskInput::L2lAdd { .. } => TaskKind::L2lAdd,
            TaskInput::L2lRestyle { .. } => TaskKind::L2lRestyle,
        }
    }

    pub fn layout(&self) -> Layout {
        match self {
            TaskInput::T2l { layout, .. } | TaskInput::I2l { layout, .. } => layout.clone(),
            TaskInput::L2lAdd { design, .. } | TaskInput::L2lRestyle { design, .. } => derive_layout(design),
        }
    }
}

/// Task spec and clean latents for an input.
pub fn prepare(input: &TaskInput, s: u32) -> Result<(TaskSpec, DesignLatents)> {
    match input {
        TaskInput::T2l { layout, caption } => {
            layout.validate()?;
            let task = TaskSpec { variant: TaskVariant::T2l, caption: caption.clone() };
            Ok((task, empty_latents(layout, TaskKind::T2l, s)))
        }
        TaskInput::I2l { image, layout, caption } => {
            layout.validate()?;
            let bg = layout.bg_rect();
            if image.width() != bg.w || image.height() != bg.h {
                return Err(Error::Dimension(format!(
                    "input image is {}x{}, the layout's visible region is {}x{}",
                    image.width(),
                    image.height(),
                    bg.w,
                    bg.h
                )));
            }
            let mut latents = empty_latents(layout, TaskKind::I2l, s);
            latents.composed = encode_condition(image, bg, s)?;
            Ok((TaskSpec { variant: TaskVariant::I2l, caption: caption.clone() }, latents))
        }
        TaskInput::L2lAdd { design, targets } => {
            design.validate()?;
            let caption = assemble_layer_prompt(&layer_captions(design), targets)?;
            let task = TaskSpec { variant: TaskVariant::L2lAdd(targets.clone()), caption };
            let latents = encode_design(design, &task, s)?;
            Ok((task, latents))
        }
        TaskInput::L2lRestyle { design, references } => {
            design.validate()?;
            let mut conds = BTreeMap::new();
            for (&i, img) in references {
                let layer = design
                    .layers
                    .get(i)
                    .filter(|_| i >= 1)
                    .ok_or_else(|| Error::InvalidTask(format!("restyle target {i} outside 1..={}", design.k())))?;
                if img.width() != layer.rect.w || img.height() != layer.rect.h {
                    return Err(Error::Dimension(format!("reference for layer {i} does not match its size")));
                }
                conds.insert(i, encode_condition(img, layer.rect, s)?);
            }
            let task = TaskSpec { variant: TaskVariant::L2lRestyle(conds), caption: restyle_prompt().to_string() };
            let latents = encode_design(design, &task, s)?;
            Ok((task, latents))
        }
    }
}

fn crop_region(grid: &LatentGrid, snapped: Rect, rect: Rect) -> Result<(RgbaImage, f64)> {
    let (img, frac) = decode_clamped(grid);
    Ok((visible_crop(&img, rect.translate(-snapped.x, -snapped.y))?, frac))
}

/// Rebuild a design from sampled region latents and the layout.
pub fn assemble_design(layout: &Layout, regions: &BTreeMap<RegionKind, LatentGrid>, latents: &DesignLatents) -> Result<(LayeredDesign, f64)> {
    let grid = |k: RegionKind| regions.get(&k).ok_or_else(|| Error::Dimension(format!("missing region {k:?}")));
    let mut layers = Vec::with_capacity(layout.entries.len());
    let mut clamped = 0.0;
    let mut pixels = 0.0;
    for (i, e) in layout.entries.iter().enumerate() {
        let (kind, snapped) = if i == 0 {
            (RegionKind::Background, latents.bg_rect)
        } else {
            (RegionKind::Foreground(i), latents.foregrounds[i - 1].0)
        };
        let (image, frac) = crop_region(grid(kind)?, snapped, e.rect)?;
        let n = (snapped.w * snapped.h) as f64;
        clamped += frac * n;
        pixels += n;
        layers.push(LayerRecord { image, rect: e.rect, z: e.z, kind: e.kind, caption: e.caption.clone() });
    }
    let design = LayeredDesign {
        canvas_w: layout.canvas_w,
        canvas_h: layout.canvas_h,
        bg_rect: layout.bg_rect(),
        layers,
        global_caption: String::new(),
    };
    design.validate()?;
    Ok((design, if pixels > 0.0 { clamped / pixels } else { 0.0 }))
}

/// Merged reconstruction quality of an I2L result against its input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergedReport {
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone)]
pub struct TaskOutput {
    pub design: LayeredDesign,
    /// Fraction of decoded values moved by the premultiplied clamp.
    pub clamp_fraction: f64,
    pub merged: Option<MergedReport>,
}

pub fn run_task(model: &Mrt<f32>, input: &TaskInput, cfg: &SampleConfig, s: u32) -> Result<TaskOutput> {
    let layout = input.layout();
    let (task, latents) = prepare(input, s)?;
    let seq = pack(&latents, &task)?;
    let regions = sample_latents(model, &seq, cfg)?;
    let (mut design, clamp_fraction) = assemble_design(&layout, &regions, &latents)?;
    if clamp_fraction > 0.0 {
        log::info!("decode clamp moved {:.4}% of values", 100.0 * clamp_fraction);
    }
    let merged = match input {
        TaskInput::I2l { image, .. } => {
            let out = visible_crop(&compose(&design), design.bg_rect)?;
            Some(MergedReport { psnr: psnr(image, &out, MetricMode::Merged)?, ssim: ssim(image, &out, MetricMode::Merged)? })
        }
        _ => None,
    };
    design.global_caption = task.caption;
    Ok(TaskOutput { design, clamp_fraction, merged })
}

/// I2L input for a ground-truth design: its visible composite and layout.
pub fn i2l_input(design: &LayeredDesign) -> Result<TaskInput> {
    Ok(TaskInput::I2l {
        image: visible_crop(&compose(design), design.bg_rect)?,
        layout: derive_layout(design),
        caption: design.global_caption.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn single_step_recovers_datum() {
        let z0 = array![[0.25f32, -1.5, 3.0], [0.7, 0.1, -0.2]];
        let noised = [true, true];
        let x = initial_noise(&Array2::zeros((2, 3)), &noised, 4);
        let out = euler(x, &noised, 1, |x, t| Ok((&z0 - &x) / t as f32)).unwrap();
        for (a, b) in out.iter().zip(z0.iter()) {
            assert!((a - b).abs() <= f32::EPSILON * b.abs().max(1.0) * 4.0);
        }
    }

    #[test]
    fn clean_rows_never_move() {
        let clean = array![[1.0f32, 2.0], [3.0, 4.0]];
        let noised = [false, true];
        let x = initial_noise(&clean, &noised, 1);
        let out = euler(x, &noised, 7, |x, _| Ok(x.mapv(|v| v + 1.0))).unwrap();
        assert_eq!(out.row(0), clean.row(0));
    }
}
