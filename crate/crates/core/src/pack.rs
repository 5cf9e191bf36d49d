//! Regional token packing.
//!
//! Every region (composite, background, each foreground, and any appended
//! restyle conditions) is cropped to its snapped rectangle, encoded, and
//! laid end to end in a fixed order: composite, background, foregrounds by
//! ascending z, conditions. Each token keeps its global canvas latent
//! coordinate as its position id, so overflow pixels are ordinary tokens.
//!
//! The task decides the role of each region:
//!
//! | task          | composite | background | fg in target set | other fg | conditions |
//! |---------------|-----------|------------|------------------|----------|------------|
//! | T2L           | noised    | noised     | noised (all)     | -        | -          |
//! | I2L           | clean     | noised     | noised (all)     | -        | -          |
//! | L2L add A     | clean     | clean      | noised           | clean    | -          |
//! | L2L restyle I | clean     | clean      | noised           | clean    | condition  |

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::canvas::{compose, place_image, visible_crop, LayerKind, LayeredDesign, Rect};
use crate::codec::{channels, encode, snap_rect, LatentGrid};
use crate::error::{Error, Result};
use crate::synth::Layout;

pub const RESTYLE_PROMPT: &str = "Harmonize these layers";

/// Role of a token in the current task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// Noised at training time and predicted by the model.
    Noised,
    /// Clean latent carrying pre-existing content; attended, never supervised.
    Clean,
    /// Appended restyle reference; clean and never part of the output.
    Condition,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    Composed,
    Background,
    /// Foreground layer `i`, 1-based in z order.
    Foreground(usize),
    /// Restyle condition for foreground `i`.
    Condition(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    T2l,
    I2l,
    L2lAdd,
    L2lRestyle,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [TaskKind::T2l, TaskKind::I2l, TaskKind::L2lAdd, TaskKind::L2lRestyle];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::T2l => "t2l",
            TaskKind::I2l => "i2l",
            TaskKind::L2lAdd => "l2l-add",
            TaskKind::L2lRestyle => "l2l-restyle",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidTask(format!("unknown task {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskVariant {
    T2l,
    I2l,
    /// Foreground indices (1-based) to generate.
    L2lAdd(BTreeSet<usize>),
    /// Foreground indices to restyle, each with its appearance reference.
    L2lRestyle(BTreeMap<usize, LatentGrid>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub variant: TaskVariant,
    pub caption: String,
}

impl TaskSpec {
    pub fn kind(&self) -> TaskKind {
        match self.variant {
            TaskVariant::T2l => TaskKind::T2l,
            TaskVariant::I2l => TaskKind::I2l,
            TaskVariant::L2lAdd(_) => TaskKind::L2lAdd,
            TaskVariant::L2lRestyle(_) => TaskKind::L2lRestyle,
        }
    }

    /// Foreground indices that are generated, empty for T2L/I2L (all are).
    pub fn targets(&self) -> BTreeSet<usize> {
        match &self.variant {
            TaskVariant::L2lAdd(a) => a.clone(),
            TaskVariant::L2lRestyle(c) => c.keys().copied().collect(),
            _ => BTreeSet::new(),
        }
    }
}

/// Role of every region for one task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub composed: Role,
    pub background: Role,
    /// Roles of foregrounds `1..=K` (index 0 is foreground 1).
    pub foreground: Vec<Role>,
    /// Foreground indices that receive an appended condition region.
    pub conditions: Vec<usize>,
}

impl MaskPlan {
    pub fn role(&self, kind: RegionKind) -> Role {
        match kind {
            RegionKind::Composed => self.composed,
            RegionKind::Background => self.background,
            RegionKind::Foreground(i) => self.foreground[i - 1],
            RegionKind::Condition(_) => Role::Condition,
        }
    }

    pub fn noised(&self) -> BTreeSet<RegionKind> {
        self.regions().filter(|(_, r)| *r == Role::Noised).map(|(k, _)| k).collect()
    }

    pub fn clean(&self) -> BTreeSet<RegionKind> {
        self.regions().filter(|(_, r)| *r == Role::Clean).map(|(k, _)| k).collect()
    }

    fn regions(&self) -> impl Iterator<Item = (RegionKind, Role)> + '_ {
        [(RegionKind::Composed, self.composed), (RegionKind::Background, self.background)]
            .into_iter()
            .chain(self.foreground.iter().enumerate().map(|(i, r)| (RegionKind::Foreground(i + 1), *r)))
            .chain(self.conditions.iter().map(|&i| (RegionKind::Condition(i), Role::Condition)))
    }
}

fn check_targets(set: &BTreeSet<usize>, k: usize, what: &str) -> Result<()> {
    if set.is_empty() {
        return Err(Error::InvalidTask(format!("{what} target set is empty")));
    }
    if let Some(&bad) = set.iter().find(|&&i| i == 0 || i > k) {
        return Err(Error::InvalidTask(format!("{what} target {bad} outside 1..={k}")));
    }
    Ok(())
}

pub fn mask_plan(task: &TaskSpec, k: usize) -> Result<MaskPlan> {
    use Role::*;
    Ok(match &task.variant {
        TaskVariant::T2l => MaskPlan { composed: Noised, background: Noised, foreground: vec![Noised; k], conditions: vec![] },
        TaskVariant::I2l => MaskPlan { composed: Clean, background: Noised, foreground: vec![Noised; k], conditions: vec![] },
        TaskVariant::L2lAdd(a) => {
            check_targets(a, k, "layer addition")?;
            let foreground = (1..=k).map(|i| if a.contains(&i) { Noised } else { Clean }).collect();
            MaskPlan { composed: Clean, background: Clean, foreground, conditions: vec![] }
        }
        TaskVariant::L2lRestyle(conds) => {
            let set: BTreeSet<usize> = conds.keys().copied().collect();
            check_targets(&set, k, "restyle")?;
            let foreground = (1..=k).map(|i| if set.contains(&i) { Noised } else { Clean }).collect();
            MaskPlan { composed: Clean, background: Clean, foreground, conditions: set.into_iter().collect() }
        }
    })
}

/// Clean latents for every region of a design, in canvas latent geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignLatents {
    pub patch: u32,
    /// Snapped rect of the composite region (full canvas, or visible region for I2L).
    pub composed_rect: Rect,
    pub composed: LatentGrid,
    pub bg_rect: Rect,
    pub background: LatentGrid,
    /// `(snapped rect, latent)` for foregrounds `1..=K`.
    pub foregrounds: Vec<(Rect, LatentGrid)>,
}

/// Snapped rects of every region for a layout and task kind.
pub fn region_rects(layout: &Layout, kind: TaskKind, s: u32) -> (Rect, Rect, Vec<Rect>) {
    let canvas = Rect { x: 0, y: 0, w: layout.canvas_w, h: layout.canvas_h };
    let composed = if kind == TaskKind::I2l { snap_rect(layout.bg_rect(), s) } else { snap_rect(canvas, s) };
    let bg = snap_rect(layout.bg_rect(), s);
    let fgs = layout.entries[1..].iter().map(|e| snap_rect(e.rect, s)).collect();
    (composed, bg, fgs)
}

/// Zero latents shaped by a layout, for regions whose content is unknown.
pub fn empty_latents(layout: &Layout, kind: TaskKind, s: u32) -> DesignLatents {
    let (composed_rect, bg_rect, fg_rects) = region_rects(layout, kind, s);
    let grid = |r: Rect| LatentGrid::zeros(s, r.h / s, r.w / s);
    DesignLatents {
        patch: s,
        composed_rect,
        composed: grid(composed_rect),
        bg_rect,
        background: grid(bg_rect),
        foregrounds: fg_rects.into_iter().map(|r| (r, grid(r))).collect(),
    }
}

fn encode_in(img: &crate::canvas::RgbaImage, at: Rect, snapped: Rect, s: u32) -> Result<LatentGrid> {
    let padded = place_image(img, at.translate(-snapped.x, -snapped.y), snapped.w, snapped.h);
    encode(&padded, s)
}

/// Encode a design for `task`. The composite is the full canvas for T2L,
/// the visible crop for I2L, and the background plus non-target layers for
/// the editing tasks.
pub fn encode_design(design: &LayeredDesign, task: &TaskSpec, s: u32) -> Result<DesignLatents> {
    let layout = crate::synth::derive_layout(design);
    let kind = task.kind();
    let (composed_rect, bg_rect, fg_rects) = region_rects(&layout, kind, s);
    let composite = match kind {
        TaskKind::T2l => compose(design),
        TaskKind::I2l => {
            let full = compose(design);
            let visible = visible_crop(&full, design.bg_rect)?;
            return finish(design, s, composed_rect, encode_in(&visible, design.bg_rect, composed_rect, s)?, bg_rect, fg_rects);
        }
        TaskKind::L2lAdd | TaskKind::L2lRestyle => {
            let targets = task.targets();
            let mut kept = design.clone();
            kept.layers = design
                .layers
                .iter()
                .enumerate()
                .filter(|(i, _)| !targets.contains(i))
                .map(|(_, l)| l.clone())
                .collect();
            compose(&kept)
        }
    };
    let canvas = design.canvas_rect();
    let composed = encode_in(&composite, canvas, composed_rect, s)?;
    finish(design, s, composed_rect, composed, bg_rect, fg_rects)
}

fn finish(design: &LayeredDesign, s: u32, composed_rect: Rect, composed: LatentGrid, bg_rect: Rect, fg_rects: Vec<Rect>) -> Result<DesignLatents> {
    let bg = design.background();
    let background = encode_in(&bg.image, bg.rect, bg_rect, s)?;
    let foregrounds = design
        .foregrounds()
        .iter()
        .zip(fg_rects)
        .map(|(l, r)| Ok((r, encode_in(&l.image, l.rect, r, s)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(DesignLatents { patch: s, composed_rect, composed, bg_rect, background, foregrounds })
}

/// Encode a restyle reference image (placed at `rect`) on the grid of the
/// target layer's snapped rect.
pub fn encode_condition(img: &crate::canvas::RgbaImage, rect: Rect, s: u32) -> Result<LatentGrid> {
    encode_in(img, rect, snap_rect(rect, s), s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenMeta {
    /// 0 composite, 1 background, `1 + i` foreground `i`, `K + 1 + j` the
    /// j-th condition (1-based).
    pub region_id: u16,
    /// `(row, col)` in global canvas latent coordinates.
    pub pos: (i32, i32),
    pub role: Role,
    /// Row of the region-embedding table; conditions use their target's id.
    pub embed_id: u16,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionSpan {
    pub kind: RegionKind,
    pub rect: Rect,
    pub role: Role,
    pub start: usize,
    pub len: usize,
    pub grid_h: u32,
    pub grid_w: u32,
}

/// Flattened token sequence for one design and task.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedSequence {
    pub patch: u32,
    pub channels: usize,
    /// `N x channels`, row-major.
    pub tokens: Vec<f32>,
    pub meta: Vec<TokenMeta>,
    pub regions: Vec<RegionSpan>,
    pub caption: String,
    /// Position shared by all caption tokens (the canvas origin).
    pub caption_anchor: (i32, i32),
}

impl PackedSequence {
    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn token(&self, i: usize) -> &[f32] {
        &self.tokens[i * self.channels..(i + 1) * self.channels]
    }

    pub fn roles(&self) -> Vec<Role> {
        self.meta.iter().map(|m| m.role).collect()
    }

    pub fn noised_count(&self) -> usize {
        self.meta.iter().filter(|m| m.role == Role::Noised).count()
    }

    pub fn region(&self, kind: RegionKind) -> Option<&RegionSpan> {
        self.regions.iter().find(|r| r.kind == kind)
    }

    pub fn region_tokens(&self, span: &RegionSpan) -> &[f32] {
        &self.tokens[span.start * self.channels..(span.start + span.len) * self.channels]
    }

    /// Translate every position id (tokens and caption anchor) by `(dr, dc)`.
    pub fn translated(&self, dr: i32, dc: i32) -> PackedSequence {
        let mut out = self.clone();
        for m in &mut out.meta {
            m.pos = (m.pos.0 + dr, m.pos.1 + dc);
        }
        out.caption_anchor = (out.caption_anchor.0 + dr, out.caption_anchor.1 + dc);
        out
    }
}

fn push_region(seq: &mut PackedSequence, kind: RegionKind, rect: Rect, grid: &LatentGrid, role: Role, region_id: u16, embed_id: u16) -> Result<()> {
    let s = seq.patch;
    if grid.patch() != s || grid.channels() != seq.channels || rect.w != grid.w() * s || rect.h != grid.h() * s {
        return Err(Error::Dimension(format!(
            "{kind:?}: rect {rect:?} does not match a {}x{} latent grid with patch {}",
            grid.h(),
            grid.w(),
            grid.patch()
        )));
    }
    if rect.x.rem_euclid(s as i32) != 0 || rect.y.rem_euclid(s as i32) != 0 {
        return Err(Error::Dimension(format!("{kind:?}: rect {rect:?} is not snapped to patch {s}")));
    }
    let (r0, c0) = (rect.y.div_euclid(s as i32), rect.x.div_euclid(s as i32));
    let start = seq.meta.len();
    for row in 0..grid.h() {
        for col in 0..grid.w() {
            seq.meta.push(TokenMeta { region_id, pos: (r0 + row as i32, c0 + col as i32), role, embed_id });
        }
    }
    seq.tokens.extend_from_slice(grid.data());
    seq.regions.push(RegionSpan { kind, rect, role, start, len: grid.cells(), grid_h: grid.h(), grid_w: grid.w() });
    Ok(())
}

/// Pack region latents into one sequence under the task's mask plan.
pub fn pack(latents: &DesignLatents, task: &TaskSpec) -> Result<PackedSequence> {
    let k = latents.foregrounds.len();
    let plan = mask_plan(task, k)?;
    let s = latents.patch;
    let mut seq = PackedSequence {
        patch: s,
        channels: channels(s),
        tokens: Vec::new(),
        meta: Vec::new(),
        regions: Vec::new(),
        caption: task.caption.clone(),
        caption_anchor: (0, 0),
    };
    push_region(&mut seq, RegionKind::Composed, latents.composed_rect, &latents.composed, plan.composed, 0, 0)?;
    push_region(&mut seq, RegionKind::Background, latents.bg_rect, &latents.background, plan.background, 1, 1)?;
    for (i, (rect, grid)) in latents.foregrounds.iter().enumerate() {
        let id = (i + 2) as u16;
        push_region(&mut seq, RegionKind::Foreground(i + 1), *rect, grid, plan.foreground[i], id, id)?;
    }
    if let TaskVariant::L2lRestyle(conds) = &task.variant {
        for (j, (&target, grid)) in conds.iter().enumerate() {
            let rect = latents.foregrounds[target - 1].0;
            push_region(&mut seq, RegionKind::Condition(target), rect, grid, Role::Condition, (k + 2 + j) as u16, (target + 1) as u16)?;
        }
    }
    Ok(seq)
}

/// Split a sequence back into per-region latents, dropping conditions.
pub fn unpack(seq: &PackedSequence) -> Result<BTreeMap<RegionKind, LatentGrid>> {
    let mut out = BTreeMap::new();
    for span in &seq.regions {
        if matches!(span.kind, RegionKind::Condition(_)) {
            continue;
        }
        let grid = LatentGrid::from_data(seq.patch, span.grid_h, span.grid_w, seq.region_tokens(span).to_vec())?;
        out.insert(span.kind, grid);
    }
    Ok(out)
}

/// `<layer> c_i </layer>` for every `i` in `targets`, in layer order.
/// `captions[i - 1]` is the caption of foreground `i`.
pub fn assemble_layer_prompt(captions: &[String], targets: &BTreeSet<usize>) -> Result<String> {
    if targets.is_empty() {
        return Err(Error::InvalidTask("layer prompt needs at least one target".into()));
    }
    let mut out = String::new();
    for &i in targets {
        let c = captions
            .get(i.wrapping_sub(1))
            .ok_or_else(|| Error::InvalidTask(format!("no caption for layer {i}")))?;
        out.push_str("<layer> ");
        out.push_str(c);
        out.push_str(" </layer>");
    }
    Ok(out)
}

pub fn restyle_prompt() -> &'static str {
    RESTYLE_PROMPT
}

/// Captions of a design's foregrounds, in layer order.
pub fn layer_captions(design: &LayeredDesign) -> Vec<String> {
    design.layers.iter().filter(|l| l.kind == LayerKind::Foreground).map(|l| l.caption.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(variant: TaskVariant) -> TaskSpec {
        TaskSpec { variant, caption: String::new() }
    }

    #[test]
    fn t2l_plan_masks_nothing() {
        let p = mask_plan(&task(TaskVariant::T2l), 2).unwrap();
        assert!(p.clean().is_empty());
        assert_eq!(p.noised().len(), 4);
    }

    #[test]
    fn i2l_plan_masks_composite() {
        let p = mask_plan(&task(TaskVariant::I2l), 2).unwrap();
        assert_eq!(p.clean(), BTreeSet::from([RegionKind::Composed]));
        assert_eq!(
            p.noised(),
            BTreeSet::from([RegionKind::Background, RegionKind::Foreground(1), RegionKind::Foreground(2)])
        );
    }

    #[test]
    fn add_plan_noises_targets_only() {
        let p = mask_plan(&task(TaskVariant::L2lAdd(BTreeSet::from([2]))), 3).unwrap();
        assert_eq!(p.noised(), BTreeSet::from([RegionKind::Foreground(2)]));
        assert_eq!(
            p.clean(),
            BTreeSet::from([RegionKind::Composed, RegionKind::Background, RegionKind::Foreground(1), RegionKind::Foreground(3)])
        );
    }

    #[test]
    fn plans_reject_bad_targets() {
        assert!(mask_plan(&task(TaskVariant::L2lAdd(BTreeSet::from([4]))), 3).is_err());
        assert!(mask_plan(&task(TaskVariant::L2lAdd(BTreeSet::new())), 3).is_err());
        assert!(mask_plan(&task(TaskVariant::L2lRestyle(BTreeMap::new())), 3).is_err());
    }

    #[test]
    fn layer_prompts() {
        let caps = vec!["red sun".to_string()];
        assert_eq!(assemble_layer_prompt(&caps, &BTreeSet::from([1])).unwrap(), "<layer> red sun </layer>");
        let caps = vec!["a".to_string(), "b".to_string()];
        assert_eq!(
            assemble_layer_prompt(&caps, &BTreeSet::from([1, 2])).unwrap(),
            "<layer> a </layer><layer> b </layer>"
        );
        assert!(assemble_layer_prompt(&caps, &BTreeSet::new()).is_err());
        assert!(assemble_layer_prompt(&caps, &BTreeSet::from([3])).is_err());
    }

    #[test]
    fn restyle_prompt_is_fixed() {
        assert_eq!(restyle_prompt(), "Harmonize these layers");
    }

    #[test]
    fn task_names_round_trip() {
        for k in TaskKind::ALL {
            assert_eq!(k.name().parse::<TaskKind>().unwrap(), k);
        }
        assert!("x2y".parse::<TaskKind>().is_err());
    }
}
