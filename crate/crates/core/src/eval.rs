//! Reconstruction metrics and the analytic token/FLOP/memory cost model.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::canvas::{compose, place, visible_crop, LayeredDesign, RgbaImage};
use crate::codec::{snap_rect, token_count};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Mrt};
use crate::sampler::{i2l_input, run_task, SampleConfig};
use crate::synth::{sample_seed, Layout};

pub const SSIM_WINDOW: u32 = 8;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Stand-in for an infinite PSNR when averaging.
pub const PSNR_CAP: f64 = 100.0;

/// `Merged` compares RGBA over every pixel; `Layer` compares RGB over
/// pixels where either input has nonzero alpha.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricMode {
    Merged,
    Layer,
}

fn check_dims(a: &RgbaImage, b: &RgbaImage) -> Result<()> {
    if !a.same_size(b) {
        return Err(Error::Dimension(format!(
            "metric inputs are {}x{} and {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

fn layer_mask(a: &RgbaImage, b: &RgbaImage) -> Vec<bool> {
    a.pixels().iter().zip(b.pixels()).map(|(p, q)| p[3] > 0.0 || q[3] > 0.0).collect()
}

fn channels(mode: MetricMode) -> usize {
    match mode {
        MetricMode::Merged => 4,
        MetricMode::Layer => 3,
    }
}

/// Mean squared error over the included entries, `None` if nothing is included.
pub fn mse(a: &RgbaImage, b: &RgbaImage, mode: MetricMode) -> Result<Option<f64>> {
    check_dims(a, b)?;
    let nc = channels(mode);
    let mask = match mode {
        MetricMode::Merged => vec![true; a.pixels().len()],
        MetricMode::Layer => layer_mask(a, b),
    };
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((p, q), &m) in a.pixels().iter().zip(b.pixels()).zip(&mask) {
        if m {
            for c in 0..nc {
                let d = p[c] as f64 - q[c] as f64;
                sum += d * d;
            }
            n += nc;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

/// `10 log10(1 / MSE)` in dB; infinite when the inputs agree exactly.
pub fn psnr(a: &RgbaImage, b: &RgbaImage, mode: MetricMode) -> Result<f64> {
    Ok(match mse(a, b, mode)? {
        Some(m) if m > 0.0 => 10.0 * (1.0 / m).log10(),
        _ => f64::INFINITY,
    })
}

/// Single-scale SSIM with uniform 8x8 windows at stride 1 (one window of the
/// whole image when it is smaller), averaged over windows and channels. In
/// layer mode only windows touching the mask count and unmasked pixels are
/// read as zero.
pub fn ssim(a: &RgbaImage, b: &RgbaImage, mode: MetricMode) -> Result<f64> {
    check_dims(a, b)?;
    let (w, h) = (a.width() as usize, a.height() as usize);
    if w == 0 || h == 0 {
        return Ok(1.0);
    }
    let nc = channels(mode);
    let mask = match mode {
        MetricMode::Merged => vec![true; w * h],
        MetricMode::Layer => layer_mask(a, b),
    };
    let value = |img: &RgbaImage, i: usize, c: usize| if mask[i] { img.pixels()[i][c] as f64 } else { 0.0 };
    let (ww, wh) = (w.min(SSIM_WINDOW as usize), h.min(SSIM_WINDOW as usize));
    let n = (ww * wh) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - wh {
        for x0 in 0..=w - ww {
            let touches = (y0..y0 + wh).any(|y| (x0..x0 + ww).any(|x| mask[y * w + x]));
            if !touches {
                continue;
            }
            for c in 0..nc {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + wh {
                    for x in x0..x0 + ww {
                        let i = y * w + x;
                        let (p, q) = (value(a, i, c), value(b, i, c));
                        sa += p;
                        sb += q;
                        saa += p * p;
                        sbb += q * q;
                        sab += p * q;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = saa / n - ma * ma;
                let vb = sbb / n - mb * mb;
                let cov = sab / n - ma * mb;
                total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                count += 1;
            }
        }
    }
    Ok(if count == 0 { 1.0 } else { total / count as f64 })
}

/// Metrics of one predicted design against its ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignMetrics {
    pub k: usize,
    pub psnr_merged: f64,
    pub ssim_merged: f64,
    pub psnr_layer: f64,
    pub ssim_layer: f64,
}

fn capped(p: f64) -> f64 {
    p.min(PSNR_CAP)
}

/// Merged metrics on the visible composite; layer metrics averaged over the
/// background and every foreground, each placed on the full canvas.
pub fn design_metrics(truth: &LayeredDesign, pred: &LayeredDesign) -> Result<DesignMetrics> {
    if truth.layers.len() != pred.layers.len() || truth.canvas_w != pred.canvas_w || truth.canvas_h != pred.canvas_h {
        return Err(Error::Dimension("predicted design does not match the ground-truth layout".into()));
    }
    let gt = visible_crop(&compose(truth), truth.bg_rect)?;
    let pr = visible_crop(&compose(pred), truth.bg_rect)?;
    let (mut pl, mut sl) = (0.0, 0.0);
    for (t, p) in truth.layers.iter().zip(&pred.layers) {
        let ti = place(t, truth.canvas_w, truth.canvas_h);
        let pi = place(p, truth.canvas_w, truth.canvas_h);
        pl += capped(psnr(&ti, &pi, MetricMode::Layer)?);
        sl += ssim(&ti, &pi, MetricMode::Layer)?;
    }
    let n = truth.layers.len() as f64;
    Ok(DesignMetrics {
        k: truth.k(),
        psnr_merged: capped(psnr(&gt, &pr, MetricMode::Merged)?),
        ssim_merged: ssim(&gt, &pr, MetricMode::Merged)?,
        psnr_layer: pl / n,
        ssim_layer: sl / n,
    })
}

/// Layer-count bins `[lo, hi)`.
pub const BINS: [(usize, usize); 3] = [(4, 8), (8, 16), (16, 32)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinReport {
    pub lo: usize,
    pub hi: usize,
    pub count: usize,
    pub psnr_merged: f64,
    pub ssim_merged: f64,
    pub psnr_layer: f64,
    pub ssim_layer: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub count: usize,
    pub psnr_merged: f64,
    pub ssim_merged: f64,
    pub psnr_layer: f64,
    pub ssim_layer: f64,
    /// Nonempty bins only.
    pub bins: Vec<BinReport>,
    pub designs: Vec<DesignMetrics>,
}

fn mean_of(ms: &[&DesignMetrics]) -> [f64; 4] {
    let n = ms.len().max(1) as f64;
    let mut out = [0.0; 4];
    for m in ms {
        out[0] += m.psnr_merged / n;
        out[1] += m.ssim_merged / n;
        out[2] += m.psnr_layer / n;
        out[3] += m.ssim_layer / n;
    }
    out
}

pub fn report(designs: Vec<DesignMetrics>) -> MetricReport {
    let all: Vec<&DesignMetrics> = designs.iter().collect();
    let [pm, sm, pl, sl] = mean_of(&all);
    let bins = BINS
        .iter()
        .filter_map(|&(lo, hi)| {
            let members: Vec<&DesignMetrics> = designs.iter().filter(|m| (lo..hi).contains(&m.k)).collect();
            if members.is_empty() {
                return None;
            }
            let [psnr_merged, ssim_merged, psnr_layer, ssim_layer] = mean_of(&members);
            Some(BinReport { lo, hi, count: members.len(), psnr_merged, ssim_merged, psnr_layer, ssim_layer })
        })
        .collect();
    MetricReport { count: designs.len(), psnr_merged: pm, ssim_merged: sm, psnr_layer: pl, ssim_layer: sl, bins, designs }
}

/// Compare predictions with ground truth, pairwise.
pub fn evaluate_pairs(truth: &[LayeredDesign], pred: &[LayeredDesign]) -> Result<MetricReport> {
    if truth.len() != pred.len() {
        return Err(Error::Dimension(format!("{} ground-truth designs, {} predictions", truth.len(), pred.len())));
    }
    let ms = crate::exec::try_map(truth.len(), |i| design_metrics(&truth[i], &pred[i]))?;
    Ok(report(ms))
}

/// Decompose each design's visible composite with `model` and score the
/// result against the design itself. Design `i` samples with seed
/// `sample_seed(cfg.seed, i)`.
pub fn evaluate_i2l(model: &Mrt<f32>, designs: &[LayeredDesign], cfg: &SampleConfig, s: u32) -> Result<MetricReport> {
    let ms = crate::exec::try_map(designs.len(), |i| {
        let cfg = SampleConfig { seed: sample_seed(cfg.seed, i as u64), ..cfg.clone() };
        let out = run_task(model, &i2l_input(&designs[i])?, &cfg, s)?;
        design_metrics(&designs[i], &out.design)
    })?;
    Ok(report(ms))
}

impl MetricReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin,count,psnr_merged,ssim_merged,psnr_layer,ssim_layer\n");
        let _ = writeln!(
            s,
            "all,{},{:.4},{:.6},{:.4},{:.6}",
            self.count, self.psnr_merged, self.ssim_merged, self.psnr_layer, self.ssim_layer
        );
        for b in &self.bins {
            let _ = writeln!(
                s,
                "[{};{}),{},{:.4},{:.6},{:.4},{:.6}",
                b.lo, b.hi, b.count, b.psnr_merged, b.ssim_merged, b.psnr_layer, b.ssim_layer
            );
        }
        s
    }
}

/// Cost of one layout under regional packing and under one full-canvas
/// token block per layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub layers: usize,
    pub tokens_regional: u64,
    pub tokens_fullres: u64,
    /// `4 N^2 d` per block, summed over blocks.
    pub attn_flops_regional: f64,
    pub attn_flops_fullres: f64,
    /// Attention plus `24 N d^2` projection and MLP terms.
    pub flops_regional: f64,
    pub flops_fullres: f64,
    pub memory_regional: f64,
    pub memory_fullres: f64,
    pub token_ratio: f64,
    pub attn_flop_ratio: f64,
    pub flop_ratio: f64,
    pub memory_ratio: f64,
}

/// Per-block attention and dense FLOPs for `n` tokens.
pub fn block_flops(n: u64, d: usize) -> (f64, f64) {
    let (n, d) = (n as f64, d as f64);
    (4.0 * n * n * d, 24.0 * n * d * d)
}

/// Activation bytes kept for the backward pass (fp32): per block, ten
/// `d`-wide and two hidden-wide rows per token plus one `N x N` map per head.
pub fn activation_bytes(n: u64, model: &ModelConfig) -> f64 {
    let n = n as f64;
    let per_token = (10 * model.dim + 2 * model.hidden()) as f64;
    4.0 * model.depth as f64 * (n * per_token + model.heads as f64 * n * n)
}

/// Analytic cost of `layout` at patch `s`; `conditions` extra condition
/// regions are charged at their target layers' token counts.
pub fn cost_model(layout: &Layout, s: u32, model: &ModelConfig, conditions: &[usize]) -> Result<CostReport> {
    layout.validate()?;
    let canvas = crate::canvas::Rect { x: 0, y: 0, w: layout.canvas_w, h: layout.canvas_h };
    let canvas_tokens = token_count(canvas, s) as u64;
    let bg = token_count(layout.bg_rect(), s) as u64;
    let fg: Vec<u64> = layout.entries[1..].iter().map(|e| token_count(snap_rect(e.rect, s), s) as u64).collect();
    let mut cond = 0;
    for &i in conditions {
        cond += *fg
            .get(i.wrapping_sub(1))
            .ok_or_else(|| Error::InvalidTask(format!("condition target {i} outside 1..={}", fg.len())))?;
    }
    let k = layout.k();
    let regional = canvas_tokens + bg + fg.iter().sum::<u64>() + cond;
    let fullres = (k as u64 + 2 + conditions.len() as u64) * canvas_tokens;
    let depth = model.depth.max(1) as f64;
    let (qr, lr) = block_flops(regional, model.dim);
    let (qf, lf) = block_flops(fullres, model.dim);
    let mem_r = activation_bytes(regional, model);
    let mem_f = activation_bytes(fullres, model);
    Ok(CostReport {
        layers: k,
        tokens_regional: regional,
        tokens_fullres: fullres,
        attn_flops_regional: depth * qr,
        attn_flops_fullres: depth * qf,
        flops_regional: depth * (qr + lr),
        flops_fullres: depth * (qf + lf),
        memory_regional: mem_r,
        memory_fullres: mem_f,
        token_ratio: fullres as f64 / regional as f64,
        attn_flop_ratio: qf / qr,
        flop_ratio: (qf + lf) / (qr + lr),
        memory_ratio: mem_f / mem_r,
    })
}

/// Mean cost over several layouts, reported per layer count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostSummary {
    pub layers: usize,
    pub samples: usize,
    pub tokens_regional: f64,
    pub tokens_fullres: f64,
    pub token_ratio: f64,
    pub attn_flop_ratio: f64,
    pub flop_ratio: f64,
    pub memory_ratio: f64,
}

/// Ratios are computed from the mean token counts, so they describe the
/// average layout rather than averaging per-layout ratios.
pub fn summarize(layers: usize, reports: &[CostReport], model: &ModelConfig) -> CostSummary {
    let n = reports.len().max(1) as f64;
    let tr = reports.iter().map(|r| r.tokens_regional as f64).sum::<f64>() / n;
    let tf = reports.iter().map(|r| r.tokens_fullres as f64).sum::<f64>() / n;
    let d = model.dim as f64;
    let quad = |t: f64| 4.0 * t * t * d;
    let lin = |t: f64| 24.0 * t * d * d;
    let mem = |t: f64| {
        let per_token = (10 * model.dim + 2 * model.hidden()) as f64;
        t * per_token + model.heads as f64 * t * t
    };
    CostSummary {
        layers,
        samples: reports.len(),
        tokens_regional: tr,
        tokens_fullres: tf,
        token_ratio: tf / tr,
        attn_flop_ratio: quad(tf) / quad(tr),
        flop_ratio: (quad(tf) + lin(tf)) / (quad(tr) + lin(tr)),
        memory_ratio: mem(tf) / mem(tr),
    }
}

pub fn cost_csv(rows: &[CostSummary]) -> String {
    let mut s = String::from(
        "layers,samples,tokens_regional,tokens_fullres,token_ratio,attn_flop_ratio,flop_ratio,memory_ratio\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.2},{:.2},{:.4},{:.4},{:.4},{:.4}",
            r.layers, r.samples, r.tokens_regional, r.tokens_fullres, r.token_ratio, r.attn_flop_ratio, r.flop_ratio, r.memory_ratio
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canvas::{LayerKind, Rect};
    use crate::synth::LayoutEntry;

    #[test]
    fn psnr_of_known_mse() {
        let a = RgbaImage::filled(4, 4, [0.5, 0.5, 0.5, 0.5]);
        let b = RgbaImage::filled(4, 4, [0.6, 0.6, 0.6, 0.6]);
        assert!((psnr(&a, &b, MetricMode::Merged).unwrap() - 20.0).abs() < 1e-5);
        assert_eq!(psnr(&a, &a, MetricMode::Merged).unwrap(), f64::INFINITY);
        assert!((ssim(&a, &a, MetricMode::Merged).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cost_of_twenty_strips() {
        // 64x64-token canvas with 20 layers of 41x5 = 205 tokens each.
        let s = 8;
        let side = 64 * s;
        let mut entries = vec![LayoutEntry {
            rect: Rect { x: 0, y: 0, w: side, h: side },
            z: 0,
            kind: LayerKind::Background,
            caption: String::new(),
        }];
        for i in 0..20 {
            entries.push(LayoutEntry {
                rect: Rect { x: 0, y: 0, w: 41 * s, h: 5 * s },
                z: i + 1,
                kind: LayerKind::Foreground,
                caption: String::new(),
            });
        }
        let layout = Layout { canvas_w: side, canvas_h: side, entries };
        let r = cost_model(&layout, s, &ModelConfig::default(), &[]).unwrap();
        assert_eq!(r.tokens_regional, 4096 + 4096 + 20 * 205);
        assert_eq!(r.tokens_fullres, 22 * 4096);
        assert!((r.token_ratio - 7.33).abs() < 0.01);
        assert!((r.attn_flop_ratio - 53.7).abs() < 0.1);
    }
}
