//! Acceptance suite. Each test writes one `criterion N ...: PASS|FAIL` line
//! straight to stderr (uncaptured) and then asserts.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use mrt::canvas::{clip, compose, group_layers, over, visible_crop, LayeredDesign, Pixel, RgbaImage};
use mrt::codec::{decode, encode, LatentGrid};
use mrt::distill::{
    distill_1d, dmd_student_gradient, energy_distance, sample_1d, student_rollout, train_toy_teacher, Dmd, DistillConfig, MixtureField, Problem,
};
use mrt::eval::{cost_model, evaluate_i2l, summarize, MetricReport};
use mrt::model::{seq_tokens, ModelConfig, Mrt, Params, SeqContext};
use mrt::pack::{encode_condition, encode_design, mask_plan, pack, RegionKind, Role, TaskSpec, TaskVariant};
use mrt::sampler::{euler, euler_sample, SampleConfig};
use mrt::synth::{derive_layout, gen_design, restyle, GenParams};
use mrt::train::{Checkpoint, masked_flow_loss, masked_flow_loss_grad, TaskMix, TrainConfig, Trainer};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(n: u32, name: &str, pass: bool, detail: impl AsRef<str>) {
    let line = format!("criterion {n:>2} {name}: {} ({})\n", if pass { "PASS" } else { "FAIL" }, detail.as_ref());
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn rand_px(rng: &mut impl Rng) -> Pixel {
    let a: f32 = rng.random();
    [a * rng.random::<f32>(), a * rng.random::<f32>(), a * rng.random::<f32>(), a]
}

fn rand_image(w: u32, h: u32, rng: &mut impl Rng) -> RgbaImage {
    RgbaImage::from_pixels(w, h, (0..w * h).map(|_| rand_px(rng)).collect()).unwrap()
}

fn max_diff(a: &RgbaImage, b: &RgbaImage) -> f32 {
    assert!(a.same_size(b));
    a.pixels().iter().zip(b.pixels()).flat_map(|(p, q)| (0..4).map(move |c| (p[c] - q[c]).abs())).fold(0.0, f32::max)
}

fn small_gen(lo: u32, hi: u32) -> GenParams {
    GenParams { canvas_min: 16, canvas_max: 32, ..GenParams::default() }.with_layers(lo, hi)
}

#[test]
fn criterion_01_compositing_algebra() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cases = 1000;
    let mut worst = 0.0f32;
    for _ in 0..cases {
        let (w, h) = (rng.random_range(1..6), rng.random_range(1..6));
        let (a, b, c) = (rand_image(w, h, &mut rng), rand_image(w, h, &mut rng), rand_image(w, h, &mut rng));
        let clear = RgbaImage::transparent(w, h);
        let left = over(&over(&a, &b).unwrap(), &c).unwrap();
        let right = over(&a, &over(&b, &c).unwrap()).unwrap();
        worst = worst.max(max_diff(&left, &right));
        worst = worst.max(max_diff(&over(&a, &clear).unwrap(), &a));
        worst = worst.max(max_diff(&over(&clear, &a).unwrap(), &a));
        worst = worst.max(over(&a, &b).unwrap().premultiplied_violation());
    }
    for i in 0..cases {
        let d = gen_design(i as u64, &small_gen(2, 8)).unwrap();
        let lo = rng.random_range(1..d.layers.len());
        let hi = rng.random_range(lo..d.layers.len());
        let grouped = group_layers(&d, &(lo..=hi).collect()).unwrap();
        worst = worst.max(max_diff(&compose(&grouped), &compose(&d)));
        let clipped = clip(&d, d.bg_rect).unwrap();
        worst = worst.max(max_diff(&compose(&clipped), &visible_crop(&compose(&d), d.bg_rect).unwrap()));
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst <= 1e-6 && secs < 10.0;
    verdict(1, "compositing algebra", pass, format!("{} cases, max deviation {worst:.2e} <= 1e-6, {secs:.2}s < 10s", 2 * cases));
    assert!(pass);
}

#[test]
fn criterion_02_codec_exactness() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cases = 1000;
    let mut ok = true;
    for _ in 0..cases {
        let s = [1u32, 2, 4, 8][rng.random_range(0..4)];
        let (w, h) = (s * rng.random_range(1..5), s * rng.random_range(1..5));
        let x = rand_image(w, h, &mut rng);
        let y = rand_image(w, h, &mut rng);
        let zx = encode(&x, s).unwrap();
        ok &= decode(&zx) == x;
        let raw: Vec<f32> = (0..zx.data().len()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let z = LatentGrid::from_data(s, zx.h(), zx.w(), raw).unwrap();
        ok &= encode(&decode(&z), s).unwrap() == z;
        let (a, b): (f32, f32) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let mix: Vec<Pixel> = x.pixels().iter().zip(y.pixels()).map(|(p, q)| std::array::from_fn(|c| a * p[c] + b * q[c])).collect();
        let lhs = encode(&RgbaImage::from_pixels(w, h, mix).unwrap(), s).unwrap();
        let zy = encode(&y, s).unwrap();
        let rhs: Vec<f32> = zx.data().iter().zip(zy.data()).map(|(p, q)| a * p + b * q).collect();
        ok &= lhs.data() == rhs.as_slice();
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = ok && secs < 5.0;
    verdict(2, "codec exactness", pass, format!("{cases} images, bit-exact round trips and linearity: {ok}, {secs:.2}s < 5s"));
    assert!(pass);
}

/// Masked (clean) set straight from the task definitions.
fn oracle_clean(variant: &TaskVariant, k: usize) -> BTreeSet<RegionKind> {
    let mut out = BTreeSet::new();
    let targets: BTreeSet<usize> = match variant {
        TaskVariant::T2l => return out,
        TaskVariant::I2l => {
            out.insert(RegionKind::Composed);
            return out;
        }
        TaskVariant::L2lAdd(a) => a.clone(),
        TaskVariant::L2lRestyle(c) => c.keys().copied().collect(),
    };
    out.insert(RegionKind::Composed);
    out.insert(RegionKind::Background);
    out.extend((1..=k).filter(|i| !targets.contains(i)).map(RegionKind::Foreground));
    out
}

fn all_regions(k: usize) -> BTreeSet<RegionKind> {
    [RegionKind::Composed, RegionKind::Background].into_iter().chain((1..=k).map(RegionKind::Foreground)).collect()
}

#[test]
fn criterion_03_mask_plan_conformance() {
    let start = Instant::now();
    let mut checked = 0usize;
    let mut ok = true;
    for k in 1..=8usize {
        let design = gen_design(300 + k as u64, &small_gen(k as u32, k as u32)).unwrap();
        assert_eq!(design.k(), k);
        let mut variants = vec![TaskVariant::T2l, TaskVariant::I2l];
        for bits in 1u32..(1 << k) {
            let set: BTreeSet<usize> = (1..=k).filter(|i| bits & (1 << (i - 1)) != 0).collect();
            variants.push(TaskVariant::L2lAdd(set.clone()));
            let mut rng = ChaCha8Rng::seed_from_u64(bits as u64);
            let conds = set
                .iter()
                .map(|&i| {
                    let l = &design.layers[i];
                    (i, encode_condition(&restyle(&l.image, &mut rng), l.rect, 4).unwrap())
                })
                .collect();
            variants.push(TaskVariant::L2lRestyle(conds));
        }
        for variant in variants {
            let task = TaskSpec { variant: variant.clone(), caption: String::new() };
            let plan = mask_plan(&task, k).unwrap();
            let clean = oracle_clean(&variant, k);
            let noised: BTreeSet<RegionKind> = all_regions(k).difference(&clean).copied().collect();
            ok &= plan.clean() == clean && plan.noised() == noised;

            let seq = pack(&encode_design(&design, &task, 4).unwrap(), &task).unwrap();
            for span in &seq.regions {
                let expect = match span.kind {
                    RegionKind::Condition(_) => Role::Condition,
                    kind if clean.contains(&kind) => Role::Clean,
                    _ => Role::Noised,
                };
                ok &= span.role == expect;
                ok &= seq.meta[span.start..span.start + span.len].iter().all(|m| m.role == expect);
            }
            if let TaskVariant::L2lRestyle(conds) = &variant {
                for &i in conds.keys() {
                    let positions = |kind: RegionKind| {
                        let span = seq.region(kind).unwrap();
                        let mut v: Vec<((i32, i32), u16)> = seq.meta[span.start..span.start + span.len].iter().map(|m| (m.pos, m.embed_id)).collect();
                        v.sort();
                        v
                    };
                    ok &= positions(RegionKind::Condition(i)) == positions(RegionKind::Foreground(i));
                }
                let conditions = seq.regions.iter().filter(|r| matches!(r.kind, RegionKind::Condition(_))).count();
                ok &= conditions == conds.len();
            } else {
                ok &= seq.regions.iter().all(|r| !matches!(r.kind, RegionKind::Condition(_)));
            }
            checked += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = ok && secs < 5.0;
    verdict(3, "mask-plan conformance", pass, format!("{checked} task variants over K=1..8, tables and position copies match: {ok}, {secs:.2}s < 5s"));
    assert!(pass);
}

fn tiny_config() -> ModelConfig {
    ModelConfig { depth: 2, dim: 16, heads: 2, mlp_ratio: 2, latent_channels: 16, vocab: 64, max_caption_tokens: 8, max_regions: 40, time_freq_dim: 8, rope_base: 100.0 }
}

#[test]
fn criterion_04_gradient_fidelity() {
    let start = Instant::now();
    let cfg = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let design = gen_design(4, &small_gen(3, 3)).unwrap();
    let task = TaskSpec { variant: TaskVariant::L2lRestyle(BTreeMap::from([(2, encode_condition(&design.layers[2].image, design.layers[2].rect, 2).unwrap())])), caption: "a red ring".into() };
    let seq = pack(&encode_design(&design, &task, 2).unwrap(), &task).unwrap();
    let model = Mrt::with_params(cfg.clone(), Params::<f64>::random(&cfg, 9, 0.3)).unwrap();
    let ctx = SeqContext::from_seq(&seq, &cfg);
    let roles = seq.roles();
    let x: Array2<f64> = seq_tokens(&seq);
    let target = Array2::from_shape_fn(x.raw_dim(), |_| rng.random_range(-1.0..1.0));
    let t = 0.43;
    let loss_of = |m: &Mrt<f64>| masked_flow_loss(m.forward(&ctx, x.view(), t).unwrap().view(), target.view(), &roles).unwrap();
    let (v, cache) = model.forward_cached(&ctx, x.view(), t).unwrap();
    let (_, dv) = masked_flow_loss_grad(v.view(), target.view(), &roles).unwrap();
    let mut grads = model.params.zeros_like();
    model.backward(&cache, dv.view(), &mut grads);
    let flat: Vec<f64> = grads.named().iter().flat_map(|t| t.data.iter().copied()).collect();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..64 {
        let idx = rng.random_range(0..flat.len());
        let bump = |delta: f64| {
            let mut m = model.clone();
            let mut off = idx;
            for s in m.params.slices_mut() {
                if off < s.len() {
                    s[off] += delta;
                    break;
                }
                off -= s.len();
            }
            loss_of(&m)
        };
        let fd = (bump(h) - bump(-h)) / (2.0 * h);
        worst = worst.max((flat[idx] - fd).abs() / flat[idx].abs().max(fd.abs()).max(1e-7));
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst <= 1e-3 && secs < 60.0;
    verdict(4, "gradient fidelity", pass, format!("64 parameters at fp64, max relative error {worst:.2e} <= 1e-3, {secs:.2}s < 60s"));
    assert!(pass);
}

#[test]
fn criterion_05_masked_loss_isolation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ok = true;
    let trials = 1000;
    for _ in 0..trials {
        let (n, c) = (rng.random_range(2..12), rng.random_range(1..9));
        let mut roles: Vec<Role> = (0..n).map(|_| [Role::Noised, Role::Clean, Role::Condition][rng.random_range(0..3)]).collect();
        roles[0] = Role::Noised;
        let pred = Array2::from_shape_fn((n, c), |_| rng.random_range(-3.0f32..3.0));
        let target = Array2::from_shape_fn((n, c), |_| rng.random_range(-3.0f32..3.0));
        let base = masked_flow_loss(pred.view(), target.view(), &roles).unwrap();
        let mut bumped = pred.clone();
        for (mut row, r) in bumped.rows_mut().into_iter().zip(&roles) {
            if *r != Role::Noised {
                row.mapv_inplace(|v| v + rng.random_range(-100.0f32..100.0));
            }
        }
        let after = masked_flow_loss(bumped.view(), target.view(), &roles).unwrap();
        ok &= base.to_bits() == after.to_bits();
        let (_, g) = masked_flow_loss_grad(bumped.view(), target.view(), &roles).unwrap();
        ok &= g.rows().into_iter().zip(&roles).all(|(row, r)| *r == Role::Noised || row.iter().all(|&v| v == 0.0));
    }
    verdict(5, "masked-loss isolation", ok, format!("{trials} perturbations of clean/condition rows, loss change exactly 0: {ok}"));
    assert!(ok);
}

fn random_targets(k: usize, rng: &mut impl Rng) -> BTreeSet<usize> {
    let mut set: BTreeSet<usize> = (1..=k).filter(|_| rng.random_bool(0.5)).collect();
    if set.is_empty() {
        set.insert(rng.random_range(1..=k));
    }
    set
}

fn random_task(design: &LayeredDesign, kind: usize, rng: &mut impl Rng, s: u32) -> TaskSpec {
    let k = design.k();
    let variant = match kind {
        0 => TaskVariant::T2l,
        1 => TaskVariant::I2l,
        2 => TaskVariant::L2lAdd(random_targets(k, rng)),
        _ => TaskVariant::L2lRestyle(
            random_targets(k, rng)
                .into_iter()
                .map(|i| {
                    let l = &design.layers[i];
                    (i, encode_condition(&restyle(&l.image, rng), l.rect, s).unwrap())
                })
                .collect(),
        ),
    };
    TaskSpec { variant, caption: "blue circle; texture".into() }
}

#[test]
fn criterion_06_pinning() {
    let cfg = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut ok = true;
    let trials = 100;
    for trial in 0..trials {
        let model = Mrt::with_params(cfg.clone(), Params::<f32>::random(&cfg, trial, 0.3)).unwrap();
        let design = gen_design(600 + trial, &small_gen(1, 6)).unwrap();
        for kind in 0..4 {
            let task = random_task(&design, kind, &mut rng, 2);
            let seq = pack(&encode_design(&design, &task, 2).unwrap(), &task).unwrap();
            let guidance = if trial % 2 == 0 { 1.0 } else { 2.5 };
            let out = euler_sample(&model, &seq, &SampleConfig { steps: 4, guidance, seed: trial }).unwrap();
            let noised: Vec<bool> = seq.meta.iter().map(|m| m.role == Role::Noised).collect();
            let clean = seq_tokens::<f32>(&seq);
            for (i, &n) in noised.iter().enumerate() {
                if !n {
                    ok &= out.token(i).iter().zip(seq.token(i)).all(|(a, b)| a.to_bits() == b.to_bits());
                }
            }
            let problem = Problem { ctx: SeqContext::from_seq(&seq, &cfg), clean: clean.clone(), noised: noised.clone() };
            let roll = student_rollout(&model, &problem, 3, trial).unwrap();
            for (i, &n) in noised.iter().enumerate() {
                if !n {
                    ok &= roll.sample.row(i).iter().zip(clean.row(i)).all(|(a, b)| a.to_bits() == b.to_bits());
                }
            }
        }
    }
    verdict(6, "pinning", ok, format!("{trials} random models x 4 tasks, sampler and student rollout leave clean rows bit-identical: {ok}"));
    assert!(ok);
}

// Overfit setup shared by criteria 7 and 9.
const OVERFIT_DIM: usize = 256;
const OVERFIT_DEPTH: usize = 2;
const OVERFIT_STEPS: u64 = 5000;
const OVERFIT_LR: f64 = 1e-3;

fn overfit_designs() -> Vec<LayeredDesign> {
    let mut designs = Vec::new();
    for (b, (lo, hi, n)) in [(4u32, 7u32, 6u64), (8, 15, 5), (16, 31, 5)].into_iter().enumerate() {
        for j in 0..n {
            let p = GenParams { canvas_min: 32, canvas_max: 48, ..GenParams::default() }.with_layers(lo, hi);
            designs.push(gen_design(b as u64 * 100 + j, &p).unwrap());
        }
    }
    designs
}

struct Overfit {
    designs: Vec<LayeredDesign>,
    model: Mrt<f32>,
    ckpt: Checkpoint,
    report: MetricReport,
    train_secs: f64,
}

fn overfit() -> &'static Overfit {
    static CELL: OnceLock<Overfit> = OnceLock::new();
    CELL.get_or_init(|| {
        let designs = overfit_designs();
        let model_cfg = ModelConfig { dim: OVERFIT_DIM, depth: OVERFIT_DEPTH, ..ModelConfig::default() };
        let cfg = TrainConfig {
            lr: OVERFIT_LR,
            steps: OVERFIT_STEPS,
            task_mix: TaskMix { t2l: 0.0, i2l: 1.0, l2l: 0.0 },
            grouping_prob: 0.0,
            null_caption_prob: 0.0,
            ..TrainConfig::default()
        };
        let start = Instant::now();
        let mut trainer = Trainer::new(model_cfg, cfg).unwrap();
        trainer.run(&designs).unwrap();
        let train_secs = start.elapsed().as_secs_f64();
        let report = evaluate_i2l(&trainer.model, &designs, &SampleConfig::default(), 8).unwrap();
        Overfit { designs, ckpt: trainer.checkpoint(), model: trainer.model, report, train_secs }
    })
}

#[test]
fn criterion_07_overfit_reconstruction() {
    let o = overfit();
    let r = &o.report;
    let params = mrt::model::param_count(&o.model.config);
    let merged: Vec<f64> = r.bins.iter().map(|b| b.psnr_merged).collect();
    let ordered = r.bins.len() == 3 && merged.windows(2).all(|w| w[0] > w[1]);
    let size_ok = (2_000_000..=5_000_000).contains(&params);
    let pass = r.psnr_merged >= 30.0 && r.psnr_layer >= 25.0 && ordered && size_ok && o.train_secs <= 1800.0;
    let bins = r.bins.iter().map(|b| format!("[{},{}) {:.2}", b.lo, b.hi, b.psnr_merged)).collect::<Vec<_>>().join(", ");
    verdict(
        7,
        "overfit reconstruction",
        pass,
        format!(
            "{params} params, {OVERFIT_STEPS} steps in {:.0}s; merged {:.2} dB >= 30, layer {:.2} dB >= 25, bins {bins} decreasing: {ordered}",
            o.train_secs, r.psnr_merged, r.psnr_layer
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_08_oracle_one_step_recovery() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f32;
    for _ in 0..100 {
        let z0 = Array2::from_shape_fn((rng.random_range(1..20), 16), |_| rng.random_range(-3.0f32..3.0));
        let noised: Vec<bool> = vec![true; z0.nrows()];
        let x = Array2::from_shape_fn(z0.raw_dim(), |_| rng.random_range(-3.0f32..3.0));
        let out = euler(x.clone(), &noised, 1, |x, t| Ok((&z0 - &x).mapv(|v| v / t as f32))).unwrap();
        // x + (z0 - x) rounds twice: bounded by eps * (|x| + |z0|).
        for ((a, b), x0) in out.iter().zip(&z0).zip(&x) {
            worst = worst.max((a - b).abs() / (x0.abs() + b.abs()));
        }
    }
    let pass = worst <= f32::EPSILON;
    verdict(8, "oracle one-step recovery", pass, format!("max error {worst:.2e} x (|x|+|z0|) <= f32 epsilon {:.2e}", f32::EPSILON));
    assert!(pass);
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn criterion_09a_dmd_toy_1d() {
    let start = Instant::now();
    let data = MixtureField::two_mode(1.5, 0.3);
    let teacher = train_toy_teacher(&data, 64, 3000, 256, 3e-3, 9).unwrap();

    let zero_gap = {
        let p = Problem { ctx: (), clean: Array2::zeros((64, 1)), noised: vec![true; 64] };
        let sample = Array2::from_shape_fn((64, 1), |(i, _)| i as f32 / 16.0 - 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dmd = Dmd::new(&teacher, &DistillConfig::default());
        let g = dmd_student_gradient(&teacher, &dmd.critic, &p, sample.view(), &mut rng).unwrap();
        g.iter().all(|&v| v == 0.0)
    };

    let cfg = DistillConfig { student_steps: 4, critic_ratio: 5, lr_student: 1e-4, lr_critic: 1e-3, iterations: 3000, batch_size: 1, seed: 9 };
    let (student, _) = distill_1d(&teacher, &cfg, 256).unwrap();
    let n = 1000;
    let reference = sample_1d(&teacher, n, 50, 100).unwrap();
    let baseline = mean(&(0..4).map(|i| energy_distance(&reference, &sample_1d(&teacher, n, 50, 200 + i).unwrap())).collect::<Vec<_>>());
    let distance = mean(&(0..4).map(|i| energy_distance(&reference, &sample_1d(&student, n, 4, 300 + i).unwrap())).collect::<Vec<_>>());
    let undistilled = energy_distance(&reference, &sample_1d(&teacher, n, 4, 300).unwrap());
    let secs = start.elapsed().as_secs_f64();
    let pass = zero_gap && distance <= 2.0 * baseline && secs <= 1200.0;
    verdict(
        9,
        "DMD toy 1-D",
        pass,
        format!(
            "zero-gap gradient exact: {zero_gap}; energy distance {distance:.5} <= 2 x baseline {baseline:.5} (teacher at 4 steps: {undistilled:.5}), {secs:.0}s"
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_09b_dmd_layered() {
    let o = overfit();
    let start = Instant::now();
    let cfg = DistillConfig { student_steps: 8, critic_ratio: 5, lr_student: 1e-5, lr_critic: 1e-4, iterations: 100, batch_size: 1, seed: 3 };
    let (student, _) = mrt::distill::distill(&o.ckpt, &o.designs, &cfg).unwrap();
    let student = student.model().unwrap();
    let r = evaluate_i2l(&student, &o.designs, &SampleConfig { steps: 8, ..SampleConfig::default() }, 8).unwrap();
    let gap = o.report.psnr_merged - r.psnr_merged;
    let secs = start.elapsed().as_secs_f64();
    let pass = gap <= 3.0 && secs <= 1200.0;
    verdict(
        9,
        "DMD layered",
        pass,
        format!("student 8 steps {:.2} dB vs teacher 50 steps {:.2} dB, gap {gap:.2} <= 3 dB, {secs:.0}s", r.psnr_merged, o.report.psnr_merged),
    );
    assert!(pass);
}

#[test]
fn criterion_10_efficiency_model() {
    let start = Instant::now();
    let model = ModelConfig::default();
    let params = GenParams::default().with_layers(20, 20);
    let reports: Vec<_> = (0..64u64)
        .map(|i| cost_model(&derive_layout(&gen_design(1000 + i, &params).unwrap()), 8, &model, &[]).unwrap())
        .collect();
    let s = summarize(20, &reports, &model);
    let secs = start.elapsed().as_secs_f64();
    let pass = s.attn_flop_ratio >= 10.0 && s.token_ratio >= 5.0 && secs < 5.0;
    verdict(
        10,
        "efficiency model",
        pass,
        format!("K=20 over 64 layouts: quadratic FLOP ratio {:.1} >= 10, token ratio {:.2} >= 5, {secs:.2}s < 5s", s.attn_flop_ratio, s.token_ratio),
    );
    assert!(pass);
}

const TOY_CONFIG: &str = r#"
[model]
depth = 1
dim = 16
heads = 2
mlp_ratio = 2
latent_channels = 16
vocab = 64
max_caption_tokens = 8
max_regions = 40
time_freq_dim = 8

[train]
patch = 2
steps = 3
batch_size = 2

[sample]
steps = 3

[distill]
student_steps = 2
critic_ratio = 1
iterations = 2

[data]
count = 3

[data.gen]
canvas_min = 16
canvas_max = 24
layers_min = 2
layers_max = 4
align = 2
"#;

fn run_cli(root: &Path, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_mrt")).current_dir(root).env("MRT_THREADS", "1").args(args).output().unwrap();
    assert!(out.status.success(), "mrt {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn pipeline(root: &Path) {
    std::fs::write(root.join("toy.toml"), TOY_CONFIG).unwrap();
    let c = ["--config", "toy.toml"];
    let cmd = |rest: &[&str]| run_cli(root, &[&c[..], rest].concat());
    cmd(&["gen-data", "--out", "data", "--seed", "5"]);
    cmd(&["train", "--out", "run", "--data", "data"]);
    let d = mrt::bundle::load_design(&root.join("data/design_00000")).unwrap();
    mrt::bundle::write_json(&root.join("layout.json"), &derive_layout(&d)).unwrap();
    mrt::bundle::write_png(&visible_crop(&compose(&d), d.bg_rect).unwrap(), &root.join("visible.png")).unwrap();
    cmd(&["sample", "--out", "t2l", "--ckpt", "run/model.ckpt", "--layout", "layout.json", "--caption", "red circle"]);
    cmd(&["decompose", "--out", "i2l", "--ckpt", "run/model.ckpt", "--image", "visible.png", "--layout", "layout.json", "--truth", "data/design_00000"]);
    cmd(&["edit", "--out", "add", "--ckpt", "run/model.ckpt", "--design", "data/design_00000", "--task", "l2l-add", "--targets", "1"]);
    cmd(&["edit", "--out", "restyle", "--ckpt", "run/model.ckpt", "--design", "data/design_00000", "--task", "l2l-restyle", "--targets", "1,2"]);
    cmd(&["distill", "--out", "student", "--ckpt", "run/model.ckpt", "--data", "data"]);
    cmd(&["eval", "--out", "eval_pairs", "--truth", "data", "--pred", "data"]);
    cmd(&["eval", "--out", "eval_ckpt", "--truth", "data", "--ckpt", "student/student.ckpt"]);
    cmd(&["bench-efficiency", "--layers", "1..6", "--samples", "4", "--seed", "2", "--out", "bench/cost.csv"]);
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn criterion_11_cli_determinism() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path());
    pipeline(b.path());
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    let differing: Vec<&String> = ta.keys().filter(|k| ta.get(*k) != tb.get(*k)).collect();
    let pass = ta.len() == tb.len() && differing.is_empty() && ta.len() > 20;
    verdict(11, "CLI determinism", pass, format!("10 commands run twice, {} files byte-identical, differing {differing:?}", ta.len()));
    assert!(pass);
}
