//! Distribution-matching distillation of a many-step flow into a few-step
//! student.
//!
//! The student is an Euler rollout of its own velocity field. Each
//! iteration fits a critic to the student's samples by flow matching, then
//! pushes the samples along `v_teacher - v_critic` evaluated at a randomly
//! re-noised point, backpropagating that direction through the whole
//! rollout. Student and critic start from the teacher's weights.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::canvas::LayeredDesign;
use crate::error::{Error, Result};
use crate::exec;
use crate::model::{Mrt, SeqContext};
use crate::pack::{pack, Role};
use crate::sampler::{euler, initial_noise, prepare, timestep, FlowField};
use crate::train::{masked_flow_loss_grad, AdamW, Checkpoint, ParamTensors};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub student_steps: usize,
    /// Critic updates per student update.
    pub critic_ratio: usize,
    pub lr_student: f64,
    pub lr_critic: f64,
    pub iterations: u64,
    /// Designs per iteration for the layered model.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig { student_steps: 8, critic_ratio: 5, lr_student: 1e-4, lr_critic: 1e-4, iterations: 100, batch_size: 1, seed: 0 }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.student_steps == 0 || self.critic_ratio == 0 || self.batch_size == 0 {
            return Err(Error::Config("distill: student_steps, critic_ratio and batch_size must be >= 1".into()));
        }
        if !(self.lr_student > 0.0 && self.lr_critic > 0.0) {
            return Err(Error::Config("distill: learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// One generation problem: context, clean token values and which rows are
/// generated.
pub struct Problem<C> {
    pub ctx: C,
    pub clean: Array2<f32>,
    pub noised: Vec<bool>,
}

/// Student samples from noise drawn with `seed`.
pub fn student_generate<F: FlowField>(student: &F, p: &Problem<F::Ctx>, steps: usize, seed: u64) -> Result<Array2<f32>> {
    let x0 = initial_noise(&p.clean, &p.noised, seed);
    euler(x0, &p.noised, steps, |x, t| student.predict(&p.ctx, x, t))
}

/// A rollout that keeps every step's activations for the backward pass.
pub struct Rollout<C> {
    pub sample: Array2<f32>,
    caches: Vec<C>,
}

pub fn student_rollout<F: FlowField>(student: &F, p: &Problem<F::Ctx>, steps: usize, seed: u64) -> Result<Rollout<F::Cache>> {
    let mut x = initial_noise(&p.clean, &p.noised, seed);
    let dt = 1.0 / steps as f32;
    let mut caches = Vec::with_capacity(steps);
    for k in 0..steps {
        let (v, cache) = student.predict_cached(&p.ctx, x.view(), timestep(k, steps))?;
        for ((mut row, vrow), &n) in x.rows_mut().into_iter().zip(v.rows()).zip(&p.noised) {
            if n {
                row.scaled_add(dt, &vrow);
            }
        }
        caches.push(cache);
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("student rollout diverged".into()));
    }
    Ok(Rollout { sample: x, caches })
}

fn mask_rows(m: &mut Array2<f32>, noised: &[bool]) {
    for (mut row, &n) in m.rows_mut().into_iter().zip(noised) {
        if !n {
            row.fill(0.0);
        }
    }
}

/// Backpropagate `g = dL/d sample` through the rollout into `grads`.
pub fn rollout_backward<F: FlowField>(student: &F, rollout: &Rollout<F::Cache>, noised: &[bool], g: &Array2<f32>, grads: &mut F::Grads) {
    let dt = 1.0 / rollout.caches.len() as f32;
    let mut g = g.clone();
    for cache in rollout.caches.iter().rev() {
        let mut dv = &g * dt;
        mask_rows(&mut dv, noised);
        let dx = student.backward(cache, dv.view(), grads);
        g += &dx;
    }
}

/// `v_critic - v_teacher` at the sample re-noised to a random `t`; zero on
/// rows that are not generated.
pub fn dmd_student_gradient<F: FlowField>(
    teacher: &F,
    critic: &F,
    p: &Problem<F::Ctx>,
    sample: ArrayView2<f32>,
    rng: &mut impl Rng,
) -> Result<Array2<f32>> {
    if sample.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("student sample is not finite".into()));
    }
    let t: f64 = rng.random();
    let xt = renoise(sample, &p.noised, t as f32, rng);
    let vc = critic.predict(&p.ctx, xt.view(), t)?;
    let vt = teacher.predict(&p.ctx, xt.view(), t)?;
    let mut g = vc - vt;
    mask_rows(&mut g, &p.noised);
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("distribution-matching gradient is not finite".into()));
    }
    Ok(g)
}

fn renoise(sample: ArrayView2<f32>, noised: &[bool], t: f32, rng: &mut impl Rng) -> Array2<f32> {
    let mut xt = sample.to_owned();
    for (mut row, &n) in xt.rows_mut().into_iter().zip(noised) {
        if n {
            row.iter_mut().for_each(|v| {
                let e: f32 = rng.sample(StandardNormal);
                *v = (1.0 - t) * *v + t * e;
            });
        }
    }
    xt
}

/// Flow-matching loss and gradient of `field` treating `sample` as data.
pub fn flow_matching_gradient<F: FlowField>(field: &F, p: &Problem<F::Ctx>, sample: ArrayView2<f32>, rng: &mut impl Rng) -> Result<(f32, F::Grads)> {
    let t: f32 = rng.random();
    let mut xt = sample.to_owned();
    let mut target = Array2::zeros(sample.raw_dim());
    for ((mut row, mut trow), &n) in xt.rows_mut().into_iter().zip(target.rows_mut()).zip(&p.noised) {
        if n {
            for (v, tv) in row.iter_mut().zip(trow.iter_mut()) {
                let e: f32 = rng.sample(StandardNormal);
                *tv = *v - e;
                *v = (1.0 - t) * *v + t * e;
            }
        }
    }
    let roles: Vec<Role> = p.noised.iter().map(|&n| if n { Role::Noised } else { Role::Clean }).collect();
    let (pred, cache) = field.predict_cached(&p.ctx, xt.view(), t as f64)?;
    let (loss, dpred) = masked_flow_loss_grad(pred.view(), target.view(), &roles)?;
    let mut grads = field.zero_grads();
    field.backward(&cache, dpred.view(), &mut grads);
    Ok((loss, grads))
}

/// Trainable state of a distillation run.
pub struct Dmd<F> {
    pub student: F,
    pub critic: F,
    pub student_opt: AdamW,
    pub critic_opt: AdamW,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DmdRecord {
    pub iteration: u64,
    pub critic_loss: f32,
    /// Mean squared `v_critic - v_teacher` over generated entries.
    pub gap: f32,
}

impl<F> Dmd<F>
where
    F: FlowField + ParamTensors + Clone,
    F::Grads: ParamTensors,
{
    pub fn new(teacher: &F, cfg: &DistillConfig) -> Self {
        let sizes = teacher.sizes();
        Dmd {
            student: teacher.clone(),
            critic: teacher.clone(),
            student_opt: AdamW::new(&sizes, cfg.lr_student, 0.9, 0.999, 1e-8, 0.0),
            critic_opt: AdamW::new(&sizes, cfg.lr_critic, 0.9, 0.999, 1e-8, 0.0),
        }
    }

    /// Critic updates on fresh student samples, then one student update.
    pub fn iteration(&mut self, teacher: &F, problems: &[Problem<F::Ctx>], cfg: &DistillConfig, rng: &mut impl RngCore, index: u64) -> Result<DmdRecord> {
        let n = problems.len();
        let seeds: Vec<u64> = (0..n).map(|_| rng.next_u64()).collect();
        let student = &self.student;
        let rollouts = exec::try_map(n, |i| student_rollout(student, &problems[i], cfg.student_steps, seeds[i]))?;

        let mut critic_loss = 0.0;
        for _ in 0..cfg.critic_ratio {
            let seeds: Vec<u64> = (0..n).map(|_| rng.next_u64()).collect();
            let critic = &self.critic;
            let parts = exec::try_map(n, |i| {
                let mut r = ChaCha8Rng::seed_from_u64(seeds[i]);
                flow_matching_gradient(critic, &problems[i], rollouts[i].sample.view(), &mut r)
            })?;
            let mut total = self.critic.zero_grads();
            critic_loss = 0.0;
            for (loss, g) in &parts {
                total.accumulate(g);
                critic_loss += loss / n as f32;
            }
            total.scale_all(1.0 / n as f32);
            if !critic_loss.is_finite() || !total.all_finite() {
                return Err(Error::NonFinite(format!("critic loss {critic_loss} at iteration {index}")));
            }
            self.critic_opt.step(&mut self.critic, &total);
        }

        let seeds: Vec<u64> = (0..n).map(|_| rng.next_u64()).collect();
        let (critic, student) = (&self.critic, &self.student);
        let parts = exec::try_map(n, |i| {
            let mut r = ChaCha8Rng::seed_from_u64(seeds[i]);
            let p = &problems[i];
            let g = dmd_student_gradient(teacher, critic, p, rollouts[i].sample.view(), &mut r)?;
            let gap = g.iter().map(|v| v * v).sum::<f32>() / (p.noised.iter().filter(|&&b| b).count() * g.ncols()).max(1) as f32;
            let mut grads = student.zero_grads();
            rollout_backward(student, &rollouts[i], &p.noised, &g, &mut grads);
            Ok::<_, Error>((gap, grads))
        })?;
        let mut total = self.student.zero_grads();
        let mut gap = 0.0;
        for (gp, g) in &parts {
            total.accumulate(g);
            gap += gp / n as f32;
        }
        total.scale_all(1.0 / n as f32);
        if !total.all_finite() {
            return Err(Error::NonFinite(format!("student gradient at iteration {index}")));
        }
        self.student_opt.step(&mut self.student, &total);
        Ok(DmdRecord { iteration: index, critic_loss, gap })
    }
}

/// I2L generation problems for a set of designs.
pub fn i2l_problems(model: &Mrt<f32>, designs: &[LayeredDesign], s: u32) -> Result<Vec<Problem<SeqContext>>> {
    designs
        .iter()
        .map(|d| {
            let (task, latents) = prepare(&crate::sampler::i2l_input(d)?, s)?;
            let seq = pack(&latents, &task)?;
            Ok(Problem {
                ctx: SeqContext::from_seq(&seq, &model.config),
                clean: crate::model::seq_tokens(&seq),
                noised: seq.meta.iter().map(|m| m.role == Role::Noised).collect(),
            })
        })
        .collect()
}

/// Distill a layered teacher on I2L problems from `dataset`.
pub fn distill(teacher: &Checkpoint, dataset: &[LayeredDesign], cfg: &DistillConfig) -> Result<(Checkpoint, Vec<DmdRecord>)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("distillation dataset is empty".into()));
    }
    let model = teacher.model()?;
    let s = teacher.header.train.patch;
    let problems = i2l_problems(&model, dataset, s)?;
    let mut dmd = Dmd::new(&model, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xd15_7111);
    let mut log = Vec::new();
    for it in 1..=cfg.iterations {
        let picks: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..problems.len())).collect();
        let batch: Vec<Problem<SeqContext>> = picks
            .iter()
            .map(|&i| Problem { ctx: problems[i].ctx.clone(), clean: problems[i].clean.clone(), noised: problems[i].noised.clone() })
            .collect();
        let rec = dmd.iteration(&model, &batch, cfg, &mut rng, it)?;
        log::info!("distill {it}: critic {:.5} gap {:.5}", rec.critic_loss, rec.gap);
        log.push(rec);
    }
    let mut header = teacher.header.clone();
    header.distilled = true;
    header.step = cfg.iterations;
    Ok((Checkpoint { header, params: dmd.student.params, optimizer: dmd.student_opt, rng }, log))
}

pub fn dmd_log_csv(log: &[DmdRecord]) -> String {
    let mut s = String::from("iteration,critic_loss,gap\n");
    for r in log {
        s.push_str(&format!("{},{},{}\n", r.iteration, r.critic_loss, r.gap));
    }
    s
}

/// V-statistic energy distance `2E|X-Y| - E|X-X'| - E|Y-Y'|`.
pub fn energy_distance(a: &[f64], b: &[f64]) -> f64 {
    fn mean_abs(x: &[f64], y: &[f64]) -> f64 {
        let mut s = 0.0;
        for &p in x {
            for &q in y {
                s += (p - q).abs();
            }
        }
        s / (x.len() * y.len()) as f64
    }
    2.0 * mean_abs(a, b) - mean_abs(a, a) - mean_abs(b, b)
}

/// Closed-form velocity of a 1-D Gaussian `N(mu, sigma^2)` pushed along the
/// straight path to standard noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianField {
    pub mu: f64,
    pub sigma: f64,
}

impl GaussianField {
    pub fn velocity(&self, x: f64, t: f64) -> f64 {
        let (m, s2) = (self.mu, self.sigma * self.sigma);
        let var = (1.0 - t) * (1.0 - t) * s2 + t * t;
        let r = x - (1.0 - t) * m;
        let x0 = m + (1.0 - t) * s2 / var * r;
        let eps = t / var * r;
        x0 - eps
    }
}

/// Closed-form velocity of an equal-weight mixture of 1-D Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureField {
    pub components: Vec<GaussianField>,
}

impl MixtureField {
    pub fn two_mode(sep: f64, sigma: f64) -> Self {
        MixtureField { components: vec![GaussianField { mu: -sep, sigma }, GaussianField { mu: sep, sigma }] }
    }

    pub fn velocity(&self, x: f64, t: f64) -> f64 {
        let mut logw = Vec::with_capacity(self.components.len());
        for c in &self.components {
            let var = (1.0 - t) * (1.0 - t) * c.sigma * c.sigma + t * t;
            let r = x - (1.0 - t) * c.mu;
            logw.push(-0.5 * r * r / var - 0.5 * var.ln());
        }
        let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = w.iter().sum();
        self.components.iter().zip(&w).map(|(c, wi)| wi / z * c.velocity(x, t)).sum()
    }

    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let c = &self.components[rng.random_range(0..self.components.len())];
                let e: f64 = rng.sample(StandardNormal);
                c.mu + c.sigma * e
            })
            .collect()
    }
}

/// Analytic fields have no parameters; their "gradients" are empty.
#[derive(Debug, Clone, Default)]
pub struct NoGrads;

impl ParamTensors for NoGrads {
    fn tensors(&self) -> Vec<&[f32]> {
        Vec::new()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        Vec::new()
    }
}

macro_rules! analytic_field {
    ($ty:ty) => {
        impl FlowField for $ty {
            type Ctx = ();
            type Cache = ();
            type Grads = NoGrads;

            fn predict(&self, _: &(), x: ArrayView2<f32>, t: f64) -> Result<Array2<f32>> {
                Ok(x.mapv(|v| self.velocity(v as f64, t) as f32))
            }

            fn predict_cached(&self, ctx: &(), x: ArrayView2<f32>, t: f64) -> Result<(Array2<f32>, ())> {
                Ok((self.predict(ctx, x, t)?, ()))
            }

            fn backward(&self, _: &(), dout: ArrayView2<f32>, _: &mut NoGrads) -> Array2<f32> {
                Array2::zeros(dout.raw_dim())
            }

            fn zero_grads(&self) -> NoGrads {
                NoGrads
            }
        }
    };
}

analytic_field!(GaussianField);
analytic_field!(MixtureField);

/// Time features of the toy MLP.
const TOY_FEATURES: usize = 6;

fn toy_features(x: ArrayView2<f32>, t: f64) -> Array2<f32> {
    let pi = std::f64::consts::PI;
    let tf = [t, (pi * t).cos(), (pi * t).sin(), (2.0 * pi * t).cos(), (2.0 * pi * t).sin()].map(|v| v as f32);
    let mut f = Array2::zeros((x.nrows(), TOY_FEATURES));
    for (mut row, &xv) in f.rows_mut().into_iter().zip(x.column(0)) {
        row[0] = xv;
        row.slice_mut(s![1..]).assign(&ndarray::aview1(&tf));
    }
    f
}

/// Small MLP velocity field for 1-D samples (one row per sample).
#[derive(Debug, Clone, PartialEq)]
pub struct ToyMlp {
    pub w1: Array2<f32>,
    pub b1: Array1<f32>,
    pub w2: Array2<f32>,
    pub b2: Array1<f32>,
    pub w3: Array2<f32>,
    pub b3: Array1<f32>,
}

pub struct ToyCache {
    f: Array2<f32>,
    h1: Array2<f32>,
    a1: Array2<f32>,
    h2: Array2<f32>,
    a2: Array2<f32>,
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f32) -> f32 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

impl ToyMlp {
    pub fn new(hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xavier = |r: usize, c: usize| {
            let b = (6.0 / (r + c) as f32).sqrt();
            let u = Uniform::new_inclusive(-b, b).unwrap();
            Array2::from_shape_fn((r, c), |_| u.sample(&mut rng))
        };
        ToyMlp {
            w1: xavier(TOY_FEATURES, hidden),
            b1: Array1::zeros(hidden),
            w2: xavier(hidden, hidden),
            b2: Array1::zeros(hidden),
            w3: xavier(hidden, 1),
            b3: Array1::zeros(1),
        }
    }

    fn zeros_like(&self) -> Self {
        ToyMlp {
            w1: Array2::zeros(self.w1.raw_dim()),
            b1: Array1::zeros(self.b1.raw_dim()),
            w2: Array2::zeros(self.w2.raw_dim()),
            b2: Array1::zeros(self.b2.raw_dim()),
            w3: Array2::zeros(self.w3.raw_dim()),
            b3: Array1::zeros(self.b3.raw_dim()),
        }
    }
}

impl ParamTensors for ToyMlp {
    fn tensors(&self) -> Vec<&[f32]> {
        vec![
            self.w1.as_slice().unwrap(),
            self.b1.as_slice().unwrap(),
            self.w2.as_slice().unwrap(),
            self.b2.as_slice().unwrap(),
            self.w3.as_slice().unwrap(),
            self.b3.as_slice().unwrap(),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        vec![
            self.w1.as_slice_mut().unwrap(),
            self.b1.as_slice_mut().unwrap(),
            self.w2.as_slice_mut().unwrap(),
            self.b2.as_slice_mut().unwrap(),
            self.w3.as_slice_mut().unwrap(),
            self.b3.as_slice_mut().unwrap(),
        ]
    }
}

impl FlowField for ToyMlp {
    type Ctx = ();
    type Cache = ToyCache;
    type Grads = ToyMlp;

    fn predict(&self, ctx: &(), x: ArrayView2<f32>, t: f64) -> Result<Array2<f32>> {
        Ok(self.predict_cached(ctx, x, t)?.0)
    }

    fn predict_cached(&self, _: &(), x: ArrayView2<f32>, t: f64) -> Result<(Array2<f32>, ToyCache)> {
        if x.ncols() != 1 {
            return Err(Error::Dimension(format!("toy field takes one column, got {}", x.ncols())));
        }
        let f = toy_features(x, t);
        let h1 = f.dot(&self.w1) + &self.b1;
        let a1 = h1.mapv(silu);
        let h2 = a1.dot(&self.w2) + &self.b2;
        let a2 = h2.mapv(silu);
        let out = a2.dot(&self.w3) + &self.b3;
        Ok((out, ToyCache { f, h1, a1, h2, a2 }))
    }

    fn backward(&self, c: &ToyCache, dout: ArrayView2<f32>, g: &mut ToyMlp) -> Array2<f32> {
        g.w3 += &c.a2.t().dot(&dout);
        g.b3 += &dout.sum_axis(Axis(0));
        let mut dh2 = dout.dot(&self.w3.t());
        Zip::from(&mut dh2).and(&c.h2).for_each(|d, &h| *d *= silu_grad(h));
        g.w2 += &c.a1.t().dot(&dh2);
        g.b2 += &dh2.sum_axis(Axis(0));
        let mut dh1 = dh2.dot(&self.w2.t());
        Zip::from(&mut dh1).and(&c.h1).for_each(|d, &h| *d *= silu_grad(h));
        g.w1 += &c.f.t().dot(&dh1);
        g.b1 += &dh1.sum_axis(Axis(0));
        let df = dh1.dot(&self.w1.t());
        df.slice(s![.., 0..1]).to_owned()
    }

    fn zero_grads(&self) -> ToyMlp {
        self.zeros_like()
    }
}

/// Train a toy MLP by flow matching on samples from `data`.
pub fn train_toy_teacher(data: &MixtureField, hidden: usize, steps: usize, batch: usize, lr: f64, seed: u64) -> Result<ToyMlp> {
    let mut model = ToyMlp::new(hidden, seed);
    let mut opt = AdamW::new(&model.sizes(), lr, 0.9, 0.999, 1e-8, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e4c_4e5);
    let p = Problem { ctx: (), clean: Array2::zeros((batch, 1)), noised: vec![true; batch] };
    for _ in 0..steps {
        let x0 = Array2::from_shape_vec((batch, 1), data.sample(batch, &mut rng).into_iter().map(|v| v as f32).collect())
            .map_err(|e| Error::Dimension(e.to_string()))?;
        let (loss, g) = flow_matching_gradient(&model, &p, x0.view(), &mut rng)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("toy teacher loss diverged".into()));
        }
        opt.step(&mut model, &g);
    }
    Ok(model)
}

/// `n` one-dimensional samples from an Euler rollout of `field`.
pub fn sample_1d<F: FlowField<Ctx = ()>>(field: &F, n: usize, steps: usize, seed: u64) -> Result<Vec<f64>> {
    let p = Problem { ctx: (), clean: Array2::zeros((n, 1)), noised: vec![true; n] };
    Ok(student_generate(field, &p, steps, seed)?.iter().map(|&v| v as f64).collect())
}

/// Distill a 1-D field into a `steps`-step student; the batch of samples per
/// iteration is one problem.
pub fn distill_1d(teacher: &ToyMlp, cfg: &DistillConfig, batch: usize) -> Result<(ToyMlp, Vec<DmdRecord>)> {
    cfg.validate()?;
    let mut dmd = Dmd::new(teacher, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let problems = [Problem { ctx: (), clean: Array2::zeros((batch, 1)), noised: vec![true; batch] }];
    let mut log = Vec::new();
    for it in 1..=cfg.iterations {
        log.push(dmd.iteration(teacher, &problems, cfg, &mut rng, it)?);
    }
    Ok((dmd.student, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_field_matches_mixture_of_one() {
        let g = GaussianField { mu: 0.7, sigma: 0.4 };
        let m = MixtureField { components: vec![g] };
        for &(x, t) in &[(0.3, 0.2), (-1.0, 0.9), (2.0, 0.5)] {
            assert!((g.velocity(x, t) - m.velocity(x, t)).abs() < 1e-12);
        }
    }

    #[test]
    fn energy_distance_of_identical_sets_is_zero() {
        let a = [0.1, 0.5, -2.0];
        assert!(energy_distance(&a, &a).abs() < 1e-12);
        assert!(energy_distance(&a, &[3.0, 4.0]) > 0.0);
    }
}
