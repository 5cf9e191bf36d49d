use ndarray::{Array, Array1, Array2, Dimension};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use super::Float;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Latent channels per token, `4 * patch^2`.
    pub latent_channels: usize,
    /// Caption hash buckets.
    pub vocab: usize,
    pub max_caption_tokens: usize,
    /// Rows of the region-embedding table (composite, background, foregrounds).
    pub max_regions: usize,
    pub time_freq_dim: usize,
    pub rope_base: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            depth: 4,
            dim: 128,
            heads: 4,
            mlp_ratio: 4,
            latent_channels: 256,
            vocab: 4096,
            max_caption_tokens: 48,
            max_regions: 40,
            time_freq_dim: 64,
            rope_base: 100.0,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads.max(1)
    }

    pub fn hidden(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("model: {m}")));
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return bad("dim must be a positive multiple of heads");
        }
        if self.head_dim() % 4 != 0 {
            return bad("head dim must be a multiple of 4 (row and column rotary pairs)");
        }
        if self.latent_channels == 0 || self.vocab == 0 || self.max_regions < 2 || self.mlp_ratio == 0 {
            return bad("latent_channels, vocab, mlp_ratio must be positive and max_regions >= 2");
        }
        if self.time_freq_dim == 0 || self.time_freq_dim % 2 != 0 {
            return bad("time_freq_dim must be positive and even");
        }
        if !(self.rope_base > 1.0) {
            return bad("rope_base must exceed 1");
        }
        Ok(())
    }
}

/// Closed-form parameter count.
pub fn param_count(c: &ModelConfig) -> usize {
    let (d, ch, h, f) = (c.dim, c.latent_channels, c.hidden(), c.time_freq_dim);
    let embed = ch * d + d + c.max_regions * d + 2 * d + d + c.vocab * d;
    let time = f * d + d + d * d + d;
    let block = d * 6 * d + 6 * d + d * 3 * d + 3 * d + d * d + d + d * h + h + h * d + d;
    let head = d * 2 * d + 2 * d + d * ch + ch;
    embed + time + c.depth * block + head
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    /// Timestep modulation: shift/scale/gate for attention and MLP, `d x 6d`.
    pub mod_w: Array2<T>,
    pub mod_b: Array1<T>,
    pub qkv_w: Array2<T>,
    pub qkv_b: Array1<T>,
    pub o_w: Array2<T>,
    pub o_b: Array1<T>,
    pub fc1_w: Array2<T>,
    pub fc1_b: Array1<T>,
    pub fc2_w: Array2<T>,
    pub fc2_b: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub in_w: Array2<T>,
    pub in_b: Array1<T>,
    pub region_emb: Array2<T>,
    /// Row 0 for noised tokens, row 1 for clean ones.
    pub role_emb: Array2<T>,
    /// Added to appended restyle-condition tokens only.
    pub cond_emb: Array1<T>,
    pub caption_emb: Array2<T>,
    pub t_w1: Array2<T>,
    pub t_b1: Array1<T>,
    pub t_w2: Array2<T>,
    pub t_b2: Array1<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub final_mod_w: Array2<T>,
    pub final_mod_b: Array1<T>,
    pub out_w: Array2<T>,
    pub out_b: Array1<T>,
}

/// A named parameter tensor.
pub struct NamedTensor<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

impl<T: Float> Params<T> {
    pub fn zeros(c: &ModelConfig) -> Self {
        let (d, ch, h, f) = (c.dim, c.latent_channels, c.hidden(), c.time_freq_dim);
        let z2 = |r, k| Array2::zeros((r, k));
        let z1 = |n| Array1::zeros(n);
        Params {
            in_w: z2(ch, d),
            in_b: z1(d),
            region_emb: z2(c.max_regions, d),
            role_emb: z2(2, d),
            cond_emb: z1(d),
            caption_emb: z2(c.vocab, d),
            t_w1: z2(f, d),
            t_b1: z1(d),
            t_w2: z2(d, d),
            t_b2: z1(d),
            blocks: (0..c.depth)
                .map(|_| BlockParams {
                    mod_w: z2(d, 6 * d),
                    mod_b: z1(6 * d),
                    qkv_w: z2(d, 3 * d),
                    qkv_b: z1(3 * d),
                    o_w: z2(d, d),
                    o_b: z1(d),
                    fc1_w: z2(d, h),
                    fc1_b: z1(h),
                    fc2_w: z2(h, d),
                    fc2_b: z1(d),
                })
                .collect(),
            final_mod_w: z2(d, 2 * d),
            final_mod_b: z1(2 * d),
            out_w: z2(d, ch),
            out_b: z1(ch),
        }
    }

    /// Training initialization: Xavier-uniform projections, small normal
    /// embeddings, and zeroed modulation and output head so every block
    /// starts as the identity and the initial velocity is zero.
    pub fn init(c: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(c);
        let xavier = |w: &mut Array2<T>, rng: &mut ChaCha8Rng| {
            let (fi, fo) = w.dim();
            let bound = (6.0 / (fi + fo) as f64).sqrt();
            let u = Uniform::new_inclusive(-bound, bound).unwrap();
            w.mapv_inplace(|_| T::from_f64(u.sample(rng)).unwrap());
        };
        let normal = |w: &mut [T], std: f64, rng: &mut ChaCha8Rng| {
            for v in w {
                let x: f64 = StandardNormal.sample(rng);
                *v = T::from_f64(x * std).unwrap();
            }
        };
        xavier(&mut p.in_w, &mut rng);
        normal(p.region_emb.as_slice_mut().unwrap(), 0.02, &mut rng);
        normal(p.role_emb.as_slice_mut().unwrap(), 0.02, &mut rng);
        normal(p.cond_emb.as_slice_mut().unwrap(), 0.02, &mut rng);
        normal(p.caption_emb.as_slice_mut().unwrap(), 0.02, &mut rng);
        normal(p.t_w1.as_slice_mut().unwrap(), 0.02, &mut rng);
        normal(p.t_w2.as_slice_mut().unwrap(), 0.02, &mut rng);
        for b in &mut p.blocks {
            xavier(&mut b.qkv_w, &mut rng);
            xavier(&mut b.o_w, &mut rng);
            xavier(&mut b.fc1_w, &mut rng);
            xavier(&mut b.fc2_w, &mut rng);
        }
        p
    }

    /// Every parameter i.i.d. `N(0, std^2)`. Used to exercise the network
    /// away from the identity-at-init regime.
    pub fn random(c: &ModelConfig, seed: u64, std: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(c);
        for t in p.slices_mut() {
            for v in t.iter_mut() {
                let x: f64 = StandardNormal.sample(&mut rng);
                *v = T::from_f64(x * std).unwrap();
            }
        }
        p
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.slices_mut() {
            t.fill(T::zero());
        }
        z
    }

    /// Every tensor in a fixed order with a stable dotted name.
    pub fn named(&self) -> Vec<NamedTensor<'_, T>> {
        fn push<'a, T, D: Dimension>(v: &mut Vec<NamedTensor<'a, T>>, name: String, a: &'a Array<T, D>) {
            v.push(NamedTensor { name, shape: a.shape().to_vec(), data: a.as_slice().expect("standard layout") });
        }
        let mut v = Vec::new();
        push(&mut v, "in_w".into(), &self.in_w);
        push(&mut v, "in_b".into(), &self.in_b);
        push(&mut v, "region_emb".into(), &self.region_emb);
        push(&mut v, "role_emb".into(), &self.role_emb);
        push(&mut v, "cond_emb".into(), &self.cond_emb);
        push(&mut v, "caption_emb".into(), &self.caption_emb);
        push(&mut v, "t_w1".into(), &self.t_w1);
        push(&mut v, "t_b1".into(), &self.t_b1);
        push(&mut v, "t_w2".into(), &self.t_w2);
        push(&mut v, "t_b2".into(), &self.t_b2);
        for (i, b) in self.blocks.iter().enumerate() {
            push(&mut v, format!("blocks.{i}.mod_w"), &b.mod_w);
            push(&mut v, format!("blocks.{i}.mod_b"), &b.mod_b);
            push(&mut v, format!("blocks.{i}.qkv_w"), &b.qkv_w);
            push(&mut v, format!("blocks.{i}.qkv_b"), &b.qkv_b);
            push(&mut v, format!("blocks.{i}.o_w"), &b.o_w);
            push(&mut v, format!("blocks.{i}.o_b"), &b.o_b);
            push(&mut v, format!("blocks.{i}.fc1_w"), &b.fc1_w);
            push(&mut v, format!("blocks.{i}.fc1_b"), &b.fc1_b);
            push(&mut v, format!("blocks.{i}.fc2_w"), &b.fc2_w);
            push(&mut v, format!("blocks.{i}.fc2_b"), &b.fc2_b);
        }
        push(&mut v, "final_mod_w".into(), &self.final_mod_w);
        push(&mut v, "final_mod_b".into(), &self.final_mod_b);
        push(&mut v, "out_w".into(), &self.out_w);
        push(&mut v, "out_b".into(), &self.out_b);
        v
    }

    /// Mutable views in the same order as [`Params::named`].
    pub fn slices_mut(&mut self) -> Vec<&mut [T]> {
        let Params {
            in_w,
            in_b,
            region_emb,
            role_emb,
            cond_emb,
            caption_emb,
            t_w1,
            t_b1,
            t_w2,
            t_b2,
            blocks,
            final_mod_w,
            final_mod_b,
            out_w,
            out_b,
        } = self;
        let mut v: Vec<&mut [T]> = vec![
            in_w.as_slice_mut().unwrap(),
            in_b.as_slice_mut().unwrap(),
            region_emb.as_slice_mut().unwrap(),
            role_emb.as_slice_mut().unwrap(),
            cond_emb.as_slice_mut().unwrap(),
            caption_emb.as_slice_mut().unwrap(),
            t_w1.as_slice_mut().unwrap(),
            t_b1.as_slice_mut().unwrap(),
            t_w2.as_slice_mut().unwrap(),
            t_b2.as_slice_mut().unwrap(),
        ];
        for b in blocks.iter_mut() {
            v.push(b.mod_w.as_slice_mut().unwrap());
            v.push(b.mod_b.as_slice_mut().unwrap());
            v.push(b.qkv_w.as_slice_mut().unwrap());
            v.push(b.qkv_b.as_slice_mut().unwrap());
            v.push(b.o_w.as_slice_mut().unwrap());
            v.push(b.o_b.as_slice_mut().unwrap());
            v.push(b.fc1_w.as_slice_mut().unwrap());
            v.push(b.fc1_b.as_slice_mut().unwrap());
            v.push(b.fc2_w.as_slice_mut().unwrap());
            v.push(b.fc2_b.as_slice_mut().unwrap());
        }
        v.push(final_mod_w.as_slice_mut().unwrap());
        v.push(final_mod_b.as_slice_mut().unwrap());
        v.push(out_w.as_slice_mut().unwrap());
        v.push(out_b.as_slice_mut().unwrap());
        v
    }

    pub fn len(&self) -> usize {
        self.named().iter().map(|t| t.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &Params<T>) {
        for (a, b) in self.slices_mut().into_iter().zip(other.named()) {
            for (x, y) in a.iter_mut().zip(b.data) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, k: T) {
        for a in self.slices_mut() {
            for x in a.iter_mut() {
                *x *= k;
            }
        }
    }

    /// Convert to another precision.
    pub fn cast<U: Float>(&self, c: &ModelConfig) -> Params<U> {
        let mut out = Params::<U>::zeros(c);
        for (dst, src) in out.slices_mut().into_iter().zip(self.named()) {
            for (d, s) in dst.iter_mut().zip(src.data) {
                *d = U::from_f64(s.to_f64().unwrap()).unwrap();
            }
        }
        out
    }
}
