//! Toy diffusion transformer over packed region sequences.
//!
//! Caption tokens are prepended to the image tokens and the joint sequence
//! runs through `depth` pre-norm blocks with full bidirectional attention.
//! Queries and keys carry 2D rotary positions; caption tokens all sit at the
//! sequence's caption anchor. The timestep enters through a sinusoidal
//! embedding and an MLP whose output modulates every block (shift, scale and
//! gate for both sublayers) and the final norm. Only image tokens are read
//! out, as one velocity vector per token.
//!
//! The backward pass is written by hand and returns gradients for every
//! parameter and for the input tokens; the latter is what lets distillation
//! backpropagate through a sampling rollout.

mod caption;
mod params;
mod rope;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

pub use caption::{caption_ids, fnv1a};
pub use params::{param_count, BlockParams, ModelConfig, NamedTensor, Params};
pub use rope::RopeTable;

use crate::error::{Error, Result};
use crate::pack::{PackedSequence, Role, TokenMeta};

/// Scalar types the model runs in: `f32` for training, `f64` for checks.
pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
}

impl Float for f32 {}
impl Float for f64 {}

#[inline]
fn cst<T: Float>(x: f64) -> T {
    T::from_f64(x).unwrap()
}

const LN_EPS: f64 = 1e-6;

/// Everything about a sequence except its token values.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqContext {
    pub meta: Vec<TokenMeta>,
    pub caption_ids: Vec<usize>,
    pub caption_anchor: (i32, i32),
}

impl SeqContext {
    pub fn from_seq(seq: &PackedSequence, config: &ModelConfig) -> Self {
        SeqContext {
            meta: seq.meta.clone(),
            caption_ids: caption_ids(&seq.caption, config.vocab, config.max_caption_tokens),
            caption_anchor: seq.caption_anchor,
        }
    }

    /// Same sequence with the null (empty) caption.
    pub fn without_caption(&self) -> Self {
        SeqContext { caption_ids: Vec::new(), ..self.clone() }
    }

    pub fn n_tokens(&self) -> usize {
        self.meta.len()
    }

    fn positions(&self) -> Vec<(i32, i32)> {
        std::iter::repeat_n(self.caption_anchor, self.caption_ids.len())
            .chain(self.meta.iter().map(|m| m.pos))
            .collect()
    }
}

/// Token values of a packed sequence as an `N x C` matrix.
pub fn seq_tokens<T: Float>(seq: &PackedSequence) -> Array2<T> {
    Array2::from_shape_fn((seq.len(), seq.channels), |(i, j)| cst(seq.tokens[i * seq.channels + j] as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mrt<T> {
    pub config: ModelConfig,
    pub params: Params<T>,
}

struct LnCache<T> {
    norm: Array2<T>,
    rstd: Array1<T>,
}

struct BlockCache<T> {
    m: Array1<T>,
    ln1: LnCache<T>,
    a_mod: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    probs: Vec<Array2<T>>,
    att: Array2<T>,
    o: Array2<T>,
    ln2: LnCache<T>,
    b_mod: Array2<T>,
    u: Array2<T>,
    g: Array2<T>,
    f: Array2<T>,
}

/// Activations kept by [`Mrt::forward_cached`] for [`Mrt::backward`].
pub struct ForwardCache<T> {
    x: Array2<T>,
    embed_ids: Vec<usize>,
    roles: Vec<Role>,
    caption_ids: Vec<usize>,
    rope: RopeTable<T>,
    tf: Array1<T>,
    z1: Array1<T>,
    s1: Array1<T>,
    temb: Array1<T>,
    c: Array1<T>,
    blocks: Vec<BlockCache<T>>,
    mf: Array1<T>,
    lnf: LnCache<T>,
    y: Array2<T>,
}

impl<T> ForwardCache<T> {
    /// Per-block, per-head attention matrices over `caption + image` tokens.
    pub fn attention(&self) -> Vec<Vec<&Array2<T>>> {
        self.blocks.iter().map(|b| b.probs.iter().collect()).collect()
    }
}

fn layer_norm<T: Float>(x: &Array2<T>) -> LnCache<T> {
    let d = x.ncols();
    let mut norm = Array2::zeros(x.raw_dim());
    let mut rstd = Array1::zeros(x.nrows());
    for (i, row) in x.rows().into_iter().enumerate() {
        let mean = row.sum() / cst(d as f64);
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cst(d as f64);
        let r = T::one() / (var + cst(LN_EPS)).sqrt();
        rstd[i] = r;
        for (o, &v) in norm.row_mut(i).iter_mut().zip(row.iter()) {
            *o = (v - mean) * r;
        }
    }
    LnCache { norm, rstd }
}

/// Accumulate the input gradient of a row-wise layer norm into `dx`.
fn layer_norm_backward<T: Float>(cache: &LnCache<T>, dn: &Array2<T>, dx: &mut Array2<T>) {
    let d: T = cst(dn.ncols() as f64);
    for i in 0..dn.nrows() {
        let n = cache.norm.row(i);
        let g = dn.row(i);
        let mean_g = g.sum() / d;
        let mean_gn = g.iter().zip(n.iter()).map(|(&a, &b)| a * b).sum::<T>() / d;
        let r = cache.rstd[i];
        for ((o, &gi), &ni) in dx.row_mut(i).iter_mut().zip(g.iter()).zip(n.iter()) {
            *o += r * (gi - mean_g - ni * mean_gn);
        }
    }
}

/// `norm * (1 + scale) + shift` with row-broadcast `scale`, `shift`.
fn modulate<T: Float>(norm: &Array2<T>, shift: ArrayView1<T>, scale: ArrayView1<T>) -> Array2<T> {
    let mut out = norm.clone();
    Zip::from(out.rows_mut()).for_each(|mut row| {
        Zip::from(&mut row).and(&shift).and(&scale).for_each(|o, &sh, &sc| *o = *o * (T::one() + sc) + sh);
    });
    out
}

#[inline]
fn silu<T: Float>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

#[inline]
fn silu_grad<T: Float>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp());
    s * (T::one() + x * (T::one() - s))
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
fn gelu<T: Float>(x: T) -> T {
    let inner = cst::<T>(GELU_K) * (x + cst::<T>(0.044715) * x * x * x);
    cst::<T>(0.5) * x * (T::one() + inner.tanh())
}

#[inline]
fn gelu_grad<T: Float>(x: T) -> T {
    let k: T = cst(GELU_K);
    let c: T = cst(0.044715);
    let inner = k * (x + c * x * x * x);
    let th = inner.tanh();
    let half: T = cst(0.5);
    half * (T::one() + th) + half * x * (T::one() - th * th) * k * (T::one() + cst::<T>(3.0) * c * x * x)
}

fn softmax_rows<T: Float>(m: &mut Array2<T>) {
    for mut row in m.rows_mut() {
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

/// `dst += a^T b`
fn acc_at_b<T: Float>(dst: &mut Array2<T>, a: ArrayView2<T>, b: ArrayView2<T>) {
    general_mat_mul(T::one(), &a.t(), &b, T::one(), dst);
}

fn add_bias<T: Float>(m: &mut Array2<T>, b: &Array1<T>) {
    for mut row in m.rows_mut() {
        row += b;
    }
}

/// Sinusoidal timestep features: `[cos(1000 t f_k), sin(1000 t f_k)]`.
pub fn time_features<T: Float>(t: f64, dim: usize) -> Array1<T> {
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for k in 0..half {
        let f = (-(10000f64).ln() * k as f64 / half as f64).exp();
        let arg = 1000.0 * t * f;
        out[k] = cst(arg.cos());
        out[half + k] = cst(arg.sin());
    }
    out
}

impl<T: Float> Mrt<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config, seed);
        Ok(Mrt { config, params })
    }

    pub fn with_params(config: ModelConfig, params: Params<T>) -> Result<Self> {
        config.validate()?;
        let expect = Params::<T>::zeros(&config);
        let shapes_match = expect.named().iter().zip(params.named()).all(|(a, b)| a.shape == b.shape)
            && expect.named().len() == params.named().len();
        if !shapes_match {
            return Err(Error::Dimension("parameter shapes do not match the model config".into()));
        }
        Ok(Mrt { config, params })
    }

    /// Learned caption embedding rows for `text`.
    pub fn embed_caption(&self, text: &str) -> Array2<T> {
        let ids = caption_ids(text, self.config.vocab, self.config.max_caption_tokens);
        let mut out = Array2::zeros((ids.len(), self.config.dim));
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).assign(&self.params.caption_emb.row(id));
        }
        out
    }

    fn check_inputs(&self, ctx: &SeqContext, x: ArrayView2<T>, t: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::NonFinite(format!("timestep {t} outside [0, 1]")));
        }
        if x.nrows() != ctx.meta.len() || x.ncols() != self.config.latent_channels {
            return Err(Error::Dimension(format!(
                "tokens are {}x{}, expected {}x{}",
                x.nrows(),
                x.ncols(),
                ctx.meta.len(),
                self.config.latent_channels
            )));
        }
        if let Some(m) = ctx.meta.iter().find(|m| m.embed_id as usize >= self.config.max_regions) {
            return Err(Error::Dimension(format!(
                "region embedding id {} exceeds table size {}",
                m.embed_id, self.config.max_regions
            )));
        }
        if let Some(&id) = ctx.caption_ids.iter().find(|&&id| id >= self.config.vocab) {
            return Err(Error::Dimension(format!("caption id {id} outside vocabulary")));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("input tokens contain NaN or infinity".into()));
        }
        Ok(())
    }

    /// Velocity for every image token, `N x C`.
    pub fn forward(&self, ctx: &SeqContext, x: ArrayView2<T>, t: f64) -> Result<Array2<T>> {
        self.forward_cached(ctx, x, t).map(|(v, _)| v)
    }

    pub fn forward_seq(&self, seq: &PackedSequence, t: f64) -> Result<Array2<T>> {
        let ctx = SeqContext::from_seq(seq, &self.config);
        self.forward(&ctx, seq_tokens::<T>(seq).view(), t)
    }

    /// Attention weights `[block][head]`, each `(M + N) x (M + N)` with the
    /// `M` caption tokens first.
    pub fn attention_maps(&self, ctx: &SeqContext, x: ArrayView2<T>, t: f64) -> Result<Vec<Vec<Array2<T>>>> {
        let (_, cache) = self.forward_cached(ctx, x, t)?;
        Ok(cache.blocks.into_iter().map(|b| b.probs).collect())
    }

    pub fn forward_cached(&self, ctx: &SeqContext, x: ArrayView2<T>, t: f64) -> Result<(Array2<T>, ForwardCache<T>)> {
        self.check_inputs(ctx, x, t)?;
        let cfg = &self.config;
        let p = &self.params;
        let (d, heads, hd) = (cfg.dim, cfg.heads, cfg.head_dim());
        let m_cap = ctx.caption_ids.len();
        let n = ctx.meta.len();
        let seq_len = m_cap + n;

        // Timestep conditioning vector.
        let tf: Array1<T> = time_features(t, cfg.time_freq_dim);
        let z1 = tf.dot(&p.t_w1) + &p.t_b1;
        let s1 = z1.mapv(silu);
        let temb = s1.dot(&p.t_w2) + &p.t_b2;
        let c = temb.mapv(silu);

        // Token embeddings.
        let mut h = Array2::<T>::zeros((seq_len, d));
        for (i, &id) in ctx.caption_ids.iter().enumerate() {
            h.row_mut(i).assign(&p.caption_emb.row(id));
        }
        {
            let mut img = h.slice_mut(s![m_cap.., ..]);
            general_mat_mul(T::one(), &x, &p.in_w, T::zero(), &mut img);
            for (i, meta) in ctx.meta.iter().enumerate() {
                let mut row = img.row_mut(i);
                row += &p.in_b;
                row += &p.region_emb.row(meta.embed_id as usize);
                row += &p.role_emb.row((meta.role != Role::Noised) as usize);
                if meta.role == Role::Condition {
                    row += &p.cond_emb;
                }
            }
        }

        let rope = RopeTable::<T>::new(&ctx.positions(), hd, cfg.rope_base);
        let scale: T = cst(1.0 / (hd as f64).sqrt());
        let mut blocks = Vec::with_capacity(cfg.depth);
        for bp in &p.blocks {
            let m = c.dot(&bp.mod_w) + &bp.mod_b;
            let chunk = |j: usize| m.slice(s![j * d..(j + 1) * d]);
            let ln1 = layer_norm(&h);
            let a_mod = modulate(&ln1.norm, chunk(0), chunk(1));
            let mut qkv = a_mod.dot(&bp.qkv_w);
            add_bias(&mut qkv, &bp.qkv_b);
            let mut q = qkv.slice(s![.., 0..d]).to_owned();
            let mut k = qkv.slice(s![.., d..2 * d]).to_owned();
            let v = qkv.slice(s![.., 2 * d..3 * d]).to_owned();
            rope.apply(q.view_mut(), heads, false);
            rope.apply(k.view_mut(), heads, false);
            let mut att = Array2::<T>::zeros((seq_len, d));
            let mut probs = Vec::with_capacity(heads);
            for hh in 0..heads {
                let cols = s![.., hh * hd..(hh + 1) * hd];
                let mut sc = q.slice(cols).dot(&k.slice(cols).t());
                sc *= scale;
                softmax_rows(&mut sc);
                let mut dst = att.slice_mut(cols);
                general_mat_mul(T::one(), &sc, &v.slice(cols), T::zero(), &mut dst);
                probs.push(sc);
            }
            let mut o = att.dot(&bp.o_w);
            add_bias(&mut o, &bp.o_b);
            let gate1 = chunk(2);
            for (mut hr, orow) in h.rows_mut().into_iter().zip(o.rows()) {
                Zip::from(&mut hr).and(&orow).and(&gate1).for_each(|hv, &ov, &g| *hv += g * ov);
            }
            let ln2 = layer_norm(&h);
            let b_mod = modulate(&ln2.norm, chunk(3), chunk(4));
            let mut u = b_mod.dot(&bp.fc1_w);
            add_bias(&mut u, &bp.fc1_b);
            let g = u.mapv(gelu);
            let mut f = g.dot(&bp.fc2_w);
            add_bias(&mut f, &bp.fc2_b);
            let gate2 = chunk(5);
            for (mut hr, frow) in h.rows_mut().into_iter().zip(f.rows()) {
                Zip::from(&mut hr).and(&frow).and(&gate2).for_each(|hv, &fv, &g| *hv += g * fv);
            }
            blocks.push(BlockCache { m, ln1, a_mod, q, k, v, probs, att, o, ln2, b_mod, u, g, f });
        }

        let mf = c.dot(&p.final_mod_w) + &p.final_mod_b;
        let h_img = h.slice(s![m_cap.., ..]).to_owned();
        let lnf = layer_norm(&h_img);
        let y = modulate(&lnf.norm, mf.slice(s![0..d]), mf.slice(s![d..2 * d]));
        let mut out = y.dot(&p.out_w);
        add_bias(&mut out, &p.out_b);

        let cache = ForwardCache {
            x: x.to_owned(),
            embed_ids: ctx.meta.iter().map(|m| m.embed_id as usize).collect(),
            roles: ctx.meta.iter().map(|m| m.role).collect(),
            caption_ids: ctx.caption_ids.clone(),
            rope,
            tf,
            z1,
            s1,
            temb,
            c,
            blocks,
            mf,
            lnf,
            y,
        };
        Ok((out, cache))
    }

    /// Accumulate parameter gradients of `<dout, forward(x)>` into `grads`
    /// and return the gradient with respect to the input tokens.
    pub fn backward(&self, cache: &ForwardCache<T>, dout: ArrayView2<T>, grads: &mut Params<T>) -> Array2<T> {
        let cfg = &self.config;
        let p = &self.params;
        let (d, heads, hd) = (cfg.dim, cfg.heads, cfg.head_dim());
        let m_cap = cache.caption_ids.len();
        let n = cache.x.nrows();
        let seq_len = m_cap + n;
        let scale: T = cst(1.0 / (hd as f64).sqrt());

        // Output head.
        acc_at_b(&mut grads.out_w, cache.y.view(), dout);
        grads.out_b += &dout.sum_axis(Axis(0));
        let dy = dout.dot(&p.out_w.t());
        let sc = cache.mf.slice(s![d..2 * d]);
        let mut dmf = Array1::<T>::zeros(2 * d);
        dmf.slice_mut(s![0..d]).assign(&dy.sum_axis(Axis(0)));
        dmf.slice_mut(s![d..2 * d]).assign(&(&dy * &cache.lnf.norm).sum_axis(Axis(0)));
        let mut dn = dy;
        for mut row in dn.rows_mut() {
            Zip::from(&mut row).and(&sc).for_each(|v, &s| *v *= T::one() + s);
        }
        let mut dh_img = Array2::zeros((n, d));
        layer_norm_backward(&cache.lnf, &dn, &mut dh_img);
        let mut dh = Array2::<T>::zeros((seq_len, d));
        dh.slice_mut(s![m_cap.., ..]).assign(&dh_img);
        self.backward_blocks(cache, dh, dmf, grads, scale, heads, hd)
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_blocks(
        &self,
        cache: &ForwardCache<T>,
        mut dh: Array2<T>,
        dmf: Array1<T>,
        grads: &mut Params<T>,
        scale: T,
        heads: usize,
        hd: usize,
    ) -> Array2<T> {
        let cfg = &self.config;
        let p = &self.params;
        let d = cfg.dim;
        let m_cap = cache.caption_ids.len();

        // dc collects gradient from every modulation head.
        let mut dc = dmf.dot(&p.final_mod_w.t());
        {
            let gw = &mut grads.final_mod_w;
            for (i, &ci) in cache.c.iter().enumerate() {
                let mut row = gw.row_mut(i);
                row.scaled_add(ci, &dmf);
            }
            grads.final_mod_b += &dmf;
        }

        for (bi, bc) in cache.blocks.iter().enumerate().rev() {
            let bp = &p.blocks[bi];
            let gb = &mut grads.blocks[bi];
            let chunk = |j: usize| bc.m.slice(s![j * d..(j + 1) * d]);
            let mut dm = Array1::<T>::zeros(6 * d);

            // h2 = h1 + gate2 * f
            let gate2 = chunk(5);
            dm.slice_mut(s![5 * d..6 * d]).assign(&(&dh * &bc.f).sum_axis(Axis(0)));
            let mut df = dh.clone();
            for mut row in df.rows_mut() {
                row *= &gate2;
            }
            acc_at_b(&mut gb.fc2_w, bc.g.view(), df.view());
            gb.fc2_b += &df.sum_axis(Axis(0));
            let dg = df.dot(&bp.fc2_w.t());
            let du = Zip::from(&dg).and(&bc.u).map_collect(|&g, &u| g * gelu_grad(u));
            acc_at_b(&mut gb.fc1_w, bc.b_mod.view(), du.view());
            gb.fc1_b += &du.sum_axis(Axis(0));
            let db_mod = du.dot(&bp.fc1_w.t());
            dm.slice_mut(s![3 * d..4 * d]).assign(&db_mod.sum_axis(Axis(0)));
            dm.slice_mut(s![4 * d..5 * d]).assign(&(&db_mod * &bc.ln2.norm).sum_axis(Axis(0)));
            let sc2 = chunk(4);
            let mut dn2 = db_mod;
            for mut row in dn2.rows_mut() {
                Zip::from(&mut row).and(&sc2).for_each(|v, &s| *v *= T::one() + s);
            }
            layer_norm_backward(&bc.ln2, &dn2, &mut dh);

            // h1 = h + gate1 * o
            let gate1 = chunk(2);
            dm.slice_mut(s![2 * d..3 * d]).assign(&(&dh * &bc.o).sum_axis(Axis(0)));
            let mut d_o = dh.clone();
            for mut row in d_o.rows_mut() {
                row *= &gate1;
            }
            acc_at_b(&mut gb.o_w, bc.att.view(), d_o.view());
            gb.o_b += &d_o.sum_axis(Axis(0));
            let datt = d_o.dot(&bp.o_w.t());
            let seq_len = datt.nrows();
            let mut dq = Array2::<T>::zeros((seq_len, d));
            let mut dk = Array2::<T>::zeros((seq_len, d));
            let mut dv = Array2::<T>::zeros((seq_len, d));
            for hh in 0..heads {
                let cols = s![.., hh * hd..(hh + 1) * hd];
                let pr = &bc.probs[hh];
                let da = datt.slice(cols);
                let dp = da.dot(&bc.v.slice(cols).t());
                general_mat_mul(T::one(), &pr.t(), &da, T::zero(), &mut dv.slice_mut(cols));
                // softmax backward
                let mut ds = dp;
                for (mut drow, prow) in ds.rows_mut().into_iter().zip(pr.rows()) {
                    let dot: T = drow.iter().zip(prow.iter()).map(|(&a, &b)| a * b).sum();
                    Zip::from(&mut drow).and(&prow).for_each(|dv, &pv| *dv = pv * (*dv - dot) * scale);
                }
                general_mat_mul(T::one(), &ds, &bc.k.slice(cols), T::zero(), &mut dq.slice_mut(cols));
                general_mat_mul(T::one(), &ds.t(), &bc.q.slice(cols), T::zero(), &mut dk.slice_mut(cols));
            }
            cache.rope.apply(dq.view_mut(), heads, true);
            cache.rope.apply(dk.view_mut(), heads, true);
            let mut dqkv = Array2::<T>::zeros((seq_len, 3 * d));
            dqkv.slice_mut(s![.., 0..d]).assign(&dq);
            dqkv.slice_mut(s![.., d..2 * d]).assign(&dk);
            dqkv.slice_mut(s![.., 2 * d..3 * d]).assign(&dv);
            acc_at_b(&mut gb.qkv_w, bc.a_mod.view(), dqkv.view());
            gb.qkv_b += &dqkv.sum_axis(Axis(0));
            let da_mod = dqkv.dot(&bp.qkv_w.t());
            dm.slice_mut(s![0..d]).assign(&da_mod.sum_axis(Axis(0)));
            dm.slice_mut(s![d..2 * d]).assign(&(&da_mod * &bc.ln1.norm).sum_axis(Axis(0)));
            let sc1 = chunk(1);
            let mut dn1 = da_mod;
            for mut row in dn1.rows_mut() {
                Zip::from(&mut row).and(&sc1).for_each(|v, &s| *v *= T::one() + s);
            }
            layer_norm_backward(&bc.ln1, &dn1, &mut dh);

            // modulation linear
            for (i, &ci) in cache.c.iter().enumerate() {
                gb.mod_w.row_mut(i).scaled_add(ci, &dm);
            }
            gb.mod_b += &dm;
            dc += &dm.dot(&bp.mod_w.t());
        }

        // time MLP
        let dtemb = Zip::from(&dc).and(&cache.temb).map_collect(|&g, &x| g * silu_grad(x));
        for (i, &si) in cache.s1.iter().enumerate() {
            grads.t_w2.row_mut(i).scaled_add(si, &dtemb);
        }
        grads.t_b2 += &dtemb;
        let ds1 = dtemb.dot(&p.t_w2.t());
        let dz1 = Zip::from(&ds1).and(&cache.z1).map_collect(|&g, &x| g * silu_grad(x));
        for (i, &fi) in cache.tf.iter().enumerate() {
            grads.t_w1.row_mut(i).scaled_add(fi, &dz1);
        }
        grads.t_b1 += &dz1;

        // embeddings
        for (i, &id) in cache.caption_ids.iter().enumerate() {
            let mut row = grads.caption_emb.row_mut(id);
            row += &dh.row(i);
        }
        let dh_img = dh.slice(s![m_cap.., ..]);
        acc_at_b(&mut grads.in_w, cache.x.view(), dh_img);
        grads.in_b += &dh_img.sum_axis(Axis(0));
        for (i, (&eid, &role)) in cache.embed_ids.iter().zip(&cache.roles).enumerate() {
            let g = dh_img.row(i);
            let mut r = grads.region_emb.row_mut(eid);
            r += &g;
            let mut r = grads.role_emb.row_mut((role != Role::Noised) as usize);
            r += &g;
            if role == Role::Condition {
                grads.cond_emb += &g;
            }
        }
        dh_img.dot(&p.in_w.t())
    }
}
