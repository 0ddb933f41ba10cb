//! Conditional v-prediction network: patch tokens, frequency embeddings and
//! AdaLN-modulated transformer blocks, with an exact hand-written backward
//! pass over the fixed graph.
//!
//! Parameters live in one flat `Vec<f64>`; [`Denoiser`] knows the offset of
//! every tensor. Dense weights are stored `n_in × n_out`, row-major, and act
//! on row vectors (`y = x·W + b`).

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::Normalizer;
use crate::diffusion::{Conditioning, VelocityModel};
use crate::math::{exp, matmul_acc, matmul_nt_acc, matmul_tn_acc, sqrt, tanh};
use crate::{Error, Result};

const LN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    /// Waypoints per trajectory (`T`).
    pub horizon: usize,
    /// Joints per waypoint.
    pub dof: usize,
    /// Length of the environment fingerprint.
    pub n_keys: usize,
    pub patch_size: usize,
    pub hidden_width: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub cond_embed_dim: usize,
    pub freq_bands: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            horizon: 48,
            dof: 3,
            n_keys: 64,
            patch_size: 4,
            hidden_width: 128,
            n_blocks: 4,
            n_heads: 4,
            cond_embed_dim: 128,
            freq_bands: 8,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            self.horizon,
            self.dof,
            self.patch_size,
            self.hidden_width,
            self.n_heads,
            self.cond_embed_dim,
            self.freq_bands,
        ];
        if pos.iter().any(|v| *v == 0) {
            return Err(Error::invalid("denoiser config", "sizes must be positive"));
        }
        if self.horizon % self.patch_size != 0 {
            return Err(Error::invalid("denoiser config", "patch size must divide the horizon"));
        }
        if self.hidden_width % self.n_heads != 0 {
            return Err(Error::invalid("denoiser config", "heads must divide the hidden width"));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.horizon / self.patch_size
    }

    pub fn token_dim(&self) -> usize {
        self.patch_size * self.dof
    }

    pub fn cond_input_dim(&self) -> usize {
        2 * self.freq_bands * (1 + 2 * self.dof) + self.n_keys
    }
}

/// Groups of `p` consecutive waypoints, each flattened to one token.
///
/// With row-major storage this is a pure reshape, so the flat buffer is
/// unchanged; the functions exist to make the token view explicit.
pub fn patchify(tau: &[f64], dof: usize, p: usize) -> Result<Vec<Vec<f64>>> {
    let width = p * dof;
    if width == 0 || tau.len() % width != 0 {
        return Err(Error::invalid("patchify", "patch size must divide the horizon"));
    }
    Ok(tau.chunks(width).map(|c| c.to_vec()).collect())
}

pub fn unpatchify(tokens: &[Vec<f64>]) -> Vec<f64> {
    tokens.iter().flatten().copied().collect()
}

/// `[sin(2^k π x_j) for k] ++ [cos(2^k π x_j) for k]`, for each component.
pub fn freq_embed(x: &[f64], bands: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * bands * x.len());
    for &v in x {
        let mut f = PI;
        for _ in 0..bands {
            out.push(crate::math::sin(f * v));
            f *= 2.0;
        }
        let mut f = PI;
        for _ in 0..bands {
            out.push(crate::math::cos(f * v));
            f *= 2.0;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Dense {
    w: usize,
    b: usize,
    n_in: usize,
    n_out: usize,
}

impl Dense {
    fn forward(&self, p: &[f64], x: &[f64], rows: usize) -> Vec<f64> {
        let mut y = Vec::with_capacity(rows * self.n_out);
        let b = &p[self.b..self.b + self.n_out];
        for _ in 0..rows {
            y.extend_from_slice(b);
        }
        matmul_acc(x, &p[self.w..self.w + self.n_in * self.n_out], &mut y, rows, self.n_in, self.n_out);
        y
    }

    /// Accumulates weight and bias gradients; returns the input gradient when
    /// `want_dx`.
    fn backward(&self, p: &[f64], g: &mut [f64], x: &[f64], dy: &[f64], rows: usize, want_dx: bool) -> Vec<f64> {
        let (ni, no) = (self.n_in, self.n_out);
        matmul_tn_acc(x, dy, &mut g[self.w..self.w + ni * no], rows, ni, no);
        let gb = &mut g[self.b..self.b + no];
        for r in dy.chunks(no) {
            for (a, v) in gb.iter_mut().zip(r) {
                *a += v;
            }
        }
        if !want_dx {
            return Vec::new();
        }
        let mut dx = vec![0.0; rows * ni];
        matmul_nt_acc(dy, &p[self.w..self.w + ni * no], &mut dx, rows, no, ni);
        dx
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct BlockLayout {
    /// `cond → [γ1, g1, b1, γ2, g2, b2]`, each `H` wide.
    modulation: Dense,
    qkv: Dense,
    proj: Dense,
    ff1: Dense,
    ff2: Dense,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Layout {
    patch1: Dense,
    patch2: Dense,
    cond1: Dense,
    cond2: Dense,
    blocks: Vec<BlockLayout>,
    /// `cond → [g, b]` for the final normalization.
    final_mod: Dense,
    out: Dense,
    len: usize,
}

impl Layout {
    fn new(c: &DenoiserConfig) -> Self {
        let mut off = 0;
        let mut dense = |n_in: usize, n_out: usize| {
            let d = Dense {
                w: off,
                b: off + n_in * n_out,
                n_in,
                n_out,
            };
            off += n_in * n_out + n_out;
            d
        };
        let (h, cd) = (c.hidden_width, c.cond_embed_dim);
        let patch1 = dense(c.token_dim(), h);
        let patch2 = dense(h, h);
        let cond1 = dense(c.cond_input_dim(), cd);
        let cond2 = dense(cd, cd);
        let blocks = (0..c.n_blocks)
            .map(|_| BlockLayout {
                modulation: dense(cd, 6 * h),
                qkv: dense(h, 3 * h),
                proj: dense(h, h),
                ff1: dense(h, 4 * h),
                ff2: dense(4 * h, h),
            })
            .collect();
        let final_mod = dense(cd, 2 * h);
        let out = dense(h, c.token_dim());
        Layout {
            patch1,
            patch2,
            cond1,
            cond2,
            blocks,
            final_mod,
            out,
            len: off,
        }
    }

    fn dense_layers(&self) -> Vec<(Dense, f64)> {
        // (layer, init gain)
        let mut v = vec![(self.patch1, 1.0), (self.patch2, 1.0), (self.cond1, 1.0), (self.cond2, 1.0)];
        for b in &self.blocks {
            v.extend([(b.modulation, 0.1), (b.qkv, 1.0), (b.proj, 1.0), (b.ff1, 1.0), (b.ff2, 1.0)]);
        }
        v.extend([(self.final_mod, 0.1), (self.out, 0.1)]);
        v
    }
}

#[inline]
fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + tanh(C * (x + 0.044715 * x * x * x)))
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let t = tanh(C * (x + 0.044715 * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + exp(-x))
}

#[inline]
fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Row-wise layer norm without affine parameters; returns `(n, rstd)`.
fn layer_norm(x: &[f64], width: usize) -> (Vec<f64>, Vec<f64>) {
    let mut n = Vec::with_capacity(x.len());
    let mut rstd = Vec::with_capacity(x.len() / width);
    for row in x.chunks(width) {
        let mu = row.iter().sum::<f64>() / width as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / width as f64;
        let r = 1.0 / sqrt(var + LN_EPS);
        n.extend(row.iter().map(|v| (v - mu) * r));
        rstd.push(r);
    }
    (n, rstd)
}

fn layer_norm_backward(dn: &[f64], n: &[f64], rstd: &[f64], width: usize, dx: &mut [f64]) {
    for (((dnr, nr), r), dxr) in dn
        .chunks(width)
        .zip(n.chunks(width))
        .zip(rstd)
        .zip(dx.chunks_mut(width))
    {
        let m1 = dnr.iter().sum::<f64>() / width as f64;
        let m2 = dnr.iter().zip(nr).map(|(a, b)| a * b).sum::<f64>() / width as f64;
        for ((o, d), v) in dxr.iter_mut().zip(dnr).zip(nr) {
            *o += r * (d - m1 - v * m2);
        }
    }
}

/// `(1 + g) ⊙ n + b`, broadcast over rows.
fn modulate(n: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let w = g.len();
    n.chunks(w)
        .flat_map(|row| row.iter().zip(g).zip(b).map(|((v, g), b)| (1.0 + g) * v + b))
        .collect()
}

/// Backward of [`modulate`]: accumulates `dg`, `db` and returns `dn`.
fn modulate_backward(da: &[f64], n: &[f64], g: &[f64], dg: &mut [f64], db: &mut [f64]) -> Vec<f64> {
    let w = g.len();
    let mut dn = Vec::with_capacity(da.len());
    for (dr, nr) in da.chunks(w).zip(n.chunks(w)) {
        for j in 0..w {
            dg[j] += dr[j] * nr[j];
            db[j] += dr[j];
            dn.push(dr[j] * (1.0 + g[j]));
        }
    }
    dn
}

/// `x + γ ⊙ s`, broadcast over rows.
fn gated_residual(x: &[f64], gamma: &[f64], s: &[f64]) -> Vec<f64> {
    let w = gamma.len();
    x.chunks(w)
        .zip(s.chunks(w))
        .flat_map(|(xr, sr)| xr.iter().zip(sr).zip(gamma).map(|((x, s), g)| x + g * s))
        .collect()
}

/// Multi-head self-attention over `l` rows of packed `[q | k | v]`.
/// Returns the concatenated head outputs and the attention weights
/// (`heads × l × l`).
fn attention(qkv: &[f64], l: usize, h: usize, heads: usize) -> (Vec<f64>, Vec<f64>) {
    let dh = h / heads;
    let scale = 1.0 / sqrt(dh as f64);
    let mut out = vec![0.0; l * h];
    let mut probs = vec![0.0; heads * l * l];
    for hd in 0..heads {
        let (qo, ko, vo) = (hd * dh, h + hd * dh, 2 * h + hd * dh);
        for i in 0..l {
            let q = &qkv[i * 3 * h + qo..i * 3 * h + qo + dh];
            let p = &mut probs[(hd * l + i) * l..(hd * l + i + 1) * l];
            let mut mx = f64::NEG_INFINITY;
            for (j, pj) in p.iter_mut().enumerate() {
                let k = &qkv[j * 3 * h + ko..j * 3 * h + ko + dh];
                *pj = q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;
                mx = mx.max(*pj);
            }
            let mut z = 0.0;
            for pj in p.iter_mut() {
                *pj = exp(*pj - mx);
                z += *pj;
            }
            let o = &mut out[i * h + qo..i * h + qo + dh];
            for (j, pj) in p.iter_mut().enumerate() {
                *pj /= z;
                let v = &qkv[j * 3 * h + vo..j * 3 * h + vo + dh];
                for (a, b) in o.iter_mut().zip(v) {
                    *a += *pj * b;
                }
            }
        }
    }
    (out, probs)
}

fn attention_backward(dout: &[f64], qkv: &[f64], probs: &[f64], l: usize, h: usize, heads: usize) -> Vec<f64> {
    let dh = h / heads;
    let scale = 1.0 / sqrt(dh as f64);
    let mut dqkv = vec![0.0; l * 3 * h];
    let mut dp = vec![0.0; l];
    for hd in 0..heads {
        let (qo, ko, vo) = (hd * dh, h + hd * dh, 2 * h + hd * dh);
        for i in 0..l {
            let p = &probs[(hd * l + i) * l..(hd * l + i + 1) * l];
            let d_o = &dout[i * h + qo..i * h + qo + dh];
            let mut dot = 0.0;
            for j in 0..l {
                let v = &qkv[j * 3 * h + vo..j * 3 * h + vo + dh];
                dp[j] = d_o.iter().zip(v).map(|(a, b)| a * b).sum();
                dot += p[j] * dp[j];
                let dv = &mut dqkv[j * 3 * h + vo..j * 3 * h + vo + dh];
                for (a, b) in dv.iter_mut().zip(d_o) {
                    *a += p[j] * b;
                }
            }
            for j in 0..l {
                let ds = p[j] * (dp[j] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                for c in 0..dh {
                    let kv = qkv[j * 3 * h + ko + c];
                    let qv = qkv[i * 3 * h + qo + c];
                    dqkv[i * 3 * h + qo + c] += ds * kv;
                    dqkv[j * 3 * h + ko + c] += ds * qv;
                }
            }
        }
    }
    dqkv
}

#[derive(Clone, Debug, Default)]
struct BlockCache {
    modv: Vec<f64>,
    n1: Vec<f64>,
    rstd1: Vec<f64>,
    a1: Vec<f64>,
    qkv: Vec<f64>,
    probs: Vec<f64>,
    attn: Vec<f64>,
    s1: Vec<f64>,
    n2: Vec<f64>,
    rstd2: Vec<f64>,
    a2: Vec<f64>,
    h_pre: Vec<f64>,
    h_act: Vec<f64>,
    s2: Vec<f64>,
}

/// Activations kept by [`Denoiser::forward_cached`] for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct ForwardCache {
    tokens: Vec<f64>,
    patch_pre: Vec<f64>,
    patch_act: Vec<f64>,
    cond_in: Vec<f64>,
    cond_pre: Vec<f64>,
    cond_act: Vec<f64>,
    cond: Vec<f64>,
    cond_silu: Vec<f64>,
    blocks: Vec<BlockCache>,
    mod_f: Vec<f64>,
    n_f: Vec<f64>,
    rstd_f: Vec<f64>,
    y_f: Vec<f64>,
}

/// Sub-layer plugged into [`adaln_block`].
pub type SubLayer<'a> = &'a dyn Fn(&[f64]) -> Vec<f64>;

/// One AdaLN block with arbitrary sub-layers:
/// `x1 = x + γ1 ⊙ attn((1 + g1) ⊙ LN(x) + b1)`,
/// `x2 = x1 + γ2 ⊙ ffn((1 + g2) ⊙ LN(x1) + b2)`.
/// `modv` is `[γ1, g1, b1, γ2, g2, b2]`, each `width` wide.
pub fn adaln_block(x: &[f64], width: usize, modv: &[f64], attn: SubLayer<'_>, ffn: SubLayer<'_>) -> Vec<f64> {
    let m = |i: usize| &modv[i * width..(i + 1) * width];
    let (n1, _) = layer_norm(x, width);
    let s1 = attn(&modulate(&n1, m(1), m(2)));
    let x1 = gated_residual(x, m(0), &s1);
    let (n2, _) = layer_norm(&x1, width);
    let s2 = ffn(&modulate(&n2, m(4), m(5)));
    gated_residual(&x1, m(3), &s2)
}

/// Network structure and fixed position embeddings; parameters are passed in.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    layout: Layout,
    pos: Vec<f64>,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let (l, h) = (config.tokens(), config.hidden_width);
        let mut pos = vec![0.0; l * h];
        for t in 0..l {
            for i in 0..h / 2 {
                let f = exp(-((2 * i) as f64) / h as f64 * libm::log(10000.0));
                pos[t * h + 2 * i] = crate::math::sin(t as f64 * f);
                pos[t * h + 2 * i + 1] = crate::math::cos(t as f64 * f);
            }
        }
        Ok(Denoiser { config, layout, pos })
    }

    pub fn n_params(&self) -> usize {
        self.layout.len
    }

    /// Gaussian weights scaled by `gain / √fan_in`, zero biases.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut p = vec![0.0; self.layout.len];
        for (d, gain) in self.layout.dense_layers() {
            let std = gain / sqrt(d.n_in as f64);
            for w in &mut p[d.w..d.w + d.n_in * d.n_out] {
                let z: f64 = StandardNormal.sample(rng);
                *w = std * z;
            }
        }
        p
    }

    fn check(&self, params: &[f64], x_t: &[f64], cond: &Conditioning) -> Result<()> {
        let c = &self.config;
        if params.len() != self.layout.len {
            return Err(Error::DimensionMismatch {
                expected: self.layout.len,
                got: params.len(),
            });
        }
        if x_t.len() != c.horizon * c.dof {
            return Err(Error::DimensionMismatch {
                expected: c.horizon * c.dof,
                got: x_t.len(),
            });
        }
        if cond.phi.len() != c.n_keys || cond.q_s.len() != c.dof || cond.q_g.len() != c.dof {
            return Err(Error::invalid("conditioning", "phi or endpoint length does not match the config"));
        }
        Ok(())
    }

    /// `[freq(time) ; φ ; freq(q_s) ; freq(q_g)]`.
    fn cond_input(&self, time: f64, cond: &Conditioning) -> Vec<f64> {
        let b = self.config.freq_bands;
        let mut v = freq_embed(&[time], b);
        v.extend_from_slice(&cond.phi);
        v.extend(freq_embed(&cond.q_s, b));
        v.extend(freq_embed(&cond.q_g, b));
        v
    }

    /// Conditioning vector (`cond_embed_dim` wide).
    pub fn cond_embed(&self, params: &[f64], time: f64, cond: &Conditioning) -> Vec<f64> {
        let ly = &self.layout;
        let cin = self.cond_input(time, cond);
        let pre = ly.cond1.forward(params, &cin, 1);
        let act: Vec<f64> = pre.iter().map(|v| silu(*v)).collect();
        ly.cond2.forward(params, &act, 1)
    }

    pub fn forward(&self, params: &[f64], x_t: &[f64], time: f64, cond: &Conditioning) -> Result<Vec<f64>> {
        self.forward_cached(params, x_t, time, cond).map(|(y, _)| y)
    }

    pub fn forward_cached(
        &self,
        params: &[f64],
        x_t: &[f64],
        time: f64,
        cond: &Conditioning,
    ) -> Result<(Vec<f64>, ForwardCache)> {
        self.check(params, x_t, cond)?;
        let c = &self.config;
        let ly = &self.layout;
        let (l, h, heads) = (c.tokens(), c.hidden_width, c.n_heads);
        let p = params;

        // patchify is a reshape of the row-major buffer
        let tokens = x_t.to_vec();
        let patch_pre = ly.patch1.forward(p, &tokens, l);
        let patch_act: Vec<f64> = patch_pre.iter().map(|v| gelu(*v)).collect();
        let mut x = ly.patch2.forward(p, &patch_act, l);
        for (a, b) in x.iter_mut().zip(&self.pos) {
            *a += b;
        }

        let cond_in = self.cond_input(time, cond);
        let cond_pre = ly.cond1.forward(p, &cond_in, 1);
        let cond_act: Vec<f64> = cond_pre.iter().map(|v| silu(*v)).collect();
        let cvec = ly.cond2.forward(p, &cond_act, 1);
        let cond_silu: Vec<f64> = cvec.iter().map(|v| silu(*v)).collect();

        let mut blocks = Vec::with_capacity(ly.blocks.len());
        for bl in &ly.blocks {
            let modv = bl.modulation.forward(p, &cond_silu, 1);
            let m = |i: usize| &modv[i * h..(i + 1) * h];
            let (n1, rstd1) = layer_norm(&x, h);
            let a1 = modulate(&n1, m(1), m(2));
            let qkv = bl.qkv.forward(p, &a1, l);
            let (attn, probs) = attention(&qkv, l, h, heads);
            let s1 = bl.proj.forward(p, &attn, l);
            let x1 = gated_residual(&x, m(0), &s1);
            let (n2, rstd2) = layer_norm(&x1, h);
            let a2 = modulate(&n2, m(4), m(5));
            let h_pre = bl.ff1.forward(p, &a2, l);
            let h_act: Vec<f64> = h_pre.iter().map(|v| gelu(*v)).collect();
            let s2 = bl.ff2.forward(p, &h_act, l);
            let x2 = gated_residual(&x1, m(3), &s2);
            x = x2;
            blocks.push(BlockCache {
                modv,
                n1,
                rstd1,
                a1,
                qkv,
                probs,
                attn,
                s1,
                n2,
                rstd2,
                a2,
                h_pre,
                h_act,
                s2,
            });
        }

        let mod_f = ly.final_mod.forward(p, &cond_silu, 1);
        let (n_f, rstd_f) = layer_norm(&x, h);
        let y_f = modulate(&n_f, &mod_f[..h], &mod_f[h..]);
        let out = ly.out.forward(p, &y_f, l);
        let cache = ForwardCache {
            tokens,
            patch_pre,
            patch_act,
            cond_in,
            cond_pre,
            cond_act,
            cond: cvec,
            cond_silu,
            blocks,
            mod_f,
            n_f,
            rstd_f,
            y_f,
        };
        Ok((out, cache))
    }

    /// Adds `∂(Σ d_out ⊙ output)/∂params` to `grad`.
    pub fn backward(&self, params: &[f64], cache: &ForwardCache, d_out: &[f64], grad: &mut [f64]) {
        let c = &self.config;
        let ly = &self.layout;
        let (l, h, heads) = (c.tokens(), c.hidden_width, c.n_heads);
        let p = params;
        debug_assert_eq!(grad.len(), ly.len);

        let mut d_sc = vec![0.0; c.cond_embed_dim];
        let dy_f = ly.out.backward(p, grad, &cache.y_f, d_out, l, true);
        let mut dmod_f = vec![0.0; 2 * h];
        let (dg, db) = dmod_f.split_at_mut(h);
        let dn_f = modulate_backward(&dy_f, &cache.n_f, &cache.mod_f[..h], dg, db);
        let mut dx = vec![0.0; l * h];
        layer_norm_backward(&dn_f, &cache.n_f, &cache.rstd_f, h, &mut dx);
        add_into(&mut d_sc, &ly.final_mod.backward(p, grad, &cache.cond_silu, &dmod_f, 1, true));

        for (bl, bc) in ly.blocks.iter().zip(&cache.blocks).rev() {
            let m = |i: usize| &bc.modv[i * h..(i + 1) * h];
            let mut dmod = vec![0.0; 6 * h];
            // x2 = x1 + γ2 ⊙ s2
            let ds2 = gate_backward(&dx, m(3), &bc.s2, &mut dmod[3 * h..4 * h]);
            let mut dx1 = dx;
            let mut dh = bl.ff2.backward(p, grad, &bc.h_act, &ds2, l, true);
            for (d, z) in dh.iter_mut().zip(&bc.h_pre) {
                *d *= gelu_grad(*z);
            }
            let da2 = bl.ff1.backward(p, grad, &bc.a2, &dh, l, true);
            let dn2 = {
                let (lo, hi) = dmod.split_at_mut(5 * h);
                modulate_backward(&da2, &bc.n2, m(4), &mut lo[4 * h..], hi)
            };
            layer_norm_backward(&dn2, &bc.n2, &bc.rstd2, h, &mut dx1);
            // x1 = x + γ1 ⊙ s1
            let ds1 = gate_backward(&dx1, m(0), &bc.s1, &mut dmod[..h]);
            let mut dxi = dx1;
            let dattn = bl.proj.backward(p, grad, &bc.attn, &ds1, l, true);
            let dqkv = attention_backward(&dattn, &bc.qkv, &bc.probs, l, h, heads);
            let da1 = bl.qkv.backward(p, grad, &bc.a1, &dqkv, l, true);
            let dn1 = {
                let (lo, hi) = dmod.split_at_mut(2 * h);
                modulate_backward(&da1, &bc.n1, m(1), &mut lo[h..], &mut hi[..h])
            };
            layer_norm_backward(&dn1, &bc.n1, &bc.rstd1, h, &mut dxi);
            add_into(&mut d_sc, &bl.modulation.backward(p, grad, &cache.cond_silu, &dmod, 1, true));
            dx = dxi;
        }

        // patch embedding
        let mut dpa = ly.patch2.backward(p, grad, &cache.patch_act, &dx, l, true);
        for (d, z) in dpa.iter_mut().zip(&cache.patch_pre) {
            *d *= gelu_grad(*z);
        }
        ly.patch1.backward(p, grad, &cache.tokens, &dpa, l, false);

        // conditioning MLP
        let dcond: Vec<f64> = d_sc.iter().zip(&cache.cond).map(|(d, z)| d * silu_grad(*z)).collect();
        let mut dact = ly.cond2.backward(p, grad, &cache.cond_act, &dcond, 1, true);
        for (d, z) in dact.iter_mut().zip(&cache.cond_pre) {
            *d *= silu_grad(*z);
        }
        ly.cond1.backward(p, grad, &cache.cond_in, &dact, 1, false);
    }
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

/// Backward of `x + γ ⊙ s` with respect to `γ` (accumulated) and `s`.
fn gate_backward(dy: &[f64], gamma: &[f64], s: &[f64], dgamma: &mut [f64]) -> Vec<f64> {
    let w = gamma.len();
    let mut ds = Vec::with_capacity(dy.len());
    for (dr, sr) in dy.chunks(w).zip(s.chunks(w)) {
        for j in 0..w {
            dgamma[j] += dr[j] * sr[j];
            ds.push(dr[j] * gamma[j]);
        }
    }
    ds
}

/// A [`Denoiser`] bound to a parameter vector.
#[derive(Clone, Copy, Debug)]
pub struct BoundModel<'a> {
    pub net: &'a Denoiser,
    pub params: &'a [f64],
}

impl VelocityModel for BoundModel<'_> {
    fn horizon(&self) -> usize {
        self.net.config.horizon
    }

    fn dof(&self) -> usize {
        self.net.config.dof
    }

    fn predict(&self, x_t: &[f64], time: f64, cond: &Conditioning) -> Vec<f64> {
        self.net
            .forward(self.params, x_t, time, cond)
            .expect("model inputs are validated by the sampler")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Parameters, optimizer moments and the normalizer the model was trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: DenoiserConfig,
    pub params: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub normalizer: Normalizer,
}

impl TrainState {
    pub fn new(config: DenoiserConfig, params: Vec<f64>, normalizer: Normalizer) -> Self {
        let n = params.len();
        TrainState {
            config,
            params,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            normalizer,
        }
    }
}

/// One bias-corrected Adam step.
pub fn adam_update(state: &mut TrainState, grads: &[f64], cfg: &AdamConfig) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - crate::math::powi(cfg.beta1, t);
    let c2 = 1.0 - crate::math::powi(cfg.beta2, t);
    for (((p, m), v), g) in state
        .params
        .iter_mut()
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
        .zip(grads)
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        *p -= cfg.lr * (*m / c1) / (sqrt(*v / c2) + cfg.eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    pub(crate) fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            horizon: 8,
            dof: 3,
            n_keys: 5,
            patch_size: 2,
            hidden_width: 8,
            n_blocks: 2,
            n_heads: 2,
            cond_embed_dim: 6,
            freq_bands: 2,
        }
    }

    fn rng(s: u64) -> crate::seed::Rng {
        crate::seed::Rng::seed_from_u64(s)
    }

    fn normal(r: &mut crate::seed::Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(&mut *r)).collect()
    }

    fn cond(r: &mut crate::seed::Rng, c: &DenoiserConfig) -> Conditioning {
        Conditioning {
            phi: (0..c.n_keys).map(|i| (i % 2) as f64).collect(),
            q_s: normal(r, c.dof),
            q_g: normal(r, c.dof),
        }
    }

    #[test]
    fn patchify_round_trip_and_shapes() {
        let tau: Vec<f64> = (0..48 * 3).map(|v| v as f64 * 0.37).collect();
        let tok = patchify(&tau, 3, 4).unwrap();
        assert_eq!(tok.len(), 12);
        assert!(tok.iter().all(|t| t.len() == 12));
        assert_eq!(tok[1][0], tau[12]);
        assert_eq!(unpatchify(&tok), tau);
        let single = patchify(&tau, 3, 1).unwrap();
        assert_eq!(single[5], tau[15..18].to_vec());
        assert!(patchify(&tau, 3, 5).is_err());
    }

    #[test]
    fn freq_embed_basics() {
        let e = freq_embed(&[0.0, 0.0], 3);
        assert_eq!(e.len(), 12);
        assert_eq!(&e[..6], &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        // Lipschitz bound of the highest band: 2^(bands−1) π per component
        let bands = 4;
        let (x, y) = (0.3, 0.3001);
        let a = freq_embed(&[x], bands);
        let b = freq_embed(&[y], bands);
        let bound = 8.0 * PI * (y - x);
        assert!(a.iter().zip(&b).all(|(u, v)| (u - v).abs() <= bound));
    }

    #[test]
    fn config_validation() {
        assert!(DenoiserConfig::default().validate().is_ok());
        let mut c = tiny();
        c.patch_size = 3;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.n_heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn adaln_reductions() {
        let mut r = rng(1);
        let w = 5;
        let x = normal(&mut r, 3 * w);
        let id: SubLayer = &|v: &[f64]| v.to_vec();
        let sq: SubLayer = &|v: &[f64]| v.iter().map(|a| a * a).collect();
        // closed gates
        let mut modv = normal(&mut r, 6 * w);
        modv[..w].iter_mut().for_each(|v| *v = 0.0);
        modv[3 * w..4 * w].iter_mut().for_each(|v| *v = 0.0);
        assert_eq!(adaln_block(&x, w, &modv, sq, sq), x);
        // g = b = 0, γ = 1, identity sub-layers: x + LN(x), then again
        let mut modv = vec![0.0; 6 * w];
        modv[..w].iter_mut().for_each(|v| *v = 1.0);
        modv[3 * w..4 * w].iter_mut().for_each(|v| *v = 1.0);
        let (n, _) = layer_norm(&x, w);
        let x1: Vec<f64> = x.iter().zip(&n).map(|(a, b)| a + b).collect();
        let (n1, _) = layer_norm(&x1, w);
        let x2: Vec<f64> = x1.iter().zip(&n1).map(|(a, b)| a + b).collect();
        assert_eq!(adaln_block(&x, w, &modv, id, id), x2);
    }

    #[test]
    fn adaln_matches_straight_line_formula() {
        let mut r = rng(2);
        let w = 4;
        let x = normal(&mut r, 2 * w);
        let modv = normal(&mut r, 6 * w);
        let sq: SubLayer = &|v: &[f64]| v.iter().map(|a| a * a).collect();
        let got = adaln_block(&x, w, &modv, sq, sq);
        let ln = |row: &[f64]| -> Vec<f64> {
            let mu = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 4.0;
            row.iter().map(|v| (v - mu) / (var + 1e-6).sqrt()).collect()
        };
        for t in 0..2 {
            let xr = &x[t * w..(t + 1) * w];
            let n = ln(xr);
            let mut x1 = [0.0; 4];
            for j in 0..w {
                let a = (1.0 + modv[w + j]) * n[j] + modv[2 * w + j];
                x1[j] = xr[j] + modv[j] * a * a;
            }
            let n2 = ln(&x1);
            for j in 0..w {
                let a = (1.0 + modv[4 * w + j]) * n2[j] + modv[5 * w + j];
                let e = x1[j] + modv[3 * w + j] * a * a;
                assert!((got[t * w + j] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_shape_determinism_and_sensitivity() {
        let c = tiny();
        let net = Denoiser::new(c).unwrap();
        let mut r = rng(3);
        let p = net.init_params(&mut r);
        let x = normal(&mut r, 24);
        let cd = cond(&mut r, &c);
        let a = net.forward(&p, &x, 0.4, &cd).unwrap();
        assert_eq!(a.len(), 24);
        assert!(a.iter().all(|v| v.is_finite()));
        assert_eq!(a, net.forward(&p, &x, 0.4, &cd).unwrap());
        let mut flipped = cd.clone();
        flipped.phi[0] = 1.0 - flipped.phi[0];
        assert_ne!(net.cond_embed(&p, 0.4, &cd), net.cond_embed(&p, 0.4, &flipped));
        let mut perm = cd.clone();
        perm.phi.rotate_left(1);
        assert_ne!(a, net.forward(&p, &x, 0.4, &perm).unwrap());
        assert_eq!(net.cond_embed(&p, 0.4, &cd).len(), c.cond_embed_dim);
        assert!(net.forward(&p, &x[..21], 0.4, &cd).is_err());
    }

    #[test]
    fn closed_gates_reduce_to_final_projection() {
        let c = tiny();
        let net = Denoiser::new(c).unwrap();
        let mut r = rng(4);
        let mut p = net.init_params(&mut r);
        let h = c.hidden_width;
        for b in &net.layout.blocks {
            // zero the γ rows of the modulation maps
            for gate in [0, 3] {
                for i in 0..b.modulation.n_in {
                    let row = b.modulation.w + i * b.modulation.n_out;
                    p[row + gate * h..row + (gate + 1) * h].iter_mut().for_each(|v| *v = 0.0);
                }
                p[b.modulation.b + gate * h..b.modulation.b + (gate + 1) * h]
                    .iter_mut()
                    .for_each(|v| *v = 0.0);
            }
        }
        let x = normal(&mut r, 24);
        let cd = cond(&mut r, &c);
        let (out, cache) = net.forward_cached(&p, &x, 0.7, &cd).unwrap();
        // tokens pass the blocks untouched
        let ly = &net.layout;
        let pre = ly.patch1.forward(&p, &x, 4);
        let act: Vec<f64> = pre.iter().map(|v| gelu(*v)).collect();
        let mut tok = ly.patch2.forward(&p, &act, 4);
        add_into(&mut tok, &net.pos);
        let (n, _) = layer_norm(&tok, h);
        let y = modulate(&n, &cache.mod_f[..h], &cache.mod_f[h..]);
        assert_eq!(out, ly.out.forward(&p, &y, 4));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let c = tiny();
        let net = Denoiser::new(c).unwrap();
        let mut r = rng(5);
        let mut p = net.init_params(&mut r);
        // non-trivial gates and biases so every path carries gradient
        for v in p.iter_mut() {
            *v += 0.05 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut r);
        }
        let x = normal(&mut r, 24);
        let target = normal(&mut r, 24);
        let cd = cond(&mut r, &c);
        // a linear functional of the output keeps the loss small, so the
        // central-difference roundoff stays well below the tolerance
        let loss = |p: &[f64]| -> f64 {
            let y = net.forward(p, &x, 0.3, &cd).unwrap();
            y.iter().zip(&target).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = net.forward_cached(&p, &x, 0.3, &cd).unwrap();
        let dy = target.clone();
        let mut g = vec![0.0; p.len()];
        net.backward(&p, &cache, &dy, &mut g);
        let mut g2 = vec![0.0; p.len()];
        net.backward(&p, &cache, &dy, &mut g2);
        assert_eq!(g, g2);
        use rand::seq::index::sample;
        let idx = sample(&mut r, p.len(), 300);
        let hstep = 1e-5;
        let mut worst: f64 = 0.0;
        for i in idx.iter() {
            let mut q = p.clone();
            q[i] = p[i] + hstep;
            let fp = loss(&q);
            q[i] = p[i] - hstep;
            let fm = loss(&q);
            let fd = (fp - fm) / (2.0 * hstep);
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn zero_loss_gives_zero_gradient() {
        let c = tiny();
        let net = Denoiser::new(c).unwrap();
        let mut r = rng(6);
        let p = net.init_params(&mut r);
        let x = normal(&mut r, 24);
        let cd = cond(&mut r, &c);
        let (_, cache) = net.forward_cached(&p, &x, 0.3, &cd).unwrap();
        let mut g = vec![0.0; p.len()];
        net.backward(&p, &cache, &[0.0; 24], &mut g);
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn adam_step_by_hand() {
        let nz = Normalizer {
            center: vec![0.0],
            half_range: vec![1.0],
        };
        let mut s = TrainState::new(tiny(), vec![1.0, -2.0, 0.5], nz);
        let cfg = AdamConfig::default();
        adam_update(&mut s, &[0.0, 0.0, 0.0], &cfg);
        assert_eq!(s.params, vec![1.0, -2.0, 0.5]);
        assert_eq!(s.step, 1);
        let g = [0.5, -1.0, 2.0];
        adam_update(&mut s, &g, &cfg);
        for (i, gi) in g.iter().enumerate() {
            let m = 0.1 * gi;
            let v = 0.001 * gi * gi;
            let mh = m / (1.0 - 0.9f64.powi(2));
            let vh = v / (1.0 - 0.999f64.powi(2));
            let expect = [1.0, -2.0, 0.5][i] - 1e-3 * mh / (vh.sqrt() + 1e-8);
            assert!((s.params[i] - expect).abs() < 1e-15);
        }
    }
}
