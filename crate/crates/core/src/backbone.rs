//! Bidirectional transformer with decomposed space-time attention.
//!
//! Each block runs three Pre-LN sublayers in order: temporal attention
//! (tokens sharing a spatial position, one group of `N` per position),
//! spatial attention (tokens of one frame, one group of `L` per frame), and
//! a `d -> 4d -> d` GELU MLP. A joint `(N * L) x d` position table is added
//! once before the first block; there is no final norm.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::layout::TokenLayout;
use crate::params::{Init, ParamLayout};
use crate::tensor::{self, Scalar};

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub gain: Range<usize>,
    pub bias: Range<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub norm: NormParams,
    /// `d x 3d`: query, key and value projections side by side.
    pub qkv_weight: Range<usize>,
    pub qkv_bias: Range<usize>,
    pub out_weight: Range<usize>,
    pub out_bias: Range<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub norm: NormParams,
    pub fc1_weight: Range<usize>,
    pub fc1_bias: Range<usize>,
    pub fc2_weight: Range<usize>,
    pub fc2_bias: Range<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub temporal: AttentionParams,
    pub spatial: AttentionParams,
    pub mlp: MlpParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub position: Range<usize>,
    pub blocks: Vec<BlockParams>,
    pub hidden: usize,
    pub heads: usize,
    pub layout: TokenLayout,
}

fn norm(params: &mut ParamLayout, prefix: &str, d: usize) -> NormParams {
    NormParams {
        gain: params.push(format!("{prefix}.gain"), &[d], Init::Ones),
        bias: params.push(format!("{prefix}.bias"), &[d], Init::Zeros),
    }
}

fn attention(params: &mut ParamLayout, prefix: &str, d: usize) -> AttentionParams {
    AttentionParams {
        norm: norm(params, &format!("{prefix}_norm"), d),
        qkv_weight: params.push(format!("{prefix}_attention.qkv.weight"), &[d, 3 * d], Init::Normal(INIT_STD)),
        qkv_bias: params.push(format!("{prefix}_attention.qkv.bias"), &[3 * d], Init::Zeros),
        out_weight: params.push(format!("{prefix}_attention.output.weight"), &[d, d], Init::Normal(INIT_STD)),
        out_bias: params.push(format!("{prefix}_attention.output.bias"), &[d], Init::Zeros),
    }
}

impl BackboneParams {
    pub fn register(params: &mut ParamLayout, layout: TokenLayout, hidden: usize, heads: usize, layers: usize) -> Self {
        let position = params.push("backbone.position", &[layout.total_tokens(), hidden], Init::Normal(INIT_STD));
        let blocks = (0..layers)
            .map(|i| {
                let p = format!("backbone.blocks.{i}");
                BlockParams {
                    temporal: attention(params, &format!("{p}.temporal"), hidden),
                    spatial: attention(params, &format!("{p}.spatial"), hidden),
                    mlp: MlpParams {
                        norm: norm(params, &format!("{p}.mlp_norm"), hidden),
                        fc1_weight: params.push(format!("{p}.mlp.fc1.weight"), &[hidden, 4 * hidden], Init::Normal(INIT_STD)),
                        fc1_bias: params.push(format!("{p}.mlp.fc1.bias"), &[4 * hidden], Init::Zeros),
                        fc2_weight: params.push(format!("{p}.mlp.fc2.weight"), &[4 * hidden, hidden], Init::Normal(INIT_STD)),
                        fc2_bias: params.push(format!("{p}.mlp.fc2.bias"), &[hidden], Init::Zeros),
                    },
                }
            })
            .collect();
        BackboneParams {
            position,
            blocks,
            hidden,
            heads,
            layout,
        }
    }
}

/// Which sublayers run. Disabled sublayers become the identity; used to
/// probe the attention factorization in isolation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sublayers {
    pub temporal: bool,
    pub spatial: bool,
    pub mlp: bool,
}

impl Default for Sublayers {
    fn default() -> Self {
        Sublayers {
            temporal: true,
            spatial: true,
            mlp: true,
        }
    }
}

/// Token grouping for one attention sublayer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grouping {
    /// Same spatial index across frames: `L` groups of `N`.
    Temporal { frames: usize, per_frame: usize },
    /// Same frame: `N` groups of `L`.
    Spatial { frames: usize, per_frame: usize },
}

impl Grouping {
    pub fn groups(&self) -> usize {
        match *self {
            Grouping::Temporal { per_frame, .. } => per_frame,
            Grouping::Spatial { frames, .. } => frames,
        }
    }

    pub fn size(&self) -> usize {
        match *self {
            Grouping::Temporal { frames, .. } => frames,
            Grouping::Spatial { per_frame, .. } => per_frame,
        }
    }

    /// Row distance between consecutive members of a group.
    pub fn step(&self) -> usize {
        match *self {
            Grouping::Temporal { per_frame, .. } => per_frame,
            Grouping::Spatial { .. } => 1,
        }
    }

    #[inline]
    pub fn row(&self, group: usize, member: usize) -> usize {
        match *self {
            Grouping::Temporal { per_frame, .. } => member * per_frame + group,
            Grouping::Spatial { per_frame, .. } => group * per_frame + member,
        }
    }
}

struct NormCache<T> {
    normalized: Vec<T>,
    rstd: Vec<T>,
    output: Vec<T>,
}

fn layer_norm<T: Scalar>(x: &[T], d: usize, gain: &[T], bias: &[T]) -> NormCache<T> {
    let rows = x.len() / d;
    let mut normalized = vec![T::zero(); x.len()];
    let mut output = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let inv_d = T::one() / T::of(d as f64);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let s = T::one() / (var + T::of(LN_EPS)).sqrt();
        rstd[r] = s;
        for j in 0..d {
            let n = (row[j] - mean) * s;
            normalized[r * d + j] = n;
            output[r * d + j] = n * gain[j] + bias[j];
        }
    }
    NormCache {
        normalized,
        rstd,
        output,
    }
}

fn layer_norm_backward<T: Scalar>(cache: &NormCache<T>, dy: &[T], d: usize, p: &[T], np: &NormParams, grads: &mut [T]) -> Vec<T> {
    let gain = &p[np.gain.clone()];
    let rows = dy.len() / d;
    {
        let gg = &mut grads[np.gain.clone()];
        for r in 0..rows {
            for j in 0..d {
                gg[j] += dy[r * d + j] * cache.normalized[r * d + j];
            }
        }
    }
    tensor::accumulate_column_sums(dy, &mut grads[np.bias.clone()]);
    let inv_d = T::one() / T::of(d as f64);
    let mut dx = vec![T::zero(); dy.len()];
    let mut dxhat = vec![T::zero(); d];
    for r in 0..rows {
        let xh = &cache.normalized[r * d..(r + 1) * d];
        let mut mean_d = T::zero();
        let mut mean_dx = T::zero();
        for j in 0..d {
            dxhat[j] = dy[r * d + j] * gain[j];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xh[j];
        }
        mean_d = mean_d * inv_d;
        mean_dx = mean_dx * inv_d;
        let s = cache.rstd[r];
        for j in 0..d {
            dx[r * d + j] = s * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    dx
}

struct AttentionCache<T> {
    norm: NormCache<T>,
    qkv: Vec<T>,
    /// `[group][head][i][j]`.
    probs: Vec<T>,
    context: Vec<T>,
}

fn attention_forward<T: Scalar>(
    x: &[T],
    d: usize,
    heads: usize,
    grouping: Grouping,
    p: &[T],
    ap: &AttentionParams,
) -> (Vec<T>, AttentionCache<T>) {
    let rows = x.len() / d;
    let norm = layer_norm(x, d, &p[ap.norm.gain.clone()], &p[ap.norm.bias.clone()]);
    let mut qkv = vec![T::zero(); rows * 3 * d];
    tensor::matmul(&norm.output, &p[ap.qkv_weight.clone()], &mut qkv, rows, d, 3 * d, false);
    tensor::add_row_bias(&mut qkv, &p[ap.qkv_bias.clone()]);

    let hd = d / heads;
    let scale = T::one() / T::of(hd as f64).sqrt();
    let size = grouping.size();
    let step = grouping.step() as isize;
    let qs = 3 * d as isize;
    let mut probs = vec![T::zero(); grouping.groups() * heads * size * size];
    let mut context = vec![T::zero(); rows * d];
    for g in 0..grouping.groups() {
        let base = grouping.row(g, 0);
        for h in 0..heads {
            let pb = (g * heads + h) * size * size;
            let pr = &mut probs[pb..pb + size * size];
            let q = &qkv[base * 3 * d + h * hd..];
            let k = &qkv[base * 3 * d + d + h * hd..];
            let v = &qkv[base * 3 * d + 2 * d + h * hd..];
            // scores = scale * Q K^T
            T::gemm(size, hd, size, scale, q, step * qs, 1, k, 1, step * qs, T::zero(), pr, size as isize, 1);
            for row in pr.chunks_exact_mut(size) {
                tensor::softmax_in_place(row);
            }
            let ctx = &mut context[base * d + h * hd..];
            T::gemm(size, size, hd, T::one(), pr, size as isize, 1, v, step * qs, 1, T::zero(), ctx, step * d as isize, 1);
        }
    }
    let mut out = vec![T::zero(); rows * d];
    tensor::matmul(&context, &p[ap.out_weight.clone()], &mut out, rows, d, d, false);
    tensor::add_row_bias(&mut out, &p[ap.out_bias.clone()]);
    (
        out,
        AttentionCache {
            norm,
            qkv,
            probs,
            context,
        },
    )
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Scalar>(
    cache: &AttentionCache<T>,
    dout: &[T],
    d: usize,
    heads: usize,
    grouping: Grouping,
    p: &[T],
    ap: &AttentionParams,
    grads: &mut [T],
) -> Vec<T> {
    let rows = dout.len() / d;
    tensor::matmul_tn(&cache.context, dout, &mut grads[ap.out_weight.clone()], d, rows, d, true);
    tensor::accumulate_column_sums(dout, &mut grads[ap.out_bias.clone()]);
    let mut dctx = vec![T::zero(); rows * d];
    tensor::matmul_nt(dout, &p[ap.out_weight.clone()], &mut dctx, rows, d, d, false);

    let hd = d / heads;
    let scale = T::one() / T::of(hd as f64).sqrt();
    let size = grouping.size();
    let step = grouping.step() as isize;
    let qs = 3 * d as isize;
    let ds = d as isize;
    let sz = size as isize;
    let qkv = &cache.qkv;
    let mut dqkv = vec![T::zero(); rows * 3 * d];
    let mut dp = vec![T::zero(); size * size];
    for g in 0..grouping.groups() {
        let base = grouping.row(g, 0);
        for h in 0..heads {
            let pb = (g * heads + h) * size * size;
            let pr = &cache.probs[pb..pb + size * size];
            let qo = base * 3 * d + h * hd;
            let (ko, vo) = (qo + d, qo + 2 * d);
            let dc = &dctx[base * d + h * hd..];
            // dP = dC V^T ; dV += P^T dC
            T::gemm(size, hd, size, T::one(), dc, step * ds, 1, &qkv[vo..], 1, step * qs, T::zero(), &mut dp, sz, 1);
            T::gemm(size, size, hd, T::one(), pr, 1, sz, dc, step * ds, 1, T::one(), &mut dqkv[vo..], step * qs, 1);
            // dS = P * (dP - rowsum(P * dP)), pre-multiplied by the score scale.
            for (prow, drow) in pr.chunks_exact(size).zip(dp.chunks_exact_mut(size)) {
                let dot = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum::<T>();
                for (dv, &pv) in drow.iter_mut().zip(prow) {
                    *dv = pv * (*dv - dot) * scale;
                }
            }
            // dQ += dS K ; dK += dS^T Q
            T::gemm(size, size, hd, T::one(), &dp, sz, 1, &qkv[ko..], step * qs, 1, T::one(), &mut dqkv[qo..], step * qs, 1);
            T::gemm(size, size, hd, T::one(), &dp, 1, sz, &qkv[qo..], step * qs, 1, T::one(), &mut dqkv[ko..], step * qs, 1);
        }
    }
    let stride = 3 * d;
    tensor::matmul_tn(&cache.norm.output, &dqkv, &mut grads[ap.qkv_weight.clone()], d, rows, stride, true);
    tensor::accumulate_column_sums(&dqkv, &mut grads[ap.qkv_bias.clone()]);
    let mut dnorm = vec![T::zero(); rows * d];
    tensor::matmul_nt(&dqkv, &p[ap.qkv_weight.clone()], &mut dnorm, rows, stride, d, false);
    layer_norm_backward(&cache.norm, &dnorm, d, p, &ap.norm, grads)
}

struct MlpCache<T> {
    norm: NormCache<T>,
    pre: Vec<T>,
    act: Vec<T>,
    tanh: Vec<T>,
}

fn mlp_forward<T: Scalar>(x: &[T], d: usize, p: &[T], mp: &MlpParams) -> (Vec<T>, MlpCache<T>) {
    let rows = x.len() / d;
    let norm = layer_norm(x, d, &p[mp.norm.gain.clone()], &p[mp.norm.bias.clone()]);
    let wide = 4 * d;
    let mut pre = vec![T::zero(); rows * wide];
    tensor::matmul(&norm.output, &p[mp.fc1_weight.clone()], &mut pre, rows, d, wide, false);
    tensor::add_row_bias(&mut pre, &p[mp.fc1_bias.clone()]);
    let mut act = vec![T::zero(); pre.len()];
    let mut tanh = vec![T::zero(); pre.len()];
    for ((a, t), &u) in act.iter_mut().zip(tanh.iter_mut()).zip(&pre) {
        (*a, *t) = tensor::gelu(u);
    }
    let mut out = vec![T::zero(); rows * d];
    tensor::matmul(&act, &p[mp.fc2_weight.clone()], &mut out, rows, wide, d, false);
    tensor::add_row_bias(&mut out, &p[mp.fc2_bias.clone()]);
    (out, MlpCache { norm, pre, act, tanh })
}

fn mlp_backward<T: Scalar>(cache: &MlpCache<T>, dout: &[T], d: usize, p: &[T], mp: &MlpParams, grads: &mut [T]) -> Vec<T> {
    let rows = dout.len() / d;
    let wide = 4 * d;
    tensor::matmul_tn(&cache.act, dout, &mut grads[mp.fc2_weight.clone()], wide, rows, d, true);
    tensor::accumulate_column_sums(dout, &mut grads[mp.fc2_bias.clone()]);
    let mut dact = vec![T::zero(); rows * wide];
    tensor::matmul_nt(dout, &p[mp.fc2_weight.clone()], &mut dact, rows, d, wide, false);
    for ((g, &u), &t) in dact.iter_mut().zip(&cache.pre).zip(&cache.tanh) {
        *g *= tensor::gelu_grad(u, t);
    }
    tensor::matmul_tn(&cache.norm.output, &dact, &mut grads[mp.fc1_weight.clone()], d, rows, wide, true);
    tensor::accumulate_column_sums(&dact, &mut grads[mp.fc1_bias.clone()]);
    let mut dnorm = vec![T::zero(); rows * d];
    tensor::matmul_nt(&dact, &p[mp.fc1_weight.clone()], &mut dnorm, rows, wide, d, false);
    layer_norm_backward(&cache.norm, &dnorm, d, p, &mp.norm, grads)
}

struct BlockCache<T> {
    temporal: Option<AttentionCache<T>>,
    spatial: Option<AttentionCache<T>>,
    mlp: Option<MlpCache<T>>,
}

/// Saved activations of one forward pass.
pub struct BackboneCache<T> {
    blocks: Vec<BlockCache<T>>,
}

fn add_assign<T: Scalar>(x: &mut [T], y: &[T]) {
    for (a, &b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

impl BackboneParams {
    pub fn temporal_grouping(&self) -> Grouping {
        Grouping::Temporal {
            frames: self.layout.frames(),
            per_frame: self.layout.tokens_per_frame(),
        }
    }

    pub fn spatial_grouping(&self) -> Grouping {
        Grouping::Spatial {
            frames: self.layout.frames(),
            per_frame: self.layout.tokens_per_frame(),
        }
    }

    /// Output embeddings `(N * L) x d` for fused input tokens.
    pub fn forward<T: Scalar>(&self, fused: &[T], p: &[T], sublayers: Sublayers) -> Result<(Vec<T>, BackboneCache<T>)> {
        let d = self.hidden;
        if fused.len() != self.layout.total_tokens() * d {
            return Err(Error::shape(
                "backbone",
                format!(
                    "{} values do not match position table {} x {d}",
                    fused.len(),
                    self.layout.total_tokens()
                ),
            ));
        }
        let mut x = fused.to_vec();
        add_assign(&mut x, &p[self.position.clone()]);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let mut cache = BlockCache {
                temporal: None,
                spatial: None,
                mlp: None,
            };
            if sublayers.temporal {
                let (y, c) = attention_forward(&x, d, self.heads, self.temporal_grouping(), p, &b.temporal);
                add_assign(&mut x, &y);
                cache.temporal = Some(c);
            }
            if sublayers.spatial {
                let (y, c) = attention_forward(&x, d, self.heads, self.spatial_grouping(), p, &b.spatial);
                add_assign(&mut x, &y);
                cache.spatial = Some(c);
            }
            if sublayers.mlp {
                let (y, c) = mlp_forward(&x, d, p, &b.mlp);
                add_assign(&mut x, &y);
                cache.mlp = Some(c);
            }
            blocks.push(cache);
        }
        Ok((x, BackboneCache { blocks }))
    }

    /// Accumulates parameter gradients; returns the gradient of the fused input.
    pub fn backward<T: Scalar>(&self, cache: &BackboneCache<T>, dout: &[T], p: &[T], grads: &mut [T]) -> Vec<T> {
        let d = self.hidden;
        let mut dx = dout.to_vec();
        for (b, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            if let Some(mc) = &c.mlp {
                let g = mlp_backward(mc, &dx, d, p, &b.mlp, grads);
                add_assign(&mut dx, &g);
            }
            if let Some(sc) = &c.spatial {
                let g = attention_backward(sc, &dx, d, self.heads, self.spatial_grouping(), p, &b.spatial, grads);
                add_assign(&mut dx, &g);
            }
            if let Some(tc) = &c.temporal {
                let g = attention_backward(tc, &dx, d, self.heads, self.temporal_grouping(), p, &b.temporal, grads);
                add_assign(&mut dx, &g);
            }
        }
        add_assign(&mut grads[self.position.clone()], &dx);
        dx
    }
}
