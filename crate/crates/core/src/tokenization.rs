//! Two-stage per-modality tokenizer, mask-token substitution, modality fusion
//! and the tied per-modality decoder.
//!
//! Stage one looks every pixel label up in a small `num_labels x C` table.
//! Stage two cuts the per-pixel embeddings into `P x P` patches, flattens
//! each patch pixel by pixel in row-major order with the `C` channels of a
//! pixel kept contiguous, and applies an affine projection to `d_I`.
//!
//! The decoder mirrors this: a linear map `d -> P^2 * C`, an un-flattening
//! that is the exact inverse of the stage-two ordering, then the transpose of
//! the *same* pixel table followed by a softmax.

use std::ops::Range;

use crate::config::Fusion;
use crate::error::{Error, Result};
use crate::layout::TokenLayout;
use crate::modality::{FrameSequence, LabelMap, ModalitySpec};
use crate::params::{Init, ParamLayout};
use crate::tensor::{self, Scalar};

const INIT_STD: f64 = 0.02;

/// Parameter ranges owned by one modality: embedder, mask token and decoder head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityParams {
    pub spec: ModalitySpec,
    pub pixel_table: Range<usize>,
    pub patch_weight: Range<usize>,
    pub patch_bias: Range<usize>,
    pub mask_embedding: Range<usize>,
    pub head_weight: Range<usize>,
    pub head_bias: Range<usize>,
}

impl ModalityParams {
    pub fn register(params: &mut ParamLayout, spec: &ModalitySpec, patch: usize, hidden: usize) -> Self {
        let c = spec.pixel_embed_dim;
        let d = spec.token_embed_dim;
        let flat = patch * patch * c;
        let n = &spec.name;
        ModalityParams {
            spec: spec.clone(),
            pixel_table: params.push(format!("embed.{n}.pixel_table"), &[spec.num_labels, c], Init::Normal(INIT_STD)),
            patch_weight: params.push(format!("embed.{n}.patch_projection.weight"), &[flat, d], Init::Normal(INIT_STD)),
            patch_bias: params.push(format!("embed.{n}.patch_projection.bias"), &[d], Init::Zeros),
            mask_embedding: params.push(format!("embed.{n}.mask_embedding"), &[d], Init::Zeros),
            head_weight: params.push(format!("decode.{n}.projection.weight"), &[hidden, flat], Init::Normal(INIT_STD)),
            head_bias: params.push(format!("decode.{n}.projection.bias"), &[flat], Init::Zeros),
        }
    }

    pub fn embedder<'a, T: Scalar>(&self, p: &'a [T]) -> ModalityEmbedder<'a, T> {
        ModalityEmbedder {
            num_labels: self.spec.num_labels,
            pixel_dim: self.spec.pixel_embed_dim,
            token_dim: self.spec.token_embed_dim,
            pixel_table: &p[self.pixel_table.clone()],
            patch_weight: &p[self.patch_weight.clone()],
            patch_bias: &p[self.patch_bias.clone()],
            mask_embedding: &p[self.mask_embedding.clone()],
        }
    }

    pub fn head<'a, T: Scalar>(&self, p: &'a [T]) -> DecoderHead<'a, T> {
        DecoderHead {
            weight: &p[self.head_weight.clone()],
            bias: &p[self.head_bias.clone()],
        }
    }
}

/// Borrowed view of one modality's embedder parameters.
#[derive(Debug, Clone, Copy)]
pub struct ModalityEmbedder<'a, T> {
    pub num_labels: usize,
    pub pixel_dim: usize,
    pub token_dim: usize,
    /// `num_labels x C`; the decoder reads the same storage transposed.
    pub pixel_table: &'a [T],
    /// `(P^2 * C) x d_I`.
    pub patch_weight: &'a [T],
    pub patch_bias: &'a [T],
    pub mask_embedding: &'a [T],
}

/// First decoder linear, `d -> P^2 * C`. Not tied to the patch projection.
#[derive(Debug, Clone, Copy)]
pub struct DecoderHead<'a, T> {
    pub weight: &'a [T],
    pub bias: &'a [T],
}

/// Fused transformer input, `(N * L) x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedTokens<T> {
    pub embeddings: Vec<T>,
    pub rows: usize,
    pub dim: usize,
    pub fusion: Fusion,
}

/// Position of pixel `p` (row-major within its patch) of token `t` in an
/// `N x H x W` image stack.
#[inline]
pub fn token_pixel_to_image(layout: &TokenLayout, token: usize, pixel: usize) -> usize {
    let l = layout.tokens_per_frame();
    let frame = token / l;
    let within = token % l;
    let (r, c) = (within / layout.grid_cols(), within % layout.grid_cols());
    let (py, px) = (pixel / layout.patch, pixel % layout.patch);
    frame * layout.pixels_per_frame() + (r * layout.patch + py) * layout.width + c * layout.patch + px
}

fn check_frames(frames: &[&LabelMap], num_labels: usize, layout: &TokenLayout) -> Result<()> {
    if frames.len() != layout.frames() {
        return Err(Error::shape(
            "embed",
            format!("{} frames for a {}-frame layout", frames.len(), layout.frames()),
        ));
    }
    for f in frames {
        if f.height != layout.height || f.width != layout.width {
            return Err(Error::shape(
                "embed",
                format!(
                    "frame {}x{} does not match layout {}x{}",
                    f.height, f.width, layout.height, layout.width
                ),
            ));
        }
        if f.max_label() as usize >= num_labels {
            return Err(Error::range("label value", format!("{} >= {num_labels}", f.max_label())));
        }
    }
    Ok(())
}

/// Stage one plus patch flattening: `(N * L) x (P^2 * C)`.
pub fn gather_patches<T: Scalar>(frames: &[&LabelMap], emb: &ModalityEmbedder<'_, T>, layout: &TokenLayout) -> Vec<T> {
    let c = emb.pixel_dim;
    let p = layout.patch;
    let flat = p * p * c;
    let l = layout.tokens_per_frame();
    let cols = layout.grid_cols();
    let mut out = vec![T::zero(); frames.len() * l * flat];
    for (f, frame) in frames.iter().enumerate() {
        for t in 0..l {
            let (r, col) = (t / cols, t % cols);
            let row = &mut out[(f * l + t) * flat..(f * l + t + 1) * flat];
            for py in 0..p {
                for px in 0..p {
                    let label = frame.get(r * p + py, col * p + px) as usize;
                    let dst = (py * p + px) * c;
                    row[dst..dst + c].copy_from_slice(&emb.pixel_table[label * c..(label + 1) * c]);
                }
            }
        }
    }
    out
}

/// Per-modality tokens `(N * L) x d_I` for a list of frames.
pub fn embed_frames<T: Scalar>(frames: &[&LabelMap], emb: &ModalityEmbedder<'_, T>, layout: &TokenLayout) -> Result<Vec<T>> {
    check_frames(frames, emb.num_labels, layout)?;
    let patches = gather_patches(frames, emb, layout);
    Ok(project_patches(&patches, emb, layout))
}

pub(crate) fn project_patches<T: Scalar>(patches: &[T], emb: &ModalityEmbedder<'_, T>, layout: &TokenLayout) -> Vec<T> {
    let flat = layout.patch_area() * emb.pixel_dim;
    let rows = patches.len() / flat;
    let mut z = vec![T::zero(); rows * emb.token_dim];
    tensor::matmul(patches, emb.patch_weight, &mut z, rows, flat, emb.token_dim, false);
    tensor::add_row_bias(&mut z, emb.patch_bias);
    z
}

pub fn embed_modality<T: Scalar>(frames: &FrameSequence, emb: &ModalityEmbedder<'_, T>, layout: &TokenLayout) -> Result<Vec<T>> {
    let refs: Vec<&LabelMap> = frames.frames.iter().collect();
    embed_frames(&refs, emb, layout)
}

/// Replace masked future-frame tokens by the mask embedding, in place.
pub fn apply_mask_in_place<T: Scalar>(
    tokens: &mut [T],
    mask: &[bool],
    emb: &ModalityEmbedder<'_, T>,
    layout: &TokenLayout,
) -> Result<()> {
    let d = emb.token_dim;
    if mask.len() != layout.future_tokens() {
        return Err(Error::shape(
            "apply_mask",
            format!("mask length {} != N_p * L = {}", mask.len(), layout.future_tokens()),
        ));
    }
    if tokens.len() != layout.total_tokens() * d {
        return Err(Error::shape(
            "apply_mask",
            format!("{} values for {} tokens of width {d}", tokens.len(), layout.total_tokens()),
        ));
    }
    let first = layout.first_future_token();
    for (j, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let row = first + j;
        tokens[row * d..(row + 1) * d].copy_from_slice(emb.mask_embedding);
    }
    Ok(())
}

pub fn apply_mask<T: Scalar>(tokens: &[T], mask: &[bool], emb: &ModalityEmbedder<'_, T>, layout: &TokenLayout) -> Result<Vec<T>> {
    let mut out = tokens.to_vec();
    apply_mask_in_place(&mut out, mask, emb, layout)?;
    Ok(out)
}

/// Merge per-modality tokens (each `rows x widths[i]`) into `rows x hidden`.
pub fn fuse<T: Scalar>(inputs: &[&[T]], widths: &[usize], rows: usize, mode: Fusion, hidden: usize) -> Result<FusedTokens<T>> {
    if inputs.len() != widths.len() || inputs.is_empty() {
        return Err(Error::shape("fuse", "need one width per input and at least one input"));
    }
    for (x, &w) in inputs.iter().zip(widths) {
        if x.len() != rows * w {
            return Err(Error::shape("fuse", format!("input of {} values is not {rows} x {w}", x.len())));
        }
    }
    let mut out = vec![T::zero(); rows * hidden];
    match mode {
        Fusion::Concat => {
            let sum: usize = widths.iter().sum();
            if sum != hidden {
                return Err(Error::shape("fuse", format!("CONCAT widths sum to {sum}, hidden is {hidden}")));
            }
            let mut col = 0;
            for (x, &w) in inputs.iter().zip(widths) {
                for r in 0..rows {
                    out[r * hidden + col..r * hidden + col + w].copy_from_slice(&x[r * w..(r + 1) * w]);
                }
                col += w;
            }
        }
        Fusion::Add => {
            if let Some(&w) = widths.iter().find(|&&w| w != hidden) {
                return Err(Error::shape("fuse", format!("ADD needs width {hidden}, got {w}")));
            }
            for x in inputs {
                for (o, &v) in out.iter_mut().zip(x.iter()) {
                    *o += v;
                }
            }
        }
    }
    Ok(FusedTokens {
        embeddings: out,
        rows,
        dim: hidden,
        fusion: mode,
    })
}

/// Split a fused-gradient back into per-modality gradients.
pub(crate) fn unfuse_grad<T: Scalar>(d_fused: &[T], widths: &[usize], rows: usize, mode: Fusion, hidden: usize) -> Vec<Vec<T>> {
    match mode {
        Fusion::Add => widths.iter().map(|_| d_fused.to_vec()).collect(),
        Fusion::Concat => {
            let mut col = 0;
            widths
                .iter()
                .map(|&w| {
                    let mut g = vec![T::zero(); rows * w];
                    for r in 0..rows {
                        g[r * w..(r + 1) * w].copy_from_slice(&d_fused[r * hidden + col..r * hidden + col + w]);
                    }
                    col += w;
                    g
                })
                .collect()
        }
    }
}

/// Intermediate decoder state for the rows it was applied to.
pub(crate) struct DecodeCache<T> {
    /// `rows x (P^2 * C)`, i.e. `(rows * P^2) x C` per-pixel embeddings.
    pub pixel_embeddings: Vec<T>,
}

/// Logits in token-pixel order, `(rows * P^2) x num_labels`.
pub(crate) fn decode_logits<T: Scalar>(
    hidden_rows: &[T],
    hidden: usize,
    emb: &ModalityEmbedder<'_, T>,
    head: &DecoderHead<'_, T>,
    layout: &TokenLayout,
) -> (Vec<T>, DecodeCache<T>) {
    let c = emb.pixel_dim;
    let flat = layout.patch_area() * c;
    let rows = hidden_rows.len() / hidden;
    let mut y = vec![T::zero(); rows * flat];
    tensor::matmul(hidden_rows, head.weight, &mut y, rows, hidden, flat, false);
    tensor::add_row_bias(&mut y, head.bias);
    let pixels = rows * layout.patch_area();
    let mut logits = vec![T::zero(); pixels * emb.num_labels];
    // Tied projection: logits = e * pixel_table^T.
    tensor::matmul_nt(&y, emb.pixel_table, &mut logits, pixels, c, emb.num_labels, false);
    (logits, DecodeCache { pixel_embeddings: y })
}

/// Backward through [`decode_logits`]. Accumulates parameter gradients and
/// returns the gradient with respect to `hidden_rows`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn decode_backward<T: Scalar>(
    hidden_rows: &[T],
    hidden: usize,
    cache: &DecodeCache<T>,
    d_logits: &[T],
    params: &ModalityParams,
    p: &[T],
    grads: &mut [T],
    layout: &TokenLayout,
) -> Vec<T> {
    let emb = params.embedder(p);
    let head = params.head(p);
    let c = emb.pixel_dim;
    let labels = emb.num_labels;
    let flat = layout.patch_area() * c;
    let rows = hidden_rows.len() / hidden;
    let pixels = rows * layout.patch_area();

    let mut dy = vec![T::zero(); rows * flat];
    tensor::matmul(d_logits, emb.pixel_table, &mut dy, pixels, labels, c, false);
    tensor::matmul_tn(d_logits, &cache.pixel_embeddings, &mut grads[params.pixel_table.clone()], labels, pixels, c, true);
    tensor::matmul_tn(hidden_rows, &dy, &mut grads[params.head_weight.clone()], hidden, rows, flat, true);
    tensor::accumulate_column_sums(&dy, &mut grads[params.head_bias.clone()]);
    let mut dh = vec![T::zero(); rows * hidden];
    tensor::matmul_nt(&dy, head.weight, &mut dh, rows, flat, hidden, false);
    dh
}

/// Backward through embedding and masking. `d_tokens` is the gradient of the
/// masked per-modality tokens; masked rows feed the mask embedding only.
pub(crate) fn embed_backward<T: Scalar>(
    frames: &[&LabelMap],
    mask: &[bool],
    mut d_tokens: Vec<T>,
    params: &ModalityParams,
    p: &[T],
    grads: &mut [T],
    layout: &TokenLayout,
) {
    let emb = params.embedder(p);
    let d = emb.token_dim;
    let c = emb.pixel_dim;
    let pp = layout.patch;
    let flat = layout.patch_area() * c;
    let rows = layout.total_tokens();
    let first = layout.first_future_token();
    {
        let gm = &mut grads[params.mask_embedding.clone()];
        for (j, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            let row = first + j;
            for (g, v) in gm.iter_mut().zip(&mut d_tokens[row * d..(row + 1) * d]) {
                *g += *v;
                *v = T::zero();
            }
        }
    }
    let patches = gather_patches(frames, &emb, layout);
    tensor::matmul_tn(&patches, &d_tokens, &mut grads[params.patch_weight.clone()], flat, rows, d, true);
    tensor::accumulate_column_sums(&d_tokens, &mut grads[params.patch_bias.clone()]);
    let mut dx = vec![T::zero(); rows * flat];
    tensor::matmul_nt(&d_tokens, emb.patch_weight, &mut dx, rows, d, flat, false);
    let gt = &mut grads[params.pixel_table.clone()];
    let l = layout.tokens_per_frame();
    let cols = layout.grid_cols();
    for (f, frame) in frames.iter().enumerate() {
        for t in 0..l {
            let token = f * l + t;
            if token >= first && mask[token - first] {
                continue;
            }
            let (r, col) = (t / cols, t % cols);
            let src = &dx[token * flat..(token + 1) * flat];
            for py in 0..pp {
                for px in 0..pp {
                    let label = frame.get(r * pp + py, col * pp + px) as usize;
                    let o = (py * pp + px) * c;
                    for (g, &v) in gt[label * c..(label + 1) * c].iter_mut().zip(&src[o..o + c]) {
                        *g += v;
                    }
                }
            }
        }
    }
}

/// Per-pixel class distributions for every frame, `N x H x W x num_labels`.
pub fn decode_modality<T: Scalar>(
    backbone_out: &[T],
    hidden: usize,
    emb: &ModalityEmbedder<'_, T>,
    head: &DecoderHead<'_, T>,
    layout: &TokenLayout,
) -> Result<Vec<T>> {
    let rows = layout.total_tokens();
    if backbone_out.len() != rows * hidden {
        return Err(Error::shape(
            "decode",
            format!("{} values is not {rows} x {hidden}", backbone_out.len()),
        ));
    }
    if head.weight.len() != hidden * layout.patch_area() * emb.pixel_dim {
        return Err(Error::shape("decode", "head projection does not map d to P^2 * C"));
    }
    let (mut logits, _) = decode_logits(backbone_out, hidden, emb, head, layout);
    let labels = emb.num_labels;
    let pa = layout.patch_area();
    let mut out = vec![T::zero(); rows * pa * labels];
    for (i, row) in logits.chunks_exact_mut(labels).enumerate() {
        tensor::softmax_in_place(row);
        let dst = token_pixel_to_image(layout, i / pa, i % pa);
        out[dst * labels..(dst + 1) * labels].copy_from_slice(row);
    }
    Ok(out)
}
