//! Masked cross-entropy per modality and the weighted multimodal objective.
//!
//! Each modality's loss sums pixel cross-entropies over the masked
//! future-frame tokens and divides by `masked_tokens * P^2`; the total is
//! `sum_i w_i * loss_i`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::TokenLayout;
use crate::masking::MaskSet;
use crate::modality::FrameSequence;
use crate::tokenization::token_pixel_to_image;
use crate::tensor::{self, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Normalization {
    /// Divide by `masked_tokens * P^2`.
    MaskedPixelMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityLoss {
    pub name: String,
    pub loss: f64,
    pub masked_tokens: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub per_modality: Vec<ModalityLoss>,
    pub total: f64,
    pub normalization: Normalization,
}

impl LossBreakdown {
    pub fn from_parts(per_modality: Vec<ModalityLoss>) -> Self {
        let total = per_modality.iter().map(|m| m.weight * m.loss).sum();
        LossBreakdown {
            per_modality,
            total,
            normalization: Normalization::MaskedPixelMean,
        }
    }

    pub fn get(&self, name: &str) -> Option<&ModalityLoss> {
        self.per_modality.iter().find(|m| m.name == name)
    }

    /// Element-wise mean of several breakdowns with the same modalities.
    pub fn mean(items: &[LossBreakdown]) -> Option<LossBreakdown> {
        let first = items.first()?;
        let n = items.len() as f64;
        let per = first
            .per_modality
            .iter()
            .enumerate()
            .map(|(i, m)| ModalityLoss {
                name: m.name.clone(),
                loss: items.iter().map(|b| b.per_modality[i].loss).sum::<f64>() / n,
                masked_tokens: items.iter().map(|b| b.per_modality[i].masked_tokens).sum::<usize>() / items.len(),
                weight: m.weight,
            })
            .collect();
        Some(LossBreakdown::from_parts(per))
    }
}

/// Softmax cross-entropy over rows of `logits`. Returns the summed loss and
/// overwrites `logits` with `scale * (softmax - onehot)`.
pub(crate) fn softmax_cross_entropy<T: Scalar>(logits: &mut [T], targets: &[u16], labels: usize, scale: T) -> f64 {
    let mut sum = 0.0;
    for (row, &t) in logits.chunks_exact_mut(labels).zip(targets) {
        tensor::softmax_in_place(row);
        let p = row[t as usize].to_f64().unwrap_or(0.0);
        sum -= p.ln();
        for v in row.iter_mut() {
            *v *= scale;
        }
        row[t as usize] -= scale;
    }
    sum
}

fn masked_tokens(masks: &MaskSet, name: &str, layout: &TokenLayout) -> Result<Vec<usize>> {
    let m = masks
        .get(name)
        .ok_or_else(|| Error::Contract(format!("no mask for modality {name}")))?;
    if m.bits.len() != layout.future_tokens() {
        return Err(Error::shape(
            "masked_loss",
            format!("mask length {} != {}", m.bits.len(), layout.future_tokens()),
        ));
    }
    let first = layout.first_future_token();
    let tokens: Vec<usize> = m
        .bits
        .iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(j, _)| first + j)
        .collect();
    if tokens.is_empty() {
        return Err(Error::Contract(format!("empty mask for modality {name}")));
    }
    Ok(tokens)
}

fn check_targets(targets: &FrameSequence, layout: &TokenLayout) -> Result<()> {
    if targets.len() != layout.frames() || targets.height() != layout.height || targets.width() != layout.width {
        return Err(Error::shape(
            "masked_loss",
            format!(
                "targets {}x{}x{} do not match layout {}x{}x{}",
                targets.len(),
                targets.height(),
                targets.width(),
                layout.frames(),
                layout.height,
                layout.width
            ),
        ));
    }
    Ok(())
}

/// Loss from per-pixel distributions (`N x H x W x num_labels` per modality).
pub fn masked_loss<T: Scalar>(
    predictions: &[&[T]],
    targets: &[&FrameSequence],
    masks: &MaskSet,
    layout: &TokenLayout,
) -> Result<LossBreakdown> {
    if predictions.len() != targets.len() {
        return Err(Error::shape("masked_loss", "one prediction per target modality"));
    }
    let pa = layout.patch_area();
    let hw = layout.pixels_per_frame();
    let mut per = Vec::with_capacity(targets.len());
    for (pred, tgt) in predictions.iter().zip(targets) {
        check_targets(tgt, layout)?;
        let labels = tgt.modality.num_labels;
        if pred.len() != layout.frames() * hw * labels {
            return Err(Error::shape("masked_loss", "prediction is not N x H x W x num_labels"));
        }
        let tokens = masked_tokens(masks, &tgt.modality.name, layout)?;
        let mut sum = 0.0;
        for &t in &tokens {
            for px in 0..pa {
                let img = token_pixel_to_image(layout, t, px);
                let frame = &tgt.frames[img / hw];
                let label = frame.labels.get(img % hw) as usize;
                let p = pred[img * labels + label].to_f64().unwrap_or(0.0);
                sum -= p.ln();
            }
        }
        per.push(ModalityLoss {
            name: tgt.modality.name.clone(),
            loss: sum / (tokens.len() * pa) as f64,
            masked_tokens: tokens.len(),
            weight: tgt.modality.loss_weight,
        });
    }
    Ok(LossBreakdown::from_parts(per))
}

/// Loss and its gradient with respect to per-pixel logits
/// (`N x H x W x num_labels` per modality).
pub fn masked_loss_logit_grad<T: Scalar>(
    logits: &[&[T]],
    targets: &[&FrameSequence],
    masks: &MaskSet,
    layout: &TokenLayout,
) -> Result<(LossBreakdown, Vec<Vec<T>>)> {
    if logits.len() != targets.len() {
        return Err(Error::shape("masked_loss", "one logit array per target modality"));
    }
    let pa = layout.patch_area();
    let hw = layout.pixels_per_frame();
    let mut per = Vec::new();
    let mut grads = Vec::new();
    for (lg, tgt) in logits.iter().zip(targets) {
        check_targets(tgt, layout)?;
        let labels = tgt.modality.num_labels;
        if lg.len() != layout.frames() * hw * labels {
            return Err(Error::shape("masked_loss", "logits are not N x H x W x num_labels"));
        }
        let tokens = masked_tokens(masks, &tgt.modality.name, layout)?;
        let count = tokens.len() * pa;
        let w = tgt.modality.loss_weight;
        let mut g = vec![T::zero(); lg.len()];
        let mut sum = 0.0;
        for &t in &tokens {
            for px in 0..pa {
                let img = token_pixel_to_image(layout, t, px);
                let label = tgt.frames[img / hw].labels.get(img % hw);
                let row = &mut g[img * labels..(img + 1) * labels];
                row.copy_from_slice(&lg[img * labels..(img + 1) * labels]);
                sum += softmax_cross_entropy(row, &[label], labels, T::of(w / count as f64));
            }
        }
        per.push(ModalityLoss {
            name: tgt.modality.name.clone(),
            loss: sum / count as f64,
            masked_tokens: tokens.len(),
            weight: w,
        });
        grads.push(g);
    }
    Ok((LossBreakdown::from_parts(per), grads))
}
