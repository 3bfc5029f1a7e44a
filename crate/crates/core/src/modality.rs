//! Discrete modalities and the label-map containers that carry them.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A named discrete per-pixel modality (semantic classes, depth bins, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: String,
    /// Size of the label alphabet.
    pub num_labels: usize,
    /// Width of the per-pixel embedding (first tokenizer stage).
    pub pixel_embed_dim: usize,
    /// Width of this modality's patch tokens before fusion.
    pub token_embed_dim: usize,
    pub loss_weight: f64,
    /// Classes scored by the movable-object mIoU, if any.
    pub movable_label_ids: Option<BTreeSet<u32>>,
}

impl ModalitySpec {
    pub fn new(name: impl Into<String>, num_labels: usize, pixel_embed_dim: usize, token_embed_dim: usize) -> Self {
        ModalitySpec {
            name: name.into(),
            num_labels,
            pixel_embed_dim,
            token_embed_dim,
            loss_weight: 1.0,
            movable_label_ids: None,
        }
    }

    pub fn with_movable(mut self, ids: impl IntoIterator<Item = u32>) -> Self {
        self.movable_label_ids = Some(ids.into_iter().collect());
        self
    }

    pub fn with_loss_weight(mut self, w: f64) -> Self {
        self.loss_weight = w;
        self
    }

    pub fn violations(&self, key: &str) -> Vec<String> {
        let mut out = Vec::new();
        if self.name.is_empty() || self.name.contains(char::is_whitespace) {
            out.push(format!("{key}.name: must be a non-empty identifier"));
        }
        if self.num_labels < 2 {
            out.push(format!("{key}.num_labels: {} must be >= 2", self.num_labels));
        }
        if self.num_labels > u16::MAX as usize + 1 {
            out.push(format!("{key}.num_labels: {} exceeds 65536", self.num_labels));
        }
        if self.pixel_embed_dim == 0 {
            out.push(format!("{key}.pixel_embed_dim: must be >= 1"));
        }
        if self.token_embed_dim == 0 {
            out.push(format!("{key}.token_embed_dim: must be >= 1"));
        }
        if !(self.loss_weight >= 0.0 && self.loss_weight.is_finite()) {
            out.push(format!("{key}.loss_weight: {} must be a finite value >= 0", self.loss_weight));
        }
        if let Some(ids) = &self.movable_label_ids {
            if let Some(bad) = ids.iter().find(|&&id| id as usize >= self.num_labels) {
                out.push(format!(
                    "{key}.movable_label_ids: id {bad} not in 0..{}",
                    self.num_labels
                ));
            }
        }
        out
    }
}

/// Label storage in the narrowest unsigned width that holds the largest value.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Labels {
    U8(Vec<u8>),
    U16(Vec<u16>),
}

impl Labels {
    pub fn zeros(len: usize, max_value: usize) -> Self {
        if max_value <= u8::MAX as usize {
            Labels::U8(vec![0; len])
        } else {
            Labels::U16(vec![0; len])
        }
    }

    pub fn from_values(values: &[u16], max_value: usize) -> Self {
        if max_value <= u8::MAX as usize {
            Labels::U8(values.iter().map(|&v| v as u8).collect())
        } else {
            Labels::U16(values.to_vec())
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Labels::U8(v) => v.len(),
            Labels::U16(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn get(&self, i: usize) -> u16 {
        match self {
            Labels::U8(v) => v[i] as u16,
            Labels::U16(v) => v[i],
        }
    }

    #[inline]
    pub fn set(&mut self, i: usize, value: u16) {
        match self {
            Labels::U8(v) => v[i] = value as u8,
            Labels::U16(v) => v[i] = value,
        }
    }

    pub fn iter(&self) -> Box<dyn Iterator<Item = u16> + '_> {
        match self {
            Labels::U8(v) => Box::new(v.iter().map(|&x| x as u16)),
            Labels::U16(v) => Box::new(v.iter().copied()),
        }
    }

    pub fn to_vec(&self) -> Vec<u16> {
        self.iter().collect()
    }

    pub fn bit_width(&self) -> u8 {
        match self {
            Labels::U8(_) => 8,
            Labels::U16(_) => 16,
        }
    }
}

/// One H x W frame of discrete labels.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Labels,
}

impl LabelMap {
    pub fn filled(height: usize, width: usize, value: u16, max_value: usize) -> Self {
        let mut labels = Labels::zeros(height * width, max_value.max(value as usize));
        if value != 0 {
            for i in 0..height * width {
                labels.set(i, value);
            }
        }
        LabelMap { height, width, labels }
    }

    pub fn from_values(height: usize, width: usize, values: &[u16], max_value: usize) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape(
                "label map",
                format!("{} values for {height}x{width}", values.len()),
            ));
        }
        if let Some(&v) = values.iter().find(|&&v| v as usize > max_value) {
            return Err(Error::range("label value", format!("{v} > {max_value}")));
        }
        Ok(LabelMap {
            height,
            width,
            labels: Labels::from_values(values, max_value),
        })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u16 {
        self.labels.get(y * self.width + x)
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u16) {
        self.labels.set(y * self.width + x, v)
    }

    pub fn max_label(&self) -> u16 {
        self.labels.iter().max().unwrap_or(0)
    }

    /// Nearest-neighbour resampling; the only resampling that never invents labels.
    pub fn resize_nearest(&self, height: usize, width: usize) -> LabelMap {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut labels = match &self.labels {
            Labels::U8(_) => Labels::U8(vec![0; height * width]),
            Labels::U16(_) => Labels::U16(vec![0; height * width]),
        };
        for y in 0..height {
            let sy = ((2 * y + 1) * self.height / (2 * height)).min(self.height - 1);
            for x in 0..width {
                let sx = ((2 * x + 1) * self.width / (2 * width)).min(self.width - 1);
                labels.set(y * width + x, self.get(sy, sx));
            }
        }
        LabelMap { height, width, labels }
    }
}

/// N consecutive (subsampled) frames of one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub modality: ModalitySpec,
    pub frames: Vec<LabelMap>,
    /// Source-video frame numbers, strictly increasing with constant stride.
    pub frame_indices: Vec<u32>,
}

impl FrameSequence {
    pub fn new(modality: ModalitySpec, frames: Vec<LabelMap>, frame_indices: Vec<u32>) -> Result<Self> {
        if frames.len() != frame_indices.len() {
            return Err(Error::shape(
                "frame sequence",
                format!("{} frames but {} indices", frames.len(), frame_indices.len()),
            ));
        }
        check_stride(&frame_indices)?;
        if let Some(first) = frames.first() {
            for f in &frames {
                if f.height != first.height || f.width != first.width {
                    return Err(Error::shape(
                        "frame sequence",
                        format!(
                            "frame {}x{} differs from {}x{}",
                            f.height, f.width, first.height, first.width
                        ),
                    ));
                }
                if f.max_label() as usize >= modality.num_labels {
                    return Err(Error::range(
                        "label value",
                        format!(
                            "{} >= num_labels {} for modality {}",
                            f.max_label(),
                            modality.num_labels,
                            modality.name
                        ),
                    ));
                }
            }
        }
        Ok(FrameSequence {
            modality,
            frames,
            frame_indices,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames.first().map_or(0, |f| f.height)
    }

    pub fn width(&self) -> usize {
        self.frames.first().map_or(0, |f| f.width)
    }

    /// Source-frame stride between consecutive entries (1 for a single frame).
    pub fn stride(&self) -> u32 {
        match self.frame_indices.as_slice() {
            [a, b, ..] => b - a,
            _ => 1,
        }
    }
}

pub(crate) fn check_stride(indices: &[u32]) -> Result<()> {
    if indices.len() < 2 {
        return Ok(());
    }
    let stride = indices[1] as i64 - indices[0] as i64;
    if stride <= 0 {
        return Err(Error::range("frame indices", "must be strictly increasing"));
    }
    for w in indices.windows(2) {
        if w[1] as i64 - w[0] as i64 != stride {
            return Err(Error::range(
                "frame indices",
                format!("{indices:?} do not have a constant stride"),
            ));
        }
    }
    Ok(())
}

/// All modalities of one clip, aligned frame by frame.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRecord {
    pub modalities: Vec<FrameSequence>,
    pub provenance: String,
    pub subsample: u32,
}

impl SequenceRecord {
    pub fn new(modalities: Vec<FrameSequence>, provenance: impl Into<String>, subsample: u32) -> Result<Self> {
        if let Some(first) = modalities.first() {
            for m in &modalities[1..] {
                if m.frame_indices != first.frame_indices
                    || m.height() != first.height()
                    || m.width() != first.width()
                {
                    return Err(Error::shape(
                        "sequence record",
                        format!(
                            "modality {} not aligned with {}",
                            m.modality.name, first.modality.name
                        ),
                    ));
                }
            }
        }
        Ok(SequenceRecord {
            modalities,
            provenance: provenance.into(),
            subsample,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.modalities.first().map_or(0, |m| m.len())
    }

    pub fn frame_indices(&self) -> &[u32] {
        self.modalities
            .first()
            .map_or(&[][..], |m| m.frame_indices.as_slice())
    }

    pub fn modality(&self, name: &str) -> Option<&FrameSequence> {
        self.modalities.iter().find(|m| m.modality.name == name)
    }

    /// Frames `start..end` of every modality.
    pub fn slice(&self, start: usize, end: usize) -> Result<SequenceRecord> {
        if start >= end || end > self.num_frames() {
            return Err(Error::range(
                "frame slice",
                format!("{start}..{end} of {}", self.num_frames()),
            ));
        }
        let modalities = self
            .modalities
            .iter()
            .map(|m| FrameSequence {
                modality: m.modality.clone(),
                frames: m.frames[start..end].to_vec(),
                frame_indices: m.frame_indices[start..end].to_vec(),
            })
            .collect();
        Ok(SequenceRecord {
            modalities,
            provenance: self.provenance.clone(),
            subsample: self.subsample,
        })
    }

    /// Resample every frame of every modality to `height x width` (nearest).
    pub fn resized(&self, height: usize, width: usize) -> SequenceRecord {
        let modalities = self
            .modalities
            .iter()
            .map(|m| FrameSequence {
                modality: m.modality.clone(),
                frames: m.frames.iter().map(|f| f.resize_nearest(height, width)).collect(),
                frame_indices: m.frame_indices.clone(),
            })
            .collect();
        SequenceRecord {
            modalities,
            provenance: self.provenance.clone(),
            subsample: self.subsample,
        }
    }
}
