//! The assembled model: per-modality embedders, fusion, backbone and tied
//! decoders over one flat parameter buffer.

use crate::backbone::{BackboneParams, Sublayers};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::masking::MaskSet;
use crate::modality::{LabelMap, SequenceRecord};
use crate::objective::{softmax_cross_entropy, LossBreakdown, ModalityLoss};
use crate::params::ParamLayout;
use crate::tensor::Scalar;
use crate::tokenization::{self, FusedTokens, ModalityEmbedder, ModalityParams};

#[derive(Debug, Clone)]
pub struct Futurist<T: Scalar> {
    config: ModelConfig,
    param_layout: ParamLayout,
    params: Vec<T>,
    modalities: Vec<ModalityParams>,
    backbone: BackboneParams,
}

/// Per-modality frame lists, in configuration order.
pub type FrameRefs<'a> = Vec<Vec<&'a LabelMap>>;

impl<T: Scalar> Futurist<T> {
    /// Freshly initialized model (seeded by `config.seed`).
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.ensure_valid()?;
        let (param_layout, modalities, backbone) = Self::register(&config);
        let params = param_layout.initialize(config.seed);
        Ok(Futurist {
            config,
            param_layout,
            params,
            modalities,
            backbone,
        })
    }

    /// Model with explicit parameter values (e.g. from a checkpoint).
    pub fn from_parts(config: ModelConfig, params: Vec<T>) -> Result<Self> {
        config.ensure_valid()?;
        let (param_layout, modalities, backbone) = Self::register(&config);
        if params.len() != param_layout.total() {
            return Err(Error::shape(
                "model parameters",
                format!("{} values, layout needs {}", params.len(), param_layout.total()),
            ));
        }
        Ok(Futurist {
            config,
            param_layout,
            params,
            modalities,
            backbone,
        })
    }

    fn register(config: &ModelConfig) -> (ParamLayout, Vec<ModalityParams>, BackboneParams) {
        let mut pl = ParamLayout::default();
        let modalities = config
            .modalities
            .iter()
            .map(|m| ModalityParams::register(&mut pl, m, config.layout.patch, config.hidden_dim))
            .collect();
        let backbone = BackboneParams::register(
            &mut pl,
            config.layout,
            config.hidden_dim,
            config.num_heads,
            config.num_layers,
        );
        (pl, modalities, backbone)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn param_layout(&self) -> &ParamLayout {
        &self.param_layout
    }

    pub fn modality_params(&self) -> &[ModalityParams] {
        &self.modalities
    }

    pub fn backbone_params(&self) -> &BackboneParams {
        &self.backbone
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn embedder(&self, modality: usize) -> ModalityEmbedder<'_, T> {
        self.modalities[modality].embedder(&self.params)
    }

    /// The decoder's `C x num_labels` pixel projection. It is read from the
    /// embedder's pixel table, so the two can never diverge.
    pub fn decoder_pixel_projection(&self, modality: usize) -> Vec<T> {
        let m = &self.modalities[modality];
        let c = m.spec.pixel_embed_dim;
        let labels = m.spec.num_labels;
        let table = &self.params[m.pixel_table.clone()];
        let mut out = vec![T::zero(); c * labels];
        for l in 0..labels {
            for ch in 0..c {
                out[ch * labels + l] = table[l * c + ch];
            }
        }
        out
    }

    /// Copy with parameters converted to another precision.
    pub fn cast<U: Scalar>(&self) -> Futurist<U> {
        Futurist {
            config: self.config.clone(),
            param_layout: self.param_layout.clone(),
            params: self.params.iter().map(|v| U::of(v.to_f64().unwrap_or(0.0))).collect(),
            modalities: self.modalities.clone(),
            backbone: self.backbone.clone(),
        }
    }

    /// Frames of every configured modality, looked up by name.
    pub fn frame_refs<'a>(&self, record: &'a SequenceRecord) -> Result<FrameRefs<'a>> {
        self.modalities
            .iter()
            .map(|m| {
                let seq = record.modality(&m.spec.name).ok_or_else(|| {
                    Error::Contract(format!("record {} lacks modality {}", record.provenance, m.spec.name))
                })?;
                if seq.modality.num_labels != m.spec.num_labels {
                    return Err(Error::Contract(format!(
                        "modality {} has {} labels, model expects {}",
                        m.spec.name, seq.modality.num_labels, m.spec.num_labels
                    )));
                }
                Ok(seq.frames.iter().collect())
            })
            .collect()
    }

    fn mask_bits<'m>(&self, masks: &'m MaskSet) -> Result<Vec<&'m [bool]>> {
        self.modalities
            .iter()
            .map(|m| {
                masks
                    .get(&m.spec.name)
                    .map(|mm| mm.bits.as_slice())
                    .ok_or_else(|| Error::Contract(format!("mask set lacks modality {}", m.spec.name)))
            })
            .collect()
    }

    /// Embed, mask and fuse.
    pub fn encode(&self, frames: &FrameRefs<'_>, masks: &MaskSet) -> Result<FusedTokens<T>> {
        let layout = &self.config.layout;
        let bits = self.mask_bits(masks)?;
        let mut per = Vec::with_capacity(self.modalities.len());
        for ((m, f), b) in self.modalities.iter().zip(frames).zip(&bits) {
            let emb = m.embedder(&self.params);
            let mut z = tokenization::embed_frames(f, &emb, layout)?;
            tokenization::apply_mask_in_place(&mut z, b, &emb, layout)?;
            per.push(z);
        }
        let refs: Vec<&[T]> = per.iter().map(Vec::as_slice).collect();
        let widths: Vec<usize> = self.modalities.iter().map(|m| m.spec.token_embed_dim).collect();
        tokenization::fuse(
            &refs,
            &widths,
            layout.total_tokens(),
            self.config.fusion,
            self.config.hidden_dim,
        )
    }

    /// Backbone output `(N * L) x d` for masked inputs.
    pub fn forward(&self, frames: &FrameRefs<'_>, masks: &MaskSet, sublayers: Sublayers) -> Result<Vec<T>> {
        let fused = self.encode(frames, masks)?;
        Ok(self.backbone.forward(&fused.embeddings, &self.params, sublayers)?.0)
    }

    /// Per-pixel distributions for every frame of every modality.
    pub fn decode_all(&self, backbone_out: &[T]) -> Result<Vec<Vec<T>>> {
        self.modalities
            .iter()
            .map(|m| {
                tokenization::decode_modality(
                    backbone_out,
                    self.config.hidden_dim,
                    &m.embedder(&self.params),
                    &m.head(&self.params),
                    &self.config.layout,
                )
            })
            .collect()
    }

    /// Logits for the given token rows, `(rows * P^2) x num_labels` in
    /// token-pixel order.
    pub fn decode_rows(&self, modality: usize, backbone_out: &[T], rows: &[usize]) -> Vec<T> {
        let d = self.config.hidden_dim;
        let sel = gather_rows(backbone_out, rows, d);
        let m = &self.modalities[modality];
        tokenization::decode_logits(&sel, d, &m.embedder(&self.params), &m.head(&self.params), &self.config.layout).0
    }

    /// Objective value for one clip under fixed masks.
    pub fn loss(&self, record: &SequenceRecord, masks: &MaskSet) -> Result<LossBreakdown> {
        self.run(record, masks, None)
    }

    /// Objective value and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, record: &SequenceRecord, masks: &MaskSet) -> Result<(LossBreakdown, Vec<T>)> {
        let mut grads = vec![T::zero(); self.params.len()];
        let loss = self.run(record, masks, Some(&mut grads))?;
        Ok((loss, grads))
    }

    fn run(&self, record: &SequenceRecord, masks: &MaskSet, grads: Option<&mut Vec<T>>) -> Result<LossBreakdown> {
        let layout = &self.config.layout;
        let d = self.config.hidden_dim;
        let p = &self.params;
        let frames = self.frame_refs(record)?;
        let bits = self.mask_bits(masks)?;
        let fused = self.encode(&frames, masks)?;
        let (out, cache) = self.backbone.forward(&fused.embeddings, p, Sublayers::default())?;

        let pa = layout.patch_area();
        let hw = layout.pixels_per_frame();
        let first = layout.first_future_token();
        let want_grad = grads.is_some();
        let mut dout = if want_grad { vec![T::zero(); out.len()] } else { Vec::new() };
        let mut grads = grads;
        let mut per = Vec::with_capacity(self.modalities.len());
        for (i, m) in self.modalities.iter().enumerate() {
            let rows: Vec<usize> = bits[i]
                .iter()
                .enumerate()
                .filter(|(_, &b)| b)
                .map(|(j, _)| first + j)
                .collect();
            if rows.is_empty() {
                return Err(Error::Contract(format!("empty mask for modality {}", m.spec.name)));
            }
            let sel = gather_rows(&out, &rows, d);
            let emb = m.embedder(p);
            let (mut logits, dcache) = tokenization::decode_logits(&sel, d, &emb, &m.head(p), layout);
            let mut targets = Vec::with_capacity(rows.len() * pa);
            for &t in &rows {
                for px in 0..pa {
                    let img = tokenization::token_pixel_to_image(layout, t, px);
                    targets.push(frames[i][img / hw].labels.get(img % hw));
                }
            }
            let count = targets.len();
            let w = m.spec.loss_weight;
            let sum = softmax_cross_entropy(&mut logits, &targets, m.spec.num_labels, T::of(w / count as f64));
            per.push(ModalityLoss {
                name: m.spec.name.clone(),
                loss: sum / count as f64,
                masked_tokens: rows.len(),
                weight: w,
            });
            if let Some(g) = grads.as_deref_mut() {
                let dsel = tokenization::decode_backward(&sel, d, &dcache, &logits, m, p, g, layout);
                for (k, &r) in rows.iter().enumerate() {
                    for (o, &v) in dout[r * d..(r + 1) * d].iter_mut().zip(&dsel[k * d..(k + 1) * d]) {
                        *o += v;
                    }
                }
            }
        }
        if let Some(g) = grads {
            let dfused = self.backbone.backward(&cache, &dout, p, g);
            let widths: Vec<usize> = self.modalities.iter().map(|m| m.spec.token_embed_dim).collect();
            let split = tokenization::unfuse_grad(&dfused, &widths, layout.total_tokens(), self.config.fusion, d);
            for ((m, dz), (f, b)) in self.modalities.iter().zip(split).zip(frames.iter().zip(&bits)) {
                tokenization::embed_backward(f, b, dz, m, p, g, layout);
            }
        }
        Ok(LossBreakdown::from_parts(per))
    }
}

fn gather_rows<T: Scalar>(x: &[T], rows: &[usize], d: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        out.extend_from_slice(&x[r * d..(r + 1) * d]);
    }
    out
}
