//! Single-step prediction with every future token masked, and autoregressive
//! rollout that feeds predictions back as context.

use crate::backbone::Sublayers;
use crate::datasets::Horizon;
use crate::error::{Error, Result};
use crate::masking::MaskSet;
use crate::modality::{FrameSequence, LabelMap, SequenceRecord};
use crate::model::Futurist;
use crate::tensor::{self, Scalar};
use crate::tokenization::token_pixel_to_image;

/// Argmax label maps for one predicted frame, in model modality order.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePrediction {
    pub frame_index: u32,
    pub modalities: Vec<String>,
    pub maps: Vec<LabelMap>,
}

impl FramePrediction {
    pub fn get(&self, name: &str) -> Option<&LabelMap> {
        self.modalities.iter().position(|m| m == name).map(|i| &self.maps[i])
    }
}

fn check_context<T: Scalar>(model: &Futurist<T>, context: &SequenceRecord) -> Result<()> {
    let layout = &model.config().layout;
    if layout.future_frames != 1 {
        return Err(Error::Contract(format!(
            "prediction needs a single future frame, layout has {}",
            layout.future_frames
        )));
    }
    if context.num_frames() != layout.context_frames {
        return Err(Error::Contract(format!(
            "context has {} frames, model expects {}",
            context.num_frames(),
            layout.context_frames
        )));
    }
    for m in &context.modalities {
        if m.height() != layout.height || m.width() != layout.width {
            return Err(Error::shape(
                "predict_next",
                format!(
                    "{} frames are {}x{}, model expects {}x{}",
                    m.modality.name,
                    m.height(),
                    m.width(),
                    layout.height,
                    layout.width
                ),
            ));
        }
    }
    Ok(())
}

/// Next frame after `context` (which holds exactly the model's context length).
pub fn predict_next<T: Scalar>(model: &Futurist<T>, context: &SequenceRecord) -> Result<FramePrediction> {
    check_context(model, context)?;
    let cfg = model.config();
    let layout = &cfg.layout;
    let ctx = model.frame_refs(context)?;
    let blanks: Vec<LabelMap> = cfg
        .modalities
        .iter()
        .map(|m| LabelMap::filled(layout.height, layout.width, 0, m.num_labels - 1))
        .collect();
    let frames: Vec<Vec<&LabelMap>> = ctx
        .into_iter()
        .zip(&blanks)
        .map(|(mut f, b)| {
            f.push(b);
            f
        })
        .collect();
    let names: Vec<&str> = cfg.modalities.iter().map(|m| m.name.as_str()).collect();
    let masks = MaskSet::all_masked(&names, layout.future_tokens());
    let out = model.forward(&frames, &masks, Sublayers::default())?;

    let first = layout.first_future_token();
    let rows: Vec<usize> = (first..layout.total_tokens()).collect();
    let offset = layout.context_frames * layout.pixels_per_frame();
    let pa = layout.patch_area();
    let maps = cfg
        .modalities
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let logits = model.decode_rows(i, &out, &rows);
            let mut values = vec![0u16; layout.pixels_per_frame()];
            for (k, &t) in rows.iter().enumerate() {
                for px in 0..pa {
                    let row = (k * pa + px) * m.num_labels;
                    let img = token_pixel_to_image(layout, t, px) - offset;
                    values[img] = tensor::argmax(&logits[row..row + m.num_labels]) as u16;
                }
            }
            LabelMap::from_values(layout.height, layout.width, &values, m.num_labels - 1)
        })
        .collect::<Result<Vec<_>>>()?;
    let indices = context.frame_indices();
    let last = *indices.last().expect("non-empty context");
    let stride = if indices.len() > 1 { indices[1] - indices[0] } else { context.subsample.max(1) };
    Ok(FramePrediction {
        frame_index: last + stride,
        modalities: cfg.modalities.iter().map(|m| m.name.clone()).collect(),
        maps,
    })
}

/// `steps` predictions, each appended to the context (oldest frame dropped)
/// before the next one.
pub fn rollout<T: Scalar>(model: &Futurist<T>, context: &SequenceRecord, steps: usize) -> Result<Vec<FramePrediction>> {
    if steps == 0 {
        return Err(Error::range("rollout steps", "must be at least 1"));
    }
    let mut window = context.clone();
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let pred = predict_next(model, &window)?;
        window = advance(&window, &pred)?;
        out.push(pred);
    }
    Ok(out)
}

/// Predictions up to the horizon's target frame (1 step for SHORT, 3 for MID).
pub fn forecast<T: Scalar>(model: &Futurist<T>, context: &SequenceRecord, horizon: Horizon) -> Result<Vec<FramePrediction>> {
    rollout(model, context, horizon.steps())
}

fn advance(window: &SequenceRecord, pred: &FramePrediction) -> Result<SequenceRecord> {
    let modalities = window
        .modalities
        .iter()
        .filter_map(|seq| pred.get(&seq.modality.name).map(|map| (seq, map)))
        .map(|(seq, map)| {
            let mut frames = seq.frames[1..].to_vec();
            frames.push(map.clone());
            let mut indices = seq.frame_indices[1..].to_vec();
            indices.push(pred.frame_index);
            FrameSequence::new(seq.modality.clone(), frames, indices)
        })
        .collect::<Result<Vec<_>>>()?;
    SequenceRecord::new(modalities, window.provenance.clone(), window.subsample)
}
