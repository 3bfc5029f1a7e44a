#![allow(dead_code)]

use futurist::config::{Fusion, MaskingStrategy, ModelConfig, Schedule};
use futurist::modality::{FrameSequence, LabelMap, ModalitySpec, SequenceRecord};
use futurist::TokenLayout;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// d = 8, one layer, N = 2, L = 4, two modalities.
pub fn micro_config(fusion: Fusion) -> ModelConfig {
    let mut cfg = ModelConfig::desk();
    cfg.layout = TokenLayout::new(1, 4, 4, 2);
    let tw = if fusion == Fusion::Concat { 4 } else { 8 };
    cfg.modalities = vec![
        ModalitySpec::new("segmentation", 5, 3, tw).with_movable([3, 4]),
        ModalitySpec::new("depth", 6, 2, tw),
    ];
    cfg.hidden_dim = 8;
    cfg.num_heads = 2;
    cfg.num_layers = 1;
    cfg.fusion = fusion;
    cfg.masking_strategy = MaskingStrategy::PartiallySharedExclusive;
    cfg.schedule = Schedule::Cosine;
    cfg.optimizer.batch_size = 2;
    cfg.optimizer.warmup_steps = 0;
    cfg
}

pub fn random_map(h: usize, w: usize, labels: usize, rng: &mut ChaCha8Rng) -> LabelMap {
    let v: Vec<u16> = (0..h * w).map(|_| rng.random_range(0..labels as u16)).collect();
    LabelMap::from_values(h, w, &v, labels - 1).unwrap()
}

/// Random labels for every configured modality over the full layout.
pub fn random_record(cfg: &ModelConfig, seed: u64) -> SequenceRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = &cfg.layout;
    let indices: Vec<u32> = (0..l.frames() as u32).map(|i| i * 3).collect();
    let mods = cfg
        .modalities
        .iter()
        .map(|m| {
            let frames = (0..l.frames())
                .map(|_| random_map(l.height, l.width, m.num_labels, &mut rng))
                .collect();
            FrameSequence::new(m.clone(), frames, indices.clone()).unwrap()
        })
        .collect();
    SequenceRecord::new(mods, format!("random-{seed}"), 3).unwrap()
}

/// Scale every parameter so activations are far from the linear regime.
pub fn perturb_params(params: &mut [f64], seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in params.iter_mut() {
        *v += rng.random_range(-scale..scale);
    }
}
