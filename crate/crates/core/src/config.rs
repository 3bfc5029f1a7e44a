//! Model/training configuration and its `key = value` text format.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::TokenLayout;
use crate::modality::ModalitySpec;

macro_rules! text_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(&self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s.trim() {
                    $($text => Ok($name::$variant),)+
                    other => Err(format!(
                        "unknown {} '{}', expected one of: {}",
                        stringify!($name),
                        other,
                        [$($text),+].join(", ")
                    )),
                }
            }
        }
    };
}

text_enum!(
    /// How per-modality token embeddings are merged into one transformer token.
    Fusion { Concat => "CONCAT", Add => "ADD" }
);

text_enum!(
    /// Coupling of future-token masks across modalities.
    MaskingStrategy {
        FullyIndependentSameR => "FULLY_INDEPENDENT_SAME_R",
        FullyIndependentDiffR => "FULLY_INDEPENDENT_DIFF_R",
        FullyShared => "FULLY_SHARED",
        PartiallySharedExclusive => "PARTIALLY_SHARED_EXCLUSIVE",
        FullyMasked => "FULLY_MASKED",
    }
);

text_enum!(
    /// Map from a sampled ratio `r` to the fraction of future tokens masked.
    Schedule { Identity => "IDENTITY", Cosine => "COSINE" }
);

text_enum!(
    /// Which disparity AbsRel divides by.
    AbsRelDenominator { Pred => "pred", Gt => "gt" }
);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: u64,
    pub batch_size: usize,
    /// Hard cap on optimizer steps; 0 means no cap.
    pub max_steps: u64,
    pub warmup_steps: u64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1.6e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            epochs: 800,
            batch_size: 64,
            max_steps: 0,
            warmup_steps: 0,
            grad_clip: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layout: TokenLayout,
    /// Ordered; CONCAT joins token embeddings in this order.
    pub modalities: Vec<ModalitySpec>,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub fusion: Fusion,
    pub masking_strategy: MaskingStrategy,
    pub schedule: Schedule,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub absrel_denominator: AbsRelDenominator,
}

/// Cityscapes ids of person, rider, car, truck, bus, train, motorcycle, bicycle.
pub const CITYSCAPES_MOVABLE: [u32; 8] = [11, 12, 13, 14, 15, 16, 17, 18];
pub const SEGMENTATION: &str = "segmentation";
pub const DEPTH: &str = "depth";
pub const DEPTH_BINS: usize = 256;

impl ModelConfig {
    /// 64x128 frames, 16-pixel patches, d = 128, 4 layers; segmentation + depth.
    pub fn desk() -> Self {
        let d = 128;
        ModelConfig {
            layout: TokenLayout::new(4, 64, 128, 16),
            modalities: vec![
                ModalitySpec::new(SEGMENTATION, 19, 10, d / 2).with_movable(CITYSCAPES_MOVABLE),
                ModalitySpec::new(DEPTH, DEPTH_BINS, 10, d / 2),
            ],
            hidden_dim: d,
            num_layers: 4,
            num_heads: 4,
            fusion: Fusion::Concat,
            masking_strategy: MaskingStrategy::PartiallySharedExclusive,
            schedule: Schedule::Cosine,
            optimizer: OptimizerConfig {
                learning_rate: 1e-3,
                epochs: 400,
                batch_size: 16,
                max_steps: 5000,
                warmup_steps: 100,
                grad_clip: 1.0,
                ..OptimizerConfig::default()
            },
            seed: 0,
            absrel_denominator: AbsRelDenominator::Pred,
        }
    }

    /// The full-resolution architecture: 256x512 frames, d = 1536, 12 layers.
    pub fn full_scale() -> Self {
        let d = 1536;
        ModelConfig {
            layout: TokenLayout::new(4, 256, 512, 16),
            modalities: vec![
                ModalitySpec::new(SEGMENTATION, 19, 10, d / 2).with_movable(CITYSCAPES_MOVABLE),
                ModalitySpec::new(DEPTH, DEPTH_BINS, 10, d / 2),
            ],
            hidden_dim: d,
            num_layers: 12,
            num_heads: 16,
            fusion: Fusion::Concat,
            masking_strategy: MaskingStrategy::PartiallySharedExclusive,
            schedule: Schedule::Cosine,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            absrel_denominator: AbsRelDenominator::Pred,
        }
    }

    /// Keep only the named modalities, re-deriving token widths for the fusion rule.
    pub fn restricted_to(&self, names: &[&str]) -> ModelConfig {
        let mut cfg = self.clone();
        cfg.modalities.retain(|m| names.contains(&m.name.as_str()));
        let k = cfg.modalities.len().max(1);
        for m in &mut cfg.modalities {
            m.token_embed_dim = match cfg.fusion {
                Fusion::Concat => cfg.hidden_dim / k,
                Fusion::Add => cfg.hidden_dim,
            };
        }
        if cfg.fusion == Fusion::Concat {
            let rest = cfg.hidden_dim - (cfg.hidden_dim / k) * k;
            if let Some(first) = cfg.modalities.first_mut() {
                first.token_embed_dim += rest;
            }
        }
        cfg
    }

    pub fn modality_index(&self, name: &str) -> Option<usize> {
        self.modalities.iter().position(|m| m.name == name)
    }

    /// Every broken invariant, one message per constraint, each naming its field.
    pub fn validate(&self) -> Vec<String> {
        let mut out = self.layout.violations();
        if self.modalities.is_empty() {
            out.push("modalities: at least one modality is required".to_string());
        }
        let mut names = BTreeSet::new();
        for (i, m) in self.modalities.iter().enumerate() {
            let key = format!("modalities.{i}");
            out.extend(m.violations(&key));
            if !names.insert(m.name.as_str()) {
                out.push(format!("{key}.name: duplicate modality name '{}'", m.name));
            }
        }
        if !self.modalities.is_empty() {
            match self.fusion {
                Fusion::Concat => {
                    let sum: usize = self.modalities.iter().map(|m| m.token_embed_dim).sum();
                    if sum != self.hidden_dim {
                        out.push(format!(
                            "fusion: CONCAT requires the token_embed_dim sum ({sum}) to equal hidden_dim ({})",
                            self.hidden_dim
                        ));
                    }
                }
                Fusion::Add => {
                    if self.modalities.iter().any(|m| m.token_embed_dim != self.hidden_dim) {
                        out.push(format!(
                            "fusion: ADD requires every token_embed_dim to equal hidden_dim ({})",
                            self.hidden_dim
                        ));
                    }
                }
            }
        }
        if self.num_heads == 0 || !self.hidden_dim.is_multiple_of(self.num_heads) {
            out.push(format!(
                "num_heads: hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.num_layers == 0 {
            out.push("num_layers: must be >= 1".to_string());
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && o.learning_rate.is_finite()) {
            out.push(format!("optimizer.learning_rate: {} must be > 0", o.learning_rate));
        }
        if !(0.0..1.0).contains(&o.beta1) {
            out.push(format!("optimizer.beta1: {} must be in [0, 1)", o.beta1));
        }
        if !(0.0..1.0).contains(&o.beta2) {
            out.push(format!("optimizer.beta2: {} must be in [0, 1)", o.beta2));
        }
        if !(o.eps > 0.0) {
            out.push(format!("optimizer.eps: {} must be > 0", o.eps));
        }
        if o.batch_size == 0 {
            out.push("optimizer.batch_size: must be >= 1".to_string());
        }
        if !(o.grad_clip >= 0.0) {
            out.push(format!("optimizer.grad_clip: {} must be >= 0", o.grad_clip));
        }
        out
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let v = self.validate();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    /// Serialize as `key = value` lines. `parse(to_text(c)) == c` and the text
    /// re-serializes byte for byte.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let l = &self.layout;
        let o = &self.optimizer;
        let _ = writeln!(s, "# model configuration");
        let _ = writeln!(s, "layout.frames = {}", l.frames());
        let _ = writeln!(s, "layout.context_frames = {}", l.context_frames);
        let _ = writeln!(s, "layout.future_frames = {}", l.future_frames);
        let _ = writeln!(s, "layout.height = {}", l.height);
        let _ = writeln!(s, "layout.width = {}", l.width);
        let _ = writeln!(s, "layout.patch = {}", l.patch);
        let _ = writeln!(s, "# layout.tokens_per_frame = {} (derived)", l.tokens_per_frame_checked());
        for (i, m) in self.modalities.iter().enumerate() {
            let _ = writeln!(s, "modalities.{i}.name = {}", m.name);
            let _ = writeln!(s, "modalities.{i}.num_labels = {}", m.num_labels);
            let _ = writeln!(s, "modalities.{i}.pixel_embed_dim = {}", m.pixel_embed_dim);
            let _ = writeln!(s, "modalities.{i}.token_embed_dim = {}", m.token_embed_dim);
            let _ = writeln!(s, "modalities.{i}.loss_weight = {:?}", m.loss_weight);
            let ids = match &m.movable_label_ids {
                None => "none".to_string(),
                Some(ids) => ids.iter().map(u32::to_string).collect::<Vec<_>>().join(","),
            };
            let _ = writeln!(s, "modalities.{i}.movable_label_ids = {ids}");
        }
        let _ = writeln!(s, "hidden_dim = {}", self.hidden_dim);
        let _ = writeln!(s, "num_layers = {}", self.num_layers);
        let _ = writeln!(s, "num_heads = {}", self.num_heads);
        let _ = writeln!(s, "fusion = {}", self.fusion);
        let _ = writeln!(s, "masking_strategy = {}", self.masking_strategy);
        let _ = writeln!(s, "schedule = {}", self.schedule);
        let _ = writeln!(s, "optimizer.learning_rate = {:?}", o.learning_rate);
        let _ = writeln!(s, "optimizer.beta1 = {:?}", o.beta1);
        let _ = writeln!(s, "optimizer.beta2 = {:?}", o.beta2);
        let _ = writeln!(s, "optimizer.eps = {:?}", o.eps);
        let _ = writeln!(s, "optimizer.epochs = {}", o.epochs);
        let _ = writeln!(s, "optimizer.batch_size = {}", o.batch_size);
        let _ = writeln!(s, "optimizer.max_steps = {}", o.max_steps);
        let _ = writeln!(s, "optimizer.warmup_steps = {}", o.warmup_steps);
        let _ = writeln!(s, "optimizer.grad_clip = {:?}", o.grad_clip);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "absrel_denominator = {}", self.absrel_denominator);
        s
    }

    /// Parse a config file. Keys absent from the text keep their
    /// [`ModelConfig::desk`] defaults; unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::desk();
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse {
                    line: lineno + 1,
                    message: format!("expected `key = value`, got '{line}'"),
                });
            };
            entries.push((lineno + 1, k.trim().to_string(), v.trim().to_string()));
        }
        cfg.apply_overrides(entries.iter().map(|(l, k, v)| (*l, k.as_str(), v.as_str())))?;
        // A file that lists modalities lists all of them.
        let listed = entries
            .iter()
            .filter_map(|(_, k, _)| k.strip_prefix("modalities.")?.split('.').next()?.parse::<usize>().ok())
            .max();
        if let Some(max) = listed {
            cfg.modalities.truncate(max + 1);
        }
        Ok(cfg)
    }

    /// Apply `key = value` pairs on top of this config (used by the file parser
    /// and by command-line overrides).
    pub fn apply_overrides<'a>(&mut self, entries: impl IntoIterator<Item = (usize, &'a str, &'a str)>) -> Result<()> {
        let mut frames: Option<(usize, usize)> = None;
        let mut context: Option<usize> = None;
        let mut modality_fields: BTreeMap<usize, Vec<(usize, String, String)>> = BTreeMap::new();
        for (line, key, value) in entries {
            let perr = |message: String| Error::Parse { line, message };
            macro_rules! num {
                () => {
                    value
                        .parse()
                        .map_err(|e| perr(format!("{key}: invalid value '{value}': {e}")))?
                };
            }
            match key {
                "layout.frames" => frames = Some((line, num!())),
                "layout.context_frames" => context = Some(num!()),
                "layout.future_frames" => self.layout.future_frames = num!(),
                "layout.height" => self.layout.height = num!(),
                "layout.width" => self.layout.width = num!(),
                "layout.patch" => self.layout.patch = num!(),
                "hidden_dim" => self.hidden_dim = num!(),
                "num_layers" => self.num_layers = num!(),
                "num_heads" => self.num_heads = num!(),
                "fusion" => self.fusion = value.parse().map_err(perr)?,
                "masking_strategy" => self.masking_strategy = value.parse().map_err(perr)?,
                "schedule" => self.schedule = value.parse().map_err(perr)?,
                "absrel_denominator" => self.absrel_denominator = value.parse().map_err(perr)?,
                "optimizer.learning_rate" => self.optimizer.learning_rate = num!(),
                "optimizer.beta1" => self.optimizer.beta1 = num!(),
                "optimizer.beta2" => self.optimizer.beta2 = num!(),
                "optimizer.eps" => self.optimizer.eps = num!(),
                "optimizer.epochs" => self.optimizer.epochs = num!(),
                "optimizer.batch_size" => self.optimizer.batch_size = num!(),
                "optimizer.max_steps" => self.optimizer.max_steps = num!(),
                "optimizer.warmup_steps" => self.optimizer.warmup_steps = num!(),
                "optimizer.grad_clip" => self.optimizer.grad_clip = num!(),
                "seed" => self.seed = num!(),
                _ => {
                    let Some(rest) = key.strip_prefix("modalities.") else {
                        return Err(perr(format!("unknown key '{key}'")));
                    };
                    let Some((idx, field)) = rest.split_once('.') else {
                        return Err(perr(format!("unknown key '{key}'")));
                    };
                    let idx: usize = idx
                        .parse()
                        .map_err(|_| perr(format!("bad modality index in '{key}'")))?;
                    modality_fields
                        .entry(idx)
                        .or_default()
                        .push((line, field.to_string(), value.to_string()));
                }
            }
        }
        match (frames, context) {
            (Some((_, n)), Some(c)) => {
                if n != c + self.layout.future_frames {
                    return Err(Error::Config(vec![format!(
                        "layout.frames: {n} != context_frames {c} + future_frames {}",
                        self.layout.future_frames
                    )]));
                }
                self.layout.context_frames = c;
            }
            (Some((line, n)), None) => {
                if n <= self.layout.future_frames {
                    return Err(Error::Parse {
                        line,
                        message: format!("layout.frames {n} leaves no context frames"),
                    });
                }
                self.layout.context_frames = n - self.layout.future_frames;
            }
            (None, Some(c)) => self.layout.context_frames = c,
            (None, None) => {}
        }
        if !modality_fields.is_empty() {
            self.apply_modality_fields(modality_fields)?;
        }
        Ok(())
    }

    fn apply_modality_fields(&mut self, fields: BTreeMap<usize, Vec<(usize, String, String)>>) -> Result<()> {
        let max = *fields.keys().last().unwrap_or(&0);
        // A modality block may extend the list; indices must stay contiguous.
        if max >= self.modalities.len() {
            for idx in self.modalities.len()..=max {
                if !fields.contains_key(&idx) {
                    return Err(Error::Parse {
                        line: 0,
                        message: format!("modalities.{idx} missing while modalities.{max} is set"),
                    });
                }
                self.modalities.push(ModalitySpec::new("", 0, 0, 0));
            }
        }
        for (idx, entries) in fields {
            let m = &mut self.modalities[idx];
            for (line, field, value) in entries {
                let perr = |message: String| Error::Parse { line, message };
                let bad = |e: &dyn fmt::Display| perr(format!("modalities.{idx}.{field}: invalid value '{value}': {e}"));
                match field.as_str() {
                    "name" => m.name = value.clone(),
                    "num_labels" => m.num_labels = value.parse().map_err(|e| bad(&e))?,
                    "pixel_embed_dim" => m.pixel_embed_dim = value.parse().map_err(|e| bad(&e))?,
                    "token_embed_dim" => m.token_embed_dim = value.parse().map_err(|e| bad(&e))?,
                    "loss_weight" => m.loss_weight = value.parse().map_err(|e| bad(&e))?,
                    "movable_label_ids" => {
                        m.movable_label_ids = if value == "none" {
                            None
                        } else {
                            Some(
                                value
                                    .split(',')
                                    .filter(|s| !s.trim().is_empty())
                                    .map(|s| s.trim().parse::<u32>())
                                    .collect::<std::result::Result<_, _>>()
                                    .map_err(|e| bad(&e))?,
                            )
                        }
                    }
                    other => return Err(perr(format!("unknown modality field '{other}'"))),
                }
            }
        }
        Ok(())
    }

}

impl TokenLayout {
    fn tokens_per_frame_checked(&self) -> usize {
        if self.patch == 0 {
            0
        } else {
            self.tokens_per_frame()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_modal(fusion: Fusion, d: usize, ds: usize, dd: usize) -> ModelConfig {
        let mut cfg = ModelConfig::desk();
        cfg.fusion = fusion;
        cfg.hidden_dim = d;
        cfg.num_heads = 4;
        cfg.modalities[0].token_embed_dim = ds;
        cfg.modalities[1].token_embed_dim = dd;
        cfg
    }

    #[test]
    fn concat_half_split_is_valid() {
        let mut cfg = two_modal(Fusion::Concat, 1536, 768, 768);
        cfg.num_heads = 16;
        assert_eq!(cfg.validate(), Vec::<String>::new());
        assert!(ModelConfig::full_scale().validate().is_empty());
    }

    #[test]
    fn add_with_equal_dims_is_valid() {
        assert!(two_modal(Fusion::Add, 128, 128, 128).validate().is_empty());
    }

    #[test]
    fn concat_sum_mismatch_is_reported_once() {
        let mut cfg = two_modal(Fusion::Concat, 1536, 700, 700);
        cfg.num_heads = 16;
        let v = cfg.validate();
        assert_eq!(v.len(), 1, "{v:?}");
        assert!(v[0].starts_with("fusion:"));
    }

    #[test]
    fn single_mutations_give_single_violations() {
        let base = ModelConfig::desk();
        assert!(base.validate().is_empty());
        let mutations: Vec<(&str, Box<dyn Fn(&mut ModelConfig)>)> = vec![
            ("layout.height", Box::new(|c| c.layout.height = 65)),
            ("layout.width", Box::new(|c| c.layout.width = 130)),
            ("modalities.1.num_labels", Box::new(|c| c.modalities[1].num_labels = 1)),
            ("modalities.1.pixel_embed_dim", Box::new(|c| c.modalities[1].pixel_embed_dim = 0)),
            ("modalities.0.movable_label_ids", Box::new(|c| c.modalities[0].movable_label_ids = Some([42].into()))),
            ("modalities.1.loss_weight", Box::new(|c| c.modalities[1].loss_weight = -1.0)),
            ("fusion", Box::new(|c| c.fusion = Fusion::Add)),
            ("num_heads", Box::new(|c| c.num_heads = 3)),
            ("optimizer.batch_size", Box::new(|c| c.optimizer.batch_size = 0)),
            ("optimizer.beta2", Box::new(|c| c.optimizer.beta2 = 1.0)),
        ];
        for (field, mutate) in mutations {
            let mut cfg = base.clone();
            mutate(&mut cfg);
            let v = cfg.validate();
            assert_eq!(v.len(), 1, "{field}: {v:?}");
            assert!(v[0].starts_with(field), "{field}: {v:?}");
        }
    }

    #[test]
    fn text_round_trip_is_exact() {
        let mut cfg = ModelConfig::desk();
        cfg.optimizer.learning_rate = 1.6e-4;
        cfg.modalities[1].loss_weight = 0.3;
        cfg.seed = 1234567890123;
        let text = cfg.to_text();
        let back = ModelConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn single_modality_file_drops_default_second_modality() {
        let cfg = ModelConfig::desk().restricted_to(&[SEGMENTATION]);
        let back = ModelConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back.modalities.len(), 1);
        assert_eq!(back.modalities[0].token_embed_dim, 128);
        assert!(back.validate().is_empty());
    }

    #[test]
    fn frames_key_alone_sets_context() {
        let cfg = ModelConfig::parse("layout.frames = 7\n").unwrap();
        assert_eq!(cfg.layout.context_frames, 6);
        assert_eq!(cfg.layout.frames(), 7);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_enums() {
        assert!(matches!(ModelConfig::parse("nope = 1"), Err(Error::Parse { line: 1, .. })));
        assert!(ModelConfig::parse("fusion = MULTIPLY").is_err());
        assert!(ModelConfig::parse("# only comment\nmasking_strategy = FULLY_SHARED").is_ok());
    }
}
