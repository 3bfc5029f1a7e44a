//! Future-token masking: ratio sampling, the schedule, and the multimodal
//! masking strategies.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{MaskingStrategy, Schedule};
use crate::error::{Error, Result};

/// Number of future tokens to mask for ratio `r`, clamped to `[1, total]`.
pub fn scheduled_count(r: f64, schedule: Schedule, total: usize) -> Result<usize> {
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::range("masking ratio", format!("{r} not in (0, 1)")));
    }
    if total == 0 {
        return Err(Error::range("mask length", "total must be >= 1"));
    }
    let gamma = match schedule {
        Schedule::Identity => r,
        Schedule::Cosine => (std::f64::consts::FRAC_PI_2 * r).cos(),
    };
    let raw = (gamma * total as f64).floor();
    Ok((raw.max(0.0) as usize).clamp(1, total))
}

/// Mask for one modality over the `N_p * L` future tokens (`true` = masked).
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityMask {
    pub name: String,
    pub bits: Vec<bool>,
    /// Ratio this mask was drawn with; `None` when nothing was sampled.
    pub ratio: Option<f64>,
    pub scheduled_count: usize,
}

impl ModalityMask {
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub masks: Vec<ModalityMask>,
    /// The shared draw `M`, kept for strategies that have one.
    pub common: Option<Vec<bool>>,
}

impl MaskSet {
    /// Every future token masked in every modality (inference setting).
    pub fn all_masked<S: AsRef<str>>(names: &[S], total: usize) -> MaskSet {
        MaskSet {
            masks: names
                .iter()
                .map(|n| ModalityMask {
                    name: n.as_ref().to_string(),
                    bits: vec![true; total],
                    ratio: None,
                    scheduled_count: total,
                })
                .collect(),
            common: None,
        }
    }

    pub fn get(&self, name: &str) -> Option<&ModalityMask> {
        self.masks.iter().find(|m| m.name == name)
    }
}

/// Draws [`MaskSet`]s. The only state is the rng.
#[derive(Debug, Clone)]
pub struct MaskSampler {
    pub strategy: MaskingStrategy,
    pub schedule: Schedule,
    pub total: usize,
    pub names: Vec<String>,
    rng: ChaCha8Rng,
}

impl MaskSampler {
    pub fn new(strategy: MaskingStrategy, schedule: Schedule, total: usize, names: Vec<String>, seed: u64) -> Self {
        MaskSampler::with_rng(strategy, schedule, total, names, ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn with_rng(
        strategy: MaskingStrategy,
        schedule: Schedule,
        total: usize,
        names: Vec<String>,
        rng: ChaCha8Rng,
    ) -> Self {
        MaskSampler {
            strategy,
            schedule,
            total,
            names,
            rng,
        }
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub fn sample(&mut self) -> MaskSet {
        let k = self.names.len();
        let total = self.total;
        match self.strategy {
            MaskingStrategy::FullyMasked => MaskSet::all_masked(&self.names, total),
            MaskingStrategy::FullyShared => {
                let r = sample_ratio(&mut self.rng);
                let count = self.count(r);
                let bits = random_subset(&mut self.rng, total, count);
                let masks = self
                    .names
                    .iter()
                    .map(|n| ModalityMask {
                        name: n.clone(),
                        bits: bits.clone(),
                        ratio: Some(r),
                        scheduled_count: count,
                    })
                    .collect();
                MaskSet {
                    masks,
                    common: Some(bits),
                }
            }
            MaskingStrategy::FullyIndependentSameR => {
                let r = sample_ratio(&mut self.rng);
                let count = self.count(r);
                let masks = (0..k)
                    .map(|i| ModalityMask {
                        name: self.names[i].clone(),
                        bits: random_subset(&mut self.rng, total, count),
                        ratio: Some(r),
                        scheduled_count: count,
                    })
                    .collect();
                MaskSet { masks, common: None }
            }
            MaskingStrategy::FullyIndependentDiffR => {
                let masks = (0..k)
                    .map(|i| {
                        let r = sample_ratio(&mut self.rng);
                        let count = self.count(r);
                        ModalityMask {
                            name: self.names[i].clone(),
                            bits: random_subset(&mut self.rng, total, count),
                            ratio: Some(r),
                            scheduled_count: count,
                        }
                    })
                    .collect();
                MaskSet { masks, common: None }
            }
            MaskingStrategy::PartiallySharedExclusive => {
                let r = sample_ratio(&mut self.rng);
                let count = self.count(r);
                let common = random_subset(&mut self.rng, total, count);
                let per = exclusive_from_common(&common, k, &mut self.rng);
                let masks = per
                    .into_iter()
                    .zip(&self.names)
                    .map(|(bits, n)| ModalityMask {
                        name: n.clone(),
                        bits,
                        ratio: Some(r),
                        scheduled_count: count,
                    })
                    .collect();
                MaskSet {
                    masks,
                    common: Some(common),
                }
            }
        }
    }

    fn count(&self, r: f64) -> usize {
        // r is in (0, 1) and total >= 1 by construction.
        scheduled_count(r, self.schedule, self.total).expect("valid ratio")
    }
}

/// Uniform on the open interval (0, 1).
pub fn sample_ratio<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let r: f64 = rng.random();
        if r > 0.0 {
            return r;
        }
    }
}

/// `count` distinct positions out of `total`, chosen uniformly.
pub fn random_subset<R: Rng + ?Sized>(rng: &mut R, total: usize, count: usize) -> Vec<bool> {
    let mut bits = vec![false; total];
    for i in index::sample(rng, total, count) {
        bits[i] = true;
    }
    bits
}

/// Tokens masked in `common` stay masked everywhere; every other token is
/// left visible in exactly one uniformly chosen modality and masked in the rest.
pub fn exclusive_from_common<R: Rng + ?Sized>(common: &[bool], k: usize, rng: &mut R) -> Vec<Vec<bool>> {
    let mut per = vec![vec![true; common.len()]; k];
    if k == 0 {
        return per;
    }
    for (t, &masked) in common.iter().enumerate() {
        if !masked {
            let visible = rng.random_range(0..k);
            per[visible][t] = false;
        }
    }
    per
}
