//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `FUTURIST_ACCEPTANCE_STEPS` overrides the desk training budget and
//! `FUTURIST_ACCEPTANCE_SKIP_DESK=1` skips the two training criteria.

mod common;

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use futurist::backbone::{BackboneParams, Sublayers};
use futurist::config::{AbsRelDenominator, Fusion, MaskingStrategy, ModelConfig, Schedule, SEGMENTATION};
use futurist::datasets::{write_synthetic_split, Horizon, InMemorySource, SceneDistribution, SplitSpec, SyntheticWindows};
use futurist::evaluation::{depth_metrics_values, evaluate, miou, ConfusionMatrix, EvalSetup, MetricRow, Method};
use futurist::inference::{forecast, rollout};
use futurist::masking::{scheduled_count, MaskSampler, MaskSet, ModalityMask};
use futurist::modality::{FrameSequence, LabelMap, ModalitySpec};
use futurist::objective::masked_loss_logit_grad;
use futurist::tokenization::embed_modality;
use futurist::training::{self, StepReport};
use futurist::{Futurist, TokenLayout};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn criterion_1() -> Outcome {
    let total = 512;
    let names = vec!["segmentation".to_string(), "depth".to_string()];
    let mut violations = 0usize;
    let mut draws = 0usize;
    for &schedule in Schedule::ALL {
        for &strategy in MaskingStrategy::ALL {
            let mut sampler = MaskSampler::new(strategy, schedule, total, names.clone(), 1000 + strategy as u64);
            for _ in 0..10_000 {
                draws += 1;
                let set = sampler.sample();
                let expected = |m: &ModalityMask| scheduled_count(m.ratio.unwrap(), schedule, total).unwrap();
                let ok = match strategy {
                    MaskingStrategy::FullyMasked => set.masks.iter().all(|m| m.bits.iter().all(|&b| b)),
                    MaskingStrategy::FullyShared => {
                        set.masks[0].bits == set.masks[1].bits && set.masks[0].count() == expected(&set.masks[0])
                    }
                    MaskingStrategy::FullyIndependentSameR => {
                        set.masks[0].ratio == set.masks[1].ratio && set.masks.iter().all(|m| m.count() == expected(m))
                    }
                    MaskingStrategy::FullyIndependentDiffR => set.masks.iter().all(|m| m.count() == expected(m)),
                    MaskingStrategy::PartiallySharedExclusive => {
                        let common = set.common.as_ref().unwrap();
                        let m = common.iter().filter(|&&b| b).count();
                        m == expected(&set.masks[0])
                            && (0..total).all(|t| {
                                let visible = set.masks.iter().filter(|x| !x.bits[t]).count();
                                if common[t] {
                                    visible == 0
                                } else {
                                    visible == 1
                                }
                            })
                            && set.masks.iter().all(|x| x.count() >= m)
                    }
                };
                violations += usize::from(!ok);
            }
        }
    }
    ensure(violations == 0, || format!("{violations} violations in {draws} draws"))?;
    Ok(format!("{draws} draws, 0 violations"))
}

fn criterion_2() -> Outcome {
    let mut cfg = common::micro_config(Fusion::Concat);
    cfg.layout = TokenLayout::new(1, 16, 16, 16);
    cfg.modalities = vec![ModalitySpec::new(SEGMENTATION, 19, 3, 4)];
    cfg.hidden_dim = 4;
    cfg.num_heads = 1;
    let mut model = Futurist::<f64>::new(cfg.clone()).unwrap();
    common::perturb_params(model.params_mut(), 21, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let frame = common::random_map(16, 16, 19, &mut rng);
    let seq = FrameSequence::new(cfg.modalities[0].clone(), vec![frame.clone(), frame.clone()], vec![0, 3]).unwrap();
    let emb = model.embedder(0);
    let got = embed_modality(&seq, &emb, &cfg.layout).unwrap();
    let (c, d) = (3, 4);
    let mut flat = Vec::with_capacity(256 * c);
    for i in 0..256 {
        let mut one_hot = [0.0; 19];
        one_hot[frame.labels.get(i) as usize] = 1.0;
        for k in 0..c {
            flat.push((0..19).map(|l| one_hot[l] * emb.pixel_table[l * c + k]).sum::<f64>());
        }
    }
    let mut worst = 0.0f64;
    for j in 0..d {
        let want = emb.patch_bias[j] + flat.iter().enumerate().map(|(i, v)| v * emb.patch_weight[i * d + j]).sum::<f64>();
        worst = worst.max((got[j] - want).abs()).max((got[d + j] - want).abs());
    }
    ensure(worst < 1e-6, || format!("brute-force difference {worst:e}"))?;

    let cfg = {
        let mut c = common::micro_config(Fusion::Concat);
        c.layout = TokenLayout::new(2, 8, 8, 2);
        c
    };
    let mut model = Futurist::<f64>::new(cfg.clone()).unwrap();
    common::perturb_params(model.params_mut(), 23, 1.0);
    let record = common::random_record(&cfg, 24);
    let mut leaks = 0;
    for trial in 0..100 {
        let m = trial % 2;
        let seq = &record.modalities[m];
        let emb = model.embedder(m);
        let base = embed_modality(seq, &emb, &cfg.layout).unwrap();
        let (f, y, x) = (rng.random_range(0..3), rng.random_range(0..8), rng.random_range(0..8));
        let mut edited = seq.clone();
        let old = edited.frames[f].get(y, x);
        edited.frames[f].set(y, x, (old + 1 + rng.random_range(0..4)) % seq.modality.num_labels as u16);
        let after = embed_modality(&edited, &emb, &cfg.layout).unwrap();
        let w = seq.modality.token_embed_dim;
        let own = f * cfg.layout.tokens_per_frame() + cfg.layout.token_of_pixel(y, x);
        leaks += (0..cfg.layout.total_tokens())
            .filter(|&t| t != own && base[t * w..(t + 1) * w] != after[t * w..(t + 1) * w])
            .count();
    }
    ensure(leaks == 0, || format!("{leaks} nonlocal token changes"))?;
    Ok(format!("max deviation {worst:.1e}, 100 edits, 0 nonlocal changes"))
}

fn criterion_3() -> Outcome {
    let mut cfg = common::micro_config(Fusion::Concat);
    cfg.optimizer.learning_rate = 1e-2;
    cfg.optimizer.epochs = 10;
    cfg.optimizer.batch_size = 1;
    let source = InMemorySource(vec![common::random_record(&cfg, 31)]);
    let start = Futurist::<f32>::new(cfg.clone()).unwrap();
    let ckpt = training::train::<f32>(cfg.clone(), &source, &mut |_| {}).map_err(|e| e.to_string())?;
    ensure(ckpt.step == 10, || format!("took {} steps", ckpt.step))?;
    for (i, m) in cfg.modalities.iter().enumerate() {
        let table = &ckpt.model.params()[ckpt.model.modality_params()[i].pixel_table.clone()];
        ensure(table != &start.params()[ckpt.model.modality_params()[i].pixel_table.clone()], || {
            format!("{} table did not move", m.name)
        })?;
        let proj = ckpt.model.decoder_pixel_projection(i);
        let (labels, c) = (m.num_labels, m.pixel_embed_dim);
        let bitwise = (0..c).all(|k| (0..labels).all(|l| proj[k * labels + l].to_bits() == table[l * c + k].to_bits()));
        ensure(bitwise, || format!("{} projection differs from table transpose", m.name))?;
    }
    Ok("decoder projection is the embedding table transpose after 10 steps".into())
}

fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let d = gain.len();
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + 1e-5).sqrt();
        out.extend(row.iter().enumerate().map(|(j, v)| (v - mean) * s * gain[j] + bias[j]));
    }
    out
}

fn matmul(x: &[f64], w: &[f64], b: &[f64], cols: usize) -> Vec<f64> {
    let inner = w.len() / cols;
    x.chunks(inner)
        .flat_map(|row| (0..cols).map(move |j| b[j] + (0..inner).map(|k| row[k] * w[k * cols + j]).sum::<f64>()))
        .collect()
}

/// Full `(N * L) x (N * L)` attention with a 0/1 visibility matrix.
fn dense_attention(x: &[f64], p: &[f64], a: &futurist::backbone::AttentionParams, heads: usize, visible: &[Vec<bool>]) -> Vec<f64> {
    let n = visible.len();
    let d = x.len() / n;
    let h = layer_norm(x, &p[a.norm.gain.clone()], &p[a.norm.bias.clone()]);
    let qkv = matmul(&h, &p[a.qkv_weight.clone()], &p[a.qkv_bias.clone()], 3 * d);
    let hd = d / heads;
    let mut ctx = vec![0.0; n * d];
    for head in 0..heads {
        let q = |i: usize, k: usize| qkv[i * 3 * d + head * hd + k];
        let kk = |i: usize, k: usize| qkv[i * 3 * d + d + head * hd + k];
        let v = |i: usize, k: usize| qkv[i * 3 * d + 2 * d + head * hd + k];
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| {
                    if visible[i][j] {
                        (0..hd).map(|k| q(i, k) * kk(j, k)).sum::<f64>() / (hd as f64).sqrt()
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for k in 0..hd {
                ctx[i * d + head * hd + k] = (0..n).map(|j| e[j] / z * v(j, k)).sum();
            }
        }
    }
    matmul(&ctx, &p[a.out_weight.clone()], &p[a.out_bias.clone()], d)
}

fn dense_forward(bp: &BackboneParams, p: &[f64], fused: &[f64]) -> Vec<f64> {
    let l = bp.layout.tokens_per_frame();
    let n = bp.layout.total_tokens();
    let d = bp.hidden;
    let temporal: Vec<Vec<bool>> = (0..n).map(|i| (0..n).map(|j| i % l == j % l).collect()).collect();
    let spatial: Vec<Vec<bool>> = (0..n).map(|i| (0..n).map(|j| i / l == j / l).collect()).collect();
    let mut x: Vec<f64> = fused.iter().zip(&p[bp.position.clone()]).map(|(a, b)| a + b).collect();
    for b in &bp.blocks {
        for (a, vis) in [(&b.temporal, &temporal), (&b.spatial, &spatial)] {
            let y = dense_attention(&x, p, a, bp.heads, vis);
            x.iter_mut().zip(y).for_each(|(u, v)| *u += v);
        }
        let m = &b.mlp;
        let h = layer_norm(&x, &p[m.norm.gain.clone()], &p[m.norm.bias.clone()]);
        let hidden: Vec<f64> = matmul(&h, &p[m.fc1_weight.clone()], &p[m.fc1_bias.clone()], 4 * d)
            .into_iter()
            .map(|u| 0.5 * u * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (u + 0.044715 * u.powi(3))).tanh()))
            .collect();
        let y = matmul(&hidden, &p[m.fc2_weight.clone()], &p[m.fc2_bias.clone()], d);
        x.iter_mut().zip(y).for_each(|(u, v)| *u += v);
    }
    x
}

fn criterion_4() -> Outcome {
    let mut cfg = common::micro_config(Fusion::Concat);
    cfg.layout = TokenLayout::new(2, 4, 4, 2);
    let mut model = Futurist::<f64>::new(cfg.clone()).unwrap();
    common::perturb_params(model.params_mut(), 41, 0.5);
    let bp = model.backbone_params().clone();
    let (n, l, d) = (cfg.layout.total_tokens(), cfg.layout.tokens_per_frame(), cfg.hidden_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let fused: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let p = model.params();
    let (fast, _) = bp.forward(&fused, p, Sublayers::default()).unwrap();
    let dense = dense_forward(&bp, p, &fused);
    let worst = fast.iter().zip(&dense).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure(worst < 1e-6, || format!("dense oracle differs by {worst:e}"))?;

    let probe = |sub: Sublayers, same: &dyn Fn(usize, usize) -> bool| -> usize {
        let (base, _) = bp.forward(&fused, p, sub).unwrap();
        let mut leaks = 0;
        for t in 0..n {
            let mut x = fused.clone();
            x[t * d] += 0.5;
            let (out, _) = bp.forward(&x, p, sub).unwrap();
            leaks += (0..n)
                .filter(|&u| !same(t, u) && out[u * d..(u + 1) * d] != base[u * d..(u + 1) * d])
                .count();
        }
        leaks
    };
    let temporal = Sublayers {
        temporal: true,
        spatial: false,
        mlp: false,
    };
    let spatial = Sublayers {
        temporal: false,
        spatial: true,
        mlp: false,
    };
    let t_leaks = probe(temporal, &|a, b| a % l == b % l);
    let s_leaks = probe(spatial, &|a, b| a / l == b / l);
    ensure(t_leaks + s_leaks == 0, || format!("{t_leaks} temporal and {s_leaks} spatial leaks"))?;
    Ok(format!("dense oracle within {worst:.1e}; 0 leaked positions"))
}

fn criterion_5() -> Outcome {
    let mut worst = (String::new(), 0.0f64);
    for fusion in [Fusion::Concat, Fusion::Add] {
        let cfg = common::micro_config(fusion);
        let mut model = Futurist::<f64>::new(cfg.clone()).unwrap();
        common::perturb_params(model.params_mut(), 51, 0.3);
        let record = common::random_record(&cfg, 52);
        let names: Vec<String> = cfg.modalities.iter().map(|m| m.name.clone()).collect();
        let mut sampler = MaskSampler::new(
            MaskingStrategy::PartiallySharedExclusive,
            Schedule::Identity,
            cfg.layout.future_tokens(),
            names,
            53,
        );
        let masks = loop {
            let m = sampler.sample();
            if m.masks.iter().all(|x| x.count() >= 2) {
                break m;
            }
        };
        let (_, grads) = model.loss_and_grad(&record, &masks).unwrap();
        let h = 1e-4;
        for e in model.param_layout().entries().to_vec() {
            let (mut diff, mut na, mut nf) = (0.0f64, 0.0f64, 0.0f64);
            for k in e.range() {
                let orig = model.params()[k];
                model.params_mut()[k] = orig + h;
                let lp = model.loss(&record, &masks).unwrap().total;
                model.params_mut()[k] = orig - h;
                let lm = model.loss(&record, &masks).unwrap().total;
                model.params_mut()[k] = orig;
                let fd = (lp - lm) / (2.0 * h);
                diff += (fd - grads[k]).powi(2);
                na += grads[k].powi(2);
                nf += fd.powi(2);
            }
            let denom = na.sqrt().max(nf.sqrt());
            let rel = if denom < 1e-10 { diff.sqrt() } else { diff.sqrt() / denom };
            if rel > worst.1 {
                worst = (format!("{fusion:?} {}", e.name), rel);
            }
        }
    }
    ensure(worst.1 < 1e-4, || format!("{}: relative error {:e}", worst.0, worst.1))?;
    Ok(format!("max group relative error {:.1e} ({})", worst.1, worst.0))
}

fn criterion_6() -> Outcome {
    let layout = TokenLayout::new(2, 4, 4, 2);
    let spec = ModalitySpec::new(SEGMENTATION, 19, 2, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let frames = (0..3).map(|_| common::random_map(4, 4, 19, &mut rng)).collect();
    let seq = FrameSequence::new(spec, frames, vec![0, 3, 6]).unwrap();
    let bits = vec![true, false, true, false];
    let masks = MaskSet {
        masks: vec![ModalityMask {
            name: SEGMENTATION.into(),
            bits: bits.clone(),
            ratio: None,
            scheduled_count: 2,
        }],
        common: None,
    };
    let uniform = vec![0.0f64; 3 * 16 * 19];
    let (loss, _) = masked_loss_logit_grad(&[&uniform], &[&seq], &masks, &layout).map_err(|e| e.to_string())?;
    let gap = (loss.total - 19f64.ln()).abs();
    ensure(gap < 1e-6, || format!("uniform loss off by {gap:e}"))?;

    let logits: Vec<f64> = (0..3 * 16 * 19).map(|_| rng.random_range(-2.0..2.0)).collect();
    let (_, grads) = masked_loss_logit_grad(&[&logits], &[&seq], &masks, &layout).map_err(|e| e.to_string())?;
    let mut nonzero_outside = 0;
    let mut zero_inside = 0;
    for y in 0..4 {
        for x in 0..4 {
            for f in 0..3 {
                let pixel = f * 16 + y * 4 + x;
                let row = &grads[0][pixel * 19..(pixel + 1) * 19];
                let masked = f == 2 && bits[layout.token_of_pixel(y, x)];
                if masked {
                    zero_inside += usize::from(row.iter().all(|&g| g == 0.0));
                } else {
                    nonzero_outside += row.iter().filter(|&&g| g != 0.0).count();
                }
            }
        }
    }
    ensure(nonzero_outside == 0 && zero_inside == 0, || {
        format!("{nonzero_outside} nonzero gradients outside the mask, {zero_inside} dead masked pixels")
    })?;
    Ok(format!("uniform loss ln 19 within {gap:.1e}; exact zeros off-mask"))
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let mut total = ConfusionMatrix::new(6, None);
    let mut inter = [0u64; 6];
    let mut union = [0u64; 6];
    let mut present = [false; 6];
    for _ in 0..100 {
        let p = common::random_map(8, 8, 6, &mut rng);
        let g = common::random_map(8, 8, 5, &mut rng);
        total.add(&p, &g).map_err(|e| e.to_string())?;
        for i in 0..64 {
            let (a, b) = (p.labels.get(i) as usize, g.labels.get(i) as usize);
            present[b] = true;
            if a == b {
                inter[a] += 1;
                union[a] += 1;
            } else {
                union[a] += 1;
                union[b] += 1;
            }
        }
    }
    let ious: Vec<f64> = (0..6).filter(|&c| present[c]).map(|c| inter[c] as f64 / union[c] as f64).collect();
    let brute = 100.0 * ious.iter().sum::<f64>() / ious.len() as f64;
    ensure(total.miou(None) == Some(brute), || format!("{:?} vs {brute}", total.miou(None)))?;

    let two = |v: [u16; 4]| LabelMap::from_values(2, 2, &v, 1).unwrap();
    let m = miou(&two([0, 0, 1, 1]), &two([0, 1, 1, 1]), 2, None, None).map_err(|e| e.to_string())?;
    ensure(m.map(|v| (v * 100.0).round() / 100.0) == Some(58.33), || format!("2x2 case gave {m:?}"))?;
    let subset: BTreeSet<u32> = [0, 1].into();
    let disjoint = miou(&two([0; 4]), &two([1; 4]), 2, None, Some(&subset)).map_err(|e| e.to_string())?;
    ensure(disjoint == Some(0.0), || format!("disjoint case gave {disjoint:?}"))?;

    let den = AbsRelDenominator::Pred;
    let hand = depth_metrics_values(&[0.4], &[0.5], den).map_err(|e| e.to_string())?.unwrap();
    ensure(hand.abs_rel == 25.0 && hand.delta1 == 0.0, || format!("hand case gave {hand:?}"))?;
    let same = depth_metrics_values(&[0.3, 0.7], &[0.3, 0.7], den).map_err(|e| e.to_string())?.unwrap();
    ensure(same.abs_rel == 0.0 && same.delta1 == 100.0, || format!("identity case gave {same:?}"))?;
    let scaled = depth_metrics_values(&[0.2, 0.6], &[0.1, 0.3], den).map_err(|e| e.to_string())?.unwrap();
    ensure(scaled.delta1 == 0.0, || format!("scaled case gave {scaled:?}"))?;
    let inside = depth_metrics_values(&[0.4], &[0.4999], den).map_err(|e| e.to_string())?.unwrap();
    ensure(inside.delta1 == 100.0, || "ratio just below 1.25 missed".into())?;
    Ok(format!("brute-force mIoU {brute:.4} matched exactly; hand cases exact"))
}

fn criterion_10() -> Outcome {
    let mut cfg = common::micro_config(Fusion::Concat);
    cfg.layout = TokenLayout::new(4, 4, 4, 2);
    let mut model = Futurist::<f64>::new(cfg.clone()).unwrap();
    common::perturb_params(model.params_mut(), 101, 0.5);
    let model = model.cast::<f32>();
    let ctx = common::random_record(&cfg, 102).slice(0, 4).unwrap();
    let mid = forecast(&model, &ctx, Horizon::Mid).map_err(|e| e.to_string())?;
    let short = forecast(&model, &ctx, Horizon::Short).map_err(|e| e.to_string())?;
    ensure(mid.len() == 3, || format!("MID took {} steps", mid.len()))?;
    ensure(mid[0] == short[0], || "MID step 1 differs from SHORT".into())?;
    let long = rollout(&model, &ctx, 16).map_err(|e| e.to_string())?;
    for k in 1..=16 {
        let part = rollout(&model, &ctx, k).map_err(|e| e.to_string())?;
        ensure(part[..] == long[..k], || format!("prefix {k} differs"))?;
    }
    Ok("MID = 3 steps, step 1 equals SHORT, prefixes agree up to 16".into())
}

fn desk_budget() -> u64 {
    std::env::var("FUTURIST_ACCEPTANCE_STEPS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(DESK_STEPS)
}

const DESK_STEPS: u64 = 1500;

struct DeskRun {
    row: MetricRow,
    smoothed_drop: bool,
    seconds: f64,
}

fn train_and_score(cfg: ModelConfig, train: &SyntheticWindows, setup: &EvalSetup, label: &str) -> Result<DeskRun, String> {
    let t = Instant::now();
    let mut losses = Vec::new();
    let ckpt = training::train::<f32>(cfg, train, &mut |r: &StepReport| {
        losses.push(r.loss.total);
        if r.step.is_multiple_of(500) {
            eprintln!("  [{label}] step {} loss {:.4} ({:.0}s)", r.step, r.loss.total, t.elapsed().as_secs_f64());
        }
    })
    .map_err(|e| e.to_string())?;
    let row = evaluate(Method::Model(&ckpt.model), setup).map_err(|e| e.to_string())?;
    Ok(DeskRun {
        row,
        smoothed_drop: smoothed_decrease(&losses, 200),
        seconds: t.elapsed().as_secs_f64(),
    })
}

/// Mean of the last 50 of the first `window` losses against the first 50.
fn smoothed_decrease(losses: &[f64], window: usize) -> bool {
    let head = &losses[..window.min(losses.len())];
    if head.len() < 100 {
        return false;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    mean(&head[head.len() - 50..]) < mean(&head[..50])
}

fn desk_config(steps: u64, modalities: &[&str]) -> ModelConfig {
    let mut cfg = ModelConfig::desk().restricted_to(modalities);
    cfg.optimizer.max_steps = steps;
    cfg.optimizer.epochs = steps;
    cfg
}

fn fmt(v: Option<f64>) -> String {
    v.map_or("NA".into(), |x| format!("{x:.2}"))
}

fn desk_criteria(root: &Path) -> (Outcome, Outcome) {
    let steps = desk_budget();
    let dist = SceneDistribution::default();
    let train = match SyntheticWindows::generate(&dist, 200, 64, 128, 5, 1) {
        Ok(t) => t,
        Err(e) => return (Err(e.to_string()), Err("no training data".into())),
    };
    let split = SplitSpec {
        name: "val".into(),
        count: 40,
        frames: 21,
        target: 20,
        height: 64,
        width: 128,
        seed: 2,
    };
    let entries = match write_synthetic_split(root, &split, &dist) {
        Ok(e) => e,
        Err(e) => return (Err(e.to_string()), Err("no held-out split".into())),
    };
    let desk = ModelConfig::desk();
    let setup = EvalSetup {
        root: root.to_path_buf(),
        entries,
        horizon: Horizon::Short,
        layout: desk.layout,
        modalities: desk.modalities.clone(),
        denominator: desk.absrel_denominator,
        ignore_label: None,
        workers: 1,
    };
    let base = match evaluate::<f32>(Method::CopyLast, &setup) {
        Ok(r) => r,
        Err(e) => return (Err(e.to_string()), Err("copy-last failed".into())),
    };
    let multi = train_and_score(desk_config(steps, &["segmentation", "depth"]), &train, &setup, "multimodal");
    let c8 = multi.as_ref().map_err(Clone::clone).and_then(|m| {
        let (mi, bi) = (m.row.miou_all.unwrap_or(0.0), base.miou_all.unwrap_or(0.0));
        let (ma, ba) = (m.row.abs_rel.unwrap_or(f64::INFINITY), base.abs_rel.unwrap_or(0.0));
        let detail = format!(
            "{steps} steps in {:.0}s; mIoU {mi:.2} vs copy-last {bi:.2}, AbsRel {ma:.2} vs {ba:.2}, smoothed loss {}",
            m.seconds,
            if m.smoothed_drop { "fell over the first 200 steps" } else { "did not fall" }
        );
        if mi >= bi + 10.0 && ma < ba && m.smoothed_drop {
            Ok(detail)
        } else {
            Err(detail)
        }
    });
    let seg = train_and_score(desk_config(steps, &["segmentation"]), &train, &setup, "segmentation only");
    let depth = train_and_score(desk_config(steps, &["depth"]), &train, &setup, "depth only");
    let c9 = match (multi, seg, depth) {
        (Ok(m), Ok(s), Ok(d)) => {
            println!("             {:>12} {:>12} {:>12} {:>12}", "multimodal", "seg only", "depth only", "copy-last");
            println!(
                "  mIoU       {:>12} {:>12} {:>12} {:>12}",
                fmt(m.row.miou_all),
                fmt(s.row.miou_all),
                "-",
                fmt(base.miou_all)
            );
            println!(
                "  AbsRel     {:>12} {:>12} {:>12} {:>12}",
                fmt(m.row.abs_rel),
                "-",
                fmt(d.row.abs_rel),
                fmt(base.abs_rel)
            );
            let mi_ok = m.row.miou_all.unwrap_or(0.0) >= s.row.miou_all.unwrap_or(0.0) - 1.0;
            let ar_ok = m.row.abs_rel.unwrap_or(f64::INFINITY) <= d.row.abs_rel.unwrap_or(0.0) + 0.3;
            let detail = format!(
                "mIoU {} vs {} (seg only), AbsRel {} vs {} (depth only)",
                fmt(m.row.miou_all),
                fmt(s.row.miou_all),
                fmt(m.row.abs_rel),
                fmt(d.row.abs_rel)
            );
            if mi_ok && ar_ok {
                Ok(detail)
            } else {
                Err(detail)
            }
        }
        (m, s, d) => Err(format!(
            "training failed: {}",
            [m.err(), s.err(), d.err()].into_iter().flatten().collect::<Vec<_>>().join("; ")
        )),
    };
    (c8, c9)
}

fn main() {
    let quick: [(u32, fn() -> Outcome); 8] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (10, criterion_10),
    ];
    let mut results: Vec<(u32, Outcome, f64)> = Vec::new();
    for (n, f) in quick {
        let t = Instant::now();
        let out = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        results.push((n, out, t.elapsed().as_secs_f64()));
    }
    if std::env::var("FUTURIST_ACCEPTANCE_SKIP_DESK").as_deref() == Ok("1") {
        println!("criteria 8 and 9 skipped (FUTURIST_ACCEPTANCE_SKIP_DESK=1)");
    } else {
        let dir = tempfile::tempdir().expect("temp dir");
        let t = Instant::now();
        let (c8, c9) = desk_criteria(dir.path());
        let secs = t.elapsed().as_secs_f64();
        results.push((8, c8, secs));
        results.push((9, c9, secs));
    }
    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (n, out, secs) in &results {
        match out {
            Ok(detail) => println!("criterion {n:>2}: PASS  {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2}: FAIL  {detail} [{secs:.1}s]");
            }
        }
    }
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
