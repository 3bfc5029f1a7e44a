mod common;

use futurist::checkpoint::{from_bytes, load_checkpoint, save_checkpoint, to_bytes, FORMAT_VERSION};
use futurist::config::{Fusion, ModelConfig};
use futurist::datasets::InMemorySource;
use futurist::masking::MaskSampler;
use futurist::training::{self, Checkpoint, StepReport, TrainOptions};
use futurist::{Error, Futurist};

fn micro(epochs: u64) -> ModelConfig {
    let mut cfg = common::micro_config(Fusion::Concat);
    cfg.optimizer.learning_rate = 3e-3;
    cfg.optimizer.epochs = epochs;
    cfg.optimizer.warmup_steps = 2;
    cfg.optimizer.grad_clip = 1.0;
    cfg
}

fn data(cfg: &ModelConfig, n: usize) -> InMemorySource {
    InMemorySource((0..n as u64).map(|s| common::random_record(cfg, 100 + s)).collect())
}

fn losses(ckpt: Checkpoint<f32>, source: &InMemorySource, stop: Option<u64>) -> (Checkpoint<f32>, Vec<f64>) {
    let mut seen = Vec::new();
    let opts = TrainOptions {
        stop_at: stop,
        workers: 1,
    };
    let out = training::run(ckpt, source, opts, &mut |r: &StepReport| seen.push(r.loss.total)).unwrap();
    (out, seen)
}

#[test]
fn zero_epochs_keeps_initialization() {
    let cfg = micro(0);
    let ckpt = training::train::<f32>(cfg.clone(), &data(&cfg, 3), &mut |_| {}).unwrap();
    assert_eq!(ckpt.step, 0);
    assert_eq!(ckpt.model.params(), Futurist::<f32>::new(cfg).unwrap().params());
}

#[test]
fn loss_decreases_on_a_tiny_problem() {
    let cfg = micro(40);
    let source = data(&cfg, 4);
    let (_, l) = losses(Checkpoint::new(cfg).unwrap(), &source, None);
    assert_eq!(l.len(), 40 * 2);
    let head: f64 = l[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = l[l.len() - 10..].iter().sum::<f64>() / 10.0;
    assert!(tail < head, "{head} -> {tail}");
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let cfg = micro(4);
    let source = data(&cfg, 5);
    let (whole, full) = losses(Checkpoint::new(cfg.clone()).unwrap(), &source, None);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    let (first, mut part) = losses(Checkpoint::new(cfg).unwrap(), &source, Some(5));
    save_checkpoint(&first, &path).unwrap();
    let restored = load_checkpoint::<f32>(&path).unwrap();
    let (rest, tail) = losses(restored, &source, None);
    part.extend(tail);
    assert_eq!(part, full);
    assert_eq!(rest.model.params(), whole.model.params());
    assert_eq!(rest.step, whole.step);
}

#[test]
fn resume_from_final_checkpoint_takes_no_steps() {
    let cfg = micro(2);
    let source = data(&cfg, 3);
    let (done, _) = losses(Checkpoint::new(cfg).unwrap(), &source, None);
    let step = done.step;
    let (again, extra) = losses(done, &source, None);
    assert!(extra.is_empty());
    assert_eq!(again.step, step);
}

#[test]
fn worker_count_does_not_change_the_result() {
    let cfg = micro(2);
    let source = data(&cfg, 5);
    let (a, la) = losses(Checkpoint::new(cfg.clone()).unwrap(), &source, None);
    let opts = TrainOptions {
        stop_at: None,
        workers: 3,
    };
    let mut lb = Vec::new();
    let b = training::run(Checkpoint::<f32>::new(cfg).unwrap(), &source, opts, &mut |r: &StepReport| {
        lb.push(r.loss.total)
    })
    .unwrap();
    assert_eq!(la, lb);
    assert_eq!(a.model.params(), b.model.params());
}

#[test]
fn non_finite_loss_aborts() {
    let cfg = micro(1);
    let source = data(&cfg, 2);
    let mut ckpt = Checkpoint::<f32>::new(cfg).unwrap();
    let head = ckpt.model.param_layout().find("decode.segmentation.projection.bias").unwrap().range();
    ckpt.model.params_mut()[head][0] = f32::NAN;
    let err = training::run(ckpt, &source, TrainOptions::default(), &mut |_| {}).unwrap_err();
    assert!(matches!(err, Error::Diverged { step: 0, .. }), "{err}");
}

#[test]
fn zero_depth_weight_silences_the_depth_head() {
    let mut cfg = micro(1);
    cfg.modalities[1].loss_weight = 0.0;
    let model = Futurist::<f64>::new(cfg.clone()).unwrap();
    let record = common::random_record(&cfg, 5);
    let names = cfg.modalities.iter().map(|m| m.name.clone()).collect();
    let mut sampler = MaskSampler::new(cfg.masking_strategy, cfg.schedule, cfg.layout.future_tokens(), names, 9);
    let (_, grads) = model.loss_and_grad(&record, &sampler.sample()).unwrap();
    let layout = model.param_layout();
    for name in ["decode.depth.projection.weight", "decode.depth.projection.bias"] {
        let r = layout.find(name).unwrap().range();
        assert!(grads[r].iter().all(|&g| g == 0.0), "{name} has gradient");
    }
    let embed = layout.find("embed.depth.patch_projection.weight").unwrap().range();
    assert!(grads[embed].iter().any(|&g| g != 0.0));
}

fn trained() -> Checkpoint<f32> {
    let cfg = micro(2);
    let source = data(&cfg, 3);
    losses(Checkpoint::new(cfg).unwrap(), &source, None).0
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let ckpt = trained();
    assert!(ckpt.adam_v.iter().any(|&v| v != 0.0));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    save_checkpoint(&ckpt, &path).unwrap();
    let loaded = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(loaded.model.params(), ckpt.model.params());
    assert_eq!(loaded.adam_m, ckpt.adam_m);
    assert_eq!((loaded.step, loaded.epoch, loaded.batch_in_epoch), (ckpt.step, ckpt.epoch, ckpt.batch_in_epoch));
    assert_eq!(loaded.config(), ckpt.config());
    let again = dir.path().join("b.ckpt");
    save_checkpoint(&loaded, &again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn truncated_checkpoints_are_rejected() {
    let bytes = to_bytes(&trained()).unwrap();
    for cut in [0, 7, 12, 19, 20, 64, bytes.len() / 2, bytes.len() - 1] {
        match from_bytes::<f32>(&bytes[..cut]) {
            Err(Error::Corrupt(_)) => {}
            other => panic!("cut at {cut}: {:?}", other.map(|c| c.step)),
        }
    }
}

#[test]
fn flipped_tensor_byte_is_detected() {
    let mut bytes = to_bytes(&trained()).unwrap();
    let last = bytes.len() - 3;
    bytes[last] ^= 0x40;
    assert!(matches!(from_bytes::<f32>(&bytes), Err(Error::Corrupt(_))));
}

#[test]
fn other_format_versions_are_incompatible() {
    let mut bytes = to_bytes(&trained()).unwrap();
    bytes[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    match from_bytes::<f32>(&bytes) {
        Err(Error::IncompatibleVersion { found, expected }) => {
            assert_eq!((found, expected), (FORMAT_VERSION + 1, FORMAT_VERSION));
        }
        other => panic!("{:?}", other.map(|c| c.step)),
    }
}

#[test]
fn dtype_mismatch_is_reported() {
    let bytes = to_bytes(&trained()).unwrap();
    assert!(matches!(from_bytes::<f64>(&bytes), Err(Error::Corrupt(_))));
}
