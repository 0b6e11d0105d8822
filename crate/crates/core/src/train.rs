//! Backbone pretraining and the two adapter stages.
//!
//! Every step draws its batch, timesteps, noise, signal subset and
//! augmentations from an RNG seeded by `(seed, stage, step)`, so a run
//! resumed from a checkpoint continues exactly as the uninterrupted run.

use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::amg::{SignalConfig, SignalSet};
use crate::checkpoint::{Checkpoint, Segment};
use crate::error::{Error, Result};
use crate::moca::augment::{augment, AugmentConfig};
use crate::moca::{item_seed, DataItem};
use crate::model::{to_model, Mode, Model};
use crate::optim::{Adam, LinearDecay};
use crate::schedule::NoiseSchedule;
use crate::tensor::{ParamStore, Tape, Tensor};

pub const OPTIMIZER_SEGMENT: &str = "optimizer";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    /// Backbone and text embedding table, raw text embedding in every block.
    Pretrain,
    /// Semantic parser and layout-block adapters; backbone frozen.
    Rsa,
    /// Guidance modules and signal encoders; backbone and parser frozen.
    Amg,
    /// Guidance trained directly on the pretrained backbone, no parser.
    AmgOnly,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Rsa => "rsa",
            Stage::Amg => "amg",
            Stage::AmgOnly => "amg-only",
        }
    }

    pub fn mode(self) -> Mode {
        match self {
            Stage::Pretrain => Mode::BASELINE,
            Stage::Rsa => Mode::RSA_ONLY,
            Stage::Amg => Mode::FULL,
            Stage::AmgOnly => Mode::AMG_ONLY,
        }
    }

    /// Whether the parameter called `name` is updated in this stage.
    pub fn trains(self, name: &str) -> bool {
        match self {
            Stage::Pretrain => name.starts_with("backbone.") || name.starts_with("encoders.text."),
            Stage::Rsa => name.starts_with("rsa."),
            Stage::Amg | Stage::AmgOnly => {
                name.starts_with("amg.") || name.starts_with("encoders.image.") || name.starts_with("encoders.box.")
            }
        }
    }

    /// The two adapter stages see disjoint halves of the data, split by
    /// item index parity.
    pub fn uses_item(self, index: usize) -> bool {
        match self {
            Stage::Pretrain => true,
            Stage::Rsa => index % 2 == 0,
            Stage::Amg | Stage::AmgOnly => index % 2 == 1,
        }
    }

    fn tag(self) -> u64 {
        match self {
            Stage::Pretrain => 0,
            Stage::Rsa => 1,
            Stage::Amg => 2,
            Stage::AmgOnly => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Sampling weights of the signal configurations, in
    /// [`SignalConfig::ALL`] order; only guidance stages use them.
    pub subset_weights: [f64; 6],
    pub augment: bool,
}

impl TrainConfig {
    pub fn new(stage: Stage) -> Self {
        let (lr_start, lr_end) = match stage {
            // The backbone starts from scratch and needs a larger rate.
            Stage::Pretrain => (1e-3, 1e-4),
            _ => (5e-5, 5e-6),
        };
        TrainConfig {
            stage,
            steps: 3000,
            lr_start,
            lr_end,
            batch_size: 16,
            seed: 0,
            subset_weights: [1.0; 6],
            augment: true,
        }
    }

    pub fn schedule(&self) -> Result<LinearDecay> {
        LinearDecay::new(self.lr_start, self.lr_end, self.steps)
    }
}

/// Per-step record of a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<usize>,
    pub lrs: Vec<f64>,
    pub losses: Vec<f64>,
    /// Signal configuration of each step's batch.
    pub configs: Vec<SignalConfig>,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["step", "lr", "loss", "signals"])?;
        for i in 0..self.steps.len() {
            w.write_record([
                self.steps[i].to_string(),
                format!("{:e}", self.lrs[i]),
                format!("{:.9}", self.losses[i]),
                self.configs[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Optimizer state carried between runs of the same stage.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub next_step: usize,
    pub adam: Adam,
}

impl TrainState {
    pub fn fresh(store: &ParamStore) -> Self {
        TrainState { next_step: 0, adam: Adam::new(store) }
    }

    pub fn to_segment(&self, store: &ParamStore) -> Segment {
        let mut seg = Segment::new();
        seg.insert("optimizer.next_step".into(), Tensor::scalar(self.next_step as f64));
        seg.insert("optimizer.t".into(), Tensor::scalar(self.adam.t as f64));
        for id in store.trainable() {
            let name = store.name(id);
            seg.insert(format!("optimizer.m.{name}"), self.adam.m[id.0].clone());
            seg.insert(format!("optimizer.v.{name}"), self.adam.v[id.0].clone());
        }
        seg
    }

    pub fn from_segment(seg: &Segment, store: &ParamStore) -> Result<Self> {
        let scalar = |k: &str| -> Result<f64> {
            seg.get(k).ok_or_else(|| Error::Checkpoint(format!("missing {k}")))?.item()
        };
        let mut adam = Adam::new(store);
        adam.t = scalar("optimizer.t")? as u64;
        for id in store.trainable() {
            let name = store.name(id);
            for (key, slot) in [("m", &mut adam.m[id.0]), ("v", &mut adam.v[id.0])] {
                let k = format!("optimizer.{key}.{name}");
                let t = seg.get(&k).ok_or_else(|| Error::Checkpoint(format!("missing {k}")))?;
                if t.shape() != slot.shape() {
                    return Err(Error::Checkpoint(format!("shape mismatch for {k}")));
                }
                *slot = t.clone();
            }
        }
        Ok(TrainState { next_step: scalar("optimizer.next_step")? as usize, adam })
    }
}

/// Model plus optimizer state in one checkpoint.
pub fn training_checkpoint(model: &Model, state: &TrainState) -> Result<Checkpoint> {
    let mut ck = Checkpoint::from_model(model)?;
    ck.segments.insert(OPTIMIZER_SEGMENT.into(), state.to_segment(&model.store));
    Ok(ck)
}

/// Signals of one item under a configuration.
pub fn signals_for(item: &DataItem, config: SignalConfig) -> SignalSet {
    let a = &item.annotation;
    config.select(&a.structure_ref, &a.object_refs, &a.boxes)
}

/// Pixels of an image as a model-space row.
pub fn image_row(item: &DataItem) -> Vec<f64> {
    item.image.data.iter().map(|&v| to_model(v)).collect()
}

/// Noise-prediction loss of one batch; gradients are accumulated into the
/// store when `backward` is set.
pub fn batch_loss(
    model: &mut Model,
    sched: &NoiseSchedule,
    items: &[&DataItem],
    signals: &[SignalSet],
    mode: Mode,
    rng: &mut impl Rng,
    backward: bool,
) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::validation("empty batch"));
    }
    let n = model.image_len();
    let b = items.len();
    let ts: Vec<usize> = (0..b).map(|_| rng.random_range(1..=sched.steps())).collect();
    let mut x_t = Vec::with_capacity(b * n);
    let mut eps = Vec::with_capacity(b * n);
    for (item, &t) in items.iter().zip(&ts) {
        let e: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        x_t.extend(sched.q_sample(&image_row(item), t, &e)?);
        eps.extend(e);
    }
    let prompts: Vec<&str> = items.iter().map(|it| it.annotation.text.as_str()).collect();
    let sig_refs: Vec<&SignalSet> = signals.iter().collect();
    let mut tape = if backward { Tape::new() } else { Tape::inference() };
    let ctx = model.context(&mut tape, &prompts, &sig_refs, mode)?;
    let x = tape.constant(Tensor::matrix(b, n, x_t)?);
    let f = model.denoise(&mut tape, x, &ts, &ctx)?;
    let target = tape.constant(Tensor::matrix(b, n, eps)?);
    let loss = tape.mse(f.eps, target)?;
    let value = tape.value(loss).item()?;
    if backward {
        tape.backward(loss, &mut model.store)?;
    }
    Ok(value)
}

/// Runs steps `state.next_step..cfg.steps` of a stage, updating the model in
/// place. Parameters outside the stage are frozen and never written.
pub fn train(model: &mut Model, data: &[DataItem], cfg: &TrainConfig, state: &mut TrainState) -> Result<TrainLog> {
    train_range(model, data, cfg, state, cfg.steps)
}

/// Like [`train`] but stops before step `until`; the learning-rate schedule
/// still spans `cfg.steps`.
pub fn train_range(
    model: &mut Model,
    data: &[DataItem],
    cfg: &TrainConfig,
    state: &mut TrainState,
    until: usize,
) -> Result<TrainLog> {
    let pool: Vec<&DataItem> = data.iter().enumerate().filter(|(i, _)| cfg.stage.uses_item(*i)).map(|(_, it)| it).collect();
    if pool.is_empty() {
        return Err(Error::validation(format!("no training items for stage {}", cfg.stage.name())));
    }
    if cfg.batch_size == 0 {
        return Err(Error::validation("batch size must be positive"));
    }
    let lr = cfg.schedule()?;
    let sched = NoiseSchedule::linear(model.cfg.timesteps)?;
    let subset = WeightedIndex::new(cfg.subset_weights).map_err(|e| Error::validation(format!("signal subset weights: {e}")))?;
    let aug_cfg = AugmentConfig::default();
    let stage = cfg.stage;
    model.store.train_only(|n| stage.trains(n));
    let mode = stage.mode();
    let mut log = TrainLog::default();
    for step in state.next_step..until.min(cfg.steps) {
        let mut rng = ChaCha8Rng::seed_from_u64(item_seed(cfg.seed ^ (stage.tag() << 56), step as u64));
        let picks: Vec<&DataItem> = (0..cfg.batch_size).map(|_| pool[rng.random_range(0..pool.len())]).collect();
        let config = if mode.amg { SignalConfig::ALL[subset.sample(&mut rng)] } else { SignalConfig::T };
        model.store.zero_grad();
        let loss = if config == SignalConfig::T && mode.amg {
            // Guidance is bypassed for text-only batches, so every trainable
            // gradient is exactly zero and the forward pass can be skipped.
            f64::NAN
        } else {
            let mut items = Vec::with_capacity(picks.len());
            let mut signals = Vec::with_capacity(picks.len());
            for it in &picks {
                if mode.amg && cfg.augment {
                    let (a, _) = augment(&it.annotation, &it.image, &mut rng, &aug_cfg);
                    signals.push(config.select(&a.structure_ref, &a.object_refs, &a.boxes));
                } else {
                    signals.push(signals_for(it, config));
                }
                items.push(*it);
            }
            batch_loss(model, &sched, &items, &signals, mode, &mut rng, true)?
        };
        let rate = lr.lr(step);
        state.adam.step(&mut model.store, rate)?;
        state.next_step = step + 1;
        log.steps.push(step);
        log.lrs.push(rate);
        log.losses.push(loss);
        log.configs.push(config);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::moca::{gen_dataset, SceneConfig};

    fn data(n: usize) -> Vec<DataItem> {
        let cfg = SceneConfig { image_size: 8, min_side: 3, max_side: 4, max_objects: 2, ..Default::default() };
        gen_dataset(0, n, &cfg, 16)
    }

    fn short(stage: Stage, steps: usize) -> TrainConfig {
        TrainConfig { steps, batch_size: 2, ..TrainConfig::new(stage) }
    }

    #[test]
    fn stages_touch_only_their_segments() {
        let d = data(8);
        let mut m = Model::new(ModelConfig::tiny(), 0).unwrap();
        let before = Checkpoint::from_model(&m).unwrap();
        let mut st = TrainState::fresh(&m.store);
        train(&mut m, &d, &short(Stage::Rsa, 3), &mut st).unwrap();
        let after = Checkpoint::from_model(&m).unwrap();
        for seg in ["backbone", "amg", "encoders"] {
            assert_eq!(before.segment_bytes(seg), after.segment_bytes(seg), "{seg}");
        }
        assert_ne!(before.segment_bytes("rsa"), after.segment_bytes("rsa"));

        let mut st = TrainState::fresh(&m.store);
        let cfg = TrainConfig { subset_weights: [0.0, 1.0, 1.0, 1.0, 1.0, 1.0], ..short(Stage::Amg, 3) };
        train(&mut m, &d, &cfg, &mut st).unwrap();
        let last = Checkpoint::from_model(&m).unwrap();
        for seg in ["backbone", "rsa"] {
            assert_eq!(after.segment_bytes(seg), last.segment_bytes(seg), "{seg}");
        }
        let text = |ck: &Checkpoint| ck.segments["encoders"]["encoders.text.table"].clone();
        assert!(text(&after).bit_eq(&text(&last)));
        assert_ne!(after.segment_bytes("amg"), last.segment_bytes("amg"));
    }

    #[test]
    fn learning_rate_endpoints_are_recorded() {
        let d = data(6);
        let mut m = Model::new(ModelConfig::tiny(), 0).unwrap();
        let mut st = TrainState::fresh(&m.store);
        let log = train(&mut m, &d, &short(Stage::Rsa, 4), &mut st).unwrap();
        assert_eq!(log.lrs[0], 5e-5);
        assert_eq!(*log.lrs.last().unwrap(), 5e-6);
    }

    #[test]
    fn resuming_reproduces_the_trajectory() {
        let d = data(6);
        let cfg = short(Stage::Pretrain, 6);
        let mut a = Model::new(ModelConfig::tiny(), 2).unwrap();
        let mut sa = TrainState::fresh(&a.store);
        let full = train(&mut a, &d, &cfg, &mut sa).unwrap();

        // Interrupt after three steps, round-trip through a checkpoint, resume.
        let mut b = Model::new(ModelConfig::tiny(), 2).unwrap();
        let mut sb = TrainState::fresh(&b.store);
        let part = train_range(&mut b, &d, &cfg, &mut sb, 3).unwrap();
        let ck = Checkpoint::from_bytes(&training_checkpoint(&b, &sb).unwrap().to_bytes()).unwrap();
        let mut c = ck.to_model().unwrap();
        c.store.train_only(|n| Stage::Pretrain.trains(n));
        let mut sc = TrainState::from_segment(&ck.segments[OPTIMIZER_SEGMENT], &c.store).unwrap();
        assert_eq!(sc.next_step, 3);
        let rest = train(&mut c, &d, &cfg, &mut sc).unwrap();
        let resumed: Vec<f64> = part.losses.iter().chain(&rest.losses).copied().collect();
        assert_eq!(resumed, full.losses);
        assert_eq!(Checkpoint::from_model(&c).unwrap(), Checkpoint::from_model(&a).unwrap());
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let mut m = Model::new(ModelConfig::tiny(), 0).unwrap();
        let mut st = TrainState::fresh(&m.store);
        assert!(matches!(train(&mut m, &[], &short(Stage::Pretrain, 2), &mut st), Err(Error::Validation(_))));
    }

    #[test]
    fn text_only_batches_leave_guidance_gradients_at_zero() {
        let d = data(4);
        let mut m = Model::new(ModelConfig::tiny(), 0).unwrap();
        // Non-zero interaction layers, so active signals would give gradients.
        for id in m.store.with_prefix("amg.inject") {
            m.store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.3);
        }
        m.store.train_only(|n| Stage::Amg.trains(n));
        m.store.zero_grad();
        let items: Vec<&DataItem> = d.iter().collect();
        let sigs: Vec<SignalSet> = d.iter().map(|_| SignalSet::default()).collect();
        let sched = NoiseSchedule::linear(m.cfg.timesteps).unwrap();
        batch_loss(&mut m, &sched, &items, &sigs, Mode::FULL, &mut ChaCha8Rng::seed_from_u64(0), true).unwrap();
        for id in m.store.trainable() {
            assert_eq!(m.store.grad(id).max_abs(), 0.0, "{}", m.store.name(id));
        }
    }
}
