//! The full conditional denoiser: encoders, semantic parser, guidance and
//! backbone over one parameter store, plus batched DDIM sampling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::amg::{fuse, Amg, SignalSet};
use crate::backbone::Backbone;
use crate::config::ModelConfig;
use crate::encoders::{BoxEncoder, ImageEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rsa::{rsa_inject, CrossSource, RsaBlockAdapters, RsaOutput, SemanticBundle, SemanticParser};
use crate::schedule::NoiseSchedule;
use crate::tensor::nn::uniform_segments;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

/// Which conditioning modules take part in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mode {
    /// Text reaches the backbone through the semantic parser (otherwise the
    /// raw text embedding is used, as during backbone pretraining).
    pub rsa: bool,
    /// Active control signals are turned into structured intent.
    pub amg: bool,
}

impl Mode {
    pub const BASELINE: Mode = Mode { rsa: false, amg: false };
    pub const RSA_ONLY: Mode = Mode { rsa: true, amg: false };
    pub const AMG_ONLY: Mode = Mode { rsa: false, amg: true };
    pub const FULL: Mode = Mode { rsa: true, amg: true };

    pub fn name(self) -> &'static str {
        match (self.rsa, self.amg) {
            (false, false) => "baseline",
            (true, false) => "rsa-only",
            (false, true) => "amg-only",
            (true, true) => "full",
        }
    }
}

/// Per-batch conditioning, ready to be consumed by every block.
#[derive(Clone, Debug)]
pub struct Context {
    pub batch: usize,
    pub t_emb: Var,
    pub bundle: Option<SemanticBundle>,
    /// Normalized text rows feeding every block's text cross-attention.
    pub glob: CrossSource,
    pub phrase: Option<CrossSource>,
    /// Structured intent of the items with active signals, and their batch
    /// indices.
    pub intent: Option<(Var, Vec<usize>)>,
}

impl Context {
    /// Copies the context values onto another tape as constants.
    pub fn transfer(&self, from: &Tape, to: &mut Tape) -> Context {
        let mut mv = |v: Var| to.constant(from.value(v).clone());
        let t_emb = mv(self.t_emb);
        let bundle = self.bundle.map(|b| SemanticBundle { t_glob: mv(b.t_glob), t_phr: mv(b.t_phr) });
        let glob = CrossSource { var: mv(self.glob.var), segments: self.glob.segments.clone() };
        let phrase = self
            .phrase
            .as_ref()
            .map(|p| CrossSource { var: mv(p.var), segments: p.segments.clone() });
        let intent = self.intent.as_ref().map(|(v, a)| (mv(*v), a.clone()));
        Context { batch: self.batch, t_emb, bundle, glob, phrase, intent }
    }
}

/// Values recorded during one denoiser pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub eps: Var,
    /// Hidden state entering each block.
    pub block_inputs: Vec<Var>,
    pub rsa: Vec<RsaOutput>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub text: TextEncoder,
    pub images: ImageEncoder,
    pub boxes: BoxEncoder,
    pub parser: SemanticParser,
    pub adapters: RsaBlockAdapters,
    pub amg: Amg,
    pub backbone: Backbone,
}

impl Model {
    /// Fresh parameters drawn from `seed`. Construction order is fixed, so
    /// the same seed always yields the same weights.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let text = TextEncoder::new(&mut store, &cfg, &mut rng);
        let images = ImageEncoder::new(&mut store, &cfg, &mut rng);
        let boxes = BoxEncoder::new(&mut store, &cfg, &mut rng);
        let backbone = Backbone::new(&mut store, &cfg, &mut rng);
        let parser = SemanticParser::new(&mut store, &cfg, &mut rng);
        let adapters = RsaBlockAdapters::new(&mut store, &cfg, &mut rng);
        let amg = Amg::new(&mut store, &cfg, &mut rng);
        Ok(Model { cfg, store, text, images, boxes, parser, adapters, amg, backbone })
    }

    pub fn image_len(&self) -> usize {
        self.cfg.image_size * self.cfg.image_size * 3
    }

    /// Encodes prompts and signals. Items whose signal set is empty (or all
    /// items when guidance is off) bypass guidance entirely.
    pub fn context(&self, tape: &mut Tape, prompts: &[&str], signals: &[&SignalSet], mode: Mode) -> Result<Context> {
        let batch = prompts.len();
        if batch == 0 {
            return Err(Error::validation("empty batch"));
        }
        if signals.len() != batch {
            return Err(Error::dim(format!("{} signal sets for {batch} prompts", signals.len())));
        }
        for s in signals {
            s.validate()?;
        }
        let (l_emb, l_net) = (self.cfg.l_emb, self.cfg.l_net());
        let t_emb = self.text.forward(tape, &self.store, prompts)?;
        let (text_rows, bundle) = if mode.rsa {
            let key_lens: Vec<usize> = prompts
                .iter()
                .map(|p| match self.text.vocab.encode(p, l_emb).1 {
                    0 => l_emb,
                    n => n,
                })
                .collect();
            let b = self.parser.parse(tape, &self.store, t_emb, &key_lens)?;
            (b.t_glob, Some(b))
        } else {
            (t_emb, None)
        };
        let glob = self.backbone.text_ln.forward(tape, &self.store, text_rows)?;
        let glob = CrossSource { var: glob, segments: uniform_segments(batch, l_net, l_emb) };
        let phrase = bundle.map(|b| CrossSource {
            var: b.t_phr,
            segments: uniform_segments(batch, l_net, self.cfg.l_phr),
        });
        let intent = if mode.amg {
            let active: Vec<usize> = (0..batch).filter(|&i| !signals[i].is_empty()).collect();
            if active.is_empty() {
                None
            } else {
                let sets: Vec<&SignalSet> = active.iter().map(|&i| signals[i]).collect();
                let (c_unif, lens) = self.amg.encode_signals(tape, &self.store, &self.images, &self.boxes, &sets)?;
                let c_str = self.amg.adaptive_control(tape, &self.store, c_unif, &lens)?;
                Some((c_str, active))
            }
        } else {
            None
        };
        Ok(Context { batch, t_emb, bundle, glob, phrase, intent })
    }

    /// Noise prediction for `x_t` (`batch x H*W*3`, model space `[-1, 1]`).
    pub fn denoise(&self, tape: &mut Tape, x_t: Var, ts: &[usize], ctx: &Context) -> Result<Forward> {
        let batch = ctx.batch;
        if ts.len() != batch || tape.value(x_t).shape() != [batch, self.image_len()] {
            return Err(Error::dim(format!(
                "expected {batch} timesteps and a {batch}x{} input, got {} and {:?}",
                self.image_len(),
                ts.len(),
                tape.value(x_t).shape()
            )));
        }
        let st = &self.store;
        let l_net = self.cfg.l_net();
        let mut h = self.backbone.embed(tape, st, x_t, ts)?;
        let mut block_inputs = Vec::with_capacity(self.cfg.n_blocks);
        let mut rsa_out = Vec::with_capacity(self.cfg.n_blocks);
        for b in 0..self.cfg.n_blocks {
            block_inputs.push(h);
            let (h1, q) = self.backbone.pre_cross(tape, st, b, h, batch)?;
            let adapters = ctx.phrase.as_ref().map(|p| (&self.adapters, p));
            let r = rsa_inject(tape, st, q, b, &self.backbone.blocks[b].text, &ctx.glob, adapters)?;
            rsa_out.push(r);
            let v = match &ctx.intent {
                Some((c_str, active)) => {
                    let q_act = if active.len() == batch {
                        q
                    } else {
                        let rows = active.iter().flat_map(|&i| i * l_net..(i + 1) * l_net).collect();
                        tape.gather_rows(q, rows)?
                    };
                    let v_amg = self.amg.intent_inject(tape, st, b, q_act, *c_str)?;
                    fuse(tape, r.v_rsa, Some((v_amg, active)), l_net)?
                }
                None => fuse(tape, r.v_rsa, None, l_net)?,
            };
            h = self.backbone.post_cross(tape, st, b, h1, v)?;
        }
        let eps = self.backbone.head(tape, st, h, batch)?;
        Ok(Forward { eps, block_inputs, rsa: rsa_out })
    }

    /// Deterministic DDIM sampling; item `i` starts from noise drawn with
    /// `seeds[i]`, so results do not depend on how items are batched.
    pub fn sample(
        &self,
        prompts: &[&str],
        signals: &[&SignalSet],
        mode: Mode,
        seeds: &[u64],
        n_steps: usize,
        sched: &NoiseSchedule,
    ) -> Result<Vec<Image>> {
        if seeds.len() != prompts.len() {
            return Err(Error::dim("one seed per prompt is required"));
        }
        let n = self.image_len();
        let mut ctx_tape = Tape::inference();
        let ctx = self.context(&mut ctx_tape, prompts, signals, mode)?;
        let mut x = Vec::with_capacity(seeds.len() * n);
        for &s in seeds {
            x.extend(initial_noise(s, n));
        }
        let out = sched.ddim_sample(n_steps, x, |x_t, t| {
            let mut tape = Tape::inference();
            let c = ctx.transfer(&ctx_tape, &mut tape);
            let xv = tape.constant(Tensor::matrix(seeds.len(), n, x_t.to_vec())?);
            let f = self.denoise(&mut tape, xv, &vec![t; seeds.len()], &c)?;
            Ok(tape.value(f.eps).data().to_vec())
        })?;
        let s = self.cfg.image_size;
        out.chunks(n).map(|c| Image::new(s, s, c.iter().map(|&v| to_unit(v)).collect())).collect()
    }
}

/// Standard-normal starting noise for one sample.
pub fn initial_noise(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Pixel value in `[0, 1]` to model space `[-1, 1]`.
pub fn to_model(v: f64) -> f64 {
    2.0 * v - 1.0
}

/// Model space to a clamped pixel value.
pub fn to_unit(v: f64) -> f64 {
    ((v + 1.0) / 2.0).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::NormBox;
    use rand::Rng;

    fn tiny() -> Model {
        Model::new(ModelConfig::tiny(), 1).unwrap()
    }

    fn run(m: &Model, prompts: &[&str], signals: &[&SignalSet], mode: Mode, x: &Tensor, ts: &[usize]) -> Tensor {
        let mut tape = Tape::inference();
        let ctx = m.context(&mut tape, prompts, signals, mode).unwrap();
        let xv = tape.constant(x.clone());
        let f = m.denoise(&mut tape, xv, ts, &ctx).unwrap();
        tape.value(f.eps).clone()
    }

    fn noise(m: &Model, batch: usize, seed: u64) -> Tensor {
        let n = m.image_len();
        Tensor::matrix(batch, n, (0..batch as u64).flat_map(|b| initial_noise(seed + b, n)).collect()).unwrap()
    }

    fn boxes() -> SignalSet {
        SignalSet { boxes: vec![NormBox::new(0.1, 0.2, 0.5, 0.6).unwrap()], ..Default::default() }
    }

    #[test]
    fn output_shape_matches_input() {
        let m = tiny();
        let x = noise(&m, 2, 0);
        let e = SignalSet::default();
        let out = run(&m, &["a", "b c"], &[&e, &e], Mode::FULL, &x, &[3, 7]);
        assert_eq!(out.shape(), x.shape());
    }

    #[test]
    fn empty_signals_bypass_guidance_bit_exactly() {
        let mut m = tiny();
        // Non-zero interaction layers, so guidance would change the output.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for id in m.store.with_prefix("amg.inject") {
            m.store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
        let x = noise(&m, 2, 4);
        let (e, b) = (SignalSet::default(), boxes());
        let rsa = run(&m, &["one red circle", "two"], &[&e, &e], Mode::RSA_ONLY, &x, &[5, 9]);
        let full = run(&m, &["one red circle", "two"], &[&e, &e], Mode::FULL, &x, &[5, 9]);
        assert!(full.bit_eq(&rsa));
        // Mixed batch: only the guided item changes.
        let mixed = run(&m, &["one red circle", "two"], &[&e, &b], Mode::FULL, &x, &[5, 9]);
        assert_eq!(mixed.row(0), rsa.row(0));
        assert_ne!(mixed.row(1), rsa.row(1));
    }

    #[test]
    fn zero_initialized_guidance_matches_the_unguided_model() {
        let m = tiny();
        let x = noise(&m, 1, 8);
        let (e, b) = (SignalSet::default(), boxes());
        let plain = run(&m, &["three blue squares"], &[&e], Mode::FULL, &x, &[11]);
        let guided = run(&m, &["three blue squares"], &[&b], Mode::FULL, &x, &[11]);
        assert!(plain.bit_eq(&guided));
    }

    #[test]
    fn phrase_semantics_do_not_reach_earlier_blocks() {
        let m = tiny();
        let x = noise(&m, 1, 2);
        let e = SignalSet::default();
        let mut tape = Tape::inference();
        let ctx = m.context(&mut tape, &["a red circle"], &[&e], Mode::RSA_ONLY).unwrap();
        let mut other = ctx.clone();
        let phr = other.phrase.as_ref().unwrap();
        let shape = tape.value(phr.var).shape().to_vec();
        let swapped = tape.constant(Tensor::full(&shape, 0.7));
        other.phrase.as_mut().unwrap().var = swapped;
        let xv = tape.constant(x);
        let a = m.denoise(&mut tape, xv, &[4], &ctx).unwrap();
        let b = m.denoise(&mut tape, xv, &[4], &other).unwrap();
        let layout = m.cfg.layout_index();
        for blk in 0..=layout {
            assert!(tape.value(a.block_inputs[blk]).bit_eq(tape.value(b.block_inputs[blk])));
        }
        assert!(!tape.value(a.eps).bit_eq(tape.value(b.eps)));
    }

    #[test]
    fn sampling_is_deterministic_and_batch_independent() {
        let m = tiny();
        let sched = NoiseSchedule::linear(m.cfg.timesteps).unwrap();
        let e = SignalSet::default();
        let a = m.sample(&["x", "y"], &[&e, &e], Mode::RSA_ONLY, &[1, 2], 4, &sched).unwrap();
        let b = m.sample(&["x", "y"], &[&e, &e], Mode::RSA_ONLY, &[1, 2], 4, &sched).unwrap();
        assert_eq!(a, b);
        let single = m.sample(&["y"], &[&e], Mode::RSA_ONLY, &[2], 4, &sched).unwrap();
        assert!(a[1].data.iter().zip(&single[0].data).all(|(p, q)| (p - q).abs() < 1e-12));
    }
}
