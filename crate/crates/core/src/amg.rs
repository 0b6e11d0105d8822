//! Adaptive multi-modal guidance: validation of the active control signals,
//! the signal encoder producing `C_unif`, the adaptive controller producing
//! the structured intent `C_str`, and its per-block injection.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::encoders::{BoxEncoder, ImageEncoder, ImageRole};
use crate::error::{Error, Result};
use crate::geometry::NormBox;
use crate::image::Image;
use crate::tensor::nn::{ragged_segments, residual, self_segments, tile_rows, uniform_segments, AttentionParams, FeedForward, KeyValueOut, LayerNorm};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

const MODALITY_STRUCTURE: usize = 0;
const MODALITY_OBJECT: usize = 1;
const MODALITY_BOX: usize = 2;

/// The active control signals of one request.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SignalSet {
    pub structure: Option<Image>,
    pub objects: Vec<Image>,
    pub boxes: Vec<NormBox>,
}

impl SignalSet {
    pub fn is_empty(&self) -> bool {
        self.structure.is_none() && self.objects.is_empty() && self.boxes.is_empty()
    }

    /// Structure references and boxes both fix the layout and may not be
    /// combined.
    pub fn validate(&self) -> Result<()> {
        if self.structure.is_some() && !self.boxes.is_empty() {
            return Err(Error::validation(
                "a structure reference and bounding boxes are mutually exclusive layout signals",
            ));
        }
        for b in &self.boxes {
            b.validate()?;
        }
        Ok(())
    }

    pub fn config(&self) -> SignalConfig {
        match (self.structure.is_some(), !self.objects.is_empty(), !self.boxes.is_empty()) {
            (false, false, false) => SignalConfig::T,
            (true, false, false) => SignalConfig::TS,
            (false, true, false) => SignalConfig::TO,
            (false, false, true) => SignalConfig::TB,
            (false, true, true) => SignalConfig::TOB,
            (true, true, false) => SignalConfig::TSO,
            (true, _, true) => SignalConfig::Invalid,
        }
    }

    /// Rows this set contributes to `C_unif`.
    pub fn unified_len(&self, cfg: &ModelConfig) -> usize {
        self.structure.as_ref().map_or(0, |_| cfg.structure_tokens())
            + self.objects.len() * cfg.object_tokens()
            + self.boxes.len()
    }
}

/// The six legal signal combinations (text is always present).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SignalConfig {
    T,
    TS,
    TO,
    TB,
    TOB,
    TSO,
    /// Structure together with boxes; never produced by [`SignalConfig::ALL`].
    Invalid,
}

impl SignalConfig {
    pub const ALL: [SignalConfig; 6] = [
        SignalConfig::T,
        SignalConfig::TS,
        SignalConfig::TO,
        SignalConfig::TB,
        SignalConfig::TOB,
        SignalConfig::TSO,
    ];

    pub fn uses_structure(self) -> bool {
        matches!(self, SignalConfig::TS | SignalConfig::TSO | SignalConfig::Invalid)
    }

    pub fn uses_objects(self) -> bool {
        matches!(self, SignalConfig::TO | SignalConfig::TOB | SignalConfig::TSO)
    }

    pub fn uses_boxes(self) -> bool {
        matches!(self, SignalConfig::TB | SignalConfig::TOB | SignalConfig::Invalid)
    }

    /// Keeps only the signals this configuration activates.
    pub fn select(self, structure: &Image, objects: &[Image], boxes: &[NormBox]) -> SignalSet {
        SignalSet {
            structure: self.uses_structure().then(|| structure.clone()),
            objects: if self.uses_objects() { objects.to_vec() } else { Vec::new() },
            boxes: if self.uses_boxes() { boxes.to_vec() } else { Vec::new() },
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        SignalConfig::ALL
            .into_iter()
            .find(|c| c.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::validation(format!("unknown signal configuration {s:?}")))
    }
}

impl fmt::Display for SignalConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SignalConfig::T => "T",
            SignalConfig::TS => "T+S",
            SignalConfig::TO => "T+O",
            SignalConfig::TB => "T+B",
            SignalConfig::TOB => "T+O+B",
            SignalConfig::TSO => "T+S+O",
            SignalConfig::Invalid => "T+S+B",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug)]
pub struct Amg {
    pub modality: ParamId,
    pub signal_attn: AttentionParams,
    pub q_str: ParamId,
    pub ctrl_cross: AttentionParams,
    pub ctrl_self: AttentionParams,
    pub ctrl_ln: LayerNorm,
    pub ctrl_ffn: FeedForward,
    /// One intent interaction layer per backbone block, output projection
    /// zero-initialized.
    pub inject: Vec<KeyValueOut>,
    pub l_str: usize,
    pub l_net: usize,
}

impl Amg {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let (d, h) = (cfg.d, cfg.n_heads);
        Amg {
            modality: store.add_normal("amg.modality", &[3, d], 0.5, rng),
            signal_attn: AttentionParams::new(store, "amg.signal.attn", d, d, d, d, h, 0.5, rng),
            q_str: store.add_normal("amg.ctrl.queries", &[cfg.l_str, d], 1.0, rng),
            ctrl_cross: AttentionParams::new(store, "amg.ctrl.cross", d, d, d, d, h, 1.0, rng),
            ctrl_self: AttentionParams::new(store, "amg.ctrl.self", d, d, d, d, h, 0.5, rng),
            ctrl_ln: LayerNorm::new(store, "amg.ctrl.ln", d),
            ctrl_ffn: FeedForward::new(store, "amg.ctrl.ffn", d, 1.0, rng),
            inject: (0..cfg.n_blocks)
                .map(|b| KeyValueOut::new(store, &format!("amg.inject.{b}"), d, cfg.d_net, cfg.d_net, h, 0.0, rng))
                .collect(),
            l_str: cfg.l_str,
            l_net: cfg.l_net(),
        }
    }

    /// `C_unif` for a batch of non-empty signal sets: per item
    /// `[F_s; F_o; F_b]` plus modality embeddings, then one residual
    /// self-attention within each item. Returns the stacked rows and each
    /// item's `L_unif`.
    pub fn encode_signals(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        images: &ImageEncoder,
        boxes: &BoxEncoder,
        sets: &[&SignalSet],
    ) -> Result<(Var, Vec<usize>)> {
        for s in sets {
            s.validate()?;
            if s.is_empty() {
                return Err(Error::contract("an empty signal set must bypass guidance"));
            }
        }
        // Encode each modality for the whole batch at once, then reorder
        // rows into per-item [S; O; B] blocks.
        let mut s_patches = Vec::new();
        let mut s_pos = Vec::new();
        let mut o_patches = Vec::new();
        let mut o_pos = Vec::new();
        let mut box_list = Vec::new();
        for s in sets {
            if let Some(img) = &s.structure {
                let (p, pos) = images.patches(img, ImageRole::Structure)?;
                s_patches.push(p);
                s_pos.push(pos);
            }
            for img in &s.objects {
                let (p, pos) = images.patches(img, ImageRole::Object)?;
                o_patches.push(p);
                o_pos.push(pos);
            }
            box_list.extend_from_slice(&s.boxes);
        }
        let stack = |ts: &[Tensor]| Tensor::concat_rows(&ts.iter().collect::<Vec<_>>());
        let mut parts = Vec::new();
        let mut offsets = [0usize; 3];
        let mut total = 0;
        if !s_patches.is_empty() {
            let v = images.forward(tape, store, stack(&s_patches)?, stack(&s_pos)?)?;
            offsets[MODALITY_STRUCTURE] = total;
            total += tape.value(v).rows();
            parts.push(v);
        }
        if !o_patches.is_empty() {
            let v = images.forward(tape, store, stack(&o_patches)?, stack(&o_pos)?)?;
            offsets[MODALITY_OBJECT] = total;
            total += tape.value(v).rows();
            parts.push(v);
        }
        if !box_list.is_empty() {
            let v = boxes.forward(tape, store, BoxEncoder::features(&box_list)?)?;
            offsets[MODALITY_BOX] = total;
            parts.push(v);
        }
        let all = tape.concat_rows(&parts)?;

        let mut order = Vec::new();
        let mut types = Vec::new();
        let mut lens = Vec::with_capacity(sets.len());
        let mut cursor = offsets;
        let (mut s_next, mut o_next) = (s_patches.iter(), o_patches.iter());
        for s in sets {
            let start = order.len();
            if s.structure.is_some() {
                let n = s_next.next().map_or(0, Tensor::rows);
                push_range(&mut order, &mut types, &mut cursor, MODALITY_STRUCTURE, n);
            }
            for _ in &s.objects {
                let n = o_next.next().map_or(0, Tensor::rows);
                push_range(&mut order, &mut types, &mut cursor, MODALITY_OBJECT, n);
            }
            push_range(&mut order, &mut types, &mut cursor, MODALITY_BOX, s.boxes.len());
            lens.push(order.len() - start);
        }
        let f = tape.gather_rows(all, order)?;
        let table = tape.param(store, self.modality);
        let type_rows = tape.gather_rows(table, types)?;
        let x = tape.add(f, type_rows)?;
        let a = self.signal_attn.forward(tape, store, x, x, self_segments(&lens))?;
        Ok((residual(tape, x, a)?, lens))
    }

    /// Structured intent for stacked `C_unif` rows:
    /// `C' = SelfAttn(CrossAttn(Q_str, C_unif))`, `C_str = FFN(LN(C'))`.
    /// Output is `(items * l_str) x d`.
    pub fn adaptive_control(&self, tape: &mut Tape, store: &ParamStore, c_unif: Var, lens: &[usize]) -> Result<Var> {
        let cross = self.control_cross(tape, store, c_unif, lens)?;
        let s = self.ctrl_self.forward(tape, store, cross, cross, uniform_segments(lens.len(), self.l_str, self.l_str))?;
        let c = residual(tape, cross, s)?;
        let n = self.ctrl_ln.forward(tape, store, c)?;
        self.ctrl_ffn.forward(tape, store, n)
    }

    /// The first attention stage alone: intent queries over `C_unif`.
    pub fn control_cross(&self, tape: &mut Tape, store: &ParamStore, c_unif: Var, lens: &[usize]) -> Result<Var> {
        if lens.is_empty() || lens.contains(&0) {
            return Err(Error::contract("the adaptive controller needs at least one signal row per item"));
        }
        let q = tape.param(store, self.q_str);
        let q = tile_rows(tape, q, lens.len())?;
        self.ctrl_cross.forward(tape, store, q, c_unif, ragged_segments(self.l_str, lens))
    }

    /// `V_amg = CrossAttn(Q_net, C_str)` for block `block_idx`; `q_net` holds
    /// the active items' queries stacked `l_net` rows each.
    pub fn intent_inject(&self, tape: &mut Tape, store: &ParamStore, block_idx: usize, q_net: Var, c_str: Var) -> Result<Var> {
        let items = tape.value(c_str).rows() / self.l_str;
        let layer = self
            .inject
            .get(block_idx)
            .ok_or_else(|| Error::contract(format!("no intent interaction layer at block {block_idx}")))?;
        layer.forward(tape, store, q_net, c_str, uniform_segments(items, self.l_net, self.l_str))
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = vec![self.modality, self.q_str];
        p.extend(self.signal_attn.params());
        p.extend(self.ctrl_cross.params());
        p.extend(self.ctrl_self.params());
        p.extend(self.ctrl_ln.params());
        p.extend(self.ctrl_ffn.params());
        for l in &self.inject {
            p.extend(l.params());
        }
        p
    }
}

fn push_range(order: &mut Vec<usize>, types: &mut Vec<usize>, cursor: &mut [usize; 3], modality: usize, n: usize) {
    order.extend(cursor[modality]..cursor[modality] + n);
    types.extend(std::iter::repeat_n(modality, n));
    cursor[modality] += n;
}

/// `V_mogen = V_rsa + V_amg` for the items listed in `active`; all other
/// items keep `V_rsa` untouched. `v_amg` stacks the active items' rows in
/// the order of `active`.
pub fn fuse(tape: &mut Tape, v_rsa: Var, v_amg: Option<(Var, &[usize])>, rows_per_item: usize) -> Result<Var> {
    let Some((v_amg, active)) = v_amg else {
        return Ok(v_rsa);
    };
    let total = tape.value(v_rsa).rows();
    let batch = total / rows_per_item;
    if active.len() == batch && active.iter().enumerate().all(|(i, &a)| i == a) {
        return tape.add(v_rsa, v_amg);
    }
    let rows: Vec<usize> = active
        .iter()
        .flat_map(|&i| i * rows_per_item..(i + 1) * rows_per_item)
        .collect();
    let sub = tape.gather_rows(v_rsa, rows)?;
    let fused = tape.add(sub, v_amg)?;
    let mut slot = vec![None; batch];
    for (k, &i) in active.iter().enumerate() {
        slot[i] = Some(k);
    }
    let slot = &slot;
    let index = (0..batch)
        .flat_map(|i| {
            (0..rows_per_item).map(move |r| match slot[i] {
                Some(k) => total + k * rows_per_item + r,
                None => i * rows_per_item + r,
            })
        })
        .collect::<Vec<_>>();
    let both = tape.concat_rows(&[v_rsa, fused])?;
    tape.gather_rows(both, index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{grad_check, randomize_for_check};
    use crate::tensor::tests::probe_loss;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    struct Fixture {
        cfg: ModelConfig,
        store: ParamStore,
        amg: Amg,
        images: ImageEncoder,
        boxes: BoxEncoder,
        rng: ChaCha8Rng,
    }

    fn fixture(cfg: ModelConfig) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let images = ImageEncoder::new(&mut store, &cfg, &mut rng);
        let boxes = BoxEncoder::new(&mut store, &cfg, &mut rng);
        let amg = Amg::new(&mut store, &cfg, &mut rng);
        Fixture { cfg, store, amg, images, boxes, rng }
    }

    fn noise_image(size: usize, rng: &mut ChaCha8Rng) -> Image {
        Image::new(size, size, (0..size * size * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
    }

    fn boxes3() -> Vec<NormBox> {
        vec![
            NormBox::new(0.1, 0.1, 0.3, 0.3).unwrap(),
            NormBox::new(0.5, 0.1, 0.8, 0.4).unwrap(),
            NormBox::new(0.2, 0.6, 0.5, 0.9).unwrap(),
        ]
    }

    fn unify(f: &Fixture, set: &SignalSet) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let (v, _) = f.amg.encode_signals(&mut tape, &f.store, &f.images, &f.boxes, &[set])?;
        Ok(tape.value(v).clone())
    }

    #[test]
    fn legal_configurations() {
        let img = Image::filled(32, 32, [0.5; 3]);
        let b = boxes3();
        for c in SignalConfig::ALL {
            let s = c.select(&img, std::slice::from_ref(&img), &b);
            s.validate().unwrap();
            assert_eq!(s.config(), c);
            assert_eq!(SignalConfig::parse(&c.to_string()).unwrap(), c);
        }
        let bad = SignalSet { structure: Some(img), objects: vec![], boxes: b };
        assert!(matches!(bad.validate(), Err(Error::Validation(_))));
        assert!(SignalSet::default().is_empty());
    }

    #[test]
    fn unified_lengths_add_up() {
        let mut f = fixture(ModelConfig::default());
        let only_boxes = SignalSet { boxes: boxes3(), ..Default::default() };
        assert_eq!(unify(&f, &only_boxes).unwrap().rows(), 3);
        let s = noise_image(32, &mut f.rng);
        let o1 = noise_image(32, &mut f.rng);
        let o2 = noise_image(32, &mut f.rng);
        let so = SignalSet { structure: Some(s.clone()), objects: vec![o1.clone(), o2], boxes: vec![] };
        assert_eq!(unify(&f, &so).unwrap().rows(), 24);
        assert_eq!(so.unified_len(&f.cfg), 24);
        let fewer = SignalSet { structure: Some(s), objects: vec![o1], boxes: vec![] };
        assert_eq!(unify(&f, &fewer).unwrap().rows(), 20);
        assert!(matches!(unify(&f, &SignalSet::default()), Err(Error::Contract(_))));
        let both = SignalSet { structure: Some(Image::filled(32, 32, [0.0; 3])), objects: vec![], boxes: boxes3() };
        assert!(matches!(unify(&f, &both), Err(Error::Validation(_))));
    }

    #[test]
    fn batched_encoding_matches_single_items() {
        let mut f = fixture(ModelConfig::default());
        let a = SignalSet { structure: Some(noise_image(32, &mut f.rng)), objects: vec![noise_image(32, &mut f.rng)], boxes: vec![] };
        let b = SignalSet { objects: vec![noise_image(32, &mut f.rng)], boxes: boxes3()[..2].to_vec(), ..Default::default() };
        let mut tape = Tape::inference();
        let (v, lens) = f.amg.encode_signals(&mut tape, &f.store, &f.images, &f.boxes, &[&a, &b]).unwrap();
        assert_eq!(lens, [20, 6]);
        let joint = tape.value(v);
        let ua = unify(&f, &a).unwrap();
        let ub = unify(&f, &b).unwrap();
        assert!(joint.slice_rows(0, 20).max_abs_diff(&ua) < 1e-12);
        assert!(joint.slice_rows(20, 6).max_abs_diff(&ub) < 1e-12);
    }

    fn control(f: &Fixture, c: &Tensor) -> Tensor {
        let mut tape = Tape::inference();
        let x = tape.constant(c.clone());
        let y = f.amg.adaptive_control(&mut tape, &f.store, x, &[c.rows()]).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn controller_shape_and_row_order_invariance() {
        let mut f = fixture(ModelConfig::default());
        for l in [1, 3, 24] {
            let c = random(l, f.cfg.d, &mut f.rng);
            let out = control(&f, &c);
            assert_eq!(out.shape(), &[f.cfg.l_str, f.cfg.d]);
            let rev: Vec<Vec<f64>> = (0..l).rev().map(|r| c.row(r).to_vec()).collect();
            assert!(out.max_abs_diff(&control(&f, &Tensor::from_rows(&rev).unwrap())) < 1e-12);
        }
        let mut tape = Tape::inference();
        let x = tape.constant(Tensor::zeros(&[0, f.cfg.d]));
        assert!(matches!(f.amg.adaptive_control(&mut tape, &f.store, x, &[0]), Err(Error::Contract(_))));
    }

    #[test]
    fn single_signal_row_collapses_the_cross_stage() {
        let mut f = fixture(ModelConfig::default());
        let c = random(1, f.cfg.d, &mut f.rng);
        let mut tape = Tape::inference();
        let x = tape.constant(c);
        let y = f.amg.control_cross(&mut tape, &f.store, x, &[1]).unwrap();
        let y = tape.value(y);
        for r in 1..f.cfg.l_str {
            assert_eq!(y.row(r), y.row(0));
        }
    }

    #[test]
    fn zero_initialized_injection_is_silent() {
        let mut f = fixture(ModelConfig::default());
        let mut tape = Tape::inference();
        let q = tape.constant(random(f.cfg.l_net(), f.cfg.d_net, &mut f.rng));
        let c = tape.constant(random(f.cfg.l_str, f.cfg.d, &mut f.rng));
        let v = f.amg.intent_inject(&mut tape, &f.store, 2, q, c).unwrap();
        assert_eq!(tape.value(v).shape(), &[f.cfg.l_net(), f.cfg.d_net]);
        assert!(tape.value(v).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn fuse_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::inference();
        let v_rsa = tape.constant(random(6, 4, &mut rng));
        assert_eq!(fuse(&mut tape, v_rsa, None, 2).unwrap(), v_rsa);
        let zero = tape.constant(Tensor::zeros(&[6, 4]));
        let out = fuse(&mut tape, v_rsa, Some((zero, &[0, 1, 2])), 2).unwrap();
        assert!(tape.value(out).bit_eq(tape.value(v_rsa)));
        let amg = random(2, 4, &mut rng);
        let v_amg = tape.constant(amg.clone());
        let out = fuse(&mut tape, v_rsa, Some((v_amg, &[1])), 2).unwrap();
        let (o, r) = (tape.value(out).clone(), tape.value(v_rsa).clone());
        for row in 0..6 {
            for c in 0..4 {
                let want = if (2..4).contains(&row) { r.at(row, c) + amg.at(row - 2, c) } else { r.at(row, c) };
                assert_eq!(o.at(row, c), want);
            }
        }
    }

    #[test]
    fn guidance_gradients_match_finite_differences() {
        let mut f = fixture(ModelConfig::tiny());
        let set = SignalSet {
            structure: Some(noise_image(16, &mut f.rng)),
            objects: vec![noise_image(16, &mut f.rng)],
            boxes: vec![],
        };
        let set2 = SignalSet { objects: vec![noise_image(16, &mut f.rng)], boxes: boxes3(), ..Default::default() };
        let q = random(2 * f.cfg.l_net(), f.cfg.d_net, &mut f.rng);
        let mut params = f.amg.params();
        params.extend(f.images.proj.params());
        params.extend(f.boxes.fc1.params());
        params.extend(f.boxes.fc2.params());
        // Also moves the zero-initialized interaction outputs off zero so
        // every upstream weight carries gradient.
        randomize_for_check(&mut f.store, &params, &mut f.rng);
        let (amg, images, boxes) = (f.amg.clone(), f.images.clone(), f.boxes.clone());
        let report = grad_check(
            |tape, store| {
                let (c, lens) = amg.encode_signals(tape, store, &images, &boxes, &[&set, &set2])?;
                let c_str = amg.adaptive_control(tape, store, c, &lens)?;
                let qv = tape.constant(q.clone());
                let v = amg.intent_inject(tape, store, 1, qv, c_str)?;
                probe_loss(tape, v, 4)
            },
            &mut f.store,
            &params,
            1e-5,
        )
        .unwrap();
        assert!(report.max_error() < 1e-6, "{:?}", report.worst());
    }
}
