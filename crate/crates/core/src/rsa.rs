//! Regional semantic anchoring: a semantic parser that turns text
//! embeddings into global semantics `T_glob` and phrase-level semantics
//! `T_phr`, and the block-gated injection of both into the backbone.
//!
//! The global path reuses each backbone block's own text cross-attention;
//! phrase semantics get a dedicated cross-attention at the layout block only.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::nn::{residual, tile_rows, uniform_segments, AttentionParams, FeedForward, KeyValueOut, LayerNorm, Linear};
use crate::tensor::{AttnSegment, ParamId, ParamStore, Tape, Tensor, Var};

/// Gain of the residual sublayers inside the parser. Small, so that a fresh
/// parser starts close to `LN(T_emb)` while every weight still receives
/// gradient.
const PARSER_RESIDUAL_GAIN: f64 = 0.05;

/// Global and phrase-level semantics for a batch, stacked per item.
#[derive(Clone, Copy, Debug)]
pub struct SemanticBundle {
    /// `(batch * l_emb) x d`.
    pub t_glob: Var,
    /// `(batch * l_phr) x d`.
    pub t_phr: Var,
}

#[derive(Clone, Debug)]
pub struct SemanticParser {
    pub glob_attn: AttentionParams,
    pub glob_ffn: FeedForward,
    pub glob_ln: LayerNorm,
    pub glob_fc: Linear,
    pub q_phr: ParamId,
    pub phr_cross: AttentionParams,
    pub phr_self: AttentionParams,
    pub phr_ln: LayerNorm,
    pub phr_fc: Linear,
    pub l_emb: usize,
    pub l_phr: usize,
}

impl SemanticParser {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let (d, h) = (cfg.d, cfg.n_heads);
        let g = PARSER_RESIDUAL_GAIN;
        SemanticParser {
            glob_attn: AttentionParams::new(store, "rsa.glob.attn", d, d, d, d, h, g, rng),
            glob_ffn: FeedForward::new(store, "rsa.glob.ffn", d, g, rng),
            glob_ln: LayerNorm::new(store, "rsa.glob.ln", d),
            glob_fc: Linear::identity(store, "rsa.glob.fc", d),
            q_phr: store.add_normal("rsa.phr.queries", &[cfg.l_phr, d], 1.0, rng),
            phr_cross: AttentionParams::new(store, "rsa.phr.cross", d, d, d, d, h, 1.0, rng),
            phr_self: AttentionParams::new(store, "rsa.phr.self", d, d, d, d, h, g, rng),
            phr_ln: LayerNorm::new(store, "rsa.phr.ln", d),
            phr_fc: Linear::identity(store, "rsa.phr.fc", d),
            l_emb: cfg.l_emb,
            l_phr: cfg.l_phr,
        }
    }

    /// `T' = FFN(SelfAttn(T_emb))` with residual sublayers, then
    /// `T_glob = FC(LN(T'))`. Row-wise apart from the self-attention, so the
    /// map is permutation equivariant.
    pub fn sp_global(&self, tape: &mut Tape, store: &ParamStore, t_emb: Var, batch: usize) -> Result<Var> {
        let segs = uniform_segments(batch, self.l_emb, self.l_emb);
        let a = self.glob_attn.forward(tape, store, t_emb, t_emb, segs)?;
        let u = residual(tape, t_emb, a)?;
        let f = self.glob_ffn.forward(tape, store, u)?;
        let t = residual(tape, u, f)?;
        let n = self.glob_ln.forward(tape, store, t)?;
        self.glob_fc.forward(tape, store, n)
    }

    /// `T'' = SelfAttn(CrossAttn(Q_phr, T_emb))`, `T_phr = FC(LN(T''))`.
    /// `key_lens[i]` limits item `i`'s cross-attention to its first rows.
    pub fn sp_phrase(&self, tape: &mut Tape, store: &ParamStore, t_emb: Var, key_lens: &[usize]) -> Result<Var> {
        let batch = key_lens.len();
        let q = tape.param(store, self.q_phr);
        let q = tile_rows(tape, q, batch)?;
        let segs = self.cross_segments(key_lens)?;
        let a = self.phr_cross.forward(tape, store, q, t_emb, segs)?;
        let s = self.phr_self.forward(tape, store, a, a, uniform_segments(batch, self.l_phr, self.l_phr))?;
        let b = residual(tape, a, s)?;
        let n = self.phr_ln.forward(tape, store, b)?;
        self.phr_fc.forward(tape, store, n)
    }

    fn cross_segments(&self, key_lens: &[usize]) -> Result<Vec<AttnSegment>> {
        key_lens
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                if k == 0 || k > self.l_emb {
                    return Err(Error::dim(format!("phrase key length {k} outside 1..={}", self.l_emb)));
                }
                Ok(AttnSegment {
                    q_start: i * self.l_phr,
                    q_len: self.l_phr,
                    k_start: i * self.l_emb,
                    k_len: k,
                })
            })
            .collect()
    }

    pub fn parse(&self, tape: &mut Tape, store: &ParamStore, t_emb: Var, key_lens: &[usize]) -> Result<SemanticBundle> {
        Ok(SemanticBundle {
            t_glob: self.sp_global(tape, store, t_emb, key_lens.len())?,
            t_phr: self.sp_phrase(tape, store, t_emb, key_lens)?,
        })
    }

    /// Phrase-query attention over the first `keys` rows of one `T_emb`,
    /// averaged over heads: `l_phr x keys`, rows summing to one.
    pub fn phrase_attention(&self, store: &ParamStore, t_emb: &Tensor, keys: usize) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let q_in = tape.param(store, self.q_phr);
        let q = self.phr_cross.q.forward(&mut tape, store, q_in)?;
        let src = tape.constant(t_emb.slice_rows(0, keys));
        let k = self.phr_cross.kvo.k.forward(&mut tape, store, src)?;
        let (q, k) = (tape.value(q), tape.value(k));
        let heads = self.phr_cross.n_heads();
        let dh = q.cols() / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(&[self.l_phr, keys]);
        for h in 0..heads {
            for i in 0..self.l_phr {
                let mut row: Vec<f64> = (0..keys)
                    .map(|j| (0..dh).map(|c| q.at(i, h * dh + c) * k.at(j, h * dh + c)).sum::<f64>() * scale)
                    .collect();
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                row.iter_mut().for_each(|v| *v = (*v - max).exp());
                let sum: f64 = row.iter().sum();
                for (j, v) in row.iter().enumerate() {
                    out.data_mut()[i * keys + j] += v / sum / heads as f64;
                }
            }
        }
        Ok(out)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [
            self.glob_attn.params(),
            self.glob_ffn.params(),
            self.glob_ln.params(),
            self.glob_fc.params(),
            vec![self.q_phr],
            self.phr_cross.params(),
            self.phr_self.params(),
            self.phr_ln.params(),
            self.phr_fc.params(),
        ]
        .concat()
    }
}

/// Phrase cross-attention, which exists only at the layout block.
#[derive(Clone, Debug)]
pub struct RsaBlockAdapters {
    pub layout_index: usize,
    pub phrase: KeyValueOut,
}

impl RsaBlockAdapters {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        RsaBlockAdapters {
            layout_index: cfg.layout_index(),
            phrase: KeyValueOut::new(store, "rsa.layout.phrase", cfg.d, cfg.d_net, cfg.d_net, cfg.n_heads, 0.1, rng),
        }
    }

    /// The phrase path for `block_idx`; asking at any other block is a
    /// contract violation.
    pub fn phrase_at(&self, block_idx: usize) -> Result<&KeyValueOut> {
        if block_idx != self.layout_index {
            return Err(Error::contract(format!(
                "phrase adapters live at block {} only, queried at {block_idx}",
                self.layout_index
            )));
        }
        Ok(&self.phrase)
    }

    /// Gate value for a block: 1 at the layout block, 0 elsewhere.
    pub fn lambda(&self, block_idx: usize) -> f64 {
        if block_idx == self.layout_index {
            1.0
        } else {
            0.0
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.phrase.params()
    }
}

/// Key/value source of a cross-attention: stacked rows plus their per-item
/// segments.
#[derive(Clone, Debug)]
pub struct CrossSource {
    pub var: Var,
    pub segments: Vec<AttnSegment>,
}

/// Result of one block's semantic injection.
#[derive(Clone, Copy, Debug)]
pub struct RsaOutput {
    pub v_glob: Var,
    pub v_phr: Option<Var>,
    /// `v_glob` plus `v_phr` when the phrase path is active.
    pub v_rsa: Var,
}

/// `V'_glob = CrossAttn(Q_net, T_glob)` at every block; at the layout block
/// also `V'_phr = CrossAttn(Q_net, T_phr)` and their sum. Outside the layout
/// block the gate is zero and the phrase path is not evaluated at all.
#[allow(clippy::too_many_arguments)]
pub fn rsa_inject(
    tape: &mut Tape,
    store: &ParamStore,
    q_net: Var,
    block_idx: usize,
    glob: &KeyValueOut,
    glob_src: &CrossSource,
    adapters: Option<(&RsaBlockAdapters, &CrossSource)>,
) -> Result<RsaOutput> {
    let v_glob = glob.forward(tape, store, q_net, glob_src.var, glob_src.segments.clone())?;
    let Some((adapters, phr_src)) = adapters else {
        return Ok(RsaOutput { v_glob, v_phr: None, v_rsa: v_glob });
    };
    if adapters.lambda(block_idx) == 0.0 {
        return Ok(RsaOutput { v_glob, v_phr: None, v_rsa: v_glob });
    }
    let phrase = adapters.phrase_at(block_idx)?;
    let v_phr = phrase.forward(tape, store, q_net, phr_src.var, phr_src.segments.clone())?;
    let v_rsa = tape.add(v_glob, v_phr)?;
    Ok(RsaOutput { v_glob, v_phr: Some(v_phr), v_rsa })
}
