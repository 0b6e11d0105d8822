//! Transformer-token denoiser over non-overlapping image patches.
//!
//! Each block runs spatial self-attention, then a cross-attention stage that
//! shares one query projection `Q_net` between every conditioning path
//! (text, phrases, structured intent), then a feed-forward sublayer; all
//! three are residual.

use rand::Rng;

use crate::config::ModelConfig;
use crate::encoders::{positions_2d, sinusoid};
use crate::error::Result;
use crate::tensor::nn::{repeat_each_row, residual, uniform_segments, AttentionParams, FeedForward, KeyValueOut, LayerNorm, Linear};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Gain of residual branch outputs inside the blocks.
const BRANCH_GAIN: f64 = 0.5;

#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub self_attn: AttentionParams,
    pub ln2: LayerNorm,
    /// The query projection shared by every cross-attention of the block.
    pub q_net: Linear,
    /// Text cross-attention keys, values and output.
    pub text: KeyValueOut,
    pub ln3: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub patch_in: Linear,
    pub time_fc1: Linear,
    pub time_fc2: Linear,
    /// Normalizes the text context before every block's keys and values.
    pub text_ln: LayerNorm,
    pub blocks: Vec<Block>,
    pub final_ln: LayerNorm,
    pub patch_out: Linear,
    positions: Tensor,
    image_size: usize,
    patch: usize,
    d_net: usize,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let (dn, h) = (cfg.d_net, cfg.n_heads);
        let blocks = (0..cfg.n_blocks)
            .map(|b| {
                let n = format!("backbone.blocks.{b}");
                Block {
                    ln1: LayerNorm::new(store, &format!("{n}.ln1"), dn),
                    self_attn: AttentionParams::new(store, &format!("{n}.self_attn"), dn, dn, dn, dn, h, BRANCH_GAIN, rng),
                    ln2: LayerNorm::new(store, &format!("{n}.ln2"), dn),
                    q_net: Linear::new(store, &format!("{n}.q_net"), dn, dn, 1.0, rng),
                    text: KeyValueOut::new(store, &format!("{n}.text"), cfg.d, dn, dn, h, BRANCH_GAIN, rng),
                    ln3: LayerNorm::new(store, &format!("{n}.ln3"), dn),
                    ffn: FeedForward::new(store, &format!("{n}.ffn"), dn, BRANCH_GAIN, rng),
                }
            })
            .collect();
        let side = cfg.image_size / cfg.patch;
        Backbone {
            patch_in: Linear::new(store, "backbone.patch_in", cfg.patch_dim(), dn, 1.0, rng),
            time_fc1: Linear::new(store, "backbone.time.fc1", dn, dn, 1.0, rng),
            time_fc2: Linear::new(store, "backbone.time.fc2", dn, dn, 1.0, rng),
            text_ln: LayerNorm::new(store, "backbone.text_ln", cfg.d),
            blocks,
            final_ln: LayerNorm::new(store, "backbone.final_ln", dn),
            patch_out: Linear::new(store, "backbone.patch_out", dn, cfg.patch_dim(), 0.1, rng),
            positions: positions_2d(side, side, dn),
            image_size: cfg.image_size,
            patch: cfg.patch,
            d_net: dn,
        }
    }

    pub fn l_net(&self) -> usize {
        self.positions.rows()
    }

    /// Element index map from `batch x (H*W*3)` images to stacked patch rows.
    pub fn patchify_index(&self, batch: usize) -> Vec<usize> {
        let (s, p) = (self.image_size, self.patch);
        let g = s / p;
        let mut idx = Vec::with_capacity(batch * s * s * 3);
        for b in 0..batch {
            for py in 0..g {
                for px in 0..g {
                    for dy in 0..p {
                        for dx in 0..p {
                            for c in 0..3 {
                                idx.push(b * s * s * 3 + ((py * p + dy) * s + px * p + dx) * 3 + c);
                            }
                        }
                    }
                }
            }
        }
        idx
    }

    /// Inverse of [`Backbone::patchify_index`].
    pub fn unpatchify_index(&self, batch: usize) -> Vec<usize> {
        let fwd = self.patchify_index(batch);
        let mut inv = vec![0; fwd.len()];
        for (i, &src) in fwd.iter().enumerate() {
            inv[src] = i;
        }
        inv
    }

    /// Patch tokens plus positions plus the timestep embedding.
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, x_t: Var, ts: &[usize]) -> Result<Var> {
        let batch = ts.len();
        let pd = self.patch * self.patch * 3;
        let l = self.l_net();
        let patches = tape.permute(x_t, self.patchify_index(batch), vec![batch * l, pd])?;
        let h = self.patch_in.forward(tape, store, patches)?;
        let mut pos = Vec::with_capacity(batch * self.positions.numel());
        let mut temb = Vec::with_capacity(batch * self.d_net);
        for &t in ts {
            pos.extend_from_slice(self.positions.data());
            temb.extend(sinusoid(t as f64, self.d_net));
        }
        let pos = tape.constant(Tensor::matrix(batch * l, self.d_net, pos)?);
        let h = tape.add(h, pos)?;
        let temb = tape.constant(Tensor::matrix(batch, self.d_net, temb)?);
        let temb = self.time_fc1.forward(tape, store, temb)?;
        let temb = tape.silu(temb)?;
        let temb = self.time_fc2.forward(tape, store, temb)?;
        let temb = repeat_each_row(tape, temb, l)?;
        tape.add(h, temb)
    }

    /// Spatial self-attention sublayer, then the shared cross-attention
    /// query for the block.
    pub fn pre_cross(&self, tape: &mut Tape, store: &ParamStore, block: usize, h: Var, batch: usize) -> Result<(Var, Var)> {
        let b = &self.blocks[block];
        let l = self.l_net();
        let a = b.ln1.forward(tape, store, h)?;
        let a = b.self_attn.forward(tape, store, a, a, uniform_segments(batch, l, l))?;
        let h = residual(tape, h, a)?;
        let q = b.ln2.forward(tape, store, h)?;
        let q = b.q_net.forward(tape, store, q)?;
        Ok((h, q))
    }

    /// Residual add of the fused cross-attention output, then the
    /// feed-forward sublayer.
    pub fn post_cross(&self, tape: &mut Tape, store: &ParamStore, block: usize, h: Var, v: Var) -> Result<Var> {
        let b = &self.blocks[block];
        let h = residual(tape, h, v)?;
        let f = b.ln3.forward(tape, store, h)?;
        let f = b.ffn.forward(tape, store, f)?;
        residual(tape, h, f)
    }

    /// Final norm and projection back to `batch x (H*W*3)`.
    pub fn head(&self, tape: &mut Tape, store: &ParamStore, h: Var, batch: usize) -> Result<Var> {
        let h = self.final_ln.forward(tape, store, h)?;
        let out = self.patch_out.forward(tape, store, h)?;
        let s = self.image_size;
        tape.permute(out, self.unpatchify_index(batch), vec![batch, s * s * 3])
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = [
            self.patch_in.params(),
            self.time_fc1.params(),
            self.time_fc2.params(),
            self.text_ln.params(),
            self.final_ln.params(),
            self.patch_out.params(),
        ]
        .concat();
        for b in &self.blocks {
            p.extend(b.ln1.params());
            p.extend(b.self_attn.params());
            p.extend(b.ln2.params());
            p.extend(b.q_net.params());
            p.extend(b.text.params());
            p.extend(b.ln3.params());
            p.extend(b.ffn.params());
        }
        p
    }
}
