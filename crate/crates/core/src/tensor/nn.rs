//! Parameterized layers built from tape primitives.

use rand::Rng;

use super::{AttnSegment, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

/// Affine map `x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Weights drawn from `N(0, gain^2 / d_in)`, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, gain: f64, rng: &mut impl Rng) -> Self {
        let w = store.add_normal(&format!("{name}.w"), &[d_in, d_out], gain / (d_in as f64).sqrt(), rng);
        let b = Some(store.add_zeros(&format!("{name}.b"), &[d_out]));
        Linear { w, b, d_in, d_out }
    }

    /// Like [`Linear::new`] without a bias term.
    pub fn no_bias(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, gain: f64, rng: &mut impl Rng) -> Self {
        let w = store.add_normal(&format!("{name}.w"), &[d_in, d_out], gain / (d_in as f64).sqrt(), rng);
        Linear { w, b: None, d_in, d_out }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = store.add_zeros(&format!("{name}.w"), &[d_in, d_out]);
        let b = Some(store.add_zeros(&format!("{name}.b"), &[d_out]));
        Linear { w, b, d_in, d_out }
    }

    /// Square map initialized to the identity, zero bias.
    pub fn identity(store: &mut ParamStore, name: &str, d: usize) -> Self {
        let w = store.add(&format!("{name}.w"), super::Tensor::identity(d));
        let b = Some(store.add_zeros(&format!("{name}.b"), &[d]));
        Linear { w, b, d_in: d, d_out: d }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNorm {
            gamma: store.add_full(&format!("{name}.gamma"), &[d], 1.0),
            beta: store.add_zeros(&format!("{name}.beta"), &[d]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, LN_EPS)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

/// Hidden width of [`FeedForward`] relative to its input.
pub const FFN_MULT: usize = 2;

/// `linear(d -> FFN_MULT * d) -> GELU -> linear(FFN_MULT * d -> d)`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, out_gain: f64, rng: &mut impl Rng) -> Self {
        FeedForward {
            up: Linear::new(store, &format!("{name}.up"), d, FFN_MULT * d, 1.0, rng),
            down: Linear::new(store, &format!("{name}.down"), FFN_MULT * d, d, out_gain, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, store, x)?;
        let h = tape.gelu(h)?;
        self.down.forward(tape, store, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.up.params(), self.down.params()].concat()
    }
}

/// Key, value and output projections of an attention layer whose queries
/// are projected elsewhere (a shared query projection).
#[derive(Clone, Debug)]
pub struct KeyValueOut {
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub n_heads: usize,
}

impl KeyValueOut {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_src: usize,
        d_att: usize,
        d_out: usize,
        n_heads: usize,
        out_gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        assert_eq!(d_att % n_heads, 0, "attention width must split into heads");
        let out = if out_gain == 0.0 {
            Linear::zeros(store, &format!("{name}.out"), d_att, d_out)
        } else {
            Linear::new(store, &format!("{name}.out"), d_att, d_out, out_gain, rng)
        };
        KeyValueOut {
            // A key bias shifts every score of a query by the same amount and
            // cancels in the softmax.
            k: Linear::no_bias(store, &format!("{name}.k"), d_src, d_att, 1.0, rng),
            v: Linear::new(store, &format!("{name}.v"), d_src, d_att, 1.0, rng),
            out,
            n_heads,
        }
    }

    /// Attends projected queries `q` to `source`, then applies the output
    /// projection.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, q: Var, source: Var, segments: Vec<AttnSegment>) -> Result<Var> {
        let o = self.attend(tape, store, q, source, segments)?;
        self.out.forward(tape, store, o)
    }

    /// Pre-projection head outputs.
    pub fn attend(&self, tape: &mut Tape, store: &ParamStore, q: Var, source: Var, segments: Vec<AttnSegment>) -> Result<Var> {
        let k = self.k.forward(tape, store, source)?;
        let v = self.v.forward(tape, store, source)?;
        tape.attention(q, k, v, self.n_heads, segments)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.k.params(), self.v.params(), self.out.params()].concat()
    }
}

/// Full attention layer: query, key, value and output projections.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub q: Linear,
    pub kvo: KeyValueOut,
}

impl AttentionParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_query: usize,
        d_src: usize,
        d_att: usize,
        d_out: usize,
        n_heads: usize,
        out_gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        AttentionParams {
            q: Linear::new(store, &format!("{name}.q"), d_query, d_att, 1.0, rng),
            kvo: KeyValueOut::new(store, name, d_src, d_att, d_out, n_heads, out_gain, rng),
        }
    }

    pub fn n_heads(&self) -> usize {
        self.kvo.n_heads
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, queries: Var, source: Var, segments: Vec<AttnSegment>) -> Result<Var> {
        let q = self.q.forward(tape, store, queries)?;
        self.kvo.forward(tape, store, q, source, segments)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.q.params(), self.kvo.params()].concat()
    }
}

/// One segment per batch item, each with `lq` queries and `lk` keys.
pub fn uniform_segments(batch: usize, lq: usize, lk: usize) -> Vec<AttnSegment> {
    (0..batch)
        .map(|i| AttnSegment {
            q_start: i * lq,
            q_len: lq,
            k_start: i * lk,
            k_len: lk,
        })
        .collect()
}

/// Segments for fixed-length queries over variable-length sources laid out
/// back to back.
pub fn ragged_segments(lq: usize, source_lens: &[usize]) -> Vec<AttnSegment> {
    let mut k_start = 0;
    source_lens
        .iter()
        .enumerate()
        .map(|(i, &lk)| {
            let s = AttnSegment {
                q_start: i * lq,
                q_len: lq,
                k_start,
                k_len: lk,
            };
            k_start += lk;
            s
        })
        .collect()
}

/// Self-attention segments over variable-length sequences laid out back to
/// back.
pub fn self_segments(lens: &[usize]) -> Vec<AttnSegment> {
    let mut start = 0;
    lens.iter()
        .map(|&l| {
            let s = AttnSegment {
                q_start: start,
                q_len: l,
                k_start: start,
                k_len: l,
            };
            start += l;
            s
        })
        .collect()
}

/// `x + sublayer(x)` shape check helper.
pub fn residual(tape: &mut Tape, x: Var, y: Var) -> Result<Var> {
    if tape.value(x).shape() != tape.value(y).shape() {
        return Err(Error::dim("residual branch changed the shape"));
    }
    tape.add(x, y)
}

/// Repeats a `rows x d` block `times` times along the row axis.
pub fn tile_rows(tape: &mut Tape, x: Var, times: usize) -> Result<Var> {
    let rows = tape.value(x).rows();
    let idx = (0..times).flat_map(|_| 0..rows).collect();
    tape.gather_rows(x, idx)
}

/// Repeats each row of `x` `times` times consecutively.
pub fn repeat_each_row(tape: &mut Tape, x: Var, times: usize) -> Result<Var> {
    let rows = tape.value(x).rows();
    let idx = (0..rows).flat_map(|r| std::iter::repeat_n(r, times)).collect();
    tape.gather_rows(x, idx)
}
