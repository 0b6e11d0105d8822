//! Small learned encoders for text prompts, reference images and boxes.
//!
//! Text goes through a hashed vocabulary and an embedding table with fixed
//! sinusoidal positions. Structure and object references share one linear
//! patch embedder; the object role pools 2x2 first, which makes its
//! effective patch twice as large. Boxes become Fourier features followed by
//! a two-layer MLP, one token per box.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::geometry::NormBox;
use crate::image::Image;
use crate::tensor::nn::Linear;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

pub const PAD_ID: usize = 0;
pub const BOX_FREQUENCIES: [f64; 4] = [1.0, 2.0, 4.0, 8.0];
pub const BOX_FEATURES: usize = 4 * BOX_FREQUENCIES.len() * 2;

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Hashed vocabulary of `size` ids; id 0 is reserved for padding.
#[derive(Clone, Copy, Debug)]
pub struct Vocab {
    pub size: usize,
}

impl Vocab {
    pub fn new(size: usize) -> Self {
        assert!(size >= 2, "vocabulary needs room for padding and one token");
        Vocab { size }
    }

    /// Lowercase whitespace tokens with non-alphanumeric characters removed.
    pub fn tokenize(prompt: &str) -> Vec<String> {
        prompt
            .split_whitespace()
            .map(|t| {
                t.chars()
                    .filter(|c| c.is_alphanumeric())
                    .flat_map(char::to_lowercase)
                    .collect::<String>()
            })
            .filter(|t| !t.is_empty())
            .collect()
    }

    pub fn id(&self, token: &str) -> usize {
        1 + (fnv1a(token.as_bytes()) % (self.size as u64 - 1)) as usize
    }

    /// Ids padded or truncated to `len`, and the number of real tokens.
    pub fn encode(&self, prompt: &str, len: usize) -> (Vec<usize>, usize) {
        let mut ids: Vec<usize> = Self::tokenize(prompt).iter().map(|t| self.id(t)).take(len).collect();
        let count = ids.len();
        ids.resize(len, PAD_ID);
        (ids, count)
    }
}

/// Standard 1-D sinusoidal encoding of `pos` in `d` dimensions.
pub fn sinusoid(pos: f64, d: usize) -> Vec<f64> {
    (0..d)
        .map(|j| {
            let i = (j / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * i / d as f64);
            if j % 2 == 0 {
                (pos * freq).sin()
            } else {
                (pos * freq).cos()
            }
        })
        .collect()
}

/// `len x d` table of 1-D positions.
pub fn positions_1d(len: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(len * d);
    for p in 0..len {
        data.extend(sinusoid(p as f64, d));
    }
    Tensor::matrix(len, d, data).expect("shape")
}

/// Row-major grid positions: first half of the width encodes the row, the
/// second half the column.
pub fn positions_2d(rows: usize, cols: usize, d: usize) -> Tensor {
    let half = d / 2;
    let mut data = Vec::with_capacity(rows * cols * d);
    for r in 0..rows {
        for c in 0..cols {
            data.extend(sinusoid(r as f64, half));
            data.extend(sinusoid(c as f64, d - half));
        }
    }
    Tensor::matrix(rows * cols, d, data).expect("shape")
}

#[derive(Clone, Debug)]
pub struct TextEmbedding {
    pub t_emb: Tensor,
    pub token_count: usize,
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub table: ParamId,
    pub vocab: Vocab,
    pub l_emb: usize,
    positions: Tensor,
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        TextEncoder {
            table: store.add_normal("encoders.text.table", &[cfg.vocab_size, cfg.d], 1.0, rng),
            vocab: Vocab::new(cfg.vocab_size),
            l_emb: cfg.l_emb,
            positions: positions_1d(cfg.l_emb, cfg.d),
        }
    }

    /// Token ids for a batch of prompts, `l_emb` per prompt.
    pub fn ids(&self, prompts: &[&str]) -> Vec<usize> {
        prompts
            .iter()
            .flat_map(|p| self.vocab.encode(p, self.l_emb).0)
            .collect()
    }

    /// Stacked `T_emb` blocks, `(batch * l_emb) x d`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, prompts: &[&str]) -> Result<Var> {
        let table = tape.param(store, self.table);
        let rows = tape.gather_rows(table, self.ids(prompts))?;
        let mut pos = Vec::with_capacity(prompts.len() * self.positions.numel());
        for _ in prompts {
            pos.extend_from_slice(self.positions.data());
        }
        let pos = tape.constant(Tensor::matrix(prompts.len() * self.l_emb, self.positions.cols(), pos)?);
        tape.add(rows, pos)
    }

    pub fn encode(&self, store: &ParamStore, prompt: &str) -> Result<TextEmbedding> {
        let mut tape = Tape::inference();
        let v = self.forward(&mut tape, store, &[prompt])?;
        Ok(TextEmbedding {
            t_emb: tape.value(v).clone(),
            token_count: self.vocab.encode(prompt, self.l_emb).1,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageRole {
    Structure,
    Object,
}

/// Shared linear patch embedder for structure and object references.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub proj: Linear,
    pub patch: usize,
    pub d: usize,
}

impl ImageEncoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let patch_dim = cfg.ref_patch * cfg.ref_patch * 3;
        ImageEncoder {
            proj: Linear::new(store, "encoders.image.proj", patch_dim, cfg.d, 1.0, rng),
            patch: cfg.ref_patch,
            d: cfg.d,
        }
    }

    pub fn role_patch(&self, role: ImageRole) -> usize {
        match role {
            ImageRole::Structure => self.patch,
            ImageRole::Object => 2 * self.patch,
        }
    }

    /// Flattened patches (`tokens x patch_dim`) and matching positional rows.
    pub fn patches(&self, img: &Image, role: ImageRole) -> Result<(Tensor, Tensor)> {
        let rp = self.role_patch(role);
        if img.width % rp != 0 || img.height % rp != 0 {
            return Err(Error::dim(format!(
                "{}x{} image is not divisible into {rp}-pixel patches",
                img.width, img.height
            )));
        }
        let pooled;
        let src = match role {
            ImageRole::Structure => img,
            ImageRole::Object => {
                pooled = avg_pool2(img);
                &pooled
            }
        };
        let p = self.patch;
        let (gh, gw) = (src.height / p, src.width / p);
        let mut data = Vec::with_capacity(gh * gw * p * p * 3);
        for py in 0..gh {
            for px in 0..gw {
                for dy in 0..p {
                    for dx in 0..p {
                        data.extend(src.get(px * p + dx, py * p + dy));
                    }
                }
            }
        }
        Ok((
            Tensor::matrix(gh * gw, p * p * 3, data)?,
            positions_2d(gh, gw, self.d),
        ))
    }

    /// Embeds stacked patch rows and adds their positions.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, patches: Tensor, positions: Tensor) -> Result<Var> {
        let x = tape.constant(patches);
        let y = self.proj.forward(tape, store, x)?;
        let pos = tape.constant(positions);
        tape.add(y, pos)
    }

    pub fn encode(&self, store: &ParamStore, img: &Image, role: ImageRole) -> Result<Tensor> {
        let (p, pos) = self.patches(img, role)?;
        let mut tape = Tape::inference();
        let v = self.forward(&mut tape, store, p, pos)?;
        Ok(tape.value(v).clone())
    }
}

fn avg_pool2(img: &Image) -> Image {
    let (w, h) = (img.width / 2, img.height / 2);
    let mut out = Image::filled(w, h, [0.0; 3]);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let p = img.get(2 * x + dx, 2 * y + dy);
                for c in 0..3 {
                    acc[c] += 0.25 * p[c];
                }
            }
            out.set(x, y, acc);
        }
    }
    out
}

/// Sine features for all coordinates and frequencies, then cosine features.
pub fn box_features(b: &NormBox) -> Vec<f64> {
    let coords = [b.x0, b.y0, b.x1, b.y1];
    let mut sin = Vec::with_capacity(BOX_FEATURES / 2);
    let mut cos = Vec::with_capacity(BOX_FEATURES / 2);
    for c in coords {
        for k in BOX_FREQUENCIES {
            let a = 2.0 * std::f64::consts::PI * k * c;
            sin.push(a.sin());
            cos.push(a.cos());
        }
    }
    sin.extend(cos);
    sin
}

#[derive(Clone, Debug)]
pub struct BoxEncoder {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl BoxEncoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        BoxEncoder {
            fc1: Linear::new(store, "encoders.box.fc1", BOX_FEATURES, cfg.d, 1.0, rng),
            fc2: Linear::new(store, "encoders.box.fc2", cfg.d, cfg.d, 1.0, rng),
        }
    }

    pub fn features(boxes: &[NormBox]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(boxes.len() * BOX_FEATURES);
        for b in boxes {
            b.validate()?;
            data.extend(box_features(b));
        }
        Tensor::matrix(boxes.len(), BOX_FEATURES, data)
    }

    /// One token per feature row; rows never mix.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, features: Tensor) -> Result<Var> {
        let x = tape.constant(features);
        let h = self.fc1.forward(tape, store, x)?;
        let h = tape.gelu(h)?;
        self.fc2.forward(tape, store, h)
    }

    pub fn encode(&self, store: &ParamStore, boxes: &[NormBox]) -> Result<Tensor> {
        let f = Self::features(boxes)?;
        if boxes.is_empty() {
            return Ok(Tensor::zeros(&[0, self.fc2.d_out]));
        }
        let mut tape = Tape::inference();
        let v = self.forward(&mut tape, store, f)?;
        Ok(tape.value(v).clone())
    }
}
