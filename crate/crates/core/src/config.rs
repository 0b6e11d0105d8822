use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Widths, sequence lengths and backbone layout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Conditioning width shared by text, signal and intent tokens.
    pub d: usize,
    /// Width of the backbone's spatial tokens.
    pub d_net: usize,
    pub l_emb: usize,
    pub l_phr: usize,
    pub l_str: usize,
    pub n_blocks: usize,
    /// 1-based index of the block that also consumes phrase semantics.
    pub layout_block: usize,
    pub image_size: usize,
    pub patch: usize,
    pub n_heads: usize,
    /// Diffusion steps.
    pub timesteps: usize,
    pub vocab_size: usize,
    /// Side length of structure and object reference images.
    pub ref_size: usize,
    /// Patch side of the shared image encoder (structure role); the object
    /// role uses twice this side.
    pub ref_patch: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            d_net: 64,
            l_emb: 32,
            l_phr: 8,
            l_str: 16,
            n_blocks: 6,
            layout_block: 4,
            image_size: 32,
            patch: 4,
            n_heads: 4,
            timesteps: 1000,
            vocab_size: 4096,
            ref_size: 32,
            ref_patch: 8,
        }
    }
}

impl ModelConfig {
    /// A very small configuration for gradient checks and unit tests.
    pub fn tiny() -> Self {
        ModelConfig {
            d: 8,
            d_net: 8,
            l_emb: 6,
            l_phr: 3,
            l_str: 4,
            n_blocks: 3,
            layout_block: 2,
            image_size: 8,
            patch: 4,
            n_heads: 2,
            timesteps: 20,
            vocab_size: 64,
            ref_size: 16,
            ref_patch: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::validation(m));
        if self.layout_block < 1 || self.layout_block > self.n_blocks {
            return fail(format!(
                "layout_block {} outside 1..={}",
                self.layout_block, self.n_blocks
            ));
        }
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return fail(format!(
                "image_size {} not divisible by patch {}",
                self.image_size, self.patch
            ));
        }
        if self.n_heads == 0 || self.d % self.n_heads != 0 || self.d_net % self.n_heads != 0 {
            return fail(format!(
                "widths {} / {} not divisible by {} heads",
                self.d, self.d_net, self.n_heads
            ));
        }
        if self.ref_patch == 0 || self.ref_size % (2 * self.ref_patch) != 0 {
            return fail(format!(
                "ref_size {} must be a multiple of {}",
                self.ref_size,
                2 * self.ref_patch
            ));
        }
        if self.timesteps == 0 || self.vocab_size < 2 || self.l_emb == 0 || self.l_phr == 0 || self.l_str == 0 {
            return fail("lengths, timesteps and vocabulary must be positive".into());
        }
        Ok(())
    }

    /// Spatial tokens per image.
    pub fn l_net(&self) -> usize {
        let side = self.image_size / self.patch;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    /// Tokens produced for one structure reference.
    pub fn structure_tokens(&self) -> usize {
        let side = self.ref_size / self.ref_patch;
        side * side
    }

    /// Tokens produced for one object reference.
    pub fn object_tokens(&self) -> usize {
        let side = self.ref_size / (2 * self.ref_patch);
        side * side
    }

    /// 0-based index of the layout block.
    pub fn layout_index(&self) -> usize {
        self.layout_block - 1
    }
}
