use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scale applied to cross-attention logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnScale {
    /// `1/√(D / n_heads)`.
    PerHead,
    /// `1/√d_region`.
    RegionDim,
}

/// What the self-attention block inside each fusion layer attends over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionContext {
    /// Mentions attend to mentions only.
    Mentions,
    /// Mentions attend to mentions and every narration token.
    Tokens,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_region: usize,
    pub d_embed: usize,
    pub vocab_size: usize,
    pub n_text_layers: usize,
    pub n_fusion_layers: usize,
    pub n_visual_layers: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub max_regions: usize,
    pub max_tokens: usize,
    pub seed: u64,
    pub attn_scale_dim: AttnScale,
    pub fusion_context: FusionContext,
    /// Standard deviation of projection weights at initialization.
    pub init_std: f64,
    /// Standard deviation of the token embedding table at initialization.
    pub embed_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_region: 16,
            d_embed: 16,
            vocab_size: 64,
            n_text_layers: 4,
            n_fusion_layers: 4,
            n_visual_layers: 2,
            n_heads: 2,
            ffn_hidden: 32,
            max_regions: 32,
            max_tokens: 128,
            seed: 0,
            attn_scale_dim: AttnScale::PerHead,
            fusion_context: FusionContext::Mentions,
            init_std: 0.02,
            embed_init_std: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d_region", self.d_region),
            ("d_embed", self.d_embed),
            ("vocab_size", self.vocab_size),
            ("n_text_layers", self.n_text_layers),
            ("n_fusion_layers", self.n_fusion_layers),
            ("n_visual_layers", self.n_visual_layers),
            ("n_heads", self.n_heads),
            ("ffn_hidden", self.ffn_hidden),
            ("max_regions", self.max_regions),
            ("max_tokens", self.max_tokens),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{} must be at least 1", name)));
            }
        }
        if !self.d_embed.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_embed {} is not divisible by n_heads {}",
                self.d_embed, self.n_heads
            )));
        }
        if self.d_embed < 2 {
            return Err(Error::Config("d_embed must be at least 2 for layer norm".into()));
        }
        if !(self.init_std > 0.0 && self.embed_init_std > 0.0) {
            return Err(Error::Config("initialization scales must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_embed / self.n_heads
    }

    pub fn cross_attn_scale(&self) -> f64 {
        match self.attn_scale_dim {
            AttnScale::PerHead => 1.0 / (self.head_dim() as f64).sqrt(),
            AttnScale::RegionDim => 1.0 / (self.d_region as f64).sqrt(),
        }
    }
}
