//! Visual encoder, text encoder, and the mention-region fusion encoder.
//!
//! All three are stacks of post-norm transformer layers. The fusion encoder
//! takes pooled mention embeddings as queries and attends over the encoded
//! regions; the head-averaged cross-attention weights of each fusion layer are
//! the grounding scores `g(m, r)`.

mod checkpoint;
mod config;
mod params;
mod types;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use config::{AttnScale, FusionContext, ModelConfig};
pub use params::{Binder, Bindings, ParamId, ParamStore};
pub use types::{MentionKind, MentionSpan, NarrationTokens, RegionSet};

use crate::align::{GroundingKind, GroundingMatrix};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var, LAYER_NORM_EPS};

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Copy, Debug)]
struct Ffn {
    up: Linear,
    down: Linear,
}

#[derive(Clone, Copy, Debug)]
struct EncoderLayer {
    attn: Attention,
    norm1: Norm,
    ffn: Ffn,
    norm2: Norm,
}

#[derive(Clone, Copy, Debug)]
struct FusionLayer {
    self_attn: Attention,
    norm1: Norm,
    cross_attn: Attention,
    norm2: Norm,
    ffn: Ffn,
    norm3: Norm,
}

#[derive(Clone, Debug)]
struct Layout {
    region_proj: Linear,
    visual: Vec<EncoderLayer>,
    token_embedding: ParamId,
    embed_norm: Norm,
    text: Vec<EncoderLayer>,
    fusion: Vec<FusionLayer>,
    mlm_bias: ParamId,
    box_head: Linear,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    std: f64,
}

impl Init<'_> {
    fn linear(&mut self, name: &str, d_in: usize, d_out: usize, bias: bool) -> Linear {
        let w = self
            .store
            .normal(&format!("{}.weight", name), &[d_in, d_out], self.std, &mut self.rng);
        let b = bias.then(|| self.store.zeros(&format!("{}.bias", name), &[d_out]));
        Linear { w, b }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gain: self.store.ones(&format!("{}.gain", name), d),
            bias: self.store.zeros(&format!("{}.bias", name), &[d]),
        }
    }

    // Keys carry no bias: a key bias only shifts every logit of a query row
    // equally and cancels in the softmax.
    fn attention(&mut self, name: &str, d: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{}.query", name), d, d, true),
            k: self.linear(&format!("{}.key", name), d, d, false),
            v: self.linear(&format!("{}.value", name), d, d, true),
            o: self.linear(&format!("{}.out", name), d, d, true),
        }
    }

    fn ffn(&mut self, name: &str, d: usize, hidden: usize) -> Ffn {
        Ffn {
            up: self.linear(&format!("{}.fc1", name), d, hidden, true),
            down: self.linear(&format!("{}.fc2", name), hidden, d, true),
        }
    }

    fn encoder_layer(&mut self, name: &str, d: usize, hidden: usize) -> EncoderLayer {
        EncoderLayer {
            attn: self.attention(&format!("{}.attn", name), d),
            norm1: self.norm(&format!("{}.norm1", name), d),
            ffn: self.ffn(&format!("{}.ffn", name), d, hidden),
            norm2: self.norm(&format!("{}.norm2", name), d),
        }
    }
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Encodings {
    /// `f_v(v_r)`, `|I| × D`.
    pub region_emb: Var,
    /// `f_t(w)`, `T × D`.
    pub token_emb: Var,
    /// `f_t(m)`, `|N| × D`.
    pub mention_emb: Var,
    /// `f(m)`, `|N| × D`.
    pub fused: Var,
    /// Head-averaged cross-attention per fusion layer, each `|N| × |I|`.
    pub grounding: Vec<Var>,
    /// Box refinement deltas `(δx, δy, δw, δh)` per mention, `|N| × 4`.
    pub box_deltas: Var,
}

impl Encodings {
    pub fn last_grounding(&self) -> Var {
        *self.grounding.last().expect("at least one fusion layer")
    }
}

/// Concrete outputs of an inference pass.
#[derive(Clone, Debug)]
pub struct Inference {
    pub region_emb: Tensor,
    pub mention_emb: Tensor,
    pub fused: Tensor,
    pub grounding: GroundingMatrix,
    pub box_deltas: Tensor,
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

/// Sinusoidal position encoding, `T × D`.
pub fn position_encoding(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let k = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * k / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, d], data).expect("shape matches")
}

/// Row `i` = mean of the token rows inside mention span `i`.
pub fn pool_mentions(tape: &mut Tape, token_emb: Var, mentions: &[MentionSpan]) -> Result<Var> {
    let t = tape.value(token_emb).rows();
    for (i, m) in mentions.iter().enumerate() {
        if m.is_empty() || m.end > t {
            return Err(Error::Contract(format!(
                "mention {} span [{}, {}) invalid for {} tokens",
                i, m.start, m.end, t
            )));
        }
    }
    let groups: Vec<Vec<usize>> = mentions.iter().map(|m| (m.start..m.end).collect()).collect();
    tape.group_mean_rows(token_emb, &groups)
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let d = cfg.d_embed;
        let h = cfg.ffn_hidden;
        let mut init = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            std: cfg.init_std,
        };
        let region_proj = init.linear("visual.proj", cfg.d_region, d, true);
        let visual = (0..cfg.n_visual_layers)
            .map(|i| init.encoder_layer(&format!("visual.layer{}", i), d, h))
            .collect();
        let token_embedding = {
            let std = cfg.embed_init_std;
            let rng = &mut init.rng;
            init.store
                .normal("text.token_embedding", &[cfg.vocab_size, d], std, rng)
        };
        let embed_norm = init.norm("text.embed_norm", d);
        let text = (0..cfg.n_text_layers)
            .map(|i| init.encoder_layer(&format!("text.layer{}", i), d, h))
            .collect();
        let fusion = (0..cfg.n_fusion_layers)
            .map(|i| {
                let name = format!("fusion.layer{}", i);
                FusionLayer {
                    self_attn: init.attention(&format!("{}.self_attn", name), d),
                    norm1: init.norm(&format!("{}.norm1", name), d),
                    cross_attn: init.attention(&format!("{}.cross_attn", name), d),
                    norm2: init.norm(&format!("{}.norm2", name), d),
                    ffn: init.ffn(&format!("{}.ffn", name), d, h),
                    norm3: init.norm(&format!("{}.norm3", name), d),
                }
            })
            .collect();
        let mlm_bias = init.store.zeros("mlm.bias", &[cfg.vocab_size]);
        let box_head = init.linear("box_head", d, 4, true);
        let layout = Layout {
            region_proj,
            visual,
            token_embedding,
            embed_norm,
            text,
            fusion,
            mlm_bias,
            box_head,
        };
        Ok(Model {
            cfg,
            params: store,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn binder(&self, trainable: bool) -> Binder<'_> {
        Binder::new(&self.params, trainable)
    }

    pub fn token_embedding_id(&self) -> ParamId {
        self.layout.token_embedding
    }

    // ----- building blocks ------------------------------------------------------

    fn linear(&self, tape: &mut Tape, b: &mut Binder, l: Linear, x: Var) -> Result<Var> {
        let w = b.var(tape, l.w);
        let y = tape.matmul(x, w)?;
        match l.b {
            Some(bias) => {
                let bv = b.var(tape, bias);
                tape.add_row(y, bv)
            }
            None => Ok(y),
        }
    }

    fn norm(&self, tape: &mut Tape, b: &mut Binder, n: Norm, x: Var) -> Result<Var> {
        let g = b.var(tape, n.gain);
        let bias = b.var(tape, n.bias);
        tape.layer_norm(x, g, bias, LAYER_NORM_EPS)
    }

    fn ffn(&self, tape: &mut Tape, b: &mut Binder, f: Ffn, x: Var) -> Result<Var> {
        let h = self.linear(tape, b, f.up, x)?;
        let h = tape.relu(h);
        self.linear(tape, b, f.down, h)
    }

    /// Multi-head attention of `queries` over `context`. Returns the projected
    /// output and the attention weights averaged over heads.
    fn attention(
        &self,
        tape: &mut Tape,
        b: &mut Binder,
        a: Attention,
        queries: Var,
        context: Var,
        scale: f64,
    ) -> Result<(Var, Var)> {
        let q = self.linear(tape, b, a.q, queries)?;
        let k = self.linear(tape, b, a.k, context)?;
        let v = self.linear(tape, b, a.v, context)?;
        let heads = self.cfg.n_heads;
        let dh = self.cfg.head_dim();
        let mut outs = Vec::with_capacity(heads);
        let mut weights = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, h * dh, (h + 1) * dh)?,
                    tape.slice_cols(k, h * dh, (h + 1) * dh)?,
                    tape.slice_cols(v, h * dh, (h + 1) * dh)?,
                )
            };
            let logits = tape.matmul_t(qh, kh)?;
            let logits = tape.scale(logits, scale);
            let attn = tape.softmax_rows(logits)?;
            outs.push(tape.matmul(attn, vh)?);
            weights.push(attn);
        }
        let mixed = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        let out = self.linear(tape, b, a.o, mixed)?;
        let avg = if heads == 1 {
            weights[0]
        } else {
            let s = tape.add_n(&weights)?;
            tape.scale(s, 1.0 / heads as f64)
        };
        Ok((out, avg))
    }

    fn encoder_layer(&self, tape: &mut Tape, b: &mut Binder, l: &EncoderLayer, x: Var) -> Result<Var> {
        let scale = 1.0 / (self.cfg.head_dim() as f64).sqrt();
        let (a, _) = self.attention(tape, b, l.attn, x, x, scale)?;
        let h = tape.add(x, a)?;
        let h = self.norm(tape, b, l.norm1, h)?;
        let f = self.ffn(tape, b, l.ffn, h)?;
        let o = tape.add(h, f)?;
        self.norm(tape, b, l.norm2, o)
    }

    // ----- encoders -----------------------------------------------------------

    /// `f_v`: region features projected to `D`, then self-attention layers
    /// without positional information.
    pub fn encode_regions(&self, tape: &mut Tape, b: &mut Binder, regions: &RegionSet) -> Result<Var> {
        let n = regions.len();
        if n == 0 {
            return Err(Error::Contract("an image needs at least one region".into()));
        }
        if n > self.cfg.max_regions {
            return Err(Error::Capacity {
                what: "region set",
                got: n,
                limit: self.cfg.max_regions,
            });
        }
        if regions.features.cols() != self.cfg.d_region {
            return Err(Error::Dimension(format!(
                "region features have width {} but the model expects {}",
                regions.features.cols(),
                self.cfg.d_region
            )));
        }
        let x = tape.constant(regions.features.clone());
        let mut h = self.linear(tape, b, self.layout.region_proj, x)?;
        for l in &self.layout.visual {
            h = self.encoder_layer(tape, b, l, h)?;
        }
        Ok(h)
    }

    /// `f_t`: token embeddings plus sinusoidal positions, then self-attention layers.
    pub fn encode_text(&self, tape: &mut Tape, b: &mut Binder, token_ids: &[usize]) -> Result<Var> {
        let t = token_ids.len();
        if t == 0 {
            return Err(Error::Contract("a narration needs at least one token".into()));
        }
        if t > self.cfg.max_tokens {
            return Err(Error::Capacity {
                what: "narration",
                got: t,
                limit: self.cfg.max_tokens,
            });
        }
        if let Some(&id) = token_ids.iter().find(|&&id| id >= self.cfg.vocab_size) {
            return Err(Error::Vocabulary {
                id,
                vocab_size: self.cfg.vocab_size,
            });
        }
        let table = b.var(tape, self.layout.token_embedding);
        let e = tape.gather_rows(table, token_ids)?;
        let pe = tape.constant(position_encoding(t, self.cfg.d_embed));
        let x = tape.add(e, pe)?;
        let mut h = self.norm(tape, b, self.layout.embed_norm, x)?;
        for l in &self.layout.text {
            h = self.encoder_layer(tape, b, l, h)?;
        }
        Ok(h)
    }

    /// Fusion encoder. Each layer: self-attention over mentions (optionally
    /// also over narration tokens), cross-attention from mentions to regions,
    /// and a feed-forward block, each with a residual connection and layer norm.
    pub fn fuse(
        &self,
        tape: &mut Tape,
        b: &mut Binder,
        mention_emb: Var,
        region_emb: Var,
        token_emb: Option<Var>,
    ) -> Result<(Var, Vec<Var>)> {
        let d = self.cfg.d_embed;
        if tape.value(mention_emb).cols() != d || tape.value(region_emb).cols() != d {
            return Err(Error::Contract(format!(
                "fuse: mention {:?} and region {:?} embeddings must have width {}",
                tape.shape(mention_emb),
                tape.shape(region_emb),
                d
            )));
        }
        let self_scale = 1.0 / (self.cfg.head_dim() as f64).sqrt();
        let cross_scale = self.cfg.cross_attn_scale();
        let mut x = mention_emb;
        let mut grounding = Vec::with_capacity(self.layout.fusion.len());
        for l in &self.layout.fusion {
            let context = match (self.cfg.fusion_context, token_emb) {
                (FusionContext::Tokens, Some(tok)) => tape.concat_rows(&[x, tok])?,
                (FusionContext::Tokens, None) => {
                    return Err(Error::Contract(
                        "fusion over tokens needs the token embeddings".into(),
                    ))
                }
                (FusionContext::Mentions, _) => x,
            };
            let (sa, _) = self.attention(tape, b, l.self_attn, x, context, self_scale)?;
            let h = tape.add(x, sa)?;
            let h = self.norm(tape, b, l.norm1, h)?;
            let (ca, g) = self.attention(tape, b, l.cross_attn, h, region_emb, cross_scale)?;
            let h2 = tape.add(h, ca)?;
            let h2 = self.norm(tape, b, l.norm2, h2)?;
            let f = self.ffn(tape, b, l.ffn, h2)?;
            let o = tape.add(h2, f)?;
            x = self.norm(tape, b, l.norm3, o)?;
            grounding.push(g);
        }
        Ok((x, grounding))
    }

    pub fn box_deltas(&self, tape: &mut Tape, b: &mut Binder, fused: Var) -> Result<Var> {
        self.linear(tape, b, self.layout.box_head, fused)
    }

    /// Vocabulary logits for the token states at `positions`, using the token
    /// embedding table as the output projection.
    pub fn mlm_logits(&self, tape: &mut Tape, b: &mut Binder, token_states: Var, positions: &[usize]) -> Result<Var> {
        let rows = tape.gather_rows(token_states, positions)?;
        let table = b.var(tape, self.layout.token_embedding);
        let logits = tape.matmul_t(rows, table)?;
        let bias = b.var(tape, self.layout.mlm_bias);
        tape.add_row(logits, bias)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        b: &mut Binder,
        regions: &RegionSet,
        narration: &NarrationTokens,
    ) -> Result<Encodings> {
        let region_emb = self.encode_regions(tape, b, regions)?;
        let token_emb = self.encode_text(tape, b, &narration.token_ids)?;
        let mention_emb = pool_mentions(tape, token_emb, &narration.mentions)?;
        let (fused, grounding) = self.fuse(tape, b, mention_emb, region_emb, Some(token_emb))?;
        let box_deltas = self.box_deltas(tape, b, fused)?;
        Ok(Encodings {
            region_emb,
            token_emb,
            mention_emb,
            fused,
            grounding,
            box_deltas,
        })
    }

    /// Forward pass without gradient tracking.
    pub fn infer(&self, regions: &RegionSet, narration: &NarrationTokens) -> Result<Inference> {
        let mut tape = Tape::new();
        let mut b = self.binder(false);
        let enc = self.forward(&mut tape, &mut b, regions, narration)?;
        let g = tape.value(enc.last_grounding());
        Ok(Inference {
            region_emb: tape.value(enc.region_emb).clone(),
            mention_emb: tape.value(enc.mention_emb).clone(),
            fused: tape.value(enc.fused).clone(),
            grounding: GroundingMatrix::from_tensor(g, GroundingKind::Soft)?,
            box_deltas: tape.value(enc.box_deltas).clone(),
        })
    }
}
