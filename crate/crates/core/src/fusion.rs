//! Query-based fusion transformer.
//!
//! K learnable queries share a bidirectional self-attention layer with the
//! caption tokens (when text is available), cross-attend to the projected
//! instance embeddings, and pass through a feed-forward layer. Only the K
//! query rows leave the module.

use serde::{Deserialize, Serialize};

use crate::attention::{multi_head, AttentionKind, MultiHeadWeights};
use crate::error::{Error, Result};
use crate::nn::{FeedForward, LayerNorm, Linear, ParamBuilder};
use crate::tensor::{Graph, ParamId, ParamStore, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    ImageOnly,
    ImageAndText,
}

impl FusionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::ImageOnly => "image_only",
            FusionMode::ImageAndText => "image_and_text",
        }
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image_only" => Ok(FusionMode::ImageOnly),
            "image_and_text" => Ok(FusionMode::ImageAndText),
            other => Err(Error::TypeError {
                key: "mode".into(),
                detail: format!("expected image_only or image_and_text, got {other:?}"),
            }),
        }
    }
}

/// K learnable query embeddings.
#[derive(Debug, Clone)]
pub struct QueryBank {
    pub queries: ParamId,
    pub k: usize,
    pub d_model: usize,
}

impl QueryBank {
    pub fn new(pb: &mut ParamBuilder, name: &str, k: usize, d_model: usize) -> Result<Self> {
        Ok(Self {
            queries: pb.normal(name, vec![k, d_model])?,
            k,
            d_model,
        })
    }
}

/// Token table plus learned absolute positions.
#[derive(Debug, Clone)]
pub struct TextEmbedding {
    pub tokens: ParamId,
    pub positions: ParamId,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl TextEmbedding {
    pub fn new(pb: &mut ParamBuilder, name: &str, vocab_size: usize, max_len: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            tokens: pb.normal(&format!("{name}.tok"), vec![vocab_size, dim])?,
            positions: pb.normal(&format!("{name}.pos"), vec![max_len, dim])?,
            vocab_size,
            max_len,
        })
    }

    pub fn check(&self, ids: &[u32]) -> Result<()> {
        if ids.len() > self.max_len {
            return Err(Error::TextTooLong {
                len: ids.len(),
                max: self.max_len,
            });
        }
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(Error::TokenOutOfVocab {
                id: bad,
                vocab: self.vocab_size,
            });
        }
        Ok(())
    }

    /// `tok[ids[i]] + pos[i]` for each position; `ids` must be non-empty.
    pub fn embed(&self, g: &mut Graph, store: &ParamStore, ids: &[u32]) -> Result<Var> {
        self.check(ids)?;
        let table = g.param(store, self.tokens)?;
        let pos = g.param(store, self.positions)?;
        let idx: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
        let tok = g.gather_rows(table, &idx)?;
        let p = g.slice_rows(pos, 0, ids.len())?;
        g.add(tok, p)
    }
}

#[derive(Debug, Clone)]
pub struct FusionBlock {
    pub ln_self: LayerNorm,
    pub self_attn: MultiHeadWeights,
    pub ln_cross_q: LayerNorm,
    pub ln_cross_kv: LayerNorm,
    pub cross_attn: MultiHeadWeights,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
    pub num_heads: usize,
}

impl FusionBlock {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        dim: usize,
        num_heads: usize,
        ffn_ratio: usize,
        ln_eps: f64,
    ) -> Result<Self> {
        if num_heads == 0 || !dim.is_multiple_of(num_heads) {
            return Err(Error::RangeError {
                key: "fusion_heads".into(),
                detail: format!("{num_heads} heads do not divide d_model {dim}"),
            });
        }
        Ok(Self {
            ln_self: LayerNorm::new(pb, &format!("{name}.ln_self"), dim, ln_eps)?,
            self_attn: MultiHeadWeights::new(pb, &format!("{name}.selfattn"), dim)?,
            ln_cross_q: LayerNorm::new(pb, &format!("{name}.ln_cross_q"), dim, ln_eps)?,
            ln_cross_kv: LayerNorm::new(pb, &format!("{name}.ln_cross_kv"), dim, ln_eps)?,
            cross_attn: MultiHeadWeights::new(pb, &format!("{name}.crossattn"), dim)?,
            ln_ffn: LayerNorm::new(pb, &format!("{name}.ln_ffn"), dim, ln_eps)?,
            ffn: FeedForward::new(pb, &format!("{name}.ffn"), dim, ffn_ratio)?,
            num_heads,
        })
    }

    /// One block over `x = [queries; text]`; the first `k` rows are queries.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, k: usize, image: Var) -> Result<Var> {
        let h = self.ln_self.forward(g, store, x)?;
        let a = multi_head(g, store, AttentionKind::Exact, h, h, &self.self_attn, self.num_heads)?;
        let x = g.add(a, x)?;

        let total = g.rows(x);
        let queries = g.slice_rows(x, 0, k)?;
        let hq = self.ln_cross_q.forward(g, store, queries)?;
        let hkv = self.ln_cross_kv.forward(g, store, image)?;
        let c = multi_head(g, store, AttentionKind::Exact, hq, hkv, &self.cross_attn, self.num_heads)?;
        let queries = g.add(c, queries)?;
        let x = if total > k {
            let text = g.slice_rows(x, k, total - k)?;
            g.concat_rows(&[queries, text])?
        } else {
            queries
        };

        let h = self.ln_ffn.forward(g, store, x)?;
        let f = self.ffn.forward(g, store, h)?;
        g.add(f, x)
    }
}

#[derive(Debug, Clone)]
pub struct FusionTransformer {
    pub queries: QueryBank,
    pub text: TextEmbedding,
    pub blocks: Vec<FusionBlock>,
}

#[derive(Debug, Clone, Copy)]
pub struct FusionDims {
    pub d_model: usize,
    pub num_queries: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub ffn_ratio: usize,
    pub ln_eps: f64,
}

impl FusionTransformer {
    pub fn new(pb: &mut ParamBuilder, name: &str, dims: FusionDims) -> Result<Self> {
        let queries = QueryBank::new(pb, &format!("{name}.queries"), dims.num_queries, dims.d_model)?;
        let text = TextEmbedding::new(pb, &format!("{name}.text"), dims.vocab_size, dims.max_text_len, dims.d_model)?;
        let blocks = (0..dims.num_blocks)
            .map(|i| {
                FusionBlock::new(
                    pb,
                    &format!("{name}.block{i}"),
                    dims.d_model,
                    dims.num_heads,
                    dims.ffn_ratio,
                    dims.ln_eps,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self { queries, text, blocks })
    }

    /// Returns the K fused query vectors.
    ///
    /// `ImageOnly` rejects non-empty text. `ImageAndText` requires `text` to
    /// be present; an empty token list makes it coincide with `ImageOnly`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        image: Var,
        text: Option<&[u32]>,
        mode: FusionMode,
    ) -> Result<Var> {
        let d = self.queries.d_model;
        if g.cols(image) != d {
            return Err(Error::shape("fusion", format!("image width {} for d_model {d}", g.cols(image))));
        }
        let tokens: &[u32] = match (mode, text) {
            (FusionMode::ImageOnly, Some(t)) if !t.is_empty() => {
                return Err(Error::ModeTextMismatch("image_only mode was given text tokens"))
            }
            (FusionMode::ImageOnly, _) => &[],
            (FusionMode::ImageAndText, None) => {
                return Err(Error::ModeTextMismatch("image_and_text mode needs text tokens"))
            }
            (FusionMode::ImageAndText, Some(t)) => t,
        };
        let k = self.queries.k;
        let q = g.param(store, self.queries.queries)?;
        let mut x = if tokens.is_empty() {
            q
        } else {
            let t = self.text.embed(g, store, tokens)?;
            g.concat_rows(&[q, t])?
        };
        for block in &self.blocks {
            x = block.forward(g, store, x, k, image)?;
        }
        if g.rows(x) == k {
            Ok(x)
        } else {
            g.slice_rows(x, 0, k)
        }
    }
}

/// Affine map from encoder width to fusion width.
pub fn project_image_features(g: &mut Graph, store: &ParamStore, proj: &Linear, e: Var) -> Result<Var> {
    if g.cols(e) != proj.in_dim {
        return Err(Error::shape(
            "project_image_features",
            format!("{} columns for d_enc {}", g.cols(e), proj.in_dim),
        ));
    }
    proj.forward(g, store, e)
}
