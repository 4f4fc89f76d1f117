//! Task heads: the averaged-logit classifier, the caption decoder and the
//! α-weighted multi-task objective.

use serde::{Deserialize, Serialize};

use crate::attention::{multi_head, multi_head_masked, AttentionKind, MultiHeadWeights};
use crate::error::{Error, Result};
use crate::nn::{FeedForward, LayerNorm, Linear, ParamBuilder};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;

/// One linear map shared by all K query vectors.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub linear: Linear,
    pub num_classes: usize,
}

impl ClassifierHead {
    pub fn new(pb: &mut ParamBuilder, name: &str, d_model: usize, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::RangeError {
                key: "num_classes".into(),
                detail: format!("need at least 2 classes, got {num_classes}"),
            });
        }
        Ok(Self {
            linear: Linear::new(pb, name, d_model, num_classes, true)?,
            num_classes,
        })
    }

    /// Returns `(probs, logits_mean)`, both 1×C. Logits are averaged over
    /// the K queries before the softmax.
    pub fn classify_bag(&self, g: &mut Graph, store: &ParamStore, fused: Var) -> Result<(Var, Var)> {
        if g.cols(fused) != self.linear.in_dim {
            return Err(Error::shape(
                "classify_bag",
                format!("fused width {} for head width {}", g.cols(fused), self.linear.in_dim),
            ));
        }
        let logits = self.linear.forward(g, store, fused)?;
        let mean = g.mean_rows(logits)?;
        let probs = g.softmax_rows(mean)?;
        Ok((probs, mean))
    }
}

/// `−log softmax(logits_mean)[label]`.
pub fn classification_loss(g: &mut Graph, logits_mean: Var, label: usize) -> Result<Var> {
    g.cross_entropy(logits_mean, label)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
}

impl LossWeights {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::RangeError {
                key: "alpha".into(),
                detail: format!("{alpha} is outside [0, 1]"),
            });
        }
        Ok(Self { alpha })
    }
}

/// `α·L_C + (1 − α)·L_G`.
pub fn multitask_loss(g: &mut Graph, l_c: Var, l_g: Var, w: LossWeights) -> Result<Var> {
    let a = g.scale(l_c, w.alpha)?;
    let b = g.scale(l_g, 1.0 - w.alpha)?;
    g.add(a, b)
}

#[derive(Debug, Clone)]
pub struct DecoderBlock {
    pub ln_self: LayerNorm,
    pub self_attn: MultiHeadWeights,
    pub ln_cross: LayerNorm,
    pub cross_attn: MultiHeadWeights,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderBlock {
    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, memory: Var, heads: usize) -> Result<Var> {
        let h = self.ln_self.forward(g, store, x)?;
        let a = multi_head_masked(g, store, AttentionKind::Exact, h, h, &self.self_attn, heads, true)?;
        let x = g.add(a, x)?;
        let h = self.ln_cross.forward(g, store, x)?;
        let c = multi_head(g, store, AttentionKind::Exact, h, memory, &self.cross_attn, heads)?;
        let x = g.add(c, x)?;
        let h = self.ln_ffn.forward(g, store, x)?;
        let f = self.ffn.forward(g, store, h)?;
        g.add(f, x)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderDims {
    pub d_model: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub ffn_ratio: usize,
    pub ln_eps: f64,
}

/// Small causal decoder that cross-attends to the K fused query vectors.
#[derive(Debug, Clone)]
pub struct CaptionDecoder {
    pub tokens: crate::tensor::ParamId,
    /// `max_text_len + 1` rows: the BOS slot plus one per caption token.
    pub positions: crate::tensor::ParamId,
    pub blocks: Vec<DecoderBlock>,
    pub ln_f: LayerNorm,
    pub out: Linear,
    pub dims: DecoderDims,
}

impl CaptionDecoder {
    pub fn new(pb: &mut ParamBuilder, name: &str, dims: DecoderDims) -> Result<Self> {
        let d = dims.d_model;
        if dims.num_heads == 0 || !d.is_multiple_of(dims.num_heads) {
            return Err(Error::RangeError {
                key: "decoder_heads".into(),
                detail: format!("{} heads do not divide d_model {d}", dims.num_heads),
            });
        }
        if dims.vocab_size <= EOS as usize {
            return Err(Error::RangeError {
                key: "vocab_size".into(),
                detail: "vocabulary must hold PAD, BOS and EOS".into(),
            });
        }
        let tokens = pb.normal(&format!("{name}.tok"), vec![dims.vocab_size, d])?;
        let positions = pb.normal(&format!("{name}.pos"), vec![dims.max_text_len + 1, d])?;
        let blocks = (0..dims.num_blocks)
            .map(|i| {
                let p = format!("{name}.block{i}");
                Ok(DecoderBlock {
                    ln_self: LayerNorm::new(pb, &format!("{p}.ln_self"), d, dims.ln_eps)?,
                    self_attn: MultiHeadWeights::new(pb, &format!("{p}.selfattn"), d)?,
                    ln_cross: LayerNorm::new(pb, &format!("{p}.ln_cross"), d, dims.ln_eps)?,
                    cross_attn: MultiHeadWeights::new(pb, &format!("{p}.crossattn"), d)?,
                    ln_ffn: LayerNorm::new(pb, &format!("{p}.ln_ffn"), d, dims.ln_eps)?,
                    ffn: FeedForward::new(pb, &format!("{p}.ffn"), d, dims.ffn_ratio)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            tokens,
            positions,
            blocks,
            ln_f: LayerNorm::new(pb, &format!("{name}.ln_f"), d, dims.ln_eps)?,
            out: Linear::new(pb, &format!("{name}.out"), d, dims.vocab_size, true)?,
            dims,
        })
    }

    /// Next-token logits (L×V) for every position of `input`.
    pub fn logits(&self, g: &mut Graph, store: &ParamStore, fused: Var, input: &[u32]) -> Result<Var> {
        if input.len() > self.dims.max_text_len + 1 {
            return Err(Error::TextTooLong {
                len: input.len(),
                max: self.dims.max_text_len + 1,
            });
        }
        let ids: Vec<usize> = input.iter().map(|&t| t as usize).collect();
        let table = g.param(store, self.tokens)?;
        let pos = g.param(store, self.positions)?;
        let tok = g.gather_rows(table, &ids)?;
        let p = g.slice_rows(pos, 0, ids.len())?;
        let mut x = g.add(tok, p)?;
        for b in &self.blocks {
            x = b.forward(g, store, x, fused, self.dims.num_heads)?;
        }
        let x = self.ln_f.forward(g, store, x)?;
        self.out.forward(g, store, x)
    }

    fn check_tokens(&self, ids: &[u32]) -> Result<()> {
        match ids.iter().find(|&&t| t as usize >= self.dims.vocab_size) {
            Some(&id) => Err(Error::TokenOutOfVocab {
                id,
                vocab: self.dims.vocab_size,
            }),
            None => Ok(()),
        }
    }

    /// Teacher-forced mean cross-entropy.
    ///
    /// `target` is `t₁ … t_L` and normally ends in EOS; the decoder reads
    /// `[BOS, t₁ … t_{L−1}]`. PAD targets are skipped.
    pub fn caption_loss(&self, g: &mut Graph, store: &ParamStore, fused: Var, target: &[u32]) -> Result<Var> {
        if target.is_empty() {
            return Err(Error::EmptyTarget);
        }
        self.check_tokens(target)?;
        let mut input = Vec::with_capacity(target.len());
        input.push(BOS);
        input.extend_from_slice(&target[..target.len() - 1]);
        let logits = self.logits(g, store, fused, &input)?;
        let targets: Vec<Option<usize>> = target
            .iter()
            .map(|&t| (t != PAD).then_some(t as usize))
            .collect();
        g.cross_entropy_rows(logits, &targets)
    }

    /// Argmax decoding from BOS (ties go to the lowest id). Stops at EOS or
    /// after `max_len` tokens; the returned sequence excludes BOS and EOS.
    pub fn greedy_decode(&self, store: &ParamStore, fused: &Tensor, max_len: usize) -> Result<Vec<u32>> {
        let max_len = max_len.min(self.dims.max_text_len);
        let mut seq = vec![BOS];
        while seq.len() <= max_len {
            let mut g = Graph::new();
            let f = g.input(fused)?;
            let logits = self.logits(&mut g, store, f, &seq)?;
            let v = self.dims.vocab_size;
            let last = &g.value_f64(logits)[(seq.len() - 1) * v..seq.len() * v];
            let mut best = 0;
            for (i, x) in last.iter().enumerate() {
                if *x > last[best] {
                    best = i;
                }
            }
            if best as u32 == EOS {
                break;
            }
            seq.push(best as u32);
        }
        seq.remove(0);
        Ok(seq)
    }
}

/// `caption` followed by EOS, the decoder's training target.
pub fn with_eos(caption: &[u32]) -> Vec<u32> {
    let mut t = caption.to_vec();
    t.push(EOS);
    t
}
