//! Exact and Nyström multi-head attention, and the residual instance
//! correlation block `E ← MSA(LN(E)) + E` applied to a bag of embeddings.

mod nystrom;

pub use nystrom::{
    attend_nystrom, moore_penrose_pinv, pinv, segment_bounds, segment_mean_landmarks, LandmarkSet,
    PseudoInverse,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerNorm, ParamBuilder};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

pub const DEFAULT_HEADS: usize = 8;
pub const DEFAULT_LANDMARKS: usize = 64;
pub const DEFAULT_PINV_ITERATIONS: usize = 13;
pub const DEFAULT_NYSTROM_THRESHOLD: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub num_heads: usize,
    pub landmark_count: usize,
    pub pinv_iterations: usize,
}

impl AttentionConfig {
    pub fn new(model_dim: usize, num_heads: usize, landmark_count: usize, pinv_iterations: usize) -> Result<Self> {
        let cfg = Self {
            model_dim,
            num_heads,
            landmark_count,
            pinv_iterations,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.num_heads == 0 || !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::RangeError {
                key: "num_heads".into(),
                detail: format!("{} heads do not divide model_dim {}", self.num_heads, self.model_dim),
            });
        }
        if self.landmark_count == 0 {
            return Err(Error::InvalidLandmarkCount {
                landmarks: 0,
                len: self.model_dim,
            });
        }
        if self.pinv_iterations == 0 {
            return Err(Error::RangeError {
                key: "pinv_iterations".into(),
                detail: "must be at least 1".into(),
            });
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn nystrom(&self) -> AttentionKind {
        AttentionKind::Nystrom {
            landmarks: self.landmark_count,
            pinv_iterations: self.pinv_iterations,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    Exact,
    Nystrom { landmarks: usize, pinv_iterations: usize },
}

/// `softmax(q·kᵀ/√d)·v` for one head.
pub fn attend_exact(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var> {
    let d = g.cols(q);
    if g.cols(k) != d || g.rows(k) != g.rows(v) {
        return Err(Error::shape(
            "exact_attention",
            format!("q {:?}, k {:?}, v {:?}", g.shape(q), g.shape(k), g.shape(v)),
        ));
    }
    let s = g.matmul_nt(q, k)?;
    let s = g.scale(s, 1.0 / (d as f64).sqrt())?;
    let p = g.softmax_rows(s)?;
    g.matmul(p, v)
}

pub fn attend(g: &mut Graph, kind: AttentionKind, q: Var, k: Var, v: Var) -> Result<Var> {
    match kind {
        AttentionKind::Exact => attend_exact(g, q, k, v),
        AttentionKind::Nystrom {
            landmarks,
            pinv_iterations,
        } => attend_nystrom(g, q, k, v, landmarks, pinv_iterations),
    }
}

/// Tensor-level exact attention.
pub fn exact_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (q, k, v) = (g.input(q)?, g.input(k)?, g.input(v)?);
    let out = attend_exact(&mut g, q, k, v)?;
    Ok(g.value(out))
}

/// Tensor-level Nyström attention with the landmark count and pinv
/// iteration count of `cfg`.
pub fn nystrom_attention(q: &Tensor, k: &Tensor, v: &Tensor, cfg: &AttentionConfig) -> Result<Tensor> {
    let mut g = Graph::new();
    let (q, k, v) = (g.input(q)?, g.input(k)?, g.input(v)?);
    let out = attend_nystrom(&mut g, q, k, v, cfg.landmark_count, cfg.pinv_iterations)?;
    Ok(g.value(out))
}

/// Bias-free projections of one multi-head attention layer, each d×d.
#[derive(Debug, Clone)]
pub struct MultiHeadWeights {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl MultiHeadWeights {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            wq: pb.normal(&format!("{name}.wq"), vec![dim, dim])?,
            wk: pb.normal(&format!("{name}.wk"), vec![dim, dim])?,
            wv: pb.normal(&format!("{name}.wv"), vec![dim, dim])?,
            wo: pb.normal(&format!("{name}.wo"), vec![dim, dim])?,
        })
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.wq, self.wk, self.wv, self.wo]
    }
}

/// Projects `x_q` and `x_kv`, runs `kind` attention per head on column
/// slices, concatenates the heads and applies the output projection.
pub fn multi_head(
    g: &mut Graph,
    store: &ParamStore,
    kind: AttentionKind,
    x_q: Var,
    x_kv: Var,
    w: &MultiHeadWeights,
    num_heads: usize,
) -> Result<Var> {
    multi_head_masked(g, store, kind, x_q, x_kv, w, num_heads, false)
}

/// [`multi_head`] with an optional causal mask (exact attention only).
#[allow(clippy::too_many_arguments)]
pub(crate) fn multi_head_masked(
    g: &mut Graph,
    store: &ParamStore,
    kind: AttentionKind,
    x_q: Var,
    x_kv: Var,
    w: &MultiHeadWeights,
    num_heads: usize,
    causal: bool,
) -> Result<Var> {
    let d = g.cols(x_q);
    if g.cols(x_kv) != d {
        return Err(Error::shape("multi_head", format!("query width {d}, key width {}", g.cols(x_kv))));
    }
    if num_heads == 0 || !d.is_multiple_of(num_heads) {
        return Err(Error::shape("multi_head", format!("{num_heads} heads for width {d}")));
    }
    let wq = g.param(store, w.wq)?;
    let wk = g.param(store, w.wk)?;
    let wv = g.param(store, w.wv)?;
    let wo = g.param(store, w.wo)?;
    if g.shape(wq) != (d, d) {
        return Err(Error::shape("multi_head", format!("projection {:?} for width {d}", g.shape(wq))));
    }
    let q = g.matmul(x_q, wq)?;
    let k = g.matmul(x_kv, wk)?;
    let v = g.matmul(x_kv, wv)?;
    let hd = d / num_heads;
    let mut heads = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let qh = g.slice_cols(q, h * hd, hd)?;
        let kh = g.slice_cols(k, h * hd, hd)?;
        let vh = g.slice_cols(v, h * hd, hd)?;
        let out = if causal {
            let s = g.matmul_nt(qh, kh)?;
            let s = g.scale(s, 1.0 / (hd as f64).sqrt())?;
            let p = g.softmax_rows_causal(s)?;
            g.matmul(p, vh)?
        } else {
            attend(g, kind, qh, kh, vh)?
        };
        heads.push(out);
    }
    let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    g.matmul(cat, wo)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationConfig {
    pub num_heads: usize,
    pub landmarks: usize,
    pub pinv_iterations: usize,
    /// Bags with more instances than this use Nyström attention.
    pub nystrom_threshold: usize,
    pub ln_eps: f64,
}

impl Default for CorrelationConfig {
    fn default() -> Self {
        Self {
            num_heads: DEFAULT_HEADS,
            landmarks: DEFAULT_LANDMARKS,
            pinv_iterations: DEFAULT_PINV_ITERATIONS,
            nystrom_threshold: DEFAULT_NYSTROM_THRESHOLD,
            ln_eps: 1e-5,
        }
    }
}

/// Residual self-attention over the instances of one bag.
#[derive(Debug, Clone)]
pub struct CorrelationBlock {
    pub norm: LayerNorm,
    pub attn: MultiHeadWeights,
    pub cfg: CorrelationConfig,
}

impl CorrelationBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, cfg: CorrelationConfig) -> Result<Self> {
        AttentionConfig::new(dim, cfg.num_heads, cfg.landmarks, cfg.pinv_iterations)?;
        Ok(Self {
            norm: LayerNorm::new(pb, &format!("{name}.ln"), dim, cfg.ln_eps)?,
            attn: MultiHeadWeights::new(pb, &format!("{name}.attn"), dim)?,
            cfg,
        })
    }

    pub fn kind_for(&self, instances: usize) -> AttentionKind {
        if instances > self.cfg.nystrom_threshold {
            AttentionKind::Nystrom {
                landmarks: self.cfg.landmarks,
                pinv_iterations: self.cfg.pinv_iterations,
            }
        } else {
            AttentionKind::Exact
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, e: Var) -> Result<Var> {
        let kind = self.kind_for(g.rows(e));
        self.forward_with(g, store, e, kind)
    }

    pub fn forward_with(&self, g: &mut Graph, store: &ParamStore, e: Var, kind: AttentionKind) -> Result<Var> {
        let normed = self.norm.forward(g, store, e)?;
        let mixed = multi_head(g, store, kind, normed, normed, &self.attn, self.cfg.num_heads)?;
        g.add(mixed, e)
    }
}

#[cfg(test)]
mod tests;
