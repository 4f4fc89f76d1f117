//! The full model: instance correlation → projection → query fusion →
//! classifier and caption decoder.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{CorrelationBlock, CorrelationConfig};
use crate::error::{Error, Result};
use crate::fusion::{project_image_features, FusionDims, FusionMode, FusionTransformer};
use crate::heads::{classification_loss, multitask_loss, with_eos, CaptionDecoder, ClassifierHead, DecoderDims, LossWeights};
use crate::nn::{Linear, ParamBuilder};
use crate::tensor::{grad_check, GradCheckReport, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_enc: usize,
    pub d_model: usize,
    pub num_classes: usize,
    pub vocab_size: usize,
    pub num_queries: usize,
    pub fusion_blocks: usize,
    pub fusion_heads: usize,
    pub use_correlation: bool,
    pub corr_layers: usize,
    pub correlation: CorrelationConfig,
    pub decoder_blocks: usize,
    pub decoder_heads: usize,
    pub ffn_ratio: usize,
    pub max_text_len: usize,
    pub init_std: f32,
}

impl ModelConfig {
    pub fn ln_eps(&self) -> f64 {
        self.correlation.ln_eps
    }
}

/// Per-bag losses on one graph.
#[derive(Debug, Clone, Copy)]
pub struct BagLosses {
    pub l_c: Var,
    pub l_g: Var,
    pub overall: Var,
}

#[derive(Debug, Clone)]
pub struct PathM3 {
    pub cfg: ModelConfig,
    pub correlation: Vec<CorrelationBlock>,
    pub project: Linear,
    pub fusion: FusionTransformer,
    pub classifier: ClassifierHead,
    pub decoder: CaptionDecoder,
}

impl PathM3 {
    /// Builds the model and its freshly initialised parameters.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let model = {
            let mut pb = ParamBuilder::new(&mut store, seed, cfg.init_std);
            Self::build(&mut pb, cfg)?
        };
        Ok((model, store))
    }

    fn build(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let eps = cfg.ln_eps();
        let layers = if cfg.use_correlation { cfg.corr_layers } else { 0 };
        let correlation = (0..layers)
            .map(|i| CorrelationBlock::new(pb, &format!("correlation.layer{i}"), cfg.d_enc, cfg.correlation))
            .collect::<Result<_>>()?;
        let project = Linear::new(pb, "project", cfg.d_enc, cfg.d_model, true)?;
        let fusion = FusionTransformer::new(
            pb,
            "fusion",
            FusionDims {
                d_model: cfg.d_model,
                num_queries: cfg.num_queries,
                num_blocks: cfg.fusion_blocks,
                num_heads: cfg.fusion_heads,
                vocab_size: cfg.vocab_size,
                max_text_len: cfg.max_text_len,
                ffn_ratio: cfg.ffn_ratio,
                ln_eps: eps,
            },
        )?;
        let classifier = ClassifierHead::new(pb, "classifier", cfg.d_model, cfg.num_classes)?;
        let decoder = CaptionDecoder::new(
            pb,
            "decoder",
            DecoderDims {
                d_model: cfg.d_model,
                vocab_size: cfg.vocab_size,
                max_text_len: cfg.max_text_len,
                num_blocks: cfg.decoder_blocks,
                num_heads: cfg.decoder_heads,
                ffn_ratio: cfg.ffn_ratio,
                ln_eps: eps,
            },
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            correlation,
            project,
            fusion,
            classifier,
            decoder,
        })
    }

    /// Correlation layers over the raw instances, then projection to
    /// `d_model`.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, features: &Tensor) -> Result<Var> {
        if features.cols() != self.cfg.d_enc {
            return Err(Error::shape(
                "encode",
                format!("{} feature columns for d_enc {}", features.cols(), self.cfg.d_enc),
            ));
        }
        let mut e = g.input(features)?;
        for layer in &self.correlation {
            e = layer.forward(g, store, e)?;
        }
        project_image_features(g, store, &self.project, e)
    }

    pub fn fuse(&self, g: &mut Graph, store: &ParamStore, image: Var, text: Option<&[u32]>, mode: FusionMode) -> Result<Var> {
        self.fusion.forward(g, store, image, text, mode)
    }

    /// `L_C` from the image-and-text path, `L_G` from the image-only path,
    /// and their weighted sum. Both paths share one encoding of the bag.
    pub fn bag_losses(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        features: &Tensor,
        caption: &[u32],
        label: usize,
        weights: LossWeights,
    ) -> Result<BagLosses> {
        let image = self.encode(g, store, features)?;
        let fused_text = self.fuse(g, store, image, Some(caption), FusionMode::ImageAndText)?;
        let (_, logits) = self.classifier.classify_bag(g, store, fused_text)?;
        let l_c = classification_loss(g, logits, label)?;
        let fused_image = self.fuse(g, store, image, None, FusionMode::ImageOnly)?;
        let l_g = self.decoder.caption_loss(g, store, fused_image, &with_eos(caption))?;
        let overall = multitask_loss(g, l_c, l_g, weights)?;
        Ok(BagLosses { l_c, l_g, overall })
    }

    /// Class probabilities under the given inference modality. `caption` is
    /// used only in `ImageAndText` mode.
    pub fn predict(&self, store: &ParamStore, features: &Tensor, caption: &[u32], mode: FusionMode) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let image = self.encode(&mut g, store, features)?;
        let text = match mode {
            FusionMode::ImageOnly => None,
            FusionMode::ImageAndText => Some(caption),
        };
        let fused = self.fuse(&mut g, store, image, text, mode)?;
        let (probs, _) = self.classifier.classify_bag(&mut g, store, fused)?;
        Ok(g.value_f64(probs).to_vec())
    }

    /// Greedy caption from the image-only path.
    pub fn caption(&self, store: &ParamStore, features: &Tensor, max_len: usize) -> Result<Vec<u32>> {
        let mut g = Graph::new();
        let image = self.encode(&mut g, store, features)?;
        let fused = self.fuse(&mut g, store, image, None, FusionMode::ImageOnly)?;
        let fused = g.value(fused);
        self.decoder.greedy_decode(store, &fused, max_len)
    }

    /// Parameters whose name starts with `prefix`.
    pub fn params_with_prefix(store: &ParamStore, prefix: &str) -> Vec<ParamId> {
        store
            .iter()
            .filter(|(_, p)| p.name.starts_with(prefix))
            .map(|(id, _)| id)
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub seed: u64,
    #[serde(default)]
    pub run: serde_json::Value,
}

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}

/// Writes the weights and a JSON sidecar next to them.
pub fn save_checkpoint(path: &Path, store: &ParamStore, meta: &CheckpointMeta) -> Result<()> {
    store.save(path)?;
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_string_pretty(meta)? + "\n").map_err(|e| Error::io(&side, e))
}

/// Rebuilds the model from the sidecar and loads the stored weights into it.
pub fn load_checkpoint(path: &Path) -> Result<(PathM3, ParamStore, CheckpointMeta)> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    let saved = ParamStore::load(path)?;
    let (model, mut store) = PathM3::new(&meta.model, meta.seed)?;
    if saved.len() != store.len() {
        return Err(Error::DimMismatch(format!(
            "checkpoint has {} parameters, model expects {}",
            saved.len(),
            store.len()
        )));
    }
    store.load_values_from(&saved)?;
    Ok((model, store, meta))
}

/// Central-difference check of every parameter of the multitask loss on one
/// seeded random bag of `instances` rows with a random caption.
pub fn gradcheck_model(
    cfg: &ModelConfig,
    seed: u64,
    instances: usize,
    alpha: f64,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let weights = LossWeights::new(alpha)?;
    let (model, mut store) = PathM3::new(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9c);
    let features = Tensor::randn(vec![instances, cfg.d_enc], 1.0, &mut rng);
    let first_word = crate::heads::EOS + 1;
    if cfg.vocab_size as u32 <= first_word {
        return Err(Error::RangeError {
            key: "vocab_size".into(),
            detail: "no room for ordinary tokens".into(),
        });
    }
    let caption: Vec<u32> = (0..cfg.max_text_len.min(4))
        .map(|_| rng.random_range(first_word..cfg.vocab_size as u32))
        .collect();
    let label = rng.random_range(0..cfg.num_classes);
    let ids: Vec<ParamId> = store.ids().collect();
    grad_check(&mut store, &ids, step, tol, |g, s| {
        Ok(model.bag_losses(g, s, &features, &caption, label, weights)?.overall)
    })
}
