//! Flat run configuration: presets, JSON file layer, `key=value` overrides,
//! and validation that names the offending key.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::attention::CorrelationConfig;
use crate::data::{Manifest, Split, SplitFractions, SyntheticSpec};
use crate::error::{Error, Result};
use crate::fusion::FusionMode;
use crate::model::ModelConfig;
use crate::train::{AdamWConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Small dims that train in about a minute per run.
    Desk,
    /// Dims from the published hyperparameter table; shape-level use only.
    Paper,
    /// A handful of parameters per tensor, for gradient checking.
    Tiny,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
            Preset::Tiny => "tiny",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            "tiny" => Ok(Preset::Tiny),
            other => Err(Error::TypeError {
                key: "preset".into(),
                detail: format!("`{other}` is not one of desk, paper, tiny"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,

    pub d_enc: usize,
    pub d_model: usize,
    pub num_classes: usize,
    pub vocab_size: usize,
    pub num_queries: usize,
    pub fusion_blocks: usize,
    pub fusion_heads: usize,
    pub use_correlation: bool,
    pub corr_layers: usize,
    pub corr_heads: usize,
    pub landmarks: usize,
    pub pinv_iterations: usize,
    pub nystrom_threshold: usize,
    pub decoder_blocks: usize,
    pub decoder_heads: usize,
    pub ffn_ratio: usize,
    pub max_text_len: usize,
    pub init_std: f64,
    pub ln_eps: f64,

    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub alpha: f64,
    pub seed: u64,
    pub max_decode_len: usize,

    pub num_bags: usize,
    pub m_min: usize,
    pub m_max: usize,
    pub motif_strength: f64,
    pub noise_std: f64,
    pub motif_frac_min: f64,
    pub motif_frac_max: f64,
    pub data_seed: u64,
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub stratify: bool,

    pub data_dir: PathBuf,
    pub runs_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub mode: FusionMode,
    pub split: Split,

    pub bench_sizes: Vec<usize>,
    pub bench_landmarks: usize,
    pub bench_repeats: usize,
    pub bench_dim: usize,

    pub grad_instances: usize,
    pub grad_step: f64,
    pub grad_tol: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let desk = Self {
            preset: Preset::Desk,
            d_enc: 32,
            d_model: 64,
            num_classes: 3,
            vocab_size: 64,
            num_queries: 4,
            fusion_blocks: 2,
            fusion_heads: 4,
            use_correlation: true,
            corr_layers: 1,
            corr_heads: 4,
            landmarks: 16,
            pinv_iterations: 13,
            nystrom_threshold: 256,
            decoder_blocks: 2,
            decoder_heads: 4,
            ffn_ratio: 4,
            max_text_len: 16,
            init_std: 0.02,
            ln_eps: 1e-5,
            epochs: 30,
            batch_size: 16,
            lr: 3e-3,
            warmup_lr: 3e-4,
            warmup_steps: 10,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            alpha: 0.5,
            seed: 0,
            max_decode_len: 16,
            num_bags: 300,
            m_min: 50,
            m_max: 200,
            motif_strength: 3.0,
            noise_std: 1.0,
            motif_frac_min: 0.1,
            motif_frac_max: 0.3,
            data_seed: 0,
            train_frac: 0.2,
            val_frac: 0.4,
            test_frac: 0.4,
            stratify: false,
            data_dir: PathBuf::from("data"),
            runs_dir: PathBuf::from("runs"),
            checkpoint: None,
            mode: FusionMode::ImageAndText,
            split: Split::Test,
            bench_sizes: vec![256, 512, 1024, 2048],
            bench_landmarks: 64,
            bench_repeats: 3,
            bench_dim: 64,
            grad_instances: 6,
            grad_step: 1e-3,
            grad_tol: 1e-2,
        };
        match preset {
            Preset::Desk => desk,
            Preset::Paper => Self {
                preset,
                d_enc: 1408,
                d_model: 768,
                num_queries: 32,
                fusion_blocks: 12,
                fusion_heads: 12,
                corr_heads: 8,
                landmarks: 64,
                decoder_heads: 12,
                lr: 1e-4,
                warmup_lr: 1e-5,
                warmup_steps: 1000,
                ..desk
            },
            Preset::Tiny => Self {
                preset,
                d_enc: 8,
                d_model: 8,
                vocab_size: 11,
                num_queries: 2,
                fusion_blocks: 1,
                fusion_heads: 2,
                corr_heads: 2,
                landmarks: 4,
                decoder_blocks: 1,
                decoder_heads: 2,
                ffn_ratio: 2,
                max_text_len: 6,
                init_std: 0.5,
                epochs: 2,
                max_decode_len: 6,
                num_bags: 10,
                m_min: 4,
                m_max: 8,
                ..desk
            },
        }
    }

    /// Layers `file` then `overrides` on top of a preset. The preset comes
    /// from the first of: an override `preset=…`, the file's `preset`, desk.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let file_map = match file {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                if text.trim().is_empty() {
                    Map::new()
                } else {
                    match serde_json::from_str::<Value>(&text)? {
                        Value::Object(m) => m,
                        _ => {
                            return Err(Error::TypeError {
                                key: "<root>".into(),
                                detail: format!("{} is not a JSON object", path.display()),
                            })
                        }
                    }
                }
            }
            None => Map::new(),
        };
        Self::from_layers(&file_map, overrides)
    }

    pub fn from_layers(file: &Map<String, Value>, overrides: &[(String, String)]) -> Result<Self> {
        let preset = match overrides.iter().rev().find(|(k, _)| k == "preset") {
            Some((_, v)) => v.parse()?,
            None => match file.get("preset") {
                Some(Value::String(s)) => s.parse()?,
                Some(other) => return Err(type_error("preset", "a string", other)),
                None => Preset::Desk,
            },
        };
        let mut map = match serde_json::to_value(Self::preset(preset))? {
            Value::Object(m) => m,
            _ => unreachable!("RunConfig serializes to an object"),
        };
        for (key, value) in file {
            set_checked(&mut map, key, value.clone())?;
        }
        for (key, raw) in overrides {
            let target = map.get(key).ok_or_else(|| Error::UnknownKey(key.clone()))?;
            let value = parse_flag_value(key, target, raw)?;
            set_checked(&mut map, key, value)?;
        }
        let cfg: Self = serde_json::from_value(Value::Object(map)).map_err(|e| Error::TypeError {
            key: "<config>".into(),
            detail: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_enc", self.d_enc),
            ("d_model", self.d_model),
            ("vocab_size", self.vocab_size),
            ("num_queries", self.num_queries),
            ("fusion_blocks", self.fusion_blocks),
            ("fusion_heads", self.fusion_heads),
            ("corr_heads", self.corr_heads),
            ("landmarks", self.landmarks),
            ("pinv_iterations", self.pinv_iterations),
            ("decoder_blocks", self.decoder_blocks),
            ("decoder_heads", self.decoder_heads),
            ("ffn_ratio", self.ffn_ratio),
            ("max_text_len", self.max_text_len),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("max_decode_len", self.max_decode_len),
            ("num_bags", self.num_bags),
            ("m_min", self.m_min),
            ("bench_landmarks", self.bench_landmarks),
            ("bench_repeats", self.bench_repeats),
            ("bench_dim", self.bench_dim),
            ("grad_instances", self.grad_instances),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(range(key, "must be at least 1"));
            }
        }
        if self.num_classes < 2 {
            return Err(range("num_classes", "need at least 2 classes"));
        }
        for (key, dim, heads) in [
            ("fusion_heads", self.d_model, self.fusion_heads),
            ("decoder_heads", self.d_model, self.decoder_heads),
            ("corr_heads", self.d_enc, self.corr_heads),
        ] {
            if dim % heads != 0 {
                return Err(range(key, &format!("{heads} heads do not divide width {dim}")));
            }
        }
        if self.use_correlation && self.corr_layers == 0 {
            return Err(range("corr_layers", "must be at least 1 when use_correlation is set"));
        }
        if self.m_max < self.m_min {
            return Err(range("m_max", &format!("{} is below m_min {}", self.m_max, self.m_min)));
        }
        let unit = [
            ("alpha", self.alpha),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("motif_frac_min", self.motif_frac_min),
            ("motif_frac_max", self.motif_frac_max),
            ("train_frac", self.train_frac),
            ("val_frac", self.val_frac),
            ("test_frac", self.test_frac),
        ];
        for (key, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(range(key, &format!("{v} is outside [0, 1]")));
            }
        }
        if self.beta1 == 1.0 || self.beta2 == 1.0 {
            return Err(range(if self.beta1 == 1.0 { "beta1" } else { "beta2" }, "must be below 1"));
        }
        if self.motif_frac_max < self.motif_frac_min {
            return Err(range("motif_frac_max", "is below motif_frac_min"));
        }
        let non_negative = [
            ("init_std", self.init_std),
            ("lr", self.lr),
            ("warmup_lr", self.warmup_lr),
            ("weight_decay", self.weight_decay),
            ("motif_strength", self.motif_strength),
            ("noise_std", self.noise_std),
        ];
        for (key, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(range(key, &format!("{v} must be finite and non-negative")));
            }
        }
        let strictly_positive = [
            ("ln_eps", self.ln_eps),
            ("adam_eps", self.adam_eps),
            ("grad_step", self.grad_step),
            ("grad_tol", self.grad_tol),
        ];
        for (key, v) in strictly_positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(range(key, &format!("{v} must be finite and positive")));
            }
        }
        let fsum = self.train_frac + self.val_frac + self.test_frac;
        if (fsum - 1.0).abs() > 1e-9 {
            return Err(range("train_frac", &format!("train_frac + val_frac + test_frac = {fsum}, expected 1")));
        }
        if self.bench_sizes.is_empty() {
            return Err(range("bench_sizes", "needs at least one length"));
        }
        if let Some(len) = self.bench_sizes.iter().find(|&&m| m < self.bench_landmarks) {
            return Err(range("bench_sizes", &format!("length {len} is below bench_landmarks {}", self.bench_landmarks)));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_enc: self.d_enc,
            d_model: self.d_model,
            num_classes: self.num_classes,
            vocab_size: self.vocab_size,
            num_queries: self.num_queries,
            fusion_blocks: self.fusion_blocks,
            fusion_heads: self.fusion_heads,
            use_correlation: self.use_correlation,
            corr_layers: self.corr_layers,
            correlation: CorrelationConfig {
                num_heads: self.corr_heads,
                landmarks: self.landmarks,
                pinv_iterations: self.pinv_iterations,
                nystrom_threshold: self.nystrom_threshold,
                ln_eps: self.ln_eps,
            },
            decoder_blocks: self.decoder_blocks,
            decoder_heads: self.decoder_heads,
            ffn_ratio: self.ffn_ratio,
            max_text_len: self.max_text_len,
            init_std: self.init_std as f32,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            warmup_lr: self.warmup_lr,
            warmup_steps: self.warmup_steps,
            adamw: AdamWConfig {
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
                weight_decay: self.weight_decay,
            },
            alpha: self.alpha,
            seed: self.seed,
            max_decode_len: self.max_decode_len,
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_bags: self.num_bags,
            num_classes: self.num_classes,
            d_enc: self.d_enc,
            m_min: self.m_min,
            m_max: self.m_max,
            motif_strength: self.motif_strength,
            noise_std: self.noise_std,
            motif_frac_min: self.motif_frac_min,
            motif_frac_max: self.motif_frac_max,
            seed: self.data_seed,
        }
    }

    pub fn split_fractions(&self) -> Result<SplitFractions> {
        SplitFractions::new(self.train_frac, self.val_frac, self.test_frac)
    }

    /// The model dims that must agree with a corpus.
    pub fn check_manifest(&self, manifest: &Manifest) -> Result<()> {
        for (key, ours, theirs) in [
            ("d_enc", self.d_enc, manifest.d_enc),
            ("num_classes", self.num_classes, manifest.num_classes),
            ("vocab_size", self.vocab_size, manifest.vocab_size()),
        ] {
            if ours != theirs {
                return Err(range(key, &format!("config has {ours}, the corpus has {theirs}")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

fn range(key: &str, detail: &str) -> Error {
    Error::RangeError {
        key: key.into(),
        detail: detail.into(),
    }
}

fn type_error(key: &str, expected: &str, got: &Value) -> Error {
    Error::TypeError {
        key: key.into(),
        detail: format!("expected {expected}, got {got}"),
    }
}

/// The JSON kind a key accepts, judged from its current value.
fn check_type(key: &str, target: &Value, value: &Value) -> Result<()> {
    let ok = match target {
        Value::Bool(_) => value.is_boolean(),
        Value::String(_) => value.is_string(),
        // Only `checkpoint` is nullable.
        Value::Null => value.is_string() || value.is_null(),
        Value::Number(n) if n.is_u64() => value.is_u64(),
        Value::Number(_) => value.is_number(),
        Value::Array(_) => value.as_array().is_some_and(|a| a.iter().all(Value::is_u64)),
        Value::Object(_) => false,
    };
    if ok {
        Ok(())
    } else {
        let expected = match target {
            Value::Bool(_) => "a boolean",
            Value::String(_) => "a string",
            Value::Null => "a string or null",
            Value::Number(n) if n.is_u64() => "a non-negative integer",
            Value::Number(_) => "a number",
            Value::Array(_) => "a list of non-negative integers",
            Value::Object(_) => "nothing",
        };
        Err(type_error(key, expected, value))
    }
}

fn set_checked(map: &mut Map<String, Value>, key: &str, value: Value) -> Result<()> {
    let target = map.get(key).ok_or_else(|| Error::UnknownKey(key.to_string()))?;
    check_type(key, target, &value)?;
    if let Value::String(v) = &value {
        match key {
            "mode" => drop(v.parse::<FusionMode>()?),
            "split" => drop(v.parse::<Split>()?),
            "preset" => drop(v.parse::<Preset>()?),
            _ => {}
        }
    }
    map.insert(key.to_string(), value);
    Ok(())
}

/// Reads a command-line value with the type of the key it overrides.
fn parse_flag_value(key: &str, target: &Value, raw: &str) -> Result<Value> {
    let bad = || Error::TypeError {
        key: key.into(),
        detail: format!("cannot read `{raw}`"),
    };
    match target {
        Value::String(_) | Value::Null => Ok(Value::String(raw.to_string())),
        Value::Array(_) => {
            let items: std::result::Result<Vec<u64>, _> = raw
                .trim_matches(|c| c == '[' || c == ']')
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| s.trim().parse::<u64>())
                .collect();
            Ok(Value::from(items.map_err(|_| bad())?))
        }
        _ => serde_json::from_str(raw).map_err(|_| bad()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Paper,
    Chosen,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Paper => "paper",
            Provenance::Chosen => "chosen",
        }
    }
}

/// One documented key. `published` holds the value from the published
/// hyperparameter table or setup, when there is one.
#[derive(Debug, Clone, Copy)]
pub struct KeyDoc {
    pub key: &'static str,
    pub published: Option<&'static str>,
    pub help: &'static str,
}

pub const KEYS: &[KeyDoc] = &[
    KeyDoc { key: "preset", published: None, help: "desk, paper or tiny; applied before the file and flags" },
    KeyDoc { key: "d_enc", published: Some("1408"), help: "instance embedding width (correlation module)" },
    KeyDoc { key: "d_model", published: Some("768"), help: "query / fusion width" },
    KeyDoc { key: "num_classes", published: Some("3"), help: "bag classes" },
    KeyDoc { key: "vocab_size", published: None, help: "caption vocabulary size, must match the manifest" },
    KeyDoc { key: "num_queries", published: Some("32"), help: "learnable queries K" },
    KeyDoc { key: "fusion_blocks", published: Some("12"), help: "fusion blocks N" },
    KeyDoc { key: "fusion_heads", published: None, help: "attention heads in fusion blocks" },
    KeyDoc { key: "use_correlation", published: Some("true"), help: "apply the instance correlation module" },
    KeyDoc { key: "corr_layers", published: Some("1"), help: "stacked correlation blocks" },
    KeyDoc { key: "corr_heads", published: None, help: "attention heads in the correlation module" },
    KeyDoc { key: "landmarks", published: None, help: "Nyström landmarks m" },
    KeyDoc { key: "pinv_iterations", published: None, help: "Newton-Schulz iterations for the pseudoinverse" },
    KeyDoc { key: "nystrom_threshold", published: None, help: "bags larger than this use Nyström attention" },
    KeyDoc { key: "decoder_blocks", published: None, help: "caption decoder blocks" },
    KeyDoc { key: "decoder_heads", published: None, help: "caption decoder heads" },
    KeyDoc { key: "ffn_ratio", published: None, help: "feed-forward expansion factor" },
    KeyDoc { key: "max_text_len", published: None, help: "longest caption accepted, in tokens" },
    KeyDoc { key: "init_std", published: None, help: "std of Gaussian weight init" },
    KeyDoc { key: "ln_eps", published: None, help: "layer norm epsilon" },
    KeyDoc { key: "epochs", published: None, help: "training epochs" },
    KeyDoc { key: "batch_size", published: Some("16"), help: "bags per optimizer step" },
    KeyDoc { key: "lr", published: Some("0.0001"), help: "peak learning rate" },
    KeyDoc { key: "warmup_lr", published: Some("0.00001"), help: "learning rate at step 0" },
    KeyDoc { key: "warmup_steps", published: Some("1000"), help: "linear warmup length, then cosine decay to 0" },
    KeyDoc { key: "weight_decay", published: Some("0.05"), help: "decoupled AdamW weight decay" },
    KeyDoc { key: "beta1", published: Some("0.9"), help: "AdamW beta1" },
    KeyDoc { key: "beta2", published: Some("0.999"), help: "AdamW beta2" },
    KeyDoc { key: "adam_eps", published: None, help: "AdamW epsilon" },
    KeyDoc { key: "alpha", published: None, help: "loss weight: alpha*L_C + (1-alpha)*L_G" },
    KeyDoc { key: "seed", published: None, help: "init and shuffle seed" },
    KeyDoc { key: "max_decode_len", published: None, help: "greedy decoding cap" },
    KeyDoc { key: "num_bags", published: None, help: "synthetic bags" },
    KeyDoc { key: "m_min", published: None, help: "fewest instances per synthetic bag" },
    KeyDoc { key: "m_max", published: None, help: "most instances per synthetic bag" },
    KeyDoc { key: "motif_strength", published: None, help: "norm of the planted class motif" },
    KeyDoc { key: "noise_std", published: None, help: "instance noise std" },
    KeyDoc { key: "motif_frac_min", published: None, help: "lowest fraction of motif instances" },
    KeyDoc { key: "motif_frac_max", published: None, help: "highest fraction of motif instances" },
    KeyDoc { key: "data_seed", published: None, help: "corpus and split seed" },
    KeyDoc { key: "train_frac", published: Some("0.2"), help: "training fraction" },
    KeyDoc { key: "val_frac", published: Some("0.4"), help: "validation fraction" },
    KeyDoc { key: "test_frac", published: Some("0.4"), help: "test fraction" },
    KeyDoc { key: "stratify", published: None, help: "split each class separately" },
    KeyDoc { key: "data_dir", published: None, help: "corpus directory" },
    KeyDoc { key: "runs_dir", published: None, help: "parent of per-run directories" },
    KeyDoc { key: "checkpoint", published: None, help: "checkpoint for eval and caption" },
    KeyDoc { key: "mode", published: None, help: "inference modality: image_only or image_and_text" },
    KeyDoc { key: "split", published: None, help: "split evaluated by eval and caption" },
    KeyDoc { key: "bench_sizes", published: None, help: "bag lengths timed by bench" },
    KeyDoc { key: "bench_landmarks", published: None, help: "landmarks used by bench" },
    KeyDoc { key: "bench_repeats", published: None, help: "timing repeats; the median is reported" },
    KeyDoc { key: "bench_dim", published: None, help: "head width used by bench" },
    KeyDoc { key: "grad_instances", published: None, help: "instances in the gradcheck bag" },
    KeyDoc { key: "grad_step", published: None, help: "central difference step" },
    KeyDoc { key: "grad_tol", published: None, help: "max relative error allowed" },
];

fn render(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn same_value(a: &Value, published: &str) -> bool {
    match (a, serde_json::from_str::<Value>(published)) {
        (Value::Number(x), Ok(Value::Number(y))) => x.as_f64() == y.as_f64(),
        (x, Ok(y)) => *x == y,
        (x, Err(_)) => render(x) == published,
    }
}

impl RunConfig {
    /// `(key, default, provenance)` for every key. A default is tagged
    /// "paper" when it equals the published value.
    pub fn provenance(&self) -> Result<Vec<(&'static str, String, Provenance)>> {
        let map = match serde_json::to_value(self)? {
            Value::Object(m) => m,
            _ => unreachable!("RunConfig serializes to an object"),
        };
        Ok(KEYS
            .iter()
            .map(|doc| {
                let v = &map[doc.key];
                let prov = match doc.published {
                    Some(p) if same_value(v, p) => Provenance::Paper,
                    _ => Provenance::Chosen,
                };
                (doc.key, render(v), prov)
            })
            .collect())
    }

    /// Text table of keys, defaults and provenance, for `--help`.
    pub fn help_table(&self) -> Result<String> {
        let mut out = String::new();
        for ((key, value, prov), doc) in self.provenance()?.into_iter().zip(KEYS) {
            let published = match (prov, doc.published) {
                (Provenance::Chosen, Some(p)) => format!("; published {p}"),
                _ => String::new(),
            };
            let _ = writeln!(out, "  {key:<18} {value:<22} [{}{published}] {}", prov.as_str(), doc.help);
        }
        Ok(out)
    }
}
