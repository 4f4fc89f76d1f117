//! Bags, manifests, feature files, splits and the synthetic corpus.

mod features;
mod split;
mod synth;

pub use features::{decode_features, encode_features, read_feature_file, write_feature_file, FEATURE_MAGIC, FEATURE_VERSION};
pub use split::{split_dataset, SplitFractions};
pub use synth::{caption_vocab, class_template, generate_synthetic_corpus, slot_variant, SyntheticSpec};

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{BOS, EOS, PAD};
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SPECIAL_TOKENS: [&str; 3] = ["<pad>", "<bos>", "<eos>"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::TypeError {
                key: "split".into(),
                detail: format!("expected train, val or test, got {other:?}"),
            }),
        }
    }
}

/// One slide as a bag of patch embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagRecord {
    pub bag_id: String,
    /// Relative to the manifest's directory.
    pub feature_path: String,
    pub num_instances: usize,
    pub label: usize,
    /// Token ids without BOS/EOS.
    pub caption: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub d_enc: usize,
    pub num_classes: usize,
    pub vocab: Vec<String>,
    pub bags: Vec<BagRecord>,
    #[serde(default)]
    pub splits: BTreeMap<String, Split>,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidManifest(msg));
        if self.version != MANIFEST_VERSION {
            return Err(Error::UnsupportedVersion(self.version));
        }
        if self.vocab.len() < 3 || self.vocab[..3] != SPECIAL_TOKENS {
            return bad("vocab must start with <pad>, <bos>, <eos>".into());
        }
        let mut seen = HashSet::new();
        for b in &self.bags {
            if !seen.insert(b.bag_id.as_str()) {
                return bad(format!("duplicate bag_id {}", b.bag_id));
            }
            if b.num_instances == 0 {
                return bad(format!("bag {} has no instances", b.bag_id));
            }
            if b.label >= self.num_classes {
                return Err(Error::LabelOutOfRange {
                    label: b.label,
                    classes: self.num_classes,
                });
            }
            if let Some(&t) = b.caption.iter().find(|&&t| t as usize >= self.vocab.len()) {
                return Err(Error::TokenOutOfVocab {
                    id: t,
                    vocab: self.vocab.len(),
                });
            }
            if b.caption.iter().any(|&t| t == BOS || t == EOS || t == PAD) {
                return bad(format!("caption of {} contains a special token", b.bag_id));
            }
        }
        if let Some(id) = self.splits.keys().find(|id| !seen.contains(id.as_str())) {
            return bad(format!("split entry for unknown bag {id}"));
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn bags_in(&self, split: Split) -> Vec<&BagRecord> {
        self.bags
            .iter()
            .filter(|b| self.splits.get(&b.bag_id) == Some(&split))
            .collect()
    }

    pub fn split_counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for s in self.splits.values() {
            c[*s as usize] += 1;
        }
        c
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_json()?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    /// Reads the bag's features and checks them against the record.
    pub fn load_features(&self, root: &Path, bag: &BagRecord) -> Result<Tensor> {
        let t = read_feature_file(&root.join(&bag.feature_path))?;
        let (m, d) = t.dims2();
        if m != bag.num_instances || d != self.d_enc {
            return Err(Error::DimMismatch(format!(
                "{}: file is {m}x{d}, manifest says {}x{}",
                bag.bag_id, bag.num_instances, self.d_enc
            )));
        }
        Ok(t)
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&t| self.vocab.get(t as usize).map_or("<unk>", String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// A bag with its features in memory.
#[derive(Debug, Clone)]
pub struct LoadedBag {
    pub record: BagRecord,
    pub features: Tensor,
}

pub fn load_split(manifest: &Manifest, root: &Path, split: Split) -> Result<Vec<LoadedBag>> {
    let bags = manifest.bags_in(split);
    if bags.is_empty() {
        return Err(Error::EmptySplit(split.as_str().into()));
    }
    bags.into_iter()
        .map(|b| {
            Ok(LoadedBag {
                features: manifest.load_features(root, b)?,
                record: b.clone(),
            })
        })
        .collect()
}
