//! Synthetic bags with a planted class motif and templated captions.
//!
//! Each class `c` owns a unit direction `u_c` (the directions are mutually
//! orthonormal). A bag of class `c` is Gaussian noise in which a random
//! 10–30% of the instances are shifted by `motif_strength · u_c`. Captions
//! share a common prefix across classes, carry a class phrase, and end in a
//! slot word picked by hashing `(bag_id, c)`.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{write_feature_file, BagRecord, Manifest, MANIFEST_FILE, MANIFEST_VERSION, SPECIAL_TOKENS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const PREFIX: [&str; 8] = ["in", "the", "superficial", "epithelium", "tumor", "cells", "are", "seen"];

const CLASS_PHRASES: [[&str; 3]; 8] = [
    ["forming", "regular", "tubules"],
    ["forming", "irregular", "glands"],
    ["scattered", "signet", "ring"],
    ["solid", "poorly", "differentiated"],
    ["papillary", "fronds", "lined"],
    ["mucinous", "pools", "abundant"],
    ["fused", "cribriform", "nests"],
    ["diffuse", "single", "files"],
];

const SLOT_WORDS: [&str; 6] = ["focally", "diffusely", "sparsely", "densely", "mildly", "markedly"];

const FILLER: [&str; 24] = [
    "with", "and", "of", "nuclei", "stroma", "mucosa", "atypia", "mitoses", "necrosis", "invasion",
    "lamina", "propria", "muscularis", "submucosa", "lymphocytes", "inflammation", "fibrosis",
    "hyperchromatic", "enlarged", "vesicular", "prominent", "nucleoli", "crowded", "stratified",
];

/// Closed caption vocabulary: three specials followed by 61 words.
pub fn caption_vocab() -> Vec<String> {
    let mut v: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    for w in PREFIX.iter().chain(CLASS_PHRASES.iter().flatten()).chain(&SLOT_WORDS).chain(&FILLER) {
        if !v.iter().any(|x| x == w) {
            v.push(w.to_string());
        }
    }
    v
}

fn token(vocab: &[String], word: &str) -> u32 {
    vocab.iter().position(|w| w == word).expect("word in vocabulary") as u32
}

/// Index of the slot word for a bag: FNV-1a over the bag id and class.
pub fn slot_variant(bag_id: &str, class: usize) -> usize {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bag_id.bytes().chain((class as u64).to_le_bytes()) {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    (h % SLOT_WORDS.len() as u64) as usize
}

/// Caption of class `class` with the given slot variant, as token ids.
pub fn class_template(vocab: &[String], class: usize, variant: usize) -> Vec<u32> {
    PREFIX
        .iter()
        .chain(&CLASS_PHRASES[class])
        .chain(&["with", SLOT_WORDS[variant % SLOT_WORDS.len()]])
        .map(|w| token(vocab, w))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_bags: usize,
    pub num_classes: usize,
    pub d_enc: usize,
    pub m_min: usize,
    pub m_max: usize,
    pub motif_strength: f64,
    pub noise_std: f64,
    /// Range of the fraction of instances that carry the motif.
    pub motif_frac_min: f64,
    pub motif_frac_max: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_bags: 300,
            num_classes: 3,
            d_enc: 32,
            m_min: 50,
            m_max: 200,
            motif_strength: 3.0,
            noise_std: 1.0,
            motif_frac_min: 0.1,
            motif_frac_max: 0.3,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.num_classes < 2 || self.num_classes > CLASS_PHRASES.len() {
            return bad(format!("num_classes must be in 2..={}", CLASS_PHRASES.len()));
        }
        if self.d_enc < self.num_classes {
            return bad("d_enc must be at least num_classes for orthonormal motifs".into());
        }
        if self.m_min < 1 || self.m_min > self.m_max {
            return bad(format!("instance range [{}, {}] is empty", self.m_min, self.m_max));
        }
        if !(self.motif_strength >= 0.0) || !self.motif_strength.is_finite() {
            return bad("motif_strength must be finite and non-negative".into());
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return bad("noise_std must be finite and non-negative".into());
        }
        if !(0.0 <= self.motif_frac_min && self.motif_frac_min <= self.motif_frac_max && self.motif_frac_max <= 1.0) {
            return bad("motif fractions must satisfy 0 <= min <= max <= 1".into());
        }
        Ok(())
    }
}

/// Gram–Schmidt on Gaussian draws.
fn orthonormal_directions(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    while out.len() < n {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        for u in &out {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            out.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    out
}

/// Writes `features/<bag_id>.pm3f` for every bag and `manifest.json` (no
/// split assignments) under `out_dir`.
pub fn generate_synthetic_corpus(spec: &SyntheticSpec, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    fs::create_dir_all(out_dir.join("features")).map_err(|e| Error::io(out_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dirs = orthonormal_directions(spec.num_classes, spec.d_enc, &mut rng);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let vocab = caption_vocab();
    let mut bags = Vec::with_capacity(spec.num_bags);
    for i in 0..spec.num_bags {
        let bag_id = format!("bag{i:04}");
        let class = rng.random_range(0..spec.num_classes);
        let m = rng.random_range(spec.m_min..=spec.m_max);
        let mut rows: Vec<f64> = (0..m * spec.d_enc).map(|_| noise.sample(&mut rng)).collect();
        let frac = if spec.motif_frac_max > spec.motif_frac_min {
            rng.random_range(spec.motif_frac_min..spec.motif_frac_max)
        } else {
            spec.motif_frac_min
        };
        let planted = ((frac * m as f64).round() as usize).clamp(1, m);
        for r in sample(&mut rng, m, planted) {
            for (x, u) in rows[r * spec.d_enc..(r + 1) * spec.d_enc].iter_mut().zip(&dirs[class]) {
                *x += spec.motif_strength * u;
            }
        }
        let feature_path = format!("features/{bag_id}.pm3f");
        write_feature_file(&Tensor::from_f64(vec![m, spec.d_enc], &rows)?, &out_dir.join(&feature_path))?;
        let caption = class_template(&vocab, class, slot_variant(&bag_id, class));
        bags.push(BagRecord {
            bag_id,
            feature_path,
            num_instances: m,
            label: class,
            caption,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        d_enc: spec.d_enc,
        num_classes: spec.num_classes,
        vocab,
        bags,
        splits: Default::default(),
    };
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
