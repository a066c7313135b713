//! Deterministic desk-scale datasets: class prototypes in feature space,
//! noisy per-image features, and templated captions drawn from per-class
//! word pools plus words shared by every class.

use rand::distributions::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{AdcError, Result};
use crate::nn::ops::norm;
use crate::nn::rng::RngState;
use crate::text::{RawExample, Split};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPool {
    pub name: String,
    pub adjectives: Vec<String>,
    pub nouns: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions { train: 0.8, val: 0.1, test: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub images_per_class: usize,
    pub captions_per_image: usize,
    pub feature_dim: usize,
    /// Expected norm of the noise added to a unit prototype.
    pub noise_sigma: f64,
    /// The k-th word of every pool is drawn with weight `1 / (k + 1)^word_skew`;
    /// 0 is uniform. Skewed pools give captions a consensus phrasing.
    pub word_skew: f64,
    pub classes: Vec<ClassPool>,
    pub articles: Vec<String>,
    pub relations: Vec<String>,
    pub shared_nouns: Vec<String>,
    pub seed: u64,
    pub split: SplitFractions,
}

fn words(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

fn default_classes() -> Vec<ClassPool> {
    let table: [(&str, [&str; 3], [&str; 2]); 12] = [
        ("airport", ["busy", "long", "paved"], ["runway", "terminal"]),
        ("beach", ["sandy", "bright", "narrow"], ["shore", "coast"]),
        ("forest", ["dense", "dark", "green"], ["trees", "woods"]),
        ("river", ["winding", "wide", "muddy"], ["river", "stream"]),
        ("farmland", ["plowed", "square", "fertile"], ["fields", "crops"]),
        ("harbor", ["crowded", "calm", "deep"], ["boats", "docks"]),
        ("desert", ["barren", "dry", "yellow"], ["dunes", "sand"]),
        ("residential", ["dense", "neat", "small"], ["houses", "homes"]),
        ("bridge", ["steel", "high", "narrow"], ["bridge", "overpass"]),
        ("stadium", ["round", "large", "empty"], ["stadium", "arena"]),
        ("meadow", ["open", "grassy", "flat"], ["meadow", "grassland"]),
        ("parking", ["full", "striped", "gray"], ["lot", "cars"]),
    ];
    table
        .iter()
        .map(|(name, adj, nouns)| ClassPool {
            name: name.to_string(),
            adjectives: words(adj),
            nouns: words(nouns),
        })
        .collect()
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_classes: 8,
            images_per_class: 40,
            captions_per_image: 5,
            feature_dim: 256,
            noise_sigma: 0.3,
            word_skew: 1.0,
            classes: default_classes(),
            articles: words(&["a", "the"]),
            relations: words(&["near", "beside", "with", "around"]),
            shared_nouns: words(&["road", "buildings", "water", "area", "trees"]),
            seed: 0,
            split: SplitFractions::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(AdcError::Validation("num_classes must be at least 2".into()));
        }
        if self.images_per_class < 1 || self.captions_per_image < 1 || self.feature_dim < 1 {
            return Err(AdcError::Validation(
                "images_per_class, captions_per_image and feature_dim must be positive".into(),
            ));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(AdcError::Validation("noise_sigma must be non-negative".into()));
        }
        if !(self.word_skew >= 0.0) || !self.word_skew.is_finite() {
            return Err(AdcError::Validation("word_skew must be finite and non-negative".into()));
        }
        if self.classes.len() < self.num_classes {
            return Err(AdcError::Validation(format!(
                "word pool covers {} classes but {} were requested",
                self.classes.len(),
                self.num_classes
            )));
        }
        for c in &self.classes[..self.num_classes] {
            if c.adjectives.is_empty() || c.nouns.is_empty() {
                return Err(AdcError::Validation(format!("class '{}' has an empty word pool", c.name)));
            }
        }
        if self.articles.is_empty() || self.relations.is_empty() || self.shared_nouns.is_empty() {
            return Err(AdcError::Validation("shared template word lists must be non-empty".into()));
        }
        let s = self.split;
        if [s.train, s.val, s.test].iter().any(|f| *f < 0.0) || (s.train + s.val + s.test - 1.0).abs() > 1e-9 {
            return Err(AdcError::Validation("split fractions must be non-negative and sum to 1".into()));
        }
        Ok(())
    }
}

fn unit_gaussian<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Smooth weighted round-robin over (train, val, test): every pick adds
/// each split's fraction to its credit and takes the largest, keeping the
/// assignment interleaved and the counts within one of the target.
fn split_sequence(n: usize, f: SplitFractions) -> Vec<Split> {
    let weights = [(Split::Train, f.train), (Split::Val, f.val), (Split::Test, f.test)];
    let mut credit = [0.0f64; 3];
    (0..n)
        .map(|_| {
            for (c, (_, w)) in credit.iter_mut().zip(&weights) {
                *c += w;
            }
            let mut best = 0;
            for i in 1..3 {
                if credit[i] > credit[best] + 1e-12 {
                    best = i;
                }
            }
            credit[best] -= 1.0;
            weights[best].0
        })
        .collect()
}

fn pick<'a, R: Rng + ?Sized>(list: &'a [String], skew: f64, rng: &mut R) -> &'a str {
    let weights = (0..list.len()).map(|k| (k as f64 + 1.0).powf(-skew));
    let dist = WeightedIndex::new(weights).expect("non-empty pool with positive weights");
    &list[dist.sample(rng)]
}

/// Unit-norm class prototypes for `config`.
pub fn prototypes(config: &SynthConfig) -> Vec<Vec<f64>> {
    let mut rng = RngState::new(config.seed).fork(1).rng();
    (0..config.num_classes)
        .map(|_| unit_gaussian(config.feature_dim, &mut rng))
        .collect()
}

pub fn generate(config: &SynthConfig) -> Result<Vec<RawExample>> {
    config.validate()?;
    let protos = prototypes(config);
    let mut rng = RngState::new(config.seed).fork(2).rng();
    let per_coord = config.noise_sigma / (config.feature_dim as f64).sqrt();
    let noise = Normal::new(0.0, per_coord).map_err(|e| AdcError::Validation(e.to_string()))?;
    let splits = split_sequence(config.images_per_class, config.split);
    let mut out = Vec::with_capacity(config.num_classes * config.images_per_class);
    for (c, proto) in protos.iter().enumerate() {
        let pool = &config.classes[c];
        for (i, split) in splits.iter().enumerate() {
            let mut features: Vec<f64> = proto
                .iter()
                .map(|p| if per_coord > 0.0 { p + noise.sample(&mut rng) } else { *p })
                .collect();
            let n = norm(&features);
            if n > 1e-12 {
                features.iter_mut().for_each(|x| *x /= n);
            }
            let captions = (0..config.captions_per_image)
                .map(|_| {
                    [&config.articles, &pool.adjectives, &pool.nouns, &config.relations, &config.shared_nouns]
                        .iter()
                        .map(|list| pick(list, config.word_skew, &mut rng))
                        .collect::<Vec<_>>()
                        .join(" ")
                })
                .collect();
            out.push(RawExample {
                id: format!("{}_{i:03}", pool.name),
                class_label: pool.name.clone(),
                split: *split,
                features,
                captions,
            });
        }
    }
    Ok(out)
}
