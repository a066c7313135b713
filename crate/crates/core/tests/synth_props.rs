use std::collections::{HashMap, HashSet};

use adc_core::nn::cosine;
use adc_core::synth::{self, SynthConfig};
use adc_core::text::{self, Split, Vocabulary, UNK};
use proptest::prelude::*;

fn small(seed: u64, classes: usize, per_class: usize) -> SynthConfig {
    SynthConfig {
        num_classes: classes,
        images_per_class: per_class,
        captions_per_image: 3,
        feature_dim: 32,
        seed,
        ..Default::default()
    }
}

fn jsonl(cfg: &SynthConfig) -> Vec<u8> {
    let mut buf = Vec::new();
    text::write_jsonl(&mut buf, &synth::generate(cfg).unwrap()).unwrap();
    buf
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn same_seed_same_bytes(seed in any::<u64>()) {
        let cfg = small(seed, 3, 6);
        prop_assert_eq!(jsonl(&cfg), jsonl(&cfg));
    }

    #[test]
    fn splits_partition_every_class(seed in any::<u64>(), classes in 2usize..6, per_class in 1usize..25) {
        let raw = synth::generate(&small(seed, classes, per_class)).unwrap();
        prop_assert_eq!(raw.len(), classes * per_class);
        let ids: HashSet<&str> = raw.iter().map(|e| e.id.as_str()).collect();
        prop_assert_eq!(ids.len(), raw.len());
        let mut per: HashMap<&str, [usize; 3]> = HashMap::new();
        for e in &raw {
            let slot = match e.split { Split::Train => 0, Split::Val => 1, Split::Test => 2 };
            per.entry(e.class_label.as_str()).or_default()[slot] += 1;
        }
        prop_assert_eq!(per.len(), classes);
        for counts in per.values() {
            prop_assert_eq!(counts.iter().sum::<usize>(), per_class);
            for (c, frac) in counts.iter().zip([0.8, 0.1, 0.1]) {
                prop_assert!((*c as f64 - frac * per_class as f64).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn every_word_is_in_vocabulary(seed in any::<u64>()) {
        let raw = synth::generate(&small(seed, 4, 5)).unwrap();
        let corpus: Vec<Vec<String>> = raw
            .iter()
            .flat_map(|e| e.captions.iter().map(|c| text::tokenize(c)))
            .collect();
        let vocab = Vocabulary::build(&corpus, 1);
        prop_assert!(vocab.len() <= 100);
        for e in &raw {
            prop_assert_eq!(e.captions.len(), 3);
        }
        for words in &corpus {
            prop_assert!(!vocab.encode(words).contains(&UNK));
        }
    }

    #[test]
    fn features_cluster_by_class(seed in any::<u64>()) {
        let cfg = SynthConfig { seed, images_per_class: 8, ..Default::default() };
        let raw = synth::generate(&cfg).unwrap();
        let (mut within, mut nw, mut between, mut nb) = (0.0, 0usize, 0.0, 0usize);
        for (i, a) in raw.iter().enumerate() {
            for b in &raw[i + 1..] {
                let c = cosine(&a.features, &b.features);
                if a.class_label == b.class_label {
                    within += c;
                    nw += 1;
                } else {
                    between += c;
                    nb += 1;
                }
            }
        }
        prop_assert!(within / nw as f64 > between / nb as f64 + 0.5);
    }
}

#[test]
fn different_seeds_differ() {
    assert_ne!(jsonl(&small(1, 3, 4)), jsonl(&small(2, 3, 4)));
}

#[test]
fn word_skew_concentrates_choices() {
    let count_first = |skew: f64| {
        let cfg = SynthConfig { word_skew: skew, seed: 9, ..Default::default() };
        synth::generate(&cfg)
            .unwrap()
            .iter()
            .flat_map(|e| e.captions.iter())
            .filter(|c| c.starts_with("a "))
            .count()
    };
    let total = 8 * 40 * 5;
    let uniform = count_first(0.0) as f64 / total as f64;
    let skewed = count_first(2.0) as f64 / total as f64;
    // two articles: 1/2 when uniform, 1 / (1 + 2^-2) = 0.8 at skew 2
    assert!((uniform - 0.5).abs() < 0.03, "{uniform}");
    assert!((skewed - 0.8).abs() < 0.03, "{skewed}");
}

#[test]
fn invalid_configs_rejected() {
    assert!(synth::generate(&SynthConfig { num_classes: 1, ..Default::default() }).is_err());
    assert!(synth::generate(&SynthConfig { word_skew: -1.0, ..Default::default() }).is_err());
    assert!(synth::generate(&SynthConfig { num_classes: 40, ..Default::default() }).is_err());
}
