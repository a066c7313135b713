//! Tokenization, vocabulary and the JSON Lines dataset format.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AdcError, Result};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const START: TokenId = 1;
pub const END: TokenId = 2;
pub const UNK: TokenId = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<start>", "<end>", "<unk>"];

pub const DEFAULT_T_MAX: usize = 20;

/// Lowercases, turns `.,;:!?"()` into spaces and splits on whitespace.
pub fn tokenize(sentence: &str) -> Vec<String> {
    sentence
        .to_lowercase()
        .chars()
        .map(|c| if ".,;:!?\"()".contains(c) { ' ' } else { c })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Specials take ids 0..4 (pad, start, end, unk); the remaining words with
    /// at least `min_count` occurrences follow by descending count, then
    /// lexicographically.
    pub fn build<S: AsRef<str>>(corpus: &[Vec<S>], min_count: usize) -> Self {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for caption in corpus {
            for w in caption {
                *counts.entry(w.as_ref()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_count.max(1) && !SPECIALS.contains(w))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let words: Vec<String> = SPECIALS
            .iter()
            .copied()
            .chain(ranked.into_iter().map(|(w, _)| w))
            .map(str::to_string)
            .collect();
        Self::from_words(words).expect("specials and counted words are unique")
    }

    /// Rebuilds a vocabulary from its ordered word list.
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() < SPECIALS.len() || words[..4] != SPECIALS.map(String::from) {
            return Err(AdcError::Validation("vocabulary must start with the four special tokens".into()));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(AdcError::Validation(format!("duplicate vocabulary word '{w}'")));
            }
        }
        Ok(Vocabulary { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> TokenId {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Vec<TokenId> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.word(i).unwrap_or("<unk>").to_string())
            .collect()
    }

    /// Space-joined words of `ids`, stopping at the end token.
    pub fn sentence(&self, ids: &[TokenId]) -> String {
        let surface: Vec<TokenId> = ids.iter().copied().take_while(|&t| t != END).collect();
        self.decode(&surface).join(" ")
    }
}

/// Drops pad/start/end tokens, keeping everything a metric should see.
pub fn surface(ids: &[TokenId]) -> Vec<TokenId> {
    ids.iter()
        .copied()
        .filter(|t| !matches!(*t, PAD | START | END))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = AdcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(AdcError::Validation(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionedExample {
    pub id: String,
    pub class_label: String,
    pub split: Split,
    pub features: Vec<f64>,
    /// Token ids, each terminated by [`END`].
    pub captions: Vec<Vec<TokenId>>,
}

impl CaptionedExample {
    /// Captions without the end token.
    pub fn references(&self) -> Vec<Vec<TokenId>> {
        self.captions.iter().map(|c| surface(c)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocabulary: Vocabulary,
    pub feature_dim: usize,
    pub examples: Vec<CaptionedExample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &CaptionedExample> {
        self.examples.iter().filter(move |e| e.split == split)
    }

    pub fn get(&self, id: &str) -> Option<&CaptionedExample> {
        self.examples.iter().find(|e| e.id == id)
    }
}

/// One line of the dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawExample {
    pub id: String,
    #[serde(rename = "class")]
    pub class_label: String,
    pub split: Split,
    pub features: Vec<f64>,
    pub captions: Vec<String>,
}

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    pub expected_feature_dim: Option<usize>,
    pub min_count: usize,
    /// Longest caption kept, end token included; longer captions are cut.
    pub t_max: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            expected_feature_dim: None,
            min_count: 1,
            t_max: DEFAULT_T_MAX,
        }
    }
}

pub fn parse_lines<R: BufRead>(reader: R) -> Result<Vec<RawExample>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| AdcError::Parse { line: i + 1, message: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawExample = serde_json::from_str(&line)
            .map_err(|e| AdcError::Parse { line: i + 1, message: e.to_string() })?;
        out.push(raw);
    }
    Ok(out)
}

/// Validates raw examples and builds the vocabulary from train captions.
pub fn build_dataset(raw: Vec<RawExample>, opts: &LoadOptions) -> Result<Dataset> {
    if opts.t_max < 1 {
        return Err(AdcError::Validation("t_max must be at least 1".into()));
    }
    let feature_dim = match (opts.expected_feature_dim, raw.first()) {
        (Some(f), _) => f,
        (None, Some(first)) => first.features.len(),
        (None, None) => 0,
    };
    for r in &raw {
        if r.features.len() != feature_dim {
            return Err(AdcError::shape(
                format!("features of example '{}'", r.id),
                format!("length {feature_dim}"),
                format!("length {}", r.features.len()),
            ));
        }
        if r.features.iter().any(|v| !v.is_finite()) {
            return Err(AdcError::Validation(format!("example '{}' has non-finite features", r.id)));
        }
        if r.captions.is_empty() {
            return Err(AdcError::Validation(format!("example '{}' has no captions", r.id)));
        }
    }
    let tokenized: Vec<Vec<Vec<String>>> = raw
        .iter()
        .map(|r| r.captions.iter().map(|c| tokenize(c)).collect())
        .collect();
    let train_corpus: Vec<Vec<String>> = raw
        .iter()
        .zip(&tokenized)
        .filter(|(r, _)| r.split == Split::Train)
        .flat_map(|(_, caps)| caps.iter().cloned())
        .collect();
    let vocabulary = Vocabulary::build(&train_corpus, opts.min_count);
    let examples = raw
        .into_iter()
        .zip(tokenized)
        .map(|(r, caps)| CaptionedExample {
            captions: caps
                .iter()
                .map(|words| {
                    let mut ids = vocabulary.encode(&words[..words.len().min(opts.t_max - 1)]);
                    ids.push(END);
                    ids
                })
                .collect(),
            id: r.id,
            class_label: r.class_label,
            split: r.split,
            features: r.features,
        })
        .collect();
    Ok(Dataset {
        vocabulary,
        feature_dim,
        examples,
    })
}

pub fn load_dataset(path: &Path, opts: &LoadOptions) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| AdcError::io(path, e))?;
    build_dataset(parse_lines(BufReader::new(file))?, opts)
}

pub fn write_jsonl<W: Write>(mut w: W, examples: &[RawExample]) -> std::io::Result<()> {
    for e in examples {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
