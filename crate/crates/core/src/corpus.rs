//! Synthetic multilingual, multimodal corpus with known translation ground truth.
//!
//! The vocabulary is a block of shared special tokens followed by one block
//! per language (English first). Every block has the same size; position
//! `c` of the English block is "concept" `c`, and each other language maps
//! concepts onto its block through a seeded permutation. Translating a token
//! into English is therefore a bijection between blocks.
//!
//! Sentences are walks on a sparse concept graph. The second concept of a
//! sentence is always the object shown in its image, so a language model can
//! only predict it by reading the vision tokens.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::ENGLISH;
use crate::trainer::TranslationPair;

pub const SHARED: &str = "shared";

/// Surfaces of the fixed special tokens, in id order.
pub const SPECIALS: [&str; 10] = [
    "<pad>", "<bos>", "Translate", "this", "from", "to", "[", "]", ":", "<nl>",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    /// Number of non-English languages.
    pub n_languages: usize,
    pub tokens_per_language_block: usize,
    pub shared_special_tokens: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub n_images: usize,
    /// Successors per concept in the sentence graph.
    pub fanout: usize,
    pub n_pretrain: usize,
    pub n_train: usize,
    pub n_eval: usize,
    /// Parallel image-question items rendered in every language for tracing.
    pub n_monitor: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_languages: 3,
            tokens_per_language_block: 54,
            shared_special_tokens: 24,
            min_len: 4,
            max_len: 7,
            n_images: 16,
            fanout: 3,
            n_pretrain: 2000,
            n_train: 2400,
            n_eval: 240,
            n_monitor: 100,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn vocab_size(&self) -> usize {
        self.shared_special_tokens + (self.n_languages + 1) * self.tokens_per_language_block
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_languages == 0 {
            return Err(Error::Config("need at least one non-English language".into()));
        }
        let needed = SPECIALS.len() + self.n_languages + 1;
        if self.shared_special_tokens < needed {
            return Err(Error::Config(format!(
                "block overflow: {needed} special tokens needed, {} reserved",
                self.shared_special_tokens
            )));
        }
        if self.tokens_per_language_block < self.n_images.max(2) {
            return Err(Error::Config(format!(
                "block overflow: {} concepts per block cannot hold {} image objects",
                self.tokens_per_language_block, self.n_images
            )));
        }
        if self.min_len < 2 || self.max_len < self.min_len {
            return Err(Error::Config("sentence lengths need 2 <= min_len <= max_len".into()));
        }
        if self.n_images == 0 || self.fanout == 0 {
            return Err(Error::Config("n_images and fanout must be positive".into()));
        }
        if self.vocab_size() > u32::MAX as usize {
            return Err(Error::Config("vocabulary too large".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageInfo {
    pub tag: String,
    /// Surface of the language-name token used in prompts.
    pub name: String,
    pub block_start: u32,
    /// `perm[c]` is the in-block offset of concept `c`.
    pub perm: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenEntry {
    pub id: u32,
    pub surface: String,
    /// Language tag, or `"shared"` for special tokens.
    pub language: String,
    pub concept: Option<u32>,
}

/// Token table: ids, surfaces, language blocks and the translation bijection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tokenizer {
    pub block_size: u32,
    pub n_special: u32,
    /// English first.
    pub languages: Vec<LanguageInfo>,
    pub tokens: Vec<TokenEntry>,
    #[serde(skip)]
    by_surface: HashMap<String, u32>,
}

impl Tokenizer {
    fn build(n_special: u32, block_size: u32, languages: Vec<LanguageInfo>) -> Self {
        let mut tokens = Vec::new();
        for id in 0..n_special {
            let surface = match id as usize {
                i if i < SPECIALS.len() => SPECIALS[i].to_string(),
                i if i < SPECIALS.len() + languages.len() => {
                    languages[i - SPECIALS.len()].name.clone()
                }
                i => format!("<reserved_{i}>"),
            };
            tokens.push(TokenEntry {
                id,
                surface,
                language: SHARED.into(),
                concept: None,
            });
        }
        for lang in &languages {
            let mut inv = vec![0u32; block_size as usize];
            for (c, &off) in lang.perm.iter().enumerate() {
                inv[off as usize] = c as u32;
            }
            for off in 0..block_size {
                tokens.push(TokenEntry {
                    id: lang.block_start + off,
                    surface: format!("{}:{off:03}", lang.tag),
                    language: lang.tag.clone(),
                    concept: Some(inv[off as usize]),
                });
            }
        }
        let mut t = Self {
            block_size,
            n_special,
            languages,
            tokens,
            by_surface: HashMap::new(),
        };
        t.index();
        t
    }

    fn index(&mut self) {
        self.by_surface = self
            .tokens
            .iter()
            .map(|t| (t.surface.clone(), t.id))
            .collect();
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn special(&self, surface: &str) -> Result<u32> {
        self.by_surface
            .get(surface)
            .copied()
            .ok_or_else(|| Error::UnknownSurface(surface.to_string()))
    }

    pub fn language_info(&self, tag: &str) -> Result<&LanguageInfo> {
        self.languages
            .iter()
            .find(|l| l.tag == tag)
            .ok_or_else(|| Error::Config(format!("unknown language {tag:?}")))
    }

    pub fn language_tags(&self) -> Vec<String> {
        self.languages.iter().map(|l| l.tag.clone()).collect()
    }

    /// Token id of the language's name (e.g. `English`).
    pub fn language_name_token(&self, tag: &str) -> Result<u32> {
        let name = self.language_info(tag)?.name.clone();
        self.special(&name)
    }

    /// Language tag of a token id, `"shared"` for specials.
    pub fn language_of(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(|t| t.language.as_str())
            .ok_or(Error::UnknownToken(id))
    }

    pub fn concept_of(&self, id: u32) -> Result<Option<u32>> {
        self.tokens
            .get(id as usize)
            .map(|t| t.concept)
            .ok_or(Error::UnknownToken(id))
    }

    pub fn token_for(&self, concept: u32, tag: &str) -> Result<u32> {
        let lang = self.language_info(tag)?;
        let off = lang
            .perm
            .get(concept as usize)
            .ok_or_else(|| Error::Config(format!("concept {concept} out of range")))?;
        Ok(lang.block_start + off)
    }

    pub fn render(&self, concepts: &[u32], tag: &str) -> Result<Vec<u32>> {
        concepts.iter().map(|&c| self.token_for(c, tag)).collect()
    }

    /// Maps a language token onto its English counterpart.
    pub fn to_english(&self, id: u32) -> Result<u32> {
        let concept = self
            .concept_of(id)?
            .ok_or_else(|| Error::Config(format!("token {id} is a special token")))?;
        self.token_for(concept, ENGLISH)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace()
            .map(|w| {
                self.by_surface
                    .get(w)
                    .copied()
                    .ok_or_else(|| Error::UnknownSurface(w.to_string()))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let words: Result<Vec<&str>> = ids
            .iter()
            .map(|&id| {
                self.tokens
                    .get(id as usize)
                    .map(|t| t.surface.as_str())
                    .ok_or(Error::UnknownToken(id))
            })
            .collect();
        Ok(words?.join(" "))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_vec_pretty(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut t: Tokenizer = serde_json::from_slice(&bytes)?;
        t.index();
        Ok(t)
    }
}

/// One image and its question, as language-independent concepts.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Item {
    pub image_id: u32,
    pub concepts: Vec<u32>,
}

/// A single-language question record (`questions.jsonl`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub image_id: u32,
    pub lang: String,
    pub text: String,
}

/// A translation-pair record (`train.jsonl`, `eval.jsonl`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub image_id: u32,
    pub source_lang: String,
    pub source_text: String,
    pub english_text: String,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub spec: SyntheticSpec,
    pub tokenizer: Tokenizer,
    /// Object concept of each image.
    pub image_objects: Vec<u32>,
    pub pretrain: Vec<Item>,
    pub train: Vec<TranslationPair>,
    pub eval: Vec<TranslationPair>,
    pub monitor: Vec<Item>,
}

fn language_tag(i: usize) -> String {
    format!("x-l{i}")
}

/// Deterministic corpus from `spec`. Pretrain, train, eval and monitor items
/// are pairwise disjoint.
pub fn generate(spec: &SyntheticSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let block = spec.tokens_per_language_block as u32;
    let n_special = spec.shared_special_tokens as u32;

    let mut languages = vec![LanguageInfo {
        tag: ENGLISH.into(),
        name: "English".into(),
        block_start: n_special,
        perm: (0..block).collect(),
    }];
    for i in 1..=spec.n_languages {
        let mut perm: Vec<u32> = (0..block).collect();
        perm.shuffle(&mut rng);
        languages.push(LanguageInfo {
            tag: language_tag(i),
            name: format!("L{i}"),
            block_start: n_special + i as u32 * block,
            perm,
        });
    }
    let tokenizer = Tokenizer::build(n_special, block, languages);

    let successors: Vec<Vec<u32>> = (0..block)
        .map(|_| (0..spec.fanout).map(|_| rng.gen_range(0..block)).collect())
        .collect();
    let mut objects: Vec<u32> = (0..block).collect();
    objects.shuffle(&mut rng);
    let image_objects: Vec<u32> = objects[..spec.n_images].to_vec();

    let total = spec.n_pretrain + spec.n_train + spec.n_eval + spec.n_monitor;
    let mut seen = HashSet::with_capacity(total);
    let mut items = Vec::with_capacity(total);
    let mut attempts = 0usize;
    while items.len() < total {
        attempts += 1;
        if attempts > total * 50 + 1000 {
            return Err(Error::Config(format!(
                "could only draw {} distinct items of {total}",
                items.len()
            )));
        }
        let image_id = rng.gen_range(0..spec.n_images as u32);
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let mut concepts = Vec::with_capacity(len);
        concepts.push(rng.gen_range(0..block));
        concepts.push(image_objects[image_id as usize]);
        while concepts.len() < len {
            let last = *concepts.last().expect("non-empty") as usize;
            concepts.push(*successors[last].choose(&mut rng).expect("fanout > 0"));
        }
        let item = Item { image_id, concepts };
        if seen.insert(item.clone()) {
            items.push(item);
        }
    }

    let mut rest = items.into_iter();
    let pretrain: Vec<Item> = rest.by_ref().take(spec.n_pretrain).collect();
    let train_items: Vec<Item> = rest.by_ref().take(spec.n_train).collect();
    let eval_items: Vec<Item> = rest.by_ref().take(spec.n_eval).collect();
    let monitor: Vec<Item> = rest.collect();

    let to_pairs = |items: &[Item]| -> Result<Vec<TranslationPair>> {
        items
            .iter()
            .enumerate()
            .map(|(i, item)| {
                let lang = language_tag(i % spec.n_languages + 1);
                Ok(TranslationPair {
                    image_id: item.image_id,
                    source_tokens: tokenizer.render(&item.concepts, &lang)?,
                    english_tokens: tokenizer.render(&item.concepts, ENGLISH)?,
                    source_lang: lang,
                })
            })
            .collect()
    };
    let train = to_pairs(&train_items)?;
    let eval = to_pairs(&eval_items)?;

    Ok(Corpus {
        spec: spec.clone(),
        tokenizer,
        image_objects,
        pretrain,
        train,
        eval,
        monitor,
    })
}

impl Corpus {
    /// Monitoring questions rendered in every language, grouped by tag.
    pub fn monitor_questions(&self) -> Result<BTreeMap<String, Vec<(u32, Vec<u32>)>>> {
        let mut out = BTreeMap::new();
        for tag in self.tokenizer.language_tags() {
            let qs = self
                .monitor
                .iter()
                .map(|it| Ok((it.image_id, self.tokenizer.render(&it.concepts, &tag)?)))
                .collect::<Result<Vec<_>>>()?;
            out.insert(tag, qs);
        }
        Ok(out)
    }

    pub fn monitor_records(&self) -> Result<Vec<QuestionRecord>> {
        let mut out = Vec::new();
        for (tag, qs) in self.monitor_questions()? {
            for (image_id, tokens) in qs {
                out.push(QuestionRecord {
                    image_id,
                    lang: tag.clone(),
                    text: self.tokenizer.decode(&tokens)?,
                });
            }
        }
        Ok(out)
    }
}

pub fn pair_to_record(pair: &TranslationPair, tok: &Tokenizer) -> Result<PairRecord> {
    Ok(PairRecord {
        image_id: pair.image_id,
        source_lang: pair.source_lang.clone(),
        source_text: tok.decode(&pair.source_tokens)?,
        english_text: tok.decode(&pair.english_tokens)?,
    })
}

pub fn record_to_pair(rec: &PairRecord, tok: &Tokenizer) -> Result<TranslationPair> {
    let pair = TranslationPair {
        image_id: rec.image_id,
        source_lang: rec.source_lang.clone(),
        source_tokens: tok.encode(&rec.source_text)?,
        english_tokens: tok.encode(&rec.english_text)?,
    };
    pair.validate()?;
    Ok(pair)
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
