//! Question-translation fine-tuning restricted to selected decoder layers.
//!
//! The objective is next-token cross-entropy on the English question given
//! the image and the non-English question, averaged over target tokens.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamGrads, ParamId, ParamStore};
use crate::corpus::{self, Item, PairRecord, Tokenizer};
use crate::error::{Error, Result};
use crate::model::ToyLvlm;
use crate::stats::ENGLISH;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranslationPair {
    pub image_id: u32,
    pub source_lang: String,
    pub source_tokens: Vec<u32>,
    pub english_tokens: Vec<u32>,
}

impl TranslationPair {
    pub fn validate(&self) -> Result<()> {
        if self.source_tokens.is_empty() {
            return Err(Error::Empty("source tokens"));
        }
        if self.english_tokens.is_empty() {
            return Err(Error::Empty("English tokens"));
        }
        if self.source_lang == ENGLISH {
            return Err(Error::Config("translation source must not be English".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptFormat {
    /// `Translate this from [ L ] to [ English ] : <nl> [ L ] : src <nl> [ English ] : tgt`
    #[default]
    Instruction,
    /// `src : tgt`, no instruction.
    Bare,
}

/// Text tokens plus a per-token loss mask; vision tokens are prepended by the model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSequence {
    pub tokens: Vec<u32>,
    pub image_id: Option<u32>,
    pub target_mask: Vec<bool>,
}

impl PromptSequence {
    /// Index of the first masked token.
    pub fn target_start(&self) -> Option<usize> {
        self.target_mask.iter().position(|&m| m)
    }

    pub fn n_targets(&self) -> usize {
        self.target_mask.iter().skip(1).filter(|&&m| m).count()
    }

    /// Next-token targets aligned with the full (vision + text) sequence.
    pub fn targets(&self, n_vision: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; n_vision + self.tokens.len()];
        for t in 1..self.tokens.len() {
            if self.target_mask[t] {
                out[n_vision + t - 1] = Some(self.tokens[t] as usize);
            }
        }
        out
    }
}

fn check_len(model: &ToyLvlm, seq: &PromptSequence) -> Result<()> {
    let len = model.sequence_len(seq.tokens.len(), seq.image_id.is_some());
    let max = model.config().max_seq_len;
    if len > max {
        return Err(Error::SequenceTooLong { len, max });
    }
    Ok(())
}

fn prompt_tokens(
    tok: &Tokenizer,
    format: PromptFormat,
    source_lang: &str,
    source: &[u32],
    target: &[u32],
) -> Result<(Vec<u32>, Vec<bool>)> {
    let colon = tok.special(":")?;
    let mut prefix = Vec::new();
    match format {
        PromptFormat::Instruction => {
            let (open, close, nl) = (tok.special("[")?, tok.special("]")?, tok.special("<nl>")?);
            let src_name = tok.language_name_token(source_lang)?;
            let en_name = tok.language_name_token(ENGLISH)?;
            prefix.extend([
                tok.special("Translate")?,
                tok.special("this")?,
                tok.special("from")?,
                open,
                src_name,
                close,
                tok.special("to")?,
                open,
                en_name,
                close,
                colon,
                nl,
                open,
                src_name,
                close,
                colon,
            ]);
            prefix.extend_from_slice(source);
            prefix.extend([nl, open, en_name, close, colon]);
        }
        PromptFormat::Bare => {
            prefix.extend_from_slice(source);
            prefix.push(colon);
        }
    }
    let mut mask = vec![false; prefix.len()];
    mask.resize(prefix.len() + target.len(), true);
    prefix.extend_from_slice(target);
    Ok((prefix, mask))
}

/// Instruction, source and English target; the mask covers only the target.
pub fn build_prompt(
    model: &ToyLvlm,
    tok: &Tokenizer,
    pair: &TranslationPair,
    format: PromptFormat,
) -> Result<PromptSequence> {
    pair.validate()?;
    let (tokens, target_mask) = prompt_tokens(
        tok,
        format,
        &pair.source_lang,
        &pair.source_tokens,
        &pair.english_tokens,
    )?;
    let seq = PromptSequence {
        tokens,
        image_id: Some(pair.image_id),
        target_mask,
    };
    check_len(model, &seq)?;
    Ok(seq)
}

fn n_vision(model: &ToyLvlm, seq: &PromptSequence) -> usize {
    if seq.image_id.is_some() {
        model.config().n_vision_tokens
    } else {
        0
    }
}

/// Summed cross-entropy of one sequence, forward only.
pub fn sequence_loss_sum(model: &ToyLvlm, seq: &PromptSequence) -> Result<f64> {
    let mut g = Graph::with_params(model.params());
    let logits = model.forward_graph(&mut g, &seq.tokens, seq.image_id, None)?;
    let ce = g.cross_entropy_sum(logits, &seq.targets(n_vision(model, seq)))?;
    Ok(g.value(ce).data()[0])
}

/// Mean per-target-token loss of a batch and its parameter gradients.
pub fn loss_and_grads(model: &ToyLvlm, batch: &[PromptSequence]) -> Result<(f64, ParamGrads)> {
    loss_and_grads_with(model, batch, 0.0)
}

/// Adds `sparsity` × the mean of `f(gate pre-activation)` over every layer,
/// position and neuron of the batch. The returned loss is the cross-entropy part.
pub fn loss_and_grads_with(
    model: &ToyLvlm,
    batch: &[PromptSequence],
    sparsity: f64,
) -> Result<(f64, ParamGrads)> {
    let total: usize = batch.iter().map(PromptSequence::n_targets).sum();
    if total == 0 {
        return Err(Error::Empty("batch"));
    }
    let norm = 1.0 / total as f64;
    let cfg = model.config();
    let gate_elems: usize = batch
        .iter()
        .map(|s| model.sequence_len(s.tokens.len(), s.image_id.is_some()))
        .sum::<usize>()
        * cfg.n_layers
        * cfg.d_inter;
    let gate_norm = sparsity / gate_elems as f64;
    let parts: Vec<Result<(f64, ParamGrads)>> = batch
        .par_iter()
        .map(|seq| {
            let mut g = Graph::with_params(model.params());
            let (logits, gates) = model.forward_graph_with_gates(&mut g, &seq.tokens, seq.image_id)?;
            let ce = g.cross_entropy_sum(logits, &seq.targets(n_vision(model, seq)))?;
            let mut loss = g.scale(ce, norm)?;
            let value = g.value(loss).data()[0];
            if sparsity != 0.0 {
                for gate in gates {
                    let act = g.activation(gate, cfg.activation)?;
                    let sum = g.sum(act)?;
                    let term = g.scale(sum, gate_norm)?;
                    loss = g.add(loss, term)?;
                }
            }
            Ok((value, g.backward(loss)?.into_params()))
        })
        .collect();
    // Merge in batch order so the result does not depend on thread scheduling.
    let mut loss = 0.0;
    let mut grads = ParamGrads::default();
    for part in parts {
        let (l, gr) = part?;
        loss += l;
        grads.merge(gr)?;
    }
    Ok((loss, grads))
}

/// Mean over target tokens of the next-token cross-entropy.
pub fn mean_loss(model: &ToyLvlm, seqs: &[PromptSequence]) -> Result<f64> {
    let total: usize = seqs.iter().map(PromptSequence::n_targets).sum();
    if total == 0 {
        return Err(Error::Empty("batch"));
    }
    let sums = seqs
        .par_iter()
        .map(|s| sequence_loss_sum(model, s))
        .collect::<Result<Vec<f64>>>()?;
    Ok(sums.iter().sum::<f64>() / total as f64)
}

pub fn translation_loss(
    model: &ToyLvlm,
    tok: &Tokenizer,
    pairs: &[TranslationPair],
    format: PromptFormat,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let seqs = pairs
        .iter()
        .map(|p| build_prompt(model, tok, p, format))
        .collect::<Result<Vec<_>>>()?;
    mean_loss(model, &seqs)
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    moments: BTreeMap<ParamId, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Updates every trainable parameter from its accumulated `.grad`.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let node = store.get_mut(id);
            if !node.trainable {
                continue;
            }
            let (m, v) = self.moments.entry(id).or_insert_with(|| {
                (
                    Tensor::zeros(node.value.shape()),
                    Tensor::zeros(node.value.shape()),
                )
            });
            let grad = node.grad.data();
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, w) in node.value.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *w -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Minibatch Adam over `seqs`. `on_epoch` runs after every epoch; returns the per-step losses.
fn fit(
    model: &mut ToyLvlm,
    seqs: &[PromptSequence],
    learning_rate: f64,
    batch_size: usize,
    epochs: usize,
    seed: u64,
    max_steps: Option<usize>,
    sparsity: f64,
    mut on_epoch: impl FnMut(&ToyLvlm, usize) -> Result<()>,
) -> Result<Vec<f64>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if !(learning_rate > 0.0 && learning_rate.is_finite()) {
        return Err(Error::Config("learning_rate must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(learning_rate);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut curve = Vec::new();
    'outer: for epoch in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            if max_steps.is_some_and(|m| curve.len() >= m) {
                on_epoch(model, epoch)?;
                break 'outer;
            }
            let batch: Vec<PromptSequence> = chunk.iter().map(|&i| seqs[i].clone()).collect();
            let (loss, grads) = loss_and_grads_with(model, &batch, sparsity)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            let store = model.params_mut();
            store.zero_grad();
            store.accumulate(&grads)?;
            adam.step(store);
            curve.push(loss);
        }
        on_epoch(model, epoch)?;
    }
    model.params_mut().zero_grad();
    Ok(curve)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub selected_layers: BTreeSet<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: String,
    pub seed: u64,
    pub include_projection: bool,
    pub prompt_format: PromptFormat,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            selected_layers: BTreeSet::new(),
            learning_rate: 2e-5,
            batch_size: 8,
            epochs: 2,
            optimizer: "adam".into(),
            seed: 0,
            include_projection: false,
            prompt_format: PromptFormat::Instruction,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.selected_layers.is_empty() {
            return Err(Error::Empty("selected_layers"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.optimizer != "adam" {
            return Err(Error::Config(format!("unsupported optimizer {:?}", self.optimizer)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub selected_layers: BTreeSet<usize>,
    pub steps: usize,
    pub loss_curve: Vec<f64>,
    /// Mean per-token loss on the evaluation pairs (training pairs when none are given).
    pub initial_loss: f64,
    pub final_loss: f64,
    pub trainable_parameters: Vec<String>,
    pub frozen_checksums_before: BTreeMap<String, String>,
    pub frozen_checksums_after: BTreeMap<String, String>,
}

fn frozen_checksums(store: &ParamStore) -> BTreeMap<String, String> {
    store
        .iter()
        .filter(|(_, _, p)| !p.trainable)
        .map(|(_, n, p)| (n.to_string(), p.value.checksum()))
        .collect()
}

/// Fine-tunes only the selected layers; any change to a frozen parameter is fatal.
pub fn train(
    model: &mut ToyLvlm,
    tok: &Tokenizer,
    train_pairs: &[TranslationPair],
    eval_pairs: &[TranslationPair],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_pairs.is_empty() {
        return Err(Error::Empty("training pairs"));
    }
    model.set_trainable_layers(&cfg.selected_layers, cfg.include_projection)?;
    let seqs = train_pairs
        .iter()
        .map(|p| build_prompt(model, tok, p, cfg.prompt_format))
        .collect::<Result<Vec<_>>>()?;
    let eval_seqs = if eval_pairs.is_empty() {
        seqs.clone()
    } else {
        eval_pairs
            .iter()
            .map(|p| build_prompt(model, tok, p, cfg.prompt_format))
            .collect::<Result<Vec<_>>>()?
    };
    let before = frozen_checksums(model.params());
    let trainable_parameters = model
        .params()
        .iter()
        .filter(|(_, _, p)| p.trainable)
        .map(|(_, n, _)| n.to_string())
        .collect();
    let initial_loss = mean_loss(model, &eval_seqs)?;

    let loss_curve = fit(
        model,
        &seqs,
        cfg.learning_rate,
        cfg.batch_size,
        cfg.epochs,
        cfg.seed,
        cfg.max_steps,
        0.0,
        |m, _| {
            let now = frozen_checksums(m.params());
            match before.iter().find(|(name, sum)| now.get(*name) != Some(*sum)) {
                Some((name, _)) => Err(Error::FrozenDrift(name.clone())),
                None => Ok(()),
            }
        },
    )?;
    let final_loss = mean_loss(model, &eval_seqs)?;
    let after = frozen_checksums(model.params());
    if after != before {
        return Err(Error::FrozenDrift("frozen parameter set".into()));
    }
    Ok(TrainReport {
        selected_layers: cfg.selected_layers.clone(),
        steps: loss_curve.len(),
        loss_curve,
        initial_loss,
        final_loss,
        trainable_parameters,
        frozen_checksums_before: before,
        frozen_checksums_after: after,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Add English-to-English copies in the translation prompt.
    pub copy_task: bool,
    pub prompt_format: PromptFormat,
    /// Weight of the mean gate activation added to the loss; pushes the
    /// FFN towards sparse firing.
    pub sparsity: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            batch_size: 16,
            epochs: 2,
            seed: 0,
            copy_task: true,
            prompt_format: PromptFormat::Instruction,
            sparsity: 0.15,
        }
    }
}

/// Monolingual image-conditioned language modelling in every language, plus
/// English copies in the translation prompt. Never shows a non-English to
/// English translation.
pub fn pretrain_sequences(
    model: &ToyLvlm,
    tok: &Tokenizer,
    items: &[Item],
    format: PromptFormat,
    copy_task: bool,
) -> Result<Vec<PromptSequence>> {
    let bos = tok.special("<bos>")?;
    let mut seqs = Vec::new();
    for item in items {
        for tag in tok.language_tags() {
            let mut tokens = vec![bos];
            tokens.extend(tok.render(&item.concepts, &tag)?);
            let mut target_mask = vec![true; tokens.len()];
            target_mask[0] = false;
            seqs.push(PromptSequence {
                tokens,
                image_id: Some(item.image_id),
                target_mask,
            });
        }
        if copy_task {
            let en = tok.render(&item.concepts, ENGLISH)?;
            let (tokens, target_mask) = prompt_tokens(tok, format, ENGLISH, &en, &en)?;
            seqs.push(PromptSequence {
                tokens,
                image_id: Some(item.image_id),
                target_mask,
            });
        }
    }
    for s in &seqs {
        check_len(model, s)?;
    }
    Ok(seqs)
}

/// Trains every parameter (except the fixed vision features). Returns the per-step losses.
pub fn pretrain(
    model: &mut ToyLvlm,
    tok: &Tokenizer,
    items: &[Item],
    cfg: &PretrainConfig,
) -> Result<Vec<f64>> {
    let seqs = pretrain_sequences(model, tok, items, cfg.prompt_format, cfg.copy_task)?;
    if seqs.is_empty() {
        return Err(Error::Empty("pretraining corpus"));
    }
    model.set_all_trainable();
    fit(
        model,
        &seqs,
        cfg.learning_rate,
        cfg.batch_size,
        cfg.epochs,
        cfg.seed,
        None,
        cfg.sparsity,
        |_, _| Ok(()),
    )
}

pub fn read_pairs(path: impl AsRef<Path>, tok: &Tokenizer) -> Result<Vec<TranslationPair>> {
    corpus::read_jsonl::<PairRecord>(path)?
        .iter()
        .map(|r| corpus::record_to_pair(r, tok))
        .collect()
}

pub fn write_pairs(path: impl AsRef<Path>, pairs: &[TranslationPair], tok: &Tokenizer) -> Result<()> {
    let records = pairs
        .iter()
        .map(|p| corpus::pair_to_record(p, tok))
        .collect::<Result<Vec<_>>>()?;
    corpus::write_jsonl(path, &records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate, Corpus, SyntheticSpec};
    use crate::model::ModelConfig;

    fn setup() -> (ToyLvlm, Corpus) {
        let corpus = generate(&SyntheticSpec {
            n_pretrain: 8,
            n_train: 12,
            n_eval: 6,
            n_monitor: 2,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let model = ToyLvlm::new(ModelConfig::default()).unwrap();
        (model, corpus)
    }

    #[test]
    fn bare_mask_covers_target_only() {
        let (model, c) = setup();
        let p = &c.train[0];
        let seq = build_prompt(&model, &c.tokenizer, p, PromptFormat::Bare).unwrap();
        assert_eq!(seq.target_mask.iter().filter(|&&m| m).count(), p.english_tokens.len());
        let start = seq.target_start().unwrap();
        assert_eq!(&seq.tokens[start..], &p.english_tokens[..]);
        assert_eq!(seq.n_targets(), p.english_tokens.len());
    }

    #[test]
    fn mask_offsets_do_not_depend_on_language() {
        let (model, c) = setup();
        let mut a = c.train[0].clone();
        let mut b = a.clone();
        a.source_lang = "x-l1".into();
        b.source_lang = "x-l2".into();
        let sa = build_prompt(&model, &c.tokenizer, &a, PromptFormat::Instruction).unwrap();
        let sb = build_prompt(&model, &c.tokenizer, &b, PromptFormat::Instruction).unwrap();
        assert_eq!(sa.target_mask, sb.target_mask);
        assert_eq!(sa.target_start(), sb.target_start());
    }

    #[test]
    fn overflow_is_rejected() {
        let (model, c) = setup();
        let mut p = c.train[0].clone();
        p.source_tokens = vec![p.source_tokens[0]; 40];
        assert!(matches!(
            build_prompt(&model, &c.tokenizer, &p, PromptFormat::Instruction),
            Err(Error::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn english_source_is_invalid() {
        let (model, c) = setup();
        let mut p = c.train[0].clone();
        p.source_lang = ENGLISH.into();
        assert!(build_prompt(&model, &c.tokenizer, &p, PromptFormat::Instruction).is_err());
    }

    #[test]
    fn empty_batch_is_an_error() {
        let (model, c) = setup();
        assert!(matches!(
            translation_loss(&model, &c.tokenizer, &[], PromptFormat::Instruction),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn init_loss_is_near_uniform() {
        let (model, c) = setup();
        let loss = translation_loss(&model, &c.tokenizer, &c.train, PromptFormat::Instruction).unwrap();
        let uniform = (240f64).ln();
        assert!((loss - uniform).abs() < 0.1 * uniform, "loss {loss}");
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let (mut model, c) = setup();
        let before = crate::checkpoint::to_bytes(&model).unwrap();
        let cfg = TrainConfig {
            selected_layers: [1].into(),
            epochs: 0,
            ..TrainConfig::default()
        };
        let report = train(&mut model, &c.tokenizer, &c.train, &[], &cfg).unwrap();
        assert_eq!(report.steps, 0);
        assert_eq!(crate::checkpoint::to_bytes(&model).unwrap(), before);
    }

    #[test]
    fn frozen_parameters_stay_fixed() {
        let (mut model, c) = setup();
        let cfg = TrainConfig {
            selected_layers: [2].into(),
            learning_rate: 1e-2,
            epochs: 1,
            ..TrainConfig::default()
        };
        let before = model.params().checksums();
        let report = train(&mut model, &c.tokenizer, &c.train, &c.eval, &cfg).unwrap();
        assert_eq!(report.frozen_checksums_before, report.frozen_checksums_after);
        let after = model.params().checksums();
        for (name, sum) in &before {
            let changed = after[name] != *sum;
            assert_eq!(changed, name.starts_with("layers.2."), "{name}");
        }
    }

    #[test]
    fn pretrain_sequences_never_translate() {
        let (model, c) = setup();
        let seqs = pretrain_sequences(&model, &c.tokenizer, &c.pretrain, PromptFormat::Instruction, true).unwrap();
        let tok = &c.tokenizer;
        for s in &seqs {
            let langs: BTreeSet<&str> = s
                .tokens
                .iter()
                .map(|&t| tok.language_of(t).unwrap())
                .filter(|&l| l != corpus::SHARED)
                .collect();
            assert_eq!(langs.len(), 1);
        }
    }
}
