//! A small decoder-only vision-language model.
//!
//! Pseudo-vision tokens (a seeded per-image feature table followed by a
//! projection) are prepended to token embeddings; the combined sequence runs
//! through pre-norm decoder layers, each with causal multi-head attention and
//! a gated FFN `[f(h·W_gate) ⊗ (h·W_up)]·W_down`, then a final norm and the LM
//! head. Layer indices are 1-based in every public interface.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_inter: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub n_vision_tokens: usize,
    /// Number of registered image ids; the vision table has one block per id.
    pub n_images: usize,
    pub max_seq_len: usize,
    pub activation: Activation,
    pub seed: u64,
    /// Standard deviation of weight initialisation.
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 32,
            d_inter: 128,
            n_heads: 4,
            vocab_size: 240,
            n_vision_tokens: 4,
            n_images: 16,
            max_seq_len: 48,
            activation: Activation::Silu,
            seed: 42,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("d_inter", self.d_inter),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.n_layers < 2 {
            return Err(Error::Config("n_layers must be at least 2".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "n_heads {} does not divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        if self.n_vision_tokens > 0 && self.n_images == 0 {
            return Err(Error::Config("vision tokens need at least one image".into()));
        }
        if self.n_vision_tokens >= self.max_seq_len {
            return Err(Error::Config("n_vision_tokens must leave room for text".into()));
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return Err(Error::Config("init_std must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Parameter handles of one decoder layer.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub attn_norm_gain: ParamId,
    pub attn_norm_bias: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ffn_norm_gain: ParamId,
    pub ffn_norm_bias: ParamId,
    /// `[d_model × d_inter]`; column `j` is neuron `j`.
    pub ffn_gate: ParamId,
    /// `[d_model × d_inter]`; column `j` is neuron `j`.
    pub ffn_up: ParamId,
    /// `[d_inter × d_model]`.
    pub ffn_down: ParamId,
}

impl DecoderLayer {
    pub fn param_ids(&self) -> [ParamId; 11] {
        [
            self.attn_norm_gain,
            self.attn_norm_bias,
            self.wq,
            self.wk,
            self.wv,
            self.wo,
            self.ffn_norm_gain,
            self.ffn_norm_bias,
            self.ffn_gate,
            self.ffn_up,
            self.ffn_down,
        ]
    }
}

/// Per-layer observations recorded during a capturing forward.
#[derive(Debug, Clone)]
pub struct LayerCapture {
    /// `h·W_gate` before the non-linearity, `[seq_len × d_inter]`.
    pub gate_preact: Tensor,
    /// Residual stream after the layer, `[seq_len × d_model]`.
    pub hidden: Tensor,
    /// Post-softmax attention, one `[seq_len × seq_len]` matrix per head.
    pub attention: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct ForwardCapture {
    /// Number of leading positions occupied by vision tokens.
    pub n_vision: usize,
    pub layers: Vec<LayerCapture>,
}

impl ForwardCapture {
    pub fn seq_len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.hidden.rows())
    }
}

#[derive(Debug, Clone)]
pub struct ToyLvlm {
    config: ModelConfig,
    store: ParamStore,
    vision_table: ParamId,
    vision_proj: ParamId,
    tok_embed: ParamId,
    pos_embed: ParamId,
    layers: Vec<DecoderLayer>,
    final_norm_gain: ParamId,
    final_norm_bias: ParamId,
    lm_head: ParamId,
}

/// Seed for the vision features of one image, independent of `n_images`.
fn vision_seed(seed: u64, image_id: u32) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(u64::from(image_id) + 1)
}

impl ToyLvlm {
    /// Seeded initialisation. Every parameter starts trainable except the vision table.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, di, v) = (config.d_model, config.d_inter, config.vocab_size);
        let std = config.init_std;
        let mut store = ParamStore::new();

        let mut table = Vec::with_capacity(config.n_images * config.n_vision_tokens * d);
        for id in 0..config.n_images as u32 {
            table.extend(Self::vision_features(&config, id).into_data());
        }
        let vision_table = store.add(
            "vision.table",
            Tensor::from_vec(vec![config.n_images * config.n_vision_tokens, d], table)?,
            false,
        );
        let vision_proj = store.add("vision.proj", Tensor::randn(&[d, d], std, &mut rng), true);
        let tok_embed = store.add("embed.tokens", Tensor::randn(&[v, d], std, &mut rng), true);
        let pos_embed = store.add(
            "embed.pos",
            Tensor::randn(&[config.max_seq_len, d], std, &mut rng),
            true,
        );

        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 1..=config.n_layers {
            let p = |s: &str| format!("layers.{i}.{s}");
            let mut mat = |store: &mut ParamStore, name: &str, r: usize, c: usize| {
                store.add(p(name), Tensor::randn(&[r, c], std, &mut rng), true)
            };
            let attn_norm_gain = store.add(p("attn_norm.gain"), Tensor::full(&[d], 1.0), true);
            let attn_norm_bias = store.add(p("attn_norm.bias"), Tensor::zeros(&[d]), true);
            let wq = mat(&mut store, "attn.wq", d, d);
            let wk = mat(&mut store, "attn.wk", d, d);
            let wv = mat(&mut store, "attn.wv", d, d);
            let wo = mat(&mut store, "attn.wo", d, d);
            let ffn_norm_gain = store.add(p("ffn_norm.gain"), Tensor::full(&[d], 1.0), true);
            let ffn_norm_bias = store.add(p("ffn_norm.bias"), Tensor::zeros(&[d]), true);
            let ffn_gate = mat(&mut store, "ffn.gate", d, di);
            let ffn_up = mat(&mut store, "ffn.up", d, di);
            let ffn_down = mat(&mut store, "ffn.down", di, d);
            layers.push(DecoderLayer {
                attn_norm_gain,
                attn_norm_bias,
                wq,
                wk,
                wv,
                wo,
                ffn_norm_gain,
                ffn_norm_bias,
                ffn_gate,
                ffn_up,
                ffn_down,
            });
        }
        let final_norm_gain = store.add("final_norm.gain", Tensor::full(&[d], 1.0), true);
        let final_norm_bias = store.add("final_norm.bias", Tensor::zeros(&[d]), true);
        let lm_head = store.add("lm_head", Tensor::randn(&[d, v], std, &mut rng), true);

        Ok(Self {
            config,
            store,
            vision_table,
            vision_proj,
            tok_embed,
            pos_embed,
            layers,
            final_norm_gain,
            final_norm_bias,
            lm_head,
        })
    }

    fn vision_features(config: &ModelConfig, image_id: u32) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(vision_seed(config.seed, image_id));
        Tensor::randn(&[config.n_vision_tokens, config.d_model], 1.0, &mut rng)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Layer by 1-based index.
    pub fn layer(&self, index: usize) -> Result<&DecoderLayer> {
        self.check_layer(index)?;
        Ok(&self.layers[index - 1])
    }

    pub fn layers(&self) -> &[DecoderLayer] {
        &self.layers
    }

    pub fn vision_projection(&self) -> ParamId {
        self.vision_proj
    }

    pub fn lm_head(&self) -> ParamId {
        self.lm_head
    }

    fn check_layer(&self, index: usize) -> Result<()> {
        if index == 0 || index > self.config.n_layers {
            return Err(Error::LayerIndex {
                index,
                n_layers: self.config.n_layers,
            });
        }
        Ok(())
    }

    /// Raw (pre-projection) vision features `[n_vision_tokens × d_model]` of an image.
    pub fn vision_embed(&self, image_id: u32) -> Result<Tensor> {
        if image_id as usize >= self.config.n_images {
            return Err(Error::UnknownImage(image_id));
        }
        let n = self.config.n_vision_tokens;
        let d = self.config.d_model;
        let table = &self.store.get(self.vision_table).value;
        let start = image_id as usize * n * d;
        Tensor::from_vec(vec![n, d], table.data()[start..start + n * d].to_vec())
    }

    /// Freezes everything, then makes the attention, FFN and norm parameters
    /// of `selected` (1-based) trainable, plus the vision projection when asked.
    pub fn set_trainable_layers(
        &mut self,
        selected: &BTreeSet<usize>,
        include_projection: bool,
    ) -> Result<()> {
        if selected.is_empty() {
            return Err(Error::Empty("layer selection"));
        }
        for &i in selected {
            self.check_layer(i)?;
        }
        self.store.set_all_trainable(false);
        for &i in selected {
            for id in self.layers[i - 1].param_ids() {
                self.store.set_trainable(id, true);
            }
        }
        if include_projection {
            self.store.set_trainable(self.vision_proj, true);
        }
        Ok(())
    }

    /// Everything trainable except the fixed vision feature table.
    pub fn set_all_trainable(&mut self) {
        self.store.set_all_trainable(true);
        self.store.set_trainable(self.vision_table, false);
    }

    pub fn decoder_layer_param_count(&self, index: usize) -> Result<usize> {
        let layer = self.layer(index)?;
        Ok(layer
            .param_ids()
            .iter()
            .map(|&id| self.store.get(id).value.numel())
            .sum())
    }

    /// Total length (vision + text) of a forward over `n_tokens` text tokens.
    pub fn sequence_len(&self, n_tokens: usize, with_image: bool) -> usize {
        n_tokens + if with_image { self.config.n_vision_tokens } else { 0 }
    }

    fn check_inputs(&self, tokens: &[u32], image: Option<u32>) -> Result<()> {
        let with_image = image.is_some() && self.config.n_vision_tokens > 0;
        let len = self.sequence_len(tokens.len(), with_image);
        if len == 0 {
            return Err(Error::Empty("input sequence"));
        }
        if len > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len,
                max: self.config.max_seq_len,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::UnknownToken(bad));
        }
        if let Some(id) = image {
            if id as usize >= self.config.n_images {
                return Err(Error::UnknownImage(id));
            }
        }
        Ok(())
    }

    /// Records the forward on `g` and returns the logits node `[seq_len × vocab]`.
    pub fn forward_graph(
        &self,
        g: &mut Graph<'_>,
        tokens: &[u32],
        image: Option<u32>,
        capture: Option<&mut ForwardCapture>,
    ) -> Result<Var> {
        self.forward_graph_inner(g, tokens, image, capture, None)
    }

    /// Like [`forward_graph`](Self::forward_graph), also returning each layer's
    /// gate pre-activation node.
    pub fn forward_graph_with_gates(
        &self,
        g: &mut Graph<'_>,
        tokens: &[u32],
        image: Option<u32>,
    ) -> Result<(Var, Vec<Var>)> {
        let mut gates = Vec::with_capacity(self.layers.len());
        let logits = self.forward_graph_inner(g, tokens, image, None, Some(&mut gates))?;
        Ok((logits, gates))
    }

    fn forward_graph_inner(
        &self,
        g: &mut Graph<'_>,
        tokens: &[u32],
        image: Option<u32>,
        mut capture: Option<&mut ForwardCapture>,
        mut gates: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        self.check_inputs(tokens, image)?;
        let n_vision = match image {
            Some(_) => self.config.n_vision_tokens,
            None => 0,
        };
        let mut parts = Vec::with_capacity(2);
        if let (Some(id), true) = (image, n_vision > 0) {
            let table = g.param(self.vision_table);
            let rows: Vec<usize> = (0..n_vision).map(|k| id as usize * n_vision + k).collect();
            let feats = g.gather_rows(table, &rows)?;
            let proj = g.param(self.vision_proj);
            parts.push(g.matmul(feats, proj)?);
        }
        if !tokens.is_empty() {
            let emb = g.param(self.tok_embed);
            let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
            parts.push(g.gather_rows(emb, &ids)?);
        }
        let seq = g.concat_rows(&parts)?;
        let t = g.value(seq).rows();
        let pos_table = g.param(self.pos_embed);
        let pos = g.gather_rows(pos_table, &(0..t).collect::<Vec<_>>())?;
        let mut h = g.add(seq, pos)?;

        if let Some(c) = capture.as_deref_mut() {
            c.n_vision = n_vision;
            c.layers.clear();
        }
        for layer in &self.layers {
            let (next, record, gate) = self.layer_graph(g, layer, h, capture.is_some())?;
            h = next;
            if let Some(gs) = gates.as_deref_mut() {
                gs.push(gate);
            }
            if let (Some(c), Some(rec)) = (capture.as_deref_mut(), record) {
                c.layers.push(rec);
            }
        }
        let gain = g.param(self.final_norm_gain);
        let bias = g.param(self.final_norm_bias);
        let normed = g.layer_norm(h, gain, bias)?;
        let head = g.param(self.lm_head);
        g.matmul(normed, head)
    }

    fn layer_graph(
        &self,
        g: &mut Graph<'_>,
        layer: &DecoderLayer,
        h: Var,
        capture: bool,
    ) -> Result<(Var, Option<LayerCapture>, Var)> {
        let (gain, bias) = (g.param(layer.attn_norm_gain), g.param(layer.attn_norm_bias));
        let a = g.layer_norm(h, gain, bias)?;
        let (attn_out, attention) = self.attention_graph(g, layer, a, capture)?;
        let h = g.add(h, attn_out)?;

        let (gain, bias) = (g.param(layer.ffn_norm_gain), g.param(layer.ffn_norm_bias));
        let f = g.layer_norm(h, gain, bias)?;
        let (ffn_out, gate) = self.ffn_graph(g, layer, f)?;
        let h = g.add(h, ffn_out)?;

        let record = capture.then(|| LayerCapture {
            gate_preact: g.value(gate).clone(),
            hidden: g.value(h).clone(),
            attention,
        });
        Ok((h, record, gate))
    }

    fn attention_graph(
        &self,
        g: &mut Graph<'_>,
        layer: &DecoderLayer,
        x: Var,
        capture: bool,
    ) -> Result<(Var, Vec<Tensor>)> {
        let (wq, wk, wv, wo) = (
            g.param(layer.wq),
            g.param(layer.wk),
            g.param(layer.wv),
            g.param(layer.wo),
        );
        let q = g.matmul(x, wq)?;
        let k = g.matmul(x, wk)?;
        let v = g.matmul(x, wv)?;
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.n_heads);
        let mut probs = Vec::new();
        for head in 0..self.config.n_heads {
            let qh = g.slice_cols(q, head * hd, hd)?;
            let kh = g.slice_cols(k, head * hd, hd)?;
            let vh = g.slice_cols(v, head * hd, hd)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale)?;
            let p = g.causal_softmax(scores)?;
            if capture {
                probs.push(g.value(p).clone());
            }
            heads.push(g.matmul(p, vh)?);
        }
        let cat = g.concat_cols(&heads)?;
        Ok((g.matmul(cat, wo)?, probs))
    }

    /// Returns `(output, gate pre-activation)` nodes.
    fn ffn_graph(&self, g: &mut Graph<'_>, layer: &DecoderLayer, h: Var) -> Result<(Var, Var)> {
        let (w_gate, w_up, w_down) = (
            g.param(layer.ffn_gate),
            g.param(layer.ffn_up),
            g.param(layer.ffn_down),
        );
        let gate = g.matmul(h, w_gate)?;
        let act = g.activation(gate, self.config.activation)?;
        let up = g.matmul(h, w_up)?;
        let prod = g.mul(act, up)?;
        Ok((g.matmul(prod, w_down)?, gate))
    }

    /// Logits `[seq_len × vocab]`, plus the capture when requested.
    pub fn forward(
        &self,
        tokens: &[u32],
        image: Option<u32>,
        capture: bool,
    ) -> Result<(Tensor, Option<ForwardCapture>)> {
        let mut g = Graph::with_params(&self.store);
        let mut cap = ForwardCapture {
            n_vision: 0,
            layers: Vec::new(),
        };
        let logits = self.forward_graph(&mut g, tokens, image, capture.then_some(&mut cap))?;
        Ok((g.value(logits).clone(), capture.then_some(cap)))
    }

    /// The gated FFN of layer `index` (1-based) applied directly to `h`.
    /// Returns the output and, when capturing, the gate pre-activation `h·W_gate`.
    pub fn ffn_forward(
        &self,
        index: usize,
        h: &Tensor,
        capture: bool,
    ) -> Result<(Tensor, Option<Tensor>)> {
        let layer = self.layer(index)?;
        let (_, c) = h.expect_matrix("ffn_forward")?;
        if c != self.config.d_model {
            return Err(Error::shape(
                "ffn_forward",
                format!("input width {c}, d_model {}", self.config.d_model),
            ));
        }
        let mut g = Graph::with_params(&self.store);
        let x = g.input(h.clone(), false)?;
        let (out, gate) = self.ffn_graph(&mut g, layer, x)?;
        Ok((g.value(out).clone(), capture.then(|| g.value(gate).clone())))
    }

    /// Final norm followed by the LM head, applied to arbitrary hidden states.
    pub fn project_to_vocab(&self, hidden: &Tensor) -> Result<Tensor> {
        let mut g = Graph::with_params(&self.store);
        let x = g.input(hidden.clone(), false)?;
        let gain = g.param(self.final_norm_gain);
        let bias = g.param(self.final_norm_bias);
        let normed = g.layer_norm(x, gain, bias)?;
        let head = g.param(self.lm_head);
        let logits = g.matmul(normed, head)?;
        Ok(g.value(logits).clone())
    }

    pub(crate) fn from_parts(config: ModelConfig, values: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::new(config)?;
        if values.len() != model.store.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model declares {}",
                values.len(),
                model.store.len()
            )));
        }
        for (id, (name, value)) in model.store.ids().collect::<Vec<_>>().into_iter().zip(values) {
            let node = model.store.get_mut(id);
            if node.value.shape() != value.shape() {
                return Err(Error::Format(format!(
                    "tensor {name}: shape {:?}, expected {:?}",
                    value.shape(),
                    node.value.shape()
                )));
            }
            node.value = value;
            let expected = model.store.name(id);
            if expected != name {
                return Err(Error::Format(format!("tensor {name}: expected {expected}")));
            }
        }
        Ok(model)
    }
}
