//! Text prompts for category sets, referring expressions and hierarchical
//! labels, plus the toy text encoder and per-label pooling.

use std::collections::BTreeSet;
use std::ops::Range;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, RowMix, Var};
use crate::error::{Error, Result};
use crate::nn::{Attention, FeedForward, LayerNorm, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const CLS_TOKEN: usize = 0;
pub const CLS_STR: &str = "[CLS]";
pub const DELIMITER: &str = ".";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Category,
    Referring,
    Hierarchical,
}

/// Instance/part decomposition of a hierarchical label, registered when
/// the prompt is built so multi-word names never need re-parsing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum HierLabel {
    Instance(String),
    Part { instance: String, part: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpan {
    pub label: String,
    pub tokens: Range<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub text: String,
    pub kind: PromptKind,
    /// Token strings, starting with the leading `[CLS]` slot.
    pub tokens: Vec<String>,
    pub label_spans: Vec<LabelSpan>,
    pub hierarchy: Vec<HierLabel>,
}

impl PromptSpec {
    pub fn num_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn labels(&self) -> Vec<String> {
        self.label_spans.iter().map(|s| s.label.clone()).collect()
    }

    /// Class slot reserved for "other", after every prompted label.
    pub fn other_index(&self) -> usize {
        match self.kind {
            PromptKind::Referring => 1,
            _ => self.label_spans.len(),
        }
    }

    pub fn span_of(&self, label: &str) -> Option<&Range<usize>> {
        self.label_spans.iter().find(|s| s.label == label).map(|s| &s.tokens)
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.label_spans.iter().position(|s| s.label == label)
    }

    pub fn validate(&self) -> Result<()> {
        let mut last_end = 0;
        for s in &self.label_spans {
            if s.tokens.start < last_end || s.tokens.end > self.tokens.len() || s.tokens.is_empty() {
                return Err(Error::Prompt(format!("bad span for `{}`", s.label)));
            }
            last_end = s.tokens.end;
        }
        match self.kind {
            PromptKind::Referring if !self.label_spans.is_empty() => {
                Err(Error::Prompt("referring prompts carry no label spans".into()))
            }
            PromptKind::Category | PromptKind::Hierarchical if self.label_spans.is_empty() => {
                Err(Error::Prompt("label prompts need at least one span".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Lowercased words (alphanumeric runs) and single punctuation characters.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

pub fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Fixed hash vocabulary; id 0 is `[CLS]`.
pub fn token_id(token: &str, vocab_size: usize) -> usize {
    1 + (fnv1a(token) % (vocab_size as u64 - 1)) as usize
}

fn build_label_prompt(labels: &[String], kind: PromptKind, hierarchy: Vec<HierLabel>) -> Result<PromptSpec> {
    if labels.is_empty() {
        return Err(Error::Prompt("no labels".into()));
    }
    let mut seen = BTreeSet::new();
    let mut tokens = vec![CLS_STR.to_string()];
    let mut spans = Vec::with_capacity(labels.len());
    for (i, label) in labels.iter().enumerate() {
        let toks = tokenize(label);
        if toks.is_empty() {
            return Err(Error::Prompt("empty label".into()));
        }
        if label.contains(DELIMITER) {
            return Err(Error::Prompt(format!("label `{label}` contains the delimiter")));
        }
        if !seen.insert(label.as_str()) {
            return Err(Error::Prompt(format!("duplicate label `{label}`")));
        }
        if i > 0 {
            tokens.push(DELIMITER.to_string());
        }
        let start = tokens.len();
        tokens.extend(toks);
        spans.push(LabelSpan {
            label: label.clone(),
            tokens: start..tokens.len(),
        });
    }
    let spec = PromptSpec {
        text: labels.join(DELIMITER),
        kind,
        tokens,
        label_spans: spans,
        hierarchy,
    };
    spec.validate()?;
    Ok(spec)
}

pub fn build_category_prompt(labels: &[String]) -> Result<PromptSpec> {
    build_label_prompt(labels, PromptKind::Category, Vec::new())
}

pub fn build_referring_prompt(expression: &str) -> Result<PromptSpec> {
    let toks = tokenize(expression);
    if toks.is_empty() {
        return Err(Error::Prompt("empty referring expression".into()));
    }
    let mut tokens = vec![CLS_STR.to_string()];
    tokens.extend(toks);
    Ok(PromptSpec {
        text: expression.to_string(),
        kind: PromptKind::Referring,
        tokens,
        label_spans: Vec::new(),
        hierarchy: Vec::new(),
    })
}

/// Bare instance names followed by every `"<instance> <part>"` pair.
pub fn build_hierarchical_prompt(instance_classes: &[String], part_classes: &[String]) -> Result<PromptSpec> {
    if instance_classes.is_empty() || part_classes.is_empty() {
        return Err(Error::Prompt("hierarchical prompts need instances and parts".into()));
    }
    let mut labels = Vec::new();
    let mut hierarchy = Vec::new();
    for inst in instance_classes {
        labels.push(inst.clone());
        hierarchy.push(HierLabel::Instance(inst.clone()));
    }
    for inst in instance_classes {
        for part in part_classes {
            labels.push(format!("{inst} {part}"));
            hierarchy.push(HierLabel::Part {
                instance: inst.clone(),
                part: part.clone(),
            });
        }
    }
    build_label_prompt(&labels, PromptKind::Hierarchical, hierarchy)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionScope {
    /// Every token sees every token in its window.
    Full,
    /// Tokens only see tokens of their own label span; the rest see
    /// themselves.
    WithinSpan,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub window: usize,
    pub attention: AttentionScope,
    pub positional: bool,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 2,
            heads: 1,
            vocab_size: 2048,
            window: 512,
            attention: AttentionScope::Full,
            positional: true,
        }
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    ln_attn: LayerNorm,
    attn: Attention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub cfg: TextEncoderConfig,
    embed: ParamId,
    positions: Option<ParamId>,
    layers: Vec<EncoderLayer>,
    final_ln: LayerNorm,
}

/// Token features for a prompt, as values.
#[derive(Clone, Debug, PartialEq)]
pub struct TextFeatures {
    pub tokens: Tensor,
    pub sequence_embedding: Vec<f64>,
}

/// Per-label pooled vectors, in prompt order.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassEmbeddings {
    pub labels: Vec<String>,
    pub vectors: Tensor,
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: TextEncoderConfig, group: ParamGroup) -> Self {
        let d = cfg.dim;
        let embed = store.add_normal_like(rng, "text.embed", group, cfg.vocab_size, d, 0.5);
        let positions = cfg
            .positional
            .then(|| store.add_normal_like(rng, "text.pos", group, cfg.window, d, 0.1));
        let layers = (0..cfg.layers)
            .map(|l| EncoderLayer {
                ln_attn: LayerNorm::new(store, &format!("text.l{l}.ln_attn"), group, d),
                attn: Attention::new(store, rng, &format!("text.l{l}.attn"), group, d, cfg.heads),
                ln_ffn: LayerNorm::new(store, &format!("text.l{l}.ln_ffn"), group, d),
                ffn: FeedForward::new(store, rng, &format!("text.l{l}.ffn"), group, d, 2 * d),
            })
            .collect();
        let final_ln = LayerNorm::new(store, "text.ln_out", group, d);
        Self {
            cfg,
            embed,
            positions,
            layers,
            final_ln,
        }
    }

    /// Splits the prompt into windows of `cfg.window` tokens, encodes each
    /// independently and concatenates back to the full length.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, prompt: &PromptSpec) -> Var {
        let ids: Vec<usize> = prompt
            .tokens
            .iter()
            .map(|t| if t == CLS_STR { CLS_TOKEN } else { token_id(t, self.cfg.vocab_size) })
            .collect();
        let groups = span_groups(prompt);
        let embed = g.param(store, self.embed);
        let positions = self.positions.map(|p| g.param(store, p));
        let mut chunks = Vec::new();
        for (ci, chunk) in ids.chunks(self.cfg.window).enumerate() {
            let start = ci * self.cfg.window;
            let gather = Arc::new(RowMix::gather(self.cfg.vocab_size, chunk));
            let mut x = g.row_mix(embed, gather);
            if let Some(pos) = positions {
                let p = g.slice_rows(pos, 0, chunk.len());
                x = g.add(x, p);
            }
            let bias = match self.cfg.attention {
                AttentionScope::Full => None,
                AttentionScope::WithinSpan => {
                    let gr = &groups[start..start + chunk.len()];
                    let n = chunk.len();
                    let mut b = Tensor::zeros(n, n);
                    for i in 0..n {
                        for j in 0..n {
                            if gr[i] != gr[j] {
                                b.set(i, j, -1e9);
                            }
                        }
                    }
                    Some(g.constant(b))
                }
            };
            for layer in &self.layers {
                let h = layer.ln_attn.forward(g, store, x);
                let a = layer.attn.forward(g, store, h, h, bias);
                x = g.add(x, a);
                let h = layer.ln_ffn.forward(g, store, x);
                let f = layer.ffn.forward(g, store, h);
                x = g.add(x, f);
            }
            chunks.push(self.final_ln.forward(g, store, x));
        }
        if chunks.len() == 1 {
            chunks[0]
        } else {
            g.concat_rows(&chunks)
        }
    }

    pub fn encode(&self, store: &ParamStore, prompt: &PromptSpec) -> TextFeatures {
        let mut g = Graph::new();
        let v = self.forward(&mut g, store, prompt);
        let tokens = g.value(v).clone();
        let sequence_embedding = tokens.row(0).to_vec();
        TextFeatures {
            tokens,
            sequence_embedding,
        }
    }
}

/// Group id per token: label spans share an id, every other token is alone.
fn span_groups(prompt: &PromptSpec) -> Vec<usize> {
    let n = prompt.tokens.len();
    let mut groups: Vec<usize> = (0..n).map(|i| n + i).collect();
    for (si, s) in prompt.label_spans.iter().enumerate() {
        for t in s.tokens.clone() {
            groups[t] = si;
        }
    }
    groups
}

pub fn encode_text(prompt: &PromptSpec, encoder: &TextEncoder, store: &ParamStore) -> TextFeatures {
    encoder.encode(store, prompt)
}

/// Mean of token rows per label span, on the tape.
pub fn pool_class_embeddings_var(g: &mut Graph, tokens: Var, prompt: &PromptSpec) -> Result<Var> {
    if prompt.label_spans.is_empty() {
        return Err(Error::Prompt("prompt has no label spans to pool".into()));
    }
    let rows = g.value(tokens).rows();
    let groups: Vec<Vec<usize>> = prompt.label_spans.iter().map(|s| s.tokens.clone().collect()).collect();
    Ok(g.row_mix(tokens, Arc::new(RowMix::mean_pool(rows, &groups))))
}

pub fn pool_class_embeddings(features: &TextFeatures, prompt: &PromptSpec) -> Result<ClassEmbeddings> {
    let mut g = Graph::new();
    let t = g.constant(features.tokens.clone());
    let v = pool_class_embeddings_var(&mut g, t, prompt)?;
    Ok(ClassEmbeddings {
        labels: prompt.labels(),
        vectors: g.value(v).clone(),
    })
}
