//! Query decoders producing `(masks, boxes, embeddings)` proposals and the
//! cosine classification head.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::fusion::FusionBlock;
use crate::geometry::BBox;
use crate::nn::{Attention, FeedForward, LayerNorm, Linear, ParamGroup, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionSchedule {
    /// One fusion block applied before decoding.
    Once,
    /// A separate fusion block in front of every decoder layer.
    PerLayer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub num_thing_queries: usize,
    pub num_stuff_queries: usize,
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub decoupled: bool,
    pub early_fusion_things: bool,
    pub early_fusion_stuff: bool,
    pub fusion_schedule: FusionSchedule,
    pub temperature: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Variant::DecoupledFusionThings.apply(Self {
            num_thing_queries: 20,
            num_stuff_queries: 8,
            layers: 3,
            dim: 64,
            heads: 1,
            ffn_hidden: 128,
            decoupled: true,
            early_fusion_things: true,
            early_fusion_stuff: false,
            fusion_schedule: FusionSchedule::Once,
            temperature: 0.07,
        })
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_thing_queries == 0 || self.num_stuff_queries == 0 {
            return Err(Error::Config("query counts must be at least 1".into()));
        }
        if self.layers == 0 || self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "bad decoder shape: layers {}, dim {}, heads {}",
                self.layers, self.dim, self.heads
            )));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }

    /// Queries in the single decoder of unified mode.
    pub fn unified_queries(&self) -> usize {
        self.num_thing_queries + self.num_stuff_queries
    }

    pub fn total_queries(&self) -> usize {
        self.num_thing_queries + self.num_stuff_queries
    }

    pub fn uses_fusion(&self) -> bool {
        self.early_fusion_things || (self.decoupled && self.early_fusion_stuff)
    }

    pub fn variant(&self) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.apply(self.clone()) == *self)
    }
}

/// The decoder and fusion layouts compared in the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// One decoder for things and stuff, no text-image fusion.
    UnifiedPlain,
    /// Separate thing and stuff decoders, no fusion.
    DecoupledPlain,
    /// (a) one decoder with early fusion.
    UnifiedFusion,
    /// (b) separate decoders, both fed fused features.
    DecoupledFusionBoth,
    /// (c) separate decoders, fusion on the thing branch only.
    DecoupledFusionThings,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::UnifiedPlain,
        Variant::DecoupledPlain,
        Variant::UnifiedFusion,
        Variant::DecoupledFusionBoth,
        Variant::DecoupledFusionThings,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::UnifiedPlain => "unified",
            Variant::DecoupledPlain => "decoupled",
            Variant::UnifiedFusion => "a",
            Variant::DecoupledFusionBoth => "b",
            Variant::DecoupledFusionThings => "c",
        }
    }

    pub fn flags(&self) -> (bool, bool, bool) {
        match self {
            Variant::UnifiedPlain => (false, false, false),
            Variant::DecoupledPlain => (true, false, false),
            Variant::UnifiedFusion => (false, true, false),
            Variant::DecoupledFusionBoth => (true, true, true),
            Variant::DecoupledFusionThings => (true, true, false),
        }
    }

    pub fn apply(&self, mut cfg: DecoderConfig) -> DecoderConfig {
        let (d, t, s) = self.flags();
        cfg.decoupled = d;
        cfg.early_fusion_things = t;
        cfg.early_fusion_stuff = s;
        cfg
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase();
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == key)
            .or(match key.as_str() {
                "unified-fusion" => Some(Variant::UnifiedFusion),
                "decoupled-fusion" => Some(Variant::DecoupledFusionBoth),
                "decoupled-fusion-things" => Some(Variant::DecoupledFusionThings),
                _ => None,
            })
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (expected unified, decoupled, a, b or c)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Thing,
    Stuff,
    /// Produced by the single decoder of unified mode.
    Unified,
}

/// Decoded proposals as plain values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalSet {
    pub mask_height: usize,
    pub mask_width: usize,
    /// `N x (H*W)` mask logits, row-major pixels.
    pub masks: Tensor,
    /// Normalized corner-form boxes.
    pub boxes: Vec<BBox>,
    pub embeddings: Tensor,
    pub sources: Vec<Source>,
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn mask_logits(&self, i: usize) -> &[f64] {
        self.masks.row(i)
    }

    pub fn empty(mask_height: usize, mask_width: usize, dim: usize) -> Self {
        Self {
            mask_height,
            mask_width,
            masks: Tensor::zeros(0, mask_height * mask_width),
            boxes: Vec::new(),
            embeddings: Tensor::zeros(0, dim),
            sources: Vec::new(),
        }
    }

    pub fn from_vars(g: &Graph, vars: &DecoderVars, mask_height: usize, mask_width: usize, source: Source) -> Self {
        let boxes = g.value(vars.boxes);
        Self {
            mask_height,
            mask_width,
            masks: g.value(vars.masks).clone(),
            boxes: (0..boxes.rows())
                .map(|r| {
                    let b = boxes.row(r);
                    BBox::from_array([b[0], b[1], b[2], b[3]])
                })
                .collect(),
            embeddings: g.value(vars.embeddings).clone(),
            sources: vec![source; boxes.rows()],
        }
    }

    pub fn select(&self, indices: &[usize]) -> ProposalSet {
        let rows = |t: &Tensor| {
            let data: Vec<f64> = indices.iter().flat_map(|&i| t.row(i).to_vec()).collect();
            Tensor::from_vec(indices.len(), t.cols(), data)
        };
        ProposalSet {
            mask_height: self.mask_height,
            mask_width: self.mask_width,
            masks: rows(&self.masks),
            boxes: indices.iter().map(|&i| self.boxes[i]).collect(),
            embeddings: rows(&self.embeddings),
            sources: indices.iter().map(|&i| self.sources[i]).collect(),
        }
    }
}

/// Thing proposals first, then stuff, keeping per-proposal alignment.
pub fn concat_proposals(thing: &ProposalSet, stuff: &ProposalSet) -> Result<ProposalSet> {
    if stuff.is_empty() {
        return Ok(thing.clone());
    }
    if thing.is_empty() {
        return Ok(stuff.clone());
    }
    if (thing.mask_height, thing.mask_width) != (stuff.mask_height, stuff.mask_width) {
        return Err(Error::ShapeMismatch(format!(
            "proposal masks {}x{} vs {}x{}",
            thing.mask_height, thing.mask_width, stuff.mask_height, stuff.mask_width
        )));
    }
    if thing.embeddings.cols() != stuff.embeddings.cols() {
        return Err(Error::ShapeMismatch("proposal embedding widths differ".into()));
    }
    let stack = |a: &Tensor, b: &Tensor| {
        let mut data = a.data().to_vec();
        data.extend_from_slice(b.data());
        Tensor::from_vec(a.rows() + b.rows(), a.cols(), data)
    };
    Ok(ProposalSet {
        mask_height: thing.mask_height,
        mask_width: thing.mask_width,
        masks: stack(&thing.masks, &stuff.masks),
        boxes: thing.boxes.iter().chain(&stuff.boxes).copied().collect(),
        embeddings: stack(&thing.embeddings, &stuff.embeddings),
        sources: thing.sources.iter().chain(&stuff.sources).copied().collect(),
    })
}

/// `logit[i, c] = cos(E_i, E'_c) / temperature`, with the learned "other"
/// embedding appended as the last column. Zero vectors score 0.
pub fn class_logits_var(g: &mut Graph, embeddings: Var, classes: Var, other: Var, temperature: f64) -> Var {
    let targets = g.concat_rows(&[classes, other]);
    let e = g.l2_normalize(embeddings);
    let t = g.l2_normalize(targets);
    let cos = g.matmul_t(e, t, false, true);
    g.scale(cos, 1.0 / temperature)
}

pub fn class_logits(embeddings: &Tensor, classes: &Tensor, other: &[f64], temperature: f64) -> Result<Tensor> {
    if embeddings.cols() != classes.cols() || other.len() != classes.cols() {
        return Err(Error::ShapeMismatch(format!(
            "embedding width {} vs class width {} / other {}",
            embeddings.cols(),
            classes.cols(),
            other.len()
        )));
    }
    let mut g = Graph::new();
    let e = g.constant(embeddings.clone());
    let c = g.constant(classes.clone());
    let o = g.constant(Tensor::from_vec(1, other.len(), other.to_vec()));
    let l = class_logits_var(&mut g, e, c, o, temperature);
    Ok(g.value(l).clone())
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    ln_self: LayerNorm,
    self_attn: Attention,
    ln_cross: LayerNorm,
    cross_attn: Attention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

/// On-tape decoder outputs.
#[derive(Clone, Copy, Debug)]
pub struct DecoderVars {
    pub masks: Var,
    pub boxes: Var,
    pub embeddings: Var,
    /// Text features after any per-layer fusion (the input text otherwise).
    pub text: Option<Var>,
}

/// Learned queries refined by self-attention, cross-attention to the
/// visual memory, and a feed-forward block per layer.
#[derive(Clone, Debug)]
pub struct QueryDecoder {
    pub num_queries: usize,
    queries: ParamId,
    layers: Vec<DecoderLayer>,
    final_ln: LayerNorm,
    mask_embed: FeedForward,
    box_hidden: Linear,
    box_out: Linear,
    class_embed: Linear,
}

impl QueryDecoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cfg: &DecoderConfig, num_queries: usize) -> Self {
        let (d, h, group) = (cfg.dim, cfg.heads, ParamGroup::Head);
        let queries = store.add_normal_like(rng, format!("{name}.queries"), group, num_queries, d, 1.0);
        let layers = (0..cfg.layers)
            .map(|l| DecoderLayer {
                ln_self: LayerNorm::new(store, &format!("{name}.l{l}.ln_self"), group, d),
                self_attn: Attention::new(store, rng, &format!("{name}.l{l}.self"), group, d, h),
                ln_cross: LayerNorm::new(store, &format!("{name}.l{l}.ln_cross"), group, d),
                cross_attn: Attention::new(store, rng, &format!("{name}.l{l}.cross"), group, d, h),
                ln_ffn: LayerNorm::new(store, &format!("{name}.l{l}.ln_ffn"), group, d),
                ffn: FeedForward::new(store, rng, &format!("{name}.l{l}.ffn"), group, d, cfg.ffn_hidden),
            })
            .collect();
        let final_ln = LayerNorm::new(store, &format!("{name}.final_ln"), group, d);
        let mask_embed = FeedForward::new(store, rng, &format!("{name}.mask"), group, d, d);
        let box_hidden = Linear::new(store, rng, &format!("{name}.box.hidden"), group, d, d);
        let box_out = Linear::new(store, rng, &format!("{name}.box.out"), group, d, 4);
        // start boxes near the image centre rather than at a single point
        store
            .get_mut(box_out.bias)
            .data_mut()
            .copy_from_slice(&[-1.0, -1.0, 1.0, 1.0]);
        let class_embed = Linear::new(store, rng, &format!("{name}.class"), group, d, d);
        Self {
            num_queries,
            queries,
            layers,
            final_ln,
            mask_embed,
            box_hidden,
            box_out,
            class_embed,
        }
    }

    /// Decodes against `memory` (visual tokens) and `pixel` (per-pixel
    /// embedding). With `fusion`, block `l` fuses memory and text before
    /// layer `l`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        memory: Var,
        pixel: Var,
        fusion: Option<(&[FusionBlock], Var)>,
    ) -> Result<DecoderVars> {
        let mut q = g.param(store, self.queries);
        let mut memory = memory;
        let mut text = fusion.map(|f| f.1);
        for (l, layer) in self.layers.iter().enumerate() {
            if let Some((blocks, _)) = fusion {
                let fused = blocks[l].fuse(g, store, memory, text.expect("text present with fusion"))?;
                memory = fused.visual;
                text = Some(fused.text);
            }
            let n = layer.ln_self.forward(g, store, q);
            let a = layer.self_attn.forward(g, store, n, n, None);
            q = g.add(q, a);
            let n = layer.ln_cross.forward(g, store, q);
            let a = layer.cross_attn.forward(g, store, n, memory, None);
            q = g.add(q, a);
            let n = layer.ln_ffn.forward(g, store, q);
            let a = layer.ffn.forward(g, store, n);
            q = g.add(q, a);
        }
        let q = self.final_ln.forward(g, store, q);
        let m = self.mask_embed.forward(g, store, q);
        let masks = g.matmul_t(m, pixel, false, true);
        let b = self.box_hidden.forward(g, store, q);
        let b = g.relu(b);
        let b = self.box_out.forward(g, store, b);
        let boxes = g.box_corners(b);
        let embeddings = self.class_embed.forward(g, store, q);
        Ok(DecoderVars {
            masks,
            boxes,
            embeddings,
            text,
        })
    }

    /// Value-level decoding for callers that hold features outside a tape.
    pub fn decode(
        &self,
        store: &ParamStore,
        memory: &Tensor,
        pixel: &Tensor,
        mask_height: usize,
        mask_width: usize,
        source: Source,
    ) -> Result<ProposalSet> {
        if pixel.rows() != mask_height * mask_width {
            return Err(Error::ShapeMismatch(format!(
                "pixel features have {} rows for a {mask_height}x{mask_width} mask",
                pixel.rows()
            )));
        }
        let mut g = Graph::new();
        let m = g.constant(memory.clone());
        let p = g.constant(pixel.clone());
        let vars = self.forward(&mut g, store, m, p, None)?;
        Ok(ProposalSet::from_vars(&g, &vars, mask_height, mask_width, source))
    }
}
