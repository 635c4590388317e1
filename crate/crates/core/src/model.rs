//! The full segmentation network: text encoder, image encoder, optional
//! early fusion, thing/stuff (or unified) decoders and the cosine class head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::decoders::{class_logits_var, DecoderConfig, DecoderVars, FusionSchedule, ProposalSet, QueryDecoder, Source};
use crate::error::{Error, Result};
use crate::fusion::{FusedVars, FusionBlock, ImageEncoder, ImageEncoderConfig, VisualVars};
use crate::nn::{ParamGroup, ParamId, ParamStore};
use crate::prompts::{pool_class_embeddings_var, PromptKind, PromptSpec, TextEncoder, TextEncoderConfig};
use crate::synthdata::Image;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub text: TextEncoderConfig,
    pub image: ImageEncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.decoder.validate()?;
        if self.text.dim != self.decoder.dim || self.image.dim != self.decoder.dim {
            return Err(Error::Config(format!(
                "text ({}), image ({}) and decoder ({}) widths must agree",
                self.text.dim, self.image.dim, self.decoder.dim
            )));
        }
        if self.image.levels < 2 {
            return Err(Error::Config("the image encoder needs at least two levels".into()));
        }
        let coarsest = self.image.base_stride << (self.image.levels - 1);
        if self.image.height % coarsest != 0 || self.image.width % coarsest != 0 {
            return Err(Error::Config(format!(
                "image {}x{} is not divisible by the coarsest stride {coarsest}",
                self.image.height, self.image.width
            )));
        }
        Ok(())
    }
}

/// One decoder's outputs on the tape, with its class logits.
#[derive(Clone, Copy, Debug)]
pub struct BranchVars {
    pub source: Source,
    pub decoder: DecoderVars,
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct PromptVars {
    /// Thing branch first, then stuff (one unified branch otherwise).
    pub branches: Vec<BranchVars>,
    pub text: Var,
    pub fused: Option<FusedVars>,
}

/// Values of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub proposals: ProposalSet,
    /// `N x (labels + 1)` logits; the last column is "other".
    pub logits: Tensor,
    /// Prompt labels in column order, without "other".
    pub labels: Vec<String>,
    pub kind: PromptKind,
}

impl Prediction {
    pub fn probabilities(&self) -> Tensor {
        crate::autograd::softmax_rows(&self.logits)
    }
}

#[derive(Clone, Debug)]
pub struct SegModel {
    pub cfg: ModelConfig,
    text: TextEncoder,
    image: ImageEncoder,
    fusion: Vec<FusionBlock>,
    primary: QueryDecoder,
    stuff: Option<QueryDecoder>,
    other: ParamId,
}

impl SegModel {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let d = &cfg.decoder;
        let text = TextEncoder::new(store, rng, cfg.text.clone(), ParamGroup::Head);
        let image = ImageEncoder::new(store, rng, cfg.image.clone());
        let blocks = match (d.uses_fusion(), d.fusion_schedule) {
            (false, _) => 0,
            (true, FusionSchedule::Once) => 1,
            (true, FusionSchedule::PerLayer) => d.layers,
        };
        let fusion = (0..blocks)
            .map(|i| FusionBlock::new(store, rng, &format!("fusion{i}"), d.dim, d.heads))
            .collect();
        let (primary, stuff) = if d.decoupled {
            (
                QueryDecoder::new(store, rng, "thing", d, d.num_thing_queries),
                Some(QueryDecoder::new(store, rng, "stuff", d, d.num_stuff_queries)),
            )
        } else {
            (QueryDecoder::new(store, rng, "unified", d, d.unified_queries()), None)
        };
        let other = store.add_normal_like(rng, "other_embedding", ParamGroup::Head, 1, d.dim, 0.5);
        Ok(Self {
            cfg,
            text,
            image,
            fusion,
            primary,
            stuff,
            other,
        })
    }

    pub fn image_encoder(&self) -> &ImageEncoder {
        &self.image
    }

    pub fn text_encoder(&self) -> &TextEncoder {
        &self.text
    }

    pub fn fusion_blocks(&self) -> &[FusionBlock] {
        &self.fusion
    }

    pub fn mask_shape(&self) -> (usize, usize) {
        (self.cfg.image.height, self.cfg.image.width)
    }

    pub fn forward_image(&self, g: &mut Graph, store: &ParamStore, image: &Image) -> Result<VisualVars> {
        self.image.forward(g, store, image)
    }

    fn class_targets(&self, g: &mut Graph, text: Var, prompt: &PromptSpec) -> Result<Var> {
        match prompt.kind {
            PromptKind::Referring => Ok(g.slice_rows(text, 0, 1)),
            _ => pool_class_embeddings_var(g, text, prompt),
        }
    }

    fn run_branch(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        decoder: &QueryDecoder,
        fused_input: bool,
        visual: VisualVars,
        text: Var,
        once: Option<FusedVars>,
        prompt: &PromptSpec,
        source: Source,
    ) -> Result<BranchVars> {
        let per_layer = self.cfg.decoder.fusion_schedule == FusionSchedule::PerLayer;
        let (dec, branch_text) = match (fused_input, per_layer) {
            (false, _) => (decoder.forward(g, store, visual.memory, visual.pixel, None)?, text),
            (true, false) => {
                let f = once.expect("fusion computed for fused branches");
                (decoder.forward(g, store, f.visual, visual.pixel, None)?, f.text)
            }
            (true, true) => {
                let out = decoder.forward(g, store, visual.memory, visual.pixel, Some((&self.fusion, text)))?;
                let t = out.text.expect("per-layer fusion returns text");
                (out, t)
            }
        };
        let classes = self.class_targets(g, branch_text, prompt)?;
        let other = g.param(store, self.other);
        let logits = class_logits_var(g, dec.embeddings, classes, other, self.cfg.decoder.temperature);
        Ok(BranchVars {
            source,
            decoder: dec,
            logits,
        })
    }

    /// Text encoding, fusion and decoding for one prompt over shared image
    /// features.
    pub fn forward_prompt(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        visual: VisualVars,
        prompt: &PromptSpec,
    ) -> Result<PromptVars> {
        prompt.validate()?;
        let d = &self.cfg.decoder;
        let text = self.text.forward(g, store, prompt);
        let fused = if d.uses_fusion() && d.fusion_schedule == FusionSchedule::Once {
            Some(self.fusion[0].fuse(g, store, visual.memory, text)?)
        } else {
            None
        };
        let mut branches = Vec::with_capacity(2);
        match &self.stuff {
            Some(stuff) => {
                branches.push(self.run_branch(
                    g,
                    store,
                    &self.primary,
                    d.early_fusion_things,
                    visual,
                    text,
                    fused,
                    prompt,
                    Source::Thing,
                )?);
                branches.push(self.run_branch(
                    g,
                    store,
                    stuff,
                    d.early_fusion_stuff,
                    visual,
                    text,
                    fused,
                    prompt,
                    Source::Stuff,
                )?);
            }
            None => branches.push(self.run_branch(
                g,
                store,
                &self.primary,
                d.early_fusion_things,
                visual,
                text,
                fused,
                prompt,
                Source::Unified,
            )?),
        }
        Ok(PromptVars { branches, text, fused })
    }

    /// Collects branch outputs into one proposal set and logit matrix.
    pub fn collect(&self, g: &Graph, vars: &PromptVars, prompt: &PromptSpec) -> Result<Prediction> {
        let (h, w) = self.mask_shape();
        let mut proposals = ProposalSet::empty(h, w, self.cfg.decoder.dim);
        let mut logit_rows: Vec<Vec<f64>> = Vec::new();
        for b in &vars.branches {
            let p = ProposalSet::from_vars(g, &b.decoder, h, w, b.source);
            proposals = crate::decoders::concat_proposals(&proposals, &p)?;
            let l = g.value(b.logits);
            logit_rows.extend((0..l.rows()).map(|r| l.row(r).to_vec()));
        }
        let labels = match prompt.kind {
            PromptKind::Referring => vec![prompt.text.clone()],
            _ => prompt.labels(),
        };
        Ok(Prediction {
            proposals,
            logits: Tensor::from_rows(&logit_rows),
            labels,
            kind: prompt.kind,
        })
    }

    pub fn predict(&self, store: &ParamStore, image: &Image, prompt: &PromptSpec) -> Result<Prediction> {
        let mut g = Graph::new();
        let visual = self.forward_image(&mut g, store, image)?;
        let vars = self.forward_prompt(&mut g, store, visual, prompt)?;
        self.collect(&g, &vars, prompt)
    }

    /// Several prompts against one image, sharing the image features.
    pub fn predict_many(&self, store: &ParamStore, image: &Image, prompts: &[PromptSpec]) -> Result<Vec<Prediction>> {
        let mut g = Graph::new();
        let visual = self.forward_image(&mut g, store, image)?;
        prompts
            .iter()
            .map(|p| {
                let vars = self.forward_prompt(&mut g, store, visual, p)?;
                self.collect(&g, &vars, p)
            })
            .collect()
    }
}
