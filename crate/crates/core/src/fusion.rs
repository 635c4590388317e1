//! Toy multiscale image encoder and the bi-directional cross-attention
//! block that fuses text into visual features and vice versa.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Im2Col, RowMix, Var};
use crate::error::{Error, Result};
use crate::nn::{Attention, LayerNorm, Linear, ParamGroup, ParamId, ParamStore};
use crate::synthdata::Image;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEncoderConfig {
    pub dim: usize,
    pub levels: usize,
    /// Stride of the finest level; each further level doubles it.
    pub base_stride: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            levels: 3,
            base_stride: 8,
            channels: 3,
            height: 64,
            width: 64,
        }
    }
}

impl ImageEncoderConfig {
    pub fn strides(&self) -> Vec<usize> {
        (0..self.levels).map(|l| self.base_stride << l).collect()
    }

    pub fn grid(&self, level: usize) -> (usize, usize) {
        let s = self.base_stride << level;
        (self.height / s, self.width / s)
    }

    pub fn memory_rows(&self) -> usize {
        (0..self.levels).map(|l| self.grid(l).0 * self.grid(l).1).sum()
    }
}

/// One feature grid: `height * width` rows of `dim` columns, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub height: usize,
    pub width: usize,
    pub features: Tensor,
}

/// Visual features, finest level first and coarsest last.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiscaleFeatures {
    pub levels: Vec<FeatureGrid>,
}

impl MultiscaleFeatures {
    pub fn flatten(&self) -> Tensor {
        let rows: Vec<Vec<f64>> = self
            .levels
            .iter()
            .flat_map(|l| (0..l.features.rows()).map(move |r| l.features.row(r).to_vec()))
            .collect();
        Tensor::from_rows(&rows)
    }
}

/// On-tape visual features: flattened multiscale memory plus the
/// full-resolution per-pixel embedding used by mask heads.
#[derive(Clone, Copy, Debug)]
pub struct VisualVars {
    pub memory: Var,
    pub pixel: Var,
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub cfg: ImageEncoderConfig,
    stem: Linear,
    downs: Vec<Linear>,
    mixes: Vec<Linear>,
    norms: Vec<LayerNorm>,
    level_pos: Vec<ParamId>,
    pixel_in: Linear,
    pixel_out: Linear,
    pixel_lift: Linear,
}

impl ImageEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: ImageEncoderConfig) -> Self {
        let (d, ch, s) = (cfg.dim, cfg.channels, cfg.base_stride);
        let group = ParamGroup::Backbone;
        let stem = Linear::new(store, rng, "image.stem", group, s * s * ch, d);
        let downs = (1..cfg.levels)
            .map(|l| Linear::new(store, rng, &format!("image.down{l}"), group, 4 * d, d))
            .collect();
        let mixes = (0..cfg.levels)
            .map(|l| Linear::new(store, rng, &format!("image.mix{l}"), group, d, d))
            .collect();
        let norms = (0..cfg.levels)
            .map(|l| LayerNorm::new(store, &format!("image.ln{l}"), group, d))
            .collect();
        let level_pos = (0..cfg.levels)
            .map(|l| {
                let (h, w) = cfg.grid(l);
                store.add_normal_like(rng, format!("image.pos{l}"), group, h * w, d, 0.1)
            })
            .collect();
        let pixel_in = Linear::new(store, rng, "image.pixel_in", group, 9 * ch, d);
        let pixel_out = Linear::new(store, rng, "image.pixel_out", group, d, d);
        let pixel_lift = Linear::new(store, rng, "image.pixel_lift", group, d, d);
        Self {
            cfg,
            stem,
            downs,
            mixes,
            norms,
            level_pos,
            pixel_in,
            pixel_out,
            pixel_lift,
        }
    }

    pub fn check_image(&self, image: &Image) -> Result<()> {
        let coarsest = self.cfg.base_stride << (self.cfg.levels - 1);
        if image.height < coarsest || image.width < coarsest {
            return Err(Error::InvalidShape(format!(
                "image {}x{} smaller than coarsest stride {coarsest}",
                image.height, image.width
            )));
        }
        if image.height != self.cfg.height || image.width != self.cfg.width || image.channels != self.cfg.channels {
            return Err(Error::ShapeMismatch(format!(
                "encoder expects {}x{}x{}, got {}x{}x{}",
                self.cfg.height, self.cfg.width, self.cfg.channels, image.height, image.width, image.channels
            )));
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, image: &Image) -> Result<VisualVars> {
        self.check_image(image)?;
        let (h, w, ch, d) = (image.height, image.width, image.channels, self.cfg.dim);
        let x = g.constant(Tensor::from_vec(h * w, ch, image.data.clone()));
        let s = self.cfg.base_stride;
        let patches = g.im2col(
            x,
            Arc::new(Im2Col {
                height: h,
                width: w,
                channels: ch,
                kernel: s,
                stride: s,
                pad: 0,
            }),
        );
        let mut level = self.stem.forward(g, store, patches);
        level = g.relu(level);
        let mut levels = Vec::with_capacity(self.cfg.levels);
        let (mut gh, mut gw) = (h / s, w / s);
        for l in 0..self.cfg.levels {
            if l > 0 {
                let p = g.im2col(
                    level,
                    Arc::new(Im2Col {
                        height: gh,
                        width: gw,
                        channels: d,
                        kernel: 2,
                        stride: 2,
                        pad: 0,
                    }),
                );
                gh /= 2;
                gw /= 2;
                level = self.downs[l - 1].forward(g, store, p);
                level = g.relu(level);
            }
            let m = self.mixes[l].forward(g, store, level);
            let m = g.relu(m);
            level = g.add(level, m);
            let normed = self.norms[l].forward(g, store, level);
            let pos = g.param(store, self.level_pos[l]);
            levels.push((g.add(normed, pos), gh, gw));
        }
        let memory = if levels.len() == 1 {
            levels[0].0
        } else {
            let vars: Vec<Var> = levels.iter().map(|l| l.0).collect();
            g.concat_rows(&vars)
        };

        // full-resolution pixel embedding: local 3x3 colour context plus the
        // finest level lifted back to pixels
        let local = g.im2col(
            x,
            Arc::new(Im2Col {
                height: h,
                width: w,
                channels: ch,
                kernel: 3,
                stride: 1,
                pad: 1,
            }),
        );
        let p = self.pixel_in.forward(g, store, local);
        let p = g.relu(p);
        let p = self.pixel_out.forward(g, store, p);
        let (fh, fw) = (levels[0].1, levels[0].2);
        let lift = self.pixel_lift.forward(g, store, levels[0].0);
        let idx: Vec<usize> = (0..h * w)
            .map(|i| {
                let (r, c) = (i / w, i % w);
                (r * fh / h) * fw + (c * fw / w)
            })
            .collect();
        let up = g.row_mix(lift, Arc::new(RowMix::gather(fh * fw, &idx)));
        let pixel = g.add(p, up);
        Ok(VisualVars { memory, pixel })
    }

    /// Splits a flattened memory tensor back into per-level grids.
    pub fn split_levels(&self, memory: &Tensor) -> MultiscaleFeatures {
        let mut levels = Vec::new();
        let mut start = 0;
        for l in 0..self.cfg.levels {
            let (h, w) = self.cfg.grid(l);
            let data = memory.data()[start * memory.cols()..(start + h * w) * memory.cols()].to_vec();
            levels.push(FeatureGrid {
                height: h,
                width: w,
                features: Tensor::from_vec(h * w, memory.cols(), data),
            });
            start += h * w;
        }
        MultiscaleFeatures { levels }
    }

    pub fn encode(&self, store: &ParamStore, image: &Image) -> Result<MultiscaleFeatures> {
        let mut g = Graph::new();
        let v = self.forward(&mut g, store, image)?;
        Ok(self.split_levels(g.value(v.memory)))
    }
}

/// Text-guided visual features and image-guided text features.
#[derive(Clone, Debug)]
pub struct FusionBlock {
    text_to_visual: Attention,
    visual_to_text: Attention,
}

#[derive(Clone, Copy, Debug)]
pub struct FusedVars {
    pub visual: Var,
    pub text: Var,
    pub text_to_visual: Var,
    pub visual_to_text: Var,
}

/// Fused features as values, with the cross terms kept for inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedFeatures {
    pub visual: Tensor,
    pub text: Tensor,
    pub text_to_visual: Tensor,
    pub visual_to_text: Tensor,
}

impl FusionBlock {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            text_to_visual: Attention::new(store, rng, &format!("{name}.t2v"), ParamGroup::Head, dim, heads),
            visual_to_text: Attention::new(store, rng, &format!("{name}.v2t"), ParamGroup::Head, dim, heads),
        }
    }

    pub fn bi_xattn(&self, g: &mut Graph, store: &ParamStore, visual: Var, text: Var) -> Result<(Var, Var)> {
        let (dv, dt) = (g.value(visual).cols(), g.value(text).cols());
        if dv != dt || dv != self.text_to_visual.dim {
            return Err(Error::ShapeMismatch(format!(
                "fusion width: visual {dv}, text {dt}, block {}",
                self.text_to_visual.dim
            )));
        }
        let t2v = self.text_to_visual.forward(g, store, visual, text, None);
        let v2t = self.visual_to_text.forward(g, store, text, visual, None);
        Ok((t2v, v2t))
    }

    /// `(F_v + F_t2v, F_t + F_v2t)`.
    pub fn fuse(&self, g: &mut Graph, store: &ParamStore, visual: Var, text: Var) -> Result<FusedVars> {
        let (t2v, v2t) = self.bi_xattn(g, store, visual, text)?;
        Ok(FusedVars {
            visual: g.add(visual, t2v),
            text: g.add(text, v2t),
            text_to_visual: t2v,
            visual_to_text: v2t,
        })
    }

    pub fn fuse_values(&self, store: &ParamStore, visual: &Tensor, text: &Tensor) -> Result<FusedFeatures> {
        let mut g = Graph::new();
        let v = g.constant(visual.clone());
        let t = g.constant(text.clone());
        let f = self.fuse(&mut g, store, v, t)?;
        Ok(FusedFeatures {
            visual: g.value(f.visual).clone(),
            text: g.value(f.text).clone(),
            text_to_visual: g.value(f.text_to_visual).clone(),
            visual_to_text: g.value(f.visual_to_text).clone(),
        })
    }

    /// Every parameter of the block, for tests and zero-initialization.
    pub fn params(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        for a in [&self.text_to_visual, &self.visual_to_text] {
            for l in [&a.query, &a.key, &a.value, &a.output] {
                out.push(l.weight);
                out.push(l.bias);
            }
        }
        out
    }

    pub fn query_key_params(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        for a in [&self.text_to_visual, &self.visual_to_text] {
            for l in [&a.query, &a.key] {
                out.push(l.weight);
                out.push(l.bias);
            }
        }
        out
    }

    pub fn output_params(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        for a in [&self.text_to_visual, &self.visual_to_text] {
            out.push(a.output.weight);
            out.push(a.output.bias);
        }
        out
    }

    pub fn text_to_visual(&self) -> &Attention {
        &self.text_to_visual
    }
}
