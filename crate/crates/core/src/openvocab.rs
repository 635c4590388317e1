//! Open-vocabulary classification by combining decoder probabilities with an
//! auxiliary region/text embedder, dual-pass part segmentation, and
//! relabeling of class-agnostic part masks.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_in_place, Graph, RowMix};
use crate::decoders::ProposalSet;
use crate::error::{Error, Result};
use crate::geometry::{mask_to_box, BinaryMask};
use crate::losses::softmax_focal;
use crate::model::{Prediction, SegModel};
use crate::nn::{Linear, ParamGroup, ParamId, ParamStore};
use crate::optim::{AdamW, AdamWConfig};
use crate::prompts::{build_category_prompt, build_hierarchical_prompt, token_id, tokenize, HierLabel};
use crate::synthdata::{Image, SceneSample};
use crate::tensor::Tensor;

pub const COMBINE_EPS: f64 = 1e-12;

/// Mean of the `features` rows (an `h x w` grid) under `mask`, which is
/// resampled to the grid by nearest neighbour. Returns `(vector, empty)`;
/// an empty mask yields the zero vector with `empty = true`.
pub fn mask_pool(features: &Tensor, height: usize, width: usize, mask: &BinaryMask) -> Result<(Vec<f64>, bool)> {
    if features.rows() != height * width {
        return Err(Error::ShapeMismatch(format!(
            "{} feature rows for a {height}x{width} grid",
            features.rows()
        )));
    }
    let m = if mask.shape() == (height, width) {
        mask.clone()
    } else {
        mask.resize_nearest(height, width)?
    };
    let mut acc = vec![0.0; features.cols()];
    let mut n = 0usize;
    for (i, &on) in m.data().iter().enumerate() {
        if on {
            n += 1;
            for (a, v) in acc.iter_mut().zip(features.row(i)) {
                *a += v;
            }
        }
    }
    if n == 0 {
        return Ok((acc, true));
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    Ok((acc, false))
}

fn check_lambda(l: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&l) {
        return Err(Error::InvalidArgument(format!("balancing factor {l} outside [0, 1]")));
    }
    Ok(())
}

/// `p_final[c] ∝ p1[c]^(1-λ_c) · p2[c]^λ_c`, row-normalized.
pub fn combine_with_lambdas(p1: &Tensor, p2: &Tensor, lambdas: &[f64]) -> Result<Tensor> {
    if p1.shape() != p2.shape() || lambdas.len() != p1.cols() {
        return Err(Error::ShapeMismatch(format!(
            "p1 {:?}, p2 {:?}, {} lambdas",
            p1.shape(),
            p2.shape(),
            lambdas.len()
        )));
    }
    for &l in lambdas {
        check_lambda(l)?;
    }
    let mut out = Tensor::zeros(p1.rows(), p1.cols());
    for r in 0..p1.rows() {
        let row: Vec<f64> = (0..p1.cols())
            .map(|c| {
                let l = lambdas[c];
                let a = if l == 1.0 { 1.0 } else { p1.get(r, c).max(COMBINE_EPS).powf(1.0 - l) };
                let b = if l == 0.0 { 1.0 } else { p2.get(r, c).max(COMBINE_EPS).powf(l) };
                a * b
            })
            .collect();
        let s: f64 = row.iter().sum();
        for (c, v) in row.into_iter().enumerate() {
            out.set(r, c, v / s);
        }
    }
    Ok(out)
}

pub fn combine_logits(p1: &Tensor, p2: &Tensor, lambda: f64) -> Result<Tensor> {
    check_lambda(lambda)?;
    combine_with_lambdas(p1, p2, &vec![lambda; p1.cols()])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassProbabilities {
    /// Class names in column order.
    pub classes: Vec<String>,
    /// Decoder distribution over the classes (the "other" mass removed).
    pub p1: Tensor,
    /// Auxiliary distribution.
    pub p2: Tensor,
    pub p_final: Tensor,
    /// Per-class balancing factor.
    pub lambdas: Vec<f64>,
    /// Decoder probability of "other" per proposal.
    pub other: Vec<f64>,
}

impl ClassProbabilities {
    /// Decoder-only probabilities (every λ = 0).
    pub fn closed_set(pred: &Prediction) -> Result<Self> {
        let (p1, other) = split_other(pred)?;
        Ok(Self {
            classes: pred.labels.clone(),
            p2: p1.clone(),
            p_final: p1.clone(),
            lambdas: vec![0.0; p1.cols()],
            other,
            p1,
        })
    }

    /// Best class and its score `p_final[c] * (1 - p_other)` per proposal.
    pub fn best(&self, i: usize) -> (usize, f64) {
        let row = self.p_final.row(i);
        let (c, p) = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (c, &p)| if p > acc.1 { (c, p) } else { acc });
        (c, p * (1.0 - self.other[i]))
    }
}

/// Softmax over all columns, then the class columns renormalized; the
/// "other" probability is returned separately.
fn split_other(pred: &Prediction) -> Result<(Tensor, Vec<f64>)> {
    let k = pred.labels.len();
    if k == 0 {
        return Err(Error::Vocabulary("empty test vocabulary".into()));
    }
    if pred.logits.cols() != k + 1 {
        return Err(Error::ShapeMismatch(format!(
            "{} logit columns for {k} labels",
            pred.logits.cols()
        )));
    }
    let mut p1 = Tensor::zeros(pred.logits.rows(), k);
    let mut other = Vec::with_capacity(pred.logits.rows());
    for r in 0..pred.logits.rows() {
        let mut row = pred.logits.row(r).to_vec();
        softmax_in_place(&mut row);
        other.push(row[k]);
        let s: f64 = row[..k].iter().sum::<f64>().max(COMBINE_EPS);
        for c in 0..k {
            p1.set(r, c, row[c] / s);
        }
    }
    Ok((p1, other))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuxConfig {
    pub dim: usize,
    pub hidden: usize,
    pub vocab_size: usize,
    pub temperature: f64,
    pub steps: usize,
    pub lr: f64,
    pub scenes: usize,
    pub seed: u64,
}

impl Default for AuxConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            hidden: 64,
            vocab_size: 2048,
            temperature: 0.1,
            steps: 300,
            lr: 1e-2,
            scenes: 60,
            seed: 17,
        }
    }
}

const PIXEL_FEATURES: usize = 6;
const REGION_FEATURES: usize = PIXEL_FEATURES + 3 + 3;

/// Colour and local-contrast features per pixel: `r, g, b, |dx|, |dy|,
/// 3x3 luminance deviation`.
pub fn aux_pixel_features(image: &Image) -> Tensor {
    let (h, w) = (image.height, image.width);
    let lum = |r: usize, c: usize| {
        let p = image.pixel(r, c);
        p.iter().sum::<f64>() / p.len() as f64
    };
    let mut out = Tensor::zeros(h * w, PIXEL_FEATURES);
    for r in 0..h {
        for c in 0..w {
            let p = image.pixel(r, c);
            let row = out.row_mut(r * w + c);
            for k in 0..3.min(p.len()) {
                row[k] = p[k];
            }
            let here = lum(r, c);
            row[3] = (lum(r, (c + 1).min(w - 1)) - here).abs();
            row[4] = (lum((r + 1).min(h - 1), c) - here).abs();
            let mut dev = 0.0;
            let mut n = 0.0;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                    if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                        dev += (lum(rr as usize, cc as usize) - here).abs();
                        n += 1.0;
                    }
                }
            }
            row[5] = dev / n;
        }
    }
    out
}

/// Independent two-tower region/class-name embedder standing in for a
/// pretrained image-text model.
#[derive(Clone, Debug)]
pub struct AuxModel {
    pub cfg: AuxConfig,
    pub store: ParamStore,
    region_in: Linear,
    region_out: Linear,
    words: ParamId,
}

impl AuxModel {
    pub fn new(cfg: AuxConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let g = ParamGroup::Head;
        let region_in = Linear::new(&mut store, &mut rng, "aux.region_in", g, REGION_FEATURES, cfg.hidden);
        let region_out = Linear::new(&mut store, &mut rng, "aux.region_out", g, cfg.hidden, cfg.dim);
        let words = store.add_normal_like(&mut rng, "aux.words", g, cfg.vocab_size, cfg.dim, 0.5);
        Self {
            cfg,
            store,
            region_in,
            region_out,
            words,
        }
    }

    /// Hand-built region descriptor: pooled pixel features, colour spread
    /// and three shape statistics.
    pub fn region_descriptor(&self, pixels: &Tensor, height: usize, width: usize, mask: &BinaryMask) -> Result<(Vec<f64>, bool)> {
        let (mean, empty) = mask_pool(pixels, height, width, mask)?;
        if empty {
            return Ok((vec![0.0; REGION_FEATURES], true));
        }
        let m = if mask.shape() == (height, width) {
            mask.clone()
        } else {
            mask.resize_nearest(height, width)?
        };
        let mut spread = [0.0; 3];
        let mut n = 0.0;
        for (i, &on) in m.data().iter().enumerate() {
            if on {
                n += 1.0;
                for k in 0..3 {
                    spread[k] += (pixels.get(i, k) - mean[k]).powi(2);
                }
            }
        }
        let b = mask_to_box(&m);
        let fill = m.area() as f64 / b.area().max(1.0);
        let aspect = (b.width().max(1.0) / b.height().max(1.0)).ln();
        let frac = m.area() as f64 / (height * width) as f64;
        let mut d = mean;
        d.extend(spread.iter().map(|s| (s / n).sqrt()));
        d.extend([fill, aspect, frac.sqrt()]);
        Ok((d, false))
    }

    fn class_mix(&self, names: &[String]) -> Arc<RowMix> {
        let groups: Vec<Vec<usize>> = names
            .iter()
            .map(|n| tokenize(n).iter().map(|t| token_id(t, self.cfg.vocab_size)).collect())
            .collect();
        Arc::new(RowMix::mean_pool(self.cfg.vocab_size, &groups))
    }

    fn logits_graph(&self, g: &mut Graph, store: &ParamStore, descriptors: &Tensor, names: &[String]) -> crate::autograd::Var {
        let x = g.constant(descriptors.clone());
        let h = self.region_in.forward(g, store, x);
        let h = g.relu(h);
        let r = self.region_out.forward(g, store, h);
        let r = g.l2_normalize(r);
        let words = g.param(store, self.words);
        let c = g.row_mix(words, self.class_mix(names));
        let c = g.l2_normalize(c);
        let cos = g.matmul_t(r, c, false, true);
        g.scale(cos, 1.0 / self.cfg.temperature)
    }

    /// Trains both towers with cross-entropy over `class_names` on the
    /// labelled regions of `scenes`.
    pub fn train(&mut self, scenes: &[SceneSample], class_names: &[String]) -> Result<f64> {
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for s in scenes {
            let px = aux_pixel_features(&s.image);
            let regions = s
                .instances
                .iter()
                .map(|i| (&i.class, &i.mask))
                .chain(s.stuff.iter().map(|r| (&r.class, &r.mask)));
            for (class, mask) in regions {
                let Some(t) = class_names.iter().position(|c| c == class) else { continue };
                let (d, empty) = self.region_descriptor(&px, s.image.height, s.image.width, mask)?;
                if !empty {
                    rows.push(d);
                    targets.push(t);
                }
            }
        }
        if rows.is_empty() {
            return Err(Error::InvalidArgument("no labelled regions to train the auxiliary model".into()));
        }
        let x = Tensor::from_rows(&rows);
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: self.cfg.lr,
                weight_decay: 0.0,
                clip_norm: 0.0,
                ..AdamWConfig::default()
            },
            &self.store,
        );
        let mut last = f64::NAN;
        for _ in 0..self.cfg.steps {
            let mut g = Graph::new();
            let logits = self.logits_graph(&mut g, &self.store, &x, class_names);
            let (loss, grad) = softmax_focal(g.value(logits), &targets, 1.0, 0.0)?;
            let n = targets.len() as f64;
            let root = g.external(loss / n, vec![(logits, grad.map(|v| v / n))]);
            let grads = g.backward(root, self.store.len());
            opt.step(&mut self.store, &grads, 1.0);
            last = loss / n;
        }
        Ok(last)
    }

    /// Trains a fresh model on `n` generated scenes.
    pub fn fit(cfg: AuxConfig, scenes: &[SceneSample], class_names: &[String]) -> Result<Self> {
        let mut m = Self::new(cfg);
        m.train(scenes, class_names)?;
        Ok(m)
    }

    /// Class distribution for each mask.
    pub fn probabilities(&self, image: &Image, masks: &[BinaryMask], class_names: &[String]) -> Result<(Tensor, Vec<bool>)> {
        if class_names.is_empty() {
            return Err(Error::Vocabulary("empty test vocabulary".into()));
        }
        let px = aux_pixel_features(image);
        let mut rows = Vec::with_capacity(masks.len());
        let mut empty = Vec::with_capacity(masks.len());
        for m in masks {
            let (d, e) = self.region_descriptor(&px, image.height, image.width, m)?;
            rows.push(d);
            empty.push(e);
        }
        if rows.is_empty() {
            return Ok((Tensor::zeros(0, class_names.len()), empty));
        }
        let mut g = Graph::new();
        let logits = self.logits_graph(&mut g, &self.store, &Tensor::from_rows(&rows), class_names);
        let mut p = crate::autograd::softmax_rows(g.value(logits));
        let k = class_names.len() as f64;
        for (r, &e) in empty.iter().enumerate() {
            if e {
                p.row_mut(r).iter_mut().for_each(|v| *v = 1.0 / k);
            }
        }
        Ok((p, empty))
    }

    pub fn embed_class(&self, name: &str) -> Vec<f64> {
        let mut g = Graph::new();
        let words = g.param(&self.store, self.words);
        let c = g.row_mix(words, self.class_mix(&[name.to_string()]));
        let c = g.l2_normalize(c);
        g.value(c).row(0).to_vec()
    }

    pub fn embed_region(&self, image: &Image, mask: &BinaryMask) -> Result<Vec<f64>> {
        let px = aux_pixel_features(image);
        let (d, _) = self.region_descriptor(&px, image.height, image.width, mask)?;
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(1, d.len(), d));
        let h = self.region_in.forward(&mut g, &self.store, x);
        let h = g.relu(h);
        let r = self.region_out.forward(&mut g, &self.store, h);
        let r = g.l2_normalize(r);
        Ok(g.value(r).row(0).to_vec())
    }
}

/// Binarized proposal masks (`logit > 0`, i.e. probability above 0.5).
pub fn binarize(props: &ProposalSet, i: usize, threshold: f64) -> BinaryMask {
    let cut = (threshold / (1.0 - threshold)).ln();
    let data = props.masks.row(i).iter().map(|&x| x > cut).collect();
    BinaryMask::from_vec(props.mask_height, props.mask_width, data).expect("proposal mask shape")
}

/// Decoder probabilities combined with the auxiliary model, using
/// `lambda_seen` for classes in `seen` and `lambda_novel` otherwise.
pub fn open_vocab_classify(
    pred: &Prediction,
    image: &Image,
    aux: &AuxModel,
    lambda_seen: f64,
    lambda_novel: f64,
    seen: &BTreeSet<String>,
) -> Result<ClassProbabilities> {
    check_lambda(lambda_seen)?;
    check_lambda(lambda_novel)?;
    let (p1, other) = split_other(pred)?;
    let masks: Vec<BinaryMask> = (0..pred.proposals.len()).map(|i| binarize(&pred.proposals, i, 0.5)).collect();
    let (p2, _) = aux.probabilities(image, &masks, &pred.labels)?;
    let lambdas: Vec<f64> = pred
        .labels
        .iter()
        .map(|c| if seen.contains(c) { lambda_seen } else { lambda_novel })
        .collect();
    let p_final = combine_with_lambdas(&p1, &p2, &lambdas)?;
    Ok(ClassProbabilities {
        classes: pred.labels.clone(),
        p1,
        p2,
        p_final,
        lambdas,
        other,
    })
}

/// Instance pass with the instance vocabulary and, when parts are given, a
/// second pass prompting every `"<instance> <part>"` pair.
pub fn dual_pass_segment(
    model: &SegModel,
    store: &ParamStore,
    image: &Image,
    instance_vocab: &[String],
    part_vocab: &[String],
) -> Result<(Prediction, Option<Prediction>)> {
    let inst_prompt = build_category_prompt(instance_vocab)?;
    if part_vocab.is_empty() {
        return Ok((model.predict(store, image, &inst_prompt)?, None));
    }
    let part_prompt = build_hierarchical_prompt(instance_vocab, part_vocab)?;
    let mut out = model.predict_many(store, image, &[inst_prompt, part_prompt])?;
    let parts = out.pop();
    let inst = out.pop().expect("two passes");
    Ok((inst, parts))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceSegment {
    pub class: String,
    pub mask: BinaryMask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartSegment {
    pub instance_class: String,
    pub part: String,
    pub mask: BinaryMask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierInstance {
    pub class: String,
    pub mask: BinaryMask,
    pub parts: Vec<(String, BinaryMask)>,
    /// Union of attached parts per group.
    pub groups: BTreeMap<String, BinaryMask>,
}

/// Attaches each part to the same-class instance it overlaps most (lower
/// index on ties), clipped to that instance; parts without a compatible
/// overlapping instance are dropped.
pub fn combine_instance_part(
    instances: &[InstanceSegment],
    parts: &[PartSegment],
    grouping: &BTreeMap<String, Vec<String>>,
) -> Result<Vec<HierInstance>> {
    let mut out: Vec<HierInstance> = instances
        .iter()
        .map(|i| HierInstance {
            class: i.class.clone(),
            mask: i.mask.clone(),
            parts: Vec::new(),
            groups: BTreeMap::new(),
        })
        .collect();
    for p in parts {
        let mut best: Option<(usize, usize)> = None;
        for (k, inst) in instances.iter().enumerate() {
            if inst.class != p.instance_class {
                continue;
            }
            let ov = inst.mask.intersection_area(&p.mask)?;
            if ov > 0 && best.is_none_or(|(_, b)| ov > b) {
                best = Some((k, ov));
            }
        }
        if let Some((k, _)) = best {
            let clipped = p.mask.and(&instances[k].mask)?;
            out[k].parts.push((p.part.clone(), clipped));
        }
    }
    for inst in &mut out {
        for (group, members) in grouping {
            let mut acc: Option<BinaryMask> = None;
            for (name, m) in &inst.parts {
                if members.contains(name) {
                    acc = Some(match acc {
                        None => m.clone(),
                        Some(a) => a.or(m)?,
                    });
                }
            }
            if let Some(a) = acc {
                inst.groups.insert(group.clone(), a);
            }
        }
    }
    Ok(out)
}

/// Reads instance and part segments from the two passes of
/// [`dual_pass_segment`] using their best class per proposal.
pub fn parts_from_prediction(pred: &Prediction, probs: &ClassProbabilities, hierarchy: &[HierLabel], min_score: f64) -> Vec<PartSegment> {
    let mut out = Vec::new();
    for i in 0..pred.proposals.len() {
        let (c, s) = probs.best(i);
        if s < min_score {
            continue;
        }
        if let Some(HierLabel::Part { instance, part }) = hierarchy.get(c) {
            let mask = binarize(&pred.proposals, i, 0.5);
            if mask.area() > 0 {
                out.push(PartSegment {
                    instance_class: instance.clone(),
                    part: part.clone(),
                    mask,
                });
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartRelabelInput {
    pub semantic_masks: Vec<BinaryMask>,
    /// One distribution row per semantic mask.
    pub semantic_probs: Tensor,
    pub part_masks: Vec<BinaryMask>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartRelabeling {
    pub probs: Tensor,
    /// Part masks that touched no semantic mask (uniform rows).
    pub uncovered: Vec<bool>,
}

/// `P_S(S_i, j) ∝ Σ_k P_M(M_k, j) |M_k ∩ S_i|`, row-normalized.
pub fn relabel_external_parts(inp: &PartRelabelInput) -> Result<PartRelabeling> {
    let k = inp.semantic_masks.len();
    if inp.semantic_probs.rows() != k {
        return Err(Error::ShapeMismatch(format!(
            "{} probability rows for {k} semantic masks",
            inp.semantic_probs.rows()
        )));
    }
    let j = inp.semantic_probs.cols();
    let mut probs = Tensor::zeros(inp.part_masks.len(), j);
    let mut uncovered = Vec::with_capacity(inp.part_masks.len());
    for (i, s) in inp.part_masks.iter().enumerate() {
        let mut row = vec![0.0; j];
        for (m, mk) in inp.semantic_masks.iter().enumerate() {
            let inter = mk.intersection_area(s)? as f64;
            if inter > 0.0 {
                for (c, r) in row.iter_mut().enumerate() {
                    *r += inp.semantic_probs.get(m, c) * inter;
                }
            }
        }
        let total: f64 = row.iter().sum();
        let empty = total <= 0.0;
        for (c, r) in row.into_iter().enumerate() {
            probs.set(i, c, if empty { 1.0 / j as f64 } else { r / total });
        }
        uncovered.push(empty);
    }
    Ok(PartRelabeling { probs, uncovered })
}

/// A random class distribution, used by tests and the random baseline.
pub fn random_distribution(rng: &mut impl Rng, k: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..k).map(|_| rng.gen_range(0.01..1.0)).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}
