//! Loss terms with analytic gradients and the thing/stuff composition.
//!
//! Every differentiable function returns its value together with the
//! gradient with respect to its continuous inputs, so the training loop can
//! splice the result onto the tape as a single external node.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::assignment::MatchResult;
use crate::autograd::{sigmoid, softmax_in_place};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::Tensor;

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
pub const PROB_EPS: f64 = 1e-12;
pub const DICE_EPS: f64 = 1e-6;
pub const BCE_CLAMP: f64 = 15.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StuffBoxMode {
    /// Box loss only on stuff-decoder proposals matched to things; stuff
    /// matches get class and mask terms.
    AuxiliaryThings,
    /// Mask loss on every stuff-decoder match, box loss on thing matches.
    Literal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub cls: f64,
    pub mask: f64,
    pub boxes: f64,
    pub ce: f64,
    pub dice: f64,
    pub l1: f64,
    pub giou: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub stuff_box_mode: StuffBoxMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 2.0,
            mask: 5.0,
            boxes: 5.0,
            ce: 1.0,
            dice: 1.0,
            l1: 1.0,
            giou: 0.2,
            focal_alpha: FOCAL_ALPHA,
            focal_gamma: FOCAL_GAMMA,
            stuff_box_mode: StuffBoxMode::AuxiliaryThings,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.cls,
            self.mask,
            self.boxes,
            self.ce,
            self.dice,
            self.l1,
            self.giou,
            self.focal_alpha,
            self.focal_gamma,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Per-sample focal term `-α (1-p)^γ ln p` and its derivative in `p`.
fn focal_term(p: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = p.clamp(PROB_EPS, 1.0);
    let q = 1.0 - p;
    let value = -alpha * q.powf(gamma) * p.ln();
    let dq = if gamma == 0.0 {
        0.0
    } else if gamma == 1.0 {
        1.0
    } else {
        q.powf(gamma - 1.0)
    };
    let grad = alpha * (gamma * dq * p.ln() - q.powf(gamma) / p);
    (value, grad)
}

/// Mean focal loss over rows of `probs` at the target columns.
pub fn focal_loss(probs: &Tensor, targets: &[usize], alpha: f64, gamma: f64) -> Result<f64> {
    Ok(focal_loss_grad(probs, targets, alpha, gamma)?.0)
}

/// Mean focal loss and its gradient with respect to `probs`.
pub fn focal_loss_grad(probs: &Tensor, targets: &[usize], alpha: f64, gamma: f64) -> Result<(f64, Tensor)> {
    if targets.len() != probs.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} targets for {} rows",
            targets.len(),
            probs.rows()
        )));
    }
    let n = probs.rows().max(1) as f64;
    let mut grad = Tensor::zeros(probs.rows(), probs.cols());
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if t >= probs.cols() {
            return Err(Error::IndexOutOfRange(format!("target {t} with {} classes", probs.cols())));
        }
        let (v, d) = focal_term(probs.get(r, t), alpha, gamma);
        total += v;
        if probs.get(r, t) > PROB_EPS {
            grad.set(r, t, d / n);
        }
    }
    Ok((total / n, grad))
}

/// Focal loss on a softmax over `logits`, summed over rows, with the
/// gradient taken through the softmax.
pub fn softmax_focal(logits: &Tensor, targets: &[usize], alpha: f64, gamma: f64) -> Result<(f64, Tensor)> {
    if targets.len() != logits.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} targets for {} rows",
            targets.len(),
            logits.rows()
        )));
    }
    let mut grad = Tensor::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if t >= logits.cols() {
            return Err(Error::IndexOutOfRange(format!("target {t} with {} classes", logits.cols())));
        }
        let mut p = logits.row(r).to_vec();
        softmax_in_place(&mut p);
        let pt = p[t].max(PROB_EPS);
        let q = 1.0 - pt;
        total += -alpha * q.powf(gamma) * pt.ln();
        // dL/dp_t * p_t, kept free of divisions
        let dq = if gamma == 0.0 { 0.0 } else { q.powf(gamma - 1.0) };
        let s = alpha * (gamma * dq * pt * pt.ln() - q.powf(gamma));
        let row = grad.row_mut(r);
        for (j, g) in row.iter_mut().enumerate() {
            let delta = if j == t { 1.0 } else { 0.0 };
            *g = s * (delta - p[j]);
        }
    }
    Ok((total, grad))
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!("prediction has {a} pixels, target {b}")));
    }
    Ok(())
}

/// `1 - (2 Σ p g + ε) / (Σ p + Σ g + ε)` and its gradient in `p`.
pub fn dice_loss_grad(probs: &[f64], gt: &[bool]) -> Result<(f64, Vec<f64>)> {
    check_len(probs.len(), gt.len())?;
    let inter: f64 = probs.iter().zip(gt).filter(|(_, &g)| g).map(|(p, _)| p).sum();
    let sp: f64 = probs.iter().sum();
    let sg = gt.iter().filter(|&&g| g).count() as f64;
    let num = 2.0 * inter + DICE_EPS;
    let den = sp + sg + DICE_EPS;
    let grad = gt
        .iter()
        .map(|&g| {
            let dn = if g { 2.0 } else { 0.0 };
            -(dn * den - num) / (den * den)
        })
        .collect();
    Ok((1.0 - num / den, grad))
}

pub fn dice_loss(probs: &[f64], gt: &[bool]) -> Result<f64> {
    Ok(dice_loss_grad(probs, gt)?.0)
}

/// Dice on `sigmoid(logits)` with the gradient taken through the sigmoid.
pub fn dice_loss_logits(logits: &[f64], gt: &[bool]) -> Result<(f64, Vec<f64>)> {
    let probs: Vec<f64> = logits.iter().map(|&x| sigmoid(x)).collect();
    let (v, gp) = dice_loss_grad(&probs, gt)?;
    let grad = gp.iter().zip(&probs).map(|(g, p)| g * p * (1.0 - p)).collect();
    Ok((v, grad))
}

/// Mean per-pixel binary cross-entropy on logits clamped to `±15`.
pub fn bce_mask_loss_grad(logits: &[f64], gt: &[bool]) -> Result<(f64, Vec<f64>)> {
    check_len(logits.len(), gt.len())?;
    let n = logits.len().max(1) as f64;
    let mut total = 0.0;
    let grad = logits
        .iter()
        .zip(gt)
        .map(|(&x, &g)| {
            let xc = x.clamp(-BCE_CLAMP, BCE_CLAMP);
            let y = if g { 1.0 } else { 0.0 };
            // softplus(x) - y x, computed without overflow
            total += xc.max(0.0) + (-xc.abs()).exp().ln_1p() - y * xc;
            if x.abs() > BCE_CLAMP {
                0.0
            } else {
                (sigmoid(xc) - y) / n
            }
        })
        .collect();
    Ok((total / n, grad))
}

pub fn bce_mask_loss(logits: &[f64], gt: &[bool]) -> Result<f64> {
    Ok(bce_mask_loss_grad(logits, gt)?.0)
}

/// Mean absolute coordinate difference.
pub fn l1_box_loss_grad(pred: &BBox, gt: &BBox) -> (f64, [f64; 4]) {
    let (p, t) = (pred.to_array(), gt.to_array());
    let mut grad = [0.0; 4];
    let mut total = 0.0;
    for k in 0..4 {
        let d = p[k] - t[k];
        total += d.abs();
        grad[k] = if d > 0.0 {
            0.25
        } else if d < 0.0 {
            -0.25
        } else {
            0.0
        };
    }
    (total / 4.0, grad)
}

pub fn l1_box_loss(pred: &BBox, gt: &BBox) -> f64 {
    l1_box_loss_grad(pred, gt).0
}

/// Generalized IoU: `IoU - |hull \ union| / |hull|`.
pub fn giou(pred: &BBox, gt: &BBox) -> f64 {
    giou_with_grad(pred, gt).0
}

fn giou_with_grad(pred: &BBox, gt: &BBox) -> (f64, [f64; 4]) {
    let [a0, b0, a1, b1] = pred.to_array();
    let [g0, h0, g1, h1] = gt.to_array();
    let (pw, ph) = ((a1 - a0).max(0.0), (b1 - b0).max(0.0));
    let ap = pw * ph;
    let ag = (g1 - g0).max(0.0) * (h1 - h0).max(0.0);
    let dap = [-ph, -pw, ph, pw];

    let iw = a1.min(g1) - a0.max(g0);
    let ih = b1.min(h1) - b0.max(h0);
    let (inter, dinter) = if iw > 0.0 && ih > 0.0 {
        let diw = [if a0 > g0 { -1.0 } else { 0.0 }, 0.0, if a1 < g1 { 1.0 } else { 0.0 }, 0.0];
        let dih = [0.0, if b0 > h0 { -1.0 } else { 0.0 }, 0.0, if b1 < h1 { 1.0 } else { 0.0 }];
        let d: Vec<f64> = (0..4).map(|k| diw[k] * ih + dih[k] * iw).collect();
        (iw * ih, [d[0], d[1], d[2], d[3]])
    } else {
        (0.0, [0.0; 4])
    };
    let union = ap + ag - inter;
    let du: Vec<f64> = (0..4).map(|k| dap[k] - dinter[k]).collect();

    let cw = a1.max(g1) - a0.min(g0);
    let ch = b1.max(h1) - b0.min(h0);
    let hull = cw * ch;
    let dcw = [if a0 < g0 { -1.0 } else { 0.0 }, 0.0, if a1 > g1 { 1.0 } else { 0.0 }, 0.0];
    let dch = [0.0, if b0 < h0 { -1.0 } else { 0.0 }, 0.0, if b1 > h1 { 1.0 } else { 0.0 }];
    let dhull: Vec<f64> = (0..4).map(|k| dcw[k] * ch + dch[k] * cw).collect();

    let (iou, diou) = if union > 0.0 {
        let d: Vec<f64> = (0..4)
            .map(|k| dinter[k] / union - inter * du[k] / (union * union))
            .collect();
        (inter / union, d)
    } else {
        (0.0, vec![0.0; 4])
    };
    if hull <= 0.0 {
        return (iou, [diou[0], diou[1], diou[2], diou[3]]);
    }
    // GIoU = IoU - 1 + U / C
    let value = iou - 1.0 + union / hull;
    let mut grad = [0.0; 4];
    for k in 0..4 {
        grad[k] = diou[k] + du[k] / hull - union * dhull[k] / (hull * hull);
    }
    (value, grad)
}

/// `1 - GIoU` and its gradient in the predicted corners.
pub fn giou_loss_grad(pred: &BBox, gt: &BBox) -> (f64, [f64; 4]) {
    let (v, g) = giou_with_grad(pred, gt);
    (1.0 - v, [-g[0], -g[1], -g[2], -g[3]])
}

pub fn giou_loss(pred: &BBox, gt: &BBox) -> f64 {
    giou_loss_grad(pred, gt).0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GtKind {
    Thing,
    Stuff,
}

/// One ground-truth segment expressed in the class columns of a prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct GtTarget {
    pub class: usize,
    /// Instance column for hierarchical (part) targets.
    pub instance_class: Option<usize>,
    pub kind: GtKind,
    /// Row-major pixels on the mask grid.
    pub mask: Vec<bool>,
    /// Normalized box; `None` for stuff.
    pub bbox: Option<BBox>,
}

/// Which logit columns a classification loss reads.
#[derive(Clone, Debug, PartialEq)]
pub enum ClassLayout {
    Flat { other: usize },
    Hierarchical {
        part_cols: Vec<usize>,
        instance_cols: Vec<usize>,
        other: usize,
    },
}

/// Raw decoder outputs for one proposal group as values.
#[derive(Clone, Copy, Debug)]
pub struct Predictions<'a> {
    pub logits: &'a Tensor,
    pub masks: &'a Tensor,
    pub boxes: &'a Tensor,
}

/// Gradients with respect to [`Predictions`].
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionGrads {
    pub logits: Tensor,
    pub masks: Tensor,
    pub boxes: Tensor,
}

impl PredictionGrads {
    fn zeros_like(p: &Predictions<'_>) -> Self {
        Self {
            logits: Tensor::zeros(p.logits.rows(), p.logits.cols()),
            masks: Tensor::zeros(p.masks.rows(), p.masks.cols()),
            boxes: Tensor::zeros(p.boxes.rows(), p.boxes.cols()),
        }
    }

    fn scale(&mut self, s: f64) {
        self.logits.scale_assign(s);
        self.masks.scale_assign(s);
        self.boxes.scale_assign(s);
    }

    fn add(&mut self, other: &PredictionGrads) {
        self.logits.add_assign(&other.logits);
        self.masks.add_assign(&other.masks);
        self.boxes.add_assign(&other.boxes);
    }
}

/// One weighted term of the loss, before summation.
#[derive(Clone, Debug)]
struct Term {
    value: f64,
    grads: PredictionGrads,
}

fn pred_box(boxes: &Tensor, i: usize) -> BBox {
    let b = boxes.row(i);
    BBox::from_array([b[0], b[1], b[2], b[3]])
}

fn restricted_focal(row: &[f64], cols: &[usize], target_pos: usize, alpha: f64, gamma: f64) -> Result<(f64, Vec<f64>)> {
    let sub = Tensor::from_vec(1, cols.len(), cols.iter().map(|&c| row[c]).collect());
    let (v, g) = softmax_focal(&sub, &[target_pos], alpha, gamma)?;
    let mut full = vec![0.0; row.len()];
    for (k, &c) in cols.iter().enumerate() {
        full[c] += g.get(0, k);
    }
    Ok((v, full))
}

/// Classification loss, summed over proposals and divided by `norm`.
/// `assigned[i]` is the ground truth of proposal `i` (or `None` for the
/// "other" class).
pub fn classification_loss(
    logits: &Tensor,
    assigned: &[Option<&GtTarget>],
    layout: &ClassLayout,
    w: &LossWeights,
    norm: f64,
) -> Result<(f64, Tensor)> {
    if assigned.len() != logits.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} assignments for {} proposals",
            assigned.len(),
            logits.rows()
        )));
    }
    let mut grad = Tensor::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    match layout {
        ClassLayout::Flat { other } => {
            let targets: Vec<usize> = assigned.iter().map(|a| a.map_or(*other, |g| g.class)).collect();
            let (v, g) = softmax_focal(logits, &targets, w.focal_alpha, w.focal_gamma)?;
            total = v;
            grad = g;
        }
        ClassLayout::Hierarchical {
            part_cols,
            instance_cols,
            other,
        } => {
            let mut parts = part_cols.clone();
            parts.push(*other);
            let mut insts = instance_cols.clone();
            insts.push(*other);
            for (r, a) in assigned.iter().enumerate() {
                let (pt, it) = match a {
                    None => (part_cols.len(), instance_cols.len()),
                    Some(g) => {
                        let inst = g
                            .instance_class
                            .ok_or_else(|| Error::InvalidArgument("part target without instance label".into()))?;
                        let pt = part_cols
                            .iter()
                            .position(|&c| c == g.class)
                            .ok_or_else(|| Error::IndexOutOfRange(format!("class {} is not a part column", g.class)))?;
                        let it = instance_cols
                            .iter()
                            .position(|&c| c == inst)
                            .ok_or_else(|| Error::IndexOutOfRange(format!("class {inst} is not an instance column")))?;
                        (pt, it)
                    }
                };
                let row = logits.row(r);
                let (v1, g1) = restricted_focal(row, &parts, pt, w.focal_alpha, w.focal_gamma)?;
                let (v2, g2) = restricted_focal(row, &insts, it, w.focal_alpha, w.focal_gamma)?;
                total += v1 + v2;
                for (c, gr) in grad.row_mut(r).iter_mut().enumerate() {
                    *gr = g1[c] + g2[c];
                }
            }
        }
    }
    grad.scale_assign(1.0 / norm);
    Ok((total / norm, grad))
}

/// `L_clsPart + L_clsThing` over matched proposals; per-proposal targets
/// give a part column and an instance column.
pub fn hierarchical_cls_loss(
    logits: &Tensor,
    part_targets: &[Option<usize>],
    thing_targets: &[Option<usize>],
    part_cols: &[usize],
    instance_cols: &[usize],
    other: usize,
    w: &LossWeights,
) -> Result<f64> {
    if part_targets.len() != logits.rows() || thing_targets.len() != logits.rows() {
        return Err(Error::ShapeMismatch("one part and one instance target per row".into()));
    }
    let targets: Vec<Option<GtTarget>> = part_targets
        .iter()
        .zip(thing_targets)
        .map(|(p, t)| match (p, t) {
            (Some(p), Some(t)) => Ok(Some(GtTarget {
                class: *p,
                instance_class: Some(*t),
                kind: GtKind::Thing,
                mask: Vec::new(),
                bbox: None,
            })),
            (None, None) => Ok(None),
            _ => Err(Error::InvalidArgument("part and instance labels must both be present".into())),
        })
        .collect::<Result<_>>()?;
    let assigned: Vec<Option<&GtTarget>> = targets.iter().map(|t| t.as_ref()).collect();
    let layout = ClassLayout::Hierarchical {
        part_cols: part_cols.to_vec(),
        instance_cols: instance_cols.to_vec(),
        other,
    };
    Ok(classification_loss(logits, &assigned, &layout, w, 1.0)?.0)
}

fn mask_term(preds: &Predictions<'_>, pairs: &[(usize, &GtTarget)], w: &LossWeights) -> Result<Term> {
    let mut grads = PredictionGrads::zeros_like(preds);
    let mut value = 0.0;
    let n = pairs.len().max(1) as f64;
    for &(p, gt) in pairs {
        let logits = preds.masks.row(p);
        let (bce, gb) = bce_mask_loss_grad(logits, &gt.mask)?;
        let (dice, gd) = dice_loss_logits(logits, &gt.mask)?;
        value += w.ce * bce + w.dice * dice;
        for (k, g) in grads.masks.row_mut(p).iter_mut().enumerate() {
            *g += (w.ce * gb[k] + w.dice * gd[k]) / n;
        }
    }
    Ok(Term { value: value / n, grads })
}

fn box_term(preds: &Predictions<'_>, pairs: &[(usize, &GtTarget)], w: &LossWeights) -> Result<Term> {
    let mut grads = PredictionGrads::zeros_like(preds);
    let mut value = 0.0;
    let n = pairs.len().max(1) as f64;
    for &(p, gt) in pairs {
        let gb = gt
            .bbox
            .ok_or_else(|| Error::InvalidArgument("box loss on a target without a box".into()))?;
        let pb = pred_box(preds.boxes, p);
        let (l1, g1) = l1_box_loss_grad(&pb, &gb);
        let (gl, g2) = giou_loss_grad(&pb, &gb);
        value += w.l1 * l1 + w.giou * gl;
        for (k, g) in grads.boxes.row_mut(p).iter_mut().enumerate() {
            *g += (w.l1 * g1[k] + w.giou * g2[k]) / n;
        }
    }
    Ok(Term { value: value / n, grads })
}

fn cls_term(
    preds: &Predictions<'_>,
    assigned: &[Option<&GtTarget>],
    layout: &ClassLayout,
    w: &LossWeights,
    norm: f64,
) -> Result<Term> {
    let (value, g) = classification_loss(preds.logits, assigned, layout, w, norm)?;
    let mut grads = PredictionGrads::zeros_like(preds);
    grads.logits = g;
    Ok(Term { value, grads })
}

fn check_preds(preds: &Predictions<'_>, gts: &[GtTarget], m: &MatchResult) -> Result<()> {
    let n = preds.logits.rows();
    if preds.masks.rows() != n || preds.boxes.rows() != n || preds.boxes.cols() != 4 {
        return Err(Error::ShapeMismatch("logits, masks and boxes disagree on proposal count".into()));
    }
    for &(p, g) in &m.pairs {
        if p >= n || g >= gts.len() {
            return Err(Error::IndexOutOfRange(format!("pair ({p}, {g}) with {n} proposals, {} gts", gts.len())));
        }
    }
    for gt in gts {
        if gt.mask.len() != preds.masks.cols() {
            return Err(Error::ShapeMismatch(format!(
                "gt mask has {} pixels, predictions {}",
                gt.mask.len(),
                preds.masks.cols()
            )));
        }
    }
    Ok(())
}

/// Weighted value and gradient of one decoder's loss terms.
#[derive(Clone, Debug)]
pub struct DecoderLoss {
    /// Weighted term values by name (`cls`, `mask`, `box`, ...).
    pub terms: BTreeMap<String, f64>,
    pub grads: PredictionGrads,
}

impl DecoderLoss {
    pub fn total(&self) -> f64 {
        self.terms.values().sum()
    }
}

fn assemble(parts: Vec<(&str, f64, Term)>, preds: &Predictions<'_>) -> DecoderLoss {
    let mut terms = BTreeMap::new();
    let mut grads = PredictionGrads::zeros_like(preds);
    for (name, weight, mut t) in parts {
        terms.insert(name.to_string(), weight * t.value);
        t.grads.scale(weight);
        grads.add(&t.grads);
    }
    DecoderLoss { terms, grads }
}

/// Thing-decoder loss: every matched pair contributes class, mask and box
/// terms; unmatched proposals are pushed towards "other".
pub fn thing_loss(
    preds: &Predictions<'_>,
    gts: &[GtTarget],
    m: &MatchResult,
    layout: &ClassLayout,
    w: &LossWeights,
) -> Result<DecoderLoss> {
    check_preds(preds, gts, m)?;
    let mut assigned: Vec<Option<&GtTarget>> = vec![None; preds.logits.rows()];
    let pairs: Vec<(usize, &GtTarget)> = m.pairs.iter().map(|&(p, g)| (p, &gts[g])).collect();
    for &(p, g) in &pairs {
        assigned[p] = Some(g);
    }
    let norm = gts.len().max(1) as f64;
    let cls = cls_term(preds, &assigned, layout, w, norm)?;
    let mask = mask_term(preds, &pairs, w)?;
    let boxed: Vec<(usize, &GtTarget)> = pairs.iter().copied().filter(|(_, g)| g.bbox.is_some()).collect();
    let bx = box_term(preds, &boxed, w)?;
    Ok(assemble(vec![("cls", w.cls, cls), ("mask", w.mask, mask), ("box", w.boxes, bx)], preds))
}

/// Stuff-decoder loss over a one-to-one match against every ground truth:
/// stuff matches train class and mask, thing matches train class and box.
pub fn stuff_loss(
    preds: &Predictions<'_>,
    gts: &[GtTarget],
    m: &MatchResult,
    layout: &ClassLayout,
    w: &LossWeights,
) -> Result<DecoderLoss> {
    check_preds(preds, gts, m)?;
    let mut assigned: Vec<Option<&GtTarget>> = vec![None; preds.logits.rows()];
    let pairs: Vec<(usize, &GtTarget)> = m.pairs.iter().map(|&(p, g)| (p, &gts[g])).collect();
    for &(p, g) in &pairs {
        assigned[p] = Some(g);
    }
    let norm = gts.len().max(1) as f64;
    let cls = cls_term(preds, &assigned, layout, w, norm)?;
    let mask_pairs: Vec<(usize, &GtTarget)> = match w.stuff_box_mode {
        StuffBoxMode::AuxiliaryThings => pairs.iter().copied().filter(|(_, g)| g.kind == GtKind::Stuff).collect(),
        StuffBoxMode::Literal => pairs.clone(),
    };
    let box_pairs: Vec<(usize, &GtTarget)> = pairs
        .iter()
        .copied()
        .filter(|(_, g)| g.kind == GtKind::Thing && g.bbox.is_some())
        .collect();
    let mask = mask_term(preds, &mask_pairs, w)?;
    let bx = box_term(preds, &box_pairs, w)?;
    Ok(assemble(
        vec![("cls", w.cls, cls), ("mask", w.mask, mask), ("box_aux", w.boxes, bx)],
        preds,
    ))
}

/// Per-term breakdown of the full loss.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub thing: f64,
    pub stuff: f64,
    pub terms: BTreeMap<String, f64>,
}

impl LossReport {
    pub fn term_sum(&self) -> f64 {
        self.terms.values().sum()
    }

    /// Adds every term of `other` under its own name.
    pub fn merge(&mut self, other: &LossReport) {
        self.total += other.total;
        self.thing += other.thing;
        self.stuff += other.stuff;
        for (k, v) in &other.terms {
            *self.terms.entry(k.clone()).or_insert(0.0) += v;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.terms.values().all(|v| v.is_finite())
    }
}

/// `L = L_thing + L_stuff`, with every weighted term listed under
/// `thing.*` / `stuff.*`.
pub fn total_loss(thing: &DecoderLoss, stuff: Option<&DecoderLoss>) -> LossReport {
    let mut terms = BTreeMap::new();
    for (k, v) in &thing.terms {
        terms.insert(format!("thing.{k}"), *v);
    }
    let l_thing = thing.total();
    let l_stuff = stuff.map_or(0.0, |s| {
        for (k, v) in &s.terms {
            terms.insert(format!("stuff.{k}"), *v);
        }
        s.total()
    });
    LossReport {
        total: l_thing + l_stuff,
        thing: l_thing,
        stuff: l_stuff,
        terms,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_scalar_fn, random_tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn focal_cases() {
        let p = Tensor::from_rows(&[vec![0.5, 0.5]]);
        let v = focal_loss(&p, &[0], 0.25, 2.0).unwrap();
        assert!((v - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-15);
        assert!((v - 0.04332).abs() < 1e-5);
        let near = Tensor::from_rows(&[vec![1.0 - 1e-12, 1e-12]]);
        assert!(focal_loss(&near, &[0], 0.25, 2.0).unwrap() < 1e-20);
        let q = Tensor::from_rows(&[vec![0.3, 0.7], vec![0.9, 0.1]]);
        let ce = (-(0.7f64.ln()) - 0.9f64.ln()) / 2.0;
        assert!((focal_loss(&q, &[1, 0], 1.0, 0.0).unwrap() - ce).abs() < 1e-15);
        assert!(focal_loss(&q, &[2, 0], 1.0, 0.0).is_err());
    }

    #[test]
    fn softmax_focal_matches_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = random_tensor(&mut rng, 3, 4, 2.0);
        let (sum, _) = softmax_focal(&logits, &[0, 3, 1], 0.25, 2.0).unwrap();
        let probs = crate::autograd::softmax_rows(&logits);
        let mean = focal_loss(&probs, &[0, 3, 1], 0.25, 2.0).unwrap();
        assert!((sum - 3.0 * mean).abs() < 1e-14);
        let err = check_scalar_fn(&logits, |x| softmax_focal(x, &[0, 3, 1], 0.25, 2.0).unwrap());
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn dice_and_bce_cases() {
        let gt = vec![true, true, false, false];
        let hard = [1.0, 1.0, 0.0, 0.0];
        assert!(dice_loss(&hard, &gt).unwrap().abs() < 1e-12);
        let comp = [0.0, 0.0, 1.0, 1.0];
        assert!((dice_loss(&comp, &gt).unwrap() - (1.0 - DICE_EPS / (4.0 + DICE_EPS))).abs() < 1e-15);
        let n = 4.0;
        let half = [0.5; 4];
        let expected = 1.0 - (n / 2.0 + DICE_EPS) / (n / 2.0 + n / 2.0 + DICE_EPS);
        assert!((dice_loss(&half, &gt).unwrap() - expected).abs() < 1e-15);
        let logits = [30.0, 30.0, -30.0, -30.0];
        assert!(bce_mask_loss(&logits, &gt).unwrap() < 1e-6);
        assert!(bce_mask_loss(&logits[..3], &gt).is_err());
    }

    #[test]
    fn box_cases() {
        let a = BBox::new(0.0, 0.0, 0.2, 0.2).unwrap();
        let b = BBox::new(0.8, 0.8, 1.0, 1.0).unwrap();
        assert_eq!(l1_box_loss(&a, &a), 0.0);
        assert!(giou_loss(&a, &a).abs() < 1e-15);
        assert!((giou(&a, &b) + 0.92).abs() < 1e-12);
        assert!((giou_loss(&a, &b) - 1.92).abs() < 1e-12);
    }

    #[test]
    fn box_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let mut corners = || {
                let (x0, x1) = (rng.gen_range(0.0..0.6), rng.gen_range(0.05..0.4));
                let (y0, y1) = (rng.gen_range(0.0..0.6), rng.gen_range(0.05..0.4));
                [x0, y0, x0 + x1, y0 + y1]
            };
            let gt = BBox::from_array(corners());
            let x = Tensor::from_vec(1, 4, corners().to_vec());
            let f = |t: &Tensor, which: u8| {
                let b = BBox::from_array([t.data()[0], t.data()[1], t.data()[2], t.data()[3]]);
                let (v, g) = if which == 0 { giou_loss_grad(&b, &gt) } else { l1_box_loss_grad(&b, &gt) };
                (v, Tensor::from_vec(1, 4, g.to_vec()))
            };
            assert!(check_scalar_fn(&x, |t| f(t, 0)) < 1e-5);
            assert!(check_scalar_fn(&x, |t| f(t, 1)) < 1e-5);
        }
    }

    #[test]
    fn hierarchical_sums_two_focals() {
        let logits = Tensor::from_rows(&[vec![0.3, -0.2, 1.1, 0.4, 0.0]]);
        let w = LossWeights::default();
        // instances at 0,1; parts at 2,3; other at 4
        let v = hierarchical_cls_loss(&logits, &[Some(3)], &[Some(0)], &[2, 3], &[0, 1], 4, &w).unwrap();
        let sub = |cols: &[usize], t: usize| {
            let t2 = Tensor::from_vec(1, cols.len(), cols.iter().map(|&c| logits.get(0, c)).collect());
            softmax_focal(&t2, &[t], w.focal_alpha, w.focal_gamma).unwrap().0
        };
        assert!((v - (sub(&[2, 3, 4], 1) + sub(&[0, 1, 4], 0))).abs() < 1e-15);
        assert!(hierarchical_cls_loss(&logits, &[Some(3)], &[None], &[2, 3], &[0, 1], 4, &w).is_err());
    }
}
