//! Panoptic quality, mIoU, COCO-style AP, overall IoU, grouped-part mIoU,
//! and the postprocessing that turns proposals into panoptic segments.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::assignment::nms;
use crate::decoders::{ProposalSet, Source};
use crate::error::{Error, Result};
use crate::geometry::{box_iou, mask_iou, mask_to_box, BBox, BinaryMask};
use crate::losses::GtKind;
use crate::openvocab::{binarize, ClassProbabilities};
use crate::synthdata::SceneSample;

pub const OTHER_LABEL: &str = "other";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub mask: BinaryMask,
    pub class: String,
    pub kind: GtKind,
    pub score: f64,
    /// Proposal the segment came from, for predictions.
    #[serde(default)]
    pub proposal: Option<usize>,
}

/// Pairwise disjoint segments covering (part of) one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanopticPrediction {
    pub height: usize,
    pub width: usize,
    pub segments: Vec<Segment>,
}

impl PanopticPrediction {
    pub fn new(height: usize, width: usize, segments: Vec<Segment>) -> Result<Self> {
        let p = Self {
            height,
            width,
            segments,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let mut covered = BinaryMask::new(self.height, self.width)?;
        for (i, s) in self.segments.iter().enumerate() {
            if s.mask.intersection_area(&covered)? != 0 {
                return Err(Error::OverlappingSegments(format!("segment {i} (`{}`) overlaps another", s.class)));
            }
            covered = covered.or(&s.mask)?;
        }
        Ok(())
    }

    /// Ground-truth segments of a scene: every instance and stuff region.
    pub fn from_scene(scene: &SceneSample) -> Self {
        let mut segments: Vec<Segment> = scene
            .instances
            .iter()
            .map(|i| Segment {
                mask: i.mask.clone(),
                class: i.class.clone(),
                kind: GtKind::Thing,
                score: 1.0,
                proposal: None,
            })
            .collect();
        segments.extend(scene.stuff.iter().map(|s| Segment {
            mask: s.mask.clone(),
            class: s.class.clone(),
            kind: GtKind::Stuff,
            score: 1.0,
            proposal: None,
        }));
        Self {
            height: scene.height(),
            width: scene.width(),
            segments,
        }
    }

    /// Class index per pixel, `None` where no segment lies.
    pub fn semantic_map(&self, classes: &[String]) -> Vec<Option<usize>> {
        let mut map = vec![None; self.height * self.width];
        for s in &self.segments {
            let Some(c) = classes.iter().position(|n| *n == s.class) else { continue };
            for (i, &b) in s.mask.data().iter().enumerate() {
                if b {
                    map[i] = Some(c);
                }
            }
        }
        map
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PqStats {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub iou_sum: f64,
}

impl PqStats {
    pub fn pq(&self) -> f64 {
        let d = self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64;
        if d == 0.0 {
            0.0
        } else {
            self.iou_sum / d
        }
    }

    pub fn sq(&self) -> f64 {
        if self.tp == 0 {
            0.0
        } else {
            self.iou_sum / self.tp as f64
        }
    }

    pub fn rq(&self) -> f64 {
        let d = self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64;
        if d == 0.0 {
            0.0
        } else {
            self.tp as f64 / d
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassPq {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PqReport {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub pq_things: f64,
    pub pq_stuff: f64,
    pub per_class: BTreeMap<String, ClassPq>,
}

/// Panoptic quality over a set of images. Same-class segments match when
/// their IoU exceeds 0.5; classes absent from both sides are excluded.
pub fn panoptic_quality(preds: &[PanopticPrediction], gts: &[PanopticPrediction]) -> Result<PqReport> {
    if preds.len() != gts.len() {
        return Err(Error::ShapeMismatch(format!("{} predictions for {} images", preds.len(), gts.len())));
    }
    let mut stats: BTreeMap<String, PqStats> = BTreeMap::new();
    let mut kinds: BTreeMap<String, GtKind> = BTreeMap::new();
    for (pred, gt) in preds.iter().zip(gts) {
        pred.validate()?;
        let ps: Vec<&Segment> = pred.segments.iter().filter(|s| s.class != OTHER_LABEL).collect();
        let gs: Vec<&Segment> = gt.segments.iter().filter(|s| s.class != OTHER_LABEL).collect();
        let mut gt_matched = vec![false; gs.len()];
        let mut pred_matched = vec![false; ps.len()];
        for (pi, p) in ps.iter().enumerate() {
            for (gi, g) in gs.iter().enumerate() {
                if gt_matched[gi] || g.class != p.class {
                    continue;
                }
                let iou = mask_iou(&p.mask, &g.mask)?;
                if iou > 0.5 {
                    gt_matched[gi] = true;
                    pred_matched[pi] = true;
                    let e = stats.entry(p.class.clone()).or_default();
                    e.tp += 1;
                    e.iou_sum += iou;
                    break;
                }
            }
        }
        for (pi, p) in ps.iter().enumerate() {
            kinds.entry(p.class.clone()).or_insert(p.kind);
            if !pred_matched[pi] {
                stats.entry(p.class.clone()).or_default().fp += 1;
            }
        }
        for (gi, g) in gs.iter().enumerate() {
            kinds.insert(g.class.clone(), g.kind);
            if !gt_matched[gi] {
                stats.entry(g.class.clone()).or_default().fn_ += 1;
            }
        }
    }
    let mut report = PqReport::default();
    let mean = |vals: Vec<f64>| {
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    let (mut pq, mut sq, mut rq, mut th, mut st) = (vec![], vec![], vec![], vec![], vec![]);
    for (class, s) in &stats {
        pq.push(s.pq());
        sq.push(s.sq());
        rq.push(s.rq());
        match kinds.get(class) {
            Some(GtKind::Stuff) => st.push(s.pq()),
            _ => th.push(s.pq()),
        }
        report.per_class.insert(
            class.clone(),
            ClassPq {
                pq: s.pq(),
                sq: s.sq(),
                rq: s.rq(),
                tp: s.tp,
                fp: s.fp,
                fn_: s.fn_,
            },
        );
    }
    if stats.is_empty() {
        // nothing to find and nothing predicted
        report.pq = 1.0;
        report.sq = 1.0;
        report.rq = 1.0;
        return Ok(report);
    }
    report.pq = mean(pq);
    report.sq = mean(sq);
    report.rq = mean(rq);
    report.pq_things = mean(th);
    report.pq_stuff = mean(st);
    Ok(report)
}

/// Per-class intersection and union pixel counts, summed over images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouAccumulator {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
}

impl IouAccumulator {
    pub fn new(num_classes: usize) -> Self {
        Self {
            intersection: vec![0; num_classes],
            union: vec![0; num_classes],
        }
    }

    pub fn add(&mut self, pred: &[Option<usize>], gt: &[Option<usize>]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::ShapeMismatch(format!("maps of {} and {} pixels", pred.len(), gt.len())));
        }
        let k = self.union.len();
        for (&p, &g) in pred.iter().zip(gt) {
            for c in [p, g].into_iter().flatten() {
                if c >= k {
                    return Err(Error::IndexOutOfRange(format!("class {c} of {k}")));
                }
            }
            match (p, g) {
                (Some(a), Some(b)) if a == b => {
                    self.intersection[a] += 1;
                    self.union[a] += 1;
                }
                _ => {
                    if let Some(a) = p {
                        self.union[a] += 1;
                    }
                    if let Some(b) = g {
                        self.union[b] += 1;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn per_class(&self) -> Vec<Option<f64>> {
        self.intersection
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| if u == 0 { None } else { Some(i as f64 / u as f64) })
            .collect()
    }

    /// Mean over classes present on either side; 1 when none are.
    pub fn mean(&self) -> f64 {
        let v: Vec<f64> = self.per_class().into_iter().flatten().collect();
        if v.is_empty() {
            1.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }
}

pub fn miou(pred: &[Option<usize>], gt: &[Option<usize>], num_classes: usize) -> Result<f64> {
    let mut acc = IouAccumulator::new(num_classes);
    acc.add(pred, gt)?;
    Ok(acc.mean())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApMode {
    Box,
    Mask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image: usize,
    pub class: String,
    pub score: f64,
    pub mask: BinaryMask,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image: usize,
    pub class: String,
    pub mask: BinaryMask,
    pub bbox: BBox,
}

impl GroundTruth {
    pub fn from_mask(image: usize, class: &str, mask: BinaryMask) -> Self {
        Self {
            image,
            class: class.to_string(),
            bbox: mask_to_box(&mask),
            mask,
        }
    }
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub ap: f64,
    pub per_class: BTreeMap<String, f64>,
    pub per_threshold: Vec<f64>,
}

fn pair_iou(d: &Detection, g: &GroundTruth, mode: ApMode) -> Result<f64> {
    match mode {
        ApMode::Box => Ok(box_iou(&d.bbox, &g.bbox)),
        ApMode::Mask => mask_iou(&d.mask, &g.mask),
    }
}

/// 101-point interpolated AP of one class at one threshold.
fn class_ap(dets: &[&Detection], gts: &[&GroundTruth], thr: f64, mode: ApMode) -> Result<f64> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(dets.len());
    let mut recall = Vec::with_capacity(dets.len());
    for (rank, &di) in order.iter().enumerate() {
        let d = dets[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if taken[gi] || g.image != d.image {
                continue;
            }
            let iou = pair_iou(d, g, mode)?;
            if iou >= thr && best.is_none_or(|(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        if let Some((gi, _)) = best {
            taken[gi] = true;
            tp += 1;
        }
        precision.push(tp as f64 / (rank + 1) as f64);
        recall.push(tp as f64 / gts.len() as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        if let Some(i) = recall.iter().position(|&x| x >= r) {
            sum += precision[i];
        }
    }
    Ok(sum / 101.0)
}

/// COCO-style AP averaged over classes with ground truth and over the
/// given IoU thresholds.
pub fn average_precision(dets: &[Detection], gts: &[GroundTruth], thresholds: &[f64], mode: ApMode) -> Result<ApReport> {
    let classes: BTreeSet<&str> = gts.iter().map(|g| g.class.as_str()).collect();
    let mut report = ApReport {
        per_threshold: vec![0.0; thresholds.len()],
        ..ApReport::default()
    };
    if classes.is_empty() || thresholds.is_empty() {
        return Ok(report);
    }
    for class in &classes {
        let cd: Vec<&Detection> = dets.iter().filter(|d| d.class == *class).collect();
        let cg: Vec<&GroundTruth> = gts.iter().filter(|g| g.class == *class).collect();
        let mut total = 0.0;
        for (t, &thr) in thresholds.iter().enumerate() {
            let ap = class_ap(&cd, &cg, thr, mode)?;
            report.per_threshold[t] += ap / classes.len() as f64;
            total += ap;
        }
        report.per_class.insert(class.to_string(), total / thresholds.len() as f64);
    }
    report.ap = report.per_class.values().sum::<f64>() / classes.len() as f64;
    Ok(report)
}

/// Total intersection over total union across all pairs.
pub fn oiou(preds: &[BinaryMask], gts: &[BinaryMask]) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::ShapeMismatch(format!("{} predictions for {} targets", preds.len(), gts.len())));
    }
    let (mut i, mut u) = (0usize, 0usize);
    for (p, g) in preds.iter().zip(gts) {
        i += p.intersection_area(g)?;
        u += p.union_area(g)?;
    }
    Ok(if u == 0 { 1.0 } else { i as f64 / u as f64 })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PartMiouReport {
    pub miou: f64,
    pub per_group: BTreeMap<String, f64>,
}

/// Named part masks of one image.
pub type PartMasks = Vec<(String, BinaryMask)>;

fn group_unions(
    parts: &PartMasks,
    part_to_group: &BTreeMap<&str, &str>,
    height: usize,
    width: usize,
) -> Result<BTreeMap<String, BinaryMask>> {
    let mut out: BTreeMap<String, BinaryMask> = BTreeMap::new();
    for (name, m) in parts {
        let g = part_to_group
            .get(name.as_str())
            .ok_or_else(|| Error::Vocabulary(format!("part `{name}` is in no group")))?;
        if m.shape() != (height, width) {
            return Err(Error::ShapeMismatch(format!("part `{name}` mask shape {:?}", m.shape())));
        }
        let entry = out.entry(g.to_string()).or_insert(BinaryMask::new(height, width)?);
        *entry = entry.or(m)?;
    }
    Ok(out)
}

/// mIoU over part groups: part masks are unioned per group in each image,
/// intersections and unions are summed over images.
pub fn miou_parts(
    preds: &[PartMasks],
    gts: &[PartMasks],
    grouping: &BTreeMap<String, Vec<String>>,
    height: usize,
    width: usize,
) -> Result<PartMiouReport> {
    if preds.len() != gts.len() {
        return Err(Error::ShapeMismatch(format!("{} predictions for {} images", preds.len(), gts.len())));
    }
    let mut p2g: BTreeMap<&str, &str> = BTreeMap::new();
    for (g, parts) in grouping {
        for p in parts {
            p2g.insert(p.as_str(), g.as_str());
        }
    }
    let mut inter: BTreeMap<String, usize> = BTreeMap::new();
    let mut union: BTreeMap<String, usize> = BTreeMap::new();
    for (p, g) in preds.iter().zip(gts) {
        let pu = group_unions(p, &p2g, height, width)?;
        let gu = group_unions(g, &p2g, height, width)?;
        for group in grouping.keys() {
            let (a, b) = (pu.get(group), gu.get(group));
            let (i, u) = match (a, b) {
                (Some(a), Some(b)) => (a.intersection_area(b)?, a.union_area(b)?),
                (Some(a), None) => (0, a.area()),
                (None, Some(b)) => (0, b.area()),
                (None, None) => (0, 0),
            };
            *inter.entry(group.clone()).or_insert(0) += i;
            *union.entry(group.clone()).or_insert(0) += u;
        }
    }
    let mut report = PartMiouReport::default();
    for (group, &u) in &union {
        if u > 0 {
            report.per_group.insert(group.clone(), inter[group] as f64 / u as f64);
        }
    }
    report.miou = if report.per_group.is_empty() {
        1.0
    } else {
        report.per_group.values().sum::<f64>() / report.per_group.len() as f64
    };
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostprocessConfig {
    pub score_threshold: f64,
    pub mask_threshold: f64,
    pub overlap_keep: f64,
    pub nms_iou: f64,
    /// Cap on (proposal, class) detections kept per image for AP.
    pub max_detections: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.25,
            mask_threshold: 0.5,
            overlap_keep: 0.8,
            nms_iou: 0.5,
            max_detections: 100,
        }
    }
}

struct Candidate {
    index: usize,
    class: usize,
    score: f64,
    mask: BinaryMask,
}

/// Scored, kind-consistent candidates after per-class NMS on thing boxes:
/// the best class of each proposal, or with `every_class` one candidate per
/// (proposal, class) pair.
fn candidates(
    props: &ProposalSet,
    probs: &ClassProbabilities,
    kinds: &[GtKind],
    cfg: &PostprocessConfig,
    every_class: bool,
) -> Result<Vec<Candidate>> {
    if kinds.len() != probs.classes.len() || probs.p_final.rows() != props.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} kinds for {} classes, {} probability rows for {} proposals",
            kinds.len(),
            probs.classes.len(),
            probs.p_final.rows(),
            props.len()
        )));
    }
    let mut cands = Vec::new();
    for i in 0..props.len() {
        let scored: Vec<(usize, f64)> = if every_class {
            let keep = 1.0 - probs.other[i];
            probs.p_final.row(i).iter().enumerate().map(|(c, &p)| (c, p * keep)).collect()
        } else {
            vec![probs.best(i)]
        };
        let mut mask = None;
        for (c, score) in scored {
            if score < cfg.score_threshold {
                continue;
            }
            let compatible = match props.sources[i] {
                Source::Thing => kinds[c] == GtKind::Thing,
                Source::Stuff => kinds[c] == GtKind::Stuff,
                Source::Unified => true,
            };
            if !compatible {
                continue;
            }
            let mask = mask.get_or_insert_with(|| binarize(props, i, cfg.mask_threshold));
            if mask.area() == 0 {
                continue;
            }
            cands.push(Candidate {
                index: i,
                class: c,
                score,
                mask: mask.clone(),
            });
        }
    }
    // per-class NMS on thing boxes
    let mut keep = vec![true; cands.len()];
    for c in 0..kinds.len() {
        if kinds[c] != GtKind::Thing {
            continue;
        }
        let idx: Vec<usize> = (0..cands.len()).filter(|&k| cands[k].class == c).collect();
        let boxes: Vec<BBox> = idx.iter().map(|&k| props.boxes[cands[k].index]).collect();
        let scores: Vec<f64> = idx.iter().map(|&k| cands[k].score).collect();
        let kept: BTreeSet<usize> = nms(&boxes, &scores, cfg.nms_iou)?.into_iter().collect();
        for (j, &k) in idx.iter().enumerate() {
            if !kept.contains(&j) {
                keep[k] = false;
            }
        }
    }
    Ok(cands
        .into_iter()
        .zip(keep)
        .filter_map(|(c, k)| k.then_some(c))
        .collect())
}

/// Binarize, threshold, suppress duplicates, then paint segments in
/// descending score order; a segment survives when it keeps at least
/// `overlap_keep` of its area. Stuff segments of one class are merged.
pub fn panoptic_postprocess(
    props: &ProposalSet,
    probs: &ClassProbabilities,
    kinds: &[GtKind],
    cfg: &PostprocessConfig,
) -> Result<PanopticPrediction> {
    let mut cands = candidates(props, probs, kinds, cfg, false)?;
    cands.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.index.cmp(&b.index)));
    let (h, w) = (props.mask_height, props.mask_width);
    let mut owned = BinaryMask::new(h, w)?;
    let mut segments: Vec<Segment> = Vec::new();
    for c in cands {
        let free = c.mask.and_not(&owned)?;
        if (free.area() as f64) < cfg.overlap_keep * c.mask.area() as f64 || free.area() == 0 {
            continue;
        }
        owned = owned.or(&free)?;
        let class = probs.classes[c.class].clone();
        let kind = kinds[c.class];
        if kind == GtKind::Stuff {
            if let Some(s) = segments.iter_mut().find(|s| s.class == class && s.kind == GtKind::Stuff) {
                s.mask = s.mask.or(&free)?;
                continue;
            }
        }
        segments.push(Segment {
            mask: free,
            class,
            kind,
            score: c.score,
            proposal: Some(c.index),
        });
    }
    PanopticPrediction::new(h, w, segments)
}

/// Scored thing detections for AP: every (proposal, thing class) pair,
/// per-class NMS, then the `max_detections` best.
pub fn instance_detections(
    props: &ProposalSet,
    probs: &ClassProbabilities,
    kinds: &[GtKind],
    image: usize,
    cfg: &PostprocessConfig,
) -> Result<Vec<Detection>> {
    let relaxed = PostprocessConfig {
        score_threshold: 0.0,
        ..cfg.clone()
    };
    let (h, w) = (props.mask_height as f64, props.mask_width as f64);
    let mut cands: Vec<Candidate> = candidates(props, probs, kinds, &relaxed, true)?
        .into_iter()
        .filter(|c| kinds[c.class] == GtKind::Thing)
        .collect();
    cands.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.index.cmp(&b.index)).then(a.class.cmp(&b.class)));
    cands.truncate(cfg.max_detections);
    Ok(cands
        .into_iter()
        .map(|c| Detection {
            image,
            class: probs.classes[c.class].clone(),
            score: c.score,
            bbox: props.boxes[c.index].scale(w, h),
            mask: c.mask,
        })
        .collect())
}
