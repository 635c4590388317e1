//! Proposal to ground-truth matching: one-to-one Hungarian, many-to-one
//! simOTA, greedy NMS, and matching-cost construction.

use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, softmax_in_place};
use crate::error::{Error, Result};
use crate::geometry::{box_iou, BBox};
use crate::losses::{bce_mask_loss, dice_loss, giou_loss, l1_box_loss, GtKind, GtTarget, LossWeights};
use crate::tensor::Tensor;

pub const SIMOTA_TOPQ: usize = 10;
const TIE_TOL: f64 = 1e-9;

/// Proposal-by-ground-truth costs with the per-component breakdown.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostMatrix {
    pub total: Tensor,
    pub class: Tensor,
    pub boxes: Tensor,
    pub mask: Tensor,
    /// Amount added to `total` to make every entry non-negative.
    pub offset: f64,
}

impl CostMatrix {
    pub fn from_total(total: Tensor) -> Result<Self> {
        if !total.is_finite() {
            return Err(Error::InvalidArgument("cost matrix has non-finite entries".into()));
        }
        let (r, c) = total.shape();
        let min = total.data().iter().copied().fold(f64::INFINITY, f64::min);
        Ok(Self {
            class: total.clone(),
            boxes: Tensor::zeros(r, c),
            mask: Tensor::zeros(r, c),
            offset: if min.is_finite() && min < 0.0 { -min } else { 0.0 },
            total,
        })
    }

    pub fn rows(&self) -> usize {
        self.total.rows()
    }

    pub fn cols(&self) -> usize {
        self.total.cols()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.total.get(r, c)
    }

    /// `total + offset`, every entry non-negative.
    pub fn shifted(&self) -> Tensor {
        self.total.map(|v| v + self.offset)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(proposal, gt)` pairs sorted by proposal index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_proposals: Vec<usize>,
    /// Number of proposals assigned to each gt.
    pub multiplicity: Vec<usize>,
}

impl MatchResult {
    fn from_pairs(mut pairs: Vec<(usize, usize)>, rows: usize, cols: usize) -> Self {
        pairs.sort_unstable();
        let mut matched = vec![false; rows];
        let mut multiplicity = vec![0; cols];
        for &(p, g) in &pairs {
            matched[p] = true;
            multiplicity[g] += 1;
        }
        Self {
            unmatched_proposals: (0..rows).filter(|&r| !matched[r]).collect(),
            pairs,
            multiplicity,
        }
    }

    pub fn total_cost(&self, cost: &CostMatrix) -> f64 {
        self.pairs.iter().map(|&(r, c)| cost.get(r, c)).sum()
    }

    pub fn gt_of(&self, proposal: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == proposal).map(|p| p.1)
    }
}

/// Minimum-cost assignment of every row to a distinct column, `rows <=
/// cols`, via shortest augmenting paths with potentials.
fn assign_rows(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    // 1-based arrays, column 0 is the virtual start
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Optimal pairs over the given row and column subsets.
fn solve_subset(cost: &Tensor, rows: &[usize], cols: &[usize]) -> (f64, Vec<(usize, usize)>) {
    if rows.is_empty() || cols.is_empty() {
        return (0.0, Vec::new());
    }
    let pairs: Vec<(usize, usize)> = if rows.len() <= cols.len() {
        let sub: Vec<Vec<f64>> = rows.iter().map(|&r| cols.iter().map(|&c| cost.get(r, c)).collect()).collect();
        assign_rows(&sub)
            .into_iter()
            .enumerate()
            .map(|(i, j)| (rows[i], cols[j]))
            .collect()
    } else {
        let sub: Vec<Vec<f64>> = cols.iter().map(|&c| rows.iter().map(|&r| cost.get(r, c)).collect()).collect();
        assign_rows(&sub)
            .into_iter()
            .enumerate()
            .map(|(j, i)| (rows[i], cols[j]))
            .collect()
    };
    let total = pairs.iter().map(|&(r, c)| cost.get(r, c)).sum();
    (total, pairs)
}

fn same_cost(a: f64, b: f64) -> bool {
    (a - b).abs() <= TIE_TOL * (1.0 + a.abs().max(b.abs()))
}

/// One-to-one minimum-cost matching over `min(rows, cols)` pairs. Among
/// optimal assignments the lexicographically smallest `(row, col)` list wins.
pub fn hungarian(cost: &CostMatrix) -> MatchResult {
    let (n, m) = (cost.rows(), cost.cols());
    if n == 0 || m == 0 {
        return MatchResult::from_pairs(Vec::new(), n, m);
    }
    let c = &cost.total;
    let all_rows: Vec<usize> = (0..n).collect();
    let all_cols: Vec<usize> = (0..m).collect();
    let (opt, _) = solve_subset(c, &all_rows, &all_cols);
    let need = n.min(m);

    // fix rows in order, each to its smallest column that keeps the optimum
    let mut fixed: Vec<(usize, usize)> = Vec::new();
    let mut fixed_cost = 0.0;
    let mut col_used = vec![false; m];
    let mut decided = vec![false; n];
    for r in 0..n {
        if fixed.len() == need {
            break;
        }
        decided[r] = true;
        let rest_rows: Vec<usize> = (0..n).filter(|&i| !decided[i]).collect();
        let mut chosen = None;
        for col in 0..m {
            if col_used[col] {
                continue;
            }
            let rest_cols: Vec<usize> = (0..m).filter(|&j| !col_used[j] && j != col).collect();
            let required = need - fixed.len() - 1;
            if rest_rows.len().min(rest_cols.len()) < required {
                continue;
            }
            let (sub, _) = solve_subset(c, &rest_rows, &rest_cols);
            if same_cost(fixed_cost + c.get(r, col) + sub, opt) {
                chosen = Some(col);
                break;
            }
        }
        if let Some(col) = chosen {
            fixed.push((r, col));
            fixed_cost += c.get(r, col);
            col_used[col] = true;
        }
    }
    MatchResult::from_pairs(fixed, n, m)
}

/// Slack absorbing summation rounding before the floor.
const DYNAMIC_K_EPS: f64 = 1e-9;

/// The dynamic budget of one ground truth: `max(1, floor(sum of its top-q
/// IoUs))`, capped by the number of proposals.
pub fn dynamic_k(ious_to_gt: &[f64], q: usize) -> usize {
    let mut v: Vec<f64> = ious_to_gt.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    let s: f64 = v.iter().take(q).sum();
    ((s + DYNAMIC_K_EPS).floor() as usize).max(1).min(ious_to_gt.len().max(1))
}

/// Many-to-one assignment: each gt takes its `dynamic_k` cheapest
/// proposals; contested proposals stay with their cheapest gt; gts left
/// empty then take their cheapest proposal that can be spared.
pub fn simota(cost: &CostMatrix, ious: &Tensor, q: usize) -> Result<MatchResult> {
    let (n, m) = (cost.rows(), cost.cols());
    if ious.shape() != (n, m) {
        return Err(Error::ShapeMismatch(format!(
            "cost {n}x{m} vs iou {}x{}",
            ious.rows(),
            ious.cols()
        )));
    }
    if n == 0 || m == 0 {
        return Ok(MatchResult::from_pairs(Vec::new(), n, m));
    }
    let c = &cost.total;
    let order_for = |g: usize| {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| c.get(a, g).total_cmp(&c.get(b, g)).then(a.cmp(&b)));
        idx
    };
    let mut owner: Vec<Option<usize>> = vec![None; n];
    for g in 0..m {
        let col: Vec<f64> = (0..n).map(|r| ious.get(r, g)).collect();
        let k = dynamic_k(&col, q);
        for &p in order_for(g).iter().take(k) {
            owner[p] = match owner[p] {
                Some(h) if c.get(p, h) <= c.get(p, g) => Some(h),
                _ => Some(g),
            };
        }
    }
    if n >= m {
        loop {
            let mut counts = vec![0usize; m];
            for g in owner.iter().flatten() {
                counts[*g] += 1;
            }
            let Some(empty) = (0..m).find(|&g| counts[g] == 0) else { break };
            let pick = order_for(empty)
                .into_iter()
                .find(|&p| owner[p].is_none_or(|h| counts[h] > 1))
                .expect("a spare proposal exists when proposals outnumber gts");
            owner[pick] = Some(empty);
        }
    }
    let pairs = owner
        .iter()
        .enumerate()
        .filter_map(|(p, g)| g.map(|g| (p, g)))
        .collect();
    Ok(MatchResult::from_pairs(pairs, n, m))
}

/// Greedy suppression in descending score order (index order on ties).
pub fn nms(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Result<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} boxes, {} scores",
            boxes.len(),
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| box_iou(&boxes[i], &boxes[k]) <= iou_threshold) {
            kept.push(i);
        }
    }
    Ok(kept)
}

/// Matching cost between proposals and targets, reusing the loss weights:
/// `-λ_cls p(class) + λ_box (λ_L1 L1 + λ_giou (1 - GIoU)) + λ_mask (λ_ce BCE +
/// λ_dice DICE)`. Stuff targets carry no box term.
pub fn build_cost(
    logits: &Tensor,
    masks: &Tensor,
    boxes: &[BBox],
    gts: &[GtTarget],
    w: &LossWeights,
) -> Result<CostMatrix> {
    let n = logits.rows();
    if masks.rows() != n || boxes.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{n} logit rows, {} masks, {} boxes",
            masks.rows(),
            boxes.len()
        )));
    }
    let m = gts.len();
    let mut class = Tensor::zeros(n, m);
    let mut bx = Tensor::zeros(n, m);
    let mut mk = Tensor::zeros(n, m);
    let probs: Vec<f64> = masks.data().iter().map(|&x| sigmoid(x)).collect();
    let hw = masks.cols();
    for gt in gts {
        if gt.mask.len() != hw {
            return Err(Error::ShapeMismatch(format!("gt mask {} pixels, proposals {hw}", gt.mask.len())));
        }
        if gt.class >= logits.cols() {
            return Err(Error::IndexOutOfRange(format!("gt class {} of {}", gt.class, logits.cols())));
        }
    }
    for i in 0..n {
        let mut p = logits.row(i).to_vec();
        softmax_in_place(&mut p);
        let mlog = masks.row(i);
        let mprob = &probs[i * hw..(i + 1) * hw];
        for (g, gt) in gts.iter().enumerate() {
            let pc = match gt.instance_class {
                Some(inst) => 0.5 * (p[gt.class] + p[inst]),
                None => p[gt.class],
            };
            class.set(i, g, -w.cls * pc);
            if let (GtKind::Thing, Some(b)) = (gt.kind, gt.bbox) {
                bx.set(i, g, w.boxes * (w.l1 * l1_box_loss(&boxes[i], &b) + w.giou * giou_loss(&boxes[i], &b)));
            }
            let bce = bce_mask_loss(mlog, &gt.mask)?;
            let dice = dice_loss(mprob, &gt.mask)?;
            mk.set(i, g, w.mask * (w.ce * bce + w.dice * dice));
        }
    }
    let mut total = class.clone();
    total.add_assign(&bx);
    total.add_assign(&mk);
    let mut cm = CostMatrix::from_total(total)?;
    cm.class = class;
    cm.boxes = bx;
    cm.mask = mk;
    Ok(cm)
}

/// Box IoU between every proposal and every target (0 for stuff).
pub fn iou_matrix(boxes: &[BBox], gts: &[GtTarget]) -> Tensor {
    let mut t = Tensor::zeros(boxes.len(), gts.len());
    for (i, b) in boxes.iter().enumerate() {
        for (g, gt) in gts.iter().enumerate() {
            if let Some(gb) = gt.bbox {
                t.set(i, g, box_iou(b, &gb));
            }
        }
    }
    t
}
