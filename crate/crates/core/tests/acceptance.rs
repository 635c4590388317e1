//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run a subset with `OVSEG_ACCEPTANCE=1,2,8 cargo test --test acceptance`.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ovseg::assignment::{build_cost, dynamic_k, hungarian, iou_matrix, simota, CostMatrix, SIMOTA_TOPQ};
use ovseg::autograd::Graph;
use ovseg::decoders::{class_logits_var, Source};
use ovseg::fusion::FusionBlock;
use ovseg::gradcheck::{check_graph_fn, check_param_fn, check_scalar_fn, random_tensor};
use ovseg::losses::{
    bce_mask_loss_grad, dice_loss_grad, dice_loss_logits, focal_loss_grad, giou_loss_grad, l1_box_loss_grad,
    softmax_focal, stuff_loss, thing_loss, total_loss, ClassLayout, GtKind, GtTarget, LossWeights, Predictions,
    FOCAL_ALPHA, FOCAL_GAMMA,
};
use ovseg::metrics::{
    average_precision, coco_thresholds, miou, miou_parts, oiou, panoptic_quality, ApMode, Detection, GroundTruth,
    PartMasks, PanopticPrediction, Segment,
};
use ovseg::nn::ParamStore;
use ovseg::openvocab::{combine_logits, random_distribution, relabel_external_parts, PartRelabelInput};
use ovseg::pipeline::{build_model, evaluation_data, train, training_data, Engine, Trained};
use ovseg::prompts::build_category_prompt;
use ovseg::synthdata::{generate_scenes, GeneratorConfig};
use ovseg::{
    box_iou, mask_to_box, rle_decode, rle_encode, BBox, BinaryMask, Checkpoint, Metric, Query, RunConfig, Task, Tensor,
    Variant,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const HUNGARIAN_TRIALS: usize = 200;
const HUNGARIAN_MAX_SIZE: usize = 7;
const HUNGARIAN_TIME_LIMIT: Duration = Duration::from_secs(10);
const SIMOTA_TRIALS: usize = 500;
const GRADCHECK_TRIALS: usize = 100;
const GRADCHECK_TOL: f64 = 1e-4;
const LEDGER_TOL: f64 = 1e-9;
const MIX_TOL: f64 = 1e-9;
const ROW_SUM_TOL: f64 = 1e-9;
const RELABEL_TRIALS: usize = 100;
const WIRING_SCENES: usize = 20;
const METRIC_TRIALS: usize = 300;

const OVERFIT_SCENES: usize = 20;
const OVERFIT_ITERATIONS: usize = 2000;
const OVERFIT_BATCH: usize = 4;
const OVERFIT_LR: f64 = 1e-3;
const OVERFIT_PQ: f64 = 0.80;
const OVERFIT_OIOU: f64 = 0.80;
const OVERFIT_PART_MIOU: f64 = 0.70;
const OVERFIT_TIME_LIMIT: Duration = Duration::from_secs(30 * 60);

const ABLATION_SCENES: usize = 200;
const ABLATION_EVAL_SCENES: usize = 50;
const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];
const ABLATION_ITERATIONS: usize = 400;

const NOVEL_CLASS: &str = "blue disk";
const NOVEL_LAMBDA: f64 = 0.45;
const NOVEL_TRAIN_SCENES: usize = 60;
const NOVEL_EVAL_SCENES: usize = 40;
const NOVEL_ITERATIONS: usize = 500;
const RANDOM_BASELINE_DRAWS: usize = 50;

const RLE_TRIALS: usize = 1000;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- 1

fn brute_force_min(c: &Tensor) -> f64 {
    fn rec(c: &Tensor, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == c.rows() {
            if acc < *best {
                *best = acc;
            }
            return;
        }
        for col in 0..c.cols() {
            if !used[col] {
                used[col] = true;
                rec(c, row + 1, used, acc + c.get(row, col), best);
                used[col] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(c, 0, &mut vec![false; c.cols()], 0.0, &mut best);
    best
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    let mut mismatches = 0;
    for n in 1..=HUNGARIAN_MAX_SIZE {
        for _ in 0..HUNGARIAN_TRIALS {
            let t = random_tensor(&mut rng, n, n, 10.0);
            let cm = CostMatrix::from_total(t.clone()).unwrap();
            let m = hungarian(&cm);
            if m.pairs.len() != n || m.total_cost(&cm) != brute_force_min(&t) {
                mismatches += 1;
            }
        }
    }
    let took = start.elapsed();
    outcome(
        mismatches == 0 && took < HUNGARIAN_TIME_LIMIT,
        format!(
            "Hungarian equals exhaustive optimum on {} matrices (sizes 1..={HUNGARIAN_MAX_SIZE}), {mismatches} mismatches, {took:.2?}",
            HUNGARIAN_TRIALS * HUNGARIAN_MAX_SIZE
        ),
    )
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut violations = Vec::new();
    for trial in 0..SIMOTA_TRIALS {
        let n = rng.gen_range(1..=30);
        let m = rng.gen_range(1..=10);
        let cost = CostMatrix::from_total(random_tensor(&mut rng, n, m, 5.0)).unwrap();
        let ious = Tensor::from_vec(n, m, (0..n * m).map(|_| rng.gen_range(0.0..1.0)).collect());
        let r = simota(&cost, &ious, SIMOTA_TOPQ).unwrap();
        let mut seen = BTreeSet::new();
        if !r.pairs.iter().all(|&(p, _)| seen.insert(p)) {
            violations.push(format!("trial {trial}: proposal assigned twice"));
        }
        if n >= m {
            for g in 0..m {
                if !r.pairs.iter().any(|&(_, h)| h == g) {
                    violations.push(format!("trial {trial}: gt {g} empty"));
                }
            }
        }
    }
    // (ious, q, k) worked by hand: k = max(1, floor(sum of the q largest))
    let cases: [(&[f64], usize, usize); 20] = [
        (&[0.9, 0.8, 0.7], 10, 2),
        (&[0.9, 0.8, 0.7], 1, 1),
        (&[0.9, 0.8, 0.7], 2, 1),
        (&[0.1, 0.2, 0.3], 10, 1),
        (&[0.0, 0.0], 10, 1),
        (&[1.0, 1.0, 1.0, 1.0], 10, 4),
        (&[1.0, 1.0, 1.0, 1.0], 3, 3),
        (&[0.5; 10], 10, 5),
        (&[0.5; 12], 10, 5),
        (&[0.99; 12], 10, 9),
        (&[0.6, 0.6, 0.6, 0.6, 0.6], 10, 3),
        (&[0.6, 0.6, 0.6, 0.6, 0.6], 4, 2),
        (&[0.95, 0.05], 10, 1),
        (&[0.7, 0.3, 0.0, 0.9], 10, 1),
        (&[0.7, 0.35, 0.0, 0.9], 10, 1),
        (&[0.75, 0.5, 0.25, 0.9, 0.6], 10, 3),
        (&[0.75, 0.5, 0.25, 0.9, 0.6], 2, 1),
        (&[0.8; 20], 10, 8),
        (&[1.0], 10, 1),
        (&[0.4, 0.4, 0.4], 10, 1),
    ];
    let mut wrong = 0;
    for (ious, q, k) in cases {
        if dynamic_k(ious, q) != k {
            wrong += 1;
            violations.push(format!("dynamic_k({ious:?}, {q}) = {} != {k}", dynamic_k(ious, q)));
        }
    }
    outcome(
        violations.is_empty(),
        format!(
            "simOTA: {SIMOTA_TRIALS} random instances, one gt per proposal, no empty gt; dynamic-k {}/20 hand cases{}",
            20 - wrong,
            if violations.is_empty() { String::new() } else { format!(" ({})", violations[..violations.len().min(3)].join("; ")) }
        ),
    )
}

// ---------------------------------------------------------------- 3

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let x0 = rng.gen_range(0.0..0.6);
    let y0 = rng.gen_range(0.0..0.6);
    BBox::from_array([x0, y0, x0 + rng.gen_range(0.1..0.4), y0 + rng.gen_range(0.1..0.4)])
}

fn box_tensor(b: &BBox) -> Tensor {
    Tensor::from_vec(1, 4, b.to_array().to_vec())
}

fn tensor_box(t: &Tensor) -> BBox {
    let d = t.data();
    BBox::from_array([d[0], d[1], d[2], d[3]])
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |name: &'static str, e: f64| {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(if e.is_nan() { f64::INFINITY } else { e });
    };
    for _ in 0..GRADCHECK_TRIALS {
        let n = rng.gen_range(1..5);
        let c = rng.gen_range(2..6);
        let targets: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let probs = Tensor::from_vec(n, c, (0..n * c).map(|_| rng.gen_range(0.05..0.95)).collect());
        note(
            "focal",
            check_scalar_fn(&probs, |p| focal_loss_grad(p, &targets, FOCAL_ALPHA, FOCAL_GAMMA).unwrap()),
        );
        let logits = random_tensor(&mut rng, n, c, 3.0);
        note(
            "focal(softmax)",
            check_scalar_fn(&logits, |l| softmax_focal(l, &targets, FOCAL_ALPHA, FOCAL_GAMMA).unwrap()),
        );

        let hw = rng.gen_range(2..20);
        let gt: Vec<bool> = (0..hw).map(|_| rng.gen_bool(0.5)).collect();
        let ml = random_tensor(&mut rng, 1, hw, 4.0);
        note(
            "bce_mask",
            check_scalar_fn(&ml, |x| {
                let (v, g) = bce_mask_loss_grad(x.data(), &gt).unwrap();
                (v, Tensor::from_vec(1, g.len(), g))
            }),
        );
        note(
            "dice(logits)",
            check_scalar_fn(&ml, |x| {
                let (v, g) = dice_loss_logits(x.data(), &gt).unwrap();
                (v, Tensor::from_vec(1, g.len(), g))
            }),
        );
        let mp = Tensor::from_vec(1, hw, (0..hw).map(|_| rng.gen_range(0.05..0.95)).collect());
        note(
            "dice(probs)",
            check_scalar_fn(&mp, |x| {
                let (v, g) = dice_loss_grad(x.data(), &gt).unwrap();
                (v, Tensor::from_vec(1, g.len(), g))
            }),
        );

        let pb = random_box(&mut rng);
        let gb = random_box(&mut rng);
        note(
            "l1_box",
            check_scalar_fn(&box_tensor(&pb), |t| {
                let (v, g) = l1_box_loss_grad(&tensor_box(t), &gb);
                (v, Tensor::from_vec(1, 4, g.to_vec()))
            }),
        );
        note(
            "giou",
            check_scalar_fn(&box_tensor(&pb), |t| {
                let (v, g) = giou_loss_grad(&tensor_box(t), &gb);
                (v, Tensor::from_vec(1, 4, g.to_vec()))
            }),
        );

        let d = 4;
        let heads = if rng.gen_bool(0.5) { 1 } else { 2 };
        let mut store = ParamStore::new();
        let block = FusionBlock::new(&mut store, &mut rng, "fusion", d, heads);
        let (nv, nt) = (rng.gen_range(2..6), rng.gen_range(1..5));
        let visual = random_tensor(&mut rng, nv, d, 1.0);
        let text = random_tensor(&mut rng, nt, d, 1.0);
        let wv = random_tensor(&mut rng, visual.rows(), d, 1.0);
        let wt = random_tensor(&mut rng, text.rows(), d, 1.0);
        let readout = |g: &mut Graph, s: &ParamStore, v, t| {
            let f = block.fuse(g, s, v, t).unwrap();
            let a = g.constant(wv.clone());
            let b = g.constant(wt.clone());
            let x = g.mul(f.visual, a);
            let y = g.mul(f.text, b);
            let x = g.sum(x);
            let y = g.sum(y);
            g.add(x, y)
        };
        note(
            "fusion(params)",
            check_param_fn(&store, &|g, s| {
                let v = g.constant(visual.clone());
                let t = g.constant(text.clone());
                readout(g, s, v, t)
            }),
        );
        note(
            "fusion(inputs)",
            check_graph_fn(&[visual.clone(), text.clone()], &|g, ins| readout(g, &store, ins[0], ins[1])),
        );

        let k = rng.gen_range(1..5);
        let e = random_tensor(&mut rng, n, d, 1.0);
        let cls = random_tensor(&mut rng, k, d, 1.0);
        let other = random_tensor(&mut rng, 1, d, 1.0);
        let w = random_tensor(&mut rng, n, k + 1, 1.0);
        note(
            "class_logits",
            check_graph_fn(&[e, cls, other], &|g, ins| {
                let l = class_logits_var(g, ins[0], ins[1], ins[2], 0.07);
                let wc = g.constant(w.clone());
                let p = g.mul(l, wc);
                g.sum(p)
            }),
        );
    }
    let pass = worst.values().all(|&e| e < GRADCHECK_TOL);
    let parts: Vec<String> = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    outcome(
        pass,
        format!("gradient checks, {GRADCHECK_TRIALS} trials each, worst relative error: {}", parts.join(", ")),
    )
}

// ---------------------------------------------------------------- 4

fn random_gts(rng: &mut ChaCha8Rng, k: usize, classes: usize, hw: usize) -> Vec<GtTarget> {
    (0..k)
        .map(|_| {
            let thing = rng.gen_bool(0.6);
            GtTarget {
                class: rng.gen_range(0..classes),
                instance_class: None,
                kind: if thing { GtKind::Thing } else { GtKind::Stuff },
                mask: (0..hw).map(|_| rng.gen_bool(0.4)).collect(),
                bbox: thing.then(|| random_box(rng)),
            }
        })
        .collect()
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = LossWeights::default();
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let classes = rng.gen_range(2..6);
        let hw = rng.gen_range(4..30);
        let count = rng.gen_range(0..5);
        let gts = random_gts(&mut rng, count, classes, hw);
        let things: Vec<GtTarget> = gts.iter().filter(|g| g.kind == GtKind::Thing).cloned().collect();
        let layout = ClassLayout::Flat { other: classes };
        let mut losses = Vec::new();
        for (n, targets, one_to_one) in [(rng.gen_range(3..10), &things, false), (rng.gen_range(5..10), &gts, true)] {
            let logits = random_tensor(&mut rng, n, classes + 1, 2.0);
            let masks = random_tensor(&mut rng, n, hw, 3.0);
            let boxes: Vec<BBox> = (0..n).map(|_| random_box(&mut rng)).collect();
            let bt = Tensor::from_rows(&boxes.iter().map(|b| b.to_array().to_vec()).collect::<Vec<_>>());
            let preds = Predictions {
                logits: &logits,
                masks: &masks,
                boxes: &bt,
            };
            let cost = build_cost(&logits, &masks, &boxes, targets, &w).unwrap();
            let loss = if one_to_one {
                stuff_loss(&preds, targets, &hungarian(&cost), &layout, &w).unwrap()
            } else {
                let m = simota(&cost, &iou_matrix(&boxes, targets), SIMOTA_TOPQ).unwrap();
                thing_loss(&preds, targets, &m, &layout, &w).unwrap()
            };
            losses.push(loss);
        }
        let report = total_loss(&losses[0], Some(&losses[1]));
        let split = (report.total - (losses[0].total() + losses[1].total())).abs();
        let terms = (report.total - report.term_sum()).abs();
        let scale = report.total.abs().max(1.0);
        worst = worst.max(split / scale).max(terms / scale);
        if (report.thing - losses[0].total()).abs() > LEDGER_TOL * scale {
            worst = f64::INFINITY;
        }
    }
    outcome(
        worst <= LEDGER_TOL,
        format!("L = L_thing + L_stuff = sum of weighted terms on 100 random batches, worst relative gap {worst:.1e}"),
    )
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let k = rng.gen_range(2..8);
        let rows: Vec<Vec<f64>> = (0..3).map(|_| random_distribution(&mut rng, k)).collect();
        let p1 = Tensor::from_rows(&rows);
        let rows: Vec<Vec<f64>> = (0..3).map(|_| random_distribution(&mut rng, k)).collect();
        let p2 = Tensor::from_rows(&rows);
        worst = worst
            .max(combine_logits(&p1, &p2, 0.0).unwrap().max_abs_diff(&p1))
            .max(combine_logits(&p1, &p2, 1.0).unwrap().max_abs_diff(&p2));
    }
    let p1 = Tensor::from_rows(&[vec![0.8, 0.2], vec![0.3, 0.7]]);
    let p2 = Tensor::from_rows(&[vec![0.2, 0.8], vec![0.7, 0.3]]);
    let mid = combine_logits(&p1, &p2, 0.5).unwrap();
    let uniform = mid.data().iter().all(|&v| v == 0.5);
    outcome(
        worst <= MIX_TOL && uniform,
        format!("geometric mix endpoints within {worst:.1e}; mirrored distributions at 0.5 give exactly uniform: {uniform}"),
    )
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Outcome {
    let m = |cells: &[(usize, usize)]| BinaryMask::from_fn(2, 4, |r, c| cells.contains(&(r, c))).unwrap();
    let hand = relabel_external_parts(&PartRelabelInput {
        semantic_masks: vec![m(&[(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)]), m(&[(0, 3), (1, 3)])],
        semantic_probs: Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]),
        part_masks: vec![m(&[(0, 0), (0, 1), (0, 2), (0, 3)])],
    })
    .unwrap();
    let exact = hand.probs.row(0) == [0.75, 0.25];
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for _ in 0..RELABEL_TRIALS {
        let (h, w) = (rng.gen_range(1..10), rng.gen_range(1..10));
        let k = rng.gen_range(1..5);
        let j = rng.gen_range(2..6);
        let rand_mask = |rng: &mut ChaCha8Rng| {
            let p = rng.gen_range(0.0..0.8);
            BinaryMask::from_fn(h, w, |_, _| false).map(|mut b| {
                for r in 0..h {
                    for c in 0..w {
                        b.set(r, c, rng.gen_bool(p));
                    }
                }
                b
            })
        };
        let semantic_masks: Vec<BinaryMask> = (0..k).map(|_| rand_mask(&mut rng).unwrap()).collect();
        let rows: Vec<Vec<f64>> = (0..k).map(|_| random_distribution(&mut rng, j)).collect();
        let part_masks: Vec<BinaryMask> = (0..rng.gen_range(1..6)).map(|_| rand_mask(&mut rng).unwrap()).collect();
        let r = relabel_external_parts(&PartRelabelInput {
            semantic_masks,
            semantic_probs: Tensor::from_rows(&rows),
            part_masks,
        })
        .unwrap();
        for i in 0..r.probs.rows() {
            worst = worst.max((r.probs.row(i).iter().sum::<f64>() - 1.0).abs());
        }
    }
    outcome(
        exact && worst <= ROW_SUM_TOL,
        format!("3:1 overlap gives {:?}; row sums within {worst:.1e} of 1 on {RELABEL_TRIALS} random mask sets", hand.probs.row(0)),
    )
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.model.decoder = Variant::DecoupledFusionThings.apply(cfg.model.decoder.clone());
    let (model, store) = build_model(&cfg).unwrap();
    let vocab = cfg.data.generator.vocabulary().unwrap();
    let scenes = generate_scenes(&cfg.data.generator, 7, WIRING_SCENES).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut identical, mut thing_differs) = (0, 0);
    for scene in &scenes {
        let labels = vocab.all_classes();
        let mut shuffled = labels.clone();
        while shuffled == labels {
            shuffled.shuffle(&mut rng);
        }
        let a = model.predict(&store, &scene.image, &build_category_prompt(&labels).unwrap()).unwrap();
        let b = model.predict(&store, &scene.image, &build_category_prompt(&shuffled).unwrap()).unwrap();
        let stuff: Vec<usize> = (0..a.proposals.len()).filter(|&i| a.proposals.sources[i] == Source::Stuff).collect();
        let things: Vec<usize> = (0..a.proposals.len()).filter(|&i| a.proposals.sources[i] == Source::Thing).collect();
        let (sa, sb) = (a.proposals.select(&stuff), b.proposals.select(&stuff));
        let same_bits = |x: &Tensor, y: &Tensor| x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits());
        let boxes_same = sa
            .boxes
            .iter()
            .zip(&sb.boxes)
            .all(|(p, q)| p.to_array().iter().zip(q.to_array()).all(|(u, v)| u.to_bits() == v.to_bits()));
        if !stuff.is_empty() && same_bits(&sa.masks, &sb.masks) && boxes_same {
            identical += 1;
        }
        if a.proposals.select(&things).masks != b.proposals.select(&things).masks {
            thing_differs += 1;
        }
    }
    outcome(
        identical == WIRING_SCENES,
        format!(
            "variant c: stuff masks and boxes bit-identical under label permutation on {identical}/{WIRING_SCENES} scenes (thing masks changed on {thing_differs})"
        ),
    )
}

// ---------------------------------------------------------------- 8

/// Independent pixel-loop implementations of every metric.
mod oracle {
    use super::*;

    pub fn iou(a: &BinaryMask, b: &BinaryMask) -> f64 {
        let (mut i, mut u) = (0usize, 0usize);
        for (x, y) in a.data().iter().zip(b.data()) {
            i += (*x && *y) as usize;
            u += (*x || *y) as usize;
        }
        if u == 0 {
            0.0
        } else {
            i as f64 / u as f64
        }
    }

    pub fn pq(preds: &[Vec<Segment>], gts: &[Vec<Segment>]) -> f64 {
        let mut classes = BTreeSet::new();
        for s in preds.iter().chain(gts).flatten() {
            classes.insert(s.class.clone());
        }
        if classes.is_empty() {
            return 1.0;
        }
        let mut total = 0.0;
        for c in &classes {
            let (mut tp, mut fp, mut fn_, mut sum) = (0usize, 0usize, 0usize, 0.0);
            for (p, g) in preds.iter().zip(gts) {
                let ps: Vec<&Segment> = p.iter().filter(|s| s.class == *c).collect();
                let gs: Vec<&Segment> = g.iter().filter(|s| s.class == *c).collect();
                let mut g_hit = vec![false; gs.len()];
                for ps in &ps {
                    let mut hit = false;
                    for (k, gs) in gs.iter().enumerate() {
                        let v = iou(&ps.mask, &gs.mask);
                        if v > 0.5 {
                            tp += 1;
                            sum += v;
                            g_hit[k] = true;
                            hit = true;
                        }
                    }
                    if !hit {
                        fp += 1;
                    }
                }
                fn_ += g_hit.iter().filter(|h| !**h).count();
            }
            total += sum / (tp as f64 + 0.5 * fp as f64 + 0.5 * fn_ as f64);
        }
        total / classes.len() as f64
    }

    pub fn miou(p: &[Option<usize>], g: &[Option<usize>], k: usize) -> f64 {
        let mut vals = Vec::new();
        for c in 0..k {
            let (mut i, mut u) = (0, 0);
            for (a, b) in p.iter().zip(g) {
                let (x, y) = (*a == Some(c), *b == Some(c));
                i += (x && y) as usize;
                u += (x || y) as usize;
            }
            if u > 0 {
                vals.push(i as f64 / u as f64);
            }
        }
        if vals.is_empty() {
            1.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    }

    pub fn oiou(p: &[BinaryMask], g: &[BinaryMask]) -> f64 {
        let (mut i, mut u) = (0, 0);
        for (a, b) in p.iter().zip(g) {
            for (x, y) in a.data().iter().zip(b.data()) {
                i += (*x && *y) as usize;
                u += (*x || *y) as usize;
            }
        }
        if u == 0 {
            1.0
        } else {
            i as f64 / u as f64
        }
    }

    pub fn part_miou(p: &[PartMasks], g: &[PartMasks], grouping: &BTreeMap<String, Vec<String>>) -> f64 {
        let mut vals = Vec::new();
        for parts in grouping.values() {
            let (mut i, mut u) = (0, 0);
            for (pp, gp) in p.iter().zip(g) {
                let len = pp.iter().chain(gp).map(|(_, m)| m.len()).next().unwrap_or(0);
                for px in 0..len {
                    let x = pp.iter().any(|(n, m)| parts.contains(n) && m.data()[px]);
                    let y = gp.iter().any(|(n, m)| parts.contains(n) && m.data()[px]);
                    i += (x && y) as usize;
                    u += (x || y) as usize;
                }
            }
            if u > 0 {
                vals.push(i as f64 / u as f64);
            }
        }
        if vals.is_empty() {
            1.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    }

    pub fn ap(dets: &[Detection], gts: &[GroundTruth], thresholds: &[f64], mode: ApMode) -> f64 {
        let classes: BTreeSet<&String> = gts.iter().map(|g| &g.class).collect();
        if classes.is_empty() {
            return 0.0;
        }
        let mut per_class = Vec::new();
        for c in &classes {
            let mut d: Vec<(usize, &Detection)> = dets.iter().filter(|d| d.class == **c).enumerate().collect();
            d.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap().then(a.0.cmp(&b.0)));
            let g: Vec<&GroundTruth> = gts.iter().filter(|g| g.class == **c).collect();
            let mut sum_t = 0.0;
            for &thr in thresholds {
                let mut used = vec![false; g.len()];
                let mut prec = Vec::new();
                let mut rec = Vec::new();
                let mut tp = 0;
                for (rank, (_, det)) in d.iter().enumerate() {
                    let mut best: Option<usize> = None;
                    let mut best_iou = 0.0;
                    for (k, gt) in g.iter().enumerate() {
                        if used[k] || gt.image != det.image {
                            continue;
                        }
                        let v = match mode {
                            ApMode::Mask => iou(&det.mask, &gt.mask),
                            ApMode::Box => box_iou(&det.bbox, &gt.bbox),
                        };
                        if v >= thr && (best.is_none() || v > best_iou) {
                            best = Some(k);
                            best_iou = v;
                        }
                    }
                    if let Some(k) = best {
                        used[k] = true;
                        tp += 1;
                    }
                    prec.push(tp as f64 / (rank + 1) as f64);
                    rec.push(tp as f64 / g.len() as f64);
                }
                let mut s = 0.0;
                for k in 0..=100 {
                    let r = k as f64 / 100.0;
                    let p = (0..prec.len()).filter(|&i| rec[i] >= r).map(|i| prec[i]).fold(0.0, f64::max);
                    s += p;
                }
                sum_t += s / 101.0;
            }
            per_class.push(sum_t / thresholds.len() as f64);
        }
        per_class.iter().sum::<f64>() / per_class.len() as f64
    }
}

/// Random partition of an `h x w` grid into at most `k` labelled segments
/// (some pixels unlabelled), as label map and segments.
fn random_partition(rng: &mut ChaCha8Rng, h: usize, w: usize, k: usize, base: Option<&[Option<usize>]>) -> Vec<Option<usize>> {
    match base {
        Some(b) => b
            .iter()
            .map(|&l| if rng.gen_bool(0.15) { if rng.gen_bool(0.3) { None } else { Some(rng.gen_range(0..k)) } } else { l })
            .collect(),
        None => (0..h * w).map(|_| if rng.gen_bool(0.1) { None } else { Some(rng.gen_range(0..k)) }).collect(),
    }
}

fn segments_of(map: &[Option<usize>], h: usize, w: usize, classes: &[&str]) -> Vec<Segment> {
    let ids: BTreeSet<usize> = map.iter().flatten().copied().collect();
    ids.into_iter()
        .map(|id| Segment {
            mask: BinaryMask::from_vec(h, w, map.iter().map(|&l| l == Some(id)).collect()).unwrap(),
            class: classes[id].to_string(),
            kind: if id % 2 == 0 { GtKind::Thing } else { GtKind::Stuff },
            score: 1.0,
            proposal: None,
        })
        .collect()
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut failures: BTreeMap<&str, usize> = BTreeMap::new();
    let mut fail = |name: &'static str| *failures.entry(name).or_insert(0) += 1;
    let names = ["cat", "dog", "cat", "sky"];
    for _ in 0..METRIC_TRIALS {
        let (h, w) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let k = rng.gen_range(1..=4);
        let images = rng.gen_range(1..=3);
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        let mut pmaps = Vec::new();
        let mut gmaps = Vec::new();
        for _ in 0..images {
            let g = random_partition(&mut rng, h, w, k, None);
            let p = random_partition(&mut rng, h, w, k, Some(&g));
            preds.push(PanopticPrediction::new(h, w, segments_of(&p, h, w, &names)).unwrap());
            gts.push(PanopticPrediction::new(h, w, segments_of(&g, h, w, &names)).unwrap());
            pmaps.push(p);
            gmaps.push(g);
        }
        let pq = panoptic_quality(&preds, &gts).unwrap().pq;
        let pseg: Vec<Vec<Segment>> = preds.iter().map(|p| p.segments.clone()).collect();
        let gseg: Vec<Vec<Segment>> = gts.iter().map(|p| p.segments.clone()).collect();
        if pq != oracle::pq(&pseg, &gseg) {
            fail("pq");
        }

        if miou(&pmaps[0], &gmaps[0], k).unwrap() != oracle::miou(&pmaps[0], &gmaps[0], k) {
            fail("miou");
        }

        let pm: Vec<BinaryMask> = pseg.iter().flatten().map(|s| s.mask.clone()).collect();
        let gm: Vec<BinaryMask> = pseg
            .iter()
            .zip(&gseg)
            .flat_map(|(p, g)| p.iter().map(|s| g.iter().find(|t| t.class == s.class).map_or_else(|| BinaryMask::new(h, w).unwrap(), |t| t.mask.clone())))
            .collect();
        if oiou(&pm, &gm).unwrap() != oracle::oiou(&pm, &gm) {
            fail("oiou");
        }

        let grouping: BTreeMap<String, Vec<String>> = [
            ("upper".to_string(), vec!["cat".to_string(), "dog".to_string()]),
            ("lower".to_string(), vec!["sky".to_string()]),
        ]
        .into();
        let pp: Vec<PartMasks> = pseg.iter().map(|s| s.iter().map(|s| (s.class.clone(), s.mask.clone())).collect()).collect();
        let gp: Vec<PartMasks> = gseg.iter().map(|s| s.iter().map(|s| (s.class.clone(), s.mask.clone())).collect()).collect();
        if miou_parts(&pp, &gp, &grouping, h, w).unwrap().miou != oracle::part_miou(&pp, &gp, &grouping) {
            fail("part_miou");
        }

        let mut dets = Vec::new();
        let mut gtl = Vec::new();
        for (i, (p, g)) in pseg.iter().zip(&gseg).enumerate() {
            for s in p {
                dets.push(Detection {
                    image: i,
                    class: s.class.clone(),
                    score: (rng.gen_range(0..5) as f64) / 4.0,
                    bbox: mask_to_box(&s.mask),
                    mask: s.mask.clone(),
                });
            }
            for s in g {
                gtl.push(GroundTruth::from_mask(i, &s.class, s.mask.clone()));
            }
        }
        let t = coco_thresholds();
        for mode in [ApMode::Mask, ApMode::Box] {
            if average_precision(&dets, &gtl, &t, mode).unwrap().ap != oracle::ap(&dets, &gtl, &t, mode) {
                fail("ap");
            }
        }
    }

    let hand = hand_cases();
    let pass = failures.is_empty() && hand.is_empty();
    outcome(
        pass,
        format!(
            "metrics equal brute-force oracles on {METRIC_TRIALS} random <=8x8 scenes with <=4 segments{}; hand cases {}",
            if failures.is_empty() { String::new() } else { format!(" (mismatches {failures:?})") },
            if hand.is_empty() { "ok".to_string() } else { hand.join("; ") }
        ),
    )
}

fn hand_cases() -> Vec<String> {
    let mut bad = Vec::new();
    let m = |h, w, f: &dyn Fn(usize, usize) -> bool| BinaryMask::from_fn(h, w, f).unwrap();
    let seg = |mask: BinaryMask, class: &str| Segment {
        mask,
        class: class.into(),
        kind: GtKind::Thing,
        score: 1.0,
        proposal: None,
    };
    let gt = PanopticPrediction::new(4, 5, vec![seg(m(4, 5, &|r, _| r < 2), "x")]).unwrap();
    let pred = PanopticPrediction::new(
        4,
        5,
        vec![seg(m(4, 5, &|r, c| r < 2 && c < 4), "x"), seg(m(4, 5, &|r, _| r == 3), "x")],
    )
    .unwrap();
    let pq = panoptic_quality(&[pred], &[gt.clone()]).unwrap().pq;
    if (pq - 0.8 / 1.5).abs() > 1e-12 {
        bad.push(format!("PQ 1 TP at 0.8 + 1 FP = {pq}"));
    }
    if panoptic_quality(&[gt.clone()], &[gt.clone()]).unwrap().pq != 1.0 {
        bad.push("PQ of gt against itself".into());
    }
    if panoptic_quality(&[PanopticPrediction::new(4, 5, vec![]).unwrap()], &[gt]).unwrap().pq != 0.0 {
        bad.push("PQ of empty prediction".into());
    }

    let a = [Some(0), Some(0), Some(1), Some(1)];
    let c = [Some(0), Some(1), Some(1), Some(1)];
    if miou(&a, &a, 2).unwrap() != 1.0 || miou(&a, &[Some(1), Some(1), Some(0), Some(0)], 2).unwrap() != 0.0 {
        bad.push("mIoU trivial cases".into());
    }
    if (miou(&c, &a, 2).unwrap() - (0.5 + 2.0 / 3.0) / 2.0).abs() > 1e-15 {
        bad.push("mIoU 4-pixel case".into());
    }

    let g0 = m(8, 8, &|r, c| r < 3 && c < 3);
    let g1 = m(8, 8, &|r, c| r > 4 && c > 4);
    let gts = vec![GroundTruth::from_mask(0, "x", g0.clone()), GroundTruth::from_mask(0, "x", g1)];
    let det = |mask: BinaryMask, score| Detection {
        image: 0,
        class: "x".into(),
        score,
        bbox: mask_to_box(&mask),
        mask,
    };
    let t = coco_thresholds();
    if average_precision(&[det(g0.clone(), 0.9)], &gts[..1], &t, ApMode::Mask).unwrap().ap != 1.0 {
        bad.push("AP single perfect match".into());
    }
    if average_precision(&[], &gts, &t, ApMode::Mask).unwrap().ap != 0.0 {
        bad.push("AP without predictions".into());
    }
    let r = average_precision(&[det(g0, 0.9), det(m(8, 8, &|r, c| r == 4 && c == 0), 0.5)], &gts, &t, ApMode::Mask).unwrap();
    if r.per_threshold.iter().any(|v| (v - 51.0 / 101.0).abs() > 1e-12) {
        bad.push(format!("AP correct-then-false = {:?}", r.per_threshold));
    }

    let row = m(2, 2, &|r, _| r == 0);
    let i1 = oiou(&[m(2, 2, &|r, c| r == 0 && c == 0), m(4, 4, &|r, c| r == 0 && c == 0)], &[row.clone(), m(4, 4, &|r, c| r == 0 && c < 2)])
        .unwrap();
    if i1 != 0.5 || oiou(&[row.clone()], &[row.clone()]).unwrap() != 1.0 || oiou(&[BinaryMask::new(2, 2).unwrap()], &[row]).unwrap() != 0.0 {
        bad.push(format!("oIoU hand cases ({i1})"));
    }

    let grouping: BTreeMap<String, Vec<String>> = [("head".to_string(), vec!["ears".to_string(), "eyes".to_string()])].into();
    let ears = m(4, 4, &|r, _| r == 0);
    let eyes = m(4, 4, &|r, _| r == 1);
    let gt = vec![vec![("ears".to_string(), ears.clone()), ("eyes".to_string(), eyes.clone())]];
    let swapped = vec![vec![("ears".to_string(), eyes), ("eyes".to_string(), ears)]];
    if miou_parts(&swapped, &gt, &grouping, 4, 4).unwrap().miou != 1.0 {
        bad.push("grouped parts ears+eyes".into());
    }
    bad
}

// ---------------------------------------------------------------- 9

fn overfit_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.train_scenes = OVERFIT_SCENES;
    cfg.schedule.iterations = OVERFIT_ITERATIONS;
    cfg.schedule.batch_size = OVERFIT_BATCH;
    cfg.optimizer.lr = OVERFIT_LR;
    cfg
}

fn criterion_9(shared: &mut Option<(RunConfig, Trained)>) -> Outcome {
    let cfg = overfit_config();
    let (vocab, scenes) = training_data(&cfg).unwrap();
    let start = Instant::now();
    let trained = train(&cfg, &vocab, &scenes, |r| {
        if r.iteration % 250 == 0 {
            eprintln!("  [9] iteration {:>5}  loss {:.4}  ({:.0?})", r.iteration, r.total, start.elapsed());
        }
    })
    .unwrap();
    let engine = Engine::from_trained(&cfg, trained.clone()).unwrap();
    let report = engine
        .evaluate(&scenes, &vocab, Task::Part, &[Metric::Pq, Metric::Oiou, Metric::PartMiou])
        .unwrap();
    let took = start.elapsed();
    let pq = report.pq.as_ref().unwrap().pq;
    let oi = report.oiou.unwrap();
    let pm = report.part_miou.as_ref().unwrap().miou;
    *shared = Some((cfg, trained));
    outcome(
        pq >= OVERFIT_PQ && oi >= OVERFIT_OIOU && pm >= OVERFIT_PART_MIOU && took <= OVERFIT_TIME_LIMIT,
        format!(
            "overfit {OVERFIT_SCENES} scenes, {OVERFIT_ITERATIONS} iterations: PQ {pq:.3} (>= {OVERFIT_PQ}), oIoU {oi:.3} (>= {OVERFIT_OIOU}), grouped-part mIoU {pm:.3} (>= {OVERFIT_PART_MIOU}), {took:.0?} (<= 30 min)"
        ),
    )
}

// ---------------------------------------------------------------- 10

fn criterion_10() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.data.train_scenes = ABLATION_SCENES;
    cfg.data.eval_scenes = ABLATION_EVAL_SCENES;
    cfg.data.eval_seed = 1000;
    cfg.schedule.iterations = ABLATION_ITERATIONS;
    cfg.schedule.batch_size = OVERFIT_BATCH;
    cfg.optimizer.lr = OVERFIT_LR;
    let train_data = training_data(&cfg).unwrap();
    let eval_data = evaluation_data(&cfg).unwrap();
    let report = ovseg::pipeline::ablate(
        &cfg,
        &[Variant::UnifiedFusion, Variant::DecoupledFusionThings],
        &ABLATION_SEEDS,
        (&train_data.0, &train_data.1),
        (&eval_data.0, &eval_data.1),
    )
    .unwrap();
    for r in &report.rows {
        eprintln!(
            "  [10] variant {} seed {}: PQ {:.4} AP {:.4} oIoU {:.4}",
            r.variant,
            r.seed,
            r.report.pq.as_ref().map_or(f64::NAN, |p| p.pq),
            r.report.ap.as_ref().map_or(f64::NAN, |a| a.ap),
            r.report.oiou.unwrap_or(f64::NAN)
        );
    }
    let a = report.mean_pq("a").unwrap();
    let c = report.mean_pq("c").unwrap();
    outcome(
        c >= a,
        format!("ablation over seeds {ABLATION_SEEDS:?}: mean PQ decoupled (c) {c:.4} vs unified (a) {a:.4}"),
    )
}

// ---------------------------------------------------------------- 11

fn criterion_11() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.open_vocab.enabled = true;
    cfg.open_vocab.held_out = vec![NOVEL_CLASS.to_string()];
    cfg.open_vocab.lambda_novel = NOVEL_LAMBDA;
    cfg.data.train_scenes = NOVEL_TRAIN_SCENES;
    cfg.data.eval_scenes = NOVEL_EVAL_SCENES;
    cfg.data.eval_seed = 2000;
    cfg.schedule.iterations = NOVEL_ITERATIONS;
    cfg.schedule.batch_size = OVERFIT_BATCH;
    cfg.optimizer.lr = OVERFIT_LR;
    let (train_vocab, train_scenes) = training_data(&cfg).unwrap();
    assert!(!train_vocab.all_classes().contains(&NOVEL_CLASS.to_string()));
    let trained = train(&cfg, &train_vocab, &train_scenes, |_| {}).unwrap();
    let engine = Engine::from_trained(&cfg, trained).unwrap();
    let (vocab, scenes) = evaluation_data(&cfg).unwrap();
    let labels = vocab.all_classes();
    let novel_col = labels.iter().position(|c| c == NOVEL_CLASS).unwrap();

    let mut mass: f64 = 0.0;
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    let mut proposals = Vec::new();
    for (i, s) in scenes.iter().enumerate() {
        let out = engine.infer(&s.image, Task::Instance, &Query::Labels(labels.clone())).unwrap();
        for r in 0..out.probabilities.p_final.rows() {
            mass = mass.max(out.probabilities.p_final.get(r, novel_col));
        }
        if let ovseg::pipeline::TaskResult::Instances(mut d) = out.result {
            for det in &mut d {
                det.image = i;
            }
            for det in &d {
                if !proposals.iter().any(|p: &Detection| p.image == det.image && p.mask == det.mask) {
                    proposals.push(det.clone());
                }
            }
            dets.extend(d.into_iter().filter(|d| d.class == NOVEL_CLASS));
        }
        for inst in s.instances.iter().filter(|i| i.class == NOVEL_CLASS) {
            gts.push(GroundTruth {
                image: i,
                class: inst.class.clone(),
                mask: inst.mask.clone(),
                bbox: inst.bbox,
            });
        }
    }
    let best_iou = gts
        .iter()
        .map(|g| {
            proposals
                .iter()
                .filter(|p| p.image == g.image)
                .map(|p| oracle::iou(&p.mask, &g.mask))
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / gts.len().max(1) as f64;
    let t = coco_thresholds();
    let ap = average_precision(&dets, &gts, &t, ApMode::Mask).unwrap().ap;
    let things: Vec<&String> = vocab.thing_classes.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut baseline = 0.0;
    for _ in 0..RANDOM_BASELINE_DRAWS {
        let random: Vec<Detection> = proposals
            .iter()
            .filter_map(|d| {
                let class = things[rng.gen_range(0..things.len())];
                (class == NOVEL_CLASS).then(|| Detection {
                    class: class.clone(),
                    score: rng.gen::<f64>(),
                    ..d.clone()
                })
            })
            .collect();
        baseline += average_precision(&random, &gts, &t, ApMode::Mask).unwrap().ap / RANDOM_BASELINE_DRAWS as f64;
    }
    outcome(
        mass > 0.0 && ap > baseline && !gts.is_empty(),
        format!(
            "held-out `{NOVEL_CLASS}` (lambda_novel {NOVEL_LAMBDA}): max probability {mass:.3}, AP {ap:.4} vs random-label baseline {baseline:.4} over {} instances (mean best proposal IoU {best_iou:.3})",
            gts.len()
        ),
    )
}

// ---------------------------------------------------------------- 12

fn criterion_12(shared: &Option<(RunConfig, Trained)>) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut rle_ok = 0;
    for _ in 0..RLE_TRIALS {
        let (h, w) = (rng.gen_range(1..40), rng.gen_range(1..40));
        let p = rng.gen_range(0.0..1.0);
        let mut m = BinaryMask::new(h, w).unwrap();
        for r in 0..h {
            for c in 0..w {
                m.set(r, c, rng.gen_bool(p));
            }
        }
        if rle_decode(&rle_encode(&m)).unwrap() == m {
            rle_ok += 1;
        }
    }
    let (cfg, trained) = match shared {
        Some((c, t)) => (c.clone(), t.clone()),
        None => {
            let mut cfg = RunConfig::default();
            cfg.schedule.iterations = 3;
            cfg.data.train_scenes = 2;
            let (vocab, scenes) = training_data(&cfg).unwrap();
            let t = train(&cfg, &vocab, &scenes, |_| {}).unwrap();
            (cfg, t)
        }
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("checkpoint.bin");
    trained.checkpoint(&cfg).save(&path).unwrap();
    let restored = Engine::from_checkpoint(Checkpoint::load(&path).unwrap()).unwrap();
    let original = Engine::from_trained(&cfg, trained.clone()).unwrap();
    let scenes = generate_scenes(&GeneratorConfig::default(), 12, 3).unwrap();
    let labels = trained.vocabulary.all_classes();
    let mut identical = true;
    for s in &scenes {
        for (task, q) in [
            (Task::Panoptic, Query::Labels(labels.clone())),
            (Task::Referring, Query::Expression(s.referring[0].expression.clone())),
        ] {
            let a = original.infer(&s.image, task, &q).unwrap();
            let b = restored.infer(&s.image, task, &q).unwrap();
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            identical &= a == b && bits(&a.prediction.logits) == bits(&b.prediction.logits);
        }
    }
    outcome(
        rle_ok == RLE_TRIALS && identical,
        format!("RLE round-trip exact on {rle_ok}/{RLE_TRIALS} random masks; checkpoint save/load inference bit-identical: {identical}"),
    )
}

fn main() -> ExitCode {
    let only: Option<BTreeSet<usize>> = std::env::var("OVSEG_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let run = |k: usize| only.as_ref().is_none_or(|o| o.contains(&k));
    // soft criteria report a failure without failing the suite
    let soft: BTreeSet<usize> = [10].into();
    let mut shared: Option<(RunConfig, Trained)> = None;
    let mut hard_failures = 0;
    for k in 1..=12 {
        if !run(k) {
            continue;
        }
        let result = catch_unwind(AssertUnwindSafe(|| match k {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(),
            5 => criterion_5(),
            6 => criterion_6(),
            7 => criterion_7(),
            8 => criterion_8(),
            9 => criterion_9(&mut shared),
            10 => criterion_10(),
            11 => criterion_11(),
            _ => criterion_12(&shared),
        }));
        let o = result.unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let tag = match (o.pass, soft.contains(&k)) {
            (true, _) => "PASS",
            (false, true) => "FAIL (soft)",
            (false, false) => "FAIL",
        };
        if !o.pass && !soft.contains(&k) {
            hard_failures += 1;
        }
        println!("{tag} [{k:>2}] {}", o.detail);
    }
    if hard_failures > 0 {
        println!("{hard_failures} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
