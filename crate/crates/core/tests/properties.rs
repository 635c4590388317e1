use std::collections::BTreeSet;

use ovseg::assignment::{hungarian, simota, CostMatrix, SIMOTA_TOPQ};
use ovseg::gradcheck::random_tensor;
use ovseg::losses::GtKind;
use ovseg::metrics::{
    average_precision, miou, oiou, panoptic_quality, ApMode, Detection, GroundTruth, PanopticPrediction, Segment,
};
use ovseg::openvocab::{combine_logits, random_distribution, relabel_external_parts, PartRelabelInput};
use ovseg::{mask_to_box, rle_decode, rle_encode, BinaryMask, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CLASSES: [&str; 4] = ["cat", "dog", "sky", "road"];

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
    let p = rng.gen_range(0.0..1.0);
    let mut m = BinaryMask::new(h, w).unwrap();
    for r in 0..h {
        for c in 0..w {
            m.set(r, c, rng.gen_bool(p));
        }
    }
    m
}

fn random_label_map(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<Option<usize>> {
    (0..n)
        .map(|_| if rng.gen_bool(0.2) { None } else { Some(rng.gen_range(0..k)) })
        .collect()
}

fn segments(map: &[Option<usize>], h: usize, w: usize) -> Vec<Segment> {
    let ids: BTreeSet<usize> = map.iter().flatten().copied().collect();
    ids.into_iter()
        .map(|id| Segment {
            mask: BinaryMask::from_vec(h, w, map.iter().map(|&l| l == Some(id)).collect()).unwrap(),
            class: CLASSES[id].into(),
            kind: if id < 2 { GtKind::Thing } else { GtKind::Stuff },
            score: 1.0,
            proposal: None,
        })
        .collect()
}

fn scene_pair(seed: u64) -> (Vec<PanopticPrediction>, Vec<PanopticPrediction>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (rng.gen_range(1..9), rng.gen_range(1..9));
    let images = rng.gen_range(1..4);
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..images {
        let p = random_label_map(&mut rng, h * w, CLASSES.len());
        let g = random_label_map(&mut rng, h * w, CLASSES.len());
        preds.push(PanopticPrediction::new(h, w, segments(&p, h, w)).unwrap());
        gts.push(PanopticPrediction::new(h, w, segments(&g, h, w)).unwrap());
    }
    (preds, gts)
}

fn detections(seed: u64) -> (Vec<Detection>, Vec<GroundTruth>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (rng.gen_range(2..9), rng.gen_range(2..9));
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for image in 0..rng.gen_range(1..4) {
        for _ in 0..rng.gen_range(0..4) {
            let class = CLASSES[rng.gen_range(0..2)];
            gts.push(GroundTruth::from_mask(image, class, random_mask(&mut rng, h, w)));
        }
        for _ in 0..rng.gen_range(0..6) {
            let mask = random_mask(&mut rng, h, w);
            dets.push(Detection {
                image,
                class: CLASSES[rng.gen_range(0..2)].into(),
                score: rng.gen_range(0.0..1.0),
                bbox: mask_to_box(&mask),
                mask,
            });
        }
    }
    (dets, gts)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn pq_is_bounded_and_ignores_segment_order(seed in any::<u64>()) {
        let (preds, gts) = scene_pair(seed);
        let a = panoptic_quality(&preds, &gts).unwrap();
        for v in [a.pq, a.sq, a.rq] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let shuffled: Vec<PanopticPrediction> = preds
            .iter()
            .map(|p| {
                let mut s = p.segments.clone();
                s.shuffle(&mut rng);
                PanopticPrediction::new(p.height, p.width, s).unwrap()
            })
            .collect();
        prop_assert_eq!(panoptic_quality(&shuffled, &gts).unwrap().pq, a.pq);
        prop_assert_eq!(panoptic_quality(&gts, &gts).unwrap().pq, 1.0);
    }

    #[test]
    fn miou_is_bounded_and_perfect_on_identity(seed in any::<u64>(), n in 1usize..64, k in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_label_map(&mut rng, n, k);
        let g = random_label_map(&mut rng, n, k);
        let v = miou(&p, &g, k).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(miou(&g, &g, k).unwrap(), 1.0);
    }

    #[test]
    fn ap_is_bounded_order_free_and_monotone_in_threshold(seed in any::<u64>()) {
        let (dets, gts) = detections(seed);
        let mut prev = f64::INFINITY;
        for t in [0.3, 0.5, 0.7, 0.9] {
            let ap = average_precision(&dets, &gts, &[t], ApMode::Mask).unwrap().ap;
            prop_assert!((0.0..=1.0).contains(&ap));
            prop_assert!(ap <= prev + 1e-12);
            prev = ap;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let mut gts_shuffled = gts.clone();
        gts_shuffled.shuffle(&mut rng);
        let t = [0.5, 0.75];
        prop_assert_eq!(
            average_precision(&dets, &gts, &t, ApMode::Box).unwrap().ap,
            average_precision(&dets, &gts_shuffled, &t, ApMode::Box).unwrap().ap
        );
    }

    #[test]
    fn oiou_is_bounded(seed in any::<u64>(), n in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p: Vec<BinaryMask> = (0..n).map(|_| random_mask(&mut rng, 5, 6)).collect();
        let g: Vec<BinaryMask> = (0..n).map(|_| random_mask(&mut rng, 5, 6)).collect();
        let v = oiou(&p, &g).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn rle_round_trips(seed in any::<u64>(), h in 1usize..30, w in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_mask(&mut rng, h, w);
        prop_assert_eq!(rle_decode(&rle_encode(&m)).unwrap(), m);
    }

    #[test]
    fn hungarian_pairs_are_disjoint_and_complete(seed in any::<u64>(), n in 1usize..9, m in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cost = CostMatrix::from_total(random_tensor(&mut rng, n, m, 5.0)).unwrap();
        let r = hungarian(&cost);
        prop_assert_eq!(r.pairs.len(), n.min(m));
        let rows: BTreeSet<usize> = r.pairs.iter().map(|p| p.0).collect();
        let cols: BTreeSet<usize> = r.pairs.iter().map(|p| p.1).collect();
        prop_assert_eq!(rows.len(), r.pairs.len());
        prop_assert_eq!(cols.len(), r.pairs.len());
    }

    #[test]
    fn simota_assigns_each_proposal_at_most_once(seed in any::<u64>(), n in 1usize..25, m in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cost = CostMatrix::from_total(random_tensor(&mut rng, n, m, 5.0)).unwrap();
        let ious = Tensor::from_vec(n, m, (0..n * m).map(|_| rng.gen_range(0.0..1.0)).collect());
        let r = simota(&cost, &ious, SIMOTA_TOPQ).unwrap();
        let props: BTreeSet<usize> = r.pairs.iter().map(|p| p.0).collect();
        prop_assert_eq!(props.len(), r.pairs.len());
        if n >= m {
            prop_assert!(r.multiplicity.iter().all(|&k| k >= 1));
        }
        prop_assert_eq!(r.multiplicity.iter().sum::<usize>(), r.pairs.len());
    }

    #[test]
    fn mixed_probabilities_are_distributions(seed in any::<u64>(), k in 2usize..8, lambda in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p1 = Tensor::from_rows(&(0..3).map(|_| random_distribution(&mut rng, k)).collect::<Vec<_>>());
        let p2 = Tensor::from_rows(&(0..3).map(|_| random_distribution(&mut rng, k)).collect::<Vec<_>>());
        let mix = combine_logits(&p1, &p2, lambda).unwrap();
        for r in 0..mix.rows() {
            prop_assert!((mix.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(mix.row(r).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn relabelled_parts_are_distributions(seed in any::<u64>(), k in 1usize..4, j in 2usize..5, parts in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let semantic_masks: Vec<BinaryMask> = (0..k).map(|_| random_mask(&mut rng, 6, 6)).collect();
        let rows: Vec<Vec<f64>> = (0..k).map(|_| random_distribution(&mut rng, j)).collect();
        let part_masks: Vec<BinaryMask> = (0..parts).map(|_| random_mask(&mut rng, 6, 6)).collect();
        let out = relabel_external_parts(&PartRelabelInput {
            semantic_masks,
            semantic_probs: Tensor::from_rows(&rows),
            part_masks,
        })
        .unwrap();
        prop_assert_eq!(out.probs.rows(), parts);
        for r in 0..parts {
            prop_assert!((out.probs.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
