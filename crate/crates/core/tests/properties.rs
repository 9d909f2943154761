use std::collections::BTreeMap;

use css_core::autograd::Tape;
use css_core::data::{
    select_for_step, split_for_step, ClassId, ClassPartition, LabelMap, LabeledImage, Protocol, TaskSchedule,
    BACKGROUND, IGNORE,
};
use css_core::decouple::{rank_and_split, si_count, split_indices, ChannelSimilarity, SimilarityMetric};
use css_core::distill::{sfp_loss, PrototypeStore, Triplet};
use css_core::eval::{miou, ConfusionMatrix};
use css_core::net::{softmax_rows, NetConfig, SegNetwork};
use css_core::pseudo::{
    assign_unknown, certainty_maps, fuse_labels, pseudo_labels, Provenance, PseudoThresholds,
};
use css_core::relevance::{class_relevance, nsc_from_vectors, RelevanceField};
use css_core::trainer::StepConfig;
use css_core::Tensor;
use proptest::prelude::*;

fn sim(scores: Vec<f64>) -> ChannelSimilarity {
    ChannelSimilarity {
        scores,
        metric: SimilarityMetric::Cosine,
    }
}

fn simplex_map(k: usize, n: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(0.0f64..1.0, k * n).prop_map(move |raw| {
        let mut d = vec![0.0; k * n];
        for i in 0..n {
            let s: f64 = (0..k).map(|r| raw[r * n + i]).sum::<f64>().max(1e-12);
            for r in 0..k {
                d[r * n + i] = raw[r * n + i] / s;
            }
        }
        Tensor::new(vec![k, 1, n], d).unwrap()
    })
}

fn raster(classes: Vec<ClassId>, n: usize) -> impl Strategy<Value = Vec<ClassId>> {
    prop::collection::vec(prop::sample::select(classes), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_reconstructs_and_has_rounded_size(
        scores in prop::collection::vec(-1.0f64..1.0, 1..24),
        ratio in 0.0f64..=1.0,
    ) {
        let n = scores.len();
        let emb = Tensor::new(vec![n, 1, 2], (0..2 * n).map(|i| i as f64 * 0.37 - 3.0).collect()).unwrap();
        let d = rank_and_split(&sim(scores), &emb, ratio).unwrap();
        prop_assert_eq!(d.reconstruct(), emb);
        prop_assert_eq!(d.si_indices.len(), si_count(ratio, n));
        let x = ratio * n as f64;
        let expect = if x - x.floor() >= 0.5 { x.floor() + 1.0 } else { x.floor() };
        prop_assert_eq!(d.si_indices.len(), expect as usize);
    }

    #[test]
    fn raising_a_score_keeps_channel_in_si(
        scores in prop::collection::vec(-1.0f64..1.0, 2..20),
        pick in any::<prop::sample::Index>(),
        bump in 0.0f64..2.0,
        ratio in 0.05f64..=1.0,
    ) {
        let c = pick.index(scores.len());
        let (si, _) = split_indices(&sim(scores.clone()), ratio).unwrap();
        if si.contains(&c) {
            let mut raised = scores.clone();
            raised[c] += bump;
            let (si2, _) = split_indices(&sim(raised), ratio).unwrap();
            prop_assert!(si2.contains(&c));
        }
    }

    #[test]
    fn split_is_permutation_equivariant(
        scores in prop::collection::vec(-1.0f64..1.0, 2..16),
        perm_seed in any::<u64>(),
        ratio in 0.0f64..=1.0,
    ) {
        let n = scores.len();
        let mut perm: Vec<usize> = (0..n).collect();
        // Fisher-Yates from a splitmix-style stream
        let mut s = perm_seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let permuted: Vec<f64> = perm.iter().map(|&p| scores[p]).collect();
        let (si, _) = split_indices(&sim(scores.clone()), ratio).unwrap();
        let (si_p, _) = split_indices(&sim(permuted), ratio).unwrap();
        // distinct scores make membership independent of index tie-breaks
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        sorted.dedup();
        if sorted.len() == n {
            let mut mapped: Vec<usize> = si_p.iter().map(|&j| perm[j]).collect();
            mapped.sort_unstable();
            prop_assert_eq!(mapped, si);
        }
    }

    #[test]
    fn certainty_is_bounded_by_range(map in (2usize..6, 1usize..12).prop_flat_map(|(k, n)| simplex_map(k, n))) {
        let m = certainty_maps(&map).unwrap();
        for i in 0..m.certainty.len() {
            prop_assert!(m.certainty[i] <= m.range[i]);
            prop_assert!((0.0..=1.0).contains(&m.certainty[i]));
            prop_assert!((0.0..=1.0).contains(&m.range[i]));
            prop_assert!((0.0..=1.0).contains(&m.stability(i)));
        }
    }

    #[test]
    fn unknown_and_kept_pixels_are_disjoint(
        map in simplex_map(4, 16),
        gamma in 0.3f64..0.95,
        zeta in 0.05f64..0.9,
    ) {
        let rows = vec![0, 1, 2, 3];
        let p = ClassPartition::new(vec![1, 2], vec![3], 0, 254, 1).unwrap();
        let th = PseudoThresholds { gamma, zeta_norm: zeta };
        let unknown = assign_unknown(&map, &rows, &p, th).unwrap();
        let labels = pseudo_labels(&map, &rows, &p, th, true).unwrap();
        for (i, &l) in labels.data.iter().enumerate() {
            prop_assert!(l == 0 || l == 254 || l == 1 || l == 2);
            prop_assert_eq!(unknown[i], l == 254);
        }
    }

    #[test]
    fn raising_gamma_never_keeps_more(map in simplex_map(4, 24), g in 0.3f64..0.9, dg in 0.0f64..0.1) {
        let rows = vec![0, 1, 2, 3];
        let p = ClassPartition::new(vec![1, 2], vec![3], 0, 254, 1).unwrap();
        let kept = |gamma: f64| {
            let th = PseudoThresholds { gamma, zeta_norm: 0.2 };
            pseudo_labels(&map, &rows, &p, th, true).unwrap().data.iter().filter(|&&l| l == 1 || l == 2).count()
        };
        prop_assert!(kept(g + dg) <= kept(g));
    }

    #[test]
    fn fusion_matches_precedence_oracle(
        pseudo in raster(vec![0, 1, 2, 254], 20),
        gt in raster(vec![0, 3, 4, IGNORE], 20),
    ) {
        let p = ClassPartition::new(vec![1, 2], vec![3, 4], 0, 254, 1).unwrap();
        let lm = |d: Vec<ClassId>| LabelMap { height: 4, width: 5, data: d };
        let fused = fuse_labels(&lm(pseudo.clone()), &lm(gt.clone()), &p).unwrap();
        let ce = fused.ce_labels();
        for i in 0..20 {
            let (want, src) = match (gt[i], pseudo[i]) {
                (3 | 4, _) => (gt[i], Provenance::Gt),
                (IGNORE, _) => (IGNORE, Provenance::Gt),
                (_, 254) => (254, Provenance::Unknown),
                (_, 0) => (0, Provenance::Background),
                (_, v) => (v, Provenance::Pseudo),
            };
            prop_assert_eq!(fused.labels.data[i], want);
            prop_assert_eq!(fused.provenance[i], src);
            prop_assert_eq!(ce.data[i] == IGNORE, want == IGNORE || want == 254);
        }
    }

    #[test]
    fn confusion_is_order_independent(
        pairs in prop::collection::vec((raster(vec![0, 1, 2], 6), raster(vec![0, 1, 2], 6)), 1..6),
    ) {
        let lm = |d: &Vec<ClassId>| LabelMap { height: 2, width: 3, data: d.clone() };
        let mut fwd = ConfusionMatrix::new(vec![0, 1, 2], None);
        let mut rev = ConfusionMatrix::new(vec![0, 1, 2], None);
        for (p, g) in &pairs {
            fwd.accumulate(&lm(p), &lm(g)).unwrap();
        }
        for (p, g) in pairs.iter().rev() {
            rev.accumulate(&lm(p), &lm(g)).unwrap();
        }
        prop_assert_eq!(fwd, rev);
    }

    #[test]
    fn relabelling_permutes_iou(pred in raster(vec![0, 1, 2, 3], 30), gt in raster(vec![0, 1, 2, 3], 30)) {
        let perm = [2, 0, 3, 1];
        let lm = |d: Vec<ClassId>| LabelMap { height: 5, width: 6, data: d };
        let map = |d: &[ClassId]| d.iter().map(|&c| perm[c as usize]).collect::<Vec<_>>();
        let classes = vec![0, 1, 2, 3];
        let mut a = ConfusionMatrix::new(classes.clone(), None);
        a.accumulate(&lm(pred.clone()), &lm(gt.clone())).unwrap();
        let mut b = ConfusionMatrix::new(classes.clone(), None);
        b.accumulate(&lm(map(&pred)), &lm(map(&gt))).unwrap();
        for &c in &classes {
            prop_assert_eq!(a.iou(c), b.iou(perm[c as usize]));
        }
        prop_assert_eq!(miou(&a, &[1, 2]).ok(), miou(&b, &[perm[1], perm[2]]).ok());
    }

    #[test]
    fn grouped_mean_is_size_weighted(pred in raster(vec![1, 2, 3, 4], 40), gt in raster(vec![1, 2, 3, 4], 40)) {
        let lm = |d: Vec<ClassId>| LabelMap { height: 5, width: 8, data: d };
        let mut cm = ConfusionMatrix::new(vec![1, 2, 3, 4], None);
        cm.accumulate(&lm(pred), &lm(gt)).unwrap();
        let groups = [vec![1, 2, 3], vec![4]];
        if [1, 2, 3, 4].iter().all(|&c| cm.iou(c).is_some()) {
            let weighted: f64 = groups.iter().map(|g| miou(&cm, g).unwrap() * g.len() as f64).sum::<f64>() / 4.0;
            prop_assert!((weighted - miou(&cm, &[1, 2, 3, 4]).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn class_relevance_is_a_spatial_sum(vals in prop::collection::vec(-1.0f64..1.0, 3 * 4 * 5)) {
        let t = Tensor::new(vec![3, 4, 5], vals.clone()).unwrap();
        let field = RelevanceField { class_row: 0, seed_total: 0.0, layers: vec![(0, t)], stats: vec![] };
        let g = class_relevance(&field).g;
        for c in 0..3 {
            let mut s = 0.0;
            for i in 0..20 {
                s += vals[c * 20 + i];
            }
            prop_assert!((g[c] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn nsc_is_symmetric_and_non_negative(
        a in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 4), 1..4),
        shift in prop::collection::vec(-1.0f64..1.0, 4),
    ) {
        let b: Vec<Vec<f64>> = a.iter().map(|v| v.iter().zip(&shift).map(|(x, s)| x + s).collect()).collect();
        let eval = |old: &[Vec<f64>], new: &[Vec<f64>]| {
            let mut tape = Tape::new();
            let vars: Vec<_> = new.iter().map(|v| tape.constant(Tensor::vector(v.clone()))).collect();
            let l = nsc_from_vectors(&mut tape, old, &vars).unwrap();
            tape.scalar_value(l)
        };
        let (ab, ba) = (eval(&a, &b), eval(&b, &a));
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert_eq!(eval(&a, &a), 0.0);
    }

    #[test]
    fn sfp_is_non_negative(
        vals in prop::collection::vec(-1.0f64..1.0, 12),
        margin in 0.0f64..1.0,
    ) {
        let mut tape = Tape::new();
        let v = |tape: &mut Tape, s: &[f64]| tape.constant(Tensor::vector(s.to_vec()));
        let (o, n) = (v(&mut tape, &vals[0..3]), v(&mut tape, &vals[3..6]));
        let t = Triplet {
            class: 1,
            negative_class: 2,
            anchor: v(&mut tape, &vals[6..8]),
            positive: v(&mut tape, &vals[8..10]),
            negative: v(&mut tape, &vals[10..12]),
        };
        let s = sfp_loss(&mut tape, &[(o, n)], &[t], margin).unwrap();
        prop_assert!(tape.scalar_value(s.total) >= 0.0);
        let (a, p, neg) = (&vals[6..8], &vals[8..10], &vals[10..12]);
        let d = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        if d(a, neg) >= d(a, p) + margin {
            prop_assert_eq!(tape.scalar_value(s.triplet), 0.0);
        }
    }

    #[test]
    fn pure_batch_mean_prototypes_ignore_order(
        a in prop::collection::vec(-1.0f64..1.0, 3),
        b in prop::collection::vec(-1.0f64..1.0, 3),
    ) {
        let commit = |first: (ClassId, &Vec<f64>), second: (ClassId, &Vec<f64>)| {
            let mut s = PrototypeStore::new(3, 0.0);
            for (k, v) in [first, second] {
                s.commit(&BTreeMap::from([(k, v.clone())]), None);
            }
            s.current
        };
        prop_assert_eq!(commit((1, &a), (2, &b)), commit((2, &b), (1, &a)));
    }

    #[test]
    fn soft_map_rows_are_normalized(seed in any::<u64>(), vals in prop::collection::vec(-3.0f64..3.0, 3 * 64)) {
        let net = SegNetwork::new(NetConfig::default(), 4, seed).unwrap();
        let b = net.forward(&Tensor::new(vec![3, 8, 8], vals).unwrap()).unwrap();
        let s = softmax_rows(&b.logits).unwrap();
        let (k, h, w) = s.chw().unwrap();
        for i in 0..h * w {
            let total: f64 = (0..k).map(|r| s.data()[r * h * w + i]).sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
        }
        prop_assert_eq!(&s, &b.soft_map);
    }

    #[test]
    fn poly_rate_is_monotone(lr in 1e-4f64..1.0, power in 0.1f64..3.0, i_max in 1usize..500) {
        let cfg = StepConfig { lr, poly_power: power, ..StepConfig::default() };
        let mut prev = f64::INFINITY;
        for i in 0..=i_max {
            let r = cfg.lr_at(i, i_max);
            prop_assert!(r <= prev);
            prev = r;
        }
        prop_assert_eq!(cfg.lr_at(i_max, i_max), 0.0);
        prop_assert_eq!(cfg.lr_at(0, i_max), lr);
    }

    #[test]
    fn step_splits_are_prefixes_and_pure(
        present in prop::collection::vec(prop::collection::btree_set(1u16..=4, 1..4), 1..40),
        ratio in 0.01f64..=1.0,
        disjoint in any::<bool>(),
    ) {
        let data: Vec<LabeledImage> = present
            .iter()
            .map(|cls| {
                let mut d: Vec<ClassId> = cls.iter().map(|&c| c as ClassId).collect();
                d.resize(4, BACKGROUND);
                LabeledImage::new(Tensor::zeros(vec![3, 2, 2]), LabelMap { height: 2, width: 2, data: d }).unwrap()
            })
            .collect();
        let before = data.clone();
        let schedule = TaskSchedule {
            steps: vec![vec![1, 2], vec![3], vec![4]],
            protocol: if disjoint { Protocol::Disjoint } else { Protocol::Overlapped },
            data_ratio: ratio,
        };
        for t in 0..3 {
            let idx = select_for_step(&data, &schedule, t).unwrap();
            let out = split_for_step(&data, &schedule, t).unwrap();
            prop_assert_eq!(idx.len(), out.len());
            for img in &out {
                for &v in &img.labels.data {
                    prop_assert!(v == BACKGROUND || v == IGNORE || schedule.steps[t].contains(&v));
                }
            }
            // the kept set is a prefix of the matching images
            let matching: Vec<usize> = (0..data.len())
                .filter(|&i| {
                    let c = data[i].labels.classes();
                    let cur = schedule.steps[t].iter().any(|k| c.contains(k));
                    let fut = schedule.steps[t + 1..].iter().flatten().any(|k| c.contains(k));
                    cur && !(disjoint && fut)
                })
                .collect();
            prop_assert_eq!(&idx[..], &matching[..idx.len()]);
            if t > 0 && !matching.is_empty() {
                prop_assert!(!idx.is_empty());
            }
        }
        prop_assert_eq!(data, before);
    }
}
