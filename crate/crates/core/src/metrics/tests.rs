use super::*;
use proptest::prelude::*;
use std::collections::BTreeSet;

fn p(n: usize, clusters: &[&[usize]]) -> Partition {
    Partition::new(n, clusters.iter().map(|c| c.to_vec()).collect()).unwrap()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-12
}

#[test]
fn identical_partitions_score_one() {
    let g = p(3, &[&[0, 1], &[2]]);
    for s in [muc(&g, &g).unwrap(), b_cubed(&g, &g).unwrap(), ceaf_phi4(&g, &g).unwrap()] {
        assert_eq!((s.recall, s.precision, s.f1), (1.0, 1.0, 1.0));
    }
}

#[test]
fn muc_all_singleton_prediction() {
    let g = p(3, &[&[0, 1, 2]]);
    let s = muc(&g, &Partition::singletons(3)).unwrap();
    assert_eq!((s.recall, s.f1), (0.0, 0.0));
}

#[test]
fn muc_without_links_scores_zero() {
    // No gold or predicted links: both denominators vanish.
    let s = muc(&Partition::singletons(4), &Partition::singletons(4)).unwrap();
    assert_eq!((s.recall, s.precision, s.f1), (0.0, 0.0, 0.0));
}

#[test]
fn b_cubed_split_pair() {
    let g = p(2, &[&[0, 1]]);
    let s = b_cubed(&g, &Partition::singletons(2)).unwrap();
    assert!(close(s.recall, 0.5));
    assert!(close(s.precision, 1.0));
    assert!(close(s.f1, 2.0 / 3.0));
}

#[test]
fn ceaf_split_pair() {
    let g = p(2, &[&[0, 1]]);
    let s = ceaf_phi4(&g, &Partition::singletons(2)).unwrap();
    assert!(close(s.recall, 2.0 / 3.0));
    assert!(close(s.precision, 1.0 / 3.0));
}

#[test]
fn conll_composition() {
    assert_eq!(conll_f1(1.0, 1.0, 1.0), 1.0);
    assert!((conll_f1(0.3186, 0.7806, 0.7547) - 0.6179).abs() < 5e-4);
}

#[test]
fn mismatched_universe_is_rejected() {
    let a = Partition::singletons(3);
    let b = Partition::singletons(4);
    assert!(matches!(muc(&a, &b), Err(Error::Contract(_))));
    assert!(b_cubed(&a, &b).is_err());
    assert!(ceaf_phi4(&a, &b).is_err());
}

#[test]
fn grounding_examples() {
    let gold = vec![
        Some(BBox::new(0.1, 0.1, 0.2, 0.2)),
        Some(BBox::new(0.5, 0.5, 0.2, 0.2)),
        None,
        Some(BBox::new(0.0, 0.6, 0.3, 0.3)),
    ];
    let kinds = [MentionKind::NounPhrase, MentionKind::Pronoun, MentionKind::Pronoun, MentionKind::NounPhrase];
    let exact: Vec<BBox> = gold.iter().map(|b| b.unwrap_or(BBox::new(0.9, 0.9, 0.05, 0.05))).collect();
    let s = grounding_accuracy(&exact, &gold, &kinds).unwrap();
    assert_eq!((s.np_acc, s.pron_acc, s.overall_acc), (1.0, 1.0, 1.0));
    let far = vec![BBox::new(0.8, 0.0, 0.1, 0.1); 4];
    let s = grounding_accuracy(&far, &gold, &kinds).unwrap();
    assert_eq!((s.np_acc, s.pron_acc, s.overall_acc), (0.0, 0.0, 0.0));
    // Hand count: mention 0 exact (IoU 1), mention 1 shifted by half a width
    // (IoU 1/3), mention 3 slightly shrunk (IoU 0.81).
    let mixed = vec![
        BBox::new(0.1, 0.1, 0.2, 0.2),
        BBox::new(0.6, 0.5, 0.2, 0.2),
        BBox::new(0.0, 0.0, 0.1, 0.1),
        BBox::new(0.0, 0.6, 0.27, 0.27),
    ];
    let c = grounding_counts(&mixed, &gold, &kinds).unwrap();
    assert_eq!(
        c,
        GroundingCounts {
            np_correct: 2,
            np_total: 2,
            pron_correct: 0,
            pron_total: 1
        }
    );
    assert!(close(c.scores().overall_acc, 2.0 / 3.0));
}

#[test]
fn micro_aggregation_sums_counts() {
    let g1 = p(3, &[&[0, 1, 2]]);
    let p1 = p(3, &[&[0, 1], &[2]]);
    let g2 = p(2, &[&[0, 1]]);
    let p2 = p(2, &[&[0, 1]]);
    let mut ev = Evaluator::new();
    ev.add_coref(&g1, &p1).unwrap();
    ev.add_coref(&g2, &p2).unwrap();
    let r = ev.report();
    // MUC recall: (1 + 1) / (2 + 1); precision: (1 + 1) / (1 + 1).
    assert!(close(r.muc.recall, 2.0 / 3.0));
    assert!(close(r.muc.precision, 1.0));
    // B³ recall: (2/3 + 2/3 + 1/3 + 1 + 1) / 5.
    assert!(close(r.b3.recall, (2.0 / 3.0 + 2.0 / 3.0 + 1.0 / 3.0 + 2.0) / 5.0));
    assert!(close(r.conll_f1, (r.muc.f1 + r.b3.f1 + r.ceaf.f1) / 3.0));
    assert_eq!(r.n_documents, 2);
    assert_eq!(r.n_mentions, 5);
}

// Oracles written directly from the metric definitions.

fn muc_oracle(key: &Partition, resp: &Partition) -> (f64, f64) {
    // Correct links inside a key cluster = |K| − components of K when only
    // response-cluster edges are kept.
    let rl = resp.labels();
    let mut num = 0.0;
    let mut den = 0.0;
    for k in key.clusters() {
        let mut comp: Vec<usize> = (0..k.len()).collect();
        for a in 0..k.len() {
            for b in 0..k.len() {
                if rl[k[a]] == rl[k[b]] {
                    let (ca, cb) = (comp[a], comp[b]);
                    for c in comp.iter_mut() {
                        if *c == cb {
                            *c = ca;
                        }
                    }
                }
            }
        }
        let pieces: BTreeSet<usize> = comp.into_iter().collect();
        num += (k.len() - pieces.len()) as f64;
        den += k.len() as f64 - 1.0;
    }
    (num, den)
}

fn b3_oracle(gold: &Partition, pred: &Partition) -> (f64, f64) {
    let n = gold.n_mentions();
    let find = |part: &Partition, m: usize| -> BTreeSet<usize> {
        part.clusters().iter().find(|c| c.contains(&m)).unwrap().iter().copied().collect()
    };
    let (mut r, mut p) = (0.0, 0.0);
    for m in 0..n {
        let g = find(gold, m);
        let q = find(pred, m);
        let inter = g.intersection(&q).count() as f64;
        r += inter / g.len() as f64;
        p += inter / q.len() as f64;
    }
    (r / n as f64, p / n as f64)
}

fn partitions() -> impl Strategy<Value = (Partition, Partition)> {
    (1usize..7).prop_flat_map(|n| {
        (
            proptest::collection::vec(0usize..n, n),
            proptest::collection::vec(0usize..n, n),
        )
            .prop_map(|(a, b)| (Partition::from_labels(&a), Partition::from_labels(&b)))
    })
}

proptest! {
    #[test]
    fn muc_matches_link_oracle((g, q) in partitions()) {
        let s = muc(&g, &q).unwrap();
        let (rn, rd) = muc_oracle(&g, &q);
        let (pn, pd) = muc_oracle(&q, &g);
        let r = if rd > 0.0 { rn / rd } else { 0.0 };
        let pr = if pd > 0.0 { pn / pd } else { 0.0 };
        prop_assert!(close(s.recall, r));
        prop_assert!(close(s.precision, pr));
    }

    #[test]
    fn b3_matches_set_oracle((g, q) in partitions()) {
        let s = b_cubed(&g, &q).unwrap();
        let (r, pr) = b3_oracle(&g, &q);
        prop_assert!(close(s.recall, r));
        prop_assert!(close(s.precision, pr));
    }

    #[test]
    fn swapping_swaps_recall_and_precision((g, q) in partitions()) {
        for f in [muc, b_cubed, ceaf_phi4] {
            let a = f(&g, &q).unwrap();
            let b = f(&q, &g).unwrap();
            prop_assert!(close(a.recall, b.precision));
            prop_assert!(close(a.precision, b.recall));
        }
    }

    #[test]
    fn values_in_unit_interval_and_ceaf_bounded((g, q) in partitions()) {
        for f in [muc, b_cubed, ceaf_phi4] {
            let s = f(&g, &q).unwrap();
            for v in [s.recall, s.precision, s.f1] {
                prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
            }
        }
        let c = ceaf_phi4_counts(&g, &q).unwrap();
        prop_assert!(c.recall_num <= g.len().min(q.len()) as f64 + 1e-12);
    }

    #[test]
    fn perfect_scores_only_for_identical((g, q) in partitions()) {
        let b = b_cubed(&g, &q).unwrap();
        let c = ceaf_phi4(&g, &q).unwrap();
        prop_assert_eq!(b.f1 == 1.0, g == q);
        prop_assert_eq!(c.f1 == 1.0, g == q);
    }
}
