mod common;

use bioserc::corpus::{Conversation, Split, Utterance};
use bioserc::eval::{length_bucket_counts, weighted_f1, ConfusionCounts};
use common::oracles::brute_force_weighted_f1;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn matches_brute_force_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..1000 {
        let k = rng.random_range(2..=7usize);
        let n = rng.random_range(1..=60usize);
        let gold: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        assert_eq!(weighted_f1(&gold, &pred).unwrap(), brute_force_weighted_f1(&gold, &pred, k));
    }
}

#[test]
fn hand_derived_two_thirds() {
    let f = weighted_f1(&["a", "a", "b"], &["a", "b", "b"]).unwrap();
    assert_eq!(f, 2.0 / 3.0);
}

fn labels() -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
    (1usize..40).prop_flat_map(|n| (prop::collection::vec(0u8..5, n), prop::collection::vec(0u8..5, n)))
}

proptest! {
    #[test]
    fn bounded_and_one_iff_equal((gold, pred) in labels()) {
        let f = weighted_f1(&gold, &pred).unwrap();
        prop_assert!((0.0..=1.0).contains(&f));
        prop_assert_eq!(f == 1.0, gold == pred);
        prop_assert_eq!(weighted_f1(&gold, &gold).unwrap(), 1.0);
    }

    #[test]
    fn invariant_under_relabeling((gold, pred) in labels(), shift in 1u8..5) {
        let rename = |v: &[u8]| v.iter().map(|x| (x + shift) % 5 + 10).collect::<Vec<_>>();
        prop_assert_eq!(weighted_f1(&gold, &pred).unwrap(), weighted_f1(&rename(&gold), &rename(&pred)).unwrap());
    }
}

fn conv(id: usize, gold: &[&str]) -> Conversation {
    Conversation {
        conversation_id: format!("c{id}"),
        split: Split::Test,
        utterances: gold
            .iter()
            .enumerate()
            .map(|(i, l)| Utterance {
                index: i,
                speaker_id: if i % 2 == 0 { "A".into() } else { "B".into() },
                text: format!("turn {i}"),
                gold_label: Some((*l).to_string()),
            })
            .collect(),
    }
}

#[test]
fn bucket_counts_recombine_to_global() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let names = ["joy", "anger", "neutral"];
    let mut convs = Vec::new();
    let mut preds = Vec::new();
    for c in 0..30 {
        let n = rng.random_range(1..12usize);
        let gold: Vec<&str> = (0..n).map(|_| names[rng.random_range(0..3)]).collect();
        preds.push((0..n).map(|_| names[rng.random_range(0..3)].to_string()).collect::<Vec<_>>());
        convs.push(conv(c, &gold));
    }
    let mut pooled = ConfusionCounts::default();
    for (_, _, counts) in length_bucket_counts(&convs, &preds, 4).unwrap() {
        pooled.merge(&counts);
    }
    let mut global = ConfusionCounts::default();
    for (c, p) in convs.iter().zip(&preds) {
        for (u, l) in c.utterances.iter().zip(p) {
            global.record(u.gold_label.as_ref().unwrap(), l);
        }
    }
    assert_eq!(pooled, global);
}
