use modattn_core::vocab::tokenize;
use modattn_eval::metrics::{bleu, cider, MetricReport};
use proptest::prelude::*;

fn refs(sets: &[&[&str]]) -> Vec<Vec<Vec<String>>> {
    sets.iter().map(|s| s.iter().map(|c| tokenize(c)).collect()).collect()
}

fn single_ref_corpus() -> Vec<Vec<Vec<String>>> {
    refs(&[
        &["a man is slicing a tomato on a board"],
        &["two dogs are running through the green grass"],
        &["a woman plays the piano in a room"],
        &["a cat is sleeping on a soft red couch"],
    ])
}

fn multi_ref_corpus() -> (Vec<Vec<String>>, Vec<Vec<Vec<String>>>) {
    let r = refs(&[
        &["a man is slicing a tomato", "someone cuts a tomato with a knife", "a man slices tomatoes"],
        &["two dogs run on grass", "dogs are playing outside", "two dogs are running"],
        &["a woman plays piano", "a lady is playing the piano", "someone plays a piano"],
    ]);
    let h = ["a man is cutting a tomato", "two dogs are playing", "a man plays the guitar"]
        .iter()
        .map(|s| tokenize(s))
        .collect();
    (h, r)
}

#[test]
fn identical_captions_score_ten_and_one() {
    let r = single_ref_corpus();
    let h: Vec<Vec<String>> = r.iter().map(|x| x[0].clone()).collect();
    let report = MetricReport::compute(&h, &r).unwrap();
    assert!((report.cider - 10.0).abs() < 1e-6, "{}", report.cider);
    assert!((report.bleu4 - 1.0).abs() < 1e-12);
    for c in report.per_clip_cider {
        assert!((c - 10.0).abs() < 1e-6);
    }
}

// Values produced once by the public captioning-challenge scorer on this
// corpus.
#[test]
fn cider_matches_public_scorer() {
    let (h, r) = multi_ref_corpus();
    let (mean, per) = cider(&h, &r).unwrap();
    let want = [2.2383316463586924, 3.8702281019984697, 0.8125312407800396];
    for (g, w) in per.iter().zip(want) {
        assert!((g - w).abs() < 1e-9, "{g} vs {w}");
    }
    assert!((mean - 2.3070303297124006).abs() < 1e-9);
}

// The public scorer adds a tiny smoothing constant to every precision, which
// is why its BLEU4 here is 6.9e-5 rather than 0; orders 1-3 agree.
#[test]
fn bleu_matches_public_scorer_where_unsmoothed() {
    let (h, r) = multi_ref_corpus();
    let b = bleu(&h, &r).unwrap();
    let want = [0.7999999999466668, 0.6324555319862418, 0.5108729548845706];
    for (g, w) in b.scores.iter().zip(want) {
        assert!((g - w).abs() < 1e-8, "{g} vs {w}");
    }
    assert_eq!(b.scores[3], 0.0);
}

fn word() -> impl Strategy<Value = String> {
    prop::sample::select(vec!["a", "b", "c", "d", "e", "f"]).prop_map(String::from)
}

fn corpus() -> impl Strategy<Value = (Vec<Vec<String>>, Vec<Vec<Vec<String>>>)> {
    (2usize..6).prop_flat_map(|n| {
        (
            prop::collection::vec(prop::collection::vec(word(), 0..7), n),
            prop::collection::vec(prop::collection::vec(prop::collection::vec(word(), 1..7), 1..4), n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn metrics_are_order_invariant_and_bounded((h, r) in corpus(), rot in 0usize..6) {
        let n = h.len();
        let k = rot % n;
        let mut h2 = h.clone();
        let mut r2 = r.clone();
        h2.rotate_left(k);
        r2.rotate_left(k);
        let a = bleu(&h, &r).unwrap();
        let b = bleu(&h2, &r2).unwrap();
        for (x, y) in a.scores.iter().zip(&b.scores) {
            prop_assert!((x - y).abs() < 1e-12);
            prop_assert!((0.0..=1.0 + 1e-12).contains(x));
        }
        let (ca, _) = cider(&h, &r).unwrap();
        let (cb, _) = cider(&h2, &r2).unwrap();
        prop_assert!((ca - cb).abs() < 1e-9);
        prop_assert!(ca >= 0.0);
    }

    #[test]
    fn exact_match_of_some_reference_gives_bleu_one((_, r) in corpus(), pick in 0usize..4) {
        let h: Vec<Vec<String>> = r.iter().map(|x| x[pick % x.len()].clone()).collect();
        let b = bleu(&h, &r).unwrap();
        let longest = h.iter().map(Vec::len).max().unwrap();
        for n in 0..4.min(longest) {
            if h.iter().map(|x| x.len().saturating_sub(n)).sum::<usize>() > 0 {
                prop_assert!((b.scores[n] - 1.0).abs() < 1e-12);
            }
        }
    }
}
