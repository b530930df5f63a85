use super::*;
use crate::rng::SeedTree;
use proptest::prelude::*;
use rand::Rng;
use std::collections::BTreeMap;

// Independent corpus BLEU: string-keyed n-gram maps, product of precisions.
fn oracle_bleu(hyps: &[String], refs: &[String]) -> f64 {
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hyps.iter().zip(refs) {
        let hw: Vec<&str> = h.split(' ').filter(|w| !w.is_empty()).collect();
        let rw: Vec<&str> = rf.split(' ').filter(|w| !w.is_empty()).collect();
        c += hw.len();
        r += rw.len();
        for n in 1..=4 {
            let mut hc: BTreeMap<String, usize> = BTreeMap::new();
            let mut rc: BTreeMap<String, usize> = BTreeMap::new();
            for i in 0..(hw.len() + 1).saturating_sub(n) {
                *hc.entry(hw[i..i + n].join(" ")).or_default() += 1;
            }
            for i in 0..(rw.len() + 1).saturating_sub(n) {
                *rc.entry(rw[i..i + n].join(" ")).or_default() += 1;
            }
            for (g, k) in &hc {
                matched[n - 1] += (*k).min(*rc.get(g).unwrap_or(&0));
                total[n - 1] += k;
            }
        }
    }
    if matched.contains(&0) {
        return 0.0;
    }
    let prod: f64 = (0..4).map(|n| matched[n] as f64 / total[n] as f64).product();
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    100.0 * bp * prod.powf(0.25)
}

fn random_sentence<R: Rng>(rng: &mut R, vocab: usize, max_len: usize) -> String {
    let n = rng.random_range(0..=max_len);
    (0..n).map(|_| format!("w{}", rng.random_range(0..vocab))).collect::<Vec<_>>().join(" ")
}

fn random_corpus(seed: u64, lines: usize) -> (Vec<String>, Vec<String>) {
    let mut rng = SeedTree::new(seed).stream("bleu");
    let refs: Vec<String> = (0..lines).map(|_| random_sentence(&mut rng, 6, 12)).collect();
    // hypotheses share material with references so scores are not all zero
    let hyps = refs
        .iter()
        .map(|r| {
            let mut w: Vec<String> = r.split(' ').filter(|s| !s.is_empty()).map(String::from).collect();
            for x in w.iter_mut() {
                if rng.random_bool(0.25) {
                    *x = format!("w{}", rng.random_range(0..6));
                }
            }
            if rng.random_bool(0.3) {
                w.push("w1".into());
            }
            if rng.random_bool(0.3) && !w.is_empty() {
                w.pop();
            }
            w.join(" ")
        })
        .collect();
    (hyps, refs)
}

#[test]
fn corpus_bleu_matches_independent_implementation() {
    let mut nonzero = 0;
    for seed in 0..50 {
        let (h, r) = random_corpus(seed, 20);
        let got = corpus_bleu(&h, &r).unwrap();
        let want = oracle_bleu(&h, &r);
        assert!((got - want).abs() < 1e-9, "seed {seed}: {got} vs {want}");
        if got > 0.0 {
            nonzero += 1;
        }
    }
    assert!(nonzero > 40);
}

#[test]
fn clipped_unigram_precision() {
    let s = BleuStats::from_text("the the the the the the the", "the cat is on the mat");
    assert_eq!(s.matches[0], 2);
    assert_eq!(s.totals[0], 7);
}

#[test]
fn identical_corpus_scores_one_hundred() {
    let refs = vec!["a b c d e".to_string(), "x y z w".to_string()];
    assert!((corpus_bleu(&refs, &refs).unwrap() - 100.0).abs() < 1e-9);
    assert!(corpus_bleu::<String, String>(&[], &[]).is_err());
    assert!(corpus_bleu(&refs[..1], &refs).is_err());
}

#[test]
fn brevity_penalty_applies_to_short_output() {
    let s = BleuStats::from_text("a b c d", "a b c d e f g h");
    let want = 100.0 * (1.0f64 - 2.0).exp();
    assert!((s.score() - want).abs() < 1e-9);
}

fn systems_from(lines: &[&[&str]]) -> Vec<Vec<String>> {
    lines.iter().map(|s| s.iter().map(|x| x.to_string()).collect()).collect()
}

#[test]
fn rfb_examples() {
    let refs: Vec<String> = vec!["a b c d e".into(), "f g h i j".into()];
    let perfect = refs.clone();
    let disjoint: Vec<String> = vec!["q r s t u".into(), "v w x y z".into()];
    assert!((rfb(&[perfect.clone(), perfect.clone()], &refs, Aggregation::Corpus).unwrap() - 100.0).abs() < 1e-9);
    let one = rfb(std::slice::from_ref(&perfect), &refs, Aggregation::Corpus).unwrap();
    assert_eq!(one, corpus_bleu(&perfect, &refs).unwrap());
    let mixed = rfb(&[perfect, disjoint], &refs, Aggregation::Corpus).unwrap();
    assert!((mixed - 50.0).abs() < 1e-9);
    let ragged = systems_from(&[&["a"], &["a", "b"]]);
    assert!(rfb(&ragged, &refs, Aggregation::Corpus).is_err());
}

#[test]
fn pwb_examples() {
    let same = systems_from(&[&["a b c d e", "k l m n"], &["a b c d e", "k l m n"], &["a b c d e", "k l m n"]]);
    assert_eq!(pwb(&same, Aggregation::Corpus).unwrap(), 100.0);
    let apart = systems_from(&[&["a b c d"], &["e f g h"]]);
    assert_eq!(pwb(&apart, Aggregation::Corpus).unwrap(), 0.0);
    assert!(pwb(&systems_from(&[&["a"]]), Aggregation::Corpus).is_err());
}

#[test]
fn pwb_matches_brute_force_pairs() {
    for seed in 0..10 {
        let mut rng = SeedTree::new(seed).stream("pwb");
        let base: Vec<String> = (0..8).map(|_| random_sentence(&mut rng, 4, 10)).collect();
        let systems: Vec<Vec<String>> = (0..3)
            .map(|_| {
                base.iter()
                    .map(|b| {
                        b.split(' ')
                            .filter(|w| !w.is_empty())
                            .map(|w| if rng.random_bool(0.2) { "zz" } else { w })
                            .collect::<Vec<_>>()
                            .join(" ")
                    })
                    .collect()
            })
            .collect();
        let pairs = [(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)];
        let want = pairs.iter().map(|&(a, b)| oracle_bleu(&systems[a], &systems[b])).sum::<f64>() / 6.0;
        let got = pwb(&systems, Aggregation::Corpus).unwrap();
        assert!((got - want).abs() < 1e-9, "seed {seed}: {got} vs {want}");
    }
}

#[test]
fn eda_golden_values() {
    for (rfb, pwb, r, want) in [
        (25.50, 57.50, 27.70, 17.79),
        (25.12, 60.02, 27.43, 18.49),
        (25.24, 59.43, 27.43, 18.15),
    ] {
        let got = eda(rfb, pwb, r, 100.0).unwrap();
        assert!((got - want).abs() <= 0.01, "eda({rfb}, {pwb}, {r}) = {got}, want {want}");
    }
    assert_eq!(eda(27.0, 0.0, 27.0, 100.0).unwrap(), 0.0);
    assert!(eda(20.0, 10.0, 0.0, 100.0).is_err());
}

proptest! {
    #[test]
    fn eda_is_monotone(rfb in 0.0f64..30.0, pwb in 0.0f64..100.0, d in 0.01f64..5.0) {
        let r = 30.0;
        let base = eda(rfb, pwb, r, 100.0).unwrap();
        if rfb + d <= r {
            prop_assert!(eda(rfb + d, pwb, r, 100.0).unwrap() < base);
        }
        if pwb + d <= 100.0 {
            prop_assert!(eda(rfb, pwb + d, r, 100.0).unwrap() > base);
        }
    }

    #[test]
    fn pwb_is_permutation_invariant(seed in 0u64..1000, perm in Just([2usize, 0, 1])) {
        let mut rng = SeedTree::new(seed).stream("perm");
        let systems: Vec<Vec<String>> = (0..3)
            .map(|_| (0..5).map(|_| random_sentence(&mut rng, 3, 8)).collect())
            .collect();
        let shuffled: Vec<Vec<String>> = perm.iter().map(|&i| systems[i].clone()).collect();
        let a = pwb(&systems, Aggregation::Corpus).unwrap();
        let b = pwb(&shuffled, Aggregation::Corpus).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn corpus_score_ignores_sentence_order(seed in 0u64..1000) {
        let (h, r) = random_corpus(seed, 12);
        let mut idx: Vec<usize> = (0..h.len()).collect();
        idx.reverse();
        idx.rotate_left((seed % 12) as usize);
        let h2: Vec<String> = idx.iter().map(|&i| h[i].clone()).collect();
        let r2: Vec<String> = idx.iter().map(|&i| r[i].clone()).collect();
        prop_assert_eq!(corpus_bleu(&h, &r).unwrap(), corpus_bleu(&h2, &r2).unwrap());
    }
}

#[test]
fn sentence_aggregation_averages_sentence_scores() {
    let refs: Vec<String> = vec!["a b c d e".into(), "f g h i j".into()];
    let hyps: Vec<String> = vec!["a b c d e".into(), "q r s t u".into()];
    assert!((bleu(&hyps, &refs, Aggregation::Sentence).unwrap() - 50.0).abs() < 1e-9);
}

fn fixture_file(k: usize, rows: &[[&str; 3]]) -> String {
    let mut s = format!("# mode = mixdiv\n# K = {k}\n");
    for (n, r) in rows.iter().enumerate() {
        for (j, t) in r.iter().take(k).enumerate() {
            s.push_str(&format!("{}\t{}\t{}\t{}\n", n, j, n + j + 1, t));
        }
    }
    s
}

#[test]
fn evaluate_run_matches_hand_assembled_report() {
    let dir = tempfile::tempdir().unwrap();
    let refs: Vec<String> = (0..10).map(|i| format!("t{} t{} t{} t{} t{}", i, i + 1, i + 2, i + 3, i + 4)).collect();
    let rows: Vec<[String; 3]> = (0..10)
        .map(|i| {
            [
                refs[i].clone(),
                format!("t{} t{} t{} t{} x", i, i + 1, i + 2, i + 3),
                format!("y t{} t{} t{} t{}", i + 1, i + 2, i + 3, i + 4),
            ]
        })
        .collect();
    let borrowed: Vec<[&str; 3]> = rows.iter().map(|r| [r[0].as_str(), r[1].as_str(), r[2].as_str()]).collect();
    let hp = dir.path().join("hyp.tsv");
    let rp = dir.path().join("ref.txt");
    std::fs::write(&hp, fixture_file(3, &borrowed)).unwrap();
    std::fs::write(&rp, refs.join("\n") + "\n").unwrap();
    let report = evaluate_run(&hp, &rp, 40.0, Aggregation::Corpus).unwrap();
    let systems: Vec<Vec<String>> = (0..3).map(|k| rows.iter().map(|r| r[k].clone()).collect()).collect();
    let want_rfb = (0..3).map(|k| oracle_bleu(&systems[k], &refs)).sum::<f64>() / 3.0;
    let mut want_pwb = 0.0;
    for a in 0..3 {
        for b in 0..3 {
            if a != b {
                want_pwb += oracle_bleu(&systems[a], &systems[b]) / 6.0;
            }
        }
    }
    assert!((report.rfb - want_rfb).abs() < 1e-9);
    assert!((report.pwb - want_pwb).abs() < 1e-9);
    let want_eda = 100.0 * (((40.0 - want_rfb) / 40.0f64).powi(2) + (0.4 * want_pwb / 100.0f64).powi(2)).sqrt();
    assert!((report.eda - want_eda).abs() < 1e-9);
    assert_eq!(report.omega, 40.0 / 100.0);
    assert!(report.rfb_above_r);
    assert_eq!(report.k, 3);
    assert_eq!(report.inputs, 10);
    let row = report.csv_row(0.3, 7);
    assert_eq!(row.split(',').count(), MetricsReport::CSV_HEADER.split(',').count());
    assert!(row.starts_with("0.3,7,3,"));
}

#[test]
fn collapsed_outputs_give_full_pairwise_bleu() {
    let refs: Vec<String> = vec!["a b c d e".into(), "f g h i j".into()];
    let sys: Vec<Vec<String>> = vec![vec!["a b c d x".into(), "f g h i y".into()]; 4];
    let r = rfb(&sys, &refs, Aggregation::Corpus).unwrap();
    let rep = MetricsReport::new(&sys, &refs, r, Aggregation::Corpus).unwrap();
    assert_eq!(rep.pwb, 100.0);
    // faithful but collapsed: the whole distance comes from the pwb term
    assert!((rep.eda - 100.0 * rep.omega).abs() < 1e-9);
}

#[test]
fn hypotheses_file_round_trip_and_errors() {
    let p = Path::new("h.tsv");
    let text = "# tau = 0.3\n# seed = 2\n0\t0\t5\ta b\n0\t1\t7\t\n1\t0\t-\tc\n1\t1\t3\td e\n";
    let f = HypothesesFile::parse(p, text).unwrap();
    assert_eq!(f.get("tau"), Some("0.3"));
    assert_eq!(f.k(), 2);
    assert_eq!(f.systems(), vec![vec!["a b".to_string(), "c".into()], vec!["".to_string(), "d e".into()]]);
    assert_eq!(f.groups[1][0].partner, None);
    assert_eq!(f.render(), text);
    for (bad, line) in [
        ("0\t0\t1\n", 1),
        ("0\t0\t1\ta\n2\t0\t1\tb\n", 2),
        ("0\t0\tx\ta\n", 1),
        ("0\t0\t1\ta\n0\t2\t1\tb\n", 2),
    ] {
        match HypothesesFile::parse(p, bad) {
            Err(Error::Format { line: l, .. }) => assert_eq!(l, line, "{bad:?}"),
            other => panic!("expected format error for {bad:?}, got {other:?}"),
        }
    }
    assert!(HypothesesFile::parse(p, "0\t0\t1\ta\n0\t1\t1\tb\n1\t0\t1\tc\n").is_err());
}
