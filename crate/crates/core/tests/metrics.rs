use proptest::prelude::*;
use signtrans::metrics::{
    bleu, cider, meteor, rouge_l, sentence_accuracy, tokenize, word_accuracy, ReferenceSet,
    Sentence,
};

// ---- brute-force oracles -------------------------------------------------

fn oracle_edit(a: &[String], b: &[String]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let sub = oracle_edit(ra, rb) + usize::from(x != y);
            sub.min(oracle_edit(ra, b) + 1).min(oracle_edit(a, rb) + 1)
        }
    }
}

fn is_subsequence(sub: &[&String], of: &[String]) -> bool {
    let mut it = of.iter();
    sub.iter().all(|s| it.any(|t| t == *s))
}

fn oracle_lcs(a: &[String], b: &[String]) -> usize {
    (0u32..1 << a.len())
        .filter_map(|mask| {
            let pick: Vec<&String> = (0..a.len())
                .filter(|i| mask & (1 << i) != 0)
                .map(|i| &a[i])
                .collect();
            is_subsequence(&pick, b).then_some(pick.len())
        })
        .max()
        .unwrap_or(0)
}

/// Every partial one-to-one matching of equal tokens; returns (max matches, min chunks among those).
fn oracle_alignment(h: &[String], r: &[String]) -> (usize, usize) {
    fn rec(
        h: &[String],
        r: &[String],
        i: usize,
        used: &mut Vec<bool>,
        pairs: &mut Vec<(usize, usize)>,
        best: &mut (usize, usize),
    ) {
        if i == h.len() {
            let m = pairs.len();
            let mut chunks = 0;
            for (k, &(hi, rj)) in pairs.iter().enumerate() {
                let cont = k > 0 && pairs[k - 1].0 + 1 == hi && pairs[k - 1].1 + 1 == rj;
                if !cont {
                    chunks += 1;
                }
            }
            if m > best.0 || (m == best.0 && chunks < best.1) {
                *best = (m, chunks);
            }
            return;
        }
        rec(h, r, i + 1, used, pairs, best);
        for j in 0..r.len() {
            if !used[j] && r[j] == h[i] {
                used[j] = true;
                pairs.push((i, j));
                rec(h, r, i + 1, used, pairs, best);
                pairs.pop();
                used[j] = false;
            }
        }
    }
    let mut best = (0, usize::MAX);
    rec(
        h,
        r,
        0,
        &mut vec![false; r.len()],
        &mut Vec::new(),
        &mut best,
    );
    if best.0 == 0 {
        (0, 0)
    } else {
        best
    }
}

fn oracle_meteor(h: &[String], r: &[String]) -> f64 {
    let (m, c) = oracle_alignment(h, r);
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / h.len() as f64;
    let rc = m as f64 / r.len() as f64;
    let f = 10.0 * p * rc / (rc + 9.0 * p);
    f * (1.0 - 0.5 * (c as f64 / m as f64).powi(3))
}

fn grams(s: &[String], n: usize) -> Vec<Vec<String>> {
    if s.len() < n {
        return Vec::new();
    }
    (0..=s.len() - n).map(|i| s[i..i + n].to_vec()).collect()
}

fn count(g: &[String], list: &[Vec<String>]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

fn oracle_bleu(hyps: &[Sentence], refs: &[Vec<Sentence>], max_n: usize) -> f64 {
    let mut m = vec![0.0; max_n];
    let mut t = vec![0.0; max_n];
    let (mut c, mut r) = (0.0, 0.0);
    for (h, rs) in hyps.iter().zip(refs) {
        c += h.len() as f64;
        let mut lens: Vec<usize> = rs.iter().map(Vec::len).collect();
        lens.sort_by_key(|&l| ((l as i64 - h.len() as i64).abs(), l));
        r += lens[0] as f64;
        for n in 1..=max_n {
            let hg = grams(h, n);
            let mut seen: Vec<Vec<String>> = Vec::new();
            for g in &hg {
                if seen.contains(g) {
                    continue;
                }
                seen.push(g.clone());
                let cap = rs.iter().map(|x| count(g, &grams(x, n))).max().unwrap();
                m[n - 1] += count(g, &hg).min(cap) as f64;
            }
            t[n - 1] += hg.len() as f64;
        }
    }
    if c == 0.0 || m[0] == 0.0 {
        return 0.0;
    }
    let smooth = m.contains(&0.0);
    let mut prod = 1.0;
    for n in 0..max_n {
        prod *= if smooth && n > 0 {
            (m[n] + 1.0) / (t[n] + 1.0)
        } else {
            m[n] / t[n]
        };
    }
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * prod.powf(1.0 / max_n as f64)
}

fn oracle_cider(hyps: &[Sentence], refs: &[Vec<Sentence>]) -> f64 {
    let docs = hyps.len() as f64;
    let mut total = 0.0;
    for n in 1..=4 {
        let df = |g: &[String]| {
            refs.iter()
                .filter(|rs| rs.iter().any(|x| count(g, &grams(x, n)) > 0))
                .count()
        };
        let vec_of = |s: &[String]| -> Vec<(Vec<String>, f64)> {
            let gs = grams(s, n);
            let mut out: Vec<(Vec<String>, f64)> = Vec::new();
            for g in &gs {
                if out.iter().any(|(k, _)| k == g) {
                    continue;
                }
                let tf = count(g, &gs) as f64 / gs.len() as f64;
                let idf = (docs / (df(g).max(1) as f64)).ln();
                out.push((g.clone(), tf * idf));
            }
            out
        };
        for (h, rs) in hyps.iter().zip(refs) {
            let hv = vec_of(h);
            let mut acc = 0.0;
            for x in rs {
                let rv = vec_of(x);
                let dot: f64 = hv
                    .iter()
                    .map(|(k, a)| rv.iter().find(|(j, _)| j == k).map_or(0.0, |(_, b)| a * b))
                    .sum();
                let na: f64 = hv.iter().map(|(_, a)| a * a).sum::<f64>().sqrt();
                let nb: f64 = rv.iter().map(|(_, b)| b * b).sum::<f64>().sqrt();
                if na > 0.0 && nb > 0.0 {
                    acc += dot / (na * nb);
                }
            }
            total += acc / rs.len() as f64;
        }
    }
    10.0 * total / (4.0 * docs)
}

// ---- fixed cases ---------------------------------------------------------

fn cases() -> Vec<(Sentence, Vec<Sentence>)> {
    let raw: [(&str, &[&str]); 20] = [
        ("the police found a gun", &["the police found a gun"]),
        ("police gun", &["the police found a gun"]),
        ("help me please", &["help me", "please help me"]),
        ("", &["a b c"]),
        ("a a a a", &["a b", "b a a"]),
        ("c b a", &["a b c"]),
        (
            "fire in the house",
            &["the house is on fire", "there is a fire in the house"],
        ),
        ("x y z", &["a b c"]),
        ("a b a b a", &["b a b a b"]),
        (
            "my car was stolen",
            &["someone stole my car", "my car was stolen", "car stolen"],
        ),
        (
            "call an ambulance now",
            &["please call an ambulance", "an ambulance now"],
        ),
        ("a b c d e f", &["f e d c b a"]),
        ("the the the the", &["the cat"]),
        ("help", &["help"]),
        ("a b c a b c", &["a b c"]),
        (
            "i fell down the stairs",
            &["i fell down", "down the stairs i fell"],
        ),
        ("water water", &["water please", "give me water"]),
        ("b c d", &["a b c d e"]),
        (
            "one two three four five",
            &["one two four three five", "five four three two one"],
        ),
        ("hurt leg", &["my leg is hurt", "leg hurt"]),
    ];
    raw.iter()
        .map(|(h, rs)| (tokenize(h), rs.iter().map(|r| tokenize(r)).collect()))
        .collect()
}

fn sets(refs: &[Vec<Sentence>]) -> Vec<ReferenceSet> {
    refs.iter()
        .map(|r| ReferenceSet::new(r.clone()).unwrap())
        .collect()
}

fn best<F: Fn(&[String], &[String]) -> f64>(h: &[String], rs: &[Sentence], f: F) -> f64 {
    rs.iter().map(|r| f(h, r)).fold(0.0, f64::max)
}

#[test]
fn sentence_metrics_match_brute_force() {
    for (i, (h, rs)) in cases().into_iter().enumerate() {
        let hyps = vec![h.clone()];
        let refs = sets(std::slice::from_ref(&rs));

        let acc = if rs.contains(&h) { 1.0 } else { 0.0 };
        assert_eq!(sentence_accuracy(&hyps, &refs).unwrap(), acc, "case {i}");

        let wa = best(&h, &rs, |h, r| {
            (1.0 - oracle_edit(h, r) as f64 / r.len() as f64).max(0.0)
        });
        assert!(
            (word_accuracy(&hyps, &refs).unwrap() - wa).abs() < 1e-6,
            "word case {i}"
        );

        let rl = best(&h, &rs, |h, r| {
            let l = oracle_lcs(h, r) as f64;
            if l == 0.0 {
                0.0
            } else {
                let (p, q) = (l / h.len() as f64, l / r.len() as f64);
                2.0 * p * q / (p + q)
            }
        });
        assert!(
            (rouge_l(&hyps, &refs).unwrap() - rl).abs() < 1e-6,
            "rouge case {i}"
        );

        let mt = best(&h, &rs, oracle_meteor);
        assert!(
            (meteor(&hyps, &refs).unwrap() - mt).abs() < 1e-6,
            "meteor case {i}"
        );

        for n in 1..=4 {
            let b = oracle_bleu(&hyps, std::slice::from_ref(&rs), n);
            assert!(
                (bleu(&hyps, &refs, n).unwrap() - b).abs() < 1e-6,
                "bleu-{n} case {i}"
            );
        }
    }
}

#[test]
fn corpus_metrics_match_brute_force() {
    let all = cases();
    for window in [2, 3, 5, 20] {
        for chunk in all.chunks(window).filter(|c| c.len() >= 2) {
            let hyps: Vec<Sentence> = chunk.iter().map(|c| c.0.clone()).collect();
            let refs: Vec<Vec<Sentence>> = chunk.iter().map(|c| c.1.clone()).collect();
            let rs = sets(&refs);
            assert!((bleu(&hyps, &rs, 4).unwrap() - oracle_bleu(&hyps, &refs, 4)).abs() < 1e-6);
            assert!((cider(&hyps, &rs).unwrap() - oracle_cider(&hyps, &refs)).abs() < 1e-6);
        }
    }
}

// ---- properties ----------------------------------------------------------

fn sentence() -> impl Strategy<Value = Sentence> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e"]), 0..7)
        .prop_map(|v| v.into_iter().map(str::to_string).collect())
}

fn nonempty_sentence() -> impl Strategy<Value = Sentence> {
    sentence().prop_filter("non-empty", |s| !s.is_empty())
}

fn corpus() -> impl Strategy<Value = (Vec<Sentence>, Vec<Vec<Sentence>>)> {
    prop::collection::vec(
        (sentence(), prop::collection::vec(nonempty_sentence(), 1..4)),
        2..6,
    )
    .prop_map(|v| v.into_iter().unzip())
}

proptest! {
    #[test]
    fn scores_are_bounded((hyps, refs) in corpus()) {
        let rs = sets(&refs);
        for v in [
            sentence_accuracy(&hyps, &rs).unwrap(),
            word_accuracy(&hyps, &rs).unwrap(),
            bleu(&hyps, &rs, 4).unwrap(),
            rouge_l(&hyps, &rs).unwrap(),
            meteor(&hyps, &rs).unwrap(),
        ] {
            prop_assert!((0.0..=1.0 + 1e-12).contains(&v), "{v}");
        }
        let c = cider(&hyps, &rs).unwrap();
        prop_assert!((0.0..=10.0 + 1e-9).contains(&c));
    }

    #[test]
    fn order_of_samples_is_irrelevant((hyps, refs) in corpus(), rot in 1usize..5) {
        let rs = sets(&refs);
        let k = rot % hyps.len();
        let (mut h2, mut r2) = (hyps.clone(), rs.clone());
        h2.rotate_left(k);
        r2.rotate_left(k);
        h2.reverse();
        r2.reverse();
        let pairs: [(f64, f64); 6] = [
            (sentence_accuracy(&hyps, &rs).unwrap(), sentence_accuracy(&h2, &r2).unwrap()),
            (word_accuracy(&hyps, &rs).unwrap(), word_accuracy(&h2, &r2).unwrap()),
            (bleu(&hyps, &rs, 4).unwrap(), bleu(&h2, &r2, 4).unwrap()),
            (rouge_l(&hyps, &rs).unwrap(), rouge_l(&h2, &r2).unwrap()),
            (meteor(&hyps, &rs).unwrap(), meteor(&h2, &r2).unwrap()),
            (cider(&hyps, &rs).unwrap(), cider(&h2, &r2).unwrap()),
        ];
        for (a, b) in pairs {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_reference_never_hurts((hyps, refs) in corpus()) {
        let rs = sets(&refs);
        let mut boosted = rs.clone();
        for (set, h) in boosted.iter_mut().zip(&hyps) {
            if !h.is_empty() {
                set.push(h.clone());
            }
        }
        prop_assert!(sentence_accuracy(&hyps, &boosted).unwrap() >= sentence_accuracy(&hyps, &rs).unwrap());
        prop_assert!(word_accuracy(&hyps, &boosted).unwrap() >= word_accuracy(&hyps, &rs).unwrap());
        prop_assert!(rouge_l(&hyps, &boosted).unwrap() >= rouge_l(&hyps, &rs).unwrap());
        prop_assert!(meteor(&hyps, &boosted).unwrap() >= meteor(&hyps, &rs).unwrap());
    }

    #[test]
    fn identical_corpus_hits_maximum(refs in prop::collection::vec(nonempty_sentence(), 1..6)) {
        let rs: Vec<ReferenceSet> = refs.iter().cloned().map(ReferenceSet::single).collect();
        prop_assert_eq!(sentence_accuracy(&refs, &rs).unwrap(), 1.0);
        prop_assert_eq!(word_accuracy(&refs, &rs).unwrap(), 1.0);
        prop_assert!((rouge_l(&refs, &rs).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!((bleu(&refs, &rs, 4).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn meteor_alignment_matches_enumeration(h in sentence(), r in nonempty_sentence()) {
        let refs = vec![ReferenceSet::single(r.clone())];
        prop_assert!((meteor(std::slice::from_ref(&h), &refs).unwrap() - oracle_meteor(&h, &r)).abs() < 1e-12);
    }
}
