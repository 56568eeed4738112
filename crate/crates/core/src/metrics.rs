//! Multi-reference caption metrics: corpus BLEU-4, ROUGE-L and CIDEr.
//!
//! Candidates are token sequences; each record has one or more reference
//! token sequences. Tokens can be any ordered type.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

pub const MAX_ORDER: usize = 4;
pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_SCALE: f64 = 10.0;

type Counts<T> = BTreeMap<Vec<T>, usize>;

fn ngram_counts<T: Ord + Clone>(tokens: &[T], n: usize) -> Counts<T> {
    let mut out = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    out
}

fn check_inputs<T>(candidates: &[Vec<T>], references: &[Vec<Vec<T>>]) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::Empty("candidate set"));
    }
    check_dim("reference records", candidates.len(), references.len())?;
    if references.iter().any(Vec::is_empty) {
        return Err(Error::invalid("every record needs at least one reference"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct BleuStats {
    matched: [usize; MAX_ORDER],
    total: [usize; MAX_ORDER],
    cand_len: usize,
    ref_len: usize,
}

impl BleuStats {
    fn of<T: Ord + Clone>(cand: &[T], refs: &[Vec<T>]) -> Self {
        let mut s = BleuStats {
            cand_len: cand.len(),
            ref_len: closest_ref_len(cand.len(), refs),
            ..Default::default()
        };
        for n in 1..=MAX_ORDER {
            let counts = ngram_counts(cand, n);
            let mut max_ref: Counts<T> = BTreeMap::new();
            for r in refs {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            s.matched[n - 1] = counts
                .iter()
                .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
                .sum();
            s.total[n - 1] = cand.len().saturating_sub(n - 1);
        }
        s
    }

    fn add(&mut self, o: &BleuStats) {
        for n in 0..MAX_ORDER {
            self.matched[n] += o.matched[n];
            self.total[n] += o.total[n];
        }
        self.cand_len += o.cand_len;
        self.ref_len += o.ref_len;
    }

    fn score(&self) -> f64 {
        if self.cand_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for n in 0..MAX_ORDER {
            if self.matched[n] == 0 || self.total[n] == 0 {
                return 0.0;
            }
            log_sum += (self.matched[n] as f64 / self.total[n] as f64).ln();
        }
        let bp = if self.cand_len > self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.cand_len as f64).exp()
        };
        bp * (log_sum / MAX_ORDER as f64).exp()
    }
}

/// Reference length closest to `cand_len`; ties go to the shorter one.
fn closest_ref_len<T>(cand_len: usize, refs: &[Vec<T>]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&l| (l.abs_diff(cand_len), l))
        .unwrap_or(0)
}

/// Corpus-level BLEU-4 without smoothing.
pub fn bleu4<T: Ord + Clone>(candidates: &[Vec<T>], references: &[Vec<Vec<T>>]) -> Result<f64> {
    check_inputs(candidates, references)?;
    let mut total = BleuStats::default();
    for (c, r) in candidates.iter().zip(references) {
        total.add(&BleuStats::of(c, r));
    }
    Ok(total.score())
}

/// Sentence-level BLEU-4 for every record.
pub fn bleu4_per_record<T: Ord + Clone>(
    candidates: &[Vec<T>],
    references: &[Vec<Vec<T>>],
) -> Result<Vec<f64>> {
    check_inputs(candidates, references)?;
    Ok(candidates
        .iter()
        .zip(references)
        .map(|(c, r)| BleuStats::of(c, r).score())
        .collect())
}

fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn rouge_l_record<T: PartialEq>(cand: &[T], refs: &[Vec<T>]) -> f64 {
    let b2 = ROUGE_BETA * ROUGE_BETA;
    refs.iter()
        .map(|r| {
            let lcs = lcs_len(cand, r);
            if lcs == 0 {
                return 0.0;
            }
            let p = lcs as f64 / cand.len() as f64;
            let rec = lcs as f64 / r.len() as f64;
            (1.0 + b2) * p * rec / (rec + b2 * p)
        })
        .fold(0.0, f64::max)
}

pub fn rouge_l_per_record<T: PartialEq>(
    candidates: &[Vec<T>],
    references: &[Vec<Vec<T>>],
) -> Result<Vec<f64>> {
    check_inputs(candidates, references)?;
    Ok(candidates
        .iter()
        .zip(references)
        .map(|(c, r)| rouge_l_record(c, r))
        .collect())
}

/// Mean over records of the best LCS F-measure against any reference.
pub fn rouge_l<T: PartialEq>(candidates: &[Vec<T>], references: &[Vec<Vec<T>>]) -> Result<f64> {
    Ok(mean(&rouge_l_per_record(candidates, references)?))
}

fn tfidf<T: Ord + Clone>(counts: &Counts<T>, df: &Counts<T>, n_docs: f64) -> BTreeMap<Vec<T>, f64> {
    counts
        .iter()
        .map(|(g, &c)| {
            let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
            (g.clone(), c as f64 * (n_docs / d).ln())
        })
        .collect()
}

fn sparse_cosine<T: Ord>(a: &BTreeMap<Vec<T>, f64>, b: &BTreeMap<Vec<T>, f64>) -> f64 {
    let na = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.values().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().filter_map(|(g, v)| b.get(g).map(|w| v * w)).sum();
    dot / (na * nb)
}

/// Plain CIDEr for every record. Document frequency counts the records whose
/// reference set contains an n-gram (floored at 1).
pub fn cider_per_record<T: Ord + Clone>(
    candidates: &[Vec<T>],
    references: &[Vec<Vec<T>>],
) -> Result<Vec<f64>> {
    check_inputs(candidates, references)?;
    let n_docs = candidates.len() as f64;
    let mut scores = vec![0.0; candidates.len()];
    for n in 1..=MAX_ORDER {
        let ref_counts: Vec<Vec<Counts<T>>> = references
            .iter()
            .map(|rs| rs.iter().map(|r| ngram_counts(r, n)).collect())
            .collect();
        let mut df: Counts<T> = BTreeMap::new();
        for rs in &ref_counts {
            let present: BTreeSet<&Vec<T>> = rs.iter().flat_map(|c| c.keys()).collect();
            for g in present {
                *df.entry(g.clone()).or_insert(0) += 1;
            }
        }
        for (i, cand) in candidates.iter().enumerate() {
            let cv = tfidf(&ngram_counts(cand, n), &df, n_docs);
            let sims: f64 = ref_counts[i]
                .iter()
                .map(|rc| sparse_cosine(&cv, &tfidf(rc, &df, n_docs)))
                .sum();
            scores[i] += sims / ref_counts[i].len() as f64;
        }
    }
    Ok(scores
        .into_iter()
        .map(|s| CIDER_SCALE * s / MAX_ORDER as f64)
        .collect())
}

pub fn cider<T: Ord + Clone>(candidates: &[Vec<T>], references: &[Vec<Vec<T>>]) -> Result<f64> {
    Ok(mean(&cider_per_record(candidates, references)?))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordScores {
    pub id: String,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub records: Vec<RecordScores>,
}

/// Computes all metrics; `ids` label the per-record scores.
pub fn evaluate<T: Ord + Clone>(
    ids: &[String],
    candidates: &[Vec<T>],
    references: &[Vec<Vec<T>>],
) -> Result<EvalReport> {
    check_inputs(candidates, references)?;
    check_dim("record ids", candidates.len(), ids.len())?;
    let b = bleu4_per_record(candidates, references)?;
    let r = rouge_l_per_record(candidates, references)?;
    let c = cider_per_record(candidates, references)?;
    Ok(EvalReport {
        bleu4: bleu4(candidates, references)?,
        rouge_l: mean(&r),
        cider: mean(&c),
        records: ids
            .iter()
            .enumerate()
            .map(|(i, id)| RecordScores {
                id: id.clone(),
                bleu4: b[i],
                rouge_l: r[i],
                cider: c[i],
            })
            .collect(),
    })
}

/// Paired bootstrap over record indices: the fraction of `samples` resamples
/// in which system A scores strictly above system B. `score` maps a resample
/// (indices, with repetition) to the pair of scores.
pub fn paired_bootstrap<F>(n_records: usize, samples: usize, seed: u64, mut score: F) -> Result<f64>
where
    F: FnMut(&[usize]) -> Result<(f64, f64)>,
{
    if n_records == 0 || samples == 0 {
        return Err(Error::Empty("bootstrap sample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut wins = 0usize;
    let mut idx = vec![0usize; n_records];
    for _ in 0..samples {
        idx.iter_mut()
            .for_each(|i| *i = rng.random_range(0..n_records));
        let (a, b) = score(&idx)?;
        if a > b {
            wins += 1;
        }
    }
    Ok(wins as f64 / samples as f64)
}

/// Paired bootstrap on corpus BLEU-4.
pub fn bleu4_bootstrap<T: Ord + Clone>(
    system_a: &[Vec<T>],
    system_b: &[Vec<T>],
    references: &[Vec<Vec<T>>],
    samples: usize,
    seed: u64,
) -> Result<f64> {
    check_inputs(system_a, references)?;
    check_inputs(system_b, references)?;
    let stats = |c: &[Vec<T>]| -> Vec<BleuStats> {
        c.iter()
            .zip(references)
            .map(|(c, r)| BleuStats::of(c, r))
            .collect()
    };
    let sa = stats(system_a);
    let sb = stats(system_b);
    paired_bootstrap(references.len(), samples, seed, |idx| {
        let mut ta = BleuStats::default();
        let mut tb = BleuStats::default();
        for &i in idx {
            ta.add(&sa[i]);
            tb.add(&sb[i]);
        }
        Ok((ta.score(), tb.score()))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn refs(rs: &[&str]) -> Vec<Vec<String>> {
        rs.iter().map(|r| toks(r)).collect()
    }

    #[test]
    fn bleu_fixture() {
        let b = bleu4(&[toks("a b c d e")], &[refs(&["a b c d f"])]).unwrap();
        let expected = (0.8f64 * 0.75 * (2.0 / 3.0) * 0.5).powf(0.25);
        assert!((b - expected).abs() < 1e-12);
        assert!((b - 0.6687403).abs() < 1e-6);
    }

    #[test]
    fn bleu_perfect_and_zero() {
        let c = vec![toks("x y z w v"), toks("p q r s")];
        let r = vec![refs(&["q", "x y z w v"]), refs(&["p q r s"])];
        assert_eq!(bleu4(&c, &r).unwrap(), 1.0);
        let r0 = vec![refs(&["x y z q v"]), refs(&["p q s r"])];
        assert_eq!(bleu4(&c, &r0).unwrap(), 0.0);
    }

    #[test]
    fn bleu_brevity_penalty_and_clipping() {
        // candidate length 4, closest references 3 and 5 tie → shorter (3): BP = 1
        let c = vec![toks("a b c d")];
        let r = vec![refs(&["a b c", "a b c d e"])];
        let b = bleu4(&c, &r).unwrap();
        // matches vs "a b c d e": p1 = 1, p2 = 1, p3 = 1, p4 = 1
        assert!((b - 1.0).abs() < 1e-12);
        // closest reference longer than candidate: BP = exp(1 − 6/4)
        let r2 = vec![refs(&["a b c d x y"])];
        let b2 = bleu4(&c, &r2).unwrap();
        assert!((b2 - (1.0f64 - 1.5).exp()).abs() < 1e-12);
        // clipping: "the the the the" vs "the cat": p1 = 1/4 and no bigram match
        assert_eq!(
            bleu4(&[toks("the the the the")], &[refs(&["the cat"])]).unwrap(),
            0.0
        );
        let s = BleuStats::of(&toks("the the the the"), &refs(&["the cat the"]));
        assert_eq!(s.matched[0], 2);
    }

    #[test]
    fn metrics_reject_bad_input() {
        let none: Vec<Vec<String>> = vec![];
        assert!(bleu4(&none, &[]).is_err());
        assert!(rouge_l(&[toks("a")], &[vec![]]).is_err());
        assert!(cider(&[toks("a")], &[refs(&["a"]), refs(&["b"])]).is_err());
    }

    #[test]
    fn rouge_fixtures() {
        let r = rouge_l(&[toks("a b c d")], &[refs(&["a c b d"])]).unwrap();
        assert!((r - 0.75).abs() < 1e-12);
        assert_eq!(rouge_l(&[toks("a b")], &[refs(&["a b"])]).unwrap(), 1.0);
        assert_eq!(rouge_l(&[toks("a b")], &[refs(&["c d"])]).unwrap(), 0.0);
        // P = 2/2, R = 2/4 → F = (1+β²)·P·R / (R + β²·P)
        let b2 = 1.44;
        let expected = (1.0 + b2) * 0.5 / (0.5 + b2);
        let r = rouge_l(&[toks("a b")], &[refs(&["a x b y", "q"])]).unwrap();
        assert!((r - expected).abs() < 1e-12);
    }

    #[test]
    fn cider_identical_is_ten() {
        let c = vec![toks("a b c d"), toks("e f g h")];
        let r = vec![refs(&["a b c d"]), refs(&["e f g h"])];
        assert!((cider(&c, &r).unwrap() - 10.0).abs() < 1e-12);
        let disjoint = vec![toks("x y z w"), toks("u v s t")];
        assert_eq!(cider(&disjoint, &r).unwrap(), 0.0);
    }

    #[test]
    fn cider_two_record_fixture() {
        // record 0: cand "a b", refs {"a b", "a c"}; record 1: cand "a", ref {"d a"}
        // unigram df: a → 2, b → 1, c → 1, d → 1; bigram df: ab, ac, da → 1; N = 2
        let c = vec![toks("a b"), toks("a")];
        let r = vec![refs(&["a b", "a c"]), refs(&["d a"])];
        // idf(a) = 0 and every other n-gram has idf ln 2
        // record 0, n = 1: cos with "a b" is 1, with "a c" is 0
        // record 0, n = 2: cos with "a b" is 1, with "a c" is 0
        let rec0 = 10.0 * (0.5 + 0.5) / 4.0;
        // record 1: cand vector (a:0) is zero for n = 1; no bigrams
        let rec1 = 0.0;
        let per = cider_per_record(&c, &r).unwrap();
        assert!((per[0] - rec0).abs() < 1e-9);
        assert!((per[1] - rec1).abs() < 1e-9);
        assert!((cider(&c, &r).unwrap() - (rec0 + rec1) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn cider_fixture_with_weights() {
        // record 0: cand "a a b", ref "a b b"; record 1: cand "c", ref "c"; record 2: cand "d", ref "a d"
        // unigram df: a → 2, b → 1, c → 1, d → 1 with N = 3
        let c = vec![toks("a a b"), toks("c"), toks("d")];
        let r = vec![refs(&["a b b"]), refs(&["c"]), refs(&["a d"])];
        let ia = (3.0f64 / 2.0).ln();
        let ib = 3f64.ln();
        // n = 1 for record 0: cand (2ia, ib), ref (ia, 2ib)
        let cos1 = (2.0 * ia * ia + 2.0 * ib * ib)
            / ((4.0 * ia * ia + ib * ib).sqrt() * (ia * ia + 4.0 * ib * ib).sqrt());
        // n = 2: cand {aa, ab}, ref {ab, bb}, all df 1 → cos = 1/2
        let cos2 = 0.5;
        let rec0 = 10.0 * (cos1 + cos2) / 4.0;
        let rec1 = 10.0 / 4.0;
        // record 2, n = 1: cand (d: ib), ref (a: ia, d: ib)
        let rec2 = 10.0 * (ib / (ia * ia + ib * ib).sqrt()) / 4.0;
        let per = cider_per_record(&c, &r).unwrap();
        for (got, want) in per.iter().zip([rec0, rec1, rec2]) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn evaluate_report_matches_parts() {
        let c = vec![toks("a b c d e"), toks("x y")];
        let r = vec![refs(&["a b c d f"]), refs(&["x y z"])];
        let ids = vec!["r0".to_string(), "r1".to_string()];
        let rep = evaluate(&ids, &c, &r).unwrap();
        assert_eq!(rep.bleu4, bleu4(&c, &r).unwrap());
        assert_eq!(rep.records[1].id, "r1");
        assert_eq!(rep.records[0].rouge_l, rouge_l(&c[..1], &r[..1]).unwrap());
    }

    #[test]
    fn bootstrap_win_fraction() {
        let r = vec![refs(&["a b c d e"]); 20];
        let good = vec![toks("a b c d e"); 20];
        let bad = vec![toks("a b c x e"); 20];
        assert_eq!(bleu4_bootstrap(&good, &bad, &r, 100, 1).unwrap(), 1.0);
        assert_eq!(bleu4_bootstrap(&bad, &good, &r, 100, 1).unwrap(), 0.0);
        assert_eq!(bleu4_bootstrap(&good, &good, &r, 100, 1).unwrap(), 0.0);
    }

    fn corpus() -> impl Strategy<Value = (Vec<Vec<u8>>, Vec<Vec<Vec<u8>>>)> {
        prop::collection::vec(
            (
                prop::collection::vec(0u8..6, 0..8),
                prop::collection::vec(prop::collection::vec(0u8..6, 1..8), 1..4),
            ),
            1..6,
        )
        .prop_map(|v| v.into_iter().unzip())
    }

    proptest! {
        #[test]
        fn bounds((c, r) in corpus()) {
            let b = bleu4(&c, &r).unwrap();
            let l = rouge_l(&c, &r).unwrap();
            let d = cider(&c, &r).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&b));
            prop_assert!((0.0..=1.0 + 1e-12).contains(&l));
            prop_assert!((0.0..=10.0 + 1e-9).contains(&d));
        }

        #[test]
        fn permutation_invariant((c, r) in corpus(), rot in 0usize..6) {
            let k = rot % c.len();
            let mut c2 = c.clone();
            let mut r2 = r.clone();
            c2.rotate_left(k);
            r2.rotate_left(k);
            prop_assert!((bleu4(&c, &r).unwrap() - bleu4(&c2, &r2).unwrap()).abs() < 1e-12);
            prop_assert!((rouge_l(&c, &r).unwrap() - rouge_l(&c2, &r2).unwrap()).abs() < 1e-12);
            prop_assert!((cider(&c, &r).unwrap() - cider(&c2, &r2).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn duplicate_reference_never_hurts((c, r) in corpus(), which in 0usize..6) {
            let i = which % c.len();
            // duplicating an existing reference leaves BLEU and ROUGE-L unchanged
            let mut dup = r.clone();
            let first = dup[i][0].clone();
            dup[i].push(first);
            prop_assert_eq!(bleu4(&c, &r).unwrap(), bleu4(&c, &dup).unwrap());
            prop_assert_eq!(rouge_l(&c, &r).unwrap(), rouge_l(&c, &dup).unwrap());
            // adding the candidate itself as a reference never lowers that record's scores
            let mut with_self = r.clone();
            with_self[i].push(c[i].clone());
            let before = (
                bleu4_per_record(&c, &r).unwrap()[i],
                rouge_l_per_record(&c, &r).unwrap()[i],
                cider_per_record(&c, &r).unwrap()[i],
            );
            let after = (
                bleu4_per_record(&c, &with_self).unwrap()[i],
                rouge_l_per_record(&c, &with_self).unwrap()[i],
                cider_per_record(&c, &with_self).unwrap()[i],
            );
            prop_assert!(after.0 >= before.0);
            prop_assert!(after.1 >= before.1);
            prop_assert!(after.2 >= before.2 - 1e-12);
        }

        #[test]
        fn identical_candidates_score_one((c, r) in corpus()) {
            let perfect: Vec<Vec<u8>> = r.iter().map(|rs| rs[0].clone()).collect();
            prop_assert_eq!(perfect.len(), c.len());
            let long_enough = perfect.iter().all(|p| p.len() >= 4);
            if long_enough {
                prop_assert!((bleu4(&perfect, &r).unwrap() - 1.0).abs() < 1e-12);
            }
            prop_assert!((rouge_l(&perfect, &r).unwrap() - 1.0).abs() < 1e-12);
        }
    }
}
