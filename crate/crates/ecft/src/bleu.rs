//! Corpus-level BLEU-4 over raw token ids: uniform n-gram weights,
//! standard brevity penalty, add-one smoothing on the n ≥ 2 precisions
//! (unigram precision unsmoothed, so zero-overlap corpora score 0).

use std::collections::BTreeMap;

use crate::error::{EcftError, Result};

const MAX_N: usize = 4;

fn ngram_counts(tokens: &[u32], n: usize) -> BTreeMap<&[u32], u64> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

pub fn corpus_bleu(hypotheses: &[Vec<u32>], references: &[Vec<u32>]) -> Result<f64> {
    if hypotheses.is_empty() || references.is_empty() {
        return Err(EcftError::EmptyInput("bleu corpus"));
    }
    if hypotheses.len() != references.len() {
        return Err(EcftError::DimensionMismatch {
            expected: references.len(),
            got: hypotheses.len(),
        });
    }
    let mut matched = [0u64; MAX_N];
    let mut total = [0u64; MAX_N];
    let mut hyp_len = 0u64;
    let mut ref_len = 0u64;
    for (hyp, rf) in hypotheses.iter().zip(references.iter()) {
        hyp_len += hyp.len() as u64;
        ref_len += rf.len() as u64;
        for n in 1..=MAX_N {
            let hc = ngram_counts(hyp, n);
            let rc = ngram_counts(rf, n);
            for (gram, &c) in &hc {
                total[n - 1] += c;
                let r = rc.get(gram).copied().unwrap_or(0);
                matched[n - 1] += c.min(r);
            }
        }
    }
    if total[0] == 0 || matched[0] == 0 {
        return Ok(0.0);
    }
    let mut log_prec = 0.0;
    for n in 1..=MAX_N {
        let (num, den) = if n == 1 {
            (matched[0] as f64, total[0] as f64)
        } else {
            (matched[n - 1] as f64 + 1.0, total[n - 1] as f64 + 1.0)
        };
        log_prec += (num / den).ln() / MAX_N as f64;
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * log_prec.exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth_world::rng_for;
    use rand::Rng;
    use std::collections::HashMap;

    /// Independent oracle: hash-based n-gram tallies, explicit log-space
    /// accumulation, written against the stated formula rather than the
    /// implementation above.
    fn oracle_bleu(hyps: &[Vec<u32>], refs: &[Vec<u32>]) -> f64 {
        let grams = |s: &[u32], n: usize| -> HashMap<Vec<u32>, u64> {
            let mut m = HashMap::new();
            for i in 0..(s.len() + 1).saturating_sub(n) {
                *m.entry(s[i..i + n].to_vec()).or_insert(0u64) += 1;
            }
            m
        };
        let mut num = [0.0f64; 4];
        let mut den = [0.0f64; 4];
        let (mut c, mut r) = (0.0f64, 0.0f64);
        for (h, f) in hyps.iter().zip(refs) {
            c += h.len() as f64;
            r += f.len() as f64;
            for n in 1..=4 {
                let hg = grams(h, n);
                let fg = grams(f, n);
                for (g, &hc) in &hg {
                    den[n - 1] += hc as f64;
                    num[n - 1] += (hc.min(fg.get(g).copied().unwrap_or(0))) as f64;
                }
            }
        }
        if den[0] == 0.0 || num[0] == 0.0 {
            return 0.0;
        }
        let mut s = 0.0;
        for n in 1..=4 {
            let (a, b) = if n == 1 {
                (num[0], den[0])
            } else {
                (num[n - 1] + 1.0, den[n - 1] + 1.0)
            };
            s += 0.25 * (a / b).ln();
        }
        let bp = if c >= r { 1.0 } else { (1.0 - r / c).exp() };
        100.0 * bp * s.exp()
    }

    #[test]
    fn identical_corpora_score_100() {
        let c = vec![vec![1, 2, 3, 4, 5], vec![9, 8, 7]];
        assert_eq!(corpus_bleu(&c, &c).unwrap(), 100.0);
    }

    #[test]
    fn hand_example_matches_oracle() {
        let hyps = vec![vec![10, 11, 12, 13]];
        let refs = vec![vec![10, 11, 12, 14]];
        let b = corpus_bleu(&hyps, &refs).unwrap();
        let o = oracle_bleu(&hyps, &refs);
        assert!((b - o).abs() < 1e-9, "{b} vs {o}");
        // p1 = 3/4 enters the geometric mean directly
        let expected = 100.0
            * (0.25 * (3.0f64 / 4.0).ln() + 0.25 * (3.0f64 / 4.0).ln() + 0.25 * (2.0f64 / 3.0).ln()
                + 0.25 * (1.0f64 / 2.0).ln())
            .exp();
        assert!((b - expected).abs() < 1e-9, "{b} vs {expected}");
    }

    #[test]
    fn zero_overlap_scores_zero() {
        let hyps = vec![vec![1, 2, 3]];
        let refs = vec![vec![4, 5, 6]];
        assert_eq!(corpus_bleu(&hyps, &refs).unwrap(), 0.0);
        assert_eq!(oracle_bleu(&hyps, &refs), 0.0);
    }

    #[test]
    fn empty_lists_rejected() {
        assert!(corpus_bleu(&[], &[]).is_err());
        assert!(corpus_bleu(&[vec![1]], &[vec![1], vec![2]]).is_err());
    }

    #[test]
    fn matches_oracle_on_random_corpora() {
        let mut rng = rng_for(13, 0xb1e0);
        for _ in 0..100 {
            let n = rng.gen_range(1..6);
            let mut hyps = Vec::new();
            let mut refs = Vec::new();
            for _ in 0..n {
                let hl = rng.gen_range(0..10);
                let rl = rng.gen_range(1..10);
                hyps.push((0..hl).map(|_| rng.gen_range(0..8u32)).collect());
                refs.push((0..rl).map(|_| rng.gen_range(0..8u32)).collect());
            }
            if hyps.iter().all(|h: &Vec<u32>| h.is_empty()) {
                continue;
            }
            let b = corpus_bleu(&hyps, &refs).unwrap();
            let o = oracle_bleu(&hyps, &refs);
            assert!((b - o).abs() < 1e-6, "{b} vs {o} for {hyps:?} / {refs:?}");
            assert!((0.0..=100.0).contains(&b));
        }
    }
}
