use std::collections::HashMap;

use modattn_core::{Error, Result};
use serde::{Deserialize, Serialize};

type Ngram<'a> = &'a [String];

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<Ngram<'_>, usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

fn check_aligned(hyps: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> Result<()> {
    if hyps.is_empty() {
        return Err(Error::Data("no hypotheses to score".into()));
    }
    if hyps.len() != refs.len() {
        return Err(Error::Data(format!(
            "{} hypotheses but {} reference sets",
            hyps.len(),
            refs.len()
        )));
    }
    if let Some(i) = refs.iter().position(|r| r.is_empty()) {
        return Err(Error::Data(format!("clip {i} has no references")));
    }
    Ok(())
}

/// Cumulative BLEU-1 through BLEU-4.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bleu {
    pub scores: [f64; 4],
    /// Clipped n-gram precision per order.
    pub precisions: [f64; 4],
    pub brevity_penalty: f64,
}

/// Corpus-level BLEU. Clipped n-gram matches and hypothesis n-gram totals are
/// summed over clips before dividing; the effective reference length sums,
/// per clip, the reference length closest to the hypothesis (the shorter one
/// on ties).
pub fn bleu(hyps: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> Result<Bleu> {
    check_aligned(hyps, refs)?;
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rs) in hyps.iter().zip(refs) {
        c += h.len();
        r += rs
            .iter()
            .map(|x| x.len())
            .min_by_key(|&l| (l.abs_diff(h.len()), l))
            .unwrap_or(0);
        for n in 1..=4 {
            let hc = ngram_counts(h, n);
            let mut max_ref: HashMap<Ngram<'_>, usize> = HashMap::new();
            for x in rs {
                for (g, k) in ngram_counts(x, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            for (g, k) in &hc {
                matched[n - 1] += (*k).min(max_ref.get(g).copied().unwrap_or(0));
            }
            total[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if c == 0 {
        log::warn!("every hypothesis is empty; BLEU is 0");
        return Ok(Bleu { scores: [0.0; 4], precisions: [0.0; 4], brevity_penalty: 0.0 });
    }
    let mut precisions = [0.0; 4];
    for n in 0..4 {
        precisions[n] = if total[n] == 0 { 0.0 } else { matched[n] as f64 / total[n] as f64 };
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    let mut scores = [0.0; 4];
    let mut log_sum = 0.0;
    for n in 0..4 {
        if precisions[n] == 0.0 {
            break;
        }
        log_sum += precisions[n].ln();
        scores[n] = bp * (log_sum / (n + 1) as f64).exp();
    }
    Ok(Bleu { scores, precisions, brevity_penalty: bp })
}

const CIDER_N: usize = 4;
const CIDER_SIGMA: f64 = 6.0;

struct CiderVec<'a> {
    weights: [HashMap<Ngram<'a>, f64>; CIDER_N],
    norms: [f64; CIDER_N],
    /// The public scorer's length statistic: the number of bigrams.
    length: f64,
}

fn cider_vector<'a>(tokens: &'a [String], df: &HashMap<Ngram<'a>, f64>, log_docs: f64) -> CiderVec<'a> {
    let mut weights: [HashMap<Ngram<'a>, f64>; CIDER_N] = Default::default();
    let mut norms = [0.0; CIDER_N];
    for n in 1..=CIDER_N {
        for (g, tf) in ngram_counts(tokens, n) {
            let d = df.get(g).copied().unwrap_or(0.0).max(1.0).ln();
            let w = tf as f64 * (log_docs - d);
            norms[n - 1] += w * w;
            weights[n - 1].insert(g, w);
        }
    }
    let length = tokens.len().saturating_sub(1) as f64;
    CiderVec { weights, norms: norms.map(f64::sqrt), length }
}

fn cider_sim(h: &CiderVec<'_>, r: &CiderVec<'_>) -> f64 {
    let delta = h.length - r.length;
    let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
    let mut total = 0.0;
    for n in 0..CIDER_N {
        let mut v = 0.0;
        for (g, wh) in &h.weights[n] {
            if let Some(wr) = r.weights[n].get(g) {
                v += wh.min(*wr) * wr;
            }
        }
        if h.norms[n] != 0.0 && r.norms[n] != 0.0 {
            v /= h.norms[n] * r.norms[n];
        }
        total += v * penalty;
    }
    total
}

/// CIDEr-D, computed as the public captioning-challenge scorer does:
/// document frequencies over each clip's reference set, tf-idf vectors per
/// order 1..=4, clipped similarity with a Gaussian length penalty (σ = 6),
/// averaged over orders and references, times 10. Returns the corpus mean and
/// the per-clip scores.
pub fn cider(hyps: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> Result<(f64, Vec<f64>)> {
    check_aligned(hyps, refs)?;
    if hyps.len() < 2 {
        log::warn!("CIDEr-D on a single clip: every document frequency is degenerate");
    }
    let mut df: HashMap<Ngram<'_>, f64> = HashMap::new();
    for rs in refs {
        let mut seen: std::collections::HashSet<Ngram<'_>> = Default::default();
        for x in rs {
            for n in 1..=CIDER_N {
                seen.extend(ngram_counts(x, n).into_keys());
            }
        }
        for g in seen {
            *df.entry(g).or_insert(0.0) += 1.0;
        }
    }
    let log_docs = (refs.len() as f64).ln();
    let per_clip: Vec<f64> = hyps
        .iter()
        .zip(refs)
        .map(|(h, rs)| {
            let hv = cider_vector(h, &df, log_docs);
            let sum: f64 = rs.iter().map(|x| cider_sim(&hv, &cider_vector(x, &df, log_docs))).sum();
            sum / CIDER_N as f64 / rs.len() as f64 * 10.0
        })
        .collect();
    let mean = per_clip.iter().sum::<f64>() / per_clip.len() as f64;
    Ok((mean, per_clip))
}

/// Corpus scores in the column order BLEU1..BLEU4, CIDEr.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(rename = "BLEU1")]
    pub bleu1: f64,
    #[serde(rename = "BLEU2")]
    pub bleu2: f64,
    #[serde(rename = "BLEU3")]
    pub bleu3: f64,
    #[serde(rename = "BLEU4")]
    pub bleu4: f64,
    #[serde(rename = "CIDEr")]
    pub cider: f64,
    pub clips: usize,
    pub per_clip_cider: Vec<f64>,
}

impl MetricReport {
    pub fn compute(hyps: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> Result<Self> {
        let b = bleu(hyps, refs)?;
        let (c, per_clip) = cider(hyps, refs)?;
        Ok(Self {
            bleu1: b.scores[0],
            bleu2: b.scores[1],
            bleu3: b.scores[2],
            bleu4: b.scores[3],
            cider: c,
            clips: hyps.len(),
            per_clip_cider: per_clip,
        })
    }

    pub fn columns(&self) -> [(&'static str, f64); 5] {
        [
            ("BLEU1", self.bleu1),
            ("BLEU2", self.bleu2),
            ("BLEU3", self.bleu3),
            ("BLEU4", self.bleu4),
            ("CIDEr", self.cider),
        ]
    }

    /// Header row and value row, right-aligned, four decimals.
    pub fn table(&self) -> String {
        let cols = self.columns();
        let head: Vec<String> = cols.iter().map(|(n, _)| format!("{n:>8}")).collect();
        let vals: Vec<String> = cols.iter().map(|(_, v)| format!("{v:>8.4}")).collect();
        format!("{}\n{}\n", head.join(" "), vals.join(" "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use modattn_core::vocab::tokenize;

    fn t(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn hand_counted_unigram_precision() {
        let b = bleu(&[t("the the the the")], &[vec![t("the cat is here")]]).unwrap();
        assert_eq!(b.precisions[0], 0.25);
        assert_eq!(b.scores[0], 0.25);
        assert_eq!(b.brevity_penalty, 1.0);
    }

    #[test]
    fn exact_match_is_one() {
        let refs = vec![vec![t("a man is playing a guitar"), t("someone plays guitar")], vec![t("a cat sleeps on the warm mat")]];
        let hyps = vec![t("someone plays guitar"), t("a cat sleeps on the warm mat")];
        let b = bleu(&hyps, &refs).unwrap();
        for s in b.scores {
            assert!((s - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn brevity_penalty_uses_closest_reference() {
        let b = bleu(&[t("a b")], &[vec![t("a b c d"), t("a b c d e f g h")]]).unwrap();
        assert!((b.brevity_penalty - (1.0f64 - 2.0).exp()).abs() < 1e-15);
        let tie = bleu(&[t("a b c")], &[vec![t("a b c d"), t("a b")]]).unwrap();
        assert_eq!(tie.brevity_penalty, 1.0);
    }

    #[test]
    fn empty_hypotheses() {
        assert!(matches!(bleu(&[], &[]), Err(Error::Data(_))));
        let b = bleu(&[vec![], vec![]], &[vec![t("a")], vec![t("b")]]).unwrap();
        assert_eq!(b.scores, [0.0; 4]);
        let one_empty = bleu(&[vec![], t("x y z")], &[vec![t("a")], vec![t("x y z")]]).unwrap();
        assert!(one_empty.scores[0] > 0.0 && one_empty.scores[0] <= 1.0);
    }

    #[test]
    fn misaligned_input_rejected() {
        assert!(bleu(&[t("a")], &[]).is_err());
        assert!(cider(&[t("a")], &[vec![]]).is_err());
    }

    #[test]
    fn cider_disjoint_is_zero() {
        let refs = vec![vec![t("a b c d")], vec![t("e f g h")]];
        let (s, per) = cider(&[t("x y z w"), t("q r s t")], &refs).unwrap();
        assert_eq!(s, 0.0);
        assert_eq!(per, vec![0.0, 0.0]);
    }

    #[test]
    fn table_matches_json_values() {
        let refs = vec![vec![t("a b c d")], vec![t("e f g h")]];
        let r = MetricReport::compute(&[t("a b c d"), t("e f g x")], &refs).unwrap();
        let table = r.table();
        let printed: Vec<f64> = table.lines().nth(1).unwrap().split_whitespace().map(|x| x.parse().unwrap()).collect();
        for (p, (_, v)) in printed.iter().zip(r.columns()) {
            assert!((p - v).abs() <= 5e-5);
        }
    }
}
