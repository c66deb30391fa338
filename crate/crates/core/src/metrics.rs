//! Translation metrics: corpus BLEU-4, ROUGE-L F1, ChrF, bucketed scores and
//! the embedding-geometry report (PCA + KDE entropy, segment/gloss distances).

mod geometry;

pub use geometry::{geometry_report, GeometryInput, GeometryReport};

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("empty reference corpus")]
    EmptyCorpus,
    #[error("hypothesis/reference count mismatch: {hyps} vs {refs}")]
    CountMismatch { hyps: usize, refs: usize },
    #[error("kde needs at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("bad bucket spec: {0}")]
    BadSpec(String),
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// Additive smoothing applied to zero n-gram precisions at corpus level.
pub const BLEU_EPS: f64 = 1e-9;

fn check_lengths<T, U>(hyps: &[T], refs: &[U]) -> Result<()> {
    if refs.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    if hyps.len() != refs.len() {
        return Err(MetricError::CountMismatch { hyps: hyps.len(), refs: refs.len() });
    }
    Ok(())
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut map: HashMap<&[String], u64> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *map.entry(w).or_default() += 1;
        }
    }
    map
}

/// Corpus BLEU with n-grams up to 4 and brevity penalty. Orders with zero
/// matches take the add-ε precision; orders where the hypothesis corpus has
/// no n-grams at all (every hypothesis shorter than n) drop out of the
/// geometric mean, so an identical short corpus still scores 100.
pub fn bleu4(hyps: &[Vec<String>], refs: &[Vec<String>]) -> Result<f64> {
    check_lengths(hyps, refs)?;
    let mut matches = [0u64; 4];
    let mut totals = [0u64; 4];
    let mut hyp_len = 0u64;
    let mut ref_len = 0u64;
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len() as u64;
        ref_len += r.len() as u64;
        for n in 1..=4 {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            for (gram, count) in &hc {
                let clip = rc.get(gram).copied().unwrap_or(0);
                matches[n - 1] += (*count).min(clip);
                totals[n - 1] += *count;
            }
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    let mut orders = 0usize;
    for n in 0..4 {
        if totals[n] == 0 {
            continue;
        }
        let p =
            if matches[n] == 0 { BLEU_EPS } else { matches[n] as f64 / totals[n] as f64 };
        log_sum += p.ln();
        orders += 1;
    }
    if orders == 0 {
        return Ok(0.0);
    }
    let bp = if hyp_len >= ref_len { 1.0 } else { (1.0 - ref_len as f64 / hyp_len as f64).exp() };
    Ok(100.0 * bp * (log_sum / orders as f64).exp())
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let n = b.len();
    let mut prev = vec![0usize; n + 1];
    let mut cur = vec![0usize; n + 1];
    for ai in a {
        for (j, bj) in b.iter().enumerate() {
            cur[j + 1] = if ai == bj { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[n]
}

/// Mean per-sample LCS-based F1, in [0, 100].
pub fn rouge_l_f1(hyps: &[Vec<String>], refs: &[Vec<String>]) -> Result<f64> {
    check_lengths(hyps, refs)?;
    let mut acc = 0.0;
    for (h, r) in hyps.iter().zip(refs) {
        if h.is_empty() || r.is_empty() {
            continue;
        }
        let l = lcs_len(h, r) as f64;
        let p = l / h.len() as f64;
        let rec = l / r.len() as f64;
        if p + rec > 0.0 {
            acc += 2.0 * p * rec / (p + rec);
        }
    }
    Ok(100.0 * acc / refs.len() as f64)
}

fn char_ngrams(tokens: &[String], n: usize) -> HashMap<Vec<char>, u64> {
    // Whitespace is excluded: tokens are concatenated directly.
    let chars: Vec<char> = tokens.iter().flat_map(|t| t.chars()).collect();
    let mut map: HashMap<Vec<char>, u64> = HashMap::new();
    if chars.len() >= n {
        for w in chars.windows(n) {
            *map.entry(w.to_vec()).or_default() += 1;
        }
    }
    map
}

/// Corpus ChrF (character n-grams 1..=6, β = 2), in [0, 100].
pub fn chrf(hyps: &[Vec<String>], refs: &[Vec<String>]) -> Result<f64> {
    check_lengths(hyps, refs)?;
    const MAX_N: usize = 6;
    const BETA2: f64 = 4.0;
    let mut matches = [0u64; MAX_N];
    let mut hyp_totals = [0u64; MAX_N];
    let mut ref_totals = [0u64; MAX_N];
    for (h, r) in hyps.iter().zip(refs) {
        for n in 1..=MAX_N {
            let hc = char_ngrams(h, n);
            let rc = char_ngrams(r, n);
            for (gram, count) in &hc {
                hyp_totals[n - 1] += count;
                matches[n - 1] += (*count).min(rc.get(gram).copied().unwrap_or(0));
            }
            for count in rc.values() {
                ref_totals[n - 1] += count;
            }
        }
    }
    let mut p_sum = 0.0;
    let mut r_sum = 0.0;
    let mut orders = 0usize;
    for n in 0..MAX_N {
        if hyp_totals[n] == 0 && ref_totals[n] == 0 {
            continue;
        }
        orders += 1;
        if hyp_totals[n] > 0 {
            p_sum += matches[n] as f64 / hyp_totals[n] as f64;
        }
        if ref_totals[n] > 0 {
            r_sum += matches[n] as f64 / ref_totals[n] as f64;
        }
    }
    if orders == 0 {
        return Ok(0.0);
    }
    let p = p_sum / orders as f64;
    let r = r_sum / orders as f64;
    if p + r == 0.0 {
        return Ok(0.0);
    }
    Ok(100.0 * (1.0 + BETA2) * p * r / (BETA2 * p + r))
}

/// Word-frequency and sentence-length bucket boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketSpec {
    /// Low bucket: train frequency in (0, freq_low_max].
    pub freq_low_max: u64,
    /// High bucket: train frequency in [freq_high_min, ∞).
    pub freq_high_min: u64,
    /// Short bucket: reference length in (0, len_short_max].
    pub len_short_max: usize,
    /// Medium bucket: reference length in (len_short_max, len_medium_max];
    /// long above.
    pub len_medium_max: usize,
}

impl BucketSpec {
    /// Thresholds used on the full-size benchmarks.
    pub fn paper() -> Self {
        BucketSpec { freq_low_max: 100, freq_high_min: 2000, len_short_max: 10, len_medium_max: 20 }
    }

    /// Thresholds sized for the default synthetic corpus so every bucket is
    /// populated.
    pub fn desk_default() -> Self {
        BucketSpec { freq_low_max: 100, freq_high_min: 2000, len_short_max: 6, len_medium_max: 10 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.freq_low_max >= self.freq_high_min {
            return Err(MetricError::BadSpec(format!(
                "frequency thresholds must increase: {} < {}",
                self.freq_low_max, self.freq_high_min
            )));
        }
        if self.len_short_max >= self.len_medium_max {
            return Err(MetricError::BadSpec(format!(
                "length thresholds must increase: {} < {}",
                self.len_short_max, self.len_medium_max
            )));
        }
        Ok(())
    }

    fn freq_bucket(&self, freq: u64) -> Option<Bucket> {
        match freq {
            0 => None,
            f if f <= self.freq_low_max => Some(Bucket::Low),
            f if f < self.freq_high_min => Some(Bucket::Medium),
            _ => Some(Bucket::High),
        }
    }

    fn len_bucket(&self, len: usize) -> Bucket {
        if len <= self.len_short_max {
            Bucket::Low
        } else if len <= self.len_medium_max {
            Bucket::Medium
        } else {
            Bucket::High
        }
    }
}

/// Bucket label; reads as Low/Medium/High frequency or Short/Medium/Long
/// length depending on the analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Bucket {
    Low,
    Medium,
    High,
}

impl Bucket {
    pub fn freq_name(&self) -> &'static str {
        match self {
            Bucket::Low => "low",
            Bucket::Medium => "medium",
            Bucket::High => "high",
        }
    }

    pub fn len_name(&self) -> &'static str {
        match self {
            Bucket::Low => "short",
            Bucket::Medium => "medium",
            Bucket::High => "long",
        }
    }
}

/// Micro-averaged F1 of target-word prediction per train-frequency bucket.
/// Words absent from the train vocabulary belong to no bucket; empty buckets
/// are absent from the result.
pub fn freq_bucket_f1(
    hyps: &[Vec<String>],
    refs: &[Vec<String>],
    train_freqs: &HashMap<String, u64>,
    spec: &BucketSpec,
) -> Result<BTreeMap<Bucket, f64>> {
    check_lengths(hyps, refs)?;
    spec.validate()?;
    let mut matched: BTreeMap<Bucket, u64> = BTreeMap::new();
    let mut hyp_count: BTreeMap<Bucket, u64> = BTreeMap::new();
    let mut ref_count: BTreeMap<Bucket, u64> = BTreeMap::new();
    for (h, r) in hyps.iter().zip(refs) {
        let mut hc: HashMap<&String, u64> = HashMap::new();
        for w in h {
            *hc.entry(w).or_default() += 1;
        }
        let mut rc: HashMap<&String, u64> = HashMap::new();
        for w in r {
            *rc.entry(w).or_default() += 1;
        }
        for (w, &c) in &hc {
            if let Some(b) = spec.freq_bucket(train_freqs.get(*w).copied().unwrap_or(0)) {
                *hyp_count.entry(b).or_default() += c;
                let m = c.min(rc.get(w).copied().unwrap_or(0));
                *matched.entry(b).or_default() += m;
            }
        }
        for (w, &c) in &rc {
            if let Some(b) = spec.freq_bucket(train_freqs.get(*w).copied().unwrap_or(0)) {
                *ref_count.entry(b).or_default() += c;
            }
        }
    }
    let mut out = BTreeMap::new();
    for b in [Bucket::Low, Bucket::Medium, Bucket::High] {
        let h = hyp_count.get(&b).copied().unwrap_or(0);
        let r = ref_count.get(&b).copied().unwrap_or(0);
        if h + r == 0 {
            continue; // absent, not zero
        }
        let m = matched.get(&b).copied().unwrap_or(0);
        out.insert(b, 2.0 * m as f64 / (h + r) as f64);
    }
    Ok(out)
}

/// Corpus BLEU-4 restricted to reference-length buckets; empty buckets are
/// absent.
pub fn length_bucket_bleu(
    hyps: &[Vec<String>],
    refs: &[Vec<String>],
    spec: &BucketSpec,
) -> Result<BTreeMap<Bucket, f64>> {
    check_lengths(hyps, refs)?;
    spec.validate()?;
    let mut groups: BTreeMap<Bucket, (Vec<Vec<String>>, Vec<Vec<String>>)> = BTreeMap::new();
    for (h, r) in hyps.iter().zip(refs) {
        let b = spec.len_bucket(r.len());
        let slot = groups.entry(b).or_default();
        slot.0.push(h.clone());
        slot.1.push(r.clone());
    }
    let mut out = BTreeMap::new();
    for (b, (h, r)) in groups {
        out.insert(b, bleu4(&h, &r)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(|t| t.to_string()).collect()
    }

    #[test]
    fn bleu_identical_corpus_is_100() {
        let c = vec![toks("a b c d e"), toks("x y z w q")];
        assert!((bleu4(&c, &c).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn bleu_disjoint_corpus_is_zero() {
        let h = vec![toks("a b c d")];
        let r = vec![toks("w x y z")];
        assert!(bleu4(&h, &r).unwrap() < 1e-4);
    }

    #[test]
    fn bleu_clipped_unigram_hand_case() {
        // hyp "the the the cat" vs ref "the cat sat down":
        // p1 = 2/4, p2 = 1/3, p3 = p4 = eps, BP = 1.
        let h = vec![toks("the the the cat")];
        let r = vec![toks("the cat sat down")];
        let want = 100.0 * ((0.5f64.ln() + (1.0f64 / 3.0).ln() + BLEU_EPS.ln() * 2.0) / 4.0).exp();
        let got = bleu4(&h, &r).unwrap();
        assert!((got - want).abs() < 1e-12, "got {} want {}", got, want);
    }

    #[test]
    fn bleu_empty_reference_corpus_is_an_error() {
        assert!(matches!(bleu4(&[], &[]), Err(MetricError::EmptyCorpus)));
    }

    #[test]
    fn bleu_is_permutation_invariant_and_bounded() {
        let h = vec![toks("a b c"), toks("d e f g"), toks("h i")];
        let r = vec![toks("a b x"), toks("d e f q"), toks("h i j")];
        let v1 = bleu4(&h, &r).unwrap();
        let hp = vec![h[2].clone(), h[0].clone(), h[1].clone()];
        let rp = vec![r[2].clone(), r[0].clone(), r[1].clone()];
        let v2 = bleu4(&hp, &rp).unwrap();
        assert_eq!(v1.to_bits(), v2.to_bits());
        assert!((0.0..=100.0).contains(&v1));
    }

    #[test]
    fn bleu_copy_substitution_never_lowers_score() {
        let h = vec![toks("a b c"), toks("d z f g"), toks("h i")];
        let r = vec![toks("a b x"), toks("d e f q"), toks("h i j")];
        let base = bleu4(&h, &r).unwrap();
        for i in 0..h.len() {
            let mut h2 = h.clone();
            h2[i] = r[i].clone();
            let v = bleu4(&h2, &r).unwrap();
            assert!(v >= base - 1e-12, "copy at {} lowered bleu: {} < {}", i, v, base);
        }
    }

    #[test]
    fn rouge_hand_case() {
        // hyp [a,c] vs ref [a,b,c]: LCS 2, P=1, R=2/3, F1=0.8.
        let h = vec![toks("a c")];
        let r = vec![toks("a b c")];
        assert!((rouge_l_f1(&h, &r).unwrap() - 80.0).abs() < 1e-9);
    }

    #[test]
    fn rouge_identical_and_disjoint() {
        let c = vec![toks("a b c")];
        assert!((rouge_l_f1(&c, &c).unwrap() - 100.0).abs() < 1e-9);
        let h = vec![toks("x y")];
        assert_eq!(rouge_l_f1(&h, &c).unwrap(), 0.0);
    }

    #[test]
    fn chrf_identical_and_disjoint() {
        let c = vec![toks("abcdef ghijkl")];
        assert!((chrf(&c, &c).unwrap() - 100.0).abs() < 1e-9);
        let h = vec![toks("xyz")];
        let r = vec![toks("abc")];
        assert_eq!(chrf(&h, &r).unwrap(), 0.0);
    }

    #[test]
    fn chrf_matches_scalar_oracle_on_one_sample() {
        let h = vec![toks("abcd bc")];
        let r = vec![toks("abcf bc")];
        // Independent scalar count: strings "abcdbc" vs "abcfbc".
        let hs: Vec<char> = "abcdbc".chars().collect();
        let rs: Vec<char> = "abcfbc".chars().collect();
        let mut p_sum = 0.0;
        let mut r_sum = 0.0;
        let mut orders = 0;
        for n in 1..=6usize {
            let count = |s: &[char]| {
                let mut m: HashMap<String, u64> = HashMap::new();
                if s.len() >= n {
                    for w in s.windows(n) {
                        *m.entry(w.iter().collect()).or_default() += 1;
                    }
                }
                m
            };
            let hc = count(&hs);
            let rc = count(&rs);
            let ht: u64 = hc.values().sum();
            let rt: u64 = rc.values().sum();
            if ht == 0 && rt == 0 {
                continue;
            }
            orders += 1;
            let m: u64 = hc.iter().map(|(g, c)| (*c).min(rc.get(g).copied().unwrap_or(0))).sum();
            if ht > 0 {
                p_sum += m as f64 / ht as f64;
            }
            if rt > 0 {
                r_sum += m as f64 / rt as f64;
            }
        }
        let p = p_sum / orders as f64;
        let rr = r_sum / orders as f64;
        let want = 100.0 * 5.0 * p * rr / (4.0 * p + rr);
        let got = chrf(&h, &r).unwrap();
        assert!((got - want).abs() < 1e-9, "got {} want {}", got, want);
    }

    fn freqs(pairs: &[(&str, u64)]) -> HashMap<String, u64> {
        pairs.iter().map(|(t, f)| (t.to_string(), *f)).collect()
    }

    #[test]
    fn freq_buckets_hand_case() {
        let spec = BucketSpec::paper();
        let train = freqs(&[("hot", 3000), ("warm", 500), ("rare", 5), ("odd", 50)]);
        let hyps = vec![toks("hot warm rare"), toks("hot hot odd"), toks("warm")];
        let refs = vec![toks("hot warm warm"), toks("hot odd odd"), toks("rare")];
        let got = freq_bucket_f1(&hyps, &refs, &train, &spec).unwrap();
        // Hand count:
        // High (hot): hyp 3, ref 2, match min per sample: s0 1, s1 min(2,1)=1 -> 2. F1 = 4/5.
        // Medium (warm): hyp 2, ref 2, match s0 min(1,2)=1, s2 0 -> 1. F1 = 2/4.
        // Low (rare, odd): hyp 2, ref 3, match s0 0(rare vs none)=0... s0 hyp rare1/ref0 ->0;
        //   s1 odd: min(1,2)=1; s2 rare: hyp0/ref1. total match 1, F1 = 2/5.
        assert!((got[&Bucket::High] - 0.8).abs() < 1e-12);
        assert!((got[&Bucket::Medium] - 0.5).abs() < 1e-12);
        assert!((got[&Bucket::Low] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn freq_buckets_perfect_hypotheses_score_one() {
        let spec = BucketSpec::paper();
        let train = freqs(&[("hot", 3000), ("warm", 500), ("rare", 5)]);
        let c = vec![toks("hot warm rare rare")];
        let got = freq_bucket_f1(&c, &c, &train, &spec).unwrap();
        for (_, v) in got {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn freq_buckets_missing_words_score_zero_and_empty_bucket_absent() {
        let spec = BucketSpec::paper();
        let train = freqs(&[("hot", 3000), ("rare", 5)]);
        let hyps = vec![toks("hot hot")];
        let refs = vec![toks("hot rare")];
        let got = freq_bucket_f1(&hyps, &refs, &train, &spec).unwrap();
        assert_eq!(got[&Bucket::Low], 0.0, "omitted low-frequency word gives F1 0");
        assert!(!got.contains_key(&Bucket::Medium), "no medium words anywhere; bucket absent");
    }

    #[test]
    fn length_buckets_match_direct_recomputation() {
        let spec = BucketSpec::desk_default(); // short <=6, medium <=10
        let hyps = vec![toks("a b c"), toks("a b c d e f g h"), toks("q w e r t y u i o p a s")];
        let refs = vec![toks("a b x"), toks("a b c d e f g q"), toks("q w e r t y u i o p a z")];
        let got = length_bucket_bleu(&hyps, &refs, &spec).unwrap();
        assert_eq!(got.len(), 3);
        let direct_short = bleu4(&hyps[0..1].to_vec(), &refs[0..1].to_vec()).unwrap();
        assert_eq!(got[&Bucket::Low].to_bits(), direct_short.to_bits());
        let direct_long = bleu4(&hyps[2..3].to_vec(), &refs[2..3].to_vec()).unwrap();
        assert_eq!(got[&Bucket::High].to_bits(), direct_long.to_bits());
    }

    #[test]
    fn length_buckets_identical_are_100_each() {
        let spec = BucketSpec::desk_default();
        let c = vec![toks("a b c"), toks("a b c d e f g h"), toks("q w e r t y u i o p a s")];
        let got = length_bucket_bleu(&c, &c, &spec).unwrap();
        for (_, v) in got {
            assert!((v - 100.0).abs() < 1e-9);
        }
    }

    #[test]
    fn bucket_spec_validation() {
        let mut s = BucketSpec::paper();
        s.freq_low_max = 5000;
        assert!(s.validate().is_err());
        let mut s = BucketSpec::paper();
        s.len_short_max = 30;
        assert!(s.validate().is_err());
    }
}
