//! CTC marginals, loss, forced alignment and WER.
//!
//! The lattice interleaves blanks with the reference glosses
//! (`blank, g_1, blank, g_2, …, blank`, length `2V+1`) and the blank is
//! always the last class of the posterior (`C-1`). The marginal is a forward
//! DP in log space; the gradient uses the forward-backward product; the
//! aligner is the max (Viterbi) variant of the same recurrence with a
//! deterministic tie-break.

use crate::tensor::kernels::log_add;
use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CtcError {
    #[error("no viable path: {frames} frames cannot carry {labels} labels ({min_frames} needed)")]
    InfeasibleAlignment { frames: usize, labels: usize, min_frames: usize },
    #[error("label id {id} out of range: posterior has {real_classes} non-blank classes")]
    InvalidLabel { id: usize, real_classes: usize },
    #[error("bad lattice: {0}")]
    BadLattice(String),
}

pub type Result<T> = std::result::Result<T, CtcError>;

/// Which form of the CTC objective to return.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CtcLossForm {
    /// −log P(G*|h). Default: well-behaved gradients in log space.
    NegLog,
    /// 1 − P(G*|h), the literal definition; degenerate once P is small.
    PaperLiteral,
}

/// Viterbi path with per-gloss temporal boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentResult {
    /// Class id per frame (blank = C-1).
    pub path: Vec<usize>,
    /// Inclusive (l_v, r_v) frame indices, one pair per gloss.
    pub boundaries: Vec<(usize, usize)>,
    /// log P(π*|h).
    pub path_log_prob: f64,
}

impl AlignmentResult {
    /// P(π*|h) in probability space.
    pub fn path_prob(&self) -> f64 {
        self.path_log_prob.exp()
    }
}

/// Minimum frame count that admits a viable path: one frame per label plus a
/// mandatory blank between equal consecutive labels.
pub fn min_frames(labels: &[usize]) -> usize {
    let repeats = labels.windows(2).filter(|w| w[0] == w[1]).count();
    labels.len() + repeats
}

fn validate(z: usize, c: usize, labels: &[usize]) -> Result<()> {
    if c < 2 {
        return Err(CtcError::BadLattice(format!("need >= 2 classes (got {})", c)));
    }
    let real = c - 1;
    if let Some(&bad) = labels.iter().find(|&&l| l >= real) {
        return Err(CtcError::InvalidLabel { id: bad, real_classes: real });
    }
    let need = min_frames(labels);
    if z < need {
        return Err(CtcError::InfeasibleAlignment { frames: z, labels: labels.len(), min_frames: need });
    }
    Ok(())
}

/// Extended label sequence: blank, g_1, blank, …, g_V, blank.
fn ext_labels(labels: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(blank);
    for &l in labels {
        ext.push(l);
        ext.push(blank);
    }
    ext
}

/// Whether the skip transition (s-2 -> s) is allowed into ext state `s`.
fn skip_allowed(ext: &[usize], s: usize, blank: usize) -> bool {
    s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]
}

fn forward_alpha(lp: &[f64], z: usize, c: usize, labels: &[usize]) -> (Vec<f64>, usize) {
    let blank = c - 1;
    let ext = ext_labels(labels, blank);
    let s_len = ext.len();
    let mut alpha = vec![f64::NEG_INFINITY; z * s_len];
    alpha[0] = lp[blank];
    if s_len > 1 {
        alpha[1] = lp[ext[1]];
    }
    for t in 1..z {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        let cur = &mut cur[..s_len];
        for s in 0..s_len {
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if skip_allowed(&ext, s, blank) {
                acc = log_add(acc, prev[s - 2]);
            }
            cur[s] = if acc == f64::NEG_INFINITY { acc } else { acc + lp[t * c + ext[s]] };
        }
    }
    (alpha, s_len)
}

fn backward_beta(lp: &[f64], z: usize, c: usize, labels: &[usize]) -> Vec<f64> {
    let blank = c - 1;
    let ext = ext_labels(labels, blank);
    let s_len = ext.len();
    let mut beta = vec![f64::NEG_INFINITY; z * s_len];
    beta[(z - 1) * s_len + s_len - 1] = lp[(z - 1) * c + ext[s_len - 1]];
    if s_len > 1 {
        beta[(z - 1) * s_len + s_len - 2] = lp[(z - 1) * c + ext[s_len - 2]];
    }
    for t in (0..z - 1).rev() {
        for s in 0..s_len {
            let mut acc = beta[(t + 1) * s_len + s];
            if s + 1 < s_len {
                acc = log_add(acc, beta[(t + 1) * s_len + s + 1]);
            }
            if s + 2 < s_len && skip_allowed(&ext, s + 2, blank) {
                acc = log_add(acc, beta[(t + 1) * s_len + s + 2]);
            }
            beta[t * s_len + s] =
                if acc == f64::NEG_INFINITY { acc } else { acc + lp[t * c + ext[s]] };
        }
    }
    beta
}

/// −log P(labels | lattice) over a raw `[Z, C]` log-probability slice.
/// Internal entry point used by the tape op; see [`ctc_marginal`] for the
/// tensor-level API.
pub fn neg_log_marginal_lattice(lp: &[f64], z: usize, c: usize, labels: &[usize]) -> Result<f64> {
    validate(z, c, labels)?;
    let (alpha, s_len) = forward_alpha(lp, z, c, labels);
    let last = &alpha[(z - 1) * s_len..];
    let mut logp = last[s_len - 1];
    if s_len > 1 {
        logp = log_add(logp, last[s_len - 2]);
    }
    if logp == f64::NEG_INFINITY {
        return Err(CtcError::BadLattice("zero total path probability".into()));
    }
    Ok(-logp)
}

/// d(−log P)/d lp[t,c] via the forward-backward product, written to `out`.
pub fn neg_log_marginal_grad(
    lp: &[f64],
    z: usize,
    c: usize,
    labels: &[usize],
    out: &mut [f64],
) -> Result<()> {
    validate(z, c, labels)?;
    let blank = c - 1;
    let ext = ext_labels(labels, blank);
    let s_len = ext.len();
    let (alpha, _) = forward_alpha(lp, z, c, labels);
    let beta = backward_beta(lp, z, c, labels);
    let last = &alpha[(z - 1) * s_len..];
    let mut logp = last[s_len - 1];
    if s_len > 1 {
        logp = log_add(logp, last[s_len - 2]);
    }
    out.fill(0.0);
    let mut per_class = vec![f64::NEG_INFINITY; c];
    for t in 0..z {
        per_class.fill(f64::NEG_INFINITY);
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            if ab != f64::NEG_INFINITY {
                per_class[ext[s]] = log_add(per_class[ext[s]], ab);
            }
        }
        for k in 0..c {
            if per_class[k] != f64::NEG_INFINITY {
                out[t * c + k] = -(per_class[k] - lp[t * c + k] - logp).exp();
            }
        }
    }
    Ok(())
}

fn lattice_dims(posterior: &Tensor) -> Result<(usize, usize)> {
    match posterior.shape() {
        [z, c] => Ok((*z, *c)),
        other => Err(CtcError::BadLattice(format!("expected [Z, C] lattice, got {:?}", other))),
    }
}

/// log P(G*|h): the CTC marginal over all viable paths.
pub fn ctc_marginal(posterior: &Tensor, gloss_ref: &[usize]) -> Result<f64> {
    let (z, c) = lattice_dims(posterior)?;
    neg_log_marginal_lattice(posterior.data(), z, c, gloss_ref).map(|v| -v)
}

/// CTC loss in the requested form (values only; the differentiable path goes
/// through [`crate::tensor::Graph::ctc_neg_log`]).
pub fn ctc_loss(posterior: &Tensor, gloss_ref: &[usize], form: CtcLossForm) -> Result<f64> {
    let logp = ctc_marginal(posterior, gloss_ref)?;
    Ok(match form {
        CtcLossForm::NegLog => -logp,
        CtcLossForm::PaperLiteral => 1.0 - logp.exp(),
    })
}

/// Viterbi forced alignment: the max-probability path constrained to the
/// reference, with per-gloss inclusive frame boundaries.
///
/// Tie-break: prefer the transition extending the current non-blank label
/// (earliest start, longest segment), then the lower lattice index; at the
/// final frame prefer the lower lattice index (label over trailing blank).
pub fn force_align(posterior: &Tensor, gloss_ref: &[usize]) -> Result<AlignmentResult> {
    let (z, c) = lattice_dims(posterior)?;
    validate(z, c, gloss_ref)?;
    let lp = posterior.data();
    let blank = c - 1;
    let ext = ext_labels(gloss_ref, blank);
    let s_len = ext.len();

    let mut score = vec![f64::NEG_INFINITY; z * s_len];
    let mut bp = vec![usize::MAX; z * s_len];
    score[0] = lp[blank];
    if s_len > 1 {
        score[1] = lp[ext[1]];
    }
    for t in 1..z {
        for s in 0..s_len {
            // Candidate predecessors in tie-break preference order.
            let candidates: [usize; 3] = if ext[s] != blank {
                if skip_allowed(&ext, s, blank) {
                    [s, s - 2, s - 1]
                } else {
                    [s, s - 1, usize::MAX]
                }
            } else if s >= 1 {
                [s - 1, s, usize::MAX]
            } else {
                [s, usize::MAX, usize::MAX]
            };
            let mut best = f64::NEG_INFINITY;
            let mut best_prev = usize::MAX;
            for &p in candidates.iter().filter(|&&p| p != usize::MAX) {
                let v = score[(t - 1) * s_len + p];
                if v > best {
                    best = v;
                    best_prev = p;
                }
            }
            if best != f64::NEG_INFINITY {
                score[t * s_len + s] = best + lp[t * c + ext[s]];
                bp[t * s_len + s] = best_prev;
            }
        }
    }

    // Terminal: lower lattice index wins ties (the last label before the
    // trailing blank).
    let mut end = s_len - 1;
    let mut best = score[(z - 1) * s_len + end];
    if s_len > 1 {
        let v = score[(z - 1) * s_len + s_len - 2];
        if v >= best {
            best = v;
            end = s_len - 2;
        }
    }
    if best == f64::NEG_INFINITY {
        return Err(CtcError::BadLattice("zero probability for every viable path".into()));
    }

    let mut states = vec![0usize; z];
    let mut s = end;
    for t in (0..z).rev() {
        states[t] = s;
        if t > 0 {
            s = bp[t * s_len + s];
        }
    }

    let path: Vec<usize> = states.iter().map(|&s| ext[s]).collect();
    let mut boundaries = Vec::with_capacity(gloss_ref.len());
    for v in 0..gloss_ref.len() {
        let state = 2 * v + 1;
        let l = states.iter().position(|&s| s == state);
        let r = states.iter().rposition(|&s| s == state);
        match (l, r) {
            (Some(l), Some(r)) => boundaries.push((l, r)),
            _ => {
                return Err(CtcError::BadLattice(format!(
                    "viterbi path skipped gloss {} entirely",
                    v
                )))
            }
        }
    }
    Ok(AlignmentResult { path, boundaries, path_log_prob: best })
}

/// Collapse a frame-level path: merge repeats, then drop blanks.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for &p in path {
        if p != prev && p != blank {
            out.push(p);
        }
        prev = p;
    }
    out
}

/// Token-level edit distance.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let n = b.len();
    let mut prev: Vec<usize> = (0..=n).collect();
    let mut cur = vec![0usize; n + 1];
    for (i, ai) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, bj) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ai != bj);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[n]
}

/// Word error rate in percent: `100 * edits / max(1, |ref|)`.
pub fn wer<T: PartialEq>(hyp: &[T], reference: &[T]) -> f64 {
    100.0 * levenshtein(hyp, reference) as f64 / reference.len().max(1) as f64
}

/// Corpus-level WER: total edits over total reference length.
pub fn corpus_wer<T: PartialEq>(pairs: &[(Vec<T>, Vec<T>)]) -> f64 {
    let edits: usize = pairs.iter().map(|(h, r)| levenshtein(h, r)).sum();
    let total: usize = pairs.iter().map(|(_, r)| r.len()).sum();
    100.0 * edits as f64 / total.max(1) as f64
}
