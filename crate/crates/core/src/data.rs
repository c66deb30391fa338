//! Synthetic sign-gloss-text corpus: generation, vocabularies and storage.
//!
//! Glosses are drawn Zipf-weighted; the text is rendered from the gloss
//! sequence by a fixed grammar (per-gloss word templates, hash-driven
//! function-word insertion and adjacent-block reordering) plus optional
//! random noise. Sign features emit a per-gloss prototype vector with i.i.d.
//! noise for a random duration, separated by occasional blank-prototype gap
//! frames, so gloss order stays consistent with frame order while the text
//! does not.
//!
//! Storage layout (one directory per corpus):
//!   meta.jsonl      one record per triple: id, gloss, text, offset, len, frames
//!   features.bin    concatenated little-endian f32 frames
//!   vocab_gloss.txt / vocab_word.txt   token per line, tab-separated train frequency

use crate::model::{BOS, EOS, FIRST_WORD, UNK};
use crate::rng::{mix_salt, SeededRng};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at {file}:{line}: {msg}")]
    Parse { file: String, line: usize, msg: String },
    #[error("integrity error for sample {id}: {msg}")]
    Integrity { id: String, msg: String },
    #[error("bad synthetic spec: {0}")]
    Spec(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Parameters of the synthetic corpus generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub gloss_vocab: usize,
    /// Number of surface word types (control tokens PAD/BOS/EOS/UNK are
    /// added on top when the vocabulary is built).
    pub word_vocab: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub gloss_len: (usize, usize),
    pub frames_per_gloss: (usize, usize),
    pub feat_dim: usize,
    /// Feature noise around the per-gloss prototype.
    pub sigma: f64,
    /// Per-word probability of drop/replace/duplicate noise in the text.
    pub text_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            gloss_vocab: 60,
            word_vocab: 120,
            train: 2000,
            dev: 200,
            test: 200,
            gloss_len: (3, 9),
            frames_per_gloss: (2, 5),
            feat_dim: 32,
            sigma: 0.3,
            text_noise: 0.05,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.gloss_vocab == 0 {
            return Err(DataError::Spec("gloss vocabulary is empty".into()));
        }
        if self.word_vocab < 8 {
            return Err(DataError::Spec("word vocabulary too small for the grammar".into()));
        }
        if self.gloss_len.0 == 0 || self.gloss_len.0 > self.gloss_len.1 {
            return Err(DataError::Spec(format!("bad gloss length range {:?}", self.gloss_len)));
        }
        if self.frames_per_gloss.0 == 0 || self.frames_per_gloss.0 > self.frames_per_gloss.1 {
            return Err(DataError::Spec(format!(
                "bad frames-per-gloss range {:?}",
                self.frames_per_gloss
            )));
        }
        if self.feat_dim == 0 {
            return Err(DataError::Spec("feature dimension must be positive".into()));
        }
        if self.sigma < 0.0 {
            return Err(DataError::Spec("sigma must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.text_noise) {
            return Err(DataError::Spec("text noise rate must lie in [0,1]".into()));
        }
        Ok(())
    }
}

/// One sample: sign features, gloss tokens, text tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Triple {
    pub id: String,
    /// `[Z, feat_dim]`, values exactly representable as f32.
    pub frames: Tensor,
    pub gloss: Vec<String>,
    pub text: Vec<String>,
}

impl Triple {
    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }
}

/// Token table with train-split frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    freq: Vec<u64>,
    by_token: HashMap<String, usize>,
}

impl Vocab {
    fn from_entries(entries: Vec<(String, u64)>) -> Self {
        let mut by_token = HashMap::new();
        let mut tokens = Vec::with_capacity(entries.len());
        let mut freq = Vec::with_capacity(entries.len());
        for (t, f) in entries {
            by_token.insert(t.clone(), tokens.len());
            tokens.push(t);
            freq.push(f);
        }
        Vocab { tokens, freq, by_token }
    }

    /// Word vocabulary: PAD/BOS/EOS/UNK first, then tokens sorted by name.
    pub fn build_words(counts: &HashMap<String, u64>) -> Self {
        let mut entries: Vec<(String, u64)> = vec![
            ("<pad>".into(), 0),
            ("<bos>".into(), 0),
            ("<eos>".into(), 0),
            ("<unk>".into(), 0),
        ];
        let mut sorted: Vec<_> = counts.iter().collect();
        sorted.sort_by(|a, b| a.0.cmp(b.0));
        entries.extend(sorted.into_iter().map(|(t, f)| (t.clone(), *f)));
        Vocab::from_entries(entries)
    }

    /// Gloss vocabulary: tokens sorted by name, then `<unk>`. The CTC blank
    /// is not a token; it is the extra class `len()` of the classifier head.
    pub fn build_glosses(counts: &HashMap<String, u64>) -> Self {
        let mut sorted: Vec<_> = counts.iter().collect();
        sorted.sort_by(|a, b| a.0.cmp(b.0));
        let mut entries: Vec<(String, u64)> =
            sorted.into_iter().map(|(t, f)| (t.clone(), *f)).collect();
        entries.push(("<unk>".into(), 0));
        Vocab::from_entries(entries)
    }

    /// Rebuild from `(token, freq)` pairs in id order (checkpoints).
    pub fn from_pairs(pairs: Vec<(String, u64)>) -> Self {
        Vocab::from_entries(pairs)
    }

    /// `(token, freq)` pairs in id order.
    pub fn pairs(&self) -> Vec<(String, u64)> {
        self.tokens.iter().cloned().zip(self.freq.iter().copied()).collect()
    }

    /// Token → train frequency map (bucket analyses).
    pub fn freq_map(&self) -> HashMap<String, u64> {
        self.tokens.iter().cloned().zip(self.freq.iter().copied()).collect()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn freq_of(&self, token: &str) -> u64 {
        self.by_token.get(token).map(|&i| self.freq[i]).unwrap_or(0)
    }

    pub fn lookup(&self, token: &str) -> Option<usize> {
        self.by_token.get(token).copied()
    }

    /// Word-token encoding: unknowns map to UNK.
    pub fn encode_word(&self, token: &str) -> usize {
        self.lookup(token).unwrap_or(UNK)
    }

    /// Gloss-token encoding: unknowns map to the trailing `<unk>` entry.
    pub fn encode_gloss(&self, token: &str) -> usize {
        self.lookup(token).unwrap_or(self.tokens.len() - 1)
    }

    pub fn encode_text(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.encode_word(t)).collect()
    }

    /// `BOS tokens EOS` word ids.
    pub fn encode_target(&self, tokens: &[String]) -> Vec<usize> {
        let mut out = Vec::with_capacity(tokens.len() + 2);
        out.push(BOS);
        out.extend(tokens.iter().map(|t| self.encode_word(t)));
        out.push(EOS);
        out
    }

    pub fn encode_gloss_seq(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.encode_gloss(t)).collect()
    }

    /// Decode word ids, skipping control tokens.
    pub fn decode_words(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| id >= FIRST_WORD && id < self.tokens.len())
            .map(|&id| self.tokens[id].clone())
            .collect()
    }

    fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        for (t, f) in self.tokens.iter().zip(&self.freq) {
            writeln!(w, "{}\t{}", t, f)?;
        }
        Ok(())
    }

    fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path)?;
        let mut entries = Vec::new();
        for (ln, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (tok, freq) = line.split_once('\t').ok_or_else(|| DataError::Parse {
                file: path.display().to_string(),
                line: ln + 1,
                msg: "expected token\\tfreq".into(),
            })?;
            let f: u64 = freq.parse().map_err(|e| DataError::Parse {
                file: path.display().to_string(),
                line: ln + 1,
                msg: format!("bad frequency: {}", e),
            })?;
            entries.push((tok.to_string(), f));
        }
        Ok(Vocab::from_entries(entries))
    }
}

/// Train/dev/test triples plus vocabularies built from the train split.
#[derive(Debug, Clone)]
pub struct CorpusSplits {
    pub train: Vec<Triple>,
    pub dev: Vec<Triple>,
    pub test: Vec<Triple>,
    pub gloss_vocab: Vocab,
    pub word_vocab: Vocab,
}

impl CorpusSplits {
    pub fn split(&self, name: &str) -> Option<&[Triple]> {
        match name {
            "train" => Some(&self.train),
            "dev" => Some(&self.dev),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    pub fn feat_dim(&self) -> usize {
        self.train.first().map(|t| t.frames.shape()[1]).unwrap_or(0)
    }

    pub fn find(&self, id: &str) -> Option<&Triple> {
        let split = id.split('-').next()?;
        self.split(split)?.iter().find(|t| t.id == id)
    }
}

fn hash2(a: u64, b: u64) -> u64 {
    mix_salt(&[a, b])
}

/// Deterministic grammar: every gloss renders to one or two content words,
/// some gloss bigrams insert a function word, some adjacent blocks swap.
struct Grammar {
    words: Vec<String>,
    n_function: usize,
    n_content: usize,
}

impl Grammar {
    fn new(spec: &SyntheticSpec) -> Self {
        let n_function = (spec.word_vocab / 10).max(4);
        let n_content = spec.word_vocab - n_function;
        let mut words = Vec::with_capacity(spec.word_vocab);
        for i in 0..n_content {
            words.push(format!("w{:03}", i));
        }
        for i in 0..n_function {
            words.push(format!("f{:02}", i));
        }
        Grammar { words, n_function, n_content }
    }

    fn content(&self, idx: usize) -> &str {
        &self.words[idx % self.n_content]
    }

    fn function(&self, idx: usize) -> &str {
        &self.words[self.n_content + idx % self.n_function]
    }

    /// Word block for one gloss id.
    fn template(&self, gloss: usize) -> Vec<&str> {
        let g = gloss as u64;
        let mut block = vec![self.content(gloss)];
        if hash2(g, 0x7e11) % 3 == 0 {
            block.push(self.content((gloss.wrapping_mul(7) + 13) % self.n_content.max(1)));
        }
        block
    }

    /// Render a gloss sequence into text. Deterministic whenever
    /// `noise_rate` is zero; noise draws come from `rng`. The insertion and
    /// reordering rules are keyed on single glosses so they are learnable
    /// from a few thousand samples.
    fn render(&self, gloss_ids: &[usize], noise_rate: f64, rng: &mut SeededRng) -> Vec<String> {
        let mut blocks: Vec<Vec<&str>> = gloss_ids.iter().map(|&g| self.template(g)).collect();
        // Some glosses carry a function word in front of their block.
        for (block, &g) in blocks.iter_mut().zip(gloss_ids) {
            let h = hash2(g as u64, 0xf00d);
            if h % 3 == 0 {
                block.insert(0, self.function((h >> 8) as usize));
            }
        }
        // Non-monotonic reordering (window <= 2): a "late" gloss swaps its
        // block behind the following one.
        let mut i = 0;
        while i + 1 < blocks.len() {
            if hash2(gloss_ids[i] as u64, 0xbeef) % 4 == 0 {
                blocks.swap(i, i + 1);
                i += 2;
            } else {
                i += 1;
            }
        }
        let mut text: Vec<String> = blocks.into_iter().flatten().map(|s| s.to_string()).collect();
        if noise_rate > 0.0 {
            let mut noisy = Vec::with_capacity(text.len() + 2);
            for w in text.drain(..) {
                if rng.uniform01() < noise_rate {
                    match rng.below(3) {
                        0 => {} // drop
                        1 => noisy.push(self.words[rng.below(self.words.len())].clone()),
                        _ => {
                            noisy.push(w.clone());
                            noisy.push(w);
                        }
                    }
                } else {
                    noisy.push(w);
                }
            }
            text = noisy;
        }
        if text.is_empty() {
            // Noise dropped everything; keep one word so the pair stays usable.
            text.push(self.content(gloss_ids.first().copied().unwrap_or(0)).to_string());
        }
        text
    }
}

#[cfg(test)]
fn fnv(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Zipf(1.0) sampler over `n` ranks.
struct Zipf {
    cumulative: Vec<f64>,
}

impl Zipf {
    fn new(n: usize) -> Self {
        let mut cumulative = Vec::with_capacity(n);
        let mut acc = 0.0;
        for rank in 1..=n {
            acc += 1.0 / rank as f64;
            cumulative.push(acc);
        }
        let total = acc;
        for c in cumulative.iter_mut() {
            *c /= total;
        }
        Zipf { cumulative }
    }

    fn sample(&self, rng: &mut SeededRng) -> usize {
        let u = rng.uniform01();
        self.cumulative.partition_point(|&c| c < u).min(self.cumulative.len() - 1)
    }
}

/// Quantize to f32 so that stored features round-trip bitwise.
fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

fn generate_split(
    spec: &SyntheticSpec,
    grammar: &Grammar,
    prototypes: &[Vec<f64>],
    blank_proto: &[f64],
    split: &str,
    salt: u64,
    count: usize,
) -> Vec<Triple> {
    let zipf = Zipf::new(spec.gloss_vocab);
    let mut gloss_rng = SeededRng::stream(spec.seed, "synth.gloss", salt);
    let mut noise_rng = SeededRng::stream(spec.seed, "synth.textnoise", salt);
    let mut feat_rng = SeededRng::stream(spec.seed, "synth.feat", salt);
    let d = spec.feat_dim;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let len = gloss_rng.range_inclusive(spec.gloss_len.0, spec.gloss_len.1);
        let gloss_ids: Vec<usize> = (0..len).map(|_| zipf.sample(&mut gloss_rng)).collect();
        let text = grammar.render(&gloss_ids, spec.text_noise, &mut noise_rng);
        let mut frames: Vec<f64> = Vec::new();
        for (v, &g) in gloss_ids.iter().enumerate() {
            let dur = feat_rng.range_inclusive(spec.frames_per_gloss.0, spec.frames_per_gloss.1);
            for _ in 0..dur {
                for k in 0..d {
                    frames.push(quantize(prototypes[g][k] + spec.sigma * feat_rng.std_normal()));
                }
            }
            let gap = v + 1 < gloss_ids.len() && feat_rng.uniform01() < 0.5;
            if gap {
                for k in 0..d {
                    frames.push(quantize(blank_proto[k] + spec.sigma * feat_rng.std_normal()));
                }
            }
        }
        let z = frames.len() / d;
        debug_assert!(z >= gloss_ids.len());
        out.push(Triple {
            id: format!("{split}-{i:05}"),
            frames: Tensor::from_raw(vec![z, d], frames),
            gloss: gloss_ids.iter().map(|&g| format!("g{:03}", g)).collect(),
            text,
        });
    }
    out
}

/// Generate the full corpus. Deterministic per `spec.seed`, bit-for-bit.
pub fn generate_corpus(spec: &SyntheticSpec) -> Result<CorpusSplits> {
    spec.validate()?;
    let grammar = Grammar::new(spec);
    let mut proto_rng = SeededRng::stream(spec.seed, "synth.proto", 0);
    let prototypes: Vec<Vec<f64>> = (0..spec.gloss_vocab)
        .map(|_| (0..spec.feat_dim).map(|_| proto_rng.std_normal()).collect())
        .collect();
    let blank_proto: Vec<f64> = (0..spec.feat_dim).map(|_| proto_rng.std_normal()).collect();

    let train = generate_split(spec, &grammar, &prototypes, &blank_proto, "train", 0, spec.train);
    let dev = generate_split(spec, &grammar, &prototypes, &blank_proto, "dev", 1, spec.dev);
    let test = generate_split(spec, &grammar, &prototypes, &blank_proto, "test", 2, spec.test);

    let mut word_counts: HashMap<String, u64> = HashMap::new();
    let mut gloss_counts: HashMap<String, u64> = HashMap::new();
    for t in &train {
        for w in &t.text {
            *word_counts.entry(w.clone()).or_default() += 1;
        }
        for g in &t.gloss {
            *gloss_counts.entry(g.clone()).or_default() += 1;
        }
    }
    Ok(CorpusSplits {
        train,
        dev,
        test,
        gloss_vocab: Vocab::build_glosses(&gloss_counts),
        word_vocab: Vocab::build_words(&word_counts),
    })
}

#[derive(Serialize, Deserialize)]
struct MetaRecord {
    id: String,
    gloss: Vec<String>,
    text: Vec<String>,
    /// Byte offset into features.bin.
    offset: u64,
    /// Number of f32 values.
    len: u64,
    frames: u64,
}

/// Write the corpus directory (meta.jsonl, features.bin, vocab files).
pub fn save_corpus(splits: &CorpusSplits, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut meta = BufWriter::new(fs::File::create(dir.join("meta.jsonl"))?);
    let mut blob = BufWriter::new(fs::File::create(dir.join("features.bin"))?);
    let mut offset: u64 = 0;
    for split in [&splits.train, &splits.dev, &splits.test] {
        for t in split {
            let record = MetaRecord {
                id: t.id.clone(),
                gloss: t.gloss.clone(),
                text: t.text.clone(),
                offset,
                len: t.frames.numel() as u64,
                frames: t.num_frames() as u64,
            };
            serde_json::to_writer(&mut meta, &record)?;
            meta.write_all(b"\n")?;
            for &v in t.frames.data() {
                blob.write_all(&(v as f32).to_le_bytes())?;
            }
            offset += 4 * t.frames.numel() as u64;
        }
    }
    meta.flush()?;
    blob.flush()?;
    splits.gloss_vocab.save(&dir.join("vocab_gloss.txt"))?;
    splits.word_vocab.save(&dir.join("vocab_word.txt"))?;
    Ok(())
}

/// Load a corpus directory; also accepts externally produced files matching
/// the documented format.
pub fn load_corpus(dir: &Path) -> Result<CorpusSplits> {
    let meta_path = dir.join("meta.jsonl");
    let blob = fs::read(dir.join("features.bin"))?;
    let mut train = Vec::new();
    let mut dev = Vec::new();
    let mut test = Vec::new();
    let file = fs::File::open(&meta_path)?;
    for (ln, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MetaRecord = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            file: meta_path.display().to_string(),
            line: ln + 1,
            msg: e.to_string(),
        })?;
        let nbytes = rec.len as usize * 4;
        let start = rec.offset as usize;
        if start + nbytes > blob.len() {
            return Err(DataError::Integrity {
                id: rec.id,
                msg: format!(
                    "feature blob truncated: need bytes [{}, {}) of {}",
                    start,
                    start + nbytes,
                    blob.len()
                ),
            });
        }
        if rec.frames == 0 || rec.len % rec.frames != 0 {
            return Err(DataError::Integrity {
                id: rec.id,
                msg: format!("feature length {} not divisible by {} frames", rec.len, rec.frames),
            });
        }
        let d = (rec.len / rec.frames) as usize;
        let mut data = Vec::with_capacity(rec.len as usize);
        for chunk in blob[start..start + nbytes].chunks_exact(4) {
            data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64);
        }
        let triple = Triple {
            frames: Tensor::from_raw(vec![rec.frames as usize, d], data),
            id: rec.id,
            gloss: rec.gloss,
            text: rec.text,
        };
        match triple.id.split('-').next() {
            Some("train") => train.push(triple),
            Some("dev") => dev.push(triple),
            Some("test") => test.push(triple),
            _ => {
                return Err(DataError::Parse {
                    file: meta_path.display().to_string(),
                    line: ln + 1,
                    msg: format!("id {} has no train/dev/test prefix", triple.id),
                })
            }
        }
    }
    let gloss_vocab = Vocab::load(&dir.join("vocab_gloss.txt"))?;
    let word_vocab = Vocab::load(&dir.join("vocab_word.txt"))?;
    Ok(CorpusSplits { train, dev, test, gloss_vocab, word_vocab })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PAD;

    fn tiny_spec() -> SyntheticSpec {
        SyntheticSpec {
            gloss_vocab: 10,
            word_vocab: 24,
            train: 40,
            dev: 8,
            test: 8,
            gloss_len: (2, 5),
            frames_per_gloss: (2, 3),
            feat_dim: 4,
            sigma: 0.2,
            text_noise: 0.05,
            seed: 11,
        }
    }

    fn corpus_fingerprint(c: &CorpusSplits) -> u64 {
        let mut h = 0u64;
        for split in [&c.train, &c.dev, &c.test] {
            for t in split {
                h = mix_salt(&[h, t.frames.fingerprint(), fnv(&t.gloss.join(" ")), fnv(&t.text.join(" "))]);
            }
        }
        h
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let a = generate_corpus(&tiny_spec()).unwrap();
        let b = generate_corpus(&tiny_spec()).unwrap();
        assert_eq!(corpus_fingerprint(&a), corpus_fingerprint(&b));
        let mut other = tiny_spec();
        other.seed = 12;
        let c = generate_corpus(&other).unwrap();
        assert_ne!(corpus_fingerprint(&a), corpus_fingerprint(&c));
    }

    #[test]
    fn every_triple_has_at_least_as_many_frames_as_glosses() {
        let c = generate_corpus(&tiny_spec()).unwrap();
        for t in c.train.iter().chain(&c.dev).chain(&c.test) {
            assert!(t.num_frames() >= t.gloss.len(), "{}", t.id);
            assert!(!t.text.is_empty());
        }
    }

    #[test]
    fn zero_noise_makes_text_a_function_of_gloss() {
        let mut spec = tiny_spec();
        spec.sigma = 0.0;
        spec.text_noise = 0.0;
        spec.train = 300;
        let c = generate_corpus(&spec).unwrap();
        let mut by_gloss: HashMap<String, &Vec<String>> = HashMap::new();
        let mut duplicates = 0;
        for t in &c.train {
            let key = t.gloss.join(" ");
            if let Some(prev) = by_gloss.get(&key) {
                duplicates += 1;
                assert_eq!(*prev, &t.text, "same gloss sequence must render the same text");
            } else {
                by_gloss.insert(key, &t.text);
            }
        }
        assert!(duplicates > 0, "test corpus never repeated a gloss sequence");
    }

    #[test]
    fn grammar_reorders_some_blocks() {
        // The text must not always be the monotone concatenation of
        // templates; find at least one sample where order differs.
        let mut spec = tiny_spec();
        spec.text_noise = 0.0;
        spec.train = 200;
        let grammar = Grammar::new(&spec);
        let c = generate_corpus(&spec).unwrap();
        let mut monotone_breaks = 0;
        for t in &c.train {
            let gloss_ids: Vec<usize> =
                t.gloss.iter().map(|g| g[1..].parse::<usize>().unwrap()).collect();
            let blocks: Vec<String> =
                gloss_ids.iter().flat_map(|&g| grammar.template(g)).map(|s| s.to_string()).collect();
            if t.text != blocks {
                monotone_breaks += 1;
            }
        }
        assert!(monotone_breaks > 0, "grammar produced only monotone texts");
    }

    #[test]
    fn train_frequencies_span_low_medium_high_buckets() {
        let c = generate_corpus(&SyntheticSpec::default()).unwrap();
        let mut low = 0;
        let mut medium = 0;
        let mut high = 0;
        for (t, &f) in c.word_vocab.tokens().iter().zip(&c.word_vocab.freq) {
            if t.starts_with('<') {
                continue;
            }
            match f {
                0 => {}
                1..=100 => low += 1,
                101..=1999 => medium += 1,
                _ => high += 1,
            }
        }
        assert!(low > 0 && medium > 0 && high > 0, "low={} medium={} high={}", low, medium, high);
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let c = generate_corpus(&tiny_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_corpus(&c, dir.path()).unwrap();
        let loaded = load_corpus(dir.path()).unwrap();
        assert_eq!(corpus_fingerprint(&c), corpus_fingerprint(&loaded));
        assert_eq!(c.word_vocab, loaded.word_vocab);
        assert_eq!(c.gloss_vocab, loaded.gloss_vocab);
        assert_eq!(c.train.len(), loaded.train.len());
        for (a, b) in c.train.iter().zip(&loaded.train) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn truncated_blob_reports_offending_id() {
        let c = generate_corpus(&tiny_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_corpus(&c, dir.path()).unwrap();
        let blob_path = dir.path().join("features.bin");
        let blob = fs::read(&blob_path).unwrap();
        fs::write(&blob_path, &blob[..blob.len() - 8]).unwrap();
        match load_corpus(dir.path()) {
            Err(DataError::Integrity { id, .. }) => {
                assert_eq!(id, c.test.last().unwrap().id, "should name the truncated sample");
            }
            other => panic!("expected integrity error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn vocab_encoding_maps_unknowns_to_unk() {
        let c = generate_corpus(&tiny_spec()).unwrap();
        assert_eq!(c.word_vocab.encode_word("definitely-not-a-token"), UNK);
        let gloss_unk = c.gloss_vocab.len() - 1;
        assert_eq!(c.gloss_vocab.encode_gloss("g999"), gloss_unk);
        assert_eq!(c.gloss_vocab.token(gloss_unk), "<unk>");
        // Specials occupy the reserved slots.
        assert_eq!(c.word_vocab.token(PAD), "<pad>");
        assert_eq!(c.word_vocab.token(BOS), "<bos>");
        assert_eq!(c.word_vocab.token(EOS), "<eos>");
        assert_eq!(c.word_vocab.token(UNK), "<unk>");
    }

    #[test]
    fn ids_are_unique_across_splits() {
        let c = generate_corpus(&tiny_spec()).unwrap();
        let mut seen = std::collections::HashSet::new();
        for t in c.train.iter().chain(&c.dev).chain(&c.test) {
            assert!(seen.insert(t.id.clone()), "duplicate id {}", t.id);
        }
    }

    #[test]
    fn bad_specs_are_rejected() {
        let mut s = tiny_spec();
        s.gloss_len = (5, 3);
        assert!(matches!(generate_corpus(&s), Err(DataError::Spec(_))));
        let mut s = tiny_spec();
        s.word_vocab = 4;
        assert!(matches!(generate_corpus(&s), Err(DataError::Spec(_))));
        let mut s = tiny_spec();
        s.sigma = -1.0;
        assert!(matches!(generate_corpus(&s), Err(DataError::Spec(_))));
    }
}
