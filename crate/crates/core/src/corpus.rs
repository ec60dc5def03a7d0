//! Text ingestion: tokenization, vocabulary construction, character n-gram
//! hashing, corpus file formats, and a synthetic ground-truth bitext
//! generator used for desk-scale experiments.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerConfig {
    pub lowercase: bool,
    pub ngram_min: usize,
    pub ngram_max: usize,
    pub ngram_buckets: usize,
    pub oov_buckets: usize,
}

impl TokenizerConfig {
    /// Configuration from the reference setup: 200k n-gram buckets, 10k OOV
    /// buckets, n-grams of length 3..=6.
    pub fn paper() -> Self {
        TokenizerConfig {
            lowercase: true,
            ngram_min: 3,
            ngram_max: 6,
            ngram_buckets: 200_000,
            oov_buckets: 10_000,
        }
    }

    /// Small bucket spaces for fast CPU experiments.
    pub fn desk() -> Self {
        TokenizerConfig {
            lowercase: true,
            ngram_min: 3,
            ngram_max: 4,
            ngram_buckets: 2048,
            oov_buckets: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ngram_min < 1 || self.ngram_min > self.ngram_max {
            return Err(Error::InvalidConfig(format!(
                "ngram range [{}, {}]",
                self.ngram_min, self.ngram_max
            )));
        }
        if self.ngram_buckets == 0 || self.oov_buckets == 0 {
            return Err(Error::InvalidConfig("bucket counts must be > 0".into()));
        }
        Ok(())
    }
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig::desk()
    }
}

/// 64-bit FNV-1a. Frozen by golden tests; changing this silently invalidates
/// every stored vocabulary and checkpoint.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn tokenize(text: &str, cfg: &TokenizerConfig) -> Vec<String> {
    text.split_whitespace()
        .map(|t| {
            if cfg.lowercase {
                t.to_lowercase()
            } else {
                t.to_string()
            }
        })
        .collect()
}

/// All character n-grams of the token with length in `[ngram_min, ngram_max]`,
/// shorter n-grams first, left to right within a length, each hashed into
/// `ngram_buckets`.
pub fn char_ngram_ids(token: &str, cfg: &TokenizerConfig) -> Result<Vec<usize>> {
    if token.is_empty() {
        return Err(Error::EmptyInput("empty token".into()));
    }
    let chars: Vec<char> = token.chars().collect();
    let mut ids = Vec::new();
    for n in cfg.ngram_min..=cfg.ngram_max {
        if n > chars.len() {
            break;
        }
        for start in 0..=chars.len() - n {
            let gram: String = chars[start..start + n].iter().collect();
            ids.push((fnv1a64(gram.as_bytes()) % cfg.ngram_buckets as u64) as usize);
        }
    }
    Ok(ids)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocabulary {
    pub word_to_id: BTreeMap<String, usize>,
    pub oov_buckets: usize,
}

impl Vocabulary {
    pub fn size(&self) -> usize {
        self.word_to_id.len()
    }

    /// Total id space: in-vocab ids plus OOV buckets.
    pub fn id_space(&self) -> usize {
        self.size() + self.oov_buckets
    }

    /// Total lookup: in-vocab id, or a deterministic OOV bucket.
    pub fn lookup(&self, token: &str) -> usize {
        match self.word_to_id.get(token) {
            Some(&id) => id,
            None => self.size() + (fnv1a64(token.as_bytes()) % self.oov_buckets as u64) as usize,
        }
    }
}

/// Top-`size` tokens by frequency over the stream, ties broken
/// lexicographically. One shared table is built from whatever mix of
/// languages the stream contains.
pub fn build_vocab<I, S>(texts: I, size: usize, cfg: &TokenizerConfig) -> Result<Vocabulary>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if size == 0 {
        return Err(Error::InvalidConfig("vocab size must be >= 1".into()));
    }
    let mut freq: HashMap<String, u64> = HashMap::new();
    let mut saw_any = false;
    for text in texts {
        saw_any = true;
        for tok in tokenize(text.as_ref(), cfg) {
            *freq.entry(tok).or_insert(0) += 1;
        }
    }
    if !saw_any {
        return Err(Error::EmptyInput("empty text stream".into()));
    }
    let mut entries: Vec<(String, u64)> = freq.into_iter().collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    entries.truncate(size);
    let word_to_id = entries
        .into_iter()
        .enumerate()
        .map(|(i, (w, _))| (w, i))
        .collect();
    Ok(Vocabulary {
        word_to_id,
        oov_buckets: cfg.oov_buckets,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenIds {
    pub word_ids: Vec<usize>,
    pub ngram_ids: Vec<Vec<usize>>,
}

pub fn encode_ids(tokens: &[String], vocab: &Vocabulary, cfg: &TokenizerConfig) -> TokenIds {
    let mut word_ids = Vec::with_capacity(tokens.len());
    let mut ngram_ids = Vec::with_capacity(tokens.len());
    for tok in tokens {
        word_ids.push(vocab.lookup(tok));
        // tokens come from `tokenize`, so they are nonempty
        ngram_ids.push(char_ngram_ids(tok, cfg).expect("nonempty token"));
    }
    TokenIds { word_ids, ngram_ids }
}

pub fn encode_text(text: &str, vocab: &Vocabulary, cfg: &TokenizerConfig) -> TokenIds {
    encode_ids(&tokenize(text, cfg), vocab, cfg)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairRecord {
    pub src_id: String,
    pub src_text: String,
    pub tgt_id: String,
    pub tgt_text: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParallelCorpus {
    pub pairs: Vec<PairRecord>,
    pub gold: BTreeSet<(String, String)>,
}

impl ParallelCorpus {
    pub fn validate(&self) -> Result<()> {
        let mut src_seen = HashSet::new();
        let mut tgt_seen = HashSet::new();
        for p in &self.pairs {
            if !src_seen.insert(&p.src_id) {
                return Err(Error::DuplicateId(p.src_id.clone()));
            }
            if !tgt_seen.insert(&p.tgt_id) {
                return Err(Error::DuplicateId(p.tgt_id.clone()));
            }
        }
        for (s, t) in &self.gold {
            if !src_seen.contains(s) || !tgt_seen.contains(t) {
                return Err(Error::Other(format!(
                    "gold pair ({s}, {t}) not covered by corpus ids"
                )));
            }
        }
        Ok(())
    }

    pub fn source_side(&self) -> Vec<(String, String)> {
        self.pairs
            .iter()
            .map(|p| (p.src_id.clone(), p.src_text.clone()))
            .collect()
    }

    pub fn target_side(&self) -> Vec<(String, String)> {
        self.pairs
            .iter()
            .map(|p| (p.tgt_id.clone(), p.tgt_text.clone()))
            .collect()
    }
}

fn split_line<'a>(
    line: &'a str,
    expected_fields: usize,
    path: &str,
    lineno: usize,
) -> Result<Vec<&'a str>> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != expected_fields {
        return Err(Error::MalformedLine {
            path: path.to_string(),
            line: lineno,
            msg: format!("expected {} tab-separated fields, got {}", expected_fields, fields.len()),
        });
    }
    Ok(fields)
}

/// Lines of `<id><TAB><text>`; duplicate ids are an error.
pub fn parse_mono_ids(path: &Path) -> Result<Vec<(String, String)>> {
    let file = std::fs::File::open(path)?;
    let pname = path.display().to_string();
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let f = split_line(&line, 2, &pname, i + 1)?;
        if !seen.insert(f[0].to_string()) {
            return Err(Error::DuplicateId(f[0].to_string()));
        }
        out.push((f[0].to_string(), f[1].to_string()));
    }
    Ok(out)
}

/// Lines of `<src_id><TAB><tgt_id>`.
pub fn parse_gold_map(path: &Path) -> Result<Vec<(String, String)>> {
    let file = std::fs::File::open(path)?;
    let pname = path.display().to_string();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let f = split_line(&line, 2, &pname, i + 1)?;
        out.push((f[0].to_string(), f[1].to_string()));
    }
    Ok(out)
}

/// Lines of `src_text<TAB>tgt_text`; ids are synthesized positionally and
/// every line is a gold pair.
pub fn parse_tsv_pairs(path: &Path) -> Result<ParallelCorpus> {
    let file = std::fs::File::open(path)?;
    let pname = path.display().to_string();
    let mut corpus = ParallelCorpus::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let f = split_line(&line, 2, &pname, i + 1)?;
        let src_id = format!("src-{:09}", i + 1);
        let tgt_id = format!("tgt-{:09}", i + 1);
        corpus.gold.insert((src_id.clone(), tgt_id.clone()));
        corpus.pairs.push(PairRecord {
            src_id,
            src_text: f[0].to_string(),
            tgt_id,
            tgt_text: f[1].to_string(),
        });
    }
    Ok(corpus)
}

/// Assembles a corpus from two equal-length mono-ids sides plus a gold map.
/// Row i of each side forms pair i; the gold map may cover any subset.
pub fn corpus_from_sides(
    src: Vec<(String, String)>,
    tgt: Vec<(String, String)>,
    gold: Vec<(String, String)>,
) -> Result<ParallelCorpus> {
    if src.len() != tgt.len() {
        return Err(Error::Other(format!(
            "side lengths differ: {} vs {}",
            src.len(),
            tgt.len()
        )));
    }
    let mut corpus = ParallelCorpus::default();
    for ((sid, st), (tid, tt)) in src.into_iter().zip(tgt) {
        corpus.pairs.push(PairRecord {
            src_id: sid,
            src_text: st,
            tgt_id: tid,
            tgt_text: tt,
        });
    }
    corpus.gold = gold.into_iter().collect();
    corpus.validate()?;
    Ok(corpus)
}

pub fn write_mono_ids<W: Write>(w: &mut W, side: &[(String, String)]) -> Result<()> {
    for (id, text) in side {
        writeln!(w, "{id}\t{text}")?;
    }
    Ok(())
}

pub fn write_gold_map<W: Write>(w: &mut W, gold: &BTreeSet<(String, String)>) -> Result<()> {
    for (s, t) in gold {
        writeln!(w, "{s}\t{t}")?;
    }
    Ok(())
}

/// Deterministic "cipher translation" corpus: source sentences are random
/// token sequences over `s0..s{V-1}`; the target maps token `si` to
/// `t{perm(i)}` under a seed-fixed permutation, with each target token
/// independently replaced by a random one with probability `noise`.
pub fn generate_synthetic_bitext(
    seed: u64,
    num_pairs: usize,
    vocab_size: usize,
    len_range: (usize, usize),
    noise: f64,
) -> Result<ParallelCorpus> {
    if vocab_size < 2 {
        return Err(Error::InvalidConfig("vocab_size must be >= 2".into()));
    }
    if num_pairs < 1 {
        return Err(Error::InvalidConfig("num_pairs must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&noise) {
        return Err(Error::InvalidConfig("noise must be in [0, 1)".into()));
    }
    let (lo, hi) = len_range;
    if lo < 1 || lo > hi {
        return Err(Error::InvalidConfig(format!("len_range [{lo}, {hi}]")));
    }

    // The permutation depends only on (seed, vocab_size), so corpora of
    // different sizes drawn from the same seed share one cipher.
    let mut perm: Vec<usize> = (0..vocab_size).collect();
    let mut perm_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x70_65_72_6d); // "perm"
    perm.shuffle(&mut perm_rng);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut corpus = ParallelCorpus::default();
    for i in 0..num_pairs {
        let len = rng.gen_range(lo..=hi);
        let mut src = String::new();
        let mut tgt = String::new();
        for t in 0..len {
            let s_tok = rng.gen_range(0..vocab_size);
            let t_tok = if noise > 0.0 && rng.gen_bool(noise) {
                rng.gen_range(0..vocab_size)
            } else {
                perm[s_tok]
            };
            if t > 0 {
                src.push(' ');
                tgt.push(' ');
            }
            write!(src, "s{s_tok}").unwrap();
            write!(tgt, "t{t_tok}").unwrap();
        }
        let src_id = format!("src-{:09}", i + 1);
        let tgt_id = format!("tgt-{:09}", i + 1);
        corpus.gold.insert((src_id.clone(), tgt_id.clone()));
        corpus.pairs.push(PairRecord {
            src_id,
            src_text: src,
            tgt_id,
            tgt_text: tgt,
        });
    }
    Ok(corpus)
}
