//! Corpus loading, vocabulary, batching, and token-deletion denoising.
//!
//! Corpora are UTF-8 plain text, one example per line. The source side of a
//! batch is the noised encoding of a line; the target side is the clean
//! encoding framed with start/end tokens (denoising autoencoder pairing).

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::diffcore::Rng;
use crate::{Error, Result};

/// Reserved token ids.
pub const PAD: u32 = 0;
pub const START: u32 = 1;
pub const END: u32 = 2;
pub const UNK: u32 = 3;

/// Number of reserved ids preceding corpus tokens.
pub const RESERVED: usize = 4;

const RESERVED_TOKENS: [&str; RESERVED] = ["<pad>", "<s>", "</s>", "<unk>"];

/// How lines are split into tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tokenizer {
    /// Whitespace-separated tokens (the default).
    Whitespace,
    /// One token per non-whitespace character, for tiny-vocab experiments.
    Char,
}

impl Tokenizer {
    pub fn split(&self, line: &str) -> Vec<String> {
        match self {
            Tokenizer::Whitespace => line.split_whitespace().map(str::to_owned).collect(),
            Tokenizer::Char => line
                .chars()
                .filter(|c| !c.is_whitespace())
                .map(String::from)
                .collect(),
        }
    }

    pub fn join(&self, tokens: &[String]) -> String {
        match self {
            Tokenizer::Whitespace => tokens.join(" "),
            Tokenizer::Char => tokens.concat(),
        }
    }
}

/// Token <-> id bijection with four reserved ids.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>, // index = id, includes reserved
    index: HashMap<String, u32>,
    tokenizer: Tokenizer,
}

impl Vocab {
    /// Build from corpus lines: the most frequent tokens up to `max_size`
    /// total ids (reserved included), ties broken lexicographically, tokens
    /// rarer than `min_freq` excluded.
    pub fn build<'a>(
        lines: impl IntoIterator<Item = &'a str>,
        max_size: usize,
        min_freq: usize,
        tokenizer: Tokenizer,
    ) -> Result<Vocab> {
        if max_size < RESERVED + 1 {
            return Err(Error::Config(format!(
                "vocab max_size {max_size} leaves no room beyond the {RESERVED} reserved ids"
            )));
        }
        let mut freq: HashMap<String, usize> = HashMap::new();
        let mut nonempty = false;
        for line in lines {
            nonempty = true;
            for tok in tokenizer.split(line) {
                *freq.entry(tok).or_insert(0) += 1;
            }
        }
        if !nonempty {
            return Err(Error::Data("empty corpus".into()));
        }
        let mut ranked: Vec<(String, usize)> =
            freq.into_iter().filter(|(_, c)| *c >= min_freq.max(1)).collect();
        // most frequent first, ties lexicographic, so builds are deterministic
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - RESERVED);

        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(ranked.into_iter().map(|(t, _)| t));
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Vocab { tokens, index, tokenizer })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved ids are always present
    }

    pub fn tokenizer(&self) -> Tokenizer {
        self.tokenizer
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token_of(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    /// Encode a line; unknown tokens map to `UNK`. No specials are added.
    pub fn encode_line(&self, line: &str) -> Vec<u32> {
        self.tokenizer
            .split(line)
            .iter()
            .map(|t| self.index.get(t).copied().unwrap_or(UNK))
            .collect()
    }

    /// Decode ids to text; reserved framing/padding ids are skipped, unknown
    /// ids render as the unk marker.
    pub fn decode_ids(&self, ids: &[u32]) -> String {
        let toks: Vec<String> = ids
            .iter()
            .filter(|&&id| id != PAD && id != START && id != END)
            .map(|&id| self.tokens[id as usize].clone())
            .collect();
        self.tokenizer.join(&toks)
    }

    /// Serialize: `#vocab v1` header, then one corpus token per line
    /// (line number = id - 4, after the reserved ids).
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        let tok_tag = match self.tokenizer {
            Tokenizer::Whitespace => "whitespace",
            Tokenizer::Char => "char",
        };
        let _ = writeln!(out, "#vocab v1 tokenizer={tok_tag}");
        for t in &self.tokens[RESERVED..] {
            let _ = writeln!(out, "{t}");
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Data(format!("{}: empty vocab file", path.display())))?;
        if !header.starts_with("#vocab v1") {
            return Err(Error::Data(format!(
                "{}: bad vocab header `{header}` (want `#vocab v1`)",
                path.display()
            )));
        }
        let tokenizer = if header.contains("tokenizer=char") {
            Tokenizer::Char
        } else {
            Tokenizer::Whitespace
        };
        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(lines.map(str::to_owned));
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Vocab { tokens, index, tokenizer })
    }
}

/// Delete each token independently with probability `p`, preserving order.
/// If every token would be deleted, one uniformly random survivor is kept.
pub fn delete_noise(ids: &[u32], p: f64, rng: &mut Rng) -> Vec<u32> {
    assert!((0.0..1.0).contains(&p), "deletion probability {p} outside [0, 1)");
    if p == 0.0 || ids.is_empty() {
        return ids.to_vec();
    }
    let mut out: Vec<u32> = ids.iter().copied().filter(|_| !rng.bernoulli(p)).collect();
    if out.is_empty() {
        out.push(ids[rng.below(ids.len())]);
    }
    out
}

/// One padded minibatch. Masks are true exactly on non-pad positions;
/// `tgt_in` is `tgt_out` shifted right by one with a start token prepended.
#[derive(Debug, Clone)]
pub struct Batch {
    pub batch: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub src_ids: Vec<u32>,
    pub src_mask: Vec<bool>,
    pub tgt_in_ids: Vec<u32>,
    pub tgt_out_ids: Vec<u32>,
    pub tgt_mask: Vec<bool>,
}

impl Batch {
    /// Tokens contributing to the loss (non-pad target positions).
    pub fn target_tokens(&self) -> usize {
        self.tgt_mask.iter().filter(|&&m| m).count()
    }
}

/// Build batches from clean id sequences: optional shuffle, truncation to
/// `max_len - 2`, deletion noise on the source side, start/end framing and
/// clean ids on the target side, padding to the batch maximum.
pub fn batchify(
    sequences: &[Vec<u32>],
    batch_size: usize,
    max_len: usize,
    noise_p: f64,
    rng: &mut Rng,
    shuffle: bool,
) -> Vec<Batch> {
    assert!(!sequences.is_empty(), "batchify on empty sequence list");
    assert!(batch_size > 0, "batch_size must be positive");
    assert!(max_len >= 3, "max_len {max_len} leaves no room for content plus framing");

    let mut order: Vec<usize> = (0..sequences.len()).collect();
    if shuffle {
        rng.shuffle(&mut order);
    }

    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        let clean: Vec<Vec<u32>> = chunk
            .iter()
            .map(|&i| {
                let mut s = sequences[i].clone();
                s.truncate(max_len - 2);
                s
            })
            .collect();
        let noised: Vec<Vec<u32>> =
            clean.iter().map(|s| delete_noise(s, noise_p, rng)).collect();

        let b = clean.len();
        let src_len = noised.iter().map(Vec::len).max().unwrap_or(0).max(1);
        let tgt_len = clean.iter().map(Vec::len).max().unwrap_or(0) + 1; // + end token

        let mut src_ids = vec![PAD; b * src_len];
        let mut src_mask = vec![false; b * src_len];
        let mut tgt_in_ids = vec![PAD; b * tgt_len];
        let mut tgt_out_ids = vec![PAD; b * tgt_len];
        let mut tgt_mask = vec![false; b * tgt_len];

        for (r, (noisy, clean)) in noised.iter().zip(&clean).enumerate() {
            for (j, &id) in noisy.iter().enumerate() {
                src_ids[r * src_len + j] = id;
                src_mask[r * src_len + j] = true;
            }
            // target input: start + clean; target output: clean + end
            tgt_in_ids[r * tgt_len] = START;
            tgt_mask[r * tgt_len] = true;
            for (j, &id) in clean.iter().enumerate() {
                tgt_in_ids[r * tgt_len + j + 1] = id;
                tgt_out_ids[r * tgt_len + j] = id;
                tgt_mask[r * tgt_len + j + 1] = true;
            }
            tgt_out_ids[r * tgt_len + clean.len()] = END;
        }
        batches.push(Batch {
            batch: b,
            src_len,
            tgt_len,
            src_ids,
            src_mask,
            tgt_in_ids,
            tgt_out_ids,
            tgt_mask,
        });
    }
    batches
}

/// Read a one-example-per-line corpus, dropping blank lines.
pub fn load_corpus(path: &Path) -> Result<Vec<String>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let lines: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect();
    if lines.is_empty() {
        return Err(Error::Data(format!("{}: corpus has no non-empty lines", path.display())));
    }
    Ok(lines)
}

/// Encode a corpus, dropping lines that encode to nothing.
pub fn encode_corpus(lines: &[String], vocab: &Vocab) -> Vec<Vec<u32>> {
    lines
        .iter()
        .map(|l| vocab.encode_line(l))
        .filter(|ids| !ids.is_empty())
        .collect()
}

pub mod synthetic {
    //! Deterministic templated-grammar corpus for experiments and tests.

    use crate::diffcore::Rng;

    const DETS: [&str; 4] = ["the", "a", "every", "no"];
    const ADJS: [&str; 40] = [
        "red", "blue", "green", "small", "large", "quick", "slow", "bright", "dark", "quiet",
        "loud", "old", "new", "warm", "cold", "dry", "wet", "soft", "hard", "round", "flat",
        "tall", "short", "wide", "narrow", "clean", "dirty", "heavy", "light", "sharp", "dull",
        "smooth", "rough", "sweet", "sour", "fresh", "stale", "plain", "fancy", "calm",
    ];
    const NOUNS: [&str; 60] = [
        "cat", "dog", "bird", "fish", "horse", "mouse", "fox", "bear", "wolf", "deer", "tree",
        "river", "stone", "cloud", "hill", "road", "house", "door", "window", "table", "chair",
        "lamp", "book", "pen", "cup", "plate", "knife", "spoon", "clock", "wheel", "engine",
        "garden", "field", "forest", "bridge", "tower", "market", "village", "city", "farmer",
        "teacher", "doctor", "sailor", "painter", "baker", "child", "friend", "stranger",
        "letter", "song", "story", "picture", "mirror", "candle", "basket", "bottle", "coin",
        "key", "map", "boat",
    ];
    const VERBS: [&str; 40] = [
        "sees", "finds", "follows", "watches", "carries", "holds", "moves", "paints", "builds",
        "breaks", "opens", "closes", "lifts", "drops", "pushes", "pulls", "cleans", "fills",
        "empties", "counts", "draws", "writes", "reads", "sings", "hears", "touches", "shakes",
        "turns", "hides", "shows", "brings", "takes", "keeps", "loses", "makes", "mends",
        "guards", "greets", "visits", "leaves",
    ];
    const ADVS: [&str; 20] = [
        "quickly", "slowly", "quietly", "loudly", "gently", "firmly", "softly", "badly", "well",
        "often", "rarely", "always", "never", "today", "tonight", "outside", "inside", "nearby",
        "away", "again",
    ];
    const PREPS: [&str; 8] =
        ["near", "under", "over", "behind", "beside", "within", "past", "toward"];

    fn pick<'a>(rng: &mut Rng, xs: &[&'a str]) -> &'a str {
        xs[rng.below(xs.len())]
    }

    /// Generate `n` sentences where each sentence is a fixed expansion of one
    /// of `topics` topic words (bodies drawn once per topic, then reused).
    /// Low conditional entropy: a sentence is determined by its topic, so the
    /// only per-example information is which topic was sampled. Deterministic
    /// in the seed; ~`topics + 30` word types.
    pub fn topic_corpus(n: usize, topics: usize, seed: u64) -> Vec<String> {
        assert!(
            (1..=NOUNS.len() * DETS.len()).contains(&topics),
            "topics must be in 1..={}",
            NOUNS.len() * DETS.len()
        );
        let mut rng = Rng::seed_from_u64(seed ^ 0x70_71_72);
        let bodies: Vec<String> = (0..topics)
            .map(|t| {
                // topic identity = enumerated (det, noun) pair; body sampled once
                let det = DETS[t / NOUNS.len()];
                let noun = NOUNS[t % NOUNS.len()];
                format!(
                    "{det} {noun} {} {} {} {} {}",
                    pick(&mut rng, &VERBS),
                    pick(&mut rng, &DETS),
                    pick(&mut rng, &ADJS),
                    pick(&mut rng, &NOUNS),
                    pick(&mut rng, &ADVS),
                )
            })
            .collect();
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(bodies[rng.below(topics)].clone());
        }
        out
    }

    /// Generate `n` sentences from a small templated grammar (~170 word
    /// types). Deterministic in the seed.
    pub fn templated_corpus(n: usize, seed: u64) -> Vec<String> {
        let mut rng = Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let s = match rng.below(5) {
                0 => format!(
                    "{} {} {} {} {} {} {}",
                    pick(&mut rng, &DETS),
                    pick(&mut rng, &ADJS),
                    pick(&mut rng, &NOUNS),
                    pick(&mut rng, &VERBS),
                    pick(&mut rng, &DETS),
                    pick(&mut rng, &NOUNS),
                    pick(&mut rng, &ADVS),
                ),
                1 => format!(
                    "{} {} {} {} {} {} {}",
                    pick(&mut rng, &DETS),
                    pick(&mut rng, &NOUNS),
                    pick(&mut rng, &VERBS),
                    pick(&mut rng, &PREPS),
                    pick(&mut rng, &DETS),
                    pick(&mut rng, &ADJS),
                    pick(&mut rng, &NOUNS),
                ),
                2 => format!(
                    "{} {} {} {} {}",
                    pick(&mut rng, &DETS),
                    pick(&mut rng, &NOUNS),
                    pick(&mut rng, &VERBS),
                    pick(&mut rng, &DETS),
                    pick(&mut rng, &NOUNS),
                ),
                3 => format!(
                    "{} {} {} {} {} {}",
                    pick(&mut rng, &DETS),
                    pick(&mut rng, &ADJS),
                    pick(&mut rng, &NOUNS),
                    pick(&mut rng, &VERBS),
                    pick(&mut rng, &ADVS),
                    pick(&mut rng, &ADVS),
                ),
                _ => format!(
                    "{} {} {} {} {} {} {} {}",
                    pick(&mut rng, &DETS),
                    pick(&mut rng, &NOUNS),
                    pick(&mut rng, &PREPS),
                    pick(&mut rng, &DETS),
                    pick(&mut rng, &NOUNS),
                    pick(&mut rng, &VERBS),
                    pick(&mut rng, &DETS),
                    pick(&mut rng, &NOUNS),
                ),
            };
            out.push(s);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_contains_frequent_tokens_above_reserved() {
        let v = Vocab::build(["a a b"], 10, 1, Tokenizer::Whitespace).unwrap();
        let a = v.id_of("a").unwrap();
        let b = v.id_of("b").unwrap();
        assert!(a as usize >= RESERVED && b as usize >= RESERVED);
        assert!(a < b, "`a` is more frequent so it gets the smaller id");
    }

    #[test]
    fn vocab_min_freq_excludes_rare() {
        let v = Vocab::build(["a a b"], 10, 2, Tokenizer::Whitespace).unwrap();
        assert!(v.id_of("a").is_some());
        assert!(v.id_of("b").is_none());
    }

    #[test]
    fn vocab_deterministic_ties_lexicographic() {
        let c = ["b a", "a b"];
        let v1 = Vocab::build(c, 10, 1, Tokenizer::Whitespace).unwrap();
        let v2 = Vocab::build(c, 10, 1, Tokenizer::Whitespace).unwrap();
        assert_eq!(v1.to_file_string(), v2.to_file_string());
        assert!(v1.id_of("a").unwrap() < v1.id_of("b").unwrap());
    }

    #[test]
    fn vocab_rejects_empty_corpus() {
        let empty: [&str; 0] = [];
        assert!(Vocab::build(empty, 10, 1, Tokenizer::Whitespace).is_err());
    }

    #[test]
    fn vocab_rejects_tiny_max_size() {
        assert!(Vocab::build(["a"], 4, 1, Tokenizer::Whitespace).is_err());
    }

    #[test]
    fn encode_decode_roundtrip_in_vocab() {
        let v = Vocab::build(["the cat sat", "the dog ran"], 20, 1, Tokenizer::Whitespace).unwrap();
        let line = "the  cat   ran";
        let ids = v.encode_line(line);
        assert_eq!(v.decode_ids(&ids), "the cat ran");
    }

    #[test]
    fn encode_empty_line_is_empty() {
        let v = Vocab::build(["a"], 10, 1, Tokenizer::Whitespace).unwrap();
        assert!(v.encode_line("   ").is_empty());
    }

    #[test]
    fn oov_decodes_with_unk_marker() {
        let v = Vocab::build(["a b"], 10, 1, Tokenizer::Whitespace).unwrap();
        let ids = v.encode_line("a zzz b");
        assert_eq!(v.decode_ids(&ids), "a <unk> b");
    }

    #[test]
    fn char_tokenizer_roundtrip() {
        let v = Vocab::build(["abc", "cba"], 20, 1, Tokenizer::Char).unwrap();
        let ids = v.encode_line("bac");
        assert_eq!(v.decode_ids(&ids), "bac");
    }

    #[test]
    fn vocab_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let v = Vocab::build(["x y z z"], 10, 1, Tokenizer::Whitespace).unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        let v2 = Vocab::load(&path).unwrap();
        assert_eq!(v.to_file_string(), v2.to_file_string());
        assert_eq!(v2.id_of("z"), v.id_of("z"));
    }

    #[test]
    fn noise_p0_is_identity() {
        let mut rng = Rng::seed_from_u64(1);
        let ids = vec![5, 6, 7, 8];
        assert_eq!(delete_noise(&ids, 0.0, &mut rng), ids);
    }

    #[test]
    fn noise_keeps_a_survivor() {
        let mut rng = Rng::seed_from_u64(2);
        for _ in 0..200 {
            let out = delete_noise(&[9, 10], 0.99, &mut rng);
            assert!(!out.is_empty());
        }
    }

    #[test]
    fn noise_rate_concentrates() {
        // p = 0.15 over 1e5 tokens -> deletion fraction 0.15 +/- 0.005
        let mut rng = Rng::seed_from_u64(3);
        let ids: Vec<u32> = (0..100_000).map(|i| 4 + (i % 50) as u32).collect();
        let out = delete_noise(&ids, 0.15, &mut rng);
        let frac = 1.0 - out.len() as f64 / ids.len() as f64;
        assert!((frac - 0.15).abs() < 0.005, "deletion fraction {frac}");
    }

    #[test]
    fn noise_preserves_order_and_ids() {
        // subsequence + no new ids, over 1e4 random cases
        let mut rng = Rng::seed_from_u64(4);
        for case in 0..10_000 {
            let n = 1 + rng.below(12);
            let ids: Vec<u32> = (0..n).map(|_| 4 + rng.below(100) as u32).collect();
            let p = rng.next_f64() * 0.9;
            let out = delete_noise(&ids, p, &mut rng);
            let mut it = ids.iter();
            for o in &out {
                assert!(it.any(|x| x == o), "case {case}: {out:?} not a subsequence of {ids:?}");
            }
        }
    }

    #[test]
    fn batchify_covers_corpus_and_frames_targets() {
        let mut rng = Rng::seed_from_u64(5);
        let seqs: Vec<Vec<u32>> = (0..23).map(|i| vec![4 + i as u32; 1 + (i % 5)]).collect();
        let batches = batchify(&seqs, 8, 16, 0.0, &mut rng, true);
        let total: usize = batches.iter().map(|b| b.batch).sum();
        assert_eq!(total, 23);
        for b in &batches {
            for r in 0..b.batch {
                let row_mask = &b.tgt_mask[r * b.tgt_len..(r + 1) * b.tgt_len];
                let count = row_mask.iter().filter(|&&m| m).count();
                // clean token count + 1 (end token)
                let clean_len = b.tgt_in_ids[r * b.tgt_len..(r + 1) * b.tgt_len]
                    .iter()
                    .filter(|&&id| id != PAD && id != START)
                    .count();
                assert_eq!(count, clean_len + 1);
                assert_eq!(b.tgt_in_ids[r * b.tgt_len], START);
                // shifted-right alignment
                for j in 0..count - 1 {
                    assert_eq!(
                        b.tgt_in_ids[r * b.tgt_len + j + 1],
                        b.tgt_out_ids[r * b.tgt_len + j]
                    );
                }
                assert_eq!(b.tgt_out_ids[r * b.tgt_len + count - 1], END);
            }
        }
    }

    #[test]
    fn batchify_identical_seed_identical_order() {
        let seqs: Vec<Vec<u32>> = (0..50).map(|i| vec![4 + (i % 11) as u32; 3]).collect();
        let run = || {
            let mut rng = Rng::seed_from_u64(6);
            batchify(&seqs, 7, 10, 0.3, &mut rng, true)
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.src_ids, y.src_ids);
            assert_eq!(x.tgt_out_ids, y.tgt_out_ids);
        }
    }

    #[test]
    fn batchify_targets_stay_clean_under_noise() {
        let mut rng = Rng::seed_from_u64(7);
        let seqs: Vec<Vec<u32>> = (0..40).map(|i| vec![4 + i as u32, 5, 6, 7]).collect();
        let batches = batchify(&seqs, 4, 10, 0.4, &mut rng, false);
        // without shuffle the order is corpus order; targets must equal the
        // uncorrupted encodings
        let mut row = 0usize;
        for b in &batches {
            for r in 0..b.batch {
                let out_row: Vec<u32> = b.tgt_out_ids[r * b.tgt_len..(r + 1) * b.tgt_len]
                    .iter()
                    .copied()
                    .filter(|&id| id != PAD && id != END)
                    .collect();
                assert_eq!(out_row, seqs[row]);
                row += 1;
            }
        }
    }

    #[test]
    fn batchify_truncates_to_max_len() {
        let mut rng = Rng::seed_from_u64(8);
        let seqs = vec![vec![4u32; 50]];
        let batches = batchify(&seqs, 1, 10, 0.0, &mut rng, false);
        assert_eq!(batches[0].tgt_len, 9); // 8 content + end
        assert!(batches[0].src_len <= 8);
    }

    #[test]
    fn topic_corpus_has_fixed_bodies_per_topic() {
        let a = synthetic::topic_corpus(3000, 200, 5);
        let b = synthetic::topic_corpus(3000, 200, 5);
        assert_eq!(a, b);
        let distinct: std::collections::HashSet<&String> = a.iter().collect();
        assert_eq!(distinct.len(), 200, "every topic should appear in 3000 draws");
        // one body per topic: grouping by the first two tokens gives one line each
        let mut by_topic: HashMap<(String, String), std::collections::HashSet<String>> =
            HashMap::new();
        for line in &a {
            let mut it = line.split_whitespace();
            let key = (it.next().unwrap().to_string(), it.next().unwrap().to_string());
            by_topic.entry(key).or_default().insert(line.clone());
        }
        assert_eq!(by_topic.len(), 200);
        assert!(by_topic.values().all(|s| s.len() == 1));
        let v = Vocab::build(a.iter().map(String::as_str), 1000, 1, Tokenizer::Whitespace).unwrap();
        assert!(v.len() > 100 && v.len() < 250, "vocab size {}", v.len());
    }

    #[test]
    fn synthetic_corpus_is_deterministic_and_small_vocab() {
        let a = synthetic::templated_corpus(1000, 9);
        let b = synthetic::templated_corpus(1000, 9);
        assert_eq!(a, b);
        let v =
            Vocab::build(a.iter().map(String::as_str), 1000, 1, Tokenizer::Whitespace).unwrap();
        assert!(v.len() < 250, "vocab size {}", v.len());
        assert!(v.len() > 100, "vocab size {}", v.len());
    }
}
