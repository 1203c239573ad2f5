//! Vocabulary construction, parallel-corpus I/O, batching, and the
//! synthetic toy-corpus generator used for desk-scale verification.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const EOS: u32 = 2;
pub const BOS: u32 = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<eos>", "<bos>"];

/// Token/id bijection with four reserved ids (PAD=0, UNK=1, EOS=2, BOS=3).
/// Unknown tokens look up to UNK.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Builds a vocabulary of the `cap - 4` most frequent tokens, ties broken
    /// lexicographically, plus the reserved tokens.
    pub fn build<'a, I>(tokens: I, cap: usize) -> Result<Vocabulary>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if cap < 5 {
            return Err(Error::Config(format!("vocab cap {cap} must be at least 5")));
        }
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for tok in tokens {
            *counts.entry(tok).or_insert(0) += 1;
        }
        if counts.is_empty() {
            return Err(Error::Data("cannot build vocabulary from empty corpus".into()));
        }
        let mut by_freq: Vec<(&str, u64)> = counts.into_iter().collect();
        by_freq.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        by_freq.truncate(cap - 4);

        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(by_freq.iter().map(|(t, _)| t.to_string()));
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Vocabulary { token_to_id, id_to_token })
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocabulary> {
        if tokens.len() < 4 || tokens[..4] != RESERVED.map(String::from) {
            return Err(Error::Format("vocabulary token list missing reserved tokens".into()));
        }
        let token_to_id = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Vocabulary { token_to_id, id_to_token: tokens })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.id_to_token[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Fraction of running tokens covered by the vocabulary.
    pub fn coverage<'a, I>(&self, tokens: I) -> f64
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut total = 0u64;
        let mut known = 0u64;
        for t in tokens {
            total += 1;
            if self.contains(t) {
                known += 1;
            }
        }
        if total == 0 {
            0.0
        } else {
            known as f64 / total as f64
        }
    }
}

/// One pre-tokenized sentence pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SentencePair {
    pub source: Vec<String>,
    pub target: Vec<String>,
}

/// Loads a line-aligned parallel corpus, dropping pairs where either side is
/// empty or exceeds `max_len` tokens. Returns the pairs and the drop count.
pub fn load_parallel(
    src_path: &Path,
    tgt_path: &Path,
    max_len: usize,
) -> Result<(Vec<SentencePair>, usize)> {
    let src_lines = read_lines(src_path)?;
    let tgt_lines = read_lines(tgt_path)?;
    if src_lines.len() != tgt_lines.len() {
        return Err(Error::Data(format!(
            "line count mismatch: {} has {} lines, {} has {}",
            src_path.display(),
            src_lines.len(),
            tgt_path.display(),
            tgt_lines.len()
        )));
    }
    let mut pairs = Vec::new();
    let mut dropped = 0;
    for (s, t) in src_lines.iter().zip(tgt_lines.iter()) {
        let source: Vec<String> = s.split_whitespace().map(String::from).collect();
        let target: Vec<String> = t.split_whitespace().map(String::from).collect();
        if source.is_empty()
            || target.is_empty()
            || source.len() > max_len
            || target.len() > max_len
        {
            dropped += 1;
            continue;
        }
        pairs.push(SentencePair { source, target });
    }
    Ok((pairs, dropped))
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let f = File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    BufReader::new(f)
        .lines()
        .map(|l| l.map_err(Error::from))
        .collect()
}

/// Padded id matrices for one minibatch. Every row ends its real content with
/// EOS; masks exactly mark non-PAD positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub src_ids: Vec<Vec<u32>>,
    pub tgt_ids: Vec<Vec<u32>>,
    pub src_mask: Vec<Vec<f64>>,
    pub tgt_mask: Vec<Vec<f64>>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.src_ids.len()
    }
}

fn pad_rows(rows: Vec<Vec<u32>>) -> (Vec<Vec<u32>>, Vec<Vec<f64>>) {
    let width = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let mut ids = Vec::with_capacity(rows.len());
    let mut masks = Vec::with_capacity(rows.len());
    for mut r in rows {
        let real = r.len();
        r.resize(width, PAD);
        let mut m = vec![1.0; real];
        m.resize(width, 0.0);
        ids.push(r);
        masks.push(m);
    }
    (ids, masks)
}

/// Encodes one pair to id rows with EOS appended on both sides.
pub fn encode_pair(pair: &SentencePair, src_vocab: &Vocabulary, tgt_vocab: &Vocabulary) -> (Vec<u32>, Vec<u32>) {
    let mut s = src_vocab.encode(&pair.source);
    s.push(EOS);
    let mut t = tgt_vocab.encode(&pair.target);
    t.push(EOS);
    (s, t)
}

/// Shuffles (seeded), optionally length-buckets, and batches the corpus.
/// Bucketing sorts by source length, slices into batches, then shuffles the
/// slice order, reducing padding while keeping the pair multiset intact.
pub fn make_batches(
    pairs: &[SentencePair],
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    batch_size: usize,
    seed: u64,
    bucketing: bool,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    if bucketing {
        order.sort_by_key(|&i| pairs[i].source.len());
    }
    let mut chunks: Vec<&[usize]> = order.chunks(batch_size).collect();
    if bucketing {
        chunks.shuffle(&mut rng);
    }
    let mut batches = Vec::with_capacity(chunks.len());
    for chunk in chunks {
        let mut src_rows = Vec::with_capacity(chunk.len());
        let mut tgt_rows = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let (s, t) = encode_pair(&pairs[i], src_vocab, tgt_vocab);
            src_rows.push(s);
            tgt_rows.push(t);
        }
        let (src_ids, src_mask) = pad_rows(src_rows);
        let (tgt_ids, tgt_mask) = pad_rows(tgt_rows);
        batches.push(Batch { src_ids, tgt_ids, src_mask, tgt_mask });
    }
    Ok(batches)
}

// ── toy corpus generation ────────────────────────────────────────────

/// Parameters of the synthetic translation task: random source sentences,
/// a fixed bijective lexicon, and local adjacent-pair reordering.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ToySpec {
    pub vocab_size: usize,
    pub n_pairs: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub swap_prob: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct ToyCorpus {
    pub spec: ToySpec,
    pub pairs: Vec<SentencePair>,
    /// Gold sure links per sentence, as (src_pos, tgt_pos), 0-indexed.
    pub alignments: Vec<Vec<(usize, usize)>>,
}

/// Lexicon image of a source toy token: "s17" -> "t17".
pub fn toy_lexicon_image(src_token: &str) -> Option<String> {
    src_token.strip_prefix('s').map(|rest| format!("t{rest}"))
}

/// Generates the toy parallel corpus. Source tokens are drawn from a Zipf-like
/// distribution (weight 1/(rank+1)); the target is the positionwise lexicon
/// image with each adjacent pair swapped with probability `swap_prob`
/// (non-overlapping, left to right). Deterministic per seed.
pub fn gen_toy_corpus(spec: &ToySpec) -> Result<ToyCorpus> {
    if spec.vocab_size < 10 {
        return Err(Error::Config(format!(
            "toy vocab_size {} must be at least 10",
            spec.vocab_size
        )));
    }
    if spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(Error::Config(format!(
            "invalid toy length range {}..{}",
            spec.min_len, spec.max_len
        )));
    }
    if !(0.0..=1.0).contains(&spec.swap_prob) {
        return Err(Error::Config(format!("swap_prob {} not in [0, 1]", spec.swap_prob)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let weights: Vec<f64> = (0..spec.vocab_size).map(|i| 1.0 / (i as f64 + 1.0)).collect();
    let dist = WeightedIndex::new(&weights).expect("positive weights");

    let mut pairs = Vec::with_capacity(spec.n_pairs);
    let mut alignments = Vec::with_capacity(spec.n_pairs);
    for _ in 0..spec.n_pairs {
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let src_ids: Vec<usize> = (0..len).map(|_| dist.sample(&mut rng)).collect();
        let source: Vec<String> = src_ids.iter().map(|i| format!("s{i}")).collect();
        // target position j carries the translation of source position align[j]
        let mut align: Vec<usize> = (0..len).collect();
        let mut j = 0;
        while j + 1 < len {
            if rng.gen::<f64>() < spec.swap_prob {
                align.swap(j, j + 1);
                j += 2;
            } else {
                j += 1;
            }
        }
        let target: Vec<String> = align.iter().map(|&i| format!("t{}", src_ids[i])).collect();
        let links: Vec<(usize, usize)> = align.iter().enumerate().map(|(j, &i)| (i, j)).collect();
        pairs.push(SentencePair { source, target });
        alignments.push(links);
    }
    Ok(ToyCorpus { spec: spec.clone(), pairs, alignments })
}

/// Token sampling probabilities used by the toy generator, by source token rank.
pub fn toy_token_probs(vocab_size: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..vocab_size).map(|i| 1.0 / (i as f64 + 1.0)).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

// ── alignment file format (Pharaoh) ──────────────────────────────────

/// Writes one line per sentence: sure links as "i-j", possible as "i?j".
pub fn write_alignments(
    path: &Path,
    alignments: &[(Vec<(usize, usize)>, Vec<(usize, usize)>)],
) -> Result<()> {
    let mut f = File::create(path)?;
    for (sure, possible) in alignments {
        let mut parts: Vec<String> = sure.iter().map(|(i, j)| format!("{i}-{j}")).collect();
        parts.extend(possible.iter().map(|(i, j)| format!("{i}?{j}")));
        writeln!(f, "{}", parts.join(" "))?;
    }
    Ok(())
}

/// Parses a Pharaoh alignment file into per-sentence (sure, possible) links.
pub fn read_alignments(path: &Path) -> Result<Vec<(Vec<(usize, usize)>, Vec<(usize, usize)>)>> {
    let lines = read_lines(path)?;
    let mut out = Vec::with_capacity(lines.len());
    for (ln, line) in lines.iter().enumerate() {
        let mut sure = Vec::new();
        let mut possible = Vec::new();
        for tok in line.split_whitespace() {
            let (sep, is_sure) = if tok.contains('-') {
                ('-', true)
            } else if tok.contains('?') {
                ('?', false)
            } else {
                return Err(Error::Format(format!(
                    "{}:{}: bad alignment token {tok:?}",
                    path.display(),
                    ln + 1
                )));
            };
            let (a, b) = tok.split_once(sep).unwrap();
            let link = (
                a.parse::<usize>().map_err(|_| {
                    Error::Format(format!("{}:{}: bad index in {tok:?}", path.display(), ln + 1))
                })?,
                b.parse::<usize>().map_err(|_| {
                    Error::Format(format!("{}:{}: bad index in {tok:?}", path.display(), ln + 1))
                })?,
            );
            if is_sure {
                sure.push(link);
            } else {
                possible.push(link);
            }
        }
        out.push((sure, possible));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn build_vocab_frequencies_and_reserved() {
        let v = Vocabulary::build(["a", "a", "b"], 6).unwrap();
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("b"), 5);
        assert_eq!(v.id("zzz"), UNK);
        assert_eq!(v.token(PAD), "<pad>");
        assert_eq!(v.token(EOS), "<eos>");
    }

    #[test]
    fn build_vocab_cap_and_ties() {
        // equal counts: lexicographic order wins
        let v = Vocabulary::build(["b", "a", "c"], 6).unwrap();
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("b"), 5);
        assert_eq!(v.id("c"), UNK); // beyond cap
        assert!(Vocabulary::build(["a"], 4).is_err());
        assert!(Vocabulary::build([], 10).is_err());
    }

    #[test]
    fn vocab_roundtrip_identity() {
        let v = Vocabulary::build(["x", "y", "y"], 10).unwrap();
        for id in 0..v.len() as u32 {
            assert_eq!(v.id(v.token(id)), id);
        }
    }

    #[test]
    fn coverage_matches_brute_force() {
        let v = Vocabulary::build(["a", "a", "b", "c"], 6).unwrap();
        let stream = ["a", "b", "c", "d", "a"];
        let brute = stream.iter().filter(|t| v.contains(t)).count() as f64 / stream.len() as f64;
        assert_eq!(v.coverage(stream.iter().copied()), brute);
    }

    #[test]
    fn load_parallel_drops_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let sp = dir.path().join("s.txt");
        let tp = dir.path().join("t.txt");
        let long: String = vec!["w"; 51].join(" ");
        std::fs::write(&sp, format!("a b c\n{long}\n\nx\n")).unwrap();
        std::fs::write(&tp, "d e\nok\nboth\ny\n").unwrap();
        let (pairs, dropped) = load_parallel(&sp, &tp, 50).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(dropped, 2);
        assert_eq!(pairs[0].source, vec!["a", "b", "c"]);

        std::fs::write(&tp, "one line\n").unwrap();
        let err = load_parallel(&sp, &tp, 50).unwrap_err();
        assert!(err.to_string().contains("line count mismatch"));
    }

    #[test]
    fn batches_cover_all_pairs() {
        let pairs: Vec<SentencePair> = (0..5)
            .map(|i| SentencePair {
                source: vec![format!("s{i}")],
                target: vec![format!("t{i}")],
            })
            .collect();
        let all: Vec<&str> = pairs.iter().flat_map(|p| [p.source[0].as_str(), p.target[0].as_str()]).collect();
        let sv = Vocabulary::build(all.iter().copied(), 20).unwrap();
        let batches = make_batches(&pairs, &sv, &sv, 2, 0, false).unwrap();
        let sizes: Vec<usize> = batches.iter().map(|b| b.size()).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
        // unbatch: every pair appears exactly once
        let mut seen: Vec<u32> = batches
            .iter()
            .flat_map(|b| b.src_ids.iter().map(|r| r[0]))
            .collect();
        seen.sort_unstable();
        let mut expect: Vec<u32> = pairs.iter().map(|p| sv.id(&p.source[0])).collect();
        expect.sort_unstable();
        assert_eq!(seen, expect);
    }

    #[test]
    fn batch_rows_end_with_eos_and_masks_match() {
        let pairs = vec![
            SentencePair { source: vec!["a".into(), "b".into()], target: vec!["c".into()] },
            SentencePair { source: vec!["a".into()], target: vec!["c".into(), "c".into()] },
        ];
        let v = Vocabulary::build(["a", "b", "c"], 10).unwrap();
        let batches = make_batches(&pairs, &v, &v, 2, 1, false).unwrap();
        let b = &batches[0];
        for (row, mask) in b.src_ids.iter().zip(b.src_mask.iter()) {
            let real = mask.iter().filter(|m| **m != 0.0).count();
            assert_eq!(row[real - 1], EOS);
            for k in real..row.len() {
                assert_eq!(row[k], PAD);
                assert_eq!(mask[k], 0.0);
            }
        }
    }

    #[test]
    fn bucketing_preserves_multiset_and_reduces_padding() {
        let spec = ToySpec {
            vocab_size: 30,
            n_pairs: 1000,
            min_len: 2,
            max_len: 14,
            swap_prob: 0.0,
            seed: 9,
        };
        let corpus = gen_toy_corpus(&spec).unwrap();
        let toks: Vec<&str> = corpus
            .pairs
            .iter()
            .flat_map(|p| p.source.iter().chain(p.target.iter()).map(String::as_str))
            .collect();
        let v = Vocabulary::build(toks.iter().copied(), 100).unwrap();
        let pad_fraction = |batches: &[Batch]| {
            let mut pad = 0usize;
            let mut total = 0usize;
            for b in batches {
                for m in &b.src_mask {
                    total += m.len();
                    pad += m.iter().filter(|x| **x == 0.0).count();
                }
            }
            pad as f64 / total as f64
        };
        let plain = make_batches(&corpus.pairs, &v, &v, 32, 5, false).unwrap();
        let bucketed = make_batches(&corpus.pairs, &v, &v, 32, 5, true).unwrap();
        assert!(pad_fraction(&bucketed) <= pad_fraction(&plain));

        let multiset = |batches: &[Batch]| {
            let mut rows: Vec<Vec<u32>> = batches
                .iter()
                .flat_map(|b| b.src_ids.iter().cloned().zip(b.src_mask.iter()).map(|(r, m)| {
                    let real = m.iter().filter(|x| **x != 0.0).count();
                    r[..real].to_vec()
                }))
                .collect();
            rows.sort();
            rows
        };
        assert_eq!(multiset(&plain), multiset(&bucketed));
    }

    #[test]
    fn toy_swap_prob_zero_is_identity() {
        let spec = ToySpec {
            vocab_size: 12,
            n_pairs: 50,
            min_len: 3,
            max_len: 8,
            swap_prob: 0.0,
            seed: 4,
        };
        let corpus = gen_toy_corpus(&spec).unwrap();
        for (pair, links) in corpus.pairs.iter().zip(corpus.alignments.iter()) {
            for (j, (s, t)) in pair.source.iter().zip(pair.target.iter()).enumerate() {
                assert_eq!(toy_lexicon_image(s).unwrap(), *t);
                assert_eq!(links[j], (j, j));
            }
        }
    }

    #[test]
    fn toy_links_within_bounds_and_deterministic() {
        let spec = ToySpec {
            vocab_size: 20,
            n_pairs: 100,
            min_len: 2,
            max_len: 9,
            swap_prob: 0.4,
            seed: 77,
        };
        let a = gen_toy_corpus(&spec).unwrap();
        let b = gen_toy_corpus(&spec).unwrap();
        assert_eq!(a.pairs, b.pairs);
        assert_eq!(a.alignments, b.alignments);
        for (pair, links) in a.pairs.iter().zip(a.alignments.iter()) {
            let mut tgt_seen = HashSet::new();
            for &(i, j) in links {
                assert!(i < pair.source.len());
                assert!(j < pair.target.len());
                assert!(tgt_seen.insert(j), "duplicate target position");
                assert_eq!(toy_lexicon_image(&pair.source[i]).unwrap(), pair.target[j]);
            }
        }
    }

    #[test]
    fn toy_token_histogram_matches_sampling_distribution() {
        let spec = ToySpec {
            vocab_size: 15,
            n_pairs: 10_000,
            min_len: 4,
            max_len: 8,
            swap_prob: 0.1,
            seed: 2,
        };
        let corpus = gen_toy_corpus(&spec).unwrap();
        let mut counts = vec![0f64; spec.vocab_size];
        let mut total = 0f64;
        for p in &corpus.pairs {
            for s in &p.source {
                let idx: usize = s[1..].parse().unwrap();
                counts[idx] += 1.0;
                total += 1.0;
            }
        }
        let probs = toy_token_probs(spec.vocab_size);
        // chi-square against the generator distribution; df = 14,
        // 99.9th percentile is about 36.1
        let chi2: f64 = counts
            .iter()
            .zip(probs.iter())
            .map(|(o, p)| {
                let e = p * total;
                (o - e) * (o - e) / e
            })
            .sum();
        assert!(chi2 < 36.1, "chi-square {chi2}");
    }

    #[test]
    fn alignment_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.align");
        let alignments = vec![
            (vec![(0, 0), (1, 2)], vec![(2, 1)]),
            (vec![], vec![]),
            (vec![(3, 3)], vec![]),
        ];
        write_alignments(&path, &alignments).unwrap();
        assert_eq!(read_alignments(&path).unwrap(), alignments);
        std::fs::write(&path, "0-0 junk\n").unwrap();
        assert!(read_alignments(&path).is_err());
    }
}
