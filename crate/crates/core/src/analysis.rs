//! Evaluation metrics and diagnostics: BLEU, eos-alignment rate, AER and its
//! soft variant, over-translation ratio, POS confusion, length-bucketed BLEU,
//! and nearest-target-word tables through the bridge transform.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::decode::AttentionMatrix;
use crate::error::{Error, Result};
use crate::model::ModelParams;

/// Gold alignment for one sentence pair: sure links S and possible links P
/// with S ⊆ P, both as (src_pos, tgt_pos).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentSet {
    pub sure: BTreeSet<(usize, usize)>,
    pub possible: BTreeSet<(usize, usize)>,
}

impl AlignmentSet {
    /// Builds the set; `possible` is completed to include every sure link.
    pub fn new(
        sure: impl IntoIterator<Item = (usize, usize)>,
        possible: impl IntoIterator<Item = (usize, usize)>,
    ) -> AlignmentSet {
        let sure: BTreeSet<_> = sure.into_iter().collect();
        let mut possible: BTreeSet<_> = possible.into_iter().collect();
        possible.extend(sure.iter().copied());
        AlignmentSet { sure, possible }
    }
}

/// One corpus-level metric value with an optional breakdown.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub value: f64,
    #[serde(skip_serializing_if = "serde_json::Value::is_null", default)]
    pub breakdown: serde_json::Value,
    pub n_sentences: usize,
}

impl MetricReport {
    pub fn new(name: &str, value: f64, n_sentences: usize) -> MetricReport {
        MetricReport {
            name: name.to_string(),
            value,
            breakdown: serde_json::Value::Null,
            n_sentences,
        }
    }
}

// ── BLEU ─────────────────────────────────────────────────────────────

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

fn lowercase_all(sents: &[Vec<String>]) -> Vec<Vec<String>> {
    sents
        .iter()
        .map(|s| s.iter().map(|t| t.to_lowercase()).collect())
        .collect()
}

/// Corpus-level BLEU: geometric mean of modified n-gram precisions for
/// n = 1..max_n times the brevity penalty exp(min(0, 1 - r/c)), where r sums
/// the closest reference lengths (ties to the shorter). Without smoothing a
/// zero precision at any order gives score 0; with `add_one`, orders above 1
/// use (clipped + 1)/(total + 1). Orders with no candidate n-grams at all are
/// skipped.
pub fn corpus_bleu(
    hyps: &[Vec<String>],
    refs: &[Vec<Vec<String>>],
    max_n: usize,
    case_insensitive: bool,
    add_one: bool,
) -> Result<f64> {
    if hyps.is_empty() {
        return Err(Error::Data("corpus_bleu: empty corpus".into()));
    }
    if hyps.len() != refs.len() {
        return Err(Error::Data(format!(
            "corpus_bleu: {} hypotheses vs {} reference sets",
            hyps.len(),
            refs.len()
        )));
    }
    if max_n == 0 {
        return Err(Error::Config("corpus_bleu: max_n must be at least 1".into()));
    }
    let lowered_hyps;
    let lowered_refs;
    let (hyps, refs): (&[Vec<String>], &[Vec<Vec<String>>]) = if case_insensitive {
        lowered_hyps = lowercase_all(hyps);
        lowered_refs = refs.iter().map(|rs| lowercase_all(rs)).collect::<Vec<_>>();
        (&lowered_hyps, &lowered_refs)
    } else {
        (hyps, refs)
    };

    let mut clipped = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let mut c_len = 0usize;
    let mut r_len = 0usize;
    for (hyp, rs) in hyps.iter().zip(refs.iter()) {
        if rs.is_empty() {
            return Err(Error::Data("corpus_bleu: hypothesis without references".into()));
        }
        c_len += hyp.len();
        r_len += rs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(hyp.len()), l))
            .unwrap();
        for n in 1..=max_n {
            let hc = ngrams(hyp, n);
            let mut rc: HashMap<&[String], usize> = HashMap::new();
            for r in rs {
                for (g, c) in ngrams(r, n) {
                    let e = rc.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in &hc {
                total[n - 1] += c;
                clipped[n - 1] += (*c).min(rc.get(g).copied().unwrap_or(0));
            }
        }
    }

    let mut log_sum = 0.0;
    let mut orders = 0usize;
    for n in 1..=max_n {
        if total[n - 1] == 0 {
            continue;
        }
        let (num, den) = if add_one && n > 1 {
            (clipped[n - 1] + 1, total[n - 1] + 1)
        } else {
            (clipped[n - 1], total[n - 1])
        };
        if num == 0 {
            return Ok(0.0);
        }
        log_sum += (num as f64 / den as f64).ln();
        orders += 1;
    }
    if orders == 0 {
        return Ok(0.0);
    }
    let precision = (log_sum / orders as f64).exp();
    let bp = if c_len < r_len {
        (1.0 - r_len as f64 / c_len.max(1) as f64).exp()
    } else {
        1.0
    };
    Ok(bp * precision)
}

/// Unigram precision times brevity penalty.
pub fn one_gram_bleu(hyps: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> Result<f64> {
    corpus_bleu(hyps, refs, 1, true, false)
}

// ── alignment metrics ────────────────────────────────────────────────

/// Fraction of sentences whose target EOS row (the last attention row) is
/// hard-aligned to the source EOS column (the last column).
pub fn eos_alignment_rate(attns: &[AttentionMatrix]) -> Result<f64> {
    if attns.is_empty() {
        return Err(Error::Data("eos_alignment_rate: no attention matrices".into()));
    }
    let mut hits = 0usize;
    for m in attns {
        let last = m
            .rows
            .last()
            .ok_or_else(|| Error::Data("eos_alignment_rate: empty attention matrix".into()))?;
        if crate::model::argmax(last) == last.len() - 1 {
            hits += 1;
        }
    }
    Ok(hits as f64 / attns.len() as f64)
}

/// Alignment error rate: 1 - (|A∩S| + |A∩P|) / (|A| + |S|).
pub fn aer(pred: &BTreeSet<(usize, usize)>, gold: &AlignmentSet) -> Result<f64> {
    let denom = pred.len() + gold.sure.len();
    if denom == 0 {
        return Err(Error::Data("aer: both predicted and sure links are empty".into()));
    }
    let a_s = pred.intersection(&gold.sure).count();
    let a_p = pred.intersection(&gold.possible).count();
    Ok(1.0 - (a_s + a_p) as f64 / denom as f64)
}

fn gold_mass(m_a: &AttentionMatrix, links: &BTreeSet<(usize, usize)>) -> Result<f64> {
    let mut dot = 0.0;
    for &(s, t) in links {
        let row = m_a
            .rows
            .get(t)
            .ok_or_else(|| Error::Data(format!("saer: link target {t} outside attention matrix")))?;
        let v = row
            .get(s)
            .ok_or_else(|| Error::Data(format!("saer: link source {s} outside attention matrix")))?;
        dot += v;
    }
    Ok(dot)
}

/// Soft AER over the attention matrix:
/// 1 - (<M_A, M_S> + <M_A, M_P>) / (|M_A|_1 + |M_S|_1), with M_S and M_P the
/// 0/1 indicator matrices of the sure and possible links.
pub fn saer(m_a: &AttentionMatrix, gold: &AlignmentSet) -> Result<f64> {
    let a_norm: f64 = m_a.rows.iter().flat_map(|r| r.iter().map(|x| x.abs())).sum();
    let s_norm = gold.sure.len() as f64;
    if a_norm + s_norm == 0.0 {
        return Err(Error::Data("saer: degenerate inputs".into()));
    }
    let dot_s = gold_mass(m_a, &gold.sure)?;
    let dot_p = gold_mass(m_a, &gold.possible)?;
    Ok(1.0 - (dot_s + dot_p) / (a_norm + s_norm))
}

/// Corpus-level AER with micro-aggregated counts across sentences.
pub fn aer_corpus(preds: &[BTreeSet<(usize, usize)>], golds: &[AlignmentSet]) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::Data("aer: corpus length mismatch".into()));
    }
    let (mut hit, mut denom) = (0usize, 0usize);
    for (a, g) in preds.iter().zip(golds) {
        hit += a.intersection(&g.sure).count() + a.intersection(&g.possible).count();
        denom += a.len() + g.sure.len();
    }
    if denom == 0 {
        return Err(Error::Data("aer: both predicted and sure links are empty".into()));
    }
    Ok(1.0 - hit as f64 / denom as f64)
}

/// Corpus-level soft AER with micro-aggregated mass across sentences.
pub fn saer_corpus(mats: &[AttentionMatrix], golds: &[AlignmentSet]) -> Result<f64> {
    if mats.len() != golds.len() {
        return Err(Error::Data("saer: corpus length mismatch".into()));
    }
    let (mut mass, mut denom) = (0.0, 0.0);
    for (m, g) in mats.iter().zip(golds) {
        mass += gold_mass(m, &g.sure)? + gold_mass(m, &g.possible)?;
        denom += m.rows.iter().flat_map(|r| r.iter().map(|x| x.abs())).sum::<f64>()
            + g.sure.len() as f64;
    }
    if denom == 0.0 {
        return Err(Error::Data("saer: degenerate inputs".into()));
    }
    Ok(1.0 - mass / denom)
}

// ── over-translation ─────────────────────────────────────────────────

/// Ratio of over-translation. For every source word occurrence (optionally
/// restricted to positions whose POS tag is in `filter`), e(w) is the
/// multiset of target tokens hard-aligned to it and t(w) = |e(w)| - |unique|.
/// ROT is the sum of t(w) over the count of filtered source words.
/// `aligns[i][j]` is the source position of target token j in sentence i.
pub fn rot(
    src_tokens: &[Vec<String>],
    tgt_tokens: &[Vec<String>],
    aligns: &[Vec<usize>],
    src_tags: Option<&[Vec<String>]>,
    filter: Option<&BTreeSet<String>>,
) -> Result<f64> {
    if src_tokens.len() != tgt_tokens.len() || src_tokens.len() != aligns.len() {
        return Err(Error::Data("rot: corpus length mismatch".into()));
    }
    if filter.is_some() && src_tags.is_none() {
        return Err(Error::Data("rot: a POS filter requires source tags".into()));
    }
    let mut over = 0usize;
    let mut words = 0usize;
    for (i, ((src, tgt), al)) in src_tokens.iter().zip(tgt_tokens).zip(aligns).enumerate() {
        if tgt.len() != al.len() {
            return Err(Error::Data(format!(
                "rot: line {}: {} target tokens vs {} alignments",
                i + 1,
                tgt.len(),
                al.len()
            )));
        }
        for (p, _) in src.iter().enumerate() {
            if let (Some(tags), Some(f)) = (src_tags, filter) {
                let tag = tags
                    .get(i)
                    .and_then(|t| t.get(p))
                    .ok_or_else(|| Error::Data(format!("rot: line {}: missing source tag", i + 1)))?;
                if !f.contains(tag) {
                    continue;
                }
            }
            words += 1;
            let mut e: Vec<&String> = al
                .iter()
                .zip(tgt.iter())
                .filter(|(&a, _)| a == p)
                .map(|(_, t)| t)
                .collect();
            let n = e.len();
            e.sort();
            e.dedup();
            over += n - e.len();
        }
    }
    if words == 0 {
        return Err(Error::Data("rot: no source words matched the filter".into()));
    }
    Ok(over as f64 / words as f64)
}

// ── POS confusion ────────────────────────────────────────────────────

/// Collapses fine-grained verb and noun tags: anything starting with V
/// becomes "V", anything starting with N becomes "N".
pub fn merge_tag(tag: &str) -> String {
    match tag.chars().next() {
        Some('V') => "V".to_string(),
        Some('N') => "N".to_string(),
        _ => tag.to_string(),
    }
}

/// Parses one "surface_TAG surface_TAG ..." line into tokens and tags.
pub fn parse_tagged_line(line: &str) -> Result<(Vec<String>, Vec<String>)> {
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    for piece in line.split_whitespace() {
        let (tok, tag) = piece
            .rsplit_once('_')
            .ok_or_else(|| Error::Format(format!("token {piece:?} is not in surface_TAG form")))?;
        tokens.push(tok.to_string());
        tags.push(tag.to_string());
    }
    Ok((tokens, tags))
}

/// For each target tag, the percentage distribution over the tags of the
/// hard-aligned source words. Rows sum to 100. Tags are merged with
/// `merge_tag` when `merge` is set. Empty tag classes are absent.
pub fn pos_confusion(
    src_tags: &[Vec<String>],
    tgt_tags: &[Vec<String>],
    aligns: &[Vec<usize>],
    merge: bool,
) -> Result<BTreeMap<String, BTreeMap<String, f64>>> {
    if src_tags.len() != tgt_tags.len() || src_tags.len() != aligns.len() {
        return Err(Error::Data("pos_confusion: corpus length mismatch".into()));
    }
    let mut counts: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for (i, ((st, tt), al)) in src_tags.iter().zip(tgt_tags).zip(aligns).enumerate() {
        if tt.len() != al.len() {
            return Err(Error::Data(format!(
                "pos_confusion: line {}: {} target tags vs {} alignments",
                i + 1,
                tt.len(),
                al.len()
            )));
        }
        for (tag, &a) in tt.iter().zip(al) {
            let src_tag = st.get(a).ok_or_else(|| {
                Error::Data(format!(
                    "pos_confusion: line {}: alignment {a} outside {} source tokens",
                    i + 1,
                    st.len()
                ))
            })?;
            let (t, s) = if merge {
                (merge_tag(tag), merge_tag(src_tag))
            } else {
                (tag.clone(), src_tag.clone())
            };
            *counts.entry(t).or_default().entry(s).or_insert(0) += 1;
        }
    }
    let mut out = BTreeMap::new();
    for (t, row) in counts {
        let total: usize = row.values().sum();
        let pct: BTreeMap<String, f64> = row
            .into_iter()
            .map(|(s, c)| (s, 100.0 * c as f64 / total as f64))
            .collect();
        out.insert(t, pct);
    }
    Ok(out)
}

// ── length buckets ───────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct LengthBucket {
    pub label: String,
    pub count: usize,
    pub bleu: f64,
}

/// Corpus BLEU per source-length bucket. `edges` are inclusive upper bounds;
/// the final bucket is open-ended. Empty buckets are omitted.
pub fn length_bucket_bleu(
    hyps: &[Vec<String>],
    refs: &[Vec<Vec<String>>],
    src_lens: &[usize],
    edges: &[usize],
    add_one: bool,
) -> Result<Vec<LengthBucket>> {
    if hyps.len() != src_lens.len() || hyps.len() != refs.len() {
        return Err(Error::Data("length_bucket_bleu: corpus length mismatch".into()));
    }
    let bucket_of = |len: usize| edges.iter().position(|&e| len <= e).unwrap_or(edges.len());
    let label_of = |b: usize| -> String {
        if edges.is_empty() {
            "all".to_string()
        } else if b == 0 {
            format!("<={}", edges[0])
        } else if b < edges.len() {
            format!("{}-{}", edges[b - 1] + 1, edges[b])
        } else {
            format!(">{}", edges[edges.len() - 1])
        }
    };
    let mut out = Vec::new();
    for b in 0..=edges.len() {
        let idx: Vec<usize> = (0..hyps.len()).filter(|&i| bucket_of(src_lens[i]) == b).collect();
        if idx.is_empty() {
            continue;
        }
        let bh: Vec<Vec<String>> = idx.iter().map(|&i| hyps[i].clone()).collect();
        let br: Vec<Vec<Vec<String>>> = idx.iter().map(|&i| refs[i].clone()).collect();
        out.push(LengthBucket {
            label: label_of(b),
            count: idx.len(),
            bleu: corpus_bleu(&bh, &br, 4, true, add_one)?,
        });
    }
    Ok(out)
}

// ── nearest target words ─────────────────────────────────────────────

/// For each source word id, the k nearest target embedding rows to the
/// bridge image W x, by Euclidean distance ascending (ties to the lower id).
/// Reserved ids are excluded from the candidates; k is clamped to the number
/// of candidates. Requires a model with a bridge matrix.
pub fn nearest_target_words(
    params: &ModelParams,
    src_word_ids: &[u32],
    k: usize,
) -> Result<Vec<(u32, Vec<(u32, f64)>)>> {
    let e = params.config.embed_dim;
    let mut out = Vec::with_capacity(src_word_ids.len());
    for &src in src_word_ids {
        let image = params.bridge_image(src)?;
        let n_reserved = crate::data::RESERVED.len() as u32;
        let mut dists: Vec<(u32, f64)> = (n_reserved..params.config.tgt_vocab_size as u32)
            .map(|id| {
                let row = &params.tgt_embed.data[id as usize * e..(id as usize + 1) * e];
                let d2: f64 = row.iter().zip(image.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                (id, d2.sqrt())
            })
            .collect();
        dists.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
        dists.truncate(k);
        out.push((src, dists));
    }
    Ok(out)
}
