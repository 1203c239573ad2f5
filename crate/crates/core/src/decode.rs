//! Greedy and beam-search decoding, forced decoding, and hard alignment
//! extraction from attention weights.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::EOS;
use crate::error::{Error, Result};
use crate::model::{argmax, EncoderOutput, ModelGraph, ModelParams};
use crate::tensor::{NodeId, Tape};

/// A (possibly finished) decoder output. `tokens` excludes the implicit BOS;
/// a finished hypothesis ends with EOS. `score` is the sum of per-token log
/// probabilities, including the EOS step.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub score: f64,
    pub finished: bool,
}

/// One attention row per produced target token; each row sums to 1 over the
/// real source positions.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMatrix {
    pub rows: Vec<Vec<f64>>,
}

impl AttentionMatrix {
    /// Argmax source position per output step, ties to the lowest index.
    pub fn hard_align(&self) -> Vec<usize> {
        self.rows.iter().map(|r| argmax(r)).collect()
    }
}

pub struct DecodeOutput {
    pub hypothesis: Hypothesis,
    pub attention: AttentionMatrix,
}

pub struct ForcedDecode {
    pub nll: f64,
    pub attention: AttentionMatrix,
}

/// Default output length cap for a source of real length `src_len`.
pub fn default_max_out_len(src_len: usize) -> usize {
    2 * src_len + 5
}

struct DecodeCtx {
    tape: Tape,
    graph: ModelGraph,
    enc: EncoderOutput,
}

impl DecodeCtx {
    fn new(params: &ModelParams, src_ids: &[u32], src_mask: &[f64]) -> Result<(DecodeCtx, NodeId)> {
        let mut tape = Tape::no_grad();
        let graph = ModelGraph::insert(&mut tape, params);
        let enc = graph.encode(&mut tape, src_ids, src_mask)?;
        let s0 = graph.decoder_init(&mut tape, &enc)?;
        Ok((DecodeCtx { tape, graph, enc }, s0))
    }

    /// One decoder step in eval mode: next state, log-probabilities over the
    /// target vocabulary, and the attention row.
    fn step(&mut self, state: NodeId, prev: u32) -> Result<(NodeId, Vec<f64>, Vec<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self
            .graph
            .decoder_step(&mut self.tape, state, prev, &self.enc, false, 0.0, &mut rng)?;
        let logits = self.tape.values(out.logits);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let logprobs: Vec<f64> = logits.iter().map(|x| x - lse).collect();
        let alpha = self.tape.values(out.alpha).to_vec();
        Ok((out.s_t, logprobs, alpha))
    }
}

/// Picks the next token greedily at every step until EOS or the length cap.
pub fn greedy_decode(
    params: &ModelParams,
    src_ids: &[u32],
    src_mask: &[f64],
    max_out_len: Option<usize>,
) -> Result<DecodeOutput> {
    let (mut ctx, mut state) = DecodeCtx::new(params, src_ids, src_mask)?;
    let cap = max_out_len.unwrap_or_else(|| default_max_out_len(ctx.enc.src_len));
    let mut tokens = Vec::new();
    let mut rows = Vec::new();
    let mut score = 0.0;
    let mut prev = crate::data::BOS;
    let mut finished = false;
    while tokens.len() < cap {
        let (next_state, logprobs, alpha) = ctx.step(state, prev)?;
        let tok = argmax(&logprobs) as u32;
        score += logprobs[tok as usize];
        tokens.push(tok);
        rows.push(alpha);
        state = next_state;
        prev = tok;
        if tok == EOS {
            finished = true;
            break;
        }
    }
    Ok(DecodeOutput {
        hypothesis: Hypothesis { tokens, score, finished },
        attention: AttentionMatrix { rows },
    })
}

struct Beam {
    tokens: Vec<u32>,
    score: f64,
    state: NodeId,
    prev: u32,
}

fn ranking_score(h: &Hypothesis, length_norm: bool) -> f64 {
    if length_norm && !h.tokens.is_empty() {
        h.score / h.tokens.len() as f64
    } else {
        h.score
    }
}

/// Beam search with a completed-hypothesis pool. Finished hypotheses leave
/// the beam; expansion stops once the beam is empty or the length cap is hit,
/// at which point surviving unfinished hypotheses join the pool as-is.
/// Returns up to `beam_width` hypotheses, best ranking score first.
pub fn beam_search(
    params: &ModelParams,
    src_ids: &[u32],
    src_mask: &[f64],
    beam_width: usize,
    length_norm: bool,
    max_out_len: Option<usize>,
) -> Result<Vec<Hypothesis>> {
    if beam_width == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    let (mut ctx, s0) = DecodeCtx::new(params, src_ids, src_mask)?;
    let cap = max_out_len.unwrap_or_else(|| default_max_out_len(ctx.enc.src_len));
    let mut active = vec![Beam { tokens: Vec::new(), score: 0.0, state: s0, prev: crate::data::BOS }];
    let mut completed: Vec<Hypothesis> = Vec::new();
    let mut len = 0;
    while !active.is_empty() && len < cap {
        // candidates: (origin beam, token, new score); states computed once
        // per origin
        let mut states = Vec::with_capacity(active.len());
        let mut candidates: Vec<(usize, u32, f64)> = Vec::new();
        for (i, b) in active.iter().enumerate() {
            let (next_state, logprobs, _) = ctx.step(b.state, b.prev)?;
            states.push(next_state);
            // only the top beam_width tokens per origin can survive the cut
            let mut order: Vec<usize> = (0..logprobs.len()).collect();
            order.sort_by(|&a, &c| logprobs[c].partial_cmp(&logprobs[a]).unwrap().then(a.cmp(&c)));
            for &tok in order.iter().take(beam_width) {
                candidates.push((i, tok as u32, b.score + logprobs[tok]));
            }
        }
        candidates.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.1.cmp(&b.1)).then(a.0.cmp(&b.0)));
        candidates.truncate(beam_width);

        let mut next_active = Vec::new();
        for (origin, tok, score) in candidates {
            let mut tokens = active[origin].tokens.clone();
            tokens.push(tok);
            if tok == EOS {
                completed.push(Hypothesis { tokens, score, finished: true });
            } else {
                next_active.push(Beam { tokens, score, state: states[origin], prev: tok });
            }
        }
        active = next_active;
        len += 1;
    }
    for b in active {
        completed.push(Hypothesis { tokens: b.tokens, score: b.score, finished: false });
    }
    completed.sort_by(|a, b| {
        ranking_score(b, length_norm)
            .partial_cmp(&ranking_score(a, length_norm))
            .unwrap()
            .then(a.tokens.cmp(&b.tokens))
    });
    completed.truncate(beam_width);
    Ok(completed)
}

/// Scores a given target sequence under the model: total NLL (negated
/// hypothesis score) plus the attention matrix from teacher forcing.
/// The target must end with EOS.
pub fn force_decode(
    params: &ModelParams,
    src_ids: &[u32],
    src_mask: &[f64],
    tgt_ids: &[u32],
) -> Result<ForcedDecode> {
    if tgt_ids.is_empty() {
        return Err(Error::Data("force_decode: empty target".into()));
    }
    if *tgt_ids.last().unwrap() != EOS {
        return Err(Error::Data("force_decode: target must end with eos".into()));
    }
    if let Some(&bad) = tgt_ids.iter().find(|&&t| t as usize >= params.config.tgt_vocab_size) {
        return Err(Error::Data(format!("force_decode: target id {bad} out of vocabulary")));
    }
    let (mut ctx, mut state) = DecodeCtx::new(params, src_ids, src_mask)?;
    let mut prev = crate::data::BOS;
    let mut nll = 0.0;
    let mut rows = Vec::with_capacity(tgt_ids.len());
    for &tok in tgt_ids {
        let (next_state, logprobs, alpha) = ctx.step(state, prev)?;
        nll -= logprobs[tok as usize];
        rows.push(alpha);
        state = next_state;
        prev = tok;
    }
    Ok(ForcedDecode { nll, attention: AttentionMatrix { rows } })
}
