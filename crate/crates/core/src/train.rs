//! Losses, Adadelta optimization, the training loop, parameter transfer for
//! the direct-bridging pre-training workflow, and checkpointing.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{make_batches, Batch, SentencePair, Vocabulary, BOS, EOS};
use crate::error::{Error, Result};
use crate::model::{param_shapes, ModelConfig, ModelGraph, ModelParams, Variant};
use crate::tensor::{NodeId, Tape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub adadelta_rho: f64,
    pub adadelta_eps: f64,
    pub dropout_rate: f64,
    pub max_epochs: usize,
    pub grad_clip_norm: f64,
    pub seed: u64,
    /// Length-bucketed batching (off by default: plain shuffling).
    pub bucketing: bool,
    /// Use the attention-weighted mean of source embeddings in the direct
    /// bridging penalty instead of the argmax embedding.
    pub weighted_penalty: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 80,
            adadelta_rho: 0.95,
            adadelta_eps: 1e-6,
            dropout_rate: 0.5,
            max_epochs: 10,
            grad_clip_norm: 1.0,
            seed: 1,
            bucketing: false,
            weighted_penalty: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.adadelta_rho > 0.0 && self.adadelta_rho < 1.0) {
            return Err(Error::Config(format!("adadelta_rho {} not in (0, 1)", self.adadelta_rho)));
        }
        if self.adadelta_eps <= 0.0 {
            return Err(Error::Config("adadelta_eps must be positive".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} not in [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }
}

// ── loss ─────────────────────────────────────────────────────────────

pub struct SentenceLoss {
    pub loss: NodeId,
    pub nll: NodeId,
    pub penalty: NodeId,
    /// Attention row per target step.
    pub alphas: Vec<Vec<f64>>,
}

/// Teacher-forced loss for one sentence: summed NLL over target steps, plus
/// the direct-bridging embedding penalty with equal weight when the variant
/// carries a bridge matrix. Both sums run over real (unmasked) steps only.
#[allow(clippy::too_many_arguments)]
pub fn sentence_loss<R: Rng>(
    graph: &ModelGraph,
    tape: &mut Tape,
    src_ids: &[u32],
    src_mask: &[f64],
    tgt_ids: &[u32],
    tgt_mask: &[f64],
    train_mode: bool,
    dropout_rate: f64,
    weighted_penalty: bool,
    rng: &mut R,
) -> Result<SentenceLoss> {
    let tgt_len = tgt_mask.iter().position(|m| *m == 0.0).unwrap_or(tgt_ids.len());
    if tgt_len == 0 {
        return Err(Error::Data("sentence_loss: empty target".into()));
    }
    if tgt_ids[tgt_len - 1] != EOS {
        return Err(Error::Data("sentence_loss: target must end with eos".into()));
    }
    let enc = graph.encode(tape, src_ids, src_mask)?;
    let mut state = graph.decoder_init(tape, &enc)?;
    let mut prev = BOS;
    let mut nll_sum = tape.scalar(0.0);
    let mut pen_sum = tape.scalar(0.0);
    let mut alphas = Vec::with_capacity(tgt_len);
    for t in 0..tgt_len {
        let step = graph.decoder_step(tape, state, prev, &enc, train_mode, dropout_rate, rng)?;
        let y_t = tgt_ids[t];
        let nll_t = tape.nll(step.logits, y_t as usize)?;
        nll_sum = tape.add(nll_sum, nll_t)?;
        if let Some(w) = graph.bridge_w {
            let x = if weighted_penalty {
                tape.weighted_sum(&enc.src_embeds, step.alpha)?
            } else {
                enc.src_embeds[step.t_star]
            };
            let wx = tape.matmul(w, x)?;
            let y_emb = tape.gather_row(graph.tgt_embed, y_t as usize)?;
            let diff = tape.sub(wx, y_emb)?;
            let pen_t = tape.squared_l2(diff);
            pen_sum = tape.add(pen_sum, pen_t)?;
        }
        if !tape.scalar_value(nll_sum).is_finite() || !tape.scalar_value(pen_sum).is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at target step {t}")));
        }
        alphas.push(tape.values(step.alpha).to_vec());
        state = step.s_t;
        prev = y_t;
    }
    let loss = tape.add(nll_sum, pen_sum)?;
    Ok(SentenceLoss { loss, nll: nll_sum, penalty: pen_sum, alphas })
}

/// Per-parameter gradients in `param_shapes` order, plus loss components.
pub struct BatchGrads {
    pub loss: f64,
    pub nll: f64,
    pub penalty: f64,
    pub grads: Vec<Vec<f64>>,
}

fn mix_seed(seed: u64, epoch: u64, step: u64, row: u64) -> u64 {
    // splitmix64 over the combined counters
    let mut x = seed
        .wrapping_add(epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(step.wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add(row.wrapping_mul(0x94d0_49bb_1331_11eb));
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^= x >> 31;
    x
}

/// Loss and gradients for one batch: per-sentence losses are summed over
/// target steps, then averaged over the batch. Sentences are processed in
/// parallel; the reduction runs in fixed row order so results are bitwise
/// deterministic.
pub fn batch_grads(
    params: &ModelParams,
    batch: &Batch,
    cfg: &TrainConfig,
    train_mode: bool,
    epoch: u64,
    step: u64,
) -> Result<BatchGrads> {
    let b = batch.size();
    let rows: Vec<Result<(f64, f64, f64, Vec<Vec<f64>>)>> = (0..b)
        .into_par_iter()
        .map(|i| {
            let mut tape = Tape::new();
            let graph = ModelGraph::insert(&mut tape, params);
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch, step, i as u64));
            let sl = sentence_loss(
                &graph,
                &mut tape,
                &batch.src_ids[i],
                &batch.src_mask[i],
                &batch.tgt_ids[i],
                &batch.tgt_mask[i],
                train_mode,
                cfg.dropout_rate,
                cfg.weighted_penalty,
                &mut rng,
            )?;
            tape.backward(sl.loss)?;
            Ok((
                tape.scalar_value(sl.loss),
                tape.scalar_value(sl.nll),
                tape.scalar_value(sl.penalty),
                graph.collect_grads(&tape),
            ))
        })
        .collect();

    let shapes = param_shapes(&params.config);
    let mut grads: Vec<Vec<f64>> = shapes
        .iter()
        .map(|(_, s)| vec![0.0; s.iter().product()])
        .collect();
    let (mut loss, mut nll, mut penalty) = (0.0, 0.0, 0.0);
    for row in rows {
        let (l, n, p, g) = row?;
        loss += l;
        nll += n;
        penalty += p;
        for (acc, gi) in grads.iter_mut().zip(g.iter()) {
            for (a, x) in acc.iter_mut().zip(gi.iter()) {
                *a += x;
            }
        }
    }
    let scale = 1.0 / b as f64;
    for g in &mut grads {
        for x in g.iter_mut() {
            *x *= scale;
        }
    }
    Ok(BatchGrads { loss: loss * scale, nll: nll * scale, penalty: penalty * scale, grads })
}

/// Scales gradients so their global L2 norm is at most `max_norm`.
/// A non-finite threshold disables clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm: f64 = grads
        .iter()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if max_norm.is_finite() && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
    norm
}

// ── Adadelta ─────────────────────────────────────────────────────────

/// Per-parameter running accumulators E[g^2] and E[dx^2].
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub eg2: Vec<Vec<f64>>,
    pub edx2: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: &ModelConfig) -> OptimizerState {
        let zeros: Vec<Vec<f64>> = param_shapes(config)
            .iter()
            .map(|(_, s)| vec![0.0; s.iter().product()])
            .collect();
        OptimizerState { eg2: zeros.clone(), edx2: zeros }
    }
}

/// One Adadelta update on a flat slice:
/// E[g^2] <- rho E[g^2] + (1-rho) g^2; dx = -sqrt(E[dx^2]+eps)/sqrt(E[g^2]+eps) g;
/// E[dx^2] <- rho E[dx^2] + (1-rho) dx^2; x <- x + dx.
pub fn adadelta_update_slice(
    x: &mut [f64],
    g: &[f64],
    eg2: &mut [f64],
    edx2: &mut [f64],
    rho: f64,
    eps: f64,
) -> Result<()> {
    for i in 0..x.len() {
        eg2[i] = rho * eg2[i] + (1.0 - rho) * g[i] * g[i];
        let dx = -((edx2[i] + eps).sqrt() / (eg2[i] + eps).sqrt()) * g[i];
        edx2[i] = rho * edx2[i] + (1.0 - rho) * dx * dx;
        x[i] += dx;
        if !x[i].is_finite() {
            return Err(Error::Numeric(format!("non-finite parameter after update at index {i}")));
        }
    }
    Ok(())
}

/// Applies Adadelta to every parameter tensor.
pub fn adadelta_step(
    params: &mut ModelParams,
    grads: &[Vec<f64>],
    opt: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<()> {
    let tensors = params.tensors_mut();
    if tensors.len() != grads.len() {
        return Err(Error::Dim(format!(
            "adadelta_step: {} tensors vs {} gradients",
            tensors.len(),
            grads.len()
        )));
    }
    for (((t, g), eg2), edx2) in tensors
        .into_iter()
        .zip(grads.iter())
        .zip(opt.eg2.iter_mut())
        .zip(opt.edx2.iter_mut())
    {
        if t.data.len() != g.len() {
            return Err(Error::Dim("adadelta_step: gradient shape mismatch".into()));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        adadelta_update_slice(&mut t.data, g, eg2, edx2, cfg.adadelta_rho, cfg.adadelta_eps)?;
    }
    Ok(())
}

// ── training loop ────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: u64,
    pub step: u64,
    pub loss: f64,
    pub nll: f64,
    pub bridge_penalty: f64,
}

/// Runs epochs `start_epoch .. start_epoch + n_epochs`: seeded shuffle,
/// batching, masked batch loss, gradient clipping, Adadelta update.
/// Deterministic per seed. `step` continues from `start_step`.
#[allow(clippy::too_many_arguments)]
pub fn train_epochs<F: FnMut(&LogRecord)>(
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    pairs: &[SentencePair],
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    cfg: &TrainConfig,
    start_epoch: u64,
    n_epochs: usize,
    start_step: u64,
    mut callback: F,
) -> Result<Vec<LogRecord>> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Data("training corpus is empty".into()));
    }
    let mut log = Vec::new();
    let mut step = start_step;
    for e in 0..n_epochs {
        let epoch = start_epoch + e as u64;
        let batches = make_batches(
            pairs,
            src_vocab,
            tgt_vocab,
            cfg.batch_size,
            cfg.seed.wrapping_add(epoch),
            cfg.bucketing,
        )?;
        for batch in &batches {
            let mut bg = batch_grads(params, batch, cfg, true, epoch, step)?;
            clip_global_norm(&mut bg.grads, cfg.grad_clip_norm);
            adadelta_step(params, &bg.grads, opt, cfg)?;
            let rec = LogRecord {
                epoch,
                step,
                loss: bg.loss,
                nll: bg.nll,
                bridge_penalty: bg.penalty,
            };
            callback(&rec);
            log.push(rec);
            step += 1;
        }
    }
    Ok(log)
}

/// Full training run over `cfg.max_epochs` epochs.
pub fn train_loop<F: FnMut(&LogRecord)>(
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    pairs: &[SentencePair],
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    cfg: &TrainConfig,
    callback: F,
) -> Result<Vec<LogRecord>> {
    train_epochs(params, opt, pairs, src_vocab, tgt_vocab, cfg, 0, cfg.max_epochs, 0, callback)
}

// ── pre-training transfer ────────────────────────────────────────────

/// Builds a model for `target_config` from a trained donor: tensors whose
/// names and shapes match are copied verbatim, anything new (the bridge
/// matrix, and any tensor whose width changed with the annotation layout)
/// is freshly initialized from `init_seed`.
pub fn transfer_params(
    donor: &ModelParams,
    target_config: &ModelConfig,
    init_seed: u64,
) -> Result<(ModelParams, Vec<String>)> {
    let d = &donor.config;
    let mut mismatches = Vec::new();
    for (field, a, b) in [
        ("embed_dim", d.embed_dim, target_config.embed_dim),
        ("hidden_dim", d.hidden_dim, target_config.hidden_dim),
        ("attention_dim", d.attention_dim, target_config.attention_dim),
        ("readout_dim", d.readout_dim, target_config.readout_dim),
        ("src_vocab_size", d.src_vocab_size, target_config.src_vocab_size),
        ("tgt_vocab_size", d.tgt_vocab_size, target_config.tgt_vocab_size),
    ] {
        if a != b {
            mismatches.push(format!("{field}: donor {a} vs target {b}"));
        }
    }
    if !mismatches.is_empty() {
        return Err(Error::Incompatible(mismatches.join("; ")));
    }
    let mut fresh = crate::model::init_params(target_config, init_seed)?;
    let donor_named: std::collections::HashMap<String, &Tensor> =
        donor.named().into_iter().collect();
    let mut new_tensors = Vec::new();
    let names: Vec<String> = param_shapes(target_config).into_iter().map(|(n, _)| n).collect();
    for (name, t) in names.iter().zip(fresh.tensors_mut()) {
        match donor_named.get(name) {
            Some(dt) if dt.shape == t.shape => *t = (*dt).clone(),
            _ => new_tensors.push(name.clone()),
        }
    }
    Ok((fresh, new_tensors))
}

/// The direct-bridging pre-training workflow: copy a donor model's shared
/// parameters and freshly initialize the rest (for a source-bridge donor,
/// only the bridge matrix is new).
pub fn pretrain_then_bridge(
    donor: &ModelParams,
    init_seed: u64,
) -> Result<(ModelParams, Vec<String>)> {
    let mut target_config = donor.config.clone();
    target_config.variant = Variant::DirectBridge;
    transfer_params(donor, &target_config, init_seed)
}

// ── checkpointing ────────────────────────────────────────────────────

const MAGIC: &[u8; 4] = b"BNMT";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub opt: Option<OptimizerState>,
    pub epoch: u64,
    pub step: u64,
    pub rng_seed: u64,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
}

fn config_block(ck: &Checkpoint) -> String {
    let c = &ck.params.config;
    let mut s = String::new();
    for (k, v) in [
        ("variant", c.variant.as_str().to_string()),
        ("embed_dim", c.embed_dim.to_string()),
        ("hidden_dim", c.hidden_dim.to_string()),
        ("attention_dim", c.attention_dim.to_string()),
        ("readout_dim", c.readout_dim.to_string()),
        ("src_vocab_size", c.src_vocab_size.to_string()),
        ("tgt_vocab_size", c.tgt_vocab_size.to_string()),
        ("max_len", c.max_len.to_string()),
        ("epoch", ck.epoch.to_string()),
        ("step", ck.step.to_string()),
        ("rng_seed", ck.rng_seed.to_string()),
        ("has_opt", (ck.opt.is_some() as u8).to_string()),
    ] {
        s.push_str(k);
        s.push('=');
        s.push_str(&v);
        s.push('\n');
    }
    for (side, vocab) in [("src", &ck.src_vocab), ("tgt", &ck.tgt_vocab)] {
        for (id, tok) in vocab.tokens().iter().enumerate() {
            s.push_str(&format!("vocab.{side}.{id}={tok}\n"));
        }
    }
    s
}

/// Serializes a checkpoint: magic "BNMT", u32 version, a length-prefixed
/// canonical text config block, a manifest of (name, dtype, shape) entries,
/// then raw little-endian f64 payloads in manifest order.
pub fn checkpoint_bytes(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.write_u32::<LittleEndian>(VERSION)?;
    let block = config_block(ck);
    out.write_u64::<LittleEndian>(block.len() as u64)?;
    out.extend_from_slice(block.as_bytes());

    let names: Vec<String> = param_shapes(&ck.params.config).into_iter().map(|(n, _)| n).collect();
    let mut entries: Vec<(String, &Tensor)> = ck
        .params
        .tensors()
        .into_iter()
        .zip(names.iter())
        .map(|(t, n)| (n.clone(), t))
        .collect();
    let opt_tensors: Vec<(String, Tensor)> = match &ck.opt {
        Some(opt) => {
            let shapes = param_shapes(&ck.params.config);
            let mut v = Vec::new();
            for (kind, store) in [("eg2", &opt.eg2), ("edx2", &opt.edx2)] {
                for ((name, shape), data) in shapes.iter().zip(store.iter()) {
                    v.push((format!("opt.{kind}.{name}"), Tensor::new(shape.clone(), data.clone())));
                }
            }
            v
        }
        None => Vec::new(),
    };
    entries.extend(opt_tensors.iter().map(|(n, t)| (n.clone(), t)));

    out.write_u32::<LittleEndian>(entries.len() as u32)?;
    for (name, t) in &entries {
        out.write_u16::<LittleEndian>(name.len() as u16)?;
        out.extend_from_slice(name.as_bytes());
        out.write_u8(0)?; // dtype: f64
        out.write_u8(t.shape.len() as u8)?;
        for d in &t.shape {
            out.write_u64::<LittleEndian>(*d as u64)?;
        }
    }
    for (_, t) in &entries {
        for x in &t.data {
            out.write_f64::<LittleEndian>(*x)?;
        }
    }
    Ok(out)
}

/// Atomic save: temp file in the target directory, then rename.
pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let bytes = checkpoint_bytes(ck)?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&bytes)?;
    tmp.persist(path)
        .map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn truncated() -> Error {
    Error::Format("checkpoint truncated".into())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let mut r = &bytes[..];
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| truncated())?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let version = r.read_u32::<LittleEndian>().map_err(|_| truncated())?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let block_len = r.read_u64::<LittleEndian>().map_err(|_| truncated())? as usize;
    if r.len() < block_len {
        return Err(truncated());
    }
    let block = std::str::from_utf8(&r[..block_len])
        .map_err(|_| Error::Format("config block is not UTF-8".into()))?
        .to_string();
    r = &r[block_len..];

    let mut kv = std::collections::HashMap::new();
    let mut src_tokens: Vec<(u32, String)> = Vec::new();
    let mut tgt_tokens: Vec<(u32, String)> = Vec::new();
    for line in block.lines() {
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Format(format!("bad config line {line:?}")));
        };
        if let Some(rest) = k.strip_prefix("vocab.src.") {
            let id: u32 = rest.parse().map_err(|_| Error::Format(format!("bad vocab id {rest}")))?;
            src_tokens.push((id, v.to_string()));
        } else if let Some(rest) = k.strip_prefix("vocab.tgt.") {
            let id: u32 = rest.parse().map_err(|_| Error::Format(format!("bad vocab id {rest}")))?;
            tgt_tokens.push((id, v.to_string()));
        } else {
            kv.insert(k.to_string(), v.to_string());
        }
    }
    let get = |k: &str| -> Result<String> {
        kv.get(k)
            .cloned()
            .ok_or_else(|| Error::Format(format!("config block missing key {k}")))
    };
    let get_usize = |k: &str| -> Result<usize> {
        get(k)?.parse().map_err(|_| Error::Format(format!("bad value for {k}")))
    };
    let config = ModelConfig {
        embed_dim: get_usize("embed_dim")?,
        hidden_dim: get_usize("hidden_dim")?,
        attention_dim: get_usize("attention_dim")?,
        readout_dim: get_usize("readout_dim")?,
        src_vocab_size: get_usize("src_vocab_size")?,
        tgt_vocab_size: get_usize("tgt_vocab_size")?,
        max_len: get_usize("max_len")?,
        variant: Variant::parse(&get("variant")?)?,
    };
    let epoch: u64 = get("epoch")?.parse().map_err(|_| Error::Format("bad epoch".into()))?;
    let step: u64 = get("step")?.parse().map_err(|_| Error::Format("bad step".into()))?;
    let rng_seed: u64 = get("rng_seed")?.parse().map_err(|_| Error::Format("bad rng_seed".into()))?;
    let has_opt = get("has_opt")? == "1";

    let sort_tokens = |mut toks: Vec<(u32, String)>| -> Result<Vocabulary> {
        toks.sort_by_key(|(id, _)| *id);
        for (i, (id, _)) in toks.iter().enumerate() {
            if *id as usize != i {
                return Err(Error::Format("vocab ids are not contiguous".into()));
            }
        }
        Vocabulary::from_tokens(toks.into_iter().map(|(_, t)| t).collect())
    };
    let src_vocab = sort_tokens(src_tokens)?;
    let tgt_vocab = sort_tokens(tgt_tokens)?;
    if src_vocab.len() != config.src_vocab_size || tgt_vocab.len() != config.tgt_vocab_size {
        return Err(Error::Incompatible(format!(
            "vocab sizes {}/{} disagree with config {}/{}",
            src_vocab.len(),
            tgt_vocab.len(),
            config.src_vocab_size,
            config.tgt_vocab_size
        )));
    }

    let n_entries = r.read_u32::<LittleEndian>().map_err(|_| truncated())? as usize;
    let mut manifest: Vec<(String, Vec<usize>)> = Vec::with_capacity(n_entries);
    for _ in 0..n_entries {
        let name_len = r.read_u16::<LittleEndian>().map_err(|_| truncated())? as usize;
        if r.len() < name_len {
            return Err(truncated());
        }
        let name = std::str::from_utf8(&r[..name_len])
            .map_err(|_| Error::Format("manifest name is not UTF-8".into()))?
            .to_string();
        r = &r[name_len..];
        let dtype = r.read_u8().map_err(|_| truncated())?;
        if dtype != 0 {
            return Err(Error::Format(format!("unsupported dtype {dtype}")));
        }
        let rank = r.read_u8().map_err(|_| truncated())? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u64::<LittleEndian>().map_err(|_| truncated())? as usize);
        }
        manifest.push((name, shape));
    }
    let mut tensors: Vec<(String, Tensor)> = Vec::with_capacity(n_entries);
    for (name, shape) in manifest {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(r.read_f64::<LittleEndian>().map_err(|_| truncated())?);
        }
        tensors.push((name, Tensor::new(shape, data)));
    }

    // reassemble params in canonical order, verifying shapes
    let expected = param_shapes(&config);
    let by_name: std::collections::HashMap<String, Tensor> = tensors.into_iter().collect();
    let mut param_tensors = Vec::with_capacity(expected.len());
    for (name, shape) in &expected {
        let t = by_name
            .get(name)
            .ok_or_else(|| Error::Incompatible(format!("checkpoint missing tensor {name}")))?;
        if &t.shape != shape {
            return Err(Error::Incompatible(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                t.shape, shape
            )));
        }
        param_tensors.push(t.clone());
    }
    let params = ModelParams::from_tensors(config.clone(), param_tensors);

    let opt = if has_opt {
        let mut eg2 = Vec::new();
        let mut edx2 = Vec::new();
        for (kind, store) in [("eg2", &mut eg2), ("edx2", &mut edx2)] {
            for (name, shape) in &expected {
                let key = format!("opt.{kind}.{name}");
                let t = by_name
                    .get(&key)
                    .ok_or_else(|| Error::Incompatible(format!("checkpoint missing tensor {key}")))?;
                if &t.shape != shape {
                    return Err(Error::Incompatible(format!("optimizer tensor {key} shape mismatch")));
                }
                store.push(t.data.clone());
            }
        }
        Some(OptimizerState { eg2, edx2 })
    } else {
        None
    };

    Ok(Checkpoint { params, opt, epoch, step, rng_seed, src_vocab, tgt_vocab })
}
