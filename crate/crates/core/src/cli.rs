//! Command-line front end: corpus generation, training, translation, forced
//! alignment, metric analysis, and gradient checking.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    aer_corpus, corpus_bleu, eos_alignment_rate, length_bucket_bleu, nearest_target_words,
    one_gram_bleu, parse_tagged_line, pos_confusion, rot, saer_corpus, AlignmentSet, MetricReport,
};
use crate::data::{
    gen_toy_corpus, load_parallel, read_alignments, read_lines, write_alignments, SentencePair,
    ToySpec, Vocabulary, EOS, UNK,
};
use crate::decode::{beam_search, force_decode, greedy_decode, AttentionMatrix};
use crate::error::{Error, Result};
use crate::model::{init_params, param_shapes, ModelConfig, ModelGraph, ModelParams, Variant};
use crate::tensor::{Tape, Tensor};
use crate::train::{
    load_checkpoint, save_checkpoint, sentence_loss, train_epochs, transfer_params, Checkpoint,
    OptimizerState, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "bridgenmt",
    version,
    about = "Attention-based encoder-decoder translation with embedding bridging"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic parallel corpus with gold alignments
    Toygen(ToygenArgs),
    /// Train a model variant
    Train(TrainArgs),
    /// Translate a file with beam search
    Translate(TranslateArgs),
    /// Forced-decode references and dump attention plus hard alignments
    Align(AlignArgs),
    /// Compute an evaluation metric
    Analyze(AnalyzeArgs),
    /// Check tape gradients against finite differences for every variant
    Gradcheck(GradcheckArgs),
}

/// Writes a line to stdout, ignoring broken pipes so that piping into
/// `head` and friends does not abort the process.
macro_rules! outln {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

/// Parses arguments and dispatches; returns the process exit code
/// (0 success, 1 usage/config, 2 data/format, 3 numeric).
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let r = match cli.cmd {
        Cmd::Toygen(a) => cmd_toygen(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Translate(a) => cmd_translate(a),
        Cmd::Align(a) => cmd_align(a),
        Cmd::Analyze(a) => cmd_analyze(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
    };
    match r {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

// ── toygen ───────────────────────────────────────────────────────────

#[derive(Args)]
struct ToygenArgs {
    /// Source vocabulary size (>= 10)
    #[arg(long, default_value_t = 50)]
    vocab_size: usize,
    /// Number of sentence pairs
    #[arg(long, default_value_t = 5000)]
    n_pairs: usize,
    #[arg(long, default_value_t = 3)]
    min_len: usize,
    #[arg(long, default_value_t = 12)]
    max_len: usize,
    /// Probability of swapping each non-overlapping adjacent pair
    #[arg(long, default_value_t = 0.2)]
    swap_prob: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

fn cmd_toygen(a: ToygenArgs) -> Result<()> {
    let spec = ToySpec {
        vocab_size: a.vocab_size,
        n_pairs: a.n_pairs,
        min_len: a.min_len,
        max_len: a.max_len,
        swap_prob: a.swap_prob,
        seed: a.seed,
    };
    let corpus = gen_toy_corpus(&spec)?;
    std::fs::create_dir_all(&a.out)?;
    let write_tokens = |name: &str, side: fn(&SentencePair) -> &Vec<String>| -> Result<()> {
        let mut f = std::fs::File::create(a.out.join(name))?;
        for p in &corpus.pairs {
            writeln!(f, "{}", side(p).join(" "))?;
        }
        Ok(())
    };
    write_tokens("toy.src", |p| &p.source)?;
    write_tokens("toy.tgt", |p| &p.target)?;
    let aligns: Vec<(Vec<(usize, usize)>, Vec<(usize, usize)>)> =
        corpus.alignments.iter().map(|s| (s.clone(), Vec::new())).collect();
    write_alignments(&a.out.join("toy.align"), &aligns)?;
    let manifest = serde_json::to_string_pretty(&spec)
        .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
    std::fs::write(a.out.join("toy.json"), manifest + "\n")?;
    outln!("wrote {} pairs to {}", corpus.pairs.len(), a.out.display());
    Ok(())
}

// ── run configuration ────────────────────────────────────────────────

const CONFIG_KEYS: [&str; 19] = [
    "variant",
    "embed_dim",
    "hidden_dim",
    "attention_dim",
    "readout_dim",
    "max_len",
    "vocab_cap",
    "batch_size",
    "adadelta_rho",
    "adadelta_eps",
    "dropout_rate",
    "max_epochs",
    "grad_clip_norm",
    "seed",
    "bucketing",
    "weighted_penalty",
    "train_src",
    "train_tgt",
    "dev_src",
];

/// Resolved key-value run configuration: built-in defaults, overlaid by the
/// config file, overlaid by command-line flags.
struct RunConfig {
    map: BTreeMap<String, String>,
}

impl RunConfig {
    fn defaults() -> RunConfig {
        let mut map = BTreeMap::new();
        for (k, v) in [
            ("variant", "baseline"),
            ("embed_dim", "620"),
            ("hidden_dim", "1000"),
            ("attention_dim", "1000"),
            ("readout_dim", "310"),
            ("max_len", "50"),
            ("vocab_cap", "30000"),
            ("batch_size", "80"),
            ("adadelta_rho", "0.95"),
            ("adadelta_eps", "1e-6"),
            ("dropout_rate", "0.5"),
            ("max_epochs", "10"),
            ("grad_clip_norm", "1"),
            ("seed", "1"),
            ("bucketing", "false"),
            ("weighted_penalty", "false"),
        ] {
            map.insert(k.to_string(), v.to_string());
        }
        RunConfig { map }
    }

    fn is_known(key: &str) -> bool {
        CONFIG_KEYS.contains(&key) || key == "dev_tgt"
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !Self::is_known(key) {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        }
        self.map.insert(key.to_string(), value.to_string());
        Ok(())
    }

    fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}:{}: expected key=value", path.display(), ln + 1))
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self
            .map
            .get(key)
            .ok_or_else(|| Error::Config(format!("missing config key {key}")))?;
        v.parse()
            .map_err(|_| Error::Config(format!("bad value {v:?} for config key {key}")))
    }

    fn echo(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.map {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }

    fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            batch_size: self.parse("batch_size")?,
            adadelta_rho: self.parse("adadelta_rho")?,
            adadelta_eps: self.parse("adadelta_eps")?,
            dropout_rate: self.parse("dropout_rate")?,
            max_epochs: self.parse("max_epochs")?,
            grad_clip_norm: self.parse("grad_clip_norm")?,
            seed: self.parse("seed")?,
            bucketing: self.parse("bucketing")?,
            weighted_penalty: self.parse("weighted_penalty")?,
        })
    }

    fn model_config(&self, src_vocab: usize, tgt_vocab: usize) -> Result<ModelConfig> {
        let variant = Variant::parse(self.get("variant").unwrap_or("baseline"))?;
        Ok(ModelConfig {
            embed_dim: self.parse("embed_dim")?,
            hidden_dim: self.parse("hidden_dim")?,
            attention_dim: self.parse("attention_dim")?,
            readout_dim: self.parse("readout_dim")?,
            src_vocab_size: src_vocab,
            tgt_vocab_size: tgt_vocab,
            max_len: self.parse("max_len")?,
            variant,
        })
    }
}

// ── train ────────────────────────────────────────────────────────────

#[derive(Args)]
struct TrainArgs {
    /// key=value config file; flags override its entries
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for checkpoints, logs, resolved config
    #[arg(long)]
    out: PathBuf,
    /// Initialize from an existing checkpoint (pre-training transfer)
    #[arg(long)]
    init_from: Option<PathBuf>,

    #[arg(long)]
    train_src: Option<PathBuf>,
    #[arg(long)]
    train_tgt: Option<PathBuf>,
    #[arg(long)]
    dev_src: Option<PathBuf>,
    #[arg(long)]
    dev_tgt: Option<PathBuf>,

    /// baseline | source-bridge | target-bridge | direct-bridge
    #[arg(long)]
    variant: Option<String>,
    /// Word embedding size (default 620)
    #[arg(long)]
    embed_dim: Option<usize>,
    /// GRU hidden size (default 1000)
    #[arg(long)]
    hidden_dim: Option<usize>,
    /// Attention hidden size (default 1000)
    #[arg(long)]
    attention_dim: Option<usize>,
    /// Maxout-free readout size (half the embedding size by default)
    #[arg(long)]
    readout_dim: Option<usize>,
    /// Drop training pairs longer than this (default 50)
    #[arg(long)]
    max_len: Option<usize>,
    /// Vocabulary cap including reserved tokens (default 30000)
    #[arg(long)]
    vocab_cap: Option<usize>,
    /// Sentences per batch (default 80)
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adadelta decay rho (default 0.95)
    #[arg(long)]
    adadelta_rho: Option<f64>,
    /// Adadelta epsilon (default 1e-6)
    #[arg(long)]
    adadelta_eps: Option<f64>,
    /// Dropout on the readout layer (default 0.5)
    #[arg(long)]
    dropout_rate: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Global gradient norm clip (default 1.0)
    #[arg(long)]
    grad_clip_norm: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Length-bucketed batching
    #[arg(long)]
    bucketing: Option<bool>,
    /// Attention-weighted direct-bridging penalty instead of argmax
    #[arg(long)]
    weighted_penalty: Option<bool>,
}

fn resolve_train_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut rc = RunConfig::defaults();
    if let Some(path) = &a.config {
        rc.load_file(path)?;
    }
    let path_str = |p: &PathBuf| p.to_string_lossy().into_owned();
    let overrides: [(&str, Option<String>); 18] = [
        ("train_src", a.train_src.as_ref().map(path_str)),
        ("train_tgt", a.train_tgt.as_ref().map(path_str)),
        ("dev_src", a.dev_src.as_ref().map(path_str)),
        ("dev_tgt", a.dev_tgt.as_ref().map(path_str)),
        ("variant", a.variant.clone()),
        ("embed_dim", a.embed_dim.map(|v| v.to_string())),
        ("hidden_dim", a.hidden_dim.map(|v| v.to_string())),
        ("attention_dim", a.attention_dim.map(|v| v.to_string())),
        ("readout_dim", a.readout_dim.map(|v| v.to_string())),
        ("max_len", a.max_len.map(|v| v.to_string())),
        ("vocab_cap", a.vocab_cap.map(|v| v.to_string())),
        ("batch_size", a.batch_size.map(|v| v.to_string())),
        ("adadelta_rho", a.adadelta_rho.map(|v| v.to_string())),
        ("adadelta_eps", a.adadelta_eps.map(|v| v.to_string())),
        ("dropout_rate", a.dropout_rate.map(|v| v.to_string())),
        ("max_epochs", a.max_epochs.map(|v| v.to_string())),
        ("grad_clip_norm", a.grad_clip_norm.map(|v| v.to_string())),
        ("seed", a.seed.map(|v| v.to_string())),
    ];
    for (k, v) in overrides {
        if let Some(v) = v {
            rc.set(k, &v)?;
        }
    }
    if let Some(b) = a.bucketing {
        rc.set("bucketing", &b.to_string())?;
    }
    if let Some(b) = a.weighted_penalty {
        rc.set("weighted_penalty", &b.to_string())?;
    }
    Ok(rc)
}

fn greedy_bleu(params: &ModelParams, dev: &[SentencePair], sv: &Vocabulary, tv: &Vocabulary) -> Result<f64> {
    let mut hyps = Vec::with_capacity(dev.len());
    let mut refs = Vec::with_capacity(dev.len());
    for pair in dev {
        let (src, mask) = encode_source(&pair.source, sv);
        let out = greedy_decode(params, &src, &mask, None)?;
        hyps.push(ids_to_tokens(&out.hypothesis.tokens, tv));
        refs.push(vec![pair.target.clone()]);
    }
    corpus_bleu(&hyps, &refs, 4, true, false)
}

fn encode_source(tokens: &[String], sv: &Vocabulary) -> (Vec<u32>, Vec<f64>) {
    let mut ids = sv.encode(tokens);
    ids.push(EOS);
    let mask = vec![1.0; ids.len()];
    (ids, mask)
}

fn ids_to_tokens(ids: &[u32], vocab: &Vocabulary) -> Vec<String> {
    ids.iter().filter(|&&t| t != EOS).map(|&t| vocab.token(t).to_string()).collect()
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let rc = resolve_train_config(&a)?;
    let max_len: usize = rc.parse("max_len")?;
    let vocab_cap: usize = rc.parse("vocab_cap")?;
    let tcfg = rc.train_config()?;
    tcfg.validate()?;

    let train_src = rc
        .get("train_src")
        .ok_or_else(|| Error::Config("train_src is required (flag or config)".into()))?;
    let train_tgt = rc
        .get("train_tgt")
        .ok_or_else(|| Error::Config("train_tgt is required (flag or config)".into()))?;
    let (pairs, dropped) = load_parallel(Path::new(train_src), Path::new(train_tgt), max_len)?;
    if dropped > 0 {
        eprintln!("dropped {dropped} empty or over-length training pairs");
    }
    let dev = match (rc.get("dev_src"), rc.get("dev_tgt")) {
        (Some(s), Some(t)) => {
            let (d, _) = load_parallel(Path::new(s), Path::new(t), usize::MAX)?;
            Some(d)
        }
        (None, None) => None,
        _ => return Err(Error::Config("dev_src and dev_tgt must be given together".into())),
    };

    std::fs::create_dir_all(&a.out)?;

    // model setup: fresh vocabularies and parameters, or transfer from a
    // donor checkpoint (keeping its vocabularies)
    let (mut params, src_vocab, tgt_vocab) = match &a.init_from {
        Some(ck_path) => {
            let ck = load_checkpoint(ck_path)?;
            let target_cfg = rc.model_config(ck.src_vocab.len(), ck.tgt_vocab.len())?;
            target_cfg.validate()?;
            let (p, new_tensors) = transfer_params(&ck.params, &target_cfg, tcfg.seed)?;
            if !new_tensors.is_empty() {
                eprintln!("freshly initialized after transfer: {}", new_tensors.join(", "));
            }
            (p, ck.src_vocab, ck.tgt_vocab)
        }
        None => {
            let sv = Vocabulary::build(
                pairs.iter().flat_map(|p| p.source.iter().map(String::as_str)),
                vocab_cap,
            )?;
            let tv = Vocabulary::build(
                pairs.iter().flat_map(|p| p.target.iter().map(String::as_str)),
                vocab_cap,
            )?;
            let cfg = rc.model_config(sv.len(), tv.len())?;
            cfg.validate()?;
            (init_params(&cfg, tcfg.seed)?, sv, tv)
        }
    };

    std::fs::write(a.out.join("resolved.cfg"), rc.echo())?;
    let mut log_file = std::fs::File::create(a.out.join("train.log"))?;
    let mut opt = OptimizerState::new(&params.config);
    let mut best_bleu = f64::NEG_INFINITY;
    let mut best_epoch = 0u64;
    let mut step = 0u64;
    for epoch in 0..tcfg.max_epochs as u64 {
        let mut io_err: Option<std::io::Error> = None;
        let records = train_epochs(
            &mut params,
            &mut opt,
            &pairs,
            &src_vocab,
            &tgt_vocab,
            &tcfg,
            epoch,
            1,
            step,
            |rec| {
                if io_err.is_none() {
                    let line = serde_json::to_string(rec).expect("log record serializes");
                    if let Err(e) = writeln!(log_file, "{line}") {
                        io_err = Some(e);
                    }
                }
            },
        )?;
        if let Some(e) = io_err {
            return Err(Error::Io(e));
        }
        step += records.len() as u64;
        let mean_loss: f64 =
            records.iter().map(|r| r.loss).sum::<f64>() / records.len().max(1) as f64;
        let ck = Checkpoint {
            params: params.clone(),
            opt: Some(opt.clone()),
            epoch: epoch + 1,
            step,
            rng_seed: tcfg.seed,
            src_vocab: src_vocab.clone(),
            tgt_vocab: tgt_vocab.clone(),
        };
        save_checkpoint(&a.out.join("last.bnmt"), &ck)?;
        match &dev {
            Some(dev_pairs) => {
                let bleu = greedy_bleu(&params, dev_pairs, &src_vocab, &tgt_vocab)?;
                outln!("epoch {epoch}: mean_loss {mean_loss:.4} dev_bleu {bleu:.4}");
                if bleu > best_bleu {
                    best_bleu = bleu;
                    best_epoch = epoch;
                    save_checkpoint(&a.out.join("best.bnmt"), &ck)?;
                }
            }
            None => {
                outln!("epoch {epoch}: mean_loss {mean_loss:.4}");
                save_checkpoint(&a.out.join("best.bnmt"), &ck)?;
            }
        }
    }
    if dev.is_some() {
        outln!("best epoch {best_epoch} dev_bleu {best_bleu:.4}");
    }
    Ok(())
}

// ── attention dump records ───────────────────────────────────────────

/// One sentence in an attention dump: negative log-likelihood of the output
/// under the model, Pharaoh hard alignment over target word positions
/// (the final EOS row is excluded from `hard` but kept in `attention`),
/// and the full attention matrix.
#[derive(Debug, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub nll: f64,
    pub hard: String,
    pub attention: Vec<Vec<f64>>,
}

fn hard_links(attn: &AttentionMatrix) -> Vec<(usize, usize)> {
    let aligned = attn.hard_align();
    let n_words = aligned.len().saturating_sub(1); // drop the EOS row
    aligned.iter().take(n_words).enumerate().map(|(t, &s)| (s, t)).collect()
}

fn pharaoh(links: &[(usize, usize)]) -> String {
    links.iter().map(|(s, t)| format!("{s}-{t}")).collect::<Vec<_>>().join(" ")
}

fn read_attention_dump(path: &Path) -> Result<Vec<AttentionRecord>> {
    let mut out = Vec::new();
    for (ln, line) in read_lines(path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: AttentionRecord = serde_json::from_str(line).map_err(|e| {
            Error::Format(format!("{}:{}: bad attention record: {e}", path.display(), ln + 1))
        })?;
        out.push(rec);
    }
    Ok(out)
}

// ── translate ────────────────────────────────────────────────────────

#[derive(Args)]
struct TranslateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input file, one source sentence per line
    #[arg(long)]
    input: PathBuf,
    /// Output file (stdout when omitted)
    #[arg(long)]
    output: Option<PathBuf>,
    /// Beam width (default 10)
    #[arg(long, default_value_t = 10)]
    beam: usize,
    /// Rank hypotheses by length-normalized score
    #[arg(long)]
    length_norm: bool,
    /// Output length cap (default 2 * source length + 5)
    #[arg(long)]
    max_out_len: Option<usize>,
    /// Write attention matrices as JSON lines
    #[arg(long)]
    dump_attention: Option<PathBuf>,
}

/// Attention for an arbitrary token sequence via forced decoding. Sequences
/// that did not finish with EOS are completed for scoring, then the extra
/// row is dropped.
fn attention_for(params: &ModelParams, src: &[u32], mask: &[f64], tokens: &[u32]) -> Result<(f64, AttentionMatrix)> {
    let mut seq = tokens.to_vec();
    let truncate = seq.last() != Some(&EOS);
    if truncate {
        seq.push(EOS);
    }
    let forced = force_decode(params, src, mask, &seq)?;
    let mut attn = forced.attention;
    if truncate {
        attn.rows.pop();
    }
    Ok((forced.nll, attn))
}

fn cmd_translate(a: TranslateArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let lines = read_lines(&a.input)?;
    // parallel across sentences, reassembled in input order
    let results: Vec<(String, Option<AttentionRecord>, usize)> = lines
        .par_iter()
        .map(|line| -> Result<(String, Option<AttentionRecord>, usize)> {
            let tokens: Vec<String> = line.split_whitespace().map(String::from).collect();
            if tokens.is_empty() {
                let rec = a.dump_attention.as_ref().map(|_| AttentionRecord {
                    nll: 0.0,
                    hard: String::new(),
                    attention: vec![],
                });
                return Ok((String::new(), rec, 0));
            }
            let unk = tokens.iter().filter(|t| !ck.src_vocab.contains(t)).count();
            let (src, mask) = encode_source(&tokens, &ck.src_vocab);
            let best = if a.beam == 1 && !a.length_norm {
                greedy_decode(&ck.params, &src, &mask, a.max_out_len)?.hypothesis
            } else {
                beam_search(&ck.params, &src, &mask, a.beam, a.length_norm, a.max_out_len)?
                    .into_iter()
                    .next()
                    .ok_or_else(|| Error::Data("beam search returned no hypotheses".into()))?
            };
            let text = ids_to_tokens(&best.tokens, &ck.tgt_vocab).join(" ");
            let rec = match &a.dump_attention {
                Some(_) => {
                    let (nll, attn) = attention_for(&ck.params, &src, &mask, &best.tokens)?;
                    Some(AttentionRecord {
                        nll,
                        hard: pharaoh(&hard_links(&attn)),
                        attention: attn.rows,
                    })
                }
                None => None,
            };
            Ok((text, rec, unk))
        })
        .collect::<Result<Vec<_>>>()?;
    let unk_count: usize = results.iter().map(|(_, _, u)| u).sum();
    let mut out_lines = Vec::with_capacity(results.len());
    let mut dump = Vec::with_capacity(results.len());
    for (text, rec, _) in results {
        out_lines.push(text);
        if let Some(rec) = rec {
            dump.push(rec);
        }
    }
    if unk_count > 0 {
        eprintln!("{unk_count} unknown source tokens mapped to {}", ck.src_vocab.token(UNK));
    }
    let text = out_lines.iter().map(|l| l.clone() + "\n").collect::<String>();
    match &a.output {
        Some(p) => std::fs::write(p, text)?,
        None => { use std::io::Write; let _ = write!(std::io::stdout(), "{text}"); }
    }
    if let Some(p) = &a.dump_attention {
        let mut f = std::fs::File::create(p)?;
        for rec in &dump {
            let line = serde_json::to_string(rec)
                .map_err(|e| Error::Format(format!("attention record: {e}")))?;
            writeln!(f, "{line}")?;
        }
    }
    Ok(())
}

// ── align ────────────────────────────────────────────────────────────

#[derive(Args)]
struct AlignArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Source sentences, one per line
    #[arg(long)]
    src: PathBuf,
    /// Reference translations, line-aligned with the source
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Output JSON-lines file (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_align(a: AlignArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let src_lines = read_lines(&a.src)?;
    let ref_lines = read_lines(&a.reference)?;
    if src_lines.len() != ref_lines.len() {
        return Err(Error::Data(format!(
            "line count mismatch: {} source vs {} reference",
            src_lines.len(),
            ref_lines.len()
        )));
    }
    // parallel across sentences, reassembled in input order
    let records: Vec<AttentionRecord> = src_lines
        .par_iter()
        .zip(ref_lines.par_iter())
        .map(|(s, r)| -> Result<AttentionRecord> {
            let src_tokens: Vec<String> = s.split_whitespace().map(String::from).collect();
            let ref_tokens: Vec<String> = r.split_whitespace().map(String::from).collect();
            if src_tokens.is_empty() || ref_tokens.is_empty() {
                return Err(Error::Data("align: empty line in input".into()));
            }
            let (src, mask) = encode_source(&src_tokens, &ck.src_vocab);
            let mut tgt = ck.tgt_vocab.encode(&ref_tokens);
            tgt.push(EOS);
            let forced = force_decode(&ck.params, &src, &mask, &tgt)?;
            Ok(AttentionRecord {
                nll: forced.nll,
                hard: pharaoh(&hard_links(&forced.attention)),
                attention: forced.attention.rows,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(std::fs::File::create(p)?),
        None => Box::new(std::io::stdout().lock()),
    };
    for rec in &records {
        let line = serde_json::to_string(rec)
            .map_err(|e| Error::Format(format!("attention record: {e}")))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

// ── analyze ──────────────────────────────────────────────────────────

#[derive(Args)]
struct AnalyzeArgs {
    /// bleu | bleu1 | eos-rate | aer | saer | rot | pos-confusion | length-bleu | nearest
    metric: String,
    /// Hypothesis (translation) file
    #[arg(long)]
    hyp: Option<PathBuf>,
    /// Reference file
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    /// Source file
    #[arg(long)]
    src: Option<PathBuf>,
    /// Attention dump (JSON lines from translate/align)
    #[arg(long)]
    attn: Option<PathBuf>,
    /// Predicted Pharaoh alignments
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Gold Pharaoh alignments ("i-j" sure, "i?j" possible)
    #[arg(long)]
    gold: Option<PathBuf>,
    /// Source POS file (surface_TAG tokens)
    #[arg(long)]
    src_pos: Option<PathBuf>,
    /// Target POS file (surface_TAG tokens)
    #[arg(long)]
    tgt_pos: Option<PathBuf>,
    /// Keep fine-grained tags instead of merging verbs/nouns into V/N
    #[arg(long)]
    no_merge: bool,
    /// Restrict ROT to source words with these POS tags (comma-separated)
    #[arg(long)]
    filter_tags: Option<String>,
    /// Checkpoint (for nearest)
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Comma-separated source tokens (for nearest)
    #[arg(long)]
    tokens: Option<String>,
    /// Neighbors per token (for nearest)
    #[arg(short, long, default_value_t = 5)]
    k: usize,
    /// Length bucket edges, comma-separated
    #[arg(long, default_value = "10,20,30,40,50")]
    edges: String,
    /// Add-one BLEU smoothing for orders above 1
    #[arg(long)]
    smooth: bool,
    /// Highest BLEU n-gram order
    #[arg(long, default_value_t = 4)]
    max_n: usize,
}

fn need<'a>(o: &'a Option<PathBuf>, flag: &str, metric: &str) -> Result<&'a PathBuf> {
    o.as_ref()
        .ok_or_else(|| Error::Config(format!("metric {metric} requires --{flag}")))
}

fn read_sentences(path: &Path) -> Result<Vec<Vec<String>>> {
    Ok(read_lines(path)?
        .iter()
        .map(|l| l.split_whitespace().map(String::from).collect())
        .collect())
}

fn read_gold(path: &Path) -> Result<Vec<AlignmentSet>> {
    Ok(read_alignments(path)?
        .into_iter()
        .map(|(s, p)| AlignmentSet::new(s, p))
        .collect())
}

fn hard_link_set(rec: &AttentionRecord) -> Result<BTreeSet<(usize, usize)>> {
    let mut links = BTreeSet::new();
    for link in rec.hard.split_whitespace() {
        let parts = link
            .split_once('-')
            .and_then(|(s, t)| Some((s.parse().ok()?, t.parse().ok()?)));
        match parts {
            Some(pair) => links.insert(pair),
            None => return Err(Error::Format(format!("bad hard link {link:?}"))),
        };
    }
    Ok(links)
}

fn parse_hard(rec: &AttentionRecord) -> Result<Vec<usize>> {
    let mut by_tgt = BTreeMap::new();
    for link in rec.hard.split_whitespace() {
        let (s, t) = link
            .split_once('-')
            .ok_or_else(|| Error::Format(format!("bad hard link {link:?}")))?;
        let s: usize = s.parse().map_err(|_| Error::Format(format!("bad hard link {link:?}")))?;
        let t: usize = t.parse().map_err(|_| Error::Format(format!("bad hard link {link:?}")))?;
        by_tgt.insert(t, s);
    }
    Ok(by_tgt.into_values().collect())
}

fn cmd_analyze(a: AnalyzeArgs) -> Result<()> {
    let m = a.metric.as_str();
    let report = match m {
        "bleu" | "bleu1" => {
            let hyps = read_sentences(need(&a.hyp, "hyp", m)?)?;
            let refs: Vec<Vec<Vec<String>>> = read_sentences(need(&a.reference, "ref", m)?)?
                .into_iter()
                .map(|r| vec![r])
                .collect();
            let value = if m == "bleu" {
                corpus_bleu(&hyps, &refs, a.max_n, true, a.smooth)?
            } else {
                one_gram_bleu(&hyps, &refs)?
            };
            MetricReport::new(m, value, hyps.len())
        }
        "eos-rate" => {
            let dump = read_attention_dump(need(&a.attn, "attn", m)?)?;
            let mats: Vec<AttentionMatrix> =
                dump.into_iter().map(|r| AttentionMatrix { rows: r.attention }).collect();
            MetricReport::new(m, eos_alignment_rate(&mats)?, mats.len())
        }
        "aer" => {
            // Predicted links come from a Pharaoh file or from the `hard`
            // field of an attention dump produced by translate/align.
            let preds: Vec<BTreeSet<(usize, usize)>> = match (&a.pred, &a.attn) {
                (Some(path), None) => read_alignments(path)?
                    .into_iter()
                    .map(|(s, p)| s.into_iter().chain(p).collect())
                    .collect(),
                (None, Some(path)) => read_attention_dump(path)?
                    .iter()
                    .map(hard_link_set)
                    .collect::<Result<Vec<_>>>()?,
                _ => {
                    return Err(Error::Config(
                        "metric aer requires exactly one of --pred or --attn".into(),
                    ))
                }
            };
            let golds = read_gold(need(&a.gold, "gold", m)?)?;
            MetricReport::new(m, aer_corpus(&preds, &golds)?, preds.len())
        }
        "saer" => {
            let dump = read_attention_dump(need(&a.attn, "attn", m)?)?;
            let mats: Vec<AttentionMatrix> =
                dump.into_iter().map(|r| AttentionMatrix { rows: r.attention }).collect();
            let golds = read_gold(need(&a.gold, "gold", m)?)?;
            MetricReport::new(m, saer_corpus(&mats, &golds)?, mats.len())
        }
        "rot" => {
            let srcs = read_sentences(need(&a.src, "src", m)?)?;
            let hyps = read_sentences(need(&a.hyp, "hyp", m)?)?;
            let dump = read_attention_dump(need(&a.attn, "attn", m)?)?;
            let aligns: Vec<Vec<usize>> =
                dump.iter().map(parse_hard).collect::<Result<Vec<_>>>()?;
            let (tags, filter) = match &a.filter_tags {
                Some(list) => {
                    let tagged = read_sentences(need(&a.src_pos, "src-pos", m)?)?;
                    let mut tags = Vec::new();
                    for line in &tagged {
                        let (_, t) = parse_tagged_line(&line.join(" "))?;
                        tags.push(t);
                    }
                    let set: BTreeSet<String> =
                        list.split(',').map(|s| s.trim().to_string()).collect();
                    (Some(tags), Some(set))
                }
                None => (None, None),
            };
            let value = rot(&srcs, &hyps, &aligns, tags.as_deref(), filter.as_ref())?;
            MetricReport::new(m, value, srcs.len())
        }
        "pos-confusion" => {
            let parse_pos = |path: &Path| -> Result<Vec<Vec<String>>> {
                read_lines(path)?
                    .iter()
                    .map(|l| parse_tagged_line(l).map(|(_, tags)| tags))
                    .collect()
            };
            let st = parse_pos(need(&a.src_pos, "src-pos", m)?)?;
            let tt = parse_pos(need(&a.tgt_pos, "tgt-pos", m)?)?;
            let dump = read_attention_dump(need(&a.attn, "attn", m)?)?;
            let aligns: Vec<Vec<usize>> =
                dump.iter().map(parse_hard).collect::<Result<Vec<_>>>()?;
            let matrix = pos_confusion(&st, &tt, &aligns, !a.no_merge)?;
            let total: usize = tt.iter().map(Vec::len).sum();
            let mut rep = MetricReport::new(m, total as f64, st.len());
            rep.breakdown = serde_json::to_value(&matrix)
                .map_err(|e| Error::Format(format!("breakdown: {e}")))?;
            rep
        }
        "length-bleu" => {
            let hyps = read_sentences(need(&a.hyp, "hyp", m)?)?;
            let refs: Vec<Vec<Vec<String>>> = read_sentences(need(&a.reference, "ref", m)?)?
                .into_iter()
                .map(|r| vec![r])
                .collect();
            let lens: Vec<usize> =
                read_sentences(need(&a.src, "src", m)?)?.iter().map(Vec::len).collect();
            let edges: Vec<usize> = a
                .edges
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad bucket edge {s:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            let buckets = length_bucket_bleu(&hyps, &refs, &lens, &edges, a.smooth)?;
            let overall = corpus_bleu(&hyps, &refs, 4, true, a.smooth)?;
            let mut rep = MetricReport::new(m, overall, hyps.len());
            rep.breakdown = serde_json::to_value(&buckets)
                .map_err(|e| Error::Format(format!("breakdown: {e}")))?;
            rep
        }
        "nearest" => {
            let ck = load_checkpoint(need(&a.checkpoint, "checkpoint", m)?)?;
            let list = a
                .tokens
                .as_ref()
                .ok_or_else(|| Error::Config("metric nearest requires --tokens".into()))?;
            let mut ids = Vec::new();
            for tok in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                if !ck.src_vocab.contains(tok) {
                    return Err(Error::Data(format!("token {tok:?} not in source vocabulary")));
                }
                ids.push(ck.src_vocab.id(tok));
            }
            let table = nearest_target_words(&ck.params, &ids, a.k)?;
            let breakdown: BTreeMap<String, Vec<(String, f64)>> = table
                .iter()
                .map(|(src, neighbors)| {
                    (
                        ck.src_vocab.token(*src).to_string(),
                        neighbors
                            .iter()
                            .map(|(id, d)| (ck.tgt_vocab.token(*id).to_string(), *d))
                            .collect(),
                    )
                })
                .collect();
            let mut rep = MetricReport::new(m, ids.len() as f64, ids.len());
            rep.breakdown = serde_json::to_value(&breakdown)
                .map_err(|e| Error::Format(format!("breakdown: {e}")))?;
            rep
        }
        other => {
            return Err(Error::Config(format!(
                "unknown metric {other:?} (expected bleu, bleu1, eos-rate, aer, saer, rot, pos-confusion, length-bleu, nearest)"
            )))
        }
    };
    let json = serde_json::to_string(&report)
        .map_err(|e| Error::Format(format!("report serialization: {e}")))?;
    outln!("{json}");
    print_table(&report);
    Ok(())
}

fn print_table(rep: &MetricReport) {
    outln!("metric       {}", rep.name);
    outln!("value        {:.6}", rep.value);
    outln!("sentences    {}", rep.n_sentences);
    match &rep.breakdown {
        serde_json::Value::Null => {}
        serde_json::Value::Object(map) => {
            for (k, v) in map {
                outln!("  {k:<12} {v}");
            }
        }
        other => println!("  {other}"),
    }
}

// ── gradcheck ────────────────────────────────────────────────────────

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    embed_dim: usize,
    #[arg(long, default_value_t = 12)]
    hidden_dim: usize,
    #[arg(long, default_value_t = 20)]
    vocab: usize,
    /// Source and target length (tokens before EOS)
    #[arg(long, default_value_t = 5)]
    len: usize,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Negate the analytic gradient of one parameter group (fault injection
    /// for testing the checker itself)
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

struct GroupReport {
    name: String,
    max_rel_err: f64,
    worst_coord: usize,
    grad_norm: f64,
}

fn gradcheck_variant(
    variant: Variant,
    a: &GradcheckArgs,
) -> Result<(Vec<GroupReport>, bool)> {
    let cfg = ModelConfig::toy(variant, a.embed_dim, a.hidden_dim, a.vocab, a.vocab);
    let mut params = init_params(&cfg, a.seed)?;
    // Scale up the usual small init so tanh units leave their linear range;
    // near linearity the softmax cancels the attention query projection's
    // gradient to first order and its check would be vacuous.
    for t in params.tensors_mut() {
        for x in t.data.iter_mut() {
            *x *= 5.0;
        }
    }
    let real = (a.vocab - 4) as u32;
    let src: Vec<u32> = (0..a.len as u32 - 1).map(|i| 4 + (i * 3 + 1) % real).chain([EOS]).collect();
    let tgt: Vec<u32> = (0..a.len as u32 - 1).map(|i| 4 + (i * 5 + 2) % real).chain([EOS]).collect();
    let mask = vec![1.0; a.len];

    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids = tensors.iter().map(|t| tape.leaf_tensor(t)).collect();
        let graph = ModelGraph::from_leaf_ids(cfg.clone(), ids);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sl = sentence_loss(&graph, &mut tape, &src, &mask, &tgt, &mask, false, 0.0, false, &mut rng)?;
        Ok(tape.scalar_value(sl.loss))
    };

    // analytic gradients
    let mut tape = Tape::new();
    let graph = ModelGraph::insert(&mut tape, &params);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let sl = sentence_loss(&graph, &mut tape, &src, &mask, &tgt, &mask, false, 0.0, false, &mut rng)?;
    tape.backward(sl.loss)?;
    let mut grads = graph.collect_grads(&tape);

    let names: Vec<String> = param_shapes(&cfg).into_iter().map(|(n, _)| n).collect();
    if let Some(fault) = &a.inject_fault {
        let idx = names
            .iter()
            .position(|n| n == fault)
            .ok_or_else(|| Error::Config(format!("unknown parameter group {fault:?}")))?;
        for g in grads[idx].iter_mut() {
            *g = -*g;
        }
    }

    let mut tensors: Vec<Tensor> = params.tensors().into_iter().cloned().collect();
    let mut reports = Vec::with_capacity(names.len());
    let mut pass = true;
    for gi in 0..names.len() {
        let mut max_rel = 0.0;
        let mut worst = 0;
        for ci in 0..tensors[gi].data.len() {
            let orig = tensors[gi].data[ci];
            tensors[gi].data[ci] = orig + a.step;
            let up = eval(&tensors)?;
            tensors[gi].data[ci] = orig - a.step;
            let down = eval(&tensors)?;
            tensors[gi].data[ci] = orig;
            let numeric = (up - down) / (2.0 * a.step);
            if !numeric.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite finite difference at {} coordinate {ci}",
                    names[gi]
                )));
            }
            let analytic = grads[gi][ci];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0);
            if rel > max_rel {
                max_rel = rel;
                worst = ci;
            }
        }
        if max_rel > a.tol {
            pass = false;
        }
        let grad_norm = grads[gi].iter().map(|g| g * g).sum::<f64>().sqrt();
        reports.push(GroupReport {
            name: names[gi].clone(),
            max_rel_err: max_rel,
            worst_coord: worst,
            grad_norm,
        });
    }
    Ok((reports, pass))
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    if a.vocab < 5 || a.len < 2 {
        return Err(Error::Config("gradcheck needs vocab >= 5 and len >= 2".into()));
    }
    let mut all_pass = true;
    for variant in [
        Variant::Baseline,
        Variant::SourceBridge,
        Variant::TargetBridge,
        Variant::DirectBridge,
    ] {
        let (reports, pass) = gradcheck_variant(variant, &a)?;
        for r in &reports {
            let status = if r.max_rel_err <= a.tol { "ok" } else { "FAIL" };
            outln!(
                "{} {:<12} max_rel_err {:.3e} (coord {}) grad_norm {:.3e} {status}",
                variant.as_str(),
                r.name,
                r.max_rel_err,
                r.worst_coord,
                r.grad_norm
            );
        }
        outln!("{}: {}", variant.as_str(), if pass { "PASS" } else { "FAIL" });
        all_pass &= pass;
    }
    if !all_pass {
        return Err(Error::Numeric("gradient check failed".into()));
    }
    Ok(())
}
