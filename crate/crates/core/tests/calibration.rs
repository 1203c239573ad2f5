//! Ignored by default: training-schedule calibration runs for the toy task.
//! Run with `cargo test --test calibration -- --ignored --nocapture`.

use bridgenmt::analysis::corpus_bleu;
use bridgenmt::data::{gen_toy_corpus, SentencePair, ToySpec, Vocabulary, EOS};
use bridgenmt::decode::greedy_decode;
use bridgenmt::model::{init_params, ModelConfig, ModelParams, Variant};
use bridgenmt::train::{train_epochs, OptimizerState, TrainConfig};

fn vocabs(pairs: &[SentencePair]) -> (Vocabulary, Vocabulary) {
    let src: Vec<&str> = pairs.iter().flat_map(|p| p.source.iter().map(String::as_str)).collect();
    let tgt: Vec<&str> = pairs.iter().flat_map(|p| p.target.iter().map(String::as_str)).collect();
    (Vocabulary::build(src, 100).unwrap(), Vocabulary::build(tgt, 100).unwrap())
}

fn dev_bleu(params: &ModelParams, dev: &[SentencePair], sv: &Vocabulary, tv: &Vocabulary) -> f64 {
    let mut hyps = Vec::new();
    let mut refs = Vec::new();
    for pair in dev {
        let mut src = sv.encode(&pair.source);
        src.push(EOS);
        let mask = vec![1.0; src.len()];
        let out = greedy_decode(params, &src, &mask, None).unwrap();
        let toks: Vec<String> = out
            .hypothesis
            .tokens
            .iter()
            .filter(|&&t| t != EOS)
            .map(|&t| tv.token(t).to_string())
            .collect();
        hyps.push(toks);
        refs.push(vec![pair.target.clone()]);
    }
    corpus_bleu(&hyps, &refs, 4, true, false).unwrap()
}

#[test]
#[ignore]
fn baseline_schedule() {
    let spec = ToySpec { vocab_size: 50, n_pairs: 5000, min_len: 3, max_len: 12, swap_prob: 0.2, seed: 1 };
    let corpus = gen_toy_corpus(&spec).unwrap();
    let dev_spec = ToySpec { n_pairs: 200, seed: 1001, ..spec.clone() };
    let dev = gen_toy_corpus(&dev_spec).unwrap();
    let (sv, tv) = vocabs(&corpus.pairs);

    let env = |k: &str, d: f64| -> f64 {
        std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
    };
    let mcfg = ModelConfig::toy(Variant::Baseline, 32, 64, sv.len(), tv.len());
    let tcfg = TrainConfig {
        batch_size: env("CAL_BS", 4.0) as usize,
        adadelta_rho: env("CAL_RHO", 0.95),
        adadelta_eps: env("CAL_EPS", 1e-5),
        dropout_rate: env("CAL_DROPOUT", 0.0),
        seed: 1,
        max_epochs: env("CAL_EPOCHS", 30.0) as usize,
        ..TrainConfig::default()
    };
    // canonical references: the same dev sources with swap-free targets
    let clean: Vec<SentencePair> = dev
        .pairs
        .iter()
        .map(|p| SentencePair {
            source: p.source.clone(),
            target: p.source.iter().map(|s| s.replacen('s', "t", 1)).collect(),
        })
        .collect();

    let mut params = init_params(&mcfg, 1).unwrap();
    let mut opt = OptimizerState::new(&mcfg);
    let t0 = std::time::Instant::now();
    let mut step = 0;
    let every = env("CAL_EVERY", 1.0) as u64;
    for epoch in 0..tcfg.max_epochs as u64 {
        let log = train_epochs(
            &mut params, &mut opt, &corpus.pairs, &sv, &tv, &tcfg, epoch, 1, step, |_| {},
        )
        .unwrap();
        step += log.len() as u64;
        let mean: f64 = log.iter().map(|r| r.loss).sum::<f64>() / log.len() as f64;
        if (epoch + 1) % every != 0 && epoch + 1 != tcfg.max_epochs as u64 {
            println!("epoch {epoch}: loss {mean:.3} elapsed {:.0}s", t0.elapsed().as_secs_f64());
            continue;
        }
        let bleu = dev_bleu(&params, &dev.pairs, &sv, &tv);
        let bleu_clean = dev_bleu(&params, &clean, &sv, &tv);
        println!(
            "epoch {epoch}: loss {mean:.3} dev_bleu {bleu:.4} clean_bleu {bleu_clean:.4} elapsed {:.0}s",
            t0.elapsed().as_secs_f64()
        );
        if bleu_clean >= 0.98 {
            break;
        }
    }
}

#[test]
#[ignore]
fn oracle_ceiling() {
    // BLEU of the best possible predictor (positionwise lexicon image):
    // the random swaps in the references are unpredictable from the source.
    for n in [200, 2000] {
        let spec = ToySpec { vocab_size: 50, n_pairs: n, min_len: 3, max_len: 12, swap_prob: 0.2, seed: 1001 };
        let dev = gen_toy_corpus(&spec).unwrap();
        let hyps: Vec<Vec<String>> = dev
            .pairs
            .iter()
            .map(|p| p.source.iter().map(|s| s.replacen('s', "t", 1)).collect())
            .collect();
        let refs: Vec<Vec<Vec<String>>> = dev.pairs.iter().map(|p| vec![p.target.clone()]).collect();
        let b4 = corpus_bleu(&hyps, &refs, 4, true, false).unwrap();
        let b1 = corpus_bleu(&hyps, &refs, 1, true, false).unwrap();
        println!("n={n}: oracle bleu4 {b4:.4} bleu1 {b1:.4}");
    }
}
