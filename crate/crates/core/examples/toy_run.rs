//! Trains the selector on the synthetic toy corpus and reports how the two
//! populations were scored. Copy pairs are easy for the generator, so a
//! working selector should score them well below the templated pairs.
//!
//! cargo run --release -p sda-core --example toy_run -- [seed] [max_steps] [toml overrides]
//!
//! Overrides are TOML with `;` standing in for newlines, e.g.
//! `"[trainer.loss_weights];dpp=0.5"`.

use std::time::Instant;

use sda_core::config::RunConfig;
use sda_core::corpus::{build_vocab, Corpus, DialogPair, Split};
use sda_core::synth::{toy_corpus, COPY_PREFIX};
use sda_core::trainer::{score_pairs, train, StepKind, Trainer};

fn main() -> sda_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map(|s| s.parse().expect("seed")).unwrap_or(13);
    let max_steps = args.next();
    let mut cfg = match args.next() {
        Some(overrides) => RunConfig::from_toml_str(&overrides.replace(';', "\n"))?,
        None => RunConfig::default(),
    };
    cfg.seed = seed;
    cfg.trainer.log_every = 0;
    if let Some(m) = max_steps {
        cfg.trainer.max_steps = m.parse().expect("max steps");
    }
    let toy = toy_corpus(300, 200, seed);
    let corpus = Corpus {
        pairs: toy
            .iter()
            .map(|p| DialogPair::from_text(&p.id, &p.query, &p.response, cfg.corpus.max_len))
            .collect::<Result<_, _>>()?,
        split: Split::Train,
    };
    let vocab = build_vocab(&corpus, cfg.corpus.vocab_size)?;
    let pairs: Vec<_> = corpus.pairs.iter().map(|p| vocab.index_pair(p)).collect();
    let mut trainer = Trainer::new(&cfg, vocab.len());
    let start = Instant::now();
    let outcome = train(&mut trainer, &pairs, &cfg, |r| {
        if r.kind == StepKind::Generator && r.step % 120 == 0 {
            println!(
                "{:>6} {:>7.1}s gqd {:.3} rd {:.3} L_G {:.3} mle {:.3} mean_s {:.3}",
                r.step,
                start.elapsed().as_secs_f64(),
                r.losses.gqd_accuracy,
                r.losses.rd_accuracy,
                r.losses.l_g,
                r.losses.mle,
                r.losses.mean_score,
            );
        }
    })?;
    let scores = score_pairs(&trainer.models.encoder, &trainer.models.selector, &pairs)?;
    let mean = |copy: bool| {
        let xs: Vec<f64> = pairs
            .iter()
            .zip(&scores)
            .filter(|(p, _)| p.id.starts_with(COPY_PREFIX) == copy)
            .map(|(_, s)| *s)
            .collect();
        xs.iter().sum::<f64>() / xs.len() as f64
    };
    println!(
        "{} after {} steps in {:.1}s; window {:?}",
        outcome.convergence.reason(),
        outcome.steps,
        start.elapsed().as_secs_f64(),
        trainer.state.window_means(),
    );
    println!("mean score: templated {:.4}, copy {:.4}", mean(false), mean(true));
    Ok(())
}
