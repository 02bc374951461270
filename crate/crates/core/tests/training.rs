use attnalign_core::corpus::{generate_corpus, CorpusSpec};
use attnalign_core::model::{greedy_decode, ModelConfig};
use attnalign_core::train::{evaluate, train, Control, TrainConfig};
use attnalign_core::Sequential;

fn small(src_vocab: usize, tgt_vocab: usize) -> ModelConfig {
    ModelConfig { encoder_layers: 1, decoder_layers: 1, heads: 2, d_model: 16, d_ff: 32, ..ModelConfig::desk(src_vocab, tgt_vocab) }
}

#[test]
fn memorizes_one_sentence() {
    let c = generate_corpus(&CorpusSpec { sentences: 1, seed: 11, ..CorpusSpec::default() }).unwrap();
    let config = TrainConfig {
        learning_rate: 1e-2,
        warmup_steps: 10,
        batch_size: 1,
        max_epochs: 400,
        dropout: 0.0,
        dev_size: 0,
        seed: 1,
        ..TrainConfig::default()
    };
    let out = train(small(c.source_vocab.len(), c.target_vocab.len()), &config, &c.examples, &Sequential, |m, _, _| {
        if m.train_loss < 1e-3 {
            Control::Stop
        } else {
            Control::Continue
        }
    })
    .unwrap();
    let dev = evaluate(&out.last, &c.examples, &Sequential).unwrap();
    assert!(dev.cross_entropy < 0.01, "loss {}", dev.cross_entropy);
    assert_eq!(dev.token_accuracy, 1.0);
}

#[test]
fn equal_seeds_give_identical_logs() {
    let c = generate_corpus(&CorpusSpec { sentences: 60, seed: 12, ..CorpusSpec::default() }).unwrap();
    let config = TrainConfig { max_epochs: 3, batch_size: 8, dev_size: 10, seed: 4, ..TrainConfig::default() };
    let model = small(c.source_vocab.len(), c.target_vocab.len());
    let run = || train(model.clone(), &config, &c.examples, &Sequential, |_, _, _| Control::Continue).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.log, b.log);
    assert_eq!(a.last, b.last);
    assert_eq!(a.log.len(), 3);
    let other = train(model, &TrainConfig { seed: 5, ..config.clone() }, &c.examples, &Sequential, |_, _, _| Control::Continue)
        .unwrap();
    assert_ne!(other.log, a.log);

    for (i, m) in a.log.iter().enumerate() {
        assert_eq!(m.epoch, i + 1);
        assert_eq!(m.sentences_seen, 50 * (i as u64 + 1));
        assert_eq!(m.steps, 7 * (i as u64 + 1));
    }
    let best = a.log.iter().filter(|m| m.best).last().unwrap();
    let best_ce = a.log.iter().map(|m| m.dev_cross_entropy).fold(f64::INFINITY, f64::min);
    assert_eq!(best.dev_cross_entropy, best_ce);
    let dev = evaluate(&a.best, &c.examples[50..], &Sequential).unwrap();
    assert_eq!(dev.cross_entropy, best_ce);
}

#[test]
fn desk_model_learns_the_copy_task() {
    let c = generate_corpus(&CorpusSpec::copy_task(5000, 13)).unwrap();
    let config = TrainConfig {
        learning_rate: 4e-3,
        batch_size: 32,
        max_epochs: 10,
        seed: 13,
        target_accuracy: Some(0.99),
        ..TrainConfig::default()
    };
    let model = ModelConfig::desk(c.source_vocab.len(), c.target_vocab.len());
    let out = train(model, &config, &c.examples, &Sequential, |_, _, _| Control::Continue).unwrap();
    let last = out.log.last().unwrap();
    assert!(last.dev_token_accuracy >= 0.99, "{:?}", out.log);
    assert!(out.log.len() <= 10);

    let dev = &c.examples[4500..];
    // token accuracy counts argmax predictions that equal the reference
    let metrics = evaluate(&out.last, dev, &Sequential).unwrap();
    assert!(metrics.token_accuracy >= 0.99);

    let short = dev.iter().find(|e| e.target.len() == 3).unwrap();
    let mut expected = short.target.clone();
    expected.push(0);
    assert_eq!(greedy_decode(&out.last, &short.source, 20).unwrap(), expected);
}
