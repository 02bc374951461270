//! Acceptance run: one `[PASS]`/`[FAIL]` line per criterion.

mod common;

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use attnalign::analysis::{analyze, AnalysisOptions, SeedAnalysis};
use attnalign::exec::Rayon;
use attnalign_core::alignment::{aer, Setting, WeightingMode};
use attnalign_core::attribution::{
    perturb_embeddings, prefix_saliency, sample_probabilities, source_contributions, source_saliency,
    target_contributions, PerturbationConfig, Side,
};
use attnalign_core::corpus::{generate_corpus, CorpusSpec, GeneratedCorpus, GoldAlignment, Link, ParallelExample};
use attnalign_core::gradcheck::decoder_step_check;
use attnalign_core::model::{embedding_rows, ModelConfig, ModelParams, PassOptions, TracedPass};
use attnalign_core::train::{split_dev, train, Control, TrainConfig};
use attnalign_core::{Sequential, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [1, 2, 3];
/// Criteria expected to fail at desk scale; see the decisions ledger.
const KNOWN_UNATTAINABLE: &[u32] = &[8];

const GRAD_TOL: f64 = 1e-4;
const GRAD_EPS: f64 = 1e-4;
const GRAD_FLOOR: f64 = 1e-6;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const AER_CASES: usize = 1000;
const ESTIMATOR_TOL: f64 = 1e-12;
const NOISE_DRAWS: usize = 100_000;
const NOISE_REL_TOL: f64 = 0.02;
const HEAD_SUM_TOL: f64 = 1e-9;
const DESK_SENTENCES: usize = 5000;
const DESK_VOCAB: usize = 200;
const DESK_ACCURACY: f64 = 0.95;
const DESK_BUDGET: Duration = Duration::from_secs(15 * 60);
const DESK_AER: f64 = 0.25;
const RATE_TOL: f64 = 0.03;
const SPEARMAN_MIN: f64 = 0.2;

struct Outcome {
    id: u32,
    pass: bool,
    detail: String,
}

fn outcome(id: u32, pass: bool, detail: impl Into<String>) -> Outcome {
    let o = Outcome { id, pass, detail: detail.into() };
    println!("[{}] {} {}", if o.pass { "PASS" } else { "FAIL" }, o.id, o.detail);
    o
}

fn gradient() -> Outcome {
    let config = ModelConfig {
        encoder_layers: 1,
        decoder_layers: 2,
        heads: 2,
        d_model: 8,
        d_ff: 12,
        src_vocab: 9,
        tgt_vocab: 7,
        max_len: 16,
        eos_id: 0,
        dropout: 0.0,
    };
    let started = Instant::now();
    let params = ModelParams::init(config, &mut ChaCha8Rng::seed_from_u64(101)).unwrap();
    let check = decoder_step_check(&params, &[4, 8, 2, 6, 0], &[0, 3, 5, 1, 6, 0], 3, GRAD_EPS, GRAD_FLOOR).unwrap();
    let elapsed = started.elapsed();
    let pass = check.max_relative_error < GRAD_TOL && elapsed < GRAD_BUDGET && check.checked == params.parameter_count();
    outcome(
        1,
        pass,
        format!(
            "decoder-step grad check: max rel err {:.2e} < {GRAD_TOL:e} at {} ({} entries, eps {GRAD_EPS:e}) in {:.1}s",
            check.max_relative_error,
            check.worst,
            check.checked,
            elapsed.as_secs_f64()
        ),
    )
}

/// AER by enumerating the grid and counting memberships.
fn brute_aer(a: &BTreeSet<(usize, usize)>, s: &BTreeSet<(usize, usize)>, p: &BTreeSet<(usize, usize)>) -> f64 {
    let (mut a_s, mut a_p) = (0usize, 0usize);
    for i in 0..6 {
        for j in 0..6 {
            if a.contains(&(i, j)) {
                a_s += usize::from(s.contains(&(i, j)));
                a_p += usize::from(p.contains(&(i, j)) || s.contains(&(i, j)));
            }
        }
    }
    let den = a.len() + s.len();
    if den == 0 {
        0.0
    } else {
        1.0 - (a_s + a_p) as f64 / den as f64
    }
}

fn aer_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let set = |rng: &mut ChaCha8Rng, n: usize, m: usize| -> BTreeSet<(usize, usize)> {
        let k = rng.random_range(0..=n * m);
        (0..k).map(|_| (rng.random_range(0..n), rng.random_range(0..m))).collect()
    };
    let mut mismatches = 0;
    for _ in 0..AER_CASES {
        let (n, m) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let (a, s, p) = (set(&mut rng, n, m), set(&mut rng, n, m), set(&mut rng, n, m));
        let links = |x: &BTreeSet<(usize, usize)>| x.iter().map(|&(i, j)| Link::new(i, j)).collect::<BTreeSet<_>>();
        let gold = GoldAlignment::new(links(&s), links(&p));
        if aer(&links(&a), &gold).aer != brute_aer(&a, &s, &p) {
            mismatches += 1;
        }
    }
    let l = |pairs: &[(usize, usize)]| pairs.iter().map(|&(i, j)| Link::new(i, j)).collect::<BTreeSet<_>>();
    let hand = [
        aer(&l(&[(0, 1)]), &GoldAlignment::new(l(&[(0, 0)]), l(&[(0, 0)]))).aer == 1.0,
        aer(&l(&[(0, 0), (1, 1)]), &GoldAlignment::new(l(&[(0, 0)]), l(&[(0, 0), (1, 1)]))).aer == 0.0,
        aer(&l(&[(0, 0), (2, 1)]), &GoldAlignment::new(l(&[(0, 0), (2, 1)]), l(&[(0, 0), (2, 1)]))).aer == 0.0,
    ];
    let hand_ok = hand.iter().filter(|&&h| h).count();
    outcome(
        2,
        mismatches == 0 && hand_ok == hand.len(),
        format!("AER vs brute force: {mismatches}/{AER_CASES} mismatches; hand cases {hand_ok}/{} exact", hand.len()),
    )
}

fn two_pass_variance(col: &[f64]) -> f64 {
    let n = col.len() as f64;
    let mean = col.iter().sum::<f64>() / n;
    col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

/// Row norms of `∂P(y_t)/∂e` for each step, straight from the tape.
fn gradient_norms(params: &ModelParams, ex: &ParallelExample, side: Side) -> Vec<Vec<f64>> {
    let tgt = ex.framed_target(0);
    let opts = PassOptions {
        embeddings_require_grad: true,
        src_embeddings: Some(embedding_rows(&params.weights.src_embed, &ex.source).unwrap()),
        tgt_embeddings: Some(embedding_rows(&params.weights.tgt_embed, &tgt[..tgt.len() - 1]).unwrap()),
        ..PassOptions::default()
    };
    let mut pass = TracedPass::run(params, &ex.source, &tgt, opts).unwrap();
    let lp = pass.reference_log_probs();
    let values = pass.tape.value(lp).data().to_vec();
    let leaf = if side == Side::Source { pass.src_embed } else { pass.tgt_embed };
    (0..values.len())
        .map(|k| {
            let mut seed = vec![0.0; values.len()];
            seed[k] = values[k].exp();
            pass.tape.backward(lp, &Tensor::vector(seed).unwrap()).unwrap().get_or_zeros(&pass.tape, leaf).row_norms()
        })
        .collect()
}

fn estimators() -> Outcome {
    let spec = CorpusSpec { sentences: 10, max_words: 6, seed: 5, ..CorpusSpec::default() };
    let corpus = generate_corpus(&spec).unwrap();
    let config = ModelConfig {
        encoder_layers: 1,
        decoder_layers: 2,
        heads: 2,
        d_model: 12,
        d_ff: 16,
        dropout: 0.0,
        ..ModelConfig::desk(corpus.source_vocab.len(), corpus.target_vocab.len())
    };
    let params = ModelParams::init(config, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let ex = corpus.examples.iter().max_by_key(|e| e.target.len()).unwrap();

    let cfg = PerturbationConfig { lambda: 0.05, samples: 16, seed: 8 };
    let mut variance_err: f64 = 0.0;
    for side in [Side::Source, Side::Target] {
        let (samples, _) = sample_probabilities(&params, ex, side, &cfg, None, &Sequential).unwrap();
        let got = match side {
            Side::Source => source_contributions(&params, ex, &cfg, &Sequential).unwrap(),
            Side::Target => target_contributions(&params, ex, &cfg, &Sequential).unwrap(),
        };
        for (t, c) in got.iter().enumerate() {
            let col: Vec<f64> = samples.iter().map(|s| s[t]).collect();
            variance_err = variance_err.max((c - two_pass_variance(&col)).abs());
        }
    }

    let plain = PerturbationConfig { lambda: 0.0, samples: 1, seed: 0 };
    let psi = prefix_saliency(&params, ex, &plain, &Sequential).unwrap();
    let sal = source_saliency(&params, ex, &plain, &Sequential).unwrap();
    let (direct_t, direct_s) = (gradient_norms(&params, ex, Side::Target), gradient_norms(&params, ex, Side::Source));
    let mut saliency_err: f64 = 0.0;
    for t in 1..psi.cols() {
        for i in 0..t {
            saliency_err = saliency_err.max((psi.get2(i, t) - direct_t[t - 1][i]).abs());
        }
        for j in 0..ex.source.len() {
            saliency_err = saliency_err.max((sal.get2(j, t) - direct_s[t - 1][j]).abs());
        }
    }

    let x = [0.8, -1.1, 0.3, 0.0, 2.0];
    let lambda = 0.01;
    let sigma = lambda * x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let e = Tensor::matrix(1, x.len(), x.to_vec()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut cols = vec![Vec::with_capacity(NOISE_DRAWS); x.len()];
    for _ in 0..NOISE_DRAWS {
        let p = perturb_embeddings(&e, lambda, &mut rng);
        for ((col, v), c) in cols.iter_mut().zip(p.embeddings.data()).zip(&x) {
            col.push(v - c);
        }
    }
    let noise_err = cols.iter().map(|c| (two_pass_variance(c).sqrt() / sigma - 1.0).abs()).fold(0.0, f64::max);

    outcome(
        3,
        variance_err <= ESTIMATOR_TOL && saliency_err <= ESTIMATOR_TOL && noise_err < NOISE_REL_TOL,
        format!(
            "C_S/C_T vs two-pass variance {variance_err:.1e}, psi (N=1, lambda=0) vs gradient norms {saliency_err:.1e} \
             (tol {ESTIMATOR_TOL:e}); noise std rel err {:.2}% < {}% at {NOISE_DRAWS} draws",
            100.0 * noise_err,
            100.0 * NOISE_REL_TOL
        ),
    )
}

struct SeedRun {
    seed: u64,
    corpus: GeneratedCorpus,
    train_time: Duration,
    dev_accuracy: f64,
    epochs: usize,
    analysis: SeedAnalysis,
    analysis_time: Duration,
}

fn desk_corpus_spec(seed: u64) -> CorpusSpec {
    CorpusSpec { sentences: DESK_SENTENCES, max_vocab: DESK_VOCAB, reorder_window: 2, split_prob: 0.1, prefix_only_rate: 0.1, seed, ..CorpusSpec::default() }
}

fn desk_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 4e-3,
        batch_size: 32,
        max_epochs: 10,
        dev_size: 500,
        seed,
        target_accuracy: Some(0.96),
        ..TrainConfig::default()
    }
}

fn run_seed(seed: u64) -> SeedRun {
    let corpus = generate_corpus(&desk_corpus_spec(seed)).unwrap();
    let config = desk_train_config(seed);
    let model = ModelConfig::desk(corpus.source_vocab.len(), corpus.target_vocab.len());
    let started = Instant::now();
    let out = train(model, &config, &corpus.examples, &Rayon, |m, _, _| {
        eprintln!("  seed {seed} epoch {} dev acc {:.4} ({:.0}s)", m.epoch, m.dev_token_accuracy, started.elapsed().as_secs_f64());
        Control::Continue
    })
    .unwrap_or_else(|f| panic!("seed {seed} training failed: {}", f.error));
    let train_time = started.elapsed();
    let last = out.log.last().unwrap();
    let (_, dev) = split_dev(&corpus.examples, config.dev_size);
    let opts = AnalysisOptions {
        perturbation: PerturbationConfig { seed, ..PerturbationConfig::default() },
        ..AnalysisOptions::default()
    };
    let started = Instant::now();
    let (_, analysis) = analyze(&out.last, dev, &opts, &Rayon).unwrap();
    let analysis_time = started.elapsed();
    eprintln!("  seed {seed} analysis {:.0}s", analysis_time.as_secs_f64());
    SeedRun {
        seed,
        dev_accuracy: last.dev_token_accuracy,
        epochs: last.epoch,
        corpus,
        train_time,
        analysis,
        analysis_time,
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn masking(runs: &[SeedRun]) -> Outcome {
    let links: usize = runs.iter().map(|r| r.analysis.masked_finalizing_links).sum();
    let sentences: usize = runs.iter().map(|r| r.analysis.sentences).sum();
    let mut lines = Vec::new();
    let mut direction = true;
    for setting in [Setting::DecoderOutput, Setting::DecoderInput] {
        for weighting in [WeightingMode::Average, WeightingMode::HeadImportance] {
            let plain = mean(runs.iter().map(|r| r.analysis.best_aer(setting, weighting, false)));
            let masked = mean(runs.iter().map(|r| r.analysis.best_aer(setting, weighting, true)));
            direction &= masked <= plain;
            lines.push(format!("{setting:?}/{weighting:?} {plain:.4} -> {masked:.4}"));
        }
    }
    outcome(
        4,
        links == 0 && direction,
        format!(
            "{links} finalizing links in masked alignments over {sentences} dev sentences x {} seeds' layers; \
             mean best-layer AER unmasked -> masked: {}",
            runs.len(),
            lines.join(", ")
        ),
    )
}

fn head_importance(runs: &[SeedRun]) -> Outcome {
    let worst = runs.iter().map(|r| r.analysis.head_importance.max_sum_error).fold(0.0, f64::max);
    let positions: usize = runs.iter().map(|r| r.analysis.head_importance.positions).sum();
    let degenerate: usize = runs.iter().map(|r| r.analysis.head_importance.degenerate_positions).sum();
    let per_seed: Vec<String> = runs
        .iter()
        .map(|r| {
            let avg = r.analysis.best_aer(Setting::DecoderInput, WeightingMode::Average, false);
            let hi = r.analysis.best_aer(Setting::DecoderInput, WeightingMode::HeadImportance, false);
            format!("seed {} HI {hi:.4} vs avg {avg:.4}", r.seed)
        })
        .collect();
    let better = runs
        .iter()
        .filter(|r| {
            r.analysis.best_aer(Setting::DecoderInput, WeightingMode::HeadImportance, false)
                <= r.analysis.best_aer(Setting::DecoderInput, WeightingMode::Average, false)
        })
        .count();
    // the sum identity gates; the AER direction is reported only
    outcome(
        5,
        worst <= HEAD_SUM_TOL,
        format!(
            "C_h sums to 1 within {worst:.1e} (tol {HEAD_SUM_TOL:e}) at {positions} steps, {degenerate} degenerate; \
             decoder-input HI <= avg on {better}/{} seeds (reported): {}",
            runs.len(),
            per_seed.join(", ")
        ),
    )
}

fn desk_run(runs: &[SeedRun]) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for r in runs {
        let c = &r.corpus;
        let vocab = c.source_vocab.len().max(c.target_vocab.len());
        let content = |ex: &ParallelExample| -> BTreeSet<usize> {
            ex.target_tags.iter().filter(|t| !t.prefix_only).map(|t| t.word).collect()
        };
        let words: usize = c.examples.iter().map(|e| content(e).len()).sum();
        let split: usize = c
            .examples
            .iter()
            .map(|e| e.target_tags.iter().filter(|t| t.subword_tail).map(|t| t.word).collect::<BTreeSet<_>>().len())
            .sum();
        let prefix_only: usize = c.examples.iter().map(|e| e.target_tags.iter().filter(|t| t.prefix_only).count()).sum();
        let tokens: usize = c.examples.iter().map(|e| e.target.len()).sum();
        let split_rate = split as f64 / words as f64;
        let prefix_rate = prefix_only as f64 / tokens as f64;
        let aer = r.analysis.best_aer(Setting::DecoderOutput, WeightingMode::Average, false);
        let seed_ok = c.examples.len() == DESK_SENTENCES
            && vocab <= DESK_VOCAB
            && c.spec.reorder_window == 2
            && (split_rate - 0.1).abs() <= RATE_TOL
            && (prefix_rate - 0.1).abs() <= RATE_TOL
            && r.dev_accuracy >= DESK_ACCURACY
            && r.train_time <= DESK_BUDGET
            && aer <= DESK_AER;
        ok &= seed_ok;
        parts.push(format!(
            "seed {}: vocab {vocab}, splits {:.1}%, prefix-only {:.1}%, dev acc {:.4} after {} epochs in {:.0}s, best-layer AER {aer:.4}",
            r.seed,
            100.0 * split_rate,
            100.0 * prefix_rate,
            r.dev_accuracy,
            r.epochs,
            r.train_time.as_secs_f64()
        ));
    }
    outcome(
        6,
        ok,
        format!(
            "{DESK_SENTENCES} sentences, 2+2 layers, 4 heads; need acc >= {DESK_ACCURACY} within {}s and AER <= {DESK_AER}: {}",
            DESK_BUDGET.as_secs(),
            parts.join("; ")
        ),
    )
}

fn correlation(runs: &[SeedRun]) -> Outcome {
    let rhos: Vec<f64> = runs.iter().map(|r| r.analysis.correlation.spearman.unwrap_or(f64::NAN)).collect();
    let avg = mean(rhos.iter().copied());
    let timings: Vec<String> = runs.iter().map(|r| format!("{:.0}s", r.analysis_time.as_secs_f64())).collect();
    outcome(
        7,
        avg > SPEARMAN_MIN,
        format!(
            "Spearman(finalizing mass, target share) per seed {:?}, mean {avg:.3} > {SPEARMAN_MIN} ({} sentences per seed; analysis {})",
            rhos.iter().map(|r| (r * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            runs[0].analysis.correlation.sentences,
            timings.join("/")
        ),
    )
}

fn probe(runs: &[SeedRun]) -> Outcome {
    let majority = runs.iter().filter(|r| r.analysis.min_norm.is_majority()).count();
    let parts: Vec<String> = runs
        .iter()
        .map(|r| {
            let m = &r.analysis.min_norm;
            format!("seed {} L{}H{} {}/{}", r.seed, m.layer, m.head, m.finalizing, m.sentences)
        })
        .collect();
    outcome(
        8,
        majority >= 2,
        format!("min-norm source token of the best head is finalizing on a majority in {majority}/3 seeds: {}", parts.join(", ")),
    )
}

fn determinism() -> Outcome {
    let scratch = tempfile::tempdir().unwrap();
    match common::pipeline_is_deterministic(scratch.path()) {
        Ok(files) => outcome(9, true, format!("{} subcommand runs repeated: {files} output files byte-identical", common::PIPELINE.len())),
        Err(e) => outcome(9, false, format!("rerun differs: {e}")),
    }
}

fn main() -> ExitCode {
    let started = Instant::now();
    let mut outcomes = vec![gradient(), aer_oracle(), estimators()];
    let runs: Vec<SeedRun> = SEEDS.iter().map(|&s| run_seed(s)).collect();
    outcomes.push(masking(&runs));
    outcomes.push(head_importance(&runs));
    outcomes.push(desk_run(&runs));
    outcomes.push(correlation(&runs));
    outcomes.push(probe(&runs));
    outcomes.push(determinism());
    outcomes.sort_by_key(|o| o.id);

    let failed: Vec<u32> = outcomes.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    let unexpected: Vec<u32> = failed.iter().copied().filter(|id| !KNOWN_UNATTAINABLE.contains(id)).collect();
    println!(
        "acceptance: {}/{} passed; failed {failed:?} (known unattainable {KNOWN_UNATTAINABLE:?}); {:.0}s",
        outcomes.len() - failed.len(),
        outcomes.len(),
        started.elapsed().as_secs_f64()
    );
    if unexpected.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
