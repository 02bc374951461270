use attnalign_core::model::{
    attention_head, encode, forward_teacher_forced, greedy_decode, ModelConfig, ModelParams, PassOptions, TracedPass,
};
use attnalign_core::{Error, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn config() -> ModelConfig {
    ModelConfig {
        encoder_layers: 2,
        decoder_layers: 2,
        heads: 2,
        d_model: 8,
        d_ff: 16,
        src_vocab: 9,
        tgt_vocab: 9,
        max_len: 12,
        eos_id: 0,
        dropout: 0.0,
    }
}

fn params(seed: u64) -> ModelParams {
    ModelParams::init(config(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn evaluate_examples() {
    let mut t = Tape::new();
    let a = t.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap(), false);
    let i = t.leaf(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(), false);
    let p = t.matmul(a, i);
    assert_eq!(t.value(p).data(), [1.0, 2.0, 3.0, 4.0]);

    let z = t.leaf(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap(), false);
    let s = t.softmax(z);
    assert_eq!(t.value(s).data(), [0.5, 0.5]);

    let confident = t.leaf(Tensor::matrix(1, 3, vec![0.0, 800.0, 0.0]).unwrap(), false);
    let ce = t.cross_entropy(confident, &[1]);
    assert_eq!(t.value(ce).data(), [0.0]);
}

#[test]
fn backward_examples() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap(), true);
    let sq = t.mul(x, x);
    let f = t.sum(sq);
    assert_eq!(t.backward_scalar(f).unwrap().get_or_zeros(&t, x).data(), [2.0, 4.0]);

    let mut t = Tape::new();
    let x = t.leaf(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap(), true);
    let s = t.softmax(x);
    let g = t.backward(s, &Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap()).unwrap();
    let g = g.get_or_zeros(&t, x);
    assert!((g.data()[0] - 0.5).abs() < 1e-15 && (g.data()[1] + 0.5).abs() < 1e-15);

    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap(), true);
    let c = t.leaf(Tensor::vector(vec![3.0, 4.0]).unwrap(), false);
    let f = t.sum(c);
    assert_eq!(t.backward_scalar(f).unwrap().get_or_zeros(&t, x).data(), [0.0, 0.0]);
}

#[test]
fn backward_rejects_mismatched_seed() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap(), true);
    let y = t.scale(x, 2.0);
    assert!(matches!(t.backward(y, &Tensor::vector(vec![1.0]).unwrap()), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn attention_head_examples() {
    let v = Tensor::matrix(1, 2, vec![0.3, -0.4]).unwrap();
    let (z, a) = attention_head(&Tensor::vector(vec![1.0, 2.0]).unwrap(), &Tensor::matrix(1, 2, vec![5.0, 1.0]).unwrap(), &v).unwrap();
    assert_eq!(a.data(), [1.0]);
    assert_eq!(z.data(), v.data());

    let keys = Tensor::matrix(3, 2, vec![0.0, 1.0, 0.0, -2.0, 0.0, 5.0]).unwrap();
    let vals = Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
    let (_, a) = attention_head(&Tensor::vector(vec![1.0, 0.0]).unwrap(), &keys, &vals).unwrap();
    for x in a.data() {
        assert!((x - 1.0 / 3.0).abs() < 1e-15);
    }

    // q·k_1 / √2 = ln 3
    let k1 = 3f64.ln() * 2f64.sqrt();
    let keys = Tensor::matrix(3, 2, vec![k1, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    let (z, a) = attention_head(&Tensor::vector(vec![1.0, 0.0]).unwrap(), &keys, &vals).unwrap();
    for (x, want) in a.data().iter().zip([0.6, 0.2, 0.2]) {
        assert!((x - want).abs() < 1e-12, "{:?}", a.data());
    }
    assert!((z.data()[0] - (0.6 + 0.4 + 0.6)).abs() < 1e-12);
}

#[test]
fn encode_shapes_and_determinism() {
    let p = params(1);
    let e = encode(&p, &[0]).unwrap();
    assert_eq!(e.shape(), [1, 8]);
    let a = encode(&p, &[3, 4, 5, 6, 0]).unwrap();
    let b = encode(&p, &[3, 4, 5, 6, 0]).unwrap();
    assert_eq!(a, b);
}

#[test]
fn positions_matter() {
    let p = params(2);
    let a = encode(&p, &[3, 4, 5, 6, 0]).unwrap();
    let b = encode(&p, &[5, 4, 3, 6, 0]).unwrap();
    assert_ne!(a.row(0), b.row(0));
    assert_ne!(a.row(2), b.row(2));
    // the swapped tokens do not simply trade places
    assert_ne!(a.row(0), b.row(2));
}

#[test]
fn encode_errors() {
    let p = params(1);
    assert!(matches!(encode(&p, &[3, 99, 0]), Err(Error::OutOfVocab { id: 99, .. })));
    assert!(encode(&p, &[3; 13]).is_err());
    assert!(encode(&p, &[]).is_err());
}

#[test]
fn later_target_tokens_do_not_change_earlier_steps() {
    let p = params(3);
    let src = [3, 4, 5, 0];
    let a = forward_teacher_forced(&p, &src, &[0, 2, 3, 4, 5, 0]).unwrap();
    for t in 1..5 {
        let mut tgt = vec![0, 2, 3, 4, 5, 0];
        tgt[t] = 7;
        let b = forward_teacher_forced(&p, &src, &tgt).unwrap();
        // step t - 1 predicts tgt[t]; earlier steps never see it
        assert_eq!(a.log_probs[..t - 1], b.log_probs[..t - 1]);
        for l in 0..2 {
            for h in 0..2 {
                for r in 0..t {
                    assert_eq!(a.record.layers[l].weights[h].row(r), b.record.layers[l].weights[h].row(r));
                }
            }
        }
    }
}

#[test]
fn records_are_complete_and_consistent() {
    let p = params(4);
    let out = forward_teacher_forced(&p, &[3, 4, 5, 2, 0], &[0, 6, 7, 0]).unwrap();
    assert!(out.log_probs.iter().all(|&lp| lp <= 0.0));
    let r = &out.record;
    assert_eq!(r.layers.len(), 2);
    for layer in &r.layers {
        assert_eq!(layer.weights.len(), 2);
        for (w, norms) in layer.weights.iter().zip(&layer.value_norms) {
            assert_eq!(w.shape(), [3, 5]);
            assert_eq!(norms.len(), 5);
            for row in 0..3 {
                assert!((w.row(row).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(w.row(row).iter().all(|&x| x >= 0.0));
            }
        }
        assert_eq!(layer.output_norms.len(), 3);
    }
    assert!(r.reconstruction_error(&p) < 1e-10);
}

#[test]
fn log_probs_form_distributions() {
    let p = params(5);
    let mut pass = TracedPass::run(&p, &[3, 4, 0], &[0, 5, 6, 0], PassOptions::default()).unwrap();
    let lp = pass.tape.log_softmax(pass.logits);
    let lp = pass.tape.value(lp);
    for r in 0..lp.rows() {
        assert!(lp.row(r).iter().all(|&x| x <= 0.0));
        assert!((lp.row(r).iter().map(|x| x.exp()).sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn untrained_decoding_terminates() {
    let p = params(6);
    let out = greedy_decode(&p, &[3, 4, 0], 7).unwrap();
    assert!(!out.is_empty() && out.len() <= 7);
    assert_eq!(out, greedy_decode(&p, &[3, 4, 0], 7).unwrap());
    assert!(greedy_decode(&p, &[0], 5).unwrap().len() <= 5);
}
