use std::time::Instant;

use attnalign_core::gradcheck::{decoder_step_check, grad_check};
use attnalign_core::model::{ModelConfig, ModelParams};
use attnalign_core::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-5;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()).unwrap()
}

/// Reduces any node to a scalar with fixed random weights so every
/// output entry gets a distinct cotangent.
fn project(t: &mut Tape<'_>, v: Var, seed: u64) -> Var {
    let w = t.leaf(random(t.value(v).shape(), seed), false);
    let p = t.mul(v, w);
    t.sum(p)
}

fn check<F>(name: &str, shape: &[usize], program: F)
where
    F: Fn(&mut Tape<'_>, Var) -> Result<Var>,
{
    let err = grad_check(program, &random(shape, 7), EPS).unwrap();
    assert!(err < TOL, "{name}: relative error {err}");
}

#[test]
fn matmul_both_sides() {
    check("matmul lhs", &[3, 4], |t, x| {
        let b = t.leaf(random(&[4, 2], 1), false);
        let y = t.matmul(x, b);
        Ok(project(t, y, 2))
    });
    check("matmul rhs", &[4, 2], |t, x| {
        let a = t.leaf(random(&[3, 4], 1), false);
        let y = t.matmul(a, x);
        Ok(project(t, y, 2))
    });
    check("matmul self", &[3, 3], |t, x| {
        let y = t.matmul(x, x);
        Ok(project(t, y, 2))
    });
}

#[test]
fn matmul_nt_both_sides() {
    check("matmul_nt lhs", &[3, 4], |t, x| {
        let b = t.leaf(random(&[5, 4], 1), false);
        let y = t.matmul_nt(x, b);
        Ok(project(t, y, 2))
    });
    check("matmul_nt rhs", &[5, 4], |t, x| {
        let a = t.leaf(random(&[3, 4], 1), false);
        let y = t.matmul_nt(a, x);
        Ok(project(t, y, 2))
    });
    check("matmul_nt self", &[3, 4], |t, x| {
        let y = t.matmul_nt(x, x);
        Ok(project(t, y, 2))
    });
}

#[test]
fn elementwise_ops() {
    check("add", &[2, 3], |t, x| {
        let b = t.leaf(random(&[2, 3], 1), false);
        let y = t.add(x, b);
        let y = t.add(y, x);
        Ok(project(t, y, 2))
    });
    check("add_row matrix", &[2, 3], |t, x| {
        let b = t.leaf(random(&[3], 1), false);
        let y = t.add_row(x, b);
        Ok(project(t, y, 2))
    });
    check("add_row bias", &[3], |t, x| {
        let a = t.leaf(random(&[4, 3], 1), false);
        let y = t.add_row(a, x);
        Ok(project(t, y, 2))
    });
    check("mul", &[2, 3], |t, x| {
        let b = t.leaf(random(&[2, 3], 1), false);
        let y = t.mul(x, b);
        let y = t.mul(y, x);
        Ok(project(t, y, 2))
    });
    check("mul_const", &[2, 3], |t, x| {
        let y = t.mul_const(x, vec![0.0, 2.0, 1.0, -1.0, 0.5, 3.0]);
        Ok(project(t, y, 2))
    });
    check("scale", &[2, 3], |t, x| {
        let y = t.scale(x, -1.7);
        Ok(project(t, y, 2))
    });
    check("relu", &[3, 3], |t, x| {
        let y = t.relu(x);
        Ok(project(t, y, 2))
    });
}

#[test]
fn structural_ops() {
    check("concat_cols", &[2, 3], |t, x| {
        let b = t.leaf(random(&[2, 1], 1), false);
        let y = t.concat_cols(&[x, b, x]);
        Ok(project(t, y, 2))
    });
    check("slice_cols", &[3, 5], |t, x| {
        let y = t.slice_cols(x, 1, 3);
        Ok(project(t, y, 2))
    });
    check("gather", &[4, 3], |t, x| {
        let y = t.gather(x, &[2, 0, 2, 3]);
        Ok(project(t, y, 2))
    });
    check("pick", &[3, 4], |t, x| {
        let y = t.pick(x, &[1, 3, 1]);
        Ok(project(t, y, 2))
    });
    check("sum", &[2, 2], |t, x| {
        let y = t.sum(x);
        let z = t.mul(y, y);
        Ok(t.sum(z))
    });
}

#[test]
fn normalizing_ops() {
    check("softmax", &[3, 4], |t, x| {
        let y = t.softmax(x);
        Ok(project(t, y, 2))
    });
    check("causal_softmax", &[4, 4], |t, x| {
        let y = t.causal_softmax(x);
        Ok(project(t, y, 2))
    });
    check("log_softmax", &[3, 4], |t, x| {
        let y = t.log_softmax(x);
        Ok(project(t, y, 2))
    });
    check("cross_entropy", &[3, 5], |t, x| Ok(t.cross_entropy(x, &[0, 4, 2])));
    check("layer_norm input", &[3, 4], |t, x| {
        let g = t.leaf(random(&[4], 1), false);
        let b = t.leaf(random(&[4], 3), false);
        let y = t.layer_norm(x, g, b);
        Ok(project(t, y, 2))
    });
    check("layer_norm gain", &[4], |t, x| {
        let a = t.leaf(random(&[3, 4], 1), false);
        let b = t.leaf(random(&[4], 3), false);
        let y = t.layer_norm(a, x, b);
        Ok(project(t, y, 2))
    });
    check("layer_norm bias", &[4], |t, x| {
        let a = t.leaf(random(&[3, 4], 1), false);
        let g = t.leaf(random(&[4], 3), false);
        let y = t.layer_norm(a, g, x);
        Ok(project(t, y, 2))
    });
}

fn small_config() -> ModelConfig {
    ModelConfig {
        encoder_layers: 1,
        decoder_layers: 2,
        heads: 2,
        d_model: 8,
        d_ff: 12,
        src_vocab: 7,
        tgt_vocab: 6,
        max_len: 16,
        eos_id: 0,
        dropout: 0.0,
    }
}

#[test]
fn decoder_step_log_probability_against_every_parameter() {
    let started = Instant::now();
    let params = ModelParams::init(small_config(), &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    // key biases have structurally zero gradients; the floor absorbs round-off
    let check = decoder_step_check(&params, &[3, 5, 2, 0], &[0, 4, 1, 3, 0], 2, 1e-4, 1e-6).unwrap();
    assert_eq!(check.checked, params.parameter_count());
    assert!(check.max_relative_error < 1e-4, "{check:?}");
    assert!(started.elapsed().as_secs() < 60);
}

#[test]
fn decoder_step_check_rejects_out_of_range_step() {
    let params = ModelParams::init(small_config(), &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    assert!(decoder_step_check(&params, &[3, 0], &[0, 4, 0], 2, 1e-4, 1e-6).is_err());
}
