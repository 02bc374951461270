//! Central-difference validation of tape gradients.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{ModelParams, PassOptions, TracedPass};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Compares the tape gradient of a scalar program against central
/// differences at `point` and returns the largest relative error
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
///
/// `program` receives a fresh tape and the input leaf and must return a
/// scalar node.
pub fn grad_check<F>(program: F, point: &Tensor, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, Var) -> Result<Var>,
{
    assert!(epsilon > 0.0, "grad_check epsilon must be positive");
    let analytic = {
        let mut tape = Tape::new();
        let x = tape.leaf(point.clone(), true);
        let out = program(&mut tape, x)?;
        tape.check_finite(out)?;
        tape.backward_scalar(out)?.get_or_zeros(&tape, x)
    };
    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(point.shape().to_vec(), data)?, false);
        let out = program(&mut tape, x)?;
        tape.check_finite(out)?;
        Ok(tape.value(out).data()[0])
    };
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let mut plus = point.data().to_vec();
        let mut minus = plus.clone();
        plus[i] += epsilon;
        minus[i] -= epsilon;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * epsilon);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Worst entry of a whole-model gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheck {
    pub max_relative_error: f64,
    /// `name[index]` of the worst parameter entry.
    pub worst: String,
    pub checked: usize,
}

fn step_log_prob(params: &ModelParams, src: &[usize], tgt: &[usize], step: usize) -> Result<f64> {
    let mut pass = TracedPass::run(params, src, tgt, PassOptions::default())?;
    let lp = pass.reference_log_probs();
    pass.tape.check_finite(lp)?;
    Ok(pass.tape.value(lp).data()[step])
}

/// Checks `∂ log P(y_{step+1} | y_≤step, x) / ∂θ` for every parameter entry
/// against central differences. Relative errors use the denominator
/// `max(|analytic|, |numeric|, floor)`.
pub fn decoder_step_check(
    params: &ModelParams,
    src: &[usize],
    tgt: &[usize],
    step: usize,
    epsilon: f64,
    floor: f64,
) -> Result<ModelCheck> {
    if step + 1 >= tgt.len() {
        return Err(Error::InvalidConfig(alloc::format!("step {step} outside a target of length {}", tgt.len())));
    }
    let mut pass = TracedPass::run(params, src, tgt, PassOptions { params_require_grad: true, ..PassOptions::default() })?;
    let lp = pass.reference_log_probs();
    let mut seed = vec![0.0; tgt.len() - 1];
    seed[step] = 1.0;
    let grads = pass.tape.backward(lp, &Tensor::vector(seed)?)?;
    let analytic: BTreeMap<String, Tensor> =
        pass.weights.named().into_iter().map(|(name, &v)| (name, grads.get_or_zeros(&pass.tape, v))).collect();

    let mut work = params.clone();
    let mut result = ModelCheck { max_relative_error: 0.0, worst: String::new(), checked: 0 };
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    for (k, name) in names.iter().enumerate() {
        let len = params.named()[k].1.len();
        for i in 0..len {
            let original = params.named()[k].1.data()[i];
            let mut eval = |x: f64| -> Result<f64> {
                work.weights.named_mut()[k].1.data_mut()[i] = x;
                step_log_prob(&work, src, tgt, step)
            };
            let numeric = (eval(original + epsilon)? - eval(original - epsilon)?) / (2.0 * epsilon);
            eval(original)?;
            let a = analytic[name].data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if rel > result.max_relative_error {
                result.max_relative_error = rel;
                result.worst = alloc::format!("{name}[{i}]");
            }
            result.checked += 1;
        }
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use alloc::vec;

    #[test]
    fn sum_of_squares() {
        let p = Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap();
        let err = grad_check(
            |t: &mut Tape<'_>, x| {
                let sq = t.mul(x, x);
                Ok(t.sum(sq))
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let p = Tensor::vector(vec![0.3, -0.7]).unwrap();
        let err = grad_check(
            |t: &mut Tape<'_>, _x| {
                let c = t.leaf(Tensor::scalar(4.0).unwrap(), false);
                Ok(c)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }
}
