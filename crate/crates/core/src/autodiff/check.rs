//! Finite-difference verification of tape gradients.

use crate::autodiff::{NormStats, Tape, Var};
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Largest relative error between analytic and central-difference gradients
/// over all `inputs`.
///
/// Relative error for one input is `‖g_analytic − g_numeric‖ / max(‖g_analytic‖, ‖g_numeric‖)`,
/// and zero when both vanish.
pub fn max_relative_error<F>(inputs: &[Tensor<f64>], step: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.wrt(&tape, v);
        let mut num = vec![0.0; inputs[i].len()];
        for (j, slot) in num.iter_mut().enumerate() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + step;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - step;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * step);
        }
        let diff: f64 = analytic.data().iter().zip(&num).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na: f64 = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = num.iter().map(|a| a * a).sum::<f64>().sqrt();
        let scale = na.max(nn);
        if scale > 0.0 {
            worst = worst.max(diff / scale);
        }
    }
    Ok(worst)
}

/// Builds a tensor of i.i.d. values in `[lo, hi)`, optionally kept away from zero.
pub fn random_tensor(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64, min_abs: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = rng.uniform_in(lo, hi);
            if v.abs() >= min_abs {
                break v;
            }
        })
        .collect();
    Tensor::from_vec(shape, data).expect("shape and data agree")
}

/// One randomized gradient check of a single tape operation.
pub struct OpCase {
    pub name: &'static str,
    pub run: fn(&mut Rng) -> Result<f64>,
}

/// Contracts a tensor to a scalar with a fixed random weighting so every
/// output element contributes a distinct gradient.
fn project(tape: &mut Tape<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

const STEP: f64 = 1e-5;

fn case_conv2d(rng: &mut Rng) -> Result<f64> {
    let x = random_tensor(rng, &[2, 2, 4, 3], -1.0, 1.0, 0.0);
    let k = random_tensor(rng, &[3, 2, 3, 3], -1.0, 1.0, 0.0);
    let b = random_tensor(rng, &[3], -1.0, 1.0, 0.0);
    let w = random_tensor(rng, &[2, 3, 4, 3], -1.0, 1.0, 0.0);
    max_relative_error(&[x, k, b], STEP, |t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]))?;
        project(t, y, &w)
    })
}

fn case_batch_norm_train(rng: &mut Rng) -> Result<f64> {
    let x = random_tensor(rng, &[3, 2, 2, 3], -1.0, 1.0, 0.0);
    let g = random_tensor(rng, &[2], 0.5, 1.5, 0.0);
    let b = random_tensor(rng, &[2], -1.0, 1.0, 0.0);
    let w = random_tensor(rng, &[3, 2, 2, 3], -1.0, 1.0, 0.0);
    max_relative_error(&[x, g, b], STEP, |t, v| {
        let (y, _) = t.batch_norm(v[0], v[1], v[2], NormStats::Batch, 1e-5)?;
        project(t, y, &w)
    })
}

fn case_batch_norm_infer(rng: &mut Rng) -> Result<f64> {
    let x = random_tensor(rng, &[2, 2, 3, 2], -1.0, 1.0, 0.0);
    let g = random_tensor(rng, &[2], 0.5, 1.5, 0.0);
    let b = random_tensor(rng, &[2], -1.0, 1.0, 0.0);
    let mean = random_tensor(rng, &[2], -0.5, 0.5, 0.0);
    let var = random_tensor(rng, &[2], 0.2, 2.0, 0.0);
    let w = random_tensor(rng, &[2, 2, 3, 2], -1.0, 1.0, 0.0);
    max_relative_error(&[x, g, b], STEP, |t, v| {
        let stats = NormStats::Fixed { mean: mean.data(), var: var.data() };
        let (y, _) = t.batch_norm(v[0], v[1], v[2], stats, 1e-5)?;
        project(t, y, &w)
    })
}

fn case_relu(rng: &mut Rng) -> Result<f64> {
    let x = random_tensor(rng, &[2, 1, 3, 3], -1.0, 1.0, 1e-2);
    let w = random_tensor(rng, &[2, 1, 3, 3], -1.0, 1.0, 0.0);
    max_relative_error(&[x], STEP, |t, v| {
        let y = t.relu(v[0]);
        project(t, y, &w)
    })
}

fn case_sigmoid(rng: &mut Rng) -> Result<f64> {
    let x = random_tensor(rng, &[2, 1, 3, 3], -4.0, 4.0, 0.0);
    let w = random_tensor(rng, &[2, 1, 3, 3], -1.0, 1.0, 0.0);
    max_relative_error(&[x], STEP, |t, v| {
        let y = t.sigmoid(v[0]);
        project(t, y, &w)
    })
}

fn binary_case(rng: &mut Rng, op: fn(&mut Tape<f64>, Var, Var) -> Result<Var>) -> Result<f64> {
    let a = random_tensor(rng, &[2, 2, 2, 2], -1.0, 1.0, 0.0);
    let b = random_tensor(rng, &[2, 2, 2, 2], -1.0, 1.0, 0.0);
    let w = random_tensor(rng, &[2, 2, 2, 2], -1.0, 1.0, 0.0);
    max_relative_error(&[a, b], STEP, |t, v| {
        let y = op(t, v[0], v[1])?;
        project(t, y, &w)
    })
}

fn case_add(rng: &mut Rng) -> Result<f64> {
    binary_case(rng, |t, a, b| t.add(a, b))
}

fn case_sub(rng: &mut Rng) -> Result<f64> {
    binary_case(rng, |t, a, b| t.sub(a, b))
}

fn case_mul(rng: &mut Rng) -> Result<f64> {
    binary_case(rng, |t, a, b| t.mul(a, b))
}

fn case_scalar(rng: &mut Rng) -> Result<f64> {
    let x = random_tensor(rng, &[2, 1, 2, 3], -1.0, 1.0, 0.0);
    let w = random_tensor(rng, &[2, 1, 2, 3], -1.0, 1.0, 0.0);
    let (c1, c2) = (rng.uniform_in(-2.0, 2.0), rng.uniform_in(-2.0, 2.0));
    max_relative_error(&[x], STEP, |t, v| {
        let a = t.mul_scalar(v[0], c1);
        let b = t.add_scalar(a, c2);
        let y = t.scalar_sub(c2, b);
        project(t, y, &w)
    })
}

fn case_concat(rng: &mut Rng) -> Result<f64> {
    let a = random_tensor(rng, &[2, 1, 2, 2], -1.0, 1.0, 0.0);
    let b = random_tensor(rng, &[2, 3, 2, 2], -1.0, 1.0, 0.0);
    let w = random_tensor(rng, &[2, 5, 2, 2], -1.0, 1.0, 0.0);
    max_relative_error(&[a, b], STEP, |t, v| {
        let y = t.concat_channels(&[v[0], v[1], v[0]])?;
        project(t, y, &w)
    })
}

fn case_mse(rng: &mut Rng) -> Result<f64> {
    let a = random_tensor(rng, &[2, 2, 2, 2], -1.0, 1.0, 0.0);
    let b = random_tensor(rng, &[2, 2, 2, 2], -1.0, 1.0, 0.0);
    max_relative_error(&[a, b], STEP, |t, v| t.mse(v[0], v[1]))
}

fn case_sum(rng: &mut Rng) -> Result<f64> {
    let x = random_tensor(rng, &[2, 2, 3, 1], -1.0, 1.0, 0.0);
    max_relative_error(&[x], STEP, |t, v| {
        let sq = t.mul(v[0], v[0])?;
        Ok(t.sum(sq))
    })
}

/// Every differentiable tape operation.
pub fn op_suite() -> Vec<OpCase> {
    vec![
        OpCase { name: "conv2d", run: case_conv2d },
        OpCase { name: "batch_norm(train)", run: case_batch_norm_train },
        OpCase { name: "batch_norm(infer)", run: case_batch_norm_infer },
        OpCase { name: "relu", run: case_relu },
        OpCase { name: "sigmoid", run: case_sigmoid },
        OpCase { name: "add", run: case_add },
        OpCase { name: "sub", run: case_sub },
        OpCase { name: "mul", run: case_mul },
        OpCase { name: "scalar", run: case_scalar },
        OpCase { name: "concat_channels", run: case_concat },
        OpCase { name: "mse", run: case_mse },
        OpCase { name: "sum", run: case_sum },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_a_few_trials() {
        let mut rng = Rng::new(11);
        for case in op_suite() {
            for _ in 0..5 {
                let err = (case.run)(&mut rng).unwrap();
                assert!(err < 1e-6, "{}: {err}", case.name);
            }
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // relu evaluated on inputs straddling zero at the step scale breaks the check.
        let x = Tensor::from_vec(&[2], vec![1e-7, -1e-7]).unwrap();
        let err = max_relative_error(&[x], 1e-5, |t, v| {
            let y = t.relu(v[0]);
            Ok(t.sum(y))
        })
        .unwrap();
        assert!(err > 1e-3);
    }
}
