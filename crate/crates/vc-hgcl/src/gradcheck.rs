//! Finite-difference verification of tape gradients.
//!
//! [`gradient_check`] compares the analytic gradient of a scalar-valued
//! tensor function against central differences, coordinate by
//! coordinate, and reports the worst relative error. The per-operation
//! suite in [`op_suite`] drives every tape operation through it on
//! seeded random inputs; the CLI `gradcheck` verb and the acceptance
//! tests both run it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Tape, Tensor, TensorId};

/// Relative error with a floor on the denominator, so near-zero
/// gradients compare on an absolute scale.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Checks the gradient of `f` (a scalar-valued tape function) at `x`
/// using central differences with step `h`. Returns the maximum
/// relative error over all coordinates of `x`.
pub fn gradient_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, TensorId) -> Result<TensorId>,
{
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone().tracked());
    let y = f(&mut tape, xid)?;
    tape.backward(y)?;
    let analytic = tape.grad(xid).expect("tracked leaf has grad").to_vec();

    let eval = |data: Vec<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let id = t.leaf(Tensor::new(data, x.shape())?);
        let out = f(&mut t, id)?;
        Ok(t.data(out)[0])
    };

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        let mut minus = x.data().to_vec();
        plus[i] += h;
        minus[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// One named case of the per-operation suite.
pub struct OpCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
}

/// Runs every differentiable tape operation through the
/// finite-difference check on `seeds` random small inputs each.
/// Returns per-operation worst errors.
pub fn op_suite(seeds: u64, h: f64) -> Result<Vec<OpCheck>> {
    let mut results = Vec::new();
    let mut run = |name: &'static str,
                   f: &dyn Fn(&mut Tape, TensorId) -> Result<TensorId>,
                   gen: &dyn Fn(&mut ChaCha8Rng) -> Tensor|
     -> Result<()> {
        let mut worst = 0.0f64;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(0x0C0FFEE ^ seed);
            let x = gen(&mut rng);
            worst = worst.max(gradient_check(f, &x, h)?);
        }
        results.push(OpCheck { name, max_rel_err: worst });
        Ok(())
    };

    let uniform = |rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64| -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(lo..hi)).collect()
    };
    let mat23 = |rng: &mut ChaCha8Rng| Tensor::new(uniform(rng, 6, -1.5, 1.5), &[2, 3]).unwrap();
    let vec5 = |rng: &mut ChaCha8Rng| Tensor::new(uniform(rng, 5, -2.0, 2.0), &[5]).unwrap();

    run(
        "matmul",
        &|t, x| {
            let w = t.constant(vec![0.3, -0.7, 0.2, 0.9, -0.4, 0.1], &[3, 2])?;
            let y = t.matmul(x, w)?;
            Ok(t.sum_all(y))
        },
        &mat23,
    )?;
    run(
        "add",
        &|t, x| {
            let c = t.constant(vec![0.2, -0.1, 0.4, 0.0, 1.0, -0.6], &[2, 3])?;
            let y = t.add(x, c)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        },
        &mat23,
    )?;
    run(
        "sub",
        &|t, x| {
            let c = t.constant(vec![0.2, -0.1, 0.4, 0.0, 1.0, -0.6], &[2, 3])?;
            let y = t.sub(x, c)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        },
        &mat23,
    )?;
    run(
        "mul",
        &|t, x| {
            let c = t.constant(vec![1.2, -0.3, 0.4, 0.8, -1.0, 0.6], &[2, 3])?;
            let y = t.mul(x, c)?;
            Ok(t.sum_all(y))
        },
        &mat23,
    )?;
    run(
        "add_bias",
        &|t, x| {
            let b = t.constant(vec![0.5, -0.2, 0.7], &[3])?;
            let y = t.add_bias(x, b)?;
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        },
        &mat23,
    )?;
    run(
        "concat_slice",
        &|t, x| {
            let c = t.constant(vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6], &[2, 3])?;
            let cat = t.concat(x, c, 1)?;
            let cut = t.slice(cat, 1, 1, 5)?;
            let sq = t.mul(cut, cut)?;
            Ok(t.sum_all(sq))
        },
        &mat23,
    )?;
    run(
        "sum_axis",
        &|t, x| {
            let r = t.sum_axis(x, 0)?;
            let sq = t.mul(r, r)?;
            Ok(t.sum_all(sq))
        },
        &mat23,
    )?;
    run(
        "mean_axis",
        &|t, x| {
            let r = t.mean_axis(x, 1)?;
            let sq = t.mul(r, r)?;
            Ok(t.sum_all(sq))
        },
        &mat23,
    )?;
    run(
        "mean_all",
        &|t, x| {
            let m = t.mean_all(x);
            Ok(t.mul(m, m)?)
        },
        &mat23,
    )?;
    run("tanh", &|t, x| {
        let y = t.tanh(x);
        Ok(t.sum_all(y))
    }, &vec5)?;
    run("sigmoid", &|t, x| {
        let y = t.sigmoid(x);
        Ok(t.sum_all(y))
    }, &vec5)?;
    run(
        "relu",
        &|t, x| {
            let y = t.relu(x);
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        },
        // Keep inputs away from the kink at zero.
        &|rng| {
            let d: Vec<f64> = (0..5)
                .map(|_| {
                    let v: f64 = rng.gen_range(0.1..1.5);
                    if rng.gen_bool(0.5) { v } else { -v }
                })
                .collect();
            Tensor::new(d, &[5]).unwrap()
        },
    )?;
    run("exp", &|t, x| {
        let y = t.exp(x);
        Ok(t.sum_all(y))
    }, &vec5)?;
    run(
        "log",
        &|t, x| {
            let y = t.log(x);
            Ok(t.sum_all(y))
        },
        &|rng| Tensor::new(uniform(rng, 5, 0.2, 3.0), &[5]).unwrap(),
    )?;
    run(
        "softmax",
        &|t, x| {
            let y = t.softmax(x, 1)?;
            let w = t.constant(vec![0.9, -0.5, 0.3, 0.1, 0.7, -0.2], &[2, 3])?;
            let p = t.mul(y, w)?;
            Ok(t.sum_all(p))
        },
        &mat23,
    )?;
    run(
        "layer_norm",
        &|t, x| {
            let g = t.constant(vec![1.1, 0.9, -0.4], &[3])?;
            let b = t.constant(vec![0.2, -0.3, 0.5], &[3])?;
            let y = t.layer_norm(x, g, b, 1e-5)?;
            let w = t.constant(vec![0.4, 0.6, -0.8, 0.2, -0.1, 0.9], &[2, 3])?;
            let p = t.mul(y, w)?;
            Ok(t.sum_all(p))
        },
        &mat23,
    )?;
    run(
        "transpose",
        &|t, x| {
            let y = t.transpose(x)?;
            let w = t.constant(vec![0.4, 0.6, -0.8, 0.2, -0.1, 0.9], &[3, 2])?;
            let p = t.mul(y, w)?;
            Ok(t.sum_all(p))
        },
        &mat23,
    )?;
    run(
        "reshape",
        &|t, x| {
            let y = t.reshape(x, &[6])?;
            let sq = t.mul(y, y)?;
            Ok(t.sum_all(sq))
        },
        &mat23,
    )?;
    run(
        "cosine_similarity",
        &|t, x| {
            let other = t.constant(vec![0.9, -0.4, 0.6, 0.2, -1.1], &[5])?;
            t.cosine_similarity(x, other)
        },
        &|rng| {
            // Bounded away from the zero-norm singularity.
            let d: Vec<f64> = (0..5).map(|_| rng.gen_range(0.3..2.0)).collect();
            Tensor::new(d, &[5]).unwrap()
        },
    )?;

    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::new(vec![0.4, -1.2, 2.2], &[3]).unwrap();
        let err = gradient_check(|t, id| Ok(t.sum_all(id)), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "err = {err}");
    }

    #[test]
    fn quadratic_is_exact_to_rounding() {
        let x = Tensor::new(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let err = gradient_check(
            |t, id| {
                let sq = t.mul(id, id)?;
                Ok(t.sum_all(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "err = {err}");
    }

    #[test]
    fn every_op_passes_randomized_checks() {
        // The full 100-seed sweep runs in the acceptance suite; a
        // 20-seed pass here keeps unit runs quick.
        for check in op_suite(20, 1e-5).unwrap() {
            assert!(
                check.max_rel_err < 1e-4,
                "{}: {}",
                check.name,
                check.max_rel_err
            );
        }
    }
}
