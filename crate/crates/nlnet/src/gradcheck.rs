//! Central finite-difference gradient checking.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Checks the tape gradient of a scalar-valued function against central
/// finite differences, perturbing every element of every parameter.
///
/// Returns the maximum over all elements of
/// `|analytic - central| / max(1, |analytic|, |central|)`.
///
/// The function must be deterministic: it is re-evaluated at perturbed
/// parameters, so any randomness inside must be seeded per call.
pub fn grad_check_multi<T, F>(f: F, params: &[Tensor<T>], eps: T) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[TensorId]) -> Result<TensorId>,
{
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = params
        .iter()
        .map(|p| tape.leaf(p.clone()))
        .collect::<Result<_>>()?;
    let loss = f(&mut tape, &ids)?;
    if tape.value(loss).numel() != 1 {
        return Err(Error::shape("grad_check", "function must return a scalar"));
    }
    tape.backward(loss)?;
    let analytic: Vec<Vec<T>> = ids
        .iter()
        .zip(params)
        .map(|(&id, p)| {
            tape.grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![T::zero(); p.numel()])
        })
        .collect();

    let eval_at = |pi: usize, ei: usize, delta: T| -> Result<T> {
        let mut tp = Tape::new();
        let mut ids2 = Vec::with_capacity(params.len());
        for (qi, q) in params.iter().enumerate() {
            let mut q2 = q.clone();
            if qi == pi {
                q2.data_mut()[ei] = q2.data()[ei] + delta;
            }
            ids2.push(tp.leaf(q2)?);
        }
        let l = f(&mut tp, &ids2)?;
        let v = tp.value(l).data()[0];
        if !v.is_finite() {
            return Err(Error::Numeric("grad_check: non-finite function value".into()));
        }
        Ok(v)
    };

    let mut max_rel = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        for ei in 0..p.numel() {
            let fp = eval_at(pi, ei, eps)?;
            let fm = eval_at(pi, ei, -eps)?;
            let central = ((fp - fm) / (eps + eps)).to_f64_lossy();
            let ana = analytic[pi][ei].to_f64_lossy();
            let denom = 1.0f64.max(ana.abs()).max(central.abs());
            let rel = (ana - central).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

/// Single-parameter convenience wrapper; `eps` defaults to 1e-5 in callers.
pub fn grad_check<T, F>(f: F, theta: &Tensor<T>, eps: T) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, TensorId) -> Result<TensorId>,
{
    grad_check_multi(|tape, ids| f(tape, ids[0]), std::slice::from_ref(theta), eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_is_exact_up_to_roundoff() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::<f64>::rand_uniform(vec![4, 3], -1.0, 1.0, &mut rng);
        // f(x) = sum(x * x), analytic gradient 2x
        let err = grad_check(
            |tape, x| {
                let sq = tape.mul_elem(x, x)?;
                tape.sum_all(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-9, "rel err {err}");
    }

    #[test]
    fn cross_entropy_of_logits_is_tight() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let logits = Tensor::<f64>::rand_uniform(vec![3, 5], -1.0, 1.0, &mut rng);
        let err = grad_check(|tape, x| tape.cross_entropy(x, &[0, 3, 2]), &logits, 1e-5).unwrap();
        assert!(err <= 1e-6, "rel err {err}");
    }
}
