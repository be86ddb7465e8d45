//! The four pairwise affinity functions and their normalization rules.
//!
//! Scores are kept un-exponentiated for the Gaussian kinds; normalization
//! applies a row softmax (equivalent to exp followed by division by the row
//! sum, and the only stable form at large scores). Dot-product and
//! concatenation scores are divided by the number of key positions.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, TensorId};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Pairwise function choice. The normalization rule is a function of the
/// variant: softmax-style for the two Gaussians, 1/M for the rest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairwiseKind {
    /// f(x_i, x_j) = exp(x_i . x_j) on the raw, un-embedded signal.
    Gaussian,
    /// f(x_i, x_j) = exp(theta(x_i) . phi(x_j)).
    EmbeddedGaussian,
    /// f(x_i, x_j) = theta(x_i) . phi(x_j), normalized by 1/M.
    DotProduct,
    /// f(x_i, x_j) = ReLU(w_f . [theta(x_i), phi(x_j)]), normalized by 1/M.
    Concatenation,
}

impl PairwiseKind {
    pub const ALL: [PairwiseKind; 4] = [
        PairwiseKind::Gaussian,
        PairwiseKind::EmbeddedGaussian,
        PairwiseKind::DotProduct,
        PairwiseKind::Concatenation,
    ];

    /// True for the kinds whose normalized weights form a distribution.
    pub fn is_gaussian(self) -> bool {
        matches!(self, PairwiseKind::Gaussian | PairwiseKind::EmbeddedGaussian)
    }

    /// True for the kinds that embed queries and keys through W_theta/W_phi.
    pub fn uses_embeddings(self) -> bool {
        !matches!(self, PairwiseKind::Gaussian)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PairwiseKind::Gaussian => "gaussian",
            PairwiseKind::EmbeddedGaussian => "embedded_gaussian",
            PairwiseKind::DotProduct => "dot_product",
            PairwiseKind::Concatenation => "concatenation",
        }
    }
}

/// The [N x M] affinity values for one clip, living on a tape.
#[derive(Clone, Debug)]
pub struct AffinityMatrix {
    pub values: TensorId,
    pub kind: PairwiseKind,
    pub normalized: bool,
    pub rows: usize,
    pub cols: usize,
}

/// Unnormalized pairwise scores between N queries and M keys of shared width.
///
/// For the Gaussian kinds the exponential is deferred to [`normalize`]. The
/// concatenation kind uses the outer-sum decomposition of
/// ReLU(w_f . [theta_i, phi_j]): with w_f split into (w1, w2),
/// s_ij = ReLU(w1 . theta_i + w2 . phi_j), which avoids materializing the
/// N*M concatenated vectors.
pub fn pairwise_scores<T: Scalar>(
    tape: &mut Tape<T>,
    kind: PairwiseKind,
    q: TensorId,
    k: TensorId,
    w_f: Option<TensorId>,
) -> Result<AffinityMatrix> {
    let qd = tape.value(q).dims().to_vec();
    let kd = tape.value(k).dims().to_vec();
    if qd.len() != 2 || kd.len() != 2 || qd[1] != kd[1] {
        return Err(Error::ShapeMismatch {
            op: "pairwise_scores",
            lhs: tape.value(q).shape().to_string(),
            rhs: tape.value(k).shape().to_string(),
        });
    }
    let (n, d, m) = (qd[0], qd[1], kd[0]);
    match (kind, w_f.is_some()) {
        (PairwiseKind::Concatenation, false) => {
            return Err(Error::config("concatenation kind requires w_f"));
        }
        (PairwiseKind::Concatenation, true) => {}
        (_, true) => {
            return Err(Error::config(format!(
                "w_f only applies to the concatenation kind, got {}",
                kind.as_str()
            )));
        }
        _ => {}
    }
    let values = match kind {
        PairwiseKind::Gaussian | PairwiseKind::EmbeddedGaussian | PairwiseKind::DotProduct => {
            tape.matmul_nt(q, k)?
        }
        PairwiseKind::Concatenation => {
            let wf = w_f.expect("checked above");
            let wfd = tape.value(wf).dims().to_vec();
            if wfd != [2 * d] {
                return Err(Error::shape(
                    "pairwise_scores",
                    format!("w_f must have length {}, got {}", 2 * d, tape.value(wf).shape()),
                ));
            }
            let wf_mat = tape.reshape(wf, vec![2 * d, 1])?;
            let w1 = tape.narrow_rows(wf_mat, 0, d)?;
            let w2 = tape.narrow_rows(wf_mat, d, d)?;
            let u = tape.matmul(q, w1)?; // [N, 1]
            let v = tape.matmul(k, w2)?; // [M, 1]
            let u = tape.reshape(u, vec![n])?;
            let v = tape.reshape(v, vec![m])?;
            let s = tape.outer_add(u, v)?;
            tape.relu(s)?
        }
    };
    Ok(AffinityMatrix {
        values,
        kind,
        normalized: false,
        rows: n,
        cols: m,
    })
}

/// Apply the kind's normalization, optionally under a summation mask.
///
/// Gaussian kinds: row softmax over the kept entries (C(x) is the row sum of
/// f). Dot-product and concatenation: division by the number of kept key
/// positions (C(x) = M without a mask). Masked entries come out exactly zero.
pub fn normalize<T: Scalar>(
    tape: &mut Tape<T>,
    aff: AffinityMatrix,
    mask: Option<Arc<Vec<bool>>>,
) -> Result<AffinityMatrix> {
    if aff.normalized {
        return Err(Error::config("affinity matrix already normalized"));
    }
    let values = if aff.kind.is_gaussian() {
        tape.softmax_rows(aff.values, mask)?
    } else {
        tape.div_row_count(aff.values, mask)?
    };
    Ok(AffinityMatrix {
        values,
        normalized: true,
        ..aff
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn leaf(tape: &mut Tape<f64>, t: Tensor<f64>) -> TensorId {
        tape.leaf(t).unwrap()
    }

    #[test]
    fn dot_product_of_zeros_is_zero() {
        let mut tape = Tape::new();
        let q = leaf(&mut tape, Tensor::zeros(vec![3, 2]));
        let k = leaf(&mut tape, Tensor::zeros(vec![3, 2]));
        let aff = pairwise_scores(&mut tape, PairwiseKind::DotProduct, q, k, None).unwrap();
        assert!(tape.value(aff.values).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embedded_gaussian_orthonormal_rows() {
        let mut tape = Tape::new();
        let eye = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let q = leaf(&mut tape, eye.clone());
        let k = leaf(&mut tape, eye);
        let aff = pairwise_scores(&mut tape, PairwiseKind::EmbeddedGaussian, q, k, None).unwrap();
        assert_eq!(tape.value(aff.values).data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn concatenation_matches_literal_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let q = Tensor::<f64>::rand_uniform(vec![3, 2], -1.0, 1.0, &mut rng);
        let k = Tensor::<f64>::rand_uniform(vec![4, 2], -1.0, 1.0, &mut rng);
        let wf = Tensor::<f64>::rand_uniform(vec![4], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let qi = leaf(&mut tape, q.clone());
        let ki = leaf(&mut tape, k.clone());
        let wi = leaf(&mut tape, wf.clone());
        let aff = pairwise_scores(&mut tape, PairwiseKind::Concatenation, qi, ki, Some(wi)).unwrap();
        let want = oracle::concat_scores_literal(&q, &k, &wf);
        assert!(tape.value(aff.values).max_abs_diff(&want) <= 1e-12);
    }

    #[test]
    fn concatenation_requires_wf() {
        let mut tape = Tape::<f64>::new();
        let q = leaf(&mut tape, Tensor::zeros(vec![2, 2]));
        let k = leaf(&mut tape, Tensor::zeros(vec![2, 2]));
        assert!(pairwise_scores(&mut tape, PairwiseKind::Concatenation, q, k, None).is_err());
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let q = leaf(&mut tape, Tensor::zeros(vec![2, 3]));
        let k = leaf(&mut tape, Tensor::zeros(vec![2, 4]));
        assert!(pairwise_scores(&mut tape, PairwiseKind::DotProduct, q, k, None).is_err());
    }

    #[test]
    fn gaussian_normalization_of_zero_scores_is_uniform() {
        let mut tape = Tape::new();
        let q = leaf(&mut tape, Tensor::zeros(vec![2, 3]));
        let k = leaf(&mut tape, Tensor::zeros(vec![4, 3]));
        let aff = pairwise_scores(&mut tape, PairwiseKind::Gaussian, q, k, None).unwrap();
        let aff = normalize(&mut tape, aff, None).unwrap();
        for &v in tape.value(aff.values).data() {
            assert!((v - 0.25).abs() <= 1e-15);
        }
    }

    #[test]
    fn dot_product_normalization_divides_by_m() {
        let mut tape = Tape::new();
        let s = leaf(&mut tape, Tensor::full(vec![2, 3], 6.0));
        let aff = AffinityMatrix {
            values: s,
            kind: PairwiseKind::DotProduct,
            normalized: false,
            rows: 2,
            cols: 3,
        };
        let aff = normalize(&mut tape, aff, None).unwrap();
        assert!(tape.value(aff.values).data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn embedded_gaussian_normalize_matches_softmax_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let scores = Tensor::<f64>::rand_uniform(vec![4, 4], -2.0, 2.0, &mut rng);
        let mut tape = Tape::new();
        let s = leaf(&mut tape, scores.clone());
        let aff = AffinityMatrix {
            values: s,
            kind: PairwiseKind::EmbeddedGaussian,
            normalized: false,
            rows: 4,
            cols: 4,
        };
        let aff = normalize(&mut tape, aff, None).unwrap();
        let want = oracle::naive_softmax_rows(&scores);
        assert!(tape.value(aff.values).max_abs_diff(&want) <= 1e-12);
    }

    #[test]
    fn double_normalization_is_rejected() {
        let mut tape = Tape::new();
        let s = leaf(&mut tape, Tensor::<f64>::zeros(vec![2, 2]));
        let aff = AffinityMatrix {
            values: s,
            kind: PairwiseKind::Gaussian,
            normalized: false,
            rows: 2,
            cols: 2,
        };
        let aff = normalize(&mut tape, aff, None).unwrap();
        assert!(normalize(&mut tape, aff, None).is_err());
    }
}
