//! Tucker-2 decomposition of conv kernels over the two channel modes.

use crate::eig::gram_eig;
use crate::error::{Error, Result};
use crate::tensor::{matricize_mode3, matricize_mode4, DenseMatrix, Tensor4};

/// `K ≈ core ×₃ u3 ×₄ u4`, with `u3: S × R3`, `core: D_h × D_w × R3 × R4`,
/// `u4: T × R4`. Factor columns are ordered by descending Gram eigenvalue.
#[derive(Clone, Debug, PartialEq)]
pub struct Tucker2Factors {
    pub u3: DenseMatrix,
    pub core: Tensor4,
    pub u4: DenseMatrix,
}

impl Tucker2Factors {
    pub fn ranks(&self) -> (usize, usize) {
        (self.u3.cols(), self.u4.cols())
    }

    /// Full kernel dims `(D_h, D_w, S, T)`.
    pub fn kernel_dims(&self) -> [usize; 4] {
        [self.core.d_h(), self.core.d_w(), self.u3.rows(), self.u4.rows()]
    }
}

pub(crate) fn check_ranks(s: usize, t: usize, r3: usize, r4: usize) -> Result<()> {
    if r3 == 0 || r4 == 0 || r3 > s || r4 > t {
        return Err(Error::RankBounds { r3, r4, s, t });
    }
    Ok(())
}

/// Truncated HOSVD over modes 3 and 4.
pub fn tucker2_decompose(k: &Tensor4, r3: usize, r4: usize) -> Result<Tucker2Factors> {
    check_ranks(k.s(), k.t(), r3, r4)?;
    let u3 = gram_eig(&matricize_mode3(k))?.eigenvectors.leading_columns(r3);
    let u4 = gram_eig(&matricize_mode4(k))?.eigenvectors.leading_columns(r4);
    let core = k.mode_product(&u3.transpose(), 3)?.mode_product(&u4.transpose(), 4)?;
    Ok(Tucker2Factors { u3, core, u4 })
}

pub fn tucker2_reconstruct(f: &Tucker2Factors) -> Result<Tensor4> {
    let [_, _, r3, r4] = f.core.dims();
    if f.u3.cols() != r3 || f.u4.cols() != r4 {
        return Err(Error::Shape(format!(
            "core {:?} does not match factors {}x{} and {}x{}",
            f.core.dims(),
            f.u3.rows(),
            f.u3.cols(),
            f.u4.rows(),
            f.u4.cols()
        )));
    }
    f.core.mode_product(&f.u3, 3)?.mode_product(&f.u4, 4)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_kernel(dims: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor4 {
        Tensor4::from_fn(dims, |_, _, _, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn full_rank_is_lossless() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let k = random_kernel([3, 3, 5, 7], &mut rng);
        let f = tucker2_decompose(&k, 5, 7).unwrap();
        let rec = tucker2_reconstruct(&f).unwrap();
        assert!(rec.distance(&k) <= 1e-10 * k.frobenius_norm());
    }

    #[test]
    fn factors_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let k = random_kernel([3, 3, 6, 8], &mut rng);
        let f = tucker2_decompose(&k, 3, 4).unwrap();
        for u in [&f.u3, &f.u4] {
            let g = u.transpose().matmul(u).unwrap();
            for i in 0..g.rows() {
                for j in 0..g.cols() {
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((g.get(i, j) - want).abs() < 1e-10);
                }
            }
        }
        assert_eq!(f.core.dims(), [3, 3, 3, 4]);
        assert_eq!(f.kernel_dims(), [3, 3, 6, 8]);
    }

    #[test]
    fn identity_factors_reconstruct_core() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let k = random_kernel([2, 2, 3, 4], &mut rng);
        let f = Tucker2Factors { u3: DenseMatrix::identity(3), core: k.clone(), u4: DenseMatrix::identity(4) };
        assert_eq!(tucker2_reconstruct(&f).unwrap(), k);
    }

    #[test]
    fn rank_bounds_enforced() {
        let k = Tensor4::zeros([3, 3, 4, 5]);
        for (r3, r4) in [(0, 1), (1, 0), (5, 1), (1, 6)] {
            assert!(matches!(tucker2_decompose(&k, r3, r4), Err(Error::RankBounds { .. })));
        }
    }

    #[test]
    fn mismatched_factors_rejected() {
        let f = Tucker2Factors {
            u3: DenseMatrix::identity(3),
            core: Tensor4::zeros([1, 1, 2, 2]),
            u4: DenseMatrix::identity(2),
        };
        assert!(matches!(tucker2_reconstruct(&f), Err(Error::Shape(_))));
    }
}
