//! Real symmetric embedding of Hermitian matrix variables.
//!
//! An `n x n` Hermitian matrix `H = A + jB` (`A` symmetric, `B`
//! skew-symmetric) maps to the `2n x 2n` real symmetric matrix
//!
//! ```text
//! T(H) = [  A  -B ]
//!        [  B   A ]
//! ```
//!
//! with `H >= 0` iff `T(H) >= 0` and each eigenvalue of `H` appearing twice
//! in `T(H)`. Real and imaginary parts of `H` are linear reads of the
//! embedded block, so Hermitian constraints become real ones.
//!
//! Embedded problems are built exclusively from embedded Hermitian data
//! matrices, which commute with the rotation `J X J^T`,
//! `J = [[0, -I], [I, 0]]`. Averaging a solution with its rotation therefore
//! preserves feasibility, objective and semidefiniteness while restoring the
//! exact `[[A, -B], [B, A]]` structure, so the structure does not need to be
//! pinned with extra constraint rows; [`HermitianEmbedding::extract`]
//! performs that averaging read. [`HermitianEmbedding::structure_rows`]
//! still exposes the pinning rows for callers (and tests) that want the
//! structure enforced explicitly.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use super::eig::{max_eigpair, EigError};

/// Descriptor mapping an `n x n` Hermitian variable onto a `2n x 2n` real
/// symmetric block.
#[derive(Debug, Clone)]
pub struct HermitianEmbedding {
    n: usize,
}

impl HermitianEmbedding {
    pub fn new(n: usize) -> HermitianEmbedding {
        assert!(n >= 1, "embedding needs n >= 1");
        HermitianEmbedding { n }
    }

    /// Hermitian dimension.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Real block dimension (`2n`).
    pub fn dim(&self) -> usize {
        2 * self.n
    }

    /// Entry reads `(row, col, coeff)` whose sum over the real block equals
    /// `Re H[k][m]`.
    pub fn re_terms(&self, k: usize, m: usize) -> Vec<(usize, usize, f64)> {
        let n = self.n;
        vec![(k, m, 0.5), (n + k, n + m, 0.5)]
    }

    /// Entry reads whose sum equals `Im H[k][m]`.
    pub fn im_terms(&self, k: usize, m: usize) -> Vec<(usize, usize, f64)> {
        let n = self.n;
        vec![(n + k, m, 0.5), (k, n + m, -0.5)]
    }

    /// Entry reads whose sum equals `Trace H`.
    pub fn trace_terms(&self) -> Vec<(usize, usize, f64)> {
        (0..self.n)
            .flat_map(|k| self.re_terms(k, k))
            .collect()
    }

    /// Entry reads whose sum equals the real value `<M, H> = Trace(M^H H)`
    /// for a Hermitian data matrix `M`. Entrywise,
    /// `<M, H> = sum_km Re(M[k][m]) Re(H[k][m]) + Im(M[k][m]) Im(H[k][m])`.
    pub fn functional_terms(&self, m_data: &DMatrix<Complex64>) -> Vec<(usize, usize, f64)> {
        assert_eq!(m_data.nrows(), self.n);
        assert_eq!(m_data.ncols(), self.n);
        let mut terms = Vec::new();
        for k in 0..self.n {
            for m in 0..self.n {
                let v = m_data[(k, m)];
                if v.re != 0.0 {
                    for (r, c, w) in self.re_terms(k, m) {
                        terms.push((r, c, w * v.re));
                    }
                }
                if v.im != 0.0 {
                    for (r, c, w) in self.im_terms(k, m) {
                        terms.push((r, c, w * v.im));
                    }
                }
            }
        }
        terms
    }

    /// Dense real embedding `T(H)` of a Hermitian matrix.
    pub fn embed(&self, h: &DMatrix<Complex64>) -> DMatrix<f64> {
        assert_eq!(h.nrows(), self.n);
        assert_eq!(h.ncols(), self.n);
        let n = self.n;
        let mut x = DMatrix::zeros(2 * n, 2 * n);
        for r in 0..n {
            for c in 0..n {
                let v = h[(r, c)];
                x[(r, c)] = v.re;
                x[(n + r, n + c)] = v.re;
                x[(r, n + c)] = -v.im;
                x[(n + r, c)] = v.im;
            }
        }
        x
    }

    /// Averaging read of a Hermitian matrix from the real block:
    /// `A = (X11 + X22)/2`, `B = (X21 - X12)/2`.
    pub fn extract(&self, x: &DMatrix<f64>) -> DMatrix<Complex64> {
        assert_eq!(x.nrows(), 2 * self.n);
        assert_eq!(x.ncols(), 2 * self.n);
        let n = self.n;
        DMatrix::from_fn(n, n, |r, c| {
            let re = 0.5 * (x[(r, c)] + x[(n + r, n + c)]);
            let im = 0.5 * (x[(n + r, c)] - x[(r, n + c)]);
            Complex64::new(re, im)
        })
    }

    /// Equality rows (`sum of reads = 0`) that pin the embedding structure
    /// explicitly: equal diagonal copies, symmetric `A`, skew-symmetric `B`.
    pub fn structure_rows(&self) -> Vec<Vec<(usize, usize, f64)>> {
        let n = self.n;
        let mut rows = Vec::new();
        for r in 0..n {
            for c in r..n {
                // X11[r,c] - X22[r,c] = 0
                rows.push(vec![(r, c, 1.0), (n + r, n + c, -1.0)]);
                // X21[r,c] + X21[c,r] = 0 (skew B; r == c pins the diagonal)
                if r == c {
                    rows.push(vec![(n + r, c, 1.0)]);
                } else {
                    rows.push(vec![(n + r, c, 1.0), (n + c, r, 1.0)]);
                }
            }
        }
        rows
    }
}

/// Largest eigenvalue and unit eigenvector of a Hermitian matrix, computed
/// through the real embedding.
pub fn hermitian_max_eigpair(
    h: &DMatrix<Complex64>,
) -> Result<(f64, DVector<Complex64>), EigError> {
    let n = h.nrows();
    if n != h.ncols() {
        return Err(EigError::NotSquare(h.nrows(), h.ncols()));
    }
    let emb = HermitianEmbedding::new(n);
    let x = emb.embed(h);
    let (lambda, z) = max_eigpair(&x)?;
    let mut v = DVector::from_fn(n, |k, _| Complex64::new(z[k], z[n + k]));
    let norm = v.norm();
    if norm > 0.0 {
        v /= Complex64::new(norm, 0.0);
    }
    Ok((lambda, v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sdp::eig::symmetric_eigenvalues;
    use rand::{Rng, SeedableRng};

    fn random_hermitian(n: usize, seed: u64) -> DMatrix<Complex64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut h = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
        for r in 0..n {
            h[(r, r)] = Complex64::new(rng.gen_range(-1.0..1.0), 0.0);
            for c in (r + 1)..n {
                let v = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                h[(r, c)] = v;
                h[(c, r)] = v.conj();
            }
        }
        h
    }

    #[test]
    fn scalar_embedding_is_two_by_two_with_zero_skew_part() {
        let emb = HermitianEmbedding::new(1);
        assert_eq!(emb.dim(), 2);
        let h = DMatrix::from_element(1, 1, Complex64::new(3.5, 0.0));
        let x = emb.embed(&h);
        assert_eq!(x[(0, 0)], 3.5);
        assert_eq!(x[(1, 1)], 3.5);
        assert_eq!(x[(0, 1)], 0.0);
        assert_eq!(x[(1, 0)], 0.0);
        let back = emb.extract(&x);
        assert_eq!(back[(0, 0)], Complex64::new(3.5, 0.0));
    }

    #[test]
    fn eigenvalues_double_up() {
        // H = [[2, j], [-j, 2]] has eigenvalues {1, 3}.
        let mut h = DMatrix::from_element(2, 2, Complex64::new(0.0, 0.0));
        h[(0, 0)] = Complex64::new(2.0, 0.0);
        h[(1, 1)] = Complex64::new(2.0, 0.0);
        h[(0, 1)] = Complex64::new(0.0, 1.0);
        h[(1, 0)] = Complex64::new(0.0, -1.0);
        let emb = HermitianEmbedding::new(2);
        let x = emb.embed(&h);
        let eigs = symmetric_eigenvalues(&x);
        let expected = [1.0, 1.0, 3.0, 3.0];
        for (got, want) in eigs.iter().zip(expected.iter()) {
            assert!((got - want).abs() < 1e-10, "{eigs:?}");
        }
    }

    #[test]
    fn rank_one_hermitian_embeds_to_rank_two() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let n = 4;
            let v = DVector::from_fn(n, |_, _| {
                Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
            });
            let h = DMatrix::from_fn(n, n, |r, c| v[r] * v[c].conj());
            let emb = HermitianEmbedding::new(n);
            let eigs = symmetric_eigenvalues(&emb.embed(&h));
            let nonzero = eigs.iter().filter(|e| e.abs() > 1e-9).count();
            assert_eq!(nonzero, 2);
            let lam_h = v.norm_squared();
            assert!((eigs.last().unwrap() - lam_h).abs() < 1e-9);
        }
    }

    #[test]
    fn extraction_round_trips_and_reads_match() {
        let h = random_hermitian(5, 9);
        let emb = HermitianEmbedding::new(5);
        let x = emb.embed(&h);
        let back = emb.extract(&x);
        assert!((&back - &h).norm() < 1e-12);
        for k in 0..5 {
            for m in 0..5 {
                let re: f64 = emb.re_terms(k, m).iter().map(|&(r, c, w)| w * x[(r, c)]).sum();
                let im: f64 = emb.im_terms(k, m).iter().map(|&(r, c, w)| w * x[(r, c)]).sum();
                assert!((re - h[(k, m)].re).abs() < 1e-12);
                assert!((im - h[(k, m)].im).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn functional_terms_match_inner_product() {
        let h = random_hermitian(4, 3);
        let m = random_hermitian(4, 4);
        let emb = HermitianEmbedding::new(4);
        let x = emb.embed(&h);
        let via_terms: f64 = emb
            .functional_terms(&m)
            .iter()
            .map(|&(r, c, w)| w * x[(r, c)])
            .sum();
        let direct: Complex64 = (m.adjoint() * &h).trace();
        assert!(direct.im.abs() < 1e-12);
        assert!((via_terms - direct.re).abs() < 1e-10, "{via_terms} vs {}", direct.re);
    }

    #[test]
    fn structure_rows_vanish_on_embedded_matrices() {
        let h = random_hermitian(3, 17);
        let emb = HermitianEmbedding::new(3);
        let x = emb.embed(&h);
        for row in emb.structure_rows() {
            let v: f64 = row.iter().map(|&(r, c, w)| w * x[(r, c)]).sum();
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn hermitian_eigpair_satisfies_residual() {
        let h = random_hermitian(6, 23);
        let (lambda, v) = hermitian_max_eigpair(&h).unwrap();
        let residual = (&h * &v - &v * Complex64::new(lambda, 0.0)).norm();
        assert!(residual < 1e-9, "residual {residual}");
        assert!((v.norm() - 1.0).abs() < 1e-12);
    }
}
