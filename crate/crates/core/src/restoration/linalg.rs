//! Matrix products for the pixel-wise network.
//!
//! Row-chunked so chunks can run in parallel; the chunk size is fixed, so
//! results are bitwise identical for any worker count.

use ndarray::{s, Array2};
use rayon::prelude::*;

const CHUNK_ROWS: usize = 64;

/// `a (n x k) * b (k x m)` with deterministic chunking over rows of `a`.
pub fn matmul(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (n, k) = a.dim();
    let (kb, m) = b.dim();
    assert_eq!(k, kb, "inner dimensions {k} vs {kb}");
    let mut out = Array2::zeros((n, m));
    crate::parallel::install(|| {
        let chunks: Vec<(usize, Array2<f64>)> = (0..n)
            .step_by(CHUNK_ROWS)
            .collect::<Vec<_>>()
            .into_par_iter()
            .map(|start| {
                let stop = (start + CHUNK_ROWS).min(n);
                (start, a.slice(s![start..stop, ..]).dot(b))
            })
            .collect();
        for (start, block) in chunks {
            let stop = start + block.nrows();
            out.slice_mut(s![start..stop, ..]).assign(&block);
        }
    });
    out
}

/// Compensated (Kahan) sum; keeps loss values stable enough for
/// finite-difference gradient checks.
pub fn kahan_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut carry = 0.0;
    for v in values {
        let y = v - carry;
        let t = sum + y;
        carry = (t - sum) - y;
        sum = t;
    }
    sum
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn matches_ndarray_dot() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let a = Array2::from_shape_fn((130, 37), |_| rng.random::<f64>() - 0.5);
        let b = Array2::from_shape_fn((37, 29), |_| rng.random::<f64>() - 0.5);
        let ours = matmul(&a, &b);
        let reference = a.dot(&b);
        let err = (&ours - &reference)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-12);
    }

    #[test]
    fn kahan_handles_small_increments() {
        let n = 100_000;
        let s = kahan_sum(std::iter::repeat(0.1).take(n));
        assert!((s - 0.1 * n as f64).abs() < 1e-9);
    }
}
