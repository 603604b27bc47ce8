//! Central finite-difference gradient oracle.
//!
//! These routines evaluate a black-box scalar function and never touch the
//! tape's backward machinery, so they stay an independent check of it.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Central-difference estimate `(f(x+h e_i) - f(x-h e_i)) / 2h` for every
/// coordinate of `x`.
pub fn finite_difference_gradient(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    step: f64,
) -> Vec<f64> {
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let plus = f(&probe);
        probe[i] = orig - step;
        let minus = f(&probe);
        probe[i] = orig;
        grad[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Central-difference estimates for a chosen coordinate subset, for tensors
/// too large to sweep exhaustively. Returns `(coordinate, estimate)` pairs.
pub fn finite_difference_sampled(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    step: f64,
    coords: &[usize],
) -> Vec<(usize, f64)> {
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut probe = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let plus = f(&probe);
            probe[i] = orig - step;
            let minus = f(&probe);
            probe[i] = orig;
            (i, (plus - minus) / (2.0 * step))
        })
        .collect()
}

/// Deterministic sample of `n` distinct coordinates out of `len`.
pub fn sample_coords(len: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut all: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    all.shuffle(&mut rng);
    all.truncate(n.min(len));
    all.sort_unstable();
    all
}

/// Relative error with a small floor so near-zero gradient pairs do not
/// blow up on finite-difference noise.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Max relative error between an analytic gradient and the sampled
/// finite-difference estimate of `f` at `x`.
pub fn max_rel_err_sampled(
    analytic: &[f64],
    x: &[f64],
    f: &mut dyn FnMut(&[f64]) -> f64,
    step: f64,
    n_coords: usize,
    seed: u64,
) -> f64 {
    let coords = sample_coords(x.len(), n_coords, seed);
    finite_difference_sampled(f, x, step, &coords)
        .into_iter()
        .map(|(i, fd)| relative_error(analytic[i], fd))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_gives_all_ones() {
        let x = vec![0.4, -2.0, 13.0];
        let g = finite_difference_gradient(&mut |v: &[f64]| v.iter().sum(), &x, 1e-4);
        for &gi in &g {
            assert!((gi - 1.0).abs() < 1e-9, "got {gi}");
        }
    }

    #[test]
    fn sum_of_squares_gradient() {
        let x = vec![1.0, 2.0];
        let g = finite_difference_gradient(
            &mut |v: &[f64]| v.iter().map(|&a| a * a).sum(),
            &x,
            1e-5,
        );
        assert!((g[0] - 2.0).abs() < 1e-6);
        assert!((g[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn sampled_subset_matches_full_sweep() {
        let x: Vec<f64> = (0..20).map(|i| i as f64 * 0.3 - 2.0).collect();
        let mut f = |v: &[f64]| v.iter().map(|&a| a * a * a).sum::<f64>();
        let coords = sample_coords(x.len(), 10, 7);
        assert_eq!(coords.len(), 10);
        let sampled = finite_difference_sampled(&mut f, &x, 1e-5, &coords);
        for (i, fd) in sampled {
            assert!(relative_error(3.0 * x[i] * x[i], fd) < 1e-6);
        }
    }

    #[test]
    fn sample_coords_is_deterministic() {
        assert_eq!(sample_coords(100, 10, 42), sample_coords(100, 10, 42));
        assert_eq!(sample_coords(5, 10, 1).len(), 5);
    }
}
