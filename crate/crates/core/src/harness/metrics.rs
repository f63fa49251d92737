//! Root-mean-square error metrics.

use crate::array::Position3;
use crate::error::{invalid, Error, Result};
use crate::stage2::permutations;

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch { expected: a, found: b });
    }
    if a == 0 {
        return Err(invalid("RMSE of an empty set is undefined"));
    }
    Ok(())
}

/// `sqrt(mean((truth - estimate)^2))`.
pub fn rmse_angle(truth: &[f64], estimates: &[f64]) -> Result<f64> {
    check_lengths(truth.len(), estimates.len())?;
    let s: f64 = truth.iter().zip(estimates).map(|(t, e)| (t - e).powi(2)).sum();
    Ok((s / truth.len() as f64).sqrt())
}

/// `sqrt(mean ||q - q_hat||^2)` over all listed targets and trials.
pub fn rmse_location(truth: &[Position3], estimates: &[Position3]) -> Result<f64> {
    check_lengths(truth.len(), estimates.len())?;
    let s: f64 = truth.iter().zip(estimates).map(|(t, e)| t.distance(e).powi(2)).sum();
    Ok((s / truth.len() as f64).sqrt())
}

/// Permutation `p` minimizing `sum_k cost(k, p[k])`, ties resolved by lexicographic order.
pub fn best_assignment(k: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    let mut best = (f64::INFINITY, (0..k).collect::<Vec<_>>());
    for p in permutations(k) {
        let c: f64 = p.iter().enumerate().map(|(i, &j)| cost(i, j)).sum();
        if c < best.0 {
            best = (c, p);
        }
    }
    best.1
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_is_zero() {
        assert_eq!(rmse_angle(&[0.1, 0.2], &[0.1, 0.2]).unwrap(), 0.0);
    }

    #[test]
    fn single_error() {
        assert!((rmse_angle(&[0.0], &[0.3]).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn two_targets_three_and_four_metres() {
        let t = [Position3::new(0.0, 0.0, 0.0), Position3::new(10.0, 0.0, 0.0)];
        let e = [Position3::new(3.0, 0.0, 0.0), Position3::new(10.0, 4.0, 0.0)];
        let r = rmse_location(&t, &e).unwrap();
        assert!((r - (12.5f64).sqrt()).abs() < 1e-12);
        assert!((r - 3.5355).abs() < 1e-4);
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(matches!(rmse_angle(&[0.0], &[0.0, 1.0]), Err(Error::DimensionMismatch { .. })));
        assert!(rmse_angle(&[], &[]).is_err());
    }

    #[test]
    fn assignment_recovers_shuffle() {
        let truth: [f64; 3] = [0.1, 0.5, -0.3];
        let est = [-0.3, 0.1, 0.5];
        let p = best_assignment(3, |i, j| (truth[i] - est[j]).powi(2));
        assert_eq!(p, vec![1, 2, 0]);
    }

    proptest! {
        #[test]
        fn constant_error_gives_its_magnitude(e in -2.0f64..2.0, n in 1usize..50) {
            let t: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
            let est: Vec<f64> = t.iter().map(|v| v + e).collect();
            prop_assert!((rmse_angle(&t, &est).unwrap() - e.abs()).abs() < 1e-12);
        }
    }
}
