//! Training objectives: pixel-mean binary cross entropy and mean squared
//! error over probability maps.

use ndarray::{Array2, NdFloat};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("prediction is {pred_h}x{pred_w} but truth is {truth_h}x{truth_w}")]
    ShapeMismatch {
        pred_h: usize,
        pred_w: usize,
        truth_h: usize,
        truth_w: usize,
    },
    #[error("prediction contains non-finite values")]
    NonFinite,
    #[error("prediction values must lie strictly inside (0, 1)")]
    OutOfRange,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Bce,
    Mse,
}

impl std::str::FromStr for LossKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bce" => Ok(LossKind::Bce),
            "mse" => Ok(LossKind::Mse),
            other => Err(format!("unknown loss {other:?}, expected bce or mse")),
        }
    }
}

fn check_shapes<F: NdFloat>(
    pred: &Array2<F>,
    truth: &Array2<u8>,
) -> Result<(), ObjectiveError> {
    if pred.dim() != truth.dim() {
        let (ph, pw) = pred.dim();
        let (th, tw) = truth.dim();
        return Err(ObjectiveError::ShapeMismatch {
            pred_h: ph,
            pred_w: pw,
            truth_h: th,
            truth_w: tw,
        });
    }
    if pred.iter().any(|v| !v.is_finite()) {
        return Err(ObjectiveError::NonFinite);
    }
    Ok(())
}

/// Mean over pixels of `-[L·log y + (1-L)·log(1-y)]`.
pub fn bce_loss<F: NdFloat>(pred: &Array2<F>, truth: &Array2<u8>) -> Result<F, ObjectiveError> {
    check_shapes(pred, truth)?;
    let one = F::one();
    if pred.iter().any(|&y| y <= F::zero() || y >= one) {
        return Err(ObjectiveError::OutOfRange);
    }
    let mut total = F::zero();
    for (&y, &t) in pred.iter().zip(truth.iter()) {
        let term = if t > 0 { y.ln() } else { (one - y).ln() };
        total = total - term;
    }
    Ok(total / F::from(pred.len()).unwrap())
}

/// Mean over pixels of `(y - L)^2`.
pub fn mse_loss<F: NdFloat>(pred: &Array2<F>, truth: &Array2<u8>) -> Result<F, ObjectiveError> {
    check_shapes(pred, truth)?;
    let mut total = F::zero();
    for (&y, &t) in pred.iter().zip(truth.iter()) {
        let d = y - F::from(t).unwrap();
        total = total + d * d;
    }
    Ok(total / F::from(pred.len()).unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform_pred(v: f64) -> Array2<f64> {
        Array2::from_elem((8, 8), v)
    }

    fn checker_truth() -> Array2<u8> {
        Array2::from_shape_fn((8, 8), |(y, x)| ((x + y) % 2) as u8)
    }

    #[test]
    fn bce_of_uniform_half_is_ln_two() {
        let loss = bce_loss(&uniform_pred(0.5), &checker_truth()).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        // ln 2 ≈ 0.693147
        assert!((loss - 0.693147).abs() < 1e-6);
    }

    #[test]
    fn bce_vanishes_as_pred_approaches_truth() {
        let truth = checker_truth();
        let mut last = f64::INFINITY;
        for eps in [0.1, 0.01, 0.001, 1e-6] {
            let pred = truth.mapv(|t| if t > 0 { 1.0 - eps } else { eps });
            let loss = bce_loss(&pred, &truth).unwrap();
            assert!(loss < last);
            last = loss;
        }
        assert!(last < 1e-5);
    }

    #[test]
    fn mse_analytic_values() {
        let truth = Array2::from_elem((8, 8), 1u8);
        assert_eq!(mse_loss(&uniform_pred(0.5), &truth).unwrap(), 0.25);
        let pred = truth.mapv(f64::from);
        assert_eq!(mse_loss(&pred, &truth).unwrap(), 0.0);
    }

    #[test]
    fn losses_match_per_pixel_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            let pred = Array2::from_shape_fn((8, 8), |_| rng.random_range(1e-6..1.0 - 1e-6));
            let truth = Array2::from_shape_fn((8, 8), |_| rng.random_range(0..2u8));

            // brute-force per-pixel loops, independent of the implementation
            let mut bce_sum = 0.0f64;
            let mut mse_sum = 0.0f64;
            for y in 0..8 {
                for x in 0..8 {
                    let p: f64 = pred[(y, x)];
                    let t = f64::from(truth[(y, x)]);
                    bce_sum += -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
                    mse_sum += (p - t) * (p - t);
                }
            }
            let bce = bce_loss(&pred, &truth).unwrap();
            let mse = mse_loss(&pred, &truth).unwrap();
            assert!((bce - bce_sum / 64.0).abs() <= 1e-12 * bce_sum.abs().max(1.0));
            assert!((mse - mse_sum / 64.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let pred = Array2::from_elem((8, 9), 0.5f64);
        assert!(matches!(
            bce_loss(&pred, &checker_truth()),
            Err(ObjectiveError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            mse_loss(&pred, &checker_truth()),
            Err(ObjectiveError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn non_finite_rejected() {
        let mut pred = uniform_pred(0.5);
        pred[(0, 0)] = f64::NAN;
        assert!(matches!(
            bce_loss(&pred, &checker_truth()),
            Err(ObjectiveError::NonFinite)
        ));
    }

    #[test]
    fn decreasing_a_correct_pixel_increases_bce() {
        let truth = checker_truth();
        let good = truth.mapv(|t| if t > 0 { 0.9 } else { 0.1 });
        let base = bce_loss(&good, &truth).unwrap();
        let mut worse = good.clone();
        // find a foreground pixel and lower its probability
        worse[(0, 1)] = 0.5;
        assert_eq!(truth[(0, 1)], 1);
        assert!(bce_loss(&worse, &truth).unwrap() > base);
    }
}
