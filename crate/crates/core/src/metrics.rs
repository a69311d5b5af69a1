//! Evaluation: force RMSE, relative error under noise, path departure and
//! sideslip phase-plane data.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Peak lateral offset of the standard reference path, m.
pub const REFERENCE_PEAK: f64 = 1.8;

pub fn rmse(truth: &[f64], estimate: &[f64]) -> Result<f64> {
    if truth.len() != estimate.len() {
        return Err(Error::LengthMismatch(truth.len(), estimate.len()));
    }
    if truth.is_empty() {
        return Err(Error::Config("RMSE of an empty sequence".into()));
    }
    let s: f64 = truth.iter().zip(estimate).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((s / truth.len() as f64).sqrt())
}

pub fn relative_error(rmse_perturbed: f64, rmse_nominal: f64) -> Result<f64> {
    if !(rmse_nominal > 0.0) {
        return Err(Error::ZeroNominal);
    }
    Ok((rmse_perturbed - rmse_nominal).abs() / rmse_nominal)
}

/// Maximum |Y - Y_ref| and its share of the reference peak, in percent.
pub fn path_departure(y: &[f64], y_ref: &[f64]) -> Result<(f64, f64)> {
    if y.len() != y_ref.len() {
        return Err(Error::LengthMismatch(y.len(), y_ref.len()));
    }
    let max = y.iter().zip(y_ref).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok((max, max / REFERENCE_PEAK * 100.0))
}

/// (t, beta, beta_dot) with beta_dot from central differences, one-sided
/// at the ends.
pub fn phase_plane(t: &[f64], beta: &[f64]) -> Result<Vec<(f64, f64, f64)>> {
    if t.len() != beta.len() {
        return Err(Error::LengthMismatch(t.len(), beta.len()));
    }
    let n = t.len();
    if n < 2 {
        return Ok(t.iter().zip(beta).map(|(&a, &b)| (a, b, 0.0)).collect());
    }
    Ok((0..n)
        .map(|i| {
            let (a, b) = match i {
                0 => (0, 1),
                _ if i == n - 1 => (n - 2, n - 1),
                _ => (i - 1, i + 1),
            };
            (t[i], beta[i], (beta[b] - beta[a]) / (t[b] - t[a]))
        })
        .collect())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    /// per-channel force RMSE, N, in `FORCE_CHANNELS` order
    pub force_rmse: [f64; 8],
    pub max_departure: f64,
    /// max departure as a percentage of the reference peak
    pub departure_rate: f64,
    pub max_abs_beta: f64,
    pub max_abs_yaw_rate: f64,
    /// filled when compared against a nominal run
    #[serde(default)]
    pub relative_error: Option<[f64; 8]>,
}

/// Per-channel RMSE of two equally long series of 8-channel rows.
pub fn channel_rmse(truth: &[[f64; 8]], est: &[[f64; 8]]) -> Result<[f64; 8]> {
    if truth.len() != est.len() {
        return Err(Error::LengthMismatch(truth.len(), est.len()));
    }
    let mut out = [0.0; 8];
    for (c, o) in out.iter_mut().enumerate() {
        let a: Vec<f64> = truth.iter().map(|r| r[c]).collect();
        let b: Vec<f64> = est.iter().map(|r| r[c]).collect();
        *o = rmse(&a, &b)?;
    }
    Ok(out)
}

pub fn channel_relative_error(perturbed: &[f64; 8], nominal: &[f64; 8]) -> Result<[f64; 8]> {
    let mut out = [0.0; 8];
    for i in 0..8 {
        out[i] = relative_error(perturbed[i], nominal[i])?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rmse_basics() {
        let a = [1.0, -2.0, 3.5];
        assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        let b: Vec<f64> = a.iter().map(|v| v + 1.0).collect();
        assert!((rmse(&a, &b).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(rmse(&a, &a[..2]), Err(Error::LengthMismatch(3, 2))));
    }

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(2.0, 2.0).unwrap(), 0.0);
        assert_eq!(relative_error(4.0, 2.0).unwrap(), 1.0);
        assert!(matches!(relative_error(1.0, 0.0), Err(Error::ZeroNominal)));
    }

    #[test]
    fn departure_basics() {
        let r = [0.0, 1.0, 1.8, 0.5];
        assert_eq!(path_departure(&r, &r).unwrap(), (0.0, 0.0));
        let y: Vec<f64> = r.iter().map(|v| v + 0.9).collect();
        let (m, p) = path_departure(&y, &r).unwrap();
        assert!((m - 0.9).abs() < 1e-12 && (p - 50.0).abs() < 1e-9);
    }

    #[test]
    fn phase_plane_differences() {
        let t: Vec<f64> = (0..5).map(|i| i as f64 * 0.1).collect();
        let b: Vec<f64> = t.iter().map(|x| x * x).collect();
        let pp = phase_plane(&t, &b).unwrap();
        // central difference is exact for a quadratic at interior points
        assert!((pp[2].2 - 0.4).abs() < 1e-12);
        assert!((pp[0].2 - 0.1).abs() < 1e-12);
        assert!((pp[4].2 - 0.7).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn rmse_symmetric_and_permutation_invariant(v in proptest::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 1..40), rot in 0usize..40) {
            let a: Vec<f64> = v.iter().map(|p| p.0).collect();
            let b: Vec<f64> = v.iter().map(|p| p.1).collect();
            let r = rmse(&a, &b).unwrap();
            prop_assert!((r - rmse(&b, &a).unwrap()).abs() <= 1e-12 * r.max(1.0));
            let k = rot % a.len();
            let mut a2 = a.clone();
            let mut b2 = b.clone();
            a2.rotate_left(k);
            b2.rotate_left(k);
            prop_assert!((r - rmse(&a2, &b2).unwrap()).abs() <= 1e-9 * r.max(1.0));
        }

        #[test]
        fn relative_error_scale_invariant(p in 0.01f64..100.0, n in 0.01f64..100.0, s in 0.01f64..100.0) {
            let a = relative_error(p, n).unwrap();
            let b = relative_error(s * p, s * n).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
        }
    }
}
