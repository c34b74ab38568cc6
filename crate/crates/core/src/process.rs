//! The forward (noising) process.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Condition;
use crate::schedule::NoiseSchedule;

/// A data vector paired with its condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionedSample {
    pub x: Vec<f64>,
    pub c: Condition,
}

impl ConditionedSample {
    pub fn new(x: Vec<f64>, c: Condition) -> Self {
        ConditionedSample { x, c }
    }
}

/// `z_t = alpha_t x + sigma_t eps`.
pub fn forward_draw(x: &[f64], t: f64, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    if x.len() != eps.len() {
        return Err(Error::Shape {
            op: "forward_draw",
            left: vec![x.len()],
            right: vec![eps.len()],
        });
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("time {t} outside [0, 1]")));
    }
    let (a, s) = (sched.alpha(t), sched.sigma(t));
    Ok(x.iter().zip(eps).map(|(xi, ei)| a * xi + s * ei).collect())
}

/// Offset noise: one scalar draw `u` shifts every coordinate by
/// `strength * u`.
pub fn apply_offset_noise(eps: &[f64], strength: f64, u: f64) -> Result<Vec<f64>> {
    if !(strength >= 0.0) {
        return Err(Error::invalid(format!("offset-noise strength {strength} must be >= 0")));
    }
    Ok(eps.iter().map(|e| e + strength * u).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn zero_noise_endpoint_returns_x() {
        let s = NoiseSchedule::cosine();
        assert_eq!(forward_draw(&[1.5, -2.0], 0.0, &[9.0, 9.0], &s).unwrap(), vec![1.5, -2.0]);
    }

    #[test]
    fn cosine_midpoint() {
        let s = NoiseSchedule::cosine();
        let z = forward_draw(&[1.0, 0.0], 0.5, &[0.0, 1.0], &s).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((z[0] - h).abs() < 1e-12 && (z[1] - h).abs() < 1e-12);
    }

    #[test]
    fn zero_data_is_scaled_noise() {
        let s = NoiseSchedule::cosine();
        let z = forward_draw(&[0.0, 0.0], 0.3, &[0.4, -1.0], &s).unwrap();
        assert_eq!(z, vec![s.sigma(0.3) * 0.4, -s.sigma(0.3)]);
    }

    #[test]
    fn shape_mismatch() {
        let s = NoiseSchedule::cosine();
        assert!(forward_draw(&[0.0], 0.3, &[0.4, -1.0], &s).is_err());
    }

    #[test]
    fn linearity() {
        let s = NoiseSchedule::cosine();
        let (x, y, e) = ([1.0, -0.5], [0.2, 3.0], [0.7, -0.1]);
        let (a, b, t) = (2.0, -0.5, 0.37);
        let combo: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let lhs = forward_draw(&combo, t, &e, &s).unwrap();
        let fx = forward_draw(&x, t, &[0.0, 0.0], &s).unwrap();
        let fy = forward_draw(&y, t, &[0.0, 0.0], &s).unwrap();
        for i in 0..2 {
            let rhs = a * fx[i] + b * fy[i] + s.sigma(t) * e[i];
            assert!((lhs[i] - rhs).abs() < 1e-14);
        }
    }

    #[test]
    fn offset_noise_arithmetic() {
        assert_eq!(apply_offset_noise(&[0.3, 0.4], 0.0, 5.0).unwrap(), vec![0.3, 0.4]);
        let out = apply_offset_noise(&[0.0, 0.0], 0.1, 1.0).unwrap();
        assert!((out[0] - 0.1).abs() < 1e-15 && (out[1] - 0.1).abs() < 1e-15);
        assert!(apply_offset_noise(&[0.0], -0.1, 1.0).is_err());
    }

    #[test]
    fn offset_noise_variance() {
        // Monte Carlo over 1e5 draws: per-coordinate variance = 1 + strength^2.
        let strength = 0.5;
        let mut r = rng::seeded(17);
        let n = 100_000;
        let vals: Vec<f64> = (0..n)
            .map(|_| {
                let e = rng::normal(&mut r);
                let u = rng::normal(&mut r);
                apply_offset_noise(&[e], strength, u).unwrap()[0]
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let expected = 1.0 + strength * strength;
        // sd of the sample variance of a normal is var * sqrt(2/(n-1))
        let band = 3.0 * expected * (2.0 / (n - 1) as f64).sqrt();
        assert!((var - expected).abs() < band, "{var} vs {expected}");
    }
}
