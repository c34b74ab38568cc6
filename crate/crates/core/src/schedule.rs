//! Variance-preserving noise schedules and loss weighting.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Times are clamped into `[T_EPS, 1 - T_EPS]` wherever the log-SNR or its
/// derivative is evaluated.
pub const T_EPS: f64 = 1e-5;

pub fn clamp_time(t: f64) -> f64 {
    t.clamp(T_EPS, 1.0 - T_EPS)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// `alpha = cos(pi t / 2)`, `sigma = sin(pi t / 2)`.
    Cosine,
    /// Log-SNR linear in `t` from `lambda_max` down to `lambda_min`.
    LinearLogSnr { lambda_max: f64, lambda_min: f64 },
}

/// Weighting `w_t` of the noise-prediction loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// `-1/2 w_t lambda'_t = 1`: the plain squared-error loss.
    #[default]
    Epsilon,
    /// `w_t = 1`: the unweighted variational bound.
    Elbo,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    #[serde(default)]
    pub weighting: Weighting,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::cosine()
    }
}

impl NoiseSchedule {
    pub fn cosine() -> Self {
        NoiseSchedule {
            kind: ScheduleKind::Cosine,
            weighting: Weighting::Epsilon,
        }
    }

    pub fn linear_log_snr(lambda_max: f64, lambda_min: f64) -> Self {
        NoiseSchedule {
            kind: ScheduleKind::LinearLogSnr {
                lambda_max,
                lambda_min,
            },
            weighting: Weighting::Epsilon,
        }
    }

    pub fn with_weighting(mut self, weighting: Weighting) -> Self {
        self.weighting = weighting;
        self
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::LinearLogSnr { .. } => "linear-log-snr",
        }
    }

    pub fn alpha(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Cosine => (0.5 * PI * t).cos(),
            ScheduleKind::LinearLogSnr { .. } => crate::tensor::sigmoid(self.log_snr_raw(t)).sqrt(),
        }
    }

    pub fn sigma(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Cosine => (0.5 * PI * t).sin(),
            ScheduleKind::LinearLogSnr { .. } => crate::tensor::sigmoid(-self.log_snr_raw(t)).sqrt(),
        }
    }

    fn log_snr_raw(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Cosine => {
                let u = 0.5 * PI * t;
                2.0 * (u.cos() / u.sin()).ln()
            }
            ScheduleKind::LinearLogSnr {
                lambda_max,
                lambda_min,
            } => lambda_max + t * (lambda_min - lambda_max),
        }
    }

    /// `lambda_t = log(alpha_t^2 / sigma_t^2)` at the clamped time.
    pub fn log_snr(&self, t: f64) -> f64 {
        self.log_snr_raw(clamp_time(t))
    }

    /// `d lambda / dt` at the clamped time; strictly negative.
    pub fn log_snr_derivative(&self, t: f64) -> f64 {
        let t = clamp_time(t);
        match self.kind {
            // lambda = 2 ln cot(pi t / 2)  =>  lambda' = -2 pi / sin(pi t)
            ScheduleKind::Cosine => -2.0 * PI / (PI * t).sin(),
            ScheduleKind::LinearLogSnr {
                lambda_max,
                lambda_min,
            } => lambda_min - lambda_max,
        }
    }

    /// `w_t`.
    pub fn weight(&self, t: f64) -> f64 {
        match self.weighting {
            Weighting::Epsilon => -2.0 / self.log_snr_derivative(t),
            Weighting::Elbo => 1.0,
        }
    }

    /// The factor `-1/2 w_t lambda'_t` multiplying the squared noise error.
    pub fn loss_weight(&self, t: f64) -> f64 {
        match self.weighting {
            Weighting::Epsilon => 1.0,
            Weighting::Elbo => -0.5 * self.log_snr_derivative(t),
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        if let ScheduleKind::LinearLogSnr {
            lambda_max,
            lambda_min,
        } = self.kind
        {
            if !(lambda_max > lambda_min) || !lambda_max.is_finite() || !lambda_min.is_finite() {
                return Err(crate::Error::invalid("log-SNR must decrease: need lambda_max > lambda_min"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> impl Iterator<Item = f64> {
        (0..=1000).map(|i| clamp_time(i as f64 / 1000.0))
    }

    fn schedules() -> [NoiseSchedule; 2] {
        [NoiseSchedule::cosine(), NoiseSchedule::linear_log_snr(8.0, -8.0)]
    }

    #[test]
    fn variance_preserving_on_grid() {
        for s in schedules() {
            for t in grid() {
                let (a, sg) = (s.alpha(t), s.sigma(t));
                assert!((a * a + sg * sg - 1.0).abs() < 1e-12, "{} at {t}", s.name());
            }
        }
    }

    #[test]
    fn log_snr_matches_alpha_sigma() {
        for s in schedules() {
            for t in grid() {
                let (a, sg) = (s.alpha(t), s.sigma(t));
                let direct = (a * a / (sg * sg)).ln();
                assert!((direct - s.log_snr(t)).abs() < 1e-10, "{} at {t}", s.name());
            }
        }
    }

    #[test]
    fn log_snr_strictly_decreasing() {
        for s in schedules() {
            let vals: Vec<f64> = grid().map(|t| s.log_snr(t)).collect();
            assert!(vals.windows(2).all(|w| w[1] < w[0]));
            assert!(grid().all(|t| s.log_snr_derivative(t) < 0.0));
        }
    }

    #[test]
    fn derivative_matches_numeric_differentiation() {
        let s = NoiseSchedule::cosine();
        for i in 1..100 {
            let t = i as f64 / 100.0;
            let h = 1e-6;
            let fd = (s.log_snr(t + h) - s.log_snr(t - h)) / (2.0 * h);
            let an = s.log_snr_derivative(t);
            assert!((fd - an).abs() <= 1e-6 * an.abs(), "t={t}: {fd} vs {an}");
        }
    }

    #[test]
    fn epsilon_weighting_gives_unit_loss_weight() {
        let s = NoiseSchedule::cosine();
        for t in grid() {
            let w = -0.5 * s.weight(t) * s.log_snr_derivative(t);
            assert!((w - 1.0).abs() < 1e-12);
            assert_eq!(s.loss_weight(t), 1.0);
        }
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        let s = NoiseSchedule::cosine();
        assert_eq!((s.alpha(0.0), s.sigma(0.0)), (1.0, 0.0));
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((s.alpha(0.5) - h).abs() < 1e-15 && (s.sigma(0.5) - h).abs() < 1e-15);
    }

    #[test]
    fn rejects_increasing_log_snr() {
        assert!(NoiseSchedule::linear_log_snr(-1.0, 1.0).validate().is_err());
    }
}
