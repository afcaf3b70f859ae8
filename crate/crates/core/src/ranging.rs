//! Timing-to-distance math for the SX1280 ranging engine.
//!
//! The master times the interval `T_A` from the end of its request to the end
//! of the slave's response. The slave-side part of that interval, `T_B`, is a
//! fixed 17 symbols (silence plus response), so the time of flight is
//! `T_A - T_B` and the one-way distance is `c (T_A - T_B) / 2`. A relative
//! oscillator offset `δ` between the two radios stretches the slave's `T_B`
//! by `(1 + δ)` as seen by the master; correcting for it gives
//! `c (T_A - (1 + δ) T_B) / 2`.

use crate::frame::RadioConfig;
use crate::types::{Position, SPEED_OF_LIGHT};
use thiserror::Error;

/// Switching delay in symbols.
pub const SWITCHING_DELAY_SYMBOLS: f64 = 2.0;
/// Slave-side fixed duration in symbols.
pub const SLAVE_DURATION_SYMBOLS: f64 = 17.0;
/// Largest oscillator offset the SX1280 tolerates at SF8 / 1625 kHz.
pub const MAX_OSCILLATOR_OFFSET: f64 = 80e-6;
/// Noise allowance before a corrected distance counts as negative, meters.
const NEGATIVE_TOLERANCE_M: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum RangingError {
    #[error("negative time of flight: t_a={t_a:e} s < t_b={t_b:e} s")]
    NegativeToF { t_a: f64, t_b: f64 },
    #[error("oscillator offset {0:e} exceeds ±80 ppm")]
    OffsetOutOfRange(f64),
    #[error("calibration data is degenerate: {0}")]
    DegenerateData(&'static str),
}

/// Symbol-derived durations of one exchange plus the measured round trip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangingTiming {
    pub t_s: f64,
    pub t_d: f64,
    pub t_b: f64,
    pub t_a: f64,
}

impl RangingTiming {
    pub fn new(config: &RadioConfig, t_a: f64) -> Self {
        let t_s = config.symbol_duration();
        Self {
            t_s,
            t_d: SWITCHING_DELAY_SYMBOLS * t_s,
            t_b: SLAVE_DURATION_SYMBOLS * t_s,
            t_a,
        }
    }

    /// `T_B` for a radio configuration.
    pub fn slave_duration(config: &RadioConfig) -> f64 {
        SLAVE_DURATION_SYMBOLS * config.symbol_duration()
    }

    pub fn time_of_flight(&self) -> f64 {
        self.t_a - self.t_b
    }

    pub fn distance(&self) -> Result<f64, RangingError> {
        distance_from_tof(self.t_a, self.t_b)
    }

    pub fn corrected(&self, offset: OscillatorOffset) -> Result<f64, RangingError> {
        corrected_distance(self.t_a, self.t_b, offset.value())
    }
}

/// Relative oscillator offset `δ = (f_M - f_S) / f_0`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default)]
pub struct OscillatorOffset(f64);

impl OscillatorOffset {
    pub fn new(delta: f64) -> Result<Self, RangingError> {
        if delta.abs() > MAX_OSCILLATOR_OFFSET || !delta.is_finite() {
            return Err(RangingError::OffsetOutOfRange(delta));
        }
        Ok(Self(delta))
    }

    /// Offset between a master and slave whose crystals deviate by the given
    /// parts per million.
    pub fn between_ppm(master_ppm: f64, slave_ppm: f64) -> Result<Self, RangingError> {
        Self::new((master_ppm - slave_ppm) * 1e-6)
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

pub fn distance_from_tof(t_a: f64, t_b: f64) -> Result<f64, RangingError> {
    if t_a < t_b {
        return Err(RangingError::NegativeToF { t_a, t_b });
    }
    Ok(SPEED_OF_LIGHT * (t_a - t_b) / 2.0)
}

/// Distance error caused by an oscillator offset over `t_b`.
pub fn drift_error(delta: f64, t_b: f64) -> f64 {
    SPEED_OF_LIGHT * delta * t_b / 2.0
}

/// Drift-compensated distance. Tolerates up to 1 m of negative result before
/// reporting [`RangingError::NegativeToF`].
pub fn corrected_distance(t_a: f64, t_b: f64, delta: f64) -> Result<f64, RangingError> {
    let raw = SPEED_OF_LIGHT * (t_a - t_b) / 2.0;
    let d = raw - drift_error(delta, t_b);
    if d < -NEGATIVE_TOLERANCE_M {
        return Err(RangingError::NegativeToF { t_a, t_b });
    }
    Ok(d)
}

/// Time difference a passive listener observes between the master's request
/// and the slave's response: `(t_MS + t_SA) - t_MA`.
pub fn passive_delta_t(master: &Position, slave: &Position, listener: &Position) -> f64 {
    let t_ms = master.distance(slave) / SPEED_OF_LIGHT;
    let t_sa = slave.distance(listener) / SPEED_OF_LIGHT;
    let t_ma = master.distance(listener) / SPEED_OF_LIGHT;
    (t_ms + t_sa) - t_ma
}

/// Linear map from a raw ranging measurement to true distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationModel {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

impl CalibrationModel {
    pub const IDENTITY: Self = Self {
        slope: 1.0,
        intercept: 0.0,
        r_squared: 1.0,
    };

    pub fn apply(&self, raw: f64) -> f64 {
        self.slope * raw + self.intercept
    }
}

/// Ordinary least squares of true distance on raw measurement.
pub fn fit_calibration(samples: &[(f64, f64)]) -> Result<CalibrationModel, RangingError> {
    if samples.len() < 2 {
        return Err(RangingError::DegenerateData("need at least two samples"));
    }
    let n = samples.len() as f64;
    let mean_x = samples.iter().map(|s| s.0).sum::<f64>() / n;
    let mean_y = samples.iter().map(|s| s.1).sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in samples {
        let (dx, dy) = (x - mean_x, y - mean_y);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let scale = samples.iter().map(|s| s.0.abs()).fold(1.0, f64::max);
    if sxx <= (scale * 1e-12).powi(2) * n {
        return Err(RangingError::DegenerateData("all raw measurements are equal"));
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let r_squared = if syy > 0.0 {
        let ss_res: f64 = samples
            .iter()
            .map(|&(x, y)| (y - (slope * x + intercept)).powi(2))
            .sum();
        (1.0 - ss_res / syy).clamp(0.0, 1.0)
    } else {
        1.0
    };
    Ok(CalibrationModel {
        slope,
        intercept,
        r_squared,
    })
}
