//! Node-local time base.

use serde::{Deserialize, Serialize};

/// Node RTC frequency. Node timers fire on ticks of this clock.
pub const RTC_HZ: f64 = 32_768.0;

/// Maps true time to a node's drifting local time:
/// `local = offset + t * (1 + ppm * 1e-6)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LocalClock {
    pub ppm: f64,
    pub offset_s: f64,
}

impl LocalClock {
    pub fn new(ppm: f64, offset_s: f64) -> Self {
        Self { ppm, offset_s }
    }

    pub fn rate(&self) -> f64 {
        1.0 + self.ppm * 1e-6
    }

    pub fn local(&self, true_s: f64) -> f64 {
        self.offset_s + true_s * self.rate()
    }

    pub fn true_time(&self, local_s: f64) -> f64 {
        (local_s - self.offset_s) / self.rate()
    }

    /// First RTC tick at or after `local_s`.
    pub fn quantize(local_s: f64) -> f64 {
        let ticks = local_s * RTC_HZ;
        // absorb float noise so exact tick values stay put
        let nearest = ticks.round();
        if (ticks - nearest).abs() < 1e-6 {
            nearest / RTC_HZ
        } else {
            ticks.ceil() / RTC_HZ
        }
    }

    /// Divergence between two clocks after `true_s` seconds.
    pub fn divergence(&self, other: &LocalClock, true_s: f64) -> f64 {
        (self.local(true_s) - other.local(true_s)).abs()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn opposed_10ppm_diverge_per_day() {
        let a = LocalClock::new(10.0, 0.0);
        let b = LocalClock::new(-10.0, 0.0);
        assert!((a.divergence(&b, 86_400.0) - 1.728).abs() < 1e-9);
    }

    #[test]
    fn quantize_ticks() {
        assert_eq!(LocalClock::quantize(1.0), 1.0);
        assert_eq!(LocalClock::quantize(1.0 + 1e-7), 1.0 + 1.0 / RTC_HZ);
    }

    proptest! {
        #[test]
        fn round_trip(ppm in -100.0..100.0f64, off in -10.0..10.0f64, t in 0.0..1e7f64) {
            let c = LocalClock::new(ppm, off);
            prop_assert!((c.true_time(c.local(t)) - t).abs() < 1e-7);
        }

        #[test]
        fn quantize_never_early(l in 0.0..1e6f64) {
            let q = LocalClock::quantize(l);
            prop_assert!(q >= l - 1e-6 / RTC_HZ);
            prop_assert!(q - l < 1.0 / RTC_HZ + 1e-9);
        }
    }
}
