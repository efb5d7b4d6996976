//! Virtual time on an integer base-tick grid.
//!
//! Every simulation fixes a base frequency (1 THz unless configured). Virtual
//! time is a count of base ticks, and every component or connection frequency
//! must divide the base frequency so that its cycle period is a whole number
//! of ticks.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::SimError;

/// Default base frequency: 1 THz, i.e. one tick per picosecond.
pub const DEFAULT_BASE_HZ: u64 = 1_000_000_000_000;

/// A point in virtual time, in base ticks.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct VTime(pub u64);

impl VTime {
    pub const ZERO: VTime = VTime(0);

    pub fn ticks(self) -> u64 {
        self.0
    }

    pub fn saturating_sub(self, ticks: u64) -> VTime {
        VTime(self.0.saturating_sub(ticks))
    }
}

impl std::ops::Add<u64> for VTime {
    type Output = VTime;

    fn add(self, ticks: u64) -> VTime {
        VTime(self.0 + ticks)
    }
}

impl fmt::Display for VTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A clock frequency in Hz.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Freq(pub u64);

impl Freq {
    pub const fn hz(hz: u64) -> Freq {
        Freq(hz)
    }

    pub const fn mhz(mhz: u64) -> Freq {
        Freq(mhz * 1_000_000)
    }

    pub const fn ghz(ghz: u64) -> Freq {
        Freq(ghz * 1_000_000_000)
    }
}

/// A validated cycle period in base ticks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Period(u64);

impl Period {
    pub fn ticks(self) -> u64 {
        self.0
    }

    /// Smallest multiple of this period strictly greater than `now`.
    #[inline]
    pub fn next_after(self, now: VTime) -> VTime {
        VTime((now.0 / self.0 + 1) * self.0)
    }

    /// `cycles` whole periods, in ticks.
    pub fn cycles(self, cycles: u64) -> u64 {
        self.0 * cycles
    }
}

/// The base frequency of one simulation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TimeBase {
    base_hz: u64,
}

impl Default for TimeBase {
    fn default() -> Self {
        TimeBase {
            base_hz: DEFAULT_BASE_HZ,
        }
    }
}

impl TimeBase {
    pub fn new(base_hz: u64) -> Result<TimeBase, SimError> {
        if base_hz == 0 {
            return Err(SimError::Frequency {
                freq_hz: 0,
                base_hz,
            });
        }
        Ok(TimeBase { base_hz })
    }

    pub fn base_hz(&self) -> u64 {
        self.base_hz
    }

    /// Cycle period of `freq` in base ticks. Fails unless `freq` divides the
    /// base frequency exactly.
    pub fn period(&self, freq: Freq) -> Result<Period, SimError> {
        if freq.0 == 0 || freq.0 > self.base_hz || !self.base_hz.is_multiple_of(freq.0) {
            return Err(SimError::Frequency {
                freq_hz: freq.0,
                base_hz: self.base_hz,
            });
        }
        Ok(Period(self.base_hz / freq.0))
    }

    /// Smallest multiple of `period(freq)` strictly greater than `now`.
    pub fn next_cycle_time(&self, now: VTime, freq: Freq) -> Result<VTime, SimError> {
        Ok(self.period(freq)?.next_after(now))
    }

    pub fn to_secs(&self, t: VTime) -> f64 {
        t.0 as f64 / self.base_hz as f64
    }

    pub fn to_ns(&self, ticks: u64) -> f64 {
        ticks as f64 * 1e9 / self.base_hz as f64
    }

    /// Ticks spanned by `ns` nanoseconds, if that is a whole number of ticks.
    pub fn ns_to_ticks(&self, ns: u64) -> Option<u64> {
        let num = (ns as u128) * (self.base_hz as u128);
        if !num.is_multiple_of(1_000_000_000) {
            return None;
        }
        u64::try_from(num / 1_000_000_000).ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn next_cycle_between_boundaries() {
        let tb = TimeBase::default();
        assert_eq!(
            tb.next_cycle_time(VTime(2500), Freq::ghz(1)).unwrap(),
            VTime(3000)
        );
    }

    #[test]
    fn next_cycle_on_boundary_is_strict() {
        let tb = TimeBase::default();
        assert_eq!(
            tb.next_cycle_time(VTime(3000), Freq::ghz(1)).unwrap(),
            VTime(4000)
        );
        assert_eq!(
            tb.next_cycle_time(VTime(0), Freq::ghz(1)).unwrap(),
            VTime(1000)
        );
    }

    #[test]
    fn non_dividing_frequency_is_rejected() {
        let tb = TimeBase::default();
        assert!(matches!(
            tb.next_cycle_time(VTime(0), Freq::ghz(3)),
            Err(SimError::Frequency { .. })
        ));
        assert!(tb.period(Freq::hz(0)).is_err());
        assert!(tb.period(Freq::hz(DEFAULT_BASE_HZ * 2)).is_err());
    }

    #[test]
    fn ns_conversion() {
        let tb = TimeBase::default();
        assert_eq!(tb.ns_to_ticks(10), Some(10_000));
        assert_eq!(tb.to_ns(20_000), 20.0);
        let coarse = TimeBase::new(1_000_000).unwrap();
        assert_eq!(coarse.ns_to_ticks(1), None);
        assert_eq!(coarse.ns_to_ticks(1000), Some(1));
    }
}
