//! Exact run-clock arithmetic.
//!
//! Virtual runs keep every timestamp as an integer number of nanoseconds so
//! that event-by-event accumulation and the closed-form makespan formulas
//! agree bit for bit once converted back to seconds.

use std::time::Duration;

/// Converts non-negative decimal seconds to the nearest nanosecond.
///
/// Negative and non-finite inputs saturate to zero.
pub fn secs(s: f64) -> Duration {
    if !s.is_finite() || s <= 0.0 {
        return Duration::ZERO;
    }
    Duration::from_nanos((s * 1e9).round() as u64)
}

/// Seconds as `f64`; the single conversion used by every trace and report.
pub fn to_secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounds_to_nearest_nanosecond() {
        assert_eq!(secs(32.94).as_nanos(), 32_940_000_000);
        assert_eq!(secs(17.23).as_nanos(), 17_230_000_000);
        assert_eq!(secs(1e-10), Duration::ZERO);
        assert_eq!(secs(-1.0), Duration::ZERO);
        assert_eq!(secs(f64::NAN), Duration::ZERO);
    }

    #[test]
    fn round_trip_for_table_values() {
        for v in [8.68, 5.57, 24.39, 26.61, 161.52, 0.05] {
            assert_eq!(to_secs(secs(v)), v);
        }
    }
}
