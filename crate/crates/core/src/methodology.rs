//! Closed-form projections used to estimate variant run times from
//! measurements of the base engine.

use crate::{Error, Result};

/// Projected run time when the ORAM share `oram_time` of `total` is sped up
/// by a factor of `speedup`: `total - oram_time + oram_time / speedup`.
pub fn simulate_parallel_time(total: f64, oram_time: f64, speedup: f64) -> Result<f64> {
    if !(total.is_finite() && oram_time.is_finite() && speedup.is_finite()) {
        return Err(Error::Domain("inputs must be finite".into()));
    }
    if oram_time < 0.0 || oram_time > total {
        return Err(Error::Domain(format!("ORAM time {oram_time} must lie in [0, {total}]")));
    }
    if speedup <= 0.0 {
        return Err(Error::Domain(format!("speedup {speedup} must be positive")));
    }
    Ok(total - oram_time + oram_time / speedup)
}

/// Projected run time when each eviction interval hides preload work:
/// interval `i` discounts `min(gaps[i], refreshes[i])` from `total`.
pub fn simulate_eager_time(total: f64, gaps: &[f64], refreshes: &[f64]) -> Result<f64> {
    if gaps.len() != refreshes.len() {
        return Err(Error::Domain(format!(
            "{} gaps but {} refresh times",
            gaps.len(),
            refreshes.len()
        )));
    }
    if gaps.iter().chain(refreshes).any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::Domain(
            "gaps and refresh times must be finite and non-negative".into(),
        ));
    }
    let discount: f64 = gaps.iter().zip(refreshes).map(|(g, r)| g.min(*r)).sum();
    if discount > total {
        return Err(Error::Domain(format!("discount {discount} exceeds total {total}")));
    }
    Ok(total - discount)
}

/// Share of `oram_time` spent creating threads, in percent.
pub fn spawn_share_percent(spawn_time: f64, oram_time: f64) -> f64 {
    if oram_time <= 0.0 {
        0.0
    } else {
        100.0 * spawn_time / oram_time
    }
}
