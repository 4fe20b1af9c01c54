//! Interval estimators for binomial proportions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Two-sided 97.5% standard-normal quantile.
pub const Z_95: f64 = 1.959964;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum IntervalMethod {
    #[default]
    Wilson,
    Wald,
}

impl IntervalMethod {
    pub fn interval(self, successes: u64, n: u64, confidence: f64) -> Result<ProportionCI> {
        match self {
            IntervalMethod::Wilson => wilson_interval(successes, n, confidence),
            IntervalMethod::Wald => wald_interval(successes, n, confidence),
        }
    }
}

impl std::str::FromStr for IntervalMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "wilson" => Ok(Self::Wilson),
            "wald" => Ok(Self::Wald),
            other => Err(Error::validation(format!("unknown interval method {other:?}"))),
        }
    }
}

impl std::fmt::Display for IntervalMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            IntervalMethod::Wilson => "wilson",
            IntervalMethod::Wald => "wald",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProportionCI {
    /// Observed proportion `successes / n`.
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub method: IntervalMethod,
    pub confidence: f64,
    pub n: u64,
    pub successes: u64,
}

/// Two-sided normal quantile for the given confidence level.
pub fn z_for_confidence(confidence: f64) -> Result<f64> {
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::validation(format!(
            "confidence must lie in (0, 1), got {confidence}"
        )));
    }
    if (confidence - 0.95).abs() < 1e-12 {
        return Ok(Z_95);
    }
    use statrs::distribution::{ContinuousCDF, Normal};
    let std_normal = Normal::standard();
    Ok(std_normal.inverse_cdf(1.0 - (1.0 - confidence) / 2.0))
}

fn check_counts(successes: u64, n: u64) -> Result<()> {
    if n == 0 {
        return Err(Error::validation("proportion interval requires n >= 1"));
    }
    if successes > n {
        return Err(Error::validation(format!(
            "successes ({successes}) exceed trials ({n})"
        )));
    }
    Ok(())
}

/// Wilson score interval.
pub fn wilson_interval(successes: u64, n: u64, confidence: f64) -> Result<ProportionCI> {
    check_counts(successes, n)?;
    let z = z_for_confidence(confidence)?;
    let nf = n as f64;
    let p = successes as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = (z / denom) * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
    // The closed form reaches the boundary exactly only in exact arithmetic.
    let lower = if successes == 0 { 0.0 } else { (center - half).max(0.0) };
    let upper = if successes == n { 1.0 } else { (center + half).min(1.0) };
    Ok(ProportionCI {
        point: p,
        lower,
        upper,
        method: IntervalMethod::Wilson,
        confidence,
        n,
        successes,
    })
}

/// Normal-approximation interval `p ± z·sqrt(p(1-p)/n)`, clipped to `[0, 1]`.
pub fn wald_interval(successes: u64, n: u64, confidence: f64) -> Result<ProportionCI> {
    check_counts(successes, n)?;
    let z = z_for_confidence(confidence)?;
    let nf = n as f64;
    let p = successes as f64 / nf;
    let half = z * (p * (1.0 - p) / nf).sqrt();
    Ok(ProportionCI {
        point: p,
        lower: (p - half).max(0.0),
        upper: (p + half).min(1.0),
        method: IntervalMethod::Wald,
        confidence,
        n,
        successes,
    })
}

/// `correct / total`, computed from exact integer counts.
pub fn accuracy(correct: u64, total: u64) -> Result<f64> {
    if total == 0 {
        return Err(Error::validation("accuracy of an empty set is undefined"));
    }
    if correct > total {
        return Err(Error::validation(format!(
            "correct ({correct}) exceeds total ({total})"
        )));
    }
    Ok(correct as f64 / total as f64)
}
