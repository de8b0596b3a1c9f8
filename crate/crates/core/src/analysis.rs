//! Analytical calculators for the protocol's security bounds: the
//! committee-capture tail probability and the per-depth finality curve.

use core::fmt;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum AnalysisError {
    /// Probability outside [0, 1].
    BadProbability,
    /// Threshold outside 0..=n.
    BadThreshold,
    /// n must equal 3f + 1.
    BadCommitteeShape,
}

impl fmt::Display for AnalysisError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnalysisError::BadProbability => write!(f, "probability must be within [0, 1]"),
            AnalysisError::BadThreshold => write!(f, "threshold must be within 0..=n"),
            AnalysisError::BadCommitteeShape => write!(f, "n must equal 3f + 1"),
        }
    }
}

/// Upper cumulative binomial: the probability that a stakeholder holding a
/// fraction `p` of the stake controls at least `x` of `n` sampled slots,
/// `sum_{k=x}^{n} C(n,k) p^k (1-p)^(n-k)`.
///
/// Terms are accumulated in log space; the n = 500 tails underflow naive
/// double-precision products.
pub fn binomial_tail(n: u64, p: f64, x: u64) -> Result<f64, AnalysisError> {
    if !(0.0..=1.0).contains(&p) || !p.is_finite() {
        return Err(AnalysisError::BadProbability);
    }
    if x > n {
        return Err(AnalysisError::BadThreshold);
    }
    if x == 0 {
        return Ok(1.0);
    }
    if p == 0.0 {
        return Ok(0.0);
    }
    if p == 1.0 {
        return Ok(1.0);
    }
    let ln_p = libm::log(p);
    let ln_q = libm::log(1.0 - p);
    // ln C(n, k) via the log-gamma function.
    let ln_choose = |k: u64| {
        lgamma(n as f64 + 1.0) - lgamma(k as f64 + 1.0) - lgamma((n - k) as f64 + 1.0)
    };
    let mut sum = 0.0f64;
    for k in x..=n {
        let ln_term = ln_choose(k) + k as f64 * ln_p + (n - k) as f64 * ln_q;
        sum += libm::exp(ln_term);
    }
    Ok(sum.min(1.0))
}

fn lgamma(x: f64) -> f64 {
    libm::lgamma_r(x).0
}

/// Probability that a transaction `d` blocks deep is final, i.e. no longer
/// on a reversible run of attacker-owned slots: `1 - (f/n)^d`.
pub fn finality_probability(d: u32, f: u64, n: u64) -> Result<f64, AnalysisError> {
    if n != 3 * f + 1 {
        return Err(AnalysisError::BadCommitteeShape);
    }
    let ratio = f as f64 / n as f64;
    Ok(1.0 - libm::pow(ratio, d as f64))
}

/// The same curve at the adversarial limit `f/n -> 1/3`.
pub fn finality_probability_limit(d: u32) -> f64 {
    1.0 - libm::pow(1.0 / 3.0, d as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_cases() {
        assert_eq!(binomial_tail(10, 0.3, 0).unwrap(), 1.0);
        assert_eq!(binomial_tail(10, 0.0, 1).unwrap(), 0.0);
        assert_eq!(binomial_tail(10, 1.0, 10).unwrap(), 1.0);
        assert!(binomial_tail(10, 1.5, 0).is_err());
        assert!(binomial_tail(10, 0.5, 11).is_err());
    }

    #[test]
    fn matches_direct_small_cases() {
        // P(X >= 2), X ~ Bin(3, 0.5): (3 + 1) / 8.
        let got = binomial_tail(3, 0.5, 2).unwrap();
        assert!((got - 0.5).abs() < 1e-12);
        // P(X >= 1) = 1 - (1-p)^n.
        let got = binomial_tail(20, 0.1, 1).unwrap();
        let expect = 1.0 - libm::pow(0.9, 20.0);
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn tail_is_monotone_in_threshold() {
        let mut prev = 1.0f64;
        for x in 0..=30 {
            let tail = binomial_tail(30, 0.25, x).unwrap();
            assert!(tail <= prev + 1e-15);
            prev = tail;
        }
    }

    #[test]
    fn finality_curve_shape() {
        assert_eq!(finality_probability_limit(0), 0.0);
        let mut prev = 0.0;
        for d in 1..=10 {
            let p = finality_probability_limit(d);
            assert!(p > prev);
            prev = p;
        }
        assert!(finality_probability(1, 5, 16).is_ok());
        assert!(finality_probability(1, 5, 15).is_err());
        // With n = 3f+1 the ratio is slightly below 1/3.
        let exact = finality_probability(1, 5, 16).unwrap();
        assert!((exact - (1.0 - 5.0 / 16.0)).abs() < 1e-12);
    }
}
