use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Survival function of the chi-square distribution with one degree of
/// freedom, `erfc(sqrt(x / 2))`.
pub fn chi2_sf_1df(x: f64) -> Result<f64> {
    if x.is_nan() || x < 0.0 {
        return Err(Error::Invalid(format!("chi-square statistic {x} is negative")));
    }
    Ok(erfc((x / 2.0).sqrt()).clamp(0.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McNemarResult {
    /// A correct, B wrong.
    pub b: u64,
    /// A wrong, B correct.
    pub c: u64,
    pub chi2: f64,
    pub p: f64,
    pub exact: bool,
}

/// McNemar's test on paired correctness flags.
///
/// By default uses the continuity-corrected statistic `(|b - c| - 1)^2 / (b + c)`
/// against chi-square(1). With `exact`, `p` is the two-sided binomial test of
/// `min(b, c)` successes in `b + c` fair trials; `chi2` is still reported.
pub fn mcnemar(a: &[bool], b: &[bool], exact: bool) -> Result<McNemarResult> {
    if a.len() != b.len() {
        return Err(Error::Invalid(format!("correctness vectors of length {} and {}", a.len(), b.len())));
    }
    let (mut nb, mut nc) = (0u64, 0u64);
    for (&x, &y) in a.iter().zip(b) {
        match (x, y) {
            (true, false) => nb += 1,
            (false, true) => nc += 1,
            _ => {}
        }
    }
    let n = nb + nc;
    if n == 0 {
        return Ok(McNemarResult { b: 0, c: 0, chi2: 0.0, p: 1.0, exact });
    }
    let diff = nb.abs_diff(nc) as f64;
    let chi2 = (diff - 1.0).max(0.0).powi(2) / n as f64;
    let p = if exact {
        let k = nb.min(nc);
        let dist = Binomial::new(0.5, n).expect("valid binomial");
        (2.0 * dist.cdf(k)).min(1.0)
    } else {
        chi2_sf_1df(chi2)?
    };
    Ok(McNemarResult { b: nb, c: nc, chi2, p, exact })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdrReport {
    pub q: f64,
    /// Input indices in ascending p order (stable for ties).
    pub order: Vec<usize>,
    pub sorted_p: Vec<f64>,
    /// Reject flag per input index.
    pub reject: Vec<bool>,
    /// Largest rank `k` (1-based) with `p_(k) <= k q / m`; 0 when none qualifies.
    pub critical_rank: usize,
}

/// Benjamini-Hochberg step-up procedure at false discovery rate `q`.
pub fn benjamini_hochberg(pvalues: &[f64], q: f64) -> Result<FdrReport> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Invalid(format!("FDR level {q} outside (0, 1)")));
    }
    if let Some(p) = pvalues.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Invalid(format!("p-value {p} outside [0, 1]")));
    }
    let m = pvalues.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| pvalues[i].total_cmp(&pvalues[j]));
    let sorted_p: Vec<f64> = order.iter().map(|&i| pvalues[i]).collect();
    let critical_rank = (1..=m).rev().find(|&k| sorted_p[k - 1] <= k as f64 * q / m as f64).unwrap_or(0);
    // Values tied with p_(k) also pass the test at their own rank, so the
    // rejected set is always a prefix of the sorted order.
    let mut reject = vec![false; m];
    for &i in &order[..critical_rank] {
        reject[i] = true;
    }
    Ok(FdrReport { q, order, sorted_p, reject, critical_rank })
}
