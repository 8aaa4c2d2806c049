use super::FeedbackError;

/// Exact upper tail `P[X >= k]` for `X ~ Binomial(n, p0)`.
///
/// The log pmf is built for every outcome from the ratio between consecutive
/// terms, rescaled by its maximum, and summed from `n` downwards. Summing the
/// same terms in a fixed order keeps the tail non-increasing in `k` even where
/// it rounds to 1.
pub fn binomial_test_one_tailed(k: u64, n: u64, p0: f64) -> Result<f64, FeedbackError> {
    if k > n {
        return Err(FeedbackError::Range(format!("k = {k} exceeds n = {n}")));
    }
    if !(p0 > 0.0 && p0 < 1.0) {
        return Err(FeedbackError::Range(format!("p0 = {p0} outside (0, 1)")));
    }
    if k == 0 {
        return Ok(1.0);
    }
    let (ln_p, ln_q) = (p0.ln(), (-p0).ln_1p());
    let mut logs = Vec::with_capacity(n as usize + 1);
    let mut term = n as f64 * ln_q;
    logs.push(term);
    for i in 0..n {
        term += ((n - i) as f64 / (i + 1) as f64).ln() + ln_p - ln_q;
        logs.push(term);
    }
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tail: f64 = logs[k as usize..].iter().rev().map(|l| (l - max).exp()).sum();
    Ok((max.exp() * tail).min(1.0))
}
