use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum FisherError {
    #[error("table has no observations")]
    AllZeroMargins,
}

/// `ln(k!)` for `k = 0..=n`, accumulated from exact logs of integers.
fn log_factorials(n: u64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n as usize + 1);
    out.push(0.0);
    let mut acc = 0.0f64;
    for k in 1..=n {
        acc += (k as f64).ln();
        out.push(acc);
    }
    out
}

/// Two-sided Fisher exact test for `[[a, b], [c, d]]`: the summed
/// hypergeometric probability of every table with the observed margins that
/// is no more likely than the observed one (relative tolerance 1e-12).
pub fn fisher_exact_2x2(a: u64, b: u64, c: u64, d: u64) -> Result<f64, FisherError> {
    let n = a + b + c + d;
    if n == 0 {
        return Err(FisherError::AllZeroMargins);
    }
    let (r1, r2, c1) = (a + b, c + d, a + c);
    let lf = log_factorials(n);
    let fixed = lf[r1 as usize] + lf[r2 as usize] + lf[c1 as usize] + lf[(b + d) as usize] - lf[n as usize];
    let log_p = |x: u64| {
        // Cell counts for top-left = x.
        let (xb, xc) = (r1 - x, c1 - x);
        let xd = r2 - xc;
        fixed - lf[x as usize] - lf[xb as usize] - lf[xc as usize] - lf[xd as usize]
    };
    let lo = c1.saturating_sub(r2);
    let hi = r1.min(c1);
    let observed = log_p(a);
    let cutoff = observed + (1e-12f64).ln_1p();
    let p: f64 = (lo..=hi)
        .map(log_p)
        .filter(|&lp| lp <= cutoff)
        .map(f64::exp)
        .sum();
    Ok(p.min(1.0))
}
