//! Exact statistics for result tables: Clopper-Pearson binomial confidence
//! intervals, Fisher's exact test on 2x2 tables, and summary aggregation.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("invalid binomial outcome: k={k}, n={n}")]
    InvalidOutcome { k: u64, n: u64 },
    #[error("confidence must lie in (0, 1), got {0}")]
    InvalidConfidence(f64),
    #[error("degenerate margins in 2x2 table")]
    DegenerateMargins,
}

/// Natural log of the gamma function (Lanczos approximation).
fn ln_gamma(x: f64) -> f64 {
    // g = 7, n = 9 Lanczos coefficients.
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection formula.
        let pi = std::f64::consts::PI;
        return pi.ln() - (pi * x).sin().ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + 7.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

fn ln_factorial(n: u64) -> f64 {
    ln_gamma(n as f64 + 1.0)
}

/// Regularized incomplete beta function I_x(a, b) via the continued
/// fraction expansion.
pub fn betai(a: f64, b: f64, x: f64) -> f64 {
    assert!((0.0..=1.0).contains(&x));
    if x == 0.0 {
        return 0.0;
    }
    if x == 1.0 {
        return 1.0;
    }
    let ln_front =
        ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * betacf(a, b, x) / a
    } else {
        1.0 - (ln_gamma(a + b) - ln_gamma(b) - ln_gamma(a)
            + b * (1.0 - x).ln()
            + a * x.ln())
            .exp()
            * betacf(b, a, 1.0 - x)
            / b
    }
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn betacf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 1e-15;
    const FPMIN: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < FPMIN {
        d = FPMIN;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m_f = m as f64;
        let m2 = 2.0 * m_f;
        let aa = m_f * (b - m_f) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m_f) * (qab + m_f) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Beta distribution quantile by bisection on the regularized incomplete
/// beta function, to absolute tolerance 1e-9.
fn beta_quantile(p: f64, a: f64, b: f64) -> f64 {
    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    while hi - lo > 1e-9 {
        let mid = 0.5 * (lo + hi);
        if betai(a, b, mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Exact Clopper-Pearson confidence interval for `k` successes in `n`
/// trials at the given confidence level.
pub fn clopper_pearson(k: u64, n: u64, confidence: f64) -> Result<(f64, f64), StatsError> {
    if n == 0 || k > n {
        return Err(StatsError::InvalidOutcome { k, n });
    }
    if !(0.0 < confidence && confidence < 1.0) {
        return Err(StatsError::InvalidConfidence(confidence));
    }
    let alpha = 1.0 - confidence;
    let lower = if k == 0 {
        0.0
    } else {
        beta_quantile(alpha / 2.0, k as f64, (n - k + 1) as f64)
    };
    let upper = if k == n {
        1.0
    } else {
        beta_quantile(1.0 - alpha / 2.0, (k + 1) as f64, (n - k) as f64)
    };
    Ok((lower, upper))
}

/// Log hypergeometric probability of a 2x2 table with cells a, b, c, d.
fn ln_hypergeom(a: u64, b: u64, c: u64, d: u64) -> f64 {
    let n = a + b + c + d;
    ln_factorial(a + b) + ln_factorial(c + d) + ln_factorial(a + c) + ln_factorial(b + d)
        - ln_factorial(n)
        - ln_factorial(a)
        - ln_factorial(b)
        - ln_factorial(c)
        - ln_factorial(d)
}

/// Two-sided Fisher's exact test: sums the probabilities of all tables
/// with the observed margins that are no more probable than the observed
/// table.
pub fn fisher_exact(a: u64, b: u64, c: u64, d: u64) -> Result<f64, StatsError> {
    let row1 = a + b;
    let row2 = c + d;
    let col1 = a + c;
    let col2 = b + d;
    if row1 == 0 || row2 == 0 || col1 == 0 || col2 == 0 {
        return Err(StatsError::DegenerateMargins);
    }
    let ln_obs = ln_hypergeom(a, b, c, d);
    let a_min = col1.saturating_sub(row2);
    let a_max = row1.min(col1);
    let mut p = 0.0;
    // Tolerance guards against ties lost to rounding in the log domain.
    const REL_EPS: f64 = 1e-7;
    for x in a_min..=a_max {
        let bb = row1 - x;
        let cc = col1 - x;
        let dd = row2 - cc;
        let ln_p = ln_hypergeom(x, bb, cc, dd);
        if ln_p <= ln_obs + REL_EPS {
            p += ln_p.exp();
        }
    }
    Ok(p.min(1.0))
}

/// One summarized configuration row: binary-metric successes over trials
/// with an exact interval.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub label: String,
    pub successes: u64,
    pub trials: u64,
    pub estimate: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

/// Aggregate per-configuration binary outcomes into rows with point
/// estimates and Clopper-Pearson intervals. Empty groups are skipped.
pub fn summarize(
    groups: &[(String, Vec<bool>)],
    confidence: f64,
) -> Result<Vec<SummaryRow>, StatsError> {
    let mut rows = Vec::new();
    for (label, outcomes) in groups {
        if outcomes.is_empty() {
            continue;
        }
        let n = outcomes.len() as u64;
        let k = outcomes.iter().filter(|&&x| x).count() as u64;
        let (lo, hi) = clopper_pearson(k, n, confidence)?;
        rows.push(SummaryRow {
            label: label.clone(),
            successes: k,
            trials: n,
            estimate: k as f64 / n as f64,
            ci_lower: lo,
            ci_upper: hi,
        });
    }
    Ok(rows)
}

/// Convert a proportion to a percentage rounded half away from zero,
/// matching the bracket style used in reported tables.
pub fn round_percent(x: f64) -> i64 {
    let p = x * 100.0;
    if p >= 0.0 {
        (p + 0.5).floor() as i64
    } else {
        (p - 0.5).ceil() as i64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ln_gamma_matches_factorials() {
        for n in 1..15u64 {
            let expect: f64 = (1..n).map(|i| (i as f64).ln()).sum();
            assert!((ln_gamma(n as f64) - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn cp_zero_successes() {
        let (lo, hi) = clopper_pearson(0, 50, 0.95).unwrap();
        assert_eq!(lo, 0.0);
        // Closed form: 1 - (alpha/2)^(1/n).
        let expect = 1.0 - (0.025f64).powf(1.0 / 50.0);
        assert!((hi - expect).abs() < 1e-8, "hi {hi}");
        assert!((hi - 0.071).abs() < 1e-3);
    }

    #[test]
    fn cp_all_successes() {
        let (lo, hi) = clopper_pearson(50, 50, 0.95).unwrap();
        assert_eq!(hi, 1.0);
        let expect = (0.025f64).powf(1.0 / 50.0);
        assert!((lo - expect).abs() < 1e-8);
    }

    #[test]
    fn cp_33_of_50_rounds_to_51_79() {
        let (lo, hi) = clopper_pearson(33, 50, 0.95).unwrap();
        assert_eq!(round_percent(lo), 51);
        assert_eq!(round_percent(hi), 79);
    }

    #[test]
    fn cp_matches_binomial_tail_bisection_oracle() {
        // Independent oracle: lower bound p solves
        // P(X >= k | p) = alpha/2 under Binomial(n, p).
        fn binom_tail_ge(k: u64, n: u64, p: f64) -> f64 {
            let mut total = 0.0;
            for x in k..=n {
                let ln_c = ln_factorial(n) - ln_factorial(x) - ln_factorial(n - x);
                total += (ln_c + x as f64 * p.ln() + (n - x) as f64 * (1.0 - p).ln()).exp();
            }
            total
        }
        let (k, n) = (33u64, 50u64);
        let (lo, hi) = clopper_pearson(k, n, 0.95).unwrap();
        let mut a = 1e-9;
        let mut b = 1.0 - 1e-9;
        while b - a > 1e-10 {
            let mid = 0.5 * (a + b);
            if binom_tail_ge(k, n, mid) < 0.025 {
                a = mid;
            } else {
                b = mid;
            }
        }
        assert!((lo - 0.5 * (a + b)).abs() < 1e-6, "lower {lo} vs oracle {}", 0.5 * (a + b));
        // Upper: P(X <= k | p) = alpha/2.
        let mut a = 1e-9;
        let mut b = 1.0 - 1e-9;
        while b - a > 1e-10 {
            let mid = 0.5 * (a + b);
            if 1.0 - binom_tail_ge(k + 1, n, mid) > 0.025 {
                a = mid;
            } else {
                b = mid;
            }
        }
        assert!((hi - 0.5 * (a + b)).abs() < 1e-6);
    }

    #[test]
    fn cp_invalid_inputs() {
        assert!(clopper_pearson(5, 3, 0.95).is_err());
        assert!(clopper_pearson(1, 10, 1.0).is_err());
    }

    #[test]
    fn cp_monotone_in_confidence() {
        let (l1, u1) = clopper_pearson(20, 50, 0.90).unwrap();
        let (l2, u2) = clopper_pearson(20, 50, 0.95).unwrap();
        let (l3, u3) = clopper_pearson(20, 50, 0.99).unwrap();
        assert!(l1 >= l2 && l2 >= l3);
        assert!(u1 <= u2 && u2 <= u3);
    }

    #[test]
    fn cp_coverage_is_conservative() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (p, n) = (0.3f64, 50u64);
        let mut covered = 0usize;
        let draws = 10_000;
        for _ in 0..draws {
            let k = (0..n).filter(|_| rng.gen_bool(p)).count() as u64;
            let (lo, hi) = clopper_pearson(k, n, 0.95).unwrap();
            if lo <= p && p <= hi {
                covered += 1;
            }
        }
        assert!(covered as f64 / draws as f64 >= 0.95, "coverage {covered}/{draws}");
    }

    #[test]
    fn fisher_identical_groups_p_one() {
        let p = fisher_exact(10, 20, 10, 20).unwrap();
        assert!((p - 1.0).abs() < 1e-9, "p = {p}");
    }

    #[test]
    fn fisher_extreme_counts_significant() {
        let p = fisher_exact(142, 58, 5, 195).unwrap();
        assert!(p < 0.001, "p = {p}");
    }

    #[test]
    fn fisher_symmetry_under_transpose() {
        let p1 = fisher_exact(7, 3, 2, 9).unwrap();
        let p2 = fisher_exact(7, 2, 3, 9).unwrap(); // transpose
        let p3 = fisher_exact(2, 9, 7, 3).unwrap(); // row swap
        assert!((p1 - p2).abs() < 1e-12);
        assert!((p1 - p3).abs() < 1e-12);
    }

    #[test]
    fn fisher_degenerate_margins_rejected() {
        assert_eq!(fisher_exact(0, 0, 3, 4).unwrap_err(), StatsError::DegenerateMargins);
        assert_eq!(fisher_exact(0, 3, 0, 4).unwrap_err(), StatsError::DegenerateMargins);
    }

    #[test]
    fn fisher_matches_enumeration_oracle_small_margins() {
        // Exhaustive check against direct rational-free enumeration for
        // all tables with margins <= 12.
        fn choose(n: u64, k: u64) -> f64 {
            (ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k)).exp()
        }
        for row1 in 1..=6u64 {
            for row2 in 1..=6u64 {
                for col1 in 1..(row1 + row2) {
                    let a_min = col1.saturating_sub(row2);
                    let a_max = row1.min(col1);
                    for a in a_min..=a_max {
                        let b = row1 - a;
                        let c = col1 - a;
                        let d = row2 - c;
                        let total = choose(row1 + row2, col1);
                        let p_obs = choose(row1, a) * choose(row2, c) / total;
                        let mut expect = 0.0;
                        for x in a_min..=a_max {
                            let px = choose(row1, x) * choose(row2, col1 - x) / total;
                            if px <= p_obs * (1.0 + 1e-7) {
                                expect += px;
                            }
                        }
                        let got = fisher_exact(a, b, c, d).unwrap();
                        assert!(
                            (got - expect.min(1.0)).abs() < 1e-9,
                            "table ({a},{b},{c},{d}): {got} vs {expect}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn summarize_single_trial() {
        let rows =
            summarize(&[("cfg".into(), vec![true])], 0.95).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].estimate, 1.0);
        assert!((rows[0].ci_lower - 0.025).abs() < 1e-6);
        assert_eq!(rows[0].ci_upper, 1.0);
    }

    #[test]
    fn summarize_skips_empty_groups() {
        let rows = summarize(
            &[("empty".into(), vec![]), ("full".into(), vec![true, false])],
            0.95,
        )
        .unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].label, "full");
        assert_eq!(rows[0].estimate, 0.5);
    }

    #[test]
    fn round_percent_half_away_from_zero() {
        assert_eq!(round_percent(0.505), 51);
        assert_eq!(round_percent(0.5149), 51);
        assert_eq!(round_percent(0.715), 72);
        assert_eq!(round_percent(-0.005), -1);
    }
}
