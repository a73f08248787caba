//! Survival evaluation: concordance index, Kaplan-Meier curves, the
//! two-group log-rank test, median-risk stratification, and fold
//! aggregation.

use crate::cohort::SurvivalRecord;
use crate::error::{Error, Result};

/// Harrell concordance index. An ordered pair `(a, b)` is comparable when
/// `time_a < time_b` and subject `a` had an observed event; it scores 1 when
/// `risk_a > risk_b` and 0.5 on tied risks. Pairs with equal times are never
/// comparable.
pub fn c_index(risks: &[f64], records: &[SurvivalRecord]) -> Result<f64> {
    if risks.len() != records.len() {
        return Err(Error::Domain(format!(
            "{} risks for {} records",
            risks.len(),
            records.len()
        )));
    }
    let mut comparable = 0u64;
    let mut concordant = 0.0f64;
    for a in 0..records.len() {
        if !records[a].event {
            continue;
        }
        for b in 0..records.len() {
            if a == b || records[a].time >= records[b].time {
                continue;
            }
            comparable += 1;
            if risks[a] > risks[b] {
                concordant += 1.0;
            } else if risks[a] == risks[b] {
                concordant += 0.5;
            }
        }
    }
    if comparable == 0 {
        return Err(Error::UndefinedMetric(
            "concordance index has no comparable pairs".to_string(),
        ));
    }
    Ok(concordant / comparable as f64)
}

/// Kaplan-Meier product-limit curve as `(time, survival)` step points,
/// starting at `(0, 1)` with one point per distinct event time.
pub fn km_curve(records: &[SurvivalRecord]) -> Result<Vec<(f64, f64)>> {
    if records.is_empty() {
        return Err(Error::Domain("empty group for survival curve".to_string()));
    }
    let mut event_times: Vec<f64> = records
        .iter()
        .filter(|r| r.event)
        .map(|r| r.time)
        .collect();
    event_times.sort_by(f64::total_cmp);
    event_times.dedup();
    let mut curve = vec![(0.0, 1.0)];
    let mut s = 1.0;
    for &t in &event_times {
        let at_risk = records.iter().filter(|r| r.time >= t).count() as f64;
        let deaths = records.iter().filter(|r| r.event && r.time == t).count() as f64;
        s *= 1.0 - deaths / at_risk;
        curve.push((t, s));
    }
    Ok(curve)
}

/// Two-group Mantel-Haenszel log-rank test. Returns the chi-square(1)
/// statistic and its upper-tail p-value.
pub fn logrank_test(
    group_a: &[SurvivalRecord],
    group_b: &[SurvivalRecord],
) -> Result<(f64, f64)> {
    if group_a.is_empty() || group_b.is_empty() {
        return Err(Error::Domain(
            "log-rank test needs two non-empty groups".to_string(),
        ));
    }
    let mut event_times: Vec<f64> = group_a
        .iter()
        .chain(group_b)
        .filter(|r| r.event)
        .map(|r| r.time)
        .collect();
    if event_times.is_empty() {
        return Err(Error::UndefinedTest(
            "log-rank test needs at least one event".to_string(),
        ));
    }
    event_times.sort_by(f64::total_cmp);
    event_times.dedup();

    let mut observed_a = 0.0;
    let mut expected_a = 0.0;
    let mut variance = 0.0;
    for &t in &event_times {
        let n_a = group_a.iter().filter(|r| r.time >= t).count() as f64;
        let n_b = group_b.iter().filter(|r| r.time >= t).count() as f64;
        let n = n_a + n_b;
        let d_a = group_a.iter().filter(|r| r.event && r.time == t).count() as f64;
        let d_b = group_b.iter().filter(|r| r.event && r.time == t).count() as f64;
        let d = d_a + d_b;
        if n <= 0.0 {
            continue;
        }
        observed_a += d_a;
        expected_a += d * n_a / n;
        if n > 1.0 {
            variance += d * (n_a / n) * (n_b / n) * (n - d) / (n - 1.0);
        }
    }
    if variance <= 0.0 {
        return Err(Error::UndefinedTest(
            "log-rank variance is zero".to_string(),
        ));
    }
    let diff = observed_a - expected_a;
    let stat = diff * diff / variance;
    Ok((stat, chi2_sf1(stat)))
}

/// Upper tail of the chi-square distribution with one degree of freedom:
/// `P(X > x) = erfc(sqrt(x / 2))`.
pub fn chi2_sf1(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    erfc((x / 2.0).sqrt())
}

/// Complementary error function via the regularized upper incomplete gamma
/// function: `erfc(x) = Q(1/2, x^2)` for `x >= 0`. Absolute accuracy is far
/// below the 1e-10 this module needs.
fn erfc(x: f64) -> f64 {
    if x < 0.0 {
        return 2.0 - erfc(-x);
    }
    if x == 0.0 {
        return 1.0;
    }
    upper_gamma_q_half(x * x)
}

const LN_GAMMA_HALF: f64 = 0.5723649429247001; // ln Gamma(1/2) = ln sqrt(pi)

/// Regularized upper incomplete gamma `Q(1/2, x)` for `x > 0`, by the
/// lower-series for small `x` and a Lentz continued fraction otherwise.
fn upper_gamma_q_half(x: f64) -> f64 {
    const A: f64 = 0.5;
    if x < A + 1.0 {
        // P(a, x) series, then Q = 1 - P.
        let mut term = 1.0 / A;
        let mut sum = term;
        let mut n = A;
        for _ in 0..500 {
            n += 1.0;
            term *= x / n;
            sum += term;
            if term.abs() < sum.abs() * 1e-16 {
                break;
            }
        }
        let p = sum * (-x + A * x.ln() - LN_GAMMA_HALF).exp();
        1.0 - p
    } else {
        // Modified Lentz continued fraction for Q(a, x).
        let tiny = 1e-300;
        let mut b = x + 1.0 - A;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..500 {
            let an = -(i as f64) * (i as f64 - A);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        (-x + A * x.ln() - LN_GAMMA_HALF).exp() * h
    }
}

/// Split subjects at the median risk; ties at the median go to the low-risk
/// group. Returns `(high_indices, low_indices)`.
pub fn median_split(risks: &[f64]) -> Result<(Vec<usize>, Vec<usize>)> {
    if risks.len() < 2 {
        return Err(Error::Domain(
            "median split needs at least two subjects".to_string(),
        ));
    }
    let first = risks[0];
    if risks.iter().all(|&r| r == first) {
        return Err(Error::DegenerateSplit(
            "all risks equal; median split would leave one group empty".to_string(),
        ));
    }
    let mut sorted = risks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let mut hi = Vec::new();
    let mut lo = Vec::new();
    for (i, &r) in risks.iter().enumerate() {
        if r > median {
            hi.push(i);
        } else {
            lo.push(i);
        }
    }
    if hi.is_empty() || lo.is_empty() {
        return Err(Error::DegenerateSplit(format!(
            "median split at {median} left groups of {} and {}",
            hi.len(),
            lo.len()
        )));
    }
    Ok((hi, lo))
}

/// Arithmetic mean and sample standard deviation over folds.
pub fn aggregate_folds(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::Domain(format!(
            "fold aggregation needs at least two values, got {}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}
