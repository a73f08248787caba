//! Discrete-time survival modeling: time discretization, hazard and survival
//! curves, the negative log-likelihood survival loss, and scalar risks.
//!
//! Time is bucketed into `T` bins by quantiles of the uncensored training
//! times. A model emits `T` logits; hazards are their sigmoids, survival is
//! the running product of `1 - h`, and risk is the negated sum of the
//! survival curve.

use ndarray::Array2;

use crate::autodiff::{Tape, Var};
use crate::cohort::SurvivalRecord;
use crate::error::{Error, Result};

/// Clamp bound applied to hazards inside logarithms.
pub const HAZARD_EPS: f64 = 1e-7;

/// Discretization of follow-up time into `cut_points.len() + 1` bins.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeBinning {
    /// Strictly increasing interior cut points.
    pub cut_points: Vec<f64>,
}

impl TimeBinning {
    pub fn t_bins(&self) -> usize {
        self.cut_points.len() + 1
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = q * (n - 1) as f64;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

/// Fit bin cut points as quantiles of the uncensored times of `records`,
/// falling back to all times when fewer than `t_bins` uncensored times
/// exist. Must only ever see training-fold records.
pub fn discretize_time(records: &[SurvivalRecord], t_bins: usize) -> Result<TimeBinning> {
    if records.is_empty() {
        return Err(Error::Domain(
            "time discretization needs at least one record".to_string(),
        ));
    }
    if t_bins < 2 {
        return Err(Error::Domain("need at least two time bins".to_string()));
    }
    let mut times: Vec<f64> = records
        .iter()
        .filter(|r| r.event)
        .map(|r| r.time)
        .collect();
    if times.len() < t_bins {
        times = records.iter().map(|r| r.time).collect();
    }
    times.sort_by(f64::total_cmp);
    let cut_points: Vec<f64> = (1..t_bins)
        .map(|i| quantile(&times, i as f64 / t_bins as f64))
        .collect();
    for w in cut_points.windows(2) {
        if !(w[0] < w[1]) {
            return Err(Error::Domain(format!(
                "degenerate time binning: cut points {cut_points:?} are not strictly increasing"
            )));
        }
    }
    Ok(TimeBinning { cut_points })
}

/// Index of the half-open interval holding `time`; the rightmost bin is
/// unbounded above. A time equal to a cut point belongs to the bin above it.
pub fn assign_bin(time: f64, binning: &TimeBinning) -> usize {
    binning.cut_points.partition_point(|&c| c <= time)
}

/// Assign bins to a set of records in place.
pub fn assign_bins(records: &mut [SurvivalRecord], binning: &TimeBinning) {
    for r in records.iter_mut() {
        r.bin = Some(assign_bin(r.time, binning));
    }
}

/// Hazard curve derived from one logit vector.
#[derive(Debug, Clone, PartialEq)]
pub struct HazardOutput {
    pub logits: Vec<f64>,
    /// `h_t = sigmoid(logit_t)`
    pub hazards: Vec<f64>,
    /// `S_t = prod_{tau <= t} (1 - h_tau)`, non-increasing, `S_{-1} = 1`.
    pub survival: Vec<f64>,
    /// `-sum_t S_t`
    pub risk: f64,
}

impl HazardOutput {
    pub fn from_logits(logits: &[f64]) -> Self {
        let hazards: Vec<f64> = logits
            .iter()
            .map(|&x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let mut survival = Vec::with_capacity(hazards.len());
        let mut s = 1.0;
        for &h in &hazards {
            s *= 1.0 - h;
            survival.push(s);
        }
        let risk = -survival.iter().sum::<f64>();
        HazardOutput {
            logits: logits.to_vec(),
            hazards,
            survival,
            risk,
        }
    }
}

/// `risk = -sum_t S_t`; rises when any hazard rises.
pub fn risk_score(output: &HazardOutput) -> f64 {
    output.risk
}

/// Closed-form loss for one subject. `alpha` down-weights the censored term
/// by `1 - alpha`; the default configuration uses `alpha = 0`.
pub fn nll_surv_loss(output: &HazardOutput, record: &SurvivalRecord, alpha: f64) -> Result<f64> {
    let b = record.bin.ok_or_else(|| {
        Error::Domain(format!(
            "record '{}' has no assigned time bin",
            record.slide_id
        ))
    })?;
    let t_bins = output.hazards.len();
    if b >= t_bins {
        return Err(Error::Domain(format!(
            "bin {b} out of range for {t_bins} hazards"
        )));
    }
    let log_h = |t: usize| output.hazards[t].clamp(HAZARD_EPS, 1.0 - HAZARD_EPS).ln();
    let log_1mh =
        |t: usize| (1.0 - output.hazards[t]).clamp(HAZARD_EPS, 1.0 - HAZARD_EPS).ln();
    let loss = if record.event {
        // log S_{b-1} + log h_b, with log S_{-1} = 0.
        let mut acc = log_h(b);
        for t in 0..b {
            acc += log_1mh(t);
        }
        -acc
    } else {
        let mut acc = 0.0;
        for t in 0..=b {
            acc += log_1mh(t);
        }
        -(1.0 - alpha) * acc
    };
    Ok(loss)
}

/// Mean closed-form loss over a batch.
pub fn mean_nll_surv_loss(
    outputs: &[HazardOutput],
    records: &[SurvivalRecord],
    alpha: f64,
) -> Result<f64> {
    if outputs.len() != records.len() || outputs.is_empty() {
        return Err(Error::Domain(format!(
            "loss needs matched non-empty batches, got {} outputs and {} records",
            outputs.len(),
            records.len()
        )));
    }
    let mut total = 0.0;
    for (o, r) in outputs.iter().zip(records) {
        total += nll_surv_loss(o, r, alpha)?;
    }
    Ok(total / outputs.len() as f64)
}

/// Tape-side loss for one subject from a `[1 x T]` logit row. Matches the
/// closed form of [`nll_surv_loss`] and is differentiable through the
/// logits.
pub fn nll_surv_loss_on_tape(
    tape: &mut Tape,
    logits: Var,
    record: &SurvivalRecord,
    alpha: f64,
) -> Result<Var> {
    let (rows, t_bins) = tape.shape(logits);
    if rows != 1 {
        return Err(Error::Shape(format!("logits must be one row, got {rows}")));
    }
    let b = record.bin.ok_or_else(|| {
        Error::Domain(format!(
            "record '{}' has no assigned time bin",
            record.slide_id
        ))
    })?;
    if b >= t_bins {
        return Err(Error::Domain(format!(
            "bin {b} out of range for {t_bins} hazards"
        )));
    }
    let mut m_surv = Array2::zeros((1, t_bins));
    let mut m_event = Array2::zeros((1, t_bins));
    if record.event {
        for t in 0..b {
            m_surv[[0, t]] = 1.0;
        }
        m_event[[0, b]] = 1.0;
    } else {
        for t in 0..=b {
            m_surv[[0, t]] = 1.0 - alpha;
        }
    }

    let h = tape.sigmoid(logits);
    let h_clamped = tape.clamp(h, HAZARD_EPS, 1.0 - HAZARD_EPS)?;
    let log_h = tape.ln(h_clamped)?;
    let one_minus_h = tape.one_minus(h);
    let omh_clamped = tape.clamp(one_minus_h, HAZARD_EPS, 1.0 - HAZARD_EPS)?;
    let log_1mh = tape.ln(omh_clamped)?;

    let mask_surv = tape.leaf(m_surv, false);
    let mask_event = tape.leaf(m_event, false);
    let surv_term = tape.mul(mask_surv, log_1mh)?;
    let event_term = tape.mul(mask_event, log_h)?;
    let sum = tape.add(surv_term, event_term)?;
    let total = tape.sum_all(sum);
    Ok(tape.scale(total, -1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(time: f64, event: bool, bin: Option<usize>) -> SurvivalRecord {
        SurvivalRecord {
            slide_id: "s".to_string(),
            time,
            event,
            bin,
        }
    }

    #[test]
    fn four_distinct_times_fill_four_bins() {
        let records: Vec<SurvivalRecord> =
            [1.0, 2.0, 3.0, 4.0].iter().map(|&t| record(t, true, None)).collect();
        let binning = discretize_time(&records, 4).unwrap();
        assert_eq!(binning.cut_points, vec![1.75, 2.5, 3.25]);
        let bins: Vec<usize> = records.iter().map(|r| assign_bin(r.time, &binning)).collect();
        assert_eq!(bins, vec![0, 1, 2, 3]);
    }

    #[test]
    fn boundary_times_hit_edge_bins() {
        let binning = TimeBinning {
            cut_points: vec![2.0, 4.0, 6.0],
        };
        assert_eq!(assign_bin(0.5, &binning), 0);
        assert_eq!(assign_bin(100.0, &binning), 3);
        // A time equal to a cut point opens the next bin.
        assert_eq!(assign_bin(2.0, &binning), 1);
    }

    #[test]
    fn censored_fallback_uses_all_times() {
        let records = vec![
            record(1.0, false, None),
            record(2.0, false, None),
            record(3.0, false, None),
            record(4.0, true, None),
        ];
        let binning = discretize_time(&records, 4).unwrap();
        assert_eq!(binning.cut_points, vec![1.75, 2.5, 3.25]);
    }

    #[test]
    fn empty_records_rejected() {
        assert!(matches!(discretize_time(&[], 4), Err(Error::Domain(_))));
    }

    #[test]
    fn exponential_sample_spreads_over_bins() {
        // Deterministic pseudo-exponential sample: inverse CDF on a fixed
        // low-discrepancy grid.
        let records: Vec<SurvivalRecord> = (0..100)
            .map(|i| {
                let u = (i as f64 + 0.5) / 100.0;
                record(-(1.0 - u).ln(), true, None)
            })
            .collect();
        let binning = discretize_time(&records, 4).unwrap();
        let mut counts = [0usize; 4];
        for r in &records {
            counts[assign_bin(r.time, &binning)] += 1;
        }
        for &c in &counts {
            assert!((15..=35).contains(&c), "bin counts {counts:?}");
        }
    }

    #[test]
    fn survival_curve_non_increasing() {
        let out = HazardOutput::from_logits(&[-0.3, 1.2, 0.0, -2.0]);
        assert_eq!(out.survival.len(), 4);
        for w in out.survival.windows(2) {
            assert!(w[1] <= w[0]);
        }
        for (&h, &s) in out.hazards.iter().zip(out.survival.iter()) {
            assert!(h > 0.0 && h < 1.0);
            assert!(s > 0.0 && s <= 1.0);
        }
    }

    #[test]
    fn confident_correct_event_loss_vanishes() {
        let out = HazardOutput::from_logits(&[40.0, 0.0, 0.0, 0.0]);
        let loss = nll_surv_loss(&out, &record(1.0, true, Some(0)), 0.0).unwrap();
        assert!(loss.abs() < 1e-6, "loss {loss}");
    }

    #[test]
    fn confident_censoring_loss_vanishes() {
        let out = HazardOutput::from_logits(&[-40.0, -40.0, -40.0, -40.0]);
        let loss = nll_surv_loss(&out, &record(5.0, false, Some(2)), 0.0).unwrap();
        assert!(loss.abs() < 1e-6, "loss {loss}");
    }

    #[test]
    fn half_hazards_give_two_ln_two() {
        // h = 0.5 in every bin, uncensored at bin 1:
        // loss = -(log 0.5 + log 0.5) = 2 ln 2.
        let out = HazardOutput::from_logits(&[0.0, 0.0, 0.0, 0.0]);
        let loss = nll_surv_loss(&out, &record(2.0, true, Some(1)), 0.0).unwrap();
        assert!((loss - 1.3862943611198906).abs() < 1e-9);
    }

    #[test]
    fn unassigned_bin_rejected() {
        let out = HazardOutput::from_logits(&[0.0; 4]);
        assert!(matches!(
            nll_surv_loss(&out, &record(2.0, true, None), 0.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn tape_loss_matches_closed_form() {
        let logits = [0.4, -1.1, 0.7, 0.2];
        for (event, bin) in [(true, 2usize), (false, 1), (true, 0), (false, 3)] {
            let rec = record(1.0, event, Some(bin));
            let expect =
                nll_surv_loss(&HazardOutput::from_logits(&logits), &rec, 0.25).unwrap();
            let mut tape = Tape::new();
            let l = tape.leaf(
                Array2::from_shape_vec((1, 4), logits.to_vec()).unwrap(),
                false,
            );
            let loss = nll_surv_loss_on_tape(&mut tape, l, &rec, 0.25).unwrap();
            assert!((tape.value(loss)[[0, 0]] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_loss_gradient_matches_finite_differences() {
        let base = [0.4, -1.1, 0.7, 0.2];
        for (event, bin) in [(true, 2usize), (false, 1)] {
            let rec = record(1.0, event, Some(bin));
            let eval = |logits: &[f64]| -> f64 {
                let mut tape = Tape::new();
                let l = tape.leaf(
                    Array2::from_shape_vec((1, 4), logits.to_vec()).unwrap(),
                    false,
                );
                let loss = nll_surv_loss_on_tape(&mut tape, l, &rec, 0.0).unwrap();
                tape.value(loss)[[0, 0]]
            };
            let mut tape = Tape::new();
            let l = tape.leaf(Array2::from_shape_vec((1, 4), base.to_vec()).unwrap(), true);
            let loss = nll_surv_loss_on_tape(&mut tape, l, &rec, 0.0).unwrap();
            tape.backward(loss).unwrap();
            let analytic = tape.grad(l).unwrap().clone();
            let h = 1e-5;
            for i in 0..4 {
                let mut plus = base;
                let mut minus = base;
                plus[i] += h;
                minus[i] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[[0, i]];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
                assert!(rel < 1e-4, "logit {i}: {a} vs {numeric}");
            }
        }
    }

    #[test]
    fn risk_limits() {
        let immortal = HazardOutput::from_logits(&[-50.0; 4]);
        assert!((risk_score(&immortal) + 4.0).abs() < 1e-6);
        let immediate = HazardOutput::from_logits(&[50.0, 0.0, 0.0, 0.0]);
        assert!(risk_score(&immediate).abs() < 1e-6);
    }

    #[test]
    fn raising_any_hazard_raises_risk() {
        for trial in 0..100 {
            let logits: Vec<f64> = (0..4)
                .map(|i| ((trial * 4 + i) as f64 * 0.7).sin() * 2.0)
                .collect();
            let base = HazardOutput::from_logits(&logits);
            for i in 0..4 {
                let mut bumped = logits.clone();
                // +0.5 in logit space strictly raises hazard i.
                bumped[i] += 0.5;
                let out = HazardOutput::from_logits(&bumped);
                assert!(
                    risk_score(&out) > risk_score(&base),
                    "trial {trial} bin {i}"
                );
            }
        }
    }

    #[test]
    fn risk_ordering_tracks_survival_ordering() {
        // A family of curves scaled uniformly upward in hazard space must
        // order identically by risk and by -S_b at any fixed bin.
        let scales: Vec<f64> = (1..=20).map(|i| i as f64 * 0.2).collect();
        let outputs: Vec<HazardOutput> = scales
            .iter()
            .map(|&s| HazardOutput::from_logits(&[s - 2.0, s - 1.5, s - 1.0, s - 0.5]))
            .collect();
        let mut by_risk: Vec<usize> = (0..outputs.len()).collect();
        by_risk.sort_by(|&a, &b| outputs[a].risk.partial_cmp(&outputs[b].risk).unwrap());
        for b in 0..4 {
            let mut by_surv: Vec<usize> = (0..outputs.len()).collect();
            by_surv.sort_by(|&i, &j| {
                (-outputs[i].survival[b])
                    .partial_cmp(&(-outputs[j].survival[b]))
                    .unwrap()
            });
            assert_eq!(by_risk, by_surv, "bin {b}");
        }
    }
}
