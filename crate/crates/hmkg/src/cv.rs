//! Seeded k-fold cross-validation, the ablation matrix, and their shared
//! evaluation protocol: per-fold held-out concordance, pooled median-risk
//! stratification, and one log-rank test over the pooled groups.

use serde::{Deserialize, Serialize};

use crate::cohort::{CohortSlide, LoadedCohort, SurvivalRecord};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::features::FeatureBag;
use crate::hashing::stable_hash64;
use crate::metrics::{aggregate_folds, c_index, logrank_test, median_split};
use crate::model::VariantName;
use crate::train::{train, train_meanpool};

/// Fold index per slide, aligned with the input order. Assignment is keyed
/// by a stable hash of the slide id, so manifest order is irrelevant.
pub fn fold_assignment(slide_ids: &[String], seed: u64, folds: usize) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::Config(format!("folds must be >= 2, got {folds}")));
    }
    if slide_ids.len() < folds {
        return Err(Error::Domain(format!(
            "cohort of {} cannot fill {folds} folds",
            slide_ids.len()
        )));
    }
    let mut keyed: Vec<(u64, &String, usize)> = slide_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (stable_hash64(seed, id), id, i))
        .collect();
    keyed.sort();
    let mut assignment = vec![0usize; slide_ids.len()];
    for (rank, (_, _, original)) in keyed.iter().enumerate() {
        assignment[*original] = rank % folds;
    }
    Ok(assignment)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub fold: usize,
    pub test_ids: Vec<String>,
    /// `None` when the fold had no comparable pairs.
    pub c_index: Option<f64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub variant: String,
    pub cohort_id: String,
    pub folds: Vec<FoldOutcome>,
    pub c_mean: f64,
    pub c_sd: f64,
    pub logrank_stat: Option<f64>,
    pub logrank_p: Option<f64>,
    /// Pooled held-out records stratified at each fold's median risk.
    pub high_group: Vec<SurvivalRecord>,
    pub low_group: Vec<SurvivalRecord>,
    pub warnings: Vec<String>,
}

/// A trained scoring function for one fold.
pub type RiskFn = Box<dyn Fn(&FeatureBag) -> Result<f64>>;

/// Cross-validate any trainer that produces a risk function. Binning and
/// fitting see only the training split of each fold.
pub fn cross_validate_with(
    config: &RunConfig,
    cohort: &LoadedCohort,
    variant_label: &str,
    trainer: impl Fn(&RunConfig, &[CohortSlide]) -> Result<RiskFn>,
) -> Result<EvalResult> {
    config.validate()?;
    let ids: Vec<String> = cohort.slides.iter().map(|s| s.slide_id.clone()).collect();
    let assignment = fold_assignment(&ids, config.seed, config.folds)?;

    let mut folds = Vec::with_capacity(config.folds);
    let mut high_group = Vec::new();
    let mut low_group = Vec::new();
    let mut warnings = Vec::new();

    for fold in 0..config.folds {
        let train_slides: Vec<CohortSlide> = cohort
            .slides
            .iter()
            .zip(&assignment)
            .filter(|(_, &a)| a != fold)
            .map(|(s, _)| s.clone())
            .collect();
        let test_slides: Vec<&CohortSlide> = cohort
            .slides
            .iter()
            .zip(&assignment)
            .filter(|(_, &a)| a == fold)
            .map(|(s, _)| s)
            .collect();
        let mut outcome = FoldOutcome {
            fold,
            test_ids: test_slides.iter().map(|s| s.slide_id.clone()).collect(),
            c_index: None,
            warnings: Vec::new(),
        };

        let risk_fn = trainer(config, &train_slides)?;
        let mut risks = Vec::with_capacity(test_slides.len());
        for slide in &test_slides {
            risks.push(risk_fn(&slide.bag)?);
        }
        let records: Vec<SurvivalRecord> =
            test_slides.iter().map(|s| s.record.clone()).collect();

        match c_index(&risks, &records) {
            Ok(c) => outcome.c_index = Some(c),
            Err(Error::UndefinedMetric(detail)) => {
                outcome.warnings.push(format!("fold {fold}: {detail}"));
            }
            Err(other) => return Err(other),
        }
        match median_split(&risks) {
            Ok((hi, lo)) => {
                high_group.extend(hi.into_iter().map(|i| records[i].clone()));
                low_group.extend(lo.into_iter().map(|i| records[i].clone()));
            }
            Err(Error::DegenerateSplit(detail)) | Err(Error::Domain(detail)) => {
                outcome
                    .warnings
                    .push(format!("fold {fold}: stratification skipped: {detail}"));
            }
            Err(other) => return Err(other),
        }
        folds.push(outcome);
    }

    let defined: Vec<f64> = folds.iter().filter_map(|f| f.c_index).collect();
    let (c_mean, c_sd) = match defined.len() {
        0 => {
            return Err(Error::UndefinedMetric(
                "concordance undefined on every fold".to_string(),
            ))
        }
        1 => {
            warnings.push("only one fold had a defined concordance".to_string());
            (defined[0], 0.0)
        }
        _ => aggregate_folds(&defined)?,
    };

    let (logrank_stat, logrank_p) = if high_group.is_empty() || low_group.is_empty() {
        warnings.push("stratified groups empty; log-rank skipped".to_string());
        (None, None)
    } else {
        match logrank_test(&high_group, &low_group) {
            Ok((stat, p)) => (Some(stat), Some(p)),
            Err(Error::UndefinedTest(detail)) => {
                warnings.push(format!("log-rank skipped: {detail}"));
                (None, None)
            }
            Err(other) => return Err(other),
        }
    };

    Ok(EvalResult {
        variant: variant_label.to_string(),
        cohort_id: cohort.manifest.cohort_id.clone(),
        folds,
        c_mean,
        c_sd,
        logrank_stat,
        logrank_p,
        high_group,
        low_group,
        warnings,
    })
}

pub fn cross_validate(config: &RunConfig, cohort: &LoadedCohort) -> Result<EvalResult> {
    cross_validate_with(config, cohort, config.variant.as_str(), |cfg, slides| {
        let (params, _) = train(cfg, slides)?;
        Ok(Box::new(move |bag: &FeatureBag| {
            Ok(params.predict(bag)?.risk)
        }) as RiskFn)
    })
}

/// The flat-average baseline under the identical protocol and folds.
pub fn cross_validate_meanpool(config: &RunConfig, cohort: &LoadedCohort) -> Result<EvalResult> {
    cross_validate_with(config, cohort, "mean_pool", |cfg, slides| {
        let (params, _) = train_meanpool(cfg, slides)?;
        Ok(Box::new(move |bag: &FeatureBag| Ok(params.risk(bag))) as RiskFn)
    })
}

/// All four variants over identical folds, in ablation-table order.
pub fn run_ablation(config: &RunConfig, cohort: &LoadedCohort) -> Result<Vec<EvalResult>> {
    VariantName::ALL
        .iter()
        .map(|&variant| cross_validate(&config.with_variant(variant), cohort))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelDims;
    use crate::synth::{generate_cohort, SignalMode, SynthSpec};

    fn quick_config() -> RunConfig {
        RunConfig {
            dims: ModelDims {
                d_low: 5,
                d_high: 5,
                d: 4,
                d_out: 4,
                t_bins: 3,
            },
            epochs: 2,
            ..RunConfig::default()
        }
    }

    fn quick_cohort(size: usize) -> LoadedCohort {
        let spec = SynthSpec {
            size,
            mode: SignalMode::Null,
            dim_low: 5,
            dim_high: 5,
            n_tiles_min: 2,
            n_tiles_max: 3,
            motif_cells: 4,
            censor_prob: 0.2,
            ..SynthSpec::default()
        };
        generate_cohort(&spec).unwrap().0
    }

    #[test]
    fn assignment_partitions_evenly() {
        let ids: Vec<String> = (0..8).map(|i| format!("s{i}")).collect();
        let assignment = fold_assignment(&ids, 7, 4).unwrap();
        let mut counts = [0usize; 4];
        for &a in &assignment {
            counts[a] += 1;
        }
        assert_eq!(counts, [2, 2, 2, 2]);
    }

    #[test]
    fn assignment_ignores_manifest_order() {
        let ids: Vec<String> = (0..9).map(|i| format!("s{i}")).collect();
        let mut shuffled = ids.clone();
        shuffled.swap(0, 7);
        shuffled.swap(2, 5);
        let a = fold_assignment(&ids, 7, 3).unwrap();
        let b = fold_assignment(&shuffled, 7, 3).unwrap();
        for (i, id) in ids.iter().enumerate() {
            let j = shuffled.iter().position(|s| s == id).unwrap();
            assert_eq!(a[i], b[j], "{id}");
        }
    }

    #[test]
    fn assignment_depends_on_seed() {
        let ids: Vec<String> = (0..16).map(|i| format!("s{i}")).collect();
        let a = fold_assignment(&ids, 1, 4).unwrap();
        let b = fold_assignment(&ids, 2, 4).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn undersized_cohort_rejected() {
        let ids: Vec<String> = (0..3).map(|i| format!("s{i}")).collect();
        assert!(matches!(
            fold_assignment(&ids, 7, 4),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn cross_validation_covers_every_slide_once() {
        let cohort = quick_cohort(8);
        let result = cross_validate(&quick_config(), &cohort).unwrap();
        assert_eq!(result.folds.len(), 4);
        let mut seen: Vec<&String> = result.folds.iter().flat_map(|f| &f.test_ids).collect();
        seen.sort();
        assert_eq!(seen.len(), 8);
        seen.dedup();
        assert_eq!(seen.len(), 8, "a slide appeared in two test folds");
        assert!(result.c_mean.is_finite());
        assert!(result.c_sd >= 0.0);
    }

    #[test]
    fn ablation_shares_fold_membership() {
        let cohort = quick_cohort(8);
        let results = run_ablation(&quick_config(), &cohort).unwrap();
        assert_eq!(results.len(), 4);
        assert_eq!(results[0].variant, "kgn_baseline");
        assert_eq!(results[3].variant, "full");
        for result in &results[1..] {
            for (a, b) in results[0].folds.iter().zip(&result.folds) {
                assert_eq!(a.test_ids, b.test_ids);
            }
        }
    }

    #[test]
    fn constant_risks_warn_and_skip_stratification() {
        let cohort = quick_cohort(8);
        let result = cross_validate_with(&quick_config(), &cohort, "constant", |_, _| {
            Ok(Box::new(|_: &FeatureBag| Ok(0.5)) as RiskFn)
        })
        .unwrap();
        // Tied risks still produce a defined (0.5) concordance, but every
        // median split is degenerate, so the log-rank test never runs.
        assert!((result.c_mean - 0.5).abs() < 1e-12);
        assert_eq!(result.logrank_p, None);
        assert!(result.folds.iter().all(|f| !f.warnings.is_empty()));
        assert!(!result.warnings.is_empty());
    }

    #[test]
    fn test_fold_labels_cannot_leak_into_training() {
        let config = quick_config();
        let cohort = quick_cohort(8);
        let ids: Vec<String> = cohort.slides.iter().map(|s| s.slide_id.clone()).collect();
        let assignment = fold_assignment(&ids, config.seed, config.folds).unwrap();
        let train_split = |c: &LoadedCohort| -> Vec<CohortSlide> {
            c.slides
                .iter()
                .zip(&assignment)
                .filter(|(_, &a)| a != 0)
                .map(|(s, _)| s.clone())
                .collect()
        };
        let mut mutated = cohort.clone();
        for (slide, &a) in mutated.slides.iter_mut().zip(&assignment) {
            if a == 0 {
                slide.record.time *= 3.0;
                slide.record.event = !slide.record.event;
            }
        }
        let (params_a, _) = train(&config, &train_split(&cohort)).unwrap();
        let (params_b, _) = train(&config, &train_split(&mutated)).unwrap();
        assert_eq!(params_a, params_b);
    }
}
