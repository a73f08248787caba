//! Cohort manifests and survival labels.
//!
//! A cohort directory holds `cohort.json` plus one `<id>.geom.json` and one
//! `<id>.feat.bin` per slide. The manifest binds slide ids to file paths and
//! survival labels.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::FeatureBag;
use crate::geometry::SlideGeometry;

pub const MANIFEST_FILE: &str = "cohort.json";

/// Survival label for one slide. `event = true` means the death was
/// observed; `false` means the time is a censoring time. `bin` is populated
/// by time discretization and never stored in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRecord {
    pub slide_id: String,
    /// Follow-up time in months; strictly positive.
    pub time: f64,
    pub event: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bin: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlideEntry {
    pub slide_id: String,
    pub geom_path: String,
    pub feat_path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub cohort_id: String,
    pub seed: u64,
    pub dim_low: usize,
    pub dim_high: usize,
    pub slides: Vec<SlideEntry>,
    pub labels: Vec<SurvivalRecord>,
}

impl CohortManifest {
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for entry in &self.slides {
            if !ids.insert(entry.slide_id.as_str()) {
                return Err(Error::Domain(format!(
                    "duplicate slide id '{}' in manifest",
                    entry.slide_id
                )));
            }
        }
        let labeled: BTreeSet<&str> = self.labels.iter().map(|l| l.slide_id.as_str()).collect();
        if labeled.len() != self.labels.len() {
            return Err(Error::Domain("duplicate label slide ids".to_string()));
        }
        for entry in &self.slides {
            if !labeled.contains(entry.slide_id.as_str()) {
                return Err(Error::Domain(format!(
                    "slide '{}' has feature files but no label",
                    entry.slide_id
                )));
            }
        }
        for label in &self.labels {
            if !ids.contains(label.slide_id.as_str()) {
                return Err(Error::Domain(format!(
                    "label for '{}' has no feature files",
                    label.slide_id
                )));
            }
            if !(label.time > 0.0) || !label.time.is_finite() {
                return Err(Error::Domain(format!(
                    "slide '{}' has non-positive time {}",
                    label.slide_id, label.time
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Parse(format!("manifest serialization: {e}")))?;
        std::fs::write(dir.join(MANIFEST_FILE), json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::Parse(format!("cannot read {}: {e}", path.display())))?;
        let manifest: CohortManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Parse(format!("manifest {}: {e}", path.display())))?;
        manifest.validate()?;
        Ok(manifest)
    }
}

/// One fully loaded slide: features plus label.
#[derive(Debug, Clone)]
pub struct CohortSlide {
    pub slide_id: String,
    pub bag: FeatureBag,
    pub record: SurvivalRecord,
}

#[derive(Debug, Clone)]
pub struct LoadedCohort {
    pub manifest: CohortManifest,
    pub slides: Vec<CohortSlide>,
}

/// Load one slide's geometry and features as declared by a manifest entry.
pub fn load_feature_bag(
    dir: &Path,
    entry: &SlideEntry,
    dim_low: usize,
    dim_high: usize,
) -> Result<FeatureBag> {
    let geometry = SlideGeometry::load(&dir.join(&entry.geom_path)).map_err(|e| match e {
        Error::Ingestion { .. } => e,
        other => Error::Ingestion {
            slide: entry.slide_id.clone(),
            detail: other.to_string(),
        },
    })?;
    if geometry.slide_id != entry.slide_id {
        return Err(Error::Ingestion {
            slide: entry.slide_id.clone(),
            detail: format!("geometry file names slide '{}'", geometry.slide_id),
        });
    }
    FeatureBag::load(&dir.join(&entry.feat_path), &geometry, dim_low, dim_high)
}

/// Load a whole cohort directory in manifest order.
pub fn load_cohort(dir: &Path) -> Result<LoadedCohort> {
    let manifest = CohortManifest::load(dir)?;
    let mut slides = Vec::with_capacity(manifest.slides.len());
    for entry in &manifest.slides {
        let bag = load_feature_bag(dir, entry, manifest.dim_low, manifest.dim_high)?;
        let record = manifest
            .labels
            .iter()
            .find(|l| l.slide_id == entry.slide_id)
            .expect("validated bijection")
            .clone();
        slides.push(CohortSlide {
            slide_id: entry.slide_id.clone(),
            bag,
            record,
        });
    }
    Ok(LoadedCohort { manifest, slides })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest() -> CohortManifest {
        CohortManifest {
            cohort_id: "c".to_string(),
            seed: 1,
            dim_low: 8,
            dim_high: 8,
            slides: vec![SlideEntry {
                slide_id: "s1".to_string(),
                geom_path: "s1.geom.json".to_string(),
                feat_path: "s1.feat.bin".to_string(),
            }],
            labels: vec![SurvivalRecord {
                slide_id: "s1".to_string(),
                time: 12.5,
                event: true,
                bin: None,
            }],
        }
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest();
        m.save(dir.path()).unwrap();
        assert_eq!(CohortManifest::load(dir.path()).unwrap(), m);
    }

    #[test]
    fn unlabeled_slide_rejected() {
        let mut m = manifest();
        m.labels.clear();
        assert!(matches!(m.validate(), Err(Error::Domain(_))));
    }

    #[test]
    fn label_without_files_rejected() {
        let mut m = manifest();
        m.labels.push(SurvivalRecord {
            slide_id: "ghost".to_string(),
            time: 3.0,
            event: false,
            bin: None,
        });
        assert!(matches!(m.validate(), Err(Error::Domain(_))));
    }

    #[test]
    fn nonpositive_time_rejected() {
        let mut m = manifest();
        m.labels[0].time = 0.0;
        assert!(matches!(m.validate(), Err(Error::Domain(_))));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut m = manifest();
        m.slides.push(m.slides[0].clone());
        assert!(matches!(m.validate(), Err(Error::Domain(_))));
    }
}
