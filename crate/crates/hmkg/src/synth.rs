//! Synthetic cohort generation with plantable survival signal.
//!
//! Four signal modes:
//!
//! * `null`: features and survival times are independent; any model should
//!   score near chance.
//! * `local-motif`: every slide carries the same total amount of a motif
//!   direction in its high-mag features. On a random half of the slides a
//!   latent strength co-locates most of that mass inside one "hot" tile;
//!   on the rest it is fully scattered. Hazard grows with the strength, so
//!   flat pooling over all high-mag patches is blind to the label while
//!   locality-aware aggregation is not.
//! * `global-context`: a Bernoulli context flag shifts every low-mag feature
//!   along a context direction and drives the hazard alone.
//! * `multi-scale`: hazard follows the product of a common high-mag motif
//!   flag and a balanced low-mag context flag, so neither scale alone
//!   suffices and the high scale alone carries little.
//!
//! Every slide's randomness is derived from a per-slide stream seeded by
//! `stable_hash64(seed, slide_id)`, so regeneration is byte-identical and
//! independent of generation order.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::{CohortManifest, CohortSlide, LoadedCohort, SlideEntry, SurvivalRecord};
use crate::error::{Error, Result};
use crate::features::FeatureBag;
use crate::geometry::{build_geometry, OriginLayout, CELLS_PER_TILE};
use crate::hashing::stable_hash64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignalMode {
    Null,
    LocalMotif,
    GlobalContext,
    MultiScale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub cohort_id: String,
    pub size: usize,
    pub seed: u64,
    pub mode: SignalMode,
    pub n_tiles_min: usize,
    pub n_tiles_max: usize,
    pub dim_low: usize,
    pub dim_high: usize,
    /// Probability a subject is censored before the event.
    pub censor_prob: f64,
    /// Exponential hazard at zero signal.
    pub baseline_hazard: f64,
    /// Log-hazard gain at full signal.
    pub hazard_coef: f64,
    /// Total motif-bearing cells per slide; constant across the cohort.
    pub motif_cells: usize,
    pub motif_amplitude: f64,
    pub context_amplitude: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            cohort_id: "synth".to_string(),
            size: 40,
            seed: 7,
            mode: SignalMode::Null,
            n_tiles_min: 6,
            n_tiles_max: 10,
            dim_low: 64,
            dim_high: 64,
            censor_prob: 0.25,
            baseline_hazard: 0.02,
            hazard_coef: 5.0,
            motif_cells: 12,
            motif_amplitude: 3.0,
            context_amplitude: 2.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::Config("cohort size must be positive".to_string()));
        }
        if self.n_tiles_min < 2 || self.n_tiles_min > self.n_tiles_max {
            return Err(Error::Config(format!(
                "tile range [{}, {}] invalid; need 2 <= min <= max",
                self.n_tiles_min, self.n_tiles_max
            )));
        }
        if self.dim_low == 0 || self.dim_high == 0 {
            return Err(Error::Config("feature dims must be positive".to_string()));
        }
        if !(0.0..1.0).contains(&self.censor_prob) {
            return Err(Error::Config(format!(
                "censor_prob {} outside [0, 1)",
                self.censor_prob
            )));
        }
        if self.baseline_hazard <= 0.0 || !self.baseline_hazard.is_finite() {
            return Err(Error::Config("baseline_hazard must be positive".to_string()));
        }
        if self.motif_cells < 2 || self.motif_cells > CELLS_PER_TILE {
            return Err(Error::Config(format!(
                "motif_cells {} outside [2, {CELLS_PER_TILE}]",
                self.motif_cells
            )));
        }
        // The scattered budget must fit at <= 2 cells per tile, both for the
        // remainder next to a hot tile and for a fully scattered slide.
        if self.motif_cells - 2 > 2 * (self.n_tiles_min - 1) {
            return Err(Error::Config(format!(
                "motif_cells {} cannot scatter over {} tiles at two cells each",
                self.motif_cells,
                self.n_tiles_min - 1
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Parse(format!("cannot read {}: {e}", path.display())))?;
        let spec: SynthSpec = toml::from_str(&text)
            .map_err(|e| Error::Parse(format!("spec {}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Parse(format!("spec serialization: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Standard normal via Box-Muller; two uniforms per draw.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn unit_direction(seed: u64, name: &str, dim: usize) -> Array1<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(stable_hash64(seed, name));
    let mut v = Array1::from_shape_fn(dim, |_| normal(&mut rng));
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.mapv_inplace(|x| x / norm);
    } else {
        v[0] = 1.0;
    }
    v
}

/// Partial Fisher-Yates: the first `take` entries of a shuffled `0..n`.
fn sample_without_replacement(rng: &mut ChaCha8Rng, n: usize, take: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..take.min(n) {
        let j = rng.gen_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(take.min(n));
    pool
}

/// Latent signal realized on one slide, exposed for experiment assertions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlideSignal {
    /// Motif strength in [0, 1]; zero on slides without a co-located motif.
    /// Drives the hazard for `local-motif`.
    pub concentration: f64,
    pub context_flag: bool,
    pub motif_flag: bool,
}

fn generate_slide(spec: &SynthSpec, index: usize) -> Result<(CohortSlide, SlideSignal)> {
    let slide_id = format!("s{index:04}");
    let mut rng = ChaCha8Rng::seed_from_u64(stable_hash64(spec.seed, &slide_id));
    let n_tiles = rng.gen_range(spec.n_tiles_min..=spec.n_tiles_max);
    let geometry = build_geometry(&slide_id, n_tiles, 224, OriginLayout::Grid { cols: 4 })?;

    let mut f_low =
        Array2::from_shape_fn((n_tiles, spec.dim_low), |_| normal(&mut rng));
    let mut f_high =
        Array2::from_shape_fn((n_tiles * CELLS_PER_TILE, spec.dim_high), |_| normal(&mut rng));

    let motif = unit_direction(spec.seed, "motif-direction", spec.dim_high);
    let context = unit_direction(spec.seed, "context-direction", spec.dim_low);

    let mut signal = SlideSignal {
        concentration: 0.0,
        context_flag: false,
        motif_flag: false,
    };

    // Boost `n_hot` co-located cells in one random tile, then scatter the
    // rest of the fixed motif budget round-robin at no more than two cells
    // per remaining tile. With `n_hot = 0` the whole budget scatters, so
    // every slide carries the same total motif mass either way.
    let plant_motif = |f_high: &mut Array2<f64>, rng: &mut ChaCha8Rng, n_hot: usize| {
        let hot_tile = (n_hot > 0).then(|| rng.gen_range(0..n_tiles));
        if let Some(hot) = hot_tile {
            for cell in sample_without_replacement(rng, CELLS_PER_TILE, n_hot) {
                let row = hot * CELLS_PER_TILE + cell;
                for d in 0..spec.dim_high {
                    f_high[[row, d]] += spec.motif_amplitude * motif[d];
                }
            }
        }
        let mut others: Vec<usize> =
            (0..n_tiles).filter(|&t| Some(t) != hot_tile).collect();
        for i in 0..others.len() {
            let j = rng.gen_range(i..others.len());
            others.swap(i, j);
        }
        let mut used: Vec<Vec<usize>> = vec![Vec::new(); n_tiles];
        let mut remaining = spec.motif_cells - n_hot;
        'outer: for _pass in 0..2 {
            for &tile in &others {
                if remaining == 0 {
                    break 'outer;
                }
                let cell = loop {
                    let c = rng.gen_range(0..CELLS_PER_TILE);
                    if !used[tile].contains(&c) {
                        break c;
                    }
                };
                used[tile].push(cell);
                let row = tile * CELLS_PER_TILE + cell;
                for d in 0..spec.dim_high {
                    f_high[[row, d]] += spec.motif_amplitude * motif[d];
                }
                remaining -= 1;
            }
        }
    };

    let log_gain = match spec.mode {
        SignalMode::Null => 0.0,
        SignalMode::LocalMotif => {
            // Half the slides carry a co-located motif whose strength sets
            // both the hot-cell count and the hazard; the other half receive
            // the same motif mass fully scattered, so only within-tile
            // concentration separates the groups.
            signal.motif_flag = rng.gen::<f64>() < 0.5;
            let n_hot = if signal.motif_flag {
                let strength = 0.5 + 0.5 * rng.gen::<f64>();
                signal.concentration = strength;
                let span = (spec.motif_cells - 2) as f64;
                2 + (span * strength).round() as usize
            } else {
                0
            };
            plant_motif(&mut f_high, &mut rng, n_hot);
            spec.hazard_coef * signal.concentration
        }
        SignalMode::GlobalContext => {
            signal.context_flag = rng.gen::<f64>() < 0.5;
            if signal.context_flag {
                for t in 0..n_tiles {
                    for d in 0..spec.dim_low {
                        f_low[[t, d]] += spec.context_amplitude * context[d];
                    }
                }
            }
            spec.hazard_coef * f64::from(signal.context_flag)
        }
        SignalMode::MultiScale => {
            // The high-mag motif is common and the low-mag context balanced,
            // so the motif flag alone carries little of the joint signal and
            // a high-scale-only reader stays well below a two-scale one.
            signal.motif_flag = rng.gen::<f64>() < 0.85;
            signal.context_flag = rng.gen::<f64>() < 0.5;
            if signal.motif_flag {
                plant_motif(&mut f_high, &mut rng, spec.motif_cells);
            }
            if signal.context_flag {
                for t in 0..n_tiles {
                    for d in 0..spec.dim_low {
                        f_low[[t, d]] += spec.context_amplitude * context[d];
                    }
                }
            }
            spec.hazard_coef * f64::from(signal.motif_flag) * f64::from(signal.context_flag)
        }
    };

    let hazard = spec.baseline_hazard * log_gain.exp();
    let u: f64 = rng.gen();
    let t_true = (-(1.0 - u).ln()).max(1e-9) / hazard;
    let censored = rng.gen::<f64>() < spec.censor_prob;
    let record = if censored {
        let frac: f64 = 1.0 - rng.gen::<f64>();
        SurvivalRecord {
            slide_id: slide_id.clone(),
            time: t_true * frac,
            event: false,
            bin: None,
        }
    } else {
        SurvivalRecord {
            slide_id: slide_id.clone(),
            time: t_true,
            event: true,
            bin: None,
        }
    };

    let bag = FeatureBag {
        geometry,
        dim_low: spec.dim_low,
        dim_high: spec.dim_high,
        f_low,
        f_high,
    };
    bag.validate()?;
    Ok((
        CohortSlide {
            slide_id,
            bag,
            record,
        },
        signal,
    ))
}

/// Generate the whole cohort in memory, with per-slide latent signals.
pub fn generate_cohort(spec: &SynthSpec) -> Result<(LoadedCohort, Vec<SlideSignal>)> {
    spec.validate()?;
    let mut slides = Vec::with_capacity(spec.size);
    let mut signals = Vec::with_capacity(spec.size);
    for i in 0..spec.size {
        let (slide, signal) = generate_slide(spec, i)?;
        slides.push(slide);
        signals.push(signal);
    }
    let manifest = CohortManifest {
        cohort_id: spec.cohort_id.clone(),
        seed: spec.seed,
        dim_low: spec.dim_low,
        dim_high: spec.dim_high,
        slides: slides
            .iter()
            .map(|s| SlideEntry {
                slide_id: s.slide_id.clone(),
                geom_path: format!("{}.geom.json", s.slide_id),
                feat_path: format!("{}.bin", s.slide_id),
            })
            .collect(),
        labels: slides.iter().map(|s| s.record.clone()).collect(),
    };
    manifest.validate()?;
    Ok((LoadedCohort { manifest, slides }, signals))
}

/// Generate and persist a cohort directory: manifest, geometry, features.
pub fn write_cohort(spec: &SynthSpec, dir: &Path) -> Result<LoadedCohort> {
    let (cohort, _) = generate_cohort(spec)?;
    std::fs::create_dir_all(dir)?;
    for slide in &cohort.slides {
        slide
            .bag
            .geometry
            .save(&dir.join(format!("{}.geom.json", slide.slide_id)))?;
        slide.bag.save(&dir.join(format!("{}.bin", slide.slide_id)))?;
    }
    cohort.manifest.save(dir)?;
    Ok(cohort)
}
