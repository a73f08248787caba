//! Whole-slide model assembly: local aggregation per tile group, optional
//! bidirectional fusion with the low-mag stream, global aggregation over
//! tile embeddings, and the hazard head. Four variants cover the ablation
//! matrix:
//!
//! | variant        | hierarchical | locality | multi-scale |
//! |----------------|--------------|----------|-------------|
//! | `full`         | yes          | yes      | yes         |
//! | `single_scale` | yes          | yes      | no          |
//! | `no_locality`  | yes          | no       | n/a         |
//! | `kgn_baseline` | no           | --       | no          |
//!
//! `no_locality` keeps the two-level hierarchy but shuffles high-mag patches
//! into seeded pseudo-groups (or one global graph), so message passing loses
//! the within-tile constraint. `kgn_baseline` runs one flat graph over every
//! high-mag patch; its computation graph is identical to `single_scale` on a
//! one-tile slide.

use std::io::{Read as _, Write as _};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::bix::{fuse_roi, BixMode, BixParams, BixVars};
use crate::error::{Error, Result};
use crate::features::FeatureBag;
use crate::geometry::CELLS_PER_TILE;
use crate::hashing::stable_hash64;
use crate::kgn::{aggregate_on_tape, KgnParams, KgnVars};
use crate::survival::HazardOutput;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantName {
    Full,
    SingleScale,
    NoLocality,
    KgnBaseline,
}

impl VariantName {
    pub const ALL: [VariantName; 4] = [
        VariantName::KgnBaseline,
        VariantName::SingleScale,
        VariantName::NoLocality,
        VariantName::Full,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            VariantName::Full => "full",
            VariantName::SingleScale => "single_scale",
            VariantName::NoLocality => "no_locality",
            VariantName::KgnBaseline => "kgn_baseline",
        }
    }

    /// Ablation flags; `None` renders as `--` / `n/a` in reports.
    pub fn flags(&self) -> (bool, Option<bool>, Option<bool>) {
        match self {
            VariantName::Full => (true, Some(true), Some(true)),
            VariantName::SingleScale => (true, Some(true), Some(false)),
            VariantName::NoLocality => (true, Some(false), None),
            VariantName::KgnBaseline => (false, None, Some(false)),
        }
    }
}

impl std::str::FromStr for VariantName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(VariantName::Full),
            "single_scale" => Ok(VariantName::SingleScale),
            "no_locality" => Ok(VariantName::NoLocality),
            "kgn_baseline" => Ok(VariantName::KgnBaseline),
            other => Err(Error::Config(format!("unknown variant '{other}'"))),
        }
    }
}

/// How `no_locality` destroys the spatial constraint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoLocalityMode {
    /// Seeded random pseudo-groups of 16 patches, fixed per slide.
    RandomGroups,
    /// One graph over every high-mag patch on the slide.
    GlobalGraph,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_low: usize,
    pub d_high: usize,
    /// Attention width for graph scoring and cross-attention.
    pub d: usize,
    /// Node embedding width, shared by both hierarchy levels.
    pub d_out: usize,
    pub t_bins: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.d_low == 0
            || self.d_high == 0
            || self.d == 0
            || self.d_out == 0
            || self.t_bins == 0
        {
            return Err(Error::Config(format!("all dims must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Everything needed to build (or rebuild) a model deterministically.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub dims: ModelDims,
    pub variant: VariantName,
    pub top_k_local: usize,
    pub top_k_global: usize,
    pub bix_mode: BixMode,
    pub no_locality_mode: NoLocalityMode,
    /// Share one projection set across both fusion directions.
    pub bix_tied: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HmkgParams {
    pub spec: ModelSpec,
    pub local: KgnParams,
    pub global: KgnParams,
    pub bix: Option<BixParams>,
    /// `[2d x d_out]`, projecting the fused pair into the global graph.
    pub fuse_proj: Option<Array2<f64>>,
    /// `[d_out x t_bins]`
    pub head_w: Array2<f64>,
    /// `[1 x t_bins]`
    pub head_b: Array2<f64>,
}

impl HmkgParams {
    pub fn init(spec: &ModelSpec) -> Result<Self> {
        spec.dims.validate()?;
        if spec.top_k_local == 0 || spec.top_k_global == 0 {
            return Err(Error::Config("top_k must be at least 1".to_string()));
        }
        let dims = spec.dims;
        let mut rng = ChaCha8Rng::seed_from_u64(stable_hash64(spec.seed, "model-init"));
        let local = KgnParams::init(&mut rng, dims.d_high, dims.d, dims.d_out, spec.top_k_local);
        let global = KgnParams::init(&mut rng, dims.d_out, dims.d, dims.d_out, spec.top_k_global);
        let multiscale = spec.variant == VariantName::Full;
        let bix = if multiscale {
            Some(BixParams::init(
                &mut rng,
                dims.d_low,
                dims.d_out,
                dims.d,
                spec.bix_tied,
            )?)
        } else {
            None
        };
        let fuse_proj = multiscale
            .then(|| crate::train::init_matrix(&mut rng, 2 * dims.d, dims.d_out));
        let head_w = crate::train::init_matrix(&mut rng, dims.d_out, dims.t_bins);
        let head_b = Array2::zeros((1, dims.t_bins));
        Ok(HmkgParams {
            spec: *spec,
            local,
            global,
            bix,
            fuse_proj,
            head_w,
            head_b,
        })
    }

    /// Parameter tensors in a fixed, documented order.
    pub fn named_tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out: Vec<(String, &Array2<f64>)> = vec![
            ("local.w_head".into(), &self.local.w_head),
            ("local.w_tail".into(), &self.local.w_tail),
            ("local.w_msg".into(), &self.local.w_msg),
            ("local.w_self".into(), &self.local.w_self),
            ("local.readout_query".into(), &self.local.readout_query),
            ("global.w_head".into(), &self.global.w_head),
            ("global.w_tail".into(), &self.global.w_tail),
            ("global.w_msg".into(), &self.global.w_msg),
            ("global.w_self".into(), &self.global.w_self),
            ("global.readout_query".into(), &self.global.readout_query),
        ];
        if let Some(bix) = &self.bix {
            out.push(("bix.lh.w_q".into(), &bix.dir_lh.w_q));
            out.push(("bix.lh.w_k".into(), &bix.dir_lh.w_k));
            out.push(("bix.lh.w_v".into(), &bix.dir_lh.w_v));
            if let Some(hl) = &bix.dir_hl {
                out.push(("bix.hl.w_q".into(), &hl.w_q));
                out.push(("bix.hl.w_k".into(), &hl.w_k));
                out.push(("bix.hl.w_v".into(), &hl.w_v));
            }
        }
        if let Some(proj) = &self.fuse_proj {
            out.push(("fuse_proj".into(), proj));
        }
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out: Vec<(String, &mut Array2<f64>)> = vec![
            ("local.w_head".into(), &mut self.local.w_head),
            ("local.w_tail".into(), &mut self.local.w_tail),
            ("local.w_msg".into(), &mut self.local.w_msg),
            ("local.w_self".into(), &mut self.local.w_self),
            ("local.readout_query".into(), &mut self.local.readout_query),
            ("global.w_head".into(), &mut self.global.w_head),
            ("global.w_tail".into(), &mut self.global.w_tail),
            ("global.w_msg".into(), &mut self.global.w_msg),
            ("global.w_self".into(), &mut self.global.w_self),
            ("global.readout_query".into(), &mut self.global.readout_query),
        ];
        if let Some(bix) = &mut self.bix {
            out.push(("bix.lh.w_q".into(), &mut bix.dir_lh.w_q));
            out.push(("bix.lh.w_k".into(), &mut bix.dir_lh.w_k));
            out.push(("bix.lh.w_v".into(), &mut bix.dir_lh.w_v));
            if let Some(hl) = &mut bix.dir_hl {
                out.push(("bix.hl.w_q".into(), &mut hl.w_q));
                out.push(("bix.hl.w_k".into(), &mut hl.w_k));
                out.push(("bix.hl.w_v".into(), &mut hl.w_v));
            }
        }
        if let Some(proj) = &mut self.fuse_proj {
            out.push(("fuse_proj".into(), proj));
        }
        out.push(("head.w".into(), &mut self.head_w));
        out.push(("head.b".into(), &mut self.head_b));
        out
    }

    /// Put every parameter on the tape. The same order as `named_tensors`.
    pub fn insert(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        ModelVars {
            local: self.local.insert(tape, trainable),
            global: self.global.insert(tape, trainable),
            bix: self.bix.as_ref().map(|b| b.insert(tape, trainable)),
            fuse_proj: self
                .fuse_proj
                .as_ref()
                .map(|p| tape.leaf(p.clone(), trainable)),
            head_w: tape.leaf(self.head_w.clone(), trainable),
            head_b: tape.leaf(self.head_b.clone(), trainable),
        }
    }

    /// High-mag row groups fed to the local graph, per variant.
    pub fn group_rows(&self, bag: &FeatureBag) -> Vec<Vec<usize>> {
        let n_tiles = bag.geometry.n_tiles;
        let total = n_tiles * CELLS_PER_TILE;
        match self.spec.variant {
            VariantName::Full | VariantName::SingleScale => (0..n_tiles)
                .map(|t| (t * CELLS_PER_TILE..(t + 1) * CELLS_PER_TILE).collect())
                .collect(),
            VariantName::NoLocality => match self.spec.no_locality_mode {
                NoLocalityMode::RandomGroups => {
                    pseudo_groups(self.spec.seed, &bag.geometry.slide_id, total)
                }
                NoLocalityMode::GlobalGraph => vec![(0..total).collect()],
            },
            VariantName::KgnBaseline => vec![(0..total).collect()],
        }
    }

    /// Full forward pass to hazard logits `[1 x t_bins]`.
    pub fn forward_logits(
        &self,
        tape: &mut Tape,
        bag: &FeatureBag,
        vars: &ModelVars,
    ) -> Result<Var> {
        bag.validate()?;
        if bag.dim_high != self.spec.dims.d_high || bag.dim_low != self.spec.dims.d_low {
            return Err(Error::Shape(format!(
                "bag dims ({}, {}) do not match model dims ({}, {})",
                bag.dim_low, bag.dim_high, self.spec.dims.d_low, self.spec.dims.d_high
            )));
        }
        let f_high = tape.leaf(bag.f_high.clone(), false);
        let f_low = tape.leaf(bag.f_low.clone(), false);
        let groups = self.group_rows(bag);
        let mut tile_embeddings = Vec::with_capacity(groups.len());
        for (g, rows) in groups.iter().enumerate() {
            let nodes = tape.select_rows(f_high, rows)?;
            let (updated, pooled) = aggregate_on_tape(tape, nodes, &vars.local)?;
            let embedding = if self.spec.variant == VariantName::Full {
                let bix_vars = vars.bix.as_ref().expect("full variant carries fusion");
                let proj = vars.fuse_proj.expect("full variant carries fuse_proj");
                let low_row = tape.select_rows(f_low, &[g])?;
                let fused = fuse_roi(
                    tape,
                    low_row,
                    updated,
                    pooled,
                    bix_vars,
                    self.spec.bix_mode,
                )?;
                tape.matmul(fused, proj)?
            } else {
                pooled
            };
            tile_embeddings.push(embedding);
        }
        let global_nodes = tape.concat_rows(&tile_embeddings)?;
        let (_, slide_embedding) = aggregate_on_tape(tape, global_nodes, &vars.global)?;
        let scores = tape.matmul(slide_embedding, vars.head_w)?;
        tape.add(scores, vars.head_b)
    }

    /// Tile embeddings entering the global graph, as plain values.
    pub fn tile_embeddings(&self, bag: &FeatureBag) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let vars = self.insert(&mut tape, false);
        bag.validate()?;
        let f_high = tape.leaf(bag.f_high.clone(), false);
        let f_low = tape.leaf(bag.f_low.clone(), false);
        let groups = self.group_rows(bag);
        let mut out = Array2::zeros((groups.len(), self.spec.dims.d_out));
        for (g, rows) in groups.iter().enumerate() {
            let nodes = tape.select_rows(f_high, rows)?;
            let (updated, pooled) = aggregate_on_tape(&mut tape, nodes, &vars.local)?;
            let embedding = if self.spec.variant == VariantName::Full {
                let bix_vars = vars.bix.as_ref().expect("full variant carries fusion");
                let proj = vars.fuse_proj.expect("full variant carries fuse_proj");
                let low_row = tape.select_rows(f_low, &[g])?;
                let fused = fuse_roi(
                    &mut tape,
                    low_row,
                    updated,
                    pooled,
                    bix_vars,
                    self.spec.bix_mode,
                )?;
                tape.matmul(fused, proj)?
            } else {
                pooled
            };
            out.row_mut(g).assign(&tape.value(embedding).row(0));
        }
        Ok(out)
    }

    /// Inference: logits through the stable hazard/survival transform.
    pub fn predict(&self, bag: &FeatureBag) -> Result<HazardOutput> {
        let mut tape = Tape::new();
        let vars = self.insert(&mut tape, false);
        let logits = self.forward_logits(&mut tape, bag, &vars)?;
        let row: Vec<f64> = tape.value(logits).row(0).to_vec();
        Ok(HazardOutput::from_logits(&row))
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let tensors = self.named_tensors();
        let header = CkptHeader {
            format: CKPT_FORMAT.to_string(),
            spec: self.spec,
            tensors: tensors
                .iter()
                .map(|(name, t)| TensorMeta {
                    name: name.clone(),
                    rows: t.nrows(),
                    cols: t.ncols(),
                })
                .collect(),
        };
        let mut file = std::fs::File::create(path)?;
        let header_json = serde_json::to_string(&header)
            .map_err(|e| Error::Parse(format!("checkpoint header: {e}")))?;
        file.write_all(header_json.as_bytes())?;
        file.write_all(b"\n")?;
        for (_, tensor) in &tensors {
            for v in tensor.iter() {
                file.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Parse("checkpoint has no header line".to_string()))?;
        let header: CkptHeader = serde_json::from_slice(&bytes[..newline])
            .map_err(|e| Error::Parse(format!("checkpoint header: {e}")))?;
        if header.format != CKPT_FORMAT {
            return Err(Error::Parse(format!(
                "unsupported checkpoint format '{}'",
                header.format
            )));
        }
        let mut params = HmkgParams::init(&header.spec)?;
        let mut offset = newline + 1;
        let mut metas = header.tensors.iter();
        for (name, tensor) in params.named_tensors_mut() {
            let meta = metas.next().ok_or_else(|| {
                Error::Parse(format!("checkpoint is missing tensor '{name}'"))
            })?;
            if meta.name != name || meta.rows != tensor.nrows() || meta.cols != tensor.ncols() {
                return Err(Error::Parse(format!(
                    "checkpoint tensor '{}' ({}x{}) does not match model tensor '{name}' ({}x{})",
                    meta.name,
                    meta.rows,
                    meta.cols,
                    tensor.nrows(),
                    tensor.ncols()
                )));
            }
            let need = meta.rows * meta.cols * 8;
            if offset + need > bytes.len() {
                return Err(Error::Parse("checkpoint data truncated".to_string()));
            }
            for v in tensor.iter_mut() {
                let mut buf = [0u8; 8];
                buf.copy_from_slice(&bytes[offset..offset + 8]);
                *v = f64::from_le_bytes(buf);
                offset += 8;
            }
        }
        if metas.next().is_some() {
            return Err(Error::Parse(
                "checkpoint lists tensors the model does not have".to_string(),
            ));
        }
        if offset != bytes.len() {
            return Err(Error::Parse(format!(
                "checkpoint has {} trailing bytes",
                bytes.len() - offset
            )));
        }
        Ok(params)
    }
}

const CKPT_FORMAT: &str = "hmkg-ckpt-v1";

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    format: String,
    spec: ModelSpec,
    tensors: Vec<TensorMeta>,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    rows: usize,
    cols: usize,
}

/// Tape handles for one model instance, in `named_tensors` order.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub local: KgnVars,
    pub global: KgnVars,
    pub bix: Option<BixVars>,
    pub fuse_proj: Option<Var>,
    pub head_w: Var,
    pub head_b: Var,
}

impl ModelVars {
    /// Vars in the same order as `HmkgParams::named_tensors`.
    pub fn var_list(&self) -> Vec<Var> {
        let mut out = vec![
            self.local.w_head,
            self.local.w_tail,
            self.local.w_msg,
            self.local.w_self,
            self.local.readout_query,
            self.global.w_head,
            self.global.w_tail,
            self.global.w_msg,
            self.global.w_self,
            self.global.readout_query,
        ];
        if let Some(bix) = &self.bix {
            out.push(bix.lh.w_q);
            out.push(bix.lh.w_k);
            out.push(bix.lh.w_v);
            if let Some(hl) = &bix.hl {
                out.push(hl.w_q);
                out.push(hl.w_k);
                out.push(hl.w_v);
            }
        }
        if let Some(proj) = self.fuse_proj {
            out.push(proj);
        }
        out.push(self.head_w);
        out.push(self.head_b);
        out
    }
}

/// Seeded partition of `0..n_rows` into groups of 16, fixed per slide and
/// independent of epoch or manifest order.
pub fn pseudo_groups(seed: u64, slide_id: &str, n_rows: usize) -> Vec<Vec<usize>> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(stable_hash64(seed, &format!("pseudo-groups/{slide_id}")));
    let mut rows: Vec<usize> = (0..n_rows).collect();
    for i in (1..rows.len()).rev() {
        let j = rng.gen_range(0..=i);
        rows.swap(i, j);
    }
    rows.chunks(CELLS_PER_TILE).map(|c| c.to_vec()).collect()
}
