//! Bidirectional cross-attention fusion of one tile's coarse low-mag vector
//! with its fine high-mag representation.
//!
//! The low-to-high pass attends from the low-mag vector (one query) over the
//! sixteen updated high-mag node embeddings; the high-to-low pass attends
//! from the sixteen nodes over the single low-mag key and is mean-pooled
//! over its rows. The two attention outputs are concatenated into a fused
//! tile vector of twice the attention width.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::train::init_matrix;

/// Interpretation of the fusion inputs: `Set` attends over the sixteen
/// high-mag nodes; `Vector` uses the single pooled high vector on both
/// sides, which degenerates both softmaxes to pass-throughs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BixMode {
    Set,
    Vector,
}

/// Query/key/value projections of one attention direction.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttnParams {
    /// `[d_q_in x d]`
    pub w_q: Array2<f64>,
    /// `[d_kv_in x d]`
    pub w_k: Array2<f64>,
    /// `[d_kv_in x d]`
    pub w_v: Array2<f64>,
}

impl CrossAttnParams {
    pub fn init(rng: &mut ChaCha8Rng, d_q_in: usize, d_kv_in: usize, d: usize) -> Self {
        CrossAttnParams {
            w_q: init_matrix(rng, d_q_in, d),
            w_k: init_matrix(rng, d_kv_in, d),
            w_v: init_matrix(rng, d_kv_in, d),
        }
    }

    pub fn insert(&self, tape: &mut Tape, trainable: bool) -> CrossAttnVars {
        CrossAttnVars {
            w_q: tape.leaf(self.w_q.clone(), trainable),
            w_k: tape.leaf(self.w_k.clone(), trainable),
            w_v: tape.leaf(self.w_v.clone(), trainable),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CrossAttnVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

/// Both directions of the fusion. `dir_hl = None` ties the two directions to
/// one parameter set, which requires the low-mag and node dimensions to
/// agree.
#[derive(Debug, Clone, PartialEq)]
pub struct BixParams {
    pub dir_lh: CrossAttnParams,
    pub dir_hl: Option<CrossAttnParams>,
}

impl BixParams {
    /// `d_low`: low-mag feature width; `d_node`: updated high-node width;
    /// `d`: attention width; `tied`: share one parameter set across
    /// directions.
    pub fn init(
        rng: &mut ChaCha8Rng,
        d_low: usize,
        d_node: usize,
        d: usize,
        tied: bool,
    ) -> Result<Self> {
        if tied && d_low != d_node {
            return Err(Error::Config(format!(
                "tied fusion directions need d_low == d_out, got {d_low} and {d_node}"
            )));
        }
        Ok(BixParams {
            dir_lh: CrossAttnParams::init(rng, d_low, d_node, d),
            dir_hl: if tied {
                None
            } else {
                Some(CrossAttnParams::init(rng, d_node, d_low, d))
            },
        })
    }

    pub fn d(&self) -> usize {
        self.dir_lh.w_q.ncols()
    }

    pub fn insert(&self, tape: &mut Tape, trainable: bool) -> BixVars {
        BixVars {
            lh: self.dir_lh.insert(tape, trainable),
            hl: self.dir_hl.as_ref().map(|p| p.insert(tape, trainable)),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BixVars {
    pub lh: CrossAttnVars,
    /// `None` reuses the low-to-high projections (tied directions), so
    /// gradients from both passes accumulate into one parameter set.
    pub hl: Option<CrossAttnVars>,
}

impl BixVars {
    fn hl(&self) -> CrossAttnVars {
        self.hl.unwrap_or(self.lh)
    }
}

/// Scaled dot-product attention `softmax(Q K^T / sqrt(d)) V` with row-wise
/// softmax over the keys.
pub fn cross_attention(tape: &mut Tape, queries: Var, keys: Var, values: Var) -> Result<Var> {
    let (_, d) = tape.shape(queries);
    let (kn, kd) = tape.shape(keys);
    let (vn, _) = tape.shape(values);
    if kd != d {
        return Err(Error::Shape(format!(
            "queries have width {d}, keys have {kd}"
        )));
    }
    if kn != vn {
        return Err(Error::Shape(format!("{kn} keys vs {vn} values")));
    }
    let keys_t = tape.transpose(keys);
    let logits = tape.matmul(queries, keys_t)?;
    let scaled = tape.scale(logits, 1.0 / (d as f64).sqrt());
    let attn = tape.row_softmax(scaled);
    tape.matmul(attn, values)
}

/// Attention weights of one cross-attention pass, for invariant checks.
pub fn cross_attention_weights(
    queries: &Array2<f64>,
    keys: &Array2<f64>,
) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let q = tape.leaf(queries.clone(), false);
    let k = tape.leaf(keys.clone(), false);
    let k_t = tape.transpose(k);
    let logits = tape.matmul(q, k_t)?;
    let scaled = tape.scale(logits, 1.0 / (queries.ncols() as f64).sqrt());
    let attn = tape.row_softmax(scaled);
    Ok(tape.value(attn).clone())
}

/// Fuse one tile: returns the `[1 x 2d]` concatenation of the low-to-high
/// attention output and the pooled high-to-low attention output.
pub fn fuse_roi(
    tape: &mut Tape,
    f_low: Var,
    high_nodes: Var,
    high_pooled: Var,
    vars: &BixVars,
    mode: BixMode,
) -> Result<Var> {
    let hl = vars.hl();
    match mode {
        BixMode::Set => {
            let q_lh = tape.matmul(f_low, vars.lh.w_q)?;
            let k_lh = tape.matmul(high_nodes, vars.lh.w_k)?;
            let v_lh = tape.matmul(high_nodes, vars.lh.w_v)?;
            let attn_lh = cross_attention(tape, q_lh, k_lh, v_lh)?;

            let q_hl = tape.matmul(high_nodes, hl.w_q)?;
            let k_hl = tape.matmul(f_low, hl.w_k)?;
            let v_hl = tape.matmul(f_low, hl.w_v)?;
            let attn_hl_rows = cross_attention(tape, q_hl, k_hl, v_hl)?;
            let attn_hl = tape.mean_rows(attn_hl_rows)?;

            tape.concat_cols(attn_lh, attn_hl)
        }
        BixMode::Vector => {
            let q_lh = tape.matmul(f_low, vars.lh.w_q)?;
            let k_lh = tape.matmul(high_pooled, vars.lh.w_k)?;
            let v_lh = tape.matmul(high_pooled, vars.lh.w_v)?;
            let attn_lh = cross_attention(tape, q_lh, k_lh, v_lh)?;

            let q_hl = tape.matmul(high_pooled, hl.w_q)?;
            let k_hl = tape.matmul(f_low, hl.w_k)?;
            let v_hl = tape.matmul(f_low, hl.w_v)?;
            let attn_hl = cross_attention(tape, q_hl, k_hl, v_hl)?;

            tape.concat_cols(attn_lh, attn_hl)
        }
    }
}
