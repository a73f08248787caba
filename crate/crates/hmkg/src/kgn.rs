//! Knowledge-aware dynamic-graph aggregation.
//!
//! One aggregation pass over a node set: project every node into head and
//! tail spaces, score all directed pairs by dot product, keep each node's
//! top-k neighbors as dynamic edges, aggregate neighbor interactions with
//! softmax attention plus a self term, then pool the updated nodes with an
//! attention readout. The same function serves both hierarchy levels.

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::train::init_matrix;

/// Input to one aggregation pass.
#[derive(Debug, Clone)]
pub struct NodeSet {
    /// `[n x d_in]`
    pub features: Array2<f64>,
    /// Opaque per-node identifiers, same length as `features` has rows.
    pub node_keys: Vec<String>,
}

impl NodeSet {
    pub fn new(features: Array2<f64>, node_keys: Vec<String>) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::Domain("node set must be non-empty".to_string()));
        }
        if node_keys.len() != features.nrows() {
            return Err(Error::Shape(format!(
                "{} keys for {} nodes",
                node_keys.len(),
                features.nrows()
            )));
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain("node features must be finite".to_string()));
        }
        Ok(NodeSet {
            features,
            node_keys,
        })
    }
}

/// Learnable weights of one aggregation pass.
#[derive(Debug, Clone, PartialEq)]
pub struct KgnParams {
    /// `[d_in x d_attn]`
    pub w_head: Array2<f64>,
    /// `[d_in x d_attn]`
    pub w_tail: Array2<f64>,
    /// `[d_attn x d_out]`
    pub w_msg: Array2<f64>,
    /// `[d_in x d_out]`
    pub w_self: Array2<f64>,
    /// `[d_out x 1]`
    pub readout_query: Array2<f64>,
    pub top_k: usize,
}

impl KgnParams {
    pub fn init(
        rng: &mut ChaCha8Rng,
        d_in: usize,
        d_attn: usize,
        d_out: usize,
        top_k: usize,
    ) -> Self {
        KgnParams {
            w_head: init_matrix(rng, d_in, d_attn),
            w_tail: init_matrix(rng, d_in, d_attn),
            w_msg: init_matrix(rng, d_attn, d_out),
            w_self: init_matrix(rng, d_in, d_out),
            readout_query: init_matrix(rng, d_out, 1),
            top_k,
        }
    }

    pub fn d_in(&self) -> usize {
        self.w_head.nrows()
    }

    pub fn d_attn(&self) -> usize {
        self.w_head.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.w_msg.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_k < 1 {
            return Err(Error::Config("top_k must be at least 1".to_string()));
        }
        let (d_in, d_attn, d_out) = (self.d_in(), self.d_attn(), self.d_out());
        if self.w_tail.dim() != (d_in, d_attn) {
            return Err(Error::Shape(format!(
                "w_tail is {:?}, expected ({d_in}, {d_attn})",
                self.w_tail.dim()
            )));
        }
        if self.w_msg.dim() != (d_attn, d_out) {
            return Err(Error::Shape(format!(
                "w_msg is {:?}, expected ({d_attn}, {d_out})",
                self.w_msg.dim()
            )));
        }
        if self.w_self.dim() != (d_in, d_out) {
            return Err(Error::Shape(format!(
                "w_self is {:?}, expected ({d_in}, {d_out})",
                self.w_self.dim()
            )));
        }
        if self.readout_query.dim() != (d_out, 1) {
            return Err(Error::Shape(format!(
                "readout_query is {:?}, expected ({d_out}, 1)",
                self.readout_query.dim()
            )));
        }
        Ok(())
    }

    /// Put the weights on a tape; `trainable` controls gradient tracking.
    pub fn insert(&self, tape: &mut Tape, trainable: bool) -> KgnVars {
        KgnVars {
            w_head: tape.leaf(self.w_head.clone(), trainable),
            w_tail: tape.leaf(self.w_tail.clone(), trainable),
            w_msg: tape.leaf(self.w_msg.clone(), trainable),
            w_self: tape.leaf(self.w_self.clone(), trainable),
            readout_query: tape.leaf(self.readout_query.clone(), trainable),
            top_k: self.top_k,
        }
    }
}

/// Tape handles for one [`KgnParams`] instance.
#[derive(Debug, Clone, Copy)]
pub struct KgnVars {
    pub w_head: Var,
    pub w_tail: Var,
    pub w_msg: Var,
    pub w_self: Var,
    pub readout_query: Var,
    pub top_k: usize,
}

/// Dynamic edges: for each node, its selected neighbor indices and the raw
/// attention logits of those edges.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeSet {
    pub neighbors: Vec<Vec<usize>>,
    pub logits: Vec<Vec<f64>>,
}

impl EdgeSet {
    /// Neighbors per node; uniform across nodes by construction.
    pub fn degree(&self) -> usize {
        self.neighbors[0].len()
    }
}

/// Head/tail projections of the node features.
pub fn head_tail_project(tape: &mut Tape, nodes: Var, vars: &KgnVars) -> Result<(Var, Var)> {
    let heads = tape.matmul(nodes, vars.w_head)?;
    let tails = tape.matmul(nodes, vars.w_tail)?;
    Ok((heads, tails))
}

/// Select each node's `min(top_k, n-1)` highest-scoring neighbors (excluding
/// itself) with `score(u, v) = head_u . tail_v`; ties prefer the lower index.
/// A single-node set falls back to one self-edge.
pub fn build_dynamic_edges(
    heads: &Array2<f64>,
    tails: &Array2<f64>,
    top_k: usize,
) -> Result<EdgeSet> {
    if heads.dim() != tails.dim() {
        return Err(Error::Shape(format!(
            "heads {:?} vs tails {:?}",
            heads.dim(),
            tails.dim()
        )));
    }
    let scores = heads.dot(&tails.t());
    Ok(edges_from_scores(&scores, top_k))
}

fn edges_from_scores(scores: &Array2<f64>, top_k: usize) -> EdgeSet {
    let n = scores.nrows();
    if n == 1 {
        return EdgeSet {
            neighbors: vec![vec![0]],
            logits: vec![vec![scores[[0, 0]]]],
        };
    }
    let keep = top_k.min(n - 1);
    let mut neighbors = Vec::with_capacity(n);
    let mut logits = Vec::with_capacity(n);
    for u in 0..n {
        let mut candidates: Vec<usize> = (0..n).filter(|&v| v != u).collect();
        candidates.sort_by(|&a, &b| {
            scores[[u, b]]
                .total_cmp(&scores[[u, a]])
                .then(a.cmp(&b))
        });
        candidates.truncate(keep);
        logits.push(candidates.iter().map(|&v| scores[[u, v]]).collect());
        neighbors.push(candidates);
    }
    EdgeSet { neighbors, logits }
}

/// Softmax-attention message passing over the dynamic edges with a self
/// term: `u' = nonlin(W_self x_u + sum_v alpha_uv (head_u * tail_v) W_msg)`.
pub fn knowledge_attention_aggregate(
    tape: &mut Tape,
    nodes: Var,
    heads: Var,
    tails: Var,
    scores: Var,
    edges: &EdgeSet,
    vars: &KgnVars,
) -> Result<Var> {
    let n = tape.shape(nodes).0;
    if edges.neighbors.len() != n {
        return Err(Error::Shape(format!(
            "edge set covers {} nodes, set has {n}",
            edges.neighbors.len()
        )));
    }
    let degree = edges.degree();
    let mut pairs = Vec::with_capacity(n * degree);
    let mut flat_neighbors = Vec::with_capacity(n * degree);
    for (u, neigh) in edges.neighbors.iter().enumerate() {
        for &v in neigh {
            pairs.push((u, v));
            flat_neighbors.push(v);
        }
    }
    let logit_rows = tape.gather(scores, &pairs, n, degree)?;
    let alpha = tape.row_softmax(logit_rows);
    let alpha_col = tape.reshape(alpha, n * degree, 1)?;
    let neighbor_tails = tape.select_rows(tails, &flat_neighbors)?;
    let weighted = tape.mul_col_vec(neighbor_tails, alpha_col)?;
    let tail_mix = tape.sum_row_groups(weighted, degree)?;
    let interaction = tape.mul(heads, tail_mix)?;
    let messages = tape.matmul(interaction, vars.w_msg)?;
    let self_term = tape.matmul(nodes, vars.w_self)?;
    let pre = tape.add(self_term, messages)?;
    Ok(tape.tanh(pre))
}

/// Attention pooling of the updated nodes: softmax over `readout_query . u`
/// weighs a convex combination of the rows.
pub fn readout(tape: &mut Tape, updated: Var, vars: &KgnVars) -> Result<Var> {
    let logits = tape.matmul(updated, vars.readout_query)?;
    let row = tape.transpose(logits);
    let weights = tape.row_softmax(row);
    tape.matmul(weights, updated)
}

/// Full aggregation on an existing tape. Returns the updated node embeddings
/// `[n x d_out]` and the pooled vector `[1 x d_out]`.
pub fn aggregate_on_tape(tape: &mut Tape, nodes: Var, vars: &KgnVars) -> Result<(Var, Var)> {
    let (heads, tails) = head_tail_project(tape, nodes, vars)?;
    let tails_t = tape.transpose(tails);
    let scores = tape.matmul(heads, tails_t)?;
    let edges = edges_from_scores(tape.value(scores), vars.top_k);
    let updated = knowledge_attention_aggregate(tape, nodes, heads, tails, scores, &edges, vars)?;
    let pooled = readout(tape, updated, vars)?;
    Ok((updated, pooled))
}

/// Value-level aggregation of one node set.
pub fn aggregate(nodes: &NodeSet, params: &KgnParams) -> Result<(Array2<f64>, Array1<f64>)> {
    params.validate()?;
    let mut tape = Tape::new();
    let x = tape.leaf(nodes.features.clone(), false);
    let vars = params.insert(&mut tape, false);
    let (updated, pooled) = aggregate_on_tape(&mut tape, x, &vars)?;
    let pooled_row = tape.value(pooled).row(0).to_owned();
    Ok((tape.value(updated).clone(), pooled_row))
}

/// Edge-attention weights of one aggregation pass, row `u` aligned with the
/// neighbor list of node `u`. Inspection helper for invariant checks.
pub fn attention_weights(nodes: &NodeSet, params: &KgnParams) -> Result<Array2<f64>> {
    params.validate()?;
    let mut tape = Tape::new();
    let x = tape.leaf(nodes.features.clone(), false);
    let vars = params.insert(&mut tape, false);
    let (heads, tails) = head_tail_project(&mut tape, x, &vars)?;
    let tails_t = tape.transpose(tails);
    let scores = tape.matmul(heads, tails_t)?;
    let edges = edges_from_scores(tape.value(scores), vars.top_k);
    let n = nodes.features.nrows();
    let degree = edges.degree();
    let mut pairs = Vec::with_capacity(n * degree);
    for (u, neigh) in edges.neighbors.iter().enumerate() {
        for &v in neigh {
            pairs.push((u, v));
        }
    }
    let logit_rows = tape.gather(scores, &pairs, n, degree)?;
    let alpha = tape.row_softmax(logit_rows);
    Ok(tape.value(alpha).clone())
}
