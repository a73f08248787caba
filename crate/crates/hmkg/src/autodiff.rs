//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles in
//! topological order. Calling [`Tape::backward`] on a scalar output walks the
//! record in reverse and accumulates gradients into every node that was
//! created with `requires_grad`. The op set is exactly what the model needs:
//! dense linear algebra, a few pointwise nonlinearities, row softmax, and the
//! gather/segment ops used by sparse graph attention.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    /// Broadcast-add a `1 x d` row vector to every row.
    AddRowVec(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Scale row `i` by the scalar in row `i` of an `n x 1` column.
    MulColVec(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    Tanh(Var),
    Sigmoid(Var),
    Ln(Var),
    Clamp(Var, f64, f64),
    RowSoftmax(Var),
    Transpose(Var),
    MeanRows(Var),
    SumAll(Var),
    SliceCols(Var, usize, usize),
    SelectRows(Var, Vec<usize>),
    /// Pick individual entries; output is filled row-major from the pairs.
    Gather(Var, Vec<(usize, usize)>),
    Reshape(Var),
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    /// Sum consecutive blocks of `group_size` rows down to one row each.
    SumRowGroups(Var, usize),
}

struct Node {
    value: Array2<f64>,
    grad: Option<Array2<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Growable record of a single forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Insert a constant or parameter matrix.
    pub fn leaf(&mut self, value: Array2<f64>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated by the last [`Tape::backward`] call, if any.
    pub fn grad(&self, v: Var) -> Option<&Array2<f64>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let s = self.nodes[v.0].value.dim();
        (s.0, s.1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(Error::Shape(format!(
                "matmul: {ar}x{ac} incompatible with {br}x{bc}"
            )));
        }
        let value = self.value(a).dot(self.value(b));
        let rg = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            let (ar, ac) = self.shape(a);
            let (br, bc) = self.shape(b);
            return Err(Error::Shape(format!(
                "{what}: {ar}x{ac} vs {br}x{bc}"
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.value(a) + self.value(b);
        let rg = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn add_row_vec(&mut self, a: Var, v: Var) -> Result<Var> {
        let (_, ac) = self.shape(a);
        let (vr, vc) = self.shape(v);
        if vr != 1 || vc != ac {
            return Err(Error::Shape(format!(
                "add_row_vec: row vector must be 1x{ac}, got {vr}x{vc}"
            )));
        }
        let value = self.value(a) + self.value(v);
        let rg = self.needs_grad(a) || self.needs_grad(v);
        Ok(self.push(value, Op::AddRowVec(a, v), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.value(a) - self.value(b);
        let rg = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.value(a) * self.value(b);
        let rg = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn mul_col_vec(&mut self, a: Var, v: Var) -> Result<Var> {
        let (ar, _) = self.shape(a);
        let (vr, vc) = self.shape(v);
        if vc != 1 || vr != ar {
            return Err(Error::Shape(format!(
                "mul_col_vec: column vector must be {ar}x1, got {vr}x{vc}"
            )));
        }
        let mut value = self.value(a).clone();
        for (i, mut row) in value.axis_iter_mut(Axis(0)).enumerate() {
            let s = self.nodes[v.0].value[[i, 0]];
            row.mapv_inplace(|x| x * s);
        }
        let rg = self.needs_grad(a) || self.needs_grad(v);
        Ok(self.push(value, Op::MulColVec(a, v), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let rg = self.needs_grad(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| 1.0 - x);
        let rg = self.needs_grad(a);
        self.push(value, Op::OneMinus(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let rg = self.needs_grad(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(stable_sigmoid);
        let rg = self.needs_grad(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if self.value(a).iter().any(|&x| x <= 0.0) {
            return Err(Error::Domain(
                "ln: input must be strictly positive".to_string(),
            ));
        }
        let value = self.value(a).mapv(f64::ln);
        let rg = self.needs_grad(a);
        Ok(self.push(value, Op::Ln(a), rg))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo < hi) {
            return Err(Error::Domain(format!("clamp: bounds [{lo}, {hi}] empty")));
        }
        let value = self.value(a).mapv(|x| x.clamp(lo, hi));
        let rg = self.needs_grad(a);
        Ok(self.push(value, Op::Clamp(a, lo, hi), rg))
    }

    /// Numerically stable softmax applied independently to every row.
    pub fn row_softmax(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.axis_iter_mut(Axis(0)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - max).exp());
            let sum: f64 = row.iter().sum();
            row.mapv_inplace(|x| x / sum);
        }
        let rg = self.needs_grad(a);
        self.push(value, Op::RowSoftmax(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let rg = self.needs_grad(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (ar, _) = self.shape(a);
        if ar == 0 {
            return Err(Error::Domain("mean_rows: empty input".to_string()));
        }
        let value = self
            .value(a)
            .mean_axis(Axis(0))
            .expect("non-empty rows")
            .insert_axis(Axis(0));
        let rg = self.needs_grad(a);
        Ok(self.push(value, Op::MeanRows(a), rg))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.needs_grad(a);
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(a), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (_, ac) = self.shape(a);
        if start >= end || end > ac {
            return Err(Error::Shape(format!(
                "slice_cols: range {start}..{end} invalid for {ac} columns"
            )));
        }
        let value = self
            .value(a)
            .slice(ndarray::s![.., start..end])
            .to_owned();
        let rg = self.needs_grad(a);
        Ok(self.push(value, Op::SliceCols(a, start, end), rg))
    }

    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        if indices.is_empty() {
            return Err(Error::Domain("select_rows: empty index set".to_string()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= ar) {
            return Err(Error::Shape(format!(
                "select_rows: index {bad} out of bounds for {ar} rows"
            )));
        }
        let mut value = Array2::zeros((indices.len(), ac));
        for (i, &src) in indices.iter().enumerate() {
            value
                .row_mut(i)
                .assign(&self.nodes[a.0].value.row(src));
        }
        let rg = self.needs_grad(a);
        Ok(self.push(value, Op::SelectRows(a, indices.to_vec()), rg))
    }

    /// Gather entries `a[r, c]` into a `rows x cols` matrix, row-major.
    pub fn gather(&mut self, a: Var, pairs: &[(usize, usize)], rows: usize, cols: usize) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        if pairs.len() != rows * cols {
            return Err(Error::Shape(format!(
                "gather: {} pairs cannot fill {rows}x{cols}",
                pairs.len()
            )));
        }
        if let Some(&(r, c)) = pairs.iter().find(|&&(r, c)| r >= ar || c >= ac) {
            return Err(Error::Shape(format!(
                "gather: entry ({r}, {c}) out of bounds for {ar}x{ac}"
            )));
        }
        let mut value = Array2::zeros((rows, cols));
        for (flat, &(r, c)) in pairs.iter().enumerate() {
            value[[flat / cols, flat % cols]] = self.nodes[a.0].value[[r, c]];
        }
        let rg = self.needs_grad(a);
        Ok(self.push(value, Op::Gather(a, pairs.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        if ar * ac != rows * cols {
            return Err(Error::Shape(format!(
                "reshape: {ar}x{ac} has {} entries, target {rows}x{cols} has {}",
                ar * ac,
                rows * cols
            )));
        }
        let value = Array2::from_shape_vec(
            (rows, cols),
            self.value(a).iter().cloned().collect(),
        )
        .expect("element count checked");
        let rg = self.needs_grad(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, _) = self.shape(a);
        let (br, _) = self.shape(b);
        if ar != br {
            return Err(Error::Shape(format!(
                "concat_cols: row counts differ ({ar} vs {br})"
            )));
        }
        let value = ndarray::concatenate(
            Axis(1),
            &[self.value(a).view(), self.value(b).view()],
        )
        .expect("row counts checked");
        let rg = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(value, Op::ConcatCols(a, b), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Domain("concat_rows: no inputs".to_string()));
        }
        let cols = self.shape(parts[0]).1;
        for &p in parts {
            if self.shape(p).1 != cols {
                return Err(Error::Shape(format!(
                    "concat_rows: column counts differ ({} vs {})",
                    cols,
                    self.shape(p).1
                )));
            }
        }
        let views: Vec<_> = parts.iter().map(|&p| self.nodes[p.0].value.view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("column counts checked");
        let rg = parts.iter().any(|&p| self.needs_grad(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn sum_row_groups(&mut self, a: Var, group_size: usize) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        if group_size == 0 || ar % group_size != 0 {
            return Err(Error::Shape(format!(
                "sum_row_groups: {ar} rows not divisible into groups of {group_size}"
            )));
        }
        let groups = ar / group_size;
        let mut value = Array2::zeros((groups, ac));
        for g in 0..groups {
            for j in 0..group_size {
                let src = self.nodes[a.0].value.row(g * group_size + j);
                let mut dst = value.row_mut(g);
                dst += &src;
            }
        }
        let rg = self.needs_grad(a);
        Ok(self.push(value, Op::SumRowGroups(a, group_size), rg))
    }

    /// Backpropagate from a `1 x 1` scalar node, accumulating gradients into
    /// every reachable node that requires them.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.shape(root) != (1, 1) {
            let (r, c) = self.shape(root);
            return Err(Error::Shape(format!(
                "backward: root must be 1x1, got {r}x{c}"
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[root.0].grad = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let grad = match self.nodes[i].grad.take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if self.needs_grad(a) {
                        let delta = grad.dot(&self.nodes[b.0].value.t());
                        self.accumulate(a, delta);
                    }
                    if self.needs_grad(b) {
                        let delta = self.nodes[a.0].value.t().dot(&grad);
                        self.accumulate(b, delta);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs_grad(a) {
                        self.accumulate(a, grad.clone());
                    }
                    if self.needs_grad(b) {
                        self.accumulate(b, grad.clone());
                    }
                }
                Op::AddRowVec(a, v) => {
                    if self.needs_grad(a) {
                        self.accumulate(a, grad.clone());
                    }
                    if self.needs_grad(v) {
                        let delta = grad.sum_axis(Axis(0)).insert_axis(Axis(0));
                        self.accumulate(v, delta);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs_grad(a) {
                        self.accumulate(a, grad.clone());
                    }
                    if self.needs_grad(b) {
                        self.accumulate(b, -&grad);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs_grad(a) {
                        let delta = &grad * &self.nodes[b.0].value;
                        self.accumulate(a, delta);
                    }
                    if self.needs_grad(b) {
                        let delta = &grad * &self.nodes[a.0].value;
                        self.accumulate(b, delta);
                    }
                }
                Op::MulColVec(a, v) => {
                    if self.needs_grad(a) {
                        let mut delta = grad.clone();
                        for (r, mut row) in delta.axis_iter_mut(Axis(0)).enumerate() {
                            let s = self.nodes[v.0].value[[r, 0]];
                            row.mapv_inplace(|x| x * s);
                        }
                        self.accumulate(a, delta);
                    }
                    if self.needs_grad(v) {
                        let rows = grad.nrows();
                        let mut delta = Array2::zeros((rows, 1));
                        for r in 0..rows {
                            let mut s = 0.0;
                            for c in 0..grad.ncols() {
                                s += grad[[r, c]] * self.nodes[a.0].value[[r, c]];
                            }
                            delta[[r, 0]] = s;
                        }
                        self.accumulate(v, delta);
                    }
                }
                Op::Scale(a, c) => {
                    if self.needs_grad(a) {
                        self.accumulate(a, &grad * c);
                    }
                }
                Op::OneMinus(a) => {
                    if self.needs_grad(a) {
                        self.accumulate(a, -&grad);
                    }
                }
                Op::Tanh(a) => {
                    if self.needs_grad(a) {
                        let y = &self.nodes[i].value;
                        let delta = &grad * &y.mapv(|t| 1.0 - t * t);
                        self.accumulate(a, delta);
                    }
                }
                Op::Sigmoid(a) => {
                    if self.needs_grad(a) {
                        let y = &self.nodes[i].value;
                        let delta = &grad * &y.mapv(|s| s * (1.0 - s));
                        self.accumulate(a, delta);
                    }
                }
                Op::Ln(a) => {
                    if self.needs_grad(a) {
                        let delta = &grad / &self.nodes[a.0].value;
                        self.accumulate(a, delta);
                    }
                }
                Op::Clamp(a, lo, hi) => {
                    if self.needs_grad(a) {
                        let mut delta = grad.clone();
                        ndarray::Zip::from(&mut delta)
                            .and(&self.nodes[a.0].value)
                            .for_each(|d, &x| {
                                if x < lo || x > hi {
                                    *d = 0.0;
                                }
                            });
                        self.accumulate(a, delta);
                    }
                }
                Op::RowSoftmax(a) => {
                    if self.needs_grad(a) {
                        let y = self.nodes[i].value.clone();
                        let mut delta = Array2::zeros(grad.dim());
                        for r in 0..grad.nrows() {
                            let mut dot = 0.0;
                            for c in 0..grad.ncols() {
                                dot += grad[[r, c]] * y[[r, c]];
                            }
                            for c in 0..grad.ncols() {
                                delta[[r, c]] = y[[r, c]] * (grad[[r, c]] - dot);
                            }
                        }
                        self.accumulate(a, delta);
                    }
                }
                Op::Transpose(a) => {
                    if self.needs_grad(a) {
                        self.accumulate(a, grad.t().to_owned());
                    }
                }
                Op::MeanRows(a) => {
                    if self.needs_grad(a) {
                        let (ar, ac) = self.shape(a);
                        let mut delta = Array2::zeros((ar, ac));
                        let scaled = &grad / ar as f64;
                        for mut row in delta.axis_iter_mut(Axis(0)) {
                            row.assign(&scaled.row(0));
                        }
                        self.accumulate(a, delta);
                    }
                }
                Op::SumAll(a) => {
                    if self.needs_grad(a) {
                        let (ar, ac) = self.shape(a);
                        let delta = Array2::from_elem((ar, ac), grad[[0, 0]]);
                        self.accumulate(a, delta);
                    }
                }
                Op::SliceCols(a, start, _end) => {
                    if self.needs_grad(a) {
                        let (ar, ac) = self.shape(a);
                        let mut delta = Array2::zeros((ar, ac));
                        delta
                            .slice_mut(ndarray::s![.., start..start + grad.ncols()])
                            .assign(&grad);
                        self.accumulate(a, delta);
                    }
                }
                Op::SelectRows(a, indices) => {
                    if self.needs_grad(a) {
                        let (ar, ac) = self.shape(a);
                        let mut delta = Array2::zeros((ar, ac));
                        for (i, &src) in indices.iter().enumerate() {
                            let mut dst = delta.row_mut(src);
                            dst += &grad.row(i);
                        }
                        self.accumulate(a, delta);
                    }
                }
                Op::Gather(a, pairs) => {
                    if self.needs_grad(a) {
                        let (ar, ac) = self.shape(a);
                        let cols = grad.ncols();
                        let mut delta = Array2::zeros((ar, ac));
                        for (flat, &(r, c)) in pairs.iter().enumerate() {
                            delta[[r, c]] += grad[[flat / cols, flat % cols]];
                        }
                        self.accumulate(a, delta);
                    }
                }
                Op::Reshape(a) => {
                    if self.needs_grad(a) {
                        let (ar, ac) = self.shape(a);
                        let delta = Array2::from_shape_vec(
                            (ar, ac),
                            grad.iter().cloned().collect(),
                        )
                        .expect("same element count");
                        self.accumulate(a, delta);
                    }
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.shape(a).1;
                    if self.needs_grad(a) {
                        let delta = grad.slice(ndarray::s![.., ..ca]).to_owned();
                        self.accumulate(a, delta);
                    }
                    if self.needs_grad(b) {
                        let delta = grad.slice(ndarray::s![.., ca..]).to_owned();
                        self.accumulate(b, delta);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in &parts {
                        let rows = self.shape(p).0;
                        if self.needs_grad(p) {
                            let delta = grad.slice(ndarray::s![offset..offset + rows, ..]).to_owned();
                            self.accumulate(p, delta);
                        }
                        offset += rows;
                    }
                }
                Op::SumRowGroups(a, group_size) => {
                    if self.needs_grad(a) {
                        let (ar, ac) = self.shape(a);
                        let mut delta = Array2::zeros((ar, ac));
                        for g in 0..grad.nrows() {
                            for j in 0..group_size {
                                let mut dst = delta.row_mut(g * group_size + j);
                                dst += &grad.row(g);
                            }
                        }
                        self.accumulate(a, delta);
                    }
                }
            }
            // Leaves keep their gradient for the caller; interior nodes have
            // now pushed theirs upstream and can drop it.
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].grad = Some(grad);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: Array2<f64>) {
        match &mut self.nodes[v.0].grad {
            Some(g) => *g += &delta,
            slot => *slot = Some(delta),
        }
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    const FD_H: f64 = 1e-5;
    const FD_TOL: f64 = 1e-6;

    /// Central-difference check of `d f / d input` for a scalar-valued
    /// function built on a fresh tape each call.
    fn check_grad<F>(inputs: &[Array2<f64>], build: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|x| tape.leaf(x.clone(), true))
            .collect();
        let out = build(&mut tape, &vars);
        assert_eq!(tape.shape(out), (1, 1));
        tape.backward(out).unwrap();
        let analytic: Vec<Array2<f64>> = vars
            .iter()
            .map(|&v| tape.grad(v).cloned().unwrap_or_else(|| Array2::zeros(tape.shape(v))))
            .collect();

        for (pi, base) in inputs.iter().enumerate() {
            for idx in 0..base.len() {
                let (r, c) = (idx / base.ncols(), idx % base.ncols());
                let eval = |delta: f64| {
                    let mut tape = Tape::new();
                    let vars: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, x)| {
                            let mut x = x.clone();
                            if j == pi {
                                x[[r, c]] += delta;
                            }
                            tape.leaf(x, false)
                        })
                        .collect();
                    let out = build(&mut tape, &vars);
                    tape.value(out)[[0, 0]]
                };
                let numeric = (eval(FD_H) - eval(-FD_H)) / (2.0 * FD_H);
                let a = analytic[pi][[r, c]];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
                assert!(
                    rel < FD_TOL,
                    "input {pi} entry ({r},{c}): analytic {a}, numeric {numeric}, rel {rel}"
                );
            }
        }
    }

    #[test]
    fn matmul_values() {
        let mut tape = Tape::new();
        let a = tape.leaf(array![[1.0, 2.0], [3.0, 4.0]], false);
        let b = tape.leaf(array![[5.0, 6.0], [7.0, 8.0]], false);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &array![[19.0, 22.0], [43.0, 50.0]]);
    }

    #[test]
    fn matmul_shape_mismatch_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf(Array2::zeros((2, 3)), false);
        let b = tape.leaf(Array2::zeros((2, 3)), false);
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn row_softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let a = tape.leaf(array![[1.0, 2.0, 3.0], [500.0, 500.0, 500.0]], false);
        let s = tape.row_softmax(a);
        for row in tape.value(s).axis_iter(Axis(0)) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        // Equal logits give exactly uniform weights, even at large magnitude.
        assert_eq!(tape.value(s)[[1, 0]], 1.0 / 3.0);
    }

    #[test]
    fn sigmoid_matches_closed_form() {
        let mut tape = Tape::new();
        let a = tape.leaf(array![[0.0, 2.0, -700.0, 700.0]], false);
        let s = tape.sigmoid(a);
        assert_eq!(tape.value(s)[[0, 0]], 0.5);
        assert!((tape.value(s)[[0, 1]] - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-15);
        assert!(tape.value(s)[[0, 2]] >= 0.0);
        assert!(tape.value(s)[[0, 3]] <= 1.0);
    }

    #[test]
    fn grad_matmul_chain() {
        check_grad(
            &[
                array![[0.3, -1.2], [0.7, 0.4], [0.1, 0.9]],
                array![[0.5, 0.2, -0.4], [1.1, -0.3, 0.8]],
            ],
            |tape, v| {
                let m = tape.matmul(v[0], v[1]).unwrap();
                let t = tape.tanh(m);
                tape.sum_all(t)
            },
        );
    }

    #[test]
    fn grad_elementwise_ops() {
        check_grad(
            &[
                array![[0.4, -0.6], [1.2, 0.3]],
                array![[0.9, 0.1], [-0.5, 0.7]],
            ],
            |tape, v| {
                let p = tape.mul(v[0], v[1]).unwrap();
                let q = tape.add(p, v[0]).unwrap();
                let r = tape.sub(q, v[1]).unwrap();
                let s = tape.sigmoid(r);
                let o = tape.one_minus(s);
                tape.sum_all(o)
            },
        );
    }

    #[test]
    fn grad_row_softmax() {
        check_grad(&[array![[0.2, -0.7, 1.3], [0.5, 0.5, -0.1]]], |tape, v| {
            let s = tape.row_softmax(v[0]);
            let w = tape.leaf(array![[0.3, -1.0, 0.6], [0.8, 0.2, -0.4]], false);
            let p = tape.mul(s, w).unwrap();
            tape.sum_all(p)
        });
    }

    #[test]
    fn grad_ln_clamp() {
        check_grad(&[array![[0.3, 0.9], [0.5, 0.2]]], |tape, v| {
            let c = tape.clamp(v[0], 1e-7, 1.0 - 1e-7).unwrap();
            let l = tape.ln(c).unwrap();
            tape.sum_all(l)
        });
    }

    #[test]
    fn grad_gather_select_groups() {
        check_grad(&[array![[0.2, 0.5], [0.8, -0.3], [0.1, 0.6], [0.9, 0.4]]], |tape, v| {
            let sel = tape.select_rows(v[0], &[3, 0, 0, 2]).unwrap();
            let g = tape
                .gather(v[0], &[(0, 1), (2, 0), (1, 1), (3, 0)], 4, 1)
                .unwrap();
            let scaled = tape.mul_col_vec(sel, g).unwrap();
            let grouped = tape.sum_row_groups(scaled, 2).unwrap();
            let t = tape.tanh(grouped);
            tape.sum_all(t)
        });
    }

    #[test]
    fn grad_concat_slice_reshape() {
        check_grad(
            &[array![[0.4, -0.2]], array![[0.7, 0.3]]],
            |tape, v| {
                let cc = tape.concat_cols(v[0], v[1]).unwrap();
                let cr = tape.concat_rows(&[v[0], v[1]]).unwrap();
                let s = tape.slice_cols(cc, 1, 3).unwrap();
                let r = tape.reshape(cr, 1, 4).unwrap();
                let s4 = tape.slice_cols(r, 0, 2).unwrap();
                let p = tape.mul(s, s4).unwrap();
                tape.sum_all(p)
            },
        );
    }

    #[test]
    fn grad_mean_rows_transpose_scale() {
        check_grad(&[array![[0.3, 0.8], [-0.4, 0.2], [0.9, -0.6], [0.1, 0.5]]], |tape, v| {
            let m = tape.mean_rows(v[0]).unwrap();
            let t = tape.transpose(v[0]);
            let p = tape.matmul(m, t).unwrap();
            let sc = tape.scale(p, 0.25);
            let sm = tape.row_softmax(sc);
            let q = tape.matmul(sm, v[0]).unwrap();
            let th = tape.tanh(q);
            tape.sum_all(th)
        });
    }

    #[test]
    fn grad_add_row_vec_bias() {
        check_grad(
            &[
                array![[0.2, -0.5, 0.7], [0.9, 0.1, -0.3]],
                array![[0.4, 0.6, -0.8]],
            ],
            |tape, v| {
                let b = tape.add_row_vec(v[0], v[1]).unwrap();
                let s = tape.sigmoid(b);
                tape.sum_all(s)
            },
        );
    }

    #[test]
    fn grad_skipped_for_data_leaves() {
        let mut tape = Tape::new();
        let x = tape.leaf(array![[1.0, 2.0]], false);
        let w = tape.leaf(array![[0.5], [0.25]], true);
        let y = tape.matmul(x, w).unwrap();
        tape.backward(y).unwrap();
        assert!(tape.grad(x).is_none());
        assert!(tape.grad(w).is_some());
    }

    #[test]
    fn grad_accumulates_across_reuse() {
        let mut tape = Tape::new();
        let w = tape.leaf(array![[2.0]], true);
        let a = tape.mul(w, w).unwrap();
        let b = tape.add(a, w).unwrap();
        tape.backward(b).unwrap();
        // d(w^2 + w)/dw = 2w + 1 = 5 at w = 2.
        assert_eq!(tape.grad(w).unwrap()[[0, 0]], 5.0);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let a = tape.leaf(Array2::zeros((2, 2)), true);
        assert!(matches!(tape.backward(a), Err(Error::Shape(_))));
    }

    #[test]
    fn ln_rejects_nonpositive() {
        let mut tape = Tape::new();
        let a = tape.leaf(array![[0.5, 0.0]], false);
        assert!(matches!(tape.ln(a), Err(Error::Domain(_))));
    }
}
