use std::collections::HashMap;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{InterpWeights, Point};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Linear { x: Var, w: Var, b: Option<Var> },
    Relu(Var),
    Concat(Vec<Var>),
    Gather { x: Var, idx: Vec<usize> },
    RowBlock { x: Var, start: usize },
    Interp { x: Var, stencil: InterpWeights },
    // argmax[o] is the flat input offset that produced output element o
    MaxPool { x: Var, argmax: Vec<usize> },
    // fused edge layer; win[i·O + d] is the winning neighbour slot, or k when
    // the output is clamped to zero
    EdgeMax(Box<EdgeMaxOp>),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Sum(Var),
    // loss = Σ w · ||pred[a] − target[b]||²
    Matched { pred: Var, target: Vec<Point>, terms: Vec<(usize, usize, f64)> },
}

#[derive(Debug)]
struct EdgeMaxOp {
    offsets: Vec<f64>,
    w: Var,
    b: Var,
    center: Option<Var>,
    gathered: Option<(Var, Vec<usize>)>,
    k: usize,
    win: Vec<usize>,
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param => Vec::new(),
            Op::EdgeMax(e) => {
                let mut v = vec![e.w, e.b];
                v.extend(e.center);
                v.extend(e.gathered.as_ref().map(|g| g.0));
                v
            }
            Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Concat(parts) => parts.clone(),
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Relu(x)
            | Op::Gather { x, .. }
            | Op::RowBlock { x, .. }
            | Op::Interp { x, .. }
            | Op::MaxPool { x, .. }
            | Op::Scale(x, _)
            | Op::AddConst(x)
            | Op::Sum(x) => vec![*x],
            Op::Matched { pred, .. } => vec![*pred],
        }
    }
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
}

/// Records a forward computation for a single reverse pass.
///
/// Every discrete choice made during the forward pass (ReLU activation
/// patterns, pooling winners, nearest-neighbour matches) is folded into a
/// signature so finite-difference checks can tell when a perturbation
/// crossed a non-differentiable boundary.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
    signature: u64,
    kinks: usize,
    track: bool,
}

/// Gradients of one scalar with respect to every node on the tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
pub(crate) const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

pub(crate) fn mix(h: u64, x: u64) -> u64 {
    (h ^ x.wrapping_add(1)).wrapping_mul(FNV_PRIME).rotate_left(5)
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    // row-major a is m×k (or k×m when transposed), b is k×n (or n×k)
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the strides above address exactly the m×k, k×n and m×n
    // regions whose lengths were asserted.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that also records discrete decisions into [`Tape::signature`]
    /// and counts kinks. Plain tapes skip that bookkeeping.
    pub fn with_decisions() -> Self {
        Self {
            track: true,
            ..Self::default()
        }
    }

    pub fn tracks_decisions(&self) -> bool {
        self.track
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node { rows, cols, value, op });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// `(rows, cols)` of a recorded value.
    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(vec![n.rows, n.cols], n.value.clone()).expect("node shape is consistent")
    }

    pub fn signature(&self) -> u64 {
        self.signature
    }

    /// Number of exact ties or zero pre-activations seen so far.
    pub fn kinks(&self) -> usize {
        self.kinks
    }

    pub fn note_decision(&mut self, hash: u64, kink: bool) {
        if !self.track {
            return;
        }
        self.signature = mix(self.signature, hash);
        if kink {
            self.kinks += 1;
        }
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!("{rows}×{cols} constant from {} values", data.len())));
        }
        Ok(self.push(rows, cols, data, Op::Leaf))
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.push(rows, cols, vec![0.0; rows * cols], Op::Leaf)
    }

    /// Leaf bound to a named parameter. Repeated lookups share one node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let idx = store.index_of(name).ok_or_else(|| Error::MissingParam(name.to_string()))?;
        if let Some(&v) = self.params.get(&idx) {
            return Ok(v);
        }
        let (_, t) = store.by_index(idx);
        let (rows, cols) = t.rows_cols();
        let v = self.push(rows, cols, t.data().to_vec(), Op::Param);
        self.params.insert(idx, v);
        Ok(v)
    }

    /// `x @ w + b` with `x: [R × I]`, `w: [I × O]`, `b: [1 × O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (r, i) = self.dims(x);
        let (wi, o) = self.dims(w);
        if i != wi {
            return Err(Error::Shape(format!("input width {i} does not match weight rows {wi}")));
        }
        let mut out = vec![0.0; r * o];
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.len() != o {
                return Err(Error::Shape(format!("bias of length {} for width {o}", bias.len())));
            }
            for row in out.chunks_exact_mut(o.max(1)) {
                row.copy_from_slice(bias);
            }
        }
        gemm(r, i, o, self.value(x), false, self.value(w), false, &mut out, 1.0);
        Ok(self.push(r, o, out, Op::Linear { x, w, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        if !self.track {
            let out = self.value(x).iter().map(|&v| v.max(0.0)).collect();
            return self.push(r, c, out, Op::Relu(x));
        }
        let mut sig = FNV_OFFSET;
        let mut kink = false;
        let out: Vec<f64> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if v == 0.0 {
                    kink = true;
                }
                if v > 0.0 {
                    sig = mix(sig, i as u64);
                    v
                } else {
                    0.0
                }
            })
            .collect();
        self.note_decision(sig, kink);
        self.push(r, c, out, Op::Relu(x))
    }

    /// Column-wise concatenation of equally tall blocks.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map(|&p| self.dims(p).0).unwrap_or(0);
        if parts.iter().any(|&p| self.dims(p).0 != rows) {
            return Err(Error::Shape("concat of blocks with different row counts".into()));
        }
        let cols: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let c = self.dims(p).1;
                out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        Ok(self.push(rows, cols, out, Op::Concat(parts.to_vec())))
    }

    /// Rows of `x` picked by `idx` (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let (r, c) = self.dims(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Shape(format!("row {bad} out of range for {r} rows")));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        Ok(self.push(idx.len(), c, out, Op::Gather { x, idx }))
    }

    /// Rows `start..start + len` of `x`.
    pub fn row_block(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start + len > r {
            return Err(Error::Shape(format!("rows {start}..{} out of range for {r} rows", start + len)));
        }
        let out = self.value(x)[start * c..(start + len) * c].to_vec();
        Ok(self.push(len, c, out, Op::RowBlock { x, start }))
    }

    /// Weighted row combination described by an interpolation stencil.
    pub fn interpolate(&mut self, x: Var, stencil: InterpWeights) -> Result<Var> {
        let (r, c) = self.dims(x);
        if let Some(&bad) = stencil.indices.iter().find(|&&i| i >= r) {
            return Err(Error::Shape(format!("stencil row {bad} out of range for {r} rows")));
        }
        let out = stencil.apply(self.value(x), c);
        let rows = stencil.num_dst();
        Ok(self.push(rows, c, out, Op::Interp { x, stencil }))
    }

    /// Element-wise max over consecutive groups of `group` rows.
    /// Ties go to the first row of the group.
    pub fn max_pool_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if group == 0 || r % group != 0 {
            return Err(Error::Shape(format!("{r} rows do not split into groups of {group}")));
        }
        let p = r / group;
        let src = self.value(x);
        let mut out = vec![0.0; p * c];
        let mut argmax = vec![0usize; p * c];
        let mut kink = false;
        for g in 0..p {
            let best = &mut out[g * c..(g + 1) * c];
            let at = &mut argmax[g * c..(g + 1) * c];
            let first = g * group * c;
            best.copy_from_slice(&src[first..first + c]);
            for (d, a) in at.iter_mut().enumerate() {
                *a = first + d;
            }
            for j in 1..group {
                let row = first + j * c;
                for (d, &v) in src[row..row + c].iter().enumerate() {
                    if v > best[d] {
                        best[d] = v;
                        at[d] = row + d;
                    } else if v == best[d] {
                        kink = true;
                    }
                }
            }
        }
        let mut sig = FNV_OFFSET;
        if self.track {
            for &a in &argmax {
                sig = mix(sig, a as u64);
            }
        }
        self.note_decision(sig, kink);
        Ok(self.push(p, c, out, Op::MaxPool { x, argmax }))
    }

    /// Fused edge layer with ReLU and max pooling over `k` neighbours:
    ///
    /// ```text
    /// out[i] = max(0, max_j offsets[i·k+j] @ w + b + center[i] + table[idx[i·k+j]])
    /// ```
    ///
    /// `offsets` is `[P·k × 3]`, `w` is `[3 × O]`, `b` is `[1 × O]`,
    /// `center` is `[P × O]` and `gathered` is an `[M × O]` table with one
    /// row index per edge. Equal to relu followed by
    /// [`Tape::max_pool_groups`] on the materialised edges, ties included.
    pub fn edge_max_relu(
        &mut self,
        offsets: Vec<f64>,
        w: Var,
        b: Var,
        center: Option<Var>,
        gathered: Option<(Var, Vec<usize>)>,
        k: usize,
    ) -> Result<Var> {
        let (wr, o) = self.dims(w);
        if wr != 3 || self.dims(b) != (1, o) || k == 0 || !offsets.len().is_multiple_of(3 * k) {
            return Err(Error::Shape("edge layer expects [3 × O] weights, [1 × O] bias and k ≥ 1".into()));
        }
        let p = offsets.len() / (3 * k);
        if let Some(c) = center {
            if self.dims(c) != (p, o) {
                return Err(Error::Shape(format!("edge centre is {:?}, expected ({p}, {o})", self.dims(c))));
            }
        }
        if let Some((t, idx)) = &gathered {
            let (m, c) = self.dims(*t);
            if c != o || idx.len() != p * k || idx.iter().any(|&i| i >= m) {
                return Err(Error::Shape("edge neighbour table does not match".into()));
            }
        }
        let wv = self.value(w);
        let bv = self.value(b);
        let mut out = vec![0.0; p * o];
        let mut win = vec![k; p * o];
        let mut pre = vec![0.0; o];
        let mut kink = false;
        for i in 0..p {
            let best = &mut out[i * o..(i + 1) * o];
            let at = &mut win[i * o..(i + 1) * o];
            for j in 0..k {
                let e = i * k + j;
                let dx = &offsets[3 * e..3 * e + 3];
                pre.copy_from_slice(bv);
                if let Some(c) = center {
                    for (a, x) in pre.iter_mut().zip(&self.value(c)[i * o..(i + 1) * o]) {
                        *a += x;
                    }
                }
                if let Some((t, idx)) = &gathered {
                    let r = idx[e];
                    for (a, x) in pre.iter_mut().zip(&self.value(*t)[r * o..(r + 1) * o]) {
                        *a += x;
                    }
                }
                for (d, a) in pre.iter_mut().enumerate() {
                    *a += dx[0] * wv[d] + dx[1] * wv[o + d] + dx[2] * wv[2 * o + d];
                }
                for d in 0..o {
                    let v = pre[d];
                    if v > best[d] {
                        best[d] = v;
                        at[d] = j;
                    } else if v == best[d] {
                        kink = true;
                    }
                }
            }
        }
        let mut sig = FNV_OFFSET;
        if self.track {
            for &j in &win {
                sig = mix(sig, j as u64);
            }
        }
        self.note_decision(sig, kink);
        let op = EdgeMaxOp {
            offsets,
            w,
            b,
            center,
            gathered,
            k,
            win,
        };
        Ok(self.push(p, o, out, Op::EdgeMax(Box::new(op))))
    }

    fn same_dims(&self, a: Var, b: Var) -> Result<(usize, usize)> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(Error::Shape(format!("{da:?} vs {db:?}")));
        }
        Ok(da)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_dims(a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(r, c, out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_dims(a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(r, c, out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let (r, c) = self.dims(x);
        let out = self.value(x).iter().map(|v| v * s).collect();
        self.push(r, c, out, Op::Scale(x, s))
    }

    /// `x + c` for a constant of the same size.
    pub fn add_const(&mut self, x: Var, c: &[f64]) -> Result<Var> {
        let (r, cols) = self.dims(x);
        if c.len() != r * cols {
            return Err(Error::Shape(format!("constant of {} values for {r}×{cols}", c.len())));
        }
        let out = self.value(x).iter().zip(c).map(|(a, b)| a + b).collect();
        Ok(self.push(r, cols, out, Op::AddConst(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(1, 1, vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Weighted sum of squared distances between rows of `pred` (`[N × 3]`)
    /// and fixed target points. Matching choices are supplied by the caller
    /// and held fixed during differentiation.
    pub fn matched_sq_dist(&mut self, pred: Var, target: &[Point], terms: Vec<(usize, usize, f64)>) -> Result<Var> {
        let (n, c) = self.dims(pred);
        if c != 3 {
            return Err(Error::Shape(format!("predicted points have width {c}, expected 3")));
        }
        let p = self.value(pred);
        let mut total = 0.0;
        for &(a, b, w) in &terms {
            if a >= n || b >= target.len() {
                return Err(Error::Shape(format!("match ({a}, {b}) out of range")));
            }
            let t = target[b];
            let d = (p[3 * a] - t[0]).powi(2) + (p[3 * a + 1] - t[1]).powi(2) + (p[3 * a + 2] - t[2]).powi(2);
            total += w * d;
        }
        Ok(self.push(
            1,
            1,
            vec![total],
            Op::Matched {
                pred,
                target: target.to_vec(),
                terms,
            },
        ))
    }

    /// Reverse pass from a scalar, returning gradients for every node.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let all = vec![true; loss.0 + 1];
        self.reverse(loss, &all, |_| true)
    }

    /// Which nodes depend on a parameter; only those need gradients when
    /// training.
    fn param_reachable(&self, upto: usize) -> Vec<bool> {
        let mut mask = vec![false; upto + 1];
        for id in 0..=upto {
            mask[id] = match &self.nodes[id].op {
                Op::Leaf => false,
                Op::Param => true,
                op => op.inputs().iter().any(|v| mask[v.0]),
            };
        }
        mask
    }

    /// Reverse pass restricted to nodes with `wanted[id]`; a node's gradient
    /// is retained in the result when `keep(id)`.
    fn reverse(&self, loss: Var, wanted: &[bool], keep: impl Fn(usize) -> bool) -> Result<Gradients> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {} values",
                self.node(loss).value.len()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }
        let want = |v: &Var| wanted[v.0];

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if let [only] = node.op.inputs()[..] {
                if !wanted[only.0] {
                    if keep(id) {
                        grads[id] = Some(g);
                    }
                    continue;
                }
            }
            match &node.op {
                Op::Leaf | Op::Param => {}
                Op::Linear { x, w, b } => {
                    let (r, i) = self.dims(*x);
                    let o = node.cols;
                    if want(x) {
                        let gx = acc(&mut grads, *x, r * i);
                        gemm(r, o, i, &g, false, self.value(*w), true, gx, 1.0);
                    }
                    if want(w) {
                        let gw = acc(&mut grads, *w, i * o);
                        gemm(i, r, o, self.value(*x), true, &g, false, gw, 1.0);
                    }
                    if let Some(b) = b.filter(|b| want(b)) {
                        let gb = acc(&mut grads, b, o);
                        for row in g.chunks_exact(o.max(1)) {
                            for (s, x) in gb.iter_mut().zip(row) {
                                *s += x;
                            }
                        }
                    }
                }
                Op::Relu(x) => {
                    let gx = acc(&mut grads, *x, g.len());
                    for ((s, gi), &y) in gx.iter_mut().zip(&g).zip(&node.value) {
                        if y > 0.0 {
                            *s += gi;
                        }
                    }
                }
                Op::Concat(parts) => {
                    let rows = node.rows;
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.dims(p).1;
                        if !want(&p) {
                            offset += c;
                            continue;
                        }
                        let gp = acc(&mut grads, p, rows * c);
                        for r in 0..rows {
                            let src = &g[r * node.cols + offset..r * node.cols + offset + c];
                            for (s, x) in gp[r * c..(r + 1) * c].iter_mut().zip(src) {
                                *s += x;
                            }
                        }
                        offset += c;
                    }
                }
                Op::Gather { x, idx } => {
                    let (r, c) = self.dims(*x);
                    let gx = acc(&mut grads, *x, r * c);
                    for (row, &i) in idx.iter().enumerate() {
                        for d in 0..c {
                            gx[i * c + d] += g[row * c + d];
                        }
                    }
                }
                Op::EdgeMax(e) => {
                    let o = node.cols;
                    let p = node.rows;
                    let k = e.k;
                    if want(&e.w) {
                        let gw = acc(&mut grads, e.w, 3 * o);
                        for i in 0..p {
                            for d in 0..o {
                                let j = e.win[i * o + d];
                                if j < k {
                                    let dx = &e.offsets[3 * (i * k + j)..3 * (i * k + j) + 3];
                                    let gv = g[i * o + d];
                                    gw[d] += dx[0] * gv;
                                    gw[o + d] += dx[1] * gv;
                                    gw[2 * o + d] += dx[2] * gv;
                                }
                            }
                        }
                    }
                    if want(&e.b) {
                        let gb = acc(&mut grads, e.b, o);
                        for (n, &j) in e.win.iter().enumerate() {
                            if j < k {
                                gb[n % o] += g[n];
                            }
                        }
                    }
                    if let Some(c) = e.center.filter(|c| want(c)) {
                        let gc = acc(&mut grads, c, p * o);
                        for (n, &j) in e.win.iter().enumerate() {
                            if j < k {
                                gc[n] += g[n];
                            }
                        }
                    }
                    if let Some((t, idx)) = e.gathered.as_ref().filter(|(t, _)| want(t)) {
                        let len = self.value(*t).len();
                        let gt = acc(&mut grads, *t, len);
                        for (n, &j) in e.win.iter().enumerate() {
                            if j < k {
                                let r = idx[(n / o) * k + j];
                                gt[r * o + n % o] += g[n];
                            }
                        }
                    }
                }
                Op::RowBlock { x, start } => {
                    let (r, c) = self.dims(*x);
                    let gx = acc(&mut grads, *x, r * c);
                    for (s, v) in gx[start * c..start * c + g.len()].iter_mut().zip(&g) {
                        *s += v;
                    }
                }
                Op::Interp { x, stencil } => {
                    let (r, c) = self.dims(*x);
                    let gx = acc(&mut grads, *x, r * c);
                    for q in 0..stencil.num_dst() {
                        for s in 0..stencil.k {
                            let j = stencil.indices[q * stencil.k + s];
                            let w = stencil.weights[q * stencil.k + s];
                            if w == 0.0 {
                                continue;
                            }
                            for d in 0..c {
                                gx[j * c + d] += w * g[q * c + d];
                            }
                        }
                    }
                }
                Op::MaxPool { x, argmax } => {
                    let len = self.value(*x).len();
                    let gx = acc(&mut grads, *x, len);
                    for (o, &at) in argmax.iter().enumerate() {
                        gx[at] += g[o];
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b].into_iter().filter(|v| want(v)) {
                        let gv = acc(&mut grads, v, g.len());
                        for (s, x) in gv.iter_mut().zip(&g) {
                            *s += x;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga: Vec<f64> = g.iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
                    let gb: Vec<f64> = g.iter().zip(self.value(a)).map(|(x, y)| x * y).collect();
                    if want(&a) {
                        for (s, x) in acc(&mut grads, a, g.len()).iter_mut().zip(&ga) {
                            *s += x;
                        }
                    }
                    if want(&b) {
                        for (s, x) in acc(&mut grads, b, g.len()).iter_mut().zip(&gb) {
                            *s += x;
                        }
                    }
                }
                Op::Scale(x, s) => {
                    let gx = acc(&mut grads, *x, g.len());
                    for (a, b) in gx.iter_mut().zip(&g) {
                        *a += s * b;
                    }
                }
                Op::AddConst(x) => {
                    let gx = acc(&mut grads, *x, g.len());
                    for (a, b) in gx.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                Op::Sum(x) => {
                    let len = self.value(*x).len();
                    let gx = acc(&mut grads, *x, len);
                    for a in gx.iter_mut() {
                        *a += g[0];
                    }
                }
                Op::Matched { pred, target, terms } => {
                    let p = self.value(*pred).to_vec();
                    let gp = acc(&mut grads, *pred, p.len());
                    for &(a, b, w) in terms {
                        for d in 0..3 {
                            gp[3 * a + d] += g[0] * 2.0 * w * (p[3 * a + d] - target[b][d]);
                        }
                    }
                }
            }
            if keep(id) {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    /// Reverse pass that adds parameter gradients into `store`.
    /// Parameters the loss does not reach receive an explicit zero gradient.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let wanted = self.param_reachable(loss.0);
        let grads = self.reverse(loss, &wanted, |id| matches!(self.nodes[id].op, Op::Param))?;
        for i in 0..store.len() {
            let t = store.by_index_mut(i);
            let g = self
                .params
                .get(&i)
                .and_then(|v| grads.get(*v).map(<[f64]>::to_vec))
                .unwrap_or_else(|| vec![0.0; t.len()]);
            t.accumulate_grad(&g);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, shape: Vec<usize>, data: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(name, Tensor::new(shape, data).unwrap());
        s
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut store = store_with("w", vec![3], vec![1.0, -2.0, 0.5]);
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let loss = tape.sum(w);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get("w").unwrap().grad().unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient() {
        let mut store = store_with("w", vec![2], vec![1.0, 2.0]);
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get("w").unwrap().grad().unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_accumulates_and_unreached_get_zero() {
        let mut store = store_with("w", vec![2], vec![1.0, 2.0]);
        store.insert("unused", Tensor::new(vec![2], vec![5.0, 5.0]).unwrap());
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let loss = tape.sum(w);
        tape.backward(loss, &mut store).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get("w").unwrap().grad().unwrap(), &[2.0, 2.0]);
        assert_eq!(store.get("unused").unwrap().grad().unwrap(), &[0.0, 0.0]);
        store.zero_grad();
        assert!(store.get("w").unwrap().grad().is_none());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut store = store_with("w", vec![2], vec![1.0, 2.0]);
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        assert!(matches!(tape.backward(w, &mut store), Err(Error::Shape(_))));
    }

    #[test]
    fn linear_matches_loop() {
        let mut tape = Tape::new();
        let x = tape.constant(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 4.0]).unwrap();
        let w = tape.constant(3, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let b = tape.constant(1, 2, vec![1.0, -1.0]).unwrap();
        let y = tape.linear(x, w, Some(b)).unwrap();
        let xv = tape.value(x).to_vec();
        let wv = tape.value(w).to_vec();
        for r in 0..2 {
            for o in 0..2 {
                let mut s = [1.0, -1.0][o];
                for i in 0..3 {
                    s += xv[r * 3 + i] * wv[i * 2 + o];
                }
                assert!((tape.value(y)[r * 2 + o] - s).abs() < 1e-14);
            }
        }
        assert!(tape.linear(w, w, None).is_err());
    }

    #[test]
    fn concat_and_gather_route_gradients() {
        let mut store = store_with("a", vec![2, 1], vec![1.0, 2.0]);
        store.insert("b", Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let mut tape = Tape::new();
        let a = tape.param(&store, "a").unwrap();
        let b = tape.param(&store, "b").unwrap();
        let c = tape.concat(&[a, b]).unwrap();
        assert_eq!(tape.value(c), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let g = tape.gather_rows(c, vec![1, 1, 0]).unwrap();
        let loss = tape.sum(g);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get("a").unwrap().grad().unwrap(), &[1.0, 2.0]);
        assert_eq!(store.get("b").unwrap().grad().unwrap(), &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn fused_edge_layer_matches_materialised_edges() {
        let (p, k, o, m) = (5, 3, 4, 6);
        let mut seed = 7u64;
        let mut next = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        let offsets: Vec<f64> = (0..p * k * 3).map(|_| next()).collect();
        let w: Vec<f64> = (0..3 * o).map(|_| next()).collect();
        let b: Vec<f64> = (0..o).map(|_| next()).collect();
        let center: Vec<f64> = (0..p * o).map(|_| next()).collect();
        let table: Vec<f64> = (0..m * o).map(|_| next()).collect();
        let idx: Vec<usize> = (0..p * k).map(|e| (e * 5 + 1) % m).collect();
        let self_idx: Vec<usize> = (0..p * k).map(|e| e / k).collect();

        let mut t1 = Tape::new();
        let (wv, bv, cv, tv) = (
            t1.constant(3, o, w.clone()).unwrap(),
            t1.constant(1, o, b.clone()).unwrap(),
            t1.constant(p, o, center.clone()).unwrap(),
            t1.constant(m, o, table.clone()).unwrap(),
        );
        let fused = t1.edge_max_relu(offsets.clone(), wv, bv, Some(cv), Some((tv, idx.clone())), k).unwrap();
        let s1 = t1.sum(fused);
        let g1 = t1.gradients(s1).unwrap();

        let mut t2 = Tape::new();
        let (wv2, bv2, cv2, tv2) = (
            t2.constant(3, o, w).unwrap(),
            t2.constant(1, o, b).unwrap(),
            t2.constant(p, o, center).unwrap(),
            t2.constant(m, o, table).unwrap(),
        );
        let dx = t2.constant(p * k, 3, offsets).unwrap();
        let lin = t2.linear(dx, wv2, Some(bv2)).unwrap();
        let c = t2.gather_rows(cv2, self_idx).unwrap();
        let n = t2.gather_rows(tv2, idx).unwrap();
        let pre = t2.add(lin, c).unwrap();
        let pre = t2.add(pre, n).unwrap();
        let act = t2.relu(pre);
        let pooled = t2.max_pool_groups(act, k).unwrap();
        let s2 = t2.sum(pooled);
        let g2 = t2.gradients(s2).unwrap();

        for (a, b) in t1.value(fused).iter().zip(t2.value(pooled)) {
            assert!((a - b).abs() < 1e-15);
        }
        for (v1, v2) in [(wv, wv2), (bv, bv2), (cv, cv2), (tv, tv2)] {
            for (a, b) in g1.get(v1).unwrap().iter().zip(g2.get(v2).unwrap()) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn relu_signature_tracks_pattern_and_kinks() {
        let mut t1 = Tape::with_decisions();
        let x = t1.constant(1, 3, vec![1.0, -1.0, 2.0]).unwrap();
        t1.relu(x);
        let mut t2 = Tape::with_decisions();
        let x = t2.constant(1, 3, vec![1.0, 1.0, 2.0]).unwrap();
        t2.relu(x);
        assert_ne!(t1.signature(), t2.signature());
        assert_eq!(t1.kinks(), 0);
        let mut t3 = Tape::with_decisions();
        let x = t3.constant(1, 2, vec![0.0, 1.0]).unwrap();
        t3.relu(x);
        assert_eq!(t3.kinks(), 1);
        let mut t4 = Tape::new();
        let x = t4.constant(1, 2, vec![0.0, 1.0]).unwrap();
        t4.relu(x);
        assert_eq!((t4.signature(), t4.kinks()), (0, 0));
    }
}
