//! Reverse-mode autodiff over a write-once tape.
//!
//! Operations append nodes holding the forward value plus whatever the
//! backward formula needs. Node ids are handed out in recording order, so the
//! node list is already a topological order and `backward` is a single
//! reverse sweep. One backward pass per recording; the tape then refuses
//! further sweeps.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{kernels, MaskPlane, Tensor};

pub type NodeId = usize;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

enum Op<T: Scalar> {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    /// y = a · bᵀ with b stored untransposed; attention scores and the tied
    /// output head both want this orientation.
    MatmulTransposeB { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    AddBias { x: NodeId, bias: NodeId },
    Scale { x: NodeId, c: T },
    Sum { x: NodeId },
    Reshape { x: NodeId },
    GatherRows { table: NodeId, ids: Arc<Vec<u32>> },
    SplitHeads { x: NodeId, n_heads: usize },
    MergeHeads { x: NodeId, n_heads: usize },
    SoftmaxMasked { x: NodeId, mask: Arc<MaskPlane> },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, mean: Vec<T>, inv_std: Vec<T> },
    Gelu { x: NodeId },
    Dropout { x: NodeId, kept: Arc<Vec<bool>>, scale: T },
    CrossEntropy { logits: NodeId, targets: Arc<Vec<u32>>, ignore: u32, lse: Vec<T>, n_predicted: usize },
}

struct Node<T: Scalar> {
    shape: Vec<usize>,
    values: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    consumed: bool,
}

/// (batch, rows, cols) view of a rank-2 or rank-3 shape.
fn batched(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [r, c] => Ok((1, *r, *c)),
        [b, r, c] => Ok((*b, *r, *c)),
        other => Err(Error::Shape(format!("expected rank 2 or 3, got {other:?}"))),
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), consumed: false }
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.nodes.push(Node { shape, values, op, needs_grad });
        self.grads.push(None);
        self.nodes.len() - 1
    }

    fn node(&self, id: NodeId) -> &Node<T> {
        &self.nodes[id]
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn values(&self, id: NodeId) -> &[T] {
        &self.nodes[id].values
    }

    pub fn scalar_value(&self, id: NodeId) -> T {
        debug_assert_eq!(self.nodes[id].values.len(), 1);
        self.nodes[id].values[0]
    }

    /// Gradient of the last backward pass with respect to node `id`; present
    /// only for nodes that required grad and were reached by the sweep.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.grads[id].as_deref()
    }

    /// Whether every value on every node is finite. Lets a caller distinguish
    /// a numerical blow-up mid-forward from a structural error.
    pub fn all_finite(&self) -> bool {
        self.nodes
            .iter()
            .all(|n| n.values.iter().all(|v| v.is_finite()))
    }

    pub fn take_grad(&mut self, id: NodeId) -> Option<Vec<T>> {
        self.grads[id].take()
    }

    /// Copies a tensor onto the tape as an input node.
    pub fn leaf(&mut self, t: &Tensor<T>) -> NodeId {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ba, m, k) = batched(&self.node(a).shape)?;
        let bshape = &self.node(b).shape;
        let (bb, kb, n) = batched(bshape)?;
        let b_shared = bshape.len() == 2;
        if kb != k {
            return Err(Error::Shape(format!("matmul inner dims {k} vs {kb}")));
        }
        if !b_shared && bb != ba {
            return Err(Error::Shape(format!("matmul batch dims {ba} vs {bb}")));
        }
        let out_shape = if self.node(a).shape.len() == 3 { vec![ba, m, n] } else { vec![m, n] };
        let mut out = vec![T::zero(); ba * m * n];
        for i in 0..ba {
            let av = &self.node(a).values[i * m * k..(i + 1) * m * k];
            let bv = if b_shared {
                &self.node(b).values[..]
            } else {
                &self.node(b).values[i * k * n..(i + 1) * k * n]
            };
            kernels::matmul_acc(av, bv, &mut out[i * m * n..(i + 1) * m * n], m, k, n);
        }
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(out_shape, out, Op::Matmul { a, b }, needs))
    }

    /// y = a · bᵀ; `b` is (n × k) (or batched), matching `a`'s inner dim k.
    pub fn matmul_transpose_b(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ba, m, k) = batched(&self.node(a).shape)?;
        let bshape = &self.node(b).shape;
        let (bb, n, kb) = batched(bshape)?;
        let b_shared = bshape.len() == 2;
        if kb != k {
            return Err(Error::Shape(format!("matmul_transpose_b inner dims {k} vs {kb}")));
        }
        if !b_shared && bb != ba {
            return Err(Error::Shape(format!("matmul_transpose_b batch dims {ba} vs {bb}")));
        }
        let out_shape = if self.node(a).shape.len() == 3 { vec![ba, m, n] } else { vec![m, n] };
        let mut out = vec![T::zero(); ba * m * n];
        let mut bt = vec![T::zero(); k * n];
        for i in 0..ba {
            let av = &self.node(a).values[i * m * k..(i + 1) * m * k];
            let bv = if b_shared {
                &self.node(b).values[..]
            } else {
                &self.node(b).values[i * n * k..(i + 1) * n * k]
            };
            kernels::transpose(bv, n, k, &mut bt);
            kernels::matmul_acc(av, &bt, &mut out[i * m * n..(i + 1) * m * n], m, k, n);
        }
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(out_shape, out, Op::MatmulTransposeB { a, b }, needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.node(a).shape != self.node(b).shape {
            return Err(Error::Shape(format!(
                "add shapes {:?} vs {:?}",
                self.node(a).shape,
                self.node(b).shape
            )));
        }
        let values: Vec<T> = self
            .node(a)
            .values
            .iter()
            .zip(self.node(b).values.iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.node(a).shape.clone();
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(shape, values, Op::Add { a, b }, needs))
    }

    /// Elementwise (Hadamard) product of same-shape nodes.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.node(a).shape != self.node(b).shape {
            return Err(Error::Shape(format!(
                "mul shapes {:?} vs {:?}",
                self.node(a).shape,
                self.node(b).shape
            )));
        }
        let values: Vec<T> = self
            .node(a)
            .values
            .iter()
            .zip(self.node(b).values.iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.node(a).shape.clone();
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(shape, values, Op::Mul { a, b }, needs))
    }

    /// Broadcasts a rank-1 bias over the last dimension.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let cols = *self.node(x).shape.last().unwrap();
        if self.node(bias).shape != [cols] {
            return Err(Error::Shape(format!(
                "bias shape {:?} vs row width {cols}",
                self.node(bias).shape
            )));
        }
        let bvals = &self.node(bias).values;
        let values: Vec<T> = self
            .node(x)
            .values
            .chunks_exact(cols)
            .flat_map(|row| row.iter().zip(bvals.iter()).map(|(&v, &b)| v + b))
            .collect();
        let shape = self.node(x).shape.clone();
        let needs = self.node(x).needs_grad || self.node(bias).needs_grad;
        Ok(self.push(shape, values, Op::AddBias { x, bias }, needs))
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        let values: Vec<T> = self.node(x).values.iter().map(|&v| v * c).collect();
        let shape = self.node(x).shape.clone();
        let needs = self.node(x).needs_grad;
        self.push(shape, values, Op::Scale { x, c }, needs)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total = self.node(x).values.iter().copied().fold(T::zero(), |acc, v| acc + v);
        let needs = self.node(x).needs_grad;
        self.push(vec![1], vec![total], Op::Sum { x }, needs)
    }

    /// Same values, new shape; row-major layout is unchanged.
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.node(x).values.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {shape:?} changes element count",
                self.node(x).shape
            )));
        }
        let values = self.node(x).values.clone();
        let needs = self.node(x).needs_grad;
        Ok(self.push(shape, values, Op::Reshape { x }, needs))
    }

    /// Embedding lookup: rows of `table` selected by `ids`.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let shape = &self.node(table).shape;
        if shape.len() != 2 {
            return Err(Error::Shape(format!("gather table must be rank 2, got {shape:?}")));
        }
        let (rows, cols) = (shape[0], shape[1]);
        if ids.is_empty() {
            return Err(Error::Data("gather with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= rows) {
            return Err(Error::Data(format!("token id {bad} out of range (vocab {rows})")));
        }
        let tvals = &self.node(table).values;
        let mut values = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            values.extend_from_slice(&tvals[id as usize * cols..(id as usize + 1) * cols]);
        }
        let needs = self.node(table).needs_grad;
        Ok(self.push(
            vec![ids.len(), cols],
            values,
            Op::GatherRows { table, ids: Arc::new(ids.to_vec()) },
            needs,
        ))
    }

    /// (batch, n, h·d) → (batch·h, n, d)
    pub fn split_heads(&mut self, x: NodeId, n_heads: usize) -> Result<NodeId> {
        let shape = &self.node(x).shape;
        let &[b, n, d] = match shape.as_slice() {
            s @ [_, _, _] => <&[usize; 3]>::try_from(s).unwrap(),
            other => return Err(Error::Shape(format!("split_heads wants rank 3, got {other:?}"))),
        };
        if d % n_heads != 0 {
            return Err(Error::Shape(format!("width {d} not divisible by {n_heads} heads")));
        }
        let dk = d / n_heads;
        let xv = &self.node(x).values;
        let mut values = vec![T::zero(); b * n * d];
        for bi in 0..b {
            for h in 0..n_heads {
                for i in 0..n {
                    let src = bi * n * d + i * d + h * dk;
                    let dst = (bi * n_heads + h) * n * dk + i * dk;
                    values[dst..dst + dk].copy_from_slice(&xv[src..src + dk]);
                }
            }
        }
        let needs = self.node(x).needs_grad;
        Ok(self.push(vec![b * n_heads, n, dk], values, Op::SplitHeads { x, n_heads }, needs))
    }

    /// (batch·h, n, d) → (batch, n, h·d); inverse of `split_heads`.
    pub fn merge_heads(&mut self, x: NodeId, n_heads: usize) -> Result<NodeId> {
        let shape = &self.node(x).shape;
        let &[bh, n, dk] = match shape.as_slice() {
            s @ [_, _, _] => <&[usize; 3]>::try_from(s).unwrap(),
            other => return Err(Error::Shape(format!("merge_heads wants rank 3, got {other:?}"))),
        };
        if bh % n_heads != 0 {
            return Err(Error::Shape(format!("batch {bh} not divisible by {n_heads} heads")));
        }
        let b = bh / n_heads;
        let d = dk * n_heads;
        let xv = &self.node(x).values;
        let mut values = vec![T::zero(); b * n * d];
        for bi in 0..b {
            for h in 0..n_heads {
                for i in 0..n {
                    let src = (bi * n_heads + h) * n * dk + i * dk;
                    let dst = bi * n * d + i * d + h * dk;
                    values[dst..dst + dk].copy_from_slice(&xv[src..src + dk]);
                }
            }
        }
        let needs = self.node(x).needs_grad;
        Ok(self.push(vec![b, n, d], values, Op::MergeHeads { x, n_heads }, needs))
    }

    /// Row-wise softmax over allowed positions only. Disallowed entries come
    /// out exactly 0.0 and never enter the max/sum arithmetic, so outputs at
    /// one query position carry no trace of masked-out scores.
    pub fn softmax_masked(&mut self, scores: NodeId, mask: &Arc<MaskPlane>) -> Result<NodeId> {
        let n = mask.n();
        let shape = self.node(scores).shape.clone();
        if *shape.last().unwrap() != n {
            return Err(Error::Shape(format!("scores last dim {:?} vs mask n {n}", shape)));
        }
        let rows = self.node(scores).values.len() / n;
        if rows % n != 0 {
            return Err(Error::Shape(format!("scores rows {rows} not a multiple of n {n}")));
        }
        let xv = &self.node(scores).values;
        let mut values = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let q = r % n;
            let allowed = mask.row(q);
            let row = &xv[r * n..(r + 1) * n];
            let out = &mut values[r * n..(r + 1) * n];
            let mut max = T::neg_infinity();
            for j in 0..n {
                if allowed[j] && row[j] > max {
                    max = row[j];
                }
            }
            if !max.is_finite() {
                return Err(Error::Data(format!("softmax row {r} has no finite allowed score")));
            }
            let mut denom = T::zero();
            for j in 0..n {
                if allowed[j] {
                    let e = (row[j] - max).exp();
                    out[j] = e;
                    denom += e;
                }
            }
            for j in 0..n {
                if allowed[j] {
                    out[j] = out[j] / denom;
                }
            }
        }
        let needs = self.node(scores).needs_grad;
        Ok(self.push(shape, values, Op::SoftmaxMasked { x: scores, mask: Arc::clone(mask) }, needs))
    }

    /// Per-row normalization over the last dimension, then gamma ⊙ x̂ + beta.
    /// A zero-variance row normalizes to zeros (eps keeps it finite).
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: T) -> Result<NodeId> {
        let cols = *self.node(x).shape.last().unwrap();
        if self.node(gamma).shape != [cols] || self.node(beta).shape != [cols] {
            return Err(Error::Shape(format!(
                "layer_norm affine shapes {:?}/{:?} vs width {cols}",
                self.node(gamma).shape,
                self.node(beta).shape
            )));
        }
        let xv = &self.node(x).values;
        let gv = &self.node(gamma).values;
        let bv = &self.node(beta).values;
        let rows = xv.len() / cols;
        let cols_t = T::from_f64(cols as f64);
        let mut values = vec![T::zero(); xv.len()];
        let mut mean = vec![T::zero(); rows];
        let mut inv_std = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mut m = T::zero();
            for &v in row {
                m += v;
            }
            m = m / cols_t;
            let mut var = T::zero();
            for &v in row {
                let d = v - m;
                var += d * d;
            }
            var = var / cols_t;
            let is = (var + eps).sqrt().recip();
            mean[r] = m;
            inv_std[r] = is;
            let out = &mut values[r * cols..(r + 1) * cols];
            for j in 0..cols {
                out[j] = gv[j] * ((row[j] - m) * is) + bv[j];
            }
        }
        let shape = self.node(x).shape.clone();
        let needs =
            self.node(x).needs_grad || self.node(gamma).needs_grad || self.node(beta).needs_grad;
        Ok(self.push(shape, values, Op::LayerNorm { x, gamma, beta, mean, inv_std }, needs))
    }

    /// Exact-erf GELU: x · Φ(x).
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let half = T::from_f64(0.5);
        let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        let values: Vec<T> = self
            .node(x)
            .values
            .iter()
            .map(|&v| v * half * (T::one() + (v * inv_sqrt2).erf()))
            .collect();
        let shape = self.node(x).shape.clone();
        let needs = self.node(x).needs_grad;
        self.push(shape, values, Op::Gelu { x }, needs)
    }

    /// Inverted dropout; pass-through (no node) when rate is zero.
    pub fn dropout(&mut self, x: NodeId, rate: f64, rng: &mut impl Rng) -> Result<NodeId> {
        if rate == 0.0 {
            return Ok(x);
        }
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        let keep = 1.0 - rate;
        let kept: Vec<bool> = (0..self.node(x).values.len()).map(|_| rng.gen::<f64>() < keep).collect();
        let scale = T::from_f64(keep.recip());
        let values: Vec<T> = self
            .node(x)
            .values
            .iter()
            .zip(kept.iter())
            .map(|(&v, &k)| if k { v * scale } else { T::zero() })
            .collect();
        let shape = self.node(x).shape.clone();
        let needs = self.node(x).needs_grad;
        Ok(self.push(shape, values, Op::Dropout { x, kept: Arc::new(kept), scale }, needs))
    }

    /// Mean negative log-likelihood (natural log) over targets that are not
    /// `ignore`. Ignored rows contribute nothing to the value or gradient.
    pub fn cross_entropy_logits(
        &mut self,
        logits: NodeId,
        targets: &[u32],
        ignore: u32,
    ) -> Result<NodeId> {
        let shape = &self.node(logits).shape;
        if shape.len() != 2 {
            return Err(Error::Shape(format!("logits must be rank 2, got {shape:?}")));
        }
        let (rows, vocab) = (shape[0], shape[1]);
        if targets.len() != rows {
            return Err(Error::Shape(format!("{} targets for {rows} logit rows", targets.len())));
        }
        let n_predicted = targets.iter().filter(|&&t| t != ignore).count();
        if n_predicted == 0 {
            return Err(Error::Data("all targets ignored".into()));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t != ignore && t as usize >= vocab) {
            return Err(Error::Data(format!("target id {bad} out of range (vocab {vocab})")));
        }
        let xv = &self.node(logits).values;
        let mut lse = vec![T::zero(); rows];
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            if t == ignore {
                continue;
            }
            let row = &xv[r * vocab..(r + 1) * vocab];
            let mut max = row[0];
            for &v in &row[1..] {
                if v > max {
                    max = v;
                }
            }
            let mut denom = T::zero();
            for &v in row {
                denom += (v - max).exp();
            }
            let l = max + denom.ln();
            lse[r] = l;
            total += l - row[t as usize];
        }
        let loss = total / T::from_f64(n_predicted as f64);
        let needs = self.node(logits).needs_grad;
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: Arc::new(targets.to_vec()),
                ignore,
                lse,
                n_predicted,
            },
            needs,
        ))
    }

    /// Reverse sweep from a scalar loss node. Gradients of reachable nodes
    /// accumulate into per-node buffers, readable via `grad`/`take_grad`.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.consumed {
            return Err(Error::Tape("backward on an already-swept tape".into()));
        }
        if self.nodes[loss].values.len() != 1 {
            return Err(Error::Tape(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss].shape
            )));
        }
        self.consumed = true;
        self.grads[loss] = Some(vec![T::one()]);

        for id in (0..=loss).rev() {
            if !self.nodes[id].needs_grad {
                self.grads[id] = None;
                continue;
            }
            let Some(up) = self.grads[id].take() else { continue };
            if matches!(self.nodes[id].op, Op::Leaf) {
                // Input node: keep the accumulated gradient for the caller.
                self.grads[id] = Some(up);
                continue;
            }
            // Split borrows: reads go through `nodes`, writes through `grads`.
            let nodes = &self.nodes;
            let grads = &mut self.grads;
            let wants = |n: NodeId| nodes[n].needs_grad;
            let mut sink = |n: NodeId, f: &mut dyn FnMut(&mut [T])| {
                let buf = grads[n].get_or_insert_with(|| vec![T::zero(); nodes[n].values.len()]);
                f(buf);
            };
            match &nodes[id].op {
                Op::Leaf => unreachable!("handled above"),
                Op::Matmul { a, b } => {
                    let (ba, m, k) = batched(&nodes[*a].shape).unwrap();
                    let n = *nodes[id].shape.last().unwrap();
                    let b_shared = nodes[*b].shape.len() == 2;
                    if wants(*a) {
                        let mut bt = vec![T::zero(); k * n];
                        sink(*a, &mut |da| {
                            for i in 0..ba {
                                let bv = if b_shared {
                                    &nodes[*b].values[..]
                                } else {
                                    &nodes[*b].values[i * k * n..(i + 1) * k * n]
                                };
                                kernels::transpose(bv, k, n, &mut bt);
                                kernels::matmul_acc(
                                    &up[i * m * n..(i + 1) * m * n],
                                    &bt,
                                    &mut da[i * m * k..(i + 1) * m * k],
                                    m,
                                    n,
                                    k,
                                );
                            }
                        });
                    }
                    if wants(*b) {
                        sink(*b, &mut |db| {
                            for i in 0..ba {
                                let av = &nodes[*a].values[i * m * k..(i + 1) * m * k];
                                let db_slice = if b_shared {
                                    &mut db[..]
                                } else {
                                    &mut db[i * k * n..(i + 1) * k * n]
                                };
                                kernels::matmul_at_b_acc(
                                    av,
                                    &up[i * m * n..(i + 1) * m * n],
                                    db_slice,
                                    m,
                                    k,
                                    n,
                                );
                            }
                        });
                    }
                }
                Op::MatmulTransposeB { a, b } => {
                    let (ba, m, k) = batched(&nodes[*a].shape).unwrap();
                    let n = *nodes[id].shape.last().unwrap();
                    let b_shared = nodes[*b].shape.len() == 2;
                    if wants(*a) {
                        sink(*a, &mut |da| {
                            for i in 0..ba {
                                let bv = if b_shared {
                                    &nodes[*b].values[..]
                                } else {
                                    &nodes[*b].values[i * n * k..(i + 1) * n * k]
                                };
                                kernels::matmul_acc(
                                    &up[i * m * n..(i + 1) * m * n],
                                    bv,
                                    &mut da[i * m * k..(i + 1) * m * k],
                                    m,
                                    n,
                                    k,
                                );
                            }
                        });
                    }
                    if wants(*b) {
                        sink(*b, &mut |db| {
                            for i in 0..ba {
                                let av = &nodes[*a].values[i * m * k..(i + 1) * m * k];
                                let db_slice = if b_shared {
                                    &mut db[..]
                                } else {
                                    &mut db[i * n * k..(i + 1) * n * k]
                                };
                                kernels::matmul_at_b_acc(
                                    &up[i * m * n..(i + 1) * m * n],
                                    av,
                                    db_slice,
                                    m,
                                    n,
                                    k,
                                );
                            }
                        });
                    }
                }
                Op::Add { a, b } => {
                    for input in [*a, *b] {
                        if wants(input) {
                            sink(input, &mut |g| {
                                for (gi, &u) in g.iter_mut().zip(up.iter()) {
                                    *gi += u;
                                }
                            });
                        }
                    }
                }
                Op::Mul { a, b } => {
                    for (input, other) in [(*a, *b), (*b, *a)] {
                        if wants(input) {
                            let ov = &nodes[other].values;
                            sink(input, &mut |g| {
                                for ((gi, &u), &o) in g.iter_mut().zip(up.iter()).zip(ov.iter()) {
                                    *gi += u * o;
                                }
                            });
                        }
                    }
                }
                Op::AddBias { x, bias } => {
                    if wants(*x) {
                        sink(*x, &mut |g| {
                            for (gi, &u) in g.iter_mut().zip(up.iter()) {
                                *gi += u;
                            }
                        });
                    }
                    if wants(*bias) {
                        let cols = nodes[*bias].values.len();
                        sink(*bias, &mut |g| {
                            for row in up.chunks_exact(cols) {
                                for (gi, &u) in g.iter_mut().zip(row.iter()) {
                                    *gi += u;
                                }
                            }
                        });
                    }
                }
                Op::Scale { x, c } => {
                    if wants(*x) {
                        let c = *c;
                        sink(*x, &mut |g| {
                            for (gi, &u) in g.iter_mut().zip(up.iter()) {
                                *gi += c * u;
                            }
                        });
                    }
                }
                Op::Sum { x } => {
                    if wants(*x) {
                        let u = up[0];
                        sink(*x, &mut |g| {
                            for gi in g.iter_mut() {
                                *gi += u;
                            }
                        });
                    }
                }
                Op::Reshape { x } => {
                    if wants(*x) {
                        sink(*x, &mut |g| {
                            for (gi, &u) in g.iter_mut().zip(up.iter()) {
                                *gi += u;
                            }
                        });
                    }
                }
                Op::GatherRows { table, ids } => {
                    if wants(*table) {
                        let cols = nodes[*table].shape[1];
                        sink(*table, &mut |g| {
                            for (pos, &idv) in ids.iter().enumerate() {
                                let dst = &mut g[idv as usize * cols..(idv as usize + 1) * cols];
                                let src = &up[pos * cols..(pos + 1) * cols];
                                for (gi, &u) in dst.iter_mut().zip(src.iter()) {
                                    *gi += u;
                                }
                            }
                        });
                    }
                }
                Op::SplitHeads { x, n_heads } => {
                    if wants(*x) {
                        let [b, n, d] = <[usize; 3]>::try_from(nodes[*x].shape.as_slice()).unwrap();
                        let dk = d / n_heads;
                        let h_count = *n_heads;
                        sink(*x, &mut |g| {
                            for bi in 0..b {
                                for h in 0..h_count {
                                    for i in 0..n {
                                        let dst = bi * n * d + i * d + h * dk;
                                        let src = (bi * h_count + h) * n * dk + i * dk;
                                        for c in 0..dk {
                                            g[dst + c] += up[src + c];
                                        }
                                    }
                                }
                            }
                        });
                    }
                }
                Op::MergeHeads { x, n_heads } => {
                    if wants(*x) {
                        let [bh, n, dk] =
                            <[usize; 3]>::try_from(nodes[*x].shape.as_slice()).unwrap();
                        let h_count = *n_heads;
                        let b = bh / h_count;
                        let d = dk * h_count;
                        sink(*x, &mut |g| {
                            for bi in 0..b {
                                for h in 0..h_count {
                                    for i in 0..n {
                                        let src = bi * n * d + i * d + h * dk;
                                        let dst = (bi * h_count + h) * n * dk + i * dk;
                                        for c in 0..dk {
                                            g[dst + c] += up[src + c];
                                        }
                                    }
                                }
                            }
                        });
                    }
                }
                Op::SoftmaxMasked { x, mask } => {
                    if wants(*x) {
                        let n = mask.n();
                        let probs = &nodes[id].values;
                        let rows = probs.len() / n;
                        sink(*x, &mut |g| {
                            for r in 0..rows {
                                let p = &probs[r * n..(r + 1) * n];
                                let u = &up[r * n..(r + 1) * n];
                                let mut dot = T::zero();
                                for j in 0..n {
                                    dot += p[j] * u[j];
                                }
                                let grow = &mut g[r * n..(r + 1) * n];
                                for j in 0..n {
                                    grow[j] += p[j] * (u[j] - dot);
                                }
                            }
                        });
                    }
                }
                Op::LayerNorm { x, gamma, beta, mean, inv_std } => {
                    let cols = nodes[*gamma].values.len();
                    let rows = nodes[*x].values.len() / cols;
                    let cols_t = T::from_f64(cols as f64);
                    let xv = &nodes[*x].values;
                    let gv = &nodes[*gamma].values;
                    if wants(*x) {
                        sink(*x, &mut |g| {
                            for r in 0..rows {
                                let m = mean[r];
                                let is = inv_std[r];
                                let row = &xv[r * cols..(r + 1) * cols];
                                let u = &up[r * cols..(r + 1) * cols];
                                let mut s1 = T::zero();
                                let mut s2 = T::zero();
                                for j in 0..cols {
                                    let gy = u[j] * gv[j];
                                    let xh = (row[j] - m) * is;
                                    s1 += gy;
                                    s2 += gy * xh;
                                }
                                let grow = &mut g[r * cols..(r + 1) * cols];
                                for j in 0..cols {
                                    let gy = u[j] * gv[j];
                                    let xh = (row[j] - m) * is;
                                    grow[j] += is * (gy - s1 / cols_t - xh * s2 / cols_t);
                                }
                            }
                        });
                    }
                    if wants(*gamma) {
                        sink(*gamma, &mut |g| {
                            for r in 0..rows {
                                let m = mean[r];
                                let is = inv_std[r];
                                let row = &xv[r * cols..(r + 1) * cols];
                                let u = &up[r * cols..(r + 1) * cols];
                                for j in 0..cols {
                                    g[j] += u[j] * ((row[j] - m) * is);
                                }
                            }
                        });
                    }
                    if wants(*beta) {
                        sink(*beta, &mut |g| {
                            for row in up.chunks_exact(cols) {
                                for (gi, &u) in g.iter_mut().zip(row.iter()) {
                                    *gi += u;
                                }
                            }
                        });
                    }
                }
                Op::Gelu { x } => {
                    if wants(*x) {
                        let half = T::from_f64(0.5);
                        let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
                        let inv_sqrt_2pi = T::from_f64(INV_SQRT_2PI);
                        let xv = &nodes[*x].values;
                        sink(*x, &mut |g| {
                            for (j, &v) in xv.iter().enumerate() {
                                let phi_cdf = half * (T::one() + (v * inv_sqrt2).erf());
                                let phi_pdf = inv_sqrt_2pi * (-half * v * v).exp();
                                g[j] += up[j] * (phi_cdf + v * phi_pdf);
                            }
                        });
                    }
                }
                Op::Dropout { x, kept, scale } => {
                    if wants(*x) {
                        let scale = *scale;
                        let kept = Arc::clone(kept);
                        sink(*x, &mut |g| {
                            for (j, &k) in kept.iter().enumerate() {
                                if k {
                                    g[j] += up[j] * scale;
                                }
                            }
                        });
                    }
                }
                Op::CrossEntropy { logits, targets, ignore, lse, n_predicted } => {
                    if wants(*logits) {
                        let vocab = nodes[*logits].shape[1];
                        let xv = &nodes[*logits].values;
                        let u = up[0] / T::from_f64(*n_predicted as f64);
                        sink(*logits, &mut |g| {
                            for (r, &t) in targets.iter().enumerate() {
                                if t == *ignore {
                                    continue;
                                }
                                let row = &xv[r * vocab..(r + 1) * vocab];
                                let grow = &mut g[r * vocab..(r + 1) * vocab];
                                for j in 0..vocab {
                                    let p = (row[j] - lse[r]).exp();
                                    grow[j] += u * p;
                                }
                                grow[t as usize] -= u;
                            }
                        });
                    }
                }
            }
        }
        Ok(())
    }
}
