//! Reverse-mode differentiation over a small fixed primitive set.
//!
//! A [`Graph`] is an append-only arena of nodes; node ids are issued in
//! topological order, so the backward pass is a single reverse sweep that
//! visits each recorded operation exactly once. Values are computed
//! eagerly at record time. The primitive set is closed: matrix product,
//! broadcast bias add, tanh/relu, rowwise softmax, row normalization,
//! column gather, and fused scalar losses (mean cross-entropy over hard
//! labels, soft targets, focal, negative log-likelihood on probabilities,
//! mean L1/L2 against constant targets).

use crate::error::{Error, Result};
use crate::numeric::loss::{neg_log_softmax_at, softmax_slice, PROB_FLOOR};
use crate::numeric::Tensor;

pub type NodeId = usize;

#[derive(Debug)]
enum Op {
    Leaf,
    /// `[m,k] x [k,n]`
    MatMul { a: NodeId, b: NodeId },
    /// Elementwise sum, equal shapes.
    Add { a: NodeId, b: NodeId },
    /// `[m,n] + [n]`, bias broadcast over rows.
    AddRowBroadcast { a: NodeId, bias: NodeId },
    Tanh { x: NodeId },
    Relu { x: NodeId },
    /// Rowwise softmax of a `[m,n]` matrix.
    Softmax { x: NodeId },
    /// Rows divided by their sums (inputs must be nonnegative rows).
    RowNormalize { x: NodeId },
    /// Column selection: `out[:, j] = x[:, idx[j]]`.
    GatherCols { x: NodeId, idx: Vec<usize> },
    /// Mean over rows of `-log softmax(z)[label]`.
    CrossEntropyMean { logits: NodeId, labels: Vec<usize> },
    /// Mean over rows of `-sum_j t[j] log softmax(z)[j]`.
    SoftCrossEntropyMean { logits: NodeId, targets: Tensor },
    /// Mean over rows of `(1-p_y)^gamma * (-log p_y)`.
    FocalMean {
        logits: NodeId,
        labels: Vec<usize>,
        gamma: f64,
    },
    /// Mean over rows of `-log(max(p[label], floor))` on probability rows.
    NllMean { probs: NodeId, labels: Vec<usize> },
    /// Mean over rows of `sum_j |x[j] - t[j]|`.
    L1Mean { x: NodeId, target: Tensor },
    /// Mean over rows of `sum_j (x[j] - t[j])^2`.
    L2Mean { x: NodeId, target: Tensor },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Recorded forward pass, replayable in reverse for exact gradients.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a node; zeros if the node does not influence the loss.
    pub fn get(&self, id: NodeId, graph: &Graph) -> Tensor {
        match &self.grads[id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(graph.value(id).shape().to_vec()),
        }
    }

    pub fn try_get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id].as_ref()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    /// Insert a leaf holding a constant or parameter value.
    pub fn input(&mut self, value: Tensor) -> Result<NodeId> {
        value.check_finite("graph input")?;
        Ok(self.push(Op::Leaf, value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul { a, b }, value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add { a, b }, value))
    }

    pub fn add_row_broadcast(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let bv = self.value(bias);
        if av.shape().len() != 2 || bv.shape().len() != 1 || av.cols() != bv.numel() {
            return Err(Error::InvalidInput("add_row_broadcast shape mismatch".into()));
        }
        let n = av.cols();
        let mut out = av.data().to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            *v += bv.data()[i % n];
        }
        let value = Tensor::new(av.shape().to_vec(), out)?;
        Ok(self.push(Op::AddRowBroadcast { a, bias }, value))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let data = self.value(x).data().iter().map(|v| v.tanh()).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data).unwrap();
        self.push(Op::Tanh { x }, value)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let data = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data).unwrap();
        self.push(Op::Relu { x }, value)
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(Error::InvalidInput("softmax_rows requires rank 2".into()));
        }
        let (m, n) = (xv.rows(), xv.cols());
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            out.extend(softmax_slice(xv.row(i)));
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::Softmax { x }, value))
    }

    pub fn row_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(Error::InvalidInput("row_normalize requires rank 2".into()));
        }
        let (m, n) = (xv.rows(), xv.cols());
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = xv.row(i);
            let s: f64 = row.iter().sum();
            if s <= 0.0 {
                // Degenerate all-zero row: fall back to uniform.
                out.extend(std::iter::repeat(1.0 / n as f64).take(n));
            } else {
                out.extend(row.iter().map(|v| v / s));
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::RowNormalize { x }, value))
    }

    pub fn gather_cols(&mut self, x: NodeId, idx: Vec<usize>) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.shape().len() != 2 {
            return Err(Error::InvalidInput("gather_cols requires rank 2".into()));
        }
        let (m, n) = (xv.rows(), xv.cols());
        if idx.iter().any(|&j| j >= n) {
            return Err(Error::Index("gather_cols column out of range".into()));
        }
        let mut out = Vec::with_capacity(m * idx.len());
        for i in 0..m {
            let row = xv.row(i);
            out.extend(idx.iter().map(|&j| row[j]));
        }
        let value = Tensor::new(vec![m, idx.len()], out)?;
        Ok(self.push(Op::GatherCols { x, idx }, value))
    }

    pub fn cross_entropy_mean(&mut self, logits: NodeId, labels: Vec<usize>) -> Result<NodeId> {
        let zv = self.value(logits);
        Self::check_labels(zv, &labels)?;
        let mean = (0..zv.rows())
            .map(|i| neg_log_softmax_at(zv.row(i), labels[i]))
            .sum::<f64>()
            / zv.rows() as f64;
        Ok(self.push(Op::CrossEntropyMean { logits, labels }, Tensor::scalar(mean)))
    }

    pub fn soft_cross_entropy_mean(&mut self, logits: NodeId, targets: Tensor) -> Result<NodeId> {
        let zv = self.value(logits);
        if targets.shape() != zv.shape() {
            return Err(Error::InvalidInput(
                "soft_cross_entropy target shape mismatch".into(),
            ));
        }
        let mut total = 0.0;
        for i in 0..zv.rows() {
            let p = softmax_slice(zv.row(i));
            total += targets
                .row(i)
                .iter()
                .zip(&p)
                .map(|(&t, &q)| -t * q.max(PROB_FLOOR).ln())
                .sum::<f64>();
        }
        let mean = total / zv.rows() as f64;
        Ok(self.push(
            Op::SoftCrossEntropyMean { logits, targets },
            Tensor::scalar(mean),
        ))
    }

    pub fn focal_mean(&mut self, logits: NodeId, labels: Vec<usize>, gamma: f64) -> Result<NodeId> {
        let zv = self.value(logits);
        Self::check_labels(zv, &labels)?;
        if gamma < 0.0 {
            return Err(Error::InvalidInput("focal gamma must be >= 0".into()));
        }
        let mut total = 0.0;
        for i in 0..zv.rows() {
            let ce = neg_log_softmax_at(zv.row(i), labels[i]);
            let p = softmax_slice(zv.row(i))[labels[i]];
            total += (1.0 - p).max(0.0).powf(gamma) * ce;
        }
        let mean = total / zv.rows() as f64;
        Ok(self.push(
            Op::FocalMean {
                logits,
                labels,
                gamma,
            },
            Tensor::scalar(mean),
        ))
    }

    pub fn nll_mean(&mut self, probs: NodeId, labels: Vec<usize>) -> Result<NodeId> {
        let pv = self.value(probs);
        Self::check_labels(pv, &labels)?;
        let mean = (0..pv.rows())
            .map(|i| -pv.row(i)[labels[i]].max(PROB_FLOOR).ln())
            .sum::<f64>()
            / pv.rows() as f64;
        Ok(self.push(Op::NllMean { probs, labels }, Tensor::scalar(mean)))
    }

    pub fn l1_mean(&mut self, x: NodeId, target: Tensor) -> Result<NodeId> {
        let xv = self.value(x);
        if target.shape() != xv.shape() {
            return Err(Error::InvalidInput("l1_mean target shape mismatch".into()));
        }
        let mean = xv
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / xv.rows() as f64;
        Ok(self.push(Op::L1Mean { x, target }, Tensor::scalar(mean)))
    }

    pub fn l2_mean(&mut self, x: NodeId, target: Tensor) -> Result<NodeId> {
        let xv = self.value(x);
        if target.shape() != xv.shape() {
            return Err(Error::InvalidInput("l2_mean target shape mismatch".into()));
        }
        let mean = xv
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / xv.rows() as f64;
        Ok(self.push(Op::L2Mean { x, target }, Tensor::scalar(mean)))
    }

    fn check_labels(t: &Tensor, labels: &[usize]) -> Result<()> {
        if t.shape().len() != 2 {
            return Err(Error::InvalidInput("loss input must be rank 2".into()));
        }
        if labels.len() != t.rows() {
            return Err(Error::InvalidInput("one label per row required".into()));
        }
        if labels.iter().any(|&y| y >= t.cols()) {
            return Err(Error::Index("label out of range".into()));
        }
        Ok(())
    }

    /// Reverse sweep from a scalar loss node. Returns gradients for every
    /// node that influences the loss.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward on empty graph".into()));
        }
        if loss >= self.nodes.len() {
            return Err(Error::State("backward on unknown node".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::State("backward requires a scalar loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Tensor::scalar(1.0));

        for id in (0..=loss).rev() {
            let Some(g_out) = grads[id].clone() else {
                continue;
            };
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let da = g_out.matmul(&bv.transpose()?)?;
                    let db = av.transpose()?.matmul(&g_out)?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g_out.clone())?;
                    accumulate(&mut grads, *b, g_out)?;
                }
                Op::AddRowBroadcast { a, bias } => {
                    let n = self.value(*bias).numel();
                    let mut db = vec![0.0; n];
                    for (i, &g) in g_out.data().iter().enumerate() {
                        db[i % n] += g;
                    }
                    accumulate(&mut grads, *a, g_out.clone())?;
                    accumulate(&mut grads, *bias, Tensor::from_vec(db))?;
                }
                Op::Tanh { x } => {
                    let y = self.value(id);
                    let dx: Vec<f64> = g_out
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(&g, &t)| g * (1.0 - t * t))
                        .collect();
                    accumulate(&mut grads, *x, Tensor::new(y.shape().to_vec(), dx)?)?;
                }
                Op::Relu { x } => {
                    let y = self.value(id);
                    let dx: Vec<f64> = g_out
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(&g, &t)| if t > 0.0 { g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, Tensor::new(y.shape().to_vec(), dx)?)?;
                }
                Op::Softmax { x } => {
                    let y = self.value(id);
                    let (m, n) = (y.rows(), y.cols());
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        let yr = y.row(i);
                        let gr = &g_out.data()[i * n..(i + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dx[i * n + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(vec![m, n], dx)?)?;
                }
                Op::RowNormalize { x } => {
                    let xv = self.value(*x);
                    let y = self.value(id);
                    let (m, n) = (y.rows(), y.cols());
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        let s: f64 = xv.row(i).iter().sum();
                        if s <= 0.0 {
                            continue; // uniform fallback has zero gradient
                        }
                        let yr = y.row(i);
                        let gr = &g_out.data()[i * n..(i + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dx[i * n + j] = (gr[j] - dot) / s;
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(vec![m, n], dx)?)?;
                }
                Op::GatherCols { x, idx } => {
                    let xv = self.value(*x);
                    let (m, n) = (xv.rows(), xv.cols());
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        for (j, &src) in idx.iter().enumerate() {
                            dx[i * n + src] += g_out.data()[i * idx.len() + j];
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(vec![m, n], dx)?)?;
                }
                Op::CrossEntropyMean { logits, labels } => {
                    let zv = self.value(*logits);
                    let (m, n) = (zv.rows(), zv.cols());
                    let scale = g_out.item()? / m as f64;
                    let mut dz = vec![0.0; m * n];
                    for i in 0..m {
                        let mut p = softmax_slice(zv.row(i));
                        p[labels[i]] -= 1.0;
                        for j in 0..n {
                            dz[i * n + j] = scale * p[j];
                        }
                    }
                    accumulate(&mut grads, *logits, Tensor::new(vec![m, n], dz)?)?;
                }
                Op::SoftCrossEntropyMean { logits, targets } => {
                    let zv = self.value(*logits);
                    let (m, n) = (zv.rows(), zv.cols());
                    let scale = g_out.item()? / m as f64;
                    let mut dz = vec![0.0; m * n];
                    for i in 0..m {
                        let p = softmax_slice(zv.row(i));
                        let t = targets.row(i);
                        let t_sum: f64 = t.iter().sum();
                        for j in 0..n {
                            dz[i * n + j] = scale * (t_sum * p[j] - t[j]);
                        }
                    }
                    accumulate(&mut grads, *logits, Tensor::new(vec![m, n], dz)?)?;
                }
                Op::FocalMean {
                    logits,
                    labels,
                    gamma,
                } => {
                    let zv = self.value(*logits);
                    let (m, n) = (zv.rows(), zv.cols());
                    let scale = g_out.item()? / m as f64;
                    let mut dz = vec![0.0; m * n];
                    for i in 0..m {
                        let p = softmax_slice(zv.row(i));
                        let y = labels[i];
                        let py = p[y];
                        let ce = neg_log_softmax_at(zv.row(i), y);
                        let one_minus = (1.0 - py).max(PROB_FLOOR);
                        // d/dz [(1-p_y)^g * ce] = (1-p_y)^(g-1) ((1-p_y) + g p_y ce) (p - e_y)
                        let mult = one_minus.powf(gamma - 1.0) * (one_minus + gamma * py * ce);
                        for j in 0..n {
                            let e = if j == y { 1.0 } else { 0.0 };
                            dz[i * n + j] = scale * mult * (p[j] - e);
                        }
                    }
                    accumulate(&mut grads, *logits, Tensor::new(vec![m, n], dz)?)?;
                }
                Op::NllMean { probs, labels } => {
                    let pv = self.value(*probs);
                    let (m, n) = (pv.rows(), pv.cols());
                    let scale = g_out.item()? / m as f64;
                    let mut dp = vec![0.0; m * n];
                    for i in 0..m {
                        let p = pv.row(i)[labels[i]];
                        if p >= PROB_FLOOR {
                            dp[i * n + labels[i]] = -scale / p;
                        }
                    }
                    accumulate(&mut grads, *probs, Tensor::new(vec![m, n], dp)?)?;
                }
                Op::L1Mean { x, target } => {
                    let xv = self.value(*x);
                    let scale = g_out.item()? / xv.rows() as f64;
                    let dx: Vec<f64> = xv
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(a, b)| scale * (a - b).signum())
                        .collect();
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx)?)?;
                }
                Op::L2Mean { x, target } => {
                    let xv = self.value(*x);
                    let scale = g_out.item()? / xv.rows() as f64;
                    let dx: Vec<f64> = xv
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(a, b)| scale * 2.0 * (a - b))
                        .collect();
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx)?)?;
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) -> Result<()> {
    match &grads[id] {
        Some(existing) => {
            grads[id] = Some(existing.add(&g)?);
        }
        None => grads[id] = Some(g),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(x), Err(Error::State(_))));
    }

    #[test]
    fn backward_on_empty_graph_is_state_error() {
        let g = Graph::new();
        assert!(matches!(g.backward(0), Err(Error::State(_))));
    }

    #[test]
    fn sum_gradient_is_ones() {
        // loss = mean over 1 row of sum|x - 0| with x > 0 is sum(x).
        let mut g = Graph::new();
        let x = g
            .input(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap())
            .unwrap();
        let loss = g.l1_mean(x, Tensor::zeros(vec![1, 3])).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x, &g).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn cross_entropy_gradient_matches_p_minus_y() {
        let mut g = Graph::new();
        let z = g
            .input(Tensor::new(vec![1, 3], vec![0.2, -0.4, 1.1]).unwrap())
            .unwrap();
        let loss = g.cross_entropy_mean(z, vec![2]).unwrap();
        let grads = g.backward(loss).unwrap();
        let p = softmax_slice(&[0.2, -0.4, 1.1]);
        let got = grads.get(z, &g);
        assert!((got.data()[0] - p[0]).abs() < 1e-12);
        assert!((got.data()[1] - p[1]).abs() < 1e-12);
        assert!((got.data()[2] - (p[2] - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn priming_gradient_equals_kl_gradient() {
        // d/dz of -sum t_j log softmax(z)_j is softmax(z) - t when t sums
        // to one, which is also the gradient of KL(t || softmax(z)).
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let k = 5;
            let z: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mut t: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
            let s: f64 = t.iter().sum();
            t.iter_mut().for_each(|v| *v /= s);

            let mut g = Graph::new();
            let zn = g.input(Tensor::new(vec![1, k], z.clone()).unwrap()).unwrap();
            let loss = g
                .soft_cross_entropy_mean(zn, Tensor::new(vec![1, k], t.clone()).unwrap())
                .unwrap();
            let grads = g.backward(loss).unwrap();
            let got = grads.get(zn, &g);

            let p = softmax_slice(&z);
            for j in 0..k {
                let expect = p[j] - t[j];
                assert!(
                    (got.data()[j] - expect).abs() < 1e-10,
                    "coord {j}: {} vs {expect}",
                    got.data()[j]
                );
            }
        }
    }

    #[test]
    fn relu_masks_gradient() {
        let mut g = Graph::new();
        let x = g
            .input(Tensor::new(vec![1, 2], vec![-1.0, 2.0]).unwrap())
            .unwrap();
        let r = g.relu(x);
        let loss = g.l1_mean(r, Tensor::zeros(vec![1, 2])).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x, &g).data(), &[0.0, 1.0]);
    }

    #[test]
    fn matmul_gradients() {
        // loss = sum(A @ B): dA = ones @ B^T, dB = A^T @ ones.
        let mut g = Graph::new();
        let a = g
            .input(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap())
            .unwrap();
        let b = g
            .input(Tensor::new(vec![2, 2], vec![0.5, 0.3, 0.7, 0.1]).unwrap())
            .unwrap();
        let y = g.matmul(a, b).unwrap();
        let loss = g.l1_mean(y, Tensor::zeros(vec![1, 2])).unwrap();
        let grads = g.backward(loss).unwrap();
        let da = grads.get(a, &g);
        assert!((da.data()[0] - 0.8).abs() < 1e-12);
        assert!((da.data()[1] - 0.8).abs() < 1e-12);
        let db = grads.get(b, &g);
        assert_eq!(db.data(), &[1.0, 1.0, 2.0, 2.0]);
    }
}
