use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use super::Tensor;
use crate::{Error, Result};

/// Nonlinearity applied by [`Graph::dense`] after the branch sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu,
    Tanh,
}

const LEAKY_SLOPE: f64 = 0.01;

impl Activation {
    fn apply(self, pre: f64) -> f64 {
        match self {
            Activation::Identity => pre,
            Activation::Relu => pre.max(0.0),
            Activation::LeakyRelu => {
                if pre > 0.0 {
                    pre
                } else {
                    LEAKY_SLOPE * pre
                }
            }
            Activation::Tanh => pre.tanh(),
        }
    }

    fn prime(self, pre: f64, out: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu => {
                if pre > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Tanh => 1.0 - out * out,
        }
    }
}

enum Op {
    /// out = act(W x + M x + b), batched over rows of x.
    Dense {
        x: Tensor,
        w: Tensor,
        m: Option<Tensor>,
        b: Tensor,
        act: Activation,
        pre: Vec<f64>,
        batch: usize,
        in_dim: usize,
        out_dim: usize,
    },
    /// Dense matrix from a packed value vector: out[idx[i]] = src[i], zero elsewhere.
    Scatter { src: Tensor, indices: Rc<Vec<usize>>, },
    /// out = prev with the listed coordinates overwritten from sparse.
    /// Untouched coordinates are copied bitwise.
    SelectOverwrite { prev: Tensor, sparse: Tensor, ones: Rc<Vec<usize>> },
    /// Row softmax of a vector.
    Softmax { x: Tensor },
    LogSoftmax { x: Tensor },
    /// Mean negative log-likelihood of softmaxed logits at the target column.
    CrossEntropy { logits: Tensor, targets: Vec<usize>, probs: Vec<f64>, classes: usize },
    Pick { x: Tensor, index: usize },
    Add { a: Tensor, b: Tensor },
    Sub { a: Tensor, b: Tensor },
    Mul { a: Tensor, b: Tensor },
    Scale { x: Tensor, c: f64 },
    Square { x: Tensor },
    Sum { x: Tensor },
    Mean { x: Tensor },
}

struct Node {
    op: Op,
    out: Tensor,
}

/// A Wengert tape. Ops are recorded in forward order whenever an input
/// requires gradients; [`Graph::backward`] replays them in reverse.
/// [`Graph::truncate`] empties the record, after which backward is a state
/// error until new ops are recorded.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    live: Cell<bool>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: RefCell::new(Vec::new()), live: Cell::new(false) }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_live(&self) -> bool {
        self.live.get()
    }

    /// Drop the recorded history. Leaf parameters keep their values;
    /// intermediates are released with the nodes that held them.
    pub fn truncate(&self) {
        self.nodes.borrow_mut().clear();
        self.live.set(false);
    }

    fn push(&self, op: Op, out: &Tensor) {
        self.nodes.borrow_mut().push(Node { op, out: out.clone() });
        self.live.set(true);
    }

    /// Record `out = op(inputs)` only when some input tracks gradients.
    fn finish(&self, op: Op, values: Vec<f64>, shape: &[usize], tracked: bool) -> Tensor {
        let out = Tensor::intermediate(values, shape, tracked);
        if tracked {
            self.push(op, &out);
        }
        out
    }

    /// Fused dense layer: `act(W x + M x + b)`.
    ///
    /// `x` is a vector of length `in_dim` or a `batch x in_dim` matrix; `w`
    /// and the optional fast-weight matrix `m` are `out_dim x in_dim`; `b` has
    /// length `out_dim`. The two branch products are summed before the
    /// nonlinearity.
    pub fn dense(
        &self,
        x: &Tensor,
        w: &Tensor,
        m: Option<&Tensor>,
        b: &Tensor,
        act: Activation,
    ) -> Result<Tensor> {
        let (batch, in_dim, vector_input) = match x.shape() {
            [n] => (1usize, *n, true),
            [bsz, n] => (*bsz, *n, false),
            other => {
                return Err(Error::dim("dense", format!("input must be 1-D or 2-D, got {other:?}")))
            }
        };
        let (out_dim, w_in) = match w.shape() {
            [o, i] => (*o, *i),
            other => return Err(Error::dim("dense", format!("weight must be 2-D, got {other:?}"))),
        };
        if w_in != in_dim {
            return Err(Error::dim(
                "dense",
                format!("weight {:?} vs input {:?}", w.shape(), x.shape()),
            ));
        }
        if let Some(m) = m {
            if m.shape() != w.shape() {
                return Err(Error::dim(
                    "dense",
                    format!("fast-weight {:?} vs weight {:?}", m.shape(), w.shape()),
                ));
            }
        }
        if b.shape() != [out_dim] {
            return Err(Error::dim(
                "dense",
                format!("bias {:?} vs weight {:?}", b.shape(), w.shape()),
            ));
        }

        let xv = x.values();
        let wv = w.values();
        let bv = b.values();
        let mut pre = vec![0.0; batch * out_dim];
        for bi in 0..batch {
            let xrow = &xv[bi * in_dim..(bi + 1) * in_dim];
            for o in 0..out_dim {
                let wrow = &wv[o * in_dim..(o + 1) * in_dim];
                let mut acc = bv[o];
                for i in 0..in_dim {
                    acc += wrow[i] * xrow[i];
                }
                pre[bi * out_dim + o] = acc;
            }
        }
        if let Some(m) = m {
            let mv = m.values();
            for bi in 0..batch {
                let xrow = &xv[bi * in_dim..(bi + 1) * in_dim];
                for o in 0..out_dim {
                    let mrow = &mv[o * in_dim..(o + 1) * in_dim];
                    let mut acc = 0.0;
                    for i in 0..in_dim {
                        acc += mrow[i] * xrow[i];
                    }
                    pre[bi * out_dim + o] += acc;
                }
            }
        }
        let values: Vec<f64> = pre.iter().map(|&p| act.apply(p)).collect();
        drop((xv, wv, bv));

        let tracked = x.requires_grad()
            || w.requires_grad()
            || b.requires_grad()
            || m.map_or(false, |m| m.requires_grad());
        let shape: Vec<usize> = if vector_input { vec![out_dim] } else { vec![batch, out_dim] };
        let op = Op::Dense {
            x: x.clone(),
            w: w.clone(),
            m: m.cloned(),
            b: b.clone(),
            act,
            pre,
            batch,
            in_dim,
            out_dim,
        };
        Ok(self.finish(op, values, &shape, tracked))
    }

    /// Spread a packed value vector into a zero tensor of `shape` at the given
    /// flat indices. Used to place sparsely generated values into a dense
    /// matrix without evaluating anything at the untouched coordinates.
    pub fn scatter(&self, src: &Tensor, indices: Rc<Vec<usize>>, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if src.numel() != indices.len() {
            return Err(Error::dim(
                "scatter",
                format!("{} values for {} indices", src.numel(), indices.len()),
            ));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= numel) {
            return Err(Error::dim("scatter", format!("index {bad} out of {numel}")));
        }
        let mut values = vec![0.0; numel];
        {
            let sv = src.values();
            for (k, &idx) in indices.iter().enumerate() {
                values[idx] = sv[k];
            }
        }
        let tracked = src.requires_grad();
        Ok(self.finish(Op::Scatter { src: src.clone(), indices }, values, shape, tracked))
    }

    /// Coordinate select: output copies `prev` bitwise except at the listed
    /// coordinates, which are taken from `sparse`.
    pub fn select_overwrite(
        &self,
        prev: &Tensor,
        sparse: &Tensor,
        ones: Rc<Vec<usize>>,
    ) -> Result<Tensor> {
        if prev.shape() != sparse.shape() {
            return Err(Error::dim(
                "select_overwrite",
                format!("{:?} vs {:?}", prev.shape(), sparse.shape()),
            ));
        }
        let mut values = prev.to_vec();
        {
            let sv = sparse.values();
            for &idx in ones.iter() {
                values[idx] = sv[idx];
            }
        }
        let shape = prev.shape().to_vec();
        let tracked = prev.requires_grad() || sparse.requires_grad();
        let op = Op::SelectOverwrite { prev: prev.clone(), sparse: sparse.clone(), ones };
        Ok(self.finish(op, values, &shape, tracked))
    }

    pub fn softmax(&self, x: &Tensor) -> Result<Tensor> {
        let n = vector_len("softmax", x)?;
        let values = softmax_slice(&x.values());
        Ok(self.finish(Op::Softmax { x: x.clone() }, values, &[n], x.requires_grad()))
    }

    pub fn log_softmax(&self, x: &Tensor) -> Result<Tensor> {
        let n = vector_len("log_softmax", x)?;
        let xv = x.values();
        let max = xv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = xv.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        let values: Vec<f64> = xv.iter().map(|v| v - lse).collect();
        drop(xv);
        Ok(self.finish(Op::LogSoftmax { x: x.clone() }, values, &[n], x.requires_grad()))
    }

    /// Mean cross-entropy of row-softmaxed logits against integer targets.
    pub fn cross_entropy_mean(&self, logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
        let (batch, classes) = match logits.shape() {
            [b, c] => (*b, *c),
            [c] => (1, *c),
            other => {
                return Err(Error::dim("cross_entropy", format!("logits must be 2-D, got {other:?}")))
            }
        };
        if targets.len() != batch {
            return Err(Error::dim(
                "cross_entropy",
                format!("{} targets for batch {batch}", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::dim("cross_entropy", format!("target {bad} out of {classes}")));
        }
        let lv = logits.values();
        let mut probs = vec![0.0; batch * classes];
        let mut total = 0.0;
        for bi in 0..batch {
            let row = &lv[bi * classes..(bi + 1) * classes];
            let p = softmax_slice(row);
            total -= p[targets[bi]].max(f64::MIN_POSITIVE).ln();
            probs[bi * classes..(bi + 1) * classes].copy_from_slice(&p);
        }
        drop(lv);
        let loss = total / batch as f64;
        let op = Op::CrossEntropy {
            logits: logits.clone(),
            targets: targets.to_vec(),
            probs,
            classes,
        };
        Ok(self.finish(op, vec![loss], &[1], logits.requires_grad()))
    }

    /// One element of a vector as a scalar tensor.
    pub fn pick(&self, x: &Tensor, index: usize) -> Result<Tensor> {
        if index >= x.numel() {
            return Err(Error::dim("pick", format!("index {index} out of {}", x.numel())));
        }
        let v = x.values()[index];
        Ok(self.finish(Op::Pick { x: x.clone(), index }, vec![v], &[1], x.requires_grad()))
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.zip("add", a, b, |x, y| x + y)
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.zip("sub", a, b, |x, y| x - y)
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.zip("mul", a, b, |x, y| x * y)
    }

    fn zip(&self, name: &'static str, a: &Tensor, b: &Tensor, f: fn(f64, f64) -> f64) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::dim(name, format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let values: Vec<f64> = a.values().iter().zip(b.values().iter()).map(|(&x, &y)| f(x, y)).collect();
        let shape = a.shape().to_vec();
        let tracked = a.requires_grad() || b.requires_grad();
        let op = match name {
            "add" => Op::Add { a: a.clone(), b: b.clone() },
            "sub" => Op::Sub { a: a.clone(), b: b.clone() },
            _ => Op::Mul { a: a.clone(), b: b.clone() },
        };
        Ok(self.finish(op, values, &shape, tracked))
    }

    pub fn scale(&self, x: &Tensor, c: f64) -> Result<Tensor> {
        let values: Vec<f64> = x.values().iter().map(|&v| c * v).collect();
        let shape = x.shape().to_vec();
        Ok(self.finish(Op::Scale { x: x.clone(), c }, values, &shape, x.requires_grad()))
    }

    pub fn square(&self, x: &Tensor) -> Result<Tensor> {
        let values: Vec<f64> = x.values().iter().map(|&v| v * v).collect();
        let shape = x.shape().to_vec();
        Ok(self.finish(Op::Square { x: x.clone() }, values, &shape, x.requires_grad()))
    }

    pub fn sum(&self, x: &Tensor) -> Result<Tensor> {
        let total: f64 = x.values().iter().sum();
        Ok(self.finish(Op::Sum { x: x.clone() }, vec![total], &[1], x.requires_grad()))
    }

    pub fn mean(&self, x: &Tensor) -> Result<Tensor> {
        let n = x.numel().max(1) as f64;
        let total: f64 = x.values().iter().sum();
        Ok(self.finish(Op::Mean { x: x.clone() }, vec![total / n], &[1], x.requires_grad()))
    }

    /// Sum a list of scalar tensors.
    pub fn add_scalars(&self, parts: &[Tensor]) -> Result<Tensor> {
        let mut acc = parts
            .first()
            .cloned()
            .ok_or_else(|| Error::dim("add_scalars", "empty list".to_string()))?;
        for p in &parts[1..] {
            acc = self.add(&acc, p)?;
        }
        Ok(acc)
    }

    /// Reverse sweep from a scalar loss. Gradients of every tensor recorded on
    /// the tape are reset first, then accumulated additively, so a parameter
    /// used n times receives the sum of its n path gradients.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if !self.live.get() {
            return Err(Error::DeadTape);
        }
        if loss.numel() != 1 {
            return Err(Error::dim("backward", format!("loss has shape {:?}", loss.shape())));
        }

        let nodes = self.nodes.borrow();
        let mut seen = HashSet::new();
        for node in nodes.iter() {
            for t in node_tensors(node) {
                if seen.insert(t.id()) {
                    t.zero_grad();
                }
            }
        }
        loss.seed_grad(vec![1.0]);

        for node in nodes.iter().rev() {
            let Some(g) = node.out.grad() else { continue };
            backprop(node, &g);
        }
        Ok(())
    }
}

fn vector_len(op: &'static str, x: &Tensor) -> Result<usize> {
    match x.shape() {
        [n] => Ok(*n),
        other => Err(Error::dim(op, format!("expected vector, got {other:?}"))),
    }
}

fn softmax_slice(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}

fn node_tensors(node: &Node) -> Vec<&Tensor> {
    let mut ts = vec![&node.out];
    match &node.op {
        Op::Dense { x, w, m, b, .. } => {
            ts.extend([x, w, b]);
            if let Some(m) = m {
                ts.push(m);
            }
        }
        Op::Scatter { src, .. } => ts.push(src),
        Op::SelectOverwrite { prev, sparse, .. } => ts.extend([prev, sparse]),
        Op::Softmax { x } | Op::LogSoftmax { x } => ts.push(x),
        Op::CrossEntropy { logits, .. } => ts.push(logits),
        Op::Pick { x, .. } => ts.push(x),
        Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => ts.extend([a, b]),
        Op::Scale { x, .. } | Op::Square { x } | Op::Sum { x } | Op::Mean { x } => ts.push(x),
    }
    ts
}

fn backprop(node: &Node, g: &[f64]) {
    match &node.op {
        Op::Dense { x, w, m, b, act, pre, batch, in_dim, out_dim } => {
            let (batch, in_dim, out_dim) = (*batch, *in_dim, *out_dim);
            let out_v = node.out.values();
            let mut dpre = vec![0.0; batch * out_dim];
            for idx in 0..batch * out_dim {
                dpre[idx] = g[idx] * act.prime(pre[idx], out_v[idx]);
            }
            drop(out_v);

            let xv = x.values();
            if w.requires_grad() || m.as_ref().map_or(false, |m| m.requires_grad()) {
                let mut dw = vec![0.0; out_dim * in_dim];
                for bi in 0..batch {
                    let xrow = &xv[bi * in_dim..(bi + 1) * in_dim];
                    for o in 0..out_dim {
                        let d = dpre[bi * out_dim + o];
                        if d == 0.0 {
                            continue;
                        }
                        let drow = &mut dw[o * in_dim..(o + 1) * in_dim];
                        for i in 0..in_dim {
                            drow[i] += d * xrow[i];
                        }
                    }
                }
                if w.requires_grad() {
                    w.accumulate_grad(&dw);
                }
                if let Some(m) = m {
                    if m.requires_grad() {
                        m.accumulate_grad(&dw);
                    }
                }
            }
            if b.requires_grad() {
                let mut db = vec![0.0; out_dim];
                for bi in 0..batch {
                    for o in 0..out_dim {
                        db[o] += dpre[bi * out_dim + o];
                    }
                }
                b.accumulate_grad(&db);
            }
            if x.requires_grad() {
                let wv = w.values();
                let mut dx = vec![0.0; batch * in_dim];
                for bi in 0..batch {
                    for o in 0..out_dim {
                        let d = dpre[bi * out_dim + o];
                        if d == 0.0 {
                            continue;
                        }
                        let wrow = &wv[o * in_dim..(o + 1) * in_dim];
                        let dxrow = &mut dx[bi * in_dim..(bi + 1) * in_dim];
                        for i in 0..in_dim {
                            dxrow[i] += d * wrow[i];
                        }
                    }
                }
                if let Some(m) = m {
                    let mv = m.values();
                    for bi in 0..batch {
                        for o in 0..out_dim {
                            let d = dpre[bi * out_dim + o];
                            if d == 0.0 {
                                continue;
                            }
                            let mrow = &mv[o * in_dim..(o + 1) * in_dim];
                            let dxrow = &mut dx[bi * in_dim..(bi + 1) * in_dim];
                            for i in 0..in_dim {
                                dxrow[i] += d * mrow[i];
                            }
                        }
                    }
                }
                x.accumulate_grad(&dx);
            }
        }
        Op::Scatter { src, indices } => {
            if src.requires_grad() {
                let dsrc: Vec<f64> = indices.iter().map(|&idx| g[idx]).collect();
                src.accumulate_grad(&dsrc);
            }
        }
        Op::SelectOverwrite { prev, sparse, ones } => {
            if prev.requires_grad() {
                let mut dprev = g.to_vec();
                for &idx in ones.iter() {
                    dprev[idx] = 0.0;
                }
                prev.accumulate_grad(&dprev);
            }
            if sparse.requires_grad() {
                let mut dsparse = vec![0.0; g.len()];
                for &idx in ones.iter() {
                    dsparse[idx] = g[idx];
                }
                sparse.accumulate_grad(&dsparse);
            }
        }
        Op::Softmax { x } => {
            if x.requires_grad() {
                let p = node.out.values();
                let dot: f64 = g.iter().zip(p.iter()).map(|(&gi, &pi)| gi * pi).sum();
                let dx: Vec<f64> = g.iter().zip(p.iter()).map(|(&gi, &pi)| pi * (gi - dot)).collect();
                drop(p);
                x.accumulate_grad(&dx);
            }
        }
        Op::LogSoftmax { x } => {
            if x.requires_grad() {
                let out = node.out.values();
                let gsum: f64 = g.iter().sum();
                let dx: Vec<f64> =
                    g.iter().zip(out.iter()).map(|(&gi, &oi)| gi - oi.exp() * gsum).collect();
                drop(out);
                x.accumulate_grad(&dx);
            }
        }
        Op::CrossEntropy { logits, targets, probs, classes } => {
            if logits.requires_grad() {
                let batch = targets.len();
                let scale = g[0] / batch as f64;
                let mut dl = vec![0.0; batch * classes];
                for bi in 0..batch {
                    for c in 0..*classes {
                        let indicator = if c == targets[bi] { 1.0 } else { 0.0 };
                        dl[bi * classes + c] = scale * (probs[bi * classes + c] - indicator);
                    }
                }
                logits.accumulate_grad(&dl);
            }
        }
        Op::Pick { x, index } => {
            if x.requires_grad() {
                let mut dx = vec![0.0; x.numel()];
                dx[*index] = g[0];
                x.accumulate_grad(&dx);
            }
        }
        Op::Add { a, b } => {
            if a.requires_grad() {
                a.accumulate_grad(g);
            }
            if b.requires_grad() {
                b.accumulate_grad(g);
            }
        }
        Op::Sub { a, b } => {
            if a.requires_grad() {
                a.accumulate_grad(g);
            }
            if b.requires_grad() {
                let neg: Vec<f64> = g.iter().map(|&v| -v).collect();
                b.accumulate_grad(&neg);
            }
        }
        Op::Mul { a, b } => {
            if a.requires_grad() {
                let da: Vec<f64> = g.iter().zip(b.values().iter()).map(|(&gi, &bi)| gi * bi).collect();
                a.accumulate_grad(&da);
            }
            if b.requires_grad() {
                let db: Vec<f64> = g.iter().zip(a.values().iter()).map(|(&gi, &ai)| gi * ai).collect();
                b.accumulate_grad(&db);
            }
        }
        Op::Scale { x, c } => {
            if x.requires_grad() {
                let dx: Vec<f64> = g.iter().map(|&v| c * v).collect();
                x.accumulate_grad(&dx);
            }
        }
        Op::Square { x } => {
            if x.requires_grad() {
                let dx: Vec<f64> =
                    g.iter().zip(x.values().iter()).map(|(&gi, &xi)| 2.0 * xi * gi).collect();
                x.accumulate_grad(&dx);
            }
        }
        Op::Sum { x } => {
            if x.requires_grad() {
                let dx = vec![g[0]; x.numel()];
                x.accumulate_grad(&dx);
            }
        }
        Op::Mean { x } => {
            if x.requires_grad() {
                let dx = vec![g[0] / x.numel() as f64; x.numel()];
                x.accumulate_grad(&dx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn dense_identity_case() {
        let g = Graph::new();
        let w = Tensor::param("w", vec![1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let m = Tensor::zeros(&[2, 2]);
        let b = Tensor::zeros(&[2]);
        let x = Tensor::constant(vec![3.0, -1.0], &[2]);
        let y = g.dense(&x, &w, Some(&m), &b, Activation::Identity).unwrap();
        assert_eq!(y.to_vec(), vec![3.0, -1.0]);
    }

    #[test]
    fn dense_all_zero_relu_outputs_zero() {
        let g = Graph::new();
        let w = Tensor::param("w", vec![0.0; 6], &[2, 3]);
        let m = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2]);
        let x = Tensor::constant(vec![0.7, -2.0, 5.0], &[3]);
        let y = g.dense(&x, &w, Some(&m), &b, Activation::Relu).unwrap();
        assert_eq!(y.to_vec(), vec![0.0, 0.0]);
    }

    // Independent dense oracle: naive matrix-vector product coded separately
    // from the engine kernel.
    fn dense_oracle(x: &[f64], w: &[f64], m: &[f64], b: &[f64], out: usize, inp: usize) -> Vec<f64> {
        (0..out)
            .map(|o| {
                let mut acc = b[o];
                for i in 0..inp {
                    acc += (w[o * inp + i] + m[o * inp + i]) * x[i];
                }
                acc
            })
            .collect()
    }

    #[test]
    fn dense_matches_matmul_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (out, inp) = (3, 4);
        let wv = rand_vec(&mut rng, out * inp);
        let mv = rand_vec(&mut rng, out * inp);
        let bv = rand_vec(&mut rng, out);
        let xv = rand_vec(&mut rng, inp);
        let g = Graph::new();
        let w = Tensor::param("w", wv.clone(), &[out, inp]);
        let m = Tensor::constant(mv.clone(), &[out, inp]);
        let b = Tensor::param("b", bv.clone(), &[out]);
        let x = Tensor::constant(xv.clone(), &[inp]);
        let y = g.dense(&x, &w, Some(&m), &b, Activation::Identity).unwrap();
        let want = dense_oracle(&xv, &wv, &mv, &bv, out, inp);
        for (a, e) in y.to_vec().iter().zip(&want) {
            assert!((a - e).abs() <= 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn backward_linear_grad_is_input() {
        let g = Graph::new();
        let w = Tensor::param("w", vec![0.3, -0.2, 0.9, 0.1, 0.5, -0.7], &[2, 3]);
        let b = Tensor::constant(vec![0.0, 0.0], &[2]);
        let x = Tensor::constant(vec![1.5, -2.0, 0.25], &[3]);
        let y = g.dense(&x, &w, None, &b, Activation::Identity).unwrap();
        let loss = g.sum(&y).unwrap();
        g.backward(&loss).unwrap();
        let gw = w.grad().unwrap();
        for o in 0..2 {
            for i in 0..3 {
                assert_eq!(gw[o * 3 + i], x.to_vec()[i]);
            }
        }
    }

    #[test]
    fn fast_and_slow_weight_gradients_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Graph::new();
        let w = Tensor::param("w", rand_vec(&mut rng, 12), &[3, 4]);
        let m = Tensor::param("m", rand_vec(&mut rng, 12), &[3, 4]);
        let b = Tensor::param("b", rand_vec(&mut rng, 3), &[3]);
        let x = Tensor::constant(rand_vec(&mut rng, 4), &[4]);
        let y = g.dense(&x, &w, Some(&m), &b, Activation::Tanh).unwrap();
        let loss = g.mean(&y).unwrap();
        g.backward(&loss).unwrap();
        assert_eq!(w.grad().unwrap(), m.grad().unwrap());
    }

    /// Central finite differences over one parameter tensor, against a loss
    /// rebuilt from scratch for every probe.
    fn finite_diff(param: &Tensor, eval: &dyn Fn() -> f64, eps: f64) -> Vec<f64> {
        let base = param.to_vec();
        let mut fd = vec![0.0; base.len()];
        for i in 0..base.len() {
            let mut v = base.clone();
            v[i] = base[i] + eps;
            param.set_values(&v);
            let hi = eval();
            v[i] = base[i] - eps;
            param.set_values(&v);
            let lo = eval();
            fd[i] = (hi - lo) / (2.0 * eps);
        }
        param.set_values(&base);
        fd
    }

    #[test]
    fn two_layer_net_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w1 = Tensor::param("w1", rand_vec(&mut rng, 4 * 3), &[4, 3]);
        let b1 = Tensor::param("b1", rand_vec(&mut rng, 4), &[4]);
        let w2 = Tensor::param("w2", rand_vec(&mut rng, 2 * 4), &[2, 4]);
        let b2 = Tensor::param("b2", rand_vec(&mut rng, 2), &[2]);
        let x = Tensor::constant(rand_vec(&mut rng, 3), &[3]);

        let eval = || {
            let g = Graph::new();
            let h = g.dense(&x, &w1, None, &b1, Activation::Tanh).unwrap();
            let y = g.dense(&h, &w2, None, &b2, Activation::Identity).unwrap();
            let sq = g.square(&y).unwrap();
            g.sum(&sq).unwrap().item()
        };

        let g = Graph::new();
        let h = g.dense(&x, &w1, None, &b1, Activation::Tanh).unwrap();
        let y = g.dense(&h, &w2, None, &b2, Activation::Identity).unwrap();
        let sq = g.square(&y).unwrap();
        let loss = g.sum(&sq).unwrap();
        g.backward(&loss).unwrap();

        for p in [&w1, &b1, &w2, &b2] {
            let analytic = p.grad().unwrap();
            let fd = finite_diff(p, &eval, 1e-5);
            for (a, f) in analytic.iter().zip(&fd) {
                let rel = (a - f).abs() / a.abs().max(f.abs()).max(1e-8);
                assert!(rel <= 1e-5, "analytic {a} vs fd {f} (rel {rel})");
            }
        }
    }

    #[test]
    fn duplicated_parameter_accumulates_path_gradients() {
        // y = w·x used twice: loss = sum(wx) + 2·sum(wx)  =>  dw = 3x.
        let g = Graph::new();
        let w = Tensor::param("w", vec![0.5, -0.25], &[1, 2]);
        let b = Tensor::constant(vec![0.0], &[1]);
        let x = Tensor::constant(vec![2.0, 4.0], &[2]);
        let y1 = g.dense(&x, &w, None, &b, Activation::Identity).unwrap();
        let y2 = g.dense(&x, &w, None, &b, Activation::Identity).unwrap();
        let s1 = g.sum(&y1).unwrap();
        let s2 = g.scale(&g.sum(&y2).unwrap(), 2.0).unwrap();
        let loss = g.add(&s1, &s2).unwrap();
        g.backward(&loss).unwrap();
        assert_eq!(w.grad().unwrap(), vec![6.0, 12.0]);
    }

    #[test]
    fn truncate_clears_history_but_not_values() {
        let g = Graph::new();
        let w = Tensor::param("w", vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = Tensor::param("b", vec![0.1, -0.1], &[2]);
        let x = Tensor::constant(vec![1.0, -1.0], &[2]);
        for _ in 0..3 {
            let y = g.dense(&x, &w, None, &b, Activation::Tanh).unwrap();
            let _ = g.sum(&y).unwrap();
        }
        assert!(g.node_count() > 0);
        g.truncate();
        assert_eq!(g.node_count(), 0);
        assert_eq!(w.to_vec(), vec![1.0, 2.0, 3.0, 4.0]);

        // Second truncate is a no-op.
        g.truncate();
        assert_eq!(g.node_count(), 0);

        // Backward on the truncated tape is a state error.
        let loss = Tensor::scalar(1.0);
        assert!(matches!(g.backward(&loss), Err(Error::DeadTape)));

        // A fresh forward starts a fresh tape and matches a fresh engine.
        let y = g.dense(&x, &w, None, &b, Activation::Tanh).unwrap();
        let g2 = Graph::new();
        let y2 = g2.dense(&x, &w, None, &b, Activation::Tanh).unwrap();
        assert_eq!(y.to_vec(), y2.to_vec());
    }

    #[test]
    fn backward_errors_on_non_scalar_loss() {
        let g = Graph::new();
        let w = Tensor::param("w", vec![1.0, 2.0], &[1, 2]);
        let b = Tensor::constant(vec![0.0], &[1]);
        let x = Tensor::constant(vec![1.0, 1.0], &[2]);
        let y = g.dense(&x, &w, None, &b, Activation::Identity).unwrap();
        let two = g.add(&y, &y).unwrap();
        let vec_out = g.add(&two, &y).unwrap();
        // vec_out has shape [1], so make a genuinely non-scalar tensor:
        let wide = g.dense(&x, &Tensor::param("w2", vec![1.0; 4], &[2, 2]), None, &Tensor::zeros(&[2]), Activation::Identity).unwrap();
        assert!(g.backward(&wide).is_err());
        let _ = vec_out;
    }

    #[test]
    fn dense_shape_mismatch_reports_shapes() {
        let g = Graph::new();
        let w = Tensor::param("w", vec![0.0; 6], &[2, 3]);
        let b = Tensor::zeros(&[2]);
        let x = Tensor::constant(vec![1.0, 2.0], &[2]);
        let err = g.dense(&x, &w, None, &b, Activation::Identity).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2]"), "{msg}");
    }

    #[test]
    fn cross_entropy_matches_manual_nll() {
        let g = Graph::new();
        let logits = Tensor::param("l", vec![1.0, 2.0, 0.5, -1.0, 0.0, 3.0], &[2, 3]);
        let loss = g.cross_entropy_mean(&logits, &[1, 2]).unwrap();
        let manual = {
            let rows = [[1.0f64, 2.0, 0.5], [-1.0, 0.0, 3.0]];
            let mut total = 0.0;
            for (row, &t) in rows.iter().zip(&[1usize, 2]) {
                let z: f64 = row.iter().map(|v| v.exp()).sum();
                total -= (row[t].exp() / z).ln();
            }
            total / 2.0
        };
        assert!((loss.item() - manual).abs() <= 1e-12);
    }

    #[test]
    fn log_softmax_and_entropy_terms() {
        let g = Graph::new();
        let logits = Tensor::param("l", vec![0.0; 4], &[4]);
        let p = g.softmax(&logits).unwrap();
        let lp = g.log_softmax(&logits).unwrap();
        let ent = g.scale(&g.sum(&g.mul(&p, &lp).unwrap()).unwrap(), -1.0).unwrap();
        assert!((ent.item() - 4.0f64.ln()).abs() <= 1e-12);
    }

    #[test]
    fn deterministic_trajectories_same_seed() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let w = Tensor::param("w", rand_vec(&mut rng, 6), &[2, 3]);
            let b = Tensor::param("b", rand_vec(&mut rng, 2), &[2]);
            let mut outs = Vec::new();
            for _ in 0..10 {
                let g = Graph::new();
                let x = Tensor::constant(rand_vec(&mut rng, 3), &[3]);
                let y = g.dense(&x, &w, None, &b, Activation::Tanh).unwrap();
                let loss = g.sum(&g.square(&y).unwrap()).unwrap();
                g.backward(&loss).unwrap();
                let gw = w.grad().unwrap();
                let wv: Vec<f64> =
                    w.to_vec().iter().zip(&gw).map(|(v, d)| v - 0.05 * d).collect();
                w.set_values(&wv);
                outs.push(loss.item());
            }
            (w.to_vec(), outs)
        };
        let (w1, o1) = run();
        let (w2, o2) = run();
        assert_eq!(w1, w2);
        assert_eq!(o1, o2);
    }
}
