use super::{Axis, Mask, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    AddScalar(Var),
    Mul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    MaskedSoftmax(Var, Mask),
    MaxPool {
        x: Var,
        axis: Axis,
        mask: Mask,
        argmax: Vec<Option<usize>>,
    },
    AvgPool {
        x: Var,
        axis: Axis,
        mask: Mask,
    },
    ScaleFeatures(Var, Var),
    ScaleTokens(Var, Var),
    ZeroPadding(Var, Mask),
    Gather {
        table: Var,
        ids: Vec<usize>,
        pad: Option<usize>,
    },
    SelectToken(Var, usize),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Records a computation and differentiates it in reverse.
///
/// A tape is built fresh for each forward pass. Gradient buffers exist only
/// for nodes that depend on a leaf created with `requires_grad`.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    kink_margin: f64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            kink_margin: f64::INFINITY,
        }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            grad: requires_grad.then(|| vec![0.0; value.numel()]),
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`, if it participates in differentiation.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// Smallest distance, over everything recorded so far, between a relu
    /// input and zero or between the winner and runner-up of a max pool.
    /// Finite differences are only trustworthy when this is well above the
    /// perturbation size.
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            grad: requires_grad.then(|| vec![0.0; value.numel()]),
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn note_kink(&mut self, distance: f64) {
        if distance < self.kink_margin {
            self.kink_margin = distance;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let (ad, bd) = (av.data(), bv.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = ad[i * k + p];
                for (o, &w) in row.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                    *o += aip * w;
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("add", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    /// Adds a vector along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = *xv.shape().last().unwrap_or(&1);
        if bv.rank() != 1 || bv.shape()[0] != n || xv.rank() == 0 {
            return Err(Error::shape("add_bias", xv.shape(), bv.shape()));
        }
        let data = xv
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(bv.data()).map(|(a, b)| a + b))
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("add_bias", value, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let xv = self.value(x);
        let value = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| v + c).collect())?;
        self.push("add_scalar", value, Op::AddScalar(x), &[x])
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("mul", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let margin = xv.data().iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min);
        let value = Tensor::new(
            xv.shape().to_vec(),
            xv.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
        )?;
        self.note_kink(margin);
        self.push("relu", value, Op::Relu(x), &[x])
    }

    /// Logistic function, clamped so that outputs stay strictly inside (0, 1)
    /// even where `f64` would round to an endpoint.
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let value = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| sigmoid(v)).collect())?;
        self.push("sigmoid", value, Op::Sigmoid(x), &[x])
    }

    /// Row-wise softmax of a `B×L` tensor over the valid positions of `mask`.
    /// Masked positions come out as exactly zero.
    pub fn masked_softmax(&mut self, x: Var, mask: &Mask) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != [mask.batch(), mask.len()] {
            return Err(Error::shape("masked_softmax", xv.shape(), &[mask.batch(), mask.len()]));
        }
        let len = mask.len();
        let mut out = vec![0.0; xv.numel()];
        for b in 0..mask.batch() {
            let row = &xv.data()[b * len..(b + 1) * len];
            let valid = mask.row(b);
            let max = row
                .iter()
                .zip(valid)
                .filter(|(_, &ok)| ok)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[b * len..(b + 1) * len];
            let mut total = 0.0;
            for l in 0..len {
                if valid[l] {
                    dst[l] = (row[l] - max).exp();
                    total += dst[l];
                }
            }
            for l in 0..len {
                if valid[l] {
                    dst[l] /= total;
                }
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push("masked_softmax", value, Op::MaskedSoftmax(x, mask.clone()), &[x])
    }

    /// Max over tokens (`B×D` out, padding ignored) or over features
    /// (`B×L` out, zero at padding).
    pub fn masked_max_pool(&mut self, x: Var, mask: &Mask, axis: Axis) -> Result<Var> {
        let (bsz, len, dim) = self.check_btd("masked_max_pool", x, mask)?;
        let data = self.value(x).data();
        let mut margin = f64::INFINITY;
        let (shape, out, argmax) = match axis {
            Axis::Token => {
                let mut out = vec![0.0; bsz * dim];
                let mut argmax = vec![None; bsz * dim];
                for b in 0..bsz {
                    for d in 0..dim {
                        let mut best: Option<(usize, f64)> = None;
                        let mut second = f64::NEG_INFINITY;
                        for l in (0..len).filter(|&l| mask.is_valid(b, l)) {
                            let v = data[(b * len + l) * dim + d];
                            match best {
                                Some((_, bv)) if v <= bv => second = second.max(v),
                                Some((_, bv)) => {
                                    second = bv;
                                    best = Some((l, v));
                                }
                                None => best = Some((l, v)),
                            }
                        }
                        let (l, v) = best.expect("mask rows are never empty");
                        out[b * dim + d] = v;
                        argmax[b * dim + d] = Some(l);
                        margin = margin.min(v - second);
                    }
                }
                (vec![bsz, dim], out, argmax)
            }
            Axis::Feature => {
                let mut out = vec![0.0; bsz * len];
                let mut argmax = vec![None; bsz * len];
                for b in 0..bsz {
                    for l in (0..len).filter(|&l| mask.is_valid(b, l)) {
                        let row = &data[(b * len + l) * dim..(b * len + l + 1) * dim];
                        let mut best = (0, row[0]);
                        let mut second = f64::NEG_INFINITY;
                        for (d, &v) in row.iter().enumerate().skip(1) {
                            if v > best.1 {
                                second = best.1;
                                best = (d, v);
                            } else {
                                second = second.max(v);
                            }
                        }
                        out[b * len + l] = best.1;
                        argmax[b * len + l] = Some(best.0);
                        margin = margin.min(best.1 - second);
                    }
                }
                (vec![bsz, len], out, argmax)
            }
        };
        let value = Tensor::new(shape, out)?;
        self.note_kink(margin);
        let op = Op::MaxPool {
            x,
            axis,
            mask: mask.clone(),
            argmax,
        };
        self.push("masked_max_pool", value, op, &[x])
    }

    /// Mean over valid tokens (`B×D` out, divided by the valid count) or over
    /// features (`B×L` out, zero at padding).
    pub fn masked_avg_pool(&mut self, x: Var, mask: &Mask, axis: Axis) -> Result<Var> {
        let (bsz, len, dim) = self.check_btd("masked_avg_pool", x, mask)?;
        let data = self.value(x).data();
        let (shape, out) = match axis {
            Axis::Token => {
                let mut out = vec![0.0; bsz * dim];
                for b in 0..bsz {
                    let dst = &mut out[b * dim..(b + 1) * dim];
                    for l in (0..len).filter(|&l| mask.is_valid(b, l)) {
                        let row = &data[(b * len + l) * dim..(b * len + l + 1) * dim];
                        for (o, v) in dst.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    let count = mask.valid_count(b) as f64;
                    dst.iter_mut().for_each(|o| *o /= count);
                }
                (vec![bsz, dim], out)
            }
            Axis::Feature => {
                let mut out = vec![0.0; bsz * len];
                for b in 0..bsz {
                    for l in (0..len).filter(|&l| mask.is_valid(b, l)) {
                        let row = &data[(b * len + l) * dim..(b * len + l + 1) * dim];
                        out[b * len + l] = row.iter().sum::<f64>() / dim as f64;
                    }
                }
                (vec![bsz, len], out)
            }
        };
        let value = Tensor::new(shape, out)?;
        let op = Op::AvgPool {
            x,
            axis,
            mask: mask.clone(),
        };
        self.push("masked_avg_pool", value, op, &[x])
    }

    fn check_btd(&self, op: &'static str, x: Var, mask: &Mask) -> Result<(usize, usize, usize)> {
        let shape = self.shape(x);
        if shape.len() != 3 || shape[0] != mask.batch() || shape[1] != mask.len() {
            return Err(Error::shape(op, shape, &[mask.batch(), mask.len()]));
        }
        Ok((shape[0], shape[1], shape[2]))
    }

    /// `out[b,l,d] = weights[b,d] * x[b,l,d]`.
    pub fn scale_features(&mut self, x: Var, weights: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(weights));
        let s = xv.shape();
        if s.len() != 3 || wv.shape() != [s[0], s[2]] {
            return Err(Error::shape("scale_features", s, wv.shape()));
        }
        let (len, dim) = (s[1], s[2]);
        let w = wv.data();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| w[(i / (len * dim)) * dim + i % dim] * v)
            .collect();
        let value = Tensor::new(s.to_vec(), data)?;
        self.push("scale_features", value, Op::ScaleFeatures(x, weights), &[x, weights])
    }

    /// `out[b,l,d] = weights[b,l] * x[b,l,d]`.
    pub fn scale_tokens(&mut self, x: Var, weights: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(weights));
        let s = xv.shape();
        if s.len() != 3 || wv.shape() != [s[0], s[1]] {
            return Err(Error::shape("scale_tokens", s, wv.shape()));
        }
        let dim = s[2];
        let w = wv.data();
        let data = xv.data().iter().enumerate().map(|(i, v)| w[i / dim] * v).collect();
        let value = Tensor::new(s.to_vec(), data)?;
        self.push("scale_tokens", value, Op::ScaleTokens(x, weights), &[x, weights])
    }

    /// Overwrites the rows of masked positions with zeros.
    pub fn zero_padding(&mut self, x: Var, mask: &Mask) -> Result<Var> {
        let (_, _, dim) = self.check_btd("zero_padding", x, mask)?;
        let xv = self.value(x);
        let mut data = xv.data().to_vec();
        for (row, chunk) in data.chunks_mut(dim).enumerate() {
            if !mask.is_valid(row / mask.len(), row % mask.len()) {
                chunk.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("zero_padding", value, Op::ZeroPadding(x, mask.clone()), &[x])
    }

    /// Row gather from a `V×D` table into `batch×len×D`. Rows whose id equals
    /// `pad` come out as zeros and send no gradient back.
    pub fn gather(&mut self, table: Var, ids: &[usize], batch: usize, len: usize, pad: Option<usize>) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 || ids.len() != batch * len {
            return Err(Error::shape("gather", tv.shape(), &[batch, len]));
        }
        let (vocab, dim) = (tv.shape()[0], tv.shape()[1]);
        if let Some(pos) = ids.iter().position(|&id| id >= vocab) {
            return Err(Error::Data(format!(
                "token id {} at position ({}, {}) is outside a table of {vocab} rows",
                ids[pos],
                pos / len,
                pos % len
            )));
        }
        let mut out = vec![0.0; batch * len * dim];
        for (pos, &id) in ids.iter().enumerate() {
            if Some(id) != pad {
                out[pos * dim..(pos + 1) * dim].copy_from_slice(&tv.data()[id * dim..(id + 1) * dim]);
            }
        }
        let value = Tensor::new(vec![batch, len, dim], out)?;
        let op = Op::Gather {
            table,
            ids: ids.to_vec(),
            pad,
        };
        self.push("gather", value, op, &[table])
    }

    /// `out[b,d] = x[b,index,d]`.
    pub fn select_token(&mut self, x: Var, index: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || index >= s[1] {
            return Err(Error::shape("select_token", &s, &[index]));
        }
        let (bsz, len, dim) = (s[0], s[1], s[2]);
        let xd = self.value(x).data();
        let data = (0..bsz)
            .flat_map(|b| xd[(b * len + index) * dim..(b * len + index + 1) * dim].iter().copied())
            .collect();
        let value = Tensor::new(vec![bsz, dim], data)?;
        self.push("select_token", value, Op::SelectToken(x, index), &[x])
    }

    /// Mean negative log-likelihood of `labels` under a row softmax of `B×K` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.shape()[0] != labels.len() {
            return Err(Error::shape("cross_entropy", lv.shape(), &[labels.len()]));
        }
        let k = lv.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::Data(format!("label {bad} outside [0, {k})")));
        }
        let mut probs = vec![0.0; lv.numel()];
        let mut total = 0.0;
        for (b, row) in lv.data().chunks(k).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + sum.ln();
            total += log_z - row[labels[b]];
            for (p, v) in probs[b * k..(b + 1) * k].iter_mut().zip(row) {
                *p = (v - max).exp() / sum;
            }
        }
        let value = Tensor::scalar(total / labels.len() as f64);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.push("cross_entropy", value, op, &[logits])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push("sum", value, Op::Sum(x), &[x])
    }

    /// Accumulates `d loss / d node` into every participating gradient buffer.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Precondition(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        pending[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            self.propagate(i, &g, &mut pending);
            if let Some(buf) = self.nodes[i].grad.as_mut() {
                buf.iter_mut().zip(&g).for_each(|(b, v)| *b += v);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], pending: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let input = &self.nodes[v.0];
            if input.requires_grad {
                let buf = pending[v.0].get_or_insert_with(|| vec![0.0; input.value.numel()]);
                f(buf);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                acc(*a, &mut |ga| {
                    for i in 0..m {
                        for p in 0..k {
                            let brow = &bv.data()[p * n..(p + 1) * n];
                            ga[i * k + p] += g[i * n..(i + 1) * n].iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..m {
                        for p in 0..k {
                            let aip = av.data()[i * k + p];
                            for (o, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(&g[i * n..(i + 1) * n]) {
                                *o += aip * gv;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::AddBias(x, bias) => {
                acc(*x, &mut |gx| add_into(gx, g));
                acc(*bias, &mut |gb| {
                    let n = gb.len();
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                });
            }
            Op::AddScalar(x) => acc(*x, &mut |gx| add_into(gx, g)),
            Op::Mul(a, b) => {
                let (av, bv) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                acc(*a, &mut |ga| {
                    for ((o, gv), y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gv * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, gv), x) in gb.iter_mut().zip(g).zip(av) {
                        *o += gv * x;
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.nodes[x.0].value.data();
                acc(*x, &mut |gx| {
                    for ((o, gv), v) in gx.iter_mut().zip(g).zip(xv) {
                        if *v > 0.0 {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let out = node.value.data();
                acc(*x, &mut |gx| {
                    for ((o, gv), s) in gx.iter_mut().zip(g).zip(out) {
                        *o += gv * s * (1.0 - s);
                    }
                });
            }
            Op::MaskedSoftmax(x, mask) => {
                let y = node.value.data();
                let len = mask.len();
                acc(*x, &mut |gx| {
                    for b in 0..mask.batch() {
                        let r = b * len..(b + 1) * len;
                        let dot: f64 = y[r.clone()].iter().zip(&g[r.clone()]).map(|(a, c)| a * c).sum();
                        for l in 0..len {
                            if mask.is_valid(b, l) {
                                let at = b * len + l;
                                gx[at] += y[at] * (g[at] - dot);
                            }
                        }
                    }
                });
            }
            Op::MaxPool { x, axis, mask, argmax } => {
                let s = self.nodes[x.0].value.shape();
                let (len, dim) = (s[1], s[2]);
                acc(*x, &mut |gx| match axis {
                    Axis::Token => {
                        for (j, src) in argmax.iter().enumerate() {
                            if let Some(l) = src {
                                let (b, d) = (j / dim, j % dim);
                                gx[(b * len + l) * dim + d] += g[j];
                            }
                        }
                    }
                    Axis::Feature => {
                        for (j, src) in argmax.iter().enumerate() {
                            if let Some(d) = src {
                                if mask.is_valid(j / len, j % len) {
                                    gx[j * dim + d] += g[j];
                                }
                            }
                        }
                    }
                });
            }
            Op::AvgPool { x, axis, mask } => {
                let s = self.nodes[x.0].value.shape();
                let (bsz, len, dim) = (s[0], s[1], s[2]);
                acc(*x, &mut |gx| {
                    for b in 0..bsz {
                        let count = mask.valid_count(b) as f64;
                        for l in (0..len).filter(|&l| mask.is_valid(b, l)) {
                            let row = &mut gx[(b * len + l) * dim..(b * len + l + 1) * dim];
                            match axis {
                                Axis::Token => {
                                    for (o, gv) in row.iter_mut().zip(&g[b * dim..(b + 1) * dim]) {
                                        *o += gv / count;
                                    }
                                }
                                Axis::Feature => {
                                    let share = g[b * len + l] / dim as f64;
                                    row.iter_mut().for_each(|o| *o += share);
                                }
                            }
                        }
                    }
                });
            }
            Op::ScaleFeatures(x, w) => {
                let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                let (len, dim) = (xv.shape()[1], xv.shape()[2]);
                let at = |i: usize| (i / (len * dim)) * dim + i % dim;
                acc(*x, &mut |gx| {
                    for (i, o) in gx.iter_mut().enumerate() {
                        *o += g[i] * wv.data()[at(i)];
                    }
                });
                acc(*w, &mut |gw| {
                    for (i, gv) in g.iter().enumerate() {
                        gw[at(i)] += gv * xv.data()[i];
                    }
                });
            }
            Op::ScaleTokens(x, w) => {
                let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                let dim = xv.shape()[2];
                acc(*x, &mut |gx| {
                    for (i, o) in gx.iter_mut().enumerate() {
                        *o += g[i] * wv.data()[i / dim];
                    }
                });
                acc(*w, &mut |gw| {
                    for (i, gv) in g.iter().enumerate() {
                        gw[i / dim] += gv * xv.data()[i];
                    }
                });
            }
            Op::ZeroPadding(x, mask) => {
                let dim = self.nodes[x.0].value.shape()[2];
                acc(*x, &mut |gx| {
                    for (row, (dst, src)) in gx.chunks_mut(dim).zip(g.chunks(dim)).enumerate() {
                        if mask.is_valid(row / mask.len(), row % mask.len()) {
                            add_into(dst, src);
                        }
                    }
                });
            }
            Op::Gather { table, ids, pad } => {
                let dim = self.nodes[table.0].value.shape()[1];
                acc(*table, &mut |gt| {
                    for (pos, &id) in ids.iter().enumerate() {
                        if Some(id) != *pad {
                            add_into(&mut gt[id * dim..(id + 1) * dim], &g[pos * dim..(pos + 1) * dim]);
                        }
                    }
                });
            }
            Op::SelectToken(x, index) => {
                let s = self.nodes[x.0].value.shape();
                let (len, dim) = (s[1], s[2]);
                acc(*x, &mut |gx| {
                    for (b, src) in g.chunks(dim).enumerate() {
                        add_into(&mut gx[(b * len + index) * dim..(b * len + index + 1) * dim], src);
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let bsz = labels.len();
                let k = probs.len() / bsz;
                let scale = g[0] / bsz as f64;
                acc(*logits, &mut |gl| {
                    for (b, &y) in labels.iter().enumerate() {
                        for c in 0..k {
                            let target = if c == y { 1.0 } else { 0.0 };
                            gl[b * k + c] += scale * (probs[b * k + c] - target);
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0])),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

const SIGMOID_HI: f64 = 1.0 - f64::EPSILON / 2.0;

pub(crate) fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, SIGMOID_HI)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn matmul_identity_and_column_sum() {
        let mut t = Tape::new();
        let i = t.constant(Tensor::eye(2));
        let out = t.matmul(i, i).unwrap();
        assert_eq!(t.value(out), &Tensor::eye(2));

        let a = t.constant(Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
        let ones = t.constant(Tensor::matrix(&[&[1.0], &[1.0]]).unwrap());
        let out = t.matmul(a, ones).unwrap();
        assert_eq!(t.value(out).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 2]));
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn relu_cases() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(&[-1.0, 0.0, 2.0]));
        let y = t.relu(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
        let x = t.constant(Tensor::vector(&[-3.0, -0.5]));
        let y = t.relu(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn relu_gradient_at_three_and_at_zero() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(&[3.0, 0.0]));
        let y = t.relu(x).unwrap();
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 0.0]);
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(0.0), 0.5);
        close(sigmoid(2.0), 1.0 - sigmoid(-2.0), 1e-15);
        close(sigmoid(1.0), 0.731_058_578_630_004_9, 1e-15);
        assert!(sigmoid(800.0) < 1.0);
        assert!(sigmoid(-800.0) > 0.0);
    }

    #[test]
    fn masked_softmax_cases() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(&[&[1.0, 1.0, 1.0]]).unwrap());
        let y = t.masked_softmax(x, &Mask::full(1, 3)).unwrap();
        for &v in t.value(y).data() {
            close(v, 1.0 / 3.0, 1e-15);
        }
        let x = t.constant(Tensor::matrix(&[&[5.0, 9.0]]).unwrap());
        let y = t.masked_softmax(x, &Mask::new(1, 2, &[1, 0]).unwrap()).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 0.0]);
        let x = t.constant(Tensor::matrix(&[&[1.0, 2.0]]).unwrap());
        let y = t.masked_softmax(x, &Mask::full(1, 2)).unwrap();
        close(t.value(y).data()[0], 0.268_941_421_369_995_1, 1e-15);
        close(t.value(y).data()[1], 0.731_058_578_630_004_9, 1e-15);
    }

    #[test]
    fn pooling_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 5.0, 3.0, 2.0]).unwrap());
        let m = Mask::full(1, 2);
        let mx = t.masked_max_pool(x, &m, Axis::Token).unwrap();
        assert_eq!(t.value(mx).data(), &[3.0, 5.0]);

        let x = t.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 5.0, 3.0, 3.0]).unwrap());
        let avg = t.masked_avg_pool(x, &m, Axis::Token).unwrap();
        assert_eq!(t.value(avg).data(), &[2.0, 4.0]);

        let one = Mask::new(1, 2, &[0, 1]).unwrap();
        let mx = t.masked_max_pool(x, &one, Axis::Token).unwrap();
        assert_eq!(t.value(mx).data(), &[3.0, 3.0]);
        let feat = t.masked_max_pool(x, &one, Axis::Feature).unwrap();
        assert_eq!(t.value(feat).data(), &[0.0, 3.0]);
        let feat = t.masked_avg_pool(x, &m, Axis::Feature).unwrap();
        assert_eq!(t.value(feat).data(), &[3.0, 3.0]);
    }

    #[test]
    fn backward_sum_and_square() {
        let mut t = Tape::new();
        let x = t.param(Tensor::zeros(&[2, 3]));
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert!(t.grad(x).unwrap().iter().all(|&g| g == 1.0));

        let mut t = Tape::new();
        let x = t.param(Tensor::vector(&[1.0, 2.0]));
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_accumulates() {
        let mut t = Tape::new();
        let x = t.param(Tensor::vector(&[1.0, 2.0]));
        assert!(matches!(t.backward(x), Err(Error::Precondition(_))));

        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        t.backward(s).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[4.0, 8.0]);
        t.zero_grad();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn gather_skips_pad_and_scatters_gradient() {
        let mut t = Tape::new();
        let table = t.param(Tensor::new(vec![3, 2], vec![9.0, 9.0, 1.0, 2.0, 3.0, 4.0]).unwrap());
        let e = t.gather(table, &[2, 2, 0], 1, 3, Some(0)).unwrap();
        assert_eq!(t.value(e).data(), &[3.0, 4.0, 3.0, 4.0, 0.0, 0.0]);
        let s = t.sum(e).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(table).unwrap(), &[0.0, 0.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(matches!(t.gather(table, &[3], 1, 1, Some(0)), Err(Error::Data(_))));
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(&[f64::MAX]));
        assert!(matches!(t.add(x, x), Err(Error::NonFinite { op: "add" })));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut t = Tape::new();
        let l = t.constant(Tensor::matrix(&[&[1.0, 2.0]]).unwrap());
        let loss = t.cross_entropy(l, &[0]).unwrap();
        close(t.value(loss).item().unwrap(), 1.313_261_687_518_222_8, 1e-14);
        let u = t.constant(Tensor::zeros(&[2, 4]));
        let loss = t.cross_entropy(u, &[1, 3]).unwrap();
        close(t.value(loss).item().unwrap(), 4f64.ln(), 1e-15);
        let sat = t.constant(Tensor::matrix(&[&[20.0, 0.0]]).unwrap());
        let loss = t.cross_entropy(sat, &[0]).unwrap();
        assert!(t.value(loss).item().unwrap() < 1e-6);
        assert!(matches!(t.cross_entropy(l, &[2]), Err(Error::Data(_))));
    }
}
