//! Eager tape of differentiable operations. Each builder call runs the
//! forward computation immediately and records what the backward sweep needs;
//! `backward` then accumulates exact reverse-mode gradients node by node in
//! reverse insertion order (the tape is acyclic by construction).

use super::ops::{self, BnSaved, ConvSpec, DeconvSpec};
use super::params::ParamStore;
use super::prroi;
use super::tensor::Tensor;
use crate::{Error, Result};
use std::collections::BTreeMap;

pub type NodeId = usize;

/// Smooth-L1 of a scalar residual: quadratic inside |d| < 1, linear outside,
/// continuous at the joint (both branches give 0.5 at |d| = 1).
#[inline]
pub fn smooth_l1_scalar(d: f64) -> f64 {
    let a = d.abs();
    if a < 1.0 {
        0.5 * d * d
    } else {
        a - 0.5
    }
}

enum Op {
    Value,
    Param { name: String },
    Input,
    Conv2d { spec: ConvSpec },
    Deconv2d { spec: DeconvSpec },
    Linear,
    BatchNorm { saved: BnSaved },
    LeakyRelu { slope: f64 },
    Sigmoid,
    Gap2d,
    AvgPool2d { k: usize, stride: usize, pad: usize },
    Add,
    Sub,
    Mul,
    MulScalar { c: f64 },
    ConcatChannels { splits: Vec<usize> },
    IndexSelect0 { indices: Vec<usize> },
    ExpandRows,
    ExpandChan,
    Reshape,
    PrRoi { batch_idx: Vec<usize>, bins: (usize, usize) },
    SmoothL1,
    MeanAll,
    SumAll,
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    out: Tensor,
    grad: Tensor,
}

pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
    train: bool,
}

impl Graph {
    pub fn new(train: bool) -> Graph {
        Graph { nodes: Vec::new(), params: BTreeMap::new(), train }
    }

    pub fn train_mode(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn out(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].out
    }

    /// Accumulated gradient of `id` over all `backward` calls since the last
    /// `zero_grads`.
    pub fn grad(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].grad
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad.fill(0.0);
        }
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, out: Tensor) -> NodeId {
        debug_assert!(
            !out.has_non_finite(),
            "non-finite forward output at node {}",
            self.nodes.len()
        );
        let grad = Tensor::zeros(out.shape());
        self.nodes.push(Node { op, inputs, out, grad });
        self.nodes.len() - 1
    }

    /// Constant leaf.
    pub fn value(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Value, vec![], t)
    }

    /// Differentiable non-parameter leaf (e.g. box coordinates).
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Input, vec![], t)
    }

    /// Parameter leaf bound by name; repeated binds of the same name return
    /// the same node, so shared weights accumulate one gradient.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let t = store.tensor(name)?.clone();
        let id = self.push(Op::Param { name: name.to_string() }, vec![], t);
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, spec: ConvSpec) -> Result<NodeId> {
        let out = ops::conv2d_fwd(&self.nodes[x].out, &self.nodes[w].out, &self.nodes[b].out, &spec)?;
        Ok(self.push(Op::Conv2d { spec }, vec![x, w, b], out))
    }

    pub fn deconv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, spec: DeconvSpec) -> Result<NodeId> {
        let out = ops::deconv2d_fwd(&self.nodes[x].out, &self.nodes[w].out, &self.nodes[b].out, &spec)?;
        Ok(self.push(Op::Deconv2d { spec }, vec![x, w, b], out))
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let out = ops::linear_fwd(&self.nodes[x].out, &self.nodes[w].out, &self.nodes[b].out)?;
        Ok(self.push(Op::Linear, vec![x, w, b], out))
    }

    /// Batch normalization; batch statistics in train mode, running
    /// statistics in eval mode. Running-stat refreshes are collected on the
    /// side (`bn_stat_updates`), never applied during the forward pass.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        rmean: NodeId,
        rvar: NodeId,
    ) -> Result<NodeId> {
        let (out, saved) = ops::bn_fwd(
            &self.nodes[x].out,
            &self.nodes[gamma].out,
            &self.nodes[beta].out,
            &self.nodes[rmean].out,
            &self.nodes[rvar].out,
            self.train,
        )?;
        Ok(self.push(Op::BatchNorm { saved }, vec![x, gamma, beta, rmean, rvar], out))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let mut out = self.nodes[x].out.clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v *= slope;
            }
        }
        self.push(Op::LeakyRelu { slope }, vec![x], out)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let mut out = self.nodes[x].out.clone();
        for v in out.data_mut() {
            *v = 1.0 / (1.0 + (-*v).exp());
        }
        self.push(Op::Sigmoid, vec![x], out)
    }

    /// Global average pool (N, C, H, W) -> (N, C).
    pub fn gap2d(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.nodes[x].out.dims4("gap2d")?;
        let mut out = Tensor::zeros(&[n, c]);
        let inv = 1.0 / (h * w) as f64;
        for i in 0..n * c {
            out.data_mut()[i] =
                self.nodes[x].out.data()[i * h * w..(i + 1) * h * w].iter().sum::<f64>() * inv;
        }
        Ok(self.push(Op::Gap2d, vec![x], out))
    }

    pub fn avg_pool2d(&mut self, x: NodeId, k: usize, stride: usize, pad: usize) -> Result<NodeId> {
        let out = ops::avg_pool2d_fwd(&self.nodes[x].out, k, stride, pad)?;
        Ok(self.push(Op::AvgPool2d { k, stride, pad }, vec![x], out))
    }

    fn same_shape(&self, op: &str, a: NodeId, b: NodeId) -> Result<()> {
        if self.nodes[a].out.shape() != self.nodes[b].out.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.nodes[a].out.shape(), self.nodes[b].out.shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let mut out = self.nodes[a].out.clone();
        out.add_assign(&self.nodes[b].out)?;
        Ok(self.push(Op::Add, vec![a, b], out))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let mut out = self.nodes[a].out.clone();
        for (v, &w) in out.data_mut().iter_mut().zip(self.nodes[b].out.data()) {
            *v -= w;
        }
        Ok(self.push(Op::Sub, vec![a, b], out))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let mut out = self.nodes[a].out.clone();
        for (v, &w) in out.data_mut().iter_mut().zip(self.nodes[b].out.data()) {
            *v *= w;
        }
        Ok(self.push(Op::Mul, vec![a, b], out))
    }

    pub fn mul_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let mut out = self.nodes[x].out.clone();
        out.scale(c);
        self.push(Op::MulScalar { c }, vec![x], out)
    }

    /// Concatenate rank-4 tensors along the channel dimension.
    pub fn concat_channels(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Contract("concat_channels needs at least one input".into()));
        }
        let (n, _, h, w) = self.nodes[xs[0]].out.dims4("concat_channels")?;
        let mut splits = Vec::with_capacity(xs.len());
        let mut ctotal = 0;
        for &x in xs {
            let (xn, xc, xh, xw) = self.nodes[x].out.dims4("concat_channels")?;
            if (xn, xh, xw) != (n, h, w) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("incompatible shapes {:?} vs {:?}", self.nodes[xs[0]].out.shape(), self.nodes[x].out.shape()),
                ));
            }
            splits.push(xc);
            ctotal += xc;
        }
        let mut out = Tensor::zeros(&[n, ctotal, h, w]);
        let hw = h * w;
        for ni in 0..n {
            let mut coff = 0;
            for (xi, &x) in xs.iter().enumerate() {
                let xc = splits[xi];
                let src = &self.nodes[x].out.data()[ni * xc * hw..(ni + 1) * xc * hw];
                out.data_mut()[(ni * ctotal + coff) * hw..(ni * ctotal + coff + xc) * hw]
                    .copy_from_slice(src);
                coff += xc;
            }
        }
        Ok(self.push(Op::ConcatChannels { splits }, xs.to_vec(), out))
    }

    /// out[i, ...] = x[indices[i], ...]; backward scatter-adds over repeats.
    pub fn index_select0(&mut self, x: NodeId, indices: Vec<usize>) -> Result<NodeId> {
        let shape = self.nodes[x].out.shape().to_vec();
        if shape.is_empty() {
            return Err(Error::shape("index_select0", "rank-0 input"));
        }
        let rows = shape[0];
        let row_len: usize = shape[1..].iter().product();
        for &i in &indices {
            if i >= rows {
                return Err(Error::shape("index_select0", format!("index {i} out of {rows} rows")));
            }
        }
        let mut oshape = shape.clone();
        oshape[0] = indices.len();
        let mut out = Tensor::zeros(&oshape);
        for (r, &i) in indices.iter().enumerate() {
            out.data_mut()[r * row_len..(r + 1) * row_len]
                .copy_from_slice(&self.nodes[x].out.data()[i * row_len..(i + 1) * row_len]);
        }
        Ok(self.push(Op::IndexSelect0 { indices }, vec![x], out))
    }

    /// (R, C) -> (R, C, h, w) by replication over the spatial grid.
    pub fn expand_rows(&mut self, x: NodeId, h: usize, w: usize) -> Result<NodeId> {
        let (r, c) = self.nodes[x].out.dims2("expand_rows")?;
        let mut out = Tensor::zeros(&[r, c, h, w]);
        for i in 0..r * c {
            let v = self.nodes[x].out.data()[i];
            out.data_mut()[i * h * w..(i + 1) * h * w].fill(v);
        }
        Ok(self.push(Op::ExpandRows, vec![x], out))
    }

    /// (R, 1, H, W) -> (R, C, H, W) by replication over channels.
    pub fn expand_chan(&mut self, x: NodeId, c: usize) -> Result<NodeId> {
        let (r, c1, h, w) = self.nodes[x].out.dims4("expand_chan")?;
        if c1 != 1 {
            return Err(Error::shape("expand_chan", format!("expected 1 channel, got {c1}")));
        }
        let mut out = Tensor::zeros(&[r, c, h, w]);
        let hw = h * w;
        for ri in 0..r {
            let src = &self.nodes[x].out.data()[ri * hw..(ri + 1) * hw];
            for ci in 0..c {
                out.data_mut()[(ri * c + ci) * hw..(ri * c + ci + 1) * hw].copy_from_slice(src);
            }
        }
        Ok(self.push(Op::ExpandChan, vec![x], out))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.nodes[x].out.reshaped(shape)?;
        Ok(self.push(Op::Reshape, vec![x], out))
    }

    /// Precise RoI pooling over `feat` (F, C, H, W) with boxes (R, 4) in
    /// feature coordinates; differentiable in both inputs.
    pub fn prroi(
        &mut self,
        feat: NodeId,
        boxes: NodeId,
        batch_idx: Vec<usize>,
        bins: (usize, usize),
    ) -> Result<NodeId> {
        let (r, four) = self.nodes[boxes].out.dims2("prroi_pool boxes")?;
        if four != 4 {
            return Err(Error::shape("prroi_pool", format!("boxes must be (R,4), got (R,{four})")));
        }
        if r != batch_idx.len() {
            return Err(Error::shape(
                "prroi_pool",
                format!("{r} boxes vs {} batch indices", batch_idx.len()),
            ));
        }
        let out = prroi::prroi_fwd(&self.nodes[feat].out, self.nodes[boxes].out.data(), &batch_idx, bins)?;
        Ok(self.push(Op::PrRoi { batch_idx, bins }, vec![feat, boxes], out))
    }

    pub fn smooth_l1(&mut self, x: NodeId) -> NodeId {
        let mut out = self.nodes[x].out.clone();
        for v in out.data_mut() {
            *v = smooth_l1_scalar(*v);
        }
        self.push(Op::SmoothL1, vec![x], out)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x].out.numel();
        let m = self.nodes[x].out.data().iter().sum::<f64>() / n as f64;
        self.push(Op::MeanAll, vec![x], Tensor::scalar(m))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x].out.data().iter().sum::<f64>();
        self.push(Op::SumAll, vec![x], Tensor::scalar(s))
    }

    /// Reverse sweep from a scalar root. Each call propagates a fresh unit
    /// seed and adds the resulting per-node gradients into the persistent
    /// accumulators, so two calls yield exactly twice one call.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if root >= self.nodes.len() {
            return Err(Error::Contract(format!("backward root {root} out of range")));
        }
        if self.nodes[root].out.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got {:?}",
                self.nodes[root].out.shape()
            )));
        }
        let mut trans: Vec<Option<Tensor>> = Vec::with_capacity(root + 1);
        trans.resize_with(root + 1, || None);
        trans[root] = Some(Tensor::scalar(1.0));
        for idx in (0..=root).rev() {
            let Some(g) = trans[idx].take() else { continue };
            g.ensure_finite("backward gradient")?;
            let contribs = self.backward_op(idx, &g)?;
            for (nid, t) in contribs {
                match &mut trans[nid] {
                    Some(acc) => acc.add_assign(&t)?,
                    slot @ None => *slot = Some(t),
                }
            }
            self.nodes[idx].grad.add_assign(&g)?;
        }
        Ok(())
    }

    fn backward_op(&self, idx: NodeId, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let node = &self.nodes[idx];
        let ins = &node.inputs;
        let out = |i: usize| &self.nodes[ins[i]].out;
        Ok(match &node.op {
            Op::Value | Op::Param { .. } | Op::Input => vec![],
            Op::Conv2d { spec } => {
                let (dx, dw, db) = ops::conv2d_bwd(out(0), out(1), spec, g)?;
                vec![(ins[0], dx), (ins[1], dw), (ins[2], db)]
            }
            Op::Deconv2d { spec } => {
                let (dx, dw, db) = ops::deconv2d_bwd(out(0), out(1), spec, g)?;
                vec![(ins[0], dx), (ins[1], dw), (ins[2], db)]
            }
            Op::Linear => {
                let (dx, dw, db) = ops::linear_bwd(out(0), out(1), g)?;
                vec![(ins[0], dx), (ins[1], dw), (ins[2], db)]
            }
            Op::BatchNorm { saved } => {
                let (dx, dgamma, dbeta) = ops::bn_bwd(saved, out(1), g)?;
                vec![(ins[0], dx), (ins[1], dgamma), (ins[2], dbeta)]
            }
            Op::LeakyRelu { slope } => {
                let mut dx = g.clone();
                for (dv, &xv) in dx.data_mut().iter_mut().zip(out(0).data()) {
                    if xv < 0.0 {
                        *dv *= slope;
                    }
                }
                vec![(ins[0], dx)]
            }
            Op::Sigmoid => {
                let mut dx = g.clone();
                for (dv, &yv) in dx.data_mut().iter_mut().zip(node.out.data()) {
                    *dv *= yv * (1.0 - yv);
                }
                vec![(ins[0], dx)]
            }
            Op::Gap2d => {
                let (n, c, h, w) = out(0).dims4("gap2d")?;
                let mut dx = Tensor::zeros(&[n, c, h, w]);
                let inv = 1.0 / (h * w) as f64;
                for i in 0..n * c {
                    let gv = g.data()[i] * inv;
                    dx.data_mut()[i * h * w..(i + 1) * h * w].fill(gv);
                }
                vec![(ins[0], dx)]
            }
            Op::AvgPool2d { k, stride, pad } => {
                let dx = ops::avg_pool2d_bwd(out(0).shape(), *k, *stride, *pad, g)?;
                vec![(ins[0], dx)]
            }
            Op::Add => vec![(ins[0], g.clone()), (ins[1], g.clone())],
            Op::Sub => {
                let mut neg = g.clone();
                neg.scale(-1.0);
                vec![(ins[0], g.clone()), (ins[1], neg)]
            }
            Op::Mul => {
                let mut da = g.clone();
                for (dv, &bv) in da.data_mut().iter_mut().zip(out(1).data()) {
                    *dv *= bv;
                }
                let mut db = g.clone();
                for (dv, &av) in db.data_mut().iter_mut().zip(out(0).data()) {
                    *dv *= av;
                }
                vec![(ins[0], da), (ins[1], db)]
            }
            Op::MulScalar { c } => {
                let mut dx = g.clone();
                dx.scale(*c);
                vec![(ins[0], dx)]
            }
            Op::ConcatChannels { splits } => {
                let (n, ctotal, h, w) = node.out.dims4("concat_channels")?;
                let hw = h * w;
                let mut contribs = Vec::with_capacity(ins.len());
                let mut coff = 0;
                for (xi, &xc) in splits.iter().enumerate() {
                    let mut dx = Tensor::zeros(&[n, xc, h, w]);
                    for ni in 0..n {
                        let src = &g.data()[(ni * ctotal + coff) * hw..(ni * ctotal + coff + xc) * hw];
                        dx.data_mut()[ni * xc * hw..(ni + 1) * xc * hw].copy_from_slice(src);
                    }
                    contribs.push((ins[xi], dx));
                    coff += xc;
                }
                contribs
            }
            Op::IndexSelect0 { indices } => {
                let mut dx = Tensor::zeros(out(0).shape());
                let row_len: usize = out(0).shape()[1..].iter().product();
                for (r, &i) in indices.iter().enumerate() {
                    let src = &g.data()[r * row_len..(r + 1) * row_len];
                    for (dv, &gv) in dx.data_mut()[i * row_len..(i + 1) * row_len].iter_mut().zip(src) {
                        *dv += gv;
                    }
                }
                vec![(ins[0], dx)]
            }
            Op::ExpandRows => {
                let (r, c) = out(0).dims2("expand_rows")?;
                let (_, _, h, w) = node.out.dims4("expand_rows")?;
                let mut dx = Tensor::zeros(&[r, c]);
                for i in 0..r * c {
                    dx.data_mut()[i] = g.data()[i * h * w..(i + 1) * h * w].iter().sum();
                }
                vec![(ins[0], dx)]
            }
            Op::ExpandChan => {
                let (r, c, h, w) = node.out.dims4("expand_chan")?;
                let hw = h * w;
                let mut dx = Tensor::zeros(&[r, 1, h, w]);
                for ri in 0..r {
                    for ci in 0..c {
                        let src = &g.data()[(ri * c + ci) * hw..(ri * c + ci + 1) * hw];
                        for (dv, &gv) in dx.data_mut()[ri * hw..(ri + 1) * hw].iter_mut().zip(src) {
                            *dv += gv;
                        }
                    }
                }
                vec![(ins[0], dx)]
            }
            Op::Reshape => vec![(ins[0], g.reshaped(out(0).shape())?)],
            Op::PrRoi { batch_idx, bins } => {
                let (dfeat, dboxes) =
                    prroi::prroi_bwd(out(0), out(1).data(), batch_idx, *bins, &node.out, g)?;
                vec![(ins[0], dfeat), (ins[1], dboxes)]
            }
            Op::SmoothL1 => {
                let mut dx = g.clone();
                for (dv, &xv) in dx.data_mut().iter_mut().zip(out(0).data()) {
                    *dv *= if xv.abs() < 1.0 { xv } else { xv.signum() };
                }
                vec![(ins[0], dx)]
            }
            Op::MeanAll => {
                let mut dx = Tensor::zeros(out(0).shape());
                dx.fill(g.data()[0] / out(0).numel() as f64);
                vec![(ins[0], dx)]
            }
            Op::SumAll => {
                let mut dx = Tensor::zeros(out(0).shape());
                dx.fill(g.data()[0]);
                vec![(ins[0], dx)]
            }
        })
    }

    /// Gradients of all bound parameters, keyed by name.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, &id)| (name.clone(), self.nodes[id].grad.clone()))
            .collect()
    }

    /// Batch-statistic refreshes gathered from train-mode batch-norm nodes,
    /// in tape order: (running_mean name, batch mean, running_var name,
    /// unbiased batch variance).
    pub fn bn_stat_updates(&self) -> Vec<(String, Tensor, String, Tensor)> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::BatchNorm { saved } = &node.op {
                if !saved.train {
                    continue;
                }
                let mean_name = match &self.nodes[node.inputs[3]].op {
                    Op::Param { name } => name.clone(),
                    _ => continue,
                };
                let var_name = match &self.nodes[node.inputs[4]].op {
                    Op::Param { name } => name.clone(),
                    _ => continue,
                };
                let c = saved.batch_mean.len();
                let mean = Tensor::from_vec(&[c], saved.batch_mean.clone()).expect("bn mean shape");
                let var =
                    Tensor::from_vec(&[c], saved.batch_var_unbiased.clone()).expect("bn var shape");
                out.push((mean_name, mean, var_name, var));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, t: Tensor) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(name, t, true).unwrap();
        s
    }

    #[test]
    fn sum_gradient_is_ones() {
        let store = store_with("p", Tensor::from_vec(&[4], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let mut g = Graph::new(true);
        let p = g.param(&store, "p").unwrap();
        let s = g.sum_all(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(p).data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn half_sum_of_squares_gradient_is_p() {
        let t = Tensor::from_vec(&[3], vec![1.5, -0.25, 2.0]).unwrap();
        let store = store_with("p", t.clone());
        let mut g = Graph::new(true);
        let p = g.param(&store, "p").unwrap();
        let sq = g.mul(p, p).unwrap();
        let s = g.sum_all(sq);
        let r = g.mul_scalar(s, 0.5);
        g.backward(r).unwrap();
        assert_eq!(g.grad(p).data(), t.data());
    }

    #[test]
    fn backward_accumulates_additively() {
        let store = store_with("p", Tensor::from_vec(&[2], vec![2.0, 3.0]).unwrap());
        let mut g = Graph::new(true);
        let p = g.param(&store, "p").unwrap();
        let sq = g.mul(p, p).unwrap();
        let s = g.sum_all(sq);
        g.backward(s).unwrap();
        let once: Vec<f64> = g.grad(p).data().to_vec();
        g.backward(s).unwrap();
        let twice: Vec<f64> = g.grad(p).data().to_vec();
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!(*b, 2.0 * *a);
        }
    }

    #[test]
    fn non_scalar_root_rejected() {
        let store = store_with("p", Tensor::zeros(&[2]));
        let mut g = Graph::new(true);
        let p = g.param(&store, "p").unwrap();
        assert!(matches!(g.backward(p), Err(Error::Contract(_))));
    }

    #[test]
    fn param_binding_is_deduplicated() {
        let store = store_with("p", Tensor::zeros(&[2]));
        let mut g = Graph::new(true);
        let a = g.param(&store, "p").unwrap();
        let b = g.param(&store, "p").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identical_graphs_are_bitwise_identical() {
        let run = || {
            let store = store_with("p", Tensor::from_vec(&[4], vec![0.3, -0.7, 1.1, 0.0]).unwrap());
            let mut g = Graph::new(false);
            let p = g.param(&store, "p").unwrap();
            let s = g.sigmoid(p);
            let l = g.leaky_relu(s, 0.01);
            let m = g.mean_all(l);
            g.out(m).item().unwrap()
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn smooth_l1_values() {
        assert_eq!(smooth_l1_scalar(0.5), 0.125);
        assert_eq!(smooth_l1_scalar(2.0), 1.5);
        assert_eq!(smooth_l1_scalar(-2.0), 1.5);
        assert_eq!(smooth_l1_scalar(1.0), 0.5);
        let eps = 1e-9;
        assert!((smooth_l1_scalar(1.0 - eps) - smooth_l1_scalar(1.0 + eps)).abs() < 1e-8);
    }
}
