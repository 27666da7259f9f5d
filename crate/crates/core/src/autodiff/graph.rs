use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geometry::camera::CamKernel;
use crate::params::ParamStore;
use crate::tensor::{ensure_same_shape, Real, Tensor};

use super::nn::{self, Activation, Resample};
use super::shape;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// Recorded op with whatever it needs for its backward pass.
pub(crate) enum Op<T> {
    Leaf,
    Param,
    Add,
    Sub,
    Mul,
    Scale(T),
    Sum,
    Mean,
    AddBias,
    Matmul,
    Unary(Activation),
    Softmax { axis: usize },
    Conv3x3,
    RmsNorm { inv_rms: Vec<T> },
    Resample(Resample),
    Reshape,
    Permute { src_index: Vec<usize> },
    Narrow { axis: usize, start: usize },
    Concat { axis: usize },
    Broadcast,
    LayerPoints { dirs: Vec<[T; 3]> },
    Gather { cam: CamKernel<T> },
    Splat { cam: CamKernel<T>, eps: Option<T>, weight_sum: Vec<T> },
    OverComposite { partial: Vec<T> },
    DepthAct { near: T, far: T },
    MaskedBlend { mask: Tensor<T> },
    AttnScores { scale: T },
    AttnMix,
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::AddBias => "add_bias",
            Op::Matmul => "matmul",
            Op::Unary(_) => "activation",
            Op::Softmax { .. } => "softmax",
            Op::Conv3x3 => "conv2d_3x3",
            Op::RmsNorm { .. } => "rms_norm",
            Op::Resample(_) => "resample",
            Op::Reshape => "reshape",
            Op::Permute { .. } => "permute",
            Op::Narrow { .. } => "narrow",
            Op::Concat { .. } => "concat",
            Op::Broadcast => "broadcast",
            Op::LayerPoints { .. } => "layer_world_points",
            Op::Gather { .. } => "gather_backproject",
            Op::Splat { .. } => "splat_project",
            Op::OverComposite { .. } => "over_composite",
            Op::DepthAct { .. } => "activate_depth",
            Op::MaskedBlend { .. } => "masked_blend",
            Op::AttnScores { .. } => "attention_scores",
            Op::AttnMix => "attention_mix",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    inputs: Vec<usize>,
    requires_grad: bool,
}

/// Evaluation tape. Values are computed eagerly as ops are added.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<String, usize>,
    op_count: u64,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            op_count: 0,
        }
    }

    /// Differentiable leaf.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, Op::Leaf, false)
    }

    /// Leaf bound to a named parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&id) = self.params.get(name) {
            return Ok(Var(id));
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter '{name}'")))?
            .clone();
        let v = self.leaf(value, Op::Param, true);
        self.params.insert(name.to_string(), v.0);
        Ok(v)
    }

    fn leaf(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            inputs: Vec::new(),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var], cost: u64) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.name().to_string(),
            });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.op_count += cost;
        self.nodes.push(Node {
            value,
            op,
            inputs: inputs.iter().map(|v| v.0).collect(),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Arithmetic operations counted so far (multiply-accumulates count once).
    pub fn op_count(&self) -> u64 {
        self.op_count
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul, |x, y| x * y)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        ensure_same_shape(op.name(), va.shape(), vb.shape())?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape(), data)?;
        let n = out.len() as u64;
        self.push(out, op, &[a, b], n)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let s = T::c(s);
        let out = self.value(a).map(|x| x * s);
        let n = out.len() as u64;
        self.push(out, Op::Scale(s), &[a], n)
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let n = v.len() as u64;
        let out = Tensor::scalar(v.sum());
        self.push(out, Op::Sum, &[a], n)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let n = v.len();
        let out = Tensor::scalar(v.sum() / T::c(n as f64));
        self.push(out, Op::Mean, &[a], n as u64)
    }

    /// Mean absolute difference, the L1 photometric loss.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let d = self.activation(Activation::Abs, d)?;
        self.mean(d)
    }

    // ---- reverse pass ------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad && !node.inputs.is_empty() {
                self.backward_node(id, &g, &mut grads)?;
            }
            grads[id] = Some(g);
        }
        let params = self
            .params
            .iter()
            .map(|(name, &id)| (name.clone(), id))
            .collect();
        Ok(Gradients { grads, params })
    }

    pub(crate) fn accumulate(&self, grads: &mut [Option<Tensor<T>>], id: usize, g: Tensor<T>) {
        if !self.nodes[id].requires_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.nodes[id].value.shape(), "grad shape for node {id}");
        match &mut grads[id] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[id];
        let ins = &node.inputs;
        let val = |i: usize| &self.nodes[ins[i]].value;
        let needs = |i: usize| self.nodes[ins[i]].requires_grad;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add => {
                self.accumulate(grads, ins[0], g.clone());
                self.accumulate(grads, ins[1], g.clone());
            }
            Op::Sub => {
                self.accumulate(grads, ins[0], g.clone());
                self.accumulate(grads, ins[1], g.map(|x| -x));
            }
            Op::Mul => {
                if needs(0) {
                    let d = g.data().iter().zip(val(1).data()).map(|(&a, &b)| a * b).collect();
                    self.accumulate(grads, ins[0], Tensor::new(g.shape(), d)?);
                }
                if needs(1) {
                    let d = g.data().iter().zip(val(0).data()).map(|(&a, &b)| a * b).collect();
                    self.accumulate(grads, ins[1], Tensor::new(g.shape(), d)?);
                }
            }
            Op::Scale(s) => {
                let s = *s;
                self.accumulate(grads, ins[0], g.map(|x| x * s));
            }
            Op::Sum => {
                self.accumulate(grads, ins[0], Tensor::full(val(0).shape(), g.item()));
            }
            Op::Mean => {
                let n = T::c(val(0).len() as f64);
                self.accumulate(grads, ins[0], Tensor::full(val(0).shape(), g.item() / n));
            }
            Op::AddBias => {
                let (gx, gb) = nn::add_bias_backward(g, val(1).len());
                self.accumulate(grads, ins[0], gx);
                if needs(1) {
                    self.accumulate(grads, ins[1], gb);
                }
            }
            Op::Matmul => {
                let (ga, gb) = nn::matmul_backward(val(0), val(1), g, needs(0), needs(1))?;
                if let Some(ga) = ga {
                    self.accumulate(grads, ins[0], ga);
                }
                if let Some(gb) = gb {
                    self.accumulate(grads, ins[1], gb);
                }
            }
            Op::Unary(kind) => {
                let gx = nn::unary_backward(*kind, val(0), &node.value, g);
                self.accumulate(grads, ins[0], gx);
            }
            Op::Softmax { axis } => {
                let gx = nn::softmax_backward(&node.value, g, *axis);
                self.accumulate(grads, ins[0], gx);
            }
            Op::Conv3x3 => {
                let (gx, gk, gb) = nn::conv3x3_backward(val(0), val(1), g, needs(0), needs(1) || needs(2));
                if let Some(gx) = gx {
                    self.accumulate(grads, ins[0], gx);
                }
                if let Some((gk, gb)) = gk.zip(gb) {
                    self.accumulate(grads, ins[1], gk);
                    self.accumulate(grads, ins[2], gb);
                }
            }
            Op::RmsNorm { inv_rms } => {
                let (gx, gg) = nn::rms_norm_backward(val(0), val(1), inv_rms, g);
                self.accumulate(grads, ins[0], gx);
                if needs(1) {
                    self.accumulate(grads, ins[1], gg);
                }
            }
            Op::Resample(mode) => {
                let gx = nn::resample_backward(*mode, val(0).shape(), g);
                self.accumulate(grads, ins[0], gx);
            }
            Op::Reshape => {
                self.accumulate(grads, ins[0], g.reshape(val(0).shape())?);
            }
            Op::Permute { src_index } => {
                let gx = shape::permute_backward(val(0).shape(), src_index, g);
                self.accumulate(grads, ins[0], gx);
            }
            Op::Narrow { axis, start } => {
                let gx = shape::narrow_backward(val(0).shape(), *axis, *start, g);
                self.accumulate(grads, ins[0], gx);
            }
            Op::Concat { axis } => {
                let shapes: Vec<&[usize]> = ins.iter().map(|&i| self.nodes[i].value.shape()).collect();
                let parts = shape::concat_backward(&shapes, *axis, g);
                for (&i, part) in ins.iter().zip(parts) {
                    self.accumulate(grads, i, part);
                }
            }
            Op::Broadcast => {
                let gx = shape::broadcast_backward(val(0).shape(), g);
                self.accumulate(grads, ins[0], gx);
            }
            Op::LayerPoints { dirs } => {
                let gd = crate::geometry::projection::layer_points_backward(dirs, g);
                self.accumulate(grads, ins[0], Tensor::new(val(0).shape(), gd)?);
            }
            Op::Gather { cam } => {
                let (gi, gp) = crate::geometry::projection::gather_backward(
                    cam,
                    val(0),
                    val(1),
                    g,
                    needs(0),
                    needs(1),
                );
                if let Some(gi) = gi {
                    self.accumulate(grads, ins[0], gi);
                }
                if let Some(gp) = gp {
                    self.accumulate(grads, ins[1], gp);
                }
            }
            Op::Splat {
                cam,
                eps,
                weight_sum,
            } => {
                let (gv, gp) = crate::geometry::projection::splat_backward(
                    cam,
                    *eps,
                    val(0),
                    val(1),
                    &node.value,
                    weight_sum,
                    g,
                    needs(1),
                );
                self.accumulate(grads, ins[0], gv);
                if let Some(gp) = gp {
                    self.accumulate(grads, ins[1], gp);
                }
            }
            Op::OverComposite { partial } => {
                let (gv, gs) = crate::ldm::composite::over_composite_backward(val(0), val(1), partial, g);
                self.accumulate(grads, ins[0], gv);
                self.accumulate(grads, ins[1], gs);
            }
            Op::DepthAct { near, far } => {
                let gx = crate::ldm::activate::depth_activation_backward(val(0), &node.value, *near, *far, g);
                self.accumulate(grads, ins[0], gx);
            }
            Op::MaskedBlend { mask } => {
                let (gb, gs) = crate::ldm::render::masked_blend_backward(val(0), val(1), mask, &node.value, g);
                self.accumulate(grads, ins[0], gb);
                self.accumulate(grads, ins[1], gs);
            }
            Op::AttnScores { scale } => {
                let (gq, gk) = crate::attention::kernels::scores_backward(val(0), val(1), *scale, g);
                self.accumulate(grads, ins[0], gq);
                self.accumulate(grads, ins[1], gk);
            }
            Op::AttnMix => {
                let (gw, gv) = crate::attention::kernels::mix_backward(val(0), val(1), g);
                self.accumulate(grads, ins[0], gw);
                self.accumulate(grads, ins[1], gv);
            }
        }
        Ok(())
    }
}

/// Result of a reverse sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(String, usize)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a node, `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of all parameters bound in the graph, by name.
    pub fn params(&self) -> impl Iterator<Item = (&str, Option<&Tensor<T>>)> {
        self.params
            .iter()
            .map(move |(name, id)| (name.as_str(), self.grads[*id].as_ref()))
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, id)| self.grads[*id].as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_fn(&[2, 3], |i| i as f64 - 2.5));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn grad_of_half_square_is_identity() {
        let mut g = Graph::<f64>::new();
        let xv = Tensor::from_fn(&[5], |i| (i as f64).sin());
        let x = g.input(xv.clone());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let l = g.scale(s, 0.5).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(x).unwrap().max_abs_diff(&xv) < 1e-15);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::ones(&[3]));
        let c = g.constant(Tensor::full(&[3], 2.0));
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn non_finite_outputs_are_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::full(&[1], f64::MAX));
        let y = g.scale(x, 10.0);
        assert!(matches!(y, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn param_nodes_are_shared() {
        let mut store = ParamStore::<f64>::new(0);
        store.insert("w", Tensor::ones(&[2]));
        let mut g = Graph::new();
        let a = g.param(&store, "w").unwrap();
        let b = g.param(&store, "w").unwrap();
        assert_eq!(a, b);
        let y = g.add(a, b).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.param("w").unwrap().data(), &[2.0, 2.0]);
    }
}
