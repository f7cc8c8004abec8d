//! Reverse-mode differentiation over sparse voxel tensors.
//!
//! A [`Tape`] records every op in execution order together with its value.
//! Parameters are not nodes: ops reference offsets into one flat parameter
//! vector and [`Tape::backward`] returns gradients in the same flat layout.
//! Backward walks the node list in reverse, so accumulation order is fixed.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nn::{Backend, ConvParam, LinearParam};
use crate::tensor::{
    activate, activation_grad, concat_rows, linear_backward, linear_forward, sconv_backward,
    sconv_forward, Activation, CoordSet,
};

/// Lower/upper clamp applied to probabilities before taking logs.
pub const PROB_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Input,
    SConv { x: NodeId, p: ConvParam },
    Linear { x: NodeId, p: LinearParam },
    Act { x: NodeId, kind: Activation },
    Add { a: NodeId, b: NodeId },
    Concat { a: NodeId, b: NodeId },
    ScaleRows { x: NodeId, s: Vec<f64> },
    BceBits { p: NodeId, target: Vec<u8> },
    Sum { x: NodeId },
    WeightedSum { terms: Vec<(NodeId, f64)> },
}

#[derive(Debug)]
struct Node {
    coords: Option<Arc<CoordSet>>,
    cols: usize,
    data: Vec<f64>,
    op: Op,
}

/// Computation graph recorded in topological order.
pub struct Tape<'p> {
    params: &'p [f64],
    nodes: Vec<Node>,
}

/// Result of a backward pass.
pub struct Gradients {
    pub params: Vec<f64>,
    nodes: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a node's value (zero-length if unreachable).
    pub fn node(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].as_deref()
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [f64]) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn channels(&self, id: NodeId) -> usize {
        self.nodes[id.0].cols
    }

    pub fn coords(&self, id: NodeId) -> Option<&Arc<CoordSet>> {
        self.nodes[id.0].coords.as_ref()
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].data[0]
    }

    fn push(&mut self, coords: Option<Arc<CoordSet>>, cols: usize, data: Vec<f64>, op: Op) -> NodeId {
        self.nodes.push(Node {
            coords,
            cols,
            data,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn tensor_coords(&self, id: NodeId) -> Result<Arc<CoordSet>> {
        self.nodes[id.0].coords.clone().ok_or(Error::CoordinateMismatch)
    }

    fn check_same(&self, a: NodeId, b: NodeId) -> Result<Arc<CoordSet>> {
        let ca = self.tensor_coords(a)?;
        let cb = self.tensor_coords(b)?;
        if Arc::ptr_eq(&ca, &cb) || ca.coords() == cb.coords() {
            Ok(ca)
        } else {
            Err(Error::CoordinateMismatch)
        }
    }

    /// Feature leaf (its gradient is reported but never applied).
    pub fn input(&mut self, coords: &Arc<CoordSet>, cols: usize, data: Vec<f64>) -> Result<NodeId> {
        if data.len() != coords.len() * cols || cols == 0 {
            return Err(Error::LengthMismatch {
                expected: coords.len() * cols,
                actual: data.len(),
            });
        }
        Ok(self.push(Some(coords.clone()), cols, data, Op::Input))
    }

    pub fn sconv(&mut self, x: NodeId, p: &ConvParam) -> Result<NodeId> {
        let cs = self.tensor_coords(x)?;
        let n = &self.nodes[x.0];
        if n.cols != p.cin {
            return Err(Error::ChannelMismatch {
                expected: p.cin,
                actual: n.cols,
            });
        }
        let out = sconv_forward(&cs, &n.data, p.cin, p.weights(self.params), p.bias(self.params), p.cout);
        Ok(self.push(Some(cs), p.cout, out, Op::SConv { x, p: *p }))
    }

    pub fn linear(&mut self, x: NodeId, p: &LinearParam) -> Result<NodeId> {
        let n = &self.nodes[x.0];
        if n.cols != p.cin {
            return Err(Error::ChannelMismatch {
                expected: p.cin,
                actual: n.cols,
            });
        }
        let rows = n.data.len() / n.cols;
        let out = linear_forward(&n.data, rows, p.cin, p.weights(self.params), p.bias(self.params), p.cout);
        let coords = n.coords.clone();
        Ok(self.push(coords, p.cout, out, Op::Linear { x, p: *p }))
    }

    pub fn act(&mut self, kind: Activation, x: NodeId) -> NodeId {
        let n = &self.nodes[x.0];
        let out = n.data.iter().map(|&v| activate(kind, v)).collect();
        let (coords, cols) = (n.coords.clone(), n.cols);
        self.push(coords, cols, out, Op::Act { x, kind })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let cs = self.check_same(a, b)?;
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if na.cols != nb.cols {
            return Err(Error::ChannelMismatch {
                expected: na.cols,
                actual: nb.cols,
            });
        }
        let out = na.data.iter().zip(&nb.data).map(|(x, y)| x + y).collect();
        let cols = na.cols;
        Ok(self.push(Some(cs), cols, out, Op::Add { a, b }))
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let cs = self.check_same(a, b)?;
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        let out = concat_rows(&na.data, na.cols, &nb.data, nb.cols, cs.len());
        let cols = na.cols + nb.cols;
        Ok(self.push(Some(cs), cols, out, Op::Concat { a, b }))
    }

    /// Multiplies every row by its own constant.
    pub fn scale_rows(&mut self, x: NodeId, s: &[f64]) -> Result<NodeId> {
        let n = &self.nodes[x.0];
        let rows = n.data.len() / n.cols;
        if s.len() != rows {
            return Err(Error::LengthMismatch {
                expected: rows,
                actual: s.len(),
            });
        }
        let cols = n.cols;
        let out = n
            .data
            .chunks(cols)
            .zip(s)
            .flat_map(|(row, &k)| row.iter().map(move |v| v * k))
            .collect();
        let coords = n.coords.clone();
        Ok(self.push(coords, cols, out, Op::ScaleRows { x, s: s.to_vec() }))
    }

    /// Estimated bits `-sum[t log2 p + (1-t) log2(1-p)]` of a one-channel probability tensor.
    pub fn bce_bits(&mut self, p: NodeId, target: &[u8]) -> Result<NodeId> {
        let n = &self.nodes[p.0];
        if n.cols != 1 {
            return Err(Error::ChannelMismatch {
                expected: 1,
                actual: n.cols,
            });
        }
        if target.len() != n.data.len() {
            return Err(Error::LengthMismatch {
                expected: n.data.len(),
                actual: target.len(),
            });
        }
        let bits = bce_bits(&n.data, target);
        Ok(self.push(None, 1, vec![bits], Op::BceBits { p, target: target.to_vec() }))
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x.0].data.iter().sum();
        self.push(None, 1, vec![s], Op::Sum { x })
    }

    /// `sum_k w_k * s_k` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        let mut acc = 0.0;
        for &(id, w) in terms {
            let n = &self.nodes[id.0];
            if n.data.len() != 1 {
                return Err(Error::NonScalarLoss);
            }
            acc += w * n.data[0];
        }
        Ok(self.push(None, 1, vec![acc], Op::WeightedSum { terms: terms.to_vec() }))
    }

    /// Exact reverse-mode gradients of a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.nodes[loss.0].data.len() != 1 || self.nodes[loss.0].coords.is_some() {
            return Err(Error::NonScalarLoss);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut pgrad = vec![0.0; self.params.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::SConv { x, p } => {
                    let xn = &self.nodes[x.0];
                    let cs = node.coords.as_ref().unwrap();
                    let mut gx = take_or_zero(&mut grads, *x, xn.data.len(), self.wants_grad(*x));
                    let (gw, gb) = split_param_grad(&mut pgrad, p.w, p.w_len(), p.b, p.cout);
                    sconv_backward(cs, &xn.data, p.cin, p.weights(self.params), p.cout, &g, gx.as_deref_mut(), gw, gb);
                    put_back(&mut grads, *x, gx);
                }
                Op::Linear { x, p } => {
                    let xn = &self.nodes[x.0];
                    let rows = xn.data.len() / p.cin;
                    let mut gx = take_or_zero(&mut grads, *x, xn.data.len(), self.wants_grad(*x));
                    let (gw, gb) = split_param_grad(&mut pgrad, p.w, p.cin * p.cout, p.b, p.cout);
                    linear_backward(&xn.data, rows, p.cin, p.weights(self.params), p.cout, &g, gx.as_deref_mut(), gw, gb);
                    put_back(&mut grads, *x, gx);
                }
                Op::Act { x, kind } => {
                    let xn = &self.nodes[x.0];
                    let acc = grads[x.0].get_or_insert_with(|| vec![0.0; xn.data.len()]);
                    for i in 0..g.len() {
                        acc[i] += g[i] * activation_grad(*kind, xn.data[i], node.data[i]);
                    }
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::Concat { a, b } => {
                    let (ca, cb) = (self.nodes[a.0].cols, self.nodes[b.0].cols);
                    let rows = g.len() / (ca + cb);
                    {
                        let acc = grads[a.0].get_or_insert_with(|| vec![0.0; rows * ca]);
                        for r in 0..rows {
                            for c in 0..ca {
                                acc[r * ca + c] += g[r * (ca + cb) + c];
                            }
                        }
                    }
                    let acc = grads[b.0].get_or_insert_with(|| vec![0.0; rows * cb]);
                    for r in 0..rows {
                        for c in 0..cb {
                            acc[r * cb + c] += g[r * (ca + cb) + ca + c];
                        }
                    }
                }
                Op::ScaleRows { x, s } => {
                    let cols = node.cols;
                    let acc = grads[x.0].get_or_insert_with(|| vec![0.0; g.len()]);
                    for (i, gv) in g.iter().enumerate() {
                        acc[i] += gv * s[i / cols];
                    }
                }
                Op::BceBits { p, target } => {
                    let pn = &self.nodes[p.0];
                    let acc = grads[p.0].get_or_insert_with(|| vec![0.0; pn.data.len()]);
                    for (i, (&pv, &t)) in pn.data.iter().zip(target).enumerate() {
                        acc[i] += g[0] * bce_bits_grad(pv, t);
                    }
                }
                Op::Sum { x } => {
                    let len = self.nodes[x.0].data.len();
                    let acc = grads[x.0].get_or_insert_with(|| vec![0.0; len]);
                    for a in acc.iter_mut() {
                        *a += g[0];
                    }
                }
                Op::WeightedSum { terms } => {
                    for &(id, w) in terms {
                        let acc = grads[id.0].get_or_insert_with(|| vec![0.0]);
                        acc[0] += w * g[0];
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            params: pgrad,
            nodes: grads,
        })
    }

    // Inputs always get gradients so tests can inspect them.
    fn wants_grad(&self, _x: NodeId) -> bool {
        true
    }
}

fn take_or_zero(grads: &mut [Option<Vec<f64>>], x: NodeId, len: usize, want: bool) -> Option<Vec<f64>> {
    if !want {
        return None;
    }
    Some(grads[x.0].take().unwrap_or_else(|| vec![0.0; len]))
}

fn put_back(grads: &mut [Option<Vec<f64>>], x: NodeId, g: Option<Vec<f64>>) {
    if let Some(g) = g {
        grads[x.0] = Some(g);
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], x: NodeId, g: &[f64]) {
    match &mut grads[x.0] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn split_param_grad(pgrad: &mut [f64], w: usize, wlen: usize, b: usize, blen: usize) -> (&mut [f64], &mut [f64]) {
    // Weights always precede their bias in the layout.
    debug_assert!(w + wlen <= b);
    let (lo, hi) = pgrad.split_at_mut(b);
    (&mut lo[w..w + wlen], &mut hi[..blen])
}

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// `-sum[t log2 p + (1-t) log2(1-p)]` with `p` clamped to `[1e-9, 1-1e-9]`.
pub fn bce_bits(p: &[f64], target: &[u8]) -> f64 {
    p.iter()
        .zip(target)
        .map(|(&p, &t)| {
            let p = clamp_prob(p);
            if t != 0 {
                -p.log2()
            } else {
                -(1.0 - p).log2()
            }
        })
        .sum()
}

#[inline]
fn bce_bits_grad(p: f64, t: u8) -> f64 {
    if p <= PROB_EPS || p >= 1.0 - PROB_EPS {
        return 0.0;
    }
    let ln2 = std::f64::consts::LN_2;
    if t != 0 {
        -1.0 / (p * ln2)
    } else {
        1.0 / ((1.0 - p) * ln2)
    }
}

impl Backend for Tape<'_> {
    type T = NodeId;

    fn constant(&mut self, coords: &Arc<CoordSet>, channels: usize, data: Vec<f64>) -> Result<NodeId> {
        self.input(coords, channels, data)
    }

    fn sconv(&mut self, x: &NodeId, p: &ConvParam) -> Result<NodeId> {
        Tape::sconv(self, *x, p)
    }

    fn linear(&mut self, x: &NodeId, p: &LinearParam) -> Result<NodeId> {
        Tape::linear(self, *x, p)
    }

    fn act(&mut self, kind: Activation, x: &NodeId) -> Result<NodeId> {
        Ok(Tape::act(self, kind, *x))
    }

    fn add(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        Tape::add(self, *a, *b)
    }

    fn concat(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        Tape::concat(self, *a, *b)
    }

    fn scale_rows(&mut self, x: &NodeId, s: &[f64]) -> Result<NodeId> {
        Tape::scale_rows(self, *x, s)
    }

    fn share(&mut self, x: &NodeId) -> NodeId {
        *x
    }
}
