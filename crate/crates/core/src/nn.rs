//! Network building blocks: parameter layout, the base + enhancement store,
//! the op backend abstraction, and the FEM / IRN feature extractors.
//!
//! Networks are written once against [`Backend`]. The recording
//! [`Tape`](crate::autodiff::Tape) trains in 64-bit; [`Eval`] runs plain
//! forward passes (32-bit for coding, 64-bit for fast evaluation).

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    activate, concat_rows, linear_forward, sconv_forward, Activation, CoordSet, Scalar, SparseTensor,
    KERNEL_TAPS,
};

/// Offsets of a 3x3x3 sparse convolution inside a flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvParam {
    pub w: usize,
    pub b: usize,
    pub cin: usize,
    pub cout: usize,
}

impl ConvParam {
    pub fn w_len(&self) -> usize {
        KERNEL_TAPS * self.cin * self.cout
    }

    pub fn weights<'a, F>(&self, params: &'a [F]) -> &'a [F] {
        &params[self.w..self.w + self.w_len()]
    }

    pub fn bias<'a, F>(&self, params: &'a [F]) -> &'a [F] {
        &params[self.b..self.b + self.cout]
    }
}

/// Offsets of a dense per-row affine layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinearParam {
    pub w: usize,
    pub b: usize,
    pub cin: usize,
    pub cout: usize,
}

impl LinearParam {
    pub fn weights<'a, F>(&self, params: &'a [F]) -> &'a [F] {
        &params[self.w..self.w + self.cin * self.cout]
    }

    pub fn bias<'a, F>(&self, params: &'a [F]) -> &'a [F] {
        &params[self.b..self.b + self.cout]
    }
}

/// One named tensor of a layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    /// Fan-in used for initialization; zero marks a bias.
    pub fan_in: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered list of named tensors; declaration order is serialization order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParamLayout {
    entries: Vec<ParamEntry>,
    len: usize,
}

impl ParamLayout {
    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    /// Total number of scalars.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// He-uniform weights, zero biases.
    pub fn init<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = vec![0.0; self.len];
        for s in &self.entries {
            if s.fan_in == 0 {
                continue;
            }
            let bound = (6.0 / s.fan_in as f64).sqrt();
            for v in &mut out[s.offset..s.offset + s.len()] {
                *v = rng.random_range(-bound..bound);
            }
        }
        out
    }
}

/// Appends tensors in declaration order.
#[derive(Default)]
pub struct LayoutBuilder {
    layout: ParamLayout,
    prefix: Vec<String>,
}

impl LayoutBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_scope(&mut self, name: &str) {
        self.prefix.push(name.to_string());
    }

    pub fn pop_scope(&mut self) {
        self.prefix.pop();
    }

    fn add(&mut self, name: &str, shape: Vec<usize>, fan_in: usize) -> usize {
        let mut full = self.prefix.join(".");
        if !full.is_empty() {
            full.push('.');
        }
        full.push_str(name);
        let offset = self.layout.len;
        let entry = ParamEntry {
            name: full,
            shape,
            offset,
            fan_in,
        };
        self.layout.len += entry.len();
        self.layout.entries.push(entry);
        offset
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize) -> ConvParam {
        let w = self.add(&format!("{name}.weight"), vec![KERNEL_TAPS, cin, cout], KERNEL_TAPS * cin);
        let b = self.add(&format!("{name}.bias"), vec![cout], 0);
        ConvParam { w, b, cin, cout }
    }

    pub fn linear(&mut self, name: &str, cin: usize, cout: usize) -> LinearParam {
        let w = self.add(&format!("{name}.weight"), vec![cin, cout], cin);
        let b = self.add(&format!("{name}.bias"), vec![cout], 0);
        LinearParam { w, b, cin, cout }
    }

    pub fn finish(self) -> ParamLayout {
        self.layout
    }
}

/// Frozen base layer plus trainable enhancement layer over one layout.
#[derive(Clone, Debug)]
pub struct ParamStore {
    layout: ParamLayout,
    base: Vec<f64>,
    enhancement: Vec<f64>,
}

impl ParamStore {
    /// Enhancement starts at exact zeros.
    pub fn new(layout: ParamLayout, base: Vec<f64>) -> Result<Self> {
        if base.len() != layout.len() {
            return Err(Error::LengthMismatch {
                expected: layout.len(),
                actual: base.len(),
            });
        }
        let enhancement = vec![0.0; base.len()];
        Ok(Self {
            layout,
            base,
            enhancement,
        })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.layout.len()
    }

    pub fn base(&self) -> &[f64] {
        &self.base
    }

    pub fn enhancement(&self) -> &[f64] {
        &self.enhancement
    }

    /// Flattened enhancement vector in declaration order.
    pub fn serialize(&self) -> Vec<f64> {
        self.enhancement.clone()
    }

    /// Installs a flat vector as the enhancement layer.
    pub fn structure(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.enhancement.len() {
            return Err(Error::LengthMismatch {
                expected: self.enhancement.len(),
                actual: v.len(),
            });
        }
        self.enhancement.copy_from_slice(v);
        Ok(())
    }

    /// Named view of one enhancement tensor.
    pub fn enhancement_tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .entries
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.enhancement[s.offset..s.offset + s.len()])
    }

    /// `base + enhancement` in 64-bit.
    pub fn effective(&self) -> Vec<f64> {
        self.base.iter().zip(&self.enhancement).map(|(b, e)| b + e).collect()
    }

    /// `base + enhancement` computed in 32-bit, as used for coding.
    pub fn effective_f32(&self) -> Vec<f32> {
        self.base
            .iter()
            .zip(&self.enhancement)
            .map(|(&b, &e)| b as f32 + e as f32)
            .collect()
    }
}

/// Sparse-tensor operations the networks are written against.
pub trait Backend {
    type T;
    fn constant(&mut self, coords: &Arc<CoordSet>, channels: usize, data: Vec<f64>) -> Result<Self::T>;
    fn sconv(&mut self, x: &Self::T, p: &ConvParam) -> Result<Self::T>;
    fn linear(&mut self, x: &Self::T, p: &LinearParam) -> Result<Self::T>;
    fn act(&mut self, kind: Activation, x: &Self::T) -> Result<Self::T>;
    fn add(&mut self, a: &Self::T, b: &Self::T) -> Result<Self::T>;
    fn concat(&mut self, a: &Self::T, b: &Self::T) -> Result<Self::T>;
    fn scale_rows(&mut self, x: &Self::T, s: &[f64]) -> Result<Self::T>;
    /// Another handle to the same value.
    fn share(&mut self, x: &Self::T) -> Self::T;
}

/// Tape-free forward evaluation at precision `F`.
pub struct Eval<'p, F: Scalar> {
    params: &'p [F],
}

impl<'p, F: Scalar> Eval<'p, F> {
    pub fn new(params: &'p [F]) -> Self {
        Self { params }
    }
}

fn same_coords<F: Scalar>(a: &SparseTensor<F>, b: &SparseTensor<F>) -> Result<()> {
    if a.same_coords(b) || a.coords().coords() == b.coords().coords() {
        Ok(())
    } else {
        Err(Error::CoordinateMismatch)
    }
}

impl<F: Scalar> Backend for Eval<'_, F> {
    type T = SparseTensor<F>;

    fn constant(&mut self, coords: &Arc<CoordSet>, channels: usize, data: Vec<f64>) -> Result<Self::T> {
        if data.len() != coords.len() * channels {
            return Err(Error::LengthMismatch {
                expected: coords.len() * channels,
                actual: data.len(),
            });
        }
        Ok(SparseTensor::new(
            coords.clone(),
            channels,
            data.into_iter().map(F::from_f64).collect(),
        ))
    }

    fn sconv(&mut self, x: &Self::T, p: &ConvParam) -> Result<Self::T> {
        if x.channels() != p.cin {
            return Err(Error::ChannelMismatch {
                expected: p.cin,
                actual: x.channels(),
            });
        }
        let out = sconv_forward(x.coords(), x.data(), p.cin, p.weights(self.params), p.bias(self.params), p.cout);
        Ok(SparseTensor::new(x.coords().clone(), p.cout, out))
    }

    fn linear(&mut self, x: &Self::T, p: &LinearParam) -> Result<Self::T> {
        if x.channels() != p.cin {
            return Err(Error::ChannelMismatch {
                expected: p.cin,
                actual: x.channels(),
            });
        }
        let out = linear_forward(x.data(), x.rows(), p.cin, p.weights(self.params), p.bias(self.params), p.cout);
        Ok(SparseTensor::new(x.coords().clone(), p.cout, out))
    }

    fn act(&mut self, kind: Activation, x: &Self::T) -> Result<Self::T> {
        let out = x.data().iter().map(|&v| activate(kind, v)).collect();
        Ok(SparseTensor::new(x.coords().clone(), x.channels(), out))
    }

    fn add(&mut self, a: &Self::T, b: &Self::T) -> Result<Self::T> {
        same_coords(a, b)?;
        if a.channels() != b.channels() {
            return Err(Error::ChannelMismatch {
                expected: a.channels(),
                actual: b.channels(),
            });
        }
        let out = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        Ok(SparseTensor::new(a.coords().clone(), a.channels(), out))
    }

    fn concat(&mut self, a: &Self::T, b: &Self::T) -> Result<Self::T> {
        same_coords(a, b)?;
        let out = concat_rows(a.data(), a.channels(), b.data(), b.channels(), a.rows());
        Ok(SparseTensor::new(a.coords().clone(), a.channels() + b.channels(), out))
    }

    fn scale_rows(&mut self, x: &Self::T, s: &[f64]) -> Result<Self::T> {
        if s.len() != x.rows() {
            return Err(Error::LengthMismatch {
                expected: x.rows(),
                actual: s.len(),
            });
        }
        let c = x.channels();
        let out = x
            .data()
            .chunks(c)
            .zip(s)
            .flat_map(|(row, &k)| {
                let k = F::from_f64(k);
                row.iter().map(move |&v| v * k)
            })
            .collect();
        Ok(SparseTensor::new(x.coords().clone(), c, out))
    }

    fn share(&mut self, x: &Self::T) -> Self::T {
        x.clone()
    }
}

/// `FEM(k, C)`: an input sparse convolution followed by `k` IRN blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FemConfig {
    pub blocks: usize,
    pub channels: usize,
    pub in_channels: usize,
}

impl FemConfig {
    pub fn new(blocks: usize, channels: usize, in_channels: usize) -> Result<Self> {
        let cfg = Self {
            blocks,
            channels,
            in_channels,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.channels == 0 || !self.channels.is_multiple_of(4) || self.in_channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "FEM needs k >= 1, C divisible by 4 and C_in >= 1 (got {self:?})"
            )));
        }
        Ok(())
    }
}

/// Inception residual block: `x + [a2(relu(a1 x)) ; b3(relu(b2(relu(b1 x))))]`.
#[derive(Clone, Debug)]
pub struct Irn {
    pub a1: ConvParam,
    pub a2: ConvParam,
    pub b1: ConvParam,
    pub b2: ConvParam,
    pub b3: ConvParam,
}

impl Irn {
    fn declare(lb: &mut LayoutBuilder, c: usize) -> Self {
        Self {
            a1: lb.conv("a1", c, c / 2),
            a2: lb.conv("a2", c / 2, c / 2),
            b1: lb.conv("b1", c, c / 4),
            b2: lb.conv("b2", c / 4, c / 4),
            b3: lb.conv("b3", c / 4, c / 2),
        }
    }

    pub fn forward<B: Backend>(&self, b: &mut B, x: &B::T) -> Result<B::T> {
        let a = b.sconv(x, &self.a1)?;
        let a = b.act(Activation::Relu, &a)?;
        let a = b.sconv(&a, &self.a2)?;
        let c = b.sconv(x, &self.b1)?;
        let c = b.act(Activation::Relu, &c)?;
        let c = b.sconv(&c, &self.b2)?;
        let c = b.act(Activation::Relu, &c)?;
        let c = b.sconv(&c, &self.b3)?;
        let branches = b.concat(&a, &c)?;
        b.add(x, &branches)
    }
}

/// Feature extraction module.
#[derive(Clone, Debug)]
pub struct Fem {
    pub config: FemConfig,
    pub input: ConvParam,
    pub blocks: Vec<Irn>,
}

impl Fem {
    pub fn declare(lb: &mut LayoutBuilder, name: &str, config: FemConfig) -> Self {
        lb.push_scope(name);
        let input = lb.conv("input", config.in_channels, config.channels);
        let blocks = (0..config.blocks)
            .map(|i| {
                lb.push_scope(&format!("irn{i}"));
                let irn = Irn::declare(lb, config.channels);
                lb.pop_scope();
                irn
            })
            .collect();
        lb.pop_scope();
        Self { config, input, blocks }
    }

    pub fn forward<B: Backend>(&self, b: &mut B, x: &B::T) -> Result<B::T> {
        let mut h = b.sconv(x, &self.input)?;
        for irn in &self.blocks {
            h = irn.forward(b, &h)?;
        }
        Ok(h)
    }
}

/// `fem_forward` on a standalone layout: convenience for tests and tools.
pub fn fem_forward<F: Scalar>(t: &SparseTensor<F>, fem: &Fem, params: &[F]) -> Result<SparseTensor<F>> {
    if t.channels() != fem.config.in_channels {
        return Err(Error::ChannelMismatch {
            expected: fem.config.in_channels,
            actual: t.channels(),
        });
    }
    fem.forward(&mut Eval::new(params), t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::octree::VoxelCoord;
    use crate::tensor::CENTER_TAP;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single() -> Arc<CoordSet> {
        Arc::new(CoordSet::new(vec![VoxelCoord::new(2, 2, 2)]))
    }

    fn fem_layout(cfg: FemConfig) -> (Fem, ParamLayout) {
        let mut lb = LayoutBuilder::new();
        let fem = Fem::declare(&mut lb, "fem", cfg);
        (fem, lb.finish())
    }

    #[test]
    fn fem_config_validation() {
        assert!(FemConfig::new(1, 16, 8).is_ok());
        assert!(FemConfig::new(0, 16, 8).is_err());
        assert!(FemConfig::new(1, 10, 8).is_err());
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        // Zero input conv lifts to zeros; each IRN then adds zero branches.
        let cfg = FemConfig::new(2, 8, 3).unwrap();
        let (fem, layout) = fem_layout(cfg);
        let params = vec![0.0f64; layout.len()];
        let cs = Arc::new(CoordSet::new(vec![VoxelCoord::new(0, 0, 0), VoxelCoord::new(0, 1, 0)]));
        let x = SparseTensor::new(cs, 3, vec![1.0, -2.0, 3.0, 0.5, 0.5, 0.5]);
        let y = fem_forward(&x, &fem, &params).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn residual_passes_lifted_input_when_branches_are_zero() {
        let cfg = FemConfig::new(1, 4, 1).unwrap();
        let (fem, layout) = fem_layout(cfg);
        let mut params = vec![0.0f64; layout.len()];
        // Input conv: center tap maps the single channel to [1, 2, 3, 4].
        for co in 0..4 {
            params[fem.input.w + CENTER_TAP * 4 + co] = (co + 1) as f64;
        }
        let x = SparseTensor::new(single(), 1, vec![0.5]);
        let y = fem_forward(&x, &fem, &params).unwrap();
        assert_eq!(y.data(), &[0.5, 1.0, 1.5, 2.0]);
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let (fem, layout) = fem_layout(FemConfig::new(1, 4, 2).unwrap());
        let params = vec![0.0f64; layout.len()];
        let x = SparseTensor::new(single(), 3, vec![0.0; 3]);
        assert!(matches!(
            fem_forward(&x, &fem, &params),
            Err(Error::ChannelMismatch { expected: 2, actual: 3 })
        ));
    }

    #[test]
    fn store_round_trip_and_base_equivalence() {
        let (_, layout) = fem_layout(FemConfig::new(1, 8, 2).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = layout.init(&mut rng);
        let mut store = ParamStore::new(layout.clone(), base.clone()).unwrap();
        assert_eq!(store.serialize(), vec![0.0; layout.len()]);
        assert_eq!(store.effective(), base);
        let base32: Vec<f32> = base.iter().map(|&v| v as f32).collect();
        assert_eq!(store.effective_f32(), base32);

        let v: Vec<f64> = (0..layout.len()).map(|i| (i as f64).sin()).collect();
        store.structure(&v).unwrap();
        assert_eq!(store.serialize(), v);
        assert!(matches!(store.structure(&v[1..]), Err(Error::LengthMismatch { .. })));
        let name = &layout.entries()[2].name;
        assert_eq!(store.enhancement_tensor(name).unwrap().len(), layout.entries()[2].len());
    }

    #[test]
    fn layout_names_are_ordered_and_unique() {
        let (_, layout) = fem_layout(FemConfig::new(2, 8, 1).unwrap());
        let names: Vec<&str> = layout.entries().iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names[0], "fem.input.weight");
        assert_eq!(names[2], "fem.irn0.a1.weight");
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        let mut off = 0;
        for s in layout.entries() {
            assert_eq!(s.offset, off);
            off += s.len();
        }
        assert_eq!(off, layout.len());
    }
}
