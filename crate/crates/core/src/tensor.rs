//! Sparse voxel tensors and the raw kernels behind every network op.
//!
//! A [`CoordSet`] is built once per coordinate list and carries the 3x3x3
//! neighbor table used by sparse convolution. Kernels are generic over
//! [`Scalar`] so the same code serves 64-bit training and 32-bit coding.

use std::collections::HashMap;
use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};
use std::sync::Arc;

use crate::octree::VoxelCoord;

/// Number of taps of a 3x3x3 kernel.
pub const KERNEL_TAPS: usize = 27;
/// Tap index of the zero offset.
pub const CENTER_TAP: usize = 13;

/// Tap index for an offset in `{-1, 0, 1}^3`.
pub const fn tap_index(dx: i32, dy: i32, dz: i32) -> usize {
    ((dx + 1) * 9 + (dy + 1) * 3 + (dz + 1)) as usize
}

pub fn tap_offset(k: usize) -> [i32; 3] {
    [(k / 9) as i32 - 1, ((k / 3) % 3) as i32 - 1, (k % 3) as i32 - 1]
}

/// Floating point type usable by the kernels.
pub trait Scalar:
    Copy
    + Debug
    + PartialOrd
    + Default
    + Send
    + Sync
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln_1p(self) -> Self;
    fn tanh(self) -> Self;
    fn is_finite(self) -> bool;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn ln_1p(self) -> Self {
                <$t>::ln_1p(self)
            }
            #[inline]
            fn tanh(self) -> Self {
                <$t>::tanh(self)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
        }
    };
}
impl_scalar!(f32);
impl_scalar!(f64);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Neighbor {
    pub tap: u8,
    pub index: u32,
}

/// Canonically ordered coordinates plus a hash index and the 27-neighborhood
/// of every point.
#[derive(Debug)]
pub struct CoordSet {
    coords: Vec<VoxelCoord>,
    index: HashMap<u64, u32>,
    starts: Vec<u32>,
    neighbors: Vec<Neighbor>,
}

impl CoordSet {
    /// `coords` must already be sorted and unique (as in a `PointCloud`).
    pub fn new(coords: Vec<VoxelCoord>) -> Self {
        debug_assert!(coords.windows(2).all(|w| w[0] < w[1]));
        let index: HashMap<u64, u32> = coords
            .iter()
            .enumerate()
            .map(|(i, c)| (c.key(), i as u32))
            .collect();
        let mut starts = Vec::with_capacity(coords.len() + 1);
        let mut neighbors = Vec::with_capacity(coords.len() * 8);
        starts.push(0);
        for c in &coords {
            for k in 0..KERNEL_TAPS {
                let [dx, dy, dz] = tap_offset(k);
                let (x, y, z) = (c.x as i64 + dx as i64, c.y as i64 + dy as i64, c.z as i64 + dz as i64);
                if x < 0 || y < 0 || z < 0 {
                    continue;
                }
                let n = VoxelCoord::new(x as u32, y as u32, z as u32);
                if let Some(&idx) = index.get(&n.key()) {
                    neighbors.push(Neighbor {
                        tap: k as u8,
                        index: idx,
                    });
                }
            }
            starts.push(neighbors.len() as u32);
        }
        Self {
            coords,
            index,
            starts,
            neighbors,
        }
    }

    pub fn coords(&self) -> &[VoxelCoord] {
        &self.coords
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn index_of(&self, c: &VoxelCoord) -> Option<usize> {
        self.index.get(&c.key()).map(|&i| i as usize)
    }

    /// Occupied neighbors of row `i` in tap order (center included).
    #[inline]
    pub fn neighbors(&self, i: usize) -> &[Neighbor] {
        &self.neighbors[self.starts[i] as usize..self.starts[i + 1] as usize]
    }

    pub fn neighbor_count(&self) -> usize {
        self.neighbors.len()
    }
}

/// Row-major feature matrix over a coordinate set.
#[derive(Clone, Debug)]
pub struct SparseTensor<F: Scalar> {
    coords: Arc<CoordSet>,
    channels: usize,
    data: Vec<F>,
}

impl<F: Scalar> SparseTensor<F> {
    pub fn new(coords: Arc<CoordSet>, channels: usize, data: Vec<F>) -> Self {
        assert!(channels >= 1, "tensor needs at least one channel");
        assert_eq!(data.len(), coords.len() * channels, "feature matrix shape");
        Self {
            coords,
            channels,
            data,
        }
    }

    pub fn filled(coords: Arc<CoordSet>, channels: usize, value: F) -> Self {
        let n = coords.len() * channels;
        Self::new(coords, channels, vec![value; n])
    }

    pub fn coords(&self) -> &Arc<CoordSet> {
        &self.coords
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn rows(&self) -> usize {
        self.coords.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.channels..(r + 1) * self.channels]
    }

    pub fn same_coords(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.coords, &other.coords)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<G: Scalar>(&self) -> SparseTensor<G> {
        SparseTensor {
            coords: self.coords.clone(),
            channels: self.channels,
            data: self.data.iter().map(|v| G::from_f64(v.to_f64())).collect(),
        }
    }
}

/// Pointwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Softplus,
    Tanh,
    Relu,
}

/// Above this input softplus returns `x` itself (the correction is below 1e-13).
pub const SOFTPLUS_LINEAR_CUTOFF: f64 = 30.0;

#[inline]
pub fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::ZERO {
        F::ONE / (F::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::ONE + e)
    }
}

#[inline]
pub fn softplus<F: Scalar>(x: F) -> F {
    if x > F::from_f64(SOFTPLUS_LINEAR_CUTOFF) {
        x
    } else if x < F::from_f64(-SOFTPLUS_LINEAR_CUTOFF) {
        x.exp()
    } else {
        // ln(1 + e^x) = max(x, 0) + ln(1 + e^{-|x|})
        let ax = if x < F::ZERO { -x } else { x };
        let pos = if x > F::ZERO { x } else { F::ZERO };
        pos + (-ax).exp().ln_1p()
    }
}

#[inline]
pub fn activate<F: Scalar>(kind: Activation, x: F) -> F {
    match kind {
        Activation::Sigmoid => sigmoid(x),
        Activation::Softplus => softplus(x),
        Activation::Tanh => x.tanh(),
        Activation::Relu => {
            if x > F::ZERO {
                x
            } else {
                F::ZERO
            }
        }
    }
}

/// Derivative of the activation given its input `x` and output `y`.
#[inline]
pub fn activation_grad(kind: Activation, x: f64, y: f64) -> f64 {
    match kind {
        Activation::Sigmoid => y * (1.0 - y),
        Activation::Softplus => sigmoid(x),
        Activation::Tanh => 1.0 - y * y,
        Activation::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// `out[i] = b + sum_{(k, n) in nbrs(i)} W_k^T x[n]`, weights laid out `[tap][cin][cout]`.
pub fn sconv_forward<F: Scalar>(
    cs: &CoordSet,
    x: &[F],
    cin: usize,
    w: &[F],
    b: &[F],
    cout: usize,
) -> Vec<F> {
    debug_assert_eq!(w.len(), KERNEL_TAPS * cin * cout);
    debug_assert_eq!(b.len(), cout);
    let n = cs.len();
    let mut out = vec![F::ZERO; n * cout];
    for i in 0..n {
        let orow = &mut out[i * cout..(i + 1) * cout];
        orow.copy_from_slice(b);
        for nb in cs.neighbors(i) {
            let xrow = &x[nb.index as usize * cin..(nb.index as usize + 1) * cin];
            let wk = &w[nb.tap as usize * cin * cout..(nb.tap as usize + 1) * cin * cout];
            for (ci, &a) in xrow.iter().enumerate() {
                if a == F::ZERO {
                    continue;
                }
                let wrow = &wk[ci * cout..(ci + 1) * cout];
                for (o, &wv) in orow.iter_mut().zip(wrow) {
                    *o += a * wv;
                }
            }
        }
    }
    out
}

/// Accumulates sparse convolution gradients into `gx` (optional), `gw` and `gb`.
#[allow(clippy::too_many_arguments)]
pub fn sconv_backward(
    cs: &CoordSet,
    x: &[f64],
    cin: usize,
    w: &[f64],
    cout: usize,
    gout: &[f64],
    mut gx: Option<&mut [f64]>,
    gw: &mut [f64],
    gb: &mut [f64],
) {
    for i in 0..cs.len() {
        let grow = &gout[i * cout..(i + 1) * cout];
        if grow.iter().all(|&g| g == 0.0) {
            continue;
        }
        for (acc, &g) in gb.iter_mut().zip(grow) {
            *acc += g;
        }
        for nb in cs.neighbors(i) {
            let n = nb.index as usize;
            let base = nb.tap as usize * cin * cout;
            let xrow = &x[n * cin..(n + 1) * cin];
            for ci in 0..cin {
                let wrow = &w[base + ci * cout..base + (ci + 1) * cout];
                let a = xrow[ci];
                if a != 0.0 {
                    let gwrow = &mut gw[base + ci * cout..base + (ci + 1) * cout];
                    for (acc, &g) in gwrow.iter_mut().zip(grow) {
                        *acc += a * g;
                    }
                }
                if let Some(gx) = gx.as_deref_mut() {
                    let mut s = 0.0;
                    for (&wv, &g) in wrow.iter().zip(grow) {
                        s += wv * g;
                    }
                    gx[n * cin + ci] += s;
                }
            }
        }
    }
}

/// Row-wise affine map, weights laid out `[cin][cout]`.
pub fn linear_forward<F: Scalar>(x: &[F], rows: usize, cin: usize, w: &[F], b: &[F], cout: usize) -> Vec<F> {
    let mut out = vec![F::ZERO; rows * cout];
    for r in 0..rows {
        let orow = &mut out[r * cout..(r + 1) * cout];
        orow.copy_from_slice(b);
        for (ci, &a) in x[r * cin..(r + 1) * cin].iter().enumerate() {
            if a == F::ZERO {
                continue;
            }
            for (o, &wv) in orow.iter_mut().zip(&w[ci * cout..(ci + 1) * cout]) {
                *o += a * wv;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    x: &[f64],
    rows: usize,
    cin: usize,
    w: &[f64],
    cout: usize,
    gout: &[f64],
    mut gx: Option<&mut [f64]>,
    gw: &mut [f64],
    gb: &mut [f64],
) {
    for r in 0..rows {
        let grow = &gout[r * cout..(r + 1) * cout];
        for (acc, &g) in gb.iter_mut().zip(grow) {
            *acc += g;
        }
        for ci in 0..cin {
            let a = x[r * cin + ci];
            let wrow = &w[ci * cout..(ci + 1) * cout];
            if a != 0.0 {
                for (acc, &g) in gw[ci * cout..(ci + 1) * cout].iter_mut().zip(grow) {
                    *acc += a * g;
                }
            }
            if let Some(gx) = gx.as_deref_mut() {
                let mut s = 0.0;
                for (&wv, &g) in wrow.iter().zip(grow) {
                    s += wv * g;
                }
                gx[r * cin + ci] += s;
            }
        }
    }
}

/// Channel concatenation, `a` first.
pub fn concat_rows<F: Scalar>(a: &[F], ca: usize, b: &[F], cb: usize, rows: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(rows * (ca + cb));
    for r in 0..rows {
        out.extend_from_slice(&a[r * ca..(r + 1) * ca]);
        out.extend_from_slice(&b[r * cb..(r + 1) * cb]);
    }
    out
}
