//! Learned compression of the enhancement vector: straight-through
//! quantization with a learnable step, a factorized density used both as a
//! differentiable rate proxy and as the coding model, and the parameter
//! sub-stream.

use rand::Rng;

use crate::coder::{Decoder, Encoder, FreqTable, MAX_FREQ_BITS};
use crate::error::{Error, Result};

/// Largest quantized magnitude.
pub const QMAX: i32 = (1 << 15) - 1;
/// Lower bound on a bin probability: the smallest frequency of the
/// parameter coding table, so rare symbols cost what the coder charges.
pub const MIN_LIKELIHOOD: f64 = 1.0 / (1u32 << MAX_FREQ_BITS) as f64;
/// Density hidden widths.
pub const DENSITY_FILTERS: [usize; 3] = [3, 3, 3];
/// Default spread of the initial density, in quantization steps.
pub const DENSITY_INIT_SCALE: f64 = 0.1;
/// Fixed-point scale of transmitted density parameters (Q8.8).
pub const DENSITY_FRAC_BITS: u32 = 8;

/// `round(e^fa * v)` clamped to `[-QMAX, QMAX]`.
pub fn ste_quantize(v: &[f64], fa: f64) -> Vec<i32> {
    let s = fa.exp();
    v.iter()
        .map(|&x| (s * x).round().clamp(-QMAX as f64, QMAX as f64) as i32)
        .collect()
}

/// `q / e^fa`.
pub fn dequantize(q: &[i32], fa: f64) -> Vec<f64> {
    let inv = (-fa).exp();
    q.iter().map(|&x| x as f64 * inv).collect()
}

/// Straight-through backward of `v -> dequantize(ste_quantize(v))`.
///
/// Rounding counts as identity, so `d vhat / d v = 1` and
/// `d vhat / d fa = v - vhat`; clamped entries pass no gradient.
pub fn ste_backward(v: &[f64], q: &[i32], fa: f64, gvhat: &[f64], gv: &mut [f64]) -> f64 {
    let inv = (-fa).exp();
    let mut gfa = 0.0;
    for i in 0..v.len() {
        if q[i].abs() == QMAX {
            continue;
        }
        gv[i] += gvhat[i];
        gfa += gvhat[i] * (v[i] - q[i] as f64 * inv);
    }
    gfa
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Monotone scalar CDF `c(x) = sigmoid(logit(x))` built from layers
/// `x -> g(softplus(H) x + b)` with gated `g(y) = y + tanh(a) tanh(y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Density {
    /// Flat parameters: per layer `H`, then `b`, then `a` (no gate on the last layer).
    pub params: Vec<f64>,
}

#[derive(Clone, Copy)]
struct LayerShape {
    din: usize,
    dout: usize,
    h: usize,
    b: usize,
    a: Option<usize>,
}

fn layer_shapes() -> Vec<LayerShape> {
    let mut dims = vec![1];
    dims.extend(DENSITY_FILTERS);
    dims.push(1);
    let mut off = 0;
    let mut out = Vec::new();
    for k in 0..dims.len() - 1 {
        let (din, dout) = (dims[k], dims[k + 1]);
        let h = off;
        off += din * dout;
        let b = off;
        off += dout;
        let a = if k + 2 < dims.len() {
            let a = off;
            off += dout;
            Some(a)
        } else {
            None
        };
        out.push(LayerShape { din, dout, h, b, a });
    }
    out
}

/// Number of density parameters.
pub fn density_param_count() -> usize {
    let last = *layer_shapes().last().unwrap();
    last.b + last.dout
}

/// Intermediate values of one logit evaluation, kept for backward.
struct Trace {
    // Per layer: input vector and pre-gate affine output.
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Density {
    /// Symmetric density centred on zero whose CDF rises over roughly
    /// `init_scale` quantization steps. Zero biases make the logit odd.
    pub fn new(init_scale: f64) -> Self {
        let shapes = layer_shapes();
        let mut params = vec![0.0; density_param_count()];
        let scale = init_scale.powf(1.0 / shapes.len() as f64);
        for s in &shapes {
            let init = (1.0 / scale / s.dout as f64).exp_m1().ln();
            for v in &mut params[s.h..s.h + s.din * s.dout] {
                *v = init;
            }
        }
        Self { params }
    }

    pub fn from_params(params: Vec<f64>) -> Result<Self> {
        if params.len() != density_param_count() {
            return Err(Error::LengthMismatch {
                expected: density_param_count(),
                actual: params.len(),
            });
        }
        Ok(Self { params })
    }

    fn logit_trace(&self, x: f64) -> (f64, Trace) {
        let mut h = vec![x];
        let mut tr = Trace {
            inputs: Vec::new(),
            pre: Vec::new(),
        };
        for s in layer_shapes() {
            let mut y = vec![0.0; s.dout];
            for (o, yo) in y.iter_mut().enumerate() {
                let mut acc = self.params[s.b + o];
                for (i, hi) in h.iter().enumerate() {
                    acc += softplus(self.params[s.h + o * s.din + i]) * hi;
                }
                *yo = acc;
            }
            tr.inputs.push(h);
            tr.pre.push(y.clone());
            if let Some(a) = s.a {
                for (o, yo) in y.iter_mut().enumerate() {
                    *yo += self.params[a + o].tanh() * yo.tanh();
                }
            }
            h = y;
        }
        (h[0], tr)
    }

    /// Logit of the CDF at `x`.
    pub fn logit(&self, x: f64) -> f64 {
        self.logit_trace(x).0
    }

    pub fn cdf(&self, x: f64) -> f64 {
        sigmoid(self.logit(x))
    }

    /// Backpropagates `g = d/d logit` into `gparams`; returns `d/dx`.
    fn logit_backward(&self, tr: &Trace, g: f64, gparams: &mut [f64]) -> f64 {
        let shapes = layer_shapes();
        let mut gh = vec![g];
        for (k, s) in shapes.iter().enumerate().rev() {
            let pre = &tr.pre[k];
            let mut gy = gh.clone();
            if let Some(a) = s.a {
                for o in 0..s.dout {
                    let ta = self.params[a + o].tanh();
                    let ty = pre[o].tanh();
                    gparams[a + o] += gh[o] * (1.0 - ta * ta) * ty;
                    gy[o] = gh[o] * (1.0 + ta * (1.0 - ty * ty));
                }
            }
            let input = &tr.inputs[k];
            let mut gin = vec![0.0; s.din];
            for o in 0..s.dout {
                gparams[s.b + o] += gy[o];
                for i in 0..s.din {
                    let w = self.params[s.h + o * s.din + i];
                    gparams[s.h + o * s.din + i] += gy[o] * sigmoid(w) * input[i];
                    gin[i] += gy[o] * softplus(w);
                }
            }
            gh = gin;
        }
        gh[0]
    }

    /// Mass of the unit bin centred on `x`, floored at [`MIN_LIKELIHOOD`].
    pub fn likelihood(&self, x: f64) -> f64 {
        let lo = self.logit(x - 0.5);
        let hi = self.logit(x + 0.5);
        // Evaluate on the side of the sigmoid where it is not saturated.
        let s = if lo + hi > 0.0 { -1.0 } else { 1.0 };
        (sigmoid(s * hi) - sigmoid(s * lo)).abs().max(MIN_LIKELIHOOD)
    }

    /// `-log2 likelihood(x)` and its gradients w.r.t. `x` and the parameters.
    pub fn bits_and_grad(&self, x: f64, gparams: &mut [f64]) -> (f64, f64) {
        let (lo, tlo) = self.logit_trace(x - 0.5);
        let (hi, thi) = self.logit_trace(x + 0.5);
        let s = if lo + hi > 0.0 { -1.0 } else { 1.0 };
        let (shi, slo) = (sigmoid(s * hi), sigmoid(s * lo));
        let diff = shi - slo;
        let lik = diff.abs();
        if lik < MIN_LIKELIHOOD {
            return (-MIN_LIKELIHOOD.log2(), 0.0);
        }
        let bits = -lik.log2();
        // d bits / d lik = -1 / (lik ln 2); d lik / d diff = sign(diff).
        let gdiff = -diff.signum() / (lik * std::f64::consts::LN_2);
        let ghi = gdiff * s * shi * (1.0 - shi);
        let glo = -gdiff * s * slo * (1.0 - slo);
        let gx = self.logit_backward(&thi, ghi, gparams) + self.logit_backward(&tlo, glo, gparams);
        (bits, gx)
    }

    /// Probabilities of integer symbols `-r ..= r`.
    pub fn pmf(&self, r: i32) -> Vec<f64> {
        (-r..=r).map(|q| self.likelihood(q as f64)).collect()
    }

    /// Q8.8 fixed-point transmission form.
    pub fn to_fixed(&self) -> Vec<i16> {
        let scale = (1u32 << DENSITY_FRAC_BITS) as f64;
        self.params
            .iter()
            .map(|&p| (p * scale).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16)
            .collect()
    }

    pub fn from_fixed(v: &[i16]) -> Result<Self> {
        let scale = (1u32 << DENSITY_FRAC_BITS) as f64;
        Self::from_params(v.iter().map(|&x| x as f64 / scale).collect())
    }

    /// The density the decoder will see.
    pub fn transmitted(&self) -> Self {
        Self::from_fixed(&self.to_fixed()).expect("same length")
    }
}

/// Noisy rate estimate of `v` and its gradients.
pub struct RateProxy {
    pub bits: f64,
    pub grad_v: Vec<f64>,
    pub grad_fa: f64,
    pub grad_density: Vec<f64>,
}

/// `-sum log2 P(e^fa v + u)` with `u ~ U(-0.5, 0.5)` drawn from `rng`.
pub fn rate_proxy<R: Rng>(v: &[f64], fa: f64, density: &Density, rng: &mut R) -> RateProxy {
    let noise: Vec<f64> = (0..v.len()).map(|_| rng.random_range(-0.5..0.5)).collect();
    rate_with_noise(v, fa, density, &noise)
}

/// [`rate_proxy`] with explicit noise.
pub fn rate_with_noise(v: &[f64], fa: f64, density: &Density, noise: &[f64]) -> RateProxy {
    let s = fa.exp();
    let mut grad_density = vec![0.0; density.params.len()];
    let mut grad_v = vec![0.0; v.len()];
    let mut grad_fa = 0.0;
    let mut bits = 0.0;
    for i in 0..v.len() {
        let x = s * v[i] + noise[i];
        let (b, gx) = density.bits_and_grad(x, &mut grad_density);
        bits += b;
        grad_v[i] = gx * s;
        grad_fa += gx * s * v[i];
    }
    RateProxy {
        bits,
        grad_v,
        grad_fa,
        grad_density,
    }
}

/// Exact `-sum log2 pmf(q)` of symbols under the coding table's source pmf.
pub fn ideal_bits(q: &[i32], density: &Density) -> f64 {
    let r = q.iter().map(|v| v.abs()).max().unwrap_or(0);
    if r == 0 {
        return 0.0;
    }
    let pmf = density.pmf(r);
    let sum: f64 = pmf.iter().sum();
    q.iter().map(|&v| -(pmf[(v + r) as usize] / sum).log2()).sum()
}

/// Everything the decoder needs to rebuild the enhancement vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamPayload {
    pub count: u32,
    pub fa: f32,
    pub density: Vec<i16>,
    pub max_abs: u16,
    pub data: Vec<u8>,
}

fn table_for(density: &Density, r: i32) -> Result<FreqTable> {
    let pmf = density.pmf(r);
    FreqTable::from_pmf(&pmf, MAX_FREQ_BITS)
}

/// Arithmetic-codes `q` with the pmf of `density` over `[-R, R]`, `R = max |q|`.
pub fn encode_params(q: &[i32], density: &Density) -> Result<(u16, Vec<u8>)> {
    let r = q.iter().map(|v| v.abs()).max().unwrap_or(0);
    if r > QMAX {
        return Err(Error::InvalidArgument(format!("symbol magnitude {r} exceeds {QMAX}")));
    }
    if r == 0 {
        return Ok((0, Vec::new()));
    }
    let table = table_for(density, r)?;
    let mut enc = Encoder::new();
    for &v in q {
        table.encode(&mut enc, (v + r) as usize);
    }
    Ok((r as u16, enc.finish()))
}

pub fn decode_params(data: &[u8], count: usize, max_abs: u16, density: &Density) -> Result<Vec<i32>> {
    let r = max_abs as i32;
    if r > QMAX {
        return Err(Error::ParamDecode { position: 0 });
    }
    if r == 0 {
        return Ok(vec![0; count]);
    }
    let table = table_for(density, r)?;
    let mut dec = Decoder::new(data).map_err(|_| Error::ParamDecode { position: 0 })?;
    (0..count)
        .map(|i| {
            dec.decode_symbol(&table)
                .map(|s| s as i32 - r)
                .map_err(|_| Error::ParamDecode { position: i })
        })
        .collect()
}

impl ParamPayload {
    /// Serialized size in bits.
    pub fn bits(&self) -> u64 {
        8 * self.to_bytes().len() as u64
    }

    /// `count u32 | fa f32 | n u16, density i16[n] | R u16 | len u32, bytes`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(14 + 2 * self.density.len() + self.data.len());
        out.extend(self.count.to_le_bytes());
        out.extend(self.fa.to_le_bytes());
        out.extend((self.density.len() as u16).to_le_bytes());
        for d in &self.density {
            out.extend(d.to_le_bytes());
        }
        out.extend(self.max_abs.to_le_bytes());
        out.extend((self.data.len() as u32).to_le_bytes());
        out.extend(&self.data);
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let mut r = crate::bitstream::Reader::new(b);
        let count = r.u32()?;
        let fa = f32::from_le_bytes(r.take(4)?.try_into().unwrap());
        let n = r.u16()? as usize;
        let density = (0..n).map(|_| r.u16().map(|v| v as i16)).collect::<Result<Vec<_>>>()?;
        let max_abs = r.u16()?;
        let len = r.u32()? as usize;
        let data = r.take(len)?.to_vec();
        if !r.is_empty() {
            return Err(Error::Corrupt("trailing bytes in parameter stream".into()));
        }
        Ok(Self {
            count,
            fa,
            density,
            max_abs,
            data,
        })
    }

    /// Quantizes and codes `v`; the returned payload decodes to [`ParamPayload::decode`].
    pub fn encode(v: &[f64], fa: f64, density: &Density) -> Result<Self> {
        let fa32 = fa as f32;
        let sent = density.transmitted();
        let q = ste_quantize(v, fa32 as f64);
        let (max_abs, data) = encode_params(&q, &sent)?;
        Ok(Self {
            count: v.len() as u32,
            fa: fa32,
            density: sent.to_fixed(),
            max_abs,
            data,
        })
    }

    /// Quantized symbols as the decoder recovers them.
    pub fn symbols(&self) -> Result<Vec<i32>> {
        let density = Density::from_fixed(&self.density)?;
        decode_params(&self.data, self.count as usize, self.max_abs, &density)
    }

    /// Dequantized enhancement vector.
    pub fn decode(&self) -> Result<Vec<f64>> {
        Ok(dequantize(&self.symbols()?, self.fa as f64))
    }
}

/// Raw 32-bit float serialization used when learned compression is off.
pub fn raw_params_bytes(v: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * v.len());
    out.extend((v.len() as u32).to_le_bytes());
    for &x in v {
        out.extend((x as f32).to_le_bytes());
    }
    out
}

pub fn raw_params_from_bytes(b: &[u8]) -> Result<Vec<f64>> {
    let mut r = crate::bitstream::Reader::new(b);
    let n = r.u32()? as usize;
    let body = r.take(4 * n)?;
    if !r.is_empty() {
        return Err(Error::Corrupt("trailing bytes in raw parameter stream".into()));
    }
    Ok(body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect())
}
