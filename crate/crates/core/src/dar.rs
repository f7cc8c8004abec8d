//! Distribution-agnostic refiner: turns LSOP features, the already decoded
//! stages and the prior logit into per-stage occupancy probabilities.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::nn::{Backend, ConvParam, Eval, Fem, FemConfig, LayoutBuilder, LinearParam, ParamLayout};
use crate::octree::{lsop_on, ScaleHierarchy, STAGES};
use crate::ppn::PriorCache;
use crate::tensor::{Activation, CoordSet, Scalar};

/// Input width of the stage feature extractor: bits of up to seven earlier stages.
pub const STAGE_CONTEXT: usize = STAGES - 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DarConfig {
    pub blocks: usize,
    pub channels: usize,
}

impl Default for DarConfig {
    fn default() -> Self {
        Self { blocks: 1, channels: 16 }
    }
}

#[derive(Clone, Debug)]
pub struct Dar {
    pub config: DarConfig,
    pub fem_g: Fem,
    pub fem_s: Fem,
    pub head: ConvParam,
    pub mlp1: LinearParam,
    pub mlp2: LinearParam,
    layout: ParamLayout,
}

impl Dar {
    pub fn new(config: DarConfig) -> Result<Self> {
        let c = config.channels;
        let mut lb = LayoutBuilder::new();
        let fem_g = Fem::declare(&mut lb, "dar.fem_g", FemConfig::new(config.blocks, c, STAGES)?);
        let fem_s = Fem::declare(&mut lb, "dar.fem_s", FemConfig::new(config.blocks, c, STAGE_CONTEXT)?);
        let head = lb.conv("dar.head", c + 1, c);
        let mlp1 = lb.linear("dar.mlp1", c, c);
        let mlp2 = lb.linear("dar.mlp2", c, 1);
        Ok(Self {
            config,
            fem_g,
            fem_s,
            head,
            mlp1,
            mlp2,
            layout: lb.finish(),
        })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.layout.len()
    }

    /// `F_G = FEM(LSOP)`.
    pub fn global<B: Backend>(&self, b: &mut B, coords: &Arc<CoordSet>) -> Result<B::T> {
        let lsop = lsop_on(coords);
        let x = b.constant(coords, STAGES, lsop.into_data())?;
        self.fem_g.forward(b, &x)
    }

    /// `F_I = F_G` for the first stage, else `F_G + FEM(decoded bits padded to 7 channels)`.
    pub fn stage_features<B: Backend>(
        &self,
        b: &mut B,
        coords: &Arc<CoordSet>,
        fg: &B::T,
        decoded: &[&[u8]],
    ) -> Result<B::T> {
        if decoded.len() >= STAGES {
            return Err(Error::StageOutOfRange(decoded.len() + 1));
        }
        if decoded.is_empty() {
            return Ok(b.share(fg));
        }
        let n = coords.len();
        let mut data = vec![0.0; n * STAGE_CONTEXT];
        for (c, bits) in decoded.iter().enumerate() {
            if bits.len() != n {
                return Err(Error::LengthMismatch {
                    expected: n,
                    actual: bits.len(),
                });
            }
            for (r, &v) in bits.iter().enumerate() {
                data[r * STAGE_CONTEXT + c] = v as f64;
            }
        }
        let x = b.constant(coords, STAGE_CONTEXT, data)?;
        let local = self.fem_s.forward(b, &x)?;
        b.add(fg, &local)
    }

    /// `sigmoid(MLP(SConv([F_I ; Pr])))`, one channel.
    pub fn predict<B: Backend>(&self, b: &mut B, fi: &B::T, prior: &B::T) -> Result<B::T> {
        let x = b.concat(fi, prior)?;
        let h = b.sconv(&x, &self.head)?;
        let h = b.linear(&h, &self.mlp1)?;
        let h = b.act(Activation::Relu, &h)?;
        let logit = b.linear(&h, &self.mlp2)?;
        b.act(Activation::Sigmoid, &logit)
    }

    /// Probabilities for all eight stages of one scale, teacher-forced.
    pub fn scale_probs<B: Backend>(
        &self,
        b: &mut B,
        coords: &Arc<CoordSet>,
        priors: &[Vec<f32>; STAGES],
        bits: &[&[u8]; STAGES],
    ) -> Result<Vec<B::T>> {
        let fg = self.global(b, coords)?;
        let mut out = Vec::with_capacity(STAGES);
        for j in 0..STAGES {
            let fi = self.stage_features(b, coords, &fg, &bits[..j])?;
            let pr = b.constant(coords, 1, priors[j].iter().map(|&v| v as f64).collect())?;
            out.push(self.predict(b, &fi, &pr)?);
        }
        Ok(out)
    }

    /// Estimated geometry bits of one frame, recorded on a tape (not normalized).
    pub fn frame_bits_tape(&self, tape: &mut Tape<'_>, h: &ScaleHierarchy, priors: &PriorCache) -> Result<NodeId> {
        let mut terms = Vec::new();
        for i in 0..h.coarsest_index() {
            let gt = h.stage_bits(i);
            let coords = Arc::new(CoordSet::new(h.scales()[i + 1].coords().to_vec()));
            let bits: [&[u8]; STAGES] = std::array::from_fn(|j| gt[j].bits.as_slice());
            let probs = self.scale_probs(tape, &coords, &priors.priors[i], &bits)?;
            for (j, p) in probs.iter().enumerate() {
                terms.push((tape.bce_bits(*p, &gt[j].bits)?, 1.0));
            }
        }
        tape.weighted_sum(&terms)
    }

    /// Estimated bits per scale (index `i` codes `scales[i]`), evaluated without a tape.
    pub fn frame_bits<F: Scalar>(&self, params: &[F], h: &ScaleHierarchy, priors: &PriorCache) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(h.coarsest_index());
        for i in 0..h.coarsest_index() {
            let gt = h.stage_bits(i);
            let coords = Arc::new(CoordSet::new(h.scales()[i + 1].coords().to_vec()));
            let bits: [&[u8]; STAGES] = std::array::from_fn(|j| gt[j].bits.as_slice());
            let probs = self.scale_probs(&mut Eval::new(params), &coords, &priors.priors[i], &bits)?;
            let mut total = 0.0;
            for (j, p) in probs.iter().enumerate() {
                let p64: Vec<f64> = p.data().iter().map(|v| v.to_f64()).collect();
                total += crate::autodiff::bce_bits(&p64, &gt[j].bits);
            }
            out.push(total);
        }
        Ok(out)
    }
}
