//! Pretrained prior network: an 8-stage recurrent prior generator whose
//! running feature is nudged by each decoded stage through a softplus mask.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::nn::{Backend, ConvParam, Eval, Fem, FemConfig, LayoutBuilder, ParamLayout};
use crate::octree::{ScaleHierarchy, STAGES};
use crate::tensor::{Activation, CoordSet, Scalar, SparseTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PpnConfig {
    pub blocks: usize,
    pub channels: usize,
}

impl Default for PpnConfig {
    fn default() -> Self {
        Self { blocks: 3, channels: 32 }
    }
}

/// Running input feature `I` and stage feature `T` for one scale.
#[derive(Clone, Debug)]
pub struct PpnState<T> {
    pub i: T,
    pub t: T,
}

#[derive(Clone, Debug)]
pub struct Ppn {
    pub config: PpnConfig,
    pub fem_in: Fem,
    pub fem_t: Fem,
    pub head: ConvParam,
    layout: ParamLayout,
}

impl Ppn {
    pub fn new(config: PpnConfig) -> Result<Self> {
        let fin = FemConfig::new(config.blocks, config.channels, 1)?;
        let ft = FemConfig::new(config.blocks, config.channels, config.channels)?;
        let mut lb = LayoutBuilder::new();
        let fem_in = Fem::declare(&mut lb, "ppn.fem_in", fin);
        let fem_t = Fem::declare(&mut lb, "ppn.fem_t", ft);
        let head = lb.conv("ppn.head", config.channels, 1);
        Ok(Self {
            config,
            fem_in,
            fem_t,
            head,
            layout: lb.finish(),
        })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    /// `I1 = FEM(ones)`, `T1 = FEM(I1)` on the parent coordinates.
    pub fn open_scale<B: Backend>(&self, b: &mut B, coords: &Arc<CoordSet>) -> Result<PpnState<B::T>> {
        if coords.is_empty() {
            return Err(Error::EmptyCloud);
        }
        let ones = b.constant(coords, 1, vec![1.0; coords.len()])?;
        let i = self.fem_in.forward(b, &ones)?;
        let t = self.fem_t.forward(b, &i)?;
        Ok(PpnState { i, t })
    }

    /// One-channel logit head on `T`.
    pub fn prior<B: Backend>(&self, b: &mut B, state: &PpnState<B::T>) -> Result<B::T> {
        b.sconv(&state.t, &self.head)
    }

    /// `I += softplus(T) * (2 bits - 1)`, then `T = FEM(I)`.
    pub fn mask_update<B: Backend>(&self, b: &mut B, state: &PpnState<B::T>, bits: &[u8]) -> Result<PpnState<B::T>> {
        let sign: Vec<f64> = bits.iter().map(|&v| if v != 0 { 1.0 } else { -1.0 }).collect();
        let sp = b.act(Activation::Softplus, &state.t)?;
        let m = b.scale_rows(&sp, &sign)?;
        let i = b.add(&state.i, &m)?;
        let t = self.fem_t.forward(b, &i)?;
        Ok(PpnState { i, t })
    }

    /// Logits for all eight stages of one scale given the true stage bits.
    /// Stage `j`'s logit only sees bits of stages `< j`.
    pub fn scale_priors<B: Backend>(
        &self,
        b: &mut B,
        coords: &Arc<CoordSet>,
        bits: &[&[u8]; STAGES],
    ) -> Result<Vec<B::T>> {
        let mut state = self.open_scale(b, coords)?;
        let mut out = Vec::with_capacity(STAGES);
        for (j, stage_bits) in bits.iter().enumerate() {
            out.push(self.prior(b, &state)?);
            if j + 1 < STAGES {
                state = self.mask_update(b, &state, stage_bits)?;
            }
        }
        Ok(out)
    }

    /// Teacher-forced pretraining loss in bits per finest point, recorded on a tape.
    pub fn pretrain_loss(&self, tape: &mut Tape<'_>, h: &ScaleHierarchy) -> Result<NodeId> {
        let n = h.finest().len() as f64;
        let mut terms = Vec::new();
        for i in 0..h.coarsest_index() {
            let gt = h.stage_bits(i);
            let coords = Arc::new(CoordSet::new(h.scales()[i + 1].coords().to_vec()));
            let bits: [&[u8]; STAGES] = std::array::from_fn(|j| gt[j].bits.as_slice());
            let priors = self.scale_priors(tape, &coords, &bits)?;
            for (j, pr) in priors.iter().enumerate() {
                let p = tape.act(Activation::Sigmoid, *pr);
                terms.push((tape.bce_bits(p, &gt[j].bits)?, 1.0 / n));
            }
        }
        tape.weighted_sum(&terms)
    }
}

/// Per-scale, per-stage logits computed once with ground-truth feedback.
///
/// `priors[i][j]` belongs to the parents `scales[i + 1]` and stage `j + 1`.
/// The forward pass is the same one the decoder runs, so the values can be
/// reused for training and coding.
#[derive(Clone, Debug, Default)]
pub struct PriorCache {
    pub priors: Vec<[Vec<f32>; STAGES]>,
}

impl PriorCache {
    pub fn compute<F: Scalar>(ppn: &Ppn, params: &[F], h: &ScaleHierarchy) -> Result<Self> {
        let mut priors = Vec::with_capacity(h.coarsest_index());
        for i in 0..h.coarsest_index() {
            let gt = h.stage_bits(i);
            let coords = Arc::new(CoordSet::new(h.scales()[i + 1].coords().to_vec()));
            let bits: [&[u8]; STAGES] = std::array::from_fn(|j| gt[j].bits.as_slice());
            let mut ev = Eval::new(params);
            let pr = ppn.scale_priors(&mut ev, &coords, &bits)?;
            priors.push(std::array::from_fn(|j| pr[j].data().iter().map(|v| v.to_f64() as f32).collect()));
        }
        Ok(Self { priors })
    }

    /// All-zero logits, used when the prior network is switched off.
    pub fn zeros(h: &ScaleHierarchy) -> Self {
        let priors = (0..h.coarsest_index())
            .map(|i| std::array::from_fn(|_| vec![0.0; h.scales()[i + 1].len()]))
            .collect();
        Self { priors }
    }
}

/// Mean bits per point of the pretraining objective, evaluated without a tape.
pub fn pretrain_bits<F: Scalar>(ppn: &Ppn, params: &[F], h: &ScaleHierarchy) -> Result<f64> {
    let cache = PriorCache::compute(ppn, params, h)?;
    let mut bits = 0.0;
    for (i, stages) in cache.priors.iter().enumerate() {
        let gt = h.stage_bits(i);
        for (j, logits) in stages.iter().enumerate() {
            let p: Vec<f64> = logits.iter().map(|&l| crate::tensor::sigmoid(l as f64)).collect();
            bits += crate::autodiff::bce_bits(&p, &gt[j].bits);
        }
    }
    Ok(bits / h.finest().len() as f64)
}

/// Evaluates the eight logits of one scale in 32-bit with given stage bits.
pub fn priors_for_bits(ppn: &Ppn, params: &[f32], coords: &Arc<CoordSet>, bits: &[&[u8]; STAGES]) -> Result<Vec<SparseTensor<f32>>> {
    ppn.scale_priors(&mut Eval::new(params), coords, bits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::octree::{build_hierarchy, PointCloud, VoxelCoord};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> Ppn {
        Ppn::new(PpnConfig { blocks: 1, channels: 4 }).unwrap()
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize, depth: u32) -> PointCloud {
        let m = 1u32 << depth;
        let pts = (0..n)
            .map(|_| VoxelCoord::new(rng.random_range(0..m), rng.random_range(0..m), rng.random_range(0..m)))
            .collect();
        PointCloud::new(pts, depth as u8).unwrap()
    }

    #[test]
    fn zero_head_gives_constant_logit() {
        let ppn = tiny();
        let mut params = vec![0.0f64; ppn.layout().len()];
        params[ppn.head.b] = 0.75;
        let cs = Arc::new(CoordSet::new(vec![VoxelCoord::new(1, 2, 3), VoxelCoord::new(1, 2, 4)]));
        let mut ev = Eval::new(&params);
        let st = ppn.open_scale(&mut ev, &cs).unwrap();
        let pr = ppn.prior(&mut ev, &st).unwrap();
        assert_eq!(pr.data(), &[0.75, 0.75]);
    }

    #[test]
    fn mask_update_signs() {
        let ppn = tiny();
        let params = vec![0.0f64; ppn.layout().len()];
        let cs = Arc::new(CoordSet::new(vec![VoxelCoord::new(0, 0, 0), VoxelCoord::new(5, 5, 5)]));
        let mut ev = Eval::new(&params);
        let st = ppn.open_scale(&mut ev, &cs).unwrap();
        // Zero weights: I = 0 and T = 0, so the update adds +-ln 2.
        let next = ppn.mask_update(&mut ev, &st, &[1, 0]).unwrap();
        let ln2 = std::f64::consts::LN_2;
        for c in 0..4 {
            assert!((next.i.row(0)[c] - ln2).abs() < 1e-15);
            assert!((next.i.row(1)[c] + ln2).abs() < 1e-15);
        }
    }

    #[test]
    fn stage_causality() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ppn = tiny();
        let params = ppn.layout().init(&mut rng);
        let pc = random_cloud(&mut rng, 300, 5);
        let h = build_hierarchy(&pc, 8).unwrap();
        let coords = Arc::new(CoordSet::new(h.scales()[1].coords().to_vec()));
        let gt = h.stage_bits(0);
        let mut bits: Vec<Vec<u8>> = gt.iter().map(|s| s.bits.clone()).collect();
        let refs: [&[u8]; STAGES] = std::array::from_fn(|j| bits[j].as_slice());
        let base = ppn.scale_priors(&mut Eval::new(&params), &coords, &refs).unwrap();
        for v in &mut bits[4] {
            *v ^= 1;
        }
        let refs: [&[u8]; STAGES] = std::array::from_fn(|j| bits[j].as_slice());
        let flipped = ppn.scale_priors(&mut Eval::new(&params), &coords, &refs).unwrap();
        for j in 0..=4 {
            assert_eq!(base[j].data(), flipped[j].data(), "stage {}", j + 1);
        }
        assert_ne!(base[5].data(), flipped[5].data());
    }

    #[test]
    fn constant_logit_costs_one_bit_per_candidate() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ppn = tiny();
        let params = vec![0.0f64; ppn.layout().len()];
        let pc = random_cloud(&mut rng, 500, 6);
        let h = build_hierarchy(&pc, 16).unwrap();
        let bpp = pretrain_bits(&ppn, &params, &h).unwrap();
        let expect = h.candidate_children() as f64 / pc.len() as f64;
        assert!((bpp - expect).abs() < 1e-12);

        let mut tape = Tape::new(&params);
        let loss = ppn.pretrain_loss(&mut tape, &h).unwrap();
        assert!((tape.scalar(loss) - expect).abs() < 1e-9);
    }

    #[test]
    fn tape_and_eval_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ppn = tiny();
        let params = ppn.layout().init(&mut rng);
        let pc = random_cloud(&mut rng, 200, 5);
        let h = build_hierarchy(&pc, 8).unwrap();
        let mut tape = Tape::new(&params);
        let loss = ppn.pretrain_loss(&mut tape, &h).unwrap();
        let direct = pretrain_bits(&ppn, &params, &h).unwrap();
        // The cache stores 32-bit logits.
        assert!((tape.scalar(loss) - direct).abs() < 1e-4 * direct.max(1.0));
    }
}
