//! Group encoder and decoder.
//!
//! For every frame, scales are coded from coarse to fine and each scale in
//! eight stages. Per stage the prior logit and refiner probabilities are
//! computed from already coded stages only, the stage bits are arithmetic
//! coded, and the prior network's running feature is updated with them.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::assets::Assets;
use crate::bitstream::{Bitstream, Flags, FrameStreams, Layout};
use crate::coder::{quantize_prob, Decoder, Encoder};
use crate::dar::Dar;
use crate::error::{Error, Result};
use crate::nn::Eval;
use crate::octree::{reconstruct_scale, PointCloud, StageBits, STAGES};
use crate::optim::TrainConfig;
use crate::ppn::{Ppn, PpnState};
use crate::tensor::{CoordSet, SparseTensor};
use crate::train::{effective_f32, overfit_enhancement, FrameData, Overfit, OverfitConfig, ParamStream};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub coarse_threshold: usize,
    pub smc: bool,
    pub ppn: bool,
    pub train: TrainConfig,
    pub fa_init: f64,
    /// Worker threads for per-frame work.
    pub threads: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            coarse_threshold: 64,
            smc: true,
            ppn: true,
            train: TrainConfig::overfit(),
            fa_init: OverfitConfig::default().fa_init,
            threads: 1,
        }
    }
}

impl CodecConfig {
    pub fn flags(&self) -> Flags {
        Flags {
            smc: self.smc,
            ppn: self.ppn,
        }
    }

    pub fn overfit(&self) -> OverfitConfig {
        OverfitConfig {
            train: self.train,
            smc: self.smc,
            fa_init: self.fa_init,
            ..OverfitConfig::default()
        }
    }
}

/// Wall-clock seconds per phase.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub overfit_s: f64,
    pub prior_s: f64,
    pub model_s: f64,
    /// Coding time per scale index (0 = finest), summed over frames.
    pub scale_s: Vec<f64>,
    pub total_s: f64,
}

/// Bitstream allocation of one coded group.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub frames: usize,
    pub points: usize,
    pub param_count: usize,
    pub header_bits: u64,
    pub model_bits: u64,
    /// Geometry bits per scale index (0 = finest), summed over frames.
    pub scale_bits: Vec<u64>,
    pub total_bits: u64,
    pub bpp: f64,
    pub geometry_bpp: f64,
    pub model_bpp: f64,
    pub selected_epoch: Option<usize>,
    pub timings: Timings,
}

impl RateReport {
    fn from_layout(layout: &Layout, points: usize, frames: &[FrameStreams]) -> Self {
        let mut scale_bits = Vec::new();
        for (f, sizes) in frames.iter().zip(&layout.stage_bits) {
            let sc = f.scale_count();
            for (k, s) in sizes.iter().enumerate() {
                let i = sc - 2 - k;
                if scale_bits.len() <= i {
                    scale_bits.resize(i + 1, 0);
                }
                scale_bits[i] += s.iter().sum::<u64>();
            }
        }
        let geometry: u64 = scale_bits.iter().sum();
        let total = layout.total_bits();
        let n = points as f64;
        Self {
            frames: frames.len(),
            points,
            header_bits: layout.header_bits,
            model_bits: layout.param_bits,
            scale_bits,
            total_bits: total,
            bpp: total as f64 / n,
            geometry_bpp: geometry as f64 / n,
            model_bpp: layout.param_bits as f64 / n,
            ..Default::default()
        }
    }
}

/// Stage-by-stage probability generator for one scale.
pub struct ScaleSession<'a> {
    dar: &'a Dar,
    dar_params: &'a [f32],
    ppn: Option<(&'a Ppn, &'a [f32])>,
    coords: Arc<CoordSet>,
    state: Option<PpnState<SparseTensor<f32>>>,
    fg: SparseTensor<f32>,
    decoded: Vec<Vec<u8>>,
}

impl<'a> ScaleSession<'a> {
    pub fn new(dar: &'a Dar, dar_params: &'a [f32], ppn: Option<(&'a Ppn, &'a [f32])>, parents: &PointCloud) -> Result<Self> {
        let coords = Arc::new(CoordSet::new(parents.coords().to_vec()));
        let state = match ppn {
            Some((net, p)) => Some(net.open_scale(&mut Eval::new(p), &coords)?),
            None => None,
        };
        let fg = dar.global(&mut Eval::new(dar_params), &coords)?;
        Ok(Self {
            dar,
            dar_params,
            ppn,
            coords,
            state,
            fg,
            decoded: Vec::with_capacity(STAGES),
        })
    }

    /// Stage about to be coded (1-based).
    pub fn stage(&self) -> usize {
        self.decoded.len() + 1
    }

    /// `P(bit = 1)` for every parent at the current stage.
    pub fn probabilities(&self) -> Result<Vec<f32>> {
        if self.decoded.len() >= STAGES {
            return Err(Error::StageOutOfRange(self.stage()));
        }
        let prior = match (&self.ppn, &self.state) {
            (Some((net, p)), Some(st)) => net.prior(&mut Eval::new(p), st)?,
            _ => SparseTensor::filled(self.coords.clone(), 1, 0.0),
        };
        let mut ev = Eval::new(self.dar_params);
        let refs: Vec<&[u8]> = self.decoded.iter().map(|b| b.as_slice()).collect();
        let fi = self.dar.stage_features(&mut ev, &self.coords, &self.fg, &refs)?;
        Ok(self.dar.predict(&mut ev, &fi, &prior)?.into_data())
    }

    /// Records the stage's bits and advances the prior network.
    pub fn commit(&mut self, bits: Vec<u8>) -> Result<()> {
        if bits.len() != self.coords.len() {
            return Err(Error::LengthMismatch {
                expected: self.coords.len(),
                actual: bits.len(),
            });
        }
        if self.decoded.len() + 1 < STAGES {
            if let (Some((net, p)), Some(st)) = (&self.ppn, &self.state) {
                self.state = Some(net.mask_update(&mut Eval::new(p), st, &bits)?);
            }
        }
        self.decoded.push(bits);
        Ok(())
    }
}

/// Result of encoding one group.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub bytes: Vec<u8>,
    pub report: RateReport,
    pub overfit: Option<Overfit>,
    /// Estimated `sum -log2 P` per `[frame][scale coarse to fine][stage]`.
    pub stage_estimates: Vec<Vec<[f64; STAGES]>>,
    /// Actual coded bits in the same order.
    pub stage_bits: Vec<Vec<[u64; STAGES]>>,
}

fn par_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<_>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

struct CodedFrame {
    streams: FrameStreams,
    estimates: Vec<[f64; STAGES]>,
    scale_s: Vec<f64>,
}

/// Encoder and decoder bound to one set of pretrained assets.
pub struct Codec {
    assets: Assets,
    ppn: Ppn,
    dar: Dar,
    checksum: [u8; 32],
}

impl Codec {
    pub fn new(assets: Assets) -> Result<Self> {
        let ppn = assets.ppn_model()?;
        let dar = assets.dar_model()?;
        let checksum = assets.checksum();
        Ok(Self {
            assets,
            ppn,
            dar,
            checksum,
        })
    }

    pub fn assets(&self) -> &Assets {
        &self.assets
    }

    pub fn checksum(&self) -> [u8; 32] {
        self.checksum
    }

    pub fn dar(&self) -> &Dar {
        &self.dar
    }

    pub fn ppn(&self) -> &Ppn {
        &self.ppn
    }

    fn base(&self, with_ppn: bool) -> Result<&[f32]> {
        let b = if with_ppn { &self.assets.base } else { &self.assets.base_no_ppn };
        if b.is_empty() {
            self.assets.base_for(with_ppn)?;
        }
        Ok(b)
    }

    /// Bit depth shared by all frames.
    fn group_bitdepth(frames: &[PointCloud]) -> Result<u8> {
        frames.iter().map(|f| f.bitdepth()).max().ok_or(Error::EmptyCloud)
    }

    /// Hierarchies and cached priors for a group, all at a common bit depth.
    pub fn prepare(&self, frames: &[PointCloud], cfg: &CodecConfig) -> Result<Vec<FrameData>> {
        let depth = Self::group_bitdepth(frames)?;
        let ppn = cfg.ppn.then_some((&self.ppn, self.assets.ppn.as_slice()));
        let out = par_map(frames, cfg.threads, |f| {
            let f = PointCloud::new(f.coords().to_vec(), depth)?;
            FrameData::new(&f, cfg.coarse_threshold, ppn)
        });
        out.into_iter().collect()
    }

    /// Overfits the enhancement layer, then codes the group.
    pub fn encode(&self, frames: &[PointCloud], cfg: &CodecConfig) -> Result<Encoded> {
        let start = Instant::now();
        let data = self.prepare(frames, cfg)?;
        let prior_s = start.elapsed().as_secs_f64();
        let t = Instant::now();
        let base = self.base(cfg.ppn)?;
        let of = overfit_enhancement(&self.dar, base, &data, &cfg.overfit())?;
        let overfit_s = t.elapsed().as_secs_f64();
        let mut enc = self.encode_prepared(&data, cfg, &of.stream)?;
        enc.report.selected_epoch = Some(of.selected_epoch);
        enc.report.timings.overfit_s = overfit_s;
        enc.report.timings.prior_s += prior_s;
        enc.report.timings.total_s = start.elapsed().as_secs_f64();
        enc.overfit = Some(of);
        Ok(enc)
    }

    /// Codes a group with a given enhancement stream.
    pub fn encode_with(&self, frames: &[PointCloud], cfg: &CodecConfig, stream: &ParamStream) -> Result<Encoded> {
        let start = Instant::now();
        let data = self.prepare(frames, cfg)?;
        let prior_s = start.elapsed().as_secs_f64();
        let mut enc = self.encode_prepared(&data, cfg, stream)?;
        enc.report.timings.prior_s += prior_s;
        enc.report.timings.total_s = start.elapsed().as_secs_f64();
        Ok(enc)
    }

    /// Codes prepared frames with a given enhancement stream.
    pub fn encode_prepared(&self, data: &[FrameData], cfg: &CodecConfig, stream: &ParamStream) -> Result<Encoded> {
        let t = Instant::now();
        let base = self.base(cfg.ppn)?;
        if stream.enhancement.len() != base.len() {
            return Err(Error::LengthMismatch {
                expected: base.len(),
                actual: stream.enhancement.len(),
            });
        }
        let params = effective_f32(base, &stream.enhancement);
        let model_s = t.elapsed().as_secs_f64();
        let ppn = cfg.ppn.then_some((&self.ppn, self.assets.ppn.as_slice()));
        let coded = par_map(data, cfg.threads, |f| self.encode_frame(f, &params, ppn));
        let coded: Vec<CodedFrame> = coded.into_iter().collect::<Result<_>>()?;
        let bitdepth = data.iter().map(|f| f.hierarchy.finest().bitdepth()).max().ok_or(Error::EmptyCloud)?;
        let bs = Bitstream {
            bitdepth,
            flags: cfg.flags(),
            asset_checksum: self.checksum,
            params: stream.bytes.clone(),
            frames: coded.iter().map(|c| c.streams.clone()).collect(),
        };
        let (bytes, layout) = bs.to_bytes()?;
        let points = data.iter().map(|f| f.points()).sum();
        let mut report = RateReport::from_layout(&layout, points, &bs.frames);
        report.param_count = base.len();
        report.timings.model_s = model_s;
        let mut scale_s = Vec::new();
        for c in &coded {
            for (i, s) in c.scale_s.iter().enumerate() {
                if scale_s.len() <= i {
                    scale_s.resize(i + 1, 0.0);
                }
                scale_s[i] += s;
            }
        }
        report.timings.scale_s = scale_s;
        report.timings.total_s = t.elapsed().as_secs_f64();
        Ok(Encoded {
            bytes,
            report,
            overfit: None,
            stage_estimates: coded.into_iter().map(|c| c.estimates).collect(),
            stage_bits: layout.stage_bits,
        })
    }

    fn encode_frame(&self, f: &FrameData, params: &[f32], ppn: Option<(&Ppn, &[f32])>) -> Result<CodedFrame> {
        let h = &f.hierarchy;
        let l = h.coarsest_index();
        let mut scales = Vec::with_capacity(l);
        let mut estimates = Vec::with_capacity(l);
        let mut scale_s = vec![0.0; l];
        for i in (0..l).rev() {
            let t = Instant::now();
            let gt = h.stage_bits(i);
            let mut session = ScaleSession::new(&self.dar, params, ppn, &h.scales()[i + 1])?;
            let mut streams: [Vec<u8>; STAGES] = Default::default();
            let mut est = [0.0; STAGES];
            for (j, stage) in gt.into_iter().enumerate() {
                let probs = session.probabilities()?;
                let mut enc = Encoder::new();
                for (&b, &p) in stage.bits.iter().zip(&probs) {
                    enc.encode_bit(b != 0, quantize_prob(p as f64));
                }
                streams[j] = enc.finish();
                let p64: Vec<f64> = probs.iter().map(|&p| p as f64).collect();
                est[j] = crate::autodiff::bce_bits(&p64, &stage.bits);
                session.commit(stage.bits)?;
            }
            scales.push(streams);
            estimates.push(est);
            scale_s[i] = t.elapsed().as_secs_f64();
        }
        Ok(CodedFrame {
            streams: FrameStreams {
                coarse: h.coarsest().clone(),
                scales,
            },
            estimates,
            scale_s,
        })
    }

    /// Decodes a group; fails if the stream was made with other assets.
    pub fn decode(&self, data: &[u8], threads: usize) -> Result<Vec<PointCloud>> {
        let bs = Bitstream::from_bytes(data)?;
        if bs.asset_checksum != self.checksum {
            return Err(Error::ChecksumMismatch);
        }
        let stream = ParamStream::parse(bs.params.clone(), bs.flags.smc)?;
        let base = self.base(bs.flags.ppn)?;
        if stream.enhancement.len() != base.len() {
            return Err(Error::Corrupt(format!(
                "stream carries {} enhancement parameters, model has {}",
                stream.enhancement.len(),
                base.len()
            )));
        }
        let params = effective_f32(base, &stream.enhancement);
        let ppn = bs.flags.ppn.then_some((&self.ppn, self.assets.ppn.as_slice()));
        par_map(&bs.frames, threads, |f| self.decode_frame(f, &params, ppn))
            .into_iter()
            .collect()
    }

    fn decode_frame(&self, f: &FrameStreams, params: &[f32], ppn: Option<(&Ppn, &[f32])>) -> Result<PointCloud> {
        let sc = f.scale_count();
        let mut current = f.coarse.clone();
        for (k, streams) in f.scales.iter().enumerate() {
            let i = sc - 2 - k;
            let mut session = ScaleSession::new(&self.dar, params, ppn, &current)?;
            let mut stages = Vec::with_capacity(STAGES);
            for (j, data) in streams.iter().enumerate() {
                let probs = session.probabilities()?;
                let mut dec = Decoder::new(data)?;
                let bits = probs
                    .iter()
                    .map(|&p| dec.decode_bit(quantize_prob(p as f64)).map(|b| b as u8))
                    .collect::<Result<Vec<u8>>>()?;
                session.commit(bits.clone())?;
                stages.push(StageBits {
                    scale: i,
                    stage: j + 1,
                    bits,
                });
            }
            current = reconstruct_scale(&current, &stages).map_err(|e| match e {
                Error::EmptyParent { index } => {
                    Error::Corrupt(format!("scale {i}: parent {index} has no occupied child"))
                }
                e => e,
            })?;
        }
        Ok(current)
    }
}

/// Decodes the probabilities a stage would see; exposed for tests and tools.
pub fn session_probabilities(
    dar: &Dar,
    dar_params: &[f32],
    ppn: Option<(&Ppn, &[f32])>,
    parents: &PointCloud,
    bits: &[&[u8]],
) -> Result<Vec<f32>> {
    let mut s = ScaleSession::new(dar, dar_params, ppn, parents)?;
    for b in bits {
        s.commit(b.to_vec())?;
    }
    s.probabilities()
}
