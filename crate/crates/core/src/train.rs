//! Training loops: prior-network pretraining, base-layer training and
//! per-group enhancement overfitting.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::dar::Dar;
use crate::error::{Error, Result};
use crate::octree::{build_hierarchy, PointCloud, ScaleHierarchy};
use crate::optim::{RmsProp, TrainConfig};
use crate::ppn::{pretrain_bits, Ppn, PpnConfig, PriorCache};
use crate::smc::{self, Density, ParamPayload};

/// One frame with its hierarchy and cached prior logits.
#[derive(Clone, Debug)]
pub struct FrameData {
    pub hierarchy: ScaleHierarchy,
    pub priors: PriorCache,
}

impl FrameData {
    /// `ppn = None` uses all-zero priors.
    pub fn new(pc: &PointCloud, coarse_threshold: usize, ppn: Option<(&Ppn, &[f32])>) -> Result<Self> {
        let hierarchy = build_hierarchy(pc, coarse_threshold)?;
        let priors = match ppn {
            Some((net, params)) => PriorCache::compute(net, params, &hierarchy)?,
            None => PriorCache::zeros(&hierarchy),
        };
        Ok(Self { hierarchy, priors })
    }

    pub fn points(&self) -> usize {
        self.hierarchy.finest().len()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochStat {
    pub epoch: usize,
    pub lr: f64,
    /// Mean training loss over the epoch's steps (zero for the initial evaluation).
    pub train_loss: f64,
    pub val_bpp: f64,
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub params: Vec<f64>,
    pub history: Vec<EpochStat>,
    pub best_epoch: usize,
}

fn check_finite(loss: f64, grad: &[f64], epoch: usize, seed: u64) -> Result<()> {
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Diverged { epoch, seed });
    }
    Ok(())
}

/// Shared loop: one optimizer step per item, validation after each epoch,
/// best validation weights returned (the initial weights count as epoch 0).
fn fit<L, V>(init: Vec<f64>, items: usize, tc: &TrainConfig, mut loss_grad: L, mut validate: V) -> Result<Trained>
where
    L: FnMut(usize, &[f64]) -> Result<(f64, Vec<f64>)>,
    V: FnMut(&[f64]) -> Result<f64>,
{
    tc.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5eed);
    let mut params = init;
    let mut opt = RmsProp::new(params.len());
    let v0 = validate(&params)?;
    let mut history = vec![EpochStat {
        epoch: 0,
        lr: 0.0,
        train_loss: 0.0,
        val_bpp: v0,
    }];
    let mut best = (v0, 0, params.clone());
    let mut order: Vec<usize> = (0..items).collect();
    for e in 1..=tc.epochs {
        let lr = tc.lr_at(e - 1);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &k in &order {
            let (loss, grad) = loss_grad(k, &params)?;
            check_finite(loss, &grad, e, tc.seed)?;
            opt.step(&mut params, &grad, lr);
            total += loss;
        }
        let v = validate(&params)?;
        if !v.is_finite() {
            return Err(Error::Diverged { epoch: e, seed: tc.seed });
        }
        history.push(EpochStat {
            epoch: e,
            lr,
            train_loss: total / items.max(1) as f64,
            val_bpp: v,
        });
        if v < best.0 {
            best = (v, e, params.clone());
        }
    }
    Ok(Trained {
        params: best.2,
        history,
        best_epoch: best.1,
    })
}

/// Standalone teacher-forced pretraining of the prior network.
pub fn pretrain_ppn(
    train: &[ScaleHierarchy],
    val: &[ScaleHierarchy],
    config: PpnConfig,
    tc: &TrainConfig,
) -> Result<Trained> {
    let ppn = Ppn::new(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut init = ppn.layout().init(&mut rng);
    // Start from an unbiased logit head.
    init[ppn.head.b] = 0.0;
    fit(
        init,
        train.len(),
        tc,
        |k, p| {
            let mut tape = Tape::new(p);
            let loss = ppn.pretrain_loss(&mut tape, &train[k])?;
            let g = tape.backward(loss)?;
            Ok((tape.scalar(loss), g.params))
        },
        |p| mean(val.iter().map(|h| pretrain_bits(&ppn, p, h))),
    )
}

fn mean(it: impl Iterator<Item = Result<f64>>) -> Result<f64> {
    let mut s = 0.0;
    let mut n = 0usize;
    for v in it {
        s += v?;
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { s / n as f64 })
}

/// Estimated bits per point of one frame under refiner weights `params`.
pub fn frame_bpp<F: crate::tensor::Scalar>(dar: &Dar, params: &[F], f: &FrameData) -> Result<f64> {
    let bits: f64 = dar.frame_bits(params, &f.hierarchy, &f.priors)?.iter().sum();
    Ok(bits / f.points() as f64)
}

/// Base-layer training on geometry bits only, with the prior network frozen
/// (its logits are already cached in each frame).
pub fn train_base(train: &[FrameData], val: &[FrameData], dar: &Dar, tc: &TrainConfig) -> Result<Trained> {
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(1));
    let init = dar.layout().init(&mut rng);
    fit(
        init,
        train.len(),
        tc,
        |k, p| {
            let f = &train[k];
            let mut tape = Tape::new(p);
            let bits = dar.frame_bits_tape(&mut tape, &f.hierarchy, &f.priors)?;
            let g = tape.backward(bits)?;
            let n = f.points() as f64;
            Ok((tape.scalar(bits) / n, g.params.iter().map(|v| v / n).collect()))
        },
        |p| mean(val.iter().map(|f| frame_bpp(dar, p, f))),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverfitConfig {
    pub train: TrainConfig,
    /// Learned quantization and entropy coding of the enhancement layer.
    pub smc: bool,
    pub fa_init: f64,
    /// Initial spread of the symbol density, in quantization steps.
    pub density_scale: f64,
}

impl Default for OverfitConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::overfit(),
            smc: true,
            fa_init: 100f64.ln(),
            density_scale: smc::DENSITY_INIT_SCALE,
        }
    }
}

/// Transmittable enhancement parameters and what the decoder rebuilds from them.
#[derive(Clone, Debug)]
pub struct ParamStream {
    pub bytes: Vec<u8>,
    pub enhancement: Vec<f64>,
}

impl ParamStream {
    pub fn smc(v: &[f64], fa: f64, density: &Density) -> Result<Self> {
        let bytes = ParamPayload::encode(v, fa, density)?.to_bytes();
        Self::parse(bytes, true)
    }

    pub fn raw(v: &[f64]) -> Result<Self> {
        Self::parse(smc::raw_params_bytes(v), false)
    }

    /// Decodes a stream exactly as the decoder does.
    pub fn parse(bytes: Vec<u8>, smc: bool) -> Result<Self> {
        let enhancement = if smc {
            ParamPayload::from_bytes(&bytes)?.decode()?
        } else {
            smc::raw_params_from_bytes(&bytes)?
        };
        Ok(Self { bytes, enhancement })
    }

    pub fn bits(&self) -> u64 {
        8 * self.bytes.len() as u64
    }
}

/// 32-bit refiner weights `base + enhancement` as used for coding.
pub fn effective_f32(base: &[f32], enhancement: &[f64]) -> Vec<f32> {
    base.iter().zip(enhancement).map(|(&b, &e)| b + e as f32).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Cumulative optimization time in seconds.
    pub elapsed_s: f64,
    pub lr: f64,
    pub train_loss: f64,
    pub geometry_bits: f64,
    pub model_bits: u64,
    pub bpp: f64,
}

#[derive(Clone, Debug)]
pub struct Overfit {
    pub stream: ParamStream,
    pub trajectory: Vec<EpochRecord>,
    pub selected_epoch: usize,
    pub fa: f64,
    pub density: Option<Density>,
}

/// Estimated geometry bits of every frame under 32-bit weights.
pub fn geometry_bits(dar: &Dar, params: &[f32], frames: &[FrameData]) -> Result<f64> {
    let mut total = 0.0;
    for f in frames {
        total += dar.frame_bits(params, &f.hierarchy, &f.priors)?.iter().sum::<f64>();
    }
    Ok(total)
}

/// Overfits the enhancement layer on a group of frames.
///
/// Every epoch is evaluated on the exact transmitted form; the cheapest
/// epoch (possibly the all-zero start) is kept.
pub fn overfit_enhancement(dar: &Dar, base: &[f32], frames: &[FrameData], cfg: &OverfitConfig) -> Result<Overfit> {
    cfg.train.validate()?;
    if frames.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let seed = cfg.train.seed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = base.len();
    let base64: Vec<f64> = base.iter().map(|&b| b as f64).collect();
    let t = frames.len() as f64;
    let mean_n = frames.iter().map(|f| f.points() as f64).sum::<f64>() / t;
    let rate_scale = 1.0 / (mean_n * t);
    let total_points: f64 = frames.iter().map(|f| f.points() as f64).sum();

    // Trainable vector: [v, fa, density...] with SMC, else just v.
    let mut density = Density::new(cfg.density_scale);
    let extra = if cfg.smc { 1 + density.params.len() } else { 0 };
    let mut theta = vec![0.0; n + extra];
    if cfg.smc {
        theta[n] = cfg.fa_init;
        theta[n + 1..].copy_from_slice(&density.params);
    }
    let mut opt = RmsProp::new(theta.len());

    let make_stream = |theta: &[f64], density: &Density| -> Result<ParamStream> {
        if cfg.smc {
            ParamStream::smc(&theta[..n], theta[n], density)
        } else {
            ParamStream::raw(&theta[..n])
        }
    };
    let evaluate = |stream: &ParamStream| -> Result<(f64, u64)> {
        let eff = effective_f32(base, &stream.enhancement);
        Ok((geometry_bits(dar, &eff, frames)?, stream.bits()))
    };

    let mut elapsed = 0.0;
    let stream0 = make_stream(&theta, &density)?;
    let (g0, m0) = evaluate(&stream0)?;
    let mut trajectory = vec![EpochRecord {
        epoch: 0,
        elapsed_s: 0.0,
        lr: 0.0,
        train_loss: 0.0,
        geometry_bits: g0,
        model_bits: m0,
        bpp: (g0 + m0 as f64) / total_points,
    }];
    let mut best = (g0 + m0 as f64, 0usize, stream0, theta.get(n).copied().unwrap_or(0.0), density.clone());

    for e in 1..=cfg.train.epochs {
        let start = Instant::now();
        let lr = cfg.train.lr_at(e - 1);
        let mut total = 0.0;
        for f in frames {
            let (v, rest) = theta.split_at(n);
            let (vhat, q) = if cfg.smc {
                let q = smc::ste_quantize(v, rest[0]);
                (smc::dequantize(&q, rest[0]), Some(q))
            } else {
                (v.to_vec(), None)
            };
            let eff: Vec<f64> = base64.iter().zip(&vhat).map(|(b, e)| b + e).collect();
            let mut tape = Tape::new(&eff);
            let bits = dar.frame_bits_tape(&mut tape, &f.hierarchy, &f.priors)?;
            let geff = tape.backward(bits)?.params;
            let nf = f.points() as f64;
            let mut loss = tape.scalar(bits) / nf;
            let mut grad = vec![0.0; theta.len()];
            let gvhat: Vec<f64> = geff.iter().map(|g| g / nf).collect();
            if let Some(q) = q {
                let fa = rest[0];
                density.params.copy_from_slice(&rest[1..]);
                let gfa = smc::ste_backward(v, &q, fa, &gvhat, &mut grad[..n]);
                let rate = smc::rate_proxy(v, fa, &density, &mut rng);
                loss += rate.bits * rate_scale;
                for (g, r) in grad[..n].iter_mut().zip(&rate.grad_v) {
                    *g += r * rate_scale;
                }
                grad[n] = gfa + rate.grad_fa * rate_scale;
                for (k, g) in rate.grad_density.iter().enumerate() {
                    grad[n + 1 + k] = g * rate_scale;
                }
            } else {
                grad[..n].copy_from_slice(&gvhat);
            }
            check_finite(loss, &grad, e, seed)?;
            opt.step(&mut theta, &grad, lr);
            total += loss;
        }
        if cfg.smc {
            density.params.copy_from_slice(&theta[n + 1..]);
        }
        elapsed += start.elapsed().as_secs_f64();
        let stream = make_stream(&theta, &density)?;
        let (g, m) = evaluate(&stream)?;
        trajectory.push(EpochRecord {
            epoch: e,
            elapsed_s: elapsed,
            lr,
            train_loss: total / t,
            geometry_bits: g,
            model_bits: m,
            bpp: (g + m as f64) / total_points,
        });
        if g + (m as f64) < best.0 {
            best = (g + m as f64, e, stream, theta.get(n).copied().unwrap_or(0.0), density.clone());
        }
    }
    Ok(Overfit {
        stream: best.2,
        trajectory,
        selected_epoch: best.1,
        fa: best.3,
        density: cfg.smc.then_some(best.4),
    })
}

/// Convenience: hierarchies of many clouds.
pub fn hierarchies(clouds: &[PointCloud], coarse_threshold: usize) -> Result<Vec<ScaleHierarchy>> {
    clouds.iter().map(|c| build_hierarchy(c, coarse_threshold)).collect()
}
