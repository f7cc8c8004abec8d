//! Rate metrics: bits per point, Time–Bpp curves and the TB-Rate between
//! two curves, plus a stage-frequency reference coder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::octree::{ScaleHierarchy, STAGES};
use crate::train::EpochRecord;

pub fn bpp(total_bits: f64, points: usize) -> f64 {
    total_bits / points as f64
}

/// `(encode seconds, bpp)` samples with strictly increasing times.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeBppCurve {
    points: Vec<(f64, f64)>,
}

impl TimeBppCurve {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidArgument("a curve needs at least two samples".into()));
        }
        if points.iter().any(|(t, b)| !t.is_finite() || !b.is_finite()) {
            return Err(Error::InvalidArgument("curve samples must be finite".into()));
        }
        if points.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::InvalidArgument("curve times must be strictly increasing".into()));
        }
        Ok(Self { points })
    }

    /// Bpp an encoder would emit if stopped after each epoch: the best
    /// total so far, offset by `t0` seconds of fixed work.
    pub fn from_trajectory(traj: &[EpochRecord], t0: f64) -> Result<Self> {
        let mut best = f64::INFINITY;
        let mut pts = Vec::with_capacity(traj.len());
        for r in traj {
            best = best.min(r.bpp);
            let t = t0 + r.elapsed_s;
            // Timer resolution can make consecutive epochs coincide.
            let t = match pts.last() {
                Some(&(prev, _)) if t <= prev => prev + 1e-9,
                _ => t,
            };
            pts.push((t, best));
        }
        Self::new(pts)
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn start(&self) -> f64 {
        self.points[0].0
    }

    pub fn end(&self) -> f64 {
        self.points[self.points.len() - 1].0
    }

    /// Linear interpolation; `t` must lie within the curve.
    pub fn at(&self, t: f64) -> f64 {
        let i = self.points.partition_point(|p| p.0 <= t);
        if i == 0 {
            return self.points[0].1;
        }
        if i == self.points.len() {
            return self.points[i - 1].1;
        }
        let (t0, b0) = self.points[i - 1];
        let (t1, b1) = self.points[i];
        b0 + (b1 - b0) * (t - t0) / (t1 - t0)
    }

    /// Trapezoidal integral over `[a, b]`.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        let mut knots = vec![a];
        knots.extend(self.points.iter().map(|p| p.0).filter(|&t| t > a && t < b));
        knots.push(b);
        knots
            .windows(2)
            .map(|w| 0.5 * (w[1] - w[0]) * (self.at(w[0]) + self.at(w[1])))
            .sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("enc_time_s,bpp\n");
        for (t, b) in &self.points {
            s.push_str(&format!("{t},{b}\n"));
        }
        s
    }
}

/// `(∫a / ∫b - 1) · 100` over the time span both curves cover. Negative
/// means `a` needs fewer bits over the same encoding time.
pub fn tb_rate(a: &TimeBppCurve, b: &TimeBppCurve) -> Result<f64> {
    let lo = a.start().max(b.start());
    let hi = a.end().min(b.end());
    if hi <= lo {
        return Err(Error::NoOverlap);
    }
    let ib = b.integral(lo, hi);
    if ib <= 0.0 {
        return Err(Error::InvalidArgument("reference curve integrates to zero".into()));
    }
    Ok((a.integral(lo, hi) / ib - 1.0) * 100.0)
}

/// Ideal bits of a coder that uses one empirical probability per
/// (scale, stage), probabilities assumed free.
pub fn stage_frequency_bits(h: &ScaleHierarchy) -> f64 {
    let mut total = 0.0;
    for i in 0..h.coarsest_index() {
        for stage in h.stage_bits(i).iter().take(STAGES) {
            let n = stage.bits.len() as f64;
            let p = stage.bits.iter().filter(|&&b| b != 0).count() as f64 / n;
            if p > 0.0 && p < 1.0 {
                total -= n * (p * p.log2() + (1.0 - p) * (1.0 - p).log2());
            }
        }
    }
    total
}
