//! Synthetic voxel clouds for training, tests and benchmarks.
//!
//! The toy family is clean surfaces of simple primitives. The
//! out-of-distribution family perturbs wavy height fields with surface noise
//! and scattered outliers, which the toy family never shows.

use rand::Rng;

use crate::error::Result;
use crate::octree::{PointCloud, VoxelCoord};

type V3 = [f64; 3];

fn cross(a: V3, b: V3) -> V3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn norm(a: V3) -> V3 {
    let l = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    [a[0] / l, a[1] / l, a[2] / l]
}

/// Random orthonormal frame.
fn rotation<R: Rng>(rng: &mut R) -> [V3; 3] {
    let mut r = || [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
    let a = norm(r());
    let mut b = r();
    let d = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    b = norm([b[0] - d * a[0], b[1] - d * a[1], b[2] - d * a[2]]);
    [a, b, cross(a, b)]
}

struct Placer {
    rot: [V3; 3],
    center: V3,
    max: f64,
}

impl Placer {
    fn voxel(&self, p: V3) -> Option<VoxelCoord> {
        let mut out = [0u32; 3];
        for (k, o) in out.iter_mut().enumerate() {
            let v = self.center[k] + self.rot[0][k] * p[0] + self.rot[1][k] * p[1] + self.rot[2][k] * p[2];
            if !(0.0..self.max).contains(&v) {
                return None;
            }
            *o = v as u32;
        }
        Some(VoxelCoord::new(out[0], out[1], out[2]))
    }
}

#[derive(Clone, Copy, Debug)]
enum Primitive {
    Sphere,
    Box,
    Cylinder,
    Plane,
    Torus,
}

/// Dense surface samples of a primitive of radius `r` around the origin.
fn surface(kind: Primitive, r: f64, step: f64) -> Vec<V3> {
    let mut pts = Vec::new();
    let tau = std::f64::consts::TAU;
    match kind {
        Primitive::Sphere => {
            let n = (std::f64::consts::PI * r / step).ceil() as usize + 1;
            for i in 0..=n {
                let th = std::f64::consts::PI * i as f64 / n as f64;
                let m = ((tau * r * th.sin() / step).ceil() as usize).max(1);
                for k in 0..m {
                    let ph = tau * k as f64 / m as f64;
                    pts.push([r * th.sin() * ph.cos(), r * th.sin() * ph.sin(), r * th.cos()]);
                }
            }
        }
        Primitive::Box => {
            let h = [r, 0.7 * r, 0.5 * r];
            for axis in 0..3 {
                let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
                let nu = (2.0 * h[u] / step).ceil() as usize;
                let nv = (2.0 * h[v] / step).ceil() as usize;
                for side in [-1.0, 1.0] {
                    for i in 0..=nu {
                        for j in 0..=nv {
                            let mut p = [0.0; 3];
                            p[axis] = side * h[axis];
                            p[u] = -h[u] + 2.0 * h[u] * i as f64 / nu as f64;
                            p[v] = -h[v] + 2.0 * h[v] * j as f64 / nv as f64;
                            pts.push(p);
                        }
                    }
                }
            }
        }
        Primitive::Cylinder => {
            let rr = 0.6 * r;
            let nz = (2.0 * r / step).ceil() as usize;
            let m = (tau * rr / step).ceil() as usize;
            for i in 0..=nz {
                let z = -r + 2.0 * r * i as f64 / nz as f64;
                for k in 0..m {
                    let ph = tau * k as f64 / m as f64;
                    pts.push([rr * ph.cos(), rr * ph.sin(), z]);
                }
            }
        }
        Primitive::Plane => {
            let n = (2.0 * r / step).ceil() as usize;
            for i in 0..=n {
                for j in 0..=n {
                    let x = -r + 2.0 * r * i as f64 / n as f64;
                    let y = -r + 2.0 * r * j as f64 / n as f64;
                    pts.push([x, y, 0.15 * (x * x - y * y) / r]);
                }
            }
        }
        Primitive::Torus => {
            let (big, small) = (0.7 * r, 0.3 * r);
            let m = (tau * (big + small) / step).ceil() as usize;
            let k = (tau * small / step).ceil() as usize;
            for a in 0..m {
                let u = tau * a as f64 / m as f64;
                for b in 0..k {
                    let v = tau * b as f64 / k as f64;
                    let w = big + small * v.cos();
                    pts.push([w * u.cos(), w * u.sin(), small * v.sin()]);
                }
            }
        }
    }
    pts
}

fn voxelize(samples: &[V3], placer: &Placer, bitdepth: u8) -> Result<PointCloud> {
    let coords = samples.iter().filter_map(|&p| placer.voxel(p)).collect();
    PointCloud::new(coords, bitdepth)
}

/// One clean primitive surface; `radius` is in voxels.
pub fn toy_cloud<R: Rng>(rng: &mut R, bitdepth: u8, radius: f64) -> Result<PointCloud> {
    let kind = match rng.random_range(0..5) {
        0 => Primitive::Sphere,
        1 => Primitive::Box,
        2 => Primitive::Cylinder,
        3 => Primitive::Plane,
        _ => Primitive::Torus,
    };
    let side = (1u32 << bitdepth) as f64;
    let r = radius * rng.random_range(0.8..1.2);
    let margin = r + 1.0;
    let center = std::array::from_fn(|_| {
        if 2.0 * margin < side {
            rng.random_range(margin..side - margin)
        } else {
            side / 2.0
        }
    });
    let placer = Placer {
        rot: rotation(rng),
        center,
        max: side,
    };
    voxelize(&surface(kind, r, 0.5), &placer, bitdepth)
}

/// Parameters of one out-of-distribution scene; frames of a group share it.
#[derive(Clone, Debug)]
pub struct OodScene {
    rot: [V3; 3],
    center: V3,
    radius: f64,
    waves: [(f64, f64, f64, f64); 3],
    jitter: f64,
    outliers: f64,
}

impl OodScene {
    pub fn new<R: Rng>(rng: &mut R, bitdepth: u8, radius: f64) -> Self {
        let side = (1u32 << bitdepth) as f64;
        Self {
            rot: rotation(rng),
            center: [side / 2.0; 3],
            radius,
            waves: std::array::from_fn(|_| {
                (
                    rng.random_range(0.1..0.35) * radius,
                    rng.random_range(0.5..2.5) / radius * std::f64::consts::TAU,
                    rng.random_range(0.5..2.5) / radius * std::f64::consts::TAU,
                    rng.random_range(0.0..std::f64::consts::TAU),
                )
            }),
            jitter: 1.5,
            outliers: 0.05,
        }
    }

    /// One frame; `t` shifts the wave phase so frames differ but look alike.
    pub fn frame<R: Rng>(&self, rng: &mut R, bitdepth: u8, t: f64) -> Result<PointCloud> {
        let r = self.radius;
        let step = 0.5;
        let n = (2.0 * r / step).ceil() as usize;
        let mut pts = Vec::with_capacity(n * n);
        for i in 0..=n {
            for j in 0..=n {
                if rng.random::<f64>() < 0.1 {
                    continue;
                }
                let x = -r + 2.0 * r * i as f64 / n as f64;
                let y = -r + 2.0 * r * j as f64 / n as f64;
                let mut z = 0.0;
                for &(amp, fx, fy, ph) in &self.waves {
                    z += amp * (fx * x + fy * y + ph + 0.3 * t).sin();
                }
                let jit = |rng: &mut R| rng.random_range(-self.jitter..self.jitter);
                pts.push([x + jit(rng), y + jit(rng), z + jit(rng)]);
            }
        }
        let extra = (self.outliers * pts.len() as f64) as usize;
        for _ in 0..extra {
            pts.push(std::array::from_fn(|_| rng.random_range(-r..r)));
        }
        let placer = Placer {
            rot: self.rot,
            center: self.center,
            max: (1u32 << bitdepth) as f64,
        };
        voxelize(&pts, &placer, bitdepth)
    }
}

/// `frames` noisy frames of one scene.
pub fn ood_gopc<R: Rng>(rng: &mut R, frames: usize, bitdepth: u8, radius: f64) -> Result<Vec<PointCloud>> {
    let scene = OodScene::new(rng, bitdepth, radius);
    (0..frames).map(|t| scene.frame(rng, bitdepth, t as f64)).collect()
}

/// Clustered random points: a few Gaussian-ish blobs plus uniform fill.
pub fn random_cloud<R: Rng>(rng: &mut R, points: usize, bitdepth: u8) -> Result<PointCloud> {
    let side = 1u32 << bitdepth;
    let blobs: Vec<(V3, f64)> = (0..rng.random_range(1..6))
        .map(|_| {
            (
                std::array::from_fn(|_| rng.random_range(0.0..side as f64)),
                rng.random_range(1.0..(side as f64 / 4.0).max(2.0)),
            )
        })
        .collect();
    let mut coords = Vec::with_capacity(points);
    for k in 0..points {
        if k % 5 == 0 {
            coords.push(VoxelCoord::new(rng.random_range(0..side), rng.random_range(0..side), rng.random_range(0..side)));
            continue;
        }
        let (c, s) = blobs[k % blobs.len()];
        let v: [u32; 3] = std::array::from_fn(|a| {
            let g: f64 = (0..3).map(|_| rng.random_range(-1.0..1.0)).sum();
            (c[a] + g * s).clamp(0.0, side as f64 - 1.0) as u32
        });
        coords.push(v.into());
    }
    PointCloud::new(coords, bitdepth)
}
