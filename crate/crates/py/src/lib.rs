//! Python bindings: clouds, PLY I/O, toy asset training, encode/decode and
//! the rate metrics.

use std::path::PathBuf;

use hpcg::assets::Assets;
use hpcg::codec::{Codec as CoreCodec, CodecConfig};
use hpcg::error::Error;
use hpcg::metrics::{tb_rate as core_tb_rate, TimeBppCurve};
use hpcg::octree::{PointCloud as CoreCloud, VoxelCoord};
use hpcg::optim::TrainConfig;
use hpcg::ply::{read_ply as core_read_ply, write_ply as core_write_ply, PlyFormat};
use hpcg::pretrained::{build_assets, AssetRecipe, ToyCorpus};
use hpcg::synth;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

/// Sorted, deduplicated set of integer voxels.
#[pyclass(frozen, skip_from_py_object)]
#[derive(Clone)]
struct PointCloud {
    inner: CoreCloud,
}

#[pymethods]
impl PointCloud {
    /// `bitdepth=None` picks the smallest depth that fits.
    #[new]
    #[pyo3(signature = (coords, bitdepth=None))]
    fn new(coords: Vec<(u32, u32, u32)>, bitdepth: Option<u8>) -> PyResult<Self> {
        let coords: Vec<VoxelCoord> = coords.into_iter().map(|(x, y, z)| VoxelCoord::new(x, y, z)).collect();
        let inner = match bitdepth {
            Some(d) => CoreCloud::new(coords, d),
            None => CoreCloud::with_min_bitdepth(coords),
        }
        .map_err(py_err)?;
        Ok(Self { inner })
    }

    fn coords(&self) -> Vec<(u32, u32, u32)> {
        self.inner.coords().iter().map(|c| (c.x, c.y, c.z)).collect()
    }

    #[getter]
    fn bitdepth(&self) -> u8 {
        self.inner.bitdepth()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("PointCloud({} points, bitdepth {})", self.inner.len(), self.inner.bitdepth())
    }
}

fn wrap(clouds: Vec<CoreCloud>) -> Vec<PointCloud> {
    clouds.into_iter().map(|inner| PointCloud { inner }).collect()
}

fn unwrap(clouds: &[PyRef<'_, PointCloud>]) -> Vec<CoreCloud> {
    clouds.iter().map(|c| c.inner.clone()).collect()
}

#[pyfunction]
#[pyo3(signature = (path, bitdepth=None))]
fn read_ply(path: PathBuf, bitdepth: Option<u8>) -> PyResult<PointCloud> {
    Ok(PointCloud {
        inner: core_read_ply(&path, bitdepth).map_err(py_err)?,
    })
}

#[pyfunction]
#[pyo3(signature = (cloud, path, binary=false))]
fn write_ply(cloud: &PointCloud, path: PathBuf, binary: bool) -> PyResult<()> {
    let fmt = if binary { PlyFormat::BinaryLittleEndian } else { PlyFormat::Ascii };
    core_write_ply(&cloud.inner, &path, fmt).map_err(py_err)
}

/// A procedurally generated primitive surface.
#[pyfunction]
#[pyo3(signature = (seed, bitdepth=6, radius=10.0))]
fn toy_cloud(seed: u64, bitdepth: u8, radius: f64) -> PyResult<PointCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(PointCloud {
        inner: synth::toy_cloud(&mut rng, bitdepth, radius).map_err(py_err)?,
    })
}

/// Noisy frames of one wavy out-of-distribution scene.
#[pyfunction]
#[pyo3(signature = (seed, frames=4, bitdepth=6, radius=14.0))]
fn ood_gopc(seed: u64, frames: usize, bitdepth: u8, radius: f64) -> PyResult<Vec<PointCloud>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(wrap(synth::ood_gopc(&mut rng, frames, bitdepth, radius).map_err(py_err)?))
}

#[pyfunction]
fn kdtree_partition(cloud: &PointCloud, target: usize) -> PyResult<Vec<PointCloud>> {
    Ok(wrap(hpcg::kdtree::kdtree_partition(&cloud.inner, target).map_err(py_err)?))
}

/// TB-Rate in percent of curve `a` against reference `b`; curves are
/// lists of `(seconds, bpp)`.
#[pyfunction]
fn tb_rate(a: Vec<(f64, f64)>, b: Vec<(f64, f64)>) -> PyResult<f64> {
    let a = TimeBppCurve::new(a).map_err(py_err)?;
    let b = TimeBppCurve::new(b).map_err(py_err)?;
    core_tb_rate(&a, &b).map_err(py_err)
}

/// Encoder and decoder bound to one set of pretrained assets.
#[pyclass(frozen)]
struct Codec {
    inner: CoreCodec,
}

#[pymethods]
impl Codec {
    #[new]
    fn new(assets_path: PathBuf) -> PyResult<Self> {
        let assets = Assets::load(&assets_path).map_err(py_err)?;
        Ok(Self {
            inner: CoreCodec::new(assets).map_err(py_err)?,
        })
    }

    /// Trains small assets on generated primitive clouds (seconds on one core).
    #[staticmethod]
    #[pyo3(signature = (clouds=30, bitdepth=6, seed=1, channels=8, epochs=6))]
    fn train_toy(py: Python<'_>, clouds: usize, bitdepth: u8, seed: u64, channels: usize, epochs: usize) -> PyResult<Self> {
        let corpus = ToyCorpus {
            clouds,
            bitdepth,
            seed,
            ..ToyCorpus::default()
        };
        let mut recipe = AssetRecipe::toy();
        recipe.ppn.channels = channels;
        recipe.dar.channels = channels;
        recipe.pretrain.epochs = epochs;
        recipe.base.epochs = epochs;
        let assets = py
            .detach(|| corpus.generate().and_then(|c| build_assets(&c, &recipe)))
            .map_err(py_err)?
            .0;
        Ok(Self {
            inner: CoreCodec::new(assets).map_err(py_err)?,
        })
    }

    fn save_assets(&self, path: PathBuf) -> PyResult<()> {
        self.inner.assets().save(&path).map_err(py_err)
    }

    /// Hex SHA-256 of the asset file.
    fn checksum(&self) -> String {
        self.inner.checksum().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Codes a group of frames; returns `(bitstream, report)`.
    #[pyo3(signature = (frames, epochs=26, seed=0, smc=true, ppn=true, coarse_threshold=64, threads=1))]
    #[allow(clippy::too_many_arguments)]
    fn encode<'py>(
        &self,
        py: Python<'py>,
        frames: Vec<PyRef<'py, PointCloud>>,
        epochs: usize,
        seed: u64,
        smc: bool,
        ppn: bool,
        coarse_threshold: usize,
        threads: usize,
    ) -> PyResult<(Bound<'py, PyBytes>, Bound<'py, PyDict>)> {
        let frames = unwrap(&frames);
        let cfg = CodecConfig {
            coarse_threshold,
            smc,
            ppn,
            train: TrainConfig {
                epochs,
                seed,
                ..TrainConfig::overfit()
            },
            threads: threads.max(1),
            ..Default::default()
        };
        let enc = py.detach(|| self.inner.encode(&frames, &cfg)).map_err(py_err)?;
        let r = &enc.report;
        let report = PyDict::new(py);
        report.set_item("frames", r.frames)?;
        report.set_item("points", r.points)?;
        report.set_item("total_bits", r.total_bits)?;
        report.set_item("header_bits", r.header_bits)?;
        report.set_item("model_bits", r.model_bits)?;
        report.set_item("scale_bits", r.scale_bits.clone())?;
        report.set_item("bpp", r.bpp)?;
        report.set_item("geometry_bpp", r.geometry_bpp)?;
        report.set_item("model_bpp", r.model_bpp)?;
        report.set_item("selected_epoch", r.selected_epoch)?;
        report.set_item("encode_s", r.timings.total_s)?;
        if let Some(of) = &enc.overfit {
            let curve: Vec<(f64, f64)> = of.trajectory.iter().map(|e| (e.elapsed_s, e.bpp)).collect();
            report.set_item("trajectory", curve)?;
        }
        Ok((PyBytes::new(py, &enc.bytes), report))
    }

    #[pyo3(signature = (data, threads=1))]
    fn decode(&self, py: Python<'_>, data: &[u8], threads: usize) -> PyResult<Vec<PointCloud>> {
        let frames = py.detach(|| self.inner.decode(data, threads.max(1))).map_err(py_err)?;
        Ok(wrap(frames))
    }
}

#[pymodule]
fn hpcg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PointCloud>()?;
    m.add_class::<Codec>()?;
    m.add_function(wrap_pyfunction!(read_ply, m)?)?;
    m.add_function(wrap_pyfunction!(write_ply, m)?)?;
    m.add_function(wrap_pyfunction!(toy_cloud, m)?)?;
    m.add_function(wrap_pyfunction!(ood_gopc, m)?)?;
    m.add_function(wrap_pyfunction!(kdtree_partition, m)?)?;
    m.add_function(wrap_pyfunction!(tb_rate, m)?)?;
    Ok(())
}
