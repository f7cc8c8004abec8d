//! Multiscale voxel hierarchy and the eight-stage child decomposition.
//!
//! Scale `0` is the input cloud; scale `i + 1` is the dyadic max-pool of scale
//! `i`. Reconstructing scale `i` from scale `i + 1` happens in eight stages,
//! stage `j` deciding the occupancy of child `child_offset(j)` of every
//! parent. All per-node vectors follow the lexicographic `(x, y, z)` order of
//! the parent coordinates.

use std::collections::HashSet;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{CoordSet, SparseTensor};

/// Number of children per octree node, and therefore stages per scale.
pub const STAGES: usize = 8;

/// Integer voxel position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct VoxelCoord {
    pub x: u32,
    pub y: u32,
    pub z: u32,
}

impl VoxelCoord {
    pub const fn new(x: u32, y: u32, z: u32) -> Self {
        Self { x, y, z }
    }

    pub fn parent(self) -> Self {
        Self::new(self.x >> 1, self.y >> 1, self.z >> 1)
    }

    /// Child of `self` at the given Morton offset.
    pub fn child(self, offset: [u32; 3]) -> Self {
        Self::new(
            2 * self.x + offset[0],
            2 * self.y + offset[1],
            2 * self.z + offset[2],
        )
    }

    /// Position of `self` inside its parent's 2x2x2 block, as a stage index 1..=8.
    pub fn own_stage(self) -> usize {
        (((self.x & 1) << 2) | ((self.y & 1) << 1) | (self.z & 1)) as usize + 1
    }

    pub fn to_array(self) -> [u32; 3] {
        [self.x, self.y, self.z]
    }

    /// Packs the coordinate into a single key (21 bits per axis).
    pub fn key(self) -> u64 {
        ((self.x as u64) << 42) | ((self.y as u64) << 21) | self.z as u64
    }
}

impl From<[u32; 3]> for VoxelCoord {
    fn from(c: [u32; 3]) -> Self {
        Self::new(c[0], c[1], c[2])
    }
}

/// Largest supported bit depth (coordinates are packed 21 bits per axis).
pub const MAX_BITDEPTH: u8 = 21;

/// Sorted, deduplicated, nonempty set of occupied voxels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PointCloud {
    coords: Vec<VoxelCoord>,
    bitdepth: u8,
}

impl PointCloud {
    /// Builds a cloud, sorting and deduplicating `coords`.
    pub fn new(mut coords: Vec<VoxelCoord>, bitdepth: u8) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if bitdepth > MAX_BITDEPTH {
            return Err(Error::InvalidArgument(format!(
                "bitdepth {bitdepth} exceeds {MAX_BITDEPTH}"
            )));
        }
        let limit = 1u64 << bitdepth;
        if let Some(c) = coords
            .iter()
            .find(|c| c.x as u64 >= limit || c.y as u64 >= limit || c.z as u64 >= limit)
        {
            return Err(Error::CoordOutOfRange {
                coord: c.to_array(),
                bitdepth,
            });
        }
        coords.sort_unstable();
        coords.dedup();
        Ok(Self { coords, bitdepth })
    }

    /// Smallest bit depth that holds every coordinate.
    pub fn with_min_bitdepth(coords: Vec<VoxelCoord>) -> Result<Self> {
        let max = coords
            .iter()
            .map(|c| c.x.max(c.y).max(c.z))
            .max()
            .ok_or(Error::EmptyCloud)?;
        let bitdepth = (32 - max.leading_zeros()) as u8;
        Self::new(coords, bitdepth)
    }

    pub fn coords(&self) -> &[VoxelCoord] {
        &self.coords
    }

    pub fn bitdepth(&self) -> u8 {
        self.bitdepth
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn contains(&self, c: &VoxelCoord) -> bool {
        self.coords.binary_search(c).is_ok()
    }

    pub fn into_coords(self) -> Vec<VoxelCoord> {
        self.coords
    }
}

/// Max-pools the cloud by a factor of two along every axis.
pub fn voxel_downsample(pc: &PointCloud) -> PointCloud {
    let mut coords: Vec<VoxelCoord> = pc.coords.iter().map(|c| c.parent()).collect();
    // Input is sorted, so parents arrive grouped by x>>1 but not fully sorted.
    coords.sort_unstable();
    coords.dedup();
    PointCloud {
        coords,
        bitdepth: pc.bitdepth.saturating_sub(1),
    }
}

/// Ladder of clouds `scales[0]` (finest) .. `scales[L]` (coarsest).
#[derive(Clone, Debug)]
pub struct ScaleHierarchy {
    scales: Vec<PointCloud>,
}

impl ScaleHierarchy {
    pub fn scales(&self) -> &[PointCloud] {
        &self.scales
    }

    /// Index of the coarsest scale.
    pub fn coarsest_index(&self) -> usize {
        self.scales.len() - 1
    }

    pub fn coarsest(&self) -> &PointCloud {
        self.scales.last().expect("hierarchy is never empty")
    }

    pub fn finest(&self) -> &PointCloud {
        &self.scales[0]
    }

    /// Ground-truth stage bits for reconstructing scale `i` from scale `i + 1`.
    pub fn stage_bits(&self, i: usize) -> [StageBits; STAGES] {
        let children = &self.scales[i];
        let parents = &self.scales[i + 1];
        std::array::from_fn(|j| stage_bits_unchecked(children, parents, i, j + 1))
    }

    /// Number of candidate children over all scales (eight per parent).
    pub fn candidate_children(&self) -> usize {
        self.scales[1..].iter().map(|s| STAGES * s.len()).sum()
    }
}

/// Downsamples until the cloud holds at most `coarse_threshold` points or
/// the bit depth reaches zero.
pub fn build_hierarchy(pc: &PointCloud, coarse_threshold: usize) -> Result<ScaleHierarchy> {
    if pc.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if coarse_threshold == 0 {
        return Err(Error::InvalidArgument("coarse_threshold must be >= 1".into()));
    }
    let mut scales = vec![pc.clone()];
    loop {
        let last = scales.last().unwrap();
        if last.len() <= coarse_threshold || last.bitdepth == 0 {
            break;
        }
        let next = voxel_downsample(last);
        scales.push(next);
    }
    Ok(ScaleHierarchy { scales })
}

/// Z-order child offset for stage `j` (1-based): the bits of `j - 1` are `(dx, dy, dz)`.
pub fn child_offset(j: usize) -> Result<[u32; 3]> {
    if !(1..=STAGES).contains(&j) {
        return Err(Error::StageOutOfRange(j));
    }
    Ok(offset_unchecked(j))
}

#[inline]
pub(crate) fn offset_unchecked(j: usize) -> [u32; 3] {
    let m = (j - 1) as u32;
    [(m >> 2) & 1, (m >> 1) & 1, m & 1]
}

/// One occupancy bit per parent for a single stage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageBits {
    pub scale: usize,
    pub stage: usize,
    pub bits: Vec<u8>,
}

impl StageBits {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

/// Occupancy of child `child_offset(j)` for every parent, in parent order.
pub fn stage_ground_truth(
    children: &PointCloud,
    parents: &PointCloud,
    scale: usize,
    j: usize,
) -> Result<StageBits> {
    child_offset(j)?;
    if voxel_downsample(children).coords != parents.coords {
        return Err(Error::ParentMismatch);
    }
    Ok(stage_bits_unchecked(children, parents, scale, j))
}

fn stage_bits_unchecked(
    children: &PointCloud,
    parents: &PointCloud,
    scale: usize,
    j: usize,
) -> StageBits {
    let off = offset_unchecked(j);
    let bits = parents
        .coords
        .iter()
        .map(|p| children.contains(&p.child(off)) as u8)
        .collect();
    StageBits {
        scale,
        stage: j,
        bits,
    }
}

/// Sibling occupancy pattern of each node's parent block, one channel per stage offset.
pub fn lsop_features(pc: &PointCloud) -> SparseTensor<f64> {
    let coords = Arc::new(CoordSet::new(pc.coords.clone()));
    lsop_on(&coords)
}

/// LSOP over an already indexed coordinate set.
pub fn lsop_on(coords: &Arc<CoordSet>) -> SparseTensor<f64> {
    let mut data = vec![0.0; coords.len() * STAGES];
    for (row, c) in coords.coords().iter().enumerate() {
        let block = c.parent();
        for k in 1..=STAGES {
            if coords.index_of(&block.child(offset_unchecked(k))).is_some() {
                data[row * STAGES + k - 1] = 1.0;
            }
        }
    }
    SparseTensor::new(coords.clone(), STAGES, data)
}

/// Rebuilds the children from parents and the eight stage bit vectors.
pub fn reconstruct_scale(parents: &PointCloud, bits: &[StageBits]) -> Result<PointCloud> {
    if bits.len() != STAGES {
        return Err(Error::LengthMismatch {
            expected: STAGES,
            actual: bits.len(),
        });
    }
    for b in bits {
        if b.bits.len() != parents.len() {
            return Err(Error::LengthMismatch {
                expected: parents.len(),
                actual: b.bits.len(),
            });
        }
    }
    let mut coords = Vec::with_capacity(parents.len() * 4);
    for (idx, p) in parents.coords.iter().enumerate() {
        let mut any = false;
        for (j, stage) in bits.iter().enumerate() {
            if stage.bits[idx] != 0 {
                any = true;
                coords.push(p.child(offset_unchecked(j + 1)));
            }
        }
        if !any {
            return Err(Error::EmptyParent { index: idx });
        }
    }
    coords.sort_unstable();
    Ok(PointCloud {
        coords,
        bitdepth: parents.bitdepth + 1,
    })
}

/// Distinct coordinates; used by tests and partitioning.
pub fn coord_set(pc: &PointCloud) -> HashSet<VoxelCoord> {
    pc.coords.iter().copied().collect()
}
