//! `.hpcg` container: header, parameter sub-stream, then occupancy streams
//! ordered by frame, scale (coarse to fine) and stage. Little-endian.
//!
//! ```text
//! magic "HPCG" | version u8 | bitdepth u8 | frames u16 | flags u8 | asset sha256 [32]
//! param_len u32
//! per frame: scales u8 | coarse count u32 | packed coarse coords
//!            | stage lengths u32 [scales - 1][8]
//! param stream | occupancy streams
//! ```

use crate::error::{Error, Result};
use crate::octree::{PointCloud, VoxelCoord, STAGES};

pub const MAGIC: &[u8; 4] = b"HPCG";
pub const VERSION: u8 = 1;

const FLAG_SMC: u8 = 1;
const FLAG_PPN: u8 = 2;

/// Bounds-checked little-endian cursor.
pub struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.data.len()
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(Error::Truncated(self.pos));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Flags {
    pub smc: bool,
    pub ppn: bool,
}

impl Flags {
    fn to_byte(self) -> u8 {
        (self.smc as u8 * FLAG_SMC) | (self.ppn as u8 * FLAG_PPN)
    }

    fn from_byte(b: u8) -> Result<Self> {
        if b & !(FLAG_SMC | FLAG_PPN) != 0 {
            return Err(Error::Corrupt(format!("unknown flags {b:#04x}")));
        }
        Ok(Self {
            smc: b & FLAG_SMC != 0,
            ppn: b & FLAG_PPN != 0,
        })
    }
}

/// Coded form of one frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameStreams {
    /// Coarsest scale, stored raw.
    pub coarse: PointCloud,
    /// Occupancy streams per coded scale from coarse to fine (scale `L-1` first), eight stages each.
    pub scales: Vec<[Vec<u8>; STAGES]>,
}

impl FrameStreams {
    /// Number of scales including the coarsest.
    pub fn scale_count(&self) -> usize {
        self.scales.len() + 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    pub bitdepth: u8,
    pub flags: Flags,
    pub asset_checksum: [u8; 32],
    pub params: Vec<u8>,
    pub frames: Vec<FrameStreams>,
}

/// Bit sizes of the parts of a serialized file.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Layout {
    pub header_bits: u64,
    pub param_bits: u64,
    /// `[frame][scale from coarse to fine][stage]` in bits.
    pub stage_bits: Vec<Vec<[u64; STAGES]>>,
}

impl Layout {
    pub fn total_bits(&self) -> u64 {
        self.header_bits
            + self.param_bits
            + self.stage_bits.iter().flatten().flatten().sum::<u64>()
    }
}

fn pack_coords(coords: &[VoxelCoord], bits: u8, out: &mut Vec<u8>) {
    let mut acc: u64 = 0;
    let mut n = 0u32;
    for c in coords {
        for v in c.to_array() {
            acc = (acc << bits) | v as u64;
            n += bits as u32;
            while n >= 8 {
                out.push((acc >> (n - 8)) as u8);
                n -= 8;
            }
            acc &= (1u64 << n) - 1;
        }
    }
    if n > 0 {
        out.push((acc << (8 - n)) as u8);
    }
}

fn unpack_coords(r: &mut Reader<'_>, count: usize, bits: u8) -> Result<Vec<VoxelCoord>> {
    let total = count * 3 * bits as usize;
    let bytes = r.take(total.div_ceil(8))?;
    let mut out = Vec::with_capacity(count);
    let mut pos = 0usize;
    let mut read = || {
        let mut v = 0u32;
        for _ in 0..bits {
            let bit = (bytes[pos / 8] >> (7 - pos % 8)) & 1;
            v = (v << 1) | bit as u32;
            pos += 1;
        }
        v
    };
    for _ in 0..count {
        let (x, y, z) = (read(), read(), read());
        out.push(VoxelCoord::new(x, y, z));
    }
    Ok(out)
}

impl Bitstream {
    pub fn to_bytes(&self) -> Result<(Vec<u8>, Layout)> {
        if self.frames.len() > u16::MAX as usize {
            return Err(Error::InvalidArgument("too many frames".into()));
        }
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.push(VERSION);
        out.push(self.bitdepth);
        out.extend((self.frames.len() as u16).to_le_bytes());
        out.push(self.flags.to_byte());
        out.extend(self.asset_checksum);
        out.extend((self.params.len() as u32).to_le_bytes());
        let mut layout = Layout::default();
        for f in &self.frames {
            let sc = f.scale_count();
            if sc > u8::MAX as usize || sc as u8 > self.bitdepth + 1 {
                return Err(Error::InvalidArgument(format!("{sc} scales at bitdepth {}", self.bitdepth)));
            }
            out.push(sc as u8);
            out.extend((f.coarse.len() as u32).to_le_bytes());
            pack_coords(f.coarse.coords(), self.bitdepth - (sc as u8 - 1), &mut out);
            let mut sizes = Vec::with_capacity(f.scales.len());
            for stages in &f.scales {
                let mut s = [0u64; STAGES];
                for (j, st) in stages.iter().enumerate() {
                    out.extend((st.len() as u32).to_le_bytes());
                    s[j] = 8 * st.len() as u64;
                }
                sizes.push(s);
            }
            layout.stage_bits.push(sizes);
        }
        layout.header_bits = 8 * out.len() as u64;
        layout.param_bits = 8 * self.params.len() as u64;
        out.extend(&self.params);
        for f in &self.frames {
            for stages in &f.scales {
                for st in stages {
                    out.extend(st);
                }
            }
        }
        debug_assert_eq!(layout.total_bits(), 8 * out.len() as u64);
        Ok((out, layout))
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader::new(data);
        if r.take(4).map_err(|_| Error::BadMagic)? != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(Error::BadVersion(version));
        }
        let bitdepth = r.u8()?;
        let frames = r.u16()? as usize;
        let flags = Flags::from_byte(r.u8()?)?;
        let asset_checksum: [u8; 32] = r.take(32)?.try_into().unwrap();
        let param_len = r.u32()? as usize;
        let mut heads = Vec::with_capacity(frames);
        for _ in 0..frames {
            let sc = r.u8()?;
            if sc == 0 || sc > bitdepth + 1 {
                return Err(Error::Corrupt(format!("{sc} scales at bitdepth {bitdepth}")));
            }
            let count = r.u32()? as usize;
            let cbits = bitdepth - (sc - 1);
            let coords = unpack_coords(&mut r, count, cbits)?;
            let coarse = PointCloud::new(coords, cbits).map_err(|e| Error::Corrupt(format!("coarse scale: {e}")))?;
            if coarse.len() != count {
                return Err(Error::Corrupt("duplicate coarse coordinates".into()));
            }
            let mut lens = Vec::with_capacity(sc as usize - 1);
            for _ in 1..sc {
                let mut l = [0usize; STAGES];
                for v in &mut l {
                    *v = r.u32()? as usize;
                }
                lens.push(l);
            }
            heads.push((coarse, lens));
        }
        let expected: usize = param_len
            + heads
                .iter()
                .map(|(_, l)| l.iter().flatten().sum::<usize>())
                .sum::<usize>();
        let remaining = data.len() - r.position();
        if expected != remaining {
            return Err(Error::Corrupt(format!(
                "stream lengths add up to {expected} bytes but {remaining} remain"
            )));
        }
        let params = r.take(param_len)?.to_vec();
        let mut out = Vec::with_capacity(frames);
        for (coarse, lens) in heads {
            let scales = lens
                .iter()
                .map(|l| {
                    let mut s: [Vec<u8>; STAGES] = Default::default();
                    for (j, &n) in l.iter().enumerate() {
                        s[j] = r.take(n)?.to_vec();
                    }
                    Ok(s)
                })
                .collect::<Result<Vec<_>>>()?;
            out.push(FrameStreams { coarse, scales });
        }
        Ok(Self {
            bitdepth,
            flags,
            asset_checksum,
            params,
            frames: out,
        })
    }
}
