//! Pretrained asset file: network configurations, frozen prior-network
//! weights and refiner base layers, stored as little-endian 32-bit floats.
//!
//! ```text
//! magic "HPCA" | version u8 | ppn blocks u32 | ppn channels u32
//! | dar blocks u32 | dar channels u32
//! | ppn: n u32, f32[n] | base: n u32, f32[n] | base without prior: n u32, f32[n]
//! ```
//! Base arrays may be empty before base training. The SHA-256 of the whole
//! file identifies the assets inside coded bitstreams.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::bitstream::Reader;
use crate::dar::{Dar, DarConfig};
use crate::error::{Error, Result};
use crate::ppn::{Ppn, PpnConfig};

pub const ASSET_MAGIC: &[u8; 4] = b"HPCA";
pub const ASSET_VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Assets {
    pub ppn_config: PpnConfig,
    pub dar_config: DarConfig,
    pub ppn: Vec<f32>,
    /// Refiner base layer trained with the prior network.
    pub base: Vec<f32>,
    /// Refiner base layer trained with all-zero priors.
    pub base_no_ppn: Vec<f32>,
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

impl Assets {
    /// Prior network only; base layers are filled in later.
    pub fn with_ppn(ppn_config: PpnConfig, dar_config: DarConfig, ppn: &[f64]) -> Result<Self> {
        let expected = Ppn::new(ppn_config)?.layout().len();
        if ppn.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                actual: ppn.len(),
            });
        }
        Dar::new(dar_config)?;
        Ok(Self {
            ppn_config,
            dar_config,
            ppn: to_f32(ppn),
            base: Vec::new(),
            base_no_ppn: Vec::new(),
        })
    }

    pub fn set_base(&mut self, base: &[f64], with_ppn: bool) -> Result<()> {
        let expected = Dar::new(self.dar_config)?.param_count();
        if base.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                actual: base.len(),
            });
        }
        if with_ppn {
            self.base = to_f32(base);
        } else {
            self.base_no_ppn = to_f32(base);
        }
        Ok(())
    }

    pub fn ppn_model(&self) -> Result<Ppn> {
        Ppn::new(self.ppn_config)
    }

    pub fn dar_model(&self) -> Result<Dar> {
        Dar::new(self.dar_config)
    }

    /// Base layer for the given prior setting, as 64-bit values.
    pub fn base_for(&self, with_ppn: bool) -> Result<Vec<f64>> {
        let b = if with_ppn { &self.base } else { &self.base_no_ppn };
        if b.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "assets contain no base layer for {} prior",
                if with_ppn { "the learned" } else { "the disabled" }
            )));
        }
        Ok(b.iter().map(|&x| x as f64).collect())
    }

    pub fn ppn_f64(&self) -> Vec<f64> {
        self.ppn.iter().map(|&x| x as f64).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(ASSET_MAGIC);
        out.push(ASSET_VERSION);
        for v in [
            self.ppn_config.blocks,
            self.ppn_config.channels,
            self.dar_config.blocks,
            self.dar_config.channels,
        ] {
            out.extend((v as u32).to_le_bytes());
        }
        for arr in [&self.ppn, &self.base, &self.base_no_ppn] {
            out.extend((arr.len() as u32).to_le_bytes());
            for x in arr.iter() {
                out.extend(x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader::new(data);
        if r.take(4).map_err(|_| Error::BadMagic)? != ASSET_MAGIC {
            return Err(Error::BadMagic);
        }
        let v = r.u8()?;
        if v != ASSET_VERSION {
            return Err(Error::BadVersion(v));
        }
        let ppn_config = PpnConfig {
            blocks: r.u32()? as usize,
            channels: r.u32()? as usize,
        };
        let dar_config = DarConfig {
            blocks: r.u32()? as usize,
            channels: r.u32()? as usize,
        };
        let mut arrays = Vec::with_capacity(3);
        for _ in 0..3 {
            let n = r.u32()? as usize;
            let body = r.take(n.checked_mul(4).ok_or(Error::Truncated(r.position()))?)?;
            arrays.push(
                body.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect::<Vec<_>>(),
            );
        }
        if !r.is_empty() {
            return Err(Error::Corrupt("trailing bytes in asset file".into()));
        }
        let base_no_ppn = arrays.pop().unwrap();
        let base = arrays.pop().unwrap();
        let ppn = arrays.pop().unwrap();
        let ppn_len = Ppn::new(ppn_config)?.layout().len();
        let dar_len = Dar::new(dar_config)?.param_count();
        if ppn.len() != ppn_len {
            return Err(Error::Corrupt(format!("prior network has {} of {ppn_len} weights", ppn.len())));
        }
        for b in [&base, &base_no_ppn] {
            if !b.is_empty() && b.len() != dar_len {
                return Err(Error::Corrupt(format!("base layer has {} of {dar_len} weights", b.len())));
            }
        }
        Ok(Self {
            ppn_config,
            dar_config,
            ppn,
            base,
            base_no_ppn,
        })
    }

    pub fn checksum(&self) -> [u8; 32] {
        Sha256::digest(self.to_bytes()).into()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
