//! Building asset files from a training corpus: prior-network pretraining
//! followed by both refiner base layers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assets::Assets;
use crate::dar::DarConfig;
use crate::error::{Error, Result};
use crate::octree::PointCloud;
use crate::optim::TrainConfig;
use crate::ppn::PpnConfig;
use crate::synth::toy_cloud;
use crate::train::{hierarchies, pretrain_ppn, train_base, EpochStat, FrameData};

/// Procedurally generated primitive surfaces used as the pretraining set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyCorpus {
    pub clouds: usize,
    pub bitdepth: u8,
    pub radius: f64,
    pub seed: u64,
}

impl Default for ToyCorpus {
    fn default() -> Self {
        Self {
            clouds: 30,
            bitdepth: 6,
            radius: 10.0,
            seed: 1,
        }
    }
}

impl ToyCorpus {
    pub fn generate(&self) -> Result<Vec<PointCloud>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.clouds).map(|_| toy_cloud(&mut rng, self.bitdepth, self.radius)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssetRecipe {
    pub ppn: PpnConfig,
    pub dar: DarConfig,
    pub pretrain: TrainConfig,
    pub base: TrainConfig,
    pub coarse_threshold: usize,
    /// Share of the corpus held out for validation.
    pub val_fraction: f64,
}

impl Default for AssetRecipe {
    fn default() -> Self {
        Self {
            ppn: PpnConfig::default(),
            dar: DarConfig::default(),
            pretrain: TrainConfig::pretrain(),
            base: TrainConfig {
                seed: 1,
                ..TrainConfig::pretrain()
            },
            coarse_threshold: 64,
            val_fraction: 0.2,
        }
    }
}

impl AssetRecipe {
    /// Small networks and short schedules that train in seconds on one core.
    pub fn toy() -> Self {
        let short = TrainConfig {
            epochs: 6,
            ..TrainConfig::pretrain()
        };
        Self {
            ppn: PpnConfig { blocks: 1, channels: 8 },
            dar: DarConfig { blocks: 1, channels: 8 },
            pretrain: TrainConfig { seed: 1, ..short },
            base: TrainConfig { seed: 2, ..short },
            ..Self::default()
        }
    }

    fn split<'a, T>(&self, items: &'a [T]) -> Result<(&'a [T], &'a [T])> {
        if items.len() < 2 {
            return Err(Error::InvalidArgument("training needs at least two clouds".into()));
        }
        let val = ((items.len() as f64 * self.val_fraction).round() as usize).clamp(1, items.len() - 1);
        Ok(items.split_at(items.len() - val))
    }
}

/// Per-epoch logs of every training run.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainingLog {
    pub ppn: Vec<EpochStat>,
    pub base: Vec<EpochStat>,
    pub base_no_ppn: Vec<EpochStat>,
}

/// Pretrains the prior network; the returned assets have no base layers.
pub fn pretrain_assets(clouds: &[PointCloud], recipe: &AssetRecipe) -> Result<(Assets, Vec<EpochStat>)> {
    let hs = hierarchies(clouds, recipe.coarse_threshold)?;
    let (train, val) = recipe.split(&hs)?;
    let t = pretrain_ppn(train, val, recipe.ppn, &recipe.pretrain)?;
    Ok((Assets::with_ppn(recipe.ppn, recipe.dar, &t.params)?, t.history))
}

/// Trains one base layer with the frozen prior network of `assets`, or
/// with all-zero priors.
pub fn train_base_layer(
    assets: &mut Assets,
    clouds: &[PointCloud],
    recipe: &AssetRecipe,
    with_ppn: bool,
) -> Result<Vec<EpochStat>> {
    let ppn = assets.ppn_model()?;
    let dar = assets.dar_model()?;
    let frames = clouds
        .iter()
        .map(|c| FrameData::new(c, recipe.coarse_threshold, with_ppn.then_some((&ppn, assets.ppn.as_slice()))))
        .collect::<Result<Vec<_>>>()?;
    let (train, val) = recipe.split(&frames)?;
    let t = train_base(train, val, &dar, &recipe.base)?;
    assets.set_base(&t.params, with_ppn)?;
    Ok(t.history)
}

/// Full asset build: prior network, then both base layers.
pub fn build_assets(clouds: &[PointCloud], recipe: &AssetRecipe) -> Result<(Assets, TrainingLog)> {
    let (mut assets, ppn) = pretrain_assets(clouds, recipe)?;
    let base = train_base_layer(&mut assets, clouds, recipe, true)?;
    let base_no_ppn = train_base_layer(&mut assets, clouds, recipe, false)?;
    Ok((assets, TrainingLog { ppn, base, base_no_ppn }))
}
