//! Desk-scale efficacy experiment: search on the planted-motif task, retrain
//! the derived genotype and compare it with random genotypes trained
//! identically.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::Config;
use crate::data::{generate_synthetic, SynthSpec};
use crate::error::{Error, Result};
use crate::genotype::Genotype;
use crate::network::{NetworkConfig, Task};
use crate::search::{search, SearchConfig};
use crate::train::{evaluate, train, TrainConfig};

/// Fraction of the generated samples used for search and retraining.
pub const TRAIN_FRACTION: f64 = 0.8;
const RANDOM_STREAM: u64 = 0x7a4d_0c3e;

#[derive(Clone, Debug, PartialEq)]
pub struct DeskPreset {
    pub synth: SynthSpec,
    pub config: Config,
    pub random_genotypes: usize,
}

impl Default for DeskPreset {
    fn default() -> Self {
        DeskPreset {
            synth: SynthSpec {
                noise: 0.6,
                ..SynthSpec::default()
            },
            config: Config::desk(),
            random_genotypes: 5,
        }
    }
}

impl Config {
    /// Network, search and training settings for the 16-channel, 32-step
    /// planted-motif task.
    pub fn desk() -> Self {
        Config {
            network: NetworkConfig {
                channels: 16,
                timesteps: 32,
                height: 1,
                width: 1,
                layers: 1,
                groups: 1,
                nodes: 4,
                reduction: 3,
                hidden: 32,
                classes: 4,
                task: Task::MultiLabel,
                dropout: 0.0,
            },
            search: SearchConfig {
                epochs: 10,
                alpha_lr: 3e-3,
                // Ten epochs at the default rate leave the supernet untrained
                // and alpha near uniform.
                lr: 0.1,
                ..SearchConfig::default()
            },
            train: TrainConfig {
                epochs: 100,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EfficacyRun {
    pub seed: u64,
    pub genotype: Genotype,
    pub searched_map: f64,
    pub random_genotypes: Vec<Genotype>,
    pub random_maps: Vec<f64>,
}

impl EfficacyRun {
    pub fn random_median(&self) -> f64 {
        median(&self.random_maps)
    }

    /// Searched minus random-median mAP.
    pub fn gap(&self) -> f64 {
        self.searched_map - self.random_median()
    }
}

/// Median; the mean of the middle pair for even lengths. NaN when empty.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

impl DeskPreset {
    /// One paired run. `seed` drives the data, the search, every retraining
    /// and the random genotypes.
    pub fn run(&self, seed: u64) -> Result<EfficacyRun> {
        let data = generate_synthetic(&SynthSpec {
            seed,
            ..self.synth.clone()
        })?;
        let (train_set, val_set) = data.split(TRAIN_FRACTION, seed)?;
        let net = &self.config.network;
        let search_cfg = SearchConfig {
            seed,
            ..self.config.search.clone()
        };
        let train_cfg = TrainConfig {
            seed,
            ..self.config.train.clone()
        };
        let found = search::<f32>(&train_set, net, &search_cfg).map_err(|a| a.source)?;
        let retrain = |g: &Genotype| -> Result<f64> {
            let out = train::<f32>(g, &train_set, None, net, &train_cfg, |_| Ok(())).map_err(|a| a.source)?;
            let report = evaluate(&out.network, &val_set, train_cfg.batch_size.max(1))?;
            if !report.map.is_finite() {
                return Err(Error::Numeric("validation mAP is not finite".into()));
            }
            Ok(report.map)
        };
        let searched_map = retrain(&found.genotype)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ RANDOM_STREAM);
        let random_genotypes: Vec<Genotype> = (0..self.random_genotypes).map(|_| Genotype::random(&mut rng)).collect();
        let random_maps = random_genotypes.iter().map(retrain).collect::<Result<_>>()?;
        Ok(EfficacyRun {
            seed,
            genotype: found.genotype,
            searched_map,
            random_genotypes,
            random_maps,
        })
    }
}
