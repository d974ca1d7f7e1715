//! Experiment configuration (TOML) and the paths derived from it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fundus_t2d::aggregate::{AggregationStrategy, LogRegConfig};
use fundus_t2d::augment::AugmentParams;
use fundus_t2d::io::{read_to_string, short_hash, Provenance};
use fundus_t2d::model::ModelConfig;
use fundus_t2d::seeding::derive_seed;
use fundus_t2d::synthgen::SynthConfig;
use fundus_t2d::train::{Strategy, TrainConfig};
use fundus_t2d::uncertainty::{default_fractions, UncertaintyMeasure};
use fundus_t2d::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Manifest to read; defaults to `<out>/manifest.csv`.
    pub manifest: Option<PathBuf>,
    /// Directory image paths are relative to; defaults to the manifest's.
    pub image_root: Option<PathBuf>,
    pub split_ratios: [f64; 3],
    pub stratify: bool,
    /// Side length after resizing, before cropping to `model.input_size`.
    pub resize_to: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            image_root: None,
            split_ratios: [0.6, 0.2, 0.2],
            stratify: false,
            resize_to: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TtaConfig {
    pub k: usize,
    /// Adds per-replica columns `r1..rK` to prediction files.
    pub write_replicas: bool,
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self {
            k: 30,
            write_replicas: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferralConfig {
    pub fractions: Vec<f64>,
    pub measures: Vec<UncertaintyMeasure>,
    /// Refer on this predictions file instead of the per-seed test
    /// predictions.
    pub predictions: Option<PathBuf>,
}

impl Default for ReferralConfig {
    fn default() -> Self {
        Self {
            fractions: default_fractions(),
            measures: UncertaintyMeasure::ALL.to_vec(),
            predictions: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregationConfig {
    pub strategies: Vec<AggregationStrategy>,
    pub logreg: LogRegConfig,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self {
            strategies: AggregationStrategy::ALL.to_vec(),
            logreg: LogRegConfig::default(),
        }
    }
}

/// Everything one experiment needs. Randomness derives from `seed`; the
/// `seed` fields inside `[synth]` and `[train]` are overwritten.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Training seeds; when empty, `n_seeds` seeds are derived from `seed`.
    pub seeds: Vec<u64>,
    pub n_seeds: usize,
    pub strategy: Strategy,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub augment: AugmentParams,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub tta: TtaConfig,
    pub referral: ReferralConfig,
    pub aggregation: AggregationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            seeds: Vec::new(),
            n_seeds: 3,
            strategy: Strategy::MtlRandom,
            data: DataConfig::default(),
            synth: SynthConfig::default(),
            augment: AugmentParams {
                translate_px: 2,
                ..AugmentParams::default()
            },
            model: ModelConfig::default(),
            train: TrainConfig {
                epochs: 10,
                ..TrainConfig::default()
            },
            tta: TtaConfig::default(),
            referral: ReferralConfig::default(),
            aggregation: AggregationConfig::default(),
        }
    }
}

const STREAM_SYNTH: u64 = 1;
const STREAM_SPLIT: u64 = 2;
const STREAM_TTA: u64 = 3;
const STREAM_TRAIN: u64 = 4;

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.message().replace('\n', " ")))
    }

    /// Reads the file; relative paths inside it resolve against its folder.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::parse(&read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        };
        resolve(&mut cfg.data.manifest);
        resolve(&mut cfg.data.image_root);
        resolve(&mut cfg.referral.predictions);
        Ok(cfg)
    }

    /// Applies the seed override, derives module seeds and validates.
    pub fn resolve(mut self, seed_override: Option<u64>) -> Result<Self> {
        if let Some(s) = seed_override {
            self.seed = s;
        }
        self.synth.seed = derive_seed(self.seed, &[STREAM_SYNTH]);
        if self.seeds.is_empty() {
            self.seeds = (0..self.n_seeds as u64)
                .map(|i| derive_seed(self.seed, &[STREAM_TRAIN, i]))
                .collect();
        }
        self.n_seeds = self.seeds.len();
        self.model.head_mode = self.strategy.head_mode();
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.augment.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.model.input_size > self.data.resize_to {
            return bad("model.input_size must not exceed data.resize_to");
        }
        if self.tta.k == 0 {
            return bad("tta.k must be positive");
        }
        if self.referral.fractions.iter().any(|q| !(0.0..1.0).contains(q))
            || self.referral.fractions.windows(2).any(|w| w[0] > w[1])
        {
            return bad("referral.fractions must be sorted and lie in [0, 1)");
        }
        Ok(())
    }

    pub fn split_seed(&self) -> u64 {
        derive_seed(self.seed, &[STREAM_SPLIT])
    }

    pub fn tta_seed(&self, run_seed: u64) -> u64 {
        derive_seed(self.seed, &[STREAM_TTA, run_seed])
    }

    /// Hash of the resolved configuration.
    pub fn hash(&self) -> String {
        short_hash(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn provenance(&self) -> Provenance {
        Provenance::new(self.hash(), self.seed)
    }
}

/// Output layout under `--out`.
#[derive(Debug, Clone)]
pub struct Layout {
    pub out: PathBuf,
}

impl Layout {
    pub fn manifest(&self, cfg: &ExperimentConfig) -> PathBuf {
        cfg.data.manifest.clone().unwrap_or_else(|| self.out.join("manifest.csv"))
    }

    pub fn image_root(&self, cfg: &ExperimentConfig) -> PathBuf {
        cfg.data.image_root.clone().unwrap_or_else(|| {
            self.manifest(cfg)
                .parent()
                .map(Path::to_path_buf)
                .unwrap_or_default()
        })
    }

    pub fn split(&self) -> PathBuf {
        self.out.join("split.csv")
    }

    pub fn checkpoint(&self, seed: u64) -> PathBuf {
        self.out.join("models").join(format!("seed_{seed}.json"))
    }

    pub fn train_log(&self, seed: u64) -> PathBuf {
        self.out.join("train").join(format!("seed_{seed}.jsonl"))
    }

    pub fn train_summary(&self) -> PathBuf {
        self.out.join("train_summary.csv")
    }

    pub fn predictions(&self, seed: u64) -> PathBuf {
        self.out.join("predictions").join(format!("seed_{seed}.csv"))
    }

    pub fn predict_summary(&self) -> PathBuf {
        self.out.join("predict_summary.csv")
    }

    pub fn referral(&self, tag: &str) -> (PathBuf, PathBuf) {
        let dir = self.out.join("referral");
        (dir.join(format!("{tag}.csv")), dir.join(format!("{tag}.svg")))
    }

    pub fn features(&self, seed: u64) -> PathBuf {
        self.out.join("aggregate").join(format!("features_seed_{seed}.csv"))
    }

    pub fn aggregated(&self, seed: u64) -> PathBuf {
        self.out.join("aggregate").join(format!("seed_{seed}.csv"))
    }

    pub fn report(&self) -> (PathBuf, PathBuf) {
        (self.out.join("report.csv"), self.out.join("report.md"))
    }
}
