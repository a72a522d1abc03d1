use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainError;
use crate::data::shapes::SIZE_MULTIPLE;
use crate::discriminator::DEFAULT_SCALES;
use crate::generator::{GeneratorMode, SubNetwork};
use crate::losses::LossWeights;
use crate::model::ModelSpec;
use crate::nn::AdamConfig;

/// Generator sub-network named in a phase's `train` list.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainedNet {
    G1,
    G2,
}

impl From<TrainedNet> for SubNetwork {
    fn from(n: TrainedNet) -> Self {
        match n {
            TrainedNet::G1 => SubNetwork::G1,
            TrainedNet::G2 => SubNetwork::G2,
        }
    }
}

/// One stage of the schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseConfig {
    pub name: String,
    /// `global_only` runs the global generator alone at this phase's resolution.
    pub generator: GeneratorMode,
    /// Generator sub-networks updated in this phase; the others are frozen.
    pub train: Vec<TrainedNet>,
    /// 1-based discriminator scales used in this phase.
    pub discriminators: Vec<usize>,
    pub epochs: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub width_divisor: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Discriminator learning rate; the generator rate when absent.
    pub d_lr: Option<f64>,
    pub adam: AdamConfig,
    pub losses: LossWeights,
    pub use_instance_maps: bool,
    pub use_encoder: bool,
    /// Add the perceptual term when a feature network is supplied.
    pub use_perceptual: bool,
    pub discriminator_scales: usize,
    /// Extra checkpoint every this many epochs (0: phase ends only).
    pub checkpoint_every: usize,
    pub shuffle: bool,
    pub phases: Vec<PhaseConfig>,
}

impl Default for TrainConfig {
    /// Desk-scale three-phase schedule for 256x128 data.
    fn default() -> Self {
        Self {
            seed: 0,
            width_divisor: 4,
            batch_size: 4,
            lr: 2e-4,
            d_lr: None,
            adam: AdamConfig::default(),
            losses: LossWeights::default(),
            use_instance_maps: true,
            use_encoder: true,
            use_perceptual: false,
            discriminator_scales: DEFAULT_SCALES,
            checkpoint_every: 0,
            shuffle: true,
            phases: standard_phases(128, 256, [10, 4, 4]),
        }
    }
}

/// Global network at half resolution, then the enhancer alone against the
/// finest discriminator, then everything jointly.
pub fn standard_phases(height: usize, width: usize, epochs: [usize; 3]) -> Vec<PhaseConfig> {
    vec![
        PhaseConfig {
            name: "global".into(),
            generator: GeneratorMode::GlobalOnly,
            train: vec![TrainedNet::G1],
            discriminators: vec![1, 2, 3],
            epochs: epochs[0],
            height: height / 2,
            width: width / 2,
        },
        PhaseConfig {
            name: "enhancer".into(),
            generator: GeneratorMode::Composed,
            train: vec![TrainedNet::G2],
            discriminators: vec![1],
            epochs: epochs[1],
            height,
            width,
        },
        PhaseConfig {
            name: "joint".into(),
            generator: GeneratorMode::Composed,
            train: vec![TrainedNet::G1, TrainedNet::G2],
            discriminators: vec![1, 2, 3],
            epochs: epochs[2],
            height,
            width,
        },
    ]
}

impl TrainConfig {
    pub fn from_toml(s: &str) -> Result<Self, TrainError> {
        let c: Self = toml::from_str(s).map_err(|e| TrainError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Generator mode of the final model.
    pub fn generator_mode(&self) -> GeneratorMode {
        if self.phases.iter().any(|p| p.generator == GeneratorMode::Composed) {
            GeneratorMode::Composed
        } else {
            GeneratorMode::GlobalOnly
        }
    }

    pub fn model_spec(&self, num_classes: usize) -> Result<ModelSpec, TrainError> {
        Ok(ModelSpec::standard(
            num_classes,
            self.width_divisor,
            self.generator_mode(),
            self.discriminator_scales,
            self.use_instance_maps,
            self.use_encoder,
        )?)
    }

    pub fn d_lr(&self) -> f64 {
        self.d_lr.unwrap_or(self.lr)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.d_lr() > 0.0 && self.d_lr().is_finite()) {
            return bad(format!("learning rates must be positive, got {} / {}", self.lr, self.d_lr()));
        }
        if self.batch_size == 0 || self.width_divisor == 0 {
            return bad("batch_size and width_divisor must be positive".into());
        }
        if self.discriminator_scales == 0 {
            return bad("discriminator_scales must be positive".into());
        }
        if self.phases.is_empty() {
            return bad("at least one phase is required".into());
        }
        self.losses.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        for p in &self.phases {
            if p.epochs == 0 {
                return bad(format!("phase `{}`: epochs must be positive", p.name));
            }
            if p.height == 0 || p.width == 0 || p.height % SIZE_MULTIPLE != 0 || p.width % SIZE_MULTIPLE != 0 {
                return bad(format!("phase `{}`: resolution {}x{} is not a multiple of {SIZE_MULTIPLE}", p.name, p.height, p.width));
            }
            if p.discriminators.is_empty() || p.discriminators.iter().any(|&k| k == 0 || k > self.discriminator_scales) {
                return bad(format!("phase `{}`: discriminator scales must lie in 1..={}", p.name, self.discriminator_scales));
            }
            if p.discriminators.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("phase `{}`: discriminator scales must be increasing", p.name));
            }
            if p.generator == GeneratorMode::GlobalOnly && p.train.contains(&TrainedNet::G2) {
                return bad(format!("phase `{}`: a global-only phase cannot train the enhancer", p.name));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Constant for the first `constant` epochs, then linear decay reaching
/// `base / decay` in the last epoch and zero afterwards.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub constant: usize,
    pub decay: usize,
}

impl LrSchedule {
    /// Split `epochs` into a constant first half and a decaying second half.
    pub fn halves(base: f64, epochs: usize) -> Self {
        let decay = epochs / 2;
        Self { base, constant: epochs - decay, decay }
    }

    /// Learning rate of 0-based `epoch`.
    pub fn at(&self, epoch: usize) -> f64 {
        if epoch < self.constant {
            self.base
        } else if epoch < self.constant + self.decay {
            self.base * (1.0 - (epoch - self.constant) as f64 / self.decay as f64)
        } else {
            0.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_values() {
        let s = LrSchedule { base: 2e-4, constant: 100, decay: 100 };
        assert_eq!(s.at(0), 2e-4);
        assert_eq!(s.at(99), 2e-4);
        assert!((s.at(150) - 1e-4).abs() < 1e-15);
        assert!((s.at(199) - 2e-4 / 100.0).abs() < 1e-15);
        assert_eq!(s.at(200), 0.0);
        assert_eq!(LrSchedule::halves(1.0, 5), LrSchedule { base: 1.0, constant: 3, decay: 2 });
    }

    #[test]
    fn toml_round_trip_and_validation() {
        let c = TrainConfig::default();
        let back = TrainConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let mut bad = c.clone();
        bad.phases[0].height = 48;
        assert!(matches!(bad.validate(), Err(TrainError::Config(_))));
        let mut bad = c.clone();
        bad.lr = 0.0;
        assert!(bad.validate().is_err());
        let mut other = c;
        other.seed = 1;
        assert_ne!(other.hash(), back.hash());
    }

    #[test]
    fn partial_toml_takes_defaults() {
        let c = TrainConfig::from_toml("seed = 7\nbatch_size = 2\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.phases.len(), 3);
        assert_eq!(c.lr, 2e-4);
    }
}
