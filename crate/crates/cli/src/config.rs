//! Run configuration loaded from `--config`.

use std::fs;
use std::path::{Path, PathBuf};

use avatar_offload::attack::MlpConfig;
use avatar_offload::corpus::CorpusSpec;
use avatar_offload::experiment::{AttackSettings, AttackerChoice};
use avatar_offload::perfmodel::ProfileSet;
use serde::Deserialize;

use crate::Failure;

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Profile file replacing the built-in hardware profiles.
    pub profiles: Option<PathBuf>,
    pub corpus: CorpusSpec,
    pub model: ModelSection,
    pub attack: AttackSection,
    pub sweep: SweepSection,
    pub hardware: HardwareSection,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub block: usize,
    pub offloaded: usize,
    pub latent_dim: usize,
    pub keep_base_local: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { block: 4, offloaded: 14, latent_dim: avatar_offload::codec::DEFAULT_LATENT_DIM, keep_base_local: true }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub eval_repeats: usize,
    pub train_per_class: usize,
    pub train_repeats: usize,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for AttackSection {
    fn default() -> Self {
        let s = AttackSettings::default();
        Self {
            eval_repeats: s.eval_repeats,
            train_per_class: s.train_per_class,
            train_repeats: s.train_repeats,
            hidden: s.mlp.hidden,
            epochs: s.mlp.epochs,
            learning_rate: s.mlp.learning_rate,
            batch_size: s.mlp.batch_size,
        }
    }
}

impl AttackSection {
    pub fn settings(&self, attackers: AttackerChoice, seed: u64) -> AttackSettings {
        AttackSettings {
            attackers,
            eval_repeats: self.eval_repeats,
            train_per_class: self.train_per_class,
            train_repeats: self.train_repeats,
            mlp: MlpConfig {
                hidden: self.hidden.clone(),
                learning_rate: self.learning_rate,
                epochs: self.epochs,
                batch_size: self.batch_size,
                ..MlpConfig::default()
            },
            seed,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub ms: Vec<usize>,
    pub vs: Vec<f64>,
    /// Adds the unnoised column.
    pub include_unnoised: bool,
    pub eval_repeats: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { ms: vec![2, 4, 6, 8, 10, 12, 14], vs: vec![1.0, 0.1, 0.01], include_unnoised: true, eval_repeats: 1 }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HardwareSection {
    pub local: String,
    pub host: String,
    pub link: String,
    pub workload: String,
}

impl Default for HardwareSection {
    fn default() -> Self {
        Self {
            local: "quest_pro".into(),
            host: "rtx_5090".into(),
            link: "wifi7".into(),
            workload: "partitioned".into(),
        }
    }
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = fs::read_to_string(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        let mut config: Self =
            toml::from_str(&text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
        config.corpus.validate()?;
        if let (Some(p), Some(dir)) = (&config.profiles, path.parent()) {
            config.profiles = Some(dir.join(p));
        }
        Ok(config)
    }

    pub fn profile_set(&self, override_path: Option<&Path>) -> Result<ProfileSet, Failure> {
        match override_path.or(self.profiles.as_deref()) {
            None => Ok(ProfileSet::builtin()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Failure::config(format!("{}: {e}", p.display())))?;
                Ok(ProfileSet::from_toml(&text)?)
            }
        }
    }
}
