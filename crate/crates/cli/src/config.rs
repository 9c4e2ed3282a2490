//! Pipeline configuration: presets, TOML overlays and derived stage seeds.

use std::fmt;
use std::path::{Path, PathBuf};

use longct_core::phantom::PhantomConfig;
use longct_core::preprocess::PreprocessConfig;
use longct_core::registration::RegistrationConfig;
use longct_seg::model::{ModelConfig, Variant};
use longct_seg::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Selects the compute device; only `cpu` is available.
pub const DEVICE_ENV: &str = "LONGCT_DEVICE";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// 64³ phantoms, capped epochs; finishes on a laptop CPU.
    Desk,
    /// 300³ resampling and the full training schedule.
    PaperScale,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::PaperScale => "paper-scale",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Device {
    Cpu,
}

/// Reads the device from the environment; unset means CPU.
pub fn device_from_env() -> CliResult<Device> {
    match std::env::var(DEVICE_ENV) {
        Err(std::env::VarError::NotPresent) => Ok(Device::Cpu),
        Ok(v) if v.trim().eq_ignore_ascii_case("cpu") => Ok(Device::Cpu),
        Ok(v) => Err(CliError::Config(format!("{DEVICE_ENV}={v}: only `cpu` is supported"))),
        Err(e) => Err(CliError::Config(format!("{DEVICE_ENV}: {e}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub preset: Preset,
    /// Every stage seed is derived from this value.
    pub seed: u64,
    pub out: PathBuf,
    pub phantom: PhantomConfig,
    pub preprocess: PreprocessConfig,
    pub registration: RegistrationConfig,
    /// Network layout. `run` trains both variants from it; `train` uses
    /// the variant given here unless overridden on the command line.
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl PipelineConfig {
    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Desk => Self {
                preset,
                seed: 0,
                out: PathBuf::from("runs/desk"),
                phantom: PhantomConfig { n_studies: 24, split_ratio: [16.0, 4.0, 4.0], ..Default::default() },
                preprocess: PreprocessConfig::desk(),
                registration: RegistrationConfig::default(),
                model: ModelConfig::new(Variant::Longitudinal),
                train: TrainConfig {
                    max_epochs: 30,
                    max_items_per_epoch: Some(128),
                    max_val_items: Some(64),
                    ..Default::default()
                },
            },
            Preset::PaperScale => Self {
                preset,
                seed: 0,
                out: PathBuf::from("runs/paper-scale"),
                phantom: PhantomConfig { n_studies: 38, grid_size: 128, spacing: [2.5; 3], ..Default::default() },
                preprocess: PreprocessConfig::default(),
                registration: RegistrationConfig::default(),
                model: ModelConfig::new(Variant::Longitudinal),
                train: TrainConfig::default(),
            },
        }
    }

    /// Builds the configuration from a preset, an optional TOML overlay and
    /// command-line overrides, then derives the stage seeds and validates.
    ///
    /// Precedence: command line, then file, then preset defaults. The preset
    /// itself comes from the command line, then the file's `preset` key.
    pub fn resolve(file: Option<&Path>, preset: Option<Preset>, seed: Option<u64>, out: Option<&Path>) -> CliResult<Self> {
        let overlay = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
            }
            None => toml::Table::new(),
        };
        let preset = match (preset, overlay.get("preset")) {
            (Some(p), _) => p,
            (None, Some(v)) => v
                .clone()
                .try_into::<Preset>()
                .map_err(|e| CliError::Config(format!("preset: {e}")))?,
            (None, None) => Preset::Desk,
        };
        let mut merged = toml::Table::try_from(Self::preset(preset)).expect("preset serializes to TOML");
        merge(&mut merged, overlay);
        merged.insert("preset".into(), toml::Value::String(preset.as_str().into()));
        let mut cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        if let Some(o) = out {
            cfg.out = o.to_path_buf();
        }
        cfg.derive_seeds();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Overwrites the per-stage seeds with values derived from `seed`.
    pub fn derive_seeds(&mut self) {
        self.phantom.seed = stage_seed(self.seed, "phantom");
        self.train.seed = stage_seed(self.seed, "train");
    }

    /// Seed for the network's weight initialisation.
    pub fn init_seed(&self) -> u64 {
        stage_seed(self.seed, "init")
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.seed > i64::MAX as u64 {
            return Err(CliError::Config(format!("seed {} exceeds {}", self.seed, i64::MAX)));
        }
        self.phantom.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.preprocess.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.registration.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        for v in [Variant::Static, Variant::Longitudinal] {
            self.model_for(v).validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// The configured layout with the input side set for `variant`.
    pub fn model_for(&self, variant: Variant) -> ModelConfig {
        ModelConfig { variant, in_channels: variant.in_channels(), ..self.model.clone() }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes to TOML")
    }
}

/// First eight bytes of `sha256("<global>:<stage>")`, little endian, with
/// the top bit cleared so that the value fits a TOML integer.
pub fn stage_seed(global: u64, stage: &str) -> u64 {
    let digest = Sha256::digest(format!("{global}:{stage}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes")) >> 1
}

/// Recursively overlays `top` onto `base`; tables merge, everything else
/// replaces.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, text: &str) -> PathBuf {
        let p = dir.join("cfg.toml");
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn presets_validate() {
        for p in [Preset::Desk, Preset::PaperScale] {
            let mut cfg = PipelineConfig::preset(p);
            cfg.derive_seeds();
            cfg.validate().unwrap();
        }
    }

    #[test]
    fn desk_split_has_required_sizes() {
        let cfg = PipelineConfig::preset(Preset::Desk);
        let [tr, va, te] = cfg.phantom.split_sizes();
        assert!(tr >= 8 && va >= 2 && te >= 4, "{tr}/{va}/{te}");
        assert_eq!(cfg.phantom.grid_size, 64);
        assert_eq!(cfg.preprocess.target_size, 64);
    }

    #[test]
    fn overlay_keeps_unspecified_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "[train]\nmax_epochs = 3\nearly_stop_patience = 2\n[preprocess]\nclip_hi = 500.0\n");
        let cfg = PipelineConfig::resolve(Some(&p), None, None, None).unwrap();
        assert_eq!(cfg.train.max_epochs, 3);
        assert_eq!(cfg.preprocess.clip_hi, 500.0);
        assert_eq!(cfg.preprocess.target_size, 64);
        assert_eq!(cfg.train.max_items_per_epoch, Some(128));
        assert_eq!(cfg.preset, Preset::Desk);
    }

    #[test]
    fn precedence_cli_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "preset = \"paper-scale\"\nseed = 5\nout = \"a\"\n");
        let cfg = PipelineConfig::resolve(Some(&p), None, None, None).unwrap();
        assert_eq!((cfg.preset, cfg.seed, cfg.out.clone()), (Preset::PaperScale, 5, PathBuf::from("a")));
        let cfg = PipelineConfig::resolve(Some(&p), Some(Preset::Desk), Some(9), Some(Path::new("b"))).unwrap();
        assert_eq!((cfg.preset, cfg.seed, cfg.out), (Preset::Desk, 9, PathBuf::from("b")));
        assert_eq!(cfg.preprocess.target_size, 64);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        for text in [
            "[preprocess]\nclip_lo = 700.0\n",
            "[train]\nbatch_size = 3\n",
            "[phantom]\nunknown_key = 1\n",
            "preset = \"huge\"\n",
            "not toml at all [",
        ] {
            let p = write(dir.path(), text);
            let err = PipelineConfig::resolve(Some(&p), None, None, None).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}: {err}");
        }
        let err = PipelineConfig::resolve(Some(Path::new("/nonexistent/cfg.toml")), None, None, None).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn stage_seeds_follow_global_seed() {
        let a = PipelineConfig::resolve(None, None, Some(1), None).unwrap();
        let b = PipelineConfig::resolve(None, None, Some(1), None).unwrap();
        let c = PipelineConfig::resolve(None, None, Some(2), None).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.phantom.seed, c.phantom.seed);
        assert_ne!(a.train.seed, c.train.seed);
        assert_ne!(a.phantom.seed, a.train.seed);
    }

    #[test]
    fn toml_roundtrip() {
        let cfg = PipelineConfig::resolve(None, None, Some(3), None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), &cfg.to_toml());
        assert_eq!(PipelineConfig::resolve(Some(&p), None, None, None).unwrap(), cfg);
    }

    #[test]
    fn model_for_sets_inputs() {
        let cfg = PipelineConfig::preset(Preset::Desk);
        assert_eq!(cfg.model_for(Variant::Static).in_channels, 1);
        assert_eq!(cfg.model_for(Variant::Longitudinal).in_channels, 2);
    }
}
