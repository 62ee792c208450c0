//! Experiment configuration (TOML).
//!
//! A file may name a `preset`; the preset's table is loaded first and the
//! file's own keys are merged over it. Unknown keys are rejected and every
//! error carries the dotted path of the offending field.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_imagefolder, synth_glyphs, ClassDataset, ImagePreset};
use crate::error::{config_err, Error, Result};
use crate::model::ArchitectureSpec;
use crate::zapping::{ZapMode, ZapPolicy};

/// Overrides `data.root` when set.
pub const DATA_ROOT_ENV: &str = "ZAPLAB_DATA_ROOT";

pub const PRESETS: &[(&str, &str)] = &[
    ("synth-desk", include_str!("presets/synth-desk.toml")),
    ("omniglot-table4", include_str!("presets/omniglot-table4.toml")),
    ("omniglot-table5", include_str!("presets/omniglot-table5.toml")),
    ("mini-imagenet-table4", include_str!("presets/mini-imagenet-table4.toml")),
    ("mini-imagenet-table5", include_str!("presets/mini-imagenet-table5.toml")),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Synth,
    Omniglot,
    MiniImagenet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 70,
            per_class: 30,
            image_size: 28,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dataset: DatasetKind,
    /// Class-per-directory image tree; unused for `synth`.
    pub root: Option<PathBuf>,
    pub synth: SynthConfig,
    pub train_per_class: usize,
    pub pretrain_classes: usize,
    pub transfer_classes: usize,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dataset: DatasetKind::Synth,
            root: None,
            synth: SynthConfig::default(),
            train_per_class: 15,
            pretrain_classes: 50,
            transfer_classes: 20,
            split_seed: 0,
        }
    }
}

impl DataConfig {
    /// `$ZAPLAB_DATA_ROOT` if set and non-empty, else `root`.
    pub fn resolved_root(&self) -> Option<PathBuf> {
        match std::env::var_os(DATA_ROOT_ENV) {
            Some(v) if !v.is_empty() => Some(PathBuf::from(v)),
            _ => self.root.clone(),
        }
    }

    pub fn image_preset(&self) -> Option<ImagePreset> {
        match self.dataset {
            DatasetKind::Synth => None,
            DatasetKind::Omniglot => Some(ImagePreset::Gray28),
            DatasetKind::MiniImagenet => Some(ImagePreset::Rgb84),
        }
    }

    /// Generates or reads the dataset and applies the train/validation boundary.
    pub fn load(&self) -> Result<ClassDataset> {
        let ds = match self.image_preset() {
            None => synth_glyphs(
                self.synth.classes,
                self.synth.per_class,
                self.synth.image_size,
                self.synth.seed,
            )?,
            Some(preset) => {
                let root = self.resolved_root().ok_or_else(|| {
                    Error::Dataset(format!("no dataset root: set data.root or ${DATA_ROOT_ENV}"))
                })?;
                if !root.is_dir() {
                    return Err(Error::Dataset(format!("dataset root {} does not exist", root.display())));
                }
                load_imagefolder(&root, preset)?
            }
        };
        ds.with_train_per_class(self.train_per_class)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    /// Defaults to 3 for 28x28-style inputs and 4 for 84x84 colour.
    pub blocks: Option<usize>,
    /// Defaults to pooling after every block except on 3-block nets.
    pub final_pool: Option<bool>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 256,
            blocks: None,
            final_pool: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainMethod {
    Iid,
    Asb,
    MetaAsb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub method: PretrainMethod,
    pub zap: ZapPolicy,
    /// Clear Adam moments of zapped head rows.
    pub reset_adam_on_zap: bool,
    /// Inner-loop SGD learning rate (ASB methods).
    pub inner_lr: f64,
    /// Adam learning rate: the outer update for ASB methods, every step for i.i.d.
    pub outer_lr: f64,
    pub inner_steps: usize,
    pub remember: usize,
    pub outer_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// ASB: evaluate every this many outer steps. i.i.d.: every this many
    /// batches, or only at epoch ends when 0.
    pub eval_every: usize,
    /// Also evaluate right after every zap event.
    pub eval_after_zap: bool,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            method: PretrainMethod::Asb,
            zap: ZapPolicy::OFF,
            reset_adam_on_zap: true,
            inner_lr: 0.01,
            outer_lr: 0.001,
            inner_steps: 20,
            remember: 64,
            outer_steps: 9000,
            epochs: 30,
            batch_size: 256,
            eval_every: 0,
            eval_after_zap: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    Sequential,
    Iid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    pub mode: TransferMode,
    /// Sequential mode only: update the head alone.
    pub freeze: bool,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Sequential: evaluate after every this many classes (0 = only at the end).
    pub eval_every_classes: usize,
    /// i.i.d.: evaluate every this many batches (0 = once per epoch).
    pub eval_every_batches: usize,
    pub train_per_class: Option<usize>,
    pub test_per_class: Option<usize>,
    pub seed: u64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            mode: TransferMode::Sequential,
            freeze: true,
            lr: 0.01,
            epochs: 5,
            batch_size: 64,
            eval_every_classes: 1,
            eval_every_batches: 0,
            train_per_class: None,
            test_per_class: None,
            seed: 0,
        }
    }
}

/// Grid and seeds for `sweep`. Empty learning-rate lists mean "the value in
/// the main config".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub inner_lrs: Vec<f64>,
    pub outer_lrs: Vec<f64>,
    pub transfer_lrs: Vec<f64>,
    pub pretrain_seeds: Vec<u64>,
    pub transfer_seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            inner_lrs: Vec::new(),
            outer_lrs: Vec::new(),
            transfer_lrs: Vec::new(),
            pretrain_seeds: vec![0],
            transfer_seeds: vec![0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    /// Wall-clock readings make metrics streams non-reproducible, so they are opt-in.
    #[serde(default)]
    pub record_wall_clock: bool,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub transfer: TransferConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

pub fn preset_source(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

impl ExperimentConfig {
    pub fn from_toml_str(src: &str) -> Result<Self> {
        let table: toml::Table = src.parse().map_err(|e: toml::de::Error| config_err("<toml>", e.message()))?;
        let mut merged = match table.get("preset") {
            None => toml::Table::new(),
            Some(toml::Value::String(name)) => {
                let base = preset_source(name).ok_or_else(|| {
                    let known: Vec<_> = PRESETS.iter().map(|(n, _)| *n).collect();
                    config_err("preset", format!("unknown preset `{name}` (known: {})", known.join(", ")))
                })?;
                base.parse().expect("built-in presets parse")
            }
            Some(_) => return Err(config_err("preset", "must be a string")),
        };
        merge(&mut merged, table);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(toml::Value::Table(merged)).map_err(|e| {
            let path = e.path().to_string();
            config_err(path, e.into_inner().message())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path)?;
        Self::from_toml_str(&src)
    }

    pub fn preset(name: &str) -> Result<Self> {
        Self::from_toml_str(&format!("preset = \"{name}\"\n"))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the resolved config's canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Network shape for a head of `num_classes` on images of `image_shape`.
    pub fn architecture(&self, image_shape: [usize; 3], num_classes: usize) -> ArchitectureSpec {
        let [c, h, w] = image_shape;
        let blocks = self.model.blocks.unwrap_or(if c == 3 { 4 } else { 3 });
        ArchitectureSpec {
            in_channels: c,
            height: h,
            width: w,
            num_blocks: blocks,
            channels: self.model.channels,
            final_pool: self.model.final_pool.unwrap_or(blocks == 4),
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.pretrain_classes == 0 {
            return Err(config_err("data.pretrain_classes", "must be at least 1"));
        }
        if d.transfer_classes == 0 {
            return Err(config_err("data.transfer_classes", "must be at least 1"));
        }
        if d.train_per_class == 0 {
            return Err(config_err("data.train_per_class", "must be at least 1"));
        }
        if d.dataset == DatasetKind::Synth {
            let s = &d.synth;
            if s.per_class <= d.train_per_class {
                return Err(config_err(
                    "data.synth.per_class",
                    "must exceed data.train_per_class so every class has validation examples",
                ));
            }
            if d.pretrain_classes + d.transfer_classes > s.classes {
                return Err(config_err("data.synth.classes", "fewer classes than the split needs"));
            }
            if s.image_size < 4 {
                return Err(config_err("data.synth.image_size", "must be at least 4"));
            }
        }
        if self.model.channels == 0 {
            return Err(config_err("model.channels", "must be positive"));
        }
        if let Some(b) = self.model.blocks {
            if !(3..=4).contains(&b) {
                return Err(config_err("model.blocks", "must be 3 or 4"));
            }
        }
        let p = &self.pretrain;
        for (field, lr) in [("pretrain.inner_lr", p.inner_lr), ("pretrain.outer_lr", p.outer_lr)] {
            if !lr.is_finite() || lr < 0.0 {
                return Err(config_err(field, "must be finite and non-negative"));
            }
        }
        match (p.method, p.zap.mode) {
            (PretrainMethod::Iid, ZapMode::PerEpisodeClass) => {
                return Err(config_err("pretrain.zap.mode", "per_episode_class needs an ASB method"));
            }
            (PretrainMethod::Asb | PretrainMethod::MetaAsb, ZapMode::IidCadence) => {
                return Err(config_err("pretrain.zap.mode", "iid_cadence needs method = \"iid\""));
            }
            _ => {}
        }
        if p.zap.mode == ZapMode::IidCadence {
            if p.zap.every_epochs == 0 {
                return Err(config_err("pretrain.zap.every_epochs", "must be at least 1"));
            }
            p.zap
                .classes
                .resolve(d.pretrain_classes)
                .map_err(|e| config_err("pretrain.zap.classes", e.to_string()))?;
        }
        if p.method == PretrainMethod::Iid {
            if p.batch_size == 0 {
                return Err(config_err("pretrain.batch_size", "must be at least 1"));
            }
        } else if p.remember == 0 {
            return Err(config_err("pretrain.remember", "must be at least 1"));
        }
        let t = &self.transfer;
        if !t.lr.is_finite() || t.lr < 0.0 {
            return Err(config_err("transfer.lr", "must be finite and non-negative"));
        }
        if t.batch_size == 0 {
            return Err(config_err("transfer.batch_size", "must be at least 1"));
        }
        for (field, cap) in [
            ("transfer.train_per_class", t.train_per_class),
            ("transfer.test_per_class", t.test_per_class),
        ] {
            if cap == Some(0) {
                return Err(config_err(field, "must be at least 1 when set"));
            }
        }
        if let Some(s) = &self.sweep {
            if s.pretrain_seeds.is_empty() {
                return Err(config_err("sweep.pretrain_seeds", "must not be empty"));
            }
            if s.transfer_seeds.is_empty() {
                return Err(config_err("sweep.transfer_seeds", "must not be empty"));
            }
            let lrs = s.inner_lrs.iter().chain(&s.outer_lrs).chain(&s.transfer_lrs);
            if lrs.clone().any(|lr| !lr.is_finite() || *lr < 0.0) {
                return Err(config_err("sweep", "learning rates must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zapping::ZapAmount;

    #[test]
    fn every_preset_parses() {
        for (name, _) in PRESETS {
            let cfg = ExperimentConfig::preset(name).unwrap();
            assert_eq!(cfg.preset.as_deref(), Some(*name));
        }
    }

    #[test]
    fn file_keys_override_preset() {
        let cfg = ExperimentConfig::from_toml_str(
            "preset = \"synth-desk\"\n[pretrain]\nouter_steps = 7\n[pretrain.zap]\nmode = \"off\"\n",
        )
        .unwrap();
        let base = ExperimentConfig::preset("synth-desk").unwrap();
        assert_eq!(cfg.pretrain.outer_steps, 7);
        assert_eq!(cfg.pretrain.zap.mode, ZapMode::Off);
        assert_eq!(cfg.pretrain.inner_steps, base.pretrain.inner_steps);
        assert_ne!(cfg.hash(), base.hash());
    }

    #[test]
    fn errors_name_the_field() {
        let err = ExperimentConfig::from_toml_str("[pretrain]\nmethod = \"sgd\"\n").unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "pretrain.method"), "{err}");
        let err = ExperimentConfig::from_toml_str("[transfer]\nlr_typo = 1.0\n").unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field.starts_with("transfer")), "{err}");
        let err = ExperimentConfig::from_toml_str("preset = \"nope\"\n").unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "preset"), "{err}");
        let err =
            ExperimentConfig::from_toml_str("[pretrain]\nmethod = \"iid\"\n[pretrain.zap]\nmode = \"per_episode_class\"\n")
                .unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "pretrain.zap.mode"), "{err}");
    }

    #[test]
    fn zap_amount_forms() {
        for (src, want) in [
            ("\"all\"", ZapAmount::ALL),
            ("5", ZapAmount::Count(5)),
            ("0.5", ZapAmount::Fraction(0.5)),
        ] {
            let cfg = ExperimentConfig::from_toml_str(&format!(
                "[pretrain]\nmethod = \"iid\"\n[pretrain.zap]\nmode = \"iid_cadence\"\nclasses = {src}\n"
            ))
            .unwrap();
            assert_eq!(cfg.pretrain.zap.classes, want);
        }
    }

    #[test]
    fn round_trip_through_toml() {
        let cfg = ExperimentConfig::preset("omniglot-table4").unwrap();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
    }

    #[test]
    fn architecture_defaults() {
        let cfg = ExperimentConfig::preset("mini-imagenet-table4").unwrap();
        let spec = cfg.architecture([3, 84, 84], 20);
        assert_eq!((spec.num_blocks, spec.final_pool), (4, true));
        let cfg = ExperimentConfig::preset("omniglot-table5").unwrap();
        let spec = cfg.architecture([1, 28, 28], 1000);
        assert_eq!((spec.num_blocks, spec.final_pool), (3, false));
    }
}
