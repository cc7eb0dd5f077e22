//! Flat dotted-key configuration (`cfa.rho = 10`).
//!
//! Files are TOML; nested tables and dotted keys both flatten to the same
//! key space. Precedence is command-line overrides > file > defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::backbone::{Backbone, Preprocess, TinyBackbone};
use crate::descriptor::DescriptorConfig;
use crate::error::{Error, Result};
use crate::losses::CfaConfig;
use crate::objective::AblationFlags;
use crate::resnet::{default_cache_dir, ResNetBackbone, WIDE_RESNET50_2_URL};
use crate::trainer::TrainConfig;

/// Environment variable for the default output root.
pub const OUTPUT_DIR_ENV: &str = "RDCFA_OUTPUT_DIR";

pub const DEFAULT_TEXTURE_CLASSES: [&str; 5] = ["carpet", "grid", "leather", "tile", "wood"];

/// Every key with a one-line description. Defaults come from [`Config::default`].
pub const KEY_DOCS: &[(&str, &str)] = &[
    ("backbone.name", "feature extractor: `tiny` (seeded random) or `wide_resnet50_2`"),
    ("backbone.tiny_channels", "channel counts of the three tiny-backbone stages"),
    ("backbone.seed", "weight seed of the tiny backbone"),
    ("backbone.weights_url", "download location of pretrained weights"),
    ("backbone.cache_dir", "weight cache directory (empty: $RDCFA_CACHE_DIR or ~/.cache/rdcfa)"),
    ("image.size", "square input resolution in pixels"),
    ("image.mean", "per-channel normalization mean"),
    ("image.std", "per-channel normalization std"),
    ("descriptor.output_dim", "descriptor width D' (`auto`: same as backbone D)"),
    ("descriptor.coordinate_channels", "append normalized (x, y) to descriptor input"),
    ("discriminator.latent_dim", "latent dimensionality m"),
    ("cfa.k", "attraction neighbors K"),
    ("cfa.j", "hard negatives J"),
    ("cfa.r2", "squared hypersphere radius (`auto`: 1e-5 * D')"),
    ("cfa.alpha", "repulsion margin (`auto`: 0.1 * r2)"),
    ("cfa.rho", "minimum squared distance between class means"),
    ("cfa.alpha_kl", "weight of the KL term"),
    ("cfa.alpha_dr", "weight of the class-mean repulsion term"),
    ("train.epochs", "training epochs"),
    ("train.batch_size", "samples per batch N"),
    ("train.learning_rate", "AdamW learning rate"),
    ("train.weight_decay", "AdamW decoupled weight decay"),
    ("train.seed", "base seed; run i uses seed + i"),
    ("train.runs", "repeated runs averaged by evaluate/ablate"),
    ("train.augment_bank", "store [phi; mu; Sigma] in the memory bank"),
    ("train.refresh_bank", "rebuild the memory bank after each epoch"),
    ("train.use_dissimilarity", "weight class-mean repulsion by the dissimilarity matrix"),
    ("train.val_fraction", "fraction of training images held out for loss monitoring"),
    ("score.sigma", "Gaussian smoothing std in pixels (0 disables)"),
    ("score.threshold", "raw-score threshold for mask PNGs (`none` disables)"),
    ("data.root", "dataset root directory"),
    ("data.texture_classes", "classes averaged as textures; others count as objects"),
    ("output.dir", "output root (default: $RDCFA_OUTPUT_DIR or ./runs)"),
];

#[derive(Debug, Clone, PartialEq)]
pub enum BackboneChoice {
    Tiny,
    WideResNet50,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub backbone: BackboneChoice,
    pub tiny_channels: [usize; 3],
    pub backbone_seed: u64,
    pub weights_url: String,
    pub cache_dir: Option<PathBuf>,
    pub preprocess: Preprocess,
    pub descriptor_output_dim: Option<usize>,
    pub coordinate_channels: bool,
    pub latent_dim: usize,
    pub k: usize,
    pub j: usize,
    pub r_squared: Option<f64>,
    pub alpha: Option<f64>,
    pub rho: f64,
    pub alpha_kl: f64,
    pub alpha_dr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub runs: usize,
    pub flags: AblationFlags,
    pub val_fraction: f64,
    pub sigma: f64,
    pub threshold: Option<f64>,
    pub data_root: Option<PathBuf>,
    pub texture_classes: Vec<String>,
    pub output_dir: PathBuf,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            backbone: BackboneChoice::WideResNet50,
            tiny_channels: [8, 16, 32],
            backbone_seed: 0,
            weights_url: WIDE_RESNET50_2_URL.to_string(),
            cache_dir: None,
            preprocess: Preprocess::default(),
            descriptor_output_dim: None,
            coordinate_channels: true,
            latent_dim: 128,
            k: 3,
            j: 3,
            r_squared: None,
            alpha: None,
            rho: 10.0,
            alpha_kl: 0.5,
            alpha_dr: 0.1,
            epochs: 30,
            batch_size: 8,
            learning_rate: 1e-3,
            weight_decay: 5e-4,
            seed: 0,
            runs: 5,
            flags: AblationFlags::ALL,
            val_fraction: 0.1,
            sigma: 4.0,
            threshold: None,
            data_root: None,
            texture_classes: DEFAULT_TEXTURE_CLASSES.iter().map(|s| s.to_string()).collect(),
            output_dir: std::env::var_os(OUTPUT_DIR_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("runs")),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("`{key}` expects a boolean, got `{value}`"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_auto<T: std::str::FromStr>(key: &str, value: &str, word: &str) -> Result<Option<T>> {
    if value.trim() == word {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn fixed3(key: &str, v: Vec<f64>) -> Result<[f64; 3]> {
    v.try_into()
        .map_err(|_| Error::Config(format!("`{key}` expects three values")))
}

impl Config {
    /// Small tiny-backbone configuration used for tests and synthetic runs.
    pub fn desk_scale() -> Self {
        Self {
            backbone: BackboneChoice::Tiny,
            preprocess: Preprocess {
                size: 64,
                ..Preprocess::default()
            },
            descriptor_output_dim: Some(8),
            latent_dim: 4,
            epochs: 20,
            runs: 3,
            ..Self::default()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "backbone.name" => {
                self.backbone = match value.trim() {
                    "tiny" => BackboneChoice::Tiny,
                    "wide_resnet50_2" => BackboneChoice::WideResNet50,
                    other => return Err(Error::Config(format!("unknown backbone `{other}`"))),
                }
            }
            "backbone.tiny_channels" => {
                let v: Vec<usize> = parse_list(key, value)?;
                self.tiny_channels = v
                    .try_into()
                    .map_err(|_| Error::Config(format!("`{key}` expects three values")))?;
            }
            "backbone.seed" => self.backbone_seed = parse(key, value)?,
            "backbone.weights_url" => self.weights_url = value.trim().to_string(),
            "backbone.cache_dir" => {
                self.cache_dir = Some(value.trim()).filter(|v| !v.is_empty()).map(PathBuf::from)
            }
            "image.size" => self.preprocess.size = parse(key, value)?,
            "image.mean" => self.preprocess.mean = fixed3(key, parse_list(key, value)?)?,
            "image.std" => self.preprocess.std = fixed3(key, parse_list(key, value)?)?,
            "descriptor.output_dim" => self.descriptor_output_dim = parse_auto(key, value, "auto")?,
            "descriptor.coordinate_channels" => self.coordinate_channels = parse_bool(key, value)?,
            "discriminator.latent_dim" => self.latent_dim = parse(key, value)?,
            "cfa.k" => self.k = parse(key, value)?,
            "cfa.j" => self.j = parse(key, value)?,
            "cfa.r2" => self.r_squared = parse_auto(key, value, "auto")?,
            "cfa.alpha" => self.alpha = parse_auto(key, value, "auto")?,
            "cfa.rho" => self.rho = parse(key, value)?,
            "cfa.alpha_kl" => self.alpha_kl = parse(key, value)?,
            "cfa.alpha_dr" => self.alpha_dr = parse(key, value)?,
            "train.epochs" => self.epochs = parse(key, value)?,
            "train.batch_size" => self.batch_size = parse(key, value)?,
            "train.learning_rate" => self.learning_rate = parse(key, value)?,
            "train.weight_decay" => self.weight_decay = parse(key, value)?,
            "train.seed" => self.seed = parse(key, value)?,
            "train.runs" => self.runs = parse(key, value)?,
            "train.augment_bank" => self.flags.augment_bank = parse_bool(key, value)?,
            "train.refresh_bank" => self.flags.refresh_bank = parse_bool(key, value)?,
            "train.use_dissimilarity" => self.flags.use_dissimilarity = parse_bool(key, value)?,
            "train.val_fraction" => self.val_fraction = parse(key, value)?,
            "score.sigma" => self.sigma = parse(key, value)?,
            "score.threshold" => self.threshold = parse_auto(key, value, "none")?,
            "data.root" => {
                self.data_root = Some(value.trim()).filter(|v| !v.is_empty()).map(PathBuf::from)
            }
            "data.texture_classes" => {
                self.texture_classes = value
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect()
            }
            "output.dir" => self.output_dir = PathBuf::from(value.trim()),
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn to_flat(&self) -> BTreeMap<String, String> {
        let opt = |v: Option<String>, word: &str| v.unwrap_or_else(|| word.to_string());
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let entries = [
            (
                "backbone.name",
                match self.backbone {
                    BackboneChoice::Tiny => "tiny".to_string(),
                    BackboneChoice::WideResNet50 => "wide_resnet50_2".to_string(),
                },
            ),
            ("backbone.tiny_channels", join(&self.tiny_channels)),
            ("backbone.seed", self.backbone_seed.to_string()),
            ("backbone.weights_url", self.weights_url.clone()),
            ("backbone.cache_dir", path(&self.cache_dir)),
            ("image.size", self.preprocess.size.to_string()),
            ("image.mean", join(&self.preprocess.mean)),
            ("image.std", join(&self.preprocess.std)),
            ("descriptor.output_dim", opt(self.descriptor_output_dim.map(|v| v.to_string()), "auto")),
            ("descriptor.coordinate_channels", self.coordinate_channels.to_string()),
            ("discriminator.latent_dim", self.latent_dim.to_string()),
            ("cfa.k", self.k.to_string()),
            ("cfa.j", self.j.to_string()),
            ("cfa.r2", opt(self.r_squared.map(|v| v.to_string()), "auto")),
            ("cfa.alpha", opt(self.alpha.map(|v| v.to_string()), "auto")),
            ("cfa.rho", self.rho.to_string()),
            ("cfa.alpha_kl", self.alpha_kl.to_string()),
            ("cfa.alpha_dr", self.alpha_dr.to_string()),
            ("train.epochs", self.epochs.to_string()),
            ("train.batch_size", self.batch_size.to_string()),
            ("train.learning_rate", self.learning_rate.to_string()),
            ("train.weight_decay", self.weight_decay.to_string()),
            ("train.seed", self.seed.to_string()),
            ("train.runs", self.runs.to_string()),
            ("train.augment_bank", self.flags.augment_bank.to_string()),
            ("train.refresh_bank", self.flags.refresh_bank.to_string()),
            ("train.use_dissimilarity", self.flags.use_dissimilarity.to_string()),
            ("train.val_fraction", self.val_fraction.to_string()),
            ("score.sigma", self.sigma.to_string()),
            ("score.threshold", opt(self.threshold.map(|v| v.to_string()), "none")),
            ("data.root", path(&self.data_root)),
            ("data.texture_classes", self.texture_classes.join(",")),
            ("output.dir", self.output_dir.display().to_string()),
        ];
        entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn from_flat(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(map)?;
        Ok(cfg)
    }

    pub fn apply(&mut self, map: &BTreeMap<String, String>) -> Result<()> {
        map.iter().try_for_each(|(k, v)| self.set(k, v))
    }

    /// Apply `key=value` override strings.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{}` is not key=value", o.as_ref())))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Read a TOML config file, or the `config` section of a JSON run manifest.
    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let flat = if path.extension().is_some_and(|e| e == "json") {
            let value: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let section = value.get("config").unwrap_or(&value);
            serde_json::from_value::<BTreeMap<String, String>>(section.clone())
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            let table: toml::Table =
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let mut flat = BTreeMap::new();
            flatten_toml("", &toml::Value::Table(table), &mut flat)?;
            flat
        };
        self.apply(&flat)
    }

    pub fn help_text() -> String {
        let defaults = Self::default().to_flat();
        let width = KEY_DOCS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::from("Config keys (file: TOML with dotted keys; override: --set key=value):\n");
        for (key, doc) in KEY_DOCS {
            let default = defaults.get(*key).map(String::as_str).unwrap_or("");
            out.push_str(&format!("  {key:<width$}  {doc} [default: {default}]\n"));
        }
        out
    }

    pub fn build_backbone(&self) -> Result<Box<dyn Backbone>> {
        Ok(match self.backbone {
            BackboneChoice::Tiny => Box::new(TinyBackbone::new(self.tiny_channels, self.backbone_seed)),
            BackboneChoice::WideResNet50 => {
                let dir = self.cache_dir.clone().unwrap_or_else(default_cache_dir);
                Box::new(ResNetBackbone::wide_resnet50_2(&dir, &self.weights_url)?)
            }
        })
    }

    pub fn cfa_config(&self, output_dim: usize) -> CfaConfig {
        let defaults = CfaConfig::with_defaults(output_dim);
        let r_squared = self.r_squared.unwrap_or(defaults.r_squared);
        CfaConfig {
            k: self.k,
            j: self.j,
            r_squared,
            alpha: self.alpha.unwrap_or(0.1 * r_squared),
            alpha_kl: self.alpha_kl,
            alpha_dr: self.alpha_dr,
            rho: self.rho,
        }
    }

    /// Resolve `auto` values against the backbone feature width `D`.
    pub fn train_config(&self, feature_dim: usize) -> Result<TrainConfig> {
        let output_dim = self.descriptor_output_dim.unwrap_or(feature_dim);
        let cfg = TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            seed: self.seed,
            flags: self.flags,
            cfa: self.cfa_config(output_dim),
            descriptor: DescriptorConfig {
                input_dim: feature_dim,
                output_dim,
                use_coordinate_channels: self.coordinate_channels,
            },
            latent_dim: self.latent_dim,
            val_fraction: self.val_fraction,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn flatten_toml(prefix: &str, value: &toml::Value, out: &mut BTreeMap<String, String>) -> Result<()> {
    let key = |k: &str| {
        if prefix.is_empty() {
            k.to_string()
        } else {
            format!("{prefix}.{k}")
        }
    };
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                flatten_toml(&key(k), v, out)?;
            }
        }
        toml::Value::String(s) => {
            out.insert(prefix.to_string(), s.clone());
        }
        toml::Value::Integer(i) => {
            out.insert(prefix.to_string(), i.to_string());
        }
        toml::Value::Float(f) => {
            out.insert(prefix.to_string(), f.to_string());
        }
        toml::Value::Boolean(b) => {
            out.insert(prefix.to_string(), b.to_string());
        }
        toml::Value::Array(items) => {
            let parts = items
                .iter()
                .map(|v| match v {
                    toml::Value::String(s) => Ok(s.clone()),
                    toml::Value::Integer(i) => Ok(i.to_string()),
                    toml::Value::Float(f) => Ok(f.to_string()),
                    toml::Value::Boolean(b) => Ok(b.to_string()),
                    _ => Err(Error::Config(format!("nested array under `{prefix}`"))),
                })
                .collect::<Result<Vec<_>>>()?;
            out.insert(prefix.to_string(), parts.join(","));
        }
        toml::Value::Datetime(d) => {
            out.insert(prefix.to_string(), d.to_string());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_is_documented_and_round_trips() {
        let flat = Config::default().to_flat();
        let documented: Vec<&str> = KEY_DOCS.iter().map(|(k, _)| *k).collect();
        let keys: Vec<&str> = flat.keys().map(String::as_str).collect();
        let mut sorted = documented.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, keys);

        let cfg = Config::desk_scale();
        assert_eq!(Config::from_flat(&cfg.to_flat()).unwrap(), cfg);
    }

    #[test]
    fn help_lists_keys_with_defaults() {
        let help = Config::help_text();
        assert!(help.contains("cfa.rho"));
        assert!(help.contains("[default: 10]"));
        assert!(help.contains("[default: 0.5]"));
        assert!(help.contains("train.use_dissimilarity"));
    }

    #[test]
    fn toml_file_and_override_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(
            &path,
            "cfa.rho = 20\nbackbone.tiny_channels = [4, 8, 16]\n[train]\nepochs = 3\nrefresh_bank = false\n",
        )
        .unwrap();
        let mut cfg = Config::desk_scale();
        cfg.load_file(&path).unwrap();
        cfg.apply_overrides(&["cfa.rho=5"]).unwrap();
        assert_eq!(cfg.rho, 5.0);
        assert_eq!(cfg.epochs, 3);
        assert!(!cfg.flags.refresh_bank);
        assert_eq!(cfg.tiny_channels, [4, 8, 16]);
    }

    #[test]
    fn bad_values_are_config_errors() {
        let mut cfg = Config::default();
        assert!(matches!(cfg.set("cfa.rho", "ten"), Err(Error::Config(_))));
        assert!(matches!(cfg.set("nope", "1"), Err(Error::Config(_))));
        assert!(matches!(cfg.apply_overrides(&["cfa.rho"]), Err(Error::Config(_))));
    }

    #[test]
    fn auto_values_resolve_against_feature_width() {
        let cfg = Config::default();
        let tc = cfg.train_config(1792).unwrap();
        assert_eq!(tc.descriptor.output_dim, 1792);
        assert!((tc.cfa.r_squared - 1792e-5).abs() < 1e-12);
        assert!((tc.cfa.alpha - 0.1 * 1792e-5).abs() < 1e-12);
        assert_eq!((tc.cfa.rho, tc.cfa.alpha_kl, tc.cfa.alpha_dr), (10.0, 0.5, 0.1));
    }
}
