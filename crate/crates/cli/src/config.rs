//! Flag and config-file resolution.
//!
//! A config file is one flat JSON object whose keys are the long flag names
//! with `-` replaced by `_`. Precedence, highest first: flag, `GQA_DATA_DIR`
//! (for `data_dir` only), config file, built-in default.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use gqa_core::data::{load_named, synthetic_blobs, Difficulty, SyntheticSpec};
use gqa_core::train::Phase;
use gqa_core::{Dataset, Precision, TrainConfig, Variant, ViTConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub const DATA_DIR_ENV: &str = "GQA_DATA_DIR";

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
pub struct ModelArgs {
    /// Size preset: vit-micro or vit-mini.
    #[arg(long)]
    pub preset: Option<String>,
    /// mha, mqa, gqa, kdgqa, dgqa-diff, dgqa-ema or pgqa.
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Key/value heads G (default: H for mha, 1 for mqa, H/2 otherwise).
    #[arg(long)]
    pub kv_heads: Option<usize>,
    /// Query heads H; head width is d_model / H.
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub mlp_ratio: Option<usize>,
    #[arg(long)]
    pub num_classes: Option<usize>,
    /// Steps between reallocations for dgqa variants.
    #[arg(long)]
    pub window: Option<u64>,
    /// EMA weight on the current norms for dgqa-ema.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Apply pgqa noise in evaluation passes too.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub noise_at_inference: Option<bool>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
pub struct DataArgs {
    /// synthetic, mnist, cifar10 or cifar100.
    #[arg(long)]
    pub dataset: Option<String>,
    /// Directory holding the dataset files (overrides GQA_DATA_DIR).
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Synthetic images per class.
    #[arg(long)]
    pub n_per_class: Option<usize>,
    /// Synthetic difficulty: simple or complex.
    #[arg(long)]
    pub difficulty: Option<String>,
    /// Seed for the synthetic training split; the test split uses seed + 1.
    #[arg(long)]
    pub data_seed: Option<u64>,
    /// Use only the first N examples.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// f32 or f64.
    #[arg(long)]
    pub precision: Option<String>,
    /// Random flips and padded crops.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub augment: Option<bool>,
    #[arg(long)]
    pub augment_pad: Option<usize>,
}

/// Shared seed and config-file flags.
#[derive(Args, Clone, Debug, Default)]
pub struct BaseArgs {
    /// Flat JSON config; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// The parsed config file.
pub struct FileConfig(Map<String, Value>);

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(FileConfig(Map::new()));
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let value: Value = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        let Value::Object(map) = value else {
            bail!("config {} must be a JSON object", path.display());
        };
        let known = known_keys();
        let unknown: Vec<&String> = map.keys().filter(|k| !known.contains(k.as_str())).collect();
        if !unknown.is_empty() {
            bail!("config {} has unknown keys {unknown:?}", path.display());
        }
        Ok(FileConfig(map))
    }

    /// Fills every unset field of `flags` from the file.
    pub fn overlay<T: Serialize + DeserializeOwned>(&self, flags: &T) -> Result<T> {
        let mut v = serde_json::to_value(flags)?;
        if let Value::Object(fields) = &mut v {
            for (k, slot) in fields.iter_mut() {
                if slot.is_null() {
                    if let Some(from_file) = self.0.get(k) {
                        *slot = from_file.clone();
                    }
                }
            }
        }
        serde_json::from_value(v).context("config value has the wrong type")
    }

    pub fn seed(&self, flag: Option<u64>) -> Result<u64> {
        self.seed_or(flag, 0)
    }

    pub fn seed_or(&self, flag: Option<u64>, default: u64) -> Result<u64> {
        match (flag, self.0.get("seed")) {
            (Some(s), _) => Ok(s),
            (None, Some(v)) => v
                .as_u64()
                .context("config key seed must be a nonnegative integer"),
            (None, None) => Ok(default),
        }
    }
}

fn known_keys() -> BTreeSet<String> {
    let mut keys = BTreeSet::from(["seed".to_string()]);
    for v in [
        serde_json::to_value(ModelArgs::default()),
        serde_json::to_value(DataArgs::default()),
        serde_json::to_value(TrainArgs::default()),
    ] {
        if let Ok(Value::Object(m)) = v {
            keys.extend(m.keys().cloned());
        }
    }
    keys
}

fn parse_name<T: DeserializeOwned>(what: &str, s: &str) -> Result<T> {
    serde_json::from_value(Value::String(s.to_string()))
        .with_context(|| format!("unknown {what} '{s}'"))
}

impl ModelArgs {
    /// Model config from a preset plus overrides. `data_shape` is
    /// `(image_size, channels, num_classes)` of a loaded real dataset.
    pub fn build(&self, seed: u64, data_shape: Option<(usize, usize, usize)>) -> Result<ViTConfig> {
        let variant = self.variant.unwrap_or(Variant::Gqa);
        let preset = self.preset.as_deref().unwrap_or("vit-micro");
        let mut cfg = ViTConfig::preset(preset, variant, 1)?;
        let heads = self.heads.unwrap_or(cfg.heads());
        let d_model = self.d_model.unwrap_or(cfg.d_model);
        if heads == 0 || !d_model.is_multiple_of(heads) {
            bail!("invalid configuration: d_model {d_model} is not a multiple of heads {heads}");
        }
        cfg.d_model = d_model;
        cfg.attention.heads = heads;
        cfg.attention.head_dim = d_model / heads;
        cfg.attention.kv_heads = self.kv_heads.unwrap_or(match variant {
            Variant::Mha => heads,
            Variant::Mqa => 1,
            _ => (heads / 2).max(1),
        });
        if let Some((size, channels, classes)) = data_shape {
            for (name, flag, actual) in [
                ("image_size", self.image_size, size),
                ("channels", self.channels, channels),
                ("num_classes", self.num_classes, classes),
            ] {
                if flag.is_some_and(|f| f != actual) {
                    bail!(
                        "invalid configuration: {name} {} does not match the dataset's {actual}",
                        flag.unwrap()
                    );
                }
            }
            cfg.image_size = size;
            cfg.channels = channels;
            cfg.num_classes = classes;
        }
        cfg.image_size = self.image_size.unwrap_or(cfg.image_size);
        cfg.channels = self.channels.unwrap_or(cfg.channels);
        cfg.num_classes = self.num_classes.unwrap_or(cfg.num_classes);
        cfg.depth = self.depth.unwrap_or(cfg.depth);
        cfg.patch_size = self.patch_size.unwrap_or(cfg.patch_size);
        cfg.mlp_ratio = self.mlp_ratio.unwrap_or(cfg.mlp_ratio);
        cfg.attention.window = self.window.unwrap_or(cfg.attention.window);
        cfg.attention.alpha = self.alpha.unwrap_or(cfg.attention.alpha);
        cfg.attention.noise_at_inference = self.noise_at_inference.unwrap_or(true);
        cfg.attention.seed = seed;
        cfg.validate()?;
        Ok(cfg)
    }
}

impl TrainArgs {
    pub fn build(&self, phase: Phase, seed: u64) -> Result<TrainConfig> {
        let base = match phase {
            Phase::Uptrain => TrainConfig::uptrain(),
            Phase::Finetune => TrainConfig::finetune(),
        };
        let precision: Precision = match &self.precision {
            Some(p) => parse_name("precision", p)?,
            None => base.precision,
        };
        let cfg = TrainConfig {
            lr: self.lr.unwrap_or(base.lr),
            weight_decay: self.weight_decay.unwrap_or(base.weight_decay),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            steps: self.steps.unwrap_or(base.steps),
            augment: self.augment.unwrap_or(base.augment),
            augment_pad: self.augment_pad.unwrap_or(base.augment_pad),
            precision,
            seed,
            ..base
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Where the examples come from, after defaults.
#[derive(Clone, Debug, Serialize)]
pub struct DataSpec {
    pub dataset: String,
    pub data_dir: Option<PathBuf>,
    pub n_per_class: usize,
    pub difficulty: Difficulty,
    pub data_seed: u64,
    pub limit: Option<usize>,
}

impl DataArgs {
    /// Applies the environment override and defaults.
    pub fn resolve(&self, flags: &DataArgs, seed: u64) -> Result<DataSpec> {
        let data_dir = flags
            .data_dir
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .or_else(|| self.data_dir.clone());
        let difficulty = match &self.difficulty {
            Some(d) => d.parse()?,
            None => Difficulty::Simple,
        };
        let dataset = self.dataset.clone().unwrap_or_else(|| "synthetic".into());
        if !["synthetic", "mnist", "cifar10", "cifar100"].contains(&dataset.as_str()) {
            bail!("unknown dataset '{dataset}' (expected synthetic, mnist, cifar10 or cifar100)");
        }
        Ok(DataSpec {
            dataset,
            data_dir,
            n_per_class: self.n_per_class.unwrap_or(50),
            difficulty,
            data_seed: self.data_seed.unwrap_or(seed),
            limit: self.limit,
        })
    }
}

impl DataSpec {
    pub fn is_synthetic(&self) -> bool {
        self.dataset == "synthetic"
    }

    /// Loads a real dataset split; `None` for synthetic data, which is
    /// generated to fit the model instead.
    pub fn load_real(&self, train: bool) -> Result<Option<Dataset>> {
        if self.is_synthetic() {
            return Ok(None);
        }
        let dir = self.data_dir.as_deref().with_context(|| {
            format!(
                "dataset {} needs --data-dir or {DATA_DIR_ENV}",
                self.dataset
            )
        })?;
        let data = load_named(dir, &self.dataset, train)?;
        Ok(Some(self.truncate(data)?))
    }

    pub fn synthetic(&self, cfg: &ViTConfig, train: bool) -> Result<Dataset> {
        let data = synthetic_blobs(&SyntheticSpec {
            num_classes: cfg.num_classes,
            n_per_class: self.n_per_class,
            size: cfg.image_size,
            channels: cfg.channels,
            seed: if train {
                self.data_seed
            } else {
                self.data_seed.wrapping_add(1)
            },
            difficulty: self.difficulty,
        })?;
        self.truncate(data)
    }

    /// The split matching `cfg`, whichever source it comes from.
    pub fn load_for(&self, cfg: &ViTConfig, train: bool) -> Result<Dataset> {
        match self.load_real(train)? {
            Some(data) => {
                let shape = (data.image_size(), data.channels(), data.num_classes);
                if shape != (cfg.image_size, cfg.channels, cfg.num_classes) {
                    bail!(
                        "dataset {} has (image_size, channels, classes) {shape:?}, model expects {:?}",
                        self.dataset,
                        (cfg.image_size, cfg.channels, cfg.num_classes)
                    );
                }
                Ok(data)
            }
            None => self.synthetic(cfg, train),
        }
    }

    fn truncate(&self, data: Dataset) -> Result<Dataset> {
        Ok(match self.limit {
            Some(n) => data.take(n)?,
            None => data,
        })
    }
}

/// Model, data and training settings resolved together for `train`,
/// `sweep-kv` and `bench`.
pub struct Resolved {
    pub seed: u64,
    pub model: ViTConfig,
    pub data: DataSpec,
    pub train: TrainConfig,
    /// Training split, already loaded.
    pub train_data: Dataset,
}

pub fn resolve_all(
    base: &BaseArgs,
    model: &ModelArgs,
    data: &DataArgs,
    train: &TrainArgs,
) -> Result<Resolved> {
    let file = FileConfig::load(base.config.as_deref())?;
    let seed = file.seed(base.seed)?;
    let model_args = file.overlay(model)?;
    let data_spec = file.overlay(data)?.resolve(data, seed)?;
    let train_cfg = file.overlay(train)?.build(Phase::Uptrain, seed)?;
    let real = data_spec.load_real(true)?;
    let shape = real
        .as_ref()
        .map(|d| (d.image_size(), d.channels(), d.num_classes));
    let model_cfg = model_args.build(seed, shape)?;
    let train_data = match real {
        Some(d) => d,
        None => data_spec.synthetic(&model_cfg, true)?,
    };
    Ok(Resolved {
        seed,
        model: model_cfg,
        data: data_spec,
        train: train_cfg,
        train_data,
    })
}
