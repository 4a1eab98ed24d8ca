//! Flat `key=value` run configuration. Files and command-line flags set the
//! same keys; later settings win. Unknown keys are rejected.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use gcapsnet::capsule_ops::CapsLayerSpec;
use gcapsnet::network::{ArchConfig, MaskSource, TrainConfig};
use gcapsnet::routing::RoutingConfig;

/// Overrides `output_dir` when set.
pub const OUTPUT_DIR_ENV: &str = "GCAPS_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub routing: Vec<RoutingConfig>,
    pub iterations: usize,

    pub dataset: String,
    pub data_dir: PathBuf,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub num_classes: usize,
    /// 0 keeps every example.
    pub train_limit: usize,
    pub test_limit: usize,

    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub primary_types: usize,
    pub primary_dim: usize,
    pub primary_kernel: usize,
    pub primary_stride: usize,
    pub digit_dim: usize,
    pub decoder_hidden1: usize,
    pub decoder_hidden2: usize,

    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_shift: usize,
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub record_wall_time: bool,

    pub output_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub split: String,

    pub trials: usize,
    pub caps_lower: usize,
    pub caps_upper: usize,
    pub caps_dim_lower: usize,
    pub caps_dim_upper: usize,
    pub caps_types: usize,

    pub image_index: usize,
    pub reconstruction_mask: MaskSource,

    /// Keys set explicitly by a file or flag.
    explicit: BTreeSet<String>,
}

pub const KEYS: &[&str] = &[
    "routing",
    "iterations",
    "dataset",
    "data_dir",
    "train_images",
    "train_labels",
    "test_images",
    "test_labels",
    "num_classes",
    "train_limit",
    "test_limit",
    "stem_channels",
    "stem_kernel",
    "primary_types",
    "primary_dim",
    "primary_kernel",
    "primary_stride",
    "digit_dim",
    "decoder_hidden1",
    "decoder_hidden2",
    "epochs",
    "batch_size",
    "learning_rate",
    "lr_decay",
    "beta1",
    "beta2",
    "epsilon",
    "max_shift",
    "seed",
    "seeds",
    "record_wall_time",
    "output_dir",
    "checkpoint",
    "split",
    "trials",
    "caps_lower",
    "caps_upper",
    "caps_dim_lower",
    "caps_dim_upper",
    "caps_types",
    "image_index",
    "reconstruction_mask",
];

impl Default for RunConfig {
    fn default() -> Self {
        let arch = ArchConfig::desk();
        let train = TrainConfig::default();
        let caps = CapsLayerSpec::reference();
        RunConfig {
            routing: vec![RoutingConfig::alg1()],
            iterations: RoutingConfig::alg1().iterations,
            dataset: "mnist".into(),
            data_dir: PathBuf::from("data/mnist-desk"),
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            num_classes: arch.num_classes,
            train_limit: 0,
            test_limit: 0,
            stem_channels: arch.stem_channels,
            stem_kernel: arch.stem_kernel,
            primary_types: arch.primary_types,
            primary_dim: arch.primary_dim,
            primary_kernel: arch.primary_kernel,
            primary_stride: arch.primary_stride,
            digit_dim: arch.digit_dim,
            decoder_hidden1: arch.decoder_hidden.0,
            decoder_hidden2: arch.decoder_hidden.1,
            epochs: train.epochs,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            lr_decay: train.lr_decay,
            beta1: train.beta1,
            beta2: train.beta2,
            epsilon: train.epsilon,
            max_shift: train.max_shift,
            seed: train.seed,
            seeds: vec![1, 2, 3],
            record_wall_time: false,
            output_dir: PathBuf::from("runs"),
            checkpoint: None,
            split: "test".into(),
            trials: 100,
            caps_lower: caps.num_lower,
            caps_upper: caps.num_upper,
            caps_dim_lower: caps.dim_lower,
            caps_dim_upper: caps.dim_upper,
            caps_types: caps.num_types,
            image_index: 0,
            reconstruction_mask: MaskSource::Predicted,
            explicit: BTreeSet::new(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value
        .trim()
        .parse()
        .map_err(|_| ConfigError(format!("invalid value `{value}` for `{key}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError> {
    let items: Vec<T> = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect::<Result<_, _>>()?;
    if items.is_empty() {
        return Err(ConfigError(format!("`{key}` needs at least one value")));
    }
    Ok(items)
}

fn optional_path(value: &str) -> Option<PathBuf> {
    let value = value.trim();
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "routing" => {
                self.routing = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse().map_err(|e: String| ConfigError(format!("`routing`: {e}"))))
                    .collect::<Result<_, _>>()?;
                if self.routing.is_empty() {
                    return Err(ConfigError("`routing` needs at least one value".into()));
                }
            }
            "iterations" => self.iterations = parse(key, v)?,
            "dataset" => self.dataset = v.to_string(),
            "data_dir" => self.data_dir = PathBuf::from(v),
            "train_images" => self.train_images = optional_path(v),
            "train_labels" => self.train_labels = optional_path(v),
            "test_images" => self.test_images = optional_path(v),
            "test_labels" => self.test_labels = optional_path(v),
            "num_classes" => self.num_classes = parse(key, v)?,
            "train_limit" => self.train_limit = parse(key, v)?,
            "test_limit" => self.test_limit = parse(key, v)?,
            "stem_channels" => self.stem_channels = parse(key, v)?,
            "stem_kernel" => self.stem_kernel = parse(key, v)?,
            "primary_types" => self.primary_types = parse(key, v)?,
            "primary_dim" => self.primary_dim = parse(key, v)?,
            "primary_kernel" => self.primary_kernel = parse(key, v)?,
            "primary_stride" => self.primary_stride = parse(key, v)?,
            "digit_dim" => self.digit_dim = parse(key, v)?,
            "decoder_hidden1" => self.decoder_hidden1 = parse(key, v)?,
            "decoder_hidden2" => self.decoder_hidden2 = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "lr_decay" => self.lr_decay = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "epsilon" => self.epsilon = parse(key, v)?,
            "max_shift" => self.max_shift = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "seeds" => self.seeds = parse_list(key, v)?,
            "record_wall_time" => self.record_wall_time = parse(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "checkpoint" => self.checkpoint = optional_path(v),
            "split" => {
                if v != "train" && v != "test" {
                    return Err(ConfigError(format!("`split` must be train or test, got `{v}`")));
                }
                self.split = v.to_string();
            }
            "trials" => self.trials = parse(key, v)?,
            "caps_lower" => self.caps_lower = parse(key, v)?,
            "caps_upper" => self.caps_upper = parse(key, v)?,
            "caps_dim_lower" => self.caps_dim_lower = parse(key, v)?,
            "caps_dim_upper" => self.caps_dim_upper = parse(key, v)?,
            "caps_types" => self.caps_types = parse(key, v)?,
            "image_index" => self.image_index = parse(key, v)?,
            "reconstruction_mask" => {
                self.reconstruction_mask = v.parse().map_err(|e: String| ConfigError(format!("`{key}`: {e}")))?
            }
            _ => return Err(ConfigError(format!("unknown config key `{key}`"))),
        }
        self.explicit.insert(key.to_string());
        Ok(())
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), ConfigError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError(format!("{origin}:{}: expected key=value, got `{line}`", n + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| ConfigError(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Expands defaults that depend on other keys. The output directory
    /// environment variable wins over every other setting.
    pub fn resolve(&mut self, env_output_dir: Option<String>) {
        if let Some(dir) = env_output_dir.filter(|d| !d.is_empty()) {
            self.output_dir = PathBuf::from(dir);
        }
        if self.dataset != "synthetic" {
            let file = |name: &str| Some(self.data_dir.join(name));
            self.train_images = self.train_images.take().or_else(|| file("train-images-idx3-ubyte"));
            self.train_labels = self.train_labels.take().or_else(|| file("train-labels-idx1-ubyte"));
            self.test_images = self.test_images.take().or_else(|| file("t10k-images-idx3-ubyte"));
            self.test_labels = self.test_labels.take().or_else(|| file("t10k-labels-idx1-ubyte"));
        }
    }

    /// Every key with its current value, in a form `apply_text` accepts.
    pub fn to_text(&self) -> String {
        let routing: Vec<String> = self.routing.iter().map(ToString::to_string).collect();
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let values: Vec<(&str, String)> = vec![
            ("routing", routing.join(",")),
            ("iterations", self.iterations.to_string()),
            ("dataset", self.dataset.clone()),
            ("data_dir", self.data_dir.display().to_string()),
            ("train_images", show_path(&self.train_images)),
            ("train_labels", show_path(&self.train_labels)),
            ("test_images", show_path(&self.test_images)),
            ("test_labels", show_path(&self.test_labels)),
            ("num_classes", self.num_classes.to_string()),
            ("train_limit", self.train_limit.to_string()),
            ("test_limit", self.test_limit.to_string()),
            ("stem_channels", self.stem_channels.to_string()),
            ("stem_kernel", self.stem_kernel.to_string()),
            ("primary_types", self.primary_types.to_string()),
            ("primary_dim", self.primary_dim.to_string()),
            ("primary_kernel", self.primary_kernel.to_string()),
            ("primary_stride", self.primary_stride.to_string()),
            ("digit_dim", self.digit_dim.to_string()),
            ("decoder_hidden1", self.decoder_hidden1.to_string()),
            ("decoder_hidden2", self.decoder_hidden2.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("lr_decay", self.lr_decay.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("epsilon", self.epsilon.to_string()),
            ("max_shift", self.max_shift.to_string()),
            ("seed", self.seed.to_string()),
            ("seeds", seeds.join(",")),
            ("record_wall_time", self.record_wall_time.to_string()),
            ("output_dir", self.output_dir.display().to_string()),
            ("checkpoint", show_path(&self.checkpoint)),
            ("split", self.split.clone()),
            ("trials", self.trials.to_string()),
            ("caps_lower", self.caps_lower.to_string()),
            ("caps_upper", self.caps_upper.to_string()),
            ("caps_dim_lower", self.caps_dim_lower.to_string()),
            ("caps_dim_upper", self.caps_dim_upper.to_string()),
            ("caps_types", self.caps_types.to_string()),
            ("image_index", self.image_index.to_string()),
            ("reconstruction_mask", self.reconstruction_mask.to_string()),
        ];
        debug_assert_eq!(values.len(), KEYS.len());
        let mut out = String::from("# resolved gcaps run configuration\n");
        for (k, v) in values {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    /// The single routing variant of a train run.
    pub fn single_routing(&self) -> Result<RoutingConfig, ConfigError> {
        match self.routing.as_slice() {
            [one] => Ok(one.with_iterations(self.iterations)),
            _ => Err(ConfigError(format!(
                "this command takes one routing config, got {}",
                self.routing.len()
            ))),
        }
    }

    pub fn routings(&self) -> Vec<RoutingConfig> {
        self.routing.iter().map(|r| r.with_iterations(self.iterations)).collect()
    }

    pub fn arch(&self, input: (usize, usize, usize)) -> ArchConfig {
        ArchConfig {
            input,
            stem_channels: self.stem_channels,
            stem_kernel: self.stem_kernel,
            primary_types: self.primary_types,
            primary_dim: self.primary_dim,
            primary_kernel: self.primary_kernel,
            primary_stride: self.primary_stride,
            num_classes: self.num_classes,
            digit_dim: self.digit_dim,
            decoder_hidden: (self.decoder_hidden1, self.decoder_hidden2),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            lr_decay: self.lr_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            max_shift: self.max_shift,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_is_named() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply_text("# comment\nroutting=alg1\n", "run.cfg").unwrap_err();
        assert!(err.0.contains("`routting`"), "{err}");
        assert!(err.0.contains("run.cfg:2"), "{err}");
    }

    #[test]
    fn resolved_text_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("routing=alg2,oc\nseeds=4,5\nlearning_rate=0.0003\ntrain_limit=100", "t")
            .unwrap();
        cfg.resolve(None);
        let text = cfg.to_text();
        let mut again = RunConfig::default();
        again.apply_text(&text, "echo").unwrap();
        again.resolve(None);
        assert_eq!(again.to_text(), text);
        assert_eq!(again.routings(), vec![RoutingConfig::alg2(), RoutingConfig::alg4()]);
        assert_eq!(text.lines().filter(|l| l.contains('=')).count(), KEYS.len());
    }

    #[test]
    fn env_overrides_output_dir() {
        let mut cfg = RunConfig::default();
        cfg.set("output_dir", "a").unwrap();
        cfg.resolve(Some("b".into()));
        assert_eq!(cfg.output_dir, PathBuf::from("b"));
        assert_eq!(cfg.train_images, Some(PathBuf::from("data/mnist-desk/train-images-idx3-ubyte")));
    }

    #[test]
    fn bad_values_are_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("epochs", "five").is_err());
        assert!(cfg.set("routing", "alg9").is_err());
        assert!(cfg.set("split", "valid").is_err());
        assert!(cfg.set("seeds", "").is_err());
        assert!(cfg.single_routing().is_ok());
        cfg.set("routing", "alg1,alg3").unwrap();
        assert!(cfg.single_routing().is_err());
    }
}
