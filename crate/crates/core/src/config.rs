//! Model and training configuration in a flat `key = value` text format.
//!
//! Keys are dotted (`model.resolution`, `loss.gamma`, ...). Lists are comma
//! separated, the mix selector is a bitstring. Lines starting with `#` are
//! comments.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::masks::{BlurParams, BrushParams};
use crate::styles::MixSelector;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub resolution: usize,
    /// Generator widths from 4×4 up to `resolution`.
    pub channels: Vec<usize>,
    pub style_dim: usize,
    pub mapping_layers: usize,
    pub mapping_lr_mul: f64,
    /// Discriminator widths from 4×4 up to `resolution`.
    pub disc_channels: Vec<usize>,
    /// Minibatch-stddev group size; 0 disables the feature.
    pub mbstd_group: usize,
    pub conditional_disc: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            channels: vec![512, 512, 256, 128, 64],
            style_dim: 512,
            mapping_layers: 8,
            mapping_lr_mul: 0.01,
            disc_channels: vec![512, 512, 256, 128, 64],
            mbstd_group: 4,
            conditional_disc: false,
        }
    }
}

impl ModelConfig {
    /// Number of style layers: two per synthesis resolution above 4×4 plus
    /// the 4×4 convolution and its output layer.
    pub fn num_layers(&self) -> usize {
        2 * log2(self.resolution) - 2
    }

    pub fn levels(&self) -> usize {
        log2(self.resolution) - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 8 || !self.resolution.is_power_of_two() {
            return Err(Error::Config(format!(
                "model.resolution must be a power of two >= 8, got {}",
                self.resolution
            )));
        }
        let levels = self.levels();
        for (key, list) in [("model.channels", &self.channels), ("model.disc_channels", &self.disc_channels)] {
            if list.len() != levels {
                return Err(Error::Config(format!("{key} needs {levels} entries for resolution {}", self.resolution)));
            }
            if list.contains(&0) {
                return Err(Error::Config(format!("{key} entries must be positive")));
            }
        }
        if self.style_dim == 0 || self.mapping_layers == 0 {
            return Err(Error::Config("model.style_dim and model.mapping_layers must be positive".into()));
        }
        if !(self.mapping_lr_mul > 0.0) {
            return Err(Error::Config("model.mapping_lr_mul must be positive".into()));
        }
        Ok(())
    }
}

/// Sizes of the frozen embedding networks and their pretraining budgets.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenConfig {
    pub analysis_resolution: usize,
    /// Widths from `analysis_resolution` down to 4×4.
    pub channels: Vec<usize>,
    pub identity_dim: usize,
    pub encoder_pretrain_steps: usize,
    pub identity_pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
}

impl Default for FrozenConfig {
    fn default() -> Self {
        Self {
            analysis_resolution: 32,
            channels: vec![32, 64, 64, 64],
            identity_dim: 128,
            encoder_pretrain_steps: 300,
            identity_pretrain_steps: 300,
            pretrain_batch: 8,
            pretrain_lr: 0.002,
        }
    }
}

impl FrozenConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let r = self.analysis_resolution;
        if r < 4 || !r.is_power_of_two() || r > model.resolution {
            return Err(Error::Config(format!(
                "frozen.analysis_resolution must be a power of two in [4, {}], got {r}",
                model.resolution
            )));
        }
        if self.channels.len() != log2(r) - 1 || self.channels.contains(&0) {
            return Err(Error::Config(format!("frozen.channels needs {} positive entries", log2(r) - 1)));
        }
        if self.identity_dim == 0 || self.pretrain_batch == 0 || !(self.pretrain_lr > 0.0) {
            return Err(Error::Config("frozen.identity_dim, pretrain_batch and pretrain_lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_id: f64,
    pub lambda_lpips: f64,
    pub lambda_attr: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_id: 0.1, lambda_lpips: 0.5, lambda_attr: 0.1, gamma: 10.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("loss.lambda_id", self.lambda_id),
            ("loss.lambda_lpips", self.lambda_lpips),
            ("loss.lambda_attr", self.lambda_attr),
            ("loss.gamma", self.gamma),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{k} must be a finite non-negative number")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Image directory; synthetic faces are generated when empty.
    pub path: String,
    pub synthetic_images: usize,
    pub synthetic_identities: usize,
    pub holdout_images: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { path: String::new(), synthetic_images: 2000, synthetic_identities: 200, holdout_images: 500, seed: 7 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub tau: f64,
    pub mix_prob: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub w_avg_decay: f64,
    pub r1_interval: u64,
    pub checkpoint_every: u64,
    pub phi: MixSelector,
    pub loss: LossWeights,
    pub brush: BrushParams,
    pub blur: BlurParams,
}

impl TrainConfig {
    pub fn for_model(model: &ModelConfig) -> Self {
        Self {
            seed: 0,
            batch_size: 8,
            total_steps: 800_000,
            tau: 0.1,
            mix_prob: 0.5,
            lr: 0.002,
            beta1: 0.5,
            beta2: 0.99,
            w_avg_decay: 0.995,
            r1_interval: 16,
            checkpoint_every: 10_000,
            phi: MixSelector::default_for(model.num_layers()),
            loss: LossWeights::default(),
            brush: BrushParams::scaled_to(model.resolution),
            blur: BlurParams::for_resolution(model.resolution),
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let unit = |k: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{k} must lie in [0, 1], got {v}")))
            }
        };
        unit("train.tau", self.tau)?;
        unit("train.mix_prob", self.mix_prob)?;
        unit("train.w_avg_decay", self.w_avg_decay)?;
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("optimizer betas must lie in [0, 1)".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        if self.batch_size == 0 || self.r1_interval == 0 {
            return Err(Error::Config("train.batch_size and r1.interval must be positive".into()));
        }
        if self.phi.len() != model.num_layers() {
            return Err(Error::Config(format!(
                "style.phi has {} entries, the model has {} style layers",
                self.phi.len(),
                model.num_layers()
            )));
        }
        if self.phi.count_ones() == 0 {
            return Err(Error::Config("style.phi must select at least one exemplar layer".into()));
        }
        self.loss.validate()?;
        self.brush.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.blur.kernel.is_multiple_of(2) || !(self.blur.sigma > 0.0) {
            return Err(Error::Config("mask.blur_kernel must be odd and mask.blur_sigma positive".into()));
        }
        Ok(())
    }
}

/// Complete run configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub frozen: FrozenConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for Config {
    fn default() -> Self {
        let model = ModelConfig::default();
        let train = TrainConfig::for_model(&model);
        Self { model, frozen: FrozenConfig::default(), train, data: DataConfig::default() }
    }
}

fn log2(n: usize) -> usize {
    n.max(1).trailing_zeros() as usize
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|s| parse(key, s)).collect()
}

fn join(list: &[usize]) -> String {
    list.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl Config {
    /// Narrow desk-scale preset at the given resolution.
    pub fn toy(resolution: usize) -> Self {
        let levels = log2(resolution).saturating_sub(1);
        let widths = |top: usize| -> Vec<usize> { (0..levels).map(|k| (top >> k.saturating_sub(1)).max(16)).collect() };
        let model = ModelConfig {
            resolution,
            channels: widths(64),
            style_dim: 64,
            mapping_layers: 4,
            mapping_lr_mul: 0.01,
            disc_channels: widths(64),
            mbstd_group: 4,
            conditional_disc: false,
        };
        let mut train = TrainConfig::for_model(&model);
        train.batch_size = 4;
        train.total_steps = 5000;
        train.checkpoint_every = 1000;
        let analysis = resolution.min(32);
        let frozen = FrozenConfig {
            analysis_resolution: analysis,
            channels: vec![32; log2(analysis) - 1],
            identity_dim: 128,
            encoder_pretrain_steps: 300,
            identity_pretrain_steps: 300,
            pretrain_batch: 8,
            pretrain_lr: 0.002,
        };
        Self { model, frozen, train, data: DataConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.frozen.validate(&self.model)?;
        self.train.validate(&self.model)
    }

    /// Sets one dotted key. Unknown keys are a configuration error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let (m, f, t, d) = (&mut self.model, &mut self.frozen, &mut self.train, &mut self.data);
        match key.trim() {
            "model.resolution" => {
                m.resolution = parse(key, v)?;
                t.brush = BrushParams::scaled_to(m.resolution);
                t.blur = BlurParams::for_resolution(m.resolution);
                if t.phi.len() != m.num_layers() {
                    t.phi = MixSelector::default_for(m.num_layers());
                }
            }
            "model.channels" => m.channels = parse_list(key, v)?,
            "model.style_dim" => m.style_dim = parse(key, v)?,
            "model.mapping_layers" => m.mapping_layers = parse(key, v)?,
            "model.mapping_lr_mul" => m.mapping_lr_mul = parse(key, v)?,
            "model.disc_channels" => m.disc_channels = parse_list(key, v)?,
            "model.mbstd_group" => m.mbstd_group = parse(key, v)?,
            "model.conditional_disc" => m.conditional_disc = parse(key, v)?,
            "frozen.analysis_resolution" => f.analysis_resolution = parse(key, v)?,
            "frozen.channels" => f.channels = parse_list(key, v)?,
            "frozen.identity_dim" => f.identity_dim = parse(key, v)?,
            "frozen.encoder_pretrain_steps" => f.encoder_pretrain_steps = parse(key, v)?,
            "frozen.identity_pretrain_steps" => f.identity_pretrain_steps = parse(key, v)?,
            "frozen.pretrain_batch" => f.pretrain_batch = parse(key, v)?,
            "frozen.pretrain_lr" => f.pretrain_lr = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.total_steps" => t.total_steps = parse(key, v)?,
            "train.tau" => t.tau = parse(key, v)?,
            "train.mix_prob" => t.mix_prob = parse(key, v)?,
            "train.lr" => t.lr = parse(key, v)?,
            "train.beta1" => t.beta1 = parse(key, v)?,
            "train.beta2" => t.beta2 = parse(key, v)?,
            "train.w_avg_decay" => t.w_avg_decay = parse(key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = parse(key, v)?,
            "r1.interval" => t.r1_interval = parse(key, v)?,
            "style.phi" => t.phi = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "loss.lambda_id" => t.loss.lambda_id = parse(key, v)?,
            "loss.lambda_lpips" => t.loss.lambda_lpips = parse(key, v)?,
            "loss.lambda_attr" => t.loss.lambda_attr = parse(key, v)?,
            "loss.gamma" => t.loss.gamma = parse(key, v)?,
            "mask.max_vertex" => t.brush.max_vertex = parse(key, v)?,
            "mask.max_length" => t.brush.max_length = parse(key, v)?,
            "mask.max_brush_width" => t.brush.max_brush_width = parse(key, v)?,
            "mask.max_angle" => t.brush.max_angle = parse(key, v)?,
            "mask.blur_kernel" => t.blur.kernel = parse(key, v)?,
            "mask.blur_sigma" => t.blur.sigma = parse(key, v)?,
            "data.path" => d.path = v.to_string(),
            "data.synthetic_images" => d.synthetic_images = parse(key, v)?,
            "data.synthetic_identities" => d.synthetic_identities = parse(key, v)?,
            "data.holdout_images" => d.holdout_images = parse(key, v)?,
            "data.seed" => d.seed = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {:?} is not key=value", o.as_ref())))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Parses a document on top of the defaults. `model.resolution` is applied
    /// first so that resolution-derived defaults do not clobber explicit keys.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) =
                line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = Config::default();
        entries.sort_by_key(|(k, _)| k != "model.resolution");
        for (k, v) in &entries {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.as_ref().display())))?;
        Self::parse_str(&text)
    }

    pub fn to_text(&self) -> String {
        let (m, f, t, d) = (&self.model, &self.frozen, &self.train, &self.data);
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("model.resolution", m.resolution.to_string());
        kv("model.channels", join(&m.channels));
        kv("model.style_dim", m.style_dim.to_string());
        kv("model.mapping_layers", m.mapping_layers.to_string());
        kv("model.mapping_lr_mul", m.mapping_lr_mul.to_string());
        kv("model.disc_channels", join(&m.disc_channels));
        kv("model.mbstd_group", m.mbstd_group.to_string());
        kv("model.conditional_disc", m.conditional_disc.to_string());
        kv("frozen.analysis_resolution", f.analysis_resolution.to_string());
        kv("frozen.channels", join(&f.channels));
        kv("frozen.identity_dim", f.identity_dim.to_string());
        kv("frozen.encoder_pretrain_steps", f.encoder_pretrain_steps.to_string());
        kv("frozen.identity_pretrain_steps", f.identity_pretrain_steps.to_string());
        kv("frozen.pretrain_batch", f.pretrain_batch.to_string());
        kv("frozen.pretrain_lr", f.pretrain_lr.to_string());
        kv("train.seed", t.seed.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.total_steps", t.total_steps.to_string());
        kv("train.tau", t.tau.to_string());
        kv("train.mix_prob", t.mix_prob.to_string());
        kv("train.lr", t.lr.to_string());
        kv("train.beta1", t.beta1.to_string());
        kv("train.beta2", t.beta2.to_string());
        kv("train.w_avg_decay", t.w_avg_decay.to_string());
        kv("train.checkpoint_every", t.checkpoint_every.to_string());
        kv("r1.interval", t.r1_interval.to_string());
        kv("style.phi", t.phi.to_string());
        kv("loss.lambda_id", t.loss.lambda_id.to_string());
        kv("loss.lambda_lpips", t.loss.lambda_lpips.to_string());
        kv("loss.lambda_attr", t.loss.lambda_attr.to_string());
        kv("loss.gamma", t.loss.gamma.to_string());
        kv("mask.max_vertex", t.brush.max_vertex.to_string());
        kv("mask.max_length", t.brush.max_length.to_string());
        kv("mask.max_brush_width", t.brush.max_brush_width.to_string());
        kv("mask.max_angle", t.brush.max_angle.to_string());
        kv("mask.blur_kernel", t.blur.kernel.to_string());
        kv("mask.blur_sigma", t.blur.sigma.to_string());
        kv("data.path", d.path.clone());
        kv("data.synthetic_images", d.synthetic_images.to_string());
        kv("data.synthetic_identities", d.synthetic_identities.to_string());
        kv("data.holdout_images", d.holdout_images.to_string());
        kv("data.seed", d.seed.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_reference_setup() {
        let c = Config::default();
        assert_eq!(c.model.num_layers(), 10);
        assert_eq!((c.train.tau, c.train.mix_prob, c.train.lr), (0.1, 0.5, 0.002));
        assert_eq!((c.train.beta1, c.train.beta2), (0.5, 0.99));
        assert_eq!(c.train.loss, LossWeights { lambda_id: 0.1, lambda_lpips: 0.5, lambda_attr: 0.1, gamma: 10.0 });
        assert_eq!(c.train.phi.to_string(), "0000111111");
        assert_eq!(c.train.total_steps, 800_000);
        c.validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        for cfg in [Config::default(), Config::toy(32), Config::toy(64)] {
            cfg.validate().unwrap();
            let back = Config::parse_str(&cfg.to_text()).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn resolution_key_is_applied_first() {
        let text = "mask.blur_kernel = 5\nmodel.channels = 8,8,8\nmodel.disc_channels = 8,8,8\nmodel.resolution = 16\n\
                    frozen.analysis_resolution = 16\nfrozen.channels = 8,8,8\n";
        let c = Config::parse_str(text).unwrap();
        assert_eq!(c.train.blur.kernel, 5);
        assert_eq!(c.train.phi.len(), 6);
    }

    #[test]
    fn errors_are_config_errors() {
        assert!(matches!(Config::parse_str("nonsense"), Err(Error::Config(_))));
        assert!(matches!(Config::parse_str("train.bogus = 1"), Err(Error::Config(_))));
        assert!(matches!(Config::parse_str("train.tau = 1.5"), Err(Error::Config(_))));
        assert!(matches!(Config::parse_str("style.phi = 0000"), Err(Error::Config(_))));
        assert!(matches!(Config::parse_str("style.phi = 0000000000"), Err(Error::Config(_))));
        let mut c = Config::default();
        assert!(c.apply_overrides(&["train.seed"]).is_err());
        c.apply_overrides(&["train.seed=9", "loss.gamma = 2"]).unwrap();
        assert_eq!((c.train.seed, c.train.loss.gamma), (9, 2.0));
    }
}
