//! Run configuration: flat `section.key = value` text.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are rejected.
//! Lists are comma separated, optionally bracketed: `model.msrc_kernels = [1,3,5]`.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Pixel size of one patch of the linear patch embedding.
    pub patch: usize,
    /// Number of encoder stages (CFM layers).
    pub stages: usize,
    pub window: usize,
    /// Channel width of stage 1; doubles at every later stage.
    pub channels: usize,
    pub text_width: usize,
    pub max_tokens: usize,
    pub positional_encoding: bool,
    /// Hidden width multiplier of the per-stage token MLP.
    pub mlp_ratio: usize,
    /// Standard deviation of the learnable key/value noise at initialisation.
    pub noise_std: f64,
    /// Kernel sizes of the visual-integration branch.
    pub vis_kernels: Vec<usize>,
    /// Maximum displacement of the correlation volume.
    pub displacement: usize,
    pub fusion_windows: Vec<usize>,
    /// Kernel sizes of the stacked multi-scale rotated convolution layers.
    pub msrc_kernels: Vec<usize>,
    pub msrc_width: usize,
    /// Number of rotatable kernels per bank.
    pub arc_kernels: usize,
    pub arc_kernel_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            patch: 4,
            stages: 4,
            window: 4,
            channels: 32,
            text_width: 32,
            max_tokens: 8,
            positional_encoding: true,
            mlp_ratio: 2,
            noise_std: 0.01,
            vis_kernels: vec![3, 5],
            displacement: 3,
            fusion_windows: vec![3, 5, 7],
            msrc_kernels: vec![1, 3, 5],
            msrc_width: 32,
            arc_kernels: 4,
            arc_kernel_size: 3,
        }
    }
}

impl ModelConfig {
    /// Channel width of stage `i` (1-based).
    pub fn stage_channels(&self, i: usize) -> usize {
        self.channels << (i - 1)
    }

    /// Spatial extent of stage `i` for an input of `image` pixels.
    pub fn stage_extent(&self, image: usize, i: usize) -> usize {
        let mut e = image / self.patch;
        for _ in 1..i {
            e = e.div_ceil(2);
        }
        e
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Epochs without validation-mIoU improvement before stopping; 0 disables.
    pub patience: usize,
    /// Stop once validation mIoU reaches this value; 0 disables.
    pub target_miou: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch: 8,
            epochs: 40,
            patience: 10,
            target_miou: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub image_size: usize,
    pub train_split: String,
    pub val_split: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            image_size: 48,
            train_split: "train".into(),
            val_split: "val".into(),
        }
    }
}

/// Module-ablation switches (each removes its parameters entirely).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Ablation {
    /// Replace correlation-aware fusion by `T_v + T_l`.
    pub no_fusion: bool,
    /// Plain windowed attention: no learnable noise, no key discriminator.
    pub no_noise: bool,
    /// Decoder without the multi-scale refinement convolution.
    pub no_msrc: bool,
    /// Feed zeros instead of text features (language-blind model).
    pub zero_text: bool,
}

/// Forcing switches used by the property suite.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Hooks {
    pub zero_fusion_path: bool,
    pub force_one_hot_coefficients: Option<usize>,
    pub force_unit_ca: bool,
    pub force_unit_discriminator: bool,
    pub zero_arc: bool,
    pub force_theta: Option<Vec<f64>>,
    pub force_lambda: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub ablation: Ablation,
    pub hooks: Hooks,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    let inner = value.trim().trim_start_matches('[').trim_end_matches(']');
    if inner.trim().is_empty() {
        return Ok(Vec::new());
    }
    inner.split(',').map(|s| parse(key, s.trim())).collect()
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    match value {
        "" | "none" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn parse_opt_list(key: &str, value: &str) -> Result<Option<Vec<f64>>> {
    match value {
        "" | "none" => Ok(None),
        v => parse_list(key, v).map(Some),
    }
}

fn list<T: ToString>(v: &[T]) -> String {
    let items: Vec<String> = v.iter().map(ToString::to_string).collect();
    format!("[{}]", items.join(","))
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".into(), ToString::to_string)
}

impl RunConfig {
    /// Full-scale optimiser settings reported for pretrained backbones
    /// (learning rate 3e-5); kept for reference, too slow for toy runs.
    pub fn pretrained_preset() -> Self {
        let mut cfg = RunConfig::default();
        cfg.train.lr = 3e-5;
        cfg
    }

    /// Narrow model and faster learning rate used for the 500/100 toy
    /// experiment so a full run fits a single CPU core in minutes.
    pub fn toy_experiment() -> Self {
        let mut cfg = RunConfig::default();
        cfg.model.channels = 16;
        cfg.model.text_width = 16;
        cfg.model.msrc_width = 16;
        cfg.train.lr = 1e-3;
        cfg.train.patience = 6;
        cfg
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let h = &mut self.hooks;
        match key {
            "model.patch" => m.patch = parse(key, value)?,
            "model.stages" => m.stages = parse(key, value)?,
            "model.window" => m.window = parse(key, value)?,
            "model.channels" => m.channels = parse(key, value)?,
            "model.text_width" => m.text_width = parse(key, value)?,
            "model.max_tokens" => m.max_tokens = parse(key, value)?,
            "model.positional_encoding" => m.positional_encoding = parse_bool(key, value)?,
            "model.mlp_ratio" => m.mlp_ratio = parse(key, value)?,
            "model.noise_std" => m.noise_std = parse(key, value)?,
            "model.vis_kernels" => m.vis_kernels = parse_list(key, value)?,
            "model.displacement" => m.displacement = parse(key, value)?,
            "model.fusion_windows" => m.fusion_windows = parse_list(key, value)?,
            "model.msrc_kernels" => m.msrc_kernels = parse_list(key, value)?,
            "model.msrc_width" => m.msrc_width = parse(key, value)?,
            "model.arc_kernels" => m.arc_kernels = parse(key, value)?,
            "model.arc_kernel_size" => m.arc_kernel_size = parse(key, value)?,
            "train.lr" => t.lr = parse(key, value)?,
            "train.weight_decay" => t.weight_decay = parse(key, value)?,
            "train.beta1" => t.beta1 = parse(key, value)?,
            "train.beta2" => t.beta2 = parse(key, value)?,
            "train.eps" => t.eps = parse(key, value)?,
            "train.batch" => t.batch = parse(key, value)?,
            "train.epochs" => t.epochs = parse(key, value)?,
            "train.patience" => t.patience = parse(key, value)?,
            "train.target_miou" => t.target_miou = parse(key, value)?,
            "train.seed" => t.seed = parse(key, value)?,
            "data.image_size" => self.data.image_size = parse(key, value)?,
            "data.train_split" => self.data.train_split = value.to_string(),
            "data.val_split" => self.data.val_split = value.to_string(),
            "ablation.no_fusion" => self.ablation.no_fusion = parse_bool(key, value)?,
            "ablation.no_noise" => self.ablation.no_noise = parse_bool(key, value)?,
            "ablation.no_msrc" => self.ablation.no_msrc = parse_bool(key, value)?,
            "ablation.zero_text" => self.ablation.zero_text = parse_bool(key, value)?,
            "hooks.zero_fusion_path" => h.zero_fusion_path = parse_bool(key, value)?,
            "hooks.force_one_hot_coefficients" => {
                h.force_one_hot_coefficients = parse_opt(key, value)?
            }
            "hooks.force_unit_ca" => h.force_unit_ca = parse_bool(key, value)?,
            "hooks.force_unit_discriminator" => h.force_unit_discriminator = parse_bool(key, value)?,
            "hooks.zero_arc" => h.zero_arc = parse_bool(key, value)?,
            "hooks.force_theta" => h.force_theta = parse_opt_list(key, value)?,
            "hooks.force_lambda" => h.force_lambda = parse_opt_list(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let bad = |msg: String| Err(Error::Config(msg));
        if m.stages < 2 {
            return bad(format!("model.stages must be >= 2, got {}", m.stages));
        }
        if m.patch == 0 || m.window == 0 || m.channels == 0 || m.text_width == 0 {
            return bad("model.patch, window, channels and text_width must be positive".into());
        }
        if m.max_tokens == 0 {
            return bad("model.max_tokens must be positive".into());
        }
        if m.vis_kernels.is_empty() || m.fusion_windows.is_empty() || m.msrc_kernels.is_empty() {
            return bad("kernel lists must be non-empty".into());
        }
        let all_odd = m
            .vis_kernels
            .iter()
            .chain(&m.fusion_windows)
            .chain(&m.msrc_kernels)
            .chain(std::iter::once(&m.arc_kernel_size))
            .all(|k| k % 2 == 1);
        if !all_odd {
            return bad("all kernel sizes must be odd".into());
        }
        if m.arc_kernels == 0 || m.msrc_width == 0 || m.mlp_ratio == 0 {
            return bad("model.arc_kernels, msrc_width and mlp_ratio must be positive".into());
        }
        if self.data.image_size % m.patch != 0 {
            return bad(format!(
                "data.image_size {} is not divisible by model.patch {}",
                self.data.image_size, m.patch
            ));
        }
        let t = &self.train;
        if t.batch == 0 || t.lr <= 0.0 || t.weight_decay < 0.0 {
            return bad("train.batch and train.lr must be positive, weight_decay >= 0".into());
        }
        if let Some(theta) = &self.hooks.force_theta {
            if theta.len() != m.arc_kernels {
                return bad("hooks.force_theta needs one angle per rotated kernel".into());
            }
        }
        if let Some(lambda) = &self.hooks.force_lambda {
            if lambda.len() != m.arc_kernels {
                return bad("hooks.force_lambda needs one weight per rotated kernel".into());
            }
        }
        if let Some(b) = self.hooks.force_one_hot_coefficients {
            if b >= m.fusion_windows.len() {
                return bad(format!("hooks.force_one_hot_coefficients {b} out of range"));
            }
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let h = &self.hooks;
        let a = &self.ablation;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("model.patch", m.patch.to_string());
        kv("model.stages", m.stages.to_string());
        kv("model.window", m.window.to_string());
        kv("model.channels", m.channels.to_string());
        kv("model.text_width", m.text_width.to_string());
        kv("model.max_tokens", m.max_tokens.to_string());
        kv("model.positional_encoding", m.positional_encoding.to_string());
        kv("model.mlp_ratio", m.mlp_ratio.to_string());
        kv("model.noise_std", m.noise_std.to_string());
        kv("model.vis_kernels", list(&m.vis_kernels));
        kv("model.displacement", m.displacement.to_string());
        kv("model.fusion_windows", list(&m.fusion_windows));
        kv("model.msrc_kernels", list(&m.msrc_kernels));
        kv("model.msrc_width", m.msrc_width.to_string());
        kv("model.arc_kernels", m.arc_kernels.to_string());
        kv("model.arc_kernel_size", m.arc_kernel_size.to_string());
        kv("train.lr", t.lr.to_string());
        kv("train.weight_decay", t.weight_decay.to_string());
        kv("train.beta1", t.beta1.to_string());
        kv("train.beta2", t.beta2.to_string());
        kv("train.eps", t.eps.to_string());
        kv("train.batch", t.batch.to_string());
        kv("train.epochs", t.epochs.to_string());
        kv("train.patience", t.patience.to_string());
        kv("train.target_miou", t.target_miou.to_string());
        kv("train.seed", t.seed.to_string());
        kv("data.image_size", self.data.image_size.to_string());
        kv("data.train_split", self.data.train_split.clone());
        kv("data.val_split", self.data.val_split.clone());
        kv("ablation.no_fusion", a.no_fusion.to_string());
        kv("ablation.no_noise", a.no_noise.to_string());
        kv("ablation.no_msrc", a.no_msrc.to_string());
        kv("ablation.zero_text", a.zero_text.to_string());
        kv("hooks.zero_fusion_path", h.zero_fusion_path.to_string());
        kv("hooks.force_one_hot_coefficients", opt(&h.force_one_hot_coefficients));
        kv("hooks.force_unit_ca", h.force_unit_ca.to_string());
        kv("hooks.force_unit_discriminator", h.force_unit_discriminator.to_string());
        kv("hooks.zero_arc", h.zero_arc.to_string());
        kv(
            "hooks.force_theta",
            h.force_theta.as_ref().map_or_else(|| "none".into(), |v| list(v)),
        );
        kv(
            "hooks.force_lambda",
            h.force_lambda.as_ref().map_or_else(|| "none".into(), |v| list(v)),
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_configuration() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.model.stages, 4);
        assert_eq!(cfg.model.msrc_kernels, vec![1, 3, 5]);
        assert_eq!(cfg.model.msrc_kernels.len(), 3);
        assert_eq!(cfg.model.channels, 32);
        assert_eq!(cfg.model.displacement, 3);
        assert_eq!(cfg.train.weight_decay, 0.01);
        assert_eq!(cfg.train.batch, 8);
        assert_eq!(cfg.train.epochs, 40);
        assert_eq!(cfg.data.image_size, 48);
        assert_eq!(RunConfig::pretrained_preset().train.lr, 3e-5);
    }

    #[test]
    fn parses_dotted_keys_lists_and_comments() {
        let cfg = RunConfig::parse(
            "# toy run\nmodel.channels = 16\nmodel.msrc_kernels = [1, 3]\n\ntrain.lr = 1e-3 # faster\nablation.no_msrc = true\n",
        )
        .unwrap();
        assert_eq!(cfg.model.channels, 16);
        assert_eq!(cfg.model.msrc_kernels, vec![1, 3]);
        assert_eq!(cfg.train.lr, 1e-3);
        assert!(cfg.ablation.no_msrc);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(RunConfig::parse("model.colour = 3").is_err());
        assert!(RunConfig::parse("model.channels = many").is_err());
        assert!(RunConfig::parse("model.msrc_kernels = 1,2").is_err());
        assert!(RunConfig::parse("model.stages = 1").is_err());
        assert!(RunConfig::parse("just text").is_err());
    }

    #[test]
    fn text_form_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.model.msrc_kernels = vec![1, 3, 5, 7];
        cfg.hooks.force_theta = Some(vec![0.5, 0.0, -0.25, 1.0]);
        cfg.hooks.force_one_hot_coefficients = Some(2);
        cfg.train.lr = 1.5e-4;
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn stage_geometry() {
        let m = ModelConfig::default();
        let extents: Vec<usize> = (1..=4).map(|i| m.stage_extent(48, i)).collect();
        assert_eq!(extents, vec![12, 6, 3, 2]);
        assert_eq!(m.stage_channels(4), 256);
    }
}
