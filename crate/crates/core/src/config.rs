//! Run configuration, persisted as TOML.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config: {0}")]
    Invalid(String),
    #[error("config parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config io: {0}")]
    Io(#[from] std::io::Error),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
    pub frames: usize,
    pub ffn_width: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self { d_model: 64, heads: 4, levels: 3, points: 4, frames: 3, ffn_width: 256 }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let counts = [self.d_model, self.heads, self.levels, self.points, self.frames, self.ffn_width];
        if counts.contains(&0) {
            return Err(invalid("attention counts must be at least 1"));
        }
        if self.d_model % self.heads != 0 {
            return Err(invalid(format!("d_model {} not divisible by {} heads", self.d_model, self.heads)));
        }
        if self.d_model % 4 != 0 {
            return Err(invalid("d_model must be a multiple of 4 for the 2-D positional encoding"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub queries: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Output channels of the four stride-2 convolution blocks.
    pub backbone_channels: [usize; 4],
    pub attention: AttentionConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            queries: 100,
            encoder_layers: 3,
            decoder_layers: 3,
            backbone_channels: [16, 32, 64, 96],
            attention: AttentionConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemporalConfig {
    pub stpe_layers: usize,
    pub stdme_layers: usize,
    pub stpd_layers: usize,
    pub pqs_threshold: f64,
    pub min_keep: usize,
    pub use_stpe: bool,
    pub use_instance_mask: bool,
    pub use_stdme: bool,
    pub use_stpd: bool,
}

impl Default for TemporalConfig {
    fn default() -> Self {
        Self {
            stpe_layers: 2,
            stdme_layers: 2,
            stpd_layers: 3,
            pqs_threshold: 0.3,
            min_keep: 5,
            use_stpe: true,
            use_instance_mask: true,
            use_stdme: true,
            use_stpd: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kpt: f64,
    pub cls: f64,
    pub ic: f64,
    pub margin: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { kpt: 5.0, cls: 2.0, ic: 1.0, margin: 0.3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 2e-4, weight_decay: 1e-4, batch_size: 8, epochs: 20, clip_norm: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub image_size: usize,
    pub frames: usize,
    pub persons_min: usize,
    pub persons_max: usize,
    /// Fraction of the frame width per frame.
    pub speed_min: f64,
    pub speed_max: f64,
    pub occlusion_prob: f64,
    pub blur_min: usize,
    pub blur_max: usize,
    /// Person height as a fraction of the frame height.
    pub height_min: f64,
    pub height_max: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            frames: 3,
            persons_min: 2,
            persons_max: 6,
            speed_min: 0.0,
            speed_max: 0.02,
            occlusion_prob: 0.0,
            blur_min: 0,
            blur_max: 0,
            height_min: 0.4,
            height_max: 0.6,
        }
    }
}

/// Named variations of a base synth config; each touches one field only.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Clean,
    Blur,
    Occlusion,
    Fast,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Clean, Split::Blur, Split::Occlusion, Split::Fast];

    pub fn name(self) -> &'static str {
        match self {
            Split::Clean => "clean",
            Split::Blur => "blur",
            Split::Occlusion => "occlusion",
            Split::Fast => "fast",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s)
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.frames == 0 {
            return Err(invalid("synth frames must be at least 1"));
        }
        if self.image_size < 16 {
            return Err(invalid("synth image_size must be at least 16"));
        }
        if self.persons_min > self.persons_max {
            return Err(invalid("persons_min exceeds persons_max"));
        }
        let reals = [self.speed_min, self.speed_max, self.occlusion_prob, self.height_min, self.height_max];
        if reals.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid("synth ranges must be finite and nonnegative"));
        }
        if self.speed_min > self.speed_max || self.blur_min > self.blur_max || self.height_min > self.height_max {
            return Err(invalid("synth range lower bound exceeds upper bound"));
        }
        if self.occlusion_prob > 1.0 || self.height_max > 0.9 || self.height_min <= 0.0 {
            return Err(invalid("occlusion_prob must be in [0,1] and person height in (0, 0.9]"));
        }
        Ok(())
    }

    /// Applies `split` on top of `self`, changing exactly one field.
    pub fn with_split(&self, split: Split) -> Self {
        let mut c = self.clone();
        match split {
            Split::Clean => {}
            Split::Blur => c.blur_max = c.blur_max.max(2),
            Split::Occlusion => c.occlusion_prob = 0.7,
            Split::Fast => c.speed_max = c.speed_max.max(0.08),
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Correctness radius as a fraction of person scale.
    pub tau: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { tau: 0.1 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub temporal: TemporalConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub synth: SynthConfig,
    pub eval: EvalConfig,
}

/// Reference hyperparameters the defaults must keep, checked at startup.
pub const REFERENCE_LR: f64 = 2e-4;
pub const REFERENCE_WEIGHT_DECAY: f64 = 1e-4;
pub const REFERENCE_BATCH_SIZE: usize = 8;
pub const REFERENCE_FRAMES: usize = 3;
pub const REFERENCE_QUERIES: usize = 100;
pub const REFERENCE_STPD_LAYERS: usize = 3;

impl RunConfig {
    /// Reduced-size preset used for the desk-scale benchmark runs.
    pub fn bench() -> Self {
        let mut c = Self::default();
        c.model.image_size = 64;
        c.model.queries = 30;
        c.model.backbone_channels = [16, 24, 32, 48];
        c.model.attention = AttentionConfig { d_model: 32, heads: 4, levels: 3, points: 4, frames: 3, ffn_width: 64 };
        c.synth.image_size = 64;
        c.synth.persons_min = 1;
        c.synth.persons_max = 3;
        c.synth.height_min = 0.45;
        c.synth.height_max = 0.6;
        c.optim.lr = 1e-3;
        c
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.attention.validate()?;
        self.synth.validate()?;
        let m = &self.model;
        if m.image_size % 16 != 0 || m.image_size == 0 {
            return Err(invalid(format!("image_size {} must be a positive multiple of 16", m.image_size)));
        }
        if m.image_size != self.synth.image_size {
            return Err(invalid("model and synth image sizes differ"));
        }
        if m.attention.levels != 3 {
            return Err(invalid("the backbone provides exactly 3 levels"));
        }
        if m.queries == 0 || m.decoder_layers == 0 || m.backbone_channels.contains(&0) {
            return Err(invalid("queries, decoder layers and backbone widths must be positive"));
        }
        let t = &self.temporal;
        if !(0.0..=1.0).contains(&t.pqs_threshold) {
            return Err(invalid("pqs_threshold must be in [0,1]"));
        }
        if t.min_keep == 0 || t.stpd_layers == 0 {
            return Err(invalid("min_keep and stpd_layers must be positive"));
        }
        let l = &self.loss;
        if [l.kpt, l.cls, l.ic, l.margin].iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid("loss weights and margin must be finite and nonnegative"));
        }
        let o = &self.optim;
        if !(o.lr > 0.0) || o.weight_decay < 0.0 || o.batch_size == 0 || o.clip_norm < 0.0 {
            return Err(invalid("optimizer settings out of range"));
        }
        if !(self.eval.tau > 0.0) {
            return Err(invalid("tau must be positive"));
        }
        Ok(())
    }

    /// Checks that the built-in defaults still carry the published training values.
    pub fn self_check() -> Result<(), ConfigError> {
        let d = Self::default();
        let checks = [
            ("optim.lr", d.optim.lr == REFERENCE_LR),
            ("optim.weight_decay", d.optim.weight_decay == REFERENCE_WEIGHT_DECAY),
            ("optim.batch_size", d.optim.batch_size == REFERENCE_BATCH_SIZE),
            ("model.attention.frames", d.model.attention.frames == REFERENCE_FRAMES),
            ("synth.frames", d.synth.frames == REFERENCE_FRAMES),
            ("model.queries", d.model.queries == REFERENCE_QUERIES),
            ("temporal.stpd_layers", d.temporal.stpd_layers == REFERENCE_STPD_LAYERS),
        ];
        match checks.iter().find(|(_, ok)| !ok) {
            Some((name, _)) => Err(invalid(format!("default {name} differs from the published training setting"))),
            None => d.validate(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let c: Self = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Replaces the field at dotted path `key` (for example `optim.lr`) with
    /// `value`, parsed as the field's current type.
    ///
    /// The result is not validated, so coupled fields can be changed one at a
    /// time; call [`Self::validate`] after the last override.
    pub fn with_override(&self, key: &str, value: &str) -> Result<Self, ConfigError> {
        let mut root: toml::Table = toml::from_str(&self.to_toml())?;
        let (parents, leaf) = match key.rsplit_once('.') {
            Some((p, l)) => (p.split('.').collect::<Vec<_>>(), l),
            None => (Vec::new(), key),
        };
        let mut table = &mut root;
        for part in parents {
            table = match table.get_mut(part) {
                Some(toml::Value::Table(t)) => t,
                _ => return Err(invalid(format!("unknown config section `{part}` in `{key}`"))),
            };
        }
        let slot = table.get_mut(leaf).ok_or_else(|| invalid(format!("unknown config field `{key}`")))?;
        let bad = || invalid(format!("`{value}` is not a valid value for `{key}`"));
        *slot = match slot {
            toml::Value::Integer(_) => toml::Value::Integer(value.parse().map_err(|_| bad())?),
            toml::Value::Float(_) => toml::Value::Float(value.parse().map_err(|_| bad())?),
            toml::Value::Boolean(_) => toml::Value::Boolean(value.parse().map_err(|_| bad())?),
            toml::Value::String(_) => toml::Value::String(value.to_string()),
            _ => {
                let wrapped: toml::Table = toml::from_str(&format!("v = {value}")).map_err(|_| bad())?;
                wrapped["v"].clone()
            }
        };
        Ok(toml::from_str(&toml::to_string(&root).expect("table serializes"))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_pass_self_check() {
        RunConfig::self_check().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        for c in [RunConfig::default(), RunConfig::bench()] {
            let text = c.to_toml();
            assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
        }
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let c = RunConfig::from_toml("seed = 9\n[loss]\nmargin = 0.5\n").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.loss.margin, 0.5);
        assert_eq!(c.loss.kpt, 5.0);
    }

    #[test]
    fn overrides_follow_field_types() {
        let c = RunConfig::default();
        let c = c.with_override("optim.lr", "0.001").unwrap();
        let c = c.with_override("temporal.use_stdme", "false").unwrap();
        let c = c.with_override("model.backbone_channels", "[8, 8, 16, 16]").unwrap();
        let c = c.with_override("seed", "12").unwrap();
        assert_eq!((c.optim.lr, c.temporal.use_stdme, c.model.backbone_channels, c.seed), (1e-3, false, [8, 8, 16, 16], 12));
        assert!(c.with_override("optim.lrr", "1").is_err());
        assert!(c.with_override("optim.lr", "fast").is_err());
        assert!(c.with_override("optim.batch_size", "0").unwrap().validate().is_err());
        let both = c.with_override("model.image_size", "32").unwrap();
        assert!(both.validate().is_err());
        both.with_override("synth.image_size", "32").unwrap().validate().unwrap();
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(RunConfig::from_toml("sed = 1\n").is_err());
    }

    #[test]
    fn indivisible_heads_rejected() {
        let mut c = RunConfig::default();
        c.model.attention.heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn splits_change_one_field_each() {
        let base = SynthConfig::default();
        for split in [Split::Blur, Split::Occlusion, Split::Fast] {
            let changed = base.with_split(split);
            let a = toml::to_string(&base).unwrap();
            let b = toml::to_string(&changed).unwrap();
            let diff = a.lines().zip(b.lines()).filter(|(x, y)| x != y).count();
            assert_eq!(diff, 1, "{split:?}");
        }
        assert_eq!(base.with_split(Split::Clean), base);
    }
}
