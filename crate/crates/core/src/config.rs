//! Training configuration, ablation modes and flat `key=value` overrides.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{DiscriminatorConfig, GeneratorConfig, SegmenterConfig};
use crate::phantom::AugmentConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    SupervisedOnly,
    PseudoLabelBaseline,
    GanBaseline,
    NoIntraTeacher,
    NoInterTeacher,
    VanillaTwoTeacher,
    NoIntraRc,
    NoInterRc,
    Full,
}

/// Which components a mode switches on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ModeFlags {
    /// Appearance alignment is trained and produces synthetic images.
    pub aam: bool,
    /// Inter-domain teacher trained on synthetic images and distilled.
    pub inter_teacher: bool,
    /// EMA teacher with consistency on unlabeled images.
    pub intra_teacher: bool,
    /// Student self-training with argmax pseudo-labels on unlabeled images.
    pub pseudo_label: bool,
    /// Student supervised directly on raw source images.
    pub joint_source: bool,
    /// Student supervised directly on translated source images.
    pub joint_synthetic: bool,
    /// Importance weights from the target discriminator (otherwise 1).
    pub inter_rc: bool,
    /// Uncertainty mask on the consistency loss (otherwise all pixels).
    pub intra_rc: bool,
}

impl Mode {
    pub const ALL: [Mode; 9] = [
        Mode::SupervisedOnly,
        Mode::PseudoLabelBaseline,
        Mode::GanBaseline,
        Mode::NoIntraTeacher,
        Mode::NoInterTeacher,
        Mode::VanillaTwoTeacher,
        Mode::NoIntraRc,
        Mode::NoInterRc,
        Mode::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::SupervisedOnly => "supervised_only",
            Mode::PseudoLabelBaseline => "pseudo_label_baseline",
            Mode::GanBaseline => "gan_baseline",
            Mode::NoIntraTeacher => "no_intra_teacher",
            Mode::NoInterTeacher => "no_inter_teacher",
            Mode::VanillaTwoTeacher => "vanilla_two_teacher",
            Mode::NoIntraRc => "no_intra_rc",
            Mode::NoInterRc => "no_inter_rc",
            Mode::Full => "full",
        }
    }

    pub fn flags(self) -> ModeFlags {
        let none = ModeFlags::default();
        let two_teacher = ModeFlags {
            aam: true,
            inter_teacher: true,
            intra_teacher: true,
            ..none
        };
        match self {
            Mode::SupervisedOnly => none,
            Mode::PseudoLabelBaseline => ModeFlags {
                joint_source: true,
                pseudo_label: true,
                ..none
            },
            Mode::GanBaseline => ModeFlags {
                aam: true,
                joint_synthetic: true,
                pseudo_label: true,
                ..none
            },
            Mode::NoIntraTeacher => ModeFlags {
                aam: true,
                inter_teacher: true,
                pseudo_label: true,
                ..none
            },
            Mode::NoInterTeacher => ModeFlags {
                aam: true,
                joint_synthetic: true,
                intra_teacher: true,
                ..none
            },
            Mode::VanillaTwoTeacher => two_teacher,
            Mode::NoIntraRc => ModeFlags {
                inter_rc: true,
                ..two_teacher
            },
            Mode::NoInterRc => ModeFlags {
                intra_rc: true,
                ..two_teacher
            },
            Mode::Full => ModeFlags {
                inter_rc: true,
                intra_rc: true,
                ..two_teacher
            },
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let valid: Vec<_> = Mode::ALL.iter().map(|m| m.name()).collect();
            Error::config("mode", format!("unknown mode `{s}`; valid: {}", valid.join(", ")))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BatchSizes {
    pub source: usize,
    pub labeled_target: usize,
    pub unlabeled_target: usize,
}

impl Default for BatchSizes {
    fn default() -> Self {
        Self {
            source: 2,
            labeled_target: 2,
            unlabeled_target: 2,
        }
    }
}

/// Complete record of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub seed: u64,
    pub epochs: usize,
    pub lambda_kd: f64,
    pub lambda_cyc: f64,
    pub alpha: f64,
    pub n_passes: usize,
    /// Ramp length in epochs.
    pub t_max: f64,
    pub lr: f64,
    pub aam_lr: f64,
    pub aam_beta1: f64,
    pub batch: BatchSizes,
    pub w_max: f64,
    pub renormalize_weights: bool,
    pub noise_std: f64,
    pub pseudo_label_warmup: usize,
    pub pseudo_label_weight: f64,
    pub augment: bool,
    pub augmentation: AugmentConfig,
    /// Epoch interval between checkpoints; the final state is always saved.
    pub checkpoint_every: usize,
    pub dump_uncertainty: bool,
    pub segmenter: SegmenterConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Full,
            seed: 0,
            epochs: 50,
            lambda_kd: 5.0,
            lambda_cyc: 10.0,
            alpha: 0.99,
            n_passes: 8,
            t_max: 50.0,
            lr: 1e-4,
            aam_lr: 2e-4,
            aam_beta1: 0.5,
            batch: BatchSizes::default(),
            w_max: 10.0,
            renormalize_weights: false,
            noise_std: 0.1,
            pseudo_label_warmup: 10,
            pseudo_label_weight: 1.0,
            augment: true,
            augmentation: AugmentConfig::default(),
            checkpoint_every: 0,
            dump_uncertainty: false,
            segmenter: SegmenterConfig::default(),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(field, format!("{v} must be positive")))
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        positive("lr", self.lr)?;
        positive("aam_lr", self.aam_lr)?;
        positive("t_max", self.t_max)?;
        positive("w_max", self.w_max)?;
        if !(self.lambda_kd >= 0.0 && self.lambda_kd.is_finite()) {
            return Err(Error::config("lambda_kd", "must be nonnegative"));
        }
        if !(self.lambda_cyc >= 0.0 && self.lambda_cyc.is_finite()) {
            return Err(Error::config("lambda_cyc", "must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("alpha", "must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.aam_beta1) {
            return Err(Error::config("aam_beta1", "must lie in [0, 1)"));
        }
        if self.n_passes < 1 {
            return Err(Error::config("n_passes", "must be at least 1"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("noise_std", "must be nonnegative"));
        }
        for (k, v) in [
            ("batch.source", self.batch.source),
            ("batch.labeled_target", self.batch.labeled_target),
            ("batch.unlabeled_target", self.batch.unlabeled_target),
        ] {
            if v == 0 {
                return Err(Error::config(k, "must be positive"));
            }
        }
        if self.generator.in_channels != self.segmenter.in_channels
            || self.discriminator.in_channels != self.segmenter.in_channels
        {
            return Err(Error::config("generator.in_channels", "all networks must share input channels"));
        }
        self.segmenter.validate()
    }

    pub fn flags(&self) -> ModeFlags {
        self.mode.flags()
    }

    /// Dotted paths of every settable leaf, e.g. `batch.source`.
    pub fn keys() -> Vec<String> {
        let value = serde_json::to_value(TrainConfig::default()).expect("config serializes");
        let mut out = Vec::new();
        collect_keys(&value, String::new(), &mut out);
        out
    }

    /// Sets one dotted key. The value is parsed as JSON, falling back to a
    /// plain string (so `mode=full` works unquoted).
    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        let mut root = serde_json::to_value(&*self)?;
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = match slot.as_object_mut().and_then(|o| o.get_mut(part)) {
                Some(s) => s,
                None => {
                    return Err(Error::config(
                        key,
                        format!("unknown key; valid keys: {}", Self::keys().join(", ")),
                    ))
                }
            };
        }
        if slot.is_object() {
            return Err(Error::config(key, "names a section, not a value"));
        }
        *slot = serde_json::from_str(value).unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
        *self = serde_json::from_value(root).map_err(|e| Error::config(key, e.to_string()))?;
        Ok(())
    }

    /// Applies `key=value` pairs in order, then validates.
    pub fn with_overrides<S: AsRef<str>>(mut self, pairs: &[S]) -> Result<Self> {
        for p in pairs {
            let p = p.as_ref();
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| Error::config(p, "override must look like key=value"))?;
            self.apply_override(k.trim(), v.trim())?;
        }
        self.validate()?;
        Ok(self)
    }
}

fn collect_keys(v: &serde_json::Value, prefix: String, out: &mut Vec<String>) {
    match v.as_object() {
        Some(obj) => {
            for (k, child) in obj {
                let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                collect_keys(child, p, out);
            }
        }
        None => out.push(prefix),
    }
}
