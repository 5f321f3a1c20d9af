//! Flat experiment configuration: `key = value` lines under `[section]`
//! headers, `#` comments. Every key is optional; missing keys keep their
//! defaults and are logged. Unknown sections or keys are rejected.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use ini::Ini;
use log::info;

use crate::contour::Rigidity;
use crate::harness::{DecoderChoice, ExperimentConfig, GuidanceMode, DEFAULT_SCALE_GRID, DEFAULT_STEP_GRID};
use crate::models::OptimizerKind;

#[derive(Debug, Clone, PartialEq)]
pub struct CliConfig {
    pub experiment: ExperimentConfig,
    /// Augmentation ratio for single-ratio stages (`augment`, `eval`).
    pub ratio: f64,
    /// Number of seeds of an experiment; they run as `seed, seed+1, …`.
    pub seed_count: usize,
    pub scale_grid: Vec<f64>,
    pub step_grid: Vec<usize>,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentConfig::default(),
            ratio: 0.4,
            seed_count: 5,
            scale_grid: DEFAULT_SCALE_GRID.to_vec(),
            step_grid: DEFAULT_STEP_GRID.to_vec(),
        }
    }
}

impl CliConfig {
    /// Experiment settings with the seed list expanded from `seed`.
    pub fn experiment_for(&self, seed: u64) -> ExperimentConfig {
        ExperimentConfig {
            seeds: (0..self.seed_count as u64).map(|i| seed.wrapping_add(i)).collect(),
            ..self.experiment.clone()
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config syntax: {0}")]
    Syntax(String),
    #[error("unknown section [{0}]")]
    UnknownSection(String),
    #[error("unknown key {key:?} in [{section}]")]
    UnknownKey { section: String, key: String },
    #[error("[{section}] {key} = {value:?}: {message}")]
    Value {
        section: String,
        key: String,
        value: String,
        message: String,
    },
}

type Getter = fn(&CliConfig) -> String;
type Setter = fn(&mut CliConfig, &str) -> Result<(), String>;

struct Key {
    section: &'static str,
    key: &'static str,
    get: Getter,
    set: Setter,
}

fn parse<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: Display,
{
    v.trim().parse::<T>().map_err(|e| e.to_string())
}

fn list<T: FromStr>(v: &str) -> Result<Vec<T>, String>
where
    T::Err: Display,
{
    v.split(',').filter(|s| !s.trim().is_empty()).map(parse).collect()
}

fn join<T: Display>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

macro_rules! key {
    ($section:literal, $key:literal, $($field:ident).+) => {
        Key {
            section: $section,
            key: $key,
            get: |c| c.$($field).+.to_string(),
            set: |c, v| {
                c.$($field).+ = parse(v)?;
                Ok(())
            },
        }
    };
}

const KEYS: &[Key] = &[
    key!("synthbench", "classes", experiment.bench.classes),
    key!("synthbench", "per_class", experiment.bench.per_class),
    key!("synthbench", "noise", experiment.bench.noise),
    key!("synthbench", "max_shift", experiment.bench.max_shift),
    key!("synthbench", "jitter", experiment.bench.jitter),
    key!("synthbench", "mark_depth", experiment.bench.mark_depth),
    key!("synthbench", "train_fraction", experiment.bench.train_fraction),
    key!("synthbench", "val_fraction", experiment.bench.val_fraction),
    key!("diffusion", "train_steps", experiment.schedule.train_steps),
    key!("diffusion", "beta_start", experiment.schedule.beta_start),
    key!("diffusion", "beta_end", experiment.schedule.beta_end),
    key!("diffusion", "inference_steps", experiment.schedule.inference_steps),
    key!("guidance", "s_cfg", experiment.guidance.s_cfg_t),
    key!("guidance", "s_ctl", experiment.guidance.s_ctl_t),
    key!("guidance", "s_cls", experiment.guidance.s_cls_ns),
    key!("guidance", "n_s", experiment.guidance.n_s),
    key!("guidance", "sigma_t", experiment.guidance.sigma_t),
    key!("guidance", "confidence_floor", experiment.guidance.confidence_floor),
    key!("guidance", "confidence_ceiling", experiment.guidance.confidence_ceiling),
    key!("guidance", "adaptive", experiment.guidance.adaptive),
    key!("contour", "canny_low", experiment.contour.canny_low),
    key!("contour", "canny_high", experiment.contour.canny_high),
    key!("contour", "flip_prob", experiment.contour.flip_prob),
    key!("contour", "max_rotation_deg", experiment.contour.max_rotation_deg),
    key!("contour", "patch_grid", experiment.contour.patch_grid),
    key!("contour", "control_points", experiment.contour.control_points),
    Key {
        section: "contour",
        key: "perturbation",
        get: |c| match c.experiment.contour.perturbation {
            Some(p) => p.to_string(),
            None => "auto".into(),
        },
        set: |c, v| {
            c.experiment.contour.perturbation = match v.trim() {
                "auto" => None,
                s => Some(parse(s)?),
            };
            Ok(())
        },
    },
    key!("contour", "tps_regularization", experiment.contour.tps_regularization),
    key!("contour", "binarize_threshold", experiment.contour.binarize_threshold),
    Key {
        section: "contour",
        key: "rigidity",
        get: |c| match c.experiment.rigidity {
            Rigidity::Rigid => "rigid".into(),
            Rigidity::NonRigid => "nonrigid".into(),
        },
        set: |c, v| {
            c.experiment.rigidity = parse(v)?;
            Ok(())
        },
    },
    key!("models", "hidden", experiment.denoiser.hidden),
    key!("models", "time_dim", experiment.denoiser.time_dim),
    key!("models", "denoiser_epochs", experiment.denoiser_training.epochs),
    key!("models", "denoiser_batch", experiment.denoiser_training.batch_size),
    key!("models", "denoiser_lr", experiment.denoiser_training.lr),
    key!("models", "cond_drop_prob", experiment.denoiser_training.cond_drop_prob),
    Key {
        section: "models",
        key: "optimizer",
        get: |c| c.experiment.denoiser_training.optimizer.to_string(),
        set: |c, v| {
            let kind: OptimizerKind = parse(v)?;
            let e = &mut c.experiment;
            e.denoiser_training.optimizer = kind;
            e.guidance_classifier.optimizer = kind;
            e.downstream.optimizer = kind;
            Ok(())
        },
    },
    key!("models", "classifier_hidden", experiment.classifier_hidden),
    key!("models", "classifier_epochs", experiment.guidance_classifier.epochs),
    key!("models", "classifier_batch", experiment.guidance_classifier.batch_size),
    key!("models", "classifier_lr", experiment.guidance_classifier.lr),
    key!("models", "classifier_input_noise", experiment.guidance_classifier.input_noise),
    key!("models", "downstream_epochs", experiment.downstream.epochs),
    key!("models", "downstream_batch", experiment.downstream.batch_size),
    key!("models", "downstream_lr", experiment.downstream.lr),
    Key {
        section: "models",
        key: "decoder",
        get: |c| match c.experiment.decoder {
            DecoderChoice::Identity => "identity".into(),
            DecoderChoice::Linear { .. } => "linear".into(),
        },
        set: |c, v| {
            let components = match c.experiment.decoder {
                DecoderChoice::Linear { components } => components,
                DecoderChoice::Identity => DEFAULT_COMPONENTS,
            };
            c.experiment.decoder = match v.trim() {
                "identity" => DecoderChoice::Identity,
                "linear" => DecoderChoice::Linear { components },
                other => return Err(format!("expected identity or linear, got {other}")),
            };
            Ok(())
        },
    },
    Key {
        section: "models",
        key: "decoder_components",
        get: |c| match c.experiment.decoder {
            DecoderChoice::Linear { components } => components.to_string(),
            DecoderChoice::Identity => DEFAULT_COMPONENTS.to_string(),
        },
        set: |c, v| {
            let n: usize = parse(v)?;
            if let DecoderChoice::Linear { components } = &mut c.experiment.decoder {
                *components = n;
            }
            Ok(())
        },
    },
    key!("harness", "per_image", experiment.per_image),
    key!("harness", "ratio", ratio),
    Key {
        section: "harness",
        key: "ratios",
        get: |c| join(&c.experiment.ratios),
        set: |c, v| {
            c.experiment.ratios = list(v)?;
            Ok(())
        },
    },
    Key {
        section: "harness",
        key: "modes",
        get: |c| join(&c.experiment.modes),
        set: |c, v| {
            c.experiment.modes = list::<GuidanceMode>(v)?;
            Ok(())
        },
    },
    key!("harness", "seed_count", seed_count),
    Key {
        section: "harness",
        key: "few_shot_k",
        get: |c| c.experiment.few_shot_k.map(|k| k.to_string()).unwrap_or_else(|| "none".into()),
        set: |c, v| {
            c.experiment.few_shot_k = match v.trim() {
                "none" | "" => None,
                s => Some(parse(s)?),
            };
            Ok(())
        },
    },
    Key {
        section: "harness",
        key: "scale_grid",
        get: |c| join(&c.scale_grid),
        set: |c, v| {
            c.scale_grid = list(v)?;
            Ok(())
        },
    },
    Key {
        section: "harness",
        key: "step_grid",
        get: |c| join(&c.step_grid),
        set: |c, v| {
            c.step_grid = list(v)?;
            Ok(())
        },
    },
    key!("harness", "jobs", experiment.jobs),
];

const DEFAULT_COMPONENTS: usize = 32;

/// Every accepted `(section, key)` pair, in documentation order.
pub fn known_keys() -> impl Iterator<Item = (&'static str, &'static str)> {
    KEYS.iter().map(|k| (k.section, k.key))
}

/// Renders a complete configuration file holding the current values.
pub fn render(config: &CliConfig) -> String {
    let mut out = String::new();
    let mut section = "";
    for k in KEYS {
        if k.section != section {
            if !section.is_empty() {
                out.push('\n');
            }
            out.push_str(&format!("[{}]\n", k.section));
            section = k.section;
        }
        out.push_str(&format!("{} = {}\n", k.key, (k.get)(config)));
    }
    out
}

pub fn parse_config(text: &str) -> Result<CliConfig, ConfigError> {
    let ini = Ini::load_from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
    let mut config = CliConfig::default();
    let mut seen: Vec<(&str, &str)> = Vec::new();
    for (section, props) in ini.iter() {
        let section = section.unwrap_or("");
        if props.is_empty() && !KEYS.iter().any(|k| k.section == section) && section.is_empty() {
            continue;
        }
        if !KEYS.iter().any(|k| k.section == section) {
            return Err(ConfigError::UnknownSection(section.into()));
        }
        for (key, value) in props.iter() {
            let spec = KEYS
                .iter()
                .find(|k| k.section == section && k.key == key)
                .ok_or_else(|| ConfigError::UnknownKey {
                    section: section.into(),
                    key: key.into(),
                })?;
            (spec.set)(&mut config, value).map_err(|message| ConfigError::Value {
                section: section.into(),
                key: key.into(),
                value: value.into(),
                message,
            })?;
            seen.push((spec.section, spec.key));
        }
    }
    for k in KEYS {
        if !seen.contains(&(k.section, k.key)) {
            info!("default used: [{}] {} = {}", k.section, k.key, (k.get)(&config));
        }
    }
    Ok(config)
}

pub fn load_config(path: Option<&Path>) -> Result<CliConfig, ConfigError> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                path: p.display().to_string(),
                source,
            })?;
            parse_config(&text)
        }
        None => parse_config(""),
    }
}
