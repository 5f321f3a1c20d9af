//! End-to-end experiments: train per-seed models, augment the training split
//! under each guidance mode, mix, train fresh downstream classifiers and
//! aggregate test accuracy.

mod plots;

pub use plots::{
    averaged_csv, averaged_svg, cells_csv, emit_plots, line_chart_svg, ratio_sweep_csv, scale_sweep_csv, trace_svg, Series,
};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use log::info;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contour::{augment_contour, canny, ContourError, ContourParams, GrayImage, Rigidity};
use crate::diffusion::{DiffusionError, NoiseSchedule};
use crate::guidance::{
    higfa_sample_batch, GuidanceConfig, GuidanceError, GuidanceTrace, Phase, SampleRequest,
    SamplerModels,
};
use crate::models::{
    train_classifier, train_denoiser, Classifier, ClassifierConfig, ClassifierTraining,
    Conditioning, Decoder, Denoiser, DenoiserConfig, DenoiserData, DenoiserTraining, ModelError,
};
use crate::synthbench::{
    generate_benchmark, mix, BenchError, BenchmarkSpec, SyntheticDataset,
    SyntheticSample, SIDE,
};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment: {0}")]
    Config(String),
    #[error("sampling image {image}: {source}")]
    Sample {
        image: usize,
        #[source]
        source: GuidanceError,
    },
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Contour(#[from] ContourError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    None,
    TextOnly,
    TextContour,
    Higfa,
}

impl GuidanceMode {
    pub const ALL: [GuidanceMode; 4] = [Self::None, Self::TextOnly, Self::TextContour, Self::Higfa];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::TextOnly => "text_only",
            Self::TextContour => "text_contour",
            Self::Higfa => "higfa",
        }
    }

    /// Sampler settings for this mode, derived from the full configuration,
    /// and whether the contour branch is fed. `None` generates nothing.
    pub fn sampler_config(self, base: &GuidanceConfig) -> Option<(GuidanceConfig, bool)> {
        match self {
            Self::None => None,
            Self::TextOnly => Some((
                GuidanceConfig {
                    s_ctl_t: 0.0,
                    s_cls_ns: 0.0,
                    adaptive: false,
                    ..base.clone()
                },
                false,
            )),
            Self::TextContour => Some((
                GuidanceConfig {
                    s_cls_ns: 0.0,
                    adaptive: false,
                    ..base.clone()
                },
                true,
            )),
            Self::Higfa => Some((base.clone(), true)),
        }
    }
}

impl fmt::Display for GuidanceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GuidanceMode {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s.trim())
            .ok_or_else(|| HarnessError::Config(format!("unknown guidance mode {s:?}")))
    }
}

/// What an arm of the grid is varying.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArmGroup {
    Mode,
    ScaleSweep,
    StepSweep,
}

/// One sampler configuration evaluated in every seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub name: String,
    pub group: ArmGroup,
    pub mode: GuidanceMode,
    pub guidance: GuidanceConfig,
}

impl Arm {
    pub fn for_mode(mode: GuidanceMode, base: &GuidanceConfig) -> Self {
        Self {
            name: mode.as_str().into(),
            group: ArmGroup::Mode,
            mode,
            guidance: base.clone(),
        }
    }

    fn effective(&self) -> Option<(GuidanceConfig, bool)> {
        self.mode.sampler_config(&self.guidance)
    }
}

/// Arms of the classifier-scale sweep, adaptive and fixed, and of the
/// activation-step sweep.
pub fn ablation_arms(base: &GuidanceConfig, s_cls_values: &[f64], n_s_values: &[usize]) -> Vec<Arm> {
    let mut arms = Vec::new();
    for &s in s_cls_values {
        for adaptive in [true, false] {
            arms.push(Arm {
                name: format!("{}_s{s}", if adaptive { "adaptive" } else { "fixed" }),
                group: ArmGroup::ScaleSweep,
                mode: GuidanceMode::Higfa,
                guidance: GuidanceConfig {
                    s_cls_ns: s,
                    adaptive,
                    ..base.clone()
                },
            });
        }
    }
    for &n in n_s_values {
        arms.push(Arm {
            name: format!("ns{n}"),
            group: ArmGroup::StepSweep,
            mode: GuidanceMode::Higfa,
            guidance: GuidanceConfig { n_s: n, ..base.clone() },
        });
    }
    arms
}

pub const DEFAULT_SCALE_GRID: [f64; 5] = [0.0, 2.0, 5.0, 10.0, 20.0];
pub const DEFAULT_STEP_GRID: [usize; 6] = [10, 15, 20, 21, 25, 30];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderChoice {
    Identity,
    /// PCA autoencoder fitted on the training images.
    Linear { components: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub inference_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            train_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            inference_steps: 30,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        Ok(NoiseSchedule::new(
            self.train_steps,
            self.beta_start,
            self.beta_end,
            self.inference_steps,
        )?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub bench: BenchmarkSpec,
    pub schedule: ScheduleConfig,
    pub guidance: GuidanceConfig,
    pub contour: ContourParams,
    pub rigidity: Rigidity,
    pub denoiser: DenoiserConfig,
    pub denoiser_training: DenoiserTraining,
    pub classifier_hidden: usize,
    pub guidance_classifier: ClassifierTraining,
    pub downstream: ClassifierTraining,
    pub decoder: DecoderChoice,
    pub per_image: usize,
    pub ratios: Vec<f64>,
    pub modes: Vec<GuidanceMode>,
    /// Extra arms beyond one per mode (ablation sweeps).
    pub extra_arms: Vec<Arm>,
    pub seeds: Vec<u64>,
    pub few_shot_k: Option<usize>,
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            bench: BenchmarkSpec::default(),
            schedule: ScheduleConfig::default(),
            guidance: GuidanceConfig::default(),
            contour: ContourParams::default(),
            rigidity: Rigidity::NonRigid,
            denoiser: DenoiserConfig::default(),
            denoiser_training: DenoiserTraining::default(),
            classifier_hidden: 128,
            guidance_classifier: ClassifierTraining {
                input_noise: 0.1,
                ..ClassifierTraining::default()
            },
            downstream: ClassifierTraining::default(),
            decoder: DecoderChoice::Identity,
            per_image: 2,
            ratios: vec![0.4],
            modes: GuidanceMode::ALL.to_vec(),
            extra_arms: Vec::new(),
            seeds: vec![0, 1, 2, 3, 4],
            few_shot_k: None,
            jobs: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        self.bench.validate()?;
        let schedule = self.schedule.build()?;
        for arm in self.arms() {
            arm.guidance
                .validate(schedule.inference_steps())
                .map_err(|e| HarnessError::Config(format!("arm {}: {e}", arm.name)))?;
        }
        self.contour.validate()?;
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.per_image == 0 {
            return bad("per_image must be positive".into());
        }
        if let Some(r) = self.ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return bad(format!("ratio {r} not in [0,1]"));
        }
        if self.ratios.is_empty() || self.modes.is_empty() && self.extra_arms.is_empty() {
            return bad("need at least one ratio and one mode".into());
        }
        if self.denoiser.image_dim != SIDE * SIDE {
            return bad(format!("denoiser image_dim must be {}", SIDE * SIDE));
        }
        if self.denoiser.text_classes < self.bench.classes / 2 {
            return bad(format!(
                "denoiser knows {} text classes, benchmark has {} shapes",
                self.denoiser.text_classes,
                self.bench.classes / 2
            ));
        }
        if self.few_shot_k == Some(0) {
            return bad("few_shot_k must be positive".into());
        }
        let mut names: Vec<String> = self.arms().into_iter().map(|a| a.name).collect();
        names.sort();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return bad(format!("duplicate arm name {}", w[0]));
        }
        Ok(())
    }

    /// One arm per listed mode followed by the extra arms.
    pub fn arms(&self) -> Vec<Arm> {
        self.modes
            .iter()
            .map(|&m| Arm::for_mode(m, &self.guidance))
            .chain(self.extra_arms.iter().cloned())
            .collect()
    }
}

/// Independent sub-seed for one purpose of one seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

const STREAM_BENCH: u64 = 1;
const STREAM_DENOISER: u64 = 2;
const STREAM_GUIDE: u64 = 3;
const STREAM_AUGMENT: u64 = 4;
const STREAM_MIX: u64 = 5;
const STREAM_DOWNSTREAM: u64 = 6;

/// Models and data of one seed.
#[derive(Debug, Clone)]
pub struct SeedModels {
    pub dataset: SyntheticDataset,
    pub train: Vec<usize>,
    pub denoiser: Option<Denoiser>,
    pub classifier: Option<Classifier>,
    pub decoder: Decoder,
    pub timings: Vec<(String, f64)>,
}

impl SeedModels {
    pub fn sampler(&self) -> Option<SamplerModels<'_>> {
        Some(SamplerModels {
            denoiser: self.denoiser.as_ref()?,
            classifier: self.classifier.as_ref(),
            decoder: &self.decoder,
        })
    }
}

/// The benchmark of `seed`.
pub fn seed_benchmark(cfg: &ExperimentConfig, seed: u64) -> Result<SyntheticDataset> {
    Ok(generate_benchmark(&BenchmarkSpec {
        seed: derive_seed(seed, STREAM_BENCH),
        ..cfg.bench.clone()
    })?)
}

/// Training indices: the train split, or its k-shot subset when configured.
pub fn train_indices(cfg: &ExperimentConfig, d: &SyntheticDataset) -> Vec<usize> {
    match cfg.few_shot_k {
        Some(k) => d.few_shot_train(k),
        None => d.splits.train.clone(),
    }
}

pub fn fit_decoder(cfg: &ExperimentConfig, d: &SyntheticDataset, train: &[usize]) -> Result<Decoder> {
    Ok(match cfg.decoder {
        DecoderChoice::Identity => Decoder::Identity,
        DecoderChoice::Linear { components } => Decoder::fit_linear(&d.tensor(train), components)?,
    })
}

/// Trains the denoiser of `seed`; returns it with the per-epoch losses.
pub fn train_seed_denoiser(
    cfg: &ExperimentConfig,
    d: &SyntheticDataset,
    train: &[usize],
    seed: u64,
) -> Result<(Denoiser, Vec<f64>)> {
    let schedule = cfg.schedule.build()?;
    let data = denoiser_data(d, train, &cfg.contour)?;
    let training = DenoiserTraining {
        seed: derive_seed(seed, STREAM_DENOISER),
        ..cfg.denoiser_training.clone()
    };
    Ok(train_denoiser(&data, &schedule, cfg.denoiser, &training)?)
}

/// Trains the guidance classifier of `seed` on decoded training images.
pub fn train_seed_classifier(
    cfg: &ExperimentConfig,
    d: &SyntheticDataset,
    train: &[usize],
    decoder: &Decoder,
    seed: u64,
) -> Result<(Classifier, Vec<f64>)> {
    Ok(train_classifier(
        &decoder.decode(&d.tensor(train))?,
        &d.labels_of(train),
        ClassifierConfig {
            input_dim: SIDE * SIDE,
            hidden: cfg.classifier_hidden,
            classes: d.classes(),
        },
        &ClassifierTraining {
            seed: derive_seed(seed, STREAM_GUIDE),
            ..cfg.guidance_classifier.clone()
        },
    )?)
}

/// Generates the seed's benchmark and trains whichever models the requested
/// arms need, on the k-shot subset when one is configured.
pub fn prepare_seed(cfg: &ExperimentConfig, seed: u64, arms: &[Arm]) -> Result<SeedModels> {
    let mut timings = Vec::new();
    let start = Instant::now();
    let dataset = seed_benchmark(cfg, seed)?;
    let train = train_indices(cfg, &dataset);
    timings.push(("benchmark".into(), start.elapsed().as_secs_f64()));
    let effective: Vec<_> = arms.iter().filter_map(Arm::effective).collect();
    let decoder = fit_decoder(cfg, &dataset, &train)?;

    let mut denoiser = None;
    if !effective.is_empty() {
        let start = Instant::now();
        let (model, losses) = train_seed_denoiser(cfg, &dataset, &train, seed)?;
        info!(
            "seed {seed}: denoiser trained, final loss {:.5}",
            losses.last().copied().unwrap_or(f64::NAN)
        );
        denoiser = Some(model);
        timings.push(("train_denoiser".into(), start.elapsed().as_secs_f64()));
    }

    let mut classifier = None;
    if effective.iter().any(|(g, _)| g.uses_classifier(cfg.schedule.inference_steps)) {
        let start = Instant::now();
        classifier = Some(train_seed_classifier(cfg, &dataset, &train, &decoder, seed)?.0);
        timings.push(("train_guidance_classifier".into(), start.elapsed().as_secs_f64()));
    }
    Ok(SeedModels {
        dataset,
        train,
        denoiser,
        classifier,
        decoder,
        timings,
    })
}

/// Synthetic pool of `seed` for one mode over the training images.
pub fn augment_seed(
    cfg: &ExperimentConfig,
    models: &SeedModels,
    guidance: &GuidanceConfig,
    mode: GuidanceMode,
    seed: u64,
) -> Result<Augmentation> {
    augment_dataset(
        &models.dataset,
        &models.train,
        models.sampler().as_ref(),
        guidance,
        &cfg.contour,
        cfg.rigidity,
        cfg.per_image,
        mode,
        &cfg.schedule.build()?,
        derive_seed(seed, STREAM_AUGMENT),
    )
}

/// Mixes the training images with `pool` at `ratio` and scores a fresh
/// downstream classifier; returns the accuracy and the synthetic count.
pub fn mixed_accuracy(
    cfg: &ExperimentConfig,
    d: &SyntheticDataset,
    train: &[usize],
    pool: &[SyntheticSample],
    ratio: f64,
    seed: u64,
) -> Result<(f64, usize)> {
    let real: Vec<(GrayImage, usize)> = train.iter().map(|&i| (d.images[i].clone(), d.labels[i])).collect();
    let m = mix(&real, pool, ratio, derive_seed(seed, STREAM_MIX))?;
    let acc = downstream_accuracy(cfg, d, &m.tensor(), &m.labels(), derive_seed(seed, STREAM_DOWNSTREAM))?;
    Ok((acc, m.synthetic_count()))
}

/// Denoiser training rows: images, (shape, style) text conditions and plain
/// Canny edge maps.
pub fn denoiser_data(d: &SyntheticDataset, indices: &[usize], contour: &ContourParams) -> Result<DenoiserData> {
    let mut edges = Vec::with_capacity(indices.len() * SIDE * SIDE);
    for &i in indices {
        let em = canny(&d.images[i], contour.canny_low, contour.canny_high)?;
        edges.extend(em.bits().iter().map(|&b| b as f64));
    }
    Ok(DenoiserData {
        x0: d.tensor(indices),
        cond: indices.iter().map(|&i| text_condition(d, i)).collect(),
        contours: Tensor::new(&[indices.len(), SIDE * SIDE], edges)?,
    })
}

/// The text prompt names the coarse shape and the style, never the fine
/// class.
pub fn text_condition(d: &SyntheticDataset, index: usize) -> Conditioning {
    Conditioning::new(d.coarse_ids[index], d.styles[index])
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Augmentation {
    pub samples: Vec<SyntheticSample>,
    pub traces: Vec<GuidanceTrace>,
}

pub const SAMPLE_BATCH: usize = 64;

/// Generates `per_image` images for every listed real image under `mode`.
/// Sample `k·per_image + j` is the `j`-th copy of the `k`-th image; its
/// contour augmentation and starting noise depend only on `(seed, id)`, so
/// different modes see the same contours and noise.
#[allow(clippy::too_many_arguments)]
pub fn augment_dataset(
    d: &SyntheticDataset,
    indices: &[usize],
    models: Option<&SamplerModels<'_>>,
    guidance: &GuidanceConfig,
    contour: &ContourParams,
    rigidity: Rigidity,
    per_image: usize,
    mode: GuidanceMode,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Augmentation> {
    let Some((config, use_contour)) = mode.sampler_config(guidance) else {
        return Ok(Augmentation::default());
    };
    let models = models.ok_or_else(|| HarnessError::Config(format!("mode {mode} needs a trained denoiser")))?;
    let mut requests = Vec::with_capacity(indices.len() * per_image);
    let mut sources = Vec::with_capacity(indices.len() * per_image);
    for (k, &i) in indices.iter().enumerate() {
        for j in 0..per_image {
            let id = k * per_image + j;
            let sample_seed = derive_seed(seed, (id as u64) << 8 | STREAM_AUGMENT);
            let contour = if use_contour {
                let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
                rng.set_stream(1);
                Some(augment_contour(&d.images[i], rigidity, contour, &mut rng)?)
            } else {
                None
            };
            requests.push(SampleRequest {
                cond: text_condition(d, i),
                contour,
                target_class: d.labels[i],
                seed: sample_seed,
                sample_id: id,
            });
            sources.push(i);
        }
    }
    let mut out = Augmentation::default();
    for (chunk, src) in requests.chunks(SAMPLE_BATCH).zip(sources.chunks(SAMPLE_BATCH)) {
        let results = match higfa_sample_batch(models, chunk, &config, schedule) {
            Ok(r) => r,
            Err(batch_err) => {
                // find the first offending image
                for (req, &i) in chunk.iter().zip(src) {
                    if let Err(e) = higfa_sample_batch(models, std::slice::from_ref(req), &config, schedule) {
                        return Err(HarnessError::Sample { image: i, source: e });
                    }
                }
                return Err(HarnessError::Sample {
                    image: src[0],
                    source: batch_err,
                });
            }
        };
        for (req, r) in chunk.iter().zip(results) {
            out.samples.push(SyntheticSample {
                image: r.image(SIDE, SIDE)?,
                label: req.target_class,
                sample_id: req.sample_id,
            });
            out.traces.push(r.trace);
        }
    }
    Ok(out)
}

/// Fresh downstream classifier trained on `(x, labels)`, scored on the test
/// split.
pub fn downstream_accuracy(
    cfg: &ExperimentConfig,
    d: &SyntheticDataset,
    x: &Tensor,
    labels: &[usize],
    seed: u64,
) -> Result<f64> {
    let (model, _) = train_classifier(
        x,
        labels,
        ClassifierConfig {
            input_dim: SIDE * SIDE,
            hidden: cfg.classifier_hidden,
            classes: d.classes(),
        },
        &ClassifierTraining {
            seed,
            ..cfg.downstream.clone()
        },
    )?;
    Ok(model.accuracy(&d.tensor(&d.splits.test), &d.labels_of(&d.splits.test))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub arm: String,
    pub mode: GuidanceMode,
    pub ratio: f64,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub synthetic: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedianRow {
    pub arm: String,
    pub mode: GuidanceMode,
    pub ratio: f64,
    pub median: Option<f64>,
    pub seeds: usize,
}

/// Per-step means over every trace of an arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragedTrace {
    pub arm: String,
    pub samples: usize,
    pub n_s: usize,
    pub steps: Vec<AveragedStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragedStep {
    pub step: usize,
    pub t: usize,
    pub phase: Phase,
    pub s_cfg: f64,
    pub s_ctl: f64,
    pub s_cls: f64,
    /// Mean over the samples whose classifier ran at this step.
    pub confidence: Option<f64>,
}

pub fn average_traces(arm: &str, n_s: usize, traces: &[GuidanceTrace]) -> AveragedTrace {
    let mut steps: Vec<AveragedStep> = Vec::new();
    let mut conf: Vec<(f64, usize)> = Vec::new();
    for tr in traces {
        for r in &tr.records {
            if r.step >= steps.len() {
                steps.resize_with(r.step + 1, || AveragedStep {
                    step: 0,
                    t: 0,
                    phase: Phase::Warmup,
                    s_cfg: 0.0,
                    s_ctl: 0.0,
                    s_cls: 0.0,
                    confidence: None,
                });
                conf.resize(r.step + 1, (0.0, 0));
            }
            let s = &mut steps[r.step];
            s.step = r.step;
            s.t = r.t;
            s.phase = r.phase;
            s.s_cfg += r.s_cfg;
            s.s_ctl += r.s_ctl;
            s.s_cls += r.s_cls;
            if let Some(p) = r.confidence {
                conf[r.step].0 += p;
                conf[r.step].1 += 1;
            }
        }
    }
    let n = traces.len().max(1) as f64;
    for (s, &(sum, k)) in steps.iter_mut().zip(&conf) {
        s.s_cfg /= n;
        s.s_ctl /= n;
        s.s_cls /= n;
        s.confidence = (k > 0).then(|| sum / k as f64);
    }
    AveragedTrace {
        arm: arm.into(),
        samples: traces.len(),
        n_s,
        steps,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub seed: u64,
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub arms: Vec<Arm>,
    pub ratios: Vec<f64>,
    pub seeds: Vec<u64>,
    pub cells: Vec<CellResult>,
    pub medians: Vec<MedianRow>,
    pub averaged_traces: Vec<AveragedTrace>,
    pub timings: Vec<StageTiming>,
    /// Per-sample traces by arm name; not serialized.
    #[serde(skip)]
    pub traces: BTreeMap<String, Vec<GuidanceTrace>>,
}

impl ExperimentReport {
    pub fn median(&self, arm: &str, ratio: f64) -> Option<f64> {
        self.medians
            .iter()
            .find(|m| m.arm == arm && m.ratio == ratio)
            .and_then(|m| m.median)
    }

    pub fn averaged_trace(&self, arm: &str) -> Option<&AveragedTrace> {
        self.averaged_traces.iter().find(|t| t.arm == arm)
    }

    pub fn failed_cells(&self) -> impl Iterator<Item = &CellResult> {
        self.cells.iter().filter(|c| c.error.is_some())
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

struct SeedOutcome {
    cells: Vec<CellResult>,
    traces: Vec<(String, Vec<GuidanceTrace>)>,
    timings: Vec<StageTiming>,
}

fn run_seed(cfg: &ExperimentConfig, arms: &[Arm], seed: u64) -> SeedOutcome {
    let failed = |e: &HarnessError| -> SeedOutcome {
        SeedOutcome {
            cells: arms
                .iter()
                .flat_map(|a| {
                    cfg.ratios.iter().map(move |&ratio| CellResult {
                        arm: a.name.clone(),
                        mode: a.mode,
                        ratio,
                        seed,
                        accuracy: None,
                        synthetic: 0,
                        error: Some(e.to_string()),
                    })
                })
                .collect(),
            traces: Vec::new(),
            timings: Vec::new(),
        }
    };
    let models = match prepare_seed(cfg, seed, arms) {
        Ok(m) => m,
        Err(e) => return failed(&e),
    };
    let mut timings: Vec<StageTiming> = models
        .timings
        .iter()
        .map(|(stage, seconds)| StageTiming {
            seed,
            stage: stage.clone(),
            seconds: *seconds,
        })
        .collect();
    let d = &models.dataset;
    let mut pools: Vec<((GuidanceConfig, bool), std::result::Result<Augmentation, String>)> = Vec::new();
    let mut cells = Vec::new();
    let mut traces = Vec::new();
    for arm in arms {
        let start = Instant::now();
        let pool = match arm.effective() {
            None => Ok(Augmentation::default()),
            Some(key) => match pools.iter().find(|(k, _)| *k == key) {
                Some((_, p)) => p.clone(),
                None => {
                    let p = augment_seed(cfg, &models, &arm.guidance, arm.mode, seed).map_err(|e| e.to_string());
                    pools.push((key, p.clone()));
                    timings.push(StageTiming {
                        seed,
                        stage: format!("augment:{}", arm.name),
                        seconds: start.elapsed().as_secs_f64(),
                    });
                    p
                }
            },
        };
        let pool = match pool {
            Ok(p) => p,
            Err(e) => {
                for &ratio in &cfg.ratios {
                    cells.push(CellResult {
                        arm: arm.name.clone(),
                        mode: arm.mode,
                        ratio,
                        seed,
                        accuracy: None,
                        synthetic: 0,
                        error: Some(e.clone()),
                    });
                }
                continue;
            }
        };
        let start = Instant::now();
        for &ratio in &cfg.ratios {
            // the real-only baseline has a single meaningful ratio
            let ratio_used = if arm.mode == GuidanceMode::None { 0.0 } else { ratio };
            let cell = mixed_accuracy(cfg, d, &models.train, &pool.samples, ratio_used, seed);
            cells.push(match cell {
                Ok((acc, synthetic)) => CellResult {
                    arm: arm.name.clone(),
                    mode: arm.mode,
                    ratio,
                    seed,
                    accuracy: Some(acc),
                    synthetic,
                    error: None,
                },
                Err(e) => CellResult {
                    arm: arm.name.clone(),
                    mode: arm.mode,
                    ratio,
                    seed,
                    accuracy: None,
                    synthetic: 0,
                    error: Some(e.to_string()),
                },
            });
        }
        timings.push(StageTiming {
            seed,
            stage: format!("downstream:{}", arm.name),
            seconds: start.elapsed().as_secs_f64(),
        });
        traces.push((arm.name.clone(), pool.traces));
    }
    info!("seed {seed} done");
    SeedOutcome { cells, traces, timings }
}

/// Runs every (arm, ratio, seed) cell. Seeds run in parallel on up to
/// `cfg.jobs` threads; a failing stage marks its cells and the report is
/// still produced.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let arms = cfg.arms();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs.max(1))
        .build()
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let outcomes: Vec<SeedOutcome> = pool.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&seed| run_seed(cfg, &arms, seed))
            .collect()
    });

    let mut report = ExperimentReport {
        arms: arms.clone(),
        ratios: cfg.ratios.clone(),
        seeds: cfg.seeds.clone(),
        ..ExperimentReport::default()
    };
    for o in outcomes {
        report.cells.extend(o.cells);
        report.timings.extend(o.timings);
        for (arm, tr) in o.traces {
            report.traces.entry(arm).or_default().extend(tr);
        }
    }
    for arm in &arms {
        for &ratio in &cfg.ratios {
            let accs: Vec<f64> = report
                .cells
                .iter()
                .filter(|c| c.arm == arm.name && c.ratio == ratio)
                .filter_map(|c| c.accuracy)
                .collect();
            report.medians.push(MedianRow {
                arm: arm.name.clone(),
                mode: arm.mode,
                ratio,
                median: median(&accs),
                seeds: accs.len(),
            });
        }
        if let Some(tr) = report.traces.get(&arm.name) {
            if !tr.is_empty() {
                report
                    .averaged_traces
                    .push(average_traces(&arm.name, arm.guidance.n_s, tr));
            }
        }
    }
    Ok(report)
}

/// Renders a noise-free image of `class` and, for the hard variant, adds
/// heavy Gaussian pixel noise; both are used as contour sources for probe
/// samples whose traces can be compared.
pub fn probe_image(class: usize, style: usize, noise: f64, mark_depth: u8, seed: u64) -> GrayImage {
    use rand_distr::{Distribution, Normal};
    let p = crate::synthbench::RenderParams {
        class,
        style,
        dx: 0,
        dy: 0,
        fg_jitter: 0,
        bg_jitter: 0,
        mark: true,
    };
    let img = crate::synthbench::render(&p, mark_depth);
    if noise <= 0.0 {
        return img;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = Normal::new(0.0, noise).expect("finite std");
    let px = img
        .pixels()
        .iter()
        .map(|&v| (v as f64 + n.sample(&mut rng)).round().clamp(0.0, 255.0) as u8)
        .collect();
    GrayImage::new(SIDE, SIDE, px).expect("same size")
}

/// Traces of one guided sample per source image, all sharing `seed`.
pub fn probe_traces(
    models: &SamplerModels<'_>,
    guidance: &GuidanceConfig,
    schedule: &NoiseSchedule,
    sources: &[(GrayImage, Conditioning, usize)],
    contour: &ContourParams,
    seed: u64,
) -> Result<Vec<GuidanceTrace>> {
    let requests = sources
        .iter()
        .enumerate()
        .map(|(k, (img, cond, class))| {
            Ok(SampleRequest {
                cond: *cond,
                contour: Some(canny(img, contour.canny_low, contour.canny_high)?),
                target_class: *class,
                seed,
                sample_id: k,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(higfa_sample_batch(models, &requests, guidance, schedule)?
        .into_iter()
        .map(|o| o.trace)
        .collect())
}
