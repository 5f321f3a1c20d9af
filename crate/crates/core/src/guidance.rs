//! Text (CFG), contour and classifier guidance combined into one noise
//! prediction per step, with the two-phase confidence-driven schedule.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contour::{ContourError, EdgeMap, GrayImage};
use crate::diffusion::{ddim_step, DiffusionError, DiffusionState, NoiseSchedule};
use crate::models::{Classifier, Conditioning, Decoder, Denoiser, ModelError};
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum GuidanceError {
    #[error("invalid guidance config: {0}")]
    Config(String),
    #[error("probability {0} outside [0,1]")]
    Probability(f64),
    #[error("class {class} out of range for {classes} classes")]
    UnknownClass { class: usize, classes: usize },
    #[error("non-finite classifier gradient at timestep {t}")]
    NonFiniteGradient { t: usize },
    #[error("step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<GuidanceError>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Contour(#[from] ContourError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub s_cfg_t: f64,
    pub s_ctl_t: f64,
    pub s_cls_ns: f64,
    /// Warm-up length in inference steps.
    pub n_s: usize,
    pub sigma_t: f64,
    pub confidence_floor: f64,
    pub confidence_ceiling: f64,
    /// `false` keeps all three scales at their initial values for the whole
    /// dynamic phase (the non-adaptive baseline).
    pub adaptive: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            s_cfg_t: 7.5,
            s_ctl_t: 1.0,
            s_cls_ns: 5.0,
            n_s: 20,
            sigma_t: 1.0,
            confidence_floor: 1e-6,
            confidence_ceiling: 1.0 - 1e-6,
            adaptive: true,
        }
    }
}

impl GuidanceConfig {
    /// Whether sampling consults the classifier: for its gradient when
    /// `s_cls_ns > 0`, and for the confidence that drives the adaptive scales.
    pub fn uses_classifier(&self, inference_steps: usize) -> bool {
        self.n_s < inference_steps && (self.s_cls_ns > 0.0 || self.adaptive)
    }

    pub fn validate(&self, inference_steps: usize) -> Result<(), GuidanceError> {
        let bad = |m: String| Err(GuidanceError::Config(m));
        for (name, v) in [
            ("s_cfg_t", self.s_cfg_t),
            ("s_ctl_t", self.s_ctl_t),
            ("s_cls_ns", self.s_cls_ns),
            ("sigma_t", self.sigma_t),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be finite and >= 0"));
            }
        }
        if self.n_s > inference_steps {
            return bad(format!("n_s = {} exceeds {inference_steps} steps", self.n_s));
        }
        let (lo, hi) = (self.confidence_floor, self.confidence_ceiling);
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return bad(format!("need 0 < floor < ceiling < 1, got {lo}, {hi}"));
        }
        Ok(())
    }

    fn clamp(&self, p: f64) -> f64 {
        p.clamp(self.confidence_floor, self.confidence_ceiling)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Dynamic,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Warmup => "warmup",
            Self::Dynamic => "dynamic",
        }
    }
}

impl std::str::FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "warmup" => Ok(Self::Warmup),
            "dynamic" => Ok(Self::Dynamic),
            other => Err(format!("unknown phase {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub t: usize,
    pub phase: Phase,
    pub s_cfg: f64,
    pub s_ctl: f64,
    pub s_cls: f64,
    /// Clamped classifier confidence, when the classifier ran at this step.
    pub confidence: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GuidanceTrace {
    pub sample_id: usize,
    pub records: Vec<TraceRecord>,
}

/// Decimal rendering with 9 significant digits.
pub fn format_sig9(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".into() } else { v.to_string() };
    }
    let magnitude = v.abs().log10().floor() as i32;
    let decimals = (8 - magnitude).max(0) as usize;
    format!("{v:.decimals$}")
}

pub const TRACE_CSV_HEADER: &str = "step,t,phase,s_cfg,s_ctl,s_cls,confidence";

impl GuidanceTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(TRACE_CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.step,
                r.t,
                r.phase.as_str(),
                format_sig9(r.s_cfg),
                format_sig9(r.s_ctl),
                format_sig9(r.s_cls),
                r.confidence.map(format_sig9).unwrap_or_default()
            );
        }
        out
    }

    /// Parses the output of [`GuidanceTrace::to_csv`]. Values come back
    /// rounded to 9 significant digits.
    pub fn from_csv(sample_id: usize, text: &str) -> Result<Self, GuidanceError> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(TRACE_CSV_HEADER) {
            return Err(GuidanceError::Config("trace csv: missing header".into()));
        }
        let bad = |n: usize, what: &str| GuidanceError::Config(format!("trace csv line {}: {what}", n + 2));
        let mut records = Vec::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.trim().split(',').collect();
            if f.len() != 7 {
                return Err(bad(n, "expected 7 fields"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(n, &e.to_string()));
            records.push(TraceRecord {
                step: f[0].parse().map_err(|_| bad(n, "step"))?,
                t: f[1].parse().map_err(|_| bad(n, "t"))?,
                phase: f[2].parse().map_err(|e: String| bad(n, &e))?,
                s_cfg: num(f[3])?,
                s_ctl: num(f[4])?,
                s_cls: num(f[5])?,
                confidence: if f[6].is_empty() { None } else { Some(num(f[6])?) },
            });
        }
        Ok(Self { sample_id, records })
    }

    pub fn classifier_evaluations(&self) -> usize {
        self.records.iter().filter(|r| r.confidence.is_some()).count()
    }

    pub fn cumulative_s_cls(&self) -> f64 {
        self.records.iter().map(|r| r.s_cls).sum()
    }

    pub fn dynamic_records(&self) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter().filter(|r| r.phase == Phase::Dynamic)
    }
}

/// `(1−s)·eps_uncond + s·eps_cond`, i.e. `eps_uncond + s·(eps_cond − eps_uncond)`
/// arranged so that `s = 1` and `s = 0` return an input exactly.
pub fn cfg_combine(eps_uncond: &Tensor, eps_cond: &Tensor, s_cfg: f64) -> Result<Tensor, GuidanceError> {
    if eps_uncond.shape() != eps_cond.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "cfg_combine",
            left: eps_uncond.shape().to_vec(),
            right: eps_cond.shape().to_vec(),
        }
        .into());
    }
    let data = eps_uncond
        .data()
        .iter()
        .zip(eps_cond.data())
        .map(|(&u, &c)| combine(u, c, s_cfg))
        .collect();
    Ok(Tensor::new(eps_uncond.shape(), data)?)
}

fn combine(u: f64, c: f64, s: f64) -> f64 {
    (1.0 - s) * u + s * c
}

/// Gradient of `log p(target | D(x̂₀))` with respect to `x_t`, one row per
/// sample, treating `eps_base` as constant inside the x̂₀ prediction. Rows
/// whose probability falls outside the clamp get a zero gradient. Returns the
/// gradient and the clamped probabilities.
#[allow(clippy::too_many_arguments)]
pub fn classifier_log_prob_grad(
    x_t: &Tensor,
    alpha_bar: f64,
    eps_base: &Tensor,
    targets: &[usize],
    classifier: &Classifier,
    decoder: &Decoder,
    config: &GuidanceConfig,
    need_grad: bool,
) -> Result<(Option<Tensor>, Vec<f64>), GuidanceError> {
    let rows = x_t.rows();
    let c = classifier.classes();
    if let Some(&bad) = targets.iter().find(|&&y| y >= c) {
        return Err(GuidanceError::UnknownClass { class: bad, classes: c });
    }
    if targets.len() != rows || alpha_bar <= 0.0 {
        return Err(GuidanceError::Config(format!(
            "{rows} rows, {} targets, alpha_bar {alpha_bar}",
            targets.len()
        )));
    }
    let tape = Tape::new();
    let x = if need_grad {
        tape.var(x_t.clone())
    } else {
        tape.constant(x_t.clone())
    };
    let noise = tape.constant(eps_base.scale((1.0 - alpha_bar).sqrt()));
    let x0 = x.sub(noise)?.scale(1.0 / alpha_bar.sqrt())?;
    let decoded = decoder.decode_var(&tape, x0)?;
    let lp = classifier.log_probs_var(&tape, decoded)?;
    let (probs, mask) = {
        let v = lp.value();
        let mut mask = Tensor::zeros(&[rows, c]);
        let mut probs = Vec::with_capacity(rows);
        for (i, &y) in targets.iter().enumerate() {
            let p = v.row(i)[y].exp();
            let pc = config.clamp(p);
            if pc == p {
                mask.row_mut(i)[y] = 1.0;
            }
            probs.push(pc);
        }
        (probs, mask)
    };
    if !need_grad {
        return Ok((None, probs));
    }
    let objective = lp.mul(tape.constant(mask))?.sum()?;
    let grads = tape.backward(objective)?;
    let g = grads.get(x).expect("x is tracked").clone();
    Ok((Some(g), probs))
}

/// Classifier-guided noise prediction for one sample:
/// `eps_base − s_cls·σ_t·∇_{x_t} log p(y | D(x̂₀))`, plus the (clamped)
/// confidence. `s_cls = 0` returns `eps_base` untouched.
#[allow(clippy::too_many_arguments)]
pub fn classifier_grad_term(
    x_t: &Tensor,
    t: usize,
    eps_base: &Tensor,
    target_class: usize,
    classifier: &Classifier,
    decoder: &Decoder,
    s_cls: f64,
    config: &GuidanceConfig,
    schedule: &NoiseSchedule,
) -> Result<(Tensor, f64), GuidanceError> {
    let x = x_t.clone().reshape(&[1, x_t.len()])?;
    let e = eps_base.clone().reshape(&[1, eps_base.len()])?;
    let ab = schedule.alpha_bar(t)?;
    let (g, p) = classifier_log_prob_grad(&x, ab, &e, &[target_class], classifier, decoder, config, true)?;
    let g = g.expect("gradient requested");
    if !g.is_finite() {
        return Err(GuidanceError::NonFiniteGradient { t });
    }
    if s_cls == 0.0 {
        return Ok((eps_base.clone(), p[0]));
    }
    let k = s_cls * config.sigma_t;
    let data = eps_base.data().iter().zip(g.data()).map(|(e, g)| e - k * g).collect();
    Ok((Tensor::new(eps_base.shape(), data)?, p[0]))
}

/// Effective `(s_cfg, s_ctl, s_cls)` for a dynamic step: text and contour
/// follow the previous confidence, the classifier scale the current one.
pub fn dynamic_update(
    config: &GuidanceConfig,
    p_prev: f64,
    p_curr: f64,
) -> Result<(f64, f64, f64), GuidanceError> {
    for p in [p_prev, p_curr] {
        if !(0.0..=1.0).contains(&p) {
            return Err(GuidanceError::Probability(p));
        }
    }
    if !config.adaptive {
        return Ok((config.s_cfg_t, config.s_ctl_t, config.s_cls_ns));
    }
    Ok((
        config.s_cfg_t * p_prev,
        config.s_ctl_t * p_prev,
        config.s_cls_ns * (1.0 - p_curr),
    ))
}

/// Read-only models used by the sampler. Without a classifier the sampler
/// runs with confidence fixed at 1.
#[derive(Debug, Clone, Copy)]
pub struct SamplerModels<'a> {
    pub denoiser: &'a Denoiser,
    pub classifier: Option<&'a Classifier>,
    pub decoder: &'a Decoder,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRequest {
    pub cond: Conditioning,
    pub contour: Option<EdgeMap>,
    pub target_class: usize,
    pub seed: u64,
    pub sample_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    /// `[1, dim]` row clamped to `[-1, 1]`.
    pub x0: Tensor,
    pub trace: GuidanceTrace,
}

impl SampleOutput {
    pub fn image(&self, width: usize, height: usize) -> Result<GrayImage, GuidanceError> {
        Ok(GrayImage::from_unit_range(width, height, self.x0.data())?)
    }
}

/// Seeded standard-normal starting noise for one sample.
pub fn initial_noise(seed: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Runs the two-phase guided DDIM sampler for a batch of independent
/// requests. Every row evolves exactly as it would alone.
///
/// Warm-up (first `n_s` steps): fixed text and contour scales, no classifier.
/// The last warm-up step scores x̂₀ to seed the confidence. Dynamic phase:
/// text/contour scales use the previous confidence, then the classifier
/// term is applied with `s_cls_ns·(1 − p)` from this step's confidence.
pub fn higfa_sample_batch(
    models: &SamplerModels<'_>,
    requests: &[SampleRequest],
    config: &GuidanceConfig,
    schedule: &NoiseSchedule,
) -> Result<Vec<SampleOutput>, GuidanceError> {
    let steps = schedule.inference_steps();
    config.validate(steps)?;
    let b = requests.len();
    if b == 0 {
        return Ok(Vec::new());
    }
    let dcfg = models.denoiser.config();
    let dim = dcfg.image_dim;
    let classifier = match (config.uses_classifier(steps), models.classifier) {
        (true, Some(c)) => Some(c),
        (true, None) => {
            return Err(GuidanceError::Config(
                "guidance config needs a classifier".into(),
            ))
        }
        (false, _) => None,
    };

    let mut x = Vec::with_capacity(b * dim);
    let mut edges = Vec::with_capacity(b * dim);
    let mut has_contour = Vec::with_capacity(b);
    for r in requests {
        x.extend(initial_noise(r.seed, dim));
        match &r.contour {
            Some(em) => {
                if em.bits().len() != dim {
                    return Err(GuidanceError::Config(format!(
                        "contour has {} pixels, model expects {dim}",
                        em.bits().len()
                    )));
                }
                edges.extend(em.bits().iter().map(|&v| v as f64));
                has_contour.push(true);
            }
            None => {
                edges.extend(std::iter::repeat(0.0).take(dim));
                has_contour.push(false);
            }
        }
    }
    let residual = if has_contour.iter().any(|&h| h) {
        Some(models.denoiser.contour_residual(&Tensor::new(&[b, dim], edges)?)?)
    } else {
        None
    };
    let cond: Vec<Conditioning> = requests.iter().map(|r| r.cond).collect();
    let null = vec![Conditioning::null(); b];
    let targets: Vec<usize> = requests.iter().map(|r| r.target_class).collect();

    let mut state = DiffusionState::new(Tensor::new(&[b, dim], x)?);
    let mut p_prev = vec![1.0; b];
    let mut traces: Vec<GuidanceTrace> = requests
        .iter()
        .map(|r| GuidanceTrace {
            sample_id: r.sample_id,
            records: Vec::with_capacity(steps),
        })
        .collect();

    for step in 0..steps {
        let at_step = |e: GuidanceError| GuidanceError::Step {
            step,
            source: Box::new(e),
        };
        let t = schedule.step_map()[step];
        let dynamic = step >= config.n_s;
        let mut s_cfg = vec![config.s_cfg_t; b];
        let mut s_ctl = vec![config.s_ctl_t; b];
        if dynamic {
            for i in 0..b {
                let (c, l, _) = dynamic_update(config, p_prev[i], p_prev[i]).map_err(at_step)?;
                s_cfg[i] = c;
                s_ctl[i] = l;
            }
        }
        let s_ctl_rows: Vec<f64> = s_ctl
            .iter()
            .zip(&has_contour)
            .map(|(&s, &h)| if h { s } else { 0.0 })
            .collect();
        let ts = vec![t; b];
        let eps_c = models
            .denoiser
            .denoise_batch(&state.x_t, &ts, &cond, residual.as_ref(), &s_ctl_rows)
            .map_err(|e| at_step(e.into()))?;
        let eps_u = models
            .denoiser
            .denoise_batch(&state.x_t, &ts, &null, residual.as_ref(), &s_ctl_rows)
            .map_err(|e| at_step(e.into()))?;
        let mut eps = eps_u.clone();
        for i in 0..b {
            let (u, c) = (eps_u.row(i), eps_c.row(i));
            for (o, (&uv, &cv)) in eps.row_mut(i).iter_mut().zip(u.iter().zip(c)) {
                *o = combine(uv, cv, s_cfg[i]);
            }
        }

        let mut s_cls = vec![0.0; b];
        let mut confidence = vec![None; b];
        if let Some(clf) = classifier {
            let ab = schedule.alpha_bar(t)?;
            if dynamic {
                let (g, p) = classifier_log_prob_grad(
                    &state.x_t, ab, &eps, &targets, clf, models.decoder, config, true,
                )
                .map_err(at_step)?;
                let g = g.expect("gradient requested");
                if !g.is_finite() {
                    return Err(at_step(GuidanceError::NonFiniteGradient { t }));
                }
                for i in 0..b {
                    let (_, _, sc) = dynamic_update(config, p_prev[i], p[i]).map_err(at_step)?;
                    s_cls[i] = sc;
                    confidence[i] = Some(p[i]);
                    p_prev[i] = p[i];
                    if sc != 0.0 {
                        let k = sc * config.sigma_t;
                        for (e, gv) in eps.row_mut(i).iter_mut().zip(g.row(i)) {
                            *e -= k * gv;
                        }
                    }
                }
            } else if step + 1 == config.n_s {
                let (_, p) = classifier_log_prob_grad(
                    &state.x_t, ab, &eps, &targets, clf, models.decoder, config, false,
                )
                .map_err(at_step)?;
                for i in 0..b {
                    confidence[i] = Some(p[i]);
                    p_prev[i] = p[i];
                }
            }
        }

        for (i, trace) in traces.iter_mut().enumerate() {
            trace.records.push(TraceRecord {
                step,
                t,
                phase: if dynamic { Phase::Dynamic } else { Phase::Warmup },
                s_cfg: s_cfg[i],
                s_ctl: s_ctl[i],
                s_cls: s_cls[i],
                confidence: confidence[i],
            });
        }
        state = ddim_step(&state, &eps, schedule).map_err(|e| at_step(e.into()))?;
    }

    let x0 = state.x_t.map(|v| v.clamp(-1.0, 1.0));
    Ok(traces
        .into_iter()
        .enumerate()
        .map(|(i, trace)| SampleOutput {
            x0: Tensor::new(&[1, dim], x0.row(i).to_vec()).expect("row length"),
            trace,
        })
        .collect())
}

/// Single-sample form of [`higfa_sample_batch`].
#[allow(clippy::too_many_arguments)]
pub fn higfa_sample(
    models: &SamplerModels<'_>,
    text_cond: Conditioning,
    contour: Option<&EdgeMap>,
    target_class: usize,
    config: &GuidanceConfig,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<SampleOutput, GuidanceError> {
    let req = SampleRequest {
        cond: text_cond,
        contour: contour.cloned(),
        target_class,
        seed,
        sample_id: 0,
    };
    Ok(higfa_sample_batch(models, &[req], config, schedule)?
        .pop()
        .expect("one request, one output"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ClassifierConfig, DenoiserConfig};
    use proptest::prelude::*;

    #[test]
    fn cfg_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let u = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let c = Tensor::randn(&[4, 5], 1.0, &mut rng);
        assert_eq!(cfg_combine(&u, &c, 1.0).unwrap().data(), c.data());
        assert_eq!(cfg_combine(&u, &c, 0.0).unwrap().data(), u.data());
        let s = cfg_combine(&Tensor::scalar(0.2), &Tensor::scalar(0.4), 7.5).unwrap();
        assert!((s.item().unwrap() - 1.7).abs() < 1e-15);
        assert!(cfg_combine(&u, &Tensor::zeros(&[5]), 1.0).is_err());
    }

    #[test]
    fn dynamic_update_examples() {
        let c = GuidanceConfig::default();
        assert_eq!(dynamic_update(&c, 1.0, 1.0).unwrap(), (7.5, 1.0, 0.0));
        assert_eq!(dynamic_update(&c, 0.0, 0.0).unwrap(), (0.0, 0.0, 5.0));
        let (a, b, s) = dynamic_update(&c, 0.6, 0.2).unwrap();
        assert!((a - 4.5).abs() < 1e-12 && (b - 0.6).abs() < 1e-12 && (s - 4.0).abs() < 1e-12);
        assert!(dynamic_update(&c, 1.2, 0.5).is_err());
        assert!(dynamic_update(&c, 0.5, -0.1).is_err());
        let fixed = GuidanceConfig { adaptive: false, ..c };
        assert_eq!(dynamic_update(&fixed, 0.1, 0.9).unwrap(), (7.5, 1.0, 5.0));
    }

    #[test]
    fn config_validation() {
        let ok = GuidanceConfig::default();
        assert!(ok.validate(30).is_ok());
        assert!(GuidanceConfig { n_s: 31, ..ok.clone() }.validate(30).is_err());
        assert!(GuidanceConfig { s_cls_ns: -1.0, ..ok.clone() }.validate(30).is_err());
        assert!(GuidanceConfig { confidence_floor: 0.0, ..ok }.validate(30).is_err());
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(format_sig9(7.5), "7.50000000");
        assert_eq!(format_sig9(0.123456789123), "0.123456789");
        assert_eq!(format_sig9(999.0), "999.000000");
        assert_eq!(format_sig9(0.0), "0");
        assert_eq!(format_sig9(-2.5e-7), "-0.000000250000000");
    }

    fn tiny_models(seed: u64) -> (Denoiser, Classifier) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Denoiser::new(
            DenoiserConfig {
                image_dim: 16,
                hidden: 10,
                time_dim: 8,
                text_classes: 2,
                styles: 2,
            },
            &mut rng,
        );
        let c = Classifier::new(
            ClassifierConfig {
                input_dim: 16,
                hidden: 6,
                classes: 4,
            },
            &mut rng,
        );
        (d, c)
    }

    fn short_schedule() -> NoiseSchedule {
        NoiseSchedule::new(1000, 1e-4, 0.02, 10).unwrap()
    }

    #[test]
    fn uniform_classifier_gives_zero_gradient() {
        let c = Classifier::zeros(ClassifierConfig {
            input_dim: 16,
            hidden: 6,
            classes: 4,
        });
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[16], 1.0, &mut rng);
        let e = Tensor::randn(&[16], 1.0, &mut rng);
        let s = NoiseSchedule::reference();
        let cfg = GuidanceConfig::default();
        let (out, p) = classifier_grad_term(&x, 500, &e, 2, &c, &Decoder::Identity, 5.0, &cfg, &s).unwrap();
        assert!(out.max_abs_diff(&e) < 1e-12);
        assert!((p - 0.25).abs() < 1e-15);
        let (same, _) = classifier_grad_term(&x, 500, &e, 2, &c, &Decoder::Identity, 0.0, &cfg, &s).unwrap();
        assert_eq!(same, e);
        assert!(classifier_grad_term(&x, 500, &e, 4, &c, &Decoder::Identity, 1.0, &cfg, &s).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (_, c) = tiny_models(2);
        let s = NoiseSchedule::reference();
        let cfg = GuidanceConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[1, 16], 1.0, &mut rng);
        let e = Tensor::randn(&[1, 16], 1.0, &mut rng);
        let t = 400;
        let ab = s.alpha_bar(t).unwrap();
        let dec = Decoder::fit_linear(&Tensor::randn(&[30, 16], 1.0, &mut rng), 8).unwrap();
        for decoder in [Decoder::Identity, dec] {
            let (g, _) = classifier_log_prob_grad(&x, ab, &e, &[1], &c, &decoder, &cfg, true).unwrap();
            let g = g.unwrap();
            let logp = |xv: &Tensor| {
                let (_, p) = classifier_log_prob_grad(xv, ab, &e, &[1], &c, &decoder, &cfg, false).unwrap();
                p[0].ln()
            };
            let h = 1e-5;
            for i in 0..16 {
                let mut up = x.clone();
                up.data_mut()[i] += h;
                let mut dn = x.clone();
                dn.data_mut()[i] -= h;
                let fd = (logp(&up) - logp(&dn)) / (2.0 * h);
                assert!((g.data()[i] - fd).abs() <= 1e-4 * fd.abs().max(1e-4), "{i}");
            }
        }
    }

    fn request(seed: u64, target: usize) -> SampleRequest {
        let mut em = EdgeMap::empty(4, 4);
        em.set(1, 2, true);
        em.set(2, 2, true);
        SampleRequest {
            cond: Conditioning::new(target / 2, 1),
            contour: Some(em),
            target_class: target,
            seed,
            sample_id: seed as usize,
        }
    }

    #[test]
    fn trace_obeys_the_schedule() {
        let (d, c) = tiny_models(4);
        let models = SamplerModels {
            denoiser: &d,
            classifier: Some(&c),
            decoder: &Decoder::Identity,
        };
        let cfg = GuidanceConfig { n_s: 6, ..GuidanceConfig::default() };
        let out = higfa_sample_batch(&models, &[request(1, 3)], &cfg, &short_schedule()).unwrap();
        let recs = &out[0].trace.records;
        assert_eq!(recs.len(), 10);
        for r in &recs[..6] {
            assert_eq!((r.phase, r.s_cfg, r.s_ctl, r.s_cls), (Phase::Warmup, 7.5, 1.0, 0.0));
        }
        assert!(recs[5].confidence.is_some());
        assert!(recs[..5].iter().all(|r| r.confidence.is_none()));
        for w in recs[5..].windows(2) {
            let (prev, cur) = (&w[0], &w[1]);
            let (pp, pc) = (prev.confidence.unwrap(), cur.confidence.unwrap());
            assert_eq!(cur.phase, Phase::Dynamic);
            assert!((cur.s_cls - 5.0 * (1.0 - pc)).abs() < 1e-12);
            assert!((cur.s_cfg - 7.5 * pp).abs() < 1e-12);
            assert!((cur.s_ctl - pp).abs() < 1e-12);
            assert_eq!(cur.s_cls + 5.0 * pc, 5.0);
        }
        let csv = out[0].trace.to_csv();
        assert!(csv.starts_with("step,t,phase,s_cfg,s_ctl,s_cls,confidence\n0,999,warmup,7.50000000,1.00000000,0,\n"));
        assert_eq!(csv.lines().count(), 11);
        let back = GuidanceTrace::from_csv(out[0].trace.sample_id, &csv).unwrap();
        assert_eq!(back.to_csv(), csv);
        assert_eq!(back.records.len(), recs.len());
        assert!(GuidanceTrace::from_csv(0, "step,t\n").is_err());
    }

    #[test]
    fn all_warmup_never_calls_the_classifier() {
        let (d, _) = tiny_models(5);
        let models = SamplerModels {
            denoiser: &d,
            classifier: None,
            decoder: &Decoder::Identity,
        };
        let cfg = GuidanceConfig { n_s: 10, ..GuidanceConfig::default() };
        let out = higfa_sample_batch(&models, &[request(2, 0)], &cfg, &short_schedule()).unwrap();
        assert_eq!(out[0].trace.dynamic_records().count(), 0);
        assert_eq!(out[0].trace.classifier_evaluations(), 0);
    }

    #[test]
    fn zero_classifier_scale_equals_classifier_free_sampling() {
        let (d, c) = tiny_models(6);
        let schedule = short_schedule();
        let cfg = GuidanceConfig { s_cls_ns: 0.0, n_s: 4, adaptive: false, ..GuidanceConfig::default() };
        let with = SamplerModels { denoiser: &d, classifier: Some(&c), decoder: &Decoder::Identity };
        let without = SamplerModels { classifier: None, ..with };
        let a = higfa_sample_batch(&with, &[request(3, 1)], &cfg, &schedule).unwrap();
        let b = higfa_sample_batch(&without, &[request(3, 1)], &cfg, &schedule).unwrap();
        assert_eq!(a[0].x0, b[0].x0);
        assert_eq!(a[0].trace.classifier_evaluations(), 0);

        // adaptive scales still follow the confidence
        let adaptive = GuidanceConfig { adaptive: true, ..cfg.clone() };
        assert!(higfa_sample_batch(&without, &[request(3, 1)], &adaptive, &schedule).is_err());
        let m = higfa_sample_batch(&with, &[request(3, 1)], &adaptive, &schedule).unwrap();
        for r in m[0].trace.dynamic_records() {
            assert_eq!(r.s_cls, 0.0);
            assert!(r.confidence.is_some() && r.s_cfg < 7.5);
        }

        // plain CFG + contour DDIM written out by hand
        let req = request(3, 1);
        let mut state = DiffusionState::new(Tensor::new(&[1, 16], initial_noise(3, 16)).unwrap());
        let e: Vec<f64> = req.contour.as_ref().unwrap().bits().iter().map(|&v| v as f64).collect();
        let r = d.contour_residual(&Tensor::new(&[1, 16], e).unwrap()).unwrap();
        for step in 0..schedule.inference_steps() {
            let t = schedule.step_map()[step];
            let ec = d.denoise_batch(&state.x_t, &[t], &[req.cond], Some(&r), &[1.0]).unwrap();
            let eu = d.denoise_batch(&state.x_t, &[t], &[Conditioning::null()], Some(&r), &[1.0]).unwrap();
            state = ddim_step(&state, &cfg_combine(&eu, &ec, 7.5).unwrap(), &schedule).unwrap();
        }
        assert_eq!(a[0].x0, state.x_t.map(|v| v.clamp(-1.0, 1.0)));
    }

    #[test]
    fn batched_rows_equal_single_runs_and_repeat() {
        let (d, c) = tiny_models(7);
        let models = SamplerModels { denoiser: &d, classifier: Some(&c), decoder: &Decoder::Identity };
        let cfg = GuidanceConfig { n_s: 5, s_cls_ns: 20.0, ..GuidanceConfig::default() };
        let schedule = short_schedule();
        let reqs = [request(10, 0), request(11, 3), request(12, 2)];
        let batch = higfa_sample_batch(&models, &reqs, &cfg, &schedule).unwrap();
        for (r, b) in reqs.iter().zip(&batch) {
            let single = higfa_sample_batch(&models, std::slice::from_ref(r), &cfg, &schedule).unwrap();
            assert_eq!(&single[0], b);
        }
        assert_eq!(higfa_sample_batch(&models, &reqs, &cfg, &schedule).unwrap(), batch);
    }

    #[test]
    fn missing_classifier_is_an_error_when_needed() {
        let (d, _) = tiny_models(8);
        let models = SamplerModels { denoiser: &d, classifier: None, decoder: &Decoder::Identity };
        let cfg = GuidanceConfig { n_s: 5, ..GuidanceConfig::default() };
        assert!(higfa_sample_batch(&models, &[request(1, 0)], &cfg, &short_schedule()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn schedule_invariants_hold_for_any_configuration(
            seed in 0u64..1000,
            target in 0usize..4,
            n_s in 0usize..=10,
            s_cfg in 0.0f64..15.0,
            s_ctl in 0.0f64..2.0,
            s_cls in 0.0f64..25.0,
            adaptive in any::<bool>(),
        ) {
            let (d, c) = tiny_models(seed % 7);
            let models = SamplerModels { denoiser: &d, classifier: Some(&c), decoder: &Decoder::Identity };
            let cfg = GuidanceConfig { n_s, s_cfg_t: s_cfg, s_ctl_t: s_ctl, s_cls_ns: s_cls, adaptive, ..GuidanceConfig::default() };
            let req = [request(seed, target)];
            let out = higfa_sample_batch(&models, &req, &cfg, &short_schedule()).unwrap();
            let recs = &out[0].trace.records;
            prop_assert_eq!(recs.len(), 10);
            for r in recs {
                prop_assert_eq!(r.phase == Phase::Dynamic, r.step >= n_s);
                prop_assert!((0.0..=s_cls).contains(&r.s_cls));
                prop_assert!((0.0..=s_cfg).contains(&r.s_cfg));
                prop_assert!((0.0..=s_ctl).contains(&r.s_ctl));
                if r.phase == Phase::Dynamic && adaptive {
                    let p = r.confidence.unwrap();
                    prop_assert!((r.s_cls + s_cls * p - s_cls).abs() <= 4.0 * f64::EPSILON * s_cls);
                }
            }
            prop_assert_eq!(&higfa_sample_batch(&models, &req, &cfg, &short_schedule()).unwrap(), &out);
        }
    }
}
