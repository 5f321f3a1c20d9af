//! Small, fast versions of the library's exactness properties, runnable
//! from the command line without a test framework.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::contour::{augment_contour, canny, fit_tps, ContourParams, GrayImage, Rigidity};
use crate::diffusion::{ddim_step, DiffusionState, NoiseSchedule};
use crate::guidance::{cfg_combine, classifier_log_prob_grad, higfa_sample, higfa_sample_batch, GuidanceConfig, Phase, SampleRequest, SamplerModels};
use crate::models::{Classifier, ClassifierConfig, Conditioning, Decoder, Denoiser, DenoiserConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type CheckFn = fn(u64) -> Result<String, String>;

const CHECKS: &[(&str, CheckFn)] = &[
    ("ddim_round_trip", ddim_round_trip),
    ("cfg_identities", cfg_identities),
    ("classifier_gradient", classifier_gradient),
    ("scheduler_law", scheduler_law),
    ("batched_equals_single", batched_equals_single),
    ("tps_exactness", tps_exactness),
    ("canny_step_edge", canny_step_edge),
    ("contour_determinism", contour_determinism),
];

pub fn run_selftest(seed: u64) -> Vec<Check> {
    CHECKS
        .iter()
        .map(|&(name, f)| {
            let (passed, detail) = match f(seed) {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            Check { name, passed, detail }
        })
        .collect()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ddim_round_trip(seed: u64) -> Result<String, String> {
    let s = NoiseSchedule::reference();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let x0 = Tensor::randn(&[1, 256], 1.0, &mut rng);
        let eps = Tensor::randn(&[1, 256], 1.0, &mut rng);
        for &t in s.step_map() {
            let xt = s.q_sample(&x0, t, &eps).map_err(|e| e.to_string())?;
            let back = s.predict_x0(&xt, t, &eps).map_err(|e| e.to_string())?;
            let norm = x0.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            let diff = back.sub(&x0).map_err(|e| e.to_string())?;
            worst = worst.max(diff.data().iter().map(|v| v * v).sum::<f64>().sqrt() / norm);
        }
    }
    ensure(worst <= 1e-9, || format!("relative error {worst:e}"))?;
    let eps = Tensor::randn(&[1, 256], 1.0, &mut rng);
    let mut state = DiffusionState::new(Tensor::randn(&[1, 256], 1.0, &mut rng));
    while state.step_index + 1 < s.inference_steps() {
        state = ddim_step(&state, &eps, &s).map_err(|e| e.to_string())?;
    }
    let t = state.timestep(&s).ok_or("no final timestep")?;
    let expect = s.predict_x0(&state.x_t, t, &eps).map_err(|e| e.to_string())?;
    let last = ddim_step(&state, &eps, &s).map_err(|e| e.to_string())?;
    ensure(last.x_t == expect, || "final step is not x̂0".into())?;
    Ok(format!("max relative error {worst:.2e}"))
}

fn cfg_identities(seed: u64) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = Tensor::randn(&[4, 64], 1.0, &mut rng);
    let c = Tensor::randn(&[4, 64], 1.0, &mut rng);
    let one = cfg_combine(&u, &c, 1.0).map_err(|e| e.to_string())?;
    let zero = cfg_combine(&u, &c, 0.0).map_err(|e| e.to_string())?;
    ensure(one == c, || "s=1 differs from eps_cond".into())?;
    ensure(zero == u, || "s=0 differs from eps_uncond".into())?;
    let v = cfg_combine(&Tensor::scalar(0.2), &Tensor::scalar(0.4), 7.5)
        .map_err(|e| e.to_string())?
        .item()
        .unwrap_or(f64::NAN);
    ensure((v - 1.7).abs() <= 1e-15, || format!("scalar case gave {v}"))?;
    Ok("s=1, s=0 bitwise; 0.2,0.4,7.5 -> 1.7".into())
}

fn classifier_gradient(seed: u64) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = Classifier::new(ClassifierConfig::new(4), &mut rng);
    let s = NoiseSchedule::reference();
    let cfg = GuidanceConfig::default();
    let linear = Decoder::fit_linear(&Tensor::randn(&[40, 256], 1.0, &mut rng), 16).map_err(|e| e.to_string())?;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for decoder in [Decoder::Identity, linear] {
        for _ in 0..3 {
            let x = Tensor::randn(&[1, 256], 1.0, &mut rng);
            let e = Tensor::randn(&[1, 256], 1.0, &mut rng);
            let ab = s.alpha_bar(s.step_map()[rng.gen_range(0..30)]).map_err(|e| e.to_string())?;
            let y = rng.gen_range(0..4);
            let logp = |xv: &Tensor| -> Result<f64, String> {
                let (_, p) = classifier_log_prob_grad(xv, ab, &e, &[y], &c, &decoder, &cfg, false)
                    .map_err(|e| e.to_string())?;
                Ok(p[0].ln())
            };
            let (g, _) = classifier_log_prob_grad(&x, ab, &e, &[y], &c, &decoder, &cfg, true).map_err(|e| e.to_string())?;
            let g = g.ok_or("no gradient")?;
            let mut fd = vec![0.0; 256];
            for (i, f) in fd.iter_mut().enumerate() {
                let mut up = x.clone();
                up.data_mut()[i] += h;
                let mut dn = x.clone();
                dn.data_mut()[i] -= h;
                *f = (logp(&up)? - logp(&dn)?) / (2.0 * h);
            }
            let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
            for (a, b) in g.data().iter().zip(&fd) {
                worst = worst.max((a - b).abs() / scale);
            }
        }
    }
    ensure(worst < 1e-4, || format!("max relative error {worst:e}"))?;
    Ok(format!("max relative error {worst:.2e}"))
}

fn tiny_models(seed: u64) -> (Denoiser, Classifier) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Denoiser::new(
        DenoiserConfig {
            image_dim: 64,
            hidden: 16,
            time_dim: 8,
            text_classes: 2,
            styles: 2,
        },
        &mut rng,
    );
    let c = Classifier::new(
        ClassifierConfig {
            input_dim: 64,
            hidden: 8,
            classes: 4,
        },
        &mut rng,
    );
    (d, c)
}

fn scheduler_law(seed: u64) -> Result<String, String> {
    let (d, c) = tiny_models(seed);
    let models = SamplerModels {
        denoiser: &d,
        classifier: Some(&c),
        decoder: &Decoder::Identity,
    };
    let cfg = GuidanceConfig::default();
    let s = NoiseSchedule::reference();
    let out = higfa_sample(&models, Conditioning::new(1, 0), None, 3, &cfg, &s, seed).map_err(|e| e.to_string())?;
    let recs = &out.trace.records;
    ensure(recs.len() == 30, || format!("{} records", recs.len()))?;
    for r in recs.iter().filter(|r| r.phase == Phase::Warmup) {
        ensure((r.s_cfg, r.s_ctl, r.s_cls) == (7.5, 1.0, 0.0), || format!("warm-up step {}", r.step))?;
    }
    let mut p_prev = recs[cfg.n_s - 1].confidence.ok_or("no seed confidence")?;
    for r in recs.iter().filter(|r| r.phase == Phase::Dynamic) {
        let p = r.confidence.ok_or("dynamic record without confidence")?;
        let ok = (r.s_cls - 5.0 * (1.0 - p)).abs() <= 1e-12
            && (r.s_cfg - 7.5 * p_prev).abs() <= 1e-12
            && (r.s_ctl - p_prev).abs() <= 1e-12;
        ensure(ok, || format!("dynamic step {}", r.step))?;
        p_prev = p;
    }
    Ok(format!("{} warm-up, {} dynamic records", cfg.n_s, 30 - cfg.n_s))
}

fn batched_equals_single(seed: u64) -> Result<String, String> {
    let (d, c) = tiny_models(seed ^ 1);
    let models = SamplerModels {
        denoiser: &d,
        classifier: Some(&c),
        decoder: &Decoder::Identity,
    };
    let cfg = GuidanceConfig { n_s: 5, ..GuidanceConfig::default() };
    let s = NoiseSchedule::new(1000, 1e-4, 0.02, 8).map_err(|e| e.to_string())?;
    let requests: Vec<SampleRequest> = (0..3)
        .map(|k| SampleRequest {
            cond: Conditioning::new(k % 2, 1),
            contour: None,
            target_class: k,
            seed: seed.wrapping_add(k as u64),
            sample_id: k,
        })
        .collect();
    let batch = higfa_sample_batch(&models, &requests, &cfg, &s).map_err(|e| e.to_string())?;
    for (req, b) in requests.iter().zip(&batch) {
        let single = higfa_sample_batch(&models, std::slice::from_ref(req), &cfg, &s).map_err(|e| e.to_string())?;
        ensure(single[0].x0 == b.x0 && single[0].trace == b.trace, || format!("sample {}", req.sample_id))?;
    }
    Ok("3 rows bitwise equal".into())
}

fn tps_exactness(seed: u64) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let src: Vec<(f64, f64)> = (0..8).map(|_| (rng.gen_range(0.0..16.0), rng.gen_range(0.0..16.0))).collect();
    let dst: Vec<(f64, f64)> = src
        .iter()
        .map(|&(x, y)| (x + rng.gen_range(-1.0..1.0), y + rng.gen_range(-1.0..1.0)))
        .collect();
    let w = fit_tps(&src, &dst, 0.0).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for (&(x, y), &(u, v)) in src.iter().zip(&dst) {
        let (a, b) = w.apply(x, y);
        worst = worst.max((a - u).abs().max((b - v).abs()));
    }
    ensure(worst < 1e-9, || format!("control residual {worst:e}"))?;
    let affine = |x: f64, y: f64| (1.1 * x - 0.3 * y + 2.0, 0.2 * x + 0.9 * y - 1.0);
    let dst: Vec<_> = src.iter().map(|&(x, y)| affine(x, y)).collect();
    let w = fit_tps(&src, &dst, 0.0).map_err(|e| e.to_string())?;
    let mut worst_affine: f64 = 0.0;
    for _ in 0..200 {
        let (x, y) = (rng.gen_range(-4.0..20.0), rng.gen_range(-4.0..20.0));
        let (a, b) = w.apply(x, y);
        let (u, v) = affine(x, y);
        worst_affine = worst_affine.max((a - u).abs().max((b - v).abs()));
    }
    ensure(worst_affine < 1e-9, || format!("affine error {worst_affine:e}"))?;
    Ok(format!("control residual {worst:.1e}, affine error {worst_affine:.1e}"))
}

fn canny_step_edge(_seed: u64) -> Result<String, String> {
    let img = GrayImage::from_fn(16, 16, |x, _| if x < 8 { 0 } else { 255 });
    let em = canny(&img, 120, 200).map_err(|e| e.to_string())?;
    let px = em.edge_pixels();
    ensure(px.len() == 16, || format!("{} edge pixels", px.len()))?;
    ensure(px.iter().all(|p| p.0 == px[0].0), || "edge is not one column".into())?;
    let mut rows: Vec<usize> = px.iter().map(|p| p.1).collect();
    rows.dedup();
    ensure(rows.len() == 16, || "rows repeat".into())?;
    Ok(format!("one pixel per row in column {}", px[0].0))
}

fn contour_determinism(seed: u64) -> Result<String, String> {
    let img = GrayImage::from_fn(16, 16, |x, y| {
        let (dx, dy) = (x as f64 - 7.5, y as f64 - 7.5);
        if dx * dx + dy * dy < 30.0 {
            220
        } else {
            30
        }
    });
    let params = ContourParams::default();
    let run = || -> Result<Vec<u8>, String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let em = augment_contour(&img, Rigidity::NonRigid, &params, &mut rng).map_err(|e| e.to_string())?;
        Ok(em.to_image().to_pgm())
    };
    let (a, b) = (run()?, run()?);
    ensure(a == b, || "two runs differ".into())?;
    Ok(format!("{} PGM bytes identical", a.len()))
}
