use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::optim::{Optimizer, OptimizerKind};
use super::weights::{read_weights, take_meta, take_tensor, write_weights, NamedTensors};
use super::{check_rows, Conditioning, ModelError, IMAGE_DIM};
use crate::diffusion::NoiseSchedule;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub image_dim: usize,
    pub hidden: usize,
    pub time_dim: usize,
    /// Text classes, excluding the null row.
    pub text_classes: usize,
    /// Styles, excluding the null row.
    pub styles: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            image_dim: IMAGE_DIM,
            hidden: 256,
            time_dim: 32,
            text_classes: 2,
            styles: 4,
        }
    }
}

/// Sinusoidal embedding of training timesteps, one row per entry:
/// `sin(t·f_i)` in the first half and `cos(t·f_i)` in the second, with
/// `f_i = 10000^(−i/half)`.
pub fn time_embedding(t: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0; t.len() * dim];
    for (row, &ti) in data.chunks_mut(dim).zip(t) {
        for i in 0..half {
            let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let (s, c) = (ti as f64 * f).sin_cos();
            row[i] = s;
            row[half + i] = c;
        }
    }
    Tensor::new(&[t.len(), dim], data).expect("length matches")
}

// Parameter order shared by registration, optimisation and serialization.
const WX: usize = 0;
const WT: usize = 1;
const B1: usize = 2;
const TEXT: usize = 3;
const STYLE: usize = 4;
const W2: usize = 5;
const B2: usize = 6;
const W3: usize = 7;
const B3: usize = 8;
const WO: usize = 9;
const BO: usize = 10;
const WC1: usize = 11;
const BC1: usize = 12;
const WC2: usize = 13;
const BC2: usize = 14;
const WS: usize = 15;
const BS: usize = 16;
const NAMES: [&str; 17] = [
    "wx", "wt", "b1", "text_emb", "style_emb", "w2", "b2", "w3", "b3", "wo", "bo", "wc1", "bc1",
    "wc2", "bc2", "ws", "bs",
];

/// ε-prediction MLP. The first pre-activation is
/// `x·Wx + temb·Wt + b1 + E_text[c] + E_style[s] + s_ctl·r`, where the
/// contour residual `r = tanh(e·Wc1 + bc1)·Wc2 + bc2` is computed from the
/// flattened edge map `e`. Two residual tanh blocks of width `hidden` follow,
/// then a linear head, plus a time-gated copy of the input
/// `(temb·ws + bs)·x` that carries the prediction at high noise.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    config: DenoiserConfig,
    params: Vec<Tensor>,
}

impl Denoiser {
    pub fn new<R: Rng + ?Sized>(config: DenoiserConfig, rng: &mut R) -> Self {
        let DenoiserConfig {
            image_dim: d,
            hidden: h,
            time_dim: td,
            text_classes,
            styles,
        } = config;
        let w = |rows: usize, cols: usize, rng: &mut R| {
            Tensor::randn(&[rows, cols], 1.0 / (rows as f64).sqrt(), rng)
        };
        let params = vec![
            w(d, h, rng),
            w(td, h, rng),
            Tensor::zeros(&[h]),
            Tensor::randn(&[text_classes + 1, h], 0.5, rng),
            Tensor::randn(&[styles + 1, h], 0.5, rng),
            w(h, h, rng),
            Tensor::zeros(&[h]),
            w(h, h, rng),
            Tensor::zeros(&[h]),
            w(h, d, rng),
            Tensor::zeros(&[d]),
            w(d, h, rng),
            Tensor::zeros(&[h]),
            // zero-initialised output so an untrained branch injects nothing
            Tensor::zeros(&[h, h]),
            Tensor::zeros(&[h]),
            Tensor::zeros(&[td, 1]),
            Tensor::full(&[1], 0.5),
        ];
        Self { config, params }
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    fn register<'t>(&self, tape: &'t Tape, track: bool) -> Vec<Var<'t>> {
        self.params
            .iter()
            .map(|p| {
                if track {
                    tape.var(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }

    fn one_hot(&self, cond: &[Conditioning]) -> Result<(Tensor, Tensor), ModelError> {
        let (nt, ns) = (self.config.text_classes, self.config.styles);
        let mut text = Tensor::zeros(&[cond.len(), nt + 1]);
        let mut style = Tensor::zeros(&[cond.len(), ns + 1]);
        for (i, c) in cond.iter().enumerate() {
            let ci = c.class_id.unwrap_or(nt);
            if ci > nt || (c.class_id.is_some() && ci == nt) {
                return Err(ModelError::UnknownClass {
                    class: ci,
                    classes: nt,
                });
            }
            let si = c.style_id.unwrap_or(ns);
            if si > ns || (c.style_id.is_some() && si == ns) {
                return Err(ModelError::UnknownStyle {
                    style: si,
                    styles: ns,
                });
            }
            text.row_mut(i)[ci] = 1.0;
            style.row_mut(i)[si] = 1.0;
        }
        Ok((text, style))
    }

    fn residual_var<'t>(p: &[Var<'t>], contour: Var<'t>) -> Result<Var<'t>, ModelError> {
        Ok(contour
            .matmul(p[WC1])?
            .add(p[BC1])?
            .tanh()?
            .matmul(p[WC2])?
            .add(p[BC2])?)
    }

    #[allow(clippy::too_many_arguments)]
    fn trunk<'t>(
        &self,
        tape: &'t Tape,
        p: &[Var<'t>],
        x: Var<'t>,
        t: &[usize],
        cond: &[Conditioning],
        injected: Option<Var<'t>>,
    ) -> Result<Var<'t>, ModelError> {
        let (text, style) = self.one_hot(cond)?;
        let temb = tape.constant(time_embedding(t, self.config.time_dim));
        let gate = temb.matmul(p[WS])?.add(p[BS])?;
        let mut pre = x
            .matmul(p[WX])?
            .add(temb.matmul(p[WT])?)?
            .add(p[B1])?
            .add(tape.constant(text).matmul(p[TEXT])?)?
            .add(tape.constant(style).matmul(p[STYLE])?)?;
        if let Some(inj) = injected {
            pre = pre.add(inj)?;
        }
        let h1 = pre.tanh()?;
        let h2 = h1.add(h1.matmul(p[W2])?.add(p[B2])?.tanh()?)?;
        let h3 = h2.add(h2.matmul(p[W3])?.add(p[B3])?.tanh()?)?;
        Ok(h3.matmul(p[WO])?.add(p[BO])?.add(x.mul(gate)?)?)
    }

    /// Hidden-width residual of the contour branch for each row of `contours`
    /// (flattened 0/1 edge maps). It depends on nothing else, so samplers
    /// compute it once per run.
    pub fn contour_residual(&self, contours: &Tensor) -> Result<Tensor, ModelError> {
        check_rows(contours, self.config.image_dim)?;
        let tape = Tape::new();
        let p = self.register(&tape, false);
        let r = Self::residual_var(&p, tape.constant(contours.clone()))?;
        let out = r.value().clone();
        Ok(out)
    }

    /// Batched ε prediction. `residual` comes from [`Self::contour_residual`];
    /// row `i` receives `s_ctl[i]·residual[i]`. Rows with no residual or
    /// `s_ctl = 0` get no contour contribution at all.
    pub fn denoise_batch(
        &self,
        x_t: &Tensor,
        t: &[usize],
        cond: &[Conditioning],
        residual: Option<&Tensor>,
        s_ctl: &[f64],
    ) -> Result<Tensor, ModelError> {
        let n = check_rows(x_t, self.config.image_dim)?;
        if t.len() != n || cond.len() != n || s_ctl.len() != n {
            return Err(ModelError::Config(format!(
                "batch of {n} rows needs {n} timesteps, conditions and scales"
            )));
        }
        let tape = Tape::new();
        let p = self.register(&tape, false);
        let injected = match residual {
            Some(r) if s_ctl.iter().any(|&s| s != 0.0) => {
                if r.shape() != [n, self.config.hidden] {
                    return Err(ModelError::Shape {
                        expected: self.config.hidden,
                        got: r.shape().to_vec(),
                    });
                }
                let scale = Tensor::new(&[n, 1], s_ctl.to_vec())?;
                Some(tape.constant(r.mul(&scale)?))
            }
            _ => None,
        };
        let out = self.trunk(&tape, &p, tape.constant(x_t.clone()), t, cond, injected)?;
        let v = out.value().clone();
        Ok(v)
    }

    /// Single-image convenience over [`Self::denoise_batch`]; `contour` is a
    /// flattened 0/1 edge map.
    pub fn denoise(
        &self,
        x_t: &Tensor,
        t: usize,
        cond: Conditioning,
        contour: Option<&Tensor>,
        s_ctl: f64,
    ) -> Result<Tensor, ModelError> {
        let x = x_t.clone().reshape(&[1, x_t.len()])?;
        let residual = match contour {
            Some(c) => Some(self.contour_residual(&c.clone().reshape(&[1, c.len()])?)?),
            None => None,
        };
        let out = self.denoise_batch(&x, &[t], &[cond], residual.as_ref(), &[s_ctl])?;
        Ok(out.reshape(x_t.shape())?)
    }

    pub fn to_named(&self) -> NamedTensors {
        let c = &self.config;
        let meta = [c.image_dim, c.hidden, c.time_dim, c.text_classes, c.styles];
        let mut out = vec![(
            "denoiser.meta".to_string(),
            Tensor::new(&[5], meta.iter().map(|&v| v as f64).collect()).unwrap(),
        )];
        for (name, p) in NAMES.iter().zip(&self.params) {
            out.push((format!("denoiser.{name}"), p.clone()));
        }
        out
    }

    pub fn from_named(mut tensors: NamedTensors) -> Result<Self, ModelError> {
        let m = take_meta(&mut tensors, "denoiser.meta", 5)?;
        let config = DenoiserConfig {
            image_dim: m[0],
            hidden: m[1],
            time_dim: m[2],
            text_classes: m[3],
            styles: m[4],
        };
        let template = Self::new(config, &mut ChaCha8Rng::seed_from_u64(0));
        let params = NAMES
            .iter()
            .zip(&template.params)
            .map(|(name, p)| take_tensor(&mut tensors, &format!("denoiser.{name}"), p.shape()))
            .collect::<Result<_, _>>()?;
        Ok(Self { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        write_weights(path, &self.to_named())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_named(read_weights(path)?)
    }
}

/// Training rows: clean images, their conditions and flattened edge maps.
#[derive(Debug, Clone)]
pub struct DenoiserData {
    pub x0: Tensor,
    pub cond: Vec<Conditioning>,
    pub contours: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub cond_drop_prob: f64,
    pub seed: u64,
}

impl Default for DenoiserTraining {
    fn default() -> Self {
        Self {
            epochs: 600,
            batch_size: 64,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            cond_drop_prob: 0.1,
            seed: 0,
        }
    }
}

/// Noise-prediction training. Each row's condition is replaced by null with
/// probability `cond_drop_prob` and, independently, its contour branch is
/// switched off with the same probability. Returns the model and the mean
/// loss of every epoch.
pub fn train_denoiser(
    data: &DenoiserData,
    schedule: &NoiseSchedule,
    config: DenoiserConfig,
    train: &DenoiserTraining,
) -> Result<(Denoiser, Vec<f64>), ModelError> {
    let n = check_rows(&data.x0, config.image_dim)?;
    check_rows(&data.contours, config.image_dim)?;
    if data.cond.len() != n || n == 0 {
        return Err(ModelError::Config(format!(
            "{n} images but {} conditions",
            data.cond.len()
        )));
    }
    if !(0.0..=1.0).contains(&train.cond_drop_prob) {
        return Err(ModelError::Config(format!(
            "cond_drop_prob {} not in [0,1]",
            train.cond_drop_prob
        )));
    }
    if train.batch_size == 0 {
        return Err(ModelError::Config("batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut model = Denoiser::new(config, &mut rng);
    let mut opt = Optimizer::new(
        train.optimizer,
        train.lr,
        &model.params.iter().collect::<Vec<_>>(),
    );
    let d = config.image_dim;
    let mut order: Vec<usize> = (0..n).collect();
    let mut losses = Vec::with_capacity(train.epochs);
    for epoch in 0..train.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(train.batch_size) {
            let b = batch.len();
            let mut xt = Vec::with_capacity(b * d);
            let mut eps = Vec::with_capacity(b * d);
            let mut edges = Vec::with_capacity(b * d);
            let mut ts = Vec::with_capacity(b);
            let mut cond = Vec::with_capacity(b);
            let mut s_ctl = Vec::with_capacity(b);
            for &i in batch {
                let t = rng.gen_range(0..schedule.train_steps());
                let ab = schedule.alpha_bars()[t];
                let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
                for &x in data.x0.row(i) {
                    let e: f64 = rng.sample(StandardNormal);
                    xt.push(a * x + s * e);
                    eps.push(e);
                }
                edges.extend_from_slice(data.contours.row(i));
                ts.push(t);
                let drop_text = rng.gen::<f64>() < train.cond_drop_prob;
                let drop_ctl = rng.gen::<f64>() < train.cond_drop_prob;
                cond.push(if drop_text { Conditioning::null() } else { data.cond[i] });
                s_ctl.push(if drop_ctl { 0.0 } else { 1.0 });
            }
            let tape = Tape::new();
            let p = model.register(&tape, true);
            let r = Denoiser::residual_var(&p, tape.constant(Tensor::new(&[b, d], edges)?))?;
            let injected = r.mul(tape.constant(Tensor::new(&[b, 1], s_ctl)?))?;
            let x = tape.constant(Tensor::new(&[b, d], xt)?);
            let out = model.trunk(&tape, &p, x, &ts, &cond, Some(injected))?;
            let diff = out.sub(tape.constant(Tensor::new(&[b, d], eps)?))?;
            let loss = diff.mul(diff)?.mean()?;
            let lv = loss.value().item().unwrap_or(f64::NAN);
            if !lv.is_finite() {
                return Err(ModelError::NonFiniteLoss { epoch });
            }
            total += lv * b as f64;
            let mut grads = tape.backward(loss)?;
            let g: Vec<Tensor> = p
                .iter()
                .map(|&v| grads.take(v).expect("tracked parameter"))
                .collect();
            opt.step(&mut model.params.iter_mut().collect::<Vec<_>>(), &g);
        }
        let mean = total / n as f64;
        if !mean.is_finite() {
            return Err(ModelError::NonFiniteLoss { epoch });
        }
        if epoch == 0 || (epoch + 1) % 50 == 0 || epoch + 1 == train.epochs {
            info!("denoiser epoch {:>4}: loss {mean:.5}", epoch + 1);
        }
        losses.push(mean);
    }
    Ok((model, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small() -> DenoiserConfig {
        DenoiserConfig {
            image_dim: 16,
            hidden: 12,
            time_dim: 8,
            text_classes: 2,
            styles: 2,
        }
    }

    fn trained_branch(config: DenoiserConfig, seed: u64) -> Denoiser {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut d = Denoiser::new(config, &mut rng);
        // give the zero-initialised contour head some weight
        d.params[WC2] = Tensor::randn(&[config.hidden, config.hidden], 0.3, &mut rng);
        d.params[BC2] = Tensor::randn(&[config.hidden], 0.3, &mut rng);
        d
    }

    #[test]
    fn zero_scale_matches_absent_contour() {
        let d = trained_branch(small(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[16], 1.0, &mut rng);
        let e = Tensor::ones(&[16]);
        let c = Conditioning::new(1, 0);
        let a = d.denoise(&x, 500, c, Some(&e), 0.0).unwrap();
        let b = d.denoise(&x, 500, c, None, 1.0).unwrap();
        assert_eq!(a.data(), b.data());
        let with = d.denoise(&x, 500, c, Some(&e), 1.0).unwrap();
        assert_ne!(with.data(), b.data());
    }

    #[test]
    fn injection_is_linear_in_scale() {
        let d = trained_branch(small(), 3);
        let e = Tensor::new(&[1, 16], (0..16).map(|i| (i % 3 == 0) as u8 as f64).collect()).unwrap();
        let r = d.contour_residual(&e).unwrap();
        let r1 = r.scale(1.0);
        let r2 = r.scale(2.0);
        for (a, b) in r1.data().iter().zip(r2.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn unknown_class_rejected() {
        let d = Denoiser::new(small(), &mut ChaCha8Rng::seed_from_u64(0));
        let x = Tensor::zeros(&[16]);
        assert!(d.denoise(&x, 1, Conditioning::new(2, 0), None, 0.0).is_err());
        assert!(d.denoise(&x, 1, Conditioning::new(0, 2), None, 0.0).is_err());
        assert!(d.denoise(&Tensor::zeros(&[15]), 1, Conditioning::null(), None, 0.0).is_err());
    }

    #[test]
    fn batch_rows_equal_single_calls() {
        let d = trained_branch(small(), 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[3, 16], 1.0, &mut rng);
        let e = Tensor::new(&[3, 16], (0..48).map(|i| ((i * 7) % 5 == 0) as u8 as f64).collect()).unwrap();
        let r = d.contour_residual(&e).unwrap();
        let cond = [Conditioning::new(0, 1), Conditioning::null(), Conditioning::new(1, 0)];
        let s = [1.0, 0.5, 0.0];
        let t = [999, 10, 400];
        let batch = d.denoise_batch(&x, &t, &cond, Some(&r), &s).unwrap();
        for i in 0..3 {
            let xi = Tensor::new(&[16], x.row(i).to_vec()).unwrap();
            let ei = Tensor::new(&[16], e.row(i).to_vec()).unwrap();
            let single = d.denoise(&xi, t[i], cond[i], Some(&ei), s[i]).unwrap();
            assert_eq!(single.data(), batch.row(i));
        }
    }

    #[test]
    fn weights_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = trained_branch(small(), 6);
        let path = dir.path().join("d.hgfa");
        d.save(&path).unwrap();
        assert_eq!(Denoiser::load(&path).unwrap(), d);
    }

    #[test]
    fn training_reduces_loss_and_learns_conditioning() {
        let config = small();
        let n = 32;
        let mut x0 = Vec::new();
        let mut cond = Vec::new();
        for i in 0..n {
            let c = i % 2;
            x0.extend((0..16).map(|j| if (j < 8) == (c == 0) { 0.8 } else { -0.8 }));
            cond.push(Conditioning::new(c, 0));
        }
        let data = DenoiserData {
            x0: Tensor::new(&[n, 16], x0).unwrap(),
            cond,
            contours: Tensor::zeros(&[n, 16]),
        };
        let schedule = NoiseSchedule::reference();
        let train = DenoiserTraining {
            epochs: 150,
            batch_size: 16,
            seed: 9,
            ..DenoiserTraining::default()
        };
        let (d, losses) = train_denoiser(&data, &schedule, config, &train).unwrap();
        assert!(losses.last().unwrap() < &losses[0]);
        let x = Tensor::zeros(&[16]);
        let a = d.denoise(&x, 500, Conditioning::new(0, 0), None, 0.0).unwrap();
        let b = d.denoise(&x, 500, Conditioning::null(), None, 0.0).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn output_shape_matches_input(batch in 1usize..5, t in 0usize..1000, seed in any::<u64>(),
                                      class in proptest::option::of(0usize..2),
                                      style in proptest::option::of(0usize..2),
                                      s_ctl in 0.0f64..3.0) {
            let d = Denoiser::new(small(), &mut ChaCha8Rng::seed_from_u64(seed));
            let x = Tensor::randn(&[batch, 16], 1.0, &mut ChaCha8Rng::seed_from_u64(seed ^ 1));
            let r = d.contour_residual(&Tensor::ones(&[batch, 16])).unwrap();
            let cond = vec![Conditioning { class_id: class, style_id: style }; batch];
            let out = d.denoise_batch(&x, &vec![t; batch], &cond, Some(&r), &vec![s_ctl; batch]).unwrap();
            prop_assert_eq!(out.shape(), x.shape());
            prop_assert!(out.is_finite());
        }
    }
}
