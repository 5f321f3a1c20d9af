//! Noise schedule, closed-form forward noising, clean-image prediction and
//! deterministic DDIM stepping.

use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("timestep {t} outside 0..{train_steps}")]
    Timestep { t: usize, train_steps: usize },
    #[error("alpha_bar is zero at the requested timestep")]
    SingularAlphaBar,
    #[error("already at the final step ({0} steps)")]
    PastFinalStep(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Linear-β schedule and the descending timestep map visited at inference.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    train_steps: usize,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    step_map: Vec<usize>,
}

impl NoiseSchedule {
    pub fn new(
        train_steps: usize,
        beta_start: f64,
        beta_end: f64,
        inference_steps: usize,
    ) -> Result<Self, DiffusionError> {
        if train_steps == 0 || inference_steps == 0 || inference_steps > train_steps {
            return Err(DiffusionError::InvalidSchedule(format!(
                "need 0 < inference_steps ({inference_steps}) <= train_steps ({train_steps})"
            )));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(DiffusionError::InvalidSchedule(format!(
                "need 0 < beta_start ({beta_start}) <= beta_end ({beta_end}) < 1"
            )));
        }
        let betas: Vec<f64> = if train_steps == 1 {
            vec![beta_start]
        } else {
            (0..train_steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (train_steps - 1) as f64)
                .collect()
        };
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars: Vec<f64> = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        let last = train_steps - 1;
        let step_map = if inference_steps == 1 {
            vec![last]
        } else {
            let span = (inference_steps - 1) as f64;
            (0..inference_steps)
                .map(|i| ((last as f64) * (span - i as f64) / span).round() as usize)
                .collect()
        };
        Ok(Self {
            train_steps,
            betas,
            alphas,
            alpha_bars,
            step_map,
        })
    }

    /// 1000 training steps, β linear in [1e-4, 0.02], 30 inference steps.
    pub fn reference() -> Self {
        Self::new(1000, 1e-4, 0.02, 30).expect("reference schedule is valid")
    }

    pub fn train_steps(&self) -> usize {
        self.train_steps
    }

    pub fn inference_steps(&self) -> usize {
        self.step_map.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn step_map(&self) -> &[usize] {
        &self.step_map
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64, DiffusionError> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or(DiffusionError::Timestep {
                t,
                train_steps: self.train_steps,
            })
    }

    /// ᾱ at the step after `step_index`, or 1 past the last step.
    pub fn alpha_bar_next(&self, step_index: usize) -> f64 {
        self.step_map
            .get(step_index + 1)
            .map_or(1.0, |&t| self.alpha_bars[t])
    }

    pub fn q_sample(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor, DiffusionError> {
        forward_noise(x0, eps, self.alpha_bar(t)?)
    }

    pub fn predict_x0(
        &self,
        x_t: &Tensor,
        t: usize,
        eps_hat: &Tensor,
    ) -> Result<Tensor, DiffusionError> {
        predict_clean(x_t, eps_hat, self.alpha_bar(t)?)
    }
}

/// `√ᾱ·x0 + √(1−ᾱ)·ε`.
pub fn forward_noise(x0: &Tensor, eps: &Tensor, alpha_bar: f64) -> Result<Tensor, DiffusionError> {
    check_same(x0, eps, "q_sample")?;
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(x, e)| a * x + b * e)
        .collect();
    Ok(Tensor::new(x0.shape(), data)?)
}

/// `(x_t − √(1−ᾱ)·ε̂)/√ᾱ`.
pub fn predict_clean(
    x_t: &Tensor,
    eps_hat: &Tensor,
    alpha_bar: f64,
) -> Result<Tensor, DiffusionError> {
    check_same(x_t, eps_hat, "predict_x0")?;
    if alpha_bar <= 0.0 {
        return Err(DiffusionError::SingularAlphaBar);
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let data = x_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(x, e)| (x - b * e) / a)
        .collect();
    Ok(Tensor::new(x_t.shape(), data)?)
}

fn check_same(a: &Tensor, b: &Tensor, op: &'static str) -> Result<(), DiffusionError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        }
        .into());
    }
    Ok(())
}

/// A sample (or batch of samples) part-way through the reverse process.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionState {
    pub x_t: Tensor,
    pub step_index: usize,
}

impl DiffusionState {
    pub fn new(x_t: Tensor) -> Self {
        Self { x_t, step_index: 0 }
    }

    /// Training timestep of the current step, `None` once sampling finished.
    pub fn timestep(&self, schedule: &NoiseSchedule) -> Option<usize> {
        schedule.step_map().get(self.step_index).copied()
    }

    pub fn is_done(&self, schedule: &NoiseSchedule) -> bool {
        self.step_index >= schedule.inference_steps()
    }
}

/// One η=0 DDIM update. The final step lands exactly on x̂₀.
pub fn ddim_step(
    state: &DiffusionState,
    eps_hat: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<DiffusionState, DiffusionError> {
    let t = state
        .timestep(schedule)
        .ok_or(DiffusionError::PastFinalStep(schedule.inference_steps()))?;
    let x0 = schedule.predict_x0(&state.x_t, t, eps_hat)?;
    let ab_prev = schedule.alpha_bar_next(state.step_index);
    let x_prev = if ab_prev == 1.0 {
        x0
    } else {
        forward_noise(&x0, eps_hat, ab_prev)?
    };
    Ok(DiffusionState {
        x_t: x_prev,
        step_index: state.step_index + 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reference_step_map() {
        let s = NoiseSchedule::reference();
        assert_eq!(s.step_map().len(), 30);
        assert_eq!(s.step_map()[0], 999);
        assert_eq!(*s.step_map().last().unwrap(), 0);
        assert!(s.step_map().windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn full_step_map() {
        let s = NoiseSchedule::new(50, 1e-4, 0.02, 50).unwrap();
        let expect: Vec<usize> = (0..50).rev().collect();
        assert_eq!(s.step_map(), expect.as_slice());
    }

    #[test]
    fn invalid_bounds_rejected() {
        assert!(NoiseSchedule::new(1000, 0.0, 0.02, 30).is_err());
        assert!(NoiseSchedule::new(1000, 0.03, 0.02, 30).is_err());
        assert!(NoiseSchedule::new(1000, 1e-4, 1.0, 30).is_err());
        assert!(NoiseSchedule::new(10, 1e-4, 0.02, 11).is_err());
    }

    #[test]
    fn alpha_bar_is_cumulative_product() {
        let s = NoiseSchedule::reference();
        let mut acc = 1.0;
        for (t, b) in s.betas().iter().enumerate() {
            acc *= 1.0 - b;
            assert!((s.alpha_bars()[t] - acc).abs() <= 1e-15);
        }
        assert!(s.alpha_bars()[0] > 0.999);
        assert!(s.alpha_bars()[999] < 1e-4);
    }

    #[test]
    fn q_sample_endpoints_and_scalar() {
        let x0 = Tensor::new(&[3], vec![0.3, -0.7, 1.0]).unwrap();
        let eps = Tensor::new(&[3], vec![1.1, 0.2, -0.4]).unwrap();
        assert_eq!(forward_noise(&x0, &eps, 1.0).unwrap(), x0);
        assert_eq!(forward_noise(&x0, &eps, 0.0).unwrap(), eps);
        let x = forward_noise(&Tensor::scalar(1.0), &Tensor::scalar(0.5), 0.64).unwrap();
        assert!((x.item().unwrap() - 1.1).abs() < 1e-15);
    }

    #[test]
    fn q_sample_shape_mismatch() {
        let s = NoiseSchedule::reference();
        assert!(s
            .q_sample(&Tensor::zeros(&[2]), 5, &Tensor::zeros(&[3]))
            .is_err());
    }

    #[test]
    fn predict_x0_examples() {
        let x = Tensor::new(&[2], vec![0.4, -0.2]).unwrap();
        assert_eq!(predict_clean(&x, &Tensor::zeros(&[2]), 1.0).unwrap(), x);
        let v = predict_clean(&Tensor::scalar(1.0), &Tensor::scalar(0.5), 0.25).unwrap();
        let expect = (1.0 - 0.75f64.sqrt() * 0.5) / 0.5;
        assert!((v.item().unwrap() - expect).abs() < 1e-15);
        assert!((v.item().unwrap() - 1.1340).abs() < 1e-4);
        assert_eq!(
            predict_clean(&x, &x, 0.0).unwrap_err(),
            DiffusionError::SingularAlphaBar
        );
    }

    #[test]
    fn final_step_returns_x0_exactly() {
        let s = NoiseSchedule::reference();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[2, 8], 1.0, &mut rng);
        let eps = Tensor::randn(&[2, 8], 1.0, &mut rng);
        let state = DiffusionState {
            x_t: x.clone(),
            step_index: 29,
        };
        let next = ddim_step(&state, &eps, &s).unwrap();
        assert_eq!(next.x_t, s.predict_x0(&x, 0, &eps).unwrap());
        assert!(ddim_step(&next, &eps, &s).is_err());
    }

    #[test]
    fn true_noise_single_step_recovers_x0() {
        // Two-entry map: the only step jumps from t straight to the end.
        let s = NoiseSchedule::new(1000, 1e-4, 0.02, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x0 = Tensor::randn(&[16], 1.0, &mut rng);
        let eps = Tensor::randn(&[16], 1.0, &mut rng);
        let xt = s.q_sample(&x0, 999, &eps).unwrap();
        let out = ddim_step(&DiffusionState::new(xt), &eps, &s).unwrap();
        assert!(out.x_t.max_abs_diff(&x0) < 1e-9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn alpha_bar_monotone(start in 1e-6f64..0.2, frac in 0.0f64..1.0) {
            let end = start + (0.5 - start) * frac;
            let s = NoiseSchedule::new(200, start, end, 20).unwrap();
            prop_assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        }
    }

    proptest! {
        #[test]
        fn predict_inverts_q_sample(seed in 0u64..1000, t in 0usize..1000) {
            let s = NoiseSchedule::reference();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x0 = Tensor::randn(&[32], 1.0, &mut rng);
            let eps = Tensor::randn(&[32], 1.0, &mut rng);
            let xt = s.q_sample(&x0, t, &eps).unwrap();
            let back = s.predict_x0(&xt, t, &eps).unwrap();
            let scale = x0.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
            prop_assert!(back.max_abs_diff(&x0) / scale <= 1e-9);
        }
    }
}
