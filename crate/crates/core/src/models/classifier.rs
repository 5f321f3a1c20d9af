use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::optim::{Optimizer, OptimizerKind};
use super::weights::{read_weights, take_meta, take_tensor, write_weights, NamedTensors};
use super::{check_rows, ModelError, IMAGE_DIM};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassifierConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl ClassifierConfig {
    pub fn new(classes: usize) -> Self {
        Self {
            input_dim: IMAGE_DIM,
            hidden: 128,
            classes,
        }
    }
}

const NAMES: [&str; 6] = ["w1", "b1", "w2", "b2", "w3", "b3"];

/// Two tanh hidden layers and a softmax head.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    config: ClassifierConfig,
    params: Vec<Tensor>,
}

impl Classifier {
    pub fn new<R: Rng + ?Sized>(config: ClassifierConfig, rng: &mut R) -> Self {
        let ClassifierConfig {
            input_dim: d,
            hidden: h,
            classes: c,
        } = config;
        let w = |rows: usize, cols: usize, rng: &mut R| {
            Tensor::randn(&[rows, cols], 1.0 / (rows as f64).sqrt(), rng)
        };
        let params = vec![
            w(d, h, rng),
            Tensor::zeros(&[h]),
            w(h, h, rng),
            Tensor::zeros(&[h]),
            w(h, c, rng),
            Tensor::zeros(&[c]),
        ];
        Self { config, params }
    }

    /// All weights zero: every input maps to the uniform distribution.
    pub fn zeros(config: ClassifierConfig) -> Self {
        let mut c = Self::new(config, &mut ChaCha8Rng::seed_from_u64(0));
        for p in &mut c.params {
            *p = Tensor::zeros(p.shape());
        }
        c
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    fn forward<'t>(p: &[Var<'t>], x: Var<'t>) -> Result<Var<'t>, ModelError> {
        let h1 = x.matmul(p[0])?.add(p[1])?.tanh()?;
        let h2 = h1.matmul(p[2])?.add(p[3])?.tanh()?;
        Ok(h2.matmul(p[4])?.add(p[5])?.log_softmax()?)
    }

    /// Log-probabilities of `x` recorded on `tape` with the weights held
    /// constant, so gradients flow only into `x`.
    pub fn log_probs_var<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>, ModelError> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.config.input_dim {
            return Err(ModelError::Shape {
                expected: self.config.input_dim,
                got: shape,
            });
        }
        let p: Vec<Var<'t>> = self.params.iter().map(|w| tape.constant(w.clone())).collect();
        Self::forward(&p, x)
    }

    /// Class probabilities, one row per input row.
    pub fn classify(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        check_rows(x, self.config.input_dim)?;
        let tape = Tape::new();
        let lp = self.log_probs_var(&tape, tape.constant(x.clone()))?;
        let probs = lp.value().map(f64::exp);
        Ok(probs)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>, ModelError> {
        let probs = self.classify(x)?;
        Ok((0..probs.rows())
            .map(|i| {
                let row = probs.row(i);
                (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
            })
            .collect())
    }

    pub fn accuracy(&self, x: &Tensor, labels: &[usize]) -> Result<f64, ModelError> {
        let pred = self.predict(x)?;
        if pred.is_empty() {
            return Ok(0.0);
        }
        let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / pred.len() as f64)
    }

    pub fn to_named(&self) -> NamedTensors {
        let c = &self.config;
        let mut out = vec![(
            "classifier.meta".to_string(),
            Tensor::new(&[3], vec![c.input_dim as f64, c.hidden as f64, c.classes as f64]).unwrap(),
        )];
        for (name, p) in NAMES.iter().zip(&self.params) {
            out.push((format!("classifier.{name}"), p.clone()));
        }
        out
    }

    pub fn from_named(mut tensors: NamedTensors) -> Result<Self, ModelError> {
        let m = take_meta(&mut tensors, "classifier.meta", 3)?;
        let config = ClassifierConfig {
            input_dim: m[0],
            hidden: m[1],
            classes: m[2],
        };
        let template = Self::zeros(config);
        let params = NAMES
            .iter()
            .zip(&template.params)
            .map(|(name, p)| take_tensor(&mut tensors, &format!("classifier.{name}"), p.shape()))
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

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Std of Gaussian noise added to inputs each time they are drawn.
    pub input_noise: f64,
    pub seed: u64,
}

impl Default for ClassifierTraining {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 32,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            input_noise: 0.0,
            seed: 0,
        }
    }
}

/// Cross-entropy training on the rows of `x`. Returns the model and the mean
/// loss of every epoch.
pub fn train_classifier(
    x: &Tensor,
    labels: &[usize],
    config: ClassifierConfig,
    train: &ClassifierTraining,
) -> Result<(Classifier, Vec<f64>), ModelError> {
    let n = check_rows(x, config.input_dim)?;
    if labels.len() != n {
        return Err(ModelError::Config(format!("{n} rows but {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= config.classes) {
        return Err(ModelError::UnknownClass {
            class: bad,
            classes: config.classes,
        });
    }
    let mut distinct = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if config.classes < 2 || distinct.len() < 2 {
        return Err(ModelError::Config(
            "classifier training needs at least two classes present".into(),
        ));
    }
    if train.batch_size == 0 {
        return Err(ModelError::Config("batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut model = Classifier::new(config, &mut rng);
    let mut opt = Optimizer::new(
        train.optimizer,
        train.lr,
        &model.params.iter().collect::<Vec<_>>(),
    );
    let (d, c) = (config.input_dim, config.classes);
    let mut order: Vec<usize> = (0..n).collect();
    let mut losses = Vec::with_capacity(train.epochs);
    for epoch in 0..train.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(train.batch_size) {
            let b = batch.len();
            let mut xs = Vec::with_capacity(b * d);
            let mut onehot = vec![0.0; b * c];
            for (r, &i) in batch.iter().enumerate() {
                if train.input_noise > 0.0 {
                    for &v in x.row(i) {
                        let e: f64 = rng.sample(StandardNormal);
                        xs.push(v + train.input_noise * e);
                    }
                } else {
                    xs.extend_from_slice(x.row(i));
                }
                onehot[r * c + labels[i]] = 1.0;
            }
            let tape = Tape::new();
            let p: Vec<Var> = model.params.iter().map(|w| tape.var(w.clone())).collect();
            let lp = Classifier::forward(&p, tape.constant(Tensor::new(&[b, d], xs)?))?;
            let picked = lp.mul(tape.constant(Tensor::new(&[b, c], onehot)?))?;
            let loss = picked.sum()?.scale(-1.0 / b as f64)?;
            let lv = loss.value().item().unwrap_or(f64::NAN);
            if !lv.is_finite() {
                return Err(ModelError::NonFiniteLoss { epoch });
            }
            total += lv * b as f64;
            let mut grads = tape.backward(loss)?;
            let g: Vec<Tensor> = p.iter().map(|&v| grads.take(v).expect("tracked")).collect();
            opt.step(&mut model.params.iter_mut().collect::<Vec<_>>(), &g);
        }
        let mean = total / n as f64;
        if epoch + 1 == train.epochs {
            info!("classifier epoch {:>4}: loss {mean:.5}", epoch + 1);
        }
        losses.push(mean);
    }
    Ok((model, losses))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(classes: usize) -> ClassifierConfig {
        ClassifierConfig {
            input_dim: 8,
            hidden: 6,
            classes,
        }
    }

    #[test]
    fn zero_weights_are_uniform() {
        let c = Classifier::zeros(small(4));
        let p = c.classify(&Tensor::randn(&[3, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(1))).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn probabilities_normalised() {
        let c = Classifier::new(small(5), &mut ChaCha8Rng::seed_from_u64(2));
        let x = Tensor::randn(&[50, 8], 3.0, &mut ChaCha8Rng::seed_from_u64(3));
        let p = c.classify(&x).unwrap();
        for i in 0..50 {
            let row = p.row(i);
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn log_prob_gradient_matches_finite_differences() {
        let c = Classifier::new(small(3), &mut ChaCha8Rng::seed_from_u64(4));
        let x0 = Tensor::randn(&[1, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(5));
        let logp = |x: &Tensor| c.classify(x).unwrap().data()[2].ln();
        let tape = Tape::new();
        let x = tape.var(x0.clone());
        let lp = c.log_probs_var(&tape, x).unwrap();
        let pick = lp.mul(tape.constant(Tensor::new(&[1, 3], vec![0.0, 0.0, 1.0]).unwrap())).unwrap();
        let grads = tape.backward(pick.sum().unwrap()).unwrap();
        let g = grads.get(x).unwrap();
        let h = 1e-5;
        for i in 0..8 {
            let mut up = x0.clone();
            up.data_mut()[i] += h;
            let mut dn = x0.clone();
            dn.data_mut()[i] -= h;
            let fd = (logp(&up) - logp(&dn)) / (2.0 * h);
            assert!((g.data()[i] - fd).abs() <= 1e-4 * fd.abs().max(1e-3), "{i}: {} vs {fd}", g.data()[i]);
        }
    }

    #[test]
    fn single_class_rejected() {
        let x = Tensor::zeros(&[4, 8]);
        assert!(train_classifier(&x, &[0, 0, 0, 0], small(2), &ClassifierTraining::default()).is_err());
        assert!(train_classifier(&x, &[0, 0, 0, 0], small(1), &ClassifierTraining::default()).is_err());
    }

    #[test]
    fn learns_a_separable_problem() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 80;
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let mut x = Tensor::randn(&[n, 8], 0.3, &mut rng);
        for (i, &l) in labels.iter().enumerate() {
            x.row_mut(i)[0] += if l == 0 { 1.0 } else { -1.0 };
        }
        let train = ClassifierTraining {
            epochs: 40,
            seed: 1,
            ..ClassifierTraining::default()
        };
        let (c, losses) = train_classifier(&x, &labels, small(2), &train).unwrap();
        assert!(losses.last().unwrap() < &losses[0]);
        assert!(c.accuracy(&x, &labels).unwrap() > 0.95);
    }

    #[test]
    fn weights_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = Classifier::new(small(3), &mut ChaCha8Rng::seed_from_u64(7));
        let path = dir.path().join("c.hgfa");
        c.save(&path).unwrap();
        assert_eq!(Classifier::load(&path).unwrap(), c);
    }
}
