use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use super::weights::{read_weights, take_meta, take_tensor, write_weights, NamedTensors};
use super::{check_rows, ModelError};
use crate::tensor::{Tape, Tensor, Var};

/// Maps predicted clean samples to classifier inputs.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Decoder {
    /// Pixel-space diffusion: the prediction already is an image.
    #[default]
    Identity,
    /// `x·W + b` with `W` of shape `[dim, dim]`.
    Linear { weight: Tensor, bias: Tensor },
}

impl Decoder {
    pub fn mode_name(&self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::Linear { .. } => "linear",
        }
    }

    /// Linear autoencoder from the leading `components` principal directions
    /// of the rows of `data`: `D(x) = μ + (x − μ)·V·Vᵀ`.
    pub fn fit_linear(data: &Tensor, components: usize) -> Result<Self, ModelError> {
        let n = data.rows();
        let d = data.cols();
        check_rows(data, d)?;
        if n < 2 || components == 0 || components > d {
            return Err(ModelError::Config(format!(
                "cannot fit {components} components to {n} rows of width {d}"
            )));
        }
        let mean: Vec<f64> = (0..d)
            .map(|j| (0..n).map(|i| data.row(i)[j]).sum::<f64>() / n as f64)
            .collect();
        let centered = DMatrix::from_fn(n, d, |i, j| data.row(i)[j] - mean[j]);
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let basis = DMatrix::from_fn(d, components, |i, k| eig.eigenvectors[(i, order[k])]);
        let proj = &basis * basis.transpose();
        let mut weight = Vec::with_capacity(d * d);
        for i in 0..d {
            for j in 0..d {
                weight.push(proj[(i, j)]);
            }
        }
        let bias: Vec<f64> = (0..d)
            .map(|j| mean[j] - (0..d).map(|i| mean[i] * proj[(i, j)]).sum::<f64>())
            .collect();
        Ok(Self::Linear {
            weight: Tensor::new(&[d, d], weight)?,
            bias: Tensor::new(&[d], bias)?,
        })
    }

    pub fn decode(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        match self {
            Self::Identity => Ok(x.clone()),
            Self::Linear { weight, bias } => Ok(x.matmul(weight)?.add(bias)?),
        }
    }

    pub fn decode_var<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>, ModelError> {
        match self {
            Self::Identity => Ok(x),
            Self::Linear { weight, bias } => Ok(x
                .matmul(tape.constant(weight.clone()))?
                .add(tape.constant(bias.clone()))?),
        }
    }

    pub fn to_named(&self) -> NamedTensors {
        match self {
            Self::Identity => vec![("decoder.meta".into(), Tensor::new(&[1], vec![0.0]).unwrap())],
            Self::Linear { weight, bias } => vec![
                ("decoder.meta".into(), Tensor::new(&[1], vec![1.0]).unwrap()),
                ("decoder.weight".into(), weight.clone()),
                ("decoder.bias".into(), bias.clone()),
            ],
        }
    }

    pub fn from_named(mut tensors: NamedTensors) -> Result<Self, ModelError> {
        match take_meta(&mut tensors, "decoder.meta", 1)?[0] {
            0 => Ok(Self::Identity),
            1 => {
                let d = tensors
                    .iter()
                    .find(|(n, _)| n == "decoder.bias")
                    .map(|(_, t)| t.len())
                    .ok_or_else(|| ModelError::Format("missing tensor decoder.bias".into()))?;
                Ok(Self::Linear {
                    weight: take_tensor(&mut tensors, "decoder.weight", &[d, d])?,
                    bias: take_tensor(&mut tensors, "decoder.bias", &[d])?,
                })
            }
            m => Err(ModelError::Format(format!("unknown decoder mode {m}"))),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        write_weights(path, &self.to_named())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_named(read_weights(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_is_bitwise() {
        let x = Tensor::randn(&[2, 5], 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(Decoder::Identity.decode(&x).unwrap(), x);
    }

    #[test]
    fn linear_reconstructs_low_rank_data() {
        // rows live in a 2-d affine subspace of R^6
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let basis = Tensor::randn(&[2, 6], 1.0, &mut rng);
        let coeffs = Tensor::randn(&[40, 2], 1.0, &mut rng);
        let data = coeffs.matmul(&basis).unwrap().add(&Tensor::full(&[6], 0.5)).unwrap();
        let dec = Decoder::fit_linear(&data, 2).unwrap();
        assert!(dec.decode(&data).unwrap().max_abs_diff(&data) < 1e-9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dec.hgfa");
        dec.save(&path).unwrap();
        assert_eq!(Decoder::load(&path).unwrap(), dec);
    }

    #[test]
    fn tape_path_matches_plain_decode() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = Tensor::randn(&[20, 4], 1.0, &mut rng);
        let dec = Decoder::fit_linear(&data, 3).unwrap();
        let tape = Tape::new();
        let v = dec.decode_var(&tape, tape.constant(data.clone())).unwrap();
        assert_eq!(*v.value(), dec.decode(&data).unwrap());
    }
}
