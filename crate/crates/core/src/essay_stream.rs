//! Essay-level dense stream: `s1 = LeakyReLU(W v + b)` over the frozen
//! essay summary vector `v`.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::data::TRAIT_COUNT;
use crate::error::{Error, Result};
use crate::gat::glorot_uniform;
use crate::tensor::Tensor;

/// `weight` is `TRAIT_COUNT x d`, `bias` has `TRAIT_COUNT` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct EssayHeadParams<T = Tensor> {
    pub weight: T,
    pub bias: T,
}

impl<T> EssayHeadParams<T> {
    pub fn named(&self) -> Vec<(String, &T)> {
        vec![
            ("essay.W".to_string(), &self.weight),
            ("essay.b".to_string(), &self.bias),
        ]
    }

    pub fn values_mut(&mut self) -> Vec<&mut T> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> EssayHeadParams<U> {
        EssayHeadParams {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }
}

impl EssayHeadParams {
    pub fn init<R: Rng>(d: usize, rng: &mut R) -> Self {
        EssayHeadParams {
            weight: glorot_uniform(rng, TRAIT_COUNT, d),
            bias: Tensor::zeros(vec![TRAIT_COUNT]),
        }
    }

    pub fn dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn check_shapes(&self, d: usize) -> Result<()> {
        if self.weight.shape() != [TRAIT_COUNT, d] || self.bias.shape() != [TRAIT_COUNT] {
            return Err(Error::shape(format!(
                "essay head {:?}/{:?} does not fit width {d}",
                self.weight.shape(),
                self.bias.shape()
            )));
        }
        Ok(())
    }
}

/// Single-essay forward pass.
pub fn essay_forward(essay_vec: &[f64], params: &EssayHeadParams, slope: f64) -> Result<Vec<f64>> {
    let d = params.dim();
    if essay_vec.len() != d {
        return Err(Error::shape(format!(
            "essay vector of {} values for a head of width {d}",
            essay_vec.len()
        )));
    }
    Ok((0..TRAIT_COUNT)
        .map(|t| {
            let z: f64 = params
                .weight
                .row(t)
                .iter()
                .zip(essay_vec)
                .map(|(w, v)| w * v)
                .sum::<f64>()
                + params.bias.data()[t];
            if z > 0.0 {
                z
            } else {
                slope * z
            }
        })
        .collect())
}

/// Batched forward pass on a tape: `vecs` is `B x d`, result `B x TRAIT_COUNT`.
pub fn essay_forward_on_tape(
    tape: &mut Tape,
    vecs: Var,
    params: &EssayHeadParams<Var>,
    slope: f64,
) -> Result<Var> {
    let wt = tape.transpose(params.weight)?;
    let z = tape.matmul(vecs, wt)?;
    let z = tape.add_bias(z, params.bias)?;
    Ok(tape.leaky_relu(z, slope))
}
