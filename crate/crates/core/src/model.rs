//! The two-stream scoring model: essay stream plus GAT stream, summed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{finite_diff_check, GradCheckReport, Tape, Var, FD_EPS};
use crate::data::TRAIT_COUNT;
use crate::error::{Error, Result};
use crate::essay_stream::{essay_forward_on_tape, EssayHeadParams};
use crate::gat::{gat_forward_on_tape, init_params_with, GatConfig, GatParams, GatVars};
use crate::graph::{batch_graphs, GraphBatch, TokenGraph};
use crate::tensor::Tensor;

/// Trainable parameters of both streams plus the architecture they fit.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoringModel {
    pub config: GatConfig,
    /// Embedding width shared by token rows and the essay vector.
    pub d_in: usize,
    pub gat: GatParams,
    pub essay: EssayHeadParams,
}

/// Tape handles for every model parameter.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub gat: GatParams<Var>,
    pub essay: EssayHeadParams<Var>,
}

impl BoundModel {
    /// Handles in [`ScoringModel::named`] order.
    pub fn vars(&self) -> Vec<Var> {
        self.gat
            .named()
            .into_iter()
            .chain(self.essay.named())
            .map(|(_, v)| *v)
            .collect()
    }
}

/// One mini-batch of model inputs.
#[derive(Debug, Clone)]
pub struct ModelInput {
    pub graphs: GraphBatch,
    /// `B x d`.
    pub essay_vecs: Tensor,
}

impl ModelInput {
    pub fn new(graphs: &[&TokenGraph], essay_vecs: &[&[f64]]) -> Result<Self> {
        if graphs.len() != essay_vecs.len() {
            return Err(Error::arg("one essay vector per graph required"));
        }
        let rows: Vec<Vec<f64>> = essay_vecs.iter().map(|v| v.to_vec()).collect();
        Ok(ModelInput {
            graphs: batch_graphs(graphs)?,
            essay_vecs: Tensor::from_rows(&rows)?,
        })
    }

    pub fn len(&self) -> usize {
        self.graphs.num_graphs()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub s1: Var,
    pub s2: Var,
    pub y_hat: Var,
    pub gat: GatVars,
}

impl ScoringModel {
    pub fn init(config: GatConfig, d_in: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if d_in == 0 {
            return Err(Error::arg("embedding width must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gat = init_params_with(&config, d_in, &mut rng);
        let essay = EssayHeadParams::init(d_in, &mut rng);
        Ok(ScoringModel {
            config,
            d_in,
            gat,
            essay,
        })
    }

    pub fn check_shapes(&self) -> Result<()> {
        self.config.validate()?;
        self.gat.check_shapes(&self.config, self.d_in)?;
        self.essay.check_shapes(self.d_in)
    }

    /// All parameters with stable names, GAT first, then the essay head.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.gat.named();
        out.extend(self.essay.named());
        out
    }

    pub fn values_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.gat.values_mut();
        out.extend(self.essay.values_mut());
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// True for parameters belonging to the essay stream.
    pub fn is_essay_param(name: &str) -> bool {
        name.starts_with("essay.")
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        BoundModel {
            gat: self.gat.bind(tape),
            essay: self.essay.map(|t| tape.leaf(t.clone())),
        }
    }

    /// Full forward pass on `tape`: `y_hat = s1 + s2`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        input: &ModelInput,
    ) -> Result<ForwardVars> {
        if input.graphs.graph.feature_dim() != self.d_in || input.essay_vecs.cols() != self.d_in {
            return Err(Error::shape(format!(
                "model expects width {}, inputs have {} / {}",
                self.d_in,
                input.graphs.graph.feature_dim(),
                input.essay_vecs.cols()
            )));
        }
        let vecs = tape.constant(input.essay_vecs.clone());
        let s1 = essay_forward_on_tape(tape, vecs, &bound.essay, self.config.activation_slope)?;
        let gat = gat_forward_on_tape(tape, &input.graphs, &bound.gat, &self.config)?;
        let y_hat = tape.add(s1, gat.s2)?;
        Ok(ForwardVars {
            s1,
            s2: gat.s2,
            y_hat,
            gat,
        })
    }

    /// Fused predictions, `B x TRAIT_COUNT`.
    pub fn predict(&self, input: &ModelInput) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = BoundModel {
            gat: self.gat.map(|t| tape.constant(t.clone())),
            essay: self.essay.map(|t| tape.constant(t.clone())),
        };
        let vars = self.forward_on_tape(&mut tape, &bound, input)?;
        Ok(tape.value(vars.y_hat).clone())
    }

    /// Mean squared error over all essays and traits, with gradients for
    /// every parameter in [`ScoringModel::named`] order.
    pub fn loss_and_grads(&self, input: &ModelInput, targets: &Tensor) -> Result<(f64, Tensor, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let vars = self.forward_on_tape(&mut tape, &bound, input)?;
        let target = tape.constant(targets.clone());
        let loss = tape.mse(vars.y_hat, target)?;
        let grads = tape.backward(loss)?;
        let named = self.named();
        let g = bound
            .vars()
            .into_iter()
            .zip(&named)
            .map(|(v, (_, t))| grads.get_or_zeros(v, t.shape()))
            .collect();
        Ok((tape.value(loss).data()[0], tape.value(vars.y_hat).clone(), g))
    }

    /// Replaces parameters from a list in [`ScoringModel::named`] order.
    pub fn with_values(&self, values: &[Tensor]) -> Result<Self> {
        let mut out = self.clone();
        let slots = out.values_mut();
        if slots.len() != values.len() {
            return Err(Error::arg("parameter count mismatch"));
        }
        for (slot, v) in slots.into_iter().zip(values) {
            if slot.shape() != v.shape() {
                return Err(Error::shape("parameter shape mismatch"));
            }
            *slot = v.clone();
        }
        Ok(out)
    }
}

/// End-to-end finite-difference check of the model gradient on a small
/// random problem: a random 6-node dependency tree with `d = 8`, two
/// four-head layers of width 4, and both output heads.
pub fn model_gradcheck(seed: u64) -> Result<GradCheckReport> {
    const NODES: usize = 6;
    const DIM: usize = 8;
    let config = GatConfig {
        num_layers: 2,
        num_heads: 4,
        d_head: 4,
        ..GatConfig::default()
    };
    let mut model = ScoringModel::init(config, DIM, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    // non-zero biases so their gradients pass through both activation branches
    for b in [&mut model.gat.head.b2, &mut model.essay.bias] {
        b.data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-0.5..0.5));
    }

    let arcs: Vec<(usize, usize)> = (1..NODES).map(|k| (rng.random_range(0..k), k)).collect();
    let features = Tensor::matrix(
        NODES,
        DIM,
        (0..NODES * DIM).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;
    let graph = TokenGraph::from_arcs(NODES, arcs, features)?;
    let essay_vec: Vec<f64> = (0..DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
    let input = ModelInput::new(&[&graph], &[&essay_vec])?;
    // targets close to the prediction keep the loss small, so its rounding
    // error does not swamp the central differences of small gradients
    let base = model.predict(&input)?;
    let targets = Tensor::matrix(
        1,
        TRAIT_COUNT,
        base.data().iter().map(|p| p + rng.random_range(-0.1..0.1)).collect(),
    )?;

    let (_, _, analytic) = model.loss_and_grads(&input, &targets)?;
    let named: Vec<(String, Tensor)> = model
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    let f = |values: &[Tensor]| -> Result<f64> {
        let m = model.with_values(values)?;
        let pred = m.predict(&input)?;
        let n = pred.len() as f64;
        Ok(pred
            .data()
            .iter()
            .zip(targets.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n)
    };
    finite_diff_check(f, &named, &analytic, FD_EPS)
}
