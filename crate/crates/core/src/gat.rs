//! Multi-head graph attention network with mean pooling and a linear
//! prediction head.
//!
//! For each head, a node `i` scores every incoming edge `j -> i` with
//! `e_ij = LeakyReLU(a^T [W h_i || W h_j])`, normalizes the scores over its
//! neighborhood with a softmax, and aggregates `sum_j alpha_ij W h_j`
//! followed by the feature activation. Heads are concatenated on every layer
//! except the last, where they are averaged. Graph vectors are the mean of
//! the final node features and feed `LeakyReLU(h_G W2 + b2)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::data::TRAIT_COUNT;
use crate::error::{Error, Result};
use crate::graph::{GraphBatch, TokenGraph};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GatConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_head: usize,
    /// Negative slope of the LeakyReLU applied to attention logits.
    pub attention_slope: f64,
    /// Negative slope of the LeakyReLU applied to node features and outputs.
    pub activation_slope: f64,
}

impl Default for GatConfig {
    fn default() -> Self {
        GatConfig {
            num_layers: 2,
            num_heads: 4,
            d_head: 64,
            attention_slope: 0.2,
            activation_slope: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadCombine {
    Concat,
    Mean,
}

impl GatConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_heads == 0 || self.d_head == 0 {
            return Err(Error::arg("layers, heads and head width must all be >= 1"));
        }
        for (name, s) in [
            ("attention slope", self.attention_slope),
            ("activation slope", self.activation_slope),
        ] {
            if !(s > 0.0 && s < 1.0) {
                return Err(Error::arg(format!("{name} {s} must lie in (0, 1)")));
            }
        }
        Ok(())
    }

    /// Head combination of layer `l`: concatenation except on the last layer.
    pub fn combine(&self, layer: usize) -> HeadCombine {
        if layer + 1 == self.num_layers {
            HeadCombine::Mean
        } else {
            HeadCombine::Concat
        }
    }

    /// Input width of layer `l` given the raw feature width.
    pub fn layer_input_dim(&self, layer: usize, d_in: usize) -> usize {
        if layer == 0 {
            d_in
        } else {
            self.layer_output_dim(layer - 1)
        }
    }

    pub fn layer_output_dim(&self, layer: usize) -> usize {
        match self.combine(layer) {
            HeadCombine::Concat => self.num_heads * self.d_head,
            HeadCombine::Mean => self.d_head,
        }
    }

    /// Width of the pooled graph vector.
    pub fn graph_dim(&self) -> usize {
        self.d_head
    }
}

/// One attention head: projection `W` (`d_in x d_head`) and attention
/// vector `a` stored as a `2*d_head x 1` column.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHead<T = Tensor> {
    pub weight: T,
    pub attn: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatLayerParams<T = Tensor> {
    pub heads: Vec<AttentionHead<T>>,
}

/// Prediction head: `W2` (`d_graph x TRAIT_COUNT`) and `b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct GatHeadParams<T = Tensor> {
    pub w2: T,
    pub b2: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatParams<T = Tensor> {
    pub layers: Vec<GatLayerParams<T>>,
    pub head: GatHeadParams<T>,
}

impl<T> GatParams<T> {
    /// Parameters in a fixed order with stable names.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for (h, head) in layer.heads.iter().enumerate() {
                out.push((format!("gat.layer{l}.head{h}.W"), &head.weight));
                out.push((format!("gat.layer{l}.head{h}.a"), &head.attn));
            }
        }
        out.push(("gat.out.W2".to_string(), &self.head.w2));
        out.push(("gat.out.b2".to_string(), &self.head.b2));
        out
    }

    /// Mutable view in the same order as [`GatParams::named`].
    pub fn values_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            for head in &mut layer.heads {
                out.push(&mut head.weight);
                out.push(&mut head.attn);
            }
        }
        out.push(&mut self.head.w2);
        out.push(&mut self.head.b2);
        out
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> GatParams<U> {
        GatParams {
            layers: self
                .layers
                .iter()
                .map(|layer| GatLayerParams {
                    heads: layer
                        .heads
                        .iter()
                        .map(|h| AttentionHead {
                            weight: f(&h.weight),
                            attn: f(&h.attn),
                        })
                        .collect(),
                })
                .collect(),
            head: GatHeadParams {
                w2: f(&self.head.w2),
                b2: f(&self.head.b2),
            },
        }
    }
}

impl GatParams {
    /// Shape check against a config and raw feature width.
    pub fn check_shapes(&self, config: &GatConfig, d_in: usize) -> Result<()> {
        if self.layers.len() != config.num_layers {
            return Err(Error::shape(format!(
                "{} layers, config wants {}",
                self.layers.len(),
                config.num_layers
            )));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.heads.len() != config.num_heads {
                return Err(Error::shape(format!("layer {l}: wrong head count")));
            }
            let din = config.layer_input_dim(l, d_in);
            for head in &layer.heads {
                if head.weight.shape() != [din, config.d_head]
                    || head.attn.shape() != [2 * config.d_head, 1]
                {
                    return Err(Error::shape(format!("layer {l}: head parameter shapes")));
                }
            }
        }
        if self.head.w2.shape() != [config.graph_dim(), TRAIT_COUNT]
            || self.head.b2.shape() != [TRAIT_COUNT]
        {
            return Err(Error::shape("prediction head shapes"));
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape) -> GatParams<Var> {
        self.map(|t| tape.leaf(t.clone()))
    }
}

/// Glorot-uniform bound for a `fan_in x fan_out` weight.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// `rows x cols` matrix drawn uniformly from the Glorot range.
pub fn glorot_uniform<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let bound = glorot_bound(rows, cols);
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::matrix(rows, cols, data).expect("sized rows*cols")
}

/// Draws GAT parameters from `rng`: per layer and head `W` then `a`, then
/// `W2`; `b2` starts at zero.
pub fn init_params_with<R: Rng>(config: &GatConfig, d_in: usize, rng: &mut R) -> GatParams {
    let layers = (0..config.num_layers)
        .map(|l| {
            let din = config.layer_input_dim(l, d_in);
            GatLayerParams {
                heads: (0..config.num_heads)
                    .map(|_| AttentionHead {
                        weight: glorot_uniform(rng, din, config.d_head),
                        attn: glorot_uniform(rng, 2 * config.d_head, 1),
                    })
                    .collect(),
            }
        })
        .collect();
    GatParams {
        layers,
        head: GatHeadParams {
            w2: glorot_uniform(rng, config.graph_dim(), TRAIT_COUNT),
            b2: Tensor::zeros(vec![TRAIT_COUNT]),
        },
    }
}

/// Deterministic initialization from a seed.
pub fn init_params(config: &GatConfig, d_in: usize, seed: u64) -> GatParams {
    init_params_with(config, d_in, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Edge list split into source and destination columns. Messages flow
/// from `src` to `dst`; attention is normalized per destination.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeIndex {
    pub num_nodes: usize,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
}

impl EdgeIndex {
    pub fn from_graph(graph: &TokenGraph) -> Self {
        let (src, dst) = graph.edges.iter().copied().unzip();
        EdgeIndex {
            num_nodes: graph.num_nodes,
            src,
            dst,
        }
    }
}

/// Tape handles produced by one GAT layer.
#[derive(Debug, Clone)]
pub struct LayerVars {
    /// Per head, `E x 1` attention logits after the LeakyReLU.
    pub logits: Vec<Var>,
    /// Per head, `E x 1` normalized attention weights.
    pub alpha: Vec<Var>,
    pub output: Var,
}

/// Per-edge attention logits for one head.
pub fn attention_logits(
    tape: &mut Tape,
    features: Var,
    edges: &EdgeIndex,
    head: &AttentionHead<Var>,
    slope: f64,
) -> Result<(Var, Var)> {
    let projected = tape.matmul(features, head.weight)?;
    let at_dst = tape.gather_rows(projected, &edges.dst)?;
    let at_src = tape.gather_rows(projected, &edges.src)?;
    let pair = tape.concat_cols(&[at_dst, at_src])?;
    let raw = tape.matmul(pair, head.attn)?;
    Ok((tape.leaky_relu(raw, slope), at_src))
}

/// One multi-head attention layer.
pub fn gat_layer(
    tape: &mut Tape,
    features: Var,
    edges: &EdgeIndex,
    params: &GatLayerParams<Var>,
    combine: HeadCombine,
    config: &GatConfig,
) -> Result<LayerVars> {
    let mut logits = Vec::with_capacity(params.heads.len());
    let mut alpha = Vec::with_capacity(params.heads.len());
    let mut outputs = Vec::with_capacity(params.heads.len());
    for head in &params.heads {
        let (e, messages) =
            attention_logits(tape, features, edges, head, config.attention_slope)?;
        let a = tape.segment_softmax(e, &edges.dst, edges.num_nodes)?;
        let weighted = tape.mul_rows(messages, a)?;
        let aggregated = tape.scatter_add_rows(weighted, &edges.dst, edges.num_nodes)?;
        outputs.push(tape.leaky_relu(aggregated, config.activation_slope));
        logits.push(e);
        alpha.push(a);
    }
    let output = match combine {
        HeadCombine::Concat => tape.concat_cols(&outputs)?,
        HeadCombine::Mean => {
            let mut acc = outputs[0];
            for &o in &outputs[1..] {
                acc = tape.add(acc, o)?;
            }
            tape.scale(acc, 1.0 / outputs.len() as f64)
        }
    };
    Ok(LayerVars {
        logits,
        alpha,
        output,
    })
}

/// Tape handles for a full GAT pass.
#[derive(Debug, Clone)]
pub struct GatVars {
    pub layers: Vec<LayerVars>,
    pub pooled: Var,
    /// `B x TRAIT_COUNT`.
    pub s2: Var,
}

/// All layers, mean pooling per graph and the prediction head.
pub fn gat_forward_on_tape(
    tape: &mut Tape,
    batch: &GraphBatch,
    params: &GatParams<Var>,
    config: &GatConfig,
) -> Result<GatVars> {
    let edges = EdgeIndex::from_graph(&batch.graph);
    let mut h = tape.constant(batch.graph.node_features.clone());
    let mut layers = Vec::with_capacity(params.layers.len());
    for (l, layer) in params.layers.iter().enumerate() {
        let out = gat_layer(tape, h, &edges, layer, config.combine(l), config)?;
        h = out.output;
        layers.push(out);
    }
    let pooled = tape.segment_mean(h, &batch.segment_ids, batch.num_graphs())?;
    let linear = tape.matmul(pooled, params.head.w2)?;
    let linear = tape.add_bias(linear, params.head.b2)?;
    let s2 = tape.leaky_relu(linear, config.activation_slope);
    Ok(GatVars { layers, pooled, s2 })
}

/// Recorded intermediate values of one GAT layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// `logits[head][edge]`.
    pub logits: Vec<Vec<f64>>,
    /// `alpha[head][edge]`.
    pub alpha: Vec<Vec<f64>>,
    pub output: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatForwardTrace {
    pub edges: EdgeIndex,
    pub layers: Vec<LayerTrace>,
    pub pooled: Tensor,
    pub s2: Tensor,
}

impl GatForwardTrace {
    pub fn capture(tape: &Tape, vars: &GatVars, edges: EdgeIndex) -> Self {
        let layers = vars
            .layers
            .iter()
            .map(|l| LayerTrace {
                logits: l.logits.iter().map(|&v| tape.value(v).data().to_vec()).collect(),
                alpha: l.alpha.iter().map(|&v| tape.value(v).data().to_vec()).collect(),
                output: tape.value(l.output).clone(),
            })
            .collect();
        GatForwardTrace {
            edges,
            layers,
            pooled: tape.value(vars.pooled).clone(),
            s2: tape.value(vars.s2).clone(),
        }
    }

    /// Largest deviation from 1 of any per-node attention sum, over all
    /// layers and heads.
    pub fn max_alpha_sum_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for layer in &self.layers {
            for head in &layer.alpha {
                let mut sums = vec![0.0; self.edges.num_nodes];
                for (&a, &d) in head.iter().zip(&self.edges.dst) {
                    sums[d] += a;
                }
                for s in sums {
                    worst = worst.max((s - 1.0).abs());
                }
            }
        }
        worst
    }
}

/// Runs the GAT stream on a batch without tracking gradients of interest,
/// returning `s2` (`B x TRAIT_COUNT`) and the trace.
pub fn gat_forward(
    batch: &GraphBatch,
    params: &GatParams,
    config: &GatConfig,
) -> Result<(Tensor, GatForwardTrace)> {
    params.check_shapes(config, batch.graph.feature_dim())?;
    let mut tape = Tape::new();
    let bound = params.map(|t| tape.constant(t.clone()));
    let vars = gat_forward_on_tape(&mut tape, batch, &bound, config)?;
    let trace = GatForwardTrace::capture(&tape, &vars, EdgeIndex::from_graph(&batch.graph));
    Ok((trace.s2.clone(), trace))
}
