use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::layers::{sigmoid, Act, ActivationFn, Aux, Layer, LayerSpec, Mode, Param, Shape3};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensorkit::Tensor;

/// Node input index 0 is the graph input; index `k + 1` is node `k`.
pub const GRAPH_INPUT: usize = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub name: String,
    pub inputs: Vec<usize>,
    pub layer: LayerSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub name: String,
    pub inputs: Vec<usize>,
    pub layer: Layer,
    pub out_shape: Shape3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub name: String,
    pub kind: String,
    pub output_shape: Shape3,
    pub params: usize,
    pub macs: u64,
}

/// Incremental construction with shape inference at every step.
#[derive(Debug, Clone)]
pub struct GraphBuilder {
    architecture: String,
    input_shape: Shape3,
    nodes: Vec<NodeSpec>,
    shapes: Vec<Shape3>,
}

impl GraphBuilder {
    pub fn new(architecture: &str, input_shape: Shape3) -> Self {
        Self {
            architecture: architecture.into(),
            input_shape,
            nodes: Vec::new(),
            shapes: vec![input_shape],
        }
    }

    /// Index of the most recently added node (or the graph input).
    pub fn last(&self) -> usize {
        self.nodes.len()
    }

    pub fn shape(&self, id: usize) -> Shape3 {
        self.shapes[id]
    }

    pub fn add(&mut self, name: &str, layer: LayerSpec, inputs: &[usize]) -> Result<usize> {
        if let Some(&bad) = inputs.iter().find(|&&i| i > self.nodes.len()) {
            return Err(Error::Shape(format!("{name}: input {bad} does not exist yet")));
        }
        let in_shapes: Vec<Shape3> = inputs.iter().map(|&i| self.shapes[i]).collect();
        let out = layer
            .out_shape(&in_shapes)
            .map_err(|e| Error::Shape(format!("{name}: {e}")))?;
        self.nodes.push(NodeSpec {
            name: name.into(),
            inputs: inputs.to_vec(),
            layer,
        });
        self.shapes.push(out);
        Ok(self.nodes.len())
    }

    /// Append a node fed by the previous one.
    pub fn then(&mut self, name: &str, layer: LayerSpec) -> Result<usize> {
        let prev = self.last();
        self.add(name, layer, &[prev])
    }

    pub fn build(self, seed: u64) -> Result<ModelGraph> {
        ModelGraph::from_specs(&self.architecture, self.input_shape, self.nodes, seed)
    }
}

/// Forward activations and auxiliary values kept for backpropagation.
pub(crate) struct Cache {
    input: Act,
    outputs: Vec<Act>,
    aux: Vec<Aux>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub architecture: String,
    pub input_shape: Shape3,
    pub nodes: Vec<Node>,
}

impl ModelGraph {
    /// Topologically ordered nodes; each may only read earlier nodes, every
    /// output but the last must be consumed, and the last node must be a
    /// sigmoid over a single unit.
    pub fn from_specs(architecture: &str, input_shape: Shape3, specs: Vec<NodeSpec>, seed: u64) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Shape("graph has no nodes".into()));
        }
        let mut r = Rng::seed_from_u64(seed);
        let mut shapes = vec![input_shape];
        let mut consumed = vec![false; specs.len() + 1];
        let mut nodes = Vec::with_capacity(specs.len());
        for (k, s) in specs.into_iter().enumerate() {
            if s.inputs.is_empty() || s.inputs.iter().any(|&i| i > k) {
                return Err(Error::Shape(format!("{}: inputs {:?} break topological order", s.name, s.inputs)));
            }
            let in_shapes: Vec<Shape3> = s.inputs.iter().map(|&i| shapes[i]).collect();
            let out_shape = s.layer.out_shape(&in_shapes).map_err(|e| Error::Shape(format!("{}: {e}", s.name)))?;
            s.inputs.iter().for_each(|&i| consumed[i] = true);
            shapes.push(out_shape);
            nodes.push(Node {
                name: s.name,
                inputs: s.inputs,
                layer: Layer::new(s.layer, &mut r),
                out_shape,
            });
        }
        if let Some(k) = consumed[..nodes.len()].iter().position(|c| !c) {
            let what = if k == 0 { "graph input".to_string() } else { nodes[k - 1].name.clone() };
            return Err(Error::Shape(format!("{what} is never consumed")));
        }
        let last = nodes.last().expect("non-empty");
        if last.out_shape != [1, 1, 1]
            || last.layer.spec
                != (LayerSpec::Activation {
                    function: ActivationFn::Sigmoid,
                })
        {
            return Err(Error::Shape("graph must end in a single sigmoid unit".into()));
        }
        Ok(Self {
            architecture: architecture.into(),
            input_shape,
            nodes,
        })
    }

    pub fn node_specs(&self) -> Vec<NodeSpec> {
        self.nodes
            .iter()
            .map(|n| NodeSpec {
                name: n.name.clone(),
                inputs: n.inputs.clone(),
                layer: n.layer.spec.clone(),
            })
            .collect()
    }

    fn in_shape(&self, i: usize) -> Shape3 {
        if i == GRAPH_INPUT {
            self.input_shape
        } else {
            self.nodes[i - 1].out_shape
        }
    }

    pub fn param_count(&self) -> usize {
        self.nodes.iter().map(|n| n.layer.param_count()).sum()
    }

    /// Sum of per-layer analytic parameter formulas.
    pub fn analytic_param_count(&self) -> usize {
        self.nodes.iter().map(|n| n.layer.spec.param_count()).sum()
    }

    /// Multiply-accumulates per single-trial inference from layer formulas.
    pub fn analytic_macs(&self) -> u64 {
        self.summary().iter().map(|s| s.macs).sum()
    }

    pub fn summary(&self) -> Vec<LayerSummary> {
        self.nodes
            .iter()
            .map(|n| LayerSummary {
                name: n.name.clone(),
                kind: n.layer.spec.kind().into(),
                output_shape: n.out_shape,
                params: n.layer.param_count(),
                macs: n.layer.spec.macs(self.in_shape(n.inputs[0])).expect("shape checked at build"),
            })
            .collect()
    }

    pub fn params(&self) -> impl Iterator<Item = &Param> {
        self.nodes.iter().flat_map(|n| n.layer.params.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.nodes.iter_mut().flat_map(|n| n.layer.params.iter_mut())
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.layer.zero_grad());
    }

    pub fn apply_max_norm(&mut self) {
        self.params_mut().for_each(Param::project);
    }

    pub(crate) fn to_act(&self, x: &Tensor) -> Result<Act> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.input_shape {
            return Err(Error::Shape(format!(
                "{} expects batch x {:?}, got {:?}",
                self.architecture, self.input_shape, s
            )));
        }
        if !x.all_finite() {
            return Err(Error::InvalidInput("input contains non-finite values".into()));
        }
        Ok(Act {
            n: s[0],
            shape: self.input_shape,
            data: x.data().to_vec(),
        })
    }

    pub(crate) fn forward_act(&self, x: Act, mode: Mode, r: &mut Rng) -> Cache {
        let mut outputs: Vec<Act> = Vec::with_capacity(self.nodes.len());
        let mut aux = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let ins: Vec<&Act> = node
                .inputs
                .iter()
                .map(|&i| if i == GRAPH_INPUT { &x } else { &outputs[i - 1] })
                .collect();
            let (o, a) = node.layer.forward(&ins, node.out_shape, mode, r);
            outputs.push(o);
            aux.push(a);
        }
        Cache { input: x, outputs, aux }
    }

    /// Train-mode forward also folds batch statistics into running buffers.
    pub(crate) fn forward_train(&mut self, x: Act, mode: Mode, r: &mut Rng) -> Cache {
        let cache = self.forward_act(x, mode, r);
        if mode != Mode::Eval {
            for (k, node) in self.nodes.iter_mut().enumerate() {
                let s = self_in_shape(&cache, &node.inputs);
                node.layer.update_running(&cache.aux[k], cache.input.n * s[1] * s[2]);
            }
        }
        cache
    }

    /// Scores in [0, 1], eval mode.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<f64>> {
        let act = self.to_act(x)?;
        let cache = self.forward_act(act, Mode::Eval, &mut Rng::seed_from_u64(0));
        let scores = cache.outputs.last().expect("non-empty").data.clone();
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numerical("non-finite score".into()));
        }
        Ok(scores)
    }

    /// Scores under an arbitrary mode; stochastic modes draw from `r`.
    pub fn forward(&self, x: &Tensor, mode: Mode, r: &mut Rng) -> Result<Vec<f64>> {
        let act = self.to_act(x)?;
        Ok(self.forward_act(act, mode, r).outputs.pop().expect("non-empty").data)
    }

    /// Mean binary cross-entropy from the pre-sigmoid logits.
    fn loss_from_cache(&self, cache: &Cache, y: &[f64]) -> Result<f64> {
        let z = self.logits(cache);
        let loss = z.iter().zip(y).map(|(&z, &y)| bce_logit(z, y)).sum::<f64>() / y.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Numerical("loss is not finite".into()));
        }
        Ok(loss)
    }

    fn logits<'a>(&self, cache: &'a Cache) -> &'a [f64] {
        let src = self.nodes.last().expect("non-empty").inputs[0];
        if src == GRAPH_INPUT {
            &cache.input.data
        } else {
            &cache.outputs[src - 1].data
        }
    }

    /// Loss of a forward pass under `mode` without touching gradients or
    /// running buffers.
    pub fn loss(&self, x: &Tensor, y: &[f64], mode: Mode, r: &mut Rng) -> Result<f64> {
        let act = self.to_act(x)?;
        check_labels(act.n, y)?;
        let cache = self.forward_act(act, mode, r);
        self.loss_from_cache(&cache, y)
    }

    /// Forward, mean BCE and a full backward pass; parameter gradients are
    /// overwritten. Returns the loss.
    pub fn forward_backward(&mut self, x: &Tensor, y: &[f64], mode: Mode, r: &mut Rng) -> Result<f64> {
        let act = self.to_act(x)?;
        check_labels(act.n, y)?;
        let cache = self.forward_train(act, mode, r);
        self.backward_cache(&cache, y)
    }

    pub(crate) fn backward_cache(&mut self, cache: &Cache, y: &[f64]) -> Result<f64> {
        let loss = self.loss_from_cache(cache, y)?;
        self.zero_grad();
        let n = y.len();
        let m = self.nodes.len();
        let mut grads: Vec<Option<Act>> = vec![None; m];
        let last = &self.nodes[m - 1];
        let src = last.inputs[0];
        if src == GRAPH_INPUT {
            return Ok(loss);
        }
        let z = self.logits(cache);
        let dz = z.iter().zip(y).map(|(&z, &y)| (sigmoid(z) - y) / n as f64).collect();
        grads[src - 1] = Some(Act {
            n,
            shape: [1, 1, 1],
            data: dz,
        });
        for k in (0..m - 1).rev() {
            let Some(g) = grads[k].take() else { continue };
            let node = &mut self.nodes[k];
            let ins: Vec<&Act> = node
                .inputs
                .iter()
                .map(|&i| if i == GRAPH_INPUT { &cache.input } else { &cache.outputs[i - 1] })
                .collect();
            let need: Vec<bool> = node.inputs.iter().map(|&i| i != GRAPH_INPUT).collect();
            let dins = node.layer.backward(&ins, &cache.outputs[k], &cache.aux[k], &g, &need);
            for (&i, d) in node.inputs.iter().zip(dins) {
                let Some(d) = d.filter(|_| i != GRAPH_INPUT) else { continue };
                match &mut grads[i - 1] {
                    Some(acc) => acc.data.iter_mut().zip(&d.data).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(d),
                }
            }
        }
        if self.params().any(|p| p.grad.iter().any(|g| !g.is_finite())) {
            return Err(Error::Numerical("non-finite gradient".into()));
        }
        Ok(loss)
    }

    /// Runs one sample through direct-loop kernels and returns the number of
    /// multiply-accumulates actually executed.
    pub fn instrumented_macs(&self) -> u64 {
        let x = Act::zeros(1, self.input_shape);
        let mut outputs: Vec<Act> = Vec::with_capacity(self.nodes.len());
        let mut macs = 0;
        for node in &self.nodes {
            let ins: Vec<&Act> = node
                .inputs
                .iter()
                .map(|&i| if i == GRAPH_INPUT { &x } else { &outputs[i - 1] })
                .collect();
            let o = node.layer.forward_counted(&ins, node.out_shape, &mut macs);
            outputs.push(o);
        }
        macs
    }
}

fn self_in_shape(cache: &Cache, inputs: &[usize]) -> Shape3 {
    let i = inputs[0];
    if i == GRAPH_INPUT {
        cache.input.shape
    } else {
        cache.outputs[i - 1].shape
    }
}

fn check_labels(n: usize, y: &[f64]) -> Result<()> {
    if y.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} inputs", y.len())));
    }
    if y.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidInput("labels must lie in [0, 1]".into()));
    }
    Ok(())
}

/// Binary cross-entropy of a logit: softplus(z) − y·z.
pub fn bce_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z
}

/// Binary cross-entropy of a probability.
pub fn bce(p: f64, y: f64) -> f64 {
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}
