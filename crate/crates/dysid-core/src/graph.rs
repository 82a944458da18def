//! Reverse-mode automatic differentiation over time-series values.
//!
//! A [`Graph`] is a static DAG of typed nodes built once through
//! [`GraphBuilder`] and evaluated many times. Forward evaluation walks the
//! nodes in topological order; [`Graph::backward`] sweeps the reverse order,
//! mapping each node's incoming adjoint to parameter and input adjoints.
//! Adjoints of fanned-out values accumulate additively.
//!
//! Linear dynamical nodes delegate to the closed-form passes in [`crate::lti`];
//! static nodes apply their per-sample Jacobian transpose. Scalar expressions
//! (used by the denominator reparametrizations) are ordinary graphs over
//! length-1 series.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::lti::{self, MimoOperator};
use crate::par::{for_each_mut, ExecMode};
use crate::signal::{TimeSeries, TransferFunction};
use crate::stability;

/// Index of a node inside its graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Index of a parameter group inside its graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// What a parameter group feeds, which decides its initialization policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    /// Transfer-function coefficients or their reparametrization variables.
    LtiCoeff,
    /// Dense layer weight matrix.
    AffineWeight { fan_in: usize },
    /// Dense layer bias vector.
    AffineBias { fan_in: usize },
}

/// A named vector of trainable (or frozen) scalars with its gradient slot.
#[derive(Debug, Clone)]
pub struct ParamGroup {
    pub name: String,
    pub values: Vec<f64>,
    pub grads: Vec<f64>,
    pub trainable: bool,
    pub role: ParamRole,
}

/// Denominator storage of one LTI entry.
#[derive(Debug, Clone)]
pub enum Denominator {
    /// Direct coefficients `a_1..a_{n_a}`.
    Raw(ParamId),
    /// Second-order conjugate-pole parametrization `(rho, psi)`.
    Conj(ParamId),
    /// Second-order full-stability-region parametrization `(alpha_1, alpha_2)`.
    Full(ParamId),
}

#[derive(Debug, Clone)]
pub enum NodeKind {
    /// Named entry node; its value is bound by `forward_eval`.
    Input,
    /// Grid of rational transfer functions (`inputs x outputs` channels).
    Lti {
        numerators: Vec<ParamId>,
        denominators: Vec<Denominator>,
        in_channels: usize,
        out_channels: usize,
    },
    /// Grid of FIR kernels; forward and backward are pure convolutions.
    Fir {
        numerators: Vec<ParamId>,
        in_channels: usize,
        out_channels: usize,
    },
    /// Per-sample dense map `y_t = W u_t + bias`.
    Affine { weight: ParamId, bias: ParamId },
    Tanh,
    Sigmoid,
    Cos,
    Abs,
    /// Constant per-sample map `y = gain * x + offset`.
    Scale { gain: f64, offset: f64 },
    /// Elementwise sum of all inputs.
    Add,
    /// Elementwise product of two inputs.
    Mul,
    /// Channel concatenation of the inputs.
    Concat,
    /// Channel range `lo..hi` of the input.
    Split { lo: usize, hi: usize },
    /// Mean squared error between its two inputs; output is a 1x1 series.
    MseLoss,
}

#[derive(Debug, Clone)]
struct Node {
    name: String,
    kind: NodeKind,
    inputs: Vec<usize>,
    out_channels: usize,
}

/// Static computation graph with parameter registry and gradient slots.
#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    values: Vec<Option<TimeSeries>>,
    grads: Vec<Option<TimeSeries>>,
    params: Vec<ParamGroup>,
    entry: Vec<(String, usize)>,
    output: usize,
    exec: ExecMode,
    forward_done: bool,
}

/// Incremental graph construction; node inputs must already exist, so the
/// construction order is a topological order by design.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    params: Vec<ParamGroup>,
    entry: Vec<(String, usize)>,
    names: HashSet<String>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Reopens a finished graph for extension. Returns the builder and the
    /// graph's previous output node.
    pub fn extend(graph: Graph) -> (Self, NodeId) {
        let names = graph.nodes.iter().map(|n| n.name.clone()).collect();
        let builder = GraphBuilder {
            nodes: graph.nodes,
            params: graph.params,
            entry: graph.entry,
            names,
        };
        (builder, NodeId(graph.output))
    }

    fn push(&mut self, name: &str, kind: NodeKind, inputs: Vec<NodeId>, out_channels: usize) -> Result<NodeId> {
        if !self.names.insert(name.to_string()) {
            return Err(Error::Graph(format!("duplicate node name '{name}'")));
        }
        for id in &inputs {
            if id.0 >= self.nodes.len() {
                return Err(Error::Graph(format!("node '{name}' references unknown input")));
            }
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            name: name.to_string(),
            kind,
            inputs: inputs.into_iter().map(|n| n.0).collect(),
            out_channels,
        });
        Ok(NodeId(id))
    }

    fn add_param(&mut self, name: String, values: Vec<f64>, trainable: bool, role: ParamRole) -> ParamId {
        let id = ParamId(self.params.len());
        let grads = vec![0.0; values.len()];
        self.params.push(ParamGroup {
            name,
            values,
            grads,
            trainable,
            role,
        });
        id
    }

    fn channels_of(&self, id: NodeId) -> usize {
        self.nodes[id.0].out_channels
    }

    /// Declares a named entry node carrying `channels` channels.
    pub fn input(&mut self, name: &str, channels: usize) -> Result<NodeId> {
        let id = self.push(name, NodeKind::Input, vec![], channels)?;
        self.entry.push((name.to_string(), id.0));
        Ok(id)
    }

    /// Adds a linear dynamical node from explicit per-entry transfer functions
    /// (entry `(k, h)` at index `k * in_channels + h`).
    pub fn lti(
        &mut self,
        name: &str,
        input: NodeId,
        entries: Vec<TransferFunction>,
        trainable: bool,
    ) -> Result<NodeId> {
        let p = self.channels_of(input);
        if entries.len() % p != 0 {
            return Err(Error::Graph(format!(
                "node '{name}': {} entries do not tile {p} input channels",
                entries.len()
            )));
        }
        let m = entries.len() / p;
        let mut numerators = Vec::with_capacity(entries.len());
        let mut denominators = Vec::with_capacity(entries.len());
        for (idx, tf) in entries.into_iter().enumerate() {
            let (k, h) = (idx / p, idx % p);
            numerators.push(self.add_param(
                format!("{name}.b.{k}.{h}"),
                tf.b,
                trainable,
                ParamRole::LtiCoeff,
            ));
            denominators.push(Denominator::Raw(self.add_param(
                format!("{name}.a.{k}.{h}"),
                tf.a,
                trainable,
                ParamRole::LtiCoeff,
            )));
        }
        self.push(
            name,
            NodeKind::Lti {
                numerators,
                denominators,
                in_channels: p,
                out_channels: m,
            },
            vec![input],
            m,
        )
    }

    /// Adds a second-order linear dynamical node whose denominators live in a
    /// stable reparametrization (`conj` or `full`); every entry gets numerator
    /// length `n_b + 1` and two unconstrained denominator variables.
    pub fn lti_reparam(
        &mut self,
        name: &str,
        input: NodeId,
        out_channels: usize,
        n_b: usize,
        kind: ReparamKind,
    ) -> Result<NodeId> {
        let p = self.channels_of(input);
        let mut numerators = Vec::new();
        let mut denominators = Vec::new();
        for k in 0..out_channels {
            for h in 0..p {
                numerators.push(self.add_param(
                    format!("{name}.b.{k}.{h}"),
                    vec![0.0; n_b + 1],
                    true,
                    ParamRole::LtiCoeff,
                ));
                let pid = self.add_param(
                    format!("{name}.{}.{k}.{h}", kind.key()),
                    vec![0.0, 0.0],
                    true,
                    ParamRole::LtiCoeff,
                );
                denominators.push(match kind {
                    ReparamKind::Conj => Denominator::Conj(pid),
                    ReparamKind::Full => Denominator::Full(pid),
                });
            }
        }
        self.push(
            name,
            NodeKind::Lti {
                numerators,
                denominators,
                in_channels: p,
                out_channels,
            },
            vec![input],
            out_channels,
        )
    }

    /// Adds an FIR node from per-entry kernels.
    pub fn fir(
        &mut self,
        name: &str,
        input: NodeId,
        kernels: Vec<Vec<f64>>,
        trainable: bool,
    ) -> Result<NodeId> {
        let p = self.channels_of(input);
        if kernels.len() % p != 0 {
            return Err(Error::Graph(format!(
                "node '{name}': {} kernels do not tile {p} input channels",
                kernels.len()
            )));
        }
        let m = kernels.len() / p;
        let mut numerators = Vec::with_capacity(kernels.len());
        for (idx, b) in kernels.into_iter().enumerate() {
            let (k, h) = (idx / p, idx % p);
            numerators.push(self.add_param(
                format!("{name}.b.{k}.{h}"),
                b,
                trainable,
                ParamRole::LtiCoeff,
            ));
        }
        self.push(
            name,
            NodeKind::Fir {
                numerators,
                in_channels: p,
                out_channels: m,
            },
            vec![input],
            m,
        )
    }

    /// Adds a frozen discrete accumulator (per-channel running sum).
    pub fn integrator(&mut self, name: &str, input: NodeId) -> Result<NodeId> {
        let p = self.channels_of(input);
        let mut entries = Vec::with_capacity(p * p);
        for k in 0..p {
            for h in 0..p {
                entries.push(if k == h {
                    TransferFunction::integrator()
                } else {
                    TransferFunction::new(vec![0.0], vec![])
                });
            }
        }
        self.lti(name, input, entries, false)
    }

    /// Adds a per-sample dense map with explicit initial weight (row-major
    /// `out x in`) and bias.
    pub fn affine(
        &mut self,
        name: &str,
        input: NodeId,
        out_channels: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<NodeId> {
        let p = self.channels_of(input);
        if weight.len() != out_channels * p || bias.len() != out_channels {
            return Err(Error::Graph(format!(
                "node '{name}': weight/bias sizes do not match {out_channels}x{p}"
            )));
        }
        let w = self.add_param(
            format!("{name}.weight"),
            weight,
            true,
            ParamRole::AffineWeight { fan_in: p },
        );
        let b = self.add_param(
            format!("{name}.bias"),
            bias,
            true,
            ParamRole::AffineBias { fan_in: p },
        );
        self.push(
            name,
            NodeKind::Affine { weight: w, bias: b },
            vec![input],
            out_channels,
        )
    }

    /// Zero-initialized dense map; weights are filled in by the initializer.
    pub fn affine_zeroed(&mut self, name: &str, input: NodeId, out_channels: usize) -> Result<NodeId> {
        let p = self.channels_of(input);
        self.affine(name, input, out_channels, vec![0.0; out_channels * p], vec![0.0; out_channels])
    }

    pub fn tanh(&mut self, name: &str, input: NodeId) -> Result<NodeId> {
        let c = self.channels_of(input);
        self.push(name, NodeKind::Tanh, vec![input], c)
    }

    pub fn sigmoid(&mut self, name: &str, input: NodeId) -> Result<NodeId> {
        let c = self.channels_of(input);
        self.push(name, NodeKind::Sigmoid, vec![input], c)
    }

    pub fn cos(&mut self, name: &str, input: NodeId) -> Result<NodeId> {
        let c = self.channels_of(input);
        self.push(name, NodeKind::Cos, vec![input], c)
    }

    pub fn abs(&mut self, name: &str, input: NodeId) -> Result<NodeId> {
        let c = self.channels_of(input);
        self.push(name, NodeKind::Abs, vec![input], c)
    }

    pub fn scale(&mut self, name: &str, input: NodeId, gain: f64, offset: f64) -> Result<NodeId> {
        let c = self.channels_of(input);
        self.push(name, NodeKind::Scale { gain, offset }, vec![input], c)
    }

    pub fn add(&mut self, name: &str, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::Graph(format!("node '{name}': add needs inputs")));
        }
        let c = self.channels_of(inputs[0]);
        for id in inputs {
            if self.channels_of(*id) != c {
                return Err(Error::Graph(format!(
                    "node '{name}': add inputs disagree on channel count"
                )));
            }
        }
        self.push(name, NodeKind::Add, inputs.to_vec(), c)
    }

    pub fn mul(&mut self, name: &str, x: NodeId, y: NodeId) -> Result<NodeId> {
        let c = self.channels_of(x);
        if self.channels_of(y) != c {
            return Err(Error::Graph(format!(
                "node '{name}': mul inputs disagree on channel count"
            )));
        }
        self.push(name, NodeKind::Mul, vec![x, y], c)
    }

    pub fn concat(&mut self, name: &str, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::Graph(format!("node '{name}': concat needs inputs")));
        }
        let c = inputs.iter().map(|id| self.channels_of(*id)).sum();
        self.push(name, NodeKind::Concat, inputs.to_vec(), c)
    }

    pub fn split(&mut self, name: &str, input: NodeId, lo: usize, hi: usize) -> Result<NodeId> {
        let c = self.channels_of(input);
        if lo >= hi || hi > c {
            return Err(Error::Graph(format!(
                "node '{name}': split range {lo}..{hi} out of {c} channels"
            )));
        }
        self.push(name, NodeKind::Split { lo, hi }, vec![input], hi - lo)
    }

    pub fn mse_loss(&mut self, name: &str, pred: NodeId, target: NodeId) -> Result<NodeId> {
        if self.channels_of(pred) != self.channels_of(target) {
            return Err(Error::Graph(format!(
                "node '{name}': loss inputs disagree on channel count"
            )));
        }
        self.push(name, NodeKind::MseLoss, vec![pred, target], 1)
    }

    /// Finishes the graph with the given output node.
    pub fn build(self, output: NodeId) -> Result<Graph> {
        if output.0 >= self.nodes.len() {
            return Err(Error::Graph("output node does not exist".into()));
        }
        let n = self.nodes.len();
        Ok(Graph {
            values: vec![None; n],
            grads: vec![None; n],
            nodes: self.nodes,
            params: self.params,
            entry: self.entry,
            output: output.0,
            exec: ExecMode::default(),
            forward_done: false,
        })
    }
}

/// Which stable second-order reparametrization a denominator uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReparamKind {
    Conj,
    Full,
}

impl ReparamKind {
    fn key(self) -> &'static str {
        match self {
            ReparamKind::Conj => "conj",
            ReparamKind::Full => "full",
        }
    }
}

// Elementwise maps get chunked onto the pool only past this length.
const PAR_ELEMWISE_MIN: usize = 1 << 14;

impl Graph {
    /// Sets how independent inner loops are scheduled.
    pub fn set_exec_mode(&mut self, mode: ExecMode) {
        self.exec = mode;
    }

    pub fn exec_mode(&self) -> ExecMode {
        self.exec
    }

    /// Names and channel counts of the entry nodes.
    pub fn input_names(&self) -> Vec<(String, usize)> {
        self.entry
            .iter()
            .map(|(n, i)| (n.clone(), self.nodes[*i].out_channels))
            .collect()
    }

    /// Channel count of the output node.
    pub fn output_channels(&self) -> usize {
        self.nodes[self.output].out_channels
    }

    /// Evaluates every node in topological order and returns the output value.
    pub fn forward_eval(&mut self, inputs: &[(&str, &TimeSeries)]) -> Result<TimeSeries> {
        self.forward_done = false;
        // Bind entry nodes.
        let mut bound: HashMap<&str, &TimeSeries> = HashMap::new();
        for (name, series) in inputs {
            bound.insert(name, series);
        }
        for (name, idx) in &self.entry {
            let series = bound
                .remove(name.as_str())
                .ok_or_else(|| Error::MissingInput(name.clone()))?;
            let want = self.nodes[*idx].out_channels;
            if series.channels() != want {
                return Err(Error::ShapeMismatch {
                    context: format!("input '{name}'"),
                    expected: format!("{want} channels"),
                    got: format!("{}", series.channels()),
                });
            }
            self.values[*idx] = Some(series.clone());
        }
        if let Some(extra) = bound.keys().next() {
            return Err(Error::Graph(format!("unknown input '{extra}'")));
        }

        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].kind, NodeKind::Input) {
                continue;
            }
            let value = self.node_forward(i)?;
            self.values[i] = Some(value);
        }
        self.forward_done = true;
        Ok(self.values[self.output].clone().expect("output evaluated"))
    }

    /// Value of the graph output from the latest forward pass.
    pub fn output_value(&self) -> Option<&TimeSeries> {
        self.values[self.output].as_ref()
    }

    /// Value of a named node from the latest forward pass.
    pub fn node_value(&self, name: &str) -> Option<&TimeSeries> {
        let idx = self.nodes.iter().position(|n| n.name == name)?;
        self.values[idx].as_ref()
    }

    /// Value of a node by id from the latest forward pass.
    pub fn node_value_by_id(&self, id: NodeId) -> Option<&TimeSeries> {
        self.values[id.0].as_ref()
    }

    /// Replaces every group's gradient vector (gradient averaging).
    pub(crate) fn overwrite_grads(&mut self, grads: impl Iterator<Item = Vec<f64>>) {
        for (p, g) in self.params.iter_mut().zip(grads) {
            debug_assert_eq!(p.grads.len(), g.len());
            p.grads = g;
        }
    }

    /// Reverse sweep from a scalar output, seeding the adjoint with one.
    pub fn backward(&mut self) -> Result<()> {
        let out = self.values[self.output]
            .as_ref()
            .ok_or(Error::BackwardBeforeForward)?;
        if out.scalar().is_none() {
            return Err(Error::ShapeMismatch {
                context: "backward".into(),
                expected: "scalar (1x1) output".into(),
                got: format!("{:?}", out.shape()),
            });
        }
        let mut seed = TimeSeries::zeros(1, 1);
        seed.set(0, 0, 1.0);
        self.backward_seeded(&seed)
    }

    /// Reverse sweep with an explicit adjoint on the output node.
    pub fn backward_seeded(&mut self, seed: &TimeSeries) -> Result<()> {
        if !self.forward_done {
            return Err(Error::BackwardBeforeForward);
        }
        {
            let out = self.values[self.output].as_ref().unwrap();
            if !seed.same_shape(out) {
                return Err(Error::ShapeMismatch {
                    context: "backward_seeded".into(),
                    expected: format!("{:?}", out.shape()),
                    got: format!("{:?}", seed.shape()),
                });
            }
        }
        for p in &mut self.params {
            p.grads.iter_mut().for_each(|g| *g = 0.0);
        }
        for (i, v) in self.values.iter().enumerate() {
            let v = v.as_ref().ok_or(Error::BackwardBeforeForward)?;
            self.grads[i] = Some(TimeSeries::zeros(v.samples(), v.channels()));
        }
        self.grads[self.output] = Some(seed.clone());

        for i in (0..self.nodes.len()).rev() {
            self.node_backward(i)?;
        }
        Ok(())
    }

    /// Adjoint of a named entry node after a backward pass.
    pub fn input_grad(&self, name: &str) -> Option<&TimeSeries> {
        let idx = self.entry.iter().find(|(n, _)| n == name)?.1;
        self.grads[idx].as_ref()
    }

    // ---- parameter registry ----

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn param(&self, id: ParamId) -> &ParamGroup {
        &self.params[id.0]
    }

    pub fn param_values_mut(&mut self, id: ParamId) -> &mut Vec<f64> {
        &mut self.params[id.0].values
    }

    pub fn params(&self) -> &[ParamGroup] {
        &self.params
    }

    /// Overwrites a parameter group by name, checking the length.
    pub fn set_param_by_name(&mut self, name: &str, values: &[f64]) -> Result<()> {
        let group = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::Graph(format!("unknown parameter group '{name}'")))?;
        if group.values.len() != values.len() {
            return Err(Error::ShapeMismatch {
                context: format!("parameter group '{name}'"),
                expected: format!("{} values", group.values.len()),
                got: format!("{}", values.len()),
            });
        }
        group.values.copy_from_slice(values);
        Ok(())
    }

    // ---- forward dispatch ----

    fn input_value(&self, node: usize, slot: usize) -> &TimeSeries {
        let idx = self.nodes[node].inputs[slot];
        self.values[idx].as_ref().expect("input evaluated before use")
    }

    fn node_forward(&self, i: usize) -> Result<TimeSeries> {
        let node = &self.nodes[i];
        match &node.kind {
            NodeKind::Input => unreachable!("inputs are bound, not computed"),
            NodeKind::Lti {
                numerators,
                denominators,
                in_channels,
                out_channels,
            } => {
                let op = self.materialize_lti(numerators, denominators, *in_channels, *out_channels)?;
                op.forward(self.input_value(i, 0), self.exec)
            }
            NodeKind::Fir {
                numerators,
                in_channels,
                out_channels,
            } => {
                let u = self.input_value(i, 0);
                let rows = crate::par::map_indexed(self.exec, *out_channels, |k| {
                    let mut acc = vec![0.0; u.samples()];
                    for h in 0..*in_channels {
                        let b = &self.params[numerators[k * in_channels + h].0].values;
                        let y = lti::fir_forward(b, u.channel(h));
                        for (a, v) in acc.iter_mut().zip(y) {
                            *a += v;
                        }
                    }
                    acc
                });
                TimeSeries::from_channels(rows)
            }
            NodeKind::Affine { weight, bias } => {
                let u = self.input_value(i, 0);
                let w = &self.params[weight.0].values;
                let b = &self.params[bias.0].values;
                let (p, m) = (u.channels(), node.out_channels);
                let t_len = u.samples();
                let rows = crate::par::map_indexed(self.exec, m, |k| {
                    let mut row = vec![b[k]; t_len];
                    for h in 0..p {
                        let w_kh = w[k * p + h];
                        for (r, &x) in row.iter_mut().zip(u.channel(h)) {
                            *r += w_kh * x;
                        }
                    }
                    row
                });
                TimeSeries::from_channels(rows)
            }
            NodeKind::Tanh => Ok(self.elementwise(i, |x| x.tanh())),
            NodeKind::Sigmoid => Ok(self.elementwise(i, sigmoid)),
            NodeKind::Cos => Ok(self.elementwise(i, f64::cos)),
            NodeKind::Abs => Ok(self.elementwise(i, f64::abs)),
            NodeKind::Scale { gain, offset } => {
                let (g, o) = (*gain, *offset);
                Ok(self.elementwise(i, move |x| g * x + o))
            }
            NodeKind::Add => {
                let first = self.input_value(i, 0);
                let mut out = first.clone();
                for slot in 1..node.inputs.len() {
                    let other = self.input_value(i, slot);
                    self.check_same_shape(node, first, other)?;
                    for (o, &v) in out.as_mut_slice().iter_mut().zip(other.as_slice()) {
                        *o += v;
                    }
                }
                Ok(out)
            }
            NodeKind::Mul => {
                let x = self.input_value(i, 0);
                let y = self.input_value(i, 1);
                self.check_same_shape(node, x, y)?;
                let mut out = x.clone();
                for (o, &v) in out.as_mut_slice().iter_mut().zip(y.as_slice()) {
                    *o *= v;
                }
                Ok(out)
            }
            NodeKind::Concat => {
                let mut channels = Vec::with_capacity(node.out_channels);
                let first = self.input_value(i, 0);
                for slot in 0..node.inputs.len() {
                    let v = self.input_value(i, slot);
                    if v.samples() != first.samples() {
                        return Err(Error::ShapeMismatch {
                            context: format!("node '{}'", node.name),
                            expected: format!("{} samples", first.samples()),
                            got: format!("{}", v.samples()),
                        });
                    }
                    for c in 0..v.channels() {
                        channels.push(v.channel(c).to_vec());
                    }
                }
                TimeSeries::from_channels(channels)
            }
            NodeKind::Split { lo, hi } => {
                let v = self.input_value(i, 0);
                TimeSeries::from_channels((*lo..*hi).map(|c| v.channel(c).to_vec()).collect())
            }
            NodeKind::MseLoss => {
                let pred = self.input_value(i, 0);
                let target = self.input_value(i, 1);
                self.check_same_shape(node, pred, target)?;
                let n = (pred.samples() * pred.channels()) as f64;
                let sum: f64 = pred
                    .as_slice()
                    .iter()
                    .zip(target.as_slice())
                    .map(|(&p, &t)| (p - t) * (p - t))
                    .sum();
                let mut out = TimeSeries::zeros(1, 1);
                out.set(0, 0, sum / n);
                Ok(out)
            }
        }
    }

    fn check_same_shape(&self, node: &Node, a: &TimeSeries, b: &TimeSeries) -> Result<()> {
        if !a.same_shape(b) {
            return Err(Error::ShapeMismatch {
                context: format!("node '{}'", node.name),
                expected: format!("{:?}", a.shape()),
                got: format!("{:?}", b.shape()),
            });
        }
        Ok(())
    }

    fn elementwise(&self, i: usize, f: impl Fn(f64) -> f64 + Sync + Send) -> TimeSeries {
        let mut out = self.input_value(i, 0).clone();
        let data = out.as_mut_slice();
        if data.len() >= PAR_ELEMWISE_MIN {
            for_each_mut(self.exec, data, |x| *x = f(*x));
        } else {
            data.iter_mut().for_each(|x| *x = f(*x));
        }
        out
    }

    fn materialize_lti(
        &self,
        numerators: &[ParamId],
        denominators: &[Denominator],
        in_channels: usize,
        out_channels: usize,
    ) -> Result<MimoOperator> {
        let entries = numerators
            .iter()
            .zip(denominators)
            .map(|(num, den)| {
                let b = self.params[num.0].values.clone();
                let a = match den {
                    Denominator::Raw(pid) => self.params[pid.0].values.clone(),
                    Denominator::Conj(pid) => {
                        let v = &self.params[pid.0].values;
                        let (a1, a2) = stability::conj_coeffs(v[0], v[1]);
                        vec![a1, a2]
                    }
                    Denominator::Full(pid) => {
                        let v = &self.params[pid.0].values;
                        let (a1, a2) = stability::full_coeffs(v[0], v[1]);
                        vec![a1, a2]
                    }
                };
                TransferFunction::new(b, a)
            })
            .collect();
        MimoOperator::new(entries, in_channels, out_channels)
    }

    // ---- backward dispatch ----

    fn node_backward(&mut self, i: usize) -> Result<()> {
        // Split the gradient storage so the node's own adjoint can be read
        // while the (strictly earlier) input adjoints are written.
        let Graph {
            nodes,
            values,
            grads,
            params,
            exec,
            ..
        } = self;
        let node = &nodes[i];
        let (g_lo, g_hi) = grads.split_at_mut(i);
        let grad_i = g_hi[0].as_ref().expect("grad slot allocated");
        let value_of = |slot: usize| -> &TimeSeries {
            values[node.inputs[slot]].as_ref().expect("value present")
        };
        let own_value = values[i].as_ref().expect("value present");

        match &node.kind {
            NodeKind::Input => {}
            NodeKind::Lti {
                numerators,
                denominators,
                in_channels,
                out_channels,
            } => {
                let entries = numerators
                    .iter()
                    .zip(denominators)
                    .map(|(num, den)| {
                        let b = params[num.0].values.clone();
                        let a = match den {
                            Denominator::Raw(pid) => params[pid.0].values.clone(),
                            Denominator::Conj(pid) => {
                                let v = &params[pid.0].values;
                                let (a1, a2) = stability::conj_coeffs(v[0], v[1]);
                                vec![a1, a2]
                            }
                            Denominator::Full(pid) => {
                                let v = &params[pid.0].values;
                                let (a1, a2) = stability::full_coeffs(v[0], v[1]);
                                vec![a1, a2]
                            }
                        };
                        TransferFunction::new(b, a)
                    })
                    .collect();
                let op = MimoOperator::new(entries, *in_channels, *out_channels)?;
                let u = value_of(0);
                let bundle = op.backward(u, grad_i, *exec)?;
                for k in 0..*out_channels {
                    for h in 0..*in_channels {
                        let idx = k * in_channels + h;
                        let bp = &mut params[numerators[idx].0];
                        if bp.trainable {
                            for (g, v) in bp.grads.iter_mut().zip(&bundle.b_bar[k][h]) {
                                *g += v;
                            }
                        }
                        let a_bar = &bundle.a_bar[k][h];
                        match &denominators[idx] {
                            Denominator::Raw(pid) => {
                                let ap = &mut params[pid.0];
                                if ap.trainable {
                                    for (g, v) in ap.grads.iter_mut().zip(a_bar) {
                                        *g += v;
                                    }
                                }
                            }
                            Denominator::Conj(pid) => {
                                let ap = &mut params[pid.0];
                                if ap.trainable {
                                    let (d0, d1) = stability::conj_backward(
                                        ap.values[0],
                                        ap.values[1],
                                        a_bar[0],
                                        a_bar[1],
                                    );
                                    ap.grads[0] += d0;
                                    ap.grads[1] += d1;
                                }
                            }
                            Denominator::Full(pid) => {
                                let ap = &mut params[pid.0];
                                if ap.trainable {
                                    let (d0, d1) = stability::full_backward(
                                        ap.values[0],
                                        ap.values[1],
                                        a_bar[0],
                                        a_bar[1],
                                    );
                                    ap.grads[0] += d0;
                                    ap.grads[1] += d1;
                                }
                            }
                        }
                    }
                }
                accumulate(&mut g_lo[node.inputs[0]], &bundle.u_bar);
            }
            NodeKind::Fir {
                numerators,
                in_channels,
                out_channels,
            } => {
                let u = value_of(0);
                let mut u_bar = TimeSeries::zeros(u.samples(), *in_channels);
                for k in 0..*out_channels {
                    for h in 0..*in_channels {
                        let pid = numerators[k * in_channels + h];
                        let b = params[pid.0].values.clone();
                        let (b_bar, du) =
                            lti::fir_backward(u.channel(h), &b, grad_i.channel(k))?;
                        let bp = &mut params[pid.0];
                        if bp.trainable {
                            for (g, v) in bp.grads.iter_mut().zip(&b_bar) {
                                *g += v;
                            }
                        }
                        for (dst, v) in u_bar.channel_mut(h).iter_mut().zip(du) {
                            *dst += v;
                        }
                    }
                }
                accumulate(&mut g_lo[node.inputs[0]], &u_bar);
            }
            NodeKind::Affine { weight, bias } => {
                let u = value_of(0);
                let (p, m) = (u.channels(), node.out_channels);
                let w_vals = params[weight.0].values.clone();
                {
                    let wp = &mut params[weight.0];
                    if wp.trainable {
                        for k in 0..m {
                            let gk = grad_i.channel(k);
                            for h in 0..p {
                                let dot: f64 =
                                    gk.iter().zip(u.channel(h)).map(|(g, x)| g * x).sum();
                                wp.grads[k * p + h] += dot;
                            }
                        }
                    }
                }
                {
                    let bp = &mut params[bias.0];
                    if bp.trainable {
                        for k in 0..m {
                            bp.grads[k] += grad_i.channel(k).iter().sum::<f64>();
                        }
                    }
                }
                let mut u_bar = TimeSeries::zeros(u.samples(), p);
                for h in 0..p {
                    let ch = u_bar.channel_mut(h);
                    for k in 0..m {
                        let w_kh = w_vals[k * p + h];
                        for (dst, &g) in ch.iter_mut().zip(grad_i.channel(k)) {
                            *dst += w_kh * g;
                        }
                    }
                }
                accumulate(&mut g_lo[node.inputs[0]], &u_bar);
            }
            NodeKind::Tanh => {
                let mut u_bar = grad_i.clone();
                for (g, &y) in u_bar.as_mut_slice().iter_mut().zip(own_value.as_slice()) {
                    *g *= 1.0 - y * y;
                }
                accumulate(&mut g_lo[node.inputs[0]], &u_bar);
            }
            NodeKind::Sigmoid => {
                let mut u_bar = grad_i.clone();
                for (g, &y) in u_bar.as_mut_slice().iter_mut().zip(own_value.as_slice()) {
                    *g *= y * (1.0 - y);
                }
                accumulate(&mut g_lo[node.inputs[0]], &u_bar);
            }
            NodeKind::Cos => {
                let x = value_of(0);
                let mut u_bar = grad_i.clone();
                for (g, &xv) in u_bar.as_mut_slice().iter_mut().zip(x.as_slice()) {
                    *g *= -xv.sin();
                }
                accumulate(&mut g_lo[node.inputs[0]], &u_bar);
            }
            NodeKind::Abs => {
                let x = value_of(0);
                let mut u_bar = grad_i.clone();
                for (g, &xv) in u_bar.as_mut_slice().iter_mut().zip(x.as_slice()) {
                    // subgradient 0 at the kink
                    *g *= if xv > 0.0 {
                        1.0
                    } else if xv < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                }
                accumulate(&mut g_lo[node.inputs[0]], &u_bar);
            }
            NodeKind::Scale { gain, .. } => {
                let mut u_bar = grad_i.clone();
                u_bar.as_mut_slice().iter_mut().for_each(|g| *g *= gain);
                accumulate(&mut g_lo[node.inputs[0]], &u_bar);
            }
            NodeKind::Add => {
                for slot in 0..node.inputs.len() {
                    let grad_copy = grad_i.clone();
                    accumulate(&mut g_lo[node.inputs[slot]], &grad_copy);
                }
            }
            NodeKind::Mul => {
                let x = value_of(0);
                let y = value_of(1);
                let mut gx = grad_i.clone();
                for (g, &v) in gx.as_mut_slice().iter_mut().zip(y.as_slice()) {
                    *g *= v;
                }
                let mut gy = grad_i.clone();
                for (g, &v) in gy.as_mut_slice().iter_mut().zip(x.as_slice()) {
                    *g *= v;
                }
                accumulate(&mut g_lo[node.inputs[0]], &gx);
                accumulate(&mut g_lo[node.inputs[1]], &gy);
            }
            NodeKind::Concat => {
                let mut offset = 0;
                for slot in 0..node.inputs.len() {
                    let v_channels = values[node.inputs[slot]]
                        .as_ref()
                        .expect("value present")
                        .channels();
                    let mut part = TimeSeries::zeros(grad_i.samples(), v_channels);
                    for c in 0..v_channels {
                        part.channel_mut(c).copy_from_slice(grad_i.channel(offset + c));
                    }
                    offset += v_channels;
                    accumulate(&mut g_lo[node.inputs[slot]], &part);
                }
            }
            NodeKind::Split { lo, hi } => {
                let x = value_of(0);
                let mut u_bar = TimeSeries::zeros(x.samples(), x.channels());
                for (c_out, c_in) in (*lo..*hi).enumerate() {
                    u_bar.channel_mut(c_in).copy_from_slice(grad_i.channel(c_out));
                }
                accumulate(&mut g_lo[node.inputs[0]], &u_bar);
            }
            NodeKind::MseLoss => {
                let pred = value_of(0);
                let target = value_of(1);
                let scale = grad_i.get(0, 0) * 2.0 / (pred.samples() * pred.channels()) as f64;
                let mut gp = pred.clone();
                for (g, (&p, &t)) in gp
                    .as_mut_slice()
                    .iter_mut()
                    .zip(pred.as_slice().iter().zip(target.as_slice()))
                {
                    *g = scale * (p - t);
                }
                let mut gt = gp.clone();
                gt.as_mut_slice().iter_mut().for_each(|g| *g = -*g);
                accumulate(&mut g_lo[node.inputs[0]], &gp);
                accumulate(&mut g_lo[node.inputs[1]], &gt);
            }
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn accumulate(slot: &mut Option<TimeSeries>, delta: &TimeSeries) {
    let dst = slot.as_mut().expect("grad slot allocated");
    debug_assert!(dst.same_shape(delta));
    for (d, &v) in dst.as_mut_slice().iter_mut().zip(delta.as_slice()) {
        *d += v;
    }
}
