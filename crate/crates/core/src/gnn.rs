//! Gated message passing over the hyperbolic graph, producing the left and
//! right update vectors `(u, v)` for one edit.
//!
//! Node and edge features are log-mapped to the tangent space at the origin.
//! Each round computes, per edge `s → o` of relation `r`,
//!
//! ```text
//! m_e = gate_r · α_e · tanh(W h_s + U e_r + b),   α_e = σ(a · tanh(..) + a0)
//! h'_o = degree_norm(o) · Σ_{e into o} m_e
//! ```
//!
//! and the readout is `u = A_u h_subject`, `v = A_v [e_r ; h_object]`.

use std::collections::{BTreeSet, HashMap};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::edit::{EditObjective, UpdateRule};
use crate::error::{Error, Result};
use crate::hyperbolic::log_map_origin;
use crate::kg::HyperbolicGraph;
use crate::model::ToyModel;
use crate::request::EditRequest;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GnnConfig {
    pub hidden_dim: usize,
    pub rounds: usize,
    /// Standard deviation multiplier for the readout heads at initialization.
    pub head_scale: f64,
    pub seed: u64,
}

impl Default for GnnConfig {
    fn default() -> Self {
        GnnConfig { hidden_dim: 64, rounds: 2, head_scale: 0.5, seed: 7 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptConfig {
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout_attn: f64,
    pub dropout_feat: f64,
    pub early_stop_loss: f64,
    /// Gradients with a larger global norm are rescaled to this norm; 0 disables.
    pub clip_norm: f64,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig { steps: 30, lr: 0.5, weight_decay: 0.1, dropout_attn: 0.2, dropout_feat: 0.3, early_stop_loss: 0.03, clip_norm: 0.5 }
    }
}

impl OptConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |p: f64| (0.0..1.0).contains(&p);
        if !unit(self.dropout_attn) || !unit(self.dropout_feat) {
            return Err(Error::Config("dropout rates must lie in [0, 1)".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0 && self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("lr and weight_decay must be finite and non-negative".into()));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm >= 0.0) {
            return Err(Error::Config("clip_norm must be finite and non-negative".into()));
        }
        if self.early_stop_loss.is_nan() {
            return Err(Error::Config("early_stop_loss must be a number".into()));
        }
        Ok(())
    }
}

/// Live parameters plus the frozen copy they are reset to.
#[derive(Debug, Clone, PartialEq)]
pub struct GnnParams {
    config: GnnConfig,
    names: Vec<String>,
    live: Vec<Array2<f64>>,
    initial: Vec<Array2<f64>>,
    feature_dim: usize,
    out_dims: (usize, usize),
}

struct Layout {
    rounds: usize,
}

impl Layout {
    fn msg(&self, l: usize) -> usize {
        5 * l
    }
    fn edge(&self, l: usize) -> usize {
        5 * l + 1
    }
    fn bias(&self, l: usize) -> usize {
        5 * l + 2
    }
    fn attn(&self, l: usize) -> usize {
        5 * l + 3
    }
    fn attn_bias(&self, l: usize) -> usize {
        5 * l + 4
    }
    fn self_edge(&self) -> usize {
        5 * self.rounds
    }
    fn head_u(&self) -> usize {
        5 * self.rounds + 1
    }
    fn head_v(&self) -> usize {
        5 * self.rounds + 2
    }
}

impl GnnParams {
    /// `feature_dim` is the graph embedding width, `(m, n)` the edited layer's shape.
    pub fn new(feature_dim: usize, out_dims: (usize, usize), config: GnnConfig) -> Result<Self> {
        let h = config.hidden_dim;
        if h == 0 || config.rounds == 0 || feature_dim == 0 || out_dims.0 == 0 || out_dims.1 == 0 {
            return Err(Error::Config("gnn dimensions and round count must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut normal = |shape: (usize, usize), std: f64| {
            Array2::from_shape_fn(shape, |_| rng.sample::<f64, _>(StandardNormal) * std)
        };
        let d = feature_dim;
        let mut names = Vec::new();
        let mut live = Vec::new();
        for l in 0..config.rounds {
            let input = if l == 0 { d } else { h };
            names.extend([format!("msg.{l}"), format!("edge.{l}"), format!("bias.{l}"), format!("attn.{l}"), format!("attn_bias.{l}")]);
            live.push(normal((h, input), (1.0 / input as f64).sqrt()));
            live.push(normal((h, d), (1.0 / d as f64).sqrt()));
            live.push(Array2::zeros((1, h)));
            live.push(normal((h, 1), (1.0 / h as f64).sqrt()));
            live.push(Array2::zeros((1, 1)));
        }
        names.extend(["self_edge".to_string(), "head_u".to_string(), "head_v".to_string()]);
        // the self-loop edge embedding starts at the origin
        live.push(Array2::zeros((1, d)));
        live.push(normal((out_dims.0, h), config.head_scale / (h as f64).sqrt()));
        live.push(normal((out_dims.1, d + h), config.head_scale / ((d + h) as f64).sqrt()));
        let initial = live.clone();
        Ok(GnnParams { config, names, live, initial, feature_dim, out_dims })
    }

    pub fn config(&self) -> &GnnConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Array2<f64>] {
        &self.live
    }

    pub fn initial(&self) -> &[Array2<f64>] {
        &self.initial
    }

    pub fn out_dims(&self) -> (usize, usize) {
        self.out_dims
    }

    pub fn parameter_count(&self) -> usize {
        self.live.iter().map(|t| t.len()).sum()
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Array2<f64>> {
        let i = self.names.iter().position(|n| n == name).ok_or_else(|| Error::unknown("gnn parameter", name))?;
        Ok(&mut self.live[i])
    }

    pub fn is_at_initial(&self) -> bool {
        self.live.len() == self.initial.len()
            && self.live.iter().zip(&self.initial).all(|(a, b)| {
                a.dim() == b.dim() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    pub fn reset(&mut self) {
        for (dst, src) in self.live.iter_mut().zip(&self.initial) {
            dst.assign(src);
        }
    }

    fn layout(&self) -> Layout {
        Layout { rounds: self.config.rounds }
    }

    fn check_graph(&self, graph: &HyperbolicGraph) -> Result<()> {
        if graph.nodes.is_empty() {
            return Err(Error::InvalidArgument("graph has no nodes".into()));
        }
        if graph.dim != self.feature_dim {
            return Err(Error::Config(format!(
                "graph features have dim {}, gnn expects {}",
                graph.dim, self.feature_dim
            )));
        }
        Ok(())
    }
}

/// The part of a graph a computation reads: either all of it or the
/// receptive field of a few root nodes.
#[derive(Debug, Clone)]
pub struct GraphView {
    /// Global node id per local row.
    pub nodes: Vec<usize>,
    local: HashMap<usize, usize>,
    /// Global edge ids feeding the computation.
    pub edges: Vec<usize>,
    sources: Vec<usize>,
    targets: Vec<usize>,
    edge_relations: Vec<usize>,
    features: Array2<f64>,
    degree_norm: Array2<f64>,
    gates: Array2<f64>,
    relation_features: Array2<f64>,
}

impl GraphView {
    pub fn full(graph: &HyperbolicGraph) -> Self {
        Self::build(graph, (0..graph.nodes.len()).collect(), (0..graph.edges.len()).collect())
    }

    /// Nodes and edges that can influence the states of `roots` after
    /// `rounds` rounds. Node states of the roots are identical to a full pass.
    pub fn receptive(graph: &HyperbolicGraph, roots: &[usize], rounds: usize) -> Self {
        let mut incoming: Vec<Vec<usize>> = vec![Vec::new(); graph.nodes.len()];
        for (i, e) in graph.edges.iter().enumerate() {
            incoming[e.target].push(i);
        }
        // after k passes `nodes` holds everything within k reverse hops and
        // `edges` every edge into the nodes within k-1 hops
        let mut nodes: BTreeSet<usize> = roots.iter().copied().collect();
        let mut edges = BTreeSet::new();
        for _ in 0..rounds {
            let current: Vec<usize> = nodes.iter().copied().collect();
            for t in current {
                for &ei in &incoming[t] {
                    edges.insert(ei);
                    nodes.insert(graph.edges[ei].source);
                }
            }
        }
        Self::build(graph, nodes.into_iter().collect(), edges.into_iter().collect())
    }

    fn build(graph: &HyperbolicGraph, nodes: Vec<usize>, edges: Vec<usize>) -> Self {
        let local: HashMap<usize, usize> = nodes.iter().enumerate().map(|(i, &g)| (g, i)).collect();
        let d = graph.dim;
        let mut features = Array2::zeros((nodes.len(), d));
        let mut degree_norm = Array2::zeros((nodes.len(), 1));
        for (i, &g) in nodes.iter().enumerate() {
            let node = &graph.nodes[g];
            features.row_mut(i).assign(&Array1::from(log_map_origin(&node.feature)));
            degree_norm[[i, 0]] = node.degree_norm;
        }
        let mut relation_features = Array2::zeros((graph.relations.len(), d));
        for (i, r) in graph.relations.iter().enumerate() {
            relation_features.row_mut(i).assign(&Array1::from(log_map_origin(&r.hyperbolic)));
        }
        let mut gates = Array2::zeros((edges.len(), 1));
        let mut sources = Vec::with_capacity(edges.len());
        let mut targets = Vec::with_capacity(edges.len());
        let mut edge_relations = Vec::with_capacity(edges.len());
        for (i, &ei) in edges.iter().enumerate() {
            let e = graph.edges[ei];
            gates[[i, 0]] = graph.gates[e.relation];
            sources.push(local[&e.source]);
            targets.push(local[&e.target]);
            edge_relations.push(e.relation);
        }
        GraphView {
            nodes,
            local,
            edges,
            sources,
            targets,
            edge_relations,
            features,
            degree_norm,
            gates,
            relation_features,
        }
    }

    pub fn local_id(&self, global: usize) -> Option<usize> {
        self.local.get(&global).copied()
    }
}

/// Dropout masks drawn for the whole graph so that any view sees the same
/// values for the same nodes and edges. Self-loops are exempt from
/// attention dropout.
struct DropoutMasks {
    /// Per round: `nodes × input_dim` keep/scale factors.
    features: Vec<Array2<f64>>,
    /// Per round: `edges × 1`.
    attention: Vec<Array2<f64>>,
}

impl DropoutMasks {
    fn draw(rng: &mut ChaCha8Rng, graph: &HyperbolicGraph, params: &GnnParams, opt: &OptConfig) -> Self {
        let mut mask = |shape: (usize, usize), p: f64| {
            let keep = 1.0 / (1.0 - p);
            Array2::from_shape_fn(shape, |_| if rng.random::<f64>() < p { 0.0 } else { keep })
        };
        let mut features = Vec::new();
        let mut attention = Vec::new();
        for l in 0..params.config.rounds {
            let width = if l == 0 { params.feature_dim } else { params.config.hidden_dim };
            features.push(mask((graph.nodes.len(), width), opt.dropout_feat));
            let mut att = mask((graph.edges.len(), 1), opt.dropout_attn);
            // a node always keeps its own message
            for (i, e) in graph.edges.iter().enumerate() {
                if e.source == e.target {
                    att[[i, 0]] = 1.0;
                }
            }
            attention.push(att);
        }
        DropoutMasks { features, attention }
    }

    fn restrict(&self, view: &GraphView) -> DropoutMasks {
        let rows = |a: &Array2<f64>, idx: &[usize]| a.select(ndarray::Axis(0), idx);
        DropoutMasks {
            features: self.features.iter().map(|f| rows(f, &view.nodes)).collect(),
            attention: self.attention.iter().map(|a| rows(a, &view.edges)).collect(),
        }
    }
}

/// Node states in tangent space, one row per graph node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeStates {
    pub states: Array2<f64>,
}

struct TapeParams {
    vars: Vec<Var>,
}

fn push_params(tape: &mut Tape, params: &GnnParams) -> TapeParams {
    TapeParams { vars: params.live.iter().map(|t| tape.leaf(t.clone())).collect() }
}

fn tape_states(tape: &mut Tape, view: &GraphView, params: &GnnParams, p: &TapeParams, drop: Option<&DropoutMasks>) -> Var {
    let lay = params.layout();
    let rel_const = tape.leaf(view.relation_features.clone());
    let rel_table = tape.concat_rows(&[rel_const, p.vars[lay.self_edge()]]);
    let edge_feat = tape.gather_rows(rel_table, &view.edge_relations);
    let gates = tape.leaf(view.gates.clone());
    let degree = tape.leaf(view.degree_norm.clone());
    let n = view.nodes.len();

    let mut h = tape.leaf(view.features.clone());
    for l in 0..params.config.rounds {
        if let Some(d) = drop {
            let m = tape.leaf(d.features[l].clone());
            h = tape.mul(h, m);
        }
        let src = tape.gather_rows(h, &view.sources);
        let wt = tape.transpose(p.vars[lay.msg(l)]);
        let a = tape.matmul(src, wt);
        let ut = tape.transpose(p.vars[lay.edge(l)]);
        let b = tape.matmul(edge_feat, ut);
        let pre = tape.add(a, b);
        let pre = tape.add(pre, p.vars[lay.bias(l)]);
        let msg = tape.tanh(pre);
        let score = tape.matmul(msg, p.vars[lay.attn(l)]);
        let score = tape.add(score, p.vars[lay.attn_bias(l)]);
        let mut weight = tape.sigmoid(score);
        if let Some(d) = drop {
            let m = tape.leaf(d.attention[l].clone());
            weight = tape.mul(weight, m);
        }
        let weight = tape.mul(weight, gates);
        let scaled = tape.mul(msg, weight);
        let agg = tape.scatter_add_rows(scaled, &view.targets, n);
        h = tape.mul(agg, degree);
    }
    h
}

/// Readout on the tape: returns `u` as `m×1` and `v` as `1×n`.
fn tape_readout(
    tape: &mut Tape,
    states: Var,
    params: &GnnParams,
    p: &TapeParams,
    subject: usize,
    object: usize,
    relation_feature: &[f64],
) -> (Var, Var) {
    let lay = params.layout();
    let hs = tape.gather_rows(states, &[subject]);
    let au_t = tape.transpose(p.vars[lay.head_u()]);
    let u_row = tape.matmul(hs, au_t);
    let u = tape.transpose(u_row);
    let ho = tape.gather_rows(states, &[object]);
    let rel = tape.leaf(Array2::from_shape_vec((1, relation_feature.len()), relation_feature.to_vec()).expect("row"));
    let joined = tape.concat_cols(&[rel, ho]);
    let av_t = tape.transpose(p.vars[lay.head_v()]);
    let v = tape.matmul(joined, av_t);
    (u, v)
}

pub fn forward(graph: &HyperbolicGraph, params: &GnnParams) -> Result<NodeStates> {
    params.check_graph(graph)?;
    let view = GraphView::full(graph);
    let mut tape = Tape::new();
    let p = push_params(&mut tape, params);
    let h = tape_states(&mut tape, &view, params, &p, None);
    Ok(NodeStates { states: tape.value(h).clone() })
}

struct EditAnchors {
    subject: usize,
    object: usize,
    relation_feature: Vec<f64>,
}

fn anchors(graph: &HyperbolicGraph, request: &EditRequest) -> Result<EditAnchors> {
    let subject = graph.node_id(&request.subject)?;
    let object = graph.node_id(&request.target_new.token)?;
    let r = graph.relation_id(&request.relation)?;
    Ok(EditAnchors { subject, object, relation_feature: log_map_origin(&graph.relations[r].hyperbolic) })
}

/// `(u, v)` from precomputed node states.
pub fn readout_uv(
    graph: &HyperbolicGraph,
    states: &NodeStates,
    request: &EditRequest,
    params: &GnnParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let a = anchors(graph, request)?;
    let lay = params.layout();
    let hs = states.states.row(a.subject);
    let u = params.live[lay.head_u()].dot(&hs);
    let mut joined = a.relation_feature.clone();
    joined.extend(states.states.row(a.object).iter());
    let v = params.live[lay.head_v()].dot(&Array1::from(joined));
    Ok((u.to_vec(), v.to_vec()))
}

/// Everything the edit loss needs besides the GNN itself.
pub struct EditContext<'a> {
    pub model: &'a ToyModel,
    pub objective: &'a EditObjective,
    pub mask: &'a [f64],
    pub gamma: f64,
    pub rule: UpdateRule,
}

impl EditContext<'_> {
    fn tape_loss(&self, tape: &mut Tape, u: Var, v: Var) -> Result<Var> {
        let mask = tape.leaf(Array2::from_shape_vec((self.mask.len(), 1), self.mask.to_vec()).expect("column"));
        let mu = tape.mul(u, mask);
        let outer = tape.matmul(mu, v);
        let delta = tape.scale(outer, self.gamma);
        let w = tape.leaf(self.model.weights().clone());
        let updated = self.rule.tape_apply(tape, w, delta, self.model.curvature())?;
        Ok(self.objective.tape_loss(tape, self.model, updated))
    }
}

struct Evaluation {
    loss: f64,
    grads: Vec<Array2<f64>>,
}

fn evaluate(
    view: &GraphView,
    anchors: &EditAnchors,
    params: &GnnParams,
    ctx: &EditContext<'_>,
    drop: Option<&DropoutMasks>,
    want_grad: bool,
) -> Result<Evaluation> {
    let mut tape = Tape::new();
    let p = push_params(&mut tape, params);
    let states = tape_states(&mut tape, view, params, &p, drop);
    let s = view.local_id(anchors.subject).expect("subject in view");
    let o = view.local_id(anchors.object).expect("object in view");
    let (u, v) = tape_readout(&mut tape, states, params, &p, s, o, &anchors.relation_feature);
    let loss = ctx.tape_loss(&mut tape, u, v)?;
    let value = tape.scalar_value(loss);
    let grads = if want_grad {
        let mut g = tape.backward(loss);
        p.vars.iter().zip(&params.live).map(|(&var, t)| g.take(var).unwrap_or_else(|| Array2::zeros(t.dim()))).collect()
    } else {
        Vec::new()
    };
    Ok(Evaluation { loss: value, grads })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimized {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub log: Vec<StepLog>,
}

/// Gradient descent with weight decay on the GNN against the edit loss.
///
/// Each step logs the dropout-free loss of the current parameters, stops
/// once it falls below `opt.early_stop_loss`, and otherwise takes a step along
/// the gradient of a dropout pass. Parameters are left as trained; callers
/// reset.
pub fn optimize_for_edit(
    graph: &HyperbolicGraph,
    request: &EditRequest,
    params: &mut GnnParams,
    ctx: &EditContext<'_>,
    opt: &OptConfig,
    seed: u64,
) -> Result<Optimized> {
    params.check_graph(graph)?;
    opt.validate()?;
    let (m, n) = ctx.model.dims();
    if params.out_dims != (m, n) || ctx.mask.len() != m {
        return Err(Error::Config(format!("gnn heads are {:?}, edited layer is {:?}", params.out_dims, (m, n))));
    }
    let a = anchors(graph, request)?;
    let view = GraphView::receptive(graph, &[a.subject, a.object], params.config.rounds);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log = Vec::with_capacity(opt.steps);
    for step in 0..opt.steps {
        let clean = evaluate(&view, &a, params, ctx, None, false)?.loss;
        let masks = DropoutMasks::draw(&mut rng, graph, params, opt).restrict(&view);
        let eval = evaluate(&view, &a, params, ctx, Some(&masks), true)?;
        let grad_norm = eval.grads.iter().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
        if !clean.is_finite() || !eval.loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::Diverged { step, loss: if clean.is_finite() { eval.loss } else { clean } });
        }
        log.push(StepLog { step, loss: clean, grad_norm });
        if clean < opt.early_stop_loss {
            break;
        }
        let scale = if opt.clip_norm > 0.0 && grad_norm > opt.clip_norm { opt.clip_norm / grad_norm } else { 1.0 };
        for (p, g) in params.live.iter_mut().zip(&eval.grads) {
            ndarray::Zip::from(p).and(g).for_each(|w, &gw| *w -= opt.lr * (scale * gw + opt.weight_decay * *w));
        }
    }
    let states = {
        let mut tape = Tape::new();
        let p = push_params(&mut tape, params);
        let h = tape_states(&mut tape, &view, params, &p, None);
        tape.value(h).clone()
    };
    let lay = params.layout();
    let hs = states.row(view.local_id(a.subject).expect("subject"));
    let ho = states.row(view.local_id(a.object).expect("object"));
    let u = params.live[lay.head_u()].dot(&hs).to_vec();
    let mut joined = a.relation_feature.clone();
    joined.extend(ho.iter());
    let v = params.live[lay.head_v()].dot(&Array1::from(joined)).to_vec();
    if u.iter().chain(&v).any(|x| !x.is_finite()) {
        return Err(Error::Diverged { step: log.len(), loss: f64::NAN });
    }
    Ok(Optimized { u, v, log })
}

/// Edit loss as a function of the GNN parameters, without dropout.
pub fn edit_loss_of_params(
    graph: &HyperbolicGraph,
    request: &EditRequest,
    params: &GnnParams,
    ctx: &EditContext<'_>,
) -> Result<(f64, Vec<Array2<f64>>)> {
    params.check_graph(graph)?;
    let a = anchors(graph, request)?;
    let view = GraphView::receptive(graph, &[a.subject, a.object], params.config.rounds);
    let e = evaluate(&view, &a, params, ctx, None, true)?;
    Ok((e.loss, e.grads))
}

/// Largest relative error between analytic gradients and central
/// differences (step 1e-5) over `probes` random parameter entries. Errors
/// are relative to `max(|analytic|, |numeric|, 1e-6·max(1, |loss|))`; the
/// floor tracks the rounding noise of the differenced loss.
pub fn grad_check(
    graph: &HyperbolicGraph,
    request: &EditRequest,
    params: &GnnParams,
    ctx: &EditContext<'_>,
    probes: usize,
    seed: u64,
) -> Result<f64> {
    if probes == 0 {
        return Err(Error::InvalidArgument("probe_count must be at least 1".into()));
    }
    const STEP: f64 = 1e-5;
    let (loss, grads) = edit_loss_of_params(graph, request, params, ctx)?;
    let floor = 1e-6 * loss.abs().max(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = params.parameter_count();
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let mut flat = rng.random_range(0..total);
        let mut group = 0;
        while flat >= params.live[group].len() {
            flat -= params.live[group].len();
            group += 1;
        }
        let cols = params.live[group].ncols();
        let idx = (flat / cols, flat % cols);
        let orig = params.live[group][idx];
        probe.live[group][idx] = orig + STEP;
        let up = edit_loss_of_params(graph, request, &probe, ctx)?.0;
        probe.live[group][idx] = orig - STEP;
        let down = edit_loss_of_params(graph, request, &probe, ctx)?.0;
        probe.live[group][idx] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        let analytic = grads[group][idx];
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        worst = worst.max(err);
    }
    Ok(worst)
}
