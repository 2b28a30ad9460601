//! Masked rank-1 updates applied on the ball, and the edit loop around them.

use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::{mobius_add_rows, Tape, Var};
use crate::error::{Error, Result};
use crate::gnn::{optimize_for_edit, EditContext, GnnParams, OptConfig, StepLog};
use crate::hyperbolic::{mobius_add_coords, project_coords, sigmoid, Curvature, DENOMINATOR_FLOOR};
use crate::kg::HyperbolicGraph;
use crate::model::ToyModel;
use crate::request::EditRequest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateSpace {
    /// `proj(w ⊕ Δ)`
    #[default]
    Mobius,
    /// `proj(w + Δ)`, the ablation.
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateLayout {
    /// One ball point per output row.
    #[default]
    Rows,
    /// The whole layer as a single `m·n` vector.
    Flattened,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UpdateRule {
    pub space: UpdateSpace,
    pub layout: UpdateLayout,
}

fn flattened_guard(w: &Array2<f64>, c: Curvature) -> Result<()> {
    let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > c.max_norm() {
        return Err(Error::Domain(format!(
            "flattened layer has norm {n}, outside the ball of radius {}",
            c.radius()
        )));
    }
    Ok(())
}

impl UpdateRule {
    pub fn apply(&self, weights: &Array2<f64>, delta: &Array2<f64>, c: Curvature) -> Result<Array2<f64>> {
        apply_update(weights, delta, c, *self)
    }

    /// The same update recorded on a tape.
    pub fn tape_apply(&self, tape: &mut Tape, w: Var, delta: Var, c: Curvature) -> Result<Var> {
        let shape = tape.value(w).dim();
        let (w2, d2) = match self.layout {
            UpdateLayout::Rows => (w, delta),
            UpdateLayout::Flattened => {
                flattened_guard(tape.value(w), c)?;
                let flat = (1, shape.0 * shape.1);
                (tape.reshape(w, flat), tape.reshape(delta, flat))
            }
        };
        let raw = match self.space {
            UpdateSpace::Mobius => {
                let (out, min_den) = mobius_add_rows(tape, w2, d2, c);
                if !(min_den >= DENOMINATOR_FLOOR) {
                    return Err(Error::NumericInstability {
                        context: "Möbius update on tape".into(),
                        denominator: min_den,
                    });
                }
                out
            }
            UpdateSpace::Euclidean => tape.add(w2, d2),
        };
        let projected = tape.project_rows(raw, c);
        Ok(match self.layout {
            UpdateLayout::Rows => projected,
            UpdateLayout::Flattened => tape.reshape(projected, shape),
        })
    }
}

/// Rewrite NLL plus `kl_factor`·KL(reference ‖ current) on neighborhood prompts.
#[derive(Debug, Clone)]
pub struct EditObjective {
    rewrite_keys: Array2<f64>,
    rewrite_targets: Array2<f64>,
    neighbor_keys: Array2<f64>,
    neighbor_probs: Array2<f64>,
    neighbor_logp: Array2<f64>,
    kl_factor: f64,
}

impl EditObjective {
    /// Uses `model` itself as the KL reference.
    pub fn new(model: &ToyModel, request: &EditRequest, kl_factor: f64) -> Result<Self> {
        Self::with_reference(model, request, kl_factor)
    }

    pub fn with_reference(reference: &ToyModel, request: &EditRequest, kl_factor: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&kl_factor) {
            return Err(Error::Config(format!("kl_factor must lie in [0, 1], got {kl_factor}")));
        }
        if request.rewrite_prompts.is_empty() {
            return Err(Error::Schema { case_id: request.case_id, message: "no rewrite prompts".into() });
        }
        let vocab = reference.vocab();
        let target = vocab.id(&request.target_new.token)?;
        let rewrite_keys = reference.keys(&request.rewrite_prompts)?;
        let mut rewrite_targets = Array2::zeros((rewrite_keys.nrows(), vocab.len()));
        rewrite_targets.column_mut(target).fill(1.0);
        let neighbor_keys = reference.keys(&request.neighborhood_prompts)?;
        let neighbor_logp = if neighbor_keys.nrows() > 0 {
            let mut tape = Tape::new();
            let w = tape.leaf(reference.weights().clone());
            let k = tape.leaf(neighbor_keys.clone());
            let lp = reference.tape_log_probs(&mut tape, w, k);
            tape.value(lp).clone()
        } else {
            Array2::zeros((0, vocab.len()))
        };
        let neighbor_probs = neighbor_logp.mapv(f64::exp);
        Ok(EditObjective {
            rewrite_keys,
            rewrite_targets,
            neighbor_keys,
            neighbor_probs,
            neighbor_logp,
            kl_factor,
        })
    }

    pub fn kl_factor(&self) -> f64 {
        self.kl_factor
    }

    pub fn rewrite_keys(&self) -> &Array2<f64> {
        &self.rewrite_keys
    }

    pub fn tape_loss(&self, tape: &mut Tape, model: &ToyModel, weights: Var) -> Var {
        let p = self.rewrite_keys.nrows() as f64;
        let k = tape.leaf(self.rewrite_keys.clone());
        let lp = model.tape_log_probs(tape, weights, k);
        let onehot = tape.leaf(self.rewrite_targets.clone());
        let picked = tape.mul(lp, onehot);
        let total = tape.sum(picked);
        let nll = tape.scale(total, -1.0 / p);
        let q = self.neighbor_keys.nrows();
        if self.kl_factor == 0.0 || q == 0 {
            return nll;
        }
        let nk = tape.leaf(self.neighbor_keys.clone());
        let lpn = model.tape_log_probs(tape, weights, nk);
        let reference = tape.leaf(self.neighbor_logp.clone());
        let diff = tape.sub(reference, lpn);
        let probs = tape.leaf(self.neighbor_probs.clone());
        let weighted = tape.mul(probs, diff);
        let kl_sum = tape.sum(weighted);
        let kl = tape.scale(kl_sum, self.kl_factor / q as f64);
        tape.add(nll, kl)
    }

    pub fn loss(&self, model: &ToyModel) -> f64 {
        let mut tape = Tape::new();
        let w = tape.leaf(model.weights().clone());
        let l = self.tape_loss(&mut tape, model, w);
        tape.scalar_value(l)
    }

    pub fn loss_and_grad(&self, model: &ToyModel) -> (f64, Array2<f64>) {
        let mut tape = Tape::new();
        let w = tape.leaf(model.weights().clone());
        let l = self.tape_loss(&mut tape, model, w);
        let value = tape.scalar_value(l);
        let grad = tape.backward(l).take(w).unwrap_or_else(|| Array2::zeros(model.dims()));
        (value, grad)
    }
}

/// `(loss, ∂loss/∂W)` with the model itself as the KL reference.
pub fn edit_loss(model: &ToyModel, request: &EditRequest, kl_factor: f64) -> Result<(f64, Array2<f64>)> {
    Ok(EditObjective::new(model, request, kl_factor)?.loss_and_grad(model))
}

/// Row means of `|grad|` and the soft mask `σ(g_i − τ_g)`.
pub fn gradient_mask(grad: &Array2<f64>, tau_g: f64) -> (Vec<f64>, Vec<f64>) {
    let n = grad.ncols().max(1) as f64;
    let g: Vec<f64> = grad.rows().into_iter().map(|r| r.iter().map(|x| x.abs()).sum::<f64>() / n).collect();
    let mask = g.iter().map(|&gi| sigmoid(gi - tau_g)).collect();
    (g, mask)
}

/// `Δ[i][j] = γ · u[i] · v[j] · mask[i]`.
pub fn assemble_delta(u: &[f64], v: &[f64], gamma: f64, mask: &[f64]) -> Result<Array2<f64>> {
    if u.len() != mask.len() {
        return Err(Error::InvalidArgument(format!("u has {} entries, mask has {}", u.len(), mask.len())));
    }
    Ok(Array2::from_shape_fn((u.len(), v.len()), |(i, j)| gamma * u[i] * v[j] * mask[i]))
}

pub fn apply_update(weights: &Array2<f64>, delta: &Array2<f64>, c: Curvature, rule: UpdateRule) -> Result<Array2<f64>> {
    if weights.dim() != delta.dim() {
        return Err(Error::InvalidArgument(format!("weights {:?} vs delta {:?}", weights.dim(), delta.dim())));
    }
    let combine = |w: &[f64], d: &[f64]| -> Result<Vec<f64>> {
        let raw = match rule.space {
            UpdateSpace::Mobius => mobius_add_coords(w, d, c)?,
            UpdateSpace::Euclidean => w.iter().zip(d).map(|(a, b)| a + b).collect(),
        };
        Ok(project_coords(&raw, c))
    };
    match rule.layout {
        UpdateLayout::Rows => {
            let mut out = weights.clone();
            for (i, (mut row, d)) in out.rows_mut().into_iter().zip(delta.rows()).enumerate() {
                if d.iter().all(|&x| x == 0.0) {
                    continue;
                }
                let w = row.to_vec();
                let new = combine(&w, &d.to_vec()).map_err(|e| match e {
                    Error::NumericInstability { context, denominator } => {
                        Error::NumericInstability { context: format!("row {i}: {context}"), denominator }
                    }
                    other => other,
                })?;
                row.assign(&Array1::from(new));
            }
            Ok(out)
        }
        UpdateLayout::Flattened => {
            flattened_guard(weights, c)?;
            if delta.iter().all(|&x| x == 0.0) {
                return Ok(weights.clone());
            }
            let w: Vec<f64> = weights.iter().copied().collect();
            let d: Vec<f64> = delta.iter().copied().collect();
            let new = combine(&w, &d)?;
            Ok(Array2::from_shape_vec(weights.dim(), new).expect("same length"))
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaMode {
    #[default]
    Auto,
    Fixed(f64),
}

/// Residual factor. In auto mode this is the smallest `γ ∈ [0, cap]` at
/// which the edit loss after applying `γ (mask ⊙ u) vᵀ` with `rule` reaches
/// `target_loss`: the scale that carries the rewrite activation `W k` the
/// residual distance to an activation meeting the target, measured in
/// units of `(u vᵀ) k`. If the target is out of reach the loss minimizer
/// on `[0, cap]` is used.
#[allow(clippy::too_many_arguments)]
pub fn compute_gamma(
    mode: GammaMode,
    model: &ToyModel,
    objective: &EditObjective,
    u: &[f64],
    v: &[f64],
    mask: &[f64],
    rule: UpdateRule,
    target_loss: f64,
    cap: f64,
) -> Result<f64> {
    let cap = match mode {
        GammaMode::Fixed(x) => return Ok(x),
        GammaMode::Auto => cap,
    };
    let (m, n) = model.dims();
    if u.len() != m || v.len() != n || mask.len() != m {
        return Err(Error::InvalidArgument("u, v or mask does not match the edited layer".into()));
    }
    let mu = Array1::from_iter(u.iter().zip(mask).map(|(a, b)| a * b));
    let va = Array1::from(v.to_vec());
    let moves = objective.rewrite_keys().rows().into_iter().any(|k| {
        let vk = va.dot(&k);
        mu.iter().any(|&x| x * vk != 0.0)
    });
    if !moves {
        return Err(Error::DegenerateKey);
    }
    let c = model.curvature();
    let mut probe = model.clone();
    let mut f = |g: f64| -> f64 {
        let updated = assemble_delta(u, v, g, mask).and_then(|d| apply_update(model.weights(), &d, c, rule));
        match updated.and_then(|w| probe.set_weights(w)) {
            Ok(()) => objective.loss(&probe),
            Err(_) => f64::INFINITY,
        }
    };
    if f(0.0) <= target_loss {
        return Ok(0.0);
    }
    if f(cap) <= target_loss {
        let (mut lo, mut hi) = (0.0, cap);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if f(mid) <= target_loss {
                hi = mid;
            } else {
                lo = mid;
            }
            if hi - lo <= 1e-9 * cap {
                break;
            }
        }
        return Ok(hi);
    }
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = (0.0, cap);
    let mut x1 = b - r * (b - a);
    let mut x2 = a + r * (b - a);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..100 {
        if b - a <= 1e-9 * cap {
            break;
        }
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - r * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + r * (b - a);
            f2 = f(x2);
        }
    }
    let mid = 0.5 * (a + b);
    let candidates = [0.0, mid, cap];
    let values: Vec<f64> = candidates.iter().map(|&g| f(g)).collect();
    let best = (0..3).min_by(|&i, &j| values[i].total_cmp(&values[j])).unwrap_or(1);
    Ok(candidates[best])
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdatePlan {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub gamma: f64,
    pub grad_means: Vec<f64>,
    pub mask: Vec<f64>,
    pub delta: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditStage {
    Gradient,
    Gnn,
    Gamma,
    Delta,
    Apply,
    Evaluate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EditConfig {
    pub tau_g: f64,
    pub gamma_mode: GammaMode,
    pub gamma_cap: f64,
    pub kl_factor: f64,
    pub max_cycles: usize,
    pub update: UpdateRule,
    pub gnn: OptConfig,
    pub seed: u64,
    #[doc(hidden)]
    #[serde(skip)]
    pub inject_fault: Option<EditStage>,
}

impl Default for EditConfig {
    fn default() -> Self {
        EditConfig {
            tau_g: 1e-3,
            gamma_mode: GammaMode::Auto,
            gamma_cap: 10.0,
            kl_factor: 0.07,
            max_cycles: 10,
            update: UpdateRule::default(),
            gnn: OptConfig::default(),
            seed: 42,
            inject_fault: None,
        }
    }
}

impl EditConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.kl_factor) {
            return Err(Error::Config(format!("kl_factor must lie in [0, 1], got {}", self.kl_factor)));
        }
        if self.max_cycles == 0 {
            return Err(Error::Config("max_cycles must be at least 1".into()));
        }
        if !(self.gamma_cap.is_finite() && self.gamma_cap >= 0.0) || !self.tau_g.is_finite() {
            return Err(Error::Config("gamma_cap and tau_g must be finite, gamma_cap non-negative".into()));
        }
        self.gnn.validate()
    }
}

/// Auto γ aims at this fraction of the early-stop threshold.
pub const GAMMA_TARGET_FRACTION: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSummary {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

impl MaskSummary {
    fn of(mask: &[f64]) -> Self {
        let min = mask.iter().copied().fold(f64::INFINITY, f64::min);
        let max = mask.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = mask.iter().sum::<f64>() / mask.len().max(1) as f64;
        MaskSummary { min, mean, max }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditOutcome {
    pub case_id: u64,
    pub cycles: usize,
    pub final_loss: f64,
    /// Frobenius norm of the summed per-cycle updates.
    pub delta_frobenius: f64,
    /// Mask of the last cycle.
    pub mask_summary: MaskSummary,
    /// γ of the last cycle.
    pub gamma: f64,
    pub time: f64,
    #[serde(skip)]
    pub history: Vec<UpdatePlan>,
    #[serde(skip)]
    pub logs: Vec<Vec<StepLog>>,
}

/// splitmix64 over the parts, for per-case and per-cycle seeds.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut x = base;
    for &p in parts {
        x ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(x << 6).wrapping_add(x >> 2);
        let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x = z ^ (z >> 31);
    }
    x
}

fn fault(stage: EditStage, config: &EditConfig) -> Result<()> {
    if config.inject_fault == Some(stage) {
        return Err(Error::NumericInstability { context: format!("injected fault at {stage:?}"), denominator: f64::NAN });
    }
    Ok(())
}

/// One edit: repeat {GNN → mask → γ → Δ → apply} until the edit loss drops
/// below the early-stop threshold or `max_cycles` is reached.
///
/// GNN parameters are reset after every cycle and on every exit. On error
/// the model is restored to its state before the call.
pub fn run_edit(
    model: &mut ToyModel,
    graph: &HyperbolicGraph,
    request: &EditRequest,
    gnn: &mut GnnParams,
    config: &EditConfig,
) -> Result<EditOutcome> {
    let before = model.snapshot();
    let result = edit_cycles(model, graph, request, gnn, config);
    gnn.reset();
    if result.is_err() {
        model.restore(&before)?;
    }
    result
}

fn edit_cycles(
    model: &mut ToyModel,
    graph: &HyperbolicGraph,
    request: &EditRequest,
    gnn: &mut GnnParams,
    config: &EditConfig,
) -> Result<EditOutcome> {
    let start = Instant::now();
    config.validate()?;
    request.validate()?;
    let objective = EditObjective::new(model, request, config.kl_factor)?;
    let c = model.curvature();
    let target_loss = GAMMA_TARGET_FRACTION * config.gnn.early_stop_loss;
    let mut total_delta = Array2::zeros(model.dims());
    let mut history = Vec::new();
    let mut logs = Vec::new();
    let mut loss;
    let mut cycle = 0;
    loop {
        fault(EditStage::Gradient, config)?;
        let (_, grad) = objective.loss_and_grad(model);
        if grad.iter().any(|x| !x.is_finite()) {
            return Err(Error::NumericInstability { context: "edit-loss gradient".into(), denominator: f64::NAN });
        }
        let (grad_means, mask) = gradient_mask(&grad, config.tau_g);

        let ctx = EditContext { model, objective: &objective, mask: &mask, gamma: 1.0, rule: config.update };
        let seed = derive_seed(config.seed, &[request.case_id, cycle as u64]);
        let opt = optimize_for_edit(graph, request, gnn, &ctx, &config.gnn, seed);
        fault(EditStage::Gnn, config)?;
        gnn.reset();
        let opt = opt?;

        fault(EditStage::Gamma, config)?;
        let gamma =
            compute_gamma(config.gamma_mode, model, &objective, &opt.u, &opt.v, &mask, config.update, target_loss, config.gamma_cap)?;

        fault(EditStage::Delta, config)?;
        let delta = assemble_delta(&opt.u, &opt.v, gamma, &mask)?;

        fault(EditStage::Apply, config)?;
        let updated = apply_update(model.weights(), &delta, c, config.update)?;
        model.set_weights(updated)?;
        total_delta += &delta;

        fault(EditStage::Evaluate, config)?;
        loss = objective.loss(model);
        if !loss.is_finite() {
            return Err(Error::Diverged { step: cycle, loss });
        }
        logs.push(opt.log);
        history.push(UpdatePlan { u: opt.u, v: opt.v, gamma, grad_means, mask, delta });
        cycle += 1;
        if loss < config.gnn.early_stop_loss || cycle >= config.max_cycles {
            break;
        }
    }
    let last = history.last().expect("at least one cycle");
    Ok(EditOutcome {
        case_id: request.case_id,
        cycles: cycle,
        final_loss: loss,
        delta_frobenius: total_delta.iter().map(|x| x * x).sum::<f64>().sqrt(),
        mask_summary: MaskSummary::of(&last.mask),
        gamma: last.gamma,
        time: start.elapsed().as_secs_f64(),
        history,
        logs,
    })
}

/// Frobenius norm of each row's change, for diagnostics.
pub fn row_change(before: &Array2<f64>, after: &Array2<f64>) -> Vec<f64> {
    (before - after).map_axis(Axis(1), |r| r.dot(&r).sqrt()).to_vec()
}
