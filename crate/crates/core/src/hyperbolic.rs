//! Curvature-aware primitives on the Poincaré ball.
//!
//! The ball of curvature `c` is the open set `{x : ‖x‖ < 1/√c}`. Every
//! operation here keeps its output a fixed relative margin
//! ([`BOUNDARY_EPS`]) inside the boundary, where Möbius addition and the
//! logarithmic map are still well conditioned.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative interior margin: usable points satisfy `‖x‖ ≤ (1 - BOUNDARY_EPS) / √c`.
pub const BOUNDARY_EPS: f64 = 1e-5;

/// Smallest admissible Möbius-addition denominator.
pub const DENOMINATOR_FLOOR: f64 = 1e-12;

/// Positive curvature magnitude of the ball.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Curvature(f64);

impl Curvature {
    pub fn new(c: f64) -> Result<Self> {
        if c.is_finite() && c > 0.0 {
            Ok(Curvature(c))
        } else {
            Err(Error::InvalidArgument(format!(
                "curvature must be finite and positive, got {c}"
            )))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }

    pub fn sqrt(self) -> f64 {
        self.0.sqrt()
    }

    /// Ball radius `1/√c`.
    pub fn radius(self) -> f64 {
        1.0 / self.0.sqrt()
    }

    /// Largest norm a [`BallPoint`] may have.
    pub fn max_norm(self) -> f64 {
        (1.0 - BOUNDARY_EPS) * self.radius()
    }
}

impl Default for Curvature {
    fn default() -> Self {
        Curvature(1.0)
    }
}

impl TryFrom<f64> for Curvature {
    type Error = Error;

    fn try_from(c: f64) -> Result<Self> {
        Curvature::new(c)
    }
}

impl From<Curvature> for f64 {
    fn from(c: Curvature) -> f64 {
        c.0
    }
}

/// A vector inside the eps-interior of the ball.
#[derive(Debug, Clone, PartialEq)]
pub struct BallPoint {
    coords: Vec<f64>,
    curvature: Curvature,
}

impl BallPoint {
    /// Validates finiteness and the interior bound.
    pub fn new(coords: Vec<f64>, curvature: Curvature) -> Result<Self> {
        if coords.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("non-finite ball coordinates".into()));
        }
        let n = norm(&coords);
        if n > curvature.max_norm() {
            return Err(Error::Domain(format!(
                "point norm {n} exceeds interior bound {} (c = {})",
                curvature.max_norm(),
                curvature.get()
            )));
        }
        Ok(BallPoint { coords, curvature })
    }

    pub fn origin(dim: usize, curvature: Curvature) -> Self {
        BallPoint { coords: vec![0.0; dim], curvature }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.coords)
    }

    pub fn curvature(&self) -> Curvature {
        self.curvature
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Logistic function, evaluated without overflow for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{what} contains non-finite values")))
    }
}

/// Radial rescale onto the eps-interior. Bitwise idempotent: a second call
/// sees a norm at or below the bound and returns its input untouched.
pub fn project_coords(w: &[f64], c: Curvature) -> Vec<f64> {
    let limit = c.max_norm();
    let n = norm(w);
    if n <= limit {
        return w.to_vec();
    }
    let mut scale = limit / n;
    loop {
        let out: Vec<f64> = w.iter().map(|x| x * scale).collect();
        if norm(&out) <= limit {
            return out;
        }
        scale *= 1.0 - f64::EPSILON;
    }
}

/// `min{1, (1/√c)/‖w‖}·w`, clamped to the eps-interior.
pub fn project_to_ball(w: &[f64], c: Curvature) -> Result<BallPoint> {
    check_finite(w, "projection input")?;
    Ok(BallPoint { coords: project_coords(w, c), curvature: c })
}

/// Exponential map at the origin: `tanh(√c‖v‖)·v/(√c‖v‖)`.
pub fn exp_map_origin(v: &[f64], c: Curvature) -> Result<BallPoint> {
    check_finite(v, "tangent vector")?;
    let n = norm(v);
    if n == 0.0 {
        return Ok(BallPoint::origin(v.len(), c));
    }
    let sc = c.sqrt() * n;
    let factor = sc.tanh() / sc;
    let raw: Vec<f64> = v.iter().map(|x| x * factor).collect();
    // tanh saturates to 1 in f64 for large arguments; clamp into the margin.
    Ok(BallPoint { coords: project_coords(&raw, c), curvature: c })
}

/// Logarithmic map at the origin (inverse of [`exp_map_origin`]).
pub fn log_map_origin(x: &BallPoint) -> Vec<f64> {
    let c = x.curvature;
    let n = x.norm();
    if n == 0.0 {
        return vec![0.0; x.dim()];
    }
    let sc = c.sqrt() * n;
    let factor = sc.atanh() / sc;
    x.coords.iter().map(|v| v * factor).collect()
}

/// [`log_map_origin`] on raw coordinates, rejecting points outside the interior.
pub fn log_map_coords(coords: &[f64], c: Curvature) -> Result<Vec<f64>> {
    let p = BallPoint::new(coords.to_vec(), c)?;
    Ok(log_map_origin(&p))
}

/// Möbius addition `w ⊕_c delta` on raw coordinates, without projection.
///
/// Fails when the shared denominator drops below [`DENOMINATOR_FLOOR`].
pub fn mobius_add_coords(w: &[f64], delta: &[f64], c: Curvature) -> Result<Vec<f64>> {
    if w.len() != delta.len() {
        return Err(Error::InvalidArgument(format!(
            "dimension mismatch in Möbius addition: {} vs {}",
            w.len(),
            delta.len()
        )));
    }
    check_finite(delta, "Möbius addend")?;
    let c = c.get();
    let wd = dot(w, delta);
    let w2 = dot(w, w);
    let d2 = dot(delta, delta);
    let denom = 1.0 + 2.0 * c * wd + c * c * w2 * d2;
    if !(denom.abs() >= DENOMINATOR_FLOOR) {
        return Err(Error::NumericInstability {
            context: format!("Möbius addition (‖w‖² = {w2:e}, ‖Δ‖² = {d2:e}, ⟨w,Δ⟩ = {wd:e})"),
            denominator: denom,
        });
    }
    let cw = (1.0 + 2.0 * c * wd + c * d2) / denom;
    let cd = (1.0 - c * w2) / denom;
    Ok(w.iter().zip(delta).map(|(a, b)| cw * a + cd * b).collect())
}

/// Möbius addition of a ball point and an arbitrary finite vector; the result
/// is brought back into the eps-interior.
pub fn mobius_add(w: &BallPoint, delta: &[f64]) -> Result<BallPoint> {
    let raw = mobius_add_coords(&w.coords, delta, w.curvature)?;
    project_to_ball(&raw, w.curvature)
}

/// `σ(‖x‖ - τ)`.
pub fn persistence_gate(x: &[f64], tau: f64) -> f64 {
    sigmoid(norm(x) - tau)
}

/// Geodesic distance `(1/√c)·arcosh(1 + 2c‖a-b‖² / ((1-c‖a‖²)(1-c‖b‖²)))`.
pub fn ball_distance(a: &BallPoint, b: &BallPoint) -> Result<f64> {
    if a.curvature != b.curvature {
        return Err(Error::InvalidArgument("points live in balls of different curvature".into()));
    }
    if a.dim() != b.dim() {
        return Err(Error::InvalidArgument("dimension mismatch in distance".into()));
    }
    let c = a.curvature.get();
    let diff2: f64 = a.coords.iter().zip(&b.coords).map(|(x, y)| (x - y) * (x - y)).sum();
    let da = 1.0 - c * dot(&a.coords, &a.coords);
    let db = 1.0 - c * dot(&b.coords, &b.coords);
    let x = 2.0 * c * diff2 / (da * db);
    // acosh(1 + x) written to stay accurate for small x
    Ok((x + (x * (x + 2.0)).sqrt()).ln_1p() / c.sqrt())
}
