//! Poincaré-ball operators: Möbius addition, conformal factor, exponential
//! map, geodesic distance, and boundary-safe projection.
//!
//! Two API levels mirror how the pipeline uses them: plain slice functions
//! for data generation, metrics and oracles, and tape functions (one row =
//! one point) for the differentiable model path. Every emitted point
//! satisfies c·‖x‖² ≤ (1 − eps_boundary)².

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// Ball of curvature -c²: {x ∈ R^dim : c·‖x‖² < 1}.
#[derive(Clone, Copy, Debug)]
pub struct BallConfig<S: Scalar> {
    pub c: S,
    pub eps_boundary: S,
    pub dim: usize,
}

impl<S: Scalar> BallConfig<S> {
    pub fn new(c: S, dim: usize) -> Result<Self> {
        Self::with_eps(c, dim, S::from_f64(1e-5))
    }

    pub fn with_eps(c: S, dim: usize, eps_boundary: S) -> Result<Self> {
        if c < S::zero() || !c.is_finite() {
            return Err(Error::domain("ball_config", format!("curvature must be >= 0, got {c}")));
        }
        if eps_boundary <= S::zero() || eps_boundary >= S::one() {
            return Err(Error::domain(
                "ball_config",
                format!("eps_boundary must lie in (0, 1), got {eps_boundary}"),
            ));
        }
        if dim == 0 {
            return Err(Error::domain("ball_config", "dimension must be >= 1"));
        }
        Ok(Self { c, eps_boundary, dim })
    }

    /// Largest admissible norm, (1 - eps)/sqrt(c); infinite when c = 0.
    pub fn max_norm(&self) -> S {
        if self.c == S::zero() {
            S::infinity()
        } else {
            (S::one() - self.eps_boundary) / self.c.sqrt()
        }
    }
}

fn dot<S: Scalar>(x: &[S], y: &[S]) -> S {
    x.iter().zip(y).fold(S::zero(), |acc, (&a, &b)| acc + a * b)
}

fn norm<S: Scalar>(x: &[S]) -> S {
    dot(x, x).sqrt()
}

// ── Slice-level operators ───────────────────────────────────────────────

/// Radially rescales `x` onto norm (1-eps)/sqrt(c) when it lies outside.
pub fn project_to_ball<S: Scalar>(x: &[S], cfg: &BallConfig<S>) -> Vec<S> {
    let n = norm(x);
    let limit = cfg.max_norm();
    if n <= limit {
        x.to_vec()
    } else {
        let k = limit / n;
        x.iter().map(|&v| v * k).collect()
    }
}

/// Möbius addition x ⊕_c y. Inputs are clamped to the ball first; the
/// result is clamped back. A denominator below 1e-12 in magnitude is
/// rejected as numerically degenerate.
pub fn mobius_add<S: Scalar>(x: &[S], y: &[S], cfg: &BallConfig<S>) -> Result<Vec<S>> {
    if x.len() != y.len() {
        return Err(Error::shape(
            "mobius_add",
            format!("dimension mismatch: {} vs {}", x.len(), y.len()),
        ));
    }
    let x = project_to_ball(x, cfg);
    let y = project_to_ball(y, cfg);
    let c = cfg.c;
    let xy = dot(&x, &y);
    let xx = dot(&x, &x);
    let yy = dot(&y, &y);
    let two = S::one() + S::one();
    let a = S::one() + two * c * xy + c * yy;
    let b = S::one() - c * xx;
    let den = S::one() + two * c * xy + c * c * xx * yy;
    if den.abs() < S::from_f64(1e-12) {
        return Err(Error::domain(
            "mobius_add",
            format!("denominator {den} is numerically degenerate"),
        ));
    }
    let out: Vec<S> = x
        .iter()
        .zip(&y)
        .map(|(&xv, &yv)| (a * xv + b * yv) / den)
        .collect();
    Ok(project_to_ball(&out, cfg))
}

/// Conformal factor λ_x = 2/(1 - c‖x‖²); equals 2 at the origin and for
/// c = 0. Out-of-ball inputs are clamped first.
pub fn conformal_factor<S: Scalar>(x: &[S], cfg: &BallConfig<S>) -> S {
    let x = project_to_ball(x, cfg);
    let two = S::one() + S::one();
    two / (S::one() - cfg.c * dot(&x, &x))
}

/// Exponential map at base `x`:
/// exp_x(v) = x ⊕_c (tanh(√c·λ_x‖v‖/2) · v/(√c‖v‖)).
/// ‖v‖ < 1e-12 returns x (series limit); c = 0 degenerates to x + v.
pub fn exp_map<S: Scalar>(x: &[S], v: &[S], cfg: &BallConfig<S>) -> Result<Vec<S>> {
    if x.len() != v.len() {
        return Err(Error::shape(
            "exp_map",
            format!("dimension mismatch: {} vs {}", x.len(), v.len()),
        ));
    }
    let x = project_to_ball(x, cfg);
    let nv = norm(v);
    if nv < S::from_f64(1e-12) {
        return Ok(x);
    }
    if cfg.c == S::zero() {
        return Ok(x.iter().zip(v).map(|(&a, &b)| a + b).collect());
    }
    let sc = cfg.c.sqrt();
    let lam = conformal_factor(&x, cfg);
    let two = S::one() + S::one();
    let coef = (sc * lam * nv / two).tanh() / (sc * nv);
    let u: Vec<S> = v.iter().map(|&vv| vv * coef).collect();
    mobius_add(&x, &u, cfg)
}

/// Geodesic distance d(x,y) = (2/√c)·arctanh(√c·‖(-x) ⊕_c y‖).
/// Undefined at c = 0 by this formula (rejected); the c→0 limit is
/// 2‖x - y‖.
pub fn poincare_distance<S: Scalar>(x: &[S], y: &[S], cfg: &BallConfig<S>) -> Result<S> {
    if cfg.c == S::zero() {
        return Err(Error::domain(
            "poincare_distance",
            "curvature c = 0: formula undefined, use the Euclidean limit 2*norm(x-y)",
        ));
    }
    let nx: Vec<S> = x.iter().map(|&v| -v).collect();
    let m = mobius_add(&nx, y, cfg)?;
    let sc = cfg.c.sqrt();
    let arg = (sc * norm(&m)).min(S::one() - S::from_f64(1e-15));
    let two = S::one() + S::one();
    Ok(two / sc * arg.atanh())
}

// ── Tape-level operators (one row per point) ────────────────────────────

fn check_width<S: Scalar>(tape: &Tape<S>, v: Var, cfg: &BallConfig<S>, op: &'static str) -> Result<()> {
    let s = tape.value(v).shape();
    if s.len() != 2 || s[1] != cfg.dim {
        return Err(Error::shape(
            op,
            format!("expected n x {} points, got {s:?}", cfg.dim),
        ));
    }
    Ok(())
}

/// Row-wise ball projection; identity inside, radial rescale outside.
/// Gradient is exact on both branches.
pub fn project_ball_rows<S: Scalar>(tape: &mut Tape<S>, x: Var, cfg: &BallConfig<S>) -> Result<Var> {
    check_width(tape, x, cfg, "project_ball_rows")?;
    if cfg.c == S::zero() {
        return Ok(x);
    }
    let limit = cfg.max_norm();
    let n = tape.rowwise_norm(x)?;
    let ng = tape.max_const(n, S::from_f64(1e-12));
    let r = tape.recip(ng);
    let s = tape.scale(r, limit); // limit / norm
    // min(s, 1) = -max(-s, -1); gradient flows only where the row rescales
    let m = tape.neg(s);
    let mm = tape.max_const(m, -S::one());
    let coef = tape.neg(mm);
    tape.row_scale(x, coef)
}

/// Row-wise Möbius addition with clamped output. Assumes callers keep
/// inputs inside the ball (model paths project first); the denominator is
/// still checked and rejected below 1e-12.
pub fn mobius_add_rows<S: Scalar>(tape: &mut Tape<S>, x: Var, y: Var, cfg: &BallConfig<S>) -> Result<Var> {
    check_width(tape, x, cfg, "mobius_add_rows")?;
    check_width(tape, y, cfg, "mobius_add_rows")?;
    let c = cfg.c;
    let two_c = c + c;
    let xy = tape.rowwise_dot(x, y)?;
    let xx = tape.rowwise_dot(x, x)?;
    let yy = tape.rowwise_dot(y, y)?;

    let t1 = tape.scale(xy, two_c);
    let t2 = tape.scale(yy, c);
    let t12 = tape.add(t1, t2)?;
    let a = tape.add_const(t12, S::one());

    let t3 = tape.scale(xx, -c);
    let b = tape.add_const(t3, S::one());

    let t4 = tape.mul(xx, yy)?;
    let t5 = tape.scale(t4, c * c);
    let t6 = tape.add(t1, t5)?;
    let den = tape.add_const(t6, S::one());
    if let Some(&bad) = tape
        .value(den)
        .data()
        .iter()
        .find(|d| d.abs() < S::from_f64(1e-12))
    {
        return Err(Error::domain(
            "mobius_add_rows",
            format!("denominator {bad} is numerically degenerate"),
        ));
    }

    let xa = tape.row_scale(x, a)?;
    let yb = tape.row_scale(y, b)?;
    let num = tape.add(xa, yb)?;
    let inv = tape.recip(den);
    let out = tape.row_scale(num, inv)?;
    project_ball_rows(tape, out, cfg)
}

/// Row-wise exponential map at base rows `x`.
pub fn exp_map_rows<S: Scalar>(tape: &mut Tape<S>, x: Var, v: Var, cfg: &BallConfig<S>) -> Result<Var> {
    check_width(tape, x, cfg, "exp_map_rows")?;
    check_width(tape, v, cfg, "exp_map_rows")?;
    if cfg.c == S::zero() {
        return tape.add(x, v);
    }
    let sc = cfg.c.sqrt();

    let xx = tape.rowwise_dot(x, x)?;
    let t = tape.scale(xx, -cfg.c);
    let om = tape.add_const(t, S::one()); // 1 - c*xx, > 0 inside ball
    let lam_half = tape.recip(om); // lambda / 2

    let nv = tape.rowwise_norm(v)?;
    let ng = tape.max_const(nv, S::from_f64(1e-12));
    let prod = tape.mul(lam_half, ng)?;
    let arg = tape.scale(prod, sc); // sqrt(c) * lambda * |v| / 2
    let th = tape.tanh(arg);
    let inv = tape.recip(ng);
    let ratio = tape.mul(th, inv)?;
    let coef = tape.scale(ratio, S::one() / sc);
    let u = tape.row_scale(v, coef)?;
    mobius_add_rows(tape, x, u, cfg)
}

/// Row-wise exponential map at the origin (the pipeline's base point):
/// tanh(√c‖v‖)·v/(√c‖v‖).
pub fn exp_map_zero_rows<S: Scalar>(tape: &mut Tape<S>, v: Var, cfg: &BallConfig<S>) -> Result<Var> {
    check_width(tape, v, cfg, "exp_map_zero_rows")?;
    if cfg.c == S::zero() {
        return Ok(v);
    }
    let sc = cfg.c.sqrt();
    let nv = tape.rowwise_norm(v)?;
    let ng = tape.max_const(nv, S::from_f64(1e-12));
    let arg = tape.scale(ng, sc);
    let th = tape.tanh(arg);
    let inv = tape.recip(ng);
    let ratio = tape.mul(th, inv)?;
    let coef = tape.scale(ratio, S::one() / sc);
    let out = tape.row_scale(v, coef)?;
    project_ball_rows(tape, out, cfg)
}

/// Row-wise geodesic distance, n x 1.
pub fn poincare_distance_rows<S: Scalar>(tape: &mut Tape<S>, x: Var, y: Var, cfg: &BallConfig<S>) -> Result<Var> {
    if cfg.c == S::zero() {
        return Err(Error::domain(
            "poincare_distance_rows",
            "curvature c = 0: formula undefined",
        ));
    }
    let nx = tape.neg(x);
    let m = mobius_add_rows(tape, nx, y, cfg)?;
    let nm = tape.rowwise_norm(m)?;
    let sc = cfg.c.sqrt();
    let arg = tape.scale(nm, sc);
    let at = tape.arctanh(arg)?;
    let two = S::one() + S::one();
    Ok(tape.scale(at, two / sc))
}
