//! SE(3) poses, quaternion/log-quaternion conversions, pose error metrics,
//! and the learnable-weighted regression loss.
//!
//! Quaternions are stored (w, x, y, z), unit-norm, hemisphere-fixed to
//! w >= 0 so every rotation has one canonical representative.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::TensorBase;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseSE3<S: Scalar> {
    pub t: [S; 3],
    pub q: [S; 4],
}

/// Principal-branch logarithm of a unit quaternion; norm < pi.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogQuat<S: Scalar>(pub [S; 3]);

fn qnorm<S: Scalar>(q: &[S; 4]) -> S {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

/// Negates q if w < 0 so both double-cover representatives coincide.
pub fn hemisphere_fix<S: Scalar>(q: [S; 4]) -> [S; 4] {
    if q[0] < S::zero() {
        [-q[0], -q[1], -q[2], -q[3]]
    } else {
        q
    }
}

impl<S: Scalar> PoseSE3<S> {
    /// Normalizes and hemisphere-fixes the quaternion; rejects a
    /// zero-norm quaternion.
    pub fn new(t: [S; 3], q: [S; 4]) -> Result<Self> {
        let n = qnorm(&q);
        if n < S::from_f64(1e-12) || !n.is_finite() {
            return Err(Error::domain(
                "pose",
                format!("quaternion norm {n} is not normalizable"),
            ));
        }
        let q = hemisphere_fix([q[0] / n, q[1] / n, q[2] / n, q[3] / n]);
        Ok(Self { t, q })
    }

    /// Accepts an already-normalized, hemisphere-fixed quaternion without
    /// touching its bits, so file round trips stay bit-exact.
    pub fn from_normalized(t: [S; 3], q: [S; 4]) -> Result<Self> {
        let n = qnorm(&q);
        if (n - S::one()).abs() > S::from_f64(1e-9) {
            return Err(Error::domain(
                "pose",
                format!("stored quaternion norm {n} is not unit"),
            ));
        }
        if q[0] < S::zero() {
            return Err(Error::domain(
                "pose",
                format!("stored quaternion w {} is not hemisphere-fixed", q[0]),
            ));
        }
        if !t.iter().all(|v| v.is_finite()) {
            return Err(Error::domain("pose", "non-finite translation"));
        }
        Ok(Self { t, q })
    }

    pub fn identity() -> Self {
        Self {
            t: [S::zero(); 3],
            q: [S::one(), S::zero(), S::zero(), S::zero()],
        }
    }

    /// Maps a point from the pose's local frame into the world frame.
    pub fn to_world(&self, p: [S; 3]) -> [S; 3] {
        let r = quat_rotate(self.q, p);
        [r[0] + self.t[0], r[1] + self.t[1], r[2] + self.t[2]]
    }

    /// Maps a world-frame point into the pose's local frame.
    pub fn to_local(&self, p: [S; 3]) -> [S; 3] {
        let d = [p[0] - self.t[0], p[1] - self.t[1], p[2] - self.t[2]];
        quat_rotate(quat_conj(self.q), d)
    }
}

// ── Quaternion algebra ──────────────────────────────────────────────────

pub fn quat_conj<S: Scalar>(q: [S; 4]) -> [S; 4] {
    [q[0], -q[1], -q[2], -q[3]]
}

pub fn quat_mul<S: Scalar>(a: [S; 4], b: [S; 4]) -> [S; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

/// Rotates vector p by unit quaternion q (p' = q p q*).
pub fn quat_rotate<S: Scalar>(q: [S; 4], p: [S; 3]) -> [S; 3] {
    let two = S::one() + S::one();
    let v = [q[1], q[2], q[3]];
    // t = 2 v x p; p' = p + w t + v x t
    let t = [
        two * (v[1] * p[2] - v[2] * p[1]),
        two * (v[2] * p[0] - v[0] * p[2]),
        two * (v[0] * p[1] - v[1] * p[0]),
    ];
    [
        p[0] + q[0] * t[0] + v[1] * t[2] - v[2] * t[1],
        p[1] + q[0] * t[1] + v[2] * t[0] - v[0] * t[2],
        p[2] + q[0] * t[2] + v[0] * t[1] - v[1] * t[0],
    ]
}

/// Unit quaternion for a rotation of `angle` radians about the z axis.
pub fn quat_about_z<S: Scalar>(angle: S) -> [S; 4] {
    let two = S::one() + S::one();
    let half = angle / two;
    [half.cos(), S::zero(), S::zero(), half.sin()]
}

// ── Log-quaternion maps ─────────────────────────────────────────────────

/// lq = v/‖v‖ · arccos(clamp(w, -1, 1)), with q negated first if w < 0.
pub fn quat_to_logquat<S: Scalar>(q: [S; 4]) -> LogQuat<S> {
    let q = hemisphere_fix(q);
    let v = [q[1], q[2], q[3]];
    let nv = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if nv < S::from_f64(1e-12) {
        // arccos(w)/‖v‖ -> 1 as q -> identity
        return LogQuat(v);
    }
    let w = q[0].min(S::one()).max(-S::one());
    let k = w.acos() / nv;
    LogQuat([v[0] * k, v[1] * k, v[2] * k])
}

/// q = (cos‖lq‖, sin‖lq‖ · lq/‖lq‖), hemisphere-fixed.
pub fn logquat_to_quat<S: Scalar>(lq: LogQuat<S>) -> [S; 4] {
    let v = lq.0;
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if n < S::from_f64(1e-12) {
        // sin(n)/n -> 1
        return hemisphere_fix([S::one(), v[0], v[1], v[2]]);
    }
    let k = n.sin() / n;
    hemisphere_fix([n.cos(), v[0] * k, v[1] * k, v[2] * k])
}

// ── Metrics ─────────────────────────────────────────────────────────────

/// (translation error meters, rotation error degrees):
/// ‖t_pred - t*‖ and (360/π)·arccos(min(1, |⟨q_pred, q*⟩|)).
pub fn pose_metrics<S: Scalar>(pred: &PoseSE3<S>, target: &PoseSE3<S>) -> (S, S) {
    let dt = [
        pred.t[0] - target.t[0],
        pred.t[1] - target.t[1],
        pred.t[2] - target.t[2],
    ];
    let t_err = (dt[0] * dt[0] + dt[1] * dt[1] + dt[2] * dt[2]).sqrt();
    let dot = pred.q[0] * target.q[0]
        + pred.q[1] * target.q[1]
        + pred.q[2] * target.q[2]
        + pred.q[3] * target.q[3];
    let r_err = S::from_f64(360.0 / std::f64::consts::PI) * dot.abs().min(S::one()).acos();
    (t_err, r_err)
}

// ── Training loss ───────────────────────────────────────────────────────

/// One head's prediction on the tape: translation and log-quaternion rows.
#[derive(Clone, Copy)]
pub struct PosePred {
    pub t: Var,
    pub r: Var,
}

/// L = (Σ_i ‖t_i - t*‖) e^{-λ} + λ + (Σ_i ‖r_i - r*‖) e^{-γ} + γ,
/// summed over the prediction heads. Norms are ε-smoothed:
/// √(‖·‖² + 1e-12), so the gradient exists at zero error.
pub fn weighted_pose_loss<S: Scalar>(
    tape: &mut Tape<S>,
    preds: &[PosePred],
    target_t: Var,
    target_r: Var,
    lambda: Var,
    gamma: Var,
) -> Result<Var> {
    if preds.is_empty() {
        return Err(Error::EmptyInput("weighted_pose_loss"));
    }
    let mut t_sum: Option<Var> = None;
    let mut r_sum: Option<Var> = None;
    for p in preds {
        let dt = tape.sub(p.t, target_t)?;
        let tn = smoothed_norm(tape, dt)?;
        t_sum = Some(match t_sum {
            Some(acc) => tape.add(acc, tn)?,
            None => tn,
        });
        let dr = tape.sub(p.r, target_r)?;
        let rn = smoothed_norm(tape, dr)?;
        r_sum = Some(match r_sum {
            Some(acc) => tape.add(acc, rn)?,
            None => rn,
        });
    }
    let t_sum = t_sum.unwrap();
    let r_sum = r_sum.unwrap();
    let neg_l = tape.neg(lambda);
    let wl = tape.exp(neg_l);
    let neg_g = tape.neg(gamma);
    let wg = tape.exp(neg_g);
    let t_term = tape.mul(t_sum, wl)?;
    let r_term = tape.mul(r_sum, wg)?;
    let a = tape.add(t_term, lambda)?;
    let b = tape.add(r_term, gamma)?;
    tape.add(a, b)
}

/// √(‖row‖² + 1e-12) for a single 1 x c row, as 1x1.
fn smoothed_norm<S: Scalar>(tape: &mut Tape<S>, row: Var) -> Result<Var> {
    let sq = tape.rowwise_dot(row, row)?;
    let eps = tape.add_const(sq, S::from_f64(1e-12));
    tape.sqrt(eps)
}

/// Stages a pose's loss targets on the tape: (t*, logquat(q*)) as 1x3
/// constant rows.
pub fn stage_target<S: Scalar>(tape: &mut Tape<S>, pose: &PoseSE3<S>) -> (Var, Var) {
    let t = tape.leaf(TensorBase::new(vec![1, 3], pose.t.to_vec()).unwrap());
    let lq = quat_to_logquat(pose.q);
    let r = tape.leaf(TensorBase::new(vec![1, 3], lq.0.to_vec()).unwrap());
    (t, r)
}
