//! Central-difference gradient verification.
//!
//! The reported gap is `max_i |a_i - n_i| / (|a_i| + |n_i| + 1e-12)` where
//! `a` is the tape gradient and `n` the two-sided numeric estimate.

use crate::error::{Error, Result};
use crate::params::{Graph, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::TensorBase;

/// Scalar-valued tape program under test: builds the output from leaf vars.
pub type TapeFn<'a, S> = dyn Fn(&mut Tape<S>, &[Var]) -> Result<Var> + 'a;

pub fn max_relative_gap<S: Scalar>(analytic: &TensorBase<S>, numeric: &TensorBase<S>) -> S {
    let tiny = S::from_f64(1e-12);
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .fold(S::zero(), |worst, (&a, &n)| {
            worst.max((a - n).abs() / (a.abs() + n.abs() + tiny))
        })
}

fn eval_scalar<S: Scalar>(
    inputs: &[TensorBase<S>],
    f: &TapeFn<'_, S>,
) -> Result<S> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).is_scalar() {
        return Err(Error::Backward(format!(
            "gradient check target must be scalar, got {:?}",
            tape.value(out).shape()
        )));
    }
    Ok(tape.value(out).item())
}

/// Checks d(f)/d(inputs) for a scalar-valued tape program. Returns the
/// worst relative gap over every coordinate of every input.
pub fn check_inputs<S: Scalar>(
    inputs: &[TensorBase<S>],
    f: &TapeFn<'_, S>,
    h: S,
) -> Result<S> {
    check_inputs_scales(inputs, f, &[h])
}

/// [`check_inputs`] with several step sizes; each coordinate scores its
/// smallest gap (same rationale as [`check_params_scales`]).
pub fn check_inputs_scales<S: Scalar>(
    inputs: &[TensorBase<S>],
    f: &TapeFn<'_, S>,
    hs: &[S],
) -> Result<S> {
    if hs.is_empty() {
        return Err(Error::Config("gradient check needs at least one step size".into()));
    }
    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf_grad(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<TensorBase<S>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| TensorBase::zeros(t.shape())))
        .collect();

    let mut worst = S::zero();
    let mut work: Vec<TensorBase<S>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for c in 0..input.numel() {
            let orig = input.data()[c];
            let a = analytic[i].data()[c];
            let mut best = S::infinity();
            for &h in hs {
                work[i].data_mut()[c] = orig + h;
                let fp = eval_scalar(&work, f)?;
                work[i].data_mut()[c] = orig - h;
                let fm = eval_scalar(&work, f)?;
                work[i].data_mut()[c] = orig;
                let n = (fp - fm) / (h + h);
                let gap = (a - n).abs() / (a.abs() + n.abs() + S::from_f64(1e-12));
                best = best.min(gap);
                if best <= S::from_f64(1e-9) {
                    break;
                }
            }
            worst = worst.max(best);
        }
    }
    Ok(worst)
}

/// Checks d(f)/d(params) for a scalar loss built over a parameter store.
/// Coordinates are probed every `stride` entries (1 = exhaustive). Returns
/// the worst relative gap over all probed coordinates.
pub fn check_params<S: Scalar>(
    store: &mut ParamStore<S>,
    f: &dyn for<'a> Fn(&mut Graph<'a, S>) -> Result<Var>,
    h: S,
    stride: usize,
) -> Result<S> {
    check_params_scales(store, f, &[h], stride)
}

/// [`check_params`] with several step sizes: each coordinate scores the
/// smallest gap over all of them. A wrong analytic gradient differs from
/// the limit by an h-independent amount and still fails at every h, while
/// coordinates whose difference-quotient is noise-limited (tiny gradient,
/// cancellation floor ~ eps*|f|/h) or truncation-limited (large curvature)
/// pass at a coarser respectively finer step.
pub fn check_params_scales<S: Scalar>(
    store: &mut ParamStore<S>,
    f: &dyn for<'a> Fn(&mut Graph<'a, S>) -> Result<Var>,
    hs: &[S],
    stride: usize,
) -> Result<S> {
    if hs.is_empty() {
        return Err(Error::Config("gradient check needs at least one step size".into()));
    }
    if stride == 0 {
        return Err(Error::Config("gradient check stride must be >= 1".into()));
    }
    let (loss_val, analytic) = {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        if !g.tape.value(loss).is_scalar() {
            return Err(Error::Backward(format!(
                "gradient check target must be scalar, got {:?}",
                g.tape.value(loss).shape()
            )));
        }
        let v = g.tape.value(loss).item();
        g.backward(loss)?;
        (v, g.grads())
    };
    if !loss_val.is_finite() {
        return Err(Error::InvalidTensor("loss is not finite".into()));
    }

    let eval = |store: &ParamStore<S>| -> Result<S> {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        Ok(g.tape.value(loss).item())
    };

    let mut worst = S::zero();
    for id in store.ids().collect::<Vec<_>>() {
        for c in (0..store.get(id).numel()).step_by(stride) {
            let orig = store.get(id).data()[c];
            let a = analytic[id.index()]
                .as_ref()
                .map(|t| t.data()[c])
                .unwrap_or_else(S::zero);
            let mut best = S::infinity();
            for &h in hs {
                store.get_mut(id).data_mut()[c] = orig + h;
                let fp = eval(store)?;
                store.get_mut(id).data_mut()[c] = orig - h;
                let fm = eval(store)?;
                store.get_mut(id).data_mut()[c] = orig;
                let n = (fp - fm) / (h + h);
                let gap = (a - n).abs() / (a.abs() + n.abs() + S::from_f64(1e-12));
                best = best.min(gap);
                if best <= S::from_f64(1e-9) {
                    break;
                }
            }
            worst = worst.max(best);
        }
    }
    Ok(worst)
}
