//! Outer-loop optimizers: SGD, RMSprop (decay 0.9), Adam (0.9/0.999, bias
//! corrected); epsilon 1e-8 throughout.

use crate::tensor::Scalar;

use super::{MetaError, OuterOptimizer};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const RMS_DECAY: f64 = 0.9;
const EPS: f64 = 1e-8;

/// First/second moment buffers, one pair per parameter group.
#[derive(Clone, Debug)]
pub struct OptState<S> {
    pub step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> OptState<S> {
    /// `lens` gives the element count of each parameter group, in order.
    pub fn new(lens: &[usize]) -> Self {
        OptState {
            step: 0,
            m: lens.iter().map(|&n| vec![S::zero(); n]).collect(),
            v: lens.iter().map(|&n| vec![S::zero(); n]).collect(),
        }
    }
}

/// Applies one update `p <- p - beta * d(g, state)` to every group. The
/// moment buffers advance even where gradients are zero (decay only).
pub fn outer_optimizer_step<S: Scalar>(
    opt: OuterOptimizer,
    params: &mut [&mut [S]],
    grads: &[&[S]],
    state: &mut OptState<S>,
    beta: f64,
) -> Result<(), MetaError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(MetaError::OptimizerShapeMismatch(format!(
            "{} parameter groups, {} gradient groups, {} state groups",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), i) in params.iter().zip(grads).zip(0..) {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(MetaError::OptimizerShapeMismatch(format!(
                "group {i}: {} params, {} grads, {} state entries",
                p.len(),
                g.len(),
                state.m[i].len()
            )));
        }
    }

    state.step += 1;
    let beta = S::from_f64(beta);
    let eps = S::from_f64(EPS);
    match opt {
        OuterOptimizer::Sgd => {
            for (p, g) in params.iter_mut().zip(grads) {
                for (pv, &gv) in p.iter_mut().zip(*g) {
                    *pv = *pv - beta * gv;
                }
            }
        }
        OuterOptimizer::RmsProp => {
            let decay = S::from_f64(RMS_DECAY);
            let one_minus = S::from_f64(1.0 - RMS_DECAY);
            for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.v) {
                for ((pv, &gv), vv) in p.iter_mut().zip(*g).zip(v) {
                    *vv = decay * *vv + one_minus * gv * gv;
                    *pv = *pv - beta * gv / (vv.sqrt() + eps);
                }
            }
        }
        OuterOptimizer::Adam => {
            let b1 = S::from_f64(ADAM_BETA1);
            let b2 = S::from_f64(ADAM_BETA2);
            let c1 = S::from_f64(1.0 - ADAM_BETA1.powi(state.step as i32));
            let c2 = S::from_f64(1.0 - ADAM_BETA2.powi(state.step as i32));
            let one = S::one();
            for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v)
            {
                for (((pv, &gv), mv), vv) in p.iter_mut().zip(*g).zip(m).zip(v) {
                    *mv = b1 * *mv + (one - b1) * gv;
                    *vv = b2 * *vv + (one - b2) * gv * gv;
                    let mhat = *mv / c1;
                    let vhat = *vv / c2;
                    *pv = *pv - beta * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}
