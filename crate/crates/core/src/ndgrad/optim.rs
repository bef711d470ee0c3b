use super::Real;

/// One heavy-ball step: `v <- momentum * v + g; p <- p - lr * v`.
pub fn sgd_momentum_step<T: Real>(
    params: &mut [T],
    grads: &[T],
    velocity: &mut [T],
    lr: f64,
    momentum: f64,
) {
    assert_eq!(params.len(), grads.len(), "parameter/gradient length mismatch");
    assert_eq!(params.len(), velocity.len(), "parameter/state length mismatch");
    let (lr, mu) = (T::c(lr), T::c(momentum));
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = mu * *v + g;
        *p -= lr * *v;
    }
}

/// Adam moment decay rates and denominator guard.
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One AdamW step with decoupled weight decay. `t` is the 1-based step
/// number used for bias correction.
pub fn adamw_step<T: Real>(
    params: &mut [T],
    grads: &[T],
    first: &mut [T],
    second: &mut [T],
    t: u64,
    lr: f64,
    weight_decay: f64,
) {
    assert_eq!(params.len(), grads.len(), "parameter/gradient length mismatch");
    assert_eq!(params.len(), first.len(), "parameter/state length mismatch");
    assert_eq!(params.len(), second.len(), "parameter/state length mismatch");
    assert!(t >= 1, "adam step numbers start at 1");
    let t = t.min(i32::MAX as u64) as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let (b1, b2) = (T::c(ADAM_BETA1), T::c(ADAM_BETA2));
    let (step, eps, decay) = (T::c(lr / c1), T::c(ADAM_EPS), T::c(lr * weight_decay));
    let root_c2 = T::c(c2.sqrt());
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(first.iter_mut()).zip(second.iter_mut()) {
        *m = b1 * *m + (T::one() - b1) * g;
        *v = b2 * *v + (T::one() - b2) * g * g;
        *p -= decay * *p + step * *m / (v.sqrt() / root_c2 + eps);
    }
}
