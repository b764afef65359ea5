//! RMSProp with optional global-norm gradient clipping.

use super::train::TrainConfig;
use super::Network;

/// RMSProp on one parameter slice; `scale` multiplies the gradient first.
pub fn rmsprop_update(w: &mut [f64], g: &[f64], v: &mut [f64], lr: f64, rho: f64, eps: f64, scale: f64) {
    for ((w, &g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
        let g = g * scale;
        *v = rho * *v + (1.0 - rho) * g * g;
        *w -= lr * g / (v.sqrt() + eps);
    }
}

/// Euclidean norm of all gradient entries.
pub fn global_norm<N: Network>(grad: &N) -> f64 {
    grad.params()
        .iter()
        .flat_map(|p| p.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Factor bringing a gradient of norm `norm` down to at most `clip`.
pub fn clip_scale(norm: f64, clip: Option<f64>) -> f64 {
    match clip {
        Some(c) if norm > c && norm > 0.0 => c / norm,
        _ => 1.0,
    }
}

/// One optimizer step; `state` holds the running squared-gradient averages.
pub fn rmsprop_step<N: Network>(net: &mut N, grad: &N, state: &mut N, config: &TrainConfig) {
    let scale = clip_scale(global_norm(grad), config.gradient_clip_norm);
    for ((w, g), v) in net.params_mut().into_iter().zip(grad.params()).zip(state.params_mut()) {
        rmsprop_update(
            w,
            g,
            v,
            config.learning_rate,
            config.rmsprop_decay,
            config.epsilon,
            scale,
        );
    }
}
