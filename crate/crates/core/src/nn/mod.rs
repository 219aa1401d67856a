//! Minimal differentiable numerical core: dense nets, a reverse-mode tape,
//! batch statistics with exact gradients, and Adam.

pub mod adam;
pub mod net;
pub mod stats;
pub mod tape;

pub use adam::{AdamConfig, AdamState};
pub use net::{DenseNet, NetVars, Normalizer};
pub use tape::{bce_var, pearson_var, Tape, Var};

use crate::error::{Error, Result};

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Softmax over two logits: exp(l+)/(exp(l+)+exp(l-)), evaluated in the
/// stable form sigmoid(l+ - l-).
pub fn two_logit_reward(l_plus: f64, l_minus: f64) -> Result<f64> {
    if !l_plus.is_finite() || !l_minus.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite logits ({l_plus}, {l_minus})"
        )));
    }
    Ok(sigmoid(l_plus - l_minus))
}
