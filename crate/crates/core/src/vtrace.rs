//! V-Trace off-policy targets.
//!
//! With truncated importance weights `rho_t = min(rho_bar, pi/mu)` and
//! `c_t = min(c_bar, pi/mu)`:
//!
//! ```text
//! delta_t = rho_t * (r_t + gamma_t * V_{t+1} - V_t)
//! v_s     = V_s + sum_{t>=s} (gamma_s..gamma_{t-1}) (c_s..c_{t-1}) delta_t
//! A_t     = rho_t * (r_t + gamma_t * v_{t+1} - V_t)
//! ```
//!
//! where `V_T` and `v_T` are the bootstrap value.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct VTraceOutput {
    pub targets: Vec<f64>,
    pub advantages: Vec<f64>,
    /// The clipped `rho_t` actually applied.
    pub rhos: Vec<f64>,
}

/// `discounts[t]` is the per-step discount, 0 where the episode ends.
pub fn compute_vtrace(
    values: &[f64],
    bootstrap: f64,
    rewards: &[f64],
    discounts: &[f64],
    log_rhos: &[f64],
    rho_bar: f64,
    c_bar: f64,
) -> Result<VTraceOutput> {
    let n = values.len();
    for (what, len) in [
        ("rewards", rewards.len()),
        ("discounts", discounts.len()),
        ("log_rhos", log_rhos.len()),
    ] {
        if len != n {
            return Err(Error::Length {
                what,
                expected: n,
                got: len,
            });
        }
    }
    let ratios: Vec<f64> = log_rhos.iter().map(|l| l.exp()).collect();
    let rhos: Vec<f64> = ratios.iter().map(|r| r.min(rho_bar)).collect();
    let cs: Vec<f64> = ratios.iter().map(|r| r.min(c_bar)).collect();

    let mut targets = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let next_v = if t + 1 < n { values[t + 1] } else { bootstrap };
        let delta = rhos[t] * (rewards[t] + discounts[t] * next_v - values[t]);
        acc = delta + discounts[t] * cs[t] * acc;
        targets[t] = values[t] + acc;
    }
    let advantages = (0..n)
        .map(|t| {
            let next = if t + 1 < n { targets[t + 1] } else { bootstrap };
            rhos[t] * (rewards[t] + discounts[t] * next - values[t])
        })
        .collect();
    Ok(VTraceOutput {
        targets,
        advantages,
        rhos,
    })
}
