//! DP-SGD configuration and the Renyi-DP accountant for the subsampled
//! Gaussian mechanism.
//!
//! For integer order `a` and sampling rate `q`, the per-step RDP bound is
//! `ln(sum_k C(a, k) (1-q)^(a-k) q^k exp((k^2 - k) / (2 s^2))) / (a - 1)`,
//! composed linearly over steps and converted with
//! `eps = min_a T * rdp(a) + ln(1 / delta) / (a - 1)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpSgdConfig {
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub delta: f64,
}

impl Default for DpSgdConfig {
    fn default() -> Self {
        Self {
            clip_norm: 1.0,
            noise_multiplier: 1.0,
            delta: 1e-5,
        }
    }
}

impl DpSgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("dp.clip_norm", "must be > 0"));
        }
        if !(self.noise_multiplier >= 0.0 && self.noise_multiplier.is_finite()) {
            return Err(Error::config("dp.noise_multiplier", "must be finite and >= 0"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::config("dp.delta", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Orders at which the RDP curve is evaluated.
pub fn rdp_orders() -> Vec<u32> {
    let mut v: Vec<u32> = (2..=64).collect();
    v.extend([72, 80, 96, 128, 160, 192, 256, 512, 1024, 2048, 4096, 8192]);
    v
}

fn ln_factorials(n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n + 1];
    for i in 1..=n {
        out[i] = out[i - 1] + (i as f64).ln();
    }
    out
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Per-step RDP of the sampled Gaussian mechanism at integer order `alpha`.
pub fn rdp_step(q: f64, sigma: f64, alpha: u32) -> f64 {
    if sigma == 0.0 {
        return f64::INFINITY;
    }
    if q == 0.0 {
        return 0.0;
    }
    let a = alpha as usize;
    let lf = ln_factorials(a);
    let s2 = sigma * sigma;
    let terms: Vec<f64> = (0..=a)
        .filter_map(|k| {
            let log_q_part = if a - k == 0 {
                0.0
            } else if q >= 1.0 {
                return None;
            } else {
                (a - k) as f64 * (1.0 - q).ln()
            };
            let kf = k as f64;
            Some(lf[a] - lf[k] - lf[a - k] + log_q_part + kf * q.ln() + (kf * kf - kf) / (2.0 * s2))
        })
        .collect();
    log_sum_exp(&terms) / (alpha as f64 - 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpGuarantee {
    /// `f64::INFINITY` when no noise is added (serialized as null).
    #[serde(with = "crate::serde_util::inf_as_null")]
    pub epsilon: f64,
    pub delta: f64,
    pub order: Option<u32>,
    pub sampling_rate: f64,
    pub steps: u64,
    pub noise_multiplier: f64,
}

/// Epsilon reached after `steps` steps at sampling rate `q`.
pub fn dp_epsilon(sigma: f64, q: f64, steps: u64, delta: f64) -> Result<DpGuarantee> {
    if !(0.0..=1.0).contains(&q) || !(delta > 0.0 && delta < 1.0) || sigma < 0.0 {
        return Err(Error::Invalid(format!("invalid accountant inputs q={q} delta={delta} sigma={sigma}")));
    }
    let mut best = DpGuarantee {
        epsilon: f64::INFINITY,
        delta,
        order: None,
        sampling_rate: q,
        steps,
        noise_multiplier: sigma,
    };
    if steps == 0 || q == 0.0 {
        best.epsilon = 0.0;
        return Ok(best);
    }
    if sigma == 0.0 {
        return Ok(best);
    }
    for a in rdp_orders() {
        let eps = steps as f64 * rdp_step(q, sigma, a) + (1.0 / delta).ln() / (a as f64 - 1.0);
        if eps < best.epsilon {
            best.epsilon = eps;
            best.order = Some(a);
        }
    }
    Ok(best)
}
