//! Central finite-difference verification of analytic gradients.

use crate::element::Element;
use crate::error::{NnError, Result};
use crate::layers::ParamSet;
use crate::model::Grads;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over the checked coordinates.
    pub rel_error: f64,
    /// Largest per-coordinate absolute difference.
    pub max_abs_diff: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates left out because a kink lies within the probe (see [`check_gradients`]).
    pub nonsmooth: usize,
}

/// Compares `analytic` against central differences of `loss_at` with step `h`.
///
/// At most `max_coords` coordinates are probed, spread evenly over trainable
/// parameters. `loss_at` must evaluate the loss for the given parameter values.
///
/// On a smooth loss the gap between the forward and backward one-sided
/// differences is `h f''` to third order, so it halves with the step. A
/// coordinate where it does not sits within `h` of a kink (a leaky ReLU
/// switching sides, which also makes an input-gradient penalty jump). Central
/// differences are meaningless there, so such coordinates are counted in
/// `nonsmooth` instead of `checked`.
pub fn check_gradients<T, F>(
    params: &ParamSet<T>,
    analytic: &Grads<T>,
    h: f64,
    max_coords: usize,
    mut loss_at: F,
) -> Result<GradCheck>
where
    T: Element,
    F: FnMut(&ParamSet<T>) -> Result<f64>,
{
    let mut flat_analytic = Vec::new();
    let mut trainable = Vec::new();
    for (layer, g) in params.layers().iter().zip(analytic) {
        for (ti, (t, gt)) in layer.tensors.iter().zip(g).enumerate() {
            if t.shape() != gt.shape() {
                return Err(NnError::ShapeMismatch(format!(
                    "gradient {:?} vs parameter {:?} in {}",
                    gt.shape(),
                    t.shape(),
                    layer.spec.name
                )));
            }
            flat_analytic.extend(gt.data().iter().map(|v| v.as_f64()));
            trainable.extend(std::iter::repeat_n(layer.spec.kind.trainable_tensor(ti), t.len()));
        }
    }
    let candidates: Vec<usize> = (0..flat_analytic.len()).filter(|&i| trainable[i]).collect();
    let stride = candidates.len().div_ceil(max_coords.max(1)).max(1);
    let base = params.flatten();
    let mut probe = params.clone();
    let (mut diff2, mut a2, mut n2, mut max_abs) = (0.0, 0.0, 0.0, 0.0f64);
    let (mut checked, mut nonsmooth) = (0, 0);
    let center = loss_at(params)?;
    let mut at = |i: usize, x: f64, probe: &mut ParamSet<T>| -> Result<f64> {
        let mut vals = base.clone();
        vals[i] = T::from_f64_lossy(x);
        probe.set_flat(&vals)?;
        loss_at(probe)
    };
    for &i in candidates.iter().step_by(stride) {
        let x = base[i].as_f64();
        let plus = at(i, x + h, &mut probe)?;
        let minus = at(i, x - h, &mut probe)?;
        let gap = (plus - 2.0 * center + minus) / h;
        let half_gap = (at(i, x + h / 2.0, &mut probe)? - 2.0 * center + at(i, x - h / 2.0, &mut probe)?) / (h / 2.0);
        let scale = ((plus - center) / h).abs().max(((center - minus) / h).abs()).max(1e-3);
        if (half_gap - gap / 2.0).abs() > 0.05 * gap.abs() / 2.0 + 1e-6 * scale {
            nonsmooth += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * h);
        let a = flat_analytic[i];
        diff2 += (a - numeric).powi(2);
        a2 += a * a;
        n2 += numeric * numeric;
        max_abs = max_abs.max((a - numeric).abs());
        checked += 1;
    }
    let denom = a2.sqrt().max(n2.sqrt());
    let rel_error = if denom == 0.0 {
        0.0
    } else {
        diff2.sqrt() / denom
    };
    Ok(GradCheck {
        rel_error,
        max_abs_diff: max_abs,
        checked,
        nonsmooth,
    })
}
