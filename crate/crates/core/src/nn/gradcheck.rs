//! Central finite-difference gradient checking.
//!
//! The numeric side only ever calls the forward closure, so it stays
//! independent of the backward code it verifies.

use rand::Rng;

use super::{gaussian_matrix, Parameterized};

/// Per-parameter comparison of analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    /// `|a - n| / max(|a|, |n|)` over the whole tensor; 0 when both vanish.
    pub relative_error: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.params.iter().map(|p| p.relative_error).fold(0.0, f64::max)
    }
}

/// Below this norm a gradient tensor counts as identically zero.
const ZERO_NORM: f64 = 1e-9;

/// Sets one entry of the `target`-th trainable parameter, returning the old value.
fn set_entry<M: Parameterized + ?Sized>(model: &mut M, target: usize, entry: usize, value: f64) -> f64 {
    let mut idx = 0;
    let mut old = f64::NAN;
    model.visit_mut(&mut |p| {
        if p.is_trainable() {
            if idx == target {
                let slot = p.value.iter_mut().nth(entry).expect("entry in range");
                old = std::mem::replace(slot, value);
            }
            idx += 1;
        }
    });
    old
}

/// Compares gradients written by `analytic` against central differences of
/// `loss` with step `h`, for every entry of every trainable parameter.
pub fn check_gradients<M, L, A>(model: &mut M, h: f64, mut loss: L, analytic: A) -> GradCheckReport
where
    M: Parameterized + ?Sized,
    L: FnMut(&M) -> f64,
    A: FnOnce(&mut M),
{
    model.zero_grad();
    analytic(model);
    let mut grads = Vec::new();
    model.visit(&mut |p| {
        if let Some(g) = p.grad() {
            grads.push((p.name().to_string(), g.iter().copied().collect::<Vec<f64>>()));
        }
    });

    let mut params = Vec::with_capacity(grads.len());
    for (target, (name, analytic)) in grads.into_iter().enumerate() {
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        for (entry, a) in analytic.iter().enumerate() {
            let original = set_entry(model, target, entry, f64::NAN);
            set_entry(model, target, entry, original + h);
            let plus = loss(model);
            set_entry(model, target, entry, original - h);
            let minus = loss(model);
            set_entry(model, target, entry, original);
            let numeric = (plus - minus) / (2.0 * h);
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
        let (an, nn) = (a2.sqrt(), n2.sqrt());
        let scale = an.max(nn);
        let relative_error = if scale < ZERO_NORM { 0.0 } else { diff2.sqrt() / scale };
        params.push(ParamCheck { name, analytic_norm: an, numeric_norm: nn, relative_error });
    }
    GradCheckReport { params }
}

/// Overwrites every trainable parameter with Gaussian noise of std `scale`,
/// so zero-initialized factors (LoRA up projections, biases) carry signal.
pub fn randomize_trainable<M: Parameterized + ?Sized, R: Rng + ?Sized>(model: &mut M, rng: &mut R, scale: f64) {
    model.visit_mut(&mut |p| {
        if p.is_trainable() {
            let (r, c) = p.value.dim();
            p.value = gaussian_matrix(rng, r, c, scale);
        }
    });
}
