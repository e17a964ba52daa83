//! Interval bound propagation through a [`Classifier`] and the ℓ∞ radius it
//! certifies.

use serde::{Deserialize, Serialize};

use crate::autodiff::kernels;
use crate::error::{Error, Result};
use crate::model::{argmax, Classifier, Layer};

/// Relative outward widening applied after every affine layer, so rounding
/// in the centre/radius arithmetic cannot make a bound unsound.
const OUTWARD: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl IntervalBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::ShapeMismatch {
                op: "interval box",
                lhs: vec![lower.len()],
                rhs: vec![upper.len()],
            });
        }
        if lower.iter().chain(&upper).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("interval bounds"));
        }
        if let Some(i) = lower.iter().zip(&upper).position(|(l, u)| l > u) {
            return Err(Error::invalid(format!("lower bound exceeds upper at {i}")));
        }
        Ok(Self { lower, upper })
    }

    /// `[x−ε, x+ε] ∩ [0,1]^d`.
    pub fn linf_ball(x: &[f64], eps: f64) -> Result<Self> {
        if !(eps >= 0.0) {
            return Err(Error::invalid(format!("box half-width must be >= 0, got {eps}")));
        }
        Self::new(
            x.iter().map(|v| (v - eps).clamp(0.0, 1.0)).collect(),
            x.iter().map(|v| (v + eps).clamp(0.0, 1.0)).collect(),
        )
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn contains(&self, v: &[f64]) -> bool {
        v.len() == self.len() && v.iter().zip(&self.lower).zip(&self.upper).all(|((x, l), u)| l <= x && x <= u)
    }
}

fn widen(v: &mut [f64], towards: f64) {
    for x in v {
        *x += towards * OUTWARD * (1.0 + x.abs());
    }
}

/// Pushes `input` through every layer with interval arithmetic.
pub fn propagate(model: &Classifier, input: &IntervalBox) -> Result<IntervalBox> {
    if input.len() != model.input_dim() {
        return Err(Error::ShapeMismatch {
            op: "propagate",
            lhs: vec![input.len()],
            rhs: model.input_shape().to_vec(),
        });
    }
    let mut lo = input.lower.clone();
    let mut hi = input.upper.clone();
    for layer in model.layers() {
        match layer {
            Layer::Linear {
                inputs,
                outputs,
                weight,
                bias,
            } => {
                let (mu, rad) = centre_radius(&lo, &hi);
                let mut m = bias.clone();
                kernels::matmul_acc(&mu, weight, &mut m, 1, *inputs, *outputs);
                let absw: Vec<f64> = weight.iter().map(|w| w.abs()).collect();
                let mut r = vec![0.0; *outputs];
                kernels::matmul_acc(&rad, &absw, &mut r, 1, *inputs, *outputs);
                (lo, hi) = bounds(&m, &r);
            }
            Layer::Conv2d { geom, weight, bias } => {
                let (mu, rad) = centre_radius(&lo, &hi);
                let m = kernels::conv2d_forward(geom, &mu, weight, bias, 1);
                let absw: Vec<f64> = weight.iter().map(|w| w.abs()).collect();
                let r = kernels::conv2d_forward(geom, &rad, &absw, &[], 1);
                (lo, hi) = bounds(&m, &r);
            }
            Layer::Relu => {
                lo.iter_mut().for_each(|v| *v = v.max(0.0));
                hi.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            Layer::Flatten => {}
        }
    }
    IntervalBox::new(lo, hi)
}

fn centre_radius(lo: &[f64], hi: &[f64]) -> (Vec<f64>, Vec<f64>) {
    (
        lo.iter().zip(hi).map(|(l, h)| 0.5 * (l + h)).collect(),
        lo.iter().zip(hi).map(|(l, h)| 0.5 * (h - l)).collect(),
    )
}

fn bounds(m: &[f64], r: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut lo: Vec<f64> = m.iter().zip(r).map(|(a, b)| a - b).collect();
    let mut hi: Vec<f64> = m.iter().zip(r).map(|(a, b)| a + b).collect();
    widen(&mut lo, -1.0);
    widen(&mut hi, 1.0);
    (lo, hi)
}

/// True when every point of the ε-box around `x` is assigned `label`.
pub fn ibp_verify_label(model: &Classifier, x: &[f64], eps: f64, label: usize) -> Result<bool> {
    model.check_domain(x)?;
    if label >= model.num_classes() {
        return Err(Error::invalid(format!("label {label} outside {} classes", model.num_classes())));
    }
    let out = propagate(model, &IntervalBox::linf_ball(x, eps)?)?;
    let floor = out.lower[label];
    Ok(out.upper.iter().enumerate().all(|(j, &u)| j == label || floor > u))
}

/// [`ibp_verify_label`] for the class predicted at `x`.
pub fn ibp_verify(model: &Classifier, x: &[f64], eps: f64) -> Result<bool> {
    let label = argmax(&model.forward_batch(x, 1)?);
    ibp_verify_label(model, x, eps, label)
}

/// Largest verified ε in `[0,1]` for `label`, to within `tol` (bisection).
/// Zero when `label` is not verified even at ε = 0.
pub fn ibp_radius_label(model: &Classifier, x: &[f64], label: usize, tol: f64) -> Result<f64> {
    if !(tol > 0.0) {
        return Err(Error::invalid(format!("tolerance must be positive, got {tol}")));
    }
    if !ibp_verify_label(model, x, 0.0, label)? {
        return Ok(0.0);
    }
    if ibp_verify_label(model, x, 1.0, label)? {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if ibp_verify_label(model, x, mid, label)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// [`ibp_radius_label`] for the class predicted at `x`.
pub fn ibp_radius(model: &Classifier, x: &[f64], tol: f64) -> Result<f64> {
    let label = argmax(&model.forward_batch(x, 1)?);
    ibp_radius_label(model, x, label, tol)
}
