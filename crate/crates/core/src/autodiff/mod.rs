//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! A computation is expressed as a closure that records operations on a
//! [`Tape`]; [`gradient`] runs it once forward and once backward.
//!
//! ```
//! use certattack::autodiff::{gradient, Tensor};
//!
//! let x = Tensor::from_vec(vec![1.0, 2.0]).unwrap();
//! let (value, grad) = gradient(|t, x| { let sq = t.mul(x, x)?; t.sum(sq) }, &x).unwrap();
//! assert_eq!(value, 5.0);
//! assert_eq!(grad.data(), &[2.0, 4.0]);
//! ```

pub(crate) mod kernels;
mod tape;
mod tensor;

pub use kernels::ConvGeometry;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
pub(crate) use tensor::{distance, norm_l2};

use crate::error::{Error, Result};

/// Evaluates `graph` at `input`.
pub fn forward<F>(graph: F, input: &Tensor) -> Result<Tensor>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone());
    let out = graph(&mut tape, x)?;
    Ok(tape.try_value(out)?.clone())
}

/// Value and gradient of a scalar-valued `graph` at `wrt`.
pub fn gradient<F>(graph: F, wrt: &Tensor) -> Result<(f64, Tensor)>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(wrt.clone());
    let out = graph(&mut tape, x)?;
    let value = tape.try_value(out)?;
    let v = value.item().ok_or_else(|| Error::NotScalar(value.shape().to_vec()))?;
    let grads = tape.backward(out)?;
    Ok((v, grads.wrt(&tape, x)?))
}

/// Largest relative discrepancy between the tape gradient and central
/// differences with step `h`.
///
/// Each coordinate's error is scaled by `max(|tape|, |fd|, 1e-3)`, so tiny
/// gradient entries are compared absolutely.
pub fn finite_diff_check<F>(graph: F, wrt: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {h}")));
    }
    let (_, grad) = gradient(&graph, wrt)?;
    let eval = |x: Vec<f64>| -> Result<f64> {
        let t = Tensor::new(wrt.shape().to_vec(), x)?;
        let out = forward(&graph, &t)?;
        out.item().ok_or_else(|| Error::NotScalar(out.shape().to_vec()))
    };
    let mut worst = 0.0f64;
    for i in 0..wrt.len() {
        let mut plus = wrt.data().to_vec();
        let mut minus = wrt.data().to_vec();
        plus[i] += h;
        minus[i] -= h;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let g = grad.data()[i];
        let scale = g.abs().max(fd.abs()).max(1e-3);
        worst = worst.max((g - fd).abs() / scale);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec()).unwrap()
    }

    #[test]
    fn identity_forward() {
        let out = forward(|_, x| Ok(x), &t(&[0.3])).unwrap();
        assert_eq!(out.data(), &[0.3]);
    }

    #[test]
    fn sum_of_squares() {
        let f = |tp: &mut Tape, x: Var| {
            let sq = tp.mul(x, x)?;
            tp.sum(sq)
        };
        assert_eq!(forward(f, &t(&[1.0, 2.0])).unwrap().data(), &[5.0]);
        let (v, g) = gradient(f, &t(&[1.0, 2.0])).unwrap();
        assert_eq!(v, 5.0);
        assert_eq!(g.data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_graph_has_zero_gradient() {
        let (v, g) = gradient(
            |tp, _x| {
                let c = tp.constant(Tensor::scalar(3.0)?);
                Ok(c)
            },
            &t(&[1.0, -2.0]),
        )
        .unwrap();
        assert_eq!(v, 3.0);
        assert_eq!(g.data(), &[0.0, 0.0]);
    }

    #[test]
    fn finite_diff_examples() {
        let linear = finite_diff_check(|tp, x| tp.sum(x), &t(&[0.2, -1.5, 3.0]), 1e-5).unwrap();
        assert!(linear < 1e-9, "{linear}");
        let exp = finite_diff_check(
            |tp, x| {
                let e = tp.exp(x)?;
                tp.sum(e)
            },
            &t(&[0.0]),
            1e-5,
        )
        .unwrap();
        assert!(exp < 1e-6, "{exp}");
        let relu = finite_diff_check(
            |tp, x| {
                let r = tp.relu(x)?;
                tp.sum(r)
            },
            &t(&[0.5, -0.5]),
            1e-5,
        )
        .unwrap();
        assert!(relu < 1e-6, "{relu}");
    }

    #[test]
    fn errors() {
        assert!(matches!(
            gradient(|_, x| Ok(x), &t(&[1.0, 2.0])),
            Err(Error::NotScalar(_))
        ));
        assert!(matches!(
            forward(
                |tp, x| {
                    let w = tp.constant(Tensor::new(vec![3, 1], vec![1.0; 3])?);
                    let x2 = tp.reshape(x, vec![1, 2])?;
                    tp.matmul(x2, w)
                },
                &t(&[1.0, 2.0])
            ),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(
            forward(|tp, x| tp.log(x), &t(&[-1.0])),
            Err(Error::NonFinite(_))
        ));
        assert!(finite_diff_check(|tp, x| tp.sum(x), &t(&[1.0]), 0.0).is_err());

        let mut a = Tape::new();
        let b = Tape::new();
        let x = a.leaf(t(&[1.0]));
        let s = a.sum(x).unwrap();
        let g = a.backward(s).unwrap();
        assert!(matches!(g.wrt(&b, x), Err(Error::NotOnTape)));
    }

    #[test]
    fn clip_is_straight_through_inside_bounds() {
        let (_, g) = gradient(
            |tp, x| {
                let c = tp.clip(x, 0.0, 1.0)?;
                tp.sum(c)
            },
            &t(&[-0.5, 0.0, 0.5, 1.0, 1.5]),
        )
        .unwrap();
        assert_eq!(g.data(), &[0.0, 1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let (_, g) = gradient(
            |tp, x| {
                let r = tp.relu(x)?;
                tp.sum(r)
            },
            &t(&[0.0]),
        )
        .unwrap();
        assert_eq!(g.data(), &[0.0]);
    }

    #[test]
    fn vjp_matches_weighted_sum() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[0.3, -0.7, 1.1]));
        let rows = tape.reshape(x, vec![1, 3]).unwrap();
        let ls = tape.softmax_rows(rows).unwrap();
        let seed = [0.5, -1.0, 2.0];
        let g1 = tape.backward_with(ls, &seed).unwrap().wrt(&tape, x).unwrap();

        let (_, g2) = gradient(
            |tp, x| {
                let rows = tp.reshape(x, vec![1, 3])?;
                let s = tp.softmax_rows(rows)?;
                let w = tp.constant(Tensor::new(vec![1, 3], seed.to_vec())?);
                let p = tp.mul(s, w)?;
                tp.sum(p)
            },
            &t(&[0.3, -0.7, 1.1]),
        )
        .unwrap();
        for (a, b) in g1.data().iter().zip(g2.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
