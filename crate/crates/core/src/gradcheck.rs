//! Central finite-difference checks of tape gradients, in double precision.
//!
//! Every network here is piecewise linear in any single parameter (ReLU, conv,
//! pixel shuffle, L1 or a fixed linear read-out), so on each side of a point the
//! one-sided differences agree to rounding error. When they do not, the
//! perturbation straddles a ReLU or L1 kink; such elements are skipped and
//! counted rather than compared.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Elements probed per tensor; smaller tensors are probed exhaustively.
    pub max_per_tensor: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-4,
            max_per_tensor: 24,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// `|analytic - numeric| / max(|analytic|, |numeric|)` over all probed elements (2-norms).
    pub rel_err: f64,
    /// Largest element-wise absolute difference.
    pub max_abs_err: f64,
    pub checked: usize,
    /// Elements whose perturbation crossed a kink.
    pub kinks: usize,
}

/// Checks the gradient of the scalar `f(state)` with respect to every tensor
/// returned by `params(state)`.
pub fn check<S>(
    state: &mut S,
    params: impl Fn(&mut S) -> Vec<&mut Tensor<f64>>,
    f: impl Fn(&S, &mut Tape<f64>) -> Result<Var>,
    config: GradCheckConfig,
    rng: &mut impl Rng,
) -> Result<GradCheckReport> {
    let eval = |s: &S| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(s, &mut tape)?;
        Ok(tape.scalar_value(out))
    };
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let out = f(state, &mut tape)?;
        let grads = tape.backward(out)?;
        params(state)
            .iter()
            .map(|p| grads.get(p).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec))
            .collect()
    };
    let f0 = eval(state)?;
    let h = config.step;
    let sizes: Vec<usize> = params(state).iter().map(|p| p.len()).collect();
    let (mut diff_sq, mut a_sq, mut n_sq, mut max_abs) = (0.0, 0.0, 0.0, 0.0f64);
    let (mut checked, mut kinks) = (0, 0);
    for (k, &len) in sizes.iter().enumerate() {
        let picks: Vec<usize> = if len <= config.max_per_tensor {
            (0..len).collect()
        } else {
            sample(rng, len, config.max_per_tensor).into_vec()
        };
        for i in picks {
            let original = params(state)[k].data()[i];
            params(state)[k].data_mut()[i] = original + h;
            let plus = eval(state)?;
            params(state)[k].data_mut()[i] = original - h;
            let minus = eval(state)?;
            params(state)[k].data_mut()[i] = original;
            let (right, left) = ((plus - f0) / h, (f0 - minus) / h);
            if (right - left).abs() > 1e-7 + 1e-4 * right.abs().max(left.abs()) {
                kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[k][i];
            diff_sq += (a - numeric) * (a - numeric);
            a_sq += a * a;
            n_sq += numeric * numeric;
            max_abs = max_abs.max((a - numeric).abs());
            checked += 1;
        }
    }
    let denom = a_sq.sqrt().max(n_sq.sqrt());
    let rel_err = if denom > 0.0 { diff_sq.sqrt() / denom } else { 0.0 };
    Ok(GradCheckReport {
        rel_err,
        max_abs_err: max_abs,
        checked,
        kinks,
    })
}

/// Random read-out weights turning any tensor into a smooth scalar loss.
pub fn readout(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn detects_a_wrong_gradient() {
        // relu'd dot product: correct gradient passes, a scaled copy of the tape does not.
        let mut r = rng::stream(1, &[]);
        let mut xs = vec![Tensor::from_fn(&[1, 2, 3, 3], |i| if i % 2 == 0 { 0.5 } else { -0.4 } + i as f64 * 0.01).into_param()];
        let w = readout(&[1, 2, 3, 3], &mut r);
        let good = check(
            &mut xs,
            |v| v.iter_mut().collect(),
            |v, tape| {
                let x = tape.leaf(&v[0]);
                let y = tape.relu(x);
                tape.dot(y, w.clone())
            },
            GradCheckConfig::default(),
            &mut r,
        )
        .unwrap();
        assert!(good.rel_err < 1e-9, "{good:?}");
        assert_eq!(good.checked, 18);
        // the same function evaluated at 1.5x is no longer matched by its own gradient
        let bad = check(
            &mut xs,
            |v| v.iter_mut().collect(),
            |v, tape| {
                let x = tape.leaf(&v[0]);
                let y = tape.relu(x);
                let z = tape.add_scaled(y, y, 0.5)?;
                let s = tape.dot(z, w.clone())?;
                // detach a second copy so the backward pass misses half the slope
                let c = tape.constant(v[0].clone());
                let c = tape.relu(c);
                let extra = tape.dot(c, w.map(|v| v * 0.5))?;
                tape.add(s, extra)
            },
            GradCheckConfig::default(),
            &mut r,
        )
        .unwrap();
        assert!(bad.rel_err > 0.1, "{bad:?}");
    }

    #[test]
    fn kinks_are_skipped() {
        let mut r = rng::stream(2, &[]);
        let mut xs = vec![Tensor::new(&[1, 1, 1, 2], vec![0.00005, 0.3]).unwrap().into_param()];
        let rep = check(
            &mut xs,
            |v| v.iter_mut().collect(),
            |v, tape| {
                let x = tape.leaf(&v[0]);
                let y = tape.relu(x);
                tape.dot(y, Tensor::full(&[1, 1, 1, 2], 1.0))
            },
            GradCheckConfig::default(),
            &mut r,
        )
        .unwrap();
        assert_eq!((rep.checked, rep.kinks), (1, 1));
    }
}
