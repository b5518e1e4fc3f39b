use crate::error::{Error, Result};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;

/// Compares the reverse-mode gradient of a scalar function against central
/// differences and returns the worst coordinate's relative error,
/// `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
///
/// `f` receives a fresh tape and the variable holding `x`; it is called
/// `2·len(x) + 1` times.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Config(format!("grad_check step {eps} outside [1e-6, 1e-3]")));
    }
    let mut tape = Tape::new();
    let xv = tape.variable(x.clone());
    let out = f(&mut tape, xv)?;
    if tape.value(out).len() != 1 {
        return Err(Error::shape("grad_check (output must be scalar)", tape.value(out).shape(), &[1]));
    }
    let analytic = tape
        .backward(out)?
        .get(xv)
        .map(Tensor::into_data)
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |probe: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(probe);
        let o = f(&mut t, v)?;
        Ok(t.value(o).item())
    };

    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic[i];
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let w = Tensor::vector(vec![0.5, -2.0, 3.0]);
        let x = Tensor::vector(vec![1.0, 2.0, -1.0]);
        let err = grad_check(
            |t, xv| {
                let wv = t.constant(w.clone());
                let p = t.mul(wv, xv)?;
                Ok(t.sum(p))
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn tanh_matches_central_difference() {
        let x = Tensor::scalar(0.5);
        let err = grad_check(|t, xv| Ok(t.tanh(xv)), &x, 1e-5).unwrap();
        assert!(err <= 1e-7, "{err}");
        // the analytic value itself
        let mut t = Tape::new();
        let xv = t.variable(x);
        let y = t.tanh(xv);
        let g = t.backward(y).unwrap().get(xv).unwrap().item();
        assert!((g - (1.0 - 0.5f64.tanh().powi(2))).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_scalar_output_and_bad_step() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        assert!(grad_check(|t, xv| Ok(t.tanh(xv)), &x, 1e-5).is_err());
        assert!(grad_check(|t, xv| Ok(t.sum(xv)), &x, 0.1).is_err());
    }
}
