//! Finite-difference gradient verification.

use super::{Result, Tape, Tensor, TensorError, Var};

/// Compares tape gradients against central finite differences.
///
/// `f` must build the same scalar loss every time it is called; it receives a
/// fresh tape and one differentiable variable per entry of `params`. Returns
/// the maximum relative error `|analytic - numeric| / max(1, |analytic|,
/// |numeric|)` over all parameter elements.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let run = |tensors: &[Tensor]| -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.param(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        let lv = tape.value(loss).value();
        tape.backward(loss)?;
        let grads = vars
            .iter()
            .map(|&v| tape.grad(v).expect("params are differentiable"))
            .collect();
        Ok((lv, grads))
    };

    let (_, grads) = run(params)?;

    let mut max_rel = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        for ei in 0..p.numel() {
            let mut plus = params.to_vec();
            plus[pi].data_mut()[ei] += eps;
            let mut minus = params.to_vec();
            minus[pi].data_mut()[ei] -= eps;
            let lp = loss_only(&f, &plus)?;
            let lm = loss_only(&f, &minus)?;
            let numeric = (lp - lm) / (2.0 * eps);
            if !numeric.is_finite() {
                return Err(TensorError::NonFinite("finite-difference loss"));
            }
            let analytic = grads[pi].data()[ei];
            let rel = (analytic - numeric).abs() / 1.0f64.max(analytic.abs()).max(numeric.abs());
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

fn loss_only<F>(f: &F, tensors: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = tensors.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let v = tape.value(loss).value();
    if !v.is_finite() {
        return Err(TensorError::NonFinite("loss"));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes() {
        let w = Tensor::new(vec![3], vec![0.5, -1.2, 2.0]).unwrap();
        let err = grad_check(
            |t, vars| {
                let sq = t.mul(vars[0], vars[0])?;
                Ok(t.sum_all(sq))
            },
            &[w],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-8, "rel err {err}");
    }

    #[test]
    fn unused_param_reports_zero_error() {
        let w = Tensor::scalar(1.0);
        let u = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        let err = grad_check(
            |t, vars| {
                let _ = vars[1];
                t.mul(vars[0], vars[0])
            },
            &[w, u],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-8, "rel err {err}");
    }

    #[test]
    fn nan_loss_is_an_error() {
        let w = Tensor::scalar(-1.0);
        let r = grad_check(
            |t, vars| {
                // ln of a negative number
                Ok(t.ln(vars[0]))
            },
            &[w],
            1e-5,
        );
        assert!(r.is_err());
    }

    #[test]
    fn composite_network_passes() {
        let w1 = Tensor::new(vec![2, 3], vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6]).unwrap();
        let w2 = Tensor::new(vec![3, 1], vec![0.7, -0.8, 0.9]).unwrap();
        let err = grad_check(
            |t, vars| {
                let x = t.leaf(Tensor::new(vec![1, 2], vec![1.0, -1.5]).unwrap());
                let h = t.matmul(x, vars[0])?;
                let h = t.tanh(h);
                let o = t.matmul(h, vars[1])?;
                Ok(t.sum_all(o))
            },
            &[w1, w2],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "rel err {err}");
    }
}
