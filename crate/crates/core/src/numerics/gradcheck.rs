use super::{NumericsError, Tape, Tensor, Var};

/// Compares reverse-mode gradients with central finite differences.
///
/// `f` records a scalar function of the given parameter vars on a fresh tape.
/// Returns the largest `|analytic - numeric| / max(1, |analytic|)` over every
/// coordinate of every parameter.
pub fn grad_check<F, E>(f: F, params: &[Tensor], h: f64) -> Result<f64, E>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, E>,
    E: From<NumericsError>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(NumericsError::Contract(format!("finite-difference step must be positive, got {h}")).into());
    }
    let eval = |values: &[Tensor], requires_grad: bool| -> Result<(Tape, Vec<Var>, Var), E> {
        let mut tape = Tape::new();
        let vars = values
            .iter()
            .map(|t| tape.leaf(t.clone(), requires_grad))
            .collect::<Result<Vec<_>, _>>()?;
        let root = f(&mut tape, &vars)?;
        if !tape.value(root).is_finite() {
            return Err(NumericsError::NonFinite { op: "grad_check" }.into());
        }
        Ok((tape, vars, root))
    };

    let (mut tape, vars, root) = eval(params, true)?;
    let grads = tape.backward(root)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for ci in 0..p.numel() {
            let orig = p.data()[ci];
            work[pi].data_mut()[ci] = orig + h;
            let (t_plus, _, r_plus) = eval(&work, false)?;
            work[pi].data_mut()[ci] = orig - h;
            let (t_minus, _, r_minus) = eval(&work, false)?;
            work[pi].data_mut()[ci] = orig;
            let numeric = (t_plus.scalar(r_plus) - t_minus.scalar(r_minus)) / (2.0 * h);
            let a = analytic[pi].data()[ci];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
