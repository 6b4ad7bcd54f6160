use super::params::{Bindings, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Real;
use crate::error::{Error, Result};

/// Outcome of [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst element.
    pub worst: Option<(String, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub elements_checked: usize,
}

/// Compares reverse-mode gradients against central differences for every
/// trainable element of `params`.
///
/// Relative error per element is `|a - n| / max(|a|, |n|, 1e-8)`. Stored
/// parameters are `f32`, so the difference quotient divides by the
/// perturbation that was actually representable rather than by `2 * eps`.
pub fn grad_check<T, F>(f: F, params: &mut ParamStore, eps: f64) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Tape<T>, &Bindings) -> Result<Var>,
{
    if !(1e-4..=1e-2).contains(&eps) {
        return Err(Error::config(format!("grad_check eps {eps} outside [1e-4, 1e-2]")));
    }
    let eval = |params: &ParamStore| -> Result<f64> {
        let mut tape = Tape::<T>::new();
        let binds = params.bind(&mut tape);
        let loss = f(&mut tape, &binds)?;
        Ok(tape.value(loss)[0].to_double())
    };

    let mut tape = Tape::<T>::new();
    let binds = params.bind(&mut tape);
    let loss = f(&mut tape, &binds)?;
    let grads = tape.backward(loss)?;

    let names: Vec<String> = params
        .iter()
        .filter(|(_, t)| t.requires_grad())
        .map(|(n, _)| n.clone())
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        elements_checked: 0,
    };
    for name in names {
        let var = binds.var(&name)?;
        let numel = params.get(&name)?.numel();
        let analytic: Vec<f64> = match grads.get(var) {
            Some(g) => g.iter().map(|v| v.to_double()).collect(),
            None => vec![0.0; numel],
        };
        if analytic.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { name });
        }
        for (i, &a) in analytic.iter().enumerate() {
            let orig = params.get(&name)?.data()[i];
            let plus = (orig as f64 + eps) as f32;
            let minus = (orig as f64 - eps) as f32;
            params.get_mut(&name)?.data_mut()[i] = plus;
            let fp = eval(params)?;
            params.get_mut(&name)?.data_mut()[i] = minus;
            let fm = eval(params)?;
            params.get_mut(&name)?.data_mut()[i] = orig;
            let numeric = (fp - fm) / (plus as f64 - minus as f64);
            if !numeric.is_finite() {
                return Err(Error::NonFiniteGradient { name });
            }
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            report.elements_checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), i));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}
