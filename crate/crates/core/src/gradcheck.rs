//! Central-difference gradient oracle.

use indexmap::IndexMap;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Named parameter set, in a fixed order.
pub type Params<T> = IndexMap<String, Tensor<T>>;

/// Registers every tensor of `params` on `tape` under its name.
pub fn register<T: Scalar>(tape: &mut Tape<T>, params: &Params<T>) -> Result<IndexMap<String, Var>> {
    params
        .iter()
        .map(|(name, t)| Ok((name.clone(), tape.param(name.clone(), t.clone())?)))
        .collect()
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over elements of |analytic − numeric| / max(|analytic|, |numeric|, 1e-8)
    pub max_rel_error: f64,
    /// Parameter name and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub elements: usize,
}

/// Compares the tape's gradients of `loss_fn` against central differences
/// with step `h`, evaluated over every element of every parameter.
///
/// `loss_fn` receives a fresh tape with the parameters already registered
/// and must return a scalar loss recorded on it.
pub fn finite_diff_check<T, F>(params: &Params<T>, h: f64, loss_fn: F) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &IndexMap<String, Var>) -> Result<Var>,
{
    let eval = |p: &Params<T>| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = register(&mut tape, p)?;
        let loss = loss_fn(&mut tape, &vars)?;
        Ok(tape.value(loss).item().as_f64())
    };

    let mut tape = Tape::new();
    let vars = register(&mut tape, params)?;
    let loss = loss_fn(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        elements: 0,
    };
    let mut probe = params.clone();
    for (name, tensor) in params {
        let analytic: Vec<f64> = match grads.by_name(name) {
            Some(g) => g.data().iter().map(|v| v.as_f64()).collect(),
            None => vec![0.0; tensor.numel()],
        };
        for i in 0..tensor.numel() {
            let orig = tensor.data()[i];
            probe[name].data_mut()[i] = T::of(orig.as_f64() + h);
            let up = eval(&probe)?;
            probe[name].data_mut()[i] = T::of(orig.as_f64() - h);
            let down = eval(&probe)?;
            probe[name].data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.elements += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}
