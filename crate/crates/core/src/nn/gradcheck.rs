use super::{Graph, ParamStore, Tensor, Var};
use crate::{Error, Result};

/// Entries where both gradients are below this are finite-difference
/// round-off, e.g. where the true gradient is exactly zero.
const ABS_FLOOR: f64 = 1e-8;

fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs() + n.abs();
    if scale < ABS_FLOOR {
        return 0.0;
    }
    (a - n).abs() / scale
}

fn eval<F>(params: &ParamStore<f64>, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let mut g = Graph::with_params(params);
    let loss = f(&mut g)?;
    let v = g.value(loss).item();
    if !v.is_finite() {
        return Err(Error::NonFinite("loss during gradient check".into()));
    }
    Ok(v)
}

/// Compares reverse-mode parameter gradients of the scalar `fragment`
/// against central differences with step `epsilon`, perturbing every
/// parameter entry. Returns the maximum of
/// `|analytic - numeric| / (|analytic| + |numeric|)`, counting entries
/// where both are below 1e-8 as zero.
pub fn grad_check<F>(params: &ParamStore<f64>, fragment: F, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::with_params(params);
        let loss = fragment(&mut g)?;
        if !g.value(loss).item().is_finite() {
            return Err(Error::NonFinite("loss during gradient check".into()));
        }
        g.backward(loss)?.into_params()
    };
    let mut work = params.clone();
    let mut worst = 0.0f64;
    for id in 0..params.len() {
        for i in 0..params.get(id).len() {
            let orig = params.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + epsilon;
            let up = eval(&work, &fragment)?;
            work.get_mut(id).data_mut()[i] = orig - epsilon;
            let down = eval(&work, &fragment)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let a = analytic[id].as_ref().map_or(0.0, |t| t.data()[i]);
            worst = worst.max(rel_err(a, numeric));
        }
    }
    Ok(worst)
}

/// Same check with respect to free input tensors instead of parameters.
pub fn grad_check_inputs<F>(inputs: &[Tensor<f64>], fragment: F, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let run = |xs: &[Tensor<f64>]| -> Result<(f64, Vec<Option<Tensor<f64>>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let loss = fragment(&mut g, &vars)?;
        let v = g.value(loss).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("loss during gradient check".into()));
        }
        let grads = g.backward(loss)?;
        Ok((v, vars.iter().map(|&x| grads.wrt(x)).collect()))
    };
    let (_, analytic) = run(inputs)?;
    let mut work = inputs.to_vec();
    let mut worst = 0.0f64;
    for k in 0..inputs.len() {
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + epsilon;
            let up = run(&work)?.0;
            work[k].data_mut()[i] = orig - epsilon;
            let down = run(&work)?.0;
            work[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let a = analytic[k].as_ref().map_or(0.0, |t| t.data()[i]);
            worst = worst.max(rel_err(a, numeric));
        }
    }
    Ok(worst)
}
