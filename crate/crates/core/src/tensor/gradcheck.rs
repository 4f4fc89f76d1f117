use super::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Entry index where `max_rel_err` occurred.
    pub worst_index: usize,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
    pub step: f64,
}

impl GradCheckReport {
    pub fn all_passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Compares tape gradients of `f` against central differences for every
/// entry of the selected parameters.
///
/// `f` builds a scalar loss on the graph it is given. The relative error of
/// an entry is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    step: f64,
    tol: f64,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let first = evaluate(&mut f, store)?;
    let second = evaluate(&mut f, store)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new();
        let root = f(&mut g, store)?;
        g.backward(root)?;
        params
            .iter()
            .map(|&id| {
                let v = g.param(store, id)?;
                Ok(g.grad_f64(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; store.get(id).tensor.len()]))
            })
            .collect::<Result<_>>()?
    };

    let mut report = GradCheckReport {
        params: Vec::with_capacity(params.len()),
        tol,
        step,
    };
    for (&id, grad) in params.iter().zip(&analytic) {
        let mut max_rel = 0.0f64;
        let mut max_abs = 0.0f64;
        let mut worst = 0;
        for i in 0..grad.len() {
            let orig = store.get(id).tensor.data()[i];
            let plus = (f64::from(orig) + step) as f32;
            let minus = (f64::from(orig) - step) as f32;
            store.get_mut(id).tensor.data_mut()[i] = plus;
            let fp = evaluate(&mut f, store)?;
            store.get_mut(id).tensor.data_mut()[i] = minus;
            let fm = evaluate(&mut f, store)?;
            store.get_mut(id).tensor.data_mut()[i] = orig;
            // The perturbation is applied in f32, so divide by the step that
            // was actually taken.
            let numeric = (fp - fm) / (f64::from(plus) - f64::from(minus));
            let abs = (grad[i] - numeric).abs();
            let rel = abs / grad[i].abs().max(numeric.abs()).max(1e-8);
            max_abs = max_abs.max(abs);
            if rel > max_rel {
                max_rel = rel;
                worst = i;
            }
        }
        report.params.push(ParamCheck {
            name: store.get(id).name.clone(),
            max_rel_err: max_rel,
            max_abs_err: max_abs,
            worst_index: worst,
            passed: max_rel < tol,
        });
    }
    Ok(report)
}

fn evaluate<F>(f: &mut F, store: &ParamStore) -> Result<f64>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let root = f(&mut g, store)?;
    Ok(g.scalar(root))
}
