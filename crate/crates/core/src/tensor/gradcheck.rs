use super::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Absolute floor applied to the denominator of the relative error.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst elementwise `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
    pub max_rel_error: f64,
    /// Element at which `max_rel_error` occurs.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the reverse-mode gradient of `f` at `x` with central differences.
///
/// `f` receives a fresh graph and the leaf holding `x` and must return a
/// scalar.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, step: f64) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be > 0, got {step}")));
    }
    let mut graph = Graph::new();
    let leaf = graph.param(x.clone());
    let out = f(&mut graph, leaf)?;
    let analytic: Vec<f64> = graph
        .backward(out)?
        .get(leaf)
        .map(|g| g.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect())
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |probe: &Tensor<T>| -> Result<f64> {
        let mut g = Graph::new();
        let leaf = g.constant(probe.clone());
        let out = f(&mut g, leaf)?;
        let value = g.value(out);
        if !value.is_scalar() {
            return Err(Error::NonScalarLoss(value.shape().to_vec()));
        }
        Ok(value.item().to_f64().unwrap_or(f64::NAN))
    };

    let mut numeric = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        let (up, down) = (orig + T::of(step), orig - T::of(step));
        probe.data_mut()[i] = up;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = down;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        // the representable perturbation, not the requested one
        let width = (up - down).to_f64().unwrap_or(2.0 * step);
        numeric.push((plus - minus) / width);
    }

    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });

    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}

pub(crate) fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}
