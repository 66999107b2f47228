use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamSet;

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(parameter name, flat index)` of the worst entry.
    pub worst: Option<(String, usize)>,
}

/// Compares analytic gradients of `loss_fn` against central finite
/// differences with step `h` for every scalar in `params`.
///
/// The relative error of one entry is `|a - n| / max(|a|, |n|, floor)`;
/// `floor` keeps entries whose true gradient is zero from dividing by
/// round-off.
pub fn finite_difference_check<F>(
    params: &mut ParamSet<f64>,
    h: f64,
    floor: f64,
    mut loss_fn: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &ParamSet<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, params)?;
    let mut grads = g.backward(loss)?;
    drop(g);
    params.load_grads(&mut grads)?;

    let mut eval = |ps: &ParamSet<f64>| -> Result<f64> {
        let mut g = Graph::inference();
        let l = loss_fn(&mut g, ps)?;
        Ok(g.scalar_value(l))
    };

    let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    for id in ids {
        let analytic = params.tensor(id).grad().unwrap().to_vec();
        for (k, &a) in analytic.iter().enumerate() {
            let orig = params.tensor(id).data()[k];
            params.tensor_mut(id).data_mut()[k] = orig + h;
            let plus = eval(params)?;
            params.tensor_mut(id).data_mut()[k] = orig - h;
            let minus = eval(params)?;
            params.tensor_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if rel > report.max_rel_err || !rel.is_finite() {
                report.max_rel_err = rel;
                report.worst = Some((params.get(id).name.clone(), k));
            }
        }
    }
    params.clear_grads();
    Ok(report)
}
