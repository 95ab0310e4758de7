//! Central finite-difference verification of analytic gradients.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(parameter, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

fn evaluate<F>(f: &F, params: &ParamStore) -> Result<(f64, Graph, Var)>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, params)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::Shape(format!("objective must be scalar, got {:?}", v.shape())));
    }
    let y = v.item();
    if !y.is_finite() {
        return Err(Error::NonFinite("objective".into()));
    }
    Ok((y, g, out))
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// At most `samples` scalar entries of trainable parameters are checked, drawn
/// with `seed`; smaller stores are checked exhaustively. The error of one entry
/// is `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, params: &ParamStore, eps: f64, samples: usize, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument("eps must be positive".into()));
    }
    let (_, graph, out) = evaluate(&f, params)?;
    let analytic: std::collections::BTreeMap<String, crate::tensor::Tensor> =
        graph.backward(out).param_grads(params).into_iter().collect();
    drop(graph);

    let mut entries: Vec<(String, usize)> = params
        .iter()
        .filter(|(_, p)| p.trainable)
        .flat_map(|(n, p)| (0..p.value.numel()).map(move |i| (n.clone(), i)))
        .collect();
    if entries.len() > samples {
        let mut rng = Rng::derive(seed, "grad_check");
        rng.shuffle(&mut entries);
        entries.truncate(samples);
    }

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for (name, idx) in entries {
        let orig = work.get(&name)?.data()[idx];
        work.get_mut(&name)?.data_mut()[idx] = orig + eps;
        let (plus, _, _) = evaluate(&f, &work)?;
        work.get_mut(&name)?.data_mut()[idx] = orig - eps;
        let (minus, _, _) = evaluate(&f, &work)?;
        work.get_mut(&name)?.data_mut()[idx] = orig;

        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.get(&name).map_or(0.0, |g| g.data()[idx]);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        report.checked += 1;
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some((name, idx, a, numeric));
        }
    }
    Ok(report)
}
