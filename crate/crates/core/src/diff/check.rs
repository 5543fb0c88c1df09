use crate::error::{Error, Result};

use super::{Bound, Graph, ParamSet, Var};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest relative error per parameter, in parameter order.
    pub per_param: Vec<(String, f64)>,
    pub max_rel_error: f64,
    pub passed: bool,
    /// Set when the function produced a non-finite value.
    pub failure: Option<String>,
}

// Denominator floor so gradients that are zero up to roundoff are not
// judged on noise.
const REL_FLOOR: f64 = 1e-6;

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

fn eval<F>(f: &F, params: &ParamSet) -> Result<f64>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let out = f(&mut g, &bound)?;
    g.value(out)
        .item()
        .ok_or_else(|| Error::NonScalarLoss(g.value(out).shape().to_vec()))
}

/// Checks the gradients of the scalar `f` at `params`.
pub fn finite_diff_check<F>(f: F, params: &ParamSet, h: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Invalid(format!("perturbation must be positive, got {h}")));
    }
    let mut graph = Graph::new();
    let bound = params.bind(&mut graph);
    let out = f(&mut graph, &bound)?;
    let base = graph.value(out).item().ok_or_else(|| Error::NonScalarLoss(graph.value(out).shape().to_vec()))?;
    let fail = |location: String| GradCheckReport {
        per_param: vec![],
        max_rel_error: f64::INFINITY,
        passed: false,
        failure: Some(location),
    };
    if !base.is_finite() {
        return Ok(fail("unperturbed evaluation".into()));
    }
    let grads = graph.backward(out)?;
    let analytic = bound.collect(&graph, &grads);

    let mut work = params.clone();
    let mut per_param = Vec::new();
    let mut max_rel: f64 = 0.0;
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let ga = analytic.get(&name).expect("collected for every param");
        let mut worst: f64 = 0.0;
        for i in 0..ga.len() {
            let orig = work.get(&name).expect("present").values()[i];
            work.get_mut(&name).expect("present").values_mut()[i] = orig + h;
            let up = eval(&f, &work)?;
            work.get_mut(&name).expect("present").values_mut()[i] = orig - h;
            let down = eval(&f, &work)?;
            work.get_mut(&name).expect("present").values_mut()[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Ok(fail(format!("{name}[{i}]")));
            }
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(rel_error(ga.values()[i], numeric));
        }
        max_rel = max_rel.max(worst);
        per_param.push((name, worst));
    }
    Ok(GradCheckReport {
        per_param,
        max_rel_error: max_rel,
        passed: max_rel < tolerance,
        failure: None,
    })
}
