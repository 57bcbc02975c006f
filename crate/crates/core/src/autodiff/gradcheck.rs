//! Central finite-difference checking of analytic gradients (double precision).

use serde::Serialize;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Maximum allowed relative error.
    pub tolerance: f64,
    /// Denominator floor so exact zeros compare on an absolute scale.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-4,
            tolerance: 1e-4,
            floor: 1e-5,
        }
    }
}

/// `|a − n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug, Serialize)]
pub struct GradFailure {
    pub input: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Input holding the worst element.
    pub worst_input: String,
    pub failures: Vec<GradFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// A named differentiable input.
pub type NamedInput = (String, Tensor<f64>);

fn evaluate<F>(inputs: &[NamedInput], build: &F) -> Result<(Graph<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|(_, t)| g.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = build(&mut g, &vars)?;
    Ok((g, vars, out))
}

/// Compares backward gradients of `build` against central differences for
/// every element of every input.
pub fn check_gradients<F>(name: &str, inputs: &[NamedInput], build: F, cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    check_gradients_with_hook(name, inputs, build, cfg, |_| {})
}

/// Like [`check_gradients`], but `hook` may edit the analytic gradients
/// before comparison (fault injection).
pub fn check_gradients_with_hook<F, H>(
    name: &str,
    inputs: &[NamedInput],
    build: F,
    cfg: GradCheckConfig,
    hook: H,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    H: Fn(&mut [Tensor<f64>]),
{
    let (g, vars, out) = evaluate(inputs, &build)?;
    let grads = g.backward(out)?;
    let mut analytic = vars
        .iter()
        .map(|&v| grads.wrt(v).cloned())
        .collect::<Result<Vec<_>>>()?;
    hook(&mut analytic);

    let mut report = GradCheckReport {
        name: name.to_string(),
        checked: 0,
        max_rel_err: 0.0,
        worst_input: String::new(),
        failures: Vec::new(),
    };
    let mut probe = inputs.to_vec();
    for (which, (label, tensor)) in inputs.iter().enumerate() {
        for idx in 0..tensor.len() {
            let orig = tensor.data()[idx];
            probe[which].1.data_mut()[idx] = orig + cfg.step;
            let (gp, _, op) = evaluate(&probe, &build)?;
            let fp = gp.value(op).item()?;
            probe[which].1.data_mut()[idx] = orig - cfg.step;
            let (gm, _, om) = evaluate(&probe, &build)?;
            let fm = gm.value(om).item()?;
            probe[which].1.data_mut()[idx] = orig;

            let numeric = (fp - fm) / (2.0 * cfg.step);
            let a = analytic[which].data()[idx];
            let err = relative_error(a, numeric, cfg.floor);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_input = label.clone();
            }
            if !(err < cfg.tolerance) {
                report.failures.push(GradFailure {
                    input: label.clone(),
                    index: idx,
                    analytic: a,
                    numeric,
                    rel_err: err,
                });
            }
        }
    }
    Ok(report)
}

/// Reduces a non-scalar output to a scalar by a fixed weighted sum so every
/// output element contributes a distinct cotangent.
pub fn project_to_scalar(g: &mut Graph<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(weights.clone())?;
    let p = g.mul(out, w)?;
    g.sum(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_sum(g: &mut Graph<f64>, v: &[Var]) -> Result<Var> {
        let sq = g.mul(v[0], v[0])?;
        g.sum(sq)
    }

    #[test]
    fn passes_on_correct_gradient() {
        let x = Tensor::from_f64(vec![3], &[1.0, -2.0, 0.5]).unwrap();
        let r = check_gradients("square", &[("x".into(), x)], square_sum, GradCheckConfig::default()).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn corrupted_gradient_is_named() {
        let x = Tensor::from_f64(vec![3], &[1.0, -2.0, 0.5]).unwrap();
        let r = check_gradients_with_hook(
            "square",
            &[("weights.x".into(), x)],
            square_sum,
            GradCheckConfig::default(),
            |grads| grads[0].data_mut()[1] += 0.1,
        )
        .unwrap();
        assert!(!r.passed());
        assert_eq!(r.failures.len(), 1);
        assert_eq!(r.failures[0].input, "weights.x");
        assert_eq!(r.failures[0].index, 1);
    }
}
