use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Initial central-difference step.
pub const GRAD_CHECK_STEP: f64 = 1e-3;

/// Gradients smaller than this are compared absolutely rather than relatively.
const SCALE_FLOOR: f64 = 1e-3;

/// Output value, activation signature, tape, output node and parameter leaves.
type Probe = (f64, u64, Graph<f64>, Var, Vec<Var>);

/// Times the step is divided by ten when a perturbation changes branch.
const MAX_SHRINKS: usize = 3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter index, element index) of the worst element.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    /// Elements compared against a difference quotient.
    pub checked: usize,
    /// Elements for which every step tried, down to the smallest, moved some
    /// ReLU or max-pool onto another branch. A difference quotient across a
    /// kink is not a derivative, so these are excluded from `max_rel_error`.
    pub kinked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

/// Compares the tape gradient of a scalar `f(params)` against 64-bit central
/// differences.
///
/// The step starts at [`GRAD_CHECK_STEP`]. When either perturbed evaluation
/// takes a different ReLU or max-pool branch than the base point, the step is
/// divided by ten and the element retried; elements that still straddle a
/// kink are counted in [`GradCheckReport::kinked`].
///
/// `f` receives a fresh graph and one leaf per parameter and must return the
/// scalar output. `max_per_param` limits the elements probed per parameter to
/// an evenly strided subset.
pub fn grad_check<F>(
    f: F,
    params: &[Tensor<f64>],
    tol: f64,
    max_per_param: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor<f64>]| -> Result<Probe> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out).data()[0];
        Ok((v, g.activation_signature(), g, out, vars))
    };

    let (base, base_sig, graph, out, vars) = eval(params)?;
    if !base.is_finite() {
        return Err(Error::GradCheck(format!("non-finite output {base} at base point")));
    }
    let grads = graph.backward(out)?;
    drop(graph);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        kinked: 0,
        tol,
    };
    let mut shadow: Vec<Tensor<f64>> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let n = params[pi].len();
        let analytic = grads.get(*var).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let stride = match max_per_param {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for ei in (0..n).step_by(stride) {
            let orig = params[pi].data()[ei];
            let mut step = GRAD_CHECK_STEP;
            let mut numeric = None;
            for _ in 0..=MAX_SHRINKS {
                shadow[pi].data_mut()[ei] = orig + step;
                let (plus, plus_sig, ..) = eval(&shadow)?;
                shadow[pi].data_mut()[ei] = orig - step;
                let (minus, minus_sig, ..) = eval(&shadow)?;
                shadow[pi].data_mut()[ei] = orig;
                if !plus.is_finite() || !minus.is_finite() || !analytic[ei].is_finite() {
                    return Err(Error::GradCheck(format!(
                        "non-finite value at parameter {pi} element {ei}"
                    )));
                }
                if plus_sig == base_sig && minus_sig == base_sig {
                    numeric = Some((plus - minus) / (2.0 * step));
                    break;
                }
                step /= 10.0;
            }
            let Some(numeric) = numeric else {
                report.kinked += 1;
                continue;
            };
            let a = analytic[ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(SCALE_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (pi, ei);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
