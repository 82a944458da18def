//! Central-finite-difference verification of analytic gradients.
//!
//! The probe perturbs one trainable scalar at a time on a clone of the graph,
//! so the analytic path under test is never re-used to produce the reference
//! numbers. Probes are independent and may run on the pool.

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::par::map_indexed;
use crate::signal::TimeSeries;

/// Finite-difference comparison for one parameter group.
#[derive(Debug, Clone)]
pub struct GroupCheck {
    pub name: String,
    pub entries: usize,
    /// max_i |analytic_i - fd_i| normalized by the group's largest magnitude.
    pub max_rel_err: f64,
}

/// Result of [`grad_check`] over all trainable groups.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub rel_step: f64,
    pub groups: Vec<GroupCheck>,
}

impl GradCheckReport {
    /// Worst relative error across all groups (0 when nothing is trainable).
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().fold(0.0, |m, g| m.max(g.max_rel_err))
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err() <= tol
    }
}

/// Relative deviation between two gradient vectors, normalized by the larger
/// magnitude present in either (guarded below by 1e-12).
pub fn relative_gradient_error(analytic: &[f64], reference: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(reference)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    analytic
        .iter()
        .zip(reference)
        .fold(0.0f64, |m, (a, r)| m.max((a - r).abs() / scale))
}

/// Compares every trainable parameter gradient of a loss-valued graph against
/// central finite differences with per-entry step `rel_step * max(1, |theta|)`.
pub fn grad_check(
    graph: &mut Graph,
    inputs: &[(&str, &TimeSeries)],
    rel_step: f64,
) -> Result<GradCheckReport> {
    let out = graph.forward_eval(inputs)?;
    if out.scalar().is_none() {
        return Err(Error::ShapeMismatch {
            context: "grad_check".into(),
            expected: "scalar (1x1) loss output".into(),
            got: format!("{:?}", out.shape()),
        });
    }
    graph.backward()?;

    let mode = graph.exec_mode();
    let trainable: Vec<_> = graph
        .param_ids()
        .filter(|id| graph.param(*id).trainable && !graph.param(*id).values.is_empty())
        .collect();

    let mut groups = Vec::with_capacity(trainable.len());
    for id in trainable {
        let analytic = graph.param(id).grads.clone();
        let theta = graph.param(id).values.clone();
        let name = graph.param(id).name.clone();

        let fd: Vec<f64> = map_indexed(mode, theta.len(), |i| {
            let step = rel_step * theta[i].abs().max(1.0);
            let eval_at = |v: f64| -> f64 {
                let mut probe = graph.clone();
                probe.param_values_mut(id)[i] = v;
                probe
                    .forward_eval(inputs)
                    .ok()
                    .and_then(|out| out.scalar())
                    .unwrap_or(f64::NAN)
            };
            (eval_at(theta[i] + step) - eval_at(theta[i] - step)) / (2.0 * step)
        });

        groups.push(GroupCheck {
            name,
            entries: theta.len(),
            max_rel_err: relative_gradient_error(&analytic, &fd),
        });
    }
    Ok(GradCheckReport { rel_step, groups })
}
