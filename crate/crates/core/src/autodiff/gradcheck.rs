//! Central-difference verification of tape gradients.

use super::graph::{Graph, Value, Var};
use crate::error::{bail, Result};
use crate::scalar::Scalar;

/// Relative errors below this magnitude of gradient are measured against the
/// floor instead, so vanishing entries do not blow up the ratio.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct LeafReport {
    pub leaf: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Flat index of the worst entry (complex leaves: real plane first).
    pub worst_entry: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub leaves: Vec<LeafReport>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.leaves.iter().map(|l| l.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tolerance
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

fn record_leaves<T: Scalar>(graph: &mut Graph<T>, leaves: &[Value<T>], track: bool) -> Vec<Var> {
    leaves
        .iter()
        .map(|leaf| match leaf {
            Value::Real(t) => {
                let mut t = t.clone();
                t.requires_grad = track;
                graph.leaf(t)
            }
            Value::Complex(c) => graph.complex_leaf(c.clone(), track),
        })
        .collect()
}

fn evaluate<T, F>(f: &F, leaves: &[Value<T>]) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut graph = Graph::new();
    let vars = record_leaves(&mut graph, leaves, false);
    let out = f(&mut graph, &vars)?;
    let value = graph.real(out)?;
    if value.numel() != 1 {
        bail!(Contract, "checked function must return a scalar, got {:?}", value.shape);
    }
    Ok(value.item())
}

/// Compares tape gradients of the scalar function `f` against central
/// differences with step `h` at every entry of every leaf.
pub fn grad_check<T, F>(f: F, leaves: &[Value<T>], h: T, tol: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let first = evaluate(&f, leaves)?;
    let second = evaluate(&f, leaves)?;
    if first.to_f64_lossy().to_bits() != second.to_f64_lossy().to_bits() {
        bail!(Oracle, "function is not deterministic: {first} vs {second}");
    }

    let mut graph = Graph::new();
    let vars = record_leaves(&mut graph, leaves, true);
    let out = f(&mut graph, &vars)?;
    graph.backward(out)?;

    let mut reports = Vec::with_capacity(leaves.len());
    let mut probe = leaves.to_vec();
    for (li, var) in vars.iter().enumerate() {
        let tape = graph.flat_grad(*var);
        let mut report = LeafReport { leaf: li, max_rel_err: 0.0, max_abs_err: 0.0, worst_entry: 0 };
        for (i, &tape_grad) in tape.iter().enumerate() {
            let orig = probe[li].get_flat(i);
            probe[li].set_flat(i, orig + h);
            let plus = evaluate(&f, &probe)?;
            probe[li].set_flat(i, orig - h);
            let minus = evaluate(&f, &probe)?;
            probe[li].set_flat(i, orig);
            let numeric = ((plus - minus) / (h + h)).to_f64_lossy();
            let analytic = tape_grad.to_f64_lossy();
            let rel = relative_error(analytic, numeric);
            report.max_abs_err = report.max_abs_err.max((analytic - numeric).abs());
            if rel > report.max_rel_err || rel.is_nan() {
                report.max_rel_err = if rel.is_nan() { f64::INFINITY } else { rel };
                report.worst_entry = i;
            }
        }
        reports.push(report);
    }
    Ok(GradCheckReport { leaves: reports, tolerance: tol })
}
