//! Finite-difference verification of analytic gradients.
//!
//! The harness is deliberately independent of the tape: it only needs a
//! closure that maps a set of parameter values to a scalar loss (and, on
//! request, analytic gradients by parameter name). Numeric gradients come
//! from central differences on that closure, so any systematic error in a
//! backward rule shows up as disagreement.

use std::collections::BTreeMap;

use crate::error::{CoreError, Result};
use crate::param::Param;

/// Central-difference step applied to each parameter entry.
pub const FD_STEP: f64 = 1e-5;

/// Maximum tolerated relative error between analytic and numeric gradients.
pub const GRAD_REL_TOL: f64 = 1e-4;

/// Relative disagreement with a floor so true-zero gradients are not judged
/// against pure finite-difference noise.
pub fn relative_error(numeric: f64, analytic: f64) -> f64 {
    let denom = numeric.abs().max(analytic.abs()).max(1e-6);
    (numeric - analytic).abs() / denom
}

/// Outcome of checking one named block of parameters.
#[derive(Debug, Clone)]
pub struct BlockReport {
    pub block: String,
    pub checked_entries: usize,
    pub max_rel_err: f64,
    /// `name[index]` of the worst-agreeing entry.
    pub worst: String,
    pub passed: bool,
}

impl BlockReport {
    pub fn summary_line(&self) -> String {
        format!(
            "{:<24} entries {:>5}  max rel err {:.3e}  worst {:<20} {}",
            self.block,
            self.checked_entries,
            self.max_rel_err,
            self.worst,
            if self.passed { "ok" } else { "FAIL" }
        )
    }
}

/// Checks every entry of every parameter in `params` against central finite
/// differences of `eval`.
///
/// `eval(params, want_grads)` must deterministically compute the loss from
/// the given parameter values; when `want_grads` is true it also returns
/// analytic gradients keyed by parameter name (missing entries are treated
/// as all-zero gradients, which the numeric probe will either confirm or
/// expose).
pub fn check_block<F>(block: &str, params: &mut Vec<Param>, eval: &mut F) -> Result<BlockReport>
where
    F: FnMut(&[Param], bool) -> Result<(f64, BTreeMap<String, Vec<f64>>)>,
{
    let (_, analytic) = eval(params, true)?;
    for (name, grad) in &analytic {
        if let Some(p) = params.iter().find(|p| &p.name == name) {
            if grad.len() != p.numel() {
                return Err(CoreError::Config(format!(
                    "analytic gradient for `{name}` has {} entries, parameter has {}",
                    grad.len(),
                    p.numel()
                )));
            }
        }
    }

    let mut max_rel = 0.0f64;
    let mut worst = String::from("-");
    let mut checked = 0usize;
    for pi in 0..params.len() {
        for ei in 0..params[pi].numel() {
            let original = params[pi].data[ei];
            params[pi].data[ei] = original + FD_STEP;
            let (loss_plus, _) = eval(params, false)?;
            params[pi].data[ei] = original - FD_STEP;
            let (loss_minus, _) = eval(params, false)?;
            params[pi].data[ei] = original;

            let numeric = (loss_plus - loss_minus) / (2.0 * FD_STEP);
            let ana = analytic
                .get(&params[pi].name)
                .map(|g| g[ei])
                .unwrap_or(0.0);
            let rel = relative_error(numeric, ana);
            if rel > max_rel {
                max_rel = rel;
                worst = format!("{}[{}]", params[pi].name, ei);
            }
            checked += 1;
        }
    }

    Ok(BlockReport {
        block: block.to_string(),
        checked_entries: checked,
        max_rel_err: max_rel,
        worst,
        passed: max_rel < GRAD_REL_TOL,
    })
}
