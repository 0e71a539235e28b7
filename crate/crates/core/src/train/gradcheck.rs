//! Central finite-difference checks of objective gradients.

use serde::{Deserialize, Serialize};

use super::{assign_parameters, flatten_parameters, Batch, IterationDraws, Objective, TrainConfig};
use crate::autodiff::Var;
use crate::bayes_net::NetworkStack;
use crate::error::Result;

/// An objective component that can be differentiated on its own.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Classification,
    KlExtractor,
    KlClassifier,
    LocalPositive,
    LocalNegative,
    Global,
    Total,
}

impl Component {
    pub const ALL: [Component; 7] = [
        Component::Classification,
        Component::KlExtractor,
        Component::KlClassifier,
        Component::LocalPositive,
        Component::LocalNegative,
        Component::Global,
        Component::Total,
    ];

    pub fn select(self, obj: &Objective) -> Var {
        let p = &obj.parts;
        match self {
            Component::Classification => p.classification,
            Component::KlExtractor => p.kl_extractor,
            Component::KlClassifier => p.kl_classifier,
            Component::LocalPositive => p.local_positive,
            Component::LocalNegative => p.local_negative,
            Component::Global => p.global,
            Component::Total => p.total,
        }
    }
}

/// Outcome of one component's check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub component: Component,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Parameter block and entry with the largest relative error.
    pub worst: String,
    pub n_checked: usize,
}

/// Relative error `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the analytic gradient of `component` with central differences of
/// step `h` over every parameter, holding all draws fixed.
pub fn finite_difference_check(
    cfg: &TrainConfig,
    stack: &NetworkStack,
    batches: &[Batch],
    draws: &IterationDraws,
    component: Component,
    h: f64,
    floor: f64,
) -> Result<GradCheckReport> {
    let obj = Objective::build(cfg, stack, batches, draws)?;
    let grad = obj.gradient(stack, component.select(&obj))?;
    let base = flatten_parameters(stack);
    let mut probe = stack.clone();
    let mut eval = |flat: &[f64]| -> Result<f64> {
        assign_parameters(&mut probe, flat)?;
        let o = Objective::build(cfg, &probe, batches, draws)?;
        Ok(o.graph.scalar(component.select(&o)))
    };
    let mut report = GradCheckReport {
        component,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: String::new(),
        n_checked: 0,
    };
    let mut flat = base.clone();
    for block in &grad.blocks {
        for k in 0..block.len() {
            let idx = block.offset + k;
            flat[idx] = base[idx] + h;
            let plus = eval(&flat)?;
            flat[idx] = base[idx] - h;
            let minus = eval(&flat)?;
            flat[idx] = base[idx];
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grad.values[idx];
            let rel = relative_error(analytic, numeric, floor);
            report.max_abs_error = report.max_abs_error.max((analytic - numeric).abs());
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = format!(
                    "{}[{},{}]: analytic {analytic:e}, numeric {numeric:e}",
                    block.name,
                    k / block.shape.1,
                    k % block.shape.1
                );
            }
            report.n_checked += 1;
        }
    }
    Ok(report)
}
