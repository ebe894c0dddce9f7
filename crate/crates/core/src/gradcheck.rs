//! Central-difference verification of tape gradients.
//!
//! Each perturbed evaluation compares its tape's kink signature with the
//! unperturbed one. If a step crosses a ReLU, pooling or clamp boundary the
//! step is halved; coordinates that stay on a kink are skipped and counted.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::imaging::Rng;
use crate::params::Parameterized;
use crate::tape::{Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub tolerance: f64,
    pub samples_per_array: usize,
    /// Smallest magnitude used to normalize the error of one coordinate.
    pub floor: f64,
    /// Relative step: `h = rel_step * max(1, |p|)`.
    pub rel_step: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-5,
            samples_per_array: 10,
            floor: 1e-4,
            rel_step: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayReport {
    pub name: String,
    pub len: usize,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    /// `(analytic, numeric)` at `worst_index`.
    pub worst_values: Option<(f64, f64)>,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub loss: f64,
    pub arrays: Vec<ArrayReport>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn failures(&self) -> impl Iterator<Item = &ArrayReport> {
        self.arrays.iter().filter(|a| !a.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.arrays.iter().fold(0.0, |m, a| m.max(a.max_rel_error))
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "{:<28} {:>7} {:>7} {:>7} {:>12} {:>12} {:>12}  status",
            "array", "size", "checked", "skipped", "max rel err", "analytic", "numeric"
        )?;
        for a in &self.arrays {
            let (ga, gn) = a.worst_values.unwrap_or((0.0, 0.0));
            writeln!(
                f,
                "{:<28} {:>7} {:>7} {:>7} {:>12.3e} {:>12.4e} {:>12.4e}  {}",
                a.name,
                a.len,
                a.checked,
                a.skipped,
                a.max_rel_error,
                ga,
                gn,
                if a.passed { "ok" } else { "FAIL" }
            )?;
        }
        write!(
            f,
            "overall: {} (tolerance {:.1e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.tolerance
        )
    }
}

/// Records a forward pass of `model` and returns the scalar loss node and
/// one parameter leaf per array of `model.params()`, in order.
pub trait LossFn<M>: Fn(&M, &mut Tape) -> Result<(Var, Vec<Var>)> {}
impl<M, F: Fn(&M, &mut Tape) -> Result<(Var, Vec<Var>)>> LossFn<M> for F {}

fn evaluate<M>(model: &M, loss: &impl LossFn<M>) -> Result<(f64, u64)> {
    let mut tape = Tape::new();
    let (l, _) = loss(model, &mut tape)?;
    Ok((tape.scalar(l), tape.kink_signature()))
}

/// Compares analytic and numeric gradients on sampled coordinates of every array.
///
/// `fault` corrupts the analytic pass (see [`Tape::inject_adjoint_fault`]).
pub fn grad_check<M: Parameterized + Clone>(
    model: &M,
    loss: impl LossFn<M>,
    config: &GradCheckConfig,
    fault: Option<(&'static str, f64)>,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    if let Some((op, factor)) = fault {
        tape.inject_adjoint_fault(op, factor);
    }
    let (loss_var, param_vars) = loss(model, &mut tape)?;
    let loss0 = tape.scalar(loss_var);
    let base_sig = tape.kink_signature();
    let grads = tape.backward(loss_var)?;
    let names = model.param_names();
    let sizes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    if param_vars.len() != sizes.len() {
        return crate::error::invalid(format!(
            "loss function returned {} parameter nodes for {} arrays",
            param_vars.len(),
            sizes.len()
        ));
    }
    let mut arrays = Vec::with_capacity(sizes.len());
    let base = Rng::keyed(config.seed, 0x6772_6164);
    for (a, (&len, var)) in sizes.iter().zip(&param_vars).enumerate() {
        let analytic: Vec<f64> = grads
            .real(*var)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; len]);
        let mut idx: Vec<usize> = (0..len).collect();
        base.derive(a as u64).shuffle(&mut idx);
        idx.truncate(config.samples_per_array.max(1));
        idx.sort_unstable();
        let mut report = ArrayReport {
            name: names[a].clone(),
            len,
            checked: 0,
            skipped: 0,
            max_rel_error: 0.0,
            worst_index: None,
            worst_values: None,
            passed: true,
        };
        let mut probe = model.clone();
        for &i in &idx {
            let p0 = model.params()[a][i];
            let mut h = config.rel_step * p0.abs().max(1.0);
            let mut numeric = None;
            for _ in 0..8 {
                probe.params_mut()[a][i] = p0 + h;
                let (fp, sp) = evaluate(&probe, &loss)?;
                probe.params_mut()[a][i] = p0 - h;
                let (fm, sm) = evaluate(&probe, &loss)?;
                probe.params_mut()[a][i] = p0;
                if sp == base_sig && sm == base_sig {
                    numeric = Some((fp - fm) / (2.0 * h));
                    break;
                }
                h *= 0.25;
            }
            let Some(n) = numeric else {
                report.skipped += 1;
                continue;
            };
            let g = analytic[i];
            let rel = (g - n).abs() / g.abs().max(n.abs()).max(config.floor);
            report.checked += 1;
            if report.worst_index.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_index = Some(i);
                report.worst_values = Some((g, n));
            }
        }
        report.passed = report.max_rel_error <= config.tolerance && report.max_rel_error.is_finite();
        arrays.push(report);
    }
    let passed = arrays.iter().all(|a| a.passed);
    Ok(GradCheckReport {
        tolerance: config.tolerance,
        loss: loss0,
        arrays,
        passed,
    })
}
