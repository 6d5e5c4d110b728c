//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;

use super::array::Param;
use crate::error::Result;
use crate::rng;

/// Something with f64 parameters, a scalar loss and an analytic backward pass.
///
/// Implementations must be deterministic: `loss` may be called many times
/// with perturbed parameters and must not consume randomness or mutate
/// running statistics that feed back into the output.
pub trait GradTarget {
    fn params(&mut self) -> Vec<(String, &mut Param<f64>)>;
    fn loss(&mut self) -> Result<f64>;
    /// Computes the loss and accumulates parameter gradients.
    fn loss_and_backward(&mut self) -> Result<f64>;
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub max_params: usize,
    /// Lower bound of the relative-error denominator, so that entries whose
    /// true gradient is ~0 are judged by absolute error.
    pub denom_floor: f64,
    /// Entries whose relative error exceeds this are measured again with a
    /// step ten times smaller, which resolves differences straddling a
    /// ReLU or max-pool switch point.
    pub refine_above: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            max_params: 1000,
            denom_floor: 1e-8,
            refine_above: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Entries re-measured with the smaller step.
    pub refined: usize,
    /// Parameter name, flat index, analytic and numeric value at the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic gradients with central differences on up to
/// `max_params` randomly chosen scalar parameters.
fn central_difference<M: GradTarget>(model: &mut M, which: usize, offset: usize, step: f64) -> Result<f64> {
    let original = model.params()[which].1.value.data()[offset];
    model.params()[which].1.value.data_mut()[offset] = original + step;
    let plus = model.loss()?;
    model.params()[which].1.value.data_mut()[offset] = original - step;
    let minus = model.loss()?;
    model.params()[which].1.value.data_mut()[offset] = original;
    Ok((plus - minus) / (2.0 * step))
}

pub fn grad_check<M: GradTarget>(model: &mut M, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    for (_, p) in model.params() {
        p.zero_grad();
    }
    model.loss_and_backward()?;
    let mut layout: Vec<(String, usize)> = Vec::new();
    let mut analytic: Vec<f64> = Vec::new();
    for (name, p) in model.params() {
        layout.push((name, p.len()));
        analytic.extend_from_slice(p.grad.data());
    }
    let total = analytic.len();
    let k = cfg.max_params.min(total);
    let mut r = rng::stream(cfg.seed, "gradcheck");
    let mut picks: Vec<usize> = sample(&mut r, total, k).into_vec();
    picks.sort_unstable();

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        refined: 0,
        worst: None,
    };
    for flat in picks {
        let (mut which, mut offset) = (0, flat);
        while offset >= layout[which].1 {
            offset -= layout[which].1;
            which += 1;
        }
        let a = analytic[flat];
        let mut numeric = central_difference(model, which, offset, cfg.step)?;
        let mut rel = relative_error(a, numeric, cfg.denom_floor);
        if rel > cfg.refine_above {
            numeric = central_difference(model, which, offset, cfg.step / 10.0)?;
            rel = relative_error(a, numeric, cfg.denom_floor);
            report.refined += 1;
        }
        report.checked += 1;
        report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some((layout[which].0.clone(), offset, a, numeric));
        }
    }
    Ok(report)
}
