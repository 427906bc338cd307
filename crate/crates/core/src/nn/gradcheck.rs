use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{GradBuffer, Parameterized};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub epsilon: f64,
    /// Maximum allowed relative error.
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so entries whose true
    /// gradient is ~0 are judged by absolute error instead. Raised when the
    /// loss is too large for a difference at `epsilon` to resolve that finely.
    pub floor: f64,
    /// Entries checked per parameter block (all of them if the block is smaller).
    pub entries_per_block: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            epsilon: 1e-5,
            tolerance: 1e-5,
            floor: 1e-6,
            entries_per_block: 12,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_block: String,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub entries_checked: usize,
    /// Entries whose finite difference did not settle between `epsilon` and
    /// `epsilon / 2` (a kink inside the step, or rounding noise on a tiny
    /// gradient); each was replaced by another entry of the same block.
    pub entries_skipped: usize,
    /// Blocks where no sampled entry gave a settled finite difference.
    pub unresolved_blocks: Vec<String>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance && self.unresolved_blocks.is_empty()
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Neumaier summation.
fn compensated_sum(terms: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut carry) = (0.0f64, 0.0f64);
    for t in terms {
        let next = sum + t;
        carry += if sum.abs() >= t.abs() { (sum - next) + t } else { (t - next) + sum };
        sum = next;
    }
    sum + carry
}

fn perturbed<P: Parameterized + Clone>(params: &P, block: &str, index: usize, delta: f64) -> P {
    let mut p = params.clone();
    p.visit_params_mut("", &mut |name, t, _| {
        if name == block {
            t.data_mut()[index] += delta;
        }
    });
    p
}

/// Candidate entries tried per requested entry before a block gives up.
const ATTEMPTS_PER_ENTRY: usize = 4;

/// A finite difference serves as a reference only when its two step sizes
/// agree this much more tightly than the tolerance being tested.
const REFERENCE_MARGIN: f64 = 0.1;

/// Compares the analytic gradient returned by `loss_and_grad` against
/// central finite differences of its loss over a sample of entries from
/// every parameter block. An entry counts only when the central difference
/// at `epsilon` agrees with the one at `epsilon / 2` well within the tolerance;
/// otherwise the loss is not smooth enough around it for the difference to
/// be a reference, and another entry is drawn.
pub fn grad_check<P, F>(params: &P, loss_and_grad: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    P: Parameterized + Clone,
    F: Fn(&P) -> Result<(f64, GradBuffer)>,
{
    grad_check_terms(params, |p: &P| loss_and_grad(p).map(|(l, g)| (vec![l], g)), cfg)
}

/// [`grad_check`] for a loss given as a sum of terms. The finite difference
/// is taken term by term and the differences are summed, so a loss that is
/// large next to its change under a small step keeps its resolution.
pub fn grad_check_terms<P, F>(params: &P, terms_and_grad: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    P: Parameterized + Clone,
    F: Fn(&P) -> Result<(Vec<f64>, GradBuffer)>,
{
    let (base, analytic) = terms_and_grad(params)?;
    let (again, _) = terms_and_grad(params)?;
    if let Some((a, b)) = base.iter().zip(&again).find(|(a, b)| a.to_bits() != b.to_bits()) {
        return Err(Error::NonDeterministic { first: *a, second: *b });
    }

    // rounding in the terms bounds what a difference at this step can
    // resolve; absolute errors below it are not held against the gradient
    let scale = base.iter().map(|t| t * t).sum::<f64>().sqrt().max(1.0);
    let floor = cfg.floor.max(f64::EPSILON * scale / cfg.epsilon / cfg.tolerance);

    let mut blocks = Vec::new();
    params.visit_params("", &mut |name, t, _| blocks.push((name.to_owned(), t.len())));

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_block: String::new(),
        worst_index: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        entries_checked: 0,
        entries_skipped: 0,
        unresolved_blocks: Vec::new(),
        tolerance: cfg.tolerance,
    };
    for (name, len) in blocks {
        // candidates in random order; unresolved entries are replaced by the next one
        let order = sample(&mut rng, len, len).into_vec();
        let wanted = cfg.entries_per_block.min(len);
        let grad = analytic.get(&name);
        let central = |h: f64, index: usize| -> Result<f64> {
            let plus = terms_and_grad(&perturbed(params, &name, index, h))?.0;
            let minus = terms_and_grad(&perturbed(params, &name, index, -h))?.0;
            if plus.len() != base.len() || minus.len() != base.len() {
                return Err(Error::shape("grad_check terms", base.len(), plus.len().max(minus.len())));
            }
            Ok(compensated_sum(plus.iter().zip(&minus).map(|(a, b)| a - b)) / (2.0 * h))
        };
        let mut resolved = 0;
        for &index in order.iter().take(wanted * ATTEMPTS_PER_ENTRY) {
            if resolved == wanted {
                break;
            }
            let numeric = central(cfg.epsilon, index)?;
            let finer = central(cfg.epsilon / 2.0, index)?;
            if relative_error(numeric, finer, floor) >= cfg.tolerance * REFERENCE_MARGIN {
                report.entries_skipped += 1;
                continue;
            }
            resolved += 1;
            let an = grad.map_or(0.0, |g| g.data()[index]);
            let err = relative_error(an, numeric, floor);
            report.entries_checked += 1;
            if err > report.max_rel_error || !err.is_finite() {
                report.max_rel_error = err;
                report.worst_block = name.clone();
                report.worst_index = index;
                report.analytic_at_worst = an;
                report.numeric_at_worst = numeric;
            }
        }
        if resolved == 0 {
            report.unresolved_blocks.push(name);
        }
    }
    Ok(report)
}
