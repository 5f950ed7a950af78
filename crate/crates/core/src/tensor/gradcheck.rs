use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{dim_err, FameError, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Tensors with more coordinates than this are subsampled to exactly this many.
    pub max_coords_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            max_coords_per_tensor: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor index, coordinate)` of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
    /// Coordinates whose `±eps` probes crossed a branch of a piecewise op.
    /// Central differences are meaningless there, so they are not scored.
    pub nonsmooth_skipped: usize,
}

/// Compares `analytic` gradients against central differences of `f`.
///
/// Relative error per coordinate is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn finite_diff_check<F>(
    mut f: F,
    params: &[Tensor<f64>],
    analytic: &[Vec<f64>],
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor<f64>]) -> Result<f64>,
{
    finite_diff_check_piecewise(|p| Ok((f(p)?, 0)), params, analytic, opts)
}

/// Like [`finite_diff_check`] for a piecewise-smooth `f` that also returns a
/// signature of the branch it evaluated (see [`super::Tape::branch_signature`]).
pub fn finite_diff_check_piecewise<F>(
    mut f: F,
    params: &[Tensor<f64>],
    analytic: &[Vec<f64>],
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor<f64>]) -> Result<(f64, u64)>,
{
    if opts.eps <= 0.0 {
        return Err(FameError::Oracle(format!("eps must be positive, got {}", opts.eps)));
    }
    if analytic.len() != params.len() {
        return Err(dim_err!(
            "{} analytic gradients for {} tensors",
            analytic.len(),
            params.len()
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
        nonsmooth_skipped: 0,
    };
    let mut eval = |work: &[Tensor<f64>]| -> Result<(f64, u64)> {
        let (v, sig) = f(work)?;
        if !v.is_finite() {
            return Err(FameError::Oracle(format!("objective returned {v}")));
        }
        Ok((v, sig))
    };
    let (_, base_sig) = eval(&work)?;
    for (ti, grad) in analytic.iter().enumerate() {
        let numel = params[ti].numel();
        if grad.len() != numel {
            return Err(dim_err!("analytic gradient {ti} has wrong length"));
        }
        let coords: Vec<usize> = if numel <= opts.max_coords_per_tensor {
            (0..numel).collect()
        } else {
            let mut c = sample(&mut rng, numel, opts.max_coords_per_tensor).into_vec();
            c.sort_unstable();
            c
        };
        for idx in coords {
            let orig = work[ti].data()[idx];
            work[ti].data_mut()[idx] = orig + opts.eps;
            let (up, sig_up) = eval(&work)?;
            work[ti].data_mut()[idx] = orig - opts.eps;
            let (down, sig_down) = eval(&work)?;
            work[ti].data_mut()[idx] = orig;
            if sig_up != base_sig || sig_down != base_sig {
                report.nonsmooth_skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * opts.eps);
            let a = grad[idx];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            report.coords_checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((ti, idx));
            }
        }
    }
    Ok(report)
}
