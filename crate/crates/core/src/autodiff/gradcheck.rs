use super::{CTensor, Tape, Var};
use crate::{Result, C64};

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Number of real coordinates compared (two per complex entry).
    pub coordinates: usize,
    /// Coordinates skipped because a `±eps` step crossed a kink of some
    /// piecewise op, so no derivative exists on the sampled interval.
    pub excluded: usize,
}

/// Compares the tape gradient of `f` at `params` with central differences
/// taken separately on the real and imaginary part of every entry.
///
/// The error of one coordinate is `|analytic - numeric|` divided by
/// `max(|analytic|, |numeric|, 1e-3 * largest analytic magnitude)`, so
/// coordinates far below the gradient's overall scale are judged against
/// that scale instead of their own.
///
/// A coordinate whose perturbed evaluations change the tape's branch
/// signature is counted in `excluded` instead of compared.
pub fn grad_check<F>(f: F, params: &[CTensor], eps: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic: Vec<CTensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = params.iter().map(|p| tape.param(p.clone())).collect();
        let loss = f(&tape, &vars)?;
        if !loss.requires_grad() {
            return Ok(GradCheckReport {
                max_rel_error: 0.0,
                coordinates: 0,
                excluded: 0,
            });
        }
        let grads = tape.backward(loss)?;
        vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    };
    let eval = |ps: &[CTensor]| -> Result<(f64, u64)> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let v = f(&tape, &vars)?.item().re;
        Ok((v, tape.branch_signature()))
    };
    let (_, base_sig) = eval(params)?;

    let scale = analytic
        .iter()
        .flat_map(|g| g.data().iter().flat_map(|z| [z.re.abs(), z.im.abs()]))
        .fold(0.0, f64::max);
    let floor = (1e-3 * scale).max(f64::MIN_POSITIVE);

    let mut work: Vec<CTensor> = params.to_vec();
    let mut worst = 0.0f64;
    let mut coordinates = 0;
    let mut excluded = 0;
    for (pi, grad) in analytic.iter().enumerate() {
        for i in 0..grad.len() {
            for dir in [C64::new(1.0, 0.0), C64::new(0.0, 1.0)] {
                let orig = work[pi].data()[i];
                work[pi].data_mut()[i] = orig + dir * eps;
                let (up, su) = eval(&work)?;
                work[pi].data_mut()[i] = orig - dir * eps;
                let (down, sd) = eval(&work)?;
                work[pi].data_mut()[i] = orig;
                if su != base_sig || sd != base_sig {
                    excluded += 1;
                    continue;
                }
                let numeric = (up - down) / (2.0 * eps);
                let a = if dir.re != 0.0 { grad.data()[i].re } else { grad.data()[i].im };
                let denom = a.abs().max(numeric.abs()).max(floor);
                worst = worst.max((a - numeric).abs() / denom);
                coordinates += 1;
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        coordinates,
        excluded,
    })
}
