use super::backend::Param;
use super::tape::{Tape, Var};
use crate::error::{invalid, Error, Result};

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst element.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Elements whose plain central difference disagrees by more than this are
/// re-estimated by extrapolation; tiny gradients of an O(1) loss are otherwise
/// dominated by round-off in the loss value.
const REFINE_ABOVE: f64 = 1e-7;
/// Ridders start steps as multiples of `eps`. Smooth but weakly coupled
/// parameters need wide steps, kinks need narrow ones; the estimate with the
/// smallest internal error wins.
const RIDDERS_STARTS: [f64; 3] = [1e2, 1e3, 1e4];

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Ridders' polynomial extrapolation of central differences toward zero step.
/// Returns the estimate and its error bound.
fn ridders(central: &mut impl FnMut(f64) -> Result<f64>, h0: f64) -> Result<(f64, f64)> {
    const CON: f64 = 1.4;
    const CON2: f64 = CON * CON;
    const NTAB: usize = 10;
    const SAFE: f64 = 2.0;
    let mut a = [[0.0f64; NTAB]; NTAB];
    let mut h = h0;
    a[0][0] = central(h)?;
    let (mut best, mut err) = (a[0][0], f64::INFINITY);
    for i in 1..NTAB {
        h /= CON;
        a[0][i] = central(h)?;
        let mut fac = CON2;
        for j in 1..=i {
            a[j][i] = (a[j - 1][i] * fac - a[j - 1][i - 1]) / (fac - 1.0);
            fac *= CON2;
            let e = (a[j][i] - a[j - 1][i]).abs().max((a[j][i] - a[j - 1][i - 1]).abs());
            if e <= err {
                err = e;
                best = a[j][i];
            }
        }
        if (a[i][i] - a[i - 1][i - 1]).abs() >= SAFE * err {
            break;
        }
    }
    Ok((best, err))
}

/// Checks the gradient of the scalar built by `f` with respect to every
/// element of every parameter in `params`.
///
/// Relative error per element is `|a - n| / max(|a|, |n|, 1e-8)`. Elements
/// that disagree at step `eps` are re-differentiated with Ridders' method.
pub fn grad_check<F>(params: &[Param], eps: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Param]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(invalid("grad_check eps must be positive"));
    }
    let eval = |ps: &[Param]| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, ps)?;
        let v = tape.value_of(loss).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite { op: "grad_check" })
        }
    };

    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut work: Vec<Param> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let base = p.value().clone();
        for i in 0..base.numel() {
            let x0 = base.get(i);
            work[pi].set(base.with_value(i, x0 + eps));
            let fp = eval(&work)?;
            work[pi].set(base.with_value(i, x0 - eps));
            let fm = eval(&work)?;
            work[pi].set(base.clone());

            let mut numeric = (fp - fm) / (2.0 * eps);
            let analytic = grads.get(p.name()).map(|g| g.get(i)).unwrap_or(0.0);
            let mut rel = rel_err(analytic, numeric);
            if rel > REFINE_ABOVE {
                let mut central = |h: f64| -> Result<f64> {
                    work[pi].set(base.with_value(i, x0 + h));
                    let fp = eval(&work)?;
                    work[pi].set(base.with_value(i, x0 - h));
                    let fm = eval(&work)?;
                    work[pi].set(base.clone());
                    Ok((fp - fm) / (2.0 * h))
                };
                let mut best = (numeric, f64::INFINITY);
                for k in RIDDERS_STARTS {
                    let r = ridders(&mut central, eps * k)?;
                    if r.1 < best.1 {
                        best = r;
                    }
                }
                numeric = best.0;
                rel = rel_err(analytic, numeric);
            }
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((p.name().to_string(), i));
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
