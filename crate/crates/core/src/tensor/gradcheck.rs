use serde::Serialize;

use super::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub coords: usize,
    /// Coordinates where the widest stencil crossed a kink.
    pub refined: usize,
}

const KINK_REFINE: f64 = 10.0;
const KINK_LEVELS: usize = 3;

/// Compares the analytic gradient of `f` with a fourth-order central
/// difference (five-point stencil) over every coordinate of every parameter.
///
/// Each coordinate is estimated with steps `eps`, `eps/10` and `eps/100`. The
/// widest estimate that agrees with the next narrower one (up to roundoff) is
/// used; disagreement means the wider stencil straddled a ReLU or max kink.
///
/// The relative error of a coordinate is
/// `|analytic − fd| / max(|analytic|, |fd|, 1e-12)`; the maximum is reported.
/// `f` must be deterministic: it is re-run twelve times per coordinate.
pub fn finite_diff_check<T, F>(f: F, params: &ParamStore<T>, eps: T) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    if !(eps > T::zero()) {
        return Err(Error::Config("finite difference step must be positive".into()));
    }
    let eval = |p: &ParamStore<T>| -> Result<f64> {
        let mut g = Graph::new();
        let loss = f(&mut g, p)?;
        let v = g.item(loss).to_f64_lossy();
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {v} in gradient check")));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    if !g.item(loss).is_finite() {
        return Err(Error::Numeric("non-finite loss in gradient check".into()));
    }
    let base = g.item(loss).to_f64_lossy();
    let grads = g.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        coords: 0,
        refined: 0,
    };
    let mut work = params.clone();
    for (id, name, tensor) in params.iter() {
        let analytic = grads.get(id);
        for i in 0..tensor.numel() {
            let orig = tensor.data()[i];
            let mut stencil = |h: T| -> Result<f64> {
                let mut at = |k: f64| -> Result<f64> {
                    work.get_mut(id).data_mut()[i] = orig + T::from_f64_lossy(k) * h;
                    eval(&work)
                };
                let (p1, m1, p2, m2) = (at(1.0)?, at(-1.0)?, at(2.0)?, at(-2.0)?);
                Ok((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h.to_f64_lossy()))
            };
            let mut est = Vec::with_capacity(KINK_LEVELS);
            let mut h = eps;
            for _ in 0..KINK_LEVELS {
                est.push((stencil(h)?, h.to_f64_lossy()));
                h /= T::from_f64_lossy(KINK_REFINE);
            }
            work.get_mut(id).data_mut()[i] = orig;
            // Wider stencils carry less roundoff; a wide estimate that
            // disagrees with the next narrower one beyond that roundoff
            // straddled a kink.
            let agrees = |(a, _): (f64, f64), (b, hb): (f64, f64)| {
                let roundoff = 8.0 * T::epsilon().to_f64_lossy() * base.abs().max(1.0) / hb;
                (a - b).abs() <= 1e-6 * a.abs().max(b.abs()) + roundoff
            };
            let level = (0..KINK_LEVELS - 1)
                .find(|&l| agrees(est[l], est[l + 1]))
                .unwrap_or(KINK_LEVELS - 1);
            if level > 0 {
                report.refined += 1;
            }
            let fd = est[level].0;
            let an = analytic.map_or(0.0, |a| a[i].to_f64_lossy());
            let denom = an.abs().max(fd.abs()).max(1e-12);
            let rel = (an - fd).abs() / denom;
            report.coords += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = name.to_string();
                report.worst_index = i;
                report.worst_analytic = an;
                report.worst_numeric = fd;
            }
        }
    }
    Ok(report)
}
