//! Scalar maximization on an interval: a coarse scan brackets the best
//! sample, then golden-section refinement narrows it down. Evaluations are
//! fallible because every objective here involves linear solves.

/// Location and value of a maximum, plus whatever payload the objective
/// returned there.
pub(crate) struct Maximum<P> {
    pub x: f64,
    pub value: f64,
    pub payload: P,
}

const SCAN_POINTS: usize = 8;
const GOLDEN: f64 = 0.618_033_988_749_894_9;

/// Maximizes `f` on [lo, hi] to a bracket width of `xtol`. The objective
/// returns (value, payload); the payload of the best point seen is returned
/// alongside it, so callers avoid a final re-evaluation.
pub(crate) fn maximize_on_interval<P, E, F>(
    mut f: F,
    lo: f64,
    hi: f64,
    xtol: f64,
) -> Result<Maximum<P>, E>
where
    F: FnMut(f64) -> Result<(f64, P), E>,
{
    let mut best: Option<Maximum<P>> = None;
    let eval = |x: f64, f: &mut F, best: &mut Option<Maximum<P>>| -> Result<f64, E> {
        let (value, payload) = f(x)?;
        if best.as_ref().is_none_or(|b| value > b.value) {
            *best = Some(Maximum { x, value, payload });
        }
        Ok(value)
    };

    let span = hi - lo;
    let mut vals = [0.0f64; SCAN_POINTS];
    for (k, v) in vals.iter_mut().enumerate() {
        let x = lo + span * (k as f64 + 0.5) / SCAN_POINTS as f64;
        *v = eval(x, &mut f, &mut best)?;
    }
    let k_best = vals
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, _)| k)
        .unwrap_or(0);
    let step = span / SCAN_POINTS as f64;
    let mut a = (lo + step * (k_best as f64 - 0.5)).max(lo);
    let mut b = (lo + step * (k_best as f64 + 1.5)).min(hi);

    let mut c = b - GOLDEN * (b - a);
    let mut d = a + GOLDEN * (b - a);
    let mut fc = eval(c, &mut f, &mut best)?;
    let mut fd = eval(d, &mut f, &mut best)?;
    while b - a > xtol.max(f64::EPSILON * span) {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - GOLDEN * (b - a);
            fc = eval(c, &mut f, &mut best)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + GOLDEN * (b - a);
            fd = eval(d, &mut f, &mut best)?;
        }
    }
    Ok(best.expect("at least the scan points were evaluated"))
}
