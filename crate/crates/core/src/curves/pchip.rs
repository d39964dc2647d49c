//! Shape-preserving piecewise cubic Hermite interpolation (Fritsch-Carlson
//! derivative limiting, Fritsch-Butland weighted harmonic mean at interior
//! knots).

/// Node derivatives for strictly increasing `x`.
pub fn slopes(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    assert_eq!(n, y.len());
    if n < 2 {
        return vec![0.0; n];
    }
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let delta: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / h[k]).collect();
    if n == 2 {
        return vec![delta[0], delta[0]];
    }

    let mut d = vec![0.0; n];
    for k in 1..n - 1 {
        let (a, b) = (delta[k - 1], delta[k]);
        if a == 0.0 || b == 0.0 || a.signum() != b.signum() {
            continue;
        }
        let w1 = 2.0 * h[k] + h[k - 1];
        let w2 = h[k] + 2.0 * h[k - 1];
        d[k] = (w1 + w2) / (w1 / a + w2 / b);
    }
    d[0] = end_slope(h[0], h[1], delta[0], delta[1]);
    d[n - 1] = end_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
    d
}

// One-sided three-point estimate, limited so the end segment stays monotone.
fn end_slope(h0: f64, h1: f64, m0: f64, m1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * m0 - h0 * m1) / (h0 + h1);
    if d.signum() != m0.signum() || m0 == 0.0 {
        0.0
    } else if m0.signum() != m1.signum() && d.abs() > 3.0 * m0.abs() {
        3.0 * m0
    } else {
        d
    }
}

/// Evaluates the interpolant at every integer day `0..=len_days`, holding the
/// nearest knot value outside `[x[0], x[n-1]]`. Each segment is clamped to the
/// range of its two knot values so rounding never produces an overshoot.
pub fn evaluate_daily(x: &[f64], y: &[f64], d: &[f64], len_days: u32) -> Vec<f64> {
    let n = x.len();
    let mut out = Vec::with_capacity(len_days as usize + 1);
    let mut k = 0usize;
    for day in 0..=len_days {
        let t = f64::from(day);
        if t <= x[0] {
            out.push(y[0]);
            continue;
        }
        if t >= x[n - 1] {
            out.push(y[n - 1]);
            continue;
        }
        while x[k + 1] <= t {
            k += 1;
        }
        if t == x[k] {
            out.push(y[k]);
            continue;
        }
        out.push(hermite(x[k], x[k + 1], y[k], y[k + 1], d[k], d[k + 1], t));
    }
    out
}

fn hermite(x0: f64, x1: f64, y0: f64, y1: f64, d0: f64, d1: f64, t: f64) -> f64 {
    let h = x1 - x0;
    let s = (t - x0) / h;
    let s2 = s * s;
    let s3 = s2 * s;
    let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
    let h10 = s3 - 2.0 * s2 + s;
    let h01 = -2.0 * s3 + 3.0 * s2;
    let h11 = s3 - s2;
    let v = h00 * y0 + h10 * h * d0 + h01 * y1 + h11 * h * d1;
    v.clamp(y0.min(y1), y0.max(y1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_secant_forces_zero_interior_slope() {
        let d = slopes(&[0.0, 1.0, 2.0], &[0.0, 1.0, 1.0]);
        assert_eq!(d[1], 0.0);
        // left end: ((2*1+1)*1 - 1*0)/2 = 1.5, same sign as the secant
        assert_eq!(d[0], 1.5);
        assert_eq!(d[2], 0.0);
    }

    #[test]
    fn harmonic_mean_on_uniform_grid() {
        // equal spacing: w1 = w2, so d = 2ab/(a+b)
        let d = slopes(&[0.0, 1.0, 2.0, 3.0], &[0.0, 1.0, 4.0, 5.0]);
        assert!((d[1] - 2.0 * 1.0 * 3.0 / 4.0).abs() < 1e-15);
        assert!((d[2] - 2.0 * 3.0 * 1.0 / 4.0).abs() < 1e-15);
    }

    #[test]
    fn end_slope_limited_at_sign_change() {
        // m0 = 1, m1 = -10: raw estimate (3*1 + 10)/2 = 6.5 > 3
        assert_eq!(end_slope(1.0, 1.0, 1.0, -10.0), 3.0);
        // raw estimate opposite sign of m0 -> 0
        assert_eq!(end_slope(1.0, 1.0, 1.0, 5.0), 0.0);
    }
}
