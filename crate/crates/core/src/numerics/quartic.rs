//! Real roots of low-degree polynomials by critical-point isolation and
//! bisection.
//!
//! The real roots of `p` are separated by the real roots of `p'`, so each
//! interval between consecutive critical points (clipped to the Cauchy
//! bound) holds at most one simple root, located by bisection on a sign
//! change. Critical points at which `p` vanishes are even-multiplicity
//! roots and are reported directly.

use crate::error::{Error, Result};

const DEDUP_SPACING: f64 = 1e-9;

/// Real roots of `c4 a^4 + c3 a^3 + c2 a^2 + c1 a + c0`, ascending and
/// deduplicated at `1e-9` spacing.
pub fn real_roots_quartic(c4: f64, c3: f64, c2: f64, c1: f64, c0: f64) -> Result<Vec<f64>> {
    real_roots_polynomial(&[c4, c3, c2, c1, c0])
}

/// Real roots of a polynomial given by coefficients, highest degree first.
pub fn real_roots_polynomial(coeffs: &[f64]) -> Result<Vec<f64>> {
    if coeffs.iter().any(|c| !c.is_finite()) {
        return Err(Error::Value(format!("non-finite polynomial coefficient in {coeffs:?}")));
    }
    let first = coeffs.iter().position(|&c| c != 0.0).ok_or_else(|| {
        Error::Degenerate("all polynomial coefficients are zero".into())
    })?;
    let p = &coeffs[first..];
    let mut roots = roots_trimmed(p);
    roots.sort_by(f64::total_cmp);
    let mut out: Vec<f64> = Vec::with_capacity(roots.len());
    for r in roots {
        match out.last() {
            Some(&last) if (r - last).abs() <= DEDUP_SPACING => {
                // Keep whichever of the two has the smaller residual.
                if eval(p, r).abs() < eval(p, last).abs() {
                    *out.last_mut().unwrap() = r;
                }
            }
            _ => out.push(r),
        }
    }
    Ok(out)
}

/// `p` has a nonzero leading coefficient.
fn roots_trimmed(p: &[f64]) -> Vec<f64> {
    let degree = p.len() - 1;
    match degree {
        0 => return vec![],
        1 => return vec![-p[1] / p[0]],
        _ => {}
    }
    let lead = p[0];
    let bound = 1.0 + p[1..].iter().map(|c| (c / lead).abs()).fold(0.0, f64::max);

    let deriv: Vec<f64> = p[..degree]
        .iter()
        .enumerate()
        .map(|(k, &c)| c * (degree - k) as f64)
        .collect();
    let mut critical = roots_trimmed(&deriv);
    critical.retain(|x| x.is_finite() && x.abs() < bound);
    critical.sort_by(f64::total_cmp);

    let mut knots = Vec::with_capacity(critical.len() + 2);
    knots.push(-bound);
    knots.extend_from_slice(&critical);
    knots.push(bound);

    // Critical points where p vanishes are even-multiplicity roots; they
    // count as exact zeros so no neighbouring interval brackets them again.
    let values: Vec<f64> = knots
        .iter()
        .enumerate()
        .map(|(k, &x)| {
            let v = eval(p, x);
            let interior = k > 0 && k + 1 < knots.len();
            if interior && v.abs() <= 1e-12 * magnitude(p, x) {
                0.0
            } else {
                v
            }
        })
        .collect();

    let mut roots: Vec<f64> = knots.iter().zip(&values).filter(|(_, &v)| v == 0.0).map(|(&x, _)| x).collect();
    for k in 0..knots.len() - 1 {
        let (flo, fhi) = (values[k], values[k + 1]);
        if (flo < 0.0 && fhi > 0.0) || (flo > 0.0 && fhi < 0.0) {
            roots.push(bisect(p, knots[k], knots[k + 1], flo));
        }
    }
    roots
}

fn bisect(p: &[f64], mut lo: f64, mut hi: f64, mut flo: f64) -> f64 {
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let fm = eval(p, mid);
        if fm == 0.0 {
            return mid;
        }
        if (fm < 0.0) == (flo < 0.0) {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    if eval(p, lo).abs() <= eval(p, hi).abs() {
        lo
    } else {
        hi
    }
}

fn eval(p: &[f64], x: f64) -> f64 {
    p.iter().fold(0.0, |acc, &c| acc * x + c)
}

/// Scale of the rounding error of Horner evaluation at `x`.
fn magnitude(p: &[f64], x: f64) -> f64 {
    p.iter().fold(0.0, |acc, &c| acc * x.abs() + c.abs()).max(f64::MIN_POSITIVE)
}
