//! Real roots of low-degree polynomials on an interval.
//!
//! Coefficients are stored lowest degree first. Roots are isolated by
//! recursing on the derivative: between consecutive critical points the
//! polynomial is monotone, so each sign change holds exactly one root, found
//! by bisection and polished with Newton steps.

use alloc::vec::Vec;

pub fn eval(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

pub fn derivative(coeffs: &[f64]) -> Vec<f64> {
    coeffs
        .iter()
        .enumerate()
        .skip(1)
        .map(|(i, &c)| i as f64 * c)
        .collect()
}

fn trim(coeffs: &[f64]) -> &[f64] {
    let mut n = coeffs.len();
    while n > 0 && coeffs[n - 1] == 0.0 {
        n -= 1;
    }
    &coeffs[..n]
}

fn bisect(coeffs: &[f64], mut a: f64, mut b: f64) -> f64 {
    let mut fa = eval(coeffs, a);
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if m <= a || m >= b {
            break;
        }
        let fm = eval(coeffs, m);
        if fm == 0.0 {
            return m;
        }
        if (fm < 0.0) == (fa < 0.0) {
            a = m;
            fa = fm;
        } else {
            b = m;
        }
    }
    0.5 * (a + b)
}

fn polish(coeffs: &[f64], x: f64, lo: f64, hi: f64) -> f64 {
    let d = derivative(coeffs);
    let mut best = x;
    let mut best_r = eval(coeffs, x).abs();
    let mut cur = x;
    for _ in 0..8 {
        let slope = eval(&d, cur);
        if slope == 0.0 {
            break;
        }
        let next = cur - eval(coeffs, cur) / slope;
        if !(lo..=hi).contains(&next) {
            break;
        }
        let r = eval(coeffs, next).abs();
        if r < best_r {
            best = next;
            best_r = r;
        }
        cur = next;
    }
    best
}

/// Sorted distinct real roots of the polynomial in `[lo, hi]`. The zero
/// polynomial yields no roots.
pub fn real_roots(coeffs: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    let p = trim(coeffs);
    match p.len() {
        0 | 1 => Vec::new(),
        2 => {
            let r = -p[0] / p[1];
            if (lo..=hi).contains(&r) {
                alloc::vec![r]
            } else {
                Vec::new()
            }
        }
        _ => {
            let mut knots = alloc::vec![lo];
            knots.extend(
                real_roots(&derivative(p), lo, hi)
                    .into_iter()
                    .filter(|&c| c > lo && c < hi),
            );
            knots.push(hi);
            let mut roots: Vec<f64> = Vec::new();
            for w in knots.windows(2) {
                let (a, b) = (w[0], w[1]);
                let (fa, fb) = (eval(p, a), eval(p, b));
                let root = if fa == 0.0 {
                    Some(a)
                } else if fb == 0.0 {
                    Some(b)
                } else if (fa < 0.0) != (fb < 0.0) {
                    Some(polish(p, bisect(p, a, b), a, b))
                } else {
                    None
                };
                if let Some(r) = root {
                    if roots
                        .last()
                        .is_none_or(|&last| (r - last).abs() > 1e-12 * (1.0 + r.abs()))
                    {
                        roots.push(r);
                    }
                }
            }
            // Double roots touch zero without a sign change; they show up as
            // critical points with a vanishing value.
            for c in knots.iter().copied() {
                if eval(p, c).abs() < 1e-14 * (1.0 + p.iter().map(|x| x.abs()).fold(0.0, f64::max))
                    && roots.iter().all(|&r| (r - c).abs() > 1e-9)
                {
                    roots.push(c);
                }
            }
            roots.sort_by(f64::total_cmp);
            roots
        }
    }
}
