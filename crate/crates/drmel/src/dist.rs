//! Normal and gamma distribution helpers shared by the simulation designs
//! and the kernel-density comparator.

use crate::solver::{gamma_p, ln_gamma};

/// Standard normal density.
pub fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Inverse standard normal CDF (Wichura's AS 241, double precision).
/// Absolute error below 1e-15 over (0, 1).
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "probability must be in (0,1)");
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q * poly(&A, r) / poly(&B, r);
    }
    let mut r = if q < 0.0 { p } else { 1.0 - p };
    r = (-r.ln()).sqrt();
    let x = if r <= 5.0 {
        let r = r - 1.6;
        poly(&C, r) / poly(&D, r)
    } else {
        let r = r - 5.0;
        poly(&E, r) / poly(&F, r)
    };
    if q < 0.0 {
        -x
    } else {
        x
    }
}

fn poly(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &ci| acc * x + ci)
}

const A: [f64; 8] = [
    3.387132872796366608,
    133.14166789178437745,
    1971.5909503065514427,
    13731.693765509461125,
    45921.953931549871457,
    67265.770927008700853,
    33430.575583588128105,
    2509.0809287301226727,
];
const B: [f64; 8] = [
    1.0,
    42.313330701600911252,
    687.1870074920579083,
    5394.1960214247511077,
    21213.794301586595867,
    39307.89580009271061,
    28729.085735721942674,
    5226.495278852545703,
];
const C: [f64; 8] = [
    1.42343711074968357734,
    4.6303378461565452959,
    5.7694972214606914055,
    3.64784832476320460504,
    1.27045825245236838258,
    0.24178072517745061177,
    0.0227238449892691845833,
    7.7454501427834140764e-4,
];
const D: [f64; 8] = [
    1.0,
    2.05319162663775882187,
    1.6763848301838038494,
    0.68976733498510000455,
    0.14810397642748007459,
    0.0151986665636164571966,
    5.475938084995344946e-4,
    1.05075007164441684324e-9,
];
const E: [f64; 8] = [
    6.6579046435011037772,
    5.4637849111641143699,
    1.7848265399172913358,
    0.29656057182850489123,
    0.026532189526576123093,
    0.0012426609473880784386,
    2.71155556874348757815e-5,
    2.01033439929228813265e-7,
];
const F: [f64; 8] = [
    1.0,
    0.59983220655588793769,
    0.13692988092273580531,
    0.0148753612908506148525,
    7.868691311456132591e-4,
    1.8463183175100546818e-5,
    1.4215117583164458887e-7,
    2.04426310338993978564e-15,
];

/// Gamma density with shape `a` and scale `s`.
pub fn gamma_pdf(a: f64, s: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let y = x / s;
    ((a - 1.0) * y.ln() - y - ln_gamma(a)).exp() / s
}

/// The tau-quantile of Gamma(shape, scale), by bracketed Newton inversion
/// of the regularized incomplete gamma function.
pub fn gamma_quantile(shape: f64, scale: f64, tau: f64) -> f64 {
    assert!(shape > 0.0 && scale > 0.0);
    assert!(tau > 0.0 && tau < 1.0);
    // Wilson-Hilferty start in the unit-scale variable.
    let z = normal_quantile(tau);
    let v = 1.0 - 1.0 / (9.0 * shape) + z * (1.0 / (9.0 * shape)).sqrt();
    let mut y = if v > 0.0 {
        shape * v * v * v
    } else {
        shape * 0.1
    };
    let mut lo = 0.0f64;
    let mut hi = (shape + 10.0 * shape.sqrt() + 10.0).max(2.0 * y);
    while gamma_p(shape, hi) < tau {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let fy = gamma_p(shape, y) - tau;
        if fy.abs() < 1e-14 {
            break;
        }
        if fy > 0.0 {
            hi = y;
        } else {
            lo = y;
        }
        let d = gamma_pdf(shape, 1.0, y);
        let mut next = if d > 0.0 { y - fy / d } else { 0.5 * (lo + hi) };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - y).abs() < 1e-13 * (1.0 + y.abs()) {
            y = next;
            break;
        }
        y = next;
    }
    scale * y
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_quantile_known_values() {
        assert!(normal_quantile(0.5).abs() < 1e-15);
        assert!((normal_quantile(0.975) - 1.959963984540054).abs() < 1e-12);
        assert!((normal_quantile(0.025) + 1.959963984540054).abs() < 1e-12);
        assert!((normal_quantile(0.90) - 1.2815515655446004).abs() < 1e-12);
        // Deep tail stays finite and monotone.
        assert!(normal_quantile(1e-12) < normal_quantile(1e-10));
    }

    #[test]
    fn gamma_quantile_round_trip() {
        for &(a, s, tau) in &[(5.0, 1.9, 0.5), (6.0, 1.8, 0.5), (7.0, 1.6, 0.05), (2.5, 0.7, 0.9)] {
            let q = gamma_quantile(a, s, tau);
            assert!(
                (gamma_p(a, q / s) - tau).abs() < 1e-11,
                "a={a} s={s} tau={tau}"
            );
        }
    }

    #[test]
    fn std_normal_pdf_values() {
        assert!((std_normal_pdf(0.0) - 0.3989422804014327).abs() < 1e-15);
        assert!((std_normal_pdf(1.0) - 0.24197072451914337).abs() < 1e-15);
    }
}
