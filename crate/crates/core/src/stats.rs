//! Small statistical helpers.

use crate::error::{OpeError, Result};

/// Standard normal quantile Φ⁻¹(p) by Wichura's PPND16 rational
/// approximation (Algorithm AS 241), accurate to well below 1e-8 over
/// p ∈ (0, 1).
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(OpeError::InvalidInput(format!(
            "quantile level must lie in (0,1), got {p}"
        )));
    }
    const A: [f64; 8] = [
        3.3871328727963666080e0,
        1.3314166789178437745e2,
        1.9715909503065514427e3,
        1.3731693765509461125e4,
        4.5921953931549871457e4,
        6.7265770927008700853e4,
        3.3430575583588128105e4,
        2.5090809287301226727e3,
    ];
    const B: [f64; 8] = [
        1.0,
        4.2313330701600911252e1,
        6.8718700749205790830e2,
        5.3941960214247511077e3,
        2.1213794301586595867e4,
        3.9307895800092710610e4,
        2.8729085735721942674e4,
        5.2264952788528545610e3,
    ];
    const C: [f64; 8] = [
        1.42343711074968357734e0,
        4.63033784615654529590e0,
        5.76949722146069140550e0,
        3.64784832476320460504e0,
        1.27045825245236838258e0,
        2.41780725177450611770e-1,
        2.27238449892691845833e-2,
        7.74545014278341407640e-4,
    ];
    const D: [f64; 8] = [
        1.0,
        2.05319162663775882187e0,
        1.67638483018380384940e0,
        6.89767334985100004550e-1,
        1.48103976427480074590e-1,
        1.51986665636164571966e-2,
        5.47593808499534494600e-4,
        1.05075007164441684324e-9,
    ];
    const E: [f64; 8] = [
        6.65790464350110377720e0,
        5.46378491116411436990e0,
        1.78482653991729133580e0,
        2.96560571828504891230e-1,
        2.65321895265761230930e-2,
        1.24266094738807843860e-3,
        2.71155556874348757815e-5,
        2.01033439929228813265e-7,
    ];
    const F: [f64; 8] = [
        1.0,
        5.99832206555887937690e-1,
        1.36929880922735805310e-1,
        1.48753612908506148525e-2,
        7.86869131145613259100e-4,
        1.84631831751005468180e-6,
        1.42151175831644588870e-7,
        2.04426310338993978564e-15,
    ];
    fn ratio(num: &[f64; 8], den: &[f64; 8], r: f64) -> f64 {
        let p: f64 = num.iter().rev().fold(0.0, |acc, &c| acc * r + c);
        let q: f64 = den.iter().rev().fold(0.0, |acc, &c| acc * r + c);
        p / q
    }
    let q = p - 0.5;
    let z = if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        q * ratio(&A, &B, r)
    } else {
        let mut r = if q < 0.0 { p } else { 1.0 - p };
        r = (-r.ln()).sqrt();
        let unsigned = if r <= 5.0 {
            ratio(&C, &D, r - 1.6)
        } else {
            ratio(&E, &F, r - 5.0)
        };
        if q < 0.0 {
            -unsigned
        } else {
            unsigned
        }
    };
    Ok(z)
}
