//! Jacobi elliptic functions via descending Landen transformations and the
//! elliptic analog lowpass prototype built on them.

use std::f64::consts::{FRAC_PI_2, PI};

use num_complex::Complex64;

use super::design::Zpk;

const J: Complex64 = Complex64::new(0.0, 1.0);

/// Descending Landen moduli of `k`, stopping once they underflow to zero.
fn landen(k: f64) -> Vec<f64> {
    let mut v = Vec::new();
    let mut k = k;
    for _ in 0..64 {
        if k <= f64::EPSILON {
            break;
        }
        let kp = (1.0 - k * k).max(0.0).sqrt();
        k = (k / (1.0 + kp)).powi(2);
        v.push(k);
    }
    v
}

/// Complete elliptic integrals `(K(k), K(k'))`.
pub(crate) fn ellipk(k: f64) -> (f64, f64) {
    let big_k = |k: f64| landen(k).iter().map(|v| 1.0 + v).product::<f64>() * FRAC_PI_2;
    let kp = (1.0 - k * k).max(0.0).sqrt();
    (big_k(k), big_k(kp))
}

/// `cd(uK, k)`.
fn cde(u: Complex64, k: f64) -> Complex64 {
    let mut w = (u * FRAC_PI_2).cos();
    for v in landen(k).iter().rev() {
        w = (1.0 + v) * w / (1.0 + v * w * w);
    }
    w
}

/// `sn(uK, k)`.
fn sne(u: Complex64, k: f64) -> Complex64 {
    let mut w = (u * FRAC_PI_2).sin();
    for v in landen(k).iter().rev() {
        w = (1.0 + v) * w / (1.0 + v * w * w);
    }
    w
}

fn srem(x: f64, y: f64) -> f64 {
    x - y * (x / y).round()
}

/// Inverse of [`cde`] in units of `K`.
fn acde(w: Complex64, k: f64) -> Complex64 {
    let v = landen(k);
    let mut w = w;
    for (n, vn) in v.iter().enumerate() {
        let v1 = if n == 0 { k } else { v[n - 1] };
        w = w / (1.0 + (1.0 - w * w * v1 * v1).sqrt()) * (2.0 / (1.0 + vn));
    }
    let u = w.acos() * (2.0 / PI);
    let (kk, kkp) = ellipk(k);
    let r = kkp / kk;
    Complex64::new(srem(u.re, 4.0), srem(u.im, 2.0 * r))
}

fn asne(w: Complex64, k: f64) -> Complex64 {
    1.0 - acde(w, k)
}

/// Solves the degree equation for the selectivity modulus given order and `k1`.
fn ellipdeg(order: usize, k1: f64) -> f64 {
    let l = order / 2;
    let k1p = (1.0 - k1 * k1).sqrt();
    let prod: f64 = (1..=l)
        .map(|i| sne(Complex64::new((2 * i - 1) as f64 / order as f64, 0.0), k1p).re)
        .product();
    let kp = k1p.powi(order as i32) * prod.powi(4);
    (1.0 - kp * kp).sqrt()
}

/// Elliptic lowpass prototype with passband edge at 1 rad/s.
///
/// `rp` is the passband ripple and `rs` the stopband attenuation, both in dB.
pub(crate) fn ellip_prototype(order: usize, rp: f64, rs: f64) -> Zpk {
    let ep = (10f64.powf(rp / 10.0) - 1.0).sqrt();
    let es = (10f64.powf(rs / 10.0) - 1.0).sqrt();
    let k1 = ep / es;
    let k = ellipdeg(order, k1);
    let l = order / 2;
    let mut zeros = Vec::with_capacity(2 * l);
    let mut poles = Vec::with_capacity(order);
    let v0 = -J * asne(J / ep, k1) / order as f64;
    for i in 1..=l {
        let ui = Complex64::new((2 * i - 1) as f64 / order as f64, 0.0);
        let zeta = cde(ui, k);
        let z = J / (k * zeta);
        zeros.push(z);
        zeros.push(z.conj());
        let p = J * cde(ui - J * v0, k);
        poles.push(p);
        poles.push(p.conj());
    }
    if order % 2 == 1 {
        let p0 = J * sne(J * v0, k);
        poles.push(Complex64::new(p0.re, 0.0));
    }
    let dc = if order.is_multiple_of(2) {
        1.0 / (1.0 + ep * ep).sqrt()
    } else {
        1.0
    };
    Zpk::with_dc_gain(zeros, poles, dc)
}
