use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::elliptic::ellip_prototype;
use crate::error::{Error, Result};
use crate::signal_io::AudioBuffer;

/// Lowpass families used for degradation and pre-processing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterFamily {
    Chebyshev1,
    Elliptic,
    Butterworth,
    Boxcar,
}

impl FilterFamily {
    pub const ALL: [FilterFamily; 4] = [
        FilterFamily::Chebyshev1,
        FilterFamily::Elliptic,
        FilterFamily::Butterworth,
        FilterFamily::Boxcar,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            FilterFamily::Chebyshev1 => "chebyshev1",
            FilterFamily::Elliptic => "elliptic",
            FilterFamily::Butterworth => "butterworth",
            FilterFamily::Boxcar => "boxcar",
        }
    }
}

impl std::str::FromStr for FilterFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FilterFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown filter family {s:?}")))
    }
}

pub const MIN_ORDER: usize = 2;
pub const MAX_ORDER: usize = 10;

/// Lowpass design parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub family: FilterFamily,
    pub order: usize,
    pub cutoff_hz: f64,
    /// Passband ripple for Chebyshev and elliptic designs.
    pub ripple_db: f64,
    /// Stopband attenuation for elliptic designs.
    pub stop_atten_db: f64,
}

impl FilterSpec {
    pub fn new(family: FilterFamily, order: usize, cutoff_hz: f64) -> Self {
        Self {
            family,
            order,
            cutoff_hz,
            ripple_db: 0.05,
            stop_atten_db: 40.0,
        }
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        if !(MIN_ORDER..=MAX_ORDER).contains(&self.order) {
            return Err(Error::InvalidOrder(self.order));
        }
        let nyquist = sample_rate as f64 / 2.0;
        if !(self.cutoff_hz > 0.0 && self.cutoff_hz < nyquist) {
            return Err(Error::CutoffOutOfRange {
                cutoff: self.cutoff_hz,
                nyquist,
            });
        }
        Ok(())
    }
}

/// Zeros, poles and gain of a rational transfer function.
#[derive(Debug, Clone)]
pub(crate) struct Zpk {
    pub zeros: Vec<Complex64>,
    pub poles: Vec<Complex64>,
    pub gain: f64,
}

impl Zpk {
    /// Analog prototype whose gain is set so that `|H(0)| = dc`.
    pub fn with_dc_gain(zeros: Vec<Complex64>, poles: Vec<Complex64>, dc: f64) -> Self {
        let num: Complex64 = zeros.iter().map(|z| -z).product();
        let den: Complex64 = poles.iter().map(|p| -p).product();
        let gain = dc * (den / num).re;
        Self { zeros, poles, gain }
    }

    pub fn eval(&self, s: Complex64) -> Complex64 {
        let num: Complex64 = self.zeros.iter().map(|z| s - z).product();
        let den: Complex64 = self.poles.iter().map(|p| s - p).product();
        self.gain * num / den
    }
}

fn butter_prototype(order: usize) -> Zpk {
    let n = order as f64;
    let poles = (0..order)
        .map(|i| {
            let m = -(n - 1.0) + 2.0 * i as f64;
            -Complex64::from_polar(1.0, PI * m / (2.0 * n))
        })
        .collect();
    Zpk::with_dc_gain(Vec::new(), poles, 1.0)
}

fn cheby1_prototype(order: usize, rp: f64) -> Zpk {
    let n = order as f64;
    let eps = (10f64.powf(0.1 * rp) - 1.0).sqrt();
    let mu = (1.0 / eps).asinh() / n;
    let poles = (0..order)
        .map(|i| {
            let theta = PI * (-(n - 1.0) + 2.0 * i as f64) / (2.0 * n);
            -Complex64::new(mu, theta).sinh()
        })
        .collect();
    let dc = if order.is_multiple_of(2) {
        1.0 / (1.0 + eps * eps).sqrt()
    } else {
        1.0
    };
    Zpk::with_dc_gain(Vec::new(), poles, dc)
}

/// One second-order section, `a0 = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    fn response(&self, z_inv: Complex64) -> Complex64 {
        let z2 = z_inv * z_inv;
        (self.b[0] + self.b[1] * z_inv + self.b[2] * z2) / (1.0 + self.a[0] * z_inv + self.a[1] * z2)
    }

    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    /// Roots of `z^2 + a1 z + a2`.
    pub fn poles(&self) -> [Complex64; 2] {
        let [a1, a2] = self.a;
        let disc = Complex64::new(a1 * a1 - 4.0 * a2, 0.0).sqrt();
        [(-a1 + disc) / 2.0, (-a1 - disc) / 2.0]
    }
}

/// A realized lowpass: cascaded biquads or a linear-phase FIR.
#[derive(Debug, Clone, PartialEq)]
pub enum FilterKernel {
    Iir(Vec<Biquad>),
    Fir(Vec<f64>),
}

impl FilterKernel {
    /// Complex frequency response at `freq_hz`.
    pub fn response(&self, freq_hz: f64, sample_rate: u32) -> Complex64 {
        let w = 2.0 * PI * freq_hz / sample_rate as f64;
        let z_inv = Complex64::from_polar(1.0, -w);
        match self {
            FilterKernel::Iir(sections) => sections.iter().map(|s| s.response(z_inv)).product(),
            FilterKernel::Fir(taps) => {
                let mut acc = Complex64::new(0.0, 0.0);
                let mut zk = Complex64::new(1.0, 0.0);
                for &h in taps {
                    acc += h * zk;
                    zk *= z_inv;
                }
                acc
            }
        }
    }

    pub fn magnitude_db(&self, freq_hz: f64, sample_rate: u32) -> f64 {
        20.0 * self.response(freq_hz, sample_rate).norm().log10()
    }

    /// All poles (empty for FIR).
    pub fn poles(&self) -> Vec<Complex64> {
        match self {
            FilterKernel::Iir(sections) => sections
                .iter()
                .flat_map(|s| {
                    let p = s.poles();
                    if s.a[1] == 0.0 {
                        vec![p[0]]
                    } else {
                        p.to_vec()
                    }
                })
                .collect(),
            FilterKernel::Fir(_) => Vec::new(),
        }
    }

    pub fn max_pole_magnitude(&self) -> f64 {
        self.poles().iter().map(|p| p.norm()).fold(0.0, f64::max)
    }
}

fn is_real(c: &Complex64) -> bool {
    c.im.abs() <= 1e-10 * c.norm().max(1.0)
}

/// Splits roots into one representative per conjugate pair plus the real roots.
fn split_roots(roots: &[Complex64]) -> (Vec<Complex64>, Vec<f64>) {
    let mut pairs = Vec::new();
    let mut reals = Vec::new();
    for r in roots {
        if is_real(r) {
            reals.push(r.re);
        } else if r.im > 0.0 {
            pairs.push(*r);
        }
    }
    (pairs, reals)
}

fn section_from_roots(zeros: &[Complex64], poles: &[Complex64]) -> Biquad {
    let quad = |r: &[Complex64]| -> [f64; 3] {
        match r.len() {
            0 => [1.0, 0.0, 0.0],
            1 => [1.0, -r[0].re, 0.0],
            _ => {
                let s = r[0] + r[1];
                let p = r[0] * r[1];
                [1.0, -s.re, p.re]
            }
        }
    };
    let b = quad(zeros);
    let a = quad(poles);
    Biquad { b, a: [a[1], a[2]] }
}

/// Converts digital zeros/poles into DC-normalized biquads, then applies `dc`.
fn zpk_to_sos(zeros: &[Complex64], poles: &[Complex64], dc: f64) -> Vec<Biquad> {
    let (mut zpairs, mut zreal) = split_roots(zeros);
    let (mut ppairs, preal) = split_roots(poles);
    // Poles nearest the unit circle first, each taking the nearest zero pair.
    ppairs.sort_by(|a, b| b.norm().total_cmp(&a.norm()));
    let mut sections = Vec::new();
    for p in &ppairs {
        let zs: Vec<Complex64> = if !zpairs.is_empty() {
            let (idx, _) = zpairs
                .iter()
                .enumerate()
                .min_by(|a, b| (a.1 - p).norm().total_cmp(&(b.1 - p).norm()))
                .unwrap();
            let z = zpairs.swap_remove(idx);
            vec![z, z.conj()]
        } else {
            let take = zreal.len().min(2);
            zreal.drain(..take).map(|r| Complex64::new(r, 0.0)).collect()
        };
        sections.push(section_from_roots(&zs, &[*p, p.conj()]));
    }
    let mut preal = preal;
    while !preal.is_empty() {
        let take = preal.len().min(2);
        let ps: Vec<Complex64> = preal.drain(..take).map(|r| Complex64::new(r, 0.0)).collect();
        let zs: Vec<Complex64> = zreal
            .drain(..zreal.len().min(ps.len()))
            .map(|r| Complex64::new(r, 0.0))
            .collect();
        sections.push(section_from_roots(&zs, &ps));
    }
    for s in sections.iter_mut() {
        let g = s.dc_gain();
        s.b.iter_mut().for_each(|b| *b /= g);
    }
    if let Some(first) = sections.first_mut() {
        first.b.iter_mut().for_each(|b| *b *= dc);
    }
    sections
}

/// Prewarped lowpass scaling followed by the bilinear transform.
fn bilinear_lowpass(proto: &Zpk, cutoff_hz: f64, sample_rate: u32) -> (Vec<Complex64>, Vec<Complex64>) {
    let fs2 = 2.0 * sample_rate as f64;
    let warped = fs2 * (PI * cutoff_hz / sample_rate as f64).tan();
    let map = |s: Complex64| {
        let s = s * warped;
        (fs2 + s) / (fs2 - s)
    };
    let mut zeros: Vec<Complex64> = proto.zeros.iter().map(|&z| map(z)).collect();
    let poles: Vec<Complex64> = proto.poles.iter().map(|&p| map(p)).collect();
    zeros.resize(poles.len(), Complex64::new(-1.0, 0.0));
    (zeros, poles)
}

/// Boxcar (rectangular-window) sinc FIR; length `2·order·fs/cutoff` rounded to odd.
fn boxcar_taps(order: usize, cutoff_hz: f64, sample_rate: u32) -> Vec<f64> {
    let mut len = (2.0 * order as f64 * sample_rate as f64 / cutoff_hz).round() as usize;
    if len.is_multiple_of(2) {
        len += 1;
    }
    let mid = (len / 2) as f64;
    let fc = cutoff_hz / sample_rate as f64;
    let mut taps: Vec<f64> = (0..len)
        .map(|n| {
            let x = n as f64 - mid;
            if x == 0.0 {
                2.0 * fc
            } else {
                (2.0 * PI * fc * x).sin() / (PI * x)
            }
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Designs a lowpass kernel for `spec` at `sample_rate`.
pub fn design_lowpass(spec: &FilterSpec, sample_rate: u32) -> Result<FilterKernel> {
    spec.validate(sample_rate)?;
    let proto = match spec.family {
        FilterFamily::Boxcar => {
            return Ok(FilterKernel::Fir(boxcar_taps(spec.order, spec.cutoff_hz, sample_rate)));
        }
        FilterFamily::Butterworth => butter_prototype(spec.order),
        FilterFamily::Chebyshev1 => cheby1_prototype(spec.order, spec.ripple_db),
        FilterFamily::Elliptic => ellip_prototype(spec.order, spec.ripple_db, spec.stop_atten_db),
    };
    let dc = proto.eval(Complex64::new(0.0, 0.0)).re;
    let (zeros, poles) = bilinear_lowpass(&proto, spec.cutoff_hz, sample_rate);
    let worst = poles.iter().map(|p| p.norm()).fold(0.0, f64::max);
    if worst >= 1.0 - 1e-9 || !worst.is_finite() {
        return Err(Error::UnstableDesign(worst));
    }
    let kernel = FilterKernel::Iir(zpk_to_sos(&zeros, &poles, dc));
    let realized = kernel.max_pole_magnitude();
    if realized >= 1.0 - 1e-9 || !realized.is_finite() {
        return Err(Error::UnstableDesign(realized));
    }
    Ok(kernel)
}

/// Filters `buf`: causal for IIR kernels, center-aligned for FIR. Output length equals input.
pub fn apply_filter(buf: &AudioBuffer, kernel: &FilterKernel) -> AudioBuffer {
    let x = buf.samples();
    let y = match kernel {
        FilterKernel::Iir(sections) => {
            let mut y = x.to_vec();
            for s in sections {
                let (mut z1, mut z2) = (0.0, 0.0);
                for v in y.iter_mut() {
                    let input = *v;
                    let out = s.b[0] * input + z1;
                    z1 = s.b[1] * input - s.a[0] * out + z2;
                    z2 = s.b[2] * input - s.a[1] * out;
                    *v = out;
                }
            }
            y
        }
        FilterKernel::Fir(taps) => {
            let n = x.len() as isize;
            let mid = (taps.len() / 2) as isize;
            (0..n)
                .map(|i| {
                    let lo = (i + mid - n + 1).max(0);
                    let hi = (i + mid).min(taps.len() as isize - 1);
                    (lo..=hi).map(|k| taps[k as usize] * x[(i + mid - k) as usize]).sum()
                })
                .collect()
        }
    };
    AudioBuffer::new(y, buf.sample_rate()).expect("stable filters keep samples finite")
}

#[cfg(test)]
mod tests {
    use super::*;

    const FS: u32 = 48_000;

    #[test]
    fn dc_gain_per_family() {
        for family in FilterFamily::ALL {
            for order in MIN_ORDER..=MAX_ORDER {
                let k = design_lowpass(&FilterSpec::new(family, order, 5000.0), FS).unwrap();
                let g = k.response(0.0, FS).norm();
                match family {
                    FilterFamily::Butterworth | FilterFamily::Boxcar => {
                        assert!((g - 1.0).abs() < 1e-6, "{family:?} {order}: {g}")
                    }
                    _ => {
                        let floor = 10f64.powf(-0.05 / 20.0);
                        assert!(g <= 1.0 + 1e-9 && g >= floor - 1e-9, "{family:?} {order}: {g}")
                    }
                }
            }
        }
    }

    #[test]
    fn butterworth_half_power() {
        for order in MIN_ORDER..=MAX_ORDER {
            let k = design_lowpass(&FilterSpec::new(FilterFamily::Butterworth, order, 6000.0), FS)
                .unwrap();
            let db = k.magnitude_db(6000.0, FS);
            assert!((db + 3.0103).abs() < 0.1, "order {order}: {db}");
        }
    }

    #[test]
    fn chebyshev_order8_stopband() {
        let k = design_lowpass(&FilterSpec::new(FilterFamily::Chebyshev1, 8, 4000.0), FS).unwrap();
        assert!(k.magnitude_db(8000.0, FS) < -40.0);
        // Ripple band edge sits at the cutoff.
        assert!((k.magnitude_db(4000.0, FS) + 0.05).abs() < 1e-6);
    }

    #[test]
    fn elliptic_passband_and_stopband() {
        let k = design_lowpass(&FilterSpec::new(FilterFamily::Elliptic, 6, 4000.0), FS).unwrap();
        for f in [0.0, 1000.0, 2000.0, 3000.0, 3999.0] {
            let db = k.magnitude_db(f, FS);
            assert!((-0.05 - 1e-6..=1e-9).contains(&db), "{f} Hz: {db}");
        }
        for f in (5000..24_000).step_by(250) {
            assert!(k.magnitude_db(f as f64, FS) <= -40.0 + 1e-6);
        }
    }

    #[test]
    fn boxcar_length_rule() {
        match design_lowpass(&FilterSpec::new(FilterFamily::Boxcar, 2, 2000.0), FS).unwrap() {
            FilterKernel::Fir(t) => assert_eq!(t.len(), 97),
            _ => unreachable!(),
        }
    }

    #[test]
    fn invalid_specs() {
        let s = FilterSpec::new(FilterFamily::Butterworth, 11, 4000.0);
        assert!(matches!(design_lowpass(&s, FS), Err(Error::InvalidOrder(11))));
        let s = FilterSpec::new(FilterFamily::Butterworth, 4, 24_000.0);
        assert!(matches!(design_lowpass(&s, FS), Err(Error::CutoffOutOfRange { .. })));
        let s = FilterSpec::new(FilterFamily::Elliptic, 4, 0.0);
        assert!(matches!(design_lowpass(&s, FS), Err(Error::CutoffOutOfRange { .. })));
    }

    #[test]
    fn zeros_in_zeros_out() {
        for family in FilterFamily::ALL {
            let k = design_lowpass(&FilterSpec::new(family, 5, 3000.0), FS).unwrap();
            let y = apply_filter(&AudioBuffer::zeros(1000, FS), &k);
            assert_eq!(y.len(), 1000);
            assert!(y.samples().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn dc_settles_through_butterworth() {
        let k = design_lowpass(&FilterSpec::new(FilterFamily::Butterworth, 6, 2000.0), FS).unwrap();
        let y = apply_filter(&AudioBuffer::new(vec![0.3; 4800], FS).unwrap(), &k);
        for &v in &y.samples()[2400..] {
            assert!((v - 0.3).abs() < 1e-3);
        }
    }

    #[test]
    fn fir_is_center_aligned() {
        let k = design_lowpass(&FilterSpec::new(FilterFamily::Boxcar, 2, 8000.0), FS).unwrap();
        let mut x = vec![0.0; 201];
        x[100] = 1.0;
        let y = apply_filter(&AudioBuffer::new(x, FS).unwrap(), &k);
        let peak = y
            .samples()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(peak, 100);
    }

    #[test]
    fn family_names_round_trip() {
        for f in FilterFamily::ALL {
            assert_eq!(f.name().parse::<FilterFamily>().unwrap(), f);
            assert_eq!(serde_json::to_string(&f).unwrap(), format!("\"{}\"", f.name()));
        }
    }
}
