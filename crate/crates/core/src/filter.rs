//! Butterworth band-pass design as second-order sections and zero-phase
//! (forward-backward) application.
//!
//! `order` is the low-pass prototype order, so the band-pass has `2·order`
//! poles and `order` sections. Forward-backward filtering squares the
//! magnitude response and cancels the phase.

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One biquad `[b0, b1, b2, a0, a1, a2]` with `a0 = 1`.
pub type Section = [f64; 6];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BandpassParams {
    pub low_hz: f64,
    pub high_hz: f64,
    pub order: usize,
    pub fs: f64,
}

impl Default for BandpassParams {
    fn default() -> Self {
        BandpassParams {
            low_hz: 0.85,
            high_hz: 3.5,
            order: 4,
            fs: 30.0,
        }
    }
}

impl BandpassParams {
    pub fn validate(&self) -> Result<()> {
        let nyq = self.fs / 2.0;
        if !(self.fs > 0.0 && self.low_hz > 0.0 && self.low_hz < self.high_hz && self.high_hz < nyq) {
            return Err(Error::Config(format!(
                "band {}–{} Hz invalid at fs {}",
                self.low_hz, self.high_hz, self.fs
            )));
        }
        if self.order == 0 || self.order > 12 {
            return Err(Error::Config(format!("filter order {} out of range 1..=12", self.order)));
        }
        Ok(())
    }

    /// Bilinear prewarp of a frequency in Hz to analog rad/s.
    fn warp(&self, f: f64) -> f64 {
        2.0 * self.fs * (std::f64::consts::PI * f / self.fs).tan()
    }
}

/// Designs the digital band-pass as cascaded biquads.
pub fn design_bandpass(p: &BandpassParams) -> Result<Vec<Section>> {
    p.validate()?;
    let n = p.order;
    let (w1, w2) = (p.warp(p.low_hz), p.warp(p.high_hz));
    let bw = w2 - w1;
    let w0sq = w1 * w2;
    let fs2 = 2.0 * p.fs;

    let mut zpoles = Vec::with_capacity(2 * n);
    for k in 0..n {
        let theta = std::f64::consts::PI * (2 * k + n + 1) as f64 / (2 * n) as f64;
        let proto = Complex64::from_polar(1.0, theta);
        let half = proto * (bw / 2.0);
        let root = (half * half - w0sq).sqrt();
        for s in [half + root, half - root] {
            zpoles.push((fs2 + s) / (fs2 - s));
        }
    }

    let mut complex: Vec<Complex64> = zpoles.iter().copied().filter(|z| z.im > 1e-12).collect();
    complex.sort_by(|a, b| a.norm().total_cmp(&b.norm()));
    let mut real: Vec<f64> = zpoles.iter().filter(|z| z.im.abs() <= 1e-12).map(|z| z.re).collect();
    real.sort_by(f64::total_cmp);

    let mut sections: Vec<Section> = complex
        .iter()
        .map(|z| [1.0, 0.0, -1.0, 1.0, -2.0 * z.re, z.norm_sqr()])
        .collect();
    for pair in real.chunks(2) {
        let (r1, r2) = (pair[0], pair.get(1).copied().unwrap_or(0.0));
        sections.push([1.0, 0.0, -1.0, 1.0, -(r1 + r2), r1 * r2]);
    }
    if sections.len() != n {
        return Err(Error::Config("filter design produced unpaired poles".into()));
    }

    // Unit gain at the digital image of the geometric centre frequency.
    let fc = p.fs / std::f64::consts::PI * (w0sq.sqrt() / fs2).atan();
    let g = response_at(&sections, fc, p.fs).norm();
    for c in &mut sections[0][..3] {
        *c /= g;
    }
    Ok(sections)
}

fn response_at(sections: &[Section], f: f64, fs: f64) -> Complex64 {
    let z1 = Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * f / fs);
    let z2 = z1 * z1;
    sections.iter().fold(Complex64::new(1.0, 0.0), |h, s| {
        h * (s[0] + s[1] * z1 + s[2] * z2) / (s[3] + s[4] * z1 + s[5] * z2)
    })
}

/// Single-pass magnitude response `|H(f)|`.
pub fn magnitude_response(sections: &[Section], f: f64, fs: f64) -> f64 {
    response_at(sections, f, fs).norm()
}

/// Minimum input length accepted by [`filtfilt`] for these sections.
pub fn pad_length(sections: &[Section]) -> usize {
    let zb = sections.iter().filter(|s| s[2] == 0.0).count();
    let za = sections.iter().filter(|s| s[5] == 0.0).count();
    3 * (2 * sections.len() + 1 - zb.min(za))
}

/// Step-response steady state per section (transposed direct form II).
fn steady_state(sections: &[Section]) -> Vec<[f64; 2]> {
    let mut scale = 1.0;
    sections
        .iter()
        .map(|s| {
            let (b0, b1, b2, a1, a2) = (s[0], s[1], s[2], s[4], s[5]);
            let y = (b0 + b1 + b2) / (1.0 + a1 + a2);
            let z1 = b2 - a2 * y;
            let z0 = b1 - a1 * y + z1;
            let out = [scale * z0, scale * z1];
            scale *= y;
            out
        })
        .collect()
}

fn sosfilt(sections: &[Section], x: &mut [f64], zi: &[[f64; 2]], x0: f64) {
    for (s, z) in sections.iter().zip(zi) {
        let (b0, b1, b2, a1, a2) = (s[0], s[1], s[2], s[4], s[5]);
        let (mut z0, mut z1) = (z[0] * x0, z[1] * x0);
        for v in x.iter_mut() {
            let xi = *v;
            let y = b0 * xi + z0;
            z0 = b1 * xi - a1 * y + z1;
            z1 = b2 * xi - a2 * y;
            *v = y;
        }
    }
}

/// Zero-phase filtering with odd-extension padding and steady-state initial
/// conditions on both passes.
pub fn filtfilt(sections: &[Section], x: &[f64]) -> Result<Vec<f64>> {
    let pad = pad_length(sections);
    if x.len() <= pad {
        return Err(Error::Length(format!("{} samples, filter needs more than {pad}", x.len())));
    }
    let n = x.len();
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

    let zi = steady_state(sections);
    let first = ext[0];
    sosfilt(sections, &mut ext, &zi, first);
    ext.reverse();
    let first = ext[0];
    sosfilt(sections, &mut ext, &zi, first);
    ext.reverse();
    Ok(ext[pad..pad + n].to_vec())
}

/// Minimum trace length accepted by [`bandpass`].
pub const MIN_BANDPASS_LEN: usize = 60;

/// Zero-phase band-pass of a uniformly sampled series.
pub fn bandpass(x: &[f64], p: &BandpassParams) -> Result<Vec<f64>> {
    if x.len() < MIN_BANDPASS_LEN {
        return Err(Error::Length(format!(
            "band-pass needs at least {MIN_BANDPASS_LEN} samples, got {}",
            x.len()
        )));
    }
    filtfilt(&design_bandpass(p)?, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    /// Closed-form Butterworth band-pass magnitude squared after prewarping.
    fn analytic_gain_sq(p: &BandpassParams, f: f64) -> f64 {
        let (w1, w2) = (p.warp(p.low_hz), p.warp(p.high_hz));
        let w = p.warp(f);
        let omega = (w * w - w1 * w2) / ((w2 - w1) * w);
        1.0 / (1.0 + omega.abs().powi(2 * p.order as i32))
    }

    fn sine(f: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| (2.0 * PI * f * i as f64 / 30.0).sin()).collect()
    }

    /// Least-squares sinusoid amplitude at `f` over the middle half.
    fn steady_amplitude(y: &[f64], f: f64) -> f64 {
        let (lo, hi) = (y.len() / 4, 3 * y.len() / 4);
        let (mut ss, mut cc, mut sc, mut ys, mut yc) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (i, v) in y.iter().enumerate().take(hi).skip(lo) {
            let ph = 2.0 * PI * f * i as f64 / 30.0;
            let (s, c) = ph.sin_cos();
            ss += s * s;
            cc += c * c;
            sc += s * c;
            ys += v * s;
            yc += v * c;
        }
        let det = ss * cc - sc * sc;
        let a = (ys * cc - yc * sc) / det;
        let b = (yc * ss - ys * sc) / det;
        a.hypot(b)
    }

    #[test]
    fn response_matches_closed_form() {
        for order in 1..=6 {
            let p = BandpassParams {
                order,
                ..Default::default()
            };
            let sos = design_bandpass(&p).unwrap();
            assert_eq!(sos.len(), order);
            for i in 1..150 {
                let f = i as f64 * 0.1;
                let h = magnitude_response(&sos, f, p.fs);
                let oracle = analytic_gain_sq(&p, f).sqrt();
                assert!((h - oracle).abs() < 1e-9, "order {order} f {f}: {h} vs {oracle}");
            }
        }
    }

    #[test]
    fn sections_are_stable() {
        let sos = design_bandpass(&BandpassParams::default()).unwrap();
        for s in &sos {
            // both roots of z² + a1 z + a2 inside the unit circle
            assert!(s[5] < 1.0 && s[5].abs() < 1.0 && s[4].abs() < 1.0 + s[5]);
        }
    }

    #[test]
    fn passband_sine_keeps_amplitude() {
        let y = bandpass(&sine(1.5, 600), &BandpassParams::default()).unwrap();
        let a = steady_amplitude(&y, 1.5);
        assert!((0.85..=1.0).contains(&a), "gain {a}");
        let expect = analytic_gain_sq(&BandpassParams::default(), 1.5);
        assert!((a - expect).abs() < 1e-4, "{a} vs {expect}");
    }

    #[test]
    fn stopband_sines_attenuated_20db() {
        for f in [0.2, 5.0] {
            let y = bandpass(&sine(f, 900), &BandpassParams::default()).unwrap();
            assert!(steady_amplitude(&y, f) <= 0.1, "{f} Hz");
        }
    }

    #[test]
    fn constant_is_removed() {
        let y = bandpass(&vec![123.0; 200], &BandpassParams::default()).unwrap();
        assert!(y.iter().all(|v| v.abs() < 1e-6 * 123.0));
    }

    #[test]
    fn zero_phase_lag() {
        let x = sine(1.2, 600);
        let y = bandpass(&x, &BandpassParams::default()).unwrap();
        let corr = |lag: i64| -> f64 {
            (150..450).map(|i| x[i] * y[(i as i64 + lag) as usize]).sum()
        };
        let best = (-10..=10).max_by(|&a, &b| corr(a).total_cmp(&corr(b))).unwrap();
        assert_eq!(best, 0);
    }

    #[test]
    fn short_input_rejected() {
        assert!(matches!(bandpass(&[0.0; 59], &BandpassParams::default()), Err(Error::Length(_))));
        assert!(BandpassParams {
            high_hz: 16.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    proptest! {
        #[test]
        fn linear(xs in prop::collection::vec(-10.0f64..10.0, 80), ys in prop::collection::vec(-10.0f64..10.0, 80),
                  a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let p = BandpassParams::default();
            let mix: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| a * x + b * y).collect();
            let fm = bandpass(&mix, &p).unwrap();
            let fx = bandpass(&xs, &p).unwrap();
            let fy = bandpass(&ys, &p).unwrap();
            for i in 0..80 {
                prop_assert!((fm[i] - (a * fx[i] + b * fy[i])).abs() < 1e-9);
            }
        }
    }
}
