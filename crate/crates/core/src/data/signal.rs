use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const BAND_LO_HZ: f64 = 0.01;
pub const BAND_HI_HZ: f64 = 0.1;

/// Frequency in Hz of DFT bin `k` for a length-`n` series; bins above `n/2`
/// fold onto their negative-frequency partners.
pub fn bin_frequency(k: usize, n: usize, period: f64) -> f64 {
    k.min(n - k) as f64 / (n as f64 * period)
}

/// Ideal band-pass along the last axis. Every DFT bin whose frequency lies in
/// `[lo, hi]` (both inclusive) is kept and all others are zeroed, including DC.
pub fn bandpass_filter<T: Real>(x: &Tensor<T>, period: f64, lo: f64, hi: f64) -> Result<Tensor<T>> {
    if !(period > 0.0 && period.is_finite()) {
        return Err(Error::invalid(format!("sampling period must be positive, got {period}")));
    }
    let n = *x.dims().last().expect("rank >= 1");
    if n < 4 {
        return Err(Error::invalid(format!("band-pass needs at least 4 time points, got {n}")));
    }
    let nyquist = 0.5 / period;
    if !(lo >= 0.0 && lo < hi) {
        return Err(Error::invalid(format!("band [{lo}, {hi}] Hz is empty or negative")));
    }
    if hi > nyquist {
        return Err(Error::invalid(format!(
            "upper cutoff {hi} Hz exceeds the Nyquist frequency {nyquist} Hz"
        )));
    }
    // Relative slack so a cutoff that sits exactly on a bin keeps it.
    let slack = 1e-9;
    let keep: Vec<bool> = (0..n)
        .map(|k| {
            let f = bin_frequency(k, n, period);
            f >= lo * (1.0 - slack) && f <= hi * (1.0 + slack)
        })
        .collect();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut scratch = vec![Complex::default(); fwd.get_inplace_scratch_len().max(inv.get_inplace_scratch_len())];
    let mut buf = vec![Complex::default(); n];
    let scale = 1.0 / n as f64;
    let mut out = Vec::with_capacity(x.numel());
    for series in x.data().chunks(n) {
        for (b, &v) in buf.iter_mut().zip(series) {
            *b = Complex::new(v.as_f64(), 0.0);
        }
        fwd.process_with_scratch(&mut buf, &mut scratch);
        for (b, &k) in buf.iter_mut().zip(&keep) {
            if !k {
                *b = Complex::default();
            }
        }
        inv.process_with_scratch(&mut buf, &mut scratch);
        out.extend(buf.iter().map(|c| T::of_f64(c.re * scale)));
    }
    Tensor::from_data(x.dims(), out)
}

/// Amplitude of the least-squares fit `a sin(wt) + b cos(wt)` at `freq` Hz,
/// i.e. `sqrt(a^2 + b^2)`.
pub fn sine_amplitude<T: Real>(series: &[T], freq: f64, period: f64) -> f64 {
    let (mut ys, mut yc, mut ss, mut cc, mut sc) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (t, v) in series.iter().enumerate() {
        let (s, c) = (2.0 * std::f64::consts::PI * freq * t as f64 * period).sin_cos();
        let v = v.as_f64();
        ys += v * s;
        yc += v * c;
        ss += s * s;
        cc += c * c;
        sc += s * c;
    }
    let det = ss * cc - sc * sc;
    if det.abs() < 1e-300 {
        return 0.0;
    }
    let a = (ys * cc - yc * sc) / det;
    let b = (yc * ss - ys * sc) / det;
    a.hypot(b)
}

/// Block-averages axes 2, 3 and 4 (`X, Y, Z`) of a `[N, C, X, Y, Z, ...]`
/// tensor by `factor` per axis. An extent that is not a multiple of its
/// factor is padded up to one by repeating its last slice.
pub fn downsample_spatial<T: Real>(x: &Tensor<T>, factor: [usize; 3]) -> Result<Tensor<T>> {
    if factor.contains(&0) {
        return Err(Error::invalid(format!("downsampling factors must be >= 1, got {factor:?}")));
    }
    if x.rank() < 5 {
        return Err(Error::shape(format!("downsampling needs [N, C, X, Y, Z, ...], got {}", x.shape())));
    }
    let d = x.dims();
    let outer = d[0] * d[1];
    let inner: usize = d[5..].iter().product();
    let (dx, dy, dz) = (d[2], d[3], d[4]);
    let o = [dx.div_ceil(factor[0]), dy.div_ceil(factor[1]), dz.div_ceil(factor[2])];
    let mut dims = d.to_vec();
    dims[2..5].copy_from_slice(&o);
    let count = T::of_usize(factor.iter().product());
    let src = x.data();
    let mut out = vec![T::zero(); dims.iter().product()];
    let mut pos = 0;
    for p in 0..outer {
        for a in 0..o[0] {
            for b in 0..o[1] {
                for c in 0..o[2] {
                    let dst = &mut out[pos * inner..][..inner];
                    for i in 0..factor[0] {
                        let xi = (a * factor[0] + i).min(dx - 1);
                        for j in 0..factor[1] {
                            let yi = (b * factor[1] + j).min(dy - 1);
                            for k in 0..factor[2] {
                                let zi = (c * factor[2] + k).min(dz - 1);
                                let s = (((p * dx + xi) * dy + yi) * dz + zi) * inner;
                                for (o, &v) in dst.iter_mut().zip(&src[s..s + inner]) {
                                    *o = *o + v;
                                }
                            }
                        }
                    }
                    for v in dst.iter_mut() {
                        *v = *v / count;
                    }
                    pos += 1;
                }
            }
        }
    }
    Tensor::from_data(&dims, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn sine(freq: f64, n: usize, period: f64, phase: f64) -> Tensor<f64> {
        Tensor::from_fn(&[n], |t| (2.0 * PI * freq * t as f64 * period + phase).sin()).unwrap()
    }

    /// Direct O(n^2) DFT band-pass used as the reference.
    fn naive_bandpass(x: &[f64], period: f64, lo: f64, hi: f64) -> Vec<f64> {
        let n = x.len();
        let spec: Vec<(f64, f64)> = (0..n)
            .map(|k| {
                x.iter().enumerate().fold((0.0, 0.0), |(re, im), (t, &v)| {
                    let a = -2.0 * PI * (k * t) as f64 / n as f64;
                    (re + v * a.cos(), im + v * a.sin())
                })
            })
            .collect();
        (0..n)
            .map(|t| {
                let mut s = 0.0;
                for (k, &(re, im)) in spec.iter().enumerate() {
                    let f = k.min(n - k) as f64 / (n as f64 * period);
                    if f >= lo && f <= hi {
                        let a = 2.0 * PI * (k * t) as f64 / n as f64;
                        s += re * a.cos() - im * a.sin();
                    }
                }
                s / n as f64
            })
            .collect()
    }

    #[test]
    fn matches_naive_dft() {
        let x = crate::tensor::Rng::new(3).normal_tensor::<f64>(&[50], 0.0, 1.0).unwrap();
        let y = bandpass_filter(&x, 2.0, BAND_LO_HZ, BAND_HI_HZ).unwrap();
        let r = naive_bandpass(x.data(), 2.0, BAND_LO_HZ, BAND_HI_HZ);
        for (a, b) in y.data().iter().zip(&r) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn removes_dc() {
        let x = Tensor::<f64>::full(&[2, 176], 4.0).unwrap();
        let y = bandpass_filter(&x, 2.0, BAND_LO_HZ, BAND_HI_HZ).unwrap();
        assert!(y.max_abs() < 1e-6 * 4.0);
    }

    #[test]
    fn in_band_sine_kept_out_of_band_removed() {
        let x = sine(0.05, 176, 2.0, 0.3);
        assert!((sine_amplitude(x.data(), 0.05, 2.0) - 1.0).abs() < 1e-12);
        let y = bandpass_filter(&x, 2.0, BAND_LO_HZ, BAND_HI_HZ).unwrap();
        let a = sine_amplitude(y.data(), 0.05, 2.0);
        assert!((a - 1.0).abs() < 0.01, "{a}");
        let z = bandpass_filter(&sine(0.2, 176, 2.0, 0.3), 2.0, BAND_LO_HZ, BAND_HI_HZ).unwrap();
        assert!(sine_amplitude(z.data(), 0.2, 2.0) < 0.01);
        // 0.2 Hz is not a DFT bin at this length; what survives is leakage
        // spread across the pass band, not a 0.2 Hz component.
        let rms = (2.0 * z.data().iter().map(|v| v * v).sum::<f64>() / 176.0).sqrt();
        assert!(rms < 0.05, "{rms}");
    }


    #[test]
    fn cutoffs_are_inclusive() {
        // n = 100, period 1: bin k sits at k / 100 Hz.
        let lo = sine(0.01, 100, 1.0, 0.0);
        let hi = sine(0.1, 100, 1.0, 0.0);
        let out = sine(0.11, 100, 1.0, 0.0);
        let f = |x: &Tensor<f64>| bandpass_filter(x, 1.0, 0.01, 0.1).unwrap();
        assert!(f(&lo).sub(&lo).unwrap().max_abs() < 1e-9);
        assert!(f(&hi).sub(&hi).unwrap().max_abs() < 1e-9);
        assert!(f(&out).max_abs() < 1e-9);
    }

    #[test]
    fn invalid_bands() {
        let x = Tensor::<f64>::zeros(&[16]).unwrap();
        assert!(bandpass_filter(&x, 2.0, 0.1, 0.01).is_err());
        assert!(bandpass_filter(&x, 2.0, 0.01, 0.3).is_err());
        assert!(bandpass_filter(&x, 0.0, 0.01, 0.1).is_err());
        assert!(bandpass_filter(&Tensor::<f64>::zeros(&[3]).unwrap(), 2.0, 0.01, 0.1).is_err());
    }

    #[test]
    fn block_average() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 2, 2, 2], |i| (i + 1) as f64).unwrap();
        let y = downsample_spatial(&x, [2, 2, 2]).unwrap();
        assert_eq!(y.dims(), &[1, 1, 1, 1, 1]);
        assert_eq!(y.data(), &[4.5]);
        let c = Tensor::<f32>::full(&[1, 1, 64, 64, 64, 2], 0.5).unwrap();
        let d = downsample_spatial(&c, [2, 2, 2]).unwrap();
        assert_eq!(d.dims(), &[1, 1, 32, 32, 32, 2]);
        assert!(d.data().iter().all(|&v| v == 0.5));
        assert!(downsample_spatial(&c, [0, 2, 2]).is_err());
    }

    #[test]
    fn ragged_extent_repeats_edge() {
        let x = Tensor::<f64>::from_data(&[1, 1, 3, 1, 1], vec![1.0, 2.0, 6.0]).unwrap();
        let y = downsample_spatial(&x, [2, 1, 1]).unwrap();
        assert_eq!(y.data(), &[1.5, 6.0]);
    }
}
