//! Square 2-D FFTs on row-major complex buffers.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::image::Image;

/// Cached forward/inverse plans for one square size.
///
/// `forward` is unnormalized; `inverse` divides by `side²` so that
/// `inverse(forward(x)) == x`.
#[derive(Clone)]
pub struct Fft2 {
    side: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft2").field("side", &self.side).finish()
    }
}

impl Fft2 {
    pub fn new(side: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            side,
            fwd: planner.plan_fft_forward(side),
            inv: planner.plan_fft_inverse(side),
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn forward(&self, buf: &mut [Complex64]) {
        self.run(buf, &self.fwd);
    }

    pub fn inverse(&self, buf: &mut [Complex64]) {
        self.run(buf, &self.inv);
        let scale = 1.0 / (self.side * self.side) as f64;
        buf.iter_mut().for_each(|v| *v *= scale);
    }

    fn run(&self, buf: &mut [Complex64], plan: &Arc<dyn Fft<f64>>) {
        let n = self.side;
        assert_eq!(buf.len(), n * n, "buffer does not match FFT size");
        let mut scratch = vec![Complex64::default(); plan.get_inplace_scratch_len()];
        plan.process_with_scratch(buf, &mut scratch);
        transpose_in_place(buf, n);
        plan.process_with_scratch(buf, &mut scratch);
        transpose_in_place(buf, n);
    }

    pub fn forward_real(&self, image: &Image) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = image.data().iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward(&mut buf);
        buf
    }

    /// Inverse transform keeping only the real part.
    pub fn inverse_real(&self, mut spectrum: Vec<Complex64>) -> Image {
        self.inverse(&mut spectrum);
        let data = spectrum.into_iter().map(|v| v.re).collect();
        Image::from_vec(self.side, data).expect("square buffer")
    }
}

fn transpose_in_place(buf: &mut [Complex64], n: usize) {
    for r in 0..n {
        for c in (r + 1)..n {
            buf.swap(r * n + c, c * n + r);
        }
    }
}

/// Signed frequency of FFT bin `i` for a transform of length `n`.
#[inline]
pub fn signed_freq(i: usize, n: usize) -> i64 {
    if i <= (n - 1) / 2 {
        i as i64
    } else {
        i as i64 - n as i64
    }
}

/// FFT bin holding signed frequency `f`, if it exists for length `n`.
#[inline]
pub fn bin_of(f: i64, n: usize) -> Option<usize> {
    let n_i = n as i64;
    let lo = -(n_i / 2);
    let hi = (n_i - 1) / 2;
    if f < lo || f > hi {
        None
    } else {
        Some(f.rem_euclid(n_i) as usize)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_dft(x: &[Complex64], n: usize) -> Vec<Complex64> {
        let mut out = vec![Complex64::default(); n * n];
        for u in 0..n {
            for v in 0..n {
                let mut acc = Complex64::default();
                for r in 0..n {
                    for c in 0..n {
                        let phase = -2.0 * std::f64::consts::PI * ((u * r + v * c) as f64) / n as f64;
                        acc += x[r * n + c] * Complex64::from_polar(1.0, phase);
                    }
                }
                out[u * n + v] = acc;
            }
        }
        out
    }

    #[test]
    fn matches_naive_dft() {
        for n in [5usize, 6] {
            let x: Vec<Complex64> = (0..n * n)
                .map(|i| Complex64::new((i as f64 * 0.7).sin(), (i as f64 * 0.3).cos()))
                .collect();
            let mut y = x.clone();
            Fft2::new(n).forward(&mut y);
            let z = naive_dft(&x, n);
            for (a, b) in y.iter().zip(&z) {
                assert!((a - b).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn round_trip() {
        let n = 8;
        let img = Image::from_fn(n, |r, c| (r as f64).sin() + c as f64);
        let fft = Fft2::new(n);
        let back = fft.inverse_real(fft.forward_real(&img));
        assert!(back.relative_error(&img) < 1e-14);
    }

    #[test]
    fn signed_freq_layout() {
        assert_eq!((0..5).map(|i| signed_freq(i, 5)).collect::<Vec<_>>(), vec![0, 1, 2, -2, -1]);
        assert_eq!((0..4).map(|i| signed_freq(i, 4)).collect::<Vec<_>>(), vec![0, 1, -2, -1]);
        assert_eq!(bin_of(-2, 4), Some(2));
        assert_eq!(bin_of(2, 4), None);
    }
}
