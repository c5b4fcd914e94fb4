//! CTF phase flipping, noise whitening and Fourier-domain downsampling.
//!
//! All functions act on one image at a time; frequency grids use the FFT
//! layout of [`crate::fft`], DC at index 0.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex};

use num_complex::Complex64;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::fft::{bin_of, signed_freq, Fft2};
use crate::formats::CtfParams;
use crate::image::Image;

/// Relativistic electron wavelength in Å for an acceleration voltage in kV.
pub fn electron_wavelength(voltage_kv: f64) -> f64 {
    let v = voltage_kv * 1e3;
    12.264_324_7 / (v * (1.0 + 0.978_466e-6 * v)).sqrt()
}

/// Weak-phase CTF at spatial frequency `s` (1/Å) and azimuth `phi` (radians):
/// `-sqrt(1 - w²) sin(chi) - w cos(chi)` with
/// `chi = pi λ Δz(phi) s² - (pi/2) Cs λ³ s⁴ + phase_shift`.
pub fn ctf_value(params: &CtfParams, s: f64, phi: f64) -> f64 {
    let lambda = electron_wavelength(params.voltage);
    let cs = params.spherical_aberration * 1e7;
    let mean = 0.5 * (params.defocus_u + params.defocus_v);
    let half_diff = 0.5 * (params.defocus_u - params.defocus_v);
    let defocus = mean + half_diff * (2.0 * (phi - params.astigmatism_angle.to_radians())).cos();
    let s2 = s * s;
    let chi = PI * lambda * defocus * s2 - 0.5 * PI * cs * lambda.powi(3) * s2 * s2
        + params.phase_shift.to_radians();
    let w = params.amplitude_contrast;
    -(1.0 - w * w).sqrt() * chi.sin() - w * chi.cos()
}

/// A ±1 multiplier over the 2-D FFT grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SignGrid {
    side: usize,
    signs: Vec<f64>,
}

impl SignGrid {
    pub fn from_signs(side: usize, signs: Vec<f64>) -> Result<Self> {
        if signs.len() != side * side {
            return Err(Error::ShapeMismatch {
                expected: format!("{side}x{side} sign grid"),
                found: format!("{} entries", signs.len()),
            });
        }
        if signs.iter().any(|&s| s != 1.0 && s != -1.0) {
            return Err(invalid("sign grid entries must be +1 or -1"));
        }
        Ok(Self { side, signs })
    }

    pub fn ones(side: usize) -> Self {
        Self { side, signs: vec![1.0; side * side] }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn signs(&self) -> &[f64] {
        &self.signs
    }

    /// Sign at signed frequency (row, col).
    pub fn at(&self, fy: i64, fx: i64) -> f64 {
        let n = self.side;
        self.signs[bin_of(fy, n).unwrap() * n + bin_of(fx, n).unwrap()]
    }
}

/// `sign(CTF)` on the FFT grid of a `side`-pixel image; zeros map to +1.
pub fn ctf_sign(params: &CtfParams, side: usize, pixel_size: f64) -> SignGrid {
    let extent = side as f64 * pixel_size;
    let mut signs = Vec::with_capacity(side * side);
    for r in 0..side {
        let fy = signed_freq(r, side) as f64 / extent;
        for c in 0..side {
            let fx = signed_freq(c, side) as f64 / extent;
            let s = (fx * fx + fy * fy).sqrt();
            let v = ctf_value(params, s, fy.atan2(fx));
            signs.push(if v < 0.0 { -1.0 } else { 1.0 });
        }
    }
    SignGrid { side, signs }
}

/// Multiply the image spectrum by `sign` and transform back.
pub fn phase_flip(image: &Image, sign: &SignGrid) -> Result<Image> {
    if image.side() != sign.side {
        return Err(Error::ShapeMismatch {
            expected: format!("{0}x{0}", sign.side),
            found: format!("{0}x{0}", image.side()),
        });
    }
    if image.has_nan() {
        return Err(Error::NanPixels { index: 0 });
    }
    let fft = Fft2::new(image.side());
    let mut spec = fft.forward_real(image);
    for (v, s) in spec.iter_mut().zip(&sign.signs) {
        *v *= *s;
    }
    fft.inverse(&mut spec);
    let norm = image.norm().max(f64::MIN_POSITIVE);
    let imag = spec.iter().map(|v| v.im * v.im).sum::<f64>().sqrt();
    if imag > 1e-6 * norm {
        log::warn!("phase flip left imaginary residue {imag:.3e} (image norm {norm:.3e})");
    }
    let data = spec.into_iter().map(|v| v.re).collect();
    Image::from_vec(image.side(), data)
}

/// Caches sign grids per defocus group. Keys quantize defocus to 10 Å and
/// the astigmatism angle to 0.1°.
#[derive(Debug, Default)]
pub struct SignGridCache {
    grids: Mutex<HashMap<[i64; 7], Arc<SignGrid>>>,
}

impl SignGridCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, params: &CtfParams, side: usize, pixel_size: f64) -> Arc<SignGrid> {
        let key = [
            (params.defocus_u / 10.0).round() as i64,
            (params.defocus_v / 10.0).round() as i64,
            (params.astigmatism_angle * 10.0).round() as i64,
            (params.voltage * 10.0).round() as i64,
            (params.spherical_aberration * 1000.0).round() as i64,
            (params.amplitude_contrast * 1e4).round() as i64,
            (params.phase_shift * 10.0).round() as i64,
        ];
        if let Some(g) = self.grids.lock().unwrap().get(&key) {
            return Arc::clone(g);
        }
        let quantized = CtfParams {
            defocus_u: key[0] as f64 * 10.0,
            defocus_v: key[1] as f64 * 10.0,
            astigmatism_angle: key[2] as f64 / 10.0,
            ..*params
        };
        let grid = Arc::new(ctf_sign(&quantized, side, pixel_size));
        self.grids.lock().unwrap().entry(key).or_insert(grid).clone()
    }

    pub fn len(&self) -> usize {
        self.grids.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Radially averaged noise power spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpectrum {
    /// Power per radial frequency bin (bin width one FFT sample), `⌈side/2⌉` bins.
    pub radial_psd: Vec<f64>,
    /// Frequency samples that contributed to each bin.
    pub n_samples: Vec<usize>,
}

impl NoiseSpectrum {
    pub const FLOOR_RATIO: f64 = 1e-6;

    pub fn flat(bins: usize, level: f64) -> Self {
        Self { radial_psd: vec![level; bins], n_samples: vec![0; bins] }
    }

    /// Linear interpolation at radius `rho` (in FFT samples); the last bin
    /// extends to the grid corners.
    pub fn at(&self, rho: f64) -> f64 {
        let last = self.radial_psd.len() - 1;
        if rho >= last as f64 {
            return self.radial_psd[last];
        }
        let lo = rho.floor() as usize;
        let t = rho - lo as f64;
        self.radial_psd[lo] * (1.0 - t) + self.radial_psd[lo + 1] * t
    }

    fn clamp_floor(&mut self) {
        let max = self.radial_psd.iter().cloned().fold(0.0, f64::max);
        if !(max > 0.0) {
            log::warn!("noise spectrum is identically zero; using a unit spectrum");
            self.radial_psd.iter_mut().for_each(|v| *v = 1.0);
            return;
        }
        let floor = Self::FLOOR_RATIO * max;
        let mut clamped = 0;
        for v in &mut self.radial_psd {
            if *v < floor {
                *v = floor;
                clamped += 1;
            }
        }
        if clamped > 0 {
            log::warn!("{clamped} noise spectrum bins clamped to {floor:.3e}");
        }
    }
}

/// Up to `max_count` distinct indices drawn uniformly from `0..n`, sorted.
pub fn sample_indices(n: usize, max_count: usize, rng_seed: u64) -> Vec<usize> {
    if max_count >= n {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut picked = index::sample(&mut rng, n, max_count).into_vec();
    picked.sort_unstable();
    picked
}

/// Periodogram of the pixels outside the inscribed disk of `particle_radius`,
/// radially averaged and averaged over `images`.
pub fn estimate_noise_spectrum(images: &[Image], particle_radius: f64) -> Result<NoiseSpectrum> {
    let first = images.first().ok_or_else(|| invalid("noise estimation needs at least one image"))?;
    let n = first.side();
    if !(particle_radius < n as f64 / 2.0) {
        return Err(invalid(format!(
            "particle radius {particle_radius} must be below half the image side ({})",
            n as f64 / 2.0
        )));
    }
    let c = first.center();
    let r2 = particle_radius * particle_radius;
    let mask: Vec<bool> = (0..n * n)
        .map(|i| {
            let (y, x) = ((i / n) as f64 - c, (i % n) as f64 - c);
            x * x + y * y > r2
        })
        .collect();
    let n_out = mask.iter().filter(|&&m| m).count();
    if n_out == 0 {
        return Err(invalid("particle radius leaves no corner pixels for noise estimation"));
    }
    let bins = n.div_ceil(2);
    let bin_of_pixel: Vec<Option<usize>> = (0..n * n)
        .map(|i| {
            let fy = signed_freq(i / n, n) as f64;
            let fx = signed_freq(i % n, n) as f64;
            let b = (fx * fx + fy * fy).sqrt().round() as usize;
            (b < bins).then_some(b)
        })
        .collect();

    let fft = Fft2::new(n);
    let mut power = vec![0.0; bins];
    let mut counts = vec![0usize; bins];
    let mut buf = vec![Complex64::default(); n * n];
    for (idx, image) in images.iter().enumerate() {
        if image.side() != n {
            return Err(Error::ShapeMismatch { expected: format!("{n}x{n}"), found: format!("{0}x{0}", image.side()) });
        }
        if image.has_nan() {
            return Err(Error::NanPixels { index: idx });
        }
        for ((b, &v), &m) in buf.iter_mut().zip(image.data()).zip(&mask) {
            *b = Complex64::new(if m { v } else { 0.0 }, 0.0);
        }
        fft.forward(&mut buf);
        for (f, b) in buf.iter().zip(&bin_of_pixel) {
            if let Some(b) = *b {
                power[b] += f.norm_sqr();
                counts[b] += 1;
            }
        }
    }
    let radial_psd = power
        .iter()
        .zip(&counts)
        .map(|(p, &k)| if k > 0 { p / (k as f64 * n_out as f64) } else { 0.0 })
        .collect();
    let mut spectrum = NoiseSpectrum { radial_psd, n_samples: counts };
    spectrum.clamp_floor();
    Ok(spectrum)
}

/// Divide every Fourier coefficient by the square root of the radial PSD.
pub fn whiten(image: &Image, spectrum: &NoiseSpectrum) -> Image {
    let n = image.side();
    let fft = Fft2::new(n);
    let mut spec = fft.forward_real(image);
    for (i, v) in spec.iter_mut().enumerate() {
        let fy = signed_freq(i / n, n) as f64;
        let fx = signed_freq(i % n, n) as f64;
        *v /= spectrum.at((fx * fx + fy * fy).sqrt()).sqrt();
    }
    fft.inverse_real(spec)
}

/// Central Fourier crop to `target_side`, scaled by `(target/side)²` so
/// the DC level (and any in-band sinusoid) keeps its amplitude.
///
/// Only frequencies with `|f| <= (target_side - 1) / 2` on each axis are
/// kept, so for an even target the Nyquist row and column stay zero.
pub fn fourier_downsample(image: &Image, target_side: usize) -> Result<Image> {
    let n = image.side();
    if target_side > n {
        return Err(invalid(format!("downsample target {target_side} exceeds source size {n}")));
    }
    if target_side == 0 {
        return Err(invalid("downsample target must be positive"));
    }
    if target_side == n {
        return Ok(image.clone());
    }
    let m = target_side;
    let fft_src = Fft2::new(n);
    let spec = fft_src.forward_real(image);
    let half = ((m - 1) / 2) as i64;
    let scale = (m * m) as f64 / (n * n) as f64;
    let mut out = vec![Complex64::default(); m * m];
    for fy in -half..=half {
        let (dy, sy) = (bin_of(fy, m).unwrap(), bin_of(fy, n).unwrap());
        for fx in -half..=half {
            let (dx, sx) = (bin_of(fx, m).unwrap(), bin_of(fx, n).unwrap());
            out[dy * m + dx] = spec[sy * n + sx] * scale;
        }
    }
    Ok(Fft2::new(m).inverse_real(out))
}
