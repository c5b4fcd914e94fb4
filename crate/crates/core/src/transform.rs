//! In-plane rotations, shifts and mirrors of square images.
//!
//! Angles are radians in image coordinates `x = col - c`, `y = row - c`.
//! Rotating by `alpha` moves content from polar angle `phi` to `phi + alpha`,
//! with `phi = atan2(y, x)`.

use std::f64::consts::{FRAC_PI_2, PI};
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::fft::signed_freq;
use crate::image::Image;

/// Rotation with bilinear interpolation; samples outside the grid read as zero.
pub fn rotate_bilinear(image: &Image, alpha: f64) -> Image {
    let n = image.side();
    let c = image.center();
    let (s, co) = alpha.sin_cos();
    Image::from_fn(n, |r, col| {
        let (x, y) = (col as f64 - c, r as f64 - c);
        // source point R(-alpha) p
        let sx = co * x + s * y + c;
        let sy = -s * x + co * y + c;
        bilinear(image, sy, sx)
    })
}

fn bilinear(image: &Image, row: f64, col: f64) -> f64 {
    let n = image.side() as isize;
    let (r0, c0) = (row.floor(), col.floor());
    let (fr, fc) = (row - r0, col - c0);
    let (r0, c0) = (r0 as isize, c0 as isize);
    let px = |r: isize, c: isize| {
        if r < 0 || c < 0 || r >= n || c >= n {
            0.0
        } else {
            image.get(r as usize, c as usize)
        }
    };
    (1.0 - fr) * ((1.0 - fc) * px(r0, c0) + fc * px(r0, c0 + 1))
        + fr * ((1.0 - fc) * px(r0 + 1, c0) + fc * px(r0 + 1, c0 + 1))
}

/// Exact rotation by `quarter_turns * 90°` (pixel permutation about the center).
pub fn rotate_quarter(image: &Image, quarter_turns: i64) -> Image {
    let n = image.side();
    let m = n - 1;
    match quarter_turns.rem_euclid(4) {
        0 => image.clone(),
        1 => Image::from_fn(n, |r, c| image.get(m - c, r)),
        2 => Image::from_fn(n, |r, c| image.get(m - r, m - c)),
        _ => Image::from_fn(n, |r, c| image.get(c, m - r)),
    }
}

/// Circular shift by whole pixels: content moves by `dx` columns and `dy` rows.
pub fn roll(image: &Image, dx: i64, dy: i64) -> Image {
    let n = image.side();
    let ni = n as i64;
    Image::from_fn(n, |r, c| {
        let sr = (r as i64 - dy).rem_euclid(ni) as usize;
        let sc = (c as i64 - dx).rem_euclid(ni) as usize;
        image.get(sr, sc)
    })
}

/// Fourier-domain rotations and shifts for one image size.
///
/// Rotation is a quarter-turn permutation followed by three Fourier shears
/// for the residual angle in `[-45°, 45°]`. Every step is orthogonal, so
/// [`FourierRotator::rotate_adjoint`] is the exact inverse of
/// [`FourierRotator::rotate`]. For even sides the Nyquist term of each 1-D
/// shift is multiplied by `(-1)^round(d)` to stay real and orthogonal.
#[derive(Clone)]
pub struct FourierRotator {
    side: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for FourierRotator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FourierRotator").field("side", &self.side).finish()
    }
}

impl FourierRotator {
    pub fn new(side: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self { side, fwd: planner.plan_fft_forward(side), inv: planner.plan_fft_inverse(side) }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn rotate(&self, image: &Image, alpha: f64) -> Image {
        let (quarters, rest) = split_angle(alpha);
        let turned = rotate_quarter(image, quarters);
        self.shear_rotate(&turned, rest)
    }

    /// Transpose of [`Self::rotate`], which is also its inverse.
    pub fn rotate_adjoint(&self, image: &Image, alpha: f64) -> Image {
        let (quarters, rest) = split_angle(alpha);
        rotate_quarter(&self.shear_rotate(image, -rest), -quarters)
    }

    /// Translation by a (possibly fractional) pixel offset via phase ramps.
    pub fn shift(&self, image: &Image, dx: f64, dy: f64) -> Image {
        let rows = self.shear_rows(image, |_| dx);
        self.shear_cols(&rows, |_| dy)
    }

    /// Rotate then shift.
    pub fn apply(&self, image: &Image, alpha: f64, dx: f64, dy: f64) -> Image {
        let rotated = self.rotate(image, alpha);
        if dx == 0.0 && dy == 0.0 {
            rotated
        } else {
            self.shift(&rotated, dx, dy)
        }
    }

    /// Inverse of [`Self::apply`].
    pub fn apply_inverse(&self, image: &Image, alpha: f64, dx: f64, dy: f64) -> Image {
        let unshifted = if dx == 0.0 && dy == 0.0 { image.clone() } else { self.shift(image, -dx, -dy) };
        self.rotate_adjoint(&unshifted, alpha)
    }

    fn shear_rotate(&self, image: &Image, theta: f64) -> Image {
        if theta == 0.0 {
            return image.clone();
        }
        let c = image.center();
        let a = -(theta / 2.0).tan();
        let b = theta.sin();
        let first = self.shear_rows(image, |row| a * (row as f64 - c));
        let second = self.shear_cols(&first, |col| b * (col as f64 - c));
        self.shear_rows(&second, |row| a * (row as f64 - c))
    }

    /// Shift row `r` by `amount(r)` pixels along x.
    fn shear_rows(&self, image: &Image, amount: impl Fn(usize) -> f64) -> Image {
        let n = self.side;
        let mut out = image.clone();
        let mut buf = vec![Complex64::default(); n];
        let mut scratch = vec![Complex64::default(); self.fwd.get_inplace_scratch_len().max(self.inv.get_inplace_scratch_len())];
        for r in 0..n {
            let d = amount(r);
            if d == 0.0 {
                continue;
            }
            let row = &mut out.data_mut()[r * n..(r + 1) * n];
            self.shift_line(row, d, &mut buf, &mut scratch);
        }
        out
    }

    /// Shift column `c` by `amount(c)` pixels along y.
    fn shear_cols(&self, image: &Image, amount: impl Fn(usize) -> f64) -> Image {
        let n = self.side;
        let mut out = image.clone();
        let mut line = vec![0.0; n];
        let mut buf = vec![Complex64::default(); n];
        let mut scratch = vec![Complex64::default(); self.fwd.get_inplace_scratch_len().max(self.inv.get_inplace_scratch_len())];
        for c in 0..n {
            let d = amount(c);
            if d == 0.0 {
                continue;
            }
            for r in 0..n {
                line[r] = out.get(r, c);
            }
            self.shift_line(&mut line, d, &mut buf, &mut scratch);
            for r in 0..n {
                out.set(r, c, line[r]);
            }
        }
        out
    }

    fn shift_line(&self, line: &mut [f64], d: f64, buf: &mut [Complex64], scratch: &mut [Complex64]) {
        let n = self.side;
        for (b, &v) in buf.iter_mut().zip(line.iter()) {
            *b = Complex64::new(v, 0.0);
        }
        self.fwd.process_with_scratch(buf, scratch);
        for (k, b) in buf.iter_mut().enumerate() {
            if n % 2 == 0 && k == n / 2 {
                if (d.round() as i64) % 2 != 0 {
                    *b = -*b;
                }
                continue;
            }
            let f = signed_freq(k, n) as f64;
            *b *= Complex64::from_polar(1.0, -2.0 * PI * f * d / n as f64);
        }
        self.inv.process_with_scratch(buf, scratch);
        let scale = 1.0 / n as f64;
        for (v, b) in line.iter_mut().zip(buf.iter()) {
            *v = b.re * scale;
        }
    }
}

/// Split `alpha` into quarter turns and a residual in `[-pi/4, pi/4]`.
fn split_angle(alpha: f64) -> (i64, f64) {
    let q = (alpha / FRAC_PI_2).round();
    let rest = alpha - q * FRAC_PI_2;
    (q as i64, rest)
}

/// Rotate (Fourier, exact inverse available) then shift.
pub fn apply_transform(image: &Image, rotation: f64, dx: f64, dy: f64) -> Image {
    FourierRotator::new(image.side()).apply(image, rotation, dx, dy)
}
